#pragma once

#include <array>
#include <memory>
#include <utility>

#include <torch/torch.h>

#include "crgan/config.hpp"
#include "crgan/core.hpp"

namespace crgan {

struct EncoderOutput {
    torch::Tensor view_logits; ///< [B, 9]
    torch::Tensor latent;      ///< [B, 119], components in [-1, 1]
};

struct CriticOutput {
    torch::Tensor view_logits; ///< [B, 9]
    torch::Tensor score;       ///< [B], unbounded realism score
};

/// E: image -> (view logits, identity code).
class EncoderNet : public torch::nn::Module {
public:
    explicit EncoderNet(int image_size) : image_size_(image_size) {}
    virtual EncoderOutput forward(const torch::Tensor& images) = 0;
    int image_size() const { return image_size_; }

private:
    int image_size_;
};

/// G: (one-hot view [B, 9], latent [B, 119]) -> images [B, 3, H, W] in [-1, 1].
class GeneratorNet : public torch::nn::Module {
public:
    explicit GeneratorNet(int image_size) : image_size_(image_size) {}
    virtual torch::Tensor forward(const torch::Tensor& views, const torch::Tensor& latents) = 0;
    int image_size() const { return image_size_; }

private:
    int image_size_;
};

/// D: image -> (view logits, realism score). No batch-coupled layers, so each
/// sample's score depends on that sample alone.
class DiscriminatorNet : public torch::nn::Module {
public:
    explicit DiscriminatorNet(int image_size) : image_size_(image_size) {}
    virtual CriticOutput forward(const torch::Tensor& images) = 0;
    int image_size() const { return image_size_; }

private:
    int image_size_;
};

using EncoderPtr = std::shared_ptr<EncoderNet>;
using GeneratorPtr = std::shared_ptr<GeneratorNet>;
using DiscriminatorPtr = std::shared_ptr<DiscriminatorNet>;

struct Networks {
    EncoderPtr encoder;
    GeneratorPtr generator;
    DiscriminatorPtr discriminator;
};

/// Residual stacks (three blocks at 32x32, four at 64x64) with `channels` as base width.
Networks build_networks(const TrainConfig& config, RngStream rng);

/// Weights ~ N(0, 1/fan_in), biases zero, drawn in registration order.
void initialize_parameters(torch::nn::Module& module, RngStream& rng);

int64_t parameter_count(const torch::nn::Module& module);
/// FNV-1a over the raw bytes of every parameter, in registration order.
std::uint64_t parameter_hash(const torch::nn::Module& module);
std::vector<torch::Tensor> parameters_of(const torch::nn::Module& module);

/// Checks a [B, 3, S, S] batch against a network's geometry.
void check_geometry(const torch::Tensor& images, int image_size);

std::pair<std::array<float, kViewCount>, Latent> encode(EncoderNet& encoder, const Image& x);
Image generate(GeneratorNet& generator, const ViewCode& view, const Latent& z);
std::pair<std::array<float, kViewCount>, float> discriminate(DiscriminatorNet& discriminator, const Image& x);

/// Batched G forward from int64 view indices.
torch::Tensor generate_batch(GeneratorNet& generator, const torch::Tensor& view_indices, const torch::Tensor& latents);

} // namespace crgan
