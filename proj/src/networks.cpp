#include "crgan/networks.hpp"

#include <cmath>

namespace crgan {

namespace F = torch::nn::functional;

namespace {

enum class Resample { none, down, up };

/// Pre-activation residual block: relu-conv3-relu-conv3 with a 1x1 shortcut
/// when the width or resolution changes.
class ResidualBlock : public torch::nn::Module {
public:
    ResidualBlock(int64_t in_channels, int64_t out_channels, Resample resample) : resample_(resample)
    {
        conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
        conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
        if (in_channels != out_channels || resample != Resample::none) {
            shortcut_ = register_module("shortcut", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1)));
        }
    }

    torch::Tensor forward(const torch::Tensor& x)
    {
        auto h = torch::relu(x);
        if (resample_ == Resample::up) {
            h = upsample(h);
        }
        h = conv2_->forward(torch::relu(conv1_->forward(h)));
        if (resample_ == Resample::down) {
            h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(2));
        }

        auto skip = x;
        if (resample_ == Resample::up) {
            skip = upsample(skip);
        }
        if (!shortcut_.is_empty()) {
            skip = shortcut_->forward(skip);
        }
        if (resample_ == Resample::down) {
            skip = F::avg_pool2d(skip, F::AvgPool2dFuncOptions(2));
        }
        return h + skip;
    }

private:
    static torch::Tensor upsample(const torch::Tensor& x)
    {
        return F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    }

    Resample resample_;
    torch::nn::Conv2d conv1_{nullptr};
    torch::nn::Conv2d conv2_{nullptr};
    torch::nn::Conv2d shortcut_{nullptr};
};

/// Shared trunk of E and D: conv stem, then residual downsampling blocks until
/// the feature map reaches `final_size`.
class DownTrunk : public torch::nn::Module {
public:
    DownTrunk(int image_size, int64_t channels, int final_size) : size_(image_size), width_(channels)
    {
        stem_ = register_module("stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(kImageChannels, channels, 3).padding(1)));
        int index = 0;
        while (size_ > final_size) {
            const int64_t next = next_width(width_, channels);
            blocks_.push_back(register_module("block" + std::to_string(index++), std::make_shared<ResidualBlock>(width_, next, Resample::down)));
            width_ = next;
            size_ /= 2;
        }
    }

    torch::Tensor forward(const torch::Tensor& x)
    {
        auto h = stem_->forward(x);
        for (auto& block : blocks_) {
            h = block->forward(h);
        }
        return h;
    }

    int64_t out_channels() const { return width_; }

    /// Width after one more halving: doubles, capped at 4x the base width.
    static int64_t next_width(int64_t width, int64_t channels) { return std::min<int64_t>(width * 2, channels * 4); }

private:
    int size_;
    int64_t width_;
    torch::nn::Conv2d stem_{nullptr};
    std::vector<std::shared_ptr<ResidualBlock>> blocks_;
};

/// 4x4 features flattened so the heads see where features are.
torch::Tensor head_features(const torch::Tensor& h)
{
    return torch::relu(h).flatten(1);
}

/// E: two towers shaped like D's trunk, one per head. The latent tower is
/// driven toward pose-invariant features by cross-reconstruction, so the view
/// head reads from its own tower.
class ResidualEncoder : public EncoderNet {
public:
    ResidualEncoder(int image_size, int64_t channels) : EncoderNet(image_size)
    {
        view_trunk_ = register_module("view_trunk", std::make_shared<DownTrunk>(image_size, channels, 4));
        latent_trunk_ = register_module("latent_trunk", std::make_shared<DownTrunk>(image_size, channels, 4));
        view_head_ = register_module("view_head", torch::nn::Linear(view_trunk_->out_channels() * 4 * 4, kViewCount));
        latent_head_ = register_module("latent_head", torch::nn::Linear(latent_trunk_->out_channels() * 4 * 4, kLatentDim));
    }

    EncoderOutput forward(const torch::Tensor& images) override
    {
        check_geometry(images, image_size());
        auto view = view_head_->forward(head_features(view_trunk_->forward(images)));
        auto latent = torch::tanh(latent_head_->forward(head_features(latent_trunk_->forward(images))));
        return {view, latent};
    }

private:
    std::shared_ptr<DownTrunk> view_trunk_;
    std::shared_ptr<DownTrunk> latent_trunk_;
    torch::nn::Linear view_head_{nullptr};
    torch::nn::Linear latent_head_{nullptr};
};

class ResidualDiscriminator : public DiscriminatorNet {
public:
    ResidualDiscriminator(int image_size, int64_t channels) : DiscriminatorNet(image_size)
    {
        trunk_ = register_module("trunk", std::make_shared<DownTrunk>(image_size, channels, 4));
        const int64_t features = trunk_->out_channels() * 4 * 4;
        view_head_ = register_module("view_head", torch::nn::Linear(features, kViewCount));
        score_head_ = register_module("score_head", torch::nn::Linear(features, 1));
    }

    CriticOutput forward(const torch::Tensor& images) override
    {
        check_geometry(images, image_size());
        auto h = head_features(trunk_->forward(images));
        return {view_head_->forward(h), score_head_->forward(h).squeeze(1)};
    }

private:
    std::shared_ptr<DownTrunk> trunk_;
    torch::nn::Linear view_head_{nullptr};
    torch::nn::Linear score_head_{nullptr};
};

class ResidualGenerator : public GeneratorNet {
public:
    ResidualGenerator(int image_size, int64_t channels) : GeneratorNet(image_size), top_width_(channels * 4)
    {
        input_ = register_module("input", torch::nn::Linear(kGeneratorInputDim, top_width_ * 4 * 4));
        int64_t width = top_width_;
        int index = 0;
        for (int size = 4; size < image_size; size *= 2) {
            // mirror of the down trunk: width c at full size, doubling per halving, capped at 4c
            const int64_t next = channels * std::clamp<int64_t>(image_size / (size * 2), 1, 4);
            blocks_.push_back(register_module("block" + std::to_string(index++), std::make_shared<ResidualBlock>(width, next, Resample::up)));
            width = next;
        }
        output_ = register_module("output", torch::nn::Conv2d(torch::nn::Conv2dOptions(width, kImageChannels, 3).padding(1)));
    }

    torch::Tensor forward(const torch::Tensor& views, const torch::Tensor& latents) override
    {
        if (views.dim() != 2 || views.size(1) != kViewCount || latents.dim() != 2 || latents.size(1) != kLatentDim
            || views.size(0) != latents.size(0)) {
            throw DomainError("generator expects views [B, 9] and latents [B, 119]");
        }
        auto h = input_->forward(torch::cat({views, latents}, 1)).view({-1, top_width_, 4, 4});
        for (auto& block : blocks_) {
            h = block->forward(h);
        }
        return torch::tanh(output_->forward(torch::relu(h)));
    }

private:
    int64_t top_width_;
    torch::nn::Linear input_{nullptr};
    std::vector<std::shared_ptr<ResidualBlock>> blocks_;
    torch::nn::Conv2d output_{nullptr};
};

} // namespace

void initialize_parameters(torch::nn::Module& module, RngStream& rng)
{
    torch::NoGradGuard no_grad;
    for (const auto& item : module.named_parameters(/*recurse=*/true)) {
        auto p = item.value();
        if (item.key().ends_with("bias")) {
            p.zero_();
            continue;
        }
        const int64_t fan_in = p.numel() / p.size(0);
        const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
        auto values = torch::empty({p.numel()}, torch::kFloat64);
        auto* v = values.data_ptr<double>();
        for (int64_t i = 0; i < values.numel(); ++i) {
            v[i] = stddev * rng.normal();
        }
        p.copy_(values.view(p.sizes()).to(p.dtype()));
    }
}

Networks build_networks(const TrainConfig& config, RngStream rng)
{
    if (config.image_size != 32 && config.image_size != 64) {
        throw ConfigError("unsupported image size " + std::to_string(config.image_size) + " (expected 32 or 64)");
    }
    if (config.channels < 8) {
        throw ConfigError("channel multiplier must be at least 8");
    }
    Networks nets;
    nets.encoder = std::make_shared<ResidualEncoder>(config.image_size, config.channels);
    nets.generator = std::make_shared<ResidualGenerator>(config.image_size, config.channels);
    nets.discriminator = std::make_shared<ResidualDiscriminator>(config.image_size, config.channels);
    auto e_rng = rng.split("init/encoder");
    auto g_rng = rng.split("init/generator");
    auto d_rng = rng.split("init/discriminator");
    initialize_parameters(*nets.encoder, e_rng);
    initialize_parameters(*nets.generator, g_rng);
    initialize_parameters(*nets.discriminator, d_rng);
    return nets;
}

int64_t parameter_count(const torch::nn::Module& module)
{
    int64_t n = 0;
    for (const auto& p : module.parameters()) {
        n += p.numel();
    }
    return n;
}

std::uint64_t parameter_hash(const torch::nn::Module& module)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : module.parameters()) {
        auto c = p.detach().contiguous();
        h = fnv1a64(std::string_view(static_cast<const char*>(c.data_ptr()), static_cast<std::size_t>(c.nbytes())), h);
    }
    return h;
}

std::vector<torch::Tensor> parameters_of(const torch::nn::Module& module)
{
    return module.parameters();
}

void check_geometry(const torch::Tensor& images, int image_size)
{
    if (images.dim() != 4 || images.size(1) != kImageChannels || images.size(2) != image_size || images.size(3) != image_size) {
        throw DomainError("expected images of shape [B, 3, " + std::to_string(image_size) + ", " + std::to_string(image_size) + "]");
    }
}

std::pair<std::array<float, kViewCount>, Latent> encode(EncoderNet& encoder, const Image& x)
{
    torch::NoGradGuard no_grad;
    auto out = encoder.forward(x.tensor().unsqueeze(0));
    auto logits = out.view_logits.to(torch::kFloat32).contiguous();
    auto latent = out.latent.to(torch::kFloat32).contiguous();
    std::array<float, kViewCount> l{};
    std::copy_n(logits.data_ptr<float>(), kViewCount, l.begin());
    std::array<float, kLatentDim> z{};
    std::copy_n(latent.data_ptr<float>(), kLatentDim, z.begin());
    return {l, Latent(z)};
}

Image generate(GeneratorNet& generator, const ViewCode& view, const Latent& z)
{
    torch::NoGradGuard no_grad;
    auto v = one_hot_views(torch::tensor({static_cast<int64_t>(view.index())}));
    return Image(generator.forward(v, z.to_tensor().unsqueeze(0))[0]);
}

std::pair<std::array<float, kViewCount>, float> discriminate(DiscriminatorNet& discriminator, const Image& x)
{
    torch::NoGradGuard no_grad;
    auto out = discriminator.forward(x.tensor().unsqueeze(0));
    auto logits = out.view_logits.to(torch::kFloat32).contiguous();
    std::array<float, kViewCount> l{};
    std::copy_n(logits.data_ptr<float>(), kViewCount, l.begin());
    return {l, out.score.item<float>()};
}

torch::Tensor generate_batch(GeneratorNet& generator, const torch::Tensor& view_indices, const torch::Tensor& latents)
{
    return generator.forward(one_hot_views(view_indices).to(latents.dtype()), latents);
}

} // namespace crgan
