#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "crgan/core.hpp"
#include "crgan/data.hpp"
#include "crgan/networks.hpp"

namespace crgan {

// ---------------------------------------------------------------------------
// Report

/// Metric map with sample counts and the fingerprint of the evaluated model.
struct EvalReport {
    std::map<std::string, double> metrics;
    std::map<std::string, int64_t> counts;
    std::map<std::string, std::string> notes;
    std::uint64_t fingerprint = 0;

    /// Throws NumericalError on a non-finite metric, ContractError on a non-positive count.
    void validate() const;
    /// `key = value` lines: fingerprint, metric.<k>, count.<k>, note.<k>.
    std::string render() const;
    static EvalReport parse(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static EvalReport load(const std::filesystem::path& path);
};

// ---------------------------------------------------------------------------
// View estimation

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double view_accuracy(const torch::Tensor& logits, const std::vector<int>& labels);
double eval_view_accuracy(EncoderNet& encoder, const LabeledCorpus& corpus);

// ---------------------------------------------------------------------------
// Cross-reconstruction

/// Mean L1 of G(v_j, E_z(x_i)) against x_j over ordered same-identity pairs
/// with distinct views. All pairs are used when `max_pairs` is 0, otherwise a
/// seeded uniform subset of that size.
double eval_cross_reconstruction(EncoderNet& encoder, GeneratorNet& generator, const LabeledCorpus& corpus,
                                 int64_t max_pairs = 0, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Identity embedder

struct EmbedderOptions {
    int feature_dim = 64;
    int width = 16;
    int batch_size = 64;
    int max_epochs = 200;
    double learning_rate = 2e-3;
    double target_accuracy = 0.95;
    double logit_scale = 16.0;
};

/// Small convolutional identity classifier. Its penultimate features,
/// unit-normalized, are the embedding; classification is by cosine similarity
/// to per-identity weight vectors.
class IdentityEmbedder {
public:
    class Module;

    IdentityEmbedder(std::shared_ptr<Module> module, std::vector<int> identities, double logit_scale, double train_accuracy);

    /// [B, 3, S, S] -> [B, feature_dim], each row of unit norm.
    torch::Tensor embed(const torch::Tensor& images) const;
    torch::Tensor embed(const Image& image) const;
    /// Identity logits for a batch.
    torch::Tensor classify(const torch::Tensor& images) const;

    int feature_dim() const;
    int image_size() const;
    const std::vector<int>& identities() const { return identities_; }
    double train_accuracy() const { return train_accuracy_; }
    std::uint64_t parameter_hash() const;

private:
    std::shared_ptr<Module> module_;
    std::vector<int> identities_;
    double logit_scale_;
    double train_accuracy_;
};

/// Trains on every image of the corpus until train identity accuracy reaches
/// the target. Throws NumericalError if the epoch budget runs out first.
IdentityEmbedder train_identity_embedder(const LabeledCorpus& corpus, std::uint64_t seed, const EmbedderOptions& options = {});

/// Squared embedding distance between each image and the corresponding row.
torch::Tensor squared_distances(const torch::Tensor& a, const torch::Tensor& b);

// ---------------------------------------------------------------------------
// Identity preservation and latent coverage

/// Mean squared embedding distance between the source image and each of the
/// nine views generated from its encoding.
double eval_identity_similarity(EncoderNet& encoder, GeneratorNet& generator, const IdentityEmbedder& embedder,
                                const LabeledCorpus& corpus);

struct CoverageResult {
    double proxy = 0.0;     ///< mean squared distance to the nearest reference embedding
    double diversity = 0.0; ///< mean pairwise squared distance among generated embeddings
    int64_t draws = 0;
};

/// Generates `n` images from uniform latents at uniformly drawn views.
CoverageResult eval_latent_coverage(GeneratorNet& generator, const IdentityEmbedder& embedder, const LabeledCorpus& reference,
                                    int64_t n, RngStream rng);

/// Coverage statistics of already embedded generated images.
CoverageResult coverage_of(const torch::Tensor& generated, const torch::Tensor& reference);

// ---------------------------------------------------------------------------
// Whole-model evaluation

struct EvalOptions {
    int64_t coverage_draws = 500;
    int64_t max_pairs = 0;
    std::uint64_t seed = 0;
};

/// view_accuracy, cross_recon_l1, identity_similarity, latent_coverage, diversity.
EvalReport evaluate(Networks& nets, const LabeledCorpus& corpus, const IdentityEmbedder& embedder, std::uint64_t fingerprint,
                    const EvalOptions& options = {});

/// Adds delta_<metric> = model - baseline and a verdict per ablation metric.
void add_baseline_comparison(EvalReport& model, const EvalReport& baseline);

// ---------------------------------------------------------------------------
// Export

/// Tab-separated: header, then identity, view and feature columns per image.
int64_t export_embeddings(const torch::Tensor& features, const LabeledCorpus& corpus, const std::filesystem::path& path);
int64_t export_embeddings(EncoderNet& encoder, const LabeledCorpus& corpus, const std::filesystem::path& path);
int64_t export_embeddings(const IdentityEmbedder& embedder, const LabeledCorpus& corpus, const std::filesystem::path& path);

} // namespace crgan
