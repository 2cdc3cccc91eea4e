#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include <torch/torch.h>

#include "crgan/core.hpp"
#include "crgan/losses.hpp"

namespace crgan {

struct LabeledSample {
    Image image;
    ViewCode view;
    int identity;
};

struct UnlabeledSample {
    Image image;
};

/// Images stacked as [N, 3, S, S] with a view bin and identity per row.
class LabeledCorpus {
public:
    LabeledCorpus() = default;
    LabeledCorpus(torch::Tensor images, std::vector<int> views, std::vector<int> identities);

    int64_t size() const { return static_cast<int64_t>(views_.size()); }
    bool empty() const { return views_.empty(); }
    int image_size() const { return images_.defined() ? static_cast<int>(images_.size(2)) : 0; }
    const torch::Tensor& images() const { return images_; }
    int view(int64_t i) const { return views_[static_cast<std::size_t>(i)]; }
    int identity(int64_t i) const { return identities_[static_cast<std::size_t>(i)]; }
    const std::vector<int>& views() const { return views_; }
    const std::vector<int>& identities() const { return identities_; }
    LabeledSample sample(int64_t i) const;

    /// Sorted distinct identity ids.
    std::vector<int> identity_ids() const;
    const std::vector<int64_t>& indices_of(int identity) const;
    /// Number of distinct view bins present for an identity.
    int view_count(int identity) const;

    LabeledCorpus subset(const std::vector<int64_t>& indices) const;
    torch::Tensor gather_images(const std::vector<int64_t>& indices) const;
    torch::Tensor gather_views(const std::vector<int64_t>& indices) const;

private:
    torch::Tensor images_;
    std::vector<int> views_;
    std::vector<int> identities_;
    std::map<int, std::vector<int64_t>> by_identity_;
};

class UnlabeledCorpus {
public:
    UnlabeledCorpus() = default;
    explicit UnlabeledCorpus(torch::Tensor images);

    int64_t size() const { return images_.defined() ? images_.size(0) : 0; }
    bool empty() const { return size() == 0; }
    int image_size() const { return images_.defined() ? static_cast<int>(images_.size(2)) : 0; }
    const torch::Tensor& images() const { return images_; }
    UnlabeledSample sample(int64_t i) const { return {Image(images_[i])}; }
    torch::Tensor gather_images(const std::vector<int64_t>& indices) const;

private:
    torch::Tensor images_;
};

// ---------------------------------------------------------------------------
// Synthetic multi-view renderer

enum class PrimitiveKind { box, ellipsoid, prism };

/// Appearance of one synthetic identity.
struct IdentitySpec {
    std::uint64_t seed = 0;
    PrimitiveKind kind = PrimitiveKind::box;
    std::array<double, 3> color{};         ///< base albedo, each in [0, 1]
    std::array<double, 3> extents{};       ///< half sizes along x, y, z
    double pattern_frequency = 1.0;        ///< stripe cycles per unit height
    std::array<double, 3> marker_offset{}; ///< direction from the centre to the marker
    bool marker = true;
};

IdentitySpec make_identity_spec(std::uint64_t corpus_seed, int identity);

/// Orthographic render at `yaw_degrees`, values in [-1, 1], background -1.
Image render_view(const IdentitySpec& spec, double yaw_degrees, int image_size);

/// n_identities x 9 images, identity-major then view-ascending.
LabeledCorpus make_corpus(int n_identities, int image_size, std::uint64_t corpus_seed);

// ---------------------------------------------------------------------------
// Pairing and splitting

/// Two samples of one identity at distinct views, drawn without replacement.
std::pair<LabeledSample, LabeledSample> sample_identity_pair(const LabeledCorpus& corpus, int identity, RngStream& rng);
std::pair<int64_t, int64_t> sample_identity_pair_indices(const LabeledCorpus& corpus, int identity, RngStream& rng);
/// Uniformly chosen same-identity sample with a different view than `index`.
int64_t sample_partner(const LabeledCorpus& corpus, int64_t index, RngStream& rng);

/// Identity-disjoint split; round(fraction * identities) go to the first part.
std::pair<LabeledCorpus, LabeledCorpus> split_corpus(const LabeledCorpus& corpus, double train_fraction, std::uint64_t seed);

/// Withholds labels from round(fraction * identities) identities.
std::pair<LabeledCorpus, UnlabeledCorpus> strip_labels(const LabeledCorpus& corpus, double fraction, std::uint64_t seed);

/// Deterministic epoch-ordered pair batches over a labeled corpus. Batch k of
/// epoch e depends only on (seed, e, k), so any batch can be regenerated.
class PairSampler {
public:
    PairSampler(const LabeledCorpus& corpus, int batch_size, RngStream rng);

    int64_t steps_per_epoch() const;
    int batch_size() const { return batch_size_; }
    PairBatch batch(int64_t epoch, int64_t index);

private:
    const std::vector<int64_t>& order(int64_t epoch);

    const LabeledCorpus* corpus_;
    int batch_size_;
    RngStream rng_;
    std::vector<int64_t> eligible_;
    int64_t cached_epoch_ = -1;
    std::vector<int64_t> cached_order_;
};

/// Labeled/unlabeled interleaving for the self-supervised stage.
struct MixedBatch {
    PairBatch labeled;
    torch::Tensor unlabeled;
    std::vector<int64_t> unlabeled_indices;

    bool has_labeled() const { return labeled.x_i.defined() && labeled.size() > 0; }
    bool has_unlabeled() const { return unlabeled.defined() && unlabeled.size(0) > 0; }
};

class MixedSampler {
public:
    MixedSampler(const LabeledCorpus& labeled, const UnlabeledCorpus& unlabeled, int batch_size, RngStream rng);

    int64_t steps_per_epoch() const;
    MixedBatch batch(int64_t epoch, int64_t index);

private:
    const LabeledCorpus* labeled_;
    const UnlabeledCorpus* unlabeled_;
    int batch_size_;
    RngStream rng_;
    std::vector<int64_t> eligible_;
    int64_t cached_epoch_ = -1;
    std::vector<int64_t> cached_order_;
};

/// Gathers a pair batch from explicit (i, j) index pairs.
PairBatch make_pair_batch(const LabeledCorpus& corpus, const std::vector<std::pair<int64_t, int64_t>>& pairs);

// ---------------------------------------------------------------------------
// On-disk corpora

/// `<dir>/identity_<id>/view_<bin>.png` plus `manifest.json`.
void save_corpus(const LabeledCorpus& corpus, const std::filesystem::path& dir, std::uint64_t corpus_seed);
LabeledCorpus load_corpus(const std::filesystem::path& dir);

/// Folder of PNG rasters. With a labels file (`filename<TAB>identity<TAB>yaw`)
/// the result is labeled; without one it is unlabeled. Unreadable files are
/// skipped with a warning on stderr.
std::variant<LabeledCorpus, UnlabeledCorpus> load_folder(const std::filesystem::path& dir,
                                                         const std::optional<std::filesystem::path>& labels, int image_size);

/// Center-crop to a square and area-resample to `image_size`; exact-size input passes through.
torch::Tensor fit_image(const torch::Tensor& chw, int image_size);

} // namespace crgan
