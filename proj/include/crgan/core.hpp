#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <torch/torch.h>

namespace crgan {

inline constexpr int kViewCount = 9;
inline constexpr int kLatentDim = 119;
inline constexpr int kGeneratorInputDim = kViewCount + kLatentDim;
inline constexpr int kImageChannels = 3;
inline constexpr double kMinYaw = -60.0;
inline constexpr double kMaxYaw = 60.0;
inline constexpr double kYawStep = 15.0;

/// Raised when an argument lies outside an operation's domain.
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a loss or gradient becomes non-finite.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a caller breaks a documented pairing or ordering contract.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Counter-based random stream. Draw n of a stream is a pure function of
/// (seed, n), so streams can be split, copied and replayed freely.
class RngStream {
public:
    RngStream() = default;
    explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64();
    /// Uniform on [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    double normal();

    /// Independent child stream keyed by name; does not advance this stream.
    RngStream split(std::string_view name) const;

    bool operator==(const RngStream&) const = default;

private:
    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// One-hot view code over the 9 yaw bins.
class ViewCode {
public:
    explicit ViewCode(int index);

    int index() const { return index_; }
    std::array<float, kViewCount> bins() const;

    bool operator==(const ViewCode&) const = default;

private:
    int index_;
};

/// Probability vector over the 9 yaw bins.
class ViewDistribution {
public:
    explicit ViewDistribution(const std::array<double, kViewCount>& probs);
    static ViewDistribution from_logits(const std::array<double, kViewCount>& logits);

    const std::array<double, kViewCount>& probs() const { return probs_; }

private:
    std::array<double, kViewCount> probs_;
};

/// Identity code; every component lies in [-1, 1].
class Latent {
public:
    explicit Latent(const std::array<float, kLatentDim>& code);

    const std::array<float, kLatentDim>& code() const { return code_; }
    torch::Tensor to_tensor() const;

private:
    std::array<float, kLatentDim> code_;
};

/// Single C x H x W raster with values in [-1, 1].
class Image {
public:
    /// Validates shape, finiteness and range; stores a contiguous float copy.
    explicit Image(torch::Tensor chw);

    const torch::Tensor& tensor() const { return data_; }
    int height() const { return static_cast<int>(data_.size(1)); }
    int width() const { return static_cast<int>(data_.size(2)); }
    int channels() const { return static_cast<int>(data_.size(0)); }

private:
    torch::Tensor data_;
};

Latent sample_latent(RngStream& rng);
ViewCode one_hot_view(int index);
int view_bin_of_angle(double yaw_degrees);
double angle_of_view_bin(int bin);
ViewCode nearest_one_hot(const ViewDistribution& dist);

/// Batch of uniform latents, shape [n, 119].
torch::Tensor sample_latents(RngStream& rng, int64_t n);
/// Batch of one-hot rows, shape [n, 9], from int64 view indices.
torch::Tensor one_hot_views(const torch::Tensor& indices);
/// Row-wise argmax with lowest-index tie-break.
torch::Tensor argmax_lowest(const torch::Tensor& scores);

} // namespace crgan
