#include "crgan/core.hpp"

#include <cmath>
#include <limits>

namespace crgan {

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

} // namespace

std::uint64_t mix64(std::uint64_t x)
{
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis)
{
    std::uint64_t h = basis;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t RngStream::next_u64()
{
    ++counter_;
    return mix64(seed_ + counter_ * kGolden);
}

double RngStream::uniform()
{
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::below(std::uint64_t n)
{
    if (n == 0) {
        throw DomainError("RngStream::below: empty range");
    }
    // rejection keeps the draw unbiased for any n
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    for (;;) {
        const std::uint64_t r = next_u64();
        if (r < limit) {
            return r % n;
        }
    }
}

double RngStream::normal()
{
    // Box-Muller; u1 is kept away from zero
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

RngStream RngStream::split(std::string_view name) const
{
    return RngStream(mix64(seed_ ^ mix64(fnv1a64(name) + counter_ * kGolden)));
}

ViewCode::ViewCode(int index) : index_(index)
{
    if (index < 0 || index >= kViewCount) {
        throw DomainError("view index " + std::to_string(index) + " outside 0..8");
    }
}

std::array<float, kViewCount> ViewCode::bins() const
{
    std::array<float, kViewCount> out{};
    out[static_cast<std::size_t>(index_)] = 1.0f;
    return out;
}

ViewDistribution::ViewDistribution(const std::array<double, kViewCount>& probs) : probs_(probs)
{
    double sum = 0.0;
    for (double p : probs_) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw DomainError("view distribution entries must be finite and nonnegative");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-5) {
        throw DomainError("view distribution must sum to 1");
    }
}

ViewDistribution ViewDistribution::from_logits(const std::array<double, kViewCount>& logits)
{
    double top = logits[0];
    for (double l : logits) {
        top = std::max(top, l);
    }
    std::array<double, kViewCount> p{};
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - top);
        sum += p[i];
    }
    for (double& v : p) {
        v /= sum;
    }
    return ViewDistribution(p);
}

Latent::Latent(const std::array<float, kLatentDim>& code) : code_(code)
{
    for (float c : code_) {
        if (!(c >= -1.0f && c <= 1.0f)) {
            throw DomainError("latent component outside [-1, 1]");
        }
    }
}

torch::Tensor Latent::to_tensor() const
{
    return torch::from_blob(const_cast<float*>(code_.data()), {kLatentDim}, torch::kFloat32).clone();
}

Image::Image(torch::Tensor chw)
{
    if (chw.dim() != 3 || chw.size(0) != kImageChannels || chw.size(1) < 1 || chw.size(2) < 1) {
        throw DomainError("image must be a 3 x H x W tensor");
    }
    data_ = chw.detach().to(torch::kFloat32).contiguous().clone();
    if (!torch::isfinite(data_).all().item<bool>()) {
        throw DomainError("image contains non-finite values");
    }
    if (data_.min().item<float>() < -1.0f || data_.max().item<float>() > 1.0f) {
        throw DomainError("image values outside [-1, 1]");
    }
}

Latent sample_latent(RngStream& rng)
{
    std::array<float, kLatentDim> code{};
    for (float& c : code) {
        c = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    return Latent(code);
}

torch::Tensor sample_latents(RngStream& rng, int64_t n)
{
    auto out = torch::empty({n, kLatentDim}, torch::kFloat32);
    auto* p = out.data_ptr<float>();
    for (int64_t i = 0; i < n * kLatentDim; ++i) {
        p[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    return out;
}

ViewCode one_hot_view(int index)
{
    return ViewCode(index);
}

int view_bin_of_angle(double yaw_degrees)
{
    if (!(yaw_degrees >= kMinYaw && yaw_degrees <= kMaxYaw)) {
        throw DomainError("yaw " + std::to_string(yaw_degrees) + " outside [-60, 60]");
    }
    // floor(x + 0.5) sends exact midpoints to the larger grid angle
    return static_cast<int>(std::floor((yaw_degrees - kMinYaw) / kYawStep + 0.5));
}

double angle_of_view_bin(int bin)
{
    ViewCode check(bin);
    return kMinYaw + kYawStep * check.index();
}

ViewCode nearest_one_hot(const ViewDistribution& dist)
{
    const auto& p = dist.probs();
    int best = 0;
    for (int i = 1; i < kViewCount; ++i) {
        if (p[static_cast<std::size_t>(i)] > p[static_cast<std::size_t>(best)]) {
            best = i;
        }
    }
    return ViewCode(best);
}

torch::Tensor one_hot_views(const torch::Tensor& indices)
{
    if (indices.numel() > 0 && (indices.min().item<int64_t>() < 0 || indices.max().item<int64_t>() >= kViewCount)) {
        throw DomainError("view index outside 0..8");
    }
    return torch::one_hot(indices.to(torch::kInt64), kViewCount).to(torch::kFloat32);
}

torch::Tensor argmax_lowest(const torch::Tensor& scores)
{
    auto top = std::get<0>(scores.max(1, /*keepdim=*/true));
    auto positions = torch::arange(scores.size(1), torch::TensorOptions().dtype(torch::kInt64)).expand_as(scores);
    auto candidates = torch::where(scores.eq(top), positions, torch::full_like(positions, scores.size(1)));
    return std::get<0>(candidates.min(1));
}

} // namespace crgan
