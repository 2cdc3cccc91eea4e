#include <cmath>
#include <limits>
#include <optional>

#include "crgan/data.hpp"

namespace crgan {

namespace {

using Vec3 = std::array<double, 3>;

constexpr double kViewHalfWidth = 1.25;
constexpr double kPitchDegrees = 20.0;
constexpr double kAmbient = 0.3;
constexpr double kMarkerRadius = 0.3;
constexpr int kSuperSamples = 3;

double dot(const Vec3& a, const Vec3& b)
{
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

Vec3 scale(const Vec3& a, double s)
{
    return {a[0] * s, a[1] * s, a[2] * s};
}

Vec3 add(const Vec3& a, const Vec3& b)
{
    return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}

Vec3 normalized(const Vec3& a)
{
    return scale(a, 1.0 / std::sqrt(dot(a, a)));
}

struct Mat3 {
    std::array<Vec3, 3> rows;

    Vec3 apply(const Vec3& v) const { return {dot(rows[0], v), dot(rows[1], v), dot(rows[2], v)}; }
    Vec3 apply_transposed(const Vec3& v) const
    {
        return add(add(scale(rows[0], v[0]), scale(rows[1], v[1])), scale(rows[2], v[2]));
    }
};

Mat3 rotation_y(double radians)
{
    const double c = std::cos(radians);
    const double s = std::sin(radians);
    return {{Vec3{c, 0, s}, Vec3{0, 1, 0}, Vec3{-s, 0, c}}};
}

Mat3 rotation_x(double radians)
{
    const double c = std::cos(radians);
    const double s = std::sin(radians);
    return {{Vec3{1, 0, 0}, Vec3{0, c, -s}, Vec3{0, s, c}}};
}

struct Plane {
    Vec3 normal; ///< outward, unit length
    double offset;
};

struct Hit {
    double t_in;
    double t_out;
    Vec3 normal_in; ///< object-frame outward normal at entry
};

std::vector<Plane> planes_of(const IdentitySpec& spec)
{
    const auto [a, b, c] = spec.extents;
    std::vector<Plane> planes = {
        {{0, 1, 0}, b},
        {{0, -1, 0}, b},
        {{0, 0, -1}, c},
    };
    if (spec.kind == PrimitiveKind::box) {
        planes.push_back({{1, 0, 0}, a});
        planes.push_back({{-1, 0, 0}, a});
        planes.push_back({{0, 0, 1}, c});
    } else {
        // triangular cross-section in x-z with its apex toward +z
        const double len = std::sqrt(4.0 * c * c + a * a);
        planes.push_back({{2.0 * c / len, 0, a / len}, a * c / len});
        planes.push_back({{-2.0 * c / len, 0, a / len}, a * c / len});
    }
    return planes;
}

std::optional<Hit> intersect(const IdentitySpec& spec, const Vec3& origin, const Vec3& dir)
{
    if (spec.kind == PrimitiveKind::ellipsoid) {
        const auto& r = spec.extents;
        const Vec3 o{origin[0] / r[0], origin[1] / r[1], origin[2] / r[2]};
        const Vec3 d{dir[0] / r[0], dir[1] / r[1], dir[2] / r[2]};
        const double qa = dot(d, d);
        const double qb = 2.0 * dot(o, d);
        const double qc = dot(o, o) - 1.0;
        const double disc = qb * qb - 4.0 * qa * qc;
        if (disc < 0.0) {
            return std::nullopt;
        }
        const double root = std::sqrt(disc);
        const double t0 = (-qb - root) / (2.0 * qa);
        const double t1 = (-qb + root) / (2.0 * qa);
        const Vec3 p = add(origin, scale(dir, t0));
        const Vec3 n = normalized({p[0] / (r[0] * r[0]), p[1] / (r[1] * r[1]), p[2] / (r[2] * r[2])});
        return Hit{t0, t1, n};
    }
    double t_in = -std::numeric_limits<double>::infinity();
    double t_out = std::numeric_limits<double>::infinity();
    Vec3 n_in{0, 0, 0};
    for (const auto& plane : planes_of(spec)) {
        const double denom = dot(plane.normal, dir);
        const double num = plane.offset - dot(plane.normal, origin);
        if (std::abs(denom) < 1e-12) {
            if (num < 0.0) {
                return std::nullopt;
            }
            continue;
        }
        const double t = num / denom;
        if (denom < 0.0) {
            if (t > t_in) {
                t_in = t;
                n_in = plane.normal;
            }
        } else {
            t_out = std::min(t_out, t);
        }
    }
    if (t_in > t_out) {
        return std::nullopt;
    }
    return Hit{t_in, t_out, n_in};
}

Vec3 marker_anchor(const IdentitySpec& spec)
{
    const Vec3 dir = normalized(spec.marker_offset);
    const auto hit = intersect(spec, {0, 0, 0}, dir);
    return scale(dir, hit ? hit->t_out : 0.0);
}

Vec3 marker_color(const IdentitySpec& spec)
{
    Vec3 out{};
    for (std::size_t k = 0; k < 3; ++k) {
        out[k] = spec.color[k] < 0.55 ? 0.95 : 0.08;
    }
    return out;
}

} // namespace

IdentitySpec make_identity_spec(std::uint64_t corpus_seed, int identity)
{
    auto rng = RngStream(corpus_seed).split("identity/" + std::to_string(identity));
    IdentitySpec spec;
    spec.seed = rng.split("seed").next_u64();
    spec.kind = static_cast<PrimitiveKind>(rng.below(3));
    for (auto& c : spec.color) {
        c = rng.uniform(0.2, 1.0);
    }
    spec.extents = {rng.uniform(0.55, 0.8), rng.uniform(0.55, 0.8), rng.uniform(0.35, 0.55)};
    spec.pattern_frequency = rng.uniform(0.5, 2.5);
    // the marker always sits on the +x side; a per-identity side would make
    // an identity at +yaw the mirror image of another at -yaw
    spec.marker_offset = {rng.uniform(0.6, 0.8), rng.uniform(-0.2, 0.2), rng.uniform(0.45, 0.65)};
    spec.marker = true;
    return spec;
}

Image render_view(const IdentitySpec& spec, double yaw_degrees, int image_size)
{
    if (image_size < 1) {
        throw DomainError("image size must be positive");
    }
    // camera = pitch * yaw * object
    const Mat3 yaw = rotation_y(yaw_degrees * M_PI / 180.0);
    const Mat3 pitch = rotation_x(kPitchDegrees * M_PI / 180.0);
    const Vec3 light = normalized({-0.6, 0.5, 1.0});
    const Vec3 anchor = marker_anchor(spec);
    const Vec3 marker_rgb = marker_color(spec);

    const Vec3 dir_cam{0, 0, -1};
    const Vec3 dir_obj = yaw.apply_transposed(pitch.apply_transposed(dir_cam));

    auto out = torch::empty({kImageChannels, image_size, image_size}, torch::kFloat32);
    auto acc = out.accessor<float, 3>();
    const double s = static_cast<double>(image_size);
    for (int row = 0; row < image_size; ++row) {
        for (int col = 0; col < image_size; ++col) {
            Vec3 rgb{0, 0, 0};
            for (int sy = 0; sy < kSuperSamples; ++sy) {
                for (int sx = 0; sx < kSuperSamples; ++sx) {
                    // integer numerators keep mirrored pixels exactly negated
                    const double ox = (sx - (kSuperSamples - 1) / 2.0) * 2.0 / kSuperSamples;
                    const double oy = (sy - (kSuperSamples - 1) / 2.0) * 2.0 / kSuperSamples;
                    const double u = ((2.0 * col + 1.0 - s) + ox) / s * kViewHalfWidth;
                    const double v = -((2.0 * row + 1.0 - s) + oy) / s * kViewHalfWidth;
                    const Vec3 origin_obj = yaw.apply_transposed(pitch.apply_transposed({u, v, 5.0}));
                    const auto hit = intersect(spec, origin_obj, dir_obj);
                    if (!hit || hit->t_in < 0.0) {
                        continue;
                    }
                    const Vec3 p = add(origin_obj, scale(dir_obj, hit->t_in));
                    const Vec3 n_cam = pitch.apply(yaw.apply(hit->normal_in));
                    const double shade = kAmbient + (1.0 - kAmbient) * std::max(0.0, dot(n_cam, light));
                    Vec3 albedo;
                    const Vec3 diff = add(p, scale(anchor, -1.0));
                    if (spec.marker && dot(diff, diff) < kMarkerRadius * kMarkerRadius) {
                        albedo = marker_rgb;
                    } else {
                        const double stripe = 0.7 + 0.3 * std::cos(2.0 * M_PI * spec.pattern_frequency * p[1]);
                        albedo = scale(spec.color, stripe);
                    }
                    rgb = add(rgb, scale(albedo, shade));
                }
            }
            for (int c = 0; c < kImageChannels; ++c) {
                const double value = rgb[static_cast<std::size_t>(c)] / (kSuperSamples * kSuperSamples);
                acc[c][row][col] = static_cast<float>(std::clamp(2.0 * value - 1.0, -1.0, 1.0));
            }
        }
    }
    return Image(out);
}

LabeledCorpus make_corpus(int n_identities, int image_size, std::uint64_t corpus_seed)
{
    if (n_identities < 1) {
        throw ConfigError("corpus needs at least one identity");
    }
    const int64_t n = static_cast<int64_t>(n_identities) * kViewCount;
    auto images = torch::empty({n, kImageChannels, image_size, image_size}, torch::kFloat32);
    std::vector<int> views;
    std::vector<int> identities;
    views.reserve(static_cast<std::size_t>(n));
    identities.reserve(static_cast<std::size_t>(n));
    int64_t row = 0;
    for (int id = 0; id < n_identities; ++id) {
        const auto spec = make_identity_spec(corpus_seed, id);
        for (int bin = 0; bin < kViewCount; ++bin) {
            images[row++].copy_(render_view(spec, angle_of_view_bin(bin), image_size).tensor());
            views.push_back(bin);
            identities.push_back(id);
        }
    }
    return LabeledCorpus(images, std::move(views), std::move(identities));
}

} // namespace crgan
