#pragma once

// Finite-difference gradient checks of the eight objectives and randomized
// supervised/self-supervised equivalence trials, on the toy networks.

#include <array>
#include <string>
#include <vector>

#include "crgan/losses.hpp"
#include "toy_networks.hpp"

namespace crgan::testing {

struct EquationGradient {
    std::string objective;
    std::string target;
    GradientCheck check;
};

struct ToyProblem {
    ToyNetworks nets;
    torch::Tensor x;      ///< real or unlabeled images
    torch::Tensor v;      ///< labels of x (or pseudo-views)
    torch::Tensor x_j;    ///< same-identity partners
    torch::Tensor v_j;
    torch::Tensor z;
    PairBatch pairs;
    LossOptions options;
    RngStream eps_rng;

    explicit ToyProblem(std::uint64_t seed, int64_t batch = 3) : nets(seed), eps_rng(RngStream(seed).split("eps"))
    {
        auto rng = RngStream(seed).split("data");
        x = toy_images(rng, batch);
        x_j = toy_images(rng, batch);
        v = toy_views(rng, batch);
        // partner views differ from v
        v_j = (v + 1 + toy_views(rng, batch) % (kViewCount - 1)) % kViewCount;
        z = sample_latents(rng, batch).to(torch::kFloat64);
        pairs.x_i = x;
        pairs.v_i = v;
        pairs.x_j = x_j;
        pairs.v_j = v_j;
        pairs.identity_i.assign(static_cast<std::size_t>(batch), 7);
        pairs.identity_j = pairs.identity_i;
    }

    torch::Tensor x_tilde()
    {
        torch::NoGradGuard no_grad;
        return generate_batch(*nets.generator, v_j, nets.encoder->forward(x).latent);
    }
};

inline std::vector<EquationGradient> equation_gradient_checks(std::uint64_t seed)
{
    ToyProblem p(seed);
    auto& E = *p.nets.encoder;
    auto& G = *p.nets.generator;
    auto& D = *p.nets.discriminator;
    const auto e_params = E.parameters();
    const auto g_params = G.parameters();
    const auto d_params = D.parameters();
    const auto x_tilde = p.x_tilde();

    std::vector<EquationGradient> out;
    out.push_back({"gen_D", "D", check_gradients([&] {
                       auto rng = p.eps_rng;
                       return loss_gen_D(D, G, p.v, p.z, p.x, p.v, p.options, rng).descent();
                   },
                                                  d_params)});
    out.push_back({"gen_G", "G", check_gradients([&] { return loss_gen_G(D, G, p.v, p.z, p.options).descent(); }, g_params)});
    out.push_back({"recon_D", "D", check_gradients([&] {
                       auto rng = p.eps_rng;
                       return loss_recon_D(D, p.x, p.v, x_tilde, p.options, rng).descent();
                   },
                                                    d_params)});
    out.push_back({"recon_E", "E", check_gradients([&] { return loss_recon_E(E, G, D, p.pairs, p.options).descent(); }, e_params)});
    out.push_back({"self_recon_D", "D", check_gradients([&] {
                       auto rng = p.eps_rng;
                       return loss_self_recon_D(D, E, G, p.x, p.v, p.options, rng).descent();
                   },
                                                         d_params)});
    out.push_back(
        {"self_recon_E", "E", check_gradients([&] { return loss_self_recon_E(E, G, D, p.x, p.v, p.options).descent(); }, e_params)});
    out.push_back({"self_gen_D", "D", check_gradients([&] {
                       auto rng = p.eps_rng;
                       return loss_self_gen_D(D, G, p.v, p.z, p.x, p.options, rng).descent();
                   },
                                                       d_params)});
    out.push_back({"self_gen_G", "G", check_gradients([&] { return loss_self_gen_G(D, G, p.v, p.z, p.options).descent(); }, g_params)});
    return out;
}

inline double relative_gap(double a, double b)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

/// Largest relative gap over every term and the total between two reports.
inline double report_gap(const LossReport& a, const LossReport& b)
{
    const auto va = a.values();
    const auto vb = b.values();
    double worst = va.size() == vb.size() ? 0.0 : 1.0;
    for (const auto& [key, value] : va) {
        const auto it = vb.find(key);
        worst = std::max(worst, it == vb.end() ? 1.0 : relative_gap(value, it->second));
    }
    return worst;
}

/// Evaluates each self-supervised objective and its supervised counterpart
/// under x_i = x_j = x, v_i = v_j = v_hat on fresh random networks and
/// inputs; returns the largest relative gap per pair of objectives.
inline std::array<double, 4> equivalence_trial(std::uint64_t seed)
{
    ToyProblem p(seed, 4);
    auto& E = *p.nets.encoder;
    auto& G = *p.nets.generator;
    auto& D = *p.nets.discriminator;
    auto draw = RngStream(seed).split("weights");
    p.options.weights = {draw.uniform(0.0, 20.0), draw.uniform(0.0, 2.0), draw.uniform(0.0, 2.0), draw.uniform(0.0, 2.0),
                         draw.uniform(0.0, 0.1)};

    torch::Tensor v_hat;
    {
        torch::NoGradGuard no_grad;
        v_hat = pseudo_views(E.forward(p.x).view_logits).views;
    }
    PairBatch same;
    same.x_i = p.x;
    same.x_j = p.x;
    same.v_i = v_hat;
    same.v_j = v_hat;
    same.identity_i.assign(static_cast<std::size_t>(p.x.size(0)), 0);
    same.identity_j = same.identity_i;
    torch::Tensor x_tilde;
    {
        torch::NoGradGuard no_grad;
        x_tilde = generate_batch(G, v_hat, E.forward(p.x).latent);
    }

    std::array<double, 4> gaps{};
    {
        auto r1 = p.eps_rng;
        auto r2 = p.eps_rng;
        gaps[0] = report_gap(loss_self_recon_D(D, E, G, p.x, v_hat, p.options, r1), loss_recon_D(D, p.x, v_hat, x_tilde, p.options, r2));
    }
    gaps[1] = report_gap(loss_self_recon_E(E, G, D, p.x, v_hat, p.options), loss_recon_E(E, G, D, same, p.options));
    {
        auto r1 = p.eps_rng;
        auto r2 = p.eps_rng;
        gaps[2] = report_gap(loss_self_gen_D(D, G, v_hat, p.z, p.x, p.options, r1), loss_gen_D(D, G, v_hat, p.z, p.x, v_hat, p.options, r2));
    }
    gaps[3] = report_gap(loss_self_gen_G(D, G, v_hat, p.z, p.options), loss_gen_G(D, G, v_hat, p.z, p.options));
    return gaps;
}

} // namespace crgan::testing
