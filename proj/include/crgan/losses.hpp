#pragma once

#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "crgan/config.hpp"
#include "crgan/core.hpp"
#include "crgan/networks.hpp"

namespace crgan {

/// Whether the optimizer descends or ascends a report's total.
enum class Sense { minimize, maximize };

/// One weighted term of an objective.
struct LossTerm {
    std::string name;
    double coefficient;
    torch::Tensor value; ///< scalar, differentiable
};

/// Named terms plus their weighted total. `total()` is the objective exactly as
/// written (so maximized objectives keep their sign); `descent()` is what a
/// minimizer should back-propagate.
class LossReport {
public:
    LossReport(std::string name, Sense sense, std::vector<LossTerm> terms);

    const std::string& name() const { return name_; }
    Sense sense() const { return sense_; }
    const std::vector<LossTerm>& terms() const { return terms_; }

    torch::Tensor total_tensor() const;
    torch::Tensor descent() const;
    double total() const;
    double term(const std::string& name) const;
    std::map<std::string, double> values() const;

private:
    std::string name_;
    Sense sense_;
    std::vector<LossTerm> terms_;
};

/// eps * real + (1 - eps) * fake per batch element; eps has shape [B].
torch::Tensor interpolate(const torch::Tensor& real, const torch::Tensor& fake, const torch::Tensor& eps);
Image interpolate(const Image& real, const Image& fake, double eps);

/// Batch mean of (||grad_x D_s(x)||_2 - 1)^2, differentiable w.r.t. D's parameters.
torch::Tensor gradient_penalty(DiscriminatorNet& critic, const torch::Tensor& x_hat);

/// Batch mean of log softmax(logits)[v] (or softmax(logits)[v] in raw form).
torch::Tensor view_log_prob(const torch::Tensor& logits, const torch::Tensor& views, ProbabilityForm form = ProbabilityForm::log);
/// Batch mean of -log softmax(logits)[v].
torch::Tensor view_cross_entropy(const torch::Tensor& logits, const torch::Tensor& views);
torch::Tensor l1_loss_batch(const torch::Tensor& a, const torch::Tensor& b);

double view_log_prob(const std::array<double, kViewCount>& logits, const ViewCode& v);
double view_cross_entropy(const std::array<double, kViewCount>& logits, const ViewCode& v);
double l1_loss(const Image& a, const Image& b);

/// Critic objective shared by the four D updates (minimized):
/// fake - real + l1 * penalty - l2 * view.
LossReport critic_objective(std::string name, torch::Tensor fake_score, torch::Tensor real_score, torch::Tensor penalty,
                            torch::Tensor real_view_log_prob, const LossWeights& w);
/// Generator objective (maximized): fake + l3 * view.
LossReport generator_objective(std::string name, torch::Tensor fake_score, torch::Tensor fake_view_log_prob, const LossWeights& w);
/// Encoder objective (maximized): fake + l3 * view - l4 * L1 - l5 * L_v.
LossReport encoder_objective(std::string name, torch::Tensor fake_score, torch::Tensor fake_view_log_prob, torch::Tensor l1,
                             torch::Tensor view_ce, const LossWeights& w);

/// Per-element interpolation coefficients on [0, 1].
torch::Tensor draw_eps(RngStream& rng, int64_t n, torch::ScalarType dtype = torch::kFloat32);

/// Cross-view pairs of one batch; pairs share identities element-wise.
struct PairBatch {
    torch::Tensor x_i;          ///< [B, 3, H, W]
    torch::Tensor v_i;          ///< [B] int64
    torch::Tensor x_j;
    torch::Tensor v_j;
    std::vector<int> identity_i;
    std::vector<int> identity_j;

    int64_t size() const { return x_i.size(0); }
    /// Throws ContractError if any pair mixes identities.
    void check_identities() const;
};

struct LossOptions {
    LossWeights weights;
    ProbabilityForm form = ProbabilityForm::log;
};

// Generation path.
LossReport loss_gen_D(DiscriminatorNet& D, GeneratorNet& G, const torch::Tensor& v, const torch::Tensor& z, const torch::Tensor& x,
                      const torch::Tensor& v_x, const LossOptions& opt, RngStream& rng);
LossReport loss_gen_G(DiscriminatorNet& D, GeneratorNet& G, const torch::Tensor& v, const torch::Tensor& z, const LossOptions& opt);

// Reconstruction path. x_tilde_j = G(v_j, E_z(x_i)) is supplied by the caller.
LossReport loss_recon_D(DiscriminatorNet& D, const torch::Tensor& x_i, const torch::Tensor& v_i, const torch::Tensor& x_tilde_j,
                        const LossOptions& opt, RngStream& rng);
LossReport loss_recon_E(EncoderNet& E, GeneratorNet& G, DiscriminatorNet& D, const PairBatch& pairs, const LossOptions& opt);

// Self-supervised counterparts on unlabeled x with pseudo-view v_hat.
LossReport loss_self_recon_D(DiscriminatorNet& D, EncoderNet& E, GeneratorNet& G, const torch::Tensor& x, const torch::Tensor& v_hat,
                             const LossOptions& opt, RngStream& rng);
LossReport loss_self_recon_E(EncoderNet& E, GeneratorNet& G, DiscriminatorNet& D, const torch::Tensor& x, const torch::Tensor& v_hat,
                             const LossOptions& opt);
LossReport loss_self_gen_D(DiscriminatorNet& D, GeneratorNet& G, const torch::Tensor& v_hat, const torch::Tensor& z, const torch::Tensor& x,
                           const LossOptions& opt, RngStream& rng);
/// Generates at the pseudo-view, G(v_hat, z), like the supervised G objective.
LossReport loss_self_gen_G(DiscriminatorNet& D, GeneratorNet& G, const torch::Tensor& v_hat, const torch::Tensor& z, const LossOptions& opt);

/// Pseudo-view labels: argmax of softmax(E_v(x)) with its confidence.
struct PseudoViews {
    torch::Tensor views;      ///< [B] int64
    torch::Tensor confidence; ///< [B] max softmax probability
};
PseudoViews pseudo_views(const torch::Tensor& view_logits);

} // namespace crgan
