#include "crgan/losses.hpp"

#include <cmath>

namespace crgan {

namespace {

void check_finite(const torch::Tensor& t, const char* what)
{
    if (!torch::isfinite(t).all().item<bool>()) {
        throw NumericalError(std::string("non-finite value in ") + what);
    }
}

torch::Tensor detached(const torch::Tensor& t)
{
    return t.detach();
}

/// One D pass over [fake; real] so both halves share the same parameters.
std::pair<CriticOutput, CriticOutput> critic_pair(DiscriminatorNet& D, const torch::Tensor& fake, const torch::Tensor& real)
{
    auto out = D.forward(torch::cat({fake, real}, 0));
    const int64_t n = fake.size(0);
    CriticOutput f{out.view_logits.narrow(0, 0, n), out.score.narrow(0, 0, n)};
    CriticOutput r{out.view_logits.narrow(0, n, real.size(0)), out.score.narrow(0, n, real.size(0))};
    return {f, r};
}

LossReport critic_loss(std::string name, DiscriminatorNet& D, const torch::Tensor& real, const torch::Tensor& real_views,
                       const torch::Tensor& fake, const LossOptions& opt, RngStream& rng)
{
    if (!real.sizes().equals(fake.sizes())) {
        throw DomainError("real and fake batches differ in shape");
    }
    auto [f, r] = critic_pair(D, fake, real);
    auto eps = draw_eps(rng, real.size(0), real.scalar_type());
    auto penalty = gradient_penalty(D, interpolate(real, fake, eps));
    return critic_objective(std::move(name), f.score.mean(), r.score.mean(), penalty,
                            view_log_prob(r.view_logits, real_views, opt.form), opt.weights);
}

} // namespace

LossReport::LossReport(std::string name, Sense sense, std::vector<LossTerm> terms)
    : name_(std::move(name)), sense_(sense), terms_(std::move(terms))
{
}

torch::Tensor LossReport::total_tensor() const
{
    torch::Tensor sum;
    for (const auto& t : terms_) {
        auto part = t.value * t.coefficient;
        sum = sum.defined() ? sum + part : part;
    }
    return sum;
}

torch::Tensor LossReport::descent() const
{
    auto total = total_tensor();
    return sense_ == Sense::minimize ? total : -total;
}

double LossReport::total() const
{
    double sum = 0.0;
    for (const auto& t : terms_) {
        sum += t.coefficient * t.value.item<double>();
    }
    return sum;
}

double LossReport::term(const std::string& name) const
{
    for (const auto& t : terms_) {
        if (t.name == name) {
            return t.value.item<double>();
        }
    }
    throw std::out_of_range("loss report " + name_ + " has no term " + name);
}

std::map<std::string, double> LossReport::values() const
{
    std::map<std::string, double> out;
    for (const auto& t : terms_) {
        out[t.name] = t.value.item<double>();
    }
    out["total"] = total();
    return out;
}

torch::Tensor interpolate(const torch::Tensor& real, const torch::Tensor& fake, const torch::Tensor& eps)
{
    if (!real.sizes().equals(fake.sizes())) {
        throw DomainError("interpolate: geometry mismatch");
    }
    if (eps.dim() != 1 || eps.size(0) != real.size(0)) {
        throw DomainError("interpolate: one coefficient per batch element expected");
    }
    std::vector<int64_t> shape(static_cast<std::size_t>(real.dim()), 1);
    shape[0] = real.size(0);
    auto e = eps.to(real.scalar_type()).view(shape);
    return e * real + (1 - e) * fake;
}

Image interpolate(const Image& real, const Image& fake, double eps)
{
    if (!(eps >= 0.0 && eps <= 1.0)) {
        throw DomainError("interpolation coefficient outside [0, 1]");
    }
    if (!real.tensor().sizes().equals(fake.tensor().sizes())) {
        throw DomainError("interpolate: geometry mismatch");
    }
    return Image((eps * real.tensor() + (1.0 - eps) * fake.tensor()).clamp(-1.0, 1.0));
}

torch::Tensor gradient_penalty(DiscriminatorNet& critic, const torch::Tensor& x_hat)
{
    auto x = x_hat.detach().requires_grad_(true);
    auto score = critic.forward(x).score;
    auto grad = torch::autograd::grad({score.sum()}, {x}, /*grad_outputs=*/{}, /*retain_graph=*/true, /*create_graph=*/true)[0];
    auto norms = grad.flatten(1).norm(2, 1);
    auto penalty = (norms - 1).pow(2).mean();
    check_finite(penalty, "gradient penalty");
    return penalty;
}

torch::Tensor view_log_prob(const torch::Tensor& logits, const torch::Tensor& views, ProbabilityForm form)
{
    if (logits.dim() != 2 || logits.size(1) != kViewCount || views.dim() != 1 || views.size(0) != logits.size(0)) {
        throw DomainError("view_log_prob expects logits [B, 9] and views [B]");
    }
    auto index = views.to(torch::kInt64).unsqueeze(1);
    if (form == ProbabilityForm::raw) {
        return torch::softmax(logits, 1).gather(1, index).mean();
    }
    return torch::log_softmax(logits, 1).gather(1, index).mean();
}

torch::Tensor view_cross_entropy(const torch::Tensor& logits, const torch::Tensor& views)
{
    return -view_log_prob(logits, views, ProbabilityForm::log);
}

torch::Tensor l1_loss_batch(const torch::Tensor& a, const torch::Tensor& b)
{
    if (!a.sizes().equals(b.sizes())) {
        throw DomainError("l1_loss: geometry mismatch");
    }
    return (a - b).abs().mean();
}

double view_log_prob(const std::array<double, kViewCount>& logits, const ViewCode& v)
{
    auto t = torch::tensor(std::vector<double>(logits.begin(), logits.end()), torch::kFloat64).unsqueeze(0);
    return view_log_prob(t, torch::tensor({static_cast<int64_t>(v.index())}), ProbabilityForm::log).item<double>();
}

double view_cross_entropy(const std::array<double, kViewCount>& logits, const ViewCode& v)
{
    return -view_log_prob(logits, v);
}

double l1_loss(const Image& a, const Image& b)
{
    return l1_loss_batch(a.tensor(), b.tensor()).item<double>();
}

LossReport critic_objective(std::string name, torch::Tensor fake_score, torch::Tensor real_score, torch::Tensor penalty,
                            torch::Tensor real_view_log_prob, const LossWeights& w)
{
    return LossReport(std::move(name), Sense::minimize,
                      {
                          {"adversarial", 1.0, fake_score - real_score},
                          {"penalty", w.lambda1, std::move(penalty)},
                          {"view", -w.lambda2, std::move(real_view_log_prob)},
                      });
}

LossReport generator_objective(std::string name, torch::Tensor fake_score, torch::Tensor fake_view_log_prob, const LossWeights& w)
{
    return LossReport(std::move(name), Sense::maximize,
                      {
                          {"adversarial", 1.0, std::move(fake_score)},
                          {"view", w.lambda3, std::move(fake_view_log_prob)},
                      });
}

LossReport encoder_objective(std::string name, torch::Tensor fake_score, torch::Tensor fake_view_log_prob, torch::Tensor l1,
                             torch::Tensor view_ce, const LossWeights& w)
{
    return LossReport(std::move(name), Sense::maximize,
                      {
                          {"adversarial", 1.0, std::move(fake_score)},
                          {"view", w.lambda3, std::move(fake_view_log_prob)},
                          {"l1", -w.lambda4, std::move(l1)},
                          {"view_ce", -w.lambda5, std::move(view_ce)},
                      });
}

torch::Tensor draw_eps(RngStream& rng, int64_t n, torch::ScalarType dtype)
{
    auto eps = torch::empty({n}, torch::kFloat64);
    auto* p = eps.data_ptr<double>();
    for (int64_t i = 0; i < n; ++i) {
        p[i] = rng.uniform();
    }
    return eps.to(dtype);
}

void PairBatch::check_identities() const
{
    if (identity_i.size() != identity_j.size() || static_cast<int64_t>(identity_i.size()) != size()) {
        throw ContractError("pair batch identity lists do not match the batch size");
    }
    for (std::size_t k = 0; k < identity_i.size(); ++k) {
        if (identity_i[k] != identity_j[k]) {
            throw ContractError("cross-reconstruction pair " + std::to_string(k) + " mixes identities "
                                + std::to_string(identity_i[k]) + " and " + std::to_string(identity_j[k]));
        }
    }
}

LossReport loss_gen_D(DiscriminatorNet& D, GeneratorNet& G, const torch::Tensor& v, const torch::Tensor& z, const torch::Tensor& x,
                      const torch::Tensor& v_x, const LossOptions& opt, RngStream& rng)
{
    torch::Tensor fake;
    {
        torch::NoGradGuard no_grad;
        fake = generate_batch(G, v, z);
    }
    return critic_loss("gen_D", D, x, v_x, fake, opt, rng);
}

LossReport loss_gen_G(DiscriminatorNet& D, GeneratorNet& G, const torch::Tensor& v, const torch::Tensor& z, const LossOptions& opt)
{
    auto fake = generate_batch(G, v, z);
    auto out = D.forward(fake);
    return generator_objective("gen_G", out.score.mean(), view_log_prob(out.view_logits, v, opt.form), opt.weights);
}

LossReport loss_recon_D(DiscriminatorNet& D, const torch::Tensor& x_i, const torch::Tensor& v_i, const torch::Tensor& x_tilde_j,
                        const LossOptions& opt, RngStream& rng)
{
    return critic_loss("recon_D", D, x_i, v_i, detached(x_tilde_j), opt, rng);
}

LossReport loss_recon_E(EncoderNet& E, GeneratorNet& G, DiscriminatorNet& D, const PairBatch& pairs, const LossOptions& opt)
{
    pairs.check_identities();
    auto enc = E.forward(pairs.x_i);
    auto x_tilde = generate_batch(G, pairs.v_j, enc.latent);
    auto out = D.forward(x_tilde);
    return encoder_objective("recon_E", out.score.mean(), view_log_prob(out.view_logits, pairs.v_j, opt.form),
                             l1_loss_batch(x_tilde, pairs.x_j), view_cross_entropy(enc.view_logits, pairs.v_i), opt.weights);
}

LossReport loss_self_recon_D(DiscriminatorNet& D, EncoderNet& E, GeneratorNet& G, const torch::Tensor& x, const torch::Tensor& v_hat,
                             const LossOptions& opt, RngStream& rng)
{
    torch::Tensor x_tilde;
    {
        torch::NoGradGuard no_grad;
        x_tilde = generate_batch(G, v_hat, E.forward(x).latent);
    }
    return critic_loss("self_recon_D", D, x, v_hat, x_tilde, opt, rng);
}

LossReport loss_self_recon_E(EncoderNet& E, GeneratorNet& G, DiscriminatorNet& D, const torch::Tensor& x, const torch::Tensor& v_hat,
                             const LossOptions& opt)
{
    auto enc = E.forward(x);
    auto x_tilde = generate_batch(G, v_hat, enc.latent);
    auto out = D.forward(x_tilde);
    return encoder_objective("self_recon_E", out.score.mean(), view_log_prob(out.view_logits, v_hat, opt.form), l1_loss_batch(x_tilde, x),
                             view_cross_entropy(enc.view_logits, v_hat), opt.weights);
}

LossReport loss_self_gen_D(DiscriminatorNet& D, GeneratorNet& G, const torch::Tensor& v_hat, const torch::Tensor& z, const torch::Tensor& x,
                           const LossOptions& opt, RngStream& rng)
{
    torch::Tensor fake;
    {
        torch::NoGradGuard no_grad;
        fake = generate_batch(G, v_hat, z);
    }
    return critic_loss("self_gen_D", D, x, v_hat, fake, opt, rng);
}

LossReport loss_self_gen_G(DiscriminatorNet& D, GeneratorNet& G, const torch::Tensor& v_hat, const torch::Tensor& z, const LossOptions& opt)
{
    auto fake = generate_batch(G, v_hat, z);
    auto out = D.forward(fake);
    return generator_objective("self_gen_G", out.score.mean(), view_log_prob(out.view_logits, v_hat, opt.form), opt.weights);
}

PseudoViews pseudo_views(const torch::Tensor& view_logits)
{
    auto probs = torch::softmax(view_logits.detach(), 1);
    auto views = argmax_lowest(probs);
    auto confidence = probs.gather(1, views.unsqueeze(1)).squeeze(1);
    return {views, confidence};
}

} // namespace crgan
