#include "crgan/training.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace crgan {

namespace {

constexpr const char* kStageSupervised = "supervised";
constexpr const char* kStageSelf = "self";

void store_adam(Checkpoint& ckpt, const std::string& net, const torch::nn::Module& module, const AdamState& state)
{
    ckpt.meta["adam." + net + ".step"] = std::to_string(state.step);
    if (state.exp_avg.empty()) {
        return;
    }
    std::size_t k = 0;
    for (const auto& item : module.named_parameters(true)) {
        ckpt.tensors["adam/" + net + "/exp_avg/" + item.key()] = state.exp_avg[k].clone();
        ckpt.tensors["adam/" + net + "/exp_avg_sq/" + item.key()] = state.exp_avg_sq[k].clone();
        ++k;
    }
}

AdamState restore_adam(const Checkpoint& ckpt, const std::string& net, const torch::nn::Module& module)
{
    AdamState state;
    const auto step = ckpt.meta.find("adam." + net + ".step");
    if (step == ckpt.meta.end()) {
        throw ConfigError("checkpoint lacks Adam state for " + net);
    }
    state.step = std::stoll(step->second);
    if (state.step == 0) {
        return state;
    }
    for (const auto& item : module.named_parameters(true)) {
        const auto m = ckpt.tensors.find("adam/" + net + "/exp_avg/" + item.key());
        const auto v = ckpt.tensors.find("adam/" + net + "/exp_avg_sq/" + item.key());
        if (m == ckpt.tensors.end() || v == ckpt.tensors.end()) {
            throw ConfigError("checkpoint lacks Adam moments for " + net + "/" + item.key());
        }
        state.exp_avg.push_back(m->second.clone());
        state.exp_avg_sq.push_back(v->second.clone());
    }
    return state;
}

bool all_finite(const torch::nn::Module& module)
{
    for (const auto& p : module.parameters()) {
        if (!torch::isfinite(p).all().item<bool>()) {
            return false;
        }
    }
    return true;
}

std::string target_name(unsigned targets)
{
    std::string out;
    if (targets & 1u) {
        out += 'E';
    }
    if (targets & 2u) {
        out += 'G';
    }
    if (targets & 4u) {
        out += 'D';
    }
    return out;
}

struct StepFile {
    std::ofstream out;

    StepFile(const std::optional<std::filesystem::path>& run_dir, bool append)
    {
        if (run_dir) {
            std::filesystem::create_directories(*run_dir);
            out.open(*run_dir / "steps.jsonl", append ? std::ios::app : std::ios::trunc);
            if (!out) {
                throw std::runtime_error("cannot open step log in " + run_dir->string());
            }
        }
    }

    void write(const std::string& line)
    {
        if (out.is_open()) {
            out << line << "\n";
            out.flush();
        }
    }
};

int64_t stage_position(const Checkpoint& ckpt, const std::string& stage)
{
    const auto it = ckpt.meta.find("stage");
    if (it == ckpt.meta.end() || it->second != stage) {
        return 0;
    }
    return std::stoll(ckpt.meta.at("stage_step"));
}

void save_periodic(const Trainer& trainer, const RunOptions& options, int64_t stage_step)
{
    if (options.run_dir && options.checkpoint_every > 0 && stage_step % options.checkpoint_every == 0) {
        save_checkpoint(trainer.checkpoint(), *options.run_dir / "checkpoints" / ("step_" + std::to_string(trainer.step())));
    }
}

} // namespace

void adam_update(const std::vector<torch::Tensor>& params, const std::vector<torch::Tensor>& grads, AdamState& state,
                 const AdamHyper& hyper)
{
    if (params.size() != grads.size()) {
        throw DomainError("adam_update: parameter and gradient counts differ");
    }
    if (state.exp_avg.empty()) {
        for (const auto& p : params) {
            state.exp_avg.push_back(torch::zeros_like(p).detach());
            state.exp_avg_sq.push_back(torch::zeros_like(p).detach());
        }
    }
    if (state.exp_avg.size() != params.size()) {
        throw DomainError("adam_update: optimizer state does not match the parameter list");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (!params[k].sizes().equals(grads[k].sizes()) || !params[k].sizes().equals(state.exp_avg[k].sizes())) {
            throw DomainError("adam_update: shape mismatch at parameter " + std::to_string(k));
        }
    }
    torch::NoGradGuard no_grad;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(hyper.beta1, t);
    const double bias2 = 1.0 - std::pow(hyper.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& m = state.exp_avg[k];
        auto& v = state.exp_avg_sq[k];
        const auto& g = grads[k];
        m.mul_(hyper.beta1).add_(g, 1.0 - hyper.beta1);
        v.mul_(hyper.beta2).addcmul_(g, g, 1.0 - hyper.beta2);
        auto denom = (v / bias2).sqrt_().add_(hyper.eps);
        params[k].addcdiv_(m, denom, -hyper.lr / bias1);
    }
}

std::optional<double> StepLog::acceptance_rate() const
{
    if (unlabeled_seen == 0) {
        return std::nullopt;
    }
    return static_cast<double>(unlabeled_accepted) / static_cast<double>(unlabeled_seen);
}

std::optional<double> StepLog::value(const std::string& loss, const std::string& term) const
{
    for (const auto& [name, terms] : losses) {
        if (name == loss) {
            const auto it = terms.find(term);
            if (it != terms.end()) {
                return it->second;
            }
        }
    }
    return std::nullopt;
}

std::string StepLog::to_json_line() const
{
    nlohmann::ordered_json j;
    j["step"] = step;
    j["stage"] = stage;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& [name, terms] : losses) {
        nlohmann::ordered_json entry;
        entry["loss"] = name;
        for (const auto& [term, v] : terms) {
            entry[term] = v;
        }
        arr.push_back(entry);
    }
    j["losses"] = arr;
    if (const auto rate = acceptance_rate()) {
        j["unlabeled_seen"] = unlabeled_seen;
        j["unlabeled_accepted"] = unlabeled_accepted;
        j["acceptance_rate"] = *rate;
    }
    return j.dump();
}

Trainer::Trainer(TrainConfig config, Networks nets, RngStream noise)
    : config_(std::move(config)), nets_(std::move(nets)), noise_(noise)
{
    config_.validate();
    loss_options_ = {config_.weights, config_.prob_form};
    hyper_ = {config_.learning_rate, config_.adam_beta1, config_.adam_beta2, config_.adam_eps};
}

Trainer::Trainer(const TrainConfig& config)
    : Trainer(config, build_networks(config, RngStream(config.seed).split("networks")), RngStream(config.seed).split("noise"))
{
}

Trainer::Trainer(const TrainConfig& config, const Checkpoint& checkpoint)
    : Trainer(config, networks_from_checkpoint(config, checkpoint), RngStream(config.seed).split("noise"))
{
    adam_e_ = restore_adam(checkpoint, "E", *nets_.encoder);
    adam_g_ = restore_adam(checkpoint, "G", *nets_.generator);
    adam_d_ = restore_adam(checkpoint, "D", *nets_.discriminator);
    noise_ = RngStream(std::stoull(checkpoint.meta.at("noise.seed")), std::stoull(checkpoint.meta.at("noise.counter")));
    step_ = checkpoint.step;
    for (const auto& [key, value] : checkpoint.meta) {
        if (key == "stage" || key == "stage_step") {
            meta_[key] = value;
        }
    }
}

Networks networks_from_checkpoint(const TrainConfig& config, const Checkpoint& checkpoint)
{
    if (checkpoint.fingerprint != config.fingerprint()) {
        throw ConfigError("checkpoint fingerprint " + hex64(checkpoint.fingerprint) + " does not match config fingerprint "
                          + hex64(config.fingerprint()));
    }
    auto nets = build_networks(config, RngStream(config.seed).split("networks"));
    restore_module(checkpoint, "E", *nets.encoder);
    restore_module(checkpoint, "G", *nets.generator);
    restore_module(checkpoint, "D", *nets.discriminator);
    return nets;
}

TrainConfig config_of_checkpoint(const Checkpoint& checkpoint)
{
    std::map<std::string, std::string> entries;
    for (const auto& [key, value] : checkpoint.meta) {
        if (key.rfind("config.", 0) == 0) {
            entries[key.substr(7)] = value;
        }
    }
    if (entries.empty()) {
        throw ConfigError("checkpoint does not record its training config");
    }
    return train_config_from_entries(entries);
}

Checkpoint Trainer::checkpoint() const
{
    Checkpoint ckpt;
    ckpt.step = step_;
    ckpt.fingerprint = config_.fingerprint();
    ckpt.meta = meta_;
    ckpt.meta["mode"] = to_string(config_.mode);
    for (const auto& [key, value] : train_config_entries(config_)) {
        ckpt.meta["config." + key] = value;
    }
    ckpt.meta["noise.seed"] = std::to_string(noise_.seed());
    ckpt.meta["noise.counter"] = std::to_string(noise_.counter());
    store_module(ckpt, "E", *nets_.encoder);
    store_module(ckpt, "G", *nets_.generator);
    store_module(ckpt, "D", *nets_.discriminator);
    store_adam(ckpt, "E", *nets_.encoder, adam_e_);
    store_adam(ckpt, "G", *nets_.generator, adam_g_);
    store_adam(ckpt, "D", *nets_.discriminator, adam_d_);
    return ckpt;
}

void Trainer::apply(const LossReport& report, unsigned targets, StepLog& log, const std::vector<int>& ids)
{
    auto objective = report.descent();
    auto values = report.values();
    if (!std::isfinite(values.at("total"))) {
        throw TrainingAbort("non-finite " + report.name() + " objective at step " + std::to_string(step_ + 1), step_ + 1, ids);
    }

    struct Slot {
        torch::nn::Module* module;
        AdamState* state;
    };
    std::vector<Slot> slots;
    if (targets & kE) {
        slots.push_back({nets_.encoder.get(), &adam_e_});
    }
    if (targets & kG) {
        slots.push_back({nets_.generator.get(), &adam_g_});
    }
    if (targets & kD) {
        slots.push_back({nets_.discriminator.get(), &adam_d_});
    }
    std::vector<torch::Tensor> params;
    for (const auto& slot : slots) {
        for (const auto& p : slot.module->parameters()) {
            params.push_back(p);
        }
    }

    std::array<std::uint64_t, 3> before{};
    if (audit_) {
        before = {parameter_hash(*nets_.encoder), parameter_hash(*nets_.generator), parameter_hash(*nets_.discriminator)};
    }

    auto grads = torch::autograd::grad({objective}, params, /*grad_outputs=*/{}, /*retain_graph=*/false, /*create_graph=*/false,
                                       /*allow_unused=*/true);
    std::size_t offset = 0;
    for (const auto& slot : slots) {
        auto group = slot.module->parameters();
        std::vector<torch::Tensor> g(grads.begin() + static_cast<std::ptrdiff_t>(offset),
                                     grads.begin() + static_cast<std::ptrdiff_t>(offset + group.size()));
        for (std::size_t k = 0; k < g.size(); ++k) {
            if (!g[k].defined()) {
                g[k] = torch::zeros_like(group[k]);
            }
        }
        adam_update(group, g, *slot.state, hyper_);
        offset += group.size();
    }

    if (audit_) {
        UpdateRecord record{report.name(), target_name(targets)};
        record.changed_encoder = parameter_hash(*nets_.encoder) != before[0];
        record.changed_generator = parameter_hash(*nets_.generator) != before[1];
        record.changed_discriminator = parameter_hash(*nets_.discriminator) != before[2];
        audit_(record);
    }
    log.losses.emplace_back(report.name(), std::move(values));
}

void Trainer::check_parameters(const std::vector<int>& ids) const
{
    if (!all_finite(*nets_.encoder) || !all_finite(*nets_.generator) || !all_finite(*nets_.discriminator)) {
        throw TrainingAbort("non-finite parameters after step " + std::to_string(step_), step_, ids);
    }
}

void Trainer::generation_path(const torch::Tensor& x, const torch::Tensor& views, StepLog& log, const std::vector<int>& ids)
{
    torch::Tensor z;
    for (int k = 0; k < config_.critic_steps; ++k) {
        z = sample_latents(noise_, x.size(0));
        apply(loss_gen_D(*nets_.discriminator, *nets_.generator, views, z, x, views, loss_options_, noise_), kD, log, ids);
    }
    apply(loss_gen_G(*nets_.discriminator, *nets_.generator, views, z, loss_options_), kG, log, ids);
}

void Trainer::reconstruction_path(const PairBatch& batch, StepLog& log)
{
    torch::Tensor x_tilde;
    {
        torch::NoGradGuard no_grad;
        x_tilde = generate_batch(*nets_.generator, batch.v_j, nets_.encoder->forward(batch.x_i).latent);
    }
    for (int k = 0; k < config_.critic_steps; ++k) {
        apply(loss_recon_D(*nets_.discriminator, batch.x_i, batch.v_i, x_tilde, loss_options_, noise_), kD, log, batch.identity_i);
    }
    const unsigned encoder_targets = config_.mode == TrainMode::two_path ? kE : (kE | kG);
    apply(loss_recon_E(*nets_.encoder, *nets_.generator, *nets_.discriminator, batch, loss_options_), encoder_targets, log,
          batch.identity_i);
}

void Trainer::self_reconstruction_path(const torch::Tensor& x, const torch::Tensor& v_hat, StepLog& log)
{
    const std::vector<int> no_ids;
    for (int k = 0; k < config_.critic_steps; ++k) {
        apply(loss_self_recon_D(*nets_.discriminator, *nets_.encoder, *nets_.generator, x, v_hat, loss_options_, noise_), kD, log,
              no_ids);
    }
    const unsigned encoder_targets = config_.mode == TrainMode::two_path ? kE : (kE | kG);
    apply(loss_self_recon_E(*nets_.encoder, *nets_.generator, *nets_.discriminator, x, v_hat, loss_options_), encoder_targets, log,
          no_ids);
    if (config_.mode == TrainMode::single_path) {
        return;
    }
    torch::Tensor z;
    for (int k = 0; k < config_.critic_steps; ++k) {
        z = sample_latents(noise_, x.size(0));
        apply(loss_self_gen_D(*nets_.discriminator, *nets_.generator, v_hat, z, x, loss_options_, noise_), kD, log, no_ids);
    }
    apply(loss_self_gen_G(*nets_.discriminator, *nets_.generator, v_hat, z, loss_options_), kG, log, no_ids);
}

StepLog Trainer::step_supervised(const PairBatch& batch)
{
    batch.check_identities();
    StepLog log;
    log.stage = kStageSupervised;
    if (config_.mode == TrainMode::two_path) {
        generation_path(batch.x_i, batch.v_i, log, batch.identity_i);
    }
    reconstruction_path(batch, log);
    ++step_;
    log.step = step_;
    check_parameters(batch.identity_i);
    return log;
}

StepLog Trainer::step_self_supervised(const MixedBatch& batch)
{
    StepLog log;
    log.stage = kStageSelf;
    if (batch.has_labeled()) {
        batch.labeled.check_identities();
        if (config_.mode == TrainMode::two_path) {
            generation_path(batch.labeled.x_i, batch.labeled.v_i, log, batch.labeled.identity_i);
        }
        reconstruction_path(batch.labeled, log);
    }
    if (batch.has_unlabeled()) {
        PseudoViews pv;
        {
            torch::NoGradGuard no_grad;
            pv = pseudo_views(nets_.encoder->forward(batch.unlabeled).view_logits);
        }
        // estimates below the confidence threshold are skipped
        const auto keep = pv.confidence.to(torch::kFloat64).ge(config_.tau);
        const auto accepted = torch::nonzero(keep).squeeze(1);
        log.unlabeled_seen = batch.unlabeled.size(0);
        log.unlabeled_accepted = accepted.size(0);
        if (accepted.size(0) > 0) {
            self_reconstruction_path(batch.unlabeled.index_select(0, accepted), pv.views.index_select(0, accepted), log);
        }
    }
    ++step_;
    log.step = step_;
    check_parameters(batch.has_labeled() ? batch.labeled.identity_i : std::vector<int>{});
    return log;
}

Checkpoint train_supervised(const LabeledCorpus& corpus, const TrainConfig& config, const RunOptions& options,
                            const std::optional<Checkpoint>& resume)
{
    config.validate();
    if (corpus.empty()) {
        throw ConfigError("training corpus is empty");
    }
    if (corpus.image_size() != config.image_size) {
        throw ConfigError("corpus image size " + std::to_string(corpus.image_size()) + " differs from config image_size "
                          + std::to_string(config.image_size));
    }
    Trainer trainer = resume ? Trainer(config, *resume) : Trainer(config);
    if (options.audit) {
        trainer.set_audit(options.audit);
    }
    int64_t stage_step = resume ? stage_position(*resume, kStageSupervised) : 0;
    PairSampler sampler(corpus, config.batch_size, RngStream(config.seed).split("data/supervised"));
    const int64_t per_epoch = sampler.steps_per_epoch();
    int64_t total = static_cast<int64_t>(config.supervised_epochs) * per_epoch;
    if (config.max_steps > 0) {
        total = std::min(total, config.max_steps);
    }
    StepFile log_file(options.run_dir, resume.has_value());
    trainer.meta()["stage"] = kStageSupervised;
    for (; stage_step < total; ++stage_step) {
        auto log = trainer.step_supervised(sampler.batch(stage_step / per_epoch, stage_step % per_epoch));
        log_file.write(log.to_json_line());
        if (options.on_step) {
            options.on_step(log);
        }
        trainer.meta()["stage_step"] = std::to_string(stage_step + 1);
        save_periodic(trainer, options, stage_step + 1);
    }
    trainer.meta()["stage_step"] = std::to_string(stage_step);
    auto ckpt = trainer.checkpoint();
    if (options.run_dir) {
        save_checkpoint(ckpt, *options.run_dir / "final");
    }
    return ckpt;
}

Checkpoint train_single_path_baseline(const LabeledCorpus& corpus, const TrainConfig& config, const RunOptions& options)
{
    if (config.mode != TrainMode::single_path) {
        throw ConfigError("the single-path baseline requires mode = single_path");
    }
    return train_supervised(corpus, config, options);
}

Checkpoint train_self_supervised(const LabeledCorpus& labeled, const UnlabeledCorpus& unlabeled, const TrainConfig& config,
                                 const Checkpoint& warm, const RunOptions& options)
{
    config.validate();
    if (!labeled.empty() && labeled.image_size() != config.image_size) {
        throw ConfigError("labeled corpus image size differs from config image_size");
    }
    if (!unlabeled.empty() && unlabeled.image_size() != config.image_size) {
        throw ConfigError("unlabeled corpus image size differs from config image_size");
    }
    Trainer trainer(config, warm);
    if (options.audit) {
        trainer.set_audit(options.audit);
    }
    int64_t stage_step = stage_position(warm, kStageSelf);
    MixedSampler sampler(labeled, unlabeled, config.batch_size, RngStream(config.seed).split("data/self"));
    const int64_t per_epoch = sampler.steps_per_epoch();
    int64_t total = static_cast<int64_t>(config.self_supervised_epochs) * per_epoch;
    if (config.max_steps > 0) {
        total = std::min(total, config.max_steps);
    }
    StepFile log_file(options.run_dir, true);
    trainer.meta()["stage"] = kStageSelf;
    int64_t seen = 0;
    int64_t accepted = 0;
    for (; stage_step < total; ++stage_step) {
        auto log = trainer.step_self_supervised(sampler.batch(stage_step / per_epoch, stage_step % per_epoch));
        seen += log.unlabeled_seen;
        accepted += log.unlabeled_accepted;
        log_file.write(log.to_json_line());
        if (options.on_step) {
            options.on_step(log);
        }
        trainer.meta()["stage_step"] = std::to_string(stage_step + 1);
        save_periodic(trainer, options, stage_step + 1);
        const bool epoch_end = (stage_step + 1) % per_epoch == 0 || stage_step + 1 == total;
        if (epoch_end && seen > 0) {
            const double rate = static_cast<double>(accepted) / static_cast<double>(seen);
            nlohmann::ordered_json j;
            j["epoch"] = stage_step / per_epoch;
            j["stage"] = kStageSelf;
            j["acceptance_rate"] = rate;
            log_file.write(j.dump());
            if (options.on_epoch) {
                options.on_epoch(stage_step / per_epoch, rate);
            }
            seen = 0;
            accepted = 0;
        }
    }
    trainer.meta()["stage_step"] = std::to_string(stage_step);
    auto ckpt = trainer.checkpoint();
    if (options.run_dir) {
        save_checkpoint(ckpt, *options.run_dir / "final");
    }
    return ckpt;
}

} // namespace crgan
