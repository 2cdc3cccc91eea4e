#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "crgan/checkpoint.hpp"
#include "crgan/config.hpp"
#include "crgan/data.hpp"
#include "crgan/losses.hpp"
#include "crgan/networks.hpp"

namespace crgan {

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::vector<torch::Tensor> exp_avg;
    std::vector<torch::Tensor> exp_avg_sq;
    int64_t step = 0;
};

struct AdamHyper {
    double lr = 0.0005;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double eps = 1e-8;
};

/// One bias-corrected Adam step in place. Moments are created as zeros on first use.
void adam_update(const std::vector<torch::Tensor>& params, const std::vector<torch::Tensor>& grads, AdamState& state,
                 const AdamHyper& hyper);

// ---------------------------------------------------------------------------
// Step records

/// Per-step record: every objective evaluated during the step, in order.
struct StepLog {
    int64_t step = 0;
    std::string stage;
    std::vector<std::pair<std::string, std::map<std::string, double>>> losses;
    int64_t unlabeled_seen = 0;
    int64_t unlabeled_accepted = 0;

    std::optional<double> acceptance_rate() const;
    /// Value of `term` in the first objective called `loss`, if present.
    std::optional<double> value(const std::string& loss, const std::string& term) const;
    std::string to_json_line() const;
};

/// Which networks one parameter update touched.
struct UpdateRecord {
    std::string objective; ///< e.g. "gen_D", "recon_E"
    std::string target;    ///< networks handed to the optimizer, e.g. "D", "EG"
    bool changed_encoder = false;
    bool changed_generator = false;
    bool changed_discriminator = false;
};

using AuditHook = std::function<void(const UpdateRecord&)>;

/// Non-finite loss or parameters; carries enough context to locate the batch.
class TrainingAbort : public NumericalError {
public:
    TrainingAbort(const std::string& what, int64_t step, std::vector<int> identities)
        : NumericalError(what), step_(step), identities_(std::move(identities))
    {
    }
    int64_t step() const { return step_; }
    const std::vector<int>& identities() const { return identities_; }

private:
    int64_t step_;
    std::vector<int> identities_;
};

// ---------------------------------------------------------------------------
// Trainer

/// Owns E, G, D, their Adam states and the noise stream, and applies the
/// two-path updates. G is excluded from the reconstruction-path optimizer in
/// two-path mode; in single-path mode the generation path is skipped and the
/// encoder objective updates E and G together.
class Trainer {
public:
    Trainer(TrainConfig config, Networks nets, RngStream noise);
    /// Fresh networks built from the config seed.
    explicit Trainer(const TrainConfig& config);
    /// Restores parameters, optimizer moments, noise stream and step counter.
    Trainer(const TrainConfig& config, const Checkpoint& checkpoint);

    StepLog step_supervised(const PairBatch& batch);
    StepLog step_self_supervised(const MixedBatch& batch);

    Checkpoint checkpoint() const;

    Networks& networks() { return nets_; }
    const Networks& networks() const { return nets_; }
    const TrainConfig& config() const { return config_; }
    int64_t step() const { return step_; }
    const RngStream& noise() const { return noise_; }
    void set_audit(AuditHook hook) { audit_ = std::move(hook); }

    /// Carried through checkpoints so interrupted stages resume in place.
    std::map<std::string, std::string>& meta() { return meta_; }

private:
    enum Net : unsigned { kE = 1u, kG = 2u, kD = 4u };

    void generation_path(const torch::Tensor& x, const torch::Tensor& views, StepLog& log, const std::vector<int>& ids);
    void reconstruction_path(const PairBatch& batch, StepLog& log);
    void self_reconstruction_path(const torch::Tensor& x, const torch::Tensor& v_hat, StepLog& log);
    void apply(const LossReport& report, unsigned targets, StepLog& log, const std::vector<int>& ids);
    void check_parameters(const std::vector<int>& ids) const;

    TrainConfig config_;
    LossOptions loss_options_;
    AdamHyper hyper_;
    Networks nets_;
    AdamState adam_e_;
    AdamState adam_g_;
    AdamState adam_d_;
    RngStream noise_;
    int64_t step_ = 0;
    AuditHook audit_;
    std::map<std::string, std::string> meta_;
};

/// Training config recorded in a checkpoint's metadata.
TrainConfig config_of_checkpoint(const Checkpoint& checkpoint);

/// Rebuilds E, G, D from a checkpoint's parameters.
Networks networks_from_checkpoint(const TrainConfig& config, const Checkpoint& checkpoint);

// ---------------------------------------------------------------------------
// Stage drivers

struct RunOptions {
    /// When set: steps.jsonl, periodic checkpoints and the final checkpoint go here.
    std::optional<std::filesystem::path> run_dir;
    int64_t checkpoint_every = 0;
    std::function<void(const StepLog&)> on_step;
    std::function<void(int64_t epoch, double acceptance_rate)> on_epoch;
    AuditHook audit;
};

/// Supervised two-path training (or the single-path baseline, per config.mode).
/// `resume` continues an interrupted run from its recorded position.
Checkpoint train_supervised(const LabeledCorpus& corpus, const TrainConfig& config, const RunOptions& options = {},
                            const std::optional<Checkpoint>& resume = std::nullopt);

/// Self-supervised stage starting from a stage-one checkpoint.
Checkpoint train_self_supervised(const LabeledCorpus& labeled, const UnlabeledCorpus& unlabeled, const TrainConfig& config,
                                 const Checkpoint& warm, const RunOptions& options = {});

/// Same pipeline with the generation path disabled; requires mode = single_path.
Checkpoint train_single_path_baseline(const LabeledCorpus& corpus, const TrainConfig& config, const RunOptions& options = {});

} // namespace crgan
