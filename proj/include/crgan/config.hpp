#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace crgan {

enum class TrainMode { two_path, single_path };
enum class ProbabilityForm { log, raw };

/// Coefficients of the adversarial objectives.
struct LossWeights {
    double lambda1 = 10.0; ///< gradient penalty
    double lambda2 = 1.0;  ///< view term on real images (critic)
    double lambda3 = 1.0;  ///< view term on generated images
    double lambda4 = 1.0;  ///< L1 reconstruction
    double lambda5 = 0.01; ///< encoder view cross-entropy

    void validate() const;
};

struct TrainConfig {
    int batch_size = 64;
    double learning_rate = 0.0005;
    double adam_beta1 = 0.0;
    double adam_beta2 = 0.9;
    double adam_eps = 1e-8;
    LossWeights weights;
    int supervised_epochs = 25;
    int self_supervised_epochs = 10;
    /// Hard cap on optimizer steps for a stage; 0 means the epoch count governs.
    int64_t max_steps = 0;
    int image_size = 32;
    int channels = 64;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::two_path;
    ProbabilityForm prob_form = ProbabilityForm::log;
    /// Pseudo-label confidence threshold; 0 accepts every estimate.
    double tau = 0.0;
    /// Critic updates per generator/encoder update.
    int critic_steps = 1;

    void validate() const;
    /// Hash of the fields that fix the parameter layout and the objective.
    std::uint64_t fingerprint() const;
};

/// Everything a CLI run needs: the training config plus paths.
struct RunConfig {
    TrainConfig train;
    std::filesystem::path corpus;
    std::filesystem::path unlabeled;
    std::filesystem::path run_dir = "run";
    double train_fraction = 0.8;
    std::uint64_t split_seed = 0;
    /// Fraction of training identities whose labels are withheld in the self stage.
    double strip_label_fraction = 0.0;
    int64_t checkpoint_every = 0;

    void validate() const;
};

std::string to_string(TrainMode mode);
std::string to_string(ProbabilityForm form);
TrainMode parse_mode(const std::string& text);
ProbabilityForm parse_prob_form(const std::string& text);

/// Parses `key = value` lines; `#` starts a comment. Unknown keys are rejected.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Every key with its resolved value, one per line, in a fixed order.
std::string render_run_config(const RunConfig& config);
std::map<std::string, std::string> run_config_entries(const RunConfig& config);
/// The training keys only, without paths.
std::map<std::string, std::string> train_config_entries(const TrainConfig& config);
/// Inverse of train_config_entries; missing keys keep their defaults.
TrainConfig train_config_from_entries(const std::map<std::string, std::string>& entries);

} // namespace crgan
