#include "crgan/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <vector>

#include "crgan/core.hpp"

namespace crgan {

namespace {

std::string trim(const std::string& s)
{
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::string fmt_double(double v)
{
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

double to_double(const std::string& key, const std::string& value)
{
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
    }
}

int64_t to_int(const std::string& key, const std::string& value)
{
    try {
        std::size_t used = 0;
        const long long v = std::stoll(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& value)
{
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size() || value.starts_with('-')) {
            throw std::invalid_argument(value);
        }
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + value + "'");
    }
}

struct Field {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<Field>& fields()
{
    static const std::vector<Field> table = {
        {"batch_size", [](const RunConfig& c) { return std::to_string(c.train.batch_size); },
         [](RunConfig& c, const std::string& v) { c.train.batch_size = static_cast<int>(to_int("batch_size", v)); }},
        {"learning_rate", [](const RunConfig& c) { return fmt_double(c.train.learning_rate); },
         [](RunConfig& c, const std::string& v) { c.train.learning_rate = to_double("learning_rate", v); }},
        {"adam_beta1", [](const RunConfig& c) { return fmt_double(c.train.adam_beta1); },
         [](RunConfig& c, const std::string& v) { c.train.adam_beta1 = to_double("adam_beta1", v); }},
        {"adam_beta2", [](const RunConfig& c) { return fmt_double(c.train.adam_beta2); },
         [](RunConfig& c, const std::string& v) { c.train.adam_beta2 = to_double("adam_beta2", v); }},
        {"adam_eps", [](const RunConfig& c) { return fmt_double(c.train.adam_eps); },
         [](RunConfig& c, const std::string& v) { c.train.adam_eps = to_double("adam_eps", v); }},
        {"lambda1", [](const RunConfig& c) { return fmt_double(c.train.weights.lambda1); },
         [](RunConfig& c, const std::string& v) { c.train.weights.lambda1 = to_double("lambda1", v); }},
        {"lambda2", [](const RunConfig& c) { return fmt_double(c.train.weights.lambda2); },
         [](RunConfig& c, const std::string& v) { c.train.weights.lambda2 = to_double("lambda2", v); }},
        {"lambda3", [](const RunConfig& c) { return fmt_double(c.train.weights.lambda3); },
         [](RunConfig& c, const std::string& v) { c.train.weights.lambda3 = to_double("lambda3", v); }},
        {"lambda4", [](const RunConfig& c) { return fmt_double(c.train.weights.lambda4); },
         [](RunConfig& c, const std::string& v) { c.train.weights.lambda4 = to_double("lambda4", v); }},
        {"lambda5", [](const RunConfig& c) { return fmt_double(c.train.weights.lambda5); },
         [](RunConfig& c, const std::string& v) { c.train.weights.lambda5 = to_double("lambda5", v); }},
        {"supervised_epochs", [](const RunConfig& c) { return std::to_string(c.train.supervised_epochs); },
         [](RunConfig& c, const std::string& v) { c.train.supervised_epochs = static_cast<int>(to_int("supervised_epochs", v)); }},
        {"self_supervised_epochs", [](const RunConfig& c) { return std::to_string(c.train.self_supervised_epochs); },
         [](RunConfig& c, const std::string& v) {
             c.train.self_supervised_epochs = static_cast<int>(to_int("self_supervised_epochs", v));
         }},
        {"max_steps", [](const RunConfig& c) { return std::to_string(c.train.max_steps); },
         [](RunConfig& c, const std::string& v) { c.train.max_steps = to_int("max_steps", v); }},
        {"image_size", [](const RunConfig& c) { return std::to_string(c.train.image_size); },
         [](RunConfig& c, const std::string& v) { c.train.image_size = static_cast<int>(to_int("image_size", v)); }},
        {"channels", [](const RunConfig& c) { return std::to_string(c.train.channels); },
         [](RunConfig& c, const std::string& v) { c.train.channels = static_cast<int>(to_int("channels", v)); }},
        {"seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
         [](RunConfig& c, const std::string& v) { c.train.seed = to_u64("seed", v); }},
        {"mode", [](const RunConfig& c) { return to_string(c.train.mode); },
         [](RunConfig& c, const std::string& v) { c.train.mode = parse_mode(v); }},
        {"prob_form", [](const RunConfig& c) { return to_string(c.train.prob_form); },
         [](RunConfig& c, const std::string& v) { c.train.prob_form = parse_prob_form(v); }},
        {"tau", [](const RunConfig& c) { return fmt_double(c.train.tau); },
         [](RunConfig& c, const std::string& v) { c.train.tau = to_double("tau", v); }},
        {"critic_steps", [](const RunConfig& c) { return std::to_string(c.train.critic_steps); },
         [](RunConfig& c, const std::string& v) { c.train.critic_steps = static_cast<int>(to_int("critic_steps", v)); }},
        {"corpus", [](const RunConfig& c) { return c.corpus.string(); },
         [](RunConfig& c, const std::string& v) { c.corpus = v; }},
        {"unlabeled", [](const RunConfig& c) { return c.unlabeled.string(); },
         [](RunConfig& c, const std::string& v) { c.unlabeled = v; }},
        {"run_dir", [](const RunConfig& c) { return c.run_dir.string(); },
         [](RunConfig& c, const std::string& v) { c.run_dir = v; }},
        {"train_fraction", [](const RunConfig& c) { return fmt_double(c.train_fraction); },
         [](RunConfig& c, const std::string& v) { c.train_fraction = to_double("train_fraction", v); }},
        {"split_seed", [](const RunConfig& c) { return std::to_string(c.split_seed); },
         [](RunConfig& c, const std::string& v) { c.split_seed = to_u64("split_seed", v); }},
        {"strip_label_fraction", [](const RunConfig& c) { return fmt_double(c.strip_label_fraction); },
         [](RunConfig& c, const std::string& v) { c.strip_label_fraction = to_double("strip_label_fraction", v); }},
        {"checkpoint_every", [](const RunConfig& c) { return std::to_string(c.checkpoint_every); },
         [](RunConfig& c, const std::string& v) { c.checkpoint_every = to_int("checkpoint_every", v); }},
    };
    return table;
}

} // namespace

void LossWeights::validate() const
{
    for (double l : {lambda1, lambda2, lambda3, lambda4, lambda5}) {
        if (!std::isfinite(l) || l < 0.0) {
            throw ConfigError("loss weights must be finite and nonnegative");
        }
    }
}

void TrainConfig::validate() const
{
    weights.validate();
    if (batch_size < 2) {
        throw ConfigError("batch_size must be at least 2");
    }
    if (supervised_epochs < 0 || self_supervised_epochs < 0 || max_steps < 0) {
        throw ConfigError("epoch and step counts must be nonnegative");
    }
    if (!(tau >= 0.0 && tau <= 1.0)) {
        throw ConfigError("tau must lie in [0, 1]");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be positive");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw ConfigError("Adam decay rates must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) {
        throw ConfigError("adam_eps must be positive");
    }
    if (critic_steps < 1) {
        throw ConfigError("critic_steps must be at least 1");
    }
    if (image_size != 32 && image_size != 64) {
        throw ConfigError("image_size must be 32 or 64");
    }
    if (channels < 8) {
        throw ConfigError("channels must be at least 8");
    }
}

std::uint64_t TrainConfig::fingerprint() const
{
    std::ostringstream os;
    os << "image_size=" << image_size << ";channels=" << channels << ";lr=" << fmt_double(learning_rate)
       << ";betas=" << fmt_double(adam_beta1) << "," << fmt_double(adam_beta2) << ";eps=" << fmt_double(adam_eps)
       << ";lambdas=" << fmt_double(weights.lambda1) << "," << fmt_double(weights.lambda2) << ","
       << fmt_double(weights.lambda3) << "," << fmt_double(weights.lambda4) << "," << fmt_double(weights.lambda5)
       << ";prob_form=" << to_string(prob_form);
    return fnv1a64(os.str());
}

void RunConfig::validate() const
{
    train.validate();
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ConfigError("train_fraction must lie in (0, 1)");
    }
    if (!(strip_label_fraction >= 0.0 && strip_label_fraction < 1.0)) {
        throw ConfigError("strip_label_fraction must lie in [0, 1)");
    }
    if (checkpoint_every < 0) {
        throw ConfigError("checkpoint_every must be nonnegative");
    }
}

std::string to_string(TrainMode mode)
{
    return mode == TrainMode::two_path ? "two_path" : "single_path";
}

std::string to_string(ProbabilityForm form)
{
    return form == ProbabilityForm::log ? "log" : "raw";
}

TrainMode parse_mode(const std::string& text)
{
    if (text == "two_path") {
        return TrainMode::two_path;
    }
    if (text == "single_path") {
        return TrainMode::single_path;
    }
    throw ConfigError("mode must be two_path or single_path, got '" + text + "'");
}

ProbabilityForm parse_prob_form(const std::string& text)
{
    if (text == "log") {
        return ProbabilityForm::log;
    }
    if (text == "raw") {
        return ProbabilityForm::raw;
    }
    throw ConfigError("prob_form must be log or raw, got '" + text + "'");
}

RunConfig parse_run_config(const std::string& text)
{
    RunConfig config;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        bool known = false;
        for (const auto& f : fields()) {
            if (f.key == key) {
                f.set(config, value);
                known = true;
                break;
            }
        }
        if (!known) {
            throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
    }
    config.validate();
    return config;
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

std::string render_run_config(const RunConfig& config)
{
    std::ostringstream os;
    for (const auto& f : fields()) {
        os << f.key << " = " << f.get(config) << "\n";
    }
    return os.str();
}

std::map<std::string, std::string> train_config_entries(const TrainConfig& config)
{
    static const std::set<std::string> run_only = {"corpus", "unlabeled", "run_dir", "train_fraction",
                                                   "split_seed", "strip_label_fraction", "checkpoint_every"};
    RunConfig run;
    run.train = config;
    std::map<std::string, std::string> out;
    for (const auto& f : fields()) {
        if (!run_only.contains(f.key)) {
            out[f.key] = f.get(run);
        }
    }
    return out;
}

TrainConfig train_config_from_entries(const std::map<std::string, std::string>& entries)
{
    RunConfig run;
    const auto known = train_config_entries(run.train);
    for (const auto& [key, value] : entries) {
        if (!known.contains(key)) {
            throw ConfigError("unknown training key '" + key + "'");
        }
        for (const auto& f : fields()) {
            if (f.key == key) {
                f.set(run, value);
            }
        }
    }
    run.train.validate();
    return run.train;
}

std::map<std::string, std::string> run_config_entries(const RunConfig& config)
{
    std::map<std::string, std::string> out;
    for (const auto& f : fields()) {
        out[f.key] = f.get(config);
    }
    return out;
}

} // namespace crgan
