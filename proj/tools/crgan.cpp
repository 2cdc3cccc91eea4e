// crgan: corpus generation, training, rotation, sampling, evaluation and
// embedding export for the two-pathway multi-view GAN.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "crgan/checkpoint.hpp"
#include "crgan/config.hpp"
#include "crgan/data.hpp"
#include "crgan/evaluation.hpp"
#include "crgan/image_io.hpp"
#include "crgan/training.hpp"

namespace fs = std::filesystem;
using namespace crgan;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

/// Raised for invalid input that should end the process with the usage code.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::optional<std::string> env_path(const char* name)
{
    const char* value = std::getenv(name);
    if (value == nullptr || *value == '\0') {
        return std::nullopt;
    }
    return std::string(value);
}

/// Exclusive marker file; a second writer on the same run directory fails.
class RunLock {
public:
    explicit RunLock(fs::path dir) : path_(std::move(dir) / ".lock")
    {
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (f == nullptr) {
            throw UsageError("run directory is locked by another process: " + path_.string());
        }
        std::fclose(f);
    }
    ~RunLock()
    {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

LabeledCorpus load_labeled(const fs::path& dir, int image_size)
{
    if (!fs::is_directory(dir)) {
        throw UsageError("corpus directory not found: " + dir.string());
    }
    if (fs::exists(dir / "manifest.json")) {
        auto corpus = load_corpus(dir);
        if (corpus.image_size() != image_size) {
            throw UsageError("corpus image size " + std::to_string(corpus.image_size()) + " differs from the model's "
                             + std::to_string(image_size));
        }
        return corpus;
    }
    const fs::path labels = dir / "labels.tsv";
    if (!fs::exists(labels)) {
        throw UsageError("corpus has neither manifest.json nor labels.tsv: " + dir.string());
    }
    return std::get<LabeledCorpus>(load_folder(dir, labels, image_size));
}

UnlabeledCorpus concat(const UnlabeledCorpus& a, const UnlabeledCorpus& b)
{
    if (a.empty()) {
        return b;
    }
    if (b.empty()) {
        return a;
    }
    return UnlabeledCorpus(torch::cat({a.images(), b.images()}));
}

struct LoadedModel {
    TrainConfig config;
    Checkpoint checkpoint;
    Networks nets;
};

LoadedModel load_model(const fs::path& dir)
{
    if (!fs::is_directory(dir)) {
        throw UsageError("checkpoint directory not found: " + dir.string());
    }
    LoadedModel model;
    model.checkpoint = load_checkpoint(dir);
    model.config = config_of_checkpoint(model.checkpoint);
    model.nets = networks_from_checkpoint(model.config, model.checkpoint);
    return model;
}

void write_diagnostics(const fs::path& path, const TrainingAbort& abort)
{
    std::ofstream out(path);
    out << "error = " << abort.what() << '\n';
    out << "step = " << abort.step() << '\n';
    out << "identities =";
    for (const int id : abort.identities()) {
        out << ' ' << id;
    }
    out << '\n';
}

// ---------------------------------------------------------------------------

struct MakeDataArgs {
    int identities = 250;
    int size = 32;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_make_data(const MakeDataArgs& args)
{
    if (args.identities < 1) {
        throw UsageError("--identities must be at least 1");
    }
    if (args.size < 8) {
        throw UsageError("--size must be at least 8");
    }
    std::string out = args.out;
    if (out.empty()) {
        out = env_path("CRGAN_CORPUS").value_or("");
    }
    if (out.empty()) {
        throw UsageError("--out is required (or set CRGAN_CORPUS)");
    }
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) {
        throw UsageError("cannot create output directory " + out);
    }
    const auto corpus = make_corpus(args.identities, args.size, args.seed);
    try {
        save_corpus(corpus, out, args.seed);
    } catch (const std::runtime_error& e) {
        throw UsageError(e.what());
    }
    std::cout << "wrote " << corpus.size() << " images to " << out << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string resume;
    std::string mode;
    std::string stage = "supervised";
};

int cmd_train(const TrainArgs& args)
{
    RunConfig run = load_run_config(args.config);
    if (auto corpus = env_path("CRGAN_CORPUS")) {
        run.corpus = *corpus;
    }
    if (auto dir = env_path("CRGAN_RUN_DIR")) {
        run.run_dir = *dir;
    }
    if (!args.mode.empty()) {
        run.train.mode = parse_mode(args.mode);
    }
    run.validate();
    if (args.stage != "supervised" && args.stage != "self") {
        throw UsageError("--stage must be supervised or self");
    }
    if (args.stage == "self" && args.resume.empty()) {
        throw UsageError("--stage self needs a warm checkpoint via --resume");
    }
    if (run.corpus.empty()) {
        throw UsageError("config does not name a corpus");
    }

    fs::create_directories(run.run_dir);
    RunLock lock(run.run_dir);
    {
        std::ofstream echo(run.run_dir / "config.txt");
        echo << render_run_config(run);
    }

    const auto corpus = load_labeled(run.corpus, run.train.image_size);
    const auto [train_part, held_out] = split_corpus(corpus, run.train_fraction, run.split_seed);
    std::cout << "corpus: " << train_part.identity_ids().size() << " training identities, " << held_out.identity_ids().size()
              << " held out\n";

    std::optional<Checkpoint> resume;
    if (!args.resume.empty()) {
        if (!fs::is_directory(args.resume)) {
            throw UsageError("checkpoint directory not found: " + args.resume);
        }
        resume = load_checkpoint(args.resume, run.train.fingerprint());
    }

    RunOptions options;
    options.run_dir = run.run_dir;
    options.checkpoint_every = run.checkpoint_every;
    options.on_step = [](const StepLog& log) {
        if (log.step % 50 == 0) {
            std::cout << "step " << log.step;
            auto l1 = log.value("recon_E", "l1");
            if (!l1) {
                l1 = log.value("self_recon_E", "l1");
            }
            if (l1) {
                std::cout << " l1 " << *l1;
            }
            std::cout << '\n' << std::flush;
        }
    };
    options.on_epoch = [](int64_t epoch, double rate) {
        std::cout << "epoch " << epoch << " pseudo-label acceptance " << rate << '\n' << std::flush;
    };

    try {
        if (args.stage == "supervised") {
            train_supervised(train_part, run.train, options, resume);
        } else {
            auto [labeled, stripped] = strip_labels(train_part, run.strip_label_fraction, run.split_seed);
            UnlabeledCorpus unlabeled = stripped;
            if (!run.unlabeled.empty()) {
                auto extra = load_folder(run.unlabeled, std::nullopt, run.train.image_size);
                unlabeled = concat(unlabeled, std::get<UnlabeledCorpus>(extra));
            }
            train_self_supervised(labeled, unlabeled, run.train, *resume, options);
        }
    } catch (const TrainingAbort& abort) {
        const fs::path diagnostics = run.run_dir / "diagnostics.txt";
        write_diagnostics(diagnostics, abort);
        std::cerr << "numerical abort: " << abort.what() << "\ndiagnostics: " << diagnostics.string() << '\n';
        return kExitNumerical;
    }
    std::cout << "final checkpoint: " << (run.run_dir / "final").string() << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct RotateArgs {
    std::string ckpt;
    std::string input;
    std::string out;
};

int cmd_rotate(const RotateArgs& args)
{
    auto model = load_model(args.ckpt);
    torch::Tensor raw;
    try {
        raw = read_png(args.input);
    } catch (const std::runtime_error& e) {
        throw UsageError(e.what());
    }
    const Image input(fit_image(raw, model.config.image_size));
    const auto [view_logits, latent] = encode(*model.nets.encoder, input);
    std::array<double, kViewCount> logits{};
    std::copy(view_logits.begin(), view_logits.end(), logits.begin());
    const auto distribution = ViewDistribution::from_logits(logits);
    const auto& view_probs = distribution.probs();
    fs::create_directories(args.out);
    for (int bin = 0; bin < kViewCount; ++bin) {
        write_png(fs::path(args.out) / ("view_" + std::to_string(bin) + ".png"), generate(*model.nets.generator, ViewCode(bin), latent));
    }
    const auto predicted = nearest_one_hot(distribution);
    std::ofstream report(fs::path(args.out) / "input_view.txt");
    report << "view_bin = " << predicted.index() << '\n';
    report << "yaw_degrees = " << angle_of_view_bin(predicted.index()) << '\n';
    for (int bin = 0; bin < kViewCount; ++bin) {
        report << "p" << bin << " = " << view_probs[static_cast<std::size_t>(bin)] << '\n';
    }
    std::cout << "input view bin " << predicted.index() << " (" << angle_of_view_bin(predicted.index()) << " degrees); wrote "
              << kViewCount << " views to " << args.out << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
    std::string ckpt;
    int64_t n = 9;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_generate(const GenerateArgs& args)
{
    if (args.n < 1) {
        throw UsageError("--n must be at least 1");
    }
    auto model = load_model(args.ckpt);
    auto rng = RngStream(args.seed).split("generate");
    fs::create_directories(args.out);
    char name[64];
    for (int64_t k = 0; k < args.n; ++k) {
        const Latent z = sample_latent(rng);
        const Image img = generate(*model.nets.generator, ViewCode(static_cast<int>(k % kViewCount)), z);
        std::snprintf(name, sizeof name, "sample_%04lld_view_%lld.png", static_cast<long long>(k),
                      static_cast<long long>(k % kViewCount));
        write_png(fs::path(args.out) / name, img);
    }
    std::cout << "wrote " << args.n << " images to " << args.out << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt;
    std::string corpus;
    std::string baseline;
    std::string out;
    std::uint64_t seed = 0;
    int64_t draws = 500;
    double train_fraction = 0.0;
    std::uint64_t split_seed = 0;
};

int cmd_eval(const EvalArgs& args)
{
    auto model = load_model(args.ckpt);
    std::string corpus_dir = args.corpus.empty() ? env_path("CRGAN_CORPUS").value_or("") : args.corpus;
    if (corpus_dir.empty()) {
        throw UsageError("--corpus is required (or set CRGAN_CORPUS)");
    }
    const auto corpus = load_labeled(corpus_dir, model.config.image_size);
    // the embedder knows every identity; metrics may be restricted to the held-out part
    const auto embedder = train_identity_embedder(corpus, args.seed);
    LabeledCorpus target = corpus;
    if (args.train_fraction > 0.0) {
        target = split_corpus(corpus, args.train_fraction, args.split_seed).second;
    }
    EvalOptions options;
    options.coverage_draws = args.draws;
    options.seed = args.seed;
    auto report = evaluate(model.nets, target, embedder, model.checkpoint.fingerprint, options);
    if (!args.baseline.empty()) {
        auto baseline = load_model(args.baseline);
        const auto base_report = evaluate(baseline.nets, target, embedder, baseline.checkpoint.fingerprint, options);
        add_baseline_comparison(report, base_report);
    }
    report.save(args.out);
    std::cout << report.render();
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EmbedArgs {
    std::string ckpt;
    std::string corpus;
    std::string out;
    bool identity_embedder = false;
    std::uint64_t seed = 0;
};

int cmd_embed(const EmbedArgs& args)
{
    auto model = load_model(args.ckpt);
    std::string corpus_dir = args.corpus.empty() ? env_path("CRGAN_CORPUS").value_or("") : args.corpus;
    if (corpus_dir.empty()) {
        throw UsageError("--corpus is required (or set CRGAN_CORPUS)");
    }
    const auto corpus = load_labeled(corpus_dir, model.config.image_size);
    const int64_t rows = args.identity_embedder ? export_embeddings(train_identity_embedder(corpus, args.seed), corpus, args.out)
                                                : export_embeddings(*model.nets.encoder, corpus, args.out);
    std::cout << rows << '\n';
    return kExitOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Two-pathway multi-view GAN: data, training, rotation, sampling and evaluation"};
    app.require_subcommand(1);

    MakeDataArgs make_data;
    auto* make_data_cmd = app.add_subcommand("make-data", "Render the synthetic multi-view corpus");
    make_data_cmd->add_option("--identities", make_data.identities, "Number of identities")->capture_default_str();
    make_data_cmd->add_option("--size", make_data.size, "Image side in pixels")->capture_default_str();
    make_data_cmd->add_option("--seed", make_data.seed, "Corpus seed")->capture_default_str();
    make_data_cmd->add_option("--out", make_data.out, "Output directory (default: $CRGAN_CORPUS)");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train a stage from a run config");
    train_cmd->add_option("--config", train.config, "Run config file")->required();
    train_cmd->add_option("--resume", train.resume, "Checkpoint to resume from (warm start for --stage self)");
    train_cmd->add_option("--mode", train.mode, "two_path or single_path (overrides the config)");
    train_cmd->add_option("--stage", train.stage, "supervised or self")->capture_default_str();

    RotateArgs rotate;
    auto* rotate_cmd = app.add_subcommand("rotate", "Render all nine views of one input image");
    rotate_cmd->add_option("--ckpt", rotate.ckpt, "Checkpoint directory")->required();
    rotate_cmd->add_option("--input", rotate.input, "Input PNG")->required();
    rotate_cmd->add_option("--out", rotate.out, "Output directory")->required();

    GenerateArgs gen;
    auto* generate_cmd = app.add_subcommand("generate", "Sample images from random latents");
    generate_cmd->add_option("--ckpt", gen.ckpt, "Checkpoint directory")->required();
    generate_cmd->add_option("--n", gen.n, "Number of images")->capture_default_str();
    generate_cmd->add_option("--seed", gen.seed, "Sampling seed")->capture_default_str();
    generate_cmd->add_option("--out", gen.out, "Output directory")->required();

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint, optionally against a baseline");
    eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint directory")->required();
    eval_cmd->add_option("--corpus", eval.corpus, "Labeled corpus directory (default: $CRGAN_CORPUS)");
    eval_cmd->add_option("--baseline", eval.baseline, "Baseline checkpoint for paired ablation metrics");
    eval_cmd->add_option("--out", eval.out, "Report file")->required();
    eval_cmd->add_option("--seed", eval.seed, "Evaluation seed")->capture_default_str();
    eval_cmd->add_option("--draws", eval.draws, "Latent draws for the coverage metric")->capture_default_str();
    eval_cmd->add_option("--train-fraction", eval.train_fraction,
                         "When set, evaluate only the identities held out by this split fraction");
    eval_cmd->add_option("--split-seed", eval.split_seed, "Seed of that split")->capture_default_str();

    EmbedArgs embed;
    auto* embed_cmd = app.add_subcommand("embed", "Export per-image embeddings as TSV");
    embed_cmd->add_option("--ckpt", embed.ckpt, "Checkpoint directory")->required();
    embed_cmd->add_option("--corpus", embed.corpus, "Labeled corpus directory (default: $CRGAN_CORPUS)");
    embed_cmd->add_option("--out", embed.out, "Output TSV")->required();
    embed_cmd->add_flag("--identity-embedder", embed.identity_embedder, "Export identity-embedder features instead of E's latent");
    embed_cmd->add_option("--seed", embed.seed, "Embedder seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*make_data_cmd) {
            return cmd_make_data(make_data);
        }
        if (*train_cmd) {
            return cmd_train(train);
        }
        if (*rotate_cmd) {
            return cmd_rotate(rotate);
        }
        if (*generate_cmd) {
            return cmd_generate(gen);
        }
        if (*eval_cmd) {
            return cmd_eval(eval);
        }
        if (*embed_cmd) {
            return cmd_embed(embed);
        }
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const DomainError& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}
