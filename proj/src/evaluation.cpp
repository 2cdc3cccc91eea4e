#include "crgan/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "crgan/checkpoint.hpp"
#include "crgan/training.hpp"

namespace crgan {

namespace {

constexpr int64_t kChunk = 256;

std::string format_double(double value)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

std::string trim(const std::string& s)
{
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) {
        return {};
    }
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

/// Applies `fn` to consecutive row chunks of `x` and concatenates the results.
template <typename Fn>
torch::Tensor chunked(const torch::Tensor& x, Fn fn)
{
    std::vector<torch::Tensor> parts;
    for (int64_t start = 0; start < x.size(0); start += kChunk) {
        parts.push_back(fn(x.slice(0, start, std::min(start + kChunk, x.size(0)))));
    }
    return torch::cat(parts);
}

torch::Tensor encode_latents(EncoderNet& encoder, const torch::Tensor& images)
{
    torch::NoGradGuard no_grad;
    return chunked(images, [&](const torch::Tensor& x) { return encoder.forward(x).latent; });
}

torch::Tensor generate_chunked(GeneratorNet& generator, const torch::Tensor& views, const torch::Tensor& latents)
{
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> parts;
    for (int64_t start = 0; start < views.size(0); start += kChunk) {
        const int64_t end = std::min(start + kChunk, views.size(0));
        parts.push_back(generate_batch(generator, views.slice(0, start, end), latents.slice(0, start, end)));
    }
    return torch::cat(parts);
}

void require_nonempty(const LabeledCorpus& corpus)
{
    if (corpus.empty()) {
        throw DomainError("evaluation corpus is empty");
    }
}

} // namespace

// ---------------------------------------------------------------------------
// EvalReport

void EvalReport::validate() const
{
    for (const auto& [key, value] : metrics) {
        if (!std::isfinite(value)) {
            throw NumericalError("metric " + key + " is not finite");
        }
    }
    for (const auto& [key, value] : counts) {
        if (value <= 0) {
            throw ContractError("count " + key + " must be positive");
        }
    }
}

std::string EvalReport::render() const
{
    std::ostringstream out;
    out << "fingerprint = " << hex64(fingerprint) << '\n';
    for (const auto& [key, value] : metrics) {
        out << "metric." << key << " = " << format_double(value) << '\n';
    }
    for (const auto& [key, value] : counts) {
        out << "count." << key << " = " << value << '\n';
    }
    for (const auto& [key, value] : notes) {
        out << "note." << key << " = " << value << '\n';
    }
    return out.str();
}

EvalReport EvalReport::parse(const std::string& text)
{
    EvalReport report;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("malformed report line: " + line);
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "fingerprint") {
            report.fingerprint = parse_hex64(value);
        } else if (key.rfind("metric.", 0) == 0) {
            report.metrics[key.substr(7)] = std::stod(value);
        } else if (key.rfind("count.", 0) == 0) {
            report.counts[key.substr(6)] = std::stoll(value);
        } else if (key.rfind("note.", 0) == 0) {
            report.notes[key.substr(5)] = value;
        } else {
            throw ConfigError("unknown report key: " + key);
        }
    }
    return report;
}

void EvalReport::save(const std::filesystem::path& path) const
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write report " + path.string());
    }
    out << render();
    if (!out) {
        throw std::runtime_error("cannot write report " + path.string());
    }
}

EvalReport EvalReport::load(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read report " + path.string());
    }
    std::ostringstream text;
    text << in.rdbuf();
    return parse(text.str());
}

// ---------------------------------------------------------------------------
// View estimation

double view_accuracy(const torch::Tensor& logits, const std::vector<int>& labels)
{
    if (labels.empty()) {
        throw DomainError("view accuracy needs at least one sample");
    }
    if (logits.dim() != 2 || logits.size(0) != static_cast<int64_t>(labels.size())) {
        throw DomainError("logits and labels disagree in length");
    }
    const auto predicted = argmax_lowest(logits);
    const auto truth = torch::tensor(std::vector<int64_t>(labels.begin(), labels.end()), torch::kInt64);
    return predicted.eq(truth).to(torch::kFloat64).mean().item<double>();
}

double eval_view_accuracy(EncoderNet& encoder, const LabeledCorpus& corpus)
{
    require_nonempty(corpus);
    torch::NoGradGuard no_grad;
    const auto logits = chunked(corpus.images(), [&](const torch::Tensor& x) { return encoder.forward(x).view_logits; });
    return view_accuracy(logits, corpus.views());
}

// ---------------------------------------------------------------------------
// Cross-reconstruction

double eval_cross_reconstruction(EncoderNet& encoder, GeneratorNet& generator, const LabeledCorpus& corpus, int64_t max_pairs,
                                 std::uint64_t seed)
{
    std::vector<std::pair<int64_t, int64_t>> pairs;
    for (const int id : corpus.identity_ids()) {
        const auto& rows = corpus.indices_of(id);
        for (const int64_t i : rows) {
            for (const int64_t j : rows) {
                if (corpus.view(i) != corpus.view(j)) {
                    pairs.emplace_back(i, j);
                }
            }
        }
    }
    if (pairs.empty()) {
        throw DomainError("no same-identity pairs with distinct views");
    }
    if (max_pairs > 0 && static_cast<int64_t>(pairs.size()) > max_pairs) {
        // partial Fisher-Yates shuffle
        auto rng = RngStream(seed).split("cross_reconstruction");
        for (int64_t k = 0; k < max_pairs; ++k) {
            const auto r = k + static_cast<int64_t>(rng.below(static_cast<std::uint64_t>(pairs.size()) - static_cast<std::uint64_t>(k)));
            std::swap(pairs[static_cast<std::size_t>(k)], pairs[static_cast<std::size_t>(r)]);
        }
        pairs.resize(static_cast<std::size_t>(max_pairs));
    }

    const auto latents = encode_latents(encoder, corpus.images());
    std::vector<int64_t> src;
    std::vector<int64_t> dst;
    std::vector<int64_t> views;
    for (const auto& [i, j] : pairs) {
        src.push_back(i);
        dst.push_back(j);
        views.push_back(corpus.view(j));
    }
    const auto src_t = torch::tensor(src, torch::kInt64);
    const auto dst_t = torch::tensor(dst, torch::kInt64);
    const auto fake = generate_chunked(generator, torch::tensor(views, torch::kInt64), latents.index_select(0, src_t));
    const auto real = corpus.images().index_select(0, dst_t);
    return (fake.to(torch::kFloat64) - real.to(torch::kFloat64)).abs().mean().item<double>();
}

// ---------------------------------------------------------------------------
// Identity embedder

class IdentityEmbedder::Module : public torch::nn::Module {
public:
    Module(int image_size, int width, int feature_dim, int n_identities) : image_size_(image_size)
    {
        conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(kImageChannels, width, 3).padding(1)));
        conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(width, 2 * width, 3).padding(1)));
        conv3_ = register_module("conv3", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * width, 4 * width, 3).padding(1)));
        const int64_t reduced = image_size / 8;
        features_ = register_module("features", torch::nn::Linear(4 * width * reduced * reduced, feature_dim));
        classes_ = register_parameter("classes", torch::zeros({n_identities, feature_dim}));
    }

    /// Unit-normalized features.
    torch::Tensor embed(const torch::Tensor& x)
    {
        auto h = torch::avg_pool2d(torch::relu(conv1_(x)), 2);
        h = torch::avg_pool2d(torch::relu(conv2_(h)), 2);
        h = torch::avg_pool2d(torch::relu(conv3_(h)), 2);
        const auto f = features_(h.flatten(1));
        return torch::nn::functional::normalize(f, torch::nn::functional::NormalizeFuncOptions().dim(1).eps(1e-12));
    }

    torch::Tensor logits(const torch::Tensor& embedding, double scale)
    {
        const auto w = torch::nn::functional::normalize(classes_, torch::nn::functional::NormalizeFuncOptions().dim(1).eps(1e-12));
        return scale * embedding.matmul(w.t());
    }

    int image_size() const { return image_size_; }
    int feature_dim() const { return static_cast<int>(classes_.size(1)); }

private:
    int image_size_;
    torch::nn::Conv2d conv1_{nullptr};
    torch::nn::Conv2d conv2_{nullptr};
    torch::nn::Conv2d conv3_{nullptr};
    torch::nn::Linear features_{nullptr};
    torch::Tensor classes_;
};

IdentityEmbedder::IdentityEmbedder(std::shared_ptr<Module> module, std::vector<int> identities, double logit_scale,
                                   double train_accuracy)
    : module_(std::move(module)), identities_(std::move(identities)), logit_scale_(logit_scale), train_accuracy_(train_accuracy)
{
}

torch::Tensor IdentityEmbedder::embed(const torch::Tensor& images) const
{
    check_geometry(images, module_->image_size());
    torch::NoGradGuard no_grad;
    return chunked(images.to(torch::kFloat32), [&](const torch::Tensor& x) { return module_->embed(x); });
}

torch::Tensor IdentityEmbedder::embed(const Image& image) const
{
    return embed(image.tensor().unsqueeze(0))[0];
}

torch::Tensor IdentityEmbedder::classify(const torch::Tensor& images) const
{
    torch::NoGradGuard no_grad;
    return module_->logits(embed(images), logit_scale_);
}

int IdentityEmbedder::feature_dim() const
{
    return module_->feature_dim();
}

int IdentityEmbedder::image_size() const
{
    return module_->image_size();
}

std::uint64_t IdentityEmbedder::parameter_hash() const
{
    return crgan::parameter_hash(*module_);
}

IdentityEmbedder train_identity_embedder(const LabeledCorpus& corpus, std::uint64_t seed, const EmbedderOptions& options)
{
    const auto ids = corpus.identity_ids();
    if (ids.size() < 2) {
        throw DomainError("identity embedder needs at least two identities");
    }
    if (corpus.image_size() % 8 != 0) {
        throw DomainError("identity embedder needs an image size divisible by 8");
    }
    std::map<int, int64_t> class_of;
    for (std::size_t k = 0; k < ids.size(); ++k) {
        class_of[ids[k]] = static_cast<int64_t>(k);
    }
    std::vector<int64_t> classes;
    for (const int id : corpus.identities()) {
        classes.push_back(class_of.at(id));
    }
    const auto targets = torch::tensor(classes, torch::kInt64);

    const RngStream root(seed);
    auto module = std::make_shared<IdentityEmbedder::Module>(corpus.image_size(), options.width, options.feature_dim,
                                                             static_cast<int>(ids.size()));
    auto init = root.split("embedder/init");
    initialize_parameters(*module, init);

    const auto params = parameters_of(*module);
    AdamState state;
    AdamHyper hyper;
    hyper.lr = options.learning_rate;
    hyper.beta1 = 0.9;
    hyper.beta2 = 0.999;

    const int64_t n = corpus.size();
    double accuracy = 0.0;
    for (int epoch = 0; epoch < options.max_epochs; ++epoch) {
        auto order_rng = root.split("embedder/epoch/" + std::to_string(epoch));
        std::vector<int64_t> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        for (int64_t k = n - 1; k > 0; --k) {
            std::swap(order[static_cast<std::size_t>(k)],
                      order[static_cast<std::size_t>(order_rng.below(static_cast<std::uint64_t>(k) + 1))]);
        }
        const auto order_t = torch::tensor(order, torch::kInt64);
        for (int64_t start = 0; start < n; start += options.batch_size) {
            const auto rows = order_t.slice(0, start, std::min<int64_t>(start + options.batch_size, n));
            const auto logits = module->logits(module->embed(corpus.images().index_select(0, rows)), options.logit_scale);
            const auto loss = torch::nn::functional::cross_entropy(logits, targets.index_select(0, rows));
            const auto grads = torch::autograd::grad({loss}, params);
            adam_update(params, grads, state, hyper);
        }
        {
            torch::NoGradGuard no_grad;
            const auto logits = chunked(corpus.images(), [&](const torch::Tensor& x) {
                return module->logits(module->embed(x), options.logit_scale);
            });
            accuracy = argmax_lowest(logits).eq(targets).to(torch::kFloat64).mean().item<double>();
        }
        if (accuracy >= options.target_accuracy) {
            module->eval();
            return IdentityEmbedder(module, ids, options.logit_scale, accuracy);
        }
    }
    throw NumericalError("identity embedder reached only " + format_double(accuracy) + " train accuracy");
}

torch::Tensor squared_distances(const torch::Tensor& a, const torch::Tensor& b)
{
    return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).sum(1);
}

// ---------------------------------------------------------------------------
// Identity preservation and latent coverage

double eval_identity_similarity(EncoderNet& encoder, GeneratorNet& generator, const IdentityEmbedder& embedder,
                                const LabeledCorpus& corpus)
{
    require_nonempty(corpus);
    const auto latents = encode_latents(encoder, corpus.images());
    const auto source = embedder.embed(corpus.images());
    const int64_t n = corpus.size();
    double total = 0.0;
    for (int bin = 0; bin < kViewCount; ++bin) {
        const auto views = torch::full({n}, bin, torch::kInt64);
        const auto generated = embedder.embed(generate_chunked(generator, views, latents));
        total += squared_distances(generated, source).sum().item<double>();
    }
    return total / static_cast<double>(n * kViewCount);
}

CoverageResult coverage_of(const torch::Tensor& generated, const torch::Tensor& reference)
{
    if (generated.size(0) < 1 || reference.size(0) < 1) {
        throw DomainError("coverage needs generated and reference embeddings");
    }
    const auto g = generated.to(torch::kFloat64);
    const auto r = reference.to(torch::kFloat64);
    CoverageResult out;
    out.draws = g.size(0);
    out.proxy = torch::cdist(g, r).pow(2).amin(1).mean().item<double>();
    if (g.size(0) > 1) {
        const auto pairwise = torch::cdist(g, g).pow(2);
        const double n = static_cast<double>(g.size(0));
        out.diversity = pairwise.sum().item<double>() / (n * (n - 1.0));
    }
    return out;
}

CoverageResult eval_latent_coverage(GeneratorNet& generator, const IdentityEmbedder& embedder, const LabeledCorpus& reference,
                                    int64_t n, RngStream rng)
{
    if (n < 1) {
        throw DomainError("latent coverage needs at least one draw");
    }
    require_nonempty(reference);
    auto latent_rng = rng.split("latents");
    auto view_rng = rng.split("views");
    const auto latents = sample_latents(latent_rng, n);
    std::vector<int64_t> views;
    for (int64_t k = 0; k < n; ++k) {
        views.push_back(static_cast<int64_t>(view_rng.below(kViewCount)));
    }
    const auto generated = embedder.embed(generate_chunked(generator, torch::tensor(views, torch::kInt64), latents));
    return coverage_of(generated, embedder.embed(reference.images()));
}

// ---------------------------------------------------------------------------
// Whole-model evaluation

EvalReport evaluate(Networks& nets, const LabeledCorpus& corpus, const IdentityEmbedder& embedder, std::uint64_t fingerprint,
                    const EvalOptions& options)
{
    require_nonempty(corpus);
    EvalReport report;
    report.fingerprint = fingerprint;
    report.metrics["view_accuracy"] = eval_view_accuracy(*nets.encoder, corpus);
    report.metrics["cross_recon_l1"] =
        eval_cross_reconstruction(*nets.encoder, *nets.generator, corpus, options.max_pairs, options.seed);
    report.metrics["identity_similarity"] = eval_identity_similarity(*nets.encoder, *nets.generator, embedder, corpus);
    const auto coverage =
        eval_latent_coverage(*nets.generator, embedder, corpus, options.coverage_draws, RngStream(options.seed).split("coverage"));
    report.metrics["latent_coverage"] = coverage.proxy;
    report.metrics["diversity"] = coverage.diversity;
    report.counts["samples"] = corpus.size();
    report.counts["identities"] = static_cast<int64_t>(corpus.identity_ids().size());
    report.counts["coverage_draws"] = coverage.draws;
    report.notes["identity_anchor"] = "source_input";
    report.notes["embedder_accuracy"] = format_double(embedder.train_accuracy());
    report.validate();
    return report;
}

void add_baseline_comparison(EvalReport& model, const EvalReport& baseline)
{
    std::map<std::string, double> deltas;
    for (const auto& [key, value] : model.metrics) {
        const auto it = baseline.metrics.find(key);
        if (it != baseline.metrics.end() && key.rfind("delta_", 0) != 0) {
            deltas["delta_" + key] = value - it->second;
        }
    }
    model.metrics.insert(deltas.begin(), deltas.end());
    model.notes["baseline_fingerprint"] = hex64(baseline.fingerprint);
    for (const std::string key : {"identity_similarity", "latent_coverage"}) {
        const auto m = model.metrics.find(key);
        const auto b = baseline.metrics.find(key);
        if (m == model.metrics.end() || b == baseline.metrics.end()) {
            continue;
        }
        model.notes["verdict_" + key] = m->second < b->second ? "model_better" : "baseline_better_or_equal";
    }
}

// ---------------------------------------------------------------------------
// Export

int64_t export_embeddings(const torch::Tensor& features, const LabeledCorpus& corpus, const std::filesystem::path& path)
{
    if (features.dim() != 2 || features.size(0) != corpus.size()) {
        throw DomainError("one feature row per corpus image is required");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write embeddings " + path.string());
    }
    const auto f = features.to(torch::kFloat64).contiguous();
    auto acc = f.accessor<double, 2>();
    out << "identity\tview";
    for (int64_t c = 0; c < f.size(1); ++c) {
        out << "\tf" << c;
    }
    out << '\n';
    char buf[32];
    for (int64_t r = 0; r < f.size(0); ++r) {
        out << corpus.identity(r) << '\t' << corpus.view(r);
        for (int64_t c = 0; c < f.size(1); ++c) {
            std::snprintf(buf, sizeof buf, "\t%.9g", acc[r][c]);
            out << buf;
        }
        out << '\n';
    }
    if (!out) {
        throw std::runtime_error("cannot write embeddings " + path.string());
    }
    return f.size(0);
}

int64_t export_embeddings(EncoderNet& encoder, const LabeledCorpus& corpus, const std::filesystem::path& path)
{
    return export_embeddings(encode_latents(encoder, corpus.images()), corpus, path);
}

int64_t export_embeddings(const IdentityEmbedder& embedder, const LabeledCorpus& corpus, const std::filesystem::path& path)
{
    return export_embeddings(embedder.embed(corpus.images()), corpus, path);
}

} // namespace crgan
