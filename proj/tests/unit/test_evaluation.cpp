#include "doctest_torch.hpp"

#include <fstream>
#include <sstream>

#include "crgan/evaluation.hpp"
#include "scratch_dir.hpp"

using namespace crgan;
using crgan::testing::ScratchDir;

namespace {

const LabeledCorpus& small_corpus()
{
    static const LabeledCorpus corpus = make_corpus(6, 32, 31);
    return corpus;
}

const IdentityEmbedder& small_embedder()
{
    static const IdentityEmbedder embedder = train_identity_embedder(small_corpus(), 4);
    return embedder;
}

/// Encodes a corpus image as its row index in the first latent component.
class LookupEncoder : public EncoderNet {
public:
    explicit LookupEncoder(const LabeledCorpus& corpus) : EncoderNet(corpus.image_size()), corpus_(corpus) {}

    EncoderOutput forward(const torch::Tensor& images) override
    {
        auto latent = torch::zeros({images.size(0), kLatentDim});
        auto logits = torch::zeros({images.size(0), kViewCount});
        for (int64_t b = 0; b < images.size(0); ++b) {
            const auto diff = (corpus_.images() - images[b]).abs().flatten(1).amax(1);
            const int64_t row = diff.argmin().item<int64_t>();
            latent[b][0] = static_cast<float>(row) / 1000.0f;
            logits[b][corpus_.view(row)] = 1.0f;
        }
        return {logits, latent};
    }

private:
    const LabeledCorpus& corpus_;
};

/// Decodes the row index and returns the corpus image of that identity at the
/// requested view, or the source image itself when `echo` is set.
class LookupGenerator : public GeneratorNet {
public:
    LookupGenerator(const LabeledCorpus& corpus, bool echo) : GeneratorNet(corpus.image_size()), corpus_(corpus), echo_(echo) {}

    torch::Tensor forward(const torch::Tensor& views, const torch::Tensor& latents) override
    {
        std::vector<torch::Tensor> out;
        for (int64_t b = 0; b < latents.size(0); ++b) {
            // random latents (coverage draws) decode to an arbitrary valid row
            const auto row = std::clamp<int64_t>(std::lround(latents[b][0].item<float>() * 1000.0f), 0, corpus_.size() - 1);
            if (echo_) {
                out.push_back(corpus_.images()[row]);
                continue;
            }
            const int view = static_cast<int>(views[b].argmax().item<int64_t>());
            const int64_t target = corpus_.identity(row) * kViewCount + view;
            out.push_back(corpus_.images()[target]);
        }
        return torch::stack(out);
    }

private:
    const LabeledCorpus& corpus_;
    bool echo_;
};

class ConstantGenerator : public GeneratorNet {
public:
    ConstantGenerator(int size, float value) : GeneratorNet(size), value_(value) {}
    torch::Tensor forward(const torch::Tensor& views, const torch::Tensor&) override
    {
        return torch::full({views.size(0), kImageChannels, image_size(), image_size()}, value_);
    }

private:
    float value_;
};

std::string read_file(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

} // namespace

TEST_CASE("view accuracy of oracle, constant and random predictors")
{
    std::vector<int> labels;
    for (int i = 0; i < 10008; ++i) {
        labels.push_back(i % 9);
    }
    const auto idx = torch::tensor(std::vector<int64_t>(labels.begin(), labels.end()));
    CHECK(view_accuracy(torch::one_hot(idx, 9).to(torch::kFloat32), labels) == 1.0);
    CHECK(view_accuracy(torch::zeros({10008, 9}), labels) == doctest::Approx(1.0 / 9.0));
    auto rng = RngStream(3);
    auto logits = torch::empty({10008, 9}, torch::kFloat64);
    auto* p = logits.data_ptr<double>();
    for (int64_t i = 0; i < logits.numel(); ++i) {
        p[i] = rng.normal();
    }
    CHECK(std::abs(view_accuracy(logits, labels) - 1.0 / 9.0) <= 0.02);
    CHECK_THROWS(view_accuracy(torch::zeros({0, 9}), {}));
}

TEST_CASE("eval_view_accuracy of a lookup encoder is perfect")
{
    LookupEncoder E(small_corpus());
    CHECK(eval_view_accuracy(E, small_corpus()) == 1.0);
    CHECK_THROWS(eval_view_accuracy(E, LabeledCorpus{}));
}

TEST_CASE("cross reconstruction of an exact inverse pair is zero")
{
    LookupEncoder E(small_corpus());
    LookupGenerator G(small_corpus(), false);
    CHECK(eval_cross_reconstruction(E, G, small_corpus()) == doctest::Approx(0.0));
}

TEST_CASE("constant-black generator error equals the corpus mean distance to black")
{
    LookupEncoder E(small_corpus());
    ConstantGenerator black(32, -1.0f);
    // every image is the target of exactly eight ordered pairs
    const double expected = (small_corpus().images().to(torch::kFloat64) + 1.0).abs().mean().item<double>();
    const double measured = eval_cross_reconstruction(E, black, small_corpus());
    CHECK(measured == doctest::Approx(expected).epsilon(1e-9));
    CHECK(measured >= 0.0);
    const double sampled = eval_cross_reconstruction(E, black, small_corpus(), 50, 3);
    CHECK(sampled == eval_cross_reconstruction(E, black, small_corpus(), 50, 3));
    CHECK(sampled >= 0.0);
}

TEST_CASE("embedder features are unit norm and separate identities")
{
    const auto& embedder = small_embedder();
    CHECK(embedder.train_accuracy() >= 0.95);
    const auto f = embedder.embed(small_corpus().images());
    CHECK(f.size(1) == 64);
    CHECK((f.norm(2, 1) - 1.0).abs().max().item<float>() <= 1e-5f);

    const auto d = squared_distances(f.unsqueeze(1).expand({-1, f.size(0), -1}).reshape({-1, f.size(1)}),
                                     f.unsqueeze(0).expand({f.size(0), -1, -1}).reshape({-1, f.size(1)}))
                       .view({f.size(0), f.size(0)});
    double same = 0.0;
    double other = 0.0;
    int64_t n_same = 0;
    int64_t n_other = 0;
    for (int64_t i = 0; i < f.size(0); ++i) {
        for (int64_t j = 0; j < f.size(0); ++j) {
            if (i == j) {
                continue;
            }
            const double v = d[i][j].item<double>();
            if (small_corpus().identity(i) == small_corpus().identity(j)) {
                same += v;
                ++n_same;
            } else {
                other += v;
                ++n_other;
            }
        }
    }
    CHECK(same / n_same < other / n_other);
}

TEST_CASE("embedder training is deterministic in its seed")
{
    const auto again = train_identity_embedder(small_corpus(), 4);
    CHECK(again.parameter_hash() == small_embedder().parameter_hash());
}

TEST_CASE("identity similarity of a generator echoing the source is zero")
{
    LookupEncoder E(small_corpus());
    LookupGenerator echo(small_corpus(), true);
    CHECK(eval_identity_similarity(E, echo, small_embedder(), small_corpus()) == doctest::Approx(0.0).epsilon(1e-6));
    LookupGenerator rotate(small_corpus(), false);
    const double d = eval_identity_similarity(E, rotate, small_embedder(), small_corpus());
    CHECK(d >= 0.0);
    CHECK(d <= 4.0);
}

TEST_CASE("coverage of a memorizing generator")
{
    const auto& embedder = small_embedder();
    const auto reference = embedder.embed(small_corpus().images());
    const auto one = reference[5].unsqueeze(0).expand({20, -1});
    const auto r = coverage_of(one, reference);
    CHECK(r.proxy == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(r.diversity == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(r.draws == 20);

    ConstantGenerator flat(32, 0.0f);
    const auto a = eval_latent_coverage(flat, embedder, small_corpus(), 10, RngStream(1));
    const auto b = eval_latent_coverage(flat, embedder, small_corpus(), 10, RngStream(1));
    CHECK(a.proxy == b.proxy);
    CHECK(a.diversity == doctest::Approx(0.0).epsilon(1e-9));
    CHECK_THROWS(eval_latent_coverage(flat, embedder, small_corpus(), 0, RngStream(1)));
}

TEST_CASE("evaluate produces every metric and a baseline comparison")
{
    Networks nets;
    nets.encoder = std::make_shared<LookupEncoder>(small_corpus());
    nets.generator = std::make_shared<LookupGenerator>(small_corpus(), false);
    EvalOptions options;
    options.coverage_draws = 20;
    auto report = evaluate(nets, small_corpus(), small_embedder(), 77, options);
    for (const char* key : {"view_accuracy", "cross_recon_l1", "identity_similarity", "latent_coverage", "diversity"}) {
        CHECK(report.metrics.count(key) == 1);
    }
    CHECK(report.notes.at("identity_anchor") == "source_input");
    CHECK(report.counts.at("samples") == small_corpus().size());
    CHECK_NOTHROW(report.validate());

    Networks flat = nets;
    flat.generator = std::make_shared<ConstantGenerator>(32, 0.0f);
    const auto baseline = evaluate(flat, small_corpus(), small_embedder(), 78, options);
    add_baseline_comparison(report, baseline);
    CHECK(report.metrics.at("delta_identity_similarity") ==
          doctest::Approx(report.metrics.at("identity_similarity") - baseline.metrics.at("identity_similarity")));
    CHECK(report.notes.at("verdict_identity_similarity") == "model_better");
}

TEST_CASE("eval reports round-trip and validate")
{
    ScratchDir dir("report");
    EvalReport r;
    r.fingerprint = 0xabcdefULL;
    r.metrics["view_accuracy"] = 0.123456789012345678;
    r.counts["samples"] = 9;
    r.notes["identity_anchor"] = "source_input";
    r.save(dir.path() / "r.txt");
    const auto back = EvalReport::load(dir.path() / "r.txt");
    CHECK(back.metrics == r.metrics);
    CHECK(back.counts == r.counts);
    CHECK(back.notes == r.notes);
    CHECK(back.fingerprint == r.fingerprint);
    r.metrics["bad"] = std::nan("");
    CHECK_THROWS_AS(r.validate(), NumericalError);
    r.metrics.erase("bad");
    r.counts["empty"] = 0;
    CHECK_THROWS_AS(r.validate(), ContractError);
}

TEST_CASE("embedding export has one row per image and is reproducible")
{
    ScratchDir dir("export");
    const auto rows = export_embeddings(small_embedder(), small_corpus(), dir.path() / "a.tsv");
    export_embeddings(small_embedder(), small_corpus(), dir.path() / "b.tsv");
    CHECK(rows == small_corpus().size());
    CHECK(read_file(dir.path() / "a.tsv") == read_file(dir.path() / "b.tsv"));
    std::ifstream in(dir.path() / "a.tsv");
    std::string header;
    std::getline(in, header);
    CHECK(header.starts_with("identity\tview\tf0"));
    int64_t lines = 0;
    for (std::string line; std::getline(in, line); ++lines) {
        CHECK(std::count(line.begin(), line.end(), '\t') + 1 == 2 + 64);
    }
    CHECK(lines == rows);
}
