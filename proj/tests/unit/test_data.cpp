#include "doctest_torch.hpp"

#include <fstream>
#include <map>
#include <set>

#include "crgan/data.hpp"
#include "crgan/image_io.hpp"
#include "scratch_dir.hpp"

using namespace crgan;
using crgan::testing::ScratchDir;

TEST_CASE("make_corpus renders every identity at all nine views")
{
    const auto corpus = make_corpus(5, 32, 3);
    CHECK(corpus.size() == 45);
    CHECK(corpus.identity_ids().size() == 5);
    for (int64_t i = 0; i < corpus.size(); ++i) {
        CHECK(corpus.view(i) == i % 9);
        CHECK(corpus.identity(i) == i / 9);
    }
    CHECK(corpus.images().min().item<float>() >= -1.0f);
    CHECK(corpus.images().max().item<float>() <= 1.0f);
    // background is exactly -1
    CHECK(corpus.images()[0][0][0][0].item<float>() == -1.0f);
}

TEST_CASE("corpus generation is deterministic in its seed")
{
    const auto a = make_corpus(3, 32, 11);
    const auto b = make_corpus(3, 32, 11);
    const auto c = make_corpus(3, 32, 12);
    CHECK(torch::equal(a.images(), b.images()));
    CHECK(!torch::equal(a.images(), c.images()));
}

TEST_CASE("each bin renders at its grid angle")
{
    const auto spec = make_identity_spec(5, 2);
    const auto corpus = make_corpus(3, 32, 5);
    for (int b = 0; b < kViewCount; ++b) {
        const auto direct = render_view(spec, -60.0 + 15.0 * b, 32);
        CHECK(torch::equal(direct.tensor(), corpus.images()[2 * 9 + b]));
    }
}

TEST_CASE("the asymmetry marker breaks left-right mirror symmetry")
{
    for (int id = 0; id < 10; ++id) {
        auto spec = make_identity_spec(21, id);
        const auto frontal = render_view(spec, 0.0, 32).tensor();
        CHECK((frontal - frontal.flip({2})).abs().max().item<float>() > 0.1f);
        // +yaw of one identity is not the mirror of -yaw of itself
        const auto left = render_view(spec, -45.0, 32).tensor();
        const auto right = render_view(spec, 45.0, 32).tensor();
        CHECK((left - right.flip({2})).abs().max().item<float>() > 0.1f);
        spec.marker = false;
        CHECK(!torch::equal(render_view(spec, 0.0, 32).tensor(), frontal));
    }
}

TEST_CASE("identity pairs share identity and differ in view")
{
    const auto corpus = make_corpus(4, 32, 1);
    RngStream rng(2);
    for (int t = 0; t < 100; ++t) {
        const auto [a, b] = sample_identity_pair(corpus, t % 4, rng);
        CHECK(a.identity == b.identity);
        CHECK(a.view.index() != b.view.index());
    }
    CHECK_THROWS_AS(sample_identity_pair(corpus, 17, rng), DomainError);
}

TEST_CASE("unordered view pairs are uniform over 1e4 draws")
{
    const auto corpus = make_corpus(1, 32, 1);
    RngStream rng(77);
    std::map<std::pair<int, int>, int> counts;
    const int draws = 10000;
    for (int t = 0; t < draws; ++t) {
        const auto [i, j] = sample_identity_pair_indices(corpus, 0, rng);
        const int a = corpus.view(i);
        const int b = corpus.view(j);
        counts[{std::min(a, b), std::max(a, b)}]++;
    }
    CHECK(counts.size() == 36);
    for (const auto& [pair, n] : counts) {
        CHECK(std::abs(static_cast<double>(n) / draws - 1.0 / 36.0) <= 0.01);
    }
}

TEST_CASE("single-view identities cannot be paired")
{
    const auto corpus = make_corpus(2, 32, 1);
    const auto single = corpus.subset({0, 9, 10});
    RngStream rng(1);
    CHECK_THROWS_AS(sample_identity_pair(single, 0, rng), DomainError);
    CHECK_NOTHROW(sample_identity_pair(single, 1, rng));
}

TEST_CASE("split_corpus is identity-disjoint with the requested share")
{
    const auto corpus = make_corpus(250, 32, 2024);
    const auto [train, held] = split_corpus(corpus, 0.8, 11);
    const auto a = train.identity_ids();
    const auto b = held.identity_ids();
    CHECK(a.size() == 200);
    CHECK(b.size() == 50);
    std::set<int> both(a.begin(), a.end());
    for (int id : b) {
        CHECK(both.count(id) == 0);
    }
    const auto again = split_corpus(corpus, 0.8, 11);
    CHECK(again.first.identity_ids() == a);
    CHECK_THROWS_AS(split_corpus(corpus, 1.0, 1), ConfigError);
    CHECK_THROWS_AS(split_corpus(corpus, 0.0, 1), ConfigError);
}

TEST_CASE("strip_labels withholds whole identities")
{
    const auto corpus = make_corpus(10, 32, 3);
    const auto [labeled, unlabeled] = strip_labels(corpus, 0.3, 5);
    CHECK(labeled.identity_ids().size() == 7);
    CHECK(unlabeled.size() == 27);
    CHECK(labeled.size() + unlabeled.size() == corpus.size());
}

TEST_CASE("pair sampler batches are reproducible and never repeat a view")
{
    const auto corpus = make_corpus(6, 32, 4);
    PairSampler a(corpus, 4, RngStream(9));
    PairSampler b(corpus, 4, RngStream(9));
    CHECK(a.steps_per_epoch() == 13);
    for (int64_t e = 0; e < 2; ++e) {
        for (int64_t k = 0; k < a.steps_per_epoch(); ++k) {
            const auto x = a.batch(e, k);
            const auto y = b.batch(e, k);
            CHECK(torch::equal(x.x_i, y.x_i));
            CHECK(torch::equal(x.v_j, y.v_j));
            CHECK(x.identity_i == x.identity_j);
            CHECK(!x.v_i.eq(x.v_j).any().item<bool>());
        }
    }
    // batches can be regenerated out of order
    PairSampler c(corpus, 4, RngStream(9));
    CHECK(torch::equal(c.batch(1, 3).x_j, a.batch(1, 3).x_j));
}

TEST_CASE("PNG round trip preserves 8-bit values")
{
    ScratchDir dir("png");
    CHECK(to_byte(-1.0f) == 0);
    CHECK(to_byte(1.0f) == 255);
    CHECK(to_byte(0.0f) == 128);
    const auto corpus = make_corpus(1, 32, 8);
    const Image img(corpus.images()[3]);
    write_png(dir.path() / "a.png", img);
    const auto back = read_png(dir.path() / "a.png");
    CHECK((back - img.tensor()).abs().max().item<float>() <= 1.0f / 255.0f + 1e-6f);
    CHECK_THROWS(read_png(dir.path() / "missing.png"));
}

TEST_CASE("saved corpora load back with labels")
{
    ScratchDir dir("corpus");
    const auto corpus = make_corpus(3, 32, 6);
    save_corpus(corpus, dir.path(), 6);
    CHECK(std::filesystem::exists(dir.path() / "manifest.json"));
    const auto back = load_corpus(dir.path());
    CHECK(back.size() == 27);
    CHECK(back.views() == corpus.views());
    CHECK(back.identities() == corpus.identities());
    CHECK((back.images() - corpus.images()).abs().max().item<float>() <= 1.0f / 255.0f + 1e-6f);
}

TEST_CASE("load_folder with and without labels")
{
    ScratchDir dir("folder");
    const auto corpus = make_corpus(2, 32, 9);
    for (int64_t i = 0; i < 4; ++i) {
        write_png(dir.path() / ("img" + std::to_string(i) + ".png"), Image(corpus.images()[i]));
    }
    std::ofstream(dir.path() / "broken.png") << "not a png";
    {
        std::ofstream labels(dir.path() / "labels.tsv");
        labels << "img0.png\t3\t-60\nimg1.png\t3\t-44\nimg2.png\t4\t37\nimg3.png\t4\t60\nbroken.png\t1\t0\n";
    }
    const auto labeled = std::get<LabeledCorpus>(load_folder(dir.path(), dir.path() / "labels.tsv", 32));
    CHECK(labeled.size() == 4);
    CHECK(labeled.views() == std::vector<int>{0, 1, 6, 8});
    CHECK(labeled.identities() == std::vector<int>{3, 3, 4, 4});
    const auto unlabeled = std::get<UnlabeledCorpus>(load_folder(dir.path(), std::nullopt, 32));
    CHECK(unlabeled.size() == 4);
    ScratchDir empty("empty");
    CHECK_THROWS_AS(load_folder(empty.path(), std::nullopt, 32), ConfigError);
}

TEST_CASE("fit_image passes exact-size input through and crops larger input")
{
    const auto exact = torch::rand({3, 32, 32}) * 2 - 1;
    CHECK(torch::equal(fit_image(exact, 32), exact));
    const auto wide = torch::rand({3, 64, 96}) * 2 - 1;
    const auto fitted = fit_image(wide, 32);
    CHECK(fitted.size(1) == 32);
    CHECK(fitted.size(2) == 32);
    CHECK_THROWS_AS(fit_image(torch::zeros({3, 16, 16}), 32), DomainError);
}
