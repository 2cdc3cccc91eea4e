#include "doctest_torch.hpp"

#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "crgan/evaluation.hpp"
#include "scratch_dir.hpp"

using crgan::testing::ScratchDir;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& log)
{
    const std::string command = std::string(CRGAN_CLI) + " " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(command.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int count_files(const fs::path& dir, const std::string& extension)
{
    int n = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        n += e.path().extension() == extension ? 1 : 0;
    }
    return n;
}

} // namespace

TEST_CASE("cli: invalid input exits with code 2")
{
    ScratchDir dir("cli_err");
    const auto log = dir.path() / "log.txt";
    CHECK(run("make-data --identities 0 --out " + (dir.path() / "c").string(), log) == 2);
    CHECK(run("no-such-command", log) == 2);
    std::ofstream(dir.path() / "run.cfg") << "channels = 8\nbatch_size = 3\nrun_dir = " << (dir.path() / "run").string() << "\ncorpus = "
                                          << (dir.path() / "missing").string() << "\n";
    CHECK(run("train --config " + (dir.path() / "run.cfg").string() + " --stage self", log) == 2);
    CHECK(run("train --config " + (dir.path() / "run.cfg").string(), log) == 2);
    std::ofstream(dir.path() / "bad.cfg") << "no_such_key = 1\n";
    CHECK(run("train --config " + (dir.path() / "bad.cfg").string(), log) == 2);
}

TEST_CASE("cli: data, train, rotate, generate, eval and embed")
{
    ScratchDir dir("cli");
    const auto log = dir.path() / "log.txt";
    const auto corpus = dir.path() / "corpus";
    REQUIRE(run("make-data --identities 3 --size 32 --seed 4 --out " + corpus.string(), log) == 0);
    CHECK(count_files(corpus, ".png") == 27);
    const auto again = dir.path() / "corpus2";
    REQUIRE(run("make-data --identities 3 --size 32 --seed 4 --out " + again.string(), log) == 0);
    CHECK(slurp(corpus / "identity_0001" / "view_5.png") == slurp(again / "identity_0001" / "view_5.png"));

    const auto cfg = dir.path() / "run.cfg";
    std::ofstream(cfg) << "channels = 8\nbatch_size = 3\nmax_steps = 2\ncorpus = " << corpus.string() << "\nrun_dir = "
                       << (dir.path() / "run").string() << "\ntrain_fraction = 0.67\nstrip_label_fraction = 0.5\n";
    REQUIRE(run("train --config " + cfg.string(), log) == 0);
    CHECK(fs::exists(dir.path() / "run" / "config.txt"));
    CHECK(!fs::exists(dir.path() / "run" / ".lock"));
    const auto ckpt = dir.path() / "run" / "final";
    REQUIRE(fs::exists(ckpt / "manifest.txt"));

    // rerun into a second directory: identical manifests
    std::ofstream(dir.path() / "run2.cfg") << "channels = 8\nbatch_size = 3\nmax_steps = 2\ncorpus = " << corpus.string()
                                           << "\nrun_dir = " << (dir.path() / "run2").string() << "\ntrain_fraction = 0.67\n";
    REQUIRE(run("train --config " + (dir.path() / "run2.cfg").string(), log) == 0);
    CHECK(slurp(ckpt / "manifest.txt") == slurp(dir.path() / "run2" / "final" / "manifest.txt"));

    CHECK(run("train --config " + cfg.string() + " --stage self --resume " + ckpt.string(), log) == 0);
    CHECK(run("train --config " + cfg.string() + " --mode single_path", log) == 0);

    const auto rotated = dir.path() / "rotated";
    REQUIRE(run("rotate --ckpt " + ckpt.string() + " --input " + (corpus / "identity_0002" / "view_1.png").string() + " --out " +
                    rotated.string(),
                log) == 0);
    CHECK(count_files(rotated, ".png") == 9);
    CHECK(run("rotate --ckpt " + ckpt.string() + " --input " + (dir.path() / "nothing.png").string() + " --out " + rotated.string(), log) ==
          2);

    const auto samples = dir.path() / "samples";
    REQUIRE(run("generate --ckpt " + ckpt.string() + " --n 9 --seed 3 --out " + samples.string(), log) == 0);
    CHECK(count_files(samples, ".png") == 9);
    const auto samples2 = dir.path() / "samples2";
    REQUIRE(run("generate --ckpt " + ckpt.string() + " --n 9 --seed 3 --out " + samples2.string(), log) == 0);
    CHECK(slurp(samples / "sample_0004_view_4.png") == slurp(samples2 / "sample_0004_view_4.png"));

    const auto report = dir.path() / "report.txt";
    REQUIRE(run("eval --ckpt " + ckpt.string() + " --corpus " + corpus.string() + " --baseline " + ckpt.string() + " --draws 20 --out " +
                    report.string(),
                log) == 0);
    const auto parsed = crgan::EvalReport::load(report);
    CHECK(parsed.metrics.count("cross_recon_l1") == 1);
    CHECK(parsed.metrics.count("delta_latent_coverage") == 1);
    CHECK(run("eval --ckpt " + ckpt.string() + " --corpus " + (dir.path() / "missing").string() + " --out " + report.string(), log) == 2);

    const auto tsv = dir.path() / "embed.tsv";
    REQUIRE(run("embed --ckpt " + ckpt.string() + " --corpus " + corpus.string() + " --out " + tsv.string(), log) == 0);
    CHECK(slurp(log).find("27") != std::string::npos);
    const auto first = slurp(tsv);
    REQUIRE(run("embed --ckpt " + ckpt.string() + " --corpus " + corpus.string() + " --out " + tsv.string(), log) == 0);
    CHECK(slurp(tsv) == first);
    CHECK(std::count(first.begin(), first.end(), '\n') == 28);
}
