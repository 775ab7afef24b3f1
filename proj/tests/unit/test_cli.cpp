#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "focusdpo/cli.hpp"
#include "focusdpo/rng.hpp"

using namespace focusdpo;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("focusdpo_cli_" + name);
    fs::remove_all(p);
    return p;
}

struct Outcome {
    int code;
    std::string out, err;
};

Outcome run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
    return out;
}

const std::vector<std::string> kSmallData{"--set", "dip.single_pairs=6", "--set", "dip.multi_pairs=6"};

fs::path small_dataset() {
    static const fs::path dir = [] {
        const fs::path d = scratch("dataset");
        std::vector<std::string> args{"dip-gen", "--seed", "7", "--output-dir", d.string()};
        args.insert(args.end(), kSmallData.begin(), kSmallData.end());
        REQUIRE(run(args).code == 0);
        return d;
    }();
    return dir;
}

}  // namespace

TEST_CASE("pgm output") {
    const fs::path p = scratch("mask.pgm");
    cli::emit_pgm(WeightMask(2, 3, 1.0), p);
    CHECK(slurp(p) == "P5\n3 2\n255\n" + std::string(6, '\xff'));
    cli::emit_pgm(WeightMask(2, 3, 0.0), p);
    CHECK(slurp(p) == "P5\n3 2\n255\n" + std::string(6, '\0'));

    Rng rng(1);
    WeightMask m(8, 8);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform();
    cli::emit_pgm(m, p);
    const Tensor back = cli::read_pgm(p);
    REQUIRE(back.dims() == Dims{8, 8});
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(std::abs(back[i] - m[i]) <= 0.5 / 255.0 + 1e-12);

    m[3] = 1.5;
    CHECK_THROWS_AS(cli::emit_pgm(m, p), RangeError);
    CHECK_THROWS_AS(cli::emit_pgm(WeightMask(1, 1, 1.0), scratch("nodir") / "x" / "m.pgm"), IoError);
    fs::remove(p);
}

TEST_CASE("config overrides") {
    auto cfg = cli::default_config();
    cli::apply_override(cfg, "train.steps=42");
    CHECK(cfg["train"]["steps"] == 42);
    cli::apply_override(cfg, "mask.variant=no_Ms");
    CHECK(cfg["mask"]["variant"] == "no_Ms");
    cli::apply_override(cfg, "mask.tau=1");
    CHECK(cfg["mask"]["tau"] == 1.0);
    CHECK_THROWS_AS(cli::apply_override(cfg, "train.bogus=1"), ConfigError);
    CHECK_THROWS_AS(cli::apply_override(cfg, "train.steps=1.5"), ConfigError);
    CHECK_THROWS_AS(cli::apply_override(cfg, "train.steps"), ConfigError);
    CHECK_THROWS_AS(cli::merge_config(cfg, {{"nosuch", {{"a", 1}}}}, "test"), ConfigError);
    CHECK(cli::exit_code_for(ErrorKind::data) == 4);
    CHECK(cli::exit_code_for(ErrorKind::numeric) == 5);
}

TEST_CASE("usage and error exit codes") {
    CHECK(run({}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    const auto help = run({"train", "--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("--output-dir") != std::string::npos);
    CHECK(run({"train"}).code == 2);

    const fs::path out = scratch("errors");
    const auto missing = run({"train", "--dataset", "/nonexistent/data", "--output-dir", out.string()});
    CHECK(missing.code == 4);
    CHECK(missing.err.find("/nonexistent/data") != std::string::npos);
    CHECK(run({"train", "--set", "train.nosuch=1", "--output-dir", out.string()}).code == 3);
    CHECK(run({"train", "--lr", "-1", "--dataset", small_dataset().string(), "--output-dir", out.string()}).code == 3);
    CHECK(run({"train", "--dataset", small_dataset().string(), "--output-dir", (small_dataset() / "out").string()})
              .code == 3);
    fs::remove_all(out);
}

TEST_CASE("dip-gen is byte-reproducible") {
    const fs::path again = scratch("dataset_again");
    std::vector<std::string> args{"dip-gen", "--seed", "7", "--output-dir", again.string()};
    args.insert(args.end(), kSmallData.begin(), kSmallData.end());
    const auto r = run(args);
    CHECK(r.code == 0);
    CHECK(r.out.find("fingerprint") != std::string::npos);
    CHECK(tree_bytes(small_dataset()) == tree_bytes(again));
    fs::remove_all(again);
}

TEST_CASE("train writes outputs and reruns from its resolved config") {
    const auto before = tree_bytes(small_dataset());
    const fs::path a = scratch("train_a"), b = scratch("train_b");
    const auto r = run({"train", "--dataset", small_dataset().string(), "--output-dir", a.string(), "--steps", "4",
                        "--set", "train.eval_every=2", "--set", "train.eval_draws=1"});
    REQUIRE(r.code == 0);
    for (const char* f : {"config.resolved", "metrics.jsonl", "model.fdt", "reference.fdt", "checkpoints/step_00002.fdt"})
        CHECK(fs::exists(a / f));
    CHECK(r.out.find("\"phase\":\"train\"") != std::string::npos);

    CHECK(run({"train", "--config", (a / "config.resolved").string(), "--output-dir", b.string()}).code == 0);
    CHECK(slurp(a / "model.fdt") == slurp(b / "model.fdt"));
    CHECK(tree_bytes(small_dataset()) == before);

    const fs::path e = scratch("eval");
    const auto ev = run({"eval", "--dataset", small_dataset().string(), "--checkpoint", (a / "model.fdt").string(),
                         "--reference", (a / "reference.fdt").string(), "--output-dir", e.string(), "--set", "eval.split=all"});
    CHECK(ev.code == 0);
    CHECK(ev.out.find("mean_margin") != std::string::npos);

    const fs::path m = scratch("masks");
    CHECK(run({"masks", "--dataset", small_dataset().string(), "--output-dir", m.string(), "--set", "masks.pairs=2"})
              .code == 0);
    CHECK(fs::exists(m / "pair_00000_fused.pgm"));
    CHECK(cli::read_pgm(m / "pair_00000_prior.pgm").dims() == Dims{8, 8});
    for (const auto& p : {a, b, e, m}) fs::remove_all(p);
}

TEST_CASE("installed binary maps errors to exit codes") {
    const char* bin = std::getenv("FOCUSDPO_CLI");
    if (!bin) SKIP("FOCUSDPO_CLI not set");
    const std::string quiet = " >/dev/null 2>&1";
    auto status = [&](const std::string& args) {
        const int s = std::system((std::string(bin) + " " + args + quiet).c_str());
        return WEXITSTATUS(s);
    };
    CHECK(status("--help") == 0);
    CHECK(status("") == 2);
    CHECK(status("train --dataset /nonexistent --output-dir " + scratch("bin").string()) == 4);
    fs::remove_all(scratch("bin"));
}
