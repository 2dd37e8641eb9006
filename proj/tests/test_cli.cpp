#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "clozelab/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace clozelab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path dir;
    TempDir() {
        dir = fs::temp_directory_path() / ("clozelab_cli_" + std::to_string(::getpid()));
        fs::create_directories(dir);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(dir, ec);
    }
    std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int count_lines(const std::string& text) {
    int n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

} // namespace

TEST_CASE("sparse emits 2d(d-1) rows") {
    TempDir tmp;
    auto out = tmp / "sparse.csv";
    CHECK(cli::run({"sparse", "--d", "3", "--out", out}) == 0);
    CHECK(count_lines(slurp(out)) == 12);
    auto out2 = tmp / "sparse2.csv";
    CHECK(cli::run({"sparse", "--d", "2", "--out", out2}) == 0);
    CHECK(count_lines(slurp(out2)) == 4);
}

TEST_CASE("gen is byte-identical for a fixed seed and embeds its config") {
    TempDir tmp;
    auto a = tmp / "a.jsonl";
    auto b = tmp / "b.jsonl";
    std::vector<std::string> args = {"gen", "--out", a, "--size", "8", "--seed", "7"};
    CHECK(cli::run(args) == 0);
    args[2] = b;
    CHECK(cli::run(args) == 0);
    CHECK(slurp(a) == slurp(b));

    auto file = read_corpus(a);
    REQUIRE(file.meta.is_object());
    CHECK(file.meta["seed"] == 7);
    CHECK(file.meta["config"]["size"] == 8);
    CHECK(file.meta["config"]["anonymized"] == false);
}

TEST_CASE("full pipeline: gen, anon, train, eval, probe") {
    TempDir tmp;
    auto raw_train = tmp / "train.jsonl";
    auto raw_valid = tmp / "valid.jsonl";
    auto anon_train = tmp / "train_anon.jsonl";
    auto anon_valid = tmp / "valid_anon.jsonl";
    auto ckpt = tmp / "reader.ckpt";
    auto log = tmp / "epochs.csv";

    for (auto [path, seed, size] : {std::tuple{raw_train, "3", "48"}, {raw_valid, "4", "16"}})
        REQUIRE(cli::run({"gen", "--out", path, "--size", size, "--seed", seed, "--entities", "5",
                          "--predicates", "2", "--passage-len", "2", "--candidates", "3"}) == 0);
    REQUIRE(cli::run({"anon", "--in", raw_train, "--out", anon_train, "--seed", "5"}) == 0);
    REQUIRE(cli::run({"anon", "--in", raw_valid, "--out", anon_valid, "--seed", "5"}) == 0);

    // anonymization pool comes from the corpus meta
    auto anon_file = read_corpus(anon_train);
    CHECK(anon_file.meta["config"]["pool"] == 5);
    CHECK(anon_file.meta["config"]["anonymized"] == true);

    REQUIRE(cli::run({"train", "--train", anon_train, "--valid", anon_valid, "--out", ckpt,
                      "--log", log, "--reader", "stanford", "--anonymized", "--reshuffle",
                      "--epochs", "2", "--patience", "5", "--batch", "16", "--seed", "9",
                      "--embedding-dim", "4", "--hidden-dim", "5"}) == 0);

    SUBCASE("epoch log carries the config echo and the csv schema") {
        auto text = slurp(log);
        CHECK(text.rfind("# config", 0) == 0);
        CHECK(text.find("epoch,train_loss,valid_accuracy,seconds") != std::string::npos);
        CHECK(count_lines(text) == 2 + 2); // comment + header + 2 epochs
    }

    SUBCASE("eval reproduces the accuracy logged in the checkpoint") {
        auto report_path = tmp / "eval.json";
        REQUIRE(cli::run({"eval", "--ckpt", ckpt, "--corpus", anon_valid, "--out", report_path,
                          "--per-instance"}) == 0);
        auto report = json::parse(slurp(report_path));
        auto ck = load_checkpoint(ckpt);
        CHECK(report["accuracy"].get<double>() == doctest::Approx(ck.valid_accuracy));
        CHECK(report["config"]["reader"]["variant"] == "stanford");
        CHECK(report["seed"] == 9);
        CHECK(report["predictions"].size() == 16);
    }

    SUBCASE("probe emits stats, gram, heat maps, and the plot script") {
        auto dir = tmp / "probe";
        REQUIRE(cli::run({"probe", "--ckpt", ckpt, "--corpus", anon_valid, "--out", dir,
                          "--heatmaps", "2"}) == 0);
        for (const char* name : {"probe_report.json", "stats.txt", "gram.csv", "heatmap_0.csv",
                                 "heatmap_1.csv", "plot_grid.py"})
            CHECK(fs::exists(fs::path(dir) / name));
        auto report = json::parse(slurp((fs::path(dir) / "probe_report.json").string()));
        CHECK(report.contains("predication_stats"));
        CHECK(report.contains("gram"));
        CHECK(report.contains("entity_subspace"));
        CHECK(report["config"]["seed"] == 9);
        CHECK(report["predication_stats"]["cnn_dev_reference"]["in_reference_mean"] == 10.66);
    }

    SUBCASE("config mismatch is refused with a data error") {
        auto conf = tmp / "conflict.json";
        {
            std::ofstream out(conf);
            json reader_cfg = load_checkpoint(ckpt).reader_config.to_json();
            reader_cfg["hidden_dim"] = 6;
            out << json{{"reader", reader_cfg}}.dump();
        }
        CHECK(cli::run({"eval", "--ckpt", ckpt, "--corpus", anon_valid, "--config", conf}) == 2);
        CHECK(cli::run({"probe", "--ckpt", ckpt, "--corpus", anon_valid, "--out", tmp / "p2",
                        "--config", conf}) == 2);
    }

    SUBCASE("corpus anonymization mismatch is refused") {
        CHECK(cli::run({"eval", "--ckpt", ckpt, "--corpus", raw_valid}) == 2);
    }
}

TEST_CASE("config document with flag overrides") {
    TempDir tmp;
    auto conf = tmp / "conf.json";
    {
        std::ofstream out(conf);
        out << json{{"gen", {{"size", 6}, {"seed", 11}, {"entities", 5}, {"predicates", 2},
                             {"passage_len", 2}, {"candidates", 3}}}}
                   .dump();
    }
    auto a = tmp / "a.jsonl";
    REQUIRE(cli::run({"gen", "--out", a, "--config", conf}) == 0);
    CHECK(read_corpus(a).instances.size() == 6);

    // flags win over the document
    auto b = tmp / "b.jsonl";
    REQUIRE(cli::run({"gen", "--out", b, "--config", conf, "--size", "9"}) == 0);
    CHECK(read_corpus(b).instances.size() == 9);
    CHECK(read_corpus(b).meta["config"]["size"] == 9);
}

TEST_CASE("oracle sweep emits one row per sigma") {
    TempDir tmp;
    auto out = tmp / "oracle.csv";
    REQUIRE(cli::run({"oracle", "--trials", "50", "--sigmas", "0,0.3", "--out", out}) == 0);
    auto text = slurp(out);
    CHECK(text.rfind("# config", 0) == 0);
    CHECK(count_lines(text) == 1 + 1 + 2); // comment + header + 2 sigma rows
    CHECK(text.find("\n0,1,1,0,") != std::string::npos); // zero noise row is exact
}

TEST_CASE("exit codes") {
    TempDir tmp;
    SUBCASE("usage errors exit 1") {
        CHECK(cli::run({"gen", "--no-such-flag"}) == 1);
        CHECK(cli::run({"not-a-command"}) == 1);
        CHECK(cli::run({}) == 1);
    }
    SUBCASE("missing files exit 2") {
        CHECK(cli::run({"anon", "--in", tmp / "missing.jsonl", "--out", tmp / "x.jsonl"}) == 2);
        CHECK(cli::run({"eval", "--ckpt", tmp / "missing.ckpt", "--corpus", tmp / "m.jsonl"}) == 2);
    }
    SUBCASE("unsatisfiable generator config exits 2") {
        CHECK(cli::run({"gen", "--out", tmp / "x.jsonl", "--candidates", "9", "--entities", "4"}) ==
              2);
    }
    SUBCASE("bad sigmas exit 2") {
        CHECK(cli::run({"oracle", "--sigmas", "0,abc"}) == 2);
    }
    SUBCASE("nonexistent output directory exits 2") {
        CHECK(cli::run({"gen", "--out", tmp / "no_dir/x.jsonl"}) == 2);
    }
}

TEST_CASE("divergent training exits 3 through the cli") {
    TempDir tmp;
    auto tr = tmp / "t.jsonl";
    auto va = tmp / "v.jsonl";
    REQUIRE(cli::run({"gen", "--out", tr, "--size", "24", "--seed", "3", "--entities", "5",
                      "--predicates", "2", "--passage-len", "2", "--candidates", "3"}) == 0);
    REQUIRE(cli::run({"gen", "--out", va, "--size", "8", "--seed", "4", "--entities", "5",
                      "--predicates", "2", "--passage-len", "2", "--candidates", "3"}) == 0);
    CHECK(cli::run({"train", "--train", tr, "--valid", va, "--out", tmp / "x.ckpt", "--reader",
                    "attentive", "--embedding-dim", "4", "--hidden-dim", "5", "--mlp-hidden", "4",
                    "--epochs", "3", "--batch", "8", "--lr", "1e160"}) == 3);
}
