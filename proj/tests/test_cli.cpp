#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include "poisondet/coco.hpp"
#include "poisondet/digest.hpp"
#include "poisondet/synth.hpp"
#include "test_helpers.hpp"

using namespace poisondet;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    std::string cmd = std::string(CLI_BINARY) + " " + args + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
    CHECK(run_cli("") == 1);
    CHECK(run_cli("frobnicate") == 1);
    CHECK(run_cli("poison") == 1);  // missing required flags
}

TEST_CASE("eval: perfect results give a table of ones, errors are classified") {
    TempDir tmp("cli_eval");
    DetectionDataset ds = minimal_dataset();
    save_dataset(ds, tmp.path / "gt.json");
    std::vector<DetectionResult> dets;
    for (const auto& a : ds.annotations) dets.push_back({a.image_id, a.category_id, a.bbox, 1.0});
    save_detections(dets, tmp.path / "res.json");

    CHECK(run_cli("eval --annotations " + (tmp.path / "gt.json").string() + " --results " +
                  (tmp.path / "res.json").string() + " --out " + (tmp.path / "out").string()) ==
          0);
    std::ifstream report(tmp.path / "out" / "report.json");
    std::string text((std::istreambuf_iterator<char>(report)),
                     std::istreambuf_iterator<char>());
    CHECK(text.find("\"mAP\": 1") != std::string::npos);
    CHECK(fs::exists(tmp.path / "out" / "run.json"));

    // missing results file: runtime error (3), distinct from a parse failure (2)
    CHECK(run_cli("eval --annotations " + (tmp.path / "gt.json").string() + " --results " +
                  (tmp.path / "missing.json").string()) == 3);
    {
        std::ofstream bad(tmp.path / "bad.json");
        bad << "{not json";
    }
    CHECK(run_cli("eval --annotations " + (tmp.path / "gt.json").string() + " --results " +
                  (tmp.path / "bad.json").string()) == 2);
}

TEST_CASE("poison: rate 0 copies, reruns are digest-identical") {
    TempDir tmp("cli_poison");
    SynthConfig synth;
    synth.num_images = 6;
    synth.seed = 99;
    DetectionDataset ds = generate_synthetic(synth, tmp.path / "src");

    std::string base = "poison --annotations " + (tmp.path / "src" / "annotations.json").string() +
                       " --images " + (tmp.path / "src" / "images").string();

    CHECK(run_cli(base + " --rate 0 --out " + (tmp.path / "zero").string()) == 0);
    CHECK(load_dataset(tmp.path / "zero" / "annotations.json") == ds);

    CHECK(run_cli(base + " --rate 0.5 --seed 4 --out " + (tmp.path / "a").string()) == 0);
    CHECK(run_cli(base + " --rate 0.5 --seed 4 --out " + (tmp.path / "b").string()) == 0);
    // same flags, same bytes (run.json records the out path, so hash the data)
    auto tree_without_run = [](const fs::path& p) {
        fs::remove(p / "run.json");
        return sha256_tree(p);
    };
    CHECK(tree_without_run(tmp.path / "a") == tree_without_run(tmp.path / "b"));

    // bad rate -> validation exit
    CHECK(run_cli(base + " --rate 1.5 --out " + (tmp.path / "c").string()) == 2);
}

TEST_CASE("poison --full-test stamps every annotation") {
    TempDir tmp("cli_full");
    SynthConfig synth;
    synth.num_images = 4;
    synth.seed = 7;
    DetectionDataset ds = generate_synthetic(synth, tmp.path / "src");
    CHECK(run_cli("poison --annotations " + (tmp.path / "src" / "annotations.json").string() +
                  " --images " + (tmp.path / "src" / "images").string() + " --full-test --out " +
                  (tmp.path / "full").string()) == 0);
    CHECK(load_dataset(tmp.path / "full" / "annotations.json") == ds);
    CHECK(fs::exists(tmp.path / "full" / "run.json"));
}

TEST_CASE("study: tiny end-to-end run emits the combined report") {
    TempDir tmp("cli_study");
    CHECK(run_cli("study --train-images 60 --test-images 20 --rate 0.2 --epochs 4 --seed 2 "
                  "--sweep-rates 0.2,0.5 --out " +
                  (tmp.path / "study").string()) == 0);
    for (const char* f : {"report.json", "tables.txt", "sweep.csv", "run.json"})
        CHECK(fs::exists(tmp.path / "study" / f));
}
