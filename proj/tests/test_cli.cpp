#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>

#include "json.hpp"

#include <blockvol/evaluate.hpp>
#include <blockvol/targets.hpp>

#include "helpers.hpp"

using namespace blockvol;
using testutil::TempDir;
using nlohmann::json;

namespace {

std::string cli_path() {
    const char* env = std::getenv("BLOCKVOL_CLI");
    REQUIRE_MESSAGE(env != nullptr, "BLOCKVOL_CLI must point at the CLI binary");
    return env;
}

struct CliResult {
    int exit_code;
    std::string out;
    std::string err;
};

CliResult run_cli(const TempDir& tmp, const std::string& args) {
    auto out_path = tmp.path() / "cli.out";
    auto err_path = tmp.path() / "cli.err";
    std::string cmd = cli_path() + " " + args + " >" + out_path.string() + " 2>" + err_path.string();
    int status = std::system(cmd.c_str());
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p);
        return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
    };
    return {WEXITSTATUS(status), slurp(out_path), slurp(err_path)};
}

VolumeHandle write_labels(const TempDir& tmp, const Tensor& labels) {
    ArrayMetadata m;
    m.shape = labels.shape();
    m.chunk_shape = {8, 8};
    m.dtype = Dtype::u64;
    auto vol = create_dataset(tmp.path(), "gt", m, VolumeAttributes::defaults(2));
    write_roi(vol, vol.bounds(), labels);
    return vol;
}

} // namespace

TEST_CASE("info prints the dataset summary (golden)") {
    TempDir tmp("cli_info");
    ArrayMetadata m;
    m.shape = {16, 16, 16};
    m.chunk_shape = {8, 8, 8};
    m.dtype = Dtype::u8;
    m.fill_value = Scalar(std::uint64_t{0});
    m.compressor = {Compressor::gzip, 5};
    auto vol = create_dataset(tmp.path(), "raw", m, {{8.0, 8.0, 8.0}, {0.0, 0.0, 0.0}, {}});
    write_roi(vol, Roi({0, 0, 0}, {8, 8, 8}),
              Tensor::filled({8, 8, 8}, Dtype::u8, Scalar(std::uint64_t{1})));

    auto result = run_cli(tmp, "info " + tmp.path().string() + " raw");
    CHECK(result.exit_code == 0);
    std::string expected = "path:           " + tmp.path().string() + "\n" +
                           "dataset:        raw\n"
                           "shape:          [16,16,16]\n"
                           "chunks:         [8,8,8]\n"
                           "dtype:          u8\n"
                           "compressor:     gzip(level=5)\n"
                           "fill_value:     0\n"
                           "voxel_size:     [8.0,8.0,8.0]\n"
                           "offset:         [0.0,0.0,0.0]\n"
                           "chunks present: 1 / 8\n";
    CHECK(result.out == expected);
}

TEST_CASE("info exit codes: missing dataset and unsupported features") {
    TempDir tmp("cli_info_err");
    auto missing = run_cli(tmp, "info " + tmp.path().string() + " nope");
    CHECK(missing.exit_code == 2);
    CHECK(missing.err.find("nope") != std::string::npos);

    auto dir = tmp.path() / "weird";
    std::filesystem::create_directories(dir);
    std::ofstream(dir / ".zarray") << R"({"zarr_format":2,"shape":[4],"chunks":[2],"dtype":"|u1",
        "compressor":{"id":"blosc"},"fill_value":0,"order":"C","filters":null})";
    auto unsupported = run_cli(tmp, "info " + tmp.path().string() + " weird");
    CHECK(unsupported.exit_code == 2);
    CHECK(unsupported.err.find("unsupported feature") != std::string::npos);
}

TEST_CASE("cli target output is byte-identical to the direct library call") {
    TempDir tmp("cli_target");
    std::mt19937 rng(5);
    Tensor labels = testutil::random_labels(rng, {16, 16}, 2);
    write_labels(tmp, labels);

    json config{{"input", {{"path", "."}, {"dataset", "gt"}}},
                {"output", {{"path", "."}, {"dataset", "aff"}}},
                {"task",
                 {{"kind", "affinities"}, {"neighborhood", {{1, 0}, {0, 1}}}}},
                {"blocks", {{"write_shape", {8, 8}}}}};
    std::ofstream(tmp.path() / "target.json") << config.dump(2);

    auto result = run_cli(tmp, "target --config " + (tmp.path() / "target.json").string());
    CHECK(result.exit_code == 0);

    auto out = open_dataset(tmp.path(), "aff");
    Tensor got = read_roi(out, out.bounds());
    Tensor expected = affinities(labels, Neighborhood::of({{1, 0}, {0, 1}}));
    CHECK(got.shape() == expected.shape());
    CHECK(std::memcmp(got.data(), expected.data(), expected.byte_size()) == 0);

    // Paths in the record are absolute and the config snapshot rides along.
    json record = json::parse(std::ifstream(tmp.path() / "target.record.json"));
    CHECK(record["config"]["task"]["kind"] == "affinities");
    CHECK(record["tool"] == "blockvol");
}

TEST_CASE("worker count does not change outputs") {
    TempDir tmp("cli_workers");
    std::mt19937 rng(7);
    Tensor labels = testutil::random_labels(rng, {16, 16}, 1);
    write_labels(tmp, labels);

    auto run_with = [&](const std::string& name, int workers) {
        json config{{"input", {{"path", "."}, {"dataset", "gt"}}},
                    {"output", {{"path", "."}, {"dataset", name}}},
                    {"task", {{"kind", "signed_distance"}, {"scale", 2.0}}},
                    {"blocks", {{"write_shape", {8, 8}}, {"context", {16, 16}}}}};
        auto path = tmp.path() / (name + ".json");
        std::ofstream(path) << config.dump();
        auto result =
            run_cli(tmp, "target --config " + path.string() + " --workers " + std::to_string(workers));
        REQUIRE(result.exit_code == 0);
        auto vol = open_dataset(tmp.path(), name);
        return read_roi(vol, vol.bounds());
    };
    Tensor one = run_with("sd1", 1);
    Tensor four = run_with("sd4", 4);
    CHECK(std::memcmp(one.data(), four.data(), one.byte_size()) == 0);
}

TEST_CASE("journal flag makes reruns skip completed blocks") {
    TempDir tmp("cli_journal");
    std::mt19937 rng(9);
    write_labels(tmp, testutil::random_labels(rng, {16, 16}, 1));

    json config{{"input", {{"path", "."}, {"dataset", "gt"}}},
                {"output", {{"path", "."}, {"dataset", "hot"}}},
                {"task", {{"kind", "one_hot"}, {"class_ids", {1}}}},
                {"blocks", {{"write_shape", {8, 8}}}}};
    std::ofstream(tmp.path() / "t.json") << config.dump();

    std::string base = "target --config " + (tmp.path() / "t.json").string() + " --journal " +
                       (tmp.path() / "t.journal").string();
    auto first = run_cli(tmp, base);
    CHECK(first.exit_code == 0);
    CHECK(first.out.find("4 blocks, 4 ok, 0 skipped") != std::string::npos);
    auto second = run_cli(tmp, base);
    CHECK(second.exit_code == 0);
    CHECK(second.out.find("4 blocks, 0 ok, 4 skipped") != std::string::npos);
}

TEST_CASE("config errors exit 2 and name the problem") {
    TempDir tmp("cli_badcfg");
    std::ofstream(tmp.path() / "bad.json") << R"({"task": {"kind": "wavelets"}})";
    auto result = run_cli(tmp, "target --config " + (tmp.path() / "bad.json").string());
    CHECK(result.exit_code == 2);
    CHECK(result.err.find("error") != std::string::npos);

    std::ofstream(tmp.path() / "nojson.json") << "{{{";
    auto parse_fail = run_cli(tmp, "segment --config " + (tmp.path() / "nojson.json").string());
    CHECK(parse_fail.exit_code == 2);
}

TEST_CASE("a permanently failing stage exits 1 with the failure recorded") {
    TempDir tmp("cli_partial");
    std::mt19937 rng(11);
    write_labels(tmp, testutil::random_labels(rng, {16, 16}, 1));
    // A gaussian predictor whose declared context is valid but whose input
    // dataset vanishes mid-run is hard to fake; instead, declare an
    // under-sized context, which run_predict rejects as config error (2),
    // then check the partial path via an external worker that always fails.
    json config{{"input", {{"path", "."}, {"dataset", "gt"}}},
                {"output", {{"path", "."}, {"dataset", "pred"}}},
                {"predict",
                 {{"kind", "external"},
                  {"command", {"/bin/false"}},
                  {"channels", 1},
                  {"context", {0, 0}},
                  {"write_shape", {8, 8}}}},
                {"workers", {{"kind", "processes"}, {"n", 2}}}};
    std::ofstream(tmp.path() / "p.json") << config.dump();
    auto result = run_cli(tmp, "predict --config " + (tmp.path() / "p.json").string());
    CHECK(result.exit_code == 1);
    json record = json::parse(std::ifstream(tmp.path() / "p.record.json"));
    CHECK(record["exit_code"] == 1);
    CHECK(record["reports"][0]["failed"].size() == 4);
}

TEST_CASE("closed loop through the cli: predict, segment, evaluate, sweep") {
    TempDir tmp("cli_loop");
    // Deterministic multi-object fixture.
    Tensor labels({24, 24}, Dtype::u64);
    for (std::int64_t y = 2; y < 8; ++y)
        for (std::int64_t x = 2; x < 8; ++x) labels.at<std::uint64_t>({y, x}) = 1;
    for (std::int64_t y = 12; y < 20; ++y)
        for (std::int64_t x = 10; x < 16; ++x) labels.at<std::uint64_t>({y, x}) = 2;
    write_labels(tmp, labels);

    json predict_cfg{{"input", {{"path", "."}, {"dataset", "gt"}}},
                     {"output", {{"path", "."}, {"dataset", "pred"}}},
                     {"predict",
                      {{"kind", "oracle_task"},
                       {"task", {{"kind", "signed_distance"}, {"scale", 3.0}}},
                       {"context", {8, 8}},
                       {"write_shape", {8, 8}}}}};
    std::ofstream(tmp.path() / "predict.json") << predict_cfg.dump();
    CHECK(run_cli(tmp, "predict --config " + (tmp.path() / "predict.json").string()).exit_code == 0);

    json segment_cfg{{"input", {{"path", "."}, {"dataset", "pred"}}},
                     {"output", {{"path", "."}, {"dataset", "seg"}}},
                     {"post",
                      {{"kind", "threshold_cc"},
                       {"channel", 0},
                       {"threshold", 0.0},
                       {"connectivity", "face"}}},
                     {"blocks", {{"write_shape", {8, 8}}}}};
    std::ofstream(tmp.path() / "segment.json") << segment_cfg.dump();
    auto seg = run_cli(tmp, "segment --config " + (tmp.path() / "segment.json").string());
    CHECK(seg.exit_code == 0);
    CHECK(seg.out.find("objects: 2") != std::string::npos);

    json eval_cfg{{"segmentation", {{"path", "."}, {"dataset", "seg"}}},
                  {"gt", {{"path", "."}, {"dataset", "gt"}}},
                  {"output", "scores.json"}};
    std::ofstream(tmp.path() / "evaluate.json") << eval_cfg.dump();
    auto eval = run_cli(tmp, "evaluate --config " + (tmp.path() / "evaluate.json").string());
    CHECK(eval.exit_code == 0);
    json scores = json::parse(std::ifstream(tmp.path() / "scores.json"));
    CHECK(scores["scores"]["dice"] == 1.0);
    CHECK(scores["scores"]["voi_total"] == 0.0);

    std::ofstream(tmp.path() / "split.csv") << "usage,raw_path,raw_dataset,gt_path,gt_dataset\n"
                                               "validate,.,gt,.,gt\n";
    json sweep_cfg{{"datasplit", "split.csv"},
                   {"checkpoints",
                    json::array({{{"iteration", 100},
                                  {"prediction", {{"path", "."}, {"dataset", "pred"}}}}})},
                   {"post", {{"kind", "threshold_mask"}, {"channel", 0}}},
                   {"grid", {{"threshold", {-0.5, 0.0, 0.5}}}},
                   {"selection_metric", "dice"}};
    std::ofstream(tmp.path() / "sweep.json") << sweep_cfg.dump();
    auto sweep = run_cli(tmp, "sweep --config " + (tmp.path() / "sweep.json").string());
    CHECK(sweep.exit_code == 0);
    json record = json::parse(std::ifstream(tmp.path() / "sweep.record.json"));
    CHECK(record["best"]["params"]["threshold"] == 0.0);
    CHECK(record["best"]["scores"]["dice"] == 1.0);
}
