#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include <blockvol/predict.hpp>

#include "helpers.hpp"

using namespace blockvol;
using testutil::TempDir;

namespace {

VolumeHandle make_f32_volume(const TempDir& tmp, const std::string& name, const Coordinate& shape,
                             const Coordinate& chunks, Tensor data) {
    ArrayMetadata m;
    m.shape = shape;
    m.chunk_shape = chunks;
    m.dtype = Dtype::f32;
    m.fill_value = Scalar(0.0);
    auto vol = create_dataset(tmp.path(), name, m, VolumeAttributes::defaults(shape.ndim()));
    write_roi(vol, vol.bounds(), data);
    return vol;
}

/// Whole-volume reference: run the same predictor once with the entire
/// volume as a single block and the full required context.
Tensor whole_volume_predict(const PredictorSpec& pred, const VolumeHandle& vol,
                            const std::vector<double>& vs) {
    Roi bounds = vol.bounds();
    Coordinate ctx = pred.effective_context(vol.ndim(), vs);
    Block block{0, bounds.grown(ctx), bounds};
    Roi input_roi = block.read_roi;
    if (pred.kind == PredictorSpec::Kind::oracle_task) input_roi = input_roi.intersect(bounds);
    Tensor input = read_roi(vol, input_roi);
    return predict_block(pred, input, input_roi, block, vs);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    auto av = a.view<float>();
    auto bv = b.view<float>();
    REQUIRE(av.size() == bv.size());
    double worst = 0;
    for (std::size_t i = 0; i < av.size(); ++i)
        worst = std::max(worst, std::abs(double(av[i]) - double(bv[i])));
    return worst;
}

} // namespace

TEST_CASE("identity predictor crops the read block to the write roi") {
    std::mt19937 rng(3);
    Tensor data = testutil::random_f32(rng, {8, 8});
    PredictorSpec pred;
    pred.kind = PredictorSpec::Kind::identity;
    Block block{0, Roi({2, 2}, {4, 4}), Roi({2, 2}, {4, 4})};
    Tensor out = predict_block(pred, data, Roi({0, 0}, {8, 8}), block, {1, 1});
    CHECK(out.shape() == Coordinate{1, 4, 4});
    for (std::int64_t y = 0; y < 4; ++y)
        for (std::int64_t x = 0; x < 4; ++x)
            CHECK(out.at<float>({0, y, x}) == data.at<float>({2 + y, 2 + x}));
}

TEST_CASE("tiny-sigma gaussian approaches the identity") {
    std::mt19937 rng(5);
    Tensor data = testutil::random_f32(rng, {6, 6});
    PredictorSpec pred;
    pred.kind = PredictorSpec::Kind::gaussian;
    pred.sigma = 1e-4;
    Block block{0, Roi({0, 0}, {6, 6}).grown({1, 1}), Roi({0, 0}, {6, 6})};
    Tensor input = Tensor({8, 8}, Dtype::f32);
    copy_region(data, {0, 0}, input, {1, 1}, {6, 6});
    Tensor out = predict_block(pred, input, block.read_roi, block, {1, 1});
    for (std::int64_t y = 0; y < 6; ++y)
        for (std::int64_t x = 0; x < 6; ++x)
            CHECK(out.at<float>({0, y, x}) == doctest::Approx(data.at<float>({y, x})).epsilon(1e-6));
}

TEST_CASE("blockwise gaussian equals whole-volume within 1e-6") {
    std::mt19937 rng(7);
    for (double sigma : {1.0, 2.5}) {
        TempDir tmp("predict_gauss");
        Coordinate shape{21, 26};
        Tensor data = testutil::random_f32(rng, shape, 0.f, 100.f);
        auto in = make_f32_volume(tmp, "in", shape, {7, 13}, data);

        PredictorSpec pred;
        pred.kind = PredictorSpec::Kind::gaussian;
        pred.sigma = sigma;
        Tensor whole = whole_volume_predict(pred, in, {1, 1});

        // Two block shapes, including a non-divisor of the volume shape.
        for (Coordinate write_shape : {Coordinate{7, 13}, Coordinate{5, 9}}) {
            PredictRun run;
            run.input = in;
            run.output = {tmp.path(), "out"};
            run.write_shape = write_shape;
            run.predictor = pred;
            run.ctx = ExecutionContext::serial();
            auto result = run_predict(run);
            REQUIRE(result.report.ok());
            Tensor got = read_roi(result.output, result.output.bounds());
            CHECK(max_abs_diff(got, whole) <= 1e-6);
        }
    }
}

TEST_CASE("under-declared context is detectable (negative control)") {
    std::mt19937 rng(11);
    Coordinate shape{24, 24};
    TempDir tmp("predict_negctl");
    Tensor data = testutil::random_f32(rng, shape, 0.f, 100.f);
    auto in = make_f32_volume(tmp, "in", shape, {8, 8}, data);

    PredictorSpec pred;
    pred.kind = PredictorSpec::Kind::gaussian;
    pred.sigma = 2.0;
    Tensor whole = whole_volume_predict(pred, in, {1, 1});

    PredictRun run;
    run.input = in;
    run.output = {tmp.path(), "out"};
    run.write_shape = {8, 8};
    run.predictor = pred;
    run.predictor.context = Coordinate{0, 0};
    run.ctx = ExecutionContext::serial();

    // Rejected by default, allowed with enforcement off.
    CHECK_THROWS_AS(run_predict(run), Error);
    run.enforce_context = false;
    auto result = run_predict(run);
    REQUIRE(result.report.ok());
    Tensor got = read_roi(result.output, result.output.bounds());
    CHECK(max_abs_diff(got, whole) > 1e-3);
}

TEST_CASE("noiseless oracle predictions reproduce the targets exactly") {
    TempDir tmp("predict_oracle");
    std::mt19937 rng(13);
    Coordinate shape{14, 14};
    ArrayMetadata m;
    m.shape = shape;
    m.chunk_shape = {7, 7};
    m.dtype = Dtype::u64;
    auto gt = create_dataset(tmp.path(), "gt", m, VolumeAttributes::defaults(2));
    Tensor labels = testutil::random_labels(rng, shape, 2);
    write_roi(gt, gt.bounds(), labels);

    PredictorSpec pred;
    pred.kind = PredictorSpec::Kind::oracle_task;
    pred.task = TargetSpec::from_json(
        nlohmann::json::parse(R"({"kind":"signed_distance","scale":3.0})"));
    pred.context = Coordinate{14, 14}; // whole volume in context: exact distances

    PredictRun run;
    run.input = gt;
    run.output = {tmp.path(), "pred"};
    run.write_shape = {7, 7};
    run.predictor = pred;
    run.ctx = ExecutionContext::serial();
    auto result = run_predict(run);
    REQUIRE(result.report.ok());

    Tensor expected = signed_distance(labels, std::nullopt, {1, 1}, 3.0);
    Tensor got = read_roi(result.output, result.output.bounds());
    CHECK(std::memcmp(expected.data(), got.data(), expected.byte_size()) == 0);
}

TEST_CASE("seeded oracle noise is reproducible and clamped") {
    TempDir tmp("predict_noise");
    std::mt19937 rng(17);
    Coordinate shape{12, 12};
    ArrayMetadata m;
    m.shape = shape;
    m.chunk_shape = {6, 6};
    m.dtype = Dtype::u64;
    auto gt = create_dataset(tmp.path(), "gt", m, VolumeAttributes::defaults(2));
    write_roi(gt, gt.bounds(), testutil::random_labels(rng, shape, 1));

    PredictorSpec pred;
    pred.kind = PredictorSpec::Kind::oracle_task;
    pred.task = TargetSpec::from_json(nlohmann::json::parse(R"({"kind":"one_hot","class_ids":[1]})"));
    pred.noise_std = 0.1;
    pred.seed = 99;

    auto run_once = [&](const std::string& name) {
        PredictRun run;
        run.input = gt;
        run.output = {tmp.path(), name};
        run.write_shape = {6, 6};
        run.predictor = pred;
        run.ctx = ExecutionContext::serial();
        auto result = run_predict(run);
        REQUIRE(result.report.ok());
        return read_roi(result.output, result.output.bounds());
    };

    Tensor a = run_once("a");
    Tensor b = run_once("b");
    CHECK(std::memcmp(a.data(), b.data(), a.byte_size()) == 0);
    bool any_noise = false;
    for (auto v : a.view<float>()) {
        CHECK(v >= 0.f);
        CHECK(v <= 1.f);
        if (v != 0.f && v != 1.f) any_noise = true;
    }
    CHECK(any_noise);

    // A different seed changes the volume.
    pred.seed = 100;
    Tensor c = run_once("c");
    CHECK(std::memcmp(a.data(), c.data(), a.byte_size()) != 0);
}

TEST_CASE("noiseless outputs are block-shape independent") {
    TempDir tmp("predict_blockshape");
    std::mt19937 rng(19);
    Coordinate shape{18, 15};
    ArrayMetadata m;
    m.shape = shape;
    m.chunk_shape = {9, 15};
    m.dtype = Dtype::u64;
    auto gt = create_dataset(tmp.path(), "gt", m, VolumeAttributes::defaults(2));
    write_roi(gt, gt.bounds(), testutil::random_labels(rng, shape, 3));

    PredictorSpec pred;
    pred.kind = PredictorSpec::Kind::oracle_task;
    pred.task = TargetSpec::from_json(nlohmann::json::parse(R"({"kind":"one_hot","class_ids":[1,2,3]})"));

    auto run_with = [&](Coordinate write_shape, const std::string& name) {
        PredictRun run;
        run.input = gt;
        run.output = {tmp.path(), name};
        run.write_shape = write_shape;
        run.predictor = pred;
        run.ctx = ExecutionContext::serial();
        auto result = run_predict(run);
        REQUIRE(result.report.ok());
        return read_roi(result.output, result.output.bounds());
    };
    Tensor a = run_with({9, 15}, "a");
    Tensor b = run_with({5, 4}, "b");
    CHECK(std::memcmp(a.data(), b.data(), a.byte_size()) == 0);
}

TEST_CASE("predictor spec json round trip and context validation") {
    auto spec = PredictorSpec::from_json(
        nlohmann::json::parse(R"({"kind":"gaussian","sigma":4.0,"context":[12,12,12]})"), "/cfg");
    CHECK(spec.kind == PredictorSpec::Kind::gaussian);
    CHECK(spec.sigma == 4.0);
    CHECK(*spec.context == Coordinate{12, 12, 12});
    CHECK(spec.min_context(3, {1, 1, 1}) == Coordinate{12, 12, 12});
    CHECK(spec.min_context(3, {2, 2, 2}) == Coordinate{6, 6, 6});
    CHECK(spec.channel_count(3) == 1);

    CHECK_THROWS_WITH_AS(PredictorSpec::from_json(nlohmann::json::parse(R"({"kind":"gaussian"})"), "."),
                         doctest::Contains("sigma"), Error);
    CHECK_THROWS_WITH_AS(PredictorSpec::from_json(nlohmann::json::parse(R"({"kind":"resnet"})"), "."),
                         doctest::Contains("unknown predict kind"), Error);

    auto oracle = PredictorSpec::from_json(nlohmann::json::parse(R"({
        "kind": "oracle_task",
        "task": {"kind": "hot_distance", "class_ids": [1, 2], "scale": 8.0},
        "gt": {"path": "vols.zarr", "dataset": "gt"},
        "noise_std": 0.05,
        "seed": 7
    })"),
                                           "/configs");
    CHECK(oracle.channel_count(3) == 4);
    CHECK(oracle.gt->root == std::filesystem::path("/configs/vols.zarr"));
    CHECK(oracle.to_json()["task"]["scale"] == 8.0);
}
