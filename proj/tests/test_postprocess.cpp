#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <blockvol/postprocess.hpp>

#include "helpers.hpp"

using namespace blockvol;
using testutil::TempDir;

namespace {

VolumeHandle make_mask_volume(const TempDir& tmp, const std::string& name, const Tensor& mask,
                              const Coordinate& chunks) {
    ArrayMetadata m;
    m.shape = mask.shape();
    m.chunk_shape = chunks;
    m.dtype = mask.dtype();
    auto vol = create_dataset(tmp.path(), name, m, VolumeAttributes::defaults(mask.ndim()));
    write_roi(vol, vol.bounds(), mask);
    return vol;
}

std::vector<std::uint64_t> read_labels(const VolumeHandle& vol) {
    return to_u64(read_roi(vol, vol.bounds()));
}

} // namespace

TEST_CASE("instance id encode/decode round trip at the boundaries") {
    for (std::uint64_t block : {std::uint64_t(0), std::uint64_t(1), instance_id::max_block})
        for (std::uint64_t local : {std::uint64_t(1), std::uint64_t(77), instance_id::max_local}) {
            std::uint64_t id = instance_id::encode(block, local);
            CHECK(instance_id::block_of(id) == block);
            CHECK(instance_id::local_of(id) == local);
        }
    CHECK_THROWS_AS(instance_id::encode(0, 0), Error);
    CHECK_THROWS_AS(instance_id::encode(0, instance_id::max_local + 1), Error);
    CHECK_THROWS_AS(instance_id::encode(instance_id::max_block + 1, 1), Error);
}

TEST_CASE("equivalence table: min representative, idempotent find") {
    EquivalenceTable table;
    for (std::uint64_t id : {5ull, 7ull, (1ull << 32) + 1, (1ull << 33) + 9}) table.insert(id);
    table.merge((1ull << 32) + 1, 7);
    table.merge((1ull << 33) + 9, (1ull << 32) + 1);
    table.finalize();

    CHECK(table.representative(7) == 7);
    CHECK(table.representative((1ull << 32) + 1) == 7);
    CHECK(table.representative((1ull << 33) + 9) == 7);
    CHECK(table.representative(5) == 5);
    CHECK(table.representatives() == std::vector<std::uint64_t>{5, 7});
    CHECK_THROWS_AS(table.representative(12345), Error);

    auto entries = table.entries();
    REQUIRE(entries.size() == 4);
    using IdPair = std::pair<std::uint64_t, std::uint64_t>;
    CHECK(entries[0] == IdPair{5, 5});
    CHECK(entries[1] == IdPair{7, 7});
}

TEST_CASE("threshold basics and monotonicity") {
    std::mt19937 rng(3);
    Tensor pred = testutil::random_f32(rng, {2, 6, 6}, -1.f, 1.f);
    Tensor lo = threshold(pred, 0, -2.0);
    Tensor hi = threshold(pred, 0, 2.0);
    for (auto v : lo.view<std::uint8_t>()) CHECK(v == 1);
    for (auto v : hi.view<std::uint8_t>()) CHECK(v == 0);

    Tensor t1 = threshold(pred, 1, -0.2);
    Tensor t2 = threshold(pred, 1, 0.4);
    auto a = t1.view<std::uint8_t>();
    auto b = t2.view<std::uint8_t>();
    for (std::size_t i = 0; i < a.size(); ++i)
        if (b[i]) CHECK(a[i]); // mask(t2) is a subset of mask(t1)
    CHECK_THROWS_AS(threshold(pred, 2, 0.0), Error);
}

TEST_CASE("label_block basics") {
    SUBCASE("empty mask consumes no ids") {
        Tensor mask({4, 4}, Dtype::u8);
        auto res = label_block(mask, Roi({0, 0}, {4, 4}), {4, 4}, 3, Connectivity::face);
        CHECK(res.id_count == 0);
        for (auto v : res.labels.view<std::uint64_t>()) CHECK(v == 0);
    }
    SUBCASE("two touching voxels form one component under face connectivity") {
        Tensor mask({1, 2}, Dtype::u8);
        mask.view<std::uint8_t>()[0] = 1;
        mask.view<std::uint8_t>()[1] = 1;
        auto res = label_block(mask, Roi({0, 0}, {1, 2}), {1, 2}, 2, Connectivity::face);
        CHECK(res.id_count == 1);
        auto v = res.labels.view<std::uint64_t>();
        CHECK(v[0] == instance_id::encode(2, 1));
        CHECK(v[1] == v[0]);
        CHECK(res.voxel_count == std::vector<std::uint64_t>{2});
    }
    SUBCASE("diagonal pair: two components under face, one under full") {
        Tensor mask({2, 2}, Dtype::u8);
        mask.at<std::uint8_t>({0, 0}) = 1;
        mask.at<std::uint8_t>({1, 1}) = 1;
        auto face = label_block(mask, Roi({0, 0}, {2, 2}), {2, 2}, 0, Connectivity::face);
        CHECK(face.id_count == 2);
        auto full = label_block(mask, Roi({0, 0}, {2, 2}), {2, 2}, 0, Connectivity::full);
        CHECK(full.id_count == 1);
    }
    SUBCASE("local ids are raster-first-touch ordered") {
        Tensor mask({3, 3}, Dtype::u8);
        mask.at<std::uint8_t>({0, 2}) = 1; // first in raster order
        mask.at<std::uint8_t>({2, 0}) = 1;
        auto res = label_block(mask, Roi({0, 0}, {3, 3}), {3, 3}, 0, Connectivity::face);
        CHECK(res.labels.at<std::uint64_t>({0, 2}) == 1);
        CHECK(res.labels.at<std::uint64_t>({2, 0}) == 2);
        CHECK(res.first_voxel == std::vector<std::uint64_t>{2, 6});
    }
}

TEST_CASE("label_block errors at local-id exhaustion via an injected counter") {
    Tensor mask({1, 3}, Dtype::u8);
    auto v = mask.view<std::uint8_t>();
    v[0] = 1;
    v[2] = 1; // two separate components
    // Starting at max_local, the second component would need max_local + 1.
    CHECK_THROWS_WITH_AS(label_block(mask, Roi({0, 0}, {1, 3}), {1, 3}, 0, Connectivity::face,
                                     instance_id::max_local),
                         doctest::Contains("exhausted"), Error);
    // One component fits exactly.
    auto res = label_block(mask, Roi({0, 0}, {1, 3}), {1, 3}, 0, Connectivity::face,
                           instance_id::max_local - 1);
    CHECK(res.id_count == 2);
}

TEST_CASE("merge_faces unifies a rod crossing three blocks") {
    // 1D volume [0,12): a rod spanning voxels 2..9 under blocks of 4.
    Tensor mask({12}, Dtype::u8);
    auto mv = mask.view<std::uint8_t>();
    for (int i = 2; i <= 9; ++i) mv[i] = 1;

    BlockSpec spec{Roi({0}, {12}), {4}, {0}, FitPolicy::shrink};
    std::vector<BlockBoundary> boundaries;
    std::vector<Tensor> block_labels;
    for (const auto& block : enumerate_blocks(spec)) {
        Tensor sub = crop_world(mask, Roi({0}, {12}), block.write_roi);
        auto res = label_block(sub, block.write_roi, {12}, block.block_index, Connectivity::face);
        auto boundary = extract_boundary(res, block.write_roi);
        boundary.block_index = block.block_index;
        boundaries.push_back(std::move(boundary));
        block_labels.push_back(std::move(res.labels));
    }
    EquivalenceTable table = merge_faces(boundaries, spec, Connectivity::face);
    std::uint64_t rep = table.representative(instance_id::encode(0, 1));
    CHECK(table.representative(instance_id::encode(1, 1)) == rep);
    CHECK(table.representative(instance_id::encode(2, 1)) == rep);
    CHECK(rep == instance_id::encode(0, 1)); // min member
}

TEST_CASE("merge_faces keeps objects meeting a face at disjoint positions distinct") {
    // Two parallel rods crossing the same block face.
    Tensor mask({4, 8}, Dtype::u8);
    for (int x = 2; x <= 5; ++x) {
        mask.at<std::uint8_t>({0, x}) = 1;
        mask.at<std::uint8_t>({3, x}) = 1;
    }
    BlockSpec spec{Roi({0, 0}, {4, 8}), {4, 4}, {0, 0}, FitPolicy::shrink};
    std::vector<BlockBoundary> boundaries;
    for (const auto& block : enumerate_blocks(spec)) {
        Tensor sub = crop_world(mask, Roi({0, 0}, {4, 8}), block.write_roi);
        auto res = label_block(sub, block.write_roi, {4, 8}, block.block_index, Connectivity::face);
        auto boundary = extract_boundary(res, block.write_roi);
        boundary.block_index = block.block_index;
        boundaries.push_back(std::move(boundary));
    }
    EquivalenceTable table = merge_faces(boundaries, spec, Connectivity::face);
    // Each block saw two rod slices; across the face each rod merges with
    // itself only.
    auto r00 = table.representative(instance_id::encode(0, 1));
    auto r01 = table.representative(instance_id::encode(0, 2));
    CHECK(r00 != r01);
    CHECK(table.representative(instance_id::encode(1, 1)) == r00);
    CHECK(table.representative(instance_id::encode(1, 2)) == r01);
}

TEST_CASE("relabel: identity table, compaction rule, idempotence") {
    Tensor labels({4}, Dtype::u64);
    auto lv = labels.view<std::uint64_t>();
    lv[0] = (1ull << 32) + 1;
    lv[1] = 5;
    lv[2] = 0;
    lv[3] = 5;

    EquivalenceTable table;
    table.insert((1ull << 32) + 1);
    table.insert(5);
    table.finalize();

    SUBCASE("identity table leaves the volume unchanged") {
        Tensor copy = labels;
        relabel_tensor(copy, table);
        CHECK(std::memcmp(copy.data(), labels.data(), labels.byte_size()) == 0);
    }
    SUBCASE("compaction by ascending representative id") {
        // ids {2^32+1, 5} -> {2, 1}
        auto remap = compaction_by_representative(table);
        Tensor copy = labels;
        relabel_tensor(copy, table, &remap);
        auto cv = copy.view<std::uint64_t>();
        CHECK(cv[0] == 2);
        CHECK(cv[1] == 1);
        CHECK(cv[2] == 0);
        CHECK(cv[3] == 1);
    }
    SUBCASE("missing id is a hard error") {
        Tensor bad({1}, Dtype::u64);
        bad.view<std::uint64_t>()[0] = 999;
        CHECK_THROWS_AS(relabel_tensor(bad, table), Error);
    }
}

TEST_CASE("relabel_blockwise is idempotent after compaction") {
    TempDir tmp("post_relabel");
    Tensor mask({8, 8}, Dtype::u8);
    mask.at<std::uint8_t>({1, 1}) = 1;
    mask.at<std::uint8_t>({6, 6}) = 1;
    auto vol = make_mask_volume(tmp, "labels", label_volume(mask, Connectivity::face), {4, 4});

    EquivalenceTable table;
    table.insert(1);
    table.insert(2);
    table.finalize();
    auto r1 = relabel_blockwise(vol, table, true, {4, 4}, ExecutionContext::serial());
    REQUIRE(r1.ok());
    auto first = read_labels(vol);
    auto r2 = relabel_blockwise(vol, table, true, {4, 4}, ExecutionContext::serial());
    REQUIRE(r2.ok());
    CHECK(read_labels(vol) == first);
}

TEST_CASE("segment_instances equals whole-volume labeling on random volumes") {
    std::mt19937 rng(71);
    for (int iter = 0; iter < 10; ++iter) {
        std::size_t d = iter % 2 ? 2 : 3;
        Connectivity conn = iter % 3 ? Connectivity::face : Connectivity::full;
        Coordinate shape = testutil::random_shape(rng, d, 6, d == 3 ? 20 : 40);
        Tensor mask = testutil::random_mask(rng, shape, 0.45);

        TempDir tmp("post_segment");
        Coordinate chunks = testutil::random_shape(rng, d, 3, 9);
        auto in = make_mask_volume(tmp, "mask", mask, chunks);

        SegmentArgs args;
        args.input = in;
        args.connectivity = conn;
        args.output = {tmp.path(), "seg"};
        args.write_shape = testutil::random_shape(rng, d, 4, 12);
        args.ctx = ExecutionContext::serial();
        args.scratch_dir = tmp.path() / "scratch";
        auto result = segment_instances(args);
        REQUIRE(result.reports.size() == 2);
        REQUIRE(result.reports[0].ok());
        REQUIRE(result.reports[1].ok());

        auto got = read_labels(result.output);
        auto oracle = testutil::cc_whole_volume(mask, conn == Connectivity::full);
        CHECK(testutil::partitions_equal(got, oracle));
        // With first-voxel compaction the result is exactly the raster-order
        // labeling the oracle produces.
        CHECK(got == oracle);
        std::uint64_t max_label = 0;
        for (auto v : oracle) max_label = std::max(max_label, v);
        CHECK(result.object_count == max_label);
    }
}

TEST_CASE("single voxel on a corner shared by 8 blocks stays one object") {
    Tensor mask({8, 8, 8}, Dtype::u8);
    mask.at<std::uint8_t>({3, 3, 3}) = 1;
    mask.at<std::uint8_t>({4, 4, 4}) = 1; // corner-diagonal pair across blocks
    TempDir tmp("post_corner");
    auto in = make_mask_volume(tmp, "mask", mask, {4, 4, 4});

    SegmentArgs args;
    args.input = in;
    args.output = {tmp.path(), "seg"};
    args.write_shape = {4, 4, 4};
    args.ctx = ExecutionContext::serial();
    args.scratch_dir = tmp.path() / "scratch";

    SUBCASE("full connectivity joins the diagonal pair across the corner") {
        args.connectivity = Connectivity::full;
        auto result = segment_instances(args);
        CHECK(result.object_count == 1);
        auto got = read_labels(result.output);
        CHECK(testutil::partitions_equal(got, testutil::cc_whole_volume(mask, true)));
    }
    SUBCASE("face connectivity keeps them separate") {
        args.connectivity = Connectivity::face;
        auto result = segment_instances(args);
        CHECK(result.object_count == 2);
    }
}

TEST_CASE("all-foreground volume is one object for any block shape") {
    Tensor mask = Tensor::filled({9, 7}, Dtype::u8, Scalar(std::uint64_t(1)));
    for (Coordinate write_shape : {Coordinate{3, 7}, Coordinate{4, 3}}) {
        TempDir tmp("post_allfg");
        auto in = make_mask_volume(tmp, "mask", mask, {3, 7});
        SegmentArgs args;
        args.input = in;
        args.output = {tmp.path(), "seg"};
        args.write_shape = write_shape;
        args.ctx = ExecutionContext::serial();
        args.scratch_dir = tmp.path() / "scratch";
        auto result = segment_instances(args);
        CHECK(result.object_count == 1);
        for (auto v : read_labels(result.output)) CHECK(v == 1);
    }
}

TEST_CASE("compacted outputs are identical across block shapes") {
    std::mt19937 rng(83);
    Tensor mask = testutil::random_mask(rng, {18, 14}, 0.5);
    std::vector<std::vector<std::uint64_t>> outputs;
    for (Coordinate write_shape : {Coordinate{6, 7}, Coordinate{5, 4}, Coordinate{18, 14}}) {
        TempDir tmp("post_shapes");
        auto in = make_mask_volume(tmp, "mask", mask, {6, 7});
        SegmentArgs args;
        args.input = in;
        args.output = {tmp.path(), "seg"};
        args.write_shape = write_shape;
        args.ctx = ExecutionContext::serial();
        args.scratch_dir = tmp.path() / "scratch";
        outputs.push_back(read_labels(segment_instances(args).output));
    }
    CHECK(outputs[0] == outputs[1]);
    CHECK(outputs[0] == outputs[2]);
}

TEST_CASE("full connectivity survives adversarially tiny blocks") {
    // With 2-3 voxel blocks nearly every diagonal adjacency crosses a block
    // face, edge, or corner.
    std::mt19937 rng(79);
    for (int iter = 0; iter < 12; ++iter) {
        Coordinate shape = testutil::random_shape(rng, 3, 5, 9);
        Tensor mask = testutil::random_mask(rng, shape, 0.35);
        auto oracle = testutil::cc_whole_volume(mask, true);

        for (Coordinate write_shape : {Coordinate{2, 2, 2}, Coordinate{3, 2, 4}}) {
            TempDir tmp("post_tiny");
            auto in = make_mask_volume(tmp, "mask", mask, write_shape);
            SegmentArgs args;
            args.input = in;
            args.connectivity = Connectivity::full;
            args.output = {tmp.path(), "seg"};
            args.write_shape = write_shape;
            args.ctx = ExecutionContext::serial();
            args.scratch_dir = tmp.path() / "scratch";
            auto result = segment_instances(args);
            REQUIRE(result.reports[0].ok());
            CHECK(testutil::partitions_equal(read_labels(result.output), oracle));
        }
    }
}

TEST_CASE("affinity decoding recovers the instance partition") {
    std::mt19937 rng(89);
    for (int iter = 0; iter < 4; ++iter) {
        Coordinate shape = testutil::random_shape(rng, 3, 8, 14);
        Tensor mask = testutil::random_mask(rng, shape, 0.4);
        // Ground truth: face-connected components without singletons (a
        // singleton has no affinity edge and cannot be recovered).
        Tensor gt = label_volume(mask, Connectivity::face);
        size_filter_tensor(gt, 2);

        Neighborhood nbhd = Neighborhood::of({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
        Tensor affs = affinities(gt, nbhd);

        // Whole-volume decode.
        Tensor decoded = decode_affinities(affs, nbhd, 0.5);
        CHECK(testutil::partitions_equal(to_u64(decoded), to_u64(gt)));

        // Blockwise decode through the pipeline.
        TempDir tmp("post_affseg");
        ArrayMetadata m;
        m.shape = affs.shape();
        m.chunk_shape = prepend(3, Coordinate{4, 4, 4});
        m.dtype = Dtype::f32;
        auto in = create_dataset(tmp.path(), "affs", m, VolumeAttributes::defaults(4));
        write_roi(in, in.bounds(), affs);

        SegmentArgs args;
        args.input = in;
        args.threshold = 0.5;
        args.output = {tmp.path(), "seg"};
        args.write_shape = {4, 4, 4};
        args.ctx = ExecutionContext::serial();
        args.scratch_dir = tmp.path() / "scratch";
        auto result = segment_affinities(args, nbhd);
        REQUIRE(result.reports.size() == 2);
        REQUIRE(result.reports[0].ok());
        CHECK(testutil::partitions_equal(read_labels(result.output), to_u64(gt)));
    }
}

TEST_CASE("affinity decode: t >= 1 isolates everything, raising t never merges") {
    std::mt19937 rng(97);
    Coordinate shape{10, 10};
    Tensor labels = testutil::random_labels(rng, shape, 3);
    Neighborhood nbhd = Neighborhood::of({{1, 0}, {0, 1}});
    Tensor affs = affinities(labels, nbhd);

    Tensor isolated = decode_affinities(affs, nbhd, 1.0);
    for (auto v : isolated.view<std::uint64_t>()) CHECK(v == 0);

    // Refinement monotonicity over a threshold grid: components at higher t
    // are subsets of components at lower t.
    Tensor noisy(affs.shape(), Dtype::f32);
    {
        auto src = affs.view<float>();
        auto dst = noisy.view<float>();
        std::uniform_real_distribution<float> jitter(-0.3f, 0.3f);
        for (std::size_t i = 0; i < src.size(); ++i)
            dst[i] = std::clamp(src[i] + jitter(rng), 0.f, 1.f);
    }
    std::vector<double> grid{0.2, 0.5, 0.8};
    std::vector<std::vector<std::uint64_t>> parts;
    for (double t : grid) parts.push_back(to_u64(decode_affinities(noisy, nbhd, t)));
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        const auto& coarse = parts[i];
        const auto& fine = parts[i + 1];
        std::unordered_map<std::uint64_t, std::uint64_t> into;
        for (std::size_t k = 0; k < fine.size(); ++k) {
            if (fine[k] == 0) continue;
            CHECK(coarse[k] != 0); // higher t only removes voxels
            auto [it, fresh] = into.try_emplace(fine[k], coarse[k]);
            if (!fresh) CHECK(it->second == coarse[k]); // never split upward
        }
    }
}

TEST_CASE("non-unit affinity offsets are rejected") {
    Tensor affs({1, 4, 4}, Dtype::f32);
    CHECK_THROWS_WITH_AS(decode_affinities(affs, Neighborhood::of({{2, 0}}), 0.5),
                         doctest::Contains("unit"), Error);
    CHECK_THROWS_AS(decode_affinities(affs, Neighborhood::of({{1, 1}}), 0.5), Error);
}

TEST_CASE("size filter: in memory and blockwise agree with the histogram") {
    std::mt19937 rng(101);
    Tensor mask = testutil::random_mask(rng, {16, 16}, 0.45);
    Tensor labels = label_volume(mask, Connectivity::face);

    std::unordered_map<std::uint64_t, std::uint64_t> counts;
    for (auto v : labels.view<std::uint64_t>())
        if (v) ++counts[v];

    const std::uint64_t min_size = 4;
    Tensor filtered = labels;
    size_filter_tensor(filtered, min_size);
    {
        auto lv = labels.view<std::uint64_t>();
        auto fv = filtered.view<std::uint64_t>();
        for (std::size_t i = 0; i < lv.size(); ++i)
            CHECK(fv[i] == ((lv[i] && counts[lv[i]] >= min_size) ? lv[i] : 0));
    }

    // min_size 0 and 1 are no-ops.
    Tensor untouched = labels;
    size_filter_tensor(untouched, 0);
    size_filter_tensor(untouched, 1);
    CHECK(std::memcmp(untouched.data(), labels.data(), labels.byte_size()) == 0);

    // Blockwise path: objects spanning blocks are counted globally.
    TempDir tmp("post_sizefilter");
    auto vol = make_mask_volume(tmp, "labels", labels, {4, 4});
    auto reports = size_filter_blockwise(vol, min_size, {4, 4}, ExecutionContext::threads(2),
                                         tmp.path() / "scratch");
    REQUIRE(reports.size() == 2);
    CHECK(reports[0].ok());
    CHECK(reports[1].ok());
    CHECK(read_labels(vol) == to_u64(filtered));
}

TEST_CASE("segmentation pipeline fuses threshold and size filter") {
    std::mt19937 rng(103);
    Coordinate shape{12, 12};
    Tensor mask = testutil::random_mask(rng, shape, 0.4);
    Tensor pred = signed_distance(mask, std::nullopt, {1, 1}, 2.0);

    TempDir tmp("post_fused");
    ArrayMetadata m;
    m.shape = pred.shape();
    m.chunk_shape = {1, 6, 6};
    m.dtype = Dtype::f32;
    auto in = create_dataset(tmp.path(), "pred", m, VolumeAttributes::defaults(3));
    write_roi(in, in.bounds(), pred);

    SegmentArgs args;
    args.input = in;
    args.channel = 0;
    args.threshold = 0.0;
    args.min_size = 3;
    args.output = {tmp.path(), "seg"};
    args.write_shape = {6, 6};
    args.ctx = ExecutionContext::serial();
    args.scratch_dir = tmp.path() / "scratch";
    auto result = segment_instances(args);
    REQUIRE(result.reports[0].ok());

    Tensor expected = label_volume(mask, Connectivity::face);
    size_filter_tensor(expected, 3);
    auto got = read_labels(result.output);
    CHECK(testutil::partitions_equal(got, to_u64(expected)));

    std::set<std::uint64_t> surviving(got.begin(), got.end());
    surviving.erase(0);
    CHECK(result.object_count == surviving.size());
}

TEST_CASE("segmentation pipeline runs under threads and processes identically") {
    std::mt19937 rng(107);
    Tensor mask = testutil::random_mask(rng, {16, 12}, 0.5);

    auto run_with = [&](const ExecutionContext& ctx) {
        TempDir tmp("post_parallel");
        auto in = make_mask_volume(tmp, "mask", mask, {4, 4});
        SegmentArgs args;
        args.input = in;
        args.output = {tmp.path(), "seg"};
        args.write_shape = {4, 4};
        args.ctx = ctx;
        args.scratch_dir = tmp.path() / "scratch";
        auto result = segment_instances(args);
        for (const auto& r : result.reports) REQUIRE(r.ok());
        return read_labels(result.output);
    };
    auto serial = run_with(ExecutionContext::serial());
    CHECK(run_with(ExecutionContext::threads(4)) == serial);
    CHECK(run_with(ExecutionContext::processes(2)) == serial);
}

TEST_CASE("segmentation pipeline resumes from journals after record cleanup") {
    std::mt19937 rng(113);
    Tensor mask = testutil::random_mask(rng, {16, 16}, 0.5);
    TempDir tmp("post_resume");
    auto in = make_mask_volume(tmp, "mask", mask, {4, 4});

    SegmentArgs args;
    args.input = in;
    args.output = {tmp.path(), "seg"};
    args.write_shape = {4, 4};
    args.ctx = ExecutionContext::serial();
    args.scratch_dir = tmp.path() / "scratch";
    args.journal = tmp.path() / "seg.journal";

    auto first = segment_instances(args);
    REQUIRE(first.reports.size() == 2);
    REQUIRE(first.reports[0].ok());
    auto expected = read_labels(first.output);
    // The merge removed the per-block records but persisted the table.
    CHECK(!std::filesystem::exists(block_record_path(args.scratch_dir, 0)));
    CHECK(std::filesystem::exists(args.scratch_dir / "equivalences.bin"));

    // A rerun with the same journals skips every block and reproduces the
    // volume from the persisted merge.
    auto second = segment_instances(args);
    REQUIRE(second.reports.size() == 2);
    CHECK(second.reports[0].skipped == second.reports[0].total_blocks);
    CHECK(second.reports[1].skipped == second.reports[1].total_blocks);
    CHECK(second.object_count == first.object_count);
    CHECK(read_labels(second.output) == expected);
}

TEST_CASE("boundary records round-trip through their files") {
    std::mt19937 rng(109);
    Tensor mask = testutil::random_mask(rng, {5, 6}, 0.5);
    Roi write({10, 12}, {5, 6});
    auto res = label_block(mask, write, {32, 32}, 7, Connectivity::face);
    auto boundary = extract_boundary(res, write);
    boundary.block_index = 7;

    TempDir tmp("post_records");
    write_block_record(tmp.path(), boundary);
    auto loaded = read_block_record(tmp.path(), 7);
    CHECK(loaded.block_index == 7);
    CHECK(loaded.write_roi == write);
    CHECK(loaded.id_count == boundary.id_count);
    CHECK(loaded.first_voxel == boundary.first_voxel);
    CHECK(loaded.voxel_count == boundary.voxel_count);
    for (std::size_t a = 0; a < 2; ++a)
        for (int side = 0; side < 2; ++side) {
            const auto& x = boundary.faces[a][side].labels;
            const auto& y = loaded.faces[a][side].labels;
            CHECK(x.shape() == y.shape());
            CHECK(std::memcmp(x.data(), y.data(), x.byte_size()) == 0);
        }
    CHECK_THROWS_AS(read_block_record(tmp.path(), 8), Error);
}
