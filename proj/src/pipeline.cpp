#include "blockvol/pipeline.hpp"

#include <chrono>
#include <fstream>

namespace blockvol {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::io, "cannot read config " + path.string());
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) fail(Errc::config, "config " + path.string() + " is not valid JSON");
    return doc;
}

struct RunEnv {
    std::string command;
    fs::path config_path;
    fs::path base_dir;
    json config;
    ExecutionContext ctx = ExecutionContext::serial();
    std::optional<fs::path> journal;
    fs::path record_path;
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
    std::vector<RunReport> reports;
    std::vector<std::string> artifacts;
    json extra = json::object();
};

RunEnv load_env(const std::string& command, const fs::path& config_path,
                const std::optional<int>& workers_override,
                const std::optional<fs::path>& journal_override,
                std::initializer_list<const char*> allowed) {
    RunEnv env;
    env.command = command;
    env.config_path = fs::absolute(config_path);
    env.base_dir = env.config_path.parent_path();
    env.config = read_config_file(env.config_path);
    check_keys(env.config, allowed, "config");

    if (env.config.contains("workers"))
        env.ctx = parse_execution(env.config["workers"], "config.workers");
    if (workers_override) {
        if (*workers_override < 1) fail(Errc::config, "--workers must be at least 1");
        if (env.ctx.kind == ExecutionContext::Kind::serial && *workers_override > 1)
            env.ctx = ExecutionContext::threads(*workers_override);
        else
            env.ctx.workers = *workers_override;
    }
    if (journal_override) env.journal = *journal_override;

    if (env.config.contains("record")) {
        fs::path p = env.config["record"].get<std::string>();
        env.record_path = p.is_relative() ? env.base_dir / p : p;
    } else {
        env.record_path = env.config_path;
        env.record_path.replace_extension(".record.json");
    }
    return env;
}

void write_json_doc(const fs::path& path, const json& doc) {
    std::string text = doc.dump(2);
    text.push_back('\n');
    atomic_write_file(path, {reinterpret_cast<const std::byte*>(text.data()), text.size()});
}

CommandOutcome finish(RunEnv& env) {
    CommandOutcome outcome;
    for (const auto& r : env.reports)
        if (!r.ok()) outcome.exit_code = 1;

    json reports = json::array();
    for (const auto& r : env.reports) reports.push_back(run_report_to_json(r));
    double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - env.started).count();

    json record{{"tool", "blockvol"},
                {"version", kVersion},
                {"command", env.command},
                {"config_path", env.config_path.string()},
                {"config", env.config},
                {"execution", execution_to_json(env.ctx)},
                {"reports", reports},
                {"artifacts", env.artifacts},
                {"wall_seconds", wall},
                {"exit_code", outcome.exit_code}};
    for (const auto& [k, v] : env.extra.items()) record[k] = v;

    write_json_doc(env.record_path, record);
    outcome.record = std::move(record);
    return outcome;
}

VolumeHandle open_ref(const RunEnv& env, const char* key) {
    VolumeRef ref = parse_volume_ref(require_key(env.config, key, "config"), env.base_dir,
                                     std::string("config.") + key);
    return open_dataset(ref);
}

struct OutputSpec {
    VolumeRef ref;
    CompressorSpec compressor;
};

OutputSpec parse_output(const RunEnv& env) {
    const json& j = require_key(env.config, "output", "config");
    check_keys(j, {"path", "dataset", "compressor"}, "config.output");
    OutputSpec out;
    fs::path path = require_key(j, "path", "config.output").get<std::string>();
    if (path.is_relative()) path = env.base_dir / path;
    out.ref = {path, require_key(j, "dataset", "config.output").get<std::string>()};
    if (j.contains("compressor"))
        out.compressor = parse_compressor(j["compressor"], "config.output.compressor");
    return out;
}

struct BlocksSpec {
    Coordinate write_shape;
    std::optional<Coordinate> context;
    FitPolicy fit = FitPolicy::shrink;
};

BlocksSpec parse_blocks(const json& j) {
    check_keys(j, {"write_shape", "context", "fit"}, "config.blocks");
    BlocksSpec blocks;
    blocks.write_shape = coordinate_from_json(require_key(j, "write_shape", "config.blocks"),
                                              "config.blocks.write_shape");
    if (j.contains("context"))
        blocks.context = coordinate_from_json(j["context"], "config.blocks.context");
    if (j.contains("fit")) {
        std::string fit = j["fit"].get<std::string>();
        if (fit == "shrink")
            blocks.fit = FitPolicy::shrink;
        else if (fit == "overhang")
            blocks.fit = FitPolicy::overhang;
        else if (fit == "strict")
            blocks.fit = FitPolicy::strict;
        else
            fail(Errc::config, "config.blocks.fit: unknown policy \"" + fit + "\"");
    }
    return blocks;
}

std::string sanitized(const std::string& dataset) {
    std::string s = dataset;
    for (auto& c : s)
        if (c == '/') c = '_';
    return s;
}

// ---------------------------------------------------------------------------
// target
// ---------------------------------------------------------------------------

CommandOutcome cmd_target(RunEnv& env) {
    check_keys(env.config, {"input", "output", "task", "blocks", "workers", "record"}, "config");
    VolumeHandle in = open_ref(env, "input");
    OutputSpec out_spec = parse_output(env);
    TargetSpec spec = TargetSpec::from_json(require_key(env.config, "task", "config"));
    BlocksSpec blocks = parse_blocks(require_key(env.config, "blocks", "config"));

    const std::size_t d = in.ndim();
    const std::vector<double>& vs = in.attributes.voxel_size;
    check_same_ndim(blocks.write_shape, in.metadata.shape, "config.blocks.write_shape");
    Coordinate context = blocks.context
                             ? *blocks.context
                             : spec.min_context(d, vs).value_or(Coordinate::zeros(d));

    const std::int64_t channels = static_cast<std::int64_t>(spec.channel_count(d));
    ArrayMetadata meta;
    meta.shape = prepend(channels, in.metadata.shape);
    meta.chunk_shape = prepend(channels, blocks.write_shape);
    meta.dtype = Dtype::f32;
    meta.fill_value = Scalar(0.0);
    meta.compressor = out_spec.compressor;
    VolumeAttributes attrs;
    attrs.voxel_size.assign(1, 1.0);
    attrs.voxel_size.insert(attrs.voxel_size.end(), vs.begin(), vs.end());
    attrs.offset.assign(1, 0.0);
    attrs.offset.insert(attrs.offset.end(), in.attributes.offset.begin(), in.attributes.offset.end());
    VolumeHandle out = ensure_dataset(out_spec.ref.root, out_spec.ref.dataset, meta, attrs);

    BlockTask task;
    task.name = "target";
    task.block_spec = {in.bounds(), blocks.write_shape, context, blocks.fit};
    task.inputs = {in};
    task.outputs = {out};
    std::vector<double> worker_vs = vs;
    task.worker = [in, out, spec, worker_vs, channels](const Block& b) {
        // Distances must not see virtual background beyond the volume.
        Roi window = b.read_roi.intersect(in.bounds());
        Tensor labels = read_roi(in, window);
        Tensor encoded = make_target(spec, labels, worker_vs);
        Tensor result = crop_world(encoded, with_channel_axis(window, channels),
                                   with_channel_axis(b.write_roi, channels));
        write_roi(out, with_channel_axis(b.write_roi, channels), result);
    };
    env.reports.push_back(run_blockwise(task, env.ctx, env.journal));
    env.artifacts.push_back(out.dir().string());
    return finish(env);
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

CommandOutcome cmd_predict(RunEnv& env) {
    check_keys(env.config, {"input", "output", "predict", "workers", "record"}, "config");
    VolumeHandle in = open_ref(env, "input");
    OutputSpec out_spec = parse_output(env);

    const json& pj = require_key(env.config, "predict", "config");
    std::string kind = require_key(pj, "kind", "config.predict").get<std::string>();
    if (kind == "identity")
        check_keys(pj, {"kind", "context", "write_shape"}, "config.predict");
    else if (kind == "gaussian")
        check_keys(pj, {"kind", "sigma", "context", "write_shape"}, "config.predict");
    else if (kind == "oracle_task")
        check_keys(pj, {"kind", "task", "gt", "noise_std", "seed", "context", "write_shape"},
                   "config.predict");
    else if (kind == "external")
        check_keys(pj, {"kind", "command", "env", "channels", "context", "write_shape"},
                   "config.predict");
    // Unknown kinds fall through to PredictorSpec::from_json's error.

    PredictRun run;
    run.input = in;
    run.output = out_spec.ref;
    run.output_compressor = out_spec.compressor;
    run.write_shape = coordinate_from_json(require_key(pj, "write_shape", "config.predict"),
                                           "config.predict.write_shape");
    run.predictor = PredictorSpec::from_json(pj, env.base_dir);
    run.ctx = env.ctx;
    run.journal = env.journal;

    PredictResult result = run_predict(run);
    env.reports.push_back(result.report);
    env.artifacts.push_back(result.output.dir().string());
    return finish(env);
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

CommandOutcome cmd_segment(RunEnv& env) {
    check_keys(env.config, {"input", "output", "post", "blocks", "workers", "scratch_dir", "record"},
               "config");
    VolumeHandle in = open_ref(env, "input");
    OutputSpec out_spec = parse_output(env);
    BlocksSpec blocks = parse_blocks(require_key(env.config, "blocks", "config"));
    const json& post = require_key(env.config, "post", "config");
    std::string kind = require_key(post, "kind", "config.post").get<std::string>();

    const std::size_t d = blocks.write_shape.ndim();
    const bool channel_volume = in.ndim() == d + 1;
    if (!channel_volume && in.ndim() != d)
        fail(Errc::config, "config.blocks.write_shape arity does not match the input dataset");

    fs::path scratch;
    if (env.config.contains("scratch_dir")) {
        fs::path p = env.config["scratch_dir"].get<std::string>();
        scratch = p.is_relative() ? env.base_dir / p : p;
    } else {
        scratch = out_spec.ref.root / (sanitized(out_spec.ref.dataset) + ".scratch");
    }

    if (kind == "threshold") {
        check_keys(post, {"kind", "channel", "threshold"}, "config.post");
        double t = require_key(post, "threshold", "config.post").get<double>();
        std::size_t channel = post.value("channel", 0);
        if (!channel_volume && post.contains("channel"))
            fail(Errc::config, "config.post.channel: the input has no channel axis");

        std::vector<std::int64_t> spatial(in.metadata.shape.values().end() - d,
                                          in.metadata.shape.values().end());
        ArrayMetadata meta;
        meta.shape = Coordinate(spatial);
        meta.chunk_shape = blocks.write_shape;
        meta.dtype = Dtype::u8;
        meta.fill_value = Scalar(std::uint64_t{0});
        meta.compressor = out_spec.compressor;
        VolumeAttributes attrs;
        attrs.voxel_size.assign(in.attributes.voxel_size.end() - d, in.attributes.voxel_size.end());
        attrs.offset.assign(in.attributes.offset.end() - d, in.attributes.offset.end());
        VolumeHandle out =
            ensure_dataset(out_spec.ref.root, out_spec.ref.dataset, meta, attrs);

        BlockTask task;
        task.name = "threshold";
        task.block_spec = {out.bounds(), blocks.write_shape, Coordinate::zeros(d), blocks.fit};
        task.inputs = {in};
        task.outputs = {out};
        task.worker = [in, out, t, channel, channel_volume](const Block& b) {
            Tensor slab = channel_volume
                              ? read_roi(in, with_channel_axis(b.write_roi, 1,
                                                               static_cast<std::int64_t>(channel)))
                              : read_roi(in, b.write_roi);
            Tensor mask = channel_volume
                              ? threshold(slab, 0, t)
                              : [&] {
                                    Tensor as_channel(prepend(1, slab.shape()), slab.dtype());
                                    std::memcpy(as_channel.data(), slab.data(), slab.byte_size());
                                    return threshold(as_channel, 0, t);
                                }();
            write_roi(out, b.write_roi, mask);
        };
        env.reports.push_back(run_blockwise(task, env.ctx, env.journal));
        env.artifacts.push_back(out.dir().string());
        return finish(env);
    }

    if (kind != "threshold_cc" && kind != "affinity_cc")
        fail(Errc::config, "config.post.kind: unknown post-processor \"" + kind + "\"");

    if (!channel_volume && dtype_is_float(in.metadata.dtype) && !post.contains("threshold"))
        fail(Errc::config, "config.post: a float input needs a threshold");

    SegmentArgs args;
    args.input = in;
    args.output = out_spec.ref;
    args.output_compressor = out_spec.compressor;
    args.write_shape = blocks.write_shape;
    args.ctx = env.ctx;
    args.scratch_dir = scratch;
    args.journal = env.journal;
    args.min_size = post.value("min_size", std::uint64_t{0});

    InstanceSegmentation result;
    if (kind == "threshold_cc") {
        check_keys(post, {"kind", "channel", "threshold", "connectivity", "min_size"}, "config.post");
        if (channel_volume) args.channel = post.value("channel", 0);
        if (post.contains("threshold")) args.threshold = post["threshold"].get<double>();
        args.connectivity = parse_connectivity(post.value("connectivity", "face"));
        result = segment_instances(args);
    } else {
        check_keys(post, {"kind", "offsets", "threshold", "min_size"}, "config.post");
        if (!channel_volume)
            fail(Errc::config, "config.post: affinity decoding needs a channel volume input");
        args.threshold = require_key(post, "threshold", "config.post").get<double>();
        std::vector<Coordinate> offsets;
        for (const auto& o : require_key(post, "offsets", "config.post"))
            offsets.push_back(coordinate_from_json(o, "config.post.offsets"));
        result = segment_affinities(args, Neighborhood::of(std::move(offsets)));
    }

    for (const auto& r : result.reports) env.reports.push_back(r);
    env.artifacts.push_back(result.output.dir().string());
    env.extra["object_count"] = result.object_count;
    return finish(env);
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

CommandOutcome cmd_evaluate(RunEnv& env) {
    check_keys(env.config, {"segmentation", "gt", "output", "record", "workers"}, "config");
    VolumeHandle seg = open_ref(env, "segmentation");
    VolumeHandle gt = open_ref(env, "gt");
    if (seg.metadata.shape != gt.metadata.shape)
        fail(Errc::config, "segmentation and gt shapes differ: " + seg.metadata.shape.to_string() +
                               " vs " + gt.metadata.shape.to_string());

    Tensor seg_data = read_roi(seg, seg.bounds());
    Tensor gt_data = read_roi(gt, gt.bounds());
    auto scores = evaluate_segmentation(gt_data, seg_data);
    env.extra["scores"] = scores;

    if (env.config.contains("output")) {
        fs::path p = env.config["output"].get<std::string>();
        if (p.is_relative()) p = env.base_dir / p;
        write_json_doc(p, json{{"scores", scores}});
        env.artifacts.push_back(p.string());
    }
    return finish(env);
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

CommandOutcome cmd_sweep(RunEnv& env) {
    check_keys(env.config,
               {"datasplit", "checkpoints", "post", "grid", "selection_metric", "output", "record",
                "workers"},
               "config");

    fs::path split_path = require_key(env.config, "datasplit", "config").get<std::string>();
    if (split_path.is_relative()) split_path = env.base_dir / split_path;
    DataSplit split = load_datasplit(split_path);
    auto validate = split.validate_rows();
    if (validate.empty()) fail(Errc::config, "datasplit has no validate rows");

    SweepRequest request;
    for (const auto& row : validate) request.gt.push_back(row.gt);

    const json& cps = require_key(env.config, "checkpoints", "config");
    if (!cps.is_array() || cps.empty()) fail(Errc::config, "config.checkpoints: expected a list");
    for (const auto& cj : cps) {
        check_keys(cj, {"iteration", "prediction", "predictions"}, "config.checkpoints[]");
        SweepCheckpoint cp;
        cp.iteration = require_key(cj, "iteration", "config.checkpoints[]").get<std::int64_t>();
        if (cj.contains("predictions")) {
            for (const auto& p : cj["predictions"])
                cp.predictions.push_back(
                    parse_volume_ref(p, env.base_dir, "config.checkpoints[].predictions"));
        } else {
            cp.predictions.push_back(parse_volume_ref(
                require_key(cj, "prediction", "config.checkpoints[]"), env.base_dir,
                "config.checkpoints[].prediction"));
        }
        if (cp.predictions.size() != validate.size())
            fail(Errc::config, "checkpoint " + std::to_string(cp.iteration) + " provides " +
                                   std::to_string(cp.predictions.size()) + " predictions for " +
                                   std::to_string(validate.size()) + " validate rows");
        request.checkpoints.push_back(std::move(cp));
    }

    const json& post = require_key(env.config, "post", "config");
    std::string kind = require_key(post, "kind", "config.post").get<std::string>();
    if (kind == "threshold_mask") {
        check_keys(post, {"kind", "channel"}, "config.post");
        request.post.kind = SweepPost::Kind::threshold_mask;
    } else if (kind == "threshold_cc") {
        check_keys(post, {"kind", "channel", "connectivity"}, "config.post");
        request.post.kind = SweepPost::Kind::threshold_cc;
        request.post.connectivity = parse_connectivity(post.value("connectivity", "face"));
    } else if (kind == "affinity_cc") {
        check_keys(post, {"kind", "offsets"}, "config.post");
        request.post.kind = SweepPost::Kind::affinity_cc;
        std::vector<Coordinate> offsets;
        for (const auto& o : require_key(post, "offsets", "config.post"))
            offsets.push_back(coordinate_from_json(o, "config.post.offsets"));
        request.post.offsets = Neighborhood::of(std::move(offsets));
    } else {
        fail(Errc::config, "config.post.kind: unknown post-processor \"" + kind + "\"");
    }
    request.post.channel = post.value("channel", 0);

    const json& grid = require_key(env.config, "grid", "config");
    if (!grid.is_object()) fail(Errc::config, "config.grid: expected an object of value lists");
    for (const auto& [name, values] : grid.items()) {
        if (!values.is_array()) fail(Errc::config, "config.grid." + name + ": expected a list");
        for (const auto& v : values) request.grid[name].push_back(v);
    }
    request.selection_metric =
        require_key(env.config, "selection_metric", "config").get<std::string>();

    SweepOutcome outcome = sweep(request);

    fs::path table_path;
    if (env.config.contains("output")) {
        fs::path p = env.config["output"].get<std::string>();
        table_path = p.is_relative() ? env.base_dir / p : p;
    } else {
        table_path = env.record_path;
        table_path.replace_extension(".scores.json");
    }
    write_json_doc(table_path, outcome.to_json());
    env.artifacts.push_back(table_path.string());

    env.extra["best"] = json{{"iteration", outcome.best.iteration},
                             {"params", outcome.best.params},
                             {"scores", outcome.best.scores}};
    env.extra["selection_metric"] = outcome.selection_metric;
    env.extra["score_table"] = table_path.string();
    return finish(env);
}

} // namespace

CommandOutcome run_command(const std::string& command, const fs::path& config_path,
                           std::optional<int> workers_override,
                           std::optional<fs::path> journal_override) {
    if (command == "target") {
        auto env = load_env(command, config_path, workers_override, journal_override,
                            {"input", "output", "task", "blocks", "workers", "record"});
        return cmd_target(env);
    }
    if (command == "predict") {
        auto env = load_env(command, config_path, workers_override, journal_override,
                            {"input", "output", "predict", "workers", "record"});
        return cmd_predict(env);
    }
    if (command == "segment") {
        auto env = load_env(command, config_path, workers_override, journal_override,
                            {"input", "output", "post", "blocks", "workers", "scratch_dir", "record"});
        return cmd_segment(env);
    }
    if (command == "evaluate") {
        auto env = load_env(command, config_path, workers_override, journal_override,
                            {"segmentation", "gt", "output", "record", "workers"});
        return cmd_evaluate(env);
    }
    if (command == "sweep") {
        auto env = load_env(command, config_path, workers_override, journal_override,
                            {"datasplit", "checkpoints", "post", "grid", "selection_metric",
                             "output", "record", "workers"});
        return cmd_sweep(env);
    }
    fail(Errc::config, "unknown command \"" + command + "\"");
}

json dataset_info(const VolumeHandle& vol) {
    const ArrayMetadata& m = vol.metadata;
    json fill;
    if (dtype_is_float(m.dtype))
        fill = m.fill_value.as<double>();
    else if (dtype_is_unsigned(m.dtype))
        fill = m.fill_value.as<std::uint64_t>();
    else
        fill = m.fill_value.as<std::int64_t>();

    json info{{"path", vol.root.string()},
              {"dataset", vol.dataset},
              {"shape", m.shape.values()},
              {"chunks", m.chunk_shape.values()},
              {"dtype", std::string(dtype_name(m.dtype))},
              {"compressor", m.compressor.kind == Compressor::none
                                 ? "none"
                                 : "gzip(level=" + std::to_string(m.compressor.level) + ")"},
              {"fill_value", fill},
              {"voxel_size", vol.attributes.voxel_size},
              {"offset", vol.attributes.offset},
              {"chunks_present", count_present_chunks(vol)},
              {"chunks_total", total_chunk_count(vol)}};
    if (!vol.attributes.axis_names.empty()) info["axes"] = vol.attributes.axis_names;
    return info;
}

} // namespace blockvol
