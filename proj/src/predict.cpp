#include "blockvol/predict.hpp"

#include <cmath>
#include <random>

namespace blockvol {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Coordinate with_channels(const Coordinate& spatial, std::int64_t channels) {
    std::vector<std::int64_t> s;
    s.reserve(spatial.ndim() + 1);
    s.push_back(channels);
    s.insert(s.end(), spatial.begin(), spatial.end());
    return Coordinate(std::move(s));
}

/// Separable truncated-Gaussian smoothing; values outside the tensor count
/// as zero (the read block is already fill-padded to the declared context).
Tensor gaussian_smooth(const Tensor& input, double sigma, const std::vector<double>& voxel_size) {
    const std::size_t d = input.ndim();
    const Coordinate& shape = input.shape();
    std::vector<double> data = to_f64(input);
    std::vector<double> next(data.size());

    std::vector<std::size_t> stride(d);
    stride[d - 1] = 1;
    for (std::size_t a = d - 1; a-- > 0;)
        stride[a] = stride[a + 1] * static_cast<std::size_t>(shape[a + 1]);

    for (std::size_t axis = 0; axis < d; ++axis) {
        const int len = static_cast<int>(shape[axis]);
        const int radius = static_cast<int>(std::ceil(3.0 * sigma / voxel_size[axis]));
        std::vector<double> kernel(2 * radius + 1);
        double sum = 0;
        for (int k = -radius; k <= radius; ++k) {
            double x = k * voxel_size[axis];
            kernel[k + radius] = std::exp(-x * x / (2.0 * sigma * sigma));
            sum += kernel[k + radius];
        }
        for (auto& w : kernel) w /= sum;

        Coordinate p = Coordinate::zeros(d);
        while (true) {
            std::size_t base = 0;
            for (std::size_t a = 0; a < d; ++a) base += static_cast<std::size_t>(p[a]) * stride[a];
            for (int i = 0; i < len; ++i) {
                double acc = 0;
                for (int k = -radius; k <= radius; ++k) {
                    int j = i + k;
                    if (j < 0 || j >= len) continue;
                    acc += kernel[k + radius] * data[base + static_cast<std::size_t>(j) * stride[axis]];
                }
                next[base + static_cast<std::size_t>(i) * stride[axis]] = acc;
            }
            std::size_t a = d;
            bool done = true;
            while (a-- > 0) {
                if (a == axis) {
                    if (a == 0) break;
                    continue;
                }
                if (++p[a] < shape[a]) {
                    done = false;
                    break;
                }
                p[a] = 0;
                if (a == 0) break;
            }
            if (done) break;
        }
        std::swap(data, next);
    }

    Tensor out(shape, Dtype::f32);
    auto ov = out.view<float>();
    for (std::size_t i = 0; i < data.size(); ++i) ov[i] = static_cast<float>(data[i]);
    return out;
}

Tensor to_f32(const Tensor& t) {
    if (t.dtype() == Dtype::f32) return t;
    Tensor out(t.shape(), Dtype::f32);
    auto data = to_f64(t);
    auto ov = out.view<float>();
    for (std::size_t i = 0; i < data.size(); ++i) ov[i] = static_cast<float>(data[i]);
    return out;
}

Tensor add_channel_axis(Tensor spatial) {
    Tensor out(with_channels(spatial.shape(), 1), spatial.dtype());
    std::memcpy(out.data(), spatial.data(), spatial.byte_size());
    return out;
}

Roi channel_roi(const Roi& spatial, std::int64_t channels) {
    std::vector<std::int64_t> off{0}, shp{channels};
    off.insert(off.end(), spatial.offset.begin(), spatial.offset.end());
    shp.insert(shp.end(), spatial.shape.begin(), spatial.shape.end());
    return Roi(Coordinate(std::move(off)), Coordinate(std::move(shp)));
}

} // namespace

PredictorSpec PredictorSpec::from_json(const json& j, const fs::path& base_dir) {
    if (!j.is_object() || !j.contains("kind")) fail(Errc::config, "predict: missing \"kind\"");
    std::string kind = j["kind"].get<std::string>();

    PredictorSpec spec;
    if (kind == "identity") {
        spec.kind = Kind::identity;
    } else if (kind == "gaussian") {
        spec.kind = Kind::gaussian;
        if (!j.contains("sigma")) fail(Errc::config, "predict kind \"gaussian\": missing \"sigma\"");
        spec.sigma = j["sigma"].get<double>();
        if (!(spec.sigma > 0)) fail(Errc::config, "predict: sigma must be positive");
    } else if (kind == "oracle_task") {
        spec.kind = Kind::oracle_task;
        if (!j.contains("task")) fail(Errc::config, "predict kind \"oracle_task\": missing \"task\"");
        spec.task = TargetSpec::from_json(j["task"]);
        if (j.contains("gt")) {
            const json& g = j["gt"];
            if (!g.contains("path") || !g.contains("dataset"))
                fail(Errc::config, "predict.gt: needs \"path\" and \"dataset\"");
            spec.gt = VolumeRef{base_dir / g["path"].get<std::string>(), g["dataset"].get<std::string>()};
        }
        spec.noise_std = j.value("noise_std", 0.0);
        if (spec.noise_std < 0) fail(Errc::config, "predict: noise_std must be non-negative");
        spec.seed = j.value("seed", std::uint64_t(0));
    } else if (kind == "external") {
        spec.kind = Kind::external;
        if (!j.contains("command") || !j["command"].is_array() || j["command"].empty())
            fail(Errc::config, "predict kind \"external\": missing \"command\" list");
        ExternalWorkerSpec ext;
        for (const auto& arg : j["command"]) ext.command.push_back(arg.get<std::string>());
        if (j.contains("env"))
            for (const auto& [k, v] : j["env"].items()) ext.env.emplace_back(k, v.get<std::string>());
        spec.external = std::move(ext);
        if (!j.contains("channels"))
            fail(Errc::config, "predict kind \"external\": missing \"channels\"");
        spec.external_channels = j["channels"].get<std::size_t>();
    } else {
        fail(Errc::config, "unknown predict kind \"" + kind + "\"");
    }
    if (j.contains("context"))
        spec.context = coordinate_from_json(j["context"], "predict.context");
    return spec;
}

json PredictorSpec::to_json() const {
    json j;
    switch (kind) {
        case Kind::identity: j["kind"] = "identity"; break;
        case Kind::gaussian:
            j["kind"] = "gaussian";
            j["sigma"] = sigma;
            break;
        case Kind::oracle_task:
            j["kind"] = "oracle_task";
            j["task"] = task.to_json();
            if (gt) j["gt"] = {{"path", gt->root.string()}, {"dataset", gt->dataset}};
            j["noise_std"] = noise_std;
            j["seed"] = seed;
            break;
        case Kind::external: {
            j["kind"] = "external";
            j["command"] = external->command;
            j["channels"] = external_channels;
            if (!external->env.empty()) {
                json env;
                for (const auto& [k, v] : external->env) env[k] = v;
                j["env"] = env;
            }
            break;
        }
    }
    if (context) j["context"] = coordinate_to_json(*context);
    return j;
}

std::size_t PredictorSpec::channel_count(std::size_t ndim) const {
    switch (kind) {
        case Kind::identity:
        case Kind::gaussian: return 1;
        case Kind::oracle_task: return task.channel_count(ndim);
        case Kind::external: return external_channels;
    }
    return 1;
}

Coordinate PredictorSpec::min_context(std::size_t ndim, const std::vector<double>& voxel_size) const {
    switch (kind) {
        case Kind::identity: return Coordinate::zeros(ndim);
        case Kind::gaussian: {
            Coordinate c = Coordinate::zeros(ndim);
            for (std::size_t a = 0; a < ndim; ++a)
                c[a] = static_cast<std::int64_t>(std::ceil(3.0 * sigma / voxel_size[a]));
            return c;
        }
        case Kind::oracle_task:
            return task.min_context(ndim, voxel_size).value_or(Coordinate::zeros(ndim));
        case Kind::external: return context.value_or(Coordinate::zeros(ndim));
    }
    return Coordinate::zeros(ndim);
}

Coordinate PredictorSpec::effective_context(std::size_t ndim,
                                            const std::vector<double>& voxel_size) const {
    return context.value_or(min_context(ndim, voxel_size));
}

Tensor predict_block(const PredictorSpec& pred, const Tensor& input, const Roi& input_roi,
                     const Block& block, const std::vector<double>& voxel_size) {
    if (input.shape() != input_roi.shape)
        fail(Errc::invalid_argument, "predict_block: input tensor does not match its roi");

    switch (pred.kind) {
        case PredictorSpec::Kind::identity:
            return add_channel_axis(to_f32(crop_world(input, input_roi, block.write_roi)));

        case PredictorSpec::Kind::gaussian: {
            Tensor smoothed = gaussian_smooth(input, pred.sigma, voxel_size);
            return add_channel_axis(crop_world(smoothed, input_roi, block.write_roi));
        }

        case PredictorSpec::Kind::oracle_task: {
            Tensor encoded = make_target(pred.task, input, voxel_size);
            std::int64_t channels = static_cast<std::int64_t>(encoded.shape()[0]);
            Tensor out = crop_world(encoded, channel_roi(input_roi, channels),
                                    channel_roi(block.write_roi, channels));
            if (pred.noise_std > 0) {
                std::mt19937_64 rng(splitmix64(pred.seed ^ splitmix64(block.block_index)));
                std::normal_distribution<double> noise(0.0, pred.noise_std);
                auto v = out.view<float>();
                const std::size_t n = v.size() / static_cast<std::size_t>(channels);
                for (std::int64_t c = 0; c < channels; ++c) {
                    auto [lo, hi] = pred.task.channel_range(static_cast<std::size_t>(c),
                                                            input_roi.ndim());
                    float* ch = v.data() + static_cast<std::size_t>(c) * n;
                    for (std::size_t i = 0; i < n; ++i)
                        ch[i] = static_cast<float>(
                            std::clamp(static_cast<double>(ch[i]) + noise(rng), lo, hi));
                }
            }
            return out;
        }

        case PredictorSpec::Kind::external:
            fail(Errc::invalid_argument, "external predictors run as worker subprocesses");
    }
    fail(Errc::invalid_argument, "unknown predictor kind");
}

PredictResult run_predict(const PredictRun& run) {
    const std::size_t d = run.input.ndim();
    const std::vector<double>& vs = run.input.attributes.voxel_size;
    check_same_ndim(run.write_shape, run.input.metadata.shape, "predict write shape");

    const PredictorSpec& pred = run.predictor;
    Coordinate context = pred.effective_context(d, vs);
    if (run.enforce_context) {
        Coordinate need = pred.min_context(d, vs);
        for (std::size_t a = 0; a < d; ++a)
            if (context[a] < need[a])
                fail(Errc::config, "declared context " + context.to_string() +
                                       " is below the predictor's requirement " + need.to_string());
    }

    const std::int64_t channels = static_cast<std::int64_t>(pred.channel_count(d));
    ArrayMetadata out_meta;
    out_meta.shape = with_channels(run.input.metadata.shape, channels);
    out_meta.chunk_shape = with_channels(run.write_shape, channels);
    out_meta.dtype = Dtype::f32;
    out_meta.fill_value = Scalar(0.0);
    out_meta.compressor = run.output_compressor;

    VolumeAttributes out_attrs;
    out_attrs.voxel_size.assign(1, 1.0);
    out_attrs.voxel_size.insert(out_attrs.voxel_size.end(), vs.begin(), vs.end());
    out_attrs.offset.assign(1, 0.0);
    out_attrs.offset.insert(out_attrs.offset.end(), run.input.attributes.offset.begin(),
                            run.input.attributes.offset.end());

    VolumeHandle out = ensure_dataset(run.output.root, run.output.dataset, out_meta, out_attrs);

    BlockTask task;
    task.name = "predict";
    task.block_spec = {run.input.bounds(), run.write_shape, context, FitPolicy::shrink};
    task.inputs = {run.input};
    task.outputs = {out};
    task.max_retries = run.max_retries;

    if (pred.kind == PredictorSpec::Kind::external) {
        task.external_worker = pred.external;
    } else {
        VolumeHandle in = run.input;
        VolumeHandle source = in;
        if (pred.kind == PredictorSpec::Kind::oracle_task && pred.gt)
            source = open_dataset(*pred.gt);
        PredictorSpec worker_pred = pred;
        std::vector<double> worker_vs = vs;
        task.worker = [worker_pred, source, out, worker_vs, channels](const Block& b) {
            Roi input_roi = b.read_roi;
            if (worker_pred.kind == PredictorSpec::Kind::oracle_task)
                input_roi = input_roi.intersect(source.bounds());
            Tensor input = read_roi(source, input_roi);
            Tensor result = predict_block(worker_pred, input, input_roi, b, worker_vs);
            write_roi(out, channel_roi(b.write_roi, channels), result);
        };
    }

    RunReport report = run_blockwise(task, run.ctx, run.journal);
    return {std::move(report), std::move(out)};
}

} // namespace blockvol
