#pragma once

#include <optional>

#include "blockvol/scheduler.hpp"
#include "blockvol/targets.hpp"

namespace blockvol {

/// A predictor is a per-block function with a declared context (halo)
/// requirement; neural-network inference is represented by the oracle and
/// external kinds, which keeps any DL runtime out of the engine.
struct PredictorSpec {
    enum class Kind { identity, gaussian, oracle_task, external };

    Kind kind = Kind::identity;
    double sigma = 0; // gaussian, world units

    // oracle_task: encode a ground-truth dataset, optionally with seeded
    // Gaussian noise clamped to the encoding's valid range.
    TargetSpec task;
    std::optional<VolumeRef> gt; // defaults to the run input
    double noise_std = 0;
    std::uint64_t seed = 0;

    std::optional<ExternalWorkerSpec> external;
    std::size_t external_channels = 1;

    /// Declared halo, voxels per side. Unset means "use min_context".
    std::optional<Coordinate> context;

    static PredictorSpec from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
    nlohmann::json to_json() const;

    std::size_t channel_count(std::size_t ndim) const;

    /// Smallest context that makes blockwise output equal whole-volume
    /// output. For gaussian this is ceil(3 * sigma / voxel_size) per axis;
    /// signed-distance oracles have no finite bound and return zeros (their
    /// tanh saturation makes far distances immaterial).
    Coordinate min_context(std::size_t ndim, const std::vector<double>& voxel_size) const;

    /// The context actually used: the declared one, else min_context.
    Coordinate effective_context(std::size_t ndim, const std::vector<double>& voxel_size) const;
};

/// Applies the predictor to one block. `input` covers `input_roi`: the full
/// read ROI for identity/gaussian (fill-padded by the store), the read ROI
/// clipped to the volume bounds for oracle tasks (distances never see
/// virtual background outside the volume). Returns a channel tensor over
/// block.write_roi; cropping is the harness's job, not the predictor's.
Tensor predict_block(const PredictorSpec& pred, const Tensor& input, const Roi& input_roi,
                     const Block& block, const std::vector<double>& voxel_size);

struct PredictRun {
    VolumeHandle input;
    VolumeRef output;
    CompressorSpec output_compressor;
    Coordinate write_shape;
    PredictorSpec predictor;
    ExecutionContext ctx;
    std::optional<std::filesystem::path> journal;
    /// The negative-control escape hatch: when false, an under-declared
    /// context is allowed through instead of rejected.
    bool enforce_context = true;
    int max_retries = 2;
};

struct PredictResult {
    RunReport report;
    VolumeHandle output;
};

/// Creates the output dataset (leading channel axis, chunks equal to the
/// write shape) and runs the predictor over every block of the input.
PredictResult run_predict(const PredictRun& run);

} // namespace blockvol
