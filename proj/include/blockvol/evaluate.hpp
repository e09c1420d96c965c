#pragma once

#include <map>
#include <optional>
#include <unordered_map>

#include "blockvol/postprocess.hpp"

namespace blockvol {

/// Sparse joint label-count table between a ground-truth and a predicted
/// labeling, with marginals. The basis for VoI.
struct ContingencyTable {
    struct PairHash {
        std::size_t operator()(const std::pair<std::uint64_t, std::uint64_t>& p) const {
            std::uint64_t x = p.first * 0x9e3779b97f4a7c15ULL ^ p.second;
            x ^= x >> 33;
            x *= 0xff51afd7ed558ccdULL;
            x ^= x >> 33;
            return static_cast<std::size_t>(x);
        }
    };

    std::unordered_map<std::pair<std::uint64_t, std::uint64_t>, std::uint64_t, PairHash> counts;
    std::unordered_map<std::uint64_t, std::uint64_t> marginal_a; // ground truth side
    std::unordered_map<std::uint64_t, std::uint64_t> marginal_b; // prediction side
    std::uint64_t n = 0;
};

/// Joint counts over all voxels. With ignore_background, voxels where BOTH
/// labelings are 0 are excluded; a voxel that is 0 on exactly one side still
/// counts, with 0 as a real segment.
ContingencyTable contingency(const Tensor& gt, const Tensor& pred, bool ignore_background);

struct VoiScores {
    double split = 0;  // H(pred | gt): over-segmentation
    double merge = 0;  // H(gt | pred): under-segmentation
    double total = 0;  // split + merge
};

/// Variation of information in bits (log base 2).
VoiScores voi(const ContingencyTable& table);

struct OverlapScores {
    double dice = 0;
    double jaccard = 0;
    double f1 = 0;
    double precision = 0;
    double recall = 0;
    std::uint64_t tp = 0, fp = 0, fn = 0;
};

/// Voxel-overlap metrics of two binary masks (nonzero = foreground).
/// Empty-vs-empty is defined as perfect (all 1.0).
OverlapScores overlap_metrics(const Tensor& gt_mask, const Tensor& pred_mask);

enum class MetricOrientation { higher_better, lower_better };

/// The supported selection metrics: dice, jaccard, f1, precision, recall,
/// voi_split, voi_merge, voi_total.
MetricOrientation metric_orientation(const std::string& name);
bool is_overlap_metric(const std::string& name);

struct DataSplitRow {
    enum class Usage { train, validate };
    Usage usage = Usage::train;
    VolumeRef raw;
    VolumeRef gt;
    std::map<std::string, std::string> extra; // unknown columns, preserved
};

struct DataSplit {
    std::vector<DataSplitRow> rows;

    std::vector<DataSplitRow> validate_rows() const;
};

/// Parses the datasplit CSV (header row required; columns usage, raw_path,
/// raw_dataset, gt_path, gt_dataset; RFC-4180 quoting). Paths resolve
/// relative to base_dir. Errors name the offending line.
DataSplit parse_datasplit(const std::string& csv_text, const std::filesystem::path& base_dir);

DataSplit load_datasplit(const std::filesystem::path& csv_path);

/// Post-processing applied to each sweep cell, in memory at validation
/// scale.
struct SweepPost {
    enum class Kind { threshold_mask, threshold_cc, affinity_cc };
    Kind kind = Kind::threshold_mask;
    std::size_t channel = 0;
    Connectivity connectivity = Connectivity::face;
    Neighborhood offsets; // affinity_cc
};

struct SweepCheckpoint {
    std::int64_t iteration = 0;
    /// Prediction volumes aligned with the ground-truth refs, one per
    /// validate row.
    std::vector<VolumeRef> predictions;
};

struct SweepRequest {
    std::vector<SweepCheckpoint> checkpoints;
    std::vector<VolumeRef> gt; // one per validate row
    SweepPost post;
    /// Parameter grid: name -> candidate values ("threshold" is required,
    /// "min_size" optional).
    std::map<std::string, std::vector<nlohmann::json>> grid;
    std::string selection_metric = "dice";
};

struct SweepCell {
    std::int64_t iteration = 0;
    std::map<std::string, nlohmann::json> params;
    std::map<std::string, double> scores; // averaged over validate rows
    std::string status = "ok";            // "ok" or "error"
    std::string error;
};

struct SweepOutcome {
    std::vector<SweepCell> cells;
    SweepCell best;
    std::string selection_metric;

    nlohmann::json to_json() const;
};

/// Evaluates every (checkpoint, parameter) cell and selects the best by the
/// selection metric; ties break to the earlier checkpoint, then the
/// lexicographically smaller parameter tuple. Failed cells are recorded and
/// excluded; all cells failing is an error.
SweepOutcome sweep(const SweepRequest& request);

/// Both metric families of a segmentation against ground truth: overlap of
/// the foreground masks plus VoI of the partitions (background ignored).
std::map<std::string, double> evaluate_segmentation(const Tensor& gt, const Tensor& seg);

} // namespace blockvol
