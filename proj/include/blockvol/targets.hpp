#pragma once

#include <optional>
#include <vector>

#include "blockvol/json_io.hpp"
#include "blockvol/tensor.hpp"

namespace blockvol {

/// Ordered, distinct, nonzero integer voxel offsets.
struct Neighborhood {
    std::vector<Coordinate> offsets;

    static Neighborhood of(std::vector<Coordinate> offsets);
    std::size_t size() const { return offsets.size(); }
};

/// Channel k is 1.0 where label == class_ids[k], else 0.0. Output has a
/// leading channel axis; all encoders here produce f32.
Tensor one_hot(const Tensor& labels, const std::vector<std::uint64_t>& class_ids);

/// tanh(d / scale) of the signed Euclidean center-to-center distance to the
/// nearest voxel of the opposite binary class, in world units via
/// voxel_size; positive inside the class mask. A volume entirely one class
/// saturates to +/-1. Without class_id, the mask is label != 0.
Tensor signed_distance(const Tensor& labels, std::optional<std::uint64_t> class_id,
                       const std::vector<double>& voxel_size, double scale);

/// one_hot channels followed by per-class signed_distance channels.
Tensor hot_distance(const Tensor& labels, const std::vector<std::uint64_t>& class_ids,
                    const std::vector<double>& voxel_size, double scale);

/// Channel k at voxel v is 1.0 iff labels[v] != 0, v + offset_k is in
/// bounds, and labels[v + offset_k] == labels[v]. Edges never cross
/// background.
Tensor affinities(const Tensor& labels, const Neighborhood& nbhd);

/// Per-voxel statistics of the same-label neighborhood under a truncated
/// Gaussian window (truncation radius 3*sigma, world units): mean offset
/// (d channels, normalized by 3*sigma), second central moments (d diagonal
/// channels normalized by (3*sigma)^2, then d*(d-1)/2 off-diagonal channels
/// shifted to [0,1] via (x+1)/2), and the window-weight fraction of
/// same-label voxels. Background voxels are all-zero.
Tensor local_shape_descriptors(const Tensor& labels, double sigma,
                               const std::vector<double>& voxel_size);

constexpr std::size_t lsd_channel_count(std::size_t ndim) {
    return 2 * ndim + ndim * (ndim - 1) / 2 + 1;
}

/// Exact squared Euclidean distance to the nearest seed voxel, in world
/// units, by the separable lower-envelope transform. Seeds are voxels where
/// `seed` is true; voxels with no seed anywhere are +infinity.
std::vector<double> squared_distance_transform(const std::vector<bool>& seed,
                                               const Coordinate& shape,
                                               const std::vector<double>& voxel_size);

enum class TargetKind { one_hot, signed_distance, hot_distance, affinities, lsd };

const char* target_kind_name(TargetKind kind);

struct TargetSpec {
    TargetKind kind = TargetKind::one_hot;
    std::vector<std::uint64_t> class_ids;     // one_hot, hot_distance
    std::optional<std::uint64_t> class_id;    // signed_distance
    double scale = 0;                         // signed_distance, hot_distance
    double sigma = 0;                         // lsd
    Neighborhood neighborhood;                // affinities

    /// Parses {"kind": "signed_distance", "class_id": 1, "scale": 10.0} and
    /// friends; missing parameters are config errors naming the key.
    static TargetSpec from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    std::size_t channel_count(std::size_t ndim) const;

    /// Valid output range of a channel, used to clamp noisy oracle
    /// predictions.
    std::pair<double, double> channel_range(std::size_t channel, std::size_t ndim) const;

    /// Halo needed for blockwise evaluation to be exact. Signed distances
    /// have no finite bound (far values saturate under tanh), so they
    /// return nothing and callers choose a context.
    std::optional<Coordinate> min_context(std::size_t ndim,
                                          const std::vector<double>& voxel_size) const;
};

/// Uniform dispatch over the encoders above.
Tensor make_target(const TargetSpec& spec, const Tensor& labels,
                   const std::vector<double>& voxel_size);

} // namespace blockvol
