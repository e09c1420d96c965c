#pragma once

#include <array>
#include <functional>
#include <optional>
#include <unordered_map>

#include "blockvol/scheduler.hpp"
#include "blockvol/targets.hpp"

namespace blockvol {

/// 64-bit instance ids: block_index * 2^32 + local_id, local ids start at 1,
/// 0 is background. The 32/32 split caps blocks and per-block components at
/// 2^32 each, for 2^64 representable objects in total.
namespace instance_id {

constexpr std::uint64_t local_bits = 32;
constexpr std::uint64_t max_local = (std::uint64_t(1) << local_bits) - 1;
constexpr std::uint64_t max_block = (std::uint64_t(1) << (64 - local_bits)) - 1;

std::uint64_t encode(std::uint64_t block_index, std::uint64_t local_id);

constexpr std::uint64_t block_of(std::uint64_t id) { return id >> local_bits; }
constexpr std::uint64_t local_of(std::uint64_t id) { return id & max_local; }

} // namespace instance_id

enum class Connectivity { face, full };

const char* connectivity_name(Connectivity c);
Connectivity parse_connectivity(const std::string& name);

/// Disjoint-set forest over instance ids, union by size with path
/// compression. After finalize(), every set is represented by its minimum
/// member id and the table becomes read-only.
class EquivalenceTable {
public:
    void insert(std::uint64_t id);
    std::uint64_t find(std::uint64_t id);
    void merge(std::uint64_t a, std::uint64_t b);

    void finalize();
    bool finalized() const { return finalized_; }

    bool contains(std::uint64_t id) const { return parent_.contains(id); }
    std::size_t size() const { return parent_.size(); }

    /// Finalized representative (the set's minimum member). An id that was
    /// never inserted is a pass-1/pass-2 mismatch and a hard error.
    std::uint64_t representative(std::uint64_t id) const;

    /// Sorted (id, representative) pairs; requires finalize().
    std::vector<std::pair<std::uint64_t, std::uint64_t>> entries() const;
    /// Sorted unique representatives; requires finalize().
    std::vector<std::uint64_t> representatives() const;

private:
    std::unordered_map<std::uint64_t, std::uint64_t> parent_;
    std::unordered_map<std::uint64_t, std::uint64_t> size_;
    std::unordered_map<std::uint64_t, std::uint64_t> rep_;
    bool finalized_ = false;
};

/// Pointwise: 1 where channel value > t, else 0 (u8 mask over the spatial
/// dims of a channel volume).
Tensor threshold(const Tensor& channel_volume, std::size_t channel, double t);

struct BlockLabelResult {
    Tensor labels; // u64, encoded instance ids
    std::uint64_t id_count = 0;
    /// Per local id (1-based, index 0 is local id 1): global raster index of
    /// the component's first voxel, the block-shape-independent object order.
    std::vector<std::uint64_t> first_voxel;
    /// Per local id: voxel count within this block.
    std::vector<std::uint64_t> voxel_count;
};

/// Connected components of a binary mask within one block. Local ids are
/// assigned in raster-scan first-touch order; `local_id_start` exists so id
/// exhaustion is testable without materializing 2^32 components.
BlockLabelResult label_block(const Tensor& mask, const Roi& write_roi, const Coordinate& volume_shape,
                             std::uint64_t block_index, Connectivity connectivity,
                             std::uint64_t local_id_start = 1);

/// Affinity-graph components within one block: voxels u and u + offset_k
/// are connected iff affinity channel k at u exceeds t. Offsets must be
/// unit axis offsets. `affs` covers read_roi (write_roi grown by one voxel);
/// edges leaving `bounds` are ignored. A voxel with no incident edge is
/// background.
BlockLabelResult label_block_affinities(const Tensor& affs, const Roi& read_roi, const Roi& write_roi,
                                        const Roi& bounds, const Neighborhood& offsets, double t,
                                        std::uint64_t block_index, std::uint64_t local_id_start = 1);

struct BoundaryPlanes {
    Tensor labels;                  // u64, write shape with one axis collapsed to 1
    std::optional<Tensor> aff_out;  // f32, affinity of the channel crossing outward
};

/// The one-voxel-thick label slabs on every face of a block, plus the
/// id bookkeeping pass 2 needs. Persisted one record file per block.
struct BlockBoundary {
    std::uint64_t block_index = 0;
    Roi write_roi;
    std::uint64_t id_count = 0;
    std::vector<std::uint64_t> first_voxel;
    std::vector<std::uint64_t> voxel_count;
    std::vector<std::array<BoundaryPlanes, 2>> faces; // [axis][0 = low, 1 = high]
};

/// Extracts boundary planes from a labeled block. For affinity decoding,
/// pass the read-roi affinity tensor and offsets so the crossing affinity
/// values ride along.
BlockBoundary extract_boundary(const BlockLabelResult& result, const Roi& write_roi,
                               const Tensor* affs = nullptr, const Roi* read_roi = nullptr,
                               const Neighborhood* offsets = nullptr);

void write_block_record(const std::filesystem::path& dir, const BlockBoundary& boundary);
BlockBoundary read_block_record(const std::filesystem::path& dir, std::uint64_t block_index);
std::filesystem::path block_record_path(const std::filesystem::path& dir, std::uint64_t block_index);

/// Unifies ids across all block faces: voxels on opposite sides of a face
/// that are connected under the given connectivity (or by a crossing
/// affinity edge above `affinity_threshold`, when affinity planes are
/// present) are unioned. Every id of every block is seeded, and the table
/// is finalized to min-representative form.
EquivalenceTable merge_faces(const std::vector<BlockBoundary>& boundaries, const BlockSpec& spec,
                             Connectivity connectivity,
                             std::optional<double> affinity_threshold = {});

/// rep -> dense id (1..K), ordered by each object's first voxel in global
/// raster order; this makes compacted outputs identical across block shapes.
std::unordered_map<std::uint64_t, std::uint64_t> compaction_by_first_voxel(
    const EquivalenceTable& table, const std::vector<BlockBoundary>& boundaries);

/// rep -> dense id (1..K) by ascending representative id.
std::unordered_map<std::uint64_t, std::uint64_t> compaction_by_representative(
    const EquivalenceTable& table);

/// Replaces every nonzero id by its representative, then through `remap`
/// when given. Ids missing from the table are a hard error; background is
/// never touched.
void relabel_tensor(Tensor& labels, const EquivalenceTable& table,
                    const std::unordered_map<std::uint64_t, std::uint64_t>* remap = nullptr);

/// Blockwise relabel of a u64 label volume. `compact` remaps representatives
/// to 1..K by ascending representative id.
RunReport relabel_blockwise(const VolumeHandle& labels, const EquivalenceTable& table, bool compact,
                            const Coordinate& write_shape, const ExecutionContext& ctx);

struct SegmentArgs {
    VolumeHandle input;
    /// Channel of a (C, spatial...) prediction volume; unset when the input
    /// has no channel axis.
    std::optional<std::size_t> channel;
    /// Binarize input > threshold; unset treats nonzero voxels as foreground.
    std::optional<double> threshold;
    Connectivity connectivity = Connectivity::face;
    bool compact = true;
    std::uint64_t min_size = 0;
    VolumeRef output;
    CompressorSpec output_compressor;
    Coordinate write_shape;
    ExecutionContext ctx;
    std::filesystem::path scratch_dir;
    std::optional<std::filesystem::path> journal;
    int max_retries = 2;
};

struct InstanceSegmentation {
    VolumeHandle output;
    std::vector<RunReport> reports;
    std::uint64_t object_count = 0;
};

/// Three-stage instance segmentation: per-block labeling, face merging in
/// the orchestrator, blockwise relabel. The result equals whole-volume
/// connected components up to (compacted: including) label numbering.
InstanceSegmentation segment_instances(const SegmentArgs& args);

/// Same pipeline over an affinity graph; `offsets` must be unit offsets
/// matching the input's affinity channels.
InstanceSegmentation segment_affinities(const SegmentArgs& args, const Neighborhood& offsets);

/// Whole-volume connected components in memory (single-block pipeline plus
/// first-voxel compaction): labels are 1..K in raster order of each
/// component's first voxel.
Tensor label_volume(const Tensor& mask, Connectivity connectivity);

/// Whole-volume affinity decoding in memory.
Tensor decode_affinities(const Tensor& affs, const Neighborhood& offsets, double t);

/// Removes components smaller than min_size voxels (in memory).
void size_filter_tensor(Tensor& labels, std::uint64_t min_size);

/// Blockwise size filter: per-block counts reduced globally, then a rewrite
/// pass. Surviving ids keep their values.
std::vector<RunReport> size_filter_blockwise(const VolumeHandle& labels, std::uint64_t min_size,
                                             const Coordinate& write_shape,
                                             const ExecutionContext& ctx,
                                             const std::filesystem::path& scratch_dir);

} // namespace blockvol
