#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "blockvol/tensor.hpp"

namespace blockvol {

enum class Compressor : std::uint8_t { none, gzip };

struct CompressorSpec {
    Compressor kind = Compressor::none;
    int level = 5; // gzip only, 1-9
};

/// On-disk array description, a Zarr-V2 subset: C order, little-endian,
/// raw or gzip chunks.
struct ArrayMetadata {
    Coordinate shape;
    Coordinate chunk_shape;
    Dtype dtype = Dtype::u8;
    Scalar fill_value;
    CompressorSpec compressor;

    std::size_t ndim() const { return shape.ndim(); }
};

/// World calibration carried in the attributes document: nanometers per
/// voxel and the world origin of voxel (0, ..., 0).
struct VolumeAttributes {
    std::vector<double> voxel_size; // > 0 per axis
    std::vector<double> offset;
    std::vector<std::string> axis_names; // optional, empty means unset

    static VolumeAttributes defaults(std::size_t ndim) {
        return {std::vector<double>(ndim, 1.0), std::vector<double>(ndim, 0.0), {}};
    }
};

/// A chunked on-disk dataset. Plain value type; all I/O goes through the
/// free functions below, which open and close files per call. Concurrent
/// reads are always safe; concurrent writes are safe iff the writers' ROIs
/// touch disjoint chunk sets — the scheduler guarantees this, the store
/// performs no locking.
struct VolumeHandle {
    std::filesystem::path root;
    std::string dataset;
    ArrayMetadata metadata;
    VolumeAttributes attributes;

    std::filesystem::path dir() const { return root / dataset; }
    std::size_t ndim() const { return metadata.ndim(); }
    /// Voxel-space bounds: offset zero, the metadata shape.
    Roi bounds() const { return Roi(Coordinate::zeros(ndim()), metadata.shape); }
};

/// Path + dataset name, the form volume references take in configs.
struct VolumeRef {
    std::filesystem::path root;
    std::string dataset;
};

bool dataset_exists(const std::filesystem::path& root, const std::string& name);

VolumeHandle create_dataset(const std::filesystem::path& root, const std::string& name,
                            const ArrayMetadata& metadata, const VolumeAttributes& attributes,
                            bool overwrite = false);

/// create_dataset, except an existing dataset with identical metadata is
/// reused as-is. Journaled reruns must not wipe the blocks they are about
/// to skip.
VolumeHandle ensure_dataset(const std::filesystem::path& root, const std::string& name,
                            const ArrayMetadata& metadata, const VolumeAttributes& attributes);

bool metadata_equal(const ArrayMetadata& a, const ArrayMetadata& b);

VolumeHandle open_dataset(const std::filesystem::path& root, const std::string& name);

inline VolumeHandle open_dataset(const VolumeRef& ref) { return open_dataset(ref.root, ref.dataset); }

/// Dense tensor of roi.shape. The roi may extend outside the array bounds;
/// out-of-bounds voxels and voxels in absent chunks read as fill_value.
Tensor read_roi(const VolumeHandle& vol, const Roi& roi);

/// Writes exactly the voxels in roi; partial-chunk writes read-modify-write
/// the affected chunks. The roi must lie within the array bounds.
void write_roi(const VolumeHandle& vol, const Roi& roi, const Tensor& data);

/// write_roi for overhanging blocks: silently clips roi (and the matching
/// region of data) to the array bounds.
void write_roi_clipped(const VolumeHandle& vol, const Roi& roi, const Tensor& data);

/// Chunk file name for a chunk grid index, e.g. "0.1.2".
std::string chunk_key(const Coordinate& chunk_index);

std::size_t count_present_chunks(const VolumeHandle& vol);
std::size_t total_chunk_count(const VolumeHandle& vol);

std::vector<std::byte> gzip_compress(std::span<const std::byte> input, int level);
std::vector<std::byte> gzip_decompress(std::span<const std::byte> input);

/// Writes bytes to a temporary file in the same directory, then renames it
/// into place.
void atomic_write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

} // namespace blockvol
