#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "blockvol/errors.hpp"

namespace blockvol {

/// Signed integer voxel offsets and extents. All elementwise operations
/// require operands of equal dimensionality; mismatched lengths are an
/// error, never a silent broadcast.
class Coordinate {
public:
    Coordinate() = default;
    Coordinate(std::initializer_list<std::int64_t> dims) : dims_(dims) {}
    explicit Coordinate(std::vector<std::int64_t> dims) : dims_(std::move(dims)) {}

    static Coordinate filled(std::size_t ndim, std::int64_t value) {
        return Coordinate(std::vector<std::int64_t>(ndim, value));
    }
    static Coordinate zeros(std::size_t ndim) { return filled(ndim, 0); }
    static Coordinate ones(std::size_t ndim) { return filled(ndim, 1); }

    std::size_t ndim() const { return dims_.size(); }
    std::int64_t operator[](std::size_t axis) const { return dims_[axis]; }
    std::int64_t& operator[](std::size_t axis) { return dims_[axis]; }

    auto begin() const { return dims_.begin(); }
    auto end() const { return dims_.end(); }
    const std::vector<std::int64_t>& values() const { return dims_; }

    /// Product of all components.
    std::int64_t product() const;

    bool all_ge(std::int64_t value) const;
    bool all_gt(std::int64_t value) const;

    std::string to_string() const;

private:
    std::vector<std::int64_t> dims_;
};

void check_same_ndim(const Coordinate& a, const Coordinate& b, const char* what);

bool operator==(const Coordinate& a, const Coordinate& b);
bool operator!=(const Coordinate& a, const Coordinate& b);
Coordinate operator+(const Coordinate& a, const Coordinate& b);
Coordinate operator-(const Coordinate& a, const Coordinate& b);
Coordinate operator-(const Coordinate& a);
Coordinate operator*(const Coordinate& a, const Coordinate& b);
Coordinate operator*(const Coordinate& a, std::int64_t s);

Coordinate elementwise_min(const Coordinate& a, const Coordinate& b);
Coordinate elementwise_max(const Coordinate& a, const Coordinate& b);
Coordinate elementwise_max(const Coordinate& a, std::int64_t s);

/// Flooring / ceiling division, elementwise. Divisors must be positive.
Coordinate floor_div(const Coordinate& a, const Coordinate& b);
Coordinate ceil_div(const Coordinate& a, const Coordinate& b);

/// Axis-aligned region of interest in integer voxel coordinates.
/// offset is the inclusive begin, end = offset + shape is exclusive.
/// Any shape component of zero makes the ROI empty; that is a valid state.
struct Roi {
    Coordinate offset;
    Coordinate shape;

    Roi() = default;
    Roi(Coordinate offset_, Coordinate shape_);

    std::size_t ndim() const { return offset.ndim(); }
    Coordinate end() const { return offset + shape; }
    bool empty() const;
    /// Number of voxels covered.
    std::int64_t size() const { return empty() ? 0 : shape.product(); }
    bool contains(const Coordinate& p) const;
    bool contains(const Roi& other) const;

    /// Offset decreased by `by`, shape increased by 2*`by` per axis.
    /// Negative `by` shrinks; the shape clamps at zero.
    Roi grown(const Coordinate& by) const;

    /// Maximal ROI contained in both; empty if disjoint.
    Roi intersect(const Roi& other) const;

    std::string to_string() const;
};

bool operator==(const Roi& a, const Roi& b);
bool operator!=(const Roi& a, const Roi& b);

enum class SnapMode { expand, contract };

/// Smallest grid-aligned ROI containing `roi` (expand) or largest
/// grid-aligned ROI contained in it (contract). Empty ROIs are returned
/// unchanged under expand.
Roi snap_roi(const Roi& roi, const Coordinate& grid, SnapMode mode);

/// Rule for a total ROI that is not an exact multiple of the block write
/// shape: overhang keeps full-size write ROIs that get clipped at write
/// time, shrink truncates the trailing write ROIs, strict rejects the
/// block grid outright.
enum class FitPolicy { overhang, shrink, strict };

const char* fit_policy_name(FitPolicy fit);

struct BlockSpec {
    Roi total_roi;
    Coordinate write_shape;
    Coordinate context;
    FitPolicy fit = FitPolicy::shrink;
};

/// One unit of blockwise work. The read ROI is the write ROI grown by the
/// task context; the block index is dense and row-major over the write grid.
struct Block {
    std::uint64_t block_index = 0;
    Roi read_roi;
    Roi write_roi;
};

/// Shape of the write grid (number of blocks per axis).
Coordinate block_grid_shape(const BlockSpec& spec);

/// Grid index of a block from its dense linear index (row-major decode).
Coordinate block_grid_index(const BlockSpec& spec, std::uint64_t block_index);

/// The block at a given dense linear index.
Block make_block(const BlockSpec& spec, std::uint64_t block_index);

/// All blocks of the grid, ordered lexicographically by grid index. Write
/// ROIs tile total_roi exactly (after clipping, for overhang).
std::vector<Block> enumerate_blocks(const BlockSpec& spec);

} // namespace blockvol
