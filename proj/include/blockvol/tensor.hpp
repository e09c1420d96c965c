#pragma once

#include <cstddef>
#include <cstring>
#include <span>
#include <vector>

#include "blockvol/dtype.hpp"
#include "blockvol/geometry.hpp"

namespace blockvol {

/// Dense row-major N-D buffer with a runtime dtype. The in-memory unit
/// handed to per-block code; shapes may include a leading channel axis.
class Tensor {
public:
    Tensor() = default;
    Tensor(Coordinate shape, Dtype dtype);
    static Tensor filled(Coordinate shape, Dtype dtype, const Scalar& value);

    const Coordinate& shape() const { return shape_; }
    Dtype dtype() const { return dtype_; }
    std::size_t ndim() const { return shape_.ndim(); }
    std::size_t element_count() const;
    std::size_t byte_size() const { return data_.size(); }

    std::byte* data() { return data_.data(); }
    const std::byte* data() const { return data_.data(); }

    template <class T>
    std::span<T> view() {
        require_dtype(dtype_of<T>);
        return {reinterpret_cast<T*>(data_.data()), element_count()};
    }

    template <class T>
    std::span<const T> view() const {
        require_dtype(dtype_of<T>);
        return {reinterpret_cast<const T*>(data_.data()), element_count()};
    }

    std::size_t linear_index(const Coordinate& idx) const;

    template <class T>
    T& at(const Coordinate& idx) {
        return view<T>()[linear_index(idx)];
    }

    template <class T>
    const T& at(const Coordinate& idx) const {
        return view<T>()[linear_index(idx)];
    }

    void fill(const Scalar& value);

private:
    void require_dtype(Dtype dt) const;

    Coordinate shape_;
    Dtype dtype_ = Dtype::u8;
    std::vector<std::byte> data_;
};

/// Copies a box of `extent` voxels from src (starting at src_origin) into
/// dst (starting at dst_origin). Tensors must share a dtype; the box must
/// fit in both.
void copy_region(const Tensor& src, const Coordinate& src_origin,
                 Tensor& dst, const Coordinate& dst_origin,
                 const Coordinate& extent);

/// Sub-tensor starting at `origin` of the given extent.
Tensor crop(const Tensor& src, const Coordinate& origin, const Coordinate& extent);

/// Sub-tensor by world ROIs: src covers src_roi, the result covers sub_roi.
Tensor crop_world(const Tensor& src, const Roi& src_roi, const Roi& sub_roi);

/// Prepends one component (channel axes lead spatial axes).
Coordinate prepend(std::int64_t value, const Coordinate& rest);

/// Extends a spatial ROI with a leading channel axis covering
/// [first, first + channels).
Roi with_channel_axis(const Roi& spatial, std::int64_t channels, std::int64_t first = 0);

/// Converts any integer tensor to u64 values (labels are handled as u64
/// internally regardless of on-disk width).
std::vector<std::uint64_t> to_u64(const Tensor& t);

/// Converts any tensor to doubles.
std::vector<double> to_f64(const Tensor& t);

} // namespace blockvol
