#include "blockvol/tensor.hpp"

#include <algorithm>
#include <string>

namespace blockvol {

Tensor::Tensor(Coordinate shape, Dtype dtype) : shape_(std::move(shape)), dtype_(dtype) {
    if (!shape_.all_ge(0))
        fail(Errc::invalid_argument, "tensor shape must be non-negative, got " + shape_.to_string());
    data_.assign(element_count() * dtype_size(dtype_), std::byte{0});
}

Tensor Tensor::filled(Coordinate shape, Dtype dtype, const Scalar& value) {
    Tensor t(std::move(shape), dtype);
    t.fill(value);
    return t;
}

std::size_t Tensor::element_count() const {
    if (shape_.ndim() == 0) return 0;
    std::int64_t n = shape_.product();
    return n < 0 ? 0 : static_cast<std::size_t>(n);
}

std::size_t Tensor::linear_index(const Coordinate& idx) const {
    check_same_ndim(idx, shape_, "tensor index");
    std::size_t linear = 0;
    for (std::size_t i = 0; i < shape_.ndim(); ++i)
        linear = linear * static_cast<std::size_t>(shape_[i]) + static_cast<std::size_t>(idx[i]);
    return linear;
}

void Tensor::fill(const Scalar& value) {
    dispatch_dtype(dtype_, [&](auto zero) {
        using T = decltype(zero);
        T v = value.as<T>();
        auto s = view<T>();
        std::fill(s.begin(), s.end(), v);
    });
}

void Tensor::require_dtype(Dtype dt) const {
    if (dt != dtype_)
        fail(Errc::invalid_argument, std::string("tensor dtype is ") + std::string(dtype_name(dtype_)) +
                                         ", requested " + std::string(dtype_name(dt)));
}

namespace {

void check_box(const Coordinate& origin, const Coordinate& extent, const Coordinate& shape, const char* what) {
    check_same_ndim(origin, shape, what);
    check_same_ndim(extent, shape, what);
    for (std::size_t i = 0; i < shape.ndim(); ++i) {
        if (origin[i] < 0 || extent[i] < 0 || origin[i] + extent[i] > shape[i])
            fail(Errc::invalid_argument, std::string(what) + ": box " + origin.to_string() + "+" +
                                             extent.to_string() + " outside shape " + shape.to_string());
    }
}

} // namespace

void copy_region(const Tensor& src, const Coordinate& src_origin,
                 Tensor& dst, const Coordinate& dst_origin,
                 const Coordinate& extent) {
    if (src.dtype() != dst.dtype())
        fail(Errc::invalid_argument, "copy_region: dtype mismatch");
    check_box(src_origin, extent, src.shape(), "copy_region src");
    check_box(dst_origin, extent, dst.shape(), "copy_region dst");

    const std::size_t d = extent.ndim();
    if (extent.product() == 0) return;
    const std::size_t esize = dtype_size(src.dtype());

    // Row length along the last axis is contiguous in both tensors.
    const std::size_t row = static_cast<std::size_t>(extent[d - 1]) * esize;
    const std::size_t outer_dims = d - 1;
    std::vector<std::int64_t> counter(outer_dims, 0);

    std::vector<std::size_t> src_stride(d), dst_stride(d);
    src_stride[d - 1] = 1;
    dst_stride[d - 1] = 1;
    for (std::size_t i = d - 1; i-- > 0;) {
        src_stride[i] = src_stride[i + 1] * static_cast<std::size_t>(src.shape()[i + 1]);
        dst_stride[i] = dst_stride[i + 1] * static_cast<std::size_t>(dst.shape()[i + 1]);
    }

    while (true) {
        std::size_t src_off = 0, dst_off = 0;
        for (std::size_t i = 0; i < outer_dims; ++i) {
            src_off += static_cast<std::size_t>(src_origin[i] + counter[i]) * src_stride[i];
            dst_off += static_cast<std::size_t>(dst_origin[i] + counter[i]) * dst_stride[i];
        }
        src_off += static_cast<std::size_t>(src_origin[d - 1]);
        dst_off += static_cast<std::size_t>(dst_origin[d - 1]);
        std::memcpy(dst.data() + dst_off * esize, src.data() + src_off * esize, row);

        // Odometer over the outer dimensions.
        std::size_t axis = outer_dims;
        while (axis-- > 0) {
            if (++counter[axis] < extent[axis]) break;
            counter[axis] = 0;
            if (axis == 0) return;
        }
        if (outer_dims == 0) return;
    }
}

Tensor crop(const Tensor& src, const Coordinate& origin, const Coordinate& extent) {
    Tensor out(extent, src.dtype());
    copy_region(src, origin, out, Coordinate::zeros(extent.ndim()), extent);
    return out;
}

Tensor crop_world(const Tensor& src, const Roi& src_roi, const Roi& sub_roi) {
    if (src.shape() != src_roi.shape)
        fail(Errc::invalid_argument, "crop_world: tensor shape does not match its roi");
    if (!src_roi.contains(sub_roi))
        fail(Errc::invalid_argument,
             "crop_world: " + sub_roi.to_string() + " not contained in " + src_roi.to_string());
    return crop(src, sub_roi.offset - src_roi.offset, sub_roi.shape);
}

Coordinate prepend(std::int64_t value, const Coordinate& rest) {
    std::vector<std::int64_t> v;
    v.reserve(rest.ndim() + 1);
    v.push_back(value);
    v.insert(v.end(), rest.begin(), rest.end());
    return Coordinate(std::move(v));
}

Roi with_channel_axis(const Roi& spatial, std::int64_t channels, std::int64_t first) {
    return Roi(prepend(first, spatial.offset), prepend(channels, spatial.shape));
}

std::vector<std::uint64_t> to_u64(const Tensor& t) {
    if (dtype_is_float(t.dtype()))
        fail(Errc::invalid_argument, "labels must be an integer dtype, got " +
                                         std::string(dtype_name(t.dtype())));
    std::vector<std::uint64_t> out(t.element_count());
    dispatch_dtype(t.dtype(), [&](auto zero) {
        using T = decltype(zero);
        if constexpr (!std::is_floating_point_v<T>) {
            auto s = t.view<T>();
            for (std::size_t i = 0; i < s.size(); ++i) out[i] = static_cast<std::uint64_t>(s[i]);
        }
    });
    return out;
}

std::vector<double> to_f64(const Tensor& t) {
    std::vector<double> out(t.element_count());
    dispatch_dtype(t.dtype(), [&](auto zero) {
        using T = decltype(zero);
        auto s = t.view<T>();
        for (std::size_t i = 0; i < s.size(); ++i) out[i] = static_cast<double>(s[i]);
    });
    return out;
}

} // namespace blockvol
