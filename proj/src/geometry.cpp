#include "blockvol/geometry.hpp"

#include <algorithm>
#include <sstream>

namespace blockvol {

const char* errc_name(Errc c) {
    switch (c) {
        case Errc::invalid_argument: return "invalid_argument";
        case Errc::config: return "config";
        case Errc::io: return "io";
        case Errc::unsupported: return "unsupported";
        case Errc::not_found: return "not_found";
        case Errc::already_exists: return "already_exists";
        case Errc::corrupt: return "corrupt";
        case Errc::exhausted: return "exhausted";
        case Errc::partial: return "partial";
    }
    return "unknown";
}

void check_same_ndim(const Coordinate& a, const Coordinate& b, const char* what) {
    if (a.ndim() != b.ndim())
        fail(Errc::invalid_argument,
             std::string(what) + ": dimensionality mismatch (" + a.to_string() + " vs " + b.to_string() + ")");
}

std::int64_t Coordinate::product() const {
    std::int64_t p = 1;
    for (auto d : dims_) p *= d;
    return p;
}

bool Coordinate::all_ge(std::int64_t value) const {
    return std::all_of(dims_.begin(), dims_.end(), [&](std::int64_t d) { return d >= value; });
}

bool Coordinate::all_gt(std::int64_t value) const {
    return std::all_of(dims_.begin(), dims_.end(), [&](std::int64_t d) { return d > value; });
}

std::string Coordinate::to_string() const {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (i) out << ", ";
        out << dims_[i];
    }
    out << "]";
    return out.str();
}

bool operator==(const Coordinate& a, const Coordinate& b) { return a.values() == b.values(); }
bool operator!=(const Coordinate& a, const Coordinate& b) { return !(a == b); }

namespace {

template <class F>
Coordinate zip(const Coordinate& a, const Coordinate& b, const char* what, F&& f) {
    check_same_ndim(a, b, what);
    std::vector<std::int64_t> out(a.ndim());
    for (std::size_t i = 0; i < a.ndim(); ++i) out[i] = f(a[i], b[i]);
    return Coordinate(std::move(out));
}

std::int64_t fdiv(std::int64_t a, std::int64_t b) {
    // b > 0
    std::int64_t q = a / b;
    if (a % b != 0 && a < 0) --q;
    return q;
}

std::int64_t cdiv(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if (a % b != 0 && a > 0) ++q;
    return q;
}

} // namespace

Coordinate operator+(const Coordinate& a, const Coordinate& b) {
    return zip(a, b, "coordinate add", [](auto x, auto y) { return x + y; });
}

Coordinate operator-(const Coordinate& a, const Coordinate& b) {
    return zip(a, b, "coordinate sub", [](auto x, auto y) { return x - y; });
}

Coordinate operator-(const Coordinate& a) {
    std::vector<std::int64_t> out(a.ndim());
    for (std::size_t i = 0; i < a.ndim(); ++i) out[i] = -a[i];
    return Coordinate(std::move(out));
}

Coordinate operator*(const Coordinate& a, const Coordinate& b) {
    return zip(a, b, "coordinate mul", [](auto x, auto y) { return x * y; });
}

Coordinate operator*(const Coordinate& a, std::int64_t s) {
    std::vector<std::int64_t> out(a.ndim());
    for (std::size_t i = 0; i < a.ndim(); ++i) out[i] = a[i] * s;
    return Coordinate(std::move(out));
}

Coordinate elementwise_min(const Coordinate& a, const Coordinate& b) {
    return zip(a, b, "coordinate min", [](auto x, auto y) { return std::min(x, y); });
}

Coordinate elementwise_max(const Coordinate& a, const Coordinate& b) {
    return zip(a, b, "coordinate max", [](auto x, auto y) { return std::max(x, y); });
}

Coordinate elementwise_max(const Coordinate& a, std::int64_t s) {
    std::vector<std::int64_t> out(a.ndim());
    for (std::size_t i = 0; i < a.ndim(); ++i) out[i] = std::max(a[i], s);
    return Coordinate(std::move(out));
}

Coordinate floor_div(const Coordinate& a, const Coordinate& b) {
    return zip(a, b, "coordinate div", [](auto x, auto y) {
        if (y <= 0) fail(Errc::invalid_argument, "division requires a positive divisor");
        return fdiv(x, y);
    });
}

Coordinate ceil_div(const Coordinate& a, const Coordinate& b) {
    return zip(a, b, "coordinate div", [](auto x, auto y) {
        if (y <= 0) fail(Errc::invalid_argument, "division requires a positive divisor");
        return cdiv(x, y);
    });
}

Roi::Roi(Coordinate offset_, Coordinate shape_)
    : offset(std::move(offset_)), shape(std::move(shape_)) {
    check_same_ndim(offset, shape, "roi");
    if (!shape.all_ge(0))
        fail(Errc::invalid_argument, "roi shape must be non-negative, got " + shape.to_string());
}

bool Roi::empty() const {
    for (auto d : shape)
        if (d == 0) return true;
    return ndim() == 0;
}

bool Roi::contains(const Coordinate& p) const {
    check_same_ndim(offset, p, "roi contains");
    for (std::size_t i = 0; i < ndim(); ++i)
        if (p[i] < offset[i] || p[i] >= offset[i] + shape[i]) return false;
    return true;
}

bool Roi::contains(const Roi& other) const {
    if (other.empty()) return true;
    check_same_ndim(offset, other.offset, "roi contains");
    for (std::size_t i = 0; i < ndim(); ++i) {
        if (other.offset[i] < offset[i]) return false;
        if (other.offset[i] + other.shape[i] > offset[i] + shape[i]) return false;
    }
    return true;
}

Roi Roi::grown(const Coordinate& by) const {
    check_same_ndim(offset, by, "roi grow");
    return Roi(offset - by, elementwise_max(shape + by * 2, 0));
}

Roi Roi::intersect(const Roi& other) const {
    check_same_ndim(offset, other.offset, "roi intersect");
    Coordinate lo = elementwise_max(offset, other.offset);
    Coordinate hi = elementwise_min(end(), other.end());
    return Roi(lo, elementwise_max(hi - lo, 0));
}

std::string Roi::to_string() const {
    return "(" + offset.to_string() + ", " + shape.to_string() + ")";
}

bool operator==(const Roi& a, const Roi& b) { return a.offset == b.offset && a.shape == b.shape; }
bool operator!=(const Roi& a, const Roi& b) { return !(a == b); }

Roi snap_roi(const Roi& roi, const Coordinate& grid, SnapMode mode) {
    check_same_ndim(roi.offset, grid, "roi snap");
    if (!grid.all_gt(0))
        fail(Errc::invalid_argument, "snap grid must be positive, got " + grid.to_string());
    if (roi.empty() && mode == SnapMode::expand) return roi;
    Coordinate lo(roi.offset), hi(roi.end());
    if (mode == SnapMode::expand) {
        lo = floor_div(lo, grid) * grid;
        hi = ceil_div(hi, grid) * grid;
    } else {
        lo = ceil_div(lo, grid) * grid;
        hi = floor_div(hi, grid) * grid;
    }
    return Roi(lo, elementwise_max(hi - lo, 0));
}

const char* fit_policy_name(FitPolicy fit) {
    switch (fit) {
        case FitPolicy::overhang: return "overhang";
        case FitPolicy::shrink: return "shrink";
        case FitPolicy::strict: return "strict";
    }
    return "unknown";
}

Coordinate block_grid_shape(const BlockSpec& spec) {
    check_same_ndim(spec.total_roi.offset, spec.write_shape, "block spec");
    check_same_ndim(spec.total_roi.offset, spec.context, "block spec");
    if (!spec.write_shape.all_gt(0))
        fail(Errc::invalid_argument, "write shape must be positive, got " + spec.write_shape.to_string());
    if (!spec.context.all_ge(0))
        fail(Errc::invalid_argument, "context must be non-negative, got " + spec.context.to_string());
    if (spec.fit == FitPolicy::strict) {
        for (std::size_t i = 0; i < spec.write_shape.ndim(); ++i)
            if (spec.total_roi.shape[i] % spec.write_shape[i] != 0)
                fail(Errc::invalid_argument,
                     "strict fit: total shape " + spec.total_roi.shape.to_string() +
                         " is not a multiple of write shape " + spec.write_shape.to_string() +
                         " on axis " + std::to_string(i));
    }
    return ceil_div(spec.total_roi.shape, spec.write_shape);
}

Coordinate block_grid_index(const BlockSpec& spec, std::uint64_t block_index) {
    Coordinate grid = block_grid_shape(spec);
    Coordinate g = Coordinate::zeros(grid.ndim());
    std::uint64_t rest = block_index;
    for (std::size_t i = grid.ndim(); i-- > 0;) {
        g[i] = static_cast<std::int64_t>(rest % static_cast<std::uint64_t>(grid[i]));
        rest /= static_cast<std::uint64_t>(grid[i]);
    }
    return g;
}

Block make_block(const BlockSpec& spec, std::uint64_t block_index) {
    Coordinate g = block_grid_index(spec, block_index);
    Coordinate write_offset = spec.total_roi.offset + g * spec.write_shape;
    Coordinate write_shape = spec.write_shape;
    if (spec.fit == FitPolicy::shrink)
        write_shape = elementwise_min(write_shape, spec.total_roi.end() - write_offset);
    Roi write(write_offset, write_shape);
    return Block{block_index, write.grown(spec.context), write};
}

std::vector<Block> enumerate_blocks(const BlockSpec& spec) {
    Coordinate grid = block_grid_shape(spec);
    std::int64_t total = grid.product();
    std::vector<Block> blocks;
    blocks.reserve(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i)
        blocks.push_back(make_block(spec, static_cast<std::uint64_t>(i)));
    return blocks;
}

} // namespace blockvol
