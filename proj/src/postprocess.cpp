#include "blockvol/postprocess.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <unordered_set>

namespace blockvol {

namespace fs = std::filesystem;

namespace instance_id {

std::uint64_t encode(std::uint64_t block_index, std::uint64_t local_id) {
    if (block_index > max_block)
        fail(Errc::exhausted, "block index " + std::to_string(block_index) + " exceeds the id space");
    if (local_id == 0 || local_id > max_local)
        fail(Errc::exhausted, "local id " + std::to_string(local_id) +
                                  " outside [1, 2^32): per-block id space exhausted");
    return (block_index << local_bits) | local_id;
}

} // namespace instance_id

const char* connectivity_name(Connectivity c) {
    return c == Connectivity::face ? "face" : "full";
}

Connectivity parse_connectivity(const std::string& name) {
    if (name == "face") return Connectivity::face;
    if (name == "full") return Connectivity::full;
    fail(Errc::config, "unknown connectivity \"" + name + "\" (expected \"face\" or \"full\")");
}

// ---------------------------------------------------------------------------
// EquivalenceTable
// ---------------------------------------------------------------------------

void EquivalenceTable::insert(std::uint64_t id) {
    if (finalized_) fail(Errc::invalid_argument, "equivalence table is finalized");
    if (parent_.try_emplace(id, id).second) size_[id] = 1;
}

std::uint64_t EquivalenceTable::find(std::uint64_t id) {
    insert(id);
    std::uint64_t root = id;
    while (parent_[root] != root) root = parent_[root];
    while (parent_[id] != root) {
        std::uint64_t next = parent_[id];
        parent_[id] = root;
        id = next;
    }
    return root;
}

void EquivalenceTable::merge(std::uint64_t a, std::uint64_t b) {
    std::uint64_t ra = find(a), rb = find(b);
    if (ra == rb) return;
    if (size_[ra] < size_[rb]) std::swap(ra, rb);
    parent_[rb] = ra;
    size_[ra] += size_[rb];
}

void EquivalenceTable::finalize() {
    if (finalized_) return;
    std::unordered_map<std::uint64_t, std::uint64_t> min_member;
    for (const auto& [id, _] : parent_) {
        std::uint64_t root = find(id);
        auto [it, fresh] = min_member.try_emplace(root, id);
        if (!fresh) it->second = std::min(it->second, id);
    }
    rep_.reserve(parent_.size());
    for (const auto& [id, _] : parent_) rep_[id] = min_member[find(id)];
    finalized_ = true;
}

std::uint64_t EquivalenceTable::representative(std::uint64_t id) const {
    if (!finalized_) fail(Errc::invalid_argument, "equivalence table is not finalized");
    auto it = rep_.find(id);
    if (it == rep_.end())
        fail(Errc::corrupt, "id " + std::to_string(id) +
                                " missing from the equivalence table (pass-1/pass-2 mismatch)");
    return it->second;
}

std::vector<std::pair<std::uint64_t, std::uint64_t>> EquivalenceTable::entries() const {
    if (!finalized_) fail(Errc::invalid_argument, "equivalence table is not finalized");
    std::vector<std::pair<std::uint64_t, std::uint64_t>> out(rep_.begin(), rep_.end());
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::uint64_t> EquivalenceTable::representatives() const {
    if (!finalized_) fail(Errc::invalid_argument, "equivalence table is not finalized");
    std::unordered_set<std::uint64_t> reps;
    for (const auto& [_, rep] : rep_) reps.insert(rep);
    std::vector<std::uint64_t> out(reps.begin(), reps.end());
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Threshold
// ---------------------------------------------------------------------------

Tensor threshold(const Tensor& channel_volume, std::size_t channel, double t) {
    if (channel_volume.ndim() < 2)
        fail(Errc::invalid_argument, "threshold expects a tensor with a leading channel axis");
    const std::int64_t channels = channel_volume.shape()[0];
    if (static_cast<std::int64_t>(channel) >= channels)
        fail(Errc::invalid_argument, "channel " + std::to_string(channel) + " out of range (" +
                                         std::to_string(channels) + " channels)");

    std::vector<std::int64_t> spatial(channel_volume.shape().begin() + 1,
                                      channel_volume.shape().end());
    Tensor out(Coordinate(spatial), Dtype::u8);
    auto ov = out.view<std::uint8_t>();
    const std::size_t n = ov.size();
    dispatch_dtype(channel_volume.dtype(), [&](auto zero) {
        using T = decltype(zero);
        auto v = channel_volume.view<T>();
        const T* ch = v.data() + channel * n;
        for (std::size_t i = 0; i < n; ++i) ov[i] = static_cast<double>(ch[i]) > t ? 1 : 0;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Per-block labeling
// ---------------------------------------------------------------------------

namespace {

std::size_t flat_index(const Coordinate& p, const Coordinate& shape) {
    std::size_t idx = 0;
    for (std::size_t a = 0; a < shape.ndim(); ++a)
        idx = idx * static_cast<std::size_t>(shape[a]) + static_cast<std::size_t>(p[a]);
    return idx;
}

bool inside(const Coordinate& p, const Coordinate& shape) {
    for (std::size_t a = 0; a < shape.ndim(); ++a)
        if (p[a] < 0 || p[a] >= shape[a]) return false;
    return true;
}

/// Offsets into the already-visited half of the neighborhood (first nonzero
/// component negative).
std::vector<Coordinate> backward_offsets(std::size_t d, Connectivity conn) {
    std::vector<Coordinate> out;
    if (conn == Connectivity::face) {
        for (std::size_t a = 0; a < d; ++a) {
            Coordinate o = Coordinate::zeros(d);
            o[a] = -1;
            out.push_back(o);
        }
        return out;
    }
    Coordinate o = Coordinate::filled(d, -1);
    while (true) {
        for (std::size_t a = 0; a < d; ++a) {
            if (o[a] == 0) continue;
            if (o[a] < 0) out.push_back(o);
            break;
        }
        std::size_t a = d;
        bool done = true;
        while (a-- > 0) {
            if (++o[a] <= 1) {
                done = false;
                break;
            }
            o[a] = -1;
            if (a == 0) break;
        }
        if (done) break;
    }
    return out;
}

struct FlatUnionFind {
    std::vector<std::size_t> parent;

    explicit FlatUnionFind(std::size_t n) : parent(n) {
        for (std::size_t i = 0; i < n; ++i) parent[i] = i;
    }
    std::size_t find(std::size_t i) {
        std::size_t root = i;
        while (parent[root] != root) root = parent[root];
        while (parent[i] != root) {
            std::size_t next = parent[i];
            parent[i] = root;
            i = next;
        }
        return root;
    }
    void merge(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        // Keeping the smaller flat index as root makes the pass
        // deterministic without a size array.
        if (a < b)
            parent[b] = a;
        else if (b < a)
            parent[a] = b;
    }
};

std::uint64_t global_raster_index(const Coordinate& world, const Coordinate& volume_shape) {
    std::uint64_t idx = 0;
    for (std::size_t a = 0; a < volume_shape.ndim(); ++a)
        idx = idx * static_cast<std::uint64_t>(volume_shape[a]) + static_cast<std::uint64_t>(world[a]);
    return idx;
}

/// Shared final pass: assign dense local ids to union-find roots of
/// foreground voxels in raster order and encode them.
BlockLabelResult assign_labels(const std::vector<bool>& fg, FlatUnionFind& uf, const Roi& write_roi,
                               const Coordinate& volume_shape, std::uint64_t block_index,
                               std::uint64_t local_id_start) {
    const Coordinate& shape = write_roi.shape;
    const std::size_t d = shape.ndim();
    const std::size_t n = fg.size();
    if (local_id_start == 0) fail(Errc::invalid_argument, "local ids start at 1");

    BlockLabelResult result;
    result.labels = Tensor(shape, Dtype::u64);
    auto lv = result.labels.view<std::uint64_t>();

    std::unordered_map<std::size_t, std::uint64_t> local_of_root;
    std::uint64_t next_local = local_id_start;
    Coordinate p = Coordinate::zeros(d);
    for (std::size_t i = 0; i < n; ++i) {
        if (fg[i]) {
            std::size_t root = uf.find(i);
            auto [it, fresh] = local_of_root.try_emplace(root, next_local);
            if (fresh) {
                // The raster-scan first touch of a component is the
                // component's globally-first voxel.
                result.first_voxel.push_back(global_raster_index(write_roi.offset + p, volume_shape));
                result.voxel_count.push_back(0);
                ++next_local;
            }
            std::uint64_t local = it->second;
            lv[i] = instance_id::encode(block_index, local);
            ++result.voxel_count[local - local_id_start];
        }
        for (std::size_t a = d; a-- > 0;) {
            if (++p[a] < shape[a]) break;
            p[a] = 0;
        }
    }
    result.id_count = next_local - local_id_start;
    return result;
}

} // namespace

BlockLabelResult label_block(const Tensor& mask, const Roi& write_roi, const Coordinate& volume_shape,
                             std::uint64_t block_index, Connectivity connectivity,
                             std::uint64_t local_id_start) {
    if (mask.shape() != write_roi.shape)
        fail(Errc::invalid_argument, "label_block: mask shape does not match the write roi");
    const Coordinate& shape = mask.shape();
    const std::size_t d = shape.ndim();
    const std::size_t n = mask.element_count();

    auto values = to_u64(mask);
    std::vector<bool> fg(n);
    for (std::size_t i = 0; i < n; ++i) fg[i] = values[i] != 0;

    FlatUnionFind uf(n);
    auto offsets = backward_offsets(d, connectivity);
    Coordinate p = Coordinate::zeros(d);
    for (std::size_t i = 0; i < n; ++i) {
        if (fg[i]) {
            for (const auto& o : offsets) {
                Coordinate q = p + o;
                if (!inside(q, shape)) continue;
                std::size_t j = flat_index(q, shape);
                if (fg[j]) uf.merge(i, j);
            }
        }
        for (std::size_t a = d; a-- > 0;) {
            if (++p[a] < shape[a]) break;
            p[a] = 0;
        }
    }
    return assign_labels(fg, uf, write_roi, volume_shape, block_index, local_id_start);
}

namespace {

void check_unit_offsets(const Neighborhood& offsets, std::size_t d) {
    for (const auto& o : offsets.offsets) {
        if (o.ndim() != d)
            fail(Errc::invalid_argument, "affinity offset " + o.to_string() + " has wrong arity");
        int nonzero = 0;
        bool unit = true;
        for (auto v : o) {
            if (v != 0) {
                ++nonzero;
                if (v != 1 && v != -1) unit = false;
            }
        }
        if (nonzero != 1 || !unit)
            fail(Errc::unsupported, "affinity decoding needs unit axis offsets, got " + o.to_string() +
                                        " (long-range decoding is out of scope)");
    }
}

} // namespace

BlockLabelResult label_block_affinities(const Tensor& affs, const Roi& read_roi, const Roi& write_roi,
                                        const Roi& bounds, const Neighborhood& offsets, double t,
                                        std::uint64_t block_index, std::uint64_t local_id_start) {
    const std::size_t d = write_roi.ndim();
    check_unit_offsets(offsets, d);
    if (affs.ndim() != d + 1 || static_cast<std::size_t>(affs.shape()[0]) != offsets.size())
        fail(Errc::invalid_argument, "affinity tensor must be (offsets, spatial...)");
    if (!read_roi.contains(write_roi))
        fail(Errc::invalid_argument, "read roi must contain the write roi");

    const Coordinate& shape = write_roi.shape;
    const std::size_t n = static_cast<std::size_t>(shape.product());
    auto av = affs.view<float>();
    const std::size_t read_n = static_cast<std::size_t>(read_roi.shape.product());

    auto aff_at = [&](std::size_t k, const Coordinate& world) {
        return av[k * read_n + flat_index(world - read_roi.offset, read_roi.shape)];
    };

    std::vector<bool> fg(n, false);
    FlatUnionFind uf(n);

    Coordinate p = Coordinate::zeros(d);
    for (std::size_t i = 0; i < n; ++i) {
        Coordinate u = write_roi.offset + p;
        for (std::size_t k = 0; k < offsets.size(); ++k) {
            const Coordinate& o = offsets.offsets[k];
            // Outgoing edge u -> u + o, decided by the affinity at u.
            Coordinate v = u + o;
            if (bounds.contains(v) && aff_at(k, u) > t) {
                fg[i] = true;
                if (write_roi.contains(v)) {
                    std::size_t j = flat_index(v - write_roi.offset, shape);
                    fg[j] = true;
                    uf.merge(i, j);
                }
            }
            // Incoming edge w -> u from outside the write region only
            // affects u's degree; in-block edges were handled above.
            Coordinate w = u - o;
            if (!write_roi.contains(w) && bounds.contains(w) && read_roi.contains(w) &&
                aff_at(k, w) > t)
                fg[i] = true;
        }
        for (std::size_t a = d; a-- > 0;) {
            if (++p[a] < shape[a]) break;
            p[a] = 0;
        }
    }
    return assign_labels(fg, uf, write_roi, bounds.shape, block_index, local_id_start);
}

// ---------------------------------------------------------------------------
// Boundary records
// ---------------------------------------------------------------------------

BlockBoundary extract_boundary(const BlockLabelResult& result, const Roi& write_roi,
                               const Tensor* affs, const Roi* read_roi,
                               const Neighborhood* offsets) {
    const std::size_t d = write_roi.ndim();
    BlockBoundary boundary;
    boundary.block_index = result.labels.element_count()
                               ? instance_id::block_of(result.labels.view<std::uint64_t>()[0])
                               : 0;
    // block_of(0) is 0 for an all-background block; recover the index from
    // any nonzero voxel if present, else it does not matter for merging.
    for (auto id : result.labels.view<std::uint64_t>())
        if (id != 0) {
            boundary.block_index = instance_id::block_of(id);
            break;
        }
    boundary.write_roi = write_roi;
    boundary.id_count = result.id_count;
    boundary.first_voxel = result.first_voxel;
    boundary.voxel_count = result.voxel_count;
    boundary.faces.resize(d);

    const std::size_t read_n = read_roi ? static_cast<std::size_t>(read_roi->shape.product()) : 0;
    for (std::size_t a = 0; a < d; ++a) {
        for (int side = 0; side < 2; ++side) {
            Roi plane = write_roi;
            plane.offset[a] = side == 0 ? write_roi.offset[a] : write_roi.end()[a] - 1;
            plane.shape[a] = 1;
            BoundaryPlanes& planes = boundary.faces[a][side];
            planes.labels = crop(result.labels, plane.offset - write_roi.offset, plane.shape);

            if (affs && offsets) {
                // The channel crossing outward: -e_a on the low side, +e_a high.
                for (std::size_t k = 0; k < offsets->size(); ++k) {
                    const Coordinate& o = offsets->offsets[k];
                    if (o[a] != (side == 0 ? -1 : 1)) continue;
                    Tensor aff_plane(plane.shape, Dtype::f32);
                    auto pv = aff_plane.view<float>();
                    auto av = affs->view<float>();
                    Coordinate p = Coordinate::zeros(d);
                    for (std::size_t i = 0; i < pv.size(); ++i) {
                        Coordinate world = plane.offset + p;
                        pv[i] = av[k * read_n + flat_index(world - read_roi->offset, read_roi->shape)];
                        for (std::size_t ax = d; ax-- > 0;) {
                            if (++p[ax] < plane.shape[ax]) break;
                            p[ax] = 0;
                        }
                    }
                    planes.aff_out = std::move(aff_plane);
                    break;
                }
            }
        }
    }
    return boundary;
}

namespace {

template <class T>
void put(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& in, const fs::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) fail(Errc::corrupt, "truncated block record " + path.string());
    return v;
}

constexpr std::uint32_t kRecordMagic = 0x4c53'5642; // "BVSL"
constexpr std::uint32_t kRecordVersion = 1;

} // namespace

fs::path block_record_path(const fs::path& dir, std::uint64_t block_index) {
    return dir / ("block_" + std::to_string(block_index) + ".slab");
}

void write_block_record(const fs::path& dir, const BlockBoundary& boundary) {
    fs::path path = block_record_path(dir, boundary.block_index);
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(Errc::io, "cannot write " + tmp.string());
        put(out, kRecordMagic);
        put(out, kRecordVersion);
        put(out, boundary.block_index);
        const std::uint32_t d = static_cast<std::uint32_t>(boundary.write_roi.ndim());
        put(out, d);
        std::uint32_t flags = 0;
        for (const auto& face : boundary.faces)
            for (const auto& side : face)
                if (side.aff_out) flags |= 1;
        put(out, flags);
        for (auto v : boundary.write_roi.offset) put(out, v);
        for (auto v : boundary.write_roi.shape) put(out, v);
        put(out, boundary.id_count);
        for (auto v : boundary.first_voxel) put(out, v);
        for (auto v : boundary.voxel_count) put(out, v);
        for (const auto& face : boundary.faces) {
            for (const auto& side : face) {
                out.write(reinterpret_cast<const char*>(side.labels.data()),
                          static_cast<std::streamsize>(side.labels.byte_size()));
                std::uint8_t has_aff = side.aff_out ? 1 : 0;
                put(out, has_aff);
                if (side.aff_out)
                    out.write(reinterpret_cast<const char*>(side.aff_out->data()),
                              static_cast<std::streamsize>(side.aff_out->byte_size()));
            }
        }
        if (!out) fail(Errc::io, "short write on " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) fail(Errc::io, "cannot rename " + tmp.string() + ": " + ec.message());
}

BlockBoundary read_block_record(const fs::path& dir, std::uint64_t block_index) {
    fs::path path = block_record_path(dir, block_index);
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::io, "missing block record " + path.string());

    if (get<std::uint32_t>(in, path) != kRecordMagic)
        fail(Errc::corrupt, "bad magic in " + path.string());
    if (get<std::uint32_t>(in, path) != kRecordVersion)
        fail(Errc::corrupt, "unsupported record version in " + path.string());

    BlockBoundary boundary;
    boundary.block_index = get<std::uint64_t>(in, path);
    const std::uint32_t d = get<std::uint32_t>(in, path);
    get<std::uint32_t>(in, path); // flags, informational
    std::vector<std::int64_t> offset(d), shape(d);
    for (auto& v : offset) v = get<std::int64_t>(in, path);
    for (auto& v : shape) v = get<std::int64_t>(in, path);
    boundary.write_roi = Roi(Coordinate(offset), Coordinate(shape));
    boundary.id_count = get<std::uint64_t>(in, path);
    boundary.first_voxel.resize(boundary.id_count);
    for (auto& v : boundary.first_voxel) v = get<std::uint64_t>(in, path);
    boundary.voxel_count.resize(boundary.id_count);
    for (auto& v : boundary.voxel_count) v = get<std::uint64_t>(in, path);

    boundary.faces.resize(d);
    for (std::uint32_t a = 0; a < d; ++a) {
        for (int side = 0; side < 2; ++side) {
            Coordinate plane_shape = boundary.write_roi.shape;
            plane_shape[a] = 1;
            BoundaryPlanes& planes = boundary.faces[a][side];
            planes.labels = Tensor(plane_shape, Dtype::u64);
            in.read(reinterpret_cast<char*>(planes.labels.data()),
                    static_cast<std::streamsize>(planes.labels.byte_size()));
            if (!in) fail(Errc::corrupt, "truncated block record " + path.string());
            std::uint8_t has_aff = get<std::uint8_t>(in, path);
            if (has_aff) {
                Tensor aff(plane_shape, Dtype::f32);
                in.read(reinterpret_cast<char*>(aff.data()),
                        static_cast<std::streamsize>(aff.byte_size()));
                if (!in) fail(Errc::corrupt, "truncated block record " + path.string());
                planes.aff_out = std::move(aff);
            }
        }
    }
    return boundary;
}

// ---------------------------------------------------------------------------
// Face merging
// ---------------------------------------------------------------------------

namespace {

std::uint64_t plane_label(const BoundaryPlanes& planes, const Roi& write_roi, std::size_t axis,
                          const Coordinate& world) {
    Coordinate rel = world - write_roi.offset;
    rel[axis] = 0;
    return planes.labels.view<std::uint64_t>()[flat_index(rel, planes.labels.shape())];
}

float plane_aff(const Tensor& plane, const Roi& write_roi, std::size_t axis, const Coordinate& world) {
    Coordinate rel = world - write_roi.offset;
    rel[axis] = 0;
    return plane.view<float>()[flat_index(rel, plane.shape())];
}

/// Perpendicular shifts for a given axis: {0} for face connectivity, the
/// full {-1,0,1}^d slice with shift[axis]=0 for full connectivity.
std::vector<Coordinate> perpendicular_shifts(std::size_t d, std::size_t axis, bool full) {
    std::vector<Coordinate> out;
    if (!full) {
        out.push_back(Coordinate::zeros(d));
        return out;
    }
    Coordinate o = Coordinate::filled(d, -1);
    o[axis] = 0;
    while (true) {
        out.push_back(o);
        std::size_t a = d;
        bool done = true;
        while (a-- > 0) {
            if (a == axis) {
                if (a == 0) break;
                continue;
            }
            if (++o[a] <= 1) {
                done = false;
                break;
            }
            o[a] = -1;
            if (a == 0) break;
        }
        if (done) break;
    }
    return out;
}

} // namespace

EquivalenceTable merge_faces(const std::vector<BlockBoundary>& boundaries, const BlockSpec& spec,
                             Connectivity connectivity, std::optional<double> affinity_threshold) {
    const std::size_t d = spec.total_roi.ndim();
    Coordinate grid = block_grid_shape(spec);
    const std::uint64_t total = static_cast<std::uint64_t>(grid.product());
    if (boundaries.size() != total)
        fail(Errc::invalid_argument, "merge_faces: expected " + std::to_string(total) +
                                         " block records, got " + std::to_string(boundaries.size()));

    std::vector<const BlockBoundary*> by_index(total, nullptr);
    for (const auto& b : boundaries) {
        if (b.block_index >= total || by_index[b.block_index])
            fail(Errc::invalid_argument, "merge_faces: slabs must cover every block exactly once");
        by_index[b.block_index] = &b;
    }

    EquivalenceTable table;
    for (const auto& b : boundaries)
        for (std::uint64_t local = 1; local <= b.id_count; ++local)
            table.insert(instance_id::encode(b.block_index, local));

    auto grid_to_index = [&](const Coordinate& g) {
        std::uint64_t idx = 0;
        for (std::size_t a = 0; a < d; ++a)
            idx = idx * static_cast<std::uint64_t>(grid[a]) + static_cast<std::uint64_t>(g[a]);
        return idx;
    };

    const bool full = connectivity == Connectivity::full && !affinity_threshold;

    for (const auto* pp : by_index) {
        const BlockBoundary& p = *pp;
        Coordinate gp = block_grid_index(spec, p.block_index);
        for (std::size_t ax = 0; ax < d; ++ax) {
            if (gp[ax] + 1 >= grid[ax]) continue;
            for (const Coordinate& mu : perpendicular_shifts(d, ax, full)) {
                Coordinate gq = gp + mu;
                gq[ax] += 1;
                if (!inside(gq, grid)) continue;
                const BlockBoundary& q = *by_index[grid_to_index(gq)];

                const BoundaryPlanes& high = p.faces[ax][1];
                const BoundaryPlanes& low = q.faces[ax][0];

                // Iterate the high plane of p in world coordinates.
                Roi plane = p.write_roi;
                plane.offset[ax] = p.write_roi.end()[ax] - 1;
                plane.shape[ax] = 1;
                Coordinate rel = Coordinate::zeros(d);
                const std::size_t plane_n = static_cast<std::size_t>(plane.shape.product());
                for (std::size_t i = 0; i < plane_n; ++i) {
                    Coordinate u = plane.offset + rel;
                    std::uint64_t lu = plane_label(high, p.write_roi, ax, u);
                    if (lu != 0 || affinity_threshold) {
                        for (const Coordinate& delta : perpendicular_shifts(d, ax, full)) {
                            Coordinate v = u + delta;
                            v[ax] += 1;
                            if (!q.write_roi.contains(v)) continue;
                            std::uint64_t lv = plane_label(low, q.write_roi, ax, v);
                            if (lv == 0 || lu == 0) continue;
                            if (affinity_threshold) {
                                bool edge = false;
                                if (high.aff_out &&
                                    plane_aff(*high.aff_out, p.write_roi, ax, u) > *affinity_threshold)
                                    edge = true;
                                if (!edge && low.aff_out &&
                                    plane_aff(*low.aff_out, q.write_roi, ax, v) > *affinity_threshold)
                                    edge = true;
                                if (!edge) continue;
                            }
                            table.merge(lu, lv);
                        }
                    }
                    for (std::size_t a = d; a-- > 0;) {
                        if (++rel[a] < plane.shape[a]) break;
                        rel[a] = 0;
                    }
                }
            }
        }
    }
    table.finalize();
    return table;
}

std::unordered_map<std::uint64_t, std::uint64_t> compaction_by_first_voxel(
    const EquivalenceTable& table, const std::vector<BlockBoundary>& boundaries) {
    std::unordered_map<std::uint64_t, std::uint64_t> first;
    for (const auto& b : boundaries) {
        for (std::uint64_t local = 1; local <= b.id_count; ++local) {
            std::uint64_t rep = table.representative(instance_id::encode(b.block_index, local));
            std::uint64_t fv = b.first_voxel[local - 1];
            auto [it, fresh] = first.try_emplace(rep, fv);
            if (!fresh) it->second = std::min(it->second, fv);
        }
    }
    std::vector<std::pair<std::uint64_t, std::uint64_t>> order; // (first voxel, rep)
    order.reserve(first.size());
    for (const auto& [rep, fv] : first) order.emplace_back(fv, rep);
    std::sort(order.begin(), order.end());

    std::unordered_map<std::uint64_t, std::uint64_t> remap;
    remap.reserve(order.size());
    std::uint64_t next = 1;
    for (const auto& [fv, rep] : order) remap[rep] = next++;
    return remap;
}

std::unordered_map<std::uint64_t, std::uint64_t> compaction_by_representative(
    const EquivalenceTable& table) {
    std::unordered_map<std::uint64_t, std::uint64_t> remap;
    std::uint64_t next = 1;
    for (std::uint64_t rep : table.representatives()) remap[rep] = next++;
    return remap;
}

void relabel_tensor(Tensor& labels, const EquivalenceTable& table,
                    const std::unordered_map<std::uint64_t, std::uint64_t>* remap) {
    for (auto& id : labels.view<std::uint64_t>()) {
        if (id == 0) continue;
        std::uint64_t rep = table.representative(id);
        if (remap) {
            auto it = remap->find(rep);
            if (it == remap->end())
                fail(Errc::corrupt, "representative " + std::to_string(rep) + " missing from remap");
            id = it->second;
        } else {
            id = rep;
        }
    }
}

RunReport relabel_blockwise(const VolumeHandle& labels, const EquivalenceTable& table, bool compact,
                            const Coordinate& write_shape, const ExecutionContext& ctx) {
    if (!table.finalized()) fail(Errc::invalid_argument, "equivalence table is not finalized");
    std::unordered_map<std::uint64_t, std::uint64_t> remap;
    if (compact) remap = compaction_by_representative(table);

    BlockTask task;
    task.name = "relabel";
    task.block_spec = {labels.bounds(), write_shape, Coordinate::zeros(labels.ndim()),
                       FitPolicy::shrink};
    task.inputs = {labels};
    task.outputs = {labels};
    const auto* remap_ptr = compact ? &remap : nullptr;
    task.worker = [labels, &table, remap_ptr](const Block& b) {
        Tensor t = read_roi(labels, b.write_roi);
        relabel_tensor(t, table, remap_ptr);
        write_roi(labels, b.write_roi, t);
    };
    return run_blockwise(task, ctx);
}

// ---------------------------------------------------------------------------
// Instance segmentation pipeline
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kMergeMagic = 0x5145'5642; // "BVEQ"

void write_merge_file(const fs::path& path, const EquivalenceTable& table,
                      const std::unordered_map<std::uint64_t, std::uint64_t>& remap,
                      std::uint64_t object_count) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(Errc::io, "cannot write " + tmp.string());
        put(out, kMergeMagic);
        auto entries = table.entries();
        put(out, static_cast<std::uint64_t>(entries.size()));
        for (const auto& [id, rep] : entries) {
            put(out, id);
            put(out, rep);
        }
        std::vector<std::pair<std::uint64_t, std::uint64_t>> sorted(remap.begin(), remap.end());
        std::sort(sorted.begin(), sorted.end());
        put(out, static_cast<std::uint64_t>(sorted.size()));
        for (const auto& [rep, final_id] : sorted) {
            put(out, rep);
            put(out, final_id);
        }
        put(out, object_count);
        if (!out) fail(Errc::io, "short write on " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) fail(Errc::io, "cannot rename " + tmp.string() + ": " + ec.message());
}

bool read_merge_file(const fs::path& path, EquivalenceTable& table,
                     std::unordered_map<std::uint64_t, std::uint64_t>& remap,
                     std::uint64_t& object_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return false;
    if (get<std::uint32_t>(in, path) != kMergeMagic) fail(Errc::corrupt, "bad magic in " + path.string());
    std::uint64_t n = get<std::uint64_t>(in, path);
    EquivalenceTable fresh;
    for (std::uint64_t i = 0; i < n; ++i) {
        std::uint64_t id = get<std::uint64_t>(in, path);
        std::uint64_t rep = get<std::uint64_t>(in, path);
        fresh.insert(id);
        fresh.merge(id, rep);
    }
    fresh.finalize();
    table = std::move(fresh);
    std::uint64_t m = get<std::uint64_t>(in, path);
    remap.clear();
    for (std::uint64_t i = 0; i < m; ++i) {
        std::uint64_t rep = get<std::uint64_t>(in, path);
        std::uint64_t final_id = get<std::uint64_t>(in, path);
        remap[rep] = final_id;
    }
    object_count = get<std::uint64_t>(in, path);
    return true;
}

InstanceSegmentation run_segmentation(const SegmentArgs& args, const Neighborhood* offsets) {
    const VolumeHandle& in = args.input;
    const bool has_channel_axis = args.channel.has_value() || offsets != nullptr;
    const std::size_t d = in.ndim() - (has_channel_axis ? 1 : 0);
    check_same_ndim(args.write_shape, Coordinate::zeros(d), "segment write shape");
    if (offsets && !args.threshold)
        fail(Errc::config, "affinity decoding needs a threshold");
    if (args.channel && !offsets && !args.threshold)
        fail(Errc::config, "a channel volume input needs a threshold");

    std::vector<std::int64_t> spatial_dims(in.metadata.shape.values().end() - d,
                                           in.metadata.shape.values().end());
    Coordinate spatial_shape(spatial_dims);
    Roi bounds(Coordinate::zeros(d), spatial_shape);

    ArrayMetadata out_meta;
    out_meta.shape = spatial_shape;
    out_meta.chunk_shape = args.write_shape;
    out_meta.dtype = Dtype::u64;
    out_meta.fill_value = Scalar(std::uint64_t{0});
    out_meta.compressor = args.output_compressor;
    VolumeAttributes out_attrs;
    out_attrs.voxel_size.assign(in.attributes.voxel_size.end() - d, in.attributes.voxel_size.end());
    out_attrs.offset.assign(in.attributes.offset.end() - d, in.attributes.offset.end());
    VolumeHandle out = ensure_dataset(args.output.root, args.output.dataset, out_meta, out_attrs);

    fs::create_directories(args.scratch_dir);

    BlockSpec spec{bounds, args.write_shape,
                   offsets ? Coordinate::ones(d) : Coordinate::zeros(d), FitPolicy::shrink};

    InstanceSegmentation result;
    result.output = out;

    // Pass 1: label blocks, persist boundary records.
    BlockTask pass1;
    pass1.name = "label_blocks";
    pass1.block_spec = spec;
    pass1.inputs = {in};
    pass1.outputs = {out};
    pass1.max_retries = args.max_retries;
    SegmentArgs a = args; // worker copy
    Neighborhood offs = offsets ? *offsets : Neighborhood{};
    const bool affinity_mode = offsets != nullptr;
    pass1.worker = [a, in, out, bounds, offs, affinity_mode](const Block& b) {
        BlockLabelResult labeled;
        std::optional<Tensor> affs;
        Roi read = b.read_roi;
        if (affinity_mode) {
            const std::int64_t channels = in.metadata.shape[0];
            affs = read_roi(in, with_channel_axis(read, channels));
            labeled = label_block_affinities(*affs, read, b.write_roi, bounds, offs, *a.threshold,
                                             b.block_index);
        } else {
            Tensor block_vals;
            if (a.channel) {
                Tensor slab = read_roi(in, with_channel_axis(b.write_roi, 1,
                                                             static_cast<std::int64_t>(*a.channel)));
                Tensor mask = threshold(slab, 0, *a.threshold);
                labeled = label_block(mask, b.write_roi, bounds.shape, b.block_index, a.connectivity);
            } else {
                Tensor vals = read_roi(in, b.write_roi);
                if (a.threshold) {
                    // Treat the spatial volume as a single channel.
                    Tensor as_channel(prepend(1, vals.shape()), vals.dtype());
                    std::memcpy(as_channel.data(), vals.data(), vals.byte_size());
                    vals = threshold(as_channel, 0, *a.threshold);
                }
                labeled = label_block(vals, b.write_roi, bounds.shape, b.block_index, a.connectivity);
            }
        }
        write_roi(out, b.write_roi, labeled.labels);
        BlockBoundary boundary =
            affinity_mode ? extract_boundary(labeled, b.write_roi, &*affs, &read, &offs)
                          : extract_boundary(labeled, b.write_roi);
        boundary.block_index = b.block_index; // all-background blocks carry no ids
        write_block_record(a.scratch_dir, boundary);
    };

    std::optional<fs::path> journal1, journal3;
    if (args.journal) {
        journal1 = fs::path(args.journal->string() + ".pass1");
        journal3 = fs::path(args.journal->string() + ".pass3");
    }
    result.reports.push_back(run_blockwise(pass1, args.ctx, journal1));
    if (!result.reports.back().ok()) return result;

    // Pass 2: merge in the orchestrator. A finished merge is persisted so a
    // journaled rerun can resume pass 3 after the records were cleaned up.
    const std::uint64_t total_blocks = result.reports.back().total_blocks;
    fs::path merge_path = args.scratch_dir / "equivalences.bin";
    EquivalenceTable table;
    std::unordered_map<std::uint64_t, std::uint64_t> remap;
    std::uint64_t object_count = 0;

    bool records_present = true;
    for (std::uint64_t i = 0; i < total_blocks && records_present; ++i)
        if (!fs::exists(block_record_path(args.scratch_dir, i))) records_present = false;
    if (records_present) {
        std::vector<BlockBoundary> boundaries;
        boundaries.reserve(total_blocks);
        for (std::uint64_t i = 0; i < total_blocks; ++i)
            boundaries.push_back(read_block_record(args.scratch_dir, i));

        table = merge_faces(boundaries, spec, args.connectivity,
                            affinity_mode ? std::optional<double>(*args.threshold) : std::nullopt);

        remap = args.compact ? compaction_by_first_voxel(table, boundaries)
                             : [&] {
                                   std::unordered_map<std::uint64_t, std::uint64_t> identity;
                                   for (auto rep : table.representatives()) identity[rep] = rep;
                                   return identity;
                               }();

        if (args.min_size > 1) {
            std::unordered_map<std::uint64_t, std::uint64_t> rep_sizes;
            for (const auto& b : boundaries)
                for (std::uint64_t local = 1; local <= b.id_count; ++local)
                    rep_sizes[table.representative(instance_id::encode(b.block_index, local))] +=
                        b.voxel_count[local - 1];
            for (const auto& [rep, count] : rep_sizes)
                if (count < args.min_size) remap[rep] = 0;
        }
        for (const auto& [rep, final_id] : remap)
            if (final_id != 0) ++object_count;

        write_merge_file(merge_path, table, remap, object_count);
        for (std::uint64_t i = 0; i < total_blocks; ++i) {
            std::error_code ec;
            fs::remove(block_record_path(args.scratch_dir, i), ec);
        }
    } else if (!read_merge_file(merge_path, table, remap, object_count)) {
        fail(Errc::io, "scratch directory " + args.scratch_dir.string() +
                           " has neither block records nor a merge file; cannot resume");
    }
    result.object_count = object_count;

    // Pass 3: blockwise relabel through the final map.
    BlockTask pass3;
    pass3.name = "relabel";
    pass3.block_spec = {bounds, args.write_shape, Coordinate::zeros(d), FitPolicy::shrink};
    pass3.inputs = {out};
    pass3.outputs = {out};
    pass3.max_retries = args.max_retries;
    auto table_ptr = std::make_shared<EquivalenceTable>(std::move(table));
    auto remap_ptr = std::make_shared<std::unordered_map<std::uint64_t, std::uint64_t>>(std::move(remap));
    pass3.worker = [out, table_ptr, remap_ptr](const Block& b) {
        Tensor t = read_roi(out, b.write_roi);
        relabel_tensor(t, *table_ptr, remap_ptr.get());
        write_roi(out, b.write_roi, t);
    };
    result.reports.push_back(run_blockwise(pass3, args.ctx, journal3));
    return result;
}

} // namespace

InstanceSegmentation segment_instances(const SegmentArgs& args) {
    return run_segmentation(args, nullptr);
}

InstanceSegmentation segment_affinities(const SegmentArgs& args, const Neighborhood& offsets) {
    return run_segmentation(args, &offsets);
}

Tensor label_volume(const Tensor& mask, Connectivity connectivity) {
    Roi bounds(Coordinate::zeros(mask.ndim()), mask.shape());
    // Block 0 encodes ids as the bare local ids, which are already dense and
    // in raster first-touch order.
    return label_block(mask, bounds, mask.shape(), 0, connectivity).labels;
}

Tensor decode_affinities(const Tensor& affs, const Neighborhood& offsets, double t) {
    if (affs.ndim() < 2) fail(Errc::invalid_argument, "affinity tensor must be (offsets, spatial...)");
    std::vector<std::int64_t> spatial(affs.shape().begin() + 1, affs.shape().end());
    Roi bounds(Coordinate::zeros(spatial.size()), Coordinate(spatial));
    return label_block_affinities(affs, bounds, bounds, bounds, offsets, t, 0).labels;
}

void size_filter_tensor(Tensor& labels, std::uint64_t min_size) {
    if (min_size <= 1) return;
    std::unordered_map<std::uint64_t, std::uint64_t> counts;
    for (auto id : labels.view<std::uint64_t>())
        if (id != 0) ++counts[id];
    for (auto& id : labels.view<std::uint64_t>())
        if (id != 0 && counts[id] < min_size) id = 0;
}

std::vector<RunReport> size_filter_blockwise(const VolumeHandle& labels, std::uint64_t min_size,
                                             const Coordinate& write_shape,
                                             const ExecutionContext& ctx,
                                             const fs::path& scratch_dir) {
    if (min_size <= 1) return {};
    fs::create_directories(scratch_dir);

    BlockSpec spec{labels.bounds(), write_shape, Coordinate::zeros(labels.ndim()), FitPolicy::shrink};
    auto count_path = [&](std::uint64_t index) {
        return scratch_dir / ("counts_" + std::to_string(index) + ".bin");
    };

    BlockTask count_task;
    count_task.name = "count_sizes";
    count_task.block_spec = spec;
    count_task.inputs = {labels};
    count_task.worker = [labels, count_path](const Block& b) {
        Tensor t = read_roi(labels, b.write_roi);
        std::unordered_map<std::uint64_t, std::uint64_t> counts;
        for (auto id : t.view<std::uint64_t>())
            if (id != 0) ++counts[id];
        fs::path tmp = count_path(b.block_index);
        tmp += ".tmp";
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(Errc::io, "cannot write " + tmp.string());
        put(out, static_cast<std::uint64_t>(counts.size()));
        for (const auto& [id, n] : counts) {
            put(out, id);
            put(out, n);
        }
        out.close();
        fs::rename(tmp, count_path(b.block_index));
    };

    std::vector<RunReport> reports;
    reports.push_back(run_blockwise(count_task, ctx));
    if (!reports.back().ok()) return reports;

    std::unordered_map<std::uint64_t, std::uint64_t> totals;
    const std::uint64_t total_blocks = reports.back().total_blocks;
    for (std::uint64_t i = 0; i < total_blocks; ++i) {
        fs::path path = count_path(i);
        std::ifstream in(path, std::ios::binary);
        if (!in) fail(Errc::io, "missing count record " + path.string());
        std::uint64_t n = get<std::uint64_t>(in, path);
        for (std::uint64_t k = 0; k < n; ++k) {
            std::uint64_t id = get<std::uint64_t>(in, path);
            std::uint64_t c = get<std::uint64_t>(in, path);
            totals[id] += c;
        }
        std::error_code ec;
        fs::remove(path, ec);
    }

    auto remove = std::make_shared<std::unordered_set<std::uint64_t>>();
    for (const auto& [id, n] : totals)
        if (n < min_size) remove->insert(id);

    BlockTask filter_task;
    filter_task.name = "size_filter";
    filter_task.block_spec = spec;
    filter_task.inputs = {labels};
    filter_task.outputs = {labels};
    filter_task.worker = [labels, remove](const Block& b) {
        Tensor t = read_roi(labels, b.write_roi);
        bool changed = false;
        for (auto& id : t.view<std::uint64_t>())
            if (id != 0 && remove->contains(id)) {
                id = 0;
                changed = true;
            }
        if (changed) write_roi(labels, b.write_roi, t);
    };
    reports.push_back(run_blockwise(filter_task, ctx));
    return reports;
}

} // namespace blockvol
