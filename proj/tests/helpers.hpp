#pragma once

#include <atomic>
#include <cmath>
#include <deque>
#include <filesystem>
#include <limits>
#include <random>
#include <set>
#include <unordered_map>
#include <vector>

#include <unistd.h>

#include <blockvol/store.hpp>

namespace testutil {

namespace fs = std::filesystem;
using namespace blockvol;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<std::uint64_t> counter{0};
        path_ = fs::temp_directory_path() /
                ("blockvol_" + tag + "_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter.fetch_add(1)));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

inline Coordinate random_shape(std::mt19937& rng, std::size_t ndim, std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> dist(lo, hi);
    std::vector<std::int64_t> v(ndim);
    for (auto& d : v) d = dist(rng);
    return Coordinate(std::move(v));
}

/// Random binary mask with roughly the given foreground fraction.
inline Tensor random_mask(std::mt19937& rng, const Coordinate& shape, double fg_fraction) {
    Tensor t(shape, Dtype::u8);
    std::bernoulli_distribution dist(fg_fraction);
    for (auto& v : t.view<std::uint8_t>()) v = dist(rng) ? 1 : 0;
    return t;
}

inline Tensor random_labels(std::mt19937& rng, const Coordinate& shape, std::uint64_t max_label) {
    Tensor t(shape, Dtype::u64);
    std::uniform_int_distribution<std::uint64_t> dist(0, max_label);
    for (auto& v : t.view<std::uint64_t>()) v = dist(rng);
    return t;
}

inline Tensor random_f32(std::mt19937& rng, const Coordinate& shape, float lo = 0.f, float hi = 1.f) {
    Tensor t(shape, Dtype::f32);
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& v : t.view<float>()) v = dist(rng);
    return t;
}

/// Face (2d) or full (3^d - 1) neighbor offsets for d dimensions.
inline std::vector<Coordinate> neighbor_offsets(std::size_t ndim, bool full) {
    std::vector<Coordinate> out;
    if (!full) {
        for (std::size_t a = 0; a < ndim; ++a) {
            for (int s : {-1, 1}) {
                Coordinate o = Coordinate::zeros(ndim);
                o[a] = s;
                out.push_back(o);
            }
        }
        return out;
    }
    Coordinate o = Coordinate::filled(ndim, -1);
    while (true) {
        bool zero = true;
        for (auto v : o)
            if (v != 0) zero = false;
        if (!zero) out.push_back(o);
        std::size_t axis = ndim;
        bool done = true;
        while (axis-- > 0) {
            if (++o[axis] <= 1) {
                done = false;
                break;
            }
            o[axis] = -1;
            if (axis == 0) break;
        }
        if (done) break;
    }
    return out;
}

/// Whole-volume connected components by BFS; labels assigned 1..K in
/// raster-scan order of each component's first voxel. Independent of the
/// library's blockwise path.
inline std::vector<std::uint64_t> cc_whole_volume(const Tensor& mask, bool full_connectivity) {
    const Coordinate& shape = mask.shape();
    const std::size_t d = shape.ndim();
    const std::size_t n = mask.element_count();
    std::vector<std::uint64_t> fg(n, 0);
    {
        auto raw = to_u64(mask);
        for (std::size_t i = 0; i < n; ++i) fg[i] = raw[i] != 0;
    }
    std::vector<std::uint64_t> labels(n, 0);
    auto offsets = neighbor_offsets(d, full_connectivity);

    auto decode = [&](std::size_t idx) {
        Coordinate c = Coordinate::zeros(d);
        for (std::size_t a = d; a-- > 0;) {
            c[a] = static_cast<std::int64_t>(idx % static_cast<std::size_t>(shape[a]));
            idx /= static_cast<std::size_t>(shape[a]);
        }
        return c;
    };
    auto encode = [&](const Coordinate& c) {
        std::size_t idx = 0;
        for (std::size_t a = 0; a < d; ++a)
            idx = idx * static_cast<std::size_t>(shape[a]) + static_cast<std::size_t>(c[a]);
        return idx;
    };

    std::uint64_t next = 1;
    for (std::size_t i = 0; i < n; ++i) {
        if (!fg[i] || labels[i]) continue;
        std::uint64_t id = next++;
        std::deque<std::size_t> queue{i};
        labels[i] = id;
        while (!queue.empty()) {
            std::size_t cur = queue.front();
            queue.pop_front();
            Coordinate c = decode(cur);
            for (const auto& o : offsets) {
                Coordinate nb = c + o;
                bool ok = true;
                for (std::size_t a = 0; a < d; ++a)
                    if (nb[a] < 0 || nb[a] >= shape[a]) ok = false;
                if (!ok) continue;
                std::size_t j = encode(nb);
                if (fg[j] && !labels[j]) {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
    }
    return labels;
}

/// True iff the two labelings induce the same partition: a bijection between
/// label sets exists (background 0 must match exactly).
inline bool partitions_equal(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
    if (a.size() != b.size()) return false;
    std::unordered_map<std::uint64_t, std::uint64_t> fwd, bwd;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if ((a[i] == 0) != (b[i] == 0)) return false;
        if (a[i] == 0) continue;
        auto [itf, newf] = fwd.try_emplace(a[i], b[i]);
        if (!newf && itf->second != b[i]) return false;
        auto [itb, newb] = bwd.try_emplace(b[i], a[i]);
        if (!newb && itb->second != a[i]) return false;
    }
    return true;
}

/// O(n^2) signed distance oracle: for every voxel, the brute-force minimum
/// center-to-center distance to the nearest voxel of the opposite binary
/// class, in world units; +inside / -outside. Infinity when no opposite
/// voxel exists.
inline std::vector<double> brute_force_signed_distance(const std::vector<bool>& mask,
                                                       const Coordinate& shape,
                                                       const std::vector<double>& voxel_size) {
    const std::size_t d = shape.ndim();
    const std::size_t n = mask.size();
    auto decode = [&](std::size_t idx) {
        std::vector<std::int64_t> c(d);
        for (std::size_t a = d; a-- > 0;) {
            c[a] = static_cast<std::int64_t>(idx % static_cast<std::size_t>(shape[a]));
            idx /= static_cast<std::size_t>(shape[a]);
        }
        return c;
    };
    std::vector<std::vector<std::int64_t>> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = decode(i);

    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (mask[j] == mask[i]) continue;
            double dist2 = 0;
            for (std::size_t a = 0; a < d; ++a) {
                double delta = static_cast<double>(coords[i][a] - coords[j][a]) * voxel_size[a];
                dist2 += delta * delta;
            }
            best = std::min(best, dist2);
        }
        best = std::sqrt(best);
        out[i] = mask[i] ? best : -best;
    }
    return out;
}

} // namespace testutil
