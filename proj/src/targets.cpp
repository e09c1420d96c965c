#include "blockvol/targets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace blockvol {

using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_voxel_size(const std::vector<double>& voxel_size, std::size_t ndim) {
    if (voxel_size.size() != ndim)
        fail(Errc::invalid_argument, "voxel_size has " + std::to_string(voxel_size.size()) +
                                         " components for a " + std::to_string(ndim) + "-d volume");
    for (double v : voxel_size)
        if (!(v > 0)) fail(Errc::invalid_argument, "voxel_size components must be positive");
}

Coordinate channel_shape(const Coordinate& spatial, std::size_t channels) {
    std::vector<std::int64_t> s;
    s.reserve(spatial.ndim() + 1);
    s.push_back(static_cast<std::int64_t>(channels));
    s.insert(s.end(), spatial.begin(), spatial.end());
    return Coordinate(std::move(s));
}

/// 1D lower-envelope distance transform at sample positions i * sp.
/// Parabolas rooted at infinite values are skipped; an all-infinite line
/// stays infinite.
void dt_line(const double* f, int n, double sp, double* out, int* v, double* z) {
    int k = -1;
    for (int i = 0; i < n; ++i) {
        if (std::isinf(f[i])) continue;
        double xi = i * sp;
        double s = 0;
        while (k >= 0) {
            double xv = v[k] * sp;
            s = ((f[i] + xi * xi) - (f[v[k]] + xv * xv)) / (2 * xi - 2 * xv);
            if (s <= z[k])
                --k;
            else
                break;
        }
        if (k < 0) {
            k = 0;
            v[0] = i;
            z[0] = -kInf;
        } else {
            ++k;
            v[k] = i;
            z[k] = s;
        }
        z[k + 1] = kInf;
    }
    if (k < 0) {
        std::fill(out, out + n, kInf);
        return;
    }
    int j = 0;
    for (int i = 0; i < n; ++i) {
        double x = i * sp;
        while (z[j + 1] < x) ++j;
        double dx = x - v[j] * sp;
        out[i] = dx * dx + f[v[j]];
    }
}

std::vector<std::uint64_t> label_values(const Tensor& labels) { return to_u64(labels); }

bool in_bounds(const Coordinate& p, const Coordinate& shape) {
    for (std::size_t a = 0; a < shape.ndim(); ++a)
        if (p[a] < 0 || p[a] >= shape[a]) return false;
    return true;
}

} // namespace

Neighborhood Neighborhood::of(std::vector<Coordinate> offsets) {
    if (offsets.empty()) fail(Errc::invalid_argument, "neighborhood must not be empty");
    std::set<std::vector<std::int64_t>> seen;
    for (const auto& o : offsets) {
        check_same_ndim(o, offsets.front(), "neighborhood");
        bool zero = std::all_of(o.begin(), o.end(), [](std::int64_t v) { return v == 0; });
        if (zero) fail(Errc::invalid_argument, "neighborhood offsets must be nonzero");
        if (!seen.insert(o.values()).second)
            fail(Errc::invalid_argument, "duplicate neighborhood offset " + o.to_string());
    }
    return Neighborhood{std::move(offsets)};
}

Tensor one_hot(const Tensor& labels, const std::vector<std::uint64_t>& class_ids) {
    if (class_ids.empty()) fail(Errc::invalid_argument, "one_hot needs at least one class id");
    if (std::set<std::uint64_t>(class_ids.begin(), class_ids.end()).size() != class_ids.size())
        fail(Errc::invalid_argument, "one_hot class ids must be distinct");

    auto values = label_values(labels);
    Tensor out(channel_shape(labels.shape(), class_ids.size()), Dtype::f32);
    auto ov = out.view<float>();
    const std::size_t n = values.size();
    for (std::size_t k = 0; k < class_ids.size(); ++k) {
        float* channel = ov.data() + k * n;
        for (std::size_t i = 0; i < n; ++i) channel[i] = values[i] == class_ids[k] ? 1.f : 0.f;
    }
    return out;
}

std::vector<double> squared_distance_transform(const std::vector<bool>& seed, const Coordinate& shape,
                                               const std::vector<double>& voxel_size) {
    const std::size_t d = shape.ndim();
    check_voxel_size(voxel_size, d);
    const std::size_t n = seed.size();
    if (n != static_cast<std::size_t>(shape.product()))
        fail(Errc::invalid_argument, "seed mask size does not match shape");

    std::vector<double> dist(n);
    for (std::size_t i = 0; i < n; ++i) dist[i] = seed[i] ? 0.0 : kInf;

    std::vector<std::size_t> stride(d);
    stride[d - 1] = 1;
    for (std::size_t a = d - 1; a-- > 0;)
        stride[a] = stride[a + 1] * static_cast<std::size_t>(shape[a + 1]);

    std::vector<double> line, out_line, z;
    std::vector<int> v;
    for (std::size_t axis = 0; axis < d; ++axis) {
        const int len = static_cast<int>(shape[axis]);
        if (len == 0) continue;
        line.resize(len);
        out_line.resize(len);
        v.resize(len);
        z.resize(len + 1);

        // Iterate every line along `axis`.
        Coordinate p = Coordinate::zeros(d);
        while (true) {
            std::size_t base = 0;
            for (std::size_t a = 0; a < d; ++a) base += static_cast<std::size_t>(p[a]) * stride[a];
            for (int i = 0; i < len; ++i) line[i] = dist[base + i * stride[axis]];
            dt_line(line.data(), len, voxel_size[axis], out_line.data(), v.data(), z.data());
            for (int i = 0; i < len; ++i) dist[base + i * stride[axis]] = out_line[i];

            // Odometer over the other axes.
            std::size_t a = d;
            bool done = true;
            while (a-- > 0) {
                if (a == axis) {
                    if (a == 0) break;
                    continue;
                }
                if (++p[a] < shape[a]) {
                    done = false;
                    break;
                }
                p[a] = 0;
                if (a == 0) break;
            }
            if (done) break;
        }
    }
    return dist;
}

Tensor signed_distance(const Tensor& labels, std::optional<std::uint64_t> class_id,
                       const std::vector<double>& voxel_size, double scale) {
    if (!(scale > 0)) fail(Errc::invalid_argument, "signed_distance scale must be positive");
    const std::size_t d = labels.ndim();
    check_voxel_size(voxel_size, d);

    auto values = label_values(labels);
    const std::size_t n = values.size();
    std::vector<bool> mask(n);
    for (std::size_t i = 0; i < n; ++i)
        mask[i] = class_id ? values[i] == *class_id : values[i] != 0;
    std::vector<bool> not_mask(n);
    for (std::size_t i = 0; i < n; ++i) not_mask[i] = !mask[i];

    // Distance to the nearest voxel of the opposite class, per side.
    std::vector<double> to_outside = squared_distance_transform(not_mask, labels.shape(), voxel_size);
    std::vector<double> to_inside = squared_distance_transform(mask, labels.shape(), voxel_size);

    Tensor out(channel_shape(labels.shape(), 1), Dtype::f32);
    auto ov = out.view<float>();
    for (std::size_t i = 0; i < n; ++i) {
        double d2 = mask[i] ? to_outside[i] : to_inside[i];
        double signed_dist = std::isinf(d2) ? (mask[i] ? 1.0 : -1.0)
                                            : std::tanh(std::sqrt(d2) / scale) * (mask[i] ? 1.0 : -1.0);
        ov[i] = static_cast<float>(signed_dist);
    }
    return out;
}

Tensor hot_distance(const Tensor& labels, const std::vector<std::uint64_t>& class_ids,
                    const std::vector<double>& voxel_size, double scale) {
    Tensor hot = one_hot(labels, class_ids);
    Tensor out(channel_shape(labels.shape(), 2 * class_ids.size()), Dtype::f32);
    const std::size_t n = labels.element_count();
    std::memcpy(out.data(), hot.data(), hot.byte_size());
    auto ov = out.view<float>();
    for (std::size_t k = 0; k < class_ids.size(); ++k) {
        Tensor dist = signed_distance(labels, class_ids[k], voxel_size, scale);
        std::memcpy(ov.data() + (class_ids.size() + k) * n, dist.data(), dist.byte_size());
    }
    return out;
}

Tensor affinities(const Tensor& labels, const Neighborhood& nbhd) {
    const std::size_t d = labels.ndim();
    for (const auto& o : nbhd.offsets) check_same_ndim(o, labels.shape(), "affinity offsets");

    auto values = label_values(labels);
    const Coordinate& shape = labels.shape();
    Tensor out(channel_shape(shape, nbhd.size()), Dtype::f32);
    auto ov = out.view<float>();
    const std::size_t n = values.size();

    for (std::size_t k = 0; k < nbhd.size(); ++k) {
        const Coordinate& offset = nbhd.offsets[k];
        float* channel = ov.data() + k * n;
        Coordinate p = Coordinate::zeros(d);
        for (std::size_t i = 0; i < n; ++i) {
            if (values[i] != 0) {
                Coordinate q = p + offset;
                if (in_bounds(q, shape)) {
                    std::size_t j = 0;
                    for (std::size_t a = 0; a < d; ++a)
                        j = j * static_cast<std::size_t>(shape[a]) + static_cast<std::size_t>(q[a]);
                    if (values[j] == values[i]) channel[i] = 1.f;
                }
            }
            for (std::size_t a = d; a-- > 0;) {
                if (++p[a] < shape[a]) break;
                p[a] = 0;
            }
        }
    }
    return out;
}

Tensor local_shape_descriptors(const Tensor& labels, double sigma,
                               const std::vector<double>& voxel_size) {
    if (!(sigma > 0)) fail(Errc::invalid_argument, "lsd sigma must be positive");
    const std::size_t d = labels.ndim();
    check_voxel_size(voxel_size, d);
    if (d != 2 && d != 3)
        fail(Errc::invalid_argument, "local shape descriptors are defined for 2d and 3d volumes");

    const double radius = 3.0 * sigma;

    // Window: integer offsets within the truncation ball, with Gaussian
    // weights over world offsets.
    struct WindowEntry {
        Coordinate offset;
        std::vector<double> world;
        double weight;
    };
    std::vector<WindowEntry> window;
    Coordinate reach = Coordinate::zeros(d);
    for (std::size_t a = 0; a < d; ++a)
        reach[a] = static_cast<std::int64_t>(std::ceil(radius / voxel_size[a]));
    Coordinate o = -reach;
    while (true) {
        std::vector<double> world(d);
        double r2 = 0;
        for (std::size_t a = 0; a < d; ++a) {
            world[a] = static_cast<double>(o[a]) * voxel_size[a];
            r2 += world[a] * world[a];
        }
        if (r2 <= radius * radius)
            window.push_back({o, world, std::exp(-r2 / (2.0 * sigma * sigma))});
        std::size_t a = d;
        bool done = true;
        while (a-- > 0) {
            if (++o[a] <= reach[a]) {
                done = false;
                break;
            }
            o[a] = -reach[a];
            if (a == 0) break;
        }
        if (done) break;
    }
    double total_window_weight = 0;
    for (const auto& e : window) total_window_weight += e.weight;

    const std::size_t channels = lsd_channel_count(d);
    auto values = label_values(labels);
    const Coordinate& shape = labels.shape();
    const std::size_t n = values.size();
    Tensor out(channel_shape(shape, channels), Dtype::f32);
    auto ov = out.view<float>();

    auto flat = [&](const Coordinate& p) {
        std::size_t idx = 0;
        for (std::size_t a = 0; a < d; ++a)
            idx = idx * static_cast<std::size_t>(shape[a]) + static_cast<std::size_t>(p[a]);
        return idx;
    };

    std::vector<double> mean(d), raw2(d * d);
    Coordinate p = Coordinate::zeros(d);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t label = values[i];
        if (label != 0) {
            double weight_sum = 0;
            std::fill(mean.begin(), mean.end(), 0.0);
            std::fill(raw2.begin(), raw2.end(), 0.0);
            for (const auto& e : window) {
                Coordinate q = p + e.offset;
                if (!in_bounds(q, shape) || values[flat(q)] != label) continue;
                weight_sum += e.weight;
                for (std::size_t a = 0; a < d; ++a) {
                    mean[a] += e.weight * e.world[a];
                    for (std::size_t b = a; b < d; ++b)
                        raw2[a * d + b] += e.weight * e.world[a] * e.world[b];
                }
            }
            // weight_sum >= g(0): the voxel itself is in its own window.
            for (std::size_t a = 0; a < d; ++a) mean[a] /= weight_sum;

            std::size_t c = 0;
            for (std::size_t a = 0; a < d; ++a)
                ov[c++ * n + i] = static_cast<float>(mean[a] / radius);
            for (std::size_t a = 0; a < d; ++a) {
                double cov = raw2[a * d + a] / weight_sum - mean[a] * mean[a];
                ov[c++ * n + i] = static_cast<float>(cov / (radius * radius));
            }
            for (std::size_t a = 0; a < d; ++a)
                for (std::size_t b = a + 1; b < d; ++b) {
                    double cov = raw2[a * d + b] / weight_sum - mean[a] * mean[b];
                    ov[c++ * n + i] = static_cast<float>((cov / (radius * radius) + 1.0) / 2.0);
                }
            ov[c * n + i] = static_cast<float>(weight_sum / total_window_weight);
        }
        for (std::size_t a = d; a-- > 0;) {
            if (++p[a] < shape[a]) break;
            p[a] = 0;
        }
    }
    return out;
}

const char* target_kind_name(TargetKind kind) {
    switch (kind) {
        case TargetKind::one_hot: return "one_hot";
        case TargetKind::signed_distance: return "signed_distance";
        case TargetKind::hot_distance: return "hot_distance";
        case TargetKind::affinities: return "affinities";
        case TargetKind::lsd: return "lsd";
    }
    return "unknown";
}

TargetSpec TargetSpec::from_json(const json& j) {
    if (!j.is_object() || !j.contains("kind"))
        fail(Errc::config, "task: missing \"kind\"");
    std::string kind = j["kind"].get<std::string>();

    auto require = [&](const char* key) -> const json& {
        if (!j.contains(key))
            fail(Errc::config, "task kind \"" + kind + "\": missing \"" + key + "\"");
        return j[key];
    };
    auto class_id_list = [&](const json& v) {
        std::vector<std::uint64_t> ids;
        for (const auto& e : v) ids.push_back(e.get<std::uint64_t>());
        return ids;
    };

    TargetSpec spec;
    if (kind == "one_hot") {
        spec.kind = TargetKind::one_hot;
        spec.class_ids = class_id_list(require("class_ids"));
    } else if (kind == "signed_distance") {
        spec.kind = TargetKind::signed_distance;
        spec.scale = require("scale").get<double>();
        if (j.contains("class_id")) spec.class_id = j["class_id"].get<std::uint64_t>();
    } else if (kind == "hot_distance") {
        spec.kind = TargetKind::hot_distance;
        spec.class_ids = class_id_list(require("class_ids"));
        spec.scale = require("scale").get<double>();
    } else if (kind == "affinities") {
        spec.kind = TargetKind::affinities;
        std::vector<Coordinate> offsets;
        for (const auto& e : require("neighborhood"))
            offsets.push_back(coordinate_from_json(e, "task.neighborhood"));
        spec.neighborhood = Neighborhood::of(std::move(offsets));
    } else if (kind == "lsd") {
        spec.kind = TargetKind::lsd;
        spec.sigma = require("sigma").get<double>();
    } else {
        fail(Errc::config, "unknown task kind \"" + kind + "\"");
    }
    return spec;
}

json TargetSpec::to_json() const {
    json j{{"kind", target_kind_name(kind)}};
    switch (kind) {
        case TargetKind::one_hot: j["class_ids"] = class_ids; break;
        case TargetKind::signed_distance:
            j["scale"] = scale;
            if (class_id) j["class_id"] = *class_id;
            break;
        case TargetKind::hot_distance:
            j["class_ids"] = class_ids;
            j["scale"] = scale;
            break;
        case TargetKind::affinities: {
            json nbhd = json::array();
            for (const auto& o : neighborhood.offsets) nbhd.push_back(coordinate_to_json(o));
            j["neighborhood"] = nbhd;
            break;
        }
        case TargetKind::lsd: j["sigma"] = sigma; break;
    }
    return j;
}

std::size_t TargetSpec::channel_count(std::size_t ndim) const {
    switch (kind) {
        case TargetKind::one_hot: return class_ids.size();
        case TargetKind::signed_distance: return 1;
        case TargetKind::hot_distance: return 2 * class_ids.size();
        case TargetKind::affinities: return neighborhood.size();
        case TargetKind::lsd: return lsd_channel_count(ndim);
    }
    return 0;
}

std::pair<double, double> TargetSpec::channel_range(std::size_t channel, std::size_t ndim) const {
    switch (kind) {
        case TargetKind::one_hot:
        case TargetKind::affinities: return {0.0, 1.0};
        case TargetKind::signed_distance: return {-1.0, 1.0};
        case TargetKind::hot_distance:
            return channel < class_ids.size() ? std::pair{0.0, 1.0} : std::pair{-1.0, 1.0};
        case TargetKind::lsd: return channel < ndim ? std::pair{-1.0, 1.0} : std::pair{0.0, 1.0};
    }
    return {0.0, 1.0};
}

std::optional<Coordinate> TargetSpec::min_context(std::size_t ndim,
                                                  const std::vector<double>& voxel_size) const {
    switch (kind) {
        case TargetKind::one_hot: return Coordinate::zeros(ndim);
        case TargetKind::signed_distance:
        case TargetKind::hot_distance: return std::nullopt;
        case TargetKind::affinities: {
            Coordinate c = Coordinate::zeros(ndim);
            for (const auto& o : neighborhood.offsets)
                for (std::size_t a = 0; a < ndim; ++a) c[a] = std::max(c[a], std::abs(o[a]));
            return c;
        }
        case TargetKind::lsd: {
            check_voxel_size(voxel_size, ndim);
            Coordinate c = Coordinate::zeros(ndim);
            for (std::size_t a = 0; a < ndim; ++a)
                c[a] = static_cast<std::int64_t>(std::ceil(3.0 * sigma / voxel_size[a]));
            return c;
        }
    }
    return std::nullopt;
}

Tensor make_target(const TargetSpec& spec, const Tensor& labels,
                   const std::vector<double>& voxel_size) {
    switch (spec.kind) {
        case TargetKind::one_hot: return one_hot(labels, spec.class_ids);
        case TargetKind::signed_distance:
            return signed_distance(labels, spec.class_id, voxel_size, spec.scale);
        case TargetKind::hot_distance:
            return hot_distance(labels, spec.class_ids, voxel_size, spec.scale);
        case TargetKind::affinities: return affinities(labels, spec.neighborhood);
        case TargetKind::lsd: return local_shape_descriptors(labels, spec.sigma, voxel_size);
    }
    fail(Errc::config, "unknown target kind");
}

} // namespace blockvol
