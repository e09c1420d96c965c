#include "blockvol/store.hpp"

#include <atomic>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

#include <unistd.h>
#include <zlib.h>

#include "json.hpp"

namespace blockvol {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string zarr_dtype_string(Dtype dt) {
    std::string code;
    switch (dt) {
        case Dtype::u8: code = "u1"; break;
        case Dtype::u16: code = "u2"; break;
        case Dtype::u32: code = "u4"; break;
        case Dtype::u64: code = "u8"; break;
        case Dtype::i8: code = "i1"; break;
        case Dtype::i16: code = "i2"; break;
        case Dtype::i32: code = "i4"; break;
        case Dtype::i64: code = "i8"; break;
        case Dtype::f32: code = "f4"; break;
        case Dtype::f64: code = "f8"; break;
    }
    return (dtype_size(dt) == 1 ? "|" : "<") + code;
}

Dtype parse_zarr_dtype(const std::string& s, const std::string& where) {
    if (s.empty()) fail(Errc::corrupt, where + ": empty dtype");
    char order = s[0];
    std::string code = s;
    if (order == '<' || order == '>' || order == '|') code = s.substr(1);
    if (order == '>')
        fail(Errc::unsupported, where + ": unsupported feature: big-endian dtype \"" + s + "\"");

    if (code == "u1") return Dtype::u8;
    if (code == "u2") return Dtype::u16;
    if (code == "u4") return Dtype::u32;
    if (code == "u8") return Dtype::u64;
    if (code == "i1") return Dtype::i8;
    if (code == "i2") return Dtype::i16;
    if (code == "i4") return Dtype::i32;
    if (code == "i8") return Dtype::i64;
    if (code == "f4") return Dtype::f32;
    if (code == "f8") return Dtype::f64;
    fail(Errc::unsupported, where + ": unsupported feature: dtype \"" + s + "\"");
}

json scalar_to_json(const Scalar& v, Dtype dt) {
    if (dtype_is_float(dt)) return v.as<double>();
    if (dtype_is_unsigned(dt)) return v.as<std::uint64_t>();
    return v.as<std::int64_t>();
}

Scalar scalar_from_json(const json& v, const std::string& where) {
    if (v.is_null()) return Scalar(std::uint64_t{0});
    if (v.is_number_unsigned()) return Scalar(v.get<std::uint64_t>());
    if (v.is_number_integer()) return Scalar(v.get<std::int64_t>());
    if (v.is_number_float()) return Scalar(v.get<double>());
    fail(Errc::unsupported, where + ": unsupported feature: non-numeric fill_value");
}

Coordinate coordinate_from_json(const json& arr, const std::string& where) {
    if (!arr.is_array()) fail(Errc::corrupt, where + ": expected an array");
    std::vector<std::int64_t> v;
    v.reserve(arr.size());
    for (const auto& e : arr) {
        if (!e.is_number_integer() && !e.is_number_unsigned())
            fail(Errc::corrupt, where + ": expected integers");
        v.push_back(e.get<std::int64_t>());
    }
    return Coordinate(std::move(v));
}

json zarray_document(const ArrayMetadata& meta) {
    json doc;
    doc["zarr_format"] = 2;
    doc["shape"] = meta.shape.values();
    doc["chunks"] = meta.chunk_shape.values();
    doc["dtype"] = zarr_dtype_string(meta.dtype);
    if (meta.compressor.kind == Compressor::none)
        doc["compressor"] = nullptr;
    else
        doc["compressor"] = {{"id", "gzip"}, {"level", meta.compressor.level}};
    doc["fill_value"] = scalar_to_json(meta.fill_value, meta.dtype);
    doc["order"] = "C";
    doc["filters"] = nullptr;
    return doc;
}

json zattrs_document(const VolumeAttributes& attrs) {
    json doc;
    doc["resolution"] = attrs.voxel_size;
    doc["offset"] = attrs.offset;
    if (!attrs.axis_names.empty()) doc["axes"] = attrs.axis_names;
    return doc;
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::io, "cannot read " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        fail(Errc::corrupt, path.string() + ": " + e.what());
    }
    return doc;
}

void write_json_file(const fs::path& path, const json& doc) {
    std::string text = doc.dump(4);
    text.push_back('\n');
    atomic_write_file(path, {reinterpret_cast<const std::byte*>(text.data()), text.size()});
}

void validate_metadata(const ArrayMetadata& meta) {
    check_same_ndim(meta.shape, meta.chunk_shape, "array metadata");
    if (meta.ndim() == 0)
        fail(Errc::invalid_argument, "arrays must have at least one dimension");
    if (!meta.shape.all_ge(0))
        fail(Errc::invalid_argument, "array shape must be non-negative, got " + meta.shape.to_string());
    if (!meta.chunk_shape.all_gt(0))
        fail(Errc::invalid_argument, "chunk shape must be positive, got " + meta.chunk_shape.to_string());
    if (meta.compressor.kind == Compressor::gzip &&
        (meta.compressor.level < 1 || meta.compressor.level > 9))
        fail(Errc::invalid_argument, "gzip level must be in 1..9, got " + std::to_string(meta.compressor.level));
}

void validate_attributes(const VolumeAttributes& attrs, std::size_t ndim, const std::string& where) {
    if (attrs.voxel_size.size() != ndim)
        fail(Errc::invalid_argument, where + ": voxel_size length " + std::to_string(attrs.voxel_size.size()) +
                                         " does not match dimensionality " + std::to_string(ndim));
    for (double v : attrs.voxel_size)
        if (!(v > 0)) fail(Errc::invalid_argument, where + ": voxel_size components must be positive");
    if (attrs.offset.size() != ndim)
        fail(Errc::invalid_argument, where + ": offset length does not match dimensionality");
}

std::size_t chunk_byte_size(const ArrayMetadata& meta) {
    return static_cast<std::size_t>(meta.chunk_shape.product()) * dtype_size(meta.dtype);
}

Roi chunk_roi(const ArrayMetadata& meta, const Coordinate& chunk_index) {
    return Roi(chunk_index * meta.chunk_shape, meta.chunk_shape);
}

std::vector<std::byte> read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::io, "cannot read " + path.string());
    std::vector<std::byte> bytes;
    in.seekg(0, std::ios::end);
    bytes.resize(static_cast<std::size_t>(in.tellg()));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) fail(Errc::io, "short read on " + path.string());
    return bytes;
}

/// Loads one chunk into a full-chunk tensor, or returns false if the chunk
/// file is absent.
bool load_chunk(const VolumeHandle& vol, const Coordinate& chunk_index, Tensor& out) {
    fs::path path = vol.dir() / chunk_key(chunk_index);
    std::error_code ec;
    if (!fs::exists(path, ec)) return false;

    std::vector<std::byte> bytes = read_file_bytes(path);
    if (vol.metadata.compressor.kind == Compressor::gzip) {
        try {
            bytes = gzip_decompress(bytes);
        } catch (const Error& e) {
            fail(Errc::corrupt, "corrupt chunk " + path.string() + ": " + e.what());
        }
    }
    if (bytes.size() != chunk_byte_size(vol.metadata))
        fail(Errc::corrupt, "corrupt chunk " + path.string() + ": got " + std::to_string(bytes.size()) +
                                " bytes, expected " + std::to_string(chunk_byte_size(vol.metadata)));

    out = Tensor(vol.metadata.chunk_shape, vol.metadata.dtype);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return true;
}

void save_chunk(const VolumeHandle& vol, const Coordinate& chunk_index, const Tensor& chunk) {
    fs::path path = vol.dir() / chunk_key(chunk_index);
    std::span<const std::byte> raw{chunk.data(), chunk.byte_size()};
    if (vol.metadata.compressor.kind == Compressor::gzip) {
        std::vector<std::byte> packed = gzip_compress(raw, vol.metadata.compressor.level);
        atomic_write_file(path, packed);
    } else {
        atomic_write_file(path, raw);
    }
}

/// Calls fn(chunk_index) for every chunk overlapping `region`.
template <class F>
void for_each_chunk(const ArrayMetadata& meta, const Roi& region, F&& fn) {
    if (region.empty()) return;
    Coordinate lo = floor_div(region.offset, meta.chunk_shape);
    Coordinate hi = floor_div(region.end() - Coordinate::ones(region.ndim()), meta.chunk_shape);
    Coordinate idx = lo;
    while (true) {
        fn(idx);
        std::size_t axis = idx.ndim();
        while (axis-- > 0) {
            if (++idx[axis] <= hi[axis]) break;
            idx[axis] = lo[axis];
            if (axis == 0) return;
        }
    }
}

} // namespace

std::string chunk_key(const Coordinate& chunk_index) {
    std::ostringstream out;
    for (std::size_t i = 0; i < chunk_index.ndim(); ++i) {
        if (i) out << ".";
        out << chunk_index[i];
    }
    return out.str();
}

bool dataset_exists(const fs::path& root, const std::string& name) {
    std::error_code ec;
    return fs::exists(root / name / ".zarray", ec);
}

VolumeHandle create_dataset(const fs::path& root, const std::string& name,
                            const ArrayMetadata& metadata, const VolumeAttributes& attributes,
                            bool overwrite) {
    validate_metadata(metadata);
    validate_attributes(attributes, metadata.ndim(), root.string() + "/" + name);

    fs::path dir = root / name;
    if (dataset_exists(root, name)) {
        if (!overwrite)
            fail(Errc::already_exists, "dataset already exists: " + dir.string());
        std::error_code ec;
        fs::remove_all(dir, ec);
        if (ec) fail(Errc::io, "cannot remove " + dir.string() + ": " + ec.message());
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(Errc::io, "cannot create " + dir.string() + ": " + ec.message());

    write_json_file(dir / ".zarray", zarray_document(metadata));
    write_json_file(dir / ".zattrs", zattrs_document(attributes));
    return VolumeHandle{root, name, metadata, attributes};
}

bool metadata_equal(const ArrayMetadata& a, const ArrayMetadata& b) {
    if (a.shape != b.shape || a.chunk_shape != b.chunk_shape || a.dtype != b.dtype) return false;
    if (a.compressor.kind != b.compressor.kind) return false;
    if (a.compressor.kind == Compressor::gzip && a.compressor.level != b.compressor.level)
        return false;
    return dispatch_dtype(a.dtype, [&](auto zero) {
        using T = decltype(zero);
        return a.fill_value.as<T>() == b.fill_value.as<T>();
    });
}

VolumeHandle ensure_dataset(const fs::path& root, const std::string& name,
                            const ArrayMetadata& metadata, const VolumeAttributes& attributes) {
    if (dataset_exists(root, name)) {
        VolumeHandle existing = open_dataset(root, name);
        if (metadata_equal(existing.metadata, metadata)) return existing;
    }
    return create_dataset(root, name, metadata, attributes, true);
}

VolumeHandle open_dataset(const fs::path& root, const std::string& name) {
    fs::path dir = root / name;
    fs::path zarray_path = dir / ".zarray";
    std::error_code ec;
    if (!fs::exists(zarray_path, ec))
        fail(Errc::not_found, "no dataset at " + dir.string() + " (missing .zarray)");

    json doc = read_json_file(zarray_path);
    std::string where = zarray_path.string();

    if (!doc.contains("zarr_format") || doc["zarr_format"] != 2)
        fail(Errc::unsupported, where + ": unsupported feature: zarr_format must be 2");
    if (doc.contains("order") && doc["order"] != "C")
        fail(Errc::unsupported, where + ": unsupported feature: order \"" +
                                    doc["order"].get<std::string>() + "\" (only \"C\")");
    if (doc.contains("filters") && !doc["filters"].is_null()) {
        if (!(doc["filters"].is_array() && doc["filters"].empty()))
            fail(Errc::unsupported, where + ": unsupported feature: filters");
    }

    ArrayMetadata meta;
    meta.shape = coordinate_from_json(doc.at("shape"), where + ": shape");
    meta.chunk_shape = coordinate_from_json(doc.at("chunks"), where + ": chunks");
    meta.dtype = parse_zarr_dtype(doc.at("dtype").get<std::string>(), where);
    meta.fill_value = scalar_from_json(doc.value("fill_value", json(nullptr)), where);

    const json& comp = doc.value("compressor", json(nullptr));
    if (comp.is_null()) {
        meta.compressor = {Compressor::none, 0};
    } else {
        std::string id = comp.value("id", "");
        if (id != "gzip")
            fail(Errc::unsupported, where + ": unsupported feature: compressor id \"" + id + "\"");
        meta.compressor = {Compressor::gzip, comp.value("level", 6)};
    }
    validate_metadata(meta);

    VolumeAttributes attrs = VolumeAttributes::defaults(meta.ndim());
    fs::path zattrs_path = dir / ".zattrs";
    if (fs::exists(zattrs_path, ec)) {
        json adoc = read_json_file(zattrs_path);
        if (adoc.contains("resolution")) attrs.voxel_size = adoc["resolution"].get<std::vector<double>>();
        if (adoc.contains("offset")) attrs.offset = adoc["offset"].get<std::vector<double>>();
        if (adoc.contains("axes")) attrs.axis_names = adoc["axes"].get<std::vector<std::string>>();
    }
    validate_attributes(attrs, meta.ndim(), zattrs_path.string());

    return VolumeHandle{root, name, meta, attrs};
}

Tensor read_roi(const VolumeHandle& vol, const Roi& roi) {
    check_same_ndim(roi.offset, vol.metadata.shape, "read_roi");
    Tensor out = Tensor::filled(roi.shape, vol.metadata.dtype, vol.metadata.fill_value);
    Roi in_bounds = roi.intersect(vol.bounds());
    if (in_bounds.empty()) return out;

    Tensor chunk;
    for_each_chunk(vol.metadata, in_bounds, [&](const Coordinate& ci) {
        if (!load_chunk(vol, ci, chunk)) return;
        Roi croi = chunk_roi(vol.metadata, ci);
        Roi overlap = croi.intersect(in_bounds);
        copy_region(chunk, overlap.offset - croi.offset, out, overlap.offset - roi.offset, overlap.shape);
    });
    return out;
}

void write_roi(const VolumeHandle& vol, const Roi& roi, const Tensor& data) {
    check_same_ndim(roi.offset, vol.metadata.shape, "write_roi");
    if (data.shape() != roi.shape)
        fail(Errc::invalid_argument, "write_roi: data shape " + data.shape().to_string() +
                                         " does not match roi shape " + roi.shape.to_string());
    if (data.dtype() != vol.metadata.dtype)
        fail(Errc::invalid_argument, std::string("write_roi: data dtype ") +
                                         std::string(dtype_name(data.dtype())) + " does not match dataset dtype " +
                                         std::string(dtype_name(vol.metadata.dtype)));
    if (roi.empty()) return;
    if (!vol.bounds().contains(roi))
        fail(Errc::invalid_argument, "write_roi: " + roi.to_string() + " outside array bounds " +
                                         vol.bounds().to_string() + " (use write_roi_clipped for overhang)");

    Tensor chunk;
    for_each_chunk(vol.metadata, roi, [&](const Coordinate& ci) {
        Roi croi = chunk_roi(vol.metadata, ci);
        Roi overlap = croi.intersect(roi);
        if (!load_chunk(vol, ci, chunk))
            chunk = Tensor::filled(vol.metadata.chunk_shape, vol.metadata.dtype, vol.metadata.fill_value);
        copy_region(data, overlap.offset - roi.offset, chunk, overlap.offset - croi.offset, overlap.shape);
        save_chunk(vol, ci, chunk);
    });
}

void write_roi_clipped(const VolumeHandle& vol, const Roi& roi, const Tensor& data) {
    Roi clipped = roi.intersect(vol.bounds());
    if (clipped.empty()) return;
    if (clipped == roi) {
        write_roi(vol, roi, data);
        return;
    }
    write_roi(vol, clipped, crop_world(data, roi, clipped));
}

std::size_t count_present_chunks(const VolumeHandle& vol) {
    std::size_t n = 0;
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(vol.dir(), ec)) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        if (name.empty() || name[0] == '.') continue;
        bool chunk_like = true;
        for (char c : name)
            if (!std::isdigit(static_cast<unsigned char>(c)) && c != '.') chunk_like = false;
        if (chunk_like) ++n;
    }
    return n;
}

std::size_t total_chunk_count(const VolumeHandle& vol) {
    Coordinate n = ceil_div(vol.metadata.shape, vol.metadata.chunk_shape);
    return static_cast<std::size_t>(n.product());
}

std::vector<std::byte> gzip_compress(std::span<const std::byte> input, int level) {
    z_stream zs{};
    // 15 + 16 selects the gzip wrapper.
    if (deflateInit2(&zs, level, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        fail(Errc::io, "deflateInit2 failed");

    std::vector<std::byte> out(deflateBound(&zs, static_cast<uLong>(input.size())) + 32);
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<std::byte*>(input.data()));
    zs.avail_in = static_cast<uInt>(input.size());
    zs.next_out = reinterpret_cast<Bytef*>(out.data());
    zs.avail_out = static_cast<uInt>(out.size());

    int rc = deflate(&zs, Z_FINISH);
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) fail(Errc::io, "gzip compression failed (rc=" + std::to_string(rc) + ")");
    out.resize(out.size() - zs.avail_out);
    return out;
}

std::vector<std::byte> gzip_decompress(std::span<const std::byte> input) {
    z_stream zs{};
    // 15 + 32 accepts both gzip and zlib wrappers.
    if (inflateInit2(&zs, 15 + 32) != Z_OK) fail(Errc::io, "inflateInit2 failed");

    std::vector<std::byte> out;
    out.resize(std::max<std::size_t>(input.size() * 4, 4096));
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<std::byte*>(input.data()));
    zs.avail_in = static_cast<uInt>(input.size());

    std::size_t written = 0;
    int rc = Z_OK;
    while (true) {
        zs.next_out = reinterpret_cast<Bytef*>(out.data() + written);
        zs.avail_out = static_cast<uInt>(out.size() - written);
        rc = inflate(&zs, Z_NO_FLUSH);
        written = out.size() - zs.avail_out;
        if (rc == Z_STREAM_END) break;
        if (rc == Z_OK || rc == Z_BUF_ERROR) {
            if (zs.avail_out == 0) {
                out.resize(out.size() * 2);
                continue;
            }
            if (rc == Z_BUF_ERROR) { // no progress possible: truncated input
                inflateEnd(&zs);
                fail(Errc::corrupt, "truncated gzip stream");
            }
            continue;
        }
        inflateEnd(&zs);
        fail(Errc::corrupt, "gzip decompression failed (rc=" + std::to_string(rc) + ")");
    }
    inflateEnd(&zs);
    out.resize(written);
    return out;
}

void atomic_write_file(const fs::path& path, std::span<const std::byte> bytes) {
    static std::atomic<std::uint64_t> counter{0};
    fs::path tmp = path;
    tmp += ".tmp" + std::to_string(::getpid()) + "." + std::to_string(counter.fetch_add(1));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(Errc::io, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail(Errc::io, "short write on " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) fail(Errc::io, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

} // namespace blockvol
