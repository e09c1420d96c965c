#include "blockvol.h"

#include <cstring>
#include <string>

#include "blockvol/pipeline.hpp"

using namespace blockvol;
using nlohmann::json;

struct bv_dataset {
    VolumeHandle handle;
};

namespace {

thread_local std::string t_last_error = "no error";

int code_of(Errc c) {
    switch (c) {
        case Errc::invalid_argument: return BV_ERROR_INVALID;
        case Errc::config: return BV_ERROR_CONFIG;
        case Errc::io: return BV_ERROR_IO;
        case Errc::unsupported: return BV_ERROR_UNSUPPORTED;
        case Errc::not_found: return BV_ERROR_NOT_FOUND;
        case Errc::already_exists: return BV_ERROR_EXISTS;
        case Errc::corrupt: return BV_ERROR_CORRUPT;
        case Errc::exhausted: return BV_ERROR_EXHAUSTED;
        case Errc::partial: return BV_ERROR_PARTIAL;
    }
    return BV_ERROR;
}

template <class F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const Error& e) {
        t_last_error = e.what();
        return code_of(e.code());
    } catch (const std::exception& e) {
        t_last_error = e.what();
        return BV_ERROR;
    } catch (...) {
        t_last_error = "unknown error";
        return BV_ERROR;
    }
}

char* copy_string(const std::string& s) {
    char* out = new char[s.size() + 1];
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

int require_arg(bool ok, const char* message) {
    if (ok) return BV_OK;
    t_last_error = message;
    return BV_ERROR_INVALID;
}

ArrayMetadata metadata_from_json(const json& j, VolumeAttributes& attrs) {
    check_keys(j, {"shape", "chunks", "dtype", "fill_value", "compressor", "voxel_size", "offset",
                   "axes"},
               "metadata");
    ArrayMetadata meta;
    meta.shape = coordinate_from_json(require_key(j, "shape", "metadata"), "metadata.shape");
    meta.chunk_shape = coordinate_from_json(require_key(j, "chunks", "metadata"), "metadata.chunks");
    std::string dtype = require_key(j, "dtype", "metadata").get<std::string>();
    auto parsed = parse_dtype_name(dtype);
    if (!parsed) fail(Errc::unsupported, "metadata.dtype: unsupported dtype \"" + dtype + "\"");
    meta.dtype = *parsed;
    if (j.contains("fill_value")) {
        const json& f = j["fill_value"];
        if (f.is_number_unsigned())
            meta.fill_value = Scalar(f.get<std::uint64_t>());
        else if (f.is_number_integer())
            meta.fill_value = Scalar(f.get<std::int64_t>());
        else if (f.is_number_float())
            meta.fill_value = Scalar(f.get<double>());
        else
            fail(Errc::config, "metadata.fill_value: expected a number");
    }
    if (j.contains("compressor"))
        meta.compressor = parse_compressor(j["compressor"], "metadata.compressor");

    attrs = VolumeAttributes::defaults(meta.ndim());
    if (j.contains("voxel_size")) attrs.voxel_size = j["voxel_size"].get<std::vector<double>>();
    if (j.contains("offset")) attrs.offset = j["offset"].get<std::vector<double>>();
    if (j.contains("axes")) attrs.axis_names = j["axes"].get<std::vector<std::string>>();
    return meta;
}

int roi_from_args(const bv_dataset* ds, const int64_t* offset, const int64_t* shape, size_t ndim,
                  Roi& out) {
    if (!offset || !shape) return require_arg(false, "offset/shape must not be NULL");
    if (ndim != ds->handle.ndim()) return require_arg(false, "ndim does not match the dataset");
    out = Roi(Coordinate(std::vector<std::int64_t>(offset, offset + ndim)),
              Coordinate(std::vector<std::int64_t>(shape, shape + ndim)));
    return BV_OK;
}

} // namespace

extern "C" {

const char* bv_version(void) { return kVersion; }

const char* bv_last_error(void) { return t_last_error.c_str(); }

void bv_string_free(char* s) { delete[] s; }

int bv_dataset_create(const char* root, const char* name, const char* metadata_json, int overwrite,
                      bv_dataset** out) {
    if (int rc = require_arg(root && name && metadata_json && out, "NULL argument")) return rc;
    return guarded([&] {
        json doc = json::parse(metadata_json, nullptr, false);
        if (doc.is_discarded()) fail(Errc::config, "metadata_json is not valid JSON");
        VolumeAttributes attrs;
        ArrayMetadata meta = metadata_from_json(doc, attrs);
        *out = new bv_dataset{create_dataset(root, name, meta, attrs, overwrite != 0)};
        return BV_OK;
    });
}

int bv_dataset_open(const char* root, const char* name, bv_dataset** out) {
    if (int rc = require_arg(root && name && out, "NULL argument")) return rc;
    return guarded([&] {
        *out = new bv_dataset{open_dataset(root, name)};
        return BV_OK;
    });
}

void bv_dataset_close(bv_dataset* ds) { delete ds; }

int bv_dataset_info(const bv_dataset* ds, char** json_out) {
    if (int rc = require_arg(ds && json_out, "NULL argument")) return rc;
    return guarded([&] {
        *json_out = copy_string(dataset_info(ds->handle).dump(2));
        return BV_OK;
    });
}

int bv_dataset_ndim(const bv_dataset* ds, size_t* out) {
    if (int rc = require_arg(ds && out, "NULL argument")) return rc;
    *out = ds->handle.ndim();
    return BV_OK;
}

int bv_dataset_element_size(const bv_dataset* ds, size_t* out) {
    if (int rc = require_arg(ds && out, "NULL argument")) return rc;
    *out = dtype_size(ds->handle.metadata.dtype);
    return BV_OK;
}

int bv_dataset_read(const bv_dataset* ds, const int64_t* offset, const int64_t* shape, size_t ndim,
                    void* out, size_t out_size) {
    if (int rc = require_arg(ds && out, "NULL argument")) return rc;
    return guarded([&] {
        Roi roi;
        if (int rc = roi_from_args(ds, offset, shape, ndim, roi)) return rc;
        Tensor data = read_roi(ds->handle, roi);
        if (data.byte_size() != out_size)
            fail(Errc::invalid_argument, "buffer holds " + std::to_string(out_size) +
                                             " bytes, the region needs " +
                                             std::to_string(data.byte_size()));
        std::memcpy(out, data.data(), data.byte_size());
        return BV_OK;
    });
}

int bv_dataset_write(const bv_dataset* ds, const int64_t* offset, const int64_t* shape, size_t ndim,
                     const void* data, size_t size) {
    if (int rc = require_arg(ds && data, "NULL argument")) return rc;
    return guarded([&] {
        Roi roi;
        if (int rc = roi_from_args(ds, offset, shape, ndim, roi)) return rc;
        Tensor t(roi.shape, ds->handle.metadata.dtype);
        if (t.byte_size() != size)
            fail(Errc::invalid_argument, "buffer holds " + std::to_string(size) +
                                             " bytes, the region needs " +
                                             std::to_string(t.byte_size()));
        std::memcpy(t.data(), data, size);
        write_roi(ds->handle, roi, t);
        return BV_OK;
    });
}

int bv_run(const char* command, const char* config_path, const char* overrides_json,
           char** record_json_out) {
    if (int rc = require_arg(command && config_path, "NULL argument")) return rc;
    return guarded([&] {
        std::optional<int> workers;
        std::optional<std::filesystem::path> journal;
        if (overrides_json && *overrides_json) {
            json o = json::parse(overrides_json, nullptr, false);
            if (o.is_discarded()) fail(Errc::config, "overrides_json is not valid JSON");
            check_keys(o, {"workers", "journal"}, "overrides");
            if (o.contains("workers")) workers = o["workers"].get<int>();
            if (o.contains("journal")) journal = o["journal"].get<std::string>();
        }
        CommandOutcome outcome = run_command(command, config_path, workers, journal);
        if (record_json_out) *record_json_out = copy_string(outcome.record.dump(2));
        if (outcome.exit_code == 1) {
            t_last_error = "run finished with failed blocks";
            return BV_ERROR_PARTIAL;
        }
        return BV_OK;
    });
}

} // extern "C"
