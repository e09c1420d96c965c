/* blockvol C API: blockwise processing of chunked volumetric arrays.
 *
 * All functions return BV_OK (0) on success or a BV_ERROR_* code; the
 * message for the most recent failure on the calling thread is available
 * via bv_last_error(). Strings returned through char** out-parameters are
 * owned by the caller and released with bv_string_free().
 */
#ifndef BLOCKVOL_H
#define BLOCKVOL_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define BV_OK 0
#define BV_ERROR 1
#define BV_ERROR_INVALID 2
#define BV_ERROR_CONFIG 3
#define BV_ERROR_IO 4
#define BV_ERROR_UNSUPPORTED 5
#define BV_ERROR_NOT_FOUND 6
#define BV_ERROR_EXISTS 7
#define BV_ERROR_CORRUPT 8
#define BV_ERROR_EXHAUSTED 9
/* The run finished but some blocks failed permanently; details are in the
 * run record. */
#define BV_ERROR_PARTIAL 10

/* Opaque handle to an on-disk chunked dataset. */
typedef struct bv_dataset bv_dataset;

const char* bv_version(void);

/* Message for the most recent error on this thread; never NULL. */
const char* bv_last_error(void);

void bv_string_free(char* s);

/* metadata_json: {"shape": [...], "chunks": [...], "dtype": "u8"|"u16"|...,
 *                 "fill_value": number, "compressor": null|{"id":"gzip","level":L},
 *                 "voxel_size": [...], "offset": [...], "axes": [...]?}
 * voxel_size/offset/axes are optional (defaults: 1s, 0s, unset). */
int bv_dataset_create(const char* root, const char* name, const char* metadata_json,
                      int overwrite, bv_dataset** out);

int bv_dataset_open(const char* root, const char* name, bv_dataset** out);

void bv_dataset_close(bv_dataset* ds);

/* Summary document: shape, chunks, dtype, compressor, fill_value,
 * voxel_size, offset, chunk counts. */
int bv_dataset_info(const bv_dataset* ds, char** json_out);

int bv_dataset_ndim(const bv_dataset* ds, size_t* out);

/* Element size in bytes of the dataset dtype. */
int bv_dataset_element_size(const bv_dataset* ds, size_t* out);

/* Reads a dense region of `shape` voxels starting at `offset` (both of
 * length ndim, voxel coordinates; the region may extend outside the array,
 * where the fill value is returned). `out` must hold prod(shape) elements. */
int bv_dataset_read(const bv_dataset* ds, const int64_t* offset, const int64_t* shape,
                    size_t ndim, void* out, size_t out_size);

/* Writes a dense region; it must lie within the array bounds. */
int bv_dataset_write(const bv_dataset* ds, const int64_t* offset, const int64_t* shape,
                     size_t ndim, const void* data, size_t size);

/* Runs a config-driven pipeline command: "target", "predict", "segment",
 * "evaluate" or "sweep". overrides_json may be NULL or e.g.
 * {"workers": 4, "journal": "run.journal"}. On BV_OK or BV_ERROR_PARTIAL,
 * *record_json_out (when non-NULL) receives the run record document. */
int bv_run(const char* command, const char* config_path, const char* overrides_json,
           char** record_json_out);

#ifdef __cplusplus
}
#endif

#endif /* BLOCKVOL_H */
