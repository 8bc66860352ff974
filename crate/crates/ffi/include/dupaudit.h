#ifndef DUPAUDIT_H
#define DUPAUDIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum DaStatus {
  DA_STATUS_OK = 0,
  // Bad arguments, missing files or degenerate input.
  DA_STATUS_USAGE = 1,
  // The model service failed or was unreachable.
  DA_STATUS_BACKEND = 2,
  // Corrupt artifact or violated invariant.
  DA_STATUS_FORMAT = 3,
  // A required pointer was null.
  DA_STATUS_NULL_POINTER = 4,
  // A string argument was not valid UTF-8.
  DA_STATUS_INVALID_UTF8 = 5,
  // Index out of range.
  DA_STATUS_OUT_OF_RANGE = 6,
  // The library panicked; the handle involved should be discarded.
  DA_STATUS_PANIC = 7,
} DaStatus;

// Report table layout for [`da_probe_table`].
typedef enum DaFormat {
  DA_FORMAT_TEXT = 0,
  DA_FORMAT_CSV = 1,
  DA_FORMAT_MARKDOWN = 2,
} DaFormat;

typedef struct DaClustering DaClustering;

typedef struct DaMatrix DaMatrix;

typedef struct DaProbe DaProbe;

typedef struct DaSlice DaSlice;

// Message for the last failed call on this thread, or null. Valid until the
// next call into the library on this thread; do not free.
const char *da_last_error(void);

// Library version as a static string.
const char *da_version(void);

// # Safety
// `s` must be null or a string returned by this library, freed at most once.
void da_string_free(char *s);

// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum DaStatus da_slice_load(const char *path, struct DaSlice **out);

// # Safety
// `slice` must be a live handle and `path` a nul-terminated string.
enum DaStatus da_slice_save(const struct DaSlice *slice, const char *path);

// Records in the slice, active or not. Zero for a null handle.
//
// # Safety
// `slice` must be null or a live handle.
size_t da_slice_len(const struct DaSlice *slice);

// Records that survived every filter so far. Zero for a null handle.
//
// # Safety
// `slice` must be null or a live handle.
size_t da_slice_active_count(const struct DaSlice *slice);

// Case-folded whole-word keyword filter. `keywords` is space separated; an
// empty string keeps every record. `match_any` selects any-of instead of all-of.
//
// # Safety
// `slice` must be a live handle, `keywords` a nul-terminated string and
// `out` writable.
enum DaStatus da_slice_filter_keywords(const struct DaSlice *slice,
                                       const char *keywords,
                                       bool match_any,
                                       struct DaSlice **out);

// # Safety
// `slice` must be null or a handle not yet freed.
void da_slice_free(struct DaSlice *slice);

// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum DaStatus da_matrix_load(const char *path, struct DaMatrix **out);

// # Safety
// `m` must be null or a live handle.
size_t da_matrix_len(const struct DaMatrix *m);

// # Safety
// `m` must be null or a live handle.
size_t da_matrix_dim(const struct DaMatrix *m);

// # Safety
// `m` must be null or a handle not yet freed.
void da_matrix_free(struct DaMatrix *m);

// Greedy leader clustering at similarity threshold `tau`.
//
// # Safety
// `m` must be a live handle and `out` writable.
enum DaStatus da_cluster(const struct DaMatrix *m, double tau, struct DaClustering **out);

// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum DaStatus da_clustering_load(const char *path, struct DaClustering **out);

// # Safety
// `c` must be a live handle and `path` a nul-terminated string.
enum DaStatus da_clustering_save(const struct DaClustering *c, const char *path);

// Clusters that are not omitted as noise.
//
// # Safety
// `c` must be null or a live handle.
size_t da_clustering_count(const struct DaClustering *c);

// Size of the reported cluster at zero-based `rank`.
//
// # Safety
// `c` must be a live handle and `out` writable.
enum DaStatus da_clustering_size(const struct DaClustering *c, size_t rank, size_t *out);

// # Safety
// `c` must be null or a handle not yet freed.
void da_clustering_free(struct DaClustering *c);

// Fraction of all clustered records that sit in clusters whose leader is
// within `tau_ref` of row `reference_index` of `reference`.
//
// # Safety
// All handles must be live and `out` writable.
enum DaStatus da_cluster_share(const struct DaClustering *c,
                               const struct DaMatrix *m,
                               const struct DaMatrix *reference,
                               size_t reference_index,
                               double tau_ref,
                               double *out);

// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum DaStatus da_probe_load(const char *path, struct DaProbe **out);

// Percentage of successful seeds whose similarity exceeds the probe threshold.
//
// # Safety
// `p` must be a live handle and `out` writable.
enum DaStatus da_probe_percent_above(const struct DaProbe *p, double *out);

// # Safety
// `p` must be null or a handle not yet freed.
void da_probe_free(struct DaProbe *p);

// Render `n` probe results as one table. Free `*out` with [`da_string_free`].
//
// # Safety
// `probes` must point to `n` live handles and `out` must be writable.
enum DaStatus da_probe_table(const struct DaProbe *const *probes,
                             size_t n,
                             enum DaFormat format,
                             char **out);

// Run the stages of a pipeline config file. `stages_run` may be null;
// otherwise it receives the number of stages that were not up to date.
//
// # Safety
// `config` must be a nul-terminated string; `stages_run` null or writable.
enum DaStatus da_pipeline_run(const char *config, size_t *stages_run);

#endif  /* DUPAUDIT_H */
