#ifndef CUBELET_H
#define CUBELET_H

/* Generated from the Rust sources by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum CubeletStatus {
  CUBELET_STATUS_OK = 0,
  // A required pointer was null.
  CUBELET_STATUS_NULL_ARGUMENT = 1,
  // Bad configuration, argument or string encoding.
  CUBELET_STATUS_INVALID_ARGUMENT = 2,
  // Mesh generation or geometry failed.
  CUBELET_STATUS_MESH = 3,
  // The time loop diverged or broke a numerical limit.
  CUBELET_STATUS_NUMERICS = 4,
  // File system failure.
  CUBELET_STATUS_IO = 5,
  // Corrupt or incompatible checkpoint.
  CUBELET_STATUS_CHECKPOINT = 6,
  // Any other solver error.
  CUBELET_STATUS_INTERNAL = 7,
  // A bug: the library panicked.
  CUBELET_STATUS_PANIC = 8,
} CubeletStatus;

// A parsed case description.
typedef struct CubeletCase CubeletCase;

// Outcome of a finished run.
typedef struct CubeletRun CubeletRun;

typedef struct CubeletMeshStats {
  uint64_t cubes;
  uint64_t cells;
  uint32_t levels;
  uint64_t particles;
} CubeletMeshStats;

typedef struct CubeletCheckpointInfo {
  uint64_t cubes;
  uint32_t cells_per_edge;
  uint32_t fields;
  uint64_t particles;
  uint64_t step;
  double time;
} CubeletCheckpointInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cubelet_version(void);

// Message of the last failed call on this thread, or null after a success.
// Valid until the next call on this thread.
const char *cubelet_last_error(void);

// Parse a case from TOML text.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum CubeletStatus cubelet_case_from_toml(const char *toml, struct CubeletCase **out);

// Load a case file; relative body paths resolve against its folder.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CubeletStatus cubelet_case_load(const char *path, struct CubeletCase **out);

// Release a case. Null is ignored.
//
// # Safety
// `case` must come from this library and not be used afterwards.
void cubelet_case_free(struct CubeletCase *case_);

// Set the rank count and worker threads per rank.
//
// # Safety
// `case` must be a live handle.
enum CubeletStatus cubelet_case_set_parallel(struct CubeletCase *case_,
                                             uint32_t ranks,
                                             uint32_t threads);

// Set the end time of the run.
//
// # Safety
// `case` must be a live handle.
enum CubeletStatus cubelet_case_set_end_time(struct CubeletCase *case_, double end_time);

// Set the folder for forces, logs and checkpoints.
//
// # Safety
// `case` must be a live handle; `dir` a NUL-terminated string.
enum CubeletStatus cubelet_case_set_output_dir(struct CubeletCase *case_, const char *dir);

// Build the mesh and particles of a case and report their size.
//
// # Safety
// `case` must be a live handle; `out` must be writable.
enum CubeletStatus cubelet_case_mesh_stats(const struct CubeletCase *case_,
                                           struct CubeletMeshStats *out);

// Run a case to its end time, optionally resuming from a checkpoint
// (`restart` may be null).
//
// # Safety
// `case` must be a live handle; `restart` null or a NUL-terminated string;
// `out` must be writable.
enum CubeletStatus cubelet_run(const struct CubeletCase *case_,
                               const char *restart,
                               struct CubeletRun **out);

// Release a run. Null is ignored.
//
// # Safety
// `run` must come from this library and not be used afterwards.
void cubelet_run_free(struct CubeletRun *run);

// Final step number and time of a run.
//
// # Safety
// `run` must be a live handle; the out-pointers must be writable.
enum CubeletStatus cubelet_run_final(const struct CubeletRun *run, uint64_t *step, double *time);

// Number of recorded force samples.
//
// # Safety
// `run` must be a live handle.
size_t cubelet_run_force_count(const struct CubeletRun *run);

// Force sample `i` as `{t, fx, fy, fz}`.
//
// # Safety
// `run` must be a live handle; `out` must hold four doubles.
enum CubeletStatus cubelet_run_force(const struct CubeletRun *run, size_t i, double *out);

// Summary of a checkpoint file, after checking its integrity.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CubeletStatus cubelet_checkpoint_info(const char *path, struct CubeletCheckpointInfo *out);

// Compress one cube of `ncomp` components laid out as `side^3` values
// each. `q` is the detail quantization step; zero means lossless. The
// returned buffer is released with [`cubelet_bytes_free`].
//
// # Safety
// `values` must hold `ncomp * side^3` doubles; the out-pointers must be
// writable.
enum CubeletStatus cubelet_compress_cube(const double *values,
                                         size_t side,
                                         size_t ncomp,
                                         double q,
                                         uint8_t **out,
                                         size_t *out_len);

// Release a buffer from [`cubelet_compress_cube`].
//
// # Safety
// `ptr` and `len` must be exactly as returned.
void cubelet_bytes_free(uint8_t *ptr, size_t len);

// Decompress a cube stream into `values` (`ncomp * side^3` doubles).
//
// # Safety
// `bytes` must hold `len` bytes and `values` the decoded size.
enum CubeletStatus cubelet_decompress_cube(const uint8_t *bytes,
                                           size_t len,
                                           size_t side,
                                           size_t ncomp,
                                           double *values);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CUBELET_H */
