#ifndef ARLC_H
#define ARLC_H

/* Generated by cbindgen from the arlc-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status code of every fallible call.
typedef enum ArlcStatus {
  ArlcStatus_Ok = 0,
  // A required pointer argument was null.
  ArlcStatus_NullArgument = 1,
  // A string argument was not valid UTF-8.
  ArlcStatus_InvalidUtf8 = 2,
  // Arguments violate the call's contract (sizes, ranges, geometry).
  ArlcStatus_InvalidArgument = 3,
  // The underlying file could not be read or written.
  ArlcStatus_IoError = 4,
  // The file exists but is not a valid checkpoint / IDX payload.
  ArlcStatus_FormatError = 5,
  // A non-finite value surfaced during computation.
  ArlcStatus_NumericError = 6,
  // An unexpected internal failure (a bug; details in the message).
  ArlcStatus_InternalError = 7,
} ArlcStatus;

// A loaded image/label split.
typedef struct ArlcDataset ArlcDataset;

// An opened checkpoint: parameters plus the run description needed to
// rebuild the architecture.
typedef struct ArlcModel ArlcModel;

// Architecture and provenance summary of an open model.
typedef struct ArlcModelInfo {
  // Training phase the checkpoint was written in (1 or 2).
  uint32_t phase;
  // Recurrent iteration count (1 for phase-1 checkpoints).
  uint32_t iterations;
  // Total scalar parameter count.
  uint64_t param_count;
  // Weight-update step size.
  double alpha;
  // Improvement-hinge weight used in training.
  double lambda;
  // Seed the run was trained with.
  uint64_t seed;
} ArlcModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *arlc_version(void);

// Message describing the most recent failure on this thread. The pointer
// stays valid until the next failing call on the same thread.
const char *arlc_last_error_message(void);

// Open a checkpoint file as a model handle. On success `*out` owns the
// model; release it with [`arlc_model_close`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ArlcStatus arlc_model_open(const char *path, struct ArlcModel **out);

// Release a model handle. Null is a no-op.
//
// # Safety
// `model` must be null or a pointer from [`arlc_model_open`], not yet closed.
void arlc_model_close(struct ArlcModel *model);

// Fill `*out` with the model's architecture summary.
//
// # Safety
// Both pointers must be valid.
enum ArlcStatus arlc_model_info(const struct ArlcModel *model, struct ArlcModelInfo *out);

// Per-iteration class scores for a batch of 28x28 grayscale images.
//
// `pixels` holds `sample_count * 784` values in [0, 1], row-major per
// sample. `out_logits` receives `sample_count * iterations * 10` values
// laid out as [sample][iteration][class]; `out_capacity` is its length.
//
// # Safety
// All pointers must be valid for the stated lengths.
enum ArlcStatus arlc_model_predict(const struct ArlcModel *model,
                                   const double *pixels,
                                   uintptr_t sample_count,
                                   double *out_logits,
                                   uintptr_t out_capacity);

// Open an IDX image/label pair (plain or gzip) as a dataset handle.
//
// # Safety
// `images_path` and `labels_path` must be NUL-terminated strings, `out` valid.
enum ArlcStatus arlc_dataset_open(const char *images_path,
                                  const char *labels_path,
                                  struct ArlcDataset **out);

// Release a dataset handle. Null is a no-op.
//
// # Safety
// `dataset` must be null or a pointer from [`arlc_dataset_open`].
void arlc_dataset_close(struct ArlcDataset *dataset);

// Number of samples in a dataset; zero for null.
//
// # Safety
// `dataset` must be null or a valid handle.
uint64_t arlc_dataset_len(const struct ArlcDataset *dataset);

// Top-1 accuracy (percent) of the model on a dataset, one value per
// iteration. `out_count` receives how many values were written.
//
// # Safety
// All pointers must be valid; `out_accuracies` must hold `capacity` values.
enum ArlcStatus arlc_model_evaluate(const struct ArlcModel *model,
                                    const struct ArlcDataset *dataset,
                                    double *out_accuracies,
                                    uintptr_t capacity,
                                    uintptr_t *out_count);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* ARLC_H */
