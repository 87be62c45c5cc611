#ifndef ALTO_H
#define ALTO_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  ALTO_STATUS_OK = 0,
  ALTO_STATUS_NULL_ARGUMENT = 1,
  ALTO_STATUS_CONFIG = 2,
  ALTO_STATUS_NUMERICAL = 3,
  ALTO_STATUS_DIMENSION = 4,
  ALTO_STATUS_CONTRACT = 5,
  ALTO_STATUS_CHECKPOINT = 6,
  ALTO_STATUS_PARSE = 7,
  ALTO_STATUS_IO = 8,
  ALTO_STATUS_PANIC = 9,
} AltoStatus;

// A triangle mesh.
typedef struct AltoMesh AltoMesh;

// A trained model loaded from a checkpoint.
typedef struct AltoModel AltoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the message of the last failure on this thread into `buf`
// (NUL-terminated, truncated to `len`). Returns the full message length,
// or 0 when there is none.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
uintptr_t alto_last_error(char *buf, uintptr_t len);

// Loads a checkpoint written by `alto train`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
AltoStatus alto_model_load(const char *path, AltoModel **out);

// # Safety
// `model` must be null or a handle from [`alto_model_load`] not yet freed.
void alto_model_free(AltoModel *model);

// Occupancy probabilities at `n_queries` points given an input cloud of
// `n_points` points, both as packed xyz triples in the unit cube.
//
// # Safety
// Arrays must hold `3 * n` doubles; `out` must hold `n_queries` doubles.
AltoStatus alto_model_predict(const AltoModel *model,
                              const double *points,
                              uintptr_t n_points,
                              const double *queries,
                              uintptr_t n_queries,
                              double *out);

// Extracts the `threshold` level set at lattice `resolution` and refines
// it for `refine_iters` bisection steps.
//
// # Safety
// `points` must hold `3 * n_points` doubles; `out` must be writable.
AltoStatus alto_model_reconstruct(const AltoModel *model,
                                  const double *points,
                                  uintptr_t n_points,
                                  uintptr_t resolution,
                                  double threshold,
                                  uintptr_t refine_iters,
                                  AltoMesh **out);

// Reads an ASCII OBJ file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
AltoStatus alto_mesh_read_obj(const char *path, AltoMesh **out);

// # Safety
// `mesh` must be a live handle; `path` a NUL-terminated string.
AltoStatus alto_mesh_write_obj(const AltoMesh *mesh, const char *path);

// Vertex count, or 0 for a null handle.
//
// # Safety
// `mesh` must be null or a live handle.
uintptr_t alto_mesh_vertex_count(const AltoMesh *mesh);

// Triangle count, or 0 for a null handle.
//
// # Safety
// `mesh` must be null or a live handle.
uintptr_t alto_mesh_face_count(const AltoMesh *mesh);

// Copies packed xyz vertex coordinates into `out`.
//
// # Safety
// `out` must hold `3 * alto_mesh_vertex_count(mesh)` doubles.
AltoStatus alto_mesh_vertices(const AltoMesh *mesh, double *out);

// Copies 0-based vertex indices, three per triangle, into `out`.
//
// # Safety
// `out` must hold `3 * alto_mesh_face_count(mesh)` values.
AltoStatus alto_mesh_faces(const AltoMesh *mesh, uint64_t *out);

// Chamfer-L1 x100 between `n` area-uniform samples on each mesh.
//
// # Safety
// Both handles must be live; `out` must be writable.
AltoStatus alto_mesh_chamfer(const AltoMesh *a,
                             const AltoMesh *b,
                             uintptr_t n,
                             uint64_t seed,
                             double *out);

// # Safety
// `mesh` must be null or a live handle.
void alto_mesh_free(AltoMesh *mesh);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALTO_H */
