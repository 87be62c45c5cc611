//! C interface. Models and meshes are opaque heap handles released with
//! their `_free` function; every call returns an [`AltoStatus`] and, on
//! failure, leaves a message for [`alto_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use alto::cli::{reconstruct, MeshConfig};
use alto::decoder::predict_occupancy;
use alto::encoder::encode;
use alto::geometry::{Point, PointCloud};
use alto::mesh::{metric_chamfer_l1, Mesh};
use alto::train::{Checkpoint, ModelConfig};
use alto::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AltoStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Numerical = 3,
    Dimension = 4,
    Contract = 5,
    Checkpoint = 6,
    Parse = 7,
    Io = 8,
    Panic = 9,
}

/// A trained model loaded from a checkpoint.
pub struct AltoModel {
    model: ModelConfig,
    params: alto::ad::ParamSet,
}

/// A triangle mesh.
pub struct AltoMesh {
    mesh: Mesh,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AltoStatus {
    match e {
        Error::Dimension { .. } => AltoStatus::Dimension,
        Error::Config(_) | Error::Json(_) => AltoStatus::Config,
        Error::Contract(_) => AltoStatus::Contract,
        Error::Numerical(_) => AltoStatus::Numerical,
        Error::Checkpoint(_) => AltoStatus::Checkpoint,
        Error::Parse(_) => AltoStatus::Parse,
        Error::Io(_) => AltoStatus::Io,
    }
}

struct Fail(AltoStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AltoStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AltoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AltoStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            AltoStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AltoStatus::Config, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn points_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<Vec<Point>, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let flat: &'a [f64] = slice::from_raw_parts(p, n * 3);
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

unsafe fn model_ref<'a>(m: *const AltoModel) -> Result<&'a AltoModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn mesh_ref<'a>(m: *const AltoMesh) -> Result<&'a AltoMesh, Fail> {
    m.as_ref().ok_or_else(|| null("mesh"))
}

/// Copies the message of the last failure on this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length,
/// or 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn alto_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint written by `alto train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn alto_model_load(path: *const c_char, out: *mut *mut AltoModel) -> AltoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        let model = ckpt.model()?;
        *out = Box::into_raw(Box::new(AltoModel { model, params: ckpt.params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`alto_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn alto_model_free(model: *mut AltoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Occupancy probabilities at `n_queries` points given an input cloud of
/// `n_points` points, both as packed xyz triples in the unit cube.
///
/// # Safety
/// Arrays must hold `3 * n` doubles; `out` must hold `n_queries` doubles.
#[no_mangle]
pub unsafe extern "C" fn alto_model_predict(
    model: *const AltoModel,
    points: *const f64,
    n_points: usize,
    queries: *const f64,
    n_queries: usize,
    out: *mut f64,
) -> AltoStatus {
    guard(|| {
        let m = model_ref(model)?;
        let cloud = PointCloud::from_normalized(points_arg(points, n_points, "points")?)?;
        let q = points_arg(queries, n_queries, "queries")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let grid = encode(&cloud, &m.params, &m.model.encoder)?;
        let p = predict_occupancy(&grid, &q, &m.params, &m.model.decoder)?;
        slice::from_raw_parts_mut(out, n_queries).copy_from_slice(&p);
        Ok(())
    })
}

/// Extracts the `threshold` level set at lattice `resolution` and refines
/// it for `refine_iters` bisection steps.
///
/// # Safety
/// `points` must hold `3 * n_points` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn alto_model_reconstruct(
    model: *const AltoModel,
    points: *const f64,
    n_points: usize,
    resolution: usize,
    threshold: f64,
    refine_iters: usize,
    out: *mut *mut AltoMesh,
) -> AltoStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cloud = PointCloud::from_normalized(points_arg(points, n_points, "points")?)?;
        let cfg = MeshConfig { resolution, threshold, refine_iters, ..MeshConfig::default() };
        let mesh = reconstruct(&cloud, &m.params, &m.model, &cfg)?;
        *out = Box::into_raw(Box::new(AltoMesh { mesh }));
        Ok(())
    })
}

/// Reads an ASCII OBJ file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn alto_mesh_read_obj(path: *const c_char, out: *mut *mut AltoMesh) -> AltoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mesh = alto::io::read_obj(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AltoMesh { mesh }));
        Ok(())
    })
}

/// # Safety
/// `mesh` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn alto_mesh_write_obj(mesh: *const AltoMesh, path: *const c_char) -> AltoStatus {
    guard(|| {
        let m = mesh_ref(mesh)?;
        alto::io::write_obj(&path_arg(path)?, &m.mesh)?;
        Ok(())
    })
}

/// Vertex count, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alto_mesh_vertex_count(mesh: *const AltoMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.mesh.vertices.len())
}

/// Triangle count, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alto_mesh_face_count(mesh: *const AltoMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.mesh.triangles.len())
}

/// Copies packed xyz vertex coordinates into `out`.
///
/// # Safety
/// `out` must hold `3 * alto_mesh_vertex_count(mesh)` doubles.
#[no_mangle]
pub unsafe extern "C" fn alto_mesh_vertices(mesh: *const AltoMesh, out: *mut f64) -> AltoStatus {
    guard(|| {
        let m = mesh_ref(mesh)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dst = slice::from_raw_parts_mut(out, m.mesh.vertices.len() * 3);
        for (d, v) in dst.chunks_exact_mut(3).zip(&m.mesh.vertices) {
            d.copy_from_slice(v);
        }
        Ok(())
    })
}

/// Copies 0-based vertex indices, three per triangle, into `out`.
///
/// # Safety
/// `out` must hold `3 * alto_mesh_face_count(mesh)` values.
#[no_mangle]
pub unsafe extern "C" fn alto_mesh_faces(mesh: *const AltoMesh, out: *mut u64) -> AltoStatus {
    guard(|| {
        let m = mesh_ref(mesh)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dst = slice::from_raw_parts_mut(out, m.mesh.triangles.len() * 3);
        for (d, t) in dst.chunks_exact_mut(3).zip(&m.mesh.triangles) {
            for k in 0..3 {
                d[k] = t[k] as u64;
            }
        }
        Ok(())
    })
}

/// Chamfer-L1 x100 between `n` area-uniform samples on each mesh.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn alto_mesh_chamfer(a: *const AltoMesh, b: *const AltoMesh, n: usize, seed: u64, out: *mut f64) -> AltoStatus {
    guard(|| {
        let (a, b) = (mesh_ref(a)?, mesh_ref(b)?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metric_chamfer_l1(&a.mesh, &b.mesh, n, seed)?;
        Ok(())
    })
}

/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alto_mesh_free(mesh: *mut AltoMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}
