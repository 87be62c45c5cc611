//! Dense occupancy evaluation, marching cubes, vertex refinement and
//! surface metrics.

mod metrics;
mod tables;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::ad::ParamSet;
use crate::convert::FeatureGrid;
use crate::decoder::{DecoderConfig, PreparedGrid};
use crate::error::{Error, Result};
use crate::geometry::{norm, Point, Transform};

pub use metrics::{
    analytic_samples, metric_chamfer_l1, metric_fscore, metric_iou, metric_normal_consistency, nearest_brute,
    surface_metrics, NearestIndex, SurfaceMetrics, SurfaceSamples,
};

use tables::{EDGE_TABLE, TRI_TABLE};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_REFINE_ITERS: usize = 10;

/// Occupancy at the nodes of a `res^3` lattice spanning the unit cube.
/// Node `(i, j, k)` sits at `(i, j, k) / (res - 1)` and is stored at
/// `(i * res + j) * res + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyVolume {
    pub res: usize,
    pub values: Vec<f64>,
}

impl OccupancyVolume {
    pub fn new(res: usize, values: Vec<f64>) -> Result<Self> {
        if res < 2 {
            return Err(Error::Config(format!("volume resolution must be at least 2, got {res}")));
        }
        if values.len() != res * res * res {
            return Err(Error::dim("OccupancyVolume", format!("{} values for resolution {res}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("occupancy {v} outside [0, 1]")));
        }
        Ok(OccupancyVolume { res, values })
    }

    /// Samples `f` at every node.
    pub fn from_fn(res: usize, f: impl Fn(Point) -> f64 + Sync) -> Result<Self> {
        let nodes = lattice_nodes(res);
        Self::new(res, nodes.par_iter().map(|&p| f(p)).collect())
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.res + j) * self.res + k]
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Point {
        let h = 1.0 / (self.res - 1) as f64;
        [i as f64 * h, j as f64 * h, k as f64 * h]
    }
}

/// Coordinates of all `res^3` nodes in storage order.
pub fn lattice_nodes(res: usize) -> Vec<Point> {
    let h = 1.0 / (res.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(res * res * res);
    for i in 0..res {
        for j in 0..res {
            for k in 0..res {
                out.push([i as f64 * h, j as f64 * h, k as f64 * h]);
            }
        }
    }
    out
}

/// Decoded occupancy at every node of a `res^3` lattice.
pub fn evaluate_grid(grid: &FeatureGrid, params: &ParamSet, cfg: &DecoderConfig, res: usize) -> Result<OccupancyVolume> {
    if res < 8 {
        return Err(Error::Config(format!("evaluation resolution must be at least 8, got {res}")));
    }
    let prepared = PreparedGrid::new(grid, params, cfg)?;
    let values = prepared.predict(&lattice_nodes(res), params, cfg)?;
    OccupancyVolume::new(res, values)
}

/// Triangle mesh in normalized coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        for t in &triangles {
            if t.iter().any(|&i| i >= vertices.len()) {
                return Err(Error::Contract(format!("triangle {t:?} indexes past {} vertices", vertices.len())));
            }
            if t[0] == t[1] && t[1] == t[2] {
                return Err(Error::Contract(format!("triangle {t:?} repeats one vertex")));
            }
        }
        Ok(Mesh { vertices, triangles })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Unnormalized `(v1 - v0) x (v2 - v0)`; twice the area in length.
    pub fn face_cross(&self, t: usize) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        cross(sub(b, a), sub(c, a))
    }

    /// Unit face normals; zero for degenerate faces.
    pub fn face_normals(&self) -> Vec<[f64; 3]> {
        (0..self.triangles.len())
            .map(|t| {
                let c = self.face_cross(t);
                let n = norm(c);
                if n > 0.0 { c.map(|x| x / n) } else { [0.0; 3] }
            })
            .collect()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| 0.5 * norm(self.face_cross(t)))
            .sum()
    }

    /// Positive for a closed mesh whose faces point outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// True when every undirected edge is used by exactly two faces, once in
    /// each direction.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                *directed.entry((t[e], t[(e + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Generalized winding number around `p`: 1 inside a closed outward
    /// mesh, 0 outside.
    pub fn winding_number(&self, p: Point) -> f64 {
        let mut omega = 0.0;
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| sub(self.vertices[i], p));
            let (la, lb, lc) = (norm(a), norm(b), norm(c));
            let num = dot(a, cross(b, c));
            let den = la * lb * lc + dot(a, b) * lc + dot(a, c) * lb + dot(b, c) * la;
            omega += 2.0 * num.atan2(den);
        }
        omega / (4.0 * std::f64::consts::PI)
    }

    /// 1 where the winding number is at least one half, else 0.
    pub fn inside_labels(&self, points: &[Point]) -> Vec<f64> {
        points
            .par_iter()
            .map(|&p| if self.winding_number(p) >= 0.5 { 1.0 } else { 0.0 })
            .collect()
    }

    /// Maps vertices back to the input frame of `transform`.
    pub fn inverse_transformed(&self, transform: &Transform) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|&v| transform.inverse(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }
}

/// The lattice edge a marching-cubes vertex lives on. The vertex is at
/// `inside + t * (outside - inside)`, and `[lo, hi]` is the parameter
/// interval known to contain the crossing: occupancy at `lo` is `>= tau`,
/// at `hi` it is `< tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeBracket {
    pub inside: Point,
    pub outside: Point,
    pub lo: f64,
    pub hi: f64,
    pub t: f64,
}

impl EdgeBracket {
    pub fn at(&self, t: f64) -> Point {
        [0, 1, 2].map(|a| self.inside[a] + t * (self.outside[a] - self.inside[a]))
    }
}

/// Marching-cubes output: the mesh plus, per vertex, its lattice edge.
#[derive(Clone, Debug, PartialEq)]
pub struct MarchedMesh {
    pub mesh: Mesh,
    pub edges: Vec<EdgeBracket>,
}

// Corner offsets and edge endpoints in the lookup tables' numbering.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [3, 2],
    [0, 3],
    [4, 5],
    [5, 6],
    [7, 6],
    [4, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Extracts the `tau` iso-surface of `vol`. A node counts as inside when its
/// occupancy is `>= tau`. Vertices are shared between faces along lattice
/// edges and faces are wound so their normals point toward lower occupancy.
pub fn marching_cubes(vol: &OccupancyVolume, tau: f64) -> Result<MarchedMesh> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("iso-threshold must be in (0, 1), got {tau}")));
    }
    let r = vol.res;
    let mut vertex_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut edges = Vec::new();
    let mut triangles = Vec::new();
    let flat = |c: [usize; 3]| (c[0] * r + c[1]) * r + c[2];
    for i in 0..r - 1 {
        for j in 0..r - 1 {
            for k in 0..r - 1 {
                let corner = CORNERS.map(|o| [i + o[0], j + o[1], k + o[2]]);
                let mut case = 0usize;
                for (c, p) in corner.iter().enumerate() {
                    if vol.values[flat(*p)] >= tau {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut local = [usize::MAX; 12];
                for (e, &[ca, cb]) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (na, nb) = (flat(corner[ca]), flat(corner[cb]));
                    let key = (na.min(nb), na.max(nb));
                    local[e] = *vertex_of.entry(key).or_insert_with(|| {
                        let (fa, fb) = (vol.values[na], vol.values[nb]);
                        let (pin, pout, fin, fout) = if fa >= tau {
                            (corner[ca], corner[cb], fa, fb)
                        } else {
                            (corner[cb], corner[ca], fb, fa)
                        };
                        let t = (fin - tau) / (fin - fout);
                        let b = EdgeBracket {
                            inside: vol.node(pin[0], pin[1], pin[2]),
                            outside: vol.node(pout[0], pout[1], pout[2]),
                            lo: 0.0,
                            hi: 1.0,
                            t,
                        };
                        vertices.push(b.at(t));
                        edges.push(b);
                        vertices.len() - 1
                    });
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    // The tables wind faces toward the side flagged in the
                    // case index, which here is the inside.
                    triangles.push([local[tri[0] as usize], local[tri[2] as usize], local[tri[1] as usize]]);
                }
            }
        }
    }
    Ok(MarchedMesh {
        mesh: Mesh { vertices, triangles },
        edges,
    })
}

/// Moves each vertex along its lattice edge toward the `tau` crossing of
/// `predictor`. Every iteration queries the midpoint of the current bracket,
/// keeps the half that still straddles `tau`, and moves the vertex there
/// unless its previous position was strictly closer to `tau`.
pub fn refine_vertices<F>(marched: &MarchedMesh, mut predictor: F, tau: f64, iters: usize) -> Result<MarchedMesh>
where
    F: FnMut(&[Point]) -> Result<Vec<f64>>,
{
    let mut out = marched.clone();
    if iters == 0 || out.edges.is_empty() {
        return Ok(out);
    }
    let n = out.edges.len();
    let mut query = |pts: &[Point]| -> Result<Vec<f64>> {
        let v = predictor(pts)?;
        if v.len() != pts.len() {
            return Err(Error::dim("refine_vertices", format!("predictor returned {} values for {} points", v.len(), pts.len())));
        }
        Ok(v)
    };
    let start: Vec<Point> = out.edges.iter().map(|b| b.at(b.t)).collect();
    let f0 = query(&start)?;
    let mut err: Vec<f64> = f0.iter().map(|f| (f - tau).abs()).collect();
    for (b, &f) in out.edges.iter_mut().zip(&f0) {
        narrow(b, b.t, f, tau);
    }
    for _ in 0..iters {
        let mids: Vec<f64> = out.edges.iter().map(|b| 0.5 * (b.lo + b.hi)).collect();
        let pts: Vec<Point> = out.edges.iter().zip(&mids).map(|(b, &m)| b.at(m)).collect();
        let f = query(&pts)?;
        for v in 0..n {
            let b = &mut out.edges[v];
            narrow(b, mids[v], f[v], tau);
            let e = (f[v] - tau).abs();
            if e <= err[v] {
                err[v] = e;
                b.t = mids[v];
            }
        }
    }
    for (v, b) in out.edges.iter().enumerate() {
        out.mesh.vertices[v] = b.at(b.t);
    }
    Ok(out)
}

fn narrow(b: &mut EdgeBracket, t: f64, f: f64, tau: f64) {
    if t <= b.lo || t >= b.hi {
        return;
    }
    if f >= tau {
        b.lo = t;
    } else {
        b.hi = t;
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
