use rand::Rng;
use rayon::prelude::*;

use super::Mesh;
use crate::error::{Error, Result};
use crate::geometry::{self, stream, Point, ShapeSpec};

/// Oriented surface samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<Point>,
    pub normals: Vec<[f64; 3]>,
}

impl SurfaceSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl Mesh {
    /// `n` points drawn uniformly by area, each with its face normal.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<SurfaceSamples> {
        if n == 0 {
            return Err(Error::Contract("surface sample count must be at least 1".into()));
        }
        let normals = self.face_normals();
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            total += 0.5 * geometry::norm(self.face_cross(t));
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::Contract("cannot sample a mesh with zero surface area".into()));
        }
        let mut r = geometry::rng(seed, stream::MESH_SAMPLES);
        let mut points = Vec::with_capacity(n);
        let mut out_normals = Vec::with_capacity(n);
        for _ in 0..n {
            let pick = r.gen::<f64>() * total;
            let t = cumulative.partition_point(|&c| c <= pick).min(cumulative.len() - 1);
            let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
            let (u, v): (f64, f64) = (r.gen(), r.gen());
            let su = u.sqrt();
            let (wa, wb, wc) = (1.0 - su, su * (1.0 - v), su * v);
            points.push([0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k]));
            out_normals.push(normals[t]);
        }
        Ok(SurfaceSamples { points, normals: out_normals })
    }
}

/// Samples on the analytic boundary of `spec` with exact normals.
pub fn analytic_samples(spec: &ShapeSpec, n: usize, seed: u64) -> Result<SurfaceSamples> {
    let points = geometry::sample_surface(spec, n, seed)?;
    let normals = points.iter().map(|&p| spec.surface_normal(p)).collect();
    Ok(SurfaceSamples { points, normals })
}

fn dist(a: Point, b: Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Nearest point by exhaustive search; ties go to the lower index.
pub fn nearest_brute(points: &[Point], q: Point) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, &p) in points.iter().enumerate() {
        let d = dist(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Uniform bucket grid for exact nearest-neighbour queries. Answers equal
/// [`nearest_brute`] including tie-breaking.
pub struct NearestIndex<'a> {
    points: &'a [Point],
    origin: Point,
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NearestIndex<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if points.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(1e-9);
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 256);
        let cell = extent / per_axis as f64;
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell) as usize + 1).min(per_axis + 1));
        let mut idx = NearestIndex { points, origin: lo, cell, dims, start: Vec::new(), order: Vec::new() };
        let n_cells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|&p| idx.flat(idx.cell_of(p))).collect();
        let mut count = vec![0usize; n_cells + 1];
        for &k in &keys {
            count[k + 1] += 1;
        }
        for c in 0..n_cells {
            count[c + 1] += count[c];
        }
        let mut fill = count.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        idx.start = count;
        idx.order = order;
        idx
    }

    fn cell_of(&self, p: Point) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            if c <= 0.0 { 0 } else { (c as usize).min(self.dims[a] - 1) }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Index of and distance to the nearest indexed point.
    pub fn nearest(&self, q: Point) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        if self.points.is_empty() {
            return best;
        }
        let c = self.cell_of(q);
        let max_ring = self.dims.iter().copied().max().unwrap_or(1);
        for ring in 0..=max_ring {
            let r = ring as isize;
            for di in -r..=r {
                for dj in -r..=r {
                    for dk in -r..=r {
                        if di.abs().max(dj.abs()).max(dk.abs()) != r {
                            continue;
                        }
                        let cc = [c[0] as isize + di, c[1] as isize + dj, c[2] as isize + dk];
                        if (0..3).any(|a| cc[a] < 0 || cc[a] >= self.dims[a] as isize) {
                            continue;
                        }
                        let f = self.flat(cc.map(|x| x as usize));
                        for &i in &self.order[self.start[f]..self.start[f + 1]] {
                            let d = dist(self.points[i], q);
                            if d < best.1 || (d == best.1 && i < best.0) {
                                best = (i, d);
                            }
                        }
                    }
                }
            }
            // Anything in a later ring is at least `ring * cell` away.
            if best.1 < ring as f64 * self.cell * (1.0 - 1e-9) {
                break;
            }
        }
        best
    }
}

fn nearest_all(from: &[Point], to: &[Point]) -> Vec<(usize, f64)> {
    let idx = NearestIndex::new(to);
    from.par_iter().map(|&q| idx.nearest(q)).collect()
}

/// Surface metrics between a prediction `a` and a reference `b`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct SurfaceMetrics {
    pub chamfer_l1_x100: f64,
    pub normal_consistency: f64,
    pub fscore: f64,
}

/// Chamfer-L1 (x100), normal consistency and F-score at `threshold` from one
/// pair of nearest-neighbour passes.
pub fn surface_metrics(a: &SurfaceSamples, b: &SurfaceSamples, threshold: f64) -> Result<SurfaceMetrics> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("surface metrics need nonempty sample sets".into()));
    }
    let ab = nearest_all(&a.points, &b.points);
    let ba = nearest_all(&b.points, &a.points);
    let mean = |v: &[(usize, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    let chamfer = 0.5 * (mean(&ab) + mean(&ba)) * 100.0;
    let nc_dir = |src: &SurfaceSamples, dst: &SurfaceSamples, m: &[(usize, f64)]| {
        m.iter()
            .enumerate()
            .map(|(i, &(j, _))| crate::mesh::dot(src.normals[i], dst.normals[j]).abs())
            .sum::<f64>()
            / m.len() as f64
    };
    let nc = 0.5 * (nc_dir(a, b, &ab) + nc_dir(b, a, &ba));
    let within = |m: &[(usize, f64)]| m.iter().filter(|x| x.1 <= threshold).count() as f64 / m.len() as f64;
    let (precision, recall) = (within(&ab), within(&ba));
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(SurfaceMetrics { chamfer_l1_x100: chamfer, normal_consistency: nc, fscore })
}

fn mesh_metrics(a: &Mesh, b: &Mesh, threshold: f64, n: usize, seed: u64) -> Result<SurfaceMetrics> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("surface metrics need two nonempty meshes".into()));
    }
    surface_metrics(&a.sample_surface(n, seed)?, &b.sample_surface(n, seed)?, threshold)
}

/// Symmetric mean nearest-neighbour distance between `n` area-uniform
/// samples on each mesh, times 100.
pub fn metric_chamfer_l1(a: &Mesh, b: &Mesh, n: usize, seed: u64) -> Result<f64> {
    Ok(mesh_metrics(a, b, 0.01, n, seed)?.chamfer_l1_x100)
}

/// Mean |cos| between each sample's face normal and that of its nearest
/// sample on the other mesh, averaged over both directions.
pub fn metric_normal_consistency(a: &Mesh, b: &Mesh, n: usize, seed: u64) -> Result<f64> {
    Ok(mesh_metrics(a, b, 0.01, n, seed)?.normal_consistency)
}

pub fn metric_fscore(a: &Mesh, b: &Mesh, threshold: f64, n: usize, seed: u64) -> Result<f64> {
    Ok(mesh_metrics(a, b, threshold, n, seed)?.fscore)
}

/// Intersection over union of two {0,1} label sets; 1 when both are empty.
pub fn metric_iou(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("metric_iou", format!("{} vs {} labels", pred.len(), gt.len())));
    }
    if let Some(v) = pred.iter().chain(gt).find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract(format!("label {v} is not 0 or 1")));
    }
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p == 1.0 && **g == 1.0).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p == 1.0 || **g == 1.0).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
