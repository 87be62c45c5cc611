//! Conversions between per-point features and feature grids.
//!
//! Grids use a node-centred lattice: node `i` of a resolution-`R` axis sits
//! at `i / (R - 1)`. Interpolation reads the 2 (per axis) surrounding nodes;
//! scattering assigns each point to its nearest node, ties going to the
//! lower index. A triplane holds planes xy, xz and yz; a volume is a single
//! "plane" over all three axes, so both share the same code paths.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ad::{Bound, Graph, ParamSet, SparseMap, Var};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    #[default]
    Triplane,
    Volume,
}

const TRIPLANE_AXES: [&[usize]; 3] = [&[0, 1], &[0, 2], &[1, 2]];
const VOLUME_AXES: [&[usize]; 1] = [&[0, 1, 2]];

impl GridMode {
    /// Coordinate axes spanned by each plane.
    pub fn plane_axes(self) -> &'static [&'static [usize]] {
        match self {
            GridMode::Triplane => &TRIPLANE_AXES,
            GridMode::Volume => &VOLUME_AXES,
        }
    }

    pub fn n_planes(self) -> usize {
        self.plane_axes().len()
    }

    /// Spatial rank of one plane.
    pub fn dims(self) -> usize {
        self.plane_axes()[0].len()
    }

    pub fn plane_shape(self, res: usize, channels: usize) -> Vec<usize> {
        let mut s = vec![res; self.dims()];
        s.push(channels);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub mode: GridMode,
    pub res: usize,
    pub channels: usize,
    pub planes: Vec<Tensor>,
}

impl FeatureGrid {
    pub fn new(mode: GridMode, planes: Vec<Tensor>) -> Result<Self> {
        if planes.len() != mode.n_planes() {
            return Err(Error::dim(
                "feature_grid",
                format!("{mode:?} needs {} planes, got {}", mode.n_planes(), planes.len()),
            ));
        }
        let shape = planes[0].shape().to_vec();
        let res = shape[0];
        let channels = *shape.last().unwrap_or(&0);
        if res < 2 || shape != mode.plane_shape(res, channels) || planes.iter().any(|p| p.shape() != shape) {
            return Err(Error::dim(
                "feature_grid",
                format!("planes must all be {:?}", mode.plane_shape(res.max(2), channels)),
            ));
        }
        Ok(FeatureGrid {
            mode,
            res,
            channels,
            planes,
        })
    }

    pub fn zeros(mode: GridMode, res: usize, channels: usize) -> Self {
        let shape = mode.plane_shape(res, channels);
        FeatureGrid {
            mode,
            res,
            channels,
            planes: (0..mode.n_planes()).map(|_| Tensor::zeros(&shape)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureGrid) -> f64 {
        self.planes
            .iter()
            .zip(&other.planes)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &FeatureGrid) -> bool {
        self.mode == other.mode
            && self.planes.len() == other.planes.len()
            && self.planes.iter().zip(&other.planes).all(|(a, b)| a.bitwise_eq(b))
    }
}

/// A lattice of `res` nodes per axis, node `i` at `i / scale`. The standard
/// lattice over `[0,1]` has `scale = res - 1`; coarser U-Net levels keep
/// every other node of the level above, so their last node may stop short
/// of 1 and coordinates past it clamp onto it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub res: usize,
    pub scale: f64,
}

impl Lattice {
    pub fn unit(res: usize) -> Self {
        Lattice {
            res,
            scale: (res - 1) as f64,
        }
    }

    /// Every other node of `self`.
    pub fn coarsen(self) -> Self {
        Lattice {
            res: self.res.div_ceil(2),
            scale: self.scale / 2.0,
        }
    }

    pub fn node_coord(self, i: usize) -> f64 {
        i as f64 / self.scale
    }

    /// Continuous node-index coordinate of `c`, clamped to the lattice.
    fn position(self, c: f64) -> f64 {
        (check_coord(c) * self.scale).min((self.res - 1) as f64)
    }

    /// Nearest node to `c`, exact half-cell ties rounding down.
    pub fn nearest(self, c: f64) -> usize {
        let t = self.position(c);
        ((t - 0.5).ceil().max(0.0) as usize).min(self.res - 1)
    }

    pub fn n_nodes(self, dims: usize) -> usize {
        self.res.pow(dims as u32)
    }
}

pub fn node_coord(i: usize, res: usize) -> f64 {
    Lattice::unit(res).node_coord(i)
}

fn check_coord(c: f64) -> f64 {
    debug_assert!((-1e-9..=1.0 + 1e-9).contains(&c), "coordinate {c} outside [0,1]");
    c.clamp(0.0, 1.0)
}

/// Nearest node of the standard lattice to `c`, exact half-cell ties rounding down.
pub fn nearest_node(c: f64, res: usize) -> usize {
    Lattice::unit(res).nearest(c)
}

/// Row-major flat index of a lattice node.
pub fn flat_index(idx: &[usize], res: usize) -> usize {
    idx.iter().fold(0, |acc, &i| acc * res + i)
}

/// The `2^k` interpolation nodes and weights of `p` on the plane spanned by
/// `axes`, in lexicographic corner order.
pub fn interp_weights(p: Point, axes: &[usize], lat: Lattice) -> Vec<(usize, f64)> {
    let k = axes.len();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for (j, &a) in axes.iter().enumerate() {
        let t = lat.position(p[a]);
        let i0 = (t.floor() as usize).min(lat.res - 2);
        base[j] = i0;
        frac[j] = t - i0 as f64;
    }
    (0..1usize << k)
        .map(|m| {
            let mut idx = [0usize; 3];
            let mut w = 1.0;
            for j in 0..k {
                let bit = (m >> (k - 1 - j)) & 1;
                idx[j] = base[j] + bit;
                w *= if bit == 1 { frac[j] } else { 1.0 - frac[j] };
            }
            (flat_index(&idx[..k], lat.res), w)
        })
        .collect()
}

pub fn gather_map(points: &[Point], axes: &[usize], lat: Lattice) -> SparseMap {
    SparseMap::from_rows(
        lat.n_nodes(axes.len()),
        points.iter().map(|&p| interp_weights(p, axes, lat)),
    )
}

/// Flat nearest-node index of every point on the plane spanned by `axes`.
pub fn assign_nodes(points: &[Point], axes: &[usize], lat: Lattice) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let idx: Vec<usize> = axes.iter().map(|&a| lat.nearest(p[a])).collect();
            flat_index(&idx, lat.res)
        })
        .collect()
}

fn node_members(nodes: &[usize], n_nodes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); n_nodes];
    for (p, &n) in nodes.iter().enumerate() {
        members[n].push(p);
    }
    members
}

/// Index structures tying one point set to one lattice resolution.
#[derive(Clone, Debug)]
pub struct PointMaps {
    pub mode: GridMode,
    pub res: usize,
    pub n_points: usize,
    /// Interpolating gather, grid rows to point rows, per plane.
    pub gather: Vec<Arc<SparseMap>>,
    /// Mean over the points assigned to each node, per plane.
    pub scatter: Vec<Arc<SparseMap>>,
    /// Unit-weight membership groups for max pooling, per plane.
    pub groups: Vec<SparseMap>,
    /// Reads each point's own node, per plane.
    pub pick: Vec<Arc<SparseMap>>,
}

impl PointMaps {
    pub fn new(points: &[Point], mode: GridMode, res: usize) -> Result<Self> {
        if res < 2 {
            return Err(Error::Config(format!("grid resolution must be at least 2, got {res}")));
        }
        Self::on_lattice(points, mode, Lattice::unit(res))
    }

    pub fn on_lattice(points: &[Point], mode: GridMode, lat: Lattice) -> Result<Self> {
        let res = lat.res;
        if res < 2 {
            return Err(Error::Config(format!("grid resolution must be at least 2, got {res}")));
        }
        if points.is_empty() {
            return Err(Error::Contract("no points to map".into()));
        }
        let n_nodes = res.pow(mode.dims() as u32);
        let mut maps = PointMaps {
            mode,
            res,
            n_points: points.len(),
            gather: Vec::new(),
            scatter: Vec::new(),
            groups: Vec::new(),
            pick: Vec::new(),
        };
        for &axes in mode.plane_axes() {
            maps.gather.push(Arc::new(gather_map(points, axes, lat)));
            let nodes = assign_nodes(points, axes, lat);
            let members = node_members(&nodes, n_nodes);
            let scatter = SparseMap::from_rows(
                points.len(),
                members.iter().map(|m| {
                    let w = 1.0 / m.len().max(1) as f64;
                    m.iter().map(move |&p| (p, w))
                }),
            );
            let groups = SparseMap::from_rows(points.len(), members.iter().map(|m| m.iter().map(|&p| (p, 1.0))));
            maps.scatter.push(Arc::new(scatter));
            maps.groups.push(groups);
            maps.pick.push(Arc::new(SparseMap::from_rows(n_nodes, nodes.iter().map(|&n| [(n, 1.0)]))));
        }
        Ok(maps)
    }

    fn plane_shape(&self, channels: usize) -> Vec<usize> {
        self.mode.plane_shape(self.res, channels)
    }
}

fn channels_of(g: &Graph, v: Var) -> usize {
    *g.shape(v).last().unwrap_or(&0)
}

fn check_planes(g: &Graph, planes: &[Var], maps: &PointMaps, op: &'static str) -> Result<()> {
    if planes.len() != maps.mode.n_planes() {
        return Err(Error::dim(op, format!("expected {} planes, got {}", maps.mode.n_planes(), planes.len())));
    }
    let c = channels_of(g, planes[0]);
    let want = maps.plane_shape(c);
    if let Some(&bad) = planes.iter().find(|&&p| g.shape(p) != want.as_slice()) {
        return Err(Error::Config(format!(
            "grid plane shape {:?} does not match point maps at resolution {} ({want:?})",
            g.shape(bad),
            maps.res
        )));
    }
    Ok(())
}

/// Sum over planes of `maps[i]` applied to plane `i`, as an `N x C` matrix.
fn gather_with(g: &mut Graph, planes: &[Var], maps: &[Arc<SparseMap>], n: usize) -> Result<Var> {
    let c = channels_of(g, planes[0]);
    let mut acc: Option<Var> = None;
    for (&plane, map) in planes.iter().zip(maps) {
        let v = g.sparse(plane, map.clone(), &[n, c])?;
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    acc.ok_or_else(|| Error::dim("gather", "no planes"))
}

/// Interpolated grid features at every point (summed over triplane planes).
pub fn grid_to_point_graph(g: &mut Graph, planes: &[Var], maps: &PointMaps) -> Result<Var> {
    check_planes(g, planes, maps, "grid_to_point")?;
    gather_with(g, planes, &maps.gather, maps.n_points)
}

/// Each point's own nearest-node feature (summed over planes).
pub fn pick_nodes_graph(g: &mut Graph, planes: &[Var], maps: &PointMaps) -> Result<Var> {
    check_planes(g, planes, maps, "pick_nodes")?;
    gather_with(g, planes, &maps.pick, maps.n_points)
}

fn check_features(g: &Graph, feats: Var, maps: &PointMaps, op: &'static str) -> Result<usize> {
    match g.shape(feats) {
        [n, c] if *n == maps.n_points => Ok(*c),
        s => Err(Error::dim(op, format!("point features {s:?} do not match {} points", maps.n_points))),
    }
}

/// Mean of the features assigned to each node; empty nodes are zero.
pub fn scatter_mean_graph(g: &mut Graph, feats: Var, maps: &PointMaps) -> Result<Vec<Var>> {
    let c = check_features(g, feats, maps, "scatter_mean")?;
    let shape = maps.plane_shape(c);
    maps.scatter.iter().map(|m| g.sparse(feats, m.clone(), &shape)).collect()
}

/// Per-channel max of the features assigned to each node; empty nodes are zero.
pub fn scatter_max_graph(g: &mut Graph, feats: Var, maps: &PointMaps) -> Result<Vec<Var>> {
    let c = check_features(g, feats, maps, "scatter_max")?;
    let shape = maps.plane_shape(c);
    maps.groups.iter().map(|m| g.group_max(feats, m, &shape)).collect()
}

/// Point MLP `name` (linear, ReLU, linear) followed by scatter-mean. Every
/// triplane plane receives the same MLP output.
pub fn point_to_grid_graph(g: &mut Graph, p: &Bound, name: &str, feats: Var, maps: &PointMaps) -> Result<Vec<Var>> {
    let h = nn::mlp2(g, p, feats, name)?;
    scatter_mean_graph(g, h, maps)
}

fn points_from_uv(uv: &[[f64; 2]]) -> Vec<Point> {
    uv.iter().map(|&[u, v]| [u, v, 0.0]).collect()
}

fn apply_map(map: &SparseMap, input: &Tensor, rows: usize) -> Tensor {
    let (_, c) = input.rows_cols();
    Tensor::new(&[rows, c], map.apply(input.data(), c)).expect("sparse map output shape")
}

fn check_plane(plane: &Tensor, dims: usize, op: &'static str) -> Result<usize> {
    let s = plane.shape();
    if s.len() != dims + 1 || s[0] < 2 || s[..dims].iter().any(|&e| e != s[0]) {
        return Err(Error::dim(op, format!("expected a square {dims}-D grid with channels, got {s:?}")));
    }
    Ok(s[0])
}

/// Bilinear read of an `R x R x C` plane at `uv` (axis 0 = u, axis 1 = v).
pub fn interpolate_bilinear(plane: &Tensor, uv: &[[f64; 2]]) -> Result<Tensor> {
    let res = check_plane(plane, 2, "interpolate_bilinear")?;
    let map = gather_map(&points_from_uv(uv), &[0, 1], Lattice::unit(res));
    Ok(apply_map(&map, plane, uv.len()))
}

/// Trilinear read of an `R x R x R x C` volume.
pub fn interpolate_trilinear(volume: &Tensor, xyz: &[Point]) -> Result<Tensor> {
    let res = check_plane(volume, 3, "interpolate_trilinear")?;
    let map = gather_map(xyz, &[0, 1, 2], Lattice::unit(res));
    Ok(apply_map(&map, volume, xyz.len()))
}

/// Grid features at `points`: trilinear for volumes, the sum of the three
/// projected bilinear reads for triplanes.
pub fn grid_to_point(grid: &FeatureGrid, points: &[Point]) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[points.len(), grid.channels]);
    for (plane, &axes) in grid.planes.iter().zip(grid.mode.plane_axes()) {
        let t = apply_map(&gather_map(points, axes, Lattice::unit(grid.res)), plane, points.len());
        out.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

pub fn scatter_mean(points: &[Point], feats: &Tensor, mode: GridMode, res: usize) -> Result<FeatureGrid> {
    let maps = PointMaps::new(points, mode, res)?;
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let planes = scatter_mean_graph(&mut g, f, &maps)?;
    FeatureGrid::new(mode, planes.iter().map(|&v| g.value(v).clone()).collect())
}

/// Point MLP (`params` holding `name.0.*`, `name.1.*`) then scatter-mean.
pub fn point_to_grid(
    points: &[Point],
    feats: &Tensor,
    params: &ParamSet,
    name: &str,
    mode: GridMode,
    res: usize,
) -> Result<FeatureGrid> {
    let maps = PointMaps::new(points, mode, res)?;
    let mut g = Graph::new();
    let p = params.bind_const(&mut g);
    let f = g.constant(feats.clone());
    let planes = point_to_grid_graph(&mut g, &p, name, f, &maps)?;
    FeatureGrid::new(mode, planes.iter().map(|&v| g.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rng;
    use rand::Rng;

    fn rand_tensor<R: Rng>(r: &mut R, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_points<R: Rng>(r: &mut R, n: usize) -> Vec<Point> {
        (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect()
    }

    #[test]
    fn bilinear_basics() {
        let c = Tensor::full(&[4, 4, 2], 1.7);
        let v = interpolate_bilinear(&c, &[[0.3, 0.9], [0.0, 1.0]]).unwrap();
        assert!(v.data().iter().all(|&x| (x - 1.7).abs() < 1e-15));

        let plane = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(interpolate_bilinear(&plane, &[[0.5, 0.5]]).unwrap().data(), &[1.5]);

        let plane = Tensor::new(&[3, 3, 1], (0..9).map(|i| i as f64 * 1.5).collect()).unwrap();
        let v = interpolate_bilinear(&plane, &[[0.5, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(v.data(), &[plane.get(&[1, 2, 0]), plane.get(&[2, 0, 0])]);
    }

    #[test]
    fn trilinear_matches_weight_expansion() {
        let mut r = rng(1, 0);
        let vol = rand_tensor(&mut r, &[3, 3, 3, 2]);
        let pts = rand_points(&mut r, 50);
        let got = interpolate_trilinear(&vol, &pts).unwrap();
        for (n, p) in pts.iter().enumerate() {
            let t = p.map(|c| c * 2.0);
            let i0 = t.map(|x| (x.floor() as usize).min(1));
            for ch in 0..2 {
                let mut want = 0.0;
                for dx in 0..2 {
                    for dy in 0..2 {
                        for dz in 0..2 {
                            let w = |d: usize, a: usize| {
                                let f = t[a] - i0[a] as f64;
                                if d == 1 { f } else { 1.0 - f }
                            };
                            want += w(dx, 0) * w(dy, 1) * w(dz, 2)
                                * vol.get(&[i0[0] + dx, i0[1] + dy, i0[2] + dz, ch]);
                        }
                    }
                }
                assert!((got.get(&[n, ch]) - want).abs() < 1e-12);
            }
        }
        let node = interpolate_trilinear(&vol, &[[0.5, 1.0, 0.0]]).unwrap();
        assert_eq!(node.data(), &[vol.get(&[1, 2, 0, 0]), vol.get(&[1, 2, 0, 1])]);
    }

    #[test]
    fn triplane_gather_sums_planes() {
        let mut r = rng(2, 0);
        let planes: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[5, 5, 3])).collect();
        let grid = FeatureGrid::new(GridMode::Triplane, planes.clone()).unwrap();
        let pts = rand_points(&mut r, 40);
        let got = grid_to_point(&grid, &pts).unwrap();
        let proj = |p: &Point, i: usize| match i {
            0 => [p[0], p[1]],
            1 => [p[0], p[2]],
            _ => [p[1], p[2]],
        };
        for (n, p) in pts.iter().enumerate() {
            for ch in 0..3 {
                let want: f64 = (0..3)
                    .map(|i| interpolate_bilinear(&planes[i], &[proj(p, i)]).unwrap().get(&[0, ch]))
                    .sum();
                assert!((got.get(&[n, ch]) - want).abs() < 1e-12);
            }
        }
        let consts = FeatureGrid::new(
            GridMode::Triplane,
            vec![Tensor::full(&[4, 4, 1], 1.0), Tensor::full(&[4, 4, 1], 2.0), Tensor::full(&[4, 4, 1], 4.0)],
        )
        .unwrap();
        let v = grid_to_point(&consts, &pts).unwrap();
        assert!(v.data().iter().all(|&x| (x - 7.0).abs() < 1e-12));
    }

    #[test]
    fn nearest_node_ties_round_down() {
        assert_eq!(nearest_node(0.125, 5), 0);
        assert_eq!(nearest_node(0.126, 5), 1);
        assert_eq!(nearest_node(0.375, 5), 1);
        assert_eq!(nearest_node(1.0, 5), 4);
        assert_eq!(nearest_node(0.0, 5), 0);
    }

    #[test]
    fn scatter_mean_small_cases() {
        let g = scatter_mean(&[[0.5, 0.5, 0.5]], &Tensor::new(&[1, 2], vec![3.0, -1.0]).unwrap(), GridMode::Volume, 3)
            .unwrap();
        let v = &g.planes[0];
        assert_eq!(v.get(&[1, 1, 1, 0]), 3.0);
        assert_eq!(v.sum(), 2.0);

        let pts = [[0.1, 0.1, 0.1], [0.0, 0.05, 0.0]];
        let g = scatter_mean(&pts, &Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap(), GridMode::Volume, 3).unwrap();
        assert_eq!(g.planes[0].get(&[0, 0, 0, 0]), 2.0);
    }

    #[test]
    fn scatter_mean_matches_accumulation() {
        for mode in [GridMode::Volume, GridMode::Triplane] {
            let mut r = rng(3, 0);
            let pts = rand_points(&mut r, 10);
            let feats = rand_tensor(&mut r, &[10, 2]);
            let res = 4;
            let grid = scatter_mean(&pts, &feats, mode, res).unwrap();
            for (plane, &axes) in grid.planes.iter().zip(mode.plane_axes()) {
                let cells = res.pow(axes.len() as u32);
                let mut sum = vec![0.0; cells * 2];
                let mut cnt = vec![0usize; cells];
                for (n, p) in pts.iter().enumerate() {
                    let mut idx = 0;
                    for &a in axes {
                        let i = (p[a] * 3.0).round() as usize;
                        idx = idx * res + i;
                    }
                    cnt[idx] += 1;
                    for ch in 0..2 {
                        sum[idx * 2 + ch] += feats.get(&[n, ch]);
                    }
                }
                for cell in 0..cells {
                    for ch in 0..2 {
                        let want = if cnt[cell] == 0 { 0.0 } else { sum[cell * 2 + ch] / cnt[cell] as f64 };
                        assert!((plane.data()[cell * 2 + ch] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn scatter_then_gather_at_nodes_is_identity() {
        let res = 3;
        let mut pts = Vec::new();
        for i in 0..res {
            for j in 0..res {
                for k in 0..res {
                    pts.push([node_coord(i, res), node_coord(j, res), node_coord(k, res)]);
                }
            }
        }
        let feats = rand_tensor(&mut rng(4, 0), &[pts.len(), 3]);
        let grid = scatter_mean(&pts, &feats, GridMode::Volume, res).unwrap();
        let back = grid_to_point(&grid, &pts).unwrap();
        assert!(back.max_abs_diff(&feats) < 1e-15);
    }

    #[test]
    fn gather_scatter_adjointness() {
        for mode in [GridMode::Volume, GridMode::Triplane] {
            let mut r = rng(5, mode as u64);
            let pts = rand_points(&mut r, 30);
            let maps = PointMaps::new(&pts, mode, 5).unwrap();
            let mut g = Graph::new();
            let planes: Vec<Var> = (0..mode.n_planes())
                .map(|_| g.variable(rand_tensor(&mut r, &mode.plane_shape(5, 2))))
                .collect();
            let f = rand_tensor(&mut r, &[30, 2]);
            let out = grid_to_point_graph(&mut g, &planes, &maps).unwrap();
            let lhs = g.value(out).dot(&f);
            let fv = g.constant(f);
            let prod = g.mul(out, fv).unwrap();
            let loss = g.sum(prod);
            let grads = g.backward(loss).unwrap();
            let rhs: f64 = planes.iter().map(|&p| g.value(p).dot(&grads.get(p))).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn point_to_grid_identity_and_bias() {
        let mut r = rng(6, 0);
        let pts = rand_points(&mut r, 12);
        let feats = rand_tensor(&mut r, &[12, 3]);
        let mut ps = ParamSet::new();
        ps.insert("m.0.w", Tensor::identity(3));
        ps.insert("m.0.b", Tensor::zeros(&[3]));
        ps.insert("m.1.w", Tensor::identity(3));
        ps.insert("m.1.b", Tensor::zeros(&[3]));
        // ReLU passes only non-negative features, so use |f|.
        let pos = Tensor::new(&[12, 3], feats.data().iter().map(|x| x.abs()).collect()).unwrap();
        let a = point_to_grid(&pts, &pos, &ps, "m", GridMode::Triplane, 4).unwrap();
        let b = scatter_mean(&pts, &pos, GridMode::Triplane, 4).unwrap();
        assert!(a.bitwise_eq(&b));

        let mut zero = ps.zeros_like();
        zero.insert("m.1.b", Tensor::new(&[3], vec![0.5, -2.0, 1.0]).unwrap());
        let z = point_to_grid(&pts, &feats, &zero, "m", GridMode::Volume, 4).unwrap();
        let maps = PointMaps::new(&pts, GridMode::Volume, 4).unwrap();
        for (cell, row) in z.planes[0].data().chunks(3).enumerate() {
            let occupied = maps.scatter[0].row_ptr[cell + 1] > maps.scatter[0].row_ptr[cell];
            let want: &[f64] = if occupied { &[0.5, -2.0, 1.0] } else { &[0.0; 3] };
            assert_eq!(row, want);
        }
        ps.insert("m.1.w", Tensor::zeros(&[2, 3]));
        assert!(point_to_grid(&pts, &feats, &ps, "m", GridMode::Volume, 4).is_err());
    }
}
