//! Attention-weighted feature interpolation and the occupancy network.
//!
//! For a query `q` and each plane, the neighbourhood is the 3x3 (or 3x3x3)
//! block of lattice nodes centred on the node nearest to `q`, clamped at the
//! lattice border. With `psi` the bi/trilinear read at `q`, `k_i`, `v_i` the
//! node features through the key and value MLPs and `e_i = pos(q - n_i)`
//! (offsets in cells):
//!
//! ```text
//! a_i = score(query(psi) - k_i + e_i)        per channel
//! A   = softmax_i(a_i)                       per channel
//! F   = sum_i A_i * (v_i + e_i)
//! ```
//!
//! Volumes use `heads` subspaces of width `d` (separate scoring MLPs);
//! triplanes run one single-head attention per plane. Per-plane outputs are
//! concatenated. The occupancy network sees only `F`, never coordinates.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Bound, Graph, ParamSet, SparseMap, Var};
use crate::convert::{self, FeatureGrid, GridMode, Lattice};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn;
use crate::tensor::Tensor;

pub const OCC_BLOCKS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Attention,
    /// Plain bi/trilinear reads, per-plane features concatenated.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub decode: DecodeMode,
    /// Attention heads for volumes; triplanes always use one per plane.
    pub heads: usize,
    /// Queries per inference chunk.
    pub chunk: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            decode: DecodeMode::Attention,
            heads: 4,
            chunk: 4096,
        }
    }
}

impl DecoderConfig {
    pub fn heads_for(&self, mode: GridMode) -> usize {
        match mode {
            GridMode::Triplane => 1,
            GridMode::Volume => self.heads,
        }
    }

    /// Width of the interpolated feature fed to the occupancy network.
    pub fn feature_width(&self, mode: GridMode, d: usize) -> usize {
        let per_plane = match self.decode {
            DecodeMode::Attention => self.heads_for(mode) * d,
            DecodeMode::Linear => d,
        };
        per_plane * mode.n_planes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        if self.chunk == 0 {
            return Err(Error::Config("inference chunk must hold at least one query".into()));
        }
        Ok(())
    }
}

pub fn init_params<R: Rng>(cfg: &DecoderConfig, mode: GridMode, d: usize, rng: &mut R, ps: &mut ParamSet) -> Result<()> {
    cfg.validate()?;
    if cfg.decode == DecodeMode::Attention {
        let h = cfg.heads_for(mode);
        let w = h * d;
        for i in 0..mode.n_planes() {
            let name = format!("dec.att{i}");
            nn::init_mlp2(ps, rng, &format!("{name}.q"), (d, w, w), false);
            nn::init_mlp2(ps, rng, &format!("{name}.k"), (d, w, w), false);
            nn::init_mlp2(ps, rng, &format!("{name}.v"), (d, w, w), false);
            nn::init_mlp2(ps, rng, &format!("{name}.pos"), (mode.dims(), w, w), false);
            for j in 0..h {
                nn::init_mlp2(ps, rng, &format!("{name}.score{j}"), (d, d, d), false);
            }
        }
    }
    let width = cfg.feature_width(mode, d);
    for b in 0..OCC_BLOCKS {
        nn::init_resnet_fc(ps, rng, &format!("occ.block{b}"), width);
    }
    nn::init_linear(ps, rng, "occ.out", width, 1, false);
    Ok(())
}

/// Neighbourhood of one query on one plane: flat node indices and offsets
/// `q - node` in cells, in lexicographic order of the `(-1, 0, 1)` steps.
pub fn neighbor_patch(q: Point, axes: &[usize], res: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let lat = Lattice::unit(res);
    let k = axes.len();
    let centre: Vec<usize> = axes.iter().map(|&a| lat.nearest(q[a])).collect();
    let n = 3usize.pow(k as u32);
    let mut nodes = Vec::with_capacity(n);
    let mut disp = Vec::with_capacity(n);
    for m in 0..n {
        let mut idx = vec![0usize; k];
        let mut rem = m;
        for j in (0..k).rev() {
            let step = (rem % 3) as isize - 1;
            rem /= 3;
            idx[j] = (centre[j] as isize + step).clamp(0, res as isize - 1) as usize;
        }
        disp.push(
            axes.iter()
                .zip(&idx)
                .map(|(&a, &i)| q[a].clamp(0.0, 1.0) * lat.scale - i as f64)
                .collect(),
        );
        nodes.push(convert::flat_index(&idx, res));
    }
    (nodes, disp)
}

/// Per-plane query index structures.
#[derive(Clone, Debug)]
pub struct QueryMaps {
    pub n_queries: usize,
    pub n_neighbors: usize,
    pub interp: Vec<Arc<SparseMap>>,
    /// Row `q * N + i` reads neighbour `i` of query `q`.
    pub patch: Vec<Arc<SparseMap>>,
    /// Offsets, `Q*N x dims`.
    pub disp: Vec<Tensor>,
    /// Repeats each query row `N` times.
    pub repeat: Arc<SparseMap>,
}

impl QueryMaps {
    pub fn new(queries: &[Point], mode: GridMode, res: usize) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Contract("no queries to decode".into()));
        }
        let qn = queries.len();
        let n = 3usize.pow(mode.dims() as u32);
        let n_nodes = res.pow(mode.dims() as u32);
        let mut maps = QueryMaps {
            n_queries: qn,
            n_neighbors: n,
            interp: Vec::new(),
            patch: Vec::new(),
            disp: Vec::new(),
            repeat: Arc::new(SparseMap::from_rows(qn, (0..qn * n).map(|r| [(r / n, 1.0)]))),
        };
        for &axes in mode.plane_axes() {
            maps.interp.push(Arc::new(convert::gather_map(queries, axes, Lattice::unit(res))));
            let mut rows = Vec::with_capacity(qn * n);
            let mut disp = Vec::with_capacity(qn * n * axes.len());
            for &q in queries {
                let (nodes, d) = neighbor_patch(q, axes, res);
                rows.extend(nodes.into_iter().map(|i| [(i, 1.0)]));
                disp.extend(d.into_iter().flatten());
            }
            maps.patch.push(Arc::new(SparseMap::from_rows(n_nodes, rows)));
            maps.disp.push(Tensor::new(&[qn * n, axes.len()], disp)?);
        }
        Ok(maps)
    }
}

fn plane_rows(g: &mut Graph, plane: Var) -> Result<Var> {
    let (rows, c) = g.value(plane).rows_cols();
    g.reshape(plane, &[rows, c])
}

/// Key and value MLPs applied to every node of a plane.
pub fn node_kv_graph(g: &mut Graph, p: &Bound, plane: Var, i: usize) -> Result<(Var, Var)> {
    let rows = plane_rows(g, plane)?;
    let k = nn::mlp2(g, p, rows, &format!("dec.att{i}.k"))?;
    let v = nn::mlp2(g, p, rows, &format!("dec.att{i}.v"))?;
    Ok((k, v))
}

/// Attention for one plane from gathered inputs: `psi` (`Q x d`), key and
/// value rows (`Q*N x w`) and constant offsets (`Q*N x dims`). Returns the
/// interpolated feature (`Q x w`) and the attention weights (`Q x N x w`).
pub fn attend_graph(
    g: &mut Graph,
    p: &Bound,
    i: usize,
    heads: usize,
    psi: Var,
    k_rows: Var,
    v_rows: Var,
    disp: &Tensor,
    maps: &QueryMaps,
) -> Result<(Var, Var)> {
    let name = format!("dec.att{i}");
    let (qn, n) = (maps.n_queries, maps.n_neighbors);
    let q = nn::mlp2(g, p, psi, &format!("{name}.q"))?;
    let w = g.shape(q)[1];
    if w % heads != 0 {
        return Err(Error::Config(format!("attention width {w} is not divisible by {heads} heads")));
    }
    let q_rep = g.sparse(q, maps.repeat.clone(), &[qn * n, w])?;
    let d = g.constant(disp.clone());
    let e = nn::mlp2(g, p, d, &format!("{name}.pos"))?;
    let rel = g.sub(q_rep, k_rows)?;
    let rel = g.add(rel, e)?;
    let logits = if heads == 1 {
        nn::mlp2(g, p, rel, &format!("{name}.score0"))?
    } else {
        let hd = w / heads;
        let mut parts = Vec::with_capacity(heads);
        for j in 0..heads {
            let s = g.slice_cols(rel, j * hd, hd)?;
            parts.push(nn::mlp2(g, p, s, &format!("{name}.score{j}"))?);
        }
        g.concat(&parts, 1)?
    };
    let logits = g.reshape(logits, &[qn, n, w])?;
    let a = g.softmax(logits, 1)?;
    let ve = g.add(v_rows, e)?;
    let ve = g.reshape(ve, &[qn, n, w])?;
    let weighted = g.mul(a, ve)?;
    let f = g.sum_axis(weighted, 1)?;
    Ok((f, a))
}

/// Interpolated query features (`Q x width`) from grid planes in a graph.
pub fn features_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &DecoderConfig,
    mode: GridMode,
    planes: &[Var],
    maps: &QueryMaps,
) -> Result<Var> {
    let qn = maps.n_queries;
    let mut outs = Vec::with_capacity(planes.len());
    for (i, &plane) in planes.iter().enumerate() {
        let c = *g.shape(plane).last().unwrap_or(&0);
        let psi = g.sparse(plane, maps.interp[i].clone(), &[qn, c])?;
        outs.push(match cfg.decode {
            DecodeMode::Linear => psi,
            DecodeMode::Attention => {
                let (k, v) = node_kv_graph(g, p, plane, i)?;
                let w = g.shape(k)[1];
                let rows = qn * maps.n_neighbors;
                let kr = g.sparse(k, maps.patch[i].clone(), &[rows, w])?;
                let vr = g.sparse(v, maps.patch[i].clone(), &[rows, w])?;
                attend_graph(g, p, i, cfg.heads_for(mode), psi, kr, vr, &maps.disp[i], maps)?.0
            }
        });
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

/// Residual MLP then a sigmoid: `Q x width` features to `Q x 1` probabilities.
pub fn occupancy_head_graph(g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
    let want = g.shape(p.var("occ.out.w")?)[0];
    if g.shape(f).get(1) != Some(&want) {
        return Err(Error::Config(format!(
            "occupancy network expects width {want}, got features {:?}",
            g.shape(f)
        )));
    }
    let mut h = f;
    for b in 0..OCC_BLOCKS {
        h = nn::resnet_fc(g, p, h, &format!("occ.block{b}"))?;
    }
    let logit = nn::linear(g, p, h, "occ.out")?;
    Ok(g.sigmoid(logit))
}

pub fn occupancy_head(f: &Tensor, params: &ParamSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_const(&mut g);
    let fv = g.constant(f.clone());
    let out = occupancy_head_graph(&mut g, &p, fv)?;
    Ok(g.value(out).clone())
}

pub fn decode_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &DecoderConfig,
    mode: GridMode,
    planes: &[Var],
    maps: &QueryMaps,
) -> Result<Var> {
    let f = features_graph(g, p, cfg, mode, planes, maps)?;
    occupancy_head_graph(g, p, f)
}

/// A decoded-once view of a grid for repeated inference: per plane, the
/// plane itself plus the key and value MLPs of every node.
pub struct PreparedGrid {
    pub mode: GridMode,
    pub res: usize,
    planes: Vec<(Tensor, Option<(Tensor, Tensor)>)>,
}

impl PreparedGrid {
    pub fn new(grid: &FeatureGrid, params: &ParamSet, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planes = Vec::with_capacity(grid.planes.len());
        for (i, t) in grid.planes.iter().enumerate() {
            let kv = if cfg.decode == DecodeMode::Attention {
                let mut g = Graph::new();
                let p = params.bind_const(&mut g);
                let pv = g.constant(t.clone());
                let (k, v) = node_kv_graph(&mut g, &p, pv, i)?;
                Some((g.value(k).clone(), g.value(v).clone()))
            } else {
                None
            };
            planes.push((t.clone(), kv));
        }
        Ok(PreparedGrid {
            mode: grid.mode,
            res: grid.res,
            planes,
        })
    }

    /// Interpolated features for one batch of queries.
    pub fn features(&self, queries: &[Point], params: &ParamSet, cfg: &DecoderConfig) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind_const(&mut g);
        let f = self.features_in(&mut g, &p, queries, cfg)?;
        Ok(g.value(f).clone())
    }

    fn features_in(&self, g: &mut Graph, p: &Bound, queries: &[Point], cfg: &DecoderConfig) -> Result<Var> {
        let maps = QueryMaps::new(queries, self.mode, self.res)?;
        let mut outs = Vec::with_capacity(self.planes.len());
        for (i, (plane, kv)) in self.planes.iter().enumerate() {
            let (_, c) = plane.rows_cols();
            let psi = g.constant(Tensor::new(&[queries.len(), c], maps.interp[i].apply(plane.data(), c))?);
            outs.push(match kv {
                None => psi,
                Some((k, v)) => {
                    let (_, w) = k.rows_cols();
                    let rows = maps.n_queries * maps.n_neighbors;
                    let kr = g.constant(Tensor::new(&[rows, w], maps.patch[i].apply(k.data(), w))?);
                    let vr = g.constant(Tensor::new(&[rows, w], maps.patch[i].apply(v.data(), w))?);
                    attend_graph(g, p, i, cfg.heads_for(self.mode), psi, kr, vr, &maps.disp[i], &maps)?.0
                }
            });
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 1)
        }
    }

    /// Occupancy probabilities, evaluated `cfg.chunk` queries at a time.
    pub fn predict(&self, queries: &[Point], params: &ParamSet, cfg: &DecoderConfig) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(cfg.chunk.max(1)) {
            let mut g = Graph::new();
            let p = params.bind_const(&mut g);
            let f = self.features_in(&mut g, &p, chunk, cfg)?;
            let prob = occupancy_head_graph(&mut g, &p, f)?;
            out.extend_from_slice(g.value(prob).data());
        }
        Ok(out)
    }
}

pub fn predict_occupancy(grid: &FeatureGrid, queries: &[Point], params: &ParamSet, cfg: &DecoderConfig) -> Result<Vec<f64>> {
    PreparedGrid::new(grid, params, cfg)?.predict(queries, params, cfg)
}

/// Concatenated (triplane) or plain (volume) interpolated grid features.
pub fn linear_interpolate_feature(grid: &FeatureGrid, queries: &[Point]) -> Result<Tensor> {
    let cfg = DecoderConfig {
        decode: DecodeMode::Linear,
        ..DecoderConfig::default()
    };
    PreparedGrid::new(grid, &ParamSet::new(), &cfg)?.features(queries, &ParamSet::new(), &cfg)
}

/// Attention-interpolated features, `Q x width`.
pub fn attention_interpolate(grid: &FeatureGrid, queries: &[Point], params: &ParamSet, cfg: &DecoderConfig) -> Result<Tensor> {
    let cfg = DecoderConfig {
        decode: DecodeMode::Attention,
        ..cfg.clone()
    };
    PreparedGrid::new(grid, params, &cfg)?.features(queries, params, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::kaiming_uniform;
    use crate::geometry::rng;

    fn rand_grid(mode: GridMode, res: usize, d: usize, seed: u64) -> FeatureGrid {
        let mut r = rng(seed, 0);
        let planes = (0..mode.n_planes())
            .map(|_| kaiming_uniform(&mut r, &mode.plane_shape(res, d), 3))
            .collect();
        FeatureGrid::new(mode, planes).unwrap()
    }

    fn rand_queries(n: usize, seed: u64) -> Vec<Point> {
        let mut r = rng(seed, 1);
        (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect()
    }

    fn rand_params(cfg: &DecoderConfig, mode: GridMode, d: usize, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut r = rng(seed, 2);
        init_params(cfg, mode, d, &mut r, &mut ps).unwrap();
        for (_, t) in ps.iter_mut() {
            *t = kaiming_uniform(&mut r, t.shape(), 4);
        }
        ps
    }

    #[test]
    fn patch_shapes_and_clamping() {
        let (nodes, disp) = neighbor_patch([0.5, 0.5, 0.5], &[0, 1, 2], 5);
        assert_eq!(nodes.len(), 27);
        assert!(disp.iter().any(|d| d.iter().all(|&x| x == 0.0)));
        assert!(disp.iter().flatten().all(|x| x.abs() <= 1.5));
        let (nodes, disp) = neighbor_patch([0.0; 3], &[0, 1], 5);
        assert_eq!(nodes.len(), 9);
        assert!(nodes.iter().all(|&n| n < 25));
        assert_eq!(nodes[0], 0);
        assert_eq!(disp[8], vec![-1.0, -1.0]);
    }

    fn mlp(ps: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
        let layer = |x: &[f64], l: &str| {
            let w = ps.get(&format!("{name}.{l}.w")).unwrap();
            let b = ps.get(&format!("{name}.{l}.b")).unwrap();
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            (0..dout)
                .map(|o| b.data()[o] + (0..din).map(|i| x[i] * w.get(&[i, o])).sum::<f64>())
                .collect::<Vec<f64>>()
        };
        let h: Vec<f64> = layer(x, "0").into_iter().map(|v| v.max(0.0)).collect();
        layer(&h, "1")
    }

    /// Term-by-term evaluation of the attention equations for one query.
    fn oracle(grid: &FeatureGrid, ps: &ParamSet, heads: usize, q: Point) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, &axes) in grid.mode.plane_axes().iter().enumerate() {
            let plane = &grid.planes[i];
            let c = grid.channels;
            let name = format!("dec.att{i}");
            let psi = convert::interp_weights(q, axes, Lattice::unit(grid.res))
                .iter()
                .fold(vec![0.0; c], |mut acc, &(node, w)| {
                    for ch in 0..c {
                        acc[ch] += w * plane.data()[node * c + ch];
                    }
                    acc
                });
            let qv = mlp(ps, &format!("{name}.q"), &psi);
            let w = qv.len();
            let hd = w / heads;
            let (nodes, disp) = neighbor_patch(q, axes, grid.res);
            let mut logits = Vec::new();
            let mut vals = Vec::new();
            for (node, dv) in nodes.iter().zip(&disp) {
                let feat = &plane.data()[node * c..(node + 1) * c];
                let k = mlp(ps, &format!("{name}.k"), feat);
                let v = mlp(ps, &format!("{name}.v"), feat);
                let e = mlp(ps, &format!("{name}.pos"), dv);
                let rel: Vec<f64> = (0..w).map(|j| qv[j] - k[j] + e[j]).collect();
                let mut lg = Vec::new();
                for h in 0..heads {
                    lg.extend(mlp(ps, &format!("{name}.score{h}"), &rel[h * hd..(h + 1) * hd]));
                }
                logits.push(lg);
                vals.push((0..w).map(|j| v[j] + e[j]).collect::<Vec<f64>>());
            }
            for j in 0..w {
                let m = logits.iter().map(|l| l[j]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l[j] - m).exp()).sum();
                out.push(
                    logits
                        .iter()
                        .zip(&vals)
                        .map(|(l, v)| (l[j] - m).exp() / z * v[j])
                        .sum(),
                );
            }
        }
        out
    }

    #[test]
    fn attention_matches_equation_oracle() {
        for (mode, heads) in [(GridMode::Triplane, 1), (GridMode::Volume, 1), (GridMode::Volume, 2)] {
            let cfg = DecoderConfig { heads, ..DecoderConfig::default() };
            let grid = rand_grid(mode, 4, 4, 1);
            let ps = rand_params(&cfg, mode, 4, 2);
            let qs = rand_queries(6, 3);
            let f = attention_interpolate(&grid, &qs, &ps, &cfg).unwrap();
            assert_eq!(f.shape(), &[6, cfg.feature_width(mode, 4)]);
            for (n, &q) in qs.iter().enumerate() {
                let want = oracle(&grid, &ps, cfg.heads_for(mode), q);
                for (a, b) in f.row(n).iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{mode:?} h{heads}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn uniform_attention_closed_form() {
        let cfg = DecoderConfig { heads: 1, ..DecoderConfig::default() };
        let grid = FeatureGrid::new(GridMode::Volume, vec![Tensor::full(&[4, 4, 4, 3], 0.7)]).unwrap();
        let mut ps = rand_params(&cfg, GridMode::Volume, 3, 4);
        let b = Tensor::new(&[3], vec![0.25, -1.0, 2.0]).unwrap();
        ps.insert("dec.att0.pos.1.w", Tensor::zeros(&[3, 3]));
        ps.insert("dec.att0.pos.1.b", b.clone());
        let qs = rand_queries(5, 5);
        let f = attention_interpolate(&grid, &qs, &ps, &cfg).unwrap();
        let v = mlp(&ps, "dec.att0.v", &[0.7, 0.7, 0.7]);
        for n in 0..5 {
            for j in 0..3 {
                assert!((f.get(&[n, j]) - (v[j] + b.data()[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let cfg = DecoderConfig { heads: 2, ..DecoderConfig::default() };
        let grid = rand_grid(GridMode::Volume, 5, 4, 6);
        let ps = rand_params(&cfg, GridMode::Volume, 4, 7);
        let qs = rand_queries(10, 8);
        let maps = QueryMaps::new(&qs, GridMode::Volume, 5).unwrap();
        let mut g = Graph::new();
        let p = ps.bind_const(&mut g);
        let plane = g.constant(grid.planes[0].clone());
        let psi = g.sparse(plane, maps.interp[0].clone(), &[10, 4]).unwrap();
        let (k, v) = node_kv_graph(&mut g, &p, plane, 0).unwrap();
        let kr = g.sparse(k, maps.patch[0].clone(), &[270, 8]).unwrap();
        let vr = g.sparse(v, maps.patch[0].clone(), &[270, 8]).unwrap();
        let (_, a) = attend_graph(&mut g, &p, 0, 2, psi, kr, vr, &maps.disp[0], &maps).unwrap();
        let a = g.value(a);
        for q in 0..10 {
            for c in 0..8 {
                let s: f64 = (0..27).map(|i| a.get(&[q, i, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!((0..27).all(|i| a.get(&[q, i, c]) > 0.0));
            }
        }
    }

    #[test]
    fn neighbour_order_does_not_matter() {
        let cfg = DecoderConfig { heads: 1, ..DecoderConfig::default() };
        let grid = rand_grid(GridMode::Triplane, 5, 3, 9);
        let ps = rand_params(&cfg, GridMode::Triplane, 3, 10);
        let qs = rand_queries(4, 11);
        let maps = QueryMaps::new(&qs, GridMode::Triplane, 5).unwrap();
        let run = |perm: &[usize]| {
            let mut g = Graph::new();
            let p = ps.bind_const(&mut g);
            let plane = g.constant(grid.planes[0].clone());
            let psi = g.sparse(plane, maps.interp[0].clone(), &[4, 3]).unwrap();
            let (k, v) = node_kv_graph(&mut g, &p, plane, 0).unwrap();
            let src = &maps.patch[0];
            let rows: Vec<usize> = (0..4).flat_map(|q| perm.iter().map(move |&i| q * 9 + i)).collect();
            let patch = Arc::new(SparseMap::from_rows(src.n_in, rows.iter().map(|&r| [(src.cols[r], 1.0)])));
            let disp = Tensor::new(&[36, 2], rows.iter().flat_map(|&r| maps.disp[0].row(r).to_vec()).collect()).unwrap();
            let kr = g.sparse(k, patch.clone(), &[36, 3]).unwrap();
            let vr = g.sparse(v, patch, &[36, 3]).unwrap();
            let (f, _) = attend_graph(&mut g, &p, 0, 1, psi, kr, vr, &disp, &maps).unwrap();
            g.value(f).clone()
        };
        let a = run(&[0, 1, 2, 3, 4, 5, 6, 7, 8]);
        let b = run(&[8, 3, 5, 0, 7, 1, 6, 2, 4]);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn linear_mode_reads_grid() {
        let grid = rand_grid(GridMode::Triplane, 4, 2, 12);
        let q = [[1.0 / 3.0, 2.0 / 3.0, 1.0]];
        let f = linear_interpolate_feature(&grid, &q).unwrap();
        assert_eq!(f.shape(), &[1, 6]);
        let want: Vec<f64> = [[1, 2], [1, 3], [2, 3]]
            .iter()
            .enumerate()
            .flat_map(|(i, ix)| (0..2).map(move |c| (i, ix, c)))
            .map(|(i, ix, c)| grid.planes[i].get(&[ix[0], ix[1], c]))
            .collect();
        for (a, b) in f.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let vol = rand_grid(GridMode::Volume, 4, 2, 13);
        let qs = rand_queries(7, 14);
        let f = linear_interpolate_feature(&vol, &qs).unwrap();
        assert_eq!(f, convert::interpolate_trilinear(&vol.planes[0], &qs).unwrap());
    }

    #[test]
    fn occupancy_head_contract() {
        let cfg = DecoderConfig { decode: DecodeMode::Linear, ..DecoderConfig::default() };
        let ps = rand_params(&cfg, GridMode::Volume, 5, 15);
        let f = kaiming_uniform(&mut rng(16, 0), &[8, 5], 1);
        let out = occupancy_head(&f, &ps).unwrap();
        assert_eq!(out.shape(), &[8, 1]);
        assert!(out.data().iter().all(|&x| x > 0.0 && x < 1.0));
        for r in 0..8 {
            let one = Tensor::new(&[1, 5], f.row(r).to_vec()).unwrap();
            assert_eq!(occupancy_head(&one, &ps).unwrap().data()[0].to_bits(), out.data()[r].to_bits());
        }
        let zero = occupancy_head(&f, &ps.zeros_like()).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.5));
        let bad = Tensor::zeros(&[2, 4]);
        assert!(matches!(occupancy_head(&bad, &ps), Err(Error::Config(_))));
    }

    #[test]
    fn prediction_is_chunk_invariant_and_deterministic() {
        for decode in [DecodeMode::Attention, DecodeMode::Linear] {
            let cfg = DecoderConfig { decode, heads: 2, chunk: 4096 };
            let grid = rand_grid(GridMode::Volume, 6, 3, 17);
            let ps = rand_params(&cfg, GridMode::Volume, 3, 18);
            let qs = rand_queries(37, 19);
            let a = predict_occupancy(&grid, &qs, &ps, &cfg).unwrap();
            let b = predict_occupancy(&grid, &qs, &ps, &DecoderConfig { chunk: 1, ..cfg.clone() }).unwrap();
            assert_eq!(a.len(), 37);
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn prepared_matches_graph_path() {
        let cfg = DecoderConfig { heads: 1, ..DecoderConfig::default() };
        let grid = rand_grid(GridMode::Triplane, 5, 3, 20);
        let ps = rand_params(&cfg, GridMode::Triplane, 3, 21);
        let qs = rand_queries(9, 22);
        let maps = QueryMaps::new(&qs, GridMode::Triplane, 5).unwrap();
        let mut g = Graph::new();
        let p = ps.bind_const(&mut g);
        let planes: Vec<Var> = grid.planes.iter().map(|t| g.constant(t.clone())).collect();
        let out = decode_graph(&mut g, &p, &cfg, GridMode::Triplane, &planes, &maps).unwrap();
        let want = predict_occupancy(&grid, &qs, &ps, &cfg).unwrap();
        assert_eq!(g.value(out).data(), want.as_slice());
    }

    #[test]
    fn translated_grid_and_query_predict_the_same() {
        let cfg = DecoderConfig { heads: 1, ..DecoderConfig::default() };
        let res = 9;
        let grid = rand_grid(GridMode::Volume, res, 3, 23);
        let ps = rand_params(&cfg, GridMode::Volume, 3, 24);
        let mut shifted = grid.clone();
        let (src, dst) = (&grid.planes[0], &mut shifted.planes[0]);
        for i in 0..res {
            for j in 0..res {
                for k in 0..res {
                    for c in 0..3 {
                        dst.set(&[(i + 2) % res, (j + 2) % res, (k + 2) % res, c], src.get(&[i, j, k, c]));
                    }
                }
            }
        }
        let qs: Vec<Point> = rand_queries(20, 25).iter().map(|q| q.map(|c| 0.25 + 0.25 * c)).collect();
        let moved: Vec<Point> = qs.iter().map(|q| q.map(|c| c + 2.0 / 8.0)).collect();
        let a = predict_occupancy(&grid, &qs, &ps, &cfg).unwrap();
        let b = predict_occupancy(&shifted, &moved, &ps, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        // Width of the head input equals the feature width: no coordinates enter.
        assert_eq!(ps.get("occ.out.w").unwrap().shape()[0], cfg.feature_width(GridMode::Volume, 3));
    }
}
