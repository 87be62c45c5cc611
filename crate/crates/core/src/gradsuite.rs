//! Finite-difference checks of every differentiable operation, grouped by
//! scope for the `gradcheck` command and the test suite.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ad::{grad_check_with, Bound, ConvSpec, GradCheckOptions, Graph, Padding, ParamSet, Var};
use crate::convert::{self, GridMode, PointMaps};
use crate::decoder::{self, DecodeMode, DecoderConfig, QueryMaps};
use crate::encoder::{self, EncoderConfig, EncoderMaps};
use crate::error::{Error, Result};
use crate::geometry::{self, Point, ShapeSpec};
use crate::nn;
use crate::tensor::Tensor;

use crate::train::{self, ModelConfig};

/// Tolerance for ops that are smooth everywhere.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for ops with ReLU or max kinks.
pub const PIECEWISE_TOL: f64 = 1e-4;
/// Tolerance for the full encode, decode and loss graph.
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Kernels,
    Encoder,
    Decoder,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernels" => Ok(Scope::Kernels),
            "encoder" => Ok(Scope::Encoder),
            "decoder" => Ok(Scope::Decoder),
            "all" => Ok(Scope::All),
            _ => Err(Error::Config(format!("unknown gradcheck scope '{s}' (kernels|encoder|decoder|all)"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Kernels => "kernels",
            Scope::Encoder => "encoder",
            Scope::Decoder => "decoder",
            Scope::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub scope: Scope,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

type CheckFn = fn() -> Result<f64>;

struct Check {
    name: &'static str,
    scope: Scope,
    tol: f64,
    run: CheckFn,
}

fn checks() -> Vec<Check> {
    use Scope::*;
    let c = |name, scope, tol, run: CheckFn| Check { name, scope, tol, run };
    vec![
        c("linear", Kernels, SMOOTH_TOL, check_linear),
        c("relu", Kernels, PIECEWISE_TOL, check_relu),
        c("sigmoid", Kernels, SMOOTH_TOL, check_sigmoid),
        c("add_sub_mul_scale", Kernels, SMOOTH_TOL, check_elementwise),
        c("sum_mean_sum_axis", Kernels, SMOOTH_TOL, check_reductions),
        c("concat_slice_reshape", Kernels, SMOOTH_TOL, check_structural),
        c("softmax", Kernels, SMOOTH_TOL, check_softmax),
        c("conv2d_zero", Kernels, SMOOTH_TOL, || check_conv(2, Padding::Zero, 1)),
        c("conv2d_circular_stride2", Kernels, SMOOTH_TOL, || check_conv(2, Padding::Circular, 2)),
        c("conv3d_zero_stride2", Kernels, SMOOTH_TOL, || check_conv(3, Padding::Zero, 2)),
        c("conv3d_circular", Kernels, SMOOTH_TOL, || check_conv(3, Padding::Circular, 1)),
        c("upsample_avg_pool", Kernels, SMOOTH_TOL, check_resample),
        c("bilinear_gather", Kernels, SMOOTH_TOL, || check_gather(GridMode::Triplane)),
        c("trilinear_gather", Kernels, SMOOTH_TOL, || check_gather(GridMode::Volume)),
        c("scatter_mean", Kernels, SMOOTH_TOL, check_scatter_mean),
        c("scatter_max", Kernels, PIECEWISE_TOL, check_scatter_max),
        c("point_to_grid_mlp", Kernels, PIECEWISE_TOL, check_point_to_grid),
        c("bce", Kernels, SMOOTH_TOL, check_bce),
        c("pointnet", Encoder, PIECEWISE_TOL, check_pointnet),
        c("alto_block", Encoder, PIECEWISE_TOL, check_alto_block),
        c("encoder_triplane", Encoder, PIECEWISE_TOL, || check_encoder(GridMode::Triplane)),
        c("encoder_volume", Encoder, PIECEWISE_TOL, || check_encoder(GridMode::Volume)),
        c("attention_triplane", Decoder, PIECEWISE_TOL, || check_attention(GridMode::Triplane, 1)),
        c("attention_volume_2_heads", Decoder, PIECEWISE_TOL, || check_attention(GridMode::Volume, 2)),
        c("occupancy_head", Decoder, PIECEWISE_TOL, check_occupancy_head),
        c("composite_triplane_d8_r16", All, COMPOSITE_TOL, || check_composite(GridMode::Triplane)),
        c("composite_volume_d8_r16", All, COMPOSITE_TOL, || check_composite(GridMode::Volume)),
    ]
}

/// Names of the checks `scope` runs.
pub fn check_names(scope: Scope) -> Vec<&'static str> {
    checks().into_iter().filter(|c| in_scope(c.scope, scope)).map(|c| c.name).collect()
}

fn in_scope(check: Scope, wanted: Scope) -> bool {
    wanted == Scope::All || check == wanted
}

/// Runs every check in `scope` (all of them for [`Scope::All`]).
pub fn run(scope: Scope) -> Result<Vec<CheckReport>> {
    checks()
        .into_iter()
        .filter(|c| in_scope(c.scope, scope))
        .map(|c| {
            Ok(CheckReport {
                name: c.name.to_string(),
                scope: c.scope,
                max_rel_err: (c.run)()?,
                tol: c.tol,
            })
        })
        .collect()
}

/// Coordinates whose gradient is a millionth of the largest one are
/// compared in absolute terms at that scale.
const REL_FLOOR: f64 = 1e-6;

fn smooth() -> GradCheckOptions {
    GradCheckOptions { eps: 1e-3, fourth_order: true, rel_floor: REL_FLOOR, ..Default::default() }
}

fn piecewise() -> GradCheckOptions {
    GradCheckOptions { eps: 1e-5, rel_floor: REL_FLOOR, one_sided: true, ..Default::default() }
}

fn sampled(mut o: GradCheckOptions, n: usize) -> GradCheckOptions {
    o.max_coords = Some(n);
    o
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xC0FFEE ^ tag)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect()).expect("shape matches")
}

/// Values bounded away from zero so ReLU kinks stay out of reach.
fn rand_away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(0.1..1.0);
            if r.gen() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// `sum(w * x)` with fixed pseudo-random weights, so every output
/// coordinate contributes to the gradient.
fn project(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut r = rng(shape.iter().product::<usize>() as u64);
    let w = g.constant(rand_tensor(&mut r, &shape, 1.0));
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

fn project_all(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut total = project(g, xs[0])?;
    for &x in &xs[1..] {
        let p = project(g, x)?;
        total = g.add(total, p)?;
    }
    Ok(total)
}

/// Every parameter shifted by uniform noise, so zero-initialised layers
/// carry gradient too.
fn jitter(ps: &ParamSet, tag: u64) -> ParamSet {
    jitter_by(ps, tag, 0.1)
}

fn jitter_by(ps: &ParamSet, tag: u64, amount: f64) -> ParamSet {
    let mut r = rng(tag);
    let mut out = ps.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-amount..amount);
        }
    }
    out
}

/// Checks `f` against all tensors of `params` followed by `extra`.
fn with_params<F>(params: &ParamSet, extra: &[Tensor], opts: GradCheckOptions, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend_from_slice(extra);
    let np = names.len();
    grad_check_with(
        |g, vars| {
            let b = Bound::from_vars(&names, &vars[..np]);
            f(g, &b, &vars[np..])
        },
        &inputs,
        opts,
    )
}

fn random_points(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<Point> {
    (0..n).map(|_| [r.gen_range(lo..hi), r.gen_range(lo..hi), r.gen_range(lo..hi)]).collect()
}

fn check_linear() -> Result<f64> {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[5, 4], 1.0);
    let w = rand_tensor(&mut r, &[4, 3], 1.0);
    let b = rand_tensor(&mut r, &[3], 1.0);
    grad_check_with(
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y)
        },
        &[x, w, b],
        smooth(),
    )
}

fn check_relu() -> Result<f64> {
    let mut r = rng(2);
    let x = rand_away_from_zero(&mut r, &[6, 5]);
    grad_check_with(|g, v| { let y = g.relu(v[0]); project(g, y) }, &[x], piecewise())
}

fn check_sigmoid() -> Result<f64> {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[6, 5], 3.0);
    grad_check_with(|g, v| { let y = g.sigmoid(v[0]); project(g, y) }, &[x], smooth())
}

fn check_elementwise() -> Result<f64> {
    let mut r = rng(4);
    let a = rand_tensor(&mut r, &[4, 3], 1.0);
    let b = rand_tensor(&mut r, &[4, 3], 1.0);
    grad_check_with(
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            let m = g.mul(s, d)?;
            let m = g.mul(m, v[0])?;
            let y = g.scale(m, -1.7);
            project(g, y)
        },
        &[a, b],
        smooth(),
    )
}

fn check_reductions() -> Result<f64> {
    let mut r = rng(5);
    let x = rand_tensor(&mut r, &[3, 4, 5], 1.0);
    grad_check_with(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let a1 = g.sum_axis(sq, 1)?;
            let a0 = g.sum_axis(v[0], 0)?;
            let m = g.mean(sq);
            let s = g.sum(v[0]);
            let p1 = project(g, a1)?;
            let p0 = project(g, a0)?;
            let t = g.add(p1, p0)?;
            let t = g.add(t, m)?;
            let s3 = g.mul(s, s)?;
            g.add(t, s3)
        },
        &[x],
        smooth(),
    )
}

fn check_structural() -> Result<f64> {
    let mut r = rng(6);
    let a = rand_tensor(&mut r, &[4, 3], 1.0);
    let b = rand_tensor(&mut r, &[4, 2], 1.0);
    grad_check_with(
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice_cols(c, 1, 3)?;
            let s2 = g.mul(s, s)?;
            let rs = g.reshape(s2, &[2, 6])?;
            let c0 = g.concat(&[rs, rs], 0)?;
            project(g, c0)
        },
        &[a, b],
        smooth(),
    )
}

fn check_softmax() -> Result<f64> {
    let mut r = rng(7);
    let x = rand_tensor(&mut r, &[3, 4, 5], 2.0);
    grad_check_with(
        |g, v| {
            let s1 = g.softmax(v[0], 1)?;
            let s2 = g.softmax(v[0], 2)?;
            let p1 = project(g, s1)?;
            let sq = g.mul(s2, s2)?;
            let p2 = project(g, sq)?;
            g.add(p1, p2)
        },
        &[x],
        smooth(),
    )
}

fn check_conv(dims: usize, padding: Padding, stride: usize) -> Result<f64> {
    let mut r = rng(8 + dims as u64 * 10 + stride as u64);
    let n = if dims == 2 { 6 } else { 4 };
    let (cin, cout) = (3, 2);
    let mut shape = vec![n; dims];
    shape.push(cin);
    let x = rand_tensor(&mut r, &shape, 1.0);
    let w = rand_tensor(&mut r, &[3usize.pow(dims as u32) * cin, cout], 1.0);
    let b = rand_tensor(&mut r, &[cout], 1.0);
    let spec = if stride == 1 { ConvSpec::same(padding) } else { ConvSpec::down(padding) };
    grad_check_with(
        |g, v| {
            let y = g.conv(v[0], v[1], Some(v[2]), spec)?;
            let y2 = g.mul(y, y)?;
            project(g, y2)
        },
        &[x, w, b],
        smooth(),
    )
}

fn check_resample() -> Result<f64> {
    let mut r = rng(9);
    let x2 = rand_tensor(&mut r, &[4, 4, 2], 1.0);
    let x3 = rand_tensor(&mut r, &[2, 2, 2, 3], 1.0);
    grad_check_with(
        |g, v| {
            let u2 = g.upsample(v[0])?;
            let u3 = g.upsample(v[1])?;
            let p = g.avg_pool2(v[0])?;
            let u3s = g.mul(u3, u3)?;
            project_all(g, &[u2, u3s, p])
        },
        &[x2, x3],
        smooth(),
    )
}

fn check_gather(mode: GridMode) -> Result<f64> {
    let mut r = rng(11 + mode.n_planes() as u64);
    let res = 5;
    let pts = random_points(&mut r, 9, 0.0, 1.0);
    let maps = PointMaps::new(&pts, mode, res)?;
    let planes: Vec<Tensor> = (0..mode.n_planes())
        .map(|_| rand_tensor(&mut r, &mode.plane_shape(res, 3), 1.0))
        .collect();
    grad_check_with(
        |g, v| {
            let f = convert::grid_to_point_graph(g, v, &maps)?;
            let f2 = g.mul(f, f)?;
            project(g, f2)
        },
        &planes,
        smooth(),
    )
}

fn check_scatter_mean() -> Result<f64> {
    let mut r = rng(12);
    let pts = random_points(&mut r, 20, 0.0, 1.0);
    let maps = PointMaps::new(&pts, GridMode::Triplane, 4)?;
    let feats = rand_tensor(&mut r, &[20, 3], 1.0);
    grad_check_with(
        |g, v| {
            let planes = convert::scatter_mean_graph(g, v[0], &maps)?;
            let sq: Vec<Var> = planes.iter().map(|&p| g.mul(p, p)).collect::<Result<_>>()?;
            project_all(g, &sq)
        },
        &[feats],
        smooth(),
    )
}

fn check_scatter_max() -> Result<f64> {
    let mut r = rng(13);
    let pts = random_points(&mut r, 20, 0.0, 1.0);
    let maps = PointMaps::new(&pts, GridMode::Volume, 3)?;
    // Distinct values keep every group's argmax unique under perturbation.
    let mut vals: Vec<f64> = (0..60).map(|i| i as f64 * 0.05).collect();
    for i in (1..vals.len()).rev() {
        let j = r.gen_range(0..=i);
        vals.swap(i, j);
    }
    let feats = Tensor::new(&[20, 3], vals)?;
    grad_check_with(
        |g, v| {
            let planes = convert::scatter_max_graph(g, v[0], &maps)?;
            project_all(g, &planes)
        },
        &[feats],
        piecewise(),
    )
}

fn check_point_to_grid() -> Result<f64> {
    let mut r = rng(14);
    let pts = random_points(&mut r, 15, 0.0, 1.0);
    let maps = PointMaps::new(&pts, GridMode::Triplane, 4)?;
    let mut ps = ParamSet::new();
    nn::init_mlp2(&mut ps, &mut r, "p2g", (3, 5, 4), false);
    let ps = jitter(&ps, 14);
    let feats = rand_tensor(&mut r, &[15, 3], 1.0);
    with_params(&ps, &[feats], piecewise(), |g, p, v| {
        let planes = convert::point_to_grid_graph(g, p, "p2g", v[0], &maps)?;
        project_all(g, &planes)
    })
}

fn check_bce() -> Result<f64> {
    let mut r = rng(15);
    let n = 12;
    let pred = Tensor::new(&[n, 1], (0..n).map(|_| r.gen_range(0.05..0.95)).collect())?;
    let target: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    grad_check_with(|g, v| g.bce(v[0], &target, 1e-7), &[pred], smooth())
}

fn tiny_encoder(mode: GridMode) -> EncoderConfig {
    EncoderConfig {
        mode,
        resolution: 8,
        dim: 4,
        depth: 2,
        no_resample_top: 1,
        alternation: None,
        padding: Padding::Zero,
    }
}

fn check_pointnet() -> Result<f64> {
    let cfg = tiny_encoder(GridMode::Triplane);
    let mut r = rng(16);
    let pts = random_points(&mut r, 12, 0.05, 0.95);
    let maps = EncoderMaps::new(&cfg, &pts)?;
    let mut ps = ParamSet::new();
    encoder::init_params(&cfg, &mut r, &mut ps)?;
    let ps = jitter(&ps, 16);
    let names: Vec<String> = ps.names().filter(|n| n.starts_with("pn.")).map(str::to_owned).collect();
    let mut sub = ParamSet::new();
    for n in &names {
        sub.insert(n.clone(), ps.get(n)?.clone());
    }
    with_params(&sub, &[], sampled(piecewise(), 12), |g, p, _| {
        let f = encoder::pointnet_graph(g, p, &maps)?;
        project(g, f)
    })
}

fn check_alto_block() -> Result<f64> {
    let mut r = rng(17);
    let res = 6;
    let d = 3;
    let pts = random_points(&mut r, 10, 0.0, 1.0);
    let maps = PointMaps::new(&pts, GridMode::Triplane, res)?;
    let mut ps = ParamSet::new();
    nn::init_conv(&mut ps, &mut r, "blk.conv0", 2, 3, d, d);
    nn::init_conv(&mut ps, &mut r, "blk.conv1", 2, 3, d, d);
    nn::init_mlp2(&mut ps, &mut r, "blk.mlp", (d, d, d), true);
    let ps = jitter(&ps, 17);
    let planes: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[res, res, d], 1.0)).collect();
    let skip = rand_tensor(&mut r, &[10, d], 1.0);
    let mut extra = planes;
    extra.push(skip);
    with_params(&ps, &extra, sampled(piecewise(), 20), |g, p, v| {
        let (out, pf) = encoder::alto_block(g, p, "blk", &v[..3], Some(v[3]), &maps, Padding::Circular, true)?;
        let mut all = out;
        all.extend(pf);
        project_all(g, &all)
    })
}

fn check_encoder(mode: GridMode) -> Result<f64> {
    check_encoder_seeded(mode, 18 + mode.n_planes() as u64)
}

fn check_encoder_seeded(mode: GridMode, tag: u64) -> Result<f64> {
    let cfg = tiny_encoder(mode);
    let mut r = rng(tag);
    let pts = random_points(&mut r, 16, 0.05, 0.95);
    let maps = EncoderMaps::new(&cfg, &pts)?;
    let mut ps = ParamSet::new();
    encoder::init_params(&cfg, &mut r, &mut ps)?;
    let ps = jitter(&ps, 18);
    with_params(&ps, &[], sampled(piecewise(), 3), |g, p, _| {
        let planes = encoder::encode_graph(g, p, &cfg, &maps)?;
        project_all(g, &planes)
    })
}

fn check_attention(mode: GridMode, heads: usize) -> Result<f64> {
    let mut r = rng(20 + heads as u64);
    let (res, d) = (5, 4);
    let cfg = DecoderConfig { decode: DecodeMode::Attention, heads, chunk: 4096 };
    let mut ps = ParamSet::new();
    decoder::init_params(&cfg, mode, d, &mut r, &mut ps)?;
    let ps = jitter(&ps, 20);
    let names: Vec<String> = ps.names().filter(|n| n.starts_with("dec.att")).map(str::to_owned).collect();
    let mut sub = ParamSet::new();
    for n in &names {
        sub.insert(n.clone(), ps.get(n)?.clone());
    }
    let queries = random_points(&mut r, 6, 0.0, 1.0);
    let maps = QueryMaps::new(&queries, mode, res)?;
    let planes: Vec<Tensor> = (0..mode.n_planes())
        .map(|_| rand_tensor(&mut r, &mode.plane_shape(res, d), 1.0))
        .collect();
    let np = planes.len();
    with_params(&sub, &planes, sampled(piecewise(), 15), |g, p, v| {
        let f = decoder::features_graph(g, p, &cfg, mode, &v[..np], &maps)?;
        project(g, f)
    })
}

fn check_occupancy_head() -> Result<f64> {
    let mut r = rng(22);
    let cfg = DecoderConfig { decode: DecodeMode::Linear, heads: 1, chunk: 4096 };
    let mut ps = ParamSet::new();
    decoder::init_params(&cfg, GridMode::Volume, 4, &mut r, &mut ps)?;
    let ps = jitter(&ps, 22);
    let f = rand_tensor(&mut r, &[5, 4], 1.0);
    with_params(&ps, &[f], sampled(piecewise(), 16), |g, p, v| {
        let y = decoder::occupancy_head_graph(g, p, v[0])?;
        project(g, y)
    })
}

fn check_composite(mode: GridMode) -> Result<f64> {
    let model = ModelConfig {
        encoder: EncoderConfig {
            mode,
            resolution: 16,
            dim: 8,
            depth: 3,
            no_resample_top: 2,
            alternation: None,
            padding: Padding::Zero,
        },
        decoder: DecoderConfig { decode: DecodeMode::Attention, heads: if mode == GridMode::Volume { 2 } else { 1 }, chunk: 4096 },
        ..ModelConfig::default()
    };
    let ps = jitter_by(&train::init_model(&model, 23)?, 23, 0.02);
    let spec = ShapeSpec::sphere([0.5; 3], 0.3);
    let pts = geometry::sample_surface(&spec, 40, 23)?;
    let maps = EncoderMaps::new(&model.encoder, &pts)?;
    let q = geometry::sample_queries_uniform(24, 23)?.with_labels_from(&spec);
    let labels = q.labels.clone().expect("labelled");
    let qmaps = QueryMaps::new(&q.coords, mode, model.encoder.resolution)?;
    let opts = GradCheckOptions { eps: 1e-6, max_coords: Some(2), seed: 23, ..piecewise() };
    with_params(&ps, &[], opts, |g, p, _| train::loss_graph(g, p, &model, &maps, &qmaps, &labels, 1e-7))
}
