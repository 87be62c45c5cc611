//! Parameter layouts and graph builders shared by the encoder and decoder.
//!
//! A linear layer `name` owns `name.w` (`in x out`) and `name.b` (`out`).

use rand::Rng;

use crate::ad::{fan_in_uniform, Bound, ConvSpec, Graph, ParamSet, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Weights and bias uniform in `+-1/sqrt(din)`, or all zero when `zero`.
pub fn init_linear<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, din: usize, dout: usize, zero: bool) {
    let (w, b) = if zero {
        (Tensor::zeros(&[din, dout]), Tensor::zeros(&[dout]))
    } else {
        (fan_in_uniform(rng, &[din, dout], din), fan_in_uniform(rng, &[dout], din))
    };
    ps.insert(format!("{name}.w"), w);
    ps.insert(format!("{name}.b"), b);
}

pub fn linear(g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

/// Two linear layers with a ReLU between them: `name.0`, `name.1`.
pub fn init_mlp2<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    dims: (usize, usize, usize),
    zero_last: bool,
) {
    init_linear(ps, rng, &format!("{name}.0"), dims.0, dims.1, false);
    init_linear(ps, rng, &format!("{name}.1"), dims.1, dims.2, zero_last);
}

pub fn mlp2(g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
    let h = linear(g, p, x, &format!("{name}.0"))?;
    let h = g.relu(h);
    linear(g, p, h, &format!("{name}.1"))
}

/// Fully connected residual block of constant width: `x + fc1(relu(fc0(relu(x))))`.
/// `fc1` starts at zero, so a fresh block is the identity.
pub fn init_resnet_fc<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, d: usize) {
    init_linear(ps, rng, &format!("{name}.fc0"), d, d, false);
    init_linear(ps, rng, &format!("{name}.fc1"), d, d, true);
}

pub fn resnet_fc(g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
    let h = g.relu(x);
    let h = linear(g, p, h, &format!("{name}.fc0"))?;
    let h = g.relu(h);
    let dx = linear(g, p, h, &format!("{name}.fc1"))?;
    g.add(x, dx)
}

/// Convolution `name.w` (`k^dims * cin x cout`) with bias `name.b`.
pub fn init_conv<R: Rng>(
    ps: &mut ParamSet,
    rng: &mut R,
    name: &str,
    dims: usize,
    kernel: usize,
    cin: usize,
    cout: usize,
) {
    let fan_in = kernel.pow(dims as u32) * cin;
    ps.insert(format!("{name}.w"), fan_in_uniform(rng, &[fan_in, cout], fan_in));
    ps.insert(format!("{name}.b"), fan_in_uniform(rng, &[cout], fan_in));
}

pub fn conv(g: &mut Graph, p: &Bound, x: Var, name: &str, spec: ConvSpec) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    g.conv(x, w, Some(b), spec)
}

/// Applies `f` to each plane, giving one output per plane.
pub fn per_plane<F>(g: &mut Graph, planes: &[Var], mut f: F) -> Result<Vec<Var>>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    planes.iter().map(|&v| f(g, v)).collect()
}
