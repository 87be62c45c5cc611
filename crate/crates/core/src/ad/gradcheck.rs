use log::{debug, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// Finite-difference settings for [`grad_check_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Use the fourth-order stencil
    /// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`
    /// instead of the central difference.
    pub fourth_order: bool,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Absolute denominator floor of the relative error.
    pub floor: f64,
    /// Denominator floor as a fraction of the largest gradient magnitude
    /// over all inputs, so coordinates whose true gradient vanishes are
    /// judged against the gradient's scale instead of finite-difference
    /// rounding noise.
    pub rel_floor: f64,
    /// Also accept a match with either one-sided difference, at `eps` and
    /// at two tenfold smaller steps. A kink lying within the step spoils the
    /// central difference but leaves the one-sided difference on the far
    /// side of the kink exact.
    pub one_sided: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            fourth_order: false,
            max_coords: None,
            seed: 0,
            floor: 1e-8,
            rel_floor: 0.0,
            one_sided: false,
        }
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` at every input coordinate.
///
/// Returns the largest `|ad - fd| / max(|ad|, |fd|, 1e-8)` over all
/// coordinates of all inputs. See [`grad_check_with`] for the options.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, GradCheckOptions { eps, ..Default::default() })
}

/// Like [`grad_check`], with the denominator floor
/// `max(opts.floor, opts.rel_floor * max |ad|)`.
pub fn grad_check_with<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if inputs.iter().any(|t| t.dtype() == DType::F32) {
        warn!("grad_check on f32 inputs: finite differences will be dominated by rounding");
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;
    drop(g);

    let scale = vars
        .iter()
        .map(|&v| grads.get(v).data().iter().fold(0.0f64, |m, x| m.max(x.abs())))
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Err(Error::Numerical("every gradient is zero; the check would be vacuous".into()));
    }
    let floor = opts.floor.max(opts.rel_floor * scale);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.eps;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let ad = grads.get(v);
        let n = inputs[k].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = inputs[k].data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                probe[k].data_mut()[i] = x0 + dx;
                let y = eval(&probe);
                probe[k].data_mut()[i] = x0;
                y
            };
            let (fp, fm) = (at(h)?, at(-h)?);
            let fd = if opts.fourth_order {
                let d2 = at(2.0 * h)? - at(-2.0 * h)?;
                (8.0 * (fp - fm) - d2) / (12.0 * h)
            } else {
                (fp - fm) / (2.0 * h)
            };
            let a = ad.data()[i];
            let rel = |fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            let mut err = rel(fd);
            if opts.one_sided && err > 0.0 {
                let f0 = at(0.0)?;
                let (mut hh, mut fp, mut fm) = (h, fp, fm);
                for _ in 0..3 {
                    let side = rel((fp - f0) / hh).min(rel((f0 - fm) / hh)).min(rel((fp - fm) / (2.0 * hh)));
                    if side < err {
                        debug!("input {k} coord {i}: kink near probe, step {hh:e} rel err {side:e}");
                        err = side;
                    }
                    hh /= 10.0;
                    (fp, fm) = (at(hh)?, at(-hh)?);
                }
            }
            if err > worst {
                debug!("input {k} coord {i}: ad {a:e} fd {fd:e} rel err {err:e}");
                worst = err;
            }
        }
    }
    Ok(worst)
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
