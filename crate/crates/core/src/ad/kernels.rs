//! Forward and adjoint kernels on raw buffers. Grids are channels-last:
//! a `[s0, s1, (s2), C]` tensor stores cell `(i, j, k)` at row
//! `(i * s1 + j) * s2 + k`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::direct;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_acc};

/// Output rows processed per im2col block.
const CONV_BLOCK_ROWS: usize = 128;
/// Rows per task of the direct kernels.
const DIRECT_BLOCK_ROWS: usize = 256;
/// Rows per partial weight gradient of the direct kernels.
const DIRECT_DW_ROWS: usize = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(padding: Padding) -> Self {
        ConvSpec {
            kernel: 3,
            stride: 1,
            padding,
        }
    }

    pub fn down(padding: Padding) -> Self {
        ConvSpec {
            kernel: 3,
            stride: 2,
            padding,
        }
    }

    pub fn out_extent(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }
}

fn strides(spatial: &[usize]) -> Vec<usize> {
    let mut s = vec![1; spatial.len()];
    for a in (0..spatial.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * spatial[a + 1];
    }
    s
}

fn unravel(mut idx: usize, spatial: &[usize], out: &mut [usize]) {
    for a in (0..spatial.len()).rev() {
        out[a] = idx % spatial[a];
        idx /= spatial[a];
    }
}

pub(crate) const PAD: u32 = u32::MAX;

/// For each output cell and kernel tap, the flat input cell it reads, or
/// [`PAD`] when the tap falls in zero padding. Row-major over (cell, tap).
pub(crate) struct TapTable {
    pub out_spatial: Vec<usize>,
    pub taps: usize,
    pub src: Vec<u32>,
    /// For each input cell and tap, the output cell reading it through that
    /// tap, or [`PAD`]. `None` when some input cell is read twice through
    /// one tap.
    pub inv: Option<Vec<u32>>,
}

type TapKey = (Vec<usize>, usize, usize, Padding);

pub(crate) fn conv_taps(spatial: &[usize], spec: &ConvSpec) -> Arc<TapTable> {
    static CACHE: OnceLock<Mutex<HashMap<TapKey, Arc<TapTable>>>> = OnceLock::new();
    let key = (spatial.to_vec(), spec.kernel, spec.stride, spec.padding);
    let cache = CACHE.get_or_init(Default::default);
    if let Some(t) = cache.lock().unwrap().get(&key) {
        return Arc::clone(t);
    }
    let table = Arc::new(build_taps(spatial, spec));
    cache.lock().unwrap().insert(key, Arc::clone(&table));
    table
}

fn build_taps(spatial: &[usize], spec: &ConvSpec) -> TapTable {
    let dims = spatial.len();
    let out_spatial: Vec<usize> = spatial.iter().map(|&n| spec.out_extent(n)).collect();
    let taps = spec.kernel.pow(dims as u32);
    let kernel_shape = vec![spec.kernel; dims];
    let n_out: usize = out_spatial.iter().product();
    let in_strides = strides(spatial);
    let half = (spec.kernel / 2) as isize;
    let mut src = Vec::with_capacity(n_out * taps);
    let mut o = vec![0usize; dims];
    let mut t = vec![0usize; dims];
    for cell in 0..n_out {
        unravel(cell, &out_spatial, &mut o);
        for tap in 0..taps {
            unravel(tap, &kernel_shape, &mut t);
            let mut flat = 0usize;
            let mut inside = true;
            for a in 0..dims {
                let n = spatial[a] as isize;
                let mut p = (o[a] * spec.stride) as isize + t[a] as isize - half;
                if p < 0 || p >= n {
                    match spec.padding {
                        Padding::Zero => {
                            inside = false;
                            break;
                        }
                        Padding::Circular => p = p.rem_euclid(n),
                    }
                }
                flat += p as usize * in_strides[a];
            }
            src.push(if inside { flat as u32 } else { PAD });
        }
    }
    let n_in: usize = spatial.iter().product();
    let mut inv = Some(vec![PAD; n_in * taps]);
    for (k, &s) in src.iter().enumerate() {
        if s == PAD {
            continue;
        }
        let slot = s as usize * taps + k % taps;
        match inv.as_mut() {
            Some(v) if v[slot] == PAD => v[slot] = (k / taps) as u32,
            _ => {
                inv = None;
                break;
            }
        }
    }
    TapTable {
        out_spatial,
        taps,
        src,
        inv,
    }
}

fn im2col(input: &[f64], cin: usize, table: &TapTable, rows: std::ops::Range<usize>, col: &mut [f64]) {
    let taps = table.taps;
    let width = taps * cin;
    for (r, cell) in rows.enumerate() {
        let dst = &mut col[r * width..(r + 1) * width];
        for tap in 0..taps {
            let d = &mut dst[tap * cin..(tap + 1) * cin];
            match table.src[cell * taps + tap] {
                PAD => d.iter_mut().for_each(|x| *x = 0.0),
                src => {
                    let src = src as usize;
                    d.copy_from_slice(&input[src * cin..(src + 1) * cin])
                }
            }
        }
    }
}

/// Cross-correlation of a channels-last grid with a `[taps * cin, cout]` kernel.
pub fn conv_forward(
    input: &[f64],
    spatial: &[usize],
    cin: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    spec: &ConvSpec,
) -> (Vec<usize>, Vec<f64>) {
    conv_forward_with(input, spatial, cin, weight, bias, cout, spec, direct::available())
}

#[allow(clippy::too_many_arguments)]
fn conv_forward_with(
    input: &[f64],
    spatial: &[usize],
    cin: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    spec: &ConvSpec,
    fast: bool,
) -> (Vec<usize>, Vec<f64>) {
    let table = conv_taps(spatial, spec);
    let out_spatial = table.out_spatial.clone();
    let taps = table.taps;
    let n_out: usize = out_spatial.iter().product();
    let width = taps * cin;
    let mut out = vec![0.0; n_out * cout];
    if n_out == 0 || cout == 0 {
        return (out_spatial, out);
    }
    let block = if fast { DIRECT_BLOCK_ROWS } else { CONV_BLOCK_ROWS };
    out.par_chunks_mut(block * cout)
        .enumerate()
        .for_each(|(blk, out_blk)| {
            let start = blk * block;
            let rows = out_blk.len() / cout;
            if fast {
                let src = &table.src[start * taps..(start + rows) * taps];
                direct::gather_gemm(input, cin, src, taps, weight, cout, out_blk);
            } else {
                let mut col = vec![0.0; rows * width];
                im2col(input, cin, &table, start..start + rows, &mut col);
                matmul_into(&col, weight, rows, width, cout, out_blk);
            }
            if let Some(b) = bias {
                for row in out_blk.chunks_mut(cout) {
                    row.iter_mut().zip(b).for_each(|(y, bb)| *y += bb);
                }
            }
        });
    (out_spatial, out)
}

/// Gradients of [`conv_forward`]; accumulates into `d_input`, `d_weight`, `d_bias`
/// in a fixed block order.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    spatial: &[usize],
    cin: usize,
    weight: &[f64],
    cout: usize,
    spec: &ConvSpec,
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_weight: Option<&mut [f64]>,
    d_bias: Option<&mut [f64]>,
) {
    let fast = direct::available();
    conv_backward_with(input, spatial, cin, weight, cout, spec, d_out, d_input, d_weight, d_bias, fast)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_with(
    input: &[f64],
    spatial: &[usize],
    cin: usize,
    weight: &[f64],
    cout: usize,
    spec: &ConvSpec,
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_weight: Option<&mut [f64]>,
    d_bias: Option<&mut [f64]>,
    fast: bool,
) {
    let table = conv_taps(spatial, spec);
    let out_spatial = table.out_spatial.clone();
    let taps = table.taps;
    let n_out: usize = out_spatial.iter().product();
    let width = taps * cin;

    if let Some(db) = d_bias {
        for row in d_out.chunks(cout) {
            db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
        }
    }
    if n_out == 0 || cout == 0 || cin == 0 {
        return;
    }
    if fast && table.inv.is_some() {
        direct_backward(input, cin, weight, cout, &table, d_out, d_input, d_weight);
        return;
    }

    let n_blocks = n_out.div_ceil(CONV_BLOCK_ROWS);
    let want_w = d_weight.is_some();
    let want_x = d_input.is_some();
    let mut d_weight = d_weight;
    let mut d_input = d_input;
    let group = rayon::current_num_threads().max(1);
    let mut blk0 = 0;
    while blk0 < n_blocks {
        let blk1 = (blk0 + group).min(n_blocks);
        let parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (blk0..blk1)
            .into_par_iter()
            .map(|blk| {
                let start = blk * CONV_BLOCK_ROWS;
                let rows = CONV_BLOCK_ROWS.min(n_out - start);
                let g = &d_out[start * cout..(start + rows) * cout];
                let dw = want_w.then(|| {
                    let mut col = vec![0.0; rows * width];
                    im2col(input, cin, &table, start..start + rows, &mut col);
                    let mut dw = vec![0.0; width * cout];
                    matmul_tn_acc(&col, g, width, rows, cout, &mut dw);
                    dw
                });
                let dcol = want_x.then(|| {
                    let mut dcol = vec![0.0; rows * width];
                    matmul_nt_into(g, weight, rows, cout, width, &mut dcol);
                    dcol
                });
                (dw, dcol)
            })
            .collect();
        for (i, (dw, dcol)) in parts.into_iter().enumerate() {
            if let (Some(acc), Some(dw)) = (d_weight.as_deref_mut(), dw) {
                acc.iter_mut().zip(&dw).for_each(|(a, g)| *a += g);
            }
            if let (Some(dx), Some(dcol)) = (d_input.as_deref_mut(), dcol) {
                let start = (blk0 + i) * CONV_BLOCK_ROWS;
                for (r, row) in dcol.chunks(width).enumerate() {
                    let cell = start + r;
                    for tap in 0..taps {
                        let src = table.src[cell * taps + tap];
                        if src != PAD {
                            let src = src as usize;
                            let dst = &mut dx[src * cin..(src + 1) * cin];
                            dst.iter_mut()
                                .zip(&row[tap * cin..(tap + 1) * cin])
                                .for_each(|(a, g)| *a += g);
                        }
                    }
                }
            }
        }
        blk0 = blk1;
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_backward(
    input: &[f64],
    cin: usize,
    weight: &[f64],
    cout: usize,
    table: &TapTable,
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_weight: Option<&mut [f64]>,
) {
    let taps = table.taps;
    let n_out = d_out.len() / cout;
    if let Some(dw) = d_weight {
        let parts: Vec<Vec<f64>> = (0..n_out.div_ceil(DIRECT_DW_ROWS))
            .into_par_iter()
            .map(|blk| {
                let start = blk * DIRECT_DW_ROWS;
                let rows = DIRECT_DW_ROWS.min(n_out - start);
                let mut part = vec![0.0; taps * cin * cout];
                let src = &table.src[start * taps..(start + rows) * taps];
                let g = &d_out[start * cout..(start + rows) * cout];
                direct::gather_gemm_tn_acc(input, cin, src, taps, g, cout, &mut part);
                part
            })
            .collect();
        for part in parts {
            dw.iter_mut().zip(&part).for_each(|(a, g)| *a += g);
        }
    }
    if let Some(dx) = d_input {
        let inv = table.inv.as_deref().expect("checked by caller");
        // Per tap, the kernel transposed to [cout, cin].
        let mut wt = vec![0.0; weight.len()];
        for t in 0..taps {
            for c in 0..cin {
                for o in 0..cout {
                    wt[(t * cout + o) * cin + c] = weight[(t * cin + c) * cout + o];
                }
            }
        }
        let mut local = vec![0.0; dx.len()];
        local
            .par_chunks_mut(DIRECT_BLOCK_ROWS * cin)
            .enumerate()
            .for_each(|(blk, chunk)| {
                let start = blk * DIRECT_BLOCK_ROWS;
                let rows = chunk.len() / cin;
                let src = &inv[start * taps..(start + rows) * taps];
                direct::gather_gemm(d_out, cout, src, taps, &wt, cin, chunk);
            });
        dx.iter_mut().zip(&local).for_each(|(a, g)| *a += g);
    }
}

/// Nearest-neighbour x2 upsampling. Returns the output spatial shape.
pub fn upsample_nearest(input: &[f64], spatial: &[usize], channels: usize) -> (Vec<usize>, Vec<f64>) {
    let out_spatial: Vec<usize> = spatial.iter().map(|n| n * 2).collect();
    let map = upsample_map(spatial);
    let mut out = vec![0.0; map.len() * channels];
    for (o, &src) in map.iter().enumerate() {
        out[o * channels..(o + 1) * channels].copy_from_slice(&input[src * channels..(src + 1) * channels]);
    }
    (out_spatial, out)
}

/// Source cell of each upsampled cell.
pub(crate) fn upsample_map(spatial: &[usize]) -> Vec<usize> {
    let dims = spatial.len();
    let out_spatial: Vec<usize> = spatial.iter().map(|n| n * 2).collect();
    let in_strides = strides(spatial);
    let n_out: usize = out_spatial.iter().product();
    let mut idx = vec![0; dims];
    (0..n_out)
        .map(|o| {
            unravel(o, &out_spatial, &mut idx);
            idx.iter().zip(&in_strides).map(|(i, s)| (i / 2) * s).sum()
        })
        .collect()
}

/// Non-overlapping 2^dims average pooling (extents must be even).
pub fn avg_pool2(input: &[f64], spatial: &[usize], channels: usize) -> (Vec<usize>, Vec<f64>) {
    let out_spatial: Vec<usize> = spatial.iter().map(|n| n / 2).collect();
    let map = upsample_map(&out_spatial);
    let n_out: usize = out_spatial.iter().product();
    let scale = 1.0 / (1usize << spatial.len()) as f64;
    let mut out = vec![0.0; n_out * channels];
    for (i, &dst) in map.iter().enumerate() {
        let d = &mut out[dst * channels..(dst + 1) * channels];
        d.iter_mut()
            .zip(&input[i * channels..(i + 1) * channels])
            .for_each(|(a, x)| *a += x * scale);
    }
    (out_spatial, out)
}

/// A fixed sparse linear map between row sets: output row `r` is
/// `sum_j weights[j] * input[cols[j]]` for `j` in `row_ptr[r]..row_ptr[r+1]`.
/// Gathers (interpolation, neighbour patches) and scatter-means are both
/// instances; the adjoint is the transposed map.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    pub n_in: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SparseMap {
    pub fn n_out(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Builds a map from `(row, col, weight)` triplets with rows already grouped.
    pub fn from_rows<I>(n_in: usize, rows: I) -> Self
    where
        I: IntoIterator,
        I::Item: IntoIterator<Item = (usize, f64)>,
    {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (c, w) in row {
                debug_assert!(c < n_in);
                cols.push(c);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        SparseMap {
            n_in,
            row_ptr,
            cols,
            weights,
        }
    }

    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_out() * channels];
        out.par_chunks_mut(channels.max(1) * 256)
            .enumerate()
            .for_each(|(blk, chunk)| {
                for (r_local, dst) in chunk.chunks_mut(channels).enumerate() {
                    let r = blk * 256 + r_local;
                    for j in self.row_ptr[r]..self.row_ptr[r + 1] {
                        let w = self.weights[j];
                        let src = &input[self.cols[j] * channels..(self.cols[j] + 1) * channels];
                        dst.iter_mut().zip(src).for_each(|(a, x)| *a += w * x);
                    }
                }
            });
        out
    }

    /// `d_input += M^T d_out`, visiting output rows in ascending order.
    pub fn apply_transpose_acc(&self, d_out: &[f64], channels: usize, d_input: &mut [f64]) {
        for r in 0..self.n_out() {
            let g = &d_out[r * channels..(r + 1) * channels];
            for j in self.row_ptr[r]..self.row_ptr[r + 1] {
                let w = self.weights[j];
                let dst = &mut d_input[self.cols[j] * channels..(self.cols[j] + 1) * channels];
                dst.iter_mut().zip(g).for_each(|(a, x)| *a += w * x);
            }
        }
    }
}

/// Per-channel maximum over groups of input rows. Empty groups yield zero.
/// Returns the values and, per (group, channel), the winning input row
/// (first one on ties) or `usize::MAX` for empty groups.
pub fn group_max(input: &[f64], channels: usize, groups: &SparseMap) -> (Vec<f64>, Vec<usize>) {
    let n = groups.n_out();
    let mut out = vec![0.0; n * channels];
    let mut arg = vec![usize::MAX; n * channels];
    for g in 0..n {
        for j in groups.row_ptr[g]..groups.row_ptr[g + 1] {
            let p = groups.cols[j];
            for c in 0..channels {
                let x = input[p * channels + c];
                let k = g * channels + c;
                if arg[k] == usize::MAX || x > out[k] {
                    out[k] = x;
                    arg[k] = p;
                }
            }
        }
    }
    (out, arg)
}
