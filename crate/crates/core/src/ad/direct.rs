//! Convolution without im2col: rows of a channels-last grid are read in
//! place through a tap table and multiplied by the kernel with AVX2/FMA
//! register tiles. Used when the CPU supports it; callers fall back to the
//! im2col path otherwise.

use super::kernels::PAD;

pub(crate) fn available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `out[r][o] = sum_t sum_c input[src[r * taps + t]][c] * w[(t * cin + c) * cout + o]`
/// for the `out.len() / cout` rows covered by `src`. `PAD` entries read zeros.
pub(crate) fn gather_gemm(input: &[f64], cin: usize, src: &[u32], taps: usize, w: &[f64], cout: usize, out: &mut [f64]) {
    let rows = out.len() / cout;
    assert!(src.len() >= rows * taps && w.len() >= taps * cin * cout);
    assert!(src.iter().all(|&s| s == PAD || (s as usize + 1) * cin <= input.len()));
    #[cfg(target_arch = "x86_64")]
    if available() {
        // SAFETY: features checked above; bounds asserted above.
        unsafe { x86::gather_gemm(input, cin, src, taps, w, cout, out) };
        return;
    }
    for r in 0..rows {
        let dst = &mut out[r * cout..(r + 1) * cout];
        dst.iter_mut().for_each(|y| *y = 0.0);
        for t in 0..taps {
            let s = src[r * taps + t];
            if s == PAD {
                continue;
            }
            let x = &input[s as usize * cin..(s as usize + 1) * cin];
            for (c, &xc) in x.iter().enumerate() {
                let wr = &w[(t * cin + c) * cout..(t * cin + c + 1) * cout];
                dst.iter_mut().zip(wr).for_each(|(y, wv)| *y += xc * wv);
            }
        }
    }
}

/// `dw[(t * cin + c) * cout + o] += sum_r input[src[r * taps + t]][c] * g[r][o]`.
pub(crate) fn gather_gemm_tn_acc(
    input: &[f64],
    cin: usize,
    src: &[u32],
    taps: usize,
    g: &[f64],
    cout: usize,
    dw: &mut [f64],
) {
    let rows = g.len() / cout;
    assert!(src.len() >= rows * taps && dw.len() >= taps * cin * cout);
    assert!(src.iter().all(|&s| s == PAD || (s as usize + 1) * cin <= input.len()));
    #[cfg(target_arch = "x86_64")]
    if available() {
        // SAFETY: as in `gather_gemm`.
        unsafe { x86::gather_gemm_tn_acc(input, cin, src, taps, g, cout, dw) };
        return;
    }
    for t in 0..taps {
        for r in 0..rows {
            let s = src[r * taps + t];
            if s == PAD {
                continue;
            }
            let x = &input[s as usize * cin..(s as usize + 1) * cin];
            let gr = &g[r * cout..(r + 1) * cout];
            for (c, &xc) in x.iter().enumerate() {
                let d = &mut dw[(t * cin + c) * cout..(t * cin + c + 1) * cout];
                d.iter_mut().zip(gr).for_each(|(a, gv)| *a += xc * gv);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::PAD;
    use std::arch::x86_64::*;

    fn avx512() -> bool {
        std::is_x86_feature_detected!("avx512f")
    }

    /// Register tiles of `$rows` output rows by `NV` vectors of `$lanes`
    /// columns (`tile`), and of `$rows` kernel rows by `NV` vectors for the
    /// weight gradient (`tile_tn`).
    macro_rules! tiles {
        ($m:ident, $feat:literal, $v:ty, $lanes:expr, $rows:expr,
         $zero:ident, $load:ident, $store:ident, $set1:ident, $fma:ident, $add:ident) => {
            mod $m {
                use super::*;
                pub(super) const LANES: usize = $lanes;
                const ROWS: usize = $rows;

                #[allow(clippy::too_many_arguments)]
                #[target_feature(enable = $feat)]
                pub(super) unsafe fn tile<const NV: usize>(
                    input: &[f64],
                    cin: usize,
                    src: &[u32],
                    taps: usize,
                    w: &[f64],
                    cout: usize,
                    out: &mut [f64],
                    o0: usize,
                    zero: &[f64],
                ) {
                    let rows = out.len() / cout;
                    let inp = input.as_ptr();
                    let wp = w.as_ptr();
                    let mut r0 = 0;
                    while r0 < rows {
                        let nr = ROWS.min(rows - r0);
                        let mut acc: [[$v; NV]; ROWS] = [[$zero(); NV]; ROWS];
                        for t in 0..taps {
                            let mut p = [zero.as_ptr(); ROWS];
                            for (i, pi) in p.iter_mut().enumerate().take(nr) {
                                let s = src[(r0 + i) * taps + t];
                                if s != PAD {
                                    *pi = inp.add(s as usize * cin);
                                }
                            }
                            let wt = wp.add(t * cin * cout + o0);
                            for c in 0..cin {
                                let mut wv: [$v; NV] = [$zero(); NV];
                                for (j, v) in wv.iter_mut().enumerate() {
                                    *v = $load(wt.add(c * cout + LANES * j));
                                }
                                for i in 0..ROWS {
                                    let b = $set1(*p[i].add(c));
                                    for j in 0..NV {
                                        acc[i][j] = $fma(b, wv[j], acc[i][j]);
                                    }
                                }
                            }
                        }
                        let op = out.as_mut_ptr();
                        for (i, a) in acc.iter().enumerate().take(nr) {
                            for (j, v) in a.iter().enumerate() {
                                $store(op.add((r0 + i) * cout + o0 + LANES * j), *v);
                            }
                        }
                        r0 += ROWS;
                    }
                }

                #[allow(clippy::too_many_arguments)]
                #[target_feature(enable = $feat)]
                pub(super) unsafe fn tile_tn<const NV: usize>(
                    input: &[f64],
                    cin: usize,
                    src: &[u32],
                    taps: usize,
                    g: &[f64],
                    cout: usize,
                    dw: &mut [f64],
                    o0: usize,
                ) {
                    let rows = g.len() / cout;
                    let inp = input.as_ptr();
                    let gp = g.as_ptr();
                    for t in 0..taps {
                        let mut c0 = 0;
                        while c0 < cin {
                            let nc = ROWS.min(cin - c0);
                            let mut acc: [[$v; NV]; ROWS] = [[$zero(); NV]; ROWS];
                            for r in 0..rows {
                                let s = src[r * taps + t];
                                if s == PAD {
                                    continue;
                                }
                                let x = inp.add(s as usize * cin + c0);
                                let mut gv: [$v; NV] = [$zero(); NV];
                                for (j, v) in gv.iter_mut().enumerate() {
                                    *v = $load(gp.add(r * cout + o0 + LANES * j));
                                }
                                for i in 0..ROWS {
                                    let b = $set1(*x.add(i.min(nc - 1)));
                                    for j in 0..NV {
                                        acc[i][j] = $fma(b, gv[j], acc[i][j]);
                                    }
                                }
                            }
                            let dp = dw.as_mut_ptr();
                            for (i, a) in acc.iter().enumerate().take(nc) {
                                for (j, v) in a.iter().enumerate() {
                                    let q = dp.add((t * cin + c0 + i) * cout + o0 + LANES * j);
                                    $store(q, $add($load(q), *v));
                                }
                            }
                            c0 += ROWS;
                        }
                    }
                }
            }
        };
    }

    tiles!(v256, "avx2,fma", __m256d, 4, 6, _mm256_setzero_pd, _mm256_loadu_pd, _mm256_storeu_pd,
           _mm256_set1_pd, _mm256_fmadd_pd, _mm256_add_pd);
    tiles!(v512, "avx512f", __m512d, 8, 8, _mm512_setzero_pd, _mm512_loadu_pd, _mm512_storeu_pd,
           _mm512_set1_pd, _mm512_fmadd_pd, _mm512_add_pd);

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gather_gemm(
        input: &[f64],
        cin: usize,
        src: &[u32],
        taps: usize,
        w: &[f64],
        cout: usize,
        out: &mut [f64],
    ) {
        let zero = vec![0.0f64; cin.max(1)];
        let mut o0 = 0;
        if avx512() {
            while o0 + 2 * v512::LANES <= cout {
                v512::tile::<2>(input, cin, src, taps, w, cout, out, o0, &zero);
                o0 += 2 * v512::LANES;
            }
            if o0 + v512::LANES <= cout {
                v512::tile::<1>(input, cin, src, taps, w, cout, out, o0, &zero);
                o0 += v512::LANES;
            }
        }
        while o0 + 2 * v256::LANES <= cout {
            v256::tile::<2>(input, cin, src, taps, w, cout, out, o0, &zero);
            o0 += 2 * v256::LANES;
        }
        if o0 + v256::LANES <= cout {
            v256::tile::<1>(input, cin, src, taps, w, cout, out, o0, &zero);
            o0 += v256::LANES;
        }
        if o0 < cout {
            let rows = out.len() / cout;
            for r in 0..rows {
                for o in o0..cout {
                    let mut acc = 0.0f64;
                    for t in 0..taps {
                        let s = src[r * taps + t];
                        if s == PAD {
                            continue;
                        }
                        let x = &input[s as usize * cin..];
                        for c in 0..cin {
                            acc = x[c].mul_add(w[(t * cin + c) * cout + o], acc);
                        }
                    }
                    out[r * cout + o] = acc;
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn gather_gemm_tn_acc(
        input: &[f64],
        cin: usize,
        src: &[u32],
        taps: usize,
        g: &[f64],
        cout: usize,
        dw: &mut [f64],
    ) {
        let mut o0 = 0;
        if avx512() {
            while o0 + 2 * v512::LANES <= cout {
                v512::tile_tn::<2>(input, cin, src, taps, g, cout, dw, o0);
                o0 += 2 * v512::LANES;
            }
            if o0 + v512::LANES <= cout {
                v512::tile_tn::<1>(input, cin, src, taps, g, cout, dw, o0);
                o0 += v512::LANES;
            }
        }
        while o0 + 2 * v256::LANES <= cout {
            v256::tile_tn::<2>(input, cin, src, taps, g, cout, dw, o0);
            o0 += 2 * v256::LANES;
        }
        if o0 + v256::LANES <= cout {
            v256::tile_tn::<1>(input, cin, src, taps, g, cout, dw, o0);
            o0 += v256::LANES;
        }
        if o0 < cout {
            let rows = g.len() / cout;
            for t in 0..taps {
                for c in 0..cin {
                    for o in o0..cout {
                        let mut acc = 0.0f64;
                        for r in 0..rows {
                            let s = src[r * taps + t];
                            if s != PAD {
                                acc = input[s as usize * cin + c].mul_add(g[r * cout + o], acc);
                            }
                        }
                        dw[(t * cin + c) * cout + o] += acc;
                    }
                }
            }
        }
    }
}
