//! Conv1d inner loops.
//!
//! Forward accumulates each output as `bias + Σ_i Σ_k w[c,i,k]·xp[i,t+k]`
//! over the zero-padded input `xp`, with `i` outer and `k` inner. Padded taps
//! are summed like any other, so a plain triple loop over the padded input
//! reproduces the result bit for bit. Tiles of output channels × time steps
//! are kept in registers; the tile shape never changes the per-element order.
//!
//! Backward uses `matrixmultiply` on strided views of the padded input.

use rayon::prelude::*;

pub fn conv1d_out_len(len: usize, kernel: usize, padding: usize) -> Option<usize> {
    (len + 2 * padding).checked_sub(kernel).map(|v| v + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub len: usize,
    pub out_len: usize,
    pub pad: usize,
}

impl ConvDims {
    fn padded_len(&self) -> usize {
        self.len + 2 * self.pad
    }
}

const CB: usize = 8;

/// Copies one sample into a zero-padded buffer of row length
/// `len + 2·pad + extra`.
fn pad_sample(x: &[f32], d: ConvDims, extra: usize) -> (Vec<f32>, usize) {
    let row = d.padded_len() + extra;
    let mut xp = vec![0.0f32; d.c_in * row];
    for i in 0..d.c_in {
        xp[i * row + d.pad..i * row + d.pad + d.len]
            .copy_from_slice(&x[i * d.len..(i + 1) * d.len]);
    }
    (xp, row)
}

pub(crate) fn conv1d_forward(x: &[f32], w: &[f32], b: &[f32], d: ConvDims) -> Vec<f32> {
    let mut out = vec![0.0f32; d.batch * d.c_out * d.out_len];
    out.par_chunks_mut(d.c_out * d.out_len)
        .zip(x.par_chunks(d.c_in * d.len))
        .for_each(|(y, xs)| forward_sample(xs, w, b, d, y));
    out
}

fn forward_sample(x: &[f32], w: &[f32], b: &[f32], d: ConvDims, y: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if d.out_len >= 32 && std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature presence checked at runtime.
            return unsafe { forward_tiled::<32>(x, w, b, d, y, simd::tile_avx512) };
        }
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: feature presence checked at runtime.
            return unsafe { forward_tiled::<8>(x, w, b, d, y, simd::tile_avx) };
        }
    }
    // SAFETY: the scalar tile needs no CPU features.
    unsafe { forward_tiled::<8>(x, w, b, d, y, tile_scalar::<8>) }
}

/// Accumulates one `CB × T` output tile over all taps. `xr` holds `T + K − 1`
/// padded samples per input channel (row stride `row`) and `wp` the packed
/// weights of the channel block.
type TileFn<const T: usize> = unsafe fn(&mut [[f32; T]; CB], &[f32], usize, &[[f32; CB]], usize);

fn tile_scalar<const T: usize>(
    acc: &mut [[f32; T]; CB],
    xr: &[f32],
    row: usize,
    wp: &[[f32; CB]],
    k_len: usize,
) {
    for (i, wr) in wp.chunks_exact(k_len).enumerate() {
        for (k, wv) in wr.iter().enumerate() {
            let xv = &xr[i * row + k..i * row + k + T];
            for c in 0..CB {
                for j in 0..T {
                    acc[c][j] += wv[c] * xv[j];
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use super::CB;
    use std::arch::x86_64::*;

    /// # Safety
    /// Requires AVX-512F; `xr` must hold every row window read.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn tile_avx512(
        acc: &mut [[f32; 32]; CB],
        xr: &[f32],
        row: usize,
        wp: &[[f32; CB]],
        k_len: usize,
    ) {
        let c_in = wp.len() / k_len;
        assert!(c_in == 0 || (c_in - 1) * row + k_len - 1 + 32 <= xr.len());
        let mut a = [[_mm512_setzero_ps(); 2]; CB];
        for c in 0..CB {
            a[c][0] = _mm512_loadu_ps(acc[c].as_ptr());
            a[c][1] = _mm512_loadu_ps(acc[c].as_ptr().add(16));
        }
        let xp = xr.as_ptr();
        for i in 0..c_in {
            for k in 0..k_len {
                let wv = wp[i * k_len + k];
                let p = xp.add(i * row + k);
                let x0 = _mm512_loadu_ps(p);
                let x1 = _mm512_loadu_ps(p.add(16));
                for c in 0..CB {
                    let ws = _mm512_set1_ps(wv[c]);
                    a[c][0] = _mm512_add_ps(a[c][0], _mm512_mul_ps(ws, x0));
                    a[c][1] = _mm512_add_ps(a[c][1], _mm512_mul_ps(ws, x1));
                }
            }
        }
        for c in 0..CB {
            _mm512_storeu_ps(acc[c].as_mut_ptr(), a[c][0]);
            _mm512_storeu_ps(acc[c].as_mut_ptr().add(16), a[c][1]);
        }
    }

    /// # Safety
    /// Requires AVX; `xr` must hold every row window read.
    #[target_feature(enable = "avx")]
    pub(super) unsafe fn tile_avx(
        acc: &mut [[f32; 8]; CB],
        xr: &[f32],
        row: usize,
        wp: &[[f32; CB]],
        k_len: usize,
    ) {
        let c_in = wp.len() / k_len;
        assert!(c_in == 0 || (c_in - 1) * row + k_len - 1 + 8 <= xr.len());
        let mut a = [_mm256_setzero_ps(); CB];
        for c in 0..CB {
            a[c] = _mm256_loadu_ps(acc[c].as_ptr());
        }
        let xp = xr.as_ptr();
        for i in 0..c_in {
            for k in 0..k_len {
                let wv = wp[i * k_len + k];
                let x0 = _mm256_loadu_ps(xp.add(i * row + k));
                for c in 0..CB {
                    a[c] = _mm256_add_ps(a[c], _mm256_mul_ps(_mm256_set1_ps(wv[c]), x0));
                }
            }
        }
        for c in 0..CB {
            _mm256_storeu_ps(acc[c].as_mut_ptr(), a[c]);
        }
    }
}

/// # Safety
/// `tile` must be safe to call on this CPU.
unsafe fn forward_tiled<const T: usize>(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    d: ConvDims,
    y: &mut [f32],
    tile: TileFn<T>,
) {
    let tiles = d.out_len.div_ceil(T);
    // extra zeros so the last tile can read a full T-wide window
    let extra = tiles * T - d.out_len;
    let (xp, row) = pad_sample(x, d, extra);
    let taps = d.c_in * d.kernel;
    // weights of one channel block, interleaved per tap; missing channels are zero
    let mut wp = vec![[0.0f32; CB]; taps];
    for c0 in (0..d.c_out).step_by(CB) {
        let cb = CB.min(d.c_out - c0);
        let mut bias = [0.0f32; CB];
        for c in 0..cb {
            bias[c] = b[c0 + c];
            let wc = &w[(c0 + c) * taps..(c0 + c + 1) * taps];
            for (slot, &v) in wp.iter_mut().zip(wc) {
                slot[c] = v;
            }
        }
        for t0 in (0..tiles).map(|t| t * T) {
            let mut acc = [[0.0f32; T]; CB];
            for c in 0..CB {
                acc[c] = [bias[c]; T];
            }
            tile(&mut acc, &xp[t0..], row, &wp, d.kernel);
            let n = T.min(d.out_len - t0);
            for (c, a) in acc.iter().enumerate().take(cb) {
                let base = (c0 + c) * d.out_len + t0;
                y[base..base + n].copy_from_slice(&a[..n]);
            }
        }
    }
}

/// `c += a·b` for row-major-strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(last(m, k, rsa, csa) < a.len());
    assert!(last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Gradient with respect to the input, one sample per task.
pub(crate) fn conv1d_backward_input(g: &[f32], w: &[f32], d: ConvDims) -> Vec<f32> {
    let mut dx = vec![0.0f32; d.batch * d.c_in * d.len];
    let row = d.padded_len();
    dx.par_chunks_mut(d.c_in * d.len)
        .zip(g.par_chunks(d.c_out * d.out_len))
        .for_each(|(dxs, gs)| {
            let mut dxp = vec![0.0f32; d.c_in * row];
            for k in 0..d.kernel {
                // dxp[i, t+k] += Σ_c w[c,i,k]·g[c,t]
                gemm_acc(
                    d.c_in,
                    d.c_out,
                    d.out_len,
                    &w[k..],
                    (d.kernel, d.c_in * d.kernel),
                    gs,
                    (d.out_len, 1),
                    &mut dxp[k..],
                    (row, 1),
                );
            }
            for i in 0..d.c_in {
                dxs[i * d.len..(i + 1) * d.len]
                    .copy_from_slice(&dxp[i * row + d.pad..i * row + d.pad + d.len]);
            }
        });
    dx
}

/// Gradients with respect to weight and bias. The batch is reduced in index
/// order.
pub(crate) fn conv1d_backward_params(
    g: &[f32],
    x: &[f32],
    d: ConvDims,
    want_w: bool,
    want_b: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let dw = want_w.then(|| {
        let mut dw = vec![0.0f32; d.c_out * d.c_in * d.kernel];
        for n in 0..d.batch {
            let (xp, row) = pad_sample(&x[n * d.c_in * d.len..(n + 1) * d.c_in * d.len], d, 0);
            let gn = &g[n * d.c_out * d.out_len..(n + 1) * d.c_out * d.out_len];
            for k in 0..d.kernel {
                // dw[c,i,k] += Σ_t g[c,t]·xp[i,t+k]
                gemm_acc(
                    d.c_out,
                    d.out_len,
                    d.c_in,
                    gn,
                    (d.out_len, 1),
                    &xp[k..],
                    (1, row),
                    &mut dw[k..],
                    (d.c_in * d.kernel, d.kernel),
                );
            }
        }
        dw
    });
    let db = want_b.then(|| {
        let mut db = vec![0.0f32; d.c_out];
        for n in 0..d.batch {
            for (c, v) in db.iter_mut().enumerate() {
                let gc = &g[(n * d.c_out + c) * d.out_len..(n * d.c_out + c + 1) * d.out_len];
                *v += gc.iter().sum::<f32>();
            }
        }
        db
    });
    (dw, db)
}

/// Dot product with 16 independent partial sums so the loop vectorizes.
/// The reduction order is fixed, so results are reproducible.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for j in 0..16 {
            lanes[j] += xa[j] * xb[j];
        }
    }
    let mut tail = 0.0f32;
    for (&p, &q) in ra.iter().zip(rb) {
        tail += p * q;
    }
    lanes.iter().sum::<f32>() + tail
}
