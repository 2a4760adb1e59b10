//! Direct kernels for stride-1 convolutions.
//!
//! The input is zero-padded once and flattened. In that flat index space a
//! kernel tap at `(a, b, c)` is a constant offset, so the convolution becomes
//! `out[co, q] = Σ_{ci, tap} w[co, ci, tap] · x[ci, q + off(tap)]` over a
//! contiguous range of `q`, computed in register tiles without an im2col
//! buffer. Positions whose row or column runs past the output extent are
//! computed and then dropped.
//!
//! Accumulation order per output element is `ci`, then tap, with no fused
//! multiply-add, so the result is identical whether the compiler emits
//! scalar, SSE or AVX code for the tiles.

use alloc::vec;
use alloc::vec::Vec;

/// Positions per register tile.
const PT: usize = 12;
/// Output channels per register tile.
const CT: usize = 4;

/// Flat padded layout of one channel for a stride-1 convolution.
#[derive(Clone, Debug)]
pub(super) struct Layout {
    pub padded: [usize; 3],
    pub output: [usize; 3],
    pub pad: [usize; 3],
    /// Flat positions covering every valid output, rounded up to a whole number of tiles.
    pub qcap: usize,
    /// Per-channel stride of the padded input buffer (includes read slack).
    pub chan: usize,
    pub offsets: Vec<usize>,
}

impl Layout {
    pub fn new(input: [usize; 3], kernel: [usize; 3], pad: [usize; 3]) -> Self {
        let padded = [input[0] + 2 * pad[0], input[1] + 2 * pad[1], input[2] + 2 * pad[2]];
        let output = [
            padded[0] + 1 - kernel[0],
            padded[1] + 1 - kernel[1],
            padded[2] + 1 - kernel[2],
        ];
        let [_, hp, wp] = padded;
        // Flat positions up to and including the last valid output.
        let qlen = ((output[0] - 1) * hp + output[1] - 1) * wp + output[2];
        let qcap = qlen.div_ceil(PT) * PT;
        let mut offsets = Vec::with_capacity(kernel.iter().product());
        for a in 0..kernel[0] {
            for b in 0..kernel[1] {
                for c in 0..kernel[2] {
                    offsets.push((a * hp + b) * wp + c);
                }
            }
        }
        let max_off = offsets.last().copied().unwrap_or(0);
        let chan = (qcap + max_off).max(padded.iter().product());
        Self {
            padded,
            output,
            pad,
            qcap,
            chan,
            offsets,
        }
    }

    #[inline]
    fn flat(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.padded[1] + y) * self.padded[2] + x
    }
}

/// Copies `[C, D, H, W]` into the zero-padded flat layout.
pub(super) fn pad_input(x: &[f64], channels: usize, input: [usize; 3], l: &Layout) -> Vec<f64> {
    let [d, h, w] = input;
    let [pd, ph, pw] = l.pad;
    let mut out = vec![0.0; channels * l.chan];
    for c in 0..channels {
        let src = &x[c * d * h * w..(c + 1) * d * h * w];
        let dst = &mut out[c * l.chan..(c + 1) * l.chan];
        for z in 0..d {
            for y in 0..h {
                let o = l.flat(z + pd, y + ph, pw);
                dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..(z * h + y + 1) * w]);
            }
        }
    }
    out
}

/// Places a dense `[C, Do, Ho, Wo]` gradient on the flat output positions,
/// zero at the dropped positions.
pub(super) fn scatter_output(g: &[f64], channels: usize, l: &Layout) -> Vec<f64> {
    let [od, oh, ow] = l.output;
    let mut out = vec![0.0; channels * l.qcap];
    for c in 0..channels {
        let src = &g[c * od * oh * ow..(c + 1) * od * oh * ow];
        let dst = &mut out[c * l.qcap..(c + 1) * l.qcap];
        for z in 0..od {
            for y in 0..oh {
                let o = l.flat(z, y, 0);
                dst[o..o + ow].copy_from_slice(&src[(z * oh + y) * ow..(z * oh + y + 1) * ow]);
            }
        }
    }
    out
}

/// Extracts the valid outputs of `flat` (`[C, qcap]`) into `dst` (`[C, Do, Ho, Wo]`).
pub(super) fn gather_output(flat: &[f64], channels: usize, l: &Layout, dst: &mut [f64]) {
    let [od, oh, ow] = l.output;
    for c in 0..channels {
        let src = &flat[c * l.qcap..(c + 1) * l.qcap];
        let out = &mut dst[c * od * oh * ow..(c + 1) * od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                let o = l.flat(z, y, 0);
                out[(z * oh + y) * ow..(z * oh + y + 1) * ow].copy_from_slice(&src[o..o + ow]);
            }
        }
    }
}

/// Packs `w(co, ci, tap)` into `[co_tile][ci][tap][CT]`, zero-filling the
/// last partial tile.
pub(super) fn pack_weights(cout: usize, cin: usize, taps: usize, w: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
    let tiles = cout.div_ceil(CT);
    let mut out = vec![0.0; tiles * cin * taps * CT];
    for t in 0..tiles {
        for ci in 0..cin {
            for tap in 0..taps {
                for r in 0..CT {
                    let co = t * CT + r;
                    if co < cout {
                        out[((t * cin + ci) * taps + tap) * CT + r] = w(co, ci, tap);
                    }
                }
            }
        }
    }
    out
}

/// `out[co, q] = Σ w[co, ci, tap] · x[ci, q + off]` for `q < qcap`.
/// `out` is `[cout, qcap]`.
pub(super) fn conv_flat(x: &[f64], cin: usize, packed: &[f64], cout: usize, l: &Layout, out: &mut [f64]) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { conv_flat_avx2(x, cin, packed, cout, l, out) };
        return;
    }
    conv_flat_body(x, cin, packed, cout, l, out);
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
unsafe fn conv_flat_avx2(x: &[f64], cin: usize, packed: &[f64], cout: usize, l: &Layout, out: &mut [f64]) {
    conv_flat_body(x, cin, packed, cout, l, out);
}

#[inline(always)]
fn conv_flat_body(x: &[f64], cin: usize, packed: &[f64], cout: usize, l: &Layout, out: &mut [f64]) {
    let taps = l.offsets.len();
    let tiles = cout.div_ceil(CT);
    for t in 0..tiles {
        let wt = &packed[t * cin * taps * CT..(t + 1) * cin * taps * CT];
        for q0 in (0..l.qcap).step_by(PT) {
            let mut acc = [[0.0f64; PT]; CT];
            for ci in 0..cin {
                let xc = &x[ci * l.chan + q0..];
                let wc = &wt[ci * taps * CT..(ci + 1) * taps * CT];
                for (tap, &off) in l.offsets.iter().enumerate() {
                    let xv: &[f64; PT] = xc[off..off + PT].try_into().unwrap();
                    let wv: &[f64; CT] = wc[tap * CT..tap * CT + CT].try_into().unwrap();
                    for r in 0..CT {
                        for j in 0..PT {
                            acc[r][j] += wv[r] * xv[j];
                        }
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let co = t * CT + r;
                if co < cout {
                    out[co * l.qcap + q0..co * l.qcap + q0 + PT].copy_from_slice(row);
                }
            }
        }
    }
}

/// `dw[co, ci, tap] += Σ_q g[co, q] · x[ci, q + off(tap)]`, with `g` as
/// produced by [`scatter_output`] and `x` by [`pad_input`].
pub(super) fn weight_grad_flat(g: &[f64], x: &[f64], cout: usize, cin: usize, l: &Layout, dw: &mut [f64]) {
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { weight_grad_avx2(g, x, cout, cin, l, dw) };
        return;
    }
    weight_grad_body(g, x, cout, cin, l, dw);
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
unsafe fn weight_grad_avx2(g: &[f64], x: &[f64], cout: usize, cin: usize, l: &Layout, dw: &mut [f64]) {
    weight_grad_body(g, x, cout, cin, l, dw);
}

#[inline(always)]
fn weight_grad_body(g: &[f64], x: &[f64], cout: usize, cin: usize, l: &Layout, dw: &mut [f64]) {
    let taps = l.offsets.len();
    let mut co0 = 0;
    while co0 < cout {
        let rows = CT.min(cout - co0);
        for ci in 0..cin {
            let xc = &x[ci * l.chan..];
            for (tap, &off) in l.offsets.iter().enumerate() {
                let mut acc = [[0.0f64; PT]; CT];
                for q0 in (0..l.qcap).step_by(PT) {
                    let xv: &[f64; PT] = xc[off + q0..off + q0 + PT].try_into().unwrap();
                    for (r, a) in acc.iter_mut().enumerate().take(rows) {
                        let gv: &[f64; PT] = g[(co0 + r) * l.qcap + q0..(co0 + r) * l.qcap + q0 + PT]
                            .try_into()
                            .unwrap();
                        for j in 0..PT {
                            a[j] += gv[j] * xv[j];
                        }
                    }
                }
                for (r, a) in acc.iter().enumerate().take(rows) {
                    let mut s = 0.0;
                    for v in a {
                        s += v;
                    }
                    dw[((co0 + r) * cin + ci) * taps + tap] += s;
                }
            }
        }
        co0 += CT;
    }
}
