//! Convolution kernels.
//!
//! `conv3d` lowers each sample to an `[Cin*k³, N]` column matrix and runs a
//! single GEMM against the `[Cout, Cin*k³]` weight matrix. The transposed
//! convolution only supports kernel == stride, where output blocks never
//! overlap and the op reduces to one GEMM plus a scatter.

use alloc::vec;
use alloc::vec::Vec;

use super::direct;
use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Output voxels per sample below which stride-1 convolutions use GEMM.
const DIRECT_MIN_VOXELS: usize = 4096;

/// `floor((extent + 2 * pad - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn plan(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let [b, cin, d, h, w]: [usize; 5] = input_shape
            .try_into()
            .map_err(|_| crate::error::contract!("conv3d input must be 5-D, got {:?}", input_shape))?;
        let [cout, wcin, kd, kh, kw]: [usize; 5] = weight_shape
            .try_into()
            .map_err(|_| crate::error::contract!("conv3d weight must be 5-D, got {:?}", weight_shape))?;
        ensure!(
            cin == wcin,
            "conv3d input has {} channels but weight expects {}",
            cin,
            wcin
        );
        let input = [d, h, w];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_output_extent(input[a], kernel[a], stride[a], padding[a])
                .filter(|&e| e > 0 && kernel[a] > 0)
                .ok_or_else(|| {
                    Error::InvalidGeometry(alloc::format!(
                        "axis {}: extent {} kernel {} stride {} padding {} gives no output",
                        a,
                        input[a],
                        kernel[a],
                        stride[a],
                        padding[a]
                    ))
                })?;
        }
        Ok(Self {
            batch: b,
            in_channels: cin,
            out_channels: cout,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    /// Pointwise convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Stride-1 convolutions whose input gradient is again a padded stride-1
    /// convolution run on the direct kernels, once the grid is large enough
    /// for the padded-row overhead to amortize. Smaller grids go through GEMM.
    fn is_direct(&self) -> bool {
        self.stride == [1, 1, 1]
            && !self.is_pointwise()
            && (0..3).all(|a| self.padding[a] < self.kernel[a])
            && self.out_voxels() >= DIRECT_MIN_VOXELS
    }

    fn layout(&self) -> direct::Layout {
        direct::Layout::new(self.input, self.kernel, self.padding)
    }

    /// Layout of the input-gradient convolution over the output grid.
    fn adjoint_layout(&self) -> direct::Layout {
        let pad = [
            self.kernel[0] - 1 - self.padding[0],
            self.kernel[1] - 1 - self.padding[1],
            self.kernel[2] - 1 - self.padding[2],
        ];
        direct::Layout::new(self.output, self.kernel, pad)
    }
}

/// `C = A·B + beta·C` on strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, rsa, csa) < a.len());
    assert!(last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
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
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output positions `o` along one axis whose source `o*stride + tap - pad`
/// lies inside `[0, extent)`, as a half-open range.
#[inline]
fn valid_range(extent: usize, out: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > tap {
        (extent + pad - tap).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Lowers one sample `[Cin, D, H, W]` into `col[(ci, kd, kh, kw), (od, oh, ow)]`.
fn im2col(x: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let n = g.out_voxels();
    let mut row = 0;
    for ci in 0..g.in_channels {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            let (dlo, dhi) = valid_range(d, od, a, sd, pd);
            for b in 0..kh {
                let (hlo, hhi) = valid_range(h, oh, b, sh, ph);
                for c in 0..kw {
                    let (wlo, whi) = valid_range(w, ow, c, sw, pw);
                    let dst = &mut col[row * n..(row + 1) * n];
                    dst.fill(0.0);
                    for z in dlo..dhi {
                        let iz = z * sd + a - pd;
                        for y in hlo..hhi {
                            let iy = y * sh + b - ph;
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let out = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if sw == 1 {
                                let start = wlo + c - pw;
                                out[wlo..whi].copy_from_slice(&src[start..start + (whi - wlo)]);
                            } else {
                                for (xo, o) in out[wlo..whi].iter_mut().enumerate() {
                                    *o = src[(xo + wlo) * sw + c - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx`.
fn col2im(col: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let n = g.out_voxels();
    let mut row = 0;
    for ci in 0..g.in_channels {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            let (dlo, dhi) = valid_range(d, od, a, sd, pd);
            for b in 0..kh {
                let (hlo, hhi) = valid_range(h, oh, b, sh, ph);
                for c in 0..kw {
                    let (wlo, whi) = valid_range(w, ow, c, sw, pw);
                    let src = &col[row * n..(row + 1) * n];
                    for z in dlo..dhi {
                        let iz = z * sd + a - pd;
                        for y in hlo..hhi {
                            let iy = y * sh + b - ph;
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let s = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for xo in wlo..whi {
                                dst[xo * sw + c - pw] += s[xo];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(super) fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &ConvGeometry) -> Tensor {
    let n = g.out_voxels();
    let sample_out = g.out_channels * n;
    let mut out = vec![0.0; g.batch * sample_out];
    if g.is_direct() {
        direct_forward(x, w, g, &mut out);
    } else {
        gemm_forward(x, w, g, &mut out);
    }
    if let Some(b) = bias {
        for y in out.chunks_mut(sample_out) {
            for (co, chunk) in y.chunks_mut(n).enumerate() {
                let bv = b.data()[co];
                for v in chunk {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&[g.batch, g.out_channels, g.output[0], g.output[1], g.output[2]], out)
        .expect("conv output shape is consistent by construction")
}

fn direct_forward(x: &Tensor, w: &Tensor, g: &ConvGeometry, out: &mut [f64]) {
    let taps = g.taps();
    let (cin, cout) = (g.in_channels, g.out_channels);
    let sample_in = cin * g.in_voxels();
    let layout = g.layout();
    let packed = direct::pack_weights(cout, cin, taps, |co, ci, t| w.data()[(co * cin + ci) * taps + t]);
    exec::for_each_chunk(out, cout * g.out_voxels(), |s, y| {
        let xpad = direct::pad_input(&x.data()[s * sample_in..(s + 1) * sample_in], cin, g.input, &layout);
        let mut flat = vec![0.0; cout * layout.qcap];
        direct::conv_flat(&xpad, cin, &packed, cout, &layout, &mut flat);
        direct::gather_output(&flat, cout, &layout, y);
    });
}

fn gemm_forward(x: &Tensor, w: &Tensor, g: &ConvGeometry, out: &mut [f64]) {
    let n = g.out_voxels();
    let kdim = g.in_channels * g.taps();
    let sample_in = g.in_channels * g.in_voxels();
    let sample_out = g.out_channels * n;
    exec::for_each_chunk(out, sample_out, |s, y| {
        let xs = &x.data()[s * sample_in..(s + 1) * sample_in];
        let owned;
        let col: &[f64] = if g.is_pointwise() {
            xs
        } else {
            let mut c = vec![0.0; kdim * n];
            im2col(xs, g, &mut c);
            owned = c;
            &owned
        };
        gemm(
            g.out_channels,
            kdim,
            n,
            w.data(),
            (kdim, 1),
            col,
            (n, 1),
            0.0,
            y,
            (n, 1),
        );
    });
}

pub(super) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Vec<f64>,
}

pub(super) fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    g: &ConvGeometry,
    need_input: bool,
    need_weight: bool,
) -> ConvGrads {
    let n = g.out_voxels();
    let sample_out = g.out_channels * n;

    let mut bias = vec![0.0; g.out_channels];
    for s in 0..g.batch {
        for (co, chunk) in gout[s * sample_out..(s + 1) * sample_out].chunks(n).enumerate() {
            bias[co] += chunk.iter().sum::<f64>();
        }
    }
    let direct = g.is_direct();

    // Per-sample weight gradients, summed in sample order afterwards.
    let weight = need_weight.then(|| {
        let partial = exec::map_indices(g.batch, |s| {
            if direct {
                direct_weight_grad(x, gout, g, s)
            } else {
                gemm_weight_grad(x, gout, g, s)
            }
        });
        let mut dw = vec![0.0; w.len()];
        for p in partial {
            for (a, b) in dw.iter_mut().zip(p) {
                *a += b;
            }
        }
        dw
    });

    let input = need_input.then(|| {
        let sample_in = g.in_channels * g.in_voxels();
        let mut dx = vec![0.0; g.batch * sample_in];
        if direct {
            direct_input_grad(w, gout, g, &mut dx);
        } else {
            gemm_input_grad(w, gout, g, &mut dx);
        }
        dx
    });

    ConvGrads { input, weight, bias }
}

fn direct_weight_grad(x: &Tensor, gout: &[f64], g: &ConvGeometry, s: usize) -> Vec<f64> {
    let (cin, cout) = (g.in_channels, g.out_channels);
    let sample_in = cin * g.in_voxels();
    let sample_out = cout * g.out_voxels();
    let layout = g.layout();
    let xpad = direct::pad_input(&x.data()[s * sample_in..(s + 1) * sample_in], cin, g.input, &layout);
    let gflat = direct::scatter_output(&gout[s * sample_out..(s + 1) * sample_out], cout, &layout);
    let mut dw = vec![0.0; cout * cin * g.taps()];
    direct::weight_grad_flat(&gflat, &xpad, cout, cin, &layout, &mut dw);
    dw
}

fn direct_input_grad(w: &Tensor, gout: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (cin, cout) = (g.in_channels, g.out_channels);
    let taps = g.taps();
    let sample_out = cout * g.out_voxels();
    let layout = g.adjoint_layout();
    debug_assert_eq!(layout.output, g.input);
    // Correlation with the channel-swapped, spatially flipped kernel.
    let packed = direct::pack_weights(cin, cout, taps, |ci, co, t| {
        w.data()[(co * cin + ci) * taps + (taps - 1 - t)]
    });
    exec::for_each_chunk(dx, cin * g.in_voxels(), |s, dxs| {
        let gpad = direct::pad_input(&gout[s * sample_out..(s + 1) * sample_out], cout, g.output, &layout);
        let mut flat = vec![0.0; cin * layout.qcap];
        direct::conv_flat(&gpad, cout, &packed, cin, &layout, &mut flat);
        direct::gather_output(&flat, cin, &layout, dxs);
    });
}

fn gemm_weight_grad(x: &Tensor, gout: &[f64], g: &ConvGeometry, s: usize) -> Vec<f64> {
    let n = g.out_voxels();
    let kdim = g.in_channels * g.taps();
    let sample_in = g.in_channels * g.in_voxels();
    let sample_out = g.out_channels * n;
    let xs = &x.data()[s * sample_in..(s + 1) * sample_in];
    let gs = &gout[s * sample_out..(s + 1) * sample_out];
    let mut dw = vec![0.0; g.out_channels * kdim];
    let owned;
    let col: &[f64] = if g.is_pointwise() {
        xs
    } else {
        let mut c = vec![0.0; kdim * n];
        im2col(xs, g, &mut c);
        owned = c;
        &owned
    };
    // dW[co, j] = sum_n gout[co, n] * col[j, n]
    gemm(
        g.out_channels,
        n,
        kdim,
        gs,
        (n, 1),
        col,
        (1, n),
        0.0,
        &mut dw,
        (kdim, 1),
    );
    dw
}

fn gemm_input_grad(w: &Tensor, gout: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let n = g.out_voxels();
    let kdim = g.in_channels * g.taps();
    let sample_in = g.in_channels * g.in_voxels();
    let sample_out = g.out_channels * n;
    exec::for_each_chunk(dx, sample_in, |s, dxs| {
        let gs = &gout[s * sample_out..(s + 1) * sample_out];
        // dcol[j, n] = sum_co W[co, j] * gout[co, n]
        if g.is_pointwise() {
            gemm(
                kdim,
                g.out_channels,
                n,
                w.data(),
                (1, kdim),
                gs,
                (n, 1),
                0.0,
                dxs,
                (n, 1),
            );
        } else {
            let mut col = vec![0.0; kdim * n];
            gemm(
                kdim,
                g.out_channels,
                n,
                w.data(),
                (1, kdim),
                gs,
                (n, 1),
                0.0,
                &mut col,
                (n, 1),
            );
            col2im(&col, g, dxs);
        }
    });
}

struct TransposeGeometry {
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    input: [usize; 3],
    stride: [usize; 3],
}

impl TransposeGeometry {
    fn plan(x: &Tensor, w: &Tensor, stride: [usize; 3]) -> Result<Self> {
        let [b, cin, d, h, wd] = x.dims5()?;
        let [wcin, cout, kd, kh, kw] = w.dims5()?;
        ensure!(
            cin == wcin,
            "conv3d_transpose input has {} channels but weight expects {}",
            cin,
            wcin
        );
        if [kd, kh, kw] != stride || stride.iter().any(|&s| s == 0 || s > 2) {
            return Err(Error::UnsupportedGeometry(alloc::format!(
                "transposed convolution needs kernel == stride with stride in {{1,2}}, got kernel {:?} stride {:?}",
                [kd, kh, kw],
                stride
            )));
        }
        Ok(Self {
            batch: b,
            in_channels: cin,
            out_channels: cout,
            input: [d, h, wd],
            stride,
        })
    }

    fn taps(&self) -> usize {
        self.stride.iter().product()
    }

    fn n(&self) -> usize {
        self.input.iter().product()
    }

    fn output(&self) -> [usize; 3] {
        [
            self.input[0] * self.stride[0],
            self.input[1] * self.stride[1],
            self.input[2] * self.stride[2],
        ]
    }

    /// Visits `(row of the (co, tap) matrix, column n, flat output offset)`.
    fn for_each_site(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.input;
        let [sd, sh, sw] = self.stride;
        let [_, oh, ow] = self.output();
        let taps = self.taps();
        let out_vox = d * h * w * taps;
        for co in 0..self.out_channels {
            for a in 0..sd {
                for b in 0..sh {
                    for c in 0..sw {
                        let row = co * taps + (a * sh + b) * sw + c;
                        for z in 0..d {
                            for y in 0..h {
                                let base = co * out_vox + ((z * sd + a) * oh + y * sh + b) * ow + c;
                                let nb = (z * h + y) * w;
                                for x in 0..w {
                                    f(row, nb + x, base + x * sw);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv_transpose_forward(x: &Tensor, w: &Tensor, stride: [usize; 3]) -> Result<Tensor> {
    let g = TransposeGeometry::plan(x, w, stride)?;
    let n = g.n();
    let rows = g.out_channels * g.taps();
    let sample_in = g.in_channels * n;
    let sample_out = rows * n;
    let mut out = vec![0.0; g.batch * sample_out];
    exec::for_each_chunk(&mut out, sample_out, |s, ys| {
        let xs = &x.data()[s * sample_in..(s + 1) * sample_in];
        let mut prod = vec![0.0; rows * n];
        // prod[(co, tap), n] = sum_ci W[ci, (co, tap)] * x[ci, n]
        gemm(
            rows,
            g.in_channels,
            n,
            w.data(),
            (1, rows),
            xs,
            (n, 1),
            0.0,
            &mut prod,
            (n, 1),
        );
        g.for_each_site(|row, col, off| ys[off] = prod[row * n + col]);
    });
    let [od, oh, ow] = g.output();
    Tensor::new(&[g.batch, g.out_channels, od, oh, ow], out)
}

pub(super) fn conv_transpose_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    stride: [usize; 3],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let g = TransposeGeometry::plan(x, w, stride).expect("validated in forward");
    let n = g.n();
    let rows = g.out_channels * g.taps();
    let sample_in = g.in_channels * n;
    let sample_out = rows * n;
    let gathered: Vec<Vec<f64>> = (0..g.batch)
        .map(|s| {
            let gs = &gout[s * sample_out..(s + 1) * sample_out];
            let mut m = vec![0.0; rows * n];
            g.for_each_site(|row, col, off| m[row * n + col] = gs[off]);
            m
        })
        .collect();

    let dx = need_input.then(|| {
        let mut dx = vec![0.0; g.batch * sample_in];
        exec::for_each_chunk(&mut dx, sample_in, |s, dxs| {
            gemm(
                g.in_channels,
                rows,
                n,
                w.data(),
                (rows, 1),
                &gathered[s],
                (n, 1),
                0.0,
                dxs,
                (n, 1),
            );
        });
        dx
    });
    let dw = need_weight.then(|| {
        let mut dw = vec![0.0; g.in_channels * rows];
        for (s, m) in gathered.iter().enumerate() {
            let xs = &x.data()[s * sample_in..(s + 1) * sample_in];
            gemm(g.in_channels, n, rows, xs, (n, 1), m, (1, n), 1.0, &mut dw, (rows, 1));
        }
        dw
    });
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(80, 3, 2, 1), Some(40));
        assert_eq!(conv_output_extent(8, 3, 1, 1), Some(8));
        assert_eq!(conv_output_extent(2, 3, 1, 0), None);
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for extent in 1..7 {
            for tap in 0..3 {
                for stride in 1..3 {
                    for pad in 0..2 {
                        let Some(out) = conv_output_extent(extent, 3, stride, pad) else {
                            continue;
                        };
                        let brute: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let s = (o * stride + tap) as isize - pad as isize;
                                s >= 0 && (s as usize) < extent
                            })
                            .collect();
                        let (lo, hi) = valid_range(extent, out, tap, stride, pad);
                        assert_eq!(brute, (lo..hi).collect::<Vec<_>>());
                    }
                }
            }
        }
    }
}
