//! im2col convolution kernels, `(N, C, H, W)` layout.

use super::gemm::{gemm, Mat, Precision};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {input:?} and kernel {kernel:?} must both be rank 4")));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kcin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin {
            return Err(Error::shape("conv2d", format!("kernel expects {kcin} input channels, input has {cin}")));
        }
        if bias != [cout] {
            return Err(Error::shape("conv2d", format!("bias shape {bias:?}, expected [{cout}]")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad)));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }
}

/// Output columns `ox` whose input column `ox·stride + b − pad` lies inside
/// `[0, w)`.
fn valid_range(g: &ConvGeom, b: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let lo = if b >= p { 0 } else { (p - b).div_ceil(s) };
    let hi = if g.w + p > b { ((g.w + p - b - 1) / s + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Writes sample `x` into the columns `[offset, offset + ho·wo)` of every row
/// of `col`, whose row length is `ld`.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64], ld: usize, offset: usize) {
    let cols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (ci * g.kh + a) * g.kw + b;
                let dst = &mut col[row * ld + offset..row * ld + offset + cols];
                let (lo, hi) = valid_range(g, b);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + a) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let first = lo * g.stride + b - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, ox) in out[lo..hi].iter_mut().zip(0..) {
                            *o = src[first + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into sample `dx`.
fn col2im(g: &ConvGeom, col: &[f64], ld: usize, offset: usize, dx: &mut [f64]) {
    let cols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (ci * g.kh + a) * g.kw + b;
                let src = &col[row * ld + offset..row * ld + offset + cols];
                let (lo, hi) = valid_range(g, b);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + b - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + a) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s_row = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + hi - lo].iter_mut().zip(s_row) {
                            *d += v;
                        }
                    } else {
                        for (ox, v) in s_row.iter().enumerate() {
                            dst[first + ox * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the `[Cin·kh·kw, N·Ho·Wo]` column matrix kept for
/// backward.
pub(crate) fn conv2d_forward(prec: Precision, g: &ConvGeom, x: &Tensor, k: &Tensor, bias: &Tensor) -> (Tensor, Vec<f64>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let ld = g.n * cols;
    let in_stride = g.cin * g.h * g.w;
    let mut col = vec![0.0; rows * ld];
    for n in 0..g.n {
        im2col(g, &x.data()[n * in_stride..(n + 1) * in_stride], &mut col, ld, n * cols);
    }
    // tmp = K · col, laid out [Cout, N·Ho·Wo].
    let mut tmp = vec![0.0; g.cout * ld];
    gemm(prec, g.cout, rows, ld, Mat::n(k.data()), Mat::n(&col), &mut tmp, false);
    let mut out = vec![0.0; g.n * g.cout * cols];
    for n in 0..g.n {
        for co in 0..g.cout {
            let bv = bias.data()[co];
            let src = &tmp[co * ld + n * cols..co * ld + (n + 1) * cols];
            let dst = &mut out[(n * g.cout + co) * cols..(n * g.cout + co + 1) * cols];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v + bv;
            }
        }
    }
    (Tensor::from_parts(g.out_shape(), out), col)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(prec: Precision, g: &ConvGeom, k: &Tensor, col: &[f64], gout: &Tensor, need: [bool; 3]) -> ConvGrads {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let ld = g.n * cols;
    let in_stride = g.cin * g.h * g.w;
    // gout rearranged to [Cout, N·Ho·Wo].
    let mut gt = vec![0.0; g.cout * ld];
    for n in 0..g.n {
        for co in 0..g.cout {
            gt[co * ld + n * cols..co * ld + (n + 1) * cols]
                .copy_from_slice(&gout.data()[(n * g.cout + co) * cols..(n * g.cout + co + 1) * cols]);
        }
    }
    let kernel = need[1].then(|| {
        let mut dk = vec![0.0; k.len()];
        gemm(prec, g.cout, ld, rows, Mat::n(&gt), Mat::t(col), &mut dk, false);
        Tensor::from_parts(k.shape().to_vec(), dk)
    });
    let bias = need[2].then(|| Tensor::from_parts(vec![g.cout], gt.chunks(ld).map(|r| r.iter().sum()).collect()));
    let input = need[0].then(|| {
        let mut dcol = vec![0.0; rows * ld];
        gemm(prec, rows, g.cout, ld, Mat::t(k.data()), Mat::n(&gt), &mut dcol, false);
        let mut dx = vec![0.0; g.n * in_stride];
        for n in 0..g.n {
            col2im(g, &dcol, ld, n * cols, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
        Tensor::from_parts(vec![g.n, g.cin, g.h, g.w], dx)
    });
    ConvGrads { input, kernel, bias }
}

/// Geometry of a 2×2, stride-2 transposed convolution with kernel
/// `[Cin, Cout, 2, 2]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UpGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
}

impl UpGeom {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize]) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape("up_conv2x", format!("input {input:?}, kernel {kernel:?} must be rank 4")));
        }
        if kernel[0] != input[1] || kernel[2] != 2 || kernel[3] != 2 {
            return Err(Error::shape("up_conv2x", format!("kernel {kernel:?} incompatible with input {input:?}")));
        }
        if bias != [kernel[1]] {
            return Err(Error::shape("up_conv2x", format!("bias {bias:?}, expected [{}]", kernel[1])));
        }
        Ok(Self { n: input[0], cin: input[1], h: input[2], w: input[3], cout: kernel[1] })
    }
}

pub(crate) fn up_conv2x_forward(prec: Precision, g: &UpGeom, x: &Tensor, k: &Tensor, bias: &Tensor) -> Tensor {
    let hw = g.h * g.w;
    let (ho, wo) = (2 * g.h, 2 * g.w);
    let mut out = vec![0.0; g.n * g.cout * ho * wo];
    let mut y = vec![0.0; g.cout * 4 * hw];
    for n in 0..g.n {
        let x_n = &x.data()[n * g.cin * hw..(n + 1) * g.cin * hw];
        // y[(co,a,b), (i,j)] = Σ_ci K[ci,(co,a,b)] · x[ci,(i,j)]
        gemm(prec, g.cout * 4, g.cin, hw, Mat::t(k.data()), Mat::n(x_n), &mut y, false);
        let out_n = &mut out[n * g.cout * ho * wo..(n + 1) * g.cout * ho * wo];
        for co in 0..g.cout {
            let bv = bias.data()[co];
            for a in 0..2 {
                for b in 0..2 {
                    let src = &y[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for i in 0..g.h {
                        for j in 0..g.w {
                            out_n[(co * ho + 2 * i + a) * wo + 2 * j + b] = src[i * g.w + j] + bv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.n, g.cout, ho, wo], out)
}

pub(crate) fn up_conv2x_backward(prec: Precision, g: &UpGeom, x: &Tensor, k: &Tensor, gout: &Tensor, need: [bool; 3]) -> ConvGrads {
    let hw = g.h * g.w;
    let (ho, wo) = (2 * g.h, 2 * g.w);
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dk = need[1].then(|| vec![0.0; k.len()]);
    let mut db = need[2].then(|| vec![0.0; g.cout]);
    let mut dy = vec![0.0; g.cout * 4 * hw];
    for n in 0..g.n {
        let gout_n = &gout.data()[n * g.cout * ho * wo..(n + 1) * g.cout * ho * wo];
        for co in 0..g.cout {
            for a in 0..2 {
                for b in 0..2 {
                    let dst = &mut dy[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for i in 0..g.h {
                        for j in 0..g.w {
                            dst[i * g.w + j] = gout_n[(co * ho + 2 * i + a) * wo + 2 * j + b];
                        }
                    }
                }
            }
        }
        let x_n = &x.data()[n * g.cin * hw..(n + 1) * g.cin * hw];
        if let Some(dk) = dk.as_mut() {
            gemm(prec, g.cin, hw, g.cout * 4, Mat::n(x_n), Mat::t(&dy), dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(prec, g.cin, g.cout * 4, hw, Mat::n(k.data()), Mat::n(&dy), &mut dx[n * g.cin * hw..(n + 1) * g.cin * hw], false);
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gout_n.chunks(ho * wo).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        kernel: dk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::from_parts(vec![g.cout], d)),
    }
}
