//! Layer kernels with hand-written backward passes.
//!
//! Convolutions are lowered to GEMM through im2col. Backward passes recompute
//! the column buffer from the stored layer input instead of caching it.

use crate::tensor::{gemm, Matrix};

/// Square-kernel 2-D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Weights plus one bias per output channel.
    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn im2col(spec: &Conv2dSpec, input: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = spec.out_size(h, w);
    let k = spec.kernel;
    let mut cols = vec![0.0; spec.patch_len() * ho * wo];
    for c in 0..spec.in_channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *v = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(spec: &Conv2dSpec, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let k = spec.kernel;
    let mut out = vec![0.0; spec.in_channels * h * w];
    for c in 0..spec.in_channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward convolution of one CHW image. Returns the output plane stack and
/// its spatial size.
pub fn conv2d_forward(
    spec: &Conv2dSpec,
    weight: &[f64],
    bias: &[f64],
    input: &[f64],
    h: usize,
    w: usize,
) -> (Vec<f64>, usize, usize) {
    debug_assert_eq!(input.len(), spec.in_channels * h * w);
    let (cols, ho, wo) = im2col(spec, input, h, w);
    let n = ho * wo;
    let mut out = vec![0.0; spec.out_channels * n];
    for (c, chunk) in out.chunks_mut(n).enumerate() {
        chunk.fill(bias[c]);
    }
    gemm(
        spec.out_channels,
        spec.patch_len(),
        n,
        1.0,
        weight,
        false,
        &cols,
        false,
        1.0,
        &mut out,
    );
    (out, ho, wo)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    spec: &Conv2dSpec,
    weight: &[f64],
    input: &[f64],
    h: usize,
    w: usize,
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (cols, ho, wo) = im2col(spec, input, h, w);
    let n = ho * wo;
    for (c, chunk) in grad_out.chunks(n).enumerate() {
        grad_bias[c] += chunk.iter().sum::<f64>();
    }
    gemm(
        spec.out_channels,
        n,
        spec.patch_len(),
        1.0,
        grad_out,
        false,
        &cols,
        true,
        1.0,
        grad_weight,
    );
    if !want_input {
        return None;
    }
    let mut grad_cols = vec![0.0; spec.patch_len() * n];
    gemm(
        spec.patch_len(),
        spec.out_channels,
        n,
        1.0,
        weight,
        true,
        grad_out,
        false,
        0.0,
        &mut grad_cols,
    );
    Some(col2im(spec, &grad_cols, h, w, ho, wo))
}

/// `Y = X W^T + b` with `W` stored `out x in`.
pub fn linear_forward(x: &Matrix, weight: &[f64], bias: &[f64], out_dim: usize) -> Matrix {
    let n = x.rows();
    let mut y = Matrix::zeros(n, out_dim);
    for r in 0..n {
        y.row_mut(r).copy_from_slice(bias);
    }
    gemm(
        n,
        x.cols(),
        out_dim,
        1.0,
        x.data(),
        false,
        weight,
        true,
        1.0,
        y.data_mut(),
    );
    y
}

/// Accumulates `dW += dY^T X`, `db += colsum(dY)` and returns `dX = dY W`.
pub fn linear_backward(
    x: &Matrix,
    weight: &[f64],
    grad_out: &Matrix,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Matrix {
    let (n, in_dim, out_dim) = (x.rows(), x.cols(), grad_out.cols());
    gemm(
        out_dim,
        n,
        in_dim,
        1.0,
        grad_out.data(),
        true,
        x.data(),
        false,
        1.0,
        grad_weight,
    );
    for row in grad_out.iter_rows() {
        for (b, g) in grad_bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = Matrix::zeros(n, in_dim);
    gemm(
        n,
        out_dim,
        in_dim,
        1.0,
        grad_out.data(),
        false,
        weight,
        false,
        0.0,
        dx.data_mut(),
    );
    dx
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Softmax of `logits * scale`, stabilized by subtracting the maximum.
pub fn softmax_scaled(logits: &[f64], scale: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) * scale).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Log-softmax of `logits * scale`.
pub fn log_softmax_scaled(logits: &[f64], scale: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&z| (z - max) * scale).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|s| s - lse).collect()
}

/// Shannon entropy in nats; `0 log 0` is taken as 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}
