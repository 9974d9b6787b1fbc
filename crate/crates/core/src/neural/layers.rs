//! Layer primitives with explicit reverse-mode passes. The differentiation
//! surface is deliberately restricted to what the collision predictor needs:
//! dense, strided conv (im2col + matmul), average pooling, tanh, ReLU,
//! sigmoid/exp and softplus.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[inline]
pub fn sigmoid_f32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn softplus_f32(x: f32) -> f32 {
    // Overflow-safe: softplus(x) = max(x, 0) + ln(1 + e^{-|x|}).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Fully connected layer; activations are applied by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// [out, in]
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl Dense {
    pub fn glorot(n_out: usize, n_in: usize, rng: &mut ChaCha8Rng) -> Dense {
        let std = (2.0 / (n_in + n_out) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).unwrap();
        Dense {
            w: Array2::from_shape_fn((n_out, n_in), |_| normal.sample(rng)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    /// x: [in, batch] → [out, batch].
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = self.w.dot(x);
        y += &self.b.view().insert_axis(Axis(1));
        y
    }

    /// Returns dx and accumulates parameter gradients.
    pub fn backward(&self, x: &Array2<f32>, dy: &Array2<f32>, g: &mut DenseGrads) -> Array2<f32> {
        g.w += &dy.dot(&x.t());
        g.b += &dy.sum_axis(Axis(1));
        self.w.t().dot(dy)
    }

    pub fn zero_grads(&self) -> DenseGrads {
        DenseGrads { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.raw_dim()) }
    }
}

/// In-place tanh; returns the activation for use in the backward pass.
pub fn tanh_forward(x: &mut Array2<f32>) {
    x.mapv_inplace(f32::tanh);
}

/// dL/d(pre-activation) from dL/d(activation) and the cached activation.
pub fn tanh_backward(act: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(act, |d, &a| *d *= 1.0 - a * a);
    dx
}

/// Strided 2D convolution over [c, h, w] feature volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// [c_out, c_in·k·k]
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

/// Unfold conv windows into a [c_in·k·k, oh·ow] matrix (zero padding).
pub fn im2col(
    x: &ArrayView3<f32>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f32>, usize, usize) {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter-add adjoint of [`im2col`].
pub fn col2im(
    dcols: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx
}

impl Conv2d {
    pub fn kaiming(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let fan_in = (c_in * k * k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).unwrap();
        Conv2d {
            w: Array2::from_shape_fn((c_out, c_in * k * k), |_| normal.sample(rng)),
            b: Array1::zeros(c_out),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Returns the output volume and the unfolded input (cached for backward).
    pub fn forward(&self, x: &ArrayView3<f32>) -> (Array3<f32>, Array2<f32>) {
        let (cols, oh, ow) = im2col(x, self.k, self.stride, self.pad);
        let mut y = self.w.dot(&cols);
        y += &self.b.view().insert_axis(Axis(1));
        (y.into_shape_with_order((self.c_out, oh, ow)).unwrap(), cols)
    }

    /// dy: [c_out, oh, ow]; returns dx of shape [c_in, h, w].
    pub fn backward(
        &self,
        cols: &Array2<f32>,
        dy: &Array3<f32>,
        in_h: usize,
        in_w: usize,
        g: &mut ConvGrads,
    ) -> Array3<f32> {
        let (c_out, oh, ow) = dy.dim();
        let dy_mat = dy
            .view()
            .into_shape_with_order((c_out, oh * ow))
            .unwrap();
        g.w += &dy_mat.dot(&cols.t());
        g.b += &dy_mat.sum_axis(Axis(1));
        let dcols = self.w.t().dot(&dy_mat);
        col2im(&dcols, self.c_in, in_h, in_w, self.k, self.stride, self.pad)
    }

    pub fn zero_grads(&self) -> ConvGrads {
        ConvGrads { w: Array2::zeros(self.w.raw_dim()), b: Array1::zeros(self.b.raw_dim()) }
    }
}

/// ReLU on a feature volume; returns the mask needed by the backward pass.
pub fn relu_forward(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn relu_backward(act: &Array3<f32>, dy: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(act, |d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Average pooling with square window `k` and stride `s` (floor mode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvgPool {
    pub k: usize,
    pub s: usize,
}

impl AvgPool {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.k) / self.s + 1, (w - self.k) / self.s + 1)
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let norm = 1.0 / (self.k * self.k) as f32;
        let mut y = Array3::zeros((c, oh, ow));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            acc += x[[ci, oy * self.s + ky, ox * self.s + kx]];
                        }
                    }
                    y[[ci, oy, ox]] = acc * norm;
                }
            }
        }
        y
    }

    pub fn backward(&self, in_dims: (usize, usize, usize), dy: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = in_dims;
        let (_, oh, ow) = dy.dim();
        let norm = 1.0 / (self.k * self.k) as f32;
        let mut dx = Array3::zeros((c, h, w));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[[ci, oy, ox]] * norm;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            dx[[ci, oy * self.s + ky, ox * self.s + kx]] += g;
                        }
                    }
                }
            }
        }
        dx
    }
}
