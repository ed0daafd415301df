//! Layer primitives with explicit forward caches and backward passes.
//!
//! Gradients are accumulated into a flat buffer laid out like the model's
//! [`ParamStore`].

use super::ops::{col2im, gemm, im2col, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

pub(crate) const BN_EPS: f64 = 1e-5;

/// Batch statistics gathered during a train-mode forward, applied to the
/// running buffers once the pass is complete.
#[derive(Debug, Clone)]
pub(crate) struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) struct Pass<'a> {
    pub params: &'a ParamStore,
    pub buffers: &'a ParamStore,
    pub train: bool,
    pub stats: Vec<StatUpdate>,
}

fn grad_slice<'g>(params: &ParamStore, grads: &'g mut [f64], id: ParamId) -> &'g mut [f64] {
    let r = params.range(id);
    &mut grads[r]
}

/// 2-D convolution, or its transpose, with bias.
///
/// Weights are `[cout, cin·k·k]` for the direct form and `[cin, cout·k·k]`
/// for the transposed form.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

pub(crate) struct ConvCache {
    /// im2col columns for the direct form, the input itself for the transpose.
    saved: Vec<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        (cin, cout, kernel, stride, pad): (usize, usize, usize, usize, usize),
        transposed: bool,
        init: &mut impl FnMut(usize) -> f64,
    ) -> Self {
        let kk = kernel * kernel;
        // fan-in of each output unit
        let fan_in = if transposed {
            cin * kk / (stride * stride)
        } else {
            cin * kk
        };
        let shape = if transposed {
            [cin, cout * kk]
        } else {
            [cout, cin * kk]
        };
        let weight = params.add(format!("{name}.weight"), &shape, || init(fan_in));
        let bias = params.add(format!("{name}.bias"), &[cout], || 0.0);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
            transposed,
        }
    }

    fn in_geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            channels: self.cin,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn out_geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            channels: self.cout,
            height: (h - 1) * self.stride + self.kernel - 2 * self.pad,
            width: (w - 1) * self.stride + self.kernel - 2 * self.pad,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&self, pass: &Pass, x: &Tensor) -> (Tensor, ConvCache) {
        debug_assert_eq!(x.c, self.cin);
        let w = pass.params.get(self.weight);
        let bias = pass.params.get(self.bias);
        let kk = self.kernel * self.kernel;
        let (out, saved) = if self.transposed {
            let og = self.out_geom(x.h, x.w);
            let hw = x.plane_len();
            let mut out = Tensor::zeros(x.n, self.cout, og.height, og.width);
            let mut cols = vec![0.0; self.cout * kk * hw];
            for b in 0..x.n {
                gemm(self.cout * kk, self.cin, hw, 1.0, w, true, x.item(b), false, 0.0, &mut cols);
                col2im(&cols, &og, out.item_mut(b));
            }
            (out, x.data.clone())
        } else {
            let g = self.in_geom(x.h, x.w);
            let (ho, wo) = (g.out_height(), g.out_width());
            let (rows, hw) = (g.col_rows(), ho * wo);
            let mut out = Tensor::zeros(x.n, self.cout, ho, wo);
            let mut saved = vec![0.0; x.n * rows * hw];
            for b in 0..x.n {
                let cols = &mut saved[b * rows * hw..(b + 1) * rows * hw];
                im2col(x.item(b), &g, cols);
                gemm(self.cout, rows, hw, 1.0, w, false, cols, false, 0.0, out.item_mut(b));
            }
            (out, saved)
        };
        let mut out = out;
        let p = out.plane_len();
        for b in 0..out.n {
            for (c, plane) in out.item_mut(b).chunks_exact_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
        (
            out,
            ConvCache {
                saved,
                in_h: x.h,
                in_w: x.w,
            },
        )
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(
        &self,
        params: &ParamStore,
        grads: &mut [f64],
        cache: &ConvCache,
        dy: &Tensor,
        need_dx: bool,
    ) -> Option<Tensor> {
        let w = params.get(self.weight);
        let kk = self.kernel * self.kernel;
        let p = dy.plane_len();
        {
            let db = grad_slice(params, grads, self.bias);
            for b in 0..dy.n {
                for (c, plane) in dy.item(b).chunks_exact(p).enumerate() {
                    db[c] += plane.iter().sum::<f64>();
                }
            }
        }
        let mut dx = need_dx.then(|| Tensor::zeros(dy.n, self.cin, cache.in_h, cache.in_w));
        if self.transposed {
            let og = self.out_geom(cache.in_h, cache.in_w);
            let hw = cache.in_h * cache.in_w;
            let rows = self.cout * kk;
            let mut dcols = vec![0.0; rows * hw];
            for b in 0..dy.n {
                im2col(dy.item(b), &og, &mut dcols);
                let x_b = &cache.saved[b * self.cin * hw..(b + 1) * self.cin * hw];
                let dw = grad_slice(params, grads, self.weight);
                gemm(self.cin, hw, rows, 1.0, x_b, false, &dcols, true, 1.0, dw);
                if let Some(dx) = dx.as_mut() {
                    gemm(self.cin, rows, hw, 1.0, w, false, &dcols, false, 0.0, dx.item_mut(b));
                }
            }
        } else {
            let g = self.in_geom(cache.in_h, cache.in_w);
            let (rows, hw) = (g.col_rows(), g.col_cols());
            let mut dcols = vec![0.0; rows * hw];
            for b in 0..dy.n {
                let cols = &cache.saved[b * rows * hw..(b + 1) * rows * hw];
                let dw = grad_slice(params, grads, self.weight);
                gemm(self.cout, hw, rows, 1.0, dy.item(b), false, cols, true, 1.0, dw);
                if let Some(dx) = dx.as_mut() {
                    gemm(rows, self.cout, hw, 1.0, w, true, dy.item(b), false, 0.0, &mut dcols);
                    col2im(&dcols, &g, dx.item_mut(b));
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

pub(crate) struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(params: &mut ParamStore, buffers: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), &[channels], || 1.0),
            beta: params.add(format!("{name}.beta"), &[channels], || 0.0),
            running_mean: buffers.add(format!("{name}.running_mean"), &[channels], || 0.0),
            running_var: buffers.add(format!("{name}.running_var"), &[channels], || 1.0),
            channels,
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: &Tensor) -> (Tensor, BnCache) {
        let c_n = self.channels;
        let p = x.plane_len();
        let m = (x.n * p) as f64;
        let (mean, var) = if pass.train {
            let mut mean = vec![0.0; c_n];
            let mut var = vec![0.0; c_n];
            for b in 0..x.n {
                for (c, plane) in x.item(b).chunks_exact(p).enumerate() {
                    mean[c] += plane.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for b in 0..x.n {
                for (c, plane) in x.item(b).chunks_exact(p).enumerate() {
                    var[c] += plane.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            let unbiased = var
                .iter()
                .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                .collect();
            pass.stats.push(StatUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                mean: mean.clone(),
                var: unbiased,
            });
            (mean, var)
        } else {
            (
                pass.buffers.get(self.running_mean).to_vec(),
                pass.buffers.get(self.running_var).to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = pass.params.get(self.gamma);
        let beta = pass.params.get(self.beta);
        let mut xhat = Tensor::zeros_like(x);
        let mut y = Tensor::zeros_like(x);
        for b in 0..x.n {
            let src = x.item(b);
            let xh = xhat.item_mut(b);
            for c in 0..c_n {
                for i in c * p..(c + 1) * p {
                    xh[i] = (src[i] - mean[c]) * inv_std[c];
                }
            }
            let yb = y.item_mut(b);
            for c in 0..c_n {
                for i in c * p..(c + 1) * p {
                    yb[i] = gamma[c] * xh[i] + beta[c];
                }
            }
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Backward through the train-mode (batch statistics) transform.
    pub fn backward(&self, params: &ParamStore, grads: &mut [f64], cache: &BnCache, dy: &Tensor) -> Tensor {
        let c_n = self.channels;
        let p = dy.plane_len();
        let m = (dy.n * p) as f64;
        let mut dgamma = vec![0.0; c_n];
        let mut dbeta = vec![0.0; c_n];
        for b in 0..dy.n {
            let (g, xh) = (dy.item(b), cache.xhat.item(b));
            for c in 0..c_n {
                for i in c * p..(c + 1) * p {
                    dgamma[c] += g[i] * xh[i];
                    dbeta[c] += g[i];
                }
            }
        }
        let gamma = params.get(self.gamma);
        let mut dx = Tensor::zeros_like(dy);
        for b in 0..dy.n {
            let (g, xh) = (dy.item(b), cache.xhat.item(b));
            let out = dx.item_mut(b);
            for c in 0..c_n {
                let k = gamma[c] * cache.inv_std[c] / m;
                for i in c * p..(c + 1) * p {
                    out[i] = k * (m * g[i] - dbeta[c] - xh[i] * dgamma[c]);
                }
            }
        }
        for (acc, v) in grad_slice(params, grads, self.gamma).iter_mut().zip(&dgamma) {
            *acc += v;
        }
        for (acc, v) in grad_slice(params, grads, self.beta).iter_mut().zip(&dbeta) {
            *acc += v;
        }
        dx
    }
}

pub(crate) fn relu(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` by the positive part of the ReLU output `y`.
pub(crate) fn relu_backward(mut dy: Tensor, y: &Tensor) -> Tensor {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dy
}

/// Fully connected layer on `[n, in]` row vectors; weight is `[out, in]`.
#[derive(Debug, Clone)]
pub(crate) struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Affine {
    pub fn forward(&self, params: &ParamStore, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * self.outputs];
        let bias = params.get(self.bias);
        for row in y.chunks_exact_mut(self.outputs) {
            row.copy_from_slice(bias);
        }
        gemm(n, self.inputs, self.outputs, 1.0, x, false, params.get(self.weight), true, 1.0, &mut y);
        y
    }

    pub fn backward(&self, params: &ParamStore, grads: &mut [f64], x: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
        {
            let db = grad_slice(params, grads, self.bias);
            for row in dy.chunks_exact(self.outputs) {
                for (a, g) in db.iter_mut().zip(row) {
                    *a += g;
                }
            }
        }
        let dw = grad_slice(params, grads, self.weight);
        gemm(self.outputs, n, self.inputs, 1.0, dy, true, x, false, 1.0, dw);
        let mut dx = vec![0.0; n * self.inputs];
        gemm(n, self.outputs, self.inputs, 1.0, dy, false, params.get(self.weight), false, 0.0, &mut dx);
        dx
    }
}
