use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Feature, Param};

/// `c = alpha * a @ b + beta * c` on raw strided buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is bounded by the slice lengths checked by callers
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square convolution, stride 1, "same" zero padding. Kernel size 1 or 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: Param,
    pub bias: Param,
}

pub struct ConvCache {
    col: Vec<f32>,
    n: usize,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        let fan_in = cin * kernel * kernel;
        Self {
            cin,
            cout,
            kernel,
            weight: Param::he_normal(cout * fan_in, fan_in, rng),
            bias: Param::zeros(cout),
        }
    }

    fn k_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Feature) -> Vec<f32> {
        if self.kernel == 1 {
            return x.data.clone();
        }
        let (n, h, w) = (x.n, x.h, x.w);
        let m = n * h * w;
        let plane = h * w;
        let mut col = vec![0.0f32; self.k_rows() * m];
        for ci in 0..self.cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * m;
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for b in 0..n {
                        let src_plane = &x.data[(ci * n + b) * plane..(ci * n + b + 1) * plane];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let sy = sy as usize;
                            let dst = row + b * plane + y * w;
                            let s0 = sy * w + x_lo + kx - 1;
                            let len = x_hi - x_lo;
                            col[dst + x_lo..dst + x_lo + len].copy_from_slice(&src_plane[s0..s0 + len]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], n: usize, h: usize, w: usize) -> Feature {
        if self.kernel == 1 {
            return Feature { c: self.cin, n, h, w, data: col.to_vec() };
        }
        let m = n * h * w;
        let plane = h * w;
        let mut out = Feature::zeros(self.cin, n, h, w);
        for ci in 0..self.cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * m;
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for b in 0..n {
                        let dst_plane = (ci * n + b) * plane;
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let sy = sy as usize;
                            let src = row + b * plane + y * w;
                            let d0 = dst_plane + sy * w + x_lo + kx - 1;
                            for i in 0..x_hi - x_lo {
                                out.data[d0 + i] += col[src + x_lo + i];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Feature) -> (Feature, ConvCache) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let col = self.im2col(x);
        let m = x.cols();
        let k = self.k_rows();
        let mut y = Feature::zeros(self.cout, x.n, x.h, x.w);
        for (c, b) in self.bias.value.iter().enumerate() {
            y.data[c * m..(c + 1) * m].fill(*b);
        }
        gemm(self.cout, k, m, &self.weight.value, (k, 1), &col, (m, 1), 1.0, &mut y.data);
        (y, ConvCache { col, n: x.n, h: x.h, w: x.w })
    }

    /// Accumulates weight/bias gradients; returns the input gradient when `need_dx`.
    pub fn backward(&mut self, cache: ConvCache, dy: &Feature, need_dx: bool) -> Option<Feature> {
        self.weight.ensure_buffers();
        self.bias.ensure_buffers();
        let m = dy.cols();
        let k = self.k_rows();
        for c in 0..self.cout {
            self.bias.grad[c] += dy.data[c * m..(c + 1) * m].iter().sum::<f32>();
        }
        // dW (cout x k) += dY (cout x m) . col^T (m x k)
        gemm(self.cout, m, k, &dy.data, (m, 1), &cache.col, (1, m), 1.0, &mut self.weight.grad);
        if !need_dx {
            return None;
        }
        // dcol (k x m) = W^T (k x cout) . dY (cout x m)
        let mut dcol = vec![0.0f32; k * m];
        gemm(k, self.cout, m, &self.weight.value, (1, k), &dy.data, (m, 1), 0.0, &mut dcol);
        Some(self.col2im(&dcol, cache.n, cache.h, cache.w))
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// Dense layer over `[n][in]` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(din: usize, dout: usize, rng: &mut R) -> Self {
        Self { din, dout, weight: Param::he_normal(din * dout, din, rng), bias: Param::zeros(dout) }
    }

    pub fn forward(&self, x: &[Vec<f32>]) -> Vec<Vec<f32>> {
        x.iter()
            .map(|row| {
                (0..self.dout)
                    .map(|o| {
                        let w = &self.weight.value[o * self.din..(o + 1) * self.din];
                        self.bias.value[o] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f32>()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn backward(&mut self, x: &[Vec<f32>], dy: &[Vec<f32>], need_dx: bool) -> Option<Vec<Vec<f32>>> {
        self.weight.ensure_buffers();
        self.bias.ensure_buffers();
        for (row, g) in x.iter().zip(dy) {
            for o in 0..self.dout {
                self.bias.grad[o] += g[o];
                let wg = &mut self.weight.grad[o * self.din..(o + 1) * self.din];
                for (w, xi) in wg.iter_mut().zip(row) {
                    *w += g[o] * xi;
                }
            }
        }
        need_dx.then(|| {
            dy.iter()
                .map(|g| {
                    (0..self.din)
                        .map(|i| (0..self.dout).map(|o| g[o] * self.weight.value[o * self.din + i]).sum())
                        .collect()
                })
                .collect()
        })
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    /// Applies in place and returns the pre-activation for the backward pass.
    pub fn forward(self, x: &mut Feature) -> Vec<f32> {
        let pre = x.data.clone();
        match self {
            Activation::Relu => x.data.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Silu => x.data.iter_mut().for_each(|v| *v /= 1.0 + (-*v).exp()),
        }
        pre
    }

    pub fn backward(self, pre: &[f32], dy: &mut Feature) {
        match self {
            Activation::Relu => {
                for (g, &p) in dy.data.iter_mut().zip(pre) {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Silu => {
                for (g, &p) in dy.data.iter_mut().zip(pre) {
                    let s = 1.0 / (1.0 + (-p).exp());
                    *g *= s * (1.0 + p * (1.0 - s));
                }
            }
        }
    }
}

/// Adds `emb[n][c]` to every pixel of channel `c`, sample `n`.
pub(crate) fn add_channel_bias(x: &mut Feature, emb: &[Vec<f32>]) {
    let plane = x.plane();
    for c in 0..x.c {
        for (i, e) in emb.iter().enumerate() {
            let v = e[c];
            x.data[(c * x.n + i) * plane..(c * x.n + i + 1) * plane].iter_mut().for_each(|p| *p += v);
        }
    }
}

/// Backward of [`add_channel_bias`]: per-sample per-channel sums of `dy`.
pub(crate) fn channel_bias_grad(dy: &Feature) -> Vec<Vec<f32>> {
    let plane = dy.plane();
    let mut out = vec![vec![0.0; dy.c]; dy.n];
    for c in 0..dy.c {
        for (i, row) in out.iter_mut().enumerate() {
            row[c] = dy.data[(c * dy.n + i) * plane..(c * dy.n + i + 1) * plane].iter().sum();
        }
    }
    out
}
