//! Minimal CPU convolutional network toolkit with hand-written backward passes.
//!
//! Activations use a channel-major batch layout `(C, N, H, W)` so that a
//! convolution is a single GEMM over an im2col matrix whose columns run over
//! `N * H * W`, and channel concatenation is a contiguous append.

mod layers;
pub mod resnet;
pub mod toy;
pub mod unet;

pub use layers::{Activation, Conv2d, Linear};

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Channel-major batch of feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Feature {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![0.0; c * n * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Columns of the `(C, N*H*W)` matrix view.
    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Pack `(3, H, W)` images (all the same shape) into one batch.
    pub fn from_images(images: &[&Array3<f32>]) -> Self {
        let (c, h, w) = images[0].dim();
        let n = images.len();
        let mut out = Self::zeros(c, n, h, w);
        let plane = h * w;
        for (i, img) in images.iter().enumerate() {
            assert_eq!(img.dim(), (c, h, w), "batch images must share a shape");
            for ch in 0..c {
                let dst = &mut out.data[(ch * n + i) * plane..(ch * n + i + 1) * plane];
                let src = img.index_axis(ndarray::Axis(0), ch);
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d = *s;
                }
            }
        }
        out
    }

    pub fn to_images(&self) -> Vec<Array3<f32>> {
        let plane = self.plane();
        (0..self.n)
            .map(|i| {
                Array3::from_shape_fn((self.c, self.h, self.w), |(ch, y, x)| {
                    self.data[(ch * self.n + i) * plane + y * self.w + x]
                })
            })
            .collect()
    }

    /// Concatenate along the channel axis.
    pub fn concat(a: &Feature, b: &Feature) -> Feature {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Feature { c: a.c + b.c, n: a.n, h: a.h, w: a.w, data }
    }

    /// Inverse of [`Feature::concat`]: split the first `c_first` channels off.
    pub fn split(self, c_first: usize) -> (Feature, Feature) {
        let at = c_first * self.cols();
        let mut data = self.data;
        let tail = data.split_off(at);
        (
            Feature { c: c_first, n: self.n, h: self.h, w: self.w, data },
            Feature { c: self.c - c_first, n: self.n, h: self.h, w: self.w, data: tail },
        )
    }

    pub fn add_assign(&mut self, other: &Feature) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// 2x2 average pooling (H and W must be even).
    pub fn avg_pool2(&self) -> Feature {
        let (h2, w2) = (self.h / 2, self.w / 2);
        let mut out = Feature::zeros(self.c, self.n, h2, w2);
        let planes = self.c * self.n;
        for p in 0..planes {
            let src = &self.data[p * self.plane()..(p + 1) * self.plane()];
            let dst = &mut out.data[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    let i = 2 * y * self.w + 2 * x;
                    dst[y * w2 + x] = 0.25 * (src[i] + src[i + 1] + src[i + self.w] + src[i + self.w + 1]);
                }
            }
        }
        out
    }

    /// Backward of [`Feature::avg_pool2`].
    pub fn avg_pool2_backward(dy: &Feature) -> Feature {
        let (h, w) = (dy.h * 2, dy.w * 2);
        let mut out = Feature::zeros(dy.c, dy.n, h, w);
        let planes = dy.c * dy.n;
        for p in 0..planes {
            let src = &dy.data[p * dy.plane()..(p + 1) * dy.plane()];
            let dst = &mut out.data[p * h * w..(p + 1) * h * w];
            for y in 0..dy.h {
                for x in 0..dy.w {
                    let g = 0.25 * src[y * dy.w + x];
                    let i = 2 * y * w + 2 * x;
                    dst[i] = g;
                    dst[i + 1] = g;
                    dst[i + w] = g;
                    dst[i + w + 1] = g;
                }
            }
        }
        out
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Feature {
        let (h, w) = (self.h * 2, self.w * 2);
        let mut out = Feature::zeros(self.c, self.n, h, w);
        let planes = self.c * self.n;
        for p in 0..planes {
            let src = &self.data[p * self.plane()..(p + 1) * self.plane()];
            let dst = &mut out.data[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[(y / 2) * self.w + x / 2];
                }
            }
        }
        out
    }

    /// Backward of [`Feature::upsample2`].
    pub fn upsample2_backward(dy: &Feature) -> Feature {
        let (h2, w2) = (dy.h / 2, dy.w / 2);
        let mut out = Feature::zeros(dy.c, dy.n, h2, w2);
        let planes = dy.c * dy.n;
        for p in 0..planes {
            let src = &dy.data[p * dy.plane()..(p + 1) * dy.plane()];
            let dst = &mut out.data[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..dy.h {
                for x in 0..dy.w {
                    dst[(y / 2) * w2 + x / 2] += src[y * dy.w + x];
                }
            }
        }
        out
    }

    /// Mean over each `(c, n)` plane, returned as `[n][c]`.
    pub fn global_avg_pool(&self) -> Vec<Vec<f32>> {
        let plane = self.plane();
        let mut out = vec![vec![0.0; self.c]; self.n];
        for ch in 0..self.c {
            for (i, row) in out.iter_mut().enumerate() {
                let s: f32 = self.data[(ch * self.n + i) * plane..(ch * self.n + i + 1) * plane].iter().sum();
                row[ch] = s / plane as f32;
            }
        }
        out
    }

    pub fn global_avg_pool_backward(dy: &[Vec<f32>], c: usize, n: usize, h: usize, w: usize) -> Feature {
        let mut out = Feature::zeros(c, n, h, w);
        let plane = h * w;
        for ch in 0..c {
            for i in 0..n {
                let g = dy[i][ch] / plane as f32;
                out.data[(ch * n + i) * plane..(ch * n + i + 1) * plane].fill(g);
            }
        }
        out
    }
}

/// Trainable tensor with Adam moment buffers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    #[serde(with = "f32_base64")]
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
    #[serde(skip)]
    m: Vec<f32>,
    #[serde(skip)]
    v: Vec<f32>,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Self { value, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn he_normal<R: Rng>(len: usize, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt() as f32;
        let dist = Normal::new(0.0f32, std).expect("finite std");
        Self::new((0..len).map(|_| dist.sample(rng)).collect())
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    /// Restore auxiliary buffers after deserialization.
    pub fn ensure_buffers(&mut self) {
        let n = self.value.len();
        if self.grad.len() != n {
            self.grad = vec![0.0; n];
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Bit-exact little-endian base64 encoding of parameter vectors.
mod f32_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(D::Error::custom)?;
        if bytes.len() % 4 != 0 {
            return Err(D::Error::custom("parameter payload is not a multiple of 4 bytes"));
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for p in params {
            p.ensure_buffers();
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
    }
}

/// Sinusoidal timestep embedding, `[n][dim]`.
pub fn timestep_embedding(t: usize, n: usize, dim: usize) -> Vec<Vec<f32>> {
    let half = dim / 2;
    let row: Vec<f32> = (0..dim)
        .map(|i| {
            let k = i % half.max(1);
            let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            if i < half {
                arg.sin() as f32
            } else {
                arg.cos() as f32
            }
        })
        .collect();
    vec![row; n]
}

/// Network mapping a conditioned input batch plus a timestep embedding to an image batch.
pub trait ConditionalNet: Clone + Send + Sync {
    type Cache;

    /// `input` carries `x_t` and the conditioning image concatenated along channels.
    fn forward(&self, input: &Feature, temb: &[Vec<f32>]) -> (Feature, Self::Cache);

    /// Accumulate parameter gradients for upstream gradient `dout`.
    fn backward(&mut self, cache: Self::Cache, dout: &Feature, temb: &[Vec<f32>]);

    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_and_upsample_adjoint() {
        // <pool(x), y> == <x, pool_backward(y)>
        let x = Feature { c: 2, n: 1, h: 4, w: 4, data: (0..32).map(|v| v as f32 * 0.1).collect() };
        let y = Feature { c: 2, n: 1, h: 2, w: 2, data: (0..8).map(|v| (v as f32).sin()).collect() };
        let lhs: f32 = x.avg_pool2().data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data.iter().zip(&Feature::avg_pool2_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);

        let lhs: f32 = y.upsample2().data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = y.data.iter().zip(&Feature::upsample2_backward(&x).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn image_round_trip() {
        let a = Array3::from_shape_fn((3, 2, 3), |(c, y, x)| (c * 10 + y * 3 + x) as f32);
        let b = a.mapv(|v| -v);
        let f = Feature::from_images(&[&a, &b]);
        assert_eq!(f.to_images(), vec![a, b]);
    }

    #[test]
    fn concat_split() {
        let a = Feature { c: 1, n: 2, h: 1, w: 2, data: vec![1., 2., 3., 4.] };
        let b = Feature { c: 2, n: 2, h: 1, w: 2, data: vec![5., 6., 7., 8., 9., 10., 11., 12.] };
        let (x, y) = Feature::concat(&a, &b).split(1);
        assert_eq!((x, y), (a, b));
    }
}
