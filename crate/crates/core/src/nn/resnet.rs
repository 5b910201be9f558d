//! Small residual convolutional classifier for stained patches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::ConvCache;
use super::{Activation, Conv2d, Feature, Linear, Param};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

struct ResidualCache {
    c1: ConvCache,
    pre1: Vec<f32>,
    c2: ConvCache,
    pre_out: Vec<f32>,
}

impl ResidualBlock {
    fn new<R: Rng>(c: usize, rng: &mut R) -> Self {
        Self { conv1: Conv2d::new(c, c, 3, rng), conv2: Conv2d::new(c, c, 3, rng) }
    }

    fn forward(&self, x: &Feature) -> (Feature, ResidualCache) {
        let (mut h, c1) = self.conv1.forward(x);
        let pre1 = Activation::Relu.forward(&mut h);
        let (mut y, c2) = self.conv2.forward(&h);
        y.add_assign(x);
        let pre_out = Activation::Relu.forward(&mut y);
        (y, ResidualCache { c1, pre1, c2, pre_out })
    }

    fn backward(&mut self, cache: ResidualCache, mut dy: Feature) -> Feature {
        Activation::Relu.backward(&cache.pre_out, &mut dy);
        let mut dh = self.conv2.backward(cache.c2, &dy, true).expect("dx");
        Activation::Relu.backward(&cache.pre1, &mut dh);
        let mut dx = self.conv1.backward(cache.c1, &dh, true).expect("dx");
        dx.add_assign(&dy);
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.conv1.params_mut().into_iter().chain(self.conv2.params_mut()).collect()
    }

    fn params(&self) -> Vec<&Param> {
        self.conv1.params().into_iter().chain(self.conv2.params()).collect()
    }
}

/// stem -> res(w) -> pool -> conv(2w) -> res(2w) -> pool -> global mean -> linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNet {
    pub width: usize,
    pub n_classes: usize,
    stem: Conv2d,
    res1: ResidualBlock,
    widen: Conv2d,
    res2: ResidualBlock,
    head: Linear,
}

pub struct ResNetCache {
    stem: ConvCache,
    pre_stem: Vec<f32>,
    res1: ResidualCache,
    widen: ConvCache,
    pre_widen: Vec<f32>,
    res2: ResidualCache,
    pooled: Vec<Vec<f32>>,
    last_shape: (usize, usize, usize, usize),
}

impl ResNet {
    pub fn new<R: Rng>(in_channels: usize, width: usize, n_classes: usize, rng: &mut R) -> Self {
        Self {
            width,
            n_classes,
            stem: Conv2d::new(in_channels, width, 3, rng),
            res1: ResidualBlock::new(width, rng),
            widen: Conv2d::new(width, 2 * width, 3, rng),
            res2: ResidualBlock::new(2 * width, rng),
            head: Linear::new(2 * width, n_classes, rng),
        }
    }

    /// Returns logits `[n][n_classes]`.
    pub fn forward(&self, x: &Feature) -> (Vec<Vec<f32>>, ResNetCache) {
        let (mut h, stem) = self.stem.forward(x);
        let pre_stem = Activation::Relu.forward(&mut h);
        let (h, res1) = self.res1.forward(&h);
        let (mut h, widen) = self.widen.forward(&h.avg_pool2());
        let pre_widen = Activation::Relu.forward(&mut h);
        let (h, res2) = self.res2.forward(&h);
        let h = h.avg_pool2();
        let pooled = h.global_avg_pool();
        let logits = self.head.forward(&pooled);
        let cache = ResNetCache { stem, pre_stem, res1, widen, pre_widen, res2, pooled, last_shape: (h.c, h.n, h.h, h.w) };
        (logits, cache)
    }

    pub fn backward(&mut self, cache: ResNetCache, dlogits: &[Vec<f32>]) {
        let dpooled = self.head.backward(&cache.pooled, dlogits, true).expect("dx");
        let (c, n, h, w) = cache.last_shape;
        let dh = Feature::global_avg_pool_backward(&dpooled, c, n, h, w);
        let dh = Feature::avg_pool2_backward(&dh);
        let mut dh = self.res2.backward(cache.res2, dh);
        Activation::Relu.backward(&cache.pre_widen, &mut dh);
        let dh = self.widen.backward(cache.widen, &dh, true).expect("dx");
        let dh = Feature::avg_pool2_backward(&dh);
        let mut dh = self.res1.backward(cache.res1, dh);
        Activation::Relu.backward(&cache.pre_stem, &mut dh);
        self.stem.backward(cache.stem, &dh, false);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.stem.params_mut().into_iter().collect();
        v.extend(self.res1.params_mut());
        v.extend(self.widen.params_mut());
        v.extend(self.res2.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.stem.params().into_iter().collect();
        v.extend(self.res1.params());
        v.extend(self.widen.params());
        v.extend(self.res2.params());
        v.extend(self.head.params());
        v
    }
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[Vec<f32>], labels: &[usize]) -> (f64, Vec<Vec<f32>>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = z.iter().map(|v| ((v - max) as f64).exp()).collect();
            let sum: f64 = exps.iter().sum();
            loss -= (exps[y] / sum).ln();
            exps.iter()
                .enumerate()
                .map(|(k, e)| ((e / sum - if k == y { 1.0 } else { 0.0 }) / n) as f32)
                .collect()
        })
        .collect();
    (loss / n, grads)
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = ResNet::new(3, 2, 2, &mut rng);
        let x = Feature { c: 3, n: 2, h: 4, w: 4, data: (0..96).map(|i| ((i * 5 % 17) as f32 / 17.0) - 0.3).collect() };
        let labels = [0usize, 1];
        let (logits, cache) = net.forward(&x);
        let (_, d) = cross_entropy(&logits, &labels);
        net.backward(cache, &d);
        let n_params = net.params().len();
        let h = 1e-2f32;
        for pi in [0, n_params - 2, n_params - 1] {
            let an = net.params()[pi].grad[0] as f64;
            let orig = net.params()[pi].value[0];
            net.params_mut()[pi].value[0] = orig + h;
            let lp = cross_entropy(&net.forward(&x).0, &labels).0;
            net.params_mut()[pi].value[0] = orig - h;
            let lm = cross_entropy(&net.forward(&x).0, &labels).0;
            net.params_mut()[pi].value[0] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            assert!((fd - an).abs() <= 5e-2 * fd.abs().max(an.abs()).max(1e-3), "param {pi}: {fd} vs {an}");
        }
    }

    #[test]
    fn cross_entropy_uniform() {
        let (l, g) = cross_entropy(&[vec![0.0, 0.0]], &[1]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
        assert!((g[0][0] - 0.5).abs() < 1e-6 && (g[0][1] + 0.5).abs() < 1e-6);
    }
}
