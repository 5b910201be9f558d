//! Three-level encoder-decoder with skip connections and per-level timestep
//! embeddings, used for both the restoration and the noise predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{add_channel_bias, channel_bias_grad, ConvCache};
use super::{Activation, ConditionalNet, Conv2d, Feature, Linear, Param};

/// Conv -> (+ timestep bias) -> SiLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    conv: Conv2d,
    temb: Option<Linear>,
}

struct BlockCache {
    conv: ConvCache,
    pre: Vec<f32>,
}

impl Block {
    fn new<R: Rng>(cin: usize, cout: usize, temb_dim: Option<usize>, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(cin, cout, 3, rng), temb: temb_dim.map(|d| Linear::new(d, cout, rng)) }
    }

    fn forward(&self, x: &Feature, temb: &[Vec<f32>]) -> (Feature, BlockCache) {
        let (mut y, conv) = self.conv.forward(x);
        if let Some(lin) = &self.temb {
            add_channel_bias(&mut y, &lin.forward(temb));
        }
        let pre = Activation::Silu.forward(&mut y);
        (y, BlockCache { conv, pre })
    }

    fn backward(&mut self, cache: BlockCache, mut dy: Feature, temb: &[Vec<f32>], need_dx: bool) -> Option<Feature> {
        Activation::Silu.backward(&cache.pre, &mut dy);
        if let Some(lin) = &mut self.temb {
            lin.backward(temb, &channel_bias_grad(&dy), false);
        }
        self.conv.backward(cache.conv, &dy, need_dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.conv.params_mut().into_iter().collect();
        if let Some(l) = &mut self.temb {
            v.extend(l.params_mut());
        }
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.conv.params().into_iter().collect();
        if let Some(l) = &self.temb {
            v.extend(l.params());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the first level; deeper levels use 2x and 4x.
    pub base_width: usize,
    pub temb_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNet {
    pub config: UNetConfig,
    enc1: [Block; 2],
    enc2: [Block; 2],
    mid: [Block; 2],
    dec2: [Block; 2],
    dec1: [Block; 2],
    out: Conv2d,
}

pub struct UNetCache {
    enc1: [BlockCache; 2],
    enc2: [BlockCache; 2],
    mid: [BlockCache; 2],
    dec2: [BlockCache; 2],
    dec1: [BlockCache; 2],
    out: ConvCache,
    c1: usize,
    c2: usize,
}

impl UNet {
    pub fn new<R: Rng>(config: UNetConfig, rng: &mut R) -> Self {
        let (c1, c2, c3) = (config.base_width, 2 * config.base_width, 4 * config.base_width);
        let d = Some(config.temb_dim);
        Self {
            enc1: [Block::new(config.in_channels, c1, d, rng), Block::new(c1, c1, None, rng)],
            enc2: [Block::new(c1, c2, d, rng), Block::new(c2, c2, None, rng)],
            mid: [Block::new(c2, c3, d, rng), Block::new(c3, c3, None, rng)],
            dec2: [Block::new(c3 + c2, c2, d, rng), Block::new(c2, c2, None, rng)],
            dec1: [Block::new(c2 + c1, c1, d, rng), Block::new(c1, c1, None, rng)],
            out: Conv2d::new(c1, config.out_channels, 3, rng),
            config,
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.enc1.iter().chain(&self.enc2).chain(&self.mid).chain(&self.dec2).chain(&self.dec1)
    }
}

fn pair_forward(blocks: &[Block; 2], x: &Feature, temb: &[Vec<f32>]) -> (Feature, [BlockCache; 2]) {
    let (h, a) = blocks[0].forward(x, temb);
    let (h, b) = blocks[1].forward(&h, temb);
    (h, [a, b])
}

fn pair_backward(
    blocks: &mut [Block; 2],
    cache: [BlockCache; 2],
    dy: Feature,
    temb: &[Vec<f32>],
    need_dx: bool,
) -> Option<Feature> {
    let [a, b] = cache;
    let d = blocks[1].backward(b, dy, temb, true).expect("inner dx");
    blocks[0].backward(a, d, temb, need_dx)
}

impl ConditionalNet for UNet {
    type Cache = UNetCache;

    fn forward(&self, input: &Feature, temb: &[Vec<f32>]) -> (Feature, UNetCache) {
        assert!(input.h % 4 == 0 && input.w % 4 == 0, "spatial size must be divisible by 4");
        let (h1, enc1) = pair_forward(&self.enc1, input, temb);
        let (h2, enc2) = pair_forward(&self.enc2, &h1.avg_pool2(), temb);
        let (h3, mid) = pair_forward(&self.mid, &h2.avg_pool2(), temb);
        let (d2, dec2) = pair_forward(&self.dec2, &Feature::concat(&h3.upsample2(), &h2), temb);
        let (d1, dec1) = pair_forward(&self.dec1, &Feature::concat(&d2.upsample2(), &h1), temb);
        let (y, out) = self.out.forward(&d1);
        let cache = UNetCache { enc1, enc2, mid, dec2, dec1, out, c1: h1.c, c2: h2.c };
        (y, cache)
    }

    fn backward(&mut self, cache: UNetCache, dout: &Feature, temb: &[Vec<f32>]) {
        let dd1 = self.out.backward(cache.out, dout, true).expect("dx");
        let cat1 = pair_backward(&mut self.dec1, cache.dec1, dd1, temb, true).expect("dx");
        let (up_d2, mut dh1) = cat1.split(cache.c2);
        let dd2 = Feature::upsample2_backward(&up_d2);
        let cat2 = pair_backward(&mut self.dec2, cache.dec2, dd2, temb, true).expect("dx");
        let (up_h3, mut dh2) = cat2.split(4 * self.config.base_width);
        let dh3 = Feature::upsample2_backward(&up_h3);
        let dpool2 = pair_backward(&mut self.mid, cache.mid, dh3, temb, true).expect("dx");
        dh2.add_assign(&Feature::avg_pool2_backward(&dpool2));
        let dpool1 = pair_backward(&mut self.enc2, cache.enc2, dh2, temb, true).expect("dx");
        dh1.add_assign(&Feature::avg_pool2_backward(&dpool1));
        debug_assert_eq!(dh1.c, cache.c1);
        pair_backward(&mut self.enc1, cache.enc1, dh1, temb, false);
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.blocks().flat_map(|b| b.params()).collect();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        let blocks = self
            .enc1
            .iter_mut()
            .chain(self.enc2.iter_mut())
            .chain(self.mid.iter_mut())
            .chain(self.dec2.iter_mut())
            .chain(self.dec1.iter_mut());
        for b in blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.out.params_mut());
        v
    }
}
