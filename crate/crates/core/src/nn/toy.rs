//! Single-layer conditional predictor: one 3x3 convolution over the
//! conditioned input plus a linear timestep bias. Linear in its parameters,
//! which makes it the reference subject for gradient checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{add_channel_bias, channel_bias_grad, ConvCache};
use super::{ConditionalNet, Conv2d, Feature, Linear, Param};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyNet {
    conv: Conv2d,
    temb: Linear,
}

impl ToyNet {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, temb_dim: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(in_channels, out_channels, 3, rng), temb: Linear::new(temb_dim, out_channels, rng) }
    }
}

impl ConditionalNet for ToyNet {
    type Cache = ConvCache;

    fn forward(&self, input: &Feature, temb: &[Vec<f32>]) -> (Feature, ConvCache) {
        let (mut y, cache) = self.conv.forward(input);
        add_channel_bias(&mut y, &self.temb.forward(temb));
        (y, cache)
    }

    fn backward(&mut self, cache: ConvCache, dout: &Feature, temb: &[Vec<f32>]) {
        self.temb.backward(temb, &channel_bias_grad(dout), false);
        self.conv.backward(cache, dout, false);
    }

    fn params(&self) -> Vec<&Param> {
        self.conv.params().into_iter().chain(self.temb.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.conv.params_mut().into_iter().collect();
        v.extend(self.temb.params_mut());
        v
    }
}
