//! Named layer plans shared by weight initialisation and weight loading.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{ConvSpec, ResBlock, Tensor};
use crate::weights::WeightBundle;

/// How a fresh layer is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Channel `o` reads channel `o` (average over a stride-2 kernel, centre
    /// tap otherwise), plus Gaussian noise of std `noise / √fan_in`.
    PassThrough { noise: f32 },
    /// Gaussian with std `gain / √fan_in`.
    Random { gain: f32 },
}

#[derive(Clone, Debug)]
pub(crate) struct ConvPlan {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub init: Init,
}

impl ConvPlan {
    pub fn down(name: String, cin: usize, cout: usize, init: Init) -> Self {
        ConvPlan { name, cin, cout, kernel: 2, stride: 2, padding: 0, init }
    }

    pub fn same3(name: String, cin: usize, cout: usize, init: Init) -> Self {
        ConvPlan { name, cin, cout, kernel: 3, stride: 1, padding: 1, init }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn load(&self, b: &WeightBundle) -> Result<ConvSpec> {
        let k = self.kernel;
        let w = b.get_shaped(&self.weight_name(), &[self.cout, self.cin, k, k])?;
        let bias = b.get_shaped(&self.bias_name(), &[self.cout])?;
        ConvSpec::new(w.clone(), bias.clone(), self.stride, self.padding)
    }

    pub fn initialize(&self, rng: &mut ChaCha8Rng, b: &mut WeightBundle) {
        let k = self.kernel;
        let fan_in = (self.cin * k * k) as f32;
        let mut w = Tensor::zeros(&[self.cout, self.cin, k, k]);
        let std = match self.init {
            Init::PassThrough { noise } => noise,
            Init::Random { gain } => gain,
        } / fan_in.sqrt();
        fill_normal(w.data_mut(), std, rng);
        if let Init::PassThrough { .. } = self.init {
            for o in 0..self.cout.min(self.cin) {
                let base = (o * self.cin + o) * k * k;
                if self.stride == k {
                    for t in 0..k * k {
                        w.data_mut()[base + t] += 1.0 / (k * k) as f32;
                    }
                } else {
                    w.data_mut()[base + (k / 2) * k + k / 2] += 1.0;
                }
            }
        }
        b.insert(self.weight_name(), w);
        b.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn params(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }
}

/// Two same-size 3×3 convolutions forming one residual block.
pub(crate) fn resblock_plans(prefix: &str, channels: usize) -> [ConvPlan; 2] {
    [
        ConvPlan::same3(format!("{prefix}.conv0"), channels, channels, Init::Random { gain: 1.0 }),
        ConvPlan::same3(format!("{prefix}.conv1"), channels, channels, Init::Random { gain: 0.1 }),
    ]
}

pub(crate) fn load_resblock(plans: &[ConvPlan; 2], b: &WeightBundle) -> Result<ResBlock> {
    ResBlock::new(plans[0].load(b)?, plans[1].load(b)?)
}

#[derive(Clone, Debug)]
pub(crate) struct LinearPlan {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub init: Init,
}

/// A loaded affine layer: `weight: [out, in]`, `bias: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearPlan {
    pub fn load(&self, b: &WeightBundle) -> Result<Linear> {
        Ok(Linear {
            weight: b.get_shaped(&format!("{}.w", self.name), &[self.dout, self.din])?.clone(),
            bias: b.get_shaped(&format!("{}.b", self.name), &[self.dout])?.clone(),
        })
    }

    pub fn initialize(&self, rng: &mut ChaCha8Rng, b: &mut WeightBundle) {
        let mut w = Tensor::zeros(&[self.dout, self.din]);
        let (std, ident) = match self.init {
            Init::PassThrough { noise } => (noise, true),
            Init::Random { gain } => (gain, false),
        };
        fill_normal(w.data_mut(), std / (self.din as f32).sqrt(), rng);
        if ident {
            for o in 0..self.dout.min(self.din) {
                w.data_mut()[o * self.din + o] += 1.0;
            }
        }
        b.insert(format!("{}.w", self.name), w);
        b.insert(format!("{}.b", self.name), Tensor::zeros(&[self.dout]));
    }

    pub fn params(&self) -> usize {
        self.dout * self.din + self.dout
    }
}

pub(crate) fn fill_normal(xs: &mut [f32], std: f32, rng: &mut impl Rng) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0f32, std).expect("finite std");
    for x in xs {
        *x = normal.sample(rng);
    }
}
