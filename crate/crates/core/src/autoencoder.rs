//! Shared image encoder/decoder used by both keyframes and predicted frames.
//!
//! Encoder: three stride-2 2×2 convolutions, each followed by `resblocks`
//! residual blocks, then a 3×3 projection to `latent_channels`. The decoder
//! mirrors it: 3×3 projection, residual blocks, and three
//! nearest-neighbour upsample + 3×3 convolution stages down to RGB, clamped to
//! `[0, 1]`. The light decoder halves every decoder width and resblock count.

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{load_resblock, resblock_plans, ConvPlan, Init};
use crate::tensor::{conv2d, conv_macs, downsample2x, resblock, upsample2x, ConvSpec, Numerics, ResBlock, Tensor};
use crate::weights::WeightBundle;

/// Total spatial reduction between image and latent.
pub const DOWNSAMPLE_FACTOR: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderVariant {
    Standard,
    Light,
}

impl DecoderVariant {
    fn prefix(self) -> &'static str {
        match self {
            DecoderVariant::Standard => "dec",
            DecoderVariant::Light => "light",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AutoencoderConfig {
    /// Latent channel count `n_c`.
    pub latent_channels: usize,
    /// Encoder widths after each downsampling stage, shallow to deep.
    pub widths: [usize; 3],
    pub resblocks: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            latent_channels: 128,
            widths: [64, 128, 128],
            resblocks: 2,
        }
    }
}

impl AutoencoderConfig {
    pub fn decoder_widths(&self, variant: DecoderVariant) -> [usize; 3] {
        match variant {
            DecoderVariant::Standard => self.widths,
            DecoderVariant::Light => self.widths.map(|w| w.div_ceil(2)),
        }
    }

    pub fn decoder_resblocks(&self, variant: DecoderVariant) -> usize {
        match variant {
            DecoderVariant::Standard => self.resblocks,
            DecoderVariant::Light => self.resblocks / 2,
        }
    }

    /// Latent extents of an `h`×`w` image.
    pub fn latent_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h == 0 || w == 0 || !h.is_multiple_of(DOWNSAMPLE_FACTOR) || !w.is_multiple_of(DOWNSAMPLE_FACTOR) {
            return Err(shape_err!("image {h}x{w} is not divisible by {DOWNSAMPLE_FACTOR}"));
        }
        Ok((h / DOWNSAMPLE_FACTOR, w / DOWNSAMPLE_FACTOR))
    }

    fn encoder_layout(&self) -> CoderLayout {
        let [w1, w2, w3] = self.widths;
        let pass = Init::PassThrough { noise: 0.02 };
        let ins = [3, w1, w2];
        let outs = [w1, w2, w3];
        CoderLayout {
            resample: (0..3)
                .map(|i| ConvPlan::down(format!("enc.down{i}"), ins[i], outs[i], pass))
                .collect(),
            stages: (0..3)
                .map(|i| {
                    (0..self.resblocks)
                        .map(|j| resblock_plans(&format!("enc.stage{i}.res{j}"), outs[i]))
                        .collect()
                })
                .collect(),
            edge: ConvPlan::same3("enc.out".into(), w3, self.latent_channels, pass),
        }
    }

    fn decoder_layout(&self, variant: DecoderVariant) -> CoderLayout {
        let p = variant.prefix();
        let [d1, d2, d3] = self.decoder_widths(variant);
        let pass = Init::PassThrough { noise: 0.02 };
        let stage_width = [d3, d2, d1];
        let up_out = [d2, d1, 3];
        CoderLayout {
            edge: ConvPlan::same3(format!("{p}.in"), self.latent_channels, d3, pass),
            stages: (0..3)
                .map(|i| {
                    (0..self.decoder_resblocks(variant))
                        .map(|j| resblock_plans(&format!("{p}.stage{i}.res{j}"), stage_width[i]))
                        .collect()
                })
                .collect(),
            resample: (0..3)
                .map(|i| ConvPlan::same3(format!("{p}.up{i}"), stage_width[i], up_out[i], pass))
                .collect(),
        }
    }

    pub(crate) fn initialize(&self, rng: &mut ChaCha8Rng, with_light: bool, b: &mut WeightBundle) {
        let mut layouts = vec![self.encoder_layout(), self.decoder_layout(DecoderVariant::Standard)];
        if with_light {
            layouts.push(self.decoder_layout(DecoderVariant::Light));
        }
        for layout in layouts {
            for plan in layout.plans() {
                plan.initialize(rng, b);
            }
        }
    }

    pub fn encoder_params(&self) -> usize {
        self.encoder_layout().plans().map(ConvPlan::params).sum()
    }

    pub fn decoder_params(&self, variant: DecoderVariant) -> usize {
        self.decoder_layout(variant).plans().map(ConvPlan::params).sum()
    }
}

struct CoderLayout {
    /// Downsampling convs (encoder) or upsampling convs (decoder).
    resample: Vec<ConvPlan>,
    stages: Vec<Vec<[ConvPlan; 2]>>,
    /// Encoder output projection or decoder input projection.
    edge: ConvPlan,
}

impl CoderLayout {
    fn plans(&self) -> impl Iterator<Item = &ConvPlan> {
        self.resample
            .iter()
            .chain(self.stages.iter().flatten().flatten())
            .chain(std::iter::once(&self.edge))
    }
}

#[derive(Clone, Debug)]
struct Stack {
    resample: Vec<ConvSpec>,
    stages: Vec<Vec<ResBlock>>,
    edge: ConvSpec,
}

impl Stack {
    fn load(layout: &CoderLayout, b: &WeightBundle) -> Result<Self> {
        Ok(Stack {
            resample: layout.resample.iter().map(|p| p.load(b)).collect::<Result<_>>()?,
            stages: layout
                .stages
                .iter()
                .map(|s| s.iter().map(|r| load_resblock(r, b)).collect::<Result<_>>())
                .collect::<Result<_>>()?,
            edge: layout.edge.load(b)?,
        })
    }
}

/// Encoder, standard decoder and (optionally) light decoder.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    cfg: AutoencoderConfig,
    encoder: Stack,
    decoder: Stack,
    light: Option<Stack>,
}

impl Autoencoder {
    pub fn from_bundle(cfg: &AutoencoderConfig, b: &WeightBundle) -> Result<Self> {
        let light_layout = cfg.decoder_layout(DecoderVariant::Light);
        let light = if b.contains(&light_layout.edge.weight_name()) {
            Some(Stack::load(&light_layout, b)?)
        } else {
            None
        };
        Ok(Autoencoder {
            cfg: cfg.clone(),
            encoder: Stack::load(&cfg.encoder_layout(), b)?,
            decoder: Stack::load(&cfg.decoder_layout(DecoderVariant::Standard), b)?,
            light,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn has_light_decoder(&self) -> bool {
        self.light.is_some()
    }

    /// `[3,H,W]` image to `[n_c,H/8,W/8]` latent.
    pub fn encode_image(&self, x: &Tensor, num: &Numerics) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        if c != 3 {
            return Err(shape_err!("image must have 3 channels, got {c}"));
        }
        self.cfg.latent_extents(h, w)?;
        let e = &self.encoder;
        let mut t = x.clone();
        for (down, blocks) in e.resample.iter().zip(&e.stages) {
            t = downsample2x(&t, down, num)?;
            for block in blocks {
                t = resblock(&t, block, num)?;
            }
        }
        conv2d(&t, &e.edge, num)
    }

    /// `[n_c,h,w]` latent to `[3,8h,8w]` image with values in `[0, 1]`.
    pub fn decode_image(&self, y: &Tensor, variant: DecoderVariant, num: &Numerics) -> Result<Tensor> {
        let (c, _, _) = y.dims3()?;
        if c != self.cfg.latent_channels {
            return Err(shape_err!(
                "latent has {c} channels, decoder expects {}",
                self.cfg.latent_channels
            ));
        }
        let d = self.stack(variant)?;
        let mut t = conv2d(y, &d.edge, num)?;
        for (blocks, up) in d.stages.iter().zip(&d.resample) {
            for block in blocks {
                t = resblock(&t, block, num)?;
            }
            t = upsample2x(&t, up, num)?;
        }
        Ok(t.map(|v| num.round(v.clamp(0.0, 1.0))))
    }

    fn stack(&self, variant: DecoderVariant) -> Result<&Stack> {
        match variant {
            DecoderVariant::Standard => Ok(&self.decoder),
            DecoderVariant::Light => self
                .light
                .as_ref()
                .ok_or_else(|| Error::Weights("bundle has no light decoder".into())),
        }
    }

    /// Multiply-accumulates of one encode at `h`×`w` pixels.
    pub fn encoder_macs(&self, h: usize, w: usize) -> u64 {
        let e = &self.encoder;
        let (mut h, mut w) = (h, w);
        let mut total = 0;
        for (down, blocks) in e.resample.iter().zip(&e.stages) {
            total += conv_macs(down, h, w);
            (h, w) = (h / 2, w / 2);
            total += blocks.iter().map(|b| b.macs(h, w)).sum::<u64>();
        }
        total + conv_macs(&e.edge, h, w)
    }

    /// Multiply-accumulates of one decode of an `h`×`w` latent.
    pub fn decoder_macs(&self, h: usize, w: usize, variant: DecoderVariant) -> Result<u64> {
        let d = self.stack(variant)?;
        let (mut h, mut w) = (h, w);
        let mut total = conv_macs(&d.edge, h, w);
        for (blocks, up) in d.stages.iter().zip(&d.resample) {
            total += blocks.iter().map(|b| b.macs(h, w)).sum::<u64>();
            (h, w) = (h * 2, w * 2);
            total += conv_macs(up, h, w);
        }
        Ok(total)
    }
}
