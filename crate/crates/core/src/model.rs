//! A complete set of codec weights: autoencoder, context coders and one
//! quantizer set per rate point, assembled from a [`WeightBundle`] manifest.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{Autoencoder, AutoencoderConfig};
use crate::context::{ContextCoder, ContextConfig};
use crate::error::{Error, Result};
use crate::quantizer::{CodebookSpec, FitOptions, FitReport, QuantizerSet};
use crate::tensor::Tensor;
use crate::weights::WeightBundle;

pub const KEY_PREFIX: &str = "key";
pub const CONTEXT_ENCODER_PREFIX: &str = "ctx_enc";
pub const CONTEXT_DECODER_PREFIX: &str = "ctx_dec";

/// Weight prefix of the quantizer set serving predicted frames at `spec`.
pub fn predicted_prefix(spec: &CodebookSpec) -> String {
    let [a, b, c] = spec.sizes;
    format!("pred.{a}x{b}x{c}")
}

/// Architecture hyperparameters, stored in the bundle manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub autoencoder: AutoencoderConfig,
    pub context: ContextConfig,
    pub keyframe: CodebookSpec,
    /// Every predicted-frame rate point the bundle carries codebooks for.
    pub predicted: Vec<CodebookSpec>,
    pub light_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            autoencoder: AutoencoderConfig::default(),
            context: ContextConfig::default(),
            keyframe: CodebookSpec::KEYFRAME,
            predicted: vec![
                CodebookSpec::PREDICTED_HIGH,
                CodebookSpec::PREDICTED_MID,
                CodebookSpec::PREDICTED_LOW,
            ],
            light_decoder: false,
        }
    }
}

impl ModelConfig {
    pub fn write_manifest(&self, b: &mut WeightBundle) {
        let ae = &self.autoencoder;
        let [w1, w2, w3] = ae.widths;
        b.set_meta("ae.latent_channels", ae.latent_channels);
        b.set_meta("ae.widths", format!("{w1},{w2},{w3}"));
        b.set_meta("ae.resblocks", ae.resblocks);
        b.set_meta("ae.light_decoder", u8::from(self.light_decoder));
        let c = &self.context;
        b.set_meta("ctx.window", c.window);
        b.set_meta("ctx.padding", c.padding);
        b.set_meta("ctx.heads", c.heads);
        b.set_meta("ctx.head_dim", c.head_dim);
        b.set_meta("ctx.repeats", c.repeats);
        b.set_meta("vq.key", self.keyframe);
        let pred: Vec<String> = self.predicted.iter().map(|s| s.to_string()).collect();
        b.set_meta("vq.pred", pred.join(";"));
    }

    pub fn from_manifest(b: &WeightBundle) -> Result<Self> {
        let widths: Vec<usize> = b
            .meta("ae.widths")?
            .split(',')
            .map(|w| w.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Weights("manifest `ae.widths` is malformed".into()))?;
        let widths: [usize; 3] = widths
            .try_into()
            .map_err(|_| Error::Weights("manifest `ae.widths` needs three widths".into()))?;
        let spec = |s: &str| s.parse::<CodebookSpec>().map_err(|e| Error::Weights(e.to_string()));
        let cfg = ModelConfig {
            autoencoder: AutoencoderConfig {
                latent_channels: b.meta_usize("ae.latent_channels")?,
                widths,
                resblocks: b.meta_usize("ae.resblocks")?,
            },
            context: ContextConfig {
                window: b.meta_usize("ctx.window")?,
                padding: b.meta_usize("ctx.padding")?,
                heads: b.meta_usize("ctx.heads")?,
                head_dim: b.meta_usize("ctx.head_dim")?,
                repeats: b.meta_usize("ctx.repeats")?,
            },
            keyframe: spec(b.meta("vq.key")?)?,
            predicted: b
                .meta("vq.pred")?
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(spec)
                .collect::<Result<_>>()?,
            light_decoder: b.meta_usize("ae.light_decoder")? != 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ae = &self.autoencoder;
        if ae.latent_channels == 0 || !ae.latent_channels.is_multiple_of(2) || ae.widths.contains(&0) {
            return Err(Error::Config(format!("bad autoencoder config {ae:?}")));
        }
        self.context.validate()?;
        if self.predicted.is_empty() {
            return Err(Error::Config("at least one predicted rate point is required".into()));
        }
        Ok(())
    }

    /// Fresh structured weights: near-identity resampling paths, random
    /// attention and residual branches, Gaussian codebooks of std `codeword_std`.
    pub fn initialize(&self, seed: u64, codeword_std: f32) -> Result<WeightBundle> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = WeightBundle::new();
        self.write_manifest(&mut b);
        let n_c = self.autoencoder.latent_channels;
        self.autoencoder.initialize(&mut rng, self.light_decoder, &mut b);
        self.context.initialize(CONTEXT_ENCODER_PREFIX, n_c, &mut rng, &mut b);
        self.context.initialize(CONTEXT_DECODER_PREFIX, n_c, &mut rng, &mut b);
        QuantizerSet::initialize(KEY_PREFIX, n_c, &self.keyframe, codeword_std, &mut rng, &mut b);
        for spec in &self.predicted {
            QuantizerSet::initialize(&predicted_prefix(spec), n_c, spec, codeword_std, &mut rng, &mut b);
        }
        Ok(b)
    }
}

#[derive(Clone, Debug)]
pub struct CodebookFit {
    pub keyframe: FitReport,
    /// Empty when the clip has a single frame.
    pub predicted: Vec<(CodebookSpec, FitReport)>,
}

/// Loaded model. Keeps the bundle so refitted codebooks can be written back.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    bundle: WeightBundle,
    hash: u64,
    pub autoencoder: Autoencoder,
    pub context_encoder: ContextCoder,
    pub context_decoder: ContextCoder,
    pub keyframe: QuantizerSet,
    pub predicted: Vec<QuantizerSet>,
}

impl Model {
    pub fn from_bundle(bundle: WeightBundle) -> Result<Self> {
        let config = ModelConfig::from_manifest(&bundle)?;
        let n_c = config.autoencoder.latent_channels;
        let autoencoder = Autoencoder::from_bundle(&config.autoencoder, &bundle)?;
        if config.light_decoder && !autoencoder.has_light_decoder() {
            return Err(Error::Weights("manifest declares a light decoder but its weights are missing".into()));
        }
        let context_encoder = ContextCoder::from_bundle(CONTEXT_ENCODER_PREFIX, n_c, &config.context, &bundle)?;
        let context_decoder = ContextCoder::from_bundle(CONTEXT_DECODER_PREFIX, n_c, &config.context, &bundle)?;
        let keyframe = QuantizerSet::from_bundle(KEY_PREFIX, n_c, &config.keyframe, &bundle)?;
        let predicted = config
            .predicted
            .iter()
            .map(|s| QuantizerSet::from_bundle(&predicted_prefix(s), n_c, s, &bundle))
            .collect::<Result<_>>()?;
        Ok(Model {
            hash: bundle.content_hash(),
            config,
            bundle,
            autoencoder,
            context_encoder,
            context_decoder,
            keyframe,
            predicted,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bundle(WeightBundle::load(path)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bundle(&self) -> &WeightBundle {
        &self.bundle
    }

    /// Content hash of the bundle; stamped into every bitstream header.
    pub fn weight_hash(&self) -> u64 {
        self.hash
    }

    pub fn predicted_set(&self, spec: &CodebookSpec) -> Result<&QuantizerSet> {
        self.predicted
            .iter()
            .find(|q| q.spec() == spec)
            .ok_or_else(|| Error::Config(format!("model has no predicted codebooks for rate point {spec}")))
    }

    /// Refits keyframe codebooks on the given latents.
    pub fn fit_keyframe(&mut self, latents: &[Tensor], opts: &FitOptions) -> Result<FitReport> {
        let report = self.keyframe.fit(latents, opts)?;
        self.commit();
        Ok(report)
    }

    /// Refits the predicted codebooks of `spec` on context-encoded latents.
    pub fn fit_predicted(&mut self, spec: &CodebookSpec, latents: &[Tensor], opts: &FitOptions) -> Result<FitReport> {
        let set = self
            .predicted
            .iter_mut()
            .find(|q| q.spec() == spec)
            .ok_or_else(|| Error::Config(format!("model has no predicted codebooks for rate point {spec}")))?;
        let report = set.fit(latents, opts)?;
        self.commit();
        Ok(report)
    }

    /// Fits every codebook on a clip. Keyframe books see `E(x)` of every
    /// frame; predicted books see `ctxE(E(x_t), ŷ_{t-1})` where `ŷ_{t-1}` is
    /// the keyframe-quantized latent of the previous frame.
    pub fn fit_codebooks(&mut self, frames: &[Tensor], opts: &FitOptions) -> Result<CodebookFit> {
        let num = crate::tensor::Numerics::default();
        let latents = frames
            .iter()
            .map(|x| self.autoencoder.encode_image(x, &num))
            .collect::<Result<Vec<_>>>()?;
        let keyframe = self.fit_keyframe(&latents, opts)?;
        let mut predicted = Vec::with_capacity(self.predicted.len());
        if latents.len() >= 2 {
            let references = latents[..latents.len() - 1]
                .iter()
                .map(|y| Ok(self.keyframe.quantize(y, &num)?.1))
                .collect::<Result<Vec<_>>>()?;
            let contexts = latents[1..]
                .iter()
                .zip(&references)
                .map(|(y, r)| self.context_encoder.run(y, r, &num))
                .collect::<Result<Vec<_>>>()?;
            for spec in self.config.predicted.clone() {
                predicted.push((spec, self.fit_predicted(&spec, &contexts, opts)?));
            }
        }
        Ok(CodebookFit { keyframe, predicted })
    }

    fn commit(&mut self) {
        self.keyframe.write_codebooks(&mut self.bundle);
        for q in &self.predicted {
            q.write_codebooks(&mut self.bundle);
        }
        self.hash = self.bundle.content_hash();
    }
}
