//! GOP orchestration: keyframes go encoder → quantizer → decoder; predicted
//! frames add the context encoder before quantization and the context decoder
//! after it, both conditioned on the previous frame's reconstructed latent.
//!
//! The encoder runs the decoder's latent path itself, so both sides hold the
//! same reference latent after every frame.

use crate::autoencoder::DecoderVariant;
use crate::bitstream::{FrameKind, FrameRecord, GopBitstream, StreamHeader};
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::quantizer::{CodebookSpec, IndexGrid, QuantizerSet};
use crate::tensor::{Numerics, Tensor};

/// Frame extents must be multiples of this.
pub const FRAME_ALIGN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    /// GOP size `m`.
    pub gop: usize,
    /// Predicted-frame rate point.
    pub predicted: CodebookSpec,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            gop: 32,
            predicted: CodebookSpec::PREDICTED_LOW,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gop == 0 {
            return Err(Error::Config("GOP size must be at least 1".into()));
        }
        if self.gop > u32::MAX as usize {
            return Err(Error::Config(format!("GOP size {} is too large", self.gop)));
        }
        Ok(())
    }

    pub fn kind_at(&self, frame: usize) -> FrameKind {
        if frame.is_multiple_of(self.gop) {
            FrameKind::Key
        } else {
            FrameKind::Predicted
        }
    }
}

/// Reference latent carried between frames of a GOP.
#[derive(Clone, Debug, Default)]
pub struct LatentState {
    pub reference: Option<Tensor>,
    /// Frames coded so far in the current GOP.
    pub position: usize,
}

impl LatentState {
    fn advance(&mut self, latent: Tensor, kind: FrameKind) {
        self.position = if kind == FrameKind::Key { 1 } else { self.position + 1 };
        self.reference = Some(latent);
    }
}

fn check_frame(x: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = x.dims3()?;
    if c != 3 {
        return Err(shape_err!("frame must have 3 channels, got {c}"));
    }
    if h == 0 || w == 0 || h % FRAME_ALIGN != 0 || w % FRAME_ALIGN != 0 {
        return Err(shape_err!("frame {w}x{h} is not divisible by {FRAME_ALIGN}; crop it first"));
    }
    Ok((h, w))
}

/// One coded frame, with the reconstructed latent both sides now hold.
#[derive(Clone, Debug)]
pub struct EncodedFrame {
    pub kind: FrameKind,
    pub grid: IndexGrid,
    pub latent: Tensor,
}

pub struct Encoder<'m> {
    model: &'m Model,
    predicted: &'m QuantizerSet,
    num: Numerics,
    state: LatentState,
}

impl<'m> Encoder<'m> {
    pub fn new(model: &'m Model, cfg: &CodecConfig, num: Numerics) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder {
            model,
            predicted: model.predicted_set(&cfg.predicted)?,
            num,
            state: LatentState::default(),
        })
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn encode_keyframe(&mut self, x: &Tensor) -> Result<EncodedFrame> {
        check_frame(x)?;
        let y = self.model.autoencoder.encode_image(x, &self.num)?;
        let (grid, latent) = self.model.keyframe.quantize(&y, &self.num)?;
        self.state.advance(latent.clone(), FrameKind::Key);
        Ok(EncodedFrame { kind: FrameKind::Key, grid, latent })
    }

    pub fn encode_predicted(&mut self, x: &Tensor) -> Result<EncodedFrame> {
        let reference = self
            .state
            .reference
            .as_ref()
            .ok_or_else(|| Error::Protocol("predicted frame without a preceding keyframe".into()))?;
        check_frame(x)?;
        let y = self.model.autoencoder.encode_image(x, &self.num)?;
        let y_ctx = self.model.context_encoder.run(&y, reference, &self.num)?;
        let (grid, y_ctx_hat) = self.predicted.quantize(&y_ctx, &self.num)?;
        let latent = self.model.context_decoder.run(&y_ctx_hat, reference, &self.num)?;
        self.state.advance(latent.clone(), FrameKind::Predicted);
        Ok(EncodedFrame { kind: FrameKind::Predicted, grid, latent })
    }

    pub fn encode(&mut self, x: &Tensor, kind: FrameKind) -> Result<EncodedFrame> {
        match kind {
            FrameKind::Key => self.encode_keyframe(x),
            FrameKind::Predicted => self.encode_predicted(x),
        }
    }
}

pub struct Decoder<'m> {
    model: &'m Model,
    cfg: CodecConfig,
    predicted: &'m QuantizerSet,
    variant: DecoderVariant,
    num: Numerics,
    state: LatentState,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model, cfg: &CodecConfig, variant: DecoderVariant, num: Numerics) -> Result<Self> {
        cfg.validate()?;
        Ok(Decoder {
            model,
            cfg: *cfg,
            predicted: model.predicted_set(&cfg.predicted)?,
            variant,
            num,
            state: LatentState::default(),
        })
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    /// Decodes one frame, returning the image and its reconstructed latent.
    pub fn decode_frame(&mut self, grid: &IndexGrid, kind: FrameKind) -> Result<(Tensor, Tensor)> {
        let expected = if self.state.reference.is_none() {
            FrameKind::Key
        } else {
            self.cfg.kind_at(self.state.position)
        };
        if kind != expected {
            return Err(Error::Protocol(format!(
                "got a {kind:?} frame at GOP position {} where a {expected:?} frame is due",
                self.state.position
            )));
        }
        let latent = match kind {
            FrameKind::Key => {
                grid.validate(self.model.keyframe.spec())?;
                self.model.keyframe.dequantize(grid, &self.num)?
            }
            FrameKind::Predicted => {
                grid.validate(self.predicted.spec())?;
                let reference = self.state.reference.as_ref().expect("checked above");
                let y_ctx_hat = self.predicted.dequantize(grid, &self.num)?;
                self.model.context_decoder.run(&y_ctx_hat, reference, &self.num)?
            }
        };
        let x = self.model.autoencoder.decode_image(&latent, self.variant, &self.num)?;
        self.state.advance(latent.clone(), kind);
        Ok((x, latent))
    }
}

/// Encoded GOP streams plus the encoder-side reconstructions of every frame.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub streams: Vec<GopBitstream>,
    pub latents: Vec<Tensor>,
}

/// Splits `frames` into GOPs of `cfg.gop`; frame `i` is a keyframe iff `i mod m == 0`.
pub fn encode_sequence(model: &Model, cfg: &CodecConfig, frames: &[Tensor], num: &Numerics) -> Result<EncodedSequence> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Config("cannot encode an empty sequence".into()))?;
    let (h, w) = check_frame(first)?;
    let mut enc = Encoder::new(model, cfg, *num)?;
    let mut streams = Vec::new();
    let mut latents = Vec::with_capacity(frames.len());
    for (g, gop) in frames.chunks(cfg.gop).enumerate() {
        let mut records = Vec::with_capacity(gop.len());
        for (i, x) in gop.iter().enumerate() {
            if x.shape() != first.shape() {
                return Err(shape_err!(
                    "frame {} is {:?}, first frame is {:?}",
                    g * cfg.gop + i,
                    x.shape(),
                    first.shape()
                ));
            }
            let f = enc.encode(x, cfg.kind_at(i))?;
            latents.push(f.latent);
            records.push(FrameRecord { kind: f.kind, grid: f.grid });
        }
        streams.push(GopBitstream {
            header: StreamHeader {
                width: w as u32,
                height: h as u32,
                gop: cfg.gop as u32,
                frame_count: records.len() as u32,
                keyframe: *model.keyframe.spec(),
                predicted: cfg.predicted,
                weight_hash: model.weight_hash(),
            },
            frames: records,
        });
    }
    Ok(EncodedSequence { streams, latents })
}

/// Decoded frames and the latents behind them.
#[derive(Clone, Debug)]
pub struct DecodedSequence {
    pub frames: Vec<Tensor>,
    pub latents: Vec<Tensor>,
}

pub fn decode_sequence(
    model: &Model,
    streams: &[GopBitstream],
    variant: DecoderVariant,
    num: &Numerics,
) -> Result<DecodedSequence> {
    let mut out = DecodedSequence { frames: Vec::new(), latents: Vec::new() };
    for s in streams {
        let h = &s.header;
        if h.weight_hash != model.weight_hash() {
            return Err(Error::ModelMismatch {
                expected: h.weight_hash,
                actual: model.weight_hash(),
            });
        }
        if h.keyframe != *model.keyframe.spec() {
            return Err(Error::CorruptStream(format!(
                "keyframe codebooks {} do not match the model's {}",
                h.keyframe,
                model.keyframe.spec()
            )));
        }
        let cfg = CodecConfig {
            gop: h.gop as usize,
            predicted: h.predicted,
        };
        let mut dec = Decoder::new(model, &cfg, variant, *num)?;
        for f in &s.frames {
            let (x, y) = dec.decode_frame(&f.grid, f.kind)?;
            out.frames.push(x);
            out.latents.push(y);
        }
    }
    Ok(out)
}
