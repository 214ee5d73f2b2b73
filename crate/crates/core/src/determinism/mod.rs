//! Cross-platform decode harness.
//!
//! A perturbation mode swaps the reduction policy the tensor engine uses while
//! decoding, standing in for a different GPU, compiler or precision. Index
//! parsing is integer-only, so the index trace cannot change; only the pixel
//! reconstruction can drift.

mod range_coder;

pub use range_coder::{
    ac_roundtrip_demo, decode_symbols, encode_symbols, gaussian_symbols, AcReport, DiscretizedGaussian,
    RangeDecoder, RangeEncoder, TOTAL_FREQ,
};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use crate::autoencoder::DecoderVariant;
use crate::bitstream::GopBitstream;
use crate::codec::decode_sequence;
use crate::error::{Error, Result};
use crate::metrics::{psnr, sequence_bpp};
use crate::model::Model;
use crate::quantizer::IndexGrid;
use crate::tensor::{Numerics, Reduction, Tensor};
use crate::weights::fnv1a64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbationMode {
    None,
    ReverseReductions,
    PairwiseTreeReductions,
    FmaToggle,
    RoundTo16Bit,
}

impl PerturbationMode {
    pub const ALL: [PerturbationMode; 5] = [
        PerturbationMode::None,
        PerturbationMode::ReverseReductions,
        PerturbationMode::PairwiseTreeReductions,
        PerturbationMode::FmaToggle,
        PerturbationMode::RoundTo16Bit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationMode::None => "none",
            PerturbationMode::ReverseReductions => "reverse-reductions",
            PerturbationMode::PairwiseTreeReductions => "pairwise-tree-reductions",
            PerturbationMode::FmaToggle => "fma-toggle",
            PerturbationMode::RoundTo16Bit => "round-intermediates-to-16-bit",
        }
    }

    pub fn reduction(self) -> Reduction {
        match self {
            PerturbationMode::None => Reduction::Sequential,
            PerturbationMode::ReverseReductions => Reduction::Reversed,
            PerturbationMode::PairwiseTreeReductions => Reduction::PairwiseTree,
            PerturbationMode::FmaToggle => Reduction::FusedMultiplyAdd,
            PerturbationMode::RoundTo16Bit => Reduction::Half,
        }
    }

    pub fn numerics(self, parallel: bool) -> Numerics {
        Numerics { reduction: self.reduction(), parallel }
    }
}

impl fmt::Display for PerturbationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation mode `{s}`")))
    }
}

/// FNV-1a over every grid in order.
pub fn trace_hash(trace: &[IndexGrid]) -> u64 {
    trace.iter().fold(fnv1a64(b""), |h, g| g.hash_into(h))
}

#[derive(Clone, Debug)]
pub struct PerturbedDecode {
    pub mode: PerturbationMode,
    pub frames: Vec<Tensor>,
    /// Index grids consumed, in decode order.
    pub trace: Vec<IndexGrid>,
    pub bpp: f64,
}

/// Parses `stream` (integer-only) and decodes it with the tensor engine under `mode`.
pub fn run_perturbed_decode(
    stream: &[u8],
    model: &Model,
    mode: PerturbationMode,
    variant: DecoderVariant,
    parallel: bool,
) -> Result<PerturbedDecode> {
    let gops = GopBitstream::parse_all(stream, model.weight_hash())?;
    let decoded = decode_sequence(model, &gops, variant, &mode.numerics(parallel))?;
    Ok(PerturbedDecode {
        mode,
        frames: decoded.frames,
        trace: gops.iter().flat_map(|g| g.frames.iter().map(|f| f.grid.clone())).collect(),
        bpp: sequence_bpp(&gops)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossDecodeRow {
    pub mode: String,
    pub frame: usize,
    pub trace_hash: String,
    /// Against the mode-none reconstruction of the same frame.
    pub psnr: f64,
    pub bpp: f64,
}

#[derive(Clone, Debug)]
pub struct ModeSummary {
    pub mode: PerturbationMode,
    pub trace_hash: u64,
    pub bpp: f64,
    pub frame_psnr: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CrossDecodeReport {
    pub modes: Vec<ModeSummary>,
}

impl CrossDecodeReport {
    pub fn traces_identical(&self) -> bool {
        self.modes.windows(2).all(|w| w[0].trace_hash == w[1].trace_hash)
    }

    pub fn bpp_identical(&self) -> bool {
        self.modes.windows(2).all(|w| w[0].bpp == w[1].bpp)
    }

    pub fn summary(&self, mode: PerturbationMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn rows(&self) -> Vec<CrossDecodeRow> {
        self.modes
            .iter()
            .flat_map(|m| {
                m.frame_psnr.iter().enumerate().map(move |(frame, &psnr)| CrossDecodeRow {
                    mode: m.mode.name().to_string(),
                    frame,
                    trace_hash: format!("{:016x}", m.trace_hash),
                    psnr,
                    bpp: m.bpp,
                })
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        crate::metrics::write_csv(out, &self.rows())
    }
}

/// Decodes `stream` once per mode and compares each against mode none.
pub fn cross_decode_report(
    stream: &[u8],
    model: &Model,
    modes: &[PerturbationMode],
    variant: DecoderVariant,
    parallel: bool,
) -> Result<CrossDecodeReport> {
    if modes.len() < 2 {
        return Err(Error::Config("a cross-decode report needs at least two modes".into()));
    }
    let reference = run_perturbed_decode(stream, model, PerturbationMode::None, variant, parallel)?;
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let run = if mode == PerturbationMode::None {
            reference.clone()
        } else {
            run_perturbed_decode(stream, model, mode, variant, parallel)?
        };
        let frame_psnr = run
            .frames
            .iter()
            .zip(&reference.frames)
            .map(|(a, b)| psnr(a, b))
            .collect::<Result<_>>()?;
        out.push(ModeSummary {
            mode,
            trace_hash: trace_hash(&run.trace),
            bpp: run.bpp,
            frame_psnr,
        });
    }
    Ok(CrossDecodeReport { modes: out })
}
