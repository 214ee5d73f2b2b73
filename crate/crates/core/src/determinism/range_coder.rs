//! Minimal 32-bit carry-less range coder over a static discretized Gaussian.
//!
//! Exists only to show what happens when the decoder's probability table is
//! computed on a machine whose floating point differs slightly from the
//! encoder's: the integer frequency tables disagree and decoding desyncs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;
/// Frequency total of every table.
pub const TOTAL_FREQ: u32 = 1 << 16;

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, out: Vec::new() }
    }
}

impl RangeEncoder {
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        self.range /= total;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder { low: 0, range: u32::MAX, code: 0, input, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative frequency the next symbol falls in. Must be followed by
    /// [`RangeDecoder::decode`].
    pub fn target(&mut self, total: u32) -> u32 {
        self.range /= total;
        (self.code.wrapping_sub(self.low) / self.range).min(total - 1)
    }

    pub fn decode(&mut self, cum: u32, freq: u32) {
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}

/// Probability model over symbols `-R..=R`: a real-valued CDF at the
/// `A + 1` bin edges (`A = 2R + 1`), with the Gaussian tails folded into the
/// two outermost bins.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedGaussian {
    half_range: i32,
    cdf: Vec<f64>,
}

impl DiscretizedGaussian {
    pub fn new(scale: f64, half_range: i32) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || half_range < 1 {
            return Err(Error::Model(format!("bad Gaussian model scale={scale} half_range={half_range}")));
        }
        let normal = StatNormal::new(0.0, scale).map_err(|e| Error::Model(e.to_string()))?;
        let a = 2 * half_range as usize + 1;
        let cdf = (0..=a)
            .map(|j| match j {
                0 => 0.0,
                j if j == a => 1.0,
                j => normal.cdf(j as f64 - half_range as f64 - 0.5),
            })
            .collect();
        Self::from_cdf(half_range, cdf)
    }

    /// Validates a CDF at the bin edges: starts at 0, ends at 1, never decreases.
    pub fn from_cdf(half_range: i32, cdf: Vec<f64>) -> Result<Self> {
        let a = 2 * half_range.max(0) as usize + 1;
        if cdf.len() != a + 1 {
            return Err(Error::Model(format!("CDF needs {} edges, got {}", a + 1, cdf.len())));
        }
        if a as u32 >= TOTAL_FREQ {
            return Err(Error::Model(format!("{a} symbols do not fit a total of {TOTAL_FREQ}")));
        }
        if cdf[0] != 0.0 || cdf[a] != 1.0 || cdf.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("CDF must run from 0 to 1".into()));
        }
        if let Some(j) = cdf.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Model(format!("CDF decreases at edge {}", j + 1)));
        }
        Ok(DiscretizedGaussian { half_range, cdf })
    }

    pub fn half_range(&self) -> i32 {
        self.half_range
    }

    pub fn alphabet(&self) -> usize {
        self.cdf.len() - 1
    }

    /// The same model after every interior edge moves by `eps·u`, `u`
    /// uniform in `[-1, 1]` drawn from `seed`.
    pub fn perturbed(&self, eps: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = self.alphabet();
        let cdf = self
            .cdf
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                if j == 0 || j == a {
                    v
                } else {
                    v + eps * rng.random_range(-1.0..=1.0)
                }
            })
            .collect();
        Self::from_cdf(self.half_range, cdf)
    }

    /// Integer cumulative table, `cum[j] = round(F_j·(T − A)) + j`, so every
    /// symbol keeps a frequency of at least one.
    pub fn table(&self) -> Vec<u32> {
        let a = self.alphabet();
        let scale = (TOTAL_FREQ as usize - a) as f64;
        self.cdf
            .iter()
            .enumerate()
            .map(|(j, &f)| (f * scale).round() as u32 + j as u32)
            .collect()
    }
}

/// `n` Gaussian samples of std `scale`, rounded and clamped to `-R..=R`.
pub fn gaussian_symbols(n: usize, scale: f64, half_range: i32, seed: u64) -> Vec<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).expect("positive scale");
    (0..n)
        .map(|_| {
            let v: f64 = normal.sample(&mut rng);
            (v.round() as i32).clamp(-half_range, half_range)
        })
        .collect()
}

pub fn encode_symbols(symbols: &[i32], table: &[u32], half_range: i32) -> Result<Vec<u8>> {
    let total = *table.last().expect("non-empty table");
    let mut enc = RangeEncoder::default();
    for &s in symbols {
        if s.abs() > half_range {
            return Err(Error::Model(format!("symbol {s} outside -{half_range}..={half_range}")));
        }
        let j = (s + half_range) as usize;
        enc.encode(table[j], table[j + 1] - table[j], total);
    }
    Ok(enc.finish())
}

pub fn decode_symbols(bytes: &[u8], n: usize, table: &[u32], half_range: i32) -> Vec<i32> {
    let total = *table.last().expect("non-empty table");
    let mut dec = RangeDecoder::new(bytes);
    (0..n)
        .map(|_| {
            let t = dec.target(total);
            let j = table.partition_point(|&c| c <= t) - 1;
            dec.decode(table[j], table[j + 1] - table[j]);
            j as i32 - half_range
        })
        .collect()
}

/// Outcome of one encode/decode round trip under a perturbed decoder model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcReport {
    pub symbols: usize,
    pub encoded_bytes: usize,
    /// Position of the first wrongly decoded symbol.
    pub first_mismatch: Option<usize>,
}

impl AcReport {
    pub fn desynced(&self) -> bool {
        self.first_mismatch.is_some()
    }
}

/// Encodes `symbols` with `model`, decodes with `model` perturbed by `eps`
/// (seeded by `seed`), and reports where the two first disagree.
pub fn ac_roundtrip_demo(symbols: &[i32], model: &DiscretizedGaussian, eps: f64, seed: u64) -> Result<AcReport> {
    let decoder_model = if eps == 0.0 { model.clone() } else { model.perturbed(eps, seed)? };
    let bytes = encode_symbols(symbols, &model.table(), model.half_range())?;
    let decoded = decode_symbols(&bytes, symbols.len(), &decoder_model.table(), model.half_range());
    Ok(AcReport {
        symbols: symbols.len(),
        encoded_bytes: bytes.len(),
        first_mismatch: symbols.iter().zip(&decoded).position(|(a, b)| a != b),
    })
}
