//! Vector quantization: nearest-codeword search, the split/merge
//! multi-codebook layer, and the three-stage residual hierarchy.
//!
//! Stage `s` (1-based) runs at `1/2^s` of the latent resolution:
//!
//! ```text
//! z1 = down1(y)          (i1, ẑ1) = mcvq(z1)     r1 = z1 - ẑ1
//! z2 = down2(r1)         (i2, ẑ2) = mcvq(z2)     r2 = z2 - ẑ2
//! z3 = down3(r2)         (i3, ẑ3) = mcvq(z3)
//! ŷ  = up1(up2(up3(ẑ3) + ẑ2) + ẑ1)
//! ```
//!
//! Each residual is taken at the current stage's resolution and then
//! downsampled by the next stage. The encoder returns the ŷ produced by the
//! same reconstruction routine the decoder runs.

mod codebook;
mod kmeans;

pub use codebook::{index_bits, Codebook, MAX_CODEBOOK_SIZE};
pub use kmeans::{kmeans, FitOptions, FitReport, HalfFit, KMeans};

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{fill_normal, ConvPlan, Init};
use crate::tensor::{downsample2x, map_indices, upsample2x, ConvSpec, Numerics, Tensor};
use crate::weights::{fnv1a64_extend, WeightBundle};

pub const STAGES: usize = 3;
pub const BOOKS_PER_STAGE: usize = 2;

/// Codebook sizes `[K1, K2, K3]` of the three stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CodebookSpec {
    pub sizes: [usize; STAGES],
}

impl CodebookSpec {
    pub const KEYFRAME: CodebookSpec = CodebookSpec { sizes: [8192, 2048, 512] };
    pub const PREDICTED_HIGH: CodebookSpec = CodebookSpec { sizes: [8192, 2048, 512] };
    pub const PREDICTED_MID: CodebookSpec = CodebookSpec { sizes: [64, 2048, 512] };
    pub const PREDICTED_LOW: CodebookSpec = CodebookSpec { sizes: [8, 2048, 512] };

    pub fn new(sizes: [usize; STAGES]) -> Result<Self> {
        if sizes.iter().any(|&k| k == 0 || k > MAX_CODEBOOK_SIZE) {
            return Err(Error::Config(format!(
                "codebook sizes must be in 1..={MAX_CODEBOOK_SIZE}, got {sizes:?}"
            )));
        }
        Ok(CodebookSpec { sizes })
    }

    /// Named predicted-frame rate point.
    pub fn rate_point(name: &str) -> Option<Self> {
        match name {
            "low" => Some(Self::PREDICTED_LOW),
            "mid" => Some(Self::PREDICTED_MID),
            "high" => Some(Self::PREDICTED_HIGH),
            _ => None,
        }
    }

    pub fn index_bits(&self) -> [u32; STAGES] {
        self.sizes.map(index_bits)
    }
}

impl fmt::Display for CodebookSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.sizes;
        write!(f, "{a},{b},{c}")
    }
}

impl FromStr for CodebookSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(spec) = Self::rate_point(s.trim()) {
            return Ok(spec);
        }
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad codebook spec `{s}`")))?;
        let sizes: [usize; STAGES] = parts
            .try_into()
            .map_err(|_| Error::Config(format!("codebook spec `{s}` needs {STAGES} sizes")))?;
        CodebookSpec::new(sizes)
    }
}

/// Grid extents of each stage for an `h`×`w` latent.
pub fn stage_extents(h: usize, w: usize) -> Result<[(usize, usize); STAGES]> {
    let f = 1 << STAGES;
    if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
        return Err(shape_err!("latent {h}x{w} is not divisible by {f}"));
    }
    Ok([(h / 2, w / 2), (h / 4, w / 4), (h / 8, w / 8)])
}

/// Indices of one stage: one raster-order plane per codebook.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StageIndices {
    pub height: usize,
    pub width: usize,
    pub planes: [Vec<u32>; BOOKS_PER_STAGE],
}

/// Everything transmitted for one frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexGrid {
    pub stages: Vec<StageIndices>,
}

impl IndexGrid {
    /// All-zero grid for an `h`×`w` latent.
    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Ok(IndexGrid {
            stages: stage_extents(h, w)?
                .iter()
                .map(|&(sh, sw)| StageIndices {
                    height: sh,
                    width: sw,
                    planes: [vec![0; sh * sw], vec![0; sh * sw]],
                })
                .collect(),
        })
    }

    /// Latent extents this grid decodes to.
    pub fn latent_extents(&self) -> Result<(usize, usize)> {
        let first = self
            .stages
            .first()
            .ok_or_else(|| Error::CorruptStream("index grid has no stages".into()))?;
        let (h, w) = (first.height * 2, first.width * 2);
        let expected = stage_extents(h, w).map_err(|e| Error::CorruptStream(e.to_string()))?;
        if self.stages.len() != STAGES
            || self
                .stages
                .iter()
                .zip(expected)
                .any(|(s, (eh, ew))| (s.height, s.width) != (eh, ew) || s.planes.iter().any(|p| p.len() != eh * ew))
        {
            return Err(Error::CorruptStream("inconsistent index grid extents".into()));
        }
        Ok((h, w))
    }

    /// Every index below its codebook size.
    pub fn validate(&self, spec: &CodebookSpec) -> Result<()> {
        self.latent_extents()?;
        for (s, (stage, &k)) in self.stages.iter().zip(&spec.sizes).enumerate() {
            for plane in &stage.planes {
                if let Some(&bad) = plane.iter().find(|&&i| i as usize >= k) {
                    return Err(Error::CorruptStream(format!(
                        "stage {} index {bad} out of range for K={k}",
                        s + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn index_count(&self) -> usize {
        self.stages.iter().map(|s| s.planes.iter().map(Vec::len).sum::<usize>()).sum()
    }

    /// FNV-1a over extents and indices, continuing from `seed`.
    pub fn hash_into(&self, seed: u64) -> u64 {
        let mut h = seed;
        for s in &self.stages {
            h = fnv1a64_extend(h, &(s.height as u32).to_le_bytes());
            h = fnv1a64_extend(h, &(s.width as u32).to_le_bytes());
            for p in &s.planes {
                for i in p {
                    h = fnv1a64_extend(h, &i.to_le_bytes());
                }
            }
        }
        h
    }
}

fn split_dims(c: usize, books: &[Codebook; BOOKS_PER_STAGE]) -> Result<usize> {
    if !c.is_multiple_of(BOOKS_PER_STAGE) {
        return Err(Error::Config(format!("channel count {c} is not even")));
    }
    let half = c / BOOKS_PER_STAGE;
    if books.iter().any(|b| b.dim() != half) {
        return Err(Error::Config(format!(
            "codebook dims {:?} do not match half width {half}",
            books.iter().map(Codebook::dim).collect::<Vec<_>>()
        )));
    }
    Ok(half)
}

/// Split `z` along channels, quantize each half with its own codebook at every
/// position, merge the codewords back in channel order.
pub fn mcvq_quantize(
    z: &Tensor,
    books: &[Codebook; BOOKS_PER_STAGE],
    parallel: bool,
) -> Result<([Vec<u32>; BOOKS_PER_STAGE], Tensor)> {
    let (c, h, w) = z.dims3()?;
    let half = split_dims(c, books)?;
    let hw = h * w;
    let data = z.data();
    let picks = map_indices(hw, parallel, |p| {
        let mut v = vec![0.0f32; half];
        let mut out = [0u32; BOOKS_PER_STAGE];
        for (i, book) in books.iter().enumerate() {
            for (j, slot) in v.iter_mut().enumerate() {
                *slot = data[(i * half + j) * hw + p];
            }
            out[i] = book.nearest(&v) as u32;
        }
        out
    });
    let planes = [
        picks.iter().map(|p| p[0]).collect::<Vec<_>>(),
        picks.iter().map(|p| p[1]).collect::<Vec<_>>(),
    ];
    let zhat = mcvq_dequantize(&planes, books, h, w)?;
    Ok((planes, zhat))
}

/// Gathers codewords for two index planes into a `[c,h,w]` tensor.
pub fn mcvq_dequantize(
    planes: &[Vec<u32>; BOOKS_PER_STAGE],
    books: &[Codebook; BOOKS_PER_STAGE],
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let half = books[0].dim();
    let c = half * BOOKS_PER_STAGE;
    split_dims(c, books)?;
    let hw = h * w;
    let mut out = vec![0.0f32; c * hw];
    for (i, (plane, book)) in planes.iter().zip(books).enumerate() {
        if plane.len() != hw {
            return Err(Error::CorruptStream(format!(
                "index plane has {} entries, expected {hw}",
                plane.len()
            )));
        }
        for (p, &s) in plane.iter().enumerate() {
            let word = book.dequantize(s as usize)?;
            for (j, &v) in word.iter().enumerate() {
                out[(i * half + j) * hw + p] = v;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[derive(Clone, Debug)]
pub struct QuantizerStage {
    pub down: ConvSpec,
    pub up: ConvSpec,
    pub books: [Codebook; BOOKS_PER_STAGE],
}

/// One three-stage quantizer with its resampling layers and codebooks.
#[derive(Clone, Debug)]
pub struct QuantizerSet {
    prefix: String,
    spec: CodebookSpec,
    channels: usize,
    stages: Vec<QuantizerStage>,
}

fn codebook_name(prefix: &str, stage: usize, half: usize) -> String {
    format!("{prefix}.cb.stage{stage}.half{half}")
}

fn resample_plans(prefix: &str, channels: usize, stage: usize) -> [ConvPlan; 2] {
    let exact = Init::PassThrough { noise: 0.0 };
    [
        ConvPlan::down(format!("{prefix}.q.stage{stage}.down"), channels, channels, exact),
        ConvPlan::same3(format!("{prefix}.q.stage{stage}.up"), channels, channels, exact),
    ]
}

impl QuantizerSet {
    /// Writes resamplers (2×2 average down, nearest + identity up) and
    /// Gaussian codebooks of std `codeword_std`.
    pub(crate) fn initialize(
        prefix: &str,
        channels: usize,
        spec: &CodebookSpec,
        codeword_std: f32,
        rng: &mut ChaCha8Rng,
        b: &mut WeightBundle,
    ) {
        for (s, &k) in (1..=STAGES).zip(&spec.sizes) {
            for plan in resample_plans(prefix, channels, s) {
                plan.initialize(rng, b);
            }
            for i in 0..BOOKS_PER_STAGE {
                let mut words = Tensor::zeros(&[k, channels / BOOKS_PER_STAGE]);
                fill_normal(words.data_mut(), codeword_std, rng);
                b.insert(codebook_name(prefix, s, i), words);
            }
        }
    }

    pub fn from_bundle(prefix: &str, channels: usize, spec: &CodebookSpec, b: &WeightBundle) -> Result<Self> {
        if !channels.is_multiple_of(BOOKS_PER_STAGE) {
            return Err(Error::Config(format!("latent channels {channels} are not even")));
        }
        let half = channels / BOOKS_PER_STAGE;
        let stages = (1..=STAGES)
            .zip(&spec.sizes)
            .map(|(s, &k)| {
                let [down, up] = resample_plans(prefix, channels, s);
                let book = |i| -> Result<Codebook> {
                    Codebook::new(b.get_shaped(&codebook_name(prefix, s, i), &[k, half])?.clone())
                };
                Ok(QuantizerStage {
                    down: down.load(b)?,
                    up: up.load(b)?,
                    books: [book(0)?, book(1)?],
                })
            })
            .collect::<Result<_>>()?;
        Ok(QuantizerSet {
            prefix: prefix.to_string(),
            spec: *spec,
            channels,
            stages,
        })
    }

    /// Stores this set's codebooks back into `b`.
    pub fn write_codebooks(&self, b: &mut WeightBundle) {
        for (s, stage) in (1..=STAGES).zip(&self.stages) {
            for (i, book) in stage.books.iter().enumerate() {
                b.insert(codebook_name(&self.prefix, s, i), book.words().clone());
            }
        }
    }

    pub fn spec(&self) -> &CodebookSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stages(&self) -> &[QuantizerStage] {
        &self.stages
    }

    /// Multi-stage quantization of a `[n_c,h,w]` latent.
    pub fn quantize(&self, y: &Tensor, num: &Numerics) -> Result<(IndexGrid, Tensor)> {
        let (c, h, w) = y.dims3()?;
        if c != self.channels {
            return Err(shape_err!("latent has {c} channels, quantizer expects {}", self.channels));
        }
        stage_extents(h, w)?;
        let mut residual = y.clone();
        let mut grid = IndexGrid { stages: Vec::with_capacity(STAGES) };
        let mut quantized = Vec::with_capacity(STAGES);
        for stage in &self.stages {
            let z = downsample2x(&residual, &stage.down, num)?;
            let (planes, zhat) = mcvq_quantize(&z, &stage.books, num.parallel)?;
            let (_, sh, sw) = z.dims3()?;
            grid.stages.push(StageIndices { height: sh, width: sw, planes });
            residual = z.sub(&zhat, num)?;
            quantized.push(zhat);
        }
        let yhat = self.reconstruct(&quantized, num)?;
        Ok((grid, yhat))
    }

    /// Decodes a full index grid.
    pub fn dequantize(&self, grid: &IndexGrid, num: &Numerics) -> Result<Tensor> {
        self.dequantize_stages(grid, STAGES, num)
    }

    /// Decodes using only the first `used` stages (1..=3).
    pub fn dequantize_stages(&self, grid: &IndexGrid, used: usize, num: &Numerics) -> Result<Tensor> {
        if !(1..=STAGES).contains(&used) {
            return Err(Error::Config(format!("stage count {used} outside 1..={STAGES}")));
        }
        grid.latent_extents()?;
        let quantized = grid
            .stages
            .iter()
            .zip(&self.stages)
            .take(used)
            .map(|(si, stage)| mcvq_dequantize(&si.planes, &stage.books, si.height, si.width))
            .collect::<Result<Vec<_>>>()?;
        self.reconstruct(&quantized, num)
    }

    /// `up1(up2(up3(ẑ3) + ẑ2) + ẑ1)`, truncated to however many stages are given.
    fn reconstruct(&self, quantized: &[Tensor], num: &Numerics) -> Result<Tensor> {
        let n = quantized.len();
        let mut acc = quantized[n - 1].clone();
        for s in (1..n).rev() {
            acc = upsample2x(&acc, &self.stages[s].up, num)?.add(&quantized[s - 1], num)?;
        }
        upsample2x(&acc, &self.stages[0].up, num)
    }

    /// Energy `Σ r²` of the residual left after each stage.
    pub fn stage_residual_energies(&self, y: &Tensor, num: &Numerics) -> Result<Vec<f64>> {
        let mut residual = y.clone();
        let mut out = Vec::with_capacity(STAGES);
        for stage in &self.stages {
            let z = downsample2x(&residual, &stage.down, num)?;
            let (_, zhat) = mcvq_quantize(&z, &stage.books, num.parallel)?;
            residual = z.sub(&zhat, num)?;
            out.push(residual.sum_squares());
        }
        Ok(out)
    }

    /// Refits every codebook with k-means, stage by stage on the previous
    /// stage's residuals. Resampling layers are left untouched.
    pub fn fit(&mut self, latents: &[Tensor], opts: &FitOptions) -> Result<FitReport> {
        if latents.is_empty() {
            return Err(Error::Config("codebook fitting needs at least one latent".into()));
        }
        let num = Numerics::default();
        let half = self.channels / BOOKS_PER_STAGE;
        let mut residuals = latents.to_vec();
        let mut report = FitReport::default();
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let zs = residuals
                .iter()
                .map(|r| downsample2x(r, &stage.down, &num))
                .collect::<Result<Vec<_>>>()?;
            let mut fits = Vec::with_capacity(BOOKS_PER_STAGE);
            for i in 0..BOOKS_PER_STAGE {
                let mut data = Vec::new();
                for z in &zs {
                    let (_, h, w) = z.dims3()?;
                    let hw = h * w;
                    for p in 0..hw {
                        for j in 0..half {
                            data.push(z.data()[(i * half + j) * hw + p]);
                        }
                    }
                }
                let stage_opts = FitOptions {
                    seed: opts.seed ^ ((s as u64) << 8 | i as u64),
                    ..*opts
                };
                let km = kmeans(&data, half, self.spec.sizes[s], &stage_opts)?;
                stage.books[i] = Codebook::new(km.centroids.clone())?;
                fits.push(HalfFit::from(&km));
            }
            report.stages.push(fits);
            residuals = zs
                .iter()
                .map(|z| {
                    let (_, zhat) = mcvq_quantize(z, &stage.books, num.parallel)?;
                    z.sub(&zhat, &num)
                })
                .collect::<Result<_>>()?;
        }
        Ok(report)
    }
}
