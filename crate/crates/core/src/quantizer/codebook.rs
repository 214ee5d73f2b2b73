use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Largest codebook the index format supports.
pub const MAX_CODEBOOK_SIZE: usize = 1 << 16;

/// Bits needed to transmit one index into a codebook of `size` words.
pub fn index_bits(size: usize) -> u32 {
    let k = size.max(2);
    usize::BITS - (k - 1).leading_zeros()
}

/// Codeword table `Z ∈ R^{K×d}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    words: Tensor,
    /// `[d][K]` copy so a search streams every codeword per channel.
    by_channel: Vec<f32>,
}

const SEARCH_BLOCK: usize = 64;

impl Codebook {
    pub fn new(words: Tensor) -> Result<Self> {
        let (k, d) = words.dims2()?;
        if k == 0 || d == 0 {
            return Err(Error::Config(format!("codebook must be non-empty, got {k}x{d}")));
        }
        if k > MAX_CODEBOOK_SIZE {
            return Err(Error::Config(format!("codebook size {k} exceeds {MAX_CODEBOOK_SIZE}")));
        }
        if !words.is_finite() {
            return Err(Error::Config("codebook has non-finite codewords".into()));
        }
        let mut by_channel = vec![0.0f32; k * d];
        for (i, row) in words.data().chunks(d).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                by_channel[j * k + i] = v;
            }
        }
        Ok(Codebook { words, by_channel })
    }

    pub fn size(&self) -> usize {
        self.words.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.words.shape()[1]
    }

    pub fn words(&self) -> &Tensor {
        &self.words
    }

    pub fn index_bits(&self) -> u32 {
        index_bits(self.size())
    }

    /// Nearest codeword under squared Euclidean distance.
    ///
    /// Each distance is `Σ_j (v[j] - z[j])²` summed over channels in ascending
    /// order starting from zero, with no expansion into dot products. Ties go to
    /// the lowest index (exact float equality).
    pub fn quantize(&self, v: &[f32]) -> Result<usize> {
        if v.len() != self.dim() {
            return Err(shape_err!(
                "vector of dim {} against codebook of dim {}",
                v.len(),
                self.dim()
            ));
        }
        Ok(self.nearest(v))
    }

    pub(crate) fn nearest(&self, v: &[f32]) -> usize {
        let k = self.size();
        let mut best = 0usize;
        let mut best_dist = f32::INFINITY;
        let mut acc = [0.0f32; SEARCH_BLOCK];
        let mut start = 0;
        while start < k {
            let len = SEARCH_BLOCK.min(k - start);
            let acc = &mut acc[..len];
            acc.fill(0.0);
            for (j, &x) in v.iter().enumerate() {
                let col = &self.by_channel[j * k + start..j * k + start + len];
                for (a, &z) in acc.iter_mut().zip(col) {
                    let t = x - z;
                    *a += t * t;
                }
            }
            for (i, &dist) in acc.iter().enumerate() {
                if dist < best_dist {
                    best_dist = dist;
                    best = start + i;
                }
            }
            start += len;
        }
        best
    }

    /// Table lookup of codeword `s`. Returns a view into the table itself.
    pub fn dequantize(&self, s: usize) -> Result<&[f32]> {
        if s >= self.size() {
            return Err(Error::CorruptStream(format!(
                "index {s} out of range for codebook of size {}",
                self.size()
            )));
        }
        let d = self.dim();
        Ok(&self.words.data()[s * d..(s + 1) * d])
    }
}
