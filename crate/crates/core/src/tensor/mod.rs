//! Minimal deterministic tensor engine.
//!
//! Every op takes an explicit [`Numerics`] policy. Under the default policy a
//! given build is bit-reproducible: each reduction runs in the order the op
//! documents, and any parallelism fans out over independent outputs only.

mod attention;
mod conv;
mod numerics;

pub use attention::{linear, scaled_dot_attention};
pub use conv::{
    conv2d, conv_macs, downsample2x, leaky_relu, resblock, upsample2x, ConvSpec, ResBlock,
    LEAKY_SLOPE,
};
pub use numerics::{pairwise_sum, Numerics, Reduction};
pub(crate) use numerics::{for_each_chunk, map_indices};

use crate::error::{shape_err, Result};

/// Dense row-major f32 array, innermost dimension last.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor by evaluating `f` at each flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected [C,H,W], got {:?}", self.shape)),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected [N,D], got {:?}", self.shape)),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Elementwise `self + other`, rounded per policy.
    pub fn add(&self, other: &Tensor, num: &Numerics) -> Result<Tensor> {
        self.zip_with(other, num, |a, b| a + b)
    }

    /// Elementwise `self - other`, rounded per policy.
    pub fn sub(&self, other: &Tensor, num: &Numerics) -> Result<Tensor> {
        self.zip_with(other, num, |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor, num: &Numerics, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "elementwise op on {:?} and {:?}",
                self.shape,
                other.shape
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| num.round(f(num.round(a), num.round(b))))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy with every value passed through the policy's storage rounding.
    pub fn rounded(&self, num: &Numerics) -> Tensor {
        let mut t = self.clone();
        num.round_slice(&mut t.data);
        t
    }

    /// Channels `[from, to)` of a `[C,H,W]` tensor.
    pub fn channel_range(&self, from: usize, to: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if from > to || to > c {
            return Err(shape_err!("channel range {from}..{to} of {c}"));
        }
        let plane = h * w;
        Tensor::new(
            vec![to - from, h, w],
            self.data[from * plane..to * plane].to_vec(),
        )
    }

    /// Concatenates `[C_i,H,W]` tensors along channels.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?
            .dims3()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err!("concat extents {ph}x{pw} vs {h}x{w}"));
            }
            c_total += c;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![c_total, h, w], data)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err!("mse of {:?} and {:?}", self.shape, other.shape));
        }
        let se: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(se / self.data.len().max(1) as f64)
    }
}
