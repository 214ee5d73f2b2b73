//! Evaluation policy for every floating-point reduction in the engine.
//!
//! A [`Numerics`] value is threaded explicitly through every op. The default
//! policy (`Reduction::Sequential`) sums terms left to right in the order each
//! op documents; the other reductions exist so that platform divergence can be
//! emulated on a single machine.

use half::f16;

/// How a reduction over a list of terms is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Reduction {
    /// Left-to-right summation, separate multiply and add.
    #[default]
    Sequential,
    /// Right-to-left summation.
    Reversed,
    /// Balanced binary tree over the terms.
    PairwiseTree,
    /// Left-to-right with fused multiply-add for every product term.
    FusedMultiplyAdd,
    /// Left-to-right in f32, but every operand and every op output is rounded
    /// through IEEE binary16 (half-precision storage, single-precision math).
    Half,
}

impl Reduction {
    pub const ALL: [Reduction; 5] = [
        Reduction::Sequential,
        Reduction::Reversed,
        Reduction::PairwiseTree,
        Reduction::FusedMultiplyAdd,
        Reduction::Half,
    ];
}

/// Policy handle passed to every tensor op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Numerics {
    pub reduction: Reduction,
    /// Fan out over independent outputs (never inside a reduction). Ignored
    /// when the crate is built without the `parallel` feature.
    pub parallel: bool,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            reduction: Reduction::Sequential,
            parallel: cfg!(feature = "parallel"),
        }
    }
}

impl Numerics {
    pub fn with_reduction(reduction: Reduction) -> Self {
        Numerics {
            reduction,
            ..Default::default()
        }
    }

    pub fn sequential_only(self) -> Self {
        Numerics {
            parallel: false,
            ..self
        }
    }

    /// Storage rounding: identity unless the policy is `Half`.
    #[inline]
    pub fn round(&self, x: f32) -> f32 {
        match self.reduction {
            Reduction::Half => f16::from_f32(x).to_f32(),
            _ => x,
        }
    }

    pub fn round_slice(&self, xs: &mut [f32]) {
        if self.reduction == Reduction::Half {
            for x in xs {
                *x = f16::from_f32(*x).to_f32();
            }
        }
    }

    /// Σ a[i]·b[i] under the policy.
    pub fn dot(&self, a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        match self.reduction {
            Reduction::Sequential | Reduction::Half => {
                let mut acc = 0.0f32;
                for (x, y) in a.iter().zip(b) {
                    acc += x * y;
                }
                acc
            }
            Reduction::Reversed => {
                let mut acc = 0.0f32;
                for (x, y) in a.iter().zip(b).rev() {
                    acc += x * y;
                }
                acc
            }
            Reduction::FusedMultiplyAdd => {
                let mut acc = 0.0f32;
                for (x, y) in a.iter().zip(b) {
                    acc = x.mul_add(*y, acc);
                }
                acc
            }
            Reduction::PairwiseTree => {
                let products: Vec<f32> = a.iter().zip(b).map(|(x, y)| x * y).collect();
                pairwise_sum(&products)
            }
        }
    }

    /// Σ xs[i] under the policy.
    pub fn sum(&self, xs: &[f32]) -> f32 {
        match self.reduction {
            Reduction::Sequential | Reduction::Half | Reduction::FusedMultiplyAdd => {
                let mut acc = 0.0f32;
                for x in xs {
                    acc += x;
                }
                acc
            }
            Reduction::Reversed => {
                let mut acc = 0.0f32;
                for x in xs.iter().rev() {
                    acc += x;
                }
                acc
            }
            Reduction::PairwiseTree => pairwise_sum(xs),
        }
    }
}

/// Balanced tree sum; the split point is `len / 2`.
pub fn pairwise_sum(xs: &[f32]) -> f32 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Runs `f(index, chunk)` over fixed-size chunks, on the rayon pool when allowed.
pub(crate) fn for_each_chunk<F>(data: &mut [f32], chunk: usize, parallel: bool, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = parallel;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, on the rayon pool when allowed. Output order is the index order.
pub(crate) fn map_indices<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}
