//! Offline codebook fitting: k-means++ seeding followed by Lloyd iterations.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codebook::Codebook;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once `|inertia_prev - inertia| / inertia_prev` falls below this.
    pub rel_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            seed: 0x5eed,
            max_iters: 50,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeans {
    /// `[K, d]`
    pub centroids: Tensor,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
    /// Fewer distinct vectors than centroids; the surplus centroids duplicate
    /// existing data vectors.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfFit {
    pub inertia: f64,
    pub iterations: usize,
    pub degenerate: bool,
}

impl From<&KMeans> for HalfFit {
    fn from(k: &KMeans) -> Self {
        HalfFit {
            inertia: k.inertia,
            iterations: k.iterations,
            degenerate: k.degenerate,
        }
    }
}

/// Per stage, per half.
#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub stages: Vec<Vec<HalfFit>>,
}

impl FitReport {
    pub fn degenerate(&self) -> bool {
        self.stages.iter().flatten().any(|h| h.degenerate)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = x as f64 - y as f64;
            t * t
        })
        .sum()
}

/// Clusters `data` (row-major, `dim` columns) into `k` centroids.
pub fn kmeans(data: &[f32], dim: usize, k: usize, opts: &FitOptions) -> Result<KMeans> {
    if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
        return Err(Error::Config(format!(
            "k-means needs a non-empty {dim}-column batch, got {} values",
            data.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    let rows: Vec<&[f32]> = data.chunks(dim).collect();
    let n = rows.len();

    let mut seen = HashSet::new();
    let distinct: Vec<usize> = (0..n)
        .filter(|&i| seen.insert(rows[i].iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();
    if distinct.len() < k {
        let mut centroids = Vec::with_capacity(k * dim);
        for j in 0..k {
            centroids.extend_from_slice(rows[distinct[j % distinct.len()]]);
        }
        return Ok(KMeans {
            centroids: Tensor::new(vec![k, dim], centroids)?,
            inertia: 0.0,
            iterations: 0,
            degenerate: true,
        });
    }

    // k-means++ seeding
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
    let first = distinct[rng.random_range(0..distinct.len())];
    centroids.extend_from_slice(rows[first]);
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, rows[first])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            while d2[chosen] == 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            // cannot happen with k <= distinct, kept for safety against rounding
            distinct[rng.random_range(0..distinct.len())]
        };
        let c = rows[pick].to_vec();
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &c));
        }
        centroids.extend_from_slice(&c);
    }

    // Lloyd iterations
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    let mut assign = vec![0usize; n];
    for _ in 0..opts.max_iters {
        iterations += 1;
        let book = Codebook::new(Tensor::new(vec![k, dim], centroids.clone())?)?;
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        let mut cur = 0.0;
        for (i, r) in rows.iter().enumerate() {
            let a = book.nearest(r);
            assign[i] = a;
            counts[a] += 1;
            cur += sq_dist(r, &centroids[a * dim..(a + 1) * dim]);
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(r.iter()) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
                }
            }
        }
        let prev = inertia;
        inertia = cur;
        if prev.is_finite() && (prev == 0.0 || (prev - cur).abs() / prev < opts.rel_tol) {
            break;
        }
    }
    let final_inertia: f64 = rows
        .iter()
        .zip(&assign)
        .map(|(r, &a)| sq_dist(r, &centroids[a * dim..(a + 1) * dim]))
        .sum();
    Ok(KMeans {
        centroids: Tensor::new(vec![k, dim], centroids)?,
        inertia: final_inertia.min(inertia),
        iterations,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn batch_mse(data: &[f32], dim: usize, centroids: &Tensor) -> f64 {
        let book = Codebook::new(centroids.clone()).unwrap();
        let rows: Vec<&[f32]> = data.chunks(dim).collect();
        rows.iter()
            .map(|r| {
                let i = book.nearest(r);
                sq_dist(r, book.dequantize(i).unwrap())
            })
            .sum::<f64>()
            / data.len() as f64
    }

    #[test]
    fn single_centroid_is_the_mean() {
        let data = [1.0f32, 2.0, 3.0, 6.0, 5.0, -2.0];
        let km = kmeans(&data, 2, 1, &FitOptions::default()).unwrap();
        let c = km.centroids.data();
        assert!((c[0] - 3.0).abs() < 1e-6 && (c[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn two_separated_clusters_recover_their_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0f32, 0.1).unwrap();
        let centres = [[-5.0f32, 1.0, 0.0], [4.0, -3.0, 2.0]];
        let mut data = Vec::new();
        for i in 0..400 {
            for v in centres[i % 2] {
                data.push(v + noise.sample(&mut rng));
            }
        }
        // Lloyd oracle: with the clusters this far apart, the fixed point is
        // exactly the per-cluster sample mean.
        let means: Vec<Vec<f64>> = (0..2)
            .map(|c| {
                (0..3)
                    .map(|j| (0..200).map(|i| data[(2 * i + c) * 3 + j] as f64).sum::<f64>() / 200.0)
                    .collect()
            })
            .collect();
        let km = kmeans(&data, 3, 2, &FitOptions::default()).unwrap();
        for m in &means {
            let hit = km.centroids.data().chunks(3).any(|c| c.iter().zip(m).all(|(&a, &b)| (a as f64 - b).abs() < 1e-4));
            assert!(hit, "no centroid near {m:?}: {:?}", km.centroids.data());
        }
    }

    #[test]
    fn fitting_halves_the_error_of_random_codewords() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blob = Normal::new(0.0f32, 0.3).unwrap();
        let centre = Normal::new(0.0f32, 2.0).unwrap();
        let dim = 4;
        let centres: Vec<f32> = (0..16 * dim).map(|_| centre.sample(&mut rng)).collect();
        let data: Vec<f32> = (0..2000 * dim)
            .map(|i| centres[((i / dim) % 16) * dim + i % dim] + blob.sample(&mut rng))
            .collect();
        let random_init = Tensor::from_fn(&[16, dim], |_| centre.sample(&mut rng));
        let km = kmeans(&data, dim, 16, &FitOptions::default()).unwrap();
        let before = batch_mse(&data, dim, &random_init);
        let after = batch_mse(&data, dim, &km.centroids);
        assert!(after <= 0.5 * before, "{after} vs {before}");
    }

    #[test]
    fn too_few_distinct_vectors_duplicates() {
        let data = [1.0f32, 1.0, 2.0, 2.0, 1.0, 1.0];
        let km = kmeans(&data, 2, 4, &FitOptions::default()).unwrap();
        assert!(km.degenerate);
        assert_eq!(km.centroids.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn seeded_fits_are_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = kmeans(&data, 3, 8, &FitOptions::default()).unwrap();
        let b = kmeans(&data, 3, 8, &FitOptions::default()).unwrap();
        assert!(a.centroids.bit_eq(&b.centroids));
    }
}
