//! PSNR, MS-SSIM, bits per pixel and Bjøntegaard delta rate.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bitstream::GopBitstream;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(shape_err!("images differ in shape: {:?} vs {:?}", a.shape(), b.shape()));
    }
    a.dims3()
}

/// `10·log10(1/MSE)` over values clamped to `[0,1]`; `+∞` for identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len() as f64;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (n / sse).log10())
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Smallest image side MS-SSIM accepts.
pub const MS_SSIM_MIN_EXTENT: usize = 176;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h`×`w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                acc += gk * p[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &gk) in g.iter().enumerate() {
                acc += gk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> (f64, f64) {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter_valid(a, h, w, g);
    let (mu_b, ..) = filter_valid(b, h, w, g);
    let (e_aa, ..) = filter_valid(&prod(a, a), h, w, g);
    let (e_bb, ..) = filter_valid(&prod(b, b), h, w, g);
    let (e_ab, ..) = filter_valid(&prod(a, b), h, w, g);
    let n = (oh * ow) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let c = (2.0 * cov + c2) / (var_a + var_b + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

fn downsample(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]) / 4.0;
        }
    }
    (out, oh, ow)
}

/// Five-scale MS-SSIM of two `[C,H,W]` images in `[0,1]`, averaged over channels.
///
/// 11×11 Gaussian window (σ = 1.5), valid filtering, 2×2 average pooling
/// between scales, negative terms clamped to zero before exponentiation.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (c, h, w) = same_shape(a, b)?;
    if h.min(w) < MS_SSIM_MIN_EXTENT {
        return Err(Error::Config(format!(
            "MS-SSIM needs both sides >= {MS_SSIM_MIN_EXTENT}, got {w}x{h}"
        )));
    }
    let g = gaussian_window();
    let plane = |t: &Tensor, ch: usize| -> Vec<f64> {
        t.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect()
    };
    let mut total = 0.0;
    for ch in 0..c {
        let (mut pa, mut pb, mut ph, mut pw) = (plane(a, ch), plane(b, ch), h, w);
        let mut score = 1.0;
        for (s, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&pa, &pb, ph, pw, &g);
            let term = if s + 1 == MS_SSIM_WEIGHTS.len() { ssim } else { cs };
            score *= term.max(0.0).powf(weight);
            if s + 1 < MS_SSIM_WEIGHTS.len() {
                let (da, nh, nw) = downsample(&pa, ph, pw);
                let (db, ..) = downsample(&pb, ph, pw);
                (pa, pb, ph, pw) = (da, db, nh, nw);
            }
        }
        total += score;
    }
    Ok(total / c as f64)
}

/// Index bits over pixels for one GOP stream.
pub fn bpp(stream: &GopBitstream) -> Result<f64> {
    let (bits, pixels) = stream.rate()?;
    Ok(bits as f64 / pixels as f64)
}

/// Bits per pixel over several GOP streams taken together.
pub fn sequence_bpp(streams: &[GopBitstream]) -> Result<f64> {
    let (mut bits, mut pixels) = (0u64, 0u64);
    for s in streams {
        let (b, p) = s.rate()?;
        bits += b;
        pixels += p;
    }
    if pixels == 0 {
        return Err(Error::Domain("no frames to measure".into()));
    }
    Ok(bits as f64 / pixels as f64)
}

/// One rate-distortion point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

fn cubic_fit(points: &[RdPoint]) -> Result<[f64; 4]> {
    let n = points.len();
    let x = DMatrix::from_fn(n, 4, |i, j| points[i].quality.powi(j as i32));
    let y = DVector::from_fn(n, |i, _| points[i].bpp.ln());
    let coef = x
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Domain(format!("cubic fit failed: {e}")))?;
    Ok([coef[0], coef[1], coef[2], coef[3]])
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |q: f64| c[0] * q + c[1] * q * q / 2.0 + c[2] * q.powi(3) / 3.0 + c[3] * q.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

fn check_curve(name: &str, curve: &[RdPoint]) -> Result<Vec<RdPoint>> {
    if curve.len() < 4 {
        return Err(Error::Domain(format!("curve {name} needs at least 4 points, has {}", curve.len())));
    }
    if curve.iter().any(|p| !(p.bpp > 0.0 && p.bpp.is_finite() && p.quality.is_finite())) {
        return Err(Error::Domain(format!("curve {name} has a non-positive or non-finite point")));
    }
    let mut sorted = curve.to_vec();
    sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    if sorted.windows(2).any(|w| w[1].quality <= w[0].quality) {
        return Err(Error::Domain(format!("curve {name} quality is not increasing with rate")));
    }
    Ok(sorted)
}

/// Average rate difference of `test` against `anchor` at equal quality, in
/// percent. Positive means `test` needs more bits.
///
/// Log-rate is fitted as a cubic in quality for each curve and the fits are
/// integrated over the shared quality interval.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let a = check_curve("A", anchor)?;
    let b = check_curve("B", test)?;
    let lo = a[0].quality.max(b[0].quality);
    let hi = a[a.len() - 1].quality.min(b[b.len() - 1].quality);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Domain(format!("quality ranges do not overlap ({lo} .. {hi})")));
    }
    let (ca, cb) = (cubic_fit(&a)?, cubic_fit(&b)?);
    let avg = (integral(&cb, lo, hi) - integral(&ca, lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameRow {
    pub frame: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatePointRow {
    pub rate_point: String,
    pub avg_bpp: f64,
    pub avg_quality: f64,
}

/// Writes rows as CSV with a header line.
pub fn write_csv<W: Write, R: Serialize>(out: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pattern(c: usize, h: usize, w: usize, seed: u32) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| {
            let v = (i as u32).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(40503));
            (v >> 8) as f32 / (1u32 << 24) as f32
        })
    }

    #[test]
    fn psnr_closed_forms() {
        let a = pattern(3, 8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let a = Tensor::full(&[3, 4, 4], 0.5);
        let b = a.map(|v| v + 1.0 / 255.0);
        let expected = 20.0 * 255f64.log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-3);
        assert!((expected - 48.1308).abs() < 1e-3);
        let c = pattern(3, 8, 8, 2);
        let d = pattern(3, 8, 8, 3);
        assert_eq!(psnr(&c, &d).unwrap(), psnr(&d, &c).unwrap());
        assert!(psnr(&c, &pattern(3, 8, 4, 0)).is_err());
    }

    #[test]
    fn ms_ssim_identity_and_sensitivity() {
        let a = pattern(3, 176, 192, 5);
        assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        let s = ms_ssim(&a, &inv).unwrap();
        assert!((0.0..1.0).contains(&s), "{s}");
        let noisy = a.map(|v| v * 0.9 + 0.05);
        let t = ms_ssim(&a, &noisy).unwrap();
        assert!(t > 0.9 && t < 1.0, "{t}");
        assert!(matches!(ms_ssim(&pattern(3, 175, 200, 0), &pattern(3, 175, 200, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn gaussian_window_is_normalised_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(g[i], g[WINDOW - 1 - i]);
        }
    }

    fn curve() -> Vec<RdPoint> {
        [(0.05, 30.0), (0.1, 32.5), (0.2, 35.0), (0.4, 37.2), (0.8, 39.0)]
            .map(|(bpp, quality)| RdPoint { bpp, quality })
            .to_vec()
    }

    #[test]
    fn bd_rate_closed_forms() {
        let a = curve();
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        let doubled: Vec<RdPoint> = a.iter().map(|p| RdPoint { bpp: 2.0 * p.bpp, ..*p }).collect();
        assert!((bd_rate(&a, &doubled).unwrap() - 100.0).abs() < 0.1);
        let halved: Vec<RdPoint> = a.iter().map(|p| RdPoint { bpp: 0.5 * p.bpp, ..*p }).collect();
        assert!((bd_rate(&a, &halved).unwrap() + 50.0).abs() < 0.1);
    }

    #[test]
    fn bd_rate_anti_symmetry() {
        let a = curve();
        let b: Vec<RdPoint> = a
            .iter()
            .enumerate()
            .map(|(i, p)| RdPoint { bpp: p.bpp * (1.3 + 0.05 * i as f64), quality: p.quality + 0.2 })
            .collect();
        let ab = bd_rate(&a, &b).unwrap() / 100.0;
        let ba = bd_rate(&b, &a).unwrap() / 100.0;
        assert!((ab - (-ba / (1.0 + ba))).abs() * 100.0 < 0.5);
    }

    #[test]
    fn bd_rate_domain_errors() {
        let a = curve();
        let far: Vec<RdPoint> = a.iter().map(|p| RdPoint { quality: p.quality + 100.0, ..*p }).collect();
        assert!(matches!(bd_rate(&a, &far), Err(Error::Domain(_))));
        assert!(matches!(bd_rate(&a[..3], &a), Err(Error::Domain(_))));
        let mut flat = a.clone();
        flat[2].quality = flat[1].quality;
        assert!(matches!(bd_rate(&flat, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn csv_rows() {
        let mut out = Vec::new();
        write_csv(&mut out, &[FrameRow { frame: 0, bpp: 0.5, psnr: 30.0, ms_ssim: None }]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "frame,bpp,psnr,ms_ssim\n0,0.5,30.0,\n");
    }

    proptest! {
        #[test]
        fn psnr_is_symmetric(seed_a: u32, seed_b: u32) {
            let a = pattern(1, 4, 4, seed_a);
            let b = pattern(1, 4, 4, seed_b);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }
}
