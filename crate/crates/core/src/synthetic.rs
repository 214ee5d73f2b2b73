//! Deterministic moving-pattern clips for tests, fitting demos and benches.

use std::f32::consts::TAU;

use crate::tensor::Tensor;

/// `frames` RGB frames of `h`×`w`: drifting gratings plus a square that moves
/// `seed`-dependently, values in `[0, 1]`.
pub fn synthetic_clip(frames: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    let phase = (seed % 97) as f32 / 97.0;
    let (dx, dy) = (1 + (seed % 3) as usize, 1 + (seed / 3 % 2) as usize);
    let side = (h.min(w) / 4).max(1);
    (0..frames)
        .map(|t| {
            let (sx, sy) = ((t * dx * 3 + seed as usize) % w, (t * dy * 2) % h);
            Tensor::from_fn(&[3, h, w], |i| {
                let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                let u = (x as f32 + 2.0 * t as f32) / 32.0 + c as f32 / 3.0 + phase;
                let v = (y as f32 - t as f32) / 48.0;
                let mut p = 0.5 + 0.25 * (TAU * u).sin() * (TAU * v).cos();
                let inside = (x + w - sx) % w < side && (y + h - sy) % h < side;
                if inside {
                    p = 0.15 + 0.3 * c as f32;
                }
                p.clamp(0.0, 1.0)
            })
        })
        .collect()
}
