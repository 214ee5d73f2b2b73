//! Window-based cross-attention context encoder/decoder.
//!
//! Current-frame latents are cut into non-overlapping `s_sw`×`s_sw` query
//! windows. Reference latents are cut into `s_sw + 2·s_p` windows centred on
//! the same positions, zero outside the frame. Queries attend only to their
//! own reference window, so each output window depends on a bounded patch of
//! the reference. There is no warping or flow estimation anywhere here.

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{load_resblock, resblock_plans, Init, Linear, LinearPlan};
use crate::tensor::{linear, map_indices, resblock, scaled_dot_attention, Numerics, ResBlock, Tensor};
use crate::weights::WeightBundle;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextConfig {
    /// Query window side `s_sw`.
    pub window: usize,
    /// Reference padding `s_p` on every side.
    pub padding: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Number of `[cross-attention → resblock]` blocks.
    pub repeats: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            window: 4,
            padding: 2,
            heads: 8,
            head_dim: 16,
            repeats: 2,
        }
    }
}

impl ContextConfig {
    /// Side of a reference window, `s_sw + 2·s_p`.
    pub fn kv_window(&self) -> usize {
        self.window + 2 * self.padding
    }

    pub fn inner_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.heads == 0 || self.head_dim == 0 || self.repeats == 0 {
            return Err(Error::Config(format!("degenerate context config {self:?}")));
        }
        Ok(())
    }

    fn plans(&self, prefix: &str, channels: usize) -> Vec<BlockPlan> {
        let inner = self.inner_width();
        (0..self.repeats)
            .map(|r| {
                let p = format!("{prefix}.block{r}");
                let lin = |n: &str, din, dout, init| LinearPlan {
                    name: format!("{p}.wca.{n}"),
                    din,
                    dout,
                    init,
                };
                BlockPlan {
                    q: lin("q", channels, inner, Init::Random { gain: 1.0 }),
                    k: lin("k", channels, inner, Init::Random { gain: 1.0 }),
                    v: lin("v", channels, inner, Init::PassThrough { noise: 0.1 }),
                    o: lin("o", inner, channels, Init::Random { gain: 0.1 }),
                    res: resblock_plans(&format!("{p}.res"), channels),
                }
            })
            .collect()
    }

    pub(crate) fn initialize(&self, prefix: &str, channels: usize, rng: &mut ChaCha8Rng, b: &mut WeightBundle) {
        for plan in self.plans(prefix, channels) {
            for l in [&plan.q, &plan.k, &plan.v, &plan.o] {
                l.initialize(rng, b);
            }
            for c in &plan.res {
                c.initialize(rng, b);
            }
        }
    }

    pub fn param_count(&self, channels: usize) -> usize {
        self.plans("x", channels)
            .iter()
            .map(|p| {
                p.q.params() + p.k.params() + p.v.params() + p.o.params() + p.res.iter().map(|c| c.params()).sum::<usize>()
            })
            .sum()
    }
}

struct BlockPlan {
    q: LinearPlan,
    k: LinearPlan,
    v: LinearPlan,
    o: LinearPlan,
    res: [crate::layers::ConvPlan; 2],
}

/// Projections of one cross-attention layer.
#[derive(Clone, Debug)]
pub struct WcaWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug)]
pub struct ContextBlock {
    pub wca: WcaWeights,
    pub res: ResBlock,
}

/// Cuts `[c,h,w]` into `(h/s)·(w/s)` windows of `s`×`s`, raster order.
/// Output shape `[n_windows, c, s, s]`.
pub fn partition_query(y: &Tensor, window: usize) -> Result<Tensor> {
    partition(y, window, 0)
}

/// Reference windows of side `window + 2·padding` centred on each query
/// window, zero where they leave the frame. Output `[n_windows, c, s_psw, s_psw]`.
pub fn partition_kv(y: &Tensor, window: usize, padding: usize) -> Result<Tensor> {
    partition(y, window, padding)
}

fn window_grid(h: usize, w: usize, window: usize) -> Result<(usize, usize)> {
    if window == 0 || !h.is_multiple_of(window) || !w.is_multiple_of(window) {
        return Err(shape_err!("latent {h}x{w} is not divisible by window {window}"));
    }
    Ok((h / window, w / window))
}

fn partition(y: &Tensor, window: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w) = y.dims3()?;
    let (gy, gx) = window_grid(h, w, window)?;
    let side = window + 2 * padding;
    let mut out = vec![0.0f32; gy * gx * c * side * side];
    let src = y.data();
    for wy in 0..gy {
        for wx in 0..gx {
            let base = (wy * gx + wx) * c * side * side;
            for ch in 0..c {
                for dy in 0..side {
                    let iy = (wy * window + dy) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..side {
                        let ix = (wx * window + dx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[base + (ch * side + dy) * side + dx] =
                            src[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![gy * gx, c, side, side], out)
}

/// Inverse of [`partition_query`] for an `h`×`w` latent.
pub fn unpartition(windows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, s) = match windows.shape()[..] {
        [n, c, s, s2] if s == s2 => (n, c, s),
        _ => return Err(shape_err!("expected [N,C,s,s] windows, got {:?}", windows.shape())),
    };
    let (gy, gx) = window_grid(h, w, s)?;
    if gy * gx != n {
        return Err(shape_err!("{n} windows cannot tile {h}x{w}"));
    }
    let mut out = vec![0.0f32; c * h * w];
    let src = windows.data();
    for i in 0..n {
        let (wy, wx) = (i / gx, i % gx);
        for ch in 0..c {
            for dy in 0..s {
                let row = &src[((i * c + ch) * s + dy) * s..((i * c + ch) * s + dy + 1) * s];
                let at = (ch * h + wy * s + dy) * w + wx * s;
                out[at..at + s].copy_from_slice(row);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// `[c, s, s]` window → `[s·s, c]` token matrix.
fn tokens(windows: &Tensor, index: usize) -> Tensor {
    let (c, s) = (windows.shape()[1], windows.shape()[2]);
    let n = s * s;
    let src = &windows.data()[index * c * n..(index + 1) * c * n];
    Tensor::from_fn(&[n, c], |i| src[(i % c) * n + i / c])
}

fn columns(t: &Tensor, from: usize, to: usize) -> Tensor {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let width = to - from;
    Tensor::from_fn(&[n, width], |i| t.data()[(i / width) * d + from + i % width])
}

/// One window-based cross-attention layer with residual connection:
/// `y + O(concat_h attention(Q_h y, K_h ref, V_h ref))` per window.
pub fn wca_layer(
    y_cur: &Tensor,
    y_ref: &Tensor,
    cfg: &ContextConfig,
    weights: &WcaWeights,
    num: &Numerics,
) -> Result<Tensor> {
    let (c, h, w) = y_cur.dims3()?;
    if y_ref.shape() != y_cur.shape() {
        return Err(shape_err!(
            "current {:?} and reference {:?} latents differ",
            y_cur.shape(),
            y_ref.shape()
        ));
    }
    if weights.q.weight.shape() != [cfg.inner_width(), c] {
        return Err(Error::Config(format!(
            "query projection {:?} does not map {c} channels to {}",
            weights.q.weight.shape(),
            cfg.inner_width()
        )));
    }
    let qw = partition_query(y_cur, cfg.window)?;
    let kvw = partition_kv(y_ref, cfg.window, cfg.padding)?;
    let n_windows = qw.shape()[0];
    let inner = num.sequential_only();
    let outputs = map_indices(n_windows, num.parallel, |i| -> Result<Tensor> {
        let q_tok = tokens(&qw, i);
        let kv_tok = tokens(&kvw, i);
        let q = linear(&q_tok, &weights.q.weight, &weights.q.bias, &inner)?;
        let k = linear(&kv_tok, &weights.k.weight, &weights.k.bias, &inner)?;
        let v = linear(&kv_tok, &weights.v.weight, &weights.v.bias, &inner)?;
        let n_q = q_tok.shape()[0];
        let mut heads = vec![0.0f32; n_q * cfg.inner_width()];
        for hd in 0..cfg.heads {
            let (a, b) = (hd * cfg.head_dim, (hd + 1) * cfg.head_dim);
            let att = scaled_dot_attention(&columns(&q, a, b), &columns(&k, a, b), &columns(&v, a, b), &inner)?;
            for (r, row) in att.data().chunks(cfg.head_dim).enumerate() {
                heads[r * cfg.inner_width() + a..r * cfg.inner_width() + b].copy_from_slice(row);
            }
        }
        let heads = Tensor::new(vec![n_q, cfg.inner_width()], heads)?;
        let o = linear(&heads, &weights.o.weight, &weights.o.bias, &inner)?;
        q_tok.add(&o, &inner)
    });
    // tokens back to [n, c, s, s]
    let s = cfg.window;
    let mut win = vec![0.0f32; n_windows * c * s * s];
    for (i, t) in outputs.into_iter().enumerate() {
        let t = t?;
        for (p, row) in t.data().chunks(c).enumerate() {
            for (ch, &v) in row.iter().enumerate() {
                win[(i * c + ch) * s * s + p] = v;
            }
        }
    }
    unpartition(&Tensor::new(vec![n_windows, c, s, s], win)?, h, w)
}

/// A stack of `[cross-attention → resblock]` blocks conditioned on reference
/// latents. Used both as the context encoder and the context decoder, each
/// with its own weights.
#[derive(Clone, Debug)]
pub struct ContextCoder {
    cfg: ContextConfig,
    blocks: Vec<ContextBlock>,
}

impl ContextCoder {
    pub fn from_bundle(prefix: &str, channels: usize, cfg: &ContextConfig, b: &WeightBundle) -> Result<Self> {
        cfg.validate()?;
        let blocks = cfg
            .plans(prefix, channels)
            .iter()
            .map(|p| {
                Ok(ContextBlock {
                    wca: WcaWeights {
                        q: p.q.load(b)?,
                        k: p.k.load(b)?,
                        v: p.v.load(b)?,
                        o: p.o.load(b)?,
                    },
                    res: load_resblock(&p.res, b)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ContextCoder { cfg: cfg.clone(), blocks })
    }

    pub fn config(&self) -> &ContextConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[ContextBlock] {
        &self.blocks
    }

    /// Runs the first `repeats` blocks (all of them by default).
    pub fn run_blocks(&self, y: &Tensor, y_ref: &Tensor, repeats: usize, num: &Numerics) -> Result<Tensor> {
        let mut t = y.clone();
        for block in self.blocks.iter().take(repeats) {
            t = wca_layer(&t, y_ref, &self.cfg, &block.wca, num)?;
            t = resblock(&t, &block.res, num)?;
        }
        Ok(t)
    }

    pub fn run(&self, y: &Tensor, y_ref: &Tensor, num: &Numerics) -> Result<Tensor> {
        self.run_blocks(y, y_ref, self.blocks.len(), num)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn coder(cfg: &ContextConfig, c: usize, seed: u64) -> ContextCoder {
        let mut b = WeightBundle::new();
        cfg.initialize("ctx", c, &mut ChaCha8Rng::seed_from_u64(seed), &mut b);
        ContextCoder::from_bundle("ctx", c, cfg, &b).unwrap()
    }

    #[test]
    fn query_partition_counts_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random(&[3, 16, 16], &mut rng);
        let p = partition_query(&y, 4).unwrap();
        assert_eq!(p.shape(), &[16, 3, 4, 4]);
        assert!(unpartition(&p, 16, 16).unwrap().bit_eq(&y));
        let whole = partition_query(&y, 16).unwrap();
        assert_eq!(whole.shape(), &[1, 3, 16, 16]);
        assert_eq!(whole.data(), y.data());
        assert!(partition_query(&y, 5).is_err());
    }

    #[test]
    fn kv_partition_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random(&[2, 16, 16], &mut rng);
        assert!(partition_kv(&y, 4, 0).unwrap().bit_eq(&partition_query(&y, 4).unwrap()));

        let kv = partition_kv(&y, 4, 2).unwrap();
        assert_eq!(kv.shape(), &[16, 2, 8, 8]);
        // top-left corner window: rows 0..2 and cols 0..2 are padding
        let corner = &kv.data()[..2 * 64];
        for ch in 0..2 {
            for dy in 0..8 {
                for dx in 0..8 {
                    let v = corner[(ch * 8 + dy) * 8 + dx];
                    if dy < 2 || dx < 2 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, y.data()[(ch * 16 + dy - 2) * 16 + dx - 2]);
                    }
                }
            }
        }
        // interior window (row 1, col 2): direct slice of rows 2..10, cols 6..14
        let i = 4 + 2;
        for ch in 0..2 {
            for dy in 0..8 {
                for dx in 0..8 {
                    assert_eq!(
                        kv.data()[((i * 2 + ch) * 8 + dy) * 8 + dx],
                        y.data()[(ch * 16 + 2 + dy) * 16 + 6 + dx]
                    );
                }
            }
        }
    }

    #[test]
    fn constant_reference_gives_constant_attention_term() {
        let c = 16;
        let cfg = ContextConfig { window: 4, padding: 0, heads: 2, head_dim: 8, repeats: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = coder(&cfg, c, 4);
        let mut wca = ctx.blocks()[0].wca.clone();
        wca.v.weight = Tensor::from_fn(&[16, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
        wca.v.bias = Tensor::zeros(&[16]);
        let v: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y_ref = Tensor::from_fn(&[c, 8, 8], |i| v[i / 64]);
        let y = random(&[c, 8, 8], &mut rng);
        let out = wca_layer(&y, &y_ref, &cfg, &wca, &Numerics::default()).unwrap();
        let vt = Tensor::new(vec![1, c], v).unwrap();
        let projected = linear(&vt, &wca.o.weight, &wca.o.bias, &Numerics::default()).unwrap();
        for p in 0..64 {
            for ch in 0..c {
                let term = out.data()[ch * 64 + p] - y.data()[ch * 64 + p];
                assert!((term - projected.data()[ch]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn shapes_and_repeat_structure() {
        let c = 16;
        let cfg = ContextConfig { heads: 2, head_dim: 8, ..Default::default() };
        let ctx = coder(&cfg, c, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (y, r) = (random(&[c, 16, 16], &mut rng), random(&[c, 16, 16], &mut rng));
        let num = Numerics::default();
        let two = ctx.run(&y, &r, &num).unwrap();
        assert_eq!(two.shape(), &[c, 16, 16]);
        let one = ctx.run_blocks(&y, &r, 1, &num).unwrap();
        assert!(one.max_abs_diff(&two) > 0.0);
        assert!(ctx.run(&y, &random(&[c, 8, 16], &mut rng), &num).is_err());
        let seq = ctx.run(&y, &r, &num.sequential_only()).unwrap();
        assert!(seq.bit_eq(&two));
    }
}
