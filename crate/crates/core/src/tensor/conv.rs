use super::{for_each_chunk, Numerics, Reduction, Tensor};
use crate::error::{shape_err, Error, Result};

/// Negative slope of the activation used throughout the networks.
pub const LEAKY_SLOPE: f32 = 0.01;

/// A 2-D convolution layer: square kernel, symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_channels, in_channels, kernel, kernel]`
    pub weight: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
}

impl ConvSpec {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (o, i, k) = match weight.shape()[..] {
            [o, i, k, k2] if k == k2 && k > 0 => (o, i, k),
            _ => {
                return Err(Error::Config(format!(
                    "conv weight must be [O,I,k,k], got {:?}",
                    weight.shape()
                )))
            }
        };
        if bias.shape() != [o] {
            return Err(Error::Config(format!(
                "conv bias must be [{o}], got {:?}",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        Ok(ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride,
            padding,
            weight,
            bias,
        })
    }

    pub fn output_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(shape_err!(
                "{h}x{w} input too small for kernel {} with padding {}",
                self.kernel,
                self.padding
            ));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn w(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f32 {
        let k = self.kernel;
        self.weight.data()[((oc * self.in_channels + ic) * k + ky) * k + kx]
    }
}

/// Multiply-accumulate count of one convolution on an `h`×`w` input.
pub fn conv_macs(spec: &ConvSpec, h: usize, w: usize) -> u64 {
    let (oh, ow) = spec.output_extents(h, w).unwrap_or((0, 0));
    (spec.out_channels * spec.in_channels * spec.kernel * spec.kernel * oh * ow) as u64
}

struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Output-column range `[lo, hi)` whose input column `ox*s + kx - p` is in bounds.
    #[inline]
    fn span(&self, k_off: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k_off {
            (self.pad - k_off).div_ceil(s)
        } else {
            0
        };
        let hi = if extent + self.pad > k_off {
            ((extent - 1 + self.pad - k_off) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Adds `w * x` for one `(ic, ky, kx)` term into an output plane.
#[inline]
fn accumulate_term(
    plane: &mut [f32],
    channel: &[f32],
    g: &Geometry,
    wt: f32,
    ky: usize,
    kx: usize,
    fused: bool,
) {
    let (y0, y1) = g.span(ky, g.h, g.oh);
    let (x0, x1) = g.span(kx, g.w, g.ow);
    for oy in y0..y1 {
        let iy = oy * g.stride + ky - g.pad;
        let row = &channel[iy * g.w..(iy + 1) * g.w];
        let out = &mut plane[oy * g.ow..(oy + 1) * g.ow];
        if g.stride == 1 {
            let base = kx + x0 - g.pad;
            let src = &row[base..base + (x1 - x0)];
            let dst = &mut out[x0..x1];
            if fused {
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = wt.mul_add(x, *d);
                }
            } else {
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d += wt * x;
                }
            }
        } else {
            for ox in x0..x1 {
                let x = row[ox * g.stride + kx - g.pad];
                if fused {
                    out[ox] = wt.mul_add(x, out[ox]);
                } else {
                    out[ox] += wt * x;
                }
            }
        }
    }
}

fn term_plane(
    input: &[f32],
    spec: &ConvSpec,
    num: &Numerics,
    g: &Geometry,
    oc: usize,
    term: usize,
) -> Vec<f32> {
    let k2 = spec.kernel * spec.kernel;
    let (ic, ky, kx) = (term / k2, (term % k2) / spec.kernel, term % spec.kernel);
    let mut plane = vec![0.0f32; g.oh * g.ow];
    let channel = &input[ic * g.h * g.w..(ic + 1) * g.h * g.w];
    accumulate_term(&mut plane, channel, g, num.round(spec.w(oc, ic, ky, kx)), ky, kx, false);
    plane
}

fn tree_plane(
    input: &[f32],
    spec: &ConvSpec,
    num: &Numerics,
    g: &Geometry,
    oc: usize,
    lo: usize,
    hi: usize,
) -> Vec<f32> {
    if hi - lo == 1 {
        return term_plane(input, spec, num, g, oc, lo);
    }
    let mid = lo + (hi - lo) / 2;
    let mut left = tree_plane(input, spec, num, g, oc, lo, mid);
    let right = tree_plane(input, spec, num, g, oc, mid, hi);
    for (l, r) in left.iter_mut().zip(&right) {
        *l += r;
    }
    left
}

/// 2-D convolution of a `[C,H,W]` tensor.
///
/// Each output value is `Σ w·x + bias`, where the sum runs over
/// `(in_channel, ky, kx)` in that nesting order (ascending) and starts from
/// zero; out-of-bounds (padding) terms are skipped. The bias is added last.
/// Work is split across output channels only.
pub fn conv2d(input: &Tensor, spec: &ConvSpec, num: &Numerics) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if c != spec.in_channels {
        return Err(Error::Config(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    let (oh, ow) = spec.output_extents(h, w)?;
    let g = Geometry {
        h,
        w,
        oh,
        ow,
        stride: spec.stride,
        pad: spec.padding,
    };
    let rounded;
    let src: &[f32] = if num.reduction == Reduction::Half {
        rounded = input.rounded(num);
        rounded.data()
    } else {
        input.data()
    };
    let k = spec.kernel;
    let n_terms = c * k * k;
    let mut out = vec![0.0f32; spec.out_channels * oh * ow];
    for_each_chunk(&mut out, oh * ow, num.parallel, |oc, plane| {
        match num.reduction {
            Reduction::PairwiseTree => {
                plane.copy_from_slice(&tree_plane(src, spec, num, &g, oc, 0, n_terms));
            }
            reduction => {
                let fused = reduction == Reduction::FusedMultiplyAdd;
                let mut visit = |term: usize| {
                    let (ic, ky, kx) = (term / (k * k), (term % (k * k)) / k, term % k);
                    let channel = &src[ic * h * w..(ic + 1) * h * w];
                    let wt = num.round(spec.w(oc, ic, ky, kx));
                    accumulate_term(plane, channel, &g, wt, ky, kx, fused);
                };
                if reduction == Reduction::Reversed {
                    (0..n_terms).rev().for_each(&mut visit);
                } else {
                    (0..n_terms).for_each(&mut visit);
                }
            }
        }
        let b = num.round(spec.bias.data()[oc]);
        for v in plane.iter_mut() {
            *v = num.round(*v + b);
        }
    });
    Tensor::new(vec![spec.out_channels, oh, ow], out)
}

#[inline]
pub fn leaky_relu(x: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn activate(t: &Tensor, num: &Numerics) -> Tensor {
    t.map(|v| num.round(leaky_relu(num.round(v))))
}

/// Residual block: `x + conv1(act(conv0(act(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv0: ConvSpec,
    pub conv1: ConvSpec,
}

impl ResBlock {
    pub fn new(conv0: ConvSpec, conv1: ConvSpec) -> Result<Self> {
        let c = conv0.in_channels;
        if conv0.out_channels != conv1.in_channels || conv1.out_channels != c {
            return Err(Error::Config(format!(
                "resblock channels {}->{}->{}->{} must round-trip",
                conv0.in_channels, conv0.out_channels, conv1.in_channels, conv1.out_channels
            )));
        }
        Ok(ResBlock { conv0, conv1 })
    }

    pub fn channels(&self) -> usize {
        self.conv0.in_channels
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        conv_macs(&self.conv0, h, w) + conv_macs(&self.conv1, h, w)
    }

    pub fn param_count(&self) -> usize {
        self.conv0.param_count() + self.conv1.param_count()
    }
}

pub fn resblock(input: &Tensor, block: &ResBlock, num: &Numerics) -> Result<Tensor> {
    let (c, _, _) = input.dims3()?;
    if c != block.channels() {
        return Err(Error::Config(format!(
            "resblock expects {} channels, got {c}",
            block.channels()
        )));
    }
    let t = conv2d(&activate(input, num), &block.conv0, num)?;
    let t = conv2d(&activate(&t, num), &block.conv1, num)?;
    input.add(&t, num)
}

/// Strided 2×2 convolution halving both extents.
pub fn downsample2x(input: &Tensor, spec: &ConvSpec, num: &Numerics) -> Result<Tensor> {
    let (_, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("downsample2x needs even extents, got {h}x{w}"));
    }
    if spec.kernel != 2 || spec.stride != 2 || spec.padding != 0 {
        return Err(Error::Config(
            "downsample2x needs a 2x2 kernel, stride 2, no padding".into(),
        ));
    }
    conv2d(input, spec, num)
}

/// Nearest-neighbour 2× duplication followed by a same-size convolution.
pub fn upsample2x(input: &Tensor, spec: &ConvSpec, num: &Numerics) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if spec.stride != 1 || spec.kernel != 2 * spec.padding + 1 {
        return Err(Error::Config(
            "upsample2x needs an odd kernel with same padding, stride 1".into(),
        ));
    }
    let (h2, w2) = (2 * h, 2 * w);
    let src = input.data();
    let mut up = vec![0.0f32; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let row = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst = &mut up[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = row[x / 2];
            }
        }
    }
    conv2d(&Tensor::new(vec![c, h2, w2], up)?, spec, num)
}
