use super::{map_indices, Numerics, Reduction, Tensor};
use crate::error::{shape_err, Result};

/// Row-wise affine map: `x[n, in] · wᵀ + b`, with `w: [out, in]`, `b: [out]`.
/// Each output is a dot product over `in` (ascending) plus the bias.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor, num: &Numerics) -> Result<Tensor> {
    let (n, din) = x.dims2()?;
    let (dout, win) = weight.dims2()?;
    if win != din || bias.shape() != [dout] {
        return Err(shape_err!(
            "linear {:?}·{:?}ᵀ + {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        ));
    }
    let (x, weight) = if num.reduction == Reduction::Half {
        (x.rounded(num), weight.rounded(num))
    } else {
        (x.clone(), weight.clone())
    };
    let mut out = Vec::with_capacity(n * dout);
    for row in x.data().chunks(din) {
        for (o, wrow) in weight.data().chunks(din).enumerate() {
            out.push(num.round(num.dot(wrow, row) + num.round(bias.data()[o])));
        }
    }
    Tensor::new(vec![n, dout], out)
}

/// `softmax(Q Kᵀ / √d) V` for `Q: [n,d]`, `K: [m,d]`, `V: [m,d]`.
///
/// Scores are dot products over `d`; the softmax subtracts the row maximum
/// before exponentiating and normalises by the row sum; each output element is
/// the probability-weighted sum over the `m` value rows. All three reductions
/// follow the policy's order.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, num: &Numerics) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, dv) = v.dims2()?;
    if dk != d || mv != m || dv != d || m == 0 {
        return Err(shape_err!(
            "attention Q{:?} K{:?} V{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let (q, k) = (q.rounded(num), k.rounded(num));
    let v = v.rounded(num);
    // columns of V, so every output element is a contiguous dot product
    let mut vt = vec![0.0f32; d * m];
    for (j, row) in v.data().chunks(d).enumerate() {
        for (c, &x) in row.iter().enumerate() {
            vt[c * m + j] = x;
        }
    }
    let scale = (d as f32).sqrt();
    let rows = map_indices(n, num.parallel, |i| {
        let qi = &q.data()[i * d..(i + 1) * d];
        let scores: Vec<f32> = k
            .data()
            .chunks(d)
            .map(|kj| num.round(num.dot(qi, kj) / scale))
            .collect();
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = scores.iter().map(|&s| num.round((s - max).exp())).collect();
        let total = num.round(num.sum(&exps));
        let probs: Vec<f32> = exps.iter().map(|&e| num.round(e / total)).collect();
        (0..d)
            .map(|c| num.round(num.dot(&probs, &vt[c * m..(c + 1) * m])))
            .collect::<Vec<f32>>()
    });
    Tensor::new(vec![n, d], rows.concat())
}

/// Softmax probabilities of one score row (exposed for property tests).
#[cfg(test)]
pub(crate) fn softmax_row(scores: &[f32], num: &Numerics) -> Vec<f32> {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total = num.sum(&exps);
    exps.iter().map(|&e| e / total).collect()
}
