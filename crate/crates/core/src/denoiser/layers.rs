//! Building blocks of the denoiser, expressed as graph operations.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Epsilon of weight standardization and group normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Convolution with a weight-standardized kernel: each output channel's
/// kernel is shifted to zero mean and scaled to unit variance over
/// `(Cin × kh × kw)` before use. Stride 1 uses same-padding.
pub fn ws_conv_forward<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
) -> Result<(Var, Var)> {
    let shape = g.shape(kernel);
    let (kh, fan_in) = match shape[..] {
        [_, cin, kh, kw] => (kh, cin * kh * kw),
        _ => return Err(Error::Shape(format!("kernel must be rank 4, got {shape:?}"))),
    };
    if fan_in <= 1 {
        return Err(Error::Param("weight standardization needs kernel fan-in > 1".into()));
    }
    let standardized = g.weight_standardize(kernel, NORM_EPS)?;
    let out = g.conv2d(input, standardized, bias, stride, kh / 2)?;
    Ok((out, standardized))
}

/// Per-(sample, group) standardization followed by the channel affine map.
pub fn group_norm_forward<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    groups: usize,
    scale: Var,
    offset: Var,
) -> Result<Var> {
    g.group_norm(input, groups, scale, offset, NORM_EPS)
}

/// Projections of an attention layer, all `1×1` convolutions.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    /// `(3C, C, 1, 1)`: query, key and value stacked along output channels.
    pub qkv: Var,
    /// `(C, C, 1, 1)`
    pub out: Var,
    /// `(C)`
    pub out_bias: Var,
}

fn split_heads<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<(Var, Var, Var, [usize; 4])> {
    let shape = g.shape(input);
    let [n, c, h, wd] = shape[..] else {
        return Err(Error::Shape(format!("attention input must be rank 4, got {shape:?}")));
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::Param(format!("{c} channels cannot be split into {heads} heads")));
    }
    let qkv = g.conv2d(input, w.qkv, None, 1, 0)?;
    let d = c / heads;
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let p = g.slice_channels(qkv, i * c, c)?;
        parts.push(g.reshape(p, &[n * heads, d, h * wd])?);
    }
    Ok((parts[0], parts[1], parts[2], [n, c, h, wd]))
}

fn merge_heads<T: Scalar>(g: &Graph<T>, heads_out: Var, w: &AttentionWeights, dims: [usize; 4]) -> Result<Var> {
    let merged = g.reshape(heads_out, &dims)?;
    g.conv2d(merged, w.out, Some(w.out_bias), 1, 0)
}

/// Dot-product attention over spatial positions,
/// `softmax(QᵀK / √d) V` per head, plus the residual input.
pub fn self_attention_forward<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let out = self_attention(g, input, w, heads)?;
    g.add(out, input)
}

/// Self-attention without the residual term.
pub(crate) fn self_attention<T: Scalar>(g: &Graph<T>, input: Var, w: &AttentionWeights, heads: usize) -> Result<Var> {
    let (q, k, v, dims) = split_heads(g, input, w, heads)?;
    let d = dims[1] / heads;
    let scores = g.bmm(q, k, true, false)?;
    let scores = g.scale(scores, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
    let attn = g.softmax_last(scores)?;
    let out = g.bmm(v, attn, false, true)?;
    merge_heads(g, out, w, dims)
}

/// Kernelized attention with cost linear in the number of positions:
/// `φq(Q)·(φk(K)ᵀV) / (φq(Q)·(φk(K)ᵀ1))`, where `φk` is a softmax over
/// positions and `φq` a softmax over the feature dimension, plus the
/// residual input.
pub fn linear_attention_forward<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let out = linear_attention(g, input, w, heads)?;
    g.add(out, input)
}

/// Linear attention without the residual term.
pub(crate) fn linear_attention<T: Scalar>(g: &Graph<T>, input: Var, w: &AttentionWeights, heads: usize) -> Result<Var> {
    let (q, k, v, dims) = split_heads(g, input, w, heads)?;
    let phi_k = g.softmax_last(k)?;
    let q_rows = g.transpose_last2(q)?;
    let phi_q = g.softmax_last(q_rows)?;
    let context = g.bmm(phi_k, v, false, true)?;
    let num = g.bmm(context, phi_q, true, true)?;
    let key_mass = g.sum_last(phi_k)?;
    let den = g.bmm(key_mass, phi_q, true, true)?;
    let out = g.div_rows(num, den)?;
    merge_heads(g, out, w, dims)
}

/// Sinusoidal timestep embedding `[sin(t·ω_i), cos(t·ω_i)]` with
/// `ω_i = 10000^(−2i/dim)`, `i = 0..dim/2`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Param(format!("time embedding dimension must be even, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| 10000f64.powf(-2.0 * i as f64 / dim as f64)).collect();
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|w| (t * w).sin()));
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn constant_kernel_standardizes_to_zero() {
        let g = Graph::<f64>::new();
        let x = g.constant(rng::normal_tensor(&mut rng::stream(1, "x", 0), &[1, 2, 5, 5]));
        let k = g.param(Arc::new(Tensor::full(&[3, 2, 3, 3], 0.7)));
        let b = g.constant(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let (out, _) = ws_conv_forward(&g, x, k, Some(b), 1).unwrap();
        let out = g.value(out);
        for (i, plane) in out.data().chunks(25).enumerate() {
            let want = [0.5, -1.0, 2.0][i];
            assert!(plane.iter().all(|v| (v - want).abs() < 1e-9));
        }
    }

    #[test]
    fn standardized_kernel_moments() {
        let g = Graph::<f64>::new();
        let k = g.param(Arc::new(rng::normal_tensor(&mut rng::stream(2, "k", 0), &[4, 3, 3, 3])));
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let (_, std_k) = ws_conv_forward(&g, x, k, None, 1).unwrap();
        for row in g.value(std_k).data().chunks(27) {
            let mean = row.iter().sum::<f64>() / 27.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 27.0;
            assert!(mean.abs() < 1e-7);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn fan_in_one_rejected() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let k = g.constant(Tensor::zeros(&[2, 1, 1, 1]));
        assert!(ws_conv_forward(&g, x, k, None, 1).is_err());
    }

    #[test]
    fn group_norm_moments_and_constant_input() {
        let g = Graph::<f64>::new();
        let x = g.constant(rng::normal_tensor(&mut rng::stream(3, "x", 0), &[2, 4, 3, 3]).map(|v| 3.0 * v + 1.0));
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.value(group_norm_forward(&g, x, 2, one, zero).unwrap());
        for grp in y.data().chunks(18) {
            let mean = grp.iter().sum::<f64>() / 18.0;
            let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let c = g.constant(Tensor::full(&[1, 4, 3, 3], 5.0));
        let y = g.value(group_norm_forward(&g, c, 2, one, zero).unwrap());
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
        assert!(group_norm_forward(&g, c, 3, one, zero).is_err());
    }

    #[test]
    fn group_norm_with_one_channel_per_group_is_instance_norm() {
        let g = Graph::<f64>::new();
        let xt = rng::normal_tensor(&mut rng::stream(4, "x", 0), &[2, 3, 4, 4]);
        let x = g.constant(xt.clone());
        let one = g.constant(Tensor::full(&[3], 1.0));
        let zero = g.constant(Tensor::zeros(&[3]));
        let y = g.value(group_norm_forward(&g, x, 3, one, zero).unwrap());
        for (plane, got) in xt.data().chunks(16).zip(y.data().chunks(16)) {
            let mean = plane.iter().sum::<f64>() / 16.0;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for (v, o) in plane.iter().zip(got) {
                assert!(((v - mean) / (var + NORM_EPS).sqrt() - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_embedding_values() {
        let e = time_embedding(0.0, 8).unwrap();
        assert!(e[..4].iter().all(|&v| v == 0.0));
        assert!(e[4..].iter().all(|&v| v == 1.0));
        let p = time_embedding(std::f64::consts::PI, 8).unwrap();
        assert!(p[0].abs() < 1e-12);
        assert!(time_embedding(1.0, 7).is_err());
    }

    #[test]
    fn time_embeddings_distinct_over_schedule() {
        let embs: Vec<Vec<f64>> = (1..=1000).map(|t| time_embedding(t as f64, 16).unwrap()).collect();
        let mut min_gap = f64::INFINITY;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let gap = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                min_gap = min_gap.min(gap);
            }
        }
        assert!(min_gap > 0.0);
    }
}
