use std::sync::Arc;

use rand::Rng;
use svpgen::autograd::Graph;
use svpgen::denoiser::{
    linear_attention_forward, self_attention_forward, ws_conv_forward, AttentionKind, AttentionWeights,
    DenoiserConfig, DenoiserNet, TraceEvent,
};
use svpgen::rng;
use svpgen::tensor::{mac_count, reset_mac_counter};
use svpgen::Tensor;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    rng::normal_tensor(&mut rng::stream(seed, "test", 0), shape)
}

// ---- weight-standardized convolution --------------------------------------

#[test]
fn ws_conv_matches_nested_loop_oracle() {
    let (cin, cout, k) = (2, 3, 3);
    let x = randn(&[1, cin, 5, 5], 1);
    let w = randn(&[cout, cin, k, k], 2);
    let b = randn(&[cout], 3);

    // standardize each output channel independently
    let fan = cin * k * k;
    let mut ws = w.data().to_vec();
    for row in ws.chunks_mut(fan) {
        let mean = row.iter().sum::<f64>() / fan as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fan as f64;
        row.iter_mut().for_each(|v| *v = (*v - mean) / (var + 1e-5).sqrt());
    }
    let mut want = vec![0.0; cout * 25];
    for o in 0..cout {
        for y in 0..5i64 {
            for xx in 0..5i64 {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if (0..5).contains(&sy) && (0..5).contains(&sx) {
                                acc += ws[((o * cin + i) * 3 + ky as usize) * 3 + kx as usize]
                                    * x.data()[(i * 5 + sy as usize) * 5 + sx as usize];
                            }
                        }
                    }
                }
                want[(o * 5 + y as usize) * 5 + xx as usize] = acc;
            }
        }
    }

    let g = Graph::<f64>::new();
    let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
    let (out, _) = ws_conv_forward(&g, xv, wv, Some(bv), 1).unwrap();
    let got = g.value(out);
    assert_eq!(got.shape(), &[1, 3, 5, 5]);
    let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-6, "max diff {diff}");
}

#[test]
fn ws_conv_rejects_channel_mismatch() {
    let g = Graph::<f64>::new();
    let x = g.constant(randn(&[1, 2, 4, 4], 1));
    let w = g.constant(randn(&[3, 4, 3, 3], 2));
    assert!(ws_conv_forward(&g, x, w, None, 1).is_err());
}

// ---- attention -------------------------------------------------------------

struct AttnCase {
    x: Tensor<f64>,
    qkv: Tensor<f64>,
    out: Tensor<f64>,
    out_bias: Tensor<f64>,
}

impl AttnCase {
    fn random(c: usize, h: usize, w: usize, seed: u64) -> Self {
        Self {
            x: randn(&[1, c, h, w], seed),
            qkv: randn(&[3 * c, c, 1, 1], seed + 1).scale(0.5),
            out: randn(&[c, c, 1, 1], seed + 2).scale(0.5),
            out_bias: randn(&[c], seed + 3),
        }
    }

    fn run(&self, linear: bool) -> Tensor<f64> {
        let g = Graph::<f64>::new();
        let x = g.constant(self.x.clone());
        let w = AttentionWeights {
            qkv: g.constant(self.qkv.clone()),
            out: g.constant(self.out.clone()),
            out_bias: g.constant(self.out_bias.clone()),
        };
        let y = if linear {
            linear_attention_forward(&g, x, &w, 1).unwrap()
        } else {
            self_attention_forward(&g, x, &w, 1).unwrap()
        };
        (*g.value(y)).clone()
    }

    /// Per-position projections as plain matrices `[pos][channel]`.
    fn project(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let c = self.x.dim(1);
        let n = self.x.numel() / c;
        let proj = |block: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|p| {
                    (0..c)
                        .map(|o| (0..c).map(|i| self.qkv.data()[(block * c + o) * c + i] * self.x.data()[i * n + p]).sum())
                        .collect()
                })
                .collect()
        };
        (proj(0), proj(1), proj(2))
    }

    fn finish(&self, attended: &[Vec<f64>]) -> Vec<f64> {
        let c = self.x.dim(1);
        let n = self.x.numel() / c;
        let mut out = vec![0.0; c * n];
        for o in 0..c {
            for p in 0..n {
                let proj: f64 = (0..c).map(|i| self.out.data()[o * c + i] * attended[p][i]).sum();
                out[o * n + p] = proj + self.out_bias.data()[o] + self.x.data()[o * n + p];
            }
        }
        out
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn self_attention_matches_explicit_softmax_on_2x2() {
    let case = AttnCase::random(3, 2, 2, 10);
    let (q, k, v) = case.project();
    let d = 3.0f64;
    let attended: Vec<Vec<f64>> = (0..4)
        .map(|i| {
            let scores: Vec<f64> =
                (0..4).map(|j| (0..3).map(|c| q[i][c] * k[j][c]).sum::<f64>() / d.sqrt()).collect();
            let a = softmax(&scores);
            (0..3).map(|c| (0..4).map(|j| a[j] * v[j][c]).sum()).collect()
        })
        .collect();
    let diff = max_diff(case.run(false).data(), &case.finish(&attended));
    assert!(diff < 1e-6, "max diff {diff}");
}

#[test]
fn linear_attention_matches_direct_formula_on_2x2() {
    let case = AttnCase::random(3, 2, 2, 20);
    let (q, k, v) = case.project();
    // φk: softmax of each key channel over positions; φq: softmax of each
    // query over channels
    let phi_k: Vec<Vec<f64>> = {
        let cols: Vec<Vec<f64>> = (0..3).map(|c| softmax(&(0..4).map(|p| k[p][c]).collect::<Vec<_>>())).collect();
        (0..4).map(|p| (0..3).map(|c| cols[c][p]).collect()).collect()
    };
    let phi_q: Vec<Vec<f64>> = q.iter().map(|row| softmax(row)).collect();
    let attended: Vec<Vec<f64>> = (0..4)
        .map(|i| {
            let den: f64 = (0..4).map(|j| (0..3).map(|c| phi_q[i][c] * phi_k[j][c]).sum::<f64>()).sum();
            (0..3)
                .map(|e| {
                    let num: f64 =
                        (0..4).map(|j| (0..3).map(|c| phi_q[i][c] * phi_k[j][c]).sum::<f64>() * v[j][e]).sum();
                    num / den
                })
                .collect()
        })
        .collect();
    let diff = max_diff(case.run(true).data(), &case.finish(&attended));
    assert!(diff < 1e-6, "max diff {diff}");
}

fn identity_projection_case(c: usize, h: usize, w: usize, zero_qk: bool) -> AttnCase {
    let mut case = AttnCase::random(c, h, w, 30);
    let mut qkv = vec![0.0; 3 * c * c];
    for i in 0..c {
        if !zero_qk {
            qkv[i * c + i] = 0.7;
            qkv[(c + i) * c + i] = -0.3;
        }
        qkv[(2 * c + i) * c + i] = 1.0;
    }
    case.qkv = Tensor::from_vec(&[3 * c, c, 1, 1], qkv).unwrap();
    case.out = Tensor::from_fn(&[c, c, 1, 1], |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 });
    case.out_bias = Tensor::zeros(&[c]);
    case
}

#[test]
fn zero_query_key_gives_uniform_attention() {
    let case = identity_projection_case(2, 3, 3, true);
    let got = case.run(false);
    for ch in 0..2 {
        let plane = &case.x.data()[ch * 9..(ch + 1) * 9];
        let mean = plane.iter().sum::<f64>() / 9.0;
        for p in 0..9 {
            assert!((got.data()[ch * 9 + p] - (plane[p] + mean)).abs() < 1e-12);
        }
    }
}

#[test]
fn single_position_linear_attention_returns_value() {
    let case = identity_projection_case(4, 1, 1, false);
    let got = case.run(true);
    for (g, x) in got.data().iter().zip(case.x.data()) {
        assert!((g - 2.0 * x).abs() < 1e-12);
    }
}

#[test]
fn linear_attention_cost_is_linear_in_positions() {
    let macs = |h: usize, w: usize, linear: bool| {
        let case = AttnCase::random(16, h, w, 40);
        reset_mac_counter();
        case.run(linear);
        mac_count() as f64
    };
    let ratio = macs(16, 32, true) / macs(16, 16, true);
    assert!((ratio - 2.0).abs() <= 0.1, "linear attention ratio {ratio}");
    // contrast: dot-product attention is quadratic in positions
    let quad = macs(16, 32, false) / macs(16, 16, false);
    assert!(quad > 3.0, "self attention ratio {quad}");
}

// ---- whole network ---------------------------------------------------------

fn tiny() -> DenoiserConfig {
    DenoiserConfig::preset("tiny").unwrap()
}

#[test]
fn output_shape_matches_input_for_presets() {
    for name in ["tiny", "default"] {
        let cfg = DenoiserConfig::preset(name).unwrap();
        let net = DenoiserNet::<f32>::new(cfg.clone(), 1).unwrap();
        for n in [1, 4] {
            let x = rng::normal_tensor(&mut rng::stream(2, "x", n as u64), &[n, 3, cfg.image_size, cfg.image_size]);
            let t: Vec<usize> = (0..n).map(|i| 1 + 97 * i).collect();
            let y = net.forward(&x, &t).unwrap();
            assert_eq!(y.shape(), x.shape(), "{name} batch {n}");
            assert!(y.all_finite());
        }
    }
}

#[test]
fn input_shape_and_timestep_count_are_checked() {
    let net = DenoiserNet::<f32>::new(tiny(), 1).unwrap();
    assert!(net.forward(&Tensor::zeros(&[1, 3, 32, 32]), &[1]).is_err());
    assert!(net.forward(&Tensor::zeros(&[1, 1, 16, 16]), &[1]).is_err());
    assert!(net.forward(&Tensor::zeros(&[2, 3, 16, 16]), &[1]).is_err());
}

#[test]
fn timestep_conditions_the_output() {
    let net = DenoiserNet::<f32>::new(tiny(), 3).unwrap();
    let x = rng::normal_tensor(&mut rng::stream(4, "x", 0), &[1, 3, 16, 16]);
    let a = net.forward(&x, &[10]).unwrap();
    let b = net.forward(&x, &[900]).unwrap();
    let dist: f32 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum();
    assert!(dist > 0.0);
}

#[test]
fn construction_and_forward_are_deterministic() {
    let a = DenoiserNet::<f32>::new(tiny(), 5).unwrap();
    let b = DenoiserNet::<f32>::new(tiny(), 5).unwrap();
    let c = DenoiserNet::<f32>::new(tiny(), 6).unwrap();
    assert_eq!(a.param_names(), c.param_names());
    for ((pa, pb), pc) in a.params().iter().zip(b.params()).zip(c.params()) {
        assert_eq!(pa, pb);
        assert_eq!(pa.shape(), pc.shape());
    }
    assert!(a.params().iter().zip(c.params()).any(|(pa, pc)| pa != pc));
    let x = rng::normal_tensor(&mut rng::stream(7, "x", 0), &[2, 3, 16, 16]);
    let ya = a.forward(&x, &[3, 500]).unwrap();
    let yb = b.forward(&x, &[3, 500]).unwrap();
    assert!(ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn group_norm_immediately_precedes_every_attention() {
    for name in DenoiserConfig::PRESETS {
        let cfg = DenoiserConfig::preset(name).unwrap();
        let net = DenoiserNet::<f32>::new(cfg.clone(), 1).unwrap();
        let x = Tensor::zeros(&[1, 3, cfg.image_size, cfg.image_size]);
        let state = net.forward_traced(&x, &[1]).unwrap();
        let trace = state.trace();
        let mut kinds = Vec::new();
        for (i, ev) in trace.iter().enumerate() {
            if let TraceEvent::Attention(_, kind) = ev {
                assert!(matches!(trace[i - 1], TraceEvent::GroupNorm(_)), "{name}: {:?}", &trace[i - 1]);
                kinds.push(*kind);
            }
        }
        assert!(kinds.contains(&AttentionKind::SelfAttention));
        assert!(kinds.contains(&AttentionKind::Linear));
    }
}

#[test]
fn standardized_kernels_have_zero_mean() {
    let cfg = DenoiserConfig::preset("default").unwrap();
    let net = DenoiserNet::<f32>::new(cfg, 8).unwrap();
    let state = net.forward_traced(&Tensor::zeros(&[1, 3, 64, 64]), &[1]).unwrap();
    let kernels = state.standardized_kernels();
    assert!(kernels.len() > 20);
    for (name, k) in kernels {
        let per_out = k.numel() / k.dim(0);
        for row in k.data().chunks(per_out) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / per_out as f64;
            assert!(mean.abs() < 1e-7, "{name}: mean {mean}");
        }
    }
}

#[test]
fn backward_requires_recorded_forward() {
    let net = DenoiserNet::<f64>::new(tiny(), 1).unwrap();
    let x = Tensor::zeros(&[1, 3, 16, 16]);
    let other = DenoiserNet::<f64>::new(DenoiserConfig { base_channels: 16, ..tiny() }, 1).unwrap();
    let state = other.forward_traced(&x, &[1]).unwrap();
    assert!(net.backward(&state, &Tensor::zeros(&[1, 3, 16, 16])).is_err());
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let net = DenoiserNet::<f64>::new(tiny(), 1).unwrap();
    let x = randn(&[2, 3, 16, 16], 9);
    let state = net.forward_traced(&x, &[4, 40]).unwrap();
    let grads = net.backward(&state, &Tensor::zeros(&[2, 3, 16, 16])).unwrap();
    assert_eq!(grads.len(), net.params().len());
    assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

/// `L(θ) = ⟨u, ε̂_θ(x, t)⟩` evaluated in 64-bit precision.
fn objective(net: &DenoiserNet<f64>, x: &Tensor<f64>, t: &[usize], u: &Tensor<f64>) -> f64 {
    let y = net.forward(x, t).unwrap();
    y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
}

fn perturbed(net: &DenoiserNet<f64>, tensor: usize, index: usize, delta: f64) -> DenoiserNet<f64> {
    let mut out = net.clone();
    let p = Arc::make_mut(&mut out.params_mut()[tensor]);
    p.data_mut()[index] += delta;
    out
}

/// Central-difference derivatives at 50 random scalar parameters.
fn finite_difference_samples(net: &DenoiserNet<f64>, x: &Tensor<f64>, t: &[usize], u: &Tensor<f64>) -> Vec<(usize, usize, f64)> {
    let sizes: Vec<usize> = net.params().iter().map(|p| p.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng::stream(11, "fd", 0);
    (0..50)
        .map(|_| {
            let mut flat = r.random_range(0..total);
            let mut tensor = 0;
            while flat >= sizes[tensor] {
                flat -= sizes[tensor];
                tensor += 1;
            }
            let value = net.params()[tensor].data()[flat];
            let h = 1e-3 * value.abs().max(1e-1);
            let central = |h: f64| {
                (objective(&perturbed(net, tensor, flat, h), x, t, u)
                    - objective(&perturbed(net, tensor, flat, -h), x, t, u))
                    / (2.0 * h)
            };
            // Richardson extrapolation cancels the O(h²) truncation term
            let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            (tensor, flat, fd)
        })
        .collect()
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn gradients_match_finite_differences() {
    let net = DenoiserNet::<f64>::new(tiny(), 21).unwrap();
    let x = randn(&[2, 3, 16, 16], 22);
    let t = [37, 640];
    let u = randn(&[2, 3, 16, 16], 23);
    let samples = finite_difference_samples(&net, &x, &t, &u);

    let state = net.forward_traced(&x, &t).unwrap();
    let grads64 = net.backward(&state, &u).unwrap();

    let net32 = net.cast::<f32>();
    let state32 = net32.forward_traced(&x.cast(), &t).unwrap();
    let grads32 = net32.backward(&state32, &u.cast()).unwrap();

    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for &(tensor, idx, fd) in &samples {
        worst64 = worst64.max(relative_error(grads64[tensor].data()[idx], fd));
        worst32 = worst32.max(relative_error(grads32[tensor].data()[idx] as f64, fd));
    }
    assert!(worst64 < 1e-6, "64-bit worst relative error {worst64}");
    assert!(worst32 < 1e-3, "32-bit worst relative error {worst32}");
}

mod properties {
    use proptest::prelude::*;
    use svpgen::denoiser::{DenoiserConfig, DenoiserNet};
    use svpgen::Tensor;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn forward_preserves_shape(
            levels in 1usize..4,
            base_half in 1usize..4,
            size_mult in 1usize..3,
            heads_two in any::<bool>(),
            batch in 1usize..3,
        ) {
            let base = 4 * base_half;
            let size = (1 << (levels - 1)) * 4 * size_mult;
            let cfg = DenoiserConfig {
                image_size: size,
                in_channels: 3,
                base_channels: base,
                channel_multipliers: (1..=levels).collect(),
                self_attention_resolutions: [size >> (levels - 1)].into(),
                linear_attention_resolutions: if levels > 1 { [size].into() } else { Default::default() },
                groups: 2,
                time_embed_dim: 16,
                heads: if heads_two { 2 } else { 1 },
            };
            let net = DenoiserNet::<f32>::new(cfg, 0).unwrap();
            let x = Tensor::from_fn(&[batch, 3, size, size], |i| ((i * 37) % 11) as f32 / 11.0 - 0.5);
            let t: Vec<usize> = (0..batch).map(|i| 1 + 10 * i).collect();
            let y = net.forward(&x, &t).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let good = DenoiserConfig::preset("tiny").unwrap();
        for bad in [
            DenoiserConfig { groups: 3, ..good.clone() },
            DenoiserConfig { channel_multipliers: vec![], ..good.clone() },
            DenoiserConfig { image_size: 15, ..good.clone() },
            DenoiserConfig { linear_attention_resolutions: [8].into(), ..good.clone() },
        ] {
            assert!(DenoiserNet::<f32>::new(bad, 0).is_err());
        }
        assert!(DenoiserConfig::preset("huge").is_err());
    }
}
