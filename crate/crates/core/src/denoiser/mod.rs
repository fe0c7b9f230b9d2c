//! ε-prediction U-Net: weight-standardized convolutions, group
//! normalization in front of every attention layer, self-attention at
//! coarse resolutions and linear attention at finer ones.

pub mod layers;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub use layers::{
    group_norm_forward, linear_attention_forward, self_attention_forward, time_embedding,
    ws_conv_forward, AttentionWeights, NORM_EPS,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub self_attention_resolutions: BTreeSet<usize>,
    pub linear_attention_resolutions: BTreeSet<usize>,
    pub groups: usize,
    pub time_embed_dim: usize,
    pub heads: usize,
}

impl DenoiserConfig {
    pub const PRESETS: [&'static str; 3] = ["default", "small", "tiny"];

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "default" => Self {
                image_size: 64,
                in_channels: 3,
                base_channels: 64,
                channel_multipliers: vec![1, 2, 4, 8],
                self_attention_resolutions: [8].into(),
                linear_attention_resolutions: [32, 16].into(),
                groups: 8,
                time_embed_dim: 256,
                heads: 1,
            },
            // desk-scale variant of the default layout at full resolution
            "small" => Self {
                image_size: 64,
                in_channels: 3,
                base_channels: 16,
                channel_multipliers: vec![1, 2, 2, 4],
                self_attention_resolutions: [8].into(),
                linear_attention_resolutions: [32, 16].into(),
                groups: 4,
                time_embed_dim: 64,
                heads: 1,
            },
            "tiny" => Self {
                image_size: 16,
                in_channels: 3,
                base_channels: 8,
                channel_multipliers: vec![1, 2],
                self_attention_resolutions: [8].into(),
                linear_attention_resolutions: [16].into(),
                groups: 4,
                time_embed_dim: 32,
                heads: 1,
            },
            _ => {
                return Err(Error::UnknownPreset {
                    name: name.into(),
                    valid: Self::PRESETS.join(", "),
                })
            }
        };
        Ok(cfg)
    }

    pub fn channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    /// Spatial size at the bottleneck.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> (self.channel_multipliers.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be non-empty and positive".into());
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.groups == 0 || self.heads == 0 {
            return bad("channel, group and head counts must be positive".into());
        }
        if self.base_channels % 2 != 0 {
            return bad(format!("base channels must be even, got {}", self.base_channels));
        }
        for c in std::iter::once(self.base_channels).chain(self.channels()) {
            if c % self.groups != 0 {
                return bad(format!("{c} channels not divisible by {} groups", self.groups));
            }
            if c % self.heads != 0 {
                return bad(format!("{c} channels not divisible by {} heads", self.heads));
            }
        }
        let levels = self.channel_multipliers.len() as u32;
        if levels > 16 || self.image_size == 0 || self.image_size % (1usize << (levels - 1)) != 0 {
            return bad(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                levels - 1
            ));
        }
        if let Some(r) = self.self_attention_resolutions.intersection(&self.linear_attention_resolutions).next() {
            return bad(format!("resolution {r} listed for both attention kinds"));
        }
        if self.time_embed_dim == 0 {
            return bad("time embedding dimension must be positive".into());
        }
        Ok(())
    }

    fn attention_at(&self, res: usize) -> Option<AttentionKind> {
        if self.self_attention_resolutions.contains(&res) {
            Some(AttentionKind::SelfAttention)
        } else if self.linear_attention_resolutions.contains(&res) {
            Some(AttentionKind::Linear)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttention,
    Linear,
}

/// One layer application recorded during a traced forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    WsConv(String),
    Conv(String),
    GroupNorm(String),
    Attention(String, AttentionKind),
    Downsample,
    Upsample,
    SkipConcat,
}

// ---- layer descriptors: indices into the parameter list ------------------

#[derive(Clone, Debug)]
struct ConvSpec {
    name: String,
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    standardized: bool,
}

#[derive(Clone, Debug)]
struct NormSpec {
    name: String,
    scale: usize,
    offset: usize,
}

#[derive(Clone, Debug)]
struct LinearSpec {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvSpec,
    norm1: NormSpec,
    time: LinearSpec,
    conv2: ConvSpec,
    norm2: NormSpec,
    skip: Option<ConvSpec>,
    out_channels: usize,
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    name: String,
    norm: NormSpec,
    qkv: usize,
    out: usize,
    out_bias: usize,
    kind: AttentionKind,
}

#[derive(Clone, Debug)]
struct Level {
    res: ResBlock,
    attn: Option<AttentionBlock>,
    resample: Option<ConvSpec>,
}

#[derive(Clone, Debug)]
struct Layout {
    time1: LinearSpec,
    time2: LinearSpec,
    input: ConvSpec,
    down: Vec<Level>,
    mid1: ResBlock,
    mid_attn: AttentionBlock,
    mid2: ResBlock,
    up: Vec<Level>,
    out_norm: NormSpec,
    output: ConvSpec,
}

enum Init {
    Uniform(f64),
    Const(f64),
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, standardized: bool) -> ConvSpec {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let weight = self.add(format!("{name}.weight"), &[cout, cin, k, k], Init::Uniform(bound));
        let bias = Some(self.add(format!("{name}.bias"), &[cout], Init::Uniform(bound)));
        ConvSpec { name: name.into(), weight, bias, stride, standardized }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormSpec {
        NormSpec {
            name: name.into(),
            scale: self.add(format!("{name}.scale"), &[c], Init::Const(1.0)),
            offset: self.add(format!("{name}.offset"), &[c], Init::Const(0.0)),
        }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> LinearSpec {
        let bound = 1.0 / (fin as f64).sqrt();
        LinearSpec {
            weight: self.add(format!("{name}.weight"), &[fout, fin], Init::Uniform(bound)),
            bias: self.add(format!("{name}.bias"), &[fout], Init::Uniform(bound)),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, ted: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, true),
            norm1: self.norm(&format!("{name}.norm1"), cout),
            time: self.linear(&format!("{name}.time"), ted, 2 * cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
            out_channels: cout,
        }
    }

    fn attention(&mut self, name: &str, c: usize, kind: AttentionKind) -> AttentionBlock {
        let bound = 1.0 / (c as f64).sqrt();
        AttentionBlock {
            name: name.into(),
            norm: self.norm(&format!("{name}.norm"), c),
            qkv: self.add(format!("{name}.qkv.weight"), &[3 * c, c, 1, 1], Init::Uniform(bound)),
            out: self.add(format!("{name}.out.weight"), &[c, c, 1, 1], Init::Uniform(bound)),
            out_bias: self.add(format!("{name}.out.bias"), &[c], Init::Uniform(bound)),
            kind,
        }
    }
}

fn build_layout(cfg: &DenoiserConfig) -> (Layout, Builder) {
    let mut b = Builder { names: Vec::new(), shapes: Vec::new(), inits: Vec::new() };
    let (base, ted) = (cfg.base_channels, cfg.time_embed_dim);
    let chans = cfg.channels();
    let levels = chans.len();

    let time1 = b.linear("time.0", base, ted);
    let time2 = b.linear("time.1", ted, ted);
    let input = b.conv("input", cfg.in_channels, base, 3, 1, true);

    let mut down = Vec::new();
    let (mut cur, mut res) = (base, cfg.image_size);
    for (i, &c) in chans.iter().enumerate() {
        let name = format!("down.{i}");
        let block = b.res_block(&format!("{name}.res"), cur, c, ted);
        let attn = cfg.attention_at(res).map(|k| b.attention(&format!("{name}.attn"), c, k));
        let resample = (i + 1 < levels).then(|| b.conv(&format!("{name}.downsample"), c, c, 3, 2, true));
        down.push(Level { res: block, attn, resample });
        if i + 1 < levels {
            res /= 2;
        }
        cur = c;
    }

    let mid1 = b.res_block("mid.res1", cur, cur, ted);
    let mid_attn = b.attention("mid.attn", cur, AttentionKind::SelfAttention);
    let mid2 = b.res_block("mid.res2", cur, cur, ted);

    let mut up = Vec::new();
    for (i, &c) in chans.iter().enumerate().rev() {
        let name = format!("up.{i}");
        let block = b.res_block(&format!("{name}.res"), cur + c, c, ted);
        let attn = cfg.attention_at(res).map(|k| b.attention(&format!("{name}.attn"), c, k));
        let out_c = if i > 0 { chans[i - 1] } else { base };
        let resample = (i > 0).then(|| b.conv(&format!("{name}.upsample"), c, out_c, 3, 1, true));
        up.push(Level { res: block, attn, resample });
        if i > 0 {
            res *= 2;
        }
        cur = if i > 0 { out_c } else { c };
    }

    let out_norm = b.norm("out.norm", cur);
    let output = b.conv("out.conv", cur, cfg.in_channels, 1, 1, false);
    let layout = Layout { time1, time2, input, down, mid1, mid_attn, mid2, up, out_norm, output };
    (layout, b)
}

/// Noise-prediction network `ε̂ = ε_θ(x_t, t)`.
#[derive(Clone, Debug)]
pub struct DenoiserNet<T: Scalar> {
    config: DenoiserConfig,
    names: Vec<String>,
    params: Vec<Arc<Tensor<T>>>,
    layout: Layout,
}

/// Everything a backward pass needs from one recorded forward pass.
pub struct ForwardState<T: Scalar> {
    graph: Graph<T>,
    params: Vec<Var>,
    output: Var,
    trace: Vec<TraceEvent>,
    kernels: Vec<(String, Var)>,
}

impl<T: Scalar> ForwardState<T> {
    pub fn output(&self) -> Arc<Tensor<T>> {
        self.graph.value(self.output)
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    /// Standardized kernels actually used by the convolutions, by layer name.
    pub fn standardized_kernels(&self) -> Vec<(String, Arc<Tensor<T>>)> {
        self.kernels.iter().map(|(n, v)| (n.clone(), self.graph.value(*v))).collect()
    }
}

struct Pass<'a, T: Scalar> {
    g: &'a Graph<T>,
    p: &'a [Var],
    groups: usize,
    heads: usize,
    trace: Vec<TraceEvent>,
    kernels: Vec<(String, Var)>,
}

impl<T: Scalar> Pass<'_, T> {
    fn conv(&mut self, spec: &ConvSpec, x: Var) -> Result<Var> {
        let bias = spec.bias.map(|b| self.p[b]);
        if spec.standardized {
            let (y, k) = ws_conv_forward(self.g, x, self.p[spec.weight], bias, spec.stride)?;
            self.trace.push(TraceEvent::WsConv(spec.name.clone()));
            self.kernels.push((spec.name.clone(), k));
            Ok(y)
        } else {
            let k = self.g.shape(self.p[spec.weight])[2];
            self.trace.push(TraceEvent::Conv(spec.name.clone()));
            self.g.conv2d(x, self.p[spec.weight], bias, spec.stride, k / 2)
        }
    }

    fn norm(&mut self, spec: &NormSpec, x: Var) -> Result<Var> {
        self.trace.push(TraceEvent::GroupNorm(spec.name.clone()));
        group_norm_forward(self.g, x, self.groups, self.p[spec.scale], self.p[spec.offset])
    }

    fn linear(&self, spec: &LinearSpec, x: Var) -> Result<Var> {
        self.g.linear(x, self.p[spec.weight], Some(self.p[spec.bias]))
    }

    fn res_block(&mut self, blk: &ResBlock, x: Var, temb: Var) -> Result<Var> {
        let n = self.g.shape(x)[0];
        let c = blk.out_channels;
        let ss = self.linear(&blk.time, self.g.silu(temb))?;
        let ss = self.g.reshape(ss, &[n, 2 * c, 1, 1])?;
        let scale = self.g.reshape(self.g.slice_channels(ss, 0, c)?, &[n, c])?;
        let shift = self.g.reshape(self.g.slice_channels(ss, c, c)?, &[n, c])?;

        let h = self.conv(&blk.conv1, x)?;
        let h = self.norm(&blk.norm1, h)?;
        let h = self.g.scale_shift(h, scale, shift)?;
        let h = self.g.silu(h);
        let h = self.conv(&blk.conv2, h)?;
        let h = self.norm(&blk.norm2, h)?;
        let h = self.g.silu(h);
        let skip = match &blk.skip {
            Some(s) => self.conv(s, x)?,
            None => x,
        };
        self.g.add(h, skip)
    }

    fn attention(&mut self, blk: &AttentionBlock, x: Var) -> Result<Var> {
        let normed = self.norm(&blk.norm, x)?;
        self.trace.push(TraceEvent::Attention(blk.name.clone(), blk.kind));
        let w = AttentionWeights { qkv: self.p[blk.qkv], out: self.p[blk.out], out_bias: self.p[blk.out_bias] };
        let attended = match blk.kind {
            AttentionKind::SelfAttention => layers::self_attention(self.g, normed, &w, self.heads)?,
            AttentionKind::Linear => layers::linear_attention(self.g, normed, &w, self.heads)?,
        };
        // the residual path carries the un-normalized input
        self.g.add(x, attended)
    }
}

impl<T: Scalar> DenoiserNet<T> {
    /// Freshly initialized network; parameter values are drawn from the
    /// stream `("denoiser/init", 0)` of `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(&config);
        let mut r = rng::stream(seed, "denoiser/init", 0);
        let params = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(shape, init)| {
                Arc::new(match *init {
                    Init::Const(v) => Tensor::full(shape, T::from_f64_lossy(v)),
                    Init::Uniform(bound) => {
                        Tensor::from_fn(shape, |_| T::from_f64_lossy(r.random_range(-bound..bound)))
                    }
                })
            })
            .collect();
        Ok(Self { config, names: b.names, params, layout })
    }

    /// Network with given parameter values, in [`Self::param_names`] order.
    pub fn from_params(config: DenoiserConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(&config);
        if named.len() != b.names.len() {
            return Err(Error::Shape(format!(
                "config needs {} parameter arrays, got {}",
                b.names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want_shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            params.push(Arc::new(t));
        }
        Ok(Self { config, names: b.names, params, layout })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arc<Tensor<T>>] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserNet<U> {
        DenoiserNet {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| Arc::new(p.cast())).collect(),
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>, t: &[usize]) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::Shape(format!(
                "denoiser expects N×{}×{s}×{s}, got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        if t.len() != n {
            return Err(Error::Shape(format!("{} timesteps for batch of {n}", t.len())));
        }
        Ok(())
    }

    fn run(&self, g: Graph<T>, x: &Tensor<T>, t: &[usize]) -> Result<ForwardState<T>> {
        self.check_input(x, t)?;
        let n = t.len();
        let base = self.config.base_channels;
        let mut emb = Vec::with_capacity(n * base);
        for &ti in t {
            emb.extend(time_embedding(ti as f64, base)?.into_iter().map(T::from_f64_lossy));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let l = &self.layout;
        let mut pass = Pass {
            g: &g,
            p: &params,
            groups: self.config.groups,
            heads: self.config.heads,
            trace: Vec::new(),
            kernels: Vec::new(),
        };

        let temb = g.constant(Tensor::from_vec(&[n, base], emb)?);
        let temb = pass.linear(&l.time1, temb)?;
        let temb = pass.linear(&l.time2, g.silu(temb))?;

        let mut h = pass.conv(&l.input, g.constant(x.clone()))?;
        let mut skips = Vec::with_capacity(l.down.len());
        for level in &l.down {
            h = pass.res_block(&level.res, h, temb)?;
            if let Some(a) = &level.attn {
                h = pass.attention(a, h)?;
            }
            skips.push(h);
            if let Some(d) = &level.resample {
                pass.trace.push(TraceEvent::Downsample);
                h = pass.conv(d, h)?;
            }
        }
        h = pass.res_block(&l.mid1, h, temb)?;
        h = pass.attention(&l.mid_attn, h)?;
        h = pass.res_block(&l.mid2, h, temb)?;
        for level in &l.up {
            pass.trace.push(TraceEvent::SkipConcat);
            h = g.concat_channels(h, skips.pop().expect("one skip per level"))?;
            h = pass.res_block(&level.res, h, temb)?;
            if let Some(a) = &level.attn {
                h = pass.attention(a, h)?;
            }
            if let Some(u) = &level.resample {
                pass.trace.push(TraceEvent::Upsample);
                h = g.upsample_nearest2(h)?;
                h = pass.conv(u, h)?;
            }
        }
        h = pass.norm(&l.out_norm, h)?;
        h = g.silu(h);
        let output = pass.conv(&l.output, h)?;
        let (trace, kernels) = (pass.trace, pass.kernels);
        Ok(ForwardState { graph: g, params, output, trace, kernels })
    }

    /// Noise prediction without gradient bookkeeping.
    pub fn forward(&self, x: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let state = self.run(Graph::inference(), x, t)?;
        Ok((*state.output()).clone())
    }

    /// Forward pass that records what [`Self::backward`] needs.
    pub fn forward_traced(&self, x: &Tensor<T>, t: &[usize]) -> Result<ForwardState<T>> {
        self.run(Graph::new(), x, t)
    }

    /// Gradients of `⟨upstream, ε̂⟩` with respect to every parameter, in
    /// [`Self::param_names`] order.
    pub fn backward(&self, state: &ForwardState<T>, upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if !state.graph.is_recording() {
            return Err(Error::Param("missing forward state: forward pass was not recorded".into()));
        }
        let matches = state.params.len() == self.params.len()
            && state.params.iter().zip(&self.params).all(|(v, p)| state.graph.shape(*v) == p.shape());
        if !matches {
            return Err(Error::Param("missing forward state: recorded for a different network".into()));
        }
        let mut grads = state.graph.backward(state.output, upstream.clone())?;
        Ok(state
            .params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect())
    }
}
