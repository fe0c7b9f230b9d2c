//! Residual-network particle classifiers, their training harness and
//! evaluation metrics.

pub mod metrics;
mod train;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::rng;
use crate::tensor::Tensor;

pub use metrics::{
    auprc, average_precision, confusion_matrix, export_misclassified, macro_precision, macro_precision_defined,
    precision_per_class, read_scores_csv, write_scores_csv, ConfusionMatrix3, ScoreRecord,
};
pub use train::{
    check_leakage, cross_entropy, evaluate, grid_search, train_classifier, train_on_data, write_grid_csv,
    ClassifierData, EpochStats, EvalReport, GridOutcome, GridSpec, TrainedClassifier, CHECKPOINT_KIND, EVAL_CSV_HEADER,
    GRID_CSV_HEADER,
};

pub const NUM_CLASSES: usize = 3;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Network presets.
///
/// | preset        | stem                         | stages (blocks × width)           | block      |
/// |---------------|------------------------------|-----------------------------------|------------|
/// | resnet8_tiny  | 3×3/2, 8                     | 1×8, 1×16/2, 1×32/2, 1×64/2       | basic      |
/// | resnet18      | 7×7/2, 64 + max-pool 3×3/2   | 2×64, 2×128/2, 2×256/2, 2×512/2   | basic      |
/// | resnet50      | 7×7/2, 64 + max-pool 3×3/2   | 3×64, 4×128/2, 6×256/2, 3×512/2   | bottleneck (×4) |
///
/// All end in global average pooling and a 3-way linear layer. Every
/// convolution is followed by batch normalization; projection shortcuts
/// (1×1 conv + BN) are used where shape changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet8Tiny,
    Resnet18,
    Resnet50,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Resnet8Tiny, Architecture::Resnet18, Architecture::Resnet50];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Resnet8Tiny => "resnet8_tiny",
            Architecture::Resnet18 => "resnet18",
            Architecture::Resnet50 => "resnet50",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| Error::UnknownPreset {
            name: s.into(),
            valid: Self::ALL.map(|a| a.as_str()).join(", "),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub architecture: Architecture,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Resnet18,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            image_size: 64,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Param("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Param("learning rate and weight decay must be non-negative".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Param(format!("image size {} is below the minimum of 16", self.image_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvBn,
    max_pool: bool,
    blocks: Vec<Block>,
    fc_weight: usize,
    fc_bias: usize,
}

#[derive(Default)]
struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    bn_channels: Vec<usize>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let weight = self.add(format!("{name}.weight"), vec![cout, cin, k, k]);
        let gamma = self.add(format!("{name}.bn.gamma"), vec![cout]);
        let beta = self.add(format!("{name}.bn.beta"), vec![cout]);
        self.bn_channels.push(cout);
        ConvBn { weight, gamma, beta, bn: self.bn_channels.len() - 1, stride, pad: k / 2 }
    }
}

fn build_layout(arch: Architecture) -> (Layout, Builder) {
    let mut b = Builder::default();
    let (stem, max_pool, kind, stages): (ConvBn, bool, BlockKind, Vec<(usize, usize)>) = match arch {
        Architecture::Resnet8Tiny => {
            (b.conv_bn("stem", 3, 8, 3, 2), false, BlockKind::Basic, vec![(1, 8), (1, 16), (1, 32), (1, 64)])
        }
        Architecture::Resnet18 => {
            (b.conv_bn("stem", 3, 64, 7, 2), true, BlockKind::Basic, vec![(2, 64), (2, 128), (2, 256), (2, 512)])
        }
        Architecture::Resnet50 => (
            b.conv_bn("stem", 3, 64, 7, 2),
            true,
            BlockKind::Bottleneck,
            vec![(3, 64), (4, 128), (6, 256), (3, 512)],
        ),
    };
    let mut cin = match arch {
        Architecture::Resnet8Tiny => 8,
        _ => 64,
    };
    let mut blocks = Vec::new();
    for (s, &(count, width)) in stages.iter().enumerate() {
        for i in 0..count {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            let name = format!("layer{}.{i}", s + 1);
            let (convs, cout) = match kind {
                BlockKind::Basic => (
                    vec![
                        b.conv_bn(&format!("{name}.conv1"), cin, width, 3, stride),
                        b.conv_bn(&format!("{name}.conv2"), width, width, 3, 1),
                    ],
                    width,
                ),
                BlockKind::Bottleneck => (
                    vec![
                        b.conv_bn(&format!("{name}.conv1"), cin, width, 1, 1),
                        b.conv_bn(&format!("{name}.conv2"), width, width, 3, stride),
                        b.conv_bn(&format!("{name}.conv3"), width, width * 4, 1, 1),
                    ],
                    width * 4,
                ),
            };
            let shortcut =
                (stride != 1 || cin != cout).then(|| b.conv_bn(&format!("{name}.shortcut"), cin, cout, 1, stride));
            blocks.push(Block { convs, shortcut });
            cin = cout;
        }
    }
    let fc_weight = b.add("fc.weight".into(), vec![NUM_CLASSES, cin]);
    let fc_bias = b.add("fc.bias".into(), vec![NUM_CLASSES]);
    (Layout { stem, max_pool, blocks, fc_weight, fc_bias }, b)
}

/// Per-channel running batch-norm statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ClassifierNet {
    config: ClassifierConfig,
    names: Vec<String>,
    params: Vec<Arc<Tensor<f32>>>,
    bn: Vec<BnStats>,
    layout: Layout,
}

/// Forward pass recorded for training.
pub struct TrainPass {
    graph: Graph<f32>,
    params: Vec<Var>,
    logits: Var,
    batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl TrainPass {
    pub fn logits(&self) -> Arc<Tensor<f32>> {
        self.graph.value(self.logits)
    }
}

impl ClassifierNet {
    /// He-normal convolutions, uniform `±1/√in` linear layer, BN scale 1
    /// and offset 0; values from the stream `("classify/init", 0)`.
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(config.architecture);
        let mut r = rng::stream(config.seed, "classify/init", 0);
        let fc_in = b.shapes[layout.fc_weight][1];
        let params = b
            .names
            .iter()
            .zip(&b.shapes)
            .map(|(name, shape)| {
                let t = if name.ends_with(".gamma") {
                    Tensor::full(shape, 1.0)
                } else if name.ends_with(".beta") {
                    Tensor::zeros(shape)
                } else if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                    Tensor::from_fn(shape, |_| normal.sample(&mut r) as f32)
                } else {
                    let bound = 1.0 / (fc_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| rand::Rng::random_range(&mut r, -bound..bound) as f32)
                };
                Arc::new(t)
            })
            .collect();
        let bn = b.bn_channels.iter().map(|&c| BnStats { mean: vec![0.0; c], var: vec![1.0; c] }).collect();
        Ok(Self { config, names: b.names, params, bn, layout })
    }

    /// Network from stored parameters and running statistics.
    pub fn from_parts(config: ClassifierConfig, named: Vec<(String, Tensor<f32>)>, bn: Vec<BnStats>) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(config.architecture);
        if named.len() != b.names.len() || bn.len() != b.bn_channels.len() {
            return Err(Error::Shape(format!(
                "{} needs {} parameter arrays and {} norm layers, got {} and {}",
                config.architecture,
                b.names.len(),
                b.bn_channels.len(),
                named.len(),
                bn.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("parameter {name} {:?} does not match {want} {shape:?}", t.shape())));
            }
            params.push(Arc::new(t));
        }
        for (s, &c) in bn.iter().zip(&b.bn_channels) {
            if s.mean.len() != c || s.var.len() != c {
                return Err(Error::Shape("running statistics do not match the architecture".into()));
            }
        }
        Ok(Self { config, names: b.names, params, bn, layout })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor<f32>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arc<Tensor<f32>>] {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!("classifier expects (N, 3, {s}, {s}), got {:?}", x.shape())));
        }
        Ok(())
    }

    fn run(&self, g: &Graph<f32>, p: &[Var], x: Var, train: bool) -> Result<(Var, Vec<(Vec<f64>, Vec<f64>)>)> {
        let mut stats = vec![(Vec::new(), Vec::new()); self.bn.len()];
        let mut conv_bn = |spec: &ConvBn, x: Var, relu: bool| -> Result<Var> {
            let y = g.conv2d(x, p[spec.weight], None, spec.stride, spec.pad)?;
            let y = if train {
                let (y, m, v) = g.batch_norm_train(y, p[spec.gamma], p[spec.beta], BN_EPS)?;
                stats[spec.bn] = (m, v);
                y
            } else {
                let s = &self.bn[spec.bn];
                g.batch_norm_eval(y, p[spec.gamma], p[spec.beta], &s.mean, &s.var, BN_EPS)?
            };
            Ok(if relu { g.relu(y) } else { y })
        };
        let l = &self.layout;
        let mut h = conv_bn(&l.stem, x, true)?;
        if l.max_pool {
            h = g.max_pool(h, 3, 2, 1)?;
        }
        for blk in &l.blocks {
            let mut y = h;
            let last = blk.convs.len() - 1;
            for (i, c) in blk.convs.iter().enumerate() {
                y = conv_bn(c, y, i != last)?;
            }
            let skip = match &blk.shortcut {
                Some(s) => conv_bn(s, h, false)?,
                None => h,
            };
            h = g.relu(g.add(y, skip)?);
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = g.linear(pooled, p[l.fc_weight], Some(p[l.fc_bias]))?;
        Ok((logits, stats))
    }

    /// Class logits with running statistics (inference mode).
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        let g = Graph::inference();
        let p: Vec<Var> = self.params.iter().map(|t| g.param(t.clone())).collect();
        let xv = g.constant(x.clone());
        let (logits, _) = self.run(&g, &p, xv, false)?;
        Ok((*g.value(logits)).clone())
    }

    /// Softmax class probabilities, one row per image.
    pub fn scores(&self, x: &Tensor<f32>) -> Result<Vec<[f64; 3]>> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Training-mode forward pass using batch statistics.
    pub fn forward_train(&self, x: &Tensor<f32>) -> Result<TrainPass> {
        self.check_input(x)?;
        let graph = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|t| graph.param(t.clone())).collect();
        let xv = graph.constant(x.clone());
        let (logits, batch_stats) = self.run(&graph, &params, xv, true)?;
        Ok(TrainPass { graph, params, logits, batch_stats })
    }

    /// Parameter gradients for `upstream = ∂L/∂logits`, and folds the
    /// pass's batch statistics into the running averages.
    pub fn backward(&mut self, pass: TrainPass, upstream: Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        if pass.params.len() != self.params.len() {
            return Err(Error::Param("training pass belongs to a different network".into()));
        }
        let mut grads = pass.graph.backward(pass.logits, upstream)?;
        let out = pass
            .params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        for (run, (m, v)) in self.bn.iter_mut().zip(pass.batch_stats) {
            for (r, b) in run.mean.iter_mut().zip(m) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in run.var.iter_mut().zip(v) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        Ok(out)
    }
}

pub fn softmax_rows(logits: &Tensor<f32>) -> Vec<[f64; 3]> {
    logits
        .data()
        .chunks(NUM_CLASSES)
        .map(|row| {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let e: [f64; 3] = std::array::from_fn(|i| (row[i] as f64 - m).exp());
            let s: f64 = e.iter().sum();
            e.map(|v| v / s)
        })
        .collect()
}
