use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    auprc, confusion_matrix, macro_precision_defined, mean_of_defined, precision_per_class, ConfusionMatrix3, ScoreRecord,
};
use super::{BnStats, ClassifierConfig, ClassifierNet, NUM_CLASSES};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::imageio::{load_standardized, DatasetManifest, Label};
use crate::optim::{Adam, OptimizerKind};
use crate::rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "classifier";
const EVAL_BATCH: usize = 64;

/// Labeled images held in memory, in model range.
#[derive(Clone, Debug)]
pub struct ClassifierData {
    pub images: Tensor<f32>,
    pub labels: Vec<Label>,
    pub paths: Vec<String>,
}

impl ClassifierData {
    pub fn load(manifest: &DatasetManifest, root: &Path, size: usize) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Manifest(format!("manifest {} is empty", manifest.split_name)));
        }
        let files: Vec<PathBuf> = manifest.records.iter().map(|r| root.join(&r.path)).collect();
        let images = load_standardized(&files, size)?.to_model_range()?.into_tensor();
        Ok(Self {
            images,
            labels: manifest.records.iter().map(|r| r.label).collect(),
            paths: manifest.records.iter().map(|r| r.path.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let (_, c, h, w) = self.images.dims4()?;
        let per = c * h * w;
        let mut buf = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            buf.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::from_vec(&[idx.len(), c, h, w], buf)
    }
}

/// Refuses train/validation manifests that share any path.
pub fn check_leakage(train: &DatasetManifest, val: &DatasetManifest) -> Result<()> {
    let train_paths: HashSet<&str> = train.records.iter().map(|r| r.path.as_str()).collect();
    let shared: Vec<&str> =
        val.records.iter().map(|r| r.path.as_str()).filter(|p| train_paths.contains(p)).collect();
    match shared.first() {
        None => Ok(()),
        Some(first) => Err(Error::Leakage { count: shared.len(), first: first.to_string() }),
    }
}

/// Mean cross-entropy of `(N, 3)` logits and its gradient with respect to
/// them.
pub fn cross_entropy(logits: &Tensor<f32>, labels: &[Label]) -> Result<(f64, Tensor<f32>)> {
    if logits.shape() != [labels.len(), NUM_CLASSES] {
        return Err(Error::Shape(format!("logits {:?} for {} labels", logits.shape(), labels.len())));
    }
    let n = labels.len() as f64;
    let probs = super::softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.numel());
    for (p, l) in probs.iter().zip(labels) {
        loss -= p[l.index()].max(f64::MIN_POSITIVE).ln();
        for (k, &pk) in p.iter().enumerate() {
            let target = if k == l.index() { 1.0 } else { 0.0 };
            grad.push(((pk - target) / n) as f32);
        }
    }
    Ok((loss / n, Tensor::from_vec(logits.shape(), grad)?))
}

/// Evaluation of one classifier on one labeled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ClassifierConfig,
    pub confusion: ConfusionMatrix3,
    /// `None` where no image was predicted as that class.
    pub precision_per_class: [Option<f64>; 3],
    /// Mean over the defined class precisions.
    pub macro_precision: f64,
    /// `None` when some class has no validation images.
    pub auprc: Option<f64>,
    pub accuracy: f64,
    pub n: usize,
}

/// Flat report columns in the paper's table order (percentages).
pub const EVAL_CSV_HEADER: &str = "split,model,silicone_oil,air_bubble,protein,macro,auprc";

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_default()
}

impl EvalReport {
    pub fn from_records(config: ClassifierConfig, records: &[ScoreRecord]) -> Result<Self> {
        let report = Self::quiet(config, records)?;
        macro_precision_defined(&report.precision_per_class);
        Ok(report)
    }

    /// As [`Self::from_records`] without warning about undefined classes;
    /// used for the per-epoch validation passes.
    fn quiet(config: ClassifierConfig, records: &[ScoreRecord]) -> Result<Self> {
        let confusion = confusion_matrix(records)?;
        let precision = precision_per_class(&confusion);
        Ok(Self {
            config,
            confusion,
            precision_per_class: precision,
            macro_precision: mean_of_defined(&precision),
            auprc: auprc(records).ok(),
            accuracy: confusion.accuracy(),
            n: records.len(),
        })
    }

    pub fn csv_row(&self, split: &str) -> String {
        let p = &self.precision_per_class;
        format!(
            "{split},{},{},{},{},{},{}",
            self.config.architecture,
            pct(p[0]),
            pct(p[1]),
            pct(p[2]),
            pct(Some(self.macro_precision)),
            pct(self.auprc)
        )
    }
}

/// Softmax scores for every image of `data`.
pub fn evaluate(net: &ClassifierNet, data: &ClassifierData) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        for (&i, scores) in chunk.iter().zip(net.scores(&data.gather(chunk)?)?) {
            out.push(ScoreRecord { scores, label: data.labels[i], path: data.paths[i].clone() });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_macro_precision: f64,
}

#[derive(Debug)]
pub struct TrainedClassifier {
    /// Weights of the epoch with the best validation macro precision.
    pub net: ClassifierNet,
    pub report: EvalReport,
    pub records: Vec<ScoreRecord>,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
    /// Training stopped early on a non-finite loss.
    pub diverged: bool,
}

/// Cross-entropy training with per-epoch validation and best-on-validation
/// selection. A non-finite loss ends training (reported via `diverged`)
/// rather than failing, so that unstable grid points still yield a report.
pub fn train_on_data(cfg: &ClassifierConfig, train: &ClassifierData, val: &ClassifierData) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Param("training and validation sets must be non-empty".into()));
    }
    let mut net = ClassifierNet::new(cfg.clone())?;
    let mut opt = Adam::new(cfg.optimizer.config(cfg.learning_rate, cfg.weight_decay), net.params());
    let mut best: Option<(ClassifierNet, EvalReport, Vec<ScoreRecord>, usize)> = None;
    let mut history = Vec::new();
    let mut diverged = false;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "classify/shuffle", epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let x = train.gather(idx)?;
            let labels: Vec<Label> = idx.iter().map(|&i| train.labels[i]).collect();
            let pass = net.forward_train(&x)?;
            let logits = pass.logits();
            let (loss, upstream) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() || !upstream.all_finite() {
                log::warn!("{}: non-finite loss in epoch {epoch}; stopping", cfg.architecture);
                diverged = true;
                break 'epochs;
            }
            correct += super::softmax_rows(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| ScoreRecord { scores: **p, label: **l, path: String::new() }.predicted() == **l)
                .count();
            loss_sum += loss * idx.len() as f64;
            let grads = net.backward(pass, upstream)?;
            opt.step(net.params_mut(), &grads)?;
        }
        let records = evaluate(&net, val)?;
        let report = EvalReport::quiet(cfg.clone(), &records)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_macro_precision: report.macro_precision,
        });
        if best.as_ref().is_none_or(|b| report.macro_precision > b.1.macro_precision) {
            best = Some((net.clone(), report, records, epoch));
        }
    }
    let (net, report, records, best_epoch) = match best {
        Some(b) => b,
        None => {
            let records = evaluate(&net, val)?;
            let report = EvalReport::quiet(cfg.clone(), &records)?;
            (net, report, records, 0)
        }
    };
    // warn once, for the selected epoch only
    macro_precision_defined(&report.precision_per_class);
    Ok(TrainedClassifier { net, report, records, best_epoch, history, diverged })
}

/// Leakage-guarded training from manifests; paths resolve against `root`.
pub fn train_classifier(
    cfg: &ClassifierConfig,
    train: &DatasetManifest,
    val: &DatasetManifest,
    root: &Path,
) -> Result<TrainedClassifier> {
    check_leakage(train, val)?;
    let train = ClassifierData::load(train, root, cfg.image_size)?;
    let val = ClassifierData::load(val, root, cfg.image_size)?;
    train_on_data(cfg, &train, &val)
}

/// Hyper-parameter grid, enumerated optimizer-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub optimizers: Vec<OptimizerKind>,
    pub learning_rates: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl GridSpec {
    /// 2 optimizers × 7 learning rates × 3 weight decays × 3 batch sizes.
    pub fn paper() -> Self {
        Self {
            optimizers: OptimizerKind::ALL.to_vec(),
            learning_rates: vec![1e-5, 5e-4, 1e-4, 5e-3, 1e-3, 5e-2, 1e-2],
            weight_decays: vec![1e-5, 1e-4, 1e-3],
            batch_sizes: vec![32, 64, 128],
        }
    }

    pub fn len(&self) -> usize {
        self.optimizers.len() * self.learning_rates.len() * self.weight_decays.len() * self.batch_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every grid point applied to `base`; run `i` gets its own seed derived
    /// from `base.seed`.
    pub fn configs(&self, base: &ClassifierConfig) -> Vec<ClassifierConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &optimizer in &self.optimizers {
            for &learning_rate in &self.learning_rates {
                for &weight_decay in &self.weight_decays {
                    for &batch_size in &self.batch_sizes {
                        let seed = rng::derive_seed(base.seed, "classify/grid", out.len() as u64);
                        out.push(ClassifierConfig {
                            optimizer,
                            learning_rate,
                            weight_decay,
                            batch_size,
                            seed,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    /// Position in the grid enumeration.
    pub index: usize,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub diverged: bool,
}

/// Trains every grid configuration on `jobs` worker threads; outcomes are
/// sorted by macro precision (descending, ties by grid index).
pub fn grid_search(
    base: &ClassifierConfig,
    grid: &GridSpec,
    train: &ClassifierData,
    val: &ClassifierData,
    jobs: usize,
) -> Result<Vec<GridOutcome>> {
    let configs = grid.configs(base);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Param(format!("thread pool: {e}")))?;
    let mut outcomes: Vec<GridOutcome> = pool.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(index, cfg)| {
                let t = train_on_data(cfg, train, val)?;
                log::info!("grid {index}: macro precision {:.4}", t.report.macro_precision);
                Ok(GridOutcome { index, report: t.report, best_epoch: t.best_epoch, diverged: t.diverged })
            })
            .collect::<Result<_>>()
    })?;
    outcomes.sort_by(|a, b| b.report.macro_precision.total_cmp(&a.report.macro_precision).then(a.index.cmp(&b.index)));
    Ok(outcomes)
}

pub const GRID_CSV_HEADER: &str = "rank,index,optimizer,learning_rate,weight_decay,batch_size,seed,\
silicone_oil,air_bubble,protein,macro,auprc,best_epoch,diverged";

pub fn write_grid_csv(path: &Path, outcomes: &[GridOutcome]) -> Result<()> {
    let mut text = String::from(GRID_CSV_HEADER);
    text.push('\n');
    for (rank, o) in outcomes.iter().enumerate() {
        let (c, p) = (&o.report.config, &o.report.precision_per_class);
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            rank + 1,
            o.index,
            c.optimizer,
            c.learning_rate,
            c.weight_decay,
            c.batch_size,
            c.seed,
            pct(p[0]),
            pct(p[1]),
            pct(p[2]),
            pct(Some(o.report.macro_precision)),
            pct(o.report.auprc),
            o.best_epoch,
            o.diverged
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl ClassifierNet {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(self.config())?,
            step: 0,
            schedule: None,
            meta: serde_json::json!({ "bn": self.bn_stats() }),
            tensors: self.param_names().iter().cloned().zip(self.params().iter().map(|p| (**p).clone())).collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, origin: &Path) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND, origin)?;
        let config: ClassifierConfig = serde_json::from_value(ckpt.config.clone())?;
        let bn: Vec<BnStats> = serde_json::from_value(ckpt.meta["bn"].clone())?;
        Self::from_parts(config, ckpt.tensors.clone(), bn)
            .map_err(|e| Error::Checkpoint { path: origin.to_path_buf(), reason: e.to_string() })
    }
}
