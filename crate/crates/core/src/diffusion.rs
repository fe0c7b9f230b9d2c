//! Denoiser training with the L1 noise objective and ancestral sampling.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::error::{Error, Result};
use crate::frechet::{frechet_distance, gaussian_stats, FeatureExtractor, FeatureStats};
use crate::imageio::{load_standardized, save_grid, DatasetManifest, ImageTensor, ValueRange};
use crate::optim::{Adam, Ema, OptimizerKind};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Reverse-step variance: the posterior variance `β̃_t` or `β_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    Posterior,
    Beta,
}

impl VarianceKind {
    fn sigma2(self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            VarianceKind::Posterior => schedule.posterior_var(t),
            VarianceKind::Beta => schedule.beta(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// `None` disables the moving average.
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub snapshot_epochs: Vec<usize>,
    pub reduction: Reduction,
    pub variance: VarianceKind,
    /// Samples generated for FID at each snapshot epoch; 0 disables.
    pub fid_samples: usize,
    pub sample_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 128,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            ema_decay: Some(0.995),
            seed: 0,
            snapshot_epochs: vec![1, 5, 10, 20, 50, 100, 200, 500, 1000],
            reduction: Reduction::Mean,
            variance: VarianceKind::Posterior,
            fid_samples: 100,
            sample_batch: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.sample_batch == 0 {
            return Err(Error::Param("epochs, batch_size and sample_batch must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!("learning rate must be finite and ≥ 0, got {}", self.learning_rate)));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Param(format!("EMA decay must be in [0, 1), got {d}")));
            }
        }
        if self.snapshot_epochs.contains(&0) {
            return Err(Error::Param("snapshot epochs start at 1".into()));
        }
        if self.fid_samples == 1 {
            return Err(Error::Param("FID needs at least 2 samples".into()));
        }
        Ok(())
    }
}

/// `Σ|ε̂ − ε|`, divided by the element count for [`Reduction::Mean`].
pub fn l1_noise_loss(eps_hat: &Tensor<f32>, eps: &Tensor<f32>, reduction: Reduction) -> Result<f64> {
    eps_hat.check_same_shape(eps)?;
    let sum: f64 = eps_hat.data().iter().zip(eps.data()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
    Ok(match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => sum / eps.numel().max(1) as f64,
    })
}

/// A subgradient of [`l1_noise_loss`] with respect to `eps_hat`
/// (`sign(ε̂ − ε)`, 0 where they agree).
pub fn l1_noise_loss_grad(eps_hat: &Tensor<f32>, eps: &Tensor<f32>, reduction: Reduction) -> Result<Tensor<f32>> {
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / eps.numel().max(1) as f32,
    };
    eps_hat.zip_map(eps, |a, b| {
        if a > b {
            scale
        } else if a < b {
            -scale
        } else {
            0.0
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// `(epoch, FID)` at snapshot epochs.
    pub fid: Vec<(usize, f64)>,
}

impl TrainLog {
    /// Writes `loss.csv` (`epoch,loss`), `fid_checkpoints.csv` (`epoch,fid`)
    /// and `timing.csv` (`epoch,seconds`) into `dir`. Wall-clock times are
    /// kept apart so the first two are reproducible byte for byte.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("loss.csv"))?;
        w.write_record(["epoch", "loss"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.loss.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("loss.csv"), e))?;
        let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
        w.write_record(["epoch", "seconds"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), format!("{:.3}", e.seconds)])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("timing.csv"), e))?;
        let mut w = csv::Writer::from_path(dir.join("fid_checkpoints.csv"))?;
        w.write_record(["epoch", "fid"])?;
        for (epoch, fid) in &self.fid {
            w.write_record([epoch.to_string(), fid.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("fid_checkpoints.csv"), e))?;
        Ok(())
    }
}

/// Optimization state of one diffusion model.
pub struct DiffusionTrainer {
    net: DenoiserNet<f32>,
    schedule: NoiseSchedule,
    config: TrainConfig,
    opt: Adam,
    ema: Option<Ema>,
    step: u64,
    epoch: usize,
    log: TrainLog,
}

impl DiffusionTrainer {
    pub fn new(net: DenoiserNet<f32>, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = Adam::new(config.optimizer.config(config.learning_rate, config.weight_decay), net.params());
        let ema = config.ema_decay.map(|d| Ema::new(d, net.params())).transpose()?;
        Ok(Self { net, schedule, config, opt, ema, step: 0, epoch: 0, log: TrainLog::default() })
    }

    pub fn net(&self) -> &DenoiserNet<f32> {
        &self.net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn ema(&self) -> Option<&Ema> {
        self.ema.as_ref()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Network used for sampling: the moving average when enabled.
    pub fn sampling_net(&self) -> Result<DenoiserNet<f32>> {
        match &self.ema {
            None => Ok(self.net.clone()),
            Some(ema) => DenoiserNet::from_params(
                self.net.config().clone(),
                self.net.param_names().iter().cloned().zip(ema.shadow().iter().cloned()).collect(),
            ),
        }
    }

    /// One optimizer step on a model-range batch. Timesteps and noise come
    /// from the stream `("diffusion/step", step)`.
    pub fn train_step(&mut self, x0: &Tensor<f32>) -> Result<f64> {
        let n = x0.dims4()?.0;
        let big_t = self.schedule.timesteps();
        let mut r = rng::stream(self.config.seed, "diffusion/step", self.step);
        let t: Vec<usize> = (0..n).map(|_| r.random_range(1..=big_t)).collect();
        let eps: Tensor<f32> = rng::normal_tensor(&mut r, x0.shape());
        let xt = self.schedule.q_sample(x0, &t, &eps)?;

        let state = self.net.forward_traced(&xt, &t)?;
        let eps_hat = state.output();
        let loss = l1_noise_loss(&eps_hat, &eps, self.config.reduction)?;
        let upstream = l1_noise_loss_grad(&eps_hat, &eps, self.config.reduction)?;
        let grads = self.net.backward(&state, &upstream)?;
        drop(state);

        let grad_norm = grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            let mut hist = vec![0usize; 10];
            for &ti in &t {
                hist[((ti - 1) * 10 / big_t).min(9)] += 1;
            }
            return Err(Error::NonFiniteLoss { step: self.step, t_histogram: hist, grad_norm });
        }
        self.opt.step(self.net.params_mut(), &grads)?;
        if let Some(ema) = &mut self.ema {
            ema.update(self.net.params())?;
        }
        self.step += 1;
        Ok(loss)
    }

    /// One pass over `data` (model range) in a seeded shuffled order; the
    /// last partial batch is kept.
    pub fn train_epoch(&mut self, data: &ImageTensor) -> Result<EpochRecord> {
        if data.range() != ValueRange::Model {
            return Err(Error::Range("training data must be in model range".into()));
        }
        let n = data.len();
        if n == 0 {
            return Err(Error::Param("no training images".into()));
        }
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng::stream(self.config.seed, "diffusion/shuffle", epoch as u64));
        let (c, h, w) = data.image_dims();
        let per = c * h * w;
        let (mut total, mut batches) = (0.0, 0);
        for idx in order.chunks(self.config.batch_size) {
            let mut buf = Vec::with_capacity(idx.len() * per);
            for &i in idx {
                buf.extend_from_slice(&data.tensor().data()[i * per..(i + 1) * per]);
            }
            total += self.train_step(&Tensor::from_vec(&[idx.len(), c, h, w], buf)?)?;
            batches += 1;
        }
        self.epoch = epoch;
        let rec = EpochRecord { epoch, loss: total / batches as f64, seconds: started.elapsed().as_secs_f64(), batches };
        self.log.epochs.push(rec.clone());
        Ok(rec)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let names = self.net.param_names();
        let mut tensors: Vec<(String, Tensor<f32>)> =
            names.iter().zip(self.net.params()).map(|(n, p)| (format!("param/{n}"), (**p).clone())).collect();
        if let Some(ema) = &self.ema {
            tensors.extend(names.iter().zip(ema.shadow()).map(|(n, s)| (format!("ema/{n}"), s.clone())));
        }
        let (m, v) = self.opt.moments();
        tensors.extend(names.iter().zip(m).map(|(n, t)| (format!("adam_m/{n}"), t.clone())));
        tensors.extend(names.iter().zip(v).map(|(n, t)| (format!("adam_v/{n}"), t.clone())));
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(self.net.config())?,
            step: self.step,
            schedule: Some(self.schedule.params()),
            meta: serde_json::json!({
                "epoch": self.epoch,
                "adam_steps": self.opt.steps_taken(),
                "train_config": self.config,
                "log": self.log,
            }),
            tensors,
        })
    }

    /// Restores a trainer saved by [`Self::to_checkpoint`]. `config`
    /// replaces the stored training configuration (e.g. to extend the
    /// number of epochs).
    pub fn from_checkpoint(ckpt: &Checkpoint, origin: &Path, config: Option<TrainConfig>) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND, origin)?;
        let bad = |reason: String| Error::Checkpoint { path: origin.to_path_buf(), reason };
        let net = net_from_checkpoint(ckpt, origin, false)?;
        let schedule = NoiseSchedule::new(ckpt.schedule.ok_or_else(|| bad("no schedule parameters".into()))?)?;
        let config = match config {
            Some(c) => c,
            None => serde_json::from_value(ckpt.meta["train_config"].clone())?,
        };
        config.validate()?;
        let strip = |prefix: &str| -> Vec<Tensor<f32>> { ckpt.group(prefix).into_iter().map(|(_, t)| t).collect() };
        let (m, v) = (strip("adam_m/"), strip("adam_v/"));
        if m.len() != net.params().len() || v.len() != net.params().len() {
            return Err(bad("optimizer state missing".into()));
        }
        let adam_steps = ckpt.meta["adam_steps"].as_u64().unwrap_or(ckpt.step);
        let opt = Adam::restore(config.optimizer.config(config.learning_rate, config.weight_decay), adam_steps, m, v)?;
        let ema_shadow = strip("ema/");
        let ema = match config.ema_decay {
            None => None,
            Some(d) if ema_shadow.len() == net.params().len() => Some(Ema::from_shadow(d, ema_shadow)),
            Some(d) => Some(Ema::new(d, net.params())?),
        };
        let epoch = ckpt.meta["epoch"].as_u64().unwrap_or(0) as usize;
        let log: TrainLog = serde_json::from_value(ckpt.meta["log"].clone()).unwrap_or_default();
        Ok(Self { net, schedule, config, opt, ema, step: ckpt.step, epoch, log })
    }
}

/// Denoiser stored in a checkpoint; `use_ema` selects the moving-average
/// weights when present.
pub fn net_from_checkpoint(ckpt: &Checkpoint, origin: &Path, use_ema: bool) -> Result<DenoiserNet<f32>> {
    ckpt.expect_kind(CHECKPOINT_KIND, origin)?;
    let config: DenoiserConfig = serde_json::from_value(ckpt.config.clone())?;
    let ema = ckpt.group("ema/");
    let named = if use_ema && !ema.is_empty() { ema } else { ckpt.group("param/") };
    DenoiserNet::from_params(config, named).map_err(|e| Error::Checkpoint {
        path: origin.to_path_buf(),
        reason: format!("parameters do not match the stored configuration: {e}"),
    })
}

/// Loads a sampling-ready denoiser and its schedule.
pub fn load_denoiser(path: &Path, use_ema: bool) -> Result<(DenoiserNet<f32>, NoiseSchedule)> {
    let ckpt = Checkpoint::load(path)?;
    let net = net_from_checkpoint(&ckpt, path, use_ema)?;
    let params = ckpt.schedule.unwrap_or_default();
    Ok((net, NoiseSchedule::new(params)?))
}

// ---- sampling --------------------------------------------------------------

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>>;
}

impl NoisePredictor for DenoiserNet<f32> {
    fn predict_noise(&self, x: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        self.forward(x, t)
    }
}

/// One reverse step `x_t → x_{t−1}`:
/// `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`, plus `σ_t·z` for `t > 1`. Image `i`
/// draws its noise from `rngs[i]`.
pub fn p_sample_step<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    x_t: &Tensor<f32>,
    t: usize,
    variance: VarianceKind,
    rngs: &mut [Rng],
) -> Result<Tensor<f32>> {
    if t == 0 || t > schedule.timesteps() {
        return Err(Error::Param(format!("timestep {t} outside 1..={}", schedule.timesteps())));
    }
    let n = x_t.dims4()?.0;
    if rngs.len() != n {
        return Err(Error::Shape(format!("{} noise streams for batch of {n}", rngs.len())));
    }
    let eps_hat = model.predict_noise(x_t, &vec![t; n])?;
    x_t.check_same_shape(&eps_hat)?;
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = variance.sigma2(schedule, t).sqrt();
    let per = x_t.numel() / n.max(1);
    let mut out = Tensor::zeros(x_t.shape());
    for (i, r) in rngs.iter_mut().enumerate() {
        let range = i * per..(i + 1) * per;
        let noise: Option<Tensor<f32>> = (t > 1).then(|| rng::normal_tensor(r, &[per]));
        for (k, ((o, &x), &e)) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&x_t.data()[range.clone()])
            .zip(&eps_hat.data()[range])
            .enumerate()
        {
            let mean = inv_sqrt_alpha * (x as f64 - eps_coef * e as f64);
            let z = noise.as_ref().map_or(0.0, |z| z.data()[k] as f64);
            *o = (mean + sigma * z) as f32;
        }
    }
    Ok(out)
}

/// Intermediate states of a reverse pass, at strictly decreasing timesteps.
#[derive(Clone, Debug)]
pub struct SampleTrajectory {
    pub snapshots: Vec<(usize, ImageTensor)>,
}

/// `count` timesteps evenly spaced from `T` down to 0.
pub fn trajectory_steps(timesteps: usize, count: usize) -> Vec<usize> {
    match count {
        0 => Vec::new(),
        1 => vec![0],
        _ => {
            let mut v: Vec<usize> = (0..count)
                .map(|i| ((timesteps as f64) * (count - 1 - i) as f64 / (count - 1) as f64).round() as usize)
                .collect();
            v.dedup();
            v
        }
    }
}

fn to_unit(x: &Tensor<f32>) -> Result<ImageTensor> {
    ImageTensor::new_clamped(x.clone(), ValueRange::Model)?.from_model_range()
}

/// Generates `n` images by ancestral sampling from `x_T ~ N(0, I)`.
/// Image `i` uses the stream `("diffusion/sample", i)` of `seed`, so results
/// do not depend on `batch`. The final state is clamped to `[−1, 1]` and
/// returned in unit range; `snapshot_steps` (any of `0..=T`) are recorded
/// along the way.
#[allow(clippy::too_many_arguments)]
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    image_shape: (usize, usize, usize),
    n: usize,
    snapshot_steps: &[usize],
    seed: u64,
    variance: VarianceKind,
    batch: usize,
) -> Result<(ImageTensor, SampleTrajectory)> {
    if n == 0 || batch == 0 {
        return Err(Error::Param("sample needs n ≥ 1 and batch ≥ 1".into()));
    }
    let big_t = schedule.timesteps();
    let mut steps: Vec<usize> = snapshot_steps.to_vec();
    steps.sort_unstable_by(|a, b| b.cmp(a));
    steps.dedup();
    if let Some(&bad) = steps.iter().find(|&&s| s > big_t) {
        return Err(Error::Param(format!("snapshot timestep {bad} exceeds T = {big_t}")));
    }
    let (c, h, w) = image_shape;
    let mut finals = Vec::new();
    let mut snaps: Vec<Vec<ImageTensor>> = vec![Vec::new(); steps.len()];
    for start in (0..n).step_by(batch) {
        let m = batch.min(n - start);
        let mut rngs: Vec<Rng> = (start..start + m).map(|i| rng::stream(seed, "diffusion/sample", i as u64)).collect();
        let mut parts = Vec::with_capacity(m * c * h * w);
        for r in &mut rngs {
            parts.extend(rng::normal_tensor::<f32>(r, &[c * h * w]).into_vec());
        }
        let mut x = Tensor::from_vec(&[m, c, h, w], parts)?;
        for t in (0..=big_t).rev() {
            if let Some(k) = steps.iter().position(|&s| s == t) {
                snaps[k].push(to_unit(&x)?);
            }
            if t > 0 {
                x = p_sample_step(model, schedule, &x, t, variance, &mut rngs)?;
            }
        }
        finals.push(to_unit(&x)?);
    }
    let snapshots = steps
        .into_iter()
        .zip(snaps)
        .map(|(t, parts)| Ok((t, ImageTensor::concat(&parts)?)))
        .collect::<Result<_>>()?;
    Ok((ImageTensor::concat(&finals)?, SampleTrajectory { snapshots }))
}

/// Writes `images` as `dir/00000.png`, `dir/00001.png`, ...
pub fn save_samples(dir: &Path, images: &[crate::imageio::RawImage]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.join(format!("{i:05}.png"));
            crate::imageio::save_png(&p, img)?;
            Ok(p)
        })
        .collect()
}

// ---- training driver -------------------------------------------------------

/// Reference statistics for FID at snapshot epochs.
pub struct FidReference<'a> {
    pub extractor: &'a FeatureExtractor,
    pub stats: FeatureStats,
}

impl<'a> FidReference<'a> {
    pub fn from_images(extractor: &'a FeatureExtractor, images: &ImageTensor) -> Result<Self> {
        Ok(Self { extractor, stats: gaussian_stats(&extractor.extract(images)?)? })
    }
}

/// Runs the remaining epochs of `trainer` over `data` (model range).
///
/// With a `run_dir`, the layout is:
///
/// ```text
/// checkpoint.ckpt               state after the latest epoch (resume point)
/// checkpoints/epoch_NNNNN.ckpt  one per snapshot epoch
/// samples/epoch_NNNNN.png       grid of the FID samples
/// loss.csv, fid_checkpoints.csv, timing.csv
/// ```
pub fn train(
    trainer: &mut DiffusionTrainer,
    data: &ImageTensor,
    run_dir: Option<&Path>,
    fid: Option<&FidReference>,
) -> Result<TrainLog> {
    if let Some(dir) = run_dir {
        for sub in ["checkpoints", "samples"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
    }
    let (c, h, w) = data.image_dims();
    while trainer.epoch < trainer.config.epochs {
        let rec = trainer.train_epoch(data)?;
        log::info!("epoch {} loss {:.5} ({:.1}s)", rec.epoch, rec.loss, rec.seconds);
        let snapshot = trainer.config.snapshot_epochs.contains(&rec.epoch);
        if snapshot && trainer.config.fid_samples >= 2 {
            if let Some(reference) = fid {
                let net = trainer.sampling_net()?;
                let cfg = &trainer.config;
                let (samples, _) = sample(
                    &net,
                    &trainer.schedule,
                    (c, h, w),
                    cfg.fid_samples,
                    &[],
                    rng::derive_seed(cfg.seed, "diffusion/fid", rec.epoch as u64),
                    cfg.variance,
                    cfg.sample_batch,
                )?;
                let stats = gaussian_stats(&reference.extractor.extract(&samples)?)?;
                let value = frechet_distance(&reference.stats, &stats)?;
                log::info!("epoch {} FID {:.4}", rec.epoch, value);
                trainer.log.fid.push((rec.epoch, value));
                if let Some(dir) = run_dir {
                    let raws: Vec<_> = (0..samples.len()).map(|i| samples.to_raw(i)).collect::<Result<_>>()?;
                    save_samples(&dir.join(format!("samples/epoch_{:05}", rec.epoch)), &raws)?;
                    save_grid(dir.join(format!("samples/epoch_{:05}.png", rec.epoch)), &raws, 10)?;
                }
            }
        }
        if let Some(dir) = run_dir {
            let ckpt = trainer.to_checkpoint()?;
            if snapshot {
                ckpt.save(dir.join(format!("checkpoints/epoch_{:05}.ckpt", rec.epoch)))?;
            }
            ckpt.save(dir.join("checkpoint.ckpt"))?;
            trainer.log.write_csv(dir)?;
        }
    }
    Ok(trainer.log.clone())
}

/// Images of a single-class manifest in model range at `size`; paths
/// resolve against `root`.
pub fn load_training_set(manifest: &DatasetManifest, root: &Path, size: usize) -> Result<ImageTensor> {
    if manifest.is_empty() {
        return Err(Error::Manifest(format!("manifest {} is empty", manifest.split_name)));
    }
    let labels = manifest.labels();
    if labels.len() != 1 {
        let names: Vec<&str> = labels.iter().map(|l| l.as_str()).collect();
        return Err(Error::Manifest(format!(
            "diffusion models are trained per class; manifest {} mixes {}",
            manifest.split_name,
            names.join(", ")
        )));
    }
    let paths: Vec<PathBuf> = manifest.records.iter().map(|r| root.join(&r.path)).collect();
    load_standardized(&paths, size)?.to_model_range()
}
