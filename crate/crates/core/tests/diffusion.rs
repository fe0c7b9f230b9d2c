use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand_distr::{Distribution, StandardNormal};
use svpgen::checkpoint::Checkpoint;
use svpgen::denoiser::{DenoiserConfig, DenoiserNet};
use svpgen::diffusion::{
    l1_noise_loss, load_training_set, net_from_checkpoint, p_sample_step, sample, train, DiffusionTrainer,
    FidReference, NoisePredictor, Reduction, TrainConfig, VarianceKind,
};
use svpgen::error::{Error, Result};
use svpgen::frechet::{frechet_distance, gaussian_stats, FeatureExtractor};
use svpgen::imageio::{generate_procedural_corpus, ClassStyle, DatasetManifest, ImageTensor, Label};
use svpgen::rng;
use svpgen::schedule::{NoiseSchedule, ScheduleParams};
use svpgen::tensor::Tensor;

fn tiny_net(seed: u64) -> DenoiserNet<f32> {
    DenoiserNet::new(DenoiserConfig::preset("tiny").unwrap(), seed).unwrap()
}

fn schedule(t: usize) -> NoiseSchedule {
    NoiseSchedule::new(ScheduleParams { timesteps: t, ..Default::default() }).unwrap()
}

fn corpus(dir: &Path, label: Label, n: usize, seed: u64) -> DatasetManifest {
    generate_procedural_corpus(&[ClassStyle::default_for(label)], n, seed, dir).unwrap()
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-3,
        ema_decay: None,
        seed,
        snapshot_epochs: vec![],
        fid_samples: 0,
        ..Default::default()
    }
}

fn trailing_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn l1_loss_spec_examples() {
    let ones = Tensor::full(&[1, 1, 2, 2], 1.0f32);
    let zeros = Tensor::zeros(&[1, 1, 2, 2]);
    assert_eq!(l1_noise_loss(&ones, &ones, Reduction::Mean).unwrap(), 0.0);
    assert_eq!(l1_noise_loss(&ones, &zeros, Reduction::Sum).unwrap(), 4.0);
    assert_eq!(l1_noise_loss(&ones, &zeros, Reduction::Mean).unwrap(), 1.0);
    assert!(matches!(l1_noise_loss(&ones, &Tensor::zeros(&[2, 2]), Reduction::Sum), Err(Error::Shape(_))));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = load_training_set(&corpus(dir.path(), Label::AirBubble, 4, 1), Path::new(""), 16).unwrap();
    let run = || {
        let mut tr = DiffusionTrainer::new(tiny_net(3), schedule(1000), quick_config(5)).unwrap();
        let batch = data.tensor().clone();
        let losses: Vec<f64> = (0..4).map(|_| tr.train_step(&batch).unwrap()).collect();
        (losses, tr.net().params().to_vec())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn loss_halves_within_two_hundred_steps() {
    let dir = tempfile::tempdir().unwrap();
    let data = load_training_set(&corpus(dir.path(), Label::SiliconeOil, 8, 2), Path::new(""), 16).unwrap();
    let mut tr = DiffusionTrainer::new(tiny_net(0), schedule(1000), TrainConfig { learning_rate: 2e-3, ..quick_config(11) }).unwrap();
    let batch = data.tensor().clone();
    let losses: Vec<f64> = (0..200).map(|_| tr.train_step(&batch).unwrap()).collect();
    let (first, last) = (trailing_mean(&losses[..20]), trailing_mean(&losses[180..]));
    assert!(last <= 0.5 * first, "initial {first:.4} final {last:.4}");
}

#[test]
fn zero_learning_rate_keeps_parameters_and_gives_expected_abs_normal() {
    let dir = tempfile::tempdir().unwrap();
    let data = load_training_set(&corpus(dir.path(), Label::Protein, 4, 3), Path::new(""), 16).unwrap();
    // silence the output layer so ε̂ ≡ 0
    let base = tiny_net(4);
    let named = base
        .param_names()
        .iter()
        .zip(base.params())
        .map(|(n, p)| (n.clone(), if n.starts_with("out.conv") { p.map(|_| 0.0) } else { (**p).clone() }))
        .collect();
    let net = DenoiserNet::from_params(base.config().clone(), named).unwrap();
    let before = net.params().to_vec();
    let cfg = TrainConfig { learning_rate: 0.0, ema_decay: Some(0.0), ..quick_config(8) };
    let mut tr = DiffusionTrainer::new(net, schedule(1000), cfg).unwrap();
    let batch = data.tensor().clone();
    let losses: Vec<f64> = (0..10).map(|_| tr.train_step(&batch).unwrap()).collect();
    assert_eq!(tr.net().params(), &before[..]);
    for (s, p) in tr.ema().unwrap().shadow().iter().zip(tr.net().params()) {
        assert_eq!(s, &**p);
    }

    let mut r = rng::stream(99, "abs-normal", 0);
    let mc: f64 =
        (0..200_000).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r).abs()).sum::<f64>()
            / 200_000.0;
    let mean_loss = trailing_mean(&losses);
    assert!((mean_loss - mc).abs() < 0.01, "loss {mean_loss} vs E|N(0,1)| ≈ {mc}");
}

/// Predicts the exact noise that relates `x_t` to a planted `x0`.
struct PlantedOracle {
    x0: Tensor<f32>,
    schedule: NoiseSchedule,
    calls: AtomicUsize,
}

impl NoisePredictor for PlantedOracle {
    fn predict_noise(&self, x: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let ab = self.schedule.alpha_bar(t[0]);
        x.zip_map(&self.x0, |xt, x0| ((xt as f64 - ab.sqrt() * x0 as f64) / (1.0 - ab).sqrt()) as f32)
    }
}

#[test]
fn planted_oracle_reconstructs_x0() {
    let s = schedule(1000);
    for seed in 0..3 {
        let mut r = rng::stream(seed, "planted-x0", 0);
        let x0: Tensor<f32> = rng::normal_tensor::<f32>(&mut r, &[1, 3, 16, 16]).map(|v| (v * 0.5).clamp(-1.0, 1.0));
        let oracle = PlantedOracle { x0: x0.clone(), schedule: s.clone(), calls: AtomicUsize::new(0) };
        let (out, _) = sample(&oracle, &s, (3, 16, 16), 1, &[], seed, VarianceKind::Posterior, 1).unwrap();
        let want = ImageTensor::new(x0, svpgen::imageio::ValueRange::Model).unwrap().from_model_range().unwrap();
        let err = out.tensor().data().iter().zip(want.tensor().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-3, "seed {seed}: max error {err}");
        assert_eq!(oracle.calls.load(Ordering::Relaxed), 1000, "one denoiser call per timestep");
    }
}

#[test]
fn reverse_pass_calls_the_model_t_times_per_image() {
    let s = schedule(50);
    let oracle = PlantedOracle { x0: Tensor::zeros(&[1, 3, 4, 4]), schedule: s.clone(), calls: AtomicUsize::new(0) };
    sample(&oracle, &s, (3, 4, 4), 3, &[], 0, VarianceKind::Beta, 1).unwrap();
    assert_eq!(oracle.calls.load(Ordering::Relaxed), 3 * 50);
}

#[test]
fn last_step_is_deterministic_and_range_is_checked() {
    let s = schedule(20);
    let net = tiny_net(1);
    let x = rng::normal_tensor::<f32>(&mut rng::stream(1, "x", 0), &[2, 3, 16, 16]);
    let mut r1: Vec<_> = (0..2).map(|i| rng::stream(1, "a", i)).collect();
    let mut r2: Vec<_> = (0..2).map(|i| rng::stream(2, "b", i)).collect();
    let a = p_sample_step(&net, &s, &x, 1, VarianceKind::Posterior, &mut r1).unwrap();
    let b = p_sample_step(&net, &s, &x, 1, VarianceKind::Posterior, &mut r2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), x.shape());
    let c = p_sample_step(&net, &s, &x, 2, VarianceKind::Posterior, &mut r1).unwrap();
    let d = p_sample_step(&net, &s, &x, 2, VarianceKind::Posterior, &mut r2).unwrap();
    assert_ne!(c, d);
    assert!(p_sample_step(&net, &s, &x, 0, VarianceKind::Posterior, &mut r1).is_err());
    assert!(p_sample_step(&net, &s, &x, 21, VarianceKind::Posterior, &mut r1).is_err());
}

#[test]
fn sampling_is_deterministic_batch_invariant_and_records_endpoints() {
    let s = schedule(30);
    let net = tiny_net(2);
    let (a, traj) = sample(&net, &s, (3, 16, 16), 3, &[0, 30, 15], 7, VarianceKind::Posterior, 3).unwrap();
    let (b, _) = sample(&net, &s, (3, 16, 16), 3, &[], 7, VarianceKind::Posterior, 2).unwrap();
    assert_eq!(a.tensor(), b.tensor());
    assert!(a.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    let steps: Vec<usize> = traj.snapshots.iter().map(|(t, _)| *t).collect();
    assert_eq!(steps, vec![30, 15, 0]);
    assert_eq!(traj.snapshots[2].1.tensor(), a.tensor());

    // t = T is the starting noise of each image's stream
    let mut r = rng::stream(7, "diffusion/sample", 1);
    let z = rng::normal_tensor::<f32>(&mut r, &[3 * 16 * 16]);
    let want: Vec<f32> = z.data().iter().map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0).collect();
    let got = traj.snapshots[0].1.image(1).unwrap();
    let diff = got.tensor().data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(diff < 1e-6);
    assert!(sample(&net, &s, (3, 16, 16), 1, &[31], 7, VarianceKind::Posterior, 1).is_err());
}

#[test]
fn train_log_counts_epochs_and_partial_batches() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("data"), Label::AirBubble, 10, 4);
    let data = load_training_set(&manifest, Path::new(""), 16).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, snapshot_epochs: vec![1], fid_samples: 4, sample_batch: 4, ..quick_config(1) };
    let ex = FeatureExtractor::pixel_stats();
    let reference = FidReference::from_images(&ex, &data.from_model_range().unwrap()).unwrap();
    let mut tr = DiffusionTrainer::new(tiny_net(0), schedule(10), cfg).unwrap();
    let run = dir.path().join("run");
    let log = train(&mut tr, &data, Some(&run), Some(&reference)).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert_eq!(log.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2]);
    assert!(log.epochs.iter().all(|e| e.batches == 3 && e.loss.is_finite()));
    assert_eq!(log.fid.len(), 1);
    assert!(log.fid[0].1.is_finite() && log.fid[0].1 >= 0.0);

    let loss_csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss_csv.starts_with("epoch,loss\n"));
    assert!(run.join("timing.csv").exists());
    assert_eq!(loss_csv.lines().count(), 3);
    assert!(std::fs::read_to_string(run.join("fid_checkpoints.csv")).unwrap().starts_with("epoch,fid\n1,"));
    assert!(run.join("checkpoints/epoch_00001.ckpt").exists());
    assert!(run.join("samples/epoch_00001.png").exists());
    assert!(run.join("samples/epoch_00001/00003.png").exists());

    // resume from the final checkpoint reproduces the trained weights
    let path = run.join("checkpoint.ckpt");
    let ckpt = Checkpoint::load(&path).unwrap();
    let resumed = DiffusionTrainer::from_checkpoint(&ckpt, &path, None).unwrap();
    assert_eq!(resumed.epochs_completed(), 2);
    assert_eq!(resumed.steps_taken(), 6);
    assert_eq!(resumed.net().params(), tr.net().params());
    assert_eq!(resumed.log(), tr.log());
    assert_eq!(net_from_checkpoint(&ckpt, &path, true).unwrap().params(), tr.net().params());
}

#[test]
fn training_set_rejects_empty_and_mixed_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let a = corpus(dir.path(), Label::AirBubble, 2, 1);
    let b = corpus(dir.path(), Label::Protein, 2, 1);
    let mixed = DatasetManifest::new("mixed", a.records.iter().chain(&b.records).cloned().collect()).unwrap();
    assert!(matches!(load_training_set(&mixed, Path::new(""), 16), Err(Error::Manifest(_))));
    let empty = DatasetManifest::new("empty", vec![]).unwrap();
    assert!(matches!(load_training_set(&empty, Path::new(""), 16), Err(Error::Manifest(_))));
}

#[test]
fn paper_snapshot_epochs_are_accepted() {
    let cfg = TrainConfig { snapshot_epochs: vec![1, 5, 10, 20, 50, 100, 200, 500, 1000], ..Default::default() };
    assert!(cfg.validate().is_ok());
    assert_eq!(cfg.fid_samples, 100);
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
}

#[test]
fn fid_of_samples_is_finite_against_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let data = load_training_set(&corpus(dir.path(), Label::AirBubble, 6, 5), Path::new(""), 16).unwrap();
    let ex = FeatureExtractor::pixel_stats();
    let real = gaussian_stats(&ex.extract(&data.from_model_range().unwrap()).unwrap()).unwrap();
    let (gen, _) = sample(&tiny_net(0), &schedule(5), (3, 16, 16), 6, &[], 0, VarianceKind::Posterior, 6).unwrap();
    let fid = frechet_distance(&real, &gaussian_stats(&ex.extract(&gen).unwrap()).unwrap()).unwrap();
    assert!(fid.is_finite() && fid > 0.0);
}
