use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use svpgen::checkpoint::Checkpoint;
use svpgen::classify::{
    check_leakage, evaluate, export_misclassified, grid_search, read_scores_csv, train_classifier, write_grid_csv,
    write_scores_csv, ClassifierData, ClassifierNet, EvalReport, GridSpec, TrainedClassifier, EVAL_CSV_HEADER,
};
use svpgen::denoiser::{DenoiserConfig, DenoiserNet};
use svpgen::diffusion::{
    load_denoiser, load_training_set, sample, save_samples, train, trajectory_steps, DiffusionTrainer, FidReference,
};
use svpgen::error::{Error, Result};
use svpgen::frechet::{frechet_distance, gaussian_stats, read_imported_features, FeatureExtractor, FidReport};
use svpgen::imageio::{
    build_split, generate_procedural_corpus, list_images, load_standardized, save_grid, ClassStyle, DatasetManifest,
    Label, ManifestRecord, Provenance, SplitSpec, MODEL_SIZE,
};
use svpgen::rng::derive_seed;
use svpgen::schedule::NoiseSchedule;

use crate::args::*;
use crate::config::ExperimentConfig;
use crate::record::{prepare_run_dir, Reuse};

/// Everything a command needs besides its own arguments.
pub struct Ctx<'a> {
    pub global: &'a GlobalArgs,
    pub config: &'a ExperimentConfig,
    pub command: &'a Command,
}

/// Where the run record goes and what the command produced.
pub struct Outcome {
    pub dir: Option<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

impl Ctx<'_> {
    pub fn reuse(&self) -> Reuse {
        if self.global.resume {
            Reuse::Resume
        } else if self.global.overwrite {
            Reuse::Overwrite
        } else {
            Reuse::Refuse
        }
    }

    pub fn jobs(&self) -> usize {
        self.global
            .jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
            .max(1)
    }

    /// Content-addressed run directory for this command and configuration.
    pub fn run_dir(&self) -> Result<PathBuf> {
        let key = serde_json::json!({ "command": self.command, "config": self.config });
        prepare_run_dir(self.global.run_dir.as_deref(), &self.config.runs_dir, self.command.name(), &key, self.reuse())
    }

    fn root(&self) -> &Path {
        &self.config.data_root
    }
}

/// Parses a lowercase enum name through its serde representation.
pub fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Param(format!("invalid {what} {s:?}")))
}

pub fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// `path` relative to `root` when it lies below it, absolute otherwise.
pub fn manifest_path(root: &Path, path: &Path) -> String {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (root, path) = (canon(root), canon(path));
    path.strip_prefix(&root).unwrap_or(&path).to_string_lossy().into_owned()
}

fn load_manifests(paths: &[PathBuf], name: &str) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(DatasetManifest::read_csv(p)?.records);
    }
    DatasetManifest::new(name, records)
}

/// Files below `dir`, sorted.
pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

// ---- data ------------------------------------------------------------------

/// Renders `counts[label]` procedural images per class under `out/<label>/`
/// and returns their manifest, with paths relative to `root`.
pub fn render_corpus(out: &Path, root: &Path, counts: [usize; 3], seed: u64, name: &str) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for label in Label::ALL {
        let n = counts[label.index()];
        if n == 0 {
            continue;
        }
        let m = generate_procedural_corpus(&[ClassStyle::default_for(label)], n, seed, out)?;
        records.extend(m.records.into_iter().map(|r| ManifestRecord {
            path: manifest_path(root, Path::new(&r.path)),
            ..r
        }));
    }
    DatasetManifest::new(name, records)
}

/// Writes `manifest.csv` plus one `<label>.csv` per present class.
fn write_class_manifests(out: &Path, manifest: &DatasetManifest) -> Result<Vec<PathBuf>> {
    let mut written = vec![out.join("manifest.csv")];
    manifest.write_csv(&written[0])?;
    for label in manifest.labels() {
        let path = out.join(format!("{label}.csv"));
        manifest.filter(label.as_str(), |r| r.label == label).write_csv(&path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn make_procedural(ctx: &Ctx, a: &MakeProceduralArgs) -> Result<Outcome> {
    let mut counts = [a.n_per_class; 3];
    for &(label, n) in &a.counts {
        counts[label.index()] = n;
    }
    mkdir(&a.out)?;
    let manifest = render_corpus(&a.out, ctx.root(), counts, ctx.config.seed, "procedural")?;
    let mut artifacts = write_class_manifests(&a.out, &manifest)?;
    println!("{} images written to {}", manifest.len(), a.out.display());
    artifacts.extend(manifest.records.iter().map(|r| PathBuf::from(&r.path)));
    Ok(Outcome { dir: Some(a.out.clone()), artifacts })
}

/// Per-class `real + generated` counts in the layout of the paper's
/// training-set table.
pub fn split_table(manifests: &[DatasetManifest]) -> String {
    let mut s = format!("{:<12}", "split");
    for label in Label::ALL {
        s.push_str(&format!("{:>18}", label.as_str()));
    }
    s.push_str(&format!("{:>10}\n", "total"));
    for m in manifests {
        let c = m.counts();
        s.push_str(&format!("{:<12}", m.split_name));
        for label in Label::ALL {
            let [real, gen] = c[label.index()];
            s.push_str(&format!("{:>18}", format!("{real} + {gen}")));
        }
        s.push_str(&format!("{:>10}\n", m.len()));
    }
    s
}

pub fn build_dataset(ctx: &Ctx, a: &BuildDatasetArgs) -> Result<Outcome> {
    if a.scale_divisor == 0 {
        return Err(Error::Param("--scale-divisor must be at least 1".into()));
    }
    let specs: Vec<SplitSpec> =
        a.preset.iter().map(|p| Ok(SplitSpec::preset(p)?.scaled(a.scale_divisor))).collect::<Result<_>>()?;
    let real = load_manifests(&a.real_pool, "real_pool")?;
    let generated = load_manifests(&a.generated_pool, "generated_pool")?;
    mkdir(&a.out)?;
    let mut built = Vec::new();
    let mut artifacts = Vec::new();
    for spec in &specs {
        let m = build_split(spec, &real, &generated, ctx.config.seed)?;
        let path = a.out.join(format!("{}.csv", spec.name));
        m.write_csv(&path)?;
        artifacts.push(path);
        built.push(m);
    }
    print!("{}", split_table(&built));
    Ok(Outcome { dir: Some(a.out.clone()), artifacts })
}

// ---- diffusion -------------------------------------------------------------

pub fn new_trainer(config: &ExperimentConfig) -> Result<DiffusionTrainer> {
    let net = DenoiserNet::new(DenoiserConfig::preset(&config.denoiser)?, derive_seed(config.seed, "diffusion/init", 0))?;
    DiffusionTrainer::new(net, NoiseSchedule::new(config.schedule)?, config.diffusion.clone())
}

pub fn train_diffusion(ctx: &Ctx, a: &TrainDiffusionArgs) -> Result<Outcome> {
    let cfg = ctx.config;
    let manifest = DatasetManifest::read_csv(&a.manifest)?;
    let size = DenoiserConfig::preset(&cfg.denoiser)?.image_size;
    let data = load_training_set(&manifest, ctx.root(), size)?;
    let dir = ctx.run_dir()?;
    let resume_from = dir.join("checkpoint.ckpt");
    let mut trainer = if ctx.global.resume && resume_from.exists() {
        let ckpt = Checkpoint::load(&resume_from)?;
        let t = DiffusionTrainer::from_checkpoint(&ckpt, &resume_from, Some(cfg.diffusion.clone()))?;
        if t.schedule().params() != cfg.schedule {
            return Err(Error::Param("cannot resume with a different noise schedule".into()));
        }
        log::info!("resuming {} after epoch {}", dir.display(), t.epochs_completed());
        t
    } else {
        new_trainer(cfg)?
    };
    let extractor = FeatureExtractor::by_name(&cfg.extractor)?;
    let reference = FidReference::from_images(&extractor, &data.from_model_range()?)?;
    let log = train(&mut trainer, &data, Some(&dir), Some(&reference))?;
    if let Some(last) = log.epochs.last() {
        println!("epoch {} loss {:.6}", last.epoch, last.loss);
    }
    for (epoch, fid) in &log.fid {
        println!("epoch {epoch} fid {fid:.6}");
    }
    Ok(Outcome { dir: Some(dir.clone()), artifacts: files_under(&dir) })
}

pub fn sample_cmd(ctx: &Ctx, a: &SampleArgs) -> Result<Outcome> {
    let (net, schedule) = load_denoiser(&a.checkpoint, !a.no_ema)?;
    let variance = parse_enum("variance", &a.variance)?;
    let c = net.config();
    let steps = trajectory_steps(schedule.timesteps(), a.trajectory);
    let shape = (c.in_channels, c.image_size, c.image_size);
    let (images, traj) = sample(&net, &schedule, shape, a.n, &steps, ctx.config.seed, variance, a.batch)?;
    let raws: Vec<_> = (0..images.len()).map(|i| images.to_raw(i)).collect::<Result<_>>()?;
    let mut artifacts = save_samples(&a.out.join("images"), &raws)?;
    let grid = a.out.join("grid.png");
    save_grid(&grid, &raws, 10)?;
    artifacts.push(grid);
    if !traj.snapshots.is_empty() {
        // one row per image, one column per timestep from T down to 0
        let rows = a.n.min(6);
        let mut tiles = Vec::with_capacity(rows * traj.snapshots.len());
        for i in 0..rows {
            for (_, snap) in &traj.snapshots {
                tiles.push(snap.to_raw(i)?);
            }
        }
        let path = a.out.join("trajectory.png");
        save_grid(&path, &tiles, traj.snapshots.len())?;
        let steps: Vec<String> = traj.snapshots.iter().map(|(t, _)| t.to_string()).collect();
        write_text(&a.out.join("trajectory.txt"), &format!("{}\n", steps.join(",")))?;
        artifacts.push(path);
    }
    if let Some(label) = a.label {
        let records = artifacts[..raws.len()]
            .iter()
            .map(|p| ManifestRecord { path: manifest_path(ctx.root(), p), label, provenance: Provenance::Generated })
            .collect();
        let path = a.out.join("manifest.csv");
        DatasetManifest::new(format!("generated_{label}"), records)?.write_csv(&path)?;
        artifacts.push(path);
    }
    println!("{} samples written to {}", raws.len(), a.out.display());
    Ok(Outcome { dir: Some(a.out.clone()), artifacts })
}

// ---- FID -------------------------------------------------------------------

fn load_image_set(root: &Path, source: &Path, limit: Option<usize>) -> Result<(Vec<PathBuf>, usize)> {
    let mut paths = if source.is_dir() {
        list_images(source)?
    } else {
        DatasetManifest::read_csv(source)?.records.iter().map(|r| root.join(&r.path)).collect()
    };
    let available = paths.len();
    if let Some(n) = limit {
        if n > available {
            return Err(Error::Param(format!("{} holds {available} images, {n} requested", source.display())));
        }
        paths.truncate(n);
    }
    Ok((paths, available))
}

pub fn fid_report(ctx: &Ctx, a: &FidArgs) -> Result<FidReport> {
    let need = |v: &Option<PathBuf>, flag: &str| {
        v.clone().ok_or_else(|| Error::Param(format!("{flag} is required with --extractor {}", ctx.config.extractor)))
    };
    if ctx.config.extractor == "imported" {
        let gen = read_imported_features(need(&a.features, "--features")?, None)?;
        let real = read_imported_features(need(&a.real_features, "--real-features")?, Some(gen.features.ncols()))?;
        if gen.extractor_name != real.extractor_name {
            return Err(Error::Param(format!(
                "features come from different extractors: {} vs {}",
                gen.extractor_name, real.extractor_name
            )));
        }
        let n = a.n.unwrap_or(gen.features.nrows()).min(gen.features.nrows());
        let gen_rows = gen.features.rows(0, n).into_owned();
        let fid = frechet_distance(&gaussian_stats(&real.features)?, &gaussian_stats(&gen_rows)?)?;
        return Ok(FidReport { extractor: gen.extractor_name, n_real: real.features.nrows(), n_gen: n, fid });
    }
    let extractor = FeatureExtractor::by_name(&ctx.config.extractor)?;
    let (real, _) = load_image_set(ctx.root(), &need(&a.real, "--real")?, None)?;
    let (gen, _) = load_image_set(ctx.root(), &need(&a.generated, "--generated")?, a.n)?;
    if real.len() < 2 || gen.len() < 2 {
        return Err(Error::Param("FID needs at least 2 images on each side".into()));
    }
    let real_stats = gaussian_stats(&extractor.extract(&load_standardized(&real, MODEL_SIZE)?)?)?;
    let gen_stats = gaussian_stats(&extractor.extract(&load_standardized(&gen, MODEL_SIZE)?)?)?;
    let fid = frechet_distance(&real_stats, &gen_stats)?;
    Ok(FidReport { extractor: extractor.name().into(), n_real: real.len(), n_gen: gen.len(), fid })
}

pub fn fid(ctx: &Ctx, a: &FidArgs) -> Result<Outcome> {
    let report = fid_report(ctx, a)?;
    println!("{}", FidReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(Outcome { dir: None, artifacts: Vec::new() })
}

// ---- classification --------------------------------------------------------

pub fn report_csv(split: &str, report: &EvalReport) -> String {
    format!("{EVAL_CSV_HEADER}\n{}\n", report.csv_row(split))
}

/// Checkpoint, reports, history and scores of a trained classifier.
pub fn write_trained(dir: &Path, split: &str, t: &TrainedClassifier) -> Result<Vec<PathBuf>> {
    let ckpt = dir.join("classifier.ckpt");
    t.net.to_checkpoint()?.save(&ckpt)?;
    let json = dir.join("report.json");
    let body = serde_json::json!({
        "split": split,
        "report": t.report,
        "best_epoch": t.best_epoch,
        "diverged": t.diverged,
    });
    write_text(&json, &serde_json::to_string_pretty(&body)?)?;
    let csv = dir.join("report.csv");
    write_text(&csv, &report_csv(split, &t.report))?;
    let history = dir.join("history.csv");
    let mut text = String::from("epoch,train_loss,train_accuracy,val_macro_precision\n");
    for h in &t.history {
        text.push_str(&format!("{},{},{},{}\n", h.epoch, h.train_loss, h.train_accuracy, h.val_macro_precision));
    }
    write_text(&history, &text)?;
    let scores = dir.join("scores.csv");
    write_scores_csv(&scores, &t.records)?;
    Ok(vec![ckpt, json, csv, history, scores])
}

pub fn train_classifier_cmd(ctx: &Ctx, a: &TrainClassifierArgs) -> Result<Outcome> {
    let train = DatasetManifest::read_csv(&a.train)?;
    let val = DatasetManifest::read_csv(&a.val)?;
    check_leakage(&train, &val)?;
    let dir = ctx.run_dir()?;
    let t = train_classifier(&ctx.config.classifier, &train, &val, ctx.root())?;
    print!("{}", report_csv(&train.split_name, &t.report));
    let artifacts = write_trained(&dir, &train.split_name, &t)?;
    Ok(Outcome { dir: Some(dir), artifacts })
}

pub fn grid_spec(name: &str, base: &svpgen::classify::ClassifierConfig) -> Result<GridSpec> {
    match name {
        "paper" => Ok(GridSpec::paper()),
        "smoke" => Ok(GridSpec {
            optimizers: vec![base.optimizer],
            learning_rates: vec![base.learning_rate],
            weight_decays: vec![base.weight_decay],
            batch_sizes: vec![base.batch_size],
        }),
        other => Err(Error::UnknownPreset { name: other.into(), valid: "paper, smoke".into() }),
    }
}

pub fn grid(ctx: &Ctx, a: &GridArgs) -> Result<Outcome> {
    let base = &ctx.config.classifier;
    let spec = grid_spec(&a.grid, base)?;
    let train = DatasetManifest::read_csv(&a.train)?;
    let val = DatasetManifest::read_csv(&a.val)?;
    check_leakage(&train, &val)?;
    let dir = ctx.run_dir()?;
    if a.dry_run {
        let path = dir.join("grid_plan.csv");
        let mut text = String::from("index,optimizer,learning_rate,weight_decay,batch_size,seed\n");
        for (i, c) in spec.configs(base).iter().enumerate() {
            text.push_str(&format!(
                "{i},{},{},{},{},{}\n",
                c.optimizer, c.learning_rate, c.weight_decay, c.batch_size, c.seed
            ));
        }
        write_text(&path, &text)?;
        println!("{} configurations", spec.len());
        return Ok(Outcome { dir: Some(dir), artifacts: vec![path] });
    }
    let train_data = ClassifierData::load(&train, ctx.root(), base.image_size)?;
    let val_data = ClassifierData::load(&val, ctx.root(), base.image_size)?;
    let outcomes = grid_search(base, &spec, &train_data, &val_data, ctx.jobs())?;
    let results = dir.join("grid_results.csv");
    write_grid_csv(&results, &outcomes)?;
    let best = dir.join("best_report.json");
    write_text(&best, &serde_json::to_string_pretty(&outcomes[0])?)?;
    println!("{} runs; best macro precision {:.4} (grid index {})", outcomes.len(), outcomes[0].report.macro_precision, outcomes[0].index);
    Ok(Outcome { dir: Some(dir), artifacts: vec![results, best] })
}

pub fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<Outcome> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = ClassifierNet::from_checkpoint(&ckpt, &a.checkpoint)?;
    let manifest = DatasetManifest::read_csv(&a.manifest)?;
    let data = ClassifierData::load(&manifest, ctx.root(), net.config().image_size)?;
    let records = evaluate(&net, &data)?;
    let report = EvalReport::from_records(net.config().clone(), &records)?;
    mkdir(&a.out)?;
    let scores = a.out.join("scores.csv");
    write_scores_csv(&scores, &records)?;
    let json = a.out.join("report.json");
    write_text(&json, &serde_json::to_string_pretty(&report)?)?;
    let csv = a.out.join("report.csv");
    let text = report_csv(&manifest.split_name, &report);
    write_text(&csv, &text)?;
    print!("{text}");
    Ok(Outcome { dir: Some(a.out.clone()), artifacts: vec![scores, json, csv] })
}

pub fn export(ctx: &Ctx, a: &ExportArgs) -> Result<Outcome> {
    let records = read_scores_csv(&a.scores)?;
    let mut artifacts = export_misclassified(&records, ctx.root(), &a.out, a.top_k)?;
    println!("{} misclassified images exported to {}", artifacts.len(), a.out.display());
    artifacts.push(a.out.join(svpgen::classify::metrics::MISCLASSIFIED_INDEX));
    Ok(Outcome { dir: Some(a.out.clone()), artifacts })
}
