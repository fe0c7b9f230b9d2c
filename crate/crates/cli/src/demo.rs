//! Desk-scale version of the two-phase experiment: per-class diffusion
//! models for the minority classes of an imbalanced procedural corpus, then
//! classifiers trained on a real-only and on a real + generated split.
//!
//! ```text
//! data/train/<label>/*.png     real pool (minority, minority, majority)
//! data/val/<label>/*.png       held-out validation images
//! data/*.csv                   real_pool, val, generated_pool manifests
//! phase1/<label>/              diffusion run (checkpoint, loss.csv, ...)
//! generated/<label>/*.png      samples used to top up the minority classes
//! phase1/fid.csv               FID of the samples against the real images
//! phase2/<split>.csv           training manifests
//! phase2/<split>/              classifier checkpoint, reports, scores
//! comparison.csv               one row per split, table layout
//! ```

use std::time::Instant;

use svpgen::classify::{
    check_leakage, train_on_data, Architecture, ClassifierConfig, ClassifierData, EVAL_CSV_HEADER,
};
use svpgen::diffusion::{load_training_set, sample, save_samples, train, TrainConfig};
use svpgen::error::{Error, Result};
use svpgen::frechet::{fid_between, FeatureExtractor, FidReport};
use svpgen::imageio::{build_split, load_standardized, DatasetManifest, Label, ManifestRecord, Provenance, SplitSpec};
use svpgen::optim::OptimizerKind;
use svpgen::rng::derive_seed;
use svpgen::schedule::ScheduleParams;

use crate::args::DemoArgs;
use crate::commands::{files_under, manifest_path, mkdir, new_trainer, render_corpus, split_table, write_text, write_trained, Ctx, Outcome};
use crate::config::ExperimentConfig;

const MINORITY: [Label; 2] = [Label::SiliconeOil, Label::AirBubble];

pub fn run(ctx: &Ctx, a: &DemoArgs) -> Result<Outcome> {
    if a.minority == 0 || a.majority <= a.minority || a.val_per_class == 0 {
        return Err(Error::Param("demo needs 0 < minority < majority and a non-empty validation set".into()));
    }
    let started = Instant::now();
    let seed = ctx.config.seed;
    let dir = ctx.run_dir()?;
    let root = dir.as_path();

    let data_dir = dir.join("data");
    let pool = render_corpus(
        &data_dir.join("train"),
        root,
        [a.minority, a.minority, a.majority],
        derive_seed(seed, "demo/train", 0),
        "real_pool",
    )?;
    let val = render_corpus(&data_dir.join("val"), root, [a.val_per_class; 3], derive_seed(seed, "demo/val", 0), "val")?;
    pool.write_csv(data_dir.join("real_pool.csv"))?;
    val.write_csv(data_dir.join("val.csv"))?;

    // phase 1: one diffusion model per minority class
    let n_gen = a.majority - a.minority;
    let extractor = FeatureExtractor::pixel_stats();
    let mut generated = Vec::new();
    let mut fid_rows = vec![format!("label,{}", FidReport::CSV_HEADER)];
    for label in MINORITY {
        let t0 = Instant::now();
        let class = pool.filter(label.as_str(), |r| r.label == label);
        let phase_cfg = diffusion_config(ctx.config, a, label, class.len());
        let data = load_training_set(&class, root, 16)?;
        let run = dir.join("phase1").join(label.as_str());
        mkdir(&run)?;
        let mut trainer = new_trainer(&phase_cfg)?;
        let log = train(&mut trainer, &data, Some(&run), None)?;
        let net = trainer.sampling_net()?;
        let (c, h, w) = data.image_dims();
        let sample_seed = derive_seed(seed, "demo/sample", label.index() as u64);
        let (images, _) = sample(&net, trainer.schedule(), (c, h, w), n_gen, &[], sample_seed, phase_cfg.diffusion.variance, 32)?;
        let raws: Vec<_> = (0..images.len()).map(|i| images.to_raw(i)).collect::<Result<_>>()?;
        let paths = save_samples(&dir.join("generated").join(label.as_str()), &raws)?;
        generated.extend(paths.iter().map(|p| ManifestRecord {
            path: manifest_path(root, p),
            label,
            provenance: Provenance::Generated,
        }));
        // both sides at the resolution the denoiser saw
        let real_paths: Vec<_> = class.records.iter().map(|r| root.join(&r.path)).collect();
        let fid = fid_between(&load_standardized(&real_paths, 16)?, &images, &extractor)?;
        let report = FidReport { extractor: extractor.name().into(), n_real: class.len(), n_gen, fid };
        fid_rows.push(format!("{label},{}", report.csv_row()));
        let last = log.epochs.last().map(|e| e.loss).unwrap_or(f64::NAN);
        println!(
            "phase 1 {label}: {} steps, final loss {last:.4}, FID {fid:.4} ({:.0}s)",
            trainer.steps_taken(),
            t0.elapsed().as_secs_f64()
        );
    }
    write_text(&dir.join("phase1/fid.csv"), &(fid_rows.join("\n") + "\n"))?;
    let generated = DatasetManifest::new("generated_pool", generated)?;
    generated.write_csv(data_dir.join("generated_pool.csv"))?;

    // phase 2: real-only versus real + generated
    let (m, big) = (a.minority, a.majority);
    let specs = [
        SplitSpec::new("Real-demo", [m, m, big], [0, 0, 0])?,
        SplitSpec::new("Mixed-demo", [m, m, big], [n_gen, n_gen, 0])?,
    ];
    let clf = ClassifierConfig {
        architecture: Architecture::Resnet8Tiny,
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        weight_decay: 1e-4,
        batch_size: 16,
        epochs: a.classifier_epochs,
        seed,
        image_size: 32,
    };
    let val_data = ClassifierData::load(&val, root, clf.image_size)?;
    let phase2 = dir.join("phase2");
    mkdir(&phase2)?;
    let mut splits = Vec::new();
    let mut rows = vec![EVAL_CSV_HEADER.to_string()];
    for spec in &specs {
        let split = build_split(spec, &pool, &generated, seed)?;
        check_leakage(&split, &val)?;
        split.write_csv(phase2.join(format!("{}.csv", spec.name)))?;
        let data = ClassifierData::load(&split, root, clf.image_size)?;
        let trained = train_on_data(&clf, &data, &val_data)?;
        let out = phase2.join(&spec.name);
        mkdir(&out)?;
        write_trained(&out, &spec.name, &trained)?;
        rows.push(trained.report.csv_row(&spec.name));
        splits.push(split);
    }
    let comparison = dir.join("comparison.csv");
    write_text(&comparison, &(rows.join("\n") + "\n"))?;

    print!("{}", split_table(&splits));
    println!();
    for r in &rows {
        println!("{r}");
    }
    println!("demo finished in {:.0}s; results in {}", started.elapsed().as_secs_f64(), dir.display());
    let artifacts = files_under(&dir).into_iter().filter(|p| !p.starts_with(dir.join("data"))).collect();
    Ok(Outcome { dir: Some(dir), artifacts })
}

/// Tiny denoiser, `diffusion_steps` optimization steps over the class.
fn diffusion_config(base: &ExperimentConfig, a: &DemoArgs, label: Label, n: usize) -> ExperimentConfig {
    let batch_size = n.clamp(1, 16);
    let epochs = a.diffusion_steps.div_ceil(n.div_ceil(batch_size)).max(1);
    ExperimentConfig {
        seed: derive_seed(base.seed, "demo/diffusion", label.index() as u64),
        schedule: ScheduleParams { timesteps: a.timesteps, ..ScheduleParams::default() },
        denoiser: "tiny".into(),
        diffusion: TrainConfig {
            epochs,
            batch_size,
            learning_rate: a.diffusion_lr,
            ema_decay: Some(0.99),
            seed: derive_seed(base.seed, "demo/diffusion", label.index() as u64),
            snapshot_epochs: vec![epochs],
            fid_samples: 0,
            ..TrainConfig::default()
        },
        ..base.clone()
    }
}
