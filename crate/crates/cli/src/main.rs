mod args;
mod commands;
mod config;
mod demo;
mod record;

use std::process::ExitCode;

use clap::Parser;
use svpgen::error::{Error, Result};

use args::{Cli, ClassifierFlags, Command};
use commands::{parse_enum, Ctx};
use config::ExperimentConfig;
use record::{now, RunRecord};

/// File configuration (or a recorded snapshot) overridden by flags.
fn resolve(cli: &Cli, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let g = &cli.global;
    let mut cfg = match (base, &g.config) {
        (Some(c), _) => c,
        (None, Some(path)) => ExperimentConfig::load(path)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(v) = &g.data_root {
        cfg.data_root = v.clone();
    }
    if let Some(v) = &g.runs_dir {
        cfg.runs_dir = v.clone();
    }
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    let classifier = |cfg: &mut ExperimentConfig, f: &ClassifierFlags| {
        let c = &mut cfg.classifier;
        c.architecture = f.architecture.unwrap_or(c.architecture);
        c.optimizer = f.optimizer.unwrap_or(c.optimizer);
        c.learning_rate = f.learning_rate.unwrap_or(c.learning_rate);
        c.weight_decay = f.weight_decay.unwrap_or(c.weight_decay);
        c.batch_size = f.batch_size.unwrap_or(c.batch_size);
        c.epochs = f.epochs.unwrap_or(c.epochs);
        c.image_size = f.image_size.unwrap_or(c.image_size);
    };
    match &cli.command {
        Command::TrainDiffusion(a) => {
            if let Some(v) = &a.denoiser {
                cfg.denoiser = v.clone();
            }
            if let Some(v) = &a.extractor {
                cfg.extractor = v.clone();
            }
            let s = &mut cfg.schedule;
            s.timesteps = a.schedule.timesteps.unwrap_or(s.timesteps);
            s.beta_start = a.schedule.beta_start.unwrap_or(s.beta_start);
            s.beta_end = a.schedule.beta_end.unwrap_or(s.beta_end);
            let d = &mut cfg.diffusion;
            d.epochs = a.epochs.unwrap_or(d.epochs);
            d.batch_size = a.batch_size.unwrap_or(d.batch_size);
            d.learning_rate = a.learning_rate.unwrap_or(d.learning_rate);
            d.optimizer = a.optimizer.unwrap_or(d.optimizer);
            d.weight_decay = a.weight_decay.unwrap_or(d.weight_decay);
            if a.no_ema {
                d.ema_decay = None;
            } else if a.ema_decay.is_some() {
                d.ema_decay = a.ema_decay;
            }
            if let Some(v) = &a.snapshot_epochs {
                d.snapshot_epochs = v.clone();
            }
            d.fid_samples = a.fid_samples.unwrap_or(d.fid_samples);
            d.sample_batch = a.sample_batch.unwrap_or(d.sample_batch);
            if let Some(v) = &a.variance {
                d.variance = parse_enum("variance", v)?;
            }
            if let Some(v) = &a.reduction {
                d.reduction = parse_enum("reduction", v)?;
            }
        }
        Command::Fid(a) => {
            if let Some(v) = &a.extractor {
                cfg.extractor = v.clone();
            }
        }
        Command::TrainClassifier(a) => classifier(&mut cfg, &a.classifier),
        Command::Grid(a) => classifier(&mut cfg, &a.classifier),
        _ => {}
    }
    cfg.finish()
}

/// Runs one invocation and, for commands with an output location, writes
/// its run record there.
fn run(cli: Cli, base: Option<ExperimentConfig>) -> Result<()> {
    if let Command::Rerun(a) = &cli.command {
        let rec = RunRecord::read(&a.record)?;
        let mut replay = rec.cli.clone();
        if let Some(into) = &a.into {
            match &mut replay.command {
                Command::MakeProcedural(c) => c.out = into.clone(),
                Command::BuildDataset(c) => c.out = into.clone(),
                Command::Sample(c) => c.out = into.clone(),
                Command::Eval(c) => c.out = into.clone(),
                Command::ExportMisclassified(c) => c.out = into.clone(),
                _ => replay.global.run_dir = Some(into.clone()),
            }
        }
        replay.global.jobs = cli.global.jobs.or(replay.global.jobs);
        replay.global.overwrite |= cli.global.overwrite;
        replay.global.resume = cli.global.resume;
        return run(replay, Some(rec.config));
    }
    let config = resolve(&cli, base)?;
    let started = now();
    let ctx = Ctx { global: &cli.global, config: &config, command: &cli.command };
    let outcome = match &cli.command {
        Command::MakeProcedural(a) => commands::make_procedural(&ctx, a),
        Command::BuildDataset(a) => commands::build_dataset(&ctx, a),
        Command::TrainDiffusion(a) => commands::train_diffusion(&ctx, a),
        Command::Sample(a) => commands::sample_cmd(&ctx, a),
        Command::Fid(a) => commands::fid(&ctx, a),
        Command::TrainClassifier(a) => commands::train_classifier_cmd(&ctx, a),
        Command::Grid(a) => commands::grid(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::ExportMisclassified(a) => commands::export(&ctx, a),
        Command::Demo(a) => demo::run(&ctx, a),
        Command::Rerun(_) => unreachable!("handled above"),
    }?;
    if let Some(dir) = &outcome.dir {
        for p in &outcome.artifacts {
            if !p.exists() && !dir.join(p).exists() && !config.data_root.join(p).exists() {
                return Err(Error::Param(format!("expected artifact {} was not written", p.display())));
            }
        }
        let record = RunRecord {
            command: cli.command.name().into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            cli: cli.clone(),
            config: config.clone(),
            started_at: started,
            finished_at: now(),
            artifacts: outcome.artifacts,
        };
        let path = record.write(dir)?;
        log::info!("run record written to {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.global.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("cannot size the worker pool: {e}");
        }
    }
    match run(cli, None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::UnknownPreset { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
