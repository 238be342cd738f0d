//! `hsn`: generate synthetic data, train, evaluate, check gradients and
//! compare losses.
//!
//! Settings come from built-in defaults, then the `--config` TOML file, then
//! flags; later sources win. Exit codes: 0 success, 1 usage or validation
//! error (nothing has run yet), 2 failure while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hsn_core::checkpoint;
use hsn_core::config::{RunConfig, Schedule, Variant};
use hsn_core::data::{load_dataset, synthesize_dataset, Dataset, SynthSpec};
use hsn_core::eval::{compare_losses, evaluate, kfold, score_videos};
use hsn_core::gradsuite;
use hsn_core::loss::LossKind;
use hsn_core::model::HsnModel;
use hsn_core::train::{train, PhaseBoundary, StepRecord};

#[derive(Parser)]
#[command(name = "hsn", version, about = "Human-scene network anomaly scorer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset described by a TOML spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a training log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score the test videos of a dataset with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also run k-fold cross-validation from fresh weights.
        #[arg(long, value_name = "K")]
        kfold: Option<usize>,
        /// Write one frame-score file per test video into this directory.
        #[arg(long, value_name = "DIR")]
        dump_scores: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and network block.
    Gradcheck {
        /// Corrupt the adjoint of one primitive (test hook).
        #[arg(long, hide = true, value_name = "OP")]
        corrupt: Option<String>,
    },
    /// Train twin models that differ only in the loss and report both AUCs.
    CompareLoss {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration TOML with [model], [arch] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<Schedule>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Drop the video-level attention (S = segment-level attention).
    #[arg(long)]
    no_vls: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Seeds both parameter initialisation and pair sampling.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "self-rectifying" => Ok(LossKind::SelfRectifying),
        "classical-ranking" => Ok(LossKind::ClassicalRanking),
        _ => Err("expected self-rectifying or classical-ranking".into()),
    }
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    match s {
        "staged" => Ok(Schedule::Staged),
        "joint" => Ok(Schedule::Joint),
        _ => Err("expected staged or joint".into()),
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    match s {
        "full" => Ok(Variant::Full),
        "scene-only" => Ok(Variant::SceneOnly),
        "human-only" => Ok(Variant::HumanOnly),
        _ => Err("expected full, scene-only or human-only".into()),
    }
}

struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

fn runtime(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        msg: msg.to_string(),
    }
}

type CmdResult = Result<(), Failure>;

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                RunConfig::parse_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(loss) = self.loss {
            config.train.loss = loss;
        }
        if let Some(schedule) = self.schedule {
            config.train.schedule = schedule;
        }
        if let Some(variant) = self.variant {
            config.arch.variant = variant;
        }
        if self.no_vls {
            config.arch.video_level_selection = false;
        }
        if let Some(steps) = self.steps {
            config.train.steps = steps;
        }
        if let Some(lr) = self.lr {
            config.train.learning_rate = lr;
        }
        if let Some(seed) = self.seed {
            config.train.seed = seed;
            config.model.seed = seed;
        }
        config.train.validate().map_err(|e| usage(e.to_string()))?;
        Ok(config)
    }
}

/// Accepts a dataset directory or its manifest file.
fn manifest_path(data: &Path) -> Result<PathBuf, Failure> {
    let path = if data.is_dir() { data.join("manifest.json") } else { data.to_path_buf() };
    if !path.is_file() {
        return Err(usage(format!("{}: no dataset manifest found", data.display())));
    }
    Ok(path)
}

fn load_data(data: &Path) -> Result<Dataset, Failure> {
    load_dataset(&manifest_path(data)?).map_err(|e| usage(e.to_string()))
}

/// Builds an untrained model for `data`, with the extents resolved into
/// `config` so the echoed configuration is complete.
fn build_model(config: &mut RunConfig, data: &Dataset) -> Result<HsnModel, Failure> {
    let hyper = config.hyper(data.segments, data.channels).map_err(|e| usage(e.to_string()))?;
    config.model.segments = Some(hyper.segments);
    config.model.channels = Some(hyper.channels);
    let model = HsnModel::new(hyper, config.arch.clone()).map_err(|e| usage(e.to_string()))?;
    for v in &data.videos {
        model.check_video(v).map_err(|e| usage(e.to_string()))?;
    }
    Ok(model)
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn gen_data(spec: &Path, out: &Path) -> CmdResult {
    let text = fs::read_to_string(spec).map_err(|e| usage(format!("{}: {e}", spec.display())))?;
    let spec = SynthSpec::parse_toml(&text).map_err(|e| usage(format!("{}: {e}", spec.display())))?;
    let written = synthesize_dataset(&spec, out).map_err(runtime)?;
    println!("{}", written.manifest_path.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainLog<'a> {
    seed: u64,
    config: &'a RunConfig,
    checkpoint: String,
    phases: &'a [PhaseBoundary],
    steps: &'a [StepRecord],
}

fn train_cmd(data: &Path, out: &Path, run: &RunArgs) -> CmdResult {
    let mut config = run.resolve()?;
    let dataset = load_data(data)?;
    let mut model = build_model(&mut config, &dataset)?;
    log::info!("effective configuration:\n{}", config.to_toml());
    let trace = train(&mut model, &config.train, &dataset).map_err(|e| match e {
        hsn_core::Error::InvalidInput(msg) => usage(msg),
        other => runtime(other),
    })?;
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let index = checkpoint::save(&model, Some(&config.train), &out.join("checkpoint")).map_err(runtime)?;
    let log = TrainLog {
        seed: config.train.seed,
        config: &config,
        checkpoint: "checkpoint/checkpoint.json".into(),
        phases: &trace.phases,
        steps: &trace.steps,
    };
    write_text(&out.join("train_log.json"), &serde_json::to_string_pretty(&log).expect("log serializes"))?;
    let last = trace.steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
    println!("{} (final loss {last:.6})", index.display());
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, report_path: &Path, k: Option<usize>, dump: Option<&Path>) -> CmdResult {
    let (model, train_config) = checkpoint::load(ckpt).map_err(|e| usage(e.to_string()))?;
    let dataset = load_data(data)?;
    for v in &dataset.videos {
        model.check_video(v).map_err(|e| usage(e.to_string()))?;
    }
    let mut report = evaluate(&model, &dataset).map_err(runtime)?;
    if let Some(k) = k {
        let config = train_config.unwrap_or_default();
        let template = HsnModel::new(model.hyper.clone(), model.arch.clone()).map_err(runtime)?;
        report.kfold = Some(kfold(&template, &config, &dataset, k, config.seed).map_err(|e| match e {
            hsn_core::Error::InvalidInput(msg) => usage(msg),
            other => runtime(other),
        })?);
    }
    write_text(report_path, &report.to_json())?;
    if let Some(dir) = dump {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        for video in score_videos(&model, &dataset.test_videos()).map_err(runtime)? {
            let mut text = String::with_capacity(video.scores.len() * 20);
            for s in &video.scores {
                text.push_str(&format!("{s}\n"));
            }
            write_text(&dir.join(format!("{}.txt", video.id)), &text)?;
        }
    }
    println!("AUC {:.6}", report.auc);
    if let Some(kf) = &report.kfold {
        println!("mAUC {:.6} over {} folds", kf.mean_auc, kf.folds.len());
    }
    Ok(())
}

fn gradcheck_cmd(corrupt: Option<&str>) -> CmdResult {
    let fault = match corrupt {
        Some(name) => Some(gradsuite::parse_op(name).ok_or_else(|| usage(format!("unknown op {name:?}")))?),
        None => None,
    };
    let results = gradsuite::run(fault).map_err(runtime)?;
    println!("{:<32} {:>14}  result", "check", "max rel error");
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{:<32} {:>14.3e}  {verdict}", r.name, r.max_rel_error);
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

fn compare_cmd(data: &Path, out: &Path, run: &RunArgs) -> CmdResult {
    let mut config = run.resolve()?;
    let dataset = load_data(data)?;
    let template = build_model(&mut config, &dataset)?;
    let cmp = compare_losses(&template, &config.train, &dataset).map_err(runtime)?;
    write_text(out, &serde_json::to_string_pretty(&cmp).expect("comparison serializes"))?;
    println!(
        "self-rectifying {:.6}  classical-ranking {:.6}  delta {:+.6}",
        cmp.self_rectifying, cmp.classical_ranking, cmp.delta
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenData { spec, out } => gen_data(spec, out),
        Command::Train { data, out, run } => train_cmd(data, out, run),
        Command::Eval {
            ckpt,
            data,
            report,
            kfold,
            dump_scores,
        } => eval_cmd(ckpt, data, report, *kfold, dump_scores.as_deref()),
        Command::Gradcheck { corrupt } => gradcheck_cmd(corrupt.as_deref()),
        Command::CompareLoss { data, out, run } => compare_cmd(data, out, run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
