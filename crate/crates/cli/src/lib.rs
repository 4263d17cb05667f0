//! `thforge` command-line workflows.
//!
//! Exit codes: 0 success, 1 environment failure (I/O, bind, runtime), 2 bad input
//! (arguments, configuration, manifests, checkpoint mismatch).

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thforge_core::data::{generate_synthetic_dataset, load_manifest, manifest_stats};
use thforge_core::evaluation::{self, EvalConfig, EvalRecord};
use thforge_core::training::{EpochRecord, TrainObserver, TrainOptions};
use thforge_core::{Dataset, ImageSample, ModelState, Predictor, Profile, TaskHead};
use thforge_server::{AppState, ServiceConfig, ServiceError};

use crate::config::{env_overrides, resolve, Layers, RunConfig};
use crate::manifest::{dataset_entries, file_entry, tree_hash, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Env(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Env(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Env(_) => 1,
        }
    }
}

impl From<thforge_core::Error> for CliError {
    fn from(e: thforge_core::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Env(e.to_string())
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Env(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "thforge", version, about = "Tamper detection and localization for identity documents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ID-card dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Size preset.
    #[arg(long, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    /// JSON file merged over the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dot-path override, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Drop the attention modules on the pyramid levels.
    #[arg(long)]
    pub no_cbam: bool,
    /// Feed backbone features to the decoder without top-down fusion.
    #[arg(long)]
    pub no_fpn: bool,
    /// Keep only one head.
    #[arg(long, value_parser = parse_task)]
    pub single_task: Option<TaskHead>,
}

impl ModelFlags {
    fn any(&self) -> bool {
        self.no_cbam || self.no_fpn || self.single_task.is_some()
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if self.no_cbam {
            cfg.model.use_cbam = false;
        }
        if self.no_fpn {
            cfg.model.use_fpn = false;
        }
        if let Some(t) = self.single_task {
            cfg.model.multitask = false;
            cfg.model.single_task = t;
        }
    }
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: thforge_core::Error| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskHead, String> {
    s.parse().map_err(|e: thforge_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per (language, device, kind) cell.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Validation manifest; the training set is used when absent.
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue an interrupted run in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the threshold stored in the checkpoint.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub seg_threshold: Option<f64>,
    /// Build the model from the profile and flags instead of the checkpoint's own
    /// configuration; the checkpoint must then match it exactly.
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Parses `args` and runs the command, reporting failures on stderr.
pub fn run_cli<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let printable: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, printable) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(command: Command, args: Vec<String>) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(&a, args),
        Command::Train(a) => cmd_train(&a, args),
        Command::Eval(a) => cmd_eval(&a, args),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn resolve_config(c: &ConfigArgs) -> Result<(RunConfig, Vec<String>), CliError> {
    let env = env_overrides(std::env::vars());
    let mut keys: Vec<String> = env.iter().map(|(k, _)| k.clone()).collect();
    for s in &c.sets {
        keys.push(config::parse_assignment(s)?.0);
    }
    let cfg = resolve(Layers {
        profile: c.profile.unwrap_or(Profile::Desk),
        file: c.config.as_deref(),
        env,
        sets: &c.sets,
    })?;
    Ok((cfg, keys))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_samples(path: &Path) -> Result<Vec<ImageSample>, CliError> {
    if !path.is_file() {
        return Err(CliError::Input(format!("{}: manifest not found", path.display())));
    }
    let samples = load_manifest(path)?;
    if samples.is_empty() {
        return Err(CliError::Input(format!("{}: manifest has no records", path.display())));
    }
    Ok(samples)
}

fn load_dataset(path: &Path, samples: Vec<ImageSample>, input_size: usize) -> Result<Dataset, CliError> {
    Dataset::load(samples, input_size, DType::F32).map_err(|e| match e {
        thforge_core::Error::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        other => other.into(),
    })
}

pub fn cmd_synth(a: &SynthArgs, args: Vec<String>) -> Result<(), CliError> {
    let started_at = Utc::now();
    let manifest_path = generate_synthetic_dataset(&a.out, a.n, a.seed)?;
    let samples = load_manifest(&manifest_path)?;
    let stats = manifest_stats(&samples);
    let hash = tree_hash(&dataset_entries(&manifest_path, &samples))?;
    RunManifest {
        command: "synth".into(),
        args,
        config: serde_json::json!({ "n_per_cell": a.n, "out": a.out }),
        seed: Some(a.seed),
        input_hash: manifest::blob_hash(format!("synth:{}:{}", a.n, a.seed).as_bytes()),
        output_hash: Some(hash.clone()),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started_at,
        finished_at: Utc::now(),
    }
    .write(&a.out)?;
    println!("manifest: {}", manifest_path.display());
    println!("samples: {}", stats.total);
    println!(
        "bona_fide: {}  attack: {}",
        stats.by_label.get(&0).copied().unwrap_or(0),
        stats.by_label.get(&1).copied().unwrap_or(0)
    );
    println!("languages: {}  devices: {}", stats.by_language.len(), stats.by_device.len());
    println!("hash: {hash}");
    Ok(())
}

struct Progress;

impl TrainObserver for Progress {
    fn on_epoch(&mut self, r: &EpochRecord) {
        let val = r
            .val
            .as_ref()
            .map(|v| {
                format!(
                    " val_acc={} val_f1={} val_dice={}",
                    fmt_opt(v.accuracy),
                    fmt_opt(v.f1),
                    fmt_opt(v.dice)
                )
            })
            .unwrap_or_default();
        eprintln!(
            "epoch {:>3}{} loss={:.4}{}",
            r.epoch,
            if r.frozen { " (frozen)" } else { "" },
            r.train_loss,
            val
        );
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn cmd_train(a: &TrainArgs, args: Vec<String>) -> Result<(), CliError> {
    let started_at = Utc::now();
    let (mut cfg, _) = resolve_config(&a.config)?;
    a.model.apply(&mut cfg);
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        cfg.train.freeze_epochs = cfg.train.freeze_epochs.min(e - 1);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;

    let samples = read_samples(&a.manifest)?;
    let mut inputs = dataset_entries(&a.manifest, &samples);
    let train_ds = load_dataset(&a.manifest, samples, cfg.model.input_size)?;
    let val_ds = match &a.val_manifest {
        Some(p) => {
            let s = read_samples(p)?;
            inputs.extend(dataset_entries(p, &s).into_iter().map(|(n, f)| (format!("val/{n}"), f)));
            Some(load_dataset(p, s, cfg.model.input_size)?)
        }
        None => None,
    };
    create_dir(&a.out)?;

    let state = ModelState::new(
        &cfg.model,
        cfg.train.seed,
        DType::F32,
        (cfg.loss.init_log_var_det, cfg.loss.init_log_var_seg),
    )?;
    eprintln!(
        "training {} model ({} parameters) on {} samples for {} epochs",
        cfg.profile,
        state.num_params(),
        train_ds.len(),
        cfg.train.epochs
    );
    let val = val_ds.as_ref().or(Some(&train_ds));
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume,
        stop_after_epoch: None,
    };
    let outcome = thforge_core::train(&state, &train_ds, val, &cfg.loss, &cfg.train, &opts, &mut Progress)?;
    let best = outcome
        .best_checkpoint
        .clone()
        .unwrap_or_else(|| a.out.join(thforge_core::training::BEST_CHECKPOINT));

    RunManifest {
        command: "train".into(),
        args,
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: Some(cfg.train.seed),
        input_hash: tree_hash(&inputs)?,
        output_hash: Some(tree_hash(&[file_entry(&best)])?),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started_at,
        finished_at: Utc::now(),
    }
    .write(&a.out)?;
    println!("checkpoint: {}", best.display());
    if let (Some(e), Some(s)) = (outcome.best_epoch, outcome.best_score) {
        println!("best epoch: {e} (score {s:.4})");
    }
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[(f64, f64, f64)]) -> Result<(), CliError> {
    let mut out = format!("{header}\n");
    for (x, y, t) in rows {
        out.push_str(&format!("{t},{x},{y}\n"));
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn cmd_eval(a: &EvalArgs, args: Vec<String>) -> Result<(), CliError> {
    let started_at = Utc::now();
    let (mut cfg, keys) = resolve_config(&a.config)?;
    if !a.checkpoint.is_file() {
        return Err(CliError::Input(format!("{}: checkpoint not found", a.checkpoint.display())));
    }
    let explicit_model = a.config.profile.is_some()
        || a.config.config.is_some()
        || a.model.any()
        || keys.iter().any(|k| k.starts_with("model."));
    let predictor = if explicit_model {
        a.model.apply(&mut cfg);
        cfg.model.validate()?;
        let state = ModelState::new(&cfg.model, 0, DType::F32, (0.0, 0.0))?;
        let meta = state.load_weights(&a.checkpoint)?;
        Predictor::new(state, meta)?
    } else {
        let p = Predictor::from_checkpoint(&a.checkpoint)?;
        cfg.model = p.state().config().clone();
        p
    };
    let meta = predictor.meta().clone();
    let has_key = |k: &str| keys.iter().any(|x| x == k);
    let eval_cfg = EvalConfig {
        threshold: a
            .threshold
            .or((!has_key("eval.threshold")).then_some(meta.det_threshold).flatten())
            .unwrap_or(cfg.eval.threshold),
        seg_threshold: a
            .seg_threshold
            .or((!has_key("eval.seg_threshold")).then_some(meta.seg_threshold).flatten())
            .unwrap_or(cfg.eval.seg_threshold),
        grid_step: cfg.eval.grid_step,
    };
    cfg.eval = eval_cfg.clone();

    let samples = read_samples(&a.manifest)?;
    let inputs = {
        let mut v = dataset_entries(&a.manifest, &samples);
        v.push(("checkpoint".into(), a.checkpoint.clone()));
        v
    };
    let ds = load_dataset(&a.manifest, samples, predictor.input_size())?;
    create_dir(&a.out)?;
    let records: Vec<EvalRecord> = predictor.evaluate_dataset(&ds, cfg.train.batch_size.max(1))?;
    let report = evaluation::evaluate(ds.samples(), &records, &eval_cfg)?;
    let metrics_path = a.out.join("metrics.json");
    write_json(&metrics_path, &report)?;

    let scores: Option<Vec<f64>> = records.iter().map(|r| r.score).collect();
    if let Some(scores) = &scores {
        let labels = ds.labels();
        evaluation::export_errors(ds.samples(), &records, &eval_cfg, &a.out.join("errors.jsonl"))?;
        if labels.iter().any(|&l| l == 1) && labels.iter().any(|&l| l == 0) {
            write_csv(&a.out.join("roc.csv"), "threshold,fpr,tpr", &evaluation::roc_points(scores, &labels)?)?;
            write_csv(&a.out.join("pr.csv"), "threshold,recall,precision", &evaluation::pr_points(scores, &labels)?)?;
        }
    }

    RunManifest {
        command: "eval".into(),
        args,
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: None,
        input_hash: tree_hash(&inputs)?,
        output_hash: Some(tree_hash(&[file_entry(&metrics_path)])?),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started_at,
        finished_at: Utc::now(),
    }
    .write(&a.out)?;

    println!("samples: {}", report.n_samples);
    if let Some(c) = &report.classification {
        println!(
            "accuracy: {:.4}  attack_f1: {:.4}  threshold: {:.2}",
            c.accuracy, c.attack.f1, report.threshold
        );
    }
    if let Some(auc) = report.auc {
        println!("auc: {auc:.4}");
    }
    if let Some(s) = &report.segmentation {
        println!("attack_dice: {:.4}  seg_threshold: {:.2}", s.dice_mean, eval_cfg.seg_threshold);
    }
    println!("report: {}", metrics_path.display());
    Ok(())
}

/// Resolves once SIGINT or SIGTERM arrives.
async fn interrupted() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        let term = async {
            match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
                Ok(mut s) => {
                    s.recv().await;
                }
                Err(_) => std::future::pending::<()>().await,
            }
        };
        tokio::select! {
            _ = ctrl_c => {},
            _ = term => {},
        }
    }
    #[cfg(not(unix))]
    ctrl_c.await;
}

pub fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    let (cfg, _) = resolve_config(&a.config)?;
    let mut svc: ServiceConfig = cfg.service;
    svc.checkpoint_path = a.checkpoint.clone();
    if let Some(h) = &a.host {
        svc.host = h.clone();
    }
    if let Some(p) = a.port {
        svc.port = p;
    }
    if a.threshold.is_some() {
        svc.threshold = a.threshold;
    }
    svc.validate()?;
    if !svc.checkpoint_path.is_file() {
        return Err(CliError::Input(format!("{}: checkpoint not found", svc.checkpoint_path.display())));
    }
    let state: AppState = thforge_server::load_state(&svc)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Env(format!("cannot start runtime: {e}")))?;
    rt.block_on(async move {
        let listener = thforge_server::bind(&svc).await?;
        let addr = listener.local_addr().map_err(ServiceError::Io)?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        thforge_server::serve(listener, state, interrupted()).await?;
        Ok::<(), CliError>(())
    })?;
    println!("shut down cleanly");
    Ok(())
}
