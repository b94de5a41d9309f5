//! Command-line front end.
//!
//! Every failure ends in one line `ERROR <category>: <message>` on stderr.
//! Exit code 1 marks invalid input (flags, config, CSV, checkpoint schema),
//! 2 marks a failure during computation.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::dataset::{generate_synthetic, load_csv, Dataset, SyntheticConfig, CELL_METERS, DEFAULT_ENV_FEATURE};
use crate::error::{Error, Result};
use crate::losses::{Objective, RemainderPolicy};
use crate::metrics::MetricReport;
use crate::models::{feature_importance, EtaMode, Model, ModelKind};
use crate::protocols::{
    block_cv, block_v, block_v_with, evaluate, train, train_region, transfer_cv, Aggregate, Protocol,
    ProtocolOptions, ProtocolReport, TrainConfig,
};
use crate::spatial::{
    export_riskmap, local_moran, riskmap_html, weights_for_cells, Contiguity, DEFAULT_ALPHA, DEFAULT_PERMUTATIONS,
};

#[derive(Parser, Debug)]
#[command(name = "reland", version, about = "Landmine risk modeling on gridded cells")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset CSV.
    Gen(GenArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Run a spatial validation protocol.
    Cv(CvArgs),
    /// Score a dataset with a checkpoint.
    Eval(EvalArgs),
    /// Write per-feature importance of a RELand checkpoint.
    Importance(ImportanceArgs),
    /// Export a GeoJSON risk map, optionally with Moran clusters and HTML.
    Riskmap(RiskmapArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Key=value file with synthetic-data settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Key=value file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub env_feature: Option<String>,
    #[arg(long)]
    pub single_feature: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub push_p: Option<f64>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint-selection set; without it a stratified holdout of the
    /// training data is used.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[arg(long)]
    pub protocol: Protocol,
    /// Dataset for blockcv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Region A for blockv/transfercv.
    #[arg(long)]
    pub data_a: Option<PathBuf>,
    /// Region B for blockv/transfercv.
    #[arg(long)]
    pub data_b: Option<PathBuf>,
    /// Pretrained region-A checkpoint; replaces training on `--data-a`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Report path, or `-` for stdout.
    #[arg(long)]
    pub report: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub env_feature: Option<String>,
    #[arg(long)]
    pub report: String,
}

#[derive(Args, Debug)]
pub struct ImportanceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub env_feature: Option<String>,
    /// Use per-sample step weights instead of batch aggregates.
    #[arg(long)]
    pub per_sample: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RiskmapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub env_feature: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub html: Option<PathBuf>,
    /// Add local Moran's I clusters.
    #[arg(long)]
    pub moran: bool,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    pub perms: usize,
    #[arg(long, default_value = "queen")]
    pub contiguity: Contiguity,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = CELL_METERS)]
    pub cell_size: f64,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {} is not `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    parse_kv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

/// Applies one config entry to a synthetic-data config.
pub fn apply_synthetic_key(cfg: &mut SyntheticConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "grid_rows" => cfg.grid_rows = value(key, v)?,
        "grid_cols" => cfg.grid_cols = value(key, v)?,
        "n_municipalities" => cfg.n_municipalities = value(key, v)?,
        "d_geo" => cfg.d_geo = value(key, v)?,
        "seed" => cfg.seed = value(key, v)?,
        "spurious_strength" => cfg.spurious_strength = value(key, v)?,
        "hard_fraction" => cfg.hard_fraction = value(key, v)?,
        "base_positive_rate" => cfg.base_positive_rate = value(key, v)?,
        "informative" => cfg.informative = value(key, v)?,
        other => return Err(Error::Config(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

/// Applies one config entry to a training config. `env_feature` is kept
/// outside [`TrainConfig`] because it belongs to the dataset.
pub fn apply_train_key(cfg: &mut TrainConfig, env: &mut Option<String>, key: &str, v: &str) -> Result<()> {
    match key {
        "model" => cfg.model = value(key, v)?,
        "single_feature" => cfg.single_feature = Some(v.to_string()),
        "env_feature" => *env = Some(v.to_string()),
        "steps" => cfg.steps = value(key, v)?,
        "latent" => cfg.latent = value(key, v)?,
        "gamma" => cfg.gamma = value(key, v)?,
        "epochs" => cfg.epochs = value(key, v)?,
        "finetune_epochs" => cfg.finetune_epochs = Some(value(key, v)?),
        "batch_size" => cfg.batch_size = value(key, v)?,
        "base_lr" => cfg.optimizer.base_lr = value(key, v)?,
        "beta1" => cfg.optimizer.beta1 = value(key, v)?,
        "beta2" => cfg.optimizer.beta2 = value(key, v)?,
        "adam_epsilon" => cfg.optimizer.epsilon = value(key, v)?,
        "decay_factor" => cfg.optimizer.decay_factor = value(key, v)?,
        "decay_every" => cfg.optimizer.decay_every = value(key, v)?,
        "weight_decay" => cfg.optimizer.weight_decay = value(key, v)?,
        "finetune_lr" => cfg.finetune_lr = value(key, v)?,
        "seed" => cfg.seed = value(key, v)?,
        "objective" => cfg.objective = value(key, v)?,
        "irm_lambda" => cfg.irm.lambda = value(key, v)?,
        "irm_remainder" => {
            cfg.irm.remainder_policy = match v {
                "merge_into_last" => RemainderPolicy::MergeIntoLast,
                "drop_remainder" => RemainderPolicy::DropRemainder,
                _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
            }
        }
        "push_p" => cfg.push.p = value(key, v)?,
        "push_lambda" => cfg.push.lambda_p = value(key, v)?,
        "standardize" => cfg.standardize = value(key, v)?,
        "holdout_fraction" => cfg.holdout_fraction = value(key, v)?,
        other => return Err(Error::Config(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

fn build_train_config(flags: &TrainFlags) -> Result<(TrainConfig, String)> {
    let mut cfg = TrainConfig::default();
    let mut env = None;
    if let Some(path) = &flags.config {
        for (k, v) in read_kv(path)? {
            apply_train_key(&mut cfg, &mut env, &k, &v)?;
        }
    }
    if let Some(v) = flags.model {
        cfg.model = v;
    }
    if let Some(v) = flags.objective {
        cfg.objective = v;
    }
    if let Some(v) = &flags.env_feature {
        env = Some(v.clone());
    }
    if let Some(v) = &flags.single_feature {
        cfg.single_feature = Some(v.clone());
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.optimizer.base_lr = v;
    }
    if let Some(v) = flags.lambda {
        cfg.irm.lambda = v;
    }
    if let Some(v) = flags.push_p {
        cfg.push.p = v;
    }
    if let Some(v) = flags.finetune_epochs {
        cfg.finetune_epochs = Some(v);
    }
    if let Some(v) = flags.finetune_lr {
        cfg.finetune_lr = v;
    }
    cfg.validate()?;
    Ok((cfg, env.unwrap_or_else(|| DEFAULT_ENV_FEATURE.to_string())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Writes `text` to `target`, or to stdout when `target` is `-`.
fn emit(target: &str, text: &str) -> Result<()> {
    if target == "-" {
        let mut out = std::io::stdout().lock();
        out.write_all(text.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(Path::new("<stdout>"), e))
    } else {
        write_file(Path::new(target), text.as_bytes())
    }
}

/// Human-readable stdout output; a closed pipe is not an error.
fn say(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn fmt_row(name: &str, n: usize, m: &MetricReport) -> String {
    format!(
        "{name:<16} {n:>7} {:>9.2} {:>9.2} {:>11.2} {:>12.2}",
        100.0 * m.roc_auc,
        100.0 * m.pr_auc,
        m.mean_height,
        m.mean_rheight
    )
}

/// Table with ROC/PR scaled by 100 and the Height metrics raw.
pub fn render_table(report: &ProtocolReport) -> String {
    let mut s = format!(
        "{} | model {} | objective {:?}\n{:<16} {:>7} {:>9} {:>9} {:>11} {:>12}\n",
        report.protocol.as_str(),
        report.model.as_str(),
        report.objective,
        "fold",
        "cells",
        "ROC (↑)",
        "PR (↑)",
        "Height (↓)",
        "rHeight (↓)"
    );
    for f in &report.folds {
        match &f.metrics {
            Some(m) => s.push_str(&fmt_row(&f.fold, f.n_cells, m)),
            None => s.push_str(&format!("{:<16} {:>7}   n/a (single class)", f.fold, f.n_cells)),
        }
        s.push('\n');
    }
    let summary = |label: &str, a: &Aggregate| {
        format!(
            "{label:<16} {:>7} {:>4.2} ({:.2}) {:.2} ({:.2}) {:.2} ({:.2}) {:.2} ({:.2})\n",
            a.n_folds,
            100.0 * a.mean.roc_auc,
            100.0 * a.std.roc_auc,
            100.0 * a.mean.pr_auc,
            100.0 * a.std.pr_auc,
            a.mean.mean_height,
            a.std.mean_height,
            a.mean.mean_rheight,
            a.std.mean_rheight
        )
    };
    if let Some(a) = report.summary() {
        s.push_str(&summary("mean (std)", &a));
    }
    if let Some(a) = report.hard_summary() {
        s.push_str(&summary("hard mean (std)", &a));
    }
    s
}

fn load(path: &Path, env: &str) -> Result<Dataset> {
    load_csv(path, env)
}

fn ckpt_env(ck: &Checkpoint, flag: &Option<String>) -> String {
    flag.clone().unwrap_or_else(|| ck.env_feature.clone())
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::default();
    if let Some(path) = &args.config {
        for (k, v) in read_kv(path)? {
            apply_synthetic_key(&mut cfg, &k, &v)?;
        }
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let ds = generate_synthetic(&cfg)?;
    ds.save_csv(&args.out)?;
    eprintln!(
        "wrote {} cells ({} positive) to {}",
        ds.len(),
        ds.positive_count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (cfg, env) = build_train_config(&args.flags)?;
    let data = load(&args.data, &env)?;
    let ck = match &args.val_data {
        Some(p) => {
            let val = load(p, &env)?;
            if !data.same_schema(&val) {
                return Err(Error::Schema("training and validation CSVs differ in feature columns".into()));
            }
            train(&data, &val, &cfg)?
        }
        None => train_region(&data, &cfg)?,
    };
    ck.save(&args.out)?;
    eprintln!(
        "best epoch {} (selection ROC-AUC {}); checkpoint written to {}",
        ck.info.best_epoch.map_or("-".into(), |e| e.to_string()),
        ck.info.best_val_roc_auc.map_or("n/a".into(), |r| format!("{r:.4}")),
        args.out.display()
    );
    Ok(())
}

fn cmd_cv(args: &CvArgs) -> Result<()> {
    if args.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let (cfg, env) = build_train_config(&args.flags)?;
    let opts = ProtocolOptions {
        jobs: args.jobs,
        observer: None,
    };
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| Error::Config(format!("--protocol {} needs {flag}", args.protocol.as_str())))
    };
    let report = match args.protocol {
        Protocol::BlockCv => block_cv(&load(&need(&args.data, "--data")?, &env)?, &cfg, opts)?,
        Protocol::BlockV | Protocol::TransferCv => {
            let b = load(&need(&args.data_b, "--data-b")?, &env)?;
            let ck = match &args.ckpt {
                Some(p) => Checkpoint::load(p)?,
                None => {
                    let a = load(&need(&args.data_a, "--data-a or --ckpt")?, &env)?;
                    if !a.same_schema(&b) {
                        return Err(Error::Schema("regions A and B differ in feature columns".into()));
                    }
                    if args.protocol == Protocol::BlockV {
                        let report = block_v(&a, &b, &cfg, opts)?;
                        return finish_cv(args, &report);
                    }
                    train_region(&a, &cfg)?
                }
            };
            if args.protocol == Protocol::BlockV {
                block_v_with(&ck, &b, &cfg, opts)?
            } else {
                transfer_cv(&ck, &b, &cfg, opts)?
            }
        }
    };
    finish_cv(args, &report)
}

fn finish_cv(args: &CvArgs, report: &ProtocolReport) -> Result<()> {
    emit(&args.report, &to_json(report)?)?;
    let table = render_table(report);
    if args.report == "-" {
        eprint!("{table}");
    } else {
        say(&table);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    format_version: u32,
    n_cells: usize,
    metrics: MetricReport,
    hard_metrics: Option<MetricReport>,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let ds = load(&args.data, &ckpt_env(&ck, &args.env_feature))?;
    let metrics = evaluate(&ck, &ds)?;
    let tags = crate::dataset::tag_environments(&ds)?;
    let hard: Vec<usize> = (0..ds.len())
        .filter(|&i| tags.tags[i] == crate::dataset::EnvironmentTag::Hard)
        .collect();
    let hard_ds = ds.subset(&hard);
    let hard_metrics = if hard_ds.has_both_classes() {
        Some(evaluate(&ck, &hard_ds)?)
    } else {
        None
    };
    let report = EvalReport {
        format_version: crate::protocols::REPORT_VERSION,
        n_cells: ds.len(),
        metrics,
        hard_metrics,
    };
    emit(&args.report, &to_json(&report)?)?;
    let line = format!(
        "ROC (↑) {:.2}  PR (↑) {:.2}  Height (↓) {:.2}  rHeight (↓) {:.2}\n",
        100.0 * metrics.roc_auc,
        100.0 * metrics.pr_auc,
        metrics.mean_height,
        metrics.mean_rheight
    );
    if args.report == "-" {
        eprint!("{line}");
    } else {
        say(&line);
    }
    Ok(())
}

fn cmd_importance(args: &ImportanceArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let Model::Reland(model) = &ck.model else {
        return Err(Error::Config("importance needs a reland checkpoint".into()));
    };
    let ds = load(&args.data, &ckpt_env(&ck, &args.env_feature))?;
    let x = ck.design(&ds)?;
    let mode = if args.per_sample {
        EtaMode::PerSample
    } else {
        EtaMode::Aggregate
    };
    let report = feature_importance(model, x.view(), mode)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["feature".to_string(), "importance".to_string()];
    header.extend((1..=report.masks.len()).map(|s| format!("mask_step{s}")));
    w.write_record(&header)?;
    for (j, name) in ck.feature_names.iter().enumerate() {
        let mut row = vec![name.clone(), report.importance[j].to_string()];
        row.extend(report.masks.iter().map(|m| m[j].to_string()));
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(&args.out, std::io::Error::other(e.to_string())))?;
    write_file(&args.out, &bytes)
}

fn cmd_riskmap(args: &RiskmapArgs) -> Result<()> {
    if args.moran && args.perms == 0 {
        return Err(Error::Config("--perms must be at least 1".into()));
    }
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Error::Config("--alpha must lie in (0, 1)".into()));
    }
    let ck = Checkpoint::load(&args.ckpt)?;
    let ds = load(&args.data, &ckpt_env(&ck, &args.env_feature))?;
    let scores = ck.score(&ds)?;
    let clusters = if args.moran {
        let w = weights_for_cells(ds.cells(), args.contiguity)?;
        if !w.isolated.is_empty() {
            eprintln!("warning: {} isolated cells excluded from Moran's I", w.isolated.len());
        }
        Some(local_moran(&scores, &w, args.perms, args.seed, args.alpha)?)
    } else {
        None
    };
    let doc = export_riskmap(ds.cells(), &scores, clusters.as_ref(), args.cell_size)?;
    write_file(&args.out, serde_json::to_string(&doc)?.as_bytes())?;
    if let Some(html) = &args.html {
        write_file(html, riskmap_html(&doc, "Landmine risk map")?.as_bytes())?;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Importance(a) => cmd_importance(a),
        Command::Riskmap(a) => cmd_riskmap(a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                say(&e.to_string());
                return 0;
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR usage: {}", one_line(first));
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.category(), one_line(&e.to_string()));
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
