//! Training loop and the spatial validation protocols.
//!
//! `block_cv` leaves one municipality out at a time, `block_v` trains on a
//! region A and tests on each municipality of a region B, and `transfer_cv`
//! fine-tunes an A-model on B without the test municipality.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Standardization, TrainingInfo};
use crate::dataset::{split_by_municipality, tag_environments, Dataset, EnvironmentTag};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, objective_grad, IrmConfig, Objective, PushConfig};
use crate::metrics::MetricReport;
use crate::models::{single_feature_column, LrModel, MlpModel, Model, ModelKind, RelandConfig, RelandModel};
use crate::tensor::{AdamConfig, AdamState};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Feature used by `lr-single`.
    pub single_feature: Option<String>,
    pub steps: usize,
    pub latent: usize,
    pub gamma: f64,
    pub epochs: usize,
    /// Fine-tuning epochs for `transfer_cv`; `None` reuses `epochs`.
    pub finetune_epochs: Option<usize>,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub finetune_lr: f64,
    pub seed: u64,
    pub objective: Objective,
    pub irm: IrmConfig,
    pub push: PushConfig,
    pub standardize: bool,
    /// Share of each (municipality, label) group held out for checkpoint
    /// selection when the test region must stay unseen.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Reland,
            single_feature: None,
            steps: 2,
            latent: 8,
            gamma: -1.0,
            epochs: 500,
            finetune_epochs: None,
            batch_size: 2048,
            optimizer: AdamConfig::default(),
            finetune_lr: 0.05,
            seed: 0,
            objective: Objective::Erm,
            irm: IrmConfig::default(),
            push: PushConfig::default(),
            standardize: true,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.optimizer.base_lr > 0.0 && self.finetune_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must lie in (0, 1)");
        }
        if self.model == ModelKind::LrSingle && self.single_feature.is_none() {
            return bad("lr-single needs single_feature");
        }
        self.irm.validate()?;
        self.push.validate()?;
        if self.model == ModelKind::Reland {
            self.reland_config(1).validate()?;
        }
        Ok(())
    }

    pub fn reland_config(&self, d: usize) -> RelandConfig {
        RelandConfig {
            d,
            steps: self.steps,
            latent: self.latent,
            gamma: self.gamma,
        }
    }

    fn finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.epochs)
    }
}

/// What a piece of training code read, for isolation audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessRole {
    /// Labels and features used for gradients, standardization and masks.
    Fit,
    /// Cells scored to pick the best epoch.
    Select,
    /// Cells scored for the reported metrics.
    Evaluate,
}

#[derive(Debug, Clone)]
pub struct Access {
    pub fold: String,
    pub role: AccessRole,
    pub cell_ids: Vec<String>,
}

pub type Observer<'a> = dyn Fn(&Access) + Sync + 'a;

#[derive(Clone, Copy)]
pub struct ProtocolOptions<'a> {
    /// Folds run concurrently on this many threads.
    pub jobs: usize,
    pub observer: Option<&'a Observer<'a>>,
}

impl Default for ProtocolOptions<'_> {
    fn default() -> Self {
        Self { jobs: 1, observer: None }
    }
}

impl std::fmt::Debug for ProtocolOptions<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProtocolOptions")
            .field("jobs", &self.jobs)
            .field("observer", &self.observer.is_some())
            .finish()
    }
}

struct Ctx<'a> {
    fold: &'a str,
    observer: Option<&'a Observer<'a>>,
}

impl Ctx<'_> {
    fn record(&self, role: AccessRole, ds: &Dataset) {
        if let Some(obs) = self.observer {
            obs(&Access {
                fold: self.fold.to_string(),
                role,
                cell_ids: ds.cells().iter().map(|c| c.cell_id.clone()).collect(),
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Selection ROC-AUC, or `None` when the selection set is single-class.
    pub select_roc_auc: Option<f64>,
    pub select_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for fold `k` of a protocol run.
pub fn fold_seed(master: u64, k: usize) -> u64 {
    splitmix(master ^ splitmix(k as u64 + 1))
}

const INIT_STREAM: u64 = u64::MAX;
const HOLDOUT_STREAM: u64 = u64::MAX - 1;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn build_model(cfg: &TrainConfig, names: &[String], seed: u64) -> Result<Model> {
    let d = names.len();
    let mut rng = rng_for(seed, INIT_STREAM);
    Ok(match cfg.model {
        ModelKind::Reland => Model::Reland(RelandModel::init(cfg.reland_config(d), &mut rng)?),
        ModelKind::Mlp => Model::Mlp(MlpModel::init(d, &mut rng)),
        ModelKind::Lr => Model::Lr(LrModel::init(d, &mut rng)),
        ModelKind::LrSingle => {
            let name = cfg
                .single_feature
                .as_deref()
                .ok_or_else(|| Error::Config("lr-single needs single_feature".into()))?;
            Model::Lr(LrModel::single_feature(single_feature_column(names, name)?, &mut rng))
        }
    })
}

/// Mini-batches of a shuffled order; a tail shorter than `min_batch` joins
/// the previous batch.
fn batches(order: &[usize], batch_size: usize, min_batch: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let end = (start + batch_size).min(order.len());
        if end - start < min_batch && !out.is_empty() {
            let prev_start = start - out.pop().expect("non-empty").len();
            out.push(&order[prev_start..end]);
        } else {
            out.push(&order[start..end]);
        }
        start = end;
    }
    out
}

fn rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn score_with(model: &Model, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    if x.nrows() == 0 {
        return Ok(Vec::new());
    }
    model.predict(x)
}

/// Selection score of an epoch: ROC-AUC if the set has both classes,
/// otherwise only the cross-entropy is available.
fn selection_stats(model: &Model, x: ArrayView2<f64>, labels: &[u8]) -> Result<(Option<f64>, f64)> {
    let probs = score_with(model, x)?;
    let y: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
    let loss = cross_entropy(&probs, &y)?;
    let has_both = labels.contains(&0) && labels.contains(&1);
    let roc = if has_both {
        Some(crate::metrics::roc_auc(&probs, labels)?)
    } else {
        None
    };
    Ok((roc, loss))
}

struct FitSpec<'a> {
    epochs: usize,
    lr: f64,
    seed: u64,
    info_seed: u64,
    ctx: &'a Ctx<'a>,
}

fn fit(
    mut model: Model,
    standardization: Standardization,
    train: &Dataset,
    select: &Dataset,
    cfg: &TrainConfig,
    spec: FitSpec<'_>,
) -> Result<Trained> {
    if !train.same_schema(select) {
        return Err(Error::Schema("train and selection sets differ in feature columns".into()));
    }
    if !train.has_both_classes() {
        return Err(Error::Domain("training set has a single class".into()));
    }
    if select.is_empty() {
        return Err(Error::Domain("checkpoint selection set is empty".into()));
    }
    spec.ctx.record(AccessRole::Fit, train);
    spec.ctx.record(AccessRole::Select, select);

    let x = standardization.apply(train.features_matrix().view())?;
    let xs = standardization.apply(select.features_matrix().view())?;
    let labels = train.labels();
    let select_labels = select.labels_u8();
    let tags = tag_environments(train)?.tags;
    let n = train.len();
    if n < model.min_batch() {
        return Err(Error::Domain(format!("{n} training cells is too few for this model")));
    }

    let make_checkpoint = |model: Model, info: TrainingInfo| Checkpoint {
        model,
        feature_names: train.feature_names().to_vec(),
        env_feature: train.env_feature().to_string(),
        standardization: standardization.clone(),
        info,
    };

    if spec.epochs == 0 {
        return Ok(Trained {
            checkpoint: make_checkpoint(
                model,
                TrainingInfo {
                    objective: Some(cfg.objective),
                    seed: spec.info_seed,
                    ..TrainingInfo::default()
                },
            ),
            history: Vec::new(),
        });
    }

    let mut adam = AdamState::new(
        AdamConfig {
            base_lr: spec.lr,
            ..cfg.optimizer
        },
        model.num_params(),
    );
    let mut params = model.params();
    let mut history = Vec::with_capacity(spec.epochs);
    let mut best: Option<(Model, usize, Option<f64>, f64)> = None;

    for epoch in 0..spec.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(spec.seed, epoch as u64));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in batches(&order, cfg.batch_size, model.min_batch()).into_iter().enumerate() {
            let xb = rows(x.view(), batch);
            let yb: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
            let tb: Vec<EnvironmentTag> = batch.iter().map(|&i| tags[i]).collect();
            let pass = model.forward_train(xb.view())?;
            let irm = IrmConfig {
                batch_size: batch.len(),
                ..cfg.irm
            };
            let (loss, dlogits) = objective_grad(cfg.objective, pass.logits(), &yb, &tb, &irm, &cfg.push)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let grads = model.backward(&pass, &dlogits)?;
            adam.step(&mut params, &grads, epoch)?;
            model.set_params(&params);
            model.commit(&pass);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }

        let mut candidate = model.clone();
        candidate.finalize(x.view())?;
        let (roc, sel_loss) = selection_stats(&candidate, xs.view(), &select_labels)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / seen as f64,
            select_roc_auc: roc,
            select_loss: sel_loss,
        });
        let better = match &best {
            None => true,
            Some((_, _, best_roc, best_loss)) => match (roc, best_roc) {
                (Some(r), Some(b)) => r > *b,
                _ => sel_loss < *best_loss,
            },
        };
        if better {
            best = Some((candidate, epoch, roc, sel_loss));
        }
    }

    let (model, best_epoch, best_roc, _) = best.expect("at least one epoch ran");
    Ok(Trained {
        checkpoint: make_checkpoint(
            model,
            TrainingInfo {
                objective: Some(cfg.objective),
                seed: spec.info_seed,
                best_epoch: Some(best_epoch),
                best_val_roc_auc: best_roc,
                epochs_run: spec.epochs,
            },
        ),
        history,
    })
}

fn fit_standardization(cfg: &TrainConfig, train: &Dataset) -> Standardization {
    if cfg.standardize {
        Standardization::fit(train.features_matrix().view())
    } else {
        Standardization::identity(train.n_features())
    }
}

fn train_in(train: &Dataset, select: &Dataset, cfg: &TrainConfig, seed: u64, ctx: &Ctx<'_>) -> Result<Trained> {
    cfg.validate()?;
    let model = build_model(cfg, train.feature_names(), seed)?;
    let standardization = fit_standardization(cfg, train);
    fit(
        model,
        standardization,
        train,
        select,
        cfg,
        FitSpec {
            epochs: cfg.epochs,
            lr: cfg.optimizer.base_lr,
            seed,
            info_seed: seed,
            ctx,
        },
    )
}

/// Trains from scratch and returns the checkpoint of the epoch with the best
/// ROC-AUC on `val` (earliest on ties).
pub fn train(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    Ok(train_detailed(train, val, cfg)?.checkpoint)
}

pub fn train_detailed(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    let ctx = Ctx {
        fold: "train",
        observer: None,
    };
    train_in(train, val, cfg, cfg.seed, &ctx)
}

/// Continues training `ck` on `train` at the fine-tuning learning rate,
/// keeping its standardization.
pub fn fine_tune(ck: &Checkpoint, train: &Dataset, select: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    let ctx = Ctx {
        fold: "fine-tune",
        observer: None,
    };
    fine_tune_in(ck, train, select, cfg, cfg.seed, &ctx)
}

fn fine_tune_in(
    ck: &Checkpoint,
    train: &Dataset,
    select: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    ctx: &Ctx<'_>,
) -> Result<Trained> {
    if cfg.finetune_epochs() > 0 {
        cfg.validate()?;
    }
    ck.check_schema(train)?;
    fit(
        ck.model.clone(),
        ck.standardization.clone(),
        train,
        select,
        cfg,
        FitSpec {
            epochs: cfg.finetune_epochs(),
            lr: cfg.finetune_lr,
            seed,
            info_seed: ck.info.seed,
            ctx,
        },
    )
    .map(|mut t| {
        if t.history.is_empty() {
            t.checkpoint = ck.clone();
        }
        t
    })
}

/// Splits rows into (fit, holdout): each (municipality, label) group with at
/// least two cells gives `ceil(fraction * size)` cells to the holdout.
pub fn stratified_holdout(ds: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<(String, u8), Vec<usize>> = BTreeMap::new();
    for (i, c) in ds.cells().iter().enumerate() {
        groups.entry((c.municipality.clone(), c.label)).or_default().push(i);
    }
    let mut rng = rng_for(seed, HOLDOUT_STREAM);
    let mut holdout = Vec::new();
    for (_, mut idx) in groups {
        if idx.len() < 2 {
            continue;
        }
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len() - 1);
        holdout.extend_from_slice(&idx[..k]);
    }
    holdout.sort_unstable();
    let mut is_held = vec![false; ds.len()];
    for &i in &holdout {
        is_held[i] = true;
    }
    let fit = (0..ds.len()).filter(|&i| !is_held[i]).collect();
    (fit, holdout)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    BlockCv,
    BlockV,
    TransferCv,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::BlockCv => "blockcv",
            Protocol::BlockV => "blockv",
            Protocol::TransferCv => "transfercv",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blockcv" => Ok(Protocol::BlockCv),
            "blockv" => Ok(Protocol::BlockV),
            "transfercv" => Ok(Protocol::TransferCv),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Validation municipality.
    pub fold: String,
    pub n_cells: usize,
    /// `None` when the fold has a single class.
    pub metrics: Option<MetricReport>,
    /// Metrics restricted to the fold's Hard cells.
    pub hard_metrics: Option<MetricReport>,
    pub best_epoch: Option<usize>,
    pub note: Option<String>,
    /// Excluded from JSON so that reports are reproducible byte for byte.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub mean_height: f64,
    pub mean_rheight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_folds: usize,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

/// Mean and population standard deviation over the given reports.
pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Option<Aggregate> {
    let reports: Vec<&MetricReport> = reports.into_iter().collect();
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let stat = |f: fn(&MetricReport) -> f64| {
        let mean = reports.iter().map(|r| f(r)).sum::<f64>() / n;
        let var = reports.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (roc_m, roc_s) = stat(|r| r.roc_auc);
    let (pr_m, pr_s) = stat(|r| r.pr_auc);
    let (h_m, h_s) = stat(|r| r.mean_height);
    let (rh_m, rh_s) = stat(|r| r.mean_rheight);
    Some(Aggregate {
        n_folds: reports.len(),
        mean: MetricSummary {
            roc_auc: roc_m,
            pr_auc: pr_m,
            mean_height: h_m,
            mean_rheight: rh_m,
        },
        std: MetricSummary {
            roc_auc: roc_s,
            pr_auc: pr_s,
            mean_height: h_s,
            mean_rheight: rh_s,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub model: ModelKind,
    pub objective: Objective,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
}

#[derive(Serialize, Deserialize)]
struct ReportDoc {
    format_version: u32,
    protocol: Protocol,
    model: ModelKind,
    objective: Objective,
    seed: u64,
    /// Set for blockCV, where the validation fold also picks the checkpoint.
    optimistic_selection: bool,
    folds: Vec<FoldResult>,
    excluded_folds: Vec<String>,
    summary: Option<Aggregate>,
    hard_summary: Option<Aggregate>,
}

impl ProtocolReport {
    pub fn summary(&self) -> Option<Aggregate> {
        aggregate(self.folds.iter().filter_map(|f| f.metrics.as_ref()))
    }

    pub fn hard_summary(&self) -> Option<Aggregate> {
        aggregate(self.folds.iter().filter_map(|f| f.hard_metrics.as_ref()))
    }

    pub fn excluded_folds(&self) -> Vec<String> {
        self.folds
            .iter()
            .filter(|f| f.metrics.is_none())
            .map(|f| f.fold.clone())
            .collect()
    }
}

impl Serialize for ProtocolReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ReportDoc {
            format_version: REPORT_VERSION,
            protocol: self.protocol,
            model: self.model,
            objective: self.objective,
            seed: self.seed,
            optimistic_selection: self.protocol == Protocol::BlockCv,
            folds: self.folds.clone(),
            excluded_folds: self.excluded_folds(),
            summary: self.summary(),
            hard_summary: self.hard_summary(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProtocolReport {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = ReportDoc::deserialize(d)?;
        if doc.format_version != REPORT_VERSION {
            return Err(serde::de::Error::custom(format!(
                "unsupported report format version {}",
                doc.format_version
            )));
        }
        Ok(Self {
            protocol: doc.protocol,
            model: doc.model,
            objective: doc.objective,
            seed: doc.seed,
            folds: doc.folds,
        })
    }
}

fn metrics_or_none(scores: &[f64], labels: &[u8]) -> Result<Option<MetricReport>> {
    if labels.contains(&0) && labels.contains(&1) {
        Ok(Some(MetricReport::compute(scores, labels)?))
    } else {
        Ok(None)
    }
}

/// Scores `test` with `ck` and fills a fold row.
fn evaluate_fold(fold: &str, ck: &Checkpoint, test: &Dataset, ctx: &Ctx<'_>) -> Result<FoldResult> {
    ctx.record(AccessRole::Evaluate, test);
    let scores = ck.score(test)?;
    let labels = test.labels_u8();
    let metrics = metrics_or_none(&scores, &labels)?;
    let tags = tag_environments(test)?.tags;
    let (hs, hl): (Vec<f64>, Vec<u8>) = scores
        .iter()
        .zip(&labels)
        .zip(&tags)
        .filter(|(_, t)| **t == EnvironmentTag::Hard)
        .map(|((s, y), _)| (*s, *y))
        .unzip();
    let hard_metrics = metrics_or_none(&hs, &hl)?;
    let note = metrics
        .is_none()
        .then(|| "single-class fold; excluded from aggregation".to_string());
    Ok(FoldResult {
        fold: fold.to_string(),
        n_cells: test.len(),
        metrics,
        hard_metrics,
        best_epoch: ck.info.best_epoch,
        note,
        seconds: 0.0,
    })
}

fn run_folds<T, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<FoldResult>>
where
    T: Sync,
    F: Fn(usize, &T) -> Result<FoldResult> + Sync,
{
    let timed = |k: usize, item: &T| {
        let start = Instant::now();
        f(k, item).map(|mut r| {
            r.seconds = start.elapsed().as_secs_f64();
            r
        })
    };
    if jobs <= 1 {
        return items.iter().enumerate().map(|(k, it)| timed(k, it)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| items.par_iter().enumerate().map(|(k, it)| timed(k, it)).collect())
}

fn warn_excluded(folds: &[FoldResult]) {
    for f in folds.iter().filter(|f| f.metrics.is_none()) {
        eprintln!("warning: fold `{}` has a single class and is excluded from the summary", f.fold);
    }
}

/// Leave-one-municipality-out cross-validation. The held-out municipality
/// also selects the checkpoint.
pub fn block_cv(ds: &Dataset, cfg: &TrainConfig, opts: ProtocolOptions<'_>) -> Result<ProtocolReport> {
    cfg.validate()?;
    let groups: Vec<(String, Vec<usize>)> = split_by_municipality(ds).into_iter().collect();
    if groups.len() < 2 {
        return Err(Error::Domain("blockCV needs at least two municipalities".into()));
    }
    let folds = run_folds(&groups, opts.jobs, |k, (name, val_idx)| {
        let ctx = Ctx {
            fold: name,
            observer: opts.observer,
        };
        let mut in_val = vec![false; ds.len()];
        for &i in val_idx {
            in_val[i] = true;
        }
        let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| !in_val[i]).collect();
        let train_ds = ds.subset(&train_idx);
        let val_ds = ds.subset(val_idx);
        let trained = train_in(&train_ds, &val_ds, cfg, fold_seed(cfg.seed, k), &ctx)?;
        evaluate_fold(name, &trained.checkpoint, &val_ds, &ctx)
    })?;
    warn_excluded(&folds);
    Ok(ProtocolReport {
        protocol: Protocol::BlockCv,
        model: cfg.model,
        objective: cfg.objective,
        seed: cfg.seed,
        folds,
    })
}

/// Trains on all of region A, selecting on a stratified holdout of A.
pub fn train_region(a: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_region_in(a, cfg, None)
}

fn train_region_in(a: &Dataset, cfg: &TrainConfig, observer: Option<&Observer<'_>>) -> Result<Checkpoint> {
    let (fit_idx, hold_idx) = stratified_holdout(a, cfg.holdout_fraction, cfg.seed);
    if hold_idx.is_empty() {
        return Err(Error::Domain("region A is too small for a selection holdout".into()));
    }
    let ctx = Ctx {
        fold: "region-a",
        observer,
    };
    Ok(train_in(&a.subset(&fit_idx), &a.subset(&hold_idx), cfg, cfg.seed, &ctx)?.checkpoint)
}

fn municipality_folds(b: &Dataset) -> Result<Vec<(String, Vec<usize>)>> {
    let groups: Vec<(String, Vec<usize>)> = split_by_municipality(b).into_iter().collect();
    if groups.is_empty() {
        return Err(Error::Domain("region B has no municipalities".into()));
    }
    Ok(groups)
}

/// Evaluates an A-model on each municipality of B.
pub fn block_v_with(ck: &Checkpoint, b: &Dataset, cfg: &TrainConfig, opts: ProtocolOptions<'_>) -> Result<ProtocolReport> {
    ck.check_schema(b)?;
    let groups = municipality_folds(b)?;
    let folds = run_folds(&groups, opts.jobs, |_, (name, idx)| {
        let ctx = Ctx {
            fold: name,
            observer: opts.observer,
        };
        evaluate_fold(name, ck, &b.subset(idx), &ctx)
    })?;
    warn_excluded(&folds);
    Ok(ProtocolReport {
        protocol: Protocol::BlockV,
        model: ck.model.kind(),
        objective: cfg.objective,
        seed: cfg.seed,
        folds,
    })
}

/// Trains one model on region A and tests it on every municipality of B.
pub fn block_v(a: &Dataset, b: &Dataset, cfg: &TrainConfig, opts: ProtocolOptions<'_>) -> Result<ProtocolReport> {
    if !a.same_schema(b) {
        return Err(Error::Schema("regions A and B differ in feature columns".into()));
    }
    cfg.validate()?;
    let ck = train_region_in(a, cfg, opts.observer)?;
    block_v_with(&ck, b, cfg, opts)
}

/// Fine-tunes `ck` on B without municipality i and tests on i, for each i.
/// Selection uses a stratified holdout of the remaining municipalities.
pub fn transfer_cv(ck: &Checkpoint, b: &Dataset, cfg: &TrainConfig, opts: ProtocolOptions<'_>) -> Result<ProtocolReport> {
    ck.check_schema(b)?;
    let groups = municipality_folds(b)?;
    let folds = run_folds(&groups, opts.jobs, |k, (name, test_idx)| {
        let ctx = Ctx {
            fold: name,
            observer: opts.observer,
        };
        let test_ds = b.subset(test_idx);
        let tuned = if cfg.finetune_epochs() == 0 {
            ck.clone()
        } else {
            let mut in_test = vec![false; b.len()];
            for &i in test_idx {
                in_test[i] = true;
            }
            let rest_idx: Vec<usize> = (0..b.len()).filter(|&i| !in_test[i]).collect();
            let rest = b.subset(&rest_idx);
            let seed = fold_seed(cfg.seed, k);
            let (fit_idx, hold_idx) = stratified_holdout(&rest, cfg.holdout_fraction, seed);
            if hold_idx.is_empty() {
                return Err(Error::Domain(format!(
                    "too few cells outside `{name}` for a selection holdout"
                )));
            }
            fine_tune_in(ck, &rest.subset(&fit_idx), &rest.subset(&hold_idx), cfg, seed, &ctx)?.checkpoint
        };
        evaluate_fold(name, &tuned, &test_ds, &ctx)
    })?;
    warn_excluded(&folds);
    Ok(ProtocolReport {
        protocol: Protocol::TransferCv,
        model: ck.model.kind(),
        objective: cfg.objective,
        seed: cfg.seed,
        folds,
    })
}

/// Metrics of a checkpoint on a whole dataset.
pub fn evaluate(ck: &Checkpoint, ds: &Dataset) -> Result<MetricReport> {
    MetricReport::compute(&ck.score(ds)?, &ds.labels_u8())
}
