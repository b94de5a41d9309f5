//! Training objectives and ranking kernels.
//!
//! Gradients are returned alongside values so the training loop never needs
//! an autodiff graph. Logit-space functions take the (already clamped)
//! pre-sigmoid outputs; probability-space functions take `sigmoid(logit)`.

use serde::{Deserialize, Serialize};

use crate::dataset::EnvironmentTag;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus};

/// Probability clamp used by cross-entropy.
pub const CE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemainderPolicy {
    MergeIntoLast,
    DropRemainder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrmConfig {
    pub lambda: f64,
    /// Mini-batch size `B` in the `lambda / B` scaling.
    pub batch_size: usize,
    pub remainder_policy: RemainderPolicy,
}

impl Default for IrmConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            batch_size: 2048,
            remainder_policy: RemainderPolicy::MergeIntoLast,
        }
    }
}

impl IrmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("irm lambda must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("irm batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushConfig {
    pub p: f64,
    pub lambda_p: f64,
}

impl Default for PushConfig {
    fn default() -> Self {
        Self { p: 4.0, lambda_p: 1.0 }
    }
}

impl PushConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::Config("push exponent p must be >= 1".into()));
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return Err(Error::Config("push lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Erm,
    Irm,
    Pushed,
    IrmPushed,
}

impl Objective {
    pub fn uses_irm(self) -> bool {
        matches!(self, Objective::Irm | Objective::IrmPushed)
    }

    pub fn uses_push(self) -> bool {
        matches!(self, Objective::Pushed | Objective::IrmPushed)
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Objective::Erm),
            "irm" => Ok(Objective::Irm),
            "pushed" => Ok(Objective::Pushed),
            "irm-pushed" => Ok(Objective::IrmPushed),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("length {a} vs {b}")));
    }
    Ok(())
}

/// Mean binary cross-entropy on probabilities clamped to `[eps, 1-eps]`.
pub fn cross_entropy(probs: &[f64], labels: &[f64]) -> Result<f64> {
    cross_entropy_grad(probs, labels).map(|(v, _)| v)
}

/// Cross-entropy and its gradient with respect to the (unclamped) probs.
pub fn cross_entropy_grad(probs: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(Error::Domain("cross-entropy of an empty batch".into()));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = p.clamp(CE_EPS, 1.0 - CE_EPS);
        total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        let inside = p > CE_EPS && p < 1.0 - CE_EPS;
        grad.push(if inside {
            (-y / pc + (1.0 - y) / (1.0 - pc)) / n
        } else {
            0.0
        });
    }
    Ok((total / n, grad))
}

/// Squared derivative, at `w = 1`, of the mean cross-entropy of
/// `sigmoid(w * z)` over one environment.
pub fn irm_penalty_env(logits: &[f64], labels: &[f64]) -> Result<f64> {
    irm_penalty_env_grad(logits, labels).map(|(v, _)| v)
}

pub fn irm_penalty_env_grad(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(logits.len(), labels.len())?;
    if logits.is_empty() {
        return Err(Error::Domain("IRM penalty of an empty environment".into()));
    }
    let n = logits.len() as f64;
    let d: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (sigmoid(z) - y) * z)
        .sum::<f64>()
        / n;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let s = sigmoid(z);
            2.0 * d * (s * (1.0 - s) * z + s - y) / n
        })
        .collect();
    Ok((d * d, grad))
}

/// Splits a batch into the Hard environment and Easy micro-batches whose
/// size matches the Hard count. Empty when the batch has no contrast.
pub fn irm_environments(tags: &[EnvironmentTag], policy: RemainderPolicy) -> Vec<Vec<usize>> {
    let hard: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == EnvironmentTag::Hard).collect();
    let easy: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == EnvironmentTag::Easy).collect();
    let h = hard.len();
    if h == 0 || easy.is_empty() {
        return Vec::new();
    }
    let mut envs = vec![hard];
    let full = easy.len() / h;
    for k in 0..full {
        envs.push(easy[k * h..(k + 1) * h].to_vec());
    }
    let rest = &easy[full * h..];
    if !rest.is_empty() {
        match policy {
            RemainderPolicy::MergeIntoLast if full > 0 => {
                envs.last_mut().expect("at least one easy batch").extend_from_slice(rest)
            }
            RemainderPolicy::MergeIntoLast => envs.push(rest.to_vec()),
            RemainderPolicy::DropRemainder => {}
        }
    }
    envs
}

/// `(lambda / B) * (pen(Hard) + sum_i pen(Easy_i))`.
pub fn irm_microbatch_penalty(
    logits: &[f64],
    labels: &[f64],
    tags: &[EnvironmentTag],
    cfg: &IrmConfig,
) -> Result<f64> {
    irm_microbatch_penalty_grad(logits, labels, tags, cfg).map(|(v, _)| v)
}

pub fn irm_microbatch_penalty_grad(
    logits: &[f64],
    labels: &[f64],
    tags: &[EnvironmentTag],
    cfg: &IrmConfig,
) -> Result<(f64, Vec<f64>)> {
    same_len(logits.len(), labels.len())?;
    same_len(logits.len(), tags.len())?;
    if logits.is_empty() {
        return Err(Error::Domain("IRM penalty of an empty batch".into()));
    }
    let mut grad = vec![0.0; logits.len()];
    if cfg.lambda == 0.0 {
        return Ok((0.0, grad));
    }
    let scale = cfg.lambda / cfg.batch_size as f64;
    let mut total = 0.0;
    for env in irm_environments(tags, cfg.remainder_policy) {
        let z: Vec<f64> = env.iter().map(|&i| logits[i]).collect();
        let y: Vec<f64> = env.iter().map(|&i| labels[i]).collect();
        let (pen, g) = irm_penalty_env_grad(&z, &y)?;
        total += pen;
        for (&i, gi) in env.iter().zip(g) {
            grad[i] += scale * gi;
        }
    }
    Ok((scale * total, grad))
}

/// Logistic pair loss `ln(1 + exp(-margin))`.
pub fn pair_loss(margin: f64) -> f64 {
    softplus(-margin)
}

fn check_push(pos: &[f64], neg: &[f64], p: f64) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Domain("p-push norm needs at least one positive and one negative".into()));
    }
    if !(p >= 1.0) {
        return Err(Error::Domain(format!("push exponent must be >= 1, got {p}")));
    }
    Ok(())
}

/// `(1/N) sum_j ((1/P) sum_i l(f_pi - f_nj)^p)^(1/p)`.
pub fn pnorm_push(pos: &[f64], neg: &[f64], p: f64) -> Result<f64> {
    pnorm_push_grad(pos, neg, p).map(|g| g.value)
}

#[derive(Debug, Clone)]
pub struct PushGrad {
    pub value: f64,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
}

pub fn pnorm_push_grad(pos: &[f64], neg: &[f64], p: f64) -> Result<PushGrad> {
    check_push(pos, neg, p)?;
    let n_pos = pos.len() as f64;
    let n_neg = neg.len() as f64;
    let mut value = 0.0;
    let mut d_pos = vec![0.0; pos.len()];
    let mut d_neg = vec![0.0; neg.len()];
    let mut pair = vec![0.0; pos.len()];
    for (j, &fn_) in neg.iter().enumerate() {
        for (a, &fp) in pair.iter_mut().zip(pos) {
            *a = pair_loss(fp - fn_);
        }
        let max = pair.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            continue;
        }
        // rescale by the largest pair loss so a^p cannot overflow
        let mean_pow = pair.iter().map(|a| (a / max).powf(p)).sum::<f64>() / n_pos;
        value += max * mean_pow.powf(1.0 / p);
        let outer = mean_pow.powf(1.0 / p - 1.0) / n_pos / n_neg;
        for (i, (&a, &fp)) in pair.iter().zip(pos).enumerate() {
            let da = outer * (a / max).powf(p - 1.0);
            // d l(m)/d m = -sigmoid(-m)
            let s = sigmoid(fn_ - fp);
            d_pos[i] -= da * s;
            d_neg[j] += da * s;
        }
    }
    Ok(PushGrad {
        value: value / n_neg,
        d_pos,
        d_neg,
    })
}

/// Cross-entropy plus `lambda_p` times the p-push norm over the positive and
/// negative probabilities. Falls back to cross-entropy alone when the batch
/// holds a single class.
pub fn pushed_objective(probs: &[f64], labels: &[f64], cfg: &PushConfig) -> Result<f64> {
    pushed_objective_grad(probs, labels, cfg).map(|(v, _)| v)
}

pub fn pushed_objective_grad(probs: &[f64], labels: &[f64], cfg: &PushConfig) -> Result<(f64, Vec<f64>)> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let (ce, mut grad) = cross_entropy_grad(probs, labels)?;
    if cfg.lambda_p == 0.0 {
        return Ok((ce, grad));
    }
    let pos_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0.5).collect();
    let neg_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] <= 0.5).collect();
    if pos_idx.is_empty() || neg_idx.is_empty() {
        return Ok((ce, grad));
    }
    let pos: Vec<f64> = pos_idx.iter().map(|&i| probs[i]).collect();
    let neg: Vec<f64> = neg_idx.iter().map(|&i| probs[i]).collect();
    let push = pnorm_push_grad(&pos, &neg, cfg.p)?;
    for (&i, g) in pos_idx.iter().zip(&push.d_pos) {
        grad[i] += cfg.lambda_p * g;
    }
    for (&i, g) in neg_idx.iter().zip(&push.d_neg) {
        grad[i] += cfg.lambda_p * g;
    }
    Ok((ce + cfg.lambda_p * push.value, grad))
}

/// Batch loss and its gradient with respect to the clamped logits.
pub fn objective_grad(
    objective: Objective,
    logits: &[f64],
    labels: &[f64],
    tags: &[EnvironmentTag],
    irm: &IrmConfig,
    push: &PushConfig,
) -> Result<(f64, Vec<f64>)> {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let (mut loss, dprob) = if objective.uses_push() {
        pushed_objective_grad(&probs, labels, push)?
    } else {
        cross_entropy_grad(&probs, labels)?
    };
    let mut grad: Vec<f64> = dprob
        .iter()
        .zip(&probs)
        .map(|(g, p)| g * p * (1.0 - p))
        .collect();
    if objective.uses_irm() && irm.lambda != 0.0 {
        let (pen, dpen) = irm_microbatch_penalty_grad(logits, labels, tags, irm)?;
        loss += pen;
        for (g, d) in grad.iter_mut().zip(dpen) {
            *g += d;
        }
    }
    Ok((loss, grad))
}

/// Negative-sample gradient of the pushed GBDT objective:
/// `G_n = y_hat_n - y_n + y_hat_n (1 - y_hat_n) * mean_i sigmoid(y_hat_n - y_hat_pi)`.
pub fn pushed_gbdt_gradient(y_hat_n: f64, y_n: f64, y_hat_p: &[f64]) -> Result<f64> {
    if y_hat_p.is_empty() {
        return Err(Error::Domain("pushed gradient needs at least one positive".into()));
    }
    let mean_sig = y_hat_p.iter().map(|&yp| sigmoid(y_hat_n - yp)).sum::<f64>() / y_hat_p.len() as f64;
    Ok(y_hat_n - y_n + y_hat_n * (1.0 - y_hat_n) * mean_sig)
}

/// Positive-sample gradient: the plain cross-entropy residual.
pub fn pushed_gbdt_gradient_pos(y_hat_p: f64, y_p: f64) -> f64 {
    y_hat_p - y_p
}

/// Which quantity forms the leading `a(1 - a)` Hessian term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianLead {
    /// `y (1 - y)` on the labels, as printed; zero for binary labels.
    #[default]
    Label,
    /// `y_hat (1 - y_hat)` on the predictions.
    Prediction,
}

impl HessianLead {
    fn term(self, y: f64, y_hat: f64) -> f64 {
        match self {
            HessianLead::Label => y * (1.0 - y),
            HessianLead::Prediction => y_hat * (1.0 - y_hat),
        }
    }
}

/// Negative-sample Hessian `lead + p L^(p-2) ((p-1) G_n^2 + L H)` with
/// `L = mean_i ln(1 + e^(y_hat_n - y_hat_pi))^p` and
/// `H = mean_i s_i (s_i y_hat_n^2 (1 - y_hat_n^2) + 1)`, `s_i = sigmoid(y_hat_n - y_hat_pi)`.
pub fn pushed_gbdt_hessian(
    y_hat_n: f64,
    y_n: f64,
    g_n: f64,
    y_hat_p: &[f64],
    p: f64,
    lead: HessianLead,
) -> Result<f64> {
    if y_hat_p.is_empty() {
        return Err(Error::Domain("pushed hessian needs at least one positive".into()));
    }
    let m = y_hat_p.len() as f64;
    let big_l = y_hat_p
        .iter()
        .map(|&yp| softplus(y_hat_n - yp).powf(p))
        .sum::<f64>()
        / m;
    let sq = y_hat_n * y_hat_n;
    let big_h = y_hat_p
        .iter()
        .map(|&yp| {
            let s = sigmoid(y_hat_n - yp);
            s * (s * sq * (1.0 - sq) + 1.0)
        })
        .sum::<f64>()
        / m;
    if big_l == 0.0 && p < 2.0 {
        return Err(Error::Domain("pushed hessian is singular: L = 0 with p < 2".into()));
    }
    Ok(lead.term(y_n, y_hat_n) + p * big_l.powf(p - 2.0) * ((p - 1.0) * g_n * g_n + big_l * big_h))
}

pub fn pushed_gbdt_hessian_pos(y_p: f64, y_hat_p: f64, lead: HessianLead) -> f64 {
    lead.term(y_p, y_hat_p)
}

/// Gain of a split under the p-push norm, with the parent's norm fixed at
/// `ln 2`. Each child predicts its positive fraction. Zero for single-class
/// nodes.
pub fn pnorm_split_gain(labels_left: &[u8], labels_right: &[u8], p: f64) -> Result<f64> {
    let frac = |ls: &[u8]| {
        if ls.is_empty() {
            0.0
        } else {
            ls.iter().filter(|&&y| y == 1).count() as f64 / ls.len() as f64
        }
    };
    let (ql, qr) = (frac(labels_left), frac(labels_right));
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (ls, q) in [(labels_left, ql), (labels_right, qr)] {
        for &y in ls {
            if y == 1 {
                pos.push(q);
            } else {
                neg.push(q);
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Ok(0.0);
    }
    Ok(std::f64::consts::LN_2 - pnorm_push(&pos, &neg, p)?)
}
