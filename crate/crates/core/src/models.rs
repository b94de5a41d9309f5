//! The masked sequential risk network and its baselines.
//!
//! The network learns one global feature mask: an FC+BN head feeds a
//! SparseMax whose per-sample outputs are averaged into `m_1`. Later steps
//! reuse it through `m_s = sparsemax(gamma * m_1 * ... * m_{s-1})`, so a
//! negative `gamma` steers each step away from features already used. Each
//! step runs an FC+BN+ReLU decision block on `m_s * x`; step outputs are
//! summed and mapped to one logit.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    sigmoid, sparsemax, sparsemax_backward, sparsemax_rows, BatchNormLayer, BnCache, BnMode, DenseLayer,
    LOGIT_CLAMP,
};

pub const MLP_HIDDEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Reland,
    Mlp,
    Lr,
    LrSingle,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Reland => "reland",
            ModelKind::Mlp => "mlp",
            ModelKind::Lr => "lr",
            ModelKind::LrSingle => "lr-single",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reland" => Ok(ModelKind::Reland),
            "mlp" => Ok(ModelKind::Mlp),
            "lr" => Ok(ModelKind::Lr),
            "lr-single" => Ok(ModelKind::LrSingle),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelandConfig {
    pub d: usize,
    pub steps: usize,
    pub latent: usize,
    pub gamma: f64,
}

impl RelandConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            steps: 2,
            latent: 8,
            gamma: -1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.latent == 0 {
            return Err(Error::Config("feature and latent width must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("at least one decision step is required".into()));
        }
        if !(-1.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [-1, 1]", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionBlock {
    pub fc: DenseLayer,
    pub bn: BatchNormLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelandModel {
    pub config: RelandConfig,
    pub mask_fc: DenseLayer,
    pub mask_bn: BatchNormLayer,
    pub blocks: Vec<DecisionBlock>,
    pub agg: DenseLayer,
    pub frozen_mask: Option<Vec<f64>>,
}

/// Output of a forward pass plus the intermediates backward needs.
#[derive(Debug, Clone)]
pub struct RelandPass {
    pub probs: Vec<f64>,
    /// Clamped logits.
    pub logits: Vec<f64>,
    pub masks: Vec<Vec<f64>>,
    /// ReLU output of each decision block.
    pub step_outputs: Vec<Array2<f64>>,
    mode: Mode,
    x: Array2<f64>,
    raw_logits: Vec<f64>,
    mask_bn_cache: Option<BnCache>,
    sm_rows: Option<Array2<f64>>,
    masked_inputs: Vec<Array2<f64>>,
    pre_relu: Vec<Array2<f64>>,
    block_bn_caches: Vec<BnCache>,
    summed: Array2<f64>,
}

fn clamp_logit(z: f64) -> f64 {
    z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

fn clamp_grad(raw: f64) -> f64 {
    if raw.abs() < LOGIT_CLAMP {
        1.0
    } else {
        0.0
    }
}

/// `m_s = sparsemax(gamma * prod_{j<s} m_j)` for `s = 2..=steps`.
pub fn mask_chain(m1: &[f64], steps: usize, gamma: f64) -> Result<Vec<Vec<f64>>> {
    let mut masks = vec![m1.to_vec()];
    let mut product = m1.to_vec();
    for _ in 1..steps {
        let z: Vec<f64> = product.iter().map(|v| gamma * v).collect();
        let m = sparsemax(&z)?;
        for (p, v) in product.iter_mut().zip(&m) {
            *p *= v;
        }
        masks.push(m);
    }
    Ok(masks)
}

impl RelandModel {
    pub fn init<R: Rng>(config: RelandConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mask_fc = DenseLayer::init(d, d, rng);
        let blocks = (0..config.steps)
            .map(|_| DecisionBlock {
                fc: DenseLayer::init(d, config.latent, rng),
                bn: BatchNormLayer::new(config.latent),
            })
            .collect();
        Ok(Self {
            config,
            mask_fc,
            mask_bn: BatchNormLayer::new(d),
            blocks,
            agg: DenseLayer::init(config.latent, 1, rng),
            frozen_mask: None,
        })
    }

    fn mask_head(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let pre = self.mask_fc.forward(x)?;
        let z = self.mask_bn.forward(pre.view(), BnMode::Infer)?;
        sparsemax_rows(z.view())
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode) -> Result<RelandPass> {
        let n = x.nrows();
        let d = self.config.d;
        if x.ncols() != d {
            return Err(Error::Dimension(format!("model expects {d} features, got {}", x.ncols())));
        }
        if n == 0 {
            return Err(Error::Dimension("empty batch".into()));
        }
        let (m1, mask_bn_cache, sm_rows) = match mode {
            Mode::Train => {
                let pre = self.mask_fc.forward(x)?;
                let (z, cache) = self.mask_bn.forward_train(pre.view())?;
                let sm = sparsemax_rows(z.view())?;
                let m1 = sm.mean_axis(Axis(0)).expect("non-empty batch").to_vec();
                (m1, Some(cache), Some(sm))
            }
            Mode::Infer => {
                let m1 = self.frozen_mask.clone().ok_or_else(|| {
                    Error::State("inference needs a frozen mask; finalize the model first".into())
                })?;
                (m1, None, None)
            }
        };
        let masks = mask_chain(&m1, self.config.steps, self.config.gamma)?;

        let mut summed = Array2::<f64>::zeros((n, self.config.latent));
        let mut step_outputs = Vec::with_capacity(masks.len());
        let mut masked_inputs = Vec::with_capacity(masks.len());
        let mut pre_relu = Vec::with_capacity(masks.len());
        let mut block_bn_caches = Vec::new();
        for (block, m) in self.blocks.iter().zip(&masks) {
            let xm = &x * &ArrayView1::from(m);
            let a = block.fc.forward(xm.view())?;
            let h = match mode {
                Mode::Train => {
                    let (h, cache) = block.bn.forward_train(a.view())?;
                    block_bn_caches.push(cache);
                    h
                }
                Mode::Infer => block.bn.forward_infer(a.view())?,
            };
            let r = h.mapv(|v| v.max(0.0));
            summed += &r;
            step_outputs.push(r);
            masked_inputs.push(xm);
            pre_relu.push(h);
        }
        let raw: Vec<f64> = self.agg.forward(summed.view())?.column(0).to_vec();
        let logits: Vec<f64> = raw.iter().map(|&z| clamp_logit(z)).collect();
        Ok(RelandPass {
            probs: logits.iter().map(|&z| sigmoid(z)).collect(),
            logits,
            masks,
            step_outputs,
            mode,
            x: x.to_owned(),
            raw_logits: raw,
            mask_bn_cache,
            sm_rows,
            masked_inputs,
            pre_relu,
            block_bn_caches,
            summed,
        })
    }

    /// Folds a training pass's batch statistics into the running averages.
    pub fn commit(&mut self, pass: &RelandPass) {
        let n = pass.x.nrows();
        if let Some(cache) = &pass.mask_bn_cache {
            self.mask_bn.update_running(cache, n);
        }
        for (block, cache) in self.blocks.iter_mut().zip(&pass.block_bn_caches) {
            block.bn.update_running(cache, n);
        }
    }

    /// Gradient of the loss with respect to all trainable parameters, in
    /// [`RelandModel::params`] order, given `d loss / d logits`.
    pub fn backward(&self, pass: &RelandPass, dlogits: &[f64]) -> Result<Vec<f64>> {
        if pass.mode != Mode::Train {
            return Err(Error::State("backward needs a training-mode pass".into()));
        }
        let n = pass.x.nrows();
        if dlogits.len() != n {
            return Err(Error::Dimension("dlogits length differs from batch".into()));
        }
        let d = self.config.d;
        let dz = Array2::from_shape_fn((n, 1), |(i, _)| dlogits[i] * clamp_grad(pass.raw_logits[i]));
        let agg = self.agg.backward(pass.summed.view(), dz.view())?;

        let mut dmask = vec![Array1::<f64>::zeros(d); self.config.steps];
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (s, block) in self.blocks.iter().enumerate() {
            let dh = &agg.input * &pass.pre_relu[s].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let bn = block.bn.backward(&pass.block_bn_caches[s], dh.view());
            let fc = block.fc.backward(pass.masked_inputs[s].view(), bn.input.view())?;
            dmask[s] = (&fc.input * &pass.x).sum_axis(Axis(0));
            block_grads.push((fc, bn));
        }

        // back through m_s = sparsemax(gamma * prod_{j<s} m_j)
        let gamma = self.config.gamma;
        for s in (1..self.config.steps).rev() {
            let dz = sparsemax_backward(&pass.masks[s], &dmask[s].to_vec());
            for j in 0..s {
                for t in 0..d {
                    let others: f64 = (0..s).filter(|&k| k != j).map(|k| pass.masks[k][t]).product();
                    dmask[j][t] += gamma * dz[t] * others;
                }
            }
        }

        let sm = pass.sm_rows.as_ref().expect("training pass keeps sparsemax rows");
        let upstream: Vec<f64> = dmask[0].iter().map(|g| g / n as f64).collect();
        let mut dsm = Array2::<f64>::zeros((n, d));
        for (mut row, p) in dsm.outer_iter_mut().zip(sm.outer_iter()) {
            let g = sparsemax_backward(&p.to_vec(), &upstream);
            row.assign(&ArrayView1::from(&g));
        }
        let bn0 = self
            .mask_bn
            .backward(pass.mask_bn_cache.as_ref().expect("training cache"), dsm.view());
        let fc0 = self.mask_fc.backward(pass.x.view(), bn0.input.view())?;

        let mut out = Vec::with_capacity(self.num_params());
        fc0.write_params(&mut out);
        bn0.write_params(&mut out);
        for (fc, bn) in &block_grads {
            fc.write_params(&mut out);
            bn.write_params(&mut out);
        }
        agg.write_params(&mut out);
        Ok(out)
    }

    /// Freezes `m_1` as the mean mask over `x` with inference-mode BN.
    pub fn finalize_mask(&mut self, x: ArrayView2<f64>) -> Result<()> {
        self.frozen_mask = Some(self.mean_mask(x)?);
        Ok(())
    }

    pub fn mean_mask(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.nrows() == 0 {
            return Err(Error::Domain("cannot finalize a mask on an empty dataset".into()));
        }
        let sm = self.mask_head(x)?;
        Ok(sm.mean_axis(Axis(0)).expect("non-empty").to_vec())
    }

    pub fn num_params(&self) -> usize {
        self.mask_fc.num_params()
            + self.mask_bn.num_params()
            + self
                .blocks
                .iter()
                .map(|b| b.fc.num_params() + b.bn.num_params())
                .sum::<usize>()
            + self.agg.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.mask_fc.write_params(&mut out);
        self.mask_bn.write_params(&mut out);
        for b in &self.blocks {
            b.fc.write_params(&mut out);
            b.bn.write_params(&mut out);
        }
        self.agg.write_params(&mut out);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut src = params;
        self.mask_fc.read_params(&mut src);
        self.mask_bn.read_params(&mut src);
        for b in &mut self.blocks {
            b.fc.read_params(&mut src);
            b.bn.read_params(&mut src);
        }
        self.agg.read_params(&mut src);
        debug_assert!(src.is_empty());
    }
}

impl RelandPass {
    /// Which side of every kink (SparseMax support, ReLU, logit clamp) each
    /// intermediate value sits on. Two passes with equal patterns lie on the
    /// same smooth piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        if let Some(sm) = &self.sm_rows {
            out.extend(sm.iter().map(|&v| v > 0.0));
        }
        for m in &self.masks {
            out.extend(m.iter().map(|&v| v > 0.0));
        }
        for h in &self.pre_relu {
            out.extend(h.iter().map(|&v| v > 0.0));
        }
        out.extend(self.raw_logits.iter().map(|z| z.abs() < LOGIT_CLAMP));
        out
    }
}

/// How the per-step weights of the importance formula are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EtaMode {
    /// Average step activity over samples, then normalize once.
    #[default]
    Aggregate,
    /// Normalize per sample, then average the per-sample importances.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub importance: Vec<f64>,
    pub masks: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
}

/// Global feature importance `sum_s eta_s m_s[j] / sum_i sum_s eta_s m_s[i]`
/// where `eta_s` is the summed ReLU activity of step `s`.
pub fn feature_importance(model: &RelandModel, x: ArrayView2<f64>, mode: EtaMode) -> Result<ImportanceReport> {
    if x.nrows() == 0 {
        return Err(Error::Domain("importance needs at least one sample".into()));
    }
    let pass = model.forward(x, Mode::Infer)?;
    let per_sample: Vec<Array1<f64>> = pass.step_outputs.iter().map(|r| r.sum_axis(Axis(1))).collect();
    let eta: Vec<f64> = per_sample.iter().map(|e| e.mean().expect("non-empty")).collect();
    let total: f64 = eta.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("every decision step is inactive".into()));
    }
    let d = model.config.d;
    let importance = match mode {
        EtaMode::Aggregate => importance_from(&eta, &pass.masks)?,
        EtaMode::PerSample => {
            let mut acc = vec![0.0; d];
            let mut used = 0usize;
            for b in 0..x.nrows() {
                let e: Vec<f64> = per_sample.iter().map(|v| v[b]).collect();
                if let Ok(imp) = importance_from(&e, &pass.masks) {
                    for (a, v) in acc.iter_mut().zip(imp) {
                        *a += v;
                    }
                    used += 1;
                }
            }
            acc.iter().map(|a| a / used as f64).collect()
        }
    };
    Ok(ImportanceReport {
        importance,
        masks: pass.masks,
        eta,
    })
}

/// Combines per-step weights and simplex masks into normalized importances.
pub fn importance_from(eta: &[f64], masks: &[Vec<f64>]) -> Result<Vec<f64>> {
    let total: f64 = eta.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("every decision step is inactive".into()));
    }
    let d = masks.first().map_or(0, Vec::len);
    // every mask lies on the simplex, so the denominator is sum_s eta_s
    let weights: Vec<f64> = eta.iter().map(|e| e / total).collect();
    Ok((0..d)
        .map(|j| weights.iter().zip(masks).map(|(w, m)| w * m[j]).sum())
        .collect())
}

/// Two ReLU hidden layers of width 20 and a linear output head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub hidden1: DenseLayer,
    pub hidden2: DenseLayer,
    pub out: DenseLayer,
}

#[derive(Debug, Clone)]
pub struct MlpPass {
    pub logits: Vec<f64>,
    x: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    h2: Array2<f64>,
    raw: Vec<f64>,
}

impl MlpModel {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self {
            hidden1: DenseLayer::init(d, MLP_HIDDEN, rng),
            hidden2: DenseLayer::init(MLP_HIDDEN, MLP_HIDDEN, rng),
            out: DenseLayer::init(MLP_HIDDEN, 1, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<MlpPass> {
        let a1 = self.hidden1.forward(x)?;
        let h1 = a1.mapv(|v| v.max(0.0));
        let a2 = self.hidden2.forward(h1.view())?;
        let h2 = a2.mapv(|v| v.max(0.0));
        let raw = self.out.forward(h2.view())?.column(0).to_vec();
        Ok(MlpPass {
            logits: raw.iter().map(|&z| clamp_logit(z)).collect(),
            x: x.to_owned(),
            a1,
            h1,
            a2,
            h2,
            raw,
        })
    }

    pub fn backward(&self, pass: &MlpPass, dlogits: &[f64]) -> Result<Vec<f64>> {
        let n = pass.x.nrows();
        let dz = Array2::from_shape_fn((n, 1), |(i, _)| dlogits[i] * clamp_grad(pass.raw[i]));
        let g3 = self.out.backward(pass.h2.view(), dz.view())?;
        let d2 = &g3.input * &pass.a2.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let g2 = self.hidden2.backward(pass.h1.view(), d2.view())?;
        let d1 = &g2.input * &pass.a1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let g1 = self.hidden1.backward(pass.x.view(), d1.view())?;
        let mut out = Vec::with_capacity(self.num_params());
        g1.write_params(&mut out);
        g2.write_params(&mut out);
        g3.write_params(&mut out);
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.hidden1.num_params() + self.hidden2.num_params() + self.out.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.hidden1.write_params(&mut out);
        self.hidden2.write_params(&mut out);
        self.out.write_params(&mut out);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut src = params;
        self.hidden1.read_params(&mut src);
        self.hidden2.read_params(&mut src);
        self.out.read_params(&mut src);
    }
}

impl MlpPass {
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.a1.iter().map(|&v| v > 0.0).collect();
        out.extend(self.a2.iter().map(|&v| v > 0.0));
        out.extend(self.raw.iter().map(|z| z.abs() < LOGIT_CLAMP));
        out
    }
}

/// Logistic regression; `column` restricts the design to one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LrModel {
    pub linear: DenseLayer,
    pub column: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LrPass {
    pub logits: Vec<f64>,
    x: Array2<f64>,
    raw: Vec<f64>,
}

impl LrModel {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self {
            linear: DenseLayer::init(d, 1, rng),
            column: None,
        }
    }

    pub fn single_feature<R: Rng>(column: usize, rng: &mut R) -> Self {
        Self {
            linear: DenseLayer::init(1, 1, rng),
            column: Some(column),
        }
    }

    fn design(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self.column {
            None => Ok(x.to_owned()),
            Some(c) if c < x.ncols() => Ok(x.slice(ndarray::s![.., c..c + 1]).to_owned()),
            Some(c) => Err(Error::Dimension(format!("column {c} outside {} features", x.ncols()))),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<LrPass> {
        let x = self.design(x)?;
        let raw = self.linear.forward(x.view())?.column(0).to_vec();
        Ok(LrPass {
            logits: raw.iter().map(|&z| clamp_logit(z)).collect(),
            x,
            raw,
        })
    }

    pub fn backward(&self, pass: &LrPass, dlogits: &[f64]) -> Result<Vec<f64>> {
        let n = pass.x.nrows();
        let dz = Array2::from_shape_fn((n, 1), |(i, _)| dlogits[i] * clamp_grad(pass.raw[i]));
        let g = self.linear.backward(pass.x.view(), dz.view())?;
        let mut out = Vec::with_capacity(self.linear.num_params());
        g.write_params(&mut out);
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.linear.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.linear.write_params(&mut out);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut src = params;
        self.linear.read_params(&mut src);
    }
}

/// Resolves a feature name for a single-feature baseline.
pub fn single_feature_column(feature_names: &[String], name: &str) -> Result<usize> {
    feature_names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Schema(format!("unknown feature column `{name}`")))
}

/// Any trainable model.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Reland(RelandModel),
    Mlp(MlpModel),
    Lr(LrModel),
}

#[derive(Debug, Clone)]
pub enum Pass {
    Reland(RelandPass),
    Mlp(MlpPass),
    Lr(LrPass),
}

impl Pass {
    pub fn logits(&self) -> &[f64] {
        match self {
            Pass::Reland(p) => &p.logits,
            Pass::Mlp(p) => &p.logits,
            Pass::Lr(p) => &p.logits,
        }
    }

    pub fn activation_pattern(&self) -> Vec<bool> {
        match self {
            Pass::Reland(p) => p.activation_pattern(),
            Pass::Mlp(p) => p.activation_pattern(),
            Pass::Lr(p) => p.raw.iter().map(|z| z.abs() < LOGIT_CLAMP).collect(),
        }
    }
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Reland(_) => ModelKind::Reland,
            Model::Mlp(_) => ModelKind::Mlp,
            Model::Lr(m) if m.column.is_some() => ModelKind::LrSingle,
            Model::Lr(_) => ModelKind::Lr,
        }
    }

    /// Smallest batch a training step accepts.
    pub fn min_batch(&self) -> usize {
        match self {
            Model::Reland(_) => 2,
            _ => 1,
        }
    }

    pub fn forward_train(&self, x: ArrayView2<f64>) -> Result<Pass> {
        Ok(match self {
            Model::Reland(m) => Pass::Reland(m.forward(x, Mode::Train)?),
            Model::Mlp(m) => Pass::Mlp(m.forward(x)?),
            Model::Lr(m) => Pass::Lr(m.forward(x)?),
        })
    }

    pub fn backward(&self, pass: &Pass, dlogits: &[f64]) -> Result<Vec<f64>> {
        match (self, pass) {
            (Model::Reland(m), Pass::Reland(p)) => m.backward(p, dlogits),
            (Model::Mlp(m), Pass::Mlp(p)) => m.backward(p, dlogits),
            (Model::Lr(m), Pass::Lr(p)) => m.backward(p, dlogits),
            _ => Err(Error::State("pass does not belong to this model".into())),
        }
    }

    pub fn commit(&mut self, pass: &Pass) {
        if let (Model::Reland(m), Pass::Reland(p)) = (self, pass) {
            m.commit(p);
        }
    }

    /// Prepares the model for inference on data drawn like `x_train`.
    pub fn finalize(&mut self, x_train: ArrayView2<f64>) -> Result<()> {
        if let Model::Reland(m) = self {
            m.finalize_mask(x_train)?;
        }
        Ok(())
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(match self {
            Model::Reland(m) => m.forward(x, Mode::Infer)?.logits,
            Model::Mlp(m) => m.forward(x)?.logits,
            Model::Lr(m) => m.forward(x)?.logits,
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    pub fn num_params(&self) -> usize {
        match self {
            Model::Reland(m) => m.num_params(),
            Model::Mlp(m) => m.num_params(),
            Model::Lr(m) => m.num_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Model::Reland(m) => m.params(),
            Model::Mlp(m) => m.params(),
            Model::Lr(m) => m.params(),
        }
    }

    pub fn set_params(&mut self, params: &[f64]) {
        match self {
            Model::Reland(m) => m.set_params(params),
            Model::Mlp(m) => m.set_params(params),
            Model::Lr(m) => m.set_params(params),
        }
    }
}
