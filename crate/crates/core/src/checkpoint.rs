//! Versioned JSON checkpoints.
//!
//! Parameters are stored as named arrays (`shape` + row-major `values`) in a
//! sorted map so that load followed by save reproduces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::models::{DecisionBlock, LrModel, MlpModel, Model, ModelKind, RelandConfig, RelandModel};
use crate::tensor::{BatchNormLayer, DenseLayer};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Per-feature standardization fitted on training cells only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Population mean/std per column; constant columns get std 1.
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let m = col.sum() / n;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "standardization fitted on {} features, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok((&x - &mean) / &std)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub objective: Option<Objective>,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_val_roc_auc: Option<f64>,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub feature_names: Vec<String>,
    pub env_feature: String,
    pub standardization: Standardization,
    pub info: TrainingInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigDoc {
    d: usize,
    steps: Option<usize>,
    latent: Option<usize>,
    gamma: Option<f64>,
    column: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    model_kind: ModelKind,
    config: ModelConfigDoc,
    params: BTreeMap<String, Tensor>,
    frozen_mask: Option<Vec<f64>>,
    feature_names: Vec<String>,
    env_feature: String,
    standardization: Standardization,
    training: TrainingInfo,
}

fn put_dense(map: &mut BTreeMap<String, Tensor>, name: &str, l: &DenseLayer) {
    map.insert(
        format!("{name}.weight"),
        Tensor {
            shape: vec![l.d_out(), l.d_in()],
            values: l.weights.iter().copied().collect(),
        },
    );
    map.insert(
        format!("{name}.bias"),
        Tensor {
            shape: vec![l.d_out()],
            values: l.bias.to_vec(),
        },
    );
}

fn put_bn(map: &mut BTreeMap<String, Tensor>, name: &str, l: &BatchNormLayer) {
    for (suffix, v) in [
        ("scale", &l.scale),
        ("shift", &l.shift),
        ("running_mean", &l.running_mean),
        ("running_var", &l.running_var),
    ] {
        map.insert(
            format!("{name}.{suffix}"),
            Tensor {
                shape: vec![v.len()],
                values: v.to_vec(),
            },
        );
    }
}

struct ParamReader<'a>(&'a BTreeMap<String, Tensor>);

impl ParamReader<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .0
            .get(name)
            .ok_or_else(|| Error::Schema(format!("checkpoint lacks parameter `{name}`")))?;
        let count: usize = shape.iter().product();
        if t.shape != shape || t.values.len() != count {
            return Err(Error::Schema(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        if t.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("parameter `{name}` is not finite")));
        }
        Ok(t)
    }

    fn dense(&self, name: &str, d_in: usize, d_out: usize) -> Result<DenseLayer> {
        let w = self.get(&format!("{name}.weight"), &[d_out, d_in])?;
        let b = self.get(&format!("{name}.bias"), &[d_out])?;
        Ok(DenseLayer {
            weights: Array2::from_shape_vec((d_out, d_in), w.values.clone()).expect("shape checked"),
            bias: Array1::from(b.values.clone()),
        })
    }

    fn bn(&self, name: &str, dim: usize) -> Result<BatchNormLayer> {
        let mut l = BatchNormLayer::new(dim);
        l.scale = Array1::from(self.get(&format!("{name}.scale"), &[dim])?.values.clone());
        l.shift = Array1::from(self.get(&format!("{name}.shift"), &[dim])?.values.clone());
        l.running_mean = Array1::from(self.get(&format!("{name}.running_mean"), &[dim])?.values.clone());
        let var = &self.get(&format!("{name}.running_var"), &[dim])?.values;
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::Schema(format!("`{name}.running_var` is negative")));
        }
        l.running_var = Array1::from(var.clone());
        Ok(l)
    }
}

impl Checkpoint {
    fn to_doc(&self) -> CheckpointDoc {
        let mut params = BTreeMap::new();
        let d = self.feature_names.len();
        let (config, frozen_mask) = match &self.model {
            Model::Reland(m) => {
                put_dense(&mut params, "mask_fc", &m.mask_fc);
                put_bn(&mut params, "mask_bn", &m.mask_bn);
                for (s, b) in m.blocks.iter().enumerate() {
                    put_dense(&mut params, &format!("block{s}.fc"), &b.fc);
                    put_bn(&mut params, &format!("block{s}.bn"), &b.bn);
                }
                put_dense(&mut params, "agg", &m.agg);
                (
                    ModelConfigDoc {
                        d: m.config.d,
                        steps: Some(m.config.steps),
                        latent: Some(m.config.latent),
                        gamma: Some(m.config.gamma),
                        column: None,
                    },
                    m.frozen_mask.clone(),
                )
            }
            Model::Mlp(m) => {
                put_dense(&mut params, "hidden1", &m.hidden1);
                put_dense(&mut params, "hidden2", &m.hidden2);
                put_dense(&mut params, "out", &m.out);
                (
                    ModelConfigDoc {
                        d,
                        steps: None,
                        latent: None,
                        gamma: None,
                        column: None,
                    },
                    None,
                )
            }
            Model::Lr(m) => {
                put_dense(&mut params, "linear", &m.linear);
                (
                    ModelConfigDoc {
                        d,
                        steps: None,
                        latent: None,
                        gamma: None,
                        column: m.column,
                    },
                    None,
                )
            }
        };
        CheckpointDoc {
            format_version: FORMAT_VERSION,
            model_kind: self.model.kind(),
            config,
            params,
            frozen_mask,
            feature_names: self.feature_names.clone(),
            env_feature: self.env_feature.clone(),
            standardization: self.standardization.clone(),
            training: self.info.clone(),
        }
    }

    fn from_doc(doc: CheckpointDoc) -> Result<Self> {
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint format version {}",
                doc.format_version
            )));
        }
        let d = doc.config.d;
        if doc.feature_names.len() != d
            || doc.standardization.mean.len() != d
            || doc.standardization.std.len() != d
        {
            return Err(Error::Schema("checkpoint feature dimensions disagree".into()));
        }
        let r = ParamReader(&doc.params);
        let need = |v: Option<usize>, what: &str| {
            v.ok_or_else(|| Error::Schema(format!("reland checkpoint lacks `{what}`")))
        };
        let model = match doc.model_kind {
            ModelKind::Reland => {
                let config = RelandConfig {
                    d,
                    steps: need(doc.config.steps, "steps")?,
                    latent: need(doc.config.latent, "latent")?,
                    gamma: doc
                        .config
                        .gamma
                        .ok_or_else(|| Error::Schema("reland checkpoint lacks `gamma`".into()))?,
                };
                config.validate()?;
                let blocks = (0..config.steps)
                    .map(|s| {
                        Ok(DecisionBlock {
                            fc: r.dense(&format!("block{s}.fc"), d, config.latent)?,
                            bn: r.bn(&format!("block{s}.bn"), config.latent)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                if let Some(m) = &doc.frozen_mask {
                    let sum: f64 = m.iter().sum();
                    if m.len() != d || m.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                        return Err(Error::Schema("frozen mask is not a simplex point".into()));
                    }
                }
                Model::Reland(RelandModel {
                    config,
                    mask_fc: r.dense("mask_fc", d, d)?,
                    mask_bn: r.bn("mask_bn", d)?,
                    blocks,
                    agg: r.dense("agg", config.latent, 1)?,
                    frozen_mask: doc.frozen_mask.clone(),
                })
            }
            ModelKind::Mlp => Model::Mlp(MlpModel {
                hidden1: r.dense("hidden1", d, crate::models::MLP_HIDDEN)?,
                hidden2: r.dense("hidden2", crate::models::MLP_HIDDEN, crate::models::MLP_HIDDEN)?,
                out: r.dense("out", crate::models::MLP_HIDDEN, 1)?,
            }),
            ModelKind::Lr | ModelKind::LrSingle => {
                let column = doc.config.column;
                if (doc.model_kind == ModelKind::LrSingle) != column.is_some() {
                    return Err(Error::Schema("lr column does not match model kind".into()));
                }
                if let Some(c) = column {
                    if c >= d {
                        return Err(Error::Schema(format!("lr column {c} outside {d} features")));
                    }
                }
                let width = if column.is_some() { 1 } else { d };
                Model::Lr(LrModel {
                    linear: r.dense("linear", width, 1)?,
                    column,
                })
            }
        };
        Ok(Self {
            model,
            feature_names: doc.feature_names,
            env_feature: doc.env_feature,
            standardization: doc.standardization,
            info: doc.training,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_doc()).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn check_schema(&self, ds: &Dataset) -> Result<()> {
        if ds.feature_names() != self.feature_names.as_slice() {
            return Err(Error::Schema(
                "dataset feature columns differ from the checkpoint's".into(),
            ));
        }
        Ok(())
    }

    /// Standardized design matrix of `ds` under this checkpoint.
    pub fn design(&self, ds: &Dataset) -> Result<Array2<f64>> {
        self.check_schema(ds)?;
        self.standardization.apply(ds.features_matrix().view())
    }

    /// Risk probabilities for every cell of `ds`.
    pub fn score(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let x = self.design(ds)?;
        if x.nrows() == 0 {
            return Ok(Vec::new());
        }
        self.model.predict(x.view())
    }
}
