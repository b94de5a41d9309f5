//! Gridded tabular data: cells, datasets, environment tags and a seeded
//! synthetic generator.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sigmoid;

pub const REQUIRED_COLUMNS: [&str; 6] = ["cell_id", "lon", "lat", "municipality", "department", "label"];

/// Default name of the historical-event count column.
pub const DEFAULT_ENV_FEATURE: &str = "hist_mines";

/// One 500 m grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cell_id: String,
    pub lon: f64,
    pub lat: f64,
    pub municipality: String,
    pub department: String,
    pub features: Vec<f64>,
    pub label: u8,
}

/// An immutable, column-typed table of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    cells: Vec<Cell>,
    feature_names: Vec<String>,
    env_feature: String,
    env_index: usize,
}

impl Dataset {
    /// Validates shape, label domain, finiteness and id uniqueness.
    pub fn new(cells: Vec<Cell>, feature_names: Vec<String>, env_feature: &str) -> Result<Self> {
        let env_index = feature_names
            .iter()
            .position(|n| n == env_feature)
            .ok_or_else(|| Error::MissingColumn(env_feature.to_string()))?;
        let mut seen = HashSet::with_capacity(cells.len());
        for (i, cell) in cells.iter().enumerate() {
            if cell.features.len() != feature_names.len() {
                return Err(Error::Dimension(format!(
                    "cell {} has {} features, expected {}",
                    cell.cell_id,
                    cell.features.len(),
                    feature_names.len()
                )));
            }
            if cell.label > 1 {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("label {} is not 0 or 1", cell.label),
                });
            }
            if cell.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    row: i + 1,
                    message: "non-finite feature value".into(),
                });
            }
            if !seen.insert(cell.cell_id.as_str()) {
                return Err(Error::DuplicateCell(cell.cell_id.clone()));
            }
        }
        Ok(Self {
            cells,
            feature_names,
            env_feature: env_feature.to_string(),
            env_index,
        })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn env_feature(&self) -> &str {
        &self.env_feature
    }

    pub fn env_index(&self) -> usize {
        self.env_index
    }

    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema(format!("unknown feature column `{name}`")))
    }

    pub fn positive_count(&self) -> usize {
        self.cells.iter().filter(|c| c.label == 1).count()
    }

    /// Fraction of label-1 cells; 0 for an empty dataset.
    pub fn positive_rate(&self) -> f64 {
        if self.cells.is_empty() {
            0.0
        } else {
            self.positive_count() as f64 / self.cells.len() as f64
        }
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.positive_count();
        p > 0 && p < self.cells.len()
    }

    pub fn features_matrix(&self) -> Array2<f64> {
        let d = self.n_features();
        Array2::from_shape_fn((self.cells.len(), d), |(i, j)| self.cells[i].features[j])
    }

    pub fn labels(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.label as f64).collect()
    }

    pub fn labels_u8(&self) -> Vec<u8> {
        self.cells.iter().map(|c| c.label).collect()
    }

    pub fn env_values(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.features[self.env_index]).collect()
    }

    /// New dataset with the given cells, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            cells: indices.iter().map(|&i| self.cells[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            env_feature: self.env_feature.clone(),
            env_index: self.env_index,
        }
    }

    pub fn same_schema(&self, other: &Dataset) -> bool {
        self.feature_names == other.feature_names
    }

    /// Municipality names in first-appearance order.
    pub fn municipalities(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.cells
            .iter()
            .filter(|c| seen.insert(c.municipality.as_str()))
            .map(|c| c.municipality.clone())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
        header.extend(self.feature_names.iter().map(String::as_str));
        w.write_record(&header)?;
        for c in &self.cells {
            let mut rec = vec![
                c.cell_id.clone(),
                c.lon.to_string(),
                c.lat.to_string(),
                c.municipality.clone(),
                c.department.clone(),
                c.label.to_string(),
            ];
            rec.extend(c.features.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }
}

/// Reads a dataset from a CSV file. Every non-required column is a feature.
pub fn load_csv(path: &Path, env_feature: &str) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(f, env_feature)
}

pub fn read_csv<R: Read>(reader: R, env_feature: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let idx: Vec<usize> = REQUIRED_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|i| !idx.contains(i)).collect();
    let feature_names: Vec<String> = feature_cols.iter().map(|&i| headers[i].trim().to_string()).collect();

    let mut cells = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let num = |i: usize, what: &str| -> Result<f64> {
            let raw = field(i);
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    row,
                    message: format!("column `{what}`: `{raw}` is not a finite number"),
                }),
            }
        };
        let label = match field(idx[5]) {
            "0" | "0.0" => 0,
            "1" | "1.0" => 1,
            other => {
                return Err(Error::Parse {
                    row,
                    message: format!("label `{other}` is not 0 or 1"),
                })
            }
        };
        let features = feature_cols
            .iter()
            .map(|&i| num(i, &headers[i]))
            .collect::<Result<Vec<_>>>()?;
        cells.push(Cell {
            cell_id: field(idx[0]).to_string(),
            lon: num(idx[1], "lon")?,
            lat: num(idx[2], "lat")?,
            municipality: field(idx[3]).to_string(),
            department: field(idx[4]).to_string(),
            features,
            label,
        });
    }
    Dataset::new(cells, feature_names, env_feature)
}

/// IRM environment of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvironmentTag {
    Easy,
    Hard,
}

impl EnvironmentTag {
    /// Easy when nearby historical events and the label agree: events nearby
    /// and a positive label, or no events nearby and a negative label.
    pub fn classify(env_value: f64, label: u8) -> Self {
        let has_history = env_value > 0.0;
        if has_history == (label == 1) {
            EnvironmentTag::Easy
        } else {
            EnvironmentTag::Hard
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvironmentTags {
    pub tags: Vec<EnvironmentTag>,
    pub easy: usize,
    pub hard: usize,
}

pub fn tag_environments(ds: &Dataset) -> Result<EnvironmentTags> {
    tag_values(&ds.env_values(), &ds.labels_u8())
}

pub fn tag_values(env: &[f64], labels: &[u8]) -> Result<EnvironmentTags> {
    if env.len() != labels.len() {
        return Err(Error::Dimension("env values and labels differ in length".into()));
    }
    let mut tags = Vec::with_capacity(env.len());
    for (i, (&e, &y)) in env.iter().zip(labels).enumerate() {
        if e < 0.0 {
            return Err(Error::Domain(format!(
                "environment feature is negative ({e}) at row {}",
                i + 1
            )));
        }
        tags.push(EnvironmentTag::classify(e, y));
    }
    let hard = tags.iter().filter(|t| **t == EnvironmentTag::Hard).count();
    Ok(EnvironmentTags {
        easy: tags.len() - hard,
        hard,
        tags,
    })
}

/// Municipality name -> row indices, in row order.
pub fn split_by_municipality(ds: &Dataset) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in ds.cells.iter().enumerate() {
        map.entry(c.municipality.clone()).or_default().push(i);
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub n_municipalities: usize,
    pub d_geo: usize,
    pub seed: u64,
    pub spurious_strength: f64,
    pub hard_fraction: f64,
    /// Target fraction of positive cells from the geospatial signal.
    pub base_positive_rate: f64,
    /// How many leading geospatial features drive the label.
    pub informative: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            grid_rows: 40,
            grid_cols: 60,
            n_municipalities: 6,
            d_geo: 6,
            seed: 0,
            spurious_strength: 0.9,
            hard_fraction: 0.2,
            base_positive_rate: 0.15,
            informative: 2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if self.n_municipalities == 0 {
            return bad("n_municipalities must be positive".into());
        }
        if self.grid_rows * self.grid_cols < self.n_municipalities {
            return bad(format!(
                "{}x{} grid cannot hold {} municipalities",
                self.grid_rows, self.grid_cols, self.n_municipalities
            ));
        }
        if self.d_geo == 0 {
            return bad("d_geo must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return bad("spurious_strength must lie in [0, 1]".into());
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 0.5) {
            return bad("hard_fraction must lie in (0, 0.5]".into());
        }
        if !(self.base_positive_rate > 0.0 && self.base_positive_rate < 0.5) {
            return bad("base_positive_rate must lie in (0, 0.5)".into());
        }
        if self.informative == 0 || self.informative > self.d_geo {
            return bad("informative must lie in 1..=d_geo".into());
        }
        Ok(())
    }
}

pub const METERS_PER_DEGREE: f64 = 111_320.0;
const ORIGIN_LON: f64 = -75.6;
const ORIGIN_LAT: f64 = 6.2;
pub const CELL_METERS: f64 = 500.0;
const SMOOTH_RADIUS: usize = 3;

/// Cell-center coordinates for grid position `(row, col)`; row 0 is south.
pub fn grid_coordinates(row: usize, col: usize) -> (f64, f64) {
    let dlat = CELL_METERS / METERS_PER_DEGREE;
    let dlon = CELL_METERS / (METERS_PER_DEGREE * ORIGIN_LAT.to_radians().cos());
    (
        ORIGIN_LON + (col as f64 + 0.5) * dlon,
        ORIGIN_LAT + (row as f64 + 0.5) * dlat,
    )
}

/// Standard-normal draw via Box-Muller.
fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Spatially smooth field: two passes of a box blur over white noise,
/// standardized to zero mean and unit variance.
fn smooth_field<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let mut f: Vec<f64> = (0..rows * cols).map(|_| normal(rng)).collect();
    for _ in 0..2 {
        let mut next = vec![0.0; f.len()];
        for r in 0..rows {
            for c in 0..cols {
                let (r0, r1) = (r.saturating_sub(SMOOTH_RADIUS), (r + SMOOTH_RADIUS).min(rows - 1));
                let (c0, c1) = (c.saturating_sub(SMOOTH_RADIUS), (c + SMOOTH_RADIUS).min(cols - 1));
                let mut s = 0.0;
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        s += f[rr * cols + cc];
                    }
                }
                next[r * cols + c] = s / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
            }
        }
        f = next;
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    f.iter().map(|v| (v - mean) / sd).collect()
}

/// Indicator of the top `fraction` of a field (exact count, ties by index).
fn top_fraction(field: &[f64], fraction: f64) -> Vec<bool> {
    let k = (fraction * field.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..field.len()).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut out = vec![false; field.len()];
    for &i in order.iter().take(k) {
        out[i] = true;
    }
    out
}

/// Factor `n` into `br x bc` blocks, picking the split whose block aspect is
/// closest to the grid's.
fn block_layout(n: usize, rows: usize, cols: usize) -> Option<(usize, usize)> {
    let target = rows as f64 / cols as f64;
    (1..=n)
        .filter(|br| n % br == 0 && *br <= rows && n / br <= cols)
        .min_by(|&a, &b| {
            let ea = ((a as f64 / (n / a) as f64) / target).ln().abs();
            let eb = ((b as f64 / (n / b) as f64) / target).ln().abs();
            ea.total_cmp(&eb)
        })
        .map(|br| (br, n / br))
}

/// Generates a seeded synthetic landmine-like dataset.
///
/// Geospatial features are smooth random fields; labels come from the
/// leading `informative` fields through a logistic link. The historical-event
/// count (`hist_mines`) is then drawn per cell: in easy regions it copies the
/// label with probability `spurious_strength` (events nearby iff positive), in
/// hard regions it contradicts the label with the same probability, and
/// otherwise it follows an independent smooth field. Region and independent
/// rates are set so the expected Hard share equals `hard_fraction`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (rows, cols) = (cfg.grid_rows, cfg.grid_cols);
    let n = rows * cols;
    let (br, bc) = block_layout(cfg.n_municipalities, rows, cols).ok_or_else(|| {
        Error::Config(format!(
            "cannot tile a {rows}x{cols} grid into {} rectangular municipalities",
            cfg.n_municipalities
        ))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let geo: Vec<Vec<f64>> = (0..cfg.d_geo).map(|_| smooth_field(rows, cols, &mut rng)).collect();

    let weights: Vec<f64> = (0..cfg.informative)
        .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let norm = (cfg.informative as f64).sqrt();
    let sharpness = 3.0;
    let signal: Vec<f64> = (0..n)
        .map(|i| sharpness * weights.iter().enumerate().map(|(k, w)| w * geo[k][i]).sum::<f64>() / norm)
        .collect();
    let bias = solve_bias(&signal, cfg.base_positive_rate);
    let labels: Vec<u8> = signal
        .iter()
        .map(|s| u8::from(rng.gen::<f64>() < sigmoid(s + bias)))
        .collect();

    // Independent-draw disagreement rate u = q(1-pi) + (1-q)pi; pick q so
    // that u matches the target, then the hard region share rho so that
    // (1-s) u + rho s = target.
    let pi = cfg.base_positive_rate;
    let target = cfg.hard_fraction;
    let s = cfg.spurious_strength;
    let q = ((target - pi) / (1.0 - 2.0 * pi)).clamp(0.02, 0.98);
    let u = q * (1.0 - pi) + (1.0 - q) * pi;
    let rho = if s > 0.0 {
        ((target - (1.0 - s) * u) / s).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let hard_region = top_fraction(&smooth_field(rows, cols, &mut rng), rho);
    let independent = top_fraction(&smooth_field(rows, cols, &mut rng), q);

    let mut cells = Vec::with_capacity(n);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let linked = rng.gen::<f64>() < s;
            let y = labels[i] == 1;
            let has_history = if linked {
                if hard_region[i] {
                    !y
                } else {
                    y
                }
            } else {
                independent[i]
            };
            let count = if has_history { 1 + rng.gen_range(0..4) } else { 0 };
            let mut features: Vec<f64> = geo.iter().map(|g| g[i]).collect();
            features.push(count as f64);
            let block_r = r * br / rows;
            let block_c = c * bc / cols;
            let (lon, lat) = grid_coordinates(r, c);
            cells.push(Cell {
                cell_id: format!("c{r:04}_{c:04}"),
                lon,
                lat,
                municipality: format!("m{:02}", block_r * bc + block_c),
                department: format!("d{block_r:02}"),
                features,
                label: labels[i],
            });
        }
    }
    let mut names: Vec<String> = (0..cfg.d_geo).map(|k| format!("geo_{k}")).collect();
    names.push(DEFAULT_ENV_FEATURE.to_string());
    Dataset::new(cells, names, DEFAULT_ENV_FEATURE)
}

/// Bias such that the mean of `sigmoid(signal + b)` equals `rate`.
fn solve_bias(signal: &[f64], rate: f64) -> f64 {
    let mean_prob = |b: f64| signal.iter().map(|s| sigmoid(s + b)).sum::<f64>() / signal.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
