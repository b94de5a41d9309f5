//! Local Moran's I on risk scores and risk-map export.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{Cell, METERS_PER_DEGREE};
use crate::error::{Error, Result};

pub const DEFAULT_PERMUTATIONS: usize = 999;
pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contiguity {
    #[default]
    Queen,
    Rook,
}

impl std::str::FromStr for Contiguity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "queen" => Ok(Contiguity::Queen),
            "rook" => Ok(Contiguity::Rook),
            other => Err(Error::Config(format!("unknown contiguity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    /// `(neighbor, weight)` per cell, neighbors in ascending index order.
    pub neighbors: Vec<Vec<(usize, f64)>>,
    pub scheme: Contiguity,
    pub row_standardized: bool,
    /// Cells with no neighbor; they take no part in Moran statistics.
    pub isolated: Vec<usize>,
}

impl SpatialWeights {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    fn lag(&self, i: usize, z: &[f64]) -> f64 {
        self.neighbors[i].iter().map(|&(j, w)| w * z[j]).sum()
    }
}

/// Smallest gap between distinct sorted values, or `None` for a single value.
fn grid_step(values: &mut Vec<f64>) -> Option<f64> {
    values.sort_by(f64::total_cmp);
    let span = values.last()? - values.first()?;
    let tol = 1e-9 * span.abs().max(1.0);
    values.dedup_by(|a, b| (*a - *b).abs() <= tol);
    values
        .windows(2)
        .map(|w| w[1] - w[0])
        .min_by(f64::total_cmp)
}

fn grid_index(v: f64, origin: f64, step: Option<f64>) -> Result<i64> {
    let Some(step) = step else { return Ok(0) };
    let t = (v - origin) / step;
    let r = t.round();
    if (t - r).abs() > 0.25 {
        return Err(Error::Domain("cell coordinates do not form a regular grid".into()));
    }
    Ok(r as i64)
}

/// Contiguity weights for cells on a (possibly partial) regular grid; the
/// spacing along each axis is the smallest coordinate gap.
pub fn build_weights(coords: &[(f64, f64)], scheme: Contiguity) -> Result<SpatialWeights> {
    if coords.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Domain("cell coordinates must be finite".into()));
    }
    let mut xs: Vec<f64> = coords.iter().map(|c| c.0).collect();
    let mut ys: Vec<f64> = coords.iter().map(|c| c.1).collect();
    let (dx, dy) = (grid_step(&mut xs), grid_step(&mut ys));
    let (x0, y0) = (xs.first().copied().unwrap_or(0.0), ys.first().copied().unwrap_or(0.0));

    let mut positions = Vec::with_capacity(coords.len());
    let mut lookup: HashMap<(i64, i64), usize> = HashMap::with_capacity(coords.len());
    for (i, &(x, y)) in coords.iter().enumerate() {
        let key = (grid_index(x, x0, dx)?, grid_index(y, y0, dy)?);
        if lookup.insert(key, i).is_some() {
            return Err(Error::Domain(format!("two cells share grid position {key:?}")));
        }
        positions.push(key);
    }

    let offsets: &[(i64, i64)] = match scheme {
        Contiguity::Rook => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Contiguity::Queen => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    let mut neighbors = Vec::with_capacity(coords.len());
    let mut isolated = Vec::new();
    for (i, &(cx, cy)) in positions.iter().enumerate() {
        let mut nb: Vec<usize> = offsets
            .iter()
            .filter_map(|(ox, oy)| lookup.get(&(cx + ox, cy + oy)).copied())
            .collect();
        nb.sort_unstable();
        if nb.is_empty() {
            isolated.push(i);
        }
        let w = 1.0 / nb.len().max(1) as f64;
        neighbors.push(nb.into_iter().map(|j| (j, w)).collect());
    }
    Ok(SpatialWeights {
        neighbors,
        scheme,
        row_standardized: true,
        isolated,
    })
}

pub fn weights_for_cells(cells: &[Cell], scheme: Contiguity) -> Result<SpatialWeights> {
    let coords: Vec<(f64, f64)> = cells.iter().map(|c| (c.lon, c.lat)).collect();
    build_weights(&coords, scheme)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterClass {
    /// High value among high neighbors.
    High,
    /// Significant spatial outlier (high among low or low among high).
    Medium,
    /// Low value among low neighbors.
    Low,
    NotSignificant,
}

impl ClusterClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusterClass::High => "high",
            ClusterClass::Medium => "medium",
            ClusterClass::Low => "low",
            ClusterClass::NotSignificant => "not_significant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub local_i: Vec<f64>,
    pub p_value: Vec<f64>,
    pub class: Vec<ClusterClass>,
    pub alpha: f64,
    pub permutations: usize,
}

fn deviations(scores: &[f64]) -> Result<(Vec<f64>, f64)> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let z: Vec<f64> = scores.iter().map(|s| s - mean).collect();
    let m2 = z.iter().map(|v| v * v).sum::<f64>() / n;
    if !(m2 > 0.0) {
        return Err(Error::Degenerate("scores are constant; Moran's I is undefined".into()));
    }
    Ok((z, m2))
}

fn check_len(scores: &[f64], w: &SpatialWeights) -> Result<()> {
    if scores.len() != w.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} weighted cells",
            scores.len(),
            w.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::Domain("Moran's I needs at least two cells".into()));
    }
    Ok(())
}

/// `I_i = (z_i / m2) * sum_j w_ij z_j`.
pub fn local_moran_statistics(scores: &[f64], w: &SpatialWeights) -> Result<Vec<f64>> {
    check_len(scores, w)?;
    let (z, m2) = deviations(scores)?;
    Ok((0..z.len()).map(|i| z[i] / m2 * w.lag(i, &z)).collect())
}

/// Global Moran's I, computed from the double sum over weighted pairs.
pub fn global_moran(scores: &[f64], w: &SpatialWeights) -> Result<f64> {
    check_len(scores, w)?;
    let (z, _) = deviations(scores)?;
    let mut cross = 0.0;
    let mut s0 = 0.0;
    for (i, nb) in w.neighbors.iter().enumerate() {
        for &(j, wij) in nb {
            cross += wij * z[i] * z[j];
            s0 += wij;
        }
    }
    let ss: f64 = z.iter().map(|v| v * v).sum();
    Ok(z.len() as f64 / s0 * cross / ss)
}

/// Local Moran's I with conditional-permutation pseudo p-values. Cell `i`
/// draws its own stream from `seed`, so results do not depend on threading.
pub fn local_moran(
    scores: &[f64],
    w: &SpatialWeights,
    permutations: usize,
    seed: u64,
    alpha: f64,
) -> Result<ClusterMap> {
    check_len(scores, w)?;
    if permutations == 0 {
        return Err(Error::Config("at least one permutation is required".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config("alpha must lie in (0, 1)".into()));
    }
    let (z, m2) = deviations(scores)?;
    let n = z.len();
    let rows: Vec<(f64, f64, ClusterClass)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nb = &w.neighbors[i];
            if nb.is_empty() {
                return (0.0, 1.0, ClusterClass::NotSignificant);
            }
            let lag = w.lag(i, &z);
            let observed = z[i] / m2 * lag;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let k = nb.len().min(n - 1);
            let mut extreme = 0usize;
            for _ in 0..permutations {
                let drawn = rand::seq::index::sample(&mut rng, n - 1, k);
                let perm_lag: f64 = drawn
                    .iter()
                    .zip(nb)
                    .map(|(j, &(_, wij))| wij * z[if j >= i { j + 1 } else { j }])
                    .sum();
                let stat = z[i] / m2 * perm_lag;
                let hit = if observed >= 0.0 { stat >= observed } else { stat <= observed };
                if hit {
                    extreme += 1;
                }
            }
            let p = (1 + extreme) as f64 / (1 + permutations) as f64;
            let class = if p > alpha {
                ClusterClass::NotSignificant
            } else if z[i] > 0.0 && lag > 0.0 {
                ClusterClass::High
            } else if z[i] < 0.0 && lag < 0.0 {
                ClusterClass::Low
            } else {
                ClusterClass::Medium
            };
            (observed, p, class)
        })
        .collect();
    Ok(ClusterMap {
        local_i: rows.iter().map(|r| r.0).collect(),
        p_value: rows.iter().map(|r| r.1).collect(),
        class: rows.iter().map(|r| r.2).collect(),
        alpha,
        permutations,
    })
}

/// Closed counter-clockwise ring of a square of side `size_m` meters.
fn square_ring(lon: f64, lat: f64, size_m: f64) -> Vec<[f64; 2]> {
    let half = size_m / 2.0;
    let dy = half / METERS_PER_DEGREE;
    let dx = half / (METERS_PER_DEGREE * lat.to_radians().cos());
    vec![
        [lon - dx, lat - dy],
        [lon + dx, lat - dy],
        [lon + dx, lat + dy],
        [lon - dx, lat + dy],
        [lon - dx, lat - dy],
    ]
}

/// GeoJSON FeatureCollection with one square polygon per cell.
pub fn export_riskmap(
    cells: &[Cell],
    scores: &[f64],
    clusters: Option<&ClusterMap>,
    cell_size_m: f64,
) -> Result<Value> {
    if scores.len() != cells.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} cells",
            scores.len(),
            cells.len()
        )));
    }
    if let Some(c) = clusters {
        if c.class.len() != cells.len() {
            return Err(Error::Dimension("cluster map does not match the cells".into()));
        }
    }
    if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
        return Err(Error::Config("cell size must be positive".into()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Domain(format!("risk score {s} lies outside [0, 1]")));
    }
    let features: Vec<Value> = cells
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (cell, &risk))| {
            let (class, local_i, p) = match clusters {
                Some(c) => (json!(c.class[i].as_str()), json!(c.local_i[i]), json!(c.p_value[i])),
                None => (Value::Null, Value::Null, Value::Null),
            };
            json!({
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [square_ring(cell.lon, cell.lat, cell_size_m)],
                },
                "properties": {
                    "cell_id": cell.cell_id,
                    "risk": risk,
                    "cluster_class": class,
                    "local_i": local_i,
                    "p_value": p,
                },
            })
        })
        .collect();
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}

const RAMP_LIGHT: [u8; 3] = [0xff, 0xf5, 0xeb];
const RAMP_DARK: [u8; 3] = [0x7f, 0x27, 0x04];

/// Hex color on a light-to-dark ramp; `risk` is clamped to [0, 1].
pub fn risk_color(risk: f64) -> String {
    let t = if risk.is_nan() { 0.0 } else { risk.clamp(0.0, 1.0) };
    let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(RAMP_LIGHT[0], RAMP_DARK[0]),
        mix(RAMP_LIGHT[1], RAMP_DARK[1]),
        mix(RAMP_LIGHT[2], RAMP_DARK[2])
    )
}

fn cluster_stroke(class: &str) -> Option<&'static str> {
    match class {
        "high" => Some("#b10026"),
        "medium" => Some("#6a51a3"),
        "low" => Some("#2171b5"),
        _ => None,
    }
}

/// Self-contained HTML page: an SVG rendering of the map, a static legend,
/// and the GeoJSON document embedded inline.
pub fn riskmap_html(geojson: &Value, title: &str) -> Result<String> {
    let features = geojson["features"]
        .as_array()
        .ok_or_else(|| Error::Domain("not a FeatureCollection".into()))?;
    let rings: Vec<(&Value, Vec<[f64; 2]>)> = features
        .iter()
        .map(|f| {
            let ring = f["geometry"]["coordinates"][0]
                .as_array()
                .map(|pts| {
                    pts.iter()
                        .filter_map(|p| Some([p[0].as_f64()?, p[1].as_f64()?]))
                        .collect()
                })
                .unwrap_or_default();
            (&f["properties"], ring)
        })
        .collect();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (_, ring) in &rings {
        for [x, y] in ring {
            x0 = x0.min(*x);
            x1 = x1.max(*x);
            y0 = y0.min(*y);
            y1 = y1.max(*y);
        }
    }
    let width = 800.0;
    let scale = if x1 > x0 { width / (x1 - x0) } else { 1.0 };
    let height = if y1 > y0 { (y1 - y0) * scale } else { width };

    let mut svg = String::new();
    for (props, ring) in &rings {
        let pts: Vec<String> = ring
            .iter()
            .map(|[x, y]| format!("{:.2},{:.2}", (x - x0) * scale, (y1 - y) * scale))
            .collect();
        let risk = props["risk"].as_f64().unwrap_or(0.0);
        let stroke = props["cluster_class"]
            .as_str()
            .and_then(cluster_stroke)
            .map(|c| format!(" stroke=\"{c}\" stroke-width=\"1.5\""))
            .unwrap_or_default();
        let _ = writeln!(
            svg,
            "<polygon points=\"{}\" fill=\"{}\"{stroke}><title>{} risk {:.4}</title></polygon>",
            pts.join(" "),
            risk_color(risk),
            html_escape(props["cell_id"].as_str().unwrap_or("")),
            risk
        );
    }

    let mut legend = String::new();
    for k in 0..=10 {
        let r = k as f64 / 10.0;
        let _ = write!(
            legend,
            "<span class=\"swatch\" style=\"background:{}\" title=\"{r:.1}\"></span>",
            risk_color(r)
        );
    }
    let data = serde_json::to_string(geojson)?.replace("</", "<\\/");
    Ok(format!(
        r#"<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{title}</title>
<style>
body {{ font-family: sans-serif; margin: 1em; }}
.swatch {{ display: inline-block; width: 24px; height: 14px; }}
svg polygon {{ stroke-linejoin: round; }}
</style>
</head>
<body>
<h1>{title}</h1>
<div class="legend">risk 0 {legend} 1</div>
<div class="legend">cluster outline: <span style="color:#b10026">high</span> <span style="color:#6a51a3">medium</span> <span style="color:#2171b5">low</span></div>
<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.2} {height:.2}">
{svg}</svg>
<script type="application/geo+json" id="riskmap-data">{data}</script>
</body>
</html>
"#,
        title = html_escape(title),
    ))
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
