//! Shared oracles and finite-difference helpers for the integration tests.
#![allow(dead_code)]

pub mod grad;

use ndarray::Array2;
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;
/// Components with both magnitudes below this are compared absolutely: a
/// one-ulp change of an O(10) loss already moves the quotient by ~1e-9.
pub const FD_FLOOR: f64 = 1e-3;

#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl FdStats {
    pub fn merge(self, o: FdStats) -> FdStats {
        FdStats {
            max_rel: self.max_rel.max(o.max_rel),
            checked: self.checked + o.checked,
            skipped: self.skipped + o.skipped,
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Central differences of `f` at `x` compared with `analytic`. A probe is
/// skipped when `pattern` (piecewise-linear regime) differs at `x ± h`.
pub fn fd_check<F, P>(f: F, pattern: P, x: &[f64], analytic: &[f64]) -> FdStats
where
    F: Fn(&[f64]) -> f64,
    P: Fn(&[f64]) -> Vec<bool>,
{
    assert_eq!(x.len(), analytic.len());
    let base = pattern(x);
    let mut stats = FdStats::default();
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let (fp, pp) = (f(&probe), pattern(&probe));
        probe[i] = x[i] - FD_STEP;
        let (fm, pm) = (f(&probe), pattern(&probe));
        probe[i] = x[i];
        if pp != base || pm != base {
            stats.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        stats.max_rel = stats.max_rel.max(rel_err(analytic[i], numeric));
        stats.checked += 1;
    }
    stats
}

pub fn no_pattern(_: &[f64]) -> Vec<bool> {
    Vec::new()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// Projection onto the simplex by enumerating every candidate support and
/// keeping the closest feasible point.
pub fn brute_force_simplex_projection(z: &[f64]) -> Vec<f64> {
    let d = z.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << d) {
        let support: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
        let tau = (support.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / support.len() as f64;
        let mut p = vec![0.0; d];
        let mut feasible = true;
        for i in 0..d {
            if mask & (1 << i) != 0 {
                p[i] = z[i] - tau;
                feasible &= p[i] >= -1e-12;
            } else {
                feasible &= z[i] <= tau + 1e-12;
            }
        }
        if !feasible {
            continue;
        }
        let p: Vec<f64> = p.into_iter().map(|v| v.max(0.0)).collect();
        let dist: f64 = p.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
            best = Some((dist, p));
        }
    }
    best.expect("some support is always feasible").1
}

/// Pair counts by the O(P N) double loop: (concordant, ties, discordant).
pub fn brute_pairs(scores: &[f64], labels: &[u8]) -> (u64, u64, u64) {
    let (mut c, mut t, mut d) = (0, 0, 0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            if si > sj {
                c += 1;
            } else if si == sj {
                t += 1;
            } else {
                d += 1;
            }
        }
    }
    (c, t, d)
}

/// `sigma(x)` written out directly, for oracle use.
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Structural RFC 7946 checks on top of the `geojson` parser: closed linear
/// rings of at least four positions, counter-clockwise exteriors, WGS84
/// ranges, and no legacy `crs` member. Returns every violation found.
pub fn rfc7946_violations(text: &str) -> Vec<String> {
    use geojson::{GeoJson, Value};
    let mut out = Vec::new();
    let raw: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return vec![format!("not JSON: {e}")],
    };
    if raw.get("crs").is_some() {
        out.push("top-level crs member".into());
    }
    let fc = match text.parse::<GeoJson>() {
        Ok(GeoJson::FeatureCollection(fc)) => fc,
        Ok(_) => return vec!["not a FeatureCollection".into()],
        Err(e) => return vec![format!("geojson parse: {e}")],
    };
    for (k, f) in fc.features.iter().enumerate() {
        let Some(g) = &f.geometry else {
            out.push(format!("feature {k}: no geometry"));
            continue;
        };
        let Value::Polygon(rings) = &g.value else {
            out.push(format!("feature {k}: not a polygon"));
            continue;
        };
        for (r, ring) in rings.iter().enumerate() {
            if ring.len() < 4 {
                out.push(format!("feature {k} ring {r}: {} positions", ring.len()));
                continue;
            }
            if ring.first() != ring.last() {
                out.push(format!("feature {k} ring {r}: not closed"));
            }
            if ring.iter().any(|p| p.len() < 2 || !(-180.0..=180.0).contains(&p[0]) || !(-90.0..=90.0).contains(&p[1])) {
                out.push(format!("feature {k} ring {r}: position out of range"));
            }
            let area2: f64 = ring.windows(2).map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1]).sum();
            let ccw = area2 > 0.0;
            if (r == 0) != ccw {
                out.push(format!("feature {k} ring {r}: wrong winding"));
            }
        }
    }
    out
}

/// Cells on a `rows x cols` grid with one municipality per row band.
pub fn grid_cells(rows: usize, cols: usize) -> Vec<reland::dataset::Cell> {
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (lon, lat) = reland::dataset::grid_coordinates(r, c);
            cells.push(reland::dataset::Cell {
                cell_id: format!("r{r}c{c}"),
                lon,
                lat,
                municipality: format!("m{}", r / 2),
                department: "d".into(),
                features: vec![0.0],
                label: ((r + c) % 2) as u8,
            });
        }
    }
    cells
}
