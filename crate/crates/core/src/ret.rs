//! Return levels: plug-in closed form per draw, posterior summaries per cell,
//! and the predictive level that folds parameter uncertainty into the tail.

use std::io::Write;

use crate::error::{Error, Result};
use crate::fit::{quantile_type7, ExcessRecord};
use crate::gpd::{gpd_survival, ThetaCell, XI_EPS};
use crate::hier::ChainArchive;
use crate::lattice::Lattice;
use crate::single_cell::SingleCellChain;

/// r-year return level x = u + (sigma_u/xi) * ((n_y*lambda_u*r)^xi - 1),
/// exponential branch for |xi| < XI_EPS. Errors when the level would sit
/// below the threshold (n_y*lambda_u*r < 1); at exactly 1 the level is u.
pub fn return_level(theta: ThetaCell, u: f64, lambda_u: f64, n_y: f64, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Config(format!("return period must be positive, got {r}")));
    }
    let m = n_y * lambda_u * r;
    if m < 1.0 {
        return Err(Error::BelowThreshold(m));
    }
    let sigma_u = theta.sigma_u(u).ok_or(Error::InvalidParams {
        sigma_u: theta.log_sigma_tilde.exp() + theta.xi * u,
        xi: theta.xi,
    })?;
    if theta.xi.abs() < XI_EPS {
        Ok(u + sigma_u * m.ln())
    } else {
        Ok(u + sigma_u / theta.xi * (m.powf(theta.xi) - 1.0))
    }
}

/// Posterior return-level summary for one cell and one return period.
#[derive(Debug, Clone)]
pub struct ReturnLevelSummary {
    pub cell_id: u64,
    pub r: f64,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    pub predictive_level: Option<f64>,
    /// Draws that hit the error branch and were dropped.
    pub n_invalid: usize,
}

fn summarize_levels(
    cell_id: u64,
    r: f64,
    draws: &[ThetaCell],
    u: f64,
    lambda_u: f64,
    n_y: f64,
) -> Result<ReturnLevelSummary> {
    let mut levels = Vec::with_capacity(draws.len());
    let mut n_invalid = 0usize;
    for &t in draws {
        match return_level(t, u, lambda_u, n_y, r) {
            Ok(x) => levels.push(x),
            Err(_) => n_invalid += 1,
        }
    }
    if levels.is_empty() {
        return Err(Error::AllDrawsInvalid(cell_id));
    }
    let n = levels.len() as f64;
    let mean = levels.iter().sum::<f64>() / n;
    let sd = if levels.len() > 1 {
        (levels.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    levels.sort_by(|a, b| a.total_cmp(b));
    Ok(ReturnLevelSummary {
        cell_id,
        r,
        mean,
        sd,
        q025: quantile_type7(&levels, 0.025),
        q50: quantile_type7(&levels, 0.5),
        q975: quantile_type7(&levels, 0.975),
        predictive_level: None,
        n_invalid,
    })
}

/// Source of per-cell posterior draws for the summaries.
pub enum DrawSource<'a> {
    Hier(&'a ChainArchive),
    Single(&'a [SingleCellChain]),
}

impl<'a> DrawSource<'a> {
    fn cell_ids(&self) -> Vec<u64> {
        match self {
            DrawSource::Hier(a) => a.cell_ids.clone(),
            DrawSource::Single(cs) => cs.iter().map(|c| c.cell_id).collect(),
        }
    }

    pub fn cell_draws(&self, j: usize) -> Vec<ThetaCell> {
        match self {
            DrawSource::Hier(a) => a.cell_draws(j),
            DrawSource::Single(cs) => cs[j].draws.clone(),
        }
    }
}

/// Summaries for every cell and every return period, with predictive levels.
pub fn posterior_return_levels(
    source: &DrawSource,
    records: &[ExcessRecord],
    r_list: &[f64],
) -> Result<Vec<ReturnLevelSummary>> {
    let ids = source.cell_ids();
    if ids != records.iter().map(|r| r.cell_id).collect::<Vec<_>>() {
        return Err(Error::MismatchedCells);
    }
    let mut out = Vec::with_capacity(ids.len() * r_list.len());
    for (j, rec) in records.iter().enumerate() {
        let draws = source.cell_draws(j);
        if draws.is_empty() {
            return Err(Error::AllDrawsInvalid(rec.cell_id));
        }
        for &r in r_list {
            let mut s = summarize_levels(rec.cell_id, r, &draws, rec.u, rec.lambda_u, rec.n_y)?;
            s.predictive_level =
                Some(predictive_return_level(&draws, rec, r, 1e-8)?);
            out.push(s);
        }
    }
    Ok(out)
}

/// Posterior-averaged daily exceedance probability of level y (>= u).
fn averaged_tail(draws: &[ThetaCell], rec: &ExcessRecord, y: f64) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for &t in draws {
        if let Some(p) = t.params_at(rec.u) {
            acc += rec.lambda_u * gpd_survival(y - rec.u, p).unwrap_or(0.0);
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        acc / n as f64
    }
}

/// Predictive r-year level: solves the posterior-averaged daily exceedance
/// probability equal to 1/(r*n_y) by bisection above the threshold.
pub fn predictive_return_level(
    draws: &[ThetaCell],
    rec: &ExcessRecord,
    r: f64,
    solver_tol: f64,
) -> Result<f64> {
    let target = 1.0 / (r * rec.n_y);
    if rec.n_y * rec.lambda_u * r <= 1.0 {
        return Err(Error::BelowThreshold(rec.n_y * rec.lambda_u * r));
    }
    // tail(u) = lambda_u > target here, so the root sits above u
    let mut lo = rec.u;
    // the per-draw plug-in level solves lambda_u * S_t = target for a single
    // draw; the survival functions are decreasing, so the maximum over draws
    // bounds the root of the averaged tail from above
    let max_plugin = draws
        .iter()
        .filter(|t| t.params_at(rec.u).is_some())
        .filter_map(|&t| return_level(t, rec.u, rec.lambda_u, rec.n_y, r).ok())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut hi = if max_plugin.is_finite() && max_plugin > rec.u {
        max_plugin
    } else {
        rec.u + draws
            .iter()
            .filter_map(|t| t.sigma_u(rec.u))
            .next()
            .unwrap_or(1.0)
            .max(1e-6)
    };
    // doubling fallback for numerical slack at the analytic bound
    let mut grow = 0u32;
    while averaged_tail(draws, rec, hi) > target {
        grow += 1;
        if grow > 10 {
            return Err(Error::NotBracketed {
                cell_id: rec.cell_id,
                tail: averaged_tail(draws, rec, hi),
            });
        }
        hi = rec.u + (hi - rec.u) * 2.0;
    }
    // bisection to relative tolerance on y
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if averaged_tail(draws, rec, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= solver_tol * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Map output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    Csv,
    GeoJson,
}

impl MapFormat {
    pub fn parse(token: &str) -> Result<MapFormat> {
        match token.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(MapFormat::Csv),
            "geojson" => Ok(MapFormat::GeoJson),
            other => Err(Error::Config(format!("unknown map format: {other}"))),
        }
    }
}

/// Write a plot-ready map file: one row/point per (cell, r).
pub fn emit_map<W: Write>(
    summaries: &[ReturnLevelSummary],
    lattice: &Lattice,
    format: MapFormat,
    out: &mut W,
) -> Result<()> {
    let lookup = |cell_id: u64| -> Result<(f64, f64)> {
        lattice
            .cells
            .iter()
            .find(|c| c.cell_id == cell_id)
            .map(|c| (c.lon, c.lat))
            .ok_or(Error::MismatchedCells)
    };
    match format {
        MapFormat::Csv => {
            writeln!(out, "cell_id,lon,lat,r,mean,sd,q025,q50,q975,predictive")?;
            for s in summaries {
                let (lon, lat) = lookup(s.cell_id)?;
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    s.cell_id,
                    lon,
                    lat,
                    s.r,
                    s.mean,
                    s.sd,
                    s.q025,
                    s.q50,
                    s.q975,
                    s.predictive_level.map_or(String::new(), |p| p.to_string())
                )?;
            }
        }
        MapFormat::GeoJson => {
            writeln!(out, "{{")?;
            writeln!(out, "  \"type\": \"FeatureCollection\",")?;
            writeln!(out, "  \"features\": [")?;
            for (i, s) in summaries.iter().enumerate() {
                let (lon, lat) = lookup(s.cell_id)?;
                let comma = if i + 1 < summaries.len() { "," } else { "" };
                writeln!(
                    out,
                    "    {{\"type\": \"Feature\", \"geometry\": {{\"type\": \"Point\", \"coordinates\": [{lon}, {lat}]}}, \"properties\": {{\"cell_id\": {}, \"r\": {}, \"mean\": {}, \"sd\": {}, \"q025\": {}, \"q50\": {}, \"q975\": {}, \"predictive\": {}}}}}{comma}",
                    s.cell_id,
                    s.r,
                    s.mean,
                    s.sd,
                    s.q025,
                    s.q50,
                    s.q975,
                    s.predictive_level.map_or("null".to_string(), |p| p.to_string())
                )?;
            }
            writeln!(out, "  ]")?;
            writeln!(out, "}}")?;
        }
    }
    Ok(())
}

/// Mean absolute difference over adjacent cell pairs of a per-cell field —
/// the smoothness measure used to compare maps.
pub fn mean_abs_neighbor_diff(values: &[f64], lattice: &Lattice) -> f64 {
    let mut total = 0.0;
    let mut n_pairs = 0usize;
    for i in 0..lattice.n_cells() {
        for &j in &lattice.neighbor_sets[i] {
            if j > i {
                total += (values[i] - values[j]).abs();
                n_pairs += 1;
            }
        }
    }
    total / n_pairs.max(1) as f64
}
