//! Chain and model quality metrics: DIC on the adjusted deviance, effective
//! sample size with initial-positive-sequence truncation, acceptance
//! summaries.

use crate::adjust::adjusted_loglik;
use crate::error::{Error, Result};
use crate::fit::ExcessRecord;
use crate::gpd::cell_loglik;
use crate::hier::ChainArchive;

#[derive(Debug, Clone)]
pub struct DicReport {
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
    pub p_d: f64,
    pub dic: f64,
    /// Cells whose posterior-mean theta fell outside the support and were
    /// dropped from both deviance terms.
    pub infeasible_cells: Vec<u64>,
}

/// DIC on the magnitude-adjusted deviance -2k * loglik, conditional on the
/// process layer (focus on theta).
pub fn dic(archive: &ChainArchive, records: &[ExcessRecord], k: f64) -> Result<DicReport> {
    if archive.n_stored() == 0 {
        return Err(Error::Config("empty archive".into()));
    }
    if archive.cell_ids != records.iter().map(|r| r.cell_id).collect::<Vec<_>>() {
        return Err(Error::MismatchedCells);
    }
    let theta_bar = archive.posterior_mean_theta();

    // cells with an infeasible posterior mean are excluded everywhere so the
    // two deviance terms stay comparable
    let feasible: Vec<usize> = (0..records.len())
        .filter(|&j| {
            cell_loglik(theta_bar[j], records[j].u, &records[j].excesses) > f64::NEG_INFINITY
        })
        .collect();
    let infeasible_cells: Vec<u64> = (0..records.len())
        .filter(|j| !feasible.contains(j))
        .map(|j| records[j].cell_id)
        .collect();
    if feasible.is_empty() {
        return Err(Error::Data("no cell has a feasible posterior mean".into()));
    }
    if !infeasible_cells.is_empty() {
        eprintln!(
            "warning: DIC computed on {}/{} cells; infeasible posterior means in cells {:?}",
            feasible.len(),
            records.len(),
            infeasible_cells
        );
    }
    let sub_records: Vec<ExcessRecord> =
        feasible.iter().map(|&j| records[j].clone()).collect();

    let mut mean_dev = 0.0;
    for row in &archive.theta {
        let theta_sub: Vec<_> = feasible.iter().map(|&j| row[j]).collect();
        mean_dev += -2.0 * adjusted_loglik(&sub_records, &theta_sub, k);
    }
    mean_dev /= archive.n_stored() as f64;

    let theta_bar_sub: Vec<_> = feasible.iter().map(|&j| theta_bar[j]).collect();
    let dev_at_mean = -2.0 * adjusted_loglik(&sub_records, &theta_bar_sub, k);

    let p_d = mean_dev - dev_at_mean;
    Ok(DicReport {
        mean_deviance: mean_dev,
        deviance_at_mean: dev_at_mean,
        p_d,
        dic: mean_dev + p_d,
        infeasible_cells,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EssResult {
    pub ess: f64,
    /// Set when the series is constant and the estimator is undefined.
    pub degenerate: bool,
}

/// Effective sample size N/(1 + 2 sum rho_t), autocorrelations truncated by
/// Geyer's initial positive sequence rule on pair sums.
pub fn effective_sample_size(series: &[f64]) -> Result<EssResult> {
    let n = series.len();
    if n < 100 {
        return Err(Error::Config(format!("series too short for ESS: {n} < 100")));
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    if var <= 0.0 || !var.is_finite() {
        return Ok(EssResult { ess: 0.0, degenerate: true });
    }

    let autocov = |lag: usize| -> f64 {
        let mut acc = 0.0;
        for t in 0..n - lag {
            acc += (series[t] - mean) * (series[t + lag] - mean);
        }
        acc / nf
    };

    // sum pair autocorrelations rho(2m-1) + rho(2m) while positive
    let mut sum_rho = 0.0;
    let mut lag = 1usize;
    while lag + 1 < n {
        let pair = (autocov(lag) + autocov(lag + 1)) / var;
        if pair <= 0.0 {
            break;
        }
        sum_rho += pair;
        lag += 2;
    }
    let ess = (nf / (1.0 + 2.0 * sum_rho)).min(nf);
    Ok(EssResult { ess, degenerate: false })
}

#[derive(Debug, Clone)]
pub struct AcceptanceSummary {
    pub cell_ids: Vec<u64>,
    pub rates: Vec<f64>,
    /// Counts per decile bucket [0,0.1), ..., [0.9,1.0].
    pub histogram: [usize; 10],
}

/// Post-burn-in per-cell acceptance rates from the archive indicators.
pub fn acceptance_summary(archive: &ChainArchive) -> AcceptanceSummary {
    let d = archive.cell_ids.len();
    let n = archive.accept.len().max(1) as f64;
    let mut rates = vec![0.0; d];
    for row in &archive.accept {
        for (j, &a) in row.iter().enumerate() {
            if a {
                rates[j] += 1.0;
            }
        }
    }
    for r in rates.iter_mut() {
        *r /= n;
    }
    let mut histogram = [0usize; 10];
    for &r in &rates {
        let bucket = ((r * 10.0).floor() as usize).min(9);
        histogram[bucket] += 1;
    }
    AcceptanceSummary { cell_ids: archive.cell_ids.clone(), rates, histogram }
}
