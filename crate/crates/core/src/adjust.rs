//! Magnitude adjustment of the independence likelihood.
//!
//! The product-over-cells GPD likelihood ignores spatial dependence, so its
//! deviance is asymptotically a weighted chi-square rather than chi-square.
//! Raising the likelihood to the power k = p / sum of Godambe eigenvalues
//! restores the asymptotic mean of the deviance. k*d can be read as the
//! effective number of independently-informative cells.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::fit::{fd_gradient, ExcessRecord};
use crate::gpd::{cell_loglik, ThetaCell};

/// Per-day score contributions: sparse over cells, zero blocks omitted.
#[derive(Debug, Clone)]
pub struct DayScore {
    pub day: usize,
    /// (cell index, gradient of that cell's log-likelihood contribution)
    pub entries: Vec<(usize, Vector2<f64>)>,
}

#[derive(Debug, Clone)]
pub struct AdjustmentEstimate {
    pub k: f64,
    /// Number of parameters, 2 per usable cell.
    pub p: usize,
    /// Sum over block pairs of trace(H_j^-1 J_ji); equals the sum of the
    /// Godambe eigenvalues.
    pub trace_hinv_j: f64,
    /// Per-cell sensitivity blocks (observed information in theta space).
    pub per_cell_h: Vec<Matrix2<f64>>,
    /// Per-cell diagnostic trace(H_j^-1 J_jj) (about 2 for a well-specified cell).
    pub per_cell_trace: Vec<f64>,
    /// Cells skipped because their information block was singular.
    pub skipped_cells: Vec<u64>,
    pub effective_independent_sites: f64,
    /// Set when the raw estimate fell outside (0, 1.05] and was clamped.
    pub clamped: bool,
}

/// Gradient of one cell's log-likelihood contribution for a single excess,
/// by central finite differences in (log sigma_tilde, xi).
fn excess_score(theta: ThetaCell, u: f64, x: f64) -> Result<Vector2<f64>> {
    if cell_loglik(theta, u, std::slice::from_ref(&x)) == f64::NEG_INFINITY {
        return Err(Error::OutsideSupport(0));
    }
    let obj = |v: &[f64; 2]| {
        let t = ThetaCell { log_sigma_tilde: v[0], xi: v[1] };
        cell_loglik(t, u, std::slice::from_ref(&x))
    };
    Ok(fd_gradient(obj, &[theta.log_sigma_tilde, theta.xi]))
}

/// Assemble per-day score vectors s_t across all cells. Days with no
/// exceedance anywhere do not appear (their score is the zero vector).
pub fn score_vector_per_day(records: &[ExcessRecord], theta: &[ThetaCell]) -> Result<Vec<DayScore>> {
    let mut by_day: BTreeMap<usize, Vec<(usize, Vector2<f64>)>> = BTreeMap::new();
    for (j, rec) in records.iter().enumerate() {
        let th = theta[j];
        for (&x, &day) in rec.excesses.iter().zip(rec.days.iter()) {
            let g = excess_score(th, rec.u, x).map_err(|_| Error::OutsideSupport(rec.cell_id))?;
            let entries = by_day.entry(day).or_default();
            match entries.iter_mut().find(|(cell, _)| *cell == j) {
                Some((_, acc)) => *acc += g,
                None => entries.push((j, g)),
            }
        }
    }
    Ok(by_day
        .into_iter()
        .map(|(day, entries)| DayScore { day, entries })
        .collect())
}

/// Estimate the adjustment constant k = p / sum of Godambe eigenvalues.
///
/// The sensitivity matrix H is block-diagonal in the per-cell parameters, so
/// the eigenvalue sum reduces to the block sum over cell pairs (j, i) of
/// trace(H_j^-1 J_ji), with J_ji accumulated from the daily score outer
/// products. Cross-cell blocks are what pull k below 1 under spatial
/// dependence; with independent cells only the diagonal blocks survive in
/// expectation and k is near 1.
pub fn estimate_godambe_k(
    records: &[ExcessRecord],
    theta_mle: &[ThetaCell],
    per_cell_information: &[Matrix2<f64>],
) -> Result<AdjustmentEstimate> {
    let d = records.len();
    assert_eq!(theta_mle.len(), d);
    assert_eq!(per_cell_information.len(), d);

    let mut h_inv = vec![None; d];
    let mut skipped_cells = Vec::new();
    for j in 0..d {
        match per_cell_information[j].try_inverse() {
            Some(inv) if inv.iter().all(|v| v.is_finite()) => h_inv[j] = Some(inv),
            _ => skipped_cells.push(records[j].cell_id),
        }
    }
    if !skipped_cells.is_empty() {
        eprintln!(
            "warning: {} cell(s) with singular information excluded from k: {:?}",
            skipped_cells.len(),
            skipped_cells
        );
    }
    let d_used = d - skipped_cells.len();
    if d_used == 0 {
        return Err(Error::SingularInformation(records[0].cell_id));
    }
    let p = 2 * d_used;

    let scores = score_vector_per_day(records, theta_mle)?;

    // deterministic accumulation in day order
    let mut total = 0.0;
    let mut j_diag = vec![Matrix2::<f64>::zeros(); d];
    for day in &scores {
        // S_t summed over usable cells, and H_j^-1 s_{t,j} per active cell
        let mut s_sum = Vector2::zeros();
        for &(j, g) in &day.entries {
            if h_inv[j].is_some() {
                s_sum += g;
            }
        }
        for &(j, g) in &day.entries {
            if let Some(inv) = &h_inv[j] {
                total += s_sum.dot(&(inv * g));
                j_diag[j] += g * g.transpose();
            }
        }
    }

    let per_cell_trace: Vec<f64> = (0..d)
        .map(|j| match &h_inv[j] {
            Some(inv) => (inv * j_diag[j]).trace(),
            None => f64::NAN,
        })
        .collect();

    let raw_k = p as f64 / total;
    let mut clamped = false;
    let k = if raw_k > 0.0 && raw_k <= 1.05 {
        raw_k
    } else {
        clamped = true;
        eprintln!("warning: raw k = {raw_k} outside (0, 1.05]; clamping");
        raw_k.clamp(f64::MIN_POSITIVE, 1.05)
    };
    if k <= 1.0 / d as f64 {
        eprintln!("warning: k = {k} at or below the perfect-dependence floor 1/d");
    }

    Ok(AdjustmentEstimate {
        k,
        p,
        trace_hinv_j: total,
        per_cell_h: per_cell_information.to_vec(),
        per_cell_trace,
        skipped_cells,
        effective_independent_sites: k * d as f64,
        clamped,
    })
}

/// k times the independence log-likelihood over all cells; -inf (flagged by
/// the caller) when any cell's parameters exclude one of its excesses.
pub fn adjusted_loglik(records: &[ExcessRecord], theta: &[ThetaCell], k: f64) -> f64 {
    assert!(k > 0.0);
    let mut total = 0.0;
    for (rec, &th) in records.iter().zip(theta.iter()) {
        let ll = cell_loglik(th, rec.u, &rec.excesses);
        if ll == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        total += ll;
    }
    k * total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{fit_mle, observed_information_theta};
    use crate::gpd::{gpd_quantile, GpdParams};
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(cell_id: u64, excesses: Vec<f64>, days: Vec<usize>, n_total: usize) -> ExcessRecord {
        let lambda_u = excesses.len() as f64 / n_total as f64;
        ExcessRecord { cell_id, u: 10.0, excesses, days, n_total, lambda_u, n_y: 365.25 }
    }

    fn simulate_record(cell_id: u64, n_days: usize, lambda: f64, sigma_u: f64, xi: f64, seed: u64) -> ExcessRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GpdParams { sigma_u, xi };
        let mut excesses = Vec::new();
        let mut days = Vec::new();
        for t in 0..n_days {
            if rng.gen::<f64>() < lambda {
                excesses.push(gpd_quantile(rng.gen::<f64>(), p).unwrap());
                days.push(t);
            }
        }
        record(cell_id, excesses, days, n_days)
    }

    fn mle_setup(records: &[ExcessRecord]) -> (Vec<ThetaCell>, Vec<Matrix2<f64>>) {
        let mut theta = Vec::new();
        let mut info = Vec::new();
        for rec in records {
            let fit = fit_mle(rec).unwrap();
            let th = fit.theta(rec.u);
            info.push(observed_information_theta(th, rec.u, &rec.excesses));
            theta.push(th);
        }
        (theta, info)
    }

    #[test]
    fn day_without_exceedances_is_absent() {
        let rec = record(0, vec![1.0, 2.0], vec![0, 2], 3);
        let theta = vec![ThetaCell { log_sigma_tilde: 0.0, xi: 0.1 }];
        let scores = score_vector_per_day(&[rec], &theta).unwrap();
        let days: Vec<usize> = scores.iter().map(|s| s.day).collect();
        assert_eq!(days, vec![0, 2]);
    }

    #[test]
    fn single_excess_score_is_its_gradient() {
        let rec = record(0, vec![1.5], vec![0], 10);
        let theta = ThetaCell { log_sigma_tilde: 0.3, xi: 0.1 };
        let scores = score_vector_per_day(std::slice::from_ref(&rec), &[theta]).unwrap();
        assert_eq!(scores.len(), 1);
        let g = excess_score(theta, rec.u, 1.5).unwrap();
        assert!((scores[0].entries[0].1 - g).norm() < 1e-14);
    }

    #[test]
    fn scores_sum_to_zero_at_mle() {
        let rec = simulate_record(0, 20_000, 0.05, 2.0, 0.2, 17);
        let (theta, _) = mle_setup(std::slice::from_ref(&rec));
        let scores = score_vector_per_day(std::slice::from_ref(&rec), &theta).unwrap();
        let mut total = Vector2::zeros();
        for s in &scores {
            for &(_, g) in &s.entries {
                total += g;
            }
        }
        let scaled = total.norm() / rec.n_exceed() as f64;
        assert!(scaled < 1e-3, "scaled score norm {scaled}");
    }

    #[test]
    fn adjusted_loglik_scales_linearly() {
        let recs = vec![
            simulate_record(0, 2000, 0.05, 2.0, 0.1, 3),
            simulate_record(1, 2000, 0.05, 2.5, 0.0, 4),
        ];
        let theta = vec![
            ThetaCell { log_sigma_tilde: 0.5, xi: 0.1 },
            ThetaCell { log_sigma_tilde: 0.8, xi: 0.05 },
        ];
        let full = adjusted_loglik(&recs, &theta, 1.0);
        let half = adjusted_loglik(&recs, &theta, 0.5);
        assert!((half - 0.5 * full).abs() < 1e-10);
        assert_eq!(adjusted_loglik(&[], &[], 0.7), 0.0);
    }

    #[test]
    fn adjustment_leaves_maximiser_unchanged() {
        let rec = simulate_record(0, 10_000, 0.05, 2.0, 0.2, 9);
        // maximise over theta with k = 1 and k = 0.4: same argmax
        let argmax = |k: f64| {
            let mut best = (f64::NEG_INFINITY, ThetaCell { log_sigma_tilde: 0.0, xi: 0.0 });
            let mut lst = -0.5;
            while lst < 2.0 {
                let mut xi = -0.3;
                while xi < 0.6 {
                    let th = ThetaCell { log_sigma_tilde: lst, xi };
                    let v = k * cell_loglik(th, rec.u, &rec.excesses);
                    if v > best.0 {
                        best = (v, th);
                    }
                    xi += 0.01;
                }
                lst += 0.01;
            }
            best.1
        };
        let a = argmax(1.0);
        let b = argmax(0.4);
        assert_eq!(a.log_sigma_tilde, b.log_sigma_tilde);
        assert_eq!(a.xi, b.xi);
    }

    #[test]
    fn independent_cells_have_unit_per_cell_trace() {
        let recs: Vec<ExcessRecord> = (0..4)
            .map(|j| simulate_record(j, 80_000, 0.05, 2.0, 0.1, 100 + j))
            .collect();
        let (theta, info) = mle_setup(&recs);
        let est = estimate_godambe_k(&recs, &theta, &info).unwrap();
        for &t in &est.per_cell_trace {
            assert!((0.9..=1.1).contains(&(t / 2.0)), "per-cell trace/2 = {}", t / 2.0);
        }
        assert!(est.k > 0.85 && est.k <= 1.05, "k = {}", est.k);
    }

    #[test]
    fn replicated_cells_collapse_to_one_site() {
        let base = simulate_record(0, 20_000, 0.05, 2.0, 0.1, 55);
        let d = 5;
        let recs: Vec<ExcessRecord> = (0..d)
            .map(|j| {
                let mut r = base.clone();
                r.cell_id = j as u64;
                r
            })
            .collect();
        let (theta, info) = mle_setup(&recs);
        let est = estimate_godambe_k(&recs, &theta, &info).unwrap();
        assert!((est.k - 1.0 / d as f64).abs() < 0.02, "k = {}", est.k);
    }

    #[test]
    fn blockwise_trace_matches_dense() {
        let recs: Vec<ExcessRecord> = (0..3)
            .map(|j| simulate_record(j, 3000, 0.05, 2.0, 0.1, 200 + j))
            .collect();
        let (theta, info) = mle_setup(&recs);
        let est = estimate_godambe_k(&recs, &theta, &info).unwrap();

        // dense oracle: H block-diagonal, J from stacked daily scores; the
        // statistic is the trace of the sum over all 2x2 blocks of H^-1 J
        let d = recs.len();
        let mut h = DMatrix::zeros(2 * d, 2 * d);
        for j in 0..d {
            h.view_mut((2 * j, 2 * j), (2, 2)).copy_from(&info[j]);
        }
        let scores = score_vector_per_day(&recs, &theta).unwrap();
        let mut j_mat = DMatrix::zeros(2 * d, 2 * d);
        for day in &scores {
            let mut s = DMatrix::zeros(2 * d, 1);
            for &(c, g) in &day.entries {
                s[(2 * c, 0)] = g[0];
                s[(2 * c + 1, 0)] = g[1];
            }
            j_mat += &s * s.transpose();
        }
        let m = h.try_inverse().unwrap() * j_mat;
        let mut dense_total = 0.0;
        for j in 0..d {
            for i in 0..d {
                dense_total += m[(2 * j, 2 * i)] + m[(2 * j + 1, 2 * i + 1)];
            }
        }
        assert!(
            (dense_total - est.trace_hinv_j).abs() < 1e-8 * dense_total.abs().max(1.0),
            "dense {dense_total} vs blockwise {}",
            est.trace_hinv_j
        );
    }
}
