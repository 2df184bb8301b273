//! Per-cell maximum likelihood fitting of the GPD, threshold selection and
//! threshold-stability diagnostics.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::gpd::{gpd_loglik, GpdParams, ThetaCell};

/// Default minimum number of excesses for an MLE fit.
pub const MLE_FLOOR: usize = 10;
/// Lower bound on the shape: the likelihood is non-regular below xi = -1.
pub const XI_LOWER: f64 = -1.0 + 1e-8;

/// Threshold excesses for one cell, with the day index of each excess.
#[derive(Debug, Clone)]
pub struct ExcessRecord {
    pub cell_id: u64,
    pub u: f64,
    pub excesses: Vec<f64>,
    /// Day index of each excess (parallel to `excesses`).
    pub days: Vec<usize>,
    pub n_total: usize,
    pub lambda_u: f64,
    /// Observations per year (365.25 for daily data).
    pub n_y: f64,
}

impl ExcessRecord {
    pub fn n_exceed(&self) -> usize {
        self.excesses.len()
    }
}

/// MLE fit result for one cell, in (log sigma_u, xi) coordinates.
#[derive(Debug, Clone)]
pub struct MleFit {
    pub params: GpdParams,
    /// Observed information (negative Hessian of the log-likelihood) at the
    /// optimum, in (log sigma_u, xi) coordinates.
    pub observed_information: Matrix2<f64>,
    pub converged: bool,
    pub loglik: f64,
}

impl MleFit {
    pub fn theta(&self, u: f64) -> ThetaCell {
        ThetaCell::from_threshold_params(self.params, u)
    }
}

fn moment_estimates(excesses: &[f64]) -> (f64, f64) {
    let n = excesses.len() as f64;
    let mean = excesses.iter().sum::<f64>() / n;
    let var = excesses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return (mean.max(1e-8), 0.0);
    }
    let r = mean * mean / var;
    let xi = 0.5 * (1.0 - r);
    let sigma = 0.5 * mean * (r + 1.0);
    (sigma.max(1e-8), xi.clamp(-0.9, 0.9))
}

/// Negative log-likelihood over (log sigma_u, xi), +inf off the feasible set.
fn neg_loglik(x: &[f64; 2], excesses: &[f64]) -> f64 {
    let (log_sigma, xi) = (x[0], x[1]);
    if xi <= XI_LOWER || !log_sigma.is_finite() || log_sigma.abs() > 700.0 {
        return f64::INFINITY;
    }
    let p = GpdParams { sigma_u: log_sigma.exp(), xi };
    let ll = gpd_loglik(excesses, p);
    if ll.is_finite() {
        -ll
    } else {
        f64::INFINITY
    }
}

/// Plain Nelder-Mead simplex in two dimensions.
fn nelder_mead<F: Fn(&[f64; 2]) -> f64>(
    f: F,
    start: [f64; 2],
    scale: f64,
    max_iter: usize,
    ftol: f64,
) -> ([f64; 2], f64, bool) {
    let mut simplex = [
        start,
        [start[0] + scale, start[1]],
        [start[0], start[1] + scale.min(0.1)],
    ];
    let mut fv = [f(&simplex[0]), f(&simplex[1]), f(&simplex[2])];

    let mut converged = false;
    for _ in 0..max_iter {
        // sort simplex by objective
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).unwrap_or(std::cmp::Ordering::Equal));
        let sorted: Vec<[f64; 2]> = idx.iter().map(|&i| simplex[i]).collect();
        let sorted_f: Vec<f64> = idx.iter().map(|&i| fv[i]).collect();
        simplex.copy_from_slice(&sorted);
        fv.copy_from_slice(&sorted_f);

        if fv[2].is_finite() && (fv[2] - fv[0]).abs() < ftol * (1.0 + fv[0].abs()) {
            converged = true;
            break;
        }

        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let reflect = [
            centroid[0] + (centroid[0] - simplex[2][0]),
            centroid[1] + (centroid[1] - simplex[2][1]),
        ];
        let fr = f(&reflect);
        if fr < fv[0] {
            let expand = [
                centroid[0] + 2.0 * (centroid[0] - simplex[2][0]),
                centroid[1] + 2.0 * (centroid[1] - simplex[2][1]),
            ];
            let fe = f(&expand);
            if fe < fr {
                simplex[2] = expand;
                fv[2] = fe;
            } else {
                simplex[2] = reflect;
                fv[2] = fr;
            }
        } else if fr < fv[1] {
            simplex[2] = reflect;
            fv[2] = fr;
        } else {
            let contract = [
                centroid[0] + 0.5 * (simplex[2][0] - centroid[0]),
                centroid[1] + 0.5 * (simplex[2][1] - centroid[1]),
            ];
            let fc = f(&contract);
            if fc < fv[2] {
                simplex[2] = contract;
                fv[2] = fc;
            } else {
                // shrink towards the best vertex
                for i in 1..3 {
                    simplex[i] = [
                        simplex[0][0] + 0.5 * (simplex[i][0] - simplex[0][0]),
                        simplex[0][1] + 0.5 * (simplex[i][1] - simplex[0][1]),
                    ];
                    fv[i] = f(&simplex[i]);
                }
            }
        }
    }
    (simplex[0], fv[0], converged)
}

/// Central finite-difference Hessian with relative step 1e-5.
pub fn fd_hessian<F: Fn(&[f64; 2]) -> f64>(f: F, x: &[f64; 2]) -> Matrix2<f64> {
    let h = [1e-5 * x[0].abs().max(1.0), 1e-5 * x[1].abs().max(1.0)];
    let mut out = Matrix2::zeros();
    let f0 = f(x);
    for i in 0..2 {
        let mut xp = *x;
        let mut xm = *x;
        xp[i] += h[i];
        xm[i] -= h[i];
        out[(i, i)] = (f(&xp) - 2.0 * f0 + f(&xm)) / (h[i] * h[i]);
    }
    let (hi, hj) = (h[0], h[1]);
    let eval = |a: f64, b: f64| {
        let y = [x[0] + a * hi, x[1] + b * hj];
        f(&y)
    };
    let cross = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hi * hj);
    out[(0, 1)] = cross;
    out[(1, 0)] = cross;
    out
}

/// Central finite-difference gradient with relative step 1e-6.
pub fn fd_gradient<F: Fn(&[f64; 2]) -> f64>(f: F, x: &[f64; 2]) -> Vector2<f64> {
    let mut g = Vector2::zeros();
    for i in 0..2 {
        let h = 1e-6 * x[i].abs().max(1.0);
        let mut xp = *x;
        let mut xm = *x;
        xp[i] += h;
        xm[i] -= h;
        g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Maximum likelihood fit over (log sigma_u, xi) by Nelder-Mead started from
/// moment estimates. Falls back to the moment estimates (flagged) when the
/// search fails to converge.
pub fn fit_mle(record: &ExcessRecord) -> Result<MleFit> {
    fit_mle_with_floor(record, MLE_FLOOR)
}

pub fn fit_mle_with_floor(record: &ExcessRecord, floor: usize) -> Result<MleFit> {
    let n = record.n_exceed();
    if n < floor {
        return Err(Error::TooFewExcesses { cell_id: record.cell_id, n, floor });
    }
    let (sigma0, xi0) = moment_estimates(&record.excesses);
    let start = [sigma0.ln(), xi0];
    let obj = |x: &[f64; 2]| neg_loglik(x, &record.excesses);

    let (mut best, mut fbest, mut converged) = nelder_mead(&obj, start, 0.2, 500, 1e-12);
    // restart from the incumbent to tighten the optimum
    for _ in 0..2 {
        let (b2, f2, c2) = nelder_mead(&obj, best, 0.02, 500, 1e-12);
        if f2 <= fbest {
            best = b2;
            fbest = f2;
            converged = converged || c2;
        }
    }

    if !fbest.is_finite() {
        // degenerate data: fall back to the moment estimates, flagged
        let params = GpdParams::new(sigma0, xi0)?;
        return Ok(MleFit {
            params,
            observed_information: Matrix2::identity(),
            converged: false,
            loglik: gpd_loglik(&record.excesses, params),
        });
    }

    // gradient check: declare non-convergence when the per-observation
    // scaled gradient norm is off
    let grad = fd_gradient(&obj, &best);
    let scaled = grad.norm() / n as f64;
    if scaled > 1e-4 || best[1] <= XI_LOWER + 1e-6 {
        converged = false;
    }

    let mut params = GpdParams::new(best[0].exp(), best[1])?;
    let mut loglik = -fbest;

    // The latent model parameterises each cell by (log sigma_tilde, xi) with
    // sigma_tilde = sigma_u - xi*u > 0. With few excesses the unconstrained
    // optimum can land outside that set (xi > sigma_u/u); refit against a
    // small feasibility floor so the tilde-space estimate stays finite.
    let floor_tilde = 0.01 * params.sigma_u;
    if params.sigma_u - params.xi * record.u <= floor_tilde {
        let log_floor = floor_tilde.ln();
        let obj_t = |x: &[f64; 2]| {
            if x[0] < log_floor || x[1] <= XI_LOWER {
                return f64::INFINITY;
            }
            let t = ThetaCell { log_sigma_tilde: x[0], xi: x[1] };
            let ll = crate::gpd::cell_loglik(t, record.u, &record.excesses);
            if ll.is_finite() {
                -ll
            } else {
                f64::INFINITY
            }
        };
        let start_t = [log_floor + 0.05, best[1]];
        let (best_t, fbest_t, c_t) = nelder_mead(&obj_t, start_t, 0.1, 500, 1e-12);
        let t = ThetaCell { log_sigma_tilde: best_t[0], xi: best_t[1] };
        params = t.params_at(record.u).ok_or(Error::OutsideSupport(record.cell_id))?;
        loglik = -fbest_t;
        best = [params.sigma_u.ln(), params.xi];
        // boundary solution: the unconstrained gradient need not vanish
        converged = c_t;
    }

    let info = fd_hessian(&obj, &best); // Hessian of -loglik = observed information
    Ok(MleFit {
        params,
        observed_information: info,
        converged,
        loglik,
    })
}

/// Observed information in (log sigma_tilde, xi) coordinates at `theta`,
/// for one cell's excesses above threshold `u`.
pub fn observed_information_theta(theta: ThetaCell, u: f64, excesses: &[f64]) -> Matrix2<f64> {
    let obj = |x: &[f64; 2]| {
        let t = ThetaCell { log_sigma_tilde: x[0], xi: x[1] };
        let ll = crate::gpd::cell_loglik(t, u, excesses);
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    };
    fd_hessian(obj, &[theta.log_sigma_tilde, theta.xi])
}

/// Empirical quantile with type-7 (linear interpolation) convention.
pub fn quantile_type7(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Select the per-cell threshold as the empirical `quantile_level` quantile
/// and assemble the excess record.
pub fn select_threshold(
    cell_id: u64,
    series: &[f64],
    quantile_level: f64,
    n_y: f64,
) -> Result<(f64, ExcessRecord)> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if !(0.0 < quantile_level && quantile_level < 1.0) {
        return Err(Error::BadProbability(quantile_level));
    }
    let mut sorted: Vec<f64> = series.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let u = quantile_type7(&sorted, quantile_level);

    let mut excesses = Vec::new();
    let mut days = Vec::new();
    for (t, &v) in series.iter().enumerate() {
        if v > u {
            excesses.push(v - u);
            days.push(t);
        }
    }
    if excesses.is_empty() {
        return Err(Error::NoExcesses);
    }
    let n_total = series.len();
    let lambda_u = excesses.len() as f64 / n_total as f64;
    Ok((
        u,
        ExcessRecord { cell_id, u, excesses, days, n_total, lambda_u, n_y },
    ))
}

/// One row of the threshold-stability table.
#[derive(Debug, Clone)]
pub struct StabilityRow {
    pub level: f64,
    pub u: f64,
    /// Modified scale sigma* = sigma_u - xi*u (threshold-invariant under the GPD).
    pub sigma_star: f64,
    pub xi: f64,
    pub se_sigma_star: f64,
    pub se_xi: f64,
    pub converged: bool,
}

/// Fit the GPD at each candidate threshold level; plot-ready rows.
/// Standard errors come from the inverse observed information with the delta
/// method for sigma*.
pub fn threshold_stability_scan(
    cell_id: u64,
    series: &[f64],
    levels: &[f64],
    n_y: f64,
) -> Vec<StabilityRow> {
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let row = match select_threshold(cell_id, series, level, n_y)
            .and_then(|(u, rec)| fit_mle(&rec).map(|fit| (u, fit)))
        {
            Ok((u, fit)) => {
                let sigma_u = fit.params.sigma_u;
                let xi = fit.params.xi;
                let sigma_star = sigma_u - xi * u;
                // delta method in (log sigma_u, xi): grad of sigma* is (sigma_u, -u)
                let (se_sigma_star, se_xi) = match fit.observed_information.try_inverse() {
                    Some(cov) => {
                        let g = Vector2::new(sigma_u, -u);
                        let var = (g.transpose() * cov * g)[(0, 0)];
                        (var.max(0.0).sqrt(), cov[(1, 1)].max(0.0).sqrt())
                    }
                    None => (f64::NAN, f64::NAN),
                };
                StabilityRow { level, u, sigma_star, xi, se_sigma_star, se_xi, converged: fit.converged }
            }
            Err(_) => StabilityRow {
                level,
                u: f64::NAN,
                sigma_star: f64::NAN,
                xi: f64::NAN,
                se_sigma_star: f64::NAN,
                se_xi: f64::NAN,
                converged: false,
            },
        };
        rows.push(row);
    }
    rows
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::gpd::gpd_quantile;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn simulate_excesses(n: usize, sigma_u: f64, xi: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GpdParams { sigma_u, xi };
        (0..n)
            .map(|_| gpd_quantile(rng.gen::<f64>(), p).unwrap())
            .collect()
    }

    fn record_from(excesses: Vec<f64>) -> ExcessRecord {
        let n = excesses.len();
        let days: Vec<usize> = (0..n).collect();
        ExcessRecord {
            cell_id: 0,
            u: 0.0,
            excesses,
            days,
            n_total: n * 20,
            lambda_u: 0.05,
            n_y: 365.25,
        }
    }

    #[test]
    fn mle_recovers_truth() {
        let rec = record_from(simulate_excesses(5000, 2.0, 0.2, 42));
        let fit = fit_mle(&rec).unwrap();
        assert!(fit.converged);
        assert!((fit.params.sigma_u - 2.0).abs() < 0.1, "sigma = {}", fit.params.sigma_u);
        assert!((fit.params.xi - 0.2).abs() < 0.1, "xi = {}", fit.params.xi);
    }

    #[test]
    fn mle_exponential_data() {
        let rec = record_from(simulate_excesses(10_000, 1.5, 0.0, 7));
        let fit = fit_mle(&rec).unwrap();
        assert!(fit.params.xi.abs() < 0.05, "xi = {}", fit.params.xi);
    }

    #[test]
    fn mle_constant_data_never_crashes() {
        let rec = record_from(vec![3.0; 50]);
        let fit = fit_mle(&rec).unwrap();
        assert!(!fit.converged || fit.params.xi <= -0.9);
    }

    #[test]
    fn mle_too_few_excesses() {
        let rec = record_from(vec![1.0, 2.0, 3.0]);
        assert!(matches!(fit_mle(&rec), Err(Error::TooFewExcesses { .. })));
    }

    #[test]
    fn mle_gradient_small_at_optimum() {
        let rec = record_from(simulate_excesses(5000, 2.0, 0.2, 11));
        let fit = fit_mle(&rec).unwrap();
        let obj = |x: &[f64; 2]| neg_loglik(x, &rec.excesses);
        let g = fd_gradient(&obj, &[fit.params.sigma_u.ln(), fit.params.xi]);
        assert!(g.norm() / (rec.n_exceed() as f64) < 1e-4);
    }

    #[test]
    fn threshold_on_integer_series() {
        let series: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let (u, rec) = select_threshold(1, &series, 0.95, 365.25).unwrap();
        assert!((u - 95.05).abs() < 1e-10);
        assert_eq!(rec.n_exceed(), 5);
        assert!((rec.lambda_u - 0.05).abs() < 1e-12);
    }

    #[test]
    fn threshold_constant_series_errors() {
        let series = vec![2.0; 100];
        assert!(matches!(select_threshold(1, &series, 0.95, 365.25), Err(Error::NoExcesses)));
    }

    #[test]
    fn stability_scan_single_level_matches_fit() {
        let series = simulate_excesses(4000, 3.0, 0.1, 5);
        let rows = threshold_stability_scan(1, &series, &[0.95], 365.25);
        assert_eq!(rows.len(), 1);
        let (u, rec) = select_threshold(1, &series, 0.95, 365.25).unwrap();
        let fit = fit_mle(&rec).unwrap();
        assert!((rows[0].u - u).abs() < 1e-12);
        assert!((rows[0].xi - fit.params.xi).abs() < 1e-10);
    }

    #[test]
    fn stability_scan_empty_levels() {
        let series = simulate_excesses(1000, 3.0, 0.1, 5);
        assert!(threshold_stability_scan(1, &series, &[], 365.25).is_empty());
    }

    #[test]
    fn stability_scan_gpd_data_is_stable() {
        // GPD data above u=0: sigma* and xi should be flat across levels
        let series = simulate_excesses(20_000, 2.0, 0.15, 99);
        let rows = threshold_stability_scan(1, &series, &[0.5, 0.6, 0.7, 0.8, 0.9], 365.25);
        let base = &rows[0];
        for row in &rows[1..] {
            assert!(row.converged);
            assert!(
                (row.sigma_star - base.sigma_star).abs() < 2.0 * (row.se_sigma_star + base.se_sigma_star),
                "sigma* drifted: {} vs {}",
                row.sigma_star,
                base.sigma_star
            );
            assert!((row.xi - base.xi).abs() < 2.0 * (row.se_xi + base.se_xi));
        }
    }
}
