//! Independent per-cell Bayesian GPD analysis under a flat prior — the
//! baseline against which the spatial model's uncertainty reduction is
//! measured.

use nalgebra::{Cholesky, Matrix2, Vector2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fit::{fit_mle, observed_information_theta, ExcessRecord, MleFit};
use crate::gpd::{cell_loglik, ThetaCell};
use crate::hier::{adapt_proposals_scalar, PROPOSAL_SCALE, TARGET_ACCEPTANCE};

/// Hard floor below which the per-cell likelihood is too uninformative.
pub const MIN_EXCESSES: usize = 10;
/// Straight rejections tolerated before declaring the chain degenerate.
pub const DEGENERACY_LIMIT: usize = 1000;

/// Prior options for the flat-prior sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingleCellPrior {
    /// Uniform on (log sigma_u, xi) truncated to xi > -1 (pi(theta) ~ 1/sigma_u).
    Flat,
    /// Flat plus the Martins-Stedinger Beta(6,9) penalty on xi (off by default).
    MartinsStedinger,
}

/// Internal sampling coordinates; both target the same flat-prior posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterisation {
    /// (log sigma_u, xi) — the prior-uniform space.
    LogSigmaU,
    /// (log sigma_tilde, xi) with the Jacobian correction folded in.
    LogSigmaTilde,
}

#[derive(Debug, Clone)]
pub struct SingleCellChain {
    pub cell_id: u64,
    pub u: f64,
    pub lambda_u: f64,
    pub n_y: f64,
    /// Stored draws in (log sigma_tilde, xi) regardless of sampling space.
    pub draws: Vec<ThetaCell>,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SingleCellOptions {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub prior: SingleCellPrior,
    pub parameterisation: Parameterisation,
    pub adapt_interval: usize,
}

impl SingleCellOptions {
    pub fn new(n_iter: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        SingleCellOptions {
            n_iter,
            burn_in,
            thin,
            seed,
            prior: SingleCellPrior::Flat,
            parameterisation: Parameterisation::LogSigmaU,
            adapt_interval: 100,
        }
    }
}

/// Log prior density (up to a constant) in the chosen sampling space.
/// Uniform on (log sigma_u, xi); in tilde space this needs the Jacobian
/// d(log sigma_u)/d(log sigma_tilde) = sigma_tilde / sigma_u.
fn log_prior(
    coords: Vector2<f64>,
    u: f64,
    param: Parameterisation,
    prior: SingleCellPrior,
) -> f64 {
    let (xi, log_sigma_u, jac) = match param {
        Parameterisation::LogSigmaU => (coords[1], coords[0], 0.0),
        Parameterisation::LogSigmaTilde => {
            let theta = ThetaCell { log_sigma_tilde: coords[0], xi: coords[1] };
            match theta.sigma_u(u) {
                Some(s) => (coords[1], s.ln(), coords[0] - s.ln()),
                None => return f64::NEG_INFINITY,
            }
        }
    };
    if xi <= -1.0 || !log_sigma_u.is_finite() {
        return f64::NEG_INFINITY;
    }
    let penalty = match prior {
        SingleCellPrior::Flat => 0.0,
        SingleCellPrior::MartinsStedinger => {
            // Beta(6, 9) on (0.5 - xi), supported on xi in (-0.5, 0.5)
            let b = 0.5 - xi;
            if b <= 0.0 || b >= 1.0 {
                return f64::NEG_INFINITY;
            }
            5.0 * b.ln() + 8.0 * (1.0 - b).ln()
        }
    };
    jac + penalty
}

fn coords_to_theta(coords: Vector2<f64>, u: f64, param: Parameterisation) -> Option<ThetaCell> {
    match param {
        Parameterisation::LogSigmaTilde => {
            Some(ThetaCell { log_sigma_tilde: coords[0], xi: coords[1] })
        }
        Parameterisation::LogSigmaU => {
            let sigma_u = coords[0].exp();
            let sigma_tilde = sigma_u - coords[1] * u;
            if sigma_tilde > 0.0 {
                Some(ThetaCell { log_sigma_tilde: sigma_tilde.ln(), xi: coords[1] })
            } else {
                None
            }
        }
    }
}

fn theta_to_coords(theta: ThetaCell, u: f64, param: Parameterisation) -> Option<Vector2<f64>> {
    match param {
        Parameterisation::LogSigmaTilde => Some(Vector2::new(theta.log_sigma_tilde, theta.xi)),
        Parameterisation::LogSigmaU => theta
            .sigma_u(u)
            .map(|s| Vector2::new(s.ln(), theta.xi)),
    }
}

fn log_target(
    coords: Vector2<f64>,
    record: &ExcessRecord,
    param: Parameterisation,
    prior: SingleCellPrior,
) -> f64 {
    let lp = log_prior(coords, record.u, param, prior);
    if lp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    match coords_to_theta(coords, record.u, param) {
        Some(theta) => {
            let ll = cell_loglik(theta, record.u, &record.excesses);
            if ll == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                ll + lp
            }
        }
        None => f64::NEG_INFINITY,
    }
}

/// Adaptive random-walk MH on the GPD posterior of one cell.
pub fn run_single_cell(record: &ExcessRecord, opts: &SingleCellOptions) -> Result<SingleCellChain> {
    if record.n_exceed() < MIN_EXCESSES {
        return Err(Error::TooFewExcesses {
            cell_id: record.cell_id,
            n: record.n_exceed(),
            floor: MIN_EXCESSES,
        });
    }
    if opts.burn_in >= opts.n_iter || opts.thin == 0 {
        return Err(Error::Config("need burn_in < n_iter and thin >= 1".into()));
    }

    let mle: MleFit = fit_mle(record)?;
    let theta0 = mle.theta(record.u);
    let mut cur = theta_to_coords(theta0, record.u, opts.parameterisation)
        .ok_or(Error::OutsideSupport(record.cell_id))?;

    // proposal covariance from the observed information; information in
    // (log sigma_u, xi) differs from tilde space only through a smooth
    // reparameterisation, close enough for a starting proposal either way
    let info = observed_information_theta(theta0, record.u, &record.excesses);
    let base = info
        .try_inverse()
        .filter(|c| c[(0, 0)] > 0.0 && c.determinant() > 0.0)
        .unwrap_or_else(|| Matrix2::new(1e-2, 0.0, 0.0, 1e-3))
        * PROPOSAL_SCALE;

    let mut mult = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(record.cell_id.wrapping_add(1));

    let mut cur_lt = log_target(cur, record, opts.parameterisation, opts.prior);
    if cur_lt == f64::NEG_INFINITY {
        return Err(Error::OutsideSupport(record.cell_id));
    }

    let n_stored = (opts.n_iter - opts.burn_in) / opts.thin;
    let mut draws = Vec::with_capacity(n_stored);
    let mut window_accepts = 0usize;
    let mut post_accepts = 0usize;
    let mut post_iters = 0usize;
    let mut straight_rejections = 0usize;

    for iter in 0..opts.n_iter {
        let cov = base * mult;
        let l = Cholesky::new(cov)
            .ok_or_else(|| Error::BrokenState { iter, what: "proposal not SPD".into() })?
            .l();
        let z = Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        let prop = cur + l * z;
        let uni: f64 = rng.gen();
        let prop_lt = log_target(prop, record, opts.parameterisation, opts.prior);
        let accept =
            prop_lt > f64::NEG_INFINITY && (prop_lt >= cur_lt || uni.ln() < prop_lt - cur_lt);
        if accept {
            cur = prop;
            cur_lt = prop_lt;
            window_accepts += 1;
            straight_rejections = 0;
        } else {
            straight_rejections += 1;
            // a wildly mis-scaled start (e.g. an MLE pinned at the support
            // boundary) can reject for long stretches before the windowed
            // adaptation reacts; shrink hard on streaks during burn-in
            if iter < opts.burn_in && straight_rejections % 100 == 0 {
                mult *= 0.5;
            }
            if straight_rejections >= DEGENERACY_LIMIT {
                return Err(Error::ChainDegenerate(DEGENERACY_LIMIT));
            }
        }

        let in_burn_in = iter < opts.burn_in;
        if in_burn_in && opts.adapt_interval > 0 && (iter + 1) % opts.adapt_interval == 0 {
            mult = adapt_proposals_scalar(
                mult,
                window_accepts as f64 / opts.adapt_interval as f64,
                TARGET_ACCEPTANCE,
            );
            window_accepts = 0;
        }
        if !in_burn_in {
            post_iters += 1;
            if accept {
                post_accepts += 1;
            }
            if (iter - opts.burn_in) % opts.thin == 0 && draws.len() < n_stored {
                let theta = coords_to_theta(cur, record.u, opts.parameterisation)
                    .ok_or_else(|| Error::BrokenState { iter, what: "state left support".into() })?;
                draws.push(theta);
            }
        }
    }

    Ok(SingleCellChain {
        cell_id: record.cell_id,
        u: record.u,
        lambda_u: record.lambda_u,
        n_y: record.n_y,
        draws,
        acceptance_rate: post_accepts as f64 / post_iters.max(1) as f64,
    })
}

/// Per-cell uncertainty comparison row for one return period.
#[derive(Debug, Clone)]
pub struct UncertaintyRow {
    pub cell_id: u64,
    pub r: f64,
    pub sd_single: f64,
    pub sd_hier: f64,
    pub ratio: f64,
}

/// Posterior SDs of the r-year return level under both analyses.
pub fn compare_uncertainty(
    single_chains: &[SingleCellChain],
    hier_archive: &crate::hier::ChainArchive,
    records: &[ExcessRecord],
    r_list: &[f64],
) -> Result<Vec<UncertaintyRow>> {
    use crate::ret::return_level;

    if single_chains.len() != records.len()
        || single_chains
            .iter()
            .zip(records)
            .any(|(c, r)| c.cell_id != r.cell_id)
        || hier_archive.cell_ids != records.iter().map(|r| r.cell_id).collect::<Vec<_>>()
    {
        return Err(Error::MismatchedCells);
    }

    let sd = |levels: &[f64]| -> f64 {
        let n = levels.len() as f64;
        let mean = levels.iter().sum::<f64>() / n;
        (levels.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };

    let mut out = Vec::new();
    for (j, rec) in records.iter().enumerate() {
        for &r in r_list {
            let single_levels: Vec<f64> = single_chains[j]
                .draws
                .iter()
                .filter_map(|&t| return_level(t, rec.u, rec.lambda_u, rec.n_y, r).ok())
                .collect();
            let hier_levels: Vec<f64> = hier_archive
                .theta
                .iter()
                .filter_map(|row| return_level(row[j], rec.u, rec.lambda_u, rec.n_y, r).ok())
                .collect();
            if single_levels.len() < 2 || hier_levels.len() < 2 {
                return Err(Error::AllDrawsInvalid(rec.cell_id));
            }
            let sd_single = sd(&single_levels);
            let sd_hier = sd(&hier_levels);
            out.push(UncertaintyRow {
                cell_id: rec.cell_id,
                r,
                sd_single,
                sd_hier,
                ratio: sd_hier / sd_single,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::tests::simulate_excesses;

    fn record(n: usize, sigma_u: f64, xi: f64, seed: u64) -> ExcessRecord {
        let excesses = simulate_excesses(n, sigma_u, xi, seed);
        let n_total = n * 20;
        ExcessRecord {
            cell_id: 7,
            u: 1.0,
            days: (0..n).map(|i| i * 20).collect(),
            excesses,
            n_total,
            lambda_u: 0.05,
            n_y: 365.25,
        }
    }

    #[test]
    fn posterior_mode_near_mle() {
        let rec = record(5000, 2.0, 0.2, 11);
        let mle = fit_mle(&rec).unwrap();
        let theta_hat = mle.theta(rec.u);
        let cov = mle.observed_information.try_inverse().unwrap();
        let chain = run_single_cell(&rec, &SingleCellOptions::new(8000, 2000, 1, 5)).unwrap();
        let n = chain.draws.len() as f64;
        let mean_lst = chain.draws.iter().map(|t| t.log_sigma_tilde).sum::<f64>() / n;
        let mean_xi = chain.draws.iter().map(|t| t.xi).sum::<f64>() / n;
        assert!((mean_lst - theta_hat.log_sigma_tilde).abs() < 4.0 * cov[(0, 0)].sqrt());
        assert!((mean_xi - theta_hat.xi).abs() < 4.0 * cov[(1, 1)].sqrt());
        assert!(chain.acceptance_rate > 0.1 && chain.acceptance_rate < 0.5);
    }

    #[test]
    fn deterministic_under_seed() {
        let rec = record(500, 1.5, -0.1, 3);
        let opts = SingleCellOptions::new(1000, 200, 2, 9);
        let a = run_single_cell(&rec, &opts).unwrap();
        let b = run_single_cell(&rec, &opts).unwrap();
        assert_eq!(a.draws.len(), 400);
        for (x, y) in a.draws.iter().zip(b.draws.iter()) {
            assert_eq!(x.log_sigma_tilde, y.log_sigma_tilde);
            assert_eq!(x.xi, y.xi);
        }
    }

    #[test]
    fn xi_truncation_respected() {
        let rec = record(80, 1.0, -0.4, 21);
        let chain = run_single_cell(&rec, &SingleCellOptions::new(4000, 1000, 1, 2)).unwrap();
        assert!(chain.draws.iter().all(|t| t.xi > -1.0));
    }

    #[test]
    fn too_few_excesses_rejected() {
        let rec = record(5, 1.0, 0.0, 2);
        let err = run_single_cell(&rec, &SingleCellOptions::new(100, 10, 1, 1)).unwrap_err();
        assert!(matches!(err, Error::TooFewExcesses { n: 5, floor: 10, .. }));
    }

    #[test]
    fn parameterisations_agree() {
        let rec = record(2000, 2.0, 0.1, 17);
        let mut opts = SingleCellOptions::new(12_000, 2000, 1, 4);
        let a = run_single_cell(&rec, &opts).unwrap();
        opts.parameterisation = Parameterisation::LogSigmaTilde;
        opts.seed = 104;
        let b = run_single_cell(&rec, &opts).unwrap();
        // compare posterior means/SDs of the 100-year return level
        let summarize = |chain: &SingleCellChain| {
            let levels: Vec<f64> = chain
                .draws
                .iter()
                .filter_map(|&t| {
                    crate::ret::return_level(t, rec.u, rec.lambda_u, rec.n_y, 100.0).ok()
                })
                .collect();
            let n = levels.len() as f64;
            let mean = levels.iter().sum::<f64>() / n;
            let sd =
                (levels.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            (mean, sd)
        };
        let (ma, sa) = summarize(&a);
        let (mb, sb) = summarize(&b);
        let mc_se = sa / (a.draws.len() as f64).sqrt();
        // chains autocorrelate, so allow a generous multiple of the naive SE
        assert!((ma - mb).abs() < 15.0 * mc_se, "{ma} vs {mb} (se {mc_se})");
        assert!((sa - sb).abs() / sa < 0.25, "{sa} vs {sb}");
    }

    #[test]
    fn martins_stedinger_prior_pulls_toward_bounded_support() {
        let rec = record(60, 1.0, 0.45, 8);
        let mut opts = SingleCellOptions::new(6000, 1500, 1, 6);
        let flat = run_single_cell(&rec, &opts).unwrap();
        opts.prior = SingleCellPrior::MartinsStedinger;
        let pen = run_single_cell(&rec, &opts).unwrap();
        let mean_xi = |c: &SingleCellChain| c.draws.iter().map(|t| t.xi).sum::<f64>() / c.draws.len() as f64;
        assert!(pen.draws.iter().all(|t| t.xi > -0.5 && t.xi < 0.5));
        // Beta(6,9) mode at xi = 0.1 pulls a high-xi posterior down
        assert!(mean_xi(&pen) < mean_xi(&flat));
    }

    #[test]
    fn compare_uncertainty_identical_chains_ratio_one() {
        let rec = record(800, 2.0, 0.1, 5);
        let chain = run_single_cell(&rec, &SingleCellOptions::new(600, 100, 1, 5)).unwrap();
        let archive = crate::hier::ChainArchive {
            cell_ids: vec![rec.cell_id],
            theta: chain.draws.iter().map(|&t| vec![t]).collect(),
            beta: vec![],
            sigma_theta: vec![],
            sigma_phi: vec![],
            phi: vec![],
            accept: vec![],
            log_post: vec![],
            n_iter: 600,
            burn_in: 100,
            thin: 1,
            k: 1.0,
            acceptance_rate: vec![chain.acceptance_rate],
        };
        let rows =
            compare_uncertainty(&[chain], &archive, &[rec], &[100.0, 1000.0]).unwrap();
        assert_eq!(rows.len(), 2);
        for row in rows {
            assert!((row.ratio - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn compare_uncertainty_empty_r_list() {
        let rec = record(800, 2.0, 0.1, 5);
        let chain = run_single_cell(&rec, &SingleCellOptions::new(300, 100, 1, 5)).unwrap();
        let archive = crate::hier::ChainArchive {
            cell_ids: vec![rec.cell_id],
            theta: chain.draws.iter().map(|&t| vec![t]).collect(),
            beta: vec![],
            sigma_theta: vec![],
            sigma_phi: vec![],
            phi: vec![],
            accept: vec![],
            log_post: vec![],
            n_iter: 300,
            burn_in: 100,
            thin: 1,
            k: 1.0,
            acceptance_rate: vec![0.3],
        };
        let rows = compare_uncertainty(&[chain], &archive, &[rec], &[]).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn mismatched_cells_rejected() {
        let rec = record(800, 2.0, 0.1, 5);
        let chain = run_single_cell(&rec, &SingleCellOptions::new(300, 100, 1, 5)).unwrap();
        let archive = crate::hier::ChainArchive {
            cell_ids: vec![99],
            theta: vec![],
            beta: vec![],
            sigma_theta: vec![],
            sigma_phi: vec![],
            phi: vec![],
            accept: vec![],
            log_post: vec![],
            n_iter: 300,
            burn_in: 100,
            thin: 1,
            k: 1.0,
            acceptance_rate: vec![0.3],
        };
        let err = compare_uncertainty(&[chain], &archive, &[rec], &[100.0]).unwrap_err();
        assert!(matches!(err, Error::MismatchedCells));
    }
}
