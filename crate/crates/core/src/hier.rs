//! Hierarchical sampler: Gibbs updates for the regression coefficients, the
//! IAR random effects and both 2x2 covariances, with an adaptive random-walk
//! Metropolis step for each cell's transformed GPD parameters under the
//! magnitude-adjusted likelihood.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fit::{fit_mle, observed_information_theta, ExcessRecord, MleFit};
use crate::gpd::{cell_loglik, ThetaCell};
use crate::lattice::Lattice;

/// Optimal random-walk acceptance target (multivariate scaling result).
pub const TARGET_ACCEPTANCE: f64 = 0.234;
/// Initial proposal covariance scaling: 2.38^2 / dim with dim = 2.
pub const PROPOSAL_SCALE: f64 = 2.38 * 2.38 / 2.0;

/// Covariates that can enter the design matrix, standardized over cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Covariate {
    Lon,
    Lat,
}

impl Covariate {
    pub fn parse(name: &str) -> Option<Covariate> {
        match name.trim().to_ascii_lowercase().as_str() {
            "lon" | "longitude" => Some(Covariate::Lon),
            "lat" | "latitude" => Some(Covariate::Lat),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Covariate::Lon => "lon",
            Covariate::Lat => "lat",
        }
    }
}

/// Design matrix: intercept column of ones, then standardized covariates.
pub fn build_design(lattice: &Lattice, covariates: &[Covariate]) -> DMatrix<f64> {
    let d = lattice.n_cells();
    let q = 1 + covariates.len();
    let mut x = DMatrix::zeros(d, q);
    for j in 0..d {
        x[(j, 0)] = 1.0;
    }
    for (c, cov) in covariates.iter().enumerate() {
        let raw: Vec<f64> = lattice
            .cells
            .iter()
            .map(|cell| match cov {
                Covariate::Lon => cell.lon,
                Covariate::Lat => cell.lat,
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / d as f64;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for j in 0..d {
            x[(j, c + 1)] = (raw[j] - mean) / sd;
        }
    }
    x
}

/// Fixed inputs of the process and prior layers.
#[derive(Debug, Clone)]
pub struct ProcessConfig {
    /// d x q design matrix, column 0 the intercept.
    pub design: DMatrix<f64>,
    /// q x 2 prior mean for the coefficients.
    pub beta0: DMatrix<f64>,
    /// Per-row prior precisions (intercept 0.01, covariates 0.1), applied to
    /// both parameter components.
    pub t_beta: DVector<f64>,
    pub nu_theta: f64,
    pub omega_theta: Matrix2<f64>,
    pub nu_phi: f64,
    pub omega_phi: Matrix2<f64>,
}

impl ProcessConfig {
    /// Empirical-Bayes defaults: intercept prior means from the cell-wise MLE
    /// means, Inverse-Wishart scales from the between-cell spread of the MLEs
    /// (nu = 4, Omega = (nu - 3) * 0.5 * S for theta and half that for phi).
    pub fn from_mle(design: DMatrix<f64>, fits: &[MleFit], records: &[ExcessRecord]) -> Result<Self> {
        let d = records.len();
        let q = design.ncols();
        assert!(d >= 2);
        let theta_hat: Vec<ThetaCell> = fits
            .iter()
            .zip(records.iter())
            .map(|(f, r)| f.theta(r.u))
            .collect();

        let mean0 = theta_hat.iter().map(|t| t.log_sigma_tilde).sum::<f64>() / d as f64;
        let mean1 = theta_hat.iter().map(|t| t.xi).sum::<f64>() / d as f64;
        let mut beta0 = DMatrix::zeros(q, 2);
        beta0[(0, 0)] = mean0;
        beta0[(0, 1)] = mean1;

        let mut t_beta = DVector::from_element(q, 0.1);
        t_beta[0] = 0.01;

        // between-cell covariance of the MLEs
        let mut s = Matrix2::zeros();
        for t in &theta_hat {
            let r = Vector2::new(t.log_sigma_tilde - mean0, t.xi - mean1);
            s += r * r.transpose();
        }
        s /= (d - 1) as f64;
        // keep the scale matrices safely SPD even for near-constant fields
        s[(0, 0)] = s[(0, 0)].max(1e-6);
        s[(1, 1)] = s[(1, 1)].max(1e-6);

        let nu = 4.0;
        let omega_theta = s * (0.5 * (nu - 3.0));
        let omega_phi = omega_theta * 0.5;

        Ok(ProcessConfig {
            design,
            beta0,
            t_beta,
            nu_theta: nu,
            omega_theta,
            nu_phi: nu,
            omega_phi,
        })
    }

    pub fn n_coef(&self) -> usize {
        self.design.ncols()
    }
}

/// Full sampler state.
#[derive(Debug, Clone)]
pub struct HierState {
    pub theta: Vec<ThetaCell>,
    /// q x 2 regression coefficients.
    pub beta: DMatrix<f64>,
    pub phi: Vec<Vector2<f64>>,
    pub sigma_theta: Matrix2<f64>,
    pub sigma_phi: Matrix2<f64>,
    /// Per-cell proposal covariance before the scalar multiplier.
    pub proposal_base: Vec<Matrix2<f64>>,
    /// Per-cell adaptive multipliers.
    pub proposal_mult: Vec<f64>,
    /// Cached per-cell data log-likelihood at the current theta.
    cell_loglik: Vec<f64>,
}

impl HierState {
    /// Assemble a state from explicit components, with identity proposals
    /// and the likelihood cache computed from `records`.
    pub fn from_parts(
        theta: Vec<ThetaCell>,
        beta: DMatrix<f64>,
        phi: Vec<Vector2<f64>>,
        sigma_theta: Matrix2<f64>,
        sigma_phi: Matrix2<f64>,
        records: &[ExcessRecord],
    ) -> Self {
        let d = theta.len();
        assert_eq!(records.len(), d);
        let cell_ll = records
            .iter()
            .zip(theta.iter())
            .map(|(r, &t)| cell_loglik(t, r.u, &r.excesses))
            .collect();
        HierState {
            theta,
            beta,
            phi,
            sigma_theta,
            sigma_phi,
            proposal_base: vec![Matrix2::identity(); d],
            proposal_mult: vec![1.0; d],
            cell_loglik: cell_ll,
        }
    }

    /// Process-layer mean X_j beta + phi_j for cell j.
    pub fn process_mean(&self, config: &ProcessConfig, j: usize) -> Vector2<f64> {
        let q = config.n_coef();
        let mut m = self.phi[j];
        for c in 0..q {
            m += config.design[(j, c)] * Vector2::new(self.beta[(c, 0)], self.beta[(c, 1)]);
        }
        m
    }
}

/// Chain schedule and switches.
#[derive(Debug, Clone)]
pub struct ChainOptions {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_interval: usize,
    pub target_acceptance: f64,
    /// Store phi draws every `phi_thin` stored iterations (1 = every one).
    pub phi_thin: usize,
    // block switches, used by degenerate-model tests
    pub update_theta: bool,
    pub update_beta: bool,
    pub update_phi: bool,
    pub update_sigma_theta: bool,
    pub update_sigma_phi: bool,
}

impl ChainOptions {
    pub fn new(n_iter: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        ChainOptions {
            n_iter,
            burn_in,
            thin,
            seed,
            adapt_interval: 100,
            target_acceptance: TARGET_ACCEPTANCE,
            phi_thin: 1,
            update_theta: true,
            update_beta: true,
            update_phi: true,
            update_sigma_theta: true,
            update_sigma_phi: true,
        }
    }
}

/// Stored post-burn-in draws.
#[derive(Debug, Clone)]
pub struct ChainArchive {
    pub cell_ids: Vec<u64>,
    /// stored-iteration-major: theta[s][j].
    pub theta: Vec<Vec<ThetaCell>>,
    /// q*2 flattened row-major (coef, component).
    pub beta: Vec<Vec<f64>>,
    /// (s11, s12, s22) of Sigma_theta.
    pub sigma_theta: Vec<[f64; 3]>,
    pub sigma_phi: Vec<[f64; 3]>,
    /// phi draws, thinned by `phi_thin` on top of the global thin.
    pub phi: Vec<Vec<Vector2<f64>>>,
    /// Per stored iteration, per cell: was the MH proposal accepted.
    pub accept: Vec<Vec<bool>>,
    pub log_post: Vec<f64>,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub k: f64,
    /// Post-burn-in acceptance fraction per cell.
    pub acceptance_rate: Vec<f64>,
}

impl ChainArchive {
    pub fn n_stored(&self) -> usize {
        self.theta.len()
    }

    pub fn cell_index(&self, cell_id: u64) -> Option<usize> {
        self.cell_ids.iter().position(|&id| id == cell_id)
    }

    /// Draws of one cell's theta across stored iterations.
    pub fn cell_draws(&self, j: usize) -> Vec<ThetaCell> {
        self.theta.iter().map(|row| row[j]).collect()
    }

    /// Posterior mean theta per cell.
    pub fn posterior_mean_theta(&self) -> Vec<ThetaCell> {
        let d = self.cell_ids.len();
        let n = self.n_stored() as f64;
        (0..d)
            .map(|j| {
                let mut a = 0.0;
                let mut b = 0.0;
                for row in &self.theta {
                    a += row[j].log_sigma_tilde;
                    b += row[j].xi;
                }
                ThetaCell { log_sigma_tilde: a / n, xi: b / n }
            })
            .collect()
    }
}

/// Initial state from the cell-wise MLE fits.
pub fn init_state(
    records: &[ExcessRecord],
    fits: &[MleFit],
    config: &ProcessConfig,
) -> Result<HierState> {
    let d = records.len();
    if fits.len() != d {
        return Err(Error::MissingMle(records[fits.len().min(d - 1)].cell_id));
    }
    let q = config.n_coef();

    let theta: Vec<ThetaCell> = fits.iter().zip(records).map(|(f, r)| f.theta(r.u)).collect();

    let mut beta = DMatrix::zeros(q, 2);
    beta[(0, 0)] = theta.iter().map(|t| t.log_sigma_tilde).sum::<f64>() / d as f64;
    beta[(0, 1)] = theta.iter().map(|t| t.xi).sum::<f64>() / d as f64;

    let sigma_theta = config.omega_theta / (config.nu_theta - 3.0);
    let sigma_phi = config.omega_phi / (config.nu_phi - 3.0);

    let mut proposal_base = Vec::with_capacity(d);
    for (j, rec) in records.iter().enumerate() {
        let info = observed_information_theta(theta[j], rec.u, &rec.excesses);
        let cov = info
            .try_inverse()
            .filter(|c| c[(0, 0)] > 0.0 && c[(1, 1)] > 0.0 && c.determinant() > 0.0)
            .unwrap_or_else(|| Matrix2::new(1e-2, 0.0, 0.0, 1e-3));
        proposal_base.push(cov * PROPOSAL_SCALE);
    }

    let cell_ll: Vec<f64> = records
        .iter()
        .zip(theta.iter())
        .map(|(r, &t)| cell_loglik(t, r.u, &r.excesses))
        .collect();

    Ok(HierState {
        theta,
        beta,
        phi: vec![Vector2::zeros(); d],
        sigma_theta,
        sigma_phi,
        proposal_base,
        proposal_mult: vec![1.0; d],
        cell_loglik: cell_ll,
    })
}

fn chol2(m: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    Cholesky::new(*m).map(|c| c.l())
}

fn precision2(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    m.try_inverse()
        .filter(|p| p[(0, 0)] > 0.0 && p.determinant() > 0.0)
        .ok_or_else(|| Error::BrokenState { iter: 0, what: "singular 2x2 covariance".into() })
}

fn draw_normal2(mean: Vector2<f64>, chol_l: &Matrix2<f64>, rng: &mut impl Rng) -> Vector2<f64> {
    let z = Vector2::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    mean + chol_l * z
}

/// Gibbs draw of the regression coefficients from their Gaussian conditional,
/// realised on the stacked vector (column 0 coefficients, then column 1).
pub fn gibbs_beta(state: &mut HierState, config: &ProcessConfig, rng: &mut impl Rng) -> Result<()> {
    let d = state.theta.len();
    let q = config.n_coef();
    let t_theta = precision2(&state.sigma_theta)?;

    // precision: diag(T_beta) + kron(T_theta, X'X)
    let xtx = config.design.transpose() * &config.design;
    let mut prec = DMatrix::zeros(2 * q, 2 * q);
    for a in 0..2 {
        for b in 0..2 {
            for r in 0..q {
                for c in 0..q {
                    prec[(a * q + r, b * q + c)] = t_theta[(a, b)] * xtx[(r, c)];
                }
            }
        }
    }
    for r in 0..q {
        prec[(r, r)] += config.t_beta[r];
        prec[(q + r, q + r)] += config.t_beta[r];
    }

    let mut rhs = DVector::zeros(2 * q);
    for r in 0..q {
        rhs[r] = config.t_beta[r] * config.beta0[(r, 0)];
        rhs[q + r] = config.t_beta[r] * config.beta0[(r, 1)];
    }
    for j in 0..d {
        let resid = Vector2::new(state.theta[j].log_sigma_tilde, state.theta[j].xi) - state.phi[j];
        let w = t_theta * resid;
        for r in 0..q {
            rhs[r] += config.design[(j, r)] * w[0];
            rhs[q + r] += config.design[(j, r)] * w[1];
        }
    }

    let chol = Cholesky::new(prec.clone())
        .ok_or_else(|| Error::BrokenState { iter: 0, what: "non-SPD beta conditional".into() })?;
    let mean = chol.solve(&rhs);
    // draw: mean + U^-1 z with prec = U'U (upper-triangular solve against the
    // Cholesky factor of the precision)
    let z = DVector::from_fn(2 * q, |_, _| StandardNormal.sample(rng));
    let lt = chol.l().transpose();
    let draw = mean
        + lt.solve_upper_triangular(&z)
            .ok_or_else(|| Error::BrokenState { iter: 0, what: "triangular solve failed".into() })?;

    for r in 0..q {
        state.beta[(r, 0)] = draw[r];
        state.beta[(r, 1)] = draw[q + r];
    }
    Ok(())
}

/// Sequential-sweep Gibbs update of the random effects, then per-component
/// centering within each connected component.
pub fn gibbs_phi(
    state: &mut HierState,
    lattice: &Lattice,
    config: &ProcessConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let t_theta = precision2(&state.sigma_theta)?;
    let t_phi = precision2(&state.sigma_phi)?;
    let q = config.n_coef();

    for j in 0..lattice.n_cells() {
        let m_j = lattice.neighbor_counts[j] as f64;
        let prec = t_phi * m_j + t_theta;
        let v = prec
            .try_inverse()
            .ok_or_else(|| Error::BrokenState { iter: 0, what: "singular phi conditional".into() })?;

        let mut xb = Vector2::zeros();
        for c in 0..q {
            xb += config.design[(j, c)] * Vector2::new(state.beta[(c, 0)], state.beta[(c, 1)]);
        }
        let resid = Vector2::new(state.theta[j].log_sigma_tilde, state.theta[j].xi) - xb;

        let mut nb_sum = Vector2::zeros();
        for &i in &lattice.neighbor_sets[j] {
            nb_sum += state.phi[i];
        }

        let mean = v * (t_theta * resid + t_phi * nb_sum);
        let l = chol2(&v)
            .ok_or_else(|| Error::BrokenState { iter: 0, what: "non-SPD phi conditional".into() })?;
        state.phi[j] = draw_normal2(mean, &l, rng);
    }

    center_phi(&mut state.phi, lattice);
    Ok(())
}

/// Subtract the component-wise mean within each connected component.
pub fn center_phi(phi: &mut [Vector2<f64>], lattice: &Lattice) {
    for comp in &lattice.components {
        let mut mean = Vector2::zeros();
        for &j in comp {
            mean += phi[j];
        }
        mean /= comp.len() as f64;
        for &j in comp {
            phi[j] -= mean;
        }
    }
}

/// Inverse-Wishart draw via the Bartlett decomposition of the matching
/// Wishart: Sigma = (M M')^-1 with M = chol(scale^-1) * A.
pub fn draw_inverse_wishart(
    nu: f64,
    scale: &Matrix2<f64>,
    rng: &mut impl Rng,
) -> Result<Matrix2<f64>> {
    let scale_inv = scale
        .try_inverse()
        .ok_or_else(|| Error::BrokenState { iter: 0, what: "singular IW scale".into() })?;
    let l = chol2(&scale_inv)
        .ok_or_else(|| Error::BrokenState { iter: 0, what: "non-SPD IW scale".into() })?;
    let c1: f64 = ChiSquared::new(nu).expect("nu > 0").sample(rng);
    let c2: f64 = ChiSquared::new(nu - 1.0).expect("nu > 1").sample(rng);
    let n: f64 = StandardNormal.sample(rng);
    let a = Matrix2::new(c1.sqrt(), 0.0, n, c2.sqrt());
    let m = l * a;
    let w = m * m.transpose();
    w.try_inverse()
        .ok_or_else(|| Error::BrokenState { iter: 0, what: "singular Wishart draw".into() })
}

/// Gibbs update of Sigma_theta from IW(nu + d, Omega + R'R) with
/// R = theta - phi - X beta.
pub fn gibbs_sigma_theta(
    state: &mut HierState,
    config: &ProcessConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = state.theta.len();
    let mut scale = config.omega_theta;
    for j in 0..d {
        let r = Vector2::new(state.theta[j].log_sigma_tilde, state.theta[j].xi)
            - state.process_mean(config, j);
        scale += r * r.transpose();
    }
    state.sigma_theta = draw_inverse_wishart(config.nu_theta + d as f64, &scale, rng)?;
    Ok(())
}

/// Gibbs update of Sigma_phi from IW(nu + d, Omega + phi' W phi), with the
/// quadratic form accumulated over adjacent pairs.
pub fn gibbs_sigma_phi(
    state: &mut HierState,
    lattice: &Lattice,
    config: &ProcessConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let scale = config.omega_phi + phi_quadratic_form(&state.phi, lattice);
    state.sigma_phi = draw_inverse_wishart(config.nu_phi + lattice.n_cells() as f64, &scale, rng)?;
    Ok(())
}

/// phi' W phi as a 2x2 matrix, via the pairwise-difference identity.
pub fn phi_quadratic_form(phi: &[Vector2<f64>], lattice: &Lattice) -> Matrix2<f64> {
    let mut out = Matrix2::zeros();
    for i in 0..lattice.n_cells() {
        for &j in &lattice.neighbor_sets[i] {
            if j > i {
                let diff = phi[i] - phi[j];
                out += diff * diff.transpose();
            }
        }
    }
    out
}

/// One random-walk Metropolis sweep over all cells. Returns per-cell
/// acceptance indicators.
pub fn mh_theta(
    state: &mut HierState,
    records: &[ExcessRecord],
    config: &ProcessConfig,
    k: f64,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<bool>> {
    let d = records.len();
    let t_theta = precision2(&state.sigma_theta)?;
    let mut accepted = vec![false; d];

    for j in 0..d {
        let rng = &mut rngs[j];
        let cov = state.proposal_base[j] * state.proposal_mult[j];
        let l = match chol2(&cov) {
            Some(l) => l,
            None => continue, // degenerate proposal, treat as rejection
        };
        let cur = Vector2::new(state.theta[j].log_sigma_tilde, state.theta[j].xi);
        let prop_v = draw_normal2(cur, &l, rng);
        let prop = ThetaCell { log_sigma_tilde: prop_v[0], xi: prop_v[1] };

        let ll_prop = cell_loglik(prop, records[j].u, &records[j].excesses);
        // draw the accept uniform unconditionally to keep the per-cell
        // stream aligned whether or not the proposal is feasible
        let uni: f64 = rng.gen();
        if ll_prop == f64::NEG_INFINITY {
            continue;
        }
        let mean = state.process_mean(config, j);
        let dc = cur - mean;
        let dp = prop_v - mean;
        let log_prior_ratio =
            -0.5 * ((dp.transpose() * t_theta * dp)[(0, 0)] - (dc.transpose() * t_theta * dc)[(0, 0)]);
        let log_ratio = k * (ll_prop - state.cell_loglik[j]) + log_prior_ratio;

        if log_ratio >= 0.0 || uni.ln() < log_ratio {
            state.theta[j] = prop;
            state.cell_loglik[j] = ll_prop;
            accepted[j] = true;
        }
    }
    Ok(accepted)
}

/// Single-multiplier version of the adaptation rule, shared with the
/// per-cell flat-prior sampler.
pub fn adapt_proposals_scalar(mult: f64, rate: f64, target: f64) -> f64 {
    mult * (0.05 * (rate - target)).exp()
}

/// Burn-in proposal adaptation: every window, nudge the per-cell multiplier
/// towards the target acceptance rate and reset the window counters.
pub fn adapt_proposals(
    state: &mut HierState,
    window_accepts: &mut [usize],
    window_len: usize,
    target: f64,
) {
    for j in 0..state.proposal_mult.len() {
        let rate = window_accepts[j] as f64 / window_len as f64;
        state.proposal_mult[j] *= (0.05 * (rate - target)).exp();
        window_accepts[j] = 0;
    }
}

/// Run the full chain: MH sweep, then the four Gibbs blocks, adaptation
/// during burn-in only, archive afterwards. Deterministic given the seed.
pub fn run_chain(
    records: &[ExcessRecord],
    lattice: &Lattice,
    config: &ProcessConfig,
    k: f64,
    opts: &ChainOptions,
) -> Result<ChainArchive> {
    let d = records.len();
    assert_eq!(lattice.n_cells(), d);
    let fits: Vec<MleFit> = records.iter().map(fit_mle).collect::<Result<_>>()?;
    let state = init_state(records, &fits, config)?;
    run_chain_from(state, records, lattice, config, k, opts)
}

/// As `run_chain` but starting from a caller-prepared state (used by the
/// degenerate-model conformance tests).
pub fn run_chain_from(
    mut state: HierState,
    records: &[ExcessRecord],
    lattice: &Lattice,
    config: &ProcessConfig,
    k: f64,
    opts: &ChainOptions,
) -> Result<ChainArchive> {
    let d = records.len();
    if opts.burn_in >= opts.n_iter {
        return Err(Error::Config("burn_in must be smaller than n_iter".into()));
    }

    // stream 0: Gibbs blocks; streams 1..=d: per-cell MH proposals
    let mut gibbs_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cell_rngs: Vec<ChaCha8Rng> = (0..d)
        .map(|j| {
            let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
            r.set_stream(1 + j as u64);
            r
        })
        .collect();

    let n_stored = (opts.n_iter - opts.burn_in) / opts.thin;
    let mut archive = ChainArchive {
        cell_ids: records.iter().map(|r| r.cell_id).collect(),
        theta: Vec::with_capacity(n_stored),
        beta: Vec::with_capacity(n_stored),
        sigma_theta: Vec::with_capacity(n_stored),
        sigma_phi: Vec::with_capacity(n_stored),
        phi: Vec::new(),
        accept: Vec::with_capacity(n_stored),
        log_post: Vec::with_capacity(n_stored),
        n_iter: opts.n_iter,
        burn_in: opts.burn_in,
        thin: opts.thin,
        k,
        acceptance_rate: vec![0.0; d],
    };

    let mut window_accepts = vec![0usize; d];
    let mut post_accepts = vec![0usize; d];
    let mut post_iters = 0usize;

    for iter in 0..opts.n_iter {
        let broken = |what: &str| Error::BrokenState { iter, what: what.to_string() };

        let accepted = if opts.update_theta {
            mh_theta(&mut state, records, config, k, &mut cell_rngs)
                .map_err(|e| match e {
                    Error::BrokenState { what, .. } => broken(&what),
                    other => other,
                })?
        } else {
            vec![false; d]
        };
        if opts.update_beta {
            gibbs_beta(&mut state, config, &mut gibbs_rng)
                .map_err(|e| match e {
                    Error::BrokenState { what, .. } => broken(&what),
                    other => other,
                })?;
        }
        if opts.update_phi {
            gibbs_phi(&mut state, lattice, config, &mut gibbs_rng)
                .map_err(|e| match e {
                    Error::BrokenState { what, .. } => broken(&what),
                    other => other,
                })?;
        }
        if opts.update_sigma_theta {
            gibbs_sigma_theta(&mut state, config, &mut gibbs_rng)
                .map_err(|e| match e {
                    Error::BrokenState { what, .. } => broken(&what),
                    other => other,
                })?;
        }
        if opts.update_sigma_phi {
            gibbs_sigma_phi(&mut state, lattice, config, &mut gibbs_rng)
                .map_err(|e| match e {
                    Error::BrokenState { what, .. } => broken(&what),
                    other => other,
                })?;
        }

        // state invariants
        for comp in &lattice.components {
            let mut s = Vector2::zeros();
            for &j in comp {
                s += state.phi[j];
            }
            if s[0].abs() >= 1e-10 || s[1].abs() >= 1e-10 {
                return Err(broken("phi centering violated"));
            }
        }
        if chol2(&state.sigma_theta).is_none() || chol2(&state.sigma_phi).is_none() {
            return Err(broken("covariance lost positive definiteness"));
        }

        for j in 0..d {
            if accepted[j] {
                window_accepts[j] += 1;
            }
        }

        let in_burn_in = iter < opts.burn_in;
        if opts.update_theta
            && in_burn_in
            && opts.adapt_interval > 0
            && (iter + 1) % opts.adapt_interval == 0
        {
            adapt_proposals(
                &mut state,
                &mut window_accepts,
                opts.adapt_interval,
                opts.target_acceptance,
            );
        }

        if !in_burn_in {
            post_iters += 1;
            for j in 0..d {
                if accepted[j] {
                    post_accepts[j] += 1;
                }
            }
            if (iter - opts.burn_in) % opts.thin == 0 && archive.theta.len() < n_stored {
                archive.theta.push(state.theta.clone());
                let mut brow = Vec::with_capacity(2 * config.n_coef());
                for r in 0..config.n_coef() {
                    brow.push(state.beta[(r, 0)]);
                    brow.push(state.beta[(r, 1)]);
                }
                archive.beta.push(brow);
                archive.sigma_theta.push([
                    state.sigma_theta[(0, 0)],
                    state.sigma_theta[(0, 1)],
                    state.sigma_theta[(1, 1)],
                ]);
                archive.sigma_phi.push([
                    state.sigma_phi[(0, 0)],
                    state.sigma_phi[(0, 1)],
                    state.sigma_phi[(1, 1)],
                ]);
                if (archive.theta.len() - 1) % opts.phi_thin == 0 {
                    archive.phi.push(state.phi.clone());
                }
                archive.accept.push(accepted.clone());

                let mut lp = k * state.cell_loglik.iter().sum::<f64>();
                let t_theta = precision2(&state.sigma_theta)?;
                let logdet = state.sigma_theta.determinant().ln();
                for j in 0..d {
                    let r = Vector2::new(state.theta[j].log_sigma_tilde, state.theta[j].xi)
                        - state.process_mean(config, j);
                    lp += -0.5 * (r.transpose() * t_theta * r)[(0, 0)]
                        - 0.5 * logdet
                        - std::f64::consts::LN_2
                        - std::f64::consts::PI.ln();
                }
                // IAR improper prior contribution for phi
                let qf = phi_quadratic_form(&state.phi, lattice);
                let t_phi = precision2(&state.sigma_phi)?;
                lp += -0.5 * (t_phi * qf).trace();
                archive.log_post.push(lp);
            }
        }
    }

    for j in 0..d {
        archive.acceptance_rate[j] = post_accepts[j] as f64 / post_iters.max(1) as f64;
    }
    Ok(archive)
}
