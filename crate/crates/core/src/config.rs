//! Run configuration: defaults mirroring the reference workflow, a flat
//! key = value config-file format, and a content hash for artifact headers.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hier::Covariate;
use crate::lattice::Adjacency;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub grid: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub quantile_level: f64,
    pub covariates: Vec<Covariate>,
    pub adjacency: Adjacency,
    pub n_y: f64,

    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_interval: usize,
    pub target_acceptance: f64,

    pub return_periods: Vec<f64>,
    pub threads: usize,

    /// Override the estimated likelihood power (testing / sensitivity runs).
    pub k_override: Option<f64>,
    /// Martins-Stedinger penalty in the single-cell sampler.
    pub penalised_prior: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: None,
            observations: None,
            out_dir: PathBuf::from("out"),
            quantile_level: 0.95,
            covariates: Vec::new(),
            adjacency: Adjacency::Rook,
            n_y: 365.25,
            n_iter: 20_000,
            burn_in: 5_000,
            thin: 1,
            seed: 1,
            adapt_interval: 100,
            target_acceptance: 0.234,
            return_periods: vec![100.0, 1000.0, 10_000.0],
            threads: 0, // 0 = all cores
            k_override: None,
            penalised_prior: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be >= 1".into()));
        }
        if !(0.0 < self.quantile_level && self.quantile_level < 1.0) {
            return Err(Error::Config(format!(
                "quantile_level must lie in (0,1), got {}",
                self.quantile_level
            )));
        }
        if self.return_periods.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config("return periods must be positive".into()));
        }
        if let Some(k) = self.k_override {
            if !(k > 0.0) {
                return Err(Error::Config(format!("k must be positive, got {k}")));
            }
        }
        Ok(())
    }

    /// Apply one key = value assignment (config file line or CLI override).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config(format!("bad value for {what}: {v}"));
        match key.trim() {
            "grid" => self.grid = Some(PathBuf::from(v)),
            "observations" => self.observations = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "quantile_level" => self.quantile_level = v.parse().map_err(|_| bad("quantile_level"))?,
            "covariates" => {
                self.covariates = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        Covariate::parse(s)
                            .ok_or_else(|| Error::Config(format!("unknown covariate: {s}")))
                    })
                    .collect::<Result<_>>()?;
            }
            "adjacency" => {
                self.adjacency = match v.to_ascii_lowercase().as_str() {
                    "rook" => Adjacency::Rook,
                    "queen" => Adjacency::Queen,
                    _ => return Err(bad("adjacency (rook|queen)")),
                }
            }
            "n_y" => self.n_y = v.parse().map_err(|_| bad("n_y"))?,
            "n_iter" => self.n_iter = v.parse().map_err(|_| bad("n_iter"))?,
            "burn_in" => self.burn_in = v.parse().map_err(|_| bad("burn_in"))?,
            "thin" => self.thin = v.parse().map_err(|_| bad("thin"))?,
            "seed" => self.seed = v.parse().map_err(|_| bad("seed"))?,
            "adapt_interval" => self.adapt_interval = v.parse().map_err(|_| bad("adapt_interval"))?,
            "target_acceptance" => {
                self.target_acceptance = v.parse().map_err(|_| bad("target_acceptance"))?
            }
            "return_periods" | "r" => {
                self.return_periods = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().map_err(|_| bad("return_periods")))
                    .collect::<Result<_>>()?;
            }
            "threads" => self.threads = v.parse().map_err(|_| bad("threads"))?,
            "k" => self.k_override = Some(v.parse().map_err(|_| bad("k"))?),
            "penalised_prior" => self.penalised_prior = v.parse().map_err(|_| bad("penalised_prior"))?,
            other => return Err(Error::Config(format!("unknown config key: {other}"))),
        }
        Ok(())
    }

    /// Load assignments from a flat key = value file ('#' comments allowed).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}: line {}: expected key = value", path.display(), lineno + 1))
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Canonical text form, used for hashing and the metadata echo.
    pub fn canonical_string(&self) -> String {
        let covs: Vec<&str> = self.covariates.iter().map(|c| c.name()).collect();
        let rs: Vec<String> = self.return_periods.iter().map(|r| r.to_string()).collect();
        format!(
            "grid={}\nobservations={}\nout_dir={}\nquantile_level={}\ncovariates={}\nadjacency={}\nn_y={}\nn_iter={}\nburn_in={}\nthin={}\nseed={}\nadapt_interval={}\ntarget_acceptance={}\nreturn_periods={}\nthreads={}\nk={}\npenalised_prior={}\n",
            self.grid.as_ref().map_or(String::new(), |p| p.display().to_string()),
            self.observations.as_ref().map_or(String::new(), |p| p.display().to_string()),
            self.out_dir.display(),
            self.quantile_level,
            covs.join(","),
            match self.adjacency {
                Adjacency::Rook => "rook",
                Adjacency::Queen => "queen",
            },
            self.n_y,
            self.n_iter,
            self.burn_in,
            self.thin,
            self.seed,
            self.adapt_interval,
            self.target_acceptance,
            rs.join(","),
            self.threads,
            self.k_override.map_or(String::new(), |k| k.to_string()),
            self.penalised_prior,
        )
    }

    /// First 12 hex characters of the SHA-256 of the canonical config text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    pub fn header(&self) -> String {
        crate::io::artifact_header(&self.hash(), self.seed)
    }
}
