use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use spatgpd::adjust::estimate_godambe_k;
use spatgpd::config::RunConfig;
use spatgpd::diag::{acceptance_summary, dic, effective_sample_size, EssResult};
use spatgpd::error::{Error, Result};
use spatgpd::fit::{fit_mle, observed_information_theta, threshold_stability_scan, ExcessRecord, MleFit};
use spatgpd::hier::{build_design, run_chain, ChainArchive, ChainOptions, ProcessConfig};
use spatgpd::io;
use spatgpd::lattice::{build_lattice, full_grid_coords, Lattice};
use spatgpd::ret::{emit_map, posterior_return_levels, DrawSource, MapFormat};
use spatgpd::single_cell::{
    compare_uncertainty, run_single_cell, SingleCellOptions, SingleCellPrior,
};
use spatgpd::synth::{simulate_dataset, ShockMode, SynthSpec};

#[derive(Parser)]
#[command(name = "spatgpd", version, about = "Spatial hierarchical GPD threshold-excess modelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonArgs {
    /// Flat key = value config file; CLI flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid definition CSV (cell_id,lon,lat,row,col).
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Observation CSV (cell_id,date,value).
    #[arg(long)]
    observations: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Threshold quantile level.
    #[arg(long)]
    quantile: Option<f64>,
    /// Comma-separated covariates (lon,lat).
    #[arg(long)]
    covariates: Option<String>,
    /// Adjacency rule: rook or queen.
    #[arg(long)]
    adjacency: Option<String>,
    #[arg(long)]
    n_iter: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Return periods in years, comma-separated.
    #[arg(long)]
    r: Option<String>,
    /// Worker threads; 1 is the bit-reproducibility reference mode, 0 = all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the estimated likelihood power k.
    #[arg(long)]
    k: Option<f64>,
}

impl CommonArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(p) = &self.grid {
            cfg.grid = Some(p.clone());
        }
        if let Some(p) = &self.observations {
            cfg.observations = Some(p.clone());
        }
        if let Some(p) = &self.out_dir {
            cfg.out_dir = p.clone();
        }
        if let Some(q) = self.quantile {
            cfg.set("quantile_level", &q.to_string())?;
        }
        if let Some(c) = &self.covariates {
            cfg.set("covariates", c)?;
        }
        if let Some(a) = &self.adjacency {
            cfg.set("adjacency", a)?;
        }
        if let Some(v) = self.n_iter {
            cfg.set("n_iter", &v.to_string())?;
        }
        if let Some(v) = self.burn_in {
            cfg.set("burn_in", &v.to_string())?;
        }
        if let Some(v) = self.thin {
            cfg.set("thin", &v.to_string())?;
        }
        if let Some(v) = self.seed {
            cfg.set("seed", &v.to_string())?;
        }
        if let Some(v) = &self.r {
            cfg.set("return_periods", v)?;
        }
        if let Some(v) = self.threads {
            cfg.set("threads", &v.to_string())?;
        }
        if let Some(v) = self.k {
            cfg.set("k", &v.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: grid, daily observations and truth files.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 5)]
        rows: usize,
        #[arg(long, default_value_t = 5)]
        cols: usize,
        #[arg(long, default_value_t = 10_000)]
        days: usize,
        /// Common-shock probability per day (0 = conditionally independent).
        #[arg(long, default_value_t = 0.0)]
        shock_prob: f64,
    },
    /// Threshold stability scan for one cell over a grid of quantile levels.
    ThresholdScan {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        cell: u64,
        /// Comma-separated quantile levels.
        #[arg(long, default_value = "0.90,0.925,0.95,0.975,0.99")]
        levels: String,
    },
    /// Estimate the magnitude-adjustment power k from the score structure.
    KFactor {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Full hierarchical fit: thresholds, MLEs, k, MCMC, archive on disk.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Independent flat-prior per-cell chains.
    SingleCell {
        #[command(flatten)]
        common: CommonArgs,
        /// Apply the Martins-Stedinger shape penalty.
        #[arg(long, default_value_t = false)]
        penalised_prior: bool,
    },
    /// Posterior return-level summaries and map files from a fitted archive.
    ReturnLevels {
        #[command(flatten)]
        common: CommonArgs,
        /// Archive directory produced by `fit` (default: <out_dir>/archive).
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Map output format: csv or geojson.
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Predictive return levels (posterior-averaged exceedance probability).
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// DIC, effective sample size and acceptance summaries of a fitted chain.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        archive: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::BadProbability(_) => 1,
        Error::Data(_)
        | Error::Io(_)
        | Error::EmptySeries
        | Error::NoExcesses
        | Error::DuplicateCellId(_)
        | Error::IsolatedCell(_)
        | Error::TooFewCells(_)
        | Error::TooFewExcesses { .. }
        | Error::MissingMle(_)
        | Error::MismatchedCells => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn init_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

/// Shared front half of the analysis pipeline: lattice + excess records.
fn load_inputs(cfg: &RunConfig) -> Result<(Lattice, Vec<ExcessRecord>)> {
    let grid_path = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::Config("missing required --grid".into()))?;
    let obs_path = cfg
        .observations
        .as_ref()
        .ok_or_else(|| Error::Config("missing required --observations".into()))?;
    let coords = io::read_grid(grid_path)?;
    let lattice = build_lattice(&coords, cfg.adjacency)?;
    let obs = io::read_observations(obs_path)?;
    let order: Vec<u64> = lattice.cells.iter().map(|c| c.cell_id).collect();
    let records = io::records_from_observations(&obs, &order, cfg.quantile_level, cfg.n_y)?;
    Ok((lattice, records))
}

fn fit_all_cells(records: &[ExcessRecord], threads: usize) -> Result<Vec<MleFit>> {
    if threads == 1 {
        records.iter().map(fit_mle).collect()
    } else {
        records.par_iter().map(fit_mle).collect()
    }
}

fn estimate_k(cfg: &RunConfig, records: &[ExcessRecord], fits: &[MleFit]) -> Result<(f64, Option<spatgpd::adjust::AdjustmentEstimate>)> {
    if let Some(k) = cfg.k_override {
        return Ok((k, None));
    }
    let theta: Vec<_> = fits.iter().zip(records).map(|(f, r)| f.theta(r.u)).collect();
    let info: Vec<_> = theta
        .iter()
        .zip(records)
        .map(|(&t, r)| observed_information_theta(t, r.u, &r.excesses))
        .collect();
    let est = estimate_godambe_k(records, &theta, &info)?;
    Ok((est.k, Some(est)))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, rows, cols, days, shock_prob } => {
            let cfg = common.build()?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let coords = full_grid_coords(rows, cols);
            let lattice = build_lattice(&coords, cfg.adjacency)?;
            let mut spec = SynthSpec::default_fixture(rows, cols, days, cfg.seed);
            if shock_prob > 0.0 {
                spec.shock = ShockMode::CommonShock { day_prob: shock_prob };
            }
            let design = build_design(&lattice, &cfg.covariates);
            let data = simulate_dataset(&spec, &lattice, &design)?;
            let header = cfg.header();
            io::write_grid(&cfg.out_dir.join("grid.csv"), &lattice.cells, &header)?;
            io::write_observations_from_synth(
                &cfg.out_dir.join("observations.csv"),
                &data.records,
                days,
                // filler stream disjoint from the generator streams
                cfg.seed ^ 0x9e3779b97f4a7c15,
                &header,
            )?;
            let ids: Vec<u64> = lattice.cells.iter().map(|c| c.cell_id).collect();
            io::write_truth(&cfg.out_dir.join("truth.csv"), &ids, &data.truth, &header)?;
            println!(
                "simulated {rows}x{cols} grid, {days} days/cell -> {}",
                cfg.out_dir.display()
            );
            Ok(())
        }

        Command::ThresholdScan { common, cell, levels } => {
            let cfg = common.build()?;
            init_threads(cfg.threads);
            std::fs::create_dir_all(&cfg.out_dir)?;
            let obs_path = cfg
                .observations
                .as_ref()
                .ok_or_else(|| Error::Config("missing required --observations".into()))?;
            let obs = io::read_observations(obs_path)?;
            let series: Vec<f64> = obs
                .series
                .get(&cell)
                .ok_or_else(|| Error::Data(format!("no observations for cell {cell}")))?
                .iter()
                .map(|&(_, v)| v)
                .collect();
            let levels: Vec<f64> = levels
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad level: {s}")))
                })
                .collect::<Result<_>>()?;
            let rows = threshold_stability_scan(cell, &series, &levels, cfg.n_y);
            let path = cfg.out_dir.join(format!("scan_cell_{cell}.csv"));
            io::write_scan(&path, cell, &rows, &cfg.header())?;
            println!("threshold scan for cell {cell}: {} levels -> {}", rows.len(), path.display());
            Ok(())
        }

        Command::KFactor { common } => {
            let cfg = common.build()?;
            init_threads(cfg.threads);
            std::fs::create_dir_all(&cfg.out_dir)?;
            let (lattice, records) = load_inputs(&cfg)?;
            let fits = fit_all_cells(&records, cfg.threads)?;
            let theta: Vec<_> = fits.iter().zip(&records).map(|(f, r)| f.theta(r.u)).collect();
            let info: Vec<_> = theta
                .iter()
                .zip(&records)
                .map(|(&t, r)| observed_information_theta(t, r.u, &r.excesses))
                .collect();
            let est = estimate_godambe_k(&records, &theta, &info)?;
            let header = cfg.header();
            io::write_k_report(&cfg.out_dir.join("k_report.csv"), &est, &header)?;
            let ids: Vec<u64> = lattice.cells.iter().map(|c| c.cell_id).collect();
            io::write_k_cell_diagnostics(&cfg.out_dir.join("k_cells.csv"), &ids, &est, &header)?;
            println!(
                "k = {:.6} (p = {}, effective independent sites = {:.2})",
                est.k, est.p, est.effective_independent_sites
            );
            Ok(())
        }

        Command::Fit { common } => {
            let cfg = common.build()?;
            init_threads(cfg.threads);
            std::fs::create_dir_all(&cfg.out_dir)?;
            let start = Instant::now();
            let (lattice, records) = load_inputs(&cfg)?;
            let fits = fit_all_cells(&records, cfg.threads)?;
            let (k, est) = estimate_k(&cfg, &records, &fits)?;
            let design = build_design(&lattice, &cfg.covariates);
            let process = ProcessConfig::from_mle(design, &fits, &records)?;
            let mut opts = ChainOptions::new(cfg.n_iter, cfg.burn_in, cfg.thin, cfg.seed);
            opts.adapt_interval = cfg.adapt_interval;
            opts.target_acceptance = cfg.target_acceptance;
            let archive = run_chain(&records, &lattice, &process, k, &opts)?;
            let header = cfg.header();
            io::write_archive(&cfg.out_dir.join("archive"), &archive, &header)?;
            if let Some(est) = est {
                io::write_k_report(&cfg.out_dir.join("k_report.csv"), &est, &header)?;
            }
            write_run_meta(&cfg, &archive)?;
            println!(
                "fitted {} cells, {} stored draws, k = {:.6}, {:.1}s -> {}",
                records.len(),
                archive.n_stored(),
                k,
                start.elapsed().as_secs_f64(),
                cfg.out_dir.display()
            );
            Ok(())
        }

        Command::SingleCell { common, penalised_prior } => {
            let mut cfg = common.build()?;
            if penalised_prior {
                cfg.penalised_prior = true;
            }
            init_threads(cfg.threads);
            std::fs::create_dir_all(&cfg.out_dir)?;
            let (_lattice, records) = load_inputs(&cfg)?;
            let mut opts = SingleCellOptions::new(cfg.n_iter, cfg.burn_in, cfg.thin, cfg.seed);
            opts.adapt_interval = cfg.adapt_interval;
            if cfg.penalised_prior {
                opts.prior = SingleCellPrior::MartinsStedinger;
            }
            let chains: Vec<_> = if cfg.threads == 1 {
                records
                    .iter()
                    .map(|r| run_single_cell(r, &opts))
                    .collect::<Result<_>>()?
            } else {
                records
                    .par_iter()
                    .map(|r| run_single_cell(r, &opts))
                    .collect::<Result<_>>()?
            };
            let header = cfg.header();
            for chain in &chains {
                io::write_single_cell_chain(
                    &cfg.out_dir.join(format!("chain_cell_{}.csv", chain.cell_id)),
                    chain,
                    &header,
                )?;
            }
            io::write_single_cell_summary(
                &cfg.out_dir.join("single_cell_summary.csv"),
                &chains,
                &header,
            )?;
            println!("{} single-cell chains -> {}", chains.len(), cfg.out_dir.display());
            Ok(())
        }

        Command::ReturnLevels { common, archive, format } => {
            let cfg = common.build()?;
            init_threads(cfg.threads);
            std::fs::create_dir_all(&cfg.out_dir)?;
            let format = MapFormat::parse(&format)?;
            let (lattice, records) = load_inputs(&cfg)?;
            let archive_dir = archive.unwrap_or_else(|| cfg.out_dir.join("archive"));
            let arch = io::read_archive(&archive_dir)?;
            let summaries = posterior_return_levels(
                &DrawSource::Hier(&arch),
                &records,
                &cfg.return_periods,
            )?;
            let ext = match format {
                MapFormat::Csv => "csv",
                MapFormat::GeoJson => "geojson",
            };
            let path = cfg.out_dir.join(format!("return_levels.{ext}"));
            let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
            if format == MapFormat::Csv {
                use std::io::Write;
                writeln!(file, "{}", cfg.header())?;
            }
            emit_map(&summaries, &lattice, format, &mut file)?;
            println!("{} summary rows -> {}", summaries.len(), path.display());

            // uncertainty comparison when single-cell chains are available
            if let Ok(single) = io::read_single_cell_chains(&cfg.out_dir) {
                if single.len() == records.len() {
                    let rows =
                        compare_uncertainty(&single, &arch, &records, &cfg.return_periods)?;
                    io::write_uncertainty_table(
                        &cfg.out_dir.join("uncertainty_comparison.csv"),
                        &rows,
                        &cfg.header(),
                    )?;
                }
            }
            Ok(())
        }

        Command::Predict { common, archive } => {
            let cfg = common.build()?;
            init_threads(cfg.threads);
            std::fs::create_dir_all(&cfg.out_dir)?;
            let (_lattice, records) = load_inputs(&cfg)?;
            let archive_dir = archive.unwrap_or_else(|| cfg.out_dir.join("archive"));
            let arch = io::read_archive(&archive_dir)?;
            if arch.cell_ids != records.iter().map(|r| r.cell_id).collect::<Vec<_>>() {
                return Err(Error::MismatchedCells);
            }
            let path = cfg.out_dir.join("predictive_levels.csv");
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
            use std::io::Write;
            writeln!(w, "{}", cfg.header())?;
            writeln!(w, "cell_id,r,predictive_level")?;
            for (j, rec) in records.iter().enumerate() {
                let draws = arch.cell_draws(j);
                for &r in &cfg.return_periods {
                    let level =
                        spatgpd::ret::predictive_return_level(&draws, rec, r, 1e-8)?;
                    writeln!(w, "{},{},{}", rec.cell_id, r, level)?;
                }
            }
            println!(
                "predictive levels for {} cells x {} periods -> {}",
                records.len(),
                cfg.return_periods.len(),
                path.display()
            );
            Ok(())
        }

        Command::Diagnose { common, archive } => {
            let cfg = common.build()?;
            init_threads(cfg.threads);
            std::fs::create_dir_all(&cfg.out_dir)?;
            let (_lattice, records) = load_inputs(&cfg)?;
            let archive_dir = archive.unwrap_or_else(|| cfg.out_dir.join("archive"));
            let arch = io::read_archive(&archive_dir)?;
            let report = dic(&arch, &records, arch.k)?;
            let acc = acceptance_summary(&arch);
            let ess = if arch.log_post.len() >= 100 {
                effective_sample_size(&arch.log_post)?
            } else {
                EssResult { ess: 0.0, degenerate: true }
            };
            let path = cfg.out_dir.join("diagnostics.csv");
            io::write_diagnostics(&path, &report, &acc, &ess, &cfg.header())?;
            println!(
                "DIC = {:.2} (p_D = {:.2}), ESS(log posterior) = {:.0} -> {}",
                report.dic, report.p_d, ess.ess, path.display()
            );
            Ok(())
        }
    }
}

// wall time goes to stdout, not into the file: reruns with an identical
// config must produce byte-identical artifacts
fn write_run_meta(cfg: &RunConfig, archive: &ChainArchive) -> Result<()> {
    use std::io::Write;
    let path = cfg.out_dir.join("run_meta.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(w, "{}", cfg.header())?;
    writeln!(w, "key,value")?;
    for line in cfg.canonical_string().lines() {
        if let Some((k, v)) = line.split_once('=') {
            writeln!(w, "config_{k},{v}")?;
        }
    }
    writeln!(w, "k,{}", archive.k)?;
    writeln!(w, "stored_draws,{}", archive.n_stored())?;
    let mean_acc =
        archive.acceptance_rate.iter().sum::<f64>() / archive.acceptance_rate.len() as f64;
    writeln!(w, "mean_acceptance_rate,{mean_acc}")?;
    Ok(())
}
