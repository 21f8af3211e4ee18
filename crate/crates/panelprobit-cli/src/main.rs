//! Command-line front end: simulate panels, fit chains by MCMC, and report
//! posterior summaries, correlations, marginal predictions, and diagnostics.
//!
//! Exit codes: 0 success, 2 validation or input error, 3 numerical failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use panelprobit::analysis::{
    correlation_decompositions, intra_cluster_correlations, predicted_marginal_probabilities,
    summarize_functional, tetrachoric_correlation, FunctionalSummary, TetrachoricEstimate,
};
use panelprobit::data::{CoupleClusterIndex, PanelDataset};
use panelprobit::diagnostics::{summarize, PosteriorSummary};
use panelprobit::sampler::{
    run_chains, ActiveLevels, ChainStore, FitData, ModelSpec, ParamLayout, ParameterState,
};
use panelprobit::simulate::{simulate_dataset, SimulationScenario};
use panelprobit::{CorrVector, CovMatrix, Error, Result};

use nalgebra::DMatrix;

/// Writes a line to stdout, swallowing write failures: a consumer such as
/// `head` may close the pipe early, and that must not become a panic.
macro_rules! say {
    () => {{
        use ::std::io::Write as _;
        let _ = writeln!(::std::io::stdout());
    }};
    ($($arg:tt)+) => {{
        use ::std::io::Write as _;
        let _ = writeln!(::std::io::stdout(), $($arg)+);
    }};
}

/// Like [`say!`] without the trailing newline.
macro_rules! say_raw {
    ($($arg:tt)+) => {{
        use ::std::io::Write as _;
        let _ = write!(::std::io::stdout(), $($arg)+);
    }};
}

#[derive(Parser)]
#[command(
    name = "panelprobit",
    version,
    about = "Multivariate random-effects probit models for longitudinal dyadic panels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel plus a truth sidecar from a scenario config
    Simulate(SimulateArgs),
    /// Fit the model by Gibbs/Metropolis sampling; writes chain files and a manifest
    Fit(FitArgs),
    /// Convergence diagnostics across two or more chains
    Diagnose(DiagnoseArgs),
    /// Posterior summary table from one or more chains
    Summarize(SummarizeArgs),
    /// Adjusted cross-outcome correlations with their level decomposition
    Correlations(CorrelationsArgs),
    /// Average predicted outcome probabilities at fixed covariate values
    PredictMarginals(PredictArgs),
    /// Unadjusted pairwise tetrachoric correlations of the raw outcomes
    Tetrachoric(TetrachoricArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config with [scenario] and [truth] sections
    #[arg(long)]
    config: PathBuf,
    /// Output directory for data.csv and truth.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Panel CSV (individual_id,wave,partner_id,y_*...,x_*...)
    #[arg(long)]
    data: PathBuf,
    /// Model/sampler config with [model] and [sampler] sections
    #[arg(long)]
    config: PathBuf,
    /// Output directory for chain_<i>.csv and manifest.txt
    #[arg(long)]
    out: PathBuf,
    /// Override the configured chain count
    #[arg(long)]
    chains: Option<usize>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for within-chain parallelism
    #[arg(long)]
    threads: Option<usize>,
    /// Override the configured iteration count
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the configured burn-in
    #[arg(long = "burn-in")]
    burn_in: Option<usize>,
    /// Override the configured thinning interval
    #[arg(long)]
    thin: Option<usize>,
    /// PSRF above this is noted in the manifest as a warning
    #[arg(long, default_value_t = 1.1)]
    psrf_threshold: f64,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Directory holding chain_<i>.csv files
    #[arg(long)]
    chains: PathBuf,
    /// PSRF warning threshold
    #[arg(long, default_value_t = 1.1)]
    psrf_threshold: f64,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Directory holding chain_<i>.csv files
    #[arg(long)]
    chains: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Two,
    Three,
}

#[derive(Args)]
struct CorrelationsArgs {
    /// Directory holding chain_<i>.csv files
    #[arg(long)]
    chains: PathBuf,
    /// Random-effect structure the chains were fit with
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Panel CSV; when given, the unadjusted tetrachoric column is filled
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory holding chain_<i>.csv files
    #[arg(long)]
    chains: PathBuf,
    /// Panel CSV providing the covariate profiles
    #[arg(long)]
    data: PathBuf,
    /// Covariate name (x_ column without the prefix)
    #[arg(long)]
    covariate: String,
    /// Comma-separated values to evaluate at
    #[arg(long, allow_hyphen_values = true)]
    values: String,
}

#[derive(Args)]
struct TetrachoricArgs {
    /// Panel CSV
    #[arg(long)]
    data: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Summarize(a) => cmd_summarize(a),
        Command::Correlations(a) => cmd_correlations(a),
        Command::PredictMarginals(a) => cmd_predict(a),
        Command::Tetrachoric(a) => cmd_tetrachoric(a),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(if e.is_numerical() { 3 } else { 2 });
    }
}

// ---------------------------------------------------------------------------
// Config file handling

/// Flat sectioned key/value file: `[section]` headers, `key = value` lines,
/// `#` comments. Every key must be consumed; leftovers are errors.
struct Config {
    values: BTreeMap<(String, String), String>,
    path: String,
}

impl Config {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut section = String::new();
        let mut values = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}: line {}: expected key = value", path.display(), no + 1))
            })?;
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "{}: line {}: key {} appears before any [section]",
                    path.display(),
                    no + 1,
                    k.trim()
                )));
            }
            values.insert((section.clone(), k.trim().to_string()), v.trim().to_string());
        }
        Ok(Config { values, path: path.display().to_string() })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.values.remove(&(section.to_string(), key.to_string()))
    }

    fn take_parse<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>> {
        match self.take(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!(
                    "{}: {section}.{key}: cannot parse {v:?} as {}",
                    self.path,
                    std::any::type_name::<T>()
                ))
            }),
        }
    }

    fn require<T: FromStr>(&mut self, section: &str, key: &str) -> Result<T> {
        self.take_parse(section, key)?.ok_or_else(|| {
            Error::Config(format!("{}: missing required key {section}.{key}", self.path))
        })
    }

    fn finish(self) -> Result<()> {
        if let Some((section, key)) = self.values.keys().next() {
            return Err(Error::Config(format!(
                "{}: unknown key {section}.{key}",
                self.path
            )));
        }
        Ok(())
    }
}

fn parse_levels(value: Option<String>, path: &str) -> Result<ActiveLevels> {
    match value.as_deref() {
        Some("two") => Ok(ActiveLevels::two_level()),
        Some("three") => Ok(ActiveLevels::three_level()),
        Some(other) => Err(Error::Config(format!(
            "{path}: model.levels: expected two or three, got {other:?}"
        ))),
        None => Err(Error::Config(format!("{path}: missing required key model.levels"))),
    }
}

fn parse_float_list(s: &str, what: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{what}: {f:?} is not a number")))
        })
        .collect()
}

fn parse_matrix(s: &str, what: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = s
        .split(';')
        .map(|row| parse_float_list(row, what))
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!(
            "{what}: expected a square matrix as rows separated by ';'"
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn scenario_from_config(cfg: &mut Config) -> Result<SimulationScenario> {
    let n_units: usize = cfg.require("scenario", "units")?;
    let n_waves: u32 = cfg.require("scenario", "waves")?;
    let n_covariates: usize = cfg.require("scenario", "covariates")?;
    let couple_fraction = cfg.take_parse("scenario", "couple_fraction")?.unwrap_or(0.0);
    let form_prob = cfg.take_parse("scenario", "form_prob")?.unwrap_or(0.0);
    let dissolve_prob = cfg.take_parse("scenario", "dissolve_prob")?.unwrap_or(0.0);
    let intercept = cfg.take_parse("scenario", "intercept")?.unwrap_or(true);
    let seed = cfg.take_parse("scenario", "seed")?.unwrap_or(0);

    let mut beta_rows: Vec<Vec<f64>> = Vec::new();
    while let Some(line) = cfg.take("truth", &format!("b_{}", beta_rows.len() + 1)) {
        let row = parse_float_list(&line, &format!("truth.b_{}", beta_rows.len() + 1))?;
        if row.len() != n_covariates {
            return Err(Error::Config(format!(
                "truth.b_{}: expected {n_covariates} coefficients, got {}",
                beta_rows.len() + 1,
                row.len()
            )));
        }
        beta_rows.push(row);
    }
    if beta_rows.is_empty() {
        return Err(Error::Config("missing required key truth.b_1".into()));
    }
    let r = beta_rows.len();
    let beta = DMatrix::from_fn(r, n_covariates, |i, j| beta_rows[i][j]);

    let mut cov_of = |key: &str| -> Result<Option<CovMatrix>> {
        match cfg.take("truth", key) {
            None => Ok(None),
            Some(v) => {
                let m = parse_matrix(&v, &format!("truth.{key}"))?;
                if m.nrows() != r {
                    return Err(Error::Config(format!(
                        "truth.{key}: expected a {r}x{r} matrix for {r} outcomes"
                    )));
                }
                CovMatrix::new(m).map(Some)
            }
        }
    };
    let sigma_u = cov_of("sigma_u")?;
    let sigma_v = cov_of("sigma_v")?;
    let sigma_w = cov_of("sigma_w")?;
    let rho_e = match cfg.take("truth", "rho_e") {
        None => CorrVector::identity(r),
        Some(v) => CorrVector::new(r, parse_float_list(&v, "truth.rho_e")?)?,
    };

    Ok(SimulationScenario {
        n_units,
        couple_fraction,
        n_waves,
        form_prob,
        dissolve_prob,
        n_covariates,
        intercept,
        truth: ParameterState { beta, sigma_u, sigma_v, sigma_w, rho_e },
        seed,
    })
}

fn spec_from_config(cfg: &mut Config, n_outcomes: usize, n_covariates: usize) -> Result<ModelSpec> {
    let levels = parse_levels(cfg.take("model", "levels"), &cfg.path)?;
    let mut spec = ModelSpec::new(n_outcomes, n_covariates, levels);
    if let Some(v) = cfg.take_parse("model", "prior_beta_variance")? {
        spec.prior_beta_variance = v;
    }
    if let Some(v) = cfg.take_parse("model", "iw_prior_dof")? {
        spec.iw_prior_dof = v;
    }
    if let Some(v) = cfg.take_parse("sampler", "iterations")? {
        spec.n_iterations = v;
    }
    if let Some(v) = cfg.take_parse("sampler", "burn_in")? {
        spec.burn_in = v;
    }
    if let Some(v) = cfg.take_parse("sampler", "thin")? {
        spec.thin = v;
    }
    if let Some(v) = cfg.take_parse("sampler", "chains")? {
        spec.n_chains = v;
    }
    if let Some(v) = cfg.take_parse("sampler", "seed")? {
        spec.seed = v;
    }
    if let Some(v) = cfg.take_parse("sampler", "reject_low")? {
        spec.target_rejection.0 = v;
    }
    if let Some(v) = cfg.take_parse("sampler", "reject_high")? {
        spec.target_rejection.1 = v;
    }
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Commands

fn init_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if threads.is_some() {
        eprintln!("warning: built without the parallel feature; --threads has no effect");
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = Config::load(&args.config)?;
    let scenario = scenario_from_config(&mut cfg)?;
    cfg.finish()?;
    let sim = simulate_dataset(&scenario)?;
    fs::create_dir_all(&args.out)?;
    sim.dataset.write_csv(args.out.join("data.csv"))?;
    truth_store(&scenario).write_csv(&args.out.join("truth.csv"))?;
    let clusters = CoupleClusterIndex::build(&sim.dataset);
    say!(
        "wrote {} rows over {} individuals in {} clusters to {}",
        sim.dataset.rows().len(),
        sim.dataset.individuals().len(),
        clusters.n_clusters(),
        args.out.display()
    );
    Ok(())
}

/// Truth sidecar in the chain-file format, a single draw at index 0.
fn truth_store(scenario: &SimulationScenario) -> ChainStore {
    let truth = &scenario.truth;
    let n_pairs = truth.rho_e.n_pairs();
    ChainStore {
        chain_index: 0,
        seed: scenario.seed,
        spec_hash: "truth".into(),
        layout: ParamLayout {
            n_outcomes: truth.n_outcomes(),
            n_covariates: truth.n_covariates(),
            levels: truth.levels(),
        },
        draw_iterations: vec![0],
        draws: vec![truth.clone()],
        post_burnin_accept: vec![0; n_pairs],
        post_burnin_reject: vec![0; n_pairs],
        frozen_gamma: vec![0.0; n_pairs],
        adapt_trace: Vec::new(),
    }
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    init_threads(args.threads);
    let dataset = PanelDataset::load_csv(&args.data)?;
    let clusters = CoupleClusterIndex::build(&dataset);
    let fit_data = FitData::new(&dataset, &clusters)?;
    let mut cfg = Config::load(&args.config)?;
    let mut spec = spec_from_config(&mut cfg, dataset.n_outcomes(), dataset.n_covariates())?;
    cfg.finish()?;
    if let Some(v) = args.chains {
        spec.n_chains = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.iterations {
        spec.n_iterations = v;
    }
    if let Some(v) = args.burn_in {
        spec.burn_in = v;
    }
    if let Some(v) = args.thin {
        spec.thin = v;
    }
    spec.validate()?;

    fs::create_dir_all(&args.out)?;
    let started = Instant::now();
    let stores = run_chains(&spec, &fit_data, true)?;
    let wall = started.elapsed().as_secs_f64();
    for store in &stores {
        store.write_csv(&args.out.join(format!("chain_{}.csv", store.chain_index)))?;
    }

    let mut manifest = String::new();
    let _ = writeln!(manifest, "seed={}", spec.seed);
    let _ = writeln!(manifest, "spec_hash={}", spec.spec_hash());
    let _ = writeln!(manifest, "data={}", args.data.display());
    let _ = writeln!(manifest, "rows={}", fit_data.n_rows());
    let _ = writeln!(manifest, "individuals={}", fit_data.n_individuals());
    let _ = writeln!(manifest, "clusters={}", fit_data.n_clusters());
    let _ = writeln!(manifest, "outcomes={}", spec.n_outcomes);
    let _ = writeln!(manifest, "covariates={}", spec.n_covariates);
    let _ = writeln!(manifest, "levels={}", spec.levels.canonical());
    let _ = writeln!(manifest, "chains={}", spec.n_chains);
    let _ = writeln!(manifest, "iterations={}", spec.n_iterations);
    let _ = writeln!(manifest, "burn_in={}", spec.burn_in);
    let _ = writeln!(manifest, "thin={}", spec.thin);
    let _ = writeln!(manifest, "wall_seconds={wall:.1}");
    for store in &stores {
        let rates: Vec<String> = store
            .post_burnin_rejection_rates()
            .iter()
            .map(|r| format!("{r:.3}"))
            .collect();
        let _ = writeln!(
            manifest,
            "chain_{}_rejection_rates={}",
            store.chain_index,
            rates.join(",")
        );
    }
    if stores.len() >= 2 {
        let summary = summarize(&stores)?;
        let worst = summary
            .parameters
            .iter()
            .filter_map(|p| p.psrf.map(|r| (r, p.name.clone())))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((rhat, name)) = worst {
            let _ = writeln!(manifest, "psrf_max={rhat:.4} ({name})");
        }
        for p in &summary.parameters {
            if let Some(rhat) = p.psrf {
                if rhat > args.psrf_threshold {
                    let _ = writeln!(
                        manifest,
                        "psrf_warning={} has PSRF {rhat:.4} above threshold {}",
                        p.name, args.psrf_threshold
                    );
                }
            }
        }
    }
    fs::write(args.out.join("manifest.txt"), manifest)?;
    say!(
        "fit {} chains x {} iterations in {wall:.1}s; artifacts in {}",
        spec.n_chains,
        spec.n_iterations,
        args.out.display()
    );
    Ok(())
}

fn load_chain_dir(dir: &Path) -> Result<Vec<ChainStore>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Artifact {
        path: dir.display().to_string(),
        message: format!("cannot read directory: {e}"),
    })?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(idx) = name
            .strip_prefix("chain_")
            .and_then(|s| s.strip_suffix(".csv"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            found.push((idx, entry.path()));
        }
    }
    if found.is_empty() {
        return Err(Error::Artifact {
            path: dir.display().to_string(),
            message: "no chain_<index>.csv files found".into(),
        });
    }
    found.sort();
    found.iter().map(|(_, p)| ChainStore::load_csv(p)).collect()
}

fn summary_table(summary: &PosteriorSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>10} {:>10} {:>10} {:>10} {:>8} {:>4}",
        "parameter", "mean", "sd", "q2.5", "q97.5", "psrf", "sig"
    );
    for p in &summary.parameters {
        let rhat = p.psrf.map_or_else(|| "-".to_string(), |r| format!("{r:.3}"));
        let _ = writeln!(
            out,
            "{:<16} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8} {:>4}",
            p.name,
            p.mean,
            p.sd,
            p.q2_5,
            p.q97_5,
            rhat,
            if p.excludes_zero { "*" } else { "" }
        );
    }
    out
}

fn summary_csv(summary: &PosteriorSummary) -> String {
    let mut out = String::from("parameter,mean,sd,q2.5,q97.5,psrf,excludes_zero\n");
    for p in &summary.parameters {
        let rhat = p.psrf.map_or_else(String::new, |r| format!("{r}"));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.name, p.mean, p.sd, p.q2_5, p.q97_5, rhat, p.excludes_zero
        );
    }
    out
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let stores = load_chain_dir(&args.chains)?;
    if stores.len() < 2 {
        return Err(Error::domain(format!(
            "diagnose needs at least two chains, found {}",
            stores.len()
        )));
    }
    let summary = summarize(&stores)?;
    say_raw!("{}", summary_table(&summary));
    for store in &stores {
        let rates: Vec<String> = store
            .post_burnin_rejection_rates()
            .iter()
            .map(|r| format!("{r:.3}"))
            .collect();
        say!(
            "chain {} post-burn-in rejection rates: {}",
            store.chain_index,
            if rates.is_empty() { "none (single outcome)".into() } else { rates.join(",") }
        );
    }
    let over: Vec<&str> = summary
        .parameters
        .iter()
        .filter(|p| p.psrf.is_some_and(|r| r > args.psrf_threshold))
        .map(|p| p.name.as_str())
        .collect();
    if over.is_empty() {
        say!("all PSRF at or below {}", args.psrf_threshold);
    } else {
        say!("PSRF above {}: {}", args.psrf_threshold, over.join(", "));
    }
    let csv_path = args.chains.join("diagnostics.csv");
    fs::write(&csv_path, summary_csv(&summary))?;
    say!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_summarize(args: SummarizeArgs) -> Result<()> {
    let stores = load_chain_dir(&args.chains)?;
    let summary = summarize(&stores)?;
    say_raw!("{}", summary_table(&summary));
    let csv_path = args.chains.join("summary.csv");
    fs::write(&csv_path, summary_csv(&summary))?;
    say!("wrote {}", csv_path.display());
    Ok(())
}

/// 2x2 table of one outcome pair over rows where both are observed.
fn pair_counts(data: &PanelDataset, a: usize, b: usize) -> (u64, u64, u64, u64) {
    let mut counts = (0u64, 0u64, 0u64, 0u64);
    for row in data.rows() {
        if let (Some(ya), Some(yb)) = (row.y[a], row.y[b]) {
            match (ya, yb) {
                (true, true) => counts.0 += 1,
                (true, false) => counts.1 += 1,
                (false, true) => counts.2 += 1,
                (false, false) => counts.3 += 1,
            }
        }
    }
    counts
}

fn cmd_correlations(args: CorrelationsArgs) -> Result<()> {
    let stores = load_chain_dir(&args.chains)?;
    let layout = stores[0].layout.clone();
    let wanted = match args.model {
        ModelKind::Two => ActiveLevels::two_level(),
        ModelKind::Three => ActiveLevels::three_level(),
    };
    if layout.levels != wanted {
        return Err(Error::domain(format!(
            "chains were fit with levels {} but --model expects {}",
            layout.levels.canonical(),
            wanted.canonical()
        )));
    }
    let r = layout.n_outcomes;
    let data = args.data.as_ref().map(PanelDataset::load_csv).transpose()?;
    if let Some(d) = &data {
        if d.n_outcomes() != r {
            return Err(Error::domain(format!(
                "data has {} outcomes but the chains expect {r}",
                d.n_outcomes()
            )));
        }
    }
    let decompositions = correlation_decompositions(&stores)?;

    let unadjusted: Vec<Option<TetrachoricEstimate>> = decompositions
        .iter()
        .map(|dec| {
            data.as_ref().and_then(|d| {
                let (n11, n10, n01, n00) = pair_counts(d, dec.pair.0, dec.pair.1);
                tetrachoric_correlation(n11, n10, n01, n00).ok()
            })
        })
        .collect();

    say!(
        "{:<10} {:>12} {:>14} {:>12} {:>10}",
        "pair", "unadjusted", "adjusted_mean", "adjusted_sd", "plug_in"
    );
    let mut pair_csv = String::from("outcome_a,outcome_b,unadjusted,adjusted_mean,adjusted_sd\n");
    for (dec, una) in decompositions.iter().zip(&unadjusted) {
        let label = format!("{}:{}", dec.pair.0 + 1, dec.pair.1 + 1);
        let una_txt = una.map_or_else(|| "-".to_string(), |t| format!("{:.3}", t.rho));
        say!(
            "{label:<10} {una_txt:>12} {:>14.3} {:>12.3} {:>10.3}",
            dec.overall.mean, dec.overall.sd, dec.overall_plug_in
        );
        let _ = writeln!(
            pair_csv,
            "{},{},{},{},{}",
            dec.pair.0 + 1,
            dec.pair.1 + 1,
            una.map_or_else(String::new, |t| t.rho.to_string()),
            dec.overall.mean,
            dec.overall.sd
        );
    }

    let mut dec_csv =
        String::from("outcome_a,outcome_b,level,mean,sd,q2.5,q97.5,excludes_zero\n");
    for dec in &decompositions {
        let mut push = |level: &str, s: &FunctionalSummary| {
            let _ = writeln!(
                dec_csv,
                "{},{},{},{},{},{},{},{}",
                dec.pair.0 + 1,
                dec.pair.1 + 1,
                level,
                s.mean,
                s.sd,
                s.q2_5,
                s.q97_5,
                s.excludes_zero
            );
        };
        push("residual", &dec.residual);
        if let Some(s) = &dec.individual {
            push("individual", s);
        }
        if let Some(s) = &dec.couple_fixed {
            push("couple", s);
        }
        if let Some(s) = &dec.couple_wave {
            push("couple_wave", s);
        }
        push("overall", &dec.overall);
    }

    say!();
    say!("{:<10} {:>18} {:>15}", "outcome", "within_individual", "within_couple");
    for rr in 0..r {
        let wi = summarize_functional(&stores, |d| intra_cluster_correlations(d).within_individual[rr])?;
        let wc = match args.model {
            ModelKind::Two => None,
            ModelKind::Three => Some(summarize_functional(&stores, |d| {
                intra_cluster_correlations(d).within_couple.expect("three-level draw")[rr]
            })?),
        };
        say!(
            "{:<10} {:>12.3} ({:.3}) {}",
            rr + 1,
            wi.mean,
            wi.sd,
            wc.map_or_else(|| "              -".to_string(), |s| format!("{:>9.3} ({:.3})", s.mean, s.sd))
        );
    }

    let pair_path = args.chains.join("correlations.csv");
    fs::write(&pair_path, pair_csv)?;
    let dec_path = args.chains.join("correlation_decomposition.csv");
    fs::write(&dec_path, dec_csv)?;
    say!("wrote {} and {}", pair_path.display(), dec_path.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let stores = load_chain_dir(&args.chains)?;
    let data = PanelDataset::load_csv(&args.data)?;
    let values = parse_float_list(&args.values, "--values")?;
    if values.is_empty() {
        return Err(Error::domain("--values needs at least one number"));
    }
    say!("covariate,value,outcome,probability");
    for &value in &values {
        let probs = predicted_marginal_probabilities(&stores, &data, &args.covariate, value)?;
        for (rr, p) in probs.iter().enumerate() {
            say!("{},{},{},{:.6}", args.covariate, value, rr + 1, p);
        }
    }
    Ok(())
}

fn cmd_tetrachoric(args: TetrachoricArgs) -> Result<()> {
    let data = PanelDataset::load_csv(&args.data)?;
    let r = data.n_outcomes();
    if r < 2 {
        return Err(Error::domain("tetrachoric correlations need at least two outcomes"));
    }
    say!("outcome_a,outcome_b,n11,n10,n01,n00,rho,se,at_boundary");
    for a in 1..r {
        for b in 0..a {
            let (n11, n10, n01, n00) = pair_counts(&data, a, b);
            let name_a = &data.outcome_names()[a];
            let name_b = &data.outcome_names()[b];
            match tetrachoric_correlation(n11, n10, n01, n00) {
                Ok(est) => say!(
                    "{name_a},{name_b},{n11},{n10},{n01},{n00},{:.6},{:.6},{}",
                    est.rho, est.se, est.at_boundary
                ),
                Err(e) => {
                    eprintln!("pair ({name_a}, {name_b}): {e}");
                    say!("{name_a},{name_b},{n11},{n10},{n01},{n00},NA,NA,NA");
                }
            }
        }
    }
    Ok(())
}
