//! Gibbs sampler for the latent-variable probit model.
//!
//! One sweep updates, in fixed order: latent propensities y*, individual
//! effects u, couple effects v, couple-wave effects w, coefficients B, the
//! three covariance matrices, and finally the residual correlations via
//! per-coordinate Metropolis. Every conditional draw uses its own derived
//! RNG stream, so chains are reproducible bit-for-bit at any thread count.

mod kernels;
mod metropolis;
mod store;

pub use kernels::{
    beta_posterior, sweep_cluster_effects, sweep_coefficients, sweep_covariance,
    sweep_individual_effects, sweep_wave_effects, sweep_y_star, RandomLevel, SweepKey,
    Y_STAR_SCANS,
};
pub use metropolis::{
    gaussian_residual_loglik, residual_cross_products, ResidualCrossProducts, RhoSampler,
    ADAPT_INTERVAL,
};
pub use store::{ChainStore, ParamLayout};

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{CoupleClusterIndex, PanelDataset};
use crate::error::{Error, Result};
use crate::parallel::map_units;
use crate::rng::{derive_seed, substream, tag};
use crate::stochastic::{sample_truncated_mvn, CorrVector, CovMatrix, TruncationBox};

/// Which random-effect levels the model carries. The two-level model keeps
/// only individual effects; the three-level model adds a couple effect fixed
/// over time and one varying by wave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveLevels {
    pub individual: bool,
    pub couple_fixed: bool,
    pub couple_wave: bool,
}

impl ActiveLevels {
    pub fn two_level() -> Self {
        ActiveLevels { individual: true, couple_fixed: false, couple_wave: false }
    }

    pub fn three_level() -> Self {
        ActiveLevels { individual: true, couple_fixed: true, couple_wave: true }
    }

    pub fn canonical(&self) -> String {
        let mut s = String::new();
        if self.individual {
            s.push('u');
        }
        if self.couple_fixed {
            s.push('v');
        }
        if self.couple_wave {
            s.push('w');
        }
        if s.is_empty() {
            s.push_str("none");
        }
        s
    }
}

/// Model and sampler configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n_outcomes: usize,
    pub n_covariates: usize,
    pub levels: ActiveLevels,
    pub prior_beta_variance: f64,
    pub iw_prior_dof: f64,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    /// Metropolis step sizes adapt until the per-coordinate rejection rate
    /// over a trailing window sits inside this band.
    pub target_rejection: (f64, f64),
}

impl ModelSpec {
    /// Defaults: diffuse N(0, 100) coefficient prior, inverse Wishart (I, 4)
    /// on each covariance, 5000 iterations with 1000 burn-in, no thinning,
    /// two chains, rejection band [0.7, 0.8].
    pub fn new(n_outcomes: usize, n_covariates: usize, levels: ActiveLevels) -> Self {
        ModelSpec {
            n_outcomes,
            n_covariates,
            levels,
            prior_beta_variance: 100.0,
            iw_prior_dof: 4.0,
            n_iterations: 5000,
            burn_in: 1000,
            thin: 1,
            n_chains: 2,
            seed: 0,
            target_rejection: (0.7, 0.8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_outcomes == 0 {
            return Err(Error::domain("model needs at least one outcome"));
        }
        if self.n_covariates == 0 {
            return Err(Error::domain("model needs at least one covariate"));
        }
        if self.n_iterations == 0 {
            return Err(Error::domain("iteration count must be positive"));
        }
        if self.burn_in >= self.n_iterations {
            return Err(Error::domain(format!(
                "burn-in {} must be smaller than the iteration count {}",
                self.burn_in, self.n_iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::domain("thinning interval must be positive"));
        }
        if self.n_chains == 0 {
            return Err(Error::domain("chain count must be positive"));
        }
        if !(self.prior_beta_variance > 0.0) {
            return Err(Error::domain("coefficient prior variance must be positive"));
        }
        let has_level = self.levels.individual || self.levels.couple_fixed || self.levels.couple_wave;
        if has_level && !(self.iw_prior_dof > self.n_outcomes as f64 - 1.0) {
            return Err(Error::domain(format!(
                "inverse Wishart prior dof {} must exceed {} for {} outcomes",
                self.iw_prior_dof,
                self.n_outcomes - 1,
                self.n_outcomes
            )));
        }
        let (lo, hi) = self.target_rejection;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::domain(format!(
                "rejection band ({lo}, {hi}) must satisfy 0 < low < high < 1"
            )));
        }
        Ok(())
    }

    /// Stable FNV-1a hash of the canonical configuration string; written into
    /// every chain artifact so mixed-provenance files are detected on load.
    pub fn spec_hash(&self) -> String {
        let canonical = format!(
            "R={};P={};levels={};prior_beta_variance={};iw_prior_dof={};iterations={};burn_in={};thin={};chains={};seed={};reject_low={};reject_high={}",
            self.n_outcomes,
            self.n_covariates,
            self.levels.canonical(),
            self.prior_beta_variance,
            self.iw_prior_dof,
            self.n_iterations,
            self.burn_in,
            self.thin,
            self.n_chains,
            self.seed,
            self.target_rejection.0,
            self.target_rejection.1,
        );
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canonical.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// One point in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    /// R x P coefficient matrix, one row per outcome.
    pub beta: DMatrix<f64>,
    pub sigma_u: Option<CovMatrix>,
    pub sigma_v: Option<CovMatrix>,
    pub sigma_w: Option<CovMatrix>,
    pub rho_e: CorrVector,
}

impl ParameterState {
    pub fn n_outcomes(&self) -> usize {
        self.beta.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.beta.ncols()
    }

    pub fn levels(&self) -> ActiveLevels {
        ActiveLevels {
            individual: self.sigma_u.is_some(),
            couple_fixed: self.sigma_v.is_some(),
            couple_wave: self.sigma_w.is_some(),
        }
    }
}

/// Latent augmentation: propensities and random effects, all stored flat and
/// row-major with stride R. Inactive levels stay at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub y_star: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

impl LatentState {
    pub fn zeros(data: &FitData) -> Self {
        let r = data.r;
        LatentState {
            y_star: vec![0.0; data.n_rows * r],
            u: vec![0.0; data.individual_rows.len() * r],
            v: vec![0.0; data.cluster_rows.len() * r],
            w: vec![0.0; data.wave_unit_rows.len() * r],
        }
    }
}

/// Dataset reorganized for sweeping: dense unit indices and per-unit row
/// lists. Unit numbering is deterministic (sorted ids, sorted cluster-wave
/// pairs), which pins every RNG substream.
#[derive(Debug, Clone)]
pub struct FitData {
    pub(crate) n_rows: usize,
    pub(crate) r: usize,
    pub(crate) p: usize,
    pub(crate) x: Vec<f64>,
    pub(crate) boxes: Vec<TruncationBox>,
    pub(crate) row_individual: Vec<usize>,
    pub(crate) row_cluster: Vec<usize>,
    pub(crate) row_wave_unit: Vec<usize>,
    pub(crate) individual_rows: Vec<Vec<usize>>,
    pub(crate) cluster_rows: Vec<Vec<usize>>,
    pub(crate) wave_unit_rows: Vec<Vec<usize>>,
    pub(crate) xtx: DMatrix<f64>,
    individual_ids: Vec<String>,
}

impl FitData {
    pub fn new(data: &PanelDataset, clusters: &CoupleClusterIndex) -> Result<Self> {
        let r = data.n_outcomes();
        let p = data.n_covariates();
        let n_rows = data.rows().len();

        let mut individual_ids: Vec<String> =
            data.rows().iter().map(|row| row.individual_id.clone()).collect();
        individual_ids.sort();
        individual_ids.dedup();
        let individual_pos: HashMap<&str, usize> =
            individual_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

        let mut wave_keys: Vec<(usize, u32)> = data
            .rows()
            .iter()
            .map(|row| (clusters.cluster_of(&row.individual_id).expect("indexed"), row.wave))
            .collect();
        wave_keys.sort_unstable();
        wave_keys.dedup();
        let wave_pos: HashMap<(usize, u32), usize> =
            wave_keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();

        let mut x = Vec::with_capacity(n_rows * p);
        let mut boxes = Vec::with_capacity(n_rows);
        let mut row_individual = Vec::with_capacity(n_rows);
        let mut row_cluster = Vec::with_capacity(n_rows);
        let mut row_wave_unit = Vec::with_capacity(n_rows);
        let mut individual_rows = vec![Vec::new(); individual_ids.len()];
        let mut cluster_rows = vec![Vec::new(); clusters.n_clusters()];
        let mut wave_unit_rows = vec![Vec::new(); wave_keys.len()];
        let mut xtx = DMatrix::zeros(p, p);

        for (i, row) in data.rows().iter().enumerate() {
            x.extend_from_slice(&row.x);
            boxes.push(observation_box(&row.y));
            let ind = individual_pos[row.individual_id.as_str()];
            let cl = clusters.cluster_of(&row.individual_id).expect("indexed");
            let wu = wave_pos[&(cl, row.wave)];
            row_individual.push(ind);
            row_cluster.push(cl);
            row_wave_unit.push(wu);
            individual_rows[ind].push(i);
            cluster_rows[cl].push(i);
            wave_unit_rows[wu].push(i);
            for a in 0..p {
                for b in 0..p {
                    xtx[(a, b)] += row.x[a] * row.x[b];
                }
            }
        }
        Ok(FitData {
            n_rows,
            r,
            p,
            x,
            boxes,
            row_individual,
            row_cluster,
            row_wave_unit,
            individual_rows,
            cluster_rows,
            wave_unit_rows,
            xtx,
            individual_ids,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_outcomes(&self) -> usize {
        self.r
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn n_individuals(&self) -> usize {
        self.individual_rows.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_rows.len()
    }

    pub fn n_wave_units(&self) -> usize {
        self.wave_unit_rows.len()
    }

    pub fn individual_ids(&self) -> &[String] {
        &self.individual_ids
    }
}

/// Missing outcomes leave the latent propensity unconstrained.
fn observation_box(y: &[Option<bool>]) -> TruncationBox {
    let lower = y
        .iter()
        .map(|v| match v {
            Some(true) => 0.0,
            _ => f64::NEG_INFINITY,
        })
        .collect();
    let upper = y
        .iter()
        .map(|v| match v {
            Some(false) => 0.0,
            _ => f64::INFINITY,
        })
        .collect();
    TruncationBox::new(lower, upper).expect("orthant bounds are ordered")
}

/// Dispersed-start initial state: coefficients jittered N(0, 0.1), identity
/// covariances and residual correlation, effects at zero.
pub fn default_initial_state(spec: &ModelSpec, chain_seed: u64) -> ParameterState {
    let mut rng = substream(chain_seed, &[tag::INIT]);
    let sd = 0.1_f64.sqrt();
    let beta = DMatrix::from_fn(spec.n_outcomes, spec.n_covariates, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sd * z
    });
    let cov = |active: bool| active.then(|| CovMatrix::identity(spec.n_outcomes));
    ParameterState {
        beta,
        sigma_u: cov(spec.levels.individual),
        sigma_v: cov(spec.levels.couple_fixed),
        sigma_w: cov(spec.levels.couple_wave),
        rho_e: CorrVector::identity(spec.n_outcomes),
    }
}

fn initial_latent(
    data: &FitData,
    params: &ParameterState,
    chain_seed: u64,
    parallel: bool,
) -> Result<LatentState> {
    let mut latent = LatentState::zeros(data);
    let r = data.r;
    let draws = map_units(parallel, data.n_rows, |i| {
        let mut rng = substream(chain_seed, &[tag::INIT, tag::Y_STAR, i as u64]);
        let mut mean = vec![0.0; r];
        for (rr, m) in mean.iter_mut().enumerate() {
            let mut acc = 0.0;
            for pp in 0..data.p {
                acc += params.beta[(rr, pp)] * data.x[i * data.p + pp];
            }
            *m = acc;
        }
        sample_truncated_mvn(&mean, &params.rho_e, &data.boxes[i], &mut rng)
    });
    for (i, d) in draws.into_iter().enumerate() {
        latent.y_star[i * r..(i + 1) * r].copy_from_slice(&d?);
    }
    Ok(latent)
}

fn check_dims(spec: &ModelSpec, data: &FitData) -> Result<()> {
    if spec.n_outcomes != data.r || spec.n_covariates != data.p {
        return Err(Error::domain(format!(
            "model is {}x{} (outcomes x covariates) but data is {}x{}",
            spec.n_outcomes, spec.n_covariates, data.r, data.p
        )));
    }
    Ok(())
}

/// Run one chain to completion and return its stored draws.
///
/// `init` overrides the dispersed default start. Draw k is recorded at
/// iteration burn_in + k * thin; the store ends up with
/// floor((iterations - burn_in) / thin) draws.
pub fn run_chain(
    spec: &ModelSpec,
    data: &FitData,
    chain_index: usize,
    init: Option<ParameterState>,
    parallel: bool,
) -> Result<ChainStore> {
    spec.validate()?;
    check_dims(spec, data)?;
    let chain_seed = derive_seed(spec.seed, &[tag::CHAIN, chain_index as u64]);
    let mut params = match init {
        Some(p) => {
            if p.n_outcomes() != spec.n_outcomes
                || p.n_covariates() != spec.n_covariates
                || p.levels() != spec.levels
            {
                return Err(Error::domain(
                    "initial state does not match the model's dimensions or levels",
                ));
            }
            p
        }
        None => default_initial_state(spec, chain_seed),
    };
    let mut latent = initial_latent(data, &params, chain_seed, parallel)?;
    let mut rho = RhoSampler::new(params.rho_e.n_pairs());
    if spec.burn_in == 0 {
        rho.freeze();
    }

    let layout = ParamLayout::from_spec(spec);
    let n_kept = (spec.n_iterations - spec.burn_in) / spec.thin;
    let mut draws = Vec::with_capacity(n_kept);
    let mut draw_iterations = Vec::with_capacity(n_kept);

    for it in 1..=spec.n_iterations {
        let key = SweepKey { chain_seed, iteration: it as u64 };
        sweep_y_star(data, &params, &mut latent, key, parallel)?;
        sweep_individual_effects(data, &params, &mut latent, key, parallel)?;
        sweep_cluster_effects(data, &params, &mut latent, key, parallel)?;
        sweep_wave_effects(data, &params, &mut latent, key, parallel)?;
        sweep_coefficients(data, &mut params, &latent, key, spec.prior_beta_variance)?;
        sweep_covariance(RandomLevel::Individual, data, &mut params, &latent, key, spec.iw_prior_dof)?;
        sweep_covariance(RandomLevel::CoupleFixed, data, &mut params, &latent, key, spec.iw_prior_dof)?;
        sweep_covariance(RandomLevel::CoupleWave, data, &mut params, &latent, key, spec.iw_prior_dof)?;
        if params.rho_e.n_pairs() > 0 {
            let s = residual_cross_products(data, &params, &latent);
            let mut rng = substream(chain_seed, &[tag::RHO, it as u64]);
            rho.step(&mut params.rho_e, &s, &mut rng)?;
            if it <= spec.burn_in {
                rho.maybe_adapt(it, spec.target_rejection);
            }
        }
        if it == spec.burn_in {
            rho.freeze();
        }
        if it > spec.burn_in && (it - spec.burn_in) % spec.thin == 0 {
            draws.push(params.clone());
            draw_iterations.push(it);
        }
    }

    Ok(ChainStore {
        chain_index,
        seed: spec.seed,
        spec_hash: spec.spec_hash(),
        layout,
        draw_iterations,
        draws,
        post_burnin_accept: rho.post_accept().to_vec(),
        post_burnin_reject: rho.post_reject().to_vec(),
        frozen_gamma: rho.gamma().to_vec(),
        adapt_trace: rho.trace().to_vec(),
    })
}

/// Run all chains of the spec; chains are independent and may themselves run
/// in parallel.
pub fn run_chains(spec: &ModelSpec, data: &FitData, parallel: bool) -> Result<Vec<ChainStore>> {
    spec.validate()?;
    check_dims(spec, data)?;
    map_units(parallel, spec.n_chains, |c| run_chain(spec, data, c, None, parallel))
        .into_iter()
        .collect()
}
