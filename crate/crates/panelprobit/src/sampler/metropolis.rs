//! Per-coordinate Metropolis update of the residual correlations.
//!
//! The prior is flat on the set of valid correlation matrices, so a proposal
//! outside that body is rejected outright (membership via the single-entry
//! determinant shortcut) and the acceptance ratio inside reduces to the
//! complete-data Gaussian likelihood ratio, evaluated in the log domain.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::kernels::{row_residual, Skip};
use super::{FitData, LatentState, ParameterState};
use crate::error::Result;
use crate::stochastic::{cholesky_lower, corr_pd_after_update, spd_inverse, CorrVector};

/// Iterations between step-size adjustments during burn-in.
pub const ADAPT_INTERVAL: usize = 50;
const GAMMA_INIT: f64 = 0.1;
const GAMMA_FACTOR: f64 = 1.1;
const GAMMA_MIN: f64 = 1e-4;
const GAMMA_MAX: f64 = 2.0;

/// Sufficient statistics for the correlation update: S = sum over rows of
/// the residual outer product e e^T, plus the row count.
#[derive(Debug, Clone)]
pub struct ResidualCrossProducts {
    pub s: DMatrix<f64>,
    pub n_rows: usize,
}

/// Residuals here are y* net of fixed part and all random effects.
pub fn residual_cross_products(
    data: &FitData,
    params: &ParameterState,
    latent: &LatentState,
) -> ResidualCrossProducts {
    let r = data.r;
    let mut s = DMatrix::zeros(r, r);
    let mut resid = vec![0.0; r];
    for row in 0..data.n_rows {
        row_residual(data, params, latent, row, Skip::Nothing, &mut resid);
        for a in 0..r {
            for b in 0..=a {
                s[(a, b)] += resid[a] * resid[b];
            }
        }
    }
    for a in 0..r {
        for b in (a + 1)..r {
            s[(a, b)] = s[(b, a)];
        }
    }
    ResidualCrossProducts { s, n_rows: data.n_rows }
}

/// log N(residuals; 0, Sigma(rho)) summed over rows, up to a constant:
/// -(n logdet Sigma + tr(Sigma^-1 S)) / 2.
pub fn gaussian_residual_loglik(rho: &CorrVector, s: &ResidualCrossProducts) -> Result<f64> {
    let sigma = rho.to_matrix();
    let l = cholesky_lower(&sigma)?;
    let logdet = 2.0 * (0..sigma.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    let inv = spd_inverse(&sigma)?;
    let mut tr = 0.0;
    for a in 0..sigma.nrows() {
        for b in 0..sigma.nrows() {
            tr += inv[(a, b)] * s.s[(a, b)];
        }
    }
    Ok(-0.5 * (s.n_rows as f64 * logdet + tr))
}

/// Metropolis state: per-coordinate step sizes, trailing-window counters for
/// adaptation, and post-freeze counters for reporting.
#[derive(Debug, Clone)]
pub struct RhoSampler {
    gamma: Vec<f64>,
    frozen: bool,
    window_accept: Vec<u64>,
    window_reject: Vec<u64>,
    post_accept: Vec<u64>,
    post_reject: Vec<u64>,
    trace: Vec<(usize, Vec<f64>)>,
}

impl RhoSampler {
    pub fn new(n_pairs: usize) -> Self {
        RhoSampler {
            gamma: vec![GAMMA_INIT; n_pairs],
            frozen: false,
            window_accept: vec![0; n_pairs],
            window_reject: vec![0; n_pairs],
            post_accept: vec![0; n_pairs],
            post_reject: vec![0; n_pairs],
            trace: Vec::new(),
        }
    }

    /// One pass over the coordinates, each with its own Gaussian step.
    pub fn step(
        &mut self,
        rho: &mut CorrVector,
        s: &ResidualCrossProducts,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if rho.n_pairs() == 0 {
            return Ok(());
        }
        let mut cur_ll = gaussian_residual_loglik(rho, s)?;
        for l in 0..rho.n_pairs() {
            let eps: f64 = StandardNormal.sample(rng);
            let proposal = rho.entry(l) + self.gamma[l] * eps;
            let mut accepted = false;
            if corr_pd_after_update(rho, l, proposal) {
                let mut cand = rho.clone();
                cand.set_unchecked(l, proposal);
                // A factorization failure this close to the boundary counts
                // as stepping outside the support.
                if let Ok(cand_ll) = gaussian_residual_loglik(&cand, s) {
                    if rng.gen::<f64>().ln() < cand_ll - cur_ll {
                        *rho = cand;
                        cur_ll = cand_ll;
                        accepted = true;
                    }
                }
            }
            if self.frozen {
                if accepted {
                    self.post_accept[l] += 1;
                } else {
                    self.post_reject[l] += 1;
                }
            } else if accepted {
                self.window_accept[l] += 1;
            } else {
                self.window_reject[l] += 1;
            }
        }
        Ok(())
    }

    /// Every ADAPT_INTERVAL iterations of burn-in: shrink the step when the
    /// window rejection rate is above the band, grow it when below.
    pub fn maybe_adapt(&mut self, iteration: usize, band: (f64, f64)) {
        if self.frozen || iteration % ADAPT_INTERVAL != 0 {
            return;
        }
        for l in 0..self.gamma.len() {
            let total = self.window_accept[l] + self.window_reject[l];
            if total == 0 {
                continue;
            }
            let rejection = self.window_reject[l] as f64 / total as f64;
            if rejection > band.1 {
                self.gamma[l] /= GAMMA_FACTOR;
            } else if rejection < band.0 {
                self.gamma[l] *= GAMMA_FACTOR;
            }
            self.gamma[l] = self.gamma[l].clamp(GAMMA_MIN, GAMMA_MAX);
            self.window_accept[l] = 0;
            self.window_reject[l] = 0;
        }
        self.trace.push((iteration, self.gamma.clone()));
    }

    /// Stop adapting; subsequent accept/reject outcomes feed the reported
    /// post-burn-in rates.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn post_accept(&self) -> &[u64] {
        &self.post_accept
    }

    pub fn post_reject(&self) -> &[u64] {
        &self.post_reject
    }

    pub fn trace(&self) -> &[(usize, Vec<f64>)] {
        &self.trace
    }

    pub fn post_burnin_rejection_rates(&self) -> Vec<f64> {
        self.post_accept
            .iter()
            .zip(&self.post_reject)
            .map(|(&a, &r)| if a + r == 0 { f64::NAN } else { r as f64 / (a + r) as f64 })
            .collect()
    }
}
