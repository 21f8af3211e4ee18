//! Conditional draws, one function per block of the sweep.
//!
//! Each unit draw (row, individual, cluster, cluster-wave) derives its RNG
//! stream from (chain seed, iteration, step tag, unit index), so the maps
//! below can run on any number of threads without changing results.
//! Cross-unit accumulations stay serial to keep floating-point order fixed.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::{FitData, LatentState, ParameterState};
use crate::error::Result;
use crate::parallel::map_units;
use crate::rng::{substream, tag};
use crate::stochastic::{
    cholesky_lower, sample_inverse_wishart, sample_mvn, spd_inverse, CovMatrix, MvnConditional,
};

/// Full-conditional scans applied to each row's propensity vector per sweep.
/// One scan already leaves the conditional truncated MVN invariant; a second
/// costs little and mixes faster.
pub const Y_STAR_SCANS: usize = 2;

/// Stream coordinates for one sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepKey {
    pub chain_seed: u64,
    pub iteration: u64,
}

/// Random-effect levels, in sweep order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomLevel {
    Individual,
    CoupleFixed,
    CoupleWave,
}

/// Term left out when accumulating a row's mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Skip {
    Nothing,
    Fixed,
    Level(RandomLevel),
}

/// mean[r] = (B x)_r + u_r + v_r + w_r for one row, minus the skipped term.
/// Inactive levels hold zeros, so they can be added unconditionally.
fn row_mean(
    data: &FitData,
    params: &ParameterState,
    latent: &LatentState,
    row: usize,
    skip: Skip,
    out: &mut [f64],
) {
    let r = data.r;
    let p = data.p;
    let xrow = &data.x[row * p..(row + 1) * p];
    for (rr, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        if skip != Skip::Fixed {
            for (pp, &xv) in xrow.iter().enumerate() {
                acc += params.beta[(rr, pp)] * xv;
            }
        }
        if skip != Skip::Level(RandomLevel::Individual) {
            acc += latent.u[data.row_individual[row] * r + rr];
        }
        if skip != Skip::Level(RandomLevel::CoupleFixed) {
            acc += latent.v[data.row_cluster[row] * r + rr];
        }
        if skip != Skip::Level(RandomLevel::CoupleWave) {
            acc += latent.w[data.row_wave_unit[row] * r + rr];
        }
        *o = acc;
    }
}

pub(super) fn row_residual(
    data: &FitData,
    params: &ParameterState,
    latent: &LatentState,
    row: usize,
    skip: Skip,
    out: &mut [f64],
) {
    row_mean(data, params, latent, row, skip, out);
    let r = data.r;
    for (rr, o) in out.iter_mut().enumerate() {
        *o = latent.y_star[row * r + rr] - *o;
    }
}

/// Update every row's latent propensity vector with Y_STAR_SCANS invariant
/// full-conditional scans of its truncated MVN.
pub fn sweep_y_star(
    data: &FitData,
    params: &ParameterState,
    latent: &mut LatentState,
    key: SweepKey,
    parallel: bool,
) -> Result<()> {
    let r = data.r;
    let cond = MvnConditional::from_covariance(&params.rho_e.to_matrix())?;
    let updated = map_units(parallel, data.n_rows, |i| -> Result<Vec<f64>> {
        let mut rng = substream(key.chain_seed, &[tag::Y_STAR, key.iteration, i as u64]);
        let mut mean = vec![0.0; r];
        row_mean(data, params, latent, i, Skip::Nothing, &mut mean);
        let mut y = latent.y_star[i * r..(i + 1) * r].to_vec();
        for _ in 0..Y_STAR_SCANS {
            cond.scan(&mut y, &mean, &data.boxes[i], &mut rng)?;
        }
        Ok(y)
    });
    for (i, d) in updated.into_iter().enumerate() {
        latent.y_star[i * r..(i + 1) * r].copy_from_slice(&d?);
    }
    Ok(())
}

/// Posterior pieces for a unit observed `count` times: covariance
/// (count * Omega + prior precision)^-1, its Cholesky factor, and the
/// operator mapping the residual sum to the posterior mean.
struct UnitPosterior {
    mean_op: DMatrix<f64>,
    chol: DMatrix<f64>,
}

fn unit_posterior(count: f64, omega: &DMatrix<f64>, prior_prec: &DMatrix<f64>) -> Result<UnitPosterior> {
    let prec = omega * count + prior_prec;
    let cov = spd_inverse(&prec)?;
    Ok(UnitPosterior { mean_op: &cov * omega, chol: cholesky_lower(&cov)? })
}

/// Shared effect update: for each unit, sum the residuals that exclude its
/// own level, then draw from the conjugate MVN conditional.
fn sweep_effects(
    data: &FitData,
    params: &ParameterState,
    latent: &LatentState,
    key: SweepKey,
    parallel: bool,
    level: RandomLevel,
    sigma: &CovMatrix,
    unit_rows: &[Vec<usize>],
    step_tag: u64,
) -> Result<Vec<f64>> {
    let r = data.r;
    let omega = spd_inverse(&params.rho_e.to_matrix())?;
    let prior_prec = spd_inverse(sigma.as_matrix())?;
    let mut kernels: HashMap<usize, UnitPosterior> = HashMap::new();
    for rows in unit_rows {
        if let std::collections::hash_map::Entry::Vacant(e) = kernels.entry(rows.len()) {
            e.insert(unit_posterior(rows.len() as f64, &omega, &prior_prec)?);
        }
    }
    let draws = map_units(parallel, unit_rows.len(), |j| {
        let mut rng = substream(key.chain_seed, &[step_tag, key.iteration, j as u64]);
        let kernel = &kernels[&unit_rows[j].len()];
        let mut d = DVector::zeros(r);
        let mut resid = vec![0.0; r];
        for &row in &unit_rows[j] {
            row_residual(data, params, latent, row, Skip::Level(level), &mut resid);
            for rr in 0..r {
                d[rr] += resid[rr];
            }
        }
        let mean = &kernel.mean_op * d;
        sample_mvn(&mean, &kernel.chol, &mut rng)
    });
    let mut flat = vec![0.0; unit_rows.len() * r];
    for (j, d) in draws.into_iter().enumerate() {
        flat[j * r..(j + 1) * r].copy_from_slice(d.as_slice());
    }
    Ok(flat)
}

pub fn sweep_individual_effects(
    data: &FitData,
    params: &ParameterState,
    latent: &mut LatentState,
    key: SweepKey,
    parallel: bool,
) -> Result<()> {
    if let Some(sigma) = &params.sigma_u {
        latent.u = sweep_effects(
            data,
            params,
            latent,
            key,
            parallel,
            RandomLevel::Individual,
            sigma,
            &data.individual_rows,
            tag::U,
        )?;
    }
    Ok(())
}

pub fn sweep_cluster_effects(
    data: &FitData,
    params: &ParameterState,
    latent: &mut LatentState,
    key: SweepKey,
    parallel: bool,
) -> Result<()> {
    if let Some(sigma) = &params.sigma_v {
        latent.v = sweep_effects(
            data,
            params,
            latent,
            key,
            parallel,
            RandomLevel::CoupleFixed,
            sigma,
            &data.cluster_rows,
            tag::V,
        )?;
    }
    Ok(())
}

pub fn sweep_wave_effects(
    data: &FitData,
    params: &ParameterState,
    latent: &mut LatentState,
    key: SweepKey,
    parallel: bool,
) -> Result<()> {
    if let Some(sigma) = &params.sigma_w {
        latent.w = sweep_effects(
            data,
            params,
            latent,
            key,
            parallel,
            RandomLevel::CoupleWave,
            sigma,
            &data.wave_unit_rows,
            tag::W,
        )?;
    }
    Ok(())
}

/// Conjugate coefficient posterior. `m_xd` is X^T D (P x R) with D the
/// propensity residuals net of all random effects. Returns the posterior
/// mean of vec(B) (outcome-major blocks) and the Cholesky factor of the
/// posterior covariance.
pub fn beta_posterior(
    xtx: &DMatrix<f64>,
    m_xd: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    prior_variance: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = xtx.nrows();
    let r = omega.nrows();
    let n = r * p;
    let mut prec = DMatrix::zeros(n, n);
    for ri in 0..r {
        for si in 0..r {
            let o = omega[(ri, si)];
            for pi in 0..p {
                for qi in 0..p {
                    prec[(ri * p + pi, si * p + qi)] = o * xtx[(pi, qi)];
                }
            }
        }
    }
    for i in 0..n {
        prec[(i, i)] += 1.0 / prior_variance;
    }
    let cov = spd_inverse(&prec)?;
    let mut rhs = DVector::zeros(n);
    for ri in 0..r {
        for pi in 0..p {
            let mut acc = 0.0;
            for si in 0..r {
                acc += omega[(ri, si)] * m_xd[(pi, si)];
            }
            rhs[ri * p + pi] = acc;
        }
    }
    let mean = &cov * rhs;
    Ok((mean, cholesky_lower(&cov)?))
}

pub fn sweep_coefficients(
    data: &FitData,
    params: &mut ParameterState,
    latent: &LatentState,
    key: SweepKey,
    prior_variance: f64,
) -> Result<()> {
    let r = data.r;
    let p = data.p;
    let omega = spd_inverse(&params.rho_e.to_matrix())?;
    let mut m_xd = DMatrix::zeros(p, r);
    let mut resid = vec![0.0; r];
    for row in 0..data.n_rows {
        row_residual(data, params, latent, row, Skip::Fixed, &mut resid);
        let xrow = &data.x[row * p..(row + 1) * p];
        for (pi, &xv) in xrow.iter().enumerate() {
            if xv != 0.0 {
                for (ri, &dv) in resid.iter().enumerate() {
                    m_xd[(pi, ri)] += xv * dv;
                }
            }
        }
    }
    let (mean, chol) = beta_posterior(&data.xtx, &m_xd, &omega, prior_variance)?;
    let mut rng = substream(key.chain_seed, &[tag::BETA, key.iteration]);
    let draw = sample_mvn(&mean, &chol, &mut rng);
    for ri in 0..r {
        for pi in 0..p {
            params.beta[(ri, pi)] = draw[ri * p + pi];
        }
    }
    Ok(())
}

/// Inverse Wishart update of one level's covariance: scale = prior identity
/// plus the sum of effect outer products, dof = prior dof + unit count.
pub fn sweep_covariance(
    level: RandomLevel,
    data: &FitData,
    params: &mut ParameterState,
    latent: &LatentState,
    key: SweepKey,
    prior_dof: f64,
) -> Result<()> {
    let r = data.r;
    let (effects, step_tag, slot) = match level {
        RandomLevel::Individual => (&latent.u, tag::SIGMA_U, &mut params.sigma_u),
        RandomLevel::CoupleFixed => (&latent.v, tag::SIGMA_V, &mut params.sigma_v),
        RandomLevel::CoupleWave => (&latent.w, tag::SIGMA_W, &mut params.sigma_w),
    };
    if slot.is_none() {
        return Ok(());
    }
    let n_units = effects.len() / r;
    let mut scale = DMatrix::identity(r, r);
    for j in 0..n_units {
        let e = &effects[j * r..(j + 1) * r];
        for a in 0..r {
            for b in 0..=a {
                scale[(a, b)] += e[a] * e[b];
            }
        }
    }
    for a in 0..r {
        for b in (a + 1)..r {
            scale[(a, b)] = scale[(b, a)];
        }
    }
    let mut rng = substream(key.chain_seed, &[step_tag, key.iteration]);
    let draw = sample_inverse_wishart(&CovMatrix::new(scale)?, prior_dof + n_units as f64, &mut rng)?;
    *slot = Some(draw);
    Ok(())
}
