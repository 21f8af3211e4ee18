//! Posterior functionals behind the reported tables: adjusted cross-outcome
//! correlations with their level decomposition, intra-cluster correlations,
//! predicted marginal probabilities, and tetrachoric correlations as the
//! unadjusted baseline.

use crate::data::PanelDataset;
use crate::diagnostics::{quantile_sorted, validate_consistent};
use crate::error::{Error, Result};
use crate::normal;
use crate::sampler::{ChainStore, ParameterState};
use crate::stochastic::{CorrVector, CovMatrix};

/// Total variance of one outcome's latent propensity: active random-effect
/// variances plus the unit residual variance.
pub fn total_latent_variance(draw: &ParameterState, outcome: usize) -> f64 {
    let mut total = 1.0;
    for sigma in [&draw.sigma_u, &draw.sigma_v, &draw.sigma_w].into_iter().flatten() {
        total += sigma.variance(outcome);
    }
    total
}

fn cross_covariance(draw: &ParameterState, r: usize, c: usize) -> f64 {
    let (r, c) = if r > c { (r, c) } else { (c, r) };
    let mut cov = draw.rho_e.entry(CorrVector::pair_index(r, c));
    for sigma in [&draw.sigma_u, &draw.sigma_v, &draw.sigma_w].into_iter().flatten() {
        cov += sigma.covariance(r, c);
    }
    cov
}

/// Correlation of two outcomes' latent propensities: summed cross-level
/// covariances over the geometric mean of total variances.
pub fn overall_latent_correlation(draw: &ParameterState, r: usize, c: usize) -> f64 {
    if r == c {
        return 1.0;
    }
    cross_covariance(draw, r, c)
        / (total_latent_variance(draw, r) * total_latent_variance(draw, c)).sqrt()
}

fn check_pair(draw: &ParameterState, r: usize, c: usize) -> Result<()> {
    let n = draw.n_outcomes();
    if r >= n || c >= n {
        return Err(Error::domain(format!(
            "outcome pair ({r}, {c}) out of range for {n} outcomes"
        )));
    }
    if r == c {
        return Err(Error::domain("adjusted correlation needs two distinct outcomes"));
    }
    Ok(())
}

/// (sigma_u_rc + rho_rc) / sqrt((sigma_u_rr + 1)(sigma_u_cc + 1)) for a draw
/// carrying only individual effects.
pub fn adjusted_correlation_two_level(draw: &ParameterState, r: usize, c: usize) -> Result<f64> {
    check_pair(draw, r, c)?;
    if draw.sigma_u.is_none() || draw.sigma_v.is_some() || draw.sigma_w.is_some() {
        return Err(Error::domain("draw does not come from the two-level model"));
    }
    Ok(overall_latent_correlation(draw, r, c))
}

/// Four summed covariances (individual, couple, couple-wave, residual) over
/// the geometric mean of the four-part total variances.
pub fn adjusted_correlation_three_level(draw: &ParameterState, r: usize, c: usize) -> Result<f64> {
    check_pair(draw, r, c)?;
    if draw.sigma_u.is_none() || draw.sigma_v.is_none() || draw.sigma_w.is_none() {
        return Err(Error::domain("draw does not come from the three-level model"));
    }
    Ok(overall_latent_correlation(draw, r, c))
}

/// Correlation implied by one level's covariance matrix.
pub fn level_correlation(sigma: &CovMatrix, r: usize, c: usize) -> f64 {
    sigma.covariance(r, c) / (sigma.variance(r) * sigma.variance(c)).sqrt()
}

/// Within-cluster correlations of one outcome's latent propensity across
/// observations. Same individual across waves shares u and v; partners at the
/// same wave share v and w.
#[derive(Debug, Clone)]
pub struct IntraClusterCorrelations {
    pub within_individual: Vec<f64>,
    /// None when the draw has no couple-level effects.
    pub within_couple: Option<Vec<f64>>,
}

pub fn intra_cluster_correlations(draw: &ParameterState) -> IntraClusterCorrelations {
    let r = draw.n_outcomes();
    let var = |sigma: &Option<CovMatrix>, rr: usize| sigma.as_ref().map_or(0.0, |s| s.variance(rr));
    let within_individual = (0..r)
        .map(|rr| {
            (var(&draw.sigma_u, rr) + var(&draw.sigma_v, rr)) / total_latent_variance(draw, rr)
        })
        .collect();
    let within_couple = (draw.sigma_v.is_some() || draw.sigma_w.is_some()).then(|| {
        (0..r)
            .map(|rr| {
                (var(&draw.sigma_v, rr) + var(&draw.sigma_w, rr)) / total_latent_variance(draw, rr)
            })
            .collect()
    });
    IntraClusterCorrelations { within_individual, within_couple }
}

/// Draw-wise posterior of a scalar functional pooled over chains.
#[derive(Debug, Clone, Copy)]
pub struct FunctionalSummary {
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q97_5: f64,
    pub excludes_zero: bool,
}

pub fn summarize_functional(
    chains: &[ChainStore],
    f: impl Fn(&ParameterState) -> f64,
) -> Result<FunctionalSummary> {
    validate_consistent(chains)?;
    let mut values: Vec<f64> = chains.iter().flat_map(|c| c.draws.iter().map(&f)).collect();
    values.sort_by(|a, b| a.total_cmp(b));
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
            .sqrt()
    };
    let q2_5 = quantile_sorted(&values, 0.025);
    let q97_5 = quantile_sorted(&values, 0.975);
    Ok(FunctionalSummary { mean, sd, q2_5, q97_5, excludes_zero: q2_5 > 0.0 || q97_5 < 0.0 })
}

/// Parameter state at the pooled posterior mean. Means of valid covariance
/// and correlation draws stay in their (convex) valid sets.
pub fn posterior_mean_state(chains: &[ChainStore]) -> Result<ParameterState> {
    let layout = validate_consistent(chains)?.clone();
    let mut acc = vec![0.0; layout.len()];
    let mut count = 0usize;
    for chain in chains {
        for draw in &chain.draws {
            for (a, v) in acc.iter_mut().zip(layout.flatten(draw)) {
                *a += v;
            }
            count += 1;
        }
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    layout.unflatten(&acc)
}

/// One outcome pair's correlations at each level plus the overall value.
/// The draw-wise summaries are the normative report; the plug-in value at
/// the posterior-mean draw is carried alongside for comparison.
#[derive(Debug, Clone)]
pub struct CorrelationDecomposition {
    /// Outcome indices, first > second, zero-based.
    pub pair: (usize, usize),
    pub residual: FunctionalSummary,
    pub individual: Option<FunctionalSummary>,
    pub couple_fixed: Option<FunctionalSummary>,
    pub couple_wave: Option<FunctionalSummary>,
    pub overall: FunctionalSummary,
    pub overall_plug_in: f64,
}

pub fn correlation_decompositions(chains: &[ChainStore]) -> Result<Vec<CorrelationDecomposition>> {
    let layout = validate_consistent(chains)?;
    let r = layout.n_outcomes;
    let levels = layout.levels;
    let mean_state = posterior_mean_state(chains)?;
    let mut out = Vec::with_capacity(r * (r - 1) / 2);
    for a in 1..r {
        for b in 0..a {
            let level_summary = |pick: fn(&ParameterState) -> &Option<CovMatrix>, active: bool| {
                active
                    .then(|| {
                        summarize_functional(chains, |d| {
                            level_correlation(pick(d).as_ref().expect("level active"), a, b)
                        })
                    })
                    .transpose()
            };
            out.push(CorrelationDecomposition {
                pair: (a, b),
                residual: summarize_functional(chains, |d| {
                    d.rho_e.entry(CorrVector::pair_index(a, b))
                })?,
                individual: level_summary(|d| &d.sigma_u, levels.individual)?,
                couple_fixed: level_summary(|d| &d.sigma_v, levels.couple_fixed)?,
                couple_wave: level_summary(|d| &d.sigma_w, levels.couple_wave)?,
                overall: summarize_functional(chains, |d| overall_latent_correlation(d, a, b))?,
                overall_plug_in: overall_latent_correlation(&mean_state, a, b),
            });
        }
    }
    Ok(out)
}

/// P(y_r = 1) at one covariate profile: the zero-mean normal effects are
/// integrated out analytically, leaving a probit with inflated scale.
pub fn marginal_probability(draw: &ParameterState, x: &[f64], outcome: usize) -> f64 {
    let mut lin = 0.0;
    for (p, &xv) in x.iter().enumerate() {
        lin += draw.beta[(outcome, p)] * xv;
    }
    normal::cdf(lin / total_latent_variance(draw, outcome).sqrt())
}

/// Average predicted probability per outcome at `covariate = value`, holding
/// each row's remaining covariates at their observed values and evaluating at
/// the posterior-mean parameters.
pub fn predicted_marginal_probabilities(
    chains: &[ChainStore],
    data: &PanelDataset,
    covariate: &str,
    value: f64,
) -> Result<Vec<f64>> {
    let layout = validate_consistent(chains)?;
    if data.n_covariates() != layout.n_covariates {
        return Err(Error::domain(format!(
            "data has {} covariates but the chains expect {}",
            data.n_covariates(),
            layout.n_covariates
        )));
    }
    let k = data
        .covariate_names()
        .iter()
        .position(|n| n == covariate)
        .ok_or_else(|| {
            Error::domain(format!(
                "unknown covariate {covariate}; available: {}",
                data.covariate_names().join(", ")
            ))
        })?;
    let r = layout.n_outcomes;
    let state = posterior_mean_state(chains)?;
    let mut acc = vec![0.0; r];
    let mut x = vec![0.0; data.n_covariates()];
    for row in data.rows() {
        x.copy_from_slice(&row.x);
        x[k] = value;
        for (rr, slot) in acc.iter_mut().enumerate() {
            *slot += marginal_probability(&state, &x, rr);
        }
    }
    for slot in &mut acc {
        *slot /= data.rows().len() as f64;
    }
    Ok(acc)
}

const RHO_BOUND: f64 = 1.0 - 1e-6;
const BISECT_TOL: f64 = 1e-8;
const SE_STEP: f64 = 1e-4;

/// P(X > h, Y > k) under a standard bivariate normal with correlation rho,
/// via composite Gauss-Legendre integration of phi(x) sf((k - rho x)/s).
pub fn bivariate_orthant_upper(h: f64, k: f64, rho: f64) -> f64 {
    assert!((-1.0..=1.0).contains(&rho), "correlation {rho} outside [-1, 1]");
    if rho == 1.0 {
        return normal::sf(h.max(k));
    }
    if rho == -1.0 {
        return (normal::cdf(-k) - normal::cdf(h)).max(0.0);
    }
    let s = (1.0 - rho * rho).sqrt();
    // phi mass outside [-9, 9] is ~1e-19, far below the bisection tolerance.
    let lo = h.max(-9.0);
    let hi = 9.0;
    if lo >= hi {
        return 0.0;
    }
    const NODES: [f64; 5] = [
        0.148_874_338_981_631_2,
        0.433_395_394_129_247_2,
        0.679_409_568_299_024_4,
        0.865_063_366_688_984_5,
        0.973_906_528_517_171_7,
    ];
    const WEIGHTS: [f64; 5] = [
        0.295_524_224_714_752_9,
        0.269_266_719_309_996_3,
        0.219_086_362_515_982,
        0.149_451_349_150_580_6,
        0.066_671_344_308_688_1,
    ];
    const PANELS: usize = 32;
    let width = (hi - lo) / PANELS as f64;
    let half = 0.5 * width;
    let mut total = 0.0;
    for panel in 0..PANELS {
        let mid = lo + (panel as f64 + 0.5) * width;
        for (t, w) in NODES.iter().zip(WEIGHTS) {
            for x in [mid - half * t, mid + half * t] {
                total += w * half * normal::pdf(x) * normal::sf((k - rho * x) / s);
            }
        }
    }
    total
}

/// Maximum-likelihood tetrachoric correlation of a 2x2 table with cells
/// (n11, n10, n01, n00): thresholds from the margins, rho by bisection on the
/// orthant-probability equation, standard error from the inverse observed
/// information.
#[derive(Debug, Clone, Copy)]
pub struct TetrachoricEstimate {
    pub rho: f64,
    /// NaN when the estimate sits on the boundary.
    pub se: f64,
    pub threshold_row: f64,
    pub threshold_col: f64,
    pub at_boundary: bool,
}

pub fn tetrachoric_correlation(n11: u64, n10: u64, n01: u64, n00: u64) -> Result<TetrachoricEstimate> {
    let n = n11 + n10 + n01 + n00;
    if n == 0 {
        return Err(Error::domain("tetrachoric correlation of an empty table"));
    }
    if [n11 + n10, n01 + n00, n11 + n01, n10 + n00].contains(&0) {
        return Err(Error::domain(
            "a margin of the 2x2 table is empty, so the tetrachoric correlation is undefined",
        ));
    }
    let nf = n as f64;
    let h = normal::quantile_sf((n11 + n10) as f64 / nf);
    let k = normal::quantile_sf((n11 + n01) as f64 / nf);
    let target = n11 as f64 / nf;
    let objective = |rho: f64| bivariate_orthant_upper(h, k, rho) - target;

    // The orthant mass is increasing in rho, so the sign at the clamped
    // endpoints tells whether the root is interior.
    let (rho, at_boundary) = if objective(-RHO_BOUND) >= 0.0 {
        (-RHO_BOUND, true)
    } else if objective(RHO_BOUND) <= 0.0 {
        (RHO_BOUND, true)
    } else {
        let mut lo = -RHO_BOUND;
        let mut hi = RHO_BOUND;
        while hi - lo > BISECT_TOL {
            let mid = 0.5 * (lo + hi);
            if objective(mid) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi), false)
    };

    let se = if at_boundary {
        f64::NAN
    } else {
        let counts = [n11 as f64, n10 as f64, n01 as f64, n00 as f64];
        let loglik = |rho: f64| {
            let p11 = bivariate_orthant_upper(h, k, rho);
            let cells = [
                p11,
                normal::sf(h) - p11,
                normal::sf(k) - p11,
                1.0 - normal::sf(h) - normal::sf(k) + p11,
            ];
            counts
                .iter()
                .zip(cells)
                .map(|(&c, p)| if c == 0.0 { 0.0 } else { c * p.max(1e-300).ln() })
                .sum::<f64>()
        };
        let info =
            -(loglik(rho + SE_STEP) - 2.0 * loglik(rho) + loglik(rho - SE_STEP)) / SE_STEP.powi(2);
        if info > 0.0 {
            1.0 / info.sqrt()
        } else {
            f64::NAN
        }
    };
    Ok(TetrachoricEstimate { rho, se, threshold_row: h, threshold_col: k, at_boundary })
}
