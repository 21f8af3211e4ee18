//! Convergence checks across chains and pooled posterior summaries.

use crate::error::{Error, Result};
use crate::sampler::{ChainStore, ParamLayout};

/// Potential scale reduction factor, classic whole-chain form:
/// sqrt((n - 1)/n + B/(n W)) with B the between-chain and W the mean
/// within-chain variance. No split-chain refinement and no degrees-of-freedom
/// correction. Identical chains (B = 0) give exactly sqrt((n - 1)/n);
/// degenerate chains with distinct means (W = 0, B > 0) give infinity.
pub fn psrf(chains: &[&[f64]]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::domain("scale reduction needs at least two chains"));
    }
    let n = chains[0].len();
    if n < 2 {
        return Err(Error::domain("scale reduction needs at least two draws per chain"));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::domain("chains have unequal lengths"));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let b = nf / (m as f64 - 1.0) * means.iter().map(|&mj| (mj - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, &mj)| c.iter().map(|&x| (x - mj).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    if b == 0.0 {
        return Ok(((nf - 1.0) / nf).sqrt());
    }
    if w == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(((nf - 1.0) / nf + b / (nf * w)).sqrt())
}

/// Type-7 quantile (linear interpolation of order statistics) of an already
/// sorted, nonempty sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    assert!((0.0..=1.0).contains(&p), "quantile level {p} outside [0, 1]");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Cumulative means of a draw sequence; the last element is the plain mean.
pub fn running_means(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        out.push(acc / (i + 1) as f64);
    }
    out
}

#[derive(Debug, Clone)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub median: f64,
    pub q97_5: f64,
    /// None when only a single chain is available.
    pub psrf: Option<f64>,
    /// Central 95% interval excludes zero.
    pub excludes_zero: bool,
}

#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub parameters: Vec<ParameterSummary>,
}

impl PosteriorSummary {
    pub fn get(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Chains must come from one run: same spec hash and layout, nonempty draws.
pub(crate) fn validate_consistent(chains: &[ChainStore]) -> Result<&ParamLayout> {
    let first = chains.first().ok_or_else(|| Error::domain("no chains given"))?;
    for c in chains {
        if c.spec_hash != first.spec_hash {
            return Err(Error::domain(format!(
                "chain {} carries spec hash {} but chain {} carries {}; refusing to pool runs with different configurations",
                c.chain_index, c.spec_hash, first.chain_index, first.spec_hash
            )));
        }
        if c.layout != first.layout {
            return Err(Error::domain("chains disagree on the parameter layout"));
        }
        if c.draws.is_empty() {
            return Err(Error::domain(format!("chain {} has no draws", c.chain_index)));
        }
    }
    Ok(&first.layout)
}

/// Pooled moments and quantiles per parameter, with PSRF when two or more
/// chains are available.
pub fn summarize(chains: &[ChainStore]) -> Result<PosteriorSummary> {
    let layout = validate_consistent(chains)?;
    let names = layout.names();
    let per_chain: Vec<Vec<Vec<f64>>> = chains.iter().map(|c| c.parameter_series()).collect();
    let mut parameters = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let series: Vec<&[f64]> = per_chain.iter().map(|s| s[k].as_slice()).collect();
        let rhat = if chains.len() >= 2 { Some(psrf(&series)?) } else { None };
        let mut pooled: Vec<f64> = series.iter().flat_map(|s| s.iter().copied()).collect();
        pooled.sort_by(|a, b| a.total_cmp(b));
        let m = mean(&pooled);
        let sd = if pooled.len() < 2 {
            0.0
        } else {
            (pooled.iter().map(|&x| (x - m).powi(2)).sum::<f64>() / (pooled.len() - 1) as f64)
                .sqrt()
        };
        let q2_5 = quantile_sorted(&pooled, 0.025);
        let q97_5 = quantile_sorted(&pooled, 0.975);
        parameters.push(ParameterSummary {
            name,
            mean: m,
            sd,
            q2_5,
            median: quantile_sorted(&pooled, 0.5),
            q97_5,
            psrf: rhat,
            excludes_zero: q2_5 > 0.0 || q97_5 < 0.0,
        });
    }
    Ok(PosteriorSummary { parameters })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
