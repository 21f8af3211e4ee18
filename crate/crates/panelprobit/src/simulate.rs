//! Forward generator of synthetic panels with couple formation and
//! dissolution; the ground-truth oracle behind the recovery tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nalgebra::DMatrix;

use crate::data::{CoupleClusterIndex, ObservationRow, PanelDataset};
use crate::error::{Error, Result};
use crate::rng::{substream, tag};
use crate::sampler::{FitData, LatentState, ParameterState};
use crate::stochastic::cholesky_lower;

// Stream kinds under the simulation tag.
const STRUCTURE: u64 = 1;
const EFFECT_U: u64 = 2;
const EFFECT_V: u64 = 3;
const EFFECT_W: u64 = 4;
const COVARIATE: u64 = 5;
const RESIDUAL: u64 = 6;

/// Generator settings. Each unit is one couple cluster seeded by a head
/// individual; partners always come from a fresh reservoir, so a unit's
/// members stay one connected component and cluster sizes above two arise
/// from re-partnering.
#[derive(Debug, Clone)]
pub struct SimulationScenario {
    pub n_units: usize,
    /// Fraction of units that start wave 1 partnered.
    pub couple_fraction: f64,
    pub n_waves: u32,
    /// Per-wave chance that a single head forms a union.
    pub form_prob: f64,
    /// Per-wave chance that a current union dissolves.
    pub dissolve_prob: f64,
    /// Total covariate count, including the intercept when present.
    pub n_covariates: usize,
    /// Fix the first covariate at 1; the rest are standard normal.
    pub intercept: bool,
    pub truth: ParameterState,
    pub seed: u64,
}

impl SimulationScenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 {
            return Err(Error::domain("scenario needs at least one unit"));
        }
        if self.n_waves == 0 {
            return Err(Error::domain("scenario needs at least one wave"));
        }
        for (name, p) in [
            ("couple_fraction", self.couple_fraction),
            ("form_prob", self.form_prob),
            ("dissolve_prob", self.dissolve_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::domain(format!("{name} = {p} is not a probability")));
            }
        }
        if self.n_covariates == 0 {
            return Err(Error::domain("scenario needs at least one covariate"));
        }
        if self.n_covariates != self.truth.n_covariates() {
            return Err(Error::domain(format!(
                "scenario declares {} covariates but the true coefficients have {}",
                self.n_covariates,
                self.truth.n_covariates()
            )));
        }
        Ok(())
    }
}

/// Dataset plus the truth that generated it. `latent` is aligned with
/// `FitData::new(&dataset, &CoupleClusterIndex::build(&dataset))`: y* is
/// row-major over dataset rows, effects are indexed by the fit's unit
/// numbering.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: PanelDataset,
    pub truth: ParameterState,
    pub latent: LatentState,
}

fn member_id(unit: usize, member: usize) -> String {
    if member < 26 {
        format!("i{unit:06}_{}", (b'a' + member as u8) as char)
    } else {
        format!("i{unit:06}_z{member}")
    }
}

fn effect_draw(chol: &Option<DMatrix<f64>>, r: usize, rng_words: &[u64], seed: u64) -> Vec<f64> {
    match chol {
        None => vec![0.0; r],
        Some(l) => {
            let mut rng = substream(seed, rng_words);
            let z: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
            (0..r).map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum()).collect()
        }
    }
}

pub fn simulate_dataset(scenario: &SimulationScenario) -> Result<SimulatedData> {
    scenario.validate()?;
    let truth = &scenario.truth;
    let r = truth.n_outcomes();
    let p = truth.n_covariates();
    let seed = scenario.seed;
    let chol = |sigma: &Option<crate::stochastic::CovMatrix>| {
        sigma.as_ref().map(|s| cholesky_lower(s.as_matrix())).transpose()
    };
    let chol_u = chol(&truth.sigma_u)?;
    let chol_v = chol(&truth.sigma_v)?;
    let chol_w = chol(&truth.sigma_w)?;
    let chol_e = cholesky_lower(&truth.rho_e.to_matrix())?;

    let mut rows = Vec::new();
    let mut row_y_star: Vec<Vec<f64>> = Vec::new();
    let mut row_u: Vec<Vec<f64>> = Vec::new();
    let mut row_v: Vec<Vec<f64>> = Vec::new();
    let mut row_w: Vec<Vec<f64>> = Vec::new();

    for unit in 0..scenario.n_units {
        let unit_w = unit as u64;
        let mut structure = substream(seed, &[tag::SIMULATE, STRUCTURE, unit_w]);
        let v = effect_draw(&chol_v, r, &[tag::SIMULATE, EFFECT_V, unit_w], seed);
        let mut member_u = vec![effect_draw(&chol_u, r, &[tag::SIMULATE, EFFECT_U, unit_w, 0], seed)];
        let mut partner: Option<usize> = None;
        if structure.gen::<f64>() < scenario.couple_fraction {
            member_u.push(effect_draw(&chol_u, r, &[tag::SIMULATE, EFFECT_U, unit_w, 1], seed));
            partner = Some(1);
        }
        for wave in 1..=scenario.n_waves {
            if wave > 1 {
                match partner {
                    Some(_) => {
                        if structure.gen::<f64>() < scenario.dissolve_prob {
                            partner = None;
                        }
                    }
                    None => {
                        if structure.gen::<f64>() < scenario.form_prob {
                            let m = member_u.len();
                            member_u.push(effect_draw(
                                &chol_u,
                                r,
                                &[tag::SIMULATE, EFFECT_U, unit_w, m as u64],
                                seed,
                            ));
                            partner = Some(m);
                        }
                    }
                }
            }
            let w = effect_draw(&chol_w, r, &[tag::SIMULATE, EFFECT_W, unit_w, wave as u64], seed);
            for member in 0..member_u.len() {
                let member_w = member as u64;
                let mut x_rng: ChaCha8Rng =
                    substream(seed, &[tag::SIMULATE, COVARIATE, unit_w, wave as u64, member_w]);
                let mut x = Vec::with_capacity(p);
                for j in 0..p {
                    if j == 0 && scenario.intercept {
                        x.push(1.0);
                    } else {
                        x.push(StandardNormal.sample(&mut x_rng));
                    }
                }
                let mut e_rng =
                    substream(seed, &[tag::SIMULATE, RESIDUAL, unit_w, wave as u64, member_w]);
                let z: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut e_rng)).collect();
                let u = &member_u[member];
                let mut y_star = vec![0.0; r];
                let mut y = Vec::with_capacity(r);
                for rr in 0..r {
                    let mut lin = 0.0;
                    for (pp, &xv) in x.iter().enumerate() {
                        lin += truth.beta[(rr, pp)] * xv;
                    }
                    let e: f64 = (0..=rr).map(|j| chol_e[(rr, j)] * z[j]).sum();
                    y_star[rr] = lin + u[rr] + v[rr] + w[rr] + e;
                    y.push(Some(y_star[rr] > 0.0));
                }
                let partner_id = match partner {
                    Some(pm) if member == 0 => Some(member_id(unit, pm)),
                    Some(pm) if member == pm => Some(member_id(unit, 0)),
                    _ => None,
                };
                rows.push(ObservationRow {
                    individual_id: member_id(unit, member),
                    wave,
                    partner_id,
                    y,
                    x,
                });
                row_y_star.push(y_star);
                row_u.push(u.clone());
                row_v.push(v.clone());
                row_w.push(w.clone());
            }
        }
    }

    let outcome_names = (1..=r).map(|i| i.to_string()).collect();
    let covariate_names = (0..p)
        .map(|j| {
            if j == 0 && scenario.intercept {
                "intercept".to_string()
            } else if scenario.intercept {
                format!("z{j}")
            } else {
                format!("z{}", j + 1)
            }
        })
        .collect();
    let dataset = PanelDataset::new(outcome_names, covariate_names, rows)?;
    let clusters = CoupleClusterIndex::build(&dataset);
    debug_assert_eq!(clusters.n_clusters(), scenario.n_units);
    let fit = FitData::new(&dataset, &clusters)?;
    let mut latent = LatentState::zeros(&fit);
    for i in 0..fit.n_rows() {
        latent.y_star[i * r..(i + 1) * r].copy_from_slice(&row_y_star[i]);
        let iu = fit.row_individual[i] * r;
        latent.u[iu..iu + r].copy_from_slice(&row_u[i]);
        let iv = fit.row_cluster[i] * r;
        latent.v[iv..iv + r].copy_from_slice(&row_v[i]);
        let iw = fit.row_wave_unit[i] * r;
        latent.w[iw..iw + r].copy_from_slice(&row_w[i]);
    }
    Ok(SimulatedData { dataset, truth: truth.clone(), latent })
}
