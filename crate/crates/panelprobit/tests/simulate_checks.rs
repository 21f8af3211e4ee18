//! The generator against the model it claims to draw from: marginal outcome
//! frequencies, the latent covariance block structure implied by shared
//! effects, and the structural soundness of the partner links.

use std::collections::HashMap;

use nalgebra::DMatrix;

use panelprobit::data::{CoupleClusterIndex, PanelDataset};
use panelprobit::sampler::ParameterState;
use panelprobit::simulate::{simulate_dataset, SimulatedData, SimulationScenario};
use panelprobit::{CorrVector, CovMatrix};

fn scalar_cov(v: f64) -> CovMatrix {
    CovMatrix::new(DMatrix::from_element(1, 1, v)).unwrap()
}

fn correlation(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (ma, mb) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (a, b) in pairs {
        saa += (a - ma) * (a - ma);
        sbb += (b - mb) * (b - mb);
        sab += (a - ma) * (b - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn row_index(data: &PanelDataset) -> HashMap<(String, u32), usize> {
    data.rows()
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.individual_id.clone(), r.wave), i))
        .collect()
}

#[test]
fn pure_noise_scenario_gives_fair_coins() {
    let scenario = SimulationScenario {
        n_units: 50_000,
        couple_fraction: 0.0,
        n_waves: 1,
        form_prob: 0.0,
        dissolve_prob: 0.0,
        n_covariates: 1,
        intercept: true,
        truth: ParameterState {
            beta: DMatrix::zeros(2, 1),
            sigma_u: None,
            sigma_v: None,
            sigma_w: None,
            rho_e: CorrVector::identity(2),
        },
        seed: 60,
    };
    let sim = simulate_dataset(&scenario).unwrap();
    let rows = sim.dataset.rows();
    let n = rows.len() as f64;
    for outcome in 0..2 {
        let share = rows.iter().filter(|r| r.y[outcome] == Some(true)).count() as f64 / n;
        assert!((share - 0.5).abs() < 0.01, "outcome {outcome} share {share}");
    }
    let pairs: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| {
            (
                if r.y[0] == Some(true) { 1.0 } else { 0.0 },
                if r.y[1] == Some(true) { 1.0 } else { 0.0 },
            )
        })
        .collect();
    let corr = correlation(&pairs);
    assert!(corr.abs() < 0.01, "independent outcomes correlate {corr}");
}

/// Couples observed two waves with no churn; effect variances at the scale
/// of the published couple tables. The latent propensities must then show
/// the three-block correlation structure the shared effects imply.
#[test]
fn latent_blocks_follow_the_shared_effects() {
    let (su, sv, sw) = (0.786, 1.364, 1.373);
    let total = su + sv + sw + 1.0;
    let scenario = SimulationScenario {
        n_units: 30_000,
        couple_fraction: 1.0,
        n_waves: 2,
        form_prob: 0.0,
        dissolve_prob: 0.0,
        n_covariates: 1,
        intercept: true,
        truth: ParameterState {
            beta: DMatrix::zeros(1, 1),
            sigma_u: Some(scalar_cov(su)),
            sigma_v: Some(scalar_cov(sv)),
            sigma_w: Some(scalar_cov(sw)),
            rho_e: CorrVector::identity(1),
        },
        seed: 61,
    };
    let sim = simulate_dataset(&scenario).unwrap();
    let SimulatedData { dataset, latent, .. } = &sim;
    let index = row_index(dataset);
    let ystar = |row: usize| latent.y_star[row];

    let mut same_person = Vec::new();
    let mut partner_same_wave = Vec::new();
    let mut partner_cross_wave = Vec::new();
    for (i, row) in dataset.rows().iter().enumerate() {
        if row.wave == 1 {
            if let Some(&later) = index.get(&(row.individual_id.clone(), 2)) {
                same_person.push((ystar(i), ystar(later)));
            }
        }
        if let Some(pid) = &row.partner_id {
            if *pid < row.individual_id {
                continue;
            }
            if let Some(&mate) = index.get(&(pid.clone(), row.wave)) {
                partner_same_wave.push((ystar(i), ystar(mate)));
            }
            if row.wave == 1 {
                if let Some(&mate_later) = index.get(&(pid.clone(), 2)) {
                    partner_cross_wave.push((ystar(i), ystar(mate_later)));
                }
            }
        }
    }
    assert!(same_person.len() >= 50_000);
    assert!(partner_same_wave.len() >= 50_000);
    assert!(partner_cross_wave.len() >= 25_000);

    // same person across waves shares u and v
    let got = correlation(&same_person);
    let want = (su + sv) / total;
    assert!((got - want).abs() < 0.01, "same person: {got} vs {want}");
    // partners at the same wave share v and w
    let got = correlation(&partner_same_wave);
    let want = (sv + sw) / total;
    assert!((got - want).abs() < 0.01, "partners same wave: {got} vs {want}");
    // partners across waves share only v
    let got = correlation(&partner_cross_wave);
    let want = sv / total;
    assert!((got - want).abs() < 0.01, "partners across waves: {got} vs {want}");
}

#[test]
fn partner_links_are_reciprocal_and_clusters_match_units() {
    let scenario = SimulationScenario {
        n_units: 2_000,
        couple_fraction: 0.6,
        n_waves: 4,
        form_prob: 0.15,
        dissolve_prob: 0.1,
        n_covariates: 2,
        intercept: true,
        truth: ParameterState {
            beta: DMatrix::zeros(1, 2),
            sigma_u: Some(scalar_cov(0.8)),
            sigma_v: Some(scalar_cov(1.0)),
            sigma_w: Some(scalar_cov(0.9)),
            rho_e: CorrVector::identity(1),
        },
        seed: 62,
    };
    let sim = simulate_dataset(&scenario).unwrap();
    let index = row_index(&sim.dataset);
    let mut linked = 0usize;
    for row in sim.dataset.rows() {
        if let Some(pid) = &row.partner_id {
            let mate_row = index
                .get(&(pid.clone(), row.wave))
                .expect("named partner appears at the same wave");
            let back = sim.dataset.rows()[*mate_row].partner_id.as_ref();
            assert_eq!(back, Some(&row.individual_id), "link must point back");
            linked += 1;
        }
    }
    assert!(linked > 0);
    let clusters = CoupleClusterIndex::build(&sim.dataset);
    assert_eq!(clusters.n_clusters(), scenario.n_units);
}

#[test]
fn covariates_are_standard_normal_beyond_the_intercept() {
    let scenario = SimulationScenario {
        n_units: 20_000,
        couple_fraction: 0.0,
        n_waves: 1,
        form_prob: 0.0,
        dissolve_prob: 0.0,
        n_covariates: 3,
        intercept: true,
        truth: ParameterState {
            beta: DMatrix::zeros(1, 3),
            sigma_u: None,
            sigma_v: None,
            sigma_w: None,
            rho_e: CorrVector::identity(1),
        },
        seed: 63,
    };
    let sim = simulate_dataset(&scenario).unwrap();
    let rows = sim.dataset.rows();
    let n = rows.len() as f64;
    assert!(rows.iter().all(|r| r.x[0] == 1.0), "intercept column is constant one");
    for j in 1..3 {
        let mean = rows.iter().map(|r| r.x[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r.x[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.03, "covariate {j} mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "covariate {j} variance {var}");
    }
}

#[test]
fn intercept_free_scenarios_draw_every_covariate() {
    let scenario = SimulationScenario {
        n_units: 5_000,
        couple_fraction: 0.0,
        n_waves: 1,
        form_prob: 0.0,
        dissolve_prob: 0.0,
        n_covariates: 1,
        intercept: false,
        truth: ParameterState {
            beta: DMatrix::zeros(1, 1),
            sigma_u: None,
            sigma_v: None,
            sigma_w: None,
            rho_e: CorrVector::identity(1),
        },
        seed: 64,
    };
    let sim = simulate_dataset(&scenario).unwrap();
    let rows = sim.dataset.rows();
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.x[0]).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.x[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "variance {var}");
}
