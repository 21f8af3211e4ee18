//! Draw storage and its CSV form.
//!
//! A chain file is a handful of `#` comment lines (seed, spec hash, chain
//! index, Metropolis counters, frozen step sizes) followed by an ordinary
//! CSV table, one row per kept draw. The column labels encode the model
//! structure, so a reader recovers outcome count, covariate count, and the
//! active random-effect levels from the header alone.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::{ActiveLevels, ModelSpec, ParameterState};
use crate::error::{Error, Result};
use crate::stochastic::{CorrVector, CovMatrix};

/// Flat ordering of a parameter state: coefficients by outcome then
/// covariate, covariance lower triangles by level, residual correlations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_outcomes: usize,
    pub n_covariates: usize,
    pub levels: ActiveLevels,
}

impl ParamLayout {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        ParamLayout {
            n_outcomes: spec.n_outcomes,
            n_covariates: spec.n_covariates,
            levels: spec.levels,
        }
    }

    pub fn len(&self) -> usize {
        let r = self.n_outcomes;
        let tri = r * (r + 1) / 2;
        let n_levels = [self.levels.individual, self.levels.couple_fixed, self.levels.couple_wave]
            .iter()
            .filter(|&&a| a)
            .count();
        r * self.n_covariates + n_levels * tri + r * (r - 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column labels, 1-based: `b_r_p`, then `sigma_u_r_c` (r >= c) for each
    /// active level, then `rho_e_r_c` (r > c).
    pub fn names(&self) -> Vec<String> {
        let r = self.n_outcomes;
        let mut names = Vec::with_capacity(self.len());
        for rr in 1..=r {
            for pp in 1..=self.n_covariates {
                names.push(format!("b_{rr}_{pp}"));
            }
        }
        for (active, level) in [
            (self.levels.individual, "u"),
            (self.levels.couple_fixed, "v"),
            (self.levels.couple_wave, "w"),
        ] {
            if active {
                for rr in 1..=r {
                    for cc in 1..=rr {
                        names.push(format!("sigma_{level}_{rr}_{cc}"));
                    }
                }
            }
        }
        for rr in 2..=r {
            for cc in 1..rr {
                names.push(format!("rho_e_{rr}_{cc}"));
            }
        }
        names
    }

    /// Recover the layout from a header; the labels must match `names()` of
    /// some layout exactly.
    pub fn from_names(cols: &[&str]) -> Result<Self> {
        let mut n_outcomes = 0;
        let mut n_covariates = 0;
        for col in cols {
            if let Some(rest) = col.strip_prefix("b_") {
                if let Some((rr, pp)) = parse_index_pair(rest) {
                    n_outcomes = n_outcomes.max(rr);
                    n_covariates = n_covariates.max(pp);
                }
            }
        }
        if n_outcomes == 0 || n_covariates == 0 {
            return Err(Error::domain("header has no coefficient columns (b_r_p)"));
        }
        let levels = ActiveLevels {
            individual: cols.iter().any(|c| c.starts_with("sigma_u_")),
            couple_fixed: cols.iter().any(|c| c.starts_with("sigma_v_")),
            couple_wave: cols.iter().any(|c| c.starts_with("sigma_w_")),
        };
        let candidate = ParamLayout { n_outcomes, n_covariates, levels };
        let expected = candidate.names();
        if expected.len() != cols.len() || expected.iter().zip(cols).any(|(e, c)| e != c) {
            return Err(Error::domain(
                "header columns do not form a valid parameter layout",
            ));
        }
        Ok(candidate)
    }

    pub fn flatten(&self, state: &ParameterState) -> Vec<f64> {
        let r = self.n_outcomes;
        let mut out = Vec::with_capacity(self.len());
        for rr in 0..r {
            for pp in 0..self.n_covariates {
                out.push(state.beta[(rr, pp)]);
            }
        }
        for sigma in [&state.sigma_u, &state.sigma_v, &state.sigma_w].into_iter().flatten() {
            let m = sigma.as_matrix();
            for rr in 0..r {
                for cc in 0..=rr {
                    out.push(m[(rr, cc)]);
                }
            }
        }
        out.extend_from_slice(state.rho_e.values());
        out
    }

    pub fn unflatten(&self, values: &[f64]) -> Result<ParameterState> {
        if values.len() != self.len() {
            return Err(Error::domain(format!(
                "expected {} parameter values, got {}",
                self.len(),
                values.len()
            )));
        }
        let r = self.n_outcomes;
        let p = self.n_covariates;
        let mut pos = 0;
        let beta = DMatrix::from_fn(r, p, |rr, pp| values[rr * p + pp]);
        pos += r * p;
        let mut take_cov = |active: bool| -> Result<Option<CovMatrix>> {
            if !active {
                return Ok(None);
            }
            let mut m = DMatrix::zeros(r, r);
            for rr in 0..r {
                for cc in 0..=rr {
                    m[(rr, cc)] = values[pos];
                    m[(cc, rr)] = values[pos];
                    pos += 1;
                }
            }
            CovMatrix::new(m).map(Some)
        };
        let sigma_u = take_cov(self.levels.individual)?;
        let sigma_v = take_cov(self.levels.couple_fixed)?;
        let sigma_w = take_cov(self.levels.couple_wave)?;
        let rho_e = CorrVector::new(r, values[pos..].to_vec())?;
        Ok(ParameterState { beta, sigma_u, sigma_v, sigma_w, rho_e })
    }
}

/// Kept draws of one chain plus the bookkeeping that the reports need.
#[derive(Debug, Clone)]
pub struct ChainStore {
    pub chain_index: usize,
    pub seed: u64,
    pub spec_hash: String,
    pub layout: ParamLayout,
    /// Global iteration at which each draw was recorded.
    pub draw_iterations: Vec<usize>,
    pub draws: Vec<ParameterState>,
    pub post_burnin_accept: Vec<u64>,
    pub post_burnin_reject: Vec<u64>,
    pub frozen_gamma: Vec<f64>,
    /// (iteration, step sizes) after each burn-in adaptation; not persisted.
    pub adapt_trace: Vec<(usize, Vec<f64>)>,
}

impl ChainStore {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    /// One series per parameter, in layout order, across kept draws.
    pub fn parameter_series(&self) -> Vec<Vec<f64>> {
        let mut series = vec![Vec::with_capacity(self.draws.len()); self.layout.len()];
        for draw in &self.draws {
            for (slot, value) in series.iter_mut().zip(self.layout.flatten(draw)) {
                slot.push(value);
            }
        }
        series
    }

    pub fn post_burnin_rejection_rates(&self) -> Vec<f64> {
        self.post_burnin_accept
            .iter()
            .zip(&self.post_burnin_reject)
            .map(|(&a, &r)| if a + r == 0 { f64::NAN } else { r as f64 / (a + r) as f64 })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = String::new();
        buf.push_str(&format!("# spec_hash={}\n", self.spec_hash));
        buf.push_str(&format!("# seed={}\n", self.seed));
        buf.push_str(&format!("# chain={}\n", self.chain_index));
        buf.push_str(&format!("# accept={}\n", join_display(&self.post_burnin_accept)));
        buf.push_str(&format!("# reject={}\n", join_display(&self.post_burnin_reject)));
        buf.push_str(&format!("# gamma={}\n", join_display(&self.frozen_gamma)));
        buf.push_str("draw");
        for name in self.layout.names() {
            buf.push(',');
            buf.push_str(&name);
        }
        buf.push('\n');
        for (it, draw) in self.draw_iterations.iter().zip(&self.draws) {
            buf.push_str(&it.to_string());
            for value in self.layout.flatten(draw) {
                buf.push(',');
                buf.push_str(&format!("{value}"));
            }
            buf.push('\n');
        }
        let mut file = fs::File::create(path)?;
        file.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<ChainStore> {
        let text = fs::read_to_string(path)?;
        let at = |message: String| Error::Artifact {
            path: path.display().to_string(),
            message,
        };
        let mut spec_hash = None;
        let mut seed = None;
        let mut chain_index = None;
        let mut accept = None;
        let mut reject = None;
        let mut gamma = None;

        let mut lines = text.lines().enumerate().peekable();
        while let Some(&(n, line)) = lines.peek() {
            let Some(comment) = line.strip_prefix('#') else { break };
            lines.next();
            let (key, value) = comment
                .trim()
                .split_once('=')
                .ok_or_else(|| at(format!("line {}: malformed comment, expected key=value", n + 1)))?;
            let value = value.trim();
            match key.trim() {
                "spec_hash" => spec_hash = Some(value.to_string()),
                "seed" => {
                    seed = Some(value.parse::<u64>().map_err(|_| {
                        at(format!("line {}: seed is not an integer", n + 1))
                    })?)
                }
                "chain" => {
                    chain_index = Some(value.parse::<usize>().map_err(|_| {
                        at(format!("line {}: chain index is not an integer", n + 1))
                    })?)
                }
                "accept" => accept = Some(parse_list::<u64>(value).map_err(|m| at(format!("line {}: {m}", n + 1)))?),
                "reject" => reject = Some(parse_list::<u64>(value).map_err(|m| at(format!("line {}: {m}", n + 1)))?),
                "gamma" => gamma = Some(parse_list::<f64>(value).map_err(|m| at(format!("line {}: {m}", n + 1)))?),
                other => return Err(at(format!("line {}: unknown comment key {other}", n + 1))),
            }
        }
        let spec_hash = spec_hash.ok_or_else(|| at("missing spec_hash comment".into()))?;
        let seed = seed.ok_or_else(|| at("missing seed comment".into()))?;
        let chain_index = chain_index.ok_or_else(|| at("missing chain comment".into()))?;
        let accept = accept.ok_or_else(|| at("missing accept comment".into()))?;
        let reject = reject.ok_or_else(|| at("missing reject comment".into()))?;
        let gamma = gamma.ok_or_else(|| at("missing gamma comment".into()))?;

        let (header_no, header) = lines
            .next()
            .ok_or_else(|| at("file ends before the header row".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("draw") {
            return Err(at(format!("line {}: first column must be draw", header_no + 1)));
        }
        let names: Vec<&str> = cols.collect();
        let layout = ParamLayout::from_names(&names)
            .map_err(|e| at(format!("line {}: {e}", header_no + 1)))?;
        let n_pairs = layout.n_outcomes * (layout.n_outcomes - 1) / 2;
        for (label, len) in [("accept", accept.len()), ("reject", reject.len()), ("gamma", gamma.len())] {
            if len != n_pairs {
                return Err(at(format!(
                    "{label} list has {len} entries but the model has {n_pairs} correlation coordinates"
                )));
            }
        }

        let mut draw_iterations = Vec::new();
        let mut draws = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let it = fields
                .next()
                .unwrap()
                .parse::<usize>()
                .map_err(|_| at(format!("line {}: draw index is not an integer", n + 1)))?;
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| at(format!("line {}: non-numeric parameter value", n + 1)))?;
            let state = layout
                .unflatten(&values)
                .map_err(|e| at(format!("line {}: {e}", n + 1)))?;
            draw_iterations.push(it);
            draws.push(state);
        }

        Ok(ChainStore {
            chain_index,
            seed,
            spec_hash,
            layout,
            draw_iterations,
            draws,
            post_burnin_accept: accept,
            post_burnin_reject: reject,
            frozen_gamma: gamma,
            adapt_trace: Vec::new(),
        })
    }
}

fn join_display<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|f| f.parse::<T>().map_err(|_| format!("malformed list entry {f:?}")))
        .collect()
}

fn parse_index_pair(rest: &str) -> Option<(usize, usize)> {
    let (a, b) = rest.split_once('_')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_level_layout() -> ParamLayout {
        ParamLayout {
            n_outcomes: 3,
            n_covariates: 2,
            levels: ActiveLevels::three_level(),
        }
    }

    #[test]
    fn names_follow_layout_order() {
        let layout = ParamLayout {
            n_outcomes: 2,
            n_covariates: 2,
            levels: ActiveLevels::two_level(),
        };
        assert_eq!(
            layout.names(),
            vec!["b_1_1", "b_1_2", "b_2_1", "b_2_2", "sigma_u_1_1", "sigma_u_2_1", "sigma_u_2_2", "rho_e_2_1"]
        );
        assert_eq!(layout.len(), layout.names().len());
    }

    #[test]
    fn from_names_round_trips() {
        for layout in [
            three_level_layout(),
            ParamLayout { n_outcomes: 1, n_covariates: 3, levels: ActiveLevels::two_level() },
            ParamLayout { n_outcomes: 4, n_covariates: 1, levels: ActiveLevels::three_level() },
        ] {
            let names = layout.names();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            assert_eq!(ParamLayout::from_names(&refs).unwrap(), layout);
        }
    }

    #[test]
    fn from_names_rejects_shuffled_columns() {
        let layout = three_level_layout();
        let mut names = layout.names();
        names.swap(0, 1);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        assert!(ParamLayout::from_names(&refs).is_err());
    }

    #[test]
    fn flatten_unflatten_round_trips() {
        let layout = three_level_layout();
        let r = layout.n_outcomes;
        let mut m = DMatrix::identity(r, r);
        m[(1, 0)] = 0.3;
        m[(0, 1)] = 0.3;
        let state = ParameterState {
            beta: DMatrix::from_row_slice(r, 2, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]),
            sigma_u: Some(CovMatrix::new(m.clone()).unwrap()),
            sigma_v: Some(CovMatrix::new(m.clone()).unwrap()),
            sigma_w: Some(CovMatrix::new(m).unwrap()),
            rho_e: CorrVector::new(r, vec![0.2, -0.1, 0.4]).unwrap(),
        };
        let flat = layout.flatten(&state);
        assert_eq!(flat.len(), layout.len());
        let back = layout.unflatten(&flat).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let layout = ParamLayout {
            n_outcomes: 2,
            n_covariates: 1,
            levels: ActiveLevels::two_level(),
        };
        let state = ParameterState {
            beta: DMatrix::from_row_slice(2, 1, &[0.1234567890123, -1.5]),
            sigma_u: Some(CovMatrix::identity(2)),
            sigma_v: None,
            sigma_w: None,
            rho_e: CorrVector::new(2, vec![1.0 / 3.0]).unwrap(),
        };
        let store = ChainStore {
            chain_index: 1,
            seed: 42,
            spec_hash: "deadbeefdeadbeef".into(),
            layout,
            draw_iterations: vec![1001, 1002],
            draws: vec![state.clone(), state],
            post_burnin_accept: vec![37],
            post_burnin_reject: vec![11],
            frozen_gamma: vec![0.0826446280991736],
            adapt_trace: vec![(50, vec![0.11])],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain_1.csv");
        store.write_csv(&path).unwrap();
        let loaded = ChainStore::load_csv(&path).unwrap();
        assert_eq!(loaded.chain_index, store.chain_index);
        assert_eq!(loaded.seed, store.seed);
        assert_eq!(loaded.spec_hash, store.spec_hash);
        assert_eq!(loaded.layout, store.layout);
        assert_eq!(loaded.draw_iterations, store.draw_iterations);
        assert_eq!(loaded.draws, store.draws);
        assert_eq!(loaded.post_burnin_accept, store.post_burnin_accept);
        assert_eq!(loaded.post_burnin_reject, store.post_burnin_reject);
        assert_eq!(loaded.frozen_gamma, store.frozen_gamma);
        assert!(loaded.adapt_trace.is_empty());
    }

    #[test]
    fn load_rejects_mismatched_counter_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(
            &path,
            "# spec_hash=x\n# seed=1\n# chain=0\n# accept=1,2\n# reject=3\n# gamma=0.1\n\
             draw,b_1_1,sigma_u_1_1\n1,0.5,1\n",
        )
        .unwrap();
        let err = ChainStore::load_csv(&path).unwrap_err();
        assert!(err.to_string().contains("correlation coordinates"));
    }
}
