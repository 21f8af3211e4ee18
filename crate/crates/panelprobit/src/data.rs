//! Panel dataset container, CSV interchange, and couple-cluster construction.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One person-wave record. Outcomes are binary with `None` marking a missing
/// response (the latent propensity is then sampled unconstrained); covariates
/// must be complete.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub individual_id: String,
    pub wave: u32,
    pub partner_id: Option<String>,
    pub y: Vec<Option<bool>>,
    pub x: Vec<f64>,
}

/// Validated longitudinal dataset.
///
/// Invariants established at construction: consistent outcome/covariate
/// arity, finite covariates, positive waves, no duplicate (individual, wave)
/// record, no self-partnering, and reciprocal partner links whenever both
/// members of a union have a record at the wave in question.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    outcome_names: Vec<String>,
    covariate_names: Vec<String>,
    rows: Vec<ObservationRow>,
    individuals: Vec<String>,
}

impl PanelDataset {
    pub fn new(
        outcome_names: Vec<String>,
        covariate_names: Vec<String>,
        rows: Vec<ObservationRow>,
    ) -> Result<Self> {
        if outcome_names.is_empty() {
            return Err(Error::domain("dataset needs at least one outcome column"));
        }
        if covariate_names.is_empty() {
            return Err(Error::domain("dataset needs at least one covariate column"));
        }
        if rows.is_empty() {
            return Err(Error::domain("dataset has no rows"));
        }
        let r = outcome_names.len();
        let p = covariate_names.len();
        let mut seen: HashMap<(String, u32), usize> = HashMap::new();
        for (i, row) in rows.iter().enumerate() {
            let rowno = i + 1;
            if row.individual_id.is_empty() {
                return Err(Error::data(rowno, "individual_id is empty"));
            }
            if row.wave == 0 {
                return Err(Error::data(rowno, "wave must be a positive integer"));
            }
            if row.y.len() != r {
                return Err(Error::data(
                    rowno,
                    format!("expected {r} outcome values, got {}", row.y.len()),
                ));
            }
            if row.x.len() != p {
                return Err(Error::data(
                    rowno,
                    format!("expected {p} covariate values, got {}", row.x.len()),
                ));
            }
            for (j, v) in row.x.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::data(
                        rowno,
                        format!("covariate {} = {v} is not finite", covariate_names[j]),
                    ));
                }
            }
            if let Some(p_id) = &row.partner_id {
                if p_id.is_empty() {
                    return Err(Error::data(rowno, "partner_id is empty (omit the value instead)"));
                }
                if *p_id == row.individual_id {
                    return Err(Error::data(rowno, "individual is partnered with itself"));
                }
            }
            if let Some(&prev) = seen.get(&(row.individual_id.clone(), row.wave)) {
                return Err(Error::data(
                    rowno,
                    format!(
                        "duplicate record for individual {} at wave {} (first at data row {})",
                        row.individual_id,
                        row.wave,
                        prev + 1
                    ),
                ));
            }
            seen.insert((row.individual_id.clone(), row.wave), i);
        }
        // Reciprocity: a named partner who has a record at the same wave must
        // name the individual back.
        for (i, row) in rows.iter().enumerate() {
            if let Some(p_id) = &row.partner_id {
                if let Some(&j) = seen.get(&(p_id.clone(), row.wave)) {
                    if rows[j].partner_id.as_deref() != Some(row.individual_id.as_str()) {
                        return Err(Error::data(
                            i + 1,
                            format!(
                                "partner link to {} at wave {} is not reciprocated at data row {}",
                                p_id,
                                row.wave,
                                j + 1
                            ),
                        ));
                    }
                }
            }
        }
        let mut individuals: Vec<String> = rows
            .iter()
            .flat_map(|r| {
                std::iter::once(r.individual_id.clone()).chain(r.partner_id.clone())
            })
            .collect();
        individuals.sort();
        individuals.dedup();
        Ok(PanelDataset { outcome_names, covariate_names, rows, individuals })
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcome_names.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn outcome_names(&self) -> &[String] {
        &self.outcome_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn rows(&self) -> &[ObservationRow] {
        &self.rows
    }

    /// Distinct ids appearing as individual or partner, sorted.
    pub fn individuals(&self) -> &[String] {
        &self.individuals
    }

    /// Load from CSV with the fixed header layout
    /// `individual_id,wave,partner_id,y_<name>...,x_<name>...`.
    /// Empty partner_id means unpartnered; an empty outcome cell is a missing
    /// response; covariate cells must parse as finite numbers.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path)
            .map_err(|e| artifact(path, format!("cannot open: {e}")))?;
        let headers = reader
            .headers()
            .map_err(|e| artifact(path, format!("cannot read header: {e}")))?
            .clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 5 || cols[0] != "individual_id" || cols[1] != "wave" || cols[2] != "partner_id"
        {
            return Err(artifact(
                path,
                "header must start with individual_id,wave,partner_id followed by y_ and x_ columns",
            ));
        }
        let mut outcome_names = Vec::new();
        let mut covariate_names = Vec::new();
        let mut idx = 3;
        while idx < cols.len() && cols[idx].starts_with("y_") {
            outcome_names.push(cols[idx][2..].to_string());
            idx += 1;
        }
        let outcomes_end = idx;
        while idx < cols.len() && cols[idx].starts_with("x_") {
            covariate_names.push(cols[idx][2..].to_string());
            idx += 1;
        }
        if outcome_names.is_empty() || covariate_names.is_empty() || idx != cols.len() {
            return Err(artifact(
                path,
                format!(
                    "columns after partner_id must be y_ names then x_ names; offending column {}",
                    cols.get(idx).unwrap_or(&"<none>")
                ),
            ));
        }
        let r = outcome_names.len();
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let rowno = i + 1;
            let record = record.map_err(|e| Error::data(rowno, format!("malformed CSV: {e}")))?;
            let wave: u32 = record[1]
                .parse()
                .map_err(|_| Error::data(rowno, format!("wave {:?} is not a positive integer", &record[1])))?;
            let partner_id =
                if record[2].is_empty() { None } else { Some(record[2].to_string()) };
            let mut y = Vec::with_capacity(r);
            for (j, cell) in record.iter().enumerate().skip(3).take_while(|(j, _)| *j < outcomes_end) {
                match cell {
                    "" => y.push(None),
                    "0" => y.push(Some(false)),
                    "1" => y.push(Some(true)),
                    other => {
                        return Err(Error::data(
                            rowno,
                            format!(
                                "outcome {} = {other:?} is not binary (expected 0, 1, or empty)",
                                outcome_names[j - 3]
                            ),
                        ))
                    }
                }
            }
            let mut x = Vec::with_capacity(covariate_names.len());
            for (j, cell) in record.iter().enumerate().skip(outcomes_end) {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::data(
                        rowno,
                        format!(
                            "covariate {} = {cell:?} is not a number",
                            covariate_names[j - outcomes_end]
                        ),
                    )
                })?;
                x.push(v);
            }
            rows.push(ObservationRow {
                individual_id: record[0].to_string(),
                wave,
                partner_id,
                y,
                x,
            });
        }
        PanelDataset::new(outcome_names, covariate_names, rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["individual_id".to_string(), "wave".into(), "partner_id".into()];
        header.extend(self.outcome_names.iter().map(|n| format!("y_{n}")));
        header.extend(self.covariate_names.iter().map(|n| format!("x_{n}")));
        writeln!(out, "{}", header.join(","))?;
        for row in &self.rows {
            let mut cells = vec![
                row.individual_id.clone(),
                row.wave.to_string(),
                row.partner_id.clone().unwrap_or_default(),
            ];
            cells.extend(row.y.iter().map(|v| match v {
                None => String::new(),
                Some(false) => "0".to_string(),
                Some(true) => "1".to_string(),
            }));
            cells.extend(row.x.iter().map(|v| format!("{v}")));
            writeln!(out, "{}", cells.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn artifact(path: &Path, message: impl Into<String>) -> Error {
    Error::Artifact { path: path.display().to_string(), message: message.into() }
}

/// Union-find with path compression and union by size.
struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Partition of individuals into couple clusters: connected components under
/// "shared a union at any wave". Cluster ids are assigned in order of each
/// component's smallest member id, so numbering is invariant to row order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupleClusterIndex {
    cluster_of: HashMap<String, usize>,
    members: Vec<Vec<String>>,
}

impl CoupleClusterIndex {
    pub fn build(data: &PanelDataset) -> Self {
        let ids = data.individuals();
        let pos: HashMap<&str, usize> =
            ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut uf = UnionFind::new(ids.len());
        for row in data.rows() {
            if let Some(p) = &row.partner_id {
                uf.union(pos[row.individual_id.as_str()], pos[p.as_str()]);
            }
        }
        // ids are sorted, so scanning in order assigns cluster numbers by
        // smallest member.
        let mut root_to_cluster: HashMap<usize, usize> = HashMap::new();
        let mut members: Vec<Vec<String>> = Vec::new();
        let mut cluster_of = HashMap::new();
        for (i, id) in ids.iter().enumerate() {
            let root = uf.find(i);
            let cluster = *root_to_cluster.entry(root).or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            members[cluster].push(id.clone());
            cluster_of.insert(id.clone(), cluster);
        }
        CoupleClusterIndex { cluster_of, members }
    }

    pub fn n_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.cluster_of.get(id).copied()
    }

    /// Member ids of one cluster, sorted.
    pub fn members(&self, cluster: usize) -> &[String] {
        &self.members[cluster]
    }

    /// Cluster size -> number of clusters of that size.
    pub fn size_distribution(&self) -> BTreeMap<usize, usize> {
        let mut dist = BTreeMap::new();
        for m in &self.members {
            *dist.entry(m.len()).or_insert(0) += 1;
        }
        dist
    }
}
