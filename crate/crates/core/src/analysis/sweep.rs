use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::write_csv;
use crate::error::{Error, Result};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::trainer::{run_experiment, RunManifest, RunOptions};

/// Hyperparameter values for one objective; the grid is their product.
/// Lists for hyperparameters the objective does not use must stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveGrid {
    pub kind: ObjectiveKind,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agreement_alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nll_weight: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub simpo_gamma: Vec<f64>,
}

impl ObjectiveGrid {
    fn uses(&self) -> [bool; 3] {
        use ObjectiveKind::*;
        [
            matches!(self.kind, AlphaDpo | Aipo),
            matches!(self.kind, DpoNll | Aipo),
            self.kind == Simpo,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [&self.agreement_alpha, &self.nll_weight, &self.simpo_gamma];
        let names = ["agreement_alpha", "nll_weight", "simpo_gamma"];
        if self.beta.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{} grid has no beta values",
                self.kind
            )));
        }
        for ((list, name), used) in lists.iter().zip(names).zip(self.uses()) {
            if used && list.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "{} grid needs {name} values",
                    self.kind
                )));
            }
            if !used && !list.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "{} does not use {name}",
                    self.kind
                )));
            }
        }
        for c in self.combinations() {
            c.validate()?;
        }
        Ok(())
    }

    /// Deduplicated product of the value lists, in list order.
    pub fn combinations(&self) -> Vec<ObjectiveConfig> {
        let or_zero = |v: &Vec<f64>| if v.is_empty() { vec![0.0] } else { v.clone() };
        let mut out: Vec<ObjectiveConfig> = Vec::new();
        for &beta in &self.beta {
            for &agreement_alpha in &or_zero(&self.agreement_alpha) {
                for &nll_weight in &or_zero(&self.nll_weight) {
                    for &simpo_gamma in &or_zero(&self.simpo_gamma) {
                        let c = ObjectiveConfig {
                            kind: self.kind,
                            beta,
                            agreement_alpha,
                            nll_weight,
                            simpo_gamma,
                        };
                        if !out.contains(&c) {
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

/// A shared base manifest plus one grid per objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub base: RunManifest,
    pub grids: Vec<ObjectiveGrid>,
    /// Runs executed concurrently.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl SweepGrid {
    /// The full search space: 3 DPO, 3 DPO+NLL, 4 SimPO, 4 alpha-DPO and 6 AIPO settings.
    pub fn standard(base: RunManifest) -> Self {
        use ObjectiveKind::*;
        let g = |kind, beta: &[f64], alpha: &[f64], nll: &[f64], gamma: &[f64]| ObjectiveGrid {
            kind,
            beta: beta.to_vec(),
            agreement_alpha: alpha.to_vec(),
            nll_weight: nll.to_vec(),
            simpo_gamma: gamma.to_vec(),
        };
        Self {
            base,
            grids: vec![
                g(Dpo, &[0.1, 0.5, 1.0], &[], &[], &[]),
                g(DpoNll, &[0.1], &[], &[0.2, 0.4, 0.6], &[]),
                g(Simpo, &[2.0, 3.0], &[], &[], &[0.5, 1.0]),
                g(AlphaDpo, &[0.1], &[0.02, 0.03, 0.04, 0.05], &[], &[]),
                g(Aipo, &[0.1], &[0.03, 0.05, 0.07], &[0.2, 0.5], &[]),
            ],
            workers: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.grids.is_empty() {
            return Err(Error::Manifest("sweep has no grids".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Manifest("workers must be >= 1".into()));
        }
        for g in &self.grids {
            g.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        }
        let combos = self.combinations();
        for (i, c) in combos.iter().enumerate() {
            if combos[..i].contains(c) {
                return Err(Error::Manifest(format!("{} appears twice", c.label())));
            }
        }
        Ok(())
    }

    pub fn combinations(&self) -> Vec<ObjectiveConfig> {
        self.grids.iter().flat_map(|g| g.combinations()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    /// Held-out judge score after the last iteration.
    pub score: f64,
    /// Held-out response length after the last iteration.
    pub length: f64,
    pub chosen_score: f64,
    pub chosen_len: f64,
    pub agreement_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub label: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Best score first, ties broken by shorter length.
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

/// Runs every combination under `out/<index>_<label>` and writes
/// `sweep.json` and `sweep.csv`. A failed run is recorded and the sweep goes on.
pub fn run_sweep(grid: &SweepGrid, out: &Path) -> Result<SweepReport> {
    grid.validate()?;
    let combos = grid.combinations();
    fs::create_dir_all(out)?;
    let exec = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.workers.unwrap_or(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let results: Vec<(String, Result<SweepRow>)> = exec.install(|| {
        combos
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let label = c.label();
                let mut m = grid.base.clone();
                m.objective = *c;
                m.workers = None;
                m.out_dir = None;
                let dir = out.join(format!("{i:02}_{label}"));
                let row = run_experiment(&m, &dir, &RunOptions::default(), |_| {}).and_then(|s| {
                    let last = s.last().ok_or(Error::EmptyBatch)?;
                    Ok(SweepRow {
                        label: label.clone(),
                        score: last.eval.score,
                        length: last.eval.length,
                        chosen_score: last.mean_chosen_score,
                        chosen_len: last.mean_chosen_len,
                        agreement_rate: last.agreement_rate,
                    })
                });
                (label, row)
            })
            .collect()
    });

    let mut report = SweepReport {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for (label, r) in results {
        match r {
            Ok(row) => report.rows.push(row),
            Err(e) => report.failures.push(SweepFailure {
                label,
                error: e.to_string(),
            }),
        }
    }
    report.rows.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.length.total_cmp(&b.length))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out.join("sweep.json"), json)?;
    write_csv(&out.join("sweep.csv"), &report.rows)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grid_sizes() {
        let g = SweepGrid::standard(RunManifest::new(1));
        let sizes: Vec<usize> = g.grids.iter().map(|g| g.combinations().len()).collect();
        assert_eq!(sizes, [3, 3, 4, 4, 6]);
        assert_eq!(g.combinations().len(), 20);
        g.validate().unwrap();
        let aipo = &g.grids[4].combinations();
        assert!(aipo.contains(&ObjectiveConfig::aipo(0.1, 0.05, 0.2)));
    }

    #[test]
    fn grids_reject_unused_or_missing_values() {
        let mut g = SweepGrid::standard(RunManifest::new(1));
        g.grids[0].nll_weight = vec![0.2];
        assert!(matches!(g.validate(), Err(Error::Manifest(_))));
        let mut g = SweepGrid::standard(RunManifest::new(1));
        g.grids[2].simpo_gamma.clear();
        assert!(g.validate().is_err());
        let mut g = SweepGrid::standard(RunManifest::new(1));
        g.grids.push(g.grids[0].clone());
        assert!(g.validate().is_err());
    }

    #[test]
    fn duplicate_values_collapse() {
        let g = ObjectiveGrid {
            kind: ObjectiveKind::Dpo,
            beta: vec![0.1, 0.1, 0.5],
            agreement_alpha: vec![],
            nll_weight: vec![],
            simpo_gamma: vec![],
        };
        assert_eq!(g.combinations().len(), 2);
    }

    #[test]
    fn grid_json_round_trip() {
        let g = SweepGrid::standard(RunManifest::new(4));
        let back = SweepGrid::from_json(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
        assert!(SweepGrid::from_json(r#"{"base": {"seed": 1}, "grids": [], "extra": 1}"#).is_err());
    }
}
