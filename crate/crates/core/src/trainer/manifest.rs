use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objectives::ObjectiveConfig;
use crate::pipeline::{FilterRules, JudgeConfig, TaskDomain};
use crate::policy::SamplerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Context length of the tabular policy, 1 or 2.
    pub order: usize,
    /// Standard deviation of the initial logits.
    pub init_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            order: 2,
            init_std: 0.1,
        }
    }
}

/// Iterations `T`, pairs per iteration `P`, candidates per instruction `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationPlan {
    pub iterations: usize,
    pub pairs: usize,
    pub candidates: usize,
    pub batch_size: usize,
    /// Self-instruct attempts allowed per iteration; 0 means `20 * pairs`.
    pub attempt_budget: usize,
}

impl Default for IterationPlan {
    fn default() -> Self {
        Self {
            iterations: 2,
            pairs: 64,
            candidates: 4,
            batch_size: 8,
            attempt_budget: 0,
        }
    }
}

impl IterationPlan {
    pub fn steps_per_iteration(&self) -> usize {
        self.pairs.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfInstructConfig {
    pub k_exemplars: usize,
    /// Size of the seed pool.
    pub seed_instructions: usize,
    pub pool_cap: usize,
    /// Draw exemplars from seed entries only.
    pub seeds_only: bool,
}

impl Default for SelfInstructConfig {
    fn default() -> Self {
        Self {
            k_exemplars: 3,
            seed_instructions: 32,
            pool_cap: 1024,
            seeds_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.15,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// Maximum-likelihood warm start on task demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out instructions scored after every iteration.
    pub instructions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { instructions: 256 }
    }
}

/// Complete description of an experiment. Only `seed` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    #[serde(default)]
    pub domain: TaskDomain,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub plan: IterationPlan,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default)]
    pub filter: FilterRules,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub self_instruct: SelfInstructConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Policy checkpoint used by standalone data generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Data-generation threads. Never affects results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            domain: TaskDomain::default(),
            policy: PolicyConfig::default(),
            plan: IterationPlan::default(),
            objective: ObjectiveConfig::default(),
            judge: JudgeConfig::default(),
            filter: FilterRules::default(),
            sampler: SamplerConfig::default(),
            self_instruct: SelfInstructConfig::default(),
            optimizer: OptimizerConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
            checkpoint: None,
            workers: None,
            out_dir: None,
        }
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let nested =
            |r: Result<()>, what: &str| r.map_err(|e| Error::Manifest(format!("{what}: {e}")));
        nested(self.domain.validate(), "domain")?;
        nested(self.objective.validate(), "objective")?;
        nested(self.judge.validate(), "judge")?;
        nested(self.filter.validate(), "filter")?;
        nested(self.sampler.validate(), "sampler")?;
        let fail = |msg: &str| Err(Error::Manifest(msg.to_string()));
        if !matches!(self.policy.order, 1 | 2) {
            return fail("policy.order must be 1 or 2");
        }
        if !(self.policy.init_std.is_finite() && self.policy.init_std >= 0.0) {
            return fail("policy.init_std must be >= 0");
        }
        let p = &self.plan;
        if p.iterations == 0 || p.pairs == 0 || p.batch_size == 0 {
            return fail("plan.iterations, plan.pairs and plan.batch_size must be >= 1");
        }
        if p.candidates < 2 {
            return fail("plan.candidates must be >= 2");
        }
        let s = &self.self_instruct;
        if s.k_exemplars == 0 || s.seed_instructions < s.k_exemplars {
            return fail("self_instruct needs 1 <= k_exemplars <= seed_instructions");
        }
        if s.pool_cap < s.seed_instructions {
            return fail("self_instruct.pool_cap must be >= seed_instructions");
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return fail("optimizer.lr must be > 0");
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return fail("optimizer.weight_decay must be >= 0");
        }
        if o.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return fail("optimizer.clip_norm must be > 0");
        }
        if self.pretrain.batch_size == 0
            || !(self.pretrain.lr.is_finite() && self.pretrain.lr > 0.0)
        {
            return fail("pretrain.batch_size must be >= 1 and pretrain.lr > 0");
        }
        if self.eval.instructions == 0 {
            return fail("eval.instructions must be >= 1");
        }
        if self.workers == Some(0) {
            return fail("workers must be >= 1");
        }
        Ok(())
    }

    /// The manifest as echoed into a run directory: placement and thread
    /// count are dropped because they cannot change results.
    pub fn echo(&self) -> Self {
        Self {
            workers: None,
            out_dir: None,
            ..self.clone()
        }
    }

    /// SHA-256 of the echoed manifest's canonical JSON.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(&self.echo()).expect("manifest serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_manifest_takes_defaults() {
        let m = RunManifest::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(m, RunManifest::new(7));
    }

    #[test]
    fn missing_seed_and_unknown_keys_are_rejected() {
        let e = RunManifest::from_json(r#"{"plan": {"iterations": 2}}"#).unwrap_err();
        assert!(matches!(&e, Error::Manifest(msg) if msg.contains("seed")));
        assert!(e.is_validation());
        assert!(RunManifest::from_json(r#"{"seed": 1, "sead": 2}"#).is_err());
        assert!(RunManifest::from_json(r#"{"seed": 1, "plan": {"iteratons": 2}}"#).is_err());
        assert!(RunManifest::from_json(
            r#"{"seed": 1, "judge": {"kind": "target_similarity", "bias": 1}}"#
        )
        .is_err());
    }

    #[test]
    fn invalid_nested_values_are_rejected() {
        for bad in [
            r#"{"seed": 1, "plan": {"candidates": 1}}"#,
            r#"{"seed": 1, "objective": {"kind": "dpo", "beta": 0}}"#,
            r#"{"seed": 1, "judge": {"kind": "target_similarity", "noise_sigma": 0.5}}"#,
            r#"{"seed": 1, "filter": {"min_len": 5, "max_len": 2}}"#,
            r#"{"seed": 1, "policy": {"order": 3}}"#,
            r#"{"seed": 1, "sampler": {"max_len": 0}}"#,
        ] {
            assert!(
                matches!(RunManifest::from_json(bad), Err(Error::Manifest(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn round_trip_and_hash_ignore_placement() {
        let mut m = RunManifest::new(3);
        m.objective = ObjectiveConfig::aipo(0.1, 0.05, 0.2);
        m.optimizer.clip_norm = Some(10.0);
        let back = RunManifest::from_json(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut placed = m.clone();
        placed.workers = Some(8);
        placed.out_dir = Some("runs/x".into());
        assert_eq!(placed.content_hash(), m.content_hash());
        assert_eq!(m.content_hash().len(), 64);
        let mut other = m.clone();
        other.seed = 4;
        assert_ne!(other.content_hash(), m.content_hash());
    }

    #[test]
    fn plan_arithmetic() {
        let mut p = IterationPlan {
            iterations: 4,
            pairs: 64,
            ..Default::default()
        };
        let q = IterationPlan {
            iterations: 8,
            pairs: 32,
            ..Default::default()
        };
        assert_eq!(p.iterations * p.pairs, q.iterations * q.pairs);
        p.batch_size = 10;
        assert_eq!(p.steps_per_iteration(), 7);
    }
}
