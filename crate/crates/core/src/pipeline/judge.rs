//! Transparent ranking function standing in for a learned reward model.
//!
//! `score = -edit_distance(response, target) + length_bias * len(response) + noise`
//!
//! where distances are over content tokens and `len` counts the response's
//! tokens after BOS (EOS included).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::similarity::edit_distance;
use super::task::TaskDomain;
use crate::error::{Error, Result};
use crate::policy::Sequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    TargetSimilarity,
    NoisyTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    /// Score units per response token.
    pub length_bias: f64,
    pub noise_sigma: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            kind: JudgeKind::TargetSimilarity,
            length_bias: 0.0,
            noise_sigma: 0.0,
        }
    }
}

impl JudgeConfig {
    pub fn target(length_bias: f64) -> Self {
        Self {
            length_bias,
            ..Self::default()
        }
    }

    /// Bias-free, noise-free judge used for held-out evaluation.
    pub fn unbiased() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.length_bias.is_finite() {
            return Err(Error::InvalidInput("length_bias must be finite".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("noise_sigma must be >= 0".into()));
        }
        if self.kind == JudgeKind::TargetSimilarity && self.noise_sigma != 0.0 {
            return Err(Error::InvalidInput(
                "target_similarity judge must have noise_sigma = 0".into(),
            ));
        }
        Ok(())
    }
}

pub fn judge_score<R: Rng + ?Sized>(
    domain: &TaskDomain,
    instruction: &Sequence,
    response: &Sequence,
    cfg: &JudgeConfig,
    rng: &mut R,
) -> Result<f64> {
    let spec = domain.decode(instruction).ok_or(Error::Undecodable)?;
    let target = domain.target(&spec);
    let dist = edit_distance(response.body(), target.body()) as f64;
    let mut score = -dist + cfg.length_bias * response.len() as f64;
    if cfg.noise_sigma > 0.0 {
        let normal =
            Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        score += normal.sample(rng);
    }
    Ok(score)
}
