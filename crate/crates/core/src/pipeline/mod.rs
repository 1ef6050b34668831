//! Synthetic preference-data curation.
//!
//! One data phase: draw exemplars from the instruction pool and let the data
//! policy propose a new instruction (self-instruct), validate it, sample `N`
//! candidate responses, rank them with the judge into a best/worst pair, and
//! run the rule-based filters.

mod generate;
pub mod judge;
pub mod pool;
pub mod similarity;
pub mod task;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use generate::{generate_pairs, DataPhase, DataPhaseConfig, DropRecord};
pub use judge::{judge_score, JudgeConfig, JudgeKind};
pub use pool::{InstructionPool, PoolEntry, Provenance};
pub use similarity::{edit_distance, lcs_similarity, token_similarity};
pub use task::{TaskDomain, TaskKind, TaskSpec};

use crate::error::{Error, Result};
use crate::policy::{
    sample, sample_until, PolicyParams, Sampled, SamplerConfig, Sequence, EOS, SEP,
};
use crate::rng::StreamKey;

/// Rule-based filters for instructions and pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterRules {
    pub min_len: usize,
    pub max_len: usize,
    pub dedup: bool,
    /// Drop pairs whose chosen/rejected similarity exceeds this. 1 disables.
    pub max_similarity: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            min_len: 1,
            max_len: 64,
            dedup: true,
            max_similarity: 1.0,
        }
    }
}

impl FilterRules {
    /// Rules that keep everything.
    pub fn disabled() -> Self {
        Self {
            min_len: 1,
            max_len: usize::MAX,
            dedup: false,
            max_similarity: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len > self.max_len {
            return Err(Error::InvalidInput("filter min_len > max_len".into()));
        }
        if !(0.0..=1.0).contains(&self.max_similarity) {
            return Err(Error::InvalidInput(
                "max_similarity must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn length_ok(&self, s: &Sequence) -> Option<DropReason> {
        if s.len() < self.min_len {
            Some(DropReason::TooShort)
        } else if s.len() > self.max_len {
            Some(DropReason::TooLong)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Malformed,
    TooShort,
    TooLong,
    Duplicate,
    Identical,
    TooSimilar,
    Degenerate,
}

/// Outcome of instruction validation. Rejection is a value, not an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(DropReason),
}

/// One (instruction, chosen, rejected) preference pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub iteration: usize,
    pub instruction: Sequence,
    pub chosen: Sequence,
    pub rejected: Sequence,
    pub chosen_score: f64,
    pub rejected_score: f64,
    pub n_candidates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairOutcome {
    Pair(PreferencePair),
    /// All candidates scored equally.
    Degenerate,
}

/// Proposes a new instruction by continuing `k` pool exemplars joined with SEP.
///
/// The exemplars are drawn without replacement. The continuation stops at SEP
/// or EOS and is returned as `[BOS, continuation.., EOS]`, unvalidated.
pub fn self_instruct<R: Rng + ?Sized>(
    pool: &InstructionPool,
    policy: &PolicyParams,
    k_exemplars: usize,
    seeds_only: bool,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Sequence> {
    let eligible = pool.exemplars(seeds_only);
    if k_exemplars == 0 || eligible.len() < k_exemplars {
        return Err(Error::PoolTooSmall {
            available: eligible.len(),
            requested: k_exemplars,
        });
    }
    let picks = index::sample(rng, eligible.len(), k_exemplars);
    let prompt = exemplar_prompt(picks.iter().map(|i| eligible[i]));
    let cont = sample_until(policy, &prompt, cfg, &[SEP, EOS], rng)?;
    Ok(Sequence::from_body(cont.sequence.body()))
}

/// `[BOS, body_1, SEP, body_2, SEP, .., body_k, SEP]`.
pub fn exemplar_prompt<'a>(exemplars: impl IntoIterator<Item = &'a Sequence>) -> Sequence {
    let mut tokens = vec![crate::policy::BOS];
    for e in exemplars {
        tokens.extend_from_slice(e.body());
        tokens.push(SEP);
    }
    Sequence::new(tokens).expect("starts with BOS")
}

pub fn validate_instruction(
    domain: &TaskDomain,
    candidate: &Sequence,
    pool: &InstructionPool,
    rules: &FilterRules,
) -> Verdict {
    if domain.decode(candidate).is_none() {
        return Verdict::Reject(DropReason::Malformed);
    }
    if let Some(reason) = rules.length_ok(candidate) {
        return Verdict::Reject(reason);
    }
    if rules.dedup && pool.contains(candidate) {
        return Verdict::Reject(DropReason::Duplicate);
    }
    Verdict::Accept
}

/// `n` independent responses, candidate `j` drawn from `key.sub(j)`.
pub fn generate_candidates(
    instruction: &Sequence,
    policy: &PolicyParams,
    n: usize,
    cfg: &SamplerConfig,
    key: StreamKey,
) -> Result<Vec<Sampled>> {
    if n < 2 {
        return Err(Error::TooFewCandidates(n));
    }
    (0..n)
        .map(|j| sample(policy, instruction, cfg, &mut key.sub(j as u64).rng()))
        .collect()
}

/// Scores every candidate and pairs the best with the worst.
///
/// Ties go to the lowest candidate index. Candidate `j`'s judge noise comes
/// from `key.sub(j)`.
pub fn build_pair(
    domain: &TaskDomain,
    instruction: &Sequence,
    candidates: &[Sequence],
    judge: &JudgeConfig,
    iteration: usize,
    key: StreamKey,
) -> Result<PairOutcome> {
    if candidates.len() < 2 {
        return Err(Error::TooFewCandidates(candidates.len()));
    }
    let scores = candidates
        .iter()
        .enumerate()
        .map(|(j, c)| judge_score(domain, instruction, c, judge, &mut key.sub(j as u64).rng()))
        .collect::<Result<Vec<f64>>>()?;
    let (best, worst) = extremes(&scores);
    if best == worst {
        return Ok(PairOutcome::Degenerate);
    }
    Ok(PairOutcome::Pair(PreferencePair {
        iteration,
        instruction: instruction.clone(),
        chosen: candidates[best].clone(),
        rejected: candidates[worst].clone(),
        chosen_score: scores[best],
        rejected_score: scores[worst],
        n_candidates: candidates.len(),
    }))
}

/// First index of the maximum and first index of the minimum.
fn extremes(scores: &[f64]) -> (usize, usize) {
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    (best, worst)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Filtered {
    pub kept: Vec<PreferencePair>,
    pub dropped: Vec<(PreferencePair, DropReason)>,
}

/// Why a pair would be dropped, ignoring duplicates.
pub fn pair_violation(pair: &PreferencePair, rules: &FilterRules) -> Option<DropReason> {
    if pair.chosen == pair.rejected {
        return Some(DropReason::Identical);
    }
    if let Some(r) = rules
        .length_ok(&pair.chosen)
        .or(rules.length_ok(&pair.rejected))
    {
        return Some(r);
    }
    if rules.max_similarity < 1.0 {
        // both sides carry at least EOS after the identical check, unless truncated empty
        match token_similarity(&pair.chosen, &pair.rejected) {
            Ok(sim) if sim > rules.max_similarity => return Some(DropReason::TooSimilar),
            _ => {}
        }
    }
    None
}

/// Applies the pair-level rules, keeping input order.
pub fn filter_pairs(pairs: Vec<PreferencePair>, rules: &FilterRules) -> Filtered {
    let mut out = Filtered::default();
    let mut seen = HashSet::new();
    for pair in pairs {
        let reason = pair_violation(&pair, rules).or_else(|| {
            let key = (
                pair.instruction.clone(),
                pair.chosen.clone(),
                pair.rejected.clone(),
            );
            (rules.dedup && !seen.insert(key)).then_some(DropReason::Duplicate)
        });
        match reason {
            Some(r) => out.dropped.push((pair, r)),
            None => out.kept.push(pair),
        }
    }
    out
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        writeln!(out, "{}", serde_json::to_string(p)?)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
