use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::judge::JudgeConfig;
use super::pool::InstructionPool;
use super::task::TaskDomain;
use super::{
    build_pair, generate_candidates, pair_violation, self_instruct, validate_instruction,
    DropReason, FilterRules, PairOutcome, PreferencePair, Verdict,
};
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, SamplerConfig, Sequence};
use crate::rng::{Purpose, StreamKey};

/// Settings for one data-generation phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataPhaseConfig {
    pub pairs: usize,
    pub n_candidates: usize,
    pub k_exemplars: usize,
    pub seeds_only: bool,
    pub sampler: SamplerConfig,
    pub judge: JudgeConfig,
    pub rules: FilterRules,
    /// Maximum self-instruct attempts; 0 means `20 * pairs`.
    pub attempt_budget: usize,
}

impl DataPhaseConfig {
    pub fn budget(&self) -> usize {
        if self.attempt_budget == 0 {
            20 * self.pairs
        } else {
            self.attempt_budget
        }
    }
}

/// One rejected instruction or pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub iteration: usize,
    pub attempt: usize,
    pub reason: DropReason,
    pub instruction: Sequence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PreferencePair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPhase {
    pub pairs: Vec<PreferencePair>,
    pub drops: Vec<DropRecord>,
    pub attempts: usize,
}

impl DataPhase {
    pub fn write_drops(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for d in &self.drops {
            writeln!(out, "{}", serde_json::to_string(d)?)?;
        }
        fs::write(path, out)?;
        Ok(())
    }
}

enum Attempt {
    Rejected(Sequence, DropReason),
    Proposed(Sequence, PairOutcome),
}

/// Produces `cfg.pairs` filtered preference pairs with `policy` as the data policy.
///
/// Work proceeds in waves sized to the number of pairs still missing. Within a
/// wave, attempt `a` proposes an instruction from the pool as it stood at the
/// start of the wave and builds its pair, all from streams keyed on
/// `(iteration, a)`. Attempts are then committed in index order, so the result
/// does not depend on how many threads `exec` has.
pub fn generate_pairs(
    domain: &TaskDomain,
    pool: &mut InstructionPool,
    policy: &PolicyParams,
    cfg: &DataPhaseConfig,
    iteration: usize,
    root_seed: u64,
    exec: &rayon::ThreadPool,
) -> Result<DataPhase> {
    if cfg.pairs == 0 {
        return Err(Error::InvalidInput(
            "pairs per iteration must be >= 1".into(),
        ));
    }
    cfg.rules.validate()?;
    cfg.judge.validate()?;
    cfg.sampler.validate()?;
    let budget = cfg.budget();
    let t = iteration as u64;
    let mut phase = DataPhase {
        pairs: Vec::with_capacity(cfg.pairs),
        drops: Vec::new(),
        attempts: 0,
    };
    let mut seen = HashSet::new();

    while phase.pairs.len() < cfg.pairs {
        if phase.attempts >= budget {
            return Err(Error::GenerationBudget {
                iteration,
                produced: phase.pairs.len(),
                wanted: cfg.pairs,
                attempts: phase.attempts,
            });
        }
        let start = phase.attempts;
        let wave = (cfg.pairs - phase.pairs.len()).min(budget - start);
        let snapshot: &InstructionPool = pool;
        let results: Vec<Result<Attempt>> = exec.install(|| {
            (start..start + wave)
                .into_par_iter()
                .map(|a| {
                    propose(
                        domain, snapshot, policy, cfg, iteration, root_seed, t, a as u64,
                    )
                })
                .collect()
        });

        for (offset, res) in results.into_iter().enumerate() {
            if phase.pairs.len() == cfg.pairs {
                break;
            }
            let attempt = start + offset;
            phase.attempts = attempt + 1;
            let drop = |instruction, reason, pair| DropRecord {
                iteration,
                attempt,
                reason,
                instruction,
                pair,
            };
            let (instruction, outcome) = match res? {
                Attempt::Rejected(instr, reason) => {
                    phase.drops.push(drop(instr, reason, None));
                    continue;
                }
                Attempt::Proposed(instr, outcome) => (instr, outcome),
            };
            if cfg.rules.dedup && pool.contains(&instruction) {
                phase
                    .drops
                    .push(drop(instruction, DropReason::Duplicate, None));
                continue;
            }
            pool.push_generated(instruction.clone());
            let pair = match outcome {
                PairOutcome::Degenerate => {
                    phase
                        .drops
                        .push(drop(instruction, DropReason::Degenerate, None));
                    continue;
                }
                PairOutcome::Pair(p) => p,
            };
            let reason = pair_violation(&pair, &cfg.rules).or_else(|| {
                let key = (
                    pair.instruction.clone(),
                    pair.chosen.clone(),
                    pair.rejected.clone(),
                );
                (cfg.rules.dedup && !seen.insert(key)).then_some(DropReason::Duplicate)
            });
            match reason {
                Some(r) => phase.drops.push(drop(instruction, r, Some(pair))),
                None => phase.pairs.push(pair),
            }
        }
    }
    Ok(phase)
}

#[allow(clippy::too_many_arguments)]
fn propose(
    domain: &TaskDomain,
    pool: &InstructionPool,
    policy: &PolicyParams,
    cfg: &DataPhaseConfig,
    iteration: usize,
    root_seed: u64,
    t: u64,
    a: u64,
) -> Result<Attempt> {
    let mut rng = StreamKey::new(root_seed, Purpose::SelfInstruct)
        .at(t, a, 0)
        .rng();
    let instruction = self_instruct(
        pool,
        policy,
        cfg.k_exemplars,
        cfg.seeds_only,
        &cfg.sampler,
        &mut rng,
    )?;
    // duplicates are decided against the live pool when the attempt is committed
    let no_dedup = FilterRules {
        dedup: false,
        ..cfg.rules
    };
    if let Verdict::Reject(reason) = validate_instruction(domain, &instruction, pool, &no_dedup) {
        return Ok(Attempt::Rejected(instruction, reason));
    }
    let key = StreamKey::new(root_seed, Purpose::Candidates).at(t, a, 0);
    let candidates: Vec<Sequence> =
        generate_candidates(&instruction, policy, cfg.n_candidates, &cfg.sampler, key)?
            .into_iter()
            .map(|s| s.sequence)
            .collect();
    let judge_key = StreamKey::new(root_seed, Purpose::Judge).at(t, a, 0);
    let outcome = build_pair(
        domain,
        &instruction,
        &candidates,
        &cfg.judge,
        iteration,
        judge_key,
    )?;
    Ok(Attempt::Proposed(instruction, outcome))
}
