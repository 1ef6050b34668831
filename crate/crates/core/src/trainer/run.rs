use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{PretrainConfig, RunManifest};
use super::{lr_at, read_metrics, train_step, write_metrics, AdamW, StepMetrics, TrainerState};
use crate::error::{Error, Result};
use crate::pipeline::{
    exemplar_prompt, generate_pairs, judge_score, write_pairs, DataPhaseConfig, InstructionPool,
    JudgeConfig, TaskDomain,
};
use crate::policy::{
    accumulate_grad, load_checkpoint, sample, save_checkpoint, seq_log_prob, GradTable,
    PolicyParams, SamplerConfig, Sequence, SEP,
};
use crate::rng::{Purpose, StreamKey};

/// Held-out quality: bias-free, noise-free judge score and response length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub score: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub pairs: usize,
    pub attempts: usize,
    pub dropped: usize,
    pub mean_chosen_len: f64,
    pub mean_rejected_len: f64,
    pub mean_chosen_score: f64,
    pub mean_rejected_score: f64,
    pub agreement_rate: f64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub mean_loss: f64,
    pub mean_logp_norm_w: f64,
    pub mean_logp_norm_l: f64,
    pub eval: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub content_hash: String,
    pub objective: String,
    pub pretrain_loss: f64,
    pub base_eval: EvalResult,
    pub iterations: Vec<IterationSummary>,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn last(&self) -> Option<&IterationSummary> {
        self.iterations.last()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from the last completed iteration in the run directory.
    pub resume: bool,
    /// Stop after this many completed iterations, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEcho {
    content_hash: String,
    manifest: RunManifest,
}

#[derive(Serialize, Deserialize)]
struct BaseSummary {
    pretrain_loss: f64,
    eval: EvalResult,
}

/// The manifest echoed into a run directory.
pub fn load_run_manifest(out: &Path) -> Result<RunManifest> {
    let echo: ManifestEcho = read_json(&out.join("manifest.json"))?;
    Ok(echo.manifest)
}

/// Maximum-likelihood warm start.
///
/// Each step draws a fresh batch, half task demonstrations (instruction to
/// target) and half self-instruct streams (exemplars joined by SEP, followed
/// by one more instruction). Returns the mean NLL of the last batch.
pub fn pretrain(
    domain: &TaskDomain,
    policy: &mut PolicyParams,
    cfg: &PretrainConfig,
    k_exemplars: usize,
    key: StreamKey,
) -> Result<f64> {
    let mut opt = AdamW::new(policy.logits().len(), 0.0, None);
    let mut grad = GradTable::zeros_like(policy);
    let mut last = f64::NAN;
    let n = cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut rng = key.at(step as u64, 0, 0).rng();
        grad.clear();
        let mut nll = 0.0;
        for i in 0..cfg.batch_size {
            let (prompt, response) = if i % 2 == 0 {
                let spec = domain.random_task(&mut rng);
                (domain.instruction(&spec), domain.target(&spec))
            } else {
                self_instruct_demo(domain, k_exemplars, &mut rng)
            };
            nll -= seq_log_prob(policy, &prompt, &response)?;
            accumulate_grad(policy, &prompt, &response, -1.0 / n, &mut grad)?;
        }
        let lr = lr_at(step, cfg.steps, cfg.lr)?;
        opt.update(policy.logits_mut(), grad.values(), lr)?;
        policy.bump_version();
        last = nll / n;
    }
    Ok(last)
}

fn self_instruct_demo<R: Rng + ?Sized>(
    domain: &TaskDomain,
    k: usize,
    rng: &mut R,
) -> (Sequence, Sequence) {
    let exemplars: Vec<Sequence> = (0..k)
        .map(|_| domain.instruction(&domain.random_task(rng)))
        .collect();
    let next = domain.instruction(&domain.random_task(rng));
    let mut tokens = vec![crate::policy::BOS];
    tokens.extend_from_slice(next.body());
    tokens.push(SEP);
    (
        exemplar_prompt(exemplars.iter()),
        Sequence::new(tokens).expect("starts with BOS"),
    )
}

/// Scores `n` fixed held-out instructions. Instructions and response streams
/// depend only on the key, so successive policies are compared on the same draws.
pub fn evaluate_policy(
    domain: &TaskDomain,
    policy: &PolicyParams,
    sampler: &SamplerConfig,
    n: usize,
    key: StreamKey,
) -> Result<EvalResult> {
    let judge = JudgeConfig::unbiased();
    let (mut score, mut length) = (0.0, 0.0);
    for i in 0..n as u64 {
        let spec = domain.random_task(&mut key.at(0, i, 0).rng());
        let x = domain.instruction(&spec);
        let y = sample(policy, &x, sampler, &mut key.at(1, i, 0).rng())?.sequence;
        score += judge_score(domain, &x, &y, &judge, &mut key.at(2, i, 0).rng())?;
        length += y.len() as f64;
    }
    Ok(EvalResult {
        score: score / n as f64,
        length: length / n as f64,
    })
}

fn data_config(m: &RunManifest) -> DataPhaseConfig {
    DataPhaseConfig {
        pairs: m.plan.pairs,
        n_candidates: m.plan.candidates,
        k_exemplars: m.self_instruct.k_exemplars,
        seeds_only: m.self_instruct.seeds_only,
        sampler: m.sampler,
        judge: m.judge,
        rules: m.filter,
        attempt_budget: m.plan.attempt_budget,
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

fn seed_pool(m: &RunManifest) -> Result<InstructionPool> {
    InstructionPool::seeded(
        &m.domain,
        m.self_instruct.seed_instructions,
        m.self_instruct.pool_cap,
        StreamKey::new(m.seed, Purpose::SeedPool),
    )
}

fn eval_key(m: &RunManifest) -> StreamKey {
    StreamKey::new(m.seed, Purpose::Eval)
}

fn iter_dir(out: &Path, t: usize) -> PathBuf {
    out.join(format!("iter_{t}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Last iteration whose checkpoint exists; the checkpoint is written last.
fn last_complete(out: &Path, iterations: usize) -> Option<usize> {
    (0..=iterations)
        .rev()
        .find(|&t| iter_dir(out, t).join("policy.ckpt").exists())
}

/// Runs pretraining and `T` iterations, writing every artifact under `out`.
///
/// `on_iteration` is called after each completed iteration.
pub fn run_experiment(
    manifest: &RunManifest,
    out: &Path,
    opts: &RunOptions,
    mut on_iteration: impl FnMut(&IterationSummary),
) -> Result<RunSummary> {
    manifest.validate()?;
    let hash = manifest.content_hash();
    let echo_path = out.join("manifest.json");
    if echo_path.exists() {
        let existing: ManifestEcho = read_json(&echo_path)?;
        if existing.content_hash != hash {
            return Err(Error::Manifest(format!(
                "{} holds a run of a different manifest ({})",
                out.display(),
                existing.content_hash
            )));
        }
    }
    let exec = thread_pool(manifest.workers())?;
    fs::create_dir_all(out)?;
    write_json(
        &echo_path,
        &ManifestEcho {
            content_hash: hash.clone(),
            manifest: manifest.echo(),
        },
    )?;

    let m = manifest;
    let plan = m.plan;
    let metrics_path = out.join("metrics.csv");
    let start = if opts.resume {
        last_complete(out, plan.iterations)
    } else {
        None
    };

    let (policy, base, mut pool, mut metrics, mut iterations) = match start {
        None => {
            let vocab = m.domain.vocab()?;
            let mut init = StreamKey::new(m.seed, Purpose::Init).rng();
            let mut policy =
                PolicyParams::random(vocab, m.policy.order, m.policy.init_std, &mut init)?;
            let pretrain_loss = pretrain(
                &m.domain,
                &mut policy,
                &m.pretrain,
                m.self_instruct.k_exemplars,
                StreamKey::new(m.seed, Purpose::Pretrain),
            )?;
            let eval = evaluate_policy(
                &m.domain,
                &policy,
                &m.sampler,
                m.eval.instructions,
                eval_key(m),
            )?;
            let base = BaseSummary {
                pretrain_loss,
                eval,
            };
            let dir = iter_dir(out, 0);
            fs::create_dir_all(&dir)?;
            write_json(&dir.join("summary.json"), &base)?;
            save_checkpoint(&policy, &dir.join("policy.ckpt"))?;
            write_metrics(&metrics_path, &[])?;
            (policy, base, seed_pool(m)?, Vec::new(), Vec::new())
        }
        Some(t) => {
            let policy = load_checkpoint(&iter_dir(out, t).join("policy.ckpt"))?;
            let base: BaseSummary = read_json(&iter_dir(out, 0).join("summary.json"))?;
            let pool = if t == 0 {
                seed_pool(m)?
            } else {
                InstructionPool::load(&iter_dir(out, t).join("pool.jsonl"))?
            };
            let metrics: Vec<StepMetrics> = if metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|r| r.iteration <= t)
                    .collect()
            } else {
                Vec::new()
            };
            write_metrics(&metrics_path, &metrics)?;
            let iterations = (1..=t)
                .map(|i| read_json(&iter_dir(out, i).join("summary.json")))
                .collect::<Result<Vec<IterationSummary>>>()?;
            (policy, base, pool, metrics, iterations)
        }
    };

    let mut summary = RunSummary {
        content_hash: hash,
        objective: m.objective.label(),
        pretrain_loss: base.pretrain_loss,
        base_eval: base.eval,
        iterations: Vec::new(),
    };
    let first = start.unwrap_or(0) + 1;
    let mut state = TrainerState::new(policy, first);
    let data_cfg = data_config(m);

    for t in first..=plan.iterations {
        if opts.stop_after.is_some_and(|k| t > k) {
            break;
        }
        let dir = iter_dir(out, t);
        fs::create_dir_all(&dir)?;
        let phase = generate_pairs(
            &m.domain,
            &mut pool,
            &state.data_policy,
            &data_cfg,
            t,
            m.seed,
            &exec,
        )?;
        write_pairs(&dir.join("pairs.jsonl"), &phase.pairs)?;
        phase.write_drops(&dir.join("drops.jsonl"))?;

        let mut order: Vec<usize> = (0..phase.pairs.len()).collect();
        order.shuffle(
            &mut StreamKey::new(m.seed, Purpose::Shuffle)
                .at(t as u64, 0, 0)
                .rng(),
        );
        let total_steps = plan.steps_per_iteration();
        let mut opt = AdamW::new(
            state.live.logits().len(),
            m.optimizer.weight_decay,
            m.optimizer.clip_norm,
        );
        let mut rows = Vec::with_capacity(total_steps);
        for (step, idx) in order.chunks(plan.batch_size).enumerate() {
            let batch: Vec<_> = idx.iter().map(|&i| phase.pairs[i].clone()).collect();
            let lr = lr_at(step, total_steps, m.optimizer.lr)?;
            match train_step(&mut state, &batch, &m.objective, &mut opt, step, lr) {
                Ok(row) => rows.push(row),
                Err(e @ Error::NonFinite(_)) => {
                    write_json(
                        &dir.join("nonfinite_dump.json"),
                        &serde_json::json!({ "error": e.to_string(), "batch": batch, "metrics": rows }),
                    )?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }

        let eval = evaluate_policy(
            &m.domain,
            &state.live,
            &m.sampler,
            m.eval.instructions,
            eval_key(m),
        )?;
        let it = summarize(
            t,
            &phase.pairs,
            phase.attempts,
            phase.drops.len(),
            &rows,
            eval,
        );
        metrics.extend_from_slice(&rows);
        write_metrics(&metrics_path, &metrics)?;
        pool.save(&dir.join("pool.jsonl"))?;
        write_json(&dir.join("summary.json"), &it)?;
        save_checkpoint(&state.live, &dir.join("policy.ckpt"))?;

        on_iteration(&it);
        iterations.push(it);
        summary.iterations = iterations.clone();
        write_json(&out.join("summary.json"), &summary)?;
        state.advance();
    }
    summary.iterations = iterations;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn summarize(
    t: usize,
    pairs: &[crate::pipeline::PreferencePair],
    attempts: usize,
    dropped: usize,
    rows: &[StepMetrics],
    eval: EvalResult,
) -> IterationSummary {
    let n = pairs.len() as f64;
    let pmean =
        |f: &dyn Fn(&crate::pipeline::PreferencePair) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    let r = rows.len() as f64;
    let rmean = |f: &dyn Fn(&StepMetrics) -> f64| rows.iter().map(f).sum::<f64>() / r;
    IterationSummary {
        iteration: t,
        pairs: pairs.len(),
        attempts,
        dropped,
        mean_chosen_len: pmean(&|p| p.chosen.len() as f64),
        mean_rejected_len: pmean(&|p| p.rejected.len() as f64),
        mean_chosen_score: pmean(&|p| p.chosen_score),
        mean_rejected_score: pmean(&|p| p.rejected_score),
        agreement_rate: rmean(&|s| s.agreement),
        first_loss: rows.first().map_or(f64::NAN, |s| s.loss),
        final_loss: rows.last().map_or(f64::NAN, |s| s.loss),
        mean_loss: rmean(&|s| s.loss),
        mean_logp_norm_w: rmean(&|s| s.logp_norm_w),
        mean_logp_norm_l: rmean(&|s| s.logp_norm_l),
        eval,
    }
}

/// One standalone data phase with the manifest's checkpoint as the data
/// policy. Writes `pairs.jsonl`, `drops.jsonl` and `pool.jsonl` into `out`.
pub fn generate_dataset(manifest: &RunManifest, out: &Path) -> Result<usize> {
    manifest.validate()?;
    let ckpt = manifest
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Manifest("data generation needs a `checkpoint`".into()))?;
    let policy = load_checkpoint(ckpt)?;
    if policy.vocab().size() != manifest.domain.vocab_size() {
        return Err(Error::Manifest(format!(
            "checkpoint vocabulary {} does not match the domain's {}",
            policy.vocab().size(),
            manifest.domain.vocab_size()
        )));
    }
    let exec = thread_pool(manifest.workers())?;
    let mut pool = seed_pool(manifest)?;
    let phase = generate_pairs(
        &manifest.domain,
        &mut pool,
        &policy,
        &data_config(manifest),
        1,
        manifest.seed,
        &exec,
    )?;
    fs::create_dir_all(out)?;
    write_pairs(&out.join("pairs.jsonl"), &phase.pairs)?;
    phase.write_drops(&out.join("drops.jsonl"))?;
    pool.save(&out.join("pool.jsonl"))?;
    Ok(phase.pairs.len())
}
