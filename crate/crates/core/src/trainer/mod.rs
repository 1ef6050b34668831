//! Iterative preference training.
//!
//! Each iteration generates fresh pairs with the current policy, trains one
//! epoch on them against a frozen reference, then refreshes both the reference
//! and the data policy to the trained weights.

mod manifest;
mod run;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use manifest::{
    EvalConfig, IterationPlan, OptimizerConfig, PolicyConfig, PretrainConfig, RunManifest,
    SelfInstructConfig,
};
pub use run::{
    evaluate_policy, generate_dataset, load_run_manifest, pretrain, run_experiment, EvalResult,
    IterationSummary, RunOptions, RunSummary,
};

use crate::error::{Error, Result};
use crate::objectives::{
    batch_loss, ObjectiveConfig, PreferenceLogProbs, GRAD_THETA_L, GRAD_THETA_W,
};
use crate::pipeline::PreferencePair;
use crate::policy::{accumulate_grad, seq_log_prob, GradTable, PolicyParams, Snapshot};

/// Cosine schedule with linear warmup over the first 10% of steps.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::StepOutOfRange { step, total_steps });
    }
    let warmup = total_steps.div_ceil(10);
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// AdamW with decoupled weight decay and optional global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One update of `params` against the loss gradient `grad`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} moments, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        let mut scale = 1.0;
        if let Some(max) = self.clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * self.weight_decay * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One row of `metrics.csv`. Field order is the column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub step: usize,
    pub loss: f64,
    pub reward_w: f64,
    pub reward_l: f64,
    pub s_theta: f64,
    pub s_ref: f64,
    pub gradient_weight: f64,
    pub len_w: f64,
    pub len_l: f64,
    pub logp_w: f64,
    pub logp_l: f64,
    pub logp_norm_w: f64,
    pub logp_norm_l: f64,
    pub nll: f64,
    /// Fraction of pairs with `s_ref > 0`.
    pub agreement: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub const COLUMNS: [&'static str; 17] = [
        "iteration",
        "step",
        "loss",
        "reward_w",
        "reward_l",
        "s_theta",
        "s_ref",
        "gradient_weight",
        "len_w",
        "len_l",
        "logp_w",
        "logp_l",
        "logp_norm_w",
        "logp_norm_l",
        "nll",
        "agreement",
        "lr",
    ];
}

pub fn write_metrics(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(StepMetrics::COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads `metrics.csv`, reporting the first bad row by its line number.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(StepMetrics::COLUMNS) {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            line: 1,
            msg: "unexpected metrics header".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| malformed(path, e.position().map_or(0, |p| p.line()), e))?;
        let line = rec.position().map_or(0, |p| p.line()) as usize;
        let row: StepMetrics = rec
            .deserialize(Some(&header))
            .map_err(|e| malformed(path, line as u64, e))?;
        rows.push(row);
    }
    Ok(rows)
}

fn malformed(path: &Path, line: u64, e: impl ToString) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        line: line as usize,
        msg: e.to_string(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("{other:?}")),
    }
}

/// Live policy plus the two snapshots frozen for the current iteration.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub live: PolicyParams,
    pub reference: Snapshot,
    pub data_policy: Snapshot,
    pub iteration: usize,
}

impl TrainerState {
    pub fn new(policy: PolicyParams, iteration: usize) -> Self {
        let snap = policy.snapshot();
        Self {
            live: policy,
            reference: snap.clone(),
            data_policy: snap,
            iteration,
        }
    }

    /// Freezes the live policy as the next iteration's reference and data policy.
    pub fn advance(&mut self) {
        let snap = self.live.snapshot();
        self.reference = snap.clone();
        self.data_policy = snap;
        self.iteration += 1;
    }
}

/// Log-probs of one pair under the live policy and the reference.
pub fn pair_log_probs(
    live: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
) -> Result<PreferenceLogProbs> {
    let x = &pair.instruction;
    let (lw, ll) = (
        seq_log_prob(live, x, &pair.chosen)?,
        seq_log_prob(live, x, &pair.rejected)?,
    );
    let (rw, rl) = (
        seq_log_prob(reference, x, &pair.chosen)?,
        seq_log_prob(reference, x, &pair.rejected)?,
    );
    PreferenceLogProbs::new(lw, ll, rw, rl, pair.chosen.len(), pair.rejected.len()).map_err(|e| {
        Error::NonFinite(format!(
            "iteration {} pair log-probs ({lw}, {ll}, {rw}, {rl}): {e}",
            pair.iteration
        ))
    })
}

/// One optimizer step on `batch` at learning rate `lr`.
///
/// The per-pair loss gradients with respect to the chosen and rejected
/// log-probs are pushed into the logit table, averaged over the batch, and
/// applied with AdamW. Metrics describe the batch before the update.
pub fn train_step(
    state: &mut TrainerState,
    batch: &[PreferencePair],
    objective: &ObjectiveConfig,
    opt: &mut AdamW,
    step: usize,
    lr: f64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let lps = batch
        .iter()
        .map(|p| pair_log_probs(&state.live, &state.reference, p))
        .collect::<Result<Vec<_>>>()?;
    let losses = batch_loss(&lps, objective)?;
    let context = |what: &str| format!("iteration {} step {step}: {what}", state.iteration);
    if !losses.mean_loss.is_finite() {
        return Err(Error::NonFinite(context(&format!(
            "loss {}",
            losses.mean_loss
        ))));
    }

    let n = batch.len() as f64;
    let mut grad = GradTable::zeros_like(&state.live);
    for (i, (pair, out)) in batch.iter().zip(&losses.outputs).enumerate() {
        let (gw, gl) = (out.grad[GRAD_THETA_W], out.grad[GRAD_THETA_L]);
        if !(gw.is_finite() && gl.is_finite()) {
            return Err(Error::NonFinite(context(&format!(
                "pair {i} gradient ({gw}, {gl}) at {:?}",
                lps[i]
            ))));
        }
        accumulate_grad(
            &state.live,
            &pair.instruction,
            &pair.chosen,
            gw / n,
            &mut grad,
        )?;
        accumulate_grad(
            &state.live,
            &pair.instruction,
            &pair.rejected,
            gl / n,
            &mut grad,
        )?;
    }
    if !grad.l2_norm().is_finite() {
        return Err(Error::NonFinite(context("logit gradient")));
    }
    opt.update(state.live.logits_mut(), grad.values(), lr)?;
    if state.live.logits().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(context("logits after update")));
    }
    state.live.bump_version();

    let mean = |f: &dyn Fn(usize) -> f64| (0..batch.len()).map(f).sum::<f64>() / n;
    let outs = &losses.outputs;
    Ok(StepMetrics {
        iteration: state.iteration,
        step,
        loss: losses.mean_loss,
        reward_w: mean(&|i| outs[i].reward_w),
        reward_l: mean(&|i| outs[i].reward_l),
        s_theta: mean(&|i| lps[i].lp_theta_w - lps[i].lp_theta_l),
        s_ref: mean(&|i| lps[i].lp_ref_w - lps[i].lp_ref_l),
        gradient_weight: mean(&|i| outs[i].gradient_weight),
        len_w: mean(&|i| lps[i].len_w as f64),
        len_l: mean(&|i| lps[i].len_l as f64),
        logp_w: mean(&|i| lps[i].lp_theta_w),
        logp_l: mean(&|i| lps[i].lp_theta_l),
        logp_norm_w: mean(&|i| lps[i].lp_theta_w / lps[i].len_w as f64),
        logp_norm_l: mean(&|i| lps[i].lp_theta_l / lps[i].len_l as f64),
        nll: mean(&|i| outs[i].nll),
        agreement: mean(&|i| f64::from(u8::from(lps[i].lp_ref_w > lps[i].lp_ref_l))),
        lr,
    })
}
