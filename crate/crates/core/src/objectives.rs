//! Closed-form preference-optimization objectives.
//!
//! Every objective consumes the four sequence log-probabilities of a
//! preference pair (policy and reference, chosen and rejected) plus the two
//! response lengths, and returns the loss together with its analytic gradient
//! with respect to those four log-probabilities.
//!
//! ```text
//! s_theta = log pi(y_w|x)     - log pi(y_l|x)
//! s_ref   = log pi_ref(y_w|x) - log pi_ref(y_l|x)
//!
//! DPO      -log sig(beta (s_theta - s_ref))
//! a-DPO    -log sig(beta (s_theta - (1 + alpha) s_ref))
//! DPO+NLL  DPO   + w      * (-log pi(y_w|x) / |y_w|)
//! AIPO     a-DPO + lambda * (-log pi(y_w|x) / |y_w|)
//! SimPO    -log sig(beta/|y_w| log pi(y_w|x) - beta/|y_l| log pi(y_l|x) - gamma)
//! ```
//!
//! The reference model is frozen, so gradient entries for the two reference
//! log-probabilities are always exactly zero. Gradients are per pair; batch
//! scaling is the caller's job.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gradient slot of the chosen policy log-prob.
pub const GRAD_THETA_W: usize = 0;
/// Gradient slot of the rejected policy log-prob.
pub const GRAD_THETA_L: usize = 1;
pub const GRAD_REF_W: usize = 2;
pub const GRAD_REF_L: usize = 3;

/// Sequence log-probabilities (nats) and token lengths of one preference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceLogProbs {
    pub lp_theta_w: f64,
    pub lp_theta_l: f64,
    pub lp_ref_w: f64,
    pub lp_ref_l: f64,
    pub len_w: usize,
    pub len_l: usize,
}

impl PreferenceLogProbs {
    pub fn new(
        lp_theta_w: f64,
        lp_theta_l: f64,
        lp_ref_w: f64,
        lp_ref_l: f64,
        len_w: usize,
        len_l: usize,
    ) -> Result<Self> {
        let lp = Self {
            lp_theta_w,
            lp_theta_l,
            lp_ref_w,
            lp_ref_l,
            len_w,
            len_l,
        };
        lp.validate()?;
        Ok(lp)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lp_theta_w", self.lp_theta_w),
            ("lp_theta_l", self.lp_theta_l),
            ("lp_ref_w", self.lp_ref_w),
            ("lp_ref_l", self.lp_ref_l),
        ] {
            if !v.is_finite() || v > 0.0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be finite and <= 0, got {v}"
                )));
            }
        }
        if self.len_w == 0 || self.len_l == 0 {
            return Err(Error::InvalidInput(
                "response lengths must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Policy and reference log-ratios between chosen and rejected responses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRatioScores {
    pub s_theta: f64,
    pub s_ref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Dpo,
    DpoNll,
    Simpo,
    AlphaDpo,
    Aipo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Dpo,
        ObjectiveKind::DpoNll,
        ObjectiveKind::Simpo,
        ObjectiveKind::AlphaDpo,
        ObjectiveKind::Aipo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Dpo => "dpo",
            ObjectiveKind::DpoNll => "dpo_nll",
            ObjectiveKind::Simpo => "simpo",
            ObjectiveKind::AlphaDpo => "alpha_dpo",
            ObjectiveKind::Aipo => "aipo",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Objective selector and hyperparameters.
///
/// `agreement_alpha` scales the reference log-ratio (alpha-DPO, AIPO);
/// `nll_weight` weights the length-normalized NLL term (DPO+NLL, AIPO).
/// Fields that `kind` does not use are ignored but still range-checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub beta: f64,
    #[serde(default)]
    pub agreement_alpha: f64,
    #[serde(default)]
    pub nll_weight: f64,
    #[serde(default)]
    pub simpo_gamma: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::aipo(0.1, 0.05, 0.2)
    }
}

impl ObjectiveConfig {
    pub fn dpo(beta: f64) -> Self {
        Self {
            kind: ObjectiveKind::Dpo,
            beta,
            agreement_alpha: 0.0,
            nll_weight: 0.0,
            simpo_gamma: 0.0,
        }
    }

    pub fn dpo_nll(beta: f64, nll_weight: f64) -> Self {
        Self {
            kind: ObjectiveKind::DpoNll,
            nll_weight,
            ..Self::dpo(beta)
        }
    }

    pub fn simpo(beta: f64, gamma: f64) -> Self {
        Self {
            kind: ObjectiveKind::Simpo,
            simpo_gamma: gamma,
            ..Self::dpo(beta)
        }
    }

    pub fn alpha_dpo(beta: f64, agreement_alpha: f64) -> Self {
        Self {
            kind: ObjectiveKind::AlphaDpo,
            agreement_alpha,
            ..Self::dpo(beta)
        }
    }

    pub fn aipo(beta: f64, agreement_alpha: f64, nll_weight: f64) -> Self {
        Self {
            kind: ObjectiveKind::Aipo,
            agreement_alpha,
            nll_weight,
            ..Self::dpo(beta)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidInput(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        for (name, v) in [
            ("agreement_alpha", self.agreement_alpha),
            ("nll_weight", self.nll_weight),
            ("simpo_gamma", self.simpo_gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Short label naming the objective and the hyperparameters it uses.
    pub fn label(&self) -> String {
        match self.kind {
            ObjectiveKind::Dpo => format!("dpo_b{}", self.beta),
            ObjectiveKind::DpoNll => format!("dpo_nll_b{}_w{}", self.beta, self.nll_weight),
            ObjectiveKind::Simpo => format!("simpo_b{}_g{}", self.beta, self.simpo_gamma),
            ObjectiveKind::AlphaDpo => {
                format!("alpha_dpo_b{}_a{}", self.beta, self.agreement_alpha)
            }
            ObjectiveKind::Aipo => format!(
                "aipo_b{}_a{}_l{}",
                self.beta, self.agreement_alpha, self.nll_weight
            ),
        }
    }
}

/// Loss, gradient and per-pair diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// d loss / d (lp_theta_w, lp_theta_l, lp_ref_w, lp_ref_l).
    pub grad: [f64; 4],
    /// Implicit reward of the chosen response (length-normalized policy term for SimPO).
    pub reward_w: f64,
    pub reward_l: f64,
    /// reward_w - reward_l.
    pub margin: f64,
    /// Target margin subtracted inside the sigmoid: 0 for DPO, alpha*beta*s_ref for
    /// alpha-DPO/AIPO, gamma for SimPO.
    pub target_margin: f64,
    pub gradient_weight: f64,
    /// Unweighted length-normalized NLL of the chosen response.
    pub nll: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_ratio_scores(lp: &PreferenceLogProbs) -> LogRatioScores {
    LogRatioScores {
        s_theta: lp.lp_theta_w - lp.lp_theta_l,
        s_ref: lp.lp_ref_w - lp.lp_ref_l,
    }
}

/// beta * (log pi(y|x) - log pi_ref(y|x)); the partition term cancels pairwise
/// and is never represented.
pub fn implicit_reward(lp_policy: f64, lp_reference: f64, beta: f64) -> f64 {
    beta * (lp_policy - lp_reference)
}

/// Probability that the chosen response wins, with an optional target margin.
pub fn bradley_terry(reward_w: f64, reward_l: f64, margin: f64) -> f64 {
    sigmoid(reward_w - reward_l - margin)
}

pub fn nll_term(lp_theta_w: f64, len_w: usize) -> f64 {
    -lp_theta_w / len_w as f64
}

pub fn dpo_loss(lp: &PreferenceLogProbs, beta: f64) -> LossOutput {
    alpha_dpo_loss(lp, beta, 0.0)
}

pub fn alpha_dpo_loss(lp: &PreferenceLogProbs, beta: f64, agreement_alpha: f64) -> LossOutput {
    let LogRatioScores { s_theta, s_ref } = log_ratio_scores(lp);
    let z = beta * (s_theta - (1.0 + agreement_alpha) * s_ref);
    let weight = sigmoid(-z);
    let reward_w = implicit_reward(lp.lp_theta_w, lp.lp_ref_w, beta);
    let reward_l = implicit_reward(lp.lp_theta_l, lp.lp_ref_l, beta);
    LossOutput {
        loss: softplus(-z),
        grad: [-beta * weight, beta * weight, 0.0, 0.0],
        reward_w,
        reward_l,
        margin: reward_w - reward_l,
        target_margin: agreement_alpha * beta * s_ref,
        gradient_weight: weight,
        nll: nll_term(lp.lp_theta_w, lp.len_w),
    }
}

fn with_nll(mut out: LossOutput, lp: &PreferenceLogProbs, weight: f64) -> LossOutput {
    out.loss += weight * out.nll;
    out.grad[GRAD_THETA_W] -= weight / lp.len_w as f64;
    out
}

pub fn dpo_nll_loss(lp: &PreferenceLogProbs, beta: f64, nll_weight: f64) -> LossOutput {
    with_nll(dpo_loss(lp, beta), lp, nll_weight)
}

pub fn aipo_loss(
    lp: &PreferenceLogProbs,
    beta: f64,
    agreement_alpha: f64,
    nll_weight: f64,
) -> LossOutput {
    with_nll(alpha_dpo_loss(lp, beta, agreement_alpha), lp, nll_weight)
}

/// Reference-free, length-normalized objective. Reference log-probs are unused.
pub fn simpo_loss(lp: &PreferenceLogProbs, beta: f64, gamma: f64) -> LossOutput {
    let scale_w = beta / lp.len_w as f64;
    let scale_l = beta / lp.len_l as f64;
    let reward_w = scale_w * lp.lp_theta_w;
    let reward_l = scale_l * lp.lp_theta_l;
    let arg = reward_w - reward_l - gamma;
    let weight = sigmoid(-arg);
    LossOutput {
        loss: softplus(-arg),
        grad: [-scale_w * weight, scale_l * weight, 0.0, 0.0],
        reward_w,
        reward_l,
        margin: reward_w - reward_l,
        target_margin: gamma,
        gradient_weight: weight,
        nll: nll_term(lp.lp_theta_w, lp.len_w),
    }
}

/// Dispatch on `cfg.kind`.
pub fn evaluate(lp: &PreferenceLogProbs, cfg: &ObjectiveConfig) -> LossOutput {
    match cfg.kind {
        ObjectiveKind::Dpo => dpo_loss(lp, cfg.beta),
        ObjectiveKind::DpoNll => dpo_nll_loss(lp, cfg.beta, cfg.nll_weight),
        ObjectiveKind::Simpo => simpo_loss(lp, cfg.beta, cfg.simpo_gamma),
        ObjectiveKind::AlphaDpo => alpha_dpo_loss(lp, cfg.beta, cfg.agreement_alpha),
        ObjectiveKind::Aipo => aipo_loss(lp, cfg.beta, cfg.agreement_alpha, cfg.nll_weight),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean_loss: f64,
    pub outputs: Vec<LossOutput>,
}

/// Mean loss over a batch, summed in index order.
pub fn batch_loss(batch: &[PreferenceLogProbs], cfg: &ObjectiveConfig) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let outputs: Vec<LossOutput> = batch.iter().map(|lp| evaluate(lp, cfg)).collect();
    let mut total = 0.0;
    for out in &outputs {
        total += out.loss;
    }
    Ok(BatchLoss {
        mean_loss: total / batch.len() as f64,
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn pair(s_theta: f64, s_ref: f64) -> PreferenceLogProbs {
        PreferenceLogProbs::new(-10.0, -10.0 - s_theta, -20.0, -20.0 - s_ref, 10, 12).unwrap()
    }

    #[test]
    fn log_ratio_examples() {
        let lp = PreferenceLogProbs::new(-10.0, -10.0, -5.0, -5.0, 1, 1).unwrap();
        assert_eq!(
            log_ratio_scores(&lp),
            LogRatioScores {
                s_theta: 0.0,
                s_ref: 0.0
            }
        );
        let lp = PreferenceLogProbs::new(-10.0, -12.0, -5.0, -6.0, 1, 1).unwrap();
        assert_eq!(
            log_ratio_scores(&lp),
            LogRatioScores {
                s_theta: 2.0,
                s_ref: 1.0
            }
        );
        // self-generated chosen/rejected magnitudes
        let lp = PreferenceLogProbs::new(-107.8, -110.4, -107.8, -110.4, 402, 407).unwrap();
        let s = log_ratio_scores(&lp);
        assert!((s.s_theta - 2.6).abs() < 1e-12);
        assert_eq!(s.s_theta, s.s_ref);
    }

    #[test]
    fn implicit_reward_examples() {
        assert_eq!(implicit_reward(-10.0, -10.0, 0.1), 0.0);
        assert!((implicit_reward(-10.0, -12.0, 0.1) - 0.2).abs() < 1e-15);
        assert_eq!(implicit_reward(-361.5, -361.5, 0.5), 0.0);
    }

    #[test]
    fn bradley_terry_examples() {
        assert_eq!(bradley_terry(1.0, 1.0, 0.0), 0.5);
        assert!((bradley_terry(0.3, 0.2, 0.0) - 0.524_979_187_478_939_9).abs() < 1e-12);
        assert!((bradley_terry(0.3, 0.2, 0.1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dpo_examples() {
        assert!((dpo_loss(&pair(1.5, 1.5), 0.1).loss - LN2).abs() < 1e-15);
        let out = dpo_loss(&pair(2.0, 1.0), 0.1);
        assert!((out.loss - 0.644_396_660_073_570_9).abs() < 1e-12);
        assert!((out.gradient_weight - 0.475_020_812_521_060_0).abs() < 1e-12);
        assert_eq!(out.grad[GRAD_THETA_W], -0.1 * out.gradient_weight);
        assert_eq!(out.grad[GRAD_THETA_L], 0.1 * out.gradient_weight);
    }

    #[test]
    fn alpha_dpo_examples() {
        let lp = pair(2.0, 1.0);
        assert_eq!(alpha_dpo_loss(&lp, 0.1, 0.0), dpo_loss(&lp, 0.1));
        let out = alpha_dpo_loss(&lp, 0.1, 0.05);
        assert!((out.loss - 0.646_774_881_593_005_6).abs() < 1e-12);
        assert!((out.gradient_weight - 0.476_267_845_873_438_9).abs() < 1e-12);
        assert!((out.target_margin - 0.005).abs() < 1e-15);
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll_term(0.0, 5), 0.0);
        assert_eq!(nll_term(-50.0, 25), 2.0);
        assert!((nll_term(-107.8, 402) - 0.268_159).abs() < 1e-6);
    }

    #[test]
    fn aipo_and_dpo_nll_examples() {
        let lp = PreferenceLogProbs::new(-50.0, -52.0, -20.0, -21.0, 25, 30).unwrap();
        let aipo = aipo_loss(&lp, 0.1, 0.05, 0.2);
        assert!((aipo.loss - 1.046_774_881_593_005_6).abs() < 1e-12);
        assert_eq!(
            aipo_loss(&lp, 0.1, 0.05, 0.0),
            alpha_dpo_loss(&lp, 0.1, 0.05)
        );
        let dn = dpo_nll_loss(&lp, 0.1, 0.2);
        assert!((dn.loss - 1.044_396_660_073_570_9).abs() < 1e-12);
        assert_eq!(dpo_nll_loss(&lp, 0.1, 0.0), dpo_loss(&lp, 0.1));
        assert!(
            (aipo.grad[GRAD_THETA_W] - (-0.1 * aipo.gradient_weight - 0.2 / 25.0)).abs() < 1e-15
        );
    }

    #[test]
    fn simpo_examples() {
        let tie = PreferenceLogProbs::new(-10.0, -20.0, -1.0, -1.0, 5, 10).unwrap();
        assert!((simpo_loss(&tie, 2.0, 0.0).loss - LN2).abs() < 1e-15);
        let lp = PreferenceLogProbs::new(-20.0, -30.0, -1.0, -1.0, 10, 10).unwrap();
        let out = simpo_loss(&lp, 2.0, 0.5);
        assert!((out.loss - 0.201_413_277_982_752_4).abs() < 1e-12);
        assert!((out.reward_w - -4.0).abs() < 1e-15);
        assert!((out.reward_l - -6.0).abs() < 1e-15);
    }

    #[test]
    fn table5_grid_configs_validate() {
        for beta in [0.1, 0.5, 1.0] {
            ObjectiveConfig::dpo(beta).validate().unwrap();
        }
        for w in [0.2, 0.4, 0.6] {
            ObjectiveConfig::dpo_nll(0.1, w).validate().unwrap();
        }
        for beta in [2.0, 3.0] {
            for g in [0.5, 1.0] {
                ObjectiveConfig::simpo(beta, g).validate().unwrap();
            }
        }
        for a in [0.02, 0.03, 0.04, 0.05] {
            ObjectiveConfig::alpha_dpo(0.1, a).validate().unwrap();
        }
        for a in [0.03, 0.05, 0.07] {
            for l in [0.2, 0.5] {
                ObjectiveConfig::aipo(0.1, a, l).validate().unwrap();
            }
        }
        assert!(ObjectiveConfig::dpo(0.0).validate().is_err());
        // unused fields are still range-checked
        let mut cfg = ObjectiveConfig::dpo(0.1);
        cfg.simpo_gamma = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn invalid_log_probs_rejected() {
        assert!(PreferenceLogProbs::new(0.5, -1.0, -1.0, -1.0, 1, 1).is_err());
        assert!(PreferenceLogProbs::new(f64::NAN, -1.0, -1.0, -1.0, 1, 1).is_err());
        assert!(PreferenceLogProbs::new(-1.0, -1.0, -1.0, -1.0, 0, 1).is_err());
    }

    #[test]
    fn batch_loss_reduction() {
        let cfg = ObjectiveConfig::dpo(0.1);
        assert!(matches!(batch_loss(&[], &cfg), Err(Error::EmptyBatch)));
        let a = pair(2.0, 1.0);
        let b = pair(-1.0, 0.5);
        let one = batch_loss(&[a], &cfg).unwrap();
        assert_eq!(one.mean_loss, dpo_loss(&a, 0.1).loss);
        let two = batch_loss(&[a, b], &cfg).unwrap();
        let expect = (dpo_loss(&a, 0.1).loss + dpo_loss(&b, 0.1).loss) / 2.0;
        assert!((two.mean_loss - expect).abs() < 1e-15);
        assert_eq!(two.outputs.len(), 2);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - LN2).abs() < 1e-16);
    }

    fn arb_lp() -> impl Strategy<Value = PreferenceLogProbs> {
        (
            -40.0f64..-0.01,
            -40.0f64..-0.01,
            -40.0f64..-0.01,
            -40.0f64..-0.01,
            1usize..50,
            1usize..50,
        )
            .prop_map(|(a, b, c, d, lw, ll)| PreferenceLogProbs::new(a, b, c, d, lw, ll).unwrap())
    }

    proptest! {
        #[test]
        fn reference_gradient_is_zero(lp in arb_lp(), beta in 0.05f64..3.0, alpha in 0.0f64..0.2, w in 0.0f64..1.0, g in 0.0f64..2.0) {
            for kind in ObjectiveKind::ALL {
                let cfg = ObjectiveConfig { kind, beta, agreement_alpha: alpha, nll_weight: w, simpo_gamma: g };
                let out = evaluate(&lp, &cfg);
                prop_assert_eq!(out.grad[GRAD_REF_W], 0.0);
                prop_assert_eq!(out.grad[GRAD_REF_L], 0.0);
                prop_assert!(out.loss >= 0.0);
            }
        }

        #[test]
        fn weight_derivative_link(lp in arb_lp(), beta in 0.05f64..1.0, alpha in 0.0f64..0.2) {
            for out in [dpo_loss(&lp, beta), alpha_dpo_loss(&lp, beta, alpha)] {
                prop_assert_eq!(out.grad[GRAD_THETA_W].abs(), beta * out.gradient_weight);
                prop_assert_eq!(out.grad[GRAD_THETA_L], -out.grad[GRAD_THETA_W]);
            }
        }

        #[test]
        fn dpo_is_bradley_terry_of_implicit_rewards(lp in arb_lp(), beta in 0.05f64..1.0) {
            let rw = implicit_reward(lp.lp_theta_w, lp.lp_ref_w, beta);
            let rl = implicit_reward(lp.lp_theta_l, lp.lp_ref_l, beta);
            let bt = -bradley_terry(rw, rl, 0.0).ln();
            prop_assert!((dpo_loss(&lp, beta).loss - bt).abs() < 1e-12 * bt.max(1.0));
        }

        #[test]
        fn alpha_loss_monotone_in_alpha(lp in arb_lp(), beta in 0.05f64..0.5, a in 0.0f64..0.5, da in 0.01f64..0.5) {
            let s_ref = log_ratio_scores(&lp).s_ref;
            prop_assume!(s_ref.abs() > 1e-3);
            let lo = alpha_dpo_loss(&lp, beta, a).loss;
            let hi = alpha_dpo_loss(&lp, beta, a + da).loss;
            if s_ref > 0.0 { prop_assert!(hi > lo); } else { prop_assert!(hi < lo); }
        }
    }
}
