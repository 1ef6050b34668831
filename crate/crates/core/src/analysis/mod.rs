//! Post-hoc diagnostics over run artifacts: correlation reports,
//! chosen/rejected similarity tables, reward trends, objective comparisons
//! and hyperparameter sweeps. Nothing here writes into a run directory.

mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use sweep::{run_sweep, ObjectiveGrid, SweepFailure, SweepGrid, SweepReport, SweepRow};

use crate::error::{Error, Result};
use crate::pipeline::{
    build_pair, token_similarity, JudgeConfig, PairOutcome, PreferencePair, TaskDomain,
};
use crate::policy::{sample, seq_log_prob, PolicyParams, SamplerConfig};
use crate::rng::{Purpose, StreamKey};
use crate::trainer::{pretrain, read_metrics, PretrainConfig, RunManifest, RunSummary};

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!(
            "pearson needs equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidInput(
            "pearson needs at least 2 points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx.is_nan() || sxx <= 0.0 {
        return Err(Error::ZeroVariance("x"));
    }
    if syy.is_nan() || syy <= 0.0 {
        return Err(Error::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub x: String,
    pub y: String,
    pub rho: f64,
    pub n: usize,
    /// Where the scatter points were written, once they have been.
    pub scatter: Option<PathBuf>,
    #[serde(skip)]
    pub points: Vec<(f64, f64)>,
}

impl CorrelationReport {
    pub fn from_points(x: &str, y: &str, points: Vec<(f64, f64)>) -> Result<Self> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
        let rho = pearson(&xs, &ys)?;
        Ok(Self {
            x: x.to_string(),
            y: y.to_string(),
            rho,
            n: points.len(),
            scatter: None,
            points,
        })
    }

    /// Writes the points as a two-column CSV and records the path.
    pub fn write_scatter(&mut self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::InvalidInput(e.to_string());
        w.write_record([self.x.as_str(), self.y.as_str()])
            .map_err(io)?;
        for (x, y) in &self.points {
            w.write_record([x.to_string(), y.to_string()]).map_err(io)?;
        }
        fs::write(path, w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
        self.scatter = Some(path.to_path_buf());
        Ok(())
    }
}

/// Lengths and reference log-probs of one pair's responses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub len_w: usize,
    pub len_l: usize,
    pub logp_w: f64,
    pub logp_l: f64,
}

impl PairStats {
    pub fn s_ref(&self) -> f64 {
        self.logp_w - self.logp_l
    }
}

pub fn pair_stats(pairs: &[PreferencePair], reference: &PolicyParams) -> Result<Vec<PairStats>> {
    pairs
        .iter()
        .map(|p| {
            Ok(PairStats {
                len_w: p.chosen.len(),
                len_l: p.rejected.len(),
                logp_w: seq_log_prob(reference, &p.instruction, &p.chosen)?,
                logp_l: seq_log_prob(reference, &p.instruction, &p.rejected)?,
            })
        })
        .collect()
}

/// Mean total and length-normalized log-probs of each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLogProbs {
    pub chosen_logp: f64,
    pub rejected_logp: f64,
    pub chosen_logp_norm: f64,
    pub rejected_logp_norm: f64,
}

impl GroupLogProbs {
    pub fn from_stats(stats: &[PairStats]) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = stats.len() as f64;
        let mean = |f: &dyn Fn(&PairStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            chosen_logp: mean(&|s| s.logp_w),
            rejected_logp: mean(&|s| s.logp_l),
            chosen_logp_norm: mean(&|s| s.logp_w / s.len_w as f64),
            rejected_logp_norm: mean(&|s| s.logp_l / s.len_l as f64),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthLogprobReport {
    pub correlation: CorrelationReport,
    pub groups: GroupLogProbs,
}

/// Correlation of response length with reference log-prob, chosen and
/// rejected responses pooled.
pub fn length_logprob_report(
    pairs: &[PreferencePair],
    reference: &PolicyParams,
) -> Result<LengthLogprobReport> {
    length_logprob_from_stats(&pair_stats(pairs, reference)?)
}

pub fn length_logprob_from_stats(stats: &[PairStats]) -> Result<LengthLogprobReport> {
    let groups = GroupLogProbs::from_stats(stats)?;
    let points = stats
        .iter()
        .flat_map(|s| [(s.len_w as f64, s.logp_w), (s.len_l as f64, s.logp_l)])
        .collect();
    Ok(LengthLogprobReport {
        correlation: CorrelationReport::from_points("length", "logp", points)?,
        groups,
    })
}

/// Correlation of `s_ref` with the chosen-minus-rejected length difference.
pub fn sref_lengthdiff_report(
    pairs: &[PreferencePair],
    reference: &PolicyParams,
) -> Result<CorrelationReport> {
    sref_lengthdiff_from_stats(&pair_stats(pairs, reference)?)
}

pub fn sref_lengthdiff_from_stats(stats: &[PairStats]) -> Result<CorrelationReport> {
    if stats.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let points = stats
        .iter()
        .map(|s| (s.s_ref(), s.len_w as f64 - s.len_l as f64))
        .collect();
    CorrelationReport::from_points("s_ref", "len_diff", points)
}

/// Whether `s_ref` tracks length difference more weakly than log-prob tracks length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFinding {
    pub rho_sref_lendiff: f64,
    pub rho_length_logp: f64,
    pub sref_weaker: bool,
}

pub fn compare_correlations(
    sref: &CorrelationReport,
    length: &CorrelationReport,
) -> CorrelationFinding {
    CorrelationFinding {
        rho_sref_lendiff: sref.rho,
        rho_length_logp: length.rho,
        sref_weaker: sref.rho.abs() < length.rho.abs(),
    }
}

/// One row of the similarity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub source: String,
    pub pairs: usize,
    pub similarity: f64,
    pub chosen_logp: f64,
    pub rejected_logp: f64,
    pub chosen_logp_norm: f64,
    pub rejected_logp_norm: f64,
}

/// Mean chosen/rejected similarity and reference log-probs per named source.
pub fn similarity_table(
    sources: &[(&str, &[PreferencePair])],
    reference: &PolicyParams,
) -> Result<Vec<SimilarityRow>> {
    sources
        .iter()
        .map(|(name, pairs)| {
            let stats = pair_stats(pairs, reference)?;
            similarity_row(name, pairs, &stats)
        })
        .collect()
}

pub fn similarity_row(
    source: &str,
    pairs: &[PreferencePair],
    stats: &[PairStats],
) -> Result<SimilarityRow> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sim = 0.0;
    for p in pairs {
        sim += token_similarity(&p.chosen, &p.rejected)?;
    }
    let g = GroupLogProbs::from_stats(stats)?;
    Ok(SimilarityRow {
        source: source.to_string(),
        pairs: pairs.len(),
        similarity: sim / pairs.len() as f64,
        chosen_logp: g.chosen_logp,
        rejected_logp: g.rejected_logp,
        chosen_logp_norm: g.chosen_logp_norm,
        rejected_logp_norm: g.rejected_logp_norm,
    })
}

/// A second model for cross-policy comparisons: same recipe as the run's
/// policy, independently initialized, pretrained on another seed's stream for
/// a quarter of the steps.
pub fn control_policy(m: &RunManifest) -> Result<PolicyParams> {
    let mut rng = StreamKey::new(m.seed, Purpose::Control).rng();
    let mut policy = PolicyParams::random(
        m.domain.vocab()?,
        m.policy.order,
        m.policy.init_std,
        &mut rng,
    )?;
    let cfg = PretrainConfig {
        steps: m.pretrain.steps / 4,
        ..m.pretrain
    };
    pretrain(
        &m.domain,
        &mut policy,
        &cfg,
        m.self_instruct.k_exemplars,
        StreamKey::new(m.seed.wrapping_add(1), Purpose::Pretrain),
    )?;
    Ok(policy)
}

/// Rebuilds each pair's instruction from candidates drawn round-robin from
/// `policies`, so chosen and rejected responses usually come from different
/// models. Candidate `j` of pair `i` samples from `key.at(iteration, i, j)` and
/// the judge draws from `key.at(iteration, i, n)`. Degenerate instructions are skipped.
#[allow(clippy::too_many_arguments)]
pub fn cross_policy_pairs(
    domain: &TaskDomain,
    pairs: &[PreferencePair],
    policies: &[&PolicyParams],
    n_candidates: usize,
    sampler: &SamplerConfig,
    judge: &JudgeConfig,
    key: StreamKey,
) -> Result<Vec<PreferencePair>> {
    if policies.is_empty() {
        return Err(Error::InvalidInput(
            "cross-policy pairs need at least one policy".into(),
        ));
    }
    if policies
        .iter()
        .any(|p| p.vocab().size() != domain.vocab_size())
    {
        return Err(Error::ShapeMismatch(
            "policy vocabulary does not match the domain".into(),
        ));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let k = key.at(p.iteration as u64, i as u64, 0);
        let candidates = (0..n_candidates)
            .map(|j| {
                let policy = policies[j % policies.len()];
                Ok(sample(policy, &p.instruction, sampler, &mut k.sub(j as u64).rng())?.sequence)
            })
            .collect::<Result<Vec<_>>>()?;
        let judge_key = k.sub(n_candidates as u64);
        if let PairOutcome::Pair(pair) = build_pair(
            domain,
            &p.instruction,
            &candidates,
            judge,
            p.iteration,
            judge_key,
        )? {
            out.push(pair);
        }
    }
    Ok(out)
}

/// Per-iteration means of the step metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub iteration: usize,
    pub steps: usize,
    pub first_loss: f64,
    pub loss: f64,
    pub reward_w: f64,
    pub reward_l: f64,
    pub logp_w: f64,
    pub logp_l: f64,
    pub logp_norm_w: f64,
    pub logp_norm_l: f64,
    pub s_ref: f64,
    pub agreement: f64,
}

pub fn reward_trend(metrics: &Path) -> Result<Vec<TrendRow>> {
    let rows = read_metrics(metrics)?;
    let mut out: Vec<TrendRow> = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let it = rows[i].iteration;
        let group: Vec<_> = rows[i..].iter().take_while(|r| r.iteration == it).collect();
        let n = group.len() as f64;
        let mean = |f: &dyn Fn(&crate::trainer::StepMetrics) -> f64| {
            group.iter().map(|r| f(r)).sum::<f64>() / n
        };
        out.push(TrendRow {
            iteration: it,
            steps: group.len(),
            first_loss: group[0].loss,
            loss: mean(&|r| r.loss),
            reward_w: mean(&|r| r.reward_w),
            reward_l: mean(&|r| r.reward_l),
            logp_w: mean(&|r| r.logp_w),
            logp_l: mean(&|r| r.logp_l),
            logp_norm_w: mean(&|r| r.logp_norm_w),
            logp_norm_l: mean(&|r| r.logp_norm_l),
            s_ref: mean(&|r| r.s_ref),
            agreement: mean(&|r| r.agreement),
        });
        i += group.len();
    }
    Ok(out)
}

/// One objective's score and length at one iteration. Iteration 0 is the
/// pretrained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub series: String,
    pub iteration: usize,
    pub score: f64,
    pub length: f64,
    pub chosen_len: Option<f64>,
    pub rejected_len: Option<f64>,
}

/// Side-by-side score/length trajectories, one series per run.
pub fn comparison_table(runs: &[(String, RunSummary)]) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for (series, s) in runs {
        rows.push(ComparisonRow {
            series: series.clone(),
            iteration: 0,
            score: s.base_eval.score,
            length: s.base_eval.length,
            chosen_len: None,
            rejected_len: None,
        });
        for it in &s.iterations {
            rows.push(ComparisonRow {
                series: series.clone(),
                iteration: it.iteration,
                score: it.eval.score,
                length: it.eval.length,
                chosen_len: Some(it.mean_chosen_len),
                rejected_len: Some(it.mean_rejected_len),
            });
        }
    }
    rows
}

/// Serializes rows as CSV with a header taken from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    fs::write(path, w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Sequence, TokenId, Vocab, BOS, EOS};
    use crate::trainer::{write_metrics, StepMetrics};
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.6).abs() < 1e-12);
    }

    #[test]
    fn pearson_rejects_degenerate_input() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::ZeroVariance(_))
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0], &[3.0, 3.0]),
            Err(Error::ZeroVariance(_))
        ));
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_symmetric_and_affine_invariant(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
            a in 0.1f64..10.0, b in -5.0f64..5.0,
        ) {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
            prop_assert!(r.abs() <= 1.0);
            prop_assert!((pearson(&ys, &xs).unwrap() - r).abs() < 1e-12);
            let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let ys2: Vec<f64> = ys.iter().map(|y| a * y - b).collect();
            prop_assert!((pearson(&xs2, &ys2).unwrap() - r).abs() < 1e-10);
        }
    }

    fn seq(body: &[TokenId]) -> Sequence {
        let mut t = vec![BOS];
        t.extend_from_slice(body);
        t.push(EOS);
        Sequence::new(t).unwrap()
    }

    fn pair(chosen: &[TokenId], rejected: &[TokenId]) -> PreferencePair {
        PreferencePair {
            iteration: 1,
            instruction: seq(&[4, 5]),
            chosen: seq(chosen),
            rejected: seq(rejected),
            chosen_score: 0.0,
            rejected_score: -1.0,
            n_candidates: 2,
        }
    }

    fn policy() -> PolicyParams {
        let mut rng = StreamKey::new(5, Purpose::Test).rng();
        PolicyParams::random(Vocab::new(10).unwrap(), 2, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn length_logprob_matches_direct_computation() {
        let pol = policy();
        let pairs = vec![
            pair(&[6, 7, 8], &[6]),
            pair(&[7], &[8, 8]),
            pair(&[6, 6], &[9, 7, 6, 5]),
        ];
        let report = length_logprob_report(&pairs, &pol).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for p in &pairs {
            for y in [&p.chosen, &p.rejected] {
                xs.push(y.len() as f64);
                ys.push(seq_log_prob(&pol, &p.instruction, y).unwrap());
            }
        }
        assert_eq!(report.correlation.n, 6);
        assert!((report.correlation.rho - pearson(&xs, &ys).unwrap()).abs() < 1e-12);
        let mean_w = (ys[0] + ys[2] + ys[4]) / 3.0;
        assert!((report.groups.chosen_logp - mean_w).abs() < 1e-12);
        let norm_l = (ys[1] / 2.0 + ys[3] / 3.0 + ys[5] / 5.0) / 3.0;
        assert!((report.groups.rejected_logp_norm - norm_l).abs() < 1e-12);
    }

    #[test]
    fn equal_lengths_are_reported_as_zero_variance() {
        let pol = policy();
        let pairs = vec![pair(&[6, 7], &[8, 9]), pair(&[7, 7], &[8, 6])];
        assert!(matches!(
            length_logprob_report(&pairs, &pol),
            Err(Error::ZeroVariance("x"))
        ));
        assert!(matches!(
            sref_lengthdiff_report(&pairs, &pol),
            Err(Error::ZeroVariance("y"))
        ));
    }

    #[test]
    fn sref_lengthdiff_matches_direct_computation() {
        let pol = policy();
        let pairs = vec![
            pair(&[6, 7, 8], &[6]),
            pair(&[7], &[8, 8]),
            pair(&[6, 6], &[9, 7, 6, 5]),
        ];
        let report = sref_lengthdiff_report(&pairs, &pol).unwrap();
        let lp = |p: &PreferencePair, y: &Sequence| seq_log_prob(&pol, &p.instruction, y).unwrap();
        let xs: Vec<f64> = pairs
            .iter()
            .map(|p| lp(p, &p.chosen) - lp(p, &p.rejected))
            .collect();
        let ys = [2.0, -1.0, -2.0];
        assert!((report.rho - pearson(&xs, &ys).unwrap()).abs() < 1e-12);
        let length = length_logprob_report(&pairs, &pol).unwrap().correlation;
        let f = compare_correlations(&report, &length);
        assert_eq!(f.sref_weaker, report.rho.abs() < length.rho.abs());
    }

    #[test]
    fn similarity_table_arithmetic() {
        let pol = policy();
        let same = vec![pair(&[6, 7], &[6, 7])];
        let mixed = vec![pair(&[6, 7], &[6, 7]), pair(&[6, 7, 8], &[9])];
        let rows = similarity_table(&[("self", &same), ("cross", &mixed)], &pol).unwrap();
        assert_eq!(rows[0].similarity, 1.0);
        // [6,7,8,EOS] vs [9,EOS]: LCS 1 over 4
        assert!((rows[1].similarity - (1.0 + 0.25) / 2.0).abs() < 1e-12);
        assert_eq!(rows[1].pairs, 2);
        let lp = seq_log_prob(&pol, &mixed[1].instruction, &mixed[1].rejected).unwrap();
        let lp0 = seq_log_prob(&pol, &mixed[0].instruction, &mixed[0].rejected).unwrap();
        assert!((rows[1].rejected_logp - (lp0 + lp) / 2.0).abs() < 1e-12);
        assert!((rows[1].rejected_logp_norm - (lp0 / 3.0 + lp / 2.0) / 2.0).abs() < 1e-12);
    }

    fn step(iteration: usize, step: usize, loss: f64, lpn: f64) -> StepMetrics {
        StepMetrics {
            iteration,
            step,
            loss,
            reward_w: loss / 10.0,
            reward_l: -loss / 10.0,
            s_theta: 0.0,
            s_ref: 0.0,
            gradient_weight: 0.5,
            len_w: 3.0,
            len_l: 2.0,
            logp_w: 3.0 * lpn,
            logp_l: 2.0 * lpn,
            logp_norm_w: lpn,
            logp_norm_l: lpn - 0.5,
            nll: -lpn,
            agreement: 0.5,
            lr: 0.0,
        }
    }

    #[test]
    fn reward_trend_averages_per_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(
            &path,
            &[
                step(1, 0, 0.7, -1.0),
                step(1, 1, 0.5, -2.0),
                step(2, 0, 0.6, -0.5),
            ],
        )
        .unwrap();
        let trend = reward_trend(&path).unwrap();
        assert_eq!(trend.len(), 2);
        assert_eq!(trend[0].steps, 2);
        assert_eq!(trend[0].first_loss, 0.7);
        assert!((trend[0].loss - 0.6).abs() < 1e-12);
        assert!((trend[0].logp_norm_w + 1.5).abs() < 1e-12);
        assert!((trend[0].logp_norm_l + 2.0).abs() < 1e-12);
        assert!((trend[0].reward_w - 0.06).abs() < 1e-12);
        assert_eq!(trend[1].loss, 0.6);

        write_metrics(&path, &[step(3, 0, 0.4, -1.0)]).unwrap();
        let one = reward_trend(&path).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].logp_norm_w, -1.0);
    }

    #[test]
    fn reward_trend_reports_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(&path, &[step(1, 0, 0.7, -1.0), step(1, 1, 0.5, -2.0)]).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("1,2,oops,0,0,0,0,0,0,0,0,0,0,0,0,0,0\n");
        fs::write(&path, text).unwrap();
        match reward_trend(&path) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scatter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r =
            CorrelationReport::from_points("a", "b", vec![(1.0, 2.0), (2.0, 1.0), (3.0, 0.5)])
                .unwrap();
        let path = dir.path().join("s.csv");
        r.write_scatter(&path).unwrap();
        assert_eq!(r.scatter.as_deref(), Some(path.as_path()));
        assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n1,2\n2,1\n3,0.5\n");
    }
}
