//! Command implementations behind the `prefopt` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use prefopt_core::analysis::{
    compare_correlations, comparison_table, control_policy, cross_policy_pairs,
    length_logprob_from_stats, pair_stats, reward_trend, run_sweep, similarity_row,
    sref_lengthdiff_from_stats, write_csv, ComparisonRow, CorrelationFinding, CorrelationReport,
    GroupLogProbs, SimilarityRow, SweepGrid, SweepReport,
};
use prefopt_core::pipeline::read_pairs;
use prefopt_core::policy::load_checkpoint;
use prefopt_core::rng::{Purpose, StreamKey};
use prefopt_core::trainer::{
    generate_dataset, load_run_manifest, run_experiment, IterationSummary, RunManifest, RunOptions,
    RunSummary,
};
use prefopt_core::{Error, Result};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Command-line values that take precedence over the manifest.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

pub fn load_manifest(path: &Path, ov: &Overrides) -> Result<RunManifest> {
    let mut m = RunManifest::load(path)?;
    if let Some(s) = ov.seed {
        m.seed = s;
    }
    if let Some(w) = ov.workers {
        m.workers = Some(w);
    }
    if let Some(d) = &ov.out_dir {
        m.out_dir = Some(d.clone());
    }
    m.validate()?;
    Ok(m)
}

fn out_dir(m: &RunManifest) -> Result<PathBuf> {
    m.out_dir.clone().ok_or_else(|| {
        Error::Manifest("no output directory: set `out_dir` or pass --out-dir".into())
    })
}

/// One data phase with the manifest's checkpoint. Returns the pairs file.
pub fn cmd_gen(manifest: &Path, ov: &Overrides) -> Result<PathBuf> {
    let m = load_manifest(manifest, ov)?;
    let out = out_dir(&m)?;
    generate_dataset(&m, &out)?;
    Ok(out.join("pairs.jsonl"))
}

pub fn iteration_line(it: &IterationSummary) -> String {
    format!(
        "iter {}: pairs {} attempts {} chosen_len {:.2} rejected_len {:.2} loss {:.4} -> {:.4} eval_score {:.4} eval_len {:.2}",
        it.iteration,
        it.pairs,
        it.attempts,
        it.mean_chosen_len,
        it.mean_rejected_len,
        it.first_loss,
        it.final_loss,
        it.eval.score,
        it.eval.length,
    )
}

/// Runs the full pipeline, writing one line per completed iteration to `log`.
pub fn cmd_train(
    manifest: &Path,
    ov: &Overrides,
    resume: bool,
    log: &mut impl Write,
) -> Result<RunSummary> {
    let m = load_manifest(manifest, ov)?;
    let out = out_dir(&m)?;
    let opts = RunOptions {
        resume,
        stop_after: None,
    };
    let mut io_err = None;
    let summary = run_experiment(&m, &out, &opts, |it| {
        if let Err(e) = writeln!(log, "{}", iteration_line(it)) {
            io_err.get_or_insert(e);
        }
    })?;
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(summary),
    }
}

pub fn cmd_sweep(grid: &Path, ov: &Overrides) -> Result<(PathBuf, SweepReport)> {
    let mut g = SweepGrid::load(grid)?;
    if let Some(s) = ov.seed {
        g.base.seed = s;
    }
    if let Some(w) = ov.workers {
        g.workers = Some(w);
    }
    let out = ov
        .out_dir
        .clone()
        .or_else(|| g.base.out_dir.clone())
        .ok_or_else(|| {
            Error::Manifest("no output directory: set `base.out_dir` or pass --out-dir".into())
        })?;
    g.validate()?;
    let report = run_sweep(&g, &out)?;
    Ok((out, report))
}

/// Everything `analyze` computes, also written as `analysis.json`.
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub iterations: Vec<usize>,
    pub length_logprob: CorrelationReport,
    pub sref_lengthdiff: CorrelationReport,
    pub finding: CorrelationFinding,
    pub groups: GroupLogProbs,
    pub similarity: Vec<SimilarityRow>,
}

/// Pools every iteration's pairs, each scored under the reference that
/// iteration trained against, and writes reports into `out`.
pub fn cmd_analyze(run_dir: &Path, out: &Path) -> Result<AnalysisReport> {
    let m = load_run_manifest(run_dir)?;
    let mut iterations = Vec::new();
    let mut pairs = Vec::new();
    let mut stats = Vec::new();
    for t in 1..=m.plan.iterations {
        let path = run_dir.join(format!("iter_{t}/pairs.jsonl"));
        if !path.exists() {
            break;
        }
        let reference = load_checkpoint(&run_dir.join(format!("iter_{}/policy.ckpt", t - 1)))?;
        let batch = read_pairs(&path)?;
        stats.extend(pair_stats(&batch, &reference)?);
        pairs.extend(batch);
        iterations.push(t);
    }
    if pairs.is_empty() {
        return Err(Error::MissingArtifact(run_dir.join("iter_1/pairs.jsonl")));
    }

    // candidates alternate between each iteration's data policy and the control
    let control = control_policy(&m)?;
    let key = StreamKey::new(m.seed, Purpose::Control);
    let mut cross = Vec::new();
    let mut cross_stats = Vec::new();
    let mut offset = 0;
    for &t in &iterations {
        let reference = load_checkpoint(&run_dir.join(format!("iter_{}/policy.ckpt", t - 1)))?;
        let n = pairs[offset..]
            .iter()
            .take_while(|p| p.iteration == t)
            .count();
        let batch = cross_policy_pairs(
            &m.domain,
            &pairs[offset..offset + n],
            &[&reference, &control],
            m.plan.candidates,
            &m.sampler,
            &m.judge,
            key,
        )?;
        cross_stats.extend(pair_stats(&batch, &reference)?);
        cross.extend(batch);
        offset += n;
    }

    fs::create_dir_all(out)?;
    let mut length = length_logprob_from_stats(&stats)?;
    let mut sref = sref_lengthdiff_from_stats(&stats)?;
    length
        .correlation
        .write_scatter(&out.join("length_logprob.csv"))?;
    sref.write_scatter(&out.join("sref_lengthdiff.csv"))?;
    let similarity = vec![
        similarity_row("self", &pairs, &stats)?,
        similarity_row("cross_policy", &cross, &cross_stats)?,
    ];
    write_csv(&out.join("similarity.csv"), &similarity)?;
    write_csv(
        &out.join("reward_trend.csv"),
        &reward_trend(&run_dir.join("metrics.csv"))?,
    )?;

    let report = AnalysisReport {
        iterations,
        finding: compare_correlations(&sref, &length.correlation),
        groups: length.groups,
        length_logprob: length.correlation,
        sref_lengthdiff: sref,
        similarity,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out.join("analysis.json"), json)?;
    Ok(report)
}

/// Score and length per iteration for each run, written as `comparison.csv`.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<ComparisonRow>> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidInput(
            "report needs at least one run directory".into(),
        ));
    }
    let mut runs: Vec<(String, RunSummary)> = Vec::new();
    for dir in run_dirs {
        let s = RunSummary::load(&dir.join("summary.json"))?;
        let mut name = s.objective.clone();
        if runs.iter().any(|(n, _)| *n == name) {
            name = format!("{name}@{}", dir.display());
        }
        runs.push((name, s));
    }
    let rows = comparison_table(&runs);
    fs::create_dir_all(out)?;
    write_csv(&out.join("comparison.csv"), &rows)?;
    Ok(rows)
}
