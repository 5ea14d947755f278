//! Command implementations behind the CLI: training with metrics and
//! checkpoints, evaluation reports, continual runs, and analysis exports.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::taskgen::{self, FamilyKind};
use crate::trainer::{EvalReport, IterationMetrics, TrainState, STREAM_EVAL};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Continual-training variant: dynamic expansion or a fixed bottom size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Dynamic,
    Static(usize),
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "dynamic" {
            return Ok(Variant::Dynamic);
        }
        if let Some(k) = s.strip_prefix("static-") {
            let k: usize = k.parse().map_err(|_| {
                Error::InvalidConfig(vec![format!("variant: bad cluster count in '{s}'")])
            })?;
            if k == 0 {
                return Err(Error::InvalidConfig(vec![
                    "variant: static cluster count must be positive".into(),
                ]));
            }
            return Ok(Variant::Static(k));
        }
        Err(Error::InvalidConfig(vec![format!(
            "variant: expected 'dynamic' or 'static-K', got '{s}'"
        )]))
    }
}

/// An output directory claimed for one command; the lock file is removed on
/// drop so concurrent writers fail fast instead of interleaving.
pub struct OutputDir {
    path: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    pub fn claim(path: &Path) -> Result<OutputDir> {
        fs::create_dir_all(path)?;
        let lock = path.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(OutputDir {
                path: path.to_path_buf(),
                lock,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::OutputLocked(path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

fn append_line(file: &mut fs::File, line: &str) -> Result<()> {
    file.write_all(line.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

fn open_metrics(path: &Path, header: &str) -> Result<fs::File> {
    let new = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        append_line(&mut f, header)?;
    }
    Ok(f)
}

fn metrics_row(m: &IterationMetrics) -> String {
    format!(
        "{},{},{},{}",
        m.iteration, m.mean_query_loss, m.mean_recon_loss, m.cluster_count
    )
}

/// Trains for the configured number of iterations (optionally resuming from
/// a checkpoint), streaming metrics and writing periodic plus final
/// checkpoints. Returns the final checkpoint path.
pub fn cmd_train(cfg: RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let out = OutputDir::claim(Path::new(&cfg.run.out))?;

    // On resume the checkpoint's model/task/train sections are
    // authoritative; the current invocation controls the run section.
    let (effective, mut state) = match resume {
        None => {
            let state = TrainState::new(cfg.trainer_config());
            (cfg, state)
        }
        Some(path) => {
            let (mut ck_cfg, state) = checkpoint::load(path)?;
            ck_cfg.run = cfg.run.clone();
            (ck_cfg, state)
        }
    };
    fs::write(out.join("effective.toml"), effective.to_toml()?)?;

    let mut metrics = open_metrics(
        &out.join("metrics.csv"),
        "iteration,mean_query_loss,mean_recon_loss,cluster_count",
    )?;
    let families = effective.task.families.clone();
    let total = effective.run.iterations;
    while state.iteration < total {
        let m = match state.train_iteration(&families) {
            Ok(m) => m,
            Err(e) => {
                // Keep the last good state and a report of what failed.
                let ck = out.join("ckpt_error.hsml");
                checkpoint::save(&ck, &effective, &state)?;
                fs::write(
                    out.join("error_report.txt"),
                    format!("iteration {}: {e}\n", state.iteration),
                )?;
                return Err(e);
            }
        };
        append_line(&mut metrics, &metrics_row(&m))?;
        if effective.run.checkpoint_every > 0 && m.iteration % effective.run.checkpoint_every == 0 {
            checkpoint::save(
                &out.join(&format!("ckpt_{:06}.hsml", m.iteration)),
                &effective,
                &state,
            )?;
        }
        if effective.run.eval_every > 0 && m.iteration % effective.run.eval_every == 0 {
            let report = state.evaluate(
                &families,
                effective.run.eval_tasks,
                effective.task.shots,
                effective.run.seed ^ m.iteration,
            )?;
            let mut f = open_metrics(
                &out.join("eval_history.csv"),
                "iteration,shots,mean_mse,ci95",
            )?;
            append_line(
                &mut f,
                &format!(
                    "{},{},{},{}",
                    m.iteration,
                    effective.task.shots,
                    report.overall.mean_mse,
                    report.overall.ci95.map(|c| c.to_string()).unwrap_or_default()
                ),
            )?;
        }
    }
    let final_path = out.join("ckpt_final.hsml");
    checkpoint::save(&final_path, &effective, &state)?;
    Ok(final_path)
}

fn write_family_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = String::from("family,n,mean_mse,ci95\n");
    let mut rows = vec![&report.overall];
    rows.extend(report.per_family.iter());
    for s in rows {
        let ci = s.ci95.map(|c| c.to_string()).unwrap_or_default();
        writeln!(text, "{},{},{},{}", s.family, s.n, s.mean_mse, ci).expect("string write");
    }
    fs::write(path, text)?;
    Ok(())
}

/// Evaluates a checkpoint over freshly sampled tasks and writes
/// `eval.json` plus `families.csv`.
pub fn cmd_eval(
    ckpt: &Path,
    shots: usize,
    n_tasks: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<EvalReport> {
    let (cfg, state) = checkpoint::load(ckpt)?;
    let out = OutputDir::claim(out_dir)?;
    let report = state.evaluate(&cfg.task.families, n_tasks, shots, seed)?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    write_family_csv(&out.join("families.csv"), &report)?;
    Ok(report)
}

/// Halving chain from a bottom size down to one, e.g. 4 -> [4, 2, 1].
fn halving_hierarchy(bottom: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut k = bottom;
    while k > 1 {
        sizes.push(k);
        k = k.div_ceil(2);
    }
    sizes.push(1);
    sizes
}

/// Continual training over the configured schedule. The dynamic variant
/// expands the bottom clustering level whenever the loss-window criterion
/// fires; static-K fixes the bottom level at K with expansion disabled.
/// Writes the training curve and a final evaluation.
pub fn cmd_continual(cfg: RunConfig, variant: Variant) -> Result<(PathBuf, EvalReport)> {
    cfg.validate()?;
    let schedule = cfg.stream_schedule()?;
    if schedule.stages.is_empty() {
        return Err(Error::InvalidConfig(vec![
            "continual training needs at least one [[schedule]] stage".into(),
        ]));
    }
    let out = OutputDir::claim(Path::new(&cfg.run.out))?;

    let mut effective = cfg.clone();
    match variant {
        Variant::Dynamic => effective.train.expansion_enabled = true,
        Variant::Static(k) => {
            effective.train.expansion_enabled = false;
            effective.model.hierarchy = halving_hierarchy(k);
        }
    }
    effective.validate()?;
    fs::write(out.join("effective.toml"), effective.to_toml()?)?;

    let mut state = TrainState::new(effective.trainer_config());
    let mut metrics = open_metrics(
        &out.join("metrics.csv"),
        "iteration,mean_query_loss,mean_recon_loss,cluster_count",
    )?;
    let mut curve = open_metrics(
        &out.join("curve.csv"),
        "iteration,window_avg_loss,cluster_count,expanded",
    )?;
    let total = effective.run.iterations;
    let mut io_err: Option<Error> = None;
    state.continual_train(&schedule, total, |m| {
        if io_err.is_some() {
            return;
        }
        if let Err(e) = append_line(&mut metrics, &metrics_row(m)) {
            io_err = Some(e);
            return;
        }
        if let Some((avg, _)) = m.window {
            let row = format!(
                "{},{},{},{}",
                m.iteration, avg, m.cluster_count, m.expanded as u8
            );
            if let Err(e) = append_line(&mut curve, &row) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }

    let final_path = out.join("ckpt_final.hsml");
    checkpoint::save(&final_path, &effective, &state)?;
    let families = schedule.active_families(total.saturating_sub(1));
    let report = state.evaluate(
        &families,
        effective.run.eval_tasks,
        effective.task.shots,
        effective.run.seed,
    )?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    write_family_csv(&out.join("families.csv"), &report)?;
    Ok((final_path, report))
}

#[derive(Serialize, Deserialize)]
pub struct CurveEntry {
    pub task_id: usize,
    pub family: String,
    pub support: Vec<(f64, f64)>,
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
    pub mse: f64,
}

/// Exports per-task analysis data from a checkpoint: bottom-level assignment
/// vectors (heatmap source), gated initializations (embedding source), and
/// adapted fits on a dense grid (curve source). Families are assigned
/// round-robin so each appears n_tasks / n_families times.
pub fn cmd_export_analysis(
    ckpt: &Path,
    n_tasks: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    let (cfg, state) = checkpoint::load(ckpt)?;
    let out = OutputDir::claim(out_dir)?;
    let families = &cfg.task.families;
    let mut rng = Rng::derive(seed, STREAM_EVAL);
    let grid: Vec<f64> = (0..101).map(|i| -5.0 + 0.1 * i as f64).collect();

    let k_bottom = state.structure.bottom_size();
    let mut assignments = String::from("task_id,family");
    for k in 0..k_bottom {
        write!(assignments, ",p{k}").expect("string write");
    }
    assignments.push('\n');
    let mut gated = String::from("task_id,family");
    for i in 0..state.cfg.arch.param_len() {
        write!(gated, ",v{i}").expect("string write");
    }
    gated.push('\n');

    let mut curves = Vec::with_capacity(n_tasks);
    for task_id in 0..n_tasks {
        let family = families[task_id % families.len()];
        let task = taskgen::sample_task(&mut rng, &[family], cfg.task.shots, cfg.task.query_size)?;
        let outp = state.eval_task(&task, &mut rng, Some(&grid))?;
        let (gated_init, pred) = outp.extras.expect("grid requested");

        write!(assignments, "{task_id},{}", outp.family).expect("string write");
        for p in &outp.assignment {
            write!(assignments, ",{p}").expect("string write");
        }
        assignments.push('\n');

        write!(gated, "{task_id},{}", outp.family).expect("string write");
        for v in &gated_init {
            write!(gated, ",{v}").expect("string write");
        }
        gated.push('\n');

        curves.push(CurveEntry {
            task_id,
            family: outp.family,
            support: task.support.clone(),
            truth: grid.iter().map(|x| task.family.evaluate(*x)).collect(),
            grid: grid.clone(),
            pred,
            mse: outp.mse,
        });
    }
    fs::write(out.join("assignments.csv"), assignments)?;
    fs::write(out.join("gated_init.csv"), gated)?;
    let curves_path = out.join("curves.json");
    fs::write(&curves_path, serde_json::to_string(&curves)?)?;
    Ok(curves_path)
}

/// Mean pairwise cosine similarity gap between same-family and cross-family
/// assignment vectors (the clustering interpretability statistic).
pub fn assignment_similarity_gap(rows: &[(FamilyKind, Vec<f64>)]) -> (f64, f64) {
    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-300)
    }
    let (mut intra, mut intra_n) = (0.0, 0u64);
    let (mut inter, mut inter_n) = (0.0, 0u64);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let c = cosine(&rows[i].1, &rows[j].1);
            if rows[i].0 == rows[j].0 {
                intra += c;
                intra_n += 1;
            } else {
                inter += c;
                inter_n += 1;
            }
        }
    }
    (intra / intra_n.max(1) as f64, inter / inter_n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        assert_eq!(Variant::from_str("dynamic").unwrap(), Variant::Dynamic);
        assert_eq!(Variant::from_str("static-2").unwrap(), Variant::Static(2));
        assert_eq!(Variant::from_str("static-10").unwrap(), Variant::Static(10));
        assert!(Variant::from_str("static-0").is_err());
        assert!(Variant::from_str("frozen").is_err());
    }

    #[test]
    fn halving_chains() {
        assert_eq!(halving_hierarchy(1), vec![1]);
        assert_eq!(halving_hierarchy(2), vec![2, 1]);
        assert_eq!(halving_hierarchy(4), vec![4, 2, 1]);
        assert_eq!(halving_hierarchy(10), vec![10, 5, 3, 2, 1]);
    }

    #[test]
    fn output_dir_lock_excludes_second_claim() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out");
        let first = OutputDir::claim(&p).unwrap();
        assert!(matches!(
            OutputDir::claim(&p),
            Err(Error::OutputLocked(_))
        ));
        drop(first);
        OutputDir::claim(&p).unwrap();
    }

    #[test]
    fn similarity_gap_statistic() {
        use FamilyKind::*;
        let rows = vec![
            (Sinusoid, vec![1.0, 0.0]),
            (Sinusoid, vec![1.0, 0.0]),
            (Line, vec![0.0, 1.0]),
            (Line, vec![0.0, 1.0]),
        ];
        let (intra, inter) = assignment_similarity_gap(&rows);
        assert!((intra - 1.0).abs() < 1e-12);
        assert!(inter.abs() < 1e-12);
    }
}
