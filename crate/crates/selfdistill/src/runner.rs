//! Experiment runner: versioned JSON configs, immutable run directories
//! with metric streams and checkpoints, sweep execution over config axes,
//! report emission, and the built-in verification suite.
//!
//! A run directory is assembled in a temp directory and renamed into place
//! on success, so completed directories are immutable and half-written ones
//! are marked unhealthy.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_split_pair, populate_negatives, Corruption, TaskDataset, TaskKind};
use crate::evalkit::{evaluate, paired_compare, EvalReport, PromptProfile};
use crate::model::ArchConfig;
use crate::objectives::{jsd_upper_bound, oracle_divergence, token_divergence, DivergenceKind};
use crate::params::{fnv1a, load_checkpoint, save_checkpoint, PolicyParameters};
use crate::policy::init_policy;
use crate::scalar::Scalar;
use crate::trainer::{run_training, stream_seed, StepStats, TrainerConfig};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const RUN_ROOT_ENV: &str = "SELFDISTILL_RUN_ROOT";
pub const DEFAULT_SWEEP_CAP: usize = 200;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default = "defaults::train_n")]
    pub train_n: usize,
    #[serde(default = "defaults::eval_n")]
    pub eval_n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::corruption")]
    pub corruption: Corruption,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "defaults::version")]
    pub version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub task: TaskConfig,
    pub trainer: TrainerConfig,
    /// Evaluate (and checkpoint) every this many steps; 0 picks a quarter
    /// of the budget. The initial and final states are always evaluated.
    #[serde(default)]
    pub eval_every: usize,
}

mod defaults {
    use super::*;
    pub fn version() -> u32 {
        CONFIG_VERSION
    }
    pub fn train_n() -> usize {
        512
    }
    pub fn eval_n() -> usize {
        64
    }
    pub fn corruption() -> Corruption {
        Corruption::AnswerPerturb
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Mode flags applied and the cadence made explicit.
    pub fn resolve(&self) -> ExperimentConfig {
        let mut out = self.clone();
        out.trainer = self.trainer.resolve();
        if out.eval_every == 0 {
            out.eval_every = (out.trainer.steps / 4).max(1);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.task.train_n == 0 || self.task.eval_n == 0 {
            return Err(Error::Config("task.train_n and task.eval_n must be >= 1".into()));
        }
        // steps = 0 is allowed at the experiment level: evaluate-only run
        if self.trainer.steps > 0 {
            self.trainer.validate()?;
        } else {
            self.trainer.arch.validate()?;
            self.trainer.distill.validate()?;
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.resolve()).expect("config serializes");
        format!("{:016x}", fnv1a(&bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Ok,
    Unhealthy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointPaths {
    pub student: String,
    pub ema_teacher: Option<String>,
    pub base_snapshot: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed_table: BTreeMap<String, u64>,
    /// Which parameter set served the primary teacher and the auxiliary
    /// views ("ema" or "snapshot").
    pub aux_teacher: String,
    /// The disagreement-to-weight mapping in force.
    pub weight_mapping: String,
    pub base_snapshot_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub metrics_path: String,
    pub checkpoints: CheckpointPaths,
    pub eval_reports: Vec<EvalPoint>,
    pub health: Health,
    pub provenance: Provenance,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<RunRecord> {
        let text = std::fs::read_to_string(run_dir.join("run.json"))
            .map_err(|e| Error::Config(format!("{}: {e}", run_dir.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn final_report(&self) -> Option<&EvalReport> {
        self.eval_reports.last().map(|p| &p.report)
    }
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    step: usize,
    total: f64,
    distill: f64,
    contrastive: f64,
    feature: f64,
    mean_weight: f64,
    clip_fraction: f64,
    mean_rollout_len: f64,
    skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    skip_reason: &'a Option<String>,
}

fn metrics_line(step: usize, stats: &StepStats) -> String {
    serde_json::to_string(&MetricsLine {
        step,
        total: stats.breakdown.total,
        distill: stats.breakdown.distill,
        contrastive: stats.breakdown.contrastive,
        feature: stats.breakdown.feature,
        mean_weight: stats.mean_weight,
        clip_fraction: stats.clip_fraction,
        mean_rollout_len: stats.mean_rollout_len,
        skipped: stats.skipped,
        skip_reason: &stats.skip_reason,
    })
    .expect("metrics line serializes")
}

/// Builds the train/eval datasets for an experiment, negatives included.
pub fn build_datasets(config: &ExperimentConfig) -> Result<(TaskDataset, TaskDataset)> {
    let (mut train, eval) = generate_split_pair(
        config.task.kind,
        config.task.train_n,
        config.task.eval_n,
        config.task.seed,
    )?;
    populate_negatives(&mut train, config.task.corruption, stream_seed(config.task.seed, "neg"))?;
    Ok((train, eval))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Runs one experiment end to end: data generation, training with a metric
/// stream, cadence evaluation, checkpoints, and an atomically renamed run
/// directory.
pub fn run_experiment_config(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(RunRecord, PathBuf)> {
    let config = config.resolve();
    config.validate()?;
    let config_hash = config.config_hash();
    let run_id = format!("{}-{}", unix_now(), config_hash);
    let tmp_dir = out_dir.join(format!(".tmp-{run_id}"));
    std::fs::create_dir_all(&tmp_dir)?;

    let result = run_in_dir(&config, &config_hash, &run_id, &tmp_dir);
    let record = match result {
        Ok(record) => record,
        Err(e) => {
            // mark the partial directory unhealthy and surface the error
            let marker = serde_json::json!({
                "run_id": run_id,
                "health": "unhealthy",
                "error": e.to_string(),
            });
            std::fs::write(tmp_dir.join("run.json"), serde_json::to_vec_pretty(&marker)?)?;
            let final_dir = out_dir.join(&run_id);
            let _ = std::fs::rename(&tmp_dir, &final_dir);
            return Err(e);
        }
    };
    let final_dir = out_dir.join(&run_id);
    std::fs::rename(&tmp_dir, &final_dir)?;
    Ok((record, final_dir))
}

pub fn run_experiment(config_path: &Path, out_dir: &Path) -> Result<(RunRecord, PathBuf)> {
    let config = ExperimentConfig::from_path(config_path)?;
    run_experiment_config(&config, out_dir)
}

fn run_in_dir(
    config: &ExperimentConfig,
    config_hash: &str,
    run_id: &str,
    dir: &Path,
) -> Result<RunRecord> {
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(config)?)?;
    let (train, eval) = build_datasets(config)?;
    std::fs::write(dir.join("train.jsonl"), train.to_jsonl())?;
    std::fs::write(dir.join("eval.jsonl"), eval.to_jsonl())?;

    let trainer_cfg = &config.trainer;
    let temperature = trainer_cfg.temperature;
    let max_completion = trainer_cfg.max_completion;
    let eval_seed = stream_seed(trainer_cfg.seed, "eval");

    let mut metrics = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
    let mut eval_reports: Vec<EvalPoint> = Vec::new();
    let final_profiles: Vec<PromptProfile>;
    let eval_every = config.eval_every.max(1);

    // evaluate-only runs keep the initialized student
    if trainer_cfg.steps == 0 {
        let student =
            init_policy::<f32>(&trainer_cfg.arch, stream_seed(trainer_cfg.seed, "init"))?;
        let base = student.clone();
        let (report, profiles) =
            evaluate(&student, &base, &eval, temperature, max_completion, eval_seed)?;
        eval_reports.push(EvalPoint { step: 0, report });
        final_profiles = profiles;
        metrics.flush()?;
        return finish_run(
            dir,
            config,
            config_hash,
            run_id,
            &student,
            None,
            &base,
            eval_reports,
            final_profiles,
            Health::Ok,
        );
    }

    // initial evaluation: the initialization is its own frozen base
    {
        let student =
            init_policy::<f32>(&trainer_cfg.arch, stream_seed(trainer_cfg.seed, "init"))?;
        let (report, _) =
            evaluate(&student, &student, &eval, temperature, max_completion, eval_seed)?;
        eval_reports.push(EvalPoint { step: 0, report });
    }

    let steps = trainer_cfg.steps;
    let mut mid_eval: Vec<EvalPoint> = Vec::new();
    let run = run_training::<f32, _>(trainer_cfg, &train, |step, stats, state| {
        metrics.write_all(metrics_line(step, stats).as_bytes())?;
        metrics.write_all(b"\n")?;
        let done = step + 1;
        if done % eval_every == 0 && done != steps {
            let (report, _) = evaluate(
                &state.student,
                &state.base_snapshot,
                &eval,
                temperature,
                max_completion,
                eval_seed,
            )?;
            mid_eval.push(EvalPoint { step: done, report });
            save_checkpoint(&dir.join("student-latest.ckpt"), &state.student)?;
        }
        Ok(())
    })?;
    metrics.flush()?;
    eval_reports.extend(mid_eval);

    let state = &run.state;
    let (final_report, profiles) = evaluate(
        &state.student,
        &state.base_snapshot,
        &eval,
        temperature,
        max_completion,
        eval_seed,
    )?;
    eval_reports.push(EvalPoint { step: steps, report: final_report });
    final_profiles = profiles;

    finish_run(
        dir,
        config,
        config_hash,
        run_id,
        &state.student,
        state.ema_teacher.as_ref(),
        &state.base_snapshot,
        eval_reports,
        final_profiles,
        if run.healthy { Health::Ok } else { Health::Unhealthy },
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    dir: &Path,
    config: &ExperimentConfig,
    config_hash: &str,
    run_id: &str,
    student: &PolicyParameters<f32>,
    ema: Option<&PolicyParameters<f32>>,
    base: &PolicyParameters<f32>,
    eval_reports: Vec<EvalPoint>,
    final_profiles: Vec<PromptProfile>,
    health: Health,
) -> Result<RunRecord> {
    save_checkpoint(&dir.join("student.ckpt"), student)?;
    save_checkpoint(&dir.join("base.ckpt"), base)?;
    let ema_path = match ema {
        Some(p) => {
            save_checkpoint(&dir.join("ema.ckpt"), p)?;
            Some("ema.ckpt".to_string())
        }
        None => None,
    };
    std::fs::write(dir.join("profiles.json"), serde_json::to_vec_pretty(&final_profiles)?)?;

    let seed_table: BTreeMap<String, u64> = ["init", "rollout", "data", "contexts", "eval"]
        .iter()
        .map(|name| (name.to_string(), stream_seed(config.trainer.seed, name)))
        .collect();
    let record = RunRecord {
        run_id: run_id.to_string(),
        config: config.clone(),
        config_hash: config_hash.to_string(),
        metrics_path: "metrics.jsonl".to_string(),
        checkpoints: CheckpointPaths {
            student: "student.ckpt".to_string(),
            ema_teacher: ema_path,
            base_snapshot: "base.ckpt".to_string(),
        },
        eval_reports,
        health,
        provenance: Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed_table,
            aux_teacher: if config.trainer.distill.use_ema {
                "ema".to_string()
            } else {
                "snapshot".to_string()
            },
            weight_mapping: "w = exp(-agree_gamma * delta)".to_string(),
            base_snapshot_hash: format!("{:016x}", base.content_hash()),
        },
    };
    std::fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&record)?)?;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    /// Dot-separated config paths (e.g. "trainer.distill.agreement.k") to
    /// lists of values; the Cartesian product is executed.
    pub axes: BTreeMap<String, Vec<serde_json::Value>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_cap() -> usize {
    DEFAULT_SWEEP_CAP
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub cell: usize,
    pub assignments: BTreeMap<String, serde_json::Value>,
    pub seed: u64,
    pub config_hash: String,
    pub run_id: Option<String>,
    pub status: String,
}

fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("config path {path} crosses a non-object")))?;
        if i == parts.len() - 1 {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!(
                    "config key {path} does not exist in the schema"
                )));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("config key {path} does not exist")))?;
    }
    Ok(())
}

/// Materializes one sweep cell into a typed config.
pub fn apply_assignments(
    base: &ExperimentConfig,
    assignments: &BTreeMap<String, serde_json::Value>,
    seed: u64,
) -> Result<ExperimentConfig> {
    // serialize the resolved config so every optional field is present and
    // addressable by axis paths
    let mut value = serde_json::to_value(base.resolve())?;
    for (path, v) in assignments {
        set_path(&mut value, path, v.clone())?;
    }
    set_path(&mut value, "trainer.seed", serde_json::json!(seed))?;
    let cfg: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("sweep cell does not parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn sweep_cells(spec: &SweepSpec) -> Result<Vec<(BTreeMap<String, serde_json::Value>, u64)>> {
    let mut combos: Vec<BTreeMap<String, serde_json::Value>> = vec![BTreeMap::new()];
    for (key, values) in &spec.axes {
        if values.is_empty() {
            return Err(Error::Config(format!("sweep axis {key} has no values")));
        }
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for combo in &combos {
            for v in values {
                let mut c = combo.clone();
                c.insert(key.clone(), v.clone());
                next.push(c);
            }
        }
        combos = next;
    }
    let total = combos.len() * spec.seeds.len();
    if total > spec.cap {
        return Err(Error::Config(format!(
            "sweep of {total} cells exceeds cap {}",
            spec.cap
        )));
    }
    let mut cells = Vec::with_capacity(total);
    for combo in combos {
        for &seed in &spec.seeds {
            cells.push((combo.clone(), seed));
        }
    }
    Ok(cells)
}

/// Executes the grid sequentially, resuming over an existing index: cells
/// whose config hash already completed are not re-run, and one failed cell
/// does not abort the rest.
pub fn run_sweep(spec_path: &Path, out_dir: &Path) -> Result<Vec<SweepCell>> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec: SweepSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("sweep spec: {e}")))?;
    spec.base.validate()?;
    // validate axis keys against the schema before running anything
    for path in spec.axes.keys() {
        let mut probe = serde_json::to_value(spec.base.resolve())?;
        set_path(&mut probe, path, serde_json::Value::Null)?;
    }
    let cells = sweep_cells(&spec)?;
    std::fs::create_dir_all(out_dir)?;

    let index_path = out_dir.join("sweep_index.json");
    let existing: Vec<SweepCell> = if index_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&index_path)?)?
    } else {
        Vec::new()
    };

    let mut index = Vec::with_capacity(cells.len());
    for (i, (assignments, seed)) in cells.iter().enumerate() {
        let config = match apply_assignments(&spec.base, assignments, *seed) {
            Ok(c) => c,
            Err(e) => {
                index.push(SweepCell {
                    cell: i,
                    assignments: assignments.clone(),
                    seed: *seed,
                    config_hash: String::new(),
                    run_id: None,
                    status: format!("config error: {e}"),
                });
                write_index(&index_path, &index)?;
                continue;
            }
        };
        let hash = config.config_hash();
        if let Some(done) = existing.iter().find(|c| {
            c.config_hash == hash
                && c.status == "ok"
                && c.run_id
                    .as_ref()
                    .is_some_and(|id| out_dir.join(id).join("run.json").exists())
        }) {
            index.push(SweepCell { cell: i, ..done.clone() });
            write_index(&index_path, &index)?;
            continue;
        }
        let outcome = run_experiment_config(&config, out_dir);
        let (run_id, status) = match outcome {
            Ok((record, _)) => (Some(record.run_id), "ok".to_string()),
            Err(e) => (None, format!("failed: {e}")),
        };
        index.push(SweepCell {
            cell: i,
            assignments: assignments.clone(),
            seed: *seed,
            config_hash: hash,
            run_id,
            status,
        });
        write_index(&index_path, &index)?;
    }
    Ok(index)
}

fn write_index(path: &Path, index: &[SweepCell]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(index)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TableCsv,
    PlotdataJson,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "table_csv" => Ok(ReportFormat::TableCsv),
            "plotdata_json" => Ok(ReportFormat::PlotdataJson),
            other => Err(Error::Config(format!(
                "unknown report format {other}; expected table_csv or plotdata_json"
            ))),
        }
    }
}

struct LoadedRun {
    dir: PathBuf,
    record: RunRecord,
}

fn load_runs(run_dirs: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    run_dirs
        .iter()
        .map(|dir| {
            Ok(LoadedRun { dir: dir.clone(), record: RunRecord::load(dir)? })
        })
        .collect()
}

fn load_profiles(dir: &Path) -> Result<Vec<PromptProfile>> {
    let text = std::fs::read_to_string(dir.join("profiles.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Emits per-run final metrics as CSV or full plot series as JSON; pure
/// data, renderer-agnostic, and never mutating the run directories.
pub fn emit_report(run_dirs: &[PathBuf], format: ReportFormat, out_path: &Path) -> Result<()> {
    let runs = load_runs(run_dirs)?;
    if runs.is_empty() {
        return Err(Error::Config("no runs to report on".into()));
    }
    match format {
        ReportFormat::TableCsv => {
            let mut out = String::from(
                "run_id,name,mode,task,steps,seed,k,agree_gamma,strategy,granularity,health,accuracy,fit_ppl,retention_ppl,mean_token_jsd\n",
            );
            for run in &runs {
                let r = &run.record;
                let cfg = &r.config;
                let ag = &cfg.trainer.distill.agreement;
                let (acc, fit, ret, jsd) = match r.final_report() {
                    Some(er) => (er.accuracy, er.fit_ppl, er.retention_ppl, er.mean_token_jsd),
                    None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
                };
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{:?},{:?},{},{},{},{},{}\n",
                    r.run_id,
                    cfg.name.clone().unwrap_or_default(),
                    cfg.trainer.mode.as_str(),
                    cfg.task.kind.as_str(),
                    cfg.trainer.steps,
                    cfg.trainer.seed,
                    ag.k,
                    ag.agree_gamma,
                    ag.strategy,
                    ag.granularity,
                    match r.health {
                        Health::Ok => "ok",
                        Health::Unhealthy => "unhealthy",
                    },
                    acc,
                    fit,
                    ret,
                    jsd
                ));
            }
            std::fs::write(out_path, out)?;
        }
        ReportFormat::PlotdataJson => {
            let mut run_entries = Vec::new();
            for run in &runs {
                let r = &run.record;
                let metrics_text =
                    std::fs::read_to_string(run.dir.join(&r.metrics_path)).unwrap_or_default();
                let mut loss_steps = Vec::new();
                let mut loss_total = Vec::new();
                for line in metrics_text.lines() {
                    if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
                        loss_steps.push(v["step"].as_u64().unwrap_or(0));
                        loss_total.push(v["total"].as_f64().unwrap_or(f64::NAN));
                    }
                }
                let ag = &r.config.trainer.distill.agreement;
                run_entries.push(serde_json::json!({
                    "run_id": r.run_id,
                    "name": r.config.name,
                    "mode": r.config.trainer.mode.as_str(),
                    "task": r.config.task.kind.as_str(),
                    "seed": r.config.trainer.seed,
                    "k": ag.k,
                    "agree_gamma": ag.agree_gamma,
                    "strategy": ag.strategy,
                    "granularity": ag.granularity,
                    "health": match r.health { Health::Ok => "ok", Health::Unhealthy => "unhealthy" },
                    "eval_steps": r.eval_reports.iter().map(|p| p.step).collect::<Vec<_>>(),
                    "accuracy": r.eval_reports.iter().map(|p| p.report.accuracy).collect::<Vec<_>>(),
                    "fit_ppl": r.eval_reports.iter().map(|p| p.report.fit_ppl).collect::<Vec<_>>(),
                    "retention_ppl": r.eval_reports.iter().map(|p| p.report.retention_ppl).collect::<Vec<_>>(),
                    "mean_token_jsd": r.eval_reports.iter().map(|p| p.report.mean_token_jsd).collect::<Vec<_>>(),
                    "jsd_histogram": r.final_report().map(|er| er.jsd_histogram.clone()),
                    "loss_curve": { "steps": loss_steps, "total": loss_total },
                }));
            }
            // paired comparisons of every run against the first
            let mut paired = Vec::new();
            let first = &runs[0];
            let first_profiles = load_profiles(&first.dir)?;
            for run in &runs {
                let profiles = load_profiles(&run.dir)?;
                let a_jsd: Vec<f64> = profiles.iter().map(|p| p.mean_jsd).collect();
                let b_jsd: Vec<f64> = first_profiles.iter().map(|p| p.mean_jsd).collect();
                let a_lp: Vec<f64> = profiles.iter().map(|p| p.mean_base_lp).collect();
                let b_lp: Vec<f64> = first_profiles.iter().map(|p| p.mean_base_lp).collect();
                match paired_compare(&a_jsd, &b_jsd, &a_lp, &b_lp) {
                    Ok(cmp) => paired.push(serde_json::json!({
                        "run_id": run.record.run_id,
                        "baseline": first.record.run_id,
                        "comparison": cmp,
                    })),
                    Err(e) => paired.push(serde_json::json!({
                        "run_id": run.record.run_id,
                        "baseline": first.record.run_id,
                        "error": e.to_string(),
                    })),
                }
            }
            let doc = serde_json::json!({ "runs": run_entries, "paired": paired });
            std::fs::write(out_path, serde_json::to_vec_pretty(&doc)?)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Verification suite (the `verify` subcommand)
// ---------------------------------------------------------------------------

pub struct VerifyItem {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Central finite differences of a scalar-valued function of the parameter
/// vector.
pub fn finite_difference_grad<T: Scalar>(
    params: &PolicyParameters<T>,
    f: &mut dyn FnMut(&PolicyParameters<T>) -> f64,
    eps: f64,
) -> Vec<f64> {
    let mut work = params.clone();
    let mut grad = vec![0.0f64; params.values.len()];
    for i in 0..params.values.len() {
        let orig = work.values[i];
        work.values[i] = orig + T::from_f64(eps);
        let plus = f(&work);
        work.values[i] = orig - T::from_f64(eps);
        let minus = f(&work);
        work.values[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn gradient_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-300)
}

fn random_simplex(rng: &mut rand_chacha::ChaCha8Rng, v: usize) -> Vec<f64> {
    use rand::Rng;
    let mut p: Vec<f64> = (0..v).map(|_| -(rng.random::<f64>().max(1e-12)).ln()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    p
}

/// Quick self-checks: oracle equivalence, divergence invariants, and a
/// finite-difference gradient check on a small model.
pub fn run_verification() -> Vec<VerifyItem> {
    use rand::SeedableRng;
    let mut items = Vec::new();

    // oracle equivalence on 1000 simplex pairs per kind and alpha
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12345);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let s = random_simplex(&mut rng, 8);
        let t = random_simplex(&mut rng, 8);
        for kind in [
            DivergenceKind::ForwardKl,
            DivergenceKind::ReverseKl,
            DivergenceKind::WeightedJsd,
        ] {
            for alpha in [0.1, 0.5, 0.9] {
                let fast: f64 = token_divergence(&s, &t, kind, alpha).unwrap();
                let oracle = oracle_divergence(&s, &t, kind, alpha).unwrap();
                worst = worst.max((fast - oracle).abs());
            }
        }
    }
    items.push(VerifyItem {
        name: "oracle_equivalence",
        passed: worst < 1e-10,
        detail: format!("max |fast - oracle| = {worst:.3e}"),
    });

    // divergence invariants
    let mut ok = true;
    let mut detail = String::new();
    for _ in 0..1000 {
        let s = random_simplex(&mut rng, 8);
        let t = random_simplex(&mut rng, 8);
        for alpha in [0.1, 0.5, 0.9] {
            let d: f64 = token_divergence(&s, &t, DivergenceKind::WeightedJsd, alpha).unwrap();
            if d < 0.0 || d > jsd_upper_bound(alpha) + 1e-12 {
                ok = false;
                detail = format!("JSD bound violated: {d} at alpha {alpha}");
            }
        }
    }
    items.push(VerifyItem {
        name: "divergence_invariants",
        passed: ok,
        detail: if detail.is_empty() { "bounds hold".into() } else { detail },
    });

    // finite-difference gradient check through the model
    let arch = ArchConfig { vocab: 12, hidden: 8, layers: 1, heads: 2, window: 24, mlp_ratio: 2 };
    let student = init_policy::<f64>(&arch, 3).unwrap();
    let teacher = init_policy::<f64>(&arch, 4).unwrap();
    let traj = crate::policy::Trajectory::forced(
        vec![crate::tokens::BOS, 5, 6, crate::tokens::SEP],
        vec![7, 8, crate::tokens::EOS],
    );
    let teacher_trace = crate::policy::score_distributions(&teacher, &[], &traj).unwrap();
    let teacher_logp = teacher_trace.logprobs.clone();
    let build = |pt: &mut crate::autodiff::ParamTape<'_, f64>| {
        let (tokens, start) = crate::policy::compose_sequence(&[], &traj, arch.window)?;
        let t = traj.len();
        let (lp, _) = crate::model::build_scoring_graph(pt, &tokens, start - 1..start - 1 + t)?;
        let div = pt.tape.divergence_rows(lp, &teacher_logp, DivergenceKind::WeightedJsd, 0.5);
        let clipped = pt.tape.clip_rows(div, 0.4);
        let coeff = vec![1.0 / t as f64; t];
        Ok(pt.tape.dot_const(clipped, &coeff))
    };
    let (_, analytic) = crate::policy::grad_loss(&student, build).unwrap();
    let mut f =
        |p: &PolicyParameters<f64>| crate::policy::grad_loss(p, build).map(|(l, _)| l).unwrap();
    let numeric = finite_difference_grad(&student, &mut f, 1e-5);
    let rel = gradient_relative_error(&analytic, &numeric);
    items.push(VerifyItem {
        name: "gradient_check",
        passed: rel <= 1e-4,
        detail: format!("relative error {rel:.3e} over {} params", analytic.len()),
    });

    items
}

/// Loads a checkpoint and evaluates it on the experiment's eval split,
/// reconstructing the frozen base from the config seeds.
pub fn eval_checkpoint(
    config: &ExperimentConfig,
    checkpoint: &Path,
) -> Result<(EvalReport, Vec<PromptProfile>)> {
    let config = config.resolve();
    let student: PolicyParameters<f32> = load_checkpoint(checkpoint)?;
    let base = init_policy::<f32>(
        &config.trainer.arch,
        stream_seed(config.trainer.seed, "init"),
    )?;
    let (_, eval) = build_datasets(&config)?;
    evaluate(
        &student,
        &base,
        &eval,
        config.trainer.temperature,
        config.trainer.max_completion,
        stream_seed(config.trainer.seed, "eval"),
    )
}
