//! Experiment orchestration: teacher pre-training, multi-seed transfer runs,
//! sweeps and summary tables.

pub mod output;
pub mod trainer;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advising::IntrospectionConfig;
use crate::env::{RewardMode, TaskSpec, Variant};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::policy::{TeacherBundle, TeacherHeader, DEFAULT_HIDDEN};
use crate::ppo::PpoHyper;
use crate::transfer::{TransferKind, TransferMode};

pub use output::{aggregate_heatmap, read_advice, read_metrics, replay_issued_count, Heatmap, Layout, MetricsRow, RunManifest};
pub use trainer::{run_id, run_seed, RunSummary, TRAILING_EPISODES};

/// Below this final trailing return a sparse-reward teacher is flagged.
pub const TEACHER_WARN_RETURN: f64 = 0.5;
pub const TEACHER_DIR: &str = "teacher";
pub const SELECTION_FILE: &str = "selection.json";

/// A complete experiment description. Serialised as a flat JSON document;
/// missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: TaskSpec,
    pub target: TaskSpec,
    pub method: TransferKind,
    pub seeds: Vec<u64>,
    pub total_steps: u64,
    pub ppo: PpoHyper,
    pub iaa: IntrospectionConfig,
    /// Decay for `aa_decay` and for the distillation coefficient.
    pub decay: f64,
    pub distill_coeff: f64,
    pub shaping_scale: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: TaskSpec::new(Variant::Source, RewardMode::Sparse),
            target: TaskSpec::new(Variant::Target, RewardMode::Sparse),
            method: TransferKind::Iaa,
            seeds: (0..10).collect(),
            total_steps: round_steps(500_000, PpoHyper::default().batch_size),
            ppo: PpoHyper::default(),
            iaa: IntrospectionConfig::default(),
            decay: 0.99999,
            distill_coeff: 1.0,
            shaping_scale: 1.0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            activation: Activation::Tanh,
            checkpoint_every: 50_000,
            output_dir: PathBuf::from("runs"),
            teacher_checkpoint: None,
        }
    }
}

/// Smallest multiple of `batch` that is at least `steps`.
pub fn round_steps(steps: u64, batch: usize) -> u64 {
    let b = batch.max(1) as u64;
    steps.div_ceil(b) * b
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&raw)?)
    }

    pub fn mode(&self) -> TransferMode {
        TransferMode {
            kind: self.method,
            decay: self.decay,
            distill_coeff: self.distill_coeff,
            shaping_scale: self.shaping_scale,
            introspection: self.iaa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        if self.source.grid_side != self.target.grid_side {
            return Err(Error::config("target", "source and target grids must share a size"));
        }
        self.ppo.validate()?;
        self.mode().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        let batch = self.ppo.batch_size as u64;
        if self.total_steps == 0 || !self.total_steps.is_multiple_of(batch) {
            return Err(Error::config(
                "total_steps",
                format!("{} is not a positive multiple of the batch size {batch}", self.total_steps),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "needs at least one non-empty hidden layer"));
        }
        Ok(())
    }
}

/// Outcome of teacher pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSelection {
    pub teacher_dir: PathBuf,
    pub best_seed: u64,
    pub final_returns: Vec<(u64, Option<f64>)>,
    pub wall_seconds: Vec<(u64, f64)>,
    pub warning: Option<String>,
}

/// Index of the best score; `None` scores lose and ties go to the first.
pub fn select_best(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = *s {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i).or(if scores.is_empty() { None } else { Some(0) })
}

/// Train a PPO policy on the source task for every seed and keep the best
/// one as a frozen teacher under `output_dir/teacher`.
pub fn train_teacher(config: &ExperimentConfig) -> Result<TeacherSelection> {
    let mut cfg = config.clone();
    cfg.method = TransferKind::Baseline;
    cfg.validate()?;
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let dir = cfg.output_dir.join(format!("teacher-s{seed}"));
        let run = run_seed(&cfg, &cfg.source, seed, None, &dir)?;
        log::info!("teacher seed {seed}: trailing return {:?}", run.final_return());
        runs.push(run);
    }
    let scores: Vec<Option<f64>> = runs.iter().map(RunSummary::final_return).collect();
    let best = select_best(&scores).expect("at least one seed");
    let winner = &runs[best];
    let final_return = scores[best].unwrap_or(f64::NAN);
    let warning = (final_return.is_nan() || final_return < TEACHER_WARN_RETURN).then(|| {
        let msg = format!("best teacher return {final_return:.3} is below {TEACHER_WARN_RETURN}");
        log::warn!("{msg}");
        msg
    });

    let teacher_dir = cfg.output_dir.join(TEACHER_DIR);
    let bundle = TeacherBundle::new(winner.student.clone(), cfg.ppo.learning_rate);
    bundle.save(
        &teacher_dir,
        &TeacherHeader {
            source_task: cfg.source,
            training_seed: winner.seed,
            activation: cfg.activation,
            hidden: cfg.hidden.clone(),
            final_trailing_return: final_return,
        },
    )?;
    let selection = TeacherSelection {
        teacher_dir: teacher_dir.clone(),
        best_seed: winner.seed,
        final_returns: runs.iter().map(|r| (r.seed, r.final_return())).collect(),
        wall_seconds: runs.iter().map(|r| (r.seed, r.wall_seconds)).collect(),
        warning,
    };
    let path = teacher_dir.join(SELECTION_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&selection)?).map_err(|e| Error::io(&path, e))?;
    Ok(selection)
}

pub fn load_teacher(config: &ExperimentConfig) -> Result<Option<TeacherBundle>> {
    match (&config.teacher_checkpoint, config.method.needs_teacher()) {
        (_, false) => Ok(None),
        (None, true) => Err(Error::config(
            "teacher_checkpoint",
            format!("method {} needs a teacher", config.method.name()),
        )),
        (Some(p), true) => Ok(Some(TeacherBundle::load(p, config.ppo.learning_rate)?.0)),
    }
}

/// Train one student per seed on the target task.
pub fn run_transfer(config: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    config.validate()?;
    let teacher = load_teacher(config)?;
    config
        .seeds
        .iter()
        .map(|&seed| {
            let dir = config.output_dir.join(run_id(config.method, seed));
            run_seed(config, &config.target, seed, teacher.clone(), &dir)
        })
        .collect()
}

/// Trailing return of the last row at or before `step`; an error when the
/// run never got that far.
pub fn trailing_return_at(rows: &[MetricsRow], step: u64) -> Result<Option<f64>> {
    match rows.last() {
        Some(last) if last.global_step >= step => {}
        _ => return Err(Error::Usage(format!("run did not reach step {step}"))),
    }
    Ok(rows
        .iter()
        .take_while(|r| r.global_step <= step)
        .last()
        .and_then(|r| r.episode_return_mean))
}

/// Cross-seed mean of trailing returns at `step`. Seeds without a finished
/// episode count as zero return.
pub fn mean_return_at(runs: &[Vec<MetricsRow>], step: u64) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::Usage("no runs to average".into()));
    }
    let mut total = 0.0;
    for rows in runs {
        total += trailing_return_at(rows, step)?.unwrap_or(0.0);
    }
    Ok(total / runs.len() as f64)
}

/// Percentage change of `method` over `baseline`; undefined when the
/// baseline is zero.
pub fn relative_change(method: f64, baseline: f64) -> Option<f64> {
    (baseline.abs() >= 1e-9).then(|| 100.0 * (method - baseline) / baseline.abs())
}

pub fn relative_performance(method: &[Vec<MetricsRow>], baseline: &[Vec<MetricsRow>], at_step: u64) -> Result<Option<f64>> {
    Ok(relative_change(mean_return_at(method, at_step)?, mean_return_at(baseline, at_step)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    Decay,
    BurnIn,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "decay" => Ok(SweepAxis::Decay),
            "burn_in" => Ok(SweepAxis::BurnIn),
            other => Err(Error::config("axis", format!("unknown sweep axis {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Decay => "decay",
            SweepAxis::BurnIn => "burn_in",
        }
    }

    pub fn apply(self, config: &mut ExperimentConfig, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::config("values", format!("sweep value {value} is not finite")));
        }
        match self {
            SweepAxis::Epsilon => config.iaa.epsilon = value,
            SweepAxis::Decay => {
                config.iaa.decay = value;
                config.decay = value;
            }
            SweepAxis::BurnIn => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::config("burn_in", format!("{value} is not a step count")));
                }
                config.iaa.burn_in = value as u64;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub value: f64,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SweepRow {
    axis: String,
    value: f64,
    seed: u64,
    final_return: Option<f64>,
    advice_issued: u64,
}

/// One `run_transfer` per value, each under `output_dir/<axis>-<value>`,
/// plus a combined `sweep-<axis>.csv`.
pub fn sweep(config: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepEntry>> {
    let mut entries = Vec::with_capacity(values.len());
    let mut rows = Vec::new();
    for &value in values {
        let mut cfg = config.clone();
        axis.apply(&mut cfg, value)?;
        cfg.output_dir = config.output_dir.join(format!("{}-{value}", axis.name()));
        let runs = run_transfer(&cfg)?;
        for r in &runs {
            rows.push(SweepRow {
                axis: axis.name().into(),
                value,
                seed: r.seed,
                final_return: r.final_return(),
                advice_issued: r.advice_issued,
            });
        }
        entries.push(SweepEntry { value, runs });
    }
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    output::write_csv(
        &config.output_dir.join(format!("sweep-{}.csv", axis.name())),
        &["axis", "value", "seed", "final_return", "advice_issued"],
        &rows,
    )?;
    Ok(entries)
}

/// Per-method summary line of a results directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub method: String,
    pub seeds: usize,
    /// Cross-seed mean return at each requested step (absent if not reached).
    pub means: Vec<Option<f64>>,
    /// Change relative to `baseline` at each step.
    pub relative: Vec<Option<f64>>,
}

/// Group every `*/metrics.csv` under `dir` by method and tabulate.
pub fn report(dir: &Path, steps: &[u64]) -> Result<Vec<ReportLine>> {
    let mut groups: BTreeMap<String, Vec<Vec<MetricsRow>>> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path().join(output::METRICS_FILE)))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    for p in paths {
        let rows = read_metrics(&p)?;
        let Some(first) = rows.first() else { continue };
        let method = first.run_id.rsplit_once("-s").map_or(first.run_id.clone(), |(m, _)| m.to_string());
        groups.entry(method).or_default().push(rows);
    }
    let means_of = |runs: &Vec<Vec<MetricsRow>>| -> Vec<Option<f64>> {
        steps.iter().map(|&s| mean_return_at(runs, s).ok()).collect()
    };
    let baseline = groups.get("baseline").map(means_of);
    Ok(groups
        .iter()
        .map(|(method, runs)| {
            let means = means_of(runs);
            let relative = means
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let b = baseline.as_ref()?.get(i).copied().flatten()?;
                    relative_change((*m)?, b)
                })
                .collect();
            ReportLine {
                method: method.clone(),
                seeds: runs.len(),
                means,
                relative,
            }
        })
        .collect())
}
