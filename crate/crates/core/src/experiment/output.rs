//! Run artifacts: metrics and advice CSVs, heatmaps, layout sidecar and
//! manifest.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advising::AdviceRecord;
use crate::env::{GridWorld, Pos};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ADVICE_FILE: &str = "advice.csv";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const LAYOUT_FILE: &str = "layout.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One row per training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub global_step: u64,
    /// Mean over the last 100 finished episodes; empty before the first.
    pub episode_return_mean: Option<f64>,
    pub episode_len_mean: Option<f64>,
    pub advice_issued_cum: u64,
    pub advice_rate_window: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub teacher_value_loss: Option<f64>,
    pub entropy: f64,
    pub mean_value_gap: Option<f64>,
}

/// Grid geometry for heatmap renderers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub grid_side: usize,
    pub walls: Vec<Pos>,
    pub gaps: Vec<Pos>,
}

impl Layout {
    pub fn of(world: &GridWorld) -> Self {
        Self {
            grid_side: world.side(),
            walls: world.layout_walls(),
            gaps: world.gaps().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub global_step: u64,
    pub path: PathBuf,
    pub student_digest: String,
    /// Digest of each trunk layer, for checking frozen layers.
    pub trunk_layer_digests: Vec<String>,
}

/// Written at the end of every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub code_version: String,
    pub config: serde_json::Value,
    pub iterations: u64,
    pub total_steps: u64,
    pub advice_issued: u64,
    pub final_return: Option<f64>,
    pub teacher_digest: Option<String>,
    pub student_digest: String,
    pub trajectory_digest: String,
    pub checkpoints: Vec<CheckpointEntry>,
    pub wall_seconds: f64,
}

/// Write records with a header row, even when there are none.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const METRICS_HEADER: [&str; 12] = [
    "run_id",
    "seed",
    "global_step",
    "episode_return_mean",
    "episode_len_mean",
    "advice_issued_cum",
    "advice_rate_window",
    "policy_loss",
    "value_loss",
    "teacher_value_loss",
    "entropy",
    "mean_value_gap",
];

pub const ADVICE_HEADER: [&str; 9] = [
    "global_step",
    "episode_step",
    "x",
    "y",
    "student_action",
    "teacher_action",
    "value_src",
    "value_new",
    "issued",
];

/// Streams `metrics.csv` and `advice.csv` as a run progresses.
pub struct RunWriter {
    dir: PathBuf,
    metrics: csv::Writer<File>,
    advice: csv::Writer<File>,
}

impl RunWriter {
    pub fn create(dir: &Path, layout: &Layout) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
        let layout_path = dir.join(LAYOUT_FILE);
        fs::write(&layout_path, serde_json::to_vec_pretty(layout)?).map_err(|e| Error::io(&layout_path, e))?;
        let mut metrics = headerless(&dir.join(METRICS_FILE))?;
        metrics.write_record(METRICS_HEADER)?;
        let mut advice = headerless(&dir.join(ADVICE_FILE))?;
        advice.write_record(ADVICE_HEADER)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            advice,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.serialize(row)?;
        self.metrics.flush().map_err(|e| Error::io(self.dir.join(METRICS_FILE), e))
    }

    pub fn advice(&mut self, records: &[AdviceRecord]) -> Result<()> {
        for r in records {
            self.advice.serialize(r)?;
        }
        self.advice.flush().map_err(|e| Error::io(self.dir.join(ADVICE_FILE), e))
    }
}

fn headerless(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(Error::from)
}

pub fn read_advice(path: &Path) -> Result<Vec<AdviceRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(Error::from)
}

/// Issue counts per cell, row-major (`y * side + x`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heatmap {
    pub side: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct HeatmapRow {
    x: usize,
    y: usize,
    count: u64,
}

impl Heatmap {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            counts: vec![0; side * side],
        }
    }

    pub fn add(&mut self, records: &[AdviceRecord]) -> Result<()> {
        for r in records.iter().filter(|r| r.issued) {
            if r.x >= self.side || r.y >= self.side {
                return Err(Error::Usage(format!(
                    "advice at ({}, {}) outside a {}x{} grid",
                    r.x, r.y, self.side, self.side
                )));
            }
            self.counts[r.y * self.side + r.x] += 1;
        }
        Ok(())
    }

    pub fn count(&self, x: usize, y: usize) -> u64 {
        self.counts[y * self.side + x]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Share of issued advice with `y` strictly below `row`.
    pub fn fraction_below(&self, row: usize) -> Option<f64> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let below: u64 = (row + 1..self.side).map(|y| (0..self.side).map(|x| self.count(x, y)).sum::<u64>()).sum();
        Some(below as f64 / total as f64)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let rows: Vec<HeatmapRow> = (0..self.side)
            .flat_map(|y| (0..self.side).map(move |x| (x, y)))
            .map(|(x, y)| HeatmapRow {
                x,
                y,
                count: self.count(x, y),
            })
            .collect();
        write_csv(path, &["x", "y", "count"], &rows)
    }

    pub fn read(path: &Path, side: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut h = Self::new(side);
        for row in csv::Reader::from_reader(file).deserialize::<HeatmapRow>() {
            let row = row?;
            if row.x >= side || row.y >= side {
                return Err(Error::Usage(format!("heatmap cell ({}, {}) outside the grid", row.x, row.y)));
            }
            h.counts[row.y * side + row.x] += row.count;
        }
        Ok(h)
    }
}

/// Sum issued advice over several `advice.csv` files.
pub fn aggregate_heatmap(advice_files: &[PathBuf], side: usize) -> Result<Heatmap> {
    let mut h = Heatmap::new(side);
    for f in advice_files {
        h.add(&read_advice(f)?)?;
    }
    Ok(h)
}

/// Number of recorded decisions that a threshold `epsilon` would issue,
/// treating each record as a passed gate draw.
pub fn replay_issued_count(records: &[AdviceRecord], epsilon: f64) -> usize {
    records
        .iter()
        .filter(|r| match (r.value_new, r.value_src) {
            (Some(a), Some(b)) => (a - b).abs() <= epsilon,
            _ => false,
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{RewardMode, TaskSpec, Variant};

    fn record(x: usize, y: usize, issued: bool, gap: f64) -> AdviceRecord {
        AdviceRecord {
            global_step: 1,
            episode_step: 0,
            x,
            y,
            student_action: 0,
            teacher_action: 1,
            value_src: Some(0.5),
            value_new: Some(0.5 + gap),
            issued,
        }
    }

    #[test]
    fn metrics_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let world = GridWorld::new(TaskSpec::new(Variant::Target, RewardMode::Sparse)).unwrap();
        let mut w = RunWriter::create(dir.path(), &Layout::of(&world)).unwrap();
        let row = MetricsRow {
            run_id: "baseline-s0".into(),
            seed: 0,
            global_step: 256,
            episode_return_mean: None,
            episode_len_mean: Some(12.5),
            advice_issued_cum: 0,
            advice_rate_window: 0.0,
            policy_loss: -0.01,
            value_loss: 0.2,
            teacher_value_loss: None,
            entropy: 1.6,
            mean_value_gap: None,
        };
        w.metrics(&row).unwrap();
        w.advice(&[record(1, 2, true, 0.0)]).unwrap();
        drop(w);
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert!(!text.contains('\r'));
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), vec![row]);
        let advice = fs::read_to_string(dir.path().join(ADVICE_FILE)).unwrap();
        assert_eq!(advice.lines().next().unwrap(), ADVICE_HEADER.join(","));
        assert_eq!(read_advice(&dir.path().join(ADVICE_FILE)).unwrap().len(), 1);
        let layout: Layout = serde_json::from_slice(&fs::read(dir.path().join(LAYOUT_FILE)).unwrap()).unwrap();
        assert_eq!(layout.grid_side, 13);
        assert_eq!(layout.gaps.len(), 4);
    }

    #[test]
    fn empty_heatmap_is_all_zero() {
        let mut h = Heatmap::new(13);
        h.add(&[record(3, 3, false, 0.0)]).unwrap();
        assert_eq!(h.total(), 0);
        assert_eq!(h.fraction_below(6), None);
    }

    #[test]
    fn heatmap_counts_one_cell() {
        let dir = tempfile::tempdir().unwrap();
        let advice = dir.path().join(ADVICE_FILE);
        write_csv(&advice, &ADVICE_HEADER, &[record(4, 9, true, 0.0), record(4, 9, true, 0.1), record(4, 9, true, 0.2)]).unwrap();
        let h = aggregate_heatmap(&[advice], 13).unwrap();
        assert_eq!(h.count(4, 9), 3);
        assert_eq!(h.total(), 3);
        assert_eq!(h.fraction_below(6), Some(1.0));
        let out = dir.path().join(HEATMAP_FILE);
        h.write(&out).unwrap();
        assert_eq!(Heatmap::read(&out, 13).unwrap(), h);
        let text = fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 1 + 13 * 13);
    }

    #[test]
    fn heatmap_rejects_foreign_grid() {
        let mut h = Heatmap::new(5);
        assert!(h.add(&[record(7, 1, true, 0.0)]).is_err());
    }

    #[test]
    fn replay_count_is_monotone() {
        let recs: Vec<_> = [0.05, 0.3, 0.6, 0.95, 0.1].iter().map(|&g| record(1, 1, false, g)).collect();
        assert_eq!(replay_issued_count(&recs, 0.1), 2);
        assert_eq!(replay_issued_count(&recs, 0.5), 3);
        assert_eq!(replay_issued_count(&recs, 0.9), 4);
    }
}
