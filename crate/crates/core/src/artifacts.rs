//! Run directory layout.
//!
//! ```text
//! <run>/config.json     resolved configuration
//! <run>/curve.csv       round,labeled_count,test_accuracy,dev_loss,forward_passes,wall_time_ms
//! <run>/queries.jsonl   one object per round: ids, scores and labels of the query pool
//! <run>/checkpoint.bin  final network (optional)
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! curve read back parses to the same bits.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AlConfig, Engine, RoundRecord};
use crate::heuristics::Acceptance;
use crate::metrics::LearningCurve;

pub const CURVE_HEADER: [&str; 6] = ["round", "labeled_count", "test_accuracy", "dev_loss", "forward_passes", "wall_time_ms"];
pub const MEAN_CURVE_HEADER: [&str; 5] = ["round", "labeled_count", "mean_test_accuracy", "sd_test_accuracy", "runs"];

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("curves are not aligned: {0}")]
    CurveMismatch(String),
    #[error("no curves given")]
    Empty,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T> = std::result::Result<T, ArtifactError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Csv { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: usize,
    pub labeled_count: usize,
    pub test_accuracy: f64,
    pub dev_loss: f64,
    pub forward_passes: u64,
    pub wall_time_ms: u64,
}

impl From<&RoundRecord> for CurveRow {
    fn from(r: &RoundRecord) -> Self {
        CurveRow {
            round: r.round,
            labeled_count: r.labeled_count,
            test_accuracy: r.test_accuracy,
            dev_loss: r.dev_loss,
            forward_passes: r.forward_passes,
            wall_time_ms: r.wall_time_ms,
        }
    }
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = CURVE_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.round, r.labeled_count, r.test_accuracy, r.dev_loss, r.forward_passes, r.wall_time_ms
        ));
    }
    out
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    fs::write(path, curve_csv(rows)).map_err(io_err(path))
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    if headers.iter().ne(CURVE_HEADER) {
        return Err(ArtifactError::Format { path: path.to_path_buf(), reason: format!("unexpected header {headers:?}") });
    }
    rdr.deserialize().collect::<std::result::Result<Vec<CurveRow>, _>>().map_err(csv_err(path))
}

pub fn learning_curve(rows: &[CurveRow]) -> std::result::Result<LearningCurve, crate::metrics::MetricsError> {
    LearningCurve::from_pairs(&rows.iter().map(|r| (r.labeled_count, r.test_accuracy)).collect::<Vec<_>>())
}

/// One line of `queries.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryLog {
    pub round: usize,
    pub labeled_count: usize,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub basic_passes: u64,
    pub rp_passes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rp_passes_per_iteration: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recs_certificates: Option<Vec<Acceptance>>,
}

impl From<&RoundRecord> for QueryLog {
    fn from(r: &RoundRecord) -> Self {
        QueryLog {
            round: r.round,
            labeled_count: r.labeled_count,
            ids: r.queried_ids.clone(),
            scores: r.queried_scores.clone(),
            labels: r.queried_labels.clone(),
            basic_passes: r.basic_passes,
            rp_passes: r.rp_passes,
            rp_passes_per_iteration: r.rp_passes_per_iteration.clone(),
            recs_certificates: r.recs_certificates.clone(),
        }
    }
}

pub fn write_queries(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records.iter().filter(|r| r.round > 0) {
        let line = serde_json::to_string(&QueryLog::from(r)).map_err(|source| ArtifactError::Json { path: path.to_path_buf(), source })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_queries(path: &Path) -> Result<Vec<QueryLog>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| ArtifactError::Json { path: path.to_path_buf(), source })?);
    }
    Ok(out)
}

pub fn write_config(path: &Path, config: &AlConfig) -> Result<()> {
    let json = serde_json::to_string_pretty(config).map_err(|source| ArtifactError::Json { path: path.to_path_buf(), source })?;
    fs::write(path, json + "\n").map_err(io_err(path))
}

pub fn read_config(path: &Path) -> Result<AlConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ArtifactError::Json { path: path.to_path_buf(), source })
}

/// Writes the full run directory for an engine.
pub fn write_run_dir(dir: &Path, engine: &Engine) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_config(&dir.join("config.json"), engine.config())?;
    let rows: Vec<CurveRow> = engine.records().iter().map(CurveRow::from).collect();
    write_curve(&dir.join("curve.csv"), &rows)?;
    write_queries(&dir.join("queries.jsonl"), engine.records())?;
    if engine.config().write_checkpoint {
        engine.network().save_checkpoint(&dir.join("checkpoint.bin"))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCurveRow {
    pub round: usize,
    pub labeled_count: usize,
    pub mean_test_accuracy: f64,
    /// Population standard deviation (divides by the number of runs).
    pub sd_test_accuracy: f64,
    pub runs: usize,
}

/// Pointwise mean and standard deviation of aligned curves.
pub fn mean_curve(curves: &[Vec<CurveRow>]) -> Result<Vec<MeanCurveRow>> {
    let first = curves.first().ok_or(ArtifactError::Empty)?;
    for (k, c) in curves.iter().enumerate().skip(1) {
        if c.len() != first.len() {
            return Err(ArtifactError::CurveMismatch(format!("run {k} has {} points, run 0 has {}", c.len(), first.len())));
        }
        if let Some((a, b)) = c.iter().zip(first).find(|(a, b)| a.labeled_count != b.labeled_count) {
            return Err(ArtifactError::CurveMismatch(format!(
                "run {k} has labeled count {} where run 0 has {}",
                a.labeled_count, b.labeled_count
            )));
        }
    }
    let n = curves.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let mean = curves.iter().map(|c| c[i].test_accuracy).sum::<f64>() / n;
            let var = curves.iter().map(|c| (c[i].test_accuracy - mean).powi(2)).sum::<f64>() / n;
            MeanCurveRow {
                round: first[i].round,
                labeled_count: first[i].labeled_count,
                mean_test_accuracy: mean,
                sd_test_accuracy: var.sqrt(),
                runs: curves.len(),
            }
        })
        .collect())
}

pub fn write_mean_curve(path: &Path, rows: &[MeanCurveRow]) -> Result<()> {
    let mut out = MEAN_CURVE_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.round, r.labeled_count, r.mean_test_accuracy, r.sd_test_accuracy, r.runs));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_mean_curve(path: &Path) -> Result<Vec<MeanCurveRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    rdr.deserialize().collect::<std::result::Result<Vec<MeanCurveRow>, _>>().map_err(csv_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, labeled_count: usize, acc: f64) -> CurveRow {
        CurveRow { round, labeled_count, test_accuracy: acc, dev_loss: 0.1 + acc / 3.0, forward_passes: 7, wall_time_ms: 0 }
    }

    #[test]
    fn curve_roundtrips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.csv");
        let rows = vec![row(0, 10, 1.0 / 3.0), row(1, 15, 0.1 + 0.2), row(2, 20, 1.0)];
        write_curve(&p, &rows).unwrap();
        assert_eq!(read_curve(&p).unwrap(), rows);
        assert!(fs::read_to_string(&p).unwrap().starts_with("round,labeled_count,test_accuracy,dev_loss,forward_passes,wall_time_ms\n"));
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_curve(&p), Err(ArtifactError::Format { .. })));
    }

    #[test]
    fn mean_curve_matches_direct_computation() {
        let a = vec![row(0, 10, 0.5), row(1, 20, 0.7)];
        let b = vec![row(0, 10, 0.7), row(1, 20, 0.7)];
        let m = mean_curve(&[a.clone(), b]).unwrap();
        assert!((m[0].mean_test_accuracy - 0.6).abs() < 1e-12);
        assert!((m[0].sd_test_accuracy - 0.1).abs() < 1e-12);
        assert_eq!(m[1].sd_test_accuracy, 0.0);
        let single = mean_curve(&[a]).unwrap();
        assert!(single.iter().all(|r| r.sd_test_accuracy == 0.0));
    }

    #[test]
    fn mean_curve_rejects_misaligned() {
        let a = vec![row(0, 10, 0.5), row(1, 20, 0.7)];
        let b = vec![row(0, 10, 0.5), row(1, 21, 0.7)];
        assert!(matches!(mean_curve(&[a.clone(), b]), Err(ArtifactError::CurveMismatch(_))));
        assert!(matches!(mean_curve(&[a, vec![row(0, 10, 0.5)]]), Err(ArtifactError::CurveMismatch(_))));
        assert!(matches!(mean_curve(&[]), Err(ArtifactError::Empty)));
    }
}
