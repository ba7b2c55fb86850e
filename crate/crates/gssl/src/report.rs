//! CSV and JSON outputs: training logs, per-pixel records, threshold curves
//! and evaluation summaries.

use std::path::Path;

use gssl_core::metrics::{sweep, FixedThreshold, Peak, PixelRecord, SweepSummary, TrainedThreshold, threshold_from_gamma};
use gssl_core::train::LogEntry;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => IoError::path(path, io),
        other => IoError::Invalid(format!("{}: {other:?}", path.display())),
    })
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut w = writer(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| IoError::path(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RecordRow {
    image: usize,
    score: f64,
    accurate: u8,
}

/// One row per pixel: `image,score,accurate`. Scores are written in the
/// shortest form that parses back to the same value.
pub fn write_records(path: &Path, images: &[Vec<PixelRecord>]) -> Result<()> {
    let mut w = writer(path)?;
    for (image, recs) in images.iter().enumerate() {
        for r in recs {
            w.serialize(RecordRow {
                image,
                score: r.score,
                accurate: u8::from(r.accurate),
            })?;
        }
    }
    w.flush().map_err(|e| IoError::path(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Vec<PixelRecord>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut images: Vec<Vec<PixelRecord>> = Vec::new();
    for row in r.deserialize() {
        let row: RecordRow = row?;
        if row.accurate > 1 || !row.score.is_finite() {
            return Err(IoError::Invalid(format!("{}: bad record {row:?}", path.display())));
        }
        if row.image >= images.len() {
            images.resize_with(row.image + 1, Vec::new);
        }
        images[row.image].push(PixelRecord {
            score: row.score,
            accurate: row.accurate == 1,
        });
    }
    Ok(images)
}

#[derive(Serialize)]
struct CurveRow {
    threshold: f64,
    tp: u64,
    fp: u64,
    tn: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    precision: f64,
    recall: f64,
    tpr: f64,
    fpr: f64,
    f_beta: f64,
    a_md: f64,
    p_ac: f64,
}

pub fn write_curves(path: &Path, summary: &SweepSummary) -> Result<()> {
    let mut w = writer(path)?;
    for p in &summary.points {
        let c = p.confusion;
        w.serialize(CurveRow {
            threshold: p.threshold,
            tp: c.tp as u64,
            fp: c.fp as u64,
            tn: c.tn as u64,
            fn_: c.fn_ as u64,
            precision: p.precision,
            recall: p.recall,
            tpr: p.tpr,
            fpr: p.fpr,
            f_beta: p.f_beta,
            a_md: p.a_md,
            p_ac: p.p_ac,
        })?;
    }
    w.flush().map_err(|e| IoError::path(path, e))
}

/// Headline numbers of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_images: usize,
    pub n_pixels: usize,
    pub beta: f64,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub max_f_beta: Peak,
    pub max_a_md: Peak,
    pub degenerate: bool,
    /// Metrics at the threshold learnt during training, when requested.
    pub trained: Option<TrainedThreshold>,
}

impl Summary {
    pub fn new(images: &[Vec<PixelRecord>], beta: f64, gamma: Option<f64>) -> Result<(Self, SweepSummary)> {
        let all: Vec<PixelRecord> = images.iter().flatten().copied().collect();
        let s = sweep(&all, beta)?;
        let trained = gamma
            .map(|gamma| -> Result<TrainedThreshold> {
                Ok(TrainedThreshold {
                    gamma,
                    metrics: FixedThreshold::evaluate(&all, threshold_from_gamma(gamma), beta)?,
                })
            })
            .transpose()?;
        let summary = Self {
            n_images: images.len(),
            n_pixels: all.len(),
            beta,
            accuracy: s.accuracy,
            auroc: s.auroc,
            aupr: s.aupr,
            max_f_beta: s.max_f_beta,
            max_a_md: s.max_amd,
            degenerate: s.degenerate,
            trained,
        };
        Ok((summary, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_exactly() {
        let dir = std::env::temp_dir().join(format!("gssl-records-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("r.csv");
        let images = vec![
            vec![PixelRecord { score: -0.1 - 1e-17, accurate: true }, PixelRecord { score: 1.0 / 3.0, accurate: false }],
            vec![],
            vec![PixelRecord { score: -1.0, accurate: true }],
        ];
        write_records(&path, &images).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back, images);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
