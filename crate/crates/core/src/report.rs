//! Run reports: per-round traces, final metrics, JSON-lines and CSV output.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// task CE loss in honest mode, adversarial loss in attack modes
    pub loss: f64,
    pub l_r: Option<f64>,
    pub l_d: Option<f64>,
    pub sg_score: Option<f64>,
    pub sg_trailing: Option<f64>,
    pub gs_score: Option<f64>,
    pub gs_running: Option<f64>,
    pub emb_mse: Option<f64>,
    pub emb_cos: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub accuracy: Option<f64>,
    pub recon_mse: Option<f64>,
    pub emb_mse: Option<f64>,
    pub emb_cos: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub sg_detected_round: Option<usize>,
    pub gs_detected_round: Option<usize>,
    pub sg_trailing_mean: Option<f64>,
    pub gs_running_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub rounds: Vec<RoundTrace>,
    pub finals: FinalMetrics,
    /// capped per-sample embedding-gradient norms for profile comparison
    pub grad_norms: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    /// Deterministic payload: everything except wall-clock time.
    pub fn canonical_payload(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Serde(e.to_string()))?;
        v.as_object_mut()
            .expect("report serializes to an object")
            .remove("wall_clock_secs");
        serde_json::to_string(&v).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// One full report per line.
pub fn write_jsonl(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(f, "{}", line)?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsReport>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Serde(e.to_string()))?);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per round.
pub fn write_trace_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "round",
        "loss",
        "l_r",
        "l_d",
        "sg_score",
        "sg_trailing",
        "gs_score",
        "gs_running",
        "emb_mse",
        "emb_cos",
    ])?;
    for t in &report.rounds {
        w.write_record([
            t.round.to_string(),
            t.loss.to_string(),
            fmt_opt(t.l_r),
            fmt_opt(t.l_d),
            fmt_opt(t.sg_score),
            fmt_opt(t.sg_trailing),
            fmt_opt(t.gs_score),
            fmt_opt(t.gs_running),
            fmt_opt(t.emb_mse),
            fmt_opt(t.emb_cos),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Detector-oriented view: (round, detector, score, trailing_mean, decision).
pub fn write_detection_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "detector", "score", "trailing_mean", "decision"])?;
    for t in &report.rounds {
        if let (Some(s), Some(m)) = (t.sg_score, t.sg_trailing) {
            let detected = report
                .finals
                .sg_detected_round
                .is_some_and(|r| t.round >= r);
            w.write_record([
                t.round.to_string(),
                "sg".into(),
                s.to_string(),
                m.to_string(),
                if detected {
                    "detected".into()
                } else {
                    "undetected".into()
                },
            ])?;
        }
        if let (Some(s), Some(m)) = (t.gs_score, t.gs_running) {
            let detected = report
                .finals
                .gs_detected_round
                .is_some_and(|r| t.round >= r);
            w.write_record([
                t.round.to_string(),
                "gs".into(),
                s.to_string(),
                m.to_string(),
                if detected {
                    "detected".into()
                } else {
                    "undetected".into()
                },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One summary row per report.
pub fn write_summary_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "mode",
        "seed",
        "rounds",
        "accuracy",
        "recon_mse",
        "emb_mse",
        "emb_cos",
        "psnr",
        "ssim",
        "sg_detected_round",
        "gs_detected_round",
    ])?;
    for r in reports {
        let f = &r.finals;
        w.write_record([
            format!("{:?}", r.config.mode).to_lowercase(),
            r.seed.to_string(),
            r.rounds.len().to_string(),
            fmt_opt(f.accuracy),
            fmt_opt(f.recon_mse),
            fmt_opt(f.emb_mse),
            fmt_opt(f.emb_cos),
            fmt_opt(f.psnr),
            fmt_opt(f.ssim),
            f.sg_detected_round
                .map(|v| v.to_string())
                .unwrap_or_default(),
            f.gs_detected_round
                .map(|v| v.to_string())
                .unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetConfig, Mode};

    fn sample_report() -> MetricsReport {
        let cfg = ExperimentConfig::from_toml(
            r#"
            schema_version = 1
            mode = "honest"
            partition_fractions = [0.5, 0.5]

            [dataset]
            kind = "synthetic"
            classes = 2
            dims = 8
            per_class = 100
            separation = 4.0
        "#,
        )
        .unwrap();
        MetricsReport {
            config: cfg,
            seed: 3,
            rounds: vec![
                RoundTrace {
                    round: 0,
                    loss: 0.7,
                    sg_score: Some(0.95),
                    sg_trailing: Some(0.95),
                    ..Default::default()
                },
                RoundTrace {
                    round: 1,
                    loss: 0.6,
                    gs_score: Some(0.9),
                    gs_running: Some(0.9),
                    ..Default::default()
                },
            ],
            finals: FinalMetrics {
                accuracy: Some(0.93),
                ..Default::default()
            },
            grad_norms: vec![0.1, 0.2],
            wall_clock_secs: 1.5,
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        let reports = vec![sample_report(), sample_report()];
        write_jsonl(&reports, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, reports);
    }

    #[test]
    fn canonical_payload_ignores_wall_clock() {
        let a = sample_report();
        let mut b = sample_report();
        b.wall_clock_secs = 99.0;
        assert_eq!(
            a.canonical_payload().unwrap(),
            b.canonical_payload().unwrap()
        );
        let mut c = sample_report();
        c.seed = 4;
        assert_ne!(
            a.canonical_payload().unwrap(),
            c.canonical_payload().unwrap()
        );
    }

    #[test]
    fn trace_csv_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let report = sample_report();
        write_trace_csv(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + report.rounds.len());

        let mut empty = report.clone();
        empty.rounds.clear();
        write_trace_csv(&empty, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("round,loss"));
    }

    #[test]
    fn summary_csv_mentions_mode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        let mut r = sample_report();
        r.config.mode = Mode::Urvfl;
        r.config.dataset = DatasetConfig::Synthetic {
            classes: 2,
            dims: 8,
            per_class: 100,
            separation: 4.0,
            seed: None,
        };
        write_summary_csv(&[r], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("urvfl,3,2,0.93"));
    }
}
