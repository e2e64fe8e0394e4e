use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::run::{AblationReport, RunReport};
use super::svg::{bar_chart, line_chart, Bar, Series};
use super::write_atomic;
use crate::error::ensure;
use crate::policy::RewardRecord;
use crate::{Error, Result};

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json(value)?)
}

/// Header line and numeric rows of a CSV table written by this module.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty CSV".into()))?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|f| {
                if f.is_empty() {
                    Ok(f64::NAN)
                } else {
                    f.parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("CSV line {}: {f:?}: {e}", i + 2)))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        ensure!(
            row.len() == header.len(),
            Shape,
            "CSV line {} has {} fields",
            i + 2,
            row.len()
        );
        rows.push(row);
    }
    Ok((header, rows))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn runs_csv(report: &RunReport) -> String {
    let mut s = String::from("seed,train_accuracy,test_accuracy,final_mean_t\n");
    for r in &report.runs {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.seed,
            r.train_accuracy,
            r.test_accuracy,
            opt(r.final_mean_t)
        );
    }
    s
}

pub fn trace_csv(report: &RunReport) -> String {
    let mut s = format!("seed,{}\n", RewardRecord::CSV_HEADER);
    for r in &report.runs {
        for t in &r.trace {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.seed, t.step, t.mean_t, t.std_t, t.mean_reward, t.entropy
            );
        }
    }
    s
}

pub fn loss_svg(report: &RunReport) -> String {
    let mut series = Vec::new();
    for r in &report.runs {
        if !r.stage1_losses.is_empty() {
            series.push(Series::indexed(format!("distill seed {}", r.seed), &r.stage1_losses));
        }
        series.push(Series::indexed(format!("finetune seed {}", r.seed), &r.finetune_losses));
    }
    line_chart(&format!("Loss curves ({})", report.mode), "epoch", "loss", &series)
}

pub fn trace_svg(report: &RunReport) -> String {
    let series: Vec<Series> = report
        .runs
        .iter()
        .filter(|r| !r.trace.is_empty())
        .map(|r| {
            Series::new(
                format!("seed {}", r.seed),
                r.trace.iter().map(|t| (t.step as f64, t.mean_t)).collect(),
            )
        })
        .collect();
    line_chart("Selected time index", "step", "mean t", &series)
}

/// `report.json`, `runs.csv`, `trace.csv`, `losses.svg`, `time_trace.svg`.
pub fn emit_run_report(report: &RunReport, dir: &Path) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_atomic(&dir.join("runs.csv"), runs_csv(report).as_bytes())?;
    write_atomic(&dir.join("trace.csv"), trace_csv(report).as_bytes())?;
    write_atomic(&dir.join("losses.svg"), loss_svg(report).as_bytes())?;
    write_atomic(&dir.join("time_trace.svg"), trace_svg(report).as_bytes())
}

pub fn ablation_csv(report: &AblationReport) -> String {
    let mut s = String::from("mode,mean,std");
    for seed in &report.seeds {
        let _ = write!(s, ",seed_{seed}");
    }
    s.push('\n');
    for r in &report.rows {
        let _ = write!(s, "{},{},{}", r.mode, r.mean, r.std);
        for a in &r.accuracies {
            let _ = write!(s, ",{a}");
        }
        s.push('\n');
    }
    s
}

pub fn ablation_svg(report: &AblationReport) -> String {
    let bars: Vec<Bar> = report
        .rows
        .iter()
        .map(|r| Bar {
            label: r.mode.to_string(),
            value: r.mean,
            err: r.std,
        })
        .collect();
    bar_chart("Held-out accuracy by time selection", "accuracy", &bars)
}

/// `report.json`, `ablation.csv`, `ablation.svg`, plus per-mode trace files.
pub fn emit_ablation_report(report: &AblationReport, dir: &Path) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_atomic(&dir.join("ablation.csv"), ablation_csv(report).as_bytes())?;
    write_atomic(&dir.join("ablation.svg"), ablation_svg(report).as_bytes())?;
    if let Some(r) = report.runs.iter().find(|r| r.runs.iter().any(|s| !s.trace.is_empty())) {
        write_atomic(&dir.join("trace.csv"), trace_csv(r).as_bytes())?;
        write_atomic(&dir.join("time_trace.svg"), trace_svg(r).as_bytes())?;
    }
    Ok(())
}

/// Wall-clock seconds per phase, kept out of the deterministic report.
pub fn write_timing(dir: &Path, phases: &[(&str, f64)]) -> Result<()> {
    let map: serde_json::Map<String, serde_json::Value> = phases
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
        .collect();
    write_json(&dir.join("timing.json"), &map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::run::{SeedRun, TraceRow, SCHEMA_VERSION};
    use crate::pipeline::TimeSelection;

    fn report() -> RunReport {
        let trace = (0..5)
            .map(|i| TraceRow {
                step: i,
                mean_t: 1.0 / 3.0 + i as f64,
                std_t: 0.1 * i as f64,
                mean_reward: -std::f64::consts::LN_2 / (i + 1) as f64,
                entropy: 1e-17 * i as f64,
            })
            .collect();
        RunReport {
            schema_version: SCHEMA_VERSION,
            config_hash: "abc".into(),
            teacher_hash: None,
            mode: TimeSelection::Reinforced,
            steps: 10,
            classes: 3,
            runs: vec![SeedRun {
                seed: 4,
                stage1_losses: vec![1.0, 0.5],
                finetune_losses: vec![0.9, 0.1],
                train_accuracy: 1.0,
                test_accuracy: 2.0 / 3.0,
                final_mean_t: Some(4.2),
                final_mean_t_quantile: Some(0.42),
                trace,
            }],
            mean_test_accuracy: 2.0 / 3.0,
            std_test_accuracy: 0.0,
        }
    }

    #[test]
    fn csv_roundtrip() {
        let r = report();
        let (h, rows) = parse_csv(&trace_csv(&r)).unwrap();
        assert_eq!(h[0], "seed");
        for (row, t) in rows.iter().zip(&r.runs[0].trace) {
            assert!((row[2] - t.mean_t).abs() < 1e-12);
            assert!((row[4] - t.mean_reward).abs() < 1e-12);
            assert!((row[5] - t.entropy).abs() < 1e-12);
        }
        let (_, rows) = parse_csv(&runs_csv(&r)).unwrap();
        assert_eq!(rows[0][2], 2.0 / 3.0);
        assert!(parse_csv("a,b\n1\n").is_err());
    }

    #[test]
    fn re_emit_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        emit_run_report(&r, dir.path()).unwrap();
        let first: Vec<Vec<u8>> = ["report.json", "runs.csv", "trace.csv", "losses.svg", "time_trace.svg"]
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
            .collect();
        emit_run_report(&r, dir.path()).unwrap();
        for (f, b) in ["report.json", "runs.csv", "trace.csv", "losses.svg", "time_trace.svg"]
            .iter()
            .zip(&first)
        {
            assert_eq!(&std::fs::read(dir.path().join(f)).unwrap(), b, "{f}");
        }
        let back: RunReport = serde_json::from_slice(&first[0]).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn io_errors_carry_paths() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let err = emit_run_report(&report(), &blocker.join("sub")).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
