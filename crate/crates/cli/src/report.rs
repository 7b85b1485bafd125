use std::collections::BTreeMap;
use std::path::Path;

use octave_core::evaluation::{friedman_test, pairwise_posthoc, FriedmanResult, PairResult, POSTHOC_ALPHA};
use octave_core::training::LOG_FILE;
use octave_core::Error;
use serde::Serialize;

use crate::commands::{CliError, EvalReport, REPORT_FILE};

type Result<T> = std::result::Result<T, CliError>;

/// One row of curves.csv: validation Dice and epoch-mean losses.
#[derive(Debug, Default, Serialize)]
struct CurveRow {
    run: String,
    epoch: usize,
    val_dice: f64,
    w_pce: f64,
    v_sigma: f64,
    v_delta: f64,
    l_ild: f64,
    total_sigma: f64,
    total_delta: f64,
}

#[derive(Debug, Serialize)]
struct ComparisonRow {
    run: String,
    epochs: usize,
    best_val_dice: f64,
    test_mean_dice: Option<f64>,
    test_best_fold_dice: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Statistics {
    methods: Vec<String>,
    images: usize,
    friedman: FriedmanResult,
    alpha: f64,
    pairs: Vec<PairResult>,
}

const LOSS_KEYS: [&str; 6] = ["w_pce", "v_sigma", "v_delta", "l_ild", "total_sigma", "total_delta"];

fn format_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Core(Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_curves(run: &str, dir: &Path) -> Result<Vec<CurveRow>> {
    let path = dir.join(LOG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.clone(),
            source: e,
        })
    })?;
    let mut sums = [0.0; 6];
    let mut steps = 0usize;
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format_err(&path, e))?;
        match v["kind"].as_str() {
            Some("step") => {
                for (s, k) in sums.iter_mut().zip(LOSS_KEYS) {
                    *s += v[k].as_f64().unwrap_or(0.0);
                }
                steps += 1;
            }
            Some("epoch") => {
                let n = steps.max(1) as f64;
                let m = sums.map(|s| s / n);
                rows.push(CurveRow {
                    run: run.to_string(),
                    epoch: v["epoch"].as_u64().unwrap_or_default() as usize,
                    val_dice: v["val_dice"].as_f64().unwrap_or(f64::NAN),
                    w_pce: m[0],
                    v_sigma: m[1],
                    v_delta: m[2],
                    l_ild: m[3],
                    total_sigma: m[4],
                    total_delta: m[5],
                });
                sums = [0.0; 6];
                steps = 0;
            }
            _ => return Err(format_err(&path, format!("unknown record {line}"))),
        }
    }
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

/// Writes curves.csv, comparison.csv and, when at least two runs were
/// evaluated on the same images, statistics.json.
pub fn write(runs: &[std::path::PathBuf], plots: &Path) -> Result<()> {
    std::fs::create_dir_all(plots).map_err(|e| {
        CliError::Core(Error::Io {
            path: plots.to_path_buf(),
            source: e,
        })
    })?;
    let mut curves = Vec::new();
    let mut comparison = Vec::new();
    let mut per_image: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
    for dir in runs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let rows = read_curves(&name, dir)?;
        let report_path = dir.join(REPORT_FILE);
        let report: Option<EvalReport> = if report_path.is_file() {
            let text = std::fs::read_to_string(&report_path).map_err(|e| format_err(&report_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| format_err(&report_path, e))?)
        } else {
            None
        };
        comparison.push(ComparisonRow {
            run: name.clone(),
            epochs: rows.len(),
            best_val_dice: rows.iter().map(|r| r.val_dice).fold(f64::NAN, f64::max),
            test_mean_dice: report.as_ref().map(|r| r.folds.mean_over_folds),
            test_best_fold_dice: report.as_ref().map(|r| r.folds.best_fold_mean),
        });
        if let Some(r) = &report {
            let scores = r
                .runs
                .iter()
                .flat_map(|run| run.report.per_image.iter().map(move |s| (format!("{}/{}", run.fold, s.id), s.dice)))
                .collect();
            per_image.push((name, scores));
        }
        curves.extend(rows);
    }
    write_csv(&plots.join("curves.csv"), &curves)?;
    write_csv(&plots.join("comparison.csv"), &comparison)?;

    let stats_path = plots.join("statistics.json");
    let same_images = per_image
        .windows(2)
        .all(|w| w[0].1.keys().eq(w[1].1.keys()));
    if per_image.len() >= 2 && same_images && per_image[0].1.len() >= 2 {
        let scores: Vec<Vec<f64>> = per_image.iter().map(|(_, m)| m.values().copied().collect()).collect();
        let stats = Statistics {
            methods: per_image.iter().map(|(n, _)| n.clone()).collect(),
            images: scores[0].len(),
            friedman: friedman_test(&scores)?,
            alpha: POSTHOC_ALPHA,
            pairs: pairwise_posthoc(&scores, POSTHOC_ALPHA)?,
        };
        let text = serde_json::to_string_pretty(&stats).expect("statistics serialize") + "\n";
        std::fs::write(&stats_path, text).map_err(|e| {
            CliError::Core(Error::Io {
                path: stats_path.clone(),
                source: e,
            })
        })?;
    } else if per_image.len() >= 2 {
        eprintln!("octave: note: runs were evaluated on different images; skipping statistics");
    }
    println!("wrote {} curve rows for {} run(s) to {}", curves.len(), runs.len(), plots.display());
    Ok(())
}
