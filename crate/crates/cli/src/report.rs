//! Cross-seed aggregation of per-run eval CSVs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use hitgeo_core::planner::{EvalRow, PlannerKind};

use crate::error::{CliError, Result};
use crate::experiment::RunSummary;

/// Success of one planner across seeds. Each seed contributes its success
/// rate pooled over goals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub planner: PlannerKind,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub median: f64,
    /// Mean over seeds of the per-seed mean steps of successful episodes.
    pub mean_steps: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate `(seed, rows)` pairs per planner, planners in canonical order.
pub fn aggregate_rows(runs: &[(u64, Vec<EvalRow>)]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for planner in PlannerKind::ALL {
        let mut seeds = Vec::new();
        let mut rates = Vec::new();
        let mut steps = Vec::new();
        for (seed, rows) in runs {
            let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.planner == planner).collect();
            let episodes: usize = mine.iter().map(|r| r.episodes).sum();
            if episodes == 0 {
                continue;
            }
            let successes: usize = mine.iter().map(|r| r.successes).sum();
            seeds.push(*seed);
            rates.push(successes as f64 / episodes as f64);
            let total: f64 = mine
                .iter()
                .filter_map(|r| r.mean_steps.map(|m| m * r.successes as f64))
                .sum();
            if successes > 0 {
                steps.push(total / successes as f64);
            }
        }
        if seeds.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(&rates);
        out.push(Aggregate {
            planner,
            median: median(&rates),
            mean,
            std,
            seeds,
            per_seed: rates,
            mean_steps: (!steps.is_empty()).then(|| mean_std(&steps).0),
        });
    }
    out
}

pub fn aggregate(runs: &[RunSummary]) -> Vec<Aggregate> {
    let pairs: Vec<(u64, Vec<EvalRow>)> = runs.iter().map(|r| (r.seed, r.rows.clone())).collect();
    aggregate_rows(&pairs)
}

/// Write `report.csv` (mean ± std columns) and `report.json` under `out`.
pub fn write_aggregate(out: &Path, agg: &[Aggregate]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("report.csv"))?;
    w.write_record([
        "planner",
        "n_seeds",
        "mean",
        "std",
        "median",
        "mean_steps",
        "seeds",
    ])?;
    for a in agg {
        let seeds: Vec<String> = a.seeds.iter().map(|s| s.to_string()).collect();
        w.write_record([
            a.planner.name().to_string(),
            a.seeds.len().to_string(),
            format!("{:.6}", a.mean),
            format!("{:.6}", a.std),
            format!("{:.6}", a.median),
            a.mean_steps.map(|m| format!("{m:.3}")).unwrap_or_default(),
            seeds.join(" "),
        ])?;
    }
    w.flush()?;
    let mut text = serde_json::to_string_pretty(agg)?;
    text.push('\n');
    fs::write(out.join("report.json"), text)?;
    Ok(())
}

/// Human-readable table.
pub fn format_table(agg: &[Aggregate]) -> String {
    let mut s = format!(
        "{:<11} {:>6} {:>17} {:>8}\n",
        "planner", "seeds", "success", "median"
    );
    for a in agg {
        s.push_str(&format!(
            "{:<11} {:>6} {:>8.3} ± {:<6.3} {:>8.3}\n",
            a.planner.name(),
            a.seeds.len(),
            a.mean,
            a.std,
            a.median
        ));
    }
    s
}

/// Parse one run's `eval.csv`.
pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let bad = |msg: String| CliError::Parse {
        path: path.display().to_string(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(bad(format!("expected 6 columns, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<usize> {
            rec[i]
                .parse()
                .map_err(|_| bad(format!("bad integer `{}`", &rec[i])))
        };
        let planner = PlannerKind::parse(&rec[0])
            .ok_or_else(|| bad(format!("unknown planner `{}`", &rec[0])))?;
        let success_rate: f64 = rec[4]
            .parse()
            .map_err(|_| bad(format!("bad rate `{}`", &rec[4])))?;
        let mean_steps = if rec[5].is_empty() {
            None
        } else {
            Some(
                rec[5]
                    .parse()
                    .map_err(|_| bad(format!("bad steps `{}`", &rec[5])))?,
            )
        };
        rows.push(EvalRow {
            planner,
            goal: num(1)?,
            episodes: num(2)?,
            successes: num(3)?,
            success_rate,
            mean_steps,
        });
    }
    Ok(rows)
}

/// Aggregate every `seed_<n>/eval.csv` under `out` and write the reports.
pub fn report_dir(out: &Path) -> Result<Vec<Aggregate>> {
    let mut runs = Vec::new();
    for entry in fs::read_dir(out)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(seed) = name
            .strip_prefix("seed_")
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        let csv = entry.path().join("eval.csv");
        if csv.exists() {
            runs.push((seed, read_eval_csv(&csv)?));
        }
    }
    if runs.is_empty() {
        return Err(CliError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no seed_*/eval.csv under {}", out.display()),
        )));
    }
    runs.sort_by_key(|r| r.0);
    let agg = aggregate_rows(&runs);
    write_aggregate(out, &agg)?;
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(planner: PlannerKind, goal: usize, successes: usize) -> EvalRow {
        EvalRow {
            planner,
            goal,
            episodes: 10,
            successes,
            success_rate: successes as f64 / 10.0,
            mean_steps: (successes > 0).then_some(4.0),
        }
    }

    #[test]
    fn statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn pooled_per_seed_rates() {
        let runs = vec![
            (
                0,
                vec![
                    row(PlannerKind::Direct, 1, 10),
                    row(PlannerKind::Direct, 2, 0),
                ],
            ),
            (
                1,
                vec![
                    row(PlannerKind::Direct, 1, 6),
                    row(PlannerKind::Direct, 2, 4),
                ],
            ),
        ];
        let agg = aggregate_rows(&runs);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].per_seed, vec![0.5, 0.5]);
        assert_eq!(agg[0].std, 0.0);
        assert_eq!(agg[0].seeds, vec![0, 1]);
    }

    #[test]
    fn eval_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seed_dir = dir.path().join("seed_3");
        fs::create_dir(&seed_dir).unwrap();
        let rows = vec![
            row(PlannerKind::AsymGraph, 5, 7),
            row(PlannerKind::RecMid, 5, 0),
        ];
        let mut w = csv::Writer::from_path(seed_dir.join("eval.csv")).unwrap();
        w.write_record([
            "planner",
            "goal",
            "episodes",
            "successes",
            "success_rate",
            "mean_steps",
        ])
        .unwrap();
        for r in &rows {
            w.write_record([
                r.planner.name().to_string(),
                r.goal.to_string(),
                r.episodes.to_string(),
                r.successes.to_string(),
                r.success_rate.to_string(),
                r.mean_steps.map(|m| m.to_string()).unwrap_or_default(),
            ])
            .unwrap();
        }
        w.flush().unwrap();
        drop(w);
        assert_eq!(read_eval_csv(&seed_dir.join("eval.csv")).unwrap(), rows);
        let agg = report_dir(dir.path()).unwrap();
        assert_eq!(agg.len(), 2);
        assert!(dir.path().join("report.csv").exists());
    }

    #[test]
    fn empty_dir_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(report_dir(dir.path()).unwrap_err().exit_code(), 4);
    }
}
