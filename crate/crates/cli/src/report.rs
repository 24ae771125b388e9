//! Result emission: per-run artifact files and the consolidated summary
//! table. Every run directory holds exactly three files:
//!
//! ```text
//! <out>/<experiment>/<seed>/trace.csv     per-step or per-trial table
//! <out>/<experiment>/<seed>/summary.json  assertions, metrics, run rows
//! <out>/<experiment>/<seed>/meta.json     timestamps, nothing else load-bearing
//! ```
//!
//! summary.json carries no timestamps, so identical seeds produce identical
//! bytes; wall-clock facts are confined to meta.json.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// One checked bound: `observed` against the human-readable `expected`
/// bound. Failed records double as the machine-readable failure report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssertionRecord {
    pub id: String,
    pub expected: String,
    pub observed: f64,
    pub passed: bool,
}

impl AssertionRecord {
    pub fn upper(id: &str, bound: f64, observed: f64) -> Self {
        Self {
            id: id.to_string(),
            expected: format!("<= {bound:e}"),
            observed,
            passed: observed <= bound,
        }
    }

    pub fn flag(id: &str, expected: &str, ok: bool) -> Self {
        Self {
            id: id.to_string(),
            expected: expected.to_string(),
            observed: if ok { 1.0 } else { 0.0 },
            passed: ok,
        }
    }
}

/// One line of the consolidated table: a (alpha, seed) slice of an
/// experiment. `final_distance` is the experiment's own headline metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub alpha: Option<f64>,
    pub seed: u64,
    pub final_distance: f64,
    pub iters: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub passed: bool,
    pub assertions: Vec<AssertionRecord>,
    pub metrics: serde_json::Map<String, serde_json::Value>,
    pub runs: Vec<RunRow>,
    #[serde(skip)]
    pub trace_csv: String,
}

impl ExperimentReport {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            passed: true,
            assertions: Vec::new(),
            metrics: serde_json::Map::new(),
            runs: Vec::new(),
            trace_csv: String::new(),
        }
    }

    pub fn check(&mut self, record: AssertionRecord) {
        self.passed &= record.passed;
        self.assertions.push(record);
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics
            .insert(key.to_string(), serde_json::json!(value));
    }

    pub fn failures(&self) -> Vec<&AssertionRecord> {
        self.assertions.iter().filter(|a| !a.passed).collect()
    }
}

/// Writes the three artifact files. `started` anchors meta.json's wall
/// clock and duration.
pub fn write_run_artifacts(
    dir: &Path,
    report: &ExperimentReport,
    started_wall: SystemTime,
    started: Instant,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trace.csv"), &report.trace_csv)?;
    let mut summary = serde_json::to_string_pretty(report).expect("report serializes");
    summary.push('\n');
    std::fs::write(dir.join("summary.json"), summary)?;

    let started_unix_ms = started_wall
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "started_unix_ms": started_unix_ms,
        "duration_ms": started.elapsed().as_millis(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut meta_text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    meta_text.push('\n');
    std::fs::write(dir.join("meta.json"), meta_text)
}

// ==== consolidated summary table ========================================

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub final_distance: f64,
    pub iters: usize,
    pub passed: bool,
}

/// Collects every `*/*/summary.json` under `dir` into sorted table rows.
/// An unreadable or unparsable file is an error naming that file; a
/// directory with no summaries at all is an error too.
pub fn collect_summary_rows(dir: &Path) -> Result<Vec<SummaryRow>, String> {
    let mut summaries: Vec<PathBuf> = Vec::new();
    let top = std::fs::read_dir(dir)
        .map_err(|e| format!("cannot read directory {}: {e}", dir.display()))?;
    for entry in top.flatten() {
        if !entry.path().is_dir() {
            continue;
        }
        let Ok(inner) = std::fs::read_dir(entry.path()) else {
            continue;
        };
        for run in inner.flatten() {
            let candidate = run.path().join("summary.json");
            if candidate.is_file() {
                summaries.push(candidate);
            }
        }
    }
    if summaries.is_empty() {
        return Err(format!(
            "empty directory: no summary.json found under {}",
            dir.display()
        ));
    }
    summaries.sort();

    let mut rows = Vec::new();
    for path in &summaries {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let report: ExperimentReport = serde_json::from_str(&text)
            .map_err(|e| format!("corrupted summary {}: {e}", path.display()))?;
        for run in &report.runs {
            rows.push(SummaryRow {
                experiment: report.experiment.clone(),
                alpha: run.alpha,
                seed: run.seed,
                final_distance: run.final_distance,
                iters: run.iters,
                passed: run.passed,
            });
        }
    }
    rows.sort_by(|a, b| {
        (&a.experiment, a.alpha.unwrap_or(f64::NEG_INFINITY), a.seed)
            .partial_cmp(&(&b.experiment, b.alpha.unwrap_or(f64::NEG_INFINITY), b.seed))
            .expect("finite sort keys")
    });
    Ok(rows)
}

pub fn summary_table_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("experiment,alpha,seed,final_distance,iters,pass\n");
    for row in rows {
        let alpha = row
            .alpha
            .map(|a| format!("{a}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{:.16e},{},{}",
            row.experiment, alpha, row.seed, row.final_distance, row.iters, row.passed
        );
    }
    out
}

/// Writes `summary_table.csv` and `summary_table.json` into `dir` and
/// returns the CSV text for printing.
pub fn emit_summary(dir: &Path) -> Result<String, String> {
    let rows = collect_summary_rows(dir)?;
    let csv = summary_table_csv(&rows);
    let mut json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    json.push('\n');
    std::fs::write(dir.join("summary_table.csv"), &csv)
        .map_err(|e| format!("cannot write summary_table.csv: {e}"))?;
    std::fs::write(dir.join("summary_table.json"), json)
        .map_err(|e| format!("cannot write summary_table.json: {e}"))?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_assertions_flip_the_report() {
        let mut report = ExperimentReport::new("demo", 1);
        report.check(AssertionRecord::upper("a", 1e-6, 5e-7));
        assert!(report.passed);
        report.check(AssertionRecord::upper("b", 1e-6, 2e-6));
        assert!(!report.passed);
        assert_eq!(report.failures().len(), 1);
        assert_eq!(report.failures()[0].id, "b");
    }

    #[test]
    fn upper_bound_record_formats_the_bound() {
        let record = AssertionRecord::upper("x", 1e-5, 3e-6);
        assert_eq!(record.expected, "<= 1e-5");
        assert!(record.passed);
    }

    #[test]
    fn summary_rows_sort_and_render() {
        let rows = vec![
            SummaryRow {
                experiment: "b".into(),
                alpha: Some(1.0),
                seed: 7,
                final_distance: 1e-8,
                iters: 100,
                passed: true,
            },
            SummaryRow {
                experiment: "a".into(),
                alpha: None,
                seed: 7,
                final_distance: 0.5,
                iters: 3,
                passed: false,
            },
        ];
        let csv = summary_table_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "experiment,alpha,seed,final_distance,iters,pass");
        assert!(lines[1].starts_with("b,1,7,"));
        assert!(lines[2].starts_with("a,,7,"));
        assert!(lines[2].ends_with("false"));
    }

    #[test]
    fn collecting_from_an_empty_directory_fails() {
        let dir = std::env::temp_dir().join("softpref-empty-summary-test");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let err = collect_summary_rows(&dir).unwrap_err();
        assert!(err.contains("empty directory"), "{err}");
    }

    #[test]
    fn corrupted_summary_names_the_file() {
        let dir = std::env::temp_dir().join("softpref-corrupt-summary-test");
        let _ = std::fs::remove_dir_all(&dir);
        let run = dir.join("exp").join("7");
        std::fs::create_dir_all(&run).unwrap();
        std::fs::write(run.join("summary.json"), "not json").unwrap();
        let err = collect_summary_rows(&dir).unwrap_err();
        assert!(err.contains("corrupted summary"), "{err}");
        assert!(err.contains("summary.json"), "{err}");
    }
}
