//! Evaluation reports on disk and as terminal tables.
//!
//! A report file keeps every per-trial row next to the aggregates so the
//! aggregates can always be recomputed and audited; loading re-derives
//! them and rejects a file whose stored summary disagrees with its rows.
//! Provenance (model, config, and pose-file hashes, seed, policy label)
//! rides along so any number in a table can be traced to the exact run
//! that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use softfall_core::eval::{Aggregate, EvalReport, TrialMetrics};

use crate::{content_hash, read_to_string, write_file, ToolError};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const REPORT_KIND: &str = "softfall-eval-report";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub p95: f64,
}

impl From<Aggregate> for AggregateEntry {
    fn from(a: Aggregate) -> Self {
        AggregateEntry {
            mean: a.mean,
            std: a.std,
            median: a.median,
            p95: a.p95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub max_impact: f64,
    pub mean_impact: f64,
    pub mroe: f64,
    pub mje: f64,
    pub component_peaks: Vec<f64>,
    pub body_peaks: Vec<f64>,
}

impl From<&TrialMetrics> for TrialRow {
    fn from(t: &TrialMetrics) -> Self {
        TrialRow {
            max_impact: t.max_impact,
            mean_impact: t.mean_impact,
            mroe: t.mroe,
            mje: t.mje,
            component_peaks: t.component_peaks.clone(),
            body_peaks: t.body_peaks.clone(),
        }
    }
}

/// Aggregates over the scalar damage metrics plus the per-component and
/// per-body force peaks. Present only when at least one trial succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub max_impact: AggregateEntry,
    pub mean_impact: AggregateEntry,
    pub mroe: AggregateEntry,
    pub mje: AggregateEntry,
    pub component_peaks: Vec<AggregateEntry>,
    pub body_peaks: Vec<AggregateEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: u32,
    pub kind: String,
    /// Human label of the evaluated policy (baseline name or checkpoint
    /// file stem).
    pub policy: String,
    pub model_hash: String,
    pub config_hash: String,
    /// Hash of the pose file the goals were drawn from.
    pub poses_hash: String,
    pub seed: u64,
    pub requested: usize,
    pub failures: usize,
    pub component_names: Vec<String>,
    pub body_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<Summary>,
    pub trials: Vec<TrialRow>,
}

impl ReportFile {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        policy: &str,
        report: &EvalReport,
        component_names: Vec<String>,
        body_names: Vec<String>,
        model_hash: &str,
        config_hash: &str,
        poses_hash: &str,
    ) -> Self {
        let mut file = ReportFile {
            version: REPORT_FORMAT_VERSION,
            kind: REPORT_KIND.to_string(),
            policy: policy.to_string(),
            model_hash: model_hash.to_string(),
            config_hash: config_hash.to_string(),
            poses_hash: poses_hash.to_string(),
            seed: report.seed,
            requested: report.requested,
            failures: report.failures,
            component_names,
            body_names,
            summary: None,
            trials: report.trials.iter().map(TrialRow::from).collect(),
        };
        file.summary = file.compute_summary();
        file
    }

    /// Recomputes the aggregates from the stored rows.
    pub fn compute_summary(&self) -> Option<Summary> {
        let column = |f: fn(&TrialRow) -> f64| {
            let values: Vec<f64> = self.trials.iter().map(f).collect();
            Aggregate::from_values(&values).map(AggregateEntry::from)
        };
        let peaks = |f: fn(&TrialRow) -> &Vec<f64>, n: usize| {
            (0..n)
                .map(|i| {
                    let values: Option<Vec<f64>> =
                        self.trials.iter().map(|t| f(t).get(i).copied()).collect();
                    Aggregate::from_values(&values?).map(AggregateEntry::from)
                })
                .collect::<Option<Vec<_>>>()
        };
        Some(Summary {
            max_impact: column(|t| t.max_impact)?,
            mean_impact: column(|t| t.mean_impact)?,
            mroe: column(|t| t.mroe)?,
            mje: column(|t| t.mje)?,
            component_peaks: peaks(|t| &t.component_peaks, self.component_names.len())?,
            body_peaks: peaks(|t| &t.body_peaks, self.body_names.len())?,
        })
    }

    /// Structural checks plus the aggregate-consistency invariant.
    pub fn validate(&self) -> Result<(), ToolError> {
        if self.version != REPORT_FORMAT_VERSION {
            return Err(ToolError::Data(format!(
                "report format version {} (this build reads {REPORT_FORMAT_VERSION})",
                self.version
            )));
        }
        if self.kind != REPORT_KIND {
            return Err(ToolError::Data(format!("not a report (kind {:?})", self.kind)));
        }
        if self.trials.len() + self.failures != self.requested {
            return Err(ToolError::Data(format!(
                "{} rows + {} failures != {} requested trials",
                self.trials.len(),
                self.failures,
                self.requested
            )));
        }
        for (i, row) in self.trials.iter().enumerate() {
            if row.component_peaks.len() != self.component_names.len()
                || row.body_peaks.len() != self.body_names.len()
            {
                return Err(ToolError::Data(format!(
                    "trial {i} peak columns do not match the name lists"
                )));
            }
        }
        if self.summary != self.compute_summary() {
            return Err(ToolError::Data(
                "stored aggregates do not match the trial rows".to_string(),
            ));
        }
        Ok(())
    }

    pub fn to_canonical_string(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("reports serialize");
        text.push('\n');
        text
    }

    pub fn hash(&self) -> String {
        content_hash(&self.to_canonical_string())
    }
}

pub fn load_report(path: &Path) -> Result<ReportFile, ToolError> {
    let text = read_to_string(path)?;
    let file: ReportFile = serde_json::from_str(&text).map_err(|e| ToolError::data_in(path, e))?;
    file.validate().map_err(|e| match e {
        ToolError::Data(msg) => ToolError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(file)
}

pub fn save_report(path: &Path, file: &ReportFile) -> Result<(), ToolError> {
    write_file(path, &file.to_canonical_string())
}

/// Side-by-side table over the scalar damage metrics, one row per report.
/// All reports must describe the same trial protocol so rows are paired.
pub fn comparison_table(reports: &[ReportFile]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>6} {:>5} {:>11} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8}\n",
        "policy",
        "trials",
        "fail",
        "max_N_mean",
        "std",
        "median",
        "p95",
        "mean_N",
        "mroe",
        "mje"
    ));
    for report in reports {
        match &report.summary {
            Some(s) => out.push_str(&format!(
                "{:<16} {:>6} {:>5} {:>11.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>8.4} {:>8.4}\n",
                report.policy,
                report.trials.len(),
                report.failures,
                s.max_impact.mean,
                s.max_impact.std,
                s.max_impact.median,
                s.max_impact.p95,
                s.mean_impact.mean,
                s.mroe.mean,
                s.mje.mean,
            )),
            None => out.push_str(&format!(
                "{:<16} {:>6} {:>5} (all trials failed)\n",
                report.policy,
                0,
                report.failures,
            )),
        }
    }
    out
}

/// Per-component peak-force table: one row per component, one column pair
/// (mean, p95) per report.
pub fn component_table(reports: &[ReportFile]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    out.push_str(&format!("{:<12}", "component"));
    for report in reports {
        out.push_str(&format!(" {:>16}", truncate(&report.policy, 16)));
    }
    out.push('\n');
    out.push_str(&format!("{:<12}", ""));
    for _ in reports {
        out.push_str(&format!(" {:>9} {:>6}", "mean_N", "p95"));
    }
    out.push('\n');
    for (i, name) in first.component_names.iter().enumerate() {
        out.push_str(&format!("{:<12}", truncate(name, 12)));
        for report in reports {
            match report.summary.as_ref().and_then(|s| s.component_peaks.get(i)) {
                Some(a) => out.push_str(&format!(" {:>9.2} {:>6.1}", a.mean, a.p95)),
                None => out.push_str(&format!(" {:>9} {:>6}", "-", "-")),
            }
        }
        out.push('\n');
    }
    out
}

fn truncate(s: &str, width: usize) -> String {
    if s.len() <= width {
        s.to_string()
    } else {
        s[..width].to_string()
    }
}
