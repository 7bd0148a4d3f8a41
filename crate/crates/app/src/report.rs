use std::fmt::Write;
use std::path::Path;

use fcluster_core::eval::{Assignments, EvaluationSession, PrecisionReport};

use crate::error::{Result, Stage, StageExt};

/// Per-group table followed by the macro and micro summary.
pub fn format_report(report: &PrecisionReport, heading: &str, labels: &dyn Fn(u32) -> Option<String>) -> String {
    let mut s = String::new();
    writeln!(s, "{heading:>7}  {:>6}  {:>6}  {:>9}  label", "total", "missed", "precision").unwrap();
    for (id, c) in &report.per_cluster {
        let label = labels(*id).unwrap_or_default();
        let line = format!("{id:>7}  {:>6}  {:>6}  {:>9.3}  {label}", c.total, c.missed, c.precision);
        writeln!(s, "{}", line.trim_end()).unwrap();
    }
    writeln!(s, "macro precision: {:.3}", report.macro_precision).unwrap();
    writeln!(s, "micro precision: {:.3}", report.micro_precision).unwrap();
    s
}

/// Loads both files, checks them against each other and renders the
/// cluster report, plus the merged-group report when a merge is set.
pub fn evaluate(assignments_path: &Path, session_path: &Path) -> Result<String> {
    let assignments = Assignments::load(assignments_path).stage(Stage::Evaluate)?;
    let session = EvaluationSession::load(session_path).stage(Stage::Evaluate)?;
    session.validate(&assignments).stage(Stage::Evaluate)?;

    let raw = fcluster_core::eval::compute_precision(&assignments.image_ids, &assignments.clusters, &session.marks)
        .stage(Stage::Evaluate)?;
    let mut out = format_report(&raw, "cluster", &|c| session.labels.get(&c).cloned());
    if !session.merge_map.is_empty() {
        let merged = session.precision(&assignments).stage(Stage::Evaluate)?;
        let members = |g: u32| {
            let sources: Vec<String> = session
                .merge_map
                .iter()
                .filter(|(_, t)| **t == g)
                .map(|(s, _)| s.to_string())
                .collect();
            Some(format!("clusters {}", sources.join(" ")))
        };
        out.push('\n');
        out.push_str(&format_report(&merged, "group", &members));
    }
    Ok(out)
}
