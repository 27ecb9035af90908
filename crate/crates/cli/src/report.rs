//! Dual-format result output: an aligned table for reading and line-delimited
//! records (with a provenance header) for downstream tooling.

use umt_core::error::Result;
use umt_core::eval::EvalReport;

use crate::checkpoint::Provenance;

/// Renders reports as an aligned text table with one row per method cell.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut rows: Vec<[String; 5]> = vec![[
        "method".into(),
        "K".into(),
        "strategy".into(),
        "AUC".into(),
        "SE".into(),
    ]];
    for report in reports {
        rows.push([
            report.method.clone(),
            report.k.map_or("-".into(), |k| k.to_string()),
            report.strategy.map_or("-".into(), |s| {
                crate::config::strategy_tag(s).to_string()
            }),
            format!("{:.4}", report.auc),
            format!("{:.4}", report.standard_error),
        ]);
    }
    let mut widths = [0usize; 5];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let line = row
            .iter()
            .zip(widths)
            .map(|(cell, width)| format!("{cell:<width$}"))
            .collect::<Vec<_>>()
            .join("  ");
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Machine-readable results: provenance comment lines, then one record per
/// report.
pub fn results_to_text(provenance: &Provenance, reports: &[EvalReport]) -> String {
    let mut out = format!(
        "# umt.results.v1\n# revision={} config_hash={} seed={}\n",
        provenance.revision, provenance.config_hash, provenance.seed
    );
    for report in reports {
        out.push_str(&report.to_line());
        out.push('\n');
    }
    out
}

/// Parses a results file back into reports, skipping comment lines. The
/// round trip through [`results_to_text`] reproduces the numbers exactly.
pub fn parse_results(text: &str) -> Result<Vec<EvalReport>> {
    text.lines()
        .filter(|line| !line.trim().is_empty() && !line.starts_with('#'))
        .map(EvalReport::from_line)
        .collect()
}
