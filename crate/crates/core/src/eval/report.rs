use serde::{Deserialize, Serialize};

use super::{EvalReport, QuestionCategory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

const CSV_HEADER: [&str; 7] =
    ["configuration", "tokens", "target_person", "target_asset", "implicit_visual", "implicit_multimodal", "overall"];

fn percent(acc: Option<f64>) -> String {
    acc.map(|a| format!("{:.1}", a * 100.0)).unwrap_or_else(|| "-".to_string())
}

fn row(report: &EvalReport) -> Vec<String> {
    let mut cells = vec![report.name.clone(), format!("{:.0}", report.mean_tokens)];
    cells.extend(QuestionCategory::ALL.iter().map(|c| percent(report.category(*c).accuracy())));
    cells.push(percent(report.overall.accuracy()));
    cells
}

/// One row per report, in input order: mean tokens, then accuracy per
/// category and overall as percentages with one decimal.
pub fn render_report(reports: &[EvalReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => {
            let mut header = vec!["Configuration", "Tokens"];
            header.extend(QuestionCategory::ALL.iter().map(|c| c.label()));
            header.push("Overall");
            let mut out = format!("| {} |\n", header.join(" | "));
            out.push_str("|---|");
            out.push_str(&"---:|".repeat(header.len() - 1));
            out.push('\n');
            for r in reports {
                out.push_str(&format!("| {} |\n", row(r).join(" | ")));
            }
            out
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("writing to memory");
            for r in reports {
                w.write_record(row(r)).expect("writing to memory");
            }
            String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
        }
    }
}
