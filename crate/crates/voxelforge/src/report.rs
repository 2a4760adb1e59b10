use serde::Serialize;
use voxelforge_core::evaluation::{format_percent, CaseMetrics, MetricsReport};

#[derive(Serialize)]
struct CaseRow {
    case_id: u32,
    kidney_dice: f64,
    tumor_dice: f64,
    composite_dice: f64,
    /// Percentages rounded half-up to two decimals, as in the table.
    display: [String; 3],
}

#[derive(Serialize)]
struct ReportJson {
    cases: Vec<CaseRow>,
    mean: CaseRow,
}

fn row(case_id: u32, k: f64, t: f64, c: f64) -> CaseRow {
    CaseRow {
        case_id,
        kidney_dice: k,
        tumor_dice: t,
        composite_dice: c,
        display: [format_percent(k), format_percent(t), format_percent(c)],
    }
}

/// Machine-readable form of a report. The mean row uses case id 0.
pub fn report_json(report: &MetricsReport) -> String {
    let j = ReportJson {
        cases: report
            .per_case
            .iter()
            .map(|m: &CaseMetrics| row(m.case_id, m.kidney_dice, m.tumor_dice, m.composite))
            .collect(),
        mean: row(0, report.mean_kidney, report.mean_tumor, report.mean_composite),
    };
    let mut s = serde_json::to_string_pretty(&j).expect("report serializes");
    s.push('\n');
    s
}
