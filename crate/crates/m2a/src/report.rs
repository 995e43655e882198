//! Plain-text tables for evaluation and ablation results.

use std::fmt::Write;

use m2a_core::eval::EvalReport;

use crate::experiment::AblationRow;

pub fn eval_table(r: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "strategy {}  seed {}  samples {}", r.strategy, r.seed, r.samples).unwrap();
    writeln!(s, "{:<10} {:>8}", "metric", "value").unwrap();
    writeln!(s, "{:<10} {:>8.4}", "accuracy", r.accuracy).unwrap();
    writeln!(s, "{:<10} {:>8.4}", "rmse", r.rmse).unwrap();
    writeln!(s, "{:<10} {:>8.4}", "macro_f1", r.macro_f1).unwrap();
    if r.fallbacks > 0 {
        writeln!(s, "unseen-domain fallbacks: {}", r.fallbacks).unwrap();
    }
    if !r.per_domain.is_empty() {
        writeln!(s, "\n{:<12} {:>6} {:>6} {:>8}", "attribute", "domain", "count", "accuracy").unwrap();
        for d in &r.per_domain {
            writeln!(s, "{:<12} {:>6} {:>6} {:>8.4}", d.attribute, d.domain, d.count, d.accuracy).unwrap();
        }
    }
    s
}

/// One row per strategy, for comparing several reports of the same model.
pub fn strategy_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<10} {:>8} {:>8} {:>8}", "strategy", "acc", "rmse", "f1").unwrap();
    for r in reports {
        writeln!(s, "{:<10} {:>8.4} {:>8.4} {:>8.4}", r.strategy, r.accuracy, r.rmse, r.macro_f1).unwrap();
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.setting.len()).max().unwrap_or(7).max(7);
    let mut s = String::new();
    writeln!(s, "{:<width$} {:>8} {:>8} {:>8} {:>8}", "setting", "acc", "rmse", "f1", "delta").unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<width$} {:>8.4} {:>8.4} {:>8.4} {:>+8.4}",
            r.setting, r.accuracy, r.rmse, r.macro_f1, r.delta
        )
        .unwrap();
    }
    s
}
