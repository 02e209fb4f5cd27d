//! The unbalanced-robustness table: a scalar model with `c1 = c2 = 1`,
//! `c3 = 10` whose shared weight `c3` is split as `Δ` and `c3 − Δ`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::linear::unbalanced_error_profile;

pub const C1: f64 = 1.0;
pub const C2: f64 = 1.0;
pub const C3: f64 = 10.0;
pub const DEFAULT_DELTAS: [f64; 7] = [0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotivateRow {
    pub delta: f64,
    pub rms_source1: f64,
    pub rms_source2: f64,
    /// Source-2 RMS over source-1 RMS; `None` when both are zero.
    pub ratio: Option<f64>,
    /// Worst-source RMS relative to the balanced split `Δ = c3 / 2`.
    pub worst_vs_balanced: Option<f64>,
}

pub fn motivate_table(deltas: &[f64], sigma: f64) -> Vec<MotivateRow> {
    let (b1, b2) = unbalanced_error_profile(C1, C2, C3, C3 / 2.0, sigma);
    let balanced = b1.max(b2);
    deltas
        .iter()
        .map(|&delta| {
            let (r1, r2) = unbalanced_error_profile(C1, C2, C3, delta, sigma);
            MotivateRow {
                delta,
                rms_source1: r1,
                rms_source2: r2,
                ratio: (r1 > 0.0).then(|| r2 / r1),
                worst_vs_balanced: (balanced > 0.0).then(|| r1.max(r2) / balanced),
            }
        })
        .collect()
}

pub fn format_table(rows: &[MotivateRow], sigma: f64) -> String {
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
    let mut out = format!("c1 = {C1}, c2 = {C2}, c3 = {C3}, sigma = {sigma}\n");
    writeln!(out, "{:>8} {:>12} {:>12} {:>10} {:>18}", "delta", "rms_src1", "rms_src2", "src2/src1", "worst/balanced").unwrap();
    for r in rows {
        writeln!(
            out,
            "{:>8} {:>12.4} {:>12.4} {:>10} {:>18}",
            r.delta,
            r.rms_source1,
            r.rms_source2,
            opt(r.ratio),
            opt(r.worst_vs_balanced)
        )
        .unwrap();
    }
    out
}
