//! Human-readable tables for the JSON reports.

use std::fmt::Write;

use mbq_core::pipeline::{EvalReport, LayerQuant, Method, Scheme};
use mbq_core::toyvlm::SensitivityProfile;
use serde::{Deserialize, Serialize};

use crate::bench::BenchReport;

/// Medians over seeds, one block per scheme, deltas against the FP row.
pub fn matrix_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let mut schemes: Vec<Scheme> = Vec::new();
    for m in &r.medians {
        if !schemes.contains(&m.scheme) {
            schemes.push(m.scheme);
        }
    }
    let _ = writeln!(s, "median over {} seed(s)", r.runs.len());
    for scheme in schemes {
        let fp = r.median(scheme, "fp");
        let _ = writeln!(s, "\n{:<14} {:>12} {:>12} {:>8} {:>8}", scheme.name().to_uppercase(), "loss", "d_loss", "exact", "d_exact");
        for m in r.medians.iter().filter(|m| m.scheme == scheme) {
            let (dl, de) = fp.map_or((0.0, 0.0), |f| (m.loss - f.loss, m.exact_match - f.exact_match));
            let _ = writeln!(s, "{:<14} {:>12.6} {:>+12.6} {:>8.4} {:>+8.4}", m.method, m.loss, dl, m.exact_match, de);
        }
    }
    let _ = writeln!(s, "\n{:<6} {:>10} {:>10} {:>8}  final-block g_v / g_l", "seed", "train", "fp loss", "exact");
    for run in &r.runs {
        let last = run.sensitivity.last();
        let _ = writeln!(
            s,
            "{:<6} {:>10.5} {:>10.6} {:>8.4}  {}",
            run.seed,
            run.train_final_loss,
            run.fp.loss,
            run.fp.exact_match,
            last.map_or("-".into(), |b| format!("{:.3e} / {:.3e}", b.g_vision, b.g_language)),
        );
    }
    s
}

pub fn profile_table(p: &SensitivityProfile) -> String {
    let mut s = format!("{:<14} {:>12} {:>12} {:>8}\n", "layer", "g_vision", "g_language", "l/v");
    for l in &p.layers {
        let ratio = if l.g_vision > 0.0 { format!("{:.1}", l.g_language / l.g_vision) } else { "inf".into() };
        let _ = writeln!(s, "{:<14} {:>12.4e} {:>12.4e} {:>8}", l.layer.name(), l.g_vision, l.g_language, ratio);
    }
    s
}

/// Per-layer calibration outcome, as written by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub method: Method,
    pub scheme: Scheme,
    pub layers: Vec<CalibLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibLayer {
    pub layer: String,
    pub chosen: String,
    pub objective_value: Option<f64>,
    pub curve: Vec<(String, f64)>,
    pub g_vision: Option<f64>,
    pub g_language: Option<f64>,
}

impl CalibReport {
    pub fn new(method: Method, scheme: Scheme, layers: &[LayerQuant]) -> Self {
        Self {
            method,
            scheme,
            layers: layers
                .iter()
                .map(|l| CalibLayer {
                    layer: l.layer.name(),
                    chosen: l.chosen.to_string(),
                    objective_value: l.objective_value,
                    curve: l.candidate_values.iter().map(|(c, v)| (c.to_string(), *v)).collect(),
                    g_vision: l.g_vision,
                    g_language: l.g_language,
                })
                .collect(),
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!("{} {}\n{:<14} {:>9} {:>14}\n", self.method, self.scheme, "layer", "chosen", "objective");
        for l in &self.layers {
            let v = l.objective_value.map_or("-".into(), |v| format!("{v:.6e}"));
            let _ = writeln!(s, "{:<14} {:>9} {:>14}", l.layer, l.chosen, v);
        }
        s
    }
}

pub fn bench_table(r: &BenchReport) -> String {
    let mut s = format!(
        "{:<14} {:>12} {:>12} {:>8} {:>14} {:>14} {:>8}\n",
        "shape", "ref ms", "fused ms", "speedup", "ref bytes", "packed bytes", "ratio"
    );
    for x in &r.shapes {
        let _ = writeln!(
            s,
            "{:<14} {:>12.3} {:>12.3} {:>8.2} {:>14} {:>14} {:>8.5}",
            format!("{}x{}", x.rows, x.cols),
            x.reference_ns as f64 / 1e6,
            x.fused_ns as f64 / 1e6,
            x.speedup,
            x.reference_bytes,
            x.packed_bytes,
            x.bytes_ratio,
        );
    }
    s
}
