use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::runner::ContextMode;
use crate::model::Model;
use crate::synthworld::Subtask;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskCell {
    pub subtask: Subtask,
    pub n: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Samples where `[IMG]` had to be cued.
    pub forced: usize,
    /// Samples whose target was not in the gallery (counted as misses).
    pub missing_targets: usize,
    /// R_subset@1/2/3 when the samples carry candidate subsets.
    pub subset: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub cells: Vec<SubtaskCell>,
    /// Arithmetic mean of every R@K cell.
    pub average: f64,
    /// Share of samples where the model emitted `[IMG]` itself (percent).
    pub emission_rate: f64,
    pub context: ContextMode,
    pub fingerprint: String,
}

impl RecallReport {
    pub fn new(cells: Vec<SubtaskCell>, context: ContextMode, fingerprint: String) -> Self {
        let vals: Vec<f64> = cells.iter().flat_map(|c| [c.r1, c.r5, c.r10]).collect();
        let average = if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let n: usize = cells.iter().map(|c| c.n).sum();
        let forced: usize = cells.iter().map(|c| c.forced).sum();
        let emission_rate = if n == 0 {
            0.0
        } else {
            100.0 * (n - forced) as f64 / n as f64
        };
        Self {
            cells,
            average,
            emission_rate,
            context,
            fingerprint,
        }
    }

    pub fn cell(&self, t: Subtask) -> Option<&SubtaskCell> {
        self.cells.iter().find(|c| c.subtask == t)
    }

    /// Mean of R@1/5/10 for one subtask.
    pub fn subtask_average(&self, t: Subtask) -> Option<f64> {
        self.cell(t).map(|c| (c.r1 + c.r5 + c.r10) / 3.0)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>6} {:>7} {:>7} {:>7} {:>7}", "subtask", "n", "R@1", "R@5", "R@10", "forced");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>7}",
                c.subtask.name(),
                c.n,
                c.r1,
                c.r5,
                c.r10,
                c.forced
            );
            if let Some([a, b, d]) = c.subset {
                let _ = writeln!(s, "{:<8} subset@1/2/3 {:.2} {:.2} {:.2}", "", a, b, d);
            }
        }
        let _ = writeln!(
            s,
            "average {:.2}  emission {:.1}%  context {:?}  model {}",
            self.average, self.emission_rate, self.context, self.fingerprint
        );
        s
    }

    /// One JSON record per cell.
    pub fn records(&self) -> Vec<serde_json::Value> {
        let mut out = Vec::new();
        for c in &self.cells {
            for (metric, v) in [("R@1", c.r1), ("R@5", c.r5), ("R@10", c.r10)] {
                out.push(serde_json::json!({
                    "subtask": c.subtask.name(),
                    "metric": metric,
                    "value": v,
                    "n": c.n,
                    "context": self.context,
                    "fingerprint": self.fingerprint,
                }));
            }
        }
        out
    }
}

/// FNV-1a over every parameter's name and bytes.
pub fn fingerprint<R: Real>(model: &Model<R>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: &[u8]| {
        for &x in b {
            h ^= x as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (_, p) in model.params.iter() {
        eat(p.name.as_bytes());
        for v in p.value.data() {
            eat(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    format!("{h:016x}")
}
