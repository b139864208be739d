use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::rank::HeadToHead;
use super::stats::Accuracy;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(model, setting)` → stratum → accuracy.
    pub accuracy: BTreeMap<String, BTreeMap<String, Accuracy>>,
    /// `subject vs rival` → head-to-head rates.
    pub head_to_head: BTreeMap<String, HeadToHead>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (run, strata) in &self.accuracy {
            let _ = writeln!(out, "== accuracy: {run}");
            let _ = writeln!(out, "{:<24} {:>7} {:>9}  95% CI", "stratum", "n", "accuracy");
            for (k, a) in strata {
                let _ = writeln!(
                    out,
                    "{:<24} {:>7} {:>9.3}  ({:.3}, {:.3})",
                    k, a.total, a.estimate, a.lo, a.hi
                );
            }
        }
        for (pair, h) in &self.head_to_head {
            let _ = writeln!(out, "== head to head: {pair} (n = {})", h.n);
            let _ = writeln!(out, "lose {:.3} ({:.3}, {:.3})", h.lose_rate, h.ci[2].0, h.ci[2].1);
            let _ = writeln!(out, "tie  {:.3} ({:.3}, {:.3})", h.tie_rate, h.ci[1].0, h.ci[1].1);
            let _ = writeln!(out, "win  {:.3} ({:.3}, {:.3})", h.win_rate, h.ci[0].0, h.ci[0].1);
        }
        out
    }
}
