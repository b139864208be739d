use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::item::EvalOutcome;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Accuracy with a 95% percentile-bootstrap interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean of `values` with a percentile CI over `resamples` seeded resamples.
pub fn bootstrap_mean(values: &[f64], seed: u64, resamples: usize) -> (f64, f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    (mean, percentile(&means, 0.025), percentile(&means, 0.975))
}

/// Accuracy of a correctness vector; `None` when empty.
pub fn accuracy(correct: &[bool], seed: u64) -> Option<Accuracy> {
    if correct.is_empty() {
        return None;
    }
    let values: Vec<f64> = correct.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let (estimate, lo, hi) = bootstrap_mean(&values, seed, BOOTSTRAP_RESAMPLES);
    Some(Accuracy {
        correct: correct.iter().filter(|&&c| c).count(),
        total: correct.len(),
        estimate,
        lo,
        hi,
    })
}

/// Accuracy per stratum (as labelled by `stratum`), plus `"all"`. Empty
/// strata cannot arise from grouping; an empty input yields an empty map.
pub fn accuracy_with_ci<S>(outcomes: &[EvalOutcome], stratum: S, seed: u64) -> BTreeMap<String, Accuracy>
where
    S: Fn(&EvalOutcome) -> String,
{
    let mut groups: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for o in outcomes {
        groups.entry(stratum(o)).or_default().push(o.correct && !o.unsuccessful);
    }
    let all: Vec<bool> = outcomes.iter().map(|o| o.correct && !o.unsuccessful).collect();
    let mut out = BTreeMap::new();
    if let Some(a) = accuracy(&all, seed) {
        out.insert("all".to_string(), a);
    }
    for (k, v) in groups {
        if k == "all" {
            continue;
        }
        match accuracy(&v, seed) {
            Some(a) => {
                out.insert(k, a);
            }
            None => log::warn!("stratum {k:?} is empty; omitted"),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restriction {
    All,
    SuccessfulOnly,
}

/// Remote-model scoring: unsuccessful queries count as incorrect under
/// `All` and are dropped under `SuccessfulOnly`. `None` when nothing is left.
pub fn score_remote(outcomes: &[EvalOutcome], restriction: Restriction, seed: u64) -> Option<Accuracy> {
    let correct: Vec<bool> = outcomes
        .iter()
        .filter(|o| restriction == Restriction::All || !o.unsuccessful)
        .map(|o| o.correct && !o.unsuccessful)
        .collect();
    accuracy(&correct, seed)
}
