//! Rollout baseline: the greedy cost of a frozen incumbent policy, replaced
//! when a challenger is significantly better.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Outcome of a one-sided paired t-test of `candidate < incumbent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTest {
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

/// Paired t-test on per-instance cost differences `candidate - incumbent`.
pub fn paired_t_test(candidate: &[f64], incumbent: &[f64]) -> Result<PairedTest> {
    if candidate.len() != incumbent.len() {
        return Err(Error::param(format!(
            "paired samples differ in length: {} vs {}",
            candidate.len(),
            incumbent.len()
        )));
    }
    let n = candidate.len();
    if n < 2 {
        return Err(Error::param(format!("paired t-test needs at least 2 instances, got {n}")));
    }
    let diffs: Vec<f64> = candidate.iter().zip(incumbent).map(|(c, i)| c - i).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let (t, p) = if se > 0.0 {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("degrees of freedom are positive");
        (t, dist.cdf(t))
    } else if mean < 0.0 {
        (f64::NEG_INFINITY, 0.0)
    } else if mean > 0.0 {
        (f64::INFINITY, 1.0)
    } else {
        (0.0, 0.5)
    };
    Ok(PairedTest {
        mean_difference: mean,
        t_statistic: t,
        p_value: p,
    })
}

/// Whether the candidate should replace the incumbent: its mean cost must be
/// lower and the one-sided test must reject equality at level `alpha`.
pub fn baseline_update(candidate: &[f64], incumbent: &[f64], alpha: f64) -> Result<bool> {
    let test = paired_t_test(candidate, incumbent)?;
    Ok(test.mean_difference < 0.0 && test.p_value < alpha)
}
