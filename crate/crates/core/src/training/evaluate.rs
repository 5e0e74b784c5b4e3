//! Policy evaluation over instance sets.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{DynamicInstance, Solution};
use crate::model::beam::beam_search;
use crate::model::rollout::{rollout_batch, Strategy};
use crate::model::Model;
use crate::rng::derive_seed;
use crate::rng::streams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalStrategy {
    Greedy,
    Beam(usize),
    /// Best of `m` sampled routes.
    Sample(usize),
}

impl fmt::Display for EvalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalStrategy::Greedy => write!(f, "greedy"),
            EvalStrategy::Beam(k) => write!(f, "beam:{k}"),
            EvalStrategy::Sample(m) => write!(f, "sample:{m}"),
        }
    }
}

impl FromStr for EvalStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_k = |k: &str| {
            k.parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::param(format!("bad width in `{s}`")))
        };
        match s.split_once(':') {
            None if s == "greedy" => Ok(EvalStrategy::Greedy),
            Some(("beam", k)) => Ok(EvalStrategy::Beam(parse_k(k)?)),
            Some(("sample", m)) => Ok(EvalStrategy::Sample(parse_k(m)?)),
            _ => Err(Error::param(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub strategy: String,
    pub mean_cost: f64,
    pub costs: Vec<f64>,
    pub feasible: Vec<bool>,
    pub infeasible: usize,
    pub wall_time_s: f64,
}

/// Summarizes solutions; infeasible ones are counted, never dropped.
pub fn summarize(strategy: impl Into<String>, solutions: &[Solution], wall_time_s: f64) -> Result<EvalSummary> {
    if solutions.is_empty() {
        return Err(Error::param("cannot summarize an empty instance set"));
    }
    let costs: Vec<f64> = solutions.iter().map(|s| s.cost).collect();
    let feasible: Vec<bool> = solutions.iter().map(|s| s.feasible).collect();
    Ok(EvalSummary {
        strategy: strategy.into(),
        mean_cost: costs.iter().sum::<f64>() / costs.len() as f64,
        infeasible: feasible.iter().filter(|f| !**f).count(),
        costs,
        feasible,
        wall_time_s,
    })
}

/// Solutions of `model` on `instances` under a decoding strategy.
pub fn solve_all(model: &Model, instances: &[DynamicInstance], strategy: EvalStrategy, seed: u64) -> Result<Vec<Solution>> {
    match strategy {
        EvalStrategy::Greedy => rollout_batch(model, instances, Strategy::Greedy, seed),
        EvalStrategy::Beam(k) => instances.iter().map(|i| beam_search(i, model, k)).collect(),
        EvalStrategy::Sample(m) => {
            let mut best: Vec<Option<Solution>> = vec![None; instances.len()];
            for draw in 0..m {
                let s = derive_seed(seed, streams::EVAL_SAMPLING, draw as u64);
                for (slot, sol) in best.iter_mut().zip(rollout_batch(model, instances, Strategy::Sample, s)?) {
                    if slot.as_ref().is_none_or(|b| sol.cost < b.cost) {
                        *slot = Some(sol);
                    }
                }
            }
            Ok(best.into_iter().map(|s| s.expect("m >= 1")).collect())
        }
    }
}

pub fn evaluate(model: &Model, instances: &[DynamicInstance], strategy: EvalStrategy, seed: u64) -> Result<EvalSummary> {
    if instances.is_empty() {
        return Err(Error::param("cannot evaluate on an empty instance set"));
    }
    let start = Instant::now();
    let sols = solve_all(model, instances, strategy, seed)?;
    summarize(strategy.to_string(), &sols, start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_parse() {
        assert_eq!("greedy".parse::<EvalStrategy>().unwrap(), EvalStrategy::Greedy);
        assert_eq!("beam:10".parse::<EvalStrategy>().unwrap(), EvalStrategy::Beam(10));
        assert_eq!("sample:4".parse::<EvalStrategy>().unwrap(), EvalStrategy::Sample(4));
        assert!("beam:0".parse::<EvalStrategy>().is_err());
        assert!("beam".parse::<EvalStrategy>().is_err());
        for s in ["greedy", "beam:3", "sample:2"] {
            assert_eq!(s.parse::<EvalStrategy>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn square_tour_mean_is_four() {
        let inst = DynamicInstance::static_tsp(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], 5).unwrap();
        let sol = Solution::evaluate(&inst, vec![0, 1, 2, 3], None);
        let s = summarize("oracle", &[sol], 0.0).unwrap();
        assert!((s.mean_cost - 4.0).abs() < 1e-12);
        assert_eq!(s.infeasible, 0);
    }

    #[test]
    fn infeasible_solutions_are_counted() {
        let inst = DynamicInstance::static_tsp(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]], 4).unwrap();
        let good = Solution::evaluate(&inst, vec![0, 1, 2], None);
        let bad = Solution::evaluate(&inst, vec![0, 1, 1], None);
        let s = summarize("x", &[good.clone(), bad.clone()], 0.0).unwrap();
        assert_eq!(s.infeasible, 1);
        assert_eq!(s.costs.len(), 2);
        assert!((s.mean_cost - (good.cost + bad.cost) / 2.0).abs() < 1e-12);
    }
}
