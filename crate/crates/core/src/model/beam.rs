//! Beam search over the policy's cumulative log-likelihood.

use std::cmp::Ordering;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::instances::{DynamicInstance, RolloutState, Solution};

use super::decoder;
use super::rollout::{encode_batch, query_for, rollout, step_budget, Strategy};
use super::Model;

struct Beam {
    state: RolloutState,
    log_prob: f64,
}

struct Candidate {
    parent: usize,
    node: usize,
    score: f64,
}

/// Keeps the `width` most likely partial routes at every step. Ranking is
/// by score, then by the newly appended node, then lexicographically by
/// the parent sequence. The most likely completed route is returned; the
/// greedy route is always among the contenders, so widening the beam never
/// lowers the returned likelihood below greedy.
pub fn beam_search(inst: &DynamicInstance, model: &Model, width: usize) -> Result<Solution> {
    if width == 0 {
        return Err(Error::param("beam width must be at least 1"));
    }
    let mut tape = Tape::new();
    let mem = encode_batch(&mut tape, model, &[inst])?;
    let mut live = vec![Beam {
        state: RolloutState::initial(inst),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Beam> = Vec::new();
    while !live.is_empty() {
        if live[0].state.step() >= step_budget(inst) {
            return Err(Error::Runaway {
                budget: step_budget(inst),
            });
        }
        let queries = live
            .iter()
            .map(|b| query_for(inst, &b.state, 0))
            .collect::<Result<Vec<_>>>()?;
        let ctx = decoder::context(&mut tape, model, &mem, &queries);
        let vars = decoder::decode(&mut tape, model, &mem, &queries, ctx)?;
        let lp = tape.value(vars.log_probs);
        let mut candidates = Vec::new();
        for (parent, q) in queries.iter().enumerate() {
            for (node, &ok) in q.mask.iter().enumerate() {
                if ok {
                    candidates.push(Candidate {
                        parent,
                        node,
                        score: live[parent].log_prob + lp[[parent, node]],
                    });
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then(a.node.cmp(&b.node))
                .then_with(|| live[a.parent].state.order.cmp(&live[b.parent].state.order))
        });
        candidates.truncate(width);
        let mut next = Vec::with_capacity(candidates.len());
        for c in candidates {
            let mut state = live[c.parent].state.clone();
            state.push_unchecked(inst, c.node);
            let beam = Beam {
                state,
                log_prob: c.score,
            };
            if beam.state.is_complete(inst) {
                finished.push(beam);
            } else {
                next.push(beam);
            }
        }
        live = next;
    }
    let best = finished
        .into_iter()
        .max_by(|a, b| {
            a.log_prob
                .partial_cmp(&b.log_prob)
                .unwrap_or(Ordering::Equal)
                .then_with(|| b.state.order.cmp(&a.state.order))
        })
        .expect("a beam always completes");
    let greedy = rollout(inst, model, Strategy::Greedy, 0)?;
    if greedy.log_prob.is_some_and(|g| g >= best.log_prob) {
        return Ok(greedy);
    }
    Ok(Solution::evaluate(inst, best.state.order, Some(best.log_prob)))
}
