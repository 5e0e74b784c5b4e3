//! Policy rollouts: encode once, then decode one node per step for every
//! unfinished route in the batch.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array3, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::instances::{valid_actions, DynamicInstance, ProblemKind, RolloutState, Solution};
use crate::rng::{stream_rng, streams};

use super::decoder::{
    self, context_embedding_tsp, context_embedding_vrp, placeholders, temporal_pointer, DecoderMemory,
    PolicyStep, StepQuery,
};
use super::encoder::{self, encode_tensor, stack_inputs};
use super::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Sample,
}

/// How the next node is picked from a step's distribution.
pub enum Chooser<'a> {
    /// Highest probability, lowest index on ties.
    Greedy,
    /// One generator per batch entry.
    Sample(Vec<ChaCha8Rng>),
    /// Replays the given orders.
    Forced(&'a [Vec<usize>]),
}

impl Chooser<'_> {
    pub fn sampling(seed: u64, count: usize) -> Self {
        Chooser::Sample(
            (0..count)
                .map(|i| stream_rng(seed, streams::SAMPLING, i as u64))
                .collect(),
        )
    }

    pub(crate) fn choose(&mut self, entry: usize, step: usize, log_probs: ArrayView1<'_, f64>, mask: &[bool]) -> Result<usize> {
        match self {
            Chooser::Greedy => Ok(argmax(log_probs, mask)),
            Chooser::Sample(rngs) => Ok(sample(&mut rngs[entry], log_probs, mask)),
            Chooser::Forced(orders) => {
                let node = *orders[entry].get(step).ok_or_else(|| {
                    Error::Invariant(format!("forced order {entry} ends before step {step}"))
                })?;
                if !mask.get(node).copied().unwrap_or(false) {
                    return Err(Error::Invariant(format!(
                        "forced node {node} is masked at step {step}"
                    )));
                }
                Ok(node)
            }
        }
    }
}

pub(crate) fn argmax(log_probs: ArrayView1<'_, f64>, mask: &[bool]) -> usize {
    let mut best = None;
    for (i, &lp) in log_probs.iter().enumerate() {
        if mask[i] && best.is_none_or(|(_, b)| lp > b) {
            best = Some((i, lp));
        }
    }
    best.expect("at least one node is unmasked").0
}

fn sample<R: Rng>(rng: &mut R, log_probs: ArrayView1<'_, f64>, mask: &[bool]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (i, &lp) in log_probs.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        acc += lp.exp();
        last = Some(i);
        if u < acc {
            return i;
        }
    }
    last.expect("at least one node is unmasked")
}

/// Step budget after which a rollout is declared runaway.
pub fn step_budget(inst: &DynamicInstance) -> usize {
    4 * inst.horizon()
}

/// Model inputs for slices `0..slices` as a `(slices, N, D)` tensor.
pub fn input_tensor(inst: &DynamicInstance, slices: usize) -> Array3<f64> {
    let n = inst.n();
    let d = inst.input_dim();
    let mut x = Array3::zeros((slices, n, d));
    for t in 0..slices {
        x.index_axis_mut(ndarray::Axis(0), t).assign(&inst.model_inputs(t));
    }
    x
}

pub(crate) fn query_for(inst: &DynamicInstance, state: &RolloutState, entry: usize) -> Result<StepQuery> {
    let load = match inst.kind {
        ProblemKind::Tsp => 0.0,
        ProblemKind::Vrp => state.remaining_capacity as f64 / inst.capacity as f64,
    };
    Ok(StepQuery {
        entry,
        step: state.step(),
        first: state.first(),
        last: state.current(),
        load,
        mask: valid_actions(inst, state)?,
    })
}

/// Collects the per-step picked log-probabilities and sums them per route.
#[derive(Default)]
pub(crate) struct LogProbAccumulator {
    picks: Vec<Var>,
    rows: usize,
    segments: Vec<Vec<usize>>,
}

impl LogProbAccumulator {
    pub(crate) fn new(routes: usize) -> Self {
        LogProbAccumulator {
            picks: Vec::new(),
            rows: 0,
            segments: vec![Vec::new(); routes],
        }
    }

    pub(crate) fn push(&mut self, tape: &mut Tape, log_probs: Var, entries: &[usize], chosen: Vec<usize>) {
        let pick = tape.pick(log_probs, chosen);
        for (r, &e) in entries.iter().enumerate() {
            self.segments[e].push(self.rows + r);
        }
        self.rows += entries.len();
        self.picks.push(pick);
    }

    /// `routes x 1` column of cumulative log-probabilities.
    pub(crate) fn finish(self, tape: &mut Tape) -> Var {
        let all = tape.concat_rows(&self.picks);
        tape.segment_sum(all, Rc::new(self.segments), 1.0)
    }
}

/// A batch of rollouts whose tape is kept for differentiation.
pub struct TapedRollout {
    pub tape: Tape,
    pub orders: Vec<Vec<usize>>,
    /// `batch x 1` cumulative log-probabilities.
    pub log_probs: Var,
}

impl TapedRollout {
    pub fn log_prob_values(&self) -> Vec<f64> {
        self.tape.value(self.log_probs).column(0).to_vec()
    }

    pub fn solutions(&self, instances: &[&DynamicInstance]) -> Vec<Solution> {
        let lps = self.log_prob_values();
        instances
            .iter()
            .zip(&self.orders)
            .zip(lps)
            .map(|((inst, order), lp)| Solution::evaluate(inst, order.clone(), Some(lp)))
            .collect()
    }
}

/// Encodes the full horizon of every instance and prepares decoder memory.
pub fn encode_batch(tape: &mut Tape, model: &Model, instances: &[&DynamicInstance]) -> Result<DecoderMemory> {
    let first = instances.first().ok_or_else(|| Error::param("empty batch"))?;
    if instances.iter().any(|i| i.kind != model.config.kind) {
        return Err(Error::param(format!("model is for {} instances", model.config.kind)));
    }
    let inputs: Vec<_> = instances.iter().map(|i| input_tensor(i, i.horizon())).collect();
    let (x, layout) = stack_inputs(&inputs)?;
    let x = tape.constant(x);
    let h = encoder::encode(tape, model, x, layout, &first.static_nodes)?;
    Ok(decoder::prepare(tape, model, h, layout))
}

/// Rolls out every instance of a same-shape batch on one tape.
pub fn taped_rollout(model: &Model, instances: &[&DynamicInstance], mut chooser: Chooser<'_>) -> Result<TapedRollout> {
    let mut tape = Tape::new();
    let mem = encode_batch(&mut tape, model, instances)?;
    let mut states: Vec<RolloutState> = instances.iter().map(|i| RolloutState::initial(i)).collect();
    let mut acc = LogProbAccumulator::new(instances.len());
    loop {
        let mut queries = Vec::new();
        for (e, (inst, state)) in instances.iter().zip(&states).enumerate() {
            if state.is_complete(inst) {
                continue;
            }
            if state.step() >= step_budget(inst) {
                return Err(Error::Runaway { budget: step_budget(inst) });
            }
            queries.push(query_for(inst, state, e)?);
        }
        if queries.is_empty() {
            break;
        }
        let ctx = decoder::context(&mut tape, model, &mem, &queries);
        let vars = decoder::decode(&mut tape, model, &mem, &queries, ctx)?;
        let mut chosen = Vec::with_capacity(queries.len());
        for (r, q) in queries.iter().enumerate() {
            let row = tape.value(vars.log_probs).row(r);
            let node = chooser.choose(q.entry, q.step, row, &q.mask)?;
            states[q.entry].push_unchecked(instances[q.entry], node);
            chosen.push(node);
        }
        let entries: Vec<usize> = queries.iter().map(|q| q.entry).collect();
        acc.push(&mut tape, vars.log_probs, &entries, chosen);
    }
    let log_probs = acc.finish(&mut tape);
    Ok(TapedRollout {
        tape,
        orders: states.into_iter().map(|s| s.order).collect(),
        log_probs,
    })
}

/// Largest batch decoded on a single tape during evaluation.
const EVAL_CHUNK: usize = 64;

/// Rolls out many instances, batching those of equal shape. Sampling uses
/// one generator per instance, derived from `seed` and the instance's
/// position, so results do not depend on batching.
pub fn rollout_batch(
    model: &Model,
    instances: &[DynamicInstance],
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<Solution>> {
    let mut by_shape: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_shape.entry((inst.horizon(), inst.n())).or_default().push(i);
    }
    let mut out: Vec<Option<Solution>> = vec![None; instances.len()];
    for idx in by_shape.values() {
        for chunk in idx.chunks(EVAL_CHUNK) {
            let batch: Vec<&DynamicInstance> = chunk.iter().map(|&i| &instances[i]).collect();
            let chooser = match strategy {
                Strategy::Greedy => Chooser::Greedy,
                Strategy::Sample => Chooser::Sample(
                    chunk
                        .iter()
                        .map(|&i| stream_rng(seed, streams::SAMPLING, instances[i].seed))
                        .collect(),
                ),
            };
            let r = taped_rollout(model, &batch, chooser)?;
            for (&i, sol) in chunk.iter().zip(r.solutions(&batch)) {
                out[i] = Some(sol);
            }
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every instance is rolled out")).collect())
}

pub fn rollout(inst: &DynamicInstance, model: &Model, strategy: Strategy, seed: u64) -> Result<Solution> {
    Ok(rollout_batch(model, std::slice::from_ref(inst), strategy, seed)?.remove(0))
}

/// Re-scores a complete order one step at a time through the single-step
/// decoder API, returning the cumulative log-probability and each step.
pub fn score_order(model: &Model, inst: &DynamicInstance, order: &[usize]) -> Result<(f64, Vec<PolicyStep>)> {
    let h = encode_tensor(model, &input_tensor(inst, inst.horizon()), &inst.static_nodes)?;
    let mut state = RolloutState::initial(inst);
    let skip = state.order.len();
    if order.get(..skip) != Some(&state.order[..]) {
        return Err(Error::Invariant("order does not start with the initial state".into()));
    }
    let ph = placeholders(model);
    let mut total = 0.0;
    let mut steps = Vec::new();
    for &node in &order[skip..] {
        let mask = valid_actions(inst, &state)?;
        let hd = temporal_pointer(&h, state.step(), model.config.mode);
        let ctx = match inst.kind {
            ProblemKind::Tsp => context_embedding_tsp(hd.view(), state.first(), state.current(), ph),
            ProblemKind::Vrp => context_embedding_vrp(
                hd.view(),
                state.current(),
                state.remaining_capacity as f64 / inst.capacity as f64,
                ph,
            ),
        };
        let step = decoder::decode_step(model, &hd, &ctx, &mask)?;
        if !mask.get(node).copied().unwrap_or(false) {
            return Err(Error::Invariant(format!("node {node} is masked at step {}", state.step())));
        }
        total += step.log_probs[node];
        steps.push(step);
        state.push_unchecked(inst, node);
    }
    if !state.is_complete(inst) {
        return Err(Error::Invariant("order does not complete the route".into()));
    }
    Ok((total, steps))
}
