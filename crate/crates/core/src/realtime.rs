//! Real-time solving: feature slices arrive one per step and every decision
//! is committed using only the slices revealed so far.
//!
//! At step `k` the buffered prefix `0..=k` is re-encoded from scratch and
//! the decoder reads the newest slice only.

use ndarray::{Array2, Array3, Axis};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::instances::{default_horizon, DynamicInstance, ProblemKind, RolloutState, Solution, COORD_DIM};
use crate::model::decoder::{self, PolicyStep, StepQuery, StepVars};
use crate::model::encoder::{self, stack_inputs, Layout};
use crate::model::rollout::{query_for, step_budget, Chooser, LogProbAccumulator, TapedRollout};
use crate::model::Model;

/// Pull-based source of coordinate slices, one `(N, 2)` matrix per step.
pub trait FeatureStream {
    /// Reveals the next slice, or `None` when the stream is exhausted.
    fn next_slice(&mut self) -> Option<Array2<f64>>;

    fn revealed(&self) -> usize;
}

/// Replays a stored instance one slice at a time.
pub struct InstanceStream<'a> {
    inst: &'a DynamicInstance,
    revealed: usize,
}

impl<'a> InstanceStream<'a> {
    pub fn new(inst: &'a DynamicInstance) -> Self {
        InstanceStream { inst, revealed: 0 }
    }
}

impl FeatureStream for InstanceStream<'_> {
    fn next_slice(&mut self) -> Option<Array2<f64>> {
        if self.revealed >= self.inst.horizon() {
            return None;
        }
        let s = self.inst.features.index_axis(Axis(0), self.revealed).to_owned();
        self.revealed += 1;
        Some(s)
    }

    fn revealed(&self) -> usize {
        self.revealed
    }
}

/// Wraps a closure called with the index of the requested slice.
pub struct CallbackStream<F> {
    source: F,
    revealed: usize,
}

impl<F: FnMut(usize) -> Option<Array2<f64>>> CallbackStream<F> {
    pub fn new(source: F) -> Self {
        CallbackStream { source, revealed: 0 }
    }
}

impl<F: FnMut(usize) -> Option<Array2<f64>>> FeatureStream for CallbackStream<F> {
    fn next_slice(&mut self) -> Option<Array2<f64>> {
        let s = (self.source)(self.revealed)?;
        self.revealed += 1;
        Some(s)
    }

    fn revealed(&self) -> usize {
        self.revealed
    }
}

/// What is known about an instance before any slice is revealed.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMeta {
    pub kind: ProblemKind,
    pub n: usize,
    pub demands: Vec<u32>,
    pub capacity: u32,
}

impl InstanceMeta {
    pub fn of(inst: &DynamicInstance) -> Self {
        InstanceMeta {
            kind: inst.kind,
            n: inst.n(),
            demands: inst.demands.clone(),
            capacity: inst.capacity,
        }
    }

    fn instance(&self, slices: &[Array2<f64>]) -> Result<DynamicInstance> {
        let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
        let features = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::shape(format!("revealed slices disagree: {e}")))?;
        DynamicInstance::new(self.kind, features, self.demands.clone(), self.capacity)
    }
}

/// Result of a real-time solve.
#[derive(Clone, Debug)]
pub struct RtOutcome {
    pub solution: Solution,
    /// Distribution at each committed decision.
    pub steps: Vec<PolicyStep>,
    /// Slices revealed when each decision was committed.
    pub revealed_at: Vec<usize>,
}

/// Model inputs for a revealed prefix: coordinates plus normalized demand
/// for VRP.
fn prefix_inputs(meta: &InstanceMeta, slices: &[Array2<f64>]) -> Array3<f64> {
    let d = crate::instances::input_dim(meta.kind);
    Array3::from_shape_fn((slices.len(), meta.n, d), |(t, i, c)| {
        if c < COORD_DIM {
            slices[t][[i, c]]
        } else {
            meta.demands[i] as f64 / meta.capacity as f64
        }
    })
}

/// Encodes equal-length prefixes and decodes one step from their last slice.
/// `queries[r].entry` indexes `prefixes`.
fn decode_prefixes(
    tape: &mut Tape,
    model: &Model,
    prefixes: &[Array3<f64>],
    static_nodes: &[usize],
    queries: &[StepQuery],
) -> Result<StepVars> {
    let (x, layout) = stack_inputs(prefixes)?;
    let x = tape.constant(x);
    let h = encoder::encode(tape, model, x, layout, static_nodes)?;
    let last = layout.time - 1;
    let rows = (0..layout.batch)
        .flat_map(|b| (0..layout.nodes).map(move |i| layout.row(b, last, i)))
        .collect();
    let hd = tape.gather(h, rows);
    let mem = decoder::memory_from_slices(tape, model, hd, Layout::new(layout.batch, 1, layout.nodes));
    let ctx = decoder::context(tape, model, &mem, queries);
    decoder::decode(tape, model, &mem, queries, ctx)
}

fn static_nodes_of(kind: ProblemKind) -> Vec<usize> {
    match kind {
        ProblemKind::Tsp => Vec::new(),
        ProblemKind::Vrp => vec![0],
    }
}

/// Greedy real-time solve over a feature stream.
pub fn rt_solve(stream: &mut dyn FeatureStream, model: &Model, meta: &InstanceMeta) -> Result<RtOutcome> {
    if meta.kind != model.config.kind {
        return Err(Error::param(format!("model is for {} instances", model.config.kind)));
    }
    // Masks depend only on demands and capacity, never on coordinates.
    let skeleton = meta.instance(&[Array2::zeros((meta.n, COORD_DIM))])?;
    let static_nodes = static_nodes_of(meta.kind);
    let mut state = RolloutState::initial(&skeleton);
    let mut buffer: Vec<Array2<f64>> = Vec::new();
    let mut steps = Vec::new();
    let mut revealed_at = Vec::new();
    let mut log_prob = 0.0;
    let budget = 4 * default_horizon(meta.kind, meta.n);
    while !state.is_complete(&skeleton) {
        if state.step() >= budget {
            return Err(Error::Runaway { budget });
        }
        while buffer.len() <= state.step() {
            let slice = stream.next_slice().ok_or(Error::IncompleteHorizon {
                revealed: stream.revealed(),
            })?;
            if slice.dim() != (meta.n, COORD_DIM) {
                return Err(Error::shape(format!("slice has shape {:?}", slice.dim())));
            }
            buffer.push(slice);
        }
        let query = query_for(&skeleton, &state, 0)?;
        let mut tape = Tape::new();
        let prefix = prefix_inputs(meta, &buffer[..=state.step()]);
        let vars = decode_prefixes(&mut tape, model, &[prefix], &static_nodes, std::slice::from_ref(&query))?;
        let step = decoder::policy_steps(&tape, vars, std::slice::from_ref(&query)).remove(0);
        let node = crate::model::rollout::argmax(ndarray::ArrayView1::from(&step.log_probs), &step.mask);
        log_prob += step.log_probs[node];
        state.push_unchecked(&skeleton, node);
        steps.push(step);
        revealed_at.push(buffer.len());
    }
    // Pricing the route needs the slice at its final time index (the
    // closing edge of a tour); take it if the stream still has it.
    let needed = match meta.kind {
        ProblemKind::Tsp => state.order.len() + 1,
        ProblemKind::Vrp => state.order.len(),
    };
    while buffer.len() < needed {
        match stream.next_slice() {
            Some(s) => buffer.push(s),
            None => break,
        }
    }
    let priced = meta.instance(&buffer)?;
    Ok(RtOutcome {
        solution: Solution::evaluate(&priced, state.order, Some(log_prob)),
        steps,
        revealed_at,
    })
}

/// Real-time greedy solve of a stored instance.
pub fn rt_solve_instance(inst: &DynamicInstance, model: &Model) -> Result<Solution> {
    let mut stream = InstanceStream::new(inst);
    let out = rt_solve(&mut stream, model, &InstanceMeta::of(inst))?;
    Ok(Solution::evaluate(inst, out.solution.order, out.solution.log_prob))
}

/// Batched real-time rollouts on one tape, for training. Every instance
/// sees only slices `0..=k` when its step-`k` decision is made.
pub fn rt_taped_rollout(
    model: &Model,
    instances: &[&DynamicInstance],
    mut chooser: Chooser<'_>,
) -> Result<TapedRollout> {
    let first = instances.first().ok_or_else(|| Error::param("empty batch"))?;
    let shape = (first.horizon(), first.n());
    if instances.iter().any(|i| (i.horizon(), i.n()) != shape || i.kind != model.config.kind) {
        return Err(Error::param("real-time batch must share kind and shape"));
    }
    let metas: Vec<InstanceMeta> = instances.iter().map(|i| InstanceMeta::of(i)).collect();
    let mut tape = Tape::new();
    let mut states: Vec<RolloutState> = instances.iter().map(|i| RolloutState::initial(i)).collect();
    let mut acc = LogProbAccumulator::new(instances.len());
    loop {
        let mut active = Vec::new();
        let mut queries = Vec::new();
        for (e, (inst, state)) in instances.iter().zip(&states).enumerate() {
            if state.is_complete(inst) {
                continue;
            }
            if state.step() >= step_budget(inst) {
                return Err(Error::Runaway { budget: step_budget(inst) });
            }
            if state.step() >= inst.horizon() {
                return Err(Error::IncompleteHorizon { revealed: inst.horizon() });
            }
            let mut q = query_for(inst, state, active.len())?;
            q.entry = active.len();
            active.push(e);
            queries.push(q);
        }
        if queries.is_empty() {
            break;
        }
        let step = queries[0].step;
        let prefixes: Vec<Array3<f64>> = active
            .iter()
            .map(|&e| {
                let slices: Vec<Array2<f64>> =
                    (0..=step).map(|t| instances[e].slice(t).to_owned()).collect();
                prefix_inputs(&metas[e], &slices)
            })
            .collect();
        let vars = decode_prefixes(&mut tape, model, &prefixes, &first.static_nodes, &queries)?;
        let mut chosen = Vec::with_capacity(queries.len());
        for (r, q) in queries.iter().enumerate() {
            let e = active[r];
            let row = tape.value(vars.log_probs).row(r);
            let node = chooser.choose(e, q.step, row, &q.mask)?;
            states[e].push_unchecked(instances[e], node);
            chosen.push(node);
        }
        acc.push(&mut tape, vars.log_probs, &active, chosen);
    }
    let log_probs = acc.finish(&mut tape);
    Ok(TapedRollout {
        tape,
        orders: states.into_iter().map(|s| s.order).collect(),
        log_probs,
    })
}

/// Batched greedy real-time rollouts over instances of any shapes.
pub fn rt_rollout_batch(model: &Model, instances: &[DynamicInstance]) -> Result<Vec<Solution>> {
    let mut out: Vec<Option<Solution>> = vec![None; instances.len()];
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for (i, inst) in instances.iter().enumerate() {
        groups.entry((inst.horizon(), inst.n())).or_default().push(i);
    }
    for idx in groups.values() {
        for chunk in idx.chunks(64) {
            let batch: Vec<&DynamicInstance> = chunk.iter().map(|&i| &instances[i]).collect();
            let r = rt_taped_rollout(model, &batch, Chooser::Greedy)?;
            for (&i, s) in chunk.iter().zip(r.solutions(&batch)) {
                out[i] = Some(s);
            }
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every instance is rolled out")).collect())
}
