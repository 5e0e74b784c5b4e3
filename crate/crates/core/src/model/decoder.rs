//! Temporally pointing decoder.
//!
//! The encoder output is first reduced to the slices the decoder reads
//! ([`DecodeMode`]), projected once into attention keys, values and
//! pointer keys, and then queried step by step. Several partial routes
//! (batch entries, beams) are decoded together: each row of a step is a
//! [`StepQuery`] naming the memory entry it reads from.

use std::rc::Rc;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionGroup, AttentionSpec, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::instances::ProblemKind;
use crate::params::{ParamId, ParamStore};

use super::encoder::Layout;
use super::{Model, ModelConfig};

/// Which encoder slices the decoder reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Slice `min(step, T - 1)` at each step.
    #[default]
    Temporal,
    /// Mean over the time axis, read at every step.
    Sum,
    /// Slice 0 at every step.
    FirstSlice,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [DecodeMode::Temporal, DecodeMode::FirstSlice, DecodeMode::Sum];

    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Temporal => "temporal",
            DecodeMode::Sum => "sum",
            DecodeMode::FirstSlice => "first_slice",
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "temporal" => Ok(DecodeMode::Temporal),
            "sum" => Ok(DecodeMode::Sum),
            "first_slice" | "first" => Ok(DecodeMode::FirstSlice),
            _ => Err(Error::param(format!("unknown decode mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub context_q: ParamId,
    pub context_k: ParamId,
    pub context_v: ParamId,
    pub pointer: ParamId,
    /// Row 0 stands in for the first node, row 1 for the last node, before
    /// any node has been chosen.
    pub placeholders: ParamId,
}

/// Width of the context vector.
pub fn context_dim(kind: ProblemKind, hidden: usize) -> usize {
    match kind {
        ProblemKind::Tsp => 3 * hidden,
        ProblemKind::Vrp => 2 * hidden + 1,
    }
}

impl DecoderParams {
    pub fn init<R: Rng>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Self {
        let h = config.encoder.hidden_dim;
        let c = context_dim(config.kind, h);
        DecoderParams {
            context_q: store.add_uniform("decoder.context.q", (c, h), c, rng),
            context_k: store.add_uniform("decoder.context.k", (h, h), h, rng),
            context_v: store.add_uniform("decoder.context.v", (h, h), h, rng),
            pointer: store.add_uniform("decoder.pointer", (h, h), h, rng),
            placeholders: store.add_uniform("decoder.placeholders", (2, h), 1, rng),
        }
    }
}

/// One decoding step's distribution over nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    pub mask: Vec<bool>,
    /// Clipped logits; `-inf` where masked.
    pub logits: Vec<f64>,
    /// `-inf` where masked.
    pub log_probs: Vec<f64>,
}

impl PolicyStep {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }
}

/// Node embeddings the decoder reads, for a whole rollout.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    /// `batch x slices x nodes`.
    pub layout: Layout,
    /// Slice embeddings in layout order, followed by the two placeholder rows.
    pub embeddings: Var,
    /// Graph embedding per `(batch, slice)`.
    pub graph: Var,
    pub keys: Var,
    pub values: Var,
    pub pointer_keys: Var,
}

impl DecoderMemory {
    /// Slice read at decoding step `step`.
    pub fn slice_at(&self, step: usize) -> usize {
        step.min(self.layout.time - 1)
    }

    fn placeholder_row(&self, which: usize) -> usize {
        self.layout.rows() + which
    }
}

/// Applies the decode mode to an encoder output with layout `layout`.
pub fn reduce_slices(tape: &mut Tape, h: Var, layout: Layout, mode: DecodeMode) -> (Var, Layout) {
    let reduced = Layout::new(layout.batch, 1, layout.nodes);
    match mode {
        DecodeMode::Temporal => (h, layout),
        DecodeMode::FirstSlice => {
            let rows = (0..layout.batch)
                .flat_map(|b| (0..layout.nodes).map(move |i| layout.row(b, 0, i)))
                .collect();
            (tape.gather(h, rows), reduced)
        }
        DecodeMode::Sum => {
            let segments: Vec<Vec<usize>> = (0..layout.batch)
                .flat_map(|b| {
                    (0..layout.nodes)
                        .map(move |i| (0..layout.time).map(|t| layout.row(b, t, i)).collect())
                })
                .collect();
            let mean = tape.segment_sum(h, Rc::new(segments), 1.0 / layout.time as f64);
            (mean, reduced)
        }
    }
}

/// Precomputes everything step-independent from an encoder output.
pub fn prepare(tape: &mut Tape, model: &Model, h: Var, layout: Layout) -> DecoderMemory {
    let (hd, layout) = reduce_slices(tape, h, layout, model.config.mode);
    memory_from_slices(tape, model, hd, layout)
}

/// Builds decoder memory from already-selected slices `hd`.
pub fn memory_from_slices(tape: &mut Tape, model: &Model, hd: Var, layout: Layout) -> DecoderMemory {
    let p = &model.decoder;
    let store = &model.store;
    let placeholders = tape.param(store, p.placeholders);
    let embeddings = tape.concat_rows(&[hd, placeholders]);
    let segments: Vec<Vec<usize>> = (0..layout.batch)
        .flat_map(|b| {
            (0..layout.time).map(move |t| (0..layout.nodes).map(|i| layout.row(b, t, i)).collect())
        })
        .collect();
    let graph = tape.segment_sum(hd, Rc::new(segments), 1.0);
    let wk = tape.param(store, p.context_k);
    let wv = tape.param(store, p.context_v);
    let wp = tape.param(store, p.pointer);
    DecoderMemory {
        layout,
        embeddings,
        graph,
        keys: tape.matmul(hd, wk),
        values: tape.matmul(hd, wv),
        pointer_keys: tape.matmul(hd, wp),
    }
}

/// One row of a decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepQuery {
    /// Batch entry of the memory.
    pub entry: usize,
    pub step: usize,
    pub first: Option<usize>,
    pub last: Option<usize>,
    /// Remaining vehicle load over capacity (VRP only).
    pub load: f64,
    pub mask: Vec<bool>,
}

/// Tape handles of one decoding step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub logits: Var,
    pub log_probs: Var,
}

/// Context vectors, one row per query.
pub fn context(tape: &mut Tape, model: &Model, mem: &DecoderMemory, queries: &[StepQuery]) -> Var {
    let l = mem.layout;
    let node_row = |q: &StepQuery, node: Option<usize>, which: usize| match node {
        Some(i) => l.row(q.entry, mem.slice_at(q.step), i),
        None => mem.placeholder_row(which),
    };
    let graph_rows = queries
        .iter()
        .map(|q| q.entry * l.time + mem.slice_at(q.step))
        .collect();
    let graph = tape.gather(mem.graph, graph_rows);
    let last = tape.gather(
        mem.embeddings,
        queries.iter().map(|q| node_row(q, q.last, 1)).collect(),
    );
    match model.config.kind {
        ProblemKind::Tsp => {
            let first = tape.gather(
                mem.embeddings,
                queries.iter().map(|q| node_row(q, q.first, 0)).collect(),
            );
            tape.concat_cols(&[first, last, graph])
        }
        ProblemKind::Vrp => {
            let load = tape.constant(Mat::from_shape_fn((queries.len(), 1), |(r, _)| queries[r].load));
            tape.concat_cols(&[last, load, graph])
        }
    }
}

/// Masked glimpse attention followed by clipped pointer logits and a
/// masked log-softmax, for every query at once.
pub fn decode(
    tape: &mut Tape,
    model: &Model,
    mem: &DecoderMemory,
    queries: &[StepQuery],
    ctx: Var,
) -> Result<StepVars> {
    let l = mem.layout;
    let n = l.nodes;
    let mut groups = Vec::with_capacity(queries.len());
    let mut key_rows = Vec::with_capacity(queries.len());
    let mut mask = Vec::with_capacity(queries.len() * n);
    for (r, q) in queries.iter().enumerate() {
        if q.mask.len() != n {
            return Err(Error::shape(format!("mask has {} entries, expected {n}", q.mask.len())));
        }
        if !q.mask.iter().any(|&m| m) {
            return Err(Error::Invariant(format!("every node is masked at step {}", q.step)));
        }
        let s = mem.slice_at(q.step);
        let keys: Vec<usize> = (0..n).map(|i| l.row(q.entry, s, i)).collect();
        groups.push(AttentionGroup {
            queries: vec![r],
            keys: keys.clone(),
            mask: Some(q.mask.clone()),
        });
        key_rows.push(keys);
        mask.extend_from_slice(&q.mask);
    }
    let cfg = &model.config.encoder;
    let wq = tape.param(&model.store, model.decoder.context_q);
    let query = tape.matmul(ctx, wq);
    let spec = Rc::new(AttentionSpec {
        groups,
        heads: cfg.num_heads,
        scale: cfg.attention_scale(),
    });
    let glimpse = tape.attention(query, mem.keys, mem.values, spec)?;
    let scale = 1.0 / (cfg.hidden_dim as f64).sqrt();
    let logits = tape.pointer(glimpse, mem.pointer_keys, key_rows, model.config.clip, scale);
    let log_probs = tape.masked_log_softmax(logits, mask)?;
    Ok(StepVars { logits, log_probs })
}

/// Reads the step outputs back as plain vectors.
pub fn policy_steps(tape: &Tape, vars: StepVars, queries: &[StepQuery]) -> Vec<PolicyStep> {
    let logits = tape.value(vars.logits);
    let log_probs = tape.value(vars.log_probs);
    queries
        .iter()
        .enumerate()
        .map(|(r, q)| PolicyStep {
            mask: q.mask.clone(),
            logits: logits
                .row(r)
                .iter()
                .zip(&q.mask)
                .map(|(&x, &m)| if m { x } else { f64::NEG_INFINITY })
                .collect(),
            log_probs: log_probs.row(r).to_vec(),
        })
        .collect()
}

/// Decoder input at `step` for one instance's encoder output `(T, N, D)`.
pub fn temporal_pointer(h: &Array3<f64>, step: usize, mode: DecodeMode) -> Array2<f64> {
    let t = h.dim().0;
    match mode {
        DecodeMode::Temporal => h.index_axis(Axis(0), step.min(t - 1)).to_owned(),
        DecodeMode::FirstSlice => h.index_axis(Axis(0), 0).to_owned(),
        DecodeMode::Sum => h.mean_axis(Axis(0)).expect("horizon is non-empty"),
    }
}

/// `[first | last | graph]`, placeholders standing in for missing nodes.
pub fn context_embedding_tsp(
    hd: ArrayView2<'_, f64>,
    first: Option<usize>,
    last: Option<usize>,
    placeholders: ArrayView2<'_, f64>,
) -> Array1<f64> {
    let pick = |node: Option<usize>, which: usize| match node {
        Some(i) => hd.row(i).to_owned(),
        None => placeholders.row(which).to_owned(),
    };
    let parts = [pick(first, 0), pick(last, 1), hd.sum_axis(Axis(0))];
    ndarray::concatenate(Axis(0), &[parts[0].view(), parts[1].view(), parts[2].view()]).unwrap()
}

/// `[last | load | graph]`.
pub fn context_embedding_vrp(
    hd: ArrayView2<'_, f64>,
    last: Option<usize>,
    load: f64,
    placeholders: ArrayView2<'_, f64>,
) -> Array1<f64> {
    let last = match last {
        Some(i) => hd.row(i).to_owned(),
        None => placeholders.row(1).to_owned(),
    };
    let graph = hd.sum_axis(Axis(0));
    ndarray::concatenate(Axis(0), &[last.view(), Array1::from_elem(1, load).view(), graph.view()])
        .unwrap()
}

/// Single decoding step on explicit inputs: node embeddings `hd` (`N x D`),
/// a context vector and a mask.
pub fn decode_step(
    model: &Model,
    hd: &Array2<f64>,
    ctx: &Array1<f64>,
    mask: &[bool],
) -> Result<PolicyStep> {
    let (n, d) = hd.dim();
    if d != model.hidden_dim() {
        return Err(Error::shape(format!(
            "embeddings have width {d}, model expects {}",
            model.hidden_dim()
        )));
    }
    let cdim = context_dim(model.config.kind, d);
    if ctx.len() != cdim {
        return Err(Error::shape(format!("context has {} entries, expected {cdim}", ctx.len())));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(hd.clone());
    let mem = memory_from_slices(&mut tape, model, hv, Layout::new(1, 1, n));
    let queries = [StepQuery {
        entry: 0,
        step: 0,
        first: None,
        last: None,
        load: 0.0,
        mask: mask.to_vec(),
    }];
    let c = tape.constant(ctx.view().insert_axis(Axis(0)).to_owned());
    let vars = decode(&mut tape, model, &mem, &queries, c)?;
    Ok(policy_steps(&tape, vars, &queries).remove(0))
}

/// Placeholder rows as stored in the model.
pub fn placeholders(model: &Model) -> ArrayView2<'_, f64> {
    model.store.get(model.decoder.placeholders).slice(s![.., ..])
}
