//! Temporal encoder.
//!
//! Embeddings live on the tape as a `(batch * time * nodes) x hidden` matrix
//! in `(b, t, i)` row order (see [`Layout`]). Each layer runs three
//! branches on its input: spatial attention over the nodes of one time
//! slice, temporal attention over the time series of one moving node, and
//! a per-row affine map for static nodes. The temporal and static branches
//! are merged back into original node order and fused with the spatial
//! branch through `sigmoid([H_S | H_TF] W_I)`.

use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionGroup, AttentionSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

use super::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 128,
            num_layers: 3,
            num_heads: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(Error::param("hidden_dim and num_heads must be positive"));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::param(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::param("num_layers must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub(crate) fn attention_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Row order of a batched embedding matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub time: usize,
    pub nodes: usize,
}

impl Layout {
    pub fn new(batch: usize, time: usize, nodes: usize) -> Self {
        Layout { batch, time, nodes }
    }

    #[inline]
    pub fn row(&self, b: usize, t: usize, i: usize) -> usize {
        (b * self.time + t) * self.nodes + i
    }

    pub fn rows(&self) -> usize {
        self.batch * self.time * self.nodes
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub spatial_q: ParamId,
    pub spatial_k: ParamId,
    pub spatial_v: ParamId,
    pub spatial_out: ParamId,
    pub temporal_q: ParamId,
    pub temporal_k: ParamId,
    pub temporal_v: ParamId,
    pub temporal_out: ParamId,
    pub static_w: ParamId,
    pub static_b: ParamId,
    pub integrate_w: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub layers: Vec<EncoderLayerParams>,
}

/// Glorot gain for the sigmoid integration layer.
const SIGMOID_GAIN: f64 = 4.0;

impl EncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        input_dim: usize,
        rng: &mut R,
    ) -> Self {
        let h = cfg.hidden_dim;
        let input_w = store.add_uniform("encoder.input.w", (input_dim, h), input_dim, rng);
        let input_b = store.add_uniform("encoder.input.b", (1, h), input_dim, rng);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let mut sq = |name: &str, rows: usize| {
                    store.add_glorot(format!("encoder.{l}.{name}"), (rows, h), 1.0, rng)
                };
                EncoderLayerParams {
                    spatial_q: sq("spatial.q", h),
                    spatial_k: sq("spatial.k", h),
                    spatial_v: sq("spatial.v", h),
                    spatial_out: sq("spatial.out", h),
                    temporal_q: sq("temporal.q", h),
                    temporal_k: sq("temporal.k", h),
                    temporal_v: sq("temporal.v", h),
                    temporal_out: sq("temporal.out", h),
                    static_w: sq("static.w", h),
                    static_b: store.add_uniform(format!("encoder.{l}.static.b"), (1, h), h, rng),
                    integrate_w: store.add_glorot(
                        format!("encoder.{l}.integrate.w"),
                        (2 * h, h),
                        SIGMOID_GAIN,
                        rng,
                    ),
                }
            })
            .collect();
        EncoderParams {
            input_w,
            input_b,
            layers,
        }
    }
}

/// Fully-connected input layer: `H0 = X W_in + b_in`, row by row.
pub fn initial_projection(tape: &mut Tape, store: &ParamStore, p: &EncoderParams, x: Var) -> Var {
    let w = tape.param(store, p.input_w);
    let b = tape.param(store, p.input_b);
    tape.linear(x, w, Some(b))
}

/// Multi-head self-attention across nodes, independently per time slice.
/// `adjacency[i][j] == false` forbids node `i` from attending to `j`.
pub fn spatial_attention(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &EncoderLayerParams,
    cfg: &EncoderConfig,
    h: Var,
    layout: Layout,
    adjacency: Option<&Array2<bool>>,
) -> Result<Var> {
    let n = layout.nodes;
    let mask = match adjacency {
        Some(adj) => {
            if adj.dim() != (n, n) {
                return Err(Error::shape(format!(
                    "adjacency {:?} does not match {n} nodes",
                    adj.dim()
                )));
            }
            Some(adj.iter().copied().collect::<Vec<bool>>())
        }
        None => None,
    };
    let mut groups = Vec::with_capacity(layout.batch * layout.time);
    for b in 0..layout.batch {
        for t in 0..layout.time {
            let rows: Vec<usize> = (0..n).map(|i| layout.row(b, t, i)).collect();
            groups.push(AttentionGroup {
                queries: rows.clone(),
                keys: rows,
                mask: mask.clone(),
            });
        }
    }
    let spec = Rc::new(AttentionSpec {
        groups,
        heads: cfg.num_heads,
        scale: cfg.attention_scale(),
    });
    self_attention(
        tape,
        store,
        [layer.spatial_q, layer.spatial_k, layer.spatial_v, layer.spatial_out],
        h,
        spec,
    )
}

/// Multi-head self-attention across time, independently per moving node.
/// Rows of static nodes come out as zeros.
pub fn temporal_attention(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &EncoderLayerParams,
    cfg: &EncoderConfig,
    h: Var,
    layout: Layout,
    static_nodes: &[usize],
) -> Result<Var> {
    let mut groups = Vec::with_capacity(layout.batch * layout.nodes);
    for b in 0..layout.batch {
        for i in (0..layout.nodes).filter(|i| !static_nodes.contains(i)) {
            let rows: Vec<usize> = (0..layout.time).map(|t| layout.row(b, t, i)).collect();
            groups.push(AttentionGroup {
                queries: rows.clone(),
                keys: rows,
                mask: None,
            });
        }
    }
    let spec = Rc::new(AttentionSpec {
        groups,
        heads: cfg.num_heads,
        scale: cfg.attention_scale(),
    });
    self_attention(
        tape,
        store,
        [layer.temporal_q, layer.temporal_k, layer.temporal_v, layer.temporal_out],
        h,
        spec,
    )
}

fn self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    [wq, wk, wv, wo]: [ParamId; 4],
    h: Var,
    spec: Rc<AttentionSpec>,
) -> Result<Var> {
    let (wq, wk, wv, wo) = (
        tape.param(store, wq),
        tape.param(store, wk),
        tape.param(store, wv),
        tape.param(store, wo),
    );
    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);
    let heads = tape.attention(q, k, v, spec)?;
    Ok(tape.matmul(heads, wo))
}

/// Rows holding static nodes, in `(b, t, u)` order.
pub fn static_rows(layout: Layout, static_nodes: &[usize]) -> Vec<usize> {
    let mut rows = Vec::with_capacity(layout.batch * layout.time * static_nodes.len());
    for b in 0..layout.batch {
        for t in 0..layout.time {
            for &u in static_nodes {
                rows.push(layout.row(b, t, u));
            }
        }
    }
    rows
}

/// Affine map applied to every static-node row. `None` when there are no
/// static nodes.
pub fn static_projection(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &EncoderLayerParams,
    h: Var,
    layout: Layout,
    static_nodes: &[usize],
) -> Option<Var> {
    if static_nodes.is_empty() {
        return None;
    }
    let rows = static_rows(layout, static_nodes);
    let hu = tape.gather(h, rows);
    let w = tape.param(store, layer.static_w);
    let b = tape.param(store, layer.static_b);
    Some(tape.linear(hu, w, Some(b)))
}

/// Integration layer: `sigmoid([H_S | H_TF] W_I)`.
pub fn integrate(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &EncoderLayerParams,
    hs: Var,
    htf: Var,
) -> Var {
    let cat = tape.concat_cols(&[hs, htf]);
    let w = tape.param(store, layer.integrate_w);
    let z = tape.matmul(cat, w);
    tape.sigmoid(z)
}

pub fn encode_layer(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &EncoderLayerParams,
    cfg: &EncoderConfig,
    h: Var,
    layout: Layout,
    static_nodes: &[usize],
) -> Result<Var> {
    let hs = spatial_attention(tape, store, layer, cfg, h, layout, None)?;
    let ht = temporal_attention(tape, store, layer, cfg, h, layout, static_nodes)?;
    let htf = match static_projection(tape, store, layer, h, layout, static_nodes) {
        Some(hf) => tape.overwrite(ht, hf, static_rows(layout, static_nodes)),
        None => ht,
    };
    Ok(integrate(tape, store, layer, hs, htf))
}

/// Full encoder on a batched input matrix `x` (`layout.rows() x input_dim`).
pub fn encode(
    tape: &mut Tape,
    model: &Model,
    x: Var,
    layout: Layout,
    static_nodes: &[usize],
) -> Result<Var> {
    let rows = tape.value(x).nrows();
    if rows != layout.rows() {
        return Err(Error::shape(format!(
            "input has {rows} rows, layout expects {}",
            layout.rows()
        )));
    }
    let cols = tape.value(x).ncols();
    if cols != model.config.input_dim() {
        return Err(Error::shape(format!(
            "input has {cols} features, model expects {}",
            model.config.input_dim()
        )));
    }
    let mut h = initial_projection(tape, &model.store, &model.encoder, x);
    for layer in &model.encoder.layers {
        h = encode_layer(tape, &model.store, layer, &model.config.encoder, h, layout, static_nodes)?;
    }
    Ok(h)
}

/// Flattens `(T, N, D)` inputs of several instances into `(b, t, i)` rows.
pub fn stack_inputs(inputs: &[Array3<f64>]) -> Result<(Array2<f64>, Layout)> {
    let Some(first) = inputs.first() else {
        return Err(Error::param("empty batch"));
    };
    let (t, n, d) = first.dim();
    if inputs.iter().any(|x| x.dim() != (t, n, d)) {
        return Err(Error::shape("batch members differ in shape".to_string()));
    }
    let layout = Layout::new(inputs.len(), t, n);
    let mut flat = Vec::with_capacity(layout.rows() * d);
    for x in inputs {
        flat.extend(x.iter().copied());
    }
    Ok((Array2::from_shape_vec((layout.rows(), d), flat).unwrap(), layout))
}

/// Encodes one `(T, N, D)` input tensor, returning `(T, N, hidden)`.
pub fn encode_tensor(model: &Model, x: &Array3<f64>, static_nodes: &[usize]) -> Result<Array3<f64>> {
    let (mat, layout) = stack_inputs(std::slice::from_ref(x))?;
    let mut tape = Tape::new();
    let xv = tape.constant(mat);
    let h = encode(&mut tape, model, xv, layout, static_nodes)?;
    let (t, n, _) = x.dim();
    Ok(tape
        .value(h)
        .clone()
        .into_shape_with_order((t, n, model.hidden_dim()))
        .unwrap())
}
