//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix whose rows are "items" (node/time pairs,
//! batch entries) and whose columns are features. Multi-head attention and
//! the pointer logits are fused ops with hand-written adjoints, which keeps
//! the tape short even for batched rollouts.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention group: `queries` attend over `keys`. `mask`, when present,
/// is row-major `queries.len() x keys.len()` with `true` meaning "may attend".
#[derive(Clone, Debug)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub groups: Vec<AttentionGroup>,
    pub heads: usize,
    pub scale: f64,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    SegmentSum {
        src: Var,
        segments: Rc<Vec<Vec<usize>>>,
        scale: f64,
    },
    Overwrite {
        base: Var,
        over: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Rc<AttentionSpec>,
        probs: Vec<f64>,
    },
    Pointer {
        query: Var,
        keys: Var,
        groups: Vec<Vec<usize>>,
        clip: f64,
        scale: f64,
    },
    LogSoftmax {
        src: Var,
        mask: Vec<bool>,
    },
    Pick {
        src: Var,
        cols: Vec<usize>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints of the tape's leaves and parameters after a backward pass.
pub struct Adjoints {
    grads: Vec<Option<Mat>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

fn std_layout(m: Mat) -> Mat {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: std_layout(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf whose adjoint is tracked (used for gradient checks).
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter on the tape; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// `a + b` with the single-row `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + &self.value(b).row(0);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::AddRow(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let needs = self.needs(a);
        self.push(value, Op::Tanh(a), needs)
    }

    /// Affine map `x W (+ b)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn gather(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let value = self.value(src).select(Axis(0), &rows);
        let needs = self.needs(src);
        self.push(value, Op::Gather(src, rows), needs)
    }

    /// Row `r` of the output is `scale * sum(src[segments[r]])`.
    pub fn segment_sum(&mut self, src: Var, segments: Rc<Vec<Vec<usize>>>, scale: f64) -> Var {
        let x = self.value(src);
        let mut value = Mat::zeros((segments.len(), x.ncols()));
        for (r, seg) in segments.iter().enumerate() {
            let mut row = value.row_mut(r);
            for &i in seg {
                row += &x.row(i);
            }
            row *= scale;
        }
        let needs = self.needs(src);
        self.push(value, Op::SegmentSum { src, segments, scale }, needs)
    }

    /// Copy of `base` with `base[rows[k]]` replaced by `over[k]`.
    pub fn overwrite(&mut self, base: Var, over: Var, rows: Vec<usize>) -> Var {
        let mut value = self.value(base).clone();
        let o = self.value(over);
        for (k, &r) in rows.iter().enumerate() {
            value.row_mut(r).assign(&o.row(k));
        }
        let needs = self.needs(base) || self.needs(over);
        self.push(value, Op::Overwrite { base, over, rows }, needs)
    }

    /// Grouped multi-head scaled dot-product attention. Rows of `q` that
    /// belong to no group produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: Rc<AttentionSpec>) -> Result<Var> {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let width = qm.ncols();
        if km.ncols() != width || vm.ncols() != width {
            return Err(Error::shape("attention q/k/v widths differ".to_string()));
        }
        if spec.heads == 0 || width % spec.heads != 0 {
            return Err(Error::shape(format!(
                "width {width} not divisible into {} heads",
                spec.heads
            )));
        }
        let dh = width / spec.heads;
        let (qs, ks, vs) = (
            qm.as_slice().unwrap(),
            km.as_slice().unwrap(),
            vm.as_slice().unwrap(),
        );
        let mut out = Mat::zeros((qm.nrows(), width));
        let os = out.as_slice_mut().unwrap();
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for g in &spec.groups {
            let nk = g.keys.len();
            if let Some(mask) = &g.mask {
                if mask.len() != g.queries.len() * nk {
                    return Err(Error::shape("attention mask size mismatch".to_string()));
                }
                for (qi, row) in mask.chunks(nk.max(1)).enumerate() {
                    if !row.iter().any(|&m| m) {
                        return Err(Error::Invariant(format!(
                            "attention query {} has no admissible key",
                            g.queries[qi]
                        )));
                    }
                }
            }
            if nk == 0 && !g.queries.is_empty() {
                return Err(Error::Invariant("attention group without keys".into()));
            }
            for h in 0..spec.heads {
                let off = h * dh;
                for (qi, &qr) in g.queries.iter().enumerate() {
                    let qrow = &qs[qr * width + off..qr * width + off + dh];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for (kj, &kr) in g.keys.iter().enumerate() {
                        let allowed = g.mask.as_ref().is_none_or(|m| m[qi * nk + kj]);
                        let sc = if allowed {
                            let krow = &ks[kr * width + off..kr * width + off + dh];
                            spec.scale * dot(qrow, krow)
                        } else {
                            f64::NEG_INFINITY
                        };
                        max = max.max(sc);
                        scores.push(sc);
                    }
                    let mut total = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = if sc.is_finite() { (*sc - max).exp() } else { 0.0 };
                        total += *sc;
                    }
                    let orow = &mut os[qr * width + off..qr * width + off + dh];
                    for (kj, &kr) in g.keys.iter().enumerate() {
                        let p = scores[kj] / total;
                        probs.push(p);
                        if p != 0.0 {
                            let vrow = &vs[kr * width + off..kr * width + off + dh];
                            axpy(p, vrow, orow);
                        }
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }, needs))
    }

    /// Attention weights recorded by an attention node, in group, head,
    /// query, key order.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Weights of the most recent attention node recorded before `v`, for
    /// inspecting a composite op such as attention followed by a projection.
    pub fn attention_weights_before(&self, v: Var) -> Option<&[f64]> {
        (0..v.0).rev().find_map(|i| self.attention_weights(Var(i)))
    }

    /// Clipped pointer logits: `out[b, j] = clip * tanh(scale * query[b] . keys[groups[b][j]])`.
    pub fn pointer(
        &mut self,
        query: Var,
        keys: Var,
        groups: Vec<Vec<usize>>,
        clip: f64,
        scale: f64,
    ) -> Var {
        let (qm, km) = (self.value(query), self.value(keys));
        let width = groups.first().map_or(0, |g| g.len());
        let mut out = Mat::zeros((qm.nrows(), width));
        for (b, g) in groups.iter().enumerate() {
            debug_assert_eq!(g.len(), width);
            let qrow = qm.row(b);
            for (j, &kr) in g.iter().enumerate() {
                out[[b, j]] = clip * (scale * qrow.dot(&km.row(kr))).tanh();
            }
        }
        let needs = self.needs(query) || self.needs(keys);
        self.push(
            out,
            Op::Pointer {
                query,
                keys,
                groups,
                clip,
                scale,
            },
            needs,
        )
    }

    /// Row-wise log-softmax over entries where `mask` is true; masked
    /// entries become `-inf`.
    pub fn masked_log_softmax(&mut self, src: Var, mask: Vec<bool>) -> Result<Var> {
        let x = self.value(src);
        let (rows, cols) = x.dim();
        if mask.len() != rows * cols {
            return Err(Error::shape("log-softmax mask size mismatch".to_string()));
        }
        let mut out = Mat::from_elem((rows, cols), f64::NEG_INFINITY);
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&c| m[c])
                .map(|c| x[[r, c]])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Invariant(format!("row {r} has every action masked")));
            }
            let lse = max
                + (0..cols)
                    .filter(|&c| m[c])
                    .map(|c| (x[[r, c]] - max).exp())
                    .sum::<f64>()
                    .ln();
            for c in (0..cols).filter(|&c| m[c]) {
                out[[r, c]] = x[[r, c]] - lse;
            }
        }
        let needs = self.needs(src);
        Ok(self.push(out, Op::LogSoftmax { src, mask }, needs))
    }

    /// `out[b, 0] = src[b, cols[b]]`.
    pub fn pick(&mut self, src: Var, cols: Vec<usize>) -> Var {
        let x = self.value(src);
        let value = Mat::from_shape_fn((cols.len(), 1), |(b, _)| x[[b, cols[b]]]);
        let needs = self.needs(src);
        self.push(value, Op::Pick { src, cols }, needs)
    }

    /// Reverse pass from `root` seeded with `seed` (same shape as the root).
    pub fn backward(&self, root: Var, seed: Mat) -> Adjoints {
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[idx] = Some(g);
            }
        }
        Adjoints { grads }
    }

    /// Reverse pass that accumulates parameter gradients into `out`.
    pub fn backward_params(&self, root: Var, seed: Mat, out: &mut Gradients) {
        let adj = self.backward(root, seed);
        for (&id, &v) in &self.params {
            if let Some(g) = adj.get(v) {
                out.accumulate(id, g);
            }
        }
    }

    fn propagate(&self, op: &Op, value: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        let send = |v: Var, delta: Mat, grads: &mut [Option<Mat>]| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    send(*a, g.dot(&self.value(*b).t()), grads);
                }
                if self.needs(*b) {
                    send(*b, self.value(*a).t().dot(g), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone(), grads);
                if self.needs(*b) {
                    send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
            }
            Op::Scale(a, c) => send(*a, g * *c, grads),
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(value, |gi, &y| *gi *= y * (1.0 - y));
                send(*a, d, grads);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                d.zip_mut_with(value, |gi, &y| *gi *= 1.0 - y * y);
                send(*a, d, grads);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.needs(p) {
                        send(p, g.slice(s![.., col..col + w]).to_owned(), grads);
                    }
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.needs(p) {
                        send(p, g.slice(s![row..row + h, ..]).to_owned(), grads);
                    }
                    row += h;
                }
            }
            Op::Gather(src, rows) => {
                let mut d = Mat::zeros(self.value(*src).raw_dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                send(*src, d, grads);
            }
            Op::SegmentSum {
                src,
                segments,
                scale,
            } => {
                let mut d = Mat::zeros(self.value(*src).raw_dim());
                for (r, seg) in segments.iter().enumerate() {
                    let gr = g.row(r);
                    for &i in seg {
                        d.row_mut(i).scaled_add(*scale, &gr);
                    }
                }
                send(*src, d, grads);
            }
            Op::Overwrite { base, over, rows } => {
                if self.needs(*base) {
                    let mut d = g.clone();
                    for &r in rows {
                        d.row_mut(r).fill(0.0);
                    }
                    send(*base, d, grads);
                }
                if self.needs(*over) {
                    send(*over, g.select(Axis(0), rows), grads);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, spec, probs, g);
                send(*q, dq, grads);
                send(*k, dk, grads);
                send(*v, dv, grads);
            }
            Op::Pointer {
                query,
                keys,
                groups,
                clip,
                scale,
            } => {
                let (qm, km) = (self.value(*query), self.value(*keys));
                let mut dq = Mat::zeros(qm.raw_dim());
                let mut dk = Mat::zeros(km.raw_dim());
                for (b, grp) in groups.iter().enumerate() {
                    for (j, &kr) in grp.iter().enumerate() {
                        let t = value[[b, j]] / clip;
                        let dz = g[[b, j]] * clip * (1.0 - t * t) * scale;
                        if dz == 0.0 {
                            continue;
                        }
                        dq.row_mut(b).scaled_add(dz, &km.row(kr));
                        dk.row_mut(kr).scaled_add(dz, &qm.row(b));
                    }
                }
                send(*query, dq, grads);
                send(*keys, dk, grads);
            }
            Op::LogSoftmax { src, mask } => {
                let (rows, cols) = value.dim();
                let mut d = Mat::zeros((rows, cols));
                for r in 0..rows {
                    let m = &mask[r * cols..(r + 1) * cols];
                    let total: f64 = (0..cols).filter(|&c| m[c]).map(|c| g[[r, c]]).sum();
                    for c in (0..cols).filter(|&c| m[c]) {
                        d[[r, c]] = g[[r, c]] - value[[r, c]].exp() * total;
                    }
                }
                send(*src, d, grads);
            }
            Op::Pick { src, cols } => {
                let mut d = Mat::zeros(self.value(*src).raw_dim());
                for (b, &c) in cols.iter().enumerate() {
                    d[[b, c]] += g[[b, 0]];
                }
                send(*src, d, grads);
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &Mat,
    ) -> (Mat, Mat, Mat) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let width = qm.ncols();
        let dh = width / spec.heads;
        let (qs, ks, vs, gs) = (
            qm.as_slice().unwrap(),
            km.as_slice().unwrap(),
            vm.as_slice().unwrap(),
            g.as_slice().unwrap(),
        );
        let mut dq = Mat::zeros(qm.raw_dim());
        let mut dk = Mat::zeros(km.raw_dim());
        let mut dv = Mat::zeros(vm.raw_dim());
        {
            let (dqs, dks, dvs) = (
                dq.as_slice_mut().unwrap(),
                dk.as_slice_mut().unwrap(),
                dv.as_slice_mut().unwrap(),
            );
            let mut dp = Vec::new();
            let mut cursor = 0;
            for grp in &spec.groups {
                let nk = grp.keys.len();
                for h in 0..spec.heads {
                    let off = h * dh;
                    for &qr in &grp.queries {
                        let p = &probs[cursor..cursor + nk];
                        cursor += nk;
                        let grow = &gs[qr * width + off..qr * width + off + dh];
                        dp.clear();
                        let mut weighted = 0.0;
                        for (kj, &kr) in grp.keys.iter().enumerate() {
                            let vrow = &vs[kr * width + off..kr * width + off + dh];
                            let d = dot(grow, vrow);
                            weighted += p[kj] * d;
                            dp.push(d);
                            if p[kj] != 0.0 {
                                axpy(p[kj], grow, &mut dvs[kr * width + off..kr * width + off + dh]);
                            }
                        }
                        let qrow = &qs[qr * width + off..qr * width + off + dh];
                        for (kj, &kr) in grp.keys.iter().enumerate() {
                            let ds = p[kj] * (dp[kj] - weighted) * spec.scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &ks[kr * width + off..kr * width + off + dh];
                            axpy(ds, krow, &mut dqs[qr * width + off..qr * width + off + dh]);
                            axpy(ds, qrow, &mut dks[kr * width + off..kr * width + off + dh]);
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
