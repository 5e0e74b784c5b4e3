//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use dynroute::instances::ProblemKind;
use dynroute::model::encoder::EncoderConfig;
use dynroute::model::{Model, ModelConfig};
use dynroute::params::Gradients;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-scale..scale))
}

pub fn random_tensor(t: usize, n: usize, d: usize, seed: u64) -> Array3<f64> {
    let mut r = rng(seed);
    Array3::from_shape_fn((t, n, d), |_| r.random_range(0.0..1.0))
}

/// `rows · w (+ b)` with explicit loops.
pub fn affine(rows: &[Vec<f64>], w: &Array2<f64>, b: Option<&Array2<f64>>) -> Rows {
    rows.iter()
        .map(|x| {
            (0..w.ncols())
                .map(|c| {
                    let mut s = b.map_or(0.0, |b| b[[0, c]]);
                    for (k, xv) in x.iter().enumerate() {
                        s += xv * w[[k, c]];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| if s.is_finite() { (s - max).exp() } else { 0.0 }).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

/// Multi-head self-attention over `rows` with scale `1/sqrt(head width)`.
/// Returns the combined output and the weights `[head][query][key]`.
pub fn reference_mha(
    rows: &[Vec<f64>],
    w: [&Array2<f64>; 4],
    heads: usize,
    mask: Option<&Array2<bool>>,
) -> (Rows, Vec<Rows>) {
    let [wq, wk, wv, wo] = w;
    let (q, k, v) = (affine(rows, wq, None), affine(rows, wk, None), affine(rows, wv, None));
    let width = wq.ncols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut cat = vec![vec![0.0; width]; rows.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut hw = Vec::new();
        for i in 0..rows.len() {
            let scores: Vec<f64> = (0..rows.len())
                .map(|j| {
                    if mask.is_some_and(|m| !m[[i, j]]) {
                        return f64::NEG_INFINITY;
                    }
                    scale * cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>()
                })
                .collect();
            let a = softmax(&scores);
            for c in cols.clone() {
                cat[i][c] = (0..rows.len()).map(|j| a[j] * v[j][c]).sum();
            }
            hw.push(a);
        }
        weights.push(hw);
    }
    (affine(&cat, wo, None), weights)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The encoder composed from the reference pieces above.
pub fn reference_encode(model: &Model, x: &Array3<f64>, static_nodes: &[usize]) -> Array3<f64> {
    let s = &model.store;
    let p = &model.encoder;
    let heads = model.config.encoder.num_heads;
    let (t_len, n, _) = x.dim();
    let hd = model.hidden_dim();
    // h[t][i] rows
    let mut h: Vec<Rows> = (0..t_len)
        .map(|t| {
            let rows: Rows = (0..n).map(|i| x.slice(ndarray::s![t, i, ..]).to_vec()).collect();
            affine(&rows, s.get(p.input_w), Some(s.get(p.input_b)))
        })
        .collect();
    for l in &p.layers {
        let hs: Vec<Rows> = (0..t_len)
            .map(|t| {
                reference_mha(
                    &h[t],
                    [s.get(l.spatial_q), s.get(l.spatial_k), s.get(l.spatial_v), s.get(l.spatial_out)],
                    heads,
                    None,
                )
                .0
            })
            .collect();
        let mut htf = vec![vec![vec![0.0; hd]; n]; t_len];
        for i in 0..n {
            let series: Rows = (0..t_len).map(|t| h[t][i].clone()).collect();
            let out = if static_nodes.contains(&i) {
                affine(&series, s.get(l.static_w), Some(s.get(l.static_b)))
            } else {
                reference_mha(
                    &series,
                    [s.get(l.temporal_q), s.get(l.temporal_k), s.get(l.temporal_v), s.get(l.temporal_out)],
                    heads,
                    None,
                )
                .0
            };
            for t in 0..t_len {
                htf[t][i] = out[t].clone();
            }
        }
        h = (0..t_len)
            .map(|t| {
                let cat: Rows = (0..n).map(|i| [hs[t][i].clone(), htf[t][i].clone()].concat()).collect();
                affine(&cat, s.get(l.integrate_w), None)
                    .into_iter()
                    .map(|r| r.into_iter().map(sigmoid).collect())
                    .collect()
            })
            .collect();
    }
    Array3::from_shape_fn((t_len, n, hd), |(t, i, c)| h[t][i][c])
}

pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst relative error between analytic and central-difference gradients.
/// Gradient-check error. The floor of 1e-4 keeps central-difference
/// round-off (about 1e-9 absolute at step 1e-6) from dominating on
/// near-zero entries.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Route length straight from the feature tensor: the move out of position
/// `k` uses the origin at time `k` and the target at time `k + 1`, times
/// clamped to the last slice; `closed` adds the return to the first node.
pub fn reference_cost(features: &Array3<f64>, order: &[usize], closed: bool) -> f64 {
    let last_t = features.dim().0 - 1;
    let at = |node: usize, t: usize| {
        let t = t.min(last_t);
        (features[[t, node, 0]], features[[t, node, 1]])
    };
    let mut legs: Vec<(usize, usize)> = order.windows(2).map(|w| (w[0], w[1])).collect();
    if closed && order.len() > 1 {
        legs.push((order[order.len() - 1], order[0]));
    }
    let mut total = 0.0;
    for (k, (a, b)) in legs.into_iter().enumerate() {
        let (x0, y0) = at(a, k);
        let (x1, y1) = at(b, k + 1);
        total += ((x0 - x1) * (x0 - x1) + (y0 - y1) * (y0 - y1)).sqrt();
    }
    total
}

/// Worst relative error between `grads` and central differences of `f`
/// over every parameter whose name passes `select`.
pub fn fd_worst(model: &Model, grads: &Gradients, select: impl Fn(&str) -> bool, f: impl Fn(&Model) -> f64) -> f64 {
    let eps = 1e-6;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for id in model.store.ids().filter(|&id| select(model.store.name(id))) {
        for idx in 0..model.store.get(id).len() {
            let orig = model.store.get(id).as_slice().unwrap()[idx];
            probe.store.get_mut(id).as_slice_mut().unwrap()[idx] = orig + eps;
            let up = f(&probe);
            probe.store.get_mut(id).as_slice_mut().unwrap()[idx] = orig - eps;
            let down = f(&probe);
            probe.store.get_mut(id).as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grads.get(id).as_slice().unwrap()[idx], numeric));
        }
    }
    worst
}

pub fn tiny(kind: ProblemKind, hidden: usize, heads: usize, layers: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(kind);
    cfg.encoder = EncoderConfig {
        hidden_dim: hidden,
        num_layers: layers,
        num_heads: heads,
    };
    Model::new(cfg, seed).unwrap()
}
