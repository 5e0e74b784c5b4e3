mod common;

use common::*;
use dynroute::autodiff::Tape;
use dynroute::instances::ProblemKind;
use dynroute::model::encoder::{
    encode, encode_tensor, initial_projection, integrate, spatial_attention, stack_inputs, static_projection,
    temporal_attention, Layout,
};
use dynroute::model::Model;
use dynroute::params::Gradients;
use ndarray::{s, Array2, Array3};

fn rows_of(m: &Array2<f64>) -> Rows {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Embeddings `(T*N) x hidden` fed straight into one layer.
fn hidden_input(t: usize, n: usize, hidden: usize, seed: u64) -> (Array2<f64>, Layout) {
    (random_mat(t * n, hidden, 1.0, seed), Layout::new(1, t, n))
}

#[test]
fn initial_projection_is_affine() {
    let mut model = tiny(ProblemKind::Tsp, 8, 2, 1, 1);
    let x = random_mat(6, 2, 1.0, 2);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let h = initial_projection(&mut tape, &model.store, &model.encoder, xv);
    let want = affine(&rows_of(&x), model.store.get(model.encoder.input_w), Some(model.store.get(model.encoder.input_b)));
    for (r, row) in want.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((tape.value(h)[[r, c]] - v).abs() < 1e-12);
        }
    }

    // Zero input and zero bias give zero; duplicated rows stay duplicated.
    model.store.get_mut(model.encoder.input_b).fill(0.0);
    let mut x = Array2::zeros((3, 2));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let h = initial_projection(&mut tape, &model.store, &model.encoder, xv);
    assert!(tape.value(h).iter().all(|&v| v == 0.0));
    x.row_mut(0).assign(&ndarray::arr1(&[0.3, 0.7]));
    x.row_mut(2).assign(&ndarray::arr1(&[0.3, 0.7]));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let h = initial_projection(&mut tape, &model.store, &model.encoder, xv);
    assert_eq!(tape.value(h).row(0), tape.value(h).row(2));
}

#[test]
fn spatial_attention_matches_reference() {
    let model = tiny(ProblemKind::Tsp, 8, 1, 1, 3);
    let l = &model.encoder.layers[0];
    let (x, layout) = hidden_input(2, 3, 8, 4);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = spatial_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, None).unwrap();
    let w = [model.store.get(l.spatial_q), model.store.get(l.spatial_k), model.store.get(l.spatial_v), model.store.get(l.spatial_out)];
    for t in 0..2 {
        let rows = rows_of(&x.slice(s![t * 3..(t + 1) * 3, ..]).to_owned());
        let (want, _) = reference_mha(&rows, w, 1, None);
        for i in 0..3 {
            for c in 0..8 {
                assert!((tape.value(out)[[layout.row(0, t, i), c]] - want[i][c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn multi_head_attention_matches_reference() {
    let model = tiny(ProblemKind::Tsp, 8, 4, 1, 5);
    let l = &model.encoder.layers[0];
    let (x, layout) = hidden_input(4, 3, 8, 6);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = temporal_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, &[]).unwrap();
    let w = [model.store.get(l.temporal_q), model.store.get(l.temporal_k), model.store.get(l.temporal_v), model.store.get(l.temporal_out)];
    for i in 0..3 {
        let series: Rows = (0..4).map(|t| x.row(layout.row(0, t, i)).to_vec()).collect();
        let (want, _) = reference_mha(&series, w, 4, None);
        for t in 0..4 {
            for c in 0..8 {
                assert!((tape.value(out)[[layout.row(0, t, i), c]] - want[t][c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_node_and_single_slice_attend_to_themselves() {
    let model = tiny(ProblemKind::Tsp, 4, 2, 1, 7);
    let l = &model.encoder.layers[0];
    let (x, layout) = hidden_input(1, 1, 4, 8);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sp = spatial_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, None).unwrap();
    let tp = temporal_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, &[]).unwrap();
    assert!(tape.attention_weights_before(sp).unwrap().iter().all(|&w| w == 1.0));
    let v_sp = affine(&affine(&rows_of(&x), model.store.get(l.spatial_v), None), model.store.get(l.spatial_out), None);
    let v_tp = affine(&affine(&rows_of(&x), model.store.get(l.temporal_v), None), model.store.get(l.temporal_out), None);
    for c in 0..4 {
        assert!((tape.value(sp)[[0, c]] - v_sp[0][c]).abs() < 1e-12);
        assert!((tape.value(tp)[[0, c]] - v_tp[0][c]).abs() < 1e-12);
    }
}

#[test]
fn identical_inputs_share_attention_evenly() {
    let model = tiny(ProblemKind::Tsp, 8, 2, 1, 9);
    let l = &model.encoder.layers[0];
    // Two nodes with identical features.
    let row = random_mat(1, 8, 1.0, 10);
    let x = ndarray::concatenate![ndarray::Axis(0), row, row];
    let layout = Layout::new(1, 1, 2);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = spatial_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, None).unwrap();
    assert!(tape.attention_weights_before(out).unwrap().iter().all(|&w| (w - 0.5).abs() < 1e-15));
    assert_eq!(tape.value(out).row(0), tape.value(out).row(1));

    // A node constant over time attends uniformly across slices.
    let x = ndarray::concatenate![ndarray::Axis(0), row, row, row];
    let layout = Layout::new(1, 3, 1);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = temporal_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, &[]).unwrap();
    assert!(tape.attention_weights_before(out).unwrap().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn attention_rows_are_normalized() {
    let model = tiny(ProblemKind::Tsp, 16, 4, 1, 11);
    let l = &model.encoder.layers[0];
    let (x, layout) = hidden_input(5, 7, 16, 12);
    let mut tape = Tape::new();
    let xv = tape.constant(x * 3.0);
    let sp = spatial_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, None).unwrap();
    for row in tape.attention_weights_before(sp).unwrap().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let tp = temporal_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, &[]).unwrap();
    for row in tape.attention_weights_before(tp).unwrap().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn adjacency_mask_blocks_pairs() {
    let model = tiny(ProblemKind::Tsp, 8, 2, 1, 13);
    let l = &model.encoder.layers[0];
    let (x, layout) = hidden_input(1, 3, 8, 14);
    // Path graph 0-1-2 with self loops.
    let adj = Array2::from_shape_fn((3, 3), |(i, j)| i.abs_diff(j) <= 1);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = spatial_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, Some(&adj)).unwrap();
    let w = tape.attention_weights_before(out).unwrap().to_vec();
    // head, query, key order: node 0 never sees node 2 and vice versa.
    for h in 0..2 {
        assert_eq!(w[h * 9 + 2], 0.0);
        assert_eq!(w[h * 9 + 6], 0.0);
    }
    let wts = [model.store.get(l.spatial_q), model.store.get(l.spatial_k), model.store.get(l.spatial_v), model.store.get(l.spatial_out)];
    let (want, _) = reference_mha(&rows_of(&x), wts, 2, Some(&adj));
    for i in 0..3 {
        for c in 0..8 {
            assert!((tape.value(out)[[i, c]] - want[i][c]).abs() < 1e-12);
        }
    }

    let mut isolated = adj.clone();
    isolated.row_mut(1).fill(false);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    assert!(spatial_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, Some(&isolated)).is_err());
}

#[test]
fn static_projection_is_a_per_row_affine_map() {
    let mut model = tiny(ProblemKind::Vrp, 4, 1, 1, 15);
    let l = model.encoder.layers[0].clone();
    let (x, layout) = hidden_input(3, 2, 4, 16);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    assert!(static_projection(&mut tape, &model.store, &l, xv, layout, &[]).is_none());
    let out = static_projection(&mut tape, &model.store, &l, xv, layout, &[1]).unwrap();
    let series: Rows = (0..3).map(|t| x.row(layout.row(0, t, 1)).to_vec()).collect();
    let want = affine(&series, model.store.get(l.static_w), Some(model.store.get(l.static_b)));
    for t in 0..3 {
        for c in 0..4 {
            assert!((tape.value(out)[[t, c]] - want[t][c]).abs() < 1e-12);
        }
    }

    *model.store.get_mut(l.static_w) = Array2::eye(4);
    model.store.get_mut(l.static_b).fill(0.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = static_projection(&mut tape, &model.store, &l, xv, layout, &[0]).unwrap();
    for t in 0..3 {
        assert_eq!(tape.value(out).row(t), x.row(layout.row(0, t, 0)));
    }
}

#[test]
fn integration_is_a_bounded_sigmoid() {
    let mut model = tiny(ProblemKind::Tsp, 4, 1, 1, 17);
    let l = model.encoder.layers[0].clone();
    let a = random_mat(5, 4, 3.0, 18);
    let b = random_mat(5, 4, 3.0, 19);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = integrate(&mut tape, &model.store, &l, av, bv);
    let cat: Rows = (0..5).map(|r| [a.row(r).to_vec(), b.row(r).to_vec()].concat()).collect();
    let want = affine(&cat, model.store.get(l.integrate_w), None);
    for r in 0..5 {
        for c in 0..4 {
            let v = tape.value(out)[[r, c]];
            assert!((v - sigmoid(want[r][c])).abs() < 1e-12);
            assert!(v > 0.0 && v < 1.0);
        }
    }
    model.store.get_mut(l.integrate_w).fill(0.0);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let out = integrate(&mut tape, &model.store, &l, av, bv);
    assert!(tape.value(out).iter().all(|&v| v == 0.5));
}

#[test]
fn full_encoder_matches_composed_reference() {
    for (kind, statics, seed) in [(ProblemKind::Tsp, vec![], 20), (ProblemKind::Vrp, vec![0], 21)] {
        let model = tiny(kind, 4, 1, 1, seed);
        let x = random_tensor(3, 4, model.config.input_dim(), seed + 100);
        let got = encode_tensor(&model, &x, &statics).unwrap();
        assert!(max_abs_diff(&got, &reference_encode(&model, &x, &statics)) < 1e-12);
    }
    let model = tiny(ProblemKind::Vrp, 8, 2, 3, 22);
    let x = random_tensor(5, 6, 3, 23);
    let got = encode_tensor(&model, &x, &[0]).unwrap();
    assert!(max_abs_diff(&got, &reference_encode(&model, &x, &[0])) < 1e-12);
    assert!(got.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn smallest_input_is_finite() {
    let model = tiny(ProblemKind::Tsp, 8, 2, 2, 24);
    let h = encode_tensor(&model, &random_tensor(1, 1, 2, 25), &[]).unwrap();
    assert_eq!(h.dim(), (1, 1, 8));
    assert!(h.iter().all(|v| v.is_finite()));
}

#[test]
fn encoder_is_permutation_equivariant() {
    let perm = [3, 0, 4, 1, 2];
    for (kind, statics) in [(ProblemKind::Tsp, vec![]), (ProblemKind::Vrp, vec![1])] {
        let model = tiny(kind, 16, 4, 3, 26);
        let x = random_tensor(6, 5, model.config.input_dim(), 27);
        let h = encode_tensor(&model, &x, &statics).unwrap();
        // Node k of the permuted input is node perm[k] of the original.
        let xp = Array3::from_shape_fn(x.dim(), |(t, k, d)| x[[t, perm[k], d]]);
        let sp: Vec<usize> = statics.iter().map(|&s| perm.iter().position(|&p| p == s).unwrap()).collect();
        let hp = encode_tensor(&model, &xp, &sp).unwrap();
        let back = Array3::from_shape_fn(h.dim(), |(t, k, c)| h[[t, perm[k], c]]);
        assert!(max_abs_diff(&hp, &back) < 1e-5);
    }
}

#[test]
fn spatial_output_depends_only_on_its_slice() {
    let model = tiny(ProblemKind::Tsp, 8, 2, 1, 28);
    let l = &model.encoder.layers[0];
    let (x, layout) = hidden_input(4, 3, 8, 29);
    let mut y = x.clone();
    for i in 0..3 {
        y.row_mut(layout.row(0, 2, i)).mapv_inplace(|v| v + 0.7);
    }
    let run = |x: Array2<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = spatial_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, None).unwrap();
        tape.value(out).clone()
    };
    let (a, b) = (run(x), run(y));
    for t in 0..4 {
        for i in 0..3 {
            let r = layout.row(0, t, i);
            assert_eq!(a.row(r) == b.row(r), t != 2);
        }
    }
}

#[test]
fn temporal_output_depends_only_on_its_node() {
    let model = tiny(ProblemKind::Tsp, 8, 2, 1, 30);
    let l = &model.encoder.layers[0];
    let (x, layout) = hidden_input(4, 3, 8, 31);
    let mut y = x.clone();
    for t in 0..4 {
        y.row_mut(layout.row(0, t, 1)).mapv_inplace(|v| v * 1.5);
    }
    let run = |x: Array2<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = temporal_attention(&mut tape, &model.store, l, &model.config.encoder, xv, layout, &[]).unwrap();
        tape.value(out).clone()
    };
    let (a, b) = (run(x), run(y));
    for t in 0..4 {
        for i in 0..3 {
            let r = layout.row(0, t, i);
            assert_eq!(a.row(r) == b.row(r), i != 1);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    for (kind, statics) in [(ProblemKind::Tsp, vec![]), (ProblemKind::Vrp, vec![0])] {
        let model = tiny(kind, 4, 2, 2, 32);
        let x = random_tensor(3, 3, model.config.input_dim(), 33);
        let (mat, layout) = stack_inputs(std::slice::from_ref(&x)).unwrap();
        let weight = random_mat(layout.rows(), 4, 1.0, 34);
        let loss = |m: &Model| -> f64 {
            let h = encode_tensor(m, &x, &statics).unwrap();
            h.iter().zip(weight.iter()).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let xv = tape.constant(mat);
        let h = encode(&mut tape, &model, xv, layout, &statics).unwrap();
        let mut grads = Gradients::zeros_like(&model.store);
        tape.backward_params(h, weight.clone(), &mut grads);

        let worst = fd_worst(&model, &grads, |name| name.starts_with("encoder."), loss);
        assert!(worst <= 1e-4, "{kind:?}: worst relative error {worst:e}");
    }
}
