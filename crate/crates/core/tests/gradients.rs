mod support;

use proptest::prelude::*;

use prunebench::autograd::Tape;
use prunebench::model::{attach_adapters, freeze_blocks, Model, TrainabilityConfig};
use prunebench::ops::ConvGeometry;
use support::*;

#[test]
fn conv_matches_naive_loops() {
    let x = uniform(&[2, 3, 7, 6], 1, -1.0, 1.0);
    let w = uniform(&[4, 3, 3, 3], 2, -1.0, 1.0);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let y = tape.conv2d(xv, wv, None, ConvGeometry::new(3, 4, 3, stride, pad)).unwrap();
        let (expected, _) = naive_conv(&x, &w, stride, pad);
        assert!(tape.value(y).max_abs_diff(&expected) <= 1e-12);
    }
}

#[test]
fn per_op_gradients() {
    for (name, inputs, f) in &op_cases() {
        let err = op_gradcheck(inputs, f.as_ref());
        assert!(err <= GRAD_REL_TOL, "{name}: {err:e}");
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    assert!(op_gradcheck(&[relu_input()], &|t, v| t.relu(v[0])) <= GRAD_REL_TOL);
}

#[test]
fn network_gradients_under_every_trainability() {
    let model = Model::build(&tiny_spec(), 0).unwrap();
    let x = inputs_away_from_kinks(&model, 2);
    let y = [0, 2];
    let (adapted, adapter_train) = attach_adapters(&model).unwrap();
    let configs = [
        (&model, TrainabilityConfig::full(&model)),
        (&model, freeze_blocks(&model, 2).unwrap()),
        (&adapted, adapter_train),
    ];
    for (m, train) in configs {
        let (err, margin, largest) = model_gradcheck(m, &train, &x, &y, None);
        assert!(margin >= KINK_MARGIN, "input too close to a ReLU kink: {margin:e}");
        assert!(largest > 1e-3, "gradients vanish: {largest:e}");
        assert!(err <= GRAD_REL_TOL, "{err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradients_on_random_shapes(
        n in 1usize..3, c_in in 1usize..4, c_out in 1usize..4, size in 3usize..7,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in 0u64..1000,
    ) {
        let pad = k / 2;
        let geom = ConvGeometry::new(c_in, c_out, k, stride, pad);
        let x = uniform(&[n, c_in, size, size], seed, -1.0, 1.0);
        let w = uniform(&[c_out, c_in, k, k], seed + 1, -1.0, 1.0);
        let err = op_gradcheck(&[x, w], &move |t, v| t.conv2d(v[0], v[1], None, geom).unwrap());
        prop_assert!(err <= GRAD_REL_TOL, "{err:e}");
    }

    #[test]
    fn conv_matches_naive_on_random_shapes(
        c_in in 1usize..4, c_out in 1usize..5, size in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in 0u64..1000,
    ) {
        let pad = k / 2;
        let x = uniform(&[2, c_in, size, size], seed, -1.0, 1.0);
        let w = uniform(&[c_out, c_in, k, k], seed + 1, -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let y = tape.conv2d(xv, wv, None, ConvGeometry::new(c_in, c_out, k, stride, pad)).unwrap();
        tape.label(y, "conv");
        let (expected, count) = naive_conv(&x, &w, stride, pad);
        prop_assert!(tape.value(y).max_abs_diff(&expected) <= 1e-12);
        prop_assert_eq!(tape.total_flops().forward, count);
    }
}
