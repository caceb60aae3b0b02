mod common;

use proptest::prelude::*;

use noiselab::tensor::{grad_check, Graph, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    let errors = common::op_gradient_errors(100, 11);
    let bad: Vec<_> = errors.iter().filter(|(_, &e)| !(e < 1e-4)).collect();
    assert!(bad.is_empty(), "ops over tolerance: {bad:?}");
}

#[test]
fn dropout_gradient_is_its_mask() {
    assert!(common::dropout_gradient_error(100, 3) < 1e-12);
}

#[test]
fn composed_finetune_objective_matches_differences() {
    for seed in [1, 2] {
        let e = common::composed_gradient_error(seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

#[test]
fn mean_of_squares_worked_example() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let m = g.mean(sq);
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

proptest! {
    #[test]
    fn weighted_sum_gradient_is_the_weights(data in prop::collection::vec(-5.0f64..5.0, 1..20), k in -3.0f64..3.0) {
        let n = data.len();
        let w: Vec<f64> = (0..n).map(|i| (i as f64 - 2.0) * k).collect();
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(data));
        let c = g.constant(Tensor::vector(w.clone()));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        prop_assert_eq!(g.grad(x).unwrap(), &w[..]);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls(data in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(data.clone()));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 4.0 * v).collect();
        prop_assert_eq!(g.grad(x).unwrap(), &want[..]);
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-20.0f64..20.0, 6)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, data).unwrap());
        let p = g.softmax(x, 1).unwrap();
        for row in g.data(p).chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_random_inputs_pass_grad_check(data in prop::collection::vec(-3.0f64..3.0, 8)) {
        let x = Tensor::matrix(2, 4, data).unwrap();
        let err = grad_check(|g, v| {
            let gm = g.constant(Tensor::vector(vec![1.0, 0.5, -0.7, 2.0]));
            let bt = g.constant(Tensor::vector(vec![0.1, 0.0, -0.3, 0.2]));
            let y = g.layer_norm(v, gm, bt)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }
}
