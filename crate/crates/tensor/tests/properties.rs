use bwarea_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-30.0f64..30.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn log_softmax_rows_normalize(x in matrix(6, 12)) {
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.log_softmax(v);
        let out = t.value(y);
        for r in 0..out.rows() {
            let s: f64 = out.row(r).iter().map(|z| z.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_softmax_rows_normalize(t_len in 1usize..7, vals in prop::collection::vec(-50.0f64..50.0, 49)) {
        let x = Tensor::new(vec![1, t_len, t_len], vals[..t_len * t_len].to_vec()).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.causal_softmax(v, 1.3).unwrap();
        let out = t.value(y).data();
        for i in 0..t_len {
            let s: f64 = out[i * t_len..(i + 1) * t_len].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stop_gradient_is_value_identity(x in matrix(5, 5)) {
        let mut t = Tape::new();
        let v = t.var(x.clone());
        let s = t.stop_gradient(v);
        prop_assert_eq!(t.value(s), &x);
        prop_assert!(!t.requires_grad(s));
    }

    #[test]
    fn gradients_are_finite_for_bounded_inputs(x in matrix(4, 6)) {
        let mut t = Tape::new();
        let v = t.var(x.clone());
        let rows = x.rows();
        let targets: Vec<usize> = (0..rows).map(|r| r % x.cols()).collect();
        let loss = t.softmax_cross_entropy(v, &targets, &vec![1.0; rows]).unwrap();
        t.backward(loss).unwrap();
        prop_assert!(t.grad(v).unwrap().iter().all(|g| g.is_finite()));
    }
}
