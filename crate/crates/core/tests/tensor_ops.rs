use contamlab::tensor::{Tape, Tensor, IGNORE_INDEX};
use contamlab::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

#[test]
fn matmul_matches_triple_loop() {
    let mut tape = Tape::<f64>::new();
    let a: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
    let b: Vec<f64> = (0..4 * 5).map(|i| (i as f64 * 0.11).cos()).collect();
    let av = tape.constant(t(&[2, 3, 4], &a));
    let bv = tape.constant(t(&[4, 5], &b));
    let c = tape.matmul(av, bv).unwrap();
    assert_eq!(tape.value(c).shape(), [2, 3, 5]);
    let want = naive_matmul(&a, &b, 6, 4, 5);
    for (x, y) in tape.value(c).data().iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }

    let b2: Vec<f64> = (0..2 * 4 * 5).map(|i| i as f64 * 0.01).collect();
    let bv2 = tape.constant(t(&[2, 4, 5], &b2));
    let c2 = tape.matmul(av, bv2).unwrap();
    for batch in 0..2 {
        let want = naive_matmul(&a[batch * 12..(batch + 1) * 12], &b2[batch * 20..(batch + 1) * 20], 3, 4, 5);
        let got = &tape.value(c2).data()[batch * 15..(batch + 1) * 15];
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 2]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    assert!(tape.slice(a, 1, 2, 5).is_err());
    assert!(tape.reshape(a, &[5]).is_err());
    assert!(Tensor::<f64>::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn foreign_variables_and_non_scalar_losses() {
    let mut t1 = Tape::<f64>::new();
    let mut t2 = Tape::<f64>::new();
    let a = t1.param(Tensor::zeros(vec![2]));
    let b = t2.param(Tensor::zeros(vec![2]));
    assert!(matches!(t1.add(a, b), Err(Error::ForeignVar)));
    assert!(matches!(t1.backward(a), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_are_caught() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[1], &[f64::MAX]));
    assert!(matches!(tape.mul(a, a), Err(Error::NonFinite { .. })));
}

#[test]
fn softmax_rows_are_distributions() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1000.0, 1000.0, -1000.0]));
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
    assert!((v[3] - 0.5).abs() < 1e-12 && v[5] < 1e-300);
    let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
    let z: f64 = e.iter().sum();
    assert!((v[2] - e[2] / z).abs() < 1e-12);
}

#[test]
fn layer_norm_standardizes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let g = tape.constant(t(&[4], &[1.0; 4]));
    let b = tape.constant(t(&[4], &[0.0; 4]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let v = tape.value(y).data();
    let mean: f64 = v.iter().sum::<f64>() / 4.0;
    let var: f64 = v.iter().map(|x| x * x).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-9);
}

#[test]
fn cross_entropy_ignores_masked_rows() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(t(&[3, 2], &[0.0, 0.0, 5.0, 0.0, 1.0, 2.0]));
    let loss = tape.cross_entropy(logits, &[0, IGNORE_INDEX, 1], IGNORE_INDEX).unwrap();
    let want = (2f64.ln() + (1.0 + (-1f64).exp()).ln()) / 2.0;
    assert!((tape.value(loss).item() - want).abs() < 1e-12);
    let none = tape.cross_entropy(logits, &[IGNORE_INDEX; 3], IGNORE_INDEX).unwrap();
    assert_eq!(tape.value(none).item(), 0.0);
    assert!(tape.cross_entropy(logits, &[0, 2, 1], IGNORE_INDEX).is_err());
}

#[test]
fn gather_accumulates_repeated_rows() {
    let mut tape = Tape::<f64>::new();
    let table = tape.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let rows = tape.gather(table, &[2, 0, 2], &[3]).unwrap();
    assert_eq!(tape.value(rows).data(), [5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let s = tape.sum(rows).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(table).unwrap().data(), [1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn unused_parameters_get_zero_gradients() {
    let mut tape = Tape::<f64>::new();
    let used = tape.param(t(&[2], &[1.0, 2.0]));
    let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.sum(used).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), [0.0; 3]);
}

#[test]
fn dropout_is_identity_at_eval_and_scaled_in_training() {
    let mut tape = Tape::<f64>::with_seed(3);
    let x = tape.constant(Tensor::full(vec![1000], 1.0));
    let eval = tape.dropout(x, 0.5, false).unwrap();
    assert_eq!(tape.value(eval).data(), tape.value(x).data());
    let train = tape.dropout(x, 0.5, true).unwrap();
    let v = tape.value(train).data();
    assert!(v.iter().all(|&y| y == 0.0 || y == 2.0));
    let kept = v.iter().filter(|&&y| y > 0.0).count();
    assert!((400..600).contains(&kept));
}

proptest! {
    #[test]
    fn concat_then_slice_round_trips(a in prop::collection::vec(-10.0f64..10.0, 6), b in prop::collection::vec(-10.0f64..10.0, 4)) {
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(t(&[2, 3], &a));
        let bv = tape.constant(t(&[2, 2], &b));
        let c = tape.concat(&[av, bv], 1).unwrap();
        prop_assert_eq!(tape.value(c).shape(), &[2, 5]);
        let back_a = tape.slice(c, 1, 0, 3).unwrap();
        let back_b = tape.slice(c, 1, 3, 5).unwrap();
        prop_assert_eq!(tape.value(back_a).data(), &a[..]);
        prop_assert_eq!(tape.value(back_b).data(), &b[..]);
    }

    #[test]
    fn transpose_is_an_involution(a in prop::collection::vec(-10.0f64..10.0, 24)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3, 4], &a));
        let y = tape.transpose(x).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[2, 4, 3]);
        let z = tape.transpose(y).unwrap();
        prop_assert_eq!(tape.value(z).data(), &a[..]);
    }
}
