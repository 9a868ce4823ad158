use std::f64::consts::FRAC_PI_2;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::{analytic_grads, max_fd_error};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn elementwise_examples() {
    let t = Tape::no_grad();
    let s = t.sin(&Tensor::vector(vec![0.0, FRAC_PI_2])).unwrap();
    assert_eq!(s.data(), &[0.0, 1.0]);
    assert_eq!(t.tanh(&Tensor::vector(vec![0.0])).unwrap().data(), &[0.0]);
    let sum = t
        .add(
            &Tensor::vector(vec![1.0, 2.0]),
            &Tensor::vector(vec![3.0, 4.0]),
        )
        .unwrap();
    assert_eq!(sum.data(), &[4.0, 6.0]);
}

#[test]
fn broadcast_rules() {
    let t = Tape::no_grad();
    let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let row = Tensor::vector(vec![10.0, 20.0]);
    assert_eq!(t.add(&m, &row).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
    assert_eq!(
        t.mul(&Tensor::scalar(2.0), &m).unwrap().data(),
        &[2.0, 4.0, 6.0, 8.0]
    );
    let bad = t.add(&m, &Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(bad, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn division_by_zero_is_non_finite() {
    let t = Tape::no_grad();
    let r = t.div(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0]));
    assert!(matches!(r, Err(Error::NonFinite("div"))));
}

#[test]
fn matmul_examples() {
    let t = Tape::no_grad();
    let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(t.matmul(&eye, &m).unwrap(), m);
    let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
    let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
    assert_eq!(t.matmul(&a, &b).unwrap().data(), &[11.0]);
    assert!(matches!(t.matmul(&a, &a), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_matches_naive_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let t = Tape::no_grad();
    let got = t
        .matmul(
            &Tensor::matrix(3, 4, a.clone()).unwrap(),
            &Tensor::matrix(4, 2, b.clone()).unwrap(),
        )
        .unwrap();
    let want = naive_matmul(&a, &b, 3, 4, 2);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn reduce_examples() {
    let t = Tape::no_grad();
    assert_eq!(
        t.sum(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap().item(),
        6.0
    );
    let m = Tensor::matrix(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap();
    let mean0 = t.reduce(ReduceOp::Mean, &m, Some(0)).unwrap();
    assert_eq!(mean0.data(), &[2.0, 4.0]);
    assert_eq!(
        t.max(&Tensor::vector(vec![-1.0, -5.0])).unwrap().item(),
        -1.0
    );
    assert!(matches!(
        t.sum(&Tensor::vector(vec![])),
        Err(Error::EmptyReduction)
    ));
    let empty_axis = Tensor::new(vec![2, 0], vec![]).unwrap();
    assert!(matches!(
        t.sum_axis(&empty_axis, 1),
        Err(Error::EmptyReduction)
    ));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let w = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
    let root = tape.sum(&tape.mul(&w, &w).unwrap()).unwrap();
    assert_eq!(tape.backward(&root).unwrap().wrt(&w).data(), &[2.0, 4.0]);

    let tape = Tape::new();
    let w = tape.leaf(&Tensor::scalar(0.0));
    let root = tape.sin(&w).unwrap();
    assert_eq!(tape.backward(&root).unwrap().wrt(&w).data(), &[1.0]);
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let w = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(&w), Err(Error::NotScalar(_))));
    assert!(matches!(
        tape.backward(&Tensor::scalar(1.0)),
        Err(Error::NotTracked)
    ));
    let other = Tape::new();
    let x = other.leaf(&Tensor::scalar(1.0));
    assert!(matches!(tape.backward(&x), Err(Error::NotTracked)));
}

#[test]
fn backward_is_repeatable() {
    let tape = Tape::new();
    let w = tape.leaf(&Tensor::vector(vec![0.3, -0.7]));
    let y = tape
        .tanh(&tape.mul(&w, &tape.sin(&w).unwrap()).unwrap())
        .unwrap();
    let root = tape.sum(&y).unwrap();
    let g1 = tape.backward(&root).unwrap().wrt(&w);
    let g2 = tape.backward(&root).unwrap().wrt(&w);
    assert_eq!(g1, g2);
}

#[test]
fn nodes_reference_earlier_nodes() {
    // the reverse sweep relies on topological insertion order
    let tape = Tape::new();
    let a = tape.leaf(&Tensor::vector(vec![1.0]));
    let b = tape.exp(&a).unwrap();
    let c = tape.mul(&b, &a).unwrap();
    assert!(a.node().unwrap().index < b.node().unwrap().index);
    assert!(b.node().unwrap().index < c.node().unwrap().index);
}

#[test]
fn parameters_are_shared_leaves_and_unreached_get_zero() {
    let mut used = Parameter::new("used", Tensor::vector(vec![3.0]));
    let mut unused = Parameter::new("unused", Tensor::vector(vec![5.0]));
    unused.grad_mut()[0] = 9.0;
    let tape = Tape::new();
    let a = tape.param(&used);
    let b = tape.param(&used);
    let _ = tape.param(&unused);
    let root = tape.sum(&tape.mul(&a, &b).unwrap()).unwrap();
    let grads = tape.backward(&root).unwrap();
    grads.apply_to([&mut used, &mut unused]);
    assert_eq!(used.grad().data(), &[6.0]);
    assert_eq!(unused.grad().data(), &[0.0]);
}

#[test]
fn no_grad_tape_records_nothing() {
    let tape = Tape::no_grad();
    let w = tape.leaf(&Tensor::vector(vec![1.0]));
    let y = tape.sin(&w).unwrap();
    assert!(!y.is_tracked());
    assert!(tape.is_empty());
}

fn composite(tape: &Tape, x: &[Tensor]) -> Result<Tensor> {
    // exercises every op with a backward rule
    let (a, b, m) = (&x[0], &x[1], &x[2]);
    let u = tape.mul(&tape.sin(a)?, &tape.tanh(b)?)?;
    let v = tape.div(
        &tape.sigmoid(&u)?,
        &tape.offset(&tape.exp(&tape.scale(b, 0.3)?)?, 1.0)?,
    )?;
    let w = tape.sub(&tape.softplus(&v)?, &tape.neg(&tape.cos(a)?)?)?;
    let l = tape.ln(&tape.offset(&tape.square(&w)?, 0.5)?)?;
    let row = tape.reshape(&l, vec![1, 3])?;
    let mm = tape.matmul(&row, m)?;
    let biased = tape.add(&mm, &tape.reshape(a, vec![3])?)?;
    let mx = tape.max(&biased)?;
    let mean = tape.reduce(ReduceOp::Mean, &tape.reshape(&biased, vec![1, 3])?, Some(1))?;
    tape.add(&tape.sum(&mean)?, &tape.scale(&mx, 0.5)?)
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let inputs = vec![
            Tensor::vector(draw(3)),
            Tensor::vector(draw(3)),
            Tensor::matrix(3, 3, draw(9)).unwrap(),
        ];
        let err = max_fd_error(&composite, &inputs, 1e-6, 1e-9);
        assert!(err < 1e-5, "relative error {err}");
    }
}

#[test]
fn backward_is_linear() {
    let f = |tape: &Tape, x: &[Tensor]| -> Result<Tensor> {
        tape.sum(&tape.tanh(&tape.mul(&x[0], &x[0])?)?)
    };
    let g = |tape: &Tape, x: &[Tensor]| -> Result<Tensor> { tape.sum(&tape.sin(&x[0])?) };
    let (ca, cb) = (1.7, -0.4);
    let combo = move |tape: &Tape, x: &[Tensor]| -> Result<Tensor> {
        let fa = tape.scale(&f(tape, x)?, ca)?;
        let gb = tape.scale(&g(tape, x)?, cb)?;
        tape.add(&fa, &gb)
    };
    let x = vec![Tensor::vector(vec![0.2, -1.1, 1.9])];
    let gf = &analytic_grads(&f, &x)[0];
    let gg = &analytic_grads(&g, &x)[0];
    let gc = &analytic_grads(&combo, &x)[0];
    for k in 0..3 {
        assert!((gc[k] - (ca * gf[k] + cb * gg[k])).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_composite_fd(xs in proptest::collection::vec(-2.0f64..2.0, 15)) {
        let inputs = vec![
            Tensor::vector(xs[0..3].to_vec()),
            Tensor::vector(xs[3..6].to_vec()),
            Tensor::matrix(3, 3, xs[6..15].to_vec()).unwrap(),
        ];
        let err = max_fd_error(&composite, &inputs, 1e-6, 1e-9);
        prop_assert!(err < 1e-5, "relative error {}", err);
    }

    #[test]
    fn prop_shape_invariant(rows in 1usize..5, cols in 1usize..5) {
        let t = Tensor::zeros(&[rows, cols]);
        prop_assert_eq!(t.numel(), rows * cols);
        let tape = Tape::no_grad();
        let s = tape.sum_axis(&t, 0).unwrap();
        prop_assert_eq!(s.shape(), &[cols][..]);
    }
}
