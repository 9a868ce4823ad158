//! Invariants of the public API under randomized inputs.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use proptest::prelude::*;
use tempo_ode::data::{
    generate_synthetic, normalize, split_dataset, SplitFractions, SyntheticSpec,
};
use tempo_ode::scaling::{scale_raw, CouplingMode, PairwiseMemory, ScaleInputs};
use tempo_ode::solver::{Integrator, SolverConfig};
use tempo_ode::tensor::{Tape, Tensor};
use tempo_ode::training::auc;

fn mode_of(m: u8) -> CouplingMode {
    [
        CouplingMode::Scalar,
        CouplingMode::Rank1,
        CouplingMode::Full,
    ][m as usize % 3]
}

#[derive(Debug)]
struct Case {
    w: Vec<f64>,
    k: Vec<f64>,
    mode: CouplingMode,
    alpha: f64,
    beta: f64,
    gamma: f64,
    t: f64,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..24, any::<u8>()).prop_flat_map(|(n, m)| {
        let mode = mode_of(m);
        let kn = match mode {
            CouplingMode::Scalar => 1,
            CouplingMode::Rank1 => n,
            CouplingMode::Full => n * n,
        };
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-2.0f64..2.0, kn),
            -3.0f64..3.0,
            -2.0f64..2.0,
            -4.0f64..4.0,
            -5.0f64..5.0,
        )
            .prop_map(move |(w, k, alpha, beta, gamma, t)| Case {
                w,
                k,
                mode,
                alpha,
                beta,
                gamma,
                t,
            })
    })
}

fn eval(c: &Case, w: &[f64], gamma: f64, memory: PairwiseMemory) -> Vec<f64> {
    let n = w.len();
    let k = match c.mode {
        CouplingMode::Scalar => Tensor::scalar(c.k[0]),
        CouplingMode::Rank1 => Tensor::vector(c.k.clone()),
        CouplingMode::Full => Tensor::matrix(n, n, c.k.clone()).unwrap(),
    };
    scale_raw(
        &Tape::no_grad(),
        ScaleInputs {
            base: &Tensor::vector(w.to_vec()),
            k: &k,
            mode: c.mode,
            alpha: &Tensor::scalar(c.alpha),
            beta: &Tensor::scalar(c.beta),
            gamma: &Tensor::scalar(gamma),
            t: &Tensor::scalar(c.t),
        },
        memory,
    )
    .unwrap()
    .to_vec()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scale_ignores_a_common_shift(c in case(), shift in -10.0f64..10.0) {
        let moved: Vec<f64> = c.w.iter().map(|w| w + shift).collect();
        prop_assert!(close(&eval(&c, &c.w, c.gamma, PairwiseMemory::Auto), &eval(&c, &moved, c.gamma, PairwiseMemory::Auto), 1e-12));
    }

    #[test]
    fn scale_is_periodic_in_the_phase(c in case(), turns in -3i32..3) {
        let g = c.gamma + TAU * turns as f64;
        prop_assert!(close(&eval(&c, &c.w, c.gamma, PairwiseMemory::Auto), &eval(&c, &c.w, g, PairwiseMemory::Auto), 1e-12));
    }

    #[test]
    fn scale_is_bounded_by_the_mean_coupling(c in case()) {
        let n = c.w.len();
        for (i, s) in eval(&c, &c.w, c.gamma, PairwiseMemory::Auto).iter().enumerate() {
            let bound = match c.mode {
                CouplingMode::Scalar => c.k[0].abs(),
                CouplingMode::Rank1 => c.k[i].abs(),
                CouplingMode::Full => c.k[i * n..(i + 1) * n].iter().map(|k| k.abs()).sum::<f64>() / n as f64,
            };
            prop_assert!(s.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn memory_strategies_agree(c in case()) {
        let want = eval(&c, &c.w, c.gamma, PairwiseMemory::Materialize);
        for memory in [PairwiseMemory::Stream, PairwiseMemory::Factored] {
            prop_assert!(close(&want, &eval(&c, &c.w, c.gamma, memory), 1e-12));
        }
    }

    #[test]
    fn rk4_tracks_linear_decay(lambda in -2.0f64..2.0, h0 in -5.0f64..5.0, span in 0.1f64..3.0) {
        let cfg = SolverConfig::rk4(0.01);
        let mut rhs = |tape: &Tape, _: f64, h: &Tensor| tape.scale(h, lambda);
        let mut integ = Integrator::new(&cfg).unwrap();
        let out = integ.advance(&Tape::no_grad(), &mut rhs, &Tensor::vector(vec![h0]), 0.0, span).unwrap();
        let exact = h0 * (lambda * span).exp();
        prop_assert!((out.data()[0] - exact).abs() <= 1e-8 * exact.abs().max(1.0));
    }

    #[test]
    fn forward_then_backward_returns_home(h0 in -2.0f64..2.0, a in -1.0f64..1.0, b in 1.0f64..2.0) {
        let cfg = SolverConfig::dopri5(1e-10, 1e-10);
        let mut rhs = |tape: &Tape, t: f64, h: &Tensor| tape.scale(&tape.sin(h)?, t.cos());
        let tape = Tape::no_grad();
        let mut integ = Integrator::new(&cfg).unwrap();
        let there = integ.advance(&tape, &mut rhs, &Tensor::vector(vec![h0]), a, b).unwrap();
        let back = integ.advance(&tape, &mut rhs, &there, b, a).unwrap();
        prop_assert!((back.data()[0] - h0).abs() <= 1e-7);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(scores in prop::collection::vec(-5.0f64..5.0, 2..40), flips in prop::collection::vec(any::<bool>(), 40)) {
        let mut labels: Vec<bool> = flips[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let squashed: Vec<f64> = scores.iter().map(|s| s.tanh() * 3.0 + 1.0).collect();
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - auc(&squashed, &labels).unwrap()).abs() <= 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((a + auc(&scores, &flipped).unwrap() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn split_partitions_samples_and_standardizes_training_cells(n in 5usize..40, seed in any::<u64>(), val in 0.0f64..0.3) {
        let spec = SyntheticSpec { n_samples: n, grid_size: 20, sparsity: 0.5, seed, ..SyntheticSpec::default() };
        let all = generate_synthetic(&spec).unwrap();
        let fractions = SplitFractions { train: 0.6, validation: val, test: 0.4 - val };
        let split = split_dataset(all.clone(), fractions, seed).unwrap();
        let ids = |set: &[tempo_ode::data::IrregularSeries]| set.iter().map(|s| s.id().to_string()).collect::<Vec<_>>();
        let mut seen: Vec<String> = [ids(&split.train), ids(&split.validation), ids(&split.test)].concat();
        let unique: BTreeSet<String> = seen.iter().cloned().collect();
        prop_assert_eq!(unique.len(), seen.len());
        seen.sort();
        let mut want = ids(&all);
        want.sort();
        prop_assert_eq!(seen, want);

        let norm = normalize(&split).unwrap();
        let observed: Vec<f64> = norm.train.iter().flat_map(|s| {
            s.values().iter().zip(s.mask()).filter(|(_, &m)| m).map(|(&v, _)| v).collect::<Vec<_>>()
        }).collect();
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        prop_assert!(mean.abs() <= 1e-9);
        for (s, raw) in norm.test.iter().zip(&split.test) {
            let back = norm.stats.denormalize(s).unwrap();
            for c in 0..raw.values().len() {
                if raw.mask()[c] || raw.heldout()[c] {
                    prop_assert!((back.values()[c] - raw.values()[c]).abs() <= 1e-9);
                }
            }
        }
    }
}
