use rand::SeedableRng;

use super::fit::batch_loss;
use super::*;
use crate::data::{
    batch, generate_synthetic, split_dataset, IrregularSeries, Label, NormStats, SplitFractions,
    SyntheticSpec,
};
use crate::error::Error;
use crate::models::{LatentOdeModel, ModelConfig};
use crate::seed::RunRng;
use crate::solver::SolverConfig;
use crate::tensor::{Parameterized, Tape, Tensor};
use crate::testutil::param_fd;

fn solver() -> SolverConfig {
    SolverConfig::rk4(0.1)
}

fn tiny_data(n: usize) -> Vec<IrregularSeries> {
    let spec = SyntheticSpec {
        n_samples: n,
        grid_size: 20,
        sparsity: 0.3,
        seed: 4,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).unwrap()
}

fn tiny_model(temporal: bool) -> LatentOdeModel {
    let cfg = ModelConfig {
        latent: 3,
        gru_units: 4,
        ode_units: 4,
        ode_layers: 2,
        temporal,
        ..ModelConfig::default()
    };
    LatentOdeModel::new(&cfg, 2).unwrap()
}

fn values(model: &LatentOdeModel) -> Vec<Vec<f64>> {
    model.params().iter().map(|p| p.value().to_vec()).collect()
}

#[test]
fn zero_lr_keeps_parameters_and_is_repeatable() {
    let data = tiny_data(4);
    let mut model = tiny_model(true);
    let before = values(&model);
    let cfg = TrainingConfig {
        lr: 0.0,
        batch_size: 2,
        ..TrainingConfig::default()
    };
    let mut opt = AdamaxState::new(0.0, 0.999);
    let a = train_epoch(
        &mut model,
        &data,
        &Task::Reconstruction,
        &cfg,
        &solver(),
        &mut opt,
        3,
    )
    .unwrap();
    let b = train_epoch(
        &mut model,
        &data,
        &Task::Reconstruction,
        &cfg,
        &solver(),
        &mut opt,
        3,
    )
    .unwrap();
    assert!(a.is_finite());
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(values(&model), before);
    assert_eq!(opt.step, 4);
}

#[test]
fn loss_decreases_on_a_tiny_set() {
    let data = tiny_data(4);
    let mut model = tiny_model(true);
    let cfg = TrainingConfig {
        lr: 0.02,
        batch_size: 4,
        loss: LossSpec {
            kind: LossKind::MaskedMse,
            ..LossSpec::default()
        },
        ..TrainingConfig::default()
    };
    let mut opt = AdamaxState::new(cfg.lr, cfg.decay);
    let losses: Vec<f64> = (0..10)
        .map(|e| {
            train_epoch(
                &mut model,
                &data,
                &Task::Reconstruction,
                &cfg,
                &solver(),
                &mut opt,
                e,
            )
            .unwrap()
        })
        .collect();
    assert!(losses[9] < losses[0], "{losses:?}");
}

#[test]
fn heldout_values_never_reach_the_loss() {
    let data = tiny_data(3);
    let model = tiny_model(true);
    let b = batch(&data, &[0, 1, 2]).unwrap();
    let scrambled = b.map_heldout(|v| -3.0 * v + 17.0);
    let zeroed = b.map_heldout(|_| 0.0);
    assert_ne!(b, scrambled);
    for kind in [LossKind::Elbo, LossKind::MaskedMse, LossKind::GaussianNll] {
        let spec = LossSpec {
            kind,
            ..LossSpec::default()
        };
        let loss_of = |batch: &crate::data::Batch| {
            let mut rng = RunRng::seed_from_u64(9);
            batch_loss(
                &model,
                &Tape::new(),
                batch,
                &Task::Reconstruction,
                &spec,
                20,
                &solver(),
                &mut rng,
            )
            .unwrap()
            .item()
            .to_bits()
        };
        assert_eq!(loss_of(&b), loss_of(&scrambled));
        assert_eq!(loss_of(&b), loss_of(&zeroed));
    }
}

#[test]
fn elbo_gradients_match_finite_differences() {
    // latent 3, two features, five time points
    let cfg = ModelConfig {
        n_features: 2,
        latent: 3,
        gru_units: 3,
        ode_units: 3,
        ode_layers: 2,
        ..ModelConfig::default()
    };
    let mut model = LatentOdeModel::new(&cfg, 8).unwrap();
    let s = IrregularSeries::new(
        "e",
        vec![0.0, 0.2, 0.45, 0.7, 1.0],
        2,
        vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.0, 0.1, 0.9, -0.2, 0.3],
        vec![
            true, true, true, false, false, true, true, true, false, false,
        ],
        vec![
            false, false, false, true, true, false, false, false, true, true,
        ],
        None,
    )
    .unwrap();
    let b = batch(&[s], &[0]).unwrap();
    let spec = LossSpec::default();
    let loss = |m: &LatentOdeModel, tape: &Tape| {
        let mut rng = RunRng::seed_from_u64(1);
        batch_loss(
            m,
            tape,
            &b,
            &Task::Reconstruction,
            &spec,
            5,
            &SolverConfig::rk4(0.25),
            &mut rng,
        )
    };
    let checks = param_fd(&mut model, &loss, 1e-6);
    // the difference quotient itself carries rounding noise of about |f|·2⁻⁵²/ε;
    // mismatches below a generous multiple of that are not informative
    let f = loss(&model, &Tape::no_grad()).unwrap().item();
    let noise = 16.0 * f.abs() * f64::EPSILON / 1e-6;
    let mut worst = (0.0f64, String::new());
    for (name, a, n) in &checks {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if (a - n).abs() > noise && err > worst.0 {
            worst = (err, name.clone());
        }
    }
    assert!(worst.0 < 1e-4, "worst {worst:?}");
}

#[test]
fn evaluation_contracts() {
    let data = tiny_data(4);
    let mut model = tiny_model(false);
    for p in model.params_mut() {
        p.value_mut().fill(0.0);
    }
    let spec = LossSpec::default();
    let stats = NormStats::identity(1);
    // zero model predicts 0 everywhere; compare with all-zero heldout values
    let zeros: Vec<IrregularSeries> = data
        .iter()
        .map(|s| {
            s.map_values(|c, v| if s.heldout()[c] { 0.0 } else { v })
                .unwrap()
        })
        .collect();
    let m = evaluate(
        &model,
        &zeros,
        &Task::Reconstruction,
        &spec,
        &stats,
        &solver(),
        2,
    )
    .unwrap();
    assert_eq!(m["mse"], 0.0);

    let model = tiny_model(true);
    let cut = Task::Extrapolation { cut: 15.0 };
    let full = evaluate(&model, &data, &cut, &spec, &stats, &solver(), 4).unwrap();
    let trimmed: Vec<IrregularSeries> = data
        .iter()
        .map(|s| {
            let d = s.n_features();
            let held = s
                .heldout()
                .iter()
                .enumerate()
                .map(|(c, &h)| h && s.times()[c / d] > 15.0)
                .collect();
            s.with_heldout(held, s.values().to_vec()).unwrap()
        })
        .collect();
    let after = evaluate(&model, &trimmed, &cut, &spec, &stats, &solver(), 4).unwrap();
    assert_eq!(full["mse"].to_bits(), after["mse"].to_bits());

    let no_heldout: Vec<IrregularSeries> = data
        .iter()
        .map(|s| {
            s.with_heldout(vec![false; s.heldout().len()], s.values().to_vec())
                .unwrap()
        })
        .collect();
    assert!(matches!(
        evaluate(
            &model,
            &no_heldout,
            &Task::Reconstruction,
            &spec,
            &stats,
            &solver(),
            4
        ),
        Err(Error::EmptyHeldout)
    ));
}

#[test]
fn classification_training_and_metrics() {
    let data: Vec<IrregularSeries> = tiny_data(8)
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.with_label(Some(Label::Class(i % 2))).unwrap())
        .collect();
    let cfg = ModelConfig {
        latent: 3,
        gru_units: 4,
        ode_units: 4,
        ode_layers: 2,
        n_classes: 1,
        ..ModelConfig::default()
    };
    let mut model = LatentOdeModel::new(&cfg, 3).unwrap();
    let train = TrainingConfig {
        batch_size: 4,
        loss: LossSpec {
            kind: LossKind::Bce,
            ..LossSpec::default()
        },
        ..TrainingConfig::default()
    };
    let mut opt = AdamaxState::new(train.lr, train.decay);
    let loss = train_epoch(
        &mut model,
        &data,
        &Task::Classification,
        &train,
        &solver(),
        &mut opt,
        0,
    )
    .unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    let m = evaluate(
        &model,
        &data,
        &Task::Classification,
        &train.loss,
        &NormStats::identity(1),
        &solver(),
        4,
    )
    .unwrap();
    assert!((0.0..=1.0).contains(&m["auc"]));
    assert!(train.validate(&Task::Reconstruction).is_err());
}

#[test]
fn random_head_auc_is_near_half() {
    // binary head on random latents with random balanced labels
    use rand::Rng;
    let mut rng = RunRng::seed_from_u64(77);
    let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..1000 {
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        scores.push(z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>());
        labels.push(i % 2 == 0);
    }
    let a = auc(&scores, &labels).unwrap();
    assert!((a - 0.5).abs() < 0.1, "{a}");
}

#[test]
fn fit_restores_best_validation_epoch() {
    let spec = SyntheticSpec {
        n_samples: 10,
        grid_size: 20,
        sparsity: 0.3,
        seed: 1,
        ..SyntheticSpec::default()
    };
    let fr = SplitFractions {
        train: 0.6,
        validation: 0.2,
        test: 0.2,
    };
    let split =
        crate::data::normalize(&split_dataset(generate_synthetic(&spec).unwrap(), fr, 0).unwrap())
            .unwrap();
    let mut model = tiny_model(true);
    let cfg = TrainingConfig {
        epochs: 4,
        batch_size: 6,
        patience: 1,
        ..TrainingConfig::default()
    };
    let mut opt = AdamaxState::new(cfg.lr, cfg.decay);
    let mut seen = Vec::new();
    let res = fit(
        &mut model,
        &split,
        &Task::Reconstruction,
        &cfg,
        &solver(),
        &solver(),
        &mut opt,
        0,
        |r| seen.push(r.epoch),
    )
    .unwrap();
    assert_eq!(seen, (1..=res.history.len()).collect::<Vec<_>>());
    let best = res
        .history
        .iter()
        .map(|r| r.metrics["mse"])
        .fold(f64::INFINITY, f64::min);
    assert_eq!(res.history[res.best_epoch - 1].metrics["mse"], best);
    let last: Vec<&Tensor> = res.final_params.iter().collect();
    assert_eq!(last.len(), model.params().len());
    let again = evaluate(
        &model,
        &split.validation,
        &Task::Reconstruction,
        &cfg.loss,
        &split.stats,
        &solver(),
        6,
    )
    .unwrap();
    assert_eq!(again["mse"], best);
}
