use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MaskedMse,
    GaussianNll,
    Elbo,
    Bce,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KlSchedule {
    Constant {
        weight: f64,
    },
    /// Linear ramp from 0 at epoch 0 to 1 at `epochs`.
    Warmup {
        epochs: usize,
    },
}

impl KlSchedule {
    pub fn weight(&self, epoch: usize) -> f64 {
        match *self {
            KlSchedule::Constant { weight } => weight,
            KlSchedule::Warmup { epochs: 0 } => 1.0,
            KlSchedule::Warmup { epochs } => (epoch as f64 / epochs as f64).min(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub kind: LossKind,
    pub obs_noise_std: f64,
    pub kl: KlSchedule,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Elbo,
            obs_noise_std: 0.01,
            kl: KlSchedule::Warmup { epochs: 10 },
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.obs_noise_std > 0.0 && self.obs_noise_std.is_finite()) {
            return Err(Error::Config("obs_noise_std must be positive".into()));
        }
        if let KlSchedule::Constant { weight } = self.kl {
            if !(weight >= 0.0 && weight.is_finite()) {
                return Err(Error::Config("kl weight must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// A masked target: values and 0/1 weights of the same shape.
pub struct Target<'a> {
    pub values: &'a Tensor,
    pub mask: &'a Tensor,
}

fn check(pred: &Tensor, t: &Target<'_>) -> Result<()> {
    if pred.shape() != t.values.shape() || pred.shape() != t.mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_loss",
            lhs: pred.shape().to_vec(),
            rhs: t.values.shape().to_vec(),
        });
    }
    Ok(())
}

/// `Σ mask∘(pred − target)²` over all pairs, and the number of masked cells.
pub fn masked_sse(tape: &Tape, preds: &[Tensor], targets: &[Target<'_>]) -> Result<(Tensor, f64)> {
    if preds.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    let mut count = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        check(p, t)?;
        let c: f64 = t.mask.data().iter().sum();
        if c == 0.0 {
            continue;
        }
        count += c;
        let term = tape.sum(&tape.mul(&tape.square(&tape.sub(p, t.values)?)?, t.mask)?)?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok((t, count)),
        None => Err(Error::EmptyMask),
    }
}

/// `Σ mask∘(pred − target)² / Σ mask`.
pub fn masked_mse(tape: &Tape, pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    masked_mse_seq(
        tape,
        std::slice::from_ref(pred),
        &[Target {
            values: target,
            mask,
        }],
    )
}

pub fn masked_mse_seq(tape: &Tape, preds: &[Tensor], targets: &[Target<'_>]) -> Result<Tensor> {
    let (sse, count) = masked_sse(tape, preds, targets)?;
    tape.scale(&sse, 1.0 / count)
}

/// Summed negative log-likelihood of masked cells under
/// `N(pred, obs_noise_std²)`.
pub fn gaussian_nll_sum(
    tape: &Tape,
    preds: &[Tensor],
    targets: &[Target<'_>],
    obs_noise_std: f64,
) -> Result<Tensor> {
    let (sse, count) = masked_sse(tape, preds, targets)?;
    let var = obs_noise_std * obs_noise_std;
    let constant = count * (obs_noise_std.ln() + 0.5 * (2.0 * PI).ln());
    tape.offset(&tape.scale(&sse, 0.5 / var)?, constant)
}

/// `KL(N(mu, sigma²) ‖ N(0, I))` summed over all entries.
pub fn kl_standard_normal(tape: &Tape, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    if mu.shape() != sigma.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl",
            lhs: mu.shape().to_vec(),
            rhs: sigma.shape().to_vec(),
        });
    }
    let inner = tape.add(&tape.square(sigma)?, &tape.square(mu)?)?;
    let inner = tape.sub(
        &tape.offset(&inner, -1.0)?,
        &tape.scale(&tape.ln(sigma)?, 2.0)?,
    )?;
    tape.scale(&tape.sum(&inner)?, 0.5)
}

/// Negative ELBO averaged over the `batch` rows:
/// `(NLL + kl_weight·KL) / batch`.
pub fn elbo(
    tape: &Tape,
    preds: &[Tensor],
    targets: &[Target<'_>],
    mu: &Tensor,
    sigma: &Tensor,
    obs_noise_std: f64,
    kl_weight: f64,
) -> Result<Tensor> {
    let batch = mu.shape().first().copied().unwrap_or(1).max(1) as f64;
    let nll = gaussian_nll_sum(tape, preds, targets, obs_noise_std)?;
    let total = if kl_weight == 0.0 {
        nll
    } else {
        tape.axpy(&nll, kl_weight, &kl_standard_normal(tape, mu, sigma)?)?
    };
    tape.scale(&total, 1.0 / batch)
}

/// Mean binary cross-entropy of logits (one column) against 0/1 labels.
pub fn bce_with_logits(tape: &Tape, logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    if logits.numel() != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "bce",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let y = Tensor::new(logits.shape().to_vec(), labels.to_vec())?;
    // softplus(x) − y·x
    let loss = tape.sub(&tape.softplus(logits)?, &tape.mul(&y, logits)?)?;
    tape.mean(&loss)
}

/// Mean softmax cross-entropy over rows with `Some` label.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, labels: &[Option<usize>]) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let rows = labels.iter().filter(|l| l.is_some()).count();
    if rows == 0 {
        return Err(Error::EmptyMask);
    }
    let mut shift = vec![0.0; b * c];
    let mut pick = vec![0.0; b * c];
    let mut weight = vec![0.0; b * c];
    for (i, l) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift[i * c..(i + 1) * c].fill(m);
        if let Some(k) = *l {
            if k >= c {
                return Err(Error::InvalidArgument(format!(
                    "label {k} out of {c} classes"
                )));
            }
            pick[i * c + k] = 1.0;
            weight[i * c..(i + 1) * c].fill(1.0 / c as f64);
        }
    }
    let shift = Tensor::new(vec![b, c], shift)?;
    let shifted = tape.sub(logits, &shift)?;
    // per row: log Σ exp(shifted), broadcast back over the row
    let lse = tape.ln(&tape.sum_axis(&tape.exp(&shifted)?, 1)?)?;
    let lse = tape.matmul(
        &tape.reshape(&lse, vec![b, 1])?,
        &Tensor::full(&[1, c], 1.0),
    )?;
    // Σ_rows [lse − shifted[label]] with each row's lse spread as lse/c over c entries
    let per = tape.sub(
        &tape.mul(&lse, &Tensor::new(vec![b, c], weight)?)?,
        &tape.mul(&shifted, &Tensor::new(vec![b, c], pick)?)?,
    )?;
    tape.scale(&tape.sum(&per)?, 1.0 / rows as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::testutil::max_fd_error;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn masked_mse_examples() {
        let tape = Tape::no_grad();
        let p = t(vec![1.0, 2.0]);
        assert_eq!(
            masked_mse(&tape, &p, &p, &t(vec![1.0, 1.0]))
                .unwrap()
                .item(),
            0.0
        );
        let mse = masked_mse(
            &tape,
            &t(vec![1.0, 3.0]),
            &t(vec![0.0, 0.0]),
            &t(vec![1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(mse.item(), 1.0);
        let plain = masked_mse(
            &tape,
            &t(vec![1.0, 3.0]),
            &t(vec![0.0, 0.0]),
            &t(vec![1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(plain.item(), 5.0);
        assert!(matches!(
            masked_mse(&tape, &p, &p, &t(vec![0.0, 0.0])),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn kl_examples() {
        let tape = Tape::no_grad();
        assert_eq!(
            kl_standard_normal(&tape, &t(vec![0.0, 0.0]), &t(vec![1.0, 1.0]))
                .unwrap()
                .item(),
            0.0
        );
        // closed form: (σ² + μ² − 1 − 2 ln σ)/2 at μ=1, σ=1
        let kl = kl_standard_normal(&tape, &t(vec![1.0]), &t(vec![1.0]))
            .unwrap()
            .item();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn elbo_without_kl_is_the_nll() {
        let tape = Tape::no_grad();
        let (p, y, m) = (t(vec![0.3, 0.1]), t(vec![0.2, 0.0]), t(vec![1.0, 0.0]));
        let targets = [Target {
            values: &y,
            mask: &m,
        }];
        let mu = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let sigma = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let loss = elbo(
            &tape,
            std::slice::from_ref(&p),
            &targets,
            &mu,
            &sigma,
            0.1,
            0.0,
        )
        .unwrap();
        let nll = gaussian_nll_sum(&tape, std::slice::from_ref(&p), &targets, 0.1).unwrap();
        assert_eq!(loss.item(), nll.item());
        // one cell: (0.1)²/(2·0.01) + ln 0.1 + ½ ln 2π
        let expected = 0.5 + 0.1f64.ln() + 0.5 * (2.0 * PI).ln();
        assert!((nll.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = Tensor::matrix(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let labels = [Some(1), Some(0)];
        let got = cross_entropy(&Tape::no_grad(), &logits, &labels)
            .unwrap()
            .item();
        let row = |r: &[f64], k: usize| r.iter().map(|v| v.exp()).sum::<f64>().ln() - r[k];
        let expected = (row(&[1.0, 2.0, 0.5], 1) + row(&[-1.0, 0.0, 3.0], 0)) / 2.0;
        assert!((got - expected).abs() < 1e-12);
        let partial = cross_entropy(&Tape::no_grad(), &logits, &[None, Some(0)])
            .unwrap()
            .item();
        assert!((partial - row(&[-1.0, 0.0, 3.0], 0)).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let logits = Tensor::matrix(2, 1, vec![0.3, -2.0]).unwrap();
        let got = bce_with_logits(&Tape::no_grad(), &logits, &[1.0, 0.0])
            .unwrap()
            .item();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = -(sig(0.3).ln() + (1.0 - sig(-2.0)).ln()) / 2.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn classification_losses_differentiate() {
        let f = |tape: &Tape, x: &[Tensor]| cross_entropy(tape, &x[0], &[Some(2), Some(0)]);
        let logits = Tensor::matrix(2, 3, vec![0.2, -0.4, 1.1, 0.0, 0.7, -0.3]).unwrap();
        assert!(max_fd_error(&f, &[logits], 1e-6, 1e-9) < 1e-6);
        let g = |tape: &Tape, x: &[Tensor]| bce_with_logits(tape, &x[0], &[1.0, 0.0, 1.0]);
        assert!(max_fd_error(&g, &[t(vec![0.2, -1.5, 3.0])], 1e-6, 1e-9) < 1e-6);
        let h = |tape: &Tape, x: &[Tensor]| kl_standard_normal(tape, &x[0], &x[1]);
        assert!(max_fd_error(&h, &[t(vec![0.3, -1.0]), t(vec![0.5, 2.0])], 1e-6, 1e-9) < 1e-6);
    }

    #[test]
    fn warmup_schedule() {
        let w = KlSchedule::Warmup { epochs: 10 };
        assert_eq!(
            (w.weight(0), w.weight(5), w.weight(10), w.weight(40)),
            (0.0, 0.5, 1.0, 1.0)
        );
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(mu in -5.0f64..5.0, sigma in 1e-3f64..10.0) {
            let kl = kl_standard_normal(&Tape::no_grad(), &t(vec![mu]), &t(vec![sigma])).unwrap().item();
            prop_assert!(kl >= 0.0);
            if mu.abs() > 1e-3 || (sigma - 1.0).abs() > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }
    }
}
