use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GruCell, OdeFuncNet};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::scaling::{StaticLayer, TemporalOptions};
use crate::seed::rng_for;
use crate::solver::{odesolve_at, Integrator, OdeProblem, SolverConfig};
use crate::tensor::{Parameter, Parameterized, Tape, Tensor};

const SIGMA_FLOOR: f64 = 1e-4;

/// What the classifier head reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    #[default]
    Z0,
    /// Latent state at the last decoded time.
    Final,
    /// Mean latent state over decoded times.
    Pooled,
    /// One prediction per decoded time.
    PerTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_features: usize,
    pub latent: usize,
    pub gru_units: usize,
    /// Hidden width of both ODE functions.
    pub ode_units: usize,
    /// Weight layers per ODE function.
    pub ode_layers: usize,
    /// Temporal weights in the decoder dynamics.
    pub temporal: bool,
    /// Temporal weights in the encoder dynamics as well.
    pub temporal_encoder: bool,
    /// Temporal weights in the GRU input and hidden matrices too; needs
    /// `temporal_encoder`.
    pub temporal_gru: bool,
    pub temporal_options: TemporalOptions,
    /// Classifier width; 0 for no head.
    pub n_classes: usize,
    pub classifier_input: ClassifierInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_features: 1,
            latent: 4,
            gru_units: 8,
            ode_units: 8,
            ode_layers: 3,
            temporal: true,
            temporal_encoder: true,
            temporal_gru: false,
            temporal_options: TemporalOptions::default(),
            n_classes: 0,
            classifier_input: ClassifierInput::Z0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.n_features,
            self.latent,
            self.gru_units,
            self.ode_units,
            self.ode_layers,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(format!(
                "model sizes must be positive: {sizes:?}"
            )));
        }
        if self.temporal_gru && !(self.temporal && self.temporal_encoder) {
            return Err(Error::Config(
                "temporal_gru needs temporal and temporal_encoder".into(),
            ));
        }
        Ok(())
    }
}

/// ODE-RNN: GRU updates at observations, ODE evolution in between, run
/// from the latest observation back to the start of the grid.
#[derive(Clone, Debug)]
pub struct OdeRnnEncoder {
    pub gru: GruCell,
    pub dynamics: OdeFuncNet,
    pub mu_head: StaticLayer,
    pub sigma_head: StaticLayer,
}

impl OdeRnnEncoder {
    /// `(mu, sigma)`, each `batch × latent`.
    pub fn encode(
        &self,
        tape: &Tape,
        batch: &Batch,
        solver: &SolverConfig,
    ) -> Result<(Tensor, Tensor)> {
        let observed: Vec<usize> = (0..batch.n_times())
            .filter(|&t| batch.any_observed_at(t))
            .collect();
        if observed.is_empty() {
            return Err(Error::EmptySeries);
        }
        let mut h = Tensor::zeros(&[batch.size(), self.gru.hidden_width()]);
        let mut integ = Integrator::new(solver)?;
        let mut rhs = self.dynamics.rhs();
        let mut prev: Option<f64> = None;
        for &t in observed.iter().rev() {
            let time = batch.times[t];
            if let Some(p) = prev {
                h = integ.advance(tape, &mut rhs, &h, p, time)?;
            }
            h = self.gru.update(
                tape,
                time,
                &h,
                &batch.input_at(t),
                &batch.rows_observed_at(t),
            )?;
            prev = Some(time);
        }
        let start = batch.times[0];
        if let Some(p) = prev.filter(|&p| p > start) {
            h = integ.advance(tape, &mut rhs, &h, p, start)?;
        }
        let mu = self.mu_head.forward(tape, &h)?;
        let sigma = tape.offset(
            &tape.softplus(&self.sigma_head.forward(tape, &h)?)?,
            SIGMA_FLOOR,
        )?;
        Ok((mu, sigma))
    }
}

impl Parameterized for OdeRnnEncoder {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.gru.params();
        out.extend(self.dynamics.params());
        out.extend(self.mu_head.params());
        out.extend(self.sigma_head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.gru.params_mut();
        out.extend(self.dynamics.params_mut());
        out.extend(self.mu_head.params_mut());
        out.extend(self.sigma_head.params_mut());
        out
    }
}

/// Everything one forward pass over a batch produces.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub z0: Tensor,
    /// Latent state at each batch time, `batch × latent`.
    pub latents: Vec<Tensor>,
    /// Reconstruction at each batch time, `batch × features`.
    pub preds: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LatentOdeModel {
    config: ModelConfig,
    pub encoder: OdeRnnEncoder,
    pub decoder: OdeFuncNet,
    pub output_proj: StaticLayer,
    pub task_head: Option<StaticLayer>,
}

impl LatentOdeModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "model-init");
        let c = config;
        let opts = &c.temporal_options;
        let enc_temporal = (c.temporal && c.temporal_encoder).then_some(opts);
        let gru_temporal = enc_temporal.filter(|_| c.temporal_gru);
        let gru = GruCell::new(
            "encoder.gru",
            2 * c.n_features,
            c.gru_units,
            gru_temporal,
            &mut rng,
        )?;
        let dynamics = OdeFuncNet::build(
            "encoder.ode",
            c.gru_units,
            c.ode_units,
            c.ode_layers,
            enc_temporal,
            &mut rng,
        )?;
        let mu_head = StaticLayer::new("encoder.mu", c.gru_units, c.latent, true, &mut rng);
        let sigma_head = StaticLayer::new("encoder.sigma", c.gru_units, c.latent, true, &mut rng);
        let decoder = OdeFuncNet::build(
            "decoder.ode",
            c.latent,
            c.ode_units,
            c.ode_layers,
            c.temporal.then_some(opts),
            &mut rng,
        )?;
        let output_proj =
            StaticLayer::new("decoder.output", c.latent, c.n_features, true, &mut rng);
        let task_head = (c.n_classes > 0)
            .then(|| StaticLayer::new("head", c.latent, c.n_classes, true, &mut rng));
        Ok(Self {
            config: c.clone(),
            encoder: OdeRnnEncoder {
                gru,
                dynamics,
                mu_head,
                sigma_head,
            },
            decoder,
            output_proj,
            task_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encode(
        &self,
        tape: &Tape,
        batch: &Batch,
        solver: &SolverConfig,
    ) -> Result<(Tensor, Tensor)> {
        if batch.n_features != self.config.n_features {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![self.config.n_features],
                rhs: vec![batch.n_features],
            });
        }
        self.encoder.encode(tape, batch, solver)
    }

    /// Reparameterized draw `mu + sigma∘noise`.
    pub fn sample_z0(tape: &Tape, mu: &Tensor, sigma: &Tensor, noise: &Tensor) -> Result<Tensor> {
        if mu.shape() != sigma.shape() || mu.shape() != noise.shape() {
            return Err(Error::ShapeMismatch {
                op: "sample_z0",
                lhs: mu.shape().to_vec(),
                rhs: noise.shape().to_vec(),
            });
        }
        tape.add(mu, &tape.mul(sigma, noise)?)
    }

    /// Latent states at `times` (ascending, none before `t0`).
    pub fn decode_latents(
        &self,
        tape: &Tape,
        z0: &Tensor,
        t0: f64,
        times: &[f64],
        solver: &SolverConfig,
    ) -> Result<Vec<Tensor>> {
        let end = times.last().copied().unwrap_or(t0).max(t0);
        let mut problem = OdeProblem::new(self.decoder.rhs(), z0.clone(), (t0, end))?;
        odesolve_at(tape, &mut problem, times, solver)
    }

    /// Reconstruction at `times`, one `batch × features` tensor per time.
    pub fn decode(
        &self,
        tape: &Tape,
        z0: &Tensor,
        t0: f64,
        times: &[f64],
        solver: &SolverConfig,
    ) -> Result<Vec<Tensor>> {
        self.decode_latents(tape, z0, t0, times, solver)?
            .iter()
            .map(|z| self.output_proj.forward(tape, z))
            .collect()
    }

    /// Encodes the batch and decodes at all of its times. Without `noise`
    /// the posterior mean is decoded.
    pub fn forward(
        &self,
        tape: &Tape,
        batch: &Batch,
        noise: Option<&Tensor>,
        solver: &SolverConfig,
    ) -> Result<ModelOutput> {
        let (mu, sigma) = self.encode(tape, batch, solver)?;
        let z0 = match noise {
            Some(eps) => Self::sample_z0(tape, &mu, &sigma, eps)?,
            None => mu.clone(),
        };
        let latents = self.decode_latents(tape, &z0, batch.times[0], &batch.times, solver)?;
        let preds = latents
            .iter()
            .map(|z| self.output_proj.forward(tape, z))
            .collect::<Result<_>>()?;
        Ok(ModelOutput {
            mu,
            sigma,
            z0,
            latents,
            preds,
        })
    }

    /// Logits of the task head; no softmax.
    pub fn classify(&self, tape: &Tape, z: &Tensor) -> Result<Tensor> {
        self.task_head
            .as_ref()
            .ok_or(Error::NoTaskHead)?
            .forward(tape, z)
    }

    /// Logits for the configured classifier input: one tensor, or one per
    /// time for per-time labels.
    pub fn task_logits(&self, tape: &Tape, out: &ModelOutput) -> Result<Vec<Tensor>> {
        match self.config.classifier_input {
            ClassifierInput::Z0 => Ok(vec![self.classify(tape, &out.z0)?]),
            ClassifierInput::Final => {
                let last = out.latents.last().ok_or(Error::EmptySeries)?;
                Ok(vec![self.classify(tape, last)?])
            }
            ClassifierInput::Pooled => {
                let mut acc = out.latents.first().ok_or(Error::EmptySeries)?.clone();
                for z in &out.latents[1..] {
                    acc = tape.add(&acc, z)?;
                }
                let pooled = tape.scale(&acc, 1.0 / out.latents.len() as f64)?;
                Ok(vec![self.classify(tape, &pooled)?])
            }
            ClassifierInput::PerTime => {
                out.latents.iter().map(|z| self.classify(tape, z)).collect()
            }
        }
    }

    /// Scalar counts grouped by component (`encoder.gru`, `decoder.ode`, …).
    pub fn param_breakdown(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.params() {
            let parts: Vec<&str> = p.name().split('.').collect();
            let key = if parts.len() > 2 {
                parts[..2].join(".")
            } else {
                parts[0].to_string()
            };
            *out.entry(key).or_insert(0) += p.numel();
        }
        out
    }
}

impl Parameterized for LatentOdeModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        out.extend(self.output_proj.params());
        if let Some(h) = &self.task_head {
            out.extend(h.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out.extend(self.output_proj.params_mut());
        if let Some(h) = &mut self.task_head {
            out.extend(h.params_mut());
        }
        out
    }
}
