//! Time-dependent layer weights from a coupled-oscillator scaling function.
//!
//! A [`TemporalWeightLayer`] stores base weights `w` (flattened to length
//! `N = d_in * d_out`) plus coupling strengths `K`, a frequency scale `α`
//! and a phase `β·t + γ`. At solver time `t` the effective weight matrix is
//!
//! ```text
//! w'_i = Σ_j (K_ij / N) · sin(α·t·(w_i − w_j) + β·t + γ)
//! ```
//!
//! so each weight is a synchronization readout of its distance to every
//! other weight in the layer, not the stored value itself. The sum is
//! evaluated by a fused tape operation with an analytic backward pass.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Parameter, Parameterized, Tape, Tensor};

/// Default cap on `N` for full coupling (the `K` matrix is `N × N`).
pub const DEFAULT_FULL_MODE_CAP: usize = 4096;

/// Pairwise buffers up to this many entries are kept for the backward pass
/// when [`PairwiseMemory::Auto`] is selected.
pub const AUTO_MATERIALIZE_ENTRIES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// One shared coupling strength.
    Scalar,
    /// One strength per weight, `K_ij = k_i`.
    Rank1,
    /// A dense `N × N` matrix.
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// Raw sine sum, within `[-1, 1]` for unit coupling.
    #[default]
    Signed,
    /// `(x + 1) / 2`.
    Unit,
}

/// How the pairwise sum is evaluated and what is kept for the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseMemory {
    /// `Factored` with a per-layer `α`; otherwise materialize small tables
    /// and stream large ones.
    #[default]
    Auto,
    /// Pairwise loop keeping the full `N²` table for the backward pass.
    Materialize,
    /// Pairwise loop recomputing one row at a time in the backward pass.
    Stream,
    /// With a per-layer `α` the sine of a difference splits as
    /// `sin(ψ_i − θ_j) = sin ψ_i cos θ_j − cos ψ_i sin θ_j` with
    /// `θ_j = α t w_j`, `ψ_i = θ_i + φ`, so the sum needs `O(N)` sines
    /// (plus two `K`-products in full mode). Per-weight `α` does not
    /// factor and falls back to `Auto`.
    Factored,
}

impl PairwiseMemory {
    fn resolve(self, n: usize, per_weight_alpha: bool) -> PairwiseMemory {
        match self {
            PairwiseMemory::Auto | PairwiseMemory::Factored if !per_weight_alpha => {
                PairwiseMemory::Factored
            }
            PairwiseMemory::Auto | PairwiseMemory::Factored => {
                if n * n <= AUTO_MATERIALIZE_ENTRIES {
                    PairwiseMemory::Materialize
                } else {
                    PairwiseMemory::Stream
                }
            }
            other => other,
        }
    }
}

/// Construction options shared by every temporal layer of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalOptions {
    pub coupling: CouplingMode,
    pub range_mode: RangeMode,
    /// Use `W + S(W, t)` instead of `S(W, t)`.
    pub residual: bool,
    /// One frequency scale per weight instead of one per layer.
    pub per_weight_freq: bool,
    pub full_mode_cap: usize,
    pub memory: PairwiseMemory,
}

impl Default for TemporalOptions {
    fn default() -> Self {
        Self {
            coupling: CouplingMode::Rank1,
            range_mode: RangeMode::Signed,
            residual: false,
            per_weight_freq: false,
            full_mode_cap: DEFAULT_FULL_MODE_CAP,
            memory: PairwiseMemory::Auto,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CouplingParams {
    mode: CouplingMode,
    values: Parameter,
}

impl CouplingParams {
    pub fn new(mode: CouplingMode, values: Parameter, n: usize) -> Result<Self> {
        let expected: &[usize] = match mode {
            CouplingMode::Scalar => &[],
            CouplingMode::Rank1 => &[n],
            CouplingMode::Full => &[n, n],
        };
        if values.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "coupling",
                lhs: expected.to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        Ok(Self { mode, values })
    }

    pub fn mode(&self) -> CouplingMode {
        self.mode
    }

    pub fn values(&self) -> &Parameter {
        &self.values
    }
}

fn uniform_init(rng: &mut impl Rng, d_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (d_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Plain affine layer `h·W + b`.
#[derive(Clone, Debug)]
pub struct StaticLayer {
    d_in: usize,
    d_out: usize,
    weight: Parameter,
    bias: Option<Parameter>,
}

impl StaticLayer {
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = Tensor::new(vec![d_in, d_out], uniform_init(rng, d_in, d_in * d_out))
            .expect("finite init");
        Self::from_parts(name, weight, bias.then(|| Tensor::zeros(&[d_out])))
            .expect("consistent shapes")
    }

    pub fn from_parts(name: &str, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "weight must be rank 2, got {:?}",
                weight.shape()
            )));
        }
        let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
        if let Some(b) = &bias {
            if b.shape() != [d_out] {
                return Err(Error::ShapeMismatch {
                    op: "static_layer",
                    lhs: vec![d_out],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            d_in,
            d_out,
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: bias.map(|b| Parameter::new(format!("{name}.bias"), b)),
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn weight(&self) -> &Parameter {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Parameter> {
        self.bias.as_ref()
    }

    /// `h·W + bias` for `h` of shape `batch × d_in`.
    pub fn forward(&self, tape: &Tape, h: &Tensor) -> Result<Tensor> {
        if h.rank() != 2 || h.shape()[1] != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "static_forward",
                lhs: h.shape().to_vec(),
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let out = tape.matmul(h, &tape.param(&self.weight))?;
        match &self.bias {
            Some(b) => tape.add(&out, &tape.param(b)),
            None => Ok(out),
        }
    }
}

impl Parameterized for StaticLayer {
    fn params(&self) -> Vec<&Parameter> {
        std::iter::once(&self.weight).chain(&self.bias).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

/// Operation counts of one evaluation of the scaling function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ScaleComplexity {
    /// Floating-point operations of the forward evaluation.
    pub flops: u64,
    /// Entries of the pairwise table held for the backward pass.
    pub pairwise_buffer: usize,
}

/// Layer whose weights are rebuilt from `(W, K, α, β, γ)` at every time.
#[derive(Clone, Debug)]
pub struct TemporalWeightLayer {
    d_in: usize,
    d_out: usize,
    base: Parameter,
    coupling: CouplingParams,
    freq_scale: Parameter,
    phase_rate: Parameter,
    phase_offset: Parameter,
    bias: Option<Parameter>,
    range_mode: RangeMode,
    residual: bool,
    memory: PairwiseMemory,
}

impl TemporalWeightLayer {
    pub fn new(
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        opts: &TemporalOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = d_in * d_out;
        if d_in == 0 || d_out == 0 {
            return Err(Error::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        if opts.coupling == CouplingMode::Full && n > opts.full_mode_cap {
            return Err(Error::InvalidArgument(format!(
                "full coupling with N = {n} exceeds the cap of {}",
                opts.full_mode_cap
            )));
        }
        let base = Tensor::new(vec![d_in, d_out], uniform_init(rng, d_in, n))?;
        let k = match opts.coupling {
            CouplingMode::Scalar => Tensor::scalar(1.0),
            CouplingMode::Rank1 => Tensor::full(&[n], 1.0),
            CouplingMode::Full => Tensor::full(&[n, n], 1.0),
        };
        let alpha = if opts.per_weight_freq {
            Tensor::full(&[n], 1.0)
        } else {
            Tensor::scalar(1.0)
        };
        Ok(Self {
            d_in,
            d_out,
            base: Parameter::new(format!("{name}.base"), base),
            coupling: CouplingParams::new(
                opts.coupling,
                Parameter::new(format!("{name}.K"), k),
                n,
            )?,
            freq_scale: Parameter::new(format!("{name}.alpha"), alpha),
            phase_rate: Parameter::new(format!("{name}.beta"), Tensor::scalar(0.0)),
            phase_offset: Parameter::new(format!("{name}.gamma"), Tensor::scalar(FRAC_PI_2)),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d_out]))),
            range_mode: opts.range_mode,
            residual: opts.residual,
            memory: opts.memory,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// Number of base weights `N`.
    pub fn n_weights(&self) -> usize {
        self.d_in * self.d_out
    }

    pub fn base(&self) -> &Parameter {
        &self.base
    }

    pub fn coupling(&self) -> &CouplingParams {
        &self.coupling
    }

    pub fn range_mode(&self) -> RangeMode {
        self.range_mode
    }

    pub fn bias(&self) -> Option<&Parameter> {
        self.bias.as_ref()
    }

    pub fn set_memory(&mut self, memory: PairwiseMemory) {
        self.memory = memory;
    }

    pub fn set_base(&mut self, base: Tensor) -> Result<()> {
        self.base.set_value(base)
    }

    pub fn set_coupling(&mut self, k: Tensor) -> Result<()> {
        self.coupling.values.set_value(k)
    }

    pub fn set_phase(&mut self, alpha: Tensor, beta: f64, gamma: f64) -> Result<()> {
        self.freq_scale.set_value(alpha)?;
        self.phase_rate.set_value(Tensor::scalar(beta))?;
        self.phase_offset.set_value(Tensor::scalar(gamma))
    }

    /// Effective `d_in × d_out` weight matrix at time `t` (a scalar tensor,
    /// which may itself be tracked).
    pub fn scale(&self, tape: &Tape, t: &Tensor) -> Result<Tensor> {
        if t.numel() != 1 {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        if !t.item().is_finite() {
            return Err(Error::NonFinite("scale"));
        }
        let base = tape.param(&self.base);
        let k = tape.param(&self.coupling.values);
        let alpha = tape.param(&self.freq_scale);
        let beta = tape.param(&self.phase_rate);
        let gamma = tape.param(&self.phase_offset);
        let w = scale_raw(
            tape,
            ScaleInputs {
                base: &base,
                k: &k,
                mode: self.coupling.mode,
                alpha: &alpha,
                beta: &beta,
                gamma: &gamma,
                t,
            },
            self.memory,
        )?;
        let w = tape.reshape(&w, vec![self.d_in, self.d_out])?;
        let w = match self.range_mode {
            RangeMode::Signed => w,
            RangeMode::Unit => tape.scale(&tape.offset(&w, 1.0)?, 0.5)?,
        };
        if self.residual {
            tape.add(&tape.param(&self.base), &w)
        } else {
            Ok(w)
        }
    }

    /// Convenience wrapper for an untracked time value.
    pub fn scale_at(&self, tape: &Tape, t: f64) -> Result<Tensor> {
        self.scale(tape, &Tensor::scalar(t))
    }

    /// `h·S(W, t) + bias`.
    pub fn forward(&self, tape: &Tape, h: &Tensor, t: &Tensor) -> Result<Tensor> {
        if h.rank() != 2 || h.shape()[1] != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "temporal_forward",
                lhs: h.shape().to_vec(),
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let w = self.scale(tape, t)?;
        self.forward_with(tape, h, &w)
    }

    /// `h·w + bias` with weights already produced by [`Self::scale`], so
    /// that several evaluations at the same time can share them.
    pub fn forward_with(&self, tape: &Tape, h: &Tensor, w: &Tensor) -> Result<Tensor> {
        let out = tape.matmul(h, w)?;
        match &self.bias {
            Some(b) => tape.add(&out, &tape.param(b)),
            None => Ok(out),
        }
    }

    /// Cost of one forward evaluation of the sum under the configured
    /// strategy.
    ///
    /// Pairwise: each `(i, j)` pair costs six operations (difference,
    /// frequency product, phase addition, sine, coupling product,
    /// accumulation) and each row one division by `N`. Computing `α·t` and
    /// `β·t + γ` adds three, or `N + 2` with per-weight frequencies.
    ///
    /// Factored: per weight `θ`, its sine/cosine, `ψ` and its sine/cosine
    /// (four), the two coupled sums (`2N` for scalar/rank-1 `K`, `4N²` for
    /// full), scaling by `k_i` (`2N` rank-1, 2 scalar) and the output
    /// `(u_i P_i − v_i Q_i)/N` (four per weight).
    pub fn scale_complexity(&self) -> ScaleComplexity {
        let n = self.n_weights() as u64;
        let per_weight = self.freq_scale.numel() != 1;
        let setup = if per_weight { n + 2 } else { 3 };
        match self.memory.resolve(self.n_weights(), per_weight) {
            PairwiseMemory::Factored => {
                let (sums, scaling, extra) = match self.coupling.mode {
                    CouplingMode::Scalar => (2 * n, 2, 0),
                    CouplingMode::Rank1 => (2 * n, 2 * n, 0),
                    CouplingMode::Full => (4 * n * n, 0, 2 * n),
                };
                ScaleComplexity {
                    flops: setup + 4 * n + sums + scaling + 4 * n,
                    pairwise_buffer: (4 * n + extra) as usize,
                }
            }
            strategy => ScaleComplexity {
                flops: 6 * n * n + n + setup,
                pairwise_buffer: if strategy == PairwiseMemory::Materialize {
                    (n * n) as usize
                } else {
                    n as usize
                },
            },
        }
    }
}

impl Parameterized for TemporalWeightLayer {
    fn params(&self) -> Vec<&Parameter> {
        [
            &self.base,
            &self.coupling.values,
            &self.freq_scale,
            &self.phase_rate,
            &self.phase_offset,
        ]
        .into_iter()
        .chain(&self.bias)
        .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        [
            &mut self.base,
            &mut self.coupling.values,
            &mut self.freq_scale,
            &mut self.phase_rate,
            &mut self.phase_offset,
        ]
        .into_iter()
        .chain(self.bias.as_mut())
        .collect()
    }
}

/// Inputs of the raw scaling function. `alpha` is a scalar or has one
/// entry per weight; `k` matches `mode`.
#[derive(Clone, Copy)]
pub struct ScaleInputs<'a> {
    pub base: &'a Tensor,
    pub k: &'a Tensor,
    pub mode: CouplingMode,
    pub alpha: &'a Tensor,
    pub beta: &'a Tensor,
    pub gamma: &'a Tensor,
    pub t: &'a Tensor,
}

/// Evaluates the pairwise sine sum over the flattened `base`, returning a
/// vector of length `N`, recorded on `tape` as one fused node.
pub fn scale_raw(tape: &Tape, inputs: ScaleInputs<'_>, memory: PairwiseMemory) -> Result<Tensor> {
    let n = inputs.base.numel();
    if n == 0 {
        return Err(Error::EmptyReduction);
    }
    let k_ok = match inputs.mode {
        CouplingMode::Scalar => inputs.k.numel() == 1,
        CouplingMode::Rank1 => inputs.k.numel() == n,
        CouplingMode::Full => inputs.k.numel() == n * n,
    };
    if !k_ok || !(inputs.alpha.numel() == 1 || inputs.alpha.numel() == n) {
        return Err(Error::ShapeMismatch {
            op: "scale",
            lhs: vec![n],
            rhs: inputs.k.shape().to_vec(),
        });
    }
    for s in [inputs.beta, inputs.gamma, inputs.t] {
        if s.numel() != 1 {
            return Err(Error::NotScalar(s.shape().to_vec()));
        }
    }
    let geom = PairGeometry {
        n,
        mode: inputs.mode,
        per_weight_alpha: inputs.alpha.numel() == n,
    };
    let w = inputs.base.data();
    let k = inputs.k.data();
    let alpha = inputs.alpha.data();
    let (beta, gamma, t) = (inputs.beta.item(), inputs.gamma.item(), inputs.t.item());
    let phase = beta * t + gamma;
    let inv_n = 1.0 / n as f64;
    let strategy = memory.resolve(n, geom.per_weight_alpha);
    if strategy == PairwiseMemory::Factored {
        let (out, cache) = factored_forward(geom, w, k, alpha[0] * t, phase);
        return tape.custom(
            Box::new(ScaleOp {
                geom,
                table: Vec::new(),
                factored: Some(cache),
            }),
            &[
                inputs.base,
                inputs.k,
                inputs.alpha,
                inputs.beta,
                inputs.gamma,
                inputs.t,
            ],
            vec![n],
            out,
        );
    }
    let keep = strategy == PairwiseMemory::Materialize;
    let mut table = if keep {
        Vec::with_capacity(n * n)
    } else {
        Vec::new()
    };
    let mut out = vec![0.0; n];
    for i in 0..n {
        let a_i = geom.alpha_at(alpha, i) * t;
        let mut acc = 0.0;
        for j in 0..n {
            let (s, c) = (a_i * (w[i] - w[j]) + phase).sin_cos();
            acc += geom.coupling(k, i, j) * s;
            if keep {
                table.push((s, c));
            }
        }
        out[i] = acc * inv_n;
    }
    let op = ScaleOp {
        geom,
        table,
        factored: None,
    };
    tape.custom(
        Box::new(op),
        &[
            inputs.base,
            inputs.k,
            inputs.alpha,
            inputs.beta,
            inputs.gamma,
            inputs.t,
        ],
        vec![n],
        out,
    )
}

/// Per-weight quantities of the factored evaluation.
struct Factored {
    /// `sin θ_j`, `cos θ_j`
    s: Vec<f64>,
    c: Vec<f64>,
    /// `sin ψ_i`, `cos ψ_i`
    u: Vec<f64>,
    v: Vec<f64>,
    /// `P_i = Σ_j K_ij cos θ_j`, `Q_i = Σ_j K_ij sin θ_j`
    p: Vec<f64>,
    q: Vec<f64>,
}

fn factored_forward(
    geom: PairGeometry,
    w: &[f64],
    k: &[f64],
    a: f64,
    phase: f64,
) -> (Vec<f64>, Factored) {
    let n = geom.n;
    let (mut s, mut c, mut u, mut v) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        let theta = a * w[j];
        (s[j], c[j]) = theta.sin_cos();
        (u[j], v[j]) = (theta + phase).sin_cos();
    }
    let (p, q) = match geom.mode {
        CouplingMode::Scalar | CouplingMode::Rank1 => {
            let (sum_c, sum_s) = (c.iter().sum::<f64>(), s.iter().sum::<f64>());
            let kk = |i: usize| {
                if geom.mode == CouplingMode::Scalar {
                    k[0]
                } else {
                    k[i]
                }
            };
            (
                (0..n).map(|i| kk(i) * sum_c).collect(),
                (0..n).map(|i| kk(i) * sum_s).collect(),
            )
        }
        CouplingMode::Full => {
            let mut p = vec![0.0; n];
            let mut q = vec![0.0; n];
            for i in 0..n {
                let row = &k[i * n..(i + 1) * n];
                p[i] = row.iter().zip(&c).map(|(a, b)| a * b).sum();
                q[i] = row.iter().zip(&s).map(|(a, b)| a * b).sum();
            }
            (p, q)
        }
    };
    let inv_n = 1.0 / n as f64;
    let out = (0..n)
        .map(|i| (u[i] * p[i] - v[i] * q[i]) * inv_n)
        .collect();
    (out, Factored { s, c, u, v, p, q })
}

impl Factored {
    /// Gradients `(w, K, a = α·t, φ)` for upstream `grad`.
    fn backward(
        &self,
        geom: PairGeometry,
        w: &[f64],
        k: &[f64],
        a: f64,
        grad: &[f64],
    ) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let n = geom.n;
        let inv_n = 1.0 / n as f64;
        let g_p: Vec<f64> = (0..n).map(|i| grad[i] * self.u[i] * inv_n).collect();
        let g_q: Vec<f64> = (0..n).map(|i| -grad[i] * self.v[i] * inv_n).collect();
        // ψ_i through u_i, v_i
        let g_psi: Vec<f64> = (0..n)
            .map(|i| grad[i] * inv_n * (self.p[i] * self.v[i] + self.q[i] * self.u[i]))
            .collect();
        let (g_c, g_s, g_k): (Vec<f64>, Vec<f64>, Vec<f64>) = match geom.mode {
            CouplingMode::Scalar | CouplingMode::Rank1 => {
                let sum_c: f64 = self.c.iter().sum();
                let sum_s: f64 = self.s.iter().sum();
                let kk = |i: usize| {
                    if geom.mode == CouplingMode::Scalar {
                        k[0]
                    } else {
                        k[i]
                    }
                };
                let gc: f64 = (0..n).map(|i| kk(i) * g_p[i]).sum();
                let gs: f64 = (0..n).map(|i| kk(i) * g_q[i]).sum();
                let per_row: Vec<f64> = (0..n).map(|i| g_p[i] * sum_c + g_q[i] * sum_s).collect();
                let g_k = if geom.mode == CouplingMode::Scalar {
                    vec![per_row.iter().sum()]
                } else {
                    per_row
                };
                (vec![gc; n], vec![gs; n], g_k)
            }
            CouplingMode::Full => {
                let mut gc = vec![0.0; n];
                let mut gs = vec![0.0; n];
                let mut g_k = vec![0.0; n * n];
                for i in 0..n {
                    let row = &k[i * n..(i + 1) * n];
                    let g_row = &mut g_k[i * n..(i + 1) * n];
                    for j in 0..n {
                        gc[j] += row[j] * g_p[i];
                        gs[j] += row[j] * g_q[i];
                        g_row[j] = g_p[i] * self.c[j] + g_q[i] * self.s[j];
                    }
                }
                (gc, gs, g_k)
            }
        };
        let g_theta: Vec<f64> = (0..n)
            .map(|j| g_s[j] * self.c[j] - g_c[j] * self.s[j] + g_psi[j])
            .collect();
        let g_w = g_theta.iter().map(|g| a * g).collect();
        let g_a = (0..n).map(|j| w[j] * g_theta[j]).sum();
        let g_phase = g_psi.iter().sum();
        (g_w, g_k, g_a, g_phase)
    }
}

#[derive(Clone, Copy)]
struct PairGeometry {
    n: usize,
    mode: CouplingMode,
    per_weight_alpha: bool,
}

impl PairGeometry {
    #[inline]
    fn coupling(&self, k: &[f64], i: usize, j: usize) -> f64 {
        match self.mode {
            CouplingMode::Scalar => k[0],
            CouplingMode::Rank1 => k[i],
            CouplingMode::Full => k[i * self.n + j],
        }
    }

    #[inline]
    fn alpha_at(&self, alpha: &[f64], i: usize) -> f64 {
        if self.per_weight_alpha {
            alpha[i]
        } else {
            alpha[0]
        }
    }
}

struct ScaleOp {
    geom: PairGeometry,
    /// `(sin θ_ij, cos θ_ij)` row-major, empty when streaming.
    table: Vec<(f64, f64)>,
    factored: Option<Factored>,
}

impl CustomOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        inputs: &[&[f64]],
        _output: &[f64],
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let [w, k, alpha, beta, gamma, t] = inputs else {
            unreachable!("scale has six inputs")
        };
        let geom = self.geom;
        let n = geom.n;
        let inv_n = 1.0 / n as f64;
        let (t, beta, phase) = (t[0], beta[0], beta[0] * t[0] + gamma[0]);

        if let Some(f) = &self.factored {
            let (g_w, g_k, g_a, g_phase) = f.backward(geom, w, k, alpha[0] * t, grad);
            let out = [
                g_w,
                g_k,
                vec![g_a * t],
                vec![g_phase * t],
                vec![g_phase],
                vec![g_a * alpha[0] + g_phase * beta],
            ];
            return out
                .into_iter()
                .zip(needs)
                .map(|(g, &need)| need.then_some(g))
                .collect();
        }

        let mut g_w = vec![0.0; n];
        let mut g_k = vec![0.0; k.len()];
        let mut g_a = vec![0.0; n]; // d/d(α_i · t)
        let mut g_phase = 0.0;

        let mut row = vec![(0.0, 0.0); if self.table.is_empty() { n } else { 0 }];
        for i in 0..n {
            let g_i = grad[i];
            if g_i == 0.0 {
                continue;
            }
            let a_i = geom.alpha_at(alpha, i) * t;
            let pairs: &[(f64, f64)] = if self.table.is_empty() {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = (a_i * (w[i] - w[j]) + phase).sin_cos();
                }
                &row
            } else {
                &self.table[i * n..(i + 1) * n]
            };
            let mut sum_cc = 0.0; // Σ_j c_ij cos θ_ij
            let mut sum_ccd = 0.0; // Σ_j c_ij cos θ_ij (w_i − w_j)
            for (j, &(s, c)) in pairs.iter().enumerate() {
                let c_ij = geom.coupling(k, i, j) * inv_n;
                let cc = c_ij * c;
                sum_cc += cc;
                sum_ccd += cc * (w[i] - w[j]);
                g_w[j] -= g_i * a_i * cc;
                match geom.mode {
                    CouplingMode::Scalar => g_k[0] += g_i * s * inv_n,
                    CouplingMode::Rank1 => g_k[i] += g_i * s * inv_n,
                    CouplingMode::Full => g_k[i * n + j] += g_i * s * inv_n,
                }
            }
            g_w[i] += g_i * a_i * sum_cc;
            g_a[i] = g_i * sum_ccd;
            g_phase += g_i * sum_cc;
        }

        let g_alpha = if geom.per_weight_alpha {
            g_a.iter().map(|v| v * t).collect()
        } else {
            vec![g_a.iter().sum::<f64>() * t]
        };
        let g_t = (0..n)
            .map(|i| g_a[i] * geom.alpha_at(alpha, i))
            .sum::<f64>()
            + g_phase * beta;

        let out = [
            g_w,
            g_k,
            g_alpha,
            vec![g_phase * t],
            vec![g_phase],
            vec![g_t],
        ];
        out.into_iter()
            .zip(needs)
            .map(|(g, &need)| need.then_some(g))
            .collect()
    }
}
