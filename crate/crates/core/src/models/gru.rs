use rand::Rng;

use super::Layer;
use crate::error::{Error, Result};
use crate::scaling::{StaticLayer, TemporalOptions, TemporalWeightLayer};
use crate::tensor::{Parameter, Parameterized, Tape, Tensor};

/// GRU cell:
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// n  = tanh(x·Wn + (r∘h)·Un + bn)
/// h' = (1 − z)∘n + z∘h
/// ```
///
/// With temporal options every `W` and `U` becomes `S(W, t)` at the
/// observation time; the biases stay static.
#[derive(Clone, Debug)]
pub struct GruCell {
    input: usize,
    hidden: usize,
    xz: Layer,
    hz: Layer,
    xr: Layer,
    hr: Layer,
    xn: Layer,
    hn: Layer,
}

impl GruCell {
    pub fn new(
        name: &str,
        input: usize,
        hidden: usize,
        temporal: Option<&TemporalOptions>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layer = |gate: String, d_in: usize, bias: bool| -> Result<Layer> {
            Ok(match temporal {
                Some(opts) => Layer::Temporal(TemporalWeightLayer::new(
                    &gate, d_in, hidden, bias, opts, rng,
                )?),
                None => Layer::Static(StaticLayer::new(&gate, d_in, hidden, bias, rng)),
            })
        };
        let (xz, xr, xn) = (
            layer(format!("{name}.xz"), input, true)?,
            layer(format!("{name}.xr"), input, true)?,
            layer(format!("{name}.xn"), input, true)?,
        );
        let (hz, hr, hn) = (
            layer(format!("{name}.hz"), hidden, false)?,
            layer(format!("{name}.hr"), hidden, false)?,
            layer(format!("{name}.hn"), hidden, false)?,
        );
        Ok(Self {
            input,
            hidden,
            xz,
            hz,
            xr,
            hr,
            xn,
            hn,
        })
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn is_temporal(&self) -> bool {
        self.xz.is_temporal()
    }

    /// Plain GRU step at time `t` for every row.
    pub fn step(&self, tape: &Tape, t: f64, h: &Tensor, x: &Tensor) -> Result<Tensor> {
        let z =
            tape.sigmoid(&tape.add(&self.xz.forward(tape, x, t)?, &self.hz.forward(tape, h, t)?)?)?;
        let r =
            tape.sigmoid(&tape.add(&self.xr.forward(tape, x, t)?, &self.hr.forward(tape, h, t)?)?)?;
        let rh = tape.mul(&r, h)?;
        let n = tape.tanh(&tape.add(
            &self.xn.forward(tape, x, t)?,
            &self.hn.forward(tape, &rh, t)?,
        )?)?;
        // (1 − z)∘n + z∘h = n + z∘(h − n)
        tape.add(&n, &tape.mul(&z, &tape.sub(h, &n)?)?)
    }

    /// GRU step on rows flagged in `rows`; other rows keep `h` exactly.
    pub fn update(
        &self,
        tape: &Tape,
        t: f64,
        h: &Tensor,
        x: &Tensor,
        rows: &[bool],
    ) -> Result<Tensor> {
        let b = h.shape().first().copied().unwrap_or(0);
        if h.rank() != 2
            || h.shape()[1] != self.hidden
            || x.rank() != 2
            || x.shape() != [b, self.input]
        {
            return Err(Error::ShapeMismatch {
                op: "gru",
                lhs: h.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        if rows.len() != b {
            return Err(Error::ShapeMismatch {
                op: "gru_rows",
                lhs: vec![b],
                rhs: vec![rows.len()],
            });
        }
        if rows.iter().all(|&r| !r) {
            return Ok(h.clone());
        }
        let next = self.step(tape, t, h, x)?;
        if rows.iter().all(|&r| r) {
            return Ok(next);
        }
        let keep: Vec<f64> = rows
            .iter()
            .flat_map(|&r| std::iter::repeat_n(if r { 1.0 } else { 0.0 }, self.hidden))
            .collect();
        let keep = Tensor::new(vec![b, self.hidden], keep)?;
        tape.add(h, &tape.mul(&keep, &tape.sub(&next, h)?)?)
    }
}

impl Parameterized for GruCell {
    fn params(&self) -> Vec<&Parameter> {
        [&self.xz, &self.hz, &self.xr, &self.hr, &self.xn, &self.hn]
            .into_iter()
            .flat_map(Parameterized::params)
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        [
            &mut self.xz,
            &mut self.hz,
            &mut self.xr,
            &mut self.hr,
            &mut self.xn,
            &mut self.hn,
        ]
        .into_iter()
        .flat_map(Parameterized::params_mut)
        .collect()
    }
}
