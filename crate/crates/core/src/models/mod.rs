//! ODE vector fields built from static or temporal layers, the GRU cell,
//! the ODE-RNN encoder and the Latent ODE.

mod gru;
mod latent;

use rand::Rng;

pub use gru::GruCell;
pub use latent::{ClassifierInput, LatentOdeModel, ModelConfig, ModelOutput, OdeRnnEncoder};

use crate::error::{Error, Result};
use crate::scaling::{StaticLayer, TemporalOptions, TemporalWeightLayer};
use crate::solver::OdeRhs;
use crate::tensor::{Parameter, Parameterized, Tape, Tensor};

#[derive(Clone, Debug)]
pub enum Layer {
    Static(StaticLayer),
    Temporal(TemporalWeightLayer),
}

impl Layer {
    pub fn d_in(&self) -> usize {
        match self {
            Layer::Static(l) => l.d_in(),
            Layer::Temporal(l) => l.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Layer::Static(l) => l.d_out(),
            Layer::Temporal(l) => l.d_out(),
        }
    }

    pub fn is_temporal(&self) -> bool {
        matches!(self, Layer::Temporal(_))
    }

    /// `x·W + b`, with `W` taken at time `t` for a temporal layer.
    pub fn forward(&self, tape: &Tape, x: &Tensor, t: f64) -> Result<Tensor> {
        match self {
            Layer::Static(l) => l.forward(tape, x),
            Layer::Temporal(l) => l.forward(tape, x, &Tensor::scalar(t)),
        }
    }
}

impl Parameterized for Layer {
    fn params(&self) -> Vec<&Parameter> {
        match self {
            Layer::Static(l) => l.params(),
            Layer::Temporal(l) => l.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Layer::Static(l) => l.params_mut(),
            Layer::Temporal(l) => l.params_mut(),
        }
    }
}

/// Weights of every temporal layer at a few recent times. RK4 evaluates
/// its two middle stages at the same time and each step starts where the
/// previous one ended, so two slots already halve the scaling work.
#[derive(Default)]
pub struct WeightCache {
    slots: Vec<(u64, Vec<Option<Tensor>>)>,
}

const CACHE_SLOTS: usize = 3;

/// `dh/dt = f(t, h)`: a stack of layers with tanh after every one.
#[derive(Clone, Debug)]
pub struct OdeFuncNet {
    layers: Vec<Layer>,
}

impl OdeFuncNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let (Some(first), Some(last)) = (layers.first(), layers.last()) else {
            return Err(Error::InvalidArgument(
                "an ODE function needs at least one layer".into(),
            ));
        };
        if first.d_in() != last.d_out() {
            return Err(Error::ShapeMismatch {
                op: "ode_func",
                lhs: vec![first.d_in()],
                rhs: vec![last.d_out()],
            });
        }
        for w in layers.windows(2) {
            if w[0].d_out() != w[1].d_in() {
                return Err(Error::ShapeMismatch {
                    op: "ode_func",
                    lhs: vec![w[0].d_out()],
                    rhs: vec![w[1].d_in()],
                });
            }
        }
        Ok(Self { layers })
    }

    /// `width → units → … → width` with `n_layers` weight layers.
    pub fn build(
        name: &str,
        width: usize,
        units: usize,
        n_layers: usize,
        temporal: Option<&TemporalOptions>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_layers == 0 || width == 0 || units == 0 {
            return Err(Error::InvalidArgument(
                "ODE function sizes must be positive".into(),
            ));
        }
        let mut dims = vec![width];
        dims.extend(std::iter::repeat_n(units, n_layers - 1));
        dims.push(width);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let lname = format!("{name}.{i}");
                Ok(match temporal {
                    Some(opts) => Layer::Temporal(TemporalWeightLayer::new(
                        &lname, d[0], d[1], true, opts, rng,
                    )?),
                    None => Layer::Static(StaticLayer::new(&lname, d[0], d[1], true, rng)),
                })
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    pub fn width(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn is_temporal(&self) -> bool {
        self.layers.iter().any(Layer::is_temporal)
    }

    /// Vector field at time `t` for a `batch × width` state.
    pub fn forward(&self, tape: &Tape, t: f64, h: &Tensor) -> Result<Tensor> {
        self.forward_cached(tape, t, h, &mut WeightCache::default())
    }

    /// As [`Self::forward`], reusing temporal weights already built for `t`
    /// on this tape.
    pub fn forward_cached(
        &self,
        tape: &Tape,
        t: f64,
        h: &Tensor,
        cache: &mut WeightCache,
    ) -> Result<Tensor> {
        if h.rank() != 2 || h.shape()[1] != self.width() {
            return Err(Error::ShapeMismatch {
                op: "ode_func",
                lhs: h.shape().to_vec(),
                rhs: vec![self.width()],
            });
        }
        let key = t.to_bits();
        let slot = match cache.slots.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                let time = Tensor::scalar(t);
                let weights = self
                    .layers
                    .iter()
                    .map(|l| match l {
                        Layer::Temporal(l) => l.scale(tape, &time).map(Some),
                        Layer::Static(_) => Ok(None),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if cache.slots.len() == CACHE_SLOTS {
                    cache.slots.remove(0);
                }
                cache.slots.push((key, weights));
                cache.slots.len() - 1
            }
        };
        let weights = &cache.slots[slot].1;
        let mut x = h.clone();
        for (layer, w) in self.layers.iter().zip(weights) {
            let z = match (layer, w) {
                (Layer::Static(l), _) => l.forward(tape, &x)?,
                (Layer::Temporal(l), Some(w)) => l.forward_with(tape, &x, w)?,
                (Layer::Temporal(_), None) => unreachable!("temporal layers always get weights"),
            };
            x = tape.tanh(&z)?;
        }
        Ok(x)
    }

    /// An [`OdeRhs`] view with its own weight cache, for one tape.
    pub fn rhs(&self) -> NetRhs<'_> {
        NetRhs {
            net: self,
            cache: WeightCache::default(),
        }
    }
}

pub struct NetRhs<'a> {
    net: &'a OdeFuncNet,
    cache: WeightCache,
}

impl OdeRhs for NetRhs<'_> {
    fn eval(&mut self, tape: &Tape, t: f64, h: &Tensor) -> Result<Tensor> {
        self.net.forward_cached(tape, t, h, &mut self.cache)
    }
}

impl Parameterized for OdeFuncNet {
    fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(Parameterized::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(Parameterized::params_mut)
            .collect()
    }
}
