use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    /// One class for the whole series.
    Class(usize),
    /// One class per time point.
    PerTime(Vec<usize>),
}

/// One multivariate series observed at arbitrary times.
///
/// `mask` marks cells available for training and `heldout` marks cells
/// reserved for evaluation; a cell is never both. Values at cells marked by
/// neither are placeholders and are never read.
#[derive(Clone, Debug, PartialEq)]
pub struct IrregularSeries {
    id: String,
    times: Vec<f64>,
    n_features: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    heldout: Vec<bool>,
    label: Option<Label>,
}

impl IrregularSeries {
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        n_features: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
        heldout: Vec<bool>,
        label: Option<Label>,
    ) -> Result<Self> {
        let id = id.into();
        let cells = times.len() * n_features;
        if n_features == 0 {
            return Err(Error::InvalidSeries(format!("{id}: no features")));
        }
        if values.len() != cells || mask.len() != cells || heldout.len() != cells {
            return Err(Error::InvalidSeries(format!(
                "{id}: expected {cells} cells, got values {}, mask {}, heldout {}",
                values.len(),
                mask.len(),
                heldout.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::NonMonotoneTimes(format!(
                "{id}: times must be finite and strictly increasing"
            )));
        }
        for c in 0..cells {
            if mask[c] && heldout[c] {
                return Err(Error::InvalidSeries(format!(
                    "{id}: cell {c} is both observed and heldout"
                )));
            }
            if (mask[c] || heldout[c]) && !values[c].is_finite() {
                return Err(Error::InvalidSeries(format!(
                    "{id}: non-finite value at cell {c}"
                )));
            }
        }
        if let Some(Label::PerTime(labels)) = &label {
            if labels.len() != times.len() {
                return Err(Error::InvalidSeries(format!(
                    "{id}: per-time labels must match times"
                )));
            }
        }
        Ok(Self {
            id,
            times,
            n_features,
            values,
            mask,
            heldout,
            label,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn heldout(&self) -> &[bool] {
        &self.heldout
    }

    pub fn label(&self) -> Option<&Label> {
        self.label.as_ref()
    }

    pub fn value(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.n_features + d]
    }

    pub fn is_observed(&self, t: usize, d: usize) -> bool {
        self.mask[t * self.n_features + d]
    }

    pub fn is_heldout(&self, t: usize, d: usize) -> bool {
        self.heldout[t * self.n_features + d]
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn n_heldout(&self) -> usize {
        self.heldout.iter().filter(|&&m| m).count()
    }

    /// Whether any feature is observed at time index `t`.
    pub fn row_observed(&self, t: usize) -> bool {
        self.mask[t * self.n_features..(t + 1) * self.n_features]
            .iter()
            .any(|&m| m)
    }

    /// Copy with `f(cell, value)` applied to every value.
    pub fn map_values(&self, mut f: impl FnMut(usize, f64) -> f64) -> Result<Self> {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(c, &v)| f(c, v))
            .collect();
        Self::new(
            self.id.clone(),
            self.times.clone(),
            self.n_features,
            values,
            self.mask.clone(),
            self.heldout.clone(),
            self.label.clone(),
        )
    }

    pub fn with_label(mut self, label: Option<Label>) -> Result<Self> {
        if let Some(Label::PerTime(l)) = &label {
            if l.len() != self.times.len() {
                return Err(Error::InvalidSeries(format!(
                    "{}: per-time labels must match times",
                    self.id
                )));
            }
        }
        self.label = label;
        Ok(self)
    }

    pub fn with_heldout(&self, heldout: Vec<bool>, values: Vec<f64>) -> Result<Self> {
        Self::new(
            self.id.clone(),
            self.times.clone(),
            self.n_features,
            values,
            self.mask.clone(),
            heldout,
            self.label.clone(),
        )
    }
}
