use super::{IrregularSeries, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which cells of a batch a target or loss refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cells {
    Observed,
    Heldout,
}

/// Several series aligned to the sorted union of their time points.
///
/// Cell arrays are laid out `[sample][time][feature]`. Values are stored
/// only where a cell is observed or heldout and are literal zeros elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub times: Vec<f64>,
    pub n_features: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub heldout: Vec<bool>,
    /// `[sample][time]`: whether the sample has this time point at all.
    pub present: Vec<bool>,
    pub labels: Vec<Option<Label>>,
}

/// Aligns `series[indices]` on the union of their time grids.
pub fn batch(series: &[IrregularSeries], indices: &[usize]) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let members: Vec<&IrregularSeries> = indices
        .iter()
        .map(|&i| {
            series.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("batch index {i} out of range ({})", series.len()))
            })
        })
        .collect::<Result<_>>()?;
    let d = members[0].n_features();
    if members.iter().any(|s| s.n_features() != d) {
        return Err(Error::InvalidSeries(
            "batch members disagree on feature count".into(),
        ));
    }
    let mut times: Vec<f64> = members
        .iter()
        .flat_map(|s| s.times().iter().copied())
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let n_t = times.len();
    let b = members.len();

    let mut out = Batch {
        ids: members.iter().map(|s| s.id().to_string()).collect(),
        times,
        n_features: d,
        values: vec![0.0; b * n_t * d],
        mask: vec![false; b * n_t * d],
        heldout: vec![false; b * n_t * d],
        present: vec![false; b * n_t],
        labels: members.iter().map(|s| s.label().cloned()).collect(),
    };
    for (i, s) in members.iter().enumerate() {
        // both grids are sorted, so walk them together
        let mut u = 0;
        for (k, &t) in s.times().iter().enumerate() {
            while out.times[u] < t {
                u += 1;
            }
            out.present[i * n_t + u] = true;
            for f in 0..d {
                let c = (i * n_t + u) * d + f;
                if s.is_observed(k, f) {
                    out.mask[c] = true;
                    out.values[c] = s.value(k, f);
                } else if s.is_heldout(k, f) {
                    out.heldout[c] = true;
                    out.values[c] = s.value(k, f);
                }
            }
        }
    }
    Ok(out)
}

impl Batch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    fn cell(&self, i: usize, t: usize, f: usize) -> usize {
        (i * self.times.len() + t) * self.n_features + f
    }

    pub fn cells(&self, which: Cells) -> &[bool] {
        match which {
            Cells::Observed => &self.mask,
            Cells::Heldout => &self.heldout,
        }
    }

    pub fn count(&self, which: Cells) -> usize {
        self.cells(which).iter().filter(|&&m| m).count()
    }

    /// Whether any sample has an observed cell at union index `t`.
    pub fn any_observed_at(&self, t: usize) -> bool {
        (0..self.size()).any(|i| (0..self.n_features).any(|f| self.mask[self.cell(i, t, f)]))
    }

    /// `[B, 2D]` encoder input at union index `t`: observed values (zero
    /// elsewhere) followed by the 0/1 mask.
    pub fn input_at(&self, t: usize) -> Tensor {
        let (b, d) = (self.size(), self.n_features);
        let mut data = vec![0.0; b * 2 * d];
        for i in 0..b {
            for f in 0..d {
                let c = self.cell(i, t, f);
                if self.mask[c] {
                    data[i * 2 * d + f] = self.values[c];
                    data[i * 2 * d + d + f] = 1.0;
                }
            }
        }
        Tensor::from_parts(vec![b, 2 * d], data.into(), None)
    }

    /// Per-row 0/1 flag: sample `i` has at least one observed cell at `t`.
    pub fn rows_observed_at(&self, t: usize) -> Vec<bool> {
        (0..self.size())
            .map(|i| (0..self.n_features).any(|f| self.mask[self.cell(i, t, f)]))
            .collect()
    }

    /// `[B, D]` targets and 0/1 weights at union index `t`; values outside
    /// the selected cells are literal zeros, so nothing else leaks through.
    pub fn target_at(&self, t: usize, which: Cells) -> (Tensor, Tensor) {
        let (b, d) = (self.size(), self.n_features);
        let sel = self.cells(which);
        let mut vals = vec![0.0; b * d];
        let mut w = vec![0.0; b * d];
        for i in 0..b {
            for f in 0..d {
                let c = self.cell(i, t, f);
                if sel[c] {
                    vals[i * d + f] = self.values[c];
                    w[i * d + f] = 1.0;
                }
            }
        }
        (
            Tensor::from_parts(vec![b, d], vals.into(), None),
            Tensor::from_parts(vec![b, d], w.into(), None),
        )
    }

    /// Copy with every heldout value replaced by `f(old)`.
    pub fn map_heldout(&self, mut f: impl FnMut(f64) -> f64) -> Batch {
        let mut out = self.clone();
        for (v, &h) in out.values.iter_mut().zip(&self.heldout) {
            if h {
                *v = f(*v);
            }
        }
        out
    }

    /// Copy keeping only observed cells whose time satisfies `keep`.
    pub fn observed_where(&self, keep: impl Fn(f64) -> bool) -> Batch {
        let mut out = self.clone();
        let (n_t, d) = (self.n_times(), self.n_features);
        for c in 0..out.mask.len() {
            if out.mask[c] && !keep(self.times[(c / d) % n_t]) {
                out.mask[c] = false;
                out.values[c] = 0.0;
            }
        }
        out
    }

    /// Restricts the heldout cells to those with time strictly after `cut`.
    pub fn heldout_after(&self, cut: f64) -> Batch {
        let mut out = self.clone();
        let (n_t, d) = (self.n_times(), self.n_features);
        for c in 0..out.heldout.len() {
            if out.heldout[c] && self.times[(c / d) % n_t] <= cut {
                out.heldout[c] = false;
                out.values[c] = 0.0;
            }
        }
        out
    }

    pub fn class_labels(&self) -> Option<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| match l {
                Some(Label::Class(c)) => Some(*c),
                _ => None,
            })
            .collect()
    }
}
