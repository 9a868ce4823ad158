use serde::{Deserialize, Serialize};

use super::{DatasetSplit, IrregularSeries};
use crate::error::Result;

/// Per-feature standardization fitted on training observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    /// Mean and population std over observed cells. A feature with fewer
    /// than two observations or zero spread is left unscaled (0, 1).
    pub fn fit(series: &[IrregularSeries]) -> Self {
        let d = series.first().map_or(0, IrregularSeries::n_features);
        let mut stats = Self::identity(d);
        for f in 0..d {
            let obs: Vec<f64> = series
                .iter()
                .flat_map(|s| {
                    (0..s.n_times())
                        .filter(move |&t| s.is_observed(t, f))
                        .map(move |t| s.value(t, f))
                })
                .collect();
            if obs.len() < 2 {
                continue;
            }
            let n = obs.len() as f64;
            let mean = obs.iter().sum::<f64>() / n;
            let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std > 0.0 && std.is_finite() {
                stats.mean[f] = mean;
                stats.std[f] = std;
            }
        }
        stats
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.std.iter().all(|&s| s == 1.0)
    }

    pub fn apply_value(&self, feature: usize, v: f64) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }

    pub fn denormalize_value(&self, feature: usize, v: f64) -> f64 {
        v * self.std[feature] + self.mean[feature]
    }

    fn map(&self, s: &IrregularSeries, f: impl Fn(usize, f64) -> f64) -> Result<IrregularSeries> {
        let d = s.n_features();
        s.map_values(|c, v| {
            if s.mask()[c] || s.heldout()[c] {
                f(c % d, v)
            } else {
                v
            }
        })
    }

    /// Standardizes observed and heldout cells.
    pub fn apply(&self, s: &IrregularSeries) -> Result<IrregularSeries> {
        self.map(s, |f, v| self.apply_value(f, v))
    }

    pub fn denormalize(&self, s: &IrregularSeries) -> Result<IrregularSeries> {
        self.map(s, |f, v| self.denormalize_value(f, v))
    }
}

/// Fits stats on the training observations and standardizes every part.
pub fn normalize(split: &DatasetSplit) -> Result<DatasetSplit> {
    let stats = NormStats::fit(&split.train);
    let apply = |set: &[IrregularSeries]| {
        set.iter()
            .map(|s| stats.apply(s))
            .collect::<Result<Vec<_>>>()
    };
    Ok(DatasetSplit {
        train: apply(&split.train)?,
        validation: apply(&split.validation)?,
        test: apply(&split.test)?,
        stats: stats.clone(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn series(values: Vec<f64>, d: usize) -> IrregularSeries {
        let t = values.len() / d;
        let n = values.len();
        IrregularSeries::new(
            "n",
            (0..t).map(|i| i as f64).collect(),
            d,
            values,
            vec![true; n],
            vec![false; n],
            None,
        )
        .unwrap()
    }

    fn split_of(train: Vec<IrregularSeries>) -> DatasetSplit {
        let d = train[0].n_features();
        DatasetSplit {
            train,
            validation: vec![],
            test: vec![],
            stats: NormStats::identity(d),
        }
    }

    #[test]
    fn standardized_data_is_a_fixed_point() {
        let s = series(vec![-1.0, 1.0, -1.0, 1.0], 1);
        let out = normalize(&split_of(vec![s.clone()])).unwrap();
        assert!((out.stats.mean[0]).abs() < 1e-12 && (out.stats.std[0] - 1.0).abs() < 1e-12);
        for (a, b) in out.train[0].values().iter().zip(s.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_feature_left_unscaled() {
        let s = series(vec![3.0, 1.0, 3.0, 5.0], 2);
        let out = normalize(&split_of(vec![s])).unwrap();
        assert_eq!((out.stats.mean[0], out.stats.std[0]), (0.0, 1.0));
        assert_eq!(out.train[0].value(0, 0), 3.0);
        assert_eq!(out.stats.mean[1], 3.0);
    }

    #[test]
    fn heldout_cells_do_not_influence_stats() {
        let s = IrregularSeries::new(
            "h",
            vec![0.0, 1.0, 2.0],
            1,
            vec![0.0, 2.0, 1000.0],
            vec![true, true, false],
            vec![false, false, true],
            None,
        )
        .unwrap();
        let stats = NormStats::fit(&[s]);
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
            let s = series(values, 1);
            let stats = NormStats::fit(std::slice::from_ref(&s));
            let back = stats.denormalize(&stats.apply(&s).unwrap()).unwrap();
            for (a, b) in back.values().iter().zip(s.values()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
