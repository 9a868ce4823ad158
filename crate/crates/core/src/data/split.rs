use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{IrregularSeries, NormStats};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.0,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0)
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        if self.train <= 0.0 {
            return Err(Error::Config("train fraction must be positive".into()));
        }
        Ok(())
    }

    /// (train, validation) counts; test takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize) {
        let n_train = ((self.train * n as f64).round() as usize).clamp(1, n);
        let n_val = ((self.validation * n as f64).round() as usize).min(n - n_train);
        (n_train, n_val)
    }
}

/// Disjoint sample-level partition plus the normalization stats in use
/// (identity until [`super::normalize`] is applied).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<IrregularSeries>,
    pub validation: Vec<IrregularSeries>,
    pub test: Vec<IrregularSeries>,
    pub stats: NormStats,
}

/// Shuffles samples with a seed-derived stream and cuts them by fraction.
pub fn split_dataset(
    series: Vec<IrregularSeries>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplit> {
    fractions.validate()?;
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    let d = series[0].n_features();
    if series.iter().any(|s| s.n_features() != d) {
        return Err(Error::InvalidSeries(
            "samples disagree on feature count".into(),
        ));
    }
    let mut order: Vec<usize> = (0..series.len()).collect();
    order.shuffle(&mut rng_for(seed, "split"));
    let (n_train, n_val) = fractions.counts(series.len());
    let mut slots: Vec<Option<IrregularSeries>> = series.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| {
        idx.iter()
            .map(|&i| slots[i].take().expect("index used once"))
            .collect::<Vec<_>>()
    };
    let train = take(&order[..n_train]);
    let validation = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(DatasetSplit {
        train,
        validation,
        test,
        stats: NormStats::identity(d),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn eighty_twenty() {
        let spec = SyntheticSpec {
            n_samples: 100,
            ..SyntheticSpec::default()
        };
        let split = split_dataset(
            generate_synthetic(&spec).unwrap(),
            SplitFractions::default(),
            3,
        )
        .unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (80, 0, 20)
        );
        let ids: HashSet<&str> = split
            .train
            .iter()
            .chain(&split.test)
            .map(|s| s.id())
            .collect();
        assert_eq!(ids.len(), 100);
        let again = split_dataset(
            generate_synthetic(&spec).unwrap(),
            SplitFractions::default(),
            3,
        )
        .unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn rejects_bad_fractions() {
        let f = SplitFractions {
            train: 0.5,
            validation: 0.1,
            test: 0.1,
        };
        assert!(f.validate().is_err());
    }
}
