//! Irregularly sampled series, the synthetic generator, CSV files,
//! normalization, splitting and union-grid batching.

mod batch;
mod csv_io;
mod normalize;
mod series;
mod split;
mod synthetic;

pub use batch::{batch, Batch, Cells};
pub use csv_io::{load_csv, load_dataset, read_csv, write_csv, write_dataset, CsvData};
pub use normalize::{normalize, NormStats};
pub use series::{IrregularSeries, Label};
pub use split::{split_dataset, DatasetSplit, SplitFractions};
pub use synthetic::{
    generate_synthetic, generate_synthetic_detailed, SyntheticParams, SyntheticSpec,
};
