//! CSV layout: header `sample_id,time,<f1>,...,<fD>[,label]`, one row per
//! (sample, time), an empty cell for a missing value. A dataset dump adds
//! a sibling `<name>.heldout.csv` with the same layout whose present cells
//! are the heldout ones.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{IrregularSeries, Label};
use crate::error::{Error, Result};

/// Series read from one CSV file, with the feature column names.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvData {
    pub features: Vec<String>,
    pub series: Vec<IrregularSeries>,
}

struct Row {
    line: usize,
    time: f64,
    cells: Vec<Option<f64>>,
    label: Option<usize>,
}

fn parse_err(line: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        row: line,
        col,
        msg: msg.into(),
    }
}

/// Rows grouped by sample id, in order of first appearance.
fn read_rows<R: Read>(reader: R) -> Result<(Vec<String>, bool, Vec<(String, Vec<Row>)>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "sample_id" || header[1] != "time" {
        return Err(parse_err(
            1,
            1,
            "header must start with sample_id,time and name at least one feature",
        ));
    }
    let has_label = header.last().map(String::as_str) == Some("label");
    let n_feat = header.len() - 2 - usize::from(has_label);
    if n_feat == 0 {
        return Err(parse_err(1, 3, "no feature columns"));
    }
    let features = header[2..2 + n_feat].to_vec();

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                record.len() + 1,
                format!("expected {} columns", header.len()),
            ));
        }
        let id = record[0].to_string();
        let time: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, 2, format!("invalid time {:?}", &record[1])))?;
        if !time.is_finite() {
            return Err(parse_err(line, 2, "time must be finite"));
        }
        let mut cells = Vec::with_capacity(n_feat);
        for d in 0..n_feat {
            let raw = record[2 + d].trim();
            if raw.is_empty() {
                cells.push(None);
            } else {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| parse_err(line, 3 + d, format!("invalid number {raw:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, 3 + d, "value must be finite"));
                }
                cells.push(Some(v));
            }
        }
        let label =
            if has_label {
                let raw = record[header.len() - 1].trim();
                if raw.is_empty() {
                    None
                } else {
                    Some(raw.parse().map_err(|_| {
                        parse_err(line, header.len(), format!("invalid label {raw:?}"))
                    })?)
                }
            } else {
                None
            };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row {
            line,
            time,
            cells,
            label,
        });
    }
    let grouped = order
        .into_iter()
        .map(|id| {
            let rows = groups.remove(&id).unwrap_or_default();
            (id, rows)
        })
        .collect();
    Ok((features, has_label, grouped))
}

fn sort_rows(id: &str, rows: &mut [Row]) -> Result<()> {
    rows.sort_by(|a, b| a.time.total_cmp(&b.time));
    for w in rows.windows(2) {
        if w[0].time == w[1].time {
            return Err(Error::DuplicateTime {
                sample: id.to_string(),
                time: w[0].time,
            });
        }
        if w[0].time > w[1].time {
            return Err(Error::NonMonotoneAfterSort(id.to_string()));
        }
    }
    Ok(())
}

fn label_of(id: &str, rows: &[Row]) -> Result<Option<Label>> {
    let labels: Vec<Option<usize>> = rows.iter().map(|r| r.label).collect();
    if labels.iter().all(Option::is_none) {
        return Ok(None);
    }
    if labels.iter().any(Option::is_none) {
        return Err(parse_err(
            rows[labels.iter().position(Option::is_none).unwrap_or(0)].line,
            0,
            format!("sample {id} has partially missing labels"),
        ));
    }
    let labels: Vec<usize> = labels.into_iter().flatten().collect();
    if labels.windows(2).all(|w| w[0] == w[1]) {
        Ok(Some(Label::Class(labels[0])))
    } else {
        Ok(Some(Label::PerTime(labels)))
    }
}

/// Parses series from CSV text; every present cell is observed.
pub fn read_csv<R: Read>(reader: R) -> Result<CsvData> {
    let (features, _, groups) = read_rows(reader)?;
    let d = features.len();
    let mut series = Vec::with_capacity(groups.len());
    for (id, mut rows) in groups {
        sort_rows(&id, &mut rows)?;
        let label = label_of(&id, &rows)?;
        let times = rows.iter().map(|r| r.time).collect();
        let mut values = Vec::with_capacity(rows.len() * d);
        let mut mask = Vec::with_capacity(rows.len() * d);
        for r in &rows {
            for c in &r.cells {
                values.push(c.unwrap_or(0.0));
                mask.push(c.is_some());
            }
        }
        let n = values.len();
        series.push(IrregularSeries::new(
            id,
            times,
            d,
            values,
            mask,
            vec![false; n],
            label,
        )?);
    }
    Ok(CsvData { features, series })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<CsvData> {
    read_csv(File::open(path)?)
}

fn fmt_value(v: f64) -> String {
    // shortest representation that parses back to the same f64
    format!("{v:?}")
}

/// Writes observed cells (or heldout cells when `heldout` is set).
pub fn write_csv<W: Write>(
    writer: W,
    features: &[String],
    series: &[IrregularSeries],
    heldout: bool,
) -> Result<()> {
    let has_label = series.iter().any(|s| s.label().is_some());
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["sample_id".to_string(), "time".to_string()];
    header.extend(features.iter().cloned());
    if has_label {
        header.push("label".into());
    }
    wtr.write_record(&header)?;
    for s in series {
        if s.n_features() != features.len() {
            return Err(Error::InvalidSeries(format!(
                "{} has {} features, header has {}",
                s.id(),
                s.n_features(),
                features.len()
            )));
        }
        for (k, &t) in s.times().iter().enumerate() {
            let mut rec = vec![s.id().to_string(), fmt_value(t)];
            for d in 0..s.n_features() {
                let present = if heldout {
                    s.is_heldout(k, d)
                } else {
                    s.is_observed(k, d)
                };
                rec.push(if present {
                    fmt_value(s.value(k, d))
                } else {
                    String::new()
                });
            }
            if has_label {
                rec.push(match s.label() {
                    Some(Label::Class(c)) => c.to_string(),
                    Some(Label::PerTime(l)) => l[k].to_string(),
                    None => String::new(),
                });
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn heldout_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    path.with_file_name(format!("{stem}.heldout.csv"))
}

/// Writes `path` and its heldout sibling.
pub fn write_dataset(
    path: impl AsRef<Path>,
    features: &[String],
    series: &[IrregularSeries],
) -> Result<()> {
    let path = path.as_ref();
    write_csv(File::create(path)?, features, series, false)?;
    write_csv(File::create(heldout_path(path))?, features, series, true)
}

/// Loads `path` and, when present, merges its heldout sibling.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<CsvData> {
    let path = path.as_ref();
    let mut data = load_csv(path)?;
    let hpath = heldout_path(path);
    if !hpath.exists() {
        return Ok(data);
    }
    let held = load_csv(&hpath)?;
    if held.features != data.features {
        return Err(Error::InvalidSeries(
            "heldout file has different feature columns".into(),
        ));
    }
    let by_id: HashMap<&str, &IrregularSeries> = held.series.iter().map(|s| (s.id(), s)).collect();
    let d = data.features.len();
    for s in &mut data.series {
        let Some(h) = by_id.get(s.id()) else { continue };
        let mut values = s.values().to_vec();
        let mut heldout = vec![false; values.len()];
        for (hk, ht) in h.times().iter().enumerate() {
            let k = s.times().iter().position(|t| t == ht).ok_or_else(|| {
                Error::InvalidSeries(format!("heldout time {ht} not in sample {}", s.id()))
            })?;
            for f in 0..d {
                if h.is_observed(hk, f) {
                    heldout[k * d + f] = true;
                    values[k * d + f] = h.value(hk, f);
                }
            }
        }
        *s = s.with_heldout(heldout, values)?;
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn parse(text: &str) -> Result<CsvData> {
        read_csv(text.as_bytes())
    }

    #[test]
    fn complete_rows() {
        let data = parse("sample_id,time,a,b\nx,0.5,1,2\nx,0.0,3,4\n").unwrap();
        let s = &data.series[0];
        assert_eq!(s.times(), &[0.0, 0.5]);
        assert!(s.mask().iter().all(|&m| m));
        assert_eq!(s.values(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn empty_cell_is_missing() {
        let data = parse("sample_id,time,a,b,c\nx,0,1,2,3\nx,1,4,5,\n").unwrap();
        let s = &data.series[0];
        assert!(!s.is_observed(1, 2));
        assert!(s.is_observed(1, 1));
    }

    #[test]
    fn errors_report_position() {
        match parse("sample_id,time,a\nx,0,1\nx,1,oops\n") {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (3, 3)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse("sample_id,time,a\nx,0,1\nx,0,2\n"),
            Err(Error::DuplicateTime { .. })
        ));
        assert!(matches!(parse("id,t,a\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn labels() {
        let data = parse("sample_id,time,a,label\nx,0,1,1\nx,1,2,1\ny,0,1,0\ny,1,1,2\n").unwrap();
        assert_eq!(data.series[0].label(), Some(&Label::Class(1)));
        assert_eq!(data.series[1].label(), Some(&Label::PerTime(vec![0, 2])));
    }

    #[test]
    fn dataset_with_heldout_sibling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.csv");
        let s = IrregularSeries::new(
            "z",
            vec![0.0, 0.25, 0.5],
            1,
            vec![1.0, -2.5, 0.125],
            vec![true, false, false],
            vec![false, true, true],
            None,
        )
        .unwrap();
        write_dataset(&path, &["y".to_string()], std::slice::from_ref(&s)).unwrap();
        assert!(dir.path().join("synth.heldout.csv").exists());
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.series[0], s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn round_trip_keeps_observed_cells(
            n_times in 1usize..8,
            n_feat in 1usize..4,
            seed in proptest::collection::vec((-1e6f64..1e6, proptest::bool::ANY), 32),
            gaps in proptest::collection::vec(1e-3f64..10.0, 8),
        ) {
            let mut times = Vec::new();
            let mut t = -3.0;
            for g in gaps.iter().take(n_times) { t += g; times.push(t); }
            let cells = n_times * n_feat;
            let values: Vec<f64> = (0..cells).map(|c| seed[c % 32].0).collect();
            let mask: Vec<bool> = (0..cells).map(|c| seed[c % 32].1).collect();
            let s = IrregularSeries::new("p", times, n_feat, values, mask, vec![false; cells], None).unwrap();
            let features: Vec<String> = (0..n_feat).map(|d| format!("f{d}")).collect();
            let mut buf = Vec::new();
            write_csv(&mut buf, &features, std::slice::from_ref(&s), false).unwrap();
            let back = read_csv(buf.as_slice()).unwrap();
            let b = &back.series[0];
            prop_assert_eq!(b.times(), s.times());
            prop_assert_eq!(b.mask(), s.mask());
            for c in 0..cells {
                if s.mask()[c] { prop_assert_eq!(b.values()[c], s.values()[c]); }
            }
        }
    }
}
