//! Reading and writing datasets: canonical JSON and long-format CSV.
//!
//! JSON: `{"series": [{"id": "a", "t": [..], "y": [[..], ..]}]}`.
//! CSV-long: header `series_id,t,y_1,..,y_n`, one row per sample. Rows of
//! different series may interleave, but within a series they must appear in
//! time order.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, TimeSeriesSample};
use crate::scalar::{lit, to_f64, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Json,
    CsvLong,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv-long" | "csv" => Ok(Self::CsvLong),
            other => Err(Error::InvalidOption(format!("unknown data format `{other}`"))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Json => "json",
            Self::CsvLong => "csv-long",
        })
    }
}

impl DataFormat {
    /// Guesses from the file extension; anything but `.csv` is JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Self::CsvLong,
            _ => Self::Json,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonSeries {
    id: String,
    t: Vec<f64>,
    y: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct JsonDataset {
    series: Vec<JsonSeries>,
}

fn reject_duplicates(id: &str, t: &[f64]) -> Result<()> {
    match t.windows(2).find(|w| w[0] == w[1]) {
        Some(w) => Err(Error::DuplicateTimestamp { id: id.to_string(), t: w[0] }),
        None => Ok(()),
    }
}

/// Shifts each series to `t_1 = 0` and validates.
fn finish<T: Real>(raw: Vec<(String, Vec<f64>, Vec<Vec<f64>>)>) -> Result<Dataset<T>> {
    let mut series = Vec::with_capacity(raw.len());
    for (id, t, y) in raw {
        reject_duplicates(&id, &t)?;
        let n = y.first().map_or(0, Vec::len);
        if y.len() != t.len() || y.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch { id });
        }
        let rows: Vec<Vec<T>> = y.iter().map(|r| r.iter().map(|&v| lit(v)).collect()).collect();
        let mut s = TimeSeriesSample::from_rows(id, t.iter().map(|&v| lit(v)).collect(), &rows);
        s.shift_to_origin();
        series.push(s);
    }
    Dataset::new(series)
}

pub fn read_json<T: Real>(text: &str) -> Result<Dataset<T>> {
    let file: JsonDataset =
        serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
    finish(file.series.into_iter().map(|s| (s.id, s.t, s.y)).collect())
}

pub fn read_csv_long<T: Real, R: Read>(input: R) -> Result<Dataset<T>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "series_id" || &header[1] != "t" {
        return Err(parse_err(1, "header must be series_id,t,y_1,...,y_n".into()));
    }
    let n = header.len() - 2;
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, (Vec<f64>, Vec<Vec<f64>>)> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let number = |field: &str| {
            field.parse::<f64>().map_err(|_| parse_err(line, format!("`{field}` is not a number")))
        };
        let id = record[0].to_string();
        let t = number(&record[1])?;
        let y = (2..2 + n).map(|j| number(&record[j])).collect::<Result<Vec<f64>>>()?;
        let entry = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (Vec::new(), Vec::new())
        });
        if let Some(&last) = entry.0.last() {
            if t == last {
                return Err(Error::DuplicateTimestamp { id, t });
            }
            if t < last {
                return Err(parse_err(line, format!("series `{id}`: row out of time order ({t} after {last})")));
            }
        }
        entry.0.push(t);
        entry.1.push(y);
    }
    finish(
        order
            .into_iter()
            .map(|id| {
                let (t, y) = by_id.remove(&id).expect("every id was inserted");
                (id, t, y)
            })
            .collect(),
    )
}

pub fn load_dataset<T: Real>(path: &Path, format: DataFormat) -> Result<Dataset<T>> {
    match format {
        DataFormat::Json => read_json(&std::fs::read_to_string(path)?),
        DataFormat::CsvLong => read_csv_long(std::fs::File::open(path)?),
    }
}

pub fn write_json<T: Real, W: Write>(dataset: &Dataset<T>, out: W) -> Result<()> {
    let file = JsonDataset {
        series: dataset
            .series()
            .iter()
            .map(|s| JsonSeries {
                id: s.id.clone(),
                t: s.timestamps.iter().map(|&v| to_f64(v)).collect(),
                y: s.observations.row_iter().map(|r| r.iter().map(|&v| to_f64(v)).collect()).collect(),
            })
            .collect(),
    };
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

pub fn write_csv_long<T: Real, W: Write>(dataset: &Dataset<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = vec!["series_id".to_string(), "t".to_string()];
    header.extend((1..=dataset.obs_dim()).map(|j| format!("y_{j}")));
    w.write_record(&header).map_err(io)?;
    for s in dataset.series() {
        for k in 0..s.len() {
            let mut row = vec![s.id.clone(), to_f64(s.timestamps[k]).to_string()];
            row.extend(s.observations.row(k).iter().map(|&v| to_f64(v).to_string()));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads ground-truth labels from a CSV with header `series_id,label` and
/// orders them like `ids`. Integer labels are used as given; any other label
/// set is numbered in sorted order.
pub fn read_labels<'a, R: Read>(input: R, ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<usize>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut raw: HashMap<String, String> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line() as usize), message: e.to_string() })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(Error::Parse { line, message: "expected series_id,label".into() });
        }
        if raw.insert(record[0].to_string(), record[1].to_string()).is_some() {
            return Err(Error::Parse { line, message: format!("series `{}` labelled twice", &record[0]) });
        }
    }
    let numeric: Option<HashMap<&str, usize>> = raw.iter().map(|(k, v)| v.parse().ok().map(|n| (k.as_str(), n))).collect();
    let index: HashMap<&str, usize> = match numeric {
        Some(n) => n,
        None => {
            let mut names: Vec<&str> = raw.values().map(String::as_str).collect();
            names.sort_unstable();
            names.dedup();
            raw.iter().map(|(k, v)| (k.as_str(), names.binary_search(&v.as_str()).expect("collected above"))).collect()
        }
    };
    ids.into_iter()
        .map(|id| index.get(id).copied().ok_or_else(|| Error::InvalidOption(format!("no label for series `{id}`"))))
        .collect()
}
