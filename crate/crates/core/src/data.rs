//! Observation matrices with missingness masks, and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved header name for the class label column.
pub const LABEL_COLUMN: &str = "label";
/// Reserved header name for the time column.
pub const TIME_COLUMN: &str = "time";
pub const MISSING_TOKEN: &str = "NA";

/// N × J observations. `mask[(i, j)]` is true when entry (i, j) is observed;
/// unobserved entries hold 0 in `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub mask: DMatrix<bool>,
    pub labels: Option<Vec<i64>>,
    pub time: Option<Vec<f64>>,
    pub columns: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    /// Fully observed dataset with default column names.
    pub fn new(y: DMatrix<f64>) -> Self {
        let (n, j) = y.shape();
        Self {
            mask: DMatrix::from_element(n, j, true),
            columns: (0..j).map(|k| format!("y{k}")).collect(),
            y,
            labels: None,
            time: None,
            provenance: String::new(),
        }
    }

    pub fn with_mask(mut self, mask: DMatrix<bool>) -> Result<Self> {
        if mask.shape() != self.y.shape() {
            return Err(Error::Dimension(format!(
                "mask is {:?}, observations are {:?}",
                mask.shape(),
                self.y.shape()
            )));
        }
        for (v, &m) in self.y.iter_mut().zip(mask.iter()) {
            if !m {
                *v = 0.0;
            }
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_time(mut self, time: Vec<f64>) -> Self {
        self.time = Some(time);
        self
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn j(&self) -> usize {
        self.y.ncols()
    }

    pub fn observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    pub fn fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn row_fully_observed(&self, i: usize) -> bool {
        (0..self.j()).all(|j| self.mask[(i, j)])
    }

    /// Indices of unobserved entries in row-major order.
    pub fn missing_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n() {
            for j in 0..self.j() {
                if !self.mask[(i, j)] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Structural checks plus at least one observed entry per column.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        for jj in 0..self.j() {
            if !(0..self.n()).any(|i| self.mask[(i, jj)]) {
                return Err(Error::Data(format!("column {jj} has no observed entries")));
            }
        }
        Ok(())
    }

    /// Shapes, finiteness of observed entries, label and time lengths.
    pub fn validate_shape(&self) -> Result<()> {
        let (n, j) = self.y.shape();
        if n == 0 || j == 0 {
            return Err(Error::Data("dataset has no rows or no columns".into()));
        }
        if self.mask.shape() != (n, j) {
            return Err(Error::Dimension("mask shape differs from observations".into()));
        }
        if self.columns.len() != j {
            return Err(Error::Dimension(format!("{} column names for {j} columns", self.columns.len())));
        }
        for jj in 0..j {
            for i in 0..n {
                if self.mask[(i, jj)] && !self.y[(i, jj)].is_finite() {
                    return Err(Error::NonFinite { what: "observation", row: i, col: jj });
                }
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::Dimension(format!("{} labels for {n} rows", l.len())));
            }
        }
        if let Some(t) = &self.time {
            if t.len() != n {
                return Err(Error::Dimension(format!("{} time points for {n} rows", t.len())));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("time index has non-finite entries".into()));
            }
        }
        Ok(())
    }

    /// Every observed entry is a nonnegative integer.
    pub fn validate_counts(&self) -> Result<()> {
        for i in 0..self.n() {
            for j in 0..self.j() {
                let v = self.y[(i, j)];
                if self.mask[(i, j)] && (v < 0.0 || v.fract() != 0.0) {
                    return Err(Error::Data(format!(
                        "entry ({i}, {j}) = {v} is not a nonnegative integer"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rows reordered so the time index is nondecreasing; returns the
    /// permutation applied (new row k is old row `perm[k]`).
    pub fn sorted_by_time(&self) -> Result<(Self, Vec<usize>)> {
        let t = self
            .time
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no time column".into()))?;
        let mut perm: Vec<usize> = (0..self.n()).collect();
        perm.sort_by(|&a, &b| t[a].total_cmp(&t[b]));
        Ok((self.permute_rows(&perm), perm))
    }

    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let j = self.j();
        let n = perm.len();
        Self {
            y: DMatrix::from_fn(n, j, |i, k| self.y[(perm[i], k)]),
            mask: DMatrix::from_fn(n, j, |i, k| self.mask[(perm[i], k)]),
            labels: self.labels.as_ref().map(|l| perm.iter().map(|&p| l[p]).collect()),
            time: self.time.as_ref().map(|t| perm.iter().map(|&p| t[p]).collect()),
            columns: self.columns.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Hide a uniformly random `fraction` of the observed entries. Each
    /// column keeps at least one observed entry. Returns the masked dataset
    /// and the hidden positions with their true values.
    pub fn hold_out<R: Rng + ?Sized>(
        &self,
        fraction: f64,
        rng: &mut R,
    ) -> Result<(Self, Vec<(usize, usize, f64)>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("missing fraction must be in [0, 1), got {fraction}")));
        }
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for i in 0..self.n() {
            for j in 0..self.j() {
                if self.mask[(i, j)] {
                    candidates.push((i, j));
                }
            }
        }
        candidates.shuffle(rng);
        let target = (fraction * candidates.len() as f64).round() as usize;
        let mut remaining: Vec<usize> = (0..self.j())
            .map(|j| (0..self.n()).filter(|&i| self.mask[(i, j)]).count())
            .collect();
        let mut mask = self.mask.clone();
        let mut held = Vec::with_capacity(target);
        for (i, j) in candidates {
            if held.len() == target {
                break;
            }
            if remaining[j] <= 1 {
                continue;
            }
            remaining[j] -= 1;
            mask[(i, j)] = false;
            held.push((i, j, self.y[(i, j)]));
        }
        held.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Ok((self.clone().with_mask(mask)?, held))
    }
}

/// Options for [`load_csv`].
#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub missing_token: String,
    pub label_column: Option<String>,
    pub time_column: Option<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            missing_token: MISSING_TOKEN.into(),
            label_column: Some(LABEL_COLUMN.into()),
            time_column: Some(TIME_COLUMN.into()),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(e).context(format!("opening {}", path.display())))?;
    read_csv(file, options).map(|d| d.with_provenance(path.display().to_string()))
}

/// Parse a dataset with a header row. Missing tokens become unobserved
/// entries; the label and time columns, if present, are split off.
pub fn read_csv<R: Read>(reader: R, options: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(Error::CsvEmpty),
        Some(r) => r?,
    };
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    let find = |name: &Option<String>| name.as_ref().and_then(|n| names.iter().position(|h| h == n));
    let label_idx = find(&options.label_column);
    let time_idx = find(&options.time_column);
    let feature_idx: Vec<usize> =
        (0..names.len()).filter(|&k| Some(k) != label_idx && Some(k) != time_idx).collect();

    let mut values = Vec::new();
    let mut observed = Vec::new();
    let mut labels = Vec::new();
    let mut times = Vec::new();
    let mut rows = 0;
    for (k, record) in records.enumerate() {
        let record = record?;
        let line = k + 2;
        if record.len() != names.len() {
            return Err(Error::CsvRagged { line, expected: names.len(), found: record.len() });
        }
        let parse = |col: usize| -> Result<f64> {
            record[col].parse::<f64>().map_err(|_| Error::CsvParse {
                line,
                column: names[col].clone(),
                cell: record[col].to_string(),
            })
        };
        for &col in &feature_idx {
            if record[col] == options.missing_token {
                values.push(0.0);
                observed.push(false);
            } else {
                values.push(parse(col)?);
                observed.push(true);
            }
        }
        if let Some(col) = label_idx {
            let v = parse(col)?;
            if v.fract() != 0.0 {
                return Err(Error::CsvParse { line, column: names[col].clone(), cell: record[col].to_string() });
            }
            labels.push(v as i64);
        }
        if let Some(col) = time_idx {
            times.push(parse(col)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::CsvEmpty);
    }
    let j = feature_idx.len();
    let mut ds = Dataset::new(DMatrix::from_row_slice(rows, j, &values))
        .with_mask(DMatrix::from_row_slice(rows, j, &observed))?;
    ds.columns = feature_idx.iter().map(|&k| names[k].clone()).collect();
    if label_idx.is_some() {
        ds.labels = Some(labels);
    }
    if time_idx.is_some() {
        ds.time = Some(times);
    }
    Ok(ds)
}

pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io(e).context(format!("creating {}", path.display())))?;
    write_csv_to(dataset, std::io::BufWriter::new(file))
}

/// Shortest round-trip formatting for every value; masked cells as `NA`.
pub fn write_csv_to<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = dataset.columns.clone();
    if dataset.labels.is_some() {
        header.push(LABEL_COLUMN.into());
    }
    if dataset.time.is_some() {
        header.push(TIME_COLUMN.into());
    }
    w.write_record(&header)?;
    for i in 0..dataset.n() {
        let mut row: Vec<String> = (0..dataset.j())
            .map(|j| {
                if dataset.mask[(i, j)] {
                    format!("{}", dataset.y[(i, j)])
                } else {
                    MISSING_TOKEN.to_string()
                }
            })
            .collect();
        if let Some(l) = &dataset.labels {
            row.push(l[i].to_string());
        }
        if let Some(t) = &dataset.time {
            row.push(format!("{}", t[i]));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

/// Write a plain numeric matrix with the given header.
pub fn write_matrix_csv(matrix: &DMatrix<f64>, header: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io(e).context(format!("creating {}", path.display())))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(header)?;
    for i in 0..matrix.nrows() {
        w.write_record(matrix.row(i).iter().map(|v| format!("{v}")))?;
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

/// Read a headed numeric CSV into a matrix.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let options = CsvOptions { label_column: None, time_column: None, ..CsvOptions::default() };
    let ds = load_csv(path, &options)?;
    if !ds.fully_observed() {
        return Err(Error::Data("matrix file contains missing cells".into()));
    }
    Ok(ds.y)
}
