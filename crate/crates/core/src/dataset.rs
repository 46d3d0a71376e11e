//! Incomplete longitudinal data: an N×T score matrix with an observation mask.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ErrorDistribution, GcmSpec};

/// Generating quantities kept alongside simulated data.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// N×q subject-specific random effects `b_i` (intercept, slope).
    pub random_effects: DMatrix<f64>,
    pub spec: GcmSpec,
    pub distribution: ErrorDistribution,
}

/// Scores of N subjects at T occasions. Masked-out cells hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    y: DMatrix<f64>,
    mask: DMatrix<bool>,
    ids: Vec<String>,
    covariates: BTreeMap<String, DVector<f64>>,
    truth: Option<Truth>,
}

impl LongitudinalDataset {
    pub fn new(mut y: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if y.shape() != mask.shape() {
            return Err(Error::Data(format!(
                "score matrix is {:?} but mask is {:?}",
                y.shape(),
                mask.shape()
            )));
        }
        let (n, t) = y.shape();
        if n == 0 || t == 0 {
            return Err(Error::Data("dataset must have at least one subject and one occasion".into()));
        }
        for i in 0..n {
            if !(0..t).any(|j| mask[(i, j)]) {
                return Err(Error::Data(format!("subject {} has no observed scores", i + 1)));
            }
            for j in 0..t {
                if mask[(i, j)] {
                    if !y[(i, j)].is_finite() {
                        return Err(Error::Data(format!(
                            "observed score at subject {}, occasion {} is not finite",
                            i + 1,
                            j + 1
                        )));
                    }
                } else {
                    y[(i, j)] = f64::NAN;
                }
            }
        }
        let ids = (1..=n).map(|i| i.to_string()).collect();
        Ok(LongitudinalDataset { y, mask, ids, covariates: BTreeMap::new(), truth: None })
    }

    pub fn complete(y: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(y.nrows(), y.ncols(), true);
        Self::new(y, mask)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn occasions(&self) -> usize {
        self.y.ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn set_ids(&mut self, ids: Vec<String>) -> Result<()> {
        if ids.len() != self.n() {
            return Err(Error::Data(format!("{} ids for {} subjects", ids.len(), self.n())));
        }
        self.ids = ids;
        Ok(())
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.mask[(i, t)]
    }

    pub fn value(&self, i: usize, t: usize) -> Option<f64> {
        self.mask[(i, t)].then(|| self.y[(i, t)])
    }

    /// Indices of the observed occasions of subject `i`.
    pub fn observed_occasions(&self, i: usize) -> Vec<usize> {
        (0..self.occasions()).filter(|&t| self.mask[(i, t)]).collect()
    }

    /// Observed values of occasion `t`, in subject order.
    pub fn observed_column(&self, t: usize) -> Vec<f64> {
        (0..self.n()).filter_map(|i| self.value(i, t)).collect()
    }

    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    pub fn missing_in_column(&self, t: usize) -> usize {
        (0..self.n()).filter(|&i| !self.mask[(i, t)]).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Drop an observation. Fails if it would leave the subject with no data.
    pub fn set_missing(&mut self, i: usize, t: usize) -> Result<()> {
        if self.mask[(i, t)] && self.observed_occasions(i).len() == 1 {
            return Err(Error::Data(format!("subject {} would have no observed scores", i + 1)));
        }
        self.mask[(i, t)] = false;
        self.y[(i, t)] = f64::NAN;
        Ok(())
    }

    /// Fill a cell and mark it observed.
    pub fn set_value(&mut self, i: usize, t: usize, v: f64) {
        self.y[(i, t)] = v;
        self.mask[(i, t)] = true;
    }

    pub fn covariates(&self) -> &BTreeMap<String, DVector<f64>> {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&DVector<f64>> {
        self.covariates.get(name)
    }

    pub fn set_covariate(&mut self, name: impl Into<String>, values: DVector<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.n() {
            return Err(Error::Data(format!(
                "covariate {name} has {} values for {} subjects",
                values.len(),
                self.n()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("covariate {name} must be fully observed")));
        }
        self.covariates.insert(name, values);
        Ok(())
    }

    pub fn truth(&self) -> Option<&Truth> {
        self.truth.as_ref()
    }

    pub fn set_truth(&mut self, truth: Truth) {
        self.truth = Some(truth);
    }

    /// Reads `id,y1,...,yT[,covariates...]`; cells equal to `na_token` are missing.
    pub fn read_csv<R: Read>(reader: R, na_token: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.is_empty() || !headers[0].eq_ignore_ascii_case("id") {
            return Err(Error::Data("first column must be `id`".into()));
        }
        let mut occ_cols = Vec::new();
        let mut cov_cols = Vec::new();
        for (c, name) in headers.iter().enumerate().skip(1) {
            match parse_occasion(name) {
                Some(k) => occ_cols.push((k, c)),
                None => cov_cols.push((name.to_string(), c)),
            }
        }
        occ_cols.sort();
        for (expected, (k, _)) in occ_cols.iter().enumerate() {
            if *k != expected + 1 {
                return Err(Error::Data(format!(
                    "occasion columns must be y1..yT without gaps, found y{k} at position {}",
                    expected + 1
                )));
            }
        }
        if occ_cols.len() < 2 {
            return Err(Error::Data("need at least two occasion columns y1, y2".into()));
        }
        let t = occ_cols.len();
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut observed = Vec::new();
        let mut covs: Vec<Vec<f64>> = vec![Vec::new(); cov_cols.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            for &(_, c) in &occ_cols {
                let cell = &rec[c];
                if cell == na_token || cell.is_empty() {
                    values.push(f64::NAN);
                    observed.push(false);
                } else {
                    let v: f64 = cell.parse().map_err(|_| {
                        Error::Data(format!("row {}: cannot parse `{cell}` as a number", line + 2))
                    })?;
                    values.push(v);
                    observed.push(true);
                }
            }
            for (k, (name, c)) in cov_cols.iter().enumerate() {
                let cell = &rec[*c];
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Data(format!("row {}: covariate {name} value `{cell}` is not a number", line + 2))
                })?;
                covs[k].push(v);
            }
        }
        let n = ids.len();
        if n == 0 {
            return Err(Error::Data("no data rows".into()));
        }
        let y = DMatrix::from_row_slice(n, t, &values);
        let mask = DMatrix::from_row_slice(n, t, &observed);
        for j in 0..t {
            if !(0..n).any(|i| mask[(i, j)]) {
                return Err(Error::Data(format!("column y{} has no observed values", j + 1)));
            }
        }
        let mut data = LongitudinalDataset::new(y, mask)?;
        data.ids = ids;
        for ((name, _), v) in cov_cols.into_iter().zip(covs) {
            data.set_covariate(name, DVector::from_vec(v))?;
        }
        Ok(data)
    }

    pub fn read_csv_path(path: &Path, na_token: &str) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), na_token)
    }

    /// Writes `id,y1,...,yT[,covariates...]` with missing cells as `na_token`.
    pub fn write_csv<W: Write>(&self, writer: W, na_token: &str) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend((1..=self.occasions()).map(|k| format!("y{k}")));
        header.extend(self.covariates.keys().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.ids[i].clone()];
            for t in 0..self.occasions() {
                rec.push(match self.value(i, t) {
                    Some(v) => format_value(v),
                    None => na_token.to_string(),
                });
            }
            for v in self.covariates.values() {
                rec.push(format_value(v[i]));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path, na_token: &str) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), na_token)
    }
}

fn parse_occasion(name: &str) -> Option<usize> {
    let rest = name.strip_prefix('y').or_else(|| name.strip_prefix('Y'))?;
    rest.parse().ok().filter(|&k| k >= 1)
}

/// Shortest representation that round-trips through `parse::<f64>`.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}
