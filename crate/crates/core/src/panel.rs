//! Long-format panel with a monotone observation mask.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An auxiliary response measurement for subject `subject` at (possibly fractional)
/// time `h`, on the same time scale as the period labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamingRecord {
    pub subject: usize,
    pub h: f64,
    pub value: f64,
}

/// Balanced `(i, t)` grid. Responses are `None` where unobserved; the mask is derived
/// from them, so an unobserved response can never leak into an estimator.
///
/// `covars` always carries the constant in column 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    n_subjects: usize,
    n_periods: usize,
    p_d: usize,
    p_x: usize,
    response: Vec<Option<f64>>,
    treat: Vec<f64>,
    covars: Vec<f64>,
    subject_ids: Vec<String>,
    period_labels: Vec<i64>,
    streaming: Vec<StreamingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttritionSummary {
    pub retention: Vec<f64>,
    pub overall_missing: f64,
}

/// Column names used by [`load_panel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelSchema {
    pub subject: String,
    pub period: String,
    pub response: String,
    /// Treatment columns (the `d` block). Empty means "every column starting with `d_`".
    pub treat: Vec<String>,
    /// Covariate columns without the constant. Empty means "every column starting with `x_`".
    pub covars: Vec<String>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            subject: "subject_id".into(),
            period: "period".into(),
            response: "response".into(),
            treat: Vec::new(),
            covars: Vec::new(),
        }
    }
}

impl PanelDataset {
    /// Builds a panel from row-major `(i, t)` arrays. `covars` must already include the
    /// constant column. Only shapes are checked here; see [`PanelDataset::validate`].
    pub fn from_parts(
        n_subjects: usize,
        n_periods: usize,
        p_d: usize,
        p_x: usize,
        response: Vec<Option<f64>>,
        treat: Vec<f64>,
        covars: Vec<f64>,
    ) -> Result<Self> {
        let cells = n_subjects * n_periods;
        if n_subjects == 0 || n_periods == 0 {
            return Err(Error::panel("panel needs at least one subject and one period"));
        }
        if p_x == 0 {
            return Err(Error::panel("covariate block must contain the constant column"));
        }
        if response.len() != cells || treat.len() != cells * p_d || covars.len() != cells * p_x {
            return Err(Error::DimensionMismatch(format!(
                "panel arrays do not match N={n_subjects}, T={n_periods}, p_d={p_d}, p_x={p_x}"
            )));
        }
        Ok(Self {
            n_subjects,
            n_periods,
            p_d,
            p_x,
            response,
            treat,
            covars,
            subject_ids: (0..n_subjects).map(|i| i.to_string()).collect(),
            period_labels: (1..=n_periods as i64).collect(),
            streaming: Vec::new(),
        })
    }

    pub fn with_streaming(mut self, records: Vec<StreamingRecord>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.subject >= self.n_subjects) {
            return Err(Error::panel(format!("streaming record for unknown subject {}", r.subject)));
        }
        self.streaming = records;
        Ok(self)
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn p_d(&self) -> usize {
        self.p_d
    }

    /// Width of the covariate block including the constant.
    pub fn p_x(&self) -> usize {
        self.p_x
    }

    #[inline]
    fn cell(&self, i: usize, t: usize) -> usize {
        i * self.n_periods + t
    }

    #[inline]
    pub fn response(&self, i: usize, t: usize) -> Option<f64> {
        self.response[self.cell(i, t)]
    }

    #[inline]
    pub fn observed(&self, i: usize, t: usize) -> bool {
        self.response(i, t).is_some()
    }

    /// `s_it` as 0/1.
    pub fn mask(&self, i: usize, t: usize) -> f64 {
        if self.observed(i, t) {
            1.0
        } else {
            0.0
        }
    }

    pub fn treat(&self, i: usize, t: usize) -> &[f64] {
        let c = self.cell(i, t);
        &self.treat[c * self.p_d..(c + 1) * self.p_d]
    }

    pub fn covars(&self, i: usize, t: usize) -> &[f64] {
        let c = self.cell(i, t);
        &self.covars[c * self.p_x..(c + 1) * self.p_x]
    }

    pub fn set_response(&mut self, i: usize, t: usize, value: Option<f64>) {
        let c = self.cell(i, t);
        self.response[c] = value;
    }

    pub fn set_covar(&mut self, i: usize, t: usize, j: usize, value: f64) {
        let c = self.cell(i, t);
        self.covars[c * self.p_x + j] = value;
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn period_labels(&self) -> &[i64] {
        &self.period_labels
    }

    pub fn streaming(&self) -> &[StreamingRecord] {
        &self.streaming
    }

    pub fn n_observed(&self) -> usize {
        self.response.iter().filter(|r| r.is_some()).count()
    }

    /// Number of observed periods for subject `i`.
    pub fn observed_periods(&self, i: usize) -> usize {
        (0..self.n_periods).filter(|&t| self.observed(i, t)).count()
    }

    /// Lists every violated panel invariant. Empty iff the dataset is well formed.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.n_subjects {
            let id = &self.subject_ids[i];
            if !self.observed(i, 0) {
                out.push(format!("subject {id}: first-period missing"));
            }
            for t in 1..self.n_periods {
                if self.observed(i, t) && !self.observed(i, t - 1) {
                    out.push(format!(
                        "subject {id}, period {}: observed after dropout (non-monotone mask)",
                        self.period_labels[t]
                    ));
                }
            }
            for t in 0..self.n_periods {
                if self.treat(i, t).iter().chain(self.covars(i, t)).any(|v| !v.is_finite()) {
                    out.push(format!(
                        "subject {id}, period {}: missing covariate value",
                        self.period_labels[t]
                    ));
                }
                if self.covars(i, t)[0] != 1.0 {
                    out.push(format!(
                        "subject {id}, period {}: constant covariate column is not 1",
                        self.period_labels[t]
                    ));
                }
                if let Some(y) = self.response(i, t) {
                    if !y.is_finite() {
                        out.push(format!(
                            "subject {id}, period {}: non-finite response",
                            self.period_labels[t]
                        ));
                    }
                }
            }
        }
        out
    }

    pub fn attrition_summary(&self) -> AttritionSummary {
        let n = self.n_subjects as f64;
        let retention: Vec<f64> = (0..self.n_periods)
            .map(|t| (0..self.n_subjects).filter(|&i| self.observed(i, t)).count() as f64 / n)
            .collect();
        let overall_missing =
            1.0 - self.n_observed() as f64 / (self.n_subjects * self.n_periods) as f64;
        AttritionSummary {
            retention,
            overall_missing,
        }
    }

    /// Writes the long-format CSV read by [`load_panel`]. The constant column is omitted.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subject_id".to_string(), "period".into(), "response".into()];
        header.extend((1..=self.p_d).map(|j| format!("d_{j}")));
        header.extend((1..self.p_x).map(|j| format!("x_{j}")));
        w.write_record(&header)?;
        for i in 0..self.n_subjects {
            for t in 0..self.n_periods {
                let mut rec = vec![
                    self.subject_ids[i].clone(),
                    self.period_labels[t].to_string(),
                    self.response(i, t).map(|v| v.to_string()).unwrap_or_default(),
                ];
                rec.extend(self.treat(i, t).iter().map(|v| v.to_string()));
                rec.extend(self.covars(i, t)[1..].iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_streaming_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject_id", "h", "w_value"])?;
        for r in &self.streaming {
            w.write_record([
                self.subject_ids[r.subject].clone(),
                r.h.to_string(),
                r.value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn parse_f64(s: &str, what: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::panel(format!("line {line}: cannot parse {what} value {s:?}")))
}

/// Reads a long-format panel: one row per `(subject, period)`, empty response = unobserved.
pub fn read_panel<R: Read>(reader: R, schema: &PanelSchema) -> Result<PanelDataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::panel(format!("column {name:?} not found")))
    };
    let pick = |explicit: &[String], prefix: &str| -> Result<Vec<usize>> {
        if explicit.is_empty() {
            Ok(headers
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(prefix))
                .map(|(k, _)| k)
                .collect())
        } else {
            explicit.iter().map(|c| col(c)).collect()
        }
    };
    let c_subject = col(&schema.subject)?;
    let c_period = col(&schema.period)?;
    let c_response = col(&schema.response)?;
    let c_treat = pick(&schema.treat, "d_")?;
    let c_covars = pick(&schema.covars, "x_")?;
    let p_d = c_treat.len();
    let p_x = c_covars.len() + 1;

    struct Raw {
        subject: usize,
        period: i64,
        response: Option<f64>,
        values: Vec<f64>,
        line: usize,
    }
    let mut ids: Vec<String> = Vec::new();
    let mut id_index: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let sid = field(c_subject).to_string();
        let subject = *id_index.entry(sid.clone()).or_insert_with(|| {
            ids.push(sid);
            ids.len() - 1
        });
        let period = field(c_period)
            .parse::<i64>()
            .map_err(|_| Error::panel(format!("line {line}: period must be an integer")))?;
        let r = field(c_response);
        let response = if r.is_empty() { None } else { Some(parse_f64(r, "response", line)?) };
        let mut values = Vec::with_capacity(p_d + p_x - 1);
        for &c in c_treat.iter().chain(&c_covars) {
            let v = field(c);
            if v.is_empty() {
                return Err(Error::panel(format!(
                    "line {line}: missing covariate {:?}",
                    &headers[c]
                )));
            }
            values.push(parse_f64(v, &headers[c], line)?);
        }
        rows.push(Raw {
            subject,
            period,
            response,
            values,
            line,
        });
    }
    if rows.is_empty() {
        return Err(Error::panel("no data rows"));
    }

    let mut periods: Vec<i64> = rows.iter().map(|r| r.period).collect();
    periods.sort_unstable();
    periods.dedup();
    let period_index: HashMap<i64, usize> =
        periods.iter().enumerate().map(|(k, p)| (*p, k)).collect();
    let n = ids.len();
    let t_len = periods.len();
    if rows.len() != n * t_len {
        // Either a duplicate or a hole; find which for a useful message.
        let mut seen = vec![false; n * t_len];
        for r in &rows {
            let c = r.subject * t_len + period_index[&r.period];
            if seen[c] {
                return Err(Error::panel(format!(
                    "line {}: duplicate row for subject {} period {}",
                    r.line, ids[r.subject], r.period
                )));
            }
            seen[c] = true;
        }
        let c = seen.iter().position(|s| !s).unwrap_or(0);
        return Err(Error::panel(format!(
            "non-rectangular panel: subject {} has no row for period {}",
            ids[c / t_len],
            periods[c % t_len]
        )));
    }

    let mut response = vec![None; n * t_len];
    let mut treat = vec![0.0; n * t_len * p_d];
    let mut covars = vec![0.0; n * t_len * p_x];
    let mut seen = vec![false; n * t_len];
    for r in rows {
        let c = r.subject * t_len + period_index[&r.period];
        if seen[c] {
            return Err(Error::panel(format!(
                "line {}: duplicate row for subject {} period {}",
                r.line, ids[r.subject], r.period
            )));
        }
        seen[c] = true;
        response[c] = r.response;
        treat[c * p_d..(c + 1) * p_d].copy_from_slice(&r.values[..p_d]);
        covars[c * p_x] = 1.0;
        covars[c * p_x + 1..(c + 1) * p_x].copy_from_slice(&r.values[p_d..]);
    }
    let mut ds = PanelDataset::from_parts(n, t_len, p_d, p_x, response, treat, covars)?;
    ds.subject_ids = ids;
    ds.period_labels = periods;
    let violations = ds.validate();
    if !violations.is_empty() {
        return Err(Error::panel(violations.join("; ")));
    }
    Ok(ds)
}

pub fn load_panel(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<PanelDataset> {
    read_panel(std::fs::File::open(path)?, schema)
}

/// Attaches a `subject_id,h,w_value` sidecar to an already loaded panel.
pub fn read_streaming<R: Read>(dataset: PanelDataset, reader: R) -> Result<PanelDataset> {
    let index: HashMap<&str, usize> = dataset
        .subject_ids
        .iter()
        .enumerate()
        .map(|(k, s)| (s.as_str(), k))
        .collect();
    let mut rdr = csv::Reader::from_reader(reader);
    let mut records = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() < 3 {
            return Err(Error::panel(format!("streaming line {line}: expected 3 fields")));
        }
        let subject = *index.get(rec[0].trim()).ok_or_else(|| {
            Error::panel(format!("streaming line {line}: unknown subject {:?}", &rec[0]))
        })?;
        records.push(StreamingRecord {
            subject,
            h: parse_f64(&rec[1], "h", line)?,
            value: parse_f64(&rec[2], "w_value", line)?,
        });
    }
    dataset.with_streaming(records)
}

pub fn load_streaming(dataset: PanelDataset, path: impl AsRef<Path>) -> Result<PanelDataset> {
    read_streaming(dataset, std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "subject_id,period,response,x_1\n\
                         a,1,1.5,0.2\n\
                         a,2,2.5,0.3\n\
                         b,1,0.5,1.0\n\
                         b,2,,1.1\n";

    fn read(s: &str) -> Result<PanelDataset> {
        read_panel(s.as_bytes(), &PanelSchema::default())
    }

    #[test]
    fn loads_long_format() {
        let ds = read(SMALL).unwrap();
        assert_eq!((ds.n_subjects(), ds.n_periods(), ds.p_x()), (2, 2, 2));
        assert!(ds.observed(0, 1));
        assert!(!ds.observed(1, 1));
        assert_eq!(ds.covars(1, 1), &[1.0, 1.1]);
        assert_eq!(ds.attrition_summary().overall_missing, 0.25);
        assert_eq!(ds.attrition_summary().retention, vec![1.0, 0.5]);
    }

    #[test]
    fn rejects_structural_problems() {
        let dup = "subject_id,period,response,x_1\na,1,1,0\na,1,2,0\n";
        assert!(read(dup).unwrap_err().to_string().contains("duplicate"));
        let hole = "subject_id,period,response,x_1\na,1,1,0\na,2,1,0\nb,1,1,0\n";
        assert!(read(hole).unwrap_err().to_string().contains("non-rectangular"));
        let gap = "subject_id,period,response,x_1\na,1,1,0\na,2,,0\na,3,1,0\n";
        assert!(read(gap).unwrap_err().to_string().contains("non-monotone"));
        let nocov = "subject_id,period,response,x_1\na,1,1,\n";
        assert!(read(nocov).unwrap_err().to_string().contains("missing covariate"));
    }

    #[test]
    fn validate_reports_each_violation() {
        let mut ds = read(SMALL).unwrap();
        assert!(ds.validate().is_empty());
        ds.set_response(0, 0, None);
        let v = ds.validate();
        assert_eq!(v.len(), 2, "{v:?}"); // first period missing, and t=2 now follows a gap
        assert!(v[0].contains("first-period missing"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut ds = read(SMALL).unwrap();
        ds.set_response(0, 1, Some(0.1 + 0.2));
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = read(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn streaming_sidecar() {
        let ds = read(SMALL).unwrap();
        let ds = read_streaming(ds, "subject_id,h,w_value\nb,1.7,3.0\n".as_bytes()).unwrap();
        assert_eq!(ds.streaming()[0].subject, 1);
        let err = read_streaming(ds, "subject_id,h,w_value\nzz,1.7,3.0\n".as_bytes());
        assert!(err.is_err());
    }
}
