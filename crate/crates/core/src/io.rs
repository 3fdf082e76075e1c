//! CSV datasets, sample files and detrending.
//!
//! Every file may start with `#` comment lines; readers skip them. Numbers
//! are written in shortest round-trip form so read → write → read is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::circular::{WrapCounter, mod_2pi};
use crate::error::{Error, Result};
use crate::mcmc::{Acceptance, SampleRow, SampleSet};

/// Observed series with optional true angles.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    /// Radians in `[0, 2π)`.
    pub theta_true: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(times: Vec<f64>, y: Vec<f64>, theta_true: Option<Vec<f64>>) -> Result<Self> {
        if times.len() != y.len() || theta_true.as_ref().is_some_and(|th| th.len() != y.len()) {
            return Err(Error::invalid("dataset columns have different lengths"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("times must be strictly increasing"));
        }
        if times.iter().chain(&y).chain(theta_true.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Self { times, y, theta_true })
    }

    /// Times `1..=n` with no angles.
    pub fn from_series(y: Vec<f64>) -> Result<Self> {
        Self::new((1..=y.len()).map(|t| t as f64).collect(), y, None)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }

    /// Removes the last observation, returning it separately.
    pub fn split_last(&self) -> Result<(Dataset, f64)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::invalid("need at least two observations to hold one out"));
        }
        let head = Dataset {
            times: self.times[..n - 1].to_vec(),
            y: self.y[..n - 1].to_vec(),
            theta_true: self.theta_true.as_ref().map(|th| th[..n - 1].to_vec()),
        };
        Ok((head, self.y[n - 1]))
    }
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, message: format!("{other:?}") },
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Parse { line, message: format!("missing column {name}") })?;
    raw.parse().map_err(|_| Error::Parse { line, message: format!("cannot parse {name} value {raw:?}") })
}

fn finite(v: f64, name: &str, line: usize) -> Result<f64> {
    if v.is_finite() { Ok(v) } else { Err(Error::Parse { line, message: format!("{name} is not finite") }) }
}

/// Parses `t,y[,theta_true]`. With `degrees`, angles are converted to radians.
pub fn parse_dataset<R: Read>(r: R, degrees: bool) -> Result<Dataset> {
    let mut rd = csv_reader(r);
    let headers = rd.headers().map_err(csv_error)?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let with_theta = match names.as_slice() {
        ["t", "y"] => false,
        ["t", "y", "theta_true"] => true,
        _ => return Err(Error::Parse { line: 1, message: format!("expected header t,y[,theta_true], got {}", names.join(",")) }),
    };
    let (mut times, mut y, mut theta) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rd.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let t = finite(field(&rec, 0, "t", line)?, "t", line)?;
        if times.last().is_some_and(|&prev| t <= prev) {
            return Err(Error::Parse { line, message: "t is not strictly increasing".into() });
        }
        times.push(t);
        y.push(finite(field(&rec, 1, "y", line)?, "y", line)?);
        if with_theta {
            let raw = finite(field(&rec, 2, "theta_true", line)?, "theta_true", line)?;
            let rad = if degrees { raw.to_radians() } else { raw };
            theta.push(mod_2pi(rad)?.value());
        }
    }
    Dataset::new(times, y, with_theta.then_some(theta))
}

pub fn read_dataset(path: &Path, degrees: bool) -> Result<Dataset> {
    parse_dataset(BufReader::new(File::open(path)?), degrees)
}

fn write_comment<W: Write>(w: &mut W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    Ok(())
}

pub fn write_dataset<W: Write>(w: &mut W, d: &Dataset, comment: Option<&str>) -> Result<()> {
    write_comment(w, comment)?;
    match &d.theta_true {
        Some(th) => {
            writeln!(w, "t,y,theta_true")?;
            for ((t, y), a) in d.times.iter().zip(&d.y).zip(th) {
                writeln!(w, "{t},{y},{a}")?;
            }
        }
        None => {
            writeln!(w, "t,y")?;
            for (t, y) in d.times.iter().zip(&d.y) {
                writeln!(w, "{t},{y}")?;
            }
        }
    }
    Ok(())
}

/// Writes a plain CSV table.
pub fn write_table<W: Write>(w: &mut W, comment: Option<&str>, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_comment(w, comment)?;
    writeln!(w, "{}", columns.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    Ok(())
}

/// Linear trend `a + b t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trend {
    pub intercept: f64,
    pub slope: f64,
}

impl Trend {
    pub fn at(&self, t: f64) -> f64 {
        self.intercept + self.slope * t
    }
}

/// Ordinary least squares of `y` on `(1, t)`; returns the residual series.
pub fn detrend_linear(d: &Dataset) -> Result<(Dataset, Trend)> {
    let n = d.len();
    if n < 3 {
        return Err(Error::invalid("detrending needs at least three observations"));
    }
    let nf = n as f64;
    let tm = d.times.iter().sum::<f64>() / nf;
    let ym = d.y.iter().sum::<f64>() / nf;
    let sxx: f64 = d.times.iter().map(|t| (t - tm).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Degenerate("constant time column".into()));
    }
    let sxy: f64 = d.times.iter().zip(&d.y).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let trend = Trend { intercept: ym - slope * tm, slope };
    let resid = d.times.iter().zip(&d.y).map(|(&t, &y)| y - trend.at(t)).collect();
    Ok((Dataset { y: resid, ..d.clone() }, trend))
}

/// Column names of a sample file.
pub fn sample_columns(t_len: usize, beta_g_free: &[usize]) -> Vec<String> {
    let mut cols: Vec<String> = vec!["iter".into(), "logp".into()];
    cols.extend((1..=4).map(|i| format!("beta_f_{i}")));
    cols.extend(beta_g_free.iter().map(|i| format!("beta_g_{}", i + 1)));
    cols.push("sigma2_eps".into());
    cols.push("sigma2_f".into());
    cols.extend((0..=t_len + 1).map(|t| format!("x_{t}")));
    cols.extend((1..=t_len + 1).map(|t| format!("K_{t}")));
    cols
}

pub fn write_samples<W: Write>(w: &mut W, s: &SampleSet, comment: Option<&str>) -> Result<()> {
    write_comment(w, comment)?;
    writeln!(w, "{}", sample_columns(s.t_len, &s.beta_g_free).join(","))?;
    for r in &s.rows {
        let mut f: Vec<String> = vec![r.iter.to_string(), r.logp.to_string()];
        f.extend(r.beta_f.iter().map(f64::to_string));
        f.extend(r.beta_g_free.iter().map(f64::to_string));
        f.push(r.sigma2_eps.to_string());
        f.push(r.sigma2_f.to_string());
        f.extend(r.x.iter().map(f64::to_string));
        f.extend(r.k.iter().map(WrapCounter::to_string));
        writeln!(w, "{}", f.join(","))?;
    }
    Ok(())
}

/// Reads a sample file. Trace and acceptance counts are not stored in it
/// and come back empty.
pub fn parse_samples<R: Read>(r: R) -> Result<SampleSet> {
    let mut rd = csv_reader(r);
    let headers = rd.headers().map_err(csv_error)?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let n_x = names.iter().filter(|n| n.starts_with("x_")).count();
    if n_x < 2 {
        return Err(Error::Parse { line: 1, message: "sample header has no latent columns".into() });
    }
    let t_len = n_x - 2;
    let beta_g_free: Vec<usize> = names
        .iter()
        .filter_map(|n| n.strip_prefix("beta_g_"))
        .map(|i| i.parse::<usize>().ok().filter(|&i| i >= 1).map(|i| i - 1))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Parse { line: 1, message: "bad beta_g column name".into() })?;
    let expected = sample_columns(t_len, &beta_g_free);
    if names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Parse { line: 1, message: "unexpected sample header".into() });
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != expected.len() {
            return Err(Error::Parse { line, message: format!("expected {} fields, found {}", expected.len(), rec.len()) });
        }
        let mut i = 0;
        let mut num = |rec: &csv::StringRecord| -> Result<f64> {
            i += 1;
            field(rec, i - 1, &expected[i - 1], line)
        };
        let iter = num(&rec)?;
        if iter < 0.0 || iter.fract() != 0.0 {
            return Err(Error::Parse { line, message: "iter must be a non-negative integer".into() });
        }
        let logp = num(&rec)?;
        let beta_f = [num(&rec)?, num(&rec)?, num(&rec)?, num(&rec)?];
        let beta_g = (0..beta_g_free.len()).map(|_| num(&rec)).collect::<Result<_>>()?;
        let sigma2_eps = num(&rec)?;
        let sigma2_f = num(&rec)?;
        let x = (0..n_x).map(|_| num(&rec)).collect::<Result<_>>()?;
        let k = (0..=t_len)
            .map(|j| field::<WrapCounter>(&rec, expected.len() - t_len - 1 + j, "K", line))
            .collect::<Result<_>>()?;
        rows.push(SampleRow { iter: iter as usize, logp, beta_f, beta_g_free: beta_g, sigma2_eps, sigma2_f, x, k });
    }
    Ok(SampleSet { t_len, beta_g_free, rows, trace: Vec::new(), acceptance: Acceptance::default(), max_audit_error: 0.0 })
}

pub fn read_samples(path: &Path) -> Result<SampleSet> {
    parse_samples(BufReader::new(File::open(path)?))
}

/// Writes `contents` through a buffered file handle.
pub fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
