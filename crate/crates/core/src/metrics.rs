//! Classification and reconstruction metrics.
//!
//! Confusion matrices are indexed `[actual][predicted]`. Every ratio with a
//! zero denominator is reported as 0, and macro averages are unweighted
//! means over classes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if c == 0 || rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("confusion", format!("matrix must be square and nonempty, got {c} rows")));
        }
        Ok(ConfusionMatrix { classes: c, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes).map(|j| (0..self.classes).map(|i| self.get(i, j)).sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// CSV with header `actual,<names...>` and one row per actual class.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("actual");
        for n in names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (i, row) in self.counts.chunks(self.classes).enumerate() {
            s.push_str(&names[i]);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses the [`ConfusionMatrix::to_csv`] layout: a header line, then
    /// rows of `name,count,...`. Blank lines and `#` comments are ignored.
    pub fn from_csv(text: &str) -> Result<(Self, Vec<String>)> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        lines.next().ok_or_else(|| Error::Format("empty confusion CSV".into()))?;
        let (mut names, mut rows) = (Vec::new(), Vec::new());
        for (k, line) in lines.enumerate() {
            let mut cells = line.split(',').map(str::trim);
            names.push(cells.next().unwrap_or_default().to_string());
            let row = cells
                .map(|c| c.parse::<u64>().map_err(|_| Error::Format(format!("confusion row {}: bad count {c:?}", k + 1))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok((ConfusionMatrix::from_rows(&rows)?, names))
    }
}

/// Counts `[actual][predicted]` pairs.
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::shape("confusion", format!("{} predictions vs {} labels", preds.len(), labels.len())));
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::InvalidParam(format!("class index {} out of range for {classes}", p.max(y))));
        }
        m.counts[y * classes + p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn report(m: &ConfusionMatrix) -> Result<MetricReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Precondition("metric report of an empty confusion matrix".into()));
    }
    let (rows, cols) = (m.row_sums(), m.col_sums());
    let c = m.classes();
    let precision: Vec<f64> = (0..c).map(|i| ratio(m.get(i, i), cols[i])).collect();
    let recall: Vec<f64> = (0..c).map(|i| ratio(m.get(i, i), rows[i])).collect();
    let f1: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
        .collect();
    Ok(MetricReport {
        accuracy: ratio(m.trace(), total),
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        precision,
        recall,
        f1,
        support: rows,
    })
}

impl MetricReport {
    /// `class,precision,recall,f1,support` rows, then `macro` and `accuracy`
    /// rows (accuracy in the f1 column).
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("class,precision,recall,f1,support\n");
        for (i, n) in names.iter().enumerate() {
            let _ = writeln!(s, "{n},{:.6},{:.6},{:.6},{}", self.precision[i], self.recall[i], self.f1[i], self.support[i]);
        }
        let total: u64 = self.support.iter().sum();
        let _ = writeln!(s, "macro,{:.6},{:.6},{:.6},{total}", self.macro_precision, self.macro_recall, self.macro_f1);
        let _ = writeln!(s, "accuracy,,,{:.6},{total}", self.accuracy);
        s
    }

    /// Aligned plain-text table.
    pub fn to_text(&self, names: &[String]) -> String {
        let w = names.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
        let mut s = format!("{:<w$}  {:>9}  {:>9}  {:>9}  {:>7}\n", "class", "precision", "recall", "f1", "support");
        for (i, n) in names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{n:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                self.precision[i], self.recall[i], self.f1[i], self.support[i]
            );
        }
        let total: u64 = self.support.iter().sum();
        let _ = writeln!(
            s,
            "{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {total:>7}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(s, "{:<w$}  {:>9.4}", "accuracy", self.accuracy);
        s
    }
}

/// `10 log10(peak^2 / MSE)`; identical images give `+inf`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let se: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Decibel value for CSV output; infinities print as `inf` / `-inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}
