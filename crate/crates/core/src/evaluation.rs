//! Forecast verification: latitude-weighted RMSE and anomaly correlation,
//! normalised differences against a baseline, and skillful lead time.
//!
//! Fields are `[C, H, W]`; metrics are computed per channel and averaged
//! over initialisation times.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-cell time mean used to form anomalies.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub mean: Tensor<f64>,
    /// Free-form description of the averaging period.
    pub source: String,
}

pub fn compute_climatology<T: Scalar>(fields: &[Tensor<T>], source: impl Into<String>) -> Result<Climatology> {
    let first = fields
        .first()
        .ok_or_else(|| Error::invalid("climatology of an empty dataset"))?;
    let mut sum = vec![0.0; first.numel()];
    for f in fields {
        if f.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "climatology",
                lhs: f.shape().to_vec(),
                rhs: first.shape().to_vec(),
            });
        }
        for (s, v) in sum.iter_mut().zip(f.data()) {
            *s += v.as_f64();
        }
    }
    let n = fields.len() as f64;
    let mean = Tensor::new(first.shape().to_vec(), sum.into_iter().map(|s| s / n).collect())?;
    Ok(Climatology {
        mean,
        source: source.into(),
    })
}

fn check_pairs<T: Scalar>(
    forecasts: &[Tensor<T>],
    truths: &[Tensor<T>],
    weights: &[f64],
    c: usize,
) -> Result<(usize, usize)> {
    if forecasts.is_empty() {
        return Err(Error::invalid("no initialisation times to verify"));
    }
    if forecasts.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} forecasts for {} truths",
            forecasts.len(),
            truths.len()
        )));
    }
    let s = truths[0].shape();
    if s.len() != 3 || s[1] != weights.len() || c >= s[0] {
        return Err(Error::InvalidShape {
            op: "verification",
            detail: format!("field {s:?}, {} latitude weights, channel {c}", weights.len()),
        });
    }
    for (f, y) in forecasts.iter().zip(truths) {
        if f.shape() != s || y.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "verification",
                lhs: f.shape().to_vec(),
                rhs: s.to_vec(),
            });
        }
    }
    Ok((s[1], s[2]))
}

fn channel<T: Scalar>(x: &Tensor<T>, c: usize, hw: usize) -> impl Iterator<Item = f64> + '_ {
    x.data()[c * hw..(c + 1) * hw].iter().map(|v| v.as_f64())
}

/// Mean over initialisation times of `sqrt(Σ L_i (Ŷ − Y)² / (H·W))` for
/// channel `c`: the root is taken per time, then averaged.
pub fn rmse<T: Scalar>(forecasts: &[Tensor<T>], truths: &[Tensor<T>], weights: &[f64], c: usize) -> Result<f64> {
    let (h, w) = check_pairs(forecasts, truths, weights, c)?;
    let hw = h * w;
    let total: f64 = forecasts
        .iter()
        .zip(truths)
        .map(|(f, y)| {
            let s: f64 = channel(f, c, hw)
                .zip(channel(y, c, hw))
                .enumerate()
                .map(|(k, (a, b))| weights[k / w] * (a - b) * (a - b))
                .sum();
            (s / hw as f64).sqrt()
        })
        .sum();
    Ok(total / forecasts.len() as f64)
}

/// Anomaly correlation averaged over initialisation times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccResult {
    pub value: f64,
    /// Initialisation times dropped because an anomaly field had zero norm.
    pub skipped: usize,
}

/// Latitude-weighted uncentred correlation of `Ŷ − clim` with `Y − clim`
/// for channel `c`, per initialisation time, then averaged.
pub fn acc<T: Scalar>(
    forecasts: &[Tensor<T>],
    truths: &[Tensor<T>],
    clim: &Climatology,
    weights: &[f64],
    c: usize,
) -> Result<AccResult> {
    let (h, w) = check_pairs(forecasts, truths, weights, c)?;
    if clim.mean.shape() != truths[0].shape() {
        return Err(Error::ShapeMismatch {
            op: "acc",
            lhs: clim.mean.shape().to_vec(),
            rhs: truths[0].shape().to_vec(),
        });
    }
    let hw = h * w;
    let mut sum = 0.0;
    let mut used = 0;
    for (f, y) in forecasts.iter().zip(truths) {
        let (mut num, mut ff, mut yy) = (0.0, 0.0, 0.0);
        for (k, ((a, b), m)) in channel(f, c, hw)
            .zip(channel(y, c, hw))
            .zip(channel(&clim.mean, c, hw))
            .enumerate()
        {
            let l = weights[k / w];
            let (fa, ya) = (a - m, b - m);
            num += l * fa * ya;
            ff += l * fa * fa;
            yy += l * ya * ya;
        }
        if ff > 0.0 && yy > 0.0 {
            sum += num / (ff * yy).sqrt();
            used += 1;
        }
    }
    let skipped = forecasts.len() - used;
    if used == 0 {
        return Err(Error::NonFinite("every anomaly field has zero norm".into()));
    }
    Ok(AccResult {
        value: sum / used as f64,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Rmse,
    Acc,
}

/// `(A − B)/B` for RMSE, `(A − B)/(1 − B)` for ACC. Negative RMSE and
/// positive ACC differences mean `A` is better.
pub fn normalized_diff(a: f64, b: f64, kind: MetricKind) -> Result<f64> {
    match kind {
        MetricKind::Rmse if b > 0.0 => Ok((a - b) / b),
        MetricKind::Rmse => Err(Error::invalid(format!("baseline RMSE {b} must be positive"))),
        MetricKind::Acc if b != 1.0 => Ok((a - b) / (1.0 - b)),
        MetricKind::Acc => Err(Error::invalid("baseline ACC of exactly 1 leaves no headroom")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadTime {
    pub value: f64,
    /// The series never fell below the threshold; `value` is its last lead.
    pub censored: bool,
}

/// First downward crossing of `threshold`, linearly interpolated between the
/// bracketing leads.
pub fn skillful_lead_time(series: &[(f64, f64)], threshold: f64) -> Result<LeadTime> {
    if series.len() < 2 {
        return Err(Error::invalid("skillful lead time needs at least two points"));
    }
    if series.windows(2).any(|p| p[1].0 <= p[0].0) {
        return Err(Error::invalid("lead times must be strictly increasing"));
    }
    if series[0].1 < threshold {
        return Ok(LeadTime {
            value: 0.0,
            censored: false,
        });
    }
    for pair in series.windows(2) {
        let ((t0, a0), (t1, a1)) = (pair[0], pair[1]);
        if a0 == threshold {
            return Ok(LeadTime {
                value: t0,
                censored: false,
            });
        }
        if a1 <= threshold {
            let value = t0 + (a0 - threshold) / (a0 - a1) * (t1 - t0);
            return Ok(LeadTime { value, censored: false });
        }
    }
    Ok(LeadTime {
        value: series[series.len() - 1].0,
        censored: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Absent in single-variable tables.
    #[serde(default)]
    pub variable: String,
    pub lead_hours: f64,
    pub rmse: f64,
    pub acc: f64,
}

/// RMSE/ACC per (variable, lead) over a verification set of `n_init` times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    pub n_init: usize,
}

impl MetricsTable {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv(input: impl std::io::Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Ok(Self { rows, n_init: 0 })
    }

    /// Rows of normalised differences against `baseline`, matched by
    /// (variable, lead).
    pub fn diff_against(&self, baseline: &MetricsTable, baseline_name: &str) -> Result<Vec<DiffRow>> {
        self.rows
            .iter()
            .map(|r| {
                let b = baseline
                    .rows
                    .iter()
                    .find(|b| b.variable == r.variable && b.lead_hours == r.lead_hours)
                    .ok_or_else(|| {
                        Error::invalid(format!("baseline has no row for {} at {} h", r.variable, r.lead_hours))
                    })?;
                Ok(DiffRow {
                    variable: r.variable.clone(),
                    lead_hours: r.lead_hours,
                    baseline: baseline_name.to_string(),
                    rmse_diff: normalized_diff(r.rmse, b.rmse, MetricKind::Rmse)?,
                    acc_diff: normalized_diff(r.acc, b.acc, MetricKind::Acc)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub variable: String,
    pub lead_hours: f64,
    pub baseline: String,
    pub rmse_diff: f64,
    pub acc_diff: f64,
}

pub fn write_diff_csv(rows: &[DiffRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
