//! Point and probabilistic forecast metrics, plus the seasonal-naive
//! benchmark forecaster.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The quantile level grid used throughout:
/// {0.01, 0.05, 0.10, ..., 0.90, 0.95, 0.99}. Symmetric around 0.5, so its
/// mean level is exactly one half.
pub fn standard_levels() -> Vec<f64> {
    let mut levels = vec![0.01];
    for i in 1..=19 {
        levels.push(i as f64 * 0.05);
    }
    levels.push(0.99);
    levels
}

fn check_lengths(truth: &[f64], fo: &[f64]) -> Result<()> {
    if truth.is_empty() || truth.len() != fo.len() {
        return Err(Error::dim("metric inputs must share one nonzero length"));
    }
    Ok(())
}

pub fn mae(truth: &[f64], fo: &[f64]) -> Result<f64> {
    check_lengths(truth, fo)?;
    Ok(truth.iter().zip(fo).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64)
}

pub fn rmse(truth: &[f64], fo: &[f64]) -> Result<f64> {
    check_lengths(truth, fo)?;
    let mse = truth.iter().zip(fo).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / truth.len() as f64;
    Ok(mse.sqrt())
}

/// Pinball (quantile score) loss of quantile value `v` at level `q` against
/// observation `y`.
pub fn pinball(q_level: f64, q_value: f64, y: f64) -> Result<f64> {
    if !(q_level > 0.0 && q_level < 1.0) {
        return Err(Error::invalid("quantile level must lie in (0, 1)"));
    }
    Ok(if y >= q_value { q_level * (y - q_value) } else { (1.0 - q_level) * (q_value - y) })
}

/// Quantile-based CRPS proxy: twice the average pinball loss over the level
/// grid (a uniform discretization of 2 * integral of the quantile loss).
pub fn crps_from_quantiles(levels: &[f64], values: &[f64], y: f64) -> Result<f64> {
    if levels.is_empty() || levels.len() != values.len() {
        return Err(Error::dim("levels and quantile values must share one nonzero length"));
    }
    for w in values.windows(2) {
        if w[1] < w[0] - 1e-12 {
            return Err(Error::invalid("quantile values must be nondecreasing"));
        }
    }
    let mut acc = 0.0;
    for (&q, &v) in levels.iter().zip(values) {
        acc += pinball(q, v, y)?;
    }
    Ok(2.0 * acc / levels.len() as f64)
}

/// Per-hour mean over the last `lookback` days of an S x T history matrix.
pub fn seasonal_naive(history: &[Vec<f64>], lookback: usize) -> Result<Vec<f64>> {
    if lookback == 0 || history.len() < lookback {
        return Err(Error::invalid(format!(
            "need at least {lookback} days of history, have {}",
            history.len()
        )));
    }
    let t = history[0].len();
    if history.iter().any(|d| d.len() != t) {
        return Err(Error::dim("ragged history matrix"));
    }
    let tail = &history[history.len() - lookback..];
    Ok((0..t)
        .map(|h| tail.iter().map(|d| d[h]).sum::<f64>() / lookback as f64)
        .collect())
}

/// Evaluation summary for one forecast run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    /// CRPS pooled over every (day, hour) observation; absent without a
    /// probabilistic forecast.
    pub crps_mean: Option<f64>,
    /// CRPS averaged per hour of day first, then across hours.
    pub crps_by_hour_mean: Option<f64>,
    pub per_hour_mae: Vec<f64>,
    pub per_quantile_pinball: Vec<(f64, f64)>,
}

impl EvalReport {
    /// Builds a report from flat truth/forecast series plus optionally a
    /// quantile matrix (rows = levels, columns = observations).
    pub fn build(
        truth: &[f64],
        fo: &[f64],
        hours_per_day: usize,
        quantiles: Option<(&[f64], &[Vec<f64>])>,
    ) -> Result<EvalReport> {
        check_lengths(truth, fo)?;
        if hours_per_day == 0 || truth.len() % hours_per_day != 0 {
            return Err(Error::dim("series length must be a multiple of hours_per_day"));
        }
        let mae_v = mae(truth, fo)?;
        let rmse_v = rmse(truth, fo)?;
        let mut per_hour_mae = vec![0.0; hours_per_day];
        let days = truth.len() / hours_per_day;
        for h in 0..hours_per_day {
            let mut acc = 0.0;
            for d in 0..days {
                let i = d * hours_per_day + h;
                acc += (truth[i] - fo[i]).abs();
            }
            per_hour_mae[h] = acc / days as f64;
        }

        let mut crps_mean = None;
        let mut crps_by_hour_mean = None;
        let mut per_quantile_pinball = Vec::new();
        if let Some((levels, qmat)) = quantiles {
            if qmat.len() != levels.len() {
                return Err(Error::dim("one quantile row per level required"));
            }
            for row in qmat {
                if row.len() != truth.len() {
                    return Err(Error::dim("quantile rows must match the series length"));
                }
            }
            let mut pooled = 0.0;
            let mut by_hour = vec![0.0; hours_per_day];
            for i in 0..truth.len() {
                let vals: Vec<f64> = qmat.iter().map(|row| row[i]).collect();
                let c = crps_from_quantiles(levels, &vals, truth[i])?;
                pooled += c;
                by_hour[i % hours_per_day] += c;
            }
            crps_mean = Some(pooled / truth.len() as f64);
            crps_by_hour_mean =
                Some(by_hour.iter().map(|v| v / days as f64).sum::<f64>() / hours_per_day as f64);
            for (li, &q) in levels.iter().enumerate() {
                let mut acc = 0.0;
                for i in 0..truth.len() {
                    acc += pinball(q, qmat[li][i], truth[i])?;
                }
                per_quantile_pinball.push((q, acc / truth.len() as f64));
            }
        }

        Ok(EvalReport { mae: mae_v, rmse: rmse_v, crps_mean, crps_by_hour_mean, per_hour_mae, per_quantile_pinball })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("mae,{}\n", self.mae));
        s.push_str(&format!("rmse,{}\n", self.rmse));
        if let Some(c) = self.crps_mean {
            s.push_str(&format!("crps_pooled,{c}\n"));
        }
        if let Some(c) = self.crps_by_hour_mean {
            s.push_str(&format!("crps_by_hour,{c}\n"));
        }
        for (h, v) in self.per_hour_mae.iter().enumerate() {
            s.push_str(&format!("mae_hour_{h},{v}\n"));
        }
        for (q, v) in &self.per_quantile_pinball {
            s.push_str(&format!("pinball_q{q},{v}\n"));
        }
        s
    }

    pub fn pretty(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<18} {:>12.6}\n", "MAE", self.mae));
        s.push_str(&format!("{:<18} {:>12.6}\n", "RMSE", self.rmse));
        if let Some(c) = self.crps_mean {
            s.push_str(&format!("{:<18} {:>12.6}\n", "CRPS (pooled)", c));
        }
        if let Some(c) = self.crps_by_hour_mean {
            s.push_str(&format!("{:<18} {:>12.6}\n", "CRPS (by hour)", c));
        }
        s
    }
}
