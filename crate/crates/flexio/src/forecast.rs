//! Day-ahead decomposed point forecast (forward solve at the fitted
//! parameters) plus residual-based quantile bands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::fop::solve_fop;
use crate::model::{ComfortCosts, DemandAttributes, FlexBounds, PriceSignal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub net: Vec<f64>,
    /// Baseload minus forecast-day self-generation.
    pub baseload_net: Vec<f64>,
    /// Shift plus kept-shed component.
    pub flexible: Vec<f64>,
    pub shift_up: Vec<f64>,
    pub shift_down: Vec<f64>,
    pub shed_kept: Vec<f64>,
    /// Quantile levels and one row of values per level (each length T);
    /// empty until `attach_quantiles` is called.
    pub levels: Vec<f64>,
    pub quantiles: Vec<Vec<f64>>,
}

impl Forecast {
    pub fn len(&self) -> usize {
        self.net.len()
    }

    pub fn is_empty(&self) -> bool {
        self.net.is_empty()
    }
}

/// Forward-solves the fitted model on the forecast day. The reported `net`
/// is literally `baseload_net + flexible`, so the decomposition identity is
/// exact by construction.
pub fn point_forecast(
    fit: &FitResult,
    prices: &PriceSignal,
    costs: &ComfortCosts,
    gen_forecast: &[f64],
    features_day: &[Vec<f64>],
    bounds: &FlexBounds,
    t_max: usize,
) -> Result<Forecast> {
    let t = fit.d_bl.len();
    if prices.len() != t || gen_forecast.len() != t || features_day.len() != t {
        return Err(Error::dim("forecast-day inputs must match the fitted horizon"));
    }
    let (env_plus, env_minus, env_sd) =
        fit.envelope_model.envelope_forecast(features_day, Some(bounds))?;
    let attrs = DemandAttributes {
        d_bl: fit.d_bl.clone(),
        env_sf_plus: env_plus,
        env_sf_minus: env_minus,
        env_sd,
    };
    let sol = solve_fop(prices, costs, &attrs, t_max, gen_forecast)?;

    let baseload_net: Vec<f64> = (0..t).map(|h| fit.d_bl[h] - gen_forecast[h]).collect();
    let shed_kept = sol.d_sd.clone();
    let flexible: Vec<f64> = (0..t).map(|h| sol.d_sf[h] + shed_kept[h]).collect();
    let net: Vec<f64> = (0..t).map(|h| baseload_net[h] + flexible[h]).collect();
    Ok(Forecast {
        net,
        baseload_net,
        flexible,
        shift_up: sol.theta.d_sf_plus.clone(),
        shift_down: sol.theta.d_sf_minus.clone(),
        shed_kept,
        levels: Vec::new(),
        quantiles: Vec::new(),
    })
}

/// Linear-interpolation empirical quantile of an unsorted sample.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Attaches quantile bands: point forecast plus per-hour empirical residual
/// quantiles, with a monotone (sorting) fix-up at every hour.
/// `history_residuals` holds one row per past day of per-hour forecast errors
/// (observed minus forecast).
pub fn quantile_forecast(
    point: &Forecast,
    history_residuals: &[Vec<f64>],
    levels: &[f64],
) -> Result<Forecast> {
    let t = point.len();
    if history_residuals.len() < 5 {
        return Err(Error::invalid(format!(
            "need at least 5 residual days, have {}",
            history_residuals.len()
        )));
    }
    if history_residuals.iter().any(|r| r.len() != t) {
        return Err(Error::dim("residual rows must match the forecast horizon"));
    }
    if levels.is_empty()
        || levels.windows(2).any(|w| w[1] <= w[0])
        || levels.iter().any(|q| !(*q > 0.0 && *q < 1.0))
    {
        return Err(Error::invalid("levels must be strictly increasing inside (0, 1)"));
    }

    let mut quantiles = vec![vec![0.0; t]; levels.len()];
    for h in 0..t {
        let mut sample: Vec<f64> = history_residuals.iter().map(|r| r[h]).collect();
        sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut col: Vec<f64> =
            levels.iter().map(|&q| point.net[h] + empirical_quantile(&sample, q)).collect();
        // Empirical quantiles of one sample are already monotone; the sort is
        // a guard for any future estimator swap.
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (li, v) in col.into_iter().enumerate() {
            quantiles[li][h] = v;
        }
    }
    Ok(Forecast { levels: levels.to_vec(), quantiles, ..point.clone() })
}

/// CSV export; multi-day exports concatenate rows with increasing `day`.
pub fn forecasts_to_csv(forecasts: &[Forecast]) -> String {
    let levels = forecasts.first().map(|f| f.levels.clone()).unwrap_or_default();
    let mut header = String::from("day,hour,net,baseload_net,flexible,shift_up,shift_down,shed_kept");
    for q in &levels {
        header.push_str(&format!(",q_{:02}", (q * 100.0).round() as u32));
    }
    header.push('\n');
    let mut out = header;
    for (d, f) in forecasts.iter().enumerate() {
        for h in 0..f.len() {
            out.push_str(&format!(
                "{d},{h},{},{},{},{},{},{}",
                f.net[h], f.baseload_net[h], f.flexible[h], f.shift_up[h], f.shift_down[h], f.shed_kept[h]
            ));
            for row in &f.quantiles {
                out.push_str(&format!(",{}", row[h]));
            }
            out.push('\n');
        }
    }
    out
}
