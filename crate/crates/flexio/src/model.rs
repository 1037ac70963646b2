//! Domain types shared across the pipeline: tariffs, comfort costs, demand
//! attributes, flexibility decisions, and the consumer utility function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem dimensions: `t` hourly periods per day, `s` training days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub t: usize,
    pub s: usize,
}

impl Horizon {
    pub fn new(t: usize, s: usize) -> Result<Self> {
        if t == 0 || s == 0 {
            return Err(Error::invalid("Horizon requires t >= 1 and s >= 1"));
        }
        Ok(Horizon { t, s })
    }
}

/// Per-hour tariff and flexibility incentive prices, all in currency/kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSignal {
    /// Retail price paid on net consumption.
    pub p: Vec<f64>,
    /// Incentive for shifting demand up (increasing consumption).
    pub p_sf_plus: Vec<f64>,
    /// Incentive for shifting demand down.
    pub p_sf_minus: Vec<f64>,
    /// Incentive for shedding demand.
    pub p_sd: Vec<f64>,
}

impl PriceSignal {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.p.len();
        if self.p_sf_plus.len() != t || self.p_sf_minus.len() != t || self.p_sd.len() != t {
            return Err(Error::dim("PriceSignal vectors must share one length"));
        }
        for v in self
            .p
            .iter()
            .chain(&self.p_sf_plus)
            .chain(&self.p_sf_minus)
            .chain(&self.p_sd)
        {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::invalid("prices must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Quadratic comfort-cost coefficients, currency/kWh^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComfortCosts {
    pub c_sf_plus: Vec<f64>,
    pub c_sf_minus: Vec<f64>,
    pub c_sd: Vec<f64>,
}

impl ComfortCosts {
    pub fn validate(&self) -> Result<()> {
        let t = self.c_sf_plus.len();
        if self.c_sf_minus.len() != t || self.c_sd.len() != t {
            return Err(Error::dim("ComfortCosts vectors must share one length"));
        }
        for v in self.c_sf_plus.iter().chain(&self.c_sf_minus).chain(&self.c_sd) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::invalid("comfort costs must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// The latent parameter vector: baseload profile plus the three flexibility
/// envelopes for one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandAttributes {
    pub d_bl: Vec<f64>,
    pub env_sf_plus: Vec<f64>,
    pub env_sf_minus: Vec<f64>,
    pub env_sd: Vec<f64>,
}

impl DemandAttributes {
    pub fn zeros(t: usize) -> Self {
        DemandAttributes {
            d_bl: vec![0.0; t],
            env_sf_plus: vec![0.0; t],
            env_sf_minus: vec![0.0; t],
            env_sd: vec![0.0; t],
        }
    }

    pub fn len(&self) -> usize {
        self.d_bl.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_bl.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.d_bl.len();
        if self.env_sf_plus.len() != t || self.env_sf_minus.len() != t || self.env_sd.len() != t {
            return Err(Error::dim("DemandAttributes vectors must share one length"));
        }
        for v in self
            .d_bl
            .iter()
            .chain(&self.env_sf_plus)
            .chain(&self.env_sf_minus)
            .chain(&self.env_sd)
        {
            if !v.is_finite() || *v < -1e-9 {
                return Err(Error::invalid("demand attributes must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Physical upper bounds on the flexibility envelopes, per hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexBounds {
    pub k_sf_plus: Vec<f64>,
    pub k_sf_minus: Vec<f64>,
    pub k_sd: Vec<f64>,
}

impl FlexBounds {
    pub fn uniform(t: usize, k: f64) -> Self {
        FlexBounds {
            k_sf_plus: vec![k; t],
            k_sf_minus: vec![k; t],
            k_sd: vec![k; t],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.k_sf_plus.len();
        if self.k_sf_minus.len() != t || self.k_sd.len() != t {
            return Err(Error::dim("FlexBounds vectors must share one length"));
        }
        for v in self.k_sf_plus.iter().chain(&self.k_sf_minus).chain(&self.k_sd) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::invalid("flexibility bounds must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// One day's flexibility decision: shift-up, shift-down, shed amounts plus the
/// shift-direction binaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexDecision {
    pub d_sf_plus: Vec<f64>,
    pub d_sf_minus: Vec<f64>,
    pub d_sd_minus: Vec<f64>,
    pub delta_plus: Vec<bool>,
    pub delta_minus: Vec<bool>,
}

impl FlexDecision {
    pub fn zeros(t: usize) -> Self {
        FlexDecision {
            d_sf_plus: vec![0.0; t],
            d_sf_minus: vec![0.0; t],
            d_sd_minus: vec![0.0; t],
            delta_plus: vec![false; t],
            delta_minus: vec![false; t],
        }
    }

    pub fn len(&self) -> usize {
        self.d_sf_plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_sf_plus.is_empty()
    }

    /// Number of hours with an active shift binary.
    pub fn active_hours(&self) -> usize {
        self.delta_plus
            .iter()
            .zip(&self.delta_minus)
            .filter(|(a, b)| **a || **b)
            .count()
    }

    /// Checks membership in the flexibility feasibility set for the given
    /// envelopes and shift-hour budget, up to `tol`.
    pub fn feasible_in(&self, attrs: &DemandAttributes, t_max: usize, tol: f64) -> bool {
        let t = self.len();
        if attrs.len() != t {
            return false;
        }
        for i in 0..t {
            let up_cap = if self.delta_plus[i] { attrs.env_sf_plus[i] } else { 0.0 };
            let dn_cap = if self.delta_minus[i] { attrs.env_sf_minus[i] } else { 0.0 };
            if self.d_sf_plus[i] < -tol || self.d_sf_plus[i] > up_cap + tol {
                return false;
            }
            if self.d_sf_minus[i] < -tol || self.d_sf_minus[i] > dn_cap + tol {
                return false;
            }
            if self.d_sd_minus[i] < -tol || self.d_sd_minus[i] > attrs.env_sd[i] + tol {
                return false;
            }
            if self.delta_plus[i] && self.delta_minus[i] {
                return false;
            }
        }
        if self.active_hours() > t_max {
            return false;
        }
        let up: f64 = self.d_sf_plus.iter().sum();
        let dn: f64 = self.d_sf_minus.iter().sum();
        (up - dn).abs() <= tol * (1.0 + up.abs() + dn.abs())
    }
}

/// One observed day: net demand, self-generation, and exogenous features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaySample {
    pub demand_hat: Vec<f64>,
    pub gen_hat: Vec<f64>,
    /// Row-major T x F feature matrix.
    pub features: Vec<Vec<f64>>,
    pub day_index: usize,
}

impl DaySample {
    pub fn validate(&self) -> Result<()> {
        let t = self.demand_hat.len();
        if self.gen_hat.len() != t || self.features.len() != t {
            return Err(Error::dim("DaySample vectors must share one length"));
        }
        let f = self.features.first().map_or(0, Vec::len);
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != f {
                return Err(Error::dim(format!("ragged feature row at hour {i}")));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("nonfinite feature at hour {i}")));
            }
        }
        if self.gen_hat.iter().any(|g| *g < 0.0 || !g.is_finite()) {
            return Err(Error::invalid("self-generation must be finite and nonnegative"));
        }
        if self.demand_hat.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("net demand must be finite"));
        }
        Ok(())
    }
}

/// Model hyperparameters tuned by grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub t_max: usize,
    pub alpha: f64,
    pub gamma_sf_plus: f64,
    pub gamma_sf_minus: f64,
    pub gamma_sd: f64,
    /// Norm exponent of the reconstruction loss; only 2 is supported.
    pub p_norm: u32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            t_max: 24,
            alpha: 0.0,
            gamma_sf_plus: 1.0,
            gamma_sf_minus: 1.0,
            gamma_sd: 1.0,
            p_norm: 2,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.t_max > t {
            return Err(Error::invalid(format!("t_max {} exceeds horizon {t}", self.t_max)));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha must be finite and nonnegative"));
        }
        for g in [self.gamma_sf_plus, self.gamma_sf_minus, self.gamma_sd] {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::invalid("kernel bandwidths must be positive"));
            }
        }
        if self.p_norm != 2 {
            return Err(Error::invalid("only p_norm = 2 is supported"));
        }
        Ok(())
    }
}

/// Rule used to fill the shedding comfort cost, which the tariff data does not
/// pin down. The default keeps shedding on the same scale as shifting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShedCostRule {
    /// Mean of the nonzero shifting comfort costs of the day.
    MeanOfShiftCosts,
    /// A fixed value for every hour.
    Constant(f64),
}

/// Consumer utility for one day: comfort cost plus financial exchanges with
/// the system operator.
///
/// The quadratic part penalizes flexibility activity; the linear part nets the
/// flexibility remuneration against the bill on net consumption
/// `d_bl + d_sf_plus - d_sf_minus + env_sd - d_sd_minus - g`.
pub fn consumer_utility(
    theta: &FlexDecision,
    prices: &PriceSignal,
    costs: &ComfortCosts,
    attrs: &DemandAttributes,
    gen: &[f64],
) -> Result<f64> {
    let t = theta.len();
    if prices.len() != t || costs.c_sf_plus.len() != t || attrs.len() != t || gen.len() != t {
        return Err(Error::dim("consumer_utility inputs must share one length"));
    }
    let mut total = 0.0;
    for i in 0..t {
        total += utility_q(theta, costs, i) + utility_l(theta, prices, attrs, gen, i);
    }
    Ok(total)
}

/// Comfort-cost term at hour `i`.
pub fn utility_q(theta: &FlexDecision, costs: &ComfortCosts, i: usize) -> f64 {
    -costs.c_sf_plus[i] * theta.d_sf_plus[i].powi(2)
        - costs.c_sf_minus[i] * theta.d_sf_minus[i].powi(2)
        - costs.c_sd[i] * theta.d_sd_minus[i].powi(2)
}

/// Financial-exchange term at hour `i`.
pub fn utility_l(
    theta: &FlexDecision,
    prices: &PriceSignal,
    attrs: &DemandAttributes,
    gen: &[f64],
    i: usize,
) -> f64 {
    let net = attrs.d_bl[i] + theta.d_sf_plus[i] - theta.d_sf_minus[i] + attrs.env_sd[i]
        - theta.d_sd_minus[i]
        - gen[i];
    prices.p_sf_plus[i] * theta.d_sf_plus[i]
        + prices.p_sf_minus[i] * theta.d_sf_minus[i]
        + prices.p_sd[i] * theta.d_sd_minus[i]
        - prices.p[i] * net
}

/// Normalized forgetting weights `(s/S)^alpha / sum`, for `s = 1..=S`.
pub fn compute_weights(alpha: f64, s: usize) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::invalid("S must be >= 1"));
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::invalid("alpha must be finite and nonnegative"));
    }
    let raw: Vec<f64> = (1..=s).map(|i| (i as f64 / s as f64).powf(alpha)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Builds the incentive price signal from a flat tariff and a TOU schedule.
///
/// `p_sf_plus = max(flat - tou, 0)`, `p_sf_minus = max(tou - flat, 0)`, and
/// the shedding price is the day average of `p_sf_plus`, applied to every hour.
pub fn build_tou_prices(flat: f64, tou: &[f64]) -> Result<PriceSignal> {
    if !(flat > 0.0) {
        return Err(Error::invalid("flat tariff must be positive"));
    }
    if tou.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("TOU prices must be finite and nonnegative"));
    }
    let t = tou.len();
    let p_sf_plus: Vec<f64> = tou.iter().map(|&x| (flat - x).max(0.0)).collect();
    let p_sf_minus: Vec<f64> = tou.iter().map(|&x| (x - flat).max(0.0)).collect();
    let p_sd_val = p_sf_plus.iter().sum::<f64>() / t as f64;
    Ok(PriceSignal {
        p: vec![flat; t],
        p_sf_plus,
        p_sf_minus,
        p_sd: vec![p_sd_val; t],
    })
}

/// Comfort costs from the tariff structure: `|flat - tou|` on the hours where
/// the corresponding incentive price is zero, and zero otherwise. The shed
/// cost follows `shed_rule`.
pub fn build_comfort_costs(
    prices: &PriceSignal,
    flat: f64,
    tou: &[f64],
    shed_rule: ShedCostRule,
) -> Result<ComfortCosts> {
    let t = prices.len();
    if tou.len() != t {
        return Err(Error::dim("TOU length must match the price signal"));
    }
    let mut c_sf_plus = vec![0.0; t];
    let mut c_sf_minus = vec![0.0; t];
    for i in 0..t {
        let spread = (flat - tou[i]).abs();
        if prices.p_sf_plus[i] == 0.0 {
            c_sf_plus[i] = spread;
        }
        if prices.p_sf_minus[i] == 0.0 {
            c_sf_minus[i] = spread;
        }
    }
    let c_sd_val = match shed_rule {
        ShedCostRule::Constant(v) => {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::invalid("shed comfort cost must be nonnegative"));
            }
            v
        }
        ShedCostRule::MeanOfShiftCosts => {
            let nonzero: Vec<f64> = c_sf_plus
                .iter()
                .chain(&c_sf_minus)
                .copied()
                .filter(|v| *v > 0.0)
                .collect();
            if nonzero.is_empty() {
                0.0
            } else {
                nonzero.iter().sum::<f64>() / nonzero.len() as f64
            }
        }
    };
    Ok(ComfortCosts {
        c_sf_plus,
        c_sf_minus,
        c_sd: vec![c_sd_val; t],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_hour_setup() -> (PriceSignal, ComfortCosts, DemandAttributes) {
        let prices = PriceSignal {
            p: vec![10.0],
            p_sf_plus: vec![0.0],
            p_sf_minus: vec![0.0],
            p_sd: vec![4.0],
        };
        let costs = ComfortCosts {
            c_sf_plus: vec![1.0],
            c_sf_minus: vec![1.0],
            c_sd: vec![2.0],
        };
        let attrs = DemandAttributes {
            d_bl: vec![2.0],
            env_sf_plus: vec![0.0],
            env_sf_minus: vec![0.0],
            env_sd: vec![1.0],
        };
        (prices, costs, attrs)
    }

    #[test]
    fn utility_zero_theta() {
        let (prices, costs, attrs) = one_hour_setup();
        let theta = FlexDecision::zeros(1);
        let u = consumer_utility(&theta, &prices, &costs, &attrs, &[0.0]).unwrap();
        // only -p (d_bl + env_sd) remains
        assert_abs_diff_eq!(u, -30.0, epsilon = 1e-12);
    }

    #[test]
    fn utility_net_position_zero() {
        let (prices, costs, mut attrs) = one_hour_setup();
        attrs.env_sd = vec![0.0];
        let theta = FlexDecision::zeros(1);
        let u = consumer_utility(&theta, &prices, &costs, &attrs, &[2.0]).unwrap();
        assert_abs_diff_eq!(u, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn utility_shed_hand_value() {
        let (prices, costs, mut attrs) = one_hour_setup();
        attrs.d_bl = vec![0.0];
        let mut theta = FlexDecision::zeros(1);
        theta.d_sd_minus = vec![0.5];
        let u = consumer_utility(&theta, &prices, &costs, &attrs, &[0.0]).unwrap();
        // Q = -2*0.25 = -0.5, L = 4*0.5 - 10*(1 - 0.5) = -3
        assert_abs_diff_eq!(u, -3.5, epsilon = 1e-12);
    }

    #[test]
    fn utility_dimension_mismatch() {
        let (prices, costs, attrs) = one_hour_setup();
        let theta = FlexDecision::zeros(2);
        assert!(consumer_utility(&theta, &prices, &costs, &attrs, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn weights_uniform() {
        let w = compute_weights(0.0, 4).unwrap();
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn weights_alpha_one() {
        let w = compute_weights(1.0, 2).unwrap();
        assert_abs_diff_eq!(w[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn weights_alpha_two() {
        let w = compute_weights(2.0, 3).unwrap();
        assert_abs_diff_eq!(w[0], 1.0 / 14.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 4.0 / 14.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[2], 9.0 / 14.0, epsilon = 1e-15);
    }

    #[test]
    fn tou_prices_japan_style() {
        // flat 26, peak 35 on hours 14..=21, 20 elsewhere
        let tou: Vec<f64> = (0..24).map(|h| if (14..=21).contains(&h) { 35.0 } else { 20.0 }).collect();
        let ps = build_tou_prices(26.0, &tou).unwrap();
        for h in 0..24 {
            if (14..=21).contains(&h) {
                assert_abs_diff_eq!(ps.p_sf_minus[h], 9.0);
                assert_abs_diff_eq!(ps.p_sf_plus[h], 0.0);
            } else {
                assert_abs_diff_eq!(ps.p_sf_plus[h], 6.0);
                assert_abs_diff_eq!(ps.p_sf_minus[h], 0.0);
            }
        }
        assert_abs_diff_eq!(ps.p_sd[0], 16.0 * 6.0 / 24.0, epsilon = 1e-12);
    }

    #[test]
    fn tou_prices_ohio_style() {
        let tou: Vec<f64> = (0..24).map(|h| if h < 4 { 29.0 } else { 15.0 }).collect();
        let ps = build_tou_prices(22.0, &tou).unwrap();
        for h in 0..24 {
            if h < 4 {
                assert_abs_diff_eq!(ps.p_sf_minus[h], 7.0);
            } else {
                assert_abs_diff_eq!(ps.p_sf_plus[h], 7.0);
            }
        }
        assert_abs_diff_eq!(ps.p_sd[0], 20.0 * 7.0 / 24.0, epsilon = 1e-12);
    }

    #[test]
    fn tou_prices_degenerate_flat() {
        let ps = build_tou_prices(22.0, &[22.0; 5]).unwrap();
        assert!(ps.p_sf_plus.iter().all(|v| *v == 0.0));
        assert!(ps.p_sf_minus.iter().all(|v| *v == 0.0));
        assert!(ps.p_sd.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn comfort_costs_rule() {
        let tou: Vec<f64> = vec![29.0, 15.0, 22.0];
        let ps = build_tou_prices(22.0, &tou).unwrap();
        let cc = build_comfort_costs(&ps, 22.0, &tou, ShedCostRule::MeanOfShiftCosts).unwrap();
        // peak hour: p_sf_plus = 0 so c_sf_plus = 7; p_sf_minus = 7 > 0 so c_sf_minus = 0
        assert_abs_diff_eq!(cc.c_sf_plus[0], 7.0);
        assert_abs_diff_eq!(cc.c_sf_minus[0], 0.0);
        // off-peak hour: reversed
        assert_abs_diff_eq!(cc.c_sf_plus[1], 0.0);
        assert_abs_diff_eq!(cc.c_sf_minus[1], 7.0);
        // flat hour: both incentives zero, spread zero -> both costs zero
        assert_abs_diff_eq!(cc.c_sf_plus[2], 0.0);
        assert_abs_diff_eq!(cc.c_sf_minus[2], 0.0);
        assert_abs_diff_eq!(cc.c_sd[0], 7.0);
    }

    #[test]
    fn comfort_costs_flat_everywhere() {
        let tou = vec![26.0; 4];
        let ps = build_tou_prices(26.0, &tou).unwrap();
        let cc = build_comfort_costs(&ps, 26.0, &tou, ShedCostRule::MeanOfShiftCosts).unwrap();
        assert!(cc.c_sf_plus.iter().all(|v| *v == 0.0));
        assert!(cc.c_sf_minus.iter().all(|v| *v == 0.0));
        assert!(cc.c_sd.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn comfort_costs_minus_side() {
        let tou = vec![20.0];
        let ps = build_tou_prices(26.0, &tou).unwrap();
        let cc = build_comfort_costs(&ps, 26.0, &tou, ShedCostRule::MeanOfShiftCosts).unwrap();
        assert_abs_diff_eq!(cc.c_sf_plus[0], 0.0);
        assert_abs_diff_eq!(cc.c_sf_minus[0], 6.0);
    }

    #[test]
    fn utility_decomposes() {
        let (prices, costs, attrs) = one_hour_setup();
        let mut theta = FlexDecision::zeros(1);
        theta.d_sd_minus = vec![0.25];
        let total = consumer_utility(&theta, &prices, &costs, &attrs, &[0.3]).unwrap();
        let q: f64 = (0..1).map(|i| utility_q(&theta, &costs, i)).sum();
        let l: f64 = (0..1).map(|i| utility_l(&theta, &prices, &attrs, &[0.3], i)).sum();
        assert_abs_diff_eq!(total, q + l, epsilon = 1e-12);
    }
}
