//! Exact solver for the consumer's forward optimization problem: a
//! mixed-binary concave QP over shift/shed decisions with one coupling
//! equality (energy-neutral shifting), plus KKT certificate machinery.
//!
//! Shedding separates per hour and has a closed form. Shifting for fixed
//! direction binaries is solved by bisection on the multiplier of the
//! energy-neutrality constraint; the binaries themselves are handled by
//! branch and bound with the both-directions relaxation as upper bound.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{consumer_utility, ComfortCosts, DemandAttributes, FlexDecision, PriceSignal};

/// Primal-dual evidence that a decision satisfies the stationarity,
/// feasibility, and complementarity conditions of the consumer problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktCertificate {
    /// Multiplier of the energy-neutrality equality.
    pub kappa: f64,
    pub mu_plus: Vec<f64>,
    pub mu_minus: Vec<f64>,
    pub mu_zero: Vec<f64>,
    pub nu_plus: Vec<f64>,
    pub nu_minus: Vec<f64>,
    pub nu_zero: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FopSolution {
    pub theta: FlexDecision,
    pub certificate: KktCertificate,
    pub utility: f64,
    /// Net shifted demand, `d_sf_plus - d_sf_minus`.
    pub d_sf: Vec<f64>,
    /// Kept sheddable demand, `env_sd - d_sd_minus`.
    pub d_sd: Vec<f64>,
}

const ACTIVITY_TOL: f64 = 1e-11;

/// Per-hour closed-form shed decision: `clip((p_sd + p) / (2 c_sd), 0, env)`,
/// bang-bang on a strictly positive gain when the comfort cost is zero.
pub fn solve_shed(prices: &PriceSignal, costs: &ComfortCosts, env_sd: &[f64]) -> Vec<f64> {
    env_sd
        .iter()
        .enumerate()
        .map(|(t, &env)| {
            let gain = prices.p_sd[t] + prices.p[t];
            let c = costs.c_sd[t];
            if c > 0.0 {
                (gain / (2.0 * c)).clamp(0.0, env)
            } else if gain > 0.0 {
                env
            } else {
                0.0
            }
        })
        .collect()
}

/// Direction caps for the shift subproblem once binaries are fixed.
#[derive(Debug, Clone)]
struct ShiftCaps {
    up: Vec<f64>,
    down: Vec<f64>,
}

/// Optimal shift response for a fixed multiplier `kappa`.
fn shift_response(
    prices: &PriceSignal,
    costs: &ComfortCosts,
    caps: &ShiftCaps,
    kappa: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t = prices.len();
    let mut up = vec![0.0; t];
    let mut down = vec![0.0; t];
    for i in 0..t {
        let gain_up = prices.p_sf_plus[i] - prices.p[i] + kappa;
        let c_up = costs.c_sf_plus[i];
        up[i] = if c_up > 0.0 {
            (gain_up / (2.0 * c_up)).clamp(0.0, caps.up[i])
        } else if gain_up > 0.0 {
            caps.up[i]
        } else {
            0.0
        };
        let gain_dn = prices.p_sf_minus[i] + prices.p[i] - kappa;
        let c_dn = costs.c_sf_minus[i];
        down[i] = if c_dn > 0.0 {
            (gain_dn / (2.0 * c_dn)).clamp(0.0, caps.down[i])
        } else if gain_dn > 0.0 {
            caps.down[i]
        } else {
            0.0
        };
    }
    (up, down)
}

fn neutrality_gap(prices: &PriceSignal, costs: &ComfortCosts, caps: &ShiftCaps, kappa: f64) -> f64 {
    let (up, down) = shift_response(prices, costs, caps, kappa);
    up.iter().sum::<f64>() - down.iter().sum::<f64>()
}

/// Exact maximizer of the shift subproblem for fixed direction caps.
/// Returns `(d_sf_plus, d_sf_minus, kappa)`.
fn solve_shift_caps(
    prices: &PriceSignal,
    costs: &ComfortCosts,
    caps: &ShiftCaps,
) -> (Vec<f64>, Vec<f64>, f64) {
    let t = prices.len();
    let cap_up: f64 = caps.up.iter().sum();
    let cap_dn: f64 = caps.down.iter().sum();
    if cap_up <= 0.0 || cap_dn <= 0.0 {
        return (vec![0.0; t], vec![0.0; t], 0.0);
    }
    let scale = 1.0 + cap_up + cap_dn;
    let tol = 1e-10 * scale;

    // Bracket so that gap(lo) <= 0 <= gap(hi); the spec bracket is widened
    // geometrically if a price pattern ever escapes it.
    let mut lo = -(0..t).map(|i| prices.p[i] + prices.p_sf_minus[i]).fold(0.0, f64::max) - 1.0;
    let mut hi = (0..t).map(|i| prices.p[i] + prices.p_sf_plus[i]).fold(0.0, f64::max) + 1.0;
    let mut width = hi - lo;
    for _ in 0..60 {
        if neutrality_gap(prices, costs, caps, lo) <= 0.0 {
            break;
        }
        lo -= width;
        width *= 2.0;
    }
    width = hi - lo;
    for _ in 0..60 {
        if neutrality_gap(prices, costs, caps, hi) >= 0.0 {
            break;
        }
        hi += width;
        width *= 2.0;
    }

    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if neutrality_gap(prices, costs, caps, mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-14 * (1.0 + hi.abs() + lo.abs()) {
            break;
        }
    }
    let mut kappa = 0.5 * (lo + hi);

    // Polish kappa exactly against the active set at the bisection point, or
    // take the midpoint of the optimal interval when no component is interior.
    let (up, down) = shift_response(prices, costs, caps, kappa);
    let mut inv_sum = 0.0;
    let mut rhs = 0.0;
    for i in 0..t {
        let c_up = costs.c_sf_plus[i];
        if c_up > 0.0 && up[i] > ACTIVITY_TOL && up[i] < caps.up[i] - ACTIVITY_TOL {
            inv_sum += 1.0 / (2.0 * c_up);
            rhs -= (prices.p_sf_plus[i] - prices.p[i]) / (2.0 * c_up);
        } else {
            rhs -= up[i];
        }
        let c_dn = costs.c_sf_minus[i];
        if c_dn > 0.0 && down[i] > ACTIVITY_TOL && down[i] < caps.down[i] - ACTIVITY_TOL {
            inv_sum += 1.0 / (2.0 * c_dn);
            rhs += (prices.p_sf_minus[i] + prices.p[i]) / (2.0 * c_dn);
        } else {
            rhs += down[i];
        }
    }
    if inv_sum > 0.0 {
        let polished = rhs / inv_sum;
        if neutrality_gap(prices, costs, caps, polished).abs() <= tol {
            kappa = polished;
        }
    } else {
        // Flat region: locate its endpoints among the component breakpoints.
        let mut region_lo = f64::NEG_INFINITY;
        let mut region_hi = f64::INFINITY;
        for i in 0..t {
            let mut brks = vec![prices.p[i] - prices.p_sf_plus[i]];
            if costs.c_sf_plus[i] > 0.0 {
                brks.push(prices.p[i] - prices.p_sf_plus[i] + 2.0 * costs.c_sf_plus[i] * caps.up[i]);
            }
            brks.push(prices.p_sf_minus[i] + prices.p[i]);
            if costs.c_sf_minus[i] > 0.0 {
                brks.push(prices.p_sf_minus[i] + prices.p[i] - 2.0 * costs.c_sf_minus[i] * caps.down[i]);
            }
            for b in brks {
                if b < kappa - 1e-12 {
                    region_lo = region_lo.max(b);
                } else if b > kappa + 1e-12 {
                    region_hi = region_hi.min(b);
                }
            }
        }
        kappa = if region_lo.is_finite() && region_hi.is_finite() {
            0.5 * (region_lo + region_hi)
        } else {
            kappa.clamp(
                if region_lo.is_finite() { region_lo } else { kappa },
                if region_hi.is_finite() { region_hi } else { kappa },
            )
        };
        if neutrality_gap(prices, costs, caps, kappa).abs() > tol {
            // The midpoint left the zero set (possible with discontinuities);
            // fall back to the bisection value.
            kappa = 0.5 * (lo + hi);
        }
    }

    let (mut up, mut down) = shift_response(prices, costs, caps, kappa);
    close_neutrality_gap(prices, costs, caps, kappa, &mut up, &mut down, tol);
    (up, down, kappa)
}

/// Distributes a residual neutrality gap across components indifferent at the
/// current multiplier (zero comfort cost at a flat gain). Needed because the
/// response is discontinuous at bang-bang thresholds.
fn close_neutrality_gap(
    prices: &PriceSignal,
    costs: &ComfortCosts,
    caps: &ShiftCaps,
    kappa: f64,
    up: &mut [f64],
    down: &mut [f64],
    tol: f64,
) {
    let mut gap = up.iter().sum::<f64>() - down.iter().sum::<f64>();
    if gap.abs() <= tol {
        return;
    }
    let t = up.len();
    let eps = 1e-9 * (1.0 + kappa.abs());
    // First pass shrinks indifferent activity (ties break toward zero
    // flexibility); a second pass raises the opposite side only if needed.
    for i in 0..t {
        if gap.abs() <= tol {
            break;
        }
        let gain_up = prices.p_sf_plus[i] - prices.p[i] + kappa;
        if gap > 0.0 && costs.c_sf_plus[i] == 0.0 && gain_up.abs() <= eps {
            let take = gap.min(up[i]);
            up[i] -= take;
            gap -= take;
        }
        let gain_dn = prices.p_sf_minus[i] + prices.p[i] - kappa;
        if gap < 0.0 && costs.c_sf_minus[i] == 0.0 && gain_dn.abs() <= eps {
            let take = (-gap).min(down[i]);
            down[i] -= take;
            gap += take;
        }
    }
    for i in 0..t {
        if gap.abs() <= tol {
            break;
        }
        let gain_up = prices.p_sf_plus[i] - prices.p[i] + kappa;
        if gap < 0.0 && costs.c_sf_plus[i] == 0.0 && gain_up.abs() <= eps {
            let take = (-gap).min(caps.up[i] - up[i]);
            up[i] += take;
            gap += take;
        }
        let gain_dn = prices.p_sf_minus[i] + prices.p[i] - kappa;
        if gap > 0.0 && costs.c_sf_minus[i] == 0.0 && gain_dn.abs() <= eps {
            let take = gap.min(caps.down[i] - down[i]);
            down[i] += take;
            gap -= take;
        }
    }
}

/// Exact maximizer of the shift subproblem for fixed binaries.
pub fn solve_shift_given_binaries(
    prices: &PriceSignal,
    costs: &ComfortCosts,
    env_plus: &[f64],
    env_minus: &[f64],
    delta_plus: &[bool],
    delta_minus: &[bool],
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let t = prices.len();
    if env_plus.len() != t || env_minus.len() != t || delta_plus.len() != t || delta_minus.len() != t
    {
        return Err(Error::dim("shift subproblem inputs must share one length"));
    }
    if delta_plus.iter().zip(delta_minus).any(|(a, b)| *a && *b) {
        return Err(Error::invalid("binaries violate mutual exclusion"));
    }
    let caps = ShiftCaps {
        up: (0..t).map(|i| if delta_plus[i] { env_plus[i] } else { 0.0 }).collect(),
        down: (0..t).map(|i| if delta_minus[i] { env_minus[i] } else { 0.0 }).collect(),
    };
    Ok(solve_shift_caps(prices, costs, &caps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HourState {
    Undecided,
    /// Undecided between Minus and Off; the up direction is excluded. Used to
    /// break symmetry among identical hours.
    NoPlus,
    Off,
    Plus,
    Minus,
}

impl HourState {
    fn open(self) -> bool {
        matches!(self, HourState::Undecided | HourState::NoPlus)
    }
}

struct Node {
    states: Vec<HourState>,
    bound: f64,
    depth: usize,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.depth == other.depth
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        // Best bound first; on ties prefer deeper nodes so the search dives
        // toward an incumbent instead of sweeping symmetric siblings.
        self.bound
            .partial_cmp(&other.bound)
            .unwrap_or(Ordering::Equal)
            .then(self.depth.cmp(&other.depth))
    }
}

/// Best utility of one shift direction at multiplier-adjusted gain `gain`,
/// over `0 <= x <= cap` with quadratic comfort cost `c`.
fn dir_value(gain: f64, c: f64, cap: f64) -> f64 {
    if cap <= 0.0 {
        return 0.0;
    }
    if c > 0.0 {
        let x = (gain / (2.0 * c)).clamp(0.0, cap);
        gain * x - c * x * x
    } else if gain > 0.0 {
        gain * cap
    } else {
        0.0
    }
}

/// Lagrangian dual value at `kappa` for the shift problem restricted by
/// `states`, keeping per-hour direction exclusivity and the activity budget
/// inside the relaxation: undecided hours contribute the better of their two
/// direction values, and only the `budget` largest undecided contributions
/// count. Any `kappa` yields a valid upper bound by weak duality.
fn exclusive_dual_value(
    prices: &PriceSignal,
    costs: &ComfortCosts,
    attrs: &DemandAttributes,
    states: &[HourState],
    budget: usize,
    kappa: f64,
    undecided_vals: &mut Vec<f64>,
) -> f64 {
    let t = states.len();
    let mut total = 0.0;
    undecided_vals.clear();
    for i in 0..t {
        let gain_up = prices.p_sf_plus[i] - prices.p[i] + kappa;
        let gain_dn = prices.p_sf_minus[i] + prices.p[i] - kappa;
        match states[i] {
            HourState::Off => {}
            HourState::Plus => {
                total += dir_value(gain_up, costs.c_sf_plus[i], attrs.env_sf_plus[i]);
            }
            HourState::Minus => {
                total += dir_value(gain_dn, costs.c_sf_minus[i], attrs.env_sf_minus[i]);
            }
            HourState::Undecided => {
                let v_up = dir_value(gain_up, costs.c_sf_plus[i], attrs.env_sf_plus[i]);
                let v_dn = dir_value(gain_dn, costs.c_sf_minus[i], attrs.env_sf_minus[i]);
                undecided_vals.push(v_up.max(v_dn));
            }
            HourState::NoPlus => {
                undecided_vals.push(dir_value(gain_dn, costs.c_sf_minus[i], attrs.env_sf_minus[i]));
            }
        }
    }
    if budget > 0 && !undecided_vals.is_empty() {
        undecided_vals.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
        total += undecided_vals.iter().take(budget).sum::<f64>();
    }
    total
}

/// Upper bound on the shift utility reachable under `states`: the exclusivity
/// and budget aware dual, minimized over the neutrality multiplier by ternary
/// search (the dual is convex in `kappa`).
fn exclusive_dual_bound(
    prices: &PriceSignal,
    costs: &ComfortCosts,
    attrs: &DemandAttributes,
    states: &[HourState],
    t_max: usize,
) -> f64 {
    let t = states.len();
    let decided_active = states
        .iter()
        .filter(|s| matches!(s, HourState::Plus | HourState::Minus))
        .count();
    if decided_active > t_max {
        return f64::NEG_INFINITY;
    }
    let budget = t_max - decided_active;
    let mut lo =
        -(0..t).map(|i| prices.p[i] + prices.p_sf_minus[i]).fold(0.0, f64::max) - 1.0;
    let mut hi = (0..t).map(|i| prices.p[i] + prices.p_sf_plus[i]).fold(0.0, f64::max) + 1.0;
    let mut scratch = Vec::with_capacity(t);
    let eval = |k: f64, scratch: &mut Vec<f64>| {
        exclusive_dual_value(prices, costs, attrs, states, budget, k, scratch)
    };
    for _ in 0..120 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if eval(m1, &mut scratch) <= eval(m2, &mut scratch) {
            hi = m2;
        } else {
            lo = m1;
        }
        if hi - lo < 1e-12 * (1.0 + lo.abs() + hi.abs()) {
            break;
        }
    }
    eval(0.5 * (lo + hi), &mut scratch)
}

fn caps_for(states: &[HourState], attrs: &DemandAttributes) -> ShiftCaps {
    let t = states.len();
    let mut up = vec![0.0; t];
    let mut down = vec![0.0; t];
    for i in 0..t {
        match states[i] {
            HourState::Undecided => {
                up[i] = attrs.env_sf_plus[i];
                down[i] = attrs.env_sf_minus[i];
            }
            HourState::NoPlus => down[i] = attrs.env_sf_minus[i],
            HourState::Plus => up[i] = attrs.env_sf_plus[i],
            HourState::Minus => down[i] = attrs.env_sf_minus[i],
            HourState::Off => {}
        }
    }
    ShiftCaps { up, down }
}

fn shift_utility(prices: &PriceSignal, costs: &ComfortCosts, up: &[f64], down: &[f64]) -> f64 {
    let mut u = 0.0;
    for i in 0..up.len() {
        u += -costs.c_sf_plus[i] * up[i] * up[i] + (prices.p_sf_plus[i] - prices.p[i]) * up[i];
        u += -costs.c_sf_minus[i] * down[i] * down[i] + (prices.p_sf_minus[i] + prices.p[i]) * down[i];
    }
    u
}

/// Globally optimal flexibility decision over the feasibility set.
pub fn solve_fop(
    prices: &PriceSignal,
    costs: &ComfortCosts,
    attrs: &DemandAttributes,
    t_max: usize,
    gen: &[f64],
) -> Result<FopSolution> {
    let t = prices.len();
    prices.validate()?;
    costs.validate()?;
    attrs.validate()?;
    if attrs.len() != t || costs.c_sf_plus.len() != t || gen.len() != t {
        return Err(Error::dim("solve_fop inputs must share one length"));
    }
    if t_max > t {
        return Err(Error::invalid(format!("t_max {t_max} exceeds horizon {t}")));
    }
    if gen.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("nonfinite generation input"));
    }

    let d_sd_minus = solve_shed(prices, costs, &attrs.env_sd);

    let scale = 1.0
        + attrs.env_sf_plus.iter().sum::<f64>()
        + attrs.env_sf_minus.iter().sum::<f64>()
        + prices.p.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = 1e-9 * scale;

    // Branch and bound over per-hour shift direction states.
    let mut best_up = vec![0.0; t];
    let mut best_down = vec![0.0; t];
    let mut best_kappa = 0.0;
    let mut best_val = f64::NEG_INFINITY;

    // Hours with identical prices, comfort costs, and envelopes are
    // exchangeable in the shift problem. Group them into classes and explore
    // only canonical assignments (Plus before Minus before Off by index within
    // a class), which collapses the permutation symmetry of flat tariffs.
    let class_of: Vec<usize> = {
        let mut ids: HashMap<[u64; 7], usize> = HashMap::new();
        (0..t)
            .map(|i| {
                let key = [
                    prices.p[i].to_bits(),
                    prices.p_sf_plus[i].to_bits(),
                    prices.p_sf_minus[i].to_bits(),
                    costs.c_sf_plus[i].to_bits(),
                    costs.c_sf_minus[i].to_bits(),
                    attrs.env_sf_plus[i].to_bits(),
                    attrs.env_sf_minus[i].to_bits(),
                ];
                let next = ids.len();
                *ids.entry(key).or_insert(next)
            })
            .collect()
    };

    let mut heap: BinaryHeap<Node> = BinaryHeap::new();
    let root_states = vec![HourState::Undecided; t];
    let root_bound = exclusive_dual_bound(prices, costs, attrs, &root_states, t_max);
    heap.push(Node { states: root_states, bound: root_bound, depth: 0 });

    let mut expanded = 0usize;
    while let Some(node) = heap.pop() {
        if node.bound <= best_val + tol {
            break;
        }
        expanded += 1;
        if expanded > 200_000 {
            return Err(Error::NoConvergence("shift branch-and-bound node limit reached".into()));
        }

        let caps = caps_for(&node.states, attrs);
        let (up, down, kappa) = solve_shift_caps(prices, costs, &caps);
        let value = shift_utility(prices, costs, &up, &down);
        if value <= best_val + tol && value < node.bound - tol {
            // The recomputed bound is tighter than the stored one; re-queue is
            // unnecessary since value is exact for this node's relaxation.
        }

        let decided_active = (0..t)
            .filter(|&i| matches!(node.states[i], HourState::Plus | HourState::Minus))
            .count();
        if decided_active > t_max {
            continue;
        }

        // Violations of the binary structure at the relaxed optimum.
        let both_active: Vec<usize> = (0..t)
            .filter(|&i| {
                node.states[i].open() && up[i] > ACTIVITY_TOL && down[i] > ACTIVITY_TOL
            })
            .collect();
        let undecided_active: Vec<usize> = (0..t)
            .filter(|&i| {
                node.states[i].open() && (up[i] > ACTIVITY_TOL || down[i] > ACTIVITY_TOL)
            })
            .collect();
        let total_active = decided_active + undecided_active.len();

        if both_active.is_empty() && total_active <= t_max {
            // Relaxed optimum is feasible for the original problem.
            if value > best_val + tol || best_val == f64::NEG_INFINITY {
                best_val = value;
                best_up = up;
                best_down = down;
                best_kappa = kappa;
            }
            continue;
        }

        // Branch on the most ambiguous hour.
        let branch_hour = if !both_active.is_empty() {
            *both_active
                .iter()
                .max_by(|&&a, &&b| {
                    let va = up[a].min(down[a]);
                    let vb = up[b].min(down[b]);
                    va.partial_cmp(&vb).unwrap_or(Ordering::Equal)
                })
                .unwrap()
        } else {
            // Cardinality violation: branch on the least active undecided hour.
            *undecided_active
                .iter()
                .min_by(|&&a, &&b| {
                    let va = up[a].max(down[a]);
                    let vb = up[b].max(down[b]);
                    va.partial_cmp(&vb).unwrap_or(Ordering::Equal)
                })
                .unwrap()
        };

        // Branch the first open hour of the chosen hour's class so canonical
        // ordering can be maintained; class members are interchangeable.
        let class = class_of[branch_hour];
        let branch_hour = (0..t)
            .find(|&i| class_of[i] == class && node.states[i].open())
            .unwrap_or(branch_hour);
        let options: &[HourState] = if node.states[branch_hour] == HourState::Undecided {
            &[HourState::Plus, HourState::Minus, HourState::Off]
        } else {
            &[HourState::Minus, HourState::Off]
        };
        for &state in options {
            let mut child_states = node.states.clone();
            child_states[branch_hour] = state;
            // Enforce canonical ordering on the rest of the class: after a
            // Minus no later member may go Plus; after an Off none may be
            // active at all.
            match state {
                HourState::Minus => {
                    for i in branch_hour + 1..t {
                        if class_of[i] == class && child_states[i] == HourState::Undecided {
                            child_states[i] = HourState::NoPlus;
                        }
                    }
                }
                HourState::Off => {
                    for i in branch_hour + 1..t {
                        if class_of[i] == class && child_states[i].open() {
                            child_states[i] = HourState::Off;
                        }
                    }
                }
                _ => {}
            }
            let child_bound =
                exclusive_dual_bound(prices, costs, attrs, &child_states, t_max).min(node.bound);
            if child_bound > best_val + tol {
                heap.push(Node { states: child_states, bound: child_bound, depth: node.depth + 1 });
            }
        }
    }

    if best_val == f64::NEG_INFINITY {
        // No feasible shift found (cannot happen: all-off is always feasible),
        // fall back to zero shift.
        best_up = vec![0.0; t];
        best_down = vec![0.0; t];
        best_kappa = 0.0;
    }

    let theta = FlexDecision {
        delta_plus: best_up.iter().map(|&v| v > ACTIVITY_TOL).collect(),
        delta_minus: best_down.iter().map(|&v| v > ACTIVITY_TOL).collect(),
        d_sf_plus: best_up,
        d_sf_minus: best_down,
        d_sd_minus,
    };
    let utility = consumer_utility(&theta, prices, costs, attrs, gen)?;
    let certificate = assemble_certificate(&theta, prices, costs, attrs, best_kappa);
    let d_sf: Vec<f64> = (0..t).map(|i| theta.d_sf_plus[i] - theta.d_sf_minus[i]).collect();
    let d_sd: Vec<f64> = (0..t).map(|i| attrs.env_sd[i] - theta.d_sd_minus[i]).collect();
    Ok(FopSolution { theta, certificate, utility, d_sf, d_sd })
}

/// Closed-form dual recovery for a primal decision believed optimal at the
/// given multiplier.
pub fn assemble_certificate(
    theta: &FlexDecision,
    prices: &PriceSignal,
    costs: &ComfortCosts,
    attrs: &DemandAttributes,
    kappa: f64,
) -> KktCertificate {
    let t = theta.len();
    let mut cert = KktCertificate {
        kappa,
        mu_plus: vec![0.0; t],
        mu_minus: vec![0.0; t],
        mu_zero: vec![0.0; t],
        nu_plus: vec![0.0; t],
        nu_minus: vec![0.0; t],
        nu_zero: vec![0.0; t],
    };
    for i in 0..t {
        let cap_up = if theta.delta_plus[i] { attrs.env_sf_plus[i] } else { 0.0 };
        let r_up = prices.p_sf_plus[i] - prices.p[i] + kappa - 2.0 * costs.c_sf_plus[i] * theta.d_sf_plus[i];
        assign_pair(
            theta.d_sf_plus[i],
            cap_up,
            r_up,
            &mut cert.mu_plus[i],
            &mut cert.nu_plus[i],
        );
        let cap_dn = if theta.delta_minus[i] { attrs.env_sf_minus[i] } else { 0.0 };
        let r_dn = prices.p_sf_minus[i] + prices.p[i] - kappa - 2.0 * costs.c_sf_minus[i] * theta.d_sf_minus[i];
        assign_pair(
            theta.d_sf_minus[i],
            cap_dn,
            r_dn,
            &mut cert.mu_minus[i],
            &mut cert.nu_minus[i],
        );
        let r_sd = prices.p_sd[i] + prices.p[i] - 2.0 * costs.c_sd[i] * theta.d_sd_minus[i];
        assign_pair(
            theta.d_sd_minus[i],
            attrs.env_sd[i],
            r_sd,
            &mut cert.mu_zero[i],
            &mut cert.nu_zero[i],
        );
    }
    cert
}

/// Splits the stationarity residual `r = mu - nu` between the upper-bound and
/// nonnegativity duals according to which constraint is active.
fn assign_pair(d: f64, cap: f64, r: f64, mu: &mut f64, nu: &mut f64) {
    let at_lower = d <= ACTIVITY_TOL;
    let at_upper = d >= cap - ACTIVITY_TOL.max(1e-11 * (1.0 + cap));
    if at_lower && at_upper {
        // Degenerate interval (cap ~ 0): both constraints tight.
        *mu = r.max(0.0);
        *nu = (-r).max(0.0);
    } else if at_upper {
        *mu = r.max(0.0);
        *nu = 0.0;
    } else if at_lower {
        *mu = 0.0;
        *nu = (-r).max(0.0);
    } else {
        *mu = 0.0;
        *nu = 0.0;
    }
}

/// Max-norm of all stationarity, complementarity, dual-sign, and primal
/// feasibility residuals. Zero at a true KKT point.
pub fn kkt_residual(
    solution: &FopSolution,
    prices: &PriceSignal,
    costs: &ComfortCosts,
    attrs: &DemandAttributes,
) -> f64 {
    let theta = &solution.theta;
    let cert = &solution.certificate;
    let t = theta.len();
    let mut worst: f64 = 0.0;
    let mut chk = |v: f64| worst = worst.max(v.abs());
    for i in 0..t {
        let cap_up = if theta.delta_plus[i] { attrs.env_sf_plus[i] } else { 0.0 };
        let cap_dn = if theta.delta_minus[i] { attrs.env_sf_minus[i] } else { 0.0 };
        // Stationarity rows.
        chk(
            -2.0 * costs.c_sf_plus[i] * theta.d_sf_plus[i] + prices.p_sf_plus[i] - prices.p[i]
                + cert.kappa
                - cert.mu_plus[i]
                + cert.nu_plus[i],
        );
        chk(
            -2.0 * costs.c_sf_minus[i] * theta.d_sf_minus[i] + prices.p_sf_minus[i] + prices.p[i]
                - cert.kappa
                - cert.mu_minus[i]
                + cert.nu_minus[i],
        );
        chk(
            -2.0 * costs.c_sd[i] * theta.d_sd_minus[i] + prices.p_sd[i] + prices.p[i]
                - cert.mu_zero[i]
                + cert.nu_zero[i],
        );
        // Complementarity.
        chk(cert.mu_plus[i] * (cap_up - theta.d_sf_plus[i]));
        chk(cert.mu_minus[i] * (cap_dn - theta.d_sf_minus[i]));
        chk(cert.mu_zero[i] * (attrs.env_sd[i] - theta.d_sd_minus[i]));
        chk(cert.nu_plus[i] * theta.d_sf_plus[i]);
        chk(cert.nu_minus[i] * theta.d_sf_minus[i]);
        chk(cert.nu_zero[i] * theta.d_sd_minus[i]);
        // Dual feasibility.
        for v in [
            cert.mu_plus[i],
            cert.mu_minus[i],
            cert.mu_zero[i],
            cert.nu_plus[i],
            cert.nu_minus[i],
            cert.nu_zero[i],
        ] {
            chk(v.min(0.0));
        }
        // Primal feasibility.
        chk(theta.d_sf_plus[i].min(0.0));
        chk(theta.d_sf_minus[i].min(0.0));
        chk(theta.d_sd_minus[i].min(0.0));
        chk((theta.d_sf_plus[i] - cap_up).max(0.0));
        chk((theta.d_sf_minus[i] - cap_dn).max(0.0));
        chk((theta.d_sd_minus[i] - attrs.env_sd[i]).max(0.0));
    }
    let up: f64 = theta.d_sf_plus.iter().sum();
    let dn: f64 = theta.d_sf_minus.iter().sum();
    chk(up - dn);
    // Defining identities of the solution record.
    for i in 0..t {
        chk(solution.d_sf[i] - (theta.d_sf_plus[i] - theta.d_sf_minus[i]));
        chk(solution.d_sd[i] - (attrs.env_sd[i] - theta.d_sd_minus[i]));
    }
    worst
}
