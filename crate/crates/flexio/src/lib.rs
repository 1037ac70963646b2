//! Behind-the-meter load decomposition and net-demand forecasting.
//!
//! Given only metered net demand, tariff signals, and exogenous features,
//! this crate estimates the unobservable demand components (baseload,
//! shiftable, sheddable and their flexibility envelopes) by inverse
//! optimization, and produces point and probabilistic net-demand forecasts.

pub mod data;
pub mod error;
pub mod fit;
pub mod fop;
pub mod forecast;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod par;
pub mod qp;

pub use error::{Error, Result};
pub use model::{
    ComfortCosts, DaySample, DemandAttributes, FlexBounds, FlexDecision, Horizon, Hyperparams,
    PriceSignal,
};
