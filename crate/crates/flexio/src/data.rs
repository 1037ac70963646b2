//! Dataset ingestion, the seeded synthetic generator used as the project's
//! verification oracle, envelope-bound construction, and versioned
//! serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fop::solve_fop;
use crate::model::{
    build_comfort_costs, build_tou_prices, ComfortCosts, DaySample, DemandAttributes,
    FlexBounds, FlexDecision, PriceSignal, ShedCostRule,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayMeta {
    pub date: String,
    pub weekday: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub days: Vec<DaySample>,
    pub feature_names: Vec<String>,
    pub calendar: Vec<DayMeta>,
}

impl Dataset {
    pub fn hours(&self) -> usize {
        self.days.first().map_or(0, |d| d.demand_hat.len())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.hours();
        let f = self.feature_names.len();
        if self.calendar.len() != self.days.len() {
            return Err(Error::dim("calendar metadata must cover every day"));
        }
        let mut prev = None;
        for day in &self.days {
            day.validate()?;
            if day.demand_hat.len() != t {
                return Err(Error::dim("days must share one horizon length"));
            }
            if day.features.first().map_or(0, Vec::len) != f {
                return Err(Error::dim("feature columns must match feature_names"));
            }
            if let Some(p) = prev {
                if day.day_index <= p {
                    return Err(Error::invalid("day_index must be strictly increasing"));
                }
            }
            prev = Some(day.day_index);
        }
        Ok(())
    }
}

/// Per-day envelope caps set to the absolute observed net demand.
pub fn default_bounds(dataset: &Dataset) -> Vec<FlexBounds> {
    dataset
        .days
        .iter()
        .map(|day| {
            let k: Vec<f64> = day.demand_hat.iter().map(|d| d.abs()).collect();
            FlexBounds { k_sf_plus: k.clone(), k_sf_minus: k.clone(), k_sd: k }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Column-name based CSV schema. The temperature transform, when configured,
/// replaces the named column with Tdiff = (T - T_app) / (ln T - ln T_app)
/// scaled to [-0.5, 0.5] over the loaded data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub date_col: String,
    pub hour_col: String,
    pub net_col: String,
    pub gen_col: Option<String>,
    pub feature_cols: Vec<String>,
    #[serde(default)]
    pub weekdays_only: bool,
    #[serde(default)]
    pub tdiff: Option<TdiffConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdiffConfig {
    pub column: String,
    pub t_app: f64,
}

/// Sakamoto's day-of-week algorithm; Monday..Friday count as weekdays.
fn is_weekday(date: &str) -> Result<bool> {
    let parts: Vec<&str> = date.split('-').collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!("date '{date}' is not YYYY-MM-DD")));
    }
    let mut y: i64 = parts[0].parse().map_err(|_| Error::invalid(format!("bad year in '{date}'")))?;
    let m: i64 = parts[1].parse().map_err(|_| Error::invalid(format!("bad month in '{date}'")))?;
    let d: i64 = parts[2].parse().map_err(|_| Error::invalid(format!("bad day in '{date}'")))?;
    const TBL: [i64; 12] = [0, 3, 2, 5, 0, 3, 5, 1, 4, 6, 2, 4];
    if !(1..=12).contains(&m) {
        return Err(Error::invalid(format!("bad month in '{date}'")));
    }
    if m < 3 {
        y -= 1;
    }
    let dow = (y + y / 4 - y / 100 + y / 400 + TBL[(m - 1) as usize] + d) % 7; // 0 = Sunday
    Ok((1..=5).contains(&dow))
}

fn tdiff(temp: f64, t_app: f64) -> f64 {
    if temp <= 0.0 || t_app <= 0.0 || (temp.ln() - t_app.ln()).abs() < 1e-12 {
        // Degenerate input: the transform's limit at T -> T_app is T_app.
        return t_app;
    }
    (temp - t_app) / (temp.ln() - t_app.ln())
}

pub fn load_csv(path: &Path, schema: &SchemaConfig) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Csv { location: path.display().to_string(), message: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv { location: "header".into(), message: e.to_string() })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Csv {
            location: "header".into(),
            message: format!("missing column '{name}'"),
        })
    };
    let date_i = col(&schema.date_col)?;
    let hour_i = col(&schema.hour_col)?;
    let net_i = col(&schema.net_col)?;
    let gen_i = schema.gen_col.as_deref().map(col).transpose()?;
    let feat_is: Vec<usize> = schema.feature_cols.iter().map(|c| col(c)).collect::<Result<_>>()?;

    struct RawDay {
        date: String,
        rows: Vec<Option<(f64, f64, Vec<f64>)>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_date: std::collections::HashMap<String, RawDay> = std::collections::HashMap::new();

    for (ri, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv { location: format!("row {}", ri + 2), message: e.to_string() })?;
        let loc = |cname: &str| format!("row {}, column {cname}", ri + 2);
        let parse = |i: usize, cname: &str| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Csv { location: loc(cname), message: "missing cell".into() })?
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Csv { location: loc(cname), message: "nonnumeric cell".into() })
        };
        let date = rec
            .get(date_i)
            .ok_or_else(|| Error::Csv { location: loc(&schema.date_col), message: "missing cell".into() })?
            .trim()
            .to_string();
        let hour = parse(hour_i, &schema.hour_col)? as usize;
        let net = parse(net_i, &schema.net_col)?;
        let gen = match gen_i {
            Some(i) => parse(i, schema.gen_col.as_deref().unwrap())?,
            None => 0.0,
        };
        let feats: Vec<f64> = feat_is
            .iter()
            .zip(&schema.feature_cols)
            .map(|(&i, c)| parse(i, c))
            .collect::<Result<_>>()?;

        let day = by_date.entry(date.clone()).or_insert_with(|| {
            order.push(date.clone());
            RawDay { date, rows: Vec::new() }
        });
        if day.rows.len() <= hour {
            day.rows.resize(hour + 1, None);
        }
        if day.rows[hour].is_some() {
            return Err(Error::Csv {
                location: format!("row {}", ri + 2),
                message: format!("duplicate hour {hour} for day {}", day.date),
            });
        }
        day.rows[hour] = Some((net, gen, feats));
    }

    if order.is_empty() {
        return Err(Error::Csv { location: path.display().to_string(), message: "no data rows".into() });
    }
    let t = by_date[&order[0]].rows.len();

    let mut days = Vec::new();
    let mut calendar = Vec::new();
    for (idx, date) in order.iter().enumerate() {
        let raw = &by_date[date];
        if raw.rows.len() != t {
            return Err(Error::Csv {
                location: format!("day {date}"),
                message: format!("expected {t} hours, found {}", raw.rows.len()),
            });
        }
        let mut demand = Vec::with_capacity(t);
        let mut gen = Vec::with_capacity(t);
        let mut feats = Vec::with_capacity(t);
        for (h, cell) in raw.rows.iter().enumerate() {
            let (net, g, f) = cell.as_ref().ok_or_else(|| Error::Csv {
                location: format!("day {date}, hour {h}"),
                message: "missing observation".into(),
            })?;
            demand.push(*net);
            gen.push(*g);
            feats.push(f.clone());
        }
        let weekday = is_weekday(date)?;
        if schema.weekdays_only && !weekday {
            continue;
        }
        days.push(DaySample { demand_hat: demand, gen_hat: gen, features: feats, day_index: idx });
        calendar.push(DayMeta { date: date.clone(), weekday });
    }
    if days.is_empty() {
        return Err(Error::Csv { location: path.display().to_string(), message: "no days left after filtering".into() });
    }

    let mut dataset = Dataset { days, feature_names: schema.feature_cols.clone(), calendar };

    if let Some(td) = &schema.tdiff {
        let fi = dataset
            .feature_names
            .iter()
            .position(|n| n == &td.column)
            .ok_or_else(|| Error::invalid(format!("tdiff column '{}' not among features", td.column)))?;
        let mut vals = Vec::new();
        for day in &mut dataset.days {
            for row in &mut day.features {
                row[fi] = tdiff(row[fi], td.t_app);
                vals.push(row[fi]);
            }
        }
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
        for day in &mut dataset.days {
            for row in &mut day.features {
                row[fi] = (row[fi] - lo) / span - 0.5;
            }
        }
    }

    dataset.validate()?;
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Synthetic generator (verification oracle)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrueEnvelopeRule {
    /// The same envelope triple every day and hour.
    Constant { plus: f64, minus: f64, shed: f64 },
    /// Feature-driven smooth rule: base + amp * sin(2 pi hour / T + phase),
    /// clipped at zero; mimics a kernel rule without fixing bandwidths.
    Seasonal { base: f64, amp: f64 },
    /// Shift envelopes follow the day-level temperature feature:
    /// base + slope * temp_day, clipped at zero; shed stays constant. This
    /// makes flexibility genuinely predictable from exogenous features.
    TempDriven { base: f64, slope: f64, shed: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub t: usize,
    pub s: usize,
    pub d_bl: Vec<f64>,
    pub rule: TrueEnvelopeRule,
    pub flat_price: f64,
    /// TOU price per hour (length T).
    pub tou: Vec<f64>,
    pub shed_rule: ShedCostRule,
    pub t_max: usize,
    pub noise_sigma: f64,
    /// Self-generation profile, empty meaning none.
    pub generation: Vec<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.s == 0 {
            return Err(Error::invalid("need at least one day and one hour"));
        }
        if self.d_bl.len() != self.t || self.tou.len() != self.t {
            return Err(Error::dim("profile lengths must equal T"));
        }
        if !self.generation.is_empty() && self.generation.len() != self.t {
            return Err(Error::dim("generation profile length must equal T"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be nonnegative"));
        }
        if self.t_max > self.t {
            return Err(Error::invalid("t_max exceeds the horizon"));
        }
        Ok(())
    }

    pub fn prices(&self) -> Result<PriceSignal> {
        build_tou_prices(self.flat_price, &self.tou)
    }

    pub fn costs(&self) -> Result<ComfortCosts> {
        let prices = self.prices()?;
        build_comfort_costs(&prices, self.flat_price, &self.tou, self.shed_rule)
    }

    fn true_envelopes(&self, t: usize, day_level: f64) -> (f64, f64, f64) {
        match self.rule {
            TrueEnvelopeRule::Constant { plus, minus, shed } => (plus, minus, shed),
            TrueEnvelopeRule::Seasonal { base, amp } => {
                let w = (2.0 * std::f64::consts::PI * t as f64 / self.t as f64).sin();
                let v = (base + amp * w).max(0.0);
                (v, v, v)
            }
            TrueEnvelopeRule::TempDriven { base, slope, shed } => {
                let v = (base + slope * day_level).max(0.0);
                (v, v, shed)
            }
        }
    }
}

/// Simulates S days of a rational consumer with known parameters. Returns the
/// observed dataset plus the ground-truth attributes and decisions.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(Dataset, Vec<DemandAttributes>, Vec<FlexDecision>)> {
    spec.validate()?;
    let prices = spec.prices()?;
    let costs = spec.costs()?;
    let t = spec.t;
    let gen_profile = if spec.generation.is_empty() { vec![0.0; t] } else { spec.generation.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-300))
        .map_err(|e| Error::invalid(format!("bad noise model: {e}")))?;

    let mut days = Vec::with_capacity(spec.s);
    let mut calendar = Vec::with_capacity(spec.s);
    let mut truths = Vec::with_capacity(spec.s);
    let mut decisions = Vec::with_capacity(spec.s);

    for s in 0..spec.s {
        // Exogenous features: hour phase plus a temperature-like series with
        // day-level drift; these drive nothing in the simulation itself but
        // give the kernel rule realistic inputs.
        let day_shift: f64 = rng.gen_range(-1.0..1.0);
        let features: Vec<Vec<f64>> = (0..t)
            .map(|h| {
                let phase = 2.0 * std::f64::consts::PI * h as f64 / t as f64;
                vec![phase.sin(), phase.cos(), day_shift + 0.1 * rng.gen_range(-1.0..1.0)]
            })
            .collect();

        let mut attrs = DemandAttributes {
            d_bl: spec.d_bl.clone(),
            env_sf_plus: vec![0.0; t],
            env_sf_minus: vec![0.0; t],
            env_sd: vec![0.0; t],
        };
        for h in 0..t {
            let (p, m, sd) = spec.true_envelopes(h, day_shift);
            attrs.env_sf_plus[h] = p;
            attrs.env_sf_minus[h] = m;
            attrs.env_sd[h] = sd;
        }

        let sol = solve_fop(&prices, &costs, &attrs, spec.t_max, &gen_profile)?;
        let demand: Vec<f64> = (0..t)
            .map(|h| {
                let base = attrs.d_bl[h] + sol.d_sf[h] + sol.d_sd[h] - gen_profile[h];
                if spec.noise_sigma > 0.0 { base + noise.sample(&mut rng) } else { base }
            })
            .collect();

        days.push(DaySample { demand_hat: demand, gen_hat: gen_profile.clone(), features, day_index: s });
        calendar.push(DayMeta { date: format!("synthetic-{s:03}"), weekday: true });
        truths.push(attrs);
        decisions.push(sol.theta);
    }

    let dataset = Dataset {
        days,
        feature_names: vec!["hour_sin".into(), "hour_cos".into(), "temp_like".into()],
        calendar,
    };
    Ok((dataset, truths, decisions))
}

// ---------------------------------------------------------------------------
// Versioned serialization
// ---------------------------------------------------------------------------

const MAGIC: &str = "flexio-artifact";
const FORMAT_VERSION: &str = "1.0.0";

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    magic: String,
    version: String,
    payload: T,
}

/// Writes any serializable artifact as versioned JSON.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let env = Envelope { magic: MAGIC.to_string(), version: FORMAT_VERSION.to_string(), payload: value };
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &env)?;
    w.flush()?;
    Ok(())
}

/// Reads an artifact written by `save_json`, checking magic and major version.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let mut s = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut s)?;
    let env: Envelope<T> = serde_json::from_str(&s)?;
    if env.magic != MAGIC {
        return Err(Error::invalid(format!("not a recognized artifact: bad magic in {}", path.display())));
    }
    let major = env.version.split('.').next().unwrap_or("");
    if major != FORMAT_VERSION.split('.').next().unwrap() {
        return Err(Error::invalid(format!("unsupported artifact version {}", env.version)));
    }
    Ok(env.payload)
}
