//! Batch command-line front end: simulate, fit, forecast, evaluate,
//! gridsearch. Every command reads one TOML run configuration and writes its
//! artifacts under the output directory; all outputs are deterministic for a
//! fixed config and seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use flexio::data::{
    default_bounds, generate_synthetic, load_csv, load_json, save_json, Dataset, SchemaConfig,
    SyntheticSpec,
};
use flexio::error::{Error, Result};
use flexio::fit::{fit, FitConfig, FitResult, SolverMode};
use flexio::forecast::{forecasts_to_csv, point_forecast, quantile_forecast, Forecast};
use flexio::kernel::FeatureScaling;
use flexio::metrics::{mae, seasonal_naive, standard_levels, EvalReport};
use flexio::model::{
    build_comfort_costs, build_tou_prices, compute_weights, ComfortCosts, FlexBounds, Hyperparams,
    PriceSignal, ShedCostRule,
};
use flexio::par::{init_thread_cap, map_indexed, Parallelism};

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "flexio", about = "Behind-the-meter flexibility estimation and forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the solver mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Output directory (default: config `out`, else `./out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Emit the probabilistic (quantile) forecast as well.
    #[arg(long, global = true)]
    quantiles: bool,
    /// Also evaluate a reference baseline.
    #[arg(long, global = true, value_enum)]
    baseline: Option<BaselineArg>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from the `[synthetic]` config section.
    Simulate,
    /// Fit the model on the training window and save the fit artifact.
    Fit,
    /// Forward-solve the fitted model over the holdout window.
    Forecast,
    /// Score a forecast CSV against observed net demand.
    Evaluate,
    /// Grid search hyperparameters on a validation split, then refit.
    Gridsearch,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Alternating,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    SeasonalNaive,
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    out: Option<PathBuf>,
    seed: Option<u64>,
    data: Option<DataSection>,
    synthetic: Option<SyntheticSpec>,
    tariff: Option<TariffSection>,
    fit: FitSection,
    forecast: ForecastSection,
    evaluate: EvaluateSection,
    grid: GridSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    csv: PathBuf,
    #[serde(default = "default_schema")]
    schema: SchemaConfig,
}

/// Matches the CSV layout written by `simulate`.
fn default_schema() -> SchemaConfig {
    SchemaConfig {
        date_col: "date".into(),
        hour_col: "hour".into(),
        net_col: "net_demand_kwh".into(),
        gen_col: Some("generation_kwh".into()),
        feature_cols: vec!["hour_sin".into(), "hour_cos".into(), "temp_like".into()],
        weekdays_only: false,
        tdiff: None,
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TariffSection {
    flat_price: f64,
    tou: Vec<f64>,
    #[serde(default = "default_shed_rule")]
    shed_rule: ShedCostRule,
}

fn default_shed_rule() -> ShedCostRule {
    ShedCostRule::MeanOfShiftCosts
}

/// Optional overlays on `FitConfig::default()`.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct FitSection {
    mode: Option<String>,
    t_max: Option<usize>,
    alpha: Option<f64>,
    gamma_sf_plus: Option<f64>,
    gamma_sf_minus: Option<f64>,
    gamma_sd: Option<f64>,
    max_iters: Option<usize>,
    tol_obj: Option<f64>,
    tol_kkt: Option<f64>,
    max_nodes: Option<usize>,
    scaling: Option<FeatureScaling>,
    parallelism: Option<Parallelism>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ForecastSection {
    /// Days held out at the end of the dataset for forecasting/evaluation.
    horizon_days: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection { horizon_days: 5 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvaluateSection {
    /// Training days entering the seasonal-naive per-hour average.
    lookback_days: usize,
    /// Forecast CSV to score (default `<out>/forecast.csv`).
    forecast_csv: Option<PathBuf>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { lookback_days: 7, forecast_csv: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GridSection {
    t_max: Vec<usize>,
    alpha: Vec<f64>,
    /// Shared bandwidth candidates applied to all three envelope families
    /// unless the per-family lists below override them.
    gamma: Vec<f64>,
    gamma_sf_plus: Option<Vec<f64>>,
    gamma_sf_minus: Option<Vec<f64>>,
    gamma_sd: Option<Vec<f64>>,
    /// Validation split: last `holdout_days` of the training window.
    holdout_days: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            t_max: vec![4, 8, 12, 24],
            alpha: vec![0.0, 1.0, 2.0],
            gamma: vec![0.1, 1.0, 10.0],
            gamma_sf_plus: None,
            gamma_sf_minus: None,
            gamma_sd: None,
            holdout_days: 7,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::invalid(format!("config error: {e}")))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(mode) = cli.mode {
        cfg.fit.mode = Some(
            match mode {
                ModeArg::Exact => "exact",
                ModeArg::Alternating => "alternating",
            }
            .into(),
        );
    }
    Ok(cfg)
}

/// Collects every configuration problem instead of stopping at the first.
fn validate_config(cfg: &RunConfig, cmd: &Cmd) -> Vec<String> {
    let mut errs = Vec::new();
    if matches!(cmd, Cmd::Simulate) {
        match &cfg.synthetic {
            None => errs.push("simulate requires a [synthetic] section".into()),
            Some(spec) => {
                if let Err(e) = spec.validate() {
                    errs.push(format!("[synthetic]: {e}"));
                }
            }
        }
    }
    if let Some(mode) = &cfg.fit.mode {
        if mode != "exact" && mode != "alternating" {
            errs.push(format!("[fit].mode must be 'exact' or 'alternating', got '{mode}'"));
        }
    }
    if cfg.tariff.is_none() && cfg.synthetic.is_none() && !matches!(cmd, Cmd::Evaluate) {
        errs.push("need a [tariff] section (or a [synthetic] one to derive it from)".into());
    }
    if matches!(cmd, Cmd::Gridsearch) {
        let g = &cfg.grid;
        if g.t_max.is_empty() || g.alpha.is_empty() || g.gamma.is_empty() {
            errs.push("[grid] lists must be nonempty".into());
        }
        if g.holdout_days == 0 {
            errs.push("[grid].holdout_days must be positive".into());
        }
    }
    errs
}

fn build_fit_config(cfg: &RunConfig) -> Result<FitConfig> {
    let mut fc = FitConfig::default();
    let sec = &cfg.fit;
    if let Some(mode) = &sec.mode {
        fc.solver_mode = match mode.as_str() {
            "exact" => SolverMode::ExactBnb,
            "alternating" => SolverMode::Alternating,
            other => return Err(Error::invalid(format!("unknown solver mode '{other}'"))),
        };
    }
    let hp = Hyperparams {
        t_max: sec.t_max.unwrap_or(fc.hyper.t_max),
        alpha: sec.alpha.unwrap_or(fc.hyper.alpha),
        gamma_sf_plus: sec.gamma_sf_plus.unwrap_or(fc.hyper.gamma_sf_plus),
        gamma_sf_minus: sec.gamma_sf_minus.unwrap_or(fc.hyper.gamma_sf_minus),
        gamma_sd: sec.gamma_sd.unwrap_or(fc.hyper.gamma_sd),
        p_norm: 2,
    };
    fc.hyper = hp;
    fc.max_iters = sec.max_iters.unwrap_or(fc.max_iters);
    fc.tol_obj = sec.tol_obj.unwrap_or(fc.tol_obj);
    fc.tol_kkt = sec.tol_kkt.unwrap_or(fc.tol_kkt);
    fc.max_nodes = sec.max_nodes.unwrap_or(fc.max_nodes);
    fc.scaling = sec.scaling.unwrap_or(fc.scaling);
    fc.parallelism = sec.parallelism.unwrap_or(fc.parallelism);
    fc.seed = cfg.seed.unwrap_or(fc.seed);
    Ok(fc)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn tariff_of(cfg: &RunConfig, hours: usize) -> Result<(PriceSignal, ComfortCosts)> {
    let (flat, tou, rule) = match (&cfg.tariff, &cfg.synthetic) {
        (Some(t), _) => (t.flat_price, t.tou.clone(), t.shed_rule),
        (None, Some(s)) => (s.flat_price, s.tou.clone(), s.shed_rule),
        (None, None) => return Err(Error::invalid("no tariff available")),
    };
    if tou.len() != hours {
        return Err(Error::dim(format!(
            "tariff covers {} hours but the data has {hours}",
            tou.len()
        )));
    }
    let prices = build_tou_prices(flat, &tou)?;
    let costs = build_comfort_costs(&prices, flat, &tou, rule)?;
    Ok((prices, costs))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(d) => load_csv(&d.csv, &d.schema),
        None => {
            let path = out_dir(cfg).join("dataset.csv");
            load_csv(&path, &default_schema())
        }
    }
}

/// Splits off the trailing forecast window: (training days, holdout days).
fn split_holdout(ds: &Dataset, horizon: usize) -> Result<(usize, usize)> {
    let s = ds.days.len();
    if horizon >= s {
        return Err(Error::invalid(format!(
            "horizon of {horizon} days leaves no training data (dataset has {s} days)"
        )));
    }
    Ok((s - horizon, horizon))
}

/// Forecast-day envelope caps: per-hour maximum of |net| over training days.
fn forecast_caps(ds: &Dataset, train_len: usize) -> FlexBounds {
    let t = ds.hours();
    let k: Vec<f64> = (0..t)
        .map(|h| {
            ds.days[..train_len]
                .iter()
                .map(|d| d.demand_hat[h].abs())
                .fold(0.0, f64::max)
        })
        .collect();
    FlexBounds { k_sf_plus: k.clone(), k_sf_minus: k.clone(), k_sd: k }
}

// ---------------------------------------------------------------------------
// Gregorian helpers for synthetic calendars (civil-from-days)
// ---------------------------------------------------------------------------

fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

/// Date string for synthetic day `s`, counted from 2024-01-01.
fn synthetic_date(s: usize) -> String {
    // 2024-01-01 is day 19723 of the civil epoch.
    let (y, m, d) = civil_from_days(19_723 + s as i64);
    format!("{y:04}-{m:02}-{d:02}")
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Ground-truth sidecar written next to the synthetic dataset.
#[derive(Serialize, Deserialize)]
struct TruthArtifact {
    spec: SyntheticSpec,
    attributes: Vec<flexio::model::DemandAttributes>,
    decisions: Vec<flexio::model::FlexDecision>,
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let mut spec = cfg.synthetic.clone().expect("validated");
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    let (ds, attributes, decisions) = generate_synthetic(&spec)?;
    let out = out_dir(cfg);
    std::fs::create_dir_all(&out)?;

    let mut csv = String::from("date,hour,net_demand_kwh,generation_kwh");
    for name in &ds.feature_names {
        let _ = write!(csv, ",{name}");
    }
    csv.push('\n');
    for (s, day) in ds.days.iter().enumerate() {
        let date = synthetic_date(s);
        for h in 0..spec.t {
            let _ = write!(csv, "{date},{h},{},{}", day.demand_hat[h], day.gen_hat[h]);
            for f in &day.features[h] {
                let _ = write!(csv, ",{f}");
            }
            csv.push('\n');
        }
    }
    std::fs::write(out.join("dataset.csv"), csv)?;
    save_json(&TruthArtifact { spec: spec.clone(), attributes, decisions }, &out.join("truth.json"))?;
    println!(
        "simulated {} days x {} hours -> {}",
        spec.s,
        spec.t,
        out.join("dataset.csv").display()
    );
    Ok(())
}

fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (train_len, _) = split_holdout(&ds, cfg.forecast.horizon_days)?;
    let train = &ds.days[..train_len];
    let (prices, costs) = tariff_of(cfg, ds.hours())?;
    let prices = vec![prices; train_len];
    let costs = vec![costs; train_len];
    let bounds = default_bounds(&ds)[..train_len].to_vec();
    let fc = build_fit_config(cfg)?;

    let result = fit(train, &bounds, &prices, &costs, &fc)?;
    let out = out_dir(cfg);
    std::fs::create_dir_all(&out)?;
    save_json(&result, &out.join("fit.json"))?;
    println!(
        "fit: loss {:.6e}, kkt {:.3e}, {} iterations, converged {}",
        result.training_loss, result.kkt_max_residual, result.iterations, result.converged
    );
    Ok(())
}

fn forecast_window(
    cfg: &RunConfig,
    ds: &Dataset,
    result: &FitResult,
    with_quantiles: bool,
) -> Result<Vec<Forecast>> {
    let (train_len, horizon) = split_holdout(ds, cfg.forecast.horizon_days)?;
    let (prices, costs) = tariff_of(cfg, ds.hours())?;
    let caps = forecast_caps(ds, train_len);
    let t_max = build_fit_config(cfg)?.hyper.t_max.min(ds.hours());

    let mut residuals: Vec<Vec<f64>> = Vec::new();
    if with_quantiles {
        for day in &ds.days[..train_len] {
            let p = point_forecast(result, &prices, &costs, &day.gen_hat, &day.features, &caps, t_max)?;
            residuals.push(
                day.demand_hat.iter().zip(&p.net).map(|(obs, f)| obs - f).collect(),
            );
        }
    }

    let levels = standard_levels();
    let mut forecasts = Vec::with_capacity(horizon);
    for day in &ds.days[train_len..] {
        let mut f =
            point_forecast(result, &prices, &costs, &day.gen_hat, &day.features, &caps, t_max)?;
        if with_quantiles {
            f = quantile_forecast(&f, &residuals, &levels)?;
        }
        forecasts.push(f);
    }
    Ok(forecasts)
}

fn cmd_forecast(cfg: &RunConfig, with_quantiles: bool) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let out = out_dir(cfg);
    let result: FitResult = load_json(&out.join("fit.json"))?;
    let forecasts = forecast_window(cfg, &ds, &result, with_quantiles)?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("forecast.csv"), forecasts_to_csv(&forecasts))?;
    println!(
        "forecast: {} days x {} hours -> {}",
        forecasts.len(),
        ds.hours(),
        out.join("forecast.csv").display()
    );
    Ok(())
}

/// Reads back a forecast CSV written by `forecasts_to_csv`.
fn read_forecast_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Csv { location: path.display().to_string(), message: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv { location: "header".into(), message: e.to_string() })?
        .clone();
    let net_i = headers.iter().position(|h| h == "net").ok_or_else(|| Error::Csv {
        location: "header".into(),
        message: "missing column 'net'".into(),
    })?;
    let q_cols: Vec<(usize, f64)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix("q_").and_then(|s| s.parse::<f64>().ok()).map(|q| (i, q / 100.0))
        })
        .collect();
    let mut net = Vec::new();
    let mut levels: Vec<f64> = q_cols.iter().map(|&(_, q)| q).collect();
    let mut quantiles: Vec<Vec<f64>> = vec![Vec::new(); q_cols.len()];
    for (ri, rec) in reader.records().enumerate() {
        let rec = rec
            .map_err(|e| Error::Csv { location: format!("row {}", ri + 2), message: e.to_string() })?;
        let cell = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Csv {
                    location: format!("row {}", ri + 2),
                    message: "missing cell".into(),
                })?
                .parse::<f64>()
                .map_err(|_| Error::Csv {
                    location: format!("row {}", ri + 2),
                    message: "nonnumeric cell".into(),
                })
        };
        net.push(cell(net_i)?);
        for (k, &(i, _)) in q_cols.iter().enumerate() {
            quantiles[k].push(cell(i)?);
        }
    }
    if net.is_empty() {
        return Err(Error::Csv { location: path.display().to_string(), message: "no rows".into() });
    }
    // The standard set has 0.05 steps, so percent headers are exact.
    levels.dedup();
    Ok((net, levels, quantiles))
}

fn cmd_evaluate(cfg: &RunConfig, baseline: Option<BaselineArg>) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (train_len, horizon) = split_holdout(&ds, cfg.forecast.horizon_days)?;
    let out = out_dir(cfg);
    let fpath = cfg.evaluate.forecast_csv.clone().unwrap_or_else(|| out.join("forecast.csv"));
    let (net, levels, quantiles) = read_forecast_csv(&fpath)?;

    let truth: Vec<f64> =
        ds.days[train_len..].iter().flat_map(|d| d.demand_hat.iter().copied()).collect();
    if truth.len() != net.len() {
        return Err(Error::dim(format!(
            "forecast has {} rows but the holdout window has {} observations",
            net.len(),
            truth.len()
        )));
    }
    let quant = if levels.is_empty() { None } else { Some((levels.as_slice(), quantiles.as_slice())) };
    let report = EvalReport::build(&truth, &net, ds.hours(), quant)?;

    let mut text = report.pretty();
    if let Some(BaselineArg::SeasonalNaive) = baseline {
        let history: Vec<Vec<f64>> =
            ds.days[..train_len].iter().map(|d| d.demand_hat.clone()).collect();
        let profile = seasonal_naive(&history, cfg.evaluate.lookback_days.min(train_len))?;
        let naive: Vec<f64> = (0..horizon).flat_map(|_| profile.iter().copied()).collect();
        let naive_mae = mae(&truth, &naive)?;
        let _ = write!(text, "seasonal-naive mae: {naive_mae:.6}\n");
    }
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GridPoint {
    t_max: usize,
    alpha: f64,
    gamma_sf_plus: f64,
    gamma_sf_minus: f64,
    gamma_sd: f64,
}

fn grid_points(g: &GridSection, hours: usize) -> Vec<GridPoint> {
    let gp = g.gamma_sf_plus.clone().unwrap_or_else(|| g.gamma.clone());
    let gm = g.gamma_sf_minus.clone().unwrap_or_else(|| g.gamma.clone());
    let gs = g.gamma_sd.clone().unwrap_or_else(|| g.gamma.clone());
    let tied = g.gamma_sf_plus.is_none() && g.gamma_sf_minus.is_none() && g.gamma_sd.is_none();
    let mut points = Vec::new();
    for &t_max in &g.t_max {
        if t_max > hours {
            continue;
        }
        for &alpha in &g.alpha {
            if tied {
                // Default: one shared bandwidth for all three families.
                for &gamma in &g.gamma {
                    points.push(GridPoint {
                        t_max,
                        alpha,
                        gamma_sf_plus: gamma,
                        gamma_sf_minus: gamma,
                        gamma_sd: gamma,
                    });
                }
            } else {
                for &a in &gp {
                    for &b in &gm {
                        for &c in &gs {
                            points.push(GridPoint {
                                t_max,
                                alpha,
                                gamma_sf_plus: a,
                                gamma_sf_minus: b,
                                gamma_sd: c,
                            });
                        }
                    }
                }
            }
        }
    }
    points
}

fn cmd_gridsearch(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (train_len, _) = split_holdout(&ds, cfg.forecast.horizon_days)?;
    let holdout = cfg.grid.holdout_days.min(train_len.saturating_sub(1)).max(1);
    if train_len < 2 {
        return Err(Error::invalid("grid search needs at least 2 training days"));
    }
    let inner_len = train_len - holdout;
    let (prices1, costs1) = tariff_of(cfg, ds.hours())?;
    let base_fc = build_fit_config(cfg)?;
    let points = grid_points(&cfg.grid, ds.hours());
    if points.is_empty() {
        return Err(Error::invalid("grid is empty (every t_max exceeds the horizon?)"));
    }

    let all_bounds = default_bounds(&ds);
    // Fan out independent jobs; `map_indexed` preserves grid order, so the
    // merge is deterministic regardless of scheduling.
    let scores: Vec<Result<f64>> = map_indexed(base_fc.parallelism, &points, |_, p| {
        let mut fc = base_fc.clone();
        fc.parallelism = Parallelism::Sequential; // jobs are the parallel unit
        fc.hyper = Hyperparams {
            t_max: p.t_max.min(ds.hours()),
            alpha: p.alpha,
            gamma_sf_plus: p.gamma_sf_plus,
            gamma_sf_minus: p.gamma_sf_minus,
            gamma_sd: p.gamma_sd,
            p_norm: 2,
        };
        let prices = vec![prices1.clone(); inner_len];
        let costs = vec![costs1.clone(); inner_len];
        let result = fit(
            &ds.days[..inner_len],
            &all_bounds[..inner_len],
            &prices,
            &costs,
            &fc,
        )?;
        let caps = forecast_caps(&ds, inner_len);
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for day in &ds.days[inner_len..train_len] {
            let f = point_forecast(
                &result, &prices1, &costs1, &day.gen_hat, &day.features, &caps, fc.hyper.t_max,
            )?;
            truth.extend(day.demand_hat.iter().copied());
            pred.extend(f.net);
        }
        mae(&truth, &pred)
    });

    let mut rows: Vec<(GridPoint, f64)> = Vec::with_capacity(points.len());
    for (p, s) in points.iter().zip(scores) {
        rows.push((*p, s?));
    }
    // Rank by validation MAE; ties break by lexicographic parameter order.
    let key = |p: &GridPoint| (p.t_max, p.alpha, p.gamma_sf_plus, p.gamma_sf_minus, p.gamma_sd);
    rows.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| key(&a.0).partial_cmp(&key(&b.0)).unwrap_or(std::cmp::Ordering::Equal))
    });

    let out = out_dir(cfg);
    std::fs::create_dir_all(&out)?;
    let mut csv = String::from("rank,t_max,alpha,gamma_sf_plus,gamma_sf_minus,gamma_sd,val_mae\n");
    for (rank, (p, s)) in rows.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            rank + 1,
            p.t_max,
            p.alpha,
            p.gamma_sf_plus,
            p.gamma_sf_minus,
            p.gamma_sd,
            s
        );
    }
    std::fs::write(out.join("grid.csv"), csv)?;

    // Refit the winner on the full training window.
    let best = rows[0].0;
    let mut fc = base_fc;
    fc.hyper = Hyperparams {
        t_max: best.t_max.min(ds.hours()),
        alpha: best.alpha,
        gamma_sf_plus: best.gamma_sf_plus,
        gamma_sf_minus: best.gamma_sf_minus,
        gamma_sd: best.gamma_sd,
        p_norm: 2,
    };
    let prices = vec![prices1.clone(); train_len];
    let costs = vec![costs1.clone(); train_len];
    let result = fit(&ds.days[..train_len], &all_bounds[..train_len], &prices, &costs, &fc)?;
    save_json(&result, &out.join("fit.json"))?;
    println!(
        "gridsearch: {} points, best t_max={} alpha={} gamma=({}, {}, {}) val_mae={:.6}",
        rows.len(),
        best.t_max,
        best.alpha,
        best.gamma_sf_plus,
        best.gamma_sf_minus,
        best.gamma_sd,
        rows[0].1
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let errs = validate_config(&cfg, &cli.command);
    if !errs.is_empty() {
        for e in &errs {
            eprintln!("config error: {e}");
        }
        return Err(Error::invalid(format!("{} configuration error(s)", errs.len())));
    }
    // Sanity-check the weighting schedule early so bad alpha values fail
    // with a config-shaped message instead of deep in the fit.
    if let Some(a) = cfg.fit.alpha {
        compute_weights(a, 1)?;
    }
    match cli.command {
        Cmd::Simulate => cmd_simulate(&cfg),
        Cmd::Fit => cmd_fit(&cfg),
        Cmd::Forecast => cmd_forecast(&cfg, cli.quantiles),
        Cmd::Evaluate => cmd_evaluate(&cfg, cli.baseline),
        Cmd::Gridsearch => cmd_gridsearch(&cfg),
    }
}

fn main() -> ExitCode {
    init_thread_cap();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
