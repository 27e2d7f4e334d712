//! `amp-sim`: batch runner for screening, clearing, scenarios, synthetic
//! panels and discontinuity estimation.
//!
//! Exit codes: 0 on success, 1 when inputs fail validation or a module
//! reports an error, 2 on usage errors.

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use amp_core::clearing::{clear, write_prices_csv, ClearingError, ClearingResult};
use amp_core::data::{load_dataset, validate_dataset, write_dataset, Dataset, SEGMENT_CAP_ISONE, SEGMENT_CAP_NYISO};
use amp_core::exec::Execution;
use amp_core::indices::{congestion_series, market_rsi_series, MustTakeRule, ScoreKind, ScoreSeries};
use amp_core::rdd::{
    build_panel, fit_per_bidder, fit_pooled, read_panel, select_bandwidth, write_panel, Covariance, ExclusionRule,
    ObservationRow, PerBidderReport, PolyOrder, RddFit, RddSpec,
};
use amp_core::reference::{ReferenceConfig, ReferenceTable};
use amp_core::scenario::{
    compare_scenarios, run_scenario_with, screen_dataset, write_deltas_csv, write_report_csv, HourFilter, Preset,
    ScenarioInputs, ScenarioReport,
};
use amp_core::screening::{write_screening_csv, AmpConfig, AreaConductRule, ImpactBase, StructuralTest};
use amp_core::synth::{generate, SynthSpec};

use config::{BandwidthSetting, Config};
use manifest::{display_path, sha256_bytes, sha256_file, FileDigest, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "amp-sim", version, about = "Market power mitigation simulator and estimator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Rolling reference levels per unit-hour (refs.csv).
    Refs,
    /// Residual supply index per bidder-hour (scores.csv).
    Rsi,
    /// Lagged load-weighted congestion index per hour (scores.csv).
    Congestion,
    /// Three-step screening per hour (screening.csv).
    Screen,
    /// Merit-order clearing per hour (prices.csv).
    Clear,
    /// Threshold scenarios with price and surplus accounting.
    Scenario,
    /// Synthetic dataset plus ground truth.
    Synth,
    /// Regression discontinuity fit (fit.csv, summary.csv).
    Rdd,
    /// Runs the configured steps in dependency order.
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Refs => "refs",
            Command::Rsi => "rsi",
            Command::Congestion => "congestion",
            Command::Screen => "screen",
            Command::Clear => "clear",
            Command::Scenario => "scenario",
            Command::Synth => "synth",
            Command::Rdd => "rdd",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum IsoArg {
    Isone,
    Nyiso,
}

#[derive(Debug, Clone, Default, Args)]
struct Flags {
    /// Flat TOML config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true, env = "AMP_SIM_THREADS")]
    threads: Option<usize>,
    /// Directory with offers.csv, market.csv and areas.csv.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    offers: Option<PathBuf>,
    #[arg(long, global = true)]
    market: Option<PathBuf>,
    #[arg(long, global = true)]
    areas: Option<PathBuf>,
    /// Observation panel CSV for `rdd`.
    #[arg(long, global = true)]
    panel: Option<PathBuf>,
    /// Synthetic spec (TOML).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    iso: Option<IsoArg>,
    /// Score variable: rsi or congestion.
    #[arg(long, global = true)]
    score: Option<String>,
    #[arg(long, global = true)]
    cutoff: Option<f64>,
    /// max-output or segment-quantity.
    #[arg(long, global = true)]
    must_take: Option<String>,
    #[arg(long, global = true)]
    window_days: Option<u32>,
    /// Threshold preset; repeat for several scenarios.
    #[arg(long, global = true)]
    preset: Vec<String>,
    /// CSV of hours to leave out of scenarios.
    #[arg(long, global = true)]
    exclude: Option<PathBuf>,
    /// Bandwidth in score units, or `retain:<fraction>`.
    #[arg(long, global = true)]
    bandwidth: Option<String>,
    /// Share of observations to keep around the cutoff.
    #[arg(long, global = true)]
    retain: Option<f64>,
    /// Score noise σ for the fuzzy design.
    #[arg(long, global = true)]
    fuzzy: Option<f64>,
    #[arg(long, global = true)]
    sharp_interaction: bool,
    #[arg(long, global = true)]
    quadratic: bool,
    #[arg(long, global = true)]
    no_fixed_effects: bool,
    #[arg(long, global = true)]
    per_bidder: bool,
}

/// Bad invocation rather than bad data; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
enum Bandwidth {
    Width(f64),
    Retain(f64),
}

fn parse_bandwidth(text: &str) -> Result<Bandwidth> {
    let parsed = match text.strip_prefix("retain:") {
        Some(f) => f.trim().parse().map(Bandwidth::Retain),
        None => text.trim().parse().map(Bandwidth::Width),
    };
    parsed.map_err(|_| usage(format!("bandwidth `{text}` is neither a number nor retain:<fraction>")))
}

/// Effective settings after merging flags over the config file. Serialized
/// for the manifest's config digest; the output directory and thread count
/// do not affect results and are left out.
#[derive(Debug, Clone, Serialize)]
struct Settings {
    #[serde(skip)]
    out: PathBuf,
    #[serde(skip)]
    threads: Option<usize>,
    data: Option<PathBuf>,
    offers: Option<PathBuf>,
    market: Option<PathBuf>,
    areas: Option<PathBuf>,
    panel: Option<PathBuf>,
    spec: Option<PathBuf>,
    seed: Option<u64>,
    segment_cap: u8,
    score: ScoreKind,
    cutoff: Option<f64>,
    must_take: String,
    window_days: u32,
    presets: Vec<String>,
    exclude: Option<PathBuf>,
    conduct_abs: Option<f64>,
    conduct_pct: Option<f64>,
    impact_abs: Option<f64>,
    impact_pct: Option<f64>,
    structural_test: Option<bool>,
    impact_base: Option<String>,
    area_rule: Option<(f64, f64)>,
    bandwidth: Option<Bandwidth>,
    fuzzy: Option<f64>,
    sharp_interaction: bool,
    quadratic: bool,
    fixed_effects: bool,
    per_bidder: bool,
    min_rows: usize,
    steps: Vec<String>,
}

const STEPS: [&str; 7] = ["synth", "refs", "scores", "screen", "clear", "scenario", "rdd"];

impl Settings {
    fn resolve(flags: Flags) -> Result<Self> {
        let cfg = match &flags.config {
            Some(p) => Config::load(p).map_err(|e| usage(format!("{e:#}")))?,
            None => Config::default(),
        };
        let segment_cap = match (flags.iso, cfg.iso.as_deref()) {
            (Some(IsoArg::Nyiso), _) | (None, Some("nyiso")) => SEGMENT_CAP_NYISO,
            (Some(IsoArg::Isone), _) | (None, Some("isone") | None) => SEGMENT_CAP_ISONE,
            (None, Some(other)) => return Err(usage(format!("unknown iso `{other}` (expected isone or nyiso)"))),
        };
        let score_text = flags.score.or(cfg.score).unwrap_or_else(|| "rsi".into());
        let score: ScoreKind = score_text.parse().map_err(usage)?;
        let must_take = flags.must_take.or(cfg.must_take).unwrap_or_else(|| "max-output".into());
        if !matches!(must_take.as_str(), "max-output" | "segment-quantity") {
            return Err(usage(format!(
                "unknown must-take rule `{must_take}` (expected max-output or segment-quantity)"
            )));
        }
        let mut presets = if flags.preset.is_empty() {
            cfg.preset.unwrap_or_default()
        } else {
            flags.preset
        };
        let overrides = [cfg.conduct_abs, cfg.conduct_pct, cfg.impact_abs, cfg.impact_pct];
        if presets.is_empty() {
            let custom = overrides.iter().any(Option::is_some) || cfg.structural_test.is_some();
            presets.push(if custom { "custom" } else { "baseline" }.to_string());
        }
        for p in &presets {
            if p != "custom" {
                p.parse::<Preset>().map_err(|e| usage(e.to_string()))?;
            }
        }
        let bandwidth = match (flags.bandwidth, flags.retain, cfg.bandwidth, cfg.retain) {
            (Some(b), _, _, _) => Some(parse_bandwidth(&b)?),
            (None, Some(r), _, _) => Some(Bandwidth::Retain(r)),
            (None, None, Some(BandwidthSetting::Width(w)), _) => Some(Bandwidth::Width(w)),
            (None, None, Some(BandwidthSetting::Text(t)), _) => Some(parse_bandwidth(&t)?),
            (None, None, None, Some(r)) => Some(Bandwidth::Retain(r)),
            _ => None,
        };
        let steps = cfg
            .steps
            .unwrap_or_else(|| STEPS.iter().map(|s| s.to_string()).collect())
            .into_iter()
            .map(|s| match s.as_str() {
                "rsi" | "congestion" | "indices" => "scores".to_string(),
                _ => s,
            })
            .collect::<Vec<_>>();
        if let Some(bad) = steps.iter().find(|s| !STEPS.contains(&s.as_str())) {
            return Err(usage(format!("unknown pipeline step `{bad}` (expected {})", STEPS.join(", "))));
        }
        let area_rule = match (cfg.area_avg_price, cfg.area_constrained_hours) {
            (Some(p), Some(h)) => Some((p, h)),
            (None, None) => None,
            _ => return Err(usage("area_avg_price and area_constrained_hours must be set together")),
        };
        Ok(Settings {
            out: flags.out.or(cfg.out).unwrap_or_else(|| PathBuf::from("out")),
            threads: flags.threads.or(cfg.threads),
            data: flags.data.or(cfg.data),
            offers: flags.offers.or(cfg.offers),
            market: flags.market.or(cfg.market),
            areas: flags.areas.or(cfg.areas),
            panel: flags.panel.or(cfg.panel),
            spec: flags.spec.or(cfg.spec),
            seed: flags.seed.or(cfg.seed),
            segment_cap,
            score,
            cutoff: flags.cutoff.or(cfg.cutoff),
            must_take,
            window_days: flags.window_days.or(cfg.window_days).unwrap_or(90),
            presets,
            exclude: flags.exclude.or(cfg.exclude),
            conduct_abs: cfg.conduct_abs,
            conduct_pct: cfg.conduct_pct,
            impact_abs: cfg.impact_abs,
            impact_pct: cfg.impact_pct,
            structural_test: cfg.structural_test,
            impact_base: cfg.impact_base,
            area_rule,
            bandwidth,
            fuzzy: flags.fuzzy.or(cfg.fuzzy),
            sharp_interaction: flags.sharp_interaction || cfg.sharp_interaction.unwrap_or(false),
            quadratic: flags.quadratic || cfg.quadratic.unwrap_or(false),
            fixed_effects: !flags.no_fixed_effects && cfg.fixed_effects.unwrap_or(true),
            per_bidder: flags.per_bidder || cfg.per_bidder.unwrap_or(false),
            min_rows: cfg.min_rows.unwrap_or(ExclusionRule::default().min_rows),
            steps,
        })
    }

    fn must_take_rule(&self) -> MustTakeRule {
        match self.must_take.as_str() {
            "segment-quantity" => MustTakeRule::SegmentQuantity,
            _ => MustTakeRule::MaxOutput,
        }
    }

    fn reference_config(&self) -> ReferenceConfig {
        ReferenceConfig {
            window_days: self.window_days,
            ..ReferenceConfig::default()
        }
    }

    fn structural(&self) -> StructuralTest {
        let mut s = StructuralTest::for_kind(self.score);
        if let Some(c) = self.cutoff {
            s.cutoff = c;
        }
        s
    }

    fn amp_config(&self, preset: &str) -> Result<AmpConfig> {
        let mut cfg = if preset == "custom" {
            let mut c = AmpConfig::default();
            c.conduct_abs = self.conduct_abs.unwrap_or(c.conduct_abs);
            c.conduct_pct = self.conduct_pct.unwrap_or(c.conduct_pct);
            c.impact_abs = self.impact_abs.unwrap_or(c.impact_abs);
            c.impact_pct = self.impact_pct.unwrap_or(c.impact_pct);
            c
        } else {
            preset.parse::<Preset>().map_err(|e| usage(e.to_string()))?.config()
        };
        let enabled = if preset == "custom" {
            self.structural_test.unwrap_or(true)
        } else {
            cfg.structural.enabled
        };
        cfg.structural = StructuralTest {
            enabled,
            ..self.structural()
        };
        cfg.impact_base = match self.impact_base.as_deref() {
            None | Some("mitigated") => ImpactBase::Mitigated,
            Some("unmitigated") => ImpactBase::Unmitigated,
            Some(other) => return Err(usage(format!("unknown impact_base `{other}`"))),
        };
        cfg.area_rule = self.area_rule.map(|(p, h)| AreaConductRule::new(p, h));
        cfg.validate()?;
        Ok(cfg)
    }

    fn rdd_spec(&self, bandwidth: f64) -> RddSpec {
        RddSpec {
            bandwidth,
            order: if self.quadratic { PolyOrder::Quadratic } else { PolyOrder::Linear },
            fuzzy: self.fuzzy,
            fuzzy_interaction: !self.sharp_interaction,
            fixed_effects: self.fixed_effects,
            covariance: Covariance::ClusterBidder,
            alpha: 0.05,
        }
    }

    fn config_digest(&self) -> String {
        sha256_bytes(&serde_json::to_vec(self).expect("settings serialize"))
    }
}

struct DataPaths {
    offers: PathBuf,
    market: PathBuf,
    areas: Option<PathBuf>,
}

struct Run {
    settings: Settings,
    /// Taken before any step rewrites settings.
    config_digest: String,
    exec: Execution,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn out_path(&self, name: &str) -> PathBuf {
        self.settings.out.join(name)
    }

    fn write<E>(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), E>) -> Result<()>
    where
        E: std::error::Error + Send + Sync + 'static,
    {
        let path = self.out_path(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
        self.record_output(path);
        Ok(())
    }

    fn record_output(&mut self, path: PathBuf) {
        if !self.outputs.contains(&path) {
            self.outputs.push(path);
        }
    }

    fn record_input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    fn data_paths(&self) -> Result<DataPaths> {
        let s = &self.settings;
        let from_dir = |name: &str| s.data.as_ref().map(|d| d.join(name));
        let offers = s
            .offers
            .clone()
            .or_else(|| from_dir("offers.csv"))
            .ok_or_else(|| usage("no dataset given (use --data DIR or --offers/--market)"))?;
        let market = s
            .market
            .clone()
            .or_else(|| from_dir("market.csv"))
            .ok_or_else(|| usage("no market file given (use --data DIR or --market FILE)"))?;
        let areas = s.areas.clone().or_else(|| from_dir("areas.csv"));
        Ok(DataPaths { offers, market, areas })
    }

    fn load(&mut self) -> Result<Dataset> {
        let paths = self.data_paths()?;
        let areas = paths.areas.filter(|p| p.exists());
        let ds = load_dataset(&paths.offers, &paths.market, areas.as_deref(), self.settings.segment_cap)?;
        let findings = validate_dataset(&ds);
        if let Some(first) = findings.first() {
            bail!("{} validation finding(s), first: {first}", findings.len());
        }
        self.record_input(&paths.offers);
        self.record_input(&paths.market);
        if let Some(a) = &areas {
            self.record_input(a);
        }
        Ok(ds)
    }

    fn require_areas(&self) -> Result<()> {
        let paths = self.data_paths()?;
        match paths.areas {
            Some(p) if p.exists() => Ok(()),
            Some(p) => bail!("{} not found; congestion scores need area records", p.display()),
            None => bail!("no areas file given; congestion scores need area records"),
        }
    }

    fn manifest(&self, subcommand: &str) -> Result<RunManifest> {
        let out = &self.settings.out;
        let digest = |p: &PathBuf| -> Result<FileDigest> {
            Ok(FileDigest {
                path: display_path(p, out),
                sha256: sha256_file(p)?,
            })
        };
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.settings.seed,
            config_digest: self.config_digest.clone(),
            inputs: self.inputs.iter().map(digest).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(digest).collect::<Result<_>>()?,
        })
    }
}

fn step<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| {
        if e.is::<UsageError>() {
            e
        } else {
            e.context(name.to_string())
        }
    })
}

fn scores(run: &mut Run, ds: &Dataset) -> Result<ScoreSeries> {
    let mut series = match run.settings.score {
        ScoreKind::Rsi => market_rsi_series(ds, run.settings.must_take_rule())?,
        ScoreKind::Congestion => {
            run.require_areas()?;
            congestion_series(ds)?
        }
    };
    if let Some(c) = run.settings.cutoff {
        series.cutoff = c;
    }
    Ok(series)
}

fn write_scores(run: &mut Run, series: &ScoreSeries) -> Result<()> {
    run.write("scores.csv", |w| series.write_csv(w))?;
    let label = match series.kind {
        ScoreKind::Rsi => "hours with a pivotal bidder",
        ScoreKind::Congestion => "hours above the congestion cutoff",
    };
    println!("{label}: {:.1}%", 100.0 * series.treated_hour_share());
    Ok(())
}

fn references(run: &mut Run, ds: &Dataset) -> ReferenceTable {
    ReferenceTable::build(ds, &run.settings.reference_config(), run.exec)
}

fn hour_filter(run: &mut Run) -> Result<HourFilter> {
    match run.settings.exclude.clone() {
        Some(p) => {
            let f = File::open(&p).with_context(|| format!("opening {}", p.display()))?;
            run.record_input(&p);
            Ok(HourFilter::read_csv(f)?)
        }
        None => Ok(HourFilter::default()),
    }
}

fn do_screen(run: &mut Run, ds: &Dataset, inputs: &ScenarioInputs) -> Result<()> {
    let preset = run.settings.presets[0].clone();
    let cfg = run.settings.amp_config(&preset)?;
    let filter = hour_filter(run)?;
    let outcomes = screen_dataset(ds, inputs, &cfg, &filter, run.exec)?;
    run.write("screening.csv", |w| write_screening_csv(w, &outcomes))?;
    let n = outcomes.iter().filter(|o| o.mitigated).count();
    println!("{preset}: {n} of {} hours mitigated", outcomes.len());
    Ok(())
}

fn do_clear(run: &mut Run, ds: &Dataset) -> Result<()> {
    let hours: Vec<_> = ds.hours().collect();
    let results = run.exec.map(&hours, |&h| {
        let load = ds.market_at(h).map_or(f64::NAN, |m| m.load_forecast);
        match clear(ds.offers_at(h), load) {
            Ok(r) => Ok(r),
            Err(ClearingError::InsufficientSupply { .. } | ClearingError::EmptyStack) => {
                Ok(ClearingResult::infeasible(h))
            }
            Err(e) => Err(anyhow!("hour {h}: {e}")),
        }
    });
    let results: Vec<ClearingResult> = results.into_iter().collect::<Result<_>>()?;
    let infeasible = results.iter().filter(|r| !r.feasible).count();
    run.write("prices.csv", |w| write_prices_csv(w, &results))?;
    if infeasible > 0 {
        println!("{infeasible} hour(s) could not be cleared");
    }
    Ok(())
}

fn do_scenario(run: &mut Run, ds: &Dataset, inputs: &ScenarioInputs) -> Result<()> {
    let filter = hour_filter(run)?;
    let presets = run.settings.presets.clone();
    let mut reports: Vec<ScenarioReport> = Vec::new();
    for name in &presets {
        let cfg = run.settings.amp_config(name)?;
        reports.push(run_scenario_with(ds, inputs, name, &cfg, &filter, run.exec)?);
    }
    run.write("scenario_report.csv", |w| write_report_csv(w, &reports))?;
    if let [only] = reports.as_slice() {
        run.write("hours.csv", |w| only.write_hours_csv(w))?;
    } else {
        for r in &reports {
            run.write(&format!("hours_{}.csv", r.name), |w| r.write_hours_csv(w))?;
        }
        let deltas = reports[1..]
            .iter()
            .map(|r| compare_scenarios(&reports[0], r))
            .collect::<Result<Vec<_>, _>>()?;
        run.write("deltas.csv", |w| write_deltas_csv(w, &deltas))?;
    }
    for r in &reports {
        println!(
            "{}: {} mitigated of {} hours, surplus increase {:.2}",
            r.name,
            r.n_mitigated(),
            r.included_hours,
            r.total_surplus_increase
        );
    }
    Ok(())
}

fn do_synth(run: &mut Run, dir: &str) -> Result<()> {
    let path = run
        .settings
        .spec
        .clone()
        .ok_or_else(|| usage("synth needs --spec FILE"))?;
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut spec: SynthSpec = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    run.record_input(&path);
    if let Some(seed) = run.settings.seed {
        spec.seed = seed;
    }
    let (ds, truth) = generate(&spec)?;
    let target = run.out_path(dir);
    write_dataset(&target, &ds)?;
    for name in ["offers.csv", "market.csv", "areas.csv"] {
        run.record_output(target.join(name));
    }
    let truth_name = if dir.is_empty() { "truth.csv".to_string() } else { format!("{dir}/truth.csv") };
    run.write(&truth_name, |w| truth.write_csv(w))?;
    println!(
        "{} offers over {} hours; treated share {:.3}",
        ds.offers().len(),
        ds.market().len(),
        truth.treated_share()
    );
    Ok(())
}

fn resolve_bandwidth(run: &Run, rows: &[ObservationRow]) -> Result<f64> {
    let centered: Vec<f64> = rows.iter().map(|r| r.centered).collect();
    Ok(match run.settings.bandwidth {
        Some(Bandwidth::Width(h)) => h,
        Some(Bandwidth::Retain(f)) => select_bandwidth(&centered, f)?,
        // narrow windows used for each market's score
        None => match run.settings.score {
            ScoreKind::Rsi => 0.2,
            ScoreKind::Congestion => 3.0,
        },
    })
}

fn write_fit_summary(run: &mut Run, fit: &RddFit, per_bidder: Option<&PerBidderReport>) -> Result<()> {
    let t = fit.treatment();
    let ci = fit.confidence_interval("treat", fit.spec.alpha).unwrap_or((f64::NAN, f64::NAN));
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut rows: Vec<(&str, String)> = vec![
        ("bandwidth", fit.spec.bandwidth.to_string()),
        ("n_obs", fit.n_obs.to_string()),
        ("n_outside_bandwidth", fit.n_dropped.to_string()),
        ("n_clusters", fit.n_clusters.to_string()),
        ("tau", t.estimate.to_string()),
        ("tau_std_error", t.std_error.to_string()),
        ("tau_p_value", t.p_value.to_string()),
        ("tau_ci_low", ci.0.to_string()),
        ("tau_ci_high", ci.1.to_string()),
        ("r2", fit.r2.to_string()),
        ("within_r2", opt(fit.within_r2)),
    ];
    if let Some(report) = per_bidder {
        let s = &report.summary;
        rows.extend([
            ("bidders_analyzed", s.analyzed.to_string()),
            ("bidders_excluded", report.excluded.len().to_string()),
            ("bidders_significant", s.significant.to_string()),
            ("significant_share", opt(s.significant_share)),
            ("median_tau", opt(s.median_all)),
            ("q25_tau", opt(s.iqr_all.map(|q| q.0))),
            ("q75_tau", opt(s.iqr_all.map(|q| q.1))),
            ("median_tau_significant", opt(s.median_significant)),
            ("q25_tau_significant", opt(s.iqr_significant.map(|q| q.0))),
            ("q75_tau_significant", opt(s.iqr_significant.map(|q| q.1))),
        ]);
    }
    run.write("summary.csv", |w| -> Result<(), std::io::Error> {
        writeln!(w, "statistic,value")?;
        for (k, v) in &rows {
            writeln!(w, "{k},{v}")?;
        }
        Ok(())
    })
}

fn do_rdd(run: &mut Run, rows: &[ObservationRow]) -> Result<()> {
    let h = resolve_bandwidth(run, rows)?;
    let spec = run.settings.rdd_spec(h);
    let fit = fit_pooled(rows, &spec)?;
    run.write("fit.csv", |w| fit.write_csv(w))?;
    let per_bidder = if run.settings.per_bidder {
        let rule = ExclusionRule {
            min_rows: run.settings.min_rows,
            ..ExclusionRule::default()
        };
        let report = fit_per_bidder(rows, &spec, &rule, run.exec)?;
        run.write("per_bidder.csv", |w| report.write_csv(w))?;
        Some(report)
    } else {
        None
    };
    write_fit_summary(run, &fit, per_bidder.as_ref())?;
    let t = fit.treatment();
    println!(
        "tau = {:.4} (se {:.4}, p {:.4}) on {} rows, {} bidders, bandwidth {h}",
        t.estimate, t.std_error, t.p_value, fit.n_obs, fit.n_clusters
    );
    Ok(())
}

fn panel_from_data(run: &mut Run, ds: &Dataset, inputs: &ScenarioInputs) -> Result<Vec<ObservationRow>> {
    let built = build_panel(ds, &inputs.references, &inputs.scores);
    if built.dropped() > 0 {
        println!(
            "panel: {} rows, dropped {} (no reference {}, no score {}, no economic bid {})",
            built.rows.len(),
            built.dropped(),
            built.missing_reference,
            built.missing_score,
            built.no_economic_bid
        );
    }
    run.write("panel.csv", |w| write_panel(w, &built.rows))?;
    Ok(built.rows)
}

fn prepare_inputs(run: &mut Run, ds: &Dataset) -> Result<ScenarioInputs> {
    let references = references(run, ds);
    let scores = scores(run, ds)?;
    Ok(ScenarioInputs { references, scores })
}

fn dispatch(command: Command, run: &mut Run) -> Result<()> {
    match command {
        Command::Refs => {
            let ds = step("data", run.load())?;
            let refs = references(run, &ds);
            run.write("refs.csv", |w| refs.write_csv(w))
        }
        Command::Rsi | Command::Congestion => {
            run.settings.score = if command == Command::Rsi {
                ScoreKind::Rsi
            } else {
                ScoreKind::Congestion
            };
            if command == Command::Congestion {
                step("congestion", run.require_areas())?;
            }
            let ds = step("data", run.load())?;
            let series = step(command.name(), scores(run, &ds))?;
            write_scores(run, &series)
        }
        Command::Screen => {
            let ds = step("data", run.load())?;
            let inputs = step("scores", prepare_inputs(run, &ds))?;
            step("screen", do_screen(run, &ds, &inputs))
        }
        Command::Clear => {
            let ds = step("data", run.load())?;
            step("clear", do_clear(run, &ds))
        }
        Command::Scenario => {
            let ds = step("data", run.load())?;
            let inputs = step("scores", prepare_inputs(run, &ds))?;
            step("scenario", do_scenario(run, &ds, &inputs))
        }
        Command::Synth => step("synth", do_synth(run, "")),
        Command::Rdd => {
            let rows = match run.settings.panel.clone() {
                Some(p) => {
                    let f = File::open(&p).with_context(|| format!("opening {}", p.display()))?;
                    run.record_input(&p);
                    step("rdd", read_panel(f).map_err(anyhow::Error::from))?
                }
                None => {
                    let ds = step("data", run.load())?;
                    let inputs = step("scores", prepare_inputs(run, &ds))?;
                    step("panel", panel_from_data(run, &ds, &inputs))?
                }
            };
            step("rdd", do_rdd(run, &rows))
        }
        Command::Pipeline => pipeline(run),
    }
}

fn pipeline(run: &mut Run) -> Result<()> {
    let wants = |s: &str| run.settings.steps.iter().any(|x| x == s);
    let (synth, refs, scores_step, screen, clear_step, scenario, rdd) = (
        wants("synth") && run.settings.spec.is_some(),
        wants("refs"),
        wants("scores"),
        wants("screen"),
        wants("clear"),
        wants("scenario"),
        wants("rdd"),
    );
    if synth {
        step("synth", do_synth(run, "data"))?;
        let dir = run.out_path("data");
        run.settings.data = Some(dir.clone());
        run.settings.offers = Some(dir.join("offers.csv"));
        run.settings.market = Some(dir.join("market.csv"));
        run.settings.areas = Some(dir.join("areas.csv"));
    }
    if run.settings.score == ScoreKind::Congestion && (scores_step || screen || scenario || rdd) {
        step("congestion", run.require_areas())?;
    }
    let ds = step("data", run.load())?;
    let ref_table = references(run, &ds);
    if refs {
        run.write("refs.csv", |w| ref_table.write_csv(w))?;
    }
    let needs_scores = scores_step || screen || scenario || rdd;
    let inputs = if needs_scores {
        let series = step("scores", scores(run, &ds))?;
        if scores_step {
            step("scores", write_scores(run, &series))?;
        }
        Some(ScenarioInputs {
            references: ref_table,
            scores: series,
        })
    } else {
        None
    };
    if clear_step {
        step("clear", do_clear(run, &ds))?;
    }
    if let Some(inputs) = &inputs {
        if screen {
            step("screen", do_screen(run, &ds, inputs))?;
        }
        if scenario {
            step("scenario", do_scenario(run, &ds, inputs))?;
        }
        if rdd {
            let rows = step("panel", panel_from_data(run, &ds, inputs))?;
            step("rdd", do_rdd(run, &rows))?;
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let settings = Settings::resolve(cli.opts)?;
    let exec = match settings.threads {
        Some(0) => return Err(usage("--threads must be at least 1")),
        Some(1) => Execution::Sequential,
        _ => Execution::default(),
    };
    std::fs::create_dir_all(&settings.out).with_context(|| format!("creating {}", settings.out.display()))?;
    let mut run = Run {
        config_digest: settings.config_digest(),
        settings,
        exec,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    with_threads(run.settings.threads, || dispatch(cli.command, &mut run))??;
    let manifest = run.manifest(cli.command.name())?;
    manifest.write(&run.out_path("manifest.json"))
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) if n > 1 => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T: Send>(_threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(f())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                eprintln!("usage: amp-sim <COMMAND> [OPTIONS]  (see amp-sim --help)");
                2
            } else {
                1
            }
        }
    }
}
