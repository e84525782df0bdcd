//! Subcommands behind the `varadhan` binary.
//!
//! Each command takes a resolved [`ExperimentConfig`] and returns a JSON
//! report, plot-ready side files and a pass/fail verdict. Reports carry the
//! resolved configuration and the version string and nothing time-dependent.

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ScalingKind};
use crate::density::{self, DensityReport};
use crate::driver::{empirical_covariance_report, sample_fbm, GridSpec};
use crate::error::{Error, Result};
use crate::fields::{build_bracket_table, hypo_check, PointSampler, VectorFieldSystem};
use crate::malliavin::{self, hypoelliptic_probe, inv_gamma_scaling};
use crate::rate::{self, minimize_energy, minimize_energy_restricted, RateResult};

/// Exit codes.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Relative slack of the `d² ≤ d²_R` check.
pub const INCLUSION_TOL: f64 = 1e-6;

/// `v<crate version>`, or the `git describe` string baked in at build time
/// through `VARADHAN_GIT_DESCRIBE`.
pub fn version() -> String {
    match option_env!("VARADHAN_GIT_DESCRIBE") {
        Some(v) if !v.is_empty() => v.to_string(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical { .. } | Error::Io(_) | Error::Json(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    FbmCheck,
    HypoCheck,
    Rate,
    Density,
    Scaling,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::FbmCheck => "fbm-check",
            Command::HypoCheck => "hypo-check",
            Command::Rate => "rate",
            Command::Density => "density",
            Command::Scaling => "scaling",
            Command::Report => "report",
        }
    }
}

/// A finished command.
#[derive(Debug)]
pub struct Outcome {
    pub report: Value,
    /// `(file name, contents)` for the output directory.
    pub files: Vec<(String, Vec<u8>)>,
    pub pass: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            EXIT_PASS
        } else {
            EXIT_FAIL
        }
    }

    /// Pretty JSON with a trailing newline.
    pub fn json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn run(cmd: Command, cfg: ExperimentConfig) -> Result<Outcome> {
    let (cfg, sys) = cfg.resolve()?;
    if sys.test_only {
        log::warn!("system '{}' has unbounded fields and serves as a closed-form oracle only", sys.name);
    }
    let (result, files, pass) = match cmd {
        Command::FbmCheck => fbm_check(&cfg)?,
        Command::HypoCheck => hypo(&cfg, &sys)?,
        Command::Rate => rate_cmd(&cfg, &sys)?,
        Command::Density => density_cmd(&cfg, &sys)?,
        Command::Scaling => scaling(&cfg, &sys)?,
        Command::Report => report(&cfg, &sys)?,
    };
    let report = json!({
        "command": cmd.name(),
        "version": version(),
        "config": serde_json::to_value(&cfg)?,
        "verdict": if pass { "pass" } else { "fail" },
        "result": result,
    });
    let mut files = files;
    files.push((format!("{}.json", cmd.name()), Vec::new()));
    let mut out = Outcome { report, files, pass };
    let json = out.json().into_bytes();
    out.files.last_mut().expect("json entry").1 = json;
    Ok(out)
}

type Parts = (Value, Vec<(String, Vec<u8>)>, bool);

fn fbm_check(cfg: &ExperimentConfig) -> Result<Parts> {
    let f = &cfg.fbm;
    let spec = GridSpec::new(f.m, f.sample_hurst.unwrap_or(cfg.hurst), f.dim)?;
    let mut ens = sample_fbm(spec, f.n_paths, cfg.seed, f.method)?;
    // checked against the configured index even when sampled with another
    ens.spec = GridSpec::new(f.m, cfg.hurst, f.dim)?;
    let pairs: Vec<(f64, f64)> = f.pairs.iter().map(|p| (p[0], p[1])).collect();
    let rows = empirical_covariance_report(&ens, &pairs)?;
    let max_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    let pass = rows.iter().all(|r| r.z.abs() < f.z_threshold);
    let mut csv = String::from("s,t,empirical,exact,stderr,z\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{:e},{:e},{:e},{:e}\n", r.s, r.t, r.empirical, r.exact, r.stderr, r.z));
    }
    let result = json!({ "rows": rows, "max_abs_z": max_z, "fell_back": ens.fell_back });
    Ok((result, vec![("fbm_covariance.csv".into(), csv.into_bytes())], pass))
}

fn hypo(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Parts> {
    let table = build_bracket_table(sys, cfg.hypo.level)?;
    let sampler = PointSampler::for_system(sys, cfg.seed).with_points([cfg.x0()]);
    let r = hypo_check(&table, &sampler, cfg.hypo.trials)?;
    let pass = r.lambda_hat >= cfg.hypo.min_lambda;
    Ok((serde_json::to_value(&r)?, Vec::new(), pass))
}

/// Unrestricted and (optionally) restricted rate at one target.
#[derive(Clone, Debug, Serialize)]
pub struct RatePair {
    pub y: Vec<f64>,
    pub unrestricted: RateResult,
    pub restricted: Option<RateResult>,
    pub d2: f64,
    /// `d²` when the restricted run is skipped.
    pub d2_r: f64,
    /// `d² ≤ d²_R` up to [`INCLUSION_TOL`].
    pub inclusion_ok: bool,
}

pub fn rate_pair(cfg: &ExperimentConfig, sys: &VectorFieldSystem, y: &[f64]) -> Result<RatePair> {
    let opts = cfg.rate_options();
    let x0 = cfg.x0();
    let un = minimize_energy(y, sys, &x0, &opts)?;
    let d2 = if un.feasible { un.d2 } else { f64::INFINITY };
    let restricted = if cfg.rate.restricted && d2.is_finite() {
        Some(minimize_energy_restricted(y, sys, &x0, cfg.rate.delta_det, &opts, Some(&un.psi_star))?)
    } else {
        None
    };
    let d2_r = match &restricted {
        Some(r) if r.feasible => r.d2,
        Some(_) => f64::INFINITY,
        None => d2,
    };
    let inclusion_ok = !(d2 > d2_r + INCLUSION_TOL * d2_r.abs().max(1.0));
    if !inclusion_ok {
        log::warn!("d² = {d2} exceeds d²_R = {d2_r}: the unrestricted search stopped in a local minimum");
    }
    Ok(RatePair { y: y.to_vec(), unrestricted: un, restricted, d2, d2_r, inclusion_ok })
}

fn rate_cmd(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Parts> {
    let targets: Vec<Vec<f64>> = if cfg.rate.y_grid.is_empty() {
        vec![cfg.rate.y.clone().ok_or_else(|| Error::Config("rate needs a target y".into()))?]
    } else {
        cfg.rate.y_grid.clone()
    };
    let pairs = targets.iter().map(|y| rate_pair(cfg, sys, y)).collect::<Result<Vec<_>>>()?;
    let pass = pairs.iter().all(|p| p.inclusion_ok);
    let mut files = Vec::new();
    let mut csv = Vec::new();
    let un: Vec<RateResult> = pairs.iter().map(|p| p.unrestricted.clone()).collect();
    rate::write_rate_csv(&un, &mut csv)?;
    files.push(("rate.csv".into(), csv));
    let re: Vec<RateResult> = pairs.iter().filter_map(|p| p.restricted.clone()).collect();
    if !re.is_empty() {
        let mut csv = Vec::new();
        rate::write_rate_csv(&re, &mut csv)?;
        files.push(("rate_restricted.csv".into(), csv));
    }
    let result = if pairs.len() == 1 { serde_json::to_value(&pairs[0])? } else { serde_json::to_value(&pairs)? };
    Ok((result, files, pass))
}

fn density_target(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    cfg.density
        .y
        .clone()
        .or_else(|| cfg.rate.y.clone())
        .ok_or_else(|| Error::Config("density needs a target y".into()))
}

fn run_density(cfg: &ExperimentConfig, sys: &VectorFieldSystem, pair: &RatePair) -> Result<DensityReport> {
    let shift = pair.unrestricted.feasible.then_some(&pair.unrestricted.psi_star);
    density::varadhan_report(sys, &cfg.x0(), &pair.y, pair.d2, pair.d2_r, shift, &cfg.density_settings())
}

fn density_files(r: &DensityReport) -> Result<Vec<(String, Vec<u8>)>> {
    let mut csv = Vec::new();
    density::write_density_csv(r, &mut csv)?;
    let mut plot = Vec::new();
    density::write_gnuplot(r, &mut plot)?;
    Ok(vec![("density.csv".into(), csv), ("density.dat".into(), plot)])
}

/// Both sandwich checks, or the faster-decay flag for unreachable targets.
pub fn density_pass(r: &DensityReport) -> bool {
    if !r.d2.is_finite() {
        return r.decays_faster_than_tested;
    }
    r.upper_ok == Some(true) && r.lower_ok == Some(true)
}

fn density_cmd(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Parts> {
    let y = density_target(cfg)?;
    let pair = rate_pair(cfg, sys, &y)?;
    let r = run_density(cfg, sys, &pair)?;
    let pass = density_pass(&r);
    Ok((serde_json::to_value(&r)?, density_files(&r)?, pass))
}

fn in_range(x: f64, r: [f64; 2]) -> bool {
    x >= r[0] && x <= r[1]
}

fn scaling(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Parts> {
    let s = cfg.probe_settings();
    let x0 = cfg.x0();
    let range = cfg.scaling.slope_range.expect("resolved");
    match cfg.scaling.kind {
        ScalingKind::Gamma => {
            let r = inv_gamma_scaling(sys, &x0, &cfg.scaling.eps_grid, &s)?;
            let mut csv = Vec::new();
            malliavin::write_scaling_csv(&r, &mut csv)?;
            let pass = in_range(r.slope, range);
            Ok((serde_json::to_value(&r)?, vec![("scaling_gamma.csv".into(), csv)], pass))
        }
        ScalingKind::Hypoelliptic => {
            let table = build_bracket_table(sys, cfg.hypo.level)?;
            let lambda_hat = match cfg.scaling.lambda_hat {
                Some(v) => v,
                None => {
                    let sampler = PointSampler::for_system(sys, cfg.seed).with_points([x0.clone()]);
                    hypo_check(&table, &sampler, cfg.hypo.trials)?.lambda_hat
                }
            };
            let p = hypoelliptic_probe(&table, &x0, &cfg.scaling.eps_grid, lambda_hat, &s)?;
            let chain_ok = p.chain.iter().all(|c| c.fraction >= cfg.scaling.chain_fraction);
            let pass = chain_ok && in_range(p.gamma_scaling.slope, range);
            let mut g = Vec::new();
            malliavin::write_scaling_csv(&p.gamma_scaling, &mut g)?;
            let mut m = Vec::new();
            malliavin::write_scaling_csv(&p.m_scaling, &mut m)?;
            let files = vec![("scaling_gamma.csv".into(), g), ("scaling_m.csv".into(), m)];
            Ok((serde_json::to_value(&p)?, files, pass))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerdictRow {
    pub system: String,
    pub y: Vec<f64>,
    pub d2: f64,
    pub d2_r: f64,
    pub v0: Option<f64>,
    pub v0_ci: Option<[f64; 2]>,
    pub tol: f64,
    pub upper_ok: Option<bool>,
    pub lower_ok: Option<bool>,
    pub inclusion_ok: bool,
    pub note: Option<String>,
    pub verdict: String,
}

fn report(cfg: &ExperimentConfig, sys: &VectorFieldSystem) -> Result<Parts> {
    let y = density_target(cfg)?;
    let pair = rate_pair(cfg, sys, &y)?;
    let d = run_density(cfg, sys, &pair)?;
    let pass = density_pass(&d) && pair.inclusion_ok;
    let note = if !pair.d2.is_finite() {
        Some(if d.decays_faster_than_tested {
            "density decays faster than any e^{-c/eps^2} scale tested".to_string()
        } else {
            "target unreachable by the optimizer but the density estimate is not negligible".to_string()
        })
    } else if d.no_limit {
        Some("fewer than two usable eps values; no limit extrapolated".to_string())
    } else {
        None
    };
    let row = VerdictRow {
        system: sys.name.clone(),
        y: y.clone(),
        d2: pair.d2,
        d2_r: pair.d2_r,
        v0: d.v0,
        v0_ci: d.v0_ci,
        tol: d.tol,
        upper_ok: d.upper_ok,
        lower_ok: d.lower_ok,
        inclusion_ok: pair.inclusion_ok,
        note,
        verdict: if pass { "PASS" } else { "FAIL" }.into(),
    };
    let mut table = String::from("system,y,d2,d2_R,v0,tol,upper_ok,lower_ok,inclusion_ok,verdict\n");
    let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:e}"));
    let flag = |v: Option<bool>| v.map_or("n/a".to_string(), |b| b.to_string());
    table.push_str(&format!(
        "{},{},{:e},{:e},{},{:e},{},{},{},{}\n",
        row.system,
        y.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
        row.d2,
        row.d2_r,
        opt(row.v0),
        row.tol,
        flag(row.upper_ok),
        flag(row.lower_ok),
        row.inclusion_ok,
        row.verdict
    ));
    let mut files = density_files(&d)?;
    files.push(("verdict.csv".into(), table.into_bytes()));
    let result = json!({ "verdicts": [row], "rate": pair, "density": d });
    Ok((result, files, pass))
}
