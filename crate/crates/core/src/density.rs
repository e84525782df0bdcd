//! Monte Carlo density of `X₁^ε` at a point and the small-noise limit of
//! `ε² log p_ε(y)` against the rate functions.
//!
//! Far from `Φ₁(0)` the density is exponentially small, so endpoints can be
//! simulated under the Cameron–Martin shift `εB + h*` toward the rate
//! minimizer and reweighted by the exact likelihood ratio
//! `exp(−⟨ψ*, B⟩/ε − ‖ψ*‖²/(2ε²))`. On the grid this reweighting is exact.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::{FbmSampler, GridSpec, SamplingMethod};
use crate::error::{Error, Result};
use crate::fields::VectorFieldSystem;
use crate::flow::{solve_endpoint, Drive};
use crate::hilbert::{embed_cm, gram_matrix, StepCoeffs};
use crate::rng;
use crate::stats;

const MODULE: &str = "density";

/// Number of batches behind every standard error.
pub const BATCHES: usize = 20;

/// Largest tolerated fraction of blown-up paths.
pub const MAX_BLOWUP_FRACTION: f64 = 1e-3;

/// Endpoint samples, node-major `N × n`, with optional log-weights.
#[derive(Clone, Debug)]
pub struct EndpointSample {
    pub n: usize,
    pub x: Vec<f64>,
    /// `None` for plain sampling; blown-up paths carry `−∞`.
    pub log_w: Option<Vec<f64>>,
    pub blowups: usize,
}

impl EndpointSample {
    pub fn len(&self) -> usize {
        self.x.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.x[i * self.n..(i + 1) * self.n]
    }

    /// Component `c` of every sample.
    pub fn component(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.x[i * self.n + c]).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulationSettings {
    pub hurst: f64,
    pub m: usize,
    pub substeps: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// `N` endpoints of the equation driven by `εB` (or `εB + h` with weights).
pub fn simulate_endpoints(
    sys: &VectorFieldSystem,
    x0: &[f64],
    eps: f64,
    s: &SimulationSettings,
    shift: Option<&StepCoeffs>,
) -> Result<EndpointSample> {
    if s.n_samples < 1000 {
        return Err(Error::domain(MODULE, "need at least 1000 samples"));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::domain(MODULE, format!("ε = {eps} outside [0, 1]")));
    }
    let spec = GridSpec::new(s.m, s.hurst, sys.d)?;
    let sampler = FbmSampler::new(spec, SamplingMethod::Circulant)?;
    let m1 = spec.m + 1;
    let (h_nodes, psi, energy) = match shift {
        Some(p) => {
            if p.spec != spec {
                return Err(Error::mismatch(MODULE, "importance shift lives on a different grid"));
            }
            if eps == 0.0 {
                return Err(Error::domain(MODULE, "importance shift needs ε > 0"));
            }
            let q = gram_matrix(spec)?;
            (Some(embed_cm(p).values()), Some(p.psi.clone()), q.inner_raw(&p.psi, &p.psi))
        }
        None => (None, None, 0.0),
    };
    let n = sys.n;
    let results: Vec<Option<(Vec<f64>, f64)>> = (0..s.n_samples)
        .into_par_iter()
        .map_init(
            || vec![0.0; spec.dim * m1],
            |buf, i| {
                sampler.sample_into(s.seed, i as u64, buf);
                let mut log_w = 0.0;
                if let Some(psi) = &psi {
                    let mut pairing = 0.0;
                    for c in 0..spec.dim {
                        for j in 1..m1 {
                            pairing += psi[c * spec.m + j - 1] * (buf[c * m1 + j] - buf[c * m1 + j - 1]);
                        }
                    }
                    log_w = -pairing / eps - energy / (2.0 * eps * eps);
                }
                let mut values: Vec<f64> = buf.iter().map(|v| eps * v).collect();
                if let Some(h) = &h_nodes {
                    values.iter_mut().zip(h).for_each(|(v, hv)| *v += hv);
                }
                let drive = Drive { spec, nodes: spec.m, values, eps };
                solve_endpoint(&drive, sys, x0, s.substeps).ok().map(|x| (x, log_w))
            },
        )
        .collect();
    let blowups = results.iter().filter(|r| r.is_none()).count();
    if blowups as f64 > MAX_BLOWUP_FRACTION * s.n_samples as f64 {
        return Err(Error::numerical(
            MODULE,
            format!("{blowups} of {} paths blew up at ε = {eps}", s.n_samples),
        ));
    }
    let mut x = Vec::with_capacity(s.n_samples * n);
    let mut lw = Vec::with_capacity(s.n_samples);
    for r in results {
        match r {
            Some((p, w)) => {
                x.extend(p);
                lw.push(w);
            }
            None => {
                x.extend(std::iter::repeat_n(f64::NAN, n));
                lw.push(f64::NEG_INFINITY);
            }
        }
    }
    let log_w = if shift.is_some() || blowups > 0 { Some(lw) } else { None };
    Ok(EndpointSample { n, x, log_w, blowups })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum Bandwidth {
    /// `factor · ε ·` Silverman's rule per coordinate.
    SilvermanEps { factor: f64, eps: f64 },
    Fixed { h: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct KdeEstimate {
    pub p_hat: f64,
    pub stderr: f64,
    pub bandwidth: Vec<f64>,
    /// `p_hat < 10 · stderr`.
    pub tail_unreliable: bool,
    /// Zero sample spread; the estimate is the kernel peak.
    pub degenerate: bool,
    /// Kish effective sample size.
    pub ess: f64,
}

/// Fallback bandwidth for samples without spread.
const DEGENERATE_BANDWIDTH: f64 = 1e-3;

/// Product-Gaussian kernel estimate of the density at `y`.
pub fn kde(sample: &EndpointSample, y: &[f64], rule: Bandwidth) -> Result<KdeEstimate> {
    let n = sample.n;
    let len = sample.len();
    if len < 1000 {
        return Err(Error::domain(MODULE, "need at least 1000 samples"));
    }
    if y.len() != n {
        return Err(Error::mismatch(MODULE, "evaluation point has the wrong dimension"));
    }
    let finite: Vec<usize> = (0..len).filter(|&i| sample.point(i)[0].is_finite()).collect();
    let mut degenerate = false;
    let bandwidth: Vec<f64> = match rule {
        Bandwidth::Fixed { h } => {
            if !(h > 0.0) {
                return Err(Error::domain(MODULE, "bandwidth must be positive"));
            }
            vec![h; n]
        }
        Bandwidth::SilvermanEps { factor, eps } => {
            let k = (4.0 / ((n as f64 + 2.0) * finite.len() as f64)).powf(1.0 / (n as f64 + 4.0));
            (0..n)
                .map(|c| {
                    let v: Vec<f64> = finite.iter().map(|&i| sample.point(i)[c]).collect();
                    let sd = stats::variance(&v).sqrt();
                    let h = factor * eps * sd * k;
                    if h > 0.0 {
                        h
                    } else {
                        degenerate = true;
                        DEGENERATE_BANDWIDTH
                    }
                })
                .collect()
        }
    };
    let norm: f64 = bandwidth.iter().map(|h| h * (2.0 * std::f64::consts::PI).sqrt()).product();
    let contrib: Vec<f64> = (0..len)
        .map(|i| {
            let p = sample.point(i);
            let lw = sample.log_w.as_ref().map_or(0.0, |w| w[i]);
            if !p[0].is_finite() || lw == f64::NEG_INFINITY {
                return 0.0;
            }
            let q: f64 = p.iter().zip(y).zip(&bandwidth).map(|((a, b), h)| ((a - b) / h).powi(2)).sum();
            (lw - 0.5 * q).exp() / norm
        })
        .collect();
    let p_hat = contrib.iter().sum::<f64>() / len as f64;
    let batch = len / BATCHES;
    let means: Vec<f64> = (0..BATCHES)
        .map(|b| contrib[b * batch..(b + 1) * batch].iter().sum::<f64>() / batch as f64)
        .collect();
    let stderr = (stats::variance(&means) / BATCHES as f64).sqrt();
    let ess = match &sample.log_w {
        None => finite.len() as f64,
        Some(lw) => {
            let mx = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = lw.iter().map(|v| (v - mx).exp()).collect();
            let s1: f64 = w.iter().sum();
            let s2: f64 = w.iter().map(|v| v * v).sum();
            s1 * s1 / s2
        }
    };
    Ok(KdeEstimate {
        p_hat,
        stderr,
        bandwidth,
        tail_unreliable: !(p_hat >= 10.0 * stderr) || p_hat == 0.0,
        degenerate,
        ess,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityRow {
    pub eps: f64,
    pub p_hat: f64,
    pub stderr: f64,
    /// `ε² log p̂`; `None` when `p̂ = 0`.
    pub v_hat: Option<f64>,
    pub v_stderr: Option<f64>,
    pub tail_unreliable: bool,
    pub degenerate: bool,
    pub ess: f64,
    pub blowups: usize,
    /// `v̂` with the bandwidth at 50% and 150%.
    pub v_hat_bw_half: Option<f64>,
    pub v_hat_bw_1_5: Option<f64>,
    /// `log p̂ + d²_R/ε² + n log ε`.
    pub prefactor_probe: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensitySettings {
    pub sim: SimulationSettings,
    pub eps_grid: Vec<f64>,
    pub bandwidth_factor: f64,
    pub importance: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityReport {
    pub y: Vec<f64>,
    pub eps_grid: Vec<f64>,
    pub rows: Vec<DensityRow>,
    /// Extrapolated `lim ε² log p_ε(y)`.
    pub v0: Option<f64>,
    pub v0_stderr: Option<f64>,
    pub v0_ci: Option<[f64; 2]>,
    pub fit_points: usize,
    pub no_limit: bool,
    pub d2: f64,
    pub d2_r: f64,
    pub tol: f64,
    /// `v₀ ≤ −d² + tol`.
    pub upper_ok: Option<bool>,
    /// `v₀ ≥ −d²_R − tol`.
    pub lower_ok: Option<bool>,
    /// No sample came near an unreachable target.
    pub decays_faster_than_tested: bool,
    pub importance: bool,
    pub warnings: Vec<String>,
}

/// Fit `v̂(ε) = v₀ + c ε² log(1/ε) + c₂ ε²` by weighted least squares.
///
/// Returns `(v₀, stderr)`; with fewer than three points the model drops
/// terms from the right.
pub fn extrapolate(eps: &[f64], v: &[f64], se: &[f64]) -> Option<(f64, f64)> {
    let k = eps.len();
    if k < 2 {
        return None;
    }
    let terms = k.min(3);
    let rows: Vec<Vec<f64>> = eps
        .iter()
        .map(|&e| [1.0, e * e * (1.0 / e).ln(), e * e][..terms].to_vec())
        .collect();
    let w: Vec<f64> = se.iter().map(|s| 1.0 / (s * s).max(1e-300)).collect();
    let fit = stats::least_squares(&rows, v, Some(&w), true)?;
    let dof = k.saturating_sub(terms);
    let inflate = if dof > 0 { (fit.residual_ss / dof as f64).max(1.0).sqrt() } else { 1.0 };
    Some((fit.coef[0], fit.stderr(0) * inflate))
}

/// `ε² log p̂_ε(y)` along `eps_grid`, its extrapolation and the sandwich verdicts.
///
/// `d2` and `d2_r` come from the rate optimizer; `shift` is its minimizer,
/// used for importance sampling when enabled and `d2` is finite.
#[allow(clippy::too_many_arguments)]
pub fn varadhan_report(
    sys: &VectorFieldSystem,
    x0: &[f64],
    y: &[f64],
    d2: f64,
    d2_r: f64,
    shift: Option<&StepCoeffs>,
    s: &DensitySettings,
) -> Result<DensityReport> {
    let grid = &s.eps_grid;
    if grid.is_empty() || grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::domain(MODULE, "ε grid must be nonempty and strictly decreasing"));
    }
    if grid.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return Err(Error::domain(MODULE, "ε values must lie in (0, 1]"));
    }
    let shift = if s.importance && d2.is_finite() { shift } else { None };
    let n = sys.n as f64;
    let mut rows = Vec::with_capacity(grid.len());
    let mut warnings = Vec::new();
    for (k, &eps) in grid.iter().enumerate() {
        let sim = SimulationSettings { seed: rng::derive_seed(s.sim.seed, k as u64), ..s.sim.clone() };
        let sample = simulate_endpoints(sys, x0, eps, &sim, shift)?;
        let est = kde(&sample, y, Bandwidth::SilvermanEps { factor: s.bandwidth_factor, eps })?;
        let at = |f: f64| -> Result<Option<f64>> {
            let e = kde(&sample, y, Bandwidth::SilvermanEps { factor: f * s.bandwidth_factor, eps })?;
            Ok((e.p_hat > 0.0).then(|| eps * eps * e.p_hat.ln()))
        };
        let positive = est.p_hat > 0.0;
        if est.tail_unreliable {
            warnings.push(format!("eps = {eps}: tail-unreliable estimate excluded from the fit"));
        }
        rows.push(DensityRow {
            eps,
            p_hat: est.p_hat,
            stderr: est.stderr,
            v_hat: positive.then(|| eps * eps * est.p_hat.ln()),
            v_stderr: positive.then(|| eps * eps * est.stderr / est.p_hat),
            tail_unreliable: est.tail_unreliable,
            degenerate: est.degenerate,
            ess: est.ess,
            blowups: sample.blowups,
            v_hat_bw_half: at(0.5)?,
            v_hat_bw_1_5: at(1.5)?,
            prefactor_probe: (positive && d2_r.is_finite()).then(|| est.p_hat.ln() + d2_r / (eps * eps) + n * eps.ln()),
        });
    }
    let usable: Vec<&DensityRow> = rows.iter().filter(|r| !r.tail_unreliable && r.v_hat.is_some()).collect();
    let no_limit = usable.len() < 2;
    let fit = if no_limit {
        None
    } else {
        let e: Vec<f64> = usable.iter().map(|r| r.eps).collect();
        let v: Vec<f64> = usable.iter().map(|r| r.v_hat.unwrap()).collect();
        let se: Vec<f64> = usable.iter().map(|r| r.v_stderr.unwrap()).collect();
        extrapolate(&e, &v, &se)
    };
    if no_limit {
        warnings.push("fewer than two usable ε values: extrapolation refused".into());
    }
    let tol = 0.15 * d2_r.max(1.0);
    let tol = if tol.is_finite() { tol } else { 0.15 };
    let (v0, v0_stderr) = match fit {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    let decays_faster_than_tested = !d2.is_finite() && rows.iter().all(|r| r.tail_unreliable);
    Ok(DensityReport {
        y: y.to_vec(),
        eps_grid: grid.clone(),
        v0_ci: match (v0, v0_stderr) {
            (Some(a), Some(b)) => Some([a - 1.96 * b, a + 1.96 * b]),
            _ => None,
        },
        fit_points: usable.len(),
        rows,
        v0,
        v0_stderr,
        no_limit,
        d2,
        d2_r,
        tol,
        upper_ok: v0.map(|v| d2.is_finite() && v <= -d2 + tol),
        lower_ok: v0.map(|v| d2_r.is_finite() && v >= -d2_r - tol),
        decays_faster_than_tested,
        importance: shift.is_some(),
        warnings,
    })
}

/// CSV rows `eps,p_hat,stderr,v_hat`.
pub fn write_density_csv<W: Write>(report: &DensityReport, mut w: W) -> Result<()> {
    writeln!(w, "eps,p_hat,stderr,v_hat")?;
    for r in &report.rows {
        let v = r.v_hat.map_or("nan".to_string(), |v| format!("{v:e}"));
        writeln!(w, "{},{:e},{:e},{}", r.eps, r.p_hat, r.stderr, v)?;
    }
    Ok(())
}

/// Two columns `ε² v_hat` for plotting.
pub fn write_gnuplot<W: Write>(report: &DensityReport, mut w: W) -> Result<()> {
    writeln!(w, "# eps^2 v_hat")?;
    for r in &report.rows {
        if let Some(v) = r.v_hat {
            writeln!(w, "{:e} {:e}", r.eps * r.eps, v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn settings(h: f64, n: usize, seed: u64) -> SimulationSettings {
        SimulationSettings { hurst: h, m: 16, substeps: 1, n_samples: n, seed }
    }

    #[test]
    fn identity_endpoints_are_gaussian() {
        let sys = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let s = simulate_endpoints(&sys, &[1.0, -1.0], 0.5, &settings(0.7, 20_000, 3), None).unwrap();
        let c0 = s.component(0);
        assert!((stats::mean(&c0) - 1.0).abs() < 4.0 * 0.5 / (20_000f64).sqrt());
        assert!((stats::variance(&c0) - 0.25).abs() < 0.02);
    }

    #[test]
    fn scalar_linear_is_lognormal() {
        let sys = VectorFieldSystem::builtin("scalar-linear").unwrap();
        let eps = 0.5;
        let s = simulate_endpoints(&sys, &[1.0], eps, &settings(0.7, 20_000, 4), None).unwrap();
        let logs: Vec<f64> = s.component(0).iter().map(|v| v.ln() / eps).collect();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let reference: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut r)).collect();
        let (_, p) = stats::ks_two_sample(&logs, &reference);
        assert!(p > 1e-3, "KS p-value {p}");
    }

    #[test]
    fn deterministic_under_seed() {
        let sys = VectorFieldSystem::builtin("elliptic-perturbed").unwrap();
        let a = simulate_endpoints(&sys, &[0.0, 0.0], 0.3, &settings(0.5, 1000, 5), None).unwrap();
        let b = simulate_endpoints(&sys, &[0.0, 0.0], 0.3, &settings(0.5, 1000, 5), None).unwrap();
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn standard_normal_kde() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut r)).collect();
        let s = EndpointSample { n: 1, x, log_w: None, blowups: 0 };
        let e = kde(&s, &[0.0], Bandwidth::SilvermanEps { factor: 1.0, eps: 1.0 }).unwrap();
        assert!((e.p_hat - 0.3989).abs() < 0.005, "{}", e.p_hat);
        assert!(!e.tail_unreliable);
    }

    #[test]
    fn lognormal_kde() {
        let sys = VectorFieldSystem::builtin("scalar-linear").unwrap();
        let eps = 0.5;
        let s = simulate_endpoints(&sys, &[1.0], eps, &settings(0.5, 200_000, 2), None).unwrap();
        let e = kde(&s, &[1.0], Bandwidth::SilvermanEps { factor: 1.0, eps }).unwrap();
        let exact = stats::normal_pdf(0.0) / eps;
        assert!((e.p_hat - exact).abs() < 3.0 * e.stderr + 0.01 * exact, "{} vs {exact}", e.p_hat);
    }

    #[test]
    fn degenerate_samples() {
        let s = EndpointSample { n: 1, x: vec![0.5; 2000], log_w: None, blowups: 0 };
        let e = kde(&s, &[0.5], Bandwidth::SilvermanEps { factor: 1.0, eps: 0.0 }).unwrap();
        assert!(e.degenerate);
        assert_relative_eq!(e.p_hat, stats::normal_pdf(0.0) / DEGENERATE_BANDWIDTH, max_relative = 1e-12);
    }

    #[test]
    fn importance_weights_are_unbiased() {
        // identity fields: the shifted estimate matches the exact Gaussian density
        let sys = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let spec = GridSpec::new(16, 0.7, 2).unwrap();
        let q = gram_matrix(spec).unwrap();
        let row = crate::hilbert::evaluation_functional(&spec, 1.0);
        let unit = crate::hilbert::gram_solve(&q, &row).unwrap();
        let mut psi = vec![0.0; 32];
        psi[..16].copy_from_slice(&unit);
        let shift = StepCoeffs::new(spec, psi).unwrap();
        let eps = 0.3;
        let s = simulate_endpoints(&sys, &[0.0, 0.0], eps, &settings(0.7, 20_000, 7), Some(&shift)).unwrap();
        // Gaussian kernel on a Gaussian: the smoothed density is N(0, ε² + h²)
        let h = 0.1;
        let e = kde(&s, &[1.0, 0.0], Bandwidth::Fixed { h }).unwrap();
        let v = eps * eps + h * h;
        let exact = (-0.5 / v).exp() / (2.0 * std::f64::consts::PI * v);
        assert!((e.p_hat - exact).abs() < 4.0 * e.stderr, "{} ± {} vs {exact}", e.p_hat, e.stderr);
        assert!(e.stderr < 0.05 * exact);
    }

    #[test]
    fn extrapolation_recovers_exact_model() {
        let eps = [0.5, 0.4, 0.3, 0.25, 0.2];
        let v: Vec<f64> = eps.iter().map(|e: &f64| -0.5 + 2.0 * e * e * (1.0 / e).ln() - 1.8 * e * e).collect();
        let (v0, se) = extrapolate(&eps, &v, &[1e-3; 5]).unwrap();
        assert_relative_eq!(v0, -0.5, epsilon = 1e-9);
        assert!(se < 0.1);
        assert!(extrapolate(&[0.5], &[-1.0], &[0.1]).is_none());
    }

    #[test]
    fn single_eps_grid_refuses_extrapolation() {
        let sys = VectorFieldSystem::builtin("elliptic-identity:1").unwrap();
        let s = DensitySettings {
            sim: settings(0.5, 2000, 1),
            eps_grid: vec![0.5],
            bandwidth_factor: 1.0,
            importance: false,
        };
        let r = varadhan_report(&sys, &[0.0], &[0.2], 0.02, 0.02, None, &s).unwrap();
        assert!(r.no_limit);
        assert!(r.v0.is_none());
        assert!(r.rows[0].v_hat.is_some());
    }
}
