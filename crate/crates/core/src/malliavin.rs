//! Malliavin derivative rows and matrices, the β transport system, the
//! M matrix and ε-scaling probes of the inverse Malliavin matrix.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::{FbmSampler, GridSpec, SamplingMethod};
use crate::error::{Error, Result};
use crate::fields::{smallest_eigenvalue, BracketTable, OmegaSolver, VectorFieldSystem};
use crate::flow::{solve_flow, Drive, Trajectory};
use crate::hilbert::GramForm;
use crate::stats;

const MODULE: &str = "malliavin";

/// Residual tolerance of the ω expansion inside the β-system.
pub const OMEGA_TOL: f64 = 1e-8;

/// `f^k_i(s) = ε(J₁J_s⁻¹V_k(X_s))_i` at the base grid nodes.
#[derive(Clone, Debug)]
pub struct MalliavinRows {
    pub spec: GridSpec,
    pub n: usize,
    pub eps: f64,
    /// `d × n × (m + 1)`.
    pub f: Vec<f64>,
}

impl MalliavinRows {
    #[inline]
    pub fn value(&self, k: usize, i: usize, node: usize) -> f64 {
        let m1 = self.spec.m + 1;
        self.f[(k * self.n + i) * m1 + node]
    }

    /// Left-endpoint step coefficients of `f^k_i`.
    pub fn step_coeffs(&self, k: usize, i: usize) -> Vec<f64> {
        (0..self.spec.m).map(|l| self.value(k, i, l)).collect()
    }
}

fn check_grid(traj: &Trajectory) -> Result<usize> {
    let m = traj.drive.spec.m;
    if traj.steps % m != 0 {
        return Err(Error::mismatch(MODULE, "trajectory steps are not a multiple of the base grid"));
    }
    Ok(traj.steps / m)
}

pub fn malliavin_rows(traj: &Trajectory, sys: &VectorFieldSystem, eps: f64) -> Result<MalliavinRows> {
    let r = check_grid(traj)?;
    let spec = traj.drive.spec;
    let (n, d, m1) = (sys.n, sys.d, spec.m + 1);
    let j1 = traj.j_at(traj.steps);
    let mut f = vec![0.0; d * n * m1];
    let mut v = vec![0.0; n];
    for node in 0..m1 {
        let k = node * r;
        let a = &j1 * traj.jinv_at(k);
        for kk in 0..d {
            sys.eval_field(kk, traj.x_at(k), &mut v);
            let row = &a * DVector::from_column_slice(&v);
            for i in 0..n {
                f[(kk * n + i) * m1 + node] = eps * row[i];
            }
        }
    }
    Ok(MalliavinRows { spec, n, eps, f })
}

#[derive(Clone, Debug)]
pub struct MalliavinMatrix {
    pub gamma: DMatrix<f64>,
    pub eps: f64,
}

impl MalliavinMatrix {
    /// Eigenvalues, with values in `[−1e−10, 0)` clipped to 0.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.gamma.clone().symmetric_eigenvalues().iter().copied().collect();
        for e in &mut ev {
            if *e < 0.0 && *e >= -1e-10 {
                *e = 0.0;
            }
        }
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn determinant(&self) -> f64 {
        self.gamma.determinant()
    }
}

fn check_q(spec: &GridSpec, q: &GramForm) -> Result<()> {
    if q.spec.m != spec.m || q.spec.hurst != spec.hurst {
        return Err(Error::mismatch(MODULE, "rows and Gram form live on different grids"));
    }
    Ok(())
}

/// `γ^{ij} = Σ_k ⟨f^k_i, f^k_j⟩` through the Gram form.
pub fn malliavin_matrix(rows: &MalliavinRows, q: &GramForm) -> Result<MalliavinMatrix> {
    check_q(&rows.spec, q)?;
    let n = rows.n;
    let d = rows.spec.dim;
    let mut gamma = DMatrix::zeros(n, n);
    for k in 0..d {
        let p = DMatrix::from_fn(rows.spec.m, n, |l, i| rows.value(k, i, l));
        gamma += p.transpose() * &q.q * p;
    }
    let gamma = (&gamma + gamma.transpose()) * 0.5;
    Ok(MalliavinMatrix { gamma, eps: rows.eps })
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                let dp = {
                    let (mut p0, mut p1) = (1.0, z);
                    for k in 2..=n {
                        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    n as f64 * (z * p1 - p0) / (z * z - 1.0)
                };
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
                break;
            }
        }
    }
    (x, w)
}

/// `∫_a^b |r|^α g(r) dr` with `g` linear, `α ∈ (−1, 0)`, `[a, b]` not straddling 0.
fn singular_piece(a: f64, b: f64, alpha: f64, g: &dyn Fn(f64) -> f64, gl: &(Vec<f64>, Vec<f64>)) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (xs, ws) = gl;
    if a == 0.0 || b == 0.0 {
        // u = |r|^{α+1} removes the endpoint singularity
        let sign = if b > 0.0 { 1.0 } else { -1.0 };
        let far = if b > 0.0 { b } else { -a };
        let top = far.powf(alpha + 1.0);
        let mut acc = 0.0;
        for (x, w) in xs.iter().zip(ws) {
            let u = 0.5 * top * (x + 1.0);
            acc += w * g(sign * u.powf(1.0 / (alpha + 1.0)));
        }
        0.5 * top * acc / (alpha + 1.0)
    } else {
        let mut acc = 0.0;
        for (x, w) in xs.iter().zip(ws) {
            let r = a + 0.5 * (b - a) * (x + 1.0);
            acc += w * r.abs().powf(alpha) * g(r);
        }
        0.5 * (b - a) * acc
    }
}

/// `H(2H−1)∫_{I_j}∫_{I_k}|u−v|^{2H−2} du dv` for grid cells of width `Δ`,
/// as a function of `j − k`.
fn kernel_cell(offset: i64, dt: f64, hurst: f64, gl: &(Vec<f64>, Vec<f64>)) -> f64 {
    let alpha = 2.0 * hurst - 2.0;
    let c = offset as f64 * dt;
    // overlap length of the two cells at lag r is Δ − |r − c|
    let w = move |r: f64| dt - (r - c).abs();
    let mut breaks = vec![c - dt, c, c + dt];
    if c - dt < 0.0 && 0.0 < c + dt && c != 0.0 {
        breaks.push(0.0);
    }
    breaks.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for p in breaks.windows(2) {
        total += singular_piece(p[0], p[1], alpha, &w, gl);
    }
    hurst * (2.0 * hurst - 1.0) * total
}

/// `γ` from the `|u−v|^{2H−2}` double-integral kernel (requires `H > 1/2`).
///
/// Cross-check of [`malliavin_matrix`]: the cell integrals are computed by
/// quadrature instead of the closed-form rectangle increments.
pub fn malliavin_matrix_kernel(rows: &MalliavinRows) -> Result<MalliavinMatrix> {
    let spec = rows.spec;
    if spec.hurst <= 0.5 {
        return Err(Error::domain(MODULE, "kernel representation needs H > 1/2"));
    }
    let gl = gauss_legendre(24);
    let m = spec.m;
    let lags: Vec<f64> = (0..m).map(|o| kernel_cell(o as i64, spec.dt(), spec.hurst, &gl)).collect();
    let kmat = DMatrix::from_fn(m, m, |a, b| lags[a.abs_diff(b)]);
    let n = rows.n;
    let mut gamma = DMatrix::zeros(n, n);
    for k in 0..spec.dim {
        let p = DMatrix::from_fn(m, n, |l, i| rows.value(k, i, l));
        gamma += p.transpose() * &kmat * p;
    }
    let gamma = (&gamma + gamma.transpose()) * 0.5;
    Ok(MalliavinMatrix { gamma, eps: rows.eps })
}

/// Time discretization of the β-system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaScheme {
    /// Explicit Euler with coefficients frozen at the left node of each step.
    FrozenEuler,
    /// Classical RK4, solved jointly with the state.
    Rk4,
}

/// `β^J_I` at every solver step: `b[k][(I, J)]`.
#[derive(Clone, Debug)]
pub struct BetaState {
    pub eps: f64,
    pub l: usize,
    pub steps: usize,
    pub steps_per_base: usize,
    pub b: Vec<DMatrix<f64>>,
}

/// `Ω_j(x)[I][K] = ε^{|I|+1−|K|} ω^K_{I*j}(x)`, one matrix per driver.
///
/// For `|I| < l` the word `I*j` is itself in the table and its expansion is
/// the trivial one.
fn omega_matrices(table: &BracketTable, x: &[f64], eps: f64) -> Result<Vec<DMatrix<f64>>> {
    let d = table.system().d;
    let na = table.words.len();
    let mut out = vec![DMatrix::zeros(na, na); d];
    let mut solver: Option<OmegaSolver> = None;
    for (ii, word) in table.words.iter().enumerate() {
        for (j, om) in out.iter_mut().enumerate() {
            let next = word.append(j);
            if word.len() < table.l {
                let kk = table.index_of(&next).expect("table is closed under extension");
                om[(ii, kk)] = 1.0;
                continue;
            }
            if solver.is_none() {
                solver = Some(OmegaSolver::at(table, x, OMEGA_TOL)?);
            }
            let sol = solver.as_ref().unwrap().solve(&table.value(&next, x)).map_err(|e| {
                Error::numerical(MODULE, format!("ω expansion of {next} failed at x = {x:?}: {e}"))
            })?;
            for (kk, c) in sol.coeffs.iter().enumerate() {
                let p = (word.len() + 1 - table.words[kk].len()) as i32;
                om[(ii, kk)] = eps.powi(p) * c;
            }
        }
    }
    Ok(out)
}

fn beta_rhs(omegas: &[DMatrix<f64>], slope: &[f64], b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(b.nrows(), b.nrows());
    for (om, &w) in omegas.iter().zip(slope) {
        if w != 0.0 {
            a -= om * w;
        }
    }
    a * b
}

/// Solve `dβ_I = −Σ_j Σ_K Ω_j[I][K] β_K db^j`, `β(0) = Id`, along `traj`.
///
/// `db` is the unscaled driver increment, i.e. the drive divided by `ε`.
pub fn beta_system(traj: &Trajectory, table: &BracketTable, eps: f64, scheme: BetaScheme) -> Result<BetaState> {
    let r = check_grid(traj)?;
    let sys = table.system();
    let na = table.words.len();
    let dt = 1.0 / traj.steps as f64;
    let unscaled = |k: usize| -> Vec<f64> {
        if eps == 0.0 {
            vec![0.0; sys.d]
        } else {
            traj.slope(k).iter().map(|w| w / eps).collect()
        }
    };
    let mut b = DMatrix::<f64>::identity(na, na);
    let mut out = Vec::with_capacity(traj.steps + 1);
    out.push(b.clone());
    match scheme {
        BetaScheme::FrozenEuler => {
            for k in 0..traj.steps {
                let slope = unscaled(k);
                if slope.iter().any(|w| *w != 0.0) {
                    let om = omega_matrices(table, traj.x_at(k), eps)?;
                    b += beta_rhs(&om, &slope, &b) * dt;
                }
                out.push(b.clone());
            }
        }
        BetaScheme::Rk4 => {
            let n = sys.n;
            let mut v = vec![0.0; n];
            let state_rhs = |x: &[f64], eff: &[f64], v: &mut Vec<f64>| -> Vec<f64> {
                let mut dx = vec![0.0; n];
                for (j, &w) in eff.iter().enumerate() {
                    if w != 0.0 {
                        sys.eval_field(j, x, v);
                        for i in 0..n {
                            dx[i] += w * v[i];
                        }
                    }
                }
                dx
            };
            let mut x = traj.x_at(0).to_vec();
            for k in 0..traj.steps {
                let eff = traj.slope(k);
                let slope = unscaled(k);
                if slope.iter().any(|w| *w != 0.0) {
                    let axpy = |a: &[f64], s: f64, d: &[f64]| -> Vec<f64> {
                        a.iter().zip(d).map(|(p, q)| p + s * q).collect()
                    };
                    let kx1 = state_rhs(&x, &eff, &mut v);
                    let kb1 = beta_rhs(&omega_matrices(table, &x, eps)?, &slope, &b);
                    let x2 = axpy(&x, 0.5 * dt, &kx1);
                    let kx2 = state_rhs(&x2, &eff, &mut v);
                    let kb2 = beta_rhs(&omega_matrices(table, &x2, eps)?, &slope, &(&b + &kb1 * (0.5 * dt)));
                    let x3 = axpy(&x, 0.5 * dt, &kx2);
                    let kx3 = state_rhs(&x3, &eff, &mut v);
                    let kb3 = beta_rhs(&omega_matrices(table, &x3, eps)?, &slope, &(&b + &kb2 * (0.5 * dt)));
                    let x4 = axpy(&x, dt, &kx3);
                    let kx4 = state_rhs(&x4, &eff, &mut v);
                    let kb4 = beta_rhs(&omega_matrices(table, &x4, eps)?, &slope, &(&b + &kb3 * dt));
                    for i in 0..n {
                        x[i] += dt / 6.0 * (kx1[i] + 2.0 * kx2[i] + 2.0 * kx3[i] + kx4[i]);
                    }
                    b += (kb1 + kb2 * 2.0 + kb3 * 2.0 + kb4) * (dt / 6.0);
                }
                out.push(b.clone());
            }
        }
    }
    Ok(BetaState { eps, l: table.l, steps: traj.steps, steps_per_base: r, b: out })
}

/// `max_{t, I} ‖J_t⁻¹V^ε_[I](X_t) − Σ_J β^J_I(t) V^ε_[J](x₀)‖`.
pub fn beta_identity_residual(traj: &Trajectory, beta: &BetaState, table: &BracketTable, eps: f64) -> Result<f64> {
    if beta.steps != traj.steps {
        return Err(Error::mismatch(MODULE, "β-system and trajectory have different step counts"));
    }
    let scale = DMatrix::from_diagonal(&DVector::from_iterator(
        table.words.len(),
        table.words.iter().map(|w| eps.powi(w.len() as i32 - 1)),
    ));
    let base = table.basis_matrix(traj.x_at(0)) * &scale;
    let mut worst: f64 = 0.0;
    for k in 0..=traj.steps {
        let lhs = traj.jinv_at(k) * table.basis_matrix(traj.x_at(k)) * &scale;
        let rhs = &base * beta.b[k].transpose();
        let diff = lhs - rhs;
        for c in 0..diff.ncols() {
            worst = worst.max(diff.column(c).norm());
        }
    }
    Ok(worst)
}

/// `M_{J,K} = Σ_i ⟨β^J_{(i)}, β^K_{(i)}⟩` over the single-letter rows.
#[derive(Clone, Debug)]
pub struct MMatrix {
    pub m: DMatrix<f64>,
    pub lambda_min: f64,
    /// Smallest eigenvalue on the range of `D_ε V(x₀)ᵀ`, the subspace the
    /// Malliavin matrix actually sees.
    pub lambda_min_range: f64,
}

pub fn m_matrix(beta: &BetaState, table: &BracketTable, x0: &[f64], q: &GramForm) -> Result<MMatrix> {
    let m = q.spec.m;
    if beta.steps != m * beta.steps_per_base {
        return Err(Error::mismatch(MODULE, "β-system and Gram form live on different grids"));
    }
    let na = table.words.len();
    let d = table.system().d;
    let mut mm = DMatrix::zeros(na, na);
    for i in 0..d {
        // rows J, left-endpoint coefficients of β^J_{(i)}
        let p = DMatrix::from_fn(na, m, |jj, l| beta.b[l * beta.steps_per_base][(i, jj)]);
        mm += &p * &q.q * p.transpose();
    }
    let mm = (&mm + mm.transpose()) * 0.5;
    let lambda_min = smallest_eigenvalue(mm.clone());
    let w = DMatrix::from_diagonal(&DVector::from_iterator(
        na,
        table.words.iter().map(|w| beta.eps.powi(w.len() as i32)),
    )) * table.basis_matrix(x0).transpose();
    let svd = w.svd(true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.max();
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&c| svd.singular_values[c] > 1e-12 * smax.max(1e-300))
        .collect();
    let lambda_min_range = if cols.is_empty() {
        0.0
    } else {
        let basis = u.select_columns(&cols);
        smallest_eigenvalue(basis.transpose() * &mm * basis)
    };
    Ok(MMatrix { m: mm, lambda_min, lambda_min_range })
}

/// One sample of the hypoelliptic lower-bound chain
/// `λ_min(γ) ≥ λ̂ ε^{2l} λ_min(M) σ_min(J₁)²`.
#[derive(Clone, Debug, Serialize)]
pub struct ChainSample {
    pub lambda_min_gamma: f64,
    pub lambda_min_m: f64,
    pub sigma_min_j1: f64,
    pub bound: f64,
    pub holds: bool,
}

pub const CHAIN_TOL: f64 = 1e-8;

pub fn hypoelliptic_chain(
    gamma: &MalliavinMatrix,
    m: &MMatrix,
    traj: &Trajectory,
    lambda_hat: f64,
    eps: f64,
    l: usize,
) -> ChainSample {
    let sigma = traj.j_at(traj.steps).singular_values().min();
    let lg = gamma.lambda_min();
    let bound = lambda_hat * eps.powi(2 * l as i32) * m.lambda_min_range * sigma * sigma;
    ChainSample {
        lambda_min_gamma: lg,
        lambda_min_m: m.lambda_min_range,
        sigma_min_j1: sigma,
        bound,
        holds: lg >= bound - CHAIN_TOL,
    }
}

/// Shared settings for ensemble probes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub hurst: f64,
    pub m: usize,
    pub substeps: usize,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub eps: f64,
    pub median: f64,
    pub q90: f64,
    pub q99: f64,
    pub degenerate: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub quantity: String,
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of log median against log ε.
    pub slope: f64,
    pub slope_stderr: f64,
}

/// Level probabilities reported per ε.
pub const SCALING_LEVELS: [f64; 3] = [0.5, 0.9, 0.99];

fn scaling_report(quantity: &str, eps_grid: &[f64], samples: Vec<Vec<f64>>) -> Result<ScalingReport> {
    let mut rows = Vec::with_capacity(eps_grid.len());
    for (&eps, vals) in eps_grid.iter().zip(samples) {
        let degenerate = vals.iter().filter(|v| !v.is_finite() || **v > 1e14).count();
        if degenerate > 0 {
            log::warn!("{quantity}: {degenerate} samples with smallest eigenvalue below 1e-14 at eps = {eps}");
        }
        let mut sorted = vals;
        sorted.sort_by(f64::total_cmp);
        rows.push(ScalingRow {
            eps,
            median: stats::quantile_sorted(&sorted, 0.5),
            q90: stats::quantile_sorted(&sorted, 0.9),
            q99: stats::quantile_sorted(&sorted, 0.99),
            degenerate,
        });
    }
    let (slope, slope_stderr) = if rows.len() >= 2 {
        let lx: Vec<f64> = rows.iter().map(|r| r.eps.ln()).collect();
        let ly: Vec<f64> = rows.iter().map(|r| r.median.ln()).collect();
        stats::slope_fit(&lx, &ly).unwrap_or((f64::NAN, f64::NAN))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ScalingReport { quantity: quantity.to_string(), rows, slope, slope_stderr })
}

fn check_probe(eps_grid: &[f64], s: &ProbeSettings) -> Result<()> {
    if s.n_samples < 100 {
        return Err(Error::domain(MODULE, "scaling probes need at least 100 samples"));
    }
    if eps_grid.is_empty() || eps_grid.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return Err(Error::domain(MODULE, "ε grid must be a nonempty subset of (0, 1]"));
    }
    Ok(())
}

/// Quantiles of `1/λ_min(γ)` per ε and the fitted log-log slope.
///
/// The same driver paths are reused for every ε.
pub fn inv_gamma_scaling(
    sys: &VectorFieldSystem,
    x0: &[f64],
    eps_grid: &[f64],
    s: &ProbeSettings,
) -> Result<ScalingReport> {
    check_probe(eps_grid, s)?;
    let spec = GridSpec::new(s.m, s.hurst, sys.d)?;
    let sampler = FbmSampler::new(spec, SamplingMethod::Circulant)?;
    let q = GramForm::load_or_build(spec, GramForm::cache_dir_from_env().as_deref())?;
    let mut all = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let vals: Result<Vec<f64>> = (0..s.n_samples)
            .into_par_iter()
            .map(|i| {
                let drive = Drive::new(spec, &sampler.sample_path(s.seed, i as u64), eps)?;
                let traj = solve_flow(&drive, sys, x0, s.substeps)?;
                let g = malliavin_matrix(&malliavin_rows(&traj, sys, eps)?, &q)?;
                let lam = g.lambda_min();
                Ok(if lam > 1e-14 { 1.0 / lam } else { f64::INFINITY })
            })
            .collect();
        all.push(vals?);
    }
    scaling_report("inv_lambda_min_gamma", eps_grid, all)
}

/// Result of the hypoelliptic probe at one ε.
#[derive(Clone, Debug, Serialize)]
pub struct ChainRow {
    pub eps: f64,
    pub samples: usize,
    pub holds: usize,
    pub fraction: f64,
    pub median_inv_lambda_m: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct HypoellipticProbe {
    pub level: usize,
    pub lambda_hat: f64,
    pub gamma_scaling: ScalingReport,
    pub chain: Vec<ChainRow>,
    pub m_scaling: ScalingReport,
}

/// Per-sample chain check, `1/λ_min(γ)` scaling and `1/λ_min(M)` stability.
///
/// `lambda_hat` must bound the bracket eigenvalue from below along the
/// trajectories (typically from [`crate::fields::hypo_check`]).
pub fn hypoelliptic_probe(
    table: &BracketTable,
    x0: &[f64],
    eps_grid: &[f64],
    lambda_hat: f64,
    s: &ProbeSettings,
) -> Result<HypoellipticProbe> {
    check_probe(eps_grid, s)?;
    let sys = table.system();
    let spec = GridSpec::new(s.m, s.hurst, sys.d)?;
    let sampler = FbmSampler::new(spec, SamplingMethod::Circulant)?;
    let q = GramForm::load_or_build(spec, GramForm::cache_dir_from_env().as_deref())?;
    let mut inv_g = Vec::new();
    let mut inv_m = Vec::new();
    let mut chain = Vec::new();
    for &eps in eps_grid {
        let res: Result<Vec<ChainSample>> = (0..s.n_samples)
            .into_par_iter()
            .map(|i| {
                let drive = Drive::new(spec, &sampler.sample_path(s.seed, i as u64), eps)?;
                let traj = solve_flow(&drive, sys, x0, s.substeps)?;
                let g = malliavin_matrix(&malliavin_rows(&traj, sys, eps)?, &q)?;
                let beta = beta_system(&traj, table, eps, BetaScheme::Rk4)?;
                let mm = m_matrix(&beta, table, x0, &q)?;
                Ok(hypoelliptic_chain(&g, &mm, &traj, lambda_hat, eps, table.l))
            })
            .collect();
        let res = res?;
        let holds = res.iter().filter(|c| c.holds).count();
        let im: Vec<f64> = res.iter().map(|c| inv_or_inf(c.lambda_min_m)).collect();
        let mut sorted = im.clone();
        sorted.sort_by(f64::total_cmp);
        chain.push(ChainRow {
            eps,
            samples: res.len(),
            holds,
            fraction: holds as f64 / res.len() as f64,
            median_inv_lambda_m: stats::quantile_sorted(&sorted, 0.5),
        });
        inv_g.push(res.iter().map(|c| inv_or_inf(c.lambda_min_gamma)).collect());
        inv_m.push(im);
    }
    Ok(HypoellipticProbe {
        level: table.l,
        lambda_hat,
        gamma_scaling: scaling_report("inv_lambda_min_gamma", eps_grid, inv_g)?,
        chain,
        m_scaling: scaling_report("inv_lambda_min_m", eps_grid, inv_m)?,
    })
}

fn inv_or_inf(v: f64) -> f64 {
    if v > 1e-14 {
        1.0 / v
    } else {
        f64::INFINITY
    }
}

/// CSV rows `eps,level,value,slope,slope_stderr`.
pub fn write_scaling_csv<W: Write>(report: &ScalingReport, mut w: W) -> Result<()> {
    writeln!(w, "eps,level,value,slope,slope_stderr")?;
    for r in &report.rows {
        for (level, v) in SCALING_LEVELS.iter().zip([r.median, r.q90, r.q99]) {
            writeln!(w, "{},{},{:e},{:e},{:e}", r.eps, level, v, report.slope, report.slope_stderr)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::build_bracket_table;
    use crate::hilbert::gram_matrix;
    use approx::assert_relative_eq;

    fn drive(m: usize, h: f64, d: usize, seed: u64, eps: f64) -> Drive {
        let spec = GridSpec::new(m, h, d).unwrap();
        let s = FbmSampler::new(spec, SamplingMethod::Cholesky).unwrap();
        Drive::new(spec, &s.sample_path(seed, 0), eps).unwrap()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(10);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(6)).sum();
        assert_relative_eq!(s, 2.0 / 7.0, epsilon = 1e-14);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn rows_for_constant_and_linear_fields() {
        let id = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let dr = drive(8, 0.5, 2, 1, 0.3);
        let tr = solve_flow(&dr, &id, &[0.0, 0.0], 2).unwrap();
        let rows = malliavin_rows(&tr, &id, 0.3).unwrap();
        for node in 0..=8 {
            assert_relative_eq!(rows.value(0, 0, node), 0.3);
            assert_relative_eq!(rows.value(1, 1, node), 0.3);
            assert_eq!(rows.value(0, 1, node), 0.0);
        }
        let q = gram_matrix(dr.spec).unwrap();
        let g = malliavin_matrix(&rows, &q).unwrap();
        assert_relative_eq!(g.gamma, DMatrix::identity(2, 2) * 0.09, epsilon = 1e-13);

        let zero = malliavin_rows(&tr, &id, 0.0).unwrap();
        assert!(zero.f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_linear_closed_form() {
        let sys = VectorFieldSystem::builtin("scalar-linear").unwrap();
        for h in [0.5, 0.7] {
            for seed in 0..5 {
                let eps = 0.5;
                let dr = drive(32, h, 1, seed, eps);
                let tr = solve_flow(&dr, &sys, &[1.3], 16).unwrap();
                let rows = malliavin_rows(&tr, &sys, eps).unwrap();
                let e = (dr.endpoint()[0]).exp();
                for node in 0..=32 {
                    assert_relative_eq!(rows.value(0, 0, node), eps * 1.3 * e, max_relative = 1e-9);
                }
                let q = gram_matrix(dr.spec).unwrap();
                let g = malliavin_matrix(&rows, &q).unwrap().gamma[(0, 0)];
                assert!((g - (eps * 1.3 * e).powi(2)).abs() < 1e-8, "{g}");
            }
        }
    }

    #[test]
    fn kernel_route_agrees_with_gram() {
        let sys = VectorFieldSystem::builtin("elliptic-perturbed").unwrap();
        for h in [0.6, 0.7, 0.9] {
            let dr = drive(32, h, 2, 3, 0.8);
            let tr = solve_flow(&dr, &sys, &[0.1, 0.2], 2).unwrap();
            let rows = malliavin_rows(&tr, &sys, 0.8).unwrap();
            let a = malliavin_matrix(&rows, &gram_matrix(dr.spec).unwrap()).unwrap();
            let b = malliavin_matrix_kernel(&rows).unwrap();
            assert!((a.gamma - b.gamma).amax() < 1e-4);
        }
        let dr = drive(8, 0.5, 2, 3, 0.8);
        let tr = solve_flow(&dr, &sys, &[0.1, 0.2], 1).unwrap();
        assert!(malliavin_matrix_kernel(&malliavin_rows(&tr, &sys, 0.8).unwrap()).is_err());
    }

    #[test]
    fn kernel_cells_match_rectangle_increments() {
        let gl = gauss_legendre(24);
        let (h, dt) = (0.7, 1.0 / 16.0);
        for off in 0..5 {
            let exact = crate::driver::rect(0.0, dt, off as f64 * dt, (off + 1) as f64 * dt, h);
            assert_relative_eq!(kernel_cell(off, dt, h, &gl), exact, max_relative = 1e-10);
        }
    }

    #[test]
    fn beta_trivial_cases() {
        let id = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let t = build_bracket_table(&id, 2).unwrap();
        let dr = drive(8, 0.5, 2, 5, 0.5);
        let tr = solve_flow(&dr, &id, &[0.0, 0.0], 2).unwrap();
        for scheme in [BetaScheme::FrozenEuler, BetaScheme::Rk4] {
            let beta = beta_system(&tr, &t, 0.5, scheme).unwrap();
            // the level-1 rows stay fixed; bracket rows pick up the level-2 words
            // but V_[J] = 0 for |J| = 2, so the identity is exact
            assert!(beta_identity_residual(&tr, &beta, &t, 0.5).unwrap() < 1e-14);
        }

        let one = VectorFieldSystem::builtin("elliptic-identity:1").unwrap();
        let t1 = build_bracket_table(&one, 1).unwrap();
        let dr = drive(8, 0.5, 1, 5, 1.0);
        let tr = solve_flow(&dr, &one, &[0.0], 1).unwrap();
        let beta = beta_system(&tr, &t1, 1.0, BetaScheme::FrozenEuler).unwrap();
        assert!(beta.b.iter().all(|b| b[(0, 0)] == 1.0));
        let q = gram_matrix(dr.spec).unwrap();
        let mm = m_matrix(&beta, &t1, &[0.0], &q).unwrap();
        assert_relative_eq!(mm.m[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_matrix_for_level_one_identity_fields() {
        let id = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let t = build_bracket_table(&id, 1).unwrap();
        let dr = drive(8, 0.5, 2, 2, 0.5);
        let tr = solve_flow(&dr, &id, &[0.0, 0.0], 1).unwrap();
        let beta = beta_system(&tr, &t, 0.5, BetaScheme::FrozenEuler).unwrap();
        let mm = m_matrix(&beta, &t, &[0.0, 0.0], &gram_matrix(dr.spec).unwrap()).unwrap();
        assert_relative_eq!(mm.m, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn zero_drive_residual_vanishes() {
        let sys = VectorFieldSystem::builtin("heisenberg-sin").unwrap();
        let t = build_bracket_table(&sys, 3).unwrap();
        let tr = solve_flow(&Drive::zero(GridSpec::new(8, 0.5, 2).unwrap()), &sys, &[0.2, 0.0, 0.0], 2).unwrap();
        let beta = beta_system(&tr, &t, 0.0, BetaScheme::FrozenEuler).unwrap();
        assert!(beta_identity_residual(&tr, &beta, &t, 0.0).unwrap() < 1e-15);
    }

    #[test]
    fn euler_residual_is_first_order() {
        let sys = VectorFieldSystem::builtin("heisenberg-sin").unwrap();
        let t = build_bracket_table(&sys, 3).unwrap();
        let eps = 0.5;
        let dr = drive(16, 0.5, 2, 7, eps);
        let res = |s: usize| {
            let tr = solve_flow(&dr, &sys, &[0.0; 3], s).unwrap();
            let beta = beta_system(&tr, &t, eps, BetaScheme::FrozenEuler).unwrap();
            beta_identity_residual(&tr, &beta, &t, eps).unwrap()
        };
        let ratio = res(8) / res(16);
        assert!((1.6..2.4).contains(&ratio), "ratio {ratio}");
        let tr = solve_flow(&dr, &sys, &[0.0; 3], 8).unwrap();
        let rk = beta_system(&tr, &t, eps, BetaScheme::Rk4).unwrap();
        assert!(beta_identity_residual(&tr, &rk, &t, eps).unwrap() < res(8) / 10.0);
    }

    #[test]
    fn chain_holds_on_heisenberg_samples() {
        let sys = VectorFieldSystem::builtin("heisenberg-sin").unwrap();
        let t = build_bracket_table(&sys, 3).unwrap();
        let x0 = [0.0; 3];
        for (seed, eps) in [(1, 1.0), (2, 0.5), (3, 0.25)] {
            let dr = drive(16, 0.5, 2, seed, eps);
            let tr = solve_flow(&dr, &sys, &x0, 4).unwrap();
            let q = gram_matrix(dr.spec).unwrap();
            let g = malliavin_matrix(&malliavin_rows(&tr, &sys, eps).unwrap(), &q).unwrap();
            let beta = beta_system(&tr, &t, eps, BetaScheme::Rk4).unwrap();
            let mm = m_matrix(&beta, &t, &x0, &q).unwrap();
            assert!(mm.lambda_min_range >= mm.lambda_min - 1e-12);
            let c = hypoelliptic_chain(&g, &mm, &tr, 0.5, eps, 3);
            assert!(c.holds, "{c:?}");
            assert!(c.bound > 0.0);
        }
    }
}
