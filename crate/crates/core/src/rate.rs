//! Rate functions `d²(y)` and `d²_R(y)`: minimal Cameron–Martin energy of
//! controls steering the deterministic flow to `y`, optionally with the
//! deterministic Malliavin determinant bounded away from zero.
//!
//! Optimization runs in whitened coordinates `z_c = Lᵀψ_c` with `Q = LLᵀ`,
//! where the energy is `½|z|²`. The equality constraint is handled by an
//! augmented Lagrangian with L-BFGS inner solves, the determinant bound by a
//! logarithmic barrier.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::GridSpec;
use crate::error::{Error, Result};
use crate::fields::VectorFieldSystem;
use crate::flow::{basis_increments, phi, step_integrals};
use crate::hilbert::{GramForm, StepCoeffs};
use crate::malliavin::{malliavin_matrix, malliavin_rows};
use crate::optim::{lbfgs, LbfgsOptions};
use crate::rng;

const MODULE: &str = "rate";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateOptions {
    pub hurst: f64,
    /// Coarse-to-fine grid ladder.
    pub grids: Vec<usize>,
    pub substeps: usize,
    /// Random starts in addition to `ψ = 0`.
    pub restarts: usize,
    pub seed: u64,
    pub tol_c: f64,
    pub tol_g: f64,
    pub mu0: f64,
    pub max_outer: usize,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions {
            hurst: 0.5,
            grids: vec![8, 16, 32],
            substeps: 4,
            restarts: 8,
            seed: 0,
            tol_c: 1e-7,
            tol_g: 1e-5,
            mu0: 10.0,
            max_outer: 40,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RateResult {
    pub y: Vec<f64>,
    /// `+∞` (serialized as `null`) when no start reached the target.
    pub d2: f64,
    pub feasible: bool,
    pub psi_star: StepCoeffs,
    pub constraint_residual: f64,
    pub stationarity: f64,
    pub det_gamma: f64,
    pub restarts_used: usize,
    /// Energies on each grid of the ladder.
    pub grid_energies: Vec<f64>,
    /// `|d²(m_last) − d²(m_prev)|`.
    pub grid_delta: f64,
    pub restricted: bool,
    pub delta_det: Option<f64>,
}

/// `Φ₁(h)` and `∂Φ₁/∂ψ` (`n × d·m`, component-major columns).
pub fn objective_gradient(
    psi: &StepCoeffs,
    sys: &VectorFieldSystem,
    x0: &[f64],
    substeps: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if psi.spec.dim != sys.d {
        return Err(Error::mismatch(MODULE, "coefficients and system disagree on the driver dimension"));
    }
    let traj = phi(psi, sys, x0, substeps)?;
    let g = step_integrals(&traj, sys);
    let kinc = basis_increments(&psi.spec, traj.steps);
    let (n, m) = (sys.n, psi.spec.m);
    let mut acc = DMatrix::zeros(n, sys.d * m);
    for (gk, kk) in g.iter().zip(&kinc) {
        for c in 0..sys.d {
            for (i, &e) in kk.iter().enumerate() {
                if e == 0.0 {
                    continue;
                }
                for r in 0..n {
                    acc[(r, c * m + i)] += gk[(r, c)] * e;
                }
            }
        }
    }
    let jac = traj.j_at(traj.steps) * acc;
    Ok((traj.endpoint().to_vec(), jac))
}

/// `det γ_{Φ₁(h)}`, the deterministic Malliavin matrix at `ε = 1`.
pub fn det_gamma_phi(psi: &StepCoeffs, sys: &VectorFieldSystem, x0: &[f64], q: &GramForm, substeps: usize) -> Result<f64> {
    let traj = phi(psi, sys, x0, substeps)?;
    Ok(malliavin_matrix(&malliavin_rows(&traj, sys, 1.0)?, q)?.determinant())
}

struct Problem<'a> {
    sys: &'a VectorFieldSystem,
    x0: &'a [f64],
    y: &'a [f64],
    spec: GridSpec,
    q: GramForm,
    chol: Cholesky<f64, Dyn>,
    substeps: usize,
}

impl<'a> Problem<'a> {
    fn new(sys: &'a VectorFieldSystem, x0: &'a [f64], y: &'a [f64], m: usize, opts: &RateOptions) -> Result<Self> {
        let spec = GridSpec::new(m, opts.hurst, sys.d)?;
        let q = GramForm::load_or_build(spec, GramForm::cache_dir_from_env().as_deref())?;
        let chol = q
            .q
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical(MODULE, "Gram matrix not positive definite"))?;
        Ok(Problem { sys, x0, y, spec, q, chol, substeps: opts.substeps })
    }

    fn dim(&self) -> usize {
        self.spec.dim * self.spec.m
    }

    fn psi(&self, z: &[f64]) -> StepCoeffs {
        let m = self.spec.m;
        let lt = self.chol.l().transpose();
        let mut psi = Vec::with_capacity(z.len());
        for zc in z.chunks(m) {
            let v = lt
                .solve_upper_triangular(&DVector::from_column_slice(zc))
                .expect("Cholesky factor is nonsingular");
            psi.extend(v.iter());
        }
        StepCoeffs { spec: self.spec, psi }
    }

    fn z(&self, psi: &StepCoeffs) -> Vec<f64> {
        let m = self.spec.m;
        let lt = self.chol.l().transpose();
        let mut z = Vec::with_capacity(psi.psi.len());
        for pc in psi.psi.chunks(m) {
            z.extend((&lt * DVector::from_column_slice(pc)).iter());
        }
        z
    }

    /// Constraint `c = Φ₁ − y` and its Jacobian in `z`.
    fn constraint(&self, z: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let psi = self.psi(z);
        let (end, jpsi) = objective_gradient(&psi, self.sys, self.x0, self.substeps)?;
        let m = self.spec.m;
        let n = self.sys.n;
        let linv_t = self.chol.l().transpose();
        let mut jz = DMatrix::zeros(n, z.len());
        for c in 0..self.spec.dim {
            // ∂/∂z = ∂/∂ψ · L^{-T}
            let block = jpsi.columns(c * m, m).into_owned();
            let solved = linv_t
                .tr_solve_upper_triangular(&block.transpose())
                .expect("Cholesky factor is nonsingular")
                .transpose();
            jz.columns_mut(c * m, m).copy_from(&solved);
        }
        let c: Vec<f64> = end.iter().zip(self.y).map(|(a, b)| a - b).collect();
        Ok((c, jz))
    }

    fn log_det_margin(&self, z: &[f64], delta: f64) -> Result<f64> {
        let det = det_gamma_phi(&self.psi(z), self.sys, self.x0, &self.q, self.substeps)?;
        if det <= delta {
            return Err(Error::domain(MODULE, "determinant below threshold"));
        }
        Ok((det - delta).ln())
    }

    fn det(&self, z: &[f64]) -> Result<f64> {
        det_gamma_phi(&self.psi(z), self.sys, self.x0, &self.q, self.substeps)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
struct Candidate {
    z: Vec<f64>,
    energy: f64,
    residual: f64,
    stationarity: f64,
}

struct Barrier {
    delta: f64,
    tau0: f64,
    tau_min: f64,
}

/// Central-difference gradient of `log(det − δ)` in `z`.
fn log_det_gradient(p: &Problem, z: &[f64], delta: f64) -> Result<(f64, Vec<f64>)> {
    let v = p.log_det_margin(z, delta)?;
    let g = (0..z.len())
        .into_par_iter()
        .map(|i| {
            let h = 1e-6 * (1.0 + z[i].abs());
            let mut zt = z.to_vec();
            zt[i] = z[i] + h;
            let fp = p.log_det_margin(&zt, delta)?;
            zt[i] = z[i] - h;
            let fm = p.log_det_margin(&zt, delta)?;
            Ok((fp - fm) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((v, g))
}

fn augmented_lagrangian(p: &Problem, z0: &[f64], opts: &RateOptions, barrier: Option<&Barrier>) -> Result<Candidate> {
    let n = p.sys.n;
    let mut z = z0.to_vec();
    let mut lam = vec![0.0; n];
    let mut mu = opts.mu0;
    let mut tau = barrier.map(|b| b.tau0).unwrap_or(0.0);
    let mut prev_c = f64::INFINITY;
    let inner = LbfgsOptions { grad_tol: (opts.tol_g * 1e-2).max(1e-12), max_iter: 400, ..Default::default() };
    let mut last = None;
    for _ in 0..opts.max_outer {
        let objective = |zz: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (c, jz) = p.constraint(zz)?;
            let w: Vec<f64> = c.iter().zip(&lam).map(|(ci, li)| li + mu * ci).collect();
            let mut val = 0.5 * norm(zz).powi(2);
            for i in 0..n {
                val += lam[i] * c[i] + 0.5 * mu * c[i] * c[i];
            }
            let jw = jz.transpose() * DVector::from_column_slice(&w);
            let mut grad: Vec<f64> = zz.iter().zip(jw.iter()).map(|(a, b)| a + b).collect();
            if let Some(b) = barrier {
                let (ld, gld) = log_det_gradient(p, zz, b.delta)?;
                val -= tau * ld;
                grad.iter_mut().zip(&gld).for_each(|(g, d)| *g -= tau * d);
            }
            Ok((val, grad))
        };
        let r = lbfgs(objective, &z, &inner)?;
        z = r.x;
        let (c, jz) = p.constraint(&z)?;
        let cn = norm(&c);
        for i in 0..n {
            lam[i] += mu * c[i];
        }
        let jl = jz.transpose() * DVector::from_column_slice(&lam);
        let stationarity = z.iter().zip(jl.iter()).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
        last = Some(Candidate { z: z.clone(), energy: 0.5 * norm(&z).powi(2), residual: cn, stationarity });
        let barrier_done = barrier.is_none_or(|b| tau <= b.tau_min);
        // the barrier term shifts stationarity by τ∇log(det − δ); judge it on feasibility alone
        if cn <= opts.tol_c && barrier_done && (barrier.is_some() || stationarity <= opts.tol_g) {
            break;
        }
        if cn > 0.25 * prev_c {
            mu = (mu * 2.0).min(1e12);
        }
        prev_c = cn;
        if let Some(b) = barrier {
            tau = (tau * 0.3).max(b.tau_min);
        }
    }
    Ok(last.expect("at least one outer iteration"))
}

fn random_start(dim: usize, seed: u64, k: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, k as u64, 0x7261_7465);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
    let s = norm(&v);
    v.iter().map(|x| x / s).collect()
}

fn pick_best(cands: Vec<Candidate>, tol_c: f64) -> (Candidate, bool) {
    let feasible = cands.iter().any(|c| c.residual <= tol_c);
    let best = cands
        .into_iter()
        .filter(|c| !feasible || c.residual <= tol_c)
        .reduce(|a, b| {
            let better = if feasible { b.energy < a.energy } else { b.residual < a.residual };
            if better {
                b
            } else {
                a
            }
        })
        .expect("at least one start");
    (best, feasible)
}

fn check_inputs(y: &[f64], sys: &VectorFieldSystem, x0: &[f64], opts: &RateOptions) -> Result<()> {
    if y.len() != sys.n || x0.len() != sys.n {
        return Err(Error::mismatch(MODULE, format!("points must have {} coordinates", sys.n)));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain(MODULE, "target must be finite"));
    }
    if opts.grids.is_empty() || opts.grids.windows(2).any(|w| w[1] % w[0] != 0) {
        return Err(Error::domain(MODULE, "grid ladder must be nonempty with each grid refining the previous"));
    }
    Ok(())
}

fn finish(
    p: &Problem,
    best: Candidate,
    feasible: bool,
    energies: Vec<f64>,
    restarts_used: usize,
    delta_det: Option<f64>,
    y: &[f64],
) -> Result<RateResult> {
    let psi_star = p.psi(&best.z);
    let det_gamma = p.det(&best.z)?;
    let grid_delta = if energies.len() >= 2 {
        (energies[energies.len() - 1] - energies[energies.len() - 2]).abs()
    } else {
        0.0
    };
    Ok(RateResult {
        y: y.to_vec(),
        d2: if feasible { best.energy } else { f64::INFINITY },
        feasible,
        psi_star,
        constraint_residual: best.residual,
        stationarity: best.stationarity,
        det_gamma,
        restarts_used,
        grid_energies: energies,
        grid_delta,
        restricted: delta_det.is_some(),
        delta_det,
    })
}

/// `d²(y) = inf{½‖h‖² : Φ₁(h) = y}` over step-function controls.
pub fn minimize_energy(y: &[f64], sys: &VectorFieldSystem, x0: &[f64], opts: &RateOptions) -> Result<RateResult> {
    check_inputs(y, sys, x0, opts)?;
    let mut energies = Vec::new();
    let mut current: Option<(Candidate, StepCoeffs)> = None;
    let mut feasible = false;
    let mut problem = None;
    for &m in &opts.grids {
        let p = Problem::new(sys, x0, y, m, opts)?;
        let (best, ok) = match &current {
            None => {
                let mut starts = vec![vec![0.0; p.dim()]];
                starts.extend((0..opts.restarts).map(|k| random_start(p.dim(), opts.seed, k)));
                let cands: Vec<Candidate> = starts
                    .par_iter()
                    .map(|z0| augmented_lagrangian(&p, z0, opts, None))
                    .collect::<Result<_>>()?;
                pick_best(cands, opts.tol_c)
            }
            Some((_, psi)) => {
                let z0 = p.z(&psi.prolong(m / psi.spec.m)?);
                let c = augmented_lagrangian(&p, &z0, opts, None)?;
                let ok = c.residual <= opts.tol_c;
                (c, ok)
            }
        };
        energies.push(best.energy);
        feasible = ok;
        let psi = p.psi(&best.z);
        current = Some((best, psi));
        problem = Some(p);
    }
    let (best, _) = current.expect("nonempty ladder");
    let p = problem.expect("nonempty ladder");
    finish(&p, best, feasible, energies, opts.restarts + 1, None, y)
}

/// `d²_R(y)`: as [`minimize_energy`] with `det γ_{Φ₁(h)} ≥ δ_det`.
///
/// `warm` (typically the unrestricted minimizer) is tried as an extra start.
pub fn minimize_energy_restricted(
    y: &[f64],
    sys: &VectorFieldSystem,
    x0: &[f64],
    delta_det: f64,
    opts: &RateOptions,
    warm: Option<&StepCoeffs>,
) -> Result<RateResult> {
    check_inputs(y, sys, x0, opts)?;
    if !(delta_det > 0.0) {
        return Err(Error::domain(MODULE, "δ_det must be positive"));
    }
    let barrier = Barrier { delta: delta_det, tau0: 1e-2, tau_min: 1e-7 };
    let mut energies = Vec::new();
    let mut current: Option<StepCoeffs> = None;
    let mut feasible = false;
    let mut last = None;
    for &m in &opts.grids {
        let p = Problem::new(sys, x0, y, m, opts)?;
        let mut starts = Vec::new();
        match &current {
            None => {
                if let Some(w) = warm {
                    let f = m / w.spec.m.min(m);
                    if w.spec.m <= m && m % w.spec.m == 0 {
                        starts.push(p.z(&w.prolong(f)?));
                    }
                }
                starts.push(vec![0.0; p.dim()]);
                starts.extend((0..opts.restarts).map(|k| random_start(p.dim(), opts.seed, k)));
            }
            Some(psi) => starts.push(p.z(&psi.prolong(m / psi.spec.m)?)),
        }
        // move each start into the strictly feasible region of the barrier
        let starts: Vec<Vec<f64>> = starts
            .into_iter()
            .filter_map(|z| {
                let mut z = z;
                if z.iter().all(|v| *v == 0.0) {
                    z = random_start(p.dim(), opts.seed ^ 0x5eed, 0);
                }
                for _ in 0..8 {
                    if matches!(p.det(&z), Ok(d) if d > delta_det) {
                        return Some(z);
                    }
                    z.iter_mut().for_each(|v| *v *= 2.0);
                }
                None
            })
            .collect();
        if starts.is_empty() {
            return Err(Error::numerical(MODULE, format!("no start satisfies det ≥ {delta_det:e}")));
        }
        let cands: Vec<Candidate> = starts
            .par_iter()
            .map(|z0| augmented_lagrangian(&p, z0, opts, Some(&barrier)))
            .collect::<Result<_>>()?;
        let (best, ok) = pick_best(cands, opts.tol_c);
        energies.push(best.energy);
        feasible = ok;
        current = Some(p.psi(&best.z));
        last = Some((p, best));
    }
    let (p, best) = last.expect("nonempty ladder");
    finish(&p, best, feasible, energies, opts.restarts + 1, Some(delta_det), y)
}

/// CSV rows `y_1..y_n,d2,feasible,residual,det_gamma,grid_delta`.
pub fn write_rate_csv<W: Write>(results: &[RateResult], mut w: W) -> Result<()> {
    let n = results.first().map(|r| r.y.len()).unwrap_or(0);
    let mut head: Vec<String> = (1..=n).map(|i| format!("y{i}")).collect();
    head.extend(["d2", "feasible", "residual", "det_gamma", "grid_delta"].map(String::from));
    writeln!(w, "{}", head.join(","))?;
    for r in results {
        let mut row: Vec<String> = r.y.iter().map(|v| v.to_string()).collect();
        row.push(if r.feasible { format!("{:e}", r.d2) } else { "inf".into() });
        row.push(r.feasible.to_string());
        row.push(format!("{:e}", r.constraint_residual));
        row.push(format!("{:e}", r.det_gamma));
        row.push(format!("{:e}", r.grid_delta));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
