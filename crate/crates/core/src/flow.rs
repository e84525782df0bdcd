//! State equation, Jacobian flow and inverse Jacobian along piecewise-linear
//! drives.
//!
//! On every sub-interval the drive is linear, so the equation is the smooth
//! ODE `ẋ = Σ_j V_j(x) ω_j` with a frozen slope `ω`; it is integrated with
//! the classical fourth-order Runge–Kutta method jointly with
//! `J̇ = A(x) J` and `d(J⁻¹)/dt = −J⁻¹ A(x)`, `A = Σ_j ω_j DV_j`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::driver::GridSpec;
use crate::error::{Error, Result};
use crate::fields::VectorFieldSystem;
use crate::hilbert::{embed_cm, step_kernel_row, CameronMartinPath, StepCoeffs};

const MODULE: &str = "flow";

/// Abort threshold for `‖X‖`.
pub const BLOWUP_NORM: f64 = 1e8;

/// Piecewise-linear drive on `nodes` uniform intervals of `[0, 1]`.
///
/// `values` are the effective values (already multiplied by `eps`),
/// component-major `dim × (nodes + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Drive {
    pub spec: GridSpec,
    pub nodes: usize,
    pub values: Vec<f64>,
    pub eps: f64,
}

impl Drive {
    /// `ε·w` for a path `w` sampled on the grid of `spec`.
    pub fn new(spec: GridSpec, path: &[f64], eps: f64) -> Result<Self> {
        spec.validate()?;
        if path.len() != spec.dim * (spec.m + 1) {
            return Err(Error::mismatch(
                MODULE,
                format!("drive needs {} values, got {}", spec.dim * (spec.m + 1), path.len()),
            ));
        }
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::domain(MODULE, format!("scale {eps} outside [0, 1]")));
        }
        for c in 0..spec.dim {
            if path[c * (spec.m + 1)].abs() > 1e-12 {
                return Err(Error::domain(MODULE, "drive must start at 0"));
            }
        }
        Ok(Drive { spec, nodes: spec.m, values: path.iter().map(|v| eps * v).collect(), eps })
    }

    pub fn zero(spec: GridSpec) -> Self {
        Drive { spec, nodes: spec.m, values: vec![0.0; spec.dim * (spec.m + 1)], eps: 1.0 }
    }

    /// `h` sampled at `m·refine` nodes.
    pub fn from_cm(h: &CameronMartinPath, refine: usize) -> Self {
        let spec = *h.spec();
        Drive { spec, nodes: spec.m * refine.max(1), values: h.values_refined(refine.max(1)), eps: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    #[inline]
    pub fn value(&self, c: usize, k: usize) -> f64 {
        self.values[c * (self.nodes + 1) + k]
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.nodes as f64
    }

    /// Increment over interval `k` (0-based) in every component.
    pub fn increment(&self, k: usize) -> Vec<f64> {
        (0..self.dim()).map(|c| self.value(c, k + 1) - self.value(c, k)).collect()
    }

    /// Endpoint `w(1)`.
    pub fn endpoint(&self) -> Vec<f64> {
        (0..self.dim()).map(|c| self.value(c, self.nodes)).collect()
    }

    /// The same piecewise-linear path on `factor` times as many nodes.
    pub fn refine(&self, factor: usize) -> Drive {
        let f = factor.max(1);
        let nodes = self.nodes * f;
        let mut values = vec![0.0; self.dim() * (nodes + 1)];
        for c in 0..self.dim() {
            for k in 0..=nodes {
                let (i, r) = (k / f, k % f);
                let a = self.value(c, i);
                values[c * (nodes + 1) + k] = if r == 0 {
                    a
                } else {
                    a + (self.value(c, i + 1) - a) * r as f64 / f as f64
                };
            }
        }
        Drive { spec: self.spec, nodes, values, eps: self.eps }
    }
}

/// Nodewise sum `b + h` at the nodes of `b`.
pub fn translate_drive(b: &Drive, h: &CameronMartinPath) -> Result<Drive> {
    let hs = h.spec();
    if hs.dim != b.dim() || hs.hurst != b.spec.hurst {
        return Err(Error::mismatch(MODULE, "translation path and drive have different specs"));
    }
    let mut out = b.clone();
    for k in 0..=b.nodes {
        let v = h.eval(b.time(k));
        for (c, vc) in v.iter().enumerate() {
            out.values[c * (b.nodes + 1) + k] += vc;
        }
    }
    Ok(out)
}

/// Solution of the state, Jacobian and inverse-Jacobian equations.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub n: usize,
    /// Number of solver steps.
    pub steps: usize,
    pub substeps: usize,
    /// Node-major `(steps + 1) × n`.
    pub x: Vec<f64>,
    /// Node-major `(steps + 1) × n × n`, row-major blocks.
    pub j: Vec<f64>,
    pub jinv: Vec<f64>,
    pub drive: Drive,
}

impl Trajectory {
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.n..(k + 1) * self.n]
    }

    pub fn j_at(&self, k: usize) -> DMatrix<f64> {
        let nn = self.n * self.n;
        DMatrix::from_row_slice(self.n, self.n, &self.j[k * nn..(k + 1) * nn])
    }

    pub fn jinv_at(&self, k: usize) -> DMatrix<f64> {
        let nn = self.n * self.n;
        DMatrix::from_row_slice(self.n, self.n, &self.jinv[k * nn..(k + 1) * nn])
    }

    pub fn endpoint(&self) -> &[f64] {
        self.x_at(self.steps)
    }

    /// Drive slope on solver step `k`.
    pub fn slope(&self, k: usize) -> Vec<f64> {
        let f = self.substeps;
        let inc = self.drive.increment(k / f);
        inc.iter().map(|v| v * self.drive.nodes as f64).collect()
    }

    /// Solver steps per interval of the drive's base grid.
    pub fn steps_per_base_interval(&self) -> usize {
        self.steps / self.drive.spec.m
    }

    /// `max_t ‖J(t)J⁻¹(t) − Id‖_∞`.
    pub fn inverse_defect(&self) -> f64 {
        let id = DMatrix::<f64>::identity(self.n, self.n);
        (0..=self.steps)
            .map(|k| (self.j_at(k) * self.jinv_at(k) - &id).amax())
            .fold(0.0, f64::max)
    }

    /// CSV rows `t,x_1..x_n[,J_11..J_nn]`.
    pub fn write_csv<W: Write>(&self, mut w: W, with_jacobian: bool) -> Result<()> {
        let n = self.n;
        let mut head = vec!["t".to_string()];
        head.extend((1..=n).map(|i| format!("x{i}")));
        if with_jacobian {
            for r in 1..=n {
                head.extend((1..=n).map(|c| format!("J{r}{c}")));
            }
        }
        writeln!(w, "{}", head.join(","))?;
        for k in 0..=self.steps {
            let mut row = vec![self.time(k).to_string()];
            row.extend(self.x_at(k).iter().map(|v| format!("{v:e}")));
            if with_jacobian {
                row.extend(self.j[k * n * n..(k + 1) * n * n].iter().map(|v| format!("{v:e}")));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// JSON header line, then `x`, `J`, `J⁻¹` as little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            format: &'a str,
            n: usize,
            steps: usize,
            substeps: usize,
            layout: &'a str,
        }
        let header = Header {
            format: "varadhan-trajectory-v1",
            n: self.n,
            steps: self.steps,
            substeps: self.substeps,
            layout: "x[node,i],J[node,i,j],Jinv[node,i,j]",
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in self.x.iter().chain(&self.j).chain(&self.jinv) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Right-hand side evaluator with scratch space.
struct Rhs<'a> {
    sys: &'a VectorFieldSystem,
    v: Vec<f64>,
    dv: Vec<f64>,
    a: Vec<f64>,
}

impl<'a> Rhs<'a> {
    fn new(sys: &'a VectorFieldSystem) -> Self {
        let n = sys.n;
        Rhs { sys, v: vec![0.0; n], dv: vec![0.0; n * n], a: vec![0.0; n * n] }
    }

    fn state(&mut self, omega: &[f64], x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (j, &w) in omega.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.sys.eval_field(j, x, &mut self.v);
            for (o, v) in out.iter_mut().zip(&self.v) {
                *o += w * v;
            }
        }
    }

    /// Derivative of `[x, J, J⁻¹]`.
    fn full(&mut self, omega: &[f64], s: &[f64], out: &mut [f64]) {
        let n = self.sys.n;
        let nn = n * n;
        let (x, rest) = s.split_at(n);
        let (jm, jinv) = rest.split_at(nn);
        let (ox, orest) = out.split_at_mut(n);
        self.state(omega, x, ox);
        self.a.fill(0.0);
        for (j, &w) in omega.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.sys.eval_jacobian(j, x, &mut self.dv);
            for (a, d) in self.a.iter_mut().zip(&self.dv) {
                *a += w * d;
            }
        }
        let (oj, oinv) = orest.split_at_mut(nn);
        for r in 0..n {
            for c in 0..n {
                let mut aj = 0.0;
                let mut ia = 0.0;
                for k in 0..n {
                    aj += self.a[r * n + k] * jm[k * n + c];
                    ia += jinv[r * n + k] * self.a[k * n + c];
                }
                oj[r * n + c] = aj;
                oinv[r * n + c] = -ia;
            }
        }
    }
}

fn rk4_step(
    f: &mut impl FnMut(&[f64], &mut [f64]),
    y: &mut [f64],
    dt: f64,
    k: &mut [Vec<f64>; 4],
    tmp: &mut [f64],
) {
    let len = y.len();
    f(y, &mut k[0]);
    for i in 0..len {
        tmp[i] = y[i] + 0.5 * dt * k[0][i];
    }
    f(tmp, &mut k[1]);
    for i in 0..len {
        tmp[i] = y[i] + 0.5 * dt * k[1][i];
    }
    f(tmp, &mut k[2]);
    for i in 0..len {
        tmp[i] = y[i] + dt * k[2][i];
    }
    f(tmp, &mut k[3]);
    for i in 0..len {
        y[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
}

fn check_inputs(drive: &Drive, sys: &VectorFieldSystem, x0: &[f64], substeps: usize) -> Result<()> {
    if substeps == 0 {
        return Err(Error::domain(MODULE, "substeps must be >= 1"));
    }
    if drive.dim() != sys.d {
        return Err(Error::mismatch(
            MODULE,
            format!("drive has {} components, system has {} fields", drive.dim(), sys.d),
        ));
    }
    if x0.len() != sys.n {
        return Err(Error::mismatch(MODULE, format!("x0 has {} coordinates, expected {}", x0.len(), sys.n)));
    }
    Ok(())
}

fn guard(x: &[f64], t: f64) -> Result<()> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm <= BLOWUP_NORM) {
        return Err(Error::numerical(MODULE, format!("blow-up: |X| = {norm:e} at t = {t}")));
    }
    Ok(())
}

/// Solve for `X`, `J`, `J⁻¹` with `substeps` RK4 steps per drive interval.
pub fn solve_flow(drive: &Drive, sys: &VectorFieldSystem, x0: &[f64], substeps: usize) -> Result<Trajectory> {
    check_inputs(drive, sys, x0, substeps)?;
    let n = sys.n;
    let nn = n * n;
    let steps = drive.nodes * substeps;
    let dt = 1.0 / steps as f64;
    let width = n + 2 * nn;
    let mut y = vec![0.0; width];
    y[..n].copy_from_slice(x0);
    for i in 0..n {
        y[n + i * n + i] = 1.0;
        y[n + nn + i * n + i] = 1.0;
    }
    let mut xs = Vec::with_capacity((steps + 1) * n);
    let mut js = Vec::with_capacity((steps + 1) * nn);
    let mut jinvs = Vec::with_capacity((steps + 1) * nn);
    let push = |y: &[f64], xs: &mut Vec<f64>, js: &mut Vec<f64>, jinvs: &mut Vec<f64>| {
        xs.extend_from_slice(&y[..n]);
        js.extend_from_slice(&y[n..n + nn]);
        jinvs.extend_from_slice(&y[n + nn..]);
    };
    push(&y, &mut xs, &mut js, &mut jinvs);
    let mut rhs = Rhs::new(sys);
    let mut k: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; width]);
    let mut tmp = vec![0.0; width];
    for i in 0..drive.nodes {
        let omega: Vec<f64> = drive.increment(i).iter().map(|v| v * drive.nodes as f64).collect();
        let still = omega.iter().all(|w| *w == 0.0);
        for s in 0..substeps {
            if !still {
                rk4_step(&mut |s, o| rhs.full(&omega, s, o), &mut y, dt, &mut k, &mut tmp);
                guard(&y[..n], (i * substeps + s + 1) as f64 * dt)?;
            }
            push(&y, &mut xs, &mut js, &mut jinvs);
        }
    }
    Ok(Trajectory { n, steps, substeps, x: xs, j: js, jinv: jinvs, drive: drive.clone() })
}

/// `X₁` only, without the Jacobian flows.
pub fn solve_endpoint(drive: &Drive, sys: &VectorFieldSystem, x0: &[f64], substeps: usize) -> Result<Vec<f64>> {
    check_inputs(drive, sys, x0, substeps)?;
    let n = sys.n;
    let dt = 1.0 / (drive.nodes * substeps) as f64;
    let mut y = x0.to_vec();
    let mut rhs = Rhs::new(sys);
    let mut k: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for i in 0..drive.nodes {
        let omega: Vec<f64> = drive.increment(i).iter().map(|v| v * drive.nodes as f64).collect();
        if omega.iter().all(|w| *w == 0.0) {
            continue;
        }
        for _ in 0..substeps {
            rk4_step(&mut |s, o| rhs.state(&omega, s, o), &mut y, dt, &mut k, &mut tmp);
        }
        guard(&y, drive.time(i + 1))?;
    }
    Ok(y)
}

/// Deterministic flow `Φ(h)`: the drive is `h` sampled at `m·substeps` nodes.
pub fn phi(psi: &StepCoeffs, sys: &VectorFieldSystem, x0: &[f64], substeps: usize) -> Result<Trajectory> {
    solve_flow(&Drive::from_cm(&embed_cm(psi), substeps), sys, x0, 1)
}

/// Per-step integrals `G_k = (1/Δt)∫_step J_s⁻¹ V_j(X_s) ds`, as `n × d` blocks.
///
/// Trapezoid rule with the endpoint-derivative correction; the derivative of
/// `J_s⁻¹V_j(X_s)` is `J_s⁻¹ Σ_i ω_i [V_i, V_j](X_s)`.
pub fn step_integrals(traj: &Trajectory, sys: &VectorFieldSystem) -> Vec<DMatrix<f64>> {
    let (n, d) = (sys.n, sys.d);
    let dt = 1.0 / traj.steps as f64;
    let mut vals = vec![vec![0.0; n]; d];
    let mut jacs = vec![vec![0.0; n * n]; d];
    let load = |x: &[f64], vals: &mut Vec<Vec<f64>>, jacs: &mut Vec<Vec<f64>>| {
        for j in 0..d {
            sys.eval_field(j, x, &mut vals[j]);
            sys.eval_jacobian(j, x, &mut jacs[j]);
        }
    };
    // Σ_i ω_i (DV_j V_i − DV_i V_j) for every j, column j of the result
    let drift = |omega: &[f64], vals: &[Vec<f64>], jacs: &[Vec<f64>]| {
        DMatrix::from_fn(n, d, |r, j| {
            let mut acc = 0.0;
            for (i, &w) in omega.iter().enumerate() {
                if w == 0.0 || i == j {
                    continue;
                }
                let mut b = 0.0;
                for c in 0..n {
                    b += jacs[j][r * n + c] * vals[i][c] - jacs[i][r * n + c] * vals[j][c];
                }
                acc += w * b;
            }
            acc
        })
    };
    let mut out = Vec::with_capacity(traj.steps);
    load(traj.x_at(0), &mut vals, &mut jacs);
    let mut left_vals = vals.clone();
    let mut left_jacs = jacs.clone();
    for k in 0..traj.steps {
        load(traj.x_at(k + 1), &mut vals, &mut jacs);
        let omega = traj.slope(k);
        let ja = traj.jinv_at(k);
        let jb = traj.jinv_at(k + 1);
        let va = DMatrix::from_fn(n, d, |r, j| left_vals[j][r]);
        let vb = DMatrix::from_fn(n, d, |r, j| vals[j][r]);
        let fa = &ja * va;
        let fb = &jb * vb;
        let mut g = (fa + fb) * 0.5;
        if omega.iter().any(|w| *w != 0.0) && d > 1 {
            let da = &ja * drift(&omega, &left_vals, &left_jacs);
            let db = &jb * drift(&omega, &vals, &jacs);
            g += (da - db) * (dt / 12.0);
        }
        out.push(g);
        std::mem::swap(&mut left_vals, &mut vals);
        std::mem::swap(&mut left_jacs, &mut jacs);
    }
    out
}

/// `J₁ Σ_k G_k Δ_k` for per-step increments `Δ_k ∈ ℝᵈ` of a driving path.
pub fn integrate_against(traj: &Trajectory, g: &[DMatrix<f64>], increments: &[Vec<f64>]) -> Vec<f64> {
    let n = traj.n;
    let mut acc = DVector::zeros(n);
    for (gk, dk) in g.iter().zip(increments) {
        acc += gk * DVector::from_column_slice(dk);
    }
    (traj.j_at(traj.steps) * acc).iter().copied().collect()
}

/// Increments of `h = embed_cm(ψ)` over the solver steps of `traj`.
pub fn cm_increments(traj: &Trajectory, h: &CameronMartinPath) -> Vec<Vec<f64>> {
    let mut prev = h.eval(0.0);
    (1..=traj.steps)
        .map(|k| {
            let cur = h.eval(traj.time(k));
            let inc = cur.iter().zip(&prev).map(|(a, b)| a - b).collect();
            prev = cur;
            inc
        })
        .collect()
}

/// Increments of every basis path `embed_cm(e_j)` over `steps` uniform steps:
/// `out[k][j]`, identical for every component.
pub fn basis_increments(spec: &GridSpec, steps: usize) -> Vec<Vec<f64>> {
    let mut prev = step_kernel_row(spec, 0.0);
    (1..=steps)
        .map(|k| {
            let cur = step_kernel_row(spec, k as f64 / steps as f64);
            let inc = cur.iter().zip(&prev).map(|(a, b)| a - b).collect();
            prev = cur;
            inc
        })
        .collect()
}

/// `𝐃_h X₁ = ε Σ_j ∫ J₁J_s⁻¹V_j(X_s) dh^j_s` for `h = embed_cm(ψ_dir)`.
pub fn directional_derivative(
    traj: &Trajectory,
    sys: &VectorFieldSystem,
    psi_dir: &StepCoeffs,
    eps: f64,
) -> Result<Vec<f64>> {
    if psi_dir.spec.dim != sys.d {
        return Err(Error::mismatch(MODULE, "direction has wrong driver dimension"));
    }
    let g = step_integrals(traj, sys);
    let inc = cm_increments(traj, &embed_cm(psi_dir));
    Ok(integrate_against(traj, &g, &inc).iter().map(|v| eps * v).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct ZLimitRow {
    pub eps: f64,
    pub error: f64,
    /// `error(ε) / error(previous ε)`; absent on the first row.
    pub ratio: Option<f64>,
}

/// `‖(Φ₁(εB+h) − Φ₁(h))/ε − Z(h)‖` along a decreasing `ε` sequence.
///
/// `b` is an unscaled drive on the base grid of `h`.
pub fn z_limit_check(
    psi: &StepCoeffs,
    b: &Drive,
    sys: &VectorFieldSystem,
    x0: &[f64],
    eps_seq: &[f64],
    substeps: usize,
) -> Result<Vec<ZLimitRow>> {
    if eps_seq.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return Err(Error::domain(MODULE, "ε values must lie in (0, 1]"));
    }
    if b.nodes != psi.spec.m || b.eps != 1.0 {
        return Err(Error::mismatch(MODULE, "z_limit_check needs an unscaled drive on the grid of h"));
    }
    let h = embed_cm(psi);
    let base = phi(psi, sys, x0, substeps)?;
    let g = step_integrals(&base, sys);
    let fine_b = b.refine(substeps);
    let inc: Vec<Vec<f64>> = (0..base.steps).map(|k| fine_b.increment(k)).collect();
    let z = integrate_against(&base, &g, &inc);
    let phi_h = base.endpoint().to_vec();
    let mut rows: Vec<ZLimitRow> = Vec::with_capacity(eps_seq.len());
    for &eps in eps_seq {
        let mut scaled = fine_b.clone();
        scaled.values.iter_mut().for_each(|v| *v *= eps);
        scaled.eps = eps;
        let shifted = translate_drive(&scaled, &h)?;
        let end = solve_endpoint(&shifted, sys, x0, 1)?;
        let error = end
            .iter()
            .zip(&phi_h)
            .zip(&z)
            .map(|((a, b), zc)| ((a - b) / eps - zc).powi(2))
            .sum::<f64>()
            .sqrt();
        let ratio = rows.last().map(|r| error / r.error);
        rows.push(ZLimitRow { eps, error, ratio });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{FbmSampler, SamplingMethod};
    use crate::hilbert::StepCoeffs;
    use approx::assert_relative_eq;

    fn spec(m: usize, h: f64, d: usize) -> GridSpec {
        GridSpec::new(m, h, d).unwrap()
    }

    fn sample_drive(spec: GridSpec, seed: u64, eps: f64) -> Drive {
        let s = FbmSampler::new(spec, SamplingMethod::Cholesky).unwrap();
        Drive::new(spec, &s.sample_path(seed, 0), eps).unwrap()
    }

    #[test]
    fn zero_drive_is_stationary() {
        let sys = VectorFieldSystem::builtin("heisenberg-sin").unwrap();
        let tr = solve_flow(&Drive::zero(spec(8, 0.5, 2)), &sys, &[0.1, 0.2, 0.3], 2).unwrap();
        for k in 0..=tr.steps {
            assert_eq!(tr.x_at(k), &[0.1, 0.2, 0.3]);
            assert_eq!(tr.j_at(k), DMatrix::identity(3, 3));
        }
    }

    #[test]
    fn constant_fields_integrate_the_drive() {
        let sys = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let sp = spec(16, 0.7, 2);
        let drive = sample_drive(sp, 3, 0.4);
        let tr = solve_flow(&drive, &sys, &[1.0, -1.0], 3).unwrap();
        for k in 0..=sp.m {
            let x = tr.x_at(k * 3);
            assert_relative_eq!(x[0], 1.0 + drive.value(0, k), epsilon = 1e-14);
            assert_relative_eq!(x[1], -1.0 + drive.value(1, k), epsilon = 1e-14);
        }
    }

    #[test]
    fn scalar_linear_matches_exponential() {
        let sys = VectorFieldSystem::builtin("scalar-linear").unwrap();
        let sp = spec(32, 0.5, 1);
        let drive = sample_drive(sp, 11, 1.0);
        let exact = drive.endpoint()[0].exp();
        let x1 = solve_flow(&drive, &sys, &[1.0], 4).unwrap().endpoint()[0];
        assert_relative_eq!(x1, exact, max_relative = 1e-6);
        assert_relative_eq!(solve_endpoint(&drive, &sys, &[1.0], 4).unwrap()[0], x1, epsilon = 1e-15);
    }

    #[test]
    fn rk4_order_on_heisenberg() {
        let sys = VectorFieldSystem::builtin("heisenberg-sin").unwrap();
        let drive = sample_drive(spec(8, 0.7, 2), 5, 1.0);
        let x0 = [0.3, 0.0, 0.0];
        let e = |s: usize| solve_endpoint(&drive, &sys, &x0, s).unwrap();
        let reference = e(256);
        let err = |s: usize| {
            e(s).iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let order = (err(2) / err(4)).log2();
        assert!(order > 3.5, "observed order {order}");
    }

    #[test]
    fn inverse_jacobian_consistency() {
        let sys = VectorFieldSystem::builtin("elliptic-perturbed").unwrap();
        let drive = sample_drive(spec(32, 0.5, 2), 7, 1.0);
        let tr = solve_flow(&drive, &sys, &[0.2, -0.4], 4).unwrap();
        assert!(tr.inverse_defect() < 1e-8, "{}", tr.inverse_defect());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let sys = VectorFieldSystem::builtin("heisenberg-sin").unwrap();
        let drive = sample_drive(spec(16, 0.7, 2), 9, 0.8);
        let x0 = [0.4, -0.2, 0.1];
        let j1 = solve_flow(&drive, &sys, &x0, 4).unwrap().j_at(64);
        let d = 1e-6;
        for c in 0..3 {
            let mut xp = x0;
            let mut xm = x0;
            xp[c] += d;
            xm[c] -= d;
            let fp = solve_endpoint(&drive, &sys, &xp, 4).unwrap();
            let fm = solve_endpoint(&drive, &sys, &xm, 4).unwrap();
            for r in 0..3 {
                let fd = (fp[r] - fm[r]) / (2.0 * d);
                assert!((fd - j1[(r, c)]).abs() <= 1e-5 * j1[(r, c)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn phi_oracles() {
        let sp = spec(16, 0.5, 1);
        let sys = VectorFieldSystem::builtin("scalar-linear").unwrap();
        let psi = StepCoeffs::new(sp, vec![2f64.ln(); 16]).unwrap();
        let tr = phi(&psi, &sys, &[1.0], 4).unwrap();
        assert_relative_eq!(tr.endpoint()[0], 2.0, epsilon = 1e-9);
        let zero = phi(&StepCoeffs::zeros(sp), &sys, &[1.0], 4).unwrap();
        assert_eq!(zero.endpoint(), &[1.0]);

        let id = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let sp2 = spec(8, 0.5, 2);
        let tr = phi(&StepCoeffs::ones(sp2), &id, &[0.0, 1.0], 2).unwrap();
        assert_relative_eq!(tr.endpoint()[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(tr.endpoint()[1], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn translation() {
        let sp = spec(8, 0.7, 2);
        let b = sample_drive(sp, 1, 0.5);
        let zero_h = embed_cm(&StepCoeffs::zeros(sp));
        assert_eq!(translate_drive(&b, &zero_h).unwrap(), b);
        let psi = StepCoeffs::new(sp, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let h = embed_cm(&psi);
        let t = translate_drive(&Drive::zero(sp), &h).unwrap();
        let hv = h.values();
        assert_eq!(t.values, hv);
        assert!(translate_drive(&b, &embed_cm(&StepCoeffs::zeros(spec(8, 0.5, 2)))).is_err());
    }

    #[test]
    fn directional_derivative_oracles() {
        // constant fields: ε h(1)
        let id = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let sp = spec(8, 0.7, 2);
        let drive = sample_drive(sp, 2, 0.3);
        let tr = solve_flow(&drive, &id, &[0.0, 0.0], 2).unwrap();
        let psi = StepCoeffs::new(sp, (0..16).map(|i| 1.0 - 0.1 * i as f64).collect()).unwrap();
        let dd = directional_derivative(&tr, &id, &psi, 0.3).unwrap();
        let h1 = embed_cm(&psi).eval(1.0);
        assert_relative_eq!(dd[0], 0.3 * h1[0], epsilon = 1e-13);
        assert_relative_eq!(dd[1], 0.3 * h1[1], epsilon = 1e-13);

        // scalar-linear along the zero drive: ε x0 h(1)
        let sl = VectorFieldSystem::builtin("scalar-linear").unwrap();
        let sp1 = spec(8, 0.5, 1);
        let tr = solve_flow(&Drive::zero(sp1), &sl, &[1.5], 2).unwrap();
        let psi1 = StepCoeffs::new(sp1, vec![0.7; 8]).unwrap();
        let dd = directional_derivative(&tr, &sl, &psi1, 0.25).unwrap();
        assert_relative_eq!(dd[0], 0.25 * 1.5 * embed_cm(&psi1).eval(1.0)[0], epsilon = 1e-13);
    }

    #[test]
    fn directional_derivative_matches_finite_differences() {
        for name in ["heisenberg-sin", "elliptic-perturbed"] {
            let sys = VectorFieldSystem::builtin(name).unwrap();
            let sp = spec(16, 0.7, 2);
            let x0 = vec![0.3; sys.n];
            let base = sample_drive(sp, 4, 0.7).refine(4);
            let psi = StepCoeffs::new(sp, (0..32).map(|i| ((i * 7) as f64).cos()).collect()).unwrap();
            let tr = solve_flow(&base, &sys, &x0, 1).unwrap();
            let dd = directional_derivative(&tr, &sys, &psi, 0.7).unwrap();
            let delta = 1e-4;
            let shifted = |s: f64| {
                let mut hs = psi.clone();
                hs.psi.iter_mut().for_each(|v| *v *= s * 0.7);
                solve_endpoint(&translate_drive(&base, &embed_cm(&hs)).unwrap(), &sys, &x0, 1).unwrap()
            };
            let (p, m) = (shifted(delta), shifted(-delta));
            for r in 0..sys.n {
                let fd = (p[r] - m[r]) / (2.0 * delta);
                assert!(
                    (fd - dd[r]).abs() <= 1e-5 * dd[r].abs().max(1e-2),
                    "{name}: fd {fd} vs {}",
                    dd[r]
                );
            }
        }
    }

    #[test]
    fn z_limit_examples() {
        let id = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let sp = spec(8, 0.5, 2);
        let b = sample_drive(sp, 8, 1.0);
        let psi = StepCoeffs::new(sp, vec![0.3; 16]).unwrap();
        let rows = z_limit_check(&psi, &b, &id, &[0.0, 0.0], &[0.5, 0.25], 2).unwrap();
        assert!(rows.iter().all(|r| r.error < 1e-12));

        let sys = VectorFieldSystem::builtin("heisenberg-sin").unwrap();
        let psi = StepCoeffs::new(sp, (0..16).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap();
        let eps: Vec<f64> = (0..5).map(|k| 0.2 / 2f64.powi(k)).collect();
        let rows = z_limit_check(&psi, &b, &sys, &[0.0; 3], &eps, 4).unwrap();
        for r in &rows[1..] {
            let q = r.ratio.unwrap();
            assert!((0.4..0.6).contains(&q), "ratio {q}");
        }
    }
}
