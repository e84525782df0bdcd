//! The reproducing-kernel space of the driver on step functions.
//!
//! An element of the space is stored by its coefficients on the indicators
//! of `(t_{j−1}, t_j]`. Inner products are exact through the Gram matrix of
//! rectangular covariance increments, and the Cameron–Martin path attached
//! to coefficients `ψ` is `h(t) = Σ_j ψ_j (R(t, t_j) − R(t, t_{j−1}))`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::driver::{cov, rect, GridSpec};
use crate::error::{Error, Result};

const MODULE: &str = "hilbert";

/// Smallest Gram eigenvalue accepted at construction.
pub const GRAM_MIN_EIG: f64 = 1e-12;
/// Largest grid accepted by the p-variation dynamic program.
pub const PVAR_MAX_NODES: usize = 2048;

/// Environment variable naming the Gram cache directory.
pub const GRAM_CACHE_ENV: &str = "VARADHAN_GRAM_CACHE";

/// Step-function coefficients, `dim × m`, component-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCoeffs {
    pub spec: GridSpec,
    pub psi: Vec<f64>,
}

impl StepCoeffs {
    pub fn new(spec: GridSpec, psi: Vec<f64>) -> Result<Self> {
        if psi.len() != spec.dim * spec.m {
            return Err(Error::mismatch(
                MODULE,
                format!("expected {} coefficients, got {}", spec.dim * spec.m, psi.len()),
            ));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(MODULE, "non-finite step coefficient"));
        }
        Ok(StepCoeffs { spec, psi })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        StepCoeffs { spec, psi: vec![0.0; spec.dim * spec.m] }
    }

    /// Indicator of `[0, 1]` in every component.
    pub fn ones(spec: GridSpec) -> Self {
        StepCoeffs { spec, psi: vec![1.0; spec.dim * spec.m] }
    }

    /// Single step `j` (1-based, the interval `(t_{j−1}, t_j]`) in `component`.
    pub fn unit(spec: GridSpec, component: usize, j: usize) -> Self {
        let mut s = Self::zeros(spec);
        s.psi[component * spec.m + j - 1] = 1.0;
        s
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let m = self.spec.m;
        &self.psi[c * m..(c + 1) * m]
    }

    /// The same step function written on a grid refined by `factor`.
    pub fn prolong(&self, factor: usize) -> Result<StepCoeffs> {
        let spec = self.spec.with_m(self.spec.m * factor)?;
        let psi = self.psi.iter().flat_map(|&v| std::iter::repeat_n(v, factor)).collect();
        Ok(StepCoeffs { spec, psi })
    }
}

/// `Q_{jk} = E[(B_{t_j} − B_{t_{j−1}})(B_{t_k} − B_{t_{k−1}})]`.
#[derive(Clone, Debug)]
pub struct GramForm {
    pub spec: GridSpec,
    pub q: DMatrix<f64>,
    pub min_eig: f64,
}

fn gram_entries(spec: &GridSpec) -> DMatrix<f64> {
    let h = spec.hurst;
    let t = spec.times();
    DMatrix::from_fn(spec.m, spec.m, |j, k| rect(t[j], t[j + 1], t[k], t[k + 1], h))
}

impl GramForm {
    fn from_matrix(spec: GridSpec, q: DMatrix<f64>) -> Result<Self> {
        let min_eig = SymmetricEigen::new(q.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig <= GRAM_MIN_EIG {
            return Err(Error::numerical(
                MODULE,
                format!("Gram matrix ill-conditioned: smallest eigenvalue {min_eig:e} (m={}, H={})", spec.m, spec.hurst),
            ));
        }
        Ok(GramForm { spec, q, min_eig })
    }

    /// Build from `Q_{jk}`, or reuse a checksummed copy from `cache_dir`.
    pub fn load_or_build(spec: GridSpec, cache_dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = cache_dir else {
            return gram_matrix(spec);
        };
        let path = cache_path(dir, &spec);
        if let Ok(file) = fs::File::open(&path) {
            match read_cached(BufReader::new(file), &spec) {
                Ok(q) => return Self::from_matrix(spec, q),
                Err(e) => log::warn!("discarding Gram cache {}: {e}", path.display()),
            }
        }
        let g = gram_matrix(spec)?;
        fs::create_dir_all(dir)?;
        write_cached(&g, fs::File::create(&path)?)?;
        Ok(g)
    }

    /// Cache directory from the environment, if set.
    pub fn cache_dir_from_env() -> Option<PathBuf> {
        std::env::var_os(GRAM_CACHE_ENV).map(PathBuf::from)
    }

    /// `Σ_c ψ_cᵀ Q φ_c` over coefficient blocks of any common dimension.
    pub fn inner_raw(&self, psi: &[f64], phi: &[f64]) -> f64 {
        let m = self.spec.m;
        debug_assert_eq!(psi.len() % m, 0);
        psi.chunks(m)
            .zip(phi.chunks(m))
            .map(|(a, b)| {
                let mut acc = 0.0;
                for j in 0..m {
                    if a[j] == 0.0 {
                        continue;
                    }
                    let mut row = 0.0;
                    for k in 0..m {
                        row += self.q[(j, k)] * b[k];
                    }
                    acc += a[j] * row;
                }
                acc
            })
            .sum()
    }

    /// `Qψ` per component.
    pub fn apply(&self, psi: &[f64]) -> Vec<f64> {
        let m = self.spec.m;
        let mut out = vec![0.0; psi.len()];
        for (src, dst) in psi.chunks(m).zip(out.chunks_mut(m)) {
            let v = &self.q * DVector::from_column_slice(src);
            dst.copy_from_slice(v.as_slice());
        }
        out
    }
}

/// Gram matrix of the grid indicators.
pub fn gram_matrix(spec: GridSpec) -> Result<GramForm> {
    spec.validate()?;
    GramForm::from_matrix(spec, gram_entries(&spec))
}

fn cache_path(dir: &Path, spec: &GridSpec) -> PathBuf {
    dir.join(format!("gram_m{}_h{:016x}.bin", spec.m, spec.hurst.to_bits()))
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    m: usize,
    hurst: f64,
    sha256: String,
}

fn payload(q: &DMatrix<f64>) -> Vec<u8> {
    q.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_cached<W: Write>(g: &GramForm, mut w: W) -> Result<()> {
    let bytes = payload(&g.q);
    let header = CacheHeader {
        m: g.spec.m,
        hurst: g.spec.hurst,
        sha256: hex(&Sha256::digest(&bytes)),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    w.write_all(&bytes)?;
    Ok(())
}

fn read_cached<R: BufRead>(mut r: R, spec: &GridSpec) -> Result<DMatrix<f64>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CacheHeader = serde_json::from_str(line.trim_end())?;
    if header.m != spec.m || header.hurst.to_bits() != spec.hurst.to_bits() {
        return Err(Error::mismatch(MODULE, "cache key does not match grid"));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * spec.m * spec.m || hex(&Sha256::digest(&bytes)) != header.sha256 {
        return Err(Error::numerical(MODULE, "Gram cache checksum mismatch"));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(DMatrix::from_column_slice(spec.m, spec.m, &vals))
}

fn check_same(a: &GridSpec, b: &GridSpec) -> Result<()> {
    if a != b {
        return Err(Error::mismatch(MODULE, format!("grid {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `⟨ψ, φ⟩` in the step-function space.
pub fn inner_h(psi: &StepCoeffs, phi: &StepCoeffs, q: &GramForm) -> Result<f64> {
    check_same(&psi.spec, &phi.spec)?;
    check_same(&psi.spec, &q.spec)?;
    Ok(q.inner_raw(&psi.psi, &phi.psi))
}

/// `‖ψ‖²`, which equals the squared Cameron–Martin norm of `embed_cm(ψ)`.
pub fn cm_norm_sq(psi: &StepCoeffs, q: &GramForm) -> Result<f64> {
    Ok(inner_h(psi, psi, q)?.max(0.0))
}

/// Cameron–Martin path `h = Rψ`, evaluable at any time in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameronMartinPath {
    pub psi: StepCoeffs,
}

pub fn embed_cm(psi: &StepCoeffs) -> CameronMartinPath {
    CameronMartinPath { psi: psi.clone() }
}

/// `R(t, t_j) − R(t, t_{j−1})` for `j = 1..=m`.
pub fn step_kernel_row(spec: &GridSpec, t: f64) -> Vec<f64> {
    let h = spec.hurst;
    (1..=spec.m)
        .map(|j| cov(t, spec.time(j), h) - cov(t, spec.time(j - 1), h))
        .collect()
}

impl CameronMartinPath {
    pub fn spec(&self) -> &GridSpec {
        &self.psi.spec
    }

    /// `h(t)` in every component.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let spec = self.psi.spec;
        let row = step_kernel_row(&spec, t);
        (0..spec.dim)
            .map(|c| self.psi.component(c).iter().zip(&row).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Values at `t_k = k/(m·refine)`, component-major `dim × (m·refine + 1)`.
    pub fn values_refined(&self, refine: usize) -> Vec<f64> {
        let spec = self.psi.spec;
        let nodes = spec.m * refine;
        let mut out = vec![0.0; spec.dim * (nodes + 1)];
        for k in 0..=nodes {
            let v = self.eval(k as f64 / nodes as f64);
            for c in 0..spec.dim {
                out[c * (nodes + 1) + k] = v[c];
            }
        }
        out
    }

    /// Values on the base grid.
    pub fn values(&self) -> Vec<f64> {
        self.values_refined(1)
    }
}

/// Coefficients of `⟨1_{[0,t0]}, ·⟩` against the grid indicators.
pub fn evaluation_functional(spec: &GridSpec, t0: f64) -> Vec<f64> {
    step_kernel_row(spec, t0)
}

/// `ψ` with `⟨ψ, 1_j⟩ = e_j`, i.e. the Gram solve `Qψ = e` for one component.
pub fn gram_solve(q: &GramForm, rhs: &[f64]) -> Result<Vec<f64>> {
    let chol = q
        .q
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical(MODULE, "Gram matrix not positive definite"))?;
    Ok(chol.solve(&DVector::from_column_slice(rhs)).iter().copied().collect())
}

/// p-variation over grid subdivisions together with a maximizing partition.
#[derive(Clone, Debug, PartialEq)]
pub struct PVariation {
    pub value: f64,
    pub partition: Vec<usize>,
}

/// Exact p-variation of a grid path over subdivisions of its nodes.
///
/// `points` is node-major with `dim` coordinates per node; increments are
/// measured in the Euclidean norm.
pub fn pvar_norm(points: &[f64], dim: usize, p: f64) -> Result<PVariation> {
    if p < 1.0 || p.is_nan() {
        return Err(Error::domain(MODULE, format!("p-variation needs p >= 1, got {p}")));
    }
    if dim == 0 || points.len() % dim != 0 || points.is_empty() {
        return Err(Error::domain(MODULE, "path must have at least one node"));
    }
    let n = points.len() / dim;
    if n > PVAR_MAX_NODES + 1 {
        return Err(Error::domain(MODULE, format!("p-variation limited to {PVAR_MAX_NODES} steps")));
    }
    let dist = |i: usize, j: usize| -> f64 {
        (0..dim)
            .map(|c| (points[j * dim + c] - points[i * dim + c]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut best = vec![0.0; n];
    let mut prev = vec![0usize; n];
    for j in 1..n {
        let (mut b, mut arg) = (f64::NEG_INFINITY, 0);
        for i in 0..j {
            let v = best[i] + dist(i, j).powf(p);
            if v > b {
                b = v;
                arg = i;
            }
        }
        best[j] = b;
        prev[j] = arg;
    }
    let mut partition = vec![n - 1];
    let mut k = n - 1;
    while k > 0 {
        k = prev[k];
        partition.push(k);
    }
    partition.reverse();
    Ok(PVariation { value: best[n - 1].powf(1.0 / p), partition })
}

/// `(Σ_{i,j} |R^{s_i s_{i+1}}_{s_j s_{j+1}}|^ρ)^{1/ρ}` for one partition used on both axes.
pub fn rho_sum_partition(spec: &GridSpec, partition: &[usize], rho: f64) -> f64 {
    let h = spec.hurst;
    let t: Vec<f64> = partition.iter().map(|&k| spec.time(k)).collect();
    let mut acc = 0.0;
    for i in 0..t.len().saturating_sub(1) {
        for j in 0..t.len() - 1 {
            acc += rect(t[i], t[i + 1], t[j], t[j + 1], h).abs().powf(rho);
        }
    }
    acc.powf(1.0 / rho)
}

/// Lower bound for the 2-d ρ-variation of the covariance on the grid.
///
/// The supremum is taken over diagonal partition pairs drawn from: every
/// uniform partition of the grid, a greedy node-removal search started from
/// the full grid, and any caller-supplied `candidates`.
pub fn rho_variation_2d(spec: &GridSpec, rho: f64, candidates: &[Vec<usize>]) -> Result<f64> {
    if rho < 1.0 {
        return Err(Error::domain(MODULE, format!("ρ-variation needs ρ >= 1, got {rho}")));
    }
    let m = spec.m;
    let mut best: f64 = 0.0;
    for step in 1..=m {
        let mut part: Vec<usize> = (0..=m).step_by(step).collect();
        if *part.last().expect("nonempty") != m {
            part.push(m);
        }
        best = best.max(rho_sum_partition(spec, &part, rho));
    }
    for c in candidates {
        best = best.max(rho_sum_partition(spec, c, rho));
    }
    let mut part: Vec<usize> = (0..=m).collect();
    let mut current = rho_sum_partition(spec, &part, rho);
    loop {
        let mut improved = None;
        for idx in 1..part.len() - 1 {
            let mut trial = part.clone();
            trial.remove(idx);
            let v = rho_sum_partition(spec, &trial, rho);
            if v > current * (1.0 + 1e-14) && improved.is_none_or(|(_, b)| v > b) {
                improved = Some((idx, v));
            }
        }
        match improved {
            Some((idx, v)) => {
                part.remove(idx);
                current = v;
            }
            None => break,
        }
    }
    Ok(best.max(current))
}
