//! Fractional Brownian motion on uniform grids of `[0, 1]`.
//!
//! Paths are generated exactly on the grid: fractional Gaussian noise
//! increments are drawn either through a Cholesky factor of their Toeplitz
//! covariance or by circulant embedding, then cumulatively summed.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const MODULE: &str = "gaussian_driver";

/// Lower end of the admissible Hurst range.
pub const HURST_MIN: f64 = 0.25 + 1e-6;
/// Upper end of the admissible Hurst range.
pub const HURST_MAX: f64 = 1.0 - 1e-6;

/// Circulant eigenvalues below this are treated as a failed embedding.
pub const CIRCULANT_NEG_TOL: f64 = 1e-10;

/// Uniform grid `t_j = j/m` on `[0, 1]` carrying the driver parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of steps.
    pub m: usize,
    /// Hurst parameter.
    pub hurst: f64,
    /// Driver dimension.
    pub dim: usize,
}

impl GridSpec {
    pub fn new(m: usize, hurst: f64, dim: usize) -> Result<Self> {
        let spec = GridSpec { m, hurst, dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::domain(MODULE, format!("grid needs m >= 2, got {}", self.m)));
        }
        if self.dim < 1 {
            return Err(Error::domain(MODULE, "driver dimension must be >= 1"));
        }
        check_hurst(self.hurst)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 / self.m as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.m).map(|j| self.time(j)).collect()
    }

    /// Grid index of `t`, if `t` is a grid node.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t * self.m as f64;
        let j = x.round();
        if (x - j).abs() < 1e-9 && (0.0..=self.m as f64).contains(&j) {
            Some(j as usize)
        } else {
            None
        }
    }

    pub fn with_m(&self, m: usize) -> Result<Self> {
        GridSpec::new(m, self.hurst, self.dim)
    }
}

pub(crate) fn check_hurst(h: f64) -> Result<()> {
    if !(HURST_MIN..=HURST_MAX).contains(&h) || h.is_nan() {
        return Err(Error::domain(
            MODULE,
            format!("Hurst parameter {h} outside ({HURST_MIN}, {HURST_MAX})"),
        ));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(MODULE, format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `R(s, t)` without range checks.
#[inline]
pub(crate) fn cov(s: f64, t: f64, h: f64) -> f64 {
    let e = 2.0 * h;
    0.5 * (s.powf(e) + t.powf(e) - (t - s).abs().powf(e))
}

/// `E[(B_t - B_s)(B_v - B_u)]` without range checks.
#[inline]
pub(crate) fn rect(s: f64, t: f64, u: f64, v: f64, h: f64) -> f64 {
    cov(t, v, h) - cov(t, u, h) - cov(s, v, h) + cov(s, u, h)
}

/// Covariance `R(s, t) = ½(s^{2H} + t^{2H} − |t − s|^{2H})` of one component.
pub fn fbm_covariance(s: f64, t: f64, hurst: f64) -> Result<f64> {
    check_time(s)?;
    check_time(t)?;
    check_hurst(hurst)?;
    Ok(cov(s, t, hurst))
}

/// Rectangular increment `R^{st}_{uv}` of the covariance.
pub fn rect_increment(s: f64, t: f64, u: f64, v: f64, hurst: f64) -> Result<f64> {
    for x in [s, t, u, v] {
        check_time(x)?;
    }
    if s > t || u > v {
        return Err(Error::domain(
            MODULE,
            format!("disordered interval endpoints [{s}, {t}] x [{u}, {v}]"),
        ));
    }
    check_hurst(hurst)?;
    Ok(rect(s, t, u, v, hurst))
}

/// Autocovariance of unit-spaced fractional Gaussian noise at lag `k`.
pub(crate) fn fgn_autocov(k: usize, hurst: f64) -> f64 {
    let e = 2.0 * hurst;
    let k = k as f64;
    0.5 * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMethod {
    Cholesky,
    Circulant,
}

impl std::str::FromStr for SamplingMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cholesky" => Ok(SamplingMethod::Cholesky),
            "circulant" => Ok(SamplingMethod::Circulant),
            other => Err(Error::parse(MODULE, format!("unknown sampling method '{other}'"))),
        }
    }
}

enum Factor {
    Cholesky(DMatrix<f64>),
    Circulant { sqrt_eig: Vec<f64>, fft: Arc<dyn Fft<f64>> },
}

/// Precomputed square root of the increment covariance; draws single paths.
pub struct FbmSampler {
    spec: GridSpec,
    method: SamplingMethod,
    fell_back: bool,
    factor: Factor,
}

impl FbmSampler {
    pub fn new(spec: GridSpec, method: SamplingMethod) -> Result<Self> {
        spec.validate()?;
        match method {
            SamplingMethod::Cholesky => Self::cholesky(spec, false),
            SamplingMethod::Circulant => match Self::circulant(spec)? {
                Some(s) => Ok(s),
                None => {
                    log::warn!(
                        "circulant embedding not nonnegative for m={}, H={}; using cholesky",
                        spec.m,
                        spec.hurst
                    );
                    Self::cholesky(spec, true)
                }
            },
        }
    }

    fn cholesky(spec: GridSpec, fell_back: bool) -> Result<Self> {
        let m = spec.m;
        let scale = spec.dt().powf(2.0 * spec.hurst);
        let cov = DMatrix::from_fn(m, m, |i, j| scale * fgn_autocov(i.abs_diff(j), spec.hurst));
        let chol = cov.cholesky().ok_or_else(|| {
            Error::numerical(
                MODULE,
                format!("increment covariance not positive definite (m={}, H={})", m, spec.hurst),
            )
        })?;
        Ok(FbmSampler {
            spec,
            method: SamplingMethod::Cholesky,
            fell_back,
            factor: Factor::Cholesky(chol.l()),
        })
    }

    fn circulant(spec: GridSpec) -> Result<Option<Self>> {
        let m = spec.m;
        let size = 2 * m;
        let mut row: Vec<Complex<f64>> = (0..size)
            .map(|k| {
                let lag = if k <= m { k } else { size - k };
                Complex::new(fgn_autocov(lag, spec.hurst), 0.0)
            })
            .collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(size);
        fft.process(&mut row);
        let min = row.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
        if min < -CIRCULANT_NEG_TOL {
            return Ok(None);
        }
        let scale = spec.dt().powf(2.0 * spec.hurst);
        let sqrt_eig = row
            .iter()
            .map(|c| (c.re.max(0.0) * scale / size as f64).sqrt())
            .collect();
        Ok(Some(FbmSampler {
            spec,
            method: SamplingMethod::Circulant,
            fell_back: false,
            factor: Factor::Circulant { sqrt_eig, fft },
        }))
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Method actually in use.
    pub fn method(&self) -> SamplingMethod {
        self.method
    }

    /// True when a circulant request fell back to Cholesky.
    pub fn fell_back(&self) -> bool {
        self.fell_back
    }

    /// Writes one path, laid out component-major as `dim × (m+1)` values.
    pub fn sample_into(&self, seed: u64, path: u64, out: &mut [f64]) {
        let m = self.spec.m;
        debug_assert_eq!(out.len(), self.spec.dim * (m + 1));
        let mut incr = vec![0.0; m];
        for (c, row) in out.chunks_mut(m + 1).enumerate() {
            let mut rng = rng::stream(seed, path, c as u64);
            self.increments(&mut rng, &mut incr);
            row[0] = 0.0;
            let mut acc = 0.0;
            for j in 0..m {
                acc += incr[j];
                row[j + 1] = acc;
            }
        }
    }

    pub fn sample_path(&self, seed: u64, path: u64) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.dim * (self.spec.m + 1)];
        self.sample_into(seed, path, &mut out);
        out
    }

    fn increments<R: rand::Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let m = self.spec.m;
        match &self.factor {
            Factor::Cholesky(l) => {
                let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
                for i in 0..m {
                    let mut acc = 0.0;
                    for k in 0..=i {
                        acc += l[(i, k)] * z[k];
                    }
                    out[i] = acc;
                }
            }
            Factor::Circulant { sqrt_eig, fft } => {
                let mut w: Vec<Complex<f64>> = sqrt_eig
                    .iter()
                    .map(|&s| {
                        let re: f64 = StandardNormal.sample(rng);
                        let im: f64 = StandardNormal.sample(rng);
                        Complex::new(s * re, s * im)
                    })
                    .collect();
                fft.process(&mut w);
                for (o, c) in out.iter_mut().zip(&w) {
                    *o = c.re;
                }
            }
        }
    }
}

/// `N` independent grid paths of a `dim`-dimensional fBm.
#[derive(Clone, Debug, PartialEq)]
pub struct FbmEnsemble {
    pub spec: GridSpec,
    pub n_paths: usize,
    pub seed: u64,
    pub method: SamplingMethod,
    pub fell_back: bool,
    /// Path-major, then component, then grid node.
    pub paths: Vec<f64>,
}

impl FbmEnsemble {
    fn stride(&self) -> usize {
        self.spec.dim * (self.spec.m + 1)
    }

    /// All components of path `i`, component-major.
    pub fn path(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.paths[i * s..(i + 1) * s]
    }

    pub fn value(&self, i: usize, component: usize, node: usize) -> f64 {
        self.path(i)[component * (self.spec.m + 1) + node]
    }
}

/// Sample `n` fBm paths on the grid. The result depends only on
/// `(spec, n, seed, method)`, not on thread count.
pub fn sample_fbm(spec: GridSpec, n: usize, seed: u64, method: SamplingMethod) -> Result<FbmEnsemble> {
    if n == 0 {
        return Err(Error::domain(MODULE, "ensemble size must be >= 1"));
    }
    let sampler = FbmSampler::new(spec, method)?;
    let stride = spec.dim * (spec.m + 1);
    let mut paths = vec![0.0; n * stride];
    paths
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(i, out)| sampler.sample_into(seed, i as u64, out));
    Ok(FbmEnsemble {
        spec,
        n_paths: n,
        seed,
        method: sampler.method(),
        fell_back: sampler.fell_back(),
        paths,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRow {
    pub s: f64,
    pub t: f64,
    pub empirical: f64,
    pub exact: f64,
    pub stderr: f64,
    pub z: f64,
}

/// Compare empirical `E[B_s B_t]` with `R(s, t)`, pooling components.
///
/// The standard error uses the exact variance of the product of two centred
/// Gaussians, `R(s,s)R(t,t) + R(s,t)²`.
pub fn empirical_covariance_report(ens: &FbmEnsemble, pairs: &[(f64, f64)]) -> Result<Vec<CovarianceRow>> {
    let spec = ens.spec;
    let h = spec.hurst;
    let count = (ens.n_paths * spec.dim) as f64;
    pairs
        .iter()
        .map(|&(s, t)| {
            let (js, jt) = match (spec.index_of(s), spec.index_of(t)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::domain(MODULE, format!("pair ({s}, {t}) is not on the grid")))
                }
            };
            let mut sum = 0.0;
            for i in 0..ens.n_paths {
                for c in 0..spec.dim {
                    sum += ens.value(i, c, js) * ens.value(i, c, jt);
                }
            }
            let empirical = sum / count;
            let exact = cov(s, t, h);
            let var = cov(s, s, h) * cov(t, t, h) + exact * exact;
            let stderr = (var / count).sqrt();
            let z = if stderr > 0.0 {
                (empirical - exact) / stderr
            } else if (empirical - exact).abs() < 1e-15 {
                0.0
            } else {
                f64::INFINITY
            };
            Ok(CovarianceRow { s, t, empirical, exact, stderr, z })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    format: String,
    spec: GridSpec,
    seed: u64,
    method: SamplingMethod,
    fell_back: bool,
    n_paths: usize,
    layout: String,
}

const BINARY_FORMAT: &str = "varadhan-fbm-v1";

/// One JSON header line, then `n · dim · (m+1)` little-endian `f64` values.
pub fn write_binary<W: Write>(ens: &FbmEnsemble, mut w: W) -> Result<()> {
    let header = BinaryHeader {
        format: BINARY_FORMAT.to_string(),
        spec: ens.spec,
        seed: ens.seed,
        method: ens.method,
        fell_back: ens.fell_back,
        n_paths: ens.n_paths,
        layout: "path,component,node".to_string(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in &ens.paths {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: BufRead>(mut r: R) -> Result<FbmEnsemble> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: BinaryHeader = serde_json::from_str(line.trim_end())?;
    if header.format != BINARY_FORMAT {
        return Err(Error::parse(MODULE, format!("unexpected format '{}'", header.format)));
    }
    header.spec.validate()?;
    let len = header.n_paths * header.spec.dim * (header.spec.m + 1);
    let mut paths = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        paths.push(f64::from_le_bytes(buf));
    }
    Ok(FbmEnsemble {
        spec: header.spec,
        n_paths: header.n_paths,
        seed: header.seed,
        method: header.method,
        fell_back: header.fell_back,
        paths,
    })
}

/// Largest ensemble accepted by the CSV writer.
pub const CSV_MAX_PATHS: usize = 10_000;

/// Long-format CSV: `path,component,node,t,value`.
pub fn write_csv<W: Write>(ens: &FbmEnsemble, mut w: W) -> Result<()> {
    if ens.n_paths > CSV_MAX_PATHS {
        return Err(Error::domain(
            MODULE,
            format!("CSV export limited to {CSV_MAX_PATHS} paths, got {}", ens.n_paths),
        ));
    }
    writeln!(w, "path,component,node,t,value")?;
    let m = ens.spec.m;
    for i in 0..ens.n_paths {
        for c in 0..ens.spec.dim {
            for j in 0..=m {
                writeln!(w, "{},{},{},{},{:e}", i, c, j, ens.spec.time(j), ens.value(i, c, j))?;
            }
        }
    }
    Ok(())
}
