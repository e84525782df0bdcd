//! Small statistics helpers shared by the Monte Carlo modules.

use nalgebra::{DMatrix, DVector};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Linear-interpolation quantile (type 7) of unsorted data.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    v[lo] + frac * (v[hi] - v[lo])
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let en = (na * nb / (na + nb)).sqrt();
    (d, kolmogorov_sf((en + 0.12 + 0.11 / en) * d))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_sf(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * x * x).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Least-squares fit result.
#[derive(Clone, Debug)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    /// Covariance of the coefficients.
    pub cov: DMatrix<f64>,
    pub residual_ss: f64,
}

impl LinearFit {
    pub fn stderr(&self, k: usize) -> f64 {
        self.cov[(k, k)].max(0.0).sqrt()
    }
}

/// Weighted least squares `min Σ w_i (y_i − x_iᵀβ)²`.
///
/// With `known_variance` the weights are `1/σ²_i` and the coefficient
/// covariance is `(XᵀWX)⁻¹`; otherwise it is scaled by the residual variance.
pub fn least_squares(rows: &[Vec<f64>], y: &[f64], weights: Option<&[f64]>, known_variance: bool) -> Option<LinearFit> {
    let n = rows.len();
    let p = rows.first()?.len();
    if n < p {
        return None;
    }
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let w = DVector::from_fn(n, |i, _| weights.map_or(1.0, |w| w[i]));
    let xtw = DMatrix::from_fn(p, n, |j, i| x[(i, j)] * w[i]);
    let normal = &xtw * &x;
    let inv = normal.clone().try_inverse()?;
    let yv = DVector::from_column_slice(y);
    let beta = &inv * (&xtw * &yv);
    let resid = &yv - &x * &beta;
    let residual_ss: f64 = resid.iter().zip(w.iter()).map(|(r, w)| w * r * r).sum();
    let cov = if known_variance {
        inv
    } else if n > p {
        inv * (residual_ss / (n - p) as f64)
    } else {
        inv * f64::NAN
    };
    Some(LinearFit { coef: beta.iter().copied().collect(), cov, residual_ss })
}

/// Slope of `y` against `x` with its standard error.
pub fn slope_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let rows: Vec<Vec<f64>> = x.iter().map(|&xi| vec![1.0, xi]).collect();
    let fit = least_squares(&rows, y, None, false)?;
    Some((fit.coef[1], fit.stderr(1)))
}
