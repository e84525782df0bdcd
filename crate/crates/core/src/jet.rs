//! Scalars for generic field evaluation: plain `f64` and hyper-dual numbers.
//!
//! A [`HyperDual`] carries `k` independent nilpotent infinitesimals
//! `e_0 … e_{k−1}` with `e_i² = 0`, stored as `2^k` coefficients indexed by
//! bitmask. Seeding a point `x + e_b·u` and reading back the `e_b`
//! coefficient gives the directional derivative along `u`; nesting fresh
//! infinitesimals gives mixed higher derivatives exactly, which is how Lie
//! brackets are differentiated without finite differences.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Maximum number of infinitesimals carried by a [`HyperDual`].
pub const MAX_BITS: usize = 12;

pub trait Scalar:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    /// Real part.
    fn re(&self) -> f64;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn tanh(&self) -> Self;
    fn powf(&self, p: f64) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn re(&self) -> f64 {
        *self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn powf(&self, p: f64) -> Self {
        if p.fract() == 0.0 && p.abs() < 64.0 {
            self.powi(p as i32)
        } else {
            f64::powf(*self, p)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperDual {
    coef: Vec<f64>,
}

impl HyperDual {
    pub fn constant(v: f64) -> Self {
        HyperDual { coef: vec![v] }
    }

    /// Number of infinitesimals carried.
    pub fn bits(&self) -> usize {
        self.coef.len().trailing_zeros() as usize
    }

    pub fn coef(&self, mask: usize) -> f64 {
        self.coef.get(mask).copied().unwrap_or(0.0)
    }

    fn extended(&self, bits: usize) -> Vec<f64> {
        let mut c = self.coef.clone();
        c.resize(1 << bits, 0.0);
        c
    }

    /// `self + e_bit · dir`; `dir` must not already involve `e_bit`.
    pub fn perturb(&self, bit: usize, dir: &HyperDual) -> HyperDual {
        assert!(bit < MAX_BITS, "hyper-dual depth exceeds {MAX_BITS}");
        let bits = self.bits().max(dir.bits()).max(bit + 1);
        let mut c = self.extended(bits);
        let flag = 1 << bit;
        for (mask, &d) in dir.coef.iter().enumerate() {
            debug_assert!(mask & flag == 0 || d == 0.0);
            if mask & flag == 0 {
                c[mask | flag] += d;
            }
        }
        HyperDual { coef: c }
    }

    /// Coefficient of `e_bit`, as a hyper-dual in the remaining infinitesimals.
    pub fn part(&self, bit: usize) -> HyperDual {
        let flag = 1 << bit;
        if self.coef.len() <= flag {
            return HyperDual::constant(0.0);
        }
        let mut c = vec![0.0; self.coef.len()];
        for mask in 0..self.coef.len() {
            if mask & flag == 0 {
                c[mask] = self.coef[mask | flag];
            }
        }
        if bit + 1 == self.bits() {
            c.truncate(flag);
        }
        HyperDual { coef: c }
    }

    /// `f(self)` from the derivatives `f^{(r)}(re)`, `r = 0..=bits`.
    fn compose(&self, derivs: &[f64]) -> HyperDual {
        let k = self.bits();
        let mut delta = self.clone();
        delta.coef[0] = 0.0;
        let mut out = HyperDual { coef: vec![0.0; self.coef.len()] };
        out.coef[0] = derivs[0];
        let mut power = HyperDual::constant(1.0);
        let mut fact = 1.0;
        for r in 1..=k {
            power = &power * &delta;
            fact *= r as f64;
            if power.coef.iter().all(|&v| v == 0.0) {
                break;
            }
            let w = derivs[r] / fact;
            for (o, p) in out.coef.iter_mut().zip(&power.coef) {
                *o += w * p;
            }
        }
        out
    }

    fn deriv_table(&self, f: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..=self.bits()).map(f).collect()
    }
}

impl<'a> Mul<&'a HyperDual> for &'a HyperDual {
    type Output = HyperDual;
    fn mul(self, rhs: &HyperDual) -> HyperDual {
        let bits = self.bits().max(rhs.bits());
        let n = 1usize << bits;
        let (a, b) = (&self.coef, &rhs.coef);
        let mut c = vec![0.0; n];
        for (s, out) in c.iter_mut().enumerate() {
            // enumerate submasks t of s
            let mut t = s;
            let mut acc = 0.0;
            loop {
                let u = s & !t;
                if t < a.len() && u < b.len() {
                    acc += a[t] * b[u];
                }
                if t == 0 {
                    break;
                }
                t = (t - 1) & s;
            }
            *out = acc;
        }
        HyperDual { coef: c }
    }
}

impl Add for HyperDual {
    type Output = HyperDual;
    fn add(self, rhs: HyperDual) -> HyperDual {
        let bits = self.bits().max(rhs.bits());
        let mut c = self.extended(bits);
        for (o, r) in c.iter_mut().zip(&rhs.coef) {
            *o += r;
        }
        HyperDual { coef: c }
    }
}

impl Sub for HyperDual {
    type Output = HyperDual;
    fn sub(self, rhs: HyperDual) -> HyperDual {
        self + (-rhs)
    }
}

impl Neg for HyperDual {
    type Output = HyperDual;
    fn neg(mut self) -> HyperDual {
        for c in &mut self.coef {
            *c = -*c;
        }
        self
    }
}

impl Mul for HyperDual {
    type Output = HyperDual;
    fn mul(self, rhs: HyperDual) -> HyperDual {
        &self * &rhs
    }
}

impl Div for HyperDual {
    type Output = HyperDual;
    fn div(self, rhs: HyperDual) -> HyperDual {
        let x = rhs.re();
        let inv = rhs.compose(&rhs.deriv_table(|r| {
            let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
            sign * factorial(r) / x.powi(r as i32 + 1)
        }));
        &self * &inv
    }
}

fn factorial(r: usize) -> f64 {
    (1..=r).map(|k| k as f64).product()
}

impl Scalar for HyperDual {
    fn cst(v: f64) -> Self {
        HyperDual::constant(v)
    }
    fn re(&self) -> f64 {
        self.coef[0]
    }
    fn sin(&self) -> Self {
        let x = self.re();
        self.compose(&self.deriv_table(|r| match r % 4 {
            0 => x.sin(),
            1 => x.cos(),
            2 => -x.sin(),
            _ => -x.cos(),
        }))
    }
    fn cos(&self) -> Self {
        let x = self.re();
        self.compose(&self.deriv_table(|r| match r % 4 {
            0 => x.cos(),
            1 => -x.sin(),
            2 => -x.cos(),
            _ => x.sin(),
        }))
    }
    fn exp(&self) -> Self {
        let e = self.re().exp();
        self.compose(&self.deriv_table(|_| e))
    }
    fn ln(&self) -> Self {
        let x = self.re();
        self.compose(&self.deriv_table(|r| {
            if r == 0 {
                x.ln()
            } else {
                let sign = if r % 2 == 1 { 1.0 } else { -1.0 };
                sign * factorial(r - 1) / x.powi(r as i32)
            }
        }))
    }
    fn sqrt(&self) -> Self {
        self.powf(0.5)
    }
    fn tanh(&self) -> Self {
        let two = HyperDual::constant(2.0);
        let e = (two * self.clone()).exp();
        (e.clone() - HyperDual::constant(1.0)) / (e + HyperDual::constant(1.0))
    }
    fn powf(&self, p: f64) -> Self {
        let x = self.re();
        self.compose(&self.deriv_table(|r| {
            let mut c = 1.0;
            for i in 0..r {
                c *= p - i as f64;
            }
            if c == 0.0 {
                0.0
            } else {
                c * x.powf(p - r as f64)
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn seeded(x: f64) -> HyperDual {
        HyperDual::constant(x).perturb(0, &HyperDual::constant(1.0))
    }

    #[test]
    fn first_derivatives() {
        let x = 0.7;
        let d = seeded(x);
        assert_relative_eq!(d.sin().part(0).re(), x.cos(), epsilon = 1e-15);
        assert_relative_eq!(d.exp().part(0).re(), x.exp(), epsilon = 1e-15);
        assert_relative_eq!(d.ln().part(0).re(), 1.0 / x, epsilon = 1e-15);
        assert_relative_eq!(d.sqrt().part(0).re(), 0.5 / x.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(d.tanh().part(0).re(), 1.0 - x.tanh().powi(2), epsilon = 1e-14);
        let q = HyperDual::constant(1.0) / d.clone();
        assert_relative_eq!(q.part(0).re(), -1.0 / (x * x), epsilon = 1e-14);
    }

    #[test]
    fn nested_second_derivative() {
        // d²/dx² sin(x) via two independent infinitesimals along the same direction
        let x = 0.3;
        let one = HyperDual::constant(1.0);
        let d = HyperDual::constant(x).perturb(0, &one).perturb(1, &one);
        let f = d.sin();
        assert_relative_eq!(f.coef(0b11), -x.sin(), epsilon = 1e-15);
        let g = d.clone() * d.clone() * d;
        assert_relative_eq!(g.coef(0b11), 6.0 * x, epsilon = 1e-14);
    }

    #[test]
    fn third_order_power() {
        let x = 1.7;
        let one = HyperDual::constant(1.0);
        let d = HyperDual::constant(x).perturb(0, &one).perturb(1, &one).perturb(2, &one);
        let f = d.powf(2.5);
        assert_relative_eq!(f.coef(0b111), 2.5 * 1.5 * 0.5 * x.powf(-0.5), epsilon = 1e-13);
    }
}
