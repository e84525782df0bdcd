//! Driving vector fields, words, iterated Lie brackets and the uniform
//! hypoellipticity check.
//!
//! Brackets follow the convention `[U, W] = DW·U − DU·W` and the recursion
//! `V_[j] = V_j`, `V_[I*j] = [V_[I], V_j]`. Derivatives inside the recursion
//! are exact: each level seeds a fresh hyper-dual infinitesimal.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{self, Expr};
use crate::jet::{HyperDual, Scalar, MAX_BITS};
use crate::rng;

const MODULE: &str = "fields";

/// Names accepted by [`VectorFieldSystem::builtin`].
pub const BUILTIN_SYSTEMS: &[&str] = &[
    "elliptic-identity",
    "elliptic-perturbed",
    "scalar-linear",
    "heisenberg-sin",
    "degenerate-line",
];

/// `d` smooth vector fields on `ℝⁿ` given by closed-form expressions.
#[derive(Clone, Debug)]
pub struct VectorFieldSystem {
    pub name: String,
    pub n: usize,
    pub d: usize,
    /// Source text, `d × n`.
    pub sources: Vec<Vec<String>>,
    fields: Vec<Vec<Expr>>,
    /// `jac[i][r][c] = ∂V_i^r/∂x_c`
    jac: Vec<Vec<Vec<Expr>>>,
    /// Fields that are not bounded with bounded derivatives (oracle systems).
    pub test_only: bool,
    /// Box used by the default hypoellipticity sampler.
    pub domain_lo: Vec<f64>,
    pub domain_hi: Vec<f64>,
}

impl VectorFieldSystem {
    /// Build from one expression per component of each field.
    pub fn from_sources(name: &str, n: usize, sources: &[Vec<String>]) -> Result<Self> {
        if n == 0 || sources.is_empty() {
            return Err(Error::domain(MODULE, "need n >= 1 and at least one field"));
        }
        let mut fields = Vec::with_capacity(sources.len());
        for (i, comps) in sources.iter().enumerate() {
            if comps.len() != n {
                return Err(Error::mismatch(
                    MODULE,
                    format!("field {} has {} components, expected {n}", i + 1, comps.len()),
                ));
            }
            fields.push(comps.iter().map(|s| Expr::parse(s, n)).collect::<Result<Vec<_>>>()?);
        }
        let jac = fields
            .iter()
            .map(|f| f.iter().map(|e| (0..n).map(|c| e.diff(c)).collect()).collect())
            .collect();
        Ok(VectorFieldSystem {
            name: name.to_string(),
            n,
            d: sources.len(),
            sources: sources.to_vec(),
            fields,
            jac,
            test_only: false,
            domain_lo: vec![-2.0; n],
            domain_hi: vec![2.0; n],
        })
    }

    /// Built-in systems. `elliptic-identity` takes an optional `:k` dimension
    /// suffix (default 2).
    pub fn builtin(name: &str) -> Result<Self> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let (base, arg) = match name.split_once(':') {
            Some((b, a)) => (b, Some(a)),
            None => (name, None),
        };
        let mut sys = match base {
            "elliptic-identity" => {
                let k: usize = match arg {
                    Some(a) => a
                        .parse()
                        .map_err(|_| Error::parse(MODULE, format!("bad dimension in '{name}'")))?,
                    None => 2,
                };
                if k == 0 {
                    return Err(Error::domain(MODULE, "elliptic-identity needs dimension >= 1"));
                }
                let fields: Vec<Vec<String>> = (0..k)
                    .map(|i| (0..k).map(|r| if r == i { "1" } else { "0" }.to_string()).collect())
                    .collect();
                Self::from_sources(name, k, &fields)?
            }
            "elliptic-perturbed" => Self::from_sources(
                name,
                2,
                &[
                    s(&["1 + 0.3*sin(x2)", "0.2*cos(x1)"]),
                    s(&["0.2*sin(x2)", "1 + 0.3*cos(x1)"]),
                ],
            )?,
            "scalar-linear" => {
                let mut sys = Self::from_sources(name, 1, &[s(&["x1"])])?;
                sys.test_only = true;
                sys
            }
            "heisenberg-sin" => {
                let mut sys = Self::from_sources(
                    name,
                    3,
                    &[s(&["1", "0", "0"]), s(&["0", "1", "sin(x1)"])],
                )?;
                sys.domain_lo = vec![-std::f64::consts::PI; 3];
                sys.domain_hi = vec![std::f64::consts::PI; 3];
                sys
            }
            "degenerate-line" => Self::from_sources(name, 2, &[s(&["1", "0"])])?,
            _ => {
                return Err(Error::parse(
                    MODULE,
                    format!("unknown system '{name}' (known: {})", BUILTIN_SYSTEMS.join(", ")),
                ))
            }
        };
        if arg.is_some() && base != "elliptic-identity" {
            return Err(Error::parse(MODULE, format!("system '{base}' takes no argument")));
        }
        sys.name = name.to_string();
        Ok(sys)
    }

    /// `V_i(x)` into `out`.
    #[inline]
    pub fn eval_field(&self, i: usize, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.fields[i]) {
            *o = e.eval(x);
        }
    }

    pub fn field(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.eval_field(i, x, &mut out);
        out
    }

    pub fn eval_generic<S: Scalar>(&self, i: usize, x: &[S]) -> Vec<S> {
        self.fields[i].iter().map(|e| e.eval(x)).collect()
    }

    /// `DV_i(x)` row-major into `out` (`n × n`).
    #[inline]
    pub fn eval_jacobian(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for r in 0..n {
            for c in 0..n {
                let e = &self.jac[i][r][c];
                out[r * n + c] = if e.is_zero() { 0.0 } else { e.eval(x) };
            }
        }
    }

    pub fn jacobian(&self, i: usize, x: &[f64]) -> DMatrix<f64> {
        let mut buf = vec![0.0; self.n * self.n];
        self.eval_jacobian(i, x, &mut buf);
        DMatrix::from_row_slice(self.n, self.n, &buf)
    }

    pub fn field_exprs(&self, i: usize) -> &[Expr] {
        &self.fields[i]
    }

    /// Columns `V_1(x) … V_d(x)`.
    pub fn field_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.d, |r, i| self.fields[i][r].eval(x))
    }
}

/// A word `I = (i_1, …, i_k)` over the letters `1..=d`; stored zero-based.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Word(pub Vec<u8>);

impl Word {
    pub fn letter(i: usize) -> Word {
        Word(vec![i as u8])
    }

    /// From 1-based letters.
    pub fn from_letters(letters: &[usize]) -> Word {
        Word(letters.iter().map(|&l| (l - 1) as u8).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `I * j`.
    pub fn append(&self, j: usize) -> Word {
        let mut v = self.0.clone();
        v.push(j as u8);
        Word(v)
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|l| (l + 1).to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Largest number of words [`enumerate_words`] will produce.
pub const MAX_WORDS: usize = 1_000_000;

/// All words of length `1..=l` over `d` letters, by length then lexicographically.
pub fn enumerate_words(d: usize, l: usize) -> Result<Vec<Word>> {
    if d == 0 || l == 0 {
        return Err(Error::domain(MODULE, "need d >= 1 and l >= 1"));
    }
    let mut total: usize = 0;
    let mut layer: usize = 1;
    for _ in 0..l {
        layer = layer
            .checked_mul(d)
            .filter(|&v| v <= MAX_WORDS)
            .ok_or_else(|| Error::domain(MODULE, format!("d^l exceeds {MAX_WORDS}")))?;
        total += layer;
    }
    if total > MAX_WORDS {
        return Err(Error::domain(MODULE, format!("word count {total} exceeds {MAX_WORDS}")));
    }
    let mut out: Vec<Word> = (0..d).map(Word::letter).collect();
    let mut start = 0;
    for _ in 1..l {
        let end = out.len();
        for w in start..end {
            for j in 0..d {
                let next = out[w].append(j);
                out.push(next);
            }
        }
        start = end;
    }
    Ok(out)
}

fn fresh_bit(vals: &[&[HyperDual]]) -> usize {
    vals.iter().flat_map(|v| v.iter()).map(|h| h.bits()).max().unwrap_or(0)
}

/// `DW(x)·U(x) − DU(x)·W(x)` for fields given as hyper-dual closures.
pub fn bracket_hd<U, W>(u: &U, w: &W, x: &[HyperDual]) -> Vec<HyperDual>
where
    U: Fn(&[HyperDual]) -> Vec<HyperDual>,
    W: Fn(&[HyperDual]) -> Vec<HyperDual>,
{
    let ux = u(x);
    let wx = w(x);
    let bit = fresh_bit(&[x, &ux, &wx]);
    let along = |dir: &[HyperDual]| -> Vec<HyperDual> {
        x.iter().zip(dir).map(|(xi, di)| xi.perturb(bit, di)).collect()
    };
    let dw_u = w(&along(&ux));
    let du_w = u(&along(&wx));
    dw_u.iter().zip(&du_w).map(|(a, b)| a.part(bit) - b.part(bit)).collect()
}

/// `[U, W](x)` for plain points.
pub fn bracket<U, W>(u: &U, w: &W, x: &[f64]) -> Vec<f64>
where
    U: Fn(&[HyperDual]) -> Vec<HyperDual>,
    W: Fn(&[HyperDual]) -> Vec<HyperDual>,
{
    let xs: Vec<HyperDual> = x.iter().map(|&v| HyperDual::constant(v)).collect();
    bracket_hd(u, w, &xs).iter().map(|v| v.re()).collect()
}

fn word_field(sys: &VectorFieldSystem, letters: &[u8], x: &[HyperDual]) -> Vec<HyperDual> {
    let (&last, prefix) = letters.split_last().expect("nonempty word");
    if prefix.is_empty() {
        return sys.eval_generic(last as usize, x);
    }
    let u = |y: &[HyperDual]| word_field(sys, prefix, y);
    let w = |y: &[HyperDual]| sys.eval_generic(last as usize, y);
    bracket_hd(&u, &w, x)
}

fn lift(x: &[f64]) -> Vec<HyperDual> {
    x.iter().map(|&v| HyperDual::constant(v)).collect()
}

/// The bracket fields `V_[I]` for all words of length at most `l`.
///
/// Words up to length `l + 1` are also compiled to closed-form expressions
/// for fast evaluation, unless they grow past [`COMPILE_LIMIT`] nodes; the
/// hyper-dual recursion remains the reference and the fallback.
#[derive(Clone, Debug)]
pub struct BracketTable {
    pub l: usize,
    pub words: Vec<Word>,
    sys: VectorFieldSystem,
    compiled: HashMap<Word, Vec<Expr>>,
}

/// Largest expression (in nodes, summed over components) kept in compiled form.
pub const COMPILE_LIMIT: usize = 50_000;

/// `[U, W] = DW·U − DU·W` on expression vectors.
fn bracket_exprs(u: &[Expr], w: &[Expr]) -> Vec<Expr> {
    let n = u.len();
    (0..n)
        .map(|r| {
            let mut acc = Expr::Const(0.0);
            for c in 0..n {
                acc = expr::add(acc, expr::mul(w[r].diff(c), u[c].clone()));
                acc = expr::sub(acc, expr::mul(u[r].diff(c), w[c].clone()));
            }
            acc
        })
        .collect()
}

fn compile_words(sys: &VectorFieldSystem, max_len: usize) -> HashMap<Word, Vec<Expr>> {
    let mut out = HashMap::new();
    let mut layer: Vec<(Word, Vec<Expr>)> =
        (0..sys.d).map(|i| (Word::letter(i), sys.field_exprs(i).to_vec())).collect();
    for len in 1..=max_len {
        let mut next = Vec::new();
        for (w, e) in layer {
            if len < max_len {
                for j in 0..sys.d {
                    let b = bracket_exprs(&e, sys.field_exprs(j));
                    if b.iter().map(Expr::size).sum::<usize>() <= COMPILE_LIMIT {
                        next.push((w.append(j), b));
                    }
                }
            }
            out.insert(w, e);
        }
        layer = next;
    }
    out
}

/// Tabulate `V_[I]`, `I ∈ A₁(l)`.
pub fn build_bracket_table(sys: &VectorFieldSystem, l: usize) -> Result<BracketTable> {
    if l == 0 {
        return Err(Error::domain(MODULE, "bracket level must be >= 1"));
    }
    // words of length l+1 (needed by the β-system) nest l infinitesimals,
    // and their first jets one more
    if l + 1 > MAX_BITS {
        return Err(Error::domain(
            MODULE,
            format!("jet order {} exceeds the supported {MAX_BITS}", l + 1),
        ));
    }
    let words = enumerate_words(sys.d, l)?;
    let compiled = if sys.d.saturating_pow(l as u32 + 1) <= 4096 { compile_words(sys, l + 1) } else { HashMap::new() };
    Ok(BracketTable { l, words, sys: sys.clone(), compiled })
}

impl BracketTable {
    pub fn system(&self) -> &VectorFieldSystem {
        &self.sys
    }

    pub fn n(&self) -> usize {
        self.sys.n
    }

    pub fn index_of(&self, w: &Word) -> Option<usize> {
        self.words.iter().position(|v| v == w)
    }

    /// `V_[I](x)` for any nonempty word (length is not limited to `l`).
    pub fn value(&self, word: &Word, x: &[f64]) -> Vec<f64> {
        match self.compiled.get(word) {
            Some(e) => e.iter().map(|c| c.eval(x)).collect(),
            None => self.value_reference(word, x),
        }
    }

    /// `V_[I](x)` through the hyper-dual recursion.
    pub fn value_reference(&self, word: &Word, x: &[f64]) -> Vec<f64> {
        word_field(&self.sys, &word.0, &lift(x)).iter().map(|v| v.re()).collect()
    }

    pub fn value_hd(&self, word: &Word, x: &[HyperDual]) -> Vec<HyperDual> {
        word_field(&self.sys, &word.0, x)
    }

    /// Mixed directional derivative `D^k V_[I](x)[dirs…]`.
    ///
    /// Entries of the table carry jets up to order `l + 1 − |I|`.
    pub fn jet(&self, word: &Word, x: &[f64], dirs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let order = dirs.len();
        if word.len() > self.l || order + word.len() > self.l + 1 {
            return Err(Error::domain(
                MODULE,
                format!("jet of order {order} for word {word} exceeds table level {}", self.l),
            ));
        }
        let mut xs = lift(x);
        for (b, dir) in dirs.iter().enumerate() {
            xs = xs
                .iter()
                .zip(dir)
                .map(|(xi, di)| xi.perturb(b, &HyperDual::constant(*di)))
                .collect();
        }
        let mask = (1usize << order) - 1;
        Ok(self.value_hd(word, &xs).iter().map(|v| v.coef(mask)).collect())
    }

    /// `DV_[I](x)`, row-major `n × n`.
    pub fn jacobian(&self, word: &Word, x: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for c in 0..n {
            let xs: Vec<HyperDual> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let h = HyperDual::constant(v);
                    if i == c {
                        h.perturb(0, &HyperDual::constant(1.0))
                    } else {
                        h
                    }
                })
                .collect();
            for (r, v) in self.value_hd(word, &xs).iter().enumerate() {
                out[(r, c)] = v.part(0).re();
            }
        }
        out
    }

    /// Columns `V_[J](x)`, `J ∈ A₁(l)` in table order.
    pub fn basis_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, self.words.len());
        for (k, w) in self.words.iter().enumerate() {
            for (r, v) in self.value(w, x).into_iter().enumerate() {
                m[(r, k)] = v;
            }
        }
        m
    }

    /// Smallest eigenvalue of `Σ_I V_[I](x) V_[I](x)ᵀ`.
    pub fn local_lambda(&self, x: &[f64]) -> f64 {
        let b = self.basis_matrix(x);
        smallest_eigenvalue(&b * b.transpose())
    }
}

pub(crate) fn smallest_eigenvalue(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Points for the hypoellipticity search: uniform draws from a box plus fixed extras.
#[derive(Clone, Debug)]
pub struct PointSampler {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub seed: u64,
    pub extra: Vec<Vec<f64>>,
}

impl PointSampler {
    pub fn for_system(sys: &VectorFieldSystem, seed: u64) -> Self {
        PointSampler { lo: sys.domain_lo.clone(), hi: sys.domain_hi.clone(), seed, extra: Vec::new() }
    }

    pub fn with_points(mut self, pts: impl IntoIterator<Item = Vec<f64>>) -> Self {
        self.extra.extend(pts);
        self
    }

    pub fn points(&self, trials: usize) -> Vec<Vec<f64>> {
        let mut out = self.extra.clone();
        for k in 0..trials {
            let mut r = rng::stream(self.seed, k as u64, u64::MAX);
            out.push(
                self.lo
                    .iter()
                    .zip(&self.hi)
                    .map(|(&a, &b)| a + (b - a) * r.random::<f64>())
                    .collect(),
            );
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypoReport {
    pub level: usize,
    pub lambda_hat: f64,
    pub argmin: Vec<f64>,
    pub points_checked: usize,
    /// The bound holds on the sampled points only.
    pub sampled_only: bool,
}

/// Minimum over sampled points of the smallest eigenvalue of `Σ_I V_[I]V_[I]ᵀ`.
pub fn hypo_check(table: &BracketTable, sampler: &PointSampler, trials: usize) -> Result<HypoReport> {
    let pts = sampler.points(trials);
    if pts.is_empty() {
        return Err(Error::domain(MODULE, "no points to check"));
    }
    let mut best = (f64::INFINITY, pts[0].clone());
    for p in &pts {
        if p.len() != table.n() {
            return Err(Error::mismatch(MODULE, "sample point has wrong dimension"));
        }
        let lam = table.local_lambda(p);
        if lam < best.0 {
            best = (lam, p.clone());
        }
    }
    Ok(HypoReport {
        level: table.l,
        lambda_hat: best.0,
        argmin: best.1,
        points_checked: pts.len(),
        sampled_only: true,
    })
}

/// Coefficients `ω^J_I(x)` with `V_[I](x) = Σ_J ω^J_I(x) V_[J](x)`.
#[derive(Clone, Debug)]
pub struct OmegaSolution {
    pub coeffs: Vec<f64>,
    pub residual: f64,
}

/// Pseudo-inverse of the bracket basis at one point, reused across targets.
pub struct OmegaSolver {
    basis: DMatrix<f64>,
    pinv: DMatrix<f64>,
    tol: f64,
}

impl OmegaSolver {
    pub fn at(table: &BracketTable, x: &[f64], tol: f64) -> Result<Self> {
        Self::from_basis(table.basis_matrix(x), tol)
    }

    pub fn from_basis(basis: DMatrix<f64>, tol: f64) -> Result<Self> {
        let svd = basis.clone().svd(true, true);
        let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let pinv = svd
            .pseudo_inverse(smax * 1e-12)
            .map_err(|e| Error::numerical(MODULE, format!("pseudo-inverse failed: {e}")))?;
        Ok(OmegaSolver { basis, pinv, tol })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Minimum-norm least-squares expansion of `target` in the basis.
    pub fn solve(&self, target: &[f64]) -> Result<OmegaSolution> {
        let v = DVector::from_column_slice(target);
        let w = &self.pinv * &v;
        let residual = (&self.basis * &w - &v).norm();
        if residual > self.tol {
            return Err(Error::numerical(
                MODULE,
                format!("brackets do not span the target: residual {residual:e} > {:e}", self.tol),
            ));
        }
        Ok(OmegaSolution { coeffs: w.iter().copied().collect(), residual })
    }
}

/// Expand `V_[word](x)` in the level-`l` bracket basis.
pub fn omega_solve(table: &BracketTable, word: &Word, x: &[f64], tol: f64) -> Result<OmegaSolution> {
    OmegaSolver::at(table, x, tol)?.solve(&table.value(word, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn heis() -> VectorFieldSystem {
        VectorFieldSystem::builtin("heisenberg-sin").unwrap()
    }

    #[test]
    fn word_counts() {
        let w = enumerate_words(1, 2).unwrap();
        assert_eq!(w, vec![Word(vec![0]), Word(vec![0, 0])]);
        assert_eq!(enumerate_words(2, 2).unwrap().len(), 6);
        assert_eq!(enumerate_words(2, 3).unwrap().len(), 14);
        assert!(enumerate_words(10, 7).is_err());
        assert!(enumerate_words(0, 2).is_err());
        assert_eq!(Word::from_letters(&[1, 2, 1]).to_string(), "(1,2,1)");
    }

    #[test]
    fn bracket_examples() {
        let c1 = |_: &[HyperDual]| vec![HyperDual::constant(1.0), HyperDual::constant(0.0)];
        let c2 = |_: &[HyperDual]| vec![HyperDual::constant(0.5), HyperDual::constant(2.0)];
        assert_eq!(bracket(&c1, &c2, &[0.3, 0.4]), vec![0.0, 0.0]);

        let sys = heis();
        let u = |x: &[HyperDual]| sys.eval_generic(0, x);
        let w = |x: &[HyperDual]| sys.eval_generic(1, x);
        let v = bracket(&u, &w, &[0.0, 0.7, -0.2]);
        assert_relative_eq!(v[0], 0.0);
        assert_relative_eq!(v[1], 0.0);
        assert_relative_eq!(v[2], 1.0, epsilon = 1e-15);
        assert_eq!(bracket(&w, &w, &[0.4, 0.1, 0.0]), vec![0.0; 3]);
    }

    #[test]
    fn heisenberg_brackets_by_hand() {
        let t = build_bracket_table(&heis(), 3).unwrap();
        for x1 in [-1.3, 0.0, 0.4, 2.2] {
            let x = [x1, 0.3, -0.5];
            let v12 = t.value(&Word::from_letters(&[1, 2]), &x);
            assert_relative_eq!(v12[2], x1.cos(), epsilon = 1e-14);
            let v121 = t.value(&Word::from_letters(&[1, 2, 1]), &x);
            assert_relative_eq!(v121[2], x1.sin(), epsilon = 1e-14);
            let v211 = t.value(&Word::from_letters(&[2, 1, 1]), &x);
            assert_relative_eq!(v211[2], -x1.sin(), epsilon = 1e-14);
            assert_eq!(t.value(&Word::from_letters(&[1, 2, 2]), &x), vec![0.0; 3]);
            assert_eq!(t.value(&Word::from_letters(&[1, 1]), &x), vec![0.0; 3]);
            for k in 0..2 {
                assert_relative_eq!(v12[k], 0.0);
                assert_relative_eq!(v121[k], 0.0);
            }
        }
    }

    #[test]
    fn compiled_brackets_match_hyperdual_recursion() {
        for name in ["heisenberg-sin", "elliptic-perturbed"] {
            let sys = VectorFieldSystem::builtin(name).unwrap();
            let t = build_bracket_table(&sys, 3).unwrap();
            let x = vec![0.37; sys.n];
            for w in enumerate_words(sys.d, 4).unwrap() {
                let a = t.value(&w, &x);
                let b = t.value_reference(&w, &x);
                for (p, q) in a.iter().zip(&b) {
                    assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()), "{name} {w}: {p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn level_one_table_is_the_fields() {
        let sys = VectorFieldSystem::builtin("elliptic-perturbed").unwrap();
        let t = build_bracket_table(&sys, 1).unwrap();
        assert_eq!(t.words.len(), 2);
        let x = [0.2, -0.9];
        for i in 0..2 {
            assert_eq!(t.value(&Word::letter(i), &x), sys.field(i, &x));
        }
    }

    #[test]
    fn commuting_constant_fields_have_vanishing_brackets() {
        let sys = VectorFieldSystem::builtin("elliptic-identity:3").unwrap();
        let t = build_bracket_table(&sys, 3).unwrap();
        for w in t.words.iter().filter(|w| w.len() >= 2) {
            assert_eq!(t.value(w, &[0.1, 0.2, 0.3]), vec![0.0; 3]);
        }
    }

    #[test]
    fn hypo_check_examples() {
        let sys = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let t = build_bracket_table(&sys, 1).unwrap();
        let r = hypo_check(&t, &PointSampler::for_system(&sys, 1), 50).unwrap();
        assert_relative_eq!(r.lambda_hat, 1.0, epsilon = 1e-14);

        let sys = heis();
        let t2 = build_bracket_table(&sys, 2).unwrap();
        let sampler = PointSampler::for_system(&sys, 1)
            .with_points([vec![std::f64::consts::FRAC_PI_2, 0.0, 0.0]]);
        let r = hypo_check(&t2, &sampler, 100).unwrap();
        assert!(r.lambda_hat.abs() < 1e-12);
        let t3 = build_bracket_table(&sys, 3).unwrap();
        let r = hypo_check(&t3, &sampler, 200).unwrap();
        assert!(r.lambda_hat >= 0.15, "{}", r.lambda_hat);
    }

    #[test]
    fn omega_examples() {
        let sys = heis();
        let t = build_bracket_table(&sys, 3).unwrap();
        let x = [0.3, 0.1, 0.2];
        let w = Word::from_letters(&[1, 2]);
        let sol = omega_solve(&t, &w, &x, 1e-10).unwrap();
        assert!(sol.residual < 1e-12);
        let norm: f64 = sol.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!(norm <= 1.0 + 1e-12);

        let id = VectorFieldSystem::builtin("elliptic-identity").unwrap();
        let ti = build_bracket_table(&id, 2).unwrap();
        let sol = omega_solve(&ti, &Word::from_letters(&[1, 2]), &[0.0, 0.0], 1e-10).unwrap();
        assert!(sol.coeffs.iter().all(|c| *c == 0.0));

        // degenerate: a 1-field system cannot expand a vector off its line
        let deg = VectorFieldSystem::builtin("degenerate-line").unwrap();
        let td = build_bracket_table(&deg, 1).unwrap();
        let solver = OmegaSolver::at(&td, &[0.0, 0.0], 1e-10).unwrap();
        assert!(solver.solve(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn jet_order_is_limited() {
        let t = build_bracket_table(&heis(), 2).unwrap();
        let w = Word::from_letters(&[1, 2]);
        let x = [0.1, 0.0, 0.0];
        assert!(t.jet(&w, &x, &[vec![1.0, 0.0, 0.0]]).is_ok());
        assert!(t.jet(&w, &x, &[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).is_err());
        // D V_[12] along e1 = -sin(x1) ∂3
        let d = t.jet(&w, &x, &[vec![1.0, 0.0, 0.0]]).unwrap();
        assert_relative_eq!(d[2], -0.1f64.sin(), epsilon = 1e-15);
    }

    #[test]
    fn unknown_system_is_rejected() {
        assert!(VectorFieldSystem::builtin("nope").is_err());
        assert!(VectorFieldSystem::builtin("heisenberg-sin:2").is_err());
        assert!(VectorFieldSystem::from_sources("bad", 2, &[vec!["x1".into()]]).is_err());
    }
}
