//! Hyper-dual scalars: forward-mode AD carrying two first-order directions
//! plus their mixed second-order slot, so a single pass produces an exact
//! Hessian entry with no truncation error.
//!
//! Objective code is written once against the [`Real`] trait and runs
//! unchanged at `f64` (plain evaluation) or [`HyperDual`] (differentiation).

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Scalar carrying `(value, ∂/∂u, ∂/∂v, ∂²/∂u∂v)` slots for two seed
/// directions `u` and `v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperDual {
    pub re: f64,
    pub d1: f64,
    pub d2: f64,
    pub d12: f64,
}

impl HyperDual {
    #[inline]
    pub const fn new(re: f64, d1: f64, d2: f64, d12: f64) -> Self {
        Self { re, d1, d2, d12 }
    }

    /// Lift a plain value; all derivative slots are zero.
    #[inline]
    pub const fn constant(re: f64) -> Self {
        Self::new(re, 0.0, 0.0, 0.0)
    }

    /// Apply a scalar primitive with value `f`, first derivative `df` and
    /// second derivative `d2f`, all evaluated at `self.re`.
    ///
    /// The slots follow the chain rule:
    /// `d12 ← df·d12 + d2f·d1·d2`.
    #[inline]
    fn lift(self, f: f64, df: f64, d2f: f64) -> Self {
        Self {
            re: f,
            d1: df * self.d1,
            d2: df * self.d2,
            d12: df * self.d12 + d2f * self.d1 * self.d2,
        }
    }
}

impl Add for HyperDual {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.d1 + o.d1, self.d2 + o.d2, self.d12 + o.d12)
    }
}

impl Sub for HyperDual {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.d1 - o.d1, self.d2 - o.d2, self.d12 - o.d12)
    }
}

impl Mul for HyperDual {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.re * o.re,
            self.d1 * o.re + self.re * o.d1,
            self.d2 * o.re + self.re * o.d2,
            self.d12 * o.re + self.d1 * o.d2 + self.d2 * o.d1 + self.re * o.d12,
        )
    }
}

impl Neg for HyperDual {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.d1, -self.d2, -self.d12)
    }
}

/// Real-like scalar: `f64` or [`HyperDual`].
///
/// The fallible operations (`ln`, `sqrt`, `div`, `powf`) check their domain
/// on the value slot and report which primitive was violated.
pub trait Real:
    Copy + std::fmt::Debug + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;

    /// The value slot.
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn ln(self) -> Result<Self>;
    fn ln_1p(self) -> Result<Self>;
    fn sqrt(self) -> Result<Self>;
    fn powf(self, p: f64) -> Result<Self>;
    fn div(self, rhs: Self) -> Result<Self>;

    /// True when every slot is finite.
    fn is_finite(self) -> bool;

    /// True when every derivative slot is exactly zero, so no expression of
    /// this value can carry derivatives. Lets expensive subexpressions fold
    /// to a plain constant when all their inputs are passive.
    fn is_constant(self) -> bool;
}

#[inline]
fn domain(primitive: &'static str, value: f64) -> Error {
    Error::Domain { primitive, value }
}

impl Real for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }

    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }

    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }

    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }

    #[inline]
    fn ln(self) -> Result<Self> {
        if self <= 0.0 {
            return Err(domain("ln", self));
        }
        Ok(f64::ln(self))
    }

    #[inline]
    fn ln_1p(self) -> Result<Self> {
        if self <= -1.0 {
            return Err(domain("ln_1p", self));
        }
        Ok(f64::ln_1p(self))
    }

    #[inline]
    fn sqrt(self) -> Result<Self> {
        if self <= 0.0 {
            return Err(domain("sqrt", self));
        }
        Ok(f64::sqrt(self))
    }

    #[inline]
    fn powf(self, p: f64) -> Result<Self> {
        if self <= 0.0 {
            return Err(domain("powf", self));
        }
        Ok(f64::powf(self, p))
    }

    #[inline]
    fn div(self, rhs: Self) -> Result<Self> {
        if rhs == 0.0 {
            return Err(domain("div", rhs));
        }
        Ok(self / rhs)
    }

    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    #[inline]
    fn is_constant(self) -> bool {
        true
    }
}

impl Real for HyperDual {
    #[inline]
    fn constant(v: f64) -> Self {
        HyperDual::constant(v)
    }

    #[inline]
    fn value(self) -> f64 {
        self.re
    }

    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.lift(e, e, e)
    }

    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        let sech2 = 1.0 - t * t;
        self.lift(t, sech2, -2.0 * t * sech2)
    }

    #[inline]
    fn abs(self) -> Self {
        if self.re < 0.0 {
            -self
        } else {
            self
        }
    }

    #[inline]
    fn powi(self, n: i32) -> Self {
        let v = self.re;
        let nf = n as f64;
        self.lift(v.powi(n), nf * v.powi(n - 1), nf * (nf - 1.0) * v.powi(n - 2))
    }

    #[inline]
    fn ln(self) -> Result<Self> {
        if self.re <= 0.0 {
            return Err(domain("ln", self.re));
        }
        let inv = 1.0 / self.re;
        Ok(self.lift(self.re.ln(), inv, -inv * inv))
    }

    #[inline]
    fn ln_1p(self) -> Result<Self> {
        if self.re <= -1.0 {
            return Err(domain("ln_1p", self.re));
        }
        let inv = 1.0 / (1.0 + self.re);
        Ok(self.lift(self.re.ln_1p(), inv, -inv * inv))
    }

    #[inline]
    fn sqrt(self) -> Result<Self> {
        if self.re <= 0.0 {
            return Err(domain("sqrt", self.re));
        }
        let s = self.re.sqrt();
        Ok(self.lift(s, 0.5 / s, -0.25 / (s * self.re)))
    }

    #[inline]
    fn powf(self, p: f64) -> Result<Self> {
        if self.re <= 0.0 {
            return Err(domain("powf", self.re));
        }
        let v = self.re;
        Ok(self.lift(v.powf(p), p * v.powf(p - 1.0), p * (p - 1.0) * v.powf(p - 2.0)))
    }

    #[inline]
    fn div(self, rhs: Self) -> Result<Self> {
        if rhs.re == 0.0 {
            return Err(domain("div", rhs.re));
        }
        let inv = 1.0 / rhs.re;
        Ok(self * rhs.lift(inv, -inv * inv, 2.0 * inv * inv * inv))
    }

    #[inline]
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.d1.is_finite() && self.d2.is_finite() && self.d12.is_finite()
    }

    #[inline]
    fn is_constant(self) -> bool {
        self.d1 == 0.0 && self.d2 == 0.0 && self.d12 == 0.0
    }
}

/// Optional pool for parallel derivative passes, sized by the
/// `LRVB_NUM_THREADS` environment variable. Unset or `1` means sequential.
fn thread_pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n: usize = std::env::var("LRVB_NUM_THREADS").ok()?.parse().ok()?;
        if n <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()
    })
    .as_ref()
}

fn seeded_pass<F>(f: &F, x: &[f64], i: usize, j: usize) -> Result<HyperDual>
where
    F: Fn(&[HyperDual]) -> Result<HyperDual>,
{
    let mut args: Vec<HyperDual> = x.iter().map(|&v| HyperDual::constant(v)).collect();
    args[i].d1 = 1.0;
    args[j].d2 = 1.0;
    f(&args)
}

fn run_passes<F>(f: &F, x: &[f64], pairs: &[(usize, usize)]) -> Result<Vec<HyperDual>>
where
    F: Fn(&[HyperDual]) -> Result<HyperDual> + Sync,
{
    if let Some(pool) = thread_pool() {
        use rayon::prelude::*;
        // Each pass owns its argument buffer and writes one output slot, so
        // the result is identical for any schedule.
        return pool.install(|| pairs.par_iter().map(|&(i, j)| seeded_pass(f, x, i, j)).collect());
    }
    let mut args: Vec<HyperDual> = x.iter().map(|&v| HyperDual::constant(v)).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        args[i].d1 = 1.0;
        args[j].d2 = 1.0;
        let r = f(&args);
        args[i].d1 = 0.0;
        args[j].d2 = 0.0;
        out.push(r?);
    }
    Ok(out)
}

/// Exact gradient of `f` at `x` via `n` forward passes.
pub fn gradient<F>(f: F, x: &[f64]) -> Result<DVector<f64>>
where
    F: Fn(&[HyperDual]) -> Result<HyperDual> + Sync,
{
    let pairs: Vec<(usize, usize)> = (0..x.len()).map(|i| (i, i)).collect();
    let outs = run_passes(&f, x, &pairs)?;
    Ok(DVector::from_iterator(x.len(), outs.into_iter().map(|o| o.d1)))
}

/// Exact Hessian of `f` at `x` via `n(n+1)/2` hyper-dual passes.
///
/// Each off-diagonal entry is computed once and mirrored, so the output is
/// bitwise symmetric.
pub fn hessian<F>(f: F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[HyperDual]) -> Result<HyperDual> + Sync,
{
    Ok(hessian_with_gradient(f, x)?.1)
}

/// Hessian plus the gradient read off the diagonal passes for free.
pub fn hessian_with_gradient<F>(f: F, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: Fn(&[HyperDual]) -> Result<HyperDual> + Sync,
{
    let n = x.len();
    let mut pairs = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            pairs.push((i, j));
        }
    }
    let outs = run_passes(&f, x, &pairs)?;
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    for (&(i, j), out) in pairs.iter().zip(&outs) {
        hess[(i, j)] = out.d12;
        hess[(j, i)] = out.d12;
        if i == j {
            grad[i] = out.d1;
        }
    }
    Ok((grad, hess))
}

/// Hessian and gradient restricted to a caller-declared interaction
/// pattern: only the listed upper-triangle pairs are evaluated, and every
/// entry outside the pattern is left at zero.
///
/// The caller asserts that the omitted mixed partials vanish identically;
/// that claim is not checked here. The pattern must contain every diagonal
/// pair `(i, i)`, because those passes also produce the gradient.
pub fn hessian_with_gradient_sparse<F>(
    f: F,
    x: &[f64],
    pairs: &[(usize, usize)],
) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: Fn(&[HyperDual]) -> Result<HyperDual> + Sync,
{
    let n = x.len();
    let mut diagonals = vec![false; n];
    for &(i, j) in pairs {
        if i > j || j >= n {
            return Err(Error::InvalidParameter(format!(
                "interaction pair ({i}, {j}) is not an upper-triangle index pair for dimension {n}"
            )));
        }
        if i == j {
            diagonals[i] = true;
        }
    }
    if let Some(missing) = diagonals.iter().position(|&d| !d) {
        return Err(Error::InvalidParameter(format!(
            "interaction pattern is missing the diagonal pair ({missing}, {missing})"
        )));
    }
    let outs = run_passes(&f, x, pairs)?;
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    for (&(i, j), out) in pairs.iter().zip(&outs) {
        hess[(i, j)] = out.d12;
        hess[(j, i)] = out.d12;
        if i == j {
            grad[i] = out.d1;
        }
    }
    Ok((grad, hess))
}

/// Mixed second derivatives `∂²f/∂x_i∂y_j` of a two-argument scalar
/// function, one hyper-dual pass per `(i, j)` pair.
pub fn cross_derivatives<F>(f: F, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[HyperDual], &[HyperDual]) -> Result<HyperDual> + Sync,
{
    let (n, m) = (x.len(), y.len());
    let base_x: Vec<HyperDual> = x.iter().map(|&v| HyperDual::constant(v)).collect();
    let base_y: Vec<HyperDual> = y.iter().map(|&v| HyperDual::constant(v)).collect();
    let eval = |i: usize, j: usize| -> Result<f64> {
        let mut xs = base_x.clone();
        let mut ys = base_y.clone();
        xs[i].d1 = 1.0;
        ys[j].d2 = 1.0;
        Ok(f(&xs, &ys)?.d12)
    };
    let mut out = DMatrix::zeros(n, m);
    if let Some(pool) = thread_pool() {
        use rayon::prelude::*;
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
        let vals: Vec<f64> =
            pool.install(|| pairs.par_iter().map(|&(i, j)| eval(i, j)).collect::<Result<_>>())?;
        for (&(i, j), v) in pairs.iter().zip(vals) {
            out[(i, j)] = v;
        }
    } else {
        for i in 0..n {
            for j in 0..m {
                out[(i, j)] = eval(i, j)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeds(re: f64, d1: f64, d2: f64) -> HyperDual {
        HyperDual::new(re, d1, d2, 0.0)
    }

    #[test]
    fn square_at_three_has_expected_slots() {
        let x = seeds(3.0, 1.0, 1.0);
        let y = x * x;
        assert_eq!(y, HyperDual::new(9.0, 6.0, 6.0, 2.0));
        assert_eq!(x.powi(2), y);
    }

    #[test]
    fn exp_at_zero_fills_all_slots_with_one() {
        let y = seeds(0.0, 1.0, 1.0).exp();
        assert_eq!(y, HyperDual::new(1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn bilinear_product_with_orthogonal_seeds() {
        let x = HyperDual::new(2.0, 1.0, 0.0, 0.0);
        let y = HyperDual::new(5.0, 0.0, 1.0, 0.0);
        assert_eq!(x * y, HyperDual::new(10.0, 5.0, 2.0, 1.0));
    }

    #[test]
    fn tanh_derivatives_match_closed_forms() {
        let z = 0.7_f64;
        let y = seeds(z, 1.0, 1.0).tanh();
        let t = z.tanh();
        assert_relative_eq!(y.re, t);
        assert_relative_eq!(y.d1, 1.0 - t * t);
        assert_relative_eq!(y.d12, -2.0 * t * (1.0 - t * t));
    }

    #[test]
    fn domain_errors_name_the_primitive() {
        let bad = HyperDual::constant(-1.0);
        match bad.ln() {
            Err(Error::Domain { primitive, value }) => {
                assert_eq!(primitive, "ln");
                assert_eq!(value, -1.0);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
        assert!(matches!(bad.sqrt(), Err(Error::Domain { primitive: "sqrt", .. })));
        assert!(matches!(bad.powf(0.5), Err(Error::Domain { primitive: "powf", .. })));
        let zero = HyperDual::constant(0.0);
        assert!(matches!(bad.div(zero), Err(Error::Domain { primitive: "div", .. })));
        assert!(matches!(Real::ln(-2.0_f64), Err(Error::Domain { primitive: "ln", .. })));
    }

    #[test]
    fn division_matches_quotient_rule() {
        // d/dx (x/y) = 1/y, d/dy = -x/y², d²/dxdy = -1/y²
        let x = HyperDual::new(3.0, 1.0, 0.0, 0.0);
        let y = HyperDual::new(2.0, 0.0, 1.0, 0.0);
        let q = x.div(y).unwrap();
        assert_relative_eq!(q.re, 1.5);
        assert_relative_eq!(q.d1, 0.5);
        assert_relative_eq!(q.d2, -0.75);
        assert_relative_eq!(q.d12, -0.25);
    }

    #[test]
    fn gradient_of_half_norm_squared_is_identity() {
        let g = gradient(
            |x| {
                let half = HyperDual::constant(0.5);
                Ok(half * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]))
            },
            &[1.0, 2.0, 3.0],
        )
        .unwrap();
        assert_eq!(g.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn gradient_of_product_swaps_coordinates() {
        let g = gradient(|x| Ok(x[0] * x[1]), &[4.0, 7.0]).unwrap();
        assert_eq!(g.as_slice(), &[7.0, 4.0]);
    }

    #[test]
    fn gradient_of_log_is_reciprocal() {
        let g = gradient(|x| x[0].ln(), &[2.0]).unwrap();
        assert_eq!(g.as_slice(), &[0.5]);
    }

    #[test]
    fn hessian_of_quadratic_form_recovers_the_matrix() {
        let a = [[2.0, 1.0], [1.0, 3.0]];
        let h = hessian(
            |x| {
                let half = HyperDual::constant(0.5);
                let ax0 = HyperDual::constant(a[0][0]) * x[0] + HyperDual::constant(a[0][1]) * x[1];
                let ax1 = HyperDual::constant(a[1][0]) * x[0] + HyperDual::constant(a[1][1]) * x[1];
                Ok(half * (x[0] * ax0 + x[1] * ax1))
            },
            &[0.3, -1.2],
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(h[(i, j)], a[i][j], max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn hessian_of_exp_sum_is_all_ones_at_origin() {
        let h = hessian(|x| Ok((x[0] + x[1]).exp()), &[0.0, 0.0]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(h[(i, j)], 1.0);
            }
        }
    }

    #[test]
    fn cross_derivatives_of_separable_product() {
        // f(x, y) = x₀²·y₀³ has ∂²f/∂x₀∂y₀ = 6·x₀·y₀².
        let c = cross_derivatives(|x, y| Ok(x[0].powi(2) * y[0].powi(3)), &[2.0], &[1.5]).unwrap();
        assert_relative_eq!(c[(0, 0)], 6.0 * 2.0 * 1.5 * 1.5, max_relative = 1e-14);
    }

    /// A randomized smooth function built from the supported primitives.
    struct RandomSmooth {
        terms: Vec<(u8, f64, Vec<f64>, f64)>,
    }

    impl RandomSmooth {
        fn generate(rng: &mut ChaCha8Rng, dim: usize) -> Self {
            let n_terms = rng.gen_range(3..=6);
            let terms = (0..n_terms)
                .map(|_| {
                    let kind = rng.gen_range(0u8..6);
                    let c = rng.gen_range(-2.0..2.0);
                    let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let b = rng.gen_range(-0.5..0.5);
                    (kind, c, a, b)
                })
                .collect();
            Self { terms }
        }

        fn eval<S: Real>(&self, x: &[S]) -> Result<S> {
            let mut total = S::constant(0.0);
            for (kind, c, a, b) in &self.terms {
                let mut t = S::constant(*b);
                for (ai, xi) in a.iter().zip(x) {
                    t = t + S::constant(*ai) * *xi;
                }
                let c = S::constant(*c);
                let term = match kind {
                    0 => c * (S::constant(0.3) * t).exp(),
                    1 => c * t.tanh(),
                    2 => c * (S::constant(2.0) + t.tanh()).ln()?,
                    3 => c * (S::constant(1.0) + t * t).sqrt()?,
                    4 => c * t.powi(3),
                    5 => c * t.div(S::constant(2.0) + t * t)?,
                    _ => unreachable!(),
                };
                total = total + term;
            }
            Ok(total)
        }
    }

    #[test]
    fn randomized_functions_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..100 {
            let dim = rng.gen_range(1..=5);
            let f = RandomSmooth::generate(&mut rng, dim);
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let g = gradient(|v| f.eval(v), &x).unwrap();
            let h = hessian(|v| f.eval(v), &x).unwrap();
            let g_fd = fd::gradient(&|v| f.eval::<f64>(v).unwrap(), &x, 1e-5);
            let scale_g = g.amax().max(1.0);
            for i in 0..dim {
                assert!(
                    (g[i] - g_fd[i]).abs() <= 1e-6 * scale_g,
                    "case {case}: gradient entry {i}: ad {} vs fd {}",
                    g[i],
                    g_fd[i]
                );
            }

            // The Hessian oracle differences the (already validated) gradient,
            // which keeps the subtraction noise of second differences out of
            // the 1e-6 comparison.
            let h_fd = fd::hessian(&|v| f.eval::<f64>(v).unwrap(), &x, 1e-5);
            let scale_h = h.amax().max(1.0);
            for i in 0..dim {
                for j in 0..dim {
                    assert!(
                        (h[(i, j)] - h_fd[i][j]).abs() <= 1e-6 * scale_h,
                        "case {case}: hessian entry ({i},{j}): ad {} vs fd {}",
                        h[(i, j)],
                        h_fd[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn sparse_pattern_matches_the_dense_hessian() {
        // x₂ is additively separable from (x₀, x₁), so the (0,2) and (1,2)
        // mixed partials vanish and may be dropped from the pattern.
        let f = |x: &[HyperDual]| Ok(x[0] * x[0] * x[1] + (x[2] * x[2]).exp());
        let x = [0.7, -1.1, 0.4];
        let dense = hessian(f, &x).unwrap();
        let (g, sparse) =
            hessian_with_gradient_sparse(f, &x, &[(0, 0), (0, 1), (1, 1), (2, 2)]).unwrap();
        assert_eq!(dense, sparse);
        let g_full = gradient(f, &x).unwrap();
        assert_eq!(g, g_full);
    }

    #[test]
    fn sparse_pattern_rejects_malformed_pairs() {
        let f = |x: &[HyperDual]| Ok(x[0] * x[1]);
        let x = [1.0, 2.0];
        let missing = hessian_with_gradient_sparse(f, &x, &[(0, 0), (0, 1)]);
        assert!(matches!(missing, Err(Error::InvalidParameter(_))));
        let flipped = hessian_with_gradient_sparse(f, &x, &[(0, 0), (1, 0), (1, 1)]);
        assert!(matches!(flipped, Err(Error::InvalidParameter(_))));
        let out_of_range = hessian_with_gradient_sparse(f, &x, &[(0, 0), (1, 1), (1, 2)]);
        assert!(matches!(out_of_range, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn constant_detection_tracks_seeded_slots() {
        assert!(HyperDual::constant(3.5).is_constant());
        assert!(!seeds(3.5, 1.0, 0.0).is_constant());
        assert!(Real::is_constant(2.0_f64));
        // Arithmetic on passive values stays passive.
        let y = HyperDual::constant(2.0) * HyperDual::constant(-1.0) + HyperDual::constant(0.5);
        assert!(y.is_constant());
    }

    #[test]
    fn parallel_passes_match_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = RandomSmooth::generate(&mut rng, 4);
        let x = [0.2, -0.4, 0.9, 0.1];
        let sequential = hessian(|v| f.eval(v), &x).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let parallel: DMatrix<f64> = pool.install(|| {
            use rayon::prelude::*;
            let n = x.len();
            let pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
            let vals: Vec<f64> = pairs
                .par_iter()
                .map(|&(i, j)| seeded_pass(&|v: &[HyperDual]| f.eval(v), &x, i, j).unwrap().d12)
                .collect();
            let mut h = DMatrix::zeros(n, n);
            for (&(i, j), v) in pairs.iter().zip(vals) {
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
            h
        });
        assert_eq!(sequential, parallel);
    }

    proptest! {
        #[test]
        fn hessian_is_bitwise_symmetric(x0 in -2.0..2.0f64, x1 in -2.0..2.0f64, x2 in -2.0..2.0f64) {
            let h = hessian(
                |x| Ok((x[0] * x[1]).tanh() + (x[2] + x[0] * x[0]).exp() * x[1]),
                &[x0, x1, x2],
            )
            .unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(h[(i, j)], h[(j, i)]);
                }
            }
        }

        #[test]
        fn gradient_of_affine_function_is_constant(
            x0 in -5.0..5.0f64, x1 in -5.0..5.0f64, y0 in -5.0..5.0f64, y1 in -5.0..5.0f64,
        ) {
            let f = |x: &[HyperDual]| {
                Ok(HyperDual::constant(3.0) * x[0] - HyperDual::constant(0.25) * x[1]
                    + HyperDual::constant(1.5))
            };
            let ga = gradient(f, &[x0, x1]).unwrap();
            let gb = gradient(f, &[y0, y1]).unwrap();
            prop_assert_eq!(ga.as_slice(), &[3.0, -0.25]);
            prop_assert_eq!(ga, gb);
        }
    }
}
