//! Shared numerical kernels: dense solves with a pseudo-inverse fallback,
//! the standard normal CDF, summary statistics and the seedable RNG.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MteError, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value cutoff for the pseudo-inverse path.
pub const PINV_RCOND: f64 = 1e-10;

/// Outcome of [`solve`].
#[derive(Debug, Clone)]
pub struct Solved {
    pub x: Matrix,
    /// Set when the system was numerically singular and the truncated
    /// pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn residual_ok(a: &Matrix, x: &Matrix, b: &Matrix, tol: f64) -> bool {
    let r = a * x - b;
    r.iter().all(|v| v.is_finite()) && max_abs(&r) <= tol
}

/// Solve `a · x = b` for square `a`.
///
/// Uses LU when it reproduces `b` to `1e-9·(1+‖b‖∞)`; otherwise falls back to
/// the SVD pseudo-inverse with singular values below `1e-10·σ_max` dropped.
/// Errors if the fallback still cannot reproduce `b` (b outside the range of a).
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Solved> {
    if a.nrows() != a.ncols() {
        return Err(MteError::DimensionMismatch(format!(
            "solve needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != a.nrows() {
        return Err(MteError::DimensionMismatch(format!(
            "right-hand side has {} rows, matrix has {}",
            b.nrows(),
            a.nrows()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(MteError::InvalidData("non-finite entry in linear system".into()));
    }
    let tol = 1e-9 * (1.0 + max_abs(b));
    if let Some(x) = a.clone().lu().solve(b) {
        if residual_ok(a, &x, b, tol) {
            return Ok(Solved { x, pseudo_inverse: false });
        }
    }
    let (pinv, _) = pseudo_inverse(a);
    let x = &pinv * b;
    let range_tol = 1e-8 * (1.0 + max_abs(b)) * max_abs(a).max(1.0);
    if !residual_ok(a, &x, b, range_tol) {
        return Err(MteError::RankDeficient(
            "right-hand side is outside the column space".into(),
        ));
    }
    Ok(Solved { x, pseudo_inverse: true })
}

/// Solve with a vector right-hand side. Returns the solution and the
/// pseudo-inverse flag.
pub fn solve_vec(a: &Matrix, b: &Vector) -> Result<(Vector, bool)> {
    let bm = Matrix::from_column_slice(b.len(), 1, b.as_slice());
    let s = solve(a, &bm)?;
    Ok((Vector::from_column_slice(s.x.as_slice()), s.pseudo_inverse))
}

/// Inverse of a square matrix by LU.
/// Falls back to the pseudo-inverse when `a` is numerically singular.
pub fn inverse(a: &Matrix) -> Result<(Matrix, bool)> {
    if a.nrows() != a.ncols() {
        return Err(MteError::DimensionMismatch(format!(
            "inverse needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(MteError::InvalidData("non-finite entry in matrix".into()));
    }
    let id = Matrix::identity(a.nrows(), a.ncols());
    if let Some(x) = a.clone().lu().solve(&id) {
        if residual_ok(a, &x, &id, 1e-9) {
            return Ok((x, false));
        }
    }
    Ok((pseudo_inverse(a).0, true))
}

/// Moore–Penrose pseudo-inverse with relative cutoff [`PINV_RCOND`].
/// The flag reports whether any singular value was truncated.
pub fn pseudo_inverse(a: &Matrix) -> (Matrix, bool) {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return (Matrix::zeros(c, r), false);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = PINV_RCOND * smax;
    let mut truncated = false;
    let mut sigma_inv = Matrix::zeros(v_t.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            sigma_inv[(i, i)] = 1.0 / s;
        } else {
            truncated = true;
        }
    }
    (v_t.transpose() * sigma_inv * u.transpose(), truncated)
}

/// Standard normal CDF, Φ(x) = erfc(−x/√2)/2.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// SplitMix64 finaliser, used to derive independent child seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded random stream. A `(seed, stream)` pair always yields the same
/// sequence of draws; distinct streams of one seed are independent.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    draws: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, draws: 0, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of scalar draws taken through the `draw_*` methods.
    pub fn position(&self) -> u64 {
        self.draws
    }

    /// Uniform on `[lo, hi)`.
    pub fn draw_uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(MteError::InvalidParameter(format!(
                "uniform bounds must satisfy lo < hi, got [{lo}, {hi})"
            )));
        }
        self.draws += 1;
        let u: f64 = self.rng.random();
        Ok(lo + (hi - lo) * u)
    }

    pub fn draw_normal(&mut self, mean: f64, sd: f64) -> Result<f64> {
        if !(mean.is_finite() && sd.is_finite() && sd > 0.0) {
            return Err(MteError::InvalidParameter(format!(
                "normal needs finite mean and sd > 0, got ({mean}, {sd})"
            )));
        }
        self.draws += 1;
        let e: f64 = self.rng.sample(StandardNormal);
        Ok(mean + sd * e)
    }

    /// Returns 1.0 with probability `p`, else 0.0.
    pub fn draw_bernoulli(&mut self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(MteError::InvalidParameter(format!(
                "bernoulli probability must lie in [0, 1], got {p}"
            )));
        }
        self.draws += 1;
        let u: f64 = self.rng.random();
        Ok(if u < p { 1.0 } else { 0.0 })
    }

    pub(crate) fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn identity_solve() {
        let s = solve(&Matrix::identity(3, 3), &col(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(s.x.as_slice(), &[1.0, 2.0, 3.0]);
        assert!(!s.pseudo_inverse);
    }

    #[test]
    fn diagonal_solve() {
        let a = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let s = solve(&a, &col(&[2.0, 8.0])).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-15 && (s.x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn random_spd_residual() {
        let mut rng = RngState::new(7);
        let g = Matrix::from_fn(5, 5, |_, _| rng.draw_normal(0.0, 1.0).unwrap());
        let a = &g * g.transpose() + Matrix::identity(5, 5);
        let b = Matrix::from_fn(5, 1, |_, _| rng.draw_normal(0.0, 1.0).unwrap());
        let s = solve(&a, &b).unwrap();
        let r = &a * &s.x - &b;
        assert!(max_abs(&r) <= 1e-9 * (1.0 + max_abs(&b)));
    }

    #[test]
    fn singular_consistent_uses_pinv() {
        // rank 1, b in the column space
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = col(&[3.0, 6.0]);
        let s = solve(&a, &b).unwrap();
        assert!(s.pseudo_inverse);
        let r = &a * &s.x - &b;
        assert!(max_abs(&r) < 1e-8);
        // minimum-norm solution: x ∝ (1, 2)
        assert!((s.x[0] * 2.0 - s.x[1]).abs() < 1e-10);
    }

    #[test]
    fn singular_inconsistent_errors() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let err = solve(&a, &col(&[1.0, 0.0])).unwrap_err();
        assert!(err.to_string().contains("rank-deficient system"));
        let zero = Matrix::zeros(2, 2);
        assert!(solve(&zero, &col(&[1.0, 0.0])).is_err());
        assert!(solve(&zero, &col(&[0.0, 0.0])).unwrap().pseudo_inverse);
    }

    #[test]
    fn dimension_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(solve(&a, &col(&[1.0, 2.0])), Err(MteError::DimensionMismatch(_))));
        let a = Matrix::identity(2, 2);
        assert!(matches!(solve(&a, &col(&[1.0, 2.0, 3.0])), Err(MteError::DimensionMismatch(_))));
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(40.0) - 1.0).abs() <= 1e-15);
        assert!(std_normal_cdf(-40.0) >= 0.0 && std_normal_cdf(-40.0) < 1e-300);
        for &x in &[0.1, 0.7, 1.3, 2.9, 5.0] {
            assert!((std_normal_cdf(-x) - (1.0 - std_normal_cdf(x))).abs() < 1e-15);
        }
    }

    /// Composite Simpson integration of the normal density from 0 to x.
    fn simpson_cdf(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn normal_cdf_matches_quadrature() {
        assert!((std_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        for &x in &[0.25, 1.0, 1.959964, 3.0, 6.0] {
            assert!((std_normal_cdf(x) - simpson_cdf(x)).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn rng_is_reproducible_and_streams_differ() {
        let draw = |seed, stream| {
            let mut r = RngState::with_stream(seed, stream);
            (0..8).map(|_| r.draw_normal(0.0, 1.0).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11, 3), draw(11, 3));
        assert_ne!(draw(11, 3), draw(11, 4));
        assert_ne!(draw(11, 3), draw(12, 3));
    }

    #[test]
    fn bernoulli_edges_and_errors() {
        let mut r = RngState::new(1);
        assert!((0..1000).all(|_| r.draw_bernoulli(0.0).unwrap() == 0.0));
        assert!((0..1000).all(|_| r.draw_bernoulli(1.0).unwrap() == 1.0));
        assert!(r.draw_bernoulli(1.5).is_err());
        assert!(r.draw_normal(0.0, 0.0).is_err());
        assert!(r.draw_uniform(1.0, 1.0).is_err());
        assert_eq!(r.position(), 2000);
    }

    #[test]
    fn normal_moments_within_clt_bound() {
        let mut r = RngState::new(2024);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| r.draw_normal(0.0, 1.0).unwrap()).collect();
        let m = mean(&xs);
        assert!(m.abs() < 0.004, "mean {m}");
        let v = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
        // Var of x² is 2, so 4 SE ≈ 4·sqrt(2/n)
        assert!((v - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        let u: Vec<f64> = (0..n).map(|_| r.draw_uniform(0.0, 1.0).unwrap()).collect();
        assert!((mean(&u) - 0.5).abs() < 4.0 * (1.0 / 12.0 / n as f64).sqrt());
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let s: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
