//! Conventional (plug-in OLS) and efficient estimation of the MTE regression
//! parameters `γ` in `E[Y | X = x, π = p] = r(x, p)′γ`.
//!
//! With `e = A − π`, the sample moments are
//!
//! * `Ω = mean r r′`, `Υ = mean r Y`,
//! * `Γ = mean e · r · (∂r/∂p)′`, so that `Γγ = mean r · e · (∂r/∂p)′γ`.
//!
//! The conventional estimator is `γ̂ = Ω⁻¹Υ`; the efficient one is
//! `γ̃ = (Ω + Γ)⁻¹Υ`, the root of the mean influence function
//! `φ = Ω⁻¹ r [Y − r′γ − e (∂r/∂p)′γ]`.

use serde::{Deserialize, Serialize};

use crate::basis::{fill_dr, fill_r, fill_r_att, MteModelSpec};
use crate::data::Dataset;
use crate::error::{MteError, Result};
use crate::numerics::{inverse, solve_vec, Matrix, Vector};
use crate::par;
use crate::propensity::PropensityFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Conventional,
    Efficient,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Conventional => "conventional",
            Self::Efficient => "efficient",
        }
    }
}

/// Estimated `γ` with its covariance (already divided by `n`).
#[derive(Debug, Clone, PartialEq)]
pub struct GammaEstimate {
    pub gamma: Vector,
    pub covariance: Matrix,
    /// Heteroskedasticity-robust OLS covariance that ignores first-stage
    /// estimation. Only set for the conventional estimator.
    pub naive_covariance: Option<Matrix>,
    pub kind: EstimatorKind,
    pub spec: MteModelSpec,
    /// Set when a moment matrix was numerically singular and a
    /// pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

impl GammaEstimate {
    pub fn standard_errors(&self) -> Vector {
        Vector::from_iterator(
            self.covariance.nrows(),
            (0..self.covariance.nrows()).map(|j| self.covariance[(j, j)].max(0.0).sqrt()),
        )
    }
}

/// One observation with its plug-in propensity.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<'a> {
    pub y: f64,
    pub a: f64,
    pub x: &'a [f64],
    pub pi: f64,
}

/// Per-observation basis rows and the sample moment matrices, computed once
/// and shared by the γ and target estimators.
#[derive(Debug, Clone)]
pub struct SampleMoments {
    spec: MteModelSpec,
    n: usize,
    k: usize,
    r: Vec<f64>,
    dr: Vec<f64>,
    r_ate: Vec<f64>,
    y: Vec<f64>,
    a: Vec<f64>,
    pi: Vec<f64>,
    z: Vec<f64>,
    omega: Matrix,
    upsilon: Vector,
    gamma_mat: Matrix,
    omega_inv: Matrix,
    omega_pinv: bool,
}

impl SampleMoments {
    pub fn new(data: &Dataset, fit: &PropensityFit, spec: &MteModelSpec) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(MteError::InvalidData("empty dataset".into()));
        }
        if fit.len() != n {
            return Err(MteError::DimensionMismatch(format!(
                "{} propensities for {} observations",
                fit.len(),
                n
            )));
        }
        if data.dim() != spec.covariate_dim {
            return Err(MteError::DimensionMismatch(format!(
                "data has {} covariates, model expects {}",
                data.dim(),
                spec.covariate_dim
            )));
        }
        if let Some(&p) = fit.fitted.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(MteError::PropensityOutOfRange(p));
        }
        let k = spec.dim();
        let mut r = vec![0.0; n * k];
        let mut dr = vec![0.0; n * k];
        let mut r_ate = vec![0.0; n * k];
        for i in 0..n {
            let x = data.x_row(i);
            let p = fit.fitted[i];
            fill_r(x, p, spec, &mut r[i * k..(i + 1) * k]);
            fill_dr(x, p, spec, &mut dr[i * k..(i + 1) * k]);
            fill_r_att(x, 1.0, spec, &mut r_ate[i * k..(i + 1) * k]);
        }
        Self::from_parts(
            *spec,
            k,
            r,
            dr,
            r_ate,
            data.y().to_vec(),
            data.a().to_vec(),
            fit.fitted.clone(),
            data.z().to_vec(),
        )
    }

    /// Assemble from precomputed row-major basis rows. Lets tests use bases
    /// other than the polynomial MTE basis.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        spec: MteModelSpec,
        k: usize,
        r: Vec<f64>,
        dr: Vec<f64>,
        r_ate: Vec<f64>,
        y: Vec<f64>,
        a: Vec<f64>,
        pi: Vec<f64>,
        z: Vec<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if r.len() != n * k || dr.len() != n * k || r_ate.len() != n * k {
            return Err(MteError::DimensionMismatch("basis rows".into()));
        }
        if a.len() != n || pi.len() != n || z.len() != n {
            return Err(MteError::DimensionMismatch("observation vectors".into()));
        }
        let width = 2 * k * k + k;
        let sums = par::chunk_reduce(
            n,
            |range| {
                let mut acc = vec![0.0; width];
                for i in range {
                    let ri = &r[i * k..(i + 1) * k];
                    let di = &dr[i * k..(i + 1) * k];
                    let e = a[i] - pi[i];
                    for u in 0..k {
                        for v in 0..k {
                            acc[u * k + v] += ri[u] * ri[v];
                            acc[k * k + u * k + v] += e * ri[u] * di[v];
                        }
                        acc[2 * k * k + u] += ri[u] * y[i];
                    }
                }
                acc
            },
            add_vecs,
        )
        .unwrap_or_else(|| vec![0.0; width]);
        let nf = n as f64;
        let omega = Matrix::from_row_slice(k, k, &sums[..k * k]) / nf;
        let gamma_mat = Matrix::from_row_slice(k, k, &sums[k * k..2 * k * k]) / nf;
        let upsilon = Vector::from_column_slice(&sums[2 * k * k..]) / nf;
        let (omega_inv, omega_pinv) = inverse(&omega)?;
        Ok(Self {
            spec,
            n,
            k,
            r,
            dr,
            r_ate,
            y,
            a,
            pi,
            z,
            omega,
            upsilon,
            gamma_mat,
            omega_inv,
            omega_pinv,
        })
    }

    pub fn spec(&self) -> &MteModelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn omega(&self) -> &Matrix {
        &self.omega
    }

    pub fn omega_inv(&self) -> &Matrix {
        &self.omega_inv
    }

    pub fn upsilon(&self) -> &Vector {
        &self.upsilon
    }

    /// The first-stage correction matrix `Γ`.
    pub fn gamma_matrix(&self) -> &Matrix {
        &self.gamma_mat
    }

    pub fn omega_is_singular(&self) -> bool {
        self.omega_pinv
    }

    pub(crate) fn r_row(&self, i: usize) -> &[f64] {
        &self.r[i * self.k..(i + 1) * self.k]
    }

    pub(crate) fn dr_row(&self, i: usize) -> &[f64] {
        &self.dr[i * self.k..(i + 1) * self.k]
    }

    pub(crate) fn r_ate_row(&self, i: usize) -> &[f64] {
        &self.r_ate[i * self.k..(i + 1) * self.k]
    }

    pub(crate) fn y(&self) -> &[f64] {
        &self.y
    }

    pub(crate) fn a(&self) -> &[f64] {
        &self.a
    }

    pub(crate) fn z(&self) -> &[f64] {
        &self.z
    }

    pub(crate) fn resid_a(&self, i: usize) -> f64 {
        self.a[i] - self.pi[i]
    }

    /// Chunked, deterministic sample mean of a per-observation vector.
    pub(crate) fn mean_vec(&self, width: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) -> Vector {
        let s = par::chunk_reduce(
            self.n,
            |range| {
                let mut acc = vec![0.0; width];
                for i in range {
                    f(i, &mut acc);
                }
                acc
            },
            add_vecs,
        )
        .unwrap_or_else(|| vec![0.0; width]);
        Vector::from_vec(s) / self.n as f64
    }

    /// `mean (ψ ψ′)` over observations (centred when `center` is set).
    pub(crate) fn second_moment(
        &self,
        center: bool,
        f: impl Fn(usize, &mut [f64]) + Sync + Send,
    ) -> Matrix {
        let k = self.k;
        let m = if center { Some(self.mean_vec(k, &f)) } else { None };
        let s = par::chunk_reduce(
            self.n,
            |range| {
                let mut acc = vec![0.0; k * k];
                let mut v = vec![0.0; k];
                for i in range {
                    v.fill(0.0);
                    f(i, &mut v);
                    if let Some(m) = &m {
                        for (vj, mj) in v.iter_mut().zip(m.iter()) {
                            *vj -= mj;
                        }
                    }
                    for u in 0..k {
                        for w in 0..k {
                            acc[u * k + w] += v[u] * v[w];
                        }
                    }
                }
                acc
            },
            add_vecs,
        )
        .unwrap_or_else(|| vec![0.0; k * k]);
        let out = Matrix::from_row_slice(k, k, &s) / self.n as f64;
        (&out + out.transpose()) * 0.5
    }

    /// Adds `r_i · (y_i − r_i′γ − e_i·dr_i′γ)` to `out`: the bracket of the
    /// efficient influence function before the `Ω⁻¹` factor.
    pub(crate) fn add_eif_core(&self, i: usize, gamma: &Vector, out: &mut [f64]) {
        let ri = self.r_row(i);
        let resid = self.y[i] - dot(ri, gamma.as_slice()) - self.resid_a(i) * dot(self.dr_row(i), gamma.as_slice());
        for (o, r) in out.iter_mut().zip(ri) {
            *o += r * resid;
        }
    }
}

pub(crate) fn add_vecs(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn conventional_gamma(data: &Dataset, fit: &PropensityFit, spec: &MteModelSpec) -> Result<GammaEstimate> {
    conventional_from_moments(&SampleMoments::new(data, fit, spec)?)
}

pub fn efficient_gamma(data: &Dataset, fit: &PropensityFit, spec: &MteModelSpec) -> Result<GammaEstimate> {
    efficient_from_moments(&SampleMoments::new(data, fit, spec)?)
}

/// `γ̂ = Ω⁻¹Υ` with covariance `Ω⁻¹ Φ Ω⁻¹ / n`, where `Φ` is the second
/// moment of the OLS score corrected for first-stage estimation.
pub fn conventional_from_moments(m: &SampleMoments) -> Result<GammaEstimate> {
    let (gamma, pinv) = solve_vec(m.omega(), m.upsilon())?;
    let k = m.dim();
    let g = gamma.as_slice();
    // r(y − r′γ) − r·e·dr′γ, i.e. the OLS score plus its first-stage term
    let phi = m.second_moment(false, |i, out| {
        let ri = m.r_row(i);
        let c = m.y()[i] - dot(ri, g) - m.resid_a(i) * dot(m.dr_row(i), g);
        for u in 0..k {
            out[u] = ri[u] * c;
        }
    });
    let naive = m.second_moment(false, |i, out| {
        let ri = m.r_row(i);
        let c = m.y()[i] - dot(ri, g);
        for u in 0..k {
            out[u] = ri[u] * c;
        }
    });
    let nf = m.n() as f64;
    let oi = m.omega_inv();
    let sandwich = |s: &Matrix| {
        let c = oi * s * oi.transpose() / nf;
        (&c + c.transpose()) * 0.5
    };
    Ok(GammaEstimate {
        covariance: sandwich(&phi),
        naive_covariance: Some(sandwich(&naive)),
        gamma,
        kind: EstimatorKind::Conventional,
        spec: *m.spec(),
        pseudo_inverse: pinv || m.omega_is_singular(),
    })
}

/// `γ̃ = (Ω + Γ)⁻¹Υ` with covariance `var(φ)/n`.
pub fn efficient_from_moments(m: &SampleMoments) -> Result<GammaEstimate> {
    let lhs = m.omega() + m.gamma_matrix();
    let (gamma, pinv) = solve_vec(&lhs, m.upsilon())?;
    let covariance = eif_covariance(m, &gamma);
    Ok(GammaEstimate {
        gamma,
        covariance,
        naive_covariance: None,
        kind: EstimatorKind::Efficient,
        spec: *m.spec(),
        pseudo_inverse: pinv || m.omega_is_singular(),
    })
}

/// Centred sample covariance of the γ influence function at `gamma`, over `n`.
pub fn eif_covariance(m: &SampleMoments, gamma: &Vector) -> Matrix {
    let core = m.second_moment(true, |i, out| m.add_eif_core(i, gamma, out));
    let oi = m.omega_inv();
    let c = oi * core * oi.transpose() / m.n() as f64;
    (&c + c.transpose()) * 0.5
}

/// Efficient influence function of `γ` at one observation:
/// `Ω⁻¹ r [y − r′γ − (a − π)(∂r/∂p)′γ]`.
pub fn eif_gamma(obs: &Observation, gamma: &Vector, spec: &MteModelSpec, omega_inv: &Matrix) -> Result<Vector> {
    let r = crate::basis::build_r(obs.x, obs.pi, spec)?;
    let dr = crate::basis::build_dr_dp(obs.x, obs.pi, spec)?;
    check_len(gamma, spec)?;
    let resid = obs.y - r.dot(gamma) - (obs.a - obs.pi) * dr.dot(gamma);
    Ok(omega_inv * r * resid)
}

/// First-stage term `ψ = r (a − π) (∂r/∂p)′γ`. The first-stage influence
/// on the OLS moment is `−ψ`.
pub fn fsif_term(obs: &Observation, gamma: &Vector, spec: &MteModelSpec) -> Result<Vector> {
    let r = crate::basis::build_r(obs.x, obs.pi, spec)?;
    let dr = crate::basis::build_dr_dp(obs.x, obs.pi, spec)?;
    check_len(gamma, spec)?;
    Ok(r * ((obs.a - obs.pi) * dr.dot(gamma)))
}

fn check_len(gamma: &Vector, spec: &MteModelSpec) -> Result<()> {
    if gamma.len() != spec.dim() {
        return Err(MteError::DimensionMismatch(format!(
            "γ has length {}, basis has {}",
            gamma.len(),
            spec.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CovariateKind;
    use crate::numerics::RngState;
    use proptest::prelude::*;

    fn toy(seed: u64, n: usize) -> (Dataset, PropensityFit) {
        let mut r = RngState::new(seed);
        let mut rows = Vec::new();
        let (mut y, mut a, mut z, mut pi) = (vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let x = r.draw_bernoulli(0.5).unwrap();
            let zi = r.draw_normal(0.0, 1.0).unwrap();
            let p = crate::numerics::std_normal_cdf(0.8 * zi - 0.2 * x);
            let ai = r.draw_bernoulli(p).unwrap();
            rows.push(vec![x]);
            z.push(zi);
            pi.push(p);
            a.push(ai);
            y.push(0.3 + 0.1 * x + ai * (0.2 - 0.5 * p) + r.draw_normal(0.0, 0.3).unwrap());
        }
        let ds = Dataset::new(y, a, rows, vec![CovariateKind::Discrete], z).unwrap();
        let fit = PropensityFit::from_known(&ds, pi).unwrap();
        (ds, fit)
    }

    #[test]
    fn intercept_only_basis_gives_mean() {
        let y = vec![1.0, 4.0, 2.5, -0.5];
        let n = y.len();
        let m = SampleMoments::from_parts(
            MteModelSpec::linear(0),
            1,
            vec![1.0; n],
            vec![0.0; n],
            vec![0.0; n],
            y.clone(),
            vec![0.0, 1.0, 0.0, 1.0],
            vec![0.5; n],
            vec![0.0; n],
        )
        .unwrap();
        let g = conventional_from_moments(&m).unwrap();
        assert!((g.gamma[0] - 1.75).abs() < 1e-15);
    }

    /// Normal equations by Gaussian elimination on the augmented system.
    fn brute_normal_equations(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let k = rows[0].len();
        let mut aug = vec![vec![0.0; k + 1]; k];
        for (r, yi) in rows.iter().zip(y) {
            for u in 0..k {
                for v in 0..k {
                    aug[u][v] += r[u] * r[v];
                }
                aug[u][k] += r[u] * yi;
            }
        }
        for c in 0..k {
            let piv = (c..k).max_by(|&i, &j| aug[i][c].abs().total_cmp(&aug[j][c].abs())).unwrap();
            aug.swap(c, piv);
            for i in 0..k {
                if i != c {
                    let f = aug[i][c] / aug[c][c];
                    for v in c..=k {
                        aug[i][v] -= f * aug[c][v];
                    }
                }
            }
        }
        (0..k).map(|u| aug[u][k] / aug[u][u]).collect()
    }

    #[test]
    fn six_row_hand_dataset_matches_normal_equations() {
        let x = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let p = [0.2, 0.35, 0.5, 0.6, 0.8, 0.9];
        let y = [0.1, 0.7, -0.3, 1.2, 0.4, 0.9];
        let a = [0.0, 1.0, 0.0, 1.0, 1.0, 1.0];
        let spec = MteModelSpec::linear(1);
        let ds = Dataset::new(
            y.to_vec(),
            a.to_vec(),
            x.iter().map(|v| vec![*v]).collect(),
            vec![CovariateKind::Discrete],
            vec![0.0; 6],
        )
        .unwrap();
        let fit = PropensityFit::from_known(&ds, p.to_vec()).unwrap();
        let got = conventional_gamma(&ds, &fit, &spec).unwrap();
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, x[i], p[i], x[i] * p[i], p[i] * p[i]]).collect();
        let want = brute_normal_equations(&rows, &y);
        for j in 0..5 {
            assert!((got.gamma[j] - want[j]).abs() < 1e-10, "{j}: {} vs {}", got.gamma[j], want[j]);
        }
    }

    #[test]
    fn zero_first_stage_residual_makes_estimators_equal() {
        let (ds, fit) = toy(3, 300);
        let ds = Dataset::with_fractional_treatment(
            ds.y().to_vec(),
            fit.fitted.clone(),
            (0..ds.len()).map(|i| ds.x_row(i).to_vec()).collect(),
            ds.kinds().to_vec(),
            ds.z().to_vec(),
        )
        .unwrap();
        let m = SampleMoments::new(&ds, &fit, &MteModelSpec::linear(1)).unwrap();
        assert!(m.gamma_matrix().iter().all(|v| *v == 0.0));
        let c = conventional_from_moments(&m).unwrap();
        let e = efficient_from_moments(&m).unwrap();
        assert_eq!(c.gamma, e.gamma);
    }

    #[test]
    fn mean_eif_vanishes_at_efficient_estimate() {
        for (spec, seed) in [(MteModelSpec::linear(1), 5), (MteModelSpec::new(2, true, 1).unwrap(), 6)] {
            let (ds, fit) = toy(seed, 2000);
            let m = SampleMoments::new(&ds, &fit, &spec).unwrap();
            let e = efficient_from_moments(&m).unwrap();
            let mut acc = Vector::zeros(spec.dim());
            for i in 0..ds.len() {
                let obs = Observation { y: ds.y()[i], a: ds.a()[i], x: ds.x_row(i), pi: fit.fitted[i] };
                acc += eif_gamma(&obs, &e.gamma, &spec, m.omega_inv()).unwrap();
            }
            acc /= ds.len() as f64;
            assert!(acc.amax() < 1e-10, "{acc}");
            // estimating equation mean r(y − r′γ − e·dr′γ) = 0
            let eq = m.mean_vec(spec.dim(), |i, out| m.add_eif_core(i, &e.gamma, out));
            assert!(eq.amax() < 1e-10);
        }
    }

    #[test]
    fn eif_and_fsif_special_cases() {
        let spec = MteModelSpec::linear(1);
        let gamma = Vector::from_vec(vec![0.3, 0.1, -0.1, 0.1, 0.3]);
        let oi = Matrix::identity(5, 5);
        let x = [1.0];
        let r = crate::basis::build_r(&x, 0.4, &spec).unwrap();
        let obs = Observation { y: r.dot(&gamma), a: 0.4, x: &x, pi: 0.4 };
        assert!(eif_gamma(&obs, &gamma, &spec, &oi).unwrap().amax() == 0.0);
        assert!(fsif_term(&obs, &gamma, &spec).unwrap().amax() == 0.0);
        let obs1 = Observation { a: 1.0, ..obs.clone() };
        assert!(fsif_term(&obs1, &Vector::zeros(5), &spec).unwrap().amax() == 0.0);
        // linearity in y: the y-part scales exactly
        let base = Observation { y: 0.0, ..obs1.clone() };
        let y1 = Observation { y: 1.0, ..obs1.clone() };
        let y3 = Observation { y: 3.0, ..obs1.clone() };
        let e0 = eif_gamma(&base, &gamma, &spec, &oi).unwrap();
        let d1 = eif_gamma(&y1, &gamma, &spec, &oi).unwrap() - &e0;
        let d3 = eif_gamma(&y3, &gamma, &spec, &oi).unwrap() - &e0;
        assert!((d3 - d1 * 3.0).amax() < 1e-14);
        assert!(fsif_term(&obs, &Vector::zeros(4), &spec).is_err());
    }

    /// Gateaux oracle for the first-stage influence on the OLS moment
    /// `E r(X, π(X,Z)) (Y − r′γ)`, with π the cell mean of A. Contaminating
    /// towards an observation õ moves the moment by its own score minus the
    /// moment, plus the first-stage term, which should equal `−ψ(õ)`.
    #[test]
    fn fsif_matches_numeric_gateaux_derivative() {
        let spec = MteModelSpec::linear(1);
        let gamma = Vector::from_vec(vec![0.3, 0.1, -0.1, 0.1, 0.3]);
        let cells = [0.0, 0.0, 1.0, 1.0];
        let treated = [2usize, 3, 1, 4];
        // (x, a, cell), five observations per cell
        let mut obs = Vec::new();
        for c in 0..4 {
            for j in 0..5 {
                obs.push((cells[c], if j < treated[c] { 1.0 } else { 0.0 }, c));
            }
        }
        let n = obs.len();
        let pi_cell = |w: &[f64]| -> Vec<f64> {
            (0..4)
                .map(|c| {
                    let (mut num, mut den) = (0.0, 0.0);
                    for (i, o) in obs.iter().enumerate() {
                        if o.2 == c {
                            num += w[i] * o.1;
                            den += w[i];
                        }
                    }
                    num / den
                })
                .collect()
        };
        let base_w = vec![1.0 / n as f64; n];
        let pi0 = pi_cell(&base_w);
        // every outcome sits on the regression function, so cell means of Y equal r′γ
        let ys: Vec<f64> = obs
            .iter()
            .map(|o| crate::basis::build_r(&[o.0], pi0[o.2], &spec).unwrap().dot(&gamma))
            .collect();
        let moment = |w: &[f64]| -> Vector {
            let pi = pi_cell(w);
            let mut acc = Vector::zeros(5);
            for (i, o) in obs.iter().enumerate() {
                let r = crate::basis::build_r(&[o.0], pi[o.2], &spec).unwrap();
                acc += &r * (w[i] * (ys[i] - r.dot(&gamma)));
            }
            acc
        };
        for point in [1usize, 3, 7, 12, 19] {
            let perturb = |t: f64| -> Vec<f64> {
                let mut w: Vec<f64> = base_w.iter().map(|v| v * (1.0 - t)).collect();
                w[point] += t;
                w
            };
            let t = 1e-6;
            let deriv = (moment(&perturb(t)) - moment(&perturb(-t))) / (2.0 * t);
            let o = obs[point];
            let r = crate::basis::build_r(&[o.0], pi0[o.2], &spec).unwrap();
            let own_score = &r * (ys[point] - r.dot(&gamma)) - moment(&base_w);
            let first_stage = deriv - own_score;
            let x = [o.0];
            let psi = fsif_term(&Observation { y: ys[point], a: o.1, x: &x, pi: pi0[o.2] }, &gamma, &spec).unwrap();
            assert!(psi.amax() > 1e-3);
            assert!((&first_stage + &psi).amax() < 1e-6, "{first_stage} vs {psi}");
        }
    }

    #[test]
    fn covariances_are_symmetric_psd() {
        let (ds, fit) = toy(9, 1000);
        let spec = MteModelSpec::new(2, true, 1).unwrap();
        let c = conventional_gamma(&ds, &fit, &spec).unwrap();
        let e = efficient_gamma(&ds, &fit, &spec).unwrap();
        for m in [&c.covariance, &e.covariance, c.naive_covariance.as_ref().unwrap()] {
            assert_eq!(m, &m.transpose());
            let eig = m.clone().symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|v| *v >= -1e-10));
        }
        assert!(!c.pseudo_inverse && !e.pseudo_inverse);
    }

    #[test]
    fn collinear_basis_flags_pseudo_inverse() {
        let n = 60;
        let (ds, _) = toy(1, n);
        let fit = PropensityFit::from_known(&ds, vec![0.5; n]).unwrap();
        let g = conventional_gamma(&ds, &fit, &MteModelSpec::linear(1)).unwrap();
        assert!(g.pseudo_inverse);
        assert!(g.gamma.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (ds, fit) = toy(17, 3000);
        let spec = MteModelSpec::linear(1);
        let a = efficient_gamma(&ds, &fit, &spec).unwrap();
        let b = par::sequential(|| efficient_gamma(&ds, &fit, &spec).unwrap());
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn drift_zero_holds_for_random_samples(seed in 0u64..10_000, n in 80usize..400) {
            let (ds, fit) = toy(seed, n);
            let spec = MteModelSpec::linear(1);
            let m = SampleMoments::new(&ds, &fit, &spec).unwrap();
            let e = efficient_from_moments(&m).unwrap();
            let eq = m.mean_vec(spec.dim(), |i, out| m.add_eif_core(i, &e.gamma, out));
            prop_assert!(eq.amax() < 1e-10);
        }
    }
}
