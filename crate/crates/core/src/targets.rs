//! Target estimands as linear functionals `ω′γ` of the MTE parameters, and
//! the MTE curve averaged over covariates.
//!
//! Conventional weights plug the estimated propensity into the population
//! weights. Efficient weights add the first-stage correction
//! `−(Ω⁻¹Γ)′ω` and, for estimands that depend on the propensity directly,
//! a mean-derivative term. Standard errors come from the influence function
//! of each estimand.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::basis::{fill_dr, MteModelSpec};
use crate::data::Dataset;
use crate::error::{MteError, Result};
use crate::estimators::{dot, EstimatorKind, GammaEstimate, SampleMoments};
use crate::numerics::{mean, Matrix, Vector};
use crate::propensity::PropensityFit;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "ATE")]
    Ate,
    #[serde(rename = "ATT")]
    Att,
    #[serde(rename = "ATU")]
    Atu,
    #[serde(rename = "ASG")]
    Asg,
    #[serde(rename = "IV")]
    Iv,
}

impl Estimand {
    pub const ALL: [Estimand; 5] = [Self::Ate, Self::Att, Self::Atu, Self::Asg, Self::Iv];
    /// The four estimands with a closed-form simulation truth.
    pub const TREATMENT_EFFECTS: [Estimand; 4] = [Self::Ate, Self::Att, Self::Atu, Self::Asg];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ate => "ATE",
            Self::Att => "ATT",
            Self::Atu => "ATU",
            Self::Asg => "ASG",
            Self::Iv => "IV",
        }
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a [`TargetEstimate`] refers to: an estimand, or the MTE at one `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetKind {
    Estimand(Estimand),
    MteAt { v: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEstimate {
    pub kind: TargetKind,
    pub method: EstimatorKind,
    pub point: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl TargetEstimate {
    pub fn new(kind: TargetKind, method: EstimatorKind, point: f64, se: f64) -> Result<Self> {
        if !(se.is_finite() && se >= 0.0 && point.is_finite()) {
            return Err(MteError::InvalidData(format!(
                "non-finite estimate or standard error for {kind:?}"
            )));
        }
        Ok(Self { kind, method, point, se, ci_lower: point - Z_95 * se, ci_upper: point + Z_95 * se })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MteCurve {
    pub v_grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
}

/// Per-sample quantities shared by all estimands.
struct Shares {
    /// `1 / P̂(A=1)` and `1 / P̂(A=0)`.
    p1: f64,
    p0: f64,
    abar: f64,
    zbar: f64,
    /// `mean (A − Ā)(Z − Z̄)`.
    cov_az: f64,
}

fn shares(m: &SampleMoments) -> Result<Shares> {
    let abar = mean(m.a());
    if !(abar > 0.0 && abar < 1.0) {
        return Err(MteError::UndefinedConditional(format!(
            "treated share is {abar}; ATT and ATU need both groups"
        )));
    }
    let zbar = mean(m.z());
    let cov_az = m.a().iter().zip(m.z()).map(|(a, z)| (a - abar) * (z - zbar)).sum::<f64>() / m.n() as f64;
    Ok(Shares { p1: 1.0 / abar, p0: 1.0 / (1.0 - abar), abar, zbar, cov_az })
}

fn check_instrument(s: &Shares) -> Result<()> {
    if s.cov_az.abs() < 1e-12 {
        return Err(MteError::IrrelevantInstrument(s.cov_az.abs()));
    }
    Ok(())
}

/// Conventional (plug-in) weight `ω` with `θ = ω′γ`.
pub fn conventional_weight(kind: Estimand, m: &SampleMoments) -> Result<Vector> {
    let s = shares(m)?;
    conventional_weight_with(kind, m, &s)
}

fn conventional_weight_with(kind: Estimand, m: &SampleMoments, s: &Shares) -> Result<Vector> {
    let k = m.dim();
    let off = m.spec().p_offset();
    let mean_ate = || m.mean_vec(k, |i, out| add(out, m.r_ate_row(i), 1.0));
    // r_ATT(x, π) is r(x, π) with the p-free leading entries dropped
    let mean_att = || {
        m.mean_vec(k, |i, out| {
            let r = m.r_row(i);
            for u in off..k {
                out[u] += r[u];
            }
        })
    };
    Ok(match kind {
        Estimand::Ate => mean_ate(),
        Estimand::Att => mean_att() * s.p1,
        Estimand::Atu => (mean_ate() - mean_att()) * s.p0,
        Estimand::Asg => mean_att() * s.p1 - (mean_ate() - mean_att()) * s.p0,
        Estimand::Iv => {
            check_instrument(s)?;
            m.mean_vec(k, |i, out| add(out, m.r_row(i), m.z()[i] - s.zbar)) / s.cov_az
        }
    })
}

/// Efficient weight `ω̃`, to be applied to the conventional `γ̂`.
pub fn efficient_weight(kind: Estimand, m: &SampleMoments) -> Result<Vector> {
    let s = shares(m)?;
    efficient_weight_with(kind, m, &s)
}

fn efficient_weight_with(kind: Estimand, m: &SampleMoments, s: &Shares) -> Result<Vector> {
    let k = m.dim();
    let omega = conventional_weight_with(kind, m, s)?;
    let b = m.omega_inv() * m.gamma_matrix();
    let base = &omega - b.transpose() * &omega;
    let mean_dr_e = || m.mean_vec(k, |i, out| add(out, m.dr_row(i), m.resid_a(i)));
    Ok(match kind {
        Estimand::Ate => base,
        Estimand::Att => base + mean_dr_e() * s.p1,
        Estimand::Atu => base - mean_dr_e() * s.p0,
        Estimand::Asg => base + mean_dr_e() * (s.p1 + s.p0),
        Estimand::Iv => base + m.mean_vec(k, |i, out| add(out, m.dr_row(i), m.resid_a(i) * (m.z()[i] - s.zbar))) / s.cov_az,
    })
}

fn add(out: &mut [f64], v: &[f64], c: f64) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += c * x;
    }
}

/// Point estimate and per-observation influence function values.
#[derive(Debug, Clone)]
pub struct TargetInfluence {
    pub point: f64,
    pub influence: Vec<f64>,
}

/// Influence function of an estimand evaluated at `(θ, γ)`, where `θ` is
/// `weight′γ` for the method's weight.
pub fn target_influence(
    kind: Estimand,
    method: EstimatorKind,
    m: &SampleMoments,
    gamma: &Vector,
) -> Result<TargetInfluence> {
    let s = shares(m)?;
    let weight = match method {
        EstimatorKind::Conventional => conventional_weight_with(kind, m, &s)?,
        EstimatorKind::Efficient => efficient_weight_with(kind, m, &s)?,
    };
    let theta = weight.dot(gamma);
    let influence = match kind {
        Estimand::Asg => {
            let att = influence_at(Estimand::Att, m, &s, gamma, theta_of(Estimand::Att, method, m, &s, gamma)?)?;
            let atu = influence_at(Estimand::Atu, m, &s, gamma, theta_of(Estimand::Atu, method, m, &s, gamma)?)?;
            att.iter().zip(&atu).map(|(a, b)| a - b).collect()
        }
        _ => influence_at(kind, m, &s, gamma, theta)?,
    };
    Ok(TargetInfluence { point: theta, influence })
}

fn theta_of(kind: Estimand, method: EstimatorKind, m: &SampleMoments, s: &Shares, gamma: &Vector) -> Result<f64> {
    Ok(match method {
        EstimatorKind::Conventional => conventional_weight_with(kind, m, s)?,
        EstimatorKind::Efficient => efficient_weight_with(kind, m, s)?,
    }
    .dot(gamma))
}

fn influence_at(kind: Estimand, m: &SampleMoments, s: &Shares, gamma: &Vector, theta: f64) -> Result<Vec<f64>> {
    let g = gamma.as_slice();
    let omega = conventional_weight_with(kind, m, s)?;
    let proj = m.omega_inv() * &omega;
    let off = m.spec().p_offset();
    let rbar_gamma = if kind == Estimand::Iv {
        (0..m.n()).map(|i| dot(m.r_row(i), g)).sum::<f64>() / m.n() as f64
    } else {
        0.0
    };
    let out = (0..m.n())
        .map(|i| {
            let r = m.r_row(i);
            let e = m.resid_a(i);
            let dr_g = dot(m.dr_row(i), g);
            let r_g = dot(r, g);
            let resid = m.y()[i] - r_g - e * dr_g;
            let gamma_part = dot(proj.as_slice(), r) * resid;
            let att_g = dot(&r[off..], &g[off..]);
            let a = m.a()[i];
            let own = match kind {
                Estimand::Ate => dot(m.r_ate_row(i), g) - theta,
                Estimand::Att => s.p1 * (att_g + e * dr_g) - theta * s.p1 * a,
                Estimand::Atu => {
                    let atu_g = dot(m.r_ate_row(i), g) - att_g;
                    s.p0 * (atu_g - e * dr_g) - theta * s.p0 * (1.0 - a)
                }
                Estimand::Iv => {
                    (m.z()[i] - s.zbar) * (r_g - rbar_gamma + e * dr_g - (a - s.abar) * theta) / s.cov_az
                }
                Estimand::Asg => unreachable!("handled as a difference"),
            };
            own + gamma_part
        })
        .collect();
    Ok(out)
}

fn se_from_influence(influence: &[f64]) -> f64 {
    let n = influence.len() as f64;
    let mu = mean(influence);
    (influence.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n / n).sqrt()
}

/// Point estimate, influence-function standard error and 95% CI.
pub fn estimate_target(
    kind: Estimand,
    method: EstimatorKind,
    m: &SampleMoments,
    gamma_hat: &Vector,
) -> Result<TargetEstimate> {
    let inf = target_influence(kind, method, m, gamma_hat)?;
    TargetEstimate::new(TargetKind::Estimand(kind), method, inf.point, se_from_influence(&inf.influence))
}

/// Efficient instrumental-variables estimand with its standard error.
pub fn estimate_iv(m: &SampleMoments, gamma_hat: &Vector) -> Result<TargetEstimate> {
    estimate_target(Estimand::Iv, EstimatorKind::Efficient, m, gamma_hat)
}

/// Difference `θ_first − θ_second` with the standard error of the
/// difference of influence functions.
pub fn estimate_contrast(
    first: Estimand,
    second: Estimand,
    method: EstimatorKind,
    m: &SampleMoments,
    gamma_hat: &Vector,
) -> Result<(f64, f64)> {
    let a = target_influence(first, method, m, gamma_hat)?;
    let b = target_influence(second, method, m, gamma_hat)?;
    let d: Vec<f64> = a.influence.iter().zip(&b.influence).map(|(x, y)| x - y).collect();
    Ok((a.point - b.point, se_from_influence(&d)))
}

/// Options for [`estimate_all`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TargetOptions {
    /// Apply efficient weights to `γ̃` instead of `γ̂`. Off by default.
    pub efficient_weights_on_efficient_gamma: bool,
}

/// Everything the estimation pipeline produces for one sample.
#[derive(Debug, Clone)]
pub struct Estimates {
    pub conventional: GammaEstimate,
    pub efficient: GammaEstimate,
    pub targets: Vec<TargetEstimate>,
}

impl Estimates {
    pub fn target(&self, kind: Estimand, method: EstimatorKind) -> Option<&TargetEstimate> {
        self.targets
            .iter()
            .find(|t| t.kind == TargetKind::Estimand(kind) && t.method == method)
    }

    pub fn gamma(&self, method: EstimatorKind) -> &GammaEstimate {
        match method {
            EstimatorKind::Conventional => &self.conventional,
            EstimatorKind::Efficient => &self.efficient,
        }
    }
}

/// `γ̂`, `γ̃` and every requested estimand under both methods.
pub fn estimate_all(
    m: &SampleMoments,
    kinds: &[Estimand],
    options: TargetOptions,
) -> Result<Estimates> {
    let conventional = crate::estimators::conventional_from_moments(m)?;
    let efficient = crate::estimators::efficient_from_moments(m)?;
    let mut targets = Vec::new();
    for method in [EstimatorKind::Conventional, EstimatorKind::Efficient] {
        let gamma = if method == EstimatorKind::Efficient && options.efficient_weights_on_efficient_gamma {
            &efficient.gamma
        } else {
            &conventional.gamma
        };
        for &kind in kinds {
            targets.push(estimate_target(kind, method, m, gamma)?);
        }
    }
    Ok(Estimates { conventional, efficient, targets })
}

/// Average MTE weights `w(v) = mean_i ∂r(x_i, v)/∂v`.
pub fn mte_weight(data: &Dataset, spec: &MteModelSpec, v: f64) -> Result<Vector> {
    if !(0.0..=1.0).contains(&v) {
        return Err(MteError::PropensityOutOfRange(v));
    }
    if data.is_empty() {
        return Err(MteError::InvalidData("no observations to average over".into()));
    }
    let k = spec.dim();
    let mut w = Vector::zeros(k);
    let mut buf = vec![0.0; k];
    for i in 0..data.len() {
        fill_dr(data.x_row(i), v, spec, &mut buf);
        for (wu, b) in w.iter_mut().zip(&buf) {
            *wu += b;
        }
    }
    Ok(w / data.len() as f64)
}

/// Covariate-row predicate used to restrict an MTE curve to a subpopulation.
pub type RowFilter<'a> = &'a dyn Fn(&[f64]) -> bool;

/// MTE curve averaged over the empirical covariate distribution, optionally
/// restricted to observations whose covariates pass `filter`.
pub fn mte_curve(
    gamma: &GammaEstimate,
    data: &Dataset,
    fit: &PropensityFit,
    grid: &[f64],
    filter: Option<RowFilter<'_>>,
) -> Result<MteCurve> {
    let (lo, hi) = (fit.min(), fit.max());
    if grid.is_empty() {
        return Err(MteError::InvalidParameter("empty evaluation grid".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MteError::InvalidParameter("grid must be strictly increasing".into()));
    }
    if let Some(v) = grid.iter().find(|v| **v < lo || **v > hi) {
        return Err(MteError::NoCommonSupport(format!(
            "grid point {v} lies outside the estimated propensity range [{lo:.4}, {hi:.4}]"
        )));
    }
    let sub;
    let sample = match filter {
        Some(f) => {
            sub = data.filter_rows(f);
            &sub
        }
        None => data,
    };
    let mut curve = MteCurve { v_grid: grid.to_vec(), estimate: vec![], se: vec![], ci_lower: vec![], ci_upper: vec![] };
    for &v in grid {
        let w = mte_weight(sample, &gamma.spec, v)?;
        let est = w.dot(&gamma.gamma);
        let se = quad_form(&gamma.covariance, &w).max(0.0).sqrt();
        curve.estimate.push(est);
        curve.se.push(se);
        curve.ci_lower.push(est - Z_95 * se);
        curve.ci_upper.push(est + Z_95 * se);
    }
    Ok(curve)
}

fn quad_form(m: &Matrix, w: &Vector) -> f64 {
    w.dot(&(m * w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CovariateKind;
    use crate::estimators::conventional_from_moments;
    use crate::numerics::{std_normal_cdf, RngState};
    use proptest::prelude::*;

    fn sample(seed: u64, n: usize, effect_slope: f64) -> (Dataset, PropensityFit) {
        let mut r = RngState::new(seed);
        let mut rows = Vec::new();
        let (mut y, mut a, mut z, mut pi) = (vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let x = r.draw_bernoulli(0.5).unwrap();
            let zi = r.draw_normal(0.0, 1.0).unwrap();
            let p = std_normal_cdf(0.7 * zi - 0.2 * x);
            let v = r.draw_uniform(0.0, 1.0).unwrap();
            let ai = if p > v { 1.0 } else { 0.0 };
            rows.push(vec![x]);
            z.push(zi);
            pi.push(p);
            a.push(ai);
            y.push(0.3 + 0.1 * x + ai * (0.2 + effect_slope * (0.5 - v)) + r.draw_normal(0.0, 0.2).unwrap());
        }
        let ds = Dataset::new(y, a, rows, vec![CovariateKind::Discrete], z).unwrap();
        let fit = PropensityFit::from_known(&ds, pi).unwrap();
        (ds, fit)
    }

    fn moments(seed: u64, n: usize) -> (Dataset, PropensityFit, SampleMoments) {
        let (ds, fit) = sample(seed, n, 0.6);
        let m = SampleMoments::new(&ds, &fit, &MteModelSpec::linear(1)).unwrap();
        (ds, fit, m)
    }

    #[test]
    fn asg_weight_is_att_minus_atu() {
        let (_, _, m) = moments(1, 500);
        for w in [conventional_weight, efficient_weight] {
            let asg = w(Estimand::Asg, &m).unwrap();
            let diff = w(Estimand::Att, &m).unwrap() - w(Estimand::Atu, &m).unwrap();
            assert!((asg - diff).amax() < 1e-14);
        }
    }

    #[test]
    fn prevalence_weighted_weights_recombine() {
        let (ds, _, m) = moments(2, 500);
        let p = ds.treated_share();
        for w in [conventional_weight, efficient_weight] {
            let mix = w(Estimand::Att, &m).unwrap() * p + w(Estimand::Atu, &m).unwrap() * (1.0 - p);
            assert!((mix - w(Estimand::Ate, &m).unwrap()).amax() < 1e-12);
        }
    }

    #[test]
    fn efficient_equals_conventional_without_first_stage_residual() {
        let (ds, fit) = sample(3, 300, 0.6);
        let ds = Dataset::with_fractional_treatment(
            ds.y().to_vec(),
            fit.fitted.clone(),
            (0..ds.len()).map(|i| ds.x_row(i).to_vec()).collect(),
            ds.kinds().to_vec(),
            ds.z().to_vec(),
        )
        .unwrap();
        let m = SampleMoments::new(&ds, &fit, &MteModelSpec::linear(1)).unwrap();
        for kind in Estimand::ALL {
            let c = conventional_weight(kind, &m).unwrap();
            let e = efficient_weight(kind, &m).unwrap();
            assert!((c - e).amax() < 1e-14, "{kind}");
        }
    }

    #[test]
    fn single_fully_treated_observation() {
        let spec = MteModelSpec::linear(1);
        let x = [1.0];
        let r = crate::basis::build_r(&x, 1.0, &spec).unwrap();
        let r_ate = crate::basis::build_r_ate(&x, &spec).unwrap();
        let k = spec.dim();
        // two observations so that both treatment groups exist; both at π = 1
        let m = SampleMoments::from_parts(
            spec,
            k,
            [r.as_slice(), r.as_slice()].concat(),
            vec![0.0; 2 * k],
            [r_ate.as_slice(), r_ate.as_slice()].concat(),
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
        )
        .unwrap();
        let att = conventional_weight(Estimand::Att, &m).unwrap() * 0.5;
        assert!((att - r_ate).amax() < 1e-15);
    }

    #[test]
    fn degenerate_and_irrelevant_errors() {
        let (ds, fit) = sample(4, 100, 0.6);
        let treated = Dataset::new(
            ds.y().to_vec(),
            vec![1.0; 100],
            (0..100).map(|i| ds.x_row(i).to_vec()).collect(),
            ds.kinds().to_vec(),
            ds.z().to_vec(),
        )
        .unwrap();
        let m = SampleMoments::new(&treated, &fit, &MteModelSpec::linear(1)).unwrap();
        let e = conventional_weight(Estimand::Att, &m).unwrap_err();
        assert!(e.to_string().contains("undefined conditional estimand"));
        let flat = ds.with_instrument(vec![1.0; 100]).unwrap();
        let m = SampleMoments::new(&flat, &fit, &MteModelSpec::linear(1)).unwrap();
        let e = conventional_weight(Estimand::Iv, &m).unwrap_err();
        assert!(e.to_string().contains("irrelevant instrument"));
    }

    #[test]
    fn estimates_satisfy_identities_and_mean_zero_influence() {
        let (ds, _, m) = moments(5, 2000);
        let g = conventional_from_moments(&m).unwrap().gamma;
        let p = ds.treated_share();
        for method in [EstimatorKind::Conventional, EstimatorKind::Efficient] {
            let est = |k| estimate_target(k, method, &m, &g).unwrap().point;
            let (ate, att, atu, asg) = (est(Estimand::Ate), est(Estimand::Att), est(Estimand::Atu), est(Estimand::Asg));
            assert!((asg - (att - atu)).abs() < 1e-12);
            assert!((p * att + (1.0 - p) * atu - ate).abs() < 1e-12);
        }
        for kind in Estimand::ALL {
            let inf = target_influence(kind, EstimatorKind::Efficient, &m, &g).unwrap();
            assert!(mean(&inf.influence).abs() < 1e-9, "{kind}: {}", mean(&inf.influence));
        }
    }

    #[test]
    fn iv_is_invariant_to_instrument_scale() {
        let (ds, fit, m) = moments(6, 1000);
        let g = conventional_from_moments(&m).unwrap().gamma;
        let iv1 = estimate_iv(&m, &g).unwrap();
        let ds2 = ds.with_instrument(ds.z().iter().map(|z| 2.0 * z).collect()).unwrap();
        let m2 = SampleMoments::new(&ds2, &fit, &MteModelSpec::linear(1)).unwrap();
        let iv2 = estimate_iv(&m2, &g).unwrap();
        assert!((iv1.point - iv2.point).abs() < 1e-9);
        assert!((iv1.se - iv2.se).abs() < 1e-9);
    }

    #[test]
    fn ci_uses_fixed_multiplier() {
        let t = TargetEstimate::new(TargetKind::Estimand(Estimand::Ate), EstimatorKind::Efficient, 1.0, 0.5).unwrap();
        assert_eq!(t.ci_lower, 1.0 - 1.959964 * 0.5);
        assert_eq!(t.ci_upper, 1.0 + 1.959964 * 0.5);
        assert!(TargetEstimate::new(TargetKind::Estimand(Estimand::Ate), EstimatorKind::Efficient, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn mte_curve_at_truth() {
        let (ds, fit) = sample(7, 400, 0.6);
        let spec = MteModelSpec::linear(1);
        let gamma = GammaEstimate {
            gamma: Vector::from_vec(vec![0.3, 0.1, -0.1, 0.1, 0.3]),
            covariance: Matrix::zeros(5, 5),
            naive_covariance: None,
            kind: EstimatorKind::Efficient,
            spec,
            pseudo_inverse: false,
        };
        let xbar = mean(&ds.x_col(0));
        let grid = [0.3, 0.5, 0.7];
        let c = mte_curve(&gamma, &ds, &fit, &grid, None).unwrap();
        for (v, e) in grid.iter().zip(&c.estimate) {
            assert!((e - (-0.1 + 0.1 * xbar + 0.6 * v)).abs() < 1e-12);
        }
        let treated_x: &dyn Fn(&[f64]) -> bool = &|x| x[0] == 1.0;
        let sub = mte_curve(&gamma, &ds, &fit, &[0.5], Some(treated_x)).unwrap();
        assert!((sub.estimate[0] - 0.3).abs() < 1e-12);
        // zero p-coefficients give a flat curve at the linear p-slope entries
        let mut flat = gamma.clone();
        flat.gamma = Vector::from_vec(vec![0.3, 0.1, -0.1, 0.1, 0.0]);
        let c = mte_curve(&flat, &ds, &fit, &grid, None).unwrap();
        assert!(c.estimate.iter().all(|e| (e - (-0.1 + 0.1 * xbar)).abs() < 1e-12));
        let e = mte_curve(&gamma, &ds, &fit, &[0.0001, 0.5], None).unwrap_err();
        assert!(e.to_string().contains("no common support"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn affine_outcome_equivariance(seed in 0u64..1000, c in 0.2f64..5.0, b in -3.0f64..3.0) {
            let (ds, fit) = sample(seed, 300, 0.6);
            let spec = MteModelSpec::linear(1);
            let m = SampleMoments::new(&ds, &fit, &spec).unwrap();
            let ds2 = ds.with_outcome(ds.y().iter().map(|y| c * y + b).collect()).unwrap();
            let m2 = SampleMoments::new(&ds2, &fit, &spec).unwrap();
            let g = conventional_from_moments(&m).unwrap().gamma;
            let g2 = conventional_from_moments(&m2).unwrap().gamma;
            for kind in Estimand::ALL {
                for method in [EstimatorKind::Conventional, EstimatorKind::Efficient] {
                    let t = estimate_target(kind, method, &m, &g).unwrap();
                    let t2 = estimate_target(kind, method, &m2, &g2).unwrap();
                    prop_assert!((t2.point - c * t.point).abs() < 1e-9 * (1.0 + t.point.abs() * c));
                    prop_assert!((t2.se - c * t.se).abs() < 1e-9);
                }
            }
        }
    }
}
