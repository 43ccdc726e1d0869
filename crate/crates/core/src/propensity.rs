//! Kernel propensity score `π(x, z) = P(A = 1 | X = x, Z = z)`.
//!
//! Nadaraya–Watson regression of the treatment on covariates and instrument
//! with a product kernel: Gaussian on continuous regressors and
//! Aitchison–Aitken on discrete ones. Bandwidth constants are selected by
//! leave-one-out least-squares cross-validation on random subsamples, then
//! rescaled to the full sample at the rate `n^{-1/(4+q)}` (continuous) and
//! `n^{-2/(4+q)}` (discrete), where `q` counts continuous regressors.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateKind, Dataset};
use crate::error::{MteError, Result};
use crate::numerics::{mean, sample_sd, RngState};
use crate::par;

/// Minimum sample size for a kernel fit.
pub const MIN_SAMPLE: usize = 50;

/// Gaussian weights beyond this many bandwidths are below 1e-16 and skipped.
const WINDOW_SDS: f64 = 8.6;

const LOG_CONST_RANGE: (f64, f64) = (-2.995_732_273_553_991, 2.995_732_273_553_991); // ln 0.05, ln 20
const OUTER_GRID: usize = 15;
const OUTER_GOLDEN_ITERS: usize = 15;
const INNER_GRID: usize = 11;
const INNER_GOLDEN_ITERS: usize = 20;
const MAX_DISCRETE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousKernel {
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscreteKernel {
    AitchisonAitken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub continuous_kernel: ContinuousKernel,
    pub discrete_kernel: DiscreteKernel,
    pub cv_subsample_size: usize,
    pub cv_subsample_count: usize,
    pub bandwidth_floor: f64,
    /// Fitted values are clamped to `[clamp, 1 - clamp]`.
    pub clamp: f64,
    /// Report leave-one-out fitted values instead of leave-in ones.
    pub leave_one_out_fitted: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            continuous_kernel: ContinuousKernel::Gaussian,
            discrete_kernel: DiscreteKernel::AitchisonAitken,
            cv_subsample_size: 1000,
            cv_subsample_count: 3,
            bandwidth_floor: 0.005,
            clamp: 1e-3,
            leave_one_out_fitted: false,
        }
    }
}

impl KernelConfig {
    /// Default configuration with CV subsamples of `min(1000, n/2)`.
    pub fn for_sample_size(n: usize) -> Self {
        Self { cv_subsample_size: 1000.min(n / 2), ..Self::default() }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(MteError::InvalidParameter(format!(
                "clamp must lie in (0, 0.5), got {}",
                self.clamp
            )));
        }
        if self.cv_subsample_size > n {
            return Err(MteError::InvalidParameter(format!(
                "CV subsample size {} exceeds sample size {n}",
                self.cv_subsample_size
            )));
        }
        if self.cv_subsample_size < 10 || self.cv_subsample_count == 0 {
            return Err(MteError::InvalidParameter(
                "CV needs at least one subsample of 10 or more observations".into(),
            ));
        }
        if !(self.bandwidth_floor > 0.0) {
            return Err(MteError::InvalidParameter("bandwidth floor must be positive".into()));
        }
        Ok(())
    }
}

/// Bandwidth of one regressor. For continuous regressors `constant` is the
/// scale factor `c` in `h = c·sd·n^{-1/(4+q)}`; for discrete ones it is `ℓ` in
/// `λ = ℓ·n^{-2/(4+q)}`. `value` is the bandwidth actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub regressor: String,
    pub kind: CovariateKind,
    pub constant: f64,
    pub value: f64,
}

/// Bandwidth constants, in regressor order: continuous ones (covariates then
/// instrument) and discrete ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthConstants {
    pub continuous: Vec<f64>,
    pub discrete: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSource {
    Kernel,
    /// True propensities supplied by the caller (diagnostic shortcut).
    Known,
}

/// Fitted propensities and the kernel metadata that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub fitted: Vec<f64>,
    pub bandwidths: Vec<Bandwidth>,
    pub config: KernelConfig,
    pub source: FitSource,
}

/// Regressors split by kernel type.
struct Design {
    cont: Vec<Vec<f64>>,
    cont_names: Vec<String>,
    disc: Vec<Vec<f64>>,
    disc_names: Vec<String>,
    disc_levels: Vec<usize>,
    a: Vec<f64>,
}

impl Design {
    fn new(data: &Dataset) -> Result<Self> {
        let mut cont = Vec::new();
        let mut cont_names = Vec::new();
        let mut disc = Vec::new();
        let mut disc_names = Vec::new();
        for (j, kind) in data.kinds().iter().enumerate() {
            let name = if data.dim() == 1 { "x".to_string() } else { format!("x{}", j + 1) };
            match kind {
                CovariateKind::Continuous => {
                    cont.push(data.x_col(j));
                    cont_names.push(name);
                }
                CovariateKind::Discrete => {
                    disc.push(data.x_col(j));
                    disc_names.push(name);
                }
            }
        }
        cont.push(data.z().to_vec());
        cont_names.push("z".into());
        if disc.len() > MAX_DISCRETE {
            return Err(MteError::InvalidParameter(format!(
                "at most {MAX_DISCRETE} discrete covariates are supported"
            )));
        }
        let disc_levels = disc.iter().map(|c| count_levels(c)).collect();
        Ok(Self { cont, cont_names, disc, disc_names, disc_levels, a: data.a().to_vec() })
    }

    fn q(&self) -> usize {
        self.cont.len()
    }

    fn n(&self) -> usize {
        self.a.len()
    }

    fn cont_rate(&self, n: usize) -> f64 {
        (n as f64).powf(-1.0 / (4.0 + self.q() as f64))
    }

    fn disc_rate(&self, n: usize) -> f64 {
        (n as f64).powf(-2.0 / (4.0 + self.q() as f64))
    }

    fn sds(&self) -> Result<Vec<f64>> {
        self.cont
            .iter()
            .zip(&self.cont_names)
            .map(|(c, name)| {
                let sd = sample_sd(c);
                if sd > 0.0 && sd.is_finite() {
                    Ok(sd)
                } else {
                    Err(MteError::InvalidData(format!("continuous regressor {name} has zero variance")))
                }
            })
            .collect()
    }

    fn lambda_max(&self, k: usize) -> f64 {
        let c = self.disc_levels[k];
        if c <= 1 {
            0.0
        } else {
            (c - 1) as f64 / c as f64
        }
    }

    fn bandwidths(&self, consts: &BandwidthConstants) -> Result<Vec<Bandwidth>> {
        let n = self.n();
        let sds = self.sds()?;
        let mut out = Vec::new();
        for k in 0..self.q() {
            let c = consts.continuous[k];
            out.push(Bandwidth {
                regressor: self.cont_names[k].clone(),
                kind: CovariateKind::Continuous,
                constant: c,
                value: c * sds[k] * self.cont_rate(n),
            });
        }
        for k in 0..self.disc.len() {
            let l = consts.discrete[k];
            out.push(Bandwidth {
                regressor: self.disc_names[k].clone(),
                kind: CovariateKind::Discrete,
                constant: l,
                value: (l * self.disc_rate(n)).clamp(0.0, self.lambda_max(k)),
            });
        }
        Ok(out)
    }
}

fn count_levels(col: &[f64]) -> usize {
    let mut v = col.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v.len()
}

fn check_treatment(data: &Dataset) -> Result<()> {
    if let Some((i, &v)) = data.a().iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
        return Err(MteError::NonBinaryTreatment { row: i + 1, value: v });
    }
    let share = data.treated_share();
    if share == 0.0 || share == 1.0 {
        return Err(MteError::DegenerateTreatment(format!(
            "all {} observations have A = {}",
            data.len(),
            share
        )));
    }
    Ok(())
}

/// Kernel evaluator over a training design with fixed bandwidths.
struct Smoother<'a> {
    design: &'a Design,
    inv_h: Vec<f64>,
    /// Discrete kernel value on a match / on a mismatch, per discrete regressor.
    disc_same: Vec<f64>,
    disc_diff: Vec<f64>,
    order: Vec<usize>,
    sorted_key: Vec<f64>,
    window: f64,
    mean_a: f64,
}

impl<'a> Smoother<'a> {
    fn new(design: &'a Design, h: &[f64], lambda: &[f64]) -> Self {
        let key = &design.cont[0];
        let mut order: Vec<usize> = (0..design.n()).collect();
        order.sort_by(|&i, &j| key[i].total_cmp(&key[j]).then(i.cmp(&j)));
        let sorted_key = order.iter().map(|&i| key[i]).collect();
        let disc_same = lambda.iter().map(|l| 1.0 - l).collect();
        let disc_diff = lambda
            .iter()
            .zip(&design.disc_levels)
            .map(|(l, &c)| if c > 1 { l / (c - 1) as f64 } else { 0.0 })
            .collect();
        Self {
            design,
            inv_h: h.iter().map(|v| 1.0 / v).collect(),
            disc_same,
            disc_diff,
            order,
            sorted_key,
            window: WINDOW_SDS * h[0],
            mean_a: mean(&design.a),
        }
    }

    /// Kernel-weighted mean of A at a query point, optionally excluding one
    /// training observation.
    fn estimate(&self, cont: &[f64], disc: &[f64], exclude: Option<usize>) -> f64 {
        let d = self.design;
        let lo = self.sorted_key.partition_point(|v| *v < cont[0] - self.window);
        let hi = self.sorted_key.partition_point(|v| *v <= cont[0] + self.window);
        let (mut num, mut den) = (0.0, 0.0);
        for &j in &self.order[lo..hi] {
            if Some(j) == exclude {
                continue;
            }
            let mut s = 0.0;
            for k in 0..cont.len() {
                let u = (cont[k] - d.cont[k][j]) * self.inv_h[k];
                s += u * u;
            }
            let mut w = (-0.5 * s).exp();
            for k in 0..disc.len() {
                w *= if disc[k] == d.disc[k][j] { self.disc_same[k] } else { self.disc_diff[k] };
            }
            num += w * d.a[j];
            den += w;
        }
        if den > 0.0 && den.is_finite() {
            num / den
        } else {
            self.estimate_far(cont, disc, exclude)
        }
    }

    /// Full pass with exponents shifted by their minimum, for queries whose
    /// windowed kernel sums underflow.
    fn estimate_far(&self, cont: &[f64], disc: &[f64], exclude: Option<usize>) -> f64 {
        let d = self.design;
        let sq: Vec<f64> = (0..d.n())
            .map(|j| {
                (0..cont.len())
                    .map(|k| ((cont[k] - d.cont[k][j]) * self.inv_h[k]).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let smin = sq
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != exclude)
            .map(|(_, s)| *s)
            .fold(f64::INFINITY, f64::min);
        let (mut num, mut den) = (0.0, 0.0);
        for j in (0..d.n()).filter(|j| Some(*j) != exclude) {
            let mut w = (-0.5 * (sq[j] - smin)).exp();
            for k in 0..disc.len() {
                w *= if disc[k] == d.disc[k][j] { self.disc_same[k] } else { self.disc_diff[k] };
            }
            num += w * d.a[j];
            den += w;
        }
        if den > 0.0 && den.is_finite() {
            num / den
        } else {
            self.mean_a
        }
    }

    fn at_training(&self, i: usize, loo: bool) -> f64 {
        let d = self.design;
        let cont: Vec<f64> = d.cont.iter().map(|c| c[i]).collect();
        let disc: Vec<f64> = d.disc.iter().map(|c| c[i]).collect();
        self.estimate(&cont, &disc, loo.then_some(i))
    }
}

fn clamp(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// Fit with cross-validated bandwidth constants.
pub fn fit_propensity(data: &Dataset, config: &KernelConfig, rng: &mut RngState) -> Result<PropensityFit> {
    let consts = select_constants(data, config, rng)?;
    fit_with_constants(data, config, &consts)
}

/// Fit with given bandwidth constants (no cross-validation).
pub fn fit_with_constants(
    data: &Dataset,
    config: &KernelConfig,
    consts: &BandwidthConstants,
) -> Result<PropensityFit> {
    check_treatment(data)?;
    let design = Design::new(data)?;
    if consts.continuous.len() != design.q() || consts.discrete.len() != design.disc.len() {
        return Err(MteError::DimensionMismatch(format!(
            "expected {} continuous and {} discrete bandwidth constants",
            design.q(),
            design.disc.len()
        )));
    }
    if consts.continuous.iter().any(|c| !(*c > 0.0 && c.is_finite()))
        || consts.discrete.iter().any(|l| !(*l >= 0.0 && l.is_finite()))
    {
        return Err(MteError::InvalidParameter("bandwidth constants must be positive".into()));
    }
    let bandwidths = design.bandwidths(consts)?;
    fit_design(&design, config, bandwidths)
}

/// Fit with explicit bandwidth values: `h` for continuous regressors
/// (covariates then instrument) and `λ` for discrete ones.
pub fn fit_with_bandwidths(
    data: &Dataset,
    config: &KernelConfig,
    h: &[f64],
    lambda: &[f64],
) -> Result<PropensityFit> {
    check_treatment(data)?;
    let design = Design::new(data)?;
    if h.len() != design.q() || lambda.len() != design.disc.len() {
        return Err(MteError::DimensionMismatch("bandwidth vector lengths".into()));
    }
    if h.iter().any(|v| !(*v > 0.0)) {
        return Err(MteError::InvalidParameter("continuous bandwidths must be positive".into()));
    }
    let n = design.n();
    let sds = design.sds()?;
    let mut bandwidths = Vec::new();
    for k in 0..design.q() {
        bandwidths.push(Bandwidth {
            regressor: design.cont_names[k].clone(),
            kind: CovariateKind::Continuous,
            constant: h[k] / (sds[k] * design.cont_rate(n)),
            value: h[k],
        });
    }
    for k in 0..design.disc.len() {
        let lmax = design.lambda_max(k);
        if !(0.0..=lmax).contains(&lambda[k]) {
            return Err(MteError::InvalidParameter(format!(
                "λ for {} must lie in [0, {lmax}]",
                design.disc_names[k]
            )));
        }
        bandwidths.push(Bandwidth {
            regressor: design.disc_names[k].clone(),
            kind: CovariateKind::Discrete,
            constant: lambda[k] / design.disc_rate(n),
            value: lambda[k],
        });
    }
    fit_design(&design, config, bandwidths)
}

fn split_values(bandwidths: &[Bandwidth]) -> (Vec<f64>, Vec<f64>) {
    let h = bandwidths.iter().filter(|b| b.kind == CovariateKind::Continuous).map(|b| b.value).collect();
    let l = bandwidths.iter().filter(|b| b.kind == CovariateKind::Discrete).map(|b| b.value).collect();
    (h, l)
}

fn fit_design(design: &Design, config: &KernelConfig, bandwidths: Vec<Bandwidth>) -> Result<PropensityFit> {
    if !(config.clamp > 0.0 && config.clamp < 0.5) {
        return Err(MteError::InvalidParameter("clamp must lie in (0, 0.5)".into()));
    }
    let (h, lambda) = split_values(&bandwidths);
    let sm = Smoother::new(design, &h, &lambda);
    let loo = config.leave_one_out_fitted;
    let fitted = par::map_collect(design.n(), |i| clamp(sm.at_training(i, loo), config.clamp));
    Ok(PropensityFit { fitted, bandwidths, config: config.clone(), source: FitSource::Kernel })
}

impl PropensityFit {
    /// Wrap known propensities. They are used as given, without clamping.
    pub fn from_known(data: &Dataset, pi: Vec<f64>) -> Result<Self> {
        if pi.len() != data.len() {
            return Err(MteError::DimensionMismatch(format!(
                "{} propensities for {} observations",
                pi.len(),
                data.len()
            )));
        }
        if let Some(&p) = pi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(MteError::PropensityOutOfRange(p));
        }
        Ok(Self {
            fitted: pi,
            bandwidths: Vec::new(),
            config: KernelConfig::default(),
            source: FitSource::Known,
        })
    }

    pub fn len(&self) -> usize {
        self.fitted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fitted.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.fitted.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.fitted.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Propensity at a new point `(x, z)`, from the training sample `data`
    /// the fit was built on. Leave-in, clamped.
    pub fn predict(&self, data: &Dataset, x: &[f64], z: f64) -> Result<f64> {
        Ok(self.predict_many(data, &[(x.to_vec(), z)])?[0])
    }

    pub fn predict_many(&self, data: &Dataset, queries: &[(Vec<f64>, f64)]) -> Result<Vec<f64>> {
        if self.source == FitSource::Known {
            return Err(MteError::InvalidParameter(
                "known propensities cannot be evaluated at new points".into(),
            ));
        }
        if data.len() != self.fitted.len() {
            return Err(MteError::DimensionMismatch("fit was built on a different sample".into()));
        }
        let design = Design::new(data)?;
        let (h, lambda) = split_values(&self.bandwidths);
        let sm = Smoother::new(&design, &h, &lambda);
        queries
            .iter()
            .map(|(x, z)| {
                if x.len() != data.dim() {
                    return Err(MteError::DimensionMismatch(format!(
                        "query has {} covariates, data has {}",
                        x.len(),
                        data.dim()
                    )));
                }
                let mut cont = Vec::new();
                let mut disc = Vec::new();
                for (v, kind) in x.iter().zip(data.kinds()) {
                    match kind {
                        CovariateKind::Continuous => cont.push(*v),
                        CovariateKind::Discrete => disc.push(*v),
                    }
                }
                cont.push(*z);
                Ok(clamp(sm.estimate(&cont, &disc, None), self.config.clamp))
            })
            .collect()
    }

    /// Continuous and discrete bandwidth constants of this fit.
    pub fn constants(&self) -> BandwidthConstants {
        BandwidthConstants {
            continuous: self
                .bandwidths
                .iter()
                .filter(|b| b.kind == CovariateKind::Continuous)
                .map(|b| b.constant)
                .collect(),
            discrete: self
                .bandwidths
                .iter()
                .filter(|b| b.kind == CovariateKind::Discrete)
                .map(|b| b.constant)
                .collect(),
        }
    }
}

/// Refit at shifted continuous bandwidth constants `max(floor, c₀ + κ/2)`
/// around cross-validated `base` constants. Discrete constants are unchanged.
pub fn refit_with_offsets(
    data: &Dataset,
    config: &KernelConfig,
    base: &BandwidthConstants,
    kappas: &[f64],
) -> Result<Vec<PropensityFit>> {
    kappas
        .iter()
        .map(|&kappa| {
            let shifted = BandwidthConstants {
                continuous: base
                    .continuous
                    .iter()
                    .map(|c| (c + 0.5 * kappa).max(config.bandwidth_floor))
                    .collect(),
                discrete: base.discrete.clone(),
            };
            fit_with_constants(data, config, &shifted)
        })
        .collect()
}

/// One cross-validation, then one fit per bandwidth offset `κ`.
pub fn bandwidth_sweep(
    data: &Dataset,
    config: &KernelConfig,
    rng: &mut RngState,
    kappas: &[f64],
) -> Result<Vec<PropensityFit>> {
    let base = select_constants(data, config, rng)?;
    refit_with_offsets(data, config, &base, kappas)
}

/// Cross-validated bandwidth constants, averaged over subsamples.
pub fn select_constants(
    data: &Dataset,
    config: &KernelConfig,
    rng: &mut RngState,
) -> Result<BandwidthConstants> {
    if data.len() < MIN_SAMPLE {
        return Err(MteError::InvalidData(format!(
            "kernel propensity needs at least {MIN_SAMPLE} observations, got {}",
            data.len()
        )));
    }
    config.validate(data.len())?;
    check_treatment(data)?;
    let design = Design::new(data)?;
    design.sds()?;
    let m = config.cv_subsample_size;
    let subsamples: Vec<Vec<usize>> = (0..config.cv_subsample_count)
        .map(|_| {
            let mut idx = index::sample(rng.rng_mut(), data.len(), m).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    let results = par::map_collect(subsamples.len(), |s| cv_subsample(&design, &subsamples[s]));
    let k = results.len() as f64;
    let q = design.q();
    let dd = design.disc.len();
    let mut out = BandwidthConstants { continuous: vec![0.0; q], discrete: vec![0.0; dd] };
    for r in &results {
        for j in 0..q {
            out.continuous[j] += r.continuous[j] / k;
        }
        for j in 0..dd {
            out.discrete[j] += r.discrete[j] / k;
        }
    }
    Ok(out)
}

/// Pairwise quantities for one CV subsample, upper triangle `i < j`.
struct PairTable {
    m: usize,
    a: Vec<f64>,
    /// Per continuous regressor, squared difference in units of `sd·m^{-1/(4+q)}`.
    dist: Vec<Vec<f64>>,
    pattern: Vec<u16>,
    n_patterns: usize,
    disc_levels: Vec<usize>,
    lambda_max: Vec<f64>,
    lambda_rate: f64,
}

impl PairTable {
    fn new(design: &Design, idx: &[usize]) -> Self {
        let m = idx.len();
        let q = design.q();
        let rate = (m as f64).powf(-1.0 / (4.0 + q as f64));
        let scales: Vec<f64> = design
            .cont
            .iter()
            .map(|c| {
                let sub: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
                // a constant subsample column would give a zero scale; fall back to 1
                let sd = sample_sd(&sub);
                if sd > 0.0 {
                    sd * rate
                } else {
                    rate
                }
            })
            .collect();
        let pairs = m * (m - 1) / 2;
        let mut dist = vec![Vec::with_capacity(pairs); q];
        let mut pattern = Vec::with_capacity(pairs);
        for (ii, &i) in idx.iter().enumerate() {
            for &j in &idx[ii + 1..] {
                for k in 0..q {
                    let u = (design.cont[k][i] - design.cont[k][j]) / scales[k];
                    dist[k].push(u * u);
                }
                let mut p = 0u16;
                for (k, col) in design.disc.iter().enumerate() {
                    if col[i] != col[j] {
                        p |= 1 << k;
                    }
                }
                pattern.push(p);
            }
        }
        let dd = design.disc.len();
        Self {
            m,
            a: idx.iter().map(|&i| design.a[i]).collect(),
            dist,
            pattern,
            n_patterns: 1 << dd,
            disc_levels: design.disc_levels.clone(),
            lambda_max: (0..dd).map(|k| design.lambda_max(k)).collect(),
            lambda_rate: (m as f64).powf(-2.0 / (4.0 + q as f64)),
        }
    }

    /// Leave-one-out numerator and denominator sums per observation and
    /// mismatch pattern, for continuous constants `c`.
    fn sums(&self, c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let np = self.n_patterns;
        let mut num = vec![0.0; self.m * np];
        let mut den = vec![0.0; self.m * np];
        let half_inv: Vec<f64> = c.iter().map(|v| -0.5 / (v * v)).collect();
        let mut t = 0;
        for i in 0..self.m {
            for j in i + 1..self.m {
                let mut s = 0.0;
                for (k, d) in self.dist.iter().enumerate() {
                    s += d[t] * half_inv[k];
                }
                let w = s.exp();
                let p = self.pattern[t] as usize;
                num[i * np + p] += w * self.a[j];
                den[i * np + p] += w;
                num[j * np + p] += w * self.a[i];
                den[j * np + p] += w;
                t += 1;
            }
        }
        (num, den)
    }

    fn pattern_weights(&self, lambda: &[f64]) -> Vec<f64> {
        (0..self.n_patterns)
            .map(|p| {
                lambda
                    .iter()
                    .enumerate()
                    .map(|(k, l)| {
                        if p & (1 << k) != 0 {
                            let c = self.disc_levels[k];
                            if c > 1 {
                                l / (c - 1) as f64
                            } else {
                                0.0
                            }
                        } else {
                            1.0 - l
                        }
                    })
                    .product()
            })
            .collect()
    }

    fn loss(&self, num: &[f64], den: &[f64], lambda: &[f64]) -> f64 {
        let np = self.n_patterns;
        let w = self.pattern_weights(lambda);
        let fallback = mean(&self.a);
        let mut acc = 0.0;
        for i in 0..self.m {
            let (mut nu, mut de) = (0.0, 0.0);
            for p in 0..np {
                nu += w[p] * num[i * np + p];
                de += w[p] * den[i * np + p];
            }
            let g = if de > 0.0 && de.is_finite() { nu / de } else { fallback };
            acc += (self.a[i] - g).powi(2);
        }
        acc / self.m as f64
    }

    /// Best λ for fixed continuous constants, by coordinate search.
    fn best_lambda(&self, num: &[f64], den: &[f64]) -> (f64, Vec<f64>) {
        let dd = self.lambda_max.len();
        let mut lambda: Vec<f64> = self.lambda_max.iter().map(|l| 0.5 * l).collect();
        let mut best = self.loss(num, den, &lambda);
        let passes = if dd > 1 { 2 } else { dd };
        for _ in 0..passes {
            for k in 0..dd {
                let hi = self.lambda_max[k];
                if hi == 0.0 {
                    lambda[k] = 0.0;
                    continue;
                }
                let mut trial = lambda.clone();
                let (x, fx) = grid_then_golden(
                    |v| {
                        trial[k] = v;
                        self.loss(num, den, &trial)
                    },
                    0.0,
                    hi,
                    INNER_GRID,
                    INNER_GOLDEN_ITERS,
                );
                if fx <= best {
                    best = fx;
                    lambda[k] = x;
                }
            }
        }
        (best, lambda)
    }

    fn objective(&self, c: &[f64]) -> (f64, Vec<f64>) {
        let (num, den) = self.sums(c);
        self.best_lambda(&num, &den)
    }
}

fn cv_subsample(design: &Design, idx: &[usize]) -> BandwidthConstants {
    let table = PairTable::new(design, idx);
    let q = design.q();
    let mut log_c = vec![0.0_f64; q];
    let passes = if q > 1 { 2 } else { 1 };
    for _ in 0..passes {
        for k in 0..q {
            let mut trial = log_c.clone();
            let (x, _) = grid_then_golden(
                |t| {
                    trial[k] = t;
                    let c: Vec<f64> = trial.iter().map(|v| v.exp()).collect();
                    table.objective(&c).0
                },
                LOG_CONST_RANGE.0,
                LOG_CONST_RANGE.1,
                OUTER_GRID,
                OUTER_GOLDEN_ITERS,
            );
            log_c[k] = x;
        }
    }
    let c: Vec<f64> = log_c.iter().map(|v| v.exp()).collect();
    let (_, lambda) = table.objective(&c);
    BandwidthConstants {
        continuous: c,
        discrete: lambda.iter().map(|l| l / table.lambda_rate).collect(),
    }
}

/// Minimise `f` on `[lo, hi]`: evaluate an even grid, then refine by golden
/// section between the neighbours of the best grid point.
fn grid_then_golden(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, grid: usize, iters: usize) -> (f64, f64) {
    let step = (hi - lo) / (grid - 1) as f64;
    let mut best = (lo, f(lo));
    let mut best_i = 0;
    for i in 1..grid {
        let x = lo + step * i as f64;
        let fx = f(x);
        if fx < best.1 {
            best = (x, fx);
            best_i = i;
        }
    }
    let mut a = lo + step * best_i.saturating_sub(1) as f64;
    let mut b = (lo + step * (best_i + 1) as f64).min(hi);
    let g = 0.5 * (5.0_f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    for (x, fx) in [(x1, f1), (x2, f2)] {
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best
}
