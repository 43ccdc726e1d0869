//! Monte Carlo harness: the binary-covariate, Gaussian-instrument design with
//! a probit selection index, its ground truth, and replicated experiments
//! comparing the conventional and efficient estimators.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::basis::MteModelSpec;
use crate::data::{CovariateKind, Dataset};
use crate::error::{MteError, Result};
use crate::estimators::{EstimatorKind, SampleMoments};
use crate::numerics::{derive_seed, std_normal_cdf, RngState, Vector};
use crate::par;
use crate::propensity::{fit_with_constants, refit_with_offsets, select_constants, KernelConfig, PropensityFit};
use crate::targets::{estimate_all, mte_weight, Estimand, Estimates, TargetOptions};

/// RNG stream offsets, one per generated variable.
pub mod streams {
    pub const COVARIATE: u64 = 1;
    pub const INSTRUMENT: u64 = 2;
    pub const RESISTANCE: u64 = 3;
    pub const OUTCOME_NOISE: u64 = 4;
    pub const BANDWIDTH_CV: u64 = 10;
}

/// Potential-outcome means `α_a + β_a x + ζ_a (v − 1/2)` plus scaled
/// bivariate normal noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub zeta0: f64,
    pub zeta1: f64,
    pub noise_variance: f64,
    pub noise_correlation: f64,
    /// Multiplier on the noise term in the outcome equations.
    pub noise_scale: f64,
}

impl Default for OutcomeModel {
    fn default() -> Self {
        Self {
            alpha0: 0.3,
            alpha1: 0.5,
            beta0: 0.1,
            beta1: 0.2,
            zeta0: -0.3,
            zeta1: 0.3,
            noise_variance: 0.2,
            noise_correlation: 0.2,
            noise_scale: 0.2_f64.sqrt(),
        }
    }
}

impl OutcomeModel {
    /// Constant treatment effect `α₁ − α₀`: equal slopes in `x` and `v`.
    pub fn homogeneous() -> Self {
        Self { beta1: 0.1, zeta0: 0.3, zeta1: 0.3, ..Self::default() }
    }

    /// Parameters of `E[Y | X = x, π = p] = r(x, p)′γ` for the linear basis
    /// with one covariate.
    pub fn true_gamma(&self) -> [f64; 5] {
        let dz = self.zeta1 - self.zeta0;
        [
            self.alpha0,
            self.beta0,
            self.alpha1 - self.alpha0 - 0.5 * dz,
            self.beta1 - self.beta0,
            0.5 * dz,
        ]
    }

    /// `γ` in the layout of `spec`, which must have one covariate and nest
    /// the linear model.
    pub fn true_gamma_for(&self, spec: &MteModelSpec) -> Result<Vector> {
        if spec.covariate_dim != 1 {
            return Err(MteError::InvalidParameter(
                "the simulation design has exactly one covariate".into(),
            ));
        }
        let mut g = Vector::zeros(spec.dim());
        let t = self.true_gamma();
        g.as_mut_slice()[..5].copy_from_slice(&t);
        Ok(g)
    }

    /// `E[Y₁ − Y₀ | X = x, V = v]`.
    pub fn mte(&self, x: f64, v: f64) -> f64 {
        self.alpha1 - self.alpha0 + (self.beta1 - self.beta0) * x + (self.zeta1 - self.zeta0) * (v - 0.5)
    }

    /// MTE averaged over `X ~ Bernoulli(1/2)`.
    pub fn average_mte(&self, v: f64) -> f64 {
        0.5 * (self.mte(0.0, v) + self.mte(1.0, v))
    }

    fn validate(&self) -> Result<()> {
        if !(self.noise_variance > 0.0 && self.noise_correlation.abs() <= 1.0) {
            return Err(MteError::InvalidParameter("noise variance must be positive and |ρ| ≤ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub eta_bar: f64,
    pub seed: u64,
    pub outcome: OutcomeModel,
}

impl DgpConfig {
    pub fn new(n: usize, eta_bar: f64, seed: u64) -> Self {
        Self { n, eta_bar, seed, outcome: OutcomeModel::default() }
    }

    /// Selection index coefficients on `(1, X, Z, X·Z)`.
    pub fn eta(&self) -> [f64; 4] {
        [0.0, -0.2, self.eta_bar, -0.2 * self.eta_bar]
    }

    /// `π(x, z) = Φ(q(x, z)′η)`.
    pub fn propensity(&self, x: f64, z: f64) -> f64 {
        let e = self.eta();
        std_normal_cdf(e[0] + e[1] * x + e[2] * z + e[3] * x * z)
    }

    /// `P(A = 1)` by integrating the probit index over `Z ~ N(0,1)`.
    pub fn treated_share(&self) -> f64 {
        let e = self.eta_bar;
        0.5 * 0.5 + 0.5 * std_normal_cdf(-0.2 / (1.0 + 0.64 * e * e).sqrt())
    }
}

/// Latent quantities behind a generated sample, for oracle checks only.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRecord {
    pub v: Vec<f64>,
    pub pi: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

pub fn dgp_generate(config: &DgpConfig) -> Result<(Dataset, TruthRecord)> {
    if config.n == 0 {
        return Err(MteError::InvalidParameter("n must be at least 1".into()));
    }
    if !config.eta_bar.is_finite() {
        return Err(MteError::InvalidParameter("eta_bar must be finite".into()));
    }
    let om = &config.outcome;
    om.validate()?;
    let n = config.n;
    let mut rx = RngState::with_stream(config.seed, streams::COVARIATE);
    let mut rz = RngState::with_stream(config.seed, streams::INSTRUMENT);
    let mut rv = RngState::with_stream(config.seed, streams::RESISTANCE);
    let mut rw = RngState::with_stream(config.seed, streams::OUTCOME_NOISE);
    let sd = om.noise_variance.sqrt();
    let rho = om.noise_correlation;
    let rho_c = (1.0 - rho * rho).sqrt();
    let mut x_rows = Vec::with_capacity(n);
    let (mut y, mut a, mut z) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut truth = TruthRecord {
        v: Vec::with_capacity(n),
        pi: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x = rx.draw_bernoulli(0.5)?;
        let zi = rz.draw_normal(0.0, 1.0)?;
        let v = rv.draw_uniform(0.0, 1.0)?;
        let e0 = rw.draw_normal(0.0, 1.0)?;
        let e1 = rw.draw_normal(0.0, 1.0)?;
        let w0 = sd * e0;
        let w1 = sd * (rho * e0 + rho_c * e1);
        let y0 = om.alpha0 + om.beta0 * x + om.zeta0 * (v - 0.5) + om.noise_scale * w0;
        let y1 = om.alpha1 + om.beta1 * x + om.zeta1 * (v - 0.5) + om.noise_scale * w1;
        let pi = config.propensity(x, zi);
        let ai = if pi > v { 1.0 } else { 0.0 };
        x_rows.push(vec![x]);
        z.push(zi);
        a.push(ai);
        y.push((1.0 - ai) * y0 + ai * y1);
        truth.v.push(v);
        truth.pi.push(pi);
        truth.y0.push(y0);
        truth.y1.push(y1);
    }
    let ds = Dataset::new(y, a, x_rows, vec![CovariateKind::Discrete], z)?;
    Ok((ds, truth))
}

/// Population values of the treatment-effect estimands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueTargets {
    pub eta_bar: f64,
    #[serde(rename = "ATE")]
    pub ate: f64,
    #[serde(rename = "ATT")]
    pub att: f64,
    #[serde(rename = "ATU")]
    pub atu: f64,
    #[serde(rename = "ASG")]
    pub asg: f64,
    /// Share treated in the oracle sample.
    pub treated_share: f64,
}

impl TrueTargets {
    pub fn get(&self, kind: Estimand) -> Option<f64> {
        match kind {
            Estimand::Ate => Some(self.ate),
            Estimand::Att => Some(self.att),
            Estimand::Atu => Some(self.atu),
            Estimand::Asg => Some(self.asg),
            Estimand::Iv => None,
        }
    }
}

/// Smallest oracle sample accepted by [`true_targets`].
pub const MIN_ORACLE_DRAWS: usize = 1_000_000;

/// Monte Carlo means of `Y₁ − Y₀` overall and within treatment groups.
pub fn true_targets(eta_bar: f64, oracle_n: usize, seed: u64, outcome: &OutcomeModel) -> Result<TrueTargets> {
    if oracle_n < MIN_ORACLE_DRAWS {
        return Err(MteError::InvalidParameter(format!(
            "oracle needs at least {MIN_ORACLE_DRAWS} draws, got {oracle_n}"
        )));
    }
    let cfg = DgpConfig { n: oracle_n, eta_bar, seed, outcome: *outcome };
    let (ds, t) = dgp_generate(&cfg)?;
    let (mut s, mut s1, mut n1, mut s0) = (0.0, 0.0, 0usize, 0.0);
    for i in 0..oracle_n {
        let d = t.y1[i] - t.y0[i];
        s += d;
        if ds.a()[i] == 1.0 {
            s1 += d;
            n1 += 1;
        } else {
            s0 += d;
        }
    }
    let n0 = oracle_n - n1;
    let att = s1 / n1 as f64;
    let atu = s0 / n0 as f64;
    Ok(TrueTargets {
        eta_bar,
        ate: s / oracle_n as f64,
        att,
        atu,
        asg: att - atu,
        treated_share: n1 as f64 / oracle_n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub eta_grid: Vec<f64>,
    pub reps: usize,
    pub n: usize,
    pub seed: u64,
    pub model: MteModelSpec,
    /// Kernel settings; `None` uses the defaults for the sample size.
    pub kernel: Option<KernelConfig>,
    /// Use the true propensity instead of a kernel fit (diagnostic).
    pub known_propensity: bool,
    pub outcome: OutcomeModel,
    pub v_grid: Vec<f64>,
    pub oracle_n: usize,
    pub target_options: TargetOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            eta_grid: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            reps: 200,
            n: 5000,
            seed: 20_240_601,
            model: MteModelSpec::linear(1),
            kernel: None,
            known_propensity: false,
            outcome: OutcomeModel::default(),
            v_grid: (1..=19).map(|i| i as f64 / 20.0).collect(),
            oracle_n: MIN_ORACLE_DRAWS,
            target_options: TargetOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn kernel_config(&self) -> KernelConfig {
        self.kernel.clone().unwrap_or_else(|| KernelConfig::for_sample_size(self.n))
    }

    /// Seed of replication `rep`. Shared across the instrument-strength grid
    /// so that grid points use common random numbers.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, rep as u64)
    }

    fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(MteError::InvalidParameter("reps must be at least 2".into()));
        }
        if self.eta_grid.is_empty() {
            return Err(MteError::InvalidParameter("empty instrument-strength grid".into()));
        }
        if self.model.covariate_dim != 1 {
            return Err(MteError::InvalidParameter("simulation model must have one covariate".into()));
        }
        if self.v_grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(MteError::InvalidParameter("v grid must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Bias and RMSE of one quantity under one method at one instrument strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCell {
    pub eta_bar: f64,
    pub method: EstimatorKind,
    pub quantity: String,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Share of 95% confidence intervals that cover the truth.
    pub coverage: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MteCell {
    pub eta_bar: f64,
    pub method: EstimatorKind,
    pub v: f64,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    pub count: usize,
    /// Replications where `v` fell outside the estimated propensity range.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub eta_bar: f64,
    pub rep: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub truths: Vec<TrueTargets>,
    pub cells: Vec<ErrorCell>,
    pub mte: Vec<MteCell>,
    pub failures: Vec<FailureRecord>,
    pub rep_seeds: Vec<u64>,
}

impl ExperimentResult {
    pub fn cell(&self, eta_bar: f64, method: EstimatorKind, quantity: &str) -> Option<&ErrorCell> {
        self.cells
            .iter()
            .find(|c| c.eta_bar == eta_bar && c.method == method && c.quantity == quantity)
    }
}

/// Estimates from one replication, keyed by method and quantity.
#[derive(Debug, Clone)]
pub struct ReplicationOutcome {
    pub values: BTreeMap<(EstimatorKind, String), (f64, f64)>,
    pub mte: Vec<(EstimatorKind, f64, Option<f64>)>,
    pub z_bandwidth: Option<f64>,
}

fn summarize(est: &Estimates, data: &Dataset, fit: &PropensityFit, spec: &MteModelSpec, v_grid: &[f64]) -> Result<ReplicationOutcome> {
    let mut values = BTreeMap::new();
    for method in [EstimatorKind::Conventional, EstimatorKind::Efficient] {
        let g = est.gamma(method);
        let se = g.standard_errors();
        for j in 0..g.gamma.len() {
            values.insert((method, format!("gamma_{j}")), (g.gamma[j], se[j]));
        }
        for t in est.targets.iter().filter(|t| t.method == method) {
            if let crate::targets::TargetKind::Estimand(k) = t.kind {
                values.insert((method, k.as_str().to_string()), (t.point, t.se));
            }
        }
    }
    let (lo, hi) = (fit.min(), fit.max());
    let mut mte = Vec::new();
    for &v in v_grid {
        let w = if v >= lo && v <= hi { Some(mte_weight(data, spec, v)?) } else { None };
        for method in [EstimatorKind::Conventional, EstimatorKind::Efficient] {
            mte.push((method, v, w.as_ref().map(|w| w.dot(&est.gamma(method).gamma))));
        }
    }
    let z_bandwidth = fit.bandwidths.iter().find(|b| b.regressor == "z").map(|b| b.value);
    Ok(ReplicationOutcome { values, mte, z_bandwidth })
}

fn estimate_sample(data: &Dataset, fit: &PropensityFit, cfg: &ExperimentConfig) -> Result<ReplicationOutcome> {
    let m = SampleMoments::new(data, fit, &cfg.model)?;
    let est = estimate_all(&m, &Estimand::TREATMENT_EFFECTS, cfg.target_options)?;
    summarize(&est, data, fit, &cfg.model, &cfg.v_grid)
}

/// Generate, fit and estimate one replication.
pub fn run_replication(cfg: &ExperimentConfig, eta_bar: f64, rep: usize) -> Result<ReplicationOutcome> {
    let seed = cfg.rep_seed(rep);
    let dgp = DgpConfig { n: cfg.n, eta_bar, seed, outcome: cfg.outcome };
    let (data, truth) = dgp_generate(&dgp)?;
    let fit = if cfg.known_propensity {
        PropensityFit::from_known(&data, truth.pi)?
    } else {
        let kc = cfg.kernel_config();
        let mut rng = RngState::with_stream(seed, streams::BANDWIDTH_CV);
        let consts = select_constants(&data, &kc, &mut rng)?;
        fit_with_constants(&data, &kc, &consts)?
    };
    estimate_sample(&data, &fit, cfg)
}

#[derive(Default)]
struct Accumulator {
    sum_err: f64,
    sum_sq: f64,
    covered: usize,
    count: usize,
}

impl Accumulator {
    fn push(&mut self, est: f64, se: f64, truth: f64) {
        let e = est - truth;
        self.sum_err += e;
        self.sum_sq += e * e;
        if (est - crate::targets::Z_95 * se..=est + crate::targets::Z_95 * se).contains(&truth) {
            self.covered += 1;
        }
        self.count += 1;
    }

    fn bias(&self) -> f64 {
        self.sum_err / self.count as f64
    }

    fn rmse(&self) -> f64 {
        (self.sum_sq / self.count as f64).sqrt()
    }
}

fn truth_values(cfg: &ExperimentConfig, truth: &TrueTargets) -> Result<Vec<(String, f64)>> {
    let g = cfg.outcome.true_gamma_for(&cfg.model)?;
    let mut out: Vec<(String, f64)> = g.iter().enumerate().map(|(j, v)| (format!("gamma_{j}"), *v)).collect();
    for k in Estimand::TREATMENT_EFFECTS {
        out.push((k.as_str().to_string(), truth.get(k).expect("treatment effect")));
    }
    Ok(out)
}

fn aggregate(
    cfg: &ExperimentConfig,
    eta_bar: f64,
    truth: &TrueTargets,
    outcomes: &[ReplicationOutcome],
) -> Result<(Vec<ErrorCell>, Vec<MteCell>)> {
    let truths = truth_values(cfg, truth)?;
    let k = cfg.model.dim();
    let mut cells = Vec::new();
    for method in [EstimatorKind::Conventional, EstimatorKind::Efficient] {
        let mut gamma_sq = 0.0;
        for (name, tv) in &truths {
            let mut acc = Accumulator::default();
            for o in outcomes {
                let (est, se) = o.values[&(method, name.clone())];
                acc.push(est, se, *tv);
            }
            if name.starts_with("gamma_") {
                gamma_sq += acc.sum_sq / acc.count.max(1) as f64;
            }
            cells.push(ErrorCell {
                eta_bar,
                method,
                quantity: name.clone(),
                truth: *tv,
                bias: acc.bias(),
                rmse: acc.rmse(),
                coverage: acc.covered as f64 / acc.count.max(1) as f64,
                count: acc.count,
            });
        }
        // root of the summed per-parameter mean squared errors
        cells.push(ErrorCell {
            eta_bar,
            method,
            quantity: "gamma".into(),
            truth: f64::NAN,
            bias: f64::NAN,
            rmse: gamma_sq.sqrt(),
            coverage: f64::NAN,
            count: outcomes.len(),
        });
        debug_assert_eq!(truths.len(), k + 4);
    }
    let mut mte = Vec::new();
    for method in [EstimatorKind::Conventional, EstimatorKind::Efficient] {
        for &v in &cfg.v_grid {
            let tv = cfg.outcome.average_mte(v);
            let mut acc = Accumulator::default();
            let mut skipped = 0;
            for o in outcomes {
                let hit = o.mte.iter().find(|(m, vv, _)| *m == method && *vv == v).and_then(|t| t.2);
                match hit {
                    Some(est) => acc.push(est, 0.0, tv),
                    None => skipped += 1,
                }
            }
            mte.push(MteCell {
                eta_bar,
                method,
                v,
                truth: tv,
                bias: if acc.count > 0 { acc.bias() } else { f64::NAN },
                rmse: if acc.count > 0 { acc.rmse() } else { f64::NAN },
                count: acc.count,
                skipped,
            });
        }
    }
    Ok((cells, mte))
}

/// Oracle truths for every grid point. The oracle seed is derived from the
/// master seed and the grid index.
pub fn grid_truths(cfg: &ExperimentConfig) -> Result<Vec<TrueTargets>> {
    cfg.eta_grid
        .iter()
        .enumerate()
        .map(|(e, &eta)| true_targets(eta, cfg.oracle_n, derive_seed(!cfg.seed, e as u64), &cfg.outcome))
        .collect()
}

/// Replicated experiment over the instrument-strength grid.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let truths = grid_truths(cfg)?;
    let mut cells = Vec::new();
    let mut mte = Vec::new();
    let mut failures = Vec::new();
    for (&eta_bar, truth) in cfg.eta_grid.iter().zip(&truths) {
        let runs = par::map_collect(cfg.reps, |rep| run_replication(cfg, eta_bar, rep));
        let mut ok = Vec::new();
        for (rep, r) in runs.into_iter().enumerate() {
            match r {
                Ok(o) => ok.push(o),
                Err(e) => failures.push(FailureRecord { eta_bar, rep, seed: cfg.rep_seed(rep), message: e.to_string() }),
            }
        }
        if ok.is_empty() {
            return Err(MteError::InvalidData(format!("every replication failed at eta_bar = {eta_bar}")));
        }
        let (c, m) = aggregate(cfg, eta_bar, truth, &ok)?;
        cells.extend(c);
        mte.extend(m);
    }
    Ok(ExperimentResult {
        config: cfg.clone(),
        truths,
        cells,
        mte,
        failures,
        rep_seeds: (0..cfg.reps).map(|r| cfg.rep_seed(r)).collect(),
    })
}

/// RMSE of the covariate-averaged MTE curve at one instrument strength.
pub fn mte_rmse_profile(cfg: &ExperimentConfig, eta_bar: f64) -> Result<Vec<MteCell>> {
    let single = ExperimentConfig { eta_grid: vec![eta_bar], ..cfg.clone() };
    Ok(run_experiment(&single)?.mte)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kappa: f64,
    /// Mean instrument bandwidth across replications.
    pub z_bandwidth: f64,
    /// Mean instrument bandwidth constant across replications.
    pub z_constant: f64,
    pub cells: Vec<ErrorCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: ExperimentConfig,
    pub eta_bar: f64,
    pub truth: TrueTargets,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<FailureRecord>,
}

/// Bias across bandwidth offsets `κ`: one cross-validation per replication,
/// then a refit at `max(floor, c₀ + κ/2)` for every offset.
pub fn bandwidth_bias_sweep(cfg: &ExperimentConfig, eta_bar: f64, kappas: &[f64]) -> Result<SweepResult> {
    cfg.validate()?;
    if kappas.is_empty() {
        return Err(MteError::InvalidParameter("no bandwidth offsets".into()));
    }
    let single = ExperimentConfig { eta_grid: vec![eta_bar], known_propensity: false, ..cfg.clone() };
    let truth = grid_truths(&single)?[0];
    let kc = single.kernel_config();
    let runs = par::map_collect(single.reps, |rep| -> Result<Vec<(ReplicationOutcome, f64)>> {
        let seed = single.rep_seed(rep);
        let dgp = DgpConfig { n: single.n, eta_bar, seed, outcome: single.outcome };
        let (data, _) = dgp_generate(&dgp)?;
        let mut rng = RngState::with_stream(seed, streams::BANDWIDTH_CV);
        let base = select_constants(&data, &kc, &mut rng)?;
        let fits = refit_with_offsets(&data, &kc, &base, kappas)?;
        fits.iter()
            .map(|fit| {
                let c = fit.bandwidths.iter().find(|b| b.regressor == "z").map(|b| b.constant).unwrap_or(f64::NAN);
                Ok((estimate_sample(&data, fit, &single)?, c))
            })
            .collect()
    });
    let mut per_kappa: Vec<Vec<(ReplicationOutcome, f64)>> = vec![Vec::new(); kappas.len()];
    let mut failures = Vec::new();
    for (rep, r) in runs.into_iter().enumerate() {
        match r {
            Ok(v) => {
                for (k, o) in v.into_iter().enumerate() {
                    per_kappa[k].push(o);
                }
            }
            Err(e) => failures.push(FailureRecord { eta_bar, rep, seed: single.rep_seed(rep), message: e.to_string() }),
        }
    }
    if per_kappa[0].is_empty() {
        return Err(MteError::InvalidData("every replication failed".into()));
    }
    let mut rows = Vec::new();
    for (k, kappa) in kappas.iter().enumerate() {
        let outs: Vec<ReplicationOutcome> = per_kappa[k].iter().map(|(o, _)| o.clone()).collect();
        let cnt = outs.len() as f64;
        let z_bandwidth = outs.iter().filter_map(|o| o.z_bandwidth).sum::<f64>() / cnt;
        let z_constant = per_kappa[k].iter().map(|(_, c)| c).sum::<f64>() / cnt;
        let (cells, _) = aggregate(&single, eta_bar, &truth, &outs)?;
        rows.push(SweepRow { kappa: *kappa, z_bandwidth, z_constant, cells });
    }
    Ok(SweepResult { config: single, eta_bar, truth, rows, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_gamma_and_mte() {
        let om = OutcomeModel::default();
        let g = om.true_gamma();
        let want = [0.3, 0.1, -0.1, 0.1, 0.3];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        for v in [0.1, 0.5, 0.9] {
            assert!((om.average_mte(v) - (-0.05 + 0.6 * v)).abs() < 1e-15);
        }
        assert!((om.average_mte(0.5) - 0.25).abs() < 1e-15);
        let h = OutcomeModel::homogeneous();
        assert!((h.mte(1.0, 0.9) - 0.2).abs() < 1e-15 && (h.mte(0.0, 0.1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn truth_gamma_matches_regression_function() {
        // m(x, p) = E[Y0|x] + ∫₀ᵖ MTE(x, v) dv, by quadrature
        let om = OutcomeModel::default();
        let g = om.true_gamma();
        for x in [0.0, 1.0] {
            for p in [0.2, 0.55, 0.9] {
                let steps = 2000;
                let integral: f64 = (0..steps)
                    .map(|i| om.mte(x, (i as f64 + 0.5) * p / steps as f64) * p / steps as f64)
                    .sum();
                let m = om.alpha0 + om.beta0 * x + integral;
                let r = [1.0, x, p, x * p, p * p];
                let rg: f64 = r.iter().zip(g).map(|(a, b)| a * b).sum();
                assert!((m - rg).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hidden_truth_is_consistent() {
        let cfg = DgpConfig::new(2000, 0.6, 99);
        let (ds, t) = dgp_generate(&cfg).unwrap();
        for i in 0..ds.len() {
            let a = if t.pi[i] > t.v[i] { 1.0 } else { 0.0 };
            assert_eq!(ds.a()[i], a);
            assert_eq!(ds.y()[i], (1.0 - a) * t.y0[i] + a * t.y1[i]);
            assert_eq!(t.pi[i], cfg.propensity(ds.x_row(i)[0], ds.z()[i]));
        }
        let (ds2, _) = dgp_generate(&cfg).unwrap();
        assert_eq!(ds, ds2);
    }

    #[test]
    fn treated_share_matches_monte_carlo() {
        for eta in [0.2, 1.0] {
            let cfg = DgpConfig::new(1_000_000, eta, 5);
            let (ds, _) = dgp_generate(&cfg).unwrap();
            let p = ds.treated_share();
            let se = (0.25 / 1e6_f64).sqrt();
            assert!((p - cfg.treated_share()).abs() < 4.0 * se, "{eta}: {p} vs {}", cfg.treated_share());
        }
        let weak = DgpConfig::new(200_000, 1e-9, 6);
        let (ds, _) = dgp_generate(&weak).unwrap();
        let x0 = ds.filter_rows(|x| x[0] == 0.0);
        assert!((x0.treated_share() - 0.5).abs() < 4.0 * (0.25 / x0.len() as f64).sqrt());
    }

    #[test]
    fn oracle_needs_enough_draws() {
        assert!(true_targets(0.2, 1000, 1, &OutcomeModel::default()).is_err());
    }

    #[test]
    fn replication_seeds_are_stable() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.rep_seed(3), cfg.rep_seed(3));
        assert_ne!(cfg.rep_seed(3), cfg.rep_seed(4));
    }
}
