//! Run configuration, CSV ingestion and result emission for the CLI.
//!
//! Every CSV starts with `#` comment lines carrying the generator version,
//! the seed and the full configuration as JSON, which is enough to
//! regenerate the file. Files are written to a temporary name and renamed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::basis::MteModelSpec;
use crate::data::{CovariateKind, Dataset};
use crate::error::{MteError, Result};
use crate::estimators::{EstimatorKind, SampleMoments};
use crate::numerics::RngState;
use crate::propensity::{fit_propensity, KernelConfig, PropensityFit};
use crate::simulation::{
    bandwidth_bias_sweep, dgp_generate, run_experiment, streams, DgpConfig, ExperimentConfig, OutcomeModel,
};
use crate::targets::{estimate_all, mte_curve, Estimand, Estimates, TargetKind, TargetOptions};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Conventional,
    Efficient,
    #[default]
    Both,
}

impl MethodChoice {
    pub fn methods(&self) -> Vec<EstimatorKind> {
        match self {
            Self::Conventional => vec![EstimatorKind::Conventional],
            Self::Efficient => vec![EstimatorKind::Efficient],
            Self::Both => vec![EstimatorKind::Conventional, EstimatorKind::Efficient],
        }
    }
}

/// Mapping from CSV columns to dataset roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub y: String,
    pub a: String,
    pub x: Vec<String>,
    pub x_kinds: Vec<CovariateKind>,
    pub z: String,
}

impl Default for ColumnRoles {
    fn default() -> Self {
        Self {
            y: "y".into(),
            a: "a".into(),
            x: vec!["x".into()],
            x_kinds: vec![CovariateKind::Discrete],
            z: "z".into(),
        }
    }
}

/// All parameters of a CLI run. Serialized verbatim into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub n: usize,
    pub reps: usize,
    pub eta_bar: Vec<f64>,
    pub poly_order: usize,
    pub interactions: bool,
    pub known_propensity: bool,
    pub method: MethodChoice,
    pub kernel: Option<KernelConfig>,
    pub v_grid: Option<Vec<f64>>,
    pub kappas: Vec<f64>,
    pub oracle_n: usize,
    pub outcome: OutcomeModel,
    /// Input CSV for `estimate` and `curve`; a simulated sample otherwise.
    pub data: Option<PathBuf>,
    pub columns: ColumnRoles,
    pub efficient_weights_on_efficient_gamma: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: e.seed,
            out: PathBuf::from("out"),
            n: e.n,
            reps: e.reps,
            eta_bar: e.eta_grid,
            poly_order: 1,
            interactions: false,
            known_propensity: false,
            method: MethodChoice::Both,
            kernel: None,
            v_grid: None,
            kappas: vec![-0.4, -0.2, 0.0, 0.2, 0.4],
            oracle_n: e.oracle_n,
            outcome: OutcomeModel::default(),
            data: None,
            columns: ColumnRoles::default(),
            efficient_weights_on_efficient_gamma: false,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn covariate_dim(&self) -> usize {
        if self.data.is_some() {
            self.columns.x.len()
        } else {
            1
        }
    }

    pub fn model(&self) -> Result<MteModelSpec> {
        MteModelSpec::new(self.poly_order, self.interactions, self.covariate_dim())
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let d = ExperimentConfig::default();
        Ok(ExperimentConfig {
            eta_grid: self.eta_bar.clone(),
            reps: self.reps,
            n: self.n,
            seed: self.seed,
            model: MteModelSpec::new(self.poly_order, self.interactions, 1)?,
            kernel: self.kernel.clone(),
            known_propensity: self.known_propensity,
            outcome: self.outcome,
            v_grid: self.v_grid.clone().unwrap_or(d.v_grid),
            oracle_n: self.oracle_n,
            target_options: self.target_options(),
        })
    }

    fn target_options(&self) -> TargetOptions {
        TargetOptions { efficient_weights_on_efficient_gamma: self.efficient_weights_on_efficient_gamma }
    }

    fn kernel_config(&self, n: usize) -> KernelConfig {
        self.kernel.clone().unwrap_or_else(|| KernelConfig::for_sample_size(n))
    }

    fn header(&self) -> Result<String> {
        Ok(format!(
            "# generator: mte {VERSION}\n# seed: {}\n# config: {}\n",
            self.seed,
            serde_json::to_string(self)?
        ))
    }
}

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| MteError::InvalidParameter(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_cell(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Read a CSV with a header row. Lines starting with `#` are skipped. Data
/// rows are numbered from 1 in error messages.
pub fn ingest_csv(path: &Path, roles: &ColumnRoles) -> Result<Dataset> {
    if roles.x.len() != roles.x_kinds.len() {
        return Err(MteError::InvalidParameter(
            "each covariate column needs a continuous/discrete flag".into(),
        ));
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MteError::InvalidData(format!("column '{name}' not found in {}", path.display())))
    };
    let iy = col(&roles.y)?;
    let ia = col(&roles.a)?;
    let iz = col(&roles.z)?;
    let ix: Vec<usize> = roles.x.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let (mut y, mut a, mut z, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut missing = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).and_then(parse_cell);
        let vals = (get(iy), get(ia), get(iz), ix.iter().map(|&i| get(i)).collect::<Option<Vec<f64>>>());
        match vals {
            (Some(yv), Some(av), Some(zv), Some(xv)) => {
                y.push(yv);
                a.push(av);
                z.push(zv);
                x.push(xv);
            }
            _ => {
                missing.push(row + 1);
                y.push(0.0);
                a.push(0.0);
                z.push(0.0);
                x.push(vec![0.0; ix.len()]);
            }
        }
    }
    if !missing.is_empty() {
        return Err(MteError::MissingValues { rows: missing });
    }
    Dataset::new(y, a, x, roles.x_kinds.clone(), z)
}

/// CSV text of a dataset with columns `y, a, x…, z`.
pub fn dataset_csv(data: &Dataset, roles: &ColumnRoles, header: &str) -> Result<String> {
    let mut out = String::from(header);
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut head = vec![roles.y.clone(), roles.a.clone()];
    head.extend(roles.x.iter().cloned());
    head.push(roles.z.clone());
    wtr.write_record(&head)?;
    for i in 0..data.len() {
        let mut rec = vec![data.y()[i].to_string(), data.a()[i].to_string()];
        rec.extend(data.x_row(i).iter().map(|v| v.to_string()));
        rec.push(data.z()[i].to_string());
        wtr.write_record(&rec)?;
    }
    out.push_str(&String::from_utf8(wtr.into_inner().map_err(|e| MteError::Io(e.into_error()))?).expect("utf8"));
    Ok(out)
}

/// Build CSV text from a header and string rows.
fn csv_text(header_comment: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(columns)?;
    for r in rows {
        wtr.write_record(r)?;
    }
    let body = String::from_utf8(wtr.into_inner().map_err(|e| MteError::Io(e.into_error()))?).expect("utf8");
    Ok(format!("{header_comment}{body}"))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

/// Files written by a command, in write order.
pub type Written = Vec<PathBuf>;

fn emit(out: &Path, name: &str, text: &str, written: &mut Written) -> Result<()> {
    let p = out.join(name);
    write_atomic(&p, text.as_bytes())?;
    written.push(p);
    Ok(())
}

fn emit_json(out: &Path, name: &str, value: &Value, written: &mut Written) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    emit(out, name, &s, written)
}

fn provenance(cfg: &RunConfig) -> Result<Value> {
    Ok(json!({ "generator": format!("mte {VERSION}"), "seed": cfg.seed, "config": serde_json::to_value(cfg)? }))
}

/// `simulate`: replicated experiment over the instrument-strength grid.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Written> {
    let exp = cfg.experiment()?;
    let res = run_experiment(&exp)?;
    let methods = cfg.method.methods();
    let header = cfg.header()?;
    let mut written = Vec::new();

    let rows: Vec<Vec<String>> = res
        .cells
        .iter()
        .filter(|c| methods.contains(&c.method))
        .map(|c| {
            vec![
                num(c.eta_bar),
                c.method.as_str().into(),
                c.quantity.clone(),
                num(c.truth),
                num(c.bias),
                num(c.rmse),
                num(c.coverage),
                c.count.to_string(),
            ]
        })
        .collect();
    let t = csv_text(&header, &["eta_bar", "method", "quantity", "truth", "bias", "rmse", "coverage", "count"], &rows)?;
    emit(&cfg.out, "simulate_errors.csv", &t, &mut written)?;

    let rows: Vec<Vec<String>> = res
        .mte
        .iter()
        .filter(|c| methods.contains(&c.method))
        .map(|c| {
            vec![
                num(c.eta_bar),
                c.method.as_str().into(),
                num(c.v),
                num(c.truth),
                num(c.bias),
                num(c.rmse),
                c.count.to_string(),
                c.skipped.to_string(),
            ]
        })
        .collect();
    let t = csv_text(&header, &["eta_bar", "method", "v", "truth", "bias", "rmse", "count", "skipped"], &rows)?;
    emit(&cfg.out, "simulate_mte.csv", &t, &mut written)?;

    let mut plot = Vec::new();
    for c in res.cells.iter().filter(|c| methods.contains(&c.method)) {
        plot.push(vec![format!("rmse:{}:{}", c.method.as_str(), c.quantity), num(c.eta_bar), num(c.rmse)]);
        if c.bias.is_finite() {
            plot.push(vec![format!("bias:{}:{}", c.method.as_str(), c.quantity), num(c.eta_bar), num(c.bias)]);
        }
    }
    for c in res.mte.iter().filter(|c| methods.contains(&c.method)) {
        plot.push(vec![format!("mte_rmse:{}:eta_bar={}", c.method.as_str(), c.eta_bar), num(c.v), num(c.rmse)]);
    }
    let t = csv_text(&header, &["series", "x", "y"], &plot)?;
    emit(&cfg.out, "simulate_plot.csv", &t, &mut written)?;

    let rows: Vec<Vec<String>> = res
        .failures
        .iter()
        .map(|f| vec![num(f.eta_bar), f.rep.to_string(), f.seed.to_string(), f.message.clone()])
        .collect();
    let t = csv_text(&header, &["eta_bar", "rep", "seed", "message"], &rows)?;
    emit(&cfg.out, "simulate_failures.csv", &t, &mut written)?;

    let mut truths = Vec::new();
    for t in &res.truths {
        truths.push(serde_json::to_value(t)?);
    }
    let summary = json!({
        "provenance": provenance(cfg)?,
        "replications": exp.reps,
        "failures": res.failures.len(),
        "truths": truths,
        "rep_seeds": res.rep_seeds,
    });
    emit_json(&cfg.out, "summary.json", &summary, &mut written)?;
    Ok(written)
}

/// Data, propensity fit and estimates for `estimate` and `curve`.
pub struct Analysis {
    pub data: Dataset,
    pub fit: PropensityFit,
    pub model: MteModelSpec,
    pub estimates: Estimates,
    pub kinds: Vec<Estimand>,
}

/// Load or simulate the sample, fit the propensity and estimate everything.
pub fn analyse(cfg: &RunConfig) -> Result<Analysis> {
    let model = cfg.model()?;
    let (data, known) = match &cfg.data {
        Some(path) => {
            if cfg.known_propensity {
                return Err(MteError::InvalidParameter(
                    "known propensities are only available for simulated data".into(),
                ));
            }
            (ingest_csv(path, &cfg.columns)?, None)
        }
        None => {
            let eta = *cfg.eta_bar.first().ok_or_else(|| MteError::InvalidParameter("no eta_bar given".into()))?;
            let (d, t) = dgp_generate(&DgpConfig { n: cfg.n, eta_bar: eta, seed: cfg.seed, outcome: cfg.outcome })?;
            (d, Some(t.pi))
        }
    };
    let fit = match (cfg.known_propensity, known) {
        (true, Some(pi)) => PropensityFit::from_known(&data, pi)?,
        _ => {
            let mut rng = RngState::with_stream(cfg.seed, streams::BANDWIDTH_CV);
            fit_propensity(&data, &cfg.kernel_config(data.len()), &mut rng)?
        }
    };
    let m = SampleMoments::new(&data, &fit, &model)?;
    let kinds = Estimand::ALL.to_vec();
    let estimates = estimate_all(&m, &kinds, cfg.target_options())?;
    Ok(Analysis { data, fit, model, estimates, kinds })
}

const TABLE_ROWS: [&str; 4] = ["Estimate", "Standard Error", "95% CI-Lower", "95% CI-Upper"];

/// `estimate`: parameter and target tables plus a JSON summary.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<Written> {
    let an = analyse(cfg)?;
    let header = cfg.header()?;
    let methods = cfg.method.methods();
    let mut written = Vec::new();

    let labels = an.model.labels();
    let mut cols = vec!["method".to_string(), "row".to_string()];
    cols.extend(labels.iter().cloned());
    let mut rows = Vec::new();
    for &method in &methods {
        let g = an.estimates.gamma(method);
        let se = g.standard_errors();
        for (r, name) in TABLE_ROWS.iter().enumerate() {
            let mut row = vec![method.as_str().to_string(), name.to_string()];
            for j in 0..g.gamma.len() {
                let v = match r {
                    0 => g.gamma[j],
                    1 => se[j],
                    2 => g.gamma[j] - crate::targets::Z_95 * se[j],
                    _ => g.gamma[j] + crate::targets::Z_95 * se[j],
                };
                row.push(num(v));
            }
            rows.push(row);
        }
    }
    let col_refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    emit(&cfg.out, "gamma_table.csv", &csv_text(&header, &col_refs, &rows)?, &mut written)?;

    let mut cols = vec!["method", "row"];
    cols.extend(an.kinds.iter().map(|k| k.as_str()));
    let mut rows = Vec::new();
    for &method in &methods {
        for (r, name) in TABLE_ROWS.iter().enumerate() {
            let mut row = vec![method.as_str().to_string(), name.to_string()];
            for &k in &an.kinds {
                let t = an.estimates.target(k, method).expect("estimated");
                row.push(num([t.point, t.se, t.ci_lower, t.ci_upper][r]));
            }
            rows.push(row);
        }
    }
    emit(&cfg.out, "target_table.csv", &csv_text(&header, &cols, &rows)?, &mut written)?;

    let mut gamma_json = Map::new();
    let mut target_json = Map::new();
    for &method in &methods {
        let g = an.estimates.gamma(method);
        let se = g.standard_errors();
        let mut gm = Map::new();
        for (j, l) in labels.iter().enumerate() {
            gm.insert(l.clone(), json!({ "estimate": g.gamma[j], "se": se[j] }));
        }
        gamma_json.insert(method.as_str().into(), json!({ "parameters": gm, "pseudo_inverse": g.pseudo_inverse }));
        let mut tm = Map::new();
        for t in an.estimates.targets.iter().filter(|t| t.method == method) {
            if let TargetKind::Estimand(k) = t.kind {
                tm.insert(
                    k.as_str().into(),
                    json!({ "estimate": t.point, "se": t.se, "ci_lower": t.ci_lower, "ci_upper": t.ci_upper }),
                );
            }
        }
        target_json.insert(method.as_str().into(), Value::Object(tm));
    }
    let summary = json!({
        "provenance": provenance(cfg)?,
        "n": an.data.len(),
        "treated_share": an.data.treated_share(),
        "observational_association": an.data.observational_association().ok(),
        "propensity": {
            "source": an.fit.source,
            "min": an.fit.min(),
            "max": an.fit.max(),
            "bandwidths": an.fit.bandwidths,
        },
        "gamma": gamma_json,
        "targets": target_json,
    });
    emit_json(&cfg.out, "summary.json", &summary, &mut written)?;
    Ok(written)
}

/// Evenly spaced grid strictly inside the propensity range.
fn default_grid(fit: &PropensityFit, points: usize) -> Vec<f64> {
    let (lo, hi) = (fit.min(), fit.max());
    (1..=points).map(|i| lo + (hi - lo) * i as f64 / (points + 1) as f64).collect()
}

/// `curve`: covariate-averaged MTE curve with pointwise bands.
pub fn cmd_curve(cfg: &RunConfig) -> Result<Written> {
    let an = analyse(cfg)?;
    let grid = cfg.v_grid.clone().unwrap_or_else(|| default_grid(&an.fit, 19));
    let header = cfg.header()?;
    let mut written = Vec::new();
    let mut rows = Vec::new();
    let mut plot = Vec::new();
    for method in cfg.method.methods() {
        let c = mte_curve(an.estimates.gamma(method), &an.data, &an.fit, &grid, None)?;
        for i in 0..grid.len() {
            rows.push(vec![
                method.as_str().into(),
                num(grid[i]),
                num(c.estimate[i]),
                num(c.se[i]),
                num(c.ci_lower[i]),
                num(c.ci_upper[i]),
            ]);
            for (series, y) in [("estimate", c.estimate[i]), ("ci_lower", c.ci_lower[i]), ("ci_upper", c.ci_upper[i])] {
                plot.push(vec![format!("mte_{series}:{}", method.as_str()), num(grid[i]), num(y)]);
            }
        }
    }
    emit(
        &cfg.out,
        "mte_curve.csv",
        &csv_text(&header, &["method", "v", "estimate", "se", "ci_lower", "ci_upper"], &rows)?,
        &mut written,
    )?;
    emit(&cfg.out, "mte_curve_plot.csv", &csv_text(&header, &["series", "x", "y"], &plot)?, &mut written)?;
    Ok(written)
}

/// `bandwidth-sweep`: bias across bandwidth offsets at the first `eta_bar`.
pub fn cmd_bandwidth_sweep(cfg: &RunConfig) -> Result<Written> {
    let exp = cfg.experiment()?;
    let eta = *cfg.eta_bar.first().ok_or_else(|| MteError::InvalidParameter("no eta_bar given".into()))?;
    let res = bandwidth_bias_sweep(&exp, eta, &cfg.kappas)?;
    let header = cfg.header()?;
    let methods = cfg.method.methods();
    let mut written = Vec::new();
    let mut rows = Vec::new();
    let mut plot = Vec::new();
    for r in &res.rows {
        for c in r.cells.iter().filter(|c| methods.contains(&c.method)) {
            rows.push(vec![
                num(r.kappa),
                num(r.z_constant),
                num(r.z_bandwidth),
                c.method.as_str().into(),
                c.quantity.clone(),
                num(c.truth),
                num(c.bias),
                num(c.rmse),
                c.count.to_string(),
            ]);
            if c.bias.is_finite() {
                plot.push(vec![format!("bias:{}:{}", c.method.as_str(), c.quantity), num(r.kappa), num(c.bias)]);
            }
        }
    }
    emit(
        &cfg.out,
        "bandwidth_sweep.csv",
        &csv_text(
            &header,
            &["kappa", "z_constant", "z_bandwidth", "method", "quantity", "truth", "bias", "rmse", "count"],
            &rows,
        )?,
        &mut written,
    )?;
    emit(&cfg.out, "bandwidth_sweep_plot.csv", &csv_text(&header, &["series", "x", "y"], &plot)?, &mut written)?;
    let summary = json!({
        "provenance": provenance(cfg)?,
        "eta_bar": eta,
        "truth": serde_json::to_value(res.truth)?,
        "failures": res.failures.len(),
    });
    emit_json(&cfg.out, "summary.json", &summary, &mut written)?;
    Ok(written)
}

/// Render a short human-readable report of an analysis.
pub fn describe(an: &Analysis) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "n = {}, propensity range [{:.4}, {:.4}]", an.data.len(), an.fit.min(), an.fit.max());
    for t in &an.estimates.targets {
        if let TargetKind::Estimand(k) = t.kind {
            let _ = writeln!(s, "{:<12} {:<4} {:>9.4} ({:.4})", t.method.as_str(), k.as_str(), t.point, t.se);
        }
    }
    s
}
