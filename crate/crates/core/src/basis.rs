//! Regression basis `r(x, p)` for the polynomial MTE model.
//!
//! Index map for covariate dimension `d` and polynomial order `S`:
//!
//! | block            | entries                      | count |
//! |------------------|------------------------------|-------|
//! | intercept        | `1`                          | 1     |
//! | covariates       | `x`                          | d     |
//! | linear in p      | `p`                          | 1     |
//! | covariates × p   | `x·p`                        | d     |
//! | higher powers    | `p², …, p^{S+1}`             | S     |
//! | interactions     | `x·p², …, x·p^{S+1}` (opt.)  | d·S   |

use serde::{Deserialize, Serialize};

use crate::error::{MteError, Result};
use crate::numerics::Vector;

/// Shape of the MTE model: polynomial order in `v`, whether covariates
/// interact with the higher powers, and the covariate dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MteModelSpec {
    pub poly_order: usize,
    pub interactions: bool,
    pub covariate_dim: usize,
}

impl MteModelSpec {
    pub fn new(poly_order: usize, interactions: bool, covariate_dim: usize) -> Result<Self> {
        if poly_order == 0 {
            return Err(MteError::InvalidParameter("poly_order must be at least 1".into()));
        }
        Ok(Self { poly_order, interactions, covariate_dim })
    }

    /// Linear MTE in `v` with no higher-order interactions.
    pub fn linear(covariate_dim: usize) -> Self {
        Self { poly_order: 1, interactions: false, covariate_dim }
    }

    pub fn dim(&self) -> usize {
        let d = self.covariate_dim;
        let s = self.poly_order;
        2 + 2 * d + s + if self.interactions { d * s } else { 0 }
    }

    /// Index of the first `p`-dependent entry. Entries before it are the
    /// intercept and the covariates.
    pub fn p_offset(&self) -> usize {
        1 + self.covariate_dim
    }

    /// Human-readable names of the basis entries, in index order.
    pub fn labels(&self) -> Vec<String> {
        let d = self.covariate_dim;
        let xname = |j: usize| if d == 1 { "x".to_string() } else { format!("x{}", j + 1) };
        let mut out = vec!["1".to_string()];
        out.extend((0..d).map(xname));
        out.push("p".into());
        out.extend((0..d).map(|j| format!("{}*p", xname(j))));
        for k in 2..=self.poly_order + 1 {
            out.push(format!("p^{k}"));
        }
        if self.interactions {
            for k in 2..=self.poly_order + 1 {
                out.extend((0..d).map(|j| format!("{}*p^{k}", xname(j))));
            }
        }
        out
    }

    fn check(&self, x: &[f64], p: f64) -> Result<()> {
        self.check_x(x)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(MteError::PropensityOutOfRange(p));
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.covariate_dim {
            return Err(MteError::DimensionMismatch(format!(
                "covariate vector has length {}, model expects {}",
                x.len(),
                self.covariate_dim
            )));
        }
        Ok(())
    }
}

/// Writes `r(x, p)` into `out` without validation.
pub(crate) fn fill_r(x: &[f64], p: f64, spec: &MteModelSpec, out: &mut [f64]) {
    let d = spec.covariate_dim;
    out[0] = 1.0;
    out[1..=d].copy_from_slice(x);
    out[d + 1] = p;
    for j in 0..d {
        out[d + 2 + j] = x[j] * p;
    }
    let base = 2 * d + 2;
    let s = spec.poly_order;
    let mut pk = p;
    for k in 0..s {
        pk *= p;
        out[base + k] = pk;
        if spec.interactions {
            let off = base + s + k * d;
            for j in 0..d {
                out[off + j] = x[j] * pk;
            }
        }
    }
}

/// Writes `∂r(x, p)/∂p` into `out` without validation.
pub(crate) fn fill_dr(x: &[f64], p: f64, spec: &MteModelSpec, out: &mut [f64]) {
    let d = spec.covariate_dim;
    out[..=d].fill(0.0);
    out[d + 1] = 1.0;
    out[d + 2..2 * d + 2].copy_from_slice(x);
    let base = 2 * d + 2;
    let s = spec.poly_order;
    // derivative of p^{k+2} is (k+2)·p^{k+1}
    let mut pk = 1.0;
    for k in 0..s {
        pk *= p;
        let deriv = (k + 2) as f64 * pk;
        out[base + k] = deriv;
        if spec.interactions {
            let off = base + s + k * d;
            for j in 0..d {
                out[off + j] = x[j] * deriv;
            }
        }
    }
}

/// `r(x,p) − r(x,0)`: the p-dependent part of the basis.
pub(crate) fn fill_r_att(x: &[f64], p: f64, spec: &MteModelSpec, out: &mut [f64]) {
    fill_r(x, p, spec, out);
    out[..spec.p_offset()].fill(0.0);
}

pub fn build_r(x: &[f64], p: f64, spec: &MteModelSpec) -> Result<Vector> {
    spec.check(x, p)?;
    let mut v = Vector::zeros(spec.dim());
    fill_r(x, p, spec, v.as_mut_slice());
    Ok(v)
}

pub fn build_dr_dp(x: &[f64], p: f64, spec: &MteModelSpec) -> Result<Vector> {
    spec.check(x, p)?;
    let mut v = Vector::zeros(spec.dim());
    fill_dr(x, p, spec, v.as_mut_slice());
    Ok(v)
}

/// Weight vector of the population-average effect, `r(x,1) − r(x,0)`.
pub fn build_r_ate(x: &[f64], spec: &MteModelSpec) -> Result<Vector> {
    spec.check_x(x)?;
    let mut v = Vector::zeros(spec.dim());
    fill_r_att(x, 1.0, spec, v.as_mut_slice());
    Ok(v)
}

/// `r(x,p) − r(x,0)`: effect weights for those with `V < p`.
pub fn build_r_att(x: &[f64], p: f64, spec: &MteModelSpec) -> Result<Vector> {
    spec.check(x, p)?;
    let mut v = Vector::zeros(spec.dim());
    fill_r_att(x, p, spec, v.as_mut_slice());
    Ok(v)
}

/// `r(x,1) − r(x,p)`: effect weights for those with `V ≥ p`.
pub fn build_r_atu(x: &[f64], p: f64, spec: &MteModelSpec) -> Result<Vector> {
    Ok(build_r_ate(x, spec)? - build_r_att(x, p, spec)?)
}

/// `∂r_ATT/∂p`, identical to [`build_dr_dp`].
pub fn build_dr_att_dp(x: &[f64], p: f64, spec: &MteModelSpec) -> Result<Vector> {
    build_dr_dp(x, p, spec)
}

/// `∂r_ATU/∂p = −∂r/∂p`.
pub fn build_dr_atu_dp(x: &[f64], p: f64, spec: &MteModelSpec) -> Result<Vector> {
    Ok(-build_dr_dp(x, p, spec)?)
}
