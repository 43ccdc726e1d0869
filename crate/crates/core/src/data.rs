//! Observed sample: outcome, binary treatment, covariates and instrument.

use serde::{Deserialize, Serialize};

use crate::error::{MteError, Result};

/// How a covariate enters the propensity kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Discrete,
}

/// Validated sample. Covariates are stored row-major, `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<f64>,
    x: Vec<f64>,
    kinds: Vec<CovariateKind>,
    z: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset. `x_rows[i]` holds the covariates of observation `i`.
    /// Treatment must be exactly 0 or 1.
    pub fn new(
        y: Vec<f64>,
        a: Vec<f64>,
        x_rows: Vec<Vec<f64>>,
        kinds: Vec<CovariateKind>,
        z: Vec<f64>,
    ) -> Result<Self> {
        let ds = Self::assemble(y, a, x_rows, kinds, z)?;
        if let Some((i, &v)) = ds.a.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(MteError::NonBinaryTreatment { row: i + 1, value: v });
        }
        Ok(ds)
    }

    /// Like [`Dataset::new`] but admits treatment values anywhere in `[0, 1]`.
    /// Used for algebraic checks where `a` is set equal to a propensity.
    pub fn with_fractional_treatment(
        y: Vec<f64>,
        a: Vec<f64>,
        x_rows: Vec<Vec<f64>>,
        kinds: Vec<CovariateKind>,
        z: Vec<f64>,
    ) -> Result<Self> {
        let ds = Self::assemble(y, a, x_rows, kinds, z)?;
        if let Some((i, &v)) = ds.a.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(MteError::NonBinaryTreatment { row: i + 1, value: v });
        }
        Ok(ds)
    }

    fn assemble(
        y: Vec<f64>,
        a: Vec<f64>,
        x_rows: Vec<Vec<f64>>,
        kinds: Vec<CovariateKind>,
        z: Vec<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if a.len() != n || z.len() != n || x_rows.len() != n {
            return Err(MteError::DimensionMismatch(format!(
                "column lengths differ: y={}, a={}, x={}, z={}",
                n,
                a.len(),
                x_rows.len(),
                z.len()
            )));
        }
        let d = kinds.len();
        let mut x = Vec::with_capacity(n * d);
        let mut bad = Vec::new();
        for (i, row) in x_rows.iter().enumerate() {
            if row.len() != d {
                return Err(MteError::DimensionMismatch(format!(
                    "row {} has {} covariates, expected {d}",
                    i + 1,
                    row.len()
                )));
            }
            if !(y[i].is_finite() && a[i].is_finite() && z[i].is_finite())
                || row.iter().any(|v| !v.is_finite())
            {
                bad.push(i + 1);
            }
            x.extend_from_slice(row);
        }
        if !bad.is_empty() {
            return Err(MteError::MissingValues { rows: bad });
        }
        Ok(Self { y, a, x, kinds, z })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Covariate dimension.
    pub fn dim(&self) -> usize {
        self.kinds.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn kinds(&self) -> &[CovariateKind] {
        &self.kinds
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x[i * d..(i + 1) * d]
    }

    pub fn x_col(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.x[i * self.dim() + j]).collect()
    }

    /// Share of treated observations.
    pub fn treated_share(&self) -> f64 {
        crate::numerics::mean(&self.a)
    }

    /// Copy with the outcome replaced.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.len() {
            return Err(MteError::DimensionMismatch("outcome length".into()));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(MteError::MissingValues { rows: vec![i + 1] });
        }
        Ok(Self { y, ..self.clone() })
    }

    /// Copy with the instrument replaced.
    pub fn with_instrument(&self, z: Vec<f64>) -> Result<Self> {
        if z.len() != self.len() {
            return Err(MteError::DimensionMismatch("instrument length".into()));
        }
        Ok(Self { z, ..self.clone() })
    }

    /// Observations whose covariates satisfy `keep`.
    pub fn filter_rows(&self, keep: impl Fn(&[f64]) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.x_row(i))).collect();
        Self {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            x: idx.iter().flat_map(|&i| self.x_row(i).to_vec()).collect(),
            kinds: self.kinds.clone(),
            z: idx.iter().map(|&i| self.z[i]).collect(),
        }
    }

    /// Difference in mean outcome between treated and untreated.
    pub fn observational_association(&self) -> Result<f64> {
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
        for (y, a) in self.y.iter().zip(&self.a) {
            if *a == 1.0 {
                s1 += y;
                n1 += 1;
            } else if *a == 0.0 {
                s0 += y;
                n0 += 1;
            }
        }
        if n1 == 0 || n0 == 0 {
            return Err(MteError::UndefinedConditional(
                "both treatment groups must be nonempty".into(),
            ));
        }
        Ok(s1 / n1 as f64 - s0 / n0 as f64)
    }
}
