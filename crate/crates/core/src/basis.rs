//! Regression bases evaluated on normalized time.
//!
//! Every basis works on `t' = (t - t_1) / (t_m - t_1)`, so a design matrix built
//! from any grid has its rows on `[0, 1]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::curves::TimeGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolynomialBasis {
    pub degree: usize,
}

impl PolynomialBasis {
    pub fn new(degree: usize) -> Self {
        Self { degree }
    }

    pub fn dim(&self) -> usize {
        self.degree + 1
    }

    /// `(1, t, t^2, ..., t^p)`.
    pub fn row(&self, t: f64) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.dim());
        let mut power = 1.0;
        for _ in 0..self.dim() {
            row.push(power);
            power *= t;
        }
        row
    }
}

/// Clamped B-spline basis with uniformly spaced interior knots on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub degree: usize,
    pub interior_knots: usize,
}

impl Default for SplineBasis {
    fn default() -> Self {
        Self {
            degree: 3,
            interior_knots: 10,
        }
    }
}

const DOMAIN_SLACK: f64 = 1e-12;

impl SplineBasis {
    pub fn new(degree: usize, interior_knots: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidConfig("spline degree must be at least 1".into()));
        }
        Ok(Self { degree, interior_knots })
    }

    pub fn dim(&self) -> usize {
        self.interior_knots + self.degree + 1
    }

    /// Full knot vector: `degree + 1` copies of each end point around the interior knots.
    pub fn knots(&self) -> Vec<f64> {
        let d = self.degree;
        let spans = self.interior_knots + 1;
        let mut knots = vec![0.0; d + 1];
        knots.extend((1..spans).map(|i| i as f64 / spans as f64));
        knots.extend(std::iter::repeat_n(1.0, d + 1));
        knots
    }

    pub fn row(&self, t: f64) -> Result<Vec<f64>> {
        if !(-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&t) {
            return Err(Error::Domain(format!(
                "spline evaluated at normalized time {t}, outside [0, 1]"
            )));
        }
        let t = t.clamp(0.0, 1.0);
        let d = self.degree;
        let knots = self.knots();
        let n = self.dim();

        // Knot span index s with knots[s] <= t < knots[s+1], using the last
        // non-degenerate span at the right end point.
        let span = if t >= 1.0 {
            n - 1
        } else {
            let mut s = d;
            while s < n - 1 && knots[s + 1] <= t {
                s += 1;
            }
            s
        };

        // Non-zero basis functions N_{span-d..=span} by the triangular recurrence.
        let mut local = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        local[0] = 1.0;
        for r in 1..=d {
            left[r] = t - knots[span + 1 - r];
            right[r] = knots[span + r] - t;
            let mut saved = 0.0;
            for q in 0..r {
                let denom = right[q + 1] + left[r - q];
                let temp = if denom == 0.0 { 0.0 } else { local[q] / denom };
                local[q] = saved + right[q + 1] * temp;
                saved = left[r - q] * temp;
            }
            local[r] = saved;
        }

        let mut row = vec![0.0; n];
        row[span - d..=span].copy_from_slice(&local);
        Ok(row)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Basis {
    Polynomial(PolynomialBasis),
    Spline(SplineBasis),
}

impl Basis {
    pub fn dim(&self) -> usize {
        match self {
            Basis::Polynomial(b) => b.dim(),
            Basis::Spline(b) => b.dim(),
        }
    }
}

impl From<PolynomialBasis> for Basis {
    fn from(b: PolynomialBasis) -> Self {
        Basis::Polynomial(b)
    }
}

impl From<SplineBasis> for Basis {
    fn from(b: SplineBasis) -> Self {
        Basis::Spline(b)
    }
}

/// Basis row at normalized time `t`.
pub fn design_row(basis: &Basis, t: f64) -> Result<Vec<f64>> {
    match basis {
        Basis::Polynomial(b) => Ok(b.row(t)),
        Basis::Spline(b) => b.row(t),
    }
}

/// `m x d` design matrix whose row `j` is the basis at the normalized `t_j`.
pub fn design_matrix(basis: &Basis, grid: &TimeGrid) -> Result<DMatrix<f64>> {
    let ts = grid.normalized();
    let d = basis.dim();
    let mut matrix = DMatrix::zeros(ts.len(), d);
    for (j, &t) in ts.iter().enumerate() {
        let row = design_row(basis, t)?;
        for (c, v) in row.into_iter().enumerate() {
            matrix[(j, c)] = v;
        }
    }
    Ok(matrix)
}

/// Row-major design rows, the layout the EM inner loops use.
pub(crate) fn design_rows(basis: &Basis, grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
    grid.normalized().into_iter().map(|t| design_row(basis, t)).collect()
}
