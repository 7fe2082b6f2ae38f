//! BIC scoring and exhaustive search over (clusters, regimes, degree).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{fmt_f64, CurveSet};
use crate::error::{Error, Result};
use crate::mixrhlp::{fit, FitConfig, MixRhlpSpec};
use crate::seed::derive_seed;

/// Free parameters of a MixRHLP class model with `l` regimes in each of `k`
/// clusters of degree `p`: `(K - 1) + K ((p + 4) L - 2)`.
pub fn count_free_parameters(k: usize, l: usize, p: usize) -> usize {
    count_free_parameters_per_cluster(&vec![l; k], p)
}

/// Same count with a regime number per cluster.
pub fn count_free_parameters_per_cluster(regimes: &[usize], p: usize) -> usize {
    // Per cluster: 2 (L - 1) logistic, L (p + 1) coefficients, L variances.
    regimes.len() - 1 + regimes.iter().map(|&l| (p + 4) * l - 2).sum::<usize>()
}

/// Free parameters of a `k`-component regression mixture on a basis of
/// dimension `dim`: `(K - 1) + K (dim + 1)`.
pub fn count_regression_mixture_parameters(k: usize, dim: usize) -> usize {
    k - 1 + k * (dim + 1)
}

/// `loglik - nu/2 ln(n)`, larger is better.
pub fn bic(loglik: f64, nu: usize, n: usize) -> f64 {
    loglik - nu as f64 / 2.0 * (n as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub k_max: usize,
    pub l_max: usize,
    pub p_max: usize,
}

impl SelectionGrid {
    pub fn new(k_max: usize, l_max: usize, p_max: usize) -> Result<Self> {
        if k_max == 0 || l_max == 0 {
            return Err(Error::InvalidConfig(
                "K and L ranges must start at 1 and be non-empty".into(),
            ));
        }
        Ok(Self { k_max, l_max, p_max })
    }

    /// Every `(K, L, p)` in lexicographic order.
    pub fn candidates(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.k_max * self.l_max * (self.p_max + 1));
        for k in 1..=self.k_max {
            for l in 1..=self.l_max {
                for p in 0..=self.p_max {
                    out.push((k, l, p));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub k: usize,
    pub l: usize,
    pub p: usize,
    /// NaN when the fit failed.
    pub loglik: f64,
    pub nu: usize,
    pub bic: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub table: Vec<SelectionRow>,
    pub best: (usize, usize, usize),
}

/// Index of the best row: highest BIC, then fewer parameters, then smaller
/// `(K, L, p)`. Failed rows never win.
pub fn best_row(table: &[SelectionRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, row) in table.iter().enumerate() {
        if !row.bic.is_finite() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &table[b];
                row.bic > cur.bic
                    || (row.bic == cur.bic && (row.nu, row.k, row.l, row.p) < (cur.nu, cur.k, cur.l, cur.p))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Fits every candidate of `grid` on `curves` and scores it by BIC. Each
/// candidate's seed is derived from the base seed and its `(K, L, p)`.
pub fn select(curves: &CurveSet, grid: &SelectionGrid, config: &FitConfig) -> Result<SelectionResult> {
    config.validate()?;
    let n = curves.len();
    let table: Vec<SelectionRow> = grid
        .candidates()
        .into_par_iter()
        .map(|(k, l, p)| {
            let nu = count_free_parameters(k, l, p);
            let candidate = config.with_seed(derive_seed(config.seed, &[k as u64, l as u64, p as u64]));
            match fit(curves, &MixRhlpSpec::uniform(k, l, p), &candidate) {
                Ok(f) => {
                    let loglik = f.report.final_loglik();
                    SelectionRow {
                        k,
                        l,
                        p,
                        loglik,
                        nu,
                        bic: bic(loglik, nu, n),
                        converged: f.report.converged,
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("candidate (K={k}, L={l}, p={p}) failed: {e}");
                    SelectionRow {
                        k,
                        l,
                        p,
                        loglik: f64::NAN,
                        nu,
                        bic: f64::NAN,
                        converged: false,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let best = best_row(&table).ok_or_else(|| Error::Numerical("every selection candidate failed".into()))?;
    let row = &table[best];
    Ok(SelectionResult {
        best: (row.k, row.l, row.p),
        table,
    })
}

/// Columns `K,L,p,loglik,nu,bic,converged`.
pub fn render_selection_csv<W: Write>(result: &SelectionResult, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "K,L,p,loglik,nu,bic,converged")?;
    for r in &result.table {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.k,
            r.l,
            r.p,
            fmt_f64(r.loglik),
            r.nu,
            fmt_f64(r.bic),
            r.converged
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(count_free_parameters(2, 5, 3), 67);
        assert_eq!(count_free_parameters(1, 5, 3), 33);
        assert_eq!(count_free_parameters(1, 1, 3), 5);
        assert_eq!(count_regression_mixture_parameters(2, 4), 11);
        assert_eq!(count_regression_mixture_parameters(1, 4), 5);
        assert_eq!(count_regression_mixture_parameters(2, 14), 31);
        assert_eq!(count_regression_mixture_parameters(1, 14), 15);
        assert_eq!(count_free_parameters_per_cluster(&[2, 3], 0), 1 + 6 + 10);
    }

    #[test]
    fn bic_values() {
        assert_eq!(bic(0.0, 0, 10), 0.0);
        assert!((bic(-100.0, 10, 100) - (-123.025_850_929_940_45)).abs() < 1e-10);
        assert!(bic(-5.0, 3, 2) > bic(-5.0, 4, 2));
    }

    fn row(k: usize, l: usize, p: usize, nu: usize, bic: f64) -> SelectionRow {
        SelectionRow {
            k,
            l,
            p,
            loglik: bic,
            nu,
            bic,
            converged: true,
            error: None,
        }
    }

    #[test]
    fn tie_breaks() {
        let table = vec![
            row(1, 2, 0, 6, -10.0),
            row(2, 1, 0, 5, -10.0),
            row(1, 1, 1, 5, -10.0),
            row(3, 3, 3, 1, f64::NAN),
        ];
        assert_eq!(best_row(&table), Some(2));
        assert_eq!(best_row(&table[3..]), None);
    }

    #[test]
    fn grid_order_is_lexicographic() {
        let c = SelectionGrid::new(2, 1, 1).unwrap().candidates();
        assert_eq!(c, vec![(1, 1, 0), (1, 1, 1), (2, 1, 0), (2, 1, 1)]);
        assert!(SelectionGrid::new(0, 1, 0).is_err());
    }
}
