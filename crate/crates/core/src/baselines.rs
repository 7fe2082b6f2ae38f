//! Comparison class densities: a single polynomial or spline regression per
//! class, and mixtures of such regressions.

use serde::{Deserialize, Serialize};

use crate::basis::{design_rows, Basis};
use crate::curves::{Curve, CurveSet, TimeGrid};
use crate::error::{Error, Result};
use crate::mixrhlp::{
    balanced_random_partition, best_of_restarts, em_loop, segment_fit, FitConfig, FitReport, RestartSummary,
};
use crate::numeric::{dot, log_sum_exp, softmax_in_place, weighted_least_squares, LN_2PI};

/// One regression curve `T beta` with isotropic noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionComponent {
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleRegressionClassModel {
    pub basis: Basis,
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

impl SingleRegressionClassModel {
    pub fn mean_curve(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        Ok(design_rows(&self.basis, grid)?
            .iter()
            .map(|row| dot(&self.beta, row))
            .collect())
    }

    pub fn log_density(&self, curve: &Curve, grid: &TimeGrid) -> Result<f64> {
        check_curve(curve, grid)?;
        let tables = RegressionTables::single(self, grid)?;
        Ok(tables.cluster_log_joint(curve.values())[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMixtureClassModel {
    pub basis: Basis,
    pub alphas: Vec<f64>,
    pub components: Vec<RegressionComponent>,
}

impl RegressionMixtureClassModel {
    pub fn new(basis: Basis, alphas: Vec<f64>, components: Vec<RegressionComponent>) -> Result<Self> {
        if components.is_empty() || alphas.len() != components.len() {
            return Err(Error::Validation(format!(
                "{} mixing weights for {} components",
                alphas.len(),
                components.len()
            )));
        }
        let sum: f64 = alphas.iter().sum();
        if alphas.iter().any(|a| !(*a >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(
                "mixing weights must be non-negative and sum to 1".into(),
            ));
        }
        if components
            .iter()
            .any(|c| c.beta.len() != basis.dim() || !(c.sigma2 > 0.0) || !c.sigma2.is_finite())
        {
            return Err(Error::Validation(format!(
                "components need {} coefficients and a positive variance",
                basis.dim()
            )));
        }
        Ok(Self {
            basis,
            alphas,
            components,
        })
    }

    pub fn mean_curves(&self, grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
        let rows = design_rows(&self.basis, grid)?;
        Ok(self
            .components
            .iter()
            .map(|c| rows.iter().map(|row| dot(&c.beta, row)).collect())
            .collect())
    }

    /// `log alpha_k + log N(x; T beta_k, sigma2_k I)` for every component.
    pub fn cluster_log_joint(&self, curve: &Curve, grid: &TimeGrid) -> Result<Vec<f64>> {
        check_curve(curve, grid)?;
        Ok(RegressionTables::mixture(self, grid)?.cluster_log_joint(curve.values()))
    }

    pub fn log_density(&self, curve: &Curve, grid: &TimeGrid) -> Result<f64> {
        Ok(log_sum_exp(&self.cluster_log_joint(curve, grid)?))
    }
}

fn check_curve(curve: &Curve, grid: &TimeGrid) -> Result<()> {
    if curve.len() != grid.len() {
        return Err(Error::Validation(format!(
            "curve has {} samples but the grid has {} points",
            curve.len(),
            grid.len()
        )));
    }
    Ok(())
}

/// Regression components tabulated on one grid.
pub(crate) struct RegressionTables {
    log_alpha: Vec<f64>,
    means: Vec<Vec<f64>>,
    log_norm: Vec<f64>,
    inv_two_var: Vec<f64>,
}

impl RegressionTables {
    fn from_parts(rows: &[Vec<f64>], alphas: &[f64], components: &[RegressionComponent]) -> Self {
        Self {
            log_alpha: alphas.iter().map(|a| a.ln()).collect(),
            means: components
                .iter()
                .map(|c| rows.iter().map(|row| dot(&c.beta, row)).collect())
                .collect(),
            log_norm: components.iter().map(|c| -0.5 * (LN_2PI + c.sigma2.ln())).collect(),
            inv_two_var: components.iter().map(|c| 0.5 / c.sigma2).collect(),
        }
    }

    pub(crate) fn single(model: &SingleRegressionClassModel, grid: &TimeGrid) -> Result<Self> {
        let rows = design_rows(&model.basis, grid)?;
        let component = RegressionComponent {
            beta: model.beta.clone(),
            sigma2: model.sigma2,
        };
        Ok(Self::from_parts(&rows, &[1.0], &[component]))
    }

    pub(crate) fn mixture(model: &RegressionMixtureClassModel, grid: &TimeGrid) -> Result<Self> {
        let rows = design_rows(&model.basis, grid)?;
        Ok(Self::from_parts(&rows, &model.alphas, &model.components))
    }

    pub(crate) fn cluster_log_joint(&self, values: &[f64]) -> Vec<f64> {
        (0..self.means.len())
            .map(|k| {
                let mean = &self.means[k];
                let sq: f64 = values.iter().zip(mean).map(|(x, mu)| (x - mu) * (x - mu)).sum();
                self.log_alpha[k] + values.len() as f64 * self.log_norm[k] - sq * self.inv_two_var[k]
            })
            .collect()
    }
}

/// Least squares over every sample of every curve; variance is the mean
/// squared residual, floored.
pub fn fit_flda_single(
    curves: &CurveSet,
    basis: Basis,
    config: &FitConfig,
) -> Result<(SingleRegressionClassModel, FitReport)> {
    if curves.is_empty() {
        return Err(Error::InvalidConfig("cannot fit a regression to zero curves".into()));
    }
    let rows = design_rows(&basis, curves.grid())?;
    let all: Vec<usize> = (0..curves.len()).collect();
    let floor = config.variance_floor(curves);
    let fit = segment_fit(curves, &all, 0..curves.m(), &rows, floor);
    let model = SingleRegressionClassModel {
        basis,
        beta: fit.beta,
        sigma2: fit.sigma2,
    };
    let tables = RegressionTables::single(&model, curves.grid())?;
    let loglik: f64 = curves
        .curves()
        .iter()
        .map(|c| tables.cluster_log_joint(c.values())[0])
        .sum();
    let report = FitReport {
        loglik_trace: vec![loglik],
        iterations: 0,
        converged: true,
        restarts_run: 1,
        best_restart: 0,
        seed: config.seed,
        variance_floor: floor,
        singular_solves: 0,
        irls_gradient_fallbacks: 0,
        restarts: vec![RestartSummary {
            seed: config.seed,
            loglik_trace: vec![loglik],
            iterations: 0,
            converged: true,
            diverged: !loglik.is_finite(),
        }],
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionMixtureFit {
    pub model: RegressionMixtureClassModel,
    clusters: usize,
    /// `n x K` responsibilities, row-major.
    gamma: Vec<f64>,
    pub report: FitReport,
}

impl RegressionMixtureFit {
    pub fn gamma(&self, i: usize, k: usize) -> f64 {
        self.gamma[i * self.clusters + k]
    }

    pub fn gamma_row(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.clusters..(i + 1) * self.clusters]
    }
}

/// EM for a `clusters`-component regression mixture with the same
/// initialization, restart and variance floor policy as the MixRHLP fit.
pub fn fit_fmda_regression_mixture(
    curves: &CurveSet,
    basis: Basis,
    clusters: usize,
    config: &FitConfig,
) -> Result<RegressionMixtureFit> {
    config.validate()?;
    if clusters == 0 {
        return Err(Error::InvalidConfig("number of clusters must be at least 1".into()));
    }
    if curves.len() < clusters {
        return Err(Error::InvalidConfig(format!(
            "{} curves cannot populate {clusters} clusters",
            curves.len()
        )));
    }
    let rows = design_rows(&basis, curves.grid())?;
    let floor = config.variance_floor(curves);
    let n = curves.len();
    let m = curves.m();

    let e_step = |model: &RegressionMixtureClassModel| {
        let tables = RegressionTables::from_parts(&rows, &model.alphas, &model.components);
        let mut gamma = Vec::with_capacity(n * clusters);
        let mut loglik = 0.0;
        for c in curves.curves() {
            let mut row = tables.cluster_log_joint(c.values());
            loglik += softmax_in_place(&mut row);
            gamma.extend(row);
        }
        (gamma, loglik)
    };

    let m_step = |gamma: &Vec<f64>, prev: &RegressionMixtureClassModel| {
        let mut singular = 0;
        let mut mass: Vec<f64> = (0..clusters)
            .map(|k| (0..n).map(|i| gamma[i * clusters + k]).sum())
            .collect();
        let total: f64 = mass.iter().sum();
        let alphas: Vec<f64> = mass.iter().map(|w| w / total).collect();
        let mut components = Vec::with_capacity(clusters);
        for k in 0..clusters {
            if mass[k] <= 0.0 {
                components.push(prev.components[k].clone());
                continue;
            }
            let mut targets = vec![0.0; m];
            for (i, c) in curves.curves().iter().enumerate() {
                let g = gamma[i * clusters + k];
                for (t, x) in targets.iter_mut().zip(c.values()) {
                    *t += g * x;
                }
            }
            let (beta, truncated) = weighted_least_squares(&rows, &vec![mass[k]; m], &targets);
            singular += usize::from(truncated);
            let mean: Vec<f64> = rows.iter().map(|row| dot(&beta, row)).collect();
            let sq: f64 = curves
                .curves()
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let g = gamma[i * clusters + k];
                    g * c
                        .values()
                        .iter()
                        .zip(&mean)
                        .map(|(x, mu)| (x - mu) * (x - mu))
                        .sum::<f64>()
                })
                .sum();
            mass[k] *= m as f64;
            components.push(RegressionComponent {
                beta,
                sigma2: (sq / mass[k]).max(floor),
            });
        }
        let model = RegressionMixtureClassModel {
            basis,
            alphas,
            components,
        };
        Ok((model, singular, 0))
    };

    let ((model, gamma), report) = best_of_restarts(config, floor, |seed| {
        let groups = balanced_random_partition(n, clusters, seed);
        let init = RegressionMixtureClassModel {
            basis,
            alphas: groups.iter().map(|g| g.len() as f64 / n as f64).collect(),
            components: groups
                .iter()
                .map(|g| {
                    let r = segment_fit(curves, g, 0..m, &rows, floor);
                    RegressionComponent {
                        beta: r.beta,
                        sigma2: r.sigma2,
                    }
                })
                .collect(),
        };
        em_loop(config, seed, init, e_step, m_step)
    })?;
    Ok(RegressionMixtureFit {
        model,
        clusters,
        gamma,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{PolynomialBasis, SplineBasis};

    fn set(values: Vec<Vec<f64>>) -> CurveSet {
        let m = values[0].len();
        CurveSet::new(
            TimeGrid::regular(0.0, 1.0, m).unwrap(),
            values.into_iter().map(|v| Curve::new(v).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_curves_hit_the_floor() {
        let curves = set(vec![vec![5.0; 6]; 3]);
        let (model, _) = fit_flda_single(&curves, PolynomialBasis::new(0).into(), &FitConfig::default()).unwrap();
        assert!((model.beta[0] - 5.0).abs() < 1e-12);
        assert_eq!(model.sigma2, crate::mixrhlp::MIN_VARIANCE);
    }

    #[test]
    fn noiseless_line_in_normalized_time() {
        // x = 2t on t = 0..10 is 20 t' in normalized time.
        let curves = set(vec![(0..11).map(|t| 2.0 * t as f64).collect(); 2]);
        let (model, _) = fit_flda_single(&curves, PolynomialBasis::new(1).into(), &FitConfig::default()).unwrap();
        assert!(model.beta[0].abs() < 1e-10);
        assert!((model.beta[1] - 20.0).abs() < 1e-10);
    }

    #[test]
    fn variance_is_population_residual_variance() {
        let curves = set(vec![vec![0.0, 1.0, 3.0, 2.0], vec![1.0, -1.0, 0.5, 0.0]]);
        let (model, _) = fit_flda_single(&curves, PolynomialBasis::new(0).into(), &FitConfig::default()).unwrap();
        let all: Vec<f64> = curves.curves().iter().flat_map(|c| c.values().to_vec()).collect();
        let mean = all.iter().sum::<f64>() / 8.0;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        assert!((model.sigma2 - var).abs() < 1e-10);
    }

    #[test]
    fn single_component_mixture_matches_single_fit() {
        let curves = set(vec![
            vec![0.1, 0.5, 0.9, 1.6, 2.0, 2.4],
            vec![0.0, 0.4, 1.1, 1.4, 2.1, 2.6],
            vec![0.3, 0.6, 0.8, 1.5, 1.9, 2.5],
        ]);
        for basis in [
            Basis::from(PolynomialBasis::new(2)),
            SplineBasis::new(1, 1).unwrap().into(),
        ] {
            let (single, report) = fit_flda_single(&curves, basis, &FitConfig::default()).unwrap();
            let mix = fit_fmda_regression_mixture(&curves, basis, 1, &FitConfig::default()).unwrap();
            for (a, b) in single.beta.iter().zip(&mix.model.components[0].beta) {
                assert!((a - b).abs() < 1e-8);
            }
            assert!((single.sigma2 - mix.model.components[0].sigma2).abs() < 1e-10);
            assert!((report.final_loglik() - mix.report.final_loglik()).abs() < 1e-8);
        }
    }

    #[test]
    fn log_density_matches_naive_product() {
        let grid = TimeGrid::regular(0.0, 1.0, 5).unwrap();
        let model = RegressionMixtureClassModel::new(
            PolynomialBasis::new(1).into(),
            vec![0.3, 0.7],
            vec![
                RegressionComponent {
                    beta: vec![0.0, 1.0],
                    sigma2: 0.5,
                },
                RegressionComponent {
                    beta: vec![1.0, -1.0],
                    sigma2: 2.0,
                },
            ],
        )
        .unwrap();
        let curve = Curve::new(vec![0.2, 0.1, 0.7, 0.4, 1.1]).unwrap();
        let mut naive = 0.0;
        for (alpha, c) in model.alphas.iter().zip(&model.components) {
            let mut p = *alpha;
            for (j, x) in curve.values().iter().enumerate() {
                let t = j as f64 / 4.0;
                let mu = c.beta[0] + c.beta[1] * t;
                p *= (-(x - mu) * (x - mu) / (2.0 * c.sigma2)).exp() / (2.0 * std::f64::consts::PI * c.sigma2).sqrt();
            }
            naive += p;
        }
        assert!((model.log_density(&curve, &grid).unwrap() - naive.ln()).abs() < 1e-9);
    }
}
