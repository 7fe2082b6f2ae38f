//! Hidden logistic process: time-varying softmax regime probabilities and the
//! weighted multinomial-logistic Newton (IRLS) solver used in the M-step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curves::TimeGrid;
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, NEGLIGIBLE_LOG_RATIO};

/// Softmax weights, one `(intercept, slope)` row per regime. The last row is the
/// reference component and stays at zero, leaving `2 (L - 1)` free parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct LogisticWeights {
    rows: Vec<[f64; 2]>,
}

impl LogisticWeights {
    /// All-zero weights: uniform regime probabilities.
    pub fn zeros(regimes: usize) -> Self {
        assert!(regimes >= 1, "at least one regime");
        Self {
            rows: vec![[0.0; 2]; regimes],
        }
    }

    /// Weights whose last row is already zero.
    pub fn from_rows(rows: Vec<[f64; 2]>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Validation("logistic weights need at least one row".into()));
        }
        if rows.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::Validation("logistic weights must be finite".into()));
        }
        if rows[rows.len() - 1] != [0.0, 0.0] {
            return Err(Error::Validation(
                "last logistic row is the reference component and must be zero".into(),
            ));
        }
        Ok(Self { rows })
    }

    /// Any weight matrix, shifted so that the last row becomes zero. The
    /// probability field is unchanged.
    pub fn canonical(rows: Vec<[f64; 2]>) -> Result<Self> {
        let last = *rows
            .last()
            .ok_or_else(|| Error::Validation("logistic weights need at least one row".into()))?;
        Self::from_rows(rows.into_iter().map(|[a, b]| [a - last[0], b - last[1]]).collect())
    }

    pub fn regimes(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[[f64; 2]] {
        &self.rows
    }

    fn free_params(&self) -> Vec<f64> {
        self.rows[..self.rows.len() - 1]
            .iter()
            .flat_map(|r| r.iter().copied())
            .collect()
    }

    fn from_free_params(theta: &[f64], regimes: usize) -> Self {
        let mut rows: Vec<[f64; 2]> = theta.chunks(2).map(|c| [c[0], c[1]]).collect();
        rows.push([0.0, 0.0]);
        debug_assert_eq!(rows.len(), regimes);
        Self { rows }
    }

    /// `log pi_l(t)` for every regime.
    pub fn log_probabilities(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len()];
        self.log_probabilities_into(t, &mut out);
        out
    }

    /// Same as `log_probabilities`, written into `out` (one slot per regime).
    pub(crate) fn log_probabilities_into(&self, t: f64, out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.rows) {
            *o = w[0] + w[1] * t;
        }
        let lse = log_sum_exp(out);
        for o in out.iter_mut() {
            *o -= lse;
        }
    }
}

impl TryFrom<Vec<[f64; 2]>> for LogisticWeights {
    type Error = Error;

    fn try_from(rows: Vec<[f64; 2]>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<LogisticWeights> for Vec<[f64; 2]> {
    fn from(w: LogisticWeights) -> Self {
        w.rows
    }
}

/// Regime probabilities at normalized time `t`.
pub fn regime_probabilities(w: &LogisticWeights, t: f64) -> Vec<f64> {
    w.log_probabilities(t).into_iter().map(f64::exp).collect()
}

/// Non-negative weights `n x m x L` driving the logistic sub-problem, indexed
/// `(curve, point, regime)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeWeightTable {
    n: usize,
    m: usize,
    regimes: usize,
    data: Vec<f64>,
}

impl RegimeWeightTable {
    pub fn new(n: usize, m: usize, regimes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * m * regimes {
            return Err(Error::Validation(format!(
                "weight table has {} entries, expected {n} x {m} x {regimes}",
                data.len()
            )));
        }
        if data.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Validation("regime weights must lie in [0, 1]".into()));
        }
        Ok(Self { n, m, regimes, data })
    }

    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[(i * self.m + j) * self.regimes + l]
    }

    pub fn regimes(&self) -> usize {
        self.regimes
    }

    /// Sum over curves, laid out `m x L`.
    pub fn point_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.m * self.regimes];
        for i in 0..self.n {
            let block = &self.data[i * self.m * self.regimes..(i + 1) * self.m * self.regimes];
            for (t, w) in totals.iter_mut().zip(block) {
                *t += w;
            }
        }
        totals
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrlsConfig {
    /// Relative objective increment below which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrlsFit {
    pub weights: LogisticWeights,
    pub converged: bool,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    /// Steps taken with a singular Hessian: ridge-damped Newton, or
    /// fixed-size gradient ascent when that also fails.
    pub gradient_fallbacks: usize,
}

const MAX_HALVINGS: usize = 30;

/// Maximizes `sum_ijl weight_ijl * log pi_l(t_j; w)` by Newton-Raphson with
/// step halving, starting from `init`.
pub fn irls_fit(
    table: &RegimeWeightTable,
    grid: &TimeGrid,
    init: &LogisticWeights,
    config: IrlsConfig,
) -> Result<IrlsFit> {
    if table.m != grid.len() {
        return Err(Error::Validation(format!(
            "weight table covers {} points, grid has {}",
            table.m,
            grid.len()
        )));
    }
    if table.regimes != init.regimes() {
        return Err(Error::Validation(format!(
            "weight table has {} regimes, initial weights {}",
            table.regimes,
            init.regimes()
        )));
    }
    if !(config.tol > 0.0) {
        return Err(Error::InvalidConfig("IRLS tolerance must be positive".into()));
    }
    irls_on_totals(&table.point_totals(), &grid.normalized(), init, config)
}

fn check_table(table: &RegimeWeightTable, grid: &TimeGrid, w: &LogisticWeights) -> Result<()> {
    if table.m != grid.len() || table.regimes != w.regimes() {
        return Err(Error::Validation(format!(
            "weight table is {} points x {} regimes; grid has {} points, weights {} regimes",
            table.m,
            table.regimes,
            grid.len(),
            w.regimes()
        )));
    }
    Ok(())
}

/// `sum_ijl weight_ijl * log pi_l(t_j; w)`, the quantity IRLS maximizes.
pub fn irls_objective(table: &RegimeWeightTable, grid: &TimeGrid, w: &LogisticWeights) -> Result<f64> {
    check_table(table, grid, w)?;
    let totals = table.point_totals();
    let times = grid.normalized();
    Ok(LogisticObjective::new(&totals, &times, w.regimes()).value(w))
}

/// Analytic gradient of `irls_objective` over the free parameters, ordered
/// `(intercept, slope)` per regime, last regime excluded.
pub fn irls_gradient(table: &RegimeWeightTable, grid: &TimeGrid, w: &LogisticWeights) -> Result<Vec<f64>> {
    check_table(table, grid, w)?;
    let totals = table.point_totals();
    let times = grid.normalized();
    let (grad, _) = LogisticObjective::new(&totals, &times, w.regimes()).derivatives(w);
    Ok(grad.iter().copied().collect())
}

/// Objective, gradient and negated Hessian of the weighted log-softmax
/// likelihood over the free parameters.
pub(crate) struct LogisticObjective<'a> {
    totals: &'a [f64],
    times: &'a [f64],
    regimes: usize,
}

impl<'a> LogisticObjective<'a> {
    pub(crate) fn new(totals: &'a [f64], times: &'a [f64], regimes: usize) -> Self {
        Self { totals, times, regimes }
    }

    pub(crate) fn value(&self, w: &LogisticWeights) -> f64 {
        let l = self.regimes;
        let mut q = 0.0;
        let mut logp = vec![0.0; l];
        for (j, &t) in self.times.iter().enumerate() {
            w.log_probabilities_into(t, &mut logp);
            for (r, lp) in logp.iter().enumerate() {
                let weight = self.totals[j * l + r];
                if weight != 0.0 {
                    q += weight * lp;
                }
            }
        }
        q
    }

    /// Gradient and `-Hessian` with respect to the free parameters.
    pub(crate) fn derivatives(&self, w: &LogisticWeights) -> (DVector<f64>, DMatrix<f64>) {
        let l = self.regimes;
        let dim = 2 * (l - 1);
        let mut grad = DVector::zeros(dim);
        let mut neg_hess = DMatrix::zeros(dim, dim);
        let mut probs = vec![0.0; l];
        for (j, &t) in self.times.iter().enumerate() {
            let row = &self.totals[j * l..(j + 1) * l];
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                continue;
            }
            w.log_probabilities_into(t, &mut probs);
            for p in probs.iter_mut() {
                *p = if *p > NEGLIGIBLE_LOG_RATIO { p.exp() } else { 0.0 };
            }
            let x = [1.0, t];
            for a in 0..l - 1 {
                let resid = row[a] - total * probs[a];
                grad[2 * a] += resid;
                grad[2 * a + 1] += resid * t;
                for b in 0..l - 1 {
                    let coupling = if a == b {
                        probs[a] * (1.0 - probs[a])
                    } else {
                        -probs[a] * probs[b]
                    };
                    let s = total * coupling;
                    for c in 0..2 {
                        for e in 0..2 {
                            neg_hess[(2 * a + c, 2 * b + e)] += s * x[c] * x[e];
                        }
                    }
                }
            }
        }
        (grad, neg_hess)
    }
}

/// Newton direction, or `None` when `-H` is not numerically positive definite
/// (Cholesky fails or the solve does not give a finite ascent direction).
fn newton_direction(grad: &DVector<f64>, neg_hess: DMatrix<f64>) -> Option<DVector<f64>> {
    let step = neg_hess.cholesky()?.solve(grad);
    (step.iter().all(|v| v.is_finite()) && step.dot(grad) > 0.0).then_some(step)
}

/// Relative ridge added to a singular `-H` before the fallback solve.
const FALLBACK_RIDGE: f64 = 1e-8;

/// Ascent direction when `-H` is singular, typically because a regime has
/// negligible probability everywhere. A ridge keeps the Newton step on the
/// identified directions and reduces to a long gradient step on the null
/// ones; the fixed-size gradient step is the last resort.
fn fallback_direction(grad: &DVector<f64>, mut neg_hess: DMatrix<f64>, gradient_step: f64) -> DVector<f64> {
    let scale = neg_hess.diagonal().amax();
    if scale > 0.0 && scale.is_finite() {
        let ridge = FALLBACK_RIDGE * scale;
        for i in 0..neg_hess.nrows() {
            neg_hess[(i, i)] += ridge;
        }
        if let Some(step) = newton_direction(grad, neg_hess) {
            return step;
        }
    }
    grad * gradient_step
}

/// IRLS on weights already summed over curves (`m x L`, row-major).
pub(crate) fn irls_on_totals(
    totals: &[f64],
    times: &[f64],
    init: &LogisticWeights,
    config: IrlsConfig,
) -> Result<IrlsFit> {
    let regimes = init.regimes();
    let objective = LogisticObjective::new(totals, times, regimes);
    let mut current = init.clone();
    let mut q = objective.value(&current);
    if !q.is_finite() {
        return Err(Error::Numerical(format!("IRLS objective is {q} at the start")));
    }
    let mut trace = vec![q];
    if regimes == 1 {
        return Ok(IrlsFit {
            weights: current,
            converged: true,
            trace,
            gradient_fallbacks: 0,
        });
    }

    // Fixed gradient step bounded by the curvature of the log-softmax.
    let curvature: f64 = times
        .iter()
        .enumerate()
        .map(|(j, &t)| totals[j * regimes..(j + 1) * regimes].iter().sum::<f64>() * (1.0 + t * t))
        .sum();
    let gradient_step = 1.0 / curvature.max(1e-12);

    let mut converged = false;
    let mut gradient_fallbacks = 0;
    let mut theta = current.free_params();
    for _ in 0..config.max_iter {
        let (grad, neg_hess) = objective.derivatives(&current);
        let direction = match newton_direction(&grad, neg_hess.clone()) {
            Some(d) => d,
            None => {
                gradient_fallbacks += 1;
                fallback_direction(&grad, neg_hess, gradient_step)
            }
        };

        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = theta.iter().zip(direction.iter()).map(|(a, d)| a + scale * d).collect();
            let weights = LogisticWeights::from_free_params(&candidate, regimes);
            let q_new = objective.value(&weights);
            if q_new.is_nan() {
                return Err(Error::Numerical("IRLS objective became NaN".into()));
            }
            if q_new >= q {
                accepted = Some((candidate, weights, q_new));
                break;
            }
            scale *= 0.5;
        }

        let Some((candidate, weights, q_new)) = accepted else {
            // No ascent step exists at this precision.
            converged = true;
            break;
        };
        let increment = q_new - q;
        theta = candidate;
        current = weights;
        q = q_new;
        trace.push(q);
        if increment <= config.tol * q.abs() {
            converged = true;
            break;
        }
    }

    Ok(IrlsFit {
        weights: current,
        converged,
        trace,
        gradient_fallbacks,
    })
}
