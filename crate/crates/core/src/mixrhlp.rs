//! Mixture of regressions with hidden logistic processes (MixRHLP) and its EM
//! algorithm.
//!
//! A class of curves is modeled as `K` clusters. Within cluster `k` every
//! sample `x_ij` is drawn from one of `L_k` polynomial regimes, chosen with the
//! time-varying probabilities `pi_kl(t_j)` of a logistic process:
//!
//! ```text
//! p(x_i) = sum_k alpha_k prod_j sum_l pi_kl(t_j) N(x_ij; beta_kl' t_j, sigma2_kl)
//! ```
//!
//! All densities are evaluated in the log domain.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::PolynomialBasis;
use crate::curves::{Curve, CurveSet, TimeGrid};
use crate::error::{Error, Result};
use crate::logistic::{irls_on_totals, IrlsConfig, LogisticWeights};
use crate::numeric::{
    argmax, dot, log_sum_exp, softmax_in_place, weighted_least_squares, LN_2PI, NEGLIGIBLE_LOG_RATIO,
};
use crate::seed::{derive_seed, rng_from_seed};

/// Absolute lower bound on any fitted variance, on top of the relative floor.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

/// One RHLP component: logistic process plus one polynomial regime per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhlpParams {
    pub logistic: LogisticWeights,
    pub regimes: Vec<RegimeParams>,
}

impl RhlpParams {
    pub fn new(logistic: LogisticWeights, regimes: Vec<RegimeParams>) -> Result<Self> {
        if regimes.len() != logistic.regimes() {
            return Err(Error::Validation(format!(
                "{} regimes but {} logistic rows",
                regimes.len(),
                logistic.regimes()
            )));
        }
        let dim = regimes[0].beta.len();
        if dim == 0 || regimes.iter().any(|r| r.beta.len() != dim) {
            return Err(Error::Validation(
                "regime coefficient vectors must share a non-zero length".into(),
            ));
        }
        if regimes.iter().any(|r| !(r.sigma2 > 0.0) || !r.sigma2.is_finite()) {
            return Err(Error::Validation("regime variances must be positive and finite".into()));
        }
        Ok(Self { logistic, regimes })
    }

    pub fn num_regimes(&self) -> usize {
        self.regimes.len()
    }

    pub fn basis(&self) -> PolynomialBasis {
        PolynomialBasis::new(self.regimes[0].beta.len() - 1)
    }
}

/// Parameters of one class: mixing weights and `K` RHLP components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRhlpParams {
    pub alphas: Vec<f64>,
    pub components: Vec<RhlpParams>,
    pub basis: PolynomialBasis,
}

impl MixRhlpParams {
    pub fn new(alphas: Vec<f64>, components: Vec<RhlpParams>, basis: PolynomialBasis) -> Result<Self> {
        if components.is_empty() || alphas.len() != components.len() {
            return Err(Error::Validation(format!(
                "{} mixing weights for {} components",
                alphas.len(),
                components.len()
            )));
        }
        if alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Validation("mixing weights must be non-negative".into()));
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("mixing weights sum to {sum}, not 1")));
        }
        if components.iter().any(|c| c.basis() != basis) {
            return Err(Error::Validation(format!(
                "every regime needs {} coefficients",
                basis.dim()
            )));
        }
        Ok(Self {
            alphas,
            components,
            basis,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.components.len()
    }

    pub fn regime_counts(&self) -> Vec<usize> {
        self.components.iter().map(RhlpParams::num_regimes).collect()
    }
}

/// Shape of a MixRHLP model: clusters, regimes per cluster, polynomial degree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixRhlpSpec {
    pub regimes: Vec<usize>,
    pub degree: usize,
}

impl MixRhlpSpec {
    /// `clusters` components sharing the same number of regimes.
    pub fn uniform(clusters: usize, regimes: usize, degree: usize) -> Self {
        Self {
            regimes: vec![regimes; clusters],
            degree,
        }
    }

    pub fn clusters(&self) -> usize {
        self.regimes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() {
            return Err(Error::InvalidConfig("number of clusters must be at least 1".into()));
        }
        if self.regimes.contains(&0) {
            return Err(Error::InvalidConfig("number of regimes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub seed: u64,
    pub restarts: usize,
    /// Relative log-likelihood increment that stops EM.
    pub epsilon: f64,
    pub max_iter: usize,
    pub irls: IrlsConfig,
    /// Variance floor as a fraction of the pooled variance of the training samples.
    pub variance_floor_factor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            restarts: 5,
            epsilon: 1e-6,
            max_iter: 200,
            irls: IrlsConfig::default(),
            variance_floor_factor: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("at least one restart is required".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if !(self.irls.tol > 0.0) {
            return Err(Error::InvalidConfig("IRLS tolerance must be positive".into()));
        }
        if !(self.variance_floor_factor >= 0.0) {
            return Err(Error::InvalidConfig(
                "variance floor factor must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn variance_floor(&self, curves: &CurveSet) -> f64 {
        (self.variance_floor_factor * curves.pooled_variance()).max(MIN_VARIANCE)
    }
}

/// Outcome of one EM run from one initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub seed: u64,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The run stopped because an update produced a non-finite log-likelihood.
    pub diverged: bool,
}

impl RestartSummary {
    pub fn final_loglik(&self) -> f64 {
        self.loglik_trace.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Observed-data log-likelihood after the initial E-step and after every EM iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub restarts_run: usize,
    pub best_restart: usize,
    pub seed: u64,
    pub variance_floor: f64,
    /// Weighted normal equations solved through the pseudo-inverse.
    pub singular_solves: usize,
    pub irls_gradient_fallbacks: usize,
    pub restarts: Vec<RestartSummary>,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        self.loglik_trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Largest drop between consecutive log-likelihoods over every restart (0 if none).
    pub fn max_loglik_decrease(&self) -> f64 {
        self.restarts
            .iter()
            .flat_map(|r| r.loglik_trace.windows(2).map(|w| w[0] - w[1]))
            .fold(0.0, f64::max)
    }
}

/// E-step responsibilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    n: usize,
    m: usize,
    regimes: Vec<usize>,
    /// `n x K`, row-major.
    gamma: Vec<f64>,
    /// Per cluster, `n x m x L_k`.
    tau: Vec<Vec<f64>>,
}

impl Posteriors {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn clusters(&self) -> usize {
        self.regimes.len()
    }

    pub fn regimes(&self, k: usize) -> usize {
        self.regimes[k]
    }

    /// Probability that curve `i` belongs to cluster `k`.
    pub fn gamma(&self, i: usize, k: usize) -> f64 {
        self.gamma[i * self.clusters() + k]
    }

    pub fn gamma_row(&self, i: usize) -> &[f64] {
        let k = self.clusters();
        &self.gamma[i * k..(i + 1) * k]
    }

    /// Probability that sample `j` of curve `i` comes from regime `l`, given cluster `k`.
    pub fn tau(&self, i: usize, k: usize, j: usize, l: usize) -> f64 {
        self.tau[k][(i * self.m + j) * self.regimes[k] + l]
    }

    pub fn tau_fiber(&self, i: usize, k: usize, j: usize) -> &[f64] {
        let l = self.regimes[k];
        let start = (i * self.m + j) * l;
        &self.tau[k][start..start + l]
    }

    /// Hard cluster assignment per curve (argmax of gamma, ties to the lower index).
    pub fn cluster_labels(&self) -> Vec<usize> {
        (0..self.n).map(|i| argmax(self.gamma_row(i))).collect()
    }
}

/// Per-component quantities tabulated on the grid.
struct ComponentTable {
    regimes: usize,
    /// `m x L` log regime probabilities.
    log_pi: Vec<f64>,
    /// `m x L` regime means.
    means: Vec<f64>,
    log_norm: Vec<f64>,
    inv_two_var: Vec<f64>,
}

impl ComponentTable {
    fn new(params: &RhlpParams, times: &[f64], rows: &[Vec<f64>]) -> Self {
        let l = params.num_regimes();
        let mut log_pi = Vec::with_capacity(times.len() * l);
        let mut means = Vec::with_capacity(times.len() * l);
        let mut buf = vec![0.0; l];
        for (&t, row) in times.iter().zip(rows) {
            params.logistic.log_probabilities_into(t, &mut buf);
            log_pi.extend_from_slice(&buf);
            means.extend(params.regimes.iter().map(|r| dot(&r.beta, row)));
        }
        Self {
            regimes: l,
            log_pi,
            means,
            log_norm: params.regimes.iter().map(|r| -0.5 * (LN_2PI + r.sigma2.ln())).collect(),
            inv_two_var: params.regimes.iter().map(|r| 0.5 / r.sigma2).collect(),
        }
    }

    /// Log density of `values`; when `tau` is given it receives the regime
    /// posteriors laid out `m x L`.
    fn log_density(&self, values: &[f64], mut tau: Option<&mut [f64]>) -> f64 {
        let l = self.regimes;
        let mut total = 0.0;
        if l == 1 {
            for (j, &x) in values.iter().enumerate() {
                let r = x - self.means[j];
                total += self.log_pi[j] + self.log_norm[0] - r * r * self.inv_two_var[0];
            }
            if let Some(tau) = tau {
                tau.fill(1.0);
            }
            return total;
        }
        let mut scores = [0.0f64; 16];
        let mut heap;
        let scores: &mut [f64] = if l <= 16 {
            &mut scores[..l]
        } else {
            heap = vec![0.0; l];
            &mut heap
        };
        for (j, &x) in values.iter().enumerate() {
            let base = j * l;
            let mut top = 0;
            for r in 0..l {
                let d = x - self.means[base + r];
                scores[r] = self.log_pi[base + r] + self.log_norm[r] - d * d * self.inv_two_var[r];
                if scores[r] > scores[top] {
                    top = r;
                }
            }
            let max = scores[top];
            if max == f64::NEG_INFINITY {
                total = f64::NEG_INFINITY;
                continue;
            }
            let mut sum = 1.0;
            for r in 0..l {
                if r != top {
                    let d = scores[r] - max;
                    scores[r] = if d > NEGLIGIBLE_LOG_RATIO { d.exp() } else { 0.0 };
                    sum += scores[r];
                }
            }
            scores[top] = 1.0;
            // ln(1) is exactly 0; skipping it is bitwise neutral.
            total += if sum > 1.0 { max + sum.ln() } else { max };
            if let Some(tau) = tau.as_deref_mut() {
                let inv = 1.0 / sum;
                for r in 0..l {
                    tau[base + r] = scores[r] * inv;
                }
            }
        }
        total
    }
}

/// Normalized times and polynomial design rows for one grid.
pub(crate) struct GridContext {
    pub(crate) times: Vec<f64>,
    pub(crate) rows: Vec<Vec<f64>>,
}

impl GridContext {
    pub(crate) fn new(grid: &TimeGrid, basis: PolynomialBasis) -> Self {
        let times = grid.normalized();
        let rows = times.iter().map(|&t| basis.row(t)).collect();
        Self { times, rows }
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

/// `log p(x | cluster)`: sum over samples of the log of the regime mixture.
pub fn curve_log_density(params: &RhlpParams, curve: &Curve, grid: &TimeGrid) -> Result<f64> {
    check_curve(curve, grid)?;
    let ctx = GridContext::new(grid, params.basis());
    Ok(ComponentTable::new(params, &ctx.times, &ctx.rows).log_density(curve.values(), None))
}

/// `log p(x | class)` for a MixRHLP class model.
pub fn mixture_log_density(params: &MixRhlpParams, curve: &Curve, grid: &TimeGrid) -> Result<f64> {
    Ok(log_sum_exp(&cluster_log_joint(params, curve, grid)?))
}

/// `log alpha_k + log p(x | cluster k)` for every cluster.
pub fn cluster_log_joint(params: &MixRhlpParams, curve: &Curve, grid: &TimeGrid) -> Result<Vec<f64>> {
    check_curve(curve, grid)?;
    Ok(MixtureTables::new(params, grid).cluster_log_joint(curve.values()))
}

/// A class model tabulated on one grid, for repeated density evaluation.
pub(crate) struct MixtureTables {
    log_alpha: Vec<f64>,
    tables: Vec<ComponentTable>,
}

impl MixtureTables {
    pub(crate) fn new(params: &MixRhlpParams, grid: &TimeGrid) -> Self {
        let ctx = GridContext::new(grid, params.basis);
        Self {
            log_alpha: params.alphas.iter().map(|a| a.ln()).collect(),
            tables: params
                .components
                .iter()
                .map(|c| ComponentTable::new(c, &ctx.times, &ctx.rows))
                .collect(),
        }
    }

    pub(crate) fn cluster_log_joint(&self, values: &[f64]) -> Vec<f64> {
        self.log_alpha
            .iter()
            .zip(&self.tables)
            .map(|(a, t)| a + t.log_density(values, None))
            .collect()
    }
}

/// Posterior responsibilities under `params` and the observed-data log-likelihood.
pub fn e_step(params: &MixRhlpParams, curves: &CurveSet) -> Result<(Posteriors, f64)> {
    let ctx = GridContext::new(curves.grid(), params.basis);
    for c in curves.curves() {
        check_curve(c, curves.grid())?;
    }
    Ok(e_step_with(params, curves, &ctx))
}

fn e_step_with(params: &MixRhlpParams, curves: &CurveSet, ctx: &GridContext) -> (Posteriors, f64) {
    let n = curves.len();
    let m = curves.m();
    let k_count = params.num_clusters();
    let regimes = params.regime_counts();
    let tables: Vec<ComponentTable> = params
        .components
        .iter()
        .map(|c| ComponentTable::new(c, &ctx.times, &ctx.rows))
        .collect();
    let log_alpha: Vec<f64> = params.alphas.iter().map(|a| a.ln()).collect();

    let mut tau: Vec<Vec<f64>> = regimes.iter().map(|&l| vec![0.0; n * m * l]).collect();
    let mut gamma = vec![0.0; n * k_count];
    let mut loglik = 0.0;
    for (i, curve) in curves.curves().iter().enumerate() {
        let row = &mut gamma[i * k_count..(i + 1) * k_count];
        for (k, table) in tables.iter().enumerate() {
            let l = regimes[k];
            let fiber = &mut tau[k][i * m * l..(i + 1) * m * l];
            row[k] = log_alpha[k] + table.log_density(curve.values(), Some(fiber));
        }
        loglik += softmax_in_place(row);
    }

    (
        Posteriors {
            n,
            m,
            regimes,
            gamma,
            tau,
        },
        loglik,
    )
}

/// Settings the M-step needs beyond the posteriors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepOptions {
    pub variance_floor: f64,
    pub irls: IrlsConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutcome {
    pub params: MixRhlpParams,
    pub singular_solves: usize,
    pub irls_gradient_fallbacks: usize,
}

/// Maximizes the expected complete-data log-likelihood given `post`.
pub fn m_step(
    post: &Posteriors,
    curves: &CurveSet,
    prev: &MixRhlpParams,
    options: &MStepOptions,
) -> Result<MStepOutcome> {
    if post.n != curves.len() || post.m != curves.m() || post.regimes != prev.regime_counts() {
        return Err(Error::Validation(
            "posteriors do not match the curves or parameters".into(),
        ));
    }
    let ctx = GridContext::new(curves.grid(), prev.basis);
    m_step_with(post, curves, prev, options, &ctx)
}

fn m_step_with(
    post: &Posteriors,
    curves: &CurveSet,
    prev: &MixRhlpParams,
    options: &MStepOptions,
    ctx: &GridContext,
) -> Result<MStepOutcome> {
    let n = post.n;
    let m = post.m;
    let k_count = post.clusters();
    let mut singular_solves = 0;
    let mut irls_gradient_fallbacks = 0;

    let mut alphas: Vec<f64> = (0..k_count)
        .map(|k| (0..n).map(|i| post.gamma(i, k)).sum::<f64>() / n as f64)
        .collect();
    let alpha_sum: f64 = alphas.iter().sum();
    for a in &mut alphas {
        *a /= alpha_sum;
    }

    let mut components = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let l = post.regimes[k];
        let tau = &post.tau[k];
        let prev_comp = &prev.components[k];

        // Weights gamma_ik * tau_ijl summed over curves, plus weighted targets.
        let mut totals = vec![0.0; m * l];
        let mut targets = vec![0.0; m * l];
        for (i, curve) in curves.curves().iter().enumerate() {
            let g = post.gamma(i, k);
            if g == 0.0 {
                continue;
            }
            let fiber = &tau[i * m * l..(i + 1) * m * l];
            for (j, &x) in curve.values().iter().enumerate() {
                for r in 0..l {
                    let w = g * fiber[j * l + r];
                    totals[j * l + r] += w;
                    targets[j * l + r] += w * x;
                }
            }
        }

        let mut regimes = Vec::with_capacity(l);
        let mut means = vec![0.0; m * l];
        let mut live = vec![true; l];
        for r in 0..l {
            let w: Vec<f64> = (0..m).map(|j| totals[j * l + r]).collect();
            let y: Vec<f64> = (0..m).map(|j| targets[j * l + r]).collect();
            let mass: f64 = w.iter().sum();
            if mass <= 0.0 {
                live[r] = false;
                regimes.push(prev_comp.regimes[r].clone());
                continue;
            }
            let (beta, truncated) = weighted_least_squares(&ctx.rows, &w, &y);
            if truncated {
                singular_solves += 1;
            }
            for j in 0..m {
                means[j * l + r] = dot(&beta, &ctx.rows[j]);
            }
            regimes.push(RegimeParams { beta, sigma2: 0.0 });
        }

        let mut sq = vec![0.0; l];
        for (i, curve) in curves.curves().iter().enumerate() {
            let g = post.gamma(i, k);
            if g == 0.0 {
                continue;
            }
            let fiber = &tau[i * m * l..(i + 1) * m * l];
            for (j, &x) in curve.values().iter().enumerate() {
                for r in 0..l {
                    let d = x - means[j * l + r];
                    sq[r] += g * fiber[j * l + r] * d * d;
                }
            }
        }
        for r in 0..l {
            if live[r] {
                let mass: f64 = (0..m).map(|j| totals[j * l + r]).sum();
                regimes[r].sigma2 = (sq[r] / mass).max(options.variance_floor);
            }
        }

        let irls = irls_on_totals(&totals, &ctx.times, &prev_comp.logistic, options.irls)?;
        irls_gradient_fallbacks += irls.gradient_fallbacks;
        components.push(RhlpParams {
            logistic: irls.weights,
            regimes,
        });
    }

    Ok(MStepOutcome {
        params: MixRhlpParams {
            alphas,
            components,
            basis: prev.basis,
        },
        singular_solves,
        irls_gradient_fallbacks,
    })
}

/// Random balanced hard partition of the curves, then per cluster a uniform
/// contiguous segmentation of the grid with per-segment least squares.
fn initialize(
    curves: &CurveSet,
    spec: &MixRhlpSpec,
    rows: &[Vec<f64>],
    variance_floor: f64,
    seed: u64,
) -> MixRhlpParams {
    let n = curves.len();
    let m = curves.m();
    let k_count = spec.clusters();
    let basis = PolynomialBasis::new(spec.degree);

    let groups = balanced_random_partition(n, k_count, seed);

    let alphas = groups.iter().map(|g| g.len() as f64 / n as f64).collect();
    let components = groups
        .iter()
        .zip(&spec.regimes)
        .map(|(members, &l)| {
            let regimes = (0..l)
                .map(|r| {
                    let start = r * m / l;
                    let end = ((r + 1) * m / l).max(start + 1).min(m);
                    segment_fit(curves, members, start..end, rows, variance_floor)
                })
                .collect();
            RhlpParams {
                logistic: LogisticWeights::zeros(l),
                regimes,
            }
        })
        .collect();

    MixRhlpParams {
        alphas,
        components,
        basis,
    }
}

/// Random hard partition of `0..n` into `k` groups whose sizes differ by at most one.
pub(crate) fn balanced_random_partition(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut groups = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        groups[pos % k].push(i);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups
}

/// Least squares of the `members` curves over the grid indices in `span`.
pub(crate) fn segment_fit(
    curves: &CurveSet,
    members: &[usize],
    span: std::ops::Range<usize>,
    rows: &[Vec<f64>],
    variance_floor: f64,
) -> RegimeParams {
    let m = curves.m();
    let mut w = vec![0.0; m];
    let mut y = vec![0.0; m];
    for &i in members {
        let values = curves.curve(i).values();
        for j in span.clone() {
            w[j] += 1.0;
            y[j] += values[j];
        }
    }
    let (beta, _) = weighted_least_squares(rows, &w, &y);
    let mut sq = 0.0;
    for &i in members {
        let values = curves.curve(i).values();
        for j in span.clone() {
            let d = values[j] - dot(&beta, &rows[j]);
            sq += d * d;
        }
    }
    let count = (members.len() * span.len()).max(1) as f64;
    RegimeParams {
        beta,
        sigma2: (sq / count).max(variance_floor),
    }
}

pub(crate) struct RunOutcome<T> {
    pub(crate) fit: T,
    pub(crate) summary: RestartSummary,
    pub(crate) singular_solves: usize,
    pub(crate) irls_gradient_fallbacks: usize,
}

/// Runs every restart (concurrently) and keeps the one with the highest final
/// log-likelihood, ties to the lower restart index.
pub(crate) fn best_of_restarts<T: Send>(
    config: &FitConfig,
    variance_floor: f64,
    run: impl Fn(u64) -> Result<RunOutcome<T>> + Sync,
) -> Result<(T, FitReport)> {
    let runs: Vec<Result<RunOutcome<T>>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| run(derive_seed(config.seed, &[r as u64])))
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut best: Option<usize> = None;
    for (r, run) in runs.iter().enumerate() {
        if run.summary.diverged {
            log::warn!("restart {r} diverged to a non-finite log-likelihood");
            continue;
        }
        let ll = run.summary.final_loglik();
        if best.is_none_or(|b| ll > runs[b].summary.final_loglik()) {
            best = Some(r);
        }
    }
    let best =
        best.ok_or_else(|| Error::Numerical("every EM restart ended with a non-finite log-likelihood".into()))?;

    let singular_solves = runs.iter().map(|r| r.singular_solves).sum();
    let irls_gradient_fallbacks = runs.iter().map(|r| r.irls_gradient_fallbacks).sum();
    if singular_solves > 0 {
        log::warn!("{singular_solves} weighted normal systems were singular; used the pseudo-inverse");
    }
    let summaries: Vec<RestartSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let chosen = runs.into_iter().nth(best).expect("best index in range");
    let report = FitReport {
        loglik_trace: chosen.summary.loglik_trace.clone(),
        iterations: chosen.summary.iterations,
        converged: chosen.summary.converged,
        restarts_run: summaries.len(),
        best_restart: best,
        seed: config.seed,
        variance_floor,
        singular_solves,
        irls_gradient_fallbacks,
        restarts: summaries,
    };
    Ok((chosen.fit, report))
}

/// EM loop shared by every mixture model: alternates `m_step` and `e_step`
/// until the relative log-likelihood increment drops to `epsilon`.
pub(crate) fn em_loop<P, Q>(
    config: &FitConfig,
    seed: u64,
    init: P,
    e_step: impl Fn(&P) -> (Q, f64),
    m_step: impl Fn(&Q, &P) -> Result<(P, usize, usize)>,
) -> Result<RunOutcome<(P, Q)>> {
    let mut params = init;
    let (mut posteriors, mut loglik) = e_step(&params);
    let mut trace = Vec::new();
    let mut diverged = !loglik.is_finite();
    if !diverged {
        trace.push(loglik);
    }
    let mut converged = false;
    let mut iterations = 0;
    let mut singular_solves = 0;
    let mut irls_gradient_fallbacks = 0;

    while !diverged && iterations < config.max_iter {
        let (next_params, singular, fallbacks) = m_step(&posteriors, &params)?;
        singular_solves += singular;
        irls_gradient_fallbacks += fallbacks;
        let (post, next) = e_step(&next_params);
        iterations += 1;
        if !next.is_finite() {
            diverged = true;
            break;
        }
        params = next_params;
        posteriors = post;
        trace.push(next);
        let increment = next - loglik;
        loglik = next;
        if increment.abs() <= config.epsilon * loglik.abs() {
            converged = true;
            break;
        }
    }

    Ok(RunOutcome {
        fit: (params, posteriors),
        summary: RestartSummary {
            seed,
            loglik_trace: trace,
            iterations,
            converged,
            diverged,
        },
        singular_solves,
        irls_gradient_fallbacks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixRhlpFit {
    pub params: MixRhlpParams,
    pub posteriors: Posteriors,
    pub report: FitReport,
}

/// Fits a MixRHLP model to `curves` by EM from `config.restarts` random
/// initializations and keeps the one with the highest final log-likelihood.
pub fn fit(curves: &CurveSet, spec: &MixRhlpSpec, config: &FitConfig) -> Result<MixRhlpFit> {
    spec.validate()?;
    config.validate()?;
    let k_count = spec.clusters();
    if curves.len() < k_count {
        return Err(Error::InvalidConfig(format!(
            "{} curves cannot populate {k_count} clusters",
            curves.len()
        )));
    }
    let ctx = GridContext::new(curves.grid(), PolynomialBasis::new(spec.degree));
    let variance_floor = config.variance_floor(curves);
    let options = MStepOptions {
        variance_floor,
        irls: config.irls,
    };

    let ((params, posteriors), report) = best_of_restarts(config, variance_floor, |seed| {
        em_loop(
            config,
            seed,
            initialize(curves, spec, ctx.rows.as_slice(), variance_floor, seed),
            |p| e_step_with(p, curves, &ctx),
            |post, prev| {
                let out = m_step_with(post, curves, prev, &options, &ctx)?;
                Ok((out.params, out.singular_solves, out.irls_gradient_fallbacks))
            },
        )
    })?;
    Ok(MixRhlpFit {
        params,
        posteriors,
        report,
    })
}

/// Most probable regime at every grid point, ties to the lower regime index.
pub fn hard_segmentation(params: &RhlpParams, grid: &TimeGrid) -> Vec<usize> {
    grid.normalized()
        .into_iter()
        .map(|t| argmax(&params.logistic.log_probabilities(t)))
        .collect()
}

/// Conditional mean `sum_l pi_l(t_j) beta_l' t_j` on the grid.
pub fn mean_curve(params: &RhlpParams, grid: &TimeGrid) -> Vec<f64> {
    let basis = params.basis();
    grid.normalized()
        .into_iter()
        .map(|t| {
            let row = basis.row(t);
            params
                .logistic
                .log_probabilities(t)
                .into_iter()
                .zip(&params.regimes)
                .map(|(lp, r)| lp.exp() * dot(&r.beta, &row))
                .sum()
        })
        .collect()
}

/// Per-regime polynomial `beta_l' t_j` on the grid.
pub fn regime_curves(params: &RhlpParams, grid: &TimeGrid) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = grid.normalized().into_iter().map(|t| params.basis().row(t)).collect();
    params
        .regimes
        .iter()
        .map(|r| rows.iter().map(|row| dot(&r.beta, row)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(m: usize) -> TimeGrid {
        TimeGrid::regular(0.0, 1.0, m).unwrap()
    }

    fn constant_component(level: f64, sigma2: f64) -> RhlpParams {
        RhlpParams::new(
            LogisticWeights::zeros(1),
            vec![RegimeParams {
                beta: vec![level],
                sigma2,
            }],
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_zeros() {
        let m = 7;
        let curve = Curve::new(vec![0.0; m]).unwrap();
        let ld = curve_log_density(&constant_component(0.0, 1.0), &curve, &grid(m)).unwrap();
        assert!((ld - (-(m as f64) * 0.918_938_533_204_672_8)).abs() < 1e-12);
    }

    #[test]
    fn identical_regimes_collapse_to_one() {
        let m = 9;
        let g = grid(m);
        let curve = Curve::new((0..m).map(|j| (j as f64).sin()).collect()).unwrap();
        let one = constant_component(0.3, 0.7);
        let two = RhlpParams::new(
            LogisticWeights::from_rows(vec![[1.3, -4.0], [0.0, 0.0]]).unwrap(),
            vec![one.regimes[0].clone(), one.regimes[0].clone()],
        )
        .unwrap();
        let a = curve_log_density(&one, &curve, &g).unwrap();
        let b = curve_log_density(&two, &curve, &g).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn mixture_of_one_and_degenerate_weights() {
        let m = 5;
        let g = grid(m);
        let curve = Curve::new(vec![0.2, -0.1, 0.4, 1.0, 0.0]).unwrap();
        let c1 = constant_component(0.0, 1.0);
        let c2 = constant_component(3.0, 2.0);
        let basis = PolynomialBasis::new(0);
        let single = MixRhlpParams::new(vec![1.0], vec![c1.clone()], basis).unwrap();
        let lone = curve_log_density(&c1, &curve, &g).unwrap();
        assert!((mixture_log_density(&single, &curve, &g).unwrap() - lone).abs() < 1e-12);
        let pair = MixRhlpParams::new(vec![1.0, 0.0], vec![c1, c2], basis).unwrap();
        assert!((mixture_log_density(&pair, &curve, &g).unwrap() - lone).abs() < 1e-12);
    }

    #[test]
    fn e_step_single_cluster_single_regime() {
        let m = 4;
        let g = grid(m);
        let curves = CurveSet::new(
            g.clone(),
            vec![
                Curve::new(vec![0.0, 1.0, 0.5, 0.2]).unwrap(),
                Curve::new(vec![1.0, 1.0, 0.0, -0.2]).unwrap(),
            ],
        )
        .unwrap();
        let comp = constant_component(0.5, 0.8);
        let params = MixRhlpParams::new(vec![1.0], vec![comp.clone()], PolynomialBasis::new(0)).unwrap();
        let (post, ll) = e_step(&params, &curves).unwrap();
        let expected: f64 = curves
            .curves()
            .iter()
            .map(|c| curve_log_density(&comp, c, &g).unwrap())
            .sum();
        assert!((ll - expected).abs() < 1e-12);
        for i in 0..2 {
            assert_eq!(post.gamma(i, 0), 1.0);
            for j in 0..m {
                assert_eq!(post.tau(i, 0, j, 0), 1.0);
            }
        }
    }

    #[test]
    fn m_step_constant_model_is_grand_mean_and_variance() {
        let m = 5;
        let g = grid(m);
        let curves = CurveSet::new(
            g,
            vec![
                Curve::new(vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
                Curve::new(vec![0.0, -1.0, 2.5, 1.0, 0.5]).unwrap(),
            ],
        )
        .unwrap();
        let prev = MixRhlpParams::new(vec![1.0], vec![constant_component(0.0, 1.0)], PolynomialBasis::new(0)).unwrap();
        let (post, _) = e_step(&prev, &curves).unwrap();
        let options = MStepOptions {
            variance_floor: 1e-12,
            irls: IrlsConfig::default(),
        };
        let next = m_step(&post, &curves, &prev, &options).unwrap().params;
        let all: Vec<f64> = curves.curves().iter().flat_map(|c| c.values().to_vec()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!((next.components[0].regimes[0].beta[0] - mean).abs() < 1e-12);
        assert!((next.components[0].regimes[0].sigma2 - var).abs() < 1e-12);
    }

    #[test]
    fn hard_segmentation_ties_go_low() {
        let g = grid(6);
        let zero = RhlpParams::new(
            LogisticWeights::zeros(2),
            vec![
                RegimeParams {
                    beta: vec![0.0],
                    sigma2: 1.0,
                },
                RegimeParams {
                    beta: vec![1.0],
                    sigma2: 1.0,
                },
            ],
        )
        .unwrap();
        assert_eq!(hard_segmentation(&zero, &g), vec![0; 6]);
        assert_eq!(hard_segmentation(&constant_component(0.0, 1.0), &g), vec![0; 6]);
    }

    #[test]
    fn fit_rejects_more_clusters_than_curves() {
        let g = grid(3);
        let curves = CurveSet::new(g, vec![Curve::new(vec![0.0, 1.0, 2.0]).unwrap()]).unwrap();
        let err = fit(&curves, &MixRhlpSpec::uniform(2, 1, 0), &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn params_validation() {
        let basis = PolynomialBasis::new(0);
        let c = constant_component(0.0, 1.0);
        assert!(MixRhlpParams::new(vec![0.5, 0.4], vec![c.clone(), c.clone()], basis).is_err());
        assert!(MixRhlpParams::new(vec![1.0], vec![c.clone()], PolynomialBasis::new(1)).is_err());
        assert!(RhlpParams::new(LogisticWeights::zeros(2), c.regimes.clone()).is_err());
    }
}
