//! Log-domain helpers and small dense solvers shared by the fitting code.

use nalgebra::{DMatrix, DVector};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-ratios below this are dropped from sums anchored at their maximum:
/// `exp(-38) < 2^-54`, which cannot change a sum that already holds a 1.
pub(crate) const NEGLIGIBLE_LOG_RATIO: f64 = -38.0;

/// `log(sum(exp(xs)))` with max subtraction. Returns `-inf` for an empty slice
/// or when every term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    for x in xs {
        let d = x - max;
        if d > NEGLIGIBLE_LOG_RATIO {
            sum += d.exp();
        }
    }
    max + sum.ln()
}

/// Normalizes log-weights in place into probabilities; returns their log-sum-exp.
pub(crate) fn softmax_in_place(xs: &mut [f64]) -> f64 {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

/// Index of the largest entry, ties toward the smaller index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Normal matrices whose Cholesky diagonal spans more than this squared ratio
/// are solved from the weighted design instead.
const NORMAL_EQUATIONS_CONDITION: f64 = 1e-8;

/// Weighted least squares on shared design rows: minimizes
/// `sum_j w_j (y_j - row_j . beta)^2` given `w_j` and `w_j * y_j` per row.
///
/// Well-conditioned systems go through the normal equations. Otherwise the
/// square-root-weighted design is decomposed directly and singular values
/// below machine precision are dropped, giving the minimum-norm minimizer;
/// the flag reports that truncation.
pub(crate) fn weighted_least_squares(rows: &[Vec<f64>], weights: &[f64], weighted_targets: &[f64]) -> (Vec<f64>, bool) {
    let d = rows.first().map_or(0, Vec::len);
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    for ((row, &w), &wy) in rows.iter().zip(weights).zip(weighted_targets) {
        if w == 0.0 && wy == 0.0 {
            continue;
        }
        for r in 0..d {
            b[r] += wy * row[r];
            for c in 0..=r {
                a[(r, c)] += w * row[r] * row[c];
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            a[(c, r)] = a[(r, c)];
        }
    }
    if let Some(chol) = a.cholesky() {
        // Cholesky succeeds on numerically singular matrices too; check the
        // conditioning through the factor's diagonal before trusting it.
        let diag = chol.l_dirty().diagonal();
        let max = diag.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if max > 0.0 && min * min > NORMAL_EQUATIONS_CONDITION * max * max {
            return (chol.solve(&b).iter().copied().collect(), false);
        }
    }
    weighted_design_solve(rows, weights, weighted_targets, d)
}

fn weighted_design_solve(rows: &[Vec<f64>], weights: &[f64], weighted_targets: &[f64], d: usize) -> (Vec<f64>, bool) {
    let used: Vec<usize> = (0..rows.len()).filter(|&j| weights[j] > 0.0).collect();
    if used.is_empty() {
        return (vec![0.0; d], true);
    }
    let x = DMatrix::from_fn(used.len(), d, |r, c| weights[used[r]].sqrt() * rows[used[r]][c]);
    let y = DVector::from_iterator(
        used.len(),
        used.iter().map(|&j| weighted_targets[j] / weights[j].sqrt()),
    );
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = f64::EPSILON * used.len().max(d) as f64 * smax;
    let u = svd.u.as_ref().expect("u computed");
    let v_t = svd.v_t.as_ref().expect("v_t computed");
    let mut beta = DVector::zeros(d);
    let mut truncated = false;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            beta += v_t.row(k).transpose() * (u.column(k).dot(&y) / s);
        } else {
            truncated = true;
        }
    }
    (beta.iter().copied().collect(), truncated)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let xs = [-1.0, 0.5, 2.0];
        let direct = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn collinear_design_gives_minimum_norm_solution() {
        let rows = vec![vec![1.0, 1.0]; 3];
        let (x, truncated) = weighted_least_squares(&rows, &[1.0, 2.0, 1.0], &[2.0, 4.0, 2.0]);
        assert!(truncated);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn narrow_window_quartic_is_recovered() {
        // A degree-4 fit on 15 points of [0.9, 1] has a normal matrix far too
        // ill-conditioned for a 1e-8 Cholesky check.
        let ts: Vec<f64> = (0..15).map(|j| 0.9 + j as f64 / 140.0).collect();
        let truth = [1.0, -2.0, 0.5, 3.0, -1.0];
        let rows: Vec<Vec<f64>> = ts.iter().map(|&t| (0..5).map(|e| t.powi(e)).collect()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| dot(r, &truth)).collect();
        let (beta, _) = weighted_least_squares(&rows, &[1.0; 15], &ys);
        let worst = rows
            .iter()
            .zip(&ys)
            .map(|(r, y)| (dot(r, &beta) - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "residual {worst}");
    }

    #[test]
    fn wls_with_unit_weights_is_ols_line() {
        let ts = [0.0, 0.25, 0.5, 0.75, 1.0];
        let ys = [1.0, 1.4, 2.1, 2.4, 3.1];
        let rows: Vec<Vec<f64>> = ts.iter().map(|&t| vec![1.0, t]).collect();
        let (beta, truncated) = weighted_least_squares(&rows, &[1.0; 5], &ys);
        assert!(!truncated);
        let tm = ts.iter().sum::<f64>() / 5.0;
        let ym = ys.iter().sum::<f64>() / 5.0;
        let sxy: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
        let sxx: f64 = ts.iter().map(|t| (t - tm) * (t - tm)).sum();
        let slope = sxy / sxx;
        assert!((beta[1] - slope).abs() < 1e-12);
        assert!((beta[0] - (ym - slope * tm)).abs() < 1e-12);
    }
}
