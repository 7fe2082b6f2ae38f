//! Stratified cross-validation, intra-class inertia and partition agreement.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{CurveSet, LabeledCurveSet};
use crate::error::{Error, Result};
use crate::fmda::{train, Classifier, FmdaModel, TrainSpec};
use crate::mixrhlp::FitConfig;
use crate::seed::{derive_seed, rng_from_seed};

/// Tag reserved for the fold-assignment stream; fold `f` trains with tag `f`.
const FOLD_ASSIGNMENT_TAG: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub error_rate: f64,
    pub per_fold_rates: Vec<f64>,
    /// `confusion[true][predicted]`, 0-based classes.
    pub confusion: Vec<Vec<usize>>,
    pub inertia: Option<f64>,
    pub ari: Option<f64>,
}

impl EvalReport {
    /// Confusion matrix as an aligned text table with 1-based class labels.
    pub fn confusion_table(&self) -> String {
        let g = self.confusion.len();
        let width = self
            .confusion
            .iter()
            .flatten()
            .map(|c| c.to_string().len())
            .max()
            .unwrap_or(1)
            .max(g.to_string().len() + 1)
            .max(4);
        let mut out = format!("{:>width$}", "true");
        for p in 1..=g {
            out.push_str(&format!(" {:>width$}", format!("p{p}")));
        }
        out.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!("{:>width$}", t + 1));
            for c in row {
                out.push_str(&format!(" {c:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Fold index of every curve. Each class is shuffled and dealt round-robin,
/// continuing the deal across classes so fold sizes differ by at most one.
pub fn stratified_folds(set: &LabeledCurveSet, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidConfig("cross-validation needs at least 2 folds".into()));
    }
    let counts = set.class_counts();
    if let Some(g) = counts.iter().position(|&c| c < folds) {
        return Err(Error::InvalidConfig(format!(
            "class {} has {} curves, fewer than {folds} folds",
            g + 1,
            counts[g]
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[FOLD_ASSIGNMENT_TAG]));
    let mut assignment = vec![0; set.len()];
    let mut dealt = 0;
    for g in 0..set.num_classes() {
        let mut members: Vec<usize> = (0..set.len()).filter(|&i| set.labels()[i] == g).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = dealt % folds;
            dealt += 1;
        }
    }
    Ok(assignment)
}

/// Generic stratified cross-validation. `train_predict` receives the training
/// part, the held-out curves and a per-fold seed, and returns 0-based labels
/// for the held-out curves. Folds run concurrently.
pub fn cross_validate_with<F>(set: &LabeledCurveSet, folds: usize, seed: u64, train_predict: F) -> Result<EvalReport>
where
    F: Fn(&LabeledCurveSet, &CurveSet, u64) -> Result<Vec<usize>> + Sync,
{
    let assignment = stratified_folds(set, folds, seed)?;
    let outcomes: Vec<Result<(Vec<usize>, Vec<usize>)>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let (test, rest): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| assignment[i] == f);
            let training = set.subset(&rest)?;
            let held_out = set.subset(&test)?.unlabeled();
            let predicted = train_predict(&training, &held_out, derive_seed(seed, &[f as u64]))?;
            if predicted.len() != test.len() {
                return Err(Error::Validation(format!(
                    "fold {}: {} predictions for {} curves",
                    f + 1,
                    predicted.len(),
                    test.len()
                )));
            }
            Ok((test, predicted))
        })
        .collect();

    let g = set.num_classes();
    let mut confusion = vec![vec![0; g]; g];
    let mut per_fold_rates = Vec::with_capacity(folds);
    for outcome in outcomes {
        let (test, predicted) = outcome?;
        let mut errors = 0;
        for (&i, &p) in test.iter().zip(&predicted) {
            if p >= g {
                return Err(Error::Validation(format!("predicted class {} outside 1..={g}", p + 1)));
            }
            let y = set.labels()[i];
            confusion[y][p] += 1;
            errors += usize::from(p != y);
        }
        per_fold_rates.push(errors as f64 / test.len() as f64);
    }
    Ok(EvalReport {
        error_rate: per_fold_rates.iter().sum::<f64>() / folds as f64,
        per_fold_rates,
        confusion,
        inertia: None,
        ari: None,
    })
}

/// Cross-validated MAP classification error of a method; fold `f` trains with
/// the seed derived from `config.seed` and `f`.
pub fn cross_validate(set: &LabeledCurveSet, spec: &TrainSpec, config: &FitConfig, folds: usize) -> Result<EvalReport> {
    cross_validate_with(set, folds, config.seed, |training, held_out, seed| {
        let model = train(training, spec, &config.with_seed(seed))?;
        let classifier = Classifier::new(&model)?;
        held_out
            .curves()
            .iter()
            .map(|c| classifier.classify(c).map(|p| p.label))
            .collect()
    })
}

/// Cross-validated error plus, from a fit on the whole set, intra-class
/// inertia and, when ground-truth sub-classes are given, the adjusted Rand
/// index between `(class, cluster)` and `(class, sub-class)` labels.
pub fn evaluate(
    set: &LabeledCurveSet,
    spec: &TrainSpec,
    config: &FitConfig,
    folds: usize,
    subclasses: Option<&[usize]>,
) -> Result<EvalReport> {
    if let Some(sub) = subclasses {
        if sub.len() != set.len() {
            return Err(Error::Validation(format!(
                "{} ground-truth labels for {} curves",
                sub.len(),
                set.len()
            )));
        }
    }
    let mut report = cross_validate(set, spec, config, folds)?;
    let model = train(set, spec, config)?;
    report.inertia = Some(intra_class_inertia(set, &model)?);
    if let Some(sub) = subclasses {
        let clusters = cluster_assignments(set, &model)?;
        let within = |labels: &[usize]| {
            let stride = labels.iter().max().map_or(1, |m| m + 1);
            set.labels()
                .iter()
                .zip(labels)
                .map(|(&y, &c)| y * stride + c)
                .collect::<Vec<_>>()
        };
        report.ari = Some(adjusted_rand_index(&within(&clusters), &within(sub))?);
    }
    Ok(report)
}

/// Most probable cluster of every curve within its own class.
pub fn cluster_assignments(set: &LabeledCurveSet, model: &FmdaModel) -> Result<Vec<usize>> {
    check_compatible(set, model)?;
    let classifier = Classifier::new(model)?;
    set.curves()
        .iter()
        .zip(set.labels())
        .map(|(c, &y)| classifier.assign_cluster(y, c))
        .collect()
}

/// Sum of squared distances between every curve and the mean curve of its
/// most probable cluster within its class.
pub fn intra_class_inertia(set: &LabeledCurveSet, model: &FmdaModel) -> Result<f64> {
    let clusters = cluster_assignments(set, model)?;
    let means = (0..model.num_classes())
        .map(|g| model.classes[g].model.mean_curves(&model.grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(set
        .curves()
        .iter()
        .zip(set.labels())
        .zip(&clusters)
        .map(|((c, &y), &k)| {
            c.values()
                .iter()
                .zip(&means[y][k])
                .map(|(x, mu)| (x - mu) * (x - mu))
                .sum::<f64>()
        })
        .sum())
}

fn check_compatible(set: &LabeledCurveSet, model: &FmdaModel) -> Result<()> {
    if set.m() != model.grid.len() {
        return Err(Error::Validation(format!(
            "curves have {} points but the model grid has {}",
            set.m(),
            model.grid.len()
        )));
    }
    if set.num_classes() > model.num_classes() {
        return Err(Error::Validation(format!(
            "data has {} classes but the model has {}",
            set.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

fn pairs(x: usize) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items. Degenerate
/// cases where the expected and maximal index coincide return 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "label lists have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ra = a.iter().max().map_or(0, |m| m + 1);
    let rb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; rb]; ra];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..rb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(a.len());
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = (rows + cols) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
