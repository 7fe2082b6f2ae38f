//! Discriminant layer: one density model per class, priors from class
//! proportions, maximum a posteriori classification.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    fit_flda_single, fit_fmda_regression_mixture, RegressionMixtureClassModel, RegressionTables,
    SingleRegressionClassModel,
};
use crate::basis::{Basis, PolynomialBasis, SplineBasis};
use crate::curves::{fmt_f64, split_by_class, Curve, CurveSet, LabeledCurveSet, TimeGrid};
use crate::error::{Error, Result};
use crate::mixrhlp::{fit, mean_curve, FitConfig, FitReport, MixRhlpParams, MixRhlpSpec, MixtureTables};
use crate::numeric::{argmax, softmax_in_place};
use crate::seed::derive_seed;
use crate::selection::{count_free_parameters_per_cluster, count_regression_mixture_parameters};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fmda-mixrhlp")]
    FmdaMixRhlp,
    #[serde(rename = "flda-pr")]
    FldaPr,
    #[serde(rename = "flda-sr")]
    FldaSr,
    #[serde(rename = "flda-rhlp")]
    FldaRhlp,
    #[serde(rename = "fmda-prm")]
    FmdaPrm,
    #[serde(rename = "fmda-srm")]
    FmdaSrm,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FldaPr,
        Method::FldaSr,
        Method::FldaRhlp,
        Method::FmdaPrm,
        Method::FmdaSrm,
        Method::FmdaMixRhlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FmdaMixRhlp => "fmda-mixrhlp",
            Method::FldaPr => "flda-pr",
            Method::FldaSr => "flda-sr",
            Method::FldaRhlp => "flda-rhlp",
            Method::FmdaPrm => "fmda-prm",
            Method::FmdaSrm => "fmda-srm",
        }
    }

    /// One density per class rather than a mixture.
    pub fn is_single_component(self) -> bool {
        matches!(self, Method::FldaPr | Method::FldaSr | Method::FldaRhlp)
    }

    /// Class densities with a hidden logistic regime process.
    pub fn has_regimes(self) -> bool {
        matches!(self, Method::FmdaMixRhlp | Method::FldaRhlp)
    }

    pub fn uses_splines(self) -> bool {
        matches!(self, Method::FldaSr | Method::FmdaSrm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Structure of one class model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub clusters: usize,
    /// Regimes per cluster (length `clusters`); all 1 for regression baselines.
    pub regimes: Vec<usize>,
    /// Polynomial degree (polynomial and regime methods).
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub method: Method,
    pub classes: Vec<ClassSpec>,
    pub spline: SplineBasis,
}

fn broadcast(values: &[usize], classes: usize, flag: &str) -> Result<Vec<usize>> {
    match values.len() {
        1 => Ok(vec![values[0]; classes]),
        n if n == classes => Ok(values.to_vec()),
        n => Err(Error::InvalidConfig(format!(
            "{flag} lists {n} values for {classes} classes"
        ))),
    }
}

impl TrainSpec {
    /// Per-class settings from possibly broadcast lists. Single-density
    /// methods use one cluster per class; regression methods one regime.
    pub fn new(method: Method, clusters: &[usize], regimes: &[usize], degree: usize, classes: usize) -> Result<Self> {
        let ks = if method.is_single_component() {
            vec![1; classes]
        } else {
            broadcast(clusters, classes, "K")?
        };
        let ls = if method.has_regimes() {
            broadcast(regimes, classes, "L")?
        } else {
            vec![1; classes]
        };
        if ks.contains(&0) {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if ls.contains(&0) {
            return Err(Error::InvalidConfig("L must be at least 1".into()));
        }
        Ok(Self {
            method,
            classes: ks
                .into_iter()
                .zip(ls)
                .map(|(k, l)| ClassSpec {
                    clusters: k,
                    regimes: vec![l; k],
                    degree,
                })
                .collect(),
            spline: SplineBasis::default(),
        })
    }

    pub fn with_spline(self, spline: SplineBasis) -> Self {
        Self { spline, ..self }
    }

    fn validate(&self) -> Result<()> {
        for (g, c) in self.classes.iter().enumerate() {
            if c.clusters == 0 || c.regimes.len() != c.clusters || c.regimes.contains(&0) {
                return Err(Error::InvalidConfig(format!(
                    "class {}: need at least one cluster and one regime count >= 1 per cluster",
                    g + 1
                )));
            }
            if self.method.is_single_component() && c.clusters != 1 {
                return Err(Error::InvalidConfig(format!(
                    "{} uses one cluster per class",
                    self.method
                )));
            }
            if !self.method.has_regimes() && c.regimes.iter().any(|&l| l != 1) {
                return Err(Error::InvalidConfig(format!("{} has no regimes", self.method)));
            }
        }
        if self.method.uses_splines() && self.spline.degree == 0 {
            return Err(Error::InvalidConfig("spline degree must be at least 1".into()));
        }
        Ok(())
    }

    fn basis(&self, class: &ClassSpec) -> Basis {
        if self.method.uses_splines() {
            self.spline.into()
        } else {
            PolynomialBasis::new(class.degree).into()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassModel {
    MixRhlp(MixRhlpParams),
    SingleRegression(SingleRegressionClassModel),
    RegressionMixture(RegressionMixtureClassModel),
}

impl ClassModel {
    pub fn clusters(&self) -> usize {
        match self {
            ClassModel::MixRhlp(p) => p.num_clusters(),
            ClassModel::SingleRegression(_) => 1,
            ClassModel::RegressionMixture(p) => p.components.len(),
        }
    }

    pub fn free_parameters(&self) -> usize {
        match self {
            ClassModel::MixRhlp(p) => count_free_parameters_per_cluster(&p.regime_counts(), p.basis.degree),
            ClassModel::SingleRegression(p) => count_regression_mixture_parameters(1, p.basis.dim()),
            ClassModel::RegressionMixture(p) => count_regression_mixture_parameters(p.components.len(), p.basis.dim()),
        }
    }

    /// Mean curve of every cluster on `grid`.
    pub fn mean_curves(&self, grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
        match self {
            ClassModel::MixRhlp(p) => Ok(p.components.iter().map(|c| mean_curve(c, grid)).collect()),
            ClassModel::SingleRegression(p) => Ok(vec![p.mean_curve(grid)?]),
            ClassModel::RegressionMixture(p) => p.mean_curves(grid),
        }
    }

    fn tables(&self, grid: &TimeGrid) -> Result<ClassTables> {
        Ok(match self {
            ClassModel::MixRhlp(p) => ClassTables::Mixture(MixtureTables::new(p, grid)),
            ClassModel::SingleRegression(p) => ClassTables::Regression(RegressionTables::single(p, grid)?),
            ClassModel::RegressionMixture(p) => ClassTables::Regression(RegressionTables::mixture(p, grid)?),
        })
    }
}

enum ClassTables {
    Mixture(MixtureTables),
    Regression(RegressionTables),
}

impl ClassTables {
    fn cluster_log_joint(&self, values: &[f64]) -> Vec<f64> {
        match self {
            ClassTables::Mixture(t) => t.cluster_log_joint(values),
            ClassTables::Regression(t) => t.cluster_log_joint(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub spec: ClassSpec,
    pub training_curves: usize,
    pub model: ClassModel,
    pub report: FitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmdaModel {
    pub format_version: u32,
    pub method: Method,
    pub grid: TimeGrid,
    pub priors: Vec<f64>,
    pub classes: Vec<ClassEntry>,
    pub config: FitConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// 0-based class index.
    pub label: usize,
    pub posterior: Vec<f64>,
}

/// Fits one model per class on that class's curves only; priors are the
/// class proportions of `set`.
pub fn train(set: &LabeledCurveSet, spec: &TrainSpec, config: &FitConfig) -> Result<FmdaModel> {
    config.validate()?;
    spec.validate()?;
    let g = set.num_classes();
    if spec.classes.len() != g {
        return Err(Error::InvalidConfig(format!(
            "specification covers {} classes but the data has {g}",
            spec.classes.len()
        )));
    }
    let parts = split_by_class(set);
    for ((class, curves), cs) in parts.iter().zip(&spec.classes) {
        if curves.len() < cs.clusters {
            return Err(Error::InvalidConfig(format!(
                "class {} has {} curves, fewer than its {} clusters",
                class + 1,
                curves.len(),
                cs.clusters
            )));
        }
    }
    let n = set.len() as f64;
    let priors: Vec<f64> = parts.iter().map(|(_, c)| c.len() as f64 / n).collect();

    let classes = parts
        .par_iter()
        .zip(&spec.classes)
        .map(|((class, curves), cs)| {
            let class_config = config.with_seed(derive_seed(config.seed, &[*class as u64]));
            let (model, report) = fit_class(curves, spec, cs, &class_config)?;
            Ok(ClassEntry {
                spec: cs.clone(),
                training_curves: curves.len(),
                model,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FmdaModel {
        format_version: MODEL_FORMAT_VERSION,
        method: spec.method,
        grid: set.grid().clone(),
        priors,
        classes,
        config: *config,
    })
}

fn fit_class(
    curves: &CurveSet,
    spec: &TrainSpec,
    cs: &ClassSpec,
    config: &FitConfig,
) -> Result<(ClassModel, FitReport)> {
    let basis = spec.basis(cs);
    match spec.method {
        Method::FmdaMixRhlp | Method::FldaRhlp => {
            let shape = MixRhlpSpec {
                regimes: cs.regimes.clone(),
                degree: cs.degree,
            };
            let fit = fit(curves, &shape, config)?;
            Ok((ClassModel::MixRhlp(fit.params), fit.report))
        }
        Method::FldaPr | Method::FldaSr => {
            let (model, report) = fit_flda_single(curves, basis, config)?;
            Ok((ClassModel::SingleRegression(model), report))
        }
        Method::FmdaPrm | Method::FmdaSrm => {
            let fit = fit_fmda_regression_mixture(curves, basis, cs.clusters, config)?;
            Ok((ClassModel::RegressionMixture(fit.model), fit.report))
        }
    }
}

/// Every class model tabulated on the model grid.
pub struct Classifier<'a> {
    model: &'a FmdaModel,
    log_priors: Vec<f64>,
    tables: Vec<ClassTables>,
}

impl<'a> Classifier<'a> {
    pub fn new(model: &'a FmdaModel) -> Result<Self> {
        Ok(Self {
            model,
            log_priors: model.priors.iter().map(|w| w.ln()).collect(),
            tables: model
                .classes
                .iter()
                .map(|c| c.model.tables(&model.grid))
                .collect::<Result<_>>()?,
        })
    }

    fn check(&self, curve: &Curve) -> Result<()> {
        if curve.len() != self.model.grid.len() {
            return Err(Error::Validation(format!(
                "curve has {} samples but the model grid has {} points",
                curve.len(),
                self.model.grid.len()
            )));
        }
        Ok(())
    }

    /// `log p(x | class g)` for every class.
    pub fn class_log_densities(&self, curve: &Curve) -> Result<Vec<f64>> {
        self.check(curve)?;
        Ok(self
            .tables
            .iter()
            .map(|t| crate::numeric::log_sum_exp(&t.cluster_log_joint(curve.values())))
            .collect())
    }

    pub fn classify(&self, curve: &Curve) -> Result<Prediction> {
        let mut posterior = self.class_log_densities(curve)?;
        for (p, w) in posterior.iter_mut().zip(&self.log_priors) {
            *p += w;
        }
        softmax_in_place(&mut posterior);
        Ok(Prediction {
            label: argmax(&posterior),
            posterior,
        })
    }

    /// Most probable cluster of `curve` within `class`.
    pub fn assign_cluster(&self, class: usize, curve: &Curve) -> Result<usize> {
        self.check(curve)?;
        Ok(argmax(&self.tables[class].cluster_log_joint(curve.values())))
    }
}

pub fn classify(model: &FmdaModel, curve: &Curve) -> Result<Prediction> {
    Classifier::new(model)?.classify(curve)
}

/// Classifies every curve; the set's grid must be the model grid.
pub fn classify_set(model: &FmdaModel, curves: &CurveSet) -> Result<Vec<Prediction>> {
    if curves.m() != model.grid.len() {
        return Err(Error::Validation(format!(
            "input curves have {} points but the model grid has {}",
            curves.m(),
            model.grid.len()
        )));
    }
    if curves.grid() != &model.grid {
        return Err(Error::Validation("input time grid differs from the model grid".into()));
    }
    let classifier = Classifier::new(model)?;
    curves.curves().iter().map(|c| classifier.classify(c)).collect()
}

/// Columns `index,label,p1,...,pG`; index and label are 1-based.
pub fn render_predictions_csv<W: Write>(
    predictions: &[Prediction],
    classes: usize,
    out: &mut W,
) -> std::io::Result<()> {
    write!(out, "index,label")?;
    for g in 1..=classes {
        write!(out, ",p{g}")?;
    }
    writeln!(out)?;
    for (i, p) in predictions.iter().enumerate() {
        write!(out, "{},{}", i + 1, p.label + 1)?;
        for w in &p.posterior {
            write!(out, ",{}", fmt_f64(*w))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Cluster mean curves of `class` on the model grid.
pub fn mean_curves(model: &FmdaModel, class: usize) -> Result<Vec<Vec<f64>>> {
    let entry = model.classes.get(class).ok_or_else(|| {
        Error::Validation(format!(
            "class {} does not exist; the model has {}",
            class + 1,
            model.classes.len()
        ))
    })?;
    entry.model.mean_curves(&model.grid)
}

impl FmdaModel {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFile(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.classes.is_empty() || self.priors.len() != self.classes.len() {
            return Err(Error::ModelFile(format!(
                "{} priors for {} classes",
                self.priors.len(),
                self.classes.len()
            )));
        }
        let sum: f64 = self.priors.iter().sum();
        if self.priors.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::ModelFile("priors must be non-negative and sum to 1".into()));
        }
        for (g, entry) in self.classes.iter().enumerate() {
            let valid = match &entry.model {
                ClassModel::MixRhlp(p) => {
                    MixRhlpParams::new(p.alphas.clone(), p.components.clone(), p.basis).map(|_| ())
                }
                ClassModel::SingleRegression(p) => {
                    if p.beta.len() == p.basis.dim() && p.sigma2 > 0.0 {
                        Ok(())
                    } else {
                        Err(Error::Validation("coefficient count or variance is invalid".into()))
                    }
                }
                ClassModel::RegressionMixture(p) => {
                    RegressionMixtureClassModel::new(p.basis, p.alphas.clone(), p.components.clone()).map(|_| ())
                }
            };
            valid.map_err(|e| Error::ModelFile(format!("class {}: {e}", g + 1)))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::ModelFile(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: FmdaModel = serde_json::from_str(text).map_err(|e| Error::ModelFile(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::ModelFile(msg) => Error::ModelFile(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logistic::LogisticWeights;
    use crate::mixrhlp::{RegimeParams, RhlpParams};

    fn constant_class(level: f64) -> ClassEntry {
        let params = MixRhlpParams::new(
            vec![1.0],
            vec![RhlpParams::new(
                LogisticWeights::zeros(1),
                vec![RegimeParams {
                    beta: vec![level],
                    sigma2: 1.0,
                }],
            )
            .unwrap()],
            PolynomialBasis::new(0),
        )
        .unwrap();
        let fit_config = FitConfig::default();
        let trace = vec![0.0];
        ClassEntry {
            spec: ClassSpec {
                clusters: 1,
                regimes: vec![1],
                degree: 0,
            },
            training_curves: 1,
            model: ClassModel::MixRhlp(params),
            report: FitReport {
                loglik_trace: trace.clone(),
                iterations: 0,
                converged: true,
                restarts_run: 1,
                best_restart: 0,
                seed: fit_config.seed,
                variance_floor: 1e-12,
                singular_solves: 0,
                irls_gradient_fallbacks: 0,
                restarts: Vec::new(),
            },
        }
    }

    fn hand_model(levels: &[f64], priors: Vec<f64>, m: usize) -> FmdaModel {
        FmdaModel {
            format_version: MODEL_FORMAT_VERSION,
            method: Method::FmdaMixRhlp,
            grid: TimeGrid::regular(0.0, 1.0, m).unwrap(),
            priors,
            classes: levels.iter().map(|&l| constant_class(l)).collect(),
            config: FitConfig::default(),
        }
    }

    #[test]
    fn single_class_is_certain() {
        let model = hand_model(&[0.0], vec![1.0], 3);
        let p = classify(&model, &Curve::new(vec![4.0, -2.0, 9.0]).unwrap()).unwrap();
        assert_eq!(p.label, 0);
        assert_eq!(p.posterior, vec![1.0]);
    }

    #[test]
    fn identical_class_models_return_priors() {
        let model = hand_model(&[1.0, 1.0], vec![0.9, 0.1], 4);
        let p = classify(&model, &Curve::new(vec![0.3, 1.2, 2.0, -1.0]).unwrap()).unwrap();
        assert_eq!(p.label, 0);
        assert!((p.posterior[0] - 0.9).abs() < 1e-12);
        assert!((p.posterior[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn scalar_bayes_oracle() {
        let model = hand_model(&[0.0, 10.0], vec![0.5, 0.5], 2);
        let x = [0.4, 1.1];
        let p = classify(&model, &Curve::new(x.to_vec()).unwrap()).unwrap();
        // Log-likelihood ratio of N(0,1) against N(10,1) over both samples.
        let lr: f64 = x.iter().map(|v| ((v - 10.0) * (v - 10.0) - v * v) / 2.0).sum();
        let expected = 1.0 / (1.0 + (-lr).exp());
        assert_eq!(p.label, 0);
        assert!((p.posterior[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn grid_length_mismatch_is_validation_error() {
        let model = hand_model(&[0.0], vec![1.0], 3);
        let curves = CurveSet::new(
            TimeGrid::regular(0.0, 1.0, 4).unwrap(),
            vec![Curve::new(vec![0.0; 4]).unwrap()],
        )
        .unwrap();
        assert!(matches!(classify_set(&model, &curves), Err(Error::Validation(_))));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let model = hand_model(&[0.1 + 0.2, 1.0 / 3.0], vec![0.625, 0.375], 5);
        let back = FmdaModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut model = hand_model(&[0.0], vec![1.0], 3);
        model.format_version = 99;
        let err = FmdaModel::from_json(&model.to_json().unwrap()).unwrap_err();
        assert!(matches!(err, Error::ModelFile(_)));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("lda".parse::<Method>().is_err());
    }

    #[test]
    fn broadcast_rules() {
        let spec = TrainSpec::new(Method::FmdaMixRhlp, &[2, 1], &[3], 1, 2).unwrap();
        assert_eq!(spec.classes[0].regimes, vec![3, 3]);
        assert_eq!(spec.classes[1].clusters, 1);
        let flda = TrainSpec::new(Method::FldaPr, &[4], &[5], 3, 2).unwrap();
        assert!(flda.classes.iter().all(|c| c.clusters == 1 && c.regimes == vec![1]));
        assert!(TrainSpec::new(Method::FmdaPrm, &[1, 2, 3], &[1], 0, 2).is_err());
    }
}
