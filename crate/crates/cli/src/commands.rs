use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use curveseg::curves::{fmt_f64, read_curves_csv, split_by_class, write_curves_csv, LabeledCurveSet};
use curveseg::datagen::{
    generate_piecewise, generate_waveforms, read_ground_truth_csv, write_ground_truth_csv, PiecewiseSpec, SimulatedSet,
    WaveformScheme, WaveformSpec,
};
use curveseg::evaluation;
use curveseg::fmda::{self, classify_set, render_predictions_csv, ClassModel, FmdaModel};
use curveseg::logistic::regime_probabilities;
use curveseg::mixrhlp::hard_segmentation;
use curveseg::selection::{self, bic, SelectionGrid};
use curveseg::Error;

use crate::manifest::{sibling, RunManifest};
use crate::{
    ClassifyArgs, EvaluateArgs, Failure, InspectArgs, PiecewiseArgs, Scheme, SelectArgs, SimulateOutput, TrainArgs,
    WaveformArgs,
};

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| {
        Failure::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Creates `path` and hands a buffered writer to `render`.
fn write_with(path: &Path, render: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), Failure> {
    let file = File::create(path).map_err(io_error(path))?;
    let mut out = BufWriter::new(file);
    render(&mut out).map_err(io_error(path))?;
    out.flush().map_err(io_error(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Usage(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_error(path))
}

fn finish_simulation(
    sim: &SimulatedSet,
    output: &SimulateOutput,
    mut manifest: RunManifest,
    explicit: Option<&Path>,
) -> Result<(), Failure> {
    manifest.phase("generate");
    let truth = output
        .truth
        .clone()
        .unwrap_or_else(|| sibling(&output.out, "truth.csv"));
    write_curves_csv(&sim.set, &output.out)?;
    write_ground_truth_csv(sim, &truth)?;
    manifest.output(&output.out);
    manifest.output(&truth);
    manifest.phase("write");
    manifest.summary(json!({
        "curves": sim.set.len(),
        "points": sim.set.m(),
        "class_counts": sim.set.class_counts(),
    }));
    println!(
        "wrote {} curves of {} points to {} (ground truth in {})",
        sim.set.len(),
        sim.set.m(),
        output.out.display(),
        truth.display()
    );
    manifest.finish(explicit, &output.out)
}

pub fn simulate_piecewise(args: &PiecewiseArgs, explicit: Option<&Path>) -> Result<(), Failure> {
    let manifest = RunManifest::start("simulate piecewise", args, Some(args.output.seed));
    if args.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    if !args.noise.is_finite() || args.noise < 0.0 {
        return Err(Failure::Usage("--noise must be a non-negative number".into()));
    }
    let spec = PiecewiseSpec::default_fixture().with_counts(args.n, args.noise);
    let sim = generate_piecewise(&spec, args.output.seed)?;
    finish_simulation(&sim, &args.output, manifest, explicit)
}

pub fn simulate_waveform(args: &WaveformArgs, explicit: Option<&Path>) -> Result<(), Failure> {
    let manifest = RunManifest::start("simulate waveform", args, Some(args.output.seed));
    let spec = WaveformSpec {
        curves_per_class: args.n,
        noise_sd: args.noise,
        scheme: match args.scheme {
            Scheme::Merged => WaveformScheme::Merged,
            Scheme::Original => WaveformScheme::Original,
        },
    };
    let sim = generate_waveforms(&spec, args.output.seed).map_err(|e| match e {
        Error::InvalidConfig(msg) => Failure::Usage(msg),
        other => Failure::Core(other),
    })?;
    finish_simulation(&sim, &args.output, manifest, explicit)
}

#[derive(Debug, Serialize)]
struct ClassReport {
    class: usize,
    training_curves: usize,
    clusters: usize,
    regimes: Vec<usize>,
    degree: usize,
    loglik: f64,
    free_parameters: usize,
    bic: f64,
    iterations: usize,
    converged: bool,
    restarts_run: usize,
    best_restart: usize,
    variance_floor: f64,
    singular_solves: usize,
    irls_gradient_fallbacks: usize,
}

fn class_reports(model: &FmdaModel) -> Vec<ClassReport> {
    model
        .classes
        .iter()
        .enumerate()
        .map(|(g, entry)| {
            let loglik = entry.report.final_loglik();
            let nu = entry.model.free_parameters();
            ClassReport {
                class: g + 1,
                training_curves: entry.training_curves,
                clusters: entry.spec.clusters,
                regimes: entry.spec.regimes.clone(),
                degree: entry.spec.degree,
                loglik,
                free_parameters: nu,
                bic: bic(loglik, nu, entry.training_curves),
                iterations: entry.report.iterations,
                converged: entry.report.converged,
                restarts_run: entry.report.restarts_run,
                best_restart: entry.report.best_restart,
                variance_floor: entry.report.variance_floor,
                singular_solves: entry.report.singular_solves,
                irls_gradient_fallbacks: entry.report.irls_gradient_fallbacks,
            }
        })
        .collect()
}

pub fn train(args: &TrainArgs, explicit: Option<&Path>) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("train", args, Some(args.fit.seed));
    let config = args.fit.config()?;
    let set = read_curves_csv(&args.input, true)?;
    manifest.input(&args.input);
    manifest.phase("read");
    let spec = args.model.spec(set.num_classes())?;
    let model = fmda::train(&set, &spec, &config)?;
    manifest.phase("fit");

    let reports = class_reports(&model);
    let report_path = args.report.clone().unwrap_or_else(|| sibling(&args.out, "report.json"));
    model.save(&args.out)?;
    write_json(
        &report_path,
        &json!({ "method": model.method, "priors": model.priors, "classes": reports }),
    )?;
    manifest.output(&args.out);
    manifest.output(&report_path);
    manifest.phase("write");

    println!(
        "{} on {} curves, {} classes",
        model.method,
        set.len(),
        model.num_classes()
    );
    for r in &reports {
        println!(
            "class {}: {} curves, K={} L={:?} p={}, loglik {:.4}, BIC {:.4}, {} iterations{}",
            r.class,
            r.training_curves,
            r.clusters,
            r.regimes,
            r.degree,
            r.loglik,
            r.bic,
            r.iterations,
            if r.converged { "" } else { " (not converged)" }
        );
    }
    manifest.summary(json!({ "priors": model.priors, "classes": reports }));
    manifest.finish(explicit, &args.out)
}

pub fn classify(args: &ClassifyArgs, explicit: Option<&Path>) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("classify", args, None);
    let model = FmdaModel::load(&args.model)?;
    let set = read_curves_csv(&args.input, !args.unlabeled)?;
    manifest.input(&args.model);
    manifest.input(&args.input);
    manifest.phase("read");
    let predictions = classify_set(&model, &set.unlabeled())?;
    manifest.phase("classify");
    write_with(&args.out, |out| {
        render_predictions_csv(&predictions, model.num_classes(), out)
    })?;
    manifest.output(&args.out);
    manifest.phase("write");

    let mut summary = json!({ "curves": predictions.len() });
    if !args.unlabeled {
        let errors = predictions
            .iter()
            .zip(set.labels())
            .filter(|(p, &y)| p.label != y)
            .count();
        let rate = errors as f64 / predictions.len() as f64;
        println!(
            "{} curves classified, error rate against input labels {:.4}",
            predictions.len(),
            rate
        );
        summary["error_rate"] = json!(rate);
    } else {
        println!("{} curves classified", predictions.len());
    }
    manifest.summary(summary);
    manifest.finish(explicit, &args.out)
}

pub fn select(args: &SelectArgs, explicit: Option<&Path>) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("select", args, Some(args.fit.seed));
    let config = args.fit.config()?;
    let grid = SelectionGrid::new(args.kmax, args.lmax, args.pmax).map_err(|e| Failure::Usage(e.to_string()))?;
    let set = read_curves_csv(&args.input, !args.unlabeled)?;
    manifest.input(&args.input);
    manifest.phase("read");

    let classes: Vec<usize> = match args.class {
        Some(0) => return Err(Failure::Usage("--class counts from 1".into())),
        Some(g) if g > set.num_classes() => {
            return Err(Failure::Core(Error::Validation(format!(
                "--class {g}: {} has {} classes",
                args.input.display(),
                set.num_classes()
            ))))
        }
        Some(g) => vec![g - 1],
        None => (0..set.num_classes()).collect(),
    };
    let parts = split_by_class(&set);
    let mut results = Vec::new();
    for &g in &classes {
        let curves = &parts[g].1;
        if curves.is_empty() {
            return Err(Failure::Core(Error::Validation(format!(
                "class {} has no curves",
                g + 1
            ))));
        }
        log::info!(
            "selecting over {} candidates for class {}",
            grid.candidates().len(),
            g + 1
        );
        results.push((g, selection::select(curves, &grid, &config)?));
    }
    manifest.phase("select");

    write_with(&args.out, |out| {
        writeln!(out, "class,K,L,p,loglik,nu,bic,converged")?;
        for (g, result) in &results {
            for r in &result.table {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    g + 1,
                    r.k,
                    r.l,
                    r.p,
                    fmt_f64(r.loglik),
                    r.nu,
                    fmt_f64(r.bic),
                    r.converged
                )?;
            }
        }
        Ok(())
    })?;
    manifest.output(&args.out);
    manifest.phase("write");

    let mut chosen = Vec::new();
    for (g, result) in &results {
        let (k, l, p) = result.best;
        println!("class {}: K={k} L={l} p={p}", g + 1);
        chosen.push(json!({ "class": g + 1, "K": k, "L": l, "p": p }));
    }
    manifest.summary(json!({ "chosen": chosen }));
    manifest.finish(explicit, &args.out)
}

pub fn evaluate(args: &EvaluateArgs, explicit: Option<&Path>) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("evaluate", args, Some(args.fit.seed));
    let config = args.fit.config()?;
    if args.folds < 2 {
        return Err(Failure::Usage("--folds must be at least 2".into()));
    }
    let set = read_curves_csv(&args.input, true)?;
    manifest.input(&args.input);
    let truth = match &args.truth {
        Some(path) => {
            manifest.input(path);
            Some(read_ground_truth_csv(path)?)
        }
        None => None,
    };
    manifest.phase("read");
    let spec = args.model.spec(set.num_classes())?;
    let report = evaluation::evaluate(
        &set,
        &spec,
        &config,
        args.folds,
        truth.as_ref().map(|t| t.subclass.as_slice()),
    )?;
    manifest.phase("evaluate");
    write_json(&args.out, &report)?;
    manifest.output(&args.out);
    manifest.phase("write");

    print_evaluation(&set, &report);
    manifest.summary(json!({ "error_rate": report.error_rate, "inertia": report.inertia, "ari": report.ari }));
    manifest.finish(explicit, &args.out)
}

fn print_evaluation(set: &LabeledCurveSet, report: &evaluation::EvalReport) {
    let folds: Vec<String> = report.per_fold_rates.iter().map(|r| format!("{r:.4}")).collect();
    println!(
        "{} curves, error rate {:.4} (folds {})",
        set.len(),
        report.error_rate,
        folds.join(" ")
    );
    if let Some(inertia) = report.inertia {
        println!("intra-class inertia {inertia:.4}");
    }
    if let Some(ari) = report.ari {
        println!("sub-class adjusted Rand index {ari:.4}");
    }
    print!("{}", report.confusion_table());
}

/// `(regime, first, last)` runs of a hard segmentation, with 1-based grid indices.
fn segments(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.0 == l => last.2 = j + 1,
            _ => out.push((l, j + 1, j + 1)),
        }
    }
    out
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn describe(model: &FmdaModel) -> String {
    let mut text = format!(
        "method {}, {} classes, grid of {} points from {} to {}\n",
        model.method,
        model.num_classes(),
        model.grid.len(),
        model.grid.start(),
        model.grid.end()
    );
    for (g, entry) in model.classes.iter().enumerate() {
        text += &format!(
            "class {}: prior {:.6}, {} training curves, {} clusters, loglik {:.4}, {} free parameters\n",
            g + 1,
            model.priors[g],
            entry.training_curves,
            entry.model.clusters(),
            entry.report.final_loglik(),
            entry.model.free_parameters()
        );
        match &entry.model {
            ClassModel::MixRhlp(p) => {
                for (k, c) in p.components.iter().enumerate() {
                    text += &format!("  cluster {}: weight {:.6}\n", k + 1, p.alphas[k]);
                    for (l, (r, w)) in c.regimes.iter().zip(c.logistic.rows()).enumerate() {
                        text += &format!(
                            "    regime {}: coefficients {}, variance {:.6}, logistic weights {}\n",
                            l + 1,
                            fmt_vec(&r.beta),
                            r.sigma2,
                            fmt_vec(w)
                        );
                    }
                    let runs: Vec<String> = segments(&hard_segmentation(c, &model.grid))
                        .iter()
                        .map(|(l, a, b)| format!("regime {} on points {a}-{b}", l + 1))
                        .collect();
                    text += &format!("    segmentation: {}\n", runs.join(", "));
                }
            }
            ClassModel::SingleRegression(p) => {
                text += &format!("  coefficients {}, variance {:.6}\n", fmt_vec(&p.beta), p.sigma2);
            }
            ClassModel::RegressionMixture(p) => {
                for (k, c) in p.components.iter().enumerate() {
                    text += &format!(
                        "  cluster {}: weight {:.6}, coefficients {}, variance {:.6}\n",
                        k + 1,
                        p.alphas[k],
                        fmt_vec(&c.beta),
                        c.sigma2
                    );
                }
            }
        }
    }
    text
}

pub fn inspect(args: &InspectArgs, explicit: Option<&Path>) -> Result<(), Failure> {
    let mut manifest = RunManifest::start("inspect", args, None);
    let model = FmdaModel::load(&args.model)?;
    manifest.input(&args.model);
    manifest.phase("read");
    fs::create_dir_all(&args.out_dir).map_err(io_error(&args.out_dir))?;

    let means_path = args.out_dir.join("mean_curves.csv");
    let probs_path = args.out_dir.join("logistic_probabilities.csv");
    let times = model.grid.points();
    let normalized = model.grid.normalized();
    let means = (0..model.num_classes())
        .map(|g| fmda::mean_curves(&model, g))
        .collect::<curveseg::Result<Vec<_>>>()?;
    write_with(&means_path, |out| {
        writeln!(out, "class,cluster,time,mean")?;
        for (g, curves) in means.iter().enumerate() {
            for (k, curve) in curves.iter().enumerate() {
                for (t, v) in times.iter().zip(curve) {
                    writeln!(out, "{},{},{},{}", g + 1, k + 1, fmt_f64(*t), fmt_f64(*v))?;
                }
            }
        }
        Ok(())
    })?;
    write_with(&probs_path, |out| {
        writeln!(out, "class,cluster,regime,time,probability")?;
        for (g, entry) in model.classes.iter().enumerate() {
            let ClassModel::MixRhlp(p) = &entry.model else { continue };
            for (k, c) in p.components.iter().enumerate() {
                let table: Vec<Vec<f64>> = normalized
                    .iter()
                    .map(|&t| regime_probabilities(&c.logistic, t))
                    .collect();
                for l in 0..c.num_regimes() {
                    for (t, row) in times.iter().zip(&table) {
                        writeln!(out, "{},{},{},{},{}", g + 1, k + 1, l + 1, fmt_f64(*t), fmt_f64(row[l]))?;
                    }
                }
            }
        }
        Ok(())
    })?;
    manifest.output(&means_path);
    manifest.output(&probs_path);
    manifest.phase("write");

    print!("{}", describe(&model));
    manifest.finish(explicit, &args.out_dir.join("inspect"))
}

#[cfg(test)]
mod tests {
    use super::segments;

    #[test]
    fn segments_are_one_based_runs() {
        assert_eq!(segments(&[0, 0, 1, 1, 1, 2]), vec![(0, 1, 2), (1, 3, 5), (2, 6, 6)]);
        assert_eq!(segments(&[]), vec![]);
    }
}
