//! Seeded synthetic curve generators with ground truth: piecewise regime
//! curves and Breiman's waveforms.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::PolynomialBasis;
use crate::curves::{Curve, LabeledCurveSet, TimeGrid};
use crate::error::{Error, Result};
use crate::numeric::dot;
use crate::seed::rng_from_seed;

/// Contiguous run of grid indices `[start, end)` following one polynomial in
/// normalized time (a single coefficient is a constant level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub coefficients: Vec<f64>,
}

impl Segment {
    pub fn constant(start: usize, end: usize, level: f64) -> Self {
        Self {
            start,
            end,
            coefficients: vec![level],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubclassSpec {
    /// 0-based class the sub-class belongs to.
    pub class: usize,
    pub segments: Vec<Segment>,
    pub noise_sd: f64,
    pub curves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseSpec {
    pub grid: TimeGrid,
    pub subclasses: Vec<SubclassSpec>,
}

impl PiecewiseSpec {
    /// Two classes over 200 points: class 1 has three sub-classes, class 2 is
    /// homogeneous and differs from class 1's first sub-class only by a later
    /// second changepoint. Every sub-class has 50 curves, three constant
    /// regimes and noise standard deviation 0.3.
    pub fn default_fixture() -> Self {
        let sd = 0.3;
        let sub = |class, cuts: [usize; 2], levels: [f64; 3]| SubclassSpec {
            class,
            segments: vec![
                Segment::constant(0, cuts[0], levels[0]),
                Segment::constant(cuts[0], cuts[1], levels[1]),
                Segment::constant(cuts[1], 200, levels[2]),
            ],
            noise_sd: sd,
            curves: 50,
        };
        Self {
            grid: TimeGrid::regular(1.0, 1.0, 200).expect("valid grid"),
            subclasses: vec![
                sub(0, [60, 130], [0.5, 2.0, 1.0]),
                sub(0, [80, 150], [3.0, 1.5, 2.5]),
                sub(0, [40, 110], [2.0, 0.0, 1.0]),
                sub(1, [60, 134], [0.5, 2.0, 1.0]),
            ],
        }
    }

    /// Same shapes with every sub-class scaled to `curves` curves and noise `noise_sd`.
    pub fn with_counts(mut self, curves: usize, noise_sd: f64) -> Self {
        for s in &mut self.subclasses {
            s.curves = curves;
            s.noise_sd = noise_sd;
        }
        self
    }

    pub fn num_classes(&self) -> usize {
        self.subclasses.iter().map(|s| s.class + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subclasses.is_empty() {
            return Err(Error::InvalidConfig("no sub-classes".into()));
        }
        let m = self.grid.len();
        for (s, sub) in self.subclasses.iter().enumerate() {
            if !(sub.noise_sd >= 0.0) || !sub.noise_sd.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "sub-class {}: noise sd must be non-negative",
                    s + 1
                )));
            }
            let mut next = 0;
            for seg in &sub.segments {
                if seg.start != next || seg.end <= seg.start || seg.coefficients.is_empty() {
                    return Err(Error::InvalidConfig(format!(
                        "sub-class {}: segments must tile the grid in order",
                        s + 1
                    )));
                }
                next = seg.end;
            }
            if next != m {
                return Err(Error::InvalidConfig(format!(
                    "sub-class {}: segments cover {next} of {m} points",
                    s + 1
                )));
            }
        }
        let g = self.num_classes();
        for class in 0..g {
            if !self.subclasses.iter().any(|s| s.class == class && s.curves > 0) {
                return Err(Error::InvalidConfig(format!("class {} has no curves", class + 1)));
            }
        }
        Ok(())
    }
}

/// Generator labels retained next to a simulated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// 0-based sub-class within the curve's class.
    pub subclass: Vec<usize>,
    /// 0-based grid indices at which each regime after the first starts.
    pub changepoints: Vec<Vec<usize>>,
}

impl GroundTruth {
    /// 0-based regime index of every grid point of curve `i`.
    pub fn regime_labels(&self, i: usize, m: usize) -> Vec<usize> {
        let cps = &self.changepoints[i];
        (0..m).map(|j| cps.iter().filter(|&&c| c <= j).count()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSet {
    pub set: LabeledCurveSet,
    pub truth: GroundTruth,
}

impl SimulatedSet {
    /// Ground-truth sub-class labels of the curves of `class`, in curve order.
    pub fn subclass_labels(&self, class: usize) -> Vec<usize> {
        self.set
            .labels()
            .iter()
            .zip(&self.truth.subclass)
            .filter(|(&y, _)| y == class)
            .map(|(_, &s)| s)
            .collect()
    }
}

/// Curves are emitted sub-class by sub-class in spec order.
pub fn generate_piecewise(spec: &PiecewiseSpec, seed: u64) -> Result<SimulatedSet> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let times = spec.grid.normalized();
    let g = spec.num_classes();
    let mut within = vec![0usize; g];

    let mut curves = Vec::new();
    let mut labels = Vec::new();
    let mut subclass = Vec::new();
    let mut changepoints = Vec::new();
    for sub in &spec.subclasses {
        let mean: Vec<f64> = sub
            .segments
            .iter()
            .flat_map(|seg| {
                let basis = PolynomialBasis::new(seg.coefficients.len() - 1);
                times[seg.start..seg.end]
                    .iter()
                    .map(move |&t| dot(&seg.coefficients, &basis.row(t)))
            })
            .collect();
        let cps: Vec<usize> = sub.segments.iter().skip(1).map(|s| s.start).collect();
        for _ in 0..sub.curves {
            let values = mean
                .iter()
                .map(|&mu| mu + sub.noise_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            curves.push(Curve::new(values)?);
            labels.push(sub.class);
            subclass.push(within[sub.class]);
            changepoints.push(cps.clone());
        }
        within[sub.class] += 1;
    }
    Ok(SimulatedSet {
        set: LabeledCurveSet::new(spec.grid.clone(), curves, labels, g)?,
        truth: GroundTruth { subclass, changepoints },
    })
}

/// `f_1(t) = max(6 - |t - 11|, 0)`, `f_2(t) = f_1(t - 4)`, `f_3(t) = f_1(t + 4)`.
pub fn waveform_base(h: usize, t: f64) -> f64 {
    let f1 = |t: f64| (6.0 - (t - 11.0).abs()).max(0.0);
    match h {
        1 => f1(t),
        2 => f1(t - 4.0),
        3 => f1(t + 4.0),
        _ => panic!("waveform base index must be 1, 2 or 3, got {h}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveformScheme {
    /// Two classes: original classes 1 and 2 pooled, then class 3.
    Merged,
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveformSpec {
    /// Curves per output class; a merged class splits them evenly between its
    /// two sources, the first getting the odd one.
    pub curves_per_class: usize,
    pub noise_sd: f64,
    pub scheme: WaveformScheme,
}

impl Default for WaveformSpec {
    fn default() -> Self {
        Self {
            curves_per_class: 500,
            noise_sd: 1.0,
            scheme: WaveformScheme::Merged,
        }
    }
}

/// Source pairs `(a, b)` of `x(t) = u f_a(t) + (1 - u) f_b(t)`.
const WAVEFORM_SOURCES: [(usize, usize); 3] = [(1, 2), (1, 3), (2, 3)];

/// Waveforms on the grid `0, 1, ..., 20`, one uniform `u` per curve and
/// independent Gaussian noise per point.
pub fn generate_waveforms(spec: &WaveformSpec, seed: u64) -> Result<SimulatedSet> {
    if spec.curves_per_class == 0 {
        return Err(Error::InvalidConfig("curves per class must be positive".into()));
    }
    if !(spec.noise_sd >= 0.0) || !spec.noise_sd.is_finite() {
        return Err(Error::InvalidConfig("noise sd must be non-negative".into()));
    }
    let grid = TimeGrid::regular(0.0, 1.0, 21)?;
    let n = spec.curves_per_class;
    // (class, sub-class, source, count)
    let plan: Vec<(usize, usize, usize, usize)> = match spec.scheme {
        WaveformScheme::Merged => vec![(0, 0, 0, n.div_ceil(2)), (0, 1, 1, n / 2), (1, 0, 2, n)],
        WaveformScheme::Original => vec![(0, 0, 0, n), (1, 0, 1, n), (2, 0, 2, n)],
    };
    let num_classes = plan.iter().map(|p| p.0 + 1).max().unwrap_or(1);

    let mut rng = rng_from_seed(seed);
    let mut curves = Vec::new();
    let mut labels = Vec::new();
    let mut subclass = Vec::new();
    for &(class, sub, source, count) in &plan {
        let (a, b) = WAVEFORM_SOURCES[source];
        for _ in 0..count {
            let u: f64 = rng.random();
            let values = grid
                .points()
                .iter()
                .map(|&t| {
                    u * waveform_base(a, t)
                        + (1.0 - u) * waveform_base(b, t)
                        + spec.noise_sd * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            curves.push(Curve::new(values)?);
            labels.push(class);
            subclass.push(sub);
        }
    }
    let total = curves.len();
    Ok(SimulatedSet {
        set: LabeledCurveSet::new(grid, curves, labels, num_classes)?,
        truth: GroundTruth {
            subclass,
            changepoints: vec![Vec::new(); total],
        },
    })
}

/// Sidecar with columns `index,class,subclass,changepoints`; indices and
/// labels are 1-based, changepoints are `;`-separated 1-based regime starts.
pub fn render_ground_truth_csv<W: Write>(sim: &SimulatedSet, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "index,class,subclass,changepoints")?;
    for (i, (&y, &s)) in sim.set.labels().iter().zip(&sim.truth.subclass).enumerate() {
        let cps: Vec<String> = sim.truth.changepoints[i].iter().map(|c| (c + 1).to_string()).collect();
        writeln!(out, "{},{},{},{}", i + 1, y + 1, s + 1, cps.join(";"))?;
    }
    Ok(())
}

pub fn write_ground_truth_csv(sim: &SimulatedSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    render_ground_truth_csv(sim, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a sidecar written by `write_ground_truth_csv`, checking that rows
/// are numbered `1..n` in order.
pub fn read_ground_truth_csv(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth_csv(file, path)
}

pub fn parse_ground_truth_csv<R: Read>(reader: R, origin: &Path) -> Result<GroundTruth> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers().map_err(|e| Error::format(origin, 1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["index", "class", "subclass", "changepoints"] {
        return Err(Error::format(
            origin,
            1,
            "expected header index,class,subclass,changepoints",
        ));
    }
    let mut subclass = Vec::new();
    let mut changepoints = Vec::new();
    for (r, record) in csv.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| Error::format(origin, row, e.to_string()))?;
        let positive = |col: usize, field: &str| {
            field.parse::<usize>().ok().filter(|&v| v >= 1).ok_or_else(|| {
                Error::format(
                    origin,
                    row,
                    format!("column {}: {field:?} is not a positive integer", col + 1),
                )
            })
        };
        if positive(0, &record[0])? != r + 1 {
            return Err(Error::format(origin, row, format!("expected index {}", r + 1)));
        }
        positive(1, &record[1])?;
        subclass.push(positive(2, &record[2])? - 1);
        let cps = if record[3].is_empty() {
            Vec::new()
        } else {
            record[3]
                .split(';')
                .map(|f| positive(3, f).map(|c| c - 1))
                .collect::<Result<Vec<_>>>()?
        };
        changepoints.push(cps);
    }
    Ok(GroundTruth { subclass, changepoints })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_bases() {
        assert_eq!(waveform_base(1, 11.0), 6.0);
        assert_eq!(waveform_base(2, 15.0), 6.0);
        assert_eq!(waveform_base(3, 7.0), 6.0);
        assert_eq!(waveform_base(1, 5.0), 0.0);
        assert_eq!(waveform_base(2, 11.0), 2.0);
    }

    #[test]
    fn waveform_noise_free_pure_source() {
        let sim = generate_waveforms(
            &WaveformSpec {
                curves_per_class: 4,
                noise_sd: 0.0,
                scheme: WaveformScheme::Original,
            },
            3,
        )
        .unwrap();
        assert_eq!(sim.set.m(), 21);
        // Noise-free curves lie on the segment between the two sources.
        for (curve, &y) in sim.set.curves().iter().zip(sim.set.labels()) {
            let (a, b) = WAVEFORM_SOURCES[y];
            let fa: Vec<f64> = (0..21).map(|t| waveform_base(a, t as f64)).collect();
            let fb: Vec<f64> = (0..21).map(|t| waveform_base(b, t as f64)).collect();
            let j = if a == 1 { 11 } else { 15 };
            let u = (curve.values()[j] - fb[j]) / (fa[j] - fb[j]);
            for t in 0..21 {
                let expected = u * fa[t] + (1.0 - u) * fb[t];
                assert!((curve.values()[t] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn waveform_merged_layout() {
        let sim = generate_waveforms(
            &WaveformSpec {
                curves_per_class: 5,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(sim.set.class_counts(), vec![5, 5]);
        assert_eq!(sim.subclass_labels(0), vec![0, 0, 0, 1, 1]);
        assert_eq!(sim.subclass_labels(1), vec![0; 5]);
    }

    #[test]
    fn default_fixture_shape() {
        let sim = generate_piecewise(&PiecewiseSpec::default_fixture(), 0).unwrap();
        assert_eq!(sim.set.len(), 200);
        assert_eq!(sim.set.m(), 200);
        assert_eq!(sim.set.class_counts(), vec![150, 50]);
        assert_eq!(sim.truth.regime_labels(0, 200)[59], 0);
        assert_eq!(sim.truth.regime_labels(0, 200)[60], 1);
        assert_eq!(sim.truth.regime_labels(0, 200)[199], 2);
    }

    #[test]
    fn noise_free_curves_are_exact_steps() {
        let spec = PiecewiseSpec::default_fixture().with_counts(2, 0.0);
        let sim = generate_piecewise(&spec, 9).unwrap();
        for (i, curve) in sim.set.curves().iter().enumerate() {
            let sub = &spec.subclasses[i / 2];
            for seg in &sub.segments {
                assert!(curve.values()[seg.start..seg.end]
                    .iter()
                    .all(|&v| v == seg.coefficients[0]));
            }
        }
    }

    #[test]
    fn rejects_gapped_segments() {
        let mut spec = PiecewiseSpec::default_fixture();
        spec.subclasses[0].segments[1].start += 1;
        assert!(matches!(generate_piecewise(&spec, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn sidecar_is_one_based() {
        let spec = PiecewiseSpec::default_fixture().with_counts(1, 0.1);
        let sim = generate_piecewise(&spec, 0).unwrap();
        let mut out = Vec::new();
        render_ground_truth_csv(&sim, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,class,subclass,changepoints");
        assert_eq!(lines[1], "1,1,1,61;131");
        assert_eq!(lines[4], "4,2,1,61;135");
        let back = parse_ground_truth_csv(text.as_bytes(), Path::new("truth.csv")).unwrap();
        assert_eq!(back, sim.truth);
        let waves = generate_waveforms(
            &WaveformSpec {
                curves_per_class: 3,
                ..WaveformSpec::default()
            },
            1,
        )
        .unwrap();
        let mut out = Vec::new();
        render_ground_truth_csv(&waves, &mut out).unwrap();
        assert_eq!(
            parse_ground_truth_csv(out.as_slice(), Path::new("w.csv")).unwrap(),
            waves.truth
        );
        assert!(
            parse_ground_truth_csv("index,class,subclass,changepoints\n2,1,1,\n".as_bytes(), Path::new("x")).is_err()
        );
    }
}
