//! Curve containers and the curve CSV format.
//!
//! A curve file is plain comma-separated UTF-8 with no header. The first row is
//! the shared time grid `t_1..t_m`. Every following row is one curve; when the
//! file is labeled its first column is the class label, counted from 1.
//! Labels are stored 0-based in memory.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered sampling instants shared by every curve of a data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Validation(format!(
                "time grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(j) = points.iter().position(|t| !t.is_finite()) {
            return Err(Error::Validation(format!("time grid point {} is not finite", j + 1)));
        }
        if let Some(j) = points.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "time grid is not strictly increasing at points {} and {} ({} >= {})",
                j + 1,
                j + 2,
                points[j],
                points[j + 1]
            )));
        }
        Ok(Self { points })
    }

    /// Evenly spaced grid `start, start + step, ...` with `m` points.
    pub fn regular(start: f64, step: f64, m: usize) -> Result<Self> {
        Self::new((0..m).map(|j| start + step * j as f64).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Maps a raw time onto `[0, 1]` relative to the grid's end points.
    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.start()) / (self.end() - self.start())
    }

    /// The grid mapped onto `[0, 1]`; every basis and logistic link works on these.
    pub fn normalized(&self) -> Vec<f64> {
        self.points.iter().map(|&t| self.normalize(t)).collect()
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.points
    }
}

/// One sampled curve; its length matches the grid it is used with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Curve {
    values: Vec<f64>,
}

impl Curve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "curve value at point {} is not finite",
                j + 1
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl From<Curve> for Vec<f64> {
    fn from(curve: Curve) -> Self {
        curve.values
    }
}

/// Unlabeled curves on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    grid: TimeGrid,
    curves: Vec<Curve>,
}

impl CurveSet {
    pub fn new(grid: TimeGrid, curves: Vec<Curve>) -> Result<Self> {
        check_lengths(&grid, &curves)?;
        Ok(Self { grid, curves })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn curves(&self) -> &[Curve] {
        &self.curves
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    /// Number of samples per curve.
    pub fn m(&self) -> usize {
        self.grid.len()
    }

    pub fn curve(&self, i: usize) -> &Curve {
        &self.curves[i]
    }

    /// Population variance of every sample of every curve.
    pub fn pooled_variance(&self) -> f64 {
        pooled_variance(&self.curves)
    }

    pub fn subset(&self, indices: &[usize]) -> CurveSet {
        CurveSet {
            grid: self.grid.clone(),
            curves: indices.iter().map(|&i| self.curves[i].clone()).collect(),
        }
    }
}

/// Curves with class labels `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCurveSet {
    grid: TimeGrid,
    curves: Vec<Curve>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledCurveSet {
    pub fn new(grid: TimeGrid, curves: Vec<Curve>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if curves.is_empty() {
            return Err(Error::Validation("curve set is empty".into()));
        }
        if curves.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} curves but {} labels",
                curves.len(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Validation("number of classes must be at least 1".into()));
        }
        if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::Validation(format!(
                "curve {} has label {} outside 1..={}",
                i + 1,
                labels[i] + 1,
                num_classes
            )));
        }
        check_lengths(&grid, &curves)?;
        Ok(Self {
            grid,
            curves,
            labels,
            num_classes,
        })
    }

    /// Wraps an unlabeled set as a single class.
    pub fn single_class(set: CurveSet) -> Result<Self> {
        let n = set.len();
        Self::new(set.grid, set.curves, vec![0; n], 1)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn curves(&self) -> &[Curve] {
        &self.curves
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn m(&self) -> usize {
        self.grid.len()
    }

    /// Per-class cardinalities `n_g`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn unlabeled(&self) -> CurveSet {
        CurveSet {
            grid: self.grid.clone(),
            curves: self.curves.clone(),
        }
    }

    /// Restriction to `indices`, keeping the class count.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledCurveSet> {
        LabeledCurveSet::new(
            self.grid.clone(),
            indices.iter().map(|&i| self.curves[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }
}

fn check_lengths(grid: &TimeGrid, curves: &[Curve]) -> Result<()> {
    if let Some(i) = curves.iter().position(|c| c.len() != grid.len()) {
        return Err(Error::Validation(format!(
            "curve {} has {} values but the grid has {} points",
            i + 1,
            curves[i].len(),
            grid.len()
        )));
    }
    Ok(())
}

pub(crate) fn pooled_variance(curves: &[Curve]) -> f64 {
    let count = curves.iter().map(Curve::len).sum::<usize>();
    if count == 0 {
        return 0.0;
    }
    let mean = curves.iter().flat_map(|c| c.values.iter()).sum::<f64>() / count as f64;
    curves
        .iter()
        .flat_map(|c| c.values.iter())
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / count as f64
}

/// Groups curves by class, one entry per class `0..num_classes` (possibly empty),
/// preserving the input order inside each class.
pub fn split_by_class(set: &LabeledCurveSet) -> Vec<(usize, CurveSet)> {
    let mut groups: Vec<Vec<Curve>> = vec![Vec::new(); set.num_classes];
    for (curve, &y) in set.curves.iter().zip(&set.labels) {
        groups[y].push(curve.clone());
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(g, curves)| {
            (
                g,
                CurveSet {
                    grid: set.grid.clone(),
                    curves,
                },
            )
        })
        .collect()
}

/// Shortest decimal rendering that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn read_curves_csv(path: impl AsRef<Path>, has_labels: bool) -> Result<LabeledCurveSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_curves_csv(file, path, has_labels)
}

/// Parses the curve format from any reader; `origin` only labels error messages.
pub fn parse_curves_csv<R: Read>(reader: R, origin: &Path, has_labels: bool) -> Result<LabeledCurveSet> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut grid: Option<TimeGrid> = None;
    let mut curves = Vec::new();
    let mut labels = Vec::new();

    for (r, record) in csv.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::format(origin, row, e.to_string()))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parse = |col: usize, field: &str| -> Result<f64> {
            field
                .parse::<f64>()
                .map_err(|_| Error::format(origin, row, format!("column {}: cannot parse {field:?}", col + 1)))
        };
        match &grid {
            None => {
                let points = record
                    .iter()
                    .enumerate()
                    .map(|(c, f)| parse(c, f))
                    .collect::<Result<Vec<_>>>()?;
                grid = Some(TimeGrid::new(points).map_err(|e| match e {
                    Error::Validation(msg) => Error::Validation(format!("row 1: {msg}")),
                    other => other,
                })?);
            }
            Some(g) => {
                let expected = g.len() + usize::from(has_labels);
                if record.len() != expected {
                    return Err(Error::format(
                        origin,
                        row,
                        format!("expected {expected} columns, found {}", record.len()),
                    ));
                }
                let mut fields = record.iter().enumerate();
                if has_labels {
                    let (_, field) = fields.next().expect("non-empty record");
                    let label = field.parse::<usize>().ok().filter(|&y| y >= 1).ok_or_else(|| {
                        Error::format(origin, row, format!("label {field:?} is not a positive integer"))
                    })?;
                    labels.push(label - 1);
                } else {
                    labels.push(0);
                }
                let values = fields
                    .map(|(c, f)| {
                        let v = parse(c, f)?;
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(Error::Validation(format!(
                                "non-finite value at row {row}, column {}",
                                c + 1
                            )))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                curves.push(Curve { values });
            }
        }
    }

    let grid = grid.ok_or_else(|| Error::format(origin, 1, "missing time grid row"))?;
    let num_classes = labels.iter().max().map_or(1, |&y| y + 1);
    LabeledCurveSet::new(grid, curves, labels, num_classes)
}

pub fn write_curves_csv(set: &LabeledCurveSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    render_curves_csv(set, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes the labeled form of the curve format (labels 1-based).
pub fn render_curves_csv<W: Write>(set: &LabeledCurveSet, out: &mut W) -> std::io::Result<()> {
    let grid: Vec<String> = set.grid.points.iter().map(|&t| fmt_f64(t)).collect();
    writeln!(out, "{}", grid.join(","))?;
    for (curve, &y) in set.curves.iter().zip(&set.labels) {
        write!(out, "{}", y + 1)?;
        for &v in &curve.values {
            write!(out, ",{}", fmt_f64(v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}
