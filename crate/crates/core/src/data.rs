//! Datasets: seeded Gaussian clusters, delimited-file ingestion, grid rotation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ROTATION_CLASSES;
use crate::numerics::Tensor2;

/// Feature rows with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub features: Tensor2,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(features: Tensor2, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                left: features.rows(),
                right: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Tensor2::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows whose label is in `classes`, in original order.
    pub fn of_classes(&self, classes: &BTreeSet<usize>) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.select(&idx)
    }

    /// Concatenation of `parts`, which must share one width.
    pub fn concat(parts: &[&Samples]) -> Result<Self> {
        let dim = parts.first().map_or(0, |p| p.dim());
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim() != dim {
                return Err(Error::shape("Samples::concat", dim, p.dim()));
            }
            rows.extend(p.features.iter_rows());
            labels.extend_from_slice(&p.labels);
        }
        let features = if rows.is_empty() {
            Tensor2::zeros(0, dim)
        } else {
            Tensor2::from_rows(&rows)?
        };
        Ok(Self { features, labels })
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }
}

/// Train and test partitions over labels `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub test: Samples,
    pub num_classes: usize,
    /// Side length when each row is a row-major square grid.
    pub grid_side: Option<usize>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    /// Checks equal widths, contiguous labels and at least one train sample per class.
    pub fn validate(&self) -> Result<()> {
        if self.train.dim() != self.test.dim() {
            return Err(Error::shape("Dataset", self.train.dim(), self.test.dim()));
        }
        if let Some(side) = self.grid_side {
            if side * side != self.dim() {
                return Err(Error::InvalidArgument(format!(
                    "grid side {side} does not match feature width {}",
                    self.dim()
                )));
            }
        }
        let counts = self.train.class_counts();
        for c in 0..self.num_classes {
            if !counts.contains_key(&c) {
                return Err(Error::InvalidArgument(format!("class {c} has no training samples")));
            }
        }
        if let Some(&bad) = self
            .train
            .labels
            .iter()
            .chain(&self.test.labels)
            .find(|&&l| l >= self.num_classes)
        {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.num_classes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Feature width; must equal `grid_side²` when a grid side is set.
    pub dim: usize,
    #[serde(default)]
    pub grid_side: Option<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of class centers around the origin.
    pub center_scale: f64,
    /// Within-class standard deviation σ.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            dim: 16,
            grid_side: None,
            train_per_class: 100,
            test_per_class: 50,
            center_scale: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes == 0 || self.dim == 0 {
            return bad("synthetic data needs >= 1 class and dim >= 1".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad(format!(
                "per-class counts must be >= 1 (train {}, test {})",
                self.train_per_class, self.test_per_class
            ));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be > 0, got {}", self.noise));
        }
        if !(self.center_scale >= 0.0 && self.center_scale.is_finite()) {
            return bad(format!("center scale must be >= 0, got {}", self.center_scale));
        }
        if let Some(side) = self.grid_side {
            if side * side != self.dim {
                return bad(format!("grid side {side} needs dim {}, got {}", side * side, self.dim));
            }
        }
        Ok(())
    }
}

/// Gaussian clusters around seeded random centers.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center_dist = Normal::new(0.0, spec.center_scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();

    let draw = |count: usize, rng: &mut ChaCha8Rng| {
        let mut data = Vec::with_capacity(count * spec.num_classes * spec.dim);
        let mut labels = Vec::with_capacity(count * spec.num_classes);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..count {
                data.extend(center.iter().map(|m| m + noise.sample(rng)));
                labels.push(c);
            }
        }
        let rows = labels.len();
        Samples {
            features: Tensor2::new(rows, spec.dim, data).expect("sized by construction"),
            labels,
        }
    };
    let train = draw(spec.train_per_class, &mut rng);
    let test = draw(spec.test_per_class, &mut rng);
    Ok(Dataset {
        train,
        test,
        num_classes: spec.num_classes,
        grid_side: spec.grid_side,
    })
}

/// How to read a delimited file into a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelimitedFormat {
    /// The last this-many rows of each class form the test partition.
    pub test_per_class: usize,
    #[serde(default)]
    pub grid_side: Option<usize>,
}

/// Reads `label,f0,f1,...` rows (UTF-8, comma separated, optional header).
///
/// Labels that are not exactly `0..n` are remapped in sorted order, with a warning.
pub fn load_delimited(path: &Path, format: &DelimitedFormat) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_delimited(&text, path, format)
}

fn parse_delimited(text: &str, path: &Path, format: &DelimitedFormat) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut raw_labels: Vec<i64> = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let label_tok = record.get(0).unwrap_or("");
        let label = label_tok.parse::<i64>();
        if first {
            first = false;
            if label.is_err() && label_tok.parse::<f64>().is_err() {
                // header
                continue;
            }
        }
        let label = label.map_err(|_| parse_err(line, format!("label {label_tok:?} is not an integer")))?;
        let n_features = record.len() - 1;
        match width {
            None => {
                if n_features == 0 {
                    return Err(parse_err(line, "row has a label but no features".into()));
                }
                width = Some(n_features);
            }
            Some(w) if w != n_features => {
                return Err(parse_err(
                    line,
                    format!("expected {} columns, found {}", w + 1, record.len()),
                ));
            }
            Some(_) => {}
        }
        for tok in record.iter().skip(1) {
            let v = tok
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("feature {tok:?} is not numeric")))?;
            data.push(v);
        }
        raw_labels.push(label);
    }
    let Some(width) = width else {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    };

    let distinct: BTreeSet<i64> = raw_labels.iter().copied().collect();
    let contiguous = distinct.iter().copied().eq(0..distinct.len() as i64);
    if !contiguous {
        log::warn!(
            "{}: labels are not contiguous from 0; remapping {} classes in sorted order",
            path.display(),
            distinct.len()
        );
    }
    let remap: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|l| remap[l]).collect();
    let all = Samples::new(Tensor2::new(labels.len(), width, data)?, labels)?;

    split_tail(&all, distinct.len(), format, path)
}

fn split_tail(all: &Samples, num_classes: usize, format: &DelimitedFormat, path: &Path) -> Result<Dataset> {
    if format.test_per_class == 0 {
        return Err(Error::InvalidArgument("test_per_class must be >= 1".into()));
    }
    let mut seen: Vec<usize> = vec![0; num_classes];
    let counts = all.class_counts();
    for (&c, &n) in &counts {
        if n <= format.test_per_class {
            return Err(Error::InvalidArgument(format!(
                "{}: class {c} has {n} rows, needs more than {} to leave a training sample",
                path.display(),
                format.test_per_class
            )));
        }
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (i, &l) in all.labels.iter().enumerate() {
        seen[l] += 1;
        if seen[l] > counts[&l] - format.test_per_class {
            test_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    let ds = Dataset {
        train: all.select(&train_idx),
        test: all.select(&test_idx),
        num_classes,
        grid_side: format.grid_side,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes train rows then test rows with a header, so that reading back with
/// the same per-class test count reproduces both partitions exactly.
pub fn write_delimited(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_delimited(dataset)).map_err(|e| Error::io(path, e))
}

pub fn to_delimited(dataset: &Dataset) -> String {
    let mut out = String::from("label");
    for i in 0..dataset.dim() {
        let _ = write!(out, ",x{i}");
    }
    out.push('\n');
    for part in [&dataset.train, &dataset.test] {
        for (row, label) in part.features.iter_rows().zip(&part.labels) {
            let _ = write!(out, "{label}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Rotates a row-major square grid by `quarter_turns × 90°` counter-clockwise.
pub fn rotate_grid(grid: &[f64], quarter_turns: usize) -> Result<Vec<f64>> {
    if quarter_turns >= ROTATION_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "quarter turns must be in 0..4, got {quarter_turns}"
        )));
    }
    let side = (grid.len() as f64).sqrt().round() as usize;
    if side * side != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "grid of {} values is not square",
            grid.len()
        )));
    }
    let mut cur = grid.to_vec();
    for _ in 0..quarter_turns {
        let mut next = vec![0.0; cur.len()];
        for i in 0..side {
            for j in 0..side {
                next[i * side + j] = cur[j * side + (side - 1 - i)];
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on `samples`; constant features get unit scale.
    pub fn fit(samples: &Samples) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("cannot standardize on zero samples".into()));
        }
        let n = samples.len() as f64;
        let dim = samples.dim();
        let mut mean = vec![0.0; dim];
        for row in samples.features.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in samples.features.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, samples: &mut Samples) {
        for r in 0..samples.len() {
            for ((v, m), s) in samples.features.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}
