//! Class prototypes, the cross-session registry and nearest-prototype
//! classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::numerics::{euclidean_distance, Tensor2};

/// Sorted distinct labels and, for each, the row indices carrying it.
pub fn class_groups(labels: &[usize]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    by_class.into_iter().unzip()
}

/// Mean feature vector of one class and the number of samples behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMean {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Class-wise means of already-extracted feature rows.
pub fn prototypes_from_features(features: &Tensor2, labels: &[usize]) -> Result<BTreeMap<usize, ClassMean>> {
    if labels.len() != features.rows() {
        return Err(Error::LengthMismatch {
            left: features.rows(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("no samples to build prototypes from".into()));
    }
    let (classes, groups) = class_groups(labels);
    let mut out = BTreeMap::new();
    for (class, members) in classes.into_iter().zip(groups) {
        let mut mean = vec![0.0; features.cols()];
        for &m in &members {
            for (acc, v) in mean.iter_mut().zip(features.row(m)) {
                *acc += v;
            }
        }
        let n = members.len() as f64;
        mean.iter_mut().for_each(|v| *v /= n);
        out.insert(
            class,
            ClassMean {
                mean,
                count: members.len(),
            },
        );
    }
    Ok(out)
}

/// Extracts features with `store` and averages them per class.
pub fn compute_prototypes(
    store: &ParameterStore,
    batch: &Tensor2,
    labels: &[usize],
) -> Result<BTreeMap<usize, ClassMean>> {
    if batch.rows() == 0 {
        return Err(Error::Empty("no samples to build prototypes from".into()));
    }
    let features = store.extract_features(batch)?;
    prototypes_from_features(&features, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub prototype: Vec<f64>,
    pub session: usize,
    pub count: usize,
}

/// Every prototype registered so far, keyed by label. Entries are never
/// removed or rewritten.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRegistry {
    entries: BTreeMap<usize, RegistryEntry>,
}

impl PrototypeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.prototype.len())
    }

    pub fn get(&self, label: usize) -> Option<&RegistryEntry> {
        self.entries.get(&label)
    }

    pub fn contains(&self, label: usize) -> bool {
        self.entries.contains_key(&label)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &RegistryEntry)> + '_ {
        self.entries.iter().map(|(&l, e)| (l, e))
    }

    /// Prototypes as matrix rows, in label order.
    pub fn matrix(&self) -> Tensor2 {
        let rows: Vec<&[f64]> = self.entries.values().map(|e| e.prototype.as_slice()).collect();
        if rows.is_empty() {
            return Tensor2::zeros(0, 0);
        }
        Tensor2::from_rows(&rows).expect("registry prototypes share one dimension")
    }

    /// Appends `protos` as session `session`. Fails without modifying the
    /// registry if any label is already present or dimensions disagree.
    pub fn register(&mut self, protos: BTreeMap<usize, ClassMean>, session: usize) -> Result<()> {
        let dim = self.dim();
        for (&label, p) in &protos {
            if self.entries.contains_key(&label) {
                return Err(Error::ProtocolViolation(format!(
                    "class {label} is already registered (label sets must be disjoint)"
                )));
            }
            if let Some(d) = dim.or_else(|| protos.values().next().map(|q| q.mean.len())) {
                if p.mean.len() != d {
                    return Err(Error::shape("register", d, p.mean.len()));
                }
            }
        }
        for (label, p) in protos {
            self.entries.insert(
                label,
                RegistryEntry {
                    prototype: p.mean,
                    session,
                    count: p.count,
                },
            );
        }
        Ok(())
    }

    /// Label of the nearest prototype; the smallest label wins exact ties.
    pub fn classify(&self, feature: &[f64]) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&label, e) in &self.entries {
            let d = euclidean_distance(feature, &e.prototype)?;
            // labels iterate ascending, so strict < keeps the smaller label on ties
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((label, d));
            }
        }
        best.map(|(l, _)| l)
            .ok_or_else(|| Error::Empty("classification against an empty registry".into()))
    }

    pub fn classify_batch(&self, features: &Tensor2) -> Result<Vec<usize>> {
        features.iter_rows().map(|f| self.classify(f)).collect()
    }

    /// CSV with one row per class: `label,session,count,p0,p1,...`.
    pub fn to_csv(&self) -> String {
        let dim = self.dim().unwrap_or(0);
        let mut out = String::from("label,session,count");
        for i in 0..dim {
            let _ = write!(out, ",p{i}");
        }
        out.push('\n');
        for (label, e) in self.iter() {
            let _ = write!(out, "{label},{},{}", e.session, e.count);
            for v in &e.prototype {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Fraction of test samples whose nearest prototype carries the true label.
pub fn evaluate_joint_accuracy(
    store: &ParameterStore,
    registry: &PrototypeRegistry,
    batch: &Tensor2,
    labels: &[usize],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("joint accuracy over an empty test set".into()));
    }
    if let Some(&missing) = labels.iter().find(|&&l| !registry.contains(l)) {
        return Err(Error::ProtocolViolation(format!(
            "test label {missing} has no registered prototype"
        )));
    }
    let features = store.extract_features(batch)?;
    let predicted = registry.classify_batch(&features)?;
    Ok(accuracy(&predicted, labels))
}

pub(crate) fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}
