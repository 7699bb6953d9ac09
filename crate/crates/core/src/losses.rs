//! Training objectives for the base session and the few-shot sessions.
//!
//! Each objective has a tape form (`*_on`) used for training and, where a
//! closed form is short, a plain scalar form used as a reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::SessionMask;
use crate::model::{ParameterStore, ROTATION_CLASSES};
use crate::numerics::{cosine_similarity, euclidean_distance, NodeId, Tape, Tensor2};
use crate::prototypes::class_groups;

/// Anchor/positive/negative row indices into a session's samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletBatch {
    triples: Vec<(usize, usize, usize)>,
}

impl TripletBatch {
    /// Validates `y[a] = y[p] ≠ y[n]` for every triple.
    pub fn new(triples: Vec<(usize, usize, usize)>, labels: &[usize]) -> Result<Self> {
        for &(a, p, n) in &triples {
            let y = |i: usize| {
                labels.get(i).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("triplet index {i} beyond {} samples", labels.len()))
                })
            };
            if y(a)? != y(p)? || y(a)? == y(n)? {
                return Err(Error::InvalidArgument(format!(
                    "triplet ({a},{p},{n}) violates y_a = y_p != y_n"
                )));
            }
        }
        Ok(Self { triples })
    }

    /// Every `(a, p, n)` with `a ≠ p`, `y[a] = y[p]`, `y[n] ≠ y[a]`.
    pub fn all_valid(labels: &[usize]) -> Self {
        let mut triples = Vec::new();
        for (a, &ya) in labels.iter().enumerate() {
            for (p, &yp) in labels.iter().enumerate() {
                if p == a || yp != ya {
                    continue;
                }
                for (n, &yn) in labels.iter().enumerate() {
                    if yn != ya {
                        triples.push((a, p, n));
                    }
                }
            }
        }
        Self { triples }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[(usize, usize, usize)] {
        &self.triples
    }
}

/// How per-triple losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Weights and switches of the few-shot session objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Multiplier on the L1 anchor term.
    pub lambda: f64,
    /// Whether the prototype cosine term enters the objective.
    pub cosine_loss: bool,
    pub triplet_margin: f64,
    pub triplet_reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            cosine_loss: true,
            triplet_margin: 0.0,
            triplet_reduction: Reduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.triplet_margin >= 0.0 && self.triplet_margin.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "triplet margin must be >= 0, got {}",
                self.triplet_margin
            )));
        }
        Ok(())
    }
}

/// Cross-entropy of the classifier head on extractor features.
pub fn base_loss_on(
    tape: &mut Tape,
    store: &ParameterStore,
    batch: &Tensor2,
    labels: &[usize],
) -> Result<NodeId> {
    let x = tape.input(batch.clone());
    let f = store.extract_features_on(tape, x)?;
    let logits = store.classify_logits_on(tape, f)?;
    tape.cross_entropy(logits, labels)
}

pub fn base_loss(store: &ParameterStore, batch: &Tensor2, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let root = base_loss_on(&mut tape, store, batch, labels)?;
    tape.value(root).item()
}

/// Classification cross-entropy plus rotation-prediction cross-entropy.
pub fn base_loss_with_ss_on(
    tape: &mut Tape,
    store: &ParameterStore,
    batch: &Tensor2,
    labels: &[usize],
    rotated: &Tensor2,
    rotation_labels: &[usize],
) -> Result<NodeId> {
    if let Some(&bad) = rotation_labels.iter().find(|&&r| r >= ROTATION_CLASSES) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: ROTATION_CLASSES,
        });
    }
    let cls = base_loss_on(tape, store, batch, labels)?;
    let xr = tape.input(rotated.clone());
    let fr = store.extract_features_on(tape, xr)?;
    let rl = store.rotation_logits_on(tape, fr)?;
    let rot = tape.cross_entropy(rl, rotation_labels)?;
    tape.add(cls, rot)
}

pub fn base_loss_with_ss(
    store: &ParameterStore,
    batch: &Tensor2,
    labels: &[usize],
    rotated: &Tensor2,
    rotation_labels: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let root = base_loss_with_ss_on(&mut tape, store, batch, labels, rotated, rotation_labels)?;
    tape.value(root).item()
}

/// `max(d(fa, fp) − d(fa, fn) + margin, 0)`.
pub fn triplet_loss(fa: &[f64], fp: &[f64], fneg: &[f64], margin: f64) -> Result<f64> {
    let dap = euclidean_distance(fa, fp)?;
    let dan = euclidean_distance(fa, fneg)?;
    Ok((dap - dan + margin).max(0.0))
}

/// Reduced triplet hinge over rows of `features`.
pub fn triplet_loss_on(
    tape: &mut Tape,
    features: NodeId,
    triplets: &TripletBatch,
    margin: f64,
    reduction: Reduction,
) -> Result<NodeId> {
    let ap = triplets.triples.iter().map(|&(a, p, _)| (a, p)).collect();
    let an = triplets.triples.iter().map(|&(a, _, n)| (a, n)).collect();
    let dap = tape.pair_distance(features, features, ap)?;
    let dan = tape.pair_distance(features, features, an)?;
    let diff = tape.sub(dap, dan)?;
    let shifted = if margin != 0.0 {
        tape.add_scalar(diff, margin)
    } else {
        diff
    };
    let hinge = tape.relu(shifted);
    Ok(match reduction {
        Reduction::Mean => tape.mean(hinge),
        Reduction::Sum => tape.sum(hinge),
    })
}

/// `Σ |current_i − previous_i|`.
pub fn l1_regularization(current: &[f64], previous: &[f64]) -> Result<f64> {
    if current.len() != previous.len() {
        return Err(Error::LengthMismatch {
            left: current.len(),
            right: previous.len(),
        });
    }
    Ok(current.iter().zip(previous).map(|(c, p)| (c - p).abs()).sum())
}

/// L1 distance of the snapshot's parameters from their snapshot values.
pub fn l1_regularization_on(
    tape: &mut Tape,
    store: &ParameterStore,
    snapshot: &crate::model::Snapshot,
) -> Result<NodeId> {
    let mut terms = Vec::new();
    let mut entries: Vec<(usize, f64)> = Vec::new();
    let mut current_key = None;
    // snapshot entries are sorted, so each key forms one contiguous run
    for (addr, prev) in snapshot.iter() {
        store.get(addr)?;
        if current_key != Some(addr.key()) {
            if let Some(key) = current_key.take() {
                let node = store.param_node(tape, key)?;
                terms.push(tape.l1_deviation(node, std::mem::take(&mut entries))?);
            }
            current_key = Some(addr.key());
        }
        entries.push((addr.offset, prev));
    }
    if let Some(key) = current_key {
        let node = store.param_node(tape, key)?;
        terms.push(tape.l1_deviation(node, entries)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Ok(tape.input(Tensor2::scalar(0.0))),
    };
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// `Σ_i Σ_j cos(new[i], prev[j])`; zero when either side is empty.
pub fn prototype_cosine_loss(new_protos: &Tensor2, prev_protos: &Tensor2) -> Result<f64> {
    if new_protos.rows() == 0 || prev_protos.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for a in new_protos.iter_rows() {
        for b in prev_protos.iter_rows() {
            total += cosine_similarity(a, b)?;
        }
    }
    Ok(total)
}

pub fn prototype_cosine_loss_on(
    tape: &mut Tape,
    new_protos: NodeId,
    prev_protos: &Tensor2,
) -> Result<NodeId> {
    let n_new = tape.value(new_protos).rows();
    if n_new == 0 || prev_protos.rows() == 0 {
        return Ok(tape.input(Tensor2::scalar(0.0)));
    }
    let prev = tape.input(prev_protos.clone());
    let pairs = (0..n_new)
        .flat_map(|i| (0..prev_protos.rows()).map(move |j| (i, j)))
        .collect();
    let cos = tape.pair_cosine(new_protos, prev, pairs)?;
    Ok(tape.sum(cos))
}

/// Node ids and values of each term of a session objective.
#[derive(Debug, Clone, Copy)]
pub struct SessionLoss {
    pub total: NodeId,
    /// Triplet plus (when enabled) cosine term, without the L1 anchor.
    pub smooth: NodeId,
    pub triplet: f64,
    pub cosine: f64,
    pub regularization: f64,
}

impl SessionLoss {
    pub fn value(&self, tape: &Tape) -> f64 {
        tape.value(self.total).data()[0]
    }
}

/// Few-shot session objective: triplet + prototype cosine + λ · L1 anchor.
///
/// New-class prototypes are recomputed from the live extractor so the
/// cosine term has a gradient path; `prev_protos` are constants.
#[allow(clippy::too_many_arguments)]
pub fn session_loss_on(
    tape: &mut Tape,
    store: &ParameterStore,
    batch: &Tensor2,
    labels: &[usize],
    triplets: &TripletBatch,
    mask: &SessionMask,
    prev_protos: &Tensor2,
    weights: &LossWeights,
) -> Result<SessionLoss> {
    weights.validate()?;
    if batch.rows() == 0 {
        return Err(Error::Empty("session batch".into()));
    }
    let x = tape.input(batch.clone());
    let features = store.extract_features_on(tape, x)?;

    let tl = triplet_loss_on(
        tape,
        features,
        triplets,
        weights.triplet_margin,
        weights.triplet_reduction,
    )?;
    let (_, groups) = class_groups(labels);
    let protos = tape.group_mean(features, groups)?;
    let cl = prototype_cosine_loss_on(tape, protos, prev_protos)?;
    let rl = l1_regularization_on(tape, store, mask.snapshot())?;

    let smooth = if weights.cosine_loss {
        tape.add(tl, cl)?
    } else {
        tl
    };
    let weighted_rl = tape.scale(rl, weights.lambda);
    let total = tape.add(smooth, weighted_rl)?;
    Ok(SessionLoss {
        total,
        smooth,
        triplet: tape.value(tl).data()[0],
        cosine: tape.value(cl).data()[0],
        regularization: tape.value(rl).data()[0],
    })
}
