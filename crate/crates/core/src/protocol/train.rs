use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::SessionMetrics;
use super::schedule::SessionData;
use crate::data::{rotate_grid, Samples};
use crate::error::{Error, Result};
use crate::losses::{base_loss_on, base_loss_with_ss_on, session_loss_on, LossWeights, Reduction, TripletBatch};
use crate::masking::{apply_full_update, apply_masked_update, select_session_trainable, SessionMask};
use crate::model::{DenseParams, ParamKey, ParameterStore, ROTATION_CLASSES};
use crate::numerics::{cosine_similarity, Gradients, Tape, Tensor2};
use crate::prototypes::{accuracy, compute_prototypes, PrototypeRegistry};

/// RNG streams derived from the run seed, one per consumer.
pub(crate) mod stream {
    pub const BASE_SHUFFLE: u64 = 1;
    pub const ROTATIONS: u64 = 2;
    pub const SESSION_HEAD: u64 = 100;
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_epochs: usize,
    pub base_lr: f64,
    /// Epochs (0-based) at which the base learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Full-batch steps per few-shot session.
    pub session_epochs: usize,
    pub session_lr: f64,
    /// Fraction p of each extractor layer made session-trainable.
    pub fraction: f64,
    pub lambda: f64,
    pub cosine_loss: bool,
    pub triplet_margin: f64,
    pub triplet_reduction: Reduction,
    pub anchor_update: AnchorUpdate,
}

/// How the L1 anchor term enters session updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorUpdate {
    /// Plain gradient step on the whole objective, using the sign subgradient.
    #[default]
    Subgradient,
    /// Gradient step on the other terms, then soft-thresholding of each
    /// trainable weight toward its snapshot by `lr * lambda`.
    Proximal,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_epochs: 50,
            base_lr: 0.1,
            lr_milestones: vec![30, 40],
            lr_decay: 0.1,
            batch_size: 128,
            momentum: 0.0,
            weight_decay: 0.0,
            session_epochs: 30,
            session_lr: 1e-4,
            fraction: 0.1,
            lambda: 5.0,
            cosine_loss: true,
            triplet_margin: 0.0,
            triplet_reduction: Reduction::Mean,
            anchor_update: AnchorUpdate::Subgradient,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("train.base_lr must be > 0");
        }
        if !(self.session_lr > 0.0 && self.session_lr.is_finite()) {
            return bad("train.session_lr must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad("train.lr_decay must be > 0");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("train.weight_decay must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return bad("train.fraction must be in [0, 1]");
        }
        if self.lr_milestones.windows(2).any(|w| w[0] > w[1]) {
            return bad("train.lr_milestones must be ascending");
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            cosine_loss: self.cosine_loss,
            triplet_margin: self.triplet_margin,
            triplet_reduction: self.triplet_reduction,
        }
    }

    /// Base learning rate in effect during 0-based `epoch`.
    pub fn base_lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.lr_decay.powi(passed as i32)
    }
}

/// Stochastic gradient descent with optional momentum and L2 weight decay.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<ParamKey, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Self::new(config.momentum, config.weight_decay)
    }

    /// One update. With a mask only its trainable addresses are written.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &Gradients,
        lr: f64,
        mask: Option<&SessionMask>,
    ) -> Result<()> {
        let direction = if self.momentum == 0.0 && self.weight_decay == 0.0 {
            None
        } else {
            let mut dir = Gradients::new();
            for (key, g) in grads.iter() {
                let w = store
                    .tensor(key)
                    .ok_or_else(|| Error::InvalidAddress(format!("{key:?} is not in the store")))?;
                let mut d: Vec<f64> = g.iter().zip(w).map(|(g, w)| g + self.weight_decay * w).collect();
                if self.momentum > 0.0 {
                    let v = self.velocity.entry(key).or_insert_with(|| vec![0.0; d.len()]);
                    for (vi, di) in v.iter_mut().zip(d.iter_mut()) {
                        *vi = self.momentum * *vi + *di;
                        *di = *vi;
                    }
                }
                dir.insert(key, d);
            }
            Some(dir)
        };
        let grads = direction.as_ref().unwrap_or(grads);
        match mask {
            Some(m) => apply_masked_update(store, m, grads, lr),
            None => apply_full_update(store, grads, lr),
        }
    }
}

/// Maps arbitrary labels onto `0..n` in ascending order.
pub(crate) fn dense_labels(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let local = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label collected above"))
        .collect();
    (classes, local)
}

fn check_session_data(data: &SessionData) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Empty(format!("session {} has no training data", data.session)));
    }
    Ok(())
}

fn check_head(store: &ParameterStore, classes: usize) -> Result<()> {
    if !store.has_classifier() {
        return Err(Error::AlreadyDiscarded);
    }
    if store.config().num_classes != classes {
        return Err(Error::shape("classifier head", classes, store.config().num_classes));
    }
    Ok(())
}

/// Mini-batch cross-entropy training of extractor and head under the base
/// schedule. Returns the mean loss of every epoch.
pub(crate) fn fit_classifier(
    store: &mut ParameterStore,
    samples: &Samples,
    local: &[usize],
    config: &TrainConfig,
    seed: u64,
    grid_side: Option<usize>,
) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle = seeded(seed, stream::BASE_SHUFFLE);
    let mut rotations = seeded(seed, stream::ROTATIONS);
    let mut sgd = Sgd::from_config(config);
    let mut trace = Vec::with_capacity(config.base_epochs);
    for epoch in 0..config.base_epochs {
        let lr = config.base_lr_at(epoch);
        order.shuffle(&mut shuffle);
        let quarter_turns: Option<Vec<usize>> = grid_side.map(|_| {
            (0..samples.len())
                .map(|_| rotations.random_range(0..ROTATION_CLASSES))
                .collect()
        });
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = samples.features.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| local[i]).collect();
            let mut tape = Tape::new();
            let root = match &quarter_turns {
                None => base_loss_on(&mut tape, store, &batch, &labels)?,
                Some(turns) => {
                    let rot_labels: Vec<usize> = chunk.iter().map(|&i| turns[i]).collect();
                    let rotated = rotate_rows(&batch, &rot_labels)?;
                    base_loss_with_ss_on(&mut tape, store, &batch, &labels, &rotated, &rot_labels)?
                }
            };
            total += tape.value(root).item()? * chunk.len() as f64;
            let grads = tape.backward(root)?;
            sgd.step(store, &grads, lr, None)?;
        }
        let mean = total / samples.len() as f64;
        log::debug!("base epoch {epoch}: lr {lr} loss {mean:.6}");
        trace.push(mean);
    }
    Ok(trace)
}

/// Rotates row `i` of `batch` (a flattened square grid) by `turns[i]` quarter turns.
pub fn rotate_rows(batch: &Tensor2, turns: &[usize]) -> Result<Tensor2> {
    if turns.len() != batch.rows() {
        return Err(Error::LengthMismatch {
            left: batch.rows(),
            right: turns.len(),
        });
    }
    let mut data = Vec::with_capacity(batch.data().len());
    for (row, &k) in batch.iter_rows().zip(turns) {
        data.extend(rotate_grid(row, k)?);
    }
    Tensor2::new(batch.rows(), batch.cols(), data)
}

fn register_session(
    store: &ParameterStore,
    registry: &mut PrototypeRegistry,
    data: &SessionData,
) -> Result<()> {
    let protos = compute_prototypes(store, &data.train.features, &data.train.labels)?;
    if let Some((label, _)) = protos.iter().find(|(_, p)| p.mean.iter().all(|&v| v == 0.0)) {
        log::warn!("class {label} has an all-zero prototype in session {}", data.session);
    }
    registry.register(protos, data.session)
}

/// Base session: trains all parameters with cross-entropy, discards Θ_C and
/// registers the base prototypes.
///
/// The store must carry a classifier head over exactly the classes of `data`.
/// Returns the per-epoch loss trace.
pub fn train_base(
    store: &mut ParameterStore,
    registry: &mut PrototypeRegistry,
    data: &SessionData,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    check_base_inputs(store, registry, data, config)?;
    let (_, local) = dense_labels(&data.train.labels);
    let trace = fit_classifier(store, &data.train, &local, config, seed, None)?;
    store.discard_classifier()?;
    register_session(store, registry, data)?;
    Ok(trace)
}

/// [`train_base`] with the rotation-prediction auxiliary loss.
///
/// Every sample is rotated by a fresh uniformly drawn quarter-turn count in
/// each epoch. The rotation head is kept for later inspection.
pub fn train_base_with_ss(
    store: &mut ParameterStore,
    registry: &mut PrototypeRegistry,
    data: &SessionData,
    grid_side: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    check_base_inputs(store, registry, data, config)?;
    if grid_side * grid_side != data.train.dim() {
        return Err(Error::InvalidArgument(format!(
            "inputs of dimension {} are not {grid_side}x{grid_side} grids",
            data.train.dim()
        )));
    }
    if !store.has_rotation_head() {
        return Err(Error::InvalidArgument("model has no rotation head".into()));
    }
    let (_, local) = dense_labels(&data.train.labels);
    let trace = fit_classifier(store, &data.train, &local, config, seed, Some(grid_side))?;
    store.discard_classifier()?;
    register_session(store, registry, data)?;
    Ok(trace)
}

fn check_base_inputs(
    store: &ParameterStore,
    registry: &PrototypeRegistry,
    data: &SessionData,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    if data.session != 1 {
        return Err(Error::ProtocolViolation(format!(
            "base training on session {}",
            data.session
        )));
    }
    if !registry.is_empty() {
        return Err(Error::ProtocolViolation("registry is not empty before the base session".into()));
    }
    check_session_data(data)?;
    check_head(store, data.classes.len())
}

/// Fraction of `samples` whose rotation the head recovers, over all four
/// quarter turns of every sample.
pub fn rotation_accuracy(store: &ParameterStore, samples: &Samples) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("rotation accuracy over no samples".into()));
    }
    let mut predicted = Vec::with_capacity(samples.len() * ROTATION_CLASSES);
    let mut truth = Vec::with_capacity(samples.len() * ROTATION_CLASSES);
    for k in 0..ROTATION_CLASSES {
        let turns = vec![k; samples.len()];
        let rotated = rotate_rows(&samples.features, &turns)?;
        let logits = store.rotation_logits(&store.extract_features(&rotated)?)?;
        predicted.extend(logits.iter_rows().map(argmax));
        truth.extend(turns);
    }
    Ok(accuracy(&predicted, &truth))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_incremental(registry: &PrototypeRegistry, data: &SessionData) -> Result<()> {
    if data.session < 2 {
        return Err(Error::ProtocolViolation(format!(
            "few-shot session index must be > 1, got {}",
            data.session
        )));
    }
    check_session_data(data)?;
    if registry.is_empty() {
        return Err(Error::ProtocolViolation("few-shot session before the base session".into()));
    }
    if let Some(c) = data.classes.iter().find(|&&c| registry.contains(c)) {
        return Err(Error::ProtocolViolation(format!(
            "class {c} of session {} was seen in an earlier session",
            data.session
        )));
    }
    Ok(())
}

/// Result of one few-shot session.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub mask: Option<SessionMask>,
    pub loss_trace: Vec<f64>,
    pub metrics: SessionMetrics,
}

/// FSLL session: selects P_ST, trains it on the session objective with
/// full-batch masked updates, then registers and evaluates.
pub fn run_session(
    store: &mut ParameterStore,
    registry: &mut PrototypeRegistry,
    data: &SessionData,
    test_pool: &Samples,
    base_classes: &BTreeSet<usize>,
    config: &TrainConfig,
) -> Result<SessionOutcome> {
    config.validate()?;
    check_incremental(registry, data)?;
    let weights = config.loss_weights();
    let mask = select_session_trainable(store, config.fraction, data.session)?;
    let triplets = TripletBatch::all_valid(&data.train.labels);
    let previous = registry.matrix();
    let mut sgd = Sgd::from_config(config);
    let mut trace = Vec::with_capacity(config.session_epochs);
    for _ in 0..config.session_epochs {
        let mut tape = Tape::new();
        let loss = session_loss_on(
            &mut tape,
            store,
            &data.train.features,
            &data.train.labels,
            &triplets,
            &mask,
            &previous,
            &weights,
        )?;
        trace.push(loss.value(&tape));
        match config.anchor_update {
            AnchorUpdate::Subgradient => {
                let grads = tape.backward(loss.total)?;
                sgd.step(store, &grads, config.session_lr, Some(&mask))?;
            }
            AnchorUpdate::Proximal => {
                let grads = tape.backward(loss.smooth)?;
                sgd.step(store, &grads, config.session_lr, Some(&mask))?;
                shrink_toward_snapshot(store, &mask, config.session_lr * weights.lambda)?;
            }
        }
    }
    let before: BTreeSet<usize> = registry.labels().collect();
    register_session(store, registry, data)?;
    let mut metrics = evaluate_session(store, registry, test_pool, base_classes, data.session, &before)?;
    metrics.trainable = Some(mask.num_trainable());
    metrics.loss_trace.clone_from(&trace);
    Ok(SessionOutcome {
        mask: Some(mask),
        loss_trace: trace,
        metrics,
    })
}

/// Soft-thresholds every snapshot entry toward its snapshot value by `by`.
fn shrink_toward_snapshot(store: &mut ParameterStore, mask: &SessionMask, by: f64) -> Result<()> {
    for (addr, anchor) in mask.snapshot().iter() {
        let d = store.get(addr)? - anchor;
        let shrunk = d.signum() * (d.abs() - by).max(0.0);
        store.set(addr, anchor + shrunk)?;
    }
    Ok(())
}

/// Fine-tuning baseline: every extractor parameter plus a fresh head for the
/// session classes is trained with cross-entropy, then the head is dropped
/// and the session is evaluated with prototypes.
pub fn finetune_session(
    store: &mut ParameterStore,
    registry: &mut PrototypeRegistry,
    data: &SessionData,
    test_pool: &Samples,
    base_classes: &BTreeSet<usize>,
    config: &TrainConfig,
    seed: u64,
) -> Result<SessionOutcome> {
    config.validate()?;
    check_incremental(registry, data)?;
    let (classes, local) = dense_labels(&data.train.labels);
    let mut rng = seeded(seed, stream::SESSION_HEAD + data.session as u64);
    store.install_classifier(DenseParams::glorot(store.config().feature_dim, classes.len(), &mut rng))?;
    let mut sgd = Sgd::from_config(config);
    let mut trace = Vec::with_capacity(config.session_epochs);
    for _ in 0..config.session_epochs {
        let mut tape = Tape::new();
        let root = base_loss_on(&mut tape, store, &data.train.features, &local)?;
        trace.push(tape.value(root).item()?);
        let grads = tape.backward(root)?;
        sgd.step(store, &grads, config.session_lr, None)?;
    }
    store.discard_classifier()?;
    let before: BTreeSet<usize> = registry.labels().collect();
    register_session(store, registry, data)?;
    let mut metrics = evaluate_session(store, registry, test_pool, base_classes, data.session, &before)?;
    metrics.trainable = Some(store.extractor_len());
    metrics.loss_trace.clone_from(&trace);
    Ok(SessionOutcome {
        mask: None,
        loss_trace: trace,
        metrics,
    })
}

/// Frozen baseline: registers prototypes of the session classes and evaluates.
pub fn frozen_session(
    store: &ParameterStore,
    registry: &mut PrototypeRegistry,
    data: &SessionData,
    test_pool: &Samples,
    base_classes: &BTreeSet<usize>,
) -> Result<SessionOutcome> {
    check_incremental(registry, data)?;
    let before: BTreeSet<usize> = registry.labels().collect();
    register_session(store, registry, data)?;
    let mut metrics = evaluate_session(store, registry, test_pool, base_classes, data.session, &before)?;
    metrics.trainable = Some(0);
    Ok(SessionOutcome {
        mask: None,
        loss_trace: Vec::new(),
        metrics,
    })
}

/// Joint, base-only and new-only accuracy of `pool` against the registry.
///
/// `previous` holds the labels registered before this session; the mean
/// cosine similarity between their prototypes and the session's new ones is
/// recorded alongside.
pub fn evaluate_session(
    store: &ParameterStore,
    registry: &PrototypeRegistry,
    pool: &Samples,
    base_classes: &BTreeSet<usize>,
    session: usize,
    previous: &BTreeSet<usize>,
) -> Result<SessionMetrics> {
    if pool.is_empty() {
        return Err(Error::Empty(format!("test pool of session {session}")));
    }
    if let Some(&missing) = pool.labels.iter().find(|&&l| !registry.contains(l)) {
        return Err(Error::ProtocolViolation(format!(
            "test label {missing} has no registered prototype"
        )));
    }
    let features = store.extract_features(&pool.features)?;
    let predicted = registry.classify_batch(&features)?;
    let split = |want_base: bool| -> Option<f64> {
        let (p, t): (Vec<usize>, Vec<usize>) = predicted
            .iter()
            .zip(&pool.labels)
            .filter(|(_, l)| base_classes.contains(l) == want_base)
            .map(|(&p, &t)| (p, t))
            .unzip();
        (!t.is_empty()).then(|| accuracy(&p, &t))
    };

    let mut sims = Vec::new();
    for (label, entry) in registry.iter() {
        if previous.contains(&label) {
            continue;
        }
        for &old in previous {
            let other = &registry.get(old).expect("previous labels are registered").prototype;
            if let Ok(s) = cosine_similarity(&entry.prototype, other) {
                sims.push(s);
            }
        }
    }
    let new_old_cosine = (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64);

    Ok(SessionMetrics {
        session,
        classes: registry.len(),
        joint_acc: accuracy(&predicted, &pool.labels),
        base_acc: split(true).unwrap_or(0.0),
        new_acc: if session == 1 { None } else { split(false) },
        new_old_cosine,
        trainable: None,
        loss_trace: Vec::new(),
    })
}
