//! Feature extractor, classifier and rotation heads, and the parameter store
//! that addresses every trainable value.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dense_forward, relu, NodeId, Tape, Tensor2};

/// Number of rotation classes (0°, 90°, 180°, 270°).
pub const ROTATION_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerSlot {
    Extractor(usize),
    Classifier,
    Rotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Identifies one parameter tensor (a layer's weights or its bias).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamKey {
    pub layer: LayerSlot,
    pub kind: ParamKind,
}

/// Identifies one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamAddr {
    pub layer: LayerSlot,
    pub kind: ParamKind,
    pub offset: usize,
}

impl ParamAddr {
    pub fn new(layer: LayerSlot, kind: ParamKind, offset: usize) -> Self {
        Self {
            layer,
            kind,
            offset,
        }
    }

    pub fn key(&self) -> ParamKey {
        ParamKey {
            layer: self.layer,
            kind: self.kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths of the extractor, input side first.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Width of the classifier head.
    pub num_classes: usize,
    #[serde(default)]
    pub rotation_head: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            feature_dim,
            num_classes,
            rotation_head: false,
        }
    }

    pub fn with_rotation_head(mut self) -> Self {
        self.rotation_head = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.feature_dim, self.num_classes];
        if dims.iter().chain(&self.hidden).any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must all be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(in, out)` for each extractor layer.
    pub fn extractor_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.feature_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Weights (`in x out`) and bias (`out`) of one dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
}

impl DenseParams {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weights: Tensor2::new(fan_in, fan_out, data).expect("sized by construction"),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Tensor2::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        dense_forward(x, &self.weights, &self.bias)
    }
}

/// Every parameter of the network, addressable by [`ParamAddr`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    config: ModelConfig,
    seed: u64,
    extractor: Vec<DenseParams>,
    classifier: Option<DenseParams>,
    rotation: Option<DenseParams>,
}

impl ParameterStore {
    /// Deterministic initialization from `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = config
            .extractor_shapes()
            .into_iter()
            .map(|(i, o)| DenseParams::glorot(i, o, &mut rng))
            .collect();
        let classifier = Some(DenseParams::glorot(
            config.feature_dim,
            config.num_classes,
            &mut rng,
        ));
        let rotation = config
            .rotation_head
            .then(|| DenseParams::glorot(config.feature_dim, ROTATION_CLASSES, &mut rng));
        Ok(Self {
            config,
            seed,
            extractor,
            classifier,
            rotation,
        })
    }

    /// Builds a store from explicit layers; used by tests and checkpoints.
    pub fn from_layers(
        config: ModelConfig,
        seed: u64,
        extractor: Vec<DenseParams>,
        classifier: Option<DenseParams>,
        rotation: Option<DenseParams>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = config.extractor_shapes();
        if shapes.len() != extractor.len() {
            return Err(Error::shape("extractor layers", shapes.len(), extractor.len()));
        }
        for (&(i, o), layer) in shapes.iter().zip(&extractor) {
            check_layer(layer, i, o)?;
        }
        if let Some(c) = &classifier {
            check_layer(c, config.feature_dim, config.num_classes)?;
        }
        if let Some(r) = &rotation {
            check_layer(r, config.feature_dim, ROTATION_CLASSES)?;
        }
        Ok(Self {
            config,
            seed,
            extractor,
            classifier,
            rotation,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer(&self, slot: LayerSlot) -> Option<&DenseParams> {
        match slot {
            LayerSlot::Extractor(i) => self.extractor.get(i),
            LayerSlot::Classifier => self.classifier.as_ref(),
            LayerSlot::Rotation => self.rotation.as_ref(),
        }
    }

    fn layer_mut(&mut self, slot: LayerSlot) -> Option<&mut DenseParams> {
        match slot {
            LayerSlot::Extractor(i) => self.extractor.get_mut(i),
            LayerSlot::Classifier => self.classifier.as_mut(),
            LayerSlot::Rotation => self.rotation.as_mut(),
        }
    }

    pub fn extractor_layers(&self) -> &[DenseParams] {
        &self.extractor
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    pub fn has_rotation_head(&self) -> bool {
        self.rotation.is_some()
    }

    /// Present layer slots, extractor first.
    pub fn slots(&self) -> Vec<LayerSlot> {
        let mut slots: Vec<_> = (0..self.extractor.len()).map(LayerSlot::Extractor).collect();
        if self.classifier.is_some() {
            slots.push(LayerSlot::Classifier);
        }
        if self.rotation.is_some() {
            slots.push(LayerSlot::Rotation);
        }
        slots
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.slots().into_iter().flat_map(|layer| {
            [ParamKind::Weight, ParamKind::Bias]
                .into_iter()
                .map(move |kind| ParamKey { layer, kind })
        })
    }

    pub fn extractor_keys(&self) -> Vec<ParamKey> {
        self.keys()
            .filter(|k| matches!(k.layer, LayerSlot::Extractor(_)))
            .collect()
    }

    /// Total number of extractor scalars.
    pub fn extractor_len(&self) -> usize {
        self.extractor.iter().map(DenseParams::len).sum()
    }

    pub fn num_params(&self) -> usize {
        self.slots()
            .into_iter()
            .filter_map(|s| self.layer(s))
            .map(DenseParams::len)
            .sum()
    }

    pub fn tensor(&self, key: ParamKey) -> Option<&[f64]> {
        let layer = self.layer(key.layer)?;
        Some(match key.kind {
            ParamKind::Weight => layer.weights.data(),
            ParamKind::Bias => &layer.bias,
        })
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> Option<&mut [f64]> {
        let layer = self.layer_mut(key.layer)?;
        Some(match key.kind {
            ParamKind::Weight => layer.weights.data_mut(),
            ParamKind::Bias => &mut layer.bias,
        })
    }

    pub fn get(&self, addr: ParamAddr) -> Result<f64> {
        self.tensor(addr.key())
            .and_then(|t| t.get(addr.offset))
            .copied()
            .ok_or_else(|| Error::InvalidAddress(format!("{addr:?}")))
    }

    pub fn set(&mut self, addr: ParamAddr, value: f64) -> Result<()> {
        let slot = self
            .tensor_mut(addr.key())
            .and_then(|t| t.get_mut(addr.offset))
            .ok_or_else(|| Error::InvalidAddress(format!("{addr:?}")))?;
        *slot = value;
        Ok(())
    }

    /// Registers the tensor `key` as a parameter leaf on `tape`.
    pub fn param_node(&self, tape: &mut Tape, key: ParamKey) -> Result<NodeId> {
        if let Some(id) = tape.param_node(key) {
            return Ok(id);
        }
        let layer = self
            .layer(key.layer)
            .ok_or_else(|| Error::InvalidAddress(format!("{key:?}")))?;
        let value = match key.kind {
            ParamKind::Weight => layer.weights.clone(),
            ParamKind::Bias => Tensor2::row_vector(&layer.bias),
        };
        Ok(tape.param(key, value))
    }

    fn dense_on(&self, tape: &mut Tape, slot: LayerSlot, input: NodeId) -> Result<NodeId> {
        let w = self.param_node(
            tape,
            ParamKey {
                layer: slot,
                kind: ParamKind::Weight,
            },
        )?;
        let b = self.param_node(
            tape,
            ParamKey {
                layer: slot,
                kind: ParamKind::Bias,
            },
        )?;
        tape.dense(input, w, b)
    }

    /// Θ_F on the tape: ReLU after every extractor layer.
    pub fn extract_features_on(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let mut h = input;
        for i in 0..self.extractor.len() {
            let z = self.dense_on(tape, LayerSlot::Extractor(i), h)?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    pub fn classify_logits_on(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        if self.classifier.is_none() {
            return Err(Error::AlreadyDiscarded);
        }
        self.dense_on(tape, LayerSlot::Classifier, features)
    }

    pub fn rotation_logits_on(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        if self.rotation.is_none() {
            return Err(Error::InvalidArgument("model has no rotation head".into()));
        }
        self.dense_on(tape, LayerSlot::Rotation, features)
    }

    pub fn extract_features(&self, batch: &Tensor2) -> Result<Tensor2> {
        let mut h = batch.clone();
        for layer in &self.extractor {
            h = relu(&layer.forward(&h)?);
        }
        Ok(h)
    }

    pub fn classify_logits(&self, features: &Tensor2) -> Result<Tensor2> {
        self.classifier
            .as_ref()
            .ok_or(Error::AlreadyDiscarded)?
            .forward(features)
    }

    pub fn rotation_logits(&self, features: &Tensor2) -> Result<Tensor2> {
        self.rotation
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no rotation head".into()))?
            .forward(features)
    }

    /// Copies the values at `addresses`; the snapshot is detached from the store.
    pub fn snapshot(&self, addresses: &[ParamAddr]) -> Result<Snapshot> {
        let mut entries = addresses
            .iter()
            .map(|&a| Ok((a, self.get(a)?)))
            .collect::<Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.0);
        entries.dedup_by_key(|e| e.0);
        Ok(Snapshot { entries })
    }

    /// Drops Θ_C. The extractor is untouched.
    pub fn discard_classifier(&mut self) -> Result<()> {
        self.classifier.take().map(|_| ()).ok_or(Error::AlreadyDiscarded)
    }

    /// Installs a new classifier head, replacing any existing one.
    ///
    /// The head width may differ from the configured class count; the
    /// config is updated to match.
    pub fn install_classifier(&mut self, head: DenseParams) -> Result<()> {
        check_layer(&head, self.config.feature_dim, head.weights.cols())?;
        if head.weights.cols() == 0 {
            return Err(Error::InvalidArgument("classifier head needs at least one class".into()));
        }
        self.config.num_classes = head.weights.cols();
        self.classifier = Some(head);
        Ok(())
    }

    pub fn discard_rotation_head(&mut self) {
        self.rotation = None;
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            store: self.clone(),
        };
        let text = serde_json::to_string(&ckpt)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let s = ckpt.store;
        Self::from_layers(s.config, s.seed, s.extractor, s.classifier, s.rotation)
    }
}

fn check_layer(layer: &DenseParams, fan_in: usize, fan_out: usize) -> Result<()> {
    if layer.weights.shape() != (fan_in, fan_out) || layer.bias.len() != fan_out {
        return Err(Error::shape(
            "layer",
            format!("{fan_in}x{fan_out} + {fan_out}"),
            format!(
                "{}x{} + {}",
                layer.weights.rows(),
                layer.weights.cols(),
                layer.bias.len()
            ),
        ));
    }
    Ok(())
}

const CHECKPOINT_FORMAT: &str = "fsll-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    store: ParameterStore,
}

/// Parameter values captured at a point in time (w^{t−1}).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    entries: Vec<(ParamAddr, f64)>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamAddr, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn addresses(&self) -> impl Iterator<Item = ParamAddr> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn value(&self, addr: ParamAddr) -> Option<f64> {
        self.entries
            .binary_search_by_key(&addr, |e| e.0)
            .ok()
            .map(|i| self.entries[i].1)
    }
}
