#![allow(dead_code)]

use fsll_core::data::generate_synthetic;
use fsll_core::losses::{
    base_loss_on, base_loss_with_ss_on, l1_regularization_on, prototype_cosine_loss_on, session_loss_on,
    triplet_loss_on,
};
use fsll_core::masking::{select_session_trainable, SessionMask};
use fsll_core::numerics::NodeId;
use fsll_core::prototypes::class_groups;
use fsll_core::protocol::rotate_rows;
use fsll_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 20 classes, 16 features (or 8x8 grids), 100 train / 50 test per class.
pub fn reference_dataset(seed: u64, grid: bool) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        dim: if grid { 64 } else { 16 },
        grid_side: grid.then_some(8),
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

/// 12 base classes followed by four 2-way 2-shot sessions.
pub fn reference_schedule(seed: u64, grid: bool) -> SessionSchedule {
    build_schedule(&reference_dataset(seed, grid), &ScheduleSpec::default(), seed).unwrap()
}

/// The losses covered by gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Base,
    Triplet,
    Anchor,
    Cosine,
    Session,
    SelfSupervised,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Base,
        Objective::Triplet,
        Objective::Anchor,
        Objective::Cosine,
        Objective::Session,
        Objective::SelfSupervised,
    ];
}

/// A random gradient-check instance: a 2-layer extractor with both heads,
/// a labelled batch of 3 classes, previous prototypes and a session mask
/// whose snapshot sits away from the current weights.
pub struct Instance {
    pub store: ParameterStore,
    pub batch: Tensor2,
    pub labels: Vec<usize>,
    pub rotated: Tensor2,
    pub rotation_labels: Vec<usize>,
    pub triplets: TripletBatch,
    pub previous: Tensor2,
    pub mask: SessionMask,
    pub weights: LossWeights,
}

/// Draws instances from `seed` until every class mean feature is nonzero,
/// which the cosine term needs.
pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let inst = draw(&mut rng);
        let features = inst.store.extract_features(&inst.batch).unwrap();
        let protos = fsll_core::prototypes::prototypes_from_features(&features, &inst.labels).unwrap();
        if protos.values().all(|p| p.mean.iter().any(|&v| v > 1e-3)) {
            return inst;
        }
    }
}

fn draw(rng: &mut ChaCha8Rng) -> Instance {
    let side = rng.random_range(2..=4usize);
    let input = side * side;
    let hidden = rng.random_range(3..=8usize);
    let feature = rng.random_range(2..=6usize);
    let config = ModelConfig::new(input, vec![hidden], feature, 3).with_rotation_head();
    let mut store = ParameterStore::new(config, rng.random()).unwrap();
    // positive biases keep class means away from the zero vector
    for key in store.keys().collect::<Vec<_>>() {
        if key.kind == ParamKind::Bias {
            for b in store.tensor_mut(key).unwrap() {
                *b = rng.random_range(0.05..0.3);
            }
        }
    }

    let labels: Vec<usize> = (0..3).flat_map(|c| [c, c]).collect();
    let batch = random_tensor(rng, labels.len(), input, 1.0);
    let rotation_labels: Vec<usize> = (0..labels.len()).map(|_| rng.random_range(0..4)).collect();
    let rotated = rotate_rows(&batch, &rotation_labels).unwrap();
    let triplets = TripletBatch::all_valid(&labels);
    let previous = random_tensor(rng, 2, feature, 1.0);

    let mask = select_session_trainable(&store, 0.5, 2).unwrap();
    // move trainable weights off their snapshot so the L1 term is differentiable
    for &addr in mask.trainable() {
        let w = store.get(addr).unwrap();
        let step = rng.random_range(0.01..0.1) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        store.set(addr, w + step).unwrap();
    }
    Instance {
        store,
        batch,
        labels,
        rotated,
        rotation_labels,
        triplets,
        previous,
        mask,
        weights: LossWeights {
            lambda: rng.random_range(0.5..5.0),
            ..LossWeights::default()
        },
    }
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor2::new(rows, cols, data).unwrap()
}

/// Builds `objective` for `inst` on `tape`, reading parameters from `store`.
pub fn build(objective: Objective, inst: &Instance, tape: &mut Tape, store: &ParameterStore) -> Result<NodeId> {
    match objective {
        Objective::Base => base_loss_on(tape, store, &inst.batch, &inst.labels),
        Objective::SelfSupervised => base_loss_with_ss_on(
            tape,
            store,
            &inst.batch,
            &inst.labels,
            &inst.rotated,
            &inst.rotation_labels,
        ),
        Objective::Triplet => {
            let x = tape.input(inst.batch.clone());
            let f = store.extract_features_on(tape, x)?;
            triplet_loss_on(tape, f, &inst.triplets, 0.0, Reduction::Mean)
        }
        Objective::Anchor => l1_regularization_on(tape, store, inst.mask.snapshot()),
        Objective::Cosine => {
            let x = tape.input(inst.batch.clone());
            let f = store.extract_features_on(tape, x)?;
            let (_, groups) = class_groups(&inst.labels);
            let protos = tape.group_mean(f, groups)?;
            prototype_cosine_loss_on(tape, protos, &inst.previous)
        }
        Objective::Session => session_loss_on(
            tape,
            store,
            &inst.batch,
            &inst.labels,
            &inst.triplets,
            &inst.mask,
            &inst.previous,
            &inst.weights,
        )
        .map(|l| l.total),
    }
}
