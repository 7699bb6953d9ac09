//! Self-checks run by the `check` command: gradient checks of every
//! objective and the core invariants on random small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::rotate_grid;
use crate::error::Result;
use crate::losses::{
    base_loss_on, base_loss_with_ss_on, l1_regularization_on, prototype_cosine_loss_on, session_loss_on,
    triplet_loss_on, LossWeights, Reduction, TripletBatch,
};
use crate::masking::{apply_masked_update, select_session_trainable, SessionMask};
use crate::model::{ModelConfig, ParamKind, ParameterStore};
use crate::numerics::{euclidean_distance, finite_difference_check, Gradients, NodeId, Tape, Tensor2};
use crate::prototypes::{class_groups, prototypes_from_features, ClassMean, PrototypeRegistry};

/// Largest relative gradient error a check may report.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct Instance {
    store: ParameterStore,
    batch: Tensor2,
    labels: Vec<usize>,
    rotated: Tensor2,
    rotation_labels: Vec<usize>,
    previous: Tensor2,
    mask: SessionMask,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor2::new(rows, cols, data).expect("sized above")
}

fn instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    loop {
        let side = rng.random_range(2..=3usize);
        let config = ModelConfig::new(side * side, vec![rng.random_range(3..=6)], rng.random_range(2..=5), 3)
            .with_rotation_head();
        let mut store = ParameterStore::new(config, rng.random())?;
        for key in store.keys().filter(|k| k.kind == ParamKind::Bias).collect::<Vec<_>>() {
            for b in store.tensor_mut(key).expect("key from store") {
                *b = rng.random_range(0.05..0.3);
            }
        }
        let labels = vec![0, 0, 1, 1, 2, 2];
        let batch = random_tensor(rng, labels.len(), side * side);
        let rotation_labels: Vec<usize> = (0..labels.len()).map(|_| rng.random_range(0..4)).collect();
        let rotated = crate::protocol::rotate_rows(&batch, &rotation_labels)?;
        let previous = random_tensor(rng, 2, store.config().feature_dim);
        let mask = select_session_trainable(&store, 0.5, 2)?;
        for &addr in mask.trainable() {
            let step = rng.random_range(0.01..0.1) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            store.set(addr, store.get(addr)? + step)?;
        }
        let features = store.extract_features(&batch)?;
        let protos = prototypes_from_features(&features, &labels)?;
        if protos.values().all(|p| p.mean.iter().any(|&v| v > 1e-3)) {
            return Ok(Instance {
                store,
                batch,
                labels,
                rotated,
                rotation_labels,
                previous,
                mask,
            });
        }
    }
}

type Objective = fn(&Instance, &mut Tape, &ParameterStore) -> Result<NodeId>;

fn features(inst: &Instance, tape: &mut Tape, store: &ParameterStore) -> Result<NodeId> {
    let x = tape.input(inst.batch.clone());
    store.extract_features_on(tape, x)
}

const OBJECTIVES: [(&str, Objective); 6] = [
    ("cross-entropy", |i, t, s| base_loss_on(t, s, &i.batch, &i.labels)),
    ("triplet", |i, t, s| {
        let f = features(i, t, s)?;
        triplet_loss_on(t, f, &TripletBatch::all_valid(&i.labels), 0.0, Reduction::Mean)
    }),
    ("l1 anchor", |i, t, s| l1_regularization_on(t, s, i.mask.snapshot())),
    ("prototype cosine", |i, t, s| {
        let f = features(i, t, s)?;
        let protos = t.group_mean(f, class_groups(&i.labels).1)?;
        prototype_cosine_loss_on(t, protos, &i.previous)
    }),
    ("session total", |i, t, s| {
        let triplets = TripletBatch::all_valid(&i.labels);
        session_loss_on(t, s, &i.batch, &i.labels, &triplets, &i.mask, &i.previous, &LossWeights::default())
            .map(|l| l.total)
    }),
    ("rotation auxiliary", |i, t, s| {
        base_loss_with_ss_on(t, s, &i.batch, &i.labels, &i.rotated, &i.rotation_labels)
    }),
];

/// Runs every check with `trials` random instances each.
pub fn run_checks(seed: u64, trials: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (name, objective) in OBJECTIVES {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let inst = instance(&mut rng)?;
            let report = finite_difference_check(|t, s| objective(&inst, t, s), &inst.store, &[], 1e-6)?;
            worst = worst.max(report.max_relative_error);
        }
        out.push(CheckResult {
            name,
            passed: worst <= GRADIENT_TOLERANCE,
            detail: format!("max relative error {worst:.2e}"),
        });
    }

    let mut partition_ok = true;
    let mut frozen_ok = true;
    for _ in 0..trials {
        let inst = instance(&mut rng)?;
        let fraction = rng.random_range(0.0..=1.0);
        let mask = select_session_trainable(&inst.store, fraction, 2)?;
        partition_ok &= mask.trainable().len() + mask.frozen().len() == inst.store.extractor_len()
            && mask.trainable().iter().all(|a| !mask.frozen().contains(a));
        let mut store = inst.store.clone();
        let mut grads = Gradients::new();
        for key in store.keys().collect::<Vec<_>>() {
            let n = store.tensor(key).expect("key from store").len();
            grads.insert(key, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        apply_masked_update(&mut store, &mask, &grads, 0.5)?;
        for &a in mask.frozen() {
            frozen_ok &= store.get(a)?.to_bits() == inst.store.get(a)?.to_bits();
        }
    }
    out.push(CheckResult {
        name: "mask partition",
        passed: partition_ok,
        detail: "trainable and frozen sets cover the extractor disjointly".into(),
    });
    out.push(CheckResult {
        name: "frozen parameters",
        passed: frozen_ok,
        detail: "masked updates leave frozen values bit-identical".into(),
    });

    let mut classify_ok = true;
    for _ in 0..trials * 10 {
        let dim = rng.random_range(1..=4);
        let entries: Vec<(usize, Vec<f64>)> = (0..rng.random_range(1..=6))
            .map(|l| (l * 3, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let mut registry = PrototypeRegistry::new();
        registry.register(
            entries
                .iter()
                .map(|(l, p)| (*l, ClassMean { mean: p.clone(), count: 1 }))
                .collect(),
            1,
        )?;
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut best = (usize::MAX, f64::INFINITY);
        for (l, p) in &entries {
            let d = euclidean_distance(&q, p)?;
            if d < best.1 {
                best = (*l, d);
            }
        }
        classify_ok &= registry.classify(&q)? == best.0;
    }
    out.push(CheckResult {
        name: "nearest prototype",
        passed: classify_ok,
        detail: "classification matches a linear scan".into(),
    });

    let mut rotation_ok = true;
    for side in 1..=5 {
        let grid: Vec<f64> = (0..side * side).map(|i| i as f64).collect();
        for a in 0..4 {
            for b in 0..4 {
                rotation_ok &= rotate_grid(&rotate_grid(&grid, a)?, b)? == rotate_grid(&grid, (a + b) % 4)?;
            }
        }
    }
    out.push(CheckResult {
        name: "grid rotation",
        passed: rotation_ok,
        detail: "quarter turns compose modulo 4".into(),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for check in run_checks(3, 4).unwrap() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
