//! Session-trainable / knowledge-retention partition of the extractor.
//!
//! Within each extractor layer, weights and bias are ranked together by
//! absolute value (flat order: weights row-major, then bias). The lowest
//! `k = round(fraction · n)` become trainable for the session; everything
//! else in the extractor is frozen. Heads are never part of the partition.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{LayerSlot, ParamAddr, ParamKind, ParameterStore, Snapshot};
use crate::numerics::Gradients;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSelection {
    pub layer: usize,
    pub size: usize,
    pub selected: usize,
    /// k-th smallest |w| in the layer; `None` when nothing was selected.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionMask {
    session: usize,
    fraction: f64,
    layers: Vec<LayerSelection>,
    trainable: Vec<ParamAddr>,
    frozen: Vec<ParamAddr>,
    #[serde(skip)]
    snapshot: Snapshot,
}

/// Number of parameters selected from a layer of `n`: `round(fraction · n)`,
/// raised to 1 when the fraction is positive but rounds to nothing.
pub fn selected_count(fraction: f64, n: usize) -> usize {
    let k = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && k == 0 && n > 0 {
        1
    } else {
        k.min(n)
    }
}

/// Flat indices of the `k` smallest-magnitude values, ties to the lower index,
/// returned in ascending index order.
pub fn lowest_magnitude(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .abs()
            .total_cmp(&values[b].abs())
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "trainable fraction must lie in [0, 1], got {fraction}"
        )));
    }
    Ok(())
}

fn flat_addr(layer: usize, n_weights: usize, flat: usize) -> ParamAddr {
    if flat < n_weights {
        ParamAddr::new(LayerSlot::Extractor(layer), ParamKind::Weight, flat)
    } else {
        ParamAddr::new(LayerSlot::Extractor(layer), ParamKind::Bias, flat - n_weights)
    }
}

/// Selects the session-trainable parameters for session `session`.
pub fn select_session_trainable(
    store: &ParameterStore,
    fraction: f64,
    session: usize,
) -> Result<SessionMask> {
    check_fraction(fraction)?;
    let mut layers = Vec::new();
    let mut trainable = Vec::new();
    let mut frozen = Vec::new();

    for (li, layer) in store.extractor_layers().iter().enumerate() {
        let n_weights = layer.weights.data().len();
        let flat: Vec<f64> = layer
            .weights
            .data()
            .iter()
            .chain(&layer.bias)
            .copied()
            .collect();
        let k = selected_count(fraction, flat.len());
        let picked = lowest_magnitude(&flat, k);
        let threshold = picked.iter().map(|&i| flat[i].abs()).reduce(f64::max);

        let mut is_picked = vec![false; flat.len()];
        for &i in &picked {
            is_picked[i] = true;
        }
        for (i, &p) in is_picked.iter().enumerate() {
            let addr = flat_addr(li, n_weights, i);
            if p {
                trainable.push(addr);
            } else {
                frozen.push(addr);
            }
        }
        layers.push(LayerSelection {
            layer: li,
            size: flat.len(),
            selected: k,
            threshold,
        });
    }
    trainable.sort_unstable();
    frozen.sort_unstable();
    let snapshot = store.snapshot(&trainable)?;
    Ok(SessionMask {
        session,
        fraction,
        layers,
        trainable,
        frozen,
        snapshot,
    })
}

/// Re-ranks the (possibly updated) store for the session after `previous`.
pub fn reselect_for_next_session(
    store: &ParameterStore,
    previous: &SessionMask,
    fraction: f64,
) -> Result<SessionMask> {
    select_session_trainable(store, fraction, previous.session + 1)
}

impl SessionMask {
    pub fn session(&self) -> usize {
        self.session
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn layers(&self) -> &[LayerSelection] {
        &self.layers
    }

    pub fn trainable(&self) -> &[ParamAddr] {
        &self.trainable
    }

    pub fn frozen(&self) -> &[ParamAddr] {
        &self.frozen
    }

    /// Values of the trainable set when the mask was selected.
    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    /// N_p^t.
    pub fn num_trainable(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_trainable(&self, addr: ParamAddr) -> bool {
        self.trainable.binary_search(&addr).is_ok()
    }

    /// Diagnostic dump: session, fraction, per-layer thresholds and counts, address lists.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_gradients(store: &ParameterStore, grads: &Gradients) -> Result<()> {
    for (key, g) in grads.iter() {
        let t = store
            .tensor(key)
            .ok_or_else(|| Error::InvalidAddress(format!("gradient for absent {key:?}")))?;
        if t.len() != g.len() {
            return Err(Error::InvalidAddress(format!(
                "gradient for {key:?} has {} values, parameter has {}",
                g.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

/// `w ← w − lr·g` on trainable addresses only; frozen values are never written.
pub fn apply_masked_update(
    store: &mut ParameterStore,
    mask: &SessionMask,
    grads: &Gradients,
    lr: f64,
) -> Result<()> {
    check_gradients(store, grads)?;
    for &addr in &mask.trainable {
        let g = grads.get(addr);
        if g != 0.0 {
            let w = store.get(addr)?;
            store.set(addr, w - lr * g)?;
        }
    }
    Ok(())
}

/// `w ← w − lr·g` for every parameter that has a gradient.
pub fn apply_full_update(store: &mut ParameterStore, grads: &Gradients, lr: f64) -> Result<()> {
    check_gradients(store, grads)?;
    for (key, g) in grads.iter() {
        let t = store.tensor_mut(key).expect("checked above");
        for (w, gv) in t.iter_mut().zip(g) {
            *w -= lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenseParams, ModelConfig, ParamKey};
    use crate::numerics::Tensor2;

    const EXAMPLE: [f64; 10] = [0.5, -0.05, 0.2, -0.9, 0.01, 0.3, -0.15, 0.7, 0.02, -0.4];

    fn example_store() -> ParameterStore {
        // one extractor layer 10 -> 1, bias large so it is never among the smallest
        let layer = DenseParams {
            weights: Tensor2::new(10, 1, EXAMPLE.to_vec()).unwrap(),
            bias: vec![1.0],
        };
        ParameterStore::from_layers(ModelConfig::new(10, vec![], 1, 1), 0, vec![layer], None, None)
            .unwrap()
    }

    fn w(offset: usize) -> ParamAddr {
        ParamAddr::new(LayerSlot::Extractor(0), ParamKind::Weight, offset)
    }

    #[test]
    fn picks_two_smallest_magnitudes() {
        assert_eq!(lowest_magnitude(&EXAMPLE, 2), vec![4, 8]);
        let mask = select_session_trainable(&example_store(), 0.2, 2).unwrap();
        assert_eq!(mask.trainable(), &[w(4), w(8)]);
        assert_eq!(mask.layers()[0].threshold, Some(0.02));
        assert_eq!(mask.num_trainable(), 2);
        assert_eq!(mask.frozen().len(), 9);
        assert_eq!(mask.snapshot().value(w(4)), Some(0.01));
    }

    #[test]
    fn ties_go_to_lower_offset() {
        assert_eq!(lowest_magnitude(&[0.3, -0.1, 0.1, 0.1], 2), vec![1, 2]);
    }

    #[test]
    fn fraction_extremes() {
        let store = ParameterStore::new(ModelConfig::new(4, vec![5], 3, 2), 1).unwrap();
        let none = select_session_trainable(&store, 0.0, 2).unwrap();
        assert!(none.trainable().is_empty());
        assert_eq!(none.frozen().len(), store.extractor_len());
        assert!(none.layers().iter().all(|l| l.threshold.is_none()));

        let all = select_session_trainable(&store, 1.0, 2).unwrap();
        assert!(all.frozen().is_empty());
        assert_eq!(all.trainable().len(), store.extractor_len());
        assert!(all
            .trainable()
            .iter()
            .all(|a| matches!(a.layer, LayerSlot::Extractor(_))));

        assert!(select_session_trainable(&store, 1.5, 2).is_err());
        assert!(select_session_trainable(&store, -0.1, 2).is_err());
    }

    #[test]
    fn tiny_fraction_keeps_one_per_layer() {
        assert_eq!(selected_count(0.01, 10), 1);
        assert_eq!(selected_count(0.0, 10), 0);
        assert_eq!(selected_count(0.25, 10), 3);
        assert_eq!(selected_count(0.1, 408), 41);
    }

    #[test]
    fn masked_update_respects_frozen() {
        let mut store = example_store();
        let mask = select_session_trainable(&store, 0.2, 2).unwrap();
        let key = ParamKey {
            layer: LayerSlot::Extractor(0),
            kind: ParamKind::Weight,
        };
        let mut grads = Gradients::new();
        grads.insert(key, vec![1.0; 10]);
        apply_masked_update(&mut store, &mask, &grads, 0.1).unwrap();
        assert!((store.get(w(4)).unwrap() - (-0.09)).abs() < 1e-15);
        assert_eq!(store.get(w(0)).unwrap(), 0.5);
        assert_eq!(store.get(w(3)).unwrap(), -0.9);
    }

    #[test]
    fn zero_gradients_leave_store_identical() {
        let mut store = ParameterStore::new(ModelConfig::new(3, vec![4], 2, 2), 3).unwrap();
        let before = store.clone();
        let mask = select_session_trainable(&store, 0.5, 2).unwrap();
        let mut grads = Gradients::new();
        for key in store.keys() {
            grads.insert(key, vec![0.0; store.tensor(key).unwrap().len()]);
        }
        apply_masked_update(&mut store, &mask, &grads, 0.3).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn gradient_outside_store_rejected() {
        let mut store = example_store();
        let mask = select_session_trainable(&store, 0.2, 2).unwrap();
        let mut grads = Gradients::new();
        grads.insert(
            ParamKey {
                layer: LayerSlot::Extractor(3),
                kind: ParamKind::Bias,
            },
            vec![1.0],
        );
        assert!(matches!(
            apply_masked_update(&mut store, &mask, &grads, 0.1),
            Err(Error::InvalidAddress(_))
        ));
    }

    #[test]
    fn reselect_tracks_updates() {
        let mut store = example_store();
        let first = select_session_trainable(&store, 0.2, 2).unwrap();
        let same = reselect_for_next_session(&store, &first, 0.2).unwrap();
        assert_eq!(same.trainable(), first.trainable());
        assert_eq!(same.session(), 3);

        // grow a selected weight to the largest magnitude in the layer
        store.set(w(4), 5.0).unwrap();
        let next = reselect_for_next_session(&store, &first, 0.2).unwrap();
        assert!(!next.is_trainable(w(4)));
        assert_eq!(next.trainable(), &[w(1), w(8)]);

        let wider = reselect_for_next_session(&store, &next, 0.5).unwrap();
        assert!(next.trainable().iter().all(|&a| wider.is_trainable(a)));
    }

    #[test]
    fn dump_has_thresholds_and_lists() {
        let mask = select_session_trainable(&example_store(), 0.2, 2).unwrap();
        let v: serde_json::Value = serde_json::from_str(&mask.to_json().unwrap()).unwrap();
        assert_eq!(v["session"], 2);
        assert_eq!(v["layers"][0]["threshold"], 0.02);
        assert_eq!(v["trainable"].as_array().unwrap().len(), 2);
        assert_eq!(v["frozen"].as_array().unwrap().len(), 9);
    }
}
