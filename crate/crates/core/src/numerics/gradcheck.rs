//! Central-difference gradient checking against [`Tape::backward`].

use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{ParamAddr, ParamKey, ParameterStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_relative_error: f64,
    pub worst: Option<ParamAddr>,
    pub checked: usize,
}

/// Compares the tape gradient of `forward` with central differences over
/// every parameter in `keys` (all store parameters when `keys` is empty).
///
/// `forward` builds the loss on a fresh tape from the given store and
/// returns the scalar root node.
pub fn finite_difference_check<F>(
    forward: F,
    store: &ParameterStore,
    keys: &[ParamKey],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference epsilon must be positive, got {epsilon}"
        )));
    }
    let keys: Vec<ParamKey> = if keys.is_empty() {
        store.keys().collect()
    } else {
        keys.to_vec()
    };

    let mut tape = Tape::new();
    let root = forward(&mut tape, store)?;
    let grads = tape.backward(root)?;

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let r = forward(&mut t, s)?;
        t.value(r).item()
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for key in keys {
        let len = store
            .tensor(key)
            .ok_or_else(|| Error::InvalidAddress(format!("{key:?}")))?
            .len();
        for offset in 0..len {
            let addr = ParamAddr {
                layer: key.layer,
                kind: key.kind,
                offset,
            };
            let original = store.get(addr)?;
            probe.set(addr, original + epsilon)?;
            let plus = eval(&probe)?;
            probe.set(addr, original - epsilon)?;
            let minus = eval(&probe)?;
            probe.set(addr, original)?;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads.get(addr);
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            let rel = (analytic - numeric).abs() / denom;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst = Some(addr);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParameterStore};

    fn small_store() -> ParameterStore {
        ParameterStore::new(ModelConfig::new(3, vec![4], 2, 3), 7).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let store = small_store();
        let key = store.extractor_keys()[0];
        let report = finite_difference_check(
            |tape, s| {
                let w = s.param_node(tape, key)?;
                let sq = tape.mul(w, w)?;
                Ok(tape.sum(sq))
            },
            &store,
            &[key],
            1e-4,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, store.tensor(key).unwrap().len());
    }

    #[test]
    fn zero_epsilon_rejected() {
        let store = small_store();
        let err = finite_difference_check(|t, _| Ok(t.input(crate::Tensor2::scalar(0.0))), &store, &[], 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
