//! The session protocol: base training, few-shot sessions, baselines and
//! per-session evaluation.

mod metrics;
mod schedule;
mod train;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metrics::{MetricsReport, SessionMetrics, METRICS_CSV_HEADER};
pub use schedule::{build_schedule, ScheduleSpec, SessionData, SessionSchedule, SessionSource};
pub use train::{
    evaluate_session, finetune_session, frozen_session, rotate_rows, rotation_accuracy, run_session, train_base,
    train_base_with_ss, AnchorUpdate, SessionOutcome, Sgd, TrainConfig,
};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::masking::SessionMask;
use crate::model::{ModelConfig, ParameterStore};
use crate::prototypes::PrototypeRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Fsll,
    /// FSLL with rotation self-supervision during base training.
    FsllSs,
    FtCnn,
    Frozen,
    /// Trains once on every session's data; an upper bound, not a valid
    /// incremental learner.
    Joint,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Fsll, Method::FsllSs, Method::FtCnn, Method::Frozen, Method::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fsll => "FSLL",
            Method::FsllSs => "FSLL+SS",
            Method::FtCnn => "FtCNN",
            Method::Frozen => "Frozen",
            Method::Joint => "Joint",
        }
    }

    pub fn protocol_violating(self) -> bool {
        self == Method::Joint
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownMethod { name: s.to_string() })
    }
}

/// Extractor widths; input and class counts come from the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            feature_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

/// Hooks called around every session, base included.
pub trait ProtocolObserver {
    fn session_started(&mut self, _session: usize, _store: &ParameterStore) {}

    fn session_finished(
        &mut self,
        _session: usize,
        _store: &ParameterStore,
        _mask: Option<&SessionMask>,
        _metrics: &SessionMetrics,
    ) {
    }
}

impl ProtocolObserver for () {}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub report: MetricsReport,
    pub store: ParameterStore,
    pub registry: PrototypeRegistry,
}

pub fn run_protocol<S: SessionSource + ?Sized>(
    source: &S,
    config: &ProtocolConfig,
    method: Method,
) -> Result<MetricsReport> {
    run_protocol_observed(source, config, method, &mut ()).map(|r| r.report)
}

/// Runs every session of `source` in order with `method`.
pub fn run_protocol_observed<S: SessionSource + ?Sized>(
    source: &S,
    config: &ProtocolConfig,
    method: Method,
    observer: &mut dyn ProtocolObserver,
) -> Result<ProtocolRun> {
    config.train.validate()?;
    if source.num_sessions() == 0 {
        return Err(Error::Empty("schedule has no sessions".into()));
    }
    if method == Method::Joint {
        return run_joint(source, config, observer);
    }

    let seed = config.seed;
    let train = &config.train;
    let base = source.train_set(1)?;
    let base_classes = base.classes.clone();
    let mut model = ModelConfig::new(
        source.input_dim(),
        config.model.hidden.clone(),
        config.model.feature_dim,
        base_classes.len(),
    );
    if method == Method::FsllSs {
        model = model.with_rotation_head();
    }
    let mut store = ParameterStore::new(model, seed)?;
    let mut registry = PrototypeRegistry::new();

    observer.session_started(1, &store);
    let trace = if method == Method::FsllSs {
        let side = source
            .grid_side()
            .ok_or_else(|| Error::InvalidArgument("FSLL+SS needs square grid inputs".into()))?;
        train_base_with_ss(&mut store, &mut registry, base, side, train, seed)?
    } else {
        train_base(&mut store, &mut registry, base, train, seed)?
    };
    let pool = source.test_pool(1)?;
    let rotation_acc = if method == Method::FsllSs {
        Some(rotation_accuracy(&store, &pool)?)
    } else {
        None
    };
    let mut first = evaluate_session(&store, &registry, &pool, &base_classes, 1, &BTreeSet::new())?;
    first.trainable = Some(store.extractor_len());
    first.loss_trace = trace;
    log_session(method, &first);
    observer.session_finished(1, &store, None, &first);

    let mut sessions = vec![first];
    for t in 2..=source.num_sessions() {
        let data = source.train_set(t)?;
        let pool = source.test_pool(t)?;
        observer.session_started(t, &store);
        let outcome = match method {
            Method::Fsll | Method::FsllSs => {
                run_session(&mut store, &mut registry, data, &pool, &base_classes, train)?
            }
            Method::FtCnn => finetune_session(&mut store, &mut registry, data, &pool, &base_classes, train, seed)?,
            Method::Frozen => frozen_session(&store, &mut registry, data, &pool, &base_classes)?,
            Method::Joint => unreachable!("handled above"),
        };
        log_session(method, &outcome.metrics);
        observer.session_finished(t, &store, outcome.mask.as_ref(), &outcome.metrics);
        sessions.push(outcome.metrics);
    }

    Ok(ProtocolRun {
        report: MetricsReport {
            method: method.name().to_string(),
            protocol_violating: false,
            seed,
            rotation_acc,
            sessions,
        },
        store,
        registry,
    })
}

fn run_joint<S: SessionSource + ?Sized>(
    source: &S,
    config: &ProtocolConfig,
    observer: &mut dyn ProtocolObserver,
) -> Result<ProtocolRun> {
    let seed = config.seed;
    let parts = (1..=source.num_sessions())
        .map(|t| source.train_set(t))
        .collect::<Result<Vec<_>>>()?;
    let union = Samples::concat(&parts.iter().map(|p| &p.train).collect::<Vec<_>>())?;
    let (classes, local) = train::dense_labels(&union.labels);
    let model = ModelConfig::new(
        source.input_dim(),
        config.model.hidden.clone(),
        config.model.feature_dim,
        classes.len(),
    );
    let mut store = ParameterStore::new(model, seed)?;
    observer.session_started(1, &store);
    let trace = train::fit_classifier(&mut store, &union, &local, &config.train, seed, None)?;
    store.discard_classifier()?;

    let base_classes = parts[0].classes.clone();
    let mut registry = PrototypeRegistry::new();
    let mut sessions = Vec::with_capacity(parts.len());
    for data in &parts {
        let pool = source.test_pool(data.session)?;
        if data.session > 1 {
            observer.session_started(data.session, &store);
        }
        let before: BTreeSet<usize> = registry.labels().collect();
        let protos = crate::prototypes::compute_prototypes(&store, &data.train.features, &data.train.labels)?;
        registry.register(protos, data.session)?;
        let mut m = evaluate_session(&store, &registry, &pool, &base_classes, data.session, &before)?;
        if data.session == 1 {
            m.trainable = Some(store.extractor_len());
            m.loss_trace.clone_from(&trace);
        } else {
            m.trainable = Some(0);
        }
        log_session(Method::Joint, &m);
        observer.session_finished(data.session, &store, None, &m);
        sessions.push(m);
    }

    Ok(ProtocolRun {
        report: MetricsReport {
            method: Method::Joint.name().to_string(),
            protocol_violating: true,
            seed,
            rotation_acc: None,
            sessions,
        },
        store,
        registry,
    })
}

fn log_session(method: Method, m: &SessionMetrics) {
    log::info!(
        "{method} session {}: joint {:.4} base {:.4} new {}",
        m.session,
        m.joint_acc,
        m.base_acc,
        m.new_acc.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
    );
}
