//! Shared fixtures for the kernel benchmarks.

use fsll_core::protocol::{train_base, SessionSource};
use fsll_core::{build_schedule, ParameterStore, PrototypeRegistry, Result, ScheduleSpec, SessionSchedule, SyntheticSpec};
use fsll_core::{ModelConfig, TrainConfig};

/// A base-trained model with its schedule, ready for session 2.
pub struct Fixture {
    pub schedule: SessionSchedule,
    pub store: ParameterStore,
    pub registry: PrototypeRegistry,
    pub train: TrainConfig,
}

/// 20 classes in 16 dimensions, 12 base classes, base trained for `base_epochs`.
pub fn fixture(base_epochs: usize) -> Result<Fixture> {
    let dataset = fsll_core::data::generate_synthetic(&SyntheticSpec::default())?;
    let schedule = build_schedule(&dataset, &ScheduleSpec::default(), 0)?;
    let base = schedule.train_set(1)?;
    let train = TrainConfig {
        base_epochs,
        session_lr: 0.01,
        ..TrainConfig::default()
    };
    let mut store = ParameterStore::new(
        ModelConfig::new(schedule.input_dim(), vec![64], 32, base.classes.len()),
        0,
    )?;
    let mut registry = PrototypeRegistry::new();
    train_base(&mut store, &mut registry, base, &train, 0)?;
    Ok(Fixture {
        schedule,
        store,
        registry,
        train,
    })
}
