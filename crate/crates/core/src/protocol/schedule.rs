use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Samples, Standardizer};
use crate::error::{Error, Result};

/// Training data of one session, `D^(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionData {
    /// 1-based session index; session 1 is the base session.
    pub session: usize,
    pub classes: BTreeSet<usize>,
    pub train: Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub base_classes: usize,
    /// C: new classes per few-shot session.
    pub ways: usize,
    /// K: training samples per new class.
    pub shots: usize,
    /// Number of few-shot sessions after the base session.
    pub sessions: usize,
    /// Standardize every partition with statistics of the base training set.
    pub standardize: bool,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            base_classes: 12,
            ways: 2,
            shots: 2,
            sessions: 4,
            standardize: true,
        }
    }
}

/// Ordered sessions with pairwise-disjoint label sets plus the test pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSchedule {
    sessions: Vec<SessionData>,
    test: Samples,
    grid_side: Option<usize>,
    input_dim: usize,
}

/// Read access to a schedule, one session at a time.
///
/// The protocol only ever asks for the training set of the session it is
/// running, which lets tests count accesses.
pub trait SessionSource {
    fn num_sessions(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn grid_side(&self) -> Option<usize>;
    /// Label set `L^(t)`, 1-based.
    fn classes(&self, session: usize) -> Result<&BTreeSet<usize>>;
    /// Training set `D^(t)`, 1-based.
    fn train_set(&self, session: usize) -> Result<&SessionData>;
    /// Test samples of every class in `L^(1) ∪ … ∪ L^(t)`.
    fn test_pool(&self, session: usize) -> Result<Samples>;
}

/// Splits `dataset` into a base session and `spec.sessions` C-way K-shot sessions.
///
/// Classes are taken in label order (base first); the K shots of each
/// few-shot class are drawn without replacement under `seed`.
pub fn build_schedule(dataset: &Dataset, spec: &ScheduleSpec, seed: u64) -> Result<SessionSchedule> {
    dataset.validate()?;
    if spec.base_classes == 0 || spec.ways == 0 || spec.shots == 0 {
        return Err(Error::InvalidArgument(
            "base classes, ways and shots must all be >= 1".into(),
        ));
    }
    let needed = spec.base_classes + spec.ways * spec.sessions;
    if needed > dataset.num_classes {
        return Err(Error::InvalidArgument(format!(
            "schedule needs {needed} classes, dataset has {}",
            dataset.num_classes
        )));
    }

    let counts = dataset.train.class_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: BTreeSet<usize> = (0..spec.base_classes).collect();
    let mut sessions = vec![SessionData {
        session: 1,
        train: dataset.train.of_classes(&base),
        classes: base.clone(),
    }];
    for s in 0..spec.sessions {
        let start = spec.base_classes + s * spec.ways;
        let classes: BTreeSet<usize> = (start..start + spec.ways).collect();
        let mut idx = Vec::with_capacity(spec.ways * spec.shots);
        for &c in &classes {
            let have = counts.get(&c).copied().unwrap_or(0);
            if have < spec.shots {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has {have} training samples, {} shots requested",
                    spec.shots
                )));
            }
            let rows: Vec<usize> = (0..dataset.train.len())
                .filter(|&i| dataset.train.labels[i] == c)
                .collect();
            let mut picked: Vec<usize> = sample(&mut rng, rows.len(), spec.shots)
                .into_iter()
                .map(|k| rows[k])
                .collect();
            picked.sort_unstable();
            idx.extend(picked);
        }
        sessions.push(SessionData {
            session: s + 2,
            train: dataset.train.select(&idx),
            classes,
        });
    }

    let scheduled: BTreeSet<usize> = (0..needed).collect();
    let mut test = dataset.test.of_classes(&scheduled);
    if spec.standardize {
        let st = Standardizer::fit(&sessions[0].train)?;
        for s in &mut sessions {
            st.apply(&mut s.train);
        }
        st.apply(&mut test);
    }
    Ok(SessionSchedule {
        sessions,
        test,
        grid_side: dataset.grid_side,
        input_dim: dataset.dim(),
    })
}

impl SessionSchedule {
    pub fn from_parts(sessions: Vec<SessionData>, test: Samples, grid_side: Option<usize>) -> Result<Self> {
        let input_dim = test.dim();
        let mut seen = BTreeSet::new();
        for (i, s) in sessions.iter().enumerate() {
            if s.session != i + 1 {
                return Err(Error::ProtocolViolation(format!(
                    "session {} found at position {}",
                    s.session,
                    i + 1
                )));
            }
            if s.train.is_empty() {
                return Err(Error::Empty(format!("session {} has no training data", s.session)));
            }
            if s.train.dim() != input_dim {
                return Err(Error::shape("session data", input_dim, s.train.dim()));
            }
            if s.train.labels.iter().any(|l| !s.classes.contains(l)) {
                return Err(Error::ProtocolViolation(format!(
                    "session {} has samples outside its label set",
                    s.session
                )));
            }
            for &c in &s.classes {
                if !seen.insert(c) {
                    return Err(Error::ProtocolViolation(format!(
                        "class {c} appears in more than one session"
                    )));
                }
            }
        }
        Ok(Self {
            sessions,
            test,
            grid_side,
            input_dim,
        })
    }

    pub fn sessions(&self) -> &[SessionData] {
        &self.sessions
    }

    pub fn test(&self) -> &Samples {
        &self.test
    }

    fn session(&self, t: usize) -> Result<&SessionData> {
        t.checked_sub(1)
            .and_then(|i| self.sessions.get(i))
            .ok_or_else(|| Error::InvalidArgument(format!("no session {t} in a {}-session schedule", self.sessions.len())))
    }
}

impl SessionSource for SessionSchedule {
    fn num_sessions(&self) -> usize {
        self.sessions.len()
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn grid_side(&self) -> Option<usize> {
        self.grid_side
    }

    fn classes(&self, session: usize) -> Result<&BTreeSet<usize>> {
        Ok(&self.session(session)?.classes)
    }

    fn train_set(&self, session: usize) -> Result<&SessionData> {
        self.session(session)
    }

    fn test_pool(&self, session: usize) -> Result<Samples> {
        let mut seen = BTreeSet::new();
        for t in 1..=session {
            seen.extend(self.session(t)?.classes.iter().copied());
        }
        Ok(self.test.of_classes(&seen))
    }
}
