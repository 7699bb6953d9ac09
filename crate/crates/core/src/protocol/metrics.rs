use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_CSV_HEADER: &str = "session,joint_acc,base_acc,new_acc";

/// Evaluation after one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: usize,
    /// Number of classes encountered so far.
    pub classes: usize,
    pub joint_acc: f64,
    pub base_acc: f64,
    /// Accuracy on non-base classes; absent in the base session.
    pub new_acc: Option<f64>,
    /// Mean cosine similarity between this session's prototypes and every
    /// earlier one.
    pub new_old_cosine: Option<f64>,
    /// Number of extractor parameters updated in this session.
    pub trainable: Option<usize>,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    /// Set for baselines that read data of more than one session.
    pub protocol_violating: bool,
    pub seed: u64,
    /// Held-out rotation accuracy after base training, for the SS variant.
    pub rotation_acc: Option<f64>,
    pub sessions: Vec<SessionMetrics>,
}

impl MetricsReport {
    pub fn final_session(&self) -> Option<&SessionMetrics> {
        self.sessions.last()
    }

    /// One row per session under [`METRICS_CSV_HEADER`]; `new_acc` is empty
    /// when absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for s in &self.sessions {
            let _ = write!(out, "{},{},{},", s.session, s.joint_acc, s.base_acc);
            if let Some(n) = s.new_acc {
                let _ = write!(out, "{n}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sessions.iter().enumerate() {
            if s.session != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "metrics row {} is labelled session {}",
                    i + 1,
                    s.session
                )));
            }
            let accs = [Some(s.joint_acc), Some(s.base_acc), s.new_acc];
            if accs.into_iter().flatten().any(|a| !(0.0..=1.0).contains(&a)) {
                return Err(Error::InvalidArgument(format!(
                    "session {} has an accuracy outside [0, 1]",
                    s.session
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(session: usize, new_acc: Option<f64>) -> SessionMetrics {
        SessionMetrics {
            session,
            classes: 2 * session,
            joint_acc: 0.5,
            base_acc: 0.75,
            new_acc,
            new_old_cosine: None,
            trainable: None,
            loss_trace: vec![1.0, 0.5],
        }
    }

    fn report() -> MetricsReport {
        MetricsReport {
            method: "FSLL".into(),
            protocol_violating: false,
            seed: 1,
            rotation_acc: None,
            sessions: vec![row(1, None), row(2, Some(0.25))],
        }
    }

    #[test]
    fn csv_layout() {
        assert_eq!(
            report().to_csv(),
            "session,joint_acc,base_acc,new_acc\n1,0.5,0.75,\n2,0.5,0.75,0.25\n"
        );
    }

    #[test]
    fn json_round_trip() {
        let r = report();
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(MetricsReport::from_json("{").is_err());
    }

    #[test]
    fn out_of_range_rejected() {
        let mut r = report();
        r.sessions[1].joint_acc = 1.5;
        assert!(r.validate().is_err());
    }
}
