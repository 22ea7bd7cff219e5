//! JSON bodies of the HTTP API, shared by the service and its client.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assessor::ScoreDistribution;
use crate::error::Result;
use crate::filters::{FilterId, ParamVector};
use crate::normalization::AbnReport;
use crate::optimizer::{IterationRecord, OptimizerConfig, ParamEdit, StopReason};
use crate::session::{Session, Status};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub id: String,
    pub abn_report: AbnReport,
    pub initial_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub k: ParamVector,
    pub status: Status,
    pub gamma: f64,
    pub config: OptimizerConfig,
    pub abn_report: AbnReport,
    pub history: Vec<IterationRecord>,
    pub width: usize,
    pub height: usize,
}

impl SessionState {
    pub fn of(session: &Session) -> Self {
        SessionState {
            id: session.id().to_string(),
            k: *session.params(),
            status: session.status().clone(),
            gamma: session.gamma(),
            config: session.config().clone(),
            abn_report: session.abn_report().clone(),
            history: session.history().to_vec(),
            width: session.original().width(),
            height: session.original().height(),
        }
    }
}

/// `PATCH /sessions/{id}/params`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsPatch {
    #[serde(default)]
    pub set: BTreeMap<String, f64>,
    #[serde(default)]
    pub fix: Vec<String>,
    #[serde(default)]
    pub unfix: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl ParamsPatch {
    pub fn to_edit(&self) -> Result<ParamEdit> {
        let names = |v: &[String]| v.iter().map(|n| n.parse::<FilterId>()).collect::<Result<Vec<_>>>();
        Ok(ParamEdit {
            set: self
                .set
                .iter()
                .map(|(n, v)| Ok((n.parse::<FilterId>()?, *v)))
                .collect::<Result<Vec<_>>>()?,
            fix: names(&self.fix)?,
            unfix: names(&self.unfix)?,
            gamma: self.gamma,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizeRequest {
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeAccepted {
    pub id: String,
    pub steps: usize,
    /// Sequence number of the last event before this run; follow the
    /// stream from here to see only this run.
    pub events_after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub buckets: Option<ScoreDistribution>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistRequest {
    /// Directory name below the service's data directory.
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    User,
    Optimizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    IterationDone {
        record: IterationRecord,
    },
    PreviewReady {
        iteration: usize,
        url: String,
    },
    StatusChanged {
        status: Status,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<StopReason>,
    },
    ParamsChanged {
        source: ParamSource,
        k: ParamVector,
        gamma: f64,
    },
}

/// One entry of a session's event stream. `seq` increases by one per event
/// emitted; gaps mean dropped previews.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub session_id: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_parses_names() {
        let p: ParamsPatch =
            serde_json::from_str(r#"{"set":{"sat":0.2},"fix":["sat"],"unfix":[],"gamma":0.1}"#).unwrap();
        let e = p.to_edit().unwrap();
        assert_eq!(e.set, vec![(FilterId::Sat, 0.2)]);
        assert_eq!(e.fix, vec![FilterId::Sat]);
        assert_eq!(e.gamma, Some(0.1));
        let bad: ParamsPatch = serde_json::from_str(r#"{"set":{"blur":0.2}}"#).unwrap();
        assert!(bad.to_edit().is_err());
    }

    #[test]
    fn event_round_trip() {
        let ev = SessionEvent {
            seq: 3,
            session_id: "a".into(),
            kind: EventKind::PreviewReady { iteration: 2, url: "/sessions/a/previews/2".into() },
        };
        let json = serde_json::to_string(&ev).unwrap();
        assert!(json.contains(r#""type":"preview_ready""#));
        assert_eq!(serde_json::from_str::<SessionEvent>(&json).unwrap(), ev);
        let ev = SessionEvent {
            seq: 4,
            session_id: "a".into(),
            kind: EventKind::StatusChanged { status: Status::Done, reason: Some(StopReason::Budget) },
        };
        let json = serde_json::to_string(&ev).unwrap();
        assert_eq!(serde_json::from_str::<SessionEvent>(&json).unwrap(), ev);
    }
}
