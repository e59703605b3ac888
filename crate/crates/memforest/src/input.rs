//! Session input files.
//!
//! The native shape is
//!
//! ```json
//! { "sessions": [ { "session_id": "s1", "timestamp": "2024-07-01T10:00:00Z",
//!                   "turns": [ { "role": "user", "content": "...", "timestamp": 1719828000 } ] } ] }
//! ```
//!
//! Turns without a timestamp inherit the session's. Timestamps may be RFC 3339,
//! `YYYY-MM-DD` (midnight UTC, day precision), `YYYY/MM/DD (Day) HH:MM` as used
//! by LongMemEval, or integer epoch seconds.
//!
//! A LongMemEval instance (`haystack_sessions`, `haystack_dates`, optional
//! `haystack_session_ids`) is accepted as well, as is a list of instances.

use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use memforest_core::substrate::{Precision, Session, SessionId, Speaker, Timestamp, Turn};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("malformed session file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unrecognized timestamp {0:?}")]
    Timestamp(String),
    #[error("session {session}: unknown role {role:?} (expected user or assistant)")]
    Role { session: String, role: String },
    #[error("session {0} has no timestamp and a turn without one")]
    MissingTimestamp(String),
    #[error("instance has {sessions} haystack sessions but {dates} dates")]
    HaystackMismatch { sessions: usize, dates: usize },
    #[error(transparent)]
    Core(#[from] memforest_core::Error),
}

type Result<T> = std::result::Result<T, InputError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawTime {
    Epoch(i64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTurn {
    pub role: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<RawTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSession {
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<RawTime>,
    pub turns: Vec<RawTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFile {
    pub sessions: Vec<RawSession>,
}

#[derive(Debug, Clone, Deserialize)]
struct Haystack {
    #[serde(default)]
    question_id: Option<String>,
    haystack_sessions: Vec<Vec<RawTurn>>,
    haystack_dates: Vec<String>,
    #[serde(default)]
    haystack_session_ids: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyInput {
    Native(SessionFile),
    Instance(Haystack),
    Instances(Vec<Haystack>),
}

/// Parses a timestamp in any accepted form.
pub fn parse_time(raw: &RawTime) -> Result<(Timestamp, Precision)> {
    let s = match raw {
        RawTime::Epoch(t) => return Ok((Timestamp(*t), Precision::Second)),
        RawTime::Text(s) => s.trim(),
    };
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok((Timestamp(t.timestamp()), Precision::Second));
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        let t = d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp();
        return Ok((Timestamp(t), Precision::Day));
    }
    for fmt in ["%Y/%m/%d (%a) %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y/%m/%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok((Timestamp(t.and_utc().timestamp()), Precision::Second));
        }
    }
    if let Ok(t) = s.parse::<i64>() {
        return Ok((Timestamp(t), Precision::Second));
    }
    Err(InputError::Timestamp(s.to_string()))
}

fn speaker(session: &str, role: &str) -> Result<Speaker> {
    match role.to_ascii_lowercase().as_str() {
        "user" | "human" => Ok(Speaker::User),
        "assistant" | "ai" | "bot" => Ok(Speaker::Assistant),
        _ => Err(InputError::Role { session: session.into(), role: role.into() }),
    }
}

impl RawSession {
    /// Converts to an engine session. The store assigns the arrival sequence.
    pub fn to_session(&self) -> Result<Session> {
        let base = self.timestamp.as_ref().map(parse_time).transpose()?;
        let mut turns = Vec::with_capacity(self.turns.len());
        for (i, t) in self.turns.iter().enumerate() {
            let (timestamp, precision) = match (&t.timestamp, base) {
                (Some(raw), _) => parse_time(raw)?,
                (None, Some(b)) => b,
                (None, None) => return Err(InputError::MissingTimestamp(self.session_id.clone())),
            };
            turns.push(Turn {
                session_id: SessionId::new(&self.session_id),
                index: i as u32 + 1,
                speaker: speaker(&self.session_id, &t.role)?,
                text: t.content.clone(),
                timestamp,
                precision,
            });
        }
        Ok(Session::new(SessionId::new(&self.session_id), 0, turns)?)
    }
}

impl Haystack {
    fn into_sessions(self) -> Result<Vec<RawSession>> {
        if self.haystack_sessions.len() != self.haystack_dates.len() {
            return Err(InputError::HaystackMismatch {
                sessions: self.haystack_sessions.len(),
                dates: self.haystack_dates.len(),
            });
        }
        let prefix = self.question_id.unwrap_or_else(|| "session".into());
        let ids = self.haystack_session_ids.unwrap_or_default();
        Ok(self
            .haystack_sessions
            .into_iter()
            .zip(self.haystack_dates)
            .enumerate()
            .map(|(i, (turns, date))| RawSession {
                session_id: ids.get(i).cloned().unwrap_or_else(|| format!("{prefix}-{i}")),
                timestamp: Some(RawTime::Text(date)),
                turns,
            })
            .collect())
    }
}

/// Parses a session file in the native or LongMemEval shape.
pub fn parse_sessions(text: &str) -> Result<Vec<Session>> {
    let raw = match serde_json::from_str::<AnyInput>(text) {
        Ok(AnyInput::Native(f)) => f.sessions,
        Ok(AnyInput::Instance(h)) => h.into_sessions()?,
        Ok(AnyInput::Instances(hs)) => {
            let mut out = Vec::new();
            for h in hs {
                out.extend(h.into_sessions()?);
            }
            out
        }
        // Report the error against the native shape.
        Err(_) => serde_json::from_str::<SessionFile>(text)?.sessions,
    };
    raw.iter().filter(|s| !s.turns.is_empty()).map(RawSession::to_session).collect()
}

pub fn read_sessions(path: &Path) -> Result<Vec<Session>> {
    let text = std::fs::read_to_string(path).map_err(|e| InputError::Io(path.display().to_string(), e))?;
    parse_sessions(&text)
}

/// Renders sessions back into the native shape.
pub fn to_session_file(sessions: &[Session]) -> SessionFile {
    SessionFile {
        sessions: sessions
            .iter()
            .map(|s| RawSession {
                session_id: s.session_id.0.clone(),
                timestamp: None,
                turns: s
                    .turns
                    .iter()
                    .map(|t| RawTurn {
                        role: t.speaker.as_str().into(),
                        content: t.text.clone(),
                        timestamp: Some(RawTime::Epoch(t.timestamp.0)),
                    })
                    .collect(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_forms() {
        let t = |s: &str| parse_time(&RawTime::Text(s.into())).unwrap();
        assert_eq!(t("2024-07-01T10:00:00Z"), (Timestamp(1_719_828_000), Precision::Second));
        assert_eq!(t("2024-07-01T12:00:00+02:00"), (Timestamp(1_719_828_000), Precision::Second));
        assert_eq!(t("2024-07-01"), (Timestamp(1_719_792_000), Precision::Day));
        assert_eq!(t("2024/07/01 (Mon) 10:00"), (Timestamp(1_719_828_000), Precision::Second));
        assert_eq!(parse_time(&RawTime::Epoch(5)).unwrap(), (Timestamp(5), Precision::Second));
        assert!(parse_time(&RawTime::Text("last tuesday".into())).is_err());
    }

    #[test]
    fn turns_inherit_session_time() {
        let s = parse_sessions(
            r#"{"sessions":[{"session_id":"a","timestamp":"2024-07-01",
                "turns":[{"role":"user","content":"hi"},{"role":"assistant","content":"yo","timestamp":1719900000}]}]}"#,
        )
        .unwrap();
        assert_eq!(s[0].turns[0].timestamp, Timestamp(1_719_792_000));
        assert_eq!(s[0].turns[0].precision, Precision::Day);
        assert_eq!(s[0].turns[1].speaker, Speaker::Assistant);
    }

    #[test]
    fn longmemeval_instance() {
        let s = parse_sessions(
            r#"{"question_id":"q1","question":"?","haystack_dates":["2023/05/20 (Sat) 02:21","2023/05/21 (Sun) 09:00"],
                "haystack_session_ids":["x","y"],
                "haystack_sessions":[[{"role":"user","content":"I moved to Davis."}],[{"role":"user","content":"ok"}]]}"#,
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].session_id.as_str(), "y");
        assert!(s[0].turns[0].timestamp < s[1].turns[0].timestamp);
    }

    #[test]
    fn rejects_bad_role_and_missing_time() {
        let bad = r#"{"sessions":[{"session_id":"a","timestamp":1,"turns":[{"role":"narrator","content":"x"}]}]}"#;
        assert!(matches!(parse_sessions(bad), Err(InputError::Role { .. })));
        let bad = r#"{"sessions":[{"session_id":"a","turns":[{"role":"user","content":"x"}]}]}"#;
        assert!(matches!(parse_sessions(bad), Err(InputError::MissingTimestamp(_))));
        assert!(matches!(parse_sessions("{"), Err(InputError::Json(_))));
    }

    #[test]
    fn native_round_trip() {
        let sessions = memforest_core::fixtures::sessions();
        let text = serde_json::to_string(&to_session_file(&sessions)).unwrap();
        let back = parse_sessions(&text).unwrap();
        assert_eq!(back.len(), sessions.len());
        for (a, b) in back.iter().zip(&sessions) {
            assert_eq!(a.turns, b.turns);
        }
    }
}
