use alloc::format;
use alloc::vec::Vec;

use crate::backends::mock::MockBackends;
use crate::ingest::ChunkErrorPolicy;
use crate::substrate::{Precision, Session, SessionId, Speaker, Timestamp, Turn};
use crate::{Store, StoreConfig};

pub const DAY: i64 = 86_400;

/// Session whose turns alternate user/assistant a minute apart on `day`.
pub fn session(id: &str, day: i64, lines: &[&str]) -> Session {
    let turns = lines
        .iter()
        .enumerate()
        .map(|(i, text)| Turn {
            session_id: SessionId::new(id),
            index: i as u32 + 1,
            speaker: if i % 2 == 0 { Speaker::User } else { Speaker::Assistant },
            text: (*text).into(),
            timestamp: Timestamp(1_600_000_000 + day * DAY + i as i64 * 60),
            precision: Precision::Second,
        })
        .collect();
    Session::new(SessionId::new(id), 0, turns).unwrap()
}

pub fn corpus() -> Vec<Session> {
    let people = ["Bob", "Alice", "Carol", "Dave"];
    let cities = ["Boston", "Miami", "Davis", "Denver", "Austin"];
    (0..6)
        .map(|i| {
            let p = people[i % people.len()];
            let c = cities[i % cities.len()];
            let q = cities[(i + 2) % cities.len()];
            let lines = [
                format!("{p} moved to {c} last spring."),
                format!("Noted that {p} lives in {c} now."),
                format!("{p} started a new job at Acme in {q}."),
                format!("{p} adopted a dog named Rex."),
            ];
            let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
            session(&format!("s{i}"), i as i64 * 10, &refs)
        })
        .collect()
}

pub fn build(sessions: &[Session], config: StoreConfig, mock: &MockBackends) -> Store {
    let mut store = Store::new(config).unwrap();
    for s in sessions {
        store.ingest_session(s.clone(), &mock.ports(), ChunkErrorPolicy::SkipChunk).unwrap();
    }
    store
}
