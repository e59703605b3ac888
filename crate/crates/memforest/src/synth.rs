//! Seeded synthetic conversation histories.
//!
//! Every instance draws people, places and events from one shared pool and
//! spans the same calendar year, so instances overlap in entities and time
//! the way independent users of one deployment do. A few statements recur
//! verbatim across instances.

use memforest_core::substrate::{Precision, Session, SessionId, Speaker, Timestamp, Turn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const PEOPLE: [&str; 12] =
    ["Alice", "Bob", "Carol", "Dan", "Erin", "Frank", "Grace", "Hank", "Ivy", "Jack", "Kate", "Liam"];
pub const PLACES: [&str; 10] =
    ["Boston", "Davis", "Miami", "Denver", "Austin", "Seattle", "Chicago", "Portland", "Atlanta", "Tucson"];
const THINGS: [&str; 8] = ["guitar", "bakery", "garden", "chess club", "marathon", "podcast", "cabin", "bike"];

const FILLER: [&str; 6] =
    ["ok, thanks!", "That sounds nice.", "Got it.", "Sure, go on.", "Interesting, tell me more.", "Thanks, that helps."];

/// Statements shared verbatim by every instance that draws them.
const COMMON: [&str; 4] = [
    "Alice moved to Boston for graduate school.",
    "Bob works at a hospital in Miami.",
    "Carol visited Denver with her brother.",
    "Dan bought a house in Austin.",
];

// 2023-01-01T00:00:00Z
const YEAR_START: i64 = 1_672_531_200;
const DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthParams {
    pub sessions: usize,
    /// User statements per session; each is followed by an assistant reply.
    pub statements: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { sessions: 6, statements: 4 }
    }
}

fn statement(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.15) {
        return COMMON.choose(rng).expect("nonempty").to_string();
    }
    let p = PEOPLE.choose(rng).expect("nonempty");
    let q = PEOPLE.choose(rng).expect("nonempty");
    let a = PLACES.choose(rng).expect("nonempty");
    let b = PLACES.choose(rng).expect("nonempty");
    let t = THINGS.choose(rng).expect("nonempty");
    let n = rng.gen_range(2..40);
    match rng.gen_range(0..8) {
        0 => format!("{p} moved from {a} to {b} for a job."),
        1 => format!("{p} started working at a company in {a}."),
        2 => format!("{p} flew to {a} for a {n}-day trip."),
        3 => format!("{p} cooked dinner for {q} in {a}."),
        4 => format!("{p} joined a {t} group with {q}."),
        5 => format!("{p} adopted a dog after visiting {a}."),
        6 => format!("{p} ran a marathon in {a} in {n} weeks of training."),
        _ => format!("{p} told {q} about the {t} in {a}."),
    }
}

/// Sessions of instance `index` under `seed`, in chronological order.
pub fn instance(seed: u64, index: usize, params: SynthParams) -> Vec<Session> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut days: Vec<i64> = (0..params.sessions).map(|_| rng.gen_range(0..365)).collect();
    days.sort_unstable();
    days.iter()
        .enumerate()
        .map(|(j, day)| {
            let sid = SessionId::new(format!("i{index}-s{j}"));
            let start = YEAR_START + day * DAY + rng.gen_range(8..20) * 3600;
            let mut turns = Vec::with_capacity(2 * params.statements);
            for i in 0..params.statements {
                for (speaker, text) in [
                    (Speaker::User, statement(&mut rng)),
                    (Speaker::Assistant, FILLER.choose(&mut rng).expect("nonempty").to_string()),
                ] {
                    let ts = start + 60 * (2 * i + turns.len() % 2) as i64;
                    turns.push(Turn {
                        session_id: sid.clone(),
                        index: 0,
                        speaker,
                        text,
                        timestamp: Timestamp(ts),
                        precision: Precision::Second,
                    });
                }
            }
            Session::new(sid, 0, turns).expect("generated session is valid")
        })
        .collect()
}

/// `n` leaf anchors strictly increasing one hour apart, for single-tree runs.
pub fn hourly(n: usize) -> Vec<i64> {
    (0..n as i64).map(|i| YEAR_START + 3600 * i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let p = SynthParams::default();
        assert_eq!(instance(7, 1, p), instance(7, 1, p));
        assert_ne!(instance(7, 1, p), instance(7, 2, p));
        let s = instance(7, 3, p);
        assert_eq!(s.len(), p.sessions);
        assert!(s.iter().all(|x| x.turns.len() == 2 * p.statements));
        assert!(s.windows(2).all(|w| w[0].turns[0].timestamp <= w[1].turns[0].timestamp));
    }
}
