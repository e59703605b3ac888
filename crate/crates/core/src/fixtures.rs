//! The residence timeline used by tests, the CLI demo and the acceptance
//! suite: Bob lives in Boston, then Davis, then Miami, surrounded by other
//! people's Miami and Boston facts.
//!
//! Embedding overrides place the query on `e0`, the Miami move almost on top
//! of it, the distractors between 0.60 and 0.98, and the Davis move nearly
//! orthogonal, so similarity alone ranks the Davis fact last.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::backends::mock::{HashEmbedder, KeywordChooser, MockBackends, ScriptedPlanner, MOCK_DIM};
use crate::substrate::{Precision, Session, SessionId, Speaker, Timestamp, Turn};

pub const QUERY: &str = "Where did Bob live before moving to Miami?";
pub const BOSTON_FACT: &str = "Bob moved to Boston for graduate school.";
pub const DAVIS_FACT: &str = "Bob moved from Boston to Davis for a job.";
pub const MIAMI_FACT: &str = "Bob moved from Davis to Miami last month.";
pub const SUBQUERY: &str = "residence immediately before the Miami move";

/// Other people's Miami and Boston facts with their similarity to the query.
pub const DISTRACTORS: [(&str, f32); 10] = [
    ("Carol flew to Miami for a conference.", 0.98),
    ("Dan bought a condo in Miami Beach.", 0.95),
    ("Erin studied nursing in Boston.", 0.92),
    ("Frank drove from Boston to Miami in March.", 0.90),
    ("Grace opened a bakery in Miami.", 0.86),
    ("Hank runs marathons in Boston.", 0.82),
    ("Ivy moved to Miami after college.", 0.78),
    ("Jack visited Boston with his sister.", 0.72),
    ("Kate teaches math at a Miami school.", 0.66),
    ("Liam sold his Boston apartment.", 0.60),
];

/// Unit vector with cosine `c` to `e0`, the remainder on axis `axis`.
pub fn layout_vector(c: f32, axis: usize) -> Vec<f32> {
    let mut v = alloc::vec![0.0f32; MOCK_DIM];
    v[0] = c;
    v[axis] = libm::sqrtf(1.0 - c * c);
    v
}

/// Text to vector overrides for the adversarial layout.
pub fn overrides() -> Vec<(String, Vec<f32>)> {
    let mut out = alloc::vec![
        (QUERY.to_string(), layout_vector(1.0, 1)),
        (MIAMI_FACT.to_string(), layout_vector(0.99, 1)),
        (DAVIS_FACT.to_string(), layout_vector(0.05, 2)),
    ];
    for (i, (text, c)) in DISTRACTORS.iter().enumerate() {
        out.push((text.to_string(), layout_vector(*c, 3 + i % (MOCK_DIM - 3))));
    }
    out
}

pub fn planner_rules() -> Vec<(String, String)> {
    alloc::vec![("Bob".to_string(), SUBQUERY.to_string())]
}

pub fn chooser_rules() -> Vec<(String, String)> {
    alloc::vec![("before the Miami move".to_string(), "Boston to Davis".to_string())]
}

fn at(ts: i64, id: &str, lines: &[&str]) -> Session {
    let turns = lines
        .iter()
        .enumerate()
        .map(|(i, text)| Turn {
            session_id: SessionId::new(id),
            index: i as u32 + 1,
            speaker: if i % 2 == 0 { Speaker::User } else { Speaker::Assistant },
            text: (*text).to_string(),
            timestamp: Timestamp(ts + 60 * i as i64),
            precision: Precision::Second,
        })
        .collect();
    Session::new(SessionId::new(id), 0, turns).expect("fixture session")
}

/// Sessions in arrival order.
pub fn sessions() -> Vec<Session> {
    let d = &DISTRACTORS;
    alloc::vec![
        at(1_551_434_400, "bob-2019", &[BOSTON_FACT, "How is the program going?", "Bob adopted a cat named Miso."]),
        at(1_623_319_200, "bob-2021", &[DAVIS_FACT, "Is the commute long?"]),
        at(1_642_240_800, "others-2022a", &[d[0].0, d[1].0, d[2].0, d[3].0]),
        at(1_660_989_600, "others-2022b", &[d[4].0, d[5].0, d[6].0]),
        at(1_675_332_000, "others-2023", &[d[7].0, d[8].0, d[9].0]),
        at(1_693_908_000, "bob-2023", &[MIAMI_FACT, "Do you like the weather there?"]),
    ]
}

/// Mock ports for the fixture: rule extraction, clause summaries, hashed
/// embeddings with the layout overrides, scripted planner and keyword chooser.
pub fn backends() -> MockBackends {
    let mut embedder = HashEmbedder::default();
    for (text, v) in overrides() {
        embedder = embedder.with_override(text, v);
    }
    MockBackends {
        embedder,
        planner: Some(Box::new(ScriptedPlanner { rules: planner_rules() })),
        chooser: Some(Box::new(KeywordChooser { rules: chooser_rules() })),
        ..MockBackends::default()
    }
}
