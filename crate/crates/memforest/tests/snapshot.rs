//! Snapshot directory layout, locking and corruption handling.

use std::fs;
use std::path::Path;

use memforest::snapshot::{self, SnapshotError, StoreLock, FORMAT, VERSION};
use memforest_core::backends::mock::MockBackends;
use memforest_core::fixtures;
use memforest_core::ingest::ChunkErrorPolicy;
use memforest_core::retrieval::{Mode, RetrievalConfig};
use memforest_core::{Store, StoreConfig};
use serde_json::Value;

fn residence_store(mocks: &MockBackends) -> Store {
    let mut store = Store::new(StoreConfig::default()).unwrap();
    for s in fixtures::sessions() {
        store.ingest_session(s, &mocks.ports(), ChunkErrorPolicy::Abort).unwrap();
    }
    store
}

fn saved(dir: &Path) -> Store {
    let store = residence_store(&fixtures::backends());
    snapshot::save(&store, dir).unwrap();
    store
}

#[test]
fn every_file_opens_with_a_header() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let mut jsonl = 0;
    for entry in fs::read_dir(tmp.path()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".jsonl") {
            let text = fs::read_to_string(&path).unwrap();
            let head: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
            assert_eq!(head["kind"], "header", "{name}");
            assert_eq!(head["format"], FORMAT);
            assert_eq!(head["version"], VERSION);
            assert_eq!(head["file"], stem);
            jsonl += 1;
        } else {
            assert_eq!(name, "embeddings.bin");
            assert_eq!(&fs::read(&path).unwrap()[..4], b"MFEB");
        }
    }
    assert_eq!(jsonl, 9);
    assert!(snapshot::exists(tmp.path()));
    assert!(!snapshot::exists(&tmp.path().join("elsewhere")));
}

#[test]
fn loaded_store_answers_like_the_original() {
    let tmp = tempfile::tempdir().unwrap();
    let store = saved(tmp.path());
    let loaded = snapshot::load(tmp.path()).unwrap();
    assert_eq!(loaded, store);
    let mocks = fixtures::backends();
    let cfg = RetrievalConfig::default();
    for mode in Mode::ALL {
        let a = store.retrieve(fixtures::QUERY, mode, &cfg, &mocks.ports()).unwrap();
        let b = loaded.retrieve(fixtures::QUERY, mode, &cfg, &mocks.ports()).unwrap();
        assert_eq!(a, b, "{mode}");
    }
}

#[test]
fn lock_is_exclusive_until_dropped() {
    let tmp = tempfile::tempdir().unwrap();
    let lock = StoreLock::acquire(tmp.path()).unwrap();
    assert!(matches!(StoreLock::acquire(tmp.path()), Err(SnapshotError::Locked(_))));
    drop(lock);
    let again = StoreLock::acquire(tmp.path()).unwrap();
    drop(again);
    assert!(!tmp.path().join(".lock").exists());
}

#[test]
fn truncated_record_names_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let path = tmp.path().join("facts.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let cut = &lines[2][..lines[2].len() / 2];
    lines[2] = cut;
    fs::write(&path, lines.join("\n")).unwrap();
    match snapshot::load(tmp.path()) {
        Err(SnapshotError::Record { path: p, line, .. }) => {
            assert!(p.ends_with("facts.jsonl"));
            assert_eq!(line, 3);
        }
        other => panic!("expected a record error, got {other:?}"),
    }
}

#[test]
fn newer_format_version_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let path = tmp.path().join("cells.jsonl");
    let text = fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":2", 1);
    fs::write(&path, text).unwrap();
    let err = snapshot::load(tmp.path()).unwrap_err();
    assert!(matches!(err, SnapshotError::Format { .. }), "{err}");
    assert!(err.to_string().contains("version 2"), "{err}");
}

#[test]
fn empty_or_missing_files_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    fs::write(tmp.path().join("registry.jsonl"), "").unwrap();
    assert!(matches!(snapshot::load(tmp.path()), Err(SnapshotError::Format { .. })));

    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    fs::remove_file(tmp.path().join("trees.jsonl")).unwrap();
    assert!(matches!(snapshot::load(tmp.path()), Err(SnapshotError::Io { .. })));
}

#[test]
fn damaged_embeddings_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let path = tmp.path().join("embeddings.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(snapshot::load(tmp.path()), Err(SnapshotError::Format { .. })));
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(snapshot::load(tmp.path()), Err(SnapshotError::Format { .. })));
}

#[test]
fn records_in_the_wrong_file_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let facts = fs::read_to_string(tmp.path().join("facts.jsonl")).unwrap();
    let cells = fs::read_to_string(tmp.path().join("cells.jsonl")).unwrap();
    let stray = facts.lines().nth(1).unwrap();
    fs::write(tmp.path().join("cells.jsonl"), format!("{cells}{stray}\n")).unwrap();
    let err = snapshot::load(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("unexpected fact record"), "{err}");
}

#[test]
fn inconsistent_placement_fails_the_invariant_check() {
    let tmp = tempfile::tempdir().unwrap();
    saved(tmp.path());
    let path = tmp.path().join("placement.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().take(text.lines().count() - 1).collect();
    fs::write(&path, kept.join("\n") + "\n").unwrap();
    assert!(matches!(snapshot::load(tmp.path()), Err(SnapshotError::Core(_))));
}
