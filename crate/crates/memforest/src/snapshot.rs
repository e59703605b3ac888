//! On-disk store layout.
//!
//! A store is a directory of newline-delimited JSON files plus one binary
//! file of node embeddings:
//!
//! | file              | records                                        |
//! |-------------------|------------------------------------------------|
//! | `store.jsonl`     | `config`, `counters`, `scene_state`, `pending` |
//! | `sessions.jsonl`  | `session`                                      |
//! | `facts.jsonl`     | `fact`                                         |
//! | `cells.jsonl`     | `cell`                                         |
//! | `placement.jsonl` | `placement`                                    |
//! | `registry.jsonl`  | `registry`                                     |
//! | `trees.jsonl`     | `tree` followed by its `node` records          |
//! | `scenes.jsonl`    | `scene`                                        |
//! | `fact_index.jsonl`| `fact_vector`                                  |
//! | `embeddings.bin`  | node id to vector, little endian               |
//!
//! Every JSONL file starts with a `header` record naming the format version.
//! `embeddings.bin` is `MFEB`, then `u32` version, `u32` dimension, `u64`
//! count, then `count` records of `u64` node id and `dimension` `f32`s.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use memforest_core::memtree::TreeNode;
use memforest_core::router::SceneCluster;
use memforest_core::store::{Counters, StoreParts, TreeRecord};
use memforest_core::substrate::{
    CanonicalFact, DialogueCell, FactId, NodeId, Payload, Session, SessionArtifacts, SessionId, TreeId,
};
use memforest_core::{Store, StoreConfig};
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "memforest-snapshot";
pub const VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MFEB";
const LOCK: &str = ".lock";

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Record { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("store {0} is locked by another process (remove .lock if stale)")]
    Locked(PathBuf),
    #[error(transparent)]
    Core(#[from] memforest_core::Error),
}

type Result<T> = std::result::Result<T, SnapshotError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header { format: String, version: u32, file: String },
    Config(StoreConfig),
    Counters(Counters),
    SceneState { next_id: u64 },
    Pending { facts: BTreeSet<FactId> },
    Session(Session),
    Fact(CanonicalFact),
    Cell(DialogueCell),
    Placement { payload: Payload, tree_id: TreeId, node_id: NodeId },
    Registry { session_id: SessionId, facts: BTreeSet<FactId>, cells: BTreeSet<memforest_core::substrate::CellId>, trees: BTreeSet<TreeId> },
    Tree(TreeRecord),
    Node {
        tree_id: TreeId,
        #[serde(flatten)]
        node: TreeNode,
    },
    Scene {
        #[serde(flatten)]
        cluster: SceneCluster,
        label: String,
    },
    FactVector { fact_id: FactId, vector: Vec<f32> },
}

impl Record {
    fn kind(&self) -> &'static str {
        match self {
            Record::Header { .. } => "header",
            Record::Config(_) => "config",
            Record::Counters(_) => "counters",
            Record::SceneState { .. } => "scene_state",
            Record::Pending { .. } => "pending",
            Record::Session(_) => "session",
            Record::Fact(_) => "fact",
            Record::Cell(_) => "cell",
            Record::Placement { .. } => "placement",
            Record::Registry { .. } => "registry",
            Record::Tree(_) => "tree",
            Record::Node { .. } => "node",
            Record::Scene { .. } => "scene",
            Record::FactVector { .. } => "fact_vector",
        }
    }
}

const FILES: [&str; 9] = [
    "store.jsonl",
    "sessions.jsonl",
    "facts.jsonl",
    "cells.jsonl",
    "placement.jsonl",
    "registry.jsonl",
    "trees.jsonl",
    "scenes.jsonl",
    "fact_index.jsonl",
];

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SnapshotError + '_ {
    move |source| SnapshotError::Io { path: path.to_path_buf(), source }
}

/// Whether `dir` holds a snapshot.
pub fn exists(dir: &Path) -> bool {
    dir.join("store.jsonl").is_file()
}

fn records_of(parts: &StoreParts) -> Vec<(&'static str, Vec<Record>)> {
    let mut trees = Vec::new();
    for t in &parts.trees {
        trees.push(Record::Tree(t.clone()));
        for (tid, n) in parts.nodes.iter().filter(|(tid, _)| *tid == t.tree_id) {
            trees.push(Record::Node { tree_id: *tid, node: n.clone() });
        }
    }
    vec![
        (
            "store.jsonl",
            vec![
                Record::Config(parts.config.clone()),
                Record::Counters(parts.counters),
                Record::SceneState { next_id: parts.scene_next_id },
                Record::Pending { facts: parts.pending_scene.clone() },
            ],
        ),
        ("sessions.jsonl", parts.sessions.iter().cloned().map(Record::Session).collect()),
        ("facts.jsonl", parts.facts.iter().cloned().map(Record::Fact).collect()),
        ("cells.jsonl", parts.cells.iter().cloned().map(Record::Cell).collect()),
        (
            "placement.jsonl",
            parts
                .placement
                .iter()
                .flat_map(|(p, set)| {
                    set.iter().map(|(t, n)| Record::Placement { payload: *p, tree_id: *t, node_id: *n })
                })
                .collect(),
        ),
        (
            "registry.jsonl",
            parts
                .registry
                .iter()
                .map(|(s, a)| Record::Registry {
                    session_id: s.clone(),
                    facts: a.facts.clone(),
                    cells: a.cells.clone(),
                    trees: a.trees.clone(),
                })
                .collect(),
        ),
        ("trees.jsonl", trees),
        (
            "scenes.jsonl",
            parts
                .scenes
                .iter()
                .map(|c| Record::Scene { label: c.label().to_string(), cluster: c.clone() })
                .collect(),
        ),
        (
            "fact_index.jsonl",
            parts.fact_vectors.iter().map(|(f, v)| Record::FactVector { fact_id: *f, vector: v.clone() }).collect(),
        ),
    ]
}

fn write_jsonl(path: &Path, file: &str, records: &[Record]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut w = BufWriter::new(File::create(&tmp).map_err(io(&tmp))?);
    let header = Record::Header { format: FORMAT.into(), version: VERSION, file: file.trim_end_matches(".jsonl").into() };
    for r in std::iter::once(&header).chain(records) {
        serde_json::to_writer(&mut w, r).map_err(|e| SnapshotError::Format { path: path.into(), message: e.to_string() })?;
        w.write_all(b"\n").map_err(io(&tmp))?;
    }
    w.into_inner().map_err(|e| SnapshotError::Io { path: tmp.clone(), source: e.into_error() })?.sync_all().map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

fn write_embeddings(path: &Path, rows: &[(NodeId, Vec<f32>)]) -> Result<()> {
    let dim = rows.first().map_or(0, |(_, v)| v.len());
    let tmp = path.with_extension("bin.tmp");
    let mut w = BufWriter::new(File::create(&tmp).map_err(io(&tmp))?);
    let mut buf = Vec::with_capacity(20 + rows.len() * (8 + 4 * dim));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for (id, v) in rows {
        if v.len() != dim {
            return Err(SnapshotError::Format { path: path.into(), message: format!("node {id} has dimension {}", v.len()) });
        }
        buf.extend_from_slice(&id.0.to_le_bytes());
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io(&tmp))?;
    w.into_inner().map_err(|e| SnapshotError::Io { path: tmp.clone(), source: e.into_error() })?.sync_all().map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

/// Writes `store` into `dir`, creating it if needed. Output is a pure
/// function of the store's state.
pub fn save(store: &Store, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let parts = store.to_parts();
    for (file, records) in records_of(&parts) {
        write_jsonl(&dir.join(file), file, &records)?;
    }
    write_embeddings(&dir.join("embeddings.bin"), &parts.node_vectors)
}

fn read_jsonl(path: &Path, file: &str) -> Result<Vec<Record>> {
    let r = BufReader::new(File::open(path).map_err(io(path))?);
    let mut out = Vec::new();
    let mut header = false;
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| SnapshotError::Record { path: path.into(), line: i + 1, message: e.to_string() })?;
        if header {
            out.push(rec);
            continue;
        }
        match &rec {
            Record::Header { format, version, file: f } if format == FORMAT && f == file.trim_end_matches(".jsonl") => {
                if *version != VERSION {
                    return Err(SnapshotError::Format {
                        path: path.into(),
                        message: format!("format version {version} is not supported (expected {VERSION})"),
                    });
                }
                header = true;
            }
            _ => break,
        }
    }
    if !header {
        return Err(SnapshotError::Format { path: path.into(), message: "missing header record".into() });
    }
    Ok(out)
}

fn read_embeddings(path: &Path) -> Result<Vec<(NodeId, Vec<f32>)>> {
    let mut bytes = Vec::new();
    File::open(path).map_err(io(path))?.read_to_end(&mut bytes).map_err(io(path))?;
    let bad = |m: &str| SnapshotError::Format { path: path.into(), message: m.into() };
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(bad("not an embeddings file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(4) != VERSION {
        return Err(bad("unsupported embeddings version"));
    }
    let dim = u32_at(8) as usize;
    let count = u64_at(12) as usize;
    let width = 8 + 4 * dim;
    if bytes.len() != 20 + count * width {
        return Err(bad("length does not match header"));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let o = 20 + i * width;
        let id = NodeId(u64_at(o));
        let v = (0..dim)
            .map(|j| f32::from_le_bytes(bytes[o + 8 + 4 * j..o + 12 + 4 * j].try_into().expect("4 bytes")))
            .collect();
        out.push((id, v));
    }
    Ok(out)
}

fn unexpected(path: &Path, rec: &Record) -> SnapshotError {
    SnapshotError::Format { path: path.into(), message: format!("unexpected {} record", rec.kind()) }
}

/// Reads the store in `dir`. The result passes the store's invariant check.
pub fn load(dir: &Path) -> Result<Store> {
    let mut config = None;
    let mut counters = None;
    let mut scene_next_id = None;
    let mut parts = StoreParts {
        config: StoreConfig::default(),
        counters: Counters::default(),
        sessions: Vec::new(),
        facts: Vec::new(),
        cells: Vec::new(),
        placement: Default::default(),
        registry: Default::default(),
        trees: Vec::new(),
        nodes: Vec::new(),
        scene_next_id: 1,
        scenes: Vec::new(),
        pending_scene: BTreeSet::new(),
        node_vectors: Vec::new(),
        fact_vectors: Vec::new(),
    };
    for file in FILES {
        let path = dir.join(file);
        for rec in read_jsonl(&path, file)? {
            match (file, rec) {
                ("store.jsonl", Record::Config(c)) => config = Some(c),
                ("store.jsonl", Record::Counters(c)) => counters = Some(c),
                ("store.jsonl", Record::SceneState { next_id }) => scene_next_id = Some(next_id),
                ("store.jsonl", Record::Pending { facts }) => parts.pending_scene = facts,
                ("sessions.jsonl", Record::Session(s)) => parts.sessions.push(s),
                ("facts.jsonl", Record::Fact(f)) => parts.facts.push(f),
                ("cells.jsonl", Record::Cell(c)) => parts.cells.push(c),
                ("placement.jsonl", Record::Placement { payload, tree_id, node_id }) => {
                    parts.placement.insert(payload, tree_id, node_id)
                }
                ("registry.jsonl", Record::Registry { session_id, facts, cells, trees }) => {
                    parts.registry.register(session_id, SessionArtifacts { facts, cells, trees })
                }
                ("trees.jsonl", Record::Tree(t)) => parts.trees.push(t),
                ("trees.jsonl", Record::Node { tree_id, node }) => parts.nodes.push((tree_id, node)),
                ("scenes.jsonl", Record::Scene { cluster, .. }) => parts.scenes.push(cluster),
                ("fact_index.jsonl", Record::FactVector { fact_id, vector }) => parts.fact_vectors.push((fact_id, vector)),
                (_, rec) => return Err(unexpected(&path, &rec)),
            }
        }
    }
    let store_path = dir.join("store.jsonl");
    let missing = |what: &str| SnapshotError::Format { path: store_path.clone(), message: format!("missing {what} record") };
    parts.config = config.ok_or_else(|| missing("config"))?;
    parts.counters = counters.ok_or_else(|| missing("counters"))?;
    parts.scene_next_id = scene_next_id.ok_or_else(|| missing("scene_state"))?;
    parts.node_vectors = read_embeddings(&dir.join("embeddings.bin"))?;
    Ok(Store::from_parts(parts)?)
}

/// Exclusive access to a store directory, released on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(SnapshotError::Locked(dir.to_path_buf())),
            Err(e) => Err(SnapshotError::Io { path, source: e }),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
