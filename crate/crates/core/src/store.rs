//! SQLite-backed storage for the audio catalog and the active-learning
//! tables.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rusqlite::{params, Connection, OptionalExtension, Transaction, TransactionBehavior};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::committee::{LabeledSample, MedoidTier, Provenance};
use crate::consensus::{
    build_doubt_worklist, compute_consensus, normalize_class_name, ChunkHistory, ConsensusError, ConsensusOutcome,
};
use crate::domain::{
    validate_annotation, AudioId, AudioRecord, ChunkAnnotation, ChunkId, ClassId, ClassOrigin, DomainError,
    EmbeddingRecord, GroupId, IterationId, LabelerGroup, LabelerId, NodeId, Ontology, OntologyClass, Timestamp,
    Window,
};
use crate::iteration::{IterationMedoid, IterationRecord, ProposedAudio, SelectionPath, Strategy};
use crate::partition::PartitionPlan;

pub const SCHEMA_VERSION: i64 = 1;

/// Window locks older than this are considered abandoned.
pub const LOCK_TTL_SECS: i64 = 3600;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store schema version {found} is newer than supported {supported}")]
    IncompatibleVersion { found: i64, supported: i64 },
    #[error("unknown audio {0}")]
    UnknownAudio(AudioId),
    #[error("unknown labeler {0}")]
    UnknownLabeler(LabelerId),
    #[error("unknown iteration {0}")]
    UnknownIteration(IterationId),
    #[error("unknown chunk {0}")]
    UnknownChunk(ChunkId),
    #[error("unknown suggestion {0}")]
    UnknownSuggestion(i64),
    #[error("audio {0} was never proposed")]
    NotProposed(AudioId),
    #[error("audio {audio} is not assigned to the group of labeler {labeler}")]
    WrongGroup { audio: AudioId, labeler: LabelerId },
    #[error("chunk {0} is not an open Doubt of this labeler")]
    NotOpenDoubt(ChunkId),
    #[error("class name {0:?} already exists")]
    DuplicateName(String),
    #[error("class name is empty")]
    EmptyName,
    #[error("a resolution needs at least one chunk")]
    EmptyReplacement,
    #[error("outcome for {audio} does not belong to iteration {iteration}")]
    ForeignOutcome { audio: AudioId, iteration: IterationId },
    #[error("window is locked by another iteration")]
    WindowBusy,
    #[error("injected fault at write boundary {0}")]
    InjectedFault(usize),
    #[error("corrupt row: {0}")]
    Corrupt(String),
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Sqlite(#[from] rusqlite::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

const SCHEMA: &str = "
CREATE TABLE Projects (
    id INTEGER PRIMARY KEY,
    name TEXT NOT NULL UNIQUE
);
CREATE TABLE Sources (
    id INTEGER PRIMARY KEY,
    project_id INTEGER NOT NULL REFERENCES Projects(id),
    name TEXT NOT NULL,
    UNIQUE (project_id, name)
);
CREATE TABLE NodeTypes (
    id INTEGER PRIMARY KEY,
    name TEXT NOT NULL UNIQUE
);
CREATE TABLE Nodes (
    id TEXT PRIMARY KEY,
    source_id INTEGER NOT NULL REFERENCES Sources(id),
    node_type_id INTEGER NOT NULL REFERENCES NodeTypes(id)
);
CREATE TABLE Paths (
    id INTEGER PRIMARY KEY,
    path TEXT NOT NULL UNIQUE
);
CREATE TABLE Ontology (
    class_id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    origin TEXT NOT NULL CHECK (origin IN ('seed', 'suggested')),
    active INTEGER NOT NULL,
    available_from INTEGER
);
CREATE UNIQUE INDEX ontology_active_name ON Ontology (lower(name)) WHERE active = 1;
CREATE TABLE LabelerGroups (
    id INTEGER PRIMARY KEY
);
CREATE TABLE Labelers (
    id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    group_id INTEGER NOT NULL REFERENCES LabelerGroups(id)
);
CREATE TABLE OntologySuggestions (
    id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    norm_name TEXT NOT NULL,
    status TEXT NOT NULL CHECK (status IN ('pending', 'approved', 'rejected')),
    class_id INTEGER REFERENCES Ontology(class_id),
    created_at INTEGER NOT NULL,
    decided_at INTEGER
);
CREATE UNIQUE INDEX suggestion_open_name ON OntologySuggestions (norm_name) WHERE status != 'rejected';
CREATE TABLE SuggestionCredits (
    suggestion_id INTEGER NOT NULL REFERENCES OntologySuggestions(id),
    labeler_id INTEGER NOT NULL REFERENCES Labelers(id),
    PRIMARY KEY (suggestion_id, labeler_id)
);
CREATE TABLE Audios (
    id TEXT PRIMARY KEY,
    path_id INTEGER NOT NULL REFERENCES Paths(id),
    node_id TEXT NOT NULL REFERENCES Nodes(id),
    filename TEXT NOT NULL,
    recorded_at INTEGER NOT NULL,
    sampling_rate INTEGER NOT NULL,
    bits_per_sample INTEGER NOT NULL,
    duration REAL NOT NULL CHECK (duration > 0),
    channels INTEGER NOT NULL,
    UNIQUE (node_id, filename)
);
CREATE INDEX audios_node_time ON Audios (node_id, recorded_at);
CREATE TABLE Embeddings (
    audio_id TEXT PRIMARY KEY REFERENCES Audios(id),
    dim INTEGER NOT NULL,
    vector BLOB NOT NULL,
    top1_class INTEGER NOT NULL,
    top1_prob REAL NOT NULL CHECK (top1_prob >= 0 AND top1_prob <= 1)
);
CREATE TABLE ALPreprocessing (
    iteration_id INTEGER PRIMARY KEY,
    node_id TEXT NOT NULL REFERENCES Nodes(id),
    window_start INTEGER NOT NULL,
    window_end INTEGER NOT NULL,
    audio_count INTEGER NOT NULL,
    fold_count INTEGER NOT NULL,
    created_at INTEGER NOT NULL,
    labeled_pct REAL NOT NULL,
    labeling_index INTEGER NOT NULL,
    strategy TEXT NOT NULL,
    path TEXT NOT NULL,
    classifier_fallback INTEGER NOT NULL,
    budget INTEGER NOT NULL,
    plan_id INTEGER REFERENCES PartitionPlans(id),
    n_ds INTEGER NOT NULL,
    set_index INTEGER NOT NULL,
    set_size INTEGER NOT NULL
);
CREATE TABLE WavsProposed (
    id INTEGER PRIMARY KEY,
    iteration_id INTEGER NOT NULL REFERENCES ALPreprocessing(iteration_id),
    audio_id TEXT NOT NULL UNIQUE REFERENCES Audios(id),
    label INTEGER REFERENCES Ontology(class_id),
    labeler_count INTEGER NOT NULL DEFAULT 0,
    agreement_pct REAL NOT NULL DEFAULT 0,
    filename TEXT NOT NULL,
    node_id TEXT NOT NULL REFERENCES Nodes(id),
    rank INTEGER NOT NULL,
    provenance TEXT NOT NULL,
    group_id INTEGER REFERENCES LabelerGroups(id),
    labeled_seq INTEGER,
    UNIQUE (iteration_id, rank)
);
CREATE TABLE IterationMedoids (
    iteration_id INTEGER NOT NULL REFERENCES ALPreprocessing(iteration_id),
    audio_id TEXT NOT NULL REFERENCES Audios(id),
    class_id INTEGER NOT NULL REFERENCES Ontology(class_id),
    tier TEXT NOT NULL,
    position INTEGER NOT NULL,
    PRIMARY KEY (iteration_id, audio_id)
);
CREATE TABLE Chunks (
    id INTEGER PRIMARY KEY,
    audio_id TEXT NOT NULL REFERENCES Audios(id),
    class_id INTEGER NOT NULL REFERENCES Ontology(class_id),
    labeler_id INTEGER NOT NULL REFERENCES Labelers(id),
    onset REAL NOT NULL,
    offset REAL NOT NULL,
    superseded_by INTEGER REFERENCES Chunks(id),
    created_at INTEGER NOT NULL,
    CHECK (onset >= 0 AND onset < offset)
);
CREATE INDEX chunks_audio ON Chunks (audio_id);
CREATE INDEX chunks_labeler ON Chunks (labeler_id);
CREATE TABLE PartitionPlans (
    id INTEGER PRIMARY KEY,
    node_id TEXT NOT NULL REFERENCES Nodes(id),
    window_start INTEGER NOT NULL,
    window_end INTEGER NOT NULL,
    n_ds INTEGER NOT NULL,
    next_set INTEGER NOT NULL,
    created_at INTEGER NOT NULL
);
CREATE TABLE PartitionMembers (
    plan_id INTEGER NOT NULL REFERENCES PartitionPlans(id),
    set_index INTEGER NOT NULL,
    audio_id TEXT NOT NULL REFERENCES Audios(id),
    PRIMARY KEY (plan_id, audio_id)
);
CREATE TABLE WindowLocks (
    node_id TEXT NOT NULL,
    window_start INTEGER NOT NULL,
    window_end INTEGER NOT NULL,
    holder TEXT NOT NULL,
    acquired_at INTEGER NOT NULL,
    PRIMARY KEY (node_id, window_start, window_end)
);
";

/// Tables that may be exported.
pub const TABLES: &[&str] = &[
    "Projects",
    "Sources",
    "NodeTypes",
    "Nodes",
    "Paths",
    "Ontology",
    "OntologySuggestions",
    "SuggestionCredits",
    "LabelerGroups",
    "Labelers",
    "Audios",
    "Embeddings",
    "ALPreprocessing",
    "WavsProposed",
    "IterationMedoids",
    "Chunks",
    "PartitionPlans",
    "PartitionMembers",
    "WindowLocks",
];

fn ts_to_sql(t: Timestamp) -> i64 {
    t.timestamp()
}

fn ts_from_sql(s: i64) -> Result<Timestamp> {
    DateTime::<Utc>::from_timestamp(s, 0).ok_or_else(|| StoreError::Corrupt(format!("timestamp {s}")))
}

fn encode_vector(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn decode_vector(b: &[u8]) -> Result<Vec<f32>> {
    if b.len() % 4 != 0 {
        return Err(StoreError::Corrupt("embedding blob length".into()));
    }
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn class_to_sql(c: ClassId) -> i64 {
    i64::from(c.0)
}

fn class_from_sql(v: i64) -> Result<ClassId> {
    u32::try_from(v)
        .map(ClassId)
        .map_err(|_| StoreError::Corrupt(format!("class id {v}")))
}

/// Where a newly seen node is filed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub project: String,
    pub source: String,
    pub node_type: String,
}

impl Default for NodeInfo {
    fn default() -> Self {
        Self {
            project: "default".into(),
            source: "default".into(),
            node_type: "recorder".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub audio_id: AudioId,
    pub node_id: NodeId,
    pub recorded_at: Timestamp,
    pub class_id: ClassId,
    pub labeled_seq: i64,
    pub vector: Vec<f32>,
}

impl LabeledEntry {
    pub fn into_sample(self) -> LabeledSample {
        LabeledSample {
            audio_id: self.audio_id,
            class_id: self.class_id,
            labeled_seq: self.labeled_seq,
            vector: self.vector,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredPlan {
    pub plan_id: i64,
    pub n_ds: usize,
    /// 1-based index of the next set to process.
    pub next_set: usize,
    pub sets: Vec<BTreeSet<AudioId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuggestionStatus {
    Pending,
    Approved,
    Rejected,
}

impl SuggestionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SuggestionStatus::Pending => "pending",
            SuggestionStatus::Approved => "approved",
            SuggestionStatus::Rejected => "rejected",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "pending" => Ok(Self::Pending),
            "approved" => Ok(Self::Approved),
            "rejected" => Ok(Self::Rejected),
            _ => Err(StoreError::Corrupt(format!("suggestion status {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub id: i64,
    pub name: String,
    pub status: SuggestionStatus,
    pub class_id: Option<ClassId>,
    pub credited: Vec<LabelerId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramFilter {
    pub node_id: Option<NodeId>,
    pub include_doubt: bool,
    pub include_superseded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCount {
    pub class_id: ClassId,
    pub name: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelerInfo {
    pub labeler_id: LabelerId,
    pub name: String,
    pub group_id: GroupId,
}

/// One chunk to add, without audio or labeler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkInput {
    pub class_id: ClassId,
    pub onset: f64,
    pub offset: f64,
}

pub struct Store {
    conn: Connection,
    fail_at: Cell<Option<usize>>,
    boundaries: Cell<usize>,
}

impl Store {
    /// Opens (creating if needed) a store file and migrates it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.busy_timeout(Duration::from_secs(10))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.pragma_update(None, "foreign_keys", true)?;
        let store = Self {
            conn,
            fail_at: Cell::new(None),
            boundaries: Cell::new(0),
        };
        store.migrate()?;
        Ok(store)
    }

    pub fn schema_version(&self) -> Result<i64> {
        Ok(self.conn.query_row("PRAGMA user_version", [], |r| r.get(0))?)
    }

    /// Brings the schema to the current version; returns the version found.
    pub fn migrate(&self) -> Result<i64> {
        let found = self.schema_version()?;
        if found > SCHEMA_VERSION {
            return Err(StoreError::IncompatibleVersion {
                found,
                supported: SCHEMA_VERSION,
            });
        }
        if found == SCHEMA_VERSION {
            return Ok(found);
        }
        let tx = Transaction::new_unchecked(&self.conn, TransactionBehavior::Immediate)?;
        // Another connection may have migrated while we waited for the lock.
        let again: i64 = tx.query_row("PRAGMA user_version", [], |r| r.get(0))?;
        if again == 0 {
            tx.execute_batch(SCHEMA)?;
            tx.execute(
                "INSERT INTO Ontology (class_id, name, origin, active, available_from) VALUES (?1, ?2, 'seed', 1, NULL)",
                params![class_to_sql(ClassId::DOUBT), Ontology::DOUBT_NAME],
            )?;
            tx.pragma_update(None, "user_version", SCHEMA_VERSION)?;
        }
        tx.commit()?;
        Ok(found)
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    /// Arms a fault at the `n`-th write boundary (1-based) of subsequent
    /// write operations and resets the boundary counter.
    pub fn inject_fault_at(&self, n: Option<usize>) {
        self.fail_at.set(n);
        self.boundaries.set(0);
    }

    /// Write boundaries passed since the last `inject_fault_at`.
    pub fn write_boundaries(&self) -> usize {
        self.boundaries.get()
    }

    fn boundary(&self) -> Result<()> {
        let n = self.boundaries.get() + 1;
        self.boundaries.set(n);
        if self.fail_at.get() == Some(n) {
            return Err(StoreError::InjectedFault(n));
        }
        Ok(())
    }

    fn write_tx(&self) -> Result<Transaction<'_>> {
        Ok(Transaction::new_unchecked(&self.conn, TransactionBehavior::Immediate)?)
    }

    // ---- catalog -------------------------------------------------------

    fn ensure_node_tx(&self, tx: &Transaction<'_>, node: &NodeId, info: &NodeInfo) -> Result<()> {
        let exists: bool = tx
            .prepare_cached("SELECT 1 FROM Nodes WHERE id = ?1")?
            .exists([node.as_str()])?;
        if exists {
            return Ok(());
        }
        self.boundary()?;
        tx.execute("INSERT OR IGNORE INTO Projects (name) VALUES (?1)", [&info.project])?;
        let project: i64 = tx.query_row("SELECT id FROM Projects WHERE name = ?1", [&info.project], |r| r.get(0))?;
        tx.execute(
            "INSERT OR IGNORE INTO Sources (project_id, name) VALUES (?1, ?2)",
            params![project, info.source],
        )?;
        let source: i64 = tx.query_row(
            "SELECT id FROM Sources WHERE project_id = ?1 AND name = ?2",
            params![project, info.source],
            |r| r.get(0),
        )?;
        tx.execute("INSERT OR IGNORE INTO NodeTypes (name) VALUES (?1)", [&info.node_type])?;
        let node_type: i64 =
            tx.query_row("SELECT id FROM NodeTypes WHERE name = ?1", [&info.node_type], |r| r.get(0))?;
        tx.execute(
            "INSERT INTO Nodes (id, source_id, node_type_id) VALUES (?1, ?2, ?3)",
            params![node.as_str(), source, node_type],
        )?;
        Ok(())
    }

    pub fn ensure_node(&self, node: &NodeId, info: &NodeInfo) -> Result<()> {
        let tx = self.write_tx()?;
        self.ensure_node_tx(&tx, node, info)?;
        tx.commit()?;
        Ok(())
    }

    pub fn node_exists(&self, node: &NodeId) -> Result<bool> {
        Ok(self
            .conn
            .prepare_cached("SELECT 1 FROM Nodes WHERE id = ?1")?
            .exists([node.as_str()])?)
    }

    pub fn nodes(&self) -> Result<Vec<NodeId>> {
        let mut stmt = self.conn.prepare("SELECT id FROM Nodes ORDER BY id")?;
        let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
        Ok(rows.map(|r| r.map(NodeId)).collect::<rusqlite::Result<_>>()?)
    }

    pub fn ensure_path(&self, path: &str) -> Result<i64> {
        self.conn.execute("INSERT OR IGNORE INTO Paths (path) VALUES (?1)", [path])?;
        Ok(self.conn.query_row("SELECT id FROM Paths WHERE path = ?1", [path], |r| r.get(0))?)
    }

    /// Inserts audios and their embeddings in one transaction. Audios that
    /// already exist are left untouched; returns the number inserted.
    pub fn ingest(&self, audios: &[AudioRecord], embeddings: &[EmbeddingRecord], info: &NodeInfo) -> Result<usize> {
        let tx = self.write_tx()?;
        let mut inserted = 0;
        let nodes: BTreeSet<&NodeId> = audios.iter().map(|a| &a.node_id).collect();
        for n in nodes {
            self.ensure_node_tx(&tx, n, info)?;
        }
        {
            let mut ins_audio = tx.prepare_cached(
                "INSERT OR IGNORE INTO Audios (id, path_id, node_id, filename, recorded_at, sampling_rate,
                 bits_per_sample, duration, channels) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            )?;
            for a in audios {
                self.boundary()?;
                inserted += ins_audio.execute(params![
                    a.audio_id.as_str(),
                    a.path_id,
                    a.node_id.as_str(),
                    a.filename,
                    ts_to_sql(a.recorded_at),
                    a.sampling_rate,
                    a.bits_per_sample,
                    a.duration,
                    a.channels,
                ])?;
            }
            let mut has_audio = tx.prepare_cached("SELECT 1 FROM Audios WHERE id = ?1")?;
            let mut ins_emb = tx.prepare_cached(
                "INSERT OR IGNORE INTO Embeddings (audio_id, dim, vector, top1_class, top1_prob)
                 VALUES (?1, ?2, ?3, ?4, ?5)",
            )?;
            for e in embeddings {
                if !has_audio.exists([e.audio_id.as_str()])? {
                    return Err(StoreError::UnknownAudio(e.audio_id.clone()));
                }
                self.boundary()?;
                ins_emb.execute(params![
                    e.audio_id.as_str(),
                    e.vector.len() as i64,
                    encode_vector(&e.vector),
                    class_to_sql(e.top1_class),
                    f64::from(e.top1_prob),
                ])?;
            }
        }
        tx.commit()?;
        Ok(inserted)
    }

    fn audio_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<(String, i64, String, String, i64, u32, u16, f64, u16)> {
        Ok((
            r.get(0)?,
            r.get(1)?,
            r.get(2)?,
            r.get(3)?,
            r.get(4)?,
            r.get(5)?,
            r.get(6)?,
            r.get(7)?,
            r.get(8)?,
        ))
    }

    fn build_audio(t: (String, i64, String, String, i64, u32, u16, f64, u16)) -> Result<AudioRecord> {
        Ok(AudioRecord {
            audio_id: AudioId(t.0),
            path_id: t.1,
            node_id: NodeId(t.2),
            filename: t.3,
            recorded_at: ts_from_sql(t.4)?,
            sampling_rate: t.5,
            bits_per_sample: t.6,
            duration: t.7,
            channels: t.8,
        })
    }

    const AUDIO_COLS: &'static str =
        "id, path_id, node_id, filename, recorded_at, sampling_rate, bits_per_sample, duration, channels";

    pub fn audio(&self, id: &AudioId) -> Result<Option<AudioRecord>> {
        let sql = format!("SELECT {} FROM Audios WHERE id = ?1", Self::AUDIO_COLS);
        let row = self
            .conn
            .prepare_cached(&sql)?
            .query_row([id.as_str()], Self::audio_from_row)
            .optional()?;
        row.map(Self::build_audio).transpose()
    }

    /// Audios of the window's node recorded in `[start, end)`, by id.
    pub fn audios_in_window(&self, window: &Window) -> Result<Vec<AudioRecord>> {
        let sql = format!(
            "SELECT {} FROM Audios WHERE node_id = ?1 AND recorded_at >= ?2 AND recorded_at < ?3 ORDER BY id",
            Self::AUDIO_COLS
        );
        let mut stmt = self.conn.prepare_cached(&sql)?;
        let rows = stmt.query_map(
            params![window.node_id.as_str(), ts_to_sql(window.start), ts_to_sql(window.end)],
            Self::audio_from_row,
        )?;
        rows.map(|r| Self::build_audio(r?)).collect()
    }

    pub fn audio_count(&self) -> Result<usize> {
        Ok(self.conn.query_row("SELECT COUNT(*) FROM Audios", [], |r| r.get::<_, i64>(0))? as usize)
    }

    /// Time span covered by a node's audios, `[first, last]`.
    pub fn node_span(&self, node: &NodeId) -> Result<Option<(Timestamp, Timestamp)>> {
        let (lo, hi): (Option<i64>, Option<i64>) = self.conn.query_row(
            "SELECT MIN(recorded_at), MAX(recorded_at) FROM Audios WHERE node_id = ?1",
            [node.as_str()],
            |r| Ok((r.get(0)?, r.get(1)?)),
        )?;
        match (lo, hi) {
            (Some(lo), Some(hi)) => Ok(Some((ts_from_sql(lo)?, ts_from_sql(hi)?))),
            _ => Ok(None),
        }
    }

    /// Embeddings for the given audios; missing ones are absent from the map.
    pub fn embeddings<'a, I>(&self, ids: I) -> Result<HashMap<AudioId, EmbeddingRecord>>
    where
        I: IntoIterator<Item = &'a AudioId>,
    {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT vector, top1_class, top1_prob FROM Embeddings WHERE audio_id = ?1")?;
        let mut out = HashMap::new();
        for id in ids {
            let row = stmt
                .query_row([id.as_str()], |r| {
                    Ok((r.get::<_, Vec<u8>>(0)?, r.get::<_, i64>(1)?, r.get::<_, f64>(2)?))
                })
                .optional()?;
            if let Some((blob, class, prob)) = row {
                out.insert(
                    id.clone(),
                    EmbeddingRecord {
                        audio_id: id.clone(),
                        vector: decode_vector(&blob)?,
                        top1_class: class_from_sql(class)?,
                        top1_prob: prob as f32,
                    },
                );
            }
        }
        Ok(out)
    }

    // ---- ontology and labelers ------------------------------------------

    pub fn seed_ontology(&self, classes: &[(ClassId, String)]) -> Result<()> {
        let tx = self.write_tx()?;
        for (id, name) in classes {
            if id.is_doubt() {
                continue;
            }
            self.boundary()?;
            tx.execute(
                "INSERT OR IGNORE INTO Ontology (class_id, name, origin, active, available_from)
                 VALUES (?1, ?2, 'seed', 1, NULL)",
                params![class_to_sql(*id), name],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    pub fn ontology(&self) -> Result<Ontology> {
        let mut ont = Ontology::new();
        let mut stmt = self
            .conn
            .prepare_cached("SELECT class_id, name, origin, active, available_from FROM Ontology")?;
        let rows = stmt.query_map([], |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, String>(2)?,
                r.get::<_, bool>(3)?,
                r.get::<_, Option<i64>>(4)?,
            ))
        })?;
        for row in rows {
            let (id, name, origin, active, from) = row?;
            let origin = ClassOrigin::parse(&origin).ok_or_else(|| StoreError::Corrupt(format!("origin {origin}")))?;
            ont.insert(OntologyClass {
                class_id: class_from_sql(id)?,
                name,
                origin,
                active,
                available_from: from.map(IterationId),
            });
        }
        Ok(ont)
    }

    /// Replaces nothing: adds missing groups and labelers, moving existing
    /// labelers to the listed group.
    pub fn upsert_labelers(&self, groups: &[LabelerGroup], names: &BTreeMap<LabelerId, String>) -> Result<()> {
        crate::domain::validate_groups(groups)?;
        let tx = self.write_tx()?;
        for g in groups {
            self.boundary()?;
            tx.execute("INSERT OR IGNORE INTO LabelerGroups (id) VALUES (?1)", [g.group_id.0])?;
            for l in &g.labeler_ids {
                let name = names.get(l).cloned().unwrap_or_else(|| format!("labeler{}", l.0));
                self.boundary()?;
                tx.execute(
                    "INSERT INTO Labelers (id, name, group_id) VALUES (?1, ?2, ?3)
                     ON CONFLICT (id) DO UPDATE SET name = excluded.name, group_id = excluded.group_id",
                    params![l.0, name, g.group_id.0],
                )?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    /// Groups that have at least one labeler, by id.
    pub fn groups(&self) -> Result<Vec<LabelerGroup>> {
        let mut stmt = self.conn.prepare_cached("SELECT id, group_id FROM Labelers ORDER BY group_id, id")?;
        let rows = stmt.query_map([], |r| Ok((r.get::<_, u32>(0)?, r.get::<_, u32>(1)?)))?;
        let mut map: BTreeMap<u32, BTreeSet<LabelerId>> = BTreeMap::new();
        for row in rows {
            let (l, g) = row?;
            map.entry(g).or_default().insert(LabelerId(l));
        }
        Ok(map
            .into_iter()
            .map(|(g, ls)| LabelerGroup {
                group_id: GroupId(g),
                labeler_ids: ls,
            })
            .collect())
    }

    pub fn labeler(&self, id: LabelerId) -> Result<Option<LabelerInfo>> {
        Ok(self
            .conn
            .prepare_cached("SELECT name, group_id FROM Labelers WHERE id = ?1")?
            .query_row([id.0], |r| {
                Ok(LabelerInfo {
                    labeler_id: id,
                    name: r.get(0)?,
                    group_id: GroupId(r.get(1)?),
                })
            })
            .optional()?)
    }

    fn group(&self, id: GroupId) -> Result<LabelerGroup> {
        let mut stmt = self.conn.prepare_cached("SELECT id FROM Labelers WHERE group_id = ?1")?;
        let ids = stmt
            .query_map([id.0], |r| r.get::<_, u32>(0))?
            .map(|r| r.map(LabelerId))
            .collect::<rusqlite::Result<BTreeSet<_>>>()?;
        Ok(LabelerGroup {
            group_id: id,
            labeler_ids: ids,
        })
    }

    // ---- suggestions -----------------------------------------------------

    fn suggestion_by_id(&self, id: i64) -> Result<Option<Suggestion>> {
        let row = self
            .conn
            .prepare_cached("SELECT name, status, class_id FROM OntologySuggestions WHERE id = ?1")?
            .query_row([id], |r| {
                Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, Option<i64>>(2)?))
            })
            .optional()?;
        let Some((name, status, class)) = row else {
            return Ok(None);
        };
        let mut stmt = self
            .conn
            .prepare_cached("SELECT labeler_id FROM SuggestionCredits WHERE suggestion_id = ?1 ORDER BY labeler_id")?;
        let credited = stmt
            .query_map([id], |r| r.get::<_, u32>(0))?
            .map(|r| r.map(LabelerId))
            .collect::<rusqlite::Result<_>>()?;
        Ok(Some(Suggestion {
            id,
            name,
            status: SuggestionStatus::parse(&status)?,
            class_id: class.map(class_from_sql).transpose()?,
            credited,
        }))
    }

    pub fn suggestions(&self) -> Result<Vec<Suggestion>> {
        let ids: Vec<i64> = self
            .conn
            .prepare("SELECT id FROM OntologySuggestions ORDER BY id")?
            .query_map([], |r| r.get(0))?
            .collect::<rusqlite::Result<_>>()?;
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            out.extend(self.suggestion_by_id(id)?);
        }
        Ok(out)
    }

    /// Records a labeler's class suggestion. A name already suggested by
    /// someone else merges into the open suggestion and credits both.
    pub fn suggest_class(&self, labeler: LabelerId, name: &str, auto_approve: bool) -> Result<Suggestion> {
        let display = name.split_whitespace().collect::<Vec<_>>().join(" ");
        let norm = normalize_class_name(name);
        if norm.is_empty() {
            return Err(StoreError::EmptyName);
        }
        if self.labeler(labeler)?.is_none() {
            return Err(StoreError::UnknownLabeler(labeler));
        }
        let ont = self.ontology()?;
        let existing: Option<(i64, String)> = self
            .conn
            .query_row(
                "SELECT id, status FROM OntologySuggestions WHERE norm_name = ?1 AND status != 'rejected'",
                [&norm],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?;
        let clash = ont
            .classes()
            .any(|c| c.active && normalize_class_name(&c.name) == norm);
        if clash && existing.is_none() {
            return Err(StoreError::DuplicateName(display));
        }

        let tx = self.write_tx()?;
        let id = match existing {
            Some((id, _)) => id,
            None => {
                self.boundary()?;
                tx.execute(
                    "INSERT INTO OntologySuggestions (name, norm_name, status, created_at) VALUES (?1, ?2, 'pending', ?3)",
                    params![display, norm, Utc::now().timestamp()],
                )?;
                tx.last_insert_rowid()
            }
        };
        self.boundary()?;
        tx.execute(
            "INSERT OR IGNORE INTO SuggestionCredits (suggestion_id, labeler_id) VALUES (?1, ?2)",
            params![id, labeler.0],
        )?;
        tx.commit()?;
        if auto_approve {
            self.approve_suggestion(id)?;
        }
        self.suggestion_by_id(id)?.ok_or(StoreError::UnknownSuggestion(id))
    }

    /// Activates a suggested class from the next iteration onwards.
    /// Approving twice is a no-op.
    pub fn approve_suggestion(&self, id: i64) -> Result<OntologyClass> {
        let s = self.suggestion_by_id(id)?.ok_or(StoreError::UnknownSuggestion(id))?;
        let ont = self.ontology()?;
        if let Some(c) = s.class_id.and_then(|c| ont.get(c)) {
            return Ok(c.clone());
        }
        let class_id = ont.next_free_id();
        let from = IterationId(self.max_iteration_id()?.map_or(1, |m| m.0 + 1));
        let tx = self.write_tx()?;
        self.boundary()?;
        tx.execute(
            "INSERT INTO Ontology (class_id, name, origin, active, available_from) VALUES (?1, ?2, 'suggested', 1, ?3)",
            params![class_to_sql(class_id), s.name, from.0],
        )
        .map_err(|e| match e {
            rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::ConstraintViolation => {
                StoreError::DuplicateName(s.name.clone())
            }
            e => e.into(),
        })?;
        self.boundary()?;
        tx.execute(
            "UPDATE OntologySuggestions SET status = 'approved', class_id = ?2, decided_at = ?3 WHERE id = ?1",
            params![id, class_to_sql(class_id), Utc::now().timestamp()],
        )?;
        tx.commit()?;
        Ok(OntologyClass {
            class_id,
            name: s.name,
            origin: ClassOrigin::Suggested,
            active: true,
            available_from: Some(from),
        })
    }

    pub fn reject_suggestion(&self, id: i64) -> Result<()> {
        let n = self.conn.execute(
            "UPDATE OntologySuggestions SET status = 'rejected', decided_at = ?2 WHERE id = ?1 AND status = 'pending'",
            params![id, Utc::now().timestamp()],
        )?;
        if n == 0 && self.suggestion_by_id(id)?.is_none() {
            return Err(StoreError::UnknownSuggestion(id));
        }
        Ok(())
    }

    // ---- iterations --------------------------------------------------------

    pub fn max_iteration_id(&self) -> Result<Option<IterationId>> {
        Ok(self
            .conn
            .query_row("SELECT MAX(iteration_id) FROM ALPreprocessing", [], |r| r.get::<_, Option<i64>>(0))?
            .map(IterationId))
    }

    pub fn iteration_count(&self) -> Result<u64> {
        Ok(self
            .conn
            .query_row("SELECT COUNT(*) FROM ALPreprocessing", [], |r| r.get::<_, i64>(0))? as u64)
    }

    pub fn iteration_ids(&self) -> Result<Vec<IterationId>> {
        let mut stmt = self.conn.prepare("SELECT iteration_id FROM ALPreprocessing ORDER BY iteration_id")?;
        let rows = stmt.query_map([], |r| r.get::<_, i64>(0))?;
        Ok(rows.map(|r| r.map(IterationId)).collect::<rusqlite::Result<_>>()?)
    }

    pub fn iteration_exists(&self, id: IterationId) -> Result<bool> {
        Ok(self
            .conn
            .prepare_cached("SELECT 1 FROM ALPreprocessing WHERE iteration_id = ?1")?
            .exists([id.0])?)
    }

    /// Commits one iteration atomically: its ALPreprocessing row, one
    /// WavsProposed row per proposal, its medoids, and the partition plan
    /// cursor. A new plan is stored first when `new_plan` is given, and the
    /// record's `plan_id` is filled in. Committing an iteration id that is
    /// already stored writes nothing.
    pub fn commit_iteration(&self, record: &mut IterationRecord, new_plan: Option<&PartitionPlan>) -> Result<IterationId> {
        let tx = self.write_tx()?;
        let exists: bool = tx
            .prepare_cached("SELECT 1 FROM ALPreprocessing WHERE iteration_id = ?1")?
            .exists([record.iteration_id.0])?;
        if exists {
            return Ok(record.iteration_id);
        }
        let w = &record.window;
        let mut plan_id = record.plan_id;
        if let Some(plan) = new_plan {
            self.boundary()?;
            tx.execute(
                "INSERT INTO PartitionPlans (node_id, window_start, window_end, n_ds, next_set, created_at)
                 VALUES (?1, ?2, ?3, ?4, 1, ?5)",
                params![
                    w.node_id.as_str(),
                    ts_to_sql(w.start),
                    ts_to_sql(w.end),
                    plan.n_ds as i64,
                    ts_to_sql(record.created_at)
                ],
            )?;
            let id = tx.last_insert_rowid();
            let mut ins = tx.prepare_cached("INSERT INTO PartitionMembers (plan_id, set_index, audio_id) VALUES (?1, ?2, ?3)")?;
            for (j, set) in plan.sets.iter().enumerate() {
                for a in set {
                    self.boundary()?;
                    ins.execute(params![id, (j + 1) as i64, a.as_str()])?;
                }
            }
            plan_id = Some(id);
        }
        if let Some(plan_id) = plan_id {
            self.boundary()?;
            tx.execute(
                "UPDATE PartitionPlans SET next_set = MAX(next_set, ?2) WHERE id = ?1",
                params![plan_id, (record.set_index + 1) as i64],
            )?;
        }

        self.boundary()?;
        tx.execute(
            "INSERT INTO ALPreprocessing (iteration_id, node_id, window_start, window_end, audio_count, fold_count,
             created_at, labeled_pct, labeling_index, strategy, path, classifier_fallback, budget, plan_id, n_ds,
             set_index, set_size)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16, ?17)",
            params![
                record.iteration_id.0,
                w.node_id.as_str(),
                ts_to_sql(w.start),
                ts_to_sql(w.end),
                record.audio_count as i64,
                record.fold_count,
                ts_to_sql(record.created_at),
                record.labeled_pct,
                record.labeling_index as i64,
                record.strategy.as_str(),
                record.path.as_str(),
                record.classifier_fallback,
                record.budget as i64,
                plan_id,
                record.n_ds as i64,
                record.set_index as i64,
                record.set_size as i64,
            ],
        )?;
        {
            let mut ins = tx.prepare_cached(
                "INSERT INTO WavsProposed (iteration_id, audio_id, label, labeler_count, agreement_pct, filename,
                 node_id, rank, provenance, group_id) VALUES (?1, ?2, NULL, 0, 0, ?3, ?4, ?5, ?6, ?7)",
            )?;
            for p in &record.proposals {
                self.boundary()?;
                ins.execute(params![
                    record.iteration_id.0,
                    p.audio_id.as_str(),
                    p.filename,
                    p.node_id.as_str(),
                    p.rank,
                    p.provenance.as_str(),
                    p.group_id.map(|g| g.0),
                ])?;
            }
            let mut ins = tx.prepare_cached(
                "INSERT INTO IterationMedoids (iteration_id, audio_id, class_id, tier, position) VALUES (?1, ?2, ?3, ?4, ?5)",
            )?;
            for (i, m) in record.medoids.iter().enumerate() {
                self.boundary()?;
                ins.execute(params![
                    record.iteration_id.0,
                    m.audio_id.as_str(),
                    class_to_sql(m.class_id),
                    m.tier.as_str(),
                    i as i64
                ])?;
            }
        }
        self.boundary()?;
        tx.commit()?;
        record.plan_id = plan_id;
        Ok(record.iteration_id)
    }

    pub fn iteration(&self, id: IterationId) -> Result<Option<IterationRecord>> {
        type Head = (String, i64, i64, i64, u32, i64, f64, i64, String, String, bool, i64, Option<i64>, i64, i64, i64);
        let head: Option<Head> = self
            .conn
            .prepare_cached(
                "SELECT node_id, window_start, window_end, audio_count, fold_count, created_at, labeled_pct,
                 labeling_index, strategy, path, classifier_fallback, budget, plan_id, n_ds, set_index, set_size
                 FROM ALPreprocessing WHERE iteration_id = ?1",
            )?
            .query_row([id.0], |r| {
                Ok((
                    r.get(0)?,
                    r.get(1)?,
                    r.get(2)?,
                    r.get(3)?,
                    r.get(4)?,
                    r.get(5)?,
                    r.get(6)?,
                    r.get(7)?,
                    r.get(8)?,
                    r.get(9)?,
                    r.get(10)?,
                    r.get(11)?,
                    r.get(12)?,
                    r.get(13)?,
                    r.get(14)?,
                    r.get(15)?,
                ))
            })
            .optional()?;
        let Some(h) = head else { return Ok(None) };
        let window = Window {
            node_id: NodeId(h.0),
            start: ts_from_sql(h.1)?,
            end: ts_from_sql(h.2)?,
        };
        let strategy = Strategy::parse(&h.8).ok_or_else(|| StoreError::Corrupt(format!("strategy {}", h.8)))?;
        let path = SelectionPath::parse(&h.9).ok_or_else(|| StoreError::Corrupt(format!("path {}", h.9)))?;

        let mut stmt = self.conn.prepare_cached(
            "SELECT rank, audio_id, filename, node_id, provenance, group_id, label, labeler_count, agreement_pct
             FROM WavsProposed WHERE iteration_id = ?1 ORDER BY rank",
        )?;
        let rows = stmt.query_map([id.0], |r| {
            Ok((
                r.get::<_, u32>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, String>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, String>(4)?,
                r.get::<_, Option<u32>>(5)?,
                r.get::<_, Option<i64>>(6)?,
                r.get::<_, u32>(7)?,
                r.get::<_, f64>(8)?,
            ))
        })?;
        let mut proposals = Vec::new();
        for row in rows {
            let (rank, audio, filename, node, prov, group, label, count, pct) = row?;
            proposals.push(ProposedAudio {
                rank,
                audio_id: AudioId(audio),
                filename,
                node_id: NodeId(node),
                provenance: Provenance::parse(&prov).ok_or_else(|| StoreError::Corrupt(format!("provenance {prov}")))?,
                group_id: group.map(GroupId),
                label: label.map(class_from_sql).transpose()?,
                labeler_count: count,
                agreement: pct / 100.0,
            });
        }
        let mut stmt = self.conn.prepare_cached(
            "SELECT audio_id, class_id, tier FROM IterationMedoids WHERE iteration_id = ?1 ORDER BY position",
        )?;
        let rows = stmt.query_map([id.0], |r| {
            Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?, r.get::<_, String>(2)?))
        })?;
        let mut medoids = Vec::new();
        for row in rows {
            let (audio, class, tier) = row?;
            medoids.push(IterationMedoid {
                audio_id: AudioId(audio),
                class_id: class_from_sql(class)?,
                tier: MedoidTier::parse(&tier).ok_or_else(|| StoreError::Corrupt(format!("tier {tier}")))?,
            });
        }
        Ok(Some(IterationRecord {
            iteration_id: id,
            window,
            created_at: ts_from_sql(h.5)?,
            labeling_index: h.7 as u64,
            audio_count: h.3 as usize,
            labeled_pct: h.6,
            fold_count: h.4,
            strategy,
            path,
            classifier_fallback: h.10,
            budget: h.11 as usize,
            plan_id: h.12,
            n_ds: h.13 as usize,
            set_index: h.14 as usize,
            set_size: h.15 as usize,
            proposals,
            medoids,
        }))
    }

    /// Members of the disjoint set an iteration processed.
    pub fn iteration_set(&self, id: IterationId) -> Result<BTreeSet<AudioId>> {
        let mut stmt = self.conn.prepare_cached(
            "SELECT m.audio_id FROM PartitionMembers m JOIN ALPreprocessing a
             ON a.plan_id = m.plan_id AND a.set_index = m.set_index WHERE a.iteration_id = ?1",
        )?;
        let rows = stmt.query_map([id.0], |r| r.get::<_, String>(0))?;
        Ok(rows.map(|r| r.map(AudioId)).collect::<rusqlite::Result<_>>()?)
    }

    /// The newest plan for exactly this window that still has unprocessed
    /// sets.
    pub fn active_plan(&self, window: &Window) -> Result<Option<StoredPlan>> {
        let head: Option<(i64, i64, i64)> = self
            .conn
            .query_row(
                "SELECT id, n_ds, next_set FROM PartitionPlans
                 WHERE node_id = ?1 AND window_start = ?2 AND window_end = ?3 AND next_set <= n_ds
                 ORDER BY id DESC LIMIT 1",
                params![window.node_id.as_str(), ts_to_sql(window.start), ts_to_sql(window.end)],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
            )
            .optional()?;
        let Some((plan_id, n_ds, next_set)) = head else {
            return Ok(None);
        };
        let mut sets = vec![BTreeSet::new(); n_ds as usize];
        let mut stmt = self
            .conn
            .prepare_cached("SELECT set_index, audio_id FROM PartitionMembers WHERE plan_id = ?1")?;
        let rows = stmt.query_map([plan_id], |r| Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?)))?;
        for row in rows {
            let (j, a) = row?;
            let set = sets
                .get_mut((j - 1) as usize)
                .ok_or_else(|| StoreError::Corrupt(format!("plan {plan_id} set {j}")))?;
            set.insert(AudioId(a));
        }
        Ok(Some(StoredPlan {
            plan_id,
            n_ds: n_ds as usize,
            next_set: next_set as usize,
            sets,
        }))
    }

    /// Every audio ever proposed.
    pub fn proposed_ids(&self) -> Result<BTreeSet<AudioId>> {
        let mut stmt = self.conn.prepare_cached("SELECT audio_id FROM WavsProposed")?;
        let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
        Ok(rows.map(|r| r.map(AudioId)).collect::<rusqlite::Result<_>>()?)
    }

    /// Audios holding a consensus label.
    pub fn labeled_ids(&self) -> Result<BTreeSet<AudioId>> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT audio_id FROM WavsProposed WHERE label IS NOT NULL")?;
        let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
        Ok(rows.map(|r| r.map(AudioId)).collect::<rusqlite::Result<_>>()?)
    }

    /// Labeled audios with their embeddings, newest label first.
    pub fn labeled_entries(&self) -> Result<Vec<LabeledEntry>> {
        let mut stmt = self.conn.prepare_cached(
            "SELECT w.audio_id, a.node_id, a.recorded_at, w.label, w.labeled_seq, e.vector
             FROM WavsProposed w JOIN Audios a ON a.id = w.audio_id JOIN Embeddings e ON e.audio_id = w.audio_id
             WHERE w.label IS NOT NULL ORDER BY w.labeled_seq DESC, w.audio_id",
        )?;
        let rows = stmt.query_map([], |r| {
            Ok((
                r.get::<_, String>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, i64>(2)?,
                r.get::<_, i64>(3)?,
                r.get::<_, Option<i64>>(4)?,
                r.get::<_, Vec<u8>>(5)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (audio, node, at, class, seq, blob) = row?;
            out.push(LabeledEntry {
                audio_id: AudioId(audio),
                node_id: NodeId(node),
                recorded_at: ts_from_sql(at)?,
                class_id: class_from_sql(class)?,
                labeled_seq: seq.unwrap_or(0),
                vector: decode_vector(&blob)?,
            });
        }
        Ok(out)
    }

    // ---- locks ---------------------------------------------------------------

    /// Takes the single-writer lock for `window`. Fails with `WindowBusy`
    /// when a live lock overlaps the window on the same node.
    pub fn acquire_window_lock(&self, window: &Window, holder: &str) -> Result<()> {
        let now = Utc::now().timestamp();
        let tx = self.write_tx()?;
        tx.execute(
            "DELETE FROM WindowLocks WHERE acquired_at < ?1",
            [now - LOCK_TTL_SECS],
        )?;
        let busy: bool = tx
            .prepare(
                "SELECT 1 FROM WindowLocks WHERE node_id = ?1 AND window_start < ?3 AND window_end > ?2",
            )?
            .exists(params![window.node_id.as_str(), ts_to_sql(window.start), ts_to_sql(window.end)])?;
        if busy {
            return Err(StoreError::WindowBusy);
        }
        tx.execute(
            "INSERT INTO WindowLocks (node_id, window_start, window_end, holder, acquired_at) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![window.node_id.as_str(), ts_to_sql(window.start), ts_to_sql(window.end), holder, now],
        )?;
        tx.commit()?;
        Ok(())
    }

    pub fn release_window_lock(&self, window: &Window) -> Result<()> {
        self.conn.execute(
            "DELETE FROM WindowLocks WHERE node_id = ?1 AND window_start = ?2 AND window_end = ?3",
            params![window.node_id.as_str(), ts_to_sql(window.start), ts_to_sql(window.end)],
        )?;
        Ok(())
    }

    // ---- annotations and consensus ---------------------------------------

    fn proposal_info(&self, audio: &AudioId) -> Result<Option<(IterationId, Option<GroupId>)>> {
        Ok(self
            .conn
            .prepare_cached("SELECT iteration_id, group_id FROM WavsProposed WHERE audio_id = ?1")?
            .query_row([audio.as_str()], |r| {
                Ok((IterationId(r.get(0)?), r.get::<_, Option<u32>>(1)?.map(GroupId)))
            })
            .optional()?)
    }

    /// Live (not superseded) chunks of one audio.
    pub fn active_chunks(&self, audio: &AudioId) -> Result<Vec<ChunkAnnotation>> {
        Ok(self
            .chunk_history(Some(audio), None)?
            .into_iter()
            .filter(|h| h.superseded_by.is_none())
            .map(|h| h.annotation)
            .collect())
    }

    /// Chunks filtered by audio and/or labeler, by id.
    pub fn chunk_history(&self, audio: Option<&AudioId>, labeler: Option<LabelerId>) -> Result<Vec<ChunkHistory>> {
        let mut stmt = self.conn.prepare_cached(
            "SELECT id, audio_id, labeler_id, class_id, onset, offset, superseded_by FROM Chunks
             WHERE (?1 IS NULL OR audio_id = ?1) AND (?2 IS NULL OR labeler_id = ?2) ORDER BY id",
        )?;
        let rows = stmt.query_map(params![audio.map(|a| a.as_str()), labeler.map(|l| l.0)], |r| {
            Ok((
                r.get::<_, i64>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, u32>(2)?,
                r.get::<_, i64>(3)?,
                r.get::<_, f64>(4)?,
                r.get::<_, f64>(5)?,
                r.get::<_, Option<i64>>(6)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (id, audio, labeler, class, onset, offset, sup) = row?;
            out.push(ChunkHistory {
                chunk_id: ChunkId(id),
                annotation: ChunkAnnotation {
                    chunk_id: Some(ChunkId(id)),
                    audio_id: AudioId(audio),
                    labeler_id: LabelerId(labeler),
                    class_id: class_from_sql(class)?,
                    onset,
                    offset,
                },
                superseded_by: sup.map(ChunkId),
            });
        }
        Ok(out)
    }

    /// Consensus over the live chunks of a proposed audio, judged by the
    /// group the audio was assigned to.
    pub fn consensus_for(&self, audio: &AudioId) -> Result<ConsensusOutcome> {
        let (_, group) = self
            .proposal_info(audio)?
            .ok_or_else(|| StoreError::NotProposed(audio.clone()))?;
        let chunks = self.active_chunks(audio)?;
        let group = match group {
            Some(g) => self.group(g)?,
            None => LabelerGroup::new(GroupId(0), chunks.iter().map(|c| c.labeler_id)),
        };
        Ok(compute_consensus(audio, &chunks, &group)?)
    }

    fn refresh_agreement_tx(&self, tx: &Transaction<'_>, audio: &AudioId) -> Result<Option<ConsensusOutcome>> {
        if self.proposal_info(audio)?.is_none() {
            return Ok(None);
        }
        let out = self.consensus_for(audio)?;
        self.boundary()?;
        tx.execute(
            "UPDATE WavsProposed SET labeler_count = ?2, agreement_pct = ?3 WHERE audio_id = ?1",
            params![audio.as_str(), out.labeler_count as i64, out.agreement * 100.0],
        )?;
        Ok(Some(out))
    }

    fn check_annotation_refs(&self, batch: &[ChunkAnnotation]) -> Result<()> {
        for a in batch {
            let info = self.labeler(a.labeler_id)?.ok_or(StoreError::UnknownLabeler(a.labeler_id))?;
            if self.audio(&a.audio_id)?.is_none() {
                return Err(StoreError::UnknownAudio(a.audio_id.clone()));
            }
            if let Some((_, Some(g))) = self.proposal_info(&a.audio_id)? {
                if g != info.group_id {
                    return Err(StoreError::WrongGroup {
                        audio: a.audio_id.clone(),
                        labeler: a.labeler_id,
                    });
                }
            }
        }
        Ok(())
    }

    /// Appends a batch of chunks and refreshes labeler counts and agreement
    /// of the proposals they touch. All or nothing.
    pub fn record_annotations(&self, batch: &[ChunkAnnotation]) -> Result<usize> {
        self.check_annotation_refs(batch)?;
        let tx = self.write_tx()?;
        let now = Utc::now().timestamp();
        {
            let mut ins = tx.prepare_cached(
                "INSERT INTO Chunks (audio_id, class_id, labeler_id, onset, offset, created_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            )?;
            for a in batch {
                self.boundary()?;
                ins.execute(params![
                    a.audio_id.as_str(),
                    class_to_sql(a.class_id),
                    a.labeler_id.0,
                    a.onset,
                    a.offset,
                    now
                ])?;
            }
        }
        let audios: BTreeSet<&AudioId> = batch.iter().map(|a| &a.audio_id).collect();
        for a in audios {
            self.refresh_agreement_tx(&tx, a)?;
        }
        tx.commit()?;
        Ok(batch.len())
    }

    /// Validates and stores one labeler's chunks for a proposed audio and
    /// returns the audio's updated consensus status.
    pub fn submit_annotations(
        &self,
        labeler: LabelerId,
        audio: &AudioId,
        chunks: &[ChunkInput],
    ) -> Result<ConsensusOutcome> {
        let info = self.labeler(labeler)?.ok_or(StoreError::UnknownLabeler(labeler))?;
        let record = self.audio(audio)?.ok_or_else(|| StoreError::UnknownAudio(audio.clone()))?;
        let (iteration, group) = self
            .proposal_info(audio)?
            .ok_or_else(|| StoreError::NotProposed(audio.clone()))?;
        if group.is_some_and(|g| g != info.group_id) {
            return Err(StoreError::WrongGroup {
                audio: audio.clone(),
                labeler,
            });
        }
        let ont = self.ontology()?;
        let view = ont.at(iteration);
        let batch = chunks
            .iter()
            .map(|c| {
                validate_annotation(
                    ChunkAnnotation {
                        chunk_id: None,
                        audio_id: audio.clone(),
                        labeler_id: labeler,
                        class_id: c.class_id,
                        onset: c.onset,
                        offset: c.offset,
                    },
                    &record,
                    &view,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        self.record_annotations(&batch)?;
        self.consensus_for(audio)
    }

    /// Audios of an iteration the labeler's group still has to annotate, in
    /// rank order.
    pub fn pending_for_labeler(&self, iteration: IterationId, labeler: LabelerId) -> Result<Vec<ProposedAudio>> {
        let info = self.labeler(labeler)?.ok_or(StoreError::UnknownLabeler(labeler))?;
        let record = self.iteration(iteration)?.ok_or(StoreError::UnknownIteration(iteration))?;
        let mut done = self.conn.prepare_cached("SELECT 1 FROM Chunks WHERE audio_id = ?1 AND labeler_id = ?2")?;
        let mut out = Vec::new();
        for p in record.proposals {
            if p.group_id.is_some_and(|g| g != info.group_id) {
                continue;
            }
            if !done.exists(params![p.audio_id.as_str(), labeler.0])? {
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Consensus outcomes for every proposal of an iteration, by rank.
    pub fn iteration_consensus(&self, iteration: IterationId) -> Result<Vec<ConsensusOutcome>> {
        let record = self.iteration(iteration)?.ok_or(StoreError::UnknownIteration(iteration))?;
        record.proposals.iter().map(|p| self.consensus_for(&p.audio_id)).collect()
    }

    fn apply_outcome_tx(&self, tx: &Transaction<'_>, o: &ConsensusOutcome, next_seq: &mut i64) -> Result<()> {
        let current: Option<i64> = tx
            .prepare_cached("SELECT label FROM WavsProposed WHERE audio_id = ?1")?
            .query_row([o.audio_id.as_str()], |r| r.get(0))?;
        let new = o.medoid_class.map(class_to_sql);
        self.boundary()?;
        if current == new {
            tx.execute(
                "UPDATE WavsProposed SET labeler_count = ?2, agreement_pct = ?3 WHERE audio_id = ?1",
                params![o.audio_id.as_str(), o.labeler_count as i64, o.agreement * 100.0],
            )?;
        } else {
            let seq = new.map(|_| {
                *next_seq += 1;
                *next_seq
            });
            tx.execute(
                "UPDATE WavsProposed SET label = ?2, labeled_seq = ?3, labeler_count = ?4, agreement_pct = ?5
                 WHERE audio_id = ?1",
                params![o.audio_id.as_str(), new, seq, o.labeler_count as i64, o.agreement * 100.0],
            )?;
        }
        Ok(())
    }

    fn max_seq(&self) -> Result<i64> {
        Ok(self
            .conn
            .query_row("SELECT COALESCE(MAX(labeled_seq), 0) FROM WavsProposed", [], |r| r.get(0))?)
    }

    /// Writes consensus labels for an iteration's proposals atomically.
    /// Audios with a medoid class become labeled; the others stay (or
    /// become) unlabeled.
    pub fn promote_medoids(&self, iteration: IterationId, outcomes: &[ConsensusOutcome]) -> Result<usize> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT 1 FROM WavsProposed WHERE iteration_id = ?1 AND audio_id = ?2")?;
        if !self.iteration_exists(iteration)? {
            return Err(StoreError::UnknownIteration(iteration));
        }
        for o in outcomes {
            if !stmt.exists(params![iteration.0, o.audio_id.as_str()])? {
                return Err(StoreError::ForeignOutcome {
                    audio: o.audio_id.clone(),
                    iteration,
                });
            }
        }
        let mut seq = self.max_seq()?;
        let tx = self.write_tx()?;
        for o in outcomes {
            self.apply_outcome_tx(&tx, o, &mut seq)?;
        }
        self.boundary()?;
        tx.commit()?;
        Ok(outcomes.iter().filter(|o| o.medoid_class.is_some()).count())
    }

    /// Computes and promotes consensus for a whole iteration.
    pub fn run_consensus(&self, iteration: IterationId) -> Result<Vec<ConsensusOutcome>> {
        let outcomes = self.iteration_consensus(iteration)?;
        self.promote_medoids(iteration, &outcomes)?;
        Ok(outcomes)
    }

    pub fn doubt_worklist(&self, labeler: LabelerId) -> Result<Vec<(AudioId, ChunkId)>> {
        Ok(build_doubt_worklist(labeler, &self.chunk_history(None, Some(labeler))?))
    }

    /// Replaces an open Doubt chunk with the labeler's new chunks and
    /// re-runs consensus for the audio.
    pub fn resolve_doubt(&self, chunk: ChunkId, labeler: LabelerId, replacement: &[ChunkInput]) -> Result<ConsensusOutcome> {
        let history = self.chunk_history(None, None)?;
        let h = history
            .iter()
            .find(|h| h.chunk_id == chunk)
            .ok_or(StoreError::UnknownChunk(chunk))?;
        if h.annotation.labeler_id != labeler || !h.annotation.class_id.is_doubt() || h.superseded_by.is_some() {
            return Err(StoreError::NotOpenDoubt(chunk));
        }
        if replacement.is_empty() {
            return Err(StoreError::EmptyReplacement);
        }
        let audio = h.annotation.audio_id.clone();
        let record = self.audio(&audio)?.ok_or_else(|| StoreError::UnknownAudio(audio.clone()))?;
        let ont = self.ontology()?;
        let now_it = IterationId(self.max_iteration_id()?.map_or(0, |i| i.0));
        let view = ont.at(now_it);
        for c in replacement {
            validate_annotation(
                ChunkAnnotation {
                    chunk_id: None,
                    audio_id: audio.clone(),
                    labeler_id: labeler,
                    class_id: c.class_id,
                    onset: c.onset,
                    offset: c.offset,
                },
                &record,
                &view,
            )?;
        }
        let mut seq = self.max_seq()?;
        let tx = self.write_tx()?;
        let now = Utc::now().timestamp();
        let mut first = None;
        for c in replacement {
            self.boundary()?;
            tx.execute(
                "INSERT INTO Chunks (audio_id, class_id, labeler_id, onset, offset, created_at) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![audio.as_str(), class_to_sql(c.class_id), labeler.0, c.onset, c.offset, now],
            )?;
            first.get_or_insert(tx.last_insert_rowid());
        }
        self.boundary()?;
        tx.execute("UPDATE Chunks SET superseded_by = ?2 WHERE id = ?1", params![chunk.0, first])?;
        let outcome = if self.proposal_info(&audio)?.is_some() {
            let o = self.consensus_for(&audio)?;
            self.apply_outcome_tx(&tx, &o, &mut seq)?;
            Some(o)
        } else {
            None
        };
        tx.commit()?;
        match outcome {
            Some(o) => Ok(o),
            None => Err(StoreError::NotProposed(audio)),
        }
    }

    // ---- reporting -------------------------------------------------------------

    /// Chunk counts per class, most frequent first (ties by class id),
    /// truncated to `top`.
    pub fn tag_frequency_histogram(&self, top: usize, filter: &HistogramFilter) -> Result<Vec<TagCount>> {
        let mut stmt = self.conn.prepare_cached(
            "SELECT c.class_id, o.name, COUNT(*) AS n FROM Chunks c
             JOIN Ontology o ON o.class_id = c.class_id
             JOIN Audios a ON a.id = c.audio_id
             WHERE (?1 IS NULL OR a.node_id = ?1)
               AND (?2 OR c.class_id != ?3)
               AND (?4 OR c.superseded_by IS NULL)
             GROUP BY c.class_id ORDER BY n DESC, c.class_id ASC LIMIT ?5",
        )?;
        let rows = stmt.query_map(
            params![
                filter.node_id.as_ref().map(|n| n.as_str()),
                filter.include_doubt,
                class_to_sql(ClassId::DOUBT),
                filter.include_superseded,
                top.min(i64::MAX as usize) as i64
            ],
            |r| Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?, r.get::<_, i64>(2)?)),
        )?;
        let mut out = Vec::new();
        for row in rows {
            let (c, name, n) = row?;
            out.push(TagCount {
                class_id: class_from_sql(c)?,
                name,
                count: n as u64,
            });
        }
        Ok(out)
    }

    /// Foreign key violations as `table:rowid -> parent` lines; empty when
    /// the store is consistent.
    pub fn foreign_key_violations(&self) -> Result<Vec<String>> {
        let mut stmt = self.conn.prepare("PRAGMA foreign_key_check")?;
        let rows = stmt.query_map([], |r| {
            Ok(format!(
                "{}:{} -> {}",
                r.get::<_, String>(0)?,
                r.get::<_, Option<i64>>(1)?.unwrap_or(-1),
                r.get::<_, String>(2)?
            ))
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn row_count(&self, table: &str) -> Result<usize> {
        if !TABLES.contains(&table) {
            return Err(StoreError::UnknownTable(table.into()));
        }
        Ok(self
            .conn
            .query_row(&format!("SELECT COUNT(*) FROM {table}"), [], |r| r.get::<_, i64>(0))? as usize)
    }

    /// Writes a table as tab-separated lines, header first, in rowid order.
    /// Blobs are hex encoded.
    pub fn export_table<W: Write>(&self, table: &str, mut out: W) -> Result<usize> {
        if !TABLES.contains(&table) {
            return Err(StoreError::UnknownTable(table.into()));
        }
        let order = match table {
            "Nodes" | "Audios" => "id",
            "Embeddings" => "audio_id",
            "WindowLocks" => "node_id, window_start",
            "IterationMedoids" => "iteration_id, position",
            "PartitionMembers" => "plan_id, audio_id",
            "SuggestionCredits" => "suggestion_id, labeler_id",
            _ => "rowid",
        };
        let mut stmt = self.conn.prepare(&format!("SELECT * FROM {table} ORDER BY {order}"))?;
        let names: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
        writeln!(out, "{}", names.join("\t"))?;
        let mut rows = stmt.query([])?;
        let mut n = 0;
        while let Some(row) = rows.next()? {
            let mut fields = Vec::with_capacity(names.len());
            for i in 0..names.len() {
                use rusqlite::types::ValueRef;
                fields.push(match row.get_ref(i)? {
                    ValueRef::Null => String::new(),
                    ValueRef::Integer(v) => v.to_string(),
                    ValueRef::Real(v) => v.to_string(),
                    ValueRef::Text(t) => String::from_utf8_lossy(t).replace(['\t', '\n'], " "),
                    ValueRef::Blob(b) => b.iter().map(|x| format!("{x:02x}")).collect(),
                });
            }
            writeln!(out, "{}", fields.join("\t"))?;
            n += 1;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{audio_from_filename, format_chunk_filename, AudioDefaults};
    use chrono::TimeZone;

    fn ts(sec: i64) -> Timestamp {
        Utc.with_ymd_and_hms(2024, 1, 8, 0, 0, 0).unwrap() + chrono::Duration::seconds(sec)
    }

    fn seeded(n: usize) -> (Store, Vec<AudioRecord>) {
        let store = Store::open_in_memory().unwrap();
        let node = NodeId::from("port03");
        let audios: Vec<AudioRecord> = (0..n)
            .map(|i| audio_from_filename(&format_chunk_filename(&node, ts(10 * i as i64)), &AudioDefaults::default()).unwrap())
            .collect();
        store.ensure_path("/data").unwrap();
        let embs: Vec<EmbeddingRecord> = audios
            .iter()
            .enumerate()
            .map(|(i, a)| EmbeddingRecord::new(a.audio_id.clone(), vec![i as f32, 1.0], ClassId(0), 0.5).unwrap())
            .collect();
        store.ingest(&audios, &embs, &NodeInfo::default()).unwrap();
        store
            .seed_ontology(&[(ClassId(0), "bird".into()), (ClassId(1), "car".into())])
            .unwrap();
        let groups = [
            LabelerGroup::new(GroupId(1), [LabelerId(1), LabelerId(2), LabelerId(3)]),
            LabelerGroup::new(GroupId(2), [LabelerId(4), LabelerId(5)]),
        ];
        store.upsert_labelers(&groups, &BTreeMap::new()).unwrap();
        (store, audios)
    }

    fn record(store: &Store, audios: &[AudioRecord], id: i64, picks: &[usize]) -> IterationRecord {
        let window = Window::new(NodeId::from("port03"), ts(0), ts(100_000)).unwrap();
        IterationRecord {
            iteration_id: IterationId(id),
            window,
            created_at: ts(0),
            labeling_index: store.iteration_count().unwrap() + 1,
            audio_count: audios.len(),
            labeled_pct: 0.0,
            fold_count: 2,
            strategy: Strategy::MalMf,
            path: SelectionPath::Mal,
            classifier_fallback: false,
            budget: picks.len(),
            plan_id: None,
            n_ds: 1,
            set_index: 1,
            set_size: audios.len(),
            proposals: picks
                .iter()
                .enumerate()
                .map(|(r, &i)| ProposedAudio {
                    rank: r as u32 + 1,
                    audio_id: audios[i].audio_id.clone(),
                    filename: audios[i].filename.clone(),
                    node_id: audios[i].node_id.clone(),
                    provenance: Provenance::MalMedoid,
                    group_id: Some(GroupId(if r % 2 == 0 { 1 } else { 2 })),
                    label: None,
                    labeler_count: 0,
                    agreement: 0.0,
                })
                .collect(),
            medoids: vec![],
        }
    }

    #[test]
    fn migrate_is_idempotent_and_guards_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.db");
        let s = Store::open(&path).unwrap();
        assert_eq!(s.schema_version().unwrap(), SCHEMA_VERSION);
        assert_eq!(s.migrate().unwrap(), SCHEMA_VERSION);
        for t in TABLES {
            s.row_count(t).unwrap();
        }
        s.connection().pragma_update(None, "user_version", SCHEMA_VERSION + 1).unwrap();
        drop(s);
        assert!(matches!(
            Store::open(&path),
            Err(StoreError::IncompatibleVersion { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn commit_then_replay_is_unchanged() {
        let (s, audios) = seeded(10);
        let mut r = record(&s, &audios, 1, &[0, 3, 5]);
        s.commit_iteration(&mut r, None).unwrap();
        assert_eq!(s.row_count("ALPreprocessing").unwrap(), 1);
        assert_eq!(s.row_count("WavsProposed").unwrap(), 3);
        let mut again = r.clone();
        s.commit_iteration(&mut again, None).unwrap();
        assert_eq!(s.row_count("WavsProposed").unwrap(), 3);
        assert_eq!(s.iteration(IterationId(1)).unwrap().unwrap(), r);
    }

    #[test]
    fn injected_fault_leaves_nothing() {
        let (s, audios) = seeded(10);
        let mut r = record(&s, &audios, 1, &[0, 3, 5]);
        s.inject_fault_at(Some(3));
        assert!(matches!(s.commit_iteration(&mut r, None), Err(StoreError::InjectedFault(3))));
        assert_eq!(s.row_count("ALPreprocessing").unwrap(), 0);
        assert_eq!(s.row_count("WavsProposed").unwrap(), 0);
        s.inject_fault_at(None);
        s.commit_iteration(&mut r, None).unwrap();
        assert_eq!(s.row_count("WavsProposed").unwrap(), 3);
    }

    fn full(c: u32) -> ChunkInput {
        ChunkInput {
            class_id: ClassId(c),
            onset: 0.0,
            offset: 10.0,
        }
    }

    #[test]
    fn annotations_refresh_counts_and_respect_groups() {
        let (s, audios) = seeded(10);
        let mut r = record(&s, &audios, 1, &[0, 3]);
        s.commit_iteration(&mut r, None).unwrap();
        let a0 = &audios[0].audio_id;
        for l in 1..=3 {
            s.submit_annotations(LabelerId(l), a0, &[full(0)]).unwrap();
        }
        let it = s.iteration(IterationId(1)).unwrap().unwrap();
        assert_eq!(it.proposals[0].labeler_count, 3);
        assert!((it.proposals[0].agreement - 1.0).abs() < 1e-12);

        assert!(matches!(
            s.submit_annotations(LabelerId(4), a0, &[full(0)]),
            Err(StoreError::WrongGroup { .. })
        ));
        let bad = ChunkAnnotation {
            chunk_id: None,
            audio_id: a0.clone(),
            labeler_id: LabelerId(99),
            class_id: ClassId(0),
            onset: 0.0,
            offset: 1.0,
        };
        let before = s.row_count("Chunks").unwrap();
        let good = ChunkAnnotation {
            labeler_id: LabelerId(1),
            ..bad.clone()
        };
        assert!(matches!(s.record_annotations(&[good, bad]), Err(StoreError::UnknownLabeler(_))));
        assert_eq!(s.row_count("Chunks").unwrap(), before);
        assert!(matches!(
            s.submit_annotations(LabelerId(1), a0, &[ChunkInput { class_id: ClassId(0), onset: 4.0, offset: 3.0 }]),
            Err(StoreError::Domain(DomainError::OutOfRangeTimes { .. }))
        ));
    }

    #[test]
    fn consensus_promotion_and_doubt_resolution() {
        let (s, audios) = seeded(10);
        let mut r = record(&s, &audios, 1, &[0]);
        s.commit_iteration(&mut r, None).unwrap();
        let a = &audios[0].audio_id;
        s.submit_annotations(LabelerId(1), a, &[full(0)]).unwrap();
        s.submit_annotations(LabelerId(2), a, &[full(ClassId::DOUBT.0)]).unwrap();
        s.submit_annotations(LabelerId(3), a, &[full(1)]).unwrap();
        let out = s.run_consensus(IterationId(1)).unwrap();
        assert_eq!(out[0].medoid_class, None);
        assert!(s.labeled_ids().unwrap().is_empty());

        let work = s.doubt_worklist(LabelerId(2)).unwrap();
        assert_eq!(work.len(), 1);
        let o = s.resolve_doubt(work[0].1, LabelerId(2), &[full(1)]).unwrap();
        assert_eq!(o.medoid_class, Some(ClassId(1)));
        assert!(s.labeled_ids().unwrap().contains(a));
        assert!(s.doubt_worklist(LabelerId(2)).unwrap().is_empty());
        assert!(matches!(
            s.resolve_doubt(work[0].1, LabelerId(2), &[full(1)]),
            Err(StoreError::NotOpenDoubt(_))
        ));
        assert!(s.foreign_key_violations().unwrap().is_empty());
    }

    #[test]
    fn suggestions_merge_and_activate_next_iteration() {
        let (s, audios) = seeded(4);
        let mut r = record(&s, &audios, 1, &[0]);
        s.commit_iteration(&mut r, None).unwrap();
        assert!(matches!(s.suggest_class(LabelerId(1), " Bird ", false), Err(StoreError::DuplicateName(_))));
        let a = s.suggest_class(LabelerId(1), "church bell", false).unwrap();
        let b = s.suggest_class(LabelerId(4), "Church  Bell", false).unwrap();
        assert_eq!(a.id, b.id);
        assert_eq!(b.credited, [LabelerId(1), LabelerId(4)]);
        assert_eq!(b.status, SuggestionStatus::Pending);
        let class = s.approve_suggestion(a.id).unwrap();
        assert_eq!(class.available_from, Some(IterationId(2)));
        let ont = s.ontology().unwrap();
        assert!(ont.at(IterationId(1)).check(class.class_id).is_err());
        assert!(ont.at(IterationId(2)).check(class.class_id).is_ok());
        // Current iteration's proposal cannot use it yet.
        assert!(s
            .submit_annotations(LabelerId(1), &audios[0].audio_id, &[full(class.class_id.0)])
            .is_err());
        assert_eq!(s.approve_suggestion(a.id).unwrap().class_id, class.class_id);
    }

    #[test]
    fn histogram_counts_and_truncates() {
        let (s, audios) = seeded(4);
        assert!(s.tag_frequency_histogram(50, &HistogramFilter::default()).unwrap().is_empty());
        let mut r = record(&s, &audios, 1, &[0, 1, 2, 3]);
        s.commit_iteration(&mut r, None).unwrap();
        s.submit_annotations(LabelerId(1), &audios[0].audio_id, &[full(1), full(1), full(0)]).unwrap();
        s.submit_annotations(LabelerId(4), &audios[1].audio_id, &[full(1)]).unwrap();
        let h = s.tag_frequency_histogram(50, &HistogramFilter::default()).unwrap();
        let counts: Vec<_> = h.iter().map(|t| (t.class_id.0, t.count)).collect();
        assert_eq!(counts, [(1, 3), (0, 1)]);
        assert_eq!(s.tag_frequency_histogram(1, &HistogramFilter::default()).unwrap().len(), 1);
    }

    #[test]
    fn window_locks_exclude_overlap() {
        let (s, _) = seeded(1);
        let w = Window::new(NodeId::from("port03"), ts(0), ts(100)).unwrap();
        let overlap = Window::new(NodeId::from("port03"), ts(50), ts(200)).unwrap();
        let apart = Window::new(NodeId::from("port03"), ts(100), ts(200)).unwrap();
        s.acquire_window_lock(&w, "a").unwrap();
        assert!(matches!(s.acquire_window_lock(&overlap, "b"), Err(StoreError::WindowBusy)));
        s.acquire_window_lock(&apart, "c").unwrap();
        s.release_window_lock(&w).unwrap();
        s.acquire_window_lock(&overlap, "b").unwrap_err();
        s.release_window_lock(&apart).unwrap();
        s.acquire_window_lock(&overlap, "b").unwrap();
    }

    #[test]
    fn export_writes_header_and_rows() {
        let (s, _) = seeded(3);
        let mut buf = Vec::new();
        assert_eq!(s.export_table("Audios", &mut buf).unwrap(), 3);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id\tpath_id\tnode_id"));
        assert!(matches!(s.export_table("sqlite_master", Vec::new()), Err(StoreError::UnknownTable(_))));
    }
}
