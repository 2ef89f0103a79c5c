//! Shared vocabulary: identifiers, catalog records, annotations, ontology and
//! labeler groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Timestamp = DateTime<Utc>;

/// Default length of a recorded chunk in seconds.
pub const DEFAULT_CHUNK_SECONDS: f64 = 10.0;

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

macro_rules! int_id {
    ($name:ident, $inner:ty) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

string_id!(AudioId);
string_id!(NodeId);
int_id!(ClassId, u32);
int_id!(LabelerId, u32);
int_id!(GroupId, u32);
int_id!(ChunkId, i64);
int_id!(IterationId, i64);

impl ClassId {
    /// Reserved class for events a labeler could not confidently tag.
    pub const DOUBT: ClassId = ClassId(u32::MAX);

    pub fn is_doubt(self) -> bool {
        self == Self::DOUBT
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("embedding for {0} has dimension {1}, expected {2}")]
    DimensionMismatch(AudioId, usize, usize),
    #[error("embedding for {0} contains a non-finite component")]
    NonFiniteComponent(AudioId),
    #[error("top-1 probability {1} of {0} outside [0, 1]")]
    ProbOutOfRange(AudioId, f32),
    #[error("annotation times [{onset}, {offset}) outside audio of {duration} s")]
    OutOfRangeTimes {
        onset: f64,
        offset: f64,
        duration: f64,
    },
    #[error("class {0} is not in the ontology")]
    UnknownClass(ClassId),
    #[error("class {0} is not active for this iteration")]
    InactiveClass(ClassId),
    #[error("labeler {0} belongs to more than one group")]
    OverlappingGroups(LabelerId),
    #[error("group {0} has no labelers")]
    EmptyGroup(GroupId),
    #[error("window start must precede window end")]
    InvalidWindow,
}

/// Feature vector and top-1 prediction of the upstream tagger for one chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub audio_id: AudioId,
    pub vector: Vec<f32>,
    pub top1_class: ClassId,
    pub top1_prob: f32,
}

impl EmbeddingRecord {
    pub fn new(
        audio_id: AudioId,
        vector: Vec<f32>,
        top1_class: ClassId,
        top1_prob: f32,
    ) -> Result<Self, DomainError> {
        let rec = Self {
            audio_id,
            vector,
            top1_class,
            top1_prob,
        };
        rec.check(rec.vector.len())?;
        Ok(rec)
    }

    /// Checks the record against a pool-wide dimension.
    pub fn check(&self, dim: usize) -> Result<(), DomainError> {
        if self.vector.len() != dim {
            return Err(DomainError::DimensionMismatch(
                self.audio_id.clone(),
                self.vector.len(),
                dim,
            ));
        }
        if self.vector.iter().any(|v| !v.is_finite()) {
            return Err(DomainError::NonFiniteComponent(self.audio_id.clone()));
        }
        if !(0.0..=1.0).contains(&self.top1_prob) {
            return Err(DomainError::ProbOutOfRange(
                self.audio_id.clone(),
                self.top1_prob,
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioRecord {
    pub audio_id: AudioId,
    pub filename: String,
    pub node_id: NodeId,
    pub recorded_at: Timestamp,
    pub duration: f64,
    pub sampling_rate: u32,
    pub bits_per_sample: u16,
    pub channels: u16,
    pub path_id: i64,
}

/// One labeler's strong label on one audio.
///
/// Weak (whole clip) labels are represented with `onset = 0` and
/// `offset = duration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkAnnotation {
    pub chunk_id: Option<ChunkId>,
    pub audio_id: AudioId,
    pub labeler_id: LabelerId,
    pub class_id: ClassId,
    pub onset: f64,
    pub offset: f64,
}

impl ChunkAnnotation {
    pub fn span(&self) -> f64 {
        self.offset - self.onset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrigin {
    Seed,
    Suggested,
}

impl ClassOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassOrigin::Seed => "seed",
            ClassOrigin::Suggested => "suggested",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seed" => Some(ClassOrigin::Seed),
            "suggested" => Some(ClassOrigin::Suggested),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyClass {
    pub class_id: ClassId,
    pub name: String,
    pub origin: ClassOrigin,
    pub active: bool,
    /// First iteration in which the class may be used. `None` means it has
    /// always been available.
    pub available_from: Option<IterationId>,
}

impl OntologyClass {
    pub fn usable_in(&self, iteration: IterationId) -> bool {
        self.active && self.available_from.is_none_or(|from| iteration >= from)
    }
}

/// The set of permissible event classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    classes: BTreeMap<ClassId, OntologyClass>,
}

impl Default for Ontology {
    fn default() -> Self {
        Self::new()
    }
}

impl Ontology {
    pub const DOUBT_NAME: &'static str = "Doubt";

    /// An ontology holding only the reserved Doubt class.
    pub fn new() -> Self {
        let mut classes = BTreeMap::new();
        classes.insert(
            ClassId::DOUBT,
            OntologyClass {
                class_id: ClassId::DOUBT,
                name: Self::DOUBT_NAME.to_owned(),
                origin: ClassOrigin::Seed,
                active: true,
                available_from: None,
            },
        );
        Self { classes }
    }

    /// Seeds with the given `(id, name)` pairs plus Doubt.
    pub fn seeded<I, S>(seed: I) -> Self
    where
        I: IntoIterator<Item = (ClassId, S)>,
        S: Into<String>,
    {
        let mut ont = Self::new();
        for (id, name) in seed {
            ont.insert(OntologyClass {
                class_id: id,
                name: name.into(),
                origin: ClassOrigin::Seed,
                active: true,
                available_from: None,
            });
        }
        ont
    }

    /// Inserts or replaces a class. The Doubt class cannot be replaced or
    /// deactivated.
    pub fn insert(&mut self, class: OntologyClass) -> bool {
        if class.class_id.is_doubt() {
            return false;
        }
        self.classes.insert(class.class_id, class);
        true
    }

    pub fn get(&self, id: ClassId) -> Option<&OntologyClass> {
        self.classes.get(&id)
    }

    pub fn classes(&self) -> impl Iterator<Item = &OntologyClass> {
        self.classes.values()
    }

    pub fn find_active_by_name(&self, name: &str) -> Option<&OntologyClass> {
        self.classes
            .values()
            .find(|c| c.active && c.name.eq_ignore_ascii_case(name))
    }

    pub fn next_free_id(&self) -> ClassId {
        let max = self
            .classes
            .keys()
            .filter(|c| !c.is_doubt())
            .map(|c| c.0)
            .max();
        ClassId(max.map_or(0, |m| m + 1))
    }

    /// Read-only view as seen by annotations of `iteration`.
    pub fn at(&self, iteration: IterationId) -> OntologyView<'_> {
        OntologyView {
            ontology: self,
            iteration,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OntologyView<'a> {
    ontology: &'a Ontology,
    iteration: IterationId,
}

impl OntologyView<'_> {
    pub fn check(&self, class: ClassId) -> Result<(), DomainError> {
        match self.ontology.get(class) {
            None => Err(DomainError::UnknownClass(class)),
            Some(c) if !c.usable_in(self.iteration) => Err(DomainError::InactiveClass(class)),
            Some(_) => Ok(()),
        }
    }

    pub fn usable(&self) -> impl Iterator<Item = &OntologyClass> {
        let it = self.iteration;
        self.ontology.classes().filter(move |c| c.usable_in(it))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelerGroup {
    pub group_id: GroupId,
    pub labeler_ids: BTreeSet<LabelerId>,
}

impl LabelerGroup {
    pub fn new(group_id: GroupId, labelers: impl IntoIterator<Item = LabelerId>) -> Self {
        Self {
            group_id,
            labeler_ids: labelers.into_iter().collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.labeler_ids.len()
    }

    pub fn contains(&self, l: LabelerId) -> bool {
        self.labeler_ids.contains(&l)
    }
}

/// Checks that groups are non-empty and pairwise disjoint.
pub fn validate_groups(groups: &[LabelerGroup]) -> Result<(), DomainError> {
    let mut seen = BTreeSet::new();
    for g in groups {
        if g.labeler_ids.is_empty() {
            return Err(DomainError::EmptyGroup(g.group_id));
        }
        for &l in &g.labeler_ids {
            if !seen.insert(l) {
                return Err(DomainError::OverlappingGroups(l));
            }
        }
    }
    Ok(())
}

/// A half-open time window `[start, end)` on one recording node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub node_id: NodeId,
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Window {
    pub fn new(node_id: NodeId, start: Timestamp, end: Timestamp) -> Result<Self, DomainError> {
        if start >= end {
            return Err(DomainError::InvalidWindow);
        }
        Ok(Self {
            node_id,
            start,
            end,
        })
    }

    pub fn contains(&self, node: &NodeId, at: Timestamp) -> bool {
        &self.node_id == node && at >= self.start && at < self.end
    }
}

/// The analysis window's sample set split into labeled medoid candidates and
/// unlabeled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSelection {
    pub window: Window,
    pub s_w: BTreeSet<AudioId>,
    pub s_wm: BTreeSet<AudioId>,
    pub s_wnh: BTreeSet<AudioId>,
}

impl WindowSelection {
    /// `s_w = s_wm ∪ s_wnh` and `s_wm ∩ s_wnh = ∅`.
    pub fn is_consistent(&self) -> bool {
        self.s_wm.is_disjoint(&self.s_wnh)
            && self.s_wm.len() + self.s_wnh.len() == self.s_w.len()
            && self.s_wm.iter().chain(&self.s_wnh).all(|a| self.s_w.contains(a))
    }

    /// Fraction of the window that is already labeled.
    pub fn labeled_fraction(&self) -> f64 {
        if self.s_w.is_empty() {
            0.0
        } else {
            self.s_wm.len() as f64 / self.s_w.len() as f64
        }
    }
}

pub fn validate_annotation(
    a: ChunkAnnotation,
    audio: &AudioRecord,
    ontology: &OntologyView<'_>,
) -> Result<ChunkAnnotation, DomainError> {
    let ok = a.onset.is_finite()
        && a.offset.is_finite()
        && 0.0 <= a.onset
        && a.onset < a.offset
        && a.offset <= audio.duration;
    if !ok {
        return Err(DomainError::OutOfRangeTimes {
            onset: a.onset,
            offset: a.offset,
            duration: audio.duration,
        });
    }
    ontology.check(a.class_id)?;
    Ok(a)
}
