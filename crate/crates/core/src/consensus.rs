//! Group consensus over strong labels, doubt resolution scheduling and
//! ontology name handling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AudioId, ChunkAnnotation, ChunkId, ClassId, LabelerGroup, LabelerId};

/// Labeling iterations between doubt-resolution rounds.
pub const DOUBT_PERIOD: u64 = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("labeler {0} is not in the group")]
    ForeignLabeler(LabelerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    UniqueQualifier,
    LongestDuration,
    None,
}

impl DecidedBy {
    pub fn as_str(self) -> &'static str {
        match self {
            DecidedBy::UniqueQualifier => "unique_qualifier",
            DecidedBy::LongestDuration => "longest_duration",
            DecidedBy::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub audio_id: AudioId,
    pub medoid_class: Option<ClassId>,
    /// Largest share of the group that used any one non-Doubt class.
    pub agreement: f64,
    pub qualifying_classes: Vec<ClassId>,
    pub decided_by: DecidedBy,
    /// Distinct group members with at least one annotation.
    pub labeler_count: usize,
}

/// Distinct labelers needed for a class to qualify: ceil(2g/3).
pub fn qualification_threshold(group_size: usize) -> usize {
    (2 * group_size).div_ceil(3)
}

pub fn compute_consensus(
    audio_id: &AudioId,
    annotations: &[ChunkAnnotation],
    group: &LabelerGroup,
) -> Result<ConsensusOutcome, ConsensusError> {
    if let Some(a) = annotations.iter().find(|a| !group.contains(a.labeler_id)) {
        return Err(ConsensusError::ForeignLabeler(a.labeler_id));
    }
    let mut per_class: BTreeMap<ClassId, (BTreeSet<LabelerId>, f64)> = BTreeMap::new();
    for a in annotations.iter().filter(|a| !a.class_id.is_doubt()) {
        let e = per_class.entry(a.class_id).or_default();
        e.0.insert(a.labeler_id);
        e.1 += a.span();
    }
    let labeler_count = annotations.iter().map(|a| a.labeler_id).collect::<BTreeSet<_>>().len();
    let g = group.size();
    let agreement = match per_class.values().map(|(l, _)| l.len()).max() {
        Some(m) if g > 0 => m as f64 / g as f64,
        _ => 0.0,
    };
    let threshold = qualification_threshold(g);
    let qualifying: Vec<(ClassId, f64)> = per_class
        .iter()
        .filter(|(_, (l, _))| l.len() >= threshold && !l.is_empty())
        .map(|(c, (_, d))| (*c, *d))
        .collect();

    let (medoid_class, decided_by) = match qualifying.len() {
        0 => (None, DecidedBy::None),
        1 => (Some(qualifying[0].0), DecidedBy::UniqueQualifier),
        _ => {
            // Ascending class order, so a strict comparison keeps the lowest id on ties.
            let mut best = qualifying[0];
            for &q in &qualifying[1..] {
                if q.1 > best.1 {
                    best = q;
                }
            }
            (Some(best.0), DecidedBy::LongestDuration)
        }
    };
    Ok(ConsensusOutcome {
        audio_id: audio_id.clone(),
        medoid_class,
        agreement,
        qualifying_classes: qualifying.into_iter().map(|(c, _)| c).collect(),
        decided_by,
        labeler_count,
    })
}

/// Whether labeling iteration `index` (1-based) is followed by a doubt round.
pub fn is_doubt_iteration(index: u64) -> bool {
    index > 0 && index % DOUBT_PERIOD == 0
}

/// A stored chunk with its resolution state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkHistory {
    pub chunk_id: ChunkId,
    pub annotation: ChunkAnnotation,
    pub superseded_by: Option<ChunkId>,
}

/// Unresolved Doubt chunks authored by `labeler`, oldest first.
pub fn build_doubt_worklist(labeler: LabelerId, history: &[ChunkHistory]) -> Vec<(AudioId, ChunkId)> {
    let mut out: Vec<(AudioId, ChunkId)> = history
        .iter()
        .filter(|h| {
            h.annotation.labeler_id == labeler && h.annotation.class_id.is_doubt() && h.superseded_by.is_none()
        })
        .map(|h| (h.annotation.audio_id.clone(), h.chunk_id))
        .collect();
    out.sort_by_key(|(_, c)| *c);
    out
}

/// Canonical form for comparing suggested class names: trimmed, inner
/// whitespace collapsed, case folded.
pub fn normalize_class_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}
