//! Medoid pool selection, nearest-medoid label propagation, the MAL
//! bootstrap and mismatch-first proposal selection.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AudioId, ClassId, EmbeddingRecord, IterationId};
use crate::kmedoids::{euclidean, kmedoids, DistanceMatrix, KMedoidsConfig};

/// Default medoid capacity.
pub const DEFAULT_N_MMAX: usize = 5_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CommitteeError {
    #[error("budget {budget} exceeds pool of {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("medoid pool is empty")]
    EmptyMedoidPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedoidTier {
    /// Labeled in the current window.
    Window,
    /// Same node, other windows.
    SameNode,
    OtherNode,
}

impl MedoidTier {
    pub fn as_str(self) -> &'static str {
        match self {
            MedoidTier::Window => "window",
            MedoidTier::SameNode => "same_node",
            MedoidTier::OtherNode => "other_node",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "window" => Some(Self::Window),
            "same_node" => Some(Self::SameNode),
            "other_node" => Some(Self::OtherNode),
            _ => None,
        }
    }
}

/// A sample with a consensus label, eligible as a medoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub audio_id: AudioId,
    pub class_id: ClassId,
    /// Monotone stamp of when consensus was reached; larger is newer.
    pub labeled_seq: i64,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedoidEntry {
    pub audio_id: AudioId,
    pub class_id: ClassId,
    pub tier: MedoidTier,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MedoidPool {
    pub entries: Vec<MedoidEntry>,
    pub capacity: usize,
}

impl MedoidPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<AudioId> {
        self.entries.iter().map(|e| e.audio_id.clone()).collect()
    }
}

/// Fills up to `n_mmax` medoids tier by tier: window labels, then the same
/// node's other windows, then other nodes. Within a tier the newest
/// consensus comes first, ties by audio id.
pub fn select_medoids(
    window_labeled: Vec<LabeledSample>,
    same_node_other_windows: Vec<LabeledSample>,
    other_nodes: Vec<LabeledSample>,
    n_mmax: usize,
) -> MedoidPool {
    let mut entries = Vec::with_capacity(n_mmax.min(1024));
    let tiers = [
        (MedoidTier::Window, window_labeled),
        (MedoidTier::SameNode, same_node_other_windows),
        (MedoidTier::OtherNode, other_nodes),
    ];
    for (tier, mut samples) in tiers {
        if entries.len() >= n_mmax {
            break;
        }
        samples.retain(|s| !s.class_id.is_doubt());
        samples.sort_by(|a, b| b.labeled_seq.cmp(&a.labeled_seq).then_with(|| a.audio_id.cmp(&b.audio_id)));
        let room = n_mmax - entries.len();
        entries.extend(samples.into_iter().take(room).map(|s| MedoidEntry {
            audio_id: s.audio_id,
            class_id: s.class_id,
            tier,
            vector: s.vector,
        }));
    }
    MedoidPool {
        entries,
        capacity: n_mmax,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propagated {
    pub class_id: ClassId,
    pub medoid: AudioId,
    pub distance: f64,
}

/// Nearest-medoid label for each record; equal distances go to the medoid
/// with the lowest audio id.
pub fn propagate_labels(
    pool: &MedoidPool,
    records: &[EmbeddingRecord],
) -> Result<HashMap<AudioId, Propagated>, CommitteeError> {
    if pool.is_empty() {
        return Err(CommitteeError::EmptyMedoidPool);
    }
    let mut medoids: Vec<&MedoidEntry> = pool.entries.iter().collect();
    medoids.sort_by(|a, b| a.audio_id.cmp(&b.audio_id));
    Ok(records
        .par_iter()
        .map(|r| {
            let mut best = (f64::INFINITY, 0usize);
            for (i, m) in medoids.iter().enumerate() {
                let d = euclidean(&r.vector, &m.vector);
                if d < best.0 {
                    best = (d, i);
                }
            }
            let m = medoids[best.1];
            (
                r.audio_id.clone(),
                Propagated {
                    class_id: m.class_id,
                    medoid: m.audio_id.clone(),
                    distance: best.0,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    MalMedoid,
    Mismatch,
    UncertaintyFill,
    /// Uniform draw of the random baseline strategy.
    Random,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::MalMedoid => "mal_medoid",
            Provenance::Mismatch => "mismatch",
            Provenance::UncertaintyFill => "uncertainty_fill",
            Provenance::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mal_medoid" => Some(Self::MalMedoid),
            "mismatch" => Some(Self::Mismatch),
            "uncertainty_fill" => Some(Self::UncertaintyFill),
            "random" => Some(Self::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub audio_id: AudioId,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalBatch {
    pub iteration_id: IterationId,
    pub budget: usize,
    pub proposals: Vec<Proposal>,
}

impl ProposalBatch {
    pub fn ids(&self) -> impl Iterator<Item = &AudioId> {
        self.proposals.iter().map(|p| &p.audio_id)
    }
}

/// Proposes the `k` medoids of a k-medoids clustering of `records`.
pub fn mal_bootstrap(
    records: &[EmbeddingRecord],
    k: usize,
    config: &KMedoidsConfig,
) -> Result<Vec<Proposal>, CommitteeError> {
    if k > records.len() {
        return Err(CommitteeError::BudgetExceedsPool {
            budget: k,
            pool: records.len(),
        });
    }
    let vectors: Vec<&[f32]> = records.iter().map(|r| r.vector.as_slice()).collect();
    let mat = DistanceMatrix::from_points(&vectors);
    let clustering = kmedoids(&mat, k, config);
    Ok(clustering
        .medoids
        .into_iter()
        .map(|i| Proposal {
            audio_id: records[i].audio_id.clone(),
            provenance: Provenance::MalMedoid,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitteePrediction {
    pub audio_id: AudioId,
    pub propagated_class: ClassId,
    pub classifier_class: ClassId,
    pub classifier_confidence: f64,
}

impl CommitteePrediction {
    pub fn is_mismatch(&self) -> bool {
        self.propagated_class != self.classifier_class
    }
}

/// Mismatch-first selection.
///
/// Disagreements between propagation and classifier come first, ordered by
/// greedy farthest-point traversal from `anchors` (medoids and earlier
/// picks) in embedding space; ties go to the lowest audio id. Remaining
/// budget is filled with agreeing samples by ascending classifier
/// confidence. Audios in `excluded` are never proposed.
pub fn mismatch_first_select(
    predictions: &[CommitteePrediction],
    vectors: &HashMap<AudioId, &[f32]>,
    anchors: &[&[f32]],
    excluded: &BTreeSet<AudioId>,
    budget: usize,
) -> Vec<Proposal> {
    let mut eligible: Vec<&CommitteePrediction> = predictions
        .iter()
        .filter(|p| !excluded.contains(&p.audio_id) && vectors.contains_key(&p.audio_id))
        .collect();
    eligible.sort_by(|a, b| a.audio_id.cmp(&b.audio_id));
    eligible.dedup_by(|a, b| a.audio_id == b.audio_id);
    let (mismatched, matched): (Vec<_>, Vec<_>) = eligible.into_iter().partition(|p| p.is_mismatch());

    let mut out = Vec::with_capacity(budget.min(predictions.len()));
    let cand: Vec<&[f32]> = mismatched.iter().map(|p| vectors[&p.audio_id]).collect();
    let mut min_dist: Vec<f64> = cand
        .par_iter()
        .map(|v| anchors.iter().map(|a| euclidean(v, a)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut taken = vec![false; cand.len()];
    while out.len() < budget {
        let mut best: Option<(usize, f64)> = None;
        for (i, &d) in min_dist.iter().enumerate() {
            if !taken[i] && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((pick, _)) = best else { break };
        taken[pick] = true;
        out.push(Proposal {
            audio_id: mismatched[pick].audio_id.clone(),
            provenance: Provenance::Mismatch,
        });
        let pv = cand[pick];
        min_dist
            .par_iter_mut()
            .zip(cand.par_iter())
            .for_each(|(d, v)| *d = d.min(euclidean(v, pv)));
    }

    if out.len() < budget {
        let mut fill = matched;
        fill.sort_by(|a, b| {
            a.classifier_confidence
                .total_cmp(&b.classifier_confidence)
                .then_with(|| a.audio_id.cmp(&b.audio_id))
        });
        let room = budget - out.len();
        out.extend(fill.into_iter().take(room).map(|p| Proposal {
            audio_id: p.audio_id.clone(),
            provenance: Provenance::UncertaintyFill,
        }));
    }
    out
}
