//! Bookkeeping for one active-learning iteration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::committee::{MedoidTier, Provenance};
use crate::domain::{AudioId, ClassId, GroupId, IterationId, NodeId, Timestamp, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    MalMf,
    Random,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::MalMf => "mal_mf",
            Strategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mal_mf" => Some(Self::MalMf),
            "random" => Some(Self::Random),
            _ => None,
        }
    }
}

/// Which branch produced the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPath {
    Mal,
    Committee,
    Random,
}

impl SelectionPath {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionPath::Mal => "mal",
            SelectionPath::Committee => "committee",
            SelectionPath::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mal" => Some(Self::Mal),
            "committee" => Some(Self::Committee),
            "random" => Some(Self::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposedAudio {
    /// 1-based position in the batch.
    pub rank: u32,
    pub audio_id: AudioId,
    pub filename: String,
    pub node_id: NodeId,
    pub provenance: Provenance,
    pub group_id: Option<GroupId>,
    /// Consensus class once promoted.
    pub label: Option<ClassId>,
    pub labeler_count: u32,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMedoid {
    pub audio_id: AudioId,
    pub class_id: ClassId,
    pub tier: MedoidTier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration_id: IterationId,
    pub window: Window,
    pub created_at: Timestamp,
    /// 1-based count of labeling iterations, including this one.
    pub labeling_index: u64,
    /// |S_w|.
    pub audio_count: usize,
    /// |S_wm| / |S_w|.
    pub labeled_pct: f64,
    pub fold_count: u32,
    pub strategy: Strategy,
    pub path: SelectionPath,
    /// The classifier could not be trained and the committee ran on
    /// propagation alone.
    pub classifier_fallback: bool,
    pub budget: usize,
    pub plan_id: Option<i64>,
    pub n_ds: usize,
    /// 1-based index of the processed disjoint set.
    pub set_index: usize,
    pub set_size: usize,
    pub proposals: Vec<ProposedAudio>,
    pub medoids: Vec<IterationMedoid>,
}

impl IterationRecord {
    pub fn provenance_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for p in &self.proposals {
            *out.entry(p.provenance.as_str()).or_default() += 1;
        }
        out
    }

    pub fn proposals_for_group(&self, group: GroupId) -> impl Iterator<Item = &ProposedAudio> {
        self.proposals.iter().filter(move |p| p.group_id == Some(group))
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "iteration      {}", self.iteration_id);
        let _ = writeln!(
            s,
            "window         {} [{} .. {})",
            self.window.node_id,
            self.window.start.format("%Y-%m-%dT%H:%M:%SZ"),
            self.window.end.format("%Y-%m-%dT%H:%M:%SZ")
        );
        let _ = writeln!(s, "labeling index {}", self.labeling_index);
        let _ = writeln!(s, "audios         {}", self.audio_count);
        let _ = writeln!(s, "labeled        {:.2}%", self.labeled_pct * 100.0);
        let _ = writeln!(s, "strategy       {} ({})", self.strategy.as_str(), self.path.as_str());
        if self.classifier_fallback {
            let _ = writeln!(s, "classifier     degenerate, propagation only");
        }
        let _ = writeln!(s, "disjoint set   {}/{} ({} audios)", self.set_index, self.n_ds, self.set_size);
        let _ = writeln!(s, "medoids        {}", self.medoids.len());
        let _ = writeln!(s, "proposals      {}/{}", self.proposals.len(), self.budget);
        for (prov, n) in self.provenance_counts() {
            let _ = writeln!(s, "  {prov:<16} {n}");
        }
        s
    }
}
