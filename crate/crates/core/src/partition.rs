//! Window selection, labeled/unlabeled split and the division of the
//! unlabeled pool into prioritized disjoint sets.
//!
//! Each top-1 class bucket is sorted by ascending top-1 probability (ties by
//! audio id) and dealt into the sets so that less certain samples land in
//! higher priority sets:
//!
//! * fewer samples than sets: the whole bucket goes to set 1;
//! * exactly one per set: the k-th least certain goes to set k;
//! * more than one per set: contiguous runs of `L / n` samples, the first
//!   `L mod n` sets taking one extra.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AudioId, AudioRecord, ClassId, EmbeddingRecord, NodeId, Window, WindowSelection};

/// Default maximum number of samples processed by one AL run.
pub const DEFAULT_N_SMAX: usize = 15_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub n_smax: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { n_smax: DEFAULT_N_SMAX }
    }
}

impl PartitionConfig {
    pub fn new(n_smax: usize) -> Self {
        assert!(n_smax >= 1, "n_smax must be positive");
        Self { n_smax }
    }
}

/// Audio catalog with its registered nodes.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub nodes: BTreeSet<NodeId>,
    pub audios: Vec<AudioRecord>,
}

impl Catalog {
    pub fn new(audios: Vec<AudioRecord>) -> Self {
        let nodes = audios.iter().map(|a| a.node_id.clone()).collect();
        Self { nodes, audios }
    }
}

pub fn select_window(catalog: &Catalog, window: &Window) -> Result<BTreeSet<AudioId>, PartitionError> {
    if !catalog.nodes.contains(&window.node_id) {
        return Err(PartitionError::UnknownNode(window.node_id.clone()));
    }
    Ok(catalog
        .audios
        .iter()
        .filter(|a| window.contains(&a.node_id, a.recorded_at))
        .map(|a| a.audio_id.clone())
        .collect())
}

pub fn split_labeled(window: Window, s_w: BTreeSet<AudioId>, labeled: &BTreeSet<AudioId>) -> WindowSelection {
    let (s_wm, s_wnh) = s_w.iter().cloned().partition(|a| labeled.contains(a));
    WindowSelection {
        window,
        s_w,
        s_wm,
        s_wnh,
    }
}

/// Number of disjoint sets needed so that the base allocation never exceeds
/// `n_smax` per set.
pub fn num_disjoint_sets(pool_size: usize, config: &PartitionConfig) -> usize {
    if pool_size == 0 {
        0
    } else {
        pool_size.div_ceil(config.n_smax).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationRule {
    /// Fewer samples than sets.
    Concentrate,
    /// Exactly one sample per set.
    OnePerSet,
    /// Several samples per set.
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAllocation {
    pub count: usize,
    pub rule: AllocationRule,
    /// Samples of this class per set after spilling.
    pub per_set: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spill {
    pub audio_id: AudioId,
    pub class: ClassId,
    pub from_set: usize,
    pub to_set: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n_ds: usize,
    /// Index 0 is the highest priority set.
    pub sets: Vec<BTreeSet<AudioId>>,
    pub class_buckets: BTreeMap<ClassId, ClassAllocation>,
    pub spills: Vec<Spill>,
}

impl PartitionPlan {
    pub fn len(&self) -> usize {
        self.sets.iter().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Zero-based set index of an audio.
    pub fn set_of(&self, id: &AudioId) -> Option<usize> {
        self.sets.iter().position(|s| s.contains(id))
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "disjoint sets: {}", self.n_ds);
        let _ = writeln!(out, "{:>5} {:>8}", "set", "size");
        for (j, s) in self.sets.iter().enumerate() {
            let _ = writeln!(out, "{:>5} {:>8}", j + 1, s.len());
        }
        let _ = writeln!(out, "{:>8} {:>8} {:<12} per-set", "class", "L_c", "rule");
        for (c, a) in &self.class_buckets {
            let rule = match a.rule {
                AllocationRule::Concentrate => "concentrate",
                AllocationRule::OnePerSet => "one-per-set",
                AllocationRule::Spread => "spread",
            };
            let per: Vec<String> = a.per_set.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{:>8} {:>8} {:<12} {}", c.0, a.count, rule, per.join(","));
        }
        if !self.spills.is_empty() {
            let _ = writeln!(out, "spilled: {}", self.spills.len());
        }
        out
    }
}

fn rule_for(count: usize, n_ds: usize) -> AllocationRule {
    use std::cmp::Ordering::*;
    match count.cmp(&n_ds) {
        Less => AllocationRule::Concentrate,
        Equal => AllocationRule::OnePerSet,
        Greater => AllocationRule::Spread,
    }
}

/// Splits the unlabeled pool into `n_ds` prioritized disjoint sets.
///
/// When the concentrate rule crowds a set beyond `config.n_smax`, its most
/// certain concentrate-rule samples are moved to the next set, repeating down
/// the sets. The least certain sample of every class always stays in set 1.
pub fn assign_disjoint_sets(records: &[EmbeddingRecord], n_ds: usize, config: &PartitionConfig) -> PartitionPlan {
    assert!(n_ds >= 1 || records.is_empty(), "n_ds must be positive for a non-empty pool");
    let n_sets = n_ds.max(1);

    let mut buckets: BTreeMap<ClassId, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for r in records {
        buckets.entry(r.top1_class).or_default().push(r);
    }

    let mut sets: Vec<BTreeSet<AudioId>> = vec![BTreeSet::new(); n_sets];
    let mut class_buckets = BTreeMap::new();
    // (prob, id, class) of concentrate-rule samples other than the class head.
    let mut movable: Vec<(f32, &AudioId, ClassId)> = Vec::new();

    for (&class, bucket) in buckets.iter_mut() {
        bucket.sort_by(|a, b| a.top1_prob.total_cmp(&b.top1_prob).then_with(|| a.audio_id.cmp(&b.audio_id)));
        let count = bucket.len();
        let rule = rule_for(count, n_sets);
        let mut per_set = vec![0usize; n_sets];
        if rule == AllocationRule::Concentrate {
            for (k, r) in bucket.iter().enumerate() {
                sets[0].insert(r.audio_id.clone());
                if k > 0 {
                    movable.push((r.top1_prob, &r.audio_id, class));
                }
            }
            per_set[0] = count;
        } else {
            let q = count / n_sets;
            let rem = count % n_sets;
            let mut it = bucket.iter();
            for (j, slot) in per_set.iter_mut().enumerate() {
                let take = q + usize::from(j < rem);
                for r in it.by_ref().take(take) {
                    sets[j].insert(r.audio_id.clone());
                }
                *slot = take;
            }
        }
        class_buckets.insert(class, ClassAllocation { count, rule, per_set });
    }

    // Most certain first.
    movable.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| b.1.cmp(a.1)));
    let mut spills = Vec::new();
    let mut carried: Vec<(f32, &AudioId, ClassId)> = movable;
    for j in 0..n_sets.saturating_sub(1) {
        let excess = sets[j].len().saturating_sub(config.n_smax);
        if excess == 0 {
            break;
        }
        let moved: Vec<_> = carried.drain(..excess.min(carried.len())).collect();
        for &(_, id, class) in &moved {
            sets[j].remove(id);
            sets[j + 1].insert(id.clone());
            let alloc = class_buckets.get_mut(&class).expect("bucket exists");
            alloc.per_set[j] -= 1;
            alloc.per_set[j + 1] += 1;
            spills.push(Spill {
                audio_id: id.clone(),
                class,
                from_set: j,
                to_set: j + 1,
            });
        }
        carried = moved;
    }

    PartitionPlan {
        n_ds,
        sets: if n_ds == 0 { Vec::new() } else { sets },
        class_buckets,
        spills,
    }
}
