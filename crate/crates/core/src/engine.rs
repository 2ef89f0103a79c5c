//! One active-learning iteration end to end: window selection, split,
//! partitioning, medoid prioritization, proposal and commit.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{SubsecRound, Utc};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tracing::{debug, info};

use crate::committee::{
    mal_bootstrap, mismatch_first_select, propagate_labels, select_medoids, CommitteeError, CommitteePrediction,
    LabeledSample, MedoidPool, Proposal, Provenance, DEFAULT_N_MMAX,
};
use crate::domain::{AudioId, AudioRecord, EmbeddingRecord, IterationId, NodeId, Window};
use crate::iteration::{IterationMedoid, IterationRecord, ProposedAudio, SelectionPath, Strategy};
use crate::kmedoids::KMedoidsConfig;
use crate::logreg::{LogRegConfig, LogRegError, LogisticRegression};
use crate::partition::{assign_disjoint_sets, num_disjoint_sets, split_labeled, PartitionConfig, PartitionPlan};
use crate::store::{LabeledEntry, Store, StoreError};

pub const DEFAULT_BUDGET: usize = 400;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("window holds no audios")]
    EmptyWindow,
    #[error("no embedding for audio {0}")]
    MissingSidecar(AudioId),
    #[error("every unlabeled audio in the window has already been proposed")]
    PoolExhausted,
    #[error("budget must be positive")]
    InvalidBudget,
    #[error(transparent)]
    Committee(#[from] CommitteeError),
    #[error(transparent)]
    Classifier(#[from] LogRegError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub budget: usize,
    pub partition: PartitionConfig,
    pub n_mmax: usize,
    pub kmedoids: KMedoidsConfig,
    pub logreg: LogRegConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            partition: PartitionConfig::default(),
            n_mmax: DEFAULT_N_MMAX,
            kmedoids: KMedoidsConfig::default(),
            logreg: LogRegConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRequest {
    /// Replaying an id that is already stored returns the stored record.
    pub iteration_id: Option<IterationId>,
    pub window: Window,
    pub budget: Option<usize>,
    pub strategy: Strategy,
    pub seed: u64,
}

impl IterationRequest {
    pub fn new(window: Window) -> Self {
        Self {
            iteration_id: None,
            window,
            budget: None,
            strategy: Strategy::MalMf,
            seed: 0,
        }
    }
}

/// The disjoint set chosen for this iteration.
struct SetChoice {
    plan_id: Option<i64>,
    new_plan: Option<PartitionPlan>,
    n_ds: usize,
    set_index: usize,
    set_size: usize,
    candidates: BTreeSet<AudioId>,
}

fn choose_set(
    store: &Store,
    window: &Window,
    available: &BTreeSet<AudioId>,
    embeddings: &HashMap<AudioId, EmbeddingRecord>,
    config: &PartitionConfig,
) -> Result<SetChoice, EngineError> {
    if let Some(plan) = store.active_plan(window)? {
        for j in plan.next_set..=plan.n_ds {
            let set = &plan.sets[j - 1];
            let candidates: BTreeSet<AudioId> = set.intersection(available).cloned().collect();
            if !candidates.is_empty() {
                return Ok(SetChoice {
                    plan_id: Some(plan.plan_id),
                    new_plan: None,
                    n_ds: plan.n_ds,
                    set_index: j,
                    set_size: set.len(),
                    candidates,
                });
            }
        }
    }
    let records: Vec<EmbeddingRecord> = available.iter().map(|a| embeddings[a].clone()).collect();
    let n_ds = num_disjoint_sets(records.len(), config);
    let plan = assign_disjoint_sets(&records, n_ds, config);
    debug!(n_ds, pool = records.len(), "partitioned window");
    let first = plan.sets[0].clone();
    Ok(SetChoice {
        plan_id: None,
        n_ds,
        set_index: 1,
        set_size: first.len(),
        candidates: first,
        new_plan: Some(plan),
    })
}

/// Splits labeled entries into the three medoid tiers relative to a window.
fn medoid_tiers(
    entries: Vec<LabeledEntry>,
    window: &Window,
    s_wm: &BTreeSet<AudioId>,
) -> (Vec<LabeledSample>, Vec<LabeledSample>, Vec<LabeledSample>) {
    let (mut t1, mut t2, mut t3) = (Vec::new(), Vec::new(), Vec::new());
    for e in entries {
        if s_wm.contains(&e.audio_id) {
            t1.push(e.into_sample());
        } else if e.node_id == window.node_id {
            t2.push(e.into_sample());
        } else {
            t3.push(e.into_sample());
        }
    }
    (t1, t2, t3)
}

/// Committee predictions for `candidates`. Returns whether the classifier
/// had to be replaced by propagation alone.
fn committee_predictions(
    pool: &MedoidPool,
    candidates: &[EmbeddingRecord],
    training: &[LabeledEntry],
    config: &LogRegConfig,
) -> Result<(Vec<CommitteePrediction>, bool), EngineError> {
    let propagated = propagate_labels(pool, candidates)?;
    let samples: Vec<(&[f32], _)> = training.iter().map(|e| (e.vector.as_slice(), e.class_id)).collect();
    let model = match LogisticRegression::fit(&samples, config) {
        Ok(m) => Some(m),
        Err(LogRegError::SingleClassDegenerate) => None,
        Err(e) => return Err(e.into()),
    };
    let fallback = model.is_none();
    let preds = candidates
        .iter()
        .map(|r| {
            let p = &propagated[&r.audio_id];
            let (classifier_class, classifier_confidence) = match &model {
                Some(m) => m.predict(&r.vector),
                None => (p.class_id, 1.0 / (1.0 + p.distance)),
            };
            CommitteePrediction {
                audio_id: r.audio_id.clone(),
                propagated_class: p.class_id,
                classifier_class,
                classifier_confidence,
            }
        })
        .collect();
    Ok((preds, fallback))
}

/// Runs one iteration under the window's single-writer lock and commits it.
pub fn run_iteration(store: &Store, request: &IterationRequest, config: &EngineConfig) -> Result<IterationRecord, EngineError> {
    if let Some(id) = request.iteration_id {
        if let Some(r) = store.iteration(id)? {
            return Ok(r);
        }
    }
    if !store.node_exists(&request.window.node_id)? {
        return Err(EngineError::UnknownNode(request.window.node_id.clone()));
    }
    let holder = format!("pid{}", std::process::id());
    store.acquire_window_lock(&request.window, &holder)?;
    let out = run_locked(store, request, config);
    store.release_window_lock(&request.window)?;
    out
}

fn run_locked(store: &Store, request: &IterationRequest, config: &EngineConfig) -> Result<IterationRecord, EngineError> {
    let budget = request.budget.unwrap_or(config.budget);
    if budget == 0 {
        return Err(EngineError::InvalidBudget);
    }
    let window = &request.window;
    let audios: BTreeMap<AudioId, AudioRecord> = store
        .audios_in_window(window)?
        .into_iter()
        .map(|a| (a.audio_id.clone(), a))
        .collect();
    if audios.is_empty() {
        return Err(EngineError::EmptyWindow);
    }
    let s_w: BTreeSet<AudioId> = audios.keys().cloned().collect();
    let selection = split_labeled(window.clone(), s_w, &store.labeled_ids()?);
    let embeddings = store.embeddings(&selection.s_w)?;
    if let Some(missing) = selection.s_w.iter().find(|a| !embeddings.contains_key(*a)) {
        return Err(EngineError::MissingSidecar(missing.clone()));
    }
    let proposed = store.proposed_ids()?;
    let available: BTreeSet<AudioId> = selection.s_wnh.difference(&proposed).cloned().collect();
    if available.is_empty() {
        return Err(EngineError::PoolExhausted);
    }
    let choice = choose_set(store, window, &available, &embeddings, &config.partition)?;

    let labeled = store.labeled_entries()?;
    let (t1, t2, t3) = medoid_tiers(labeled.clone(), window, &selection.s_wm);
    let pool = select_medoids(t1, t2, t3, config.n_mmax);

    let candidates: Vec<EmbeddingRecord> = choice.candidates.iter().map(|a| embeddings[a].clone()).collect();
    let k = budget.min(candidates.len());
    let labeling_index = store.iteration_count()? + 1;
    let mut classifier_fallback = false;
    let (path, picks): (SelectionPath, Vec<Proposal>) = match request.strategy {
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(request.seed ^ labeling_index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let picks = sample(&mut rng, candidates.len(), k)
                .into_iter()
                .map(|i| Proposal {
                    audio_id: candidates[i].audio_id.clone(),
                    provenance: Provenance::Random,
                })
                .collect();
            (SelectionPath::Random, picks)
        }
        Strategy::MalMf if pool.is_empty() => {
            let km = KMedoidsConfig {
                seed: request.seed,
                ..config.kmedoids
            };
            (SelectionPath::Mal, mal_bootstrap(&candidates, k, &km)?)
        }
        Strategy::MalMf => {
            let (preds, fallback) = committee_predictions(&pool, &candidates, &labeled, &config.logreg)?;
            classifier_fallback = fallback;
            let vectors: HashMap<AudioId, &[f32]> =
                candidates.iter().map(|r| (r.audio_id.clone(), r.vector.as_slice())).collect();
            let mut anchors: Vec<&[f32]> = pool.entries.iter().map(|e| e.vector.as_slice()).collect();
            anchors.extend(
                selection
                    .s_w
                    .iter()
                    .filter(|a| proposed.contains(*a) && !selection.s_wm.contains(*a))
                    .map(|a| embeddings[a].vector.as_slice()),
            );
            (
                SelectionPath::Committee,
                mismatch_first_select(&preds, &vectors, &anchors, &proposed, k),
            )
        }
    };

    let groups = store.groups()?;
    let proposals = picks
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let a = &audios[&p.audio_id];
            ProposedAudio {
                rank: i as u32 + 1,
                audio_id: p.audio_id,
                filename: a.filename.clone(),
                node_id: a.node_id.clone(),
                provenance: p.provenance,
                group_id: (!groups.is_empty()).then(|| groups[i % groups.len()].group_id),
                label: None,
                labeler_count: 0,
                agreement: 0.0,
            }
        })
        .collect::<Vec<_>>();
    let iteration_id = match request.iteration_id {
        Some(id) => id,
        None => IterationId(store.max_iteration_id()?.map_or(1, |m| m.0 + 1)),
    };
    let mut record = IterationRecord {
        iteration_id,
        window: window.clone(),
        created_at: Utc::now().trunc_subsecs(0),
        labeling_index,
        audio_count: selection.s_w.len(),
        labeled_pct: selection.labeled_fraction(),
        fold_count: groups.len() as u32,
        strategy: request.strategy,
        path,
        classifier_fallback,
        budget,
        plan_id: choice.plan_id,
        n_ds: choice.n_ds,
        set_index: choice.set_index,
        set_size: choice.set_size,
        proposals,
        medoids: pool
            .entries
            .iter()
            .map(|e| IterationMedoid {
                audio_id: e.audio_id.clone(),
                class_id: e.class_id,
                tier: e.tier,
            })
            .collect(),
    };
    store.commit_iteration(&mut record, choice.new_plan.as_ref())?;
    info!(
        iteration = record.iteration_id.0,
        path = record.path.as_str(),
        proposals = record.proposals.len(),
        "iteration committed"
    );
    Ok(record)
}
