//! Closed-loop simulation: synthetic pools, noisy oracle labelers and full
//! multi-iteration runs through the real engine and store.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use chrono::Duration;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::committee::{propagate_labels, select_medoids};
use crate::domain::{
    AudioId, ChunkAnnotation, ClassId, EmbeddingRecord, GroupId, LabelerGroup, LabelerId, Window,
};
use crate::engine::{run_iteration, EngineConfig, EngineError, IterationRequest};
use crate::ingestion::{audio_from_filename, generate_synthetic, AudioDefaults, SyntheticSpec};
use crate::iteration::Strategy;
use crate::partition::PartitionConfig;
use crate::store::{NodeInfo, Store, StoreError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    /// Probability that a labeler picks a wrong class.
    pub noise: f64,
    pub group_sizes: Vec<usize>,
    pub budget: usize,
    pub iterations: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub n_smax: usize,
    pub n_mmax: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl SimConfig {
    /// 8 classes of 250 in 32 dimensions, groups of 3 and 2, 40 proposals
    /// over 15 iterations.
    pub fn standard() -> Self {
        Self {
            classes: 8,
            per_class: 250,
            dim: 32,
            spread: STANDARD_SPREAD,
            noise: 0.1,
            group_sizes: vec![3, 2],
            budget: 40,
            iterations: 15,
            seed: 0,
            strategy: Strategy::MalMf,
            n_smax: crate::partition::DEFAULT_N_SMAX,
            n_mmax: crate::committee::DEFAULT_N_MMAX,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::ConfigInvalid(m.into()));
        if self.classes == 0 || self.per_class == 0 {
            return bad("classes and per_class must be positive");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return bad("spread must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1)");
        }
        if self.group_sizes.is_empty() || self.group_sizes.contains(&0) {
            return bad("at least one non-empty group is required");
        }
        if self.budget == 0 || self.n_smax == 0 || self.n_mmax == 0 {
            return bad("budget, n_smax and n_mmax must be positive");
        }
        Ok(())
    }

    fn engine(&self) -> EngineConfig {
        EngineConfig {
            budget: self.budget,
            partition: PartitionConfig::new(self.n_smax),
            n_mmax: self.n_mmax,
            ..EngineConfig::default()
        }
    }
}

/// Cluster spread of the standard config; a held-out logistic regression
/// scores about 0.9 on it.
pub const STANDARD_SPREAD: f64 = 1.7;

/// One oracle labeler's full-span annotation: the true class with
/// probability `1 - noise`, otherwise a uniformly drawn wrong class.
#[allow(clippy::too_many_arguments)]
pub fn simulate_labeler<R: Rng + ?Sized>(
    audio_id: &AudioId,
    labeler_id: LabelerId,
    true_label: ClassId,
    classes: &[ClassId],
    noise: f64,
    duration: f64,
    rng: &mut R,
) -> ChunkAnnotation {
    let wrong: Vec<ClassId> = classes.iter().copied().filter(|c| *c != true_label).collect();
    let class_id = if !wrong.is_empty() && rng.random::<f64>() < noise {
        wrong[rng.random_range(0..wrong.len())]
    } else {
        true_label
    };
    ChunkAnnotation {
        chunk_id: None,
        audio_id: audio_id.clone(),
        labeler_id,
        class_id,
        onset: 0.0,
        offset: duration,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u64,
    pub path: String,
    pub proposals: usize,
    /// Audios holding a consensus label after the iteration.
    pub labeled: usize,
    /// Share of the still unlabeled audios whose propagated class is right.
    pub accuracy: f64,
    /// Share of this iteration's proposals that gained a label.
    pub consensus_yield: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub pool_size: usize,
    pub iterations: Vec<IterationStats>,
    pub total_proposals: usize,
    pub distinct_proposals: usize,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# strategy={} seed={} pool={} proposals={} distinct={}",
            self.strategy.as_str(),
            self.seed,
            self.pool_size,
            self.total_proposals,
            self.distinct_proposals
        );
        let _ = writeln!(s, "iteration\tpath\tproposals\tlabeled\taccuracy\tyield");
        for it in &self.iterations {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
                it.iteration, it.path, it.proposals, it.labeled, it.accuracy, it.consensus_yield
            );
        }
        s
    }
}

/// Ground truth of a simulated pool.
pub struct SimWorld {
    pub records: Vec<EmbeddingRecord>,
    pub truth: HashMap<AudioId, ClassId>,
    pub classes: Vec<ClassId>,
    pub groups: Vec<LabelerGroup>,
    pub window: Window,
}

/// Generates the pool described by `config` and loads it into `store`.
pub fn seed_world(store: &Store, config: &SimConfig) -> Result<SimWorld, SimError> {
    config.validate()?;
    let spec = SyntheticSpec::new(config.classes, config.per_class, config.dim, config.spread, config.seed);
    let pool = generate_synthetic(&spec);
    let defaults = AudioDefaults::default();
    let audios = pool
        .records
        .iter()
        .map(|r| audio_from_filename(r.audio_id.as_str(), &defaults))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
    store.ensure_path("/sim")?;
    store.ingest(&audios, &pool.records, &NodeInfo::default())?;
    let classes: Vec<ClassId> = (0..config.classes as u32).map(ClassId).collect();
    store.seed_ontology(&classes.iter().map(|c| (*c, format!("class_{:02}", c.0))).collect::<Vec<_>>())?;
    let mut next = 1u32;
    let groups: Vec<LabelerGroup> = config
        .group_sizes
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            let ids: Vec<LabelerId> = (next..next + n as u32).map(LabelerId).collect();
            next += n as u32;
            LabelerGroup::new(GroupId(g as u32 + 1), ids)
        })
        .collect();
    store.upsert_labelers(&groups, &BTreeMap::new())?;
    let last = audios.iter().map(|a| a.recorded_at).max().expect("non-empty pool");
    let window = Window::new(spec.node.clone(), spec.start, last + Duration::seconds(1))
        .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
    let truth = pool
        .records
        .iter()
        .zip(&pool.true_labels)
        .map(|(r, l)| (r.audio_id.clone(), *l))
        .collect();
    Ok(SimWorld {
        records: pool.records,
        truth,
        classes,
        groups,
        window,
    })
}

/// Propagation accuracy over the audios that still lack a label.
pub fn propagation_accuracy(store: &Store, world: &SimWorld, n_mmax: usize) -> Result<f64, SimError> {
    let labeled = store.labeled_entries()?;
    let labeled_ids: BTreeSet<AudioId> = labeled.iter().map(|e| e.audio_id.clone()).collect();
    let unlabeled: Vec<EmbeddingRecord> = world
        .records
        .iter()
        .filter(|r| !labeled_ids.contains(&r.audio_id))
        .cloned()
        .collect();
    if unlabeled.is_empty() {
        return Ok(1.0);
    }
    if labeled.is_empty() {
        return Ok(0.0);
    }
    let pool = select_medoids(labeled.into_iter().map(|e| e.into_sample()).collect(), vec![], vec![], n_mmax);
    let prop = propagate_labels(&pool, &unlabeled).expect("non-empty medoid pool");
    let right = unlabeled
        .iter()
        .filter(|r| prop[&r.audio_id].class_id == world.truth[&r.audio_id])
        .count();
    Ok(right as f64 / unlabeled.len() as f64)
}

/// Runs the full loop on an existing, empty store.
pub fn run_simulation_on(store: &Store, config: &SimConfig) -> Result<SimReport, SimError> {
    let world = seed_world(store, config)?;
    let engine = config.engine();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5151_5eed);
    let mut stats = Vec::with_capacity(config.iterations);
    let mut proposed: Vec<AudioId> = Vec::new();
    for _ in 0..config.iterations {
        let mut req = IterationRequest::new(world.window.clone());
        req.budget = Some(config.budget);
        req.strategy = config.strategy;
        req.seed = config.seed;
        let record = run_iteration(store, &req, &engine)?;
        let mut batch = Vec::new();
        for p in &record.proposals {
            let group = world
                .groups
                .iter()
                .find(|g| Some(g.group_id) == p.group_id)
                .unwrap_or(&world.groups[0]);
            for &l in &group.labeler_ids {
                batch.push(simulate_labeler(
                    &p.audio_id,
                    l,
                    world.truth[&p.audio_id],
                    &world.classes,
                    config.noise,
                    AudioDefaults::default().duration,
                    &mut rng,
                ));
            }
        }
        store.record_annotations(&batch)?;
        let outcomes = store.run_consensus(record.iteration_id)?;
        let gained = outcomes.iter().filter(|o| o.medoid_class.is_some()).count();
        proposed.extend(record.proposals.iter().map(|p| p.audio_id.clone()));
        stats.push(IterationStats {
            iteration: record.labeling_index,
            path: record.path.as_str().to_owned(),
            proposals: record.proposals.len(),
            labeled: store.labeled_ids()?.len(),
            accuracy: propagation_accuracy(store, &world, config.n_mmax)?,
            consensus_yield: if outcomes.is_empty() {
                0.0
            } else {
                gained as f64 / outcomes.len() as f64
            },
        });
    }
    let distinct = proposed.iter().collect::<BTreeSet<_>>().len();
    Ok(SimReport {
        strategy: config.strategy,
        seed: config.seed,
        pool_size: world.records.len(),
        iterations: stats,
        total_proposals: proposed.len(),
        distinct_proposals: distinct,
    })
}

/// Runs the full loop on a fresh in-memory store.
pub fn run_simulation(config: &SimConfig) -> Result<SimReport, SimError> {
    let store = Store::open_in_memory()?;
    run_simulation_on(&store, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub iteration: u64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySeries {
    pub strategy: Strategy,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub series: [StrategySeries; 2],
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let [a, b] = &self.series;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "iteration\t{0}_mean\t{0}_std\t{1}_mean\t{1}_std",
            a.strategy.as_str(),
            b.strategy.as_str()
        );
        for (p, q) in a.points.iter().zip(&b.points) {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                p.iteration, p.mean, p.std, q.mean, q.std
            );
        }
        s
    }
}

fn series(strategy: Strategy, reports: &[SimReport]) -> StrategySeries {
    let n_it = reports.iter().map(|r| r.iterations.len()).min().unwrap_or(0);
    let points = (0..n_it)
        .map(|i| {
            let xs: Vec<f64> = reports.iter().map(|r| r.iterations[i].accuracy).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 {
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            SeriesPoint {
                iteration: i as u64 + 1,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    StrategySeries { strategy, points }
}

/// Paired comparison of two strategies over the same seeds (and therefore
/// identical pools).
pub fn compare(config: &SimConfig, seeds: &[u64], strategies: [Strategy; 2]) -> Result<Comparison, SimError> {
    if seeds.len() < 2 {
        return Err(SimError::ConfigInvalid("at least two seeds are required".into()));
    }
    let runs: Vec<(usize, u64)> = (0..2).flat_map(|s| seeds.iter().map(move |&seed| (s, seed))).collect();
    let reports = runs
        .par_iter()
        .map(|&(s, seed)| {
            run_simulation(&SimConfig {
                seed,
                strategy: strategies[s],
                ..config.clone()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (a, b) = reports.split_at(seeds.len());
    Ok(Comparison {
        seeds: seeds.to_vec(),
        series: [series(strategies[0], a), series(strategies[1], b)],
    })
}

/// `mal_mf` against the random baseline.
pub fn compare_strategies(config: &SimConfig, seeds: &[u64]) -> Result<Comparison, SimError> {
    compare(config, seeds, [Strategy::MalMf, Strategy::Random])
}
