//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Every reference value is produced by an oracle in this file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use alpool::committee::{propagate_labels, MedoidEntry, MedoidPool, MedoidTier};
use alpool::consensus::{compute_consensus, DecidedBy};
use alpool::domain::{AudioId, ChunkAnnotation, ClassId, EmbeddingRecord, GroupId, IterationId, LabelerGroup, LabelerId};
use alpool::engine::{run_iteration, EngineConfig, IterationRequest};
use alpool::kmedoids::{kmedoids, DistanceMatrix, KMedoidsConfig};
use alpool::logreg::{LogRegConfig, LogisticRegression};
use alpool::partition::{assign_disjoint_sets, num_disjoint_sets, AllocationRule, PartitionConfig, PartitionPlan};
use alpool::sim::{compare_strategies, run_simulation_on, seed_world, SimConfig};
use alpool::store::{Store, StoreError, TABLES};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- partition ---------------------------------------------------------------

/// Straightforward reimplementation of the allocation rules, including the
/// crowding spill.
fn oracle_partition(records: &[EmbeddingRecord], n_ds: usize, n_smax: usize) -> Vec<BTreeSet<String>> {
    let mut sets = vec![BTreeSet::new(); n_ds];
    let mut classes: BTreeMap<u32, Vec<(f32, String)>> = BTreeMap::new();
    for r in records {
        classes
            .entry(r.top1_class.0)
            .or_default()
            .push((r.top1_prob, r.audio_id.0.clone()));
    }
    let mut concentrated: BTreeMap<String, f32> = BTreeMap::new();
    for members in classes.values_mut() {
        members.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let l = members.len();
        if l < n_ds {
            for (k, (p, id)) in members.iter().enumerate() {
                sets[0].insert(id.clone());
                if k > 0 {
                    concentrated.insert(id.clone(), *p);
                }
            }
        } else {
            let mut target = Vec::with_capacity(l);
            for j in 0..n_ds {
                let size = l / n_ds + usize::from(j < l % n_ds);
                target.extend(std::iter::repeat_n(j, size));
            }
            for ((_, id), j) in members.iter().zip(target) {
                sets[j].insert(id.clone());
            }
        }
    }
    for j in 0..n_ds.saturating_sub(1) {
        if sets[j].len() <= n_smax {
            break;
        }
        let mut movable: Vec<(f32, String)> = sets[j]
            .iter()
            .filter_map(|id| concentrated.get(id).map(|p| (*p, id.clone())))
            .collect();
        movable.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
        let excess = sets[j].len() - n_smax;
        for (_, id) in movable.into_iter().take(excess) {
            sets[j].remove(&id);
            sets[j + 1].insert(id);
        }
    }
    sets
}

fn check_plan(records: &[EmbeddingRecord], plan: &PartitionPlan, n_ds: usize, n_smax: usize) -> Result<(), String> {
    ensure(plan.sets.len() == n_ds, || format!("{} sets for n_ds {n_ds}", plan.sets.len()))?;
    let mut seen = BTreeSet::new();
    for s in &plan.sets {
        for id in s {
            ensure(seen.insert(id.clone()), || format!("{id} in two sets"))?;
        }
    }
    let all: BTreeSet<AudioId> = records.iter().map(|r| r.audio_id.clone()).collect();
    ensure(seen == all, || "union differs from the pool".into())?;

    let by_id: HashMap<&AudioId, &EmbeddingRecord> = records.iter().map(|r| (&r.audio_id, r)).collect();
    let mut per_class: BTreeMap<u32, Vec<Vec<f32>>> = BTreeMap::new();
    for (j, s) in plan.sets.iter().enumerate() {
        for id in s {
            let r = by_id[id];
            let v = per_class.entry(r.top1_class.0).or_insert_with(|| vec![Vec::new(); n_ds]);
            v[j].push(r.top1_prob);
        }
    }
    for (c, sets) in &per_class {
        ensure(!sets[0].is_empty(), || format!("class {c} missing from set 1"))?;
        let mut prev_max = f32::NEG_INFINITY;
        for s in sets.iter().filter(|s| !s.is_empty()) {
            let lo = s.iter().copied().fold(f32::INFINITY, f32::min);
            ensure(lo >= prev_max, || format!("class {c} violates monotonicity"))?;
            prev_max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        }
        let count: usize = sets.iter().map(Vec::len).sum();
        let alloc = &plan.class_buckets[&ClassId(*c)];
        ensure(alloc.count == count, || format!("class {c} bucket count"))?;
        let expected_rule = match count.cmp(&n_ds) {
            std::cmp::Ordering::Less => AllocationRule::Concentrate,
            std::cmp::Ordering::Equal => AllocationRule::OnePerSet,
            std::cmp::Ordering::Greater => AllocationRule::Spread,
        };
        ensure(alloc.rule == expected_rule, || format!("class {c} rule"))?;
        let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
        ensure(alloc.per_set == sizes, || format!("class {c} per-set sizes"))?;
    }

    let expected = oracle_partition(records, n_ds, n_smax);
    for (j, (got, want)) in plan.sets.iter().zip(&expected).enumerate() {
        let got: BTreeSet<String> = got.iter().map(|a| a.0.clone()).collect();
        ensure(&got == want, || format!("set {} differs from the oracle", j + 1))?;
    }
    Ok(())
}

fn partition_correctness() -> Outcome {
    let start = Instant::now();
    let (mut spills, mut rules, mut total) = (0usize, [0usize; 3], 0usize);
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA11C_0000 + trial);
        let n = if trial % 10 == 0 {
            rng.random_range(0..60)
        } else {
            rng.random_range(1..=20_000)
        };
        let k = rng.random_range(1..=40u32);
        let weights: Vec<f64> = (0..k).map(|c| 1.0 / ((c + 1) as f64).powf(1.6)).collect();
        let wsum: f64 = weights.iter().sum();
        let levels = rng.random_range(2..=200u32);
        let mut records: Vec<EmbeddingRecord> = (0..n)
            .map(|i| {
                let mut u = rng.random::<f64>() * wsum;
                let mut class = k - 1;
                for (c, w) in weights.iter().enumerate() {
                    if u < *w {
                        class = c as u32;
                        break;
                    }
                    u -= w;
                }
                EmbeddingRecord {
                    audio_id: AudioId(format!("a{:06}", rng.random_range(0..1_000_000u32) * 100 + i % 100)),
                    vector: Vec::new(),
                    top1_class: ClassId(class),
                    top1_prob: rng.random_range(0..=levels) as f32 / levels as f32,
                }
            })
            .collect();
        records.sort_by(|a, b| a.audio_id.cmp(&b.audio_id));
        records.dedup_by(|a, b| a.audio_id == b.audio_id);
        let target = rng.random_range(1..=12usize);
        let n_smax = records.len().div_ceil(target).max(1);
        let cfg = PartitionConfig::new(n_smax);
        let n_ds = num_disjoint_sets(records.len(), &cfg);
        let expected_n_ds = if records.is_empty() { 0 } else { (records.len() + n_smax - 1) / n_smax };
        ensure(n_ds == expected_n_ds, || format!("trial {trial}: n_ds {n_ds}"))?;
        if n_ds == 0 {
            continue;
        }
        let plan = assign_disjoint_sets(&records, n_ds, &cfg);
        check_plan(&records, &plan, n_ds, n_smax).map_err(|e| format!("trial {trial} (n={}, K={k}, n_ds={n_ds}): {e}", records.len()))?;
        if trial % 5 == 1 {
            let mut shuffled = records.clone();
            shuffled.shuffle(&mut rng);
            let again = assign_disjoint_sets(&shuffled, n_ds, &cfg);
            ensure(again.sets == plan.sets, || format!("trial {trial}: input order changed the plan"))?;
        }
        spills += usize::from(!plan.spills.is_empty());
        for a in plan.class_buckets.values() {
            rules[a.rule as usize] += 1;
        }
        total += records.len();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "100 trials, {total} records, classes concentrated/one-per-set/spread {}/{}/{}, {spills} trials with spills",
        rules[0], rules[1], rules[2]
    ))
}

// ---- N_ds --------------------------------------------------------------------

fn n_ds_arithmetic() -> Outcome {
    let cfg = PartitionConfig::new(15_000);
    let mut got = Vec::new();
    for &pool in &[0usize, 1, 14_999, 15_000, 15_001, 100_000] {
        // Smallest n with n * 15000 >= pool, and zero for an empty pool.
        let oracle = (0..).find(|&n: &usize| n * 15_000 >= pool).unwrap().max(usize::from(pool > 0));
        let n = num_disjoint_sets(pool, &cfg);
        ensure(n == oracle, || format!("pool {pool}: {n} vs {oracle}"))?;
        got.push(n);
    }
    ensure(got == [0, 1, 1, 1, 2, 7], || format!("{got:?}"))?;
    Ok(format!("{got:?}"))
}

// ---- consensus ---------------------------------------------------------------

const DOUBT_BIT: usize = 3;

/// Per labeler a subset mask over {0, 1, 2, Doubt}; durations are whole
/// seconds so sums are exact.
fn consensus_oracle(masks: &[usize], dur: &dyn Fn(usize, usize) -> u32) -> (Option<u32>, Vec<u32>, usize, usize) {
    let g = masks.len();
    let mut count = [0usize; 3];
    let mut total = [0u32; 3];
    for (l, &m) in masks.iter().enumerate() {
        for c in 0..3 {
            if m & (1 << c) != 0 {
                count[c] += 1;
                total[c] += dur(l, c);
            }
        }
    }
    let qualifying: Vec<u32> = (0..3).filter(|&c| count[c] > 0 && 3 * count[c] >= 2 * g).map(|c| c as u32).collect();
    let mut winner: Option<u32> = None;
    for &c in &qualifying {
        match winner {
            Some(w) if total[c as usize] <= total[w as usize] => {}
            _ => winner = Some(c),
        }
    }
    let max_count = *count.iter().max().unwrap();
    let labelers = masks.iter().filter(|&&m| m != 0).count();
    (winner, qualifying, max_count, labelers)
}

fn check_pattern(masks: &[usize], dur: &dyn Fn(usize, usize) -> u32, audio: &AudioId) -> Result<(), String> {
    let g = masks.len();
    let group = LabelerGroup::new(GroupId(1), (0..g as u32).map(LabelerId));
    let mut anns = Vec::new();
    for (l, &m) in masks.iter().enumerate() {
        for c in 0..4 {
            if m & (1 << c) != 0 {
                let class = if c == DOUBT_BIT { ClassId::DOUBT } else { ClassId(c as u32) };
                let d = if c == DOUBT_BIT { 7 } else { dur(l, c) };
                anns.push(ChunkAnnotation {
                    chunk_id: None,
                    audio_id: audio.clone(),
                    labeler_id: LabelerId(l as u32),
                    class_id: class,
                    onset: 0.5,
                    offset: 0.5 + d as f64,
                });
            }
        }
    }
    let out = compute_consensus(audio, &anns, &group).map_err(|e| e.to_string())?;
    let (winner, qualifying, max_count, labelers) = consensus_oracle(masks, dur);
    let got_q: Vec<u32> = out.qualifying_classes.iter().map(|c| c.0).collect();
    let decided = match qualifying.len() {
        0 => DecidedBy::None,
        1 => DecidedBy::UniqueQualifier,
        _ => DecidedBy::LongestDuration,
    };
    let ok = out.medoid_class.map(|c| c.0) == winner
        && got_q == qualifying
        && out.agreement == max_count as f64 / g as f64
        && out.labeler_count == labelers
        && out.decided_by == decided
        && out.medoid_class != Some(ClassId::DOUBT)
        && !out.qualifying_classes.contains(&ClassId::DOUBT);
    ensure(ok, || format!("pattern {masks:?}: got {out:?}, oracle winner {winner:?} qualifying {qualifying:?}"))
}

fn consensus_rule() -> Outcome {
    let audio = AudioId::from("x");
    let varied = |l: usize, c: usize| (1 + (l * 5 + c * 3) % 4) as u32;
    let flat = |_: usize, _: usize| 2u32;
    let mut patterns = 0usize;
    let mut doubt_patterns = 0usize;
    for g in 1..=6usize {
        let mut masks = vec![0usize; g];
        loop {
            check_pattern(&masks, &varied, &audio)?;
            check_pattern(&masks, &flat, &audio)?;
            patterns += 1;
            doubt_patterns += usize::from(masks.iter().any(|m| m & (1 << DOUBT_BIT) != 0));
            // Odometer over 16^g subsets.
            let mut i = 0;
            while i < g {
                masks[i] += 1;
                if masks[i] < 16 {
                    break;
                }
                masks[i] = 0;
                i += 1;
            }
            if i == g {
                break;
            }
        }
    }
    Ok(format!(
        "{patterns} patterns (g = 1..6, 3 classes + Doubt, two duration schemes), {doubt_patterns} with Doubt, 0 disagreements"
    ))
}

// ---- k-medoids ---------------------------------------------------------------

fn oracle_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Summed in ascending order so that sets with the same distance multiset
/// (true ties) get bit-identical costs.
fn oracle_cost(pts: &[Vec<f32>], medoids: &[usize]) -> f64 {
    let mut d: Vec<f64> = pts
        .iter()
        .map(|p| medoids.iter().map(|&m| oracle_dist(p, &pts[m])).fold(f64::INFINITY, f64::min))
        .collect();
    d.sort_by(f64::total_cmp);
    d.iter().sum()
}

fn oracle_optimum(pts: &[Vec<f32>], k: usize) -> f64 {
    let n = pts.len();
    let mut best = f64::INFINITY;
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        best = best.min(oracle_cost(pts, &combo));
        let mut i = k;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if combo[i] < n - k + i {
                combo[i] += 1;
                for j in i + 1..k {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn kmedoids_oracle() -> Outcome {
    let mut cases = 0;
    for seed in 0..50u64 {
        for n in 1..=12usize {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1_000 + n as u64);
            let pts: Vec<Vec<f32>> = (0..n).map(|_| (0..2).map(|_| rng.random::<f32>()).collect()).collect();
            let mat = DistanceMatrix::from_points(&pts);
            for k in 1..=3.min(n) {
                let c = kmedoids(&mat, k, &KMedoidsConfig { seed, ..Default::default() });
                let mut uniq = c.medoids.clone();
                uniq.sort_unstable();
                uniq.dedup();
                ensure(uniq.len() == k, || format!("seed {seed} n {n} k {k}: medoids {:?}", c.medoids))?;
                let got = oracle_cost(&pts, &c.medoids);
                let opt = oracle_optimum(&pts, k);
                ensure(got == opt, || format!("seed {seed} n {n} k {k}: cost {got} vs optimum {opt}"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} pools (n <= 12, k <= 3, 50 seeds) at the exhaustive optimum"))
}

// ---- committee ---------------------------------------------------------------

fn committee_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let (k, d) = (5usize, 12usize);
    let centers: Vec<Vec<f32>> = (0..k)
        .map(|c| (0..d).map(|j| if j == c { 12.0 } else { 0.0 }).collect())
        .collect();
    let data: Vec<(Vec<f32>, ClassId)> = (0..600)
        .map(|i| {
            let c = i % k;
            let v = centers[c].iter().map(|x| x + noise.sample(&mut rng) as f32).collect();
            (v, ClassId(c as u32))
        })
        .collect();
    // The generated classes must be separable by their own center axis;
    // otherwise accuracy 1.0 would not be a fair demand.
    for (v, c) in &data {
        let arg = (0..k).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        ensure(arg == c.0 as usize, || "generated data not separable".into())?;
    }
    let model = LogisticRegression::fit(&data, &LogRegConfig::default()).map_err(|e| e.to_string())?;
    let acc = model.accuracy(&data);
    ensure(acc == 1.0, || format!("training accuracy {acc}"))?;
    let mut worst = 0.0f64;
    for i in 0..2000 {
        let v: Vec<f32> = if i < data.len() {
            data[i].0.clone()
        } else {
            (0..d).map(|_| 20.0 * noise.sample(&mut rng) as f32).collect()
        };
        let p = model.predict_proba(&v);
        ensure(p.iter().all(|x| (0.0..=1.0).contains(x)), || "probability outside [0, 1]".into())?;
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst <= 1e-9, || format!("probability sum off by {worst:e}"))?;

    let mut checked = 0;
    for (trial, m) in [1usize, 7, 50, 300].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial as u64);
        // Small integer grid so exact distance ties are common.
        let point = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..3).map(|_| rng.random_range(0..6) as f32).collect() };
        let mut entries: Vec<MedoidEntry> = (0..m)
            .map(|i| MedoidEntry {
                audio_id: AudioId(format!("m{:04}", rng.random_range(0..10_000) * 10 + i % 10)),
                class_id: ClassId(rng.random_range(0..6)),
                tier: MedoidTier::Window,
                vector: point(&mut rng),
            })
            .collect();
        entries.sort_by(|a, b| a.audio_id.cmp(&b.audio_id));
        entries.dedup_by(|a, b| a.audio_id == b.audio_id);
        entries.shuffle(&mut rng);
        let records: Vec<EmbeddingRecord> = (0..1000)
            .map(|i| EmbeddingRecord {
                audio_id: AudioId(format!("r{i:04}")),
                vector: point(&mut rng),
                top1_class: ClassId(0),
                top1_prob: 0.5,
            })
            .collect();
        let pool = MedoidPool {
            capacity: entries.len(),
            entries,
        };
        let got = propagate_labels(&pool, &records).map_err(|e| e.to_string())?;
        for r in &records {
            let mut best: Option<(f64, &MedoidEntry)> = None;
            for e in &pool.entries {
                let dd = oracle_dist(&r.vector, &e.vector);
                best = match best {
                    Some((bd, be)) if dd > bd || (dd == bd && e.audio_id > be.audio_id) => Some((bd, be)),
                    _ => Some((dd, e)),
                };
            }
            let (_, want) = best.unwrap();
            let p = &got[&r.audio_id];
            ensure(p.medoid == want.audio_id && p.class_id == want.class_id, || {
                format!("record {}: {} vs oracle {}", r.audio_id, p.medoid, want.audio_id)
            })?;
            checked += 1;
        }
    }
    Ok(format!(
        "training accuracy 1.0 on {} points, max |sum p - 1| = {worst:.1e}, {checked} propagations match the scan",
        data.len()
    ))
}

// ---- simulation --------------------------------------------------------------

fn budget_efficiency() -> Outcome {
    let seeds: Vec<u64> = (0..10).collect();
    let cmp = compare_strategies(&SimConfig::standard(), &seeds).map_err(|e| e.to_string())?;
    let [mal, random] = &cmp.series;
    ensure(mal.points.len() == 15 && random.points.len() == 15, || "wrong iteration count".into())?;
    for (p, q) in mal.points.iter().zip(&random.points).skip(2) {
        ensure(p.mean >= q.mean, || format!("iteration {}: mal_mf {:.4} < random {:.4}", p.iteration, p.mean, q.mean))?;
    }
    let (p, q) = (mal.points.last().unwrap(), random.points.last().unwrap());
    ensure(p.mean > q.mean, || format!("final: mal_mf {:.4} vs random {:.4}", p.mean, q.mean))?;
    let worst_gap = mal
        .points
        .iter()
        .zip(&random.points)
        .skip(2)
        .map(|(p, q)| p.mean - q.mean)
        .fold(f64::INFINITY, f64::min);
    Ok(format!(
        "final mean accuracy mal_mf {:.4} vs random {:.4}, smallest gap from iteration 3 {:+.4}",
        p.mean, q.mean, worst_gap
    ))
}

fn end_to_end() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let path = dir.path().join("e2e.db");
    let cfg = SimConfig {
        classes: 10,
        per_class: 1_000,
        budget: 400,
        iterations: 18,
        n_smax: 2_500,
        ..SimConfig::standard()
    };
    let report = {
        let store = Store::open(&path).map_err(|e| e.to_string())?;
        run_simulation_on(&store, &cfg).map_err(|e| e.to_string())?
    };
    ensure(report.total_proposals == 7_200, || format!("{} proposals", report.total_proposals))?;
    ensure(report.distinct_proposals == 7_200, || format!("{} distinct", report.distinct_proposals))?;

    let store = Store::open(&path).map_err(|e| e.to_string())?;
    let conn = store.connection();
    let q = |sql: &str| -> Result<i64, String> { conn.query_row(sql, [], |r| r.get(0)).map_err(|e| e.to_string()) };
    ensure(q("SELECT COUNT(*) FROM ALPreprocessing")? == 18, || "ALPreprocessing rows".into())?;
    ensure(q("SELECT COUNT(DISTINCT audio_id) FROM WavsProposed")? == 7_200, || "distinct WavsProposed".into())?;
    let mut stmt = conn
        .prepare("SELECT a.iteration_id, COUNT(w.id) FROM ALPreprocessing a LEFT JOIN WavsProposed w USING (iteration_id) GROUP BY a.iteration_id")
        .map_err(|e| e.to_string())?;
    let per: Vec<(i64, i64)> = stmt
        .query_map([], |r| Ok((r.get(0)?, r.get(1)?)))
        .map_err(|e| e.to_string())?
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure(per.len() == 18 && per.iter().all(|&(_, n)| n == 400), || format!("per-iteration rows {per:?}"))?;
    let fk = store.foreign_key_violations().map_err(|e| e.to_string())?;
    ensure(fk.is_empty(), || format!("foreign key violations: {fk:?}"))?;
    let integrity: String = conn.query_row("PRAGMA integrity_check", [], |r| r.get(0)).map_err(|e| e.to_string())?;
    ensure(integrity == "ok", || integrity.clone())?;
    for id in store.iteration_ids().map_err(|e| e.to_string())? {
        let r = store.iteration(id).map_err(|e| e.to_string())?.ok_or("iteration vanished")?;
        ensure(r.proposals.len() == 400, || format!("iteration {id} reloads with {}", r.proposals.len()))?;
    }
    Ok("18 x 400 = 7200 distinct proposals over a 10000-audio pool, foreign keys intact after reload".into())
}

// ---- crash atomicity ---------------------------------------------------------

fn copy_db(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::copy(from, to)?;
    for ext in ["-wal", "-shm"] {
        let src = Path::new(&format!("{}{ext}", from.display())).to_path_buf();
        if src.exists() {
            std::fs::copy(&src, format!("{}{ext}", to.display()))?;
        }
    }
    Ok(())
}

fn snapshot(store: &Store) -> Result<Vec<usize>, StoreError> {
    TABLES.iter().map(|t| store.row_count(t)).collect()
}

fn crash_atomicity() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let base = dir.path().join("base.db");
    let cfg = SimConfig {
        classes: 4,
        per_class: 10,
        budget: 10,
        iterations: 1,
        ..SimConfig::standard()
    };
    {
        let store = Store::open(&base).map_err(|e| e.to_string())?;
        run_simulation_on(&store, &cfg).map_err(|e| e.to_string())?;
    }
    let base_counts = snapshot(&Store::open(&base).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;

    // The next iteration's record, produced on a scratch copy.
    let scratch = dir.path().join("scratch.db");
    copy_db(&base, &scratch).map_err(|e| e.to_string())?;
    let (template, existing_plan, fresh_plan) = {
        let store = Store::open(&scratch).map_err(|e| e.to_string())?;
        let world = seed_world(&Store::open_in_memory().map_err(|e| e.to_string())?, &cfg).map_err(|e| e.to_string())?;
        let engine = EngineConfig {
            budget: 10,
            ..EngineConfig::default()
        };
        let r = run_iteration(&store, &IterationRequest::new(world.window.clone()), &engine).map_err(|e| e.to_string())?;
        let proposed: BTreeSet<&AudioId> = r.proposals.iter().map(|p| &p.audio_id).collect();
        let labeled = store.labeled_ids().map_err(|e| e.to_string())?;
        let pool: Vec<EmbeddingRecord> = world
            .records
            .iter()
            .filter(|x| !labeled.contains(&x.audio_id) && !proposed.contains(&x.audio_id))
            .cloned()
            .collect();
        let plan = assign_disjoint_sets(&pool, 2, &PartitionConfig::new(pool.len()));
        let first_plan = Store::open(&base)
            .map_err(|e| e.to_string())?
            .iteration(IterationId(1))
            .map_err(|e| e.to_string())?
            .and_then(|x| x.plan_id);
        (r, first_plan, plan)
    };
    ensure(existing_plan.is_some(), || "first iteration has no plan".into())?;
    ensure(!template.medoids.is_empty(), || "template has no medoids".into())?;

    let variant = |v: usize| {
        let mut r = template.clone();
        r.plan_id = if v == 0 { None } else { existing_plan };
        (r, (v == 0).then_some(&fresh_plan))
    };
    let mut boundaries = [0usize; 2];
    for (v, b) in boundaries.iter_mut().enumerate() {
        let path = dir.path().join(format!("count{v}.db"));
        copy_db(&base, &path).map_err(|e| e.to_string())?;
        let store = Store::open(&path).map_err(|e| e.to_string())?;
        store.inject_fault_at(None);
        let (mut r, plan) = variant(v);
        store.commit_iteration(&mut r, plan).map_err(|e| e.to_string())?;
        *b = store.write_boundaries();
    }
    ensure(boundaries[0] + boundaries[1] <= 200, || format!("{boundaries:?} boundaries exceed 200 trials"))?;

    let mut hit = [BTreeSet::new(), BTreeSet::new()];
    for trial in 0..200usize {
        let v = trial % 2;
        let n = (trial / 2) % boundaries[v] + 1;
        let path = dir.path().join(format!("trial{trial}.db"));
        copy_db(&base, &path).map_err(|e| e.to_string())?;
        {
            let store = Store::open(&path).map_err(|e| e.to_string())?;
            store.inject_fault_at(Some(n));
            let (mut r, plan) = variant(v);
            match store.commit_iteration(&mut r, plan) {
                Err(StoreError::InjectedFault(at)) if at == n => {}
                other => return Err(format!("trial {trial}: expected fault at {n}, got {other:?}")),
            }
            ensure(r.plan_id == variant(v).0.plan_id, || format!("trial {trial}: record mutated by a failed commit"))?;
        }
        let store = Store::open(&path).map_err(|e| e.to_string())?;
        let counts = snapshot(&store).map_err(|e| e.to_string())?;
        ensure(counts == base_counts, || format!("trial {trial} (variant {v}, boundary {n}): partial rows {counts:?} vs {base_counts:?}"))?;
        ensure(store.iteration(template.iteration_id).map_err(|e| e.to_string())?.is_none(), || {
            format!("trial {trial}: iteration visible")
        })?;
        ensure(store.foreign_key_violations().map_err(|e| e.to_string())?.is_empty(), || format!("trial {trial}: foreign keys"))?;
        let (mut r, plan) = variant(v);
        store.commit_iteration(&mut r, plan).map_err(|e| format!("trial {trial}: retry failed: {e}"))?;
        let back = store.iteration(template.iteration_id).map_err(|e| e.to_string())?.ok_or("retry not visible")?;
        ensure(back.proposals.len() == template.proposals.len(), || format!("trial {trial}: retry incomplete"))?;
        hit[v].insert(n);
        drop(store);
        let _ = std::fs::remove_file(&path);
    }
    ensure(hit[0].len() == boundaries[0] && hit[1].len() == boundaries[1], || "not every boundary injected".into())?;
    Ok(format!(
        "200 trials over {} + {} write boundaries (with and without a new plan), 0 partial rows",
        boundaries[0], boundaries[1]
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("partition correctness", partition_correctness),
        ("N_ds arithmetic", n_ds_arithmetic),
        ("consensus rule", consensus_rule),
        ("k-medoids oracle equivalence", kmedoids_oracle),
        ("committee sanity", committee_sanity),
        ("budget efficiency", budget_efficiency),
        ("end-to-end bookkeeping", end_to_end),
        ("crash atomicity", crash_atomicity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match out {
            Ok(detail) => println!("PASS {name}: {detail} [{:.1} s]", t.elapsed().as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{:.1} s]", t.elapsed().as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
