//! PAM k-medoids: greedy BUILD followed by best-improvement SWAP passes,
//! repeated from seeded random starts.
//!
//! SWAP evaluates every (medoid, non-medoid) exchange per pass in `O(n²)`
//! using nearest/second-nearest bookkeeping, then applies the single best
//! exchange. A single BUILD+SWAP run stops in the first configuration no
//! single exchange can improve, which is not always the optimum (with four
//! points and k = 2 the optimum can be the complement of a local minimum).
//! Extra starts drawn from a seeded RNG are refined the same way and the
//! cheapest result wins; ties keep the earliest start, BUILD first.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Euclidean distance between two vectors of equal length.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Symmetric dissimilarities stored as the strict upper triangle in `f32`.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f32>,
}

impl DistanceMatrix {
    pub fn from_points<V: AsRef<[f32]> + Sync>(points: &[V]) -> Self {
        let n = points.len();
        let data: Vec<f32> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let pi = points[i].as_ref();
                points[i + 1..]
                    .iter()
                    .map(move |pj| euclidean(pi, pj.as_ref()) as f32)
            })
            .collect();
        Self { n, data }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                data.push(f(i, j) as f32);
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        use std::cmp::Ordering::*;
        let (a, b) = match i.cmp(&j) {
            Equal => return 0.0,
            Less => (i, j),
            Greater => (j, i),
        };
        // Row a starts after rows 0..a, each of length n-1-r.
        let idx = a * (2 * self.n - a - 1) / 2 + (b - a - 1);
        f64::from(self.data[idx])
    }

    /// Sum over points of the distance to their closest medoid, accumulated
    /// in point order.
    pub fn cost(&self, medoids: &[usize]) -> f64 {
        (0..self.n)
            .map(|o| {
                medoids
                    .iter()
                    .map(|&m| self.get(o, m))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Point indices of the medoids, in BUILD order with swaps applied in place.
    pub medoids: Vec<usize>,
    /// Position in `medoids` of each point's nearest medoid.
    pub assignment: Vec<usize>,
    pub cost: f64,
    pub swaps: usize,
}

pub const DEFAULT_MAX_SWAP_PASSES: usize = 50;

/// Greedy BUILD initialisation.
pub fn build(mat: &DistanceMatrix, k: usize) -> Vec<usize> {
    let n = mat.len();
    assert!(k <= n, "k must not exceed the number of points");
    if k == 0 {
        return Vec::new();
    }
    let mut medoids = Vec::with_capacity(k);
    let mut is_medoid = vec![false; n];

    let first = (0..n)
        .into_par_iter()
        .map(|i| ((0..n).map(|j| mat.get(i, j)).sum::<f64>(), i))
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
        .1;
    medoids.push(first);
    is_medoid[first] = true;
    let mut nearest: Vec<f64> = (0..n).map(|j| mat.get(first, j)).collect();

    while medoids.len() < k {
        let gains: Vec<(f64, usize)> = (0..n)
            .into_par_iter()
            .filter(|&i| !is_medoid[i])
            .map(|i| {
                let g: f64 = (0..n).map(|j| (nearest[j] - mat.get(i, j)).max(0.0)).sum();
                (g, i)
            })
            .collect();
        let (_, pick) = gains
            .into_iter()
            .fold((f64::NEG_INFINITY, usize::MAX), |best, cur| if cur.0 > best.0 { cur } else { best });
        medoids.push(pick);
        is_medoid[pick] = true;
        for (j, nj) in nearest.iter_mut().enumerate() {
            *nj = nj.min(mat.get(pick, j));
        }
    }
    medoids
}

struct Nearest {
    pos: usize,
    near: f64,
    second: f64,
}

fn nearest_two(mat: &DistanceMatrix, medoids: &[usize], o: usize) -> Nearest {
    let mut best = Nearest {
        pos: 0,
        near: f64::INFINITY,
        second: f64::INFINITY,
    };
    for (p, &m) in medoids.iter().enumerate() {
        let d = mat.get(o, m);
        if d < best.near {
            best.second = best.near;
            best.near = d;
            best.pos = p;
        } else if d < best.second {
            best.second = d;
        }
    }
    best
}

/// Best swap for candidate `x`: `(delta, medoid position)`.
fn best_swap_for(mat: &DistanceMatrix, medoids: &[usize], near: &[Nearest], removal: &[f64], x: usize) -> (f64, usize) {
    let n = mat.len();
    if medoids.len() == 1 {
        let delta: f64 = (0..n).map(|o| mat.get(o, x) - near[o].near).sum();
        return (delta, 0);
    }
    let mut delta = removal.to_vec();
    let mut shared = 0.0;
    for (o, nb) in near.iter().enumerate() {
        let d = mat.get(o, x);
        if d < nb.near {
            shared += d - nb.near;
            delta[nb.pos] += nb.near - nb.second;
        } else if d < nb.second {
            delta[nb.pos] += d - nb.second;
        }
    }
    delta
        .into_iter()
        .enumerate()
        .map(|(p, v)| (v + shared, p))
        .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
}

/// Runs SWAP passes starting from `medoids` until no exchange improves the
/// cost or `max_passes` exchanges were applied.
pub fn swap(mat: &DistanceMatrix, medoids: &mut [usize], max_passes: usize) -> usize {
    let n = mat.len();
    let k = medoids.len();
    if k == 0 || k == n {
        return 0;
    }
    let mut cost = mat.cost(medoids);
    let mut swaps = 0;
    while swaps < max_passes {
        let near: Vec<Nearest> = (0..n).map(|o| nearest_two(mat, medoids, o)).collect();
        let mut removal = vec![0.0; k];
        if k > 1 {
            for nb in &near {
                removal[nb.pos] += nb.second - nb.near;
            }
        }
        let mut is_medoid = vec![false; n];
        for &m in medoids.iter() {
            is_medoid[m] = true;
        }
        let candidates: Vec<(f64, usize, usize)> = (0..n)
            .into_par_iter()
            .filter(|&x| !is_medoid[x])
            .map(|x| {
                let (d, p) = best_swap_for(mat, medoids, &near, &removal, x);
                (d, x, p)
            })
            .collect();
        let Some(&(delta, x, p)) = candidates
            .iter()
            .fold(None, |best: Option<&(f64, usize, usize)>, cur| match best {
                Some(b) if b.0 <= cur.0 => Some(b),
                _ => Some(cur),
            })
        else {
            break;
        };
        if delta >= 0.0 {
            break;
        }
        let old = medoids[p];
        medoids[p] = x;
        let new_cost = mat.cost(medoids);
        if new_cost >= cost {
            // Rounding noise rather than a real improvement.
            medoids[p] = old;
            break;
        }
        cost = new_cost;
        swaps += 1;
    }
    swaps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMedoidsConfig {
    /// Applied exchanges per start.
    pub max_swap_passes: usize,
    /// Perturbation rounds after BUILD+SWAP.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMedoidsConfig {
    fn default() -> Self {
        Self {
            max_swap_passes: DEFAULT_MAX_SWAP_PASSES,
            restarts: 10,
            seed: 0,
        }
    }
}

/// BUILD then SWAP, once.
pub fn pam(mat: &DistanceMatrix, k: usize, max_passes: usize) -> Clustering {
    let mut medoids = build(mat, k);
    let swaps = swap(mat, &mut medoids, max_passes);
    finish(mat, medoids, swaps)
}

/// BUILD+SWAP, then `config.restarts` rounds of seeded perturbation: up to
/// three medoids of the best solution so far are replaced by random
/// non-medoids and SWAP runs again. The cheapest solution wins.
pub fn kmedoids(mat: &DistanceMatrix, k: usize, config: &KMedoidsConfig) -> Clustering {
    let mut best = pam(mat, k, config.max_swap_passes);
    let n = mat.len();
    if k == 0 || k == n {
        return best;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.restarts {
        let mut medoids = best.medoids.clone();
        let q = rng.random_range(1..=k.min(3).min(n - k));
        let mut is_medoid = vec![false; n];
        for &m in &medoids {
            is_medoid[m] = true;
        }
        let outside: Vec<usize> = (0..n).filter(|&i| !is_medoid[i]).collect();
        let fresh = sample(&mut rng, outside.len(), q);
        for (p, f) in sample(&mut rng, k, q).into_iter().zip(fresh) {
            medoids[p] = outside[f];
        }
        let swaps = swap(mat, &mut medoids, config.max_swap_passes);
        let cost = mat.cost(&medoids);
        if cost < best.cost {
            best = finish(mat, medoids, swaps);
        }
    }
    best
}

fn finish(mat: &DistanceMatrix, medoids: Vec<usize>, swaps: usize) -> Clustering {
    let assignment = (0..mat.len())
        .map(|o| if medoids.is_empty() { 0 } else { nearest_two(mat, &medoids, o).pos })
        .collect();
    Clustering {
        cost: mat.cost(&medoids),
        medoids,
        assignment,
        swaps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points() -> Vec<Vec<f32>> {
        vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.1],
            vec![5.0, 5.0],
            vec![5.1, 5.0],
            vec![5.0, 5.1],
            vec![-5.0, 5.0],
            vec![-5.1, 5.0],
        ]
    }

    #[test]
    fn condensed_indexing() {
        let m = DistanceMatrix::from_fn(5, |i, j| (i * 10 + j) as f64);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 0.0 } else { (i.min(j) * 10 + i.max(j)) as f64 };
                assert_eq!(m.get(i, j), expect);
            }
        }
    }

    #[test]
    fn finds_separated_clusters() {
        let pts = grid_points();
        let m = DistanceMatrix::from_points(&pts);
        let c = pam(&m, 3, DEFAULT_MAX_SWAP_PASSES);
        let mut groups: Vec<usize> = c.medoids.iter().map(|&i| if i < 3 { 0 } else if i < 6 { 1 } else { 2 }).collect();
        groups.sort();
        assert_eq!(groups, [0, 1, 2]);
        assert_eq!(c.assignment[0], c.assignment[1]);
        assert_ne!(c.assignment[0], c.assignment[3]);
    }

    #[test]
    fn degenerate_budgets() {
        let pts = grid_points();
        let m = DistanceMatrix::from_points(&pts);
        let all = pam(&m, pts.len(), 50);
        let mut meds = all.medoids.clone();
        meds.sort();
        assert_eq!(meds, (0..pts.len()).collect::<Vec<_>>());
        assert_eq!(all.cost, 0.0);
        assert!(pam(&m, 0, 50).medoids.is_empty());
    }

    #[test]
    fn single_medoid_is_optimal() {
        let pts = grid_points();
        let m = DistanceMatrix::from_points(&pts);
        let c = pam(&m, 1, 50);
        let best = (0..pts.len()).map(|i| m.cost(&[i])).fold(f64::INFINITY, f64::min);
        assert_eq!(c.cost, best);
    }

    #[test]
    fn swap_repairs_a_bad_start() {
        let pts = grid_points();
        let m = DistanceMatrix::from_points(&pts);
        let mut meds = vec![0, 1, 2];
        let swaps = swap(&m, &mut meds, 50);
        assert!(swaps >= 2);
        assert!(m.cost(&meds) < m.cost(&[0, 1, 2]));
    }
}
