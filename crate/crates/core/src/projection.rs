//! Deterministic 2-D principal-component projection of an iteration's
//! embeddings, for the monitor scatter plot.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::domain::{AudioId, ClassId, IterationId};
use crate::store::{Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Medoid,
    Proposed,
    Discarded,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Medoid => "medoid",
            Role::Proposed => "proposed",
            Role::Discarded => "discarded",
        }
    }
}

/// Two principal axes fitted on a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    pub variance: [f64; 2],
}

impl Pca2 {
    /// Fits on `points`, which must share one dimension. Eigenvalue ties are
    /// ordered by eigenvector index; each axis has its largest-magnitude
    /// loading made positive.
    pub fn fit(points: &[&[f32]]) -> Option<Self> {
        let n = points.len();
        let d = points.first()?.len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return None;
        }
        let mut mean = vec![0.0f64; d];
        for p in points {
            for (m, &v) in mean.iter_mut().zip(p.iter()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] as f64 - mean[j]);
        let cov = centered.tr_mul(&centered) / (n.max(2) - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let axis = |k: usize| -> (Vec<f64>, f64) {
            let Some(&col) = order.get(k) else {
                return (vec![0.0; d], 0.0);
            };
            let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
            let mut lead = 0;
            for (i, x) in v.iter().enumerate() {
                if x.abs() > v[lead].abs() {
                    lead = i;
                }
            }
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            (v, eig.eigenvalues[col].max(0.0))
        };
        let (a0, v0) = axis(0);
        let (a1, v1) = axis(1);
        Some(Self {
            mean,
            axes: [a0, a1],
            variance: [v0, v1],
        })
    }

    pub fn project(&self, p: &[f32]) -> [f64; 2] {
        let dot = |axis: &[f64]| -> f64 {
            p.iter()
                .zip(&self.mean)
                .zip(axis)
                .map(|((&x, m), a)| (x as f64 - m) * a)
                .sum()
        };
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub audio_id: AudioId,
    pub x: f64,
    pub y: f64,
    pub role: Role,
    /// Upstream tagger's top-1 class.
    pub top1_class: ClassId,
    /// Consensus label, for medoids.
    pub label: Option<ClassId>,
}

/// Projects the iteration's processed disjoint set plus its medoids.
/// Points come back sorted by role, then audio id. `None` for an unknown
/// iteration.
pub fn iteration_projection(store: &Store, id: IterationId) -> Result<Option<Vec<ProjectedPoint>>, StoreError> {
    let Some(record) = store.iteration(id)? else {
        return Ok(None);
    };
    let set = store.iteration_set(id)?;
    let proposed: BTreeSet<&AudioId> = record.proposals.iter().map(|p| &p.audio_id).collect();
    let mut members: Vec<(AudioId, Role, Option<ClassId>)> = record
        .medoids
        .iter()
        .map(|m| (m.audio_id.clone(), Role::Medoid, Some(m.class_id)))
        .collect();
    members.extend(set.into_iter().map(|a| {
        let role = if proposed.contains(&a) {
            Role::Proposed
        } else {
            Role::Discarded
        };
        (a, role, None)
    }));
    let embeddings = store.embeddings(members.iter().map(|m| &m.0))?;
    let mut kept = Vec::with_capacity(members.len());
    for m in members {
        if let Some(e) = embeddings.get(&m.0) {
            kept.push((m, e));
        }
    }
    let vectors: Vec<&[f32]> = kept.iter().map(|(_, e)| e.vector.as_slice()).collect();
    let Some(pca) = Pca2::fit(&vectors) else {
        return Ok(Some(Vec::new()));
    };
    let mut out: Vec<ProjectedPoint> = kept
        .into_iter()
        .map(|((audio_id, role, label), e)| {
            let [x, y] = pca.project(&e.vector);
            ProjectedPoint {
                audio_id,
                x,
                y,
                role,
                top1_class: e.top1_class,
                label,
            }
        })
        .collect();
    out.sort_by(|a, b| a.role.cmp(&b.role).then_with(|| a.audio_id.cmp(&b.audio_id)));
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_projects_onto_first_axis() {
        let pts: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32, 2.0 * i as f32]).collect();
        let refs: Vec<&[f32]> = pts.iter().map(|p| p.as_slice()).collect();
        let pca = Pca2::fit(&refs).unwrap();
        let s = 1.0 / 5f64.sqrt();
        assert!((pca.axes[0][0] - s).abs() < 1e-9);
        assert!((pca.axes[0][1] - 2.0 * s).abs() < 1e-9);
        assert!(pca.variance[1].abs() < 1e-9);
        let xy = pca.project(&pts[4]);
        assert!((xy[0] - 2.0 * 5f64.sqrt()).abs() < 1e-9);
        assert!(xy[1].abs() < 1e-9);
    }

    #[test]
    fn sign_convention_is_stable_under_negation() {
        let pts: Vec<Vec<f32>> = (0..6).map(|i| vec![-(i as f32), 0.5 * (i % 2) as f32, 0.1]).collect();
        let refs: Vec<&[f32]> = pts.iter().map(|p| p.as_slice()).collect();
        let pca = Pca2::fit(&refs).unwrap();
        for axis in &pca.axes {
            let lead = axis.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead >= 0.0);
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(Pca2::fit(&[]).is_none());
        let one = [1.0f32, 2.0];
        let pca = Pca2::fit(&[&one]).unwrap();
        assert_eq!(pca.project(&one), [0.0, 0.0]);
        let flat = [3.0f32];
        let pca = Pca2::fit(&[&flat, &flat]).unwrap();
        assert_eq!(pca.axes[1], vec![0.0]);
    }
}
