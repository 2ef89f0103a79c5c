//! Fixtures shared by the benchmarks.

use alpool::committee::{LabeledSample, MedoidPool, select_medoids};
use alpool::domain::EmbeddingRecord;
use alpool::ingestion::{generate_synthetic, SyntheticSpec};

pub const DIM: usize = 32;
pub const CLASSES: usize = 10;

/// `n` synthetic records over [`CLASSES`] clusters.
pub fn pool(n: usize, seed: u64) -> Vec<EmbeddingRecord> {
    let per_class = n.div_ceil(CLASSES);
    let mut records = generate_synthetic(&SyntheticSpec::new(CLASSES, per_class, DIM, 1.7, seed)).records;
    records.truncate(n);
    records
}

/// Every record becomes a window-tier medoid labeled with its tagger class.
pub fn medoids(records: &[EmbeddingRecord]) -> MedoidPool {
    let samples = records
        .iter()
        .enumerate()
        .map(|(i, r)| LabeledSample {
            audio_id: r.audio_id.clone(),
            class_id: r.top1_class,
            labeled_seq: i as i64,
            vector: r.vector.clone(),
        })
        .collect();
    select_medoids(samples, Vec::new(), Vec::new(), records.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_sizes() {
        let p = pool(123, 1);
        assert_eq!(p.len(), 123);
        assert!(p.iter().all(|r| r.vector.len() == DIM));
        assert_eq!(medoids(&p[..7]).len(), 7);
    }
}
