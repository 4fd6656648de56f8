//! Balance adjustment for long-tailed predicate classification.
//!
//! The crate covers the whole predicate-recognition pipeline on gold object
//! pairs:
//!
//! * [`dataset`]: vocabularies, JSONL annotations, image-level splits and a
//!   synthetic generator with a known common → informative ontology.
//! * [`freq_model`]: the count-based pair → predicate baseline.
//! * [`head`]: a two-layer predicate classifier trained by momentum gradient
//!   descent, with a freezable embedding layer.
//! * [`adjust`]: confusion matrices and the frozen transition matrix used to
//!   re-score predictions toward informative predicates.
//! * [`balance`]: information content, common/informative partition and
//!   separation undersampling.
//! * [`eval`]: graph-constrained ranking, R@K, mR@K and mRIC@K.
//! * [`pipeline`]: the staged, file-driven experiment runner and ablations.

pub mod adjust;
pub mod balance;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod freq_model;
pub mod head;
pub mod pipeline;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use error::{Error, Result};

/// Anything that maps an ordered object-class pair to `K` predicate scores.
pub trait Scorer {
    fn num_predicates(&self) -> usize;

    /// Raw scores (logits) for every predicate.
    fn scores(&self, subj: usize, obj: usize) -> Result<Vec<f64>>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn num_predicates(&self) -> usize {
        (**self).num_predicates()
    }

    fn scores(&self, subj: usize, obj: usize) -> Result<Vec<f64>> {
        (**self).scores(subj, obj)
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest score; ties go to the lower index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Deterministic generator for an independent `stream` under `seed`.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1]);
    }
}
