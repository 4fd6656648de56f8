//! Count-based predicate model conditioned on the `(subject, object)` class pair.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ObjectVocab, PredicateVocab};
use crate::error::{Error, Result};
use crate::{argmax, Scorer};

/// Gap below the smallest finite score assigned to unseen predicates when
/// smoothing is disabled.
pub const UNSEEN_SCORE_GAP: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FreqModel {
    objects: Arc<ObjectVocab>,
    predicates: Arc<PredicateVocab>,
    smoothing: f64,
    table: BTreeMap<(usize, usize), Vec<u64>>,
}

impl FreqModel {
    pub fn fit(train: &Dataset, smoothing: f64) -> Result<Self> {
        if !smoothing.is_finite() || smoothing < 0.0 {
            return Err(Error::Config(format!("smoothing must be >= 0, got {smoothing}")));
        }
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = train.num_predicates();
        let mut table: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
        for t in train.triplets() {
            table.entry((t.subj, t.obj)).or_insert_with(|| vec![0; k])[t.pred] += 1;
        }
        Ok(FreqModel {
            objects: train.objects().clone(),
            predicates: train.predicates().clone(),
            smoothing,
            table,
        })
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn counts(&self, subj: usize, obj: usize) -> Option<&[u64]> {
        self.table.get(&(subj, obj)).map(Vec::as_slice)
    }

    fn check_ids(&self, subj: usize, obj: usize) -> Result<()> {
        let size = self.objects.len();
        for id in [subj, obj] {
            if id >= size {
                return Err(Error::InvalidId { what: "object", id, size });
            }
        }
        Ok(())
    }

    /// Smoothed conditional distribution over predicates.
    pub fn probabilities(&self, subj: usize, obj: usize) -> Result<Vec<f64>> {
        Ok(self.predict_logits(subj, obj)?.iter().map(|s| s.exp()).collect())
    }

    /// `log((count + eps) / (pair_total + eps * K))` per predicate.
    ///
    /// With `eps = 0`, zero-count predicates of a seen pair score
    /// [`UNSEEN_SCORE_GAP`] below the pair's smallest finite score, and an
    /// unseen pair gets the uniform distribution.
    pub fn predict_logits(&self, subj: usize, obj: usize) -> Result<Vec<f64>> {
        self.check_ids(subj, obj)?;
        let k = self.predicates.len();
        let eps = self.smoothing;
        let Some(counts) = self.table.get(&(subj, obj)) else {
            return Ok(vec![-(k as f64).ln(); k]);
        };
        let total: u64 = counts.iter().sum();
        let denom = total as f64 + eps * k as f64;
        let mut scores: Vec<f64> = counts.iter().map(|&c| ((c as f64 + eps) / denom).ln()).collect();
        if eps == 0.0 {
            let floor = scores
                .iter()
                .copied()
                .filter(|s| s.is_finite())
                .fold(f64::INFINITY, f64::min)
                - UNSEEN_SCORE_GAP;
            for s in scores.iter_mut().filter(|s| !s.is_finite()) {
                *s = floor;
            }
        }
        Ok(scores)
    }

    /// Hard prediction; ties break toward the lower predicate id.
    pub fn predict(&self, subj: usize, obj: usize) -> Result<usize> {
        Ok(argmax(&self.predict_logits(subj, obj)?))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = FreqModelDoc {
            smoothing: self.smoothing,
            objects: self.objects.names().to_vec(),
            predicates: self.predicates.names().to_vec(),
            pairs: self
                .table
                .iter()
                .map(|(&(s, o), counts)| PairCounts {
                    subj: self.objects.name(s).to_string(),
                    obj: self.objects.name(o).to_string(),
                    counts: counts.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::json("frequency model", e))
    }

    pub fn from_json(
        text: &str,
        objects: Arc<ObjectVocab>,
        predicates: Arc<PredicateVocab>,
    ) -> Result<Self> {
        let doc: FreqModelDoc = serde_json::from_str(text).map_err(|e| Error::json("frequency model", e))?;
        if doc.objects != objects.names() || doc.predicates != predicates.names() {
            return Err(Error::VocabMismatch("frequency model vocabulary differs".into()));
        }
        let k = predicates.len();
        let mut table = BTreeMap::new();
        for p in doc.pairs {
            let id = |name: &str| {
                objects.id(name).ok_or_else(|| Error::UnknownClass {
                    name: name.to_string(),
                    line: 0,
                })
            };
            if p.counts.len() != k {
                return Err(Error::ShapeMismatch {
                    expected: k,
                    actual: p.counts.len(),
                });
            }
            table.insert((id(&p.subj)?, id(&p.obj)?), p.counts);
        }
        Ok(FreqModel {
            objects,
            predicates,
            smoothing: doc.smoothing,
            table,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

impl Scorer for FreqModel {
    fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    fn scores(&self, subj: usize, obj: usize) -> Result<Vec<f64>> {
        self.predict_logits(subj, obj)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FreqModelDoc {
    smoothing: f64,
    objects: Vec<String>,
    predicates: Vec<String>,
    pairs: Vec<PairCounts>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairCounts {
    subj: String,
    obj: String,
    counts: Vec<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Triplet;
    use proptest::prelude::*;

    fn vocabs(k: usize) -> (Arc<ObjectVocab>, Arc<PredicateVocab>) {
        let o = ObjectVocab::new((0..4).map(|i| format!("o{i}")).collect()).unwrap();
        let p = PredicateVocab::new((0..k).map(|i| format!("p{i}")).collect()).unwrap();
        (Arc::new(o), Arc::new(p))
    }

    /// One image per triplet so pairs can repeat.
    fn dataset(k: usize, rows: &[(usize, usize, usize)]) -> Dataset {
        let (o, p) = vocabs(k);
        let triplets = rows
            .iter()
            .enumerate()
            .map(|(i, &(subj, obj, pred))| Triplet { image_id: i as u64, subj, obj, pred })
            .collect();
        Dataset::new("t", o, p, triplets).unwrap()
    }

    #[test]
    fn unsmoothed_ratio() {
        let ds = dataset(2, &[(0, 1, 0), (0, 1, 0), (0, 1, 0), (0, 1, 1)]);
        let m = FreqModel::fit(&ds, 0.0).unwrap();
        let p = m.probabilities(0, 1).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn unseen_pair_with_add_one_is_uniform() {
        let ds = dataset(3, &[(0, 1, 0)]);
        let m = FreqModel::fit(&ds, 1.0).unwrap();
        for p in m.probabilities(2, 3).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn add_one_scores() {
        let ds = dataset(3, &[(0, 1, 0), (0, 1, 0), (0, 1, 0), (0, 1, 1)]);
        let m = FreqModel::fit(&ds, 1.0).unwrap();
        let s = m.predict_logits(0, 1).unwrap();
        let expected = [4.0_f64 / 7.0, 2.0 / 7.0, 1.0 / 7.0].map(f64::ln);
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_smoothing_sentinel_is_finite() {
        let ds = dataset(3, &[(0, 1, 0), (0, 1, 1), (0, 1, 1)]);
        let m = FreqModel::fit(&ds, 0.0).unwrap();
        let s = m.predict_logits(0, 1).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[2] - ((1.0_f64 / 3.0).ln() - UNSEEN_SCORE_GAP)).abs() < 1e-12);
        assert_eq!(m.predict(0, 1).unwrap(), 1);
    }

    #[test]
    fn errors() {
        let ds = dataset(2, &[(0, 1, 0)]);
        let m = FreqModel::fit(&ds, 1.0).unwrap();
        assert!(matches!(m.predict_logits(4, 0), Err(Error::InvalidId { .. })));
        let empty = ds.filter_indices("e", |_| false);
        assert!(matches!(FreqModel::fit(&empty, 1.0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn json_round_trip() {
        let ds = dataset(3, &[(0, 1, 0), (2, 3, 2), (0, 1, 1)]);
        let m = FreqModel::fit(&ds, 0.5).unwrap();
        let back = FreqModel::from_json(&m.to_json().unwrap(), ds.objects().clone(), ds.predicates().clone()).unwrap();
        assert_eq!(back, m);
    }

    fn rows() -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
        prop::collection::vec((0..4usize, 0..4usize, 0..4usize), 1..60)
    }

    proptest! {
        #[test]
        fn normalized_for_positive_smoothing(rows in rows(), eps in 0.01f64..3.0) {
            let m = FreqModel::fit(&dataset(4, &rows), eps).unwrap();
            for s in 0..4 {
                for o in 0..4 {
                    let total: f64 = m.probabilities(s, o).unwrap().iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn adding_observation_never_lowers_probability(rows in rows(), eps in 0.0f64..2.0, extra in (0..4usize, 0..4usize, 0..4usize)) {
            let before = FreqModel::fit(&dataset(4, &rows), eps).unwrap();
            let mut more = rows.clone();
            more.push(extra);
            let after = FreqModel::fit(&dataset(4, &more), eps).unwrap();
            let (s, o, k) = extra;
            if before.counts(s, o).is_some() || eps > 0.0 {
                prop_assert!(after.probabilities(s, o).unwrap()[k] >= before.probabilities(s, o).unwrap()[k] - 1e-15);
            }
        }

        #[test]
        fn argmax_matches_strict_count_maximum(rows in rows(), eps in 0.0f64..5.0) {
            let m = FreqModel::fit(&dataset(4, &rows), eps).unwrap();
            for s in 0..4 {
                for o in 0..4 {
                    if let Some(c) = m.counts(s, o) {
                        let max = *c.iter().max().unwrap();
                        if c.iter().filter(|&&x| x == max).count() == 1 {
                            let top = c.iter().position(|&x| x == max).unwrap();
                            prop_assert_eq!(m.predict(s, o).unwrap(), top);
                        }
                    }
                }
            }
        }
    }
}
