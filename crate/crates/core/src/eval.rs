//! Graph-constrained ranking and recall metrics.
//!
//! Every gold `(subject, object)` pair receives exactly one predicted
//! predicate (its argmax) scored by softmax confidence. Per image, the
//! predictions are ranked by confidence and the top `K` are matched against
//! the gold triplets.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adjust::{predict_confusion, ConfusionMatrix};
use crate::balance::ICTable;
use crate::dataset::{Dataset, Triplet};
use crate::error::{Error, Result};
use crate::{argmax, softmax, Scorer};

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedTriplet {
    pub subj: usize,
    pub obj: usize,
    pub pred: usize,
    /// Softmax confidence of `pred`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub image_id: u64,
    pub entries: Vec<RankedTriplet>,
}

/// One prediction per pair, sorted by descending confidence (ties keep pair order).
pub fn rank_triplets<S: Scorer + ?Sized>(
    scorer: &S,
    image_id: u64,
    pairs: &[(usize, usize)],
) -> Result<RankedImage> {
    if pairs.is_empty() {
        return Err(Error::EmptyImage(image_id));
    }
    let mut entries = Vec::with_capacity(pairs.len());
    for &(subj, obj) in pairs {
        let probs = softmax(&scorer.scores(subj, obj)?);
        let pred = argmax(&probs);
        entries.push(RankedTriplet {
            subj,
            obj,
            pred,
            score: probs[pred],
        });
    }
    entries.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    Ok(RankedImage { image_id, entries })
}

/// Gold predicates of one image and whether each was recovered in the top K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageHits {
    pub gold_preds: Vec<usize>,
    pub matched: Vec<bool>,
}

pub fn image_hits(ranked: &RankedImage, gold: &[Triplet], k: usize) -> Result<ImageHits> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    if gold.is_empty() {
        return Err(Error::NoGold);
    }
    let top: HashSet<(usize, usize, usize)> = ranked
        .entries
        .iter()
        .take(k)
        .map(|e| (e.subj, e.obj, e.pred))
        .collect();
    Ok(ImageHits {
        gold_preds: gold.iter().map(|t| t.pred).collect(),
        matched: gold.iter().map(|t| top.contains(&(t.subj, t.obj, t.pred))).collect(),
    })
}

/// `|top-K ∩ gold| / |gold|`.
pub fn recall_at_k(ranked: &RankedImage, gold: &[Triplet], k: usize) -> Result<f64> {
    let hits = image_hits(ranked, gold, k)?;
    Ok(hits.matched.iter().filter(|&&m| m).count() as f64 / gold.len() as f64)
}

/// Per-predicate recall pooled over images; `None` where a predicate has no gold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecall {
    pub recall: Vec<Option<f64>>,
    pub hits: Vec<u64>,
    pub gold: Vec<u64>,
}

impl PredicateRecall {
    pub fn present(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.recall.iter().enumerate().filter_map(|(k, r)| r.map(|r| (k, r)))
    }
}

/// Mean over predicates with at least one gold instance, plus the per-predicate vector.
pub fn mean_recall(per_image: &[ImageHits], num_predicates: usize) -> (f64, PredicateRecall) {
    let mut hits = vec![0u64; num_predicates];
    let mut gold = vec![0u64; num_predicates];
    for img in per_image {
        for (&p, &m) in img.gold_preds.iter().zip(&img.matched) {
            gold[p] += 1;
            hits[p] += u64::from(m);
        }
    }
    let recall: Vec<Option<f64>> = hits
        .iter()
        .zip(&gold)
        .map(|(&h, &g)| (g > 0).then(|| h as f64 / g as f64))
        .collect();
    let present: Vec<f64> = recall.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (mean, PredicateRecall { recall, hits, gold })
}

/// Mean over present predicates of `recall * information content`.
pub fn mric(recall: &PredicateRecall, ic: &ICTable) -> Result<f64> {
    if recall.recall.len() != ic.len() {
        return Err(Error::VocabMismatch(format!(
            "{} recall entries vs {} information-content entries",
            recall.recall.len(),
            ic.len()
        )));
    }
    let terms: Vec<f64> = recall.present().map(|(k, r)| r * ic.ic[k]).collect();
    Ok(if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceValue {
    pub source: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateEntry {
    pub predicate: String,
    pub gold: u64,
    pub hits: u64,
    /// `None` when the predicate is absent from the evaluated gold.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub recall: f64,
    pub mean_recall: f64,
    pub mric: Vec<SourceValue>,
    pub per_predicate: Vec<PredicateEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub evaluated_images: usize,
    pub evaluated_triplets: usize,
    pub metrics: Vec<MetricsAtK>,
    /// Predicates with no gold instance; excluded from mR and mRIC.
    pub absent_predicates: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub input_hashes: serde_json::Value,
    #[serde(default)]
    pub domain_spec: serde_json::Value,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&MetricsAtK> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.recall)
    }

    pub fn mean_recall(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.mean_recall)
    }

    pub fn mric(&self, k: usize, source: &str) -> f64 {
        self.at(k)
            .and_then(|m| m.mric.iter().find(|s| s.source == source))
            .map_or(f64::NAN, |s| s.value)
    }

    /// CSV header matching [`MetricsReport::summary_row`].
    pub fn summary_header(&self) -> Vec<String> {
        let mut cols = vec!["setting".to_string()];
        for m in &self.metrics {
            cols.push(format!("R@{}", m.k));
            cols.push(format!("mR@{}", m.k));
            for s in &m.mric {
                cols.push(format!("mRIC({})@{}", s.source, m.k));
            }
        }
        cols
    }

    pub fn summary_row(&self) -> Vec<String> {
        let mut row = vec![self.label.clone()];
        for m in &self.metrics {
            row.push(format!("{:.6}", m.recall));
            row.push(format!("{:.6}", m.mean_recall));
            for s in &m.mric {
                row.push(format!("{:.6}", s.value));
            }
        }
        row
    }
}

/// Ranks every test image once and computes all metrics for each K.
///
/// `ic_tables` supplies one information source per mRIC column.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    test: &Dataset,
    ks: &[usize],
    ic_tables: &[ICTable],
    label: &str,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("K values must be >= 1, got {ks:?}")));
    }
    let k_pred = test.num_predicates();
    let mut images: Vec<(RankedImage, Vec<Triplet>)> = Vec::with_capacity(test.images().len());
    for img in test.images() {
        let gold: Vec<Triplet> = test.image_triplets(img).copied().collect();
        let pairs: Vec<(usize, usize)> = gold.iter().map(|t| (t.subj, t.obj)).collect();
        images.push((rank_triplets(scorer, img.id, &pairs)?, gold));
    }
    // fold in image-id order
    images.sort_by_key(|(r, _)| r.image_id);

    let names = test.predicates().names();
    let mut metrics = Vec::with_capacity(ks.len());
    let mut absent = Vec::new();
    for &k in ks {
        let mut per_image = Vec::with_capacity(images.len());
        let mut recall_sum = 0.0;
        for (ranked, gold) in &images {
            let hits = image_hits(ranked, gold, k)?;
            recall_sum += hits.matched.iter().filter(|&&m| m).count() as f64 / gold.len() as f64;
            per_image.push(hits);
        }
        let (mr, per_pred) = mean_recall(&per_image, k_pred);
        let mut mrics = Vec::with_capacity(ic_tables.len());
        for ic in ic_tables {
            mrics.push(SourceValue {
                source: ic.source_name.clone(),
                value: mric(&per_pred, ic)?,
            });
        }
        absent = (0..k_pred)
            .filter(|&p| per_pred.recall[p].is_none())
            .map(|p| names[p].clone())
            .collect();
        metrics.push(MetricsAtK {
            k,
            recall: recall_sum / images.len() as f64,
            mean_recall: mr,
            mric: mrics,
            per_predicate: (0..k_pred)
                .map(|p| PredicateEntry {
                    predicate: names[p].clone(),
                    gold: per_pred.gold[p],
                    hits: per_pred.hits[p],
                    recall: per_pred.recall[p],
                })
                .collect(),
        });
    }
    Ok(MetricsReport {
        label: label.to_string(),
        evaluated_images: images.len(),
        evaluated_triplets: test.len(),
        metrics,
        absent_predicates: absent,
        config: serde_json::Value::Null,
        input_hashes: serde_json::Value::Null,
        domain_spec: serde_json::Value::Null,
    })
}

/// Confusion of per-pair argmax predictions against gold labels.
pub fn export_confusion<S: Scorer + ?Sized>(scorer: &S, dataset: &Dataset) -> Result<ConfusionMatrix> {
    predict_confusion(scorer, dataset)
}

/// Writes `confusion` with rows and columns in ascending information-content order.
pub fn write_confusion_by_ic(
    confusion: &ConfusionMatrix,
    ic: &ICTable,
    names: &[String],
    path: &Path,
) -> Result<()> {
    let order = ic.ascending_order();
    let ordered_names: Vec<String> = order.iter().map(|&k| names[k].clone()).collect();
    confusion.permuted(&order)?.write_csv(path, &ordered_names)
}
