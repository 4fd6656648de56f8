//! Confusion-derived transition matrices and score adjustment.
//!
//! The confusion matrix `C` counts (gold, predicted) label pairs, `C'` is its
//! row normalization, and the transition matrix is
//! `C* = row_normalize(C' + alpha * I)`. Adjustment maps a raw score vector
//! `z` to `a[l] = sum_k C*[l][k] * z[k]`: label `l` collects score from the
//! labels that `l`-annotated samples are usually predicted as, so a spike on a
//! common predicate lifts the informative predicates hiding behind it.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::{argmax, seeded_rng, Scorer};

/// Square count matrix; entry `(k, l)` counts samples labeled `k` and predicted `l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, gold: usize, predicted: usize) -> u64 {
        self.counts[gold * self.k + predicted]
    }

    pub fn row(&self, gold: usize) -> &[u64] {
        &self.counts[gold * self.k..(gold + 1) * self.k]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal(&self) -> Vec<u64> {
        (0..self.k).map(|i| self.get(i, i)).collect()
    }

    fn record(&mut self, gold: usize, predicted: usize) {
        self.counts[gold * self.k + predicted] += 1;
    }

    /// Row-major matrix of the counts as reals.
    pub fn as_real(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    /// Copy with rows and columns reordered so that position `i` holds label `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<ConfusionMatrix> {
        check_permutation(order, self.k)?;
        let mut out = ConfusionMatrix::zeros(self.k);
        for (i, &gi) in order.iter().enumerate() {
            for (j, &pj) in order.iter().enumerate() {
                out.counts[i * self.k + j] = self.get(gi, pj);
            }
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        let rows: Vec<Vec<String>> = (0..self.k)
            .map(|r| self.row(r).iter().map(u64::to_string).collect())
            .collect();
        write_matrix_csv(path, names, &rows)
    }
}

fn check_permutation(order: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if order.len() != k {
        return Err(Error::ShapeMismatch {
            expected: k,
            actual: order.len(),
        });
    }
    for &o in order {
        if o >= k || std::mem::replace(&mut seen[o], true) {
            return Err(Error::Config(format!("{order:?} is not a permutation of 0..{k}")));
        }
    }
    Ok(())
}

pub fn build_confusion(gold: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if gold.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: gold.len(),
            right: predicted.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut m = ConfusionMatrix::zeros(k);
    for (&g, &p) in gold.iter().zip(predicted) {
        for id in [g, p] {
            if id >= k {
                return Err(Error::InvalidId {
                    what: "predicate",
                    id,
                    size: k,
                });
            }
        }
        m.record(g, p);
    }
    Ok(m)
}

/// Confusion of `scorer`'s hard predictions (argmax, ties to the lower id)
/// against the gold labels of `dataset`.
pub fn predict_confusion<S: Scorer + ?Sized>(scorer: &S, dataset: &Dataset) -> Result<ConfusionMatrix> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut gold = Vec::with_capacity(dataset.len());
    let mut predicted = Vec::with_capacity(dataset.len());
    for t in dataset.triplets() {
        gold.push(t.pred);
        predicted.push(argmax(&scorer.scores(t.subj, t.obj)?));
    }
    build_confusion(&gold, &predicted, dataset.num_predicates())
}

/// Divides every row of the `k x k` row-major matrix by its sum.
///
/// All-zero rows become one-hot on the diagonal.
pub fn row_normalize(m: &[f64], k: usize) -> Result<Vec<f64>> {
    if m.len() != k * k {
        return Err(Error::ShapeMismatch {
            expected: k * k,
            actual: m.len(),
        });
    }
    let mut out = vec![0.0; k * k];
    for r in 0..k {
        let row = &m[r * k..(r + 1) * k];
        for (c, &v) in row.iter().enumerate() {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::NegativeEntry { row: r, col: c, value: v });
            }
        }
        let sum: f64 = row.iter().sum();
        if sum == 0.0 {
            out[r * k + r] = 1.0;
        } else {
            for c in 0..k {
                out[r * k + c] = row[c] / sum;
            }
        }
    }
    Ok(out)
}

/// How the transition matrix multiplies a score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// `a[l] = sum_k C*[l][k] z[k]`.
    #[default]
    GoldFromPredicted,
    /// `a[l] = sum_k C*[k][l] z[k]`, kept for ablations.
    PredictedToGold,
}

/// Row-stochastic `K x K` matrix; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    values: Vec<f64>,
    alpha: f64,
    provenance: String,
}

impl TransitionMatrix {
    pub fn identity(k: usize) -> Self {
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            values[i * k + i] = 1.0;
        }
        TransitionMatrix {
            k,
            values,
            alpha: 0.0,
            provenance: "identity".into(),
        }
    }

    /// Row-normalized matrix of independent uniform draws.
    pub fn random(k: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0x7a11);
        let raw: Vec<f64> = (0..k * k).map(|_| rng.gen::<f64>() + 1e-12).collect();
        TransitionMatrix {
            k,
            values: row_normalize(&raw, k).expect("positive entries"),
            alpha: 0.0,
            provenance: format!("random(seed={seed})"),
        }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.k + col]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// SHA-256 over the bit patterns of the values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// The linear map that realizes the adjustment under `orientation`.
    pub fn score_map(&self, orientation: Orientation) -> ScoreMap {
        let values = match orientation {
            Orientation::GoldFromPredicted => self.values.clone(),
            Orientation::PredictedToGold => transpose(&self.values, self.k),
        };
        ScoreMap { k: self.k, values }
    }

    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        apply_adjustment(self, z)
    }

    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        write_real_csv(path, names, &self.values, self.k)
    }

    pub fn to_json(&self, names: &[String]) -> Result<String> {
        let doc = TransitionDoc {
            alpha: self.alpha,
            provenance: self.provenance.clone(),
            predicates: names.to_vec(),
            values: self.values.chunks(self.k).map(<[f64]>::to_vec).collect(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::json("transition", e))
    }

    pub fn from_json(text: &str, names: &[String]) -> Result<Self> {
        let doc: TransitionDoc = serde_json::from_str(text).map_err(|e| Error::json("transition", e))?;
        if doc.predicates != names {
            return Err(Error::VocabMismatch("transition matrix vocabulary differs".into()));
        }
        let k = names.len();
        if doc.values.len() != k || doc.values.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch {
                expected: k,
                actual: doc.values.len(),
            });
        }
        let values: Vec<f64> = doc.values.into_iter().flatten().collect();
        for r in 0..k {
            let sum: f64 = values[r * k..(r + 1) * k].iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("transition row {r} sums to {sum}")));
            }
        }
        Ok(TransitionMatrix {
            k,
            values,
            alpha: doc.alpha,
            provenance: doc.provenance,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionDoc {
    alpha: f64,
    provenance: String,
    predicates: Vec<String>,
    values: Vec<Vec<f64>>,
}

/// `C* = row_normalize(C' + alpha * I)`.
pub fn build_transition(
    c_prime: &[f64],
    k: usize,
    alpha: f64,
    provenance: impl Into<String>,
) -> Result<TransitionMatrix> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidAlpha(alpha));
    }
    if c_prime.len() != k * k {
        return Err(Error::ShapeMismatch {
            expected: k * k,
            actual: c_prime.len(),
        });
    }
    for r in 0..k {
        let sum: f64 = c_prime[r * k..(r + 1) * k].iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "normalized confusion row {r} sums to {sum}, expected 1"
            )));
        }
    }
    let mut shifted = c_prime.to_vec();
    for i in 0..k {
        shifted[i * k + i] += alpha;
    }
    Ok(TransitionMatrix {
        k,
        values: row_normalize(&shifted, k)?,
        alpha,
        provenance: provenance.into(),
    })
}

/// `a[l] = sum_k C*[l][k] * z[k]`.
pub fn apply_adjustment(t: &TransitionMatrix, z: &[f64]) -> Result<Vec<f64>> {
    ScoreMap {
        k: t.k,
        values: t.values.clone(),
    }
    .apply(z)
}

/// A general linear map on score vectors, `a = M z`.
///
/// Fixed transitions produce one through [`TransitionMatrix::score_map`];
/// trainable transitions in ablations are plain score maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    k: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != k * k {
            return Err(Error::ShapeMismatch {
                expected: k * k,
                actual: values.len(),
            });
        }
        Ok(ScoreMap { k, values })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.k {
            return Err(Error::ShapeMismatch {
                expected: self.k,
                actual: z.len(),
            });
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(i));
        }
        Ok(self
            .values
            .chunks(self.k)
            .map(|row| row.iter().zip(z).map(|(m, v)| m * v).sum())
            .collect())
    }
}

/// Scores of `inner` passed through a score map.
#[derive(Debug, Clone)]
pub struct AdjustedScorer<S> {
    pub inner: S,
    pub map: ScoreMap,
}

impl<S: Scorer> Scorer for AdjustedScorer<S> {
    fn num_predicates(&self) -> usize {
        self.inner.num_predicates()
    }

    fn scores(&self, subj: usize, obj: usize) -> Result<Vec<f64>> {
        self.map.apply(&self.inner.scores(subj, obj)?)
    }
}

fn transpose(m: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for r in 0..k {
        for c in 0..k {
            out[c * k + r] = m[r * k + c];
        }
    }
    out
}

/// Writes a `k x k` real matrix as CSV with a header row of names.
pub fn write_real_csv(path: &Path, names: &[String], values: &[f64], k: usize) -> Result<()> {
    let rows: Vec<Vec<String>> = values
        .chunks(k)
        .map(|row| row.iter().map(f64::to_string).collect())
        .collect();
    write_matrix_csv(path, names, &rows)
}

fn write_matrix_csv(path: &Path, names: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(names)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn confusion_counts() {
        let m = build_confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(m.row(0), &[1, 1]);
        assert_eq!(m.row(1), &[0, 1]);
        assert_eq!(m.total(), 3);

        let perfect = build_confusion(&[0, 2, 2, 1], &[0, 2, 2, 1], 3).unwrap();
        assert_eq!(perfect.diagonal(), vec![1, 1, 2]);
        assert_eq!(perfect.total(), 4);

        assert!(matches!(build_confusion(&[0], &[0, 1], 2), Err(Error::LengthMismatch { .. })));
        assert!(matches!(build_confusion(&[0], &[2], 2), Err(Error::InvalidId { .. })));
    }

    #[test]
    fn permutation_reorders_both_axes() {
        let m = build_confusion(&[0, 0, 1, 2], &[1, 1, 2, 2], 3).unwrap();
        let p = m.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.get(0, 0), m.get(2, 2));
        assert_eq!(p.get(1, 2), m.get(0, 1));
        assert!(m.permuted(&[0, 0, 1]).is_err());
    }

    #[test]
    fn row_normalize_examples() {
        let out = row_normalize(&[2.0, 2.0, 1.0, 3.0], 2).unwrap();
        assert!(close(&out, &[0.5, 0.5, 0.25, 0.75], 1e-15));
        let id = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(row_normalize(&id, 2).unwrap(), id);
        let zero_row = row_normalize(&[0.0, 0.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(&zero_row[..2], &[1.0, 0.0]);
        assert!(matches!(
            row_normalize(&[1.0, -1.0, 0.0, 1.0], 2),
            Err(Error::NegativeEntry { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn transition_examples() {
        let id = [1.0, 0.0, 0.0, 1.0];
        for alpha in [0.0, 0.5, 3.0] {
            assert!(close(build_transition(&id, 2, alpha, "t").unwrap().values(), &id, 1e-15));
        }
        let t = build_transition(&[0.5, 0.5, 0.5, 0.5], 2, 1.0, "t").unwrap();
        assert!(close(t.values(), &[0.75, 0.25, 0.25, 0.75], 1e-15));
        assert!(matches!(build_transition(&id, 2, -1.0, "t"), Err(Error::InvalidAlpha(_))));
        assert!(matches!(build_transition(&id, 2, f64::NAN, "t"), Err(Error::InvalidAlpha(_))));
    }

    #[test]
    fn adjustment_examples() {
        let z = [1.5, -2.0, 0.25];
        assert_eq!(TransitionMatrix::identity(3).apply(&z).unwrap(), z.to_vec());

        // a raw spike on "on" lifts "standing on"
        let t = build_transition(&[1.0, 0.0, 0.6, 0.4], 2, 0.0, "t").unwrap();
        assert!(close(&t.apply(&[5.0, 0.0]).unwrap(), &[5.0, 3.0], 1e-12));

        let t = TransitionMatrix::identity(2);
        assert!(matches!(t.apply(&[1.0]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(t.apply(&[1.0, f64::INFINITY]), Err(Error::NonFiniteInput(1))));
    }

    #[test]
    fn orientation_transposes() {
        let t = build_transition(&[0.5, 0.5, 0.0, 1.0], 2, 1.0, "t").unwrap();
        let a = t.score_map(Orientation::GoldFromPredicted).apply(&[1.0, 0.0]).unwrap();
        let b = t.score_map(Orientation::PredictedToGold).apply(&[1.0, 0.0]).unwrap();
        assert!(close(&a, &[0.75, 0.0], 1e-15));
        assert!(close(&b, &[0.75, 0.25], 1e-15));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let names: Vec<String> = (0..4).map(|i| format!("p{i}")).collect();
        let t = TransitionMatrix::random(4, 11);
        let back = TransitionMatrix::from_json(&t.to_json(&names).unwrap(), &names).unwrap();
        assert_eq!(back.checksum(), t.checksum());
        assert_eq!(back, t);
    }

    fn square(max_k: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
        (2..=max_k).prop_flat_map(|k| (Just(k), prop::collection::vec(0.0f64..50.0, k * k)))
    }

    proptest! {
        #[test]
        fn transition_rows_are_stochastic((k, m) in square(12), alpha in 0.0f64..10.0) {
            let c_prime = row_normalize(&m, k).unwrap();
            let t = build_transition(&c_prime, k, alpha, "p").unwrap();
            for row in t.values().chunks(k) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            for i in 0..k {
                prop_assert!(t.get(i, i) >= c_prime[i * k + i] / (1.0 + alpha) - 1e-12);
            }
        }

        #[test]
        fn diagonal_grows_with_alpha((k, m) in square(10), a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let c_prime = row_normalize(&m, k).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let tl = build_transition(&c_prime, k, lo, "p").unwrap();
            let th = build_transition(&c_prime, k, hi, "p").unwrap();
            for i in 0..k {
                prop_assert!(th.get(i, i) >= tl.get(i, i) - 1e-12);
            }
        }

        #[test]
        fn large_alpha_approaches_identity((k, m) in square(10)) {
            let c_prime = row_normalize(&m, k).unwrap();
            let t = build_transition(&c_prime, k, 1e6, "p").unwrap();
            let id = TransitionMatrix::identity(k);
            prop_assert!(close(t.values(), id.values(), 1e-5));
        }

        #[test]
        fn adjustment_is_linear((k, m) in square(10), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let t = build_transition(&row_normalize(&m, k).unwrap(), k, 1.0, "p").unwrap();
            let r = TransitionMatrix::random(2 * k, seed).values().to_vec();
            let (z1, z2) = (&r[..k], &r[k..2 * k]);
            let mix: Vec<f64> = z1.iter().zip(z2).map(|(x, y)| a * x + b * y).collect();
            let lhs = t.apply(&mix).unwrap();
            let (y1, y2) = (t.apply(z1).unwrap(), t.apply(z2).unwrap());
            let rhs: Vec<f64> = y1.iter().zip(&y2).map(|(x, y)| a * x + b * y).collect();
            prop_assert!(close(&lhs, &rhs, 1e-9));
        }
    }
}
