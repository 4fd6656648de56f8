//! Two-layer predicate classifier.
//!
//! Input features are `one_hot(subj) ++ one_hot(obj) ++ [1]` (dimension
//! `D = 2S + 1`). The embedding layer `E` (`H x D`) feeds a rectifier, and the
//! recognition layer `(W, b)` (`K x H`, `K`) produces logits:
//! `z = W relu(E f) + b`. The embedding can be frozen so that only the
//! recognition layer is finetuned.
//!
//! Training minimizes softmax cross-entropy of either the raw logits or the
//! adjusted logits `M z`, where `M` is a frozen transition (or, for
//! ablations, a trainable score map).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::adjust::{Orientation, ScoreMap, TransitionMatrix};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::{seeded_rng, softmax, Scorer};

/// Sparse view of `one_hot(subj) ++ one_hot(obj) ++ [1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureVector {
    subj: usize,
    obj: usize,
    num_objects: usize,
}

impl FeatureVector {
    pub fn new(subj: usize, obj: usize, num_objects: usize) -> Result<Self> {
        for id in [subj, obj] {
            if id >= num_objects {
                return Err(Error::InvalidId {
                    what: "object",
                    id,
                    size: num_objects,
                });
            }
        }
        Ok(FeatureVector { subj, obj, num_objects })
    }

    pub fn dim(&self) -> usize {
        2 * self.num_objects + 1
    }

    /// Positions of the three non-zero (unit) entries.
    pub fn active(&self) -> [usize; 3] {
        [self.subj, self.num_objects + self.obj, 2 * self.num_objects]
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        for i in self.active() {
            v[i] = 1.0;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    num_objects: usize,
    num_predicates: usize,
    hidden: usize,
    /// `H x D`, row-major.
    embedding: Vec<f64>,
    /// `K x H`, row-major.
    recognition: Vec<f64>,
    bias: Vec<f64>,
    init_seed: u64,
    trained_epochs: usize,
}

struct Activations {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl HeadModel {
    /// Uniform init in `+-1/sqrt(fan_in)` for both layers, zero bias.
    pub fn init(num_objects: usize, num_predicates: usize, hidden: usize, seed: u64) -> Result<Self> {
        if num_objects == 0 || num_predicates == 0 || hidden == 0 {
            return Err(Error::InvalidDims(format!(
                "S={num_objects}, K={num_predicates}, H={hidden} must all be >= 1"
            )));
        }
        let d = 2 * num_objects + 1;
        let mut rng = seeded_rng(seed, 0x1417);
        let e_scale = 1.0 / (d as f64).sqrt();
        let w_scale = 1.0 / (hidden as f64).sqrt();
        let embedding = (0..hidden * d).map(|_| rng.gen_range(-e_scale..e_scale)).collect();
        let recognition = (0..num_predicates * hidden)
            .map(|_| rng.gen_range(-w_scale..w_scale))
            .collect();
        Ok(HeadModel {
            num_objects,
            num_predicates,
            hidden,
            embedding,
            recognition,
            bias: vec![0.0; num_predicates],
            init_seed: seed,
            trained_epochs: 0,
        })
    }

    /// Builds a model from explicit weights.
    pub fn from_parts(
        num_objects: usize,
        num_predicates: usize,
        hidden: usize,
        embedding: Vec<f64>,
        recognition: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let d = 2 * num_objects + 1;
        for (expected, actual) in [
            (hidden * d, embedding.len()),
            (num_predicates * hidden, recognition.len()),
            (num_predicates, bias.len()),
        ] {
            if expected != actual {
                return Err(Error::ShapeMismatch { expected, actual });
            }
        }
        if num_objects == 0 || num_predicates == 0 || hidden == 0 {
            return Err(Error::InvalidDims("all dimensions must be >= 1".into()));
        }
        Ok(HeadModel {
            num_objects,
            num_predicates,
            hidden,
            embedding,
            recognition,
            bias,
            init_seed: 0,
            trained_epochs: 0,
        })
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        2 * self.num_objects + 1
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn recognition(&self) -> &[f64] {
        &self.recognition
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    fn is_finite(&self) -> bool {
        [&self.embedding, &self.recognition, &self.bias]
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn embedding_checksum(&self) -> String {
        checksum(&self.embedding)
    }

    pub fn checksum(&self) -> String {
        let mut all = self.embedding.clone();
        all.extend_from_slice(&self.recognition);
        all.extend_from_slice(&self.bias);
        checksum(&all)
    }

    pub fn feature(&self, subj: usize, obj: usize) -> Result<FeatureVector> {
        FeatureVector::new(subj, obj, self.num_objects)
    }

    pub fn forward(&self, feature: &FeatureVector) -> Result<Vec<f64>> {
        if feature.dim() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                actual: feature.dim(),
            });
        }
        Ok(self.activations(feature).logits)
    }

    fn activations(&self, feature: &FeatureVector) -> Activations {
        let d = self.input_dim();
        let cols = feature.active();
        let pre: Vec<f64> = (0..self.hidden)
            .map(|j| cols.iter().map(|&c| self.embedding[j * d + c]).sum())
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let logits = self
            .recognition
            .chunks(self.hidden)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b)
            .collect();
        Activations { pre, hidden, logits }
    }

    /// Portable JSON checkpoint; weights are written with 17 significant digits.
    pub fn to_json(&self) -> Result<String> {
        let doc = CheckpointOut {
            format: CHECKPOINT_FORMAT,
            num_objects: self.num_objects,
            num_predicates: self.num_predicates,
            hidden: self.hidden,
            init_seed: self.init_seed,
            trained_epochs: self.trained_epochs,
            embedding: float_array(&self.embedding)?,
            recognition: float_array(&self.recognition)?,
            bias: float_array(&self.bias)?,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::json("checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointIn = serde_json::from_str(text).map_err(|e| Error::json("checkpoint", e))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", doc.format)));
        }
        let mut model = HeadModel::from_parts(
            doc.num_objects,
            doc.num_predicates,
            doc.hidden,
            doc.embedding,
            doc.recognition,
            doc.bias,
        )?;
        model.init_seed = doc.init_seed;
        model.trained_epochs = doc.trained_epochs;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Scorer for HeadModel {
    fn num_predicates(&self) -> usize {
        self.num_predicates
    }

    fn scores(&self, subj: usize, obj: usize) -> Result<Vec<f64>> {
        self.forward(&self.feature(subj, obj)?)
    }
}

const CHECKPOINT_FORMAT: &str = "predicate-head/1";

#[derive(Serialize)]
struct CheckpointOut {
    format: &'static str,
    num_objects: usize,
    num_predicates: usize,
    hidden: usize,
    init_seed: u64,
    trained_epochs: usize,
    embedding: Box<RawValue>,
    recognition: Box<RawValue>,
    bias: Box<RawValue>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    format: String,
    num_objects: usize,
    num_predicates: usize,
    hidden: usize,
    init_seed: u64,
    trained_epochs: usize,
    embedding: Vec<f64>,
    recognition: Vec<f64>,
    bias: Vec<f64>,
}

fn float_array(values: &[f64]) -> Result<Box<RawValue>> {
    let body: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
    RawValue::from_string(format!("[{}]", body.join(",")))
        .map_err(|e| Error::json("checkpoint weights", e))
}

fn checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Only the recognition layer is updated.
    pub freeze_embedding: bool,
    /// Loss is computed on adjusted logits when set.
    pub transition: Option<TransitionMatrix>,
    pub orientation: Orientation,
    /// Treat the transition as the initial value of a trainable score map.
    pub trainable_transition: bool,
    /// Per-predicate loss weights (reweighting baseline).
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            step_size: 0.1,
            momentum: 0.9,
            seed: 0,
            freeze_embedding: false,
            transition: None,
            orientation: Orientation::default(),
            trainable_transition: false,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_predicates: usize) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(t) = &self.transition {
            if t.size() != num_predicates {
                return Err(Error::ShapeMismatch {
                    expected: num_predicates,
                    actual: t.size(),
                });
            }
        } else if self.trainable_transition {
            return Err(Error::Config("trainable_transition needs an initial transition".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != num_predicates {
                return Err(Error::ShapeMismatch {
                    expected: num_predicates,
                    actual: w.len(),
                });
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config("class weights must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HeadModel,
    /// Mean per-sample loss of each epoch.
    pub loss_history: Vec<f64>,
    /// Final score map when the transition was trainable.
    pub learned_map: Option<ScoreMap>,
}

/// Gradient buffers, shaped like the parameters.
#[derive(Clone)]
struct Grads {
    embedding: Vec<f64>,
    recognition: Vec<f64>,
    bias: Vec<f64>,
    map: Vec<f64>,
}

impl Grads {
    fn zeros(model: &HeadModel, map_len: usize) -> Self {
        Grads {
            embedding: vec![0.0; model.embedding.len()],
            recognition: vec![0.0; model.recognition.len()],
            bias: vec![0.0; model.bias.len()],
            map: vec![0.0; map_len],
        }
    }

    fn clear(&mut self) {
        for buf in [&mut self.embedding, &mut self.recognition, &mut self.bias, &mut self.map] {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn max_abs(&self) -> f64 {
        [&self.embedding, &self.recognition, &self.bias, &self.map]
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Adds `scale * d(loss)/d(params)` for one sample into `grads`; returns the loss.
fn accumulate(
    model: &HeadModel,
    feature: &FeatureVector,
    label: usize,
    map: Option<&[f64]>,
    weight: f64,
    scale: f64,
    grads: &mut Grads,
) -> f64 {
    let k = model.num_predicates;
    let hdim = model.hidden;
    let d = model.input_dim();
    let act = model.activations(feature);
    let adjusted = match map {
        Some(m) => m
            .chunks(k)
            .map(|row| row.iter().zip(&act.logits).map(|(a, b)| a * b).sum())
            .collect(),
        None => act.logits.clone(),
    };
    let probs = softmax(&adjusted);
    let peak = adjusted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = peak + adjusted.iter().map(|a| (a - peak).exp()).sum::<f64>().ln();
    let loss = weight * (lse - adjusted[label]);

    // d loss / d adjusted
    let mut g_adj = probs;
    g_adj[label] -= 1.0;
    g_adj.iter_mut().for_each(|g| *g *= weight * scale);

    let g_logits: Vec<f64> = match map {
        Some(m) => {
            for (l, &ga) in g_adj.iter().enumerate() {
                for (j, &z) in act.logits.iter().enumerate() {
                    grads.map[l * k + j] += ga * z;
                }
            }
            (0..k).map(|j| (0..k).map(|l| m[l * k + j] * g_adj[l]).sum()).collect()
        }
        None => g_adj,
    };

    let mut g_hidden = vec![0.0; hdim];
    for (kk, &gz) in g_logits.iter().enumerate() {
        grads.bias[kk] += gz;
        let row = &model.recognition[kk * hdim..(kk + 1) * hdim];
        let grow = &mut grads.recognition[kk * hdim..(kk + 1) * hdim];
        for j in 0..hdim {
            grow[j] += gz * act.hidden[j];
            g_hidden[j] += gz * row[j];
        }
    }
    let cols = feature.active();
    for j in 0..hdim {
        if act.pre[j] > 0.0 {
            for &c in &cols {
                grads.embedding[j * d + c] += g_hidden[j];
            }
        }
    }
    loss
}

/// Momentum gradient descent on softmax cross-entropy.
///
/// Shuffling uses a per-epoch generator derived from `(cfg.seed, epoch)`, so
/// the run is fully determined by the inputs.
pub fn train(model: &HeadModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.num_objects() != model.num_objects || data.num_predicates() != model.num_predicates {
        return Err(Error::VocabMismatch(format!(
            "model is S={}, K={} but data is S={}, K={}",
            model.num_objects,
            model.num_predicates,
            data.num_objects(),
            data.num_predicates()
        )));
    }
    cfg.validate(model.num_predicates)?;
    if cfg.freeze_embedding && model.trained_epochs == 0 {
        return Err(Error::Config(
            "freeze_embedding requires a previously trained model".into(),
        ));
    }

    let k = model.num_predicates;
    let mut model = model.clone();
    let mut map: Option<Vec<f64>> = cfg
        .transition
        .as_ref()
        .map(|t| t.score_map(cfg.orientation).values().to_vec());
    let samples: Vec<(FeatureVector, usize)> = data
        .triplets()
        .iter()
        .map(|t| Ok((model.feature(t.subj, t.obj)?, t.pred)))
        .collect::<Result<_>>()?;

    let map_len = map.as_ref().map_or(0, Vec::len);
    let mut grads = Grads::zeros(&model, map_len);
    let mut velocity = Grads::zeros(&model, map_len);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seeded_rng(cfg.seed, 1000 + epoch as u64));
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (feature, label) = &samples[i];
                let weight = cfg.class_weights.as_ref().map_or(1.0, |w| w[*label]);
                batch_loss += accumulate(&model, feature, *label, map.as_deref(), weight, scale, &mut grads);
            }
            if !batch_loss.is_finite() || !grads.max_abs().is_finite() || !model.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    max_grad: grads.max_abs(),
                });
            }
            epoch_loss += batch_loss;

            let step = |params: &mut [f64], vel: &mut [f64], g: &[f64]| {
                for ((p, v), g) in params.iter_mut().zip(vel.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v - cfg.step_size * g;
                    *p += *v;
                }
            };
            if !cfg.freeze_embedding {
                step(&mut model.embedding, &mut velocity.embedding, &grads.embedding);
            }
            step(&mut model.recognition, &mut velocity.recognition, &grads.recognition);
            step(&mut model.bias, &mut velocity.bias, &grads.bias);
            if cfg.trainable_transition {
                if let Some(m) = map.as_mut() {
                    step(m, &mut velocity.map, &grads.map);
                }
            }
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    model.trained_epochs += cfg.epochs;

    let learned_map = if cfg.trainable_transition {
        map.map(|m| ScoreMap::new(k, m)).transpose()?
    } else {
        None
    };
    Ok(TrainOutcome {
        model,
        loss_history: history,
        learned_map,
    })
}

fn sample_loss(model: &HeadModel, feature: &FeatureVector, label: usize, map: Option<&[f64]>) -> f64 {
    let mut scratch = Grads::zeros(model, map.map_or(0, <[f64]>::len));
    accumulate(model, feature, label, map, 1.0, 1.0, &mut scratch)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

/// Largest relative disagreement between analytic and central-difference
/// gradients of the (optionally adjusted) cross-entropy over every model
/// parameter. `h` is clamped into `[1e-6, 1e-3]`.
pub fn grad_check(
    model: &HeadModel,
    feature: &FeatureVector,
    label: usize,
    transition: Option<&TransitionMatrix>,
    h: f64,
) -> f64 {
    let map = transition.map(|t| t.score_map(Orientation::GoldFromPredicted).values().to_vec());
    grad_check_with_map(model, feature, label, map.as_deref(), h)
}

fn grad_check_with_map(
    model: &HeadModel,
    feature: &FeatureVector,
    label: usize,
    map: Option<&[f64]>,
    h: f64,
) -> f64 {
    let h = h.clamp(1e-6, 1e-3);
    let mut analytic = Grads::zeros(model, map.map_or(0, <[f64]>::len));
    accumulate(model, feature, label, map, 1.0, 1.0, &mut analytic);

    let mut worst = 0.0_f64;
    let mut probe = model.clone();
    macro_rules! check_all {
        ($field:ident) => {
            for i in 0..probe.$field.len() {
                let orig = probe.$field[i];
                probe.$field[i] = orig + h;
                let up = sample_loss(&probe, feature, label, map);
                probe.$field[i] = orig - h;
                let down = sample_loss(&probe, feature, label, map);
                probe.$field[i] = orig;
                worst = worst.max(relative_error(analytic.$field[i], (up - down) / (2.0 * h)));
            }
        };
    }
    check_all!(embedding);
    check_all!(recognition);
    check_all!(bias);
    worst
}

/// Same check for the gradient with respect to a trainable score map.
pub fn map_grad_check(
    model: &HeadModel,
    feature: &FeatureVector,
    label: usize,
    map: &ScoreMap,
    h: f64,
) -> f64 {
    let h = h.clamp(1e-6, 1e-3);
    let mut analytic = Grads::zeros(model, map.values().len());
    accumulate(model, feature, label, Some(map.values()), 1.0, 1.0, &mut analytic);
    let mut values = map.values().to_vec();
    let mut worst = 0.0_f64;
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let up = sample_loss(model, feature, label, Some(&values));
        values[i] = orig - h;
        let down = sample_loss(model, feature, label, Some(&values));
        values[i] = orig;
        worst = worst.max(relative_error(analytic.map[i], (up - down) / (2.0 * h)));
    }
    worst.max(grad_check_with_map(model, feature, label, Some(map.values()), h))
}

/// Raw analytic gradients for one sample, for tests comparing two setups.
pub fn sample_gradients(
    model: &HeadModel,
    feature: &FeatureVector,
    label: usize,
    transition: Option<&TransitionMatrix>,
) -> Vec<f64> {
    let map = transition.map(|t| t.score_map(Orientation::GoldFromPredicted).values().to_vec());
    let mut g = Grads::zeros(model, map.as_ref().map_or(0, Vec::len));
    accumulate(model, feature, label, map.as_deref(), 1.0, 1.0, &mut g);
    let mut out = g.embedding;
    out.extend(g.recognition);
    out.extend(g.bias);
    out
}

/// Fraction of triplets whose argmax prediction equals the gold label.
pub fn accuracy<S: Scorer + ?Sized>(scorer: &S, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for t in data.triplets() {
        if crate::argmax(&scorer.scores(t.subj, t.obj)?) == t.pred {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjust::{build_transition, row_normalize};
    use crate::dataset::{ObjectVocab, PredicateVocab, Triplet};
    use std::sync::Arc;

    fn one_sample(k: usize) -> Dataset {
        let o = Arc::new(ObjectVocab::new((0..3).map(|i| format!("o{i}")).collect()).unwrap());
        let p = Arc::new(PredicateVocab::new((0..k).map(|i| format!("p{i}")).collect()).unwrap());
        Dataset::new("one", o, p, vec![Triplet { image_id: 0, subj: 1, obj: 2, pred: 1 }]).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = HeadModel::init(10, 5, 8, 3).unwrap();
        assert_eq!(a.embedding().len(), 8 * 21);
        assert_eq!(a.recognition().len(), 5 * 8);
        assert_eq!(a, HeadModel::init(10, 5, 8, 3).unwrap());
        assert_ne!(a, HeadModel::init(10, 5, 8, 4).unwrap());
        assert!(a.scores(3, 9).unwrap().iter().all(|v| v.is_finite()));
        assert!(matches!(HeadModel::init(0, 5, 8, 0), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn forward_examples() {
        let m = HeadModel::from_parts(2, 2, 3, vec![0.0; 15], vec![0.0; 6], vec![0.1, 0.2]).unwrap();
        assert_eq!(m.scores(0, 1).unwrap(), vec![0.1, 0.2]);

        let base = HeadModel::init(4, 3, 5, 1).unwrap();
        let doubled = HeadModel::from_parts(
            4,
            3,
            5,
            base.embedding().to_vec(),
            base.recognition().iter().map(|w| 2.0 * w).collect(),
            vec![0.0; 3],
        )
        .unwrap();
        let z1 = base.scores(2, 3).unwrap();
        let z2 = doubled.scores(2, 3).unwrap();
        for (a, b) in z1.iter().zip(&z2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        let p: f64 = softmax(&z1).iter().sum();
        assert!((p - 1.0).abs() < 1e-9);

        let other = FeatureVector::new(0, 0, 7).unwrap();
        assert!(matches!(base.forward(&other), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn feature_has_three_ones() {
        let f = FeatureVector::new(1, 2, 3).unwrap();
        let dense = f.to_dense();
        assert_eq!(dense.len(), 7);
        assert_eq!(dense.iter().filter(|&&v| v != 0.0).count(), 3);
        assert_eq!(*dense.last().unwrap(), 1.0);
    }

    #[test]
    fn memorizes_single_sample() {
        let data = one_sample(4);
        let model = HeadModel::init(3, 4, 6, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            step_size: 0.5,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&model, &data, &cfg).unwrap();
        assert_eq!(out.loss_history.len(), 200);
        assert!(*out.loss_history.last().unwrap() < 0.01);
        assert!(out.loss_history[0] <= (4.0f64).ln() + 0.1);
    }

    #[test]
    fn frozen_embedding_and_transition_are_untouched() {
        let data = one_sample(3);
        let model = HeadModel::init(3, 3, 4, 2).unwrap();
        let pre = train(&model, &data, &TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap().model;
        let c_prime = row_normalize(&[3.0, 1.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 4.0], 3).unwrap();
        let t = build_transition(&c_prime, 3, 1.0, "test").unwrap();
        let before = t.checksum();
        let cfg = TrainConfig {
            epochs: 5,
            freeze_embedding: true,
            transition: Some(t),
            ..TrainConfig::default()
        };
        let out = train(&pre, &data, &cfg).unwrap();
        assert_eq!(out.model.embedding_checksum(), pre.embedding_checksum());
        assert_ne!(out.model.checksum(), pre.checksum());
        assert_eq!(cfg.transition.as_ref().unwrap().checksum(), before);
    }

    #[test]
    fn freeze_requires_pretrained() {
        let data = one_sample(3);
        let model = HeadModel::init(3, 3, 4, 2).unwrap();
        let cfg = TrainConfig { freeze_embedding: true, ..TrainConfig::default() };
        assert!(matches!(train(&model, &data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let data = one_sample(3);
        let model = HeadModel::init(3, 3, 4, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            step_size: 1e200,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&model, &data, &cfg), Err(Error::NonFiniteLoss { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let data = one_sample(3);
        let model = HeadModel::init(3, 3, 4, 9).unwrap();
        let cfg = TrainConfig { epochs: 4, seed: 5, ..TrainConfig::default() };
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = HeadModel::init(4, 5, 6, 17).unwrap();
        let f = model.feature(1, 3).unwrap();
        assert!(grad_check(&model, &f, 2, None, 1e-4) < 1e-4);
        let c_prime = row_normalize(&(0..25).map(|i| (i % 7) as f64).collect::<Vec<_>>(), 5).unwrap();
        let t = build_transition(&c_prime, 5, 0.3, "t").unwrap();
        assert!(grad_check(&model, &f, 2, Some(&t), 1e-4) < 1e-4);
        let map = TransitionMatrix::random(5, 3).score_map(Orientation::GoldFromPredicted);
        assert!(map_grad_check(&model, &f, 4, &map, 1e-4) < 1e-4);
    }

    #[test]
    fn identity_transition_leaves_gradients_unchanged() {
        let model = HeadModel::init(4, 5, 6, 8).unwrap();
        let f = model.feature(0, 2).unwrap();
        let plain = sample_gradients(&model, &f, 3, None);
        let id = sample_gradients(&model, &f, 3, Some(&TransitionMatrix::identity(5)));
        assert_eq!(plain, id);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = HeadModel::init(5, 4, 3, 21).unwrap();
        let text = model.to_json().unwrap();
        assert!(text.contains("e-"));
        let back = HeadModel::from_json(&text).unwrap();
        assert_eq!(back.checksum(), model.checksum());
    }
}
