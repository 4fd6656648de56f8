//! Brute-force reference implementations for the integration tests.
//!
//! Nothing here calls the computation being checked: recalls, confusion
//! counts, information content, partitions and gradients are all re-derived
//! from the raw inputs.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;
use sgg_balance::head::HeadModel;

#[derive(Debug, Clone, Serialize)]
pub struct OracleVerdict {
    pub name: String,
    pub pipeline_value: f64,
    pub oracle_value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleVerdict {
    pub fn real(name: &str, pipeline_value: f64, oracle_value: f64, tolerance: f64) -> Self {
        OracleVerdict {
            name: name.to_string(),
            pipeline_value,
            oracle_value,
            tolerance,
            pass: (pipeline_value - oracle_value).abs() <= tolerance,
        }
    }

    pub fn exact(name: &str, pipeline_value: f64, oracle_value: f64) -> Self {
        OracleVerdict {
            name: name.to_string(),
            pipeline_value,
            oracle_value,
            tolerance: 0.0,
            pass: pipeline_value == oracle_value,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap()
    }
}

/// `(subj, obj, pred, score)` in ranked order.
pub type Ranked = (usize, usize, usize, f64);
/// `(subj, obj, pred)`.
pub type Gold = (usize, usize, usize);

/// Hits and gold size of one image, by quadratic scan. `None` for `k = 0` or
/// an empty gold list.
pub fn oracle_recall(ranked: &[Ranked], gold: &[Gold], k: usize) -> Option<(usize, usize)> {
    if k == 0 || gold.is_empty() {
        return None;
    }
    let mut hits = 0;
    for g in gold {
        let mut found = false;
        for (i, r) in ranked.iter().enumerate() {
            if i >= k {
                break;
            }
            if r.0 == g.0 && r.1 == g.1 && r.2 == g.2 {
                found = true;
            }
        }
        if found {
            hits += 1;
        }
    }
    Some((hits, gold.len()))
}

/// Per-predicate `(hits, gold)` over all images.
pub fn oracle_predicate_counts(images: &[(Vec<Ranked>, Vec<Gold>)], k: usize, num_predicates: usize) -> Vec<(u64, u64)> {
    let mut out = vec![(0u64, 0u64); num_predicates];
    for (ranked, gold) in images {
        for g in gold {
            out[g.2].1 += 1;
            let top = &ranked[..k.min(ranked.len())];
            if top.iter().any(|r| r.0 == g.0 && r.1 == g.1 && r.2 == g.2) {
                out[g.2].0 += 1;
            }
        }
    }
    out
}

pub fn oracle_mean_recall(counts: &[(u64, u64)]) -> f64 {
    let present: Vec<f64> = counts.iter().filter(|c| c.1 > 0).map(|c| c.0 as f64 / c.1 as f64).collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn oracle_mric(counts: &[(u64, u64)], ic: &[f64]) -> f64 {
    let terms: Vec<f64> = counts
        .iter()
        .zip(ic)
        .filter(|(c, _)| c.1 > 0)
        .map(|(c, v)| c.0 as f64 / c.1 as f64 * v)
        .collect();
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

/// Ranks pairs by descending softmax confidence of their argmax, stable.
pub fn oracle_rank(logits: &[(usize, usize, Vec<f64>)]) -> Vec<Ranked> {
    let mut out: Vec<Ranked> = Vec::new();
    for (s, o, z) in logits {
        let mut best = 0;
        for i in 1..z.len() {
            if z[i] > z[best] {
                best = i;
            }
        }
        let denom: f64 = z.iter().map(|v| (v - z[best]).exp()).sum();
        let score = 1.0 / denom;
        // insertion after every entry with score >= this one
        let pos = out.iter().position(|r| r.3 < score).unwrap_or(out.len());
        out.insert(pos, (*s, *o, best, score));
    }
    out
}

/// `counts[k][l]` by enumerating every `(k, l)` cell over all samples.
pub fn naive_confusion(gold: &[usize], predicted: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut out = vec![vec![0u64; k]; k];
    for (row, cells) in out.iter_mut().enumerate() {
        for (col, cell) in cells.iter_mut().enumerate() {
            *cell = (0..gold.len()).filter(|&i| gold[i] == row && predicted[i] == col).count() as u64;
        }
    }
    out
}

pub fn naive_ic(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| -(c as f64 / total as f64).log2()).collect()
}

/// Common set by counting, for each predicate, how many others precede it.
pub fn brute_force_common(ic: &[f64], counts: &[u64], m: usize) -> Vec<usize> {
    let before = |a: usize, b: usize| {
        ic[a] < ic[b] || (ic[a] == ic[b] && (counts[a] > counts[b] || (counts[a] == counts[b] && a < b)))
    };
    let mut common: Vec<usize> = (0..ic.len())
        .filter(|&p| (0..ic.len()).filter(|&q| q != p && before(q, p)).count() < m)
        .collect();
    common.sort_unstable();
    common
}

fn cross_entropy(z: &[f64], label: usize) -> f64 {
    let peak = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = peak + z.iter().map(|v| (v - peak).exp()).sum::<f64>().ln();
    lse - z[label]
}

fn loss_of(model: &HeadModel, subj: usize, obj: usize, label: usize, map: Option<&[f64]>) -> f64 {
    let z = model.forward(&model.feature(subj, obj).unwrap()).unwrap();
    let k = z.len();
    let a: Vec<f64> = match map {
        Some(m) => (0..k).map(|l| (0..k).map(|j| m[l * k + j] * z[j]).sum()).collect(),
        None => z,
    };
    cross_entropy(&a, label)
}

/// Central-difference gradient of the (optionally mapped) cross-entropy with
/// respect to embedding, recognition and bias, in that order.
pub fn fd_gradients(model: &HeadModel, subj: usize, obj: usize, label: usize, map: Option<&[f64]>, h: f64) -> Vec<f64> {
    let (s, k, hd) = (model.num_objects(), model.bias().len(), model.hidden());
    let parts = [model.embedding().to_vec(), model.recognition().to_vec(), model.bias().to_vec()];
    let mut out = Vec::new();
    for which in 0..3 {
        for i in 0..parts[which].len() {
            let eval = |delta: f64| {
                let mut p = parts.clone();
                p[which][i] += delta;
                let [e, w, b] = p;
                let m = HeadModel::from_parts(s, k, hd, e, w, b).unwrap();
                loss_of(&m, subj, obj, label, map)
            };
            out.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    out
}

/// Parent relation and latent templates read straight from the oracle file.
pub struct Ontology {
    pub parent: Vec<Option<usize>>,
    pub latent: HashMap<(usize, usize), usize>,
}

impl Ontology {
    pub fn is_informative(&self, pred: usize) -> bool {
        self.parent[pred].is_some()
    }
}

pub fn load_ontology(path: &Path, objects: &[String], predicates: &[String]) -> Result<Ontology, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("MissingOracle: {}: {e}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("MissingOracle: {e}"))?;
    let pid = |n: &serde_json::Value| predicates.iter().position(|p| p == n.as_str().unwrap()).unwrap();
    let oid = |n: &serde_json::Value| objects.iter().position(|p| p == n.as_str().unwrap()).unwrap();
    let mut parent = vec![None; predicates.len()];
    for pair in doc["parents"].as_array().ok_or("MissingOracle: no parents")? {
        parent[pid(&pair[0])] = Some(pid(&pair[1]));
    }
    let mut latent = HashMap::new();
    for t in doc["templates"].as_array().ok_or("MissingOracle: no templates")? {
        latent.insert((oid(&t[0]), oid(&t[1])), pid(&t[2]));
    }
    Ok(Ontology { parent, latent })
}

/// Among predictions on informative-latent templates, the fraction predicted
/// as any informative predicate.
pub fn oracle_informative_recovery(predictions: &[Gold], ontology: Option<&Ontology>) -> Result<f64, String> {
    let ont = ontology.ok_or("MissingOracle")?;
    let relevant: Vec<&Gold> = predictions
        .iter()
        .filter(|p| ont.is_informative(ont.latent[&(p.0, p.1)]))
        .collect();
    if relevant.is_empty() {
        return Ok(0.0);
    }
    Ok(relevant.iter().filter(|p| ont.is_informative(p.2)).count() as f64 / relevant.len() as f64)
}

/// Among predictions on informative-latent templates, the fraction equal to
/// the latent predicate (diagonal mass of the informative confusion rows).
pub fn informative_diagonal_mass(predictions: &[Gold], ontology: &Ontology) -> f64 {
    let relevant: Vec<&Gold> = predictions
        .iter()
        .filter(|p| ontology.is_informative(ontology.latent[&(p.0, p.1)]))
        .collect();
    if relevant.is_empty() {
        return 0.0;
    }
    relevant.iter().filter(|p| p.2 == ontology.latent[&(p.0, p.1)]).count() as f64 / relevant.len() as f64
}

/// `Ok` when every verdict passes, otherwise the failing verdicts as JSON lines.
pub fn summarize(verdicts: &[OracleVerdict]) -> Result<(), String> {
    let failed: Vec<String> = verdicts.iter().filter(|v| !v.pass).map(OracleVerdict::to_json).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(failed.join("\n"))
    }
}
