//! Information content, common/informative partition and separation undersampling.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FrequencyTable, PredicateVocab};
use crate::error::{Error, Result};
use crate::{seeded_rng, softmax, Scorer};

/// Per-predicate information content `-log_base(count / total)`.
///
/// Zero-count predicates get the largest finite value plus one, so they sort
/// as the most informative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ICTable {
    pub source_name: String,
    pub base: f64,
    pub ic: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ICTable {
    pub fn len(&self) -> usize {
        self.ic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ic.is_empty()
    }

    /// Predicate ids in ascending order of information content; ties go to
    /// the higher count, then the lower id.
    pub fn ascending_order(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.ic.len()).collect();
        ids.sort_by(|&a, &b| {
            self.ic[a]
                .partial_cmp(&self.ic[b])
                .unwrap_or(Ordering::Equal)
                .then(self.counts[b].cmp(&self.counts[a]))
                .then(a.cmp(&b))
        });
        ids
    }

    /// Copy with every value multiplied by `factor` (same order, same counts).
    pub fn scaled(&self, factor: f64) -> ICTable {
        ICTable {
            ic: self.ic.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

pub fn information_content(freq: &FrequencyTable, base: f64) -> Result<ICTable> {
    if !(base > 1.0 && base.is_finite()) {
        return Err(Error::InvalidBase(base));
    }
    if freq.total == 0 {
        return Err(Error::EmptyDataset);
    }
    let total = freq.total as f64;
    let mut ic: Vec<f64> = freq
        .counts
        .iter()
        .map(|&c| {
            if c == 0 {
                f64::NAN
            } else {
                -((c as f64 / total).ln() / base.ln())
            }
        })
        .collect();
    let max_finite = ic.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    for v in ic.iter_mut().filter(|v| v.is_nan()) {
        *v = max_finite + 1.0;
    }
    Ok(ICTable {
        source_name: freq.source_name.clone(),
        base,
        ic,
        counts: freq.counts.clone(),
    })
}

/// Reads `<predicate name>\t<count>` lines. Predicates missing from the file
/// count zero; names outside the vocabulary are rejected.
pub fn load_corpus_counts(path: &Path, predicates: &PredicateVocab) -> Result<FrequencyTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut counts = vec![0u64; predicates.len()];
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: &str| Error::MalformedRecord {
            line: n + 1,
            reason: reason.to_string(),
        };
        let (name, count) = line.rsplit_once('\t').ok_or_else(|| malformed("expected <name>\\t<count>"))?;
        let count: u64 = count.trim().parse().map_err(|_| malformed("count is not a non-negative integer"))?;
        let id = predicates.id(name).ok_or_else(|| Error::UnknownClass {
            name: name.to_string(),
            line: n + 1,
        })?;
        if !seen.insert(id) {
            return Err(malformed("predicate listed twice"));
        }
        counts[id] = count;
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    Ok(FrequencyTable::from_counts(name, counts))
}

pub fn write_corpus_counts(freq: &FrequencyTable, predicates: &PredicateVocab, path: &Path) -> Result<()> {
    let mut text = String::new();
    for (k, c) in freq.counts.iter().enumerate() {
        text.push_str(&format!("{}\t{c}\n", predicates.name(k)));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Uniform sampling without replacement.
    #[default]
    Random,
    /// Keep the samples the pretrained model is most confident about.
    Confidence,
}

/// Common/informative partition plus the undersampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// The `M` lowest-IC predicates, in ascending IC order.
    pub common: Vec<usize>,
    pub informative: Vec<usize>,
    pub m: usize,
    /// Per-common-predicate sample cap.
    pub n: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl DomainSpec {
    pub fn with_cap(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_common(&self, pred: usize) -> bool {
        self.common.contains(&pred)
    }

    fn validate(&self, k: usize) -> Result<()> {
        let mut seen = vec![false; k];
        for &p in self.common.iter().chain(&self.informative) {
            if p >= k || std::mem::replace(&mut seen[p], true) {
                return Err(Error::EmptySpec);
            }
        }
        if self.common.is_empty() || seen.contains(&false) {
            return Err(Error::EmptySpec);
        }
        Ok(())
    }
}

/// Splits predicates into the `m` lowest-IC (common) and the rest.
///
/// Cap, strategy and seed default to `2000`, random and `0`.
pub fn partition(ic: &ICTable, m: usize) -> Result<DomainSpec> {
    let k = ic.len();
    if m == 0 || m >= k {
        return Err(Error::InvalidM { m, k });
    }
    let order = ic.ascending_order();
    let (common, rest) = order.split_at(m);
    let mut informative = rest.to_vec();
    informative.sort_unstable();
    Ok(DomainSpec {
        common: common.to_vec(),
        informative,
        m,
        n: 2000,
        strategy: Strategy::Random,
        seed: 0,
    })
}

/// Separation undersampling: every informative triplet is kept, and each
/// common predicate keeps `min(N, count)` of its triplets.
///
/// The output preserves the input order of the kept triplets.
pub fn build_target_domain(
    train: &Dataset,
    spec: &DomainSpec,
    model: Option<&dyn Scorer>,
) -> Result<Dataset> {
    let k = train.num_predicates();
    spec.validate(k)?;
    if spec.strategy == Strategy::Confidence && model.is_none() {
        return Err(Error::MissingModel);
    }
    let mut keep = vec![true; train.len()];
    for &pred in &spec.common {
        let members: Vec<usize> = train
            .triplets()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.pred == pred)
            .map(|(i, _)| i)
            .collect();
        if members.len() <= spec.n {
            continue;
        }
        let chosen: Vec<usize> = match (spec.strategy, model) {
            (Strategy::Confidence, Some(model)) => {
                let mut scored = Vec::with_capacity(members.len());
                for &i in &members {
                    let t = &train.triplets()[i];
                    scored.push((softmax(&model.scores(t.subj, t.obj)?)[pred], i));
                }
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
                scored.into_iter().take(spec.n).map(|(_, i)| i).collect()
            }
            _ => {
                let mut rng = seeded_rng(spec.seed, 0xb000 + pred as u64);
                rand::seq::index::sample(&mut rng, members.len(), spec.n)
                    .into_iter()
                    .map(|j| members[j])
                    .collect()
            }
        };
        for &i in &members {
            keep[i] = false;
        }
        for i in chosen {
            keep[i] = true;
        }
    }
    Ok(train.filter_indices(format!("{}-target", train.name()), |i| keep[i]))
}
