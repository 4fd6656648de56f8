//! Synthetic scene-graph corpora with a known common → informative ontology.
//!
//! Predicates form a depth-one forest. Every `(subject, object)` class pair
//! (a *template*) is bound to one latent predicate drawn from a Zipf
//! popularity law. Train annotations replace an informative latent label by
//! its common parent with probability `relabel_prob`; test annotations always
//! carry the latent label.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, FrequencyTable, ObjectVocab, PredicateVocab, Triplet};
use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Common predicates that have informative children.
    pub roots: usize,
    pub children_per_root: usize,
    /// Common-level predicates without children.
    pub standalone_roots: usize,
    pub num_objects: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub triplets_per_image: usize,
    pub zipf_exponent: f64,
    /// Probability that an informative train label is written as its parent.
    pub relabel_prob: f64,
}

impl SynthConfig {
    /// The reference configuration used throughout the test suites.
    pub fn reference() -> Self {
        SynthConfig {
            roots: 3,
            children_per_root: 4,
            standalone_roots: 3,
            num_objects: 30,
            train_images: 2000,
            test_images: 800,
            triplets_per_image: 8,
            zipf_exponent: 1.5,
            relabel_prob: 0.6,
        }
    }

    pub fn num_predicates(&self) -> usize {
        self.roots * (1 + self.children_per_root) + self.standalone_roots
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("roots", self.roots),
            ("children_per_root", self.children_per_root),
            ("num_objects", self.num_objects),
            ("train_images", self.train_images),
            ("test_images", self.test_images),
            ("triplets_per_image", self.triplets_per_image),
        ];
        if let Some((field, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth config: {field} must be positive")));
        }
        if self.triplets_per_image > self.num_objects * self.num_objects {
            return Err(Error::Config(format!(
                "synth config: {} triplets per image exceed the {} distinct class pairs",
                self.triplets_per_image,
                self.num_objects * self.num_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.relabel_prob) {
            return Err(Error::Config(format!(
                "synth config: relabel_prob {} not in [0, 1]",
                self.relabel_prob
            )));
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return Err(Error::Config(format!(
                "synth config: zipf_exponent {} must be finite and >= 0",
                self.zipf_exponent
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SynthConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parent relation of the synthetic ontology, indexed by predicate id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParentMap {
    parent: Vec<Option<usize>>,
}

impl ParentMap {
    pub fn new(parent: Vec<Option<usize>>) -> Result<Self> {
        for (child, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= parent.len() || parent[p].is_some() || p == child {
                    return Err(Error::Config(format!(
                        "parent map: predicate {child} must point at a root, got {p}"
                    )));
                }
            }
        }
        Ok(ParentMap { parent })
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parent(&self, pred: usize) -> Option<usize> {
        self.parent[pred]
    }

    pub fn is_root(&self, pred: usize) -> bool {
        self.parent[pred].is_none()
    }

    pub fn is_informative(&self, pred: usize) -> bool {
        self.parent[pred].is_some()
    }

    pub fn common_set(&self) -> BTreeSet<usize> {
        (0..self.parent.len()).filter(|&k| self.is_root(k)).collect()
    }

    pub fn children(&self, root: usize) -> Vec<usize> {
        (0..self.parent.len()).filter(|&k| self.parent[k] == Some(root)).collect()
    }
}

/// Latent predicate of every `(subject, object)` template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateTable {
    num_objects: usize,
    latent: Vec<usize>,
}

impl TemplateTable {
    pub fn new(num_objects: usize, latent: Vec<usize>) -> Result<Self> {
        if latent.len() != num_objects * num_objects {
            return Err(Error::ShapeMismatch {
                expected: num_objects * num_objects,
                actual: latent.len(),
            });
        }
        Ok(TemplateTable { num_objects, latent })
    }

    pub fn latent(&self, subj: usize, obj: usize) -> usize {
        self.latent[subj * self.num_objects + obj]
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }
}

/// Everything the generator emits.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub parents: ParentMap,
    pub templates: TemplateTable,
    /// Counts from an independent draw with half the relabel rate, standing
    /// in for an external text corpus.
    pub corpus: FrequencyTable,
}

/// Popularity order of predicate ids: roots, the first child of every root,
/// standalone roots, then the remaining children round-robin.
pub fn popularity_order(cfg: &SynthConfig) -> Vec<usize> {
    let child = |root: usize, j: usize| cfg.roots + root * cfg.children_per_root + j;
    let standalone_base = cfg.roots * (1 + cfg.children_per_root);
    let mut order: Vec<usize> = (0..cfg.roots).collect();
    order.extend((0..cfg.roots).map(|r| child(r, 0)));
    order.extend(standalone_base..standalone_base + cfg.standalone_roots);
    for j in 1..cfg.children_per_root {
        order.extend((0..cfg.roots).map(|r| child(r, j)));
    }
    order
}

fn vocabularies(cfg: &SynthConfig) -> Result<(ObjectVocab, PredicateVocab, ParentMap)> {
    let objects = ObjectVocab::new((0..cfg.num_objects).map(|i| format!("obj{i}")).collect())?;
    let mut names: Vec<String> = (0..cfg.roots).map(|r| format!("root{r}")).collect();
    let mut parent = vec![None; cfg.roots];
    for r in 0..cfg.roots {
        for j in 0..cfg.children_per_root {
            names.push(format!("root{r}.child{j}"));
            parent.push(Some(r));
        }
    }
    for s in 0..cfg.standalone_roots {
        names.push(format!("solo{s}"));
        parent.push(None);
    }
    Ok((objects, PredicateVocab::new(names)?, ParentMap::new(parent)?))
}

fn draw_images<R: Rng>(
    rng: &mut R,
    cfg: &SynthConfig,
    templates: &TemplateTable,
    parents: &ParentMap,
    images: usize,
    first_image_id: u64,
    relabel_prob: f64,
) -> Vec<Triplet> {
    let s = cfg.num_objects;
    let mut triplets = Vec::with_capacity(images * cfg.triplets_per_image);
    for i in 0..images {
        let image_id = first_image_id + i as u64;
        let mut picked = rand::seq::index::sample(rng, s * s, cfg.triplets_per_image).into_vec();
        picked.sort_unstable();
        for template in picked {
            let (subj, obj) = (template / s, template % s);
            let latent = templates.latent(subj, obj);
            let pred = match parents.parent(latent) {
                Some(p) if relabel_prob > 0.0 && rng.gen_bool(relabel_prob) => p,
                _ => latent,
            };
            triplets.push(Triplet {
                image_id,
                subj,
                obj,
                pred,
            });
        }
    }
    triplets
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let (objects, predicates, parents) = vocabularies(cfg)?;
    let (objects, predicates) = (Arc::new(objects), Arc::new(predicates));
    let k = predicates.len();

    let mut weights = vec![0.0; k];
    for (rank, pred) in popularity_order(cfg).into_iter().enumerate() {
        weights[pred] = ((rank + 1) as f64).powf(-cfg.zipf_exponent);
    }
    let popularity = WeightedIndex::new(&weights).expect("positive Zipf weights");
    let mut rng = seeded_rng(seed, 1);
    let s = cfg.num_objects;
    let latent: Vec<usize> = (0..s * s).map(|_| popularity.sample(&mut rng)).collect();
    let templates = TemplateTable::new(s, latent)?;

    let mut train_rng = seeded_rng(seed, 2);
    let train = draw_images(
        &mut train_rng,
        cfg,
        &templates,
        &parents,
        cfg.train_images,
        0,
        cfg.relabel_prob,
    );
    let mut test_rng = seeded_rng(seed, 3);
    let test = draw_images(
        &mut test_rng,
        cfg,
        &templates,
        &parents,
        cfg.test_images,
        cfg.train_images as u64,
        0.0,
    );
    let mut corpus_rng = seeded_rng(seed, 4);
    let corpus_draw = draw_images(
        &mut corpus_rng,
        cfg,
        &templates,
        &parents,
        cfg.train_images,
        0,
        cfg.relabel_prob / 2.0,
    );
    let mut corpus_counts = vec![0u64; k];
    for t in &corpus_draw {
        corpus_counts[t.pred] += 1;
    }

    Ok(SyntheticData {
        train: Dataset::new("synthetic-train", objects.clone(), predicates.clone(), train)?,
        test: Dataset::new("synthetic-test", objects, predicates, test)?,
        parents,
        templates,
        corpus: FrequencyTable::from_counts("synthetic-corpus", corpus_counts),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleFile {
    /// `[child, parent]` name pairs.
    parents: Vec<[String; 2]>,
    roots: Vec<String>,
    /// `[subject, object, latent predicate]` for every template.
    templates: Vec<[String; 3]>,
}

/// Writes the parent map and template table as JSON.
pub fn write_oracle(data: &SyntheticData, path: &Path) -> Result<()> {
    let preds = data.train.predicates();
    let objs = data.train.objects();
    let s = data.templates.num_objects();
    let file = OracleFile {
        parents: (0..preds.len())
            .filter_map(|k| {
                data.parents
                    .parent(k)
                    .map(|p| [preds.name(k).to_string(), preds.name(p).to_string()])
            })
            .collect(),
        roots: data.parents.common_set().iter().map(|&k| preds.name(k).to_string()).collect(),
        templates: (0..s * s)
            .map(|t| {
                let (a, b) = (t / s, t % s);
                [
                    objs.name(a).to_string(),
                    objs.name(b).to_string(),
                    preds.name(data.templates.latent(a, b)).to_string(),
                ]
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json("oracle", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads an oracle file written by [`write_oracle`].
pub fn read_oracle(
    path: &Path,
    objects: &ObjectVocab,
    predicates: &PredicateVocab,
) -> Result<(ParentMap, TemplateTable)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: OracleFile = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let lookup = |vocab: &super::Vocab, name: &str| {
        vocab.id(name).ok_or_else(|| Error::UnknownClass {
            name: name.to_string(),
            line: 0,
        })
    };
    let mut parent = vec![None; predicates.len()];
    for [child, p] in &file.parents {
        parent[lookup(predicates, child)?] = Some(lookup(predicates, p)?);
    }
    let s = objects.len();
    let mut latent = vec![usize::MAX; s * s];
    for [a, b, p] in &file.templates {
        latent[lookup(objects, a)? * s + lookup(objects, b)?] = lookup(predicates, p)?;
    }
    if latent.contains(&usize::MAX) {
        return Err(Error::MissingOracle("template table is incomplete".into()));
    }
    Ok((ParentMap::new(parent)?, TemplateTable::new(s, latent)?))
}
