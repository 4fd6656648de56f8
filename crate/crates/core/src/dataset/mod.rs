//! Vocabularies, triplet datasets, annotation I/O and image-level splits.
//!
//! Datasets store class ids, never names. Names only appear at the file
//! boundary, resolved against explicit vocabulary files so that every matrix
//! and table downstream is indexed by a stable id order.

pub mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

/// An ordered list of unique class names; the position of a name is its id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn new(names: Vec<String>, min_len: usize, what: &str) -> Result<Self> {
        if names.len() < min_len {
            return Err(Error::Config(format!(
                "{what} vocabulary needs at least {min_len} names, got {}",
                names.len()
            )));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::Config(format!("{what} vocabulary entry {id} is blank")));
            }
            if index.insert(name.clone(), id).is_some() {
                return Err(Error::Config(format!(
                    "{what} vocabulary has duplicate name {name:?}"
                )));
            }
        }
        Ok(Vocab { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn read_lines(path: &Path) -> Result<Vec<String>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .filter(|l| !l.is_empty())
            .collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for name in &self.names {
            text.push_str(name);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Object classes, `S >= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectVocab(Vocab);

impl ObjectVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        Vocab::new(names, 1, "object").map(ObjectVocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(Vocab::read_lines(path)?)
    }
}

impl Deref for ObjectVocab {
    type Target = Vocab;
    fn deref(&self) -> &Vocab {
        &self.0
    }
}

/// Predicate classes, `K >= 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateVocab(Vocab);

impl PredicateVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        Vocab::new(names, 2, "predicate").map(PredicateVocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(Vocab::read_lines(path)?)
    }
}

impl Deref for PredicateVocab {
    type Target = Vocab;
    fn deref(&self) -> &Vocab {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub image_id: u64,
    pub subj: usize,
    pub obj: usize,
    pub pred: usize,
}

/// Triplet indices of one image, in input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGroup {
    pub id: u64,
    pub triplets: Vec<usize>,
}

/// Annotated triplets grouped by image.
///
/// Each `(subj, obj)` pair appears at most once per image and carries exactly
/// one gold predicate. Images are kept in order of first appearance.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    objects: Arc<ObjectVocab>,
    predicates: Arc<PredicateVocab>,
    triplets: Vec<Triplet>,
    images: Vec<ImageGroup>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.triplets == other.triplets
            && self.objects == other.objects
            && self.predicates == other.predicates
    }
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        objects: Arc<ObjectVocab>,
        predicates: Arc<PredicateVocab>,
        triplets: Vec<Triplet>,
    ) -> Result<Self> {
        let s = objects.len();
        let k = predicates.len();
        let mut order: Vec<u64> = Vec::new();
        let mut groups: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut pairs: HashSet<(u64, usize, usize)> = HashSet::with_capacity(triplets.len());
        for (i, t) in triplets.iter().enumerate() {
            for (what, id, size) in [("subject", t.subj, s), ("object", t.obj, s), ("predicate", t.pred, k)] {
                if id >= size {
                    return Err(Error::InvalidId { what, id, size });
                }
            }
            if !pairs.insert((t.image_id, t.subj, t.obj)) {
                return Err(Error::MalformedRecord {
                    line: i + 1,
                    reason: format!(
                        "image {} lists pair ({}, {}) more than once",
                        t.image_id,
                        objects.name(t.subj),
                        objects.name(t.obj)
                    ),
                });
            }
            groups
                .entry(t.image_id)
                .or_insert_with(|| {
                    order.push(t.image_id);
                    Vec::new()
                })
                .push(i);
        }
        let images = order
            .into_iter()
            .map(|id| ImageGroup {
                id,
                triplets: groups.remove(&id).unwrap_or_default(),
            })
            .collect();
        Ok(Dataset {
            name: name.into(),
            objects,
            predicates,
            triplets,
            images,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn objects(&self) -> &Arc<ObjectVocab> {
        &self.objects
    }

    pub fn predicates(&self) -> &Arc<PredicateVocab> {
        &self.predicates
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn images(&self) -> &[ImageGroup] {
        &self.images
    }

    pub fn image_triplets<'a>(&'a self, image: &'a ImageGroup) -> impl Iterator<Item = &'a Triplet> + 'a {
        image.triplets.iter().map(move |&i| &self.triplets[i])
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    /// Keeps the triplets whose index satisfies `keep`, preserving order.
    pub fn filter_indices(&self, name: impl Into<String>, keep: impl Fn(usize) -> bool) -> Dataset {
        let triplets = self
            .triplets
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, t)| *t)
            .collect();
        Dataset::new(name, self.objects.clone(), self.predicates.clone(), triplets)
            .expect("subset of a valid dataset is valid")
    }

    /// Shifts every image id by `offset`.
    pub fn offset_image_ids(&self, offset: u64) -> Dataset {
        let triplets = self
            .triplets
            .iter()
            .map(|t| Triplet {
                image_id: t.image_id + offset,
                ..*t
            })
            .collect();
        Dataset::new(self.name.clone(), self.objects.clone(), self.predicates.clone(), triplets)
            .expect("offsetting image ids preserves validity")
    }

    /// Appends `other`, which must share vocabularies and have disjoint image ids.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        self.check_same_vocab(other)?;
        let mine: HashSet<u64> = self.images.iter().map(|g| g.id).collect();
        if let Some(g) = other.images.iter().find(|g| mine.contains(&g.id)) {
            return Err(Error::Config(format!(
                "cannot concatenate datasets sharing image id {}",
                g.id
            )));
        }
        let mut triplets = self.triplets.clone();
        triplets.extend_from_slice(&other.triplets);
        Dataset::new(self.name.clone(), self.objects.clone(), self.predicates.clone(), triplets)
    }

    pub fn check_same_vocab(&self, other: &Dataset) -> Result<()> {
        if self.objects != other.objects || self.predicates != other.predicates {
            return Err(Error::VocabMismatch(format!(
                "{} and {} use different vocabularies",
                self.name, other.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    image_id: u64,
    triplets: Vec<TripletRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TripletRecord {
    subj: String,
    obj: String,
    pred: String,
}

/// Reads a JSON Lines annotation file, one image per line.
pub fn load_dataset(
    path: &Path,
    objects: Arc<ObjectVocab>,
    predicates: Arc<PredicateVocab>,
) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut triplets = Vec::new();
    let mut seen_images = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        if !seen_images.insert(record.image_id) {
            return Err(Error::MalformedRecord {
                line: line_no,
                reason: format!("image {} appears on more than one line", record.image_id),
            });
        }
        if record.triplets.is_empty() {
            return Err(Error::MalformedRecord {
                line: line_no,
                reason: format!("image {} has no triplets", record.image_id),
            });
        }
        let mut pairs = HashSet::new();
        for t in record.triplets {
            let resolve = |vocab: &Vocab, name: &str| {
                vocab.id(name).ok_or_else(|| Error::UnknownClass {
                    name: name.to_string(),
                    line: line_no,
                })
            };
            let subj = resolve(&objects, &t.subj)?;
            let obj = resolve(&objects, &t.obj)?;
            let pred = resolve(&predicates, &t.pred)?;
            if !pairs.insert((subj, obj)) {
                return Err(Error::MalformedRecord {
                    line: line_no,
                    reason: format!("pair ({}, {}) listed more than once", t.subj, t.obj),
                });
            }
            triplets.push(Triplet {
                image_id: record.image_id,
                subj,
                obj,
                pred,
            });
        }
    }
    if triplets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, objects, predicates, triplets)
}

/// Writes `dataset` in the JSON Lines format read by [`load_dataset`].
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for image in dataset.images() {
        let record = ImageRecord {
            image_id: image.id,
            triplets: dataset
                .image_triplets(image)
                .map(|t| TripletRecord {
                    subj: dataset.objects.name(t.subj).to_string(),
                    obj: dataset.objects.name(t.obj).to_string(),
                    pred: dataset.predicates.name(t.pred).to_string(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| Error::json("dataset record", e))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Image-level train/val/test split.
///
/// Fractions must be non-negative and sum to 1; a part whose fraction is
/// exactly zero may be empty, any other empty part is an error. Each part
/// keeps the input order of its images.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Config(format!("split fractions must be >= 0, got {fractions:?}")));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {fractions:?}")));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.images.len();
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    for (part, count, frac) in [("train", n_train, ft), ("val", n_val, fv), ("test", n_test, fs)] {
        if count == 0 && frac > 0.0 {
            return Err(Error::DegenerateSplit { part });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, 0x5b17));
    // position in the shuffled order decides the part
    let mut part_of = vec![0u8; n];
    for (rank, &img) in order.iter().enumerate() {
        part_of[img] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }
    let image_part: HashMap<u64, u8> = dataset
        .images
        .iter()
        .enumerate()
        .map(|(i, g)| (g.id, part_of[i]))
        .collect();
    let base = dataset.name.clone();
    let part = |p: u8, suffix: &str| {
        dataset.filter_indices(format!("{base}-{suffix}"), |i| {
            image_part[&dataset.triplets[i].image_id] == p
        })
    };
    Ok((part(0, "train"), part(1, "val"), part(2, "test")))
}

/// Per-predicate counts from one information source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub source_name: String,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl FrequencyTable {
    pub fn from_counts(source_name: impl Into<String>, counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        FrequencyTable {
            source_name: source_name.into(),
            counts,
            total,
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Elementwise sum; both tables must cover the same vocabulary.
    pub fn add(&self, other: &FrequencyTable) -> Result<FrequencyTable> {
        if self.counts.len() != other.counts.len() {
            return Err(Error::LengthMismatch {
                left: self.counts.len(),
                right: other.counts.len(),
            });
        }
        Ok(FrequencyTable::from_counts(
            format!("{}+{}", self.source_name, other.source_name),
            self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
        ))
    }
}

pub fn predicate_frequencies(dataset: &Dataset) -> Result<FrequencyTable> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0u64; dataset.num_predicates()];
    for t in dataset.triplets() {
        counts[t.pred] += 1;
    }
    Ok(FrequencyTable::from_counts(dataset.name(), counts))
}

/// Number of triplets per predicate, keyed by predicate id.
pub fn count_by_predicate(dataset: &Dataset) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for t in dataset.triplets() {
        *counts.entry(t.pred).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocabs() -> (Arc<ObjectVocab>, Arc<PredicateVocab>) {
        let objects = ObjectVocab::new(vec!["man".into(), "horse".into(), "snow".into()]).unwrap();
        let predicates =
            PredicateVocab::new(vec!["on".into(), "has".into(), "riding".into()]).unwrap();
        (Arc::new(objects), Arc::new(predicates))
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        fs::write(&path, body).unwrap();
        path
    }

    const TWO_IMAGES: &str = concat!(
        r#"{"image_id": 1, "triplets": [{"subj": "man", "obj": "horse", "pred": "riding"}, {"subj": "man", "obj": "snow", "pred": "on"}]}"#,
        "\n",
        r#"{"image_id": 2, "triplets": [{"subj": "horse", "obj": "snow", "pred": "on"}]}"#,
        "\n"
    );

    #[test]
    fn loads_two_images_three_triplets() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "d.jsonl", TWO_IMAGES);
        let (o, p) = vocabs();
        let ds = load_dataset(&path, o.clone(), p.clone()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.images().len(), 2);
        assert_eq!(ds.images()[0].triplets, vec![0, 1]);
        let again = load_dataset(&path, o, p).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn unknown_predicate_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "d.jsonl",
            "{\"image_id\": 1, \"triplets\": [{\"subj\": \"man\", \"obj\": \"snow\", \"pred\": \"flying over\"}]}\n",
        );
        let (o, p) = vocabs();
        match load_dataset(&path, o, p) {
            Err(Error::UnknownClass { name, line }) => {
                assert_eq!(name, "flying over");
                assert_eq!(line, 1);
            }
            other => panic!("expected UnknownClass, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let (o, p) = vocabs();
        let bad = write(&dir, "bad.jsonl", "{\"image_id\": 1}\n");
        assert!(matches!(
            load_dataset(&bad, o.clone(), p.clone()),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        let empty = write(&dir, "empty.jsonl", "\n");
        assert!(matches!(load_dataset(&empty, o.clone(), p.clone()), Err(Error::EmptyDataset)));
        let dup = write(
            &dir,
            "dup.jsonl",
            "{\"image_id\": 1, \"triplets\": [{\"subj\": \"man\", \"obj\": \"snow\", \"pred\": \"on\"}, {\"subj\": \"man\", \"obj\": \"snow\", \"pred\": \"has\"}]}\n",
        );
        assert!(matches!(load_dataset(&dup, o, p), Err(Error::MalformedRecord { .. })));
    }

    #[test]
    fn write_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "d.jsonl", TWO_IMAGES);
        let (o, p) = vocabs();
        let ds = load_dataset(&path, o.clone(), p.clone()).unwrap();
        let out = dir.path().join("out.jsonl");
        write_dataset(&ds, &out).unwrap();
        assert_eq!(load_dataset(&out, o, p).unwrap(), ds);
    }

    #[test]
    fn vocab_rules() {
        assert!(PredicateVocab::new(vec!["on".into()]).is_err());
        assert!(ObjectVocab::new(vec!["a".into(), "a".into()]).is_err());
        let v = PredicateVocab::new(vec!["on".into(), "has".into()]).unwrap();
        assert_eq!(v.id("has"), Some(1));
        assert_eq!(v.name(0), "on");
    }

    fn toy(images: u64) -> Dataset {
        let (o, p) = vocabs();
        let triplets = (0..images)
            .flat_map(|img| {
                [
                    Triplet { image_id: img, subj: 0, obj: 1, pred: (img % 3) as usize },
                    Triplet { image_id: img, subj: 1, obj: 2, pred: 0 },
                ]
            })
            .collect();
        Dataset::new("toy", o, p, triplets).unwrap()
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = toy(10);
        let (tr, va, te) = split(&ds, (0.7, 0.0, 0.3), 1).unwrap();
        assert_eq!((tr.images().len(), va.images().len(), te.images().len()), (7, 0, 3));
        let (tr2, va2, te2) = split(&ds, (0.7, 0.0, 0.3), 1).unwrap();
        assert_eq!((tr, va, te), (tr2, va2, te2));
    }

    #[test]
    fn split_rejects_degenerate_parts() {
        let ds = toy(2);
        assert!(matches!(
            split(&ds, (0.5, 0.2, 0.3), 0),
            Err(Error::DegenerateSplit { .. })
        ));
        assert!(matches!(split(&ds, (0.5, 0.2, 0.2), 0), Err(Error::Config(_))));
    }

    #[test]
    fn frequencies_count_predicates() {
        let (o, p) = vocabs();
        let ds = Dataset::new(
            "x",
            o,
            p,
            vec![
                Triplet { image_id: 0, subj: 0, obj: 1, pred: 0 },
                Triplet { image_id: 0, subj: 1, obj: 2, pred: 0 },
                Triplet { image_id: 1, subj: 0, obj: 1, pred: 1 },
            ],
        )
        .unwrap();
        let f = predicate_frequencies(&ds).unwrap();
        assert_eq!(f.counts, vec![2, 1, 0]);
        assert_eq!(f.total, 3);
        assert_eq!(f.source_name, "x");

        let doubled = ds.concat(&ds.offset_image_ids(100)).unwrap();
        assert_eq!(predicate_frequencies(&doubled).unwrap().counts, vec![4, 2, 0]);
        assert!(ds.concat(&ds).is_err());
    }

    #[test]
    fn invalid_ids_rejected() {
        let (o, p) = vocabs();
        let err = Dataset::new("x", o, p, vec![Triplet { image_id: 0, subj: 0, obj: 9, pred: 0 }]);
        assert!(matches!(err, Err(Error::InvalidId { .. })));
    }
}
