//! The staged experiment runner.
//!
//! Each stage reads its inputs from the output directory (or the configured
//! data files) and writes its artifacts back there, so any stage can be
//! rerun in isolation and every intermediate result can be audited.
//!
//! | stage              | writes                                                    |
//! |--------------------|-----------------------------------------------------------|
//! | `synth`            | train/test JSONL, vocabularies, oracle, corpus counts, stats |
//! | `train-source`     | `stage1.json`, `stage1_loss.csv`                          |
//! | `build-transition` | confusion, `C'` and `C*` CSVs, `transition.json`          |
//! | `build-target`     | `target.jsonl`, `domain_spec.json`                        |
//! | `finetune`         | `stage2.json`, `stage2_loss.csv`                          |
//! | `eval`             | `metrics_<label>.{json,csv}`, `confusion_<label>.csv`     |
//!
//! `+` in labels becomes `_` in file names.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjust::{
    build_transition, predict_confusion, row_normalize, write_real_csv, AdjustedScorer, Orientation,
    ScoreMap, TransitionMatrix,
};
use crate::balance::{
    build_target_domain, information_content, load_corpus_counts, partition, write_corpus_counts, DomainSpec,
    ICTable, Strategy,
};
use crate::dataset::synth::{generate_synthetic, popularity_order, write_oracle, SynthConfig};
use crate::dataset::{
    load_dataset, predicate_frequencies, split, write_dataset, Dataset, FrequencyTable, ObjectVocab, PredicateVocab,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_confusion_by_ic, MetricsReport};
use crate::freq_model::FreqModel;
use crate::head::{train, HeadModel, TrainConfig, TrainOutcome};
use crate::Scorer;

/// File names inside the output directory.
pub mod files {
    pub const TRAIN: &str = "train.jsonl";
    pub const TEST: &str = "test.jsonl";
    pub const OBJECTS: &str = "objects.txt";
    pub const PREDICATES: &str = "predicates.txt";
    pub const ORACLE: &str = "parent_map.json";
    pub const CORPUS: &str = "corpus_counts.tsv";
    pub const SYNTH_STATS: &str = "synth_stats.json";
    pub const STAGE1: &str = "stage1.json";
    pub const STAGE1_LOSS: &str = "stage1_loss.csv";
    pub const FREQ_MODEL: &str = "freq_model.json";
    pub const CONFUSION: &str = "confusion.csv";
    pub const C_PRIME: &str = "c_prime.csv";
    pub const TRANSITION_CSV: &str = "transition.csv";
    pub const TRANSITION: &str = "transition.json";
    pub const TARGET: &str = "target.jsonl";
    pub const DOMAIN_SPEC: &str = "domain_spec.json";
    pub const STAGE2: &str = "stage2.json";
    pub const STAGE2_LOSS: &str = "stage2_loss.csv";
    pub const STAGE2_BPL: &str = "stage2_bpl.json";
    pub const STAGE2_SA: &str = "stage2_sa.json";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_CSV: &str = "report.csv";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generate a synthetic corpus with a known ontology.
    Synth(SynthConfig),
    /// Annotated JSONL plus vocabularies, split by image.
    Files(FileSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub dataset: PathBuf,
    pub objects: PathBuf,
    pub predicates: PathBuf,
    /// Train / validation / test fractions.
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.0, 0.3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub momentum: f64,
}

impl StageConfig {
    fn stage1() -> Self {
        StageConfig {
            epochs: 40,
            batch_size: 32,
            step_size: 0.05,
            momentum: 0.9,
        }
    }

    fn stage2() -> Self {
        StageConfig {
            epochs: 10,
            batch_size: 32,
            step_size: 0.05,
            momentum: 0.9,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            step_size: self.step_size,
            momentum: self.momentum,
            seed,
            ..TrainConfig::default()
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::stage1()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Stage 2 updates only the recognition layer.
    pub freeze_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            freeze_embedding: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub orientation: Orientation,
    /// Additive smoothing of the frequency model that produces the confusion.
    pub smoothing: f64,
    /// Also compute the stage-2 loss on adjusted scores.
    pub in_training: bool,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            enabled: true,
            alpha: 1.0,
            orientation: Orientation::default(),
            smoothing: 1.0,
            in_training: true,
        }
    }
}

/// Where predicate frequencies come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcSource {
    /// Training-split label counts.
    Dataset,
    /// The external counts file.
    Corpus,
    /// Training-split and corpus counts pooled.
    General,
}

impl IcSource {
    pub fn as_str(self) -> &'static str {
        match self {
            IcSource::Dataset => "dataset",
            IcSource::Corpus => "corpus",
            IcSource::General => "general",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BplConfig {
    pub m: usize,
    pub n: usize,
    pub strategy: Strategy,
    pub ic_source: IcSource,
    pub base: f64,
}

impl Default for BplConfig {
    fn default() -> Self {
        BplConfig {
            m: 3,
            n: 200,
            strategy: Strategy::Random,
            ic_source: IcSource::Dataset,
            base: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub ic_sources: Vec<IcSource>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: crate::eval::DEFAULT_KS.to_vec(),
            ic_sources: vec![IcSource::Dataset, IcSource::Corpus],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSource,
    /// Overrides the generated counts file for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_counts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sa: SaConfig,
    #[serde(default)]
    pub bpl: BplConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    /// Reference synthetic setup with default model, SA and BPL settings.
    pub fn reference(seed: u64) -> Self {
        PipelineConfig {
            data: DataSource::Synth(SynthConfig::reference()),
            corpus_counts: None,
            out_dir: None,
            model: ModelConfig::default(),
            sa: SaConfig::default(),
            bpl: BplConfig::default(),
            eval: EvalConfig::default(),
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("pipeline config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Synth(s) => s.validate()?,
            DataSource::Files(f) => {
                let [a, b, c] = f.fractions;
                if f.fractions.iter().any(|v| !(0.0..=1.0).contains(v)) || (a + b + c - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("fractions must be in [0, 1] and sum to 1, got {:?}", f.fractions)));
                }
                if a == 0.0 || c == 0.0 {
                    return Err(Error::Config("train and test fractions must be positive".into()));
                }
            }
        }
        if self.model.hidden == 0 {
            return Err(Error::Config("model.hidden must be >= 1".into()));
        }
        for (name, stage) in [("stage1", &self.model.stage1), ("stage2", &self.model.stage2)] {
            stage
                .train_config(0)
                .validate(2)
                .map_err(|e| Error::Config(format!("model.{name}: {e}")))?;
        }
        if !(self.sa.alpha >= 0.0 && self.sa.alpha.is_finite()) {
            return Err(Error::InvalidAlpha(self.sa.alpha));
        }
        if !(self.sa.smoothing >= 0.0 && self.sa.smoothing.is_finite()) {
            return Err(Error::Config(format!("sa.smoothing must be >= 0, got {}", self.sa.smoothing)));
        }
        if self.bpl.m == 0 || self.bpl.n == 0 {
            return Err(Error::Config("bpl.m and bpl.n must be >= 1".into()));
        }
        if !(self.bpl.base > 1.0 && self.bpl.base.is_finite()) {
            return Err(Error::InvalidBase(self.bpl.base));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty and >= 1".into()));
        }
        let needs_corpus = self.bpl.ic_source != IcSource::Dataset
            || self.eval.ic_sources.iter().any(|s| *s != IcSource::Dataset);
        if needs_corpus && matches!(self.data, DataSource::Files(_)) && self.corpus_counts.is_none() {
            return Err(Error::Config("corpus IC source requires corpus_counts".into()));
        }
        Ok(())
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Named ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Alpha,
    TransitionVariant,
    Strategy,
    TrainingApproach,
    IcSource,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Alpha,
        Ablation::TransitionVariant,
        Ablation::Strategy,
        Ablation::TrainingApproach,
        Ablation::IcSource,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Alpha => "alpha",
            Ablation::TransitionVariant => "transition-variant",
            Ablation::Strategy => "strategy",
            Ablation::TrainingApproach => "training-approach",
            Ablation::IcSource => "ic-source",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownAblation(s.to_string()))
    }
}

/// Alpha grid of the alpha sweep.
pub const ALPHA_GRID: [f64; 4] = [0.0, 0.3, 0.6, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ablation: String,
    pub rows: Vec<MetricsReport>,
}

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.label == setting)
    }
}

/// The baseline, BPL and BPL+SA comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub domain_spec: serde_json::Value,
    pub rows: Vec<MetricsReport>,
}

impl Report {
    pub fn row(&self, label: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.label == label)
    }
}

pub const BASELINE: &str = "baseline";
pub const BPL: &str = "bpl";
pub const BPL_SA: &str = "bpl+sa";

/// Audit record of a target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAudit {
    pub ic_source: String,
    pub spec: DomainSpec,
    pub common: Vec<String>,
    pub informative: Vec<String>,
    pub kept: Vec<KeptCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptCount {
    pub predicate: String,
    pub source: u64,
    pub kept: u64,
}

/// Summary statistics of a generated synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub seed: u64,
    pub relabel_prob: f64,
    pub zipf_exponent: f64,
    /// Fraction of child-template train triplets carrying the parent label.
    pub observed_relabel_rate: f64,
    /// Least-squares slope of log template count on log popularity rank, negated.
    pub fitted_zipf_exponent: f64,
    /// Templates per latent predicate, in popularity order.
    pub templates_by_rank: Vec<KeptCount>,
    pub train_counts: BTreeMap<String, u64>,
    pub test_counts: BTreeMap<String, u64>,
}

/// Loaded data shared by the stages.
#[derive(Debug, Clone)]
pub struct Data {
    pub objects: Arc<ObjectVocab>,
    pub predicates: Arc<PredicateVocab>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Content hash in git blob style: SHA-256 of `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{}", hex::encode(h.finalize()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    write_text(path, &(text + "\n"))
}

fn write_csv_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_loss(path: &Path, history: &[f64]) -> Result<()> {
    let mut rows = vec![vec!["epoch".to_string(), "loss".to_string()]];
    rows.extend(history.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]));
    write_csv_rows(path, &rows)
}

/// Model used at evaluation time.
enum Adjust {
    None,
    Fixed(TransitionMatrix),
    Learned(ScoreMap),
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
}

impl Pipeline {
    /// `out` overrides `cfg.out_dir`; the directory is created if needed.
    pub fn new(cfg: PipelineConfig, out: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Pipeline { cfg, out })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn seed(&self, offset: u64) -> u64 {
        self.cfg.seed.wrapping_add(offset)
    }

    /// Generates the synthetic corpus into the output directory.
    pub fn synth(&self) -> Result<SynthStats> {
        let DataSource::Synth(scfg) = &self.cfg.data else {
            return Err(Error::Config("synth requires a synthetic data source".into()));
        };
        let data = generate_synthetic(scfg, self.cfg.seed)?;
        data.train.objects().write(&self.path(files::OBJECTS))?;
        data.train.predicates().write(&self.path(files::PREDICATES))?;
        write_dataset(&data.train, &self.path(files::TRAIN))?;
        write_dataset(&data.test, &self.path(files::TEST))?;
        write_oracle(&data, &self.path(files::ORACLE))?;
        write_corpus_counts(&data.corpus, data.train.predicates(), &self.path(files::CORPUS))?;

        let names = data.train.predicates().names();
        let k = names.len();
        let mut child_total = 0u64;
        let mut child_relabeled = 0u64;
        for t in data.train.triplets() {
            let latent = data.templates.latent(t.subj, t.obj);
            if data.parents.parent(latent).is_some() {
                child_total += 1;
                child_relabeled += u64::from(t.pred != latent);
            }
        }
        let s = data.templates.num_objects();
        let mut per_pred = vec![0u64; k];
        for a in 0..s {
            for b in 0..s {
                per_pred[data.templates.latent(a, b)] += 1;
            }
        }
        let order = popularity_order(scfg);
        let points: Vec<(f64, f64)> = order
            .iter()
            .enumerate()
            .filter(|(_, &p)| per_pred[p] > 0)
            .map(|(rank, &p)| (((rank + 1) as f64).ln(), (per_pred[p] as f64).ln()))
            .collect();
        let counts = |ds: &Dataset| {
            let mut c = vec![0u64; k];
            for t in ds.triplets() {
                c[t.pred] += 1;
            }
            names.iter().cloned().zip(c).collect::<BTreeMap<_, _>>()
        };
        let stats = SynthStats {
            seed: self.cfg.seed,
            relabel_prob: scfg.relabel_prob,
            zipf_exponent: scfg.zipf_exponent,
            observed_relabel_rate: if child_total == 0 {
                0.0
            } else {
                child_relabeled as f64 / child_total as f64
            },
            fitted_zipf_exponent: -least_squares_slope(&points),
            templates_by_rank: order
                .iter()
                .map(|&p| KeptCount {
                    predicate: names[p].clone(),
                    source: per_pred[p],
                    kept: per_pred[p],
                })
                .collect(),
            train_counts: counts(&data.train),
            test_counts: counts(&data.test),
        };
        write_json(&self.path(files::SYNTH_STATS), &stats)?;
        Ok(stats)
    }

    fn input_paths(&self) -> Vec<(String, PathBuf)> {
        match &self.cfg.data {
            DataSource::Synth(_) => [files::OBJECTS, files::PREDICATES, files::TRAIN, files::TEST]
                .into_iter()
                .map(|n| (n.to_string(), self.path(n)))
                .collect(),
            DataSource::Files(f) => [&f.objects, &f.predicates, &f.dataset]
                .into_iter()
                .map(|p| (p.display().to_string(), p.clone()))
                .collect(),
        }
    }

    pub fn load_data(&self) -> Result<Data> {
        match &self.cfg.data {
            DataSource::Synth(_) => {
                let objects = Arc::new(ObjectVocab::load(&self.path(files::OBJECTS))?);
                let predicates = Arc::new(PredicateVocab::load(&self.path(files::PREDICATES))?);
                let train = load_dataset(&self.path(files::TRAIN), objects.clone(), predicates.clone())?;
                let test = load_dataset(&self.path(files::TEST), objects.clone(), predicates.clone())?;
                Ok(Data {
                    objects,
                    predicates,
                    train: train.with_name("train"),
                    test: test.with_name("test"),
                })
            }
            DataSource::Files(f) => {
                let objects = Arc::new(ObjectVocab::load(&f.objects)?);
                let predicates = Arc::new(PredicateVocab::load(&f.predicates)?);
                let all = load_dataset(&f.dataset, objects.clone(), predicates.clone())?;
                let [a, b, c] = f.fractions;
                let (train, _, test) = split(&all, (a, b, c), self.cfg.seed)?;
                Ok(Data {
                    objects,
                    predicates,
                    train,
                    test,
                })
            }
        }
    }

    fn corpus_path(&self) -> Option<PathBuf> {
        match (&self.cfg.corpus_counts, &self.cfg.data) {
            (Some(p), _) => Some(p.clone()),
            (None, DataSource::Synth(_)) => Some(self.path(files::CORPUS)),
            (None, DataSource::Files(_)) => None,
        }
    }

    pub fn frequencies(&self, source: IcSource, data: &Data) -> Result<FrequencyTable> {
        let corpus = || -> Result<FrequencyTable> {
            let path = self
                .corpus_path()
                .ok_or_else(|| Error::Config("corpus IC source requires corpus_counts".into()))?;
            load_corpus_counts(&path, &data.predicates)
        };
        let mut table = match source {
            IcSource::Dataset => predicate_frequencies(&data.train)?,
            IcSource::Corpus => corpus()?,
            IcSource::General => predicate_frequencies(&data.train)?.add(&corpus()?)?,
        };
        table.source_name = source.as_str().to_string();
        Ok(table)
    }

    pub fn ic_table(&self, source: IcSource, data: &Data) -> Result<ICTable> {
        information_content(&self.frequencies(source, data)?, self.cfg.bpl.base)
    }

    /// Stage 1: trains the head on the full training split.
    pub fn train_source(&self) -> Result<TrainOutcome> {
        let data = self.load_data()?;
        let outcome = self.train_scratch(&data.train, &data)?;
        outcome.model.save(&self.path(files::STAGE1))?;
        write_loss(&self.path(files::STAGE1_LOSS), &outcome.loss_history)?;
        Ok(outcome)
    }

    fn train_scratch(&self, dataset: &Dataset, data: &Data) -> Result<TrainOutcome> {
        let model = HeadModel::init(data.objects.len(), data.predicates.len(), self.cfg.model.hidden, self.seed(0))?;
        train(&model, dataset, &self.cfg.model.stage1.train_config(self.seed(0)))
    }

    /// Confusion of the frequency model on train and the derived transition.
    pub fn build_transition(&self) -> Result<TransitionMatrix> {
        let data = self.load_data()?;
        let names = data.predicates.names();
        let k = names.len();
        let freq = FreqModel::fit(&data.train, self.cfg.sa.smoothing)?;
        freq.save(&self.path(files::FREQ_MODEL))?;
        let confusion = predict_confusion(&freq, &data.train)?;
        confusion.write_csv(&self.path(files::CONFUSION), names)?;
        let c_prime = row_normalize(&confusion.as_real(), k)?;
        write_real_csv(&self.path(files::C_PRIME), names, &c_prime, k)?;
        let bytes = std::fs::read(self.path(files::CONFUSION)).map_err(|e| Error::io(self.path(files::CONFUSION), e))?;
        let t = build_transition(&c_prime, k, self.cfg.sa.alpha, format!("{} {}", files::CONFUSION, content_hash(&bytes)))?;
        t.write_csv(&self.path(files::TRANSITION_CSV), names)?;
        write_text(&self.path(files::TRANSITION), &(t.to_json(names)? + "\n"))?;
        Ok(t)
    }

    fn c_prime(&self, data: &Data) -> Result<Vec<f64>> {
        let freq = FreqModel::fit(&data.train, self.cfg.sa.smoothing)?;
        let confusion = predict_confusion(&freq, &data.train)?;
        row_normalize(&confusion.as_real(), data.predicates.len())
    }

    pub fn load_transition(&self, path: &Path, data: &Data) -> Result<TransitionMatrix> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TransitionMatrix::from_json(&text, data.predicates.names())
    }

    pub fn load_model(&self, path: &Path, data: &Data) -> Result<HeadModel> {
        let model = HeadModel::load(path)?;
        if model.num_objects() != data.objects.len() || model.num_predicates() != data.predicates.len() {
            return Err(Error::VocabMismatch(format!("{} does not match the vocabularies", path.display())));
        }
        Ok(model)
    }

    fn domain_spec(&self, source: IcSource, strategy: Strategy, data: &Data) -> Result<DomainSpec> {
        let ic = self.ic_table(source, data)?;
        Ok(partition(&ic, self.cfg.bpl.m)?
            .with_cap(self.cfg.bpl.n)
            .with_strategy(strategy)
            .with_seed(self.cfg.seed))
    }

    fn target_for(&self, spec: &DomainSpec, data: &Data, stage1: Option<&HeadModel>) -> Result<Dataset> {
        build_target_domain(&data.train, spec, stage1.map(|m| m as &dyn Scorer))
    }

    /// Stage 2: separation undersampling of train.
    pub fn build_target(&self) -> Result<DomainAudit> {
        let data = self.load_data()?;
        let spec = self.domain_spec(self.cfg.bpl.ic_source, self.cfg.bpl.strategy, &data)?;
        let stage1 = match spec.strategy {
            Strategy::Confidence => Some(self.load_model(&self.path(files::STAGE1), &data)?),
            Strategy::Random => None,
        };
        let target = self.target_for(&spec, &data, stage1.as_ref())?;
        write_dataset(&target, &self.path(files::TARGET))?;
        let audit = audit(self.cfg.bpl.ic_source, spec, &data.train, &target);
        write_json(&self.path(files::DOMAIN_SPEC), &audit)?;
        Ok(audit)
    }

    pub fn load_target(&self, data: &Data) -> Result<Dataset> {
        Ok(load_dataset(&self.path(files::TARGET), data.objects.clone(), data.predicates.clone())?.with_name("target"))
    }

    fn stage2_config(&self, freeze: bool) -> TrainConfig {
        TrainConfig {
            freeze_embedding: freeze,
            orientation: self.cfg.sa.orientation,
            ..self.cfg.model.stage2.train_config(self.seed(1))
        }
    }

    fn finetune_with(
        &self,
        start: &HeadModel,
        target: &Dataset,
        transition: Option<&TransitionMatrix>,
        trainable: bool,
        freeze: bool,
    ) -> Result<TrainOutcome> {
        let cfg = TrainConfig {
            transition: transition.cloned(),
            trainable_transition: trainable,
            ..self.stage2_config(freeze)
        };
        train(start, target, &cfg)
    }

    /// Stage 3 with the configured SA setting; writes `stage2.json`.
    pub fn finetune(&self) -> Result<TrainOutcome> {
        self.finetune_to(self.cfg.sa.enabled, files::STAGE2)
    }

    /// Stage 3 from `stage1.json` on `target.jsonl`, optionally with SA in the loss.
    pub fn finetune_to(&self, with_sa: bool, file: &str) -> Result<TrainOutcome> {
        let data = self.load_data()?;
        let start = self.load_model(&self.path(files::STAGE1), &data)?;
        let target = self.load_target(&data)?;
        let transition = if with_sa && self.cfg.sa.in_training {
            Some(self.load_transition(&self.path(files::TRANSITION), &data)?)
        } else {
            None
        };
        let outcome = self.finetune_with(&start, &target, transition.as_ref(), false, self.cfg.model.freeze_embedding)?;
        let path = self.path(file);
        outcome.model.save(&path)?;
        let loss = path.with_file_name(format!(
            "{}_loss.csv",
            path.file_stem().and_then(|s| s.to_str()).unwrap_or("stage2")
        ));
        write_loss(&loss, &outcome.loss_history)?;
        Ok(outcome)
    }

    fn hashes(&self, extra: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut paths = self.input_paths();
        paths.extend(extra.iter().map(|p| (self.display_name(p), p.clone())));
        for (name, path) in paths {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(name, content_hash(&bytes));
        }
        Ok(out)
    }

    fn display_name(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .unwrap_or(path)
            .display()
            .to_string()
    }

    fn ic_tables(&self, data: &Data) -> Result<Vec<ICTable>> {
        self.cfg.eval.ic_sources.iter().map(|&s| self.ic_table(s, data)).collect()
    }

    fn domain_spec_value(&self) -> serde_json::Value {
        std::fs::read_to_string(self.path(files::DOMAIN_SPEC))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or(serde_json::Value::Null)
    }

    fn score(&self, model: &HeadModel, adjust: &Adjust, data: &Data, ics: &[ICTable], label: &str) -> Result<MetricsReport> {
        let ks = &self.cfg.eval.ks;
        match adjust {
            Adjust::None => evaluate(model, &data.test, ks, ics, label),
            Adjust::Fixed(t) => {
                let scorer = AdjustedScorer {
                    inner: model,
                    map: t.score_map(self.cfg.sa.orientation),
                };
                evaluate(&scorer, &data.test, ks, ics, label)
            }
            Adjust::Learned(map) => {
                let scorer = AdjustedScorer {
                    inner: model,
                    map: map.clone(),
                };
                evaluate(&scorer, &data.test, ks, ics, label)
            }
        }
    }

    /// Evaluates a checkpoint on test, optionally through a transition.
    ///
    /// Writes `metrics_<label>.json`, `metrics_<label>.csv` and
    /// `confusion_<label>.csv` (rows ordered by ascending information content).
    pub fn eval(&self, checkpoint: &Path, transition: Option<&Path>, label: &str) -> Result<MetricsReport> {
        let data = self.load_data()?;
        let model = self.load_model(checkpoint, &data)?;
        let adjust = match transition {
            Some(p) => Adjust::Fixed(self.load_transition(p, &data)?),
            None => Adjust::None,
        };
        let ics = self.ic_tables(&data)?;
        let mut report = self.score(&model, &adjust, &data, &ics, label)?;
        let mut extra = vec![checkpoint.to_path_buf()];
        extra.extend(transition.map(Path::to_path_buf));
        if let Some(c) = self.corpus_path().filter(|p| p.exists()) {
            extra.push(c);
        }
        self.annotate(&mut report, &extra)?;
        let stem = file_label(label);
        write_json(&self.path(&format!("metrics_{stem}.json")), &report)?;
        write_csv_rows(
            &self.path(&format!("metrics_{stem}.csv")),
            &[report.summary_header(), report.summary_row()],
        )?;

        let confusion = match &adjust {
            Adjust::Fixed(t) => predict_confusion(
                &AdjustedScorer {
                    inner: &model,
                    map: t.score_map(self.cfg.sa.orientation),
                },
                &data.test,
            )?,
            _ => predict_confusion(&model, &data.test)?,
        };
        let order_ic = match ics.first() {
            Some(ic) => ic.clone(),
            None => self.ic_table(IcSource::Dataset, &data)?,
        };
        write_confusion_by_ic(
            &confusion,
            &order_ic,
            data.predicates.names(),
            &self.path(&format!("confusion_{stem}.csv")),
        )?;
        Ok(report)
    }

    fn annotate(&self, report: &mut MetricsReport, extra: &[PathBuf]) -> Result<()> {
        report.config = self.cfg.echo();
        report.input_hashes = serde_json::to_value(self.hashes(extra)?).expect("map serializes");
        report.domain_spec = self.domain_spec_value();
        Ok(())
    }

    /// Runs synth (for synthetic data), stage 1, the transition and the target domain.
    pub fn prepare(&self) -> Result<()> {
        if matches!(self.cfg.data, DataSource::Synth(_)) {
            self.synth()?;
        }
        self.train_source()?;
        self.build_transition()?;
        self.build_target()?;
        Ok(())
    }

    /// Full pipeline: baseline, BPL and BPL+SA rows.
    pub fn report(&self) -> Result<Report> {
        self.prepare()?;
        self.finetune_to(false, files::STAGE2_BPL)?;
        self.finetune_to(true, files::STAGE2_SA)?;
        let transition = self.path(files::TRANSITION);
        let rows = vec![
            self.eval(&self.path(files::STAGE1), None, BASELINE)?,
            self.eval(&self.path(files::STAGE2_BPL), None, BPL)?,
            self.eval(&self.path(files::STAGE2_SA), Some(&transition), BPL_SA)?,
        ];
        let mut extra: Vec<PathBuf> = [files::STAGE1, files::STAGE2_BPL, files::STAGE2_SA, files::TRANSITION, files::TARGET]
            .into_iter()
            .map(|n| self.path(n))
            .collect();
        if let Some(c) = self.corpus_path().filter(|p| p.exists()) {
            extra.push(c);
        }
        let report = Report {
            config: self.cfg.echo(),
            input_hashes: self.hashes(&extra)?,
            domain_spec: self.domain_spec_value(),
            rows,
        };
        write_json(&self.path(files::REPORT_JSON), &report)?;
        let mut table = vec![report.rows[0].summary_header()];
        table.extend(report.rows.iter().map(MetricsReport::summary_row));
        write_csv_rows(&self.path(files::REPORT_CSV), &table)?;
        Ok(report)
    }

    /// Runs a named sweep; with `prepare` the upstream stages run first,
    /// otherwise their artifacts must already exist.
    pub fn ablate(&self, which: Ablation, prepare: bool) -> Result<AblationTable> {
        if prepare {
            self.prepare()?;
        }
        let data = self.load_data()?;
        let stage1 = self.load_model(&self.path(files::STAGE1), &data)?;
        let target = self.load_target(&data)?;
        let ics = self.ic_tables(&data)?;
        let transition = self.load_transition(&self.path(files::TRANSITION), &data)?;
        let sa = self.cfg.sa.enabled;
        let freeze = self.cfg.model.freeze_embedding;
        let k = data.predicates.len();

        // Trains with SA per config and evaluates consistently.
        let run_sa = |start: &HeadModel, target: &Dataset, t: &TransitionMatrix, freeze: bool, label: &str| {
            let in_loss = (sa && self.cfg.sa.in_training).then_some(t);
            let outcome = self.finetune_with(start, target, in_loss, false, freeze)?;
            let adjust = if sa { Adjust::Fixed(t.clone()) } else { Adjust::None };
            self.score(&outcome.model, &adjust, &data, &ics, label)
        };

        let mut rows = Vec::new();
        match which {
            Ablation::Alpha => {
                let c_prime = self.c_prime(&data)?;
                for alpha in ALPHA_GRID {
                    let t = build_transition(&c_prime, k, alpha, transition.provenance())?;
                    let in_loss = self.cfg.sa.in_training.then_some(&t);
                    let outcome = self.finetune_with(&stage1, &target, in_loss, false, freeze)?;
                    rows.push(self.score(&outcome.model, &Adjust::Fixed(t), &data, &ics, &format!("{alpha:.1}"))?);
                }
            }
            Ablation::TransitionVariant => {
                let plain = self.finetune_with(&stage1, &target, None, false, freeze)?;
                rows.push(self.score(&plain.model, &Adjust::None, &data, &ics, "none")?);
                let random = TransitionMatrix::random(k, self.cfg.seed);
                for (label, init) in [("random-trainable", &random), ("sa-trainable", &transition)] {
                    let outcome = self.finetune_with(&stage1, &target, Some(init), true, freeze)?;
                    let map = outcome.learned_map.clone().expect("trainable run returns its map");
                    rows.push(self.score(&outcome.model, &Adjust::Learned(map), &data, &ics, label)?);
                }
                let fixed = self.finetune_with(&stage1, &target, Some(&transition), false, freeze)?;
                rows.push(self.score(&fixed.model, &Adjust::Fixed(transition.clone()), &data, &ics, "sa-fixed")?);
                let flipped = Pipeline {
                    cfg: PipelineConfig {
                        sa: SaConfig {
                            orientation: match self.cfg.sa.orientation {
                                Orientation::GoldFromPredicted => Orientation::PredictedToGold,
                                Orientation::PredictedToGold => Orientation::GoldFromPredicted,
                            },
                            ..self.cfg.sa.clone()
                        },
                        ..self.cfg.clone()
                    },
                    out: self.out.clone(),
                };
                let outcome = flipped.finetune_with(&stage1, &target, Some(&transition), false, freeze)?;
                rows.push(flipped.score(
                    &outcome.model,
                    &Adjust::Fixed(transition.clone()),
                    &data,
                    &ics,
                    "sa-fixed-transposed",
                )?);
            }
            Ablation::Strategy => {
                for (label, strategy) in [("random", Strategy::Random), ("confidence", Strategy::Confidence)] {
                    let spec = self.domain_spec(self.cfg.bpl.ic_source, strategy, &data)?;
                    let domain = self.target_for(&spec, &data, Some(&stage1))?;
                    rows.push(run_sa(&stage1, &domain, &transition, freeze, label)?);
                }
            }
            Ablation::TrainingApproach => {
                let in_loss = (sa && self.cfg.sa.in_training).then_some(&transition);
                let fresh =
                    HeadModel::init(data.objects.len(), k, self.cfg.model.hidden, self.seed(0))?;
                let cfg = TrainConfig {
                    transition: in_loss.cloned(),
                    orientation: self.cfg.sa.orientation,
                    ..self.cfg.model.stage1.train_config(self.seed(1))
                };
                let scratch = train(&fresh, &target, &cfg)?;
                let adjust = if sa { Adjust::Fixed(transition.clone()) } else { Adjust::None };
                rows.push(self.score(&scratch.model, &adjust, &data, &ics, "scratch")?);
                rows.push(run_sa(&stage1, &target, &transition, false, "full-finetune")?);
                rows.push(run_sa(&stage1, &target, &transition, true, "head-only")?);
            }
            Ablation::IcSource => {
                for source in [IcSource::General, IcSource::Corpus, IcSource::Dataset] {
                    let spec = self.domain_spec(source, self.cfg.bpl.strategy, &data)?;
                    let domain = self.target_for(&spec, &data, Some(&stage1))?;
                    rows.push(run_sa(&stage1, &domain, &transition, freeze, source.as_str())?);
                }
            }
        }

        let mut extra: Vec<PathBuf> = [files::STAGE1, files::TRANSITION, files::TARGET]
            .into_iter()
            .map(|n| self.path(n))
            .collect();
        if let Some(c) = self.corpus_path().filter(|p| p.exists()) {
            extra.push(c);
        }
        for row in &mut rows {
            self.annotate(row, &extra)?;
        }
        let table = AblationTable {
            ablation: which.to_string(),
            rows,
        };
        let mut csv_rows = vec![std::iter::once("ablation".to_string())
            .chain(table.rows[0].summary_header())
            .collect::<Vec<_>>()];
        for r in &table.rows {
            csv_rows.push(std::iter::once(which.to_string()).chain(r.summary_row()).collect());
        }
        write_csv_rows(&self.path(&format!("ablation_{which}.csv")), &csv_rows)?;
        write_json(&self.path(&format!("ablation_{which}.json")), &table)?;
        Ok(table)
    }
}

fn audit(source: IcSource, spec: DomainSpec, train: &Dataset, target: &Dataset) -> DomainAudit {
    let names = train.predicates().names();
    let count = |ds: &Dataset| {
        let mut c = vec![0u64; names.len()];
        for t in ds.triplets() {
            c[t.pred] += 1;
        }
        c
    };
    let (before, after) = (count(train), count(target));
    DomainAudit {
        ic_source: source.as_str().to_string(),
        common: spec.common.iter().map(|&k| names[k].clone()).collect(),
        informative: spec.informative.iter().map(|&k| names[k].clone()).collect(),
        kept: (0..names.len())
            .map(|k| KeptCount {
                predicate: names[k].clone(),
                source: before[k],
                kept: after[k],
            })
            .collect(),
        spec,
    }
}

/// Label as used in artifact file names.
pub fn file_label(label: &str) -> String {
    label.replace('+', "_")
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
