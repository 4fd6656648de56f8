//! Transition and target-domain behaviour on heavily relabeled synthetic data.

mod oracles;

use oracles::*;
use sgg_balance::adjust::{AdjustedScorer, Orientation};
use sgg_balance::balance::{build_target_domain, Strategy};
use sgg_balance::pipeline::{files, DataSource, Pipeline, PipelineConfig};
use sgg_balance::{argmax, Scorer};

fn relabeled(seed: u64, dir: &std::path::Path) -> Pipeline {
    let mut cfg = PipelineConfig::reference(seed);
    if let DataSource::Synth(s) = &mut cfg.data {
        s.relabel_prob = 0.8;
    }
    let p = Pipeline::new(cfg, Some(dir.to_path_buf())).unwrap();
    p.synth().unwrap();
    p.train_source().unwrap();
    p
}

#[test]
fn adjustment_does_not_lose_informative_predictions() {
    for seed in 1..=5 {
        let dir = tempfile::tempdir().unwrap();
        let p = relabeled(seed, dir.path());
        let t = p.build_transition().unwrap();
        let data = p.load_data().unwrap();
        let ontology = load_ontology(&p.path(files::ORACLE), data.objects.names(), data.predicates.names()).unwrap();
        let model = p.load_model(&p.path(files::STAGE1), &data).unwrap();
        let adjusted = AdjustedScorer {
            inner: &model,
            map: t.score_map(Orientation::GoldFromPredicted),
        };
        let predict = |s: &dyn Scorer| -> Vec<Gold> {
            data.test
                .triplets()
                .iter()
                .map(|x| (x.subj, x.obj, argmax(&s.scores(x.subj, x.obj).unwrap())))
                .collect()
        };
        let raw = oracle_informative_recovery(&predict(&model), Some(&ontology)).unwrap();
        let adj = oracle_informative_recovery(&predict(&adjusted), Some(&ontology)).unwrap();
        assert!(adj >= raw, "seed {seed}: adjusted {adj:.4} < raw {raw:.4}");
    }
}

#[test]
fn confidence_sampling_prefers_genuine_root_samples() {
    for seed in 1..=3 {
        let dir = tempfile::tempdir().unwrap();
        let p = relabeled(seed, dir.path());
        let data = p.load_data().unwrap();
        let ontology = load_ontology(&p.path(files::ORACLE), data.objects.names(), data.predicates.names()).unwrap();
        let model = p.load_model(&p.path(files::STAGE1), &data).unwrap();
        let spec = p
            .build_target()
            .unwrap()
            .spec
            .with_strategy(Strategy::Confidence)
            .with_cap(300);
        let target = build_target_domain(&data.train, &spec, Some(&model)).unwrap();

        // a common-labeled triplet is genuine when its latent predicate is the label itself
        let tally = |ds: &sgg_balance::dataset::Dataset| {
            let common: Vec<_> = ds.triplets().iter().filter(|t| spec.is_common(t.pred)).collect();
            let genuine = common.iter().filter(|t| ontology.latent[&(t.subj, t.obj)] == t.pred).count();
            (genuine as f64, common.len() as f64)
        };
        let (all_g, all_n) = tally(&data.train);
        let (kept_g, kept_n) = tally(&target);
        let kept = kept_g / kept_n;
        let removed = (all_g - kept_g) / (all_n - kept_n);
        assert!(kept > removed, "seed {seed}: kept {kept:.4} vs removed {removed:.4}");
    }
}
