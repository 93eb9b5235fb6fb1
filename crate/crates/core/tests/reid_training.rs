use std::sync::OnceLock;

use conmae::data::{self, SyntheticSpec};
use conmae::imagecore::{ContourConfig, ContourExtractor, Image};
use conmae::mae::{self, MaeConfig, MaeModel};
use conmae::reid::{self, ClusterDictionary, ReidConfig, ReidEpochMetrics, ReidState};

fn images() -> &'static [Image] {
    static IMAGES: OnceLock<Vec<Image>> = OnceLock::new();
    IMAGES.get_or_init(|| {
        let spec = SyntheticSpec {
            num_identities: 20,
            views_per_identity: 8,
            ..SyntheticSpec::default()
        };
        (0..20)
            .flat_map(|id| (0..8).map(move |v| (id, v)))
            .map(|(id, v)| data::render(&spec, id, v).0)
            .collect()
    })
}

/// Small encoder pretrained long enough that its features separate.
fn pretrained() -> &'static MaeModel {
    static MODEL: OnceLock<MaeModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = MaeConfig {
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            decoder_dim: 16,
            decoder_depth: 1,
            decoder_heads: 2,
            lr: 1e-3,
            batch_size: 16,
            epochs: 40,
            ..MaeConfig::default()
        };
        mae::pretrain(images(), &ContourExtractor::new(ContourConfig::default()), &cfg)
            .unwrap()
            .0
    })
}

fn reid_config() -> ReidConfig {
    ReidConfig {
        eps: 0.02,
        epochs: 2,
        eval_interval: 0,
        ..ReidConfig::default()
    }
}

fn run(config: &ReidConfig) -> (MaeModel, Vec<ReidEpochMetrics>, Vec<ReidState>) {
    let mut model = pretrained().clone();
    let mut states = Vec::new();
    let (history, _) = reid::train_reid(
        &mut model,
        images(),
        config,
        |_| unreachable!("evaluation is disabled"),
        |_, s| states.push(s.clone()),
    )
    .unwrap();
    (model, history, states)
}

#[test]
fn uniform_logits_give_ln2() {
    let dict = ClusterDictionary {
        centers: vec![vec![0.0, 1.0], vec![0.0, -1.0]],
        counts: vec![1, 1],
        global_ids: vec![0, 1],
    };
    let (loss, _) = reid::soft_contrast_loss(&[1.0, 0.0], &[0.5, 0.5], &dict, 1.0).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

    let sharp = ClusterDictionary {
        centers: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        ..dict
    };
    let (loss, _) = reid::soft_contrast_loss(&[1.0, 0.0], &[1.0, 0.0], &sharp, 0.01).unwrap();
    assert!(loss < 1e-80);
}

#[test]
fn twenty_identities_cluster_plausibly_and_repeat() {
    let cfg = reid_config();
    let (model_a, a, states) = run(&cfg);
    assert_eq!(a.len(), 2);
    assert!((10..=40).contains(&a[1].num_clusters), "{a:?}");
    assert!(a.iter().all(|m| m.loss.is_some_and(f64::is_finite)));
    assert_eq!(states.len(), 2);
    assert!(states[1].registry.len() >= a[1].num_clusters);

    let (model_b, b, _) = run(&cfg);
    assert_eq!(a, b);
    assert_eq!(model_a.store.params(), model_b.store.params());
}

#[test]
fn hard_labels_and_frozen_centres_at_the_limits() {
    let cfg = ReidConfig {
        lambda: 1.0,
        sigma: 1.0,
        epochs: 1,
        ..reid_config()
    };
    let (_, history, states) = run(&cfg);
    let state = &states[0];
    assert!(history[0].skipped.is_none(), "{history:?}");
    for label in state.soft.iter().flatten() {
        assert_eq!(label.weights.iter().filter(|w| **w > 0.0).count(), 1);
    }
    // σ = 1: the centres are still the epoch-start means.
    let feats = pretrained().extract_features(images()).unwrap();
    let expected = reid::init_dictionary(&feats, &state.hard, Some(&state.registry.mapping)).unwrap();
    let got = state.dictionary.as_ref().unwrap();
    assert_eq!(got.global_ids, expected.global_ids);
    for (a, b) in got.centers.iter().zip(&expected.centers) {
        // Renormalizing a unit vector may move the last bit.
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
