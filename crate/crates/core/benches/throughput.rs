//! Parallel versus sequential throughput of the hot loops.
//!
//! Each group runs the same workload twice, toggling `par::set_sequential`.
//! Without the `parallel` feature both variants are sequential.

use std::hint::black_box;

use conmae::data::{self, SyntheticSpec};
use conmae::imagecore::{ContourConfig, ContourExtractor, Image};
use conmae::mae::{self, MaeConfig, MaeModel, Pretrainer};
use conmae::{par, reid};
use criterion::{criterion_group, criterion_main, Criterion};

fn images(n: usize) -> Vec<Image> {
    let spec = SyntheticSpec {
        num_identities: n.div_ceil(8),
        ..SyntheticSpec::default()
    };
    (0..n).map(|i| data::render(&spec, i / 8, i % 8).0).collect()
}

fn config() -> MaeConfig {
    MaeConfig {
        embed_dim: 32,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        decoder_dim: 16,
        decoder_depth: 1,
        decoder_heads: 2,
        ..MaeConfig::default()
    }
}

fn both(c: &mut Criterion, group: &str, mut work: impl FnMut()) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    for (name, seq) in [("parallel", false), ("sequential", true)] {
        par::set_sequential(seq);
        g.bench_function(name, |b| b.iter(&mut work));
    }
    par::set_sequential(false);
    g.finish();
}

fn benches(c: &mut Criterion) {
    let imgs = images(64);
    let extractor = ContourExtractor::new(ContourConfig::default());
    let model = MaeModel::new(config()).unwrap();

    both(c, "contour_maps", || {
        black_box(par::map_slice(&imgs, |img| extractor.extract_or_uniform(img).unwrap()));
    });

    both(c, "feature_extraction", || {
        black_box(model.extract_features(&imgs).unwrap());
    });

    let feats: Vec<Vec<f64>> = {
        let few = model.extract_features(&imgs).unwrap();
        (0..512).map(|i| few[i % few.len()].iter().map(|v| v + i as f64 * 1e-3).collect()).collect()
    };
    both(c, "pairwise_jaccard_512", || {
        black_box(reid::pairwise_distances(&feats).unwrap());
    });

    let samples = mae::prepare_samples(&model.config, &imgs[..32], &extractor).unwrap();
    let mut trainer = Pretrainer::new(model.clone());
    both(c, "pretrain_epoch_32", || {
        black_box(trainer.run_epoch(&samples).unwrap());
    });
}

criterion_group!(throughput, benches);
criterion_main!(throughput);
