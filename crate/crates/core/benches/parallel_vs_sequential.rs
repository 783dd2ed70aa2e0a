//! Sequential vs rayon execution of the per-subject fan-outs.
//!
//! `cargo bench -p cfbench-core`; cap the pool with `CFBENCH_WORKERS`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cfbench_core::attributes::fit_normalizer;
use cfbench_core::exec::Exec;
use cfbench_core::metrics::{composition_score, intervention_scores, realism_score, EvalItem, FeatureExtractor, SsimParams};
use cfbench_core::models::{train, TrainSample};
use cfbench_core::phantoms::oracle::region_volumes;
use cfbench_core::phantoms::{render_phantom, sample_subject, RenderConfig};
use cfbench_core::{CohortId, ModelCheckpoint, ModelConfig, ModelFamily, Normalizer};

const RES: usize = 16;
const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn items(n: u64) -> (Vec<EvalItem>, Normalizer) {
    let raw: Vec<_> = (0..n)
        .map(|s| {
            let spec = sample_subject(CohortId::A, s);
            let (v, l) = render_phantom(&spec, [RES; 3], &RenderConfig::default()).unwrap();
            (spec.subject_id, v, region_volumes(&l))
        })
        .collect();
    let norm = fit_normalizer(&raw.iter().map(|r| r.2).collect::<Vec<_>>()).unwrap();
    let items = raw
        .into_iter()
        .map(|(id, volume, r)| EvalItem { subject_id: id, volume, attrs: norm.normalize_volumes(&r) })
        .collect();
    (items, norm)
}

fn rendering(c: &mut Criterion) {
    let mut g = c.benchmark_group("render_phantoms");
    let seeds: Vec<u64> = (0..32).collect();
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, 32), |b| {
            b.iter(|| {
                exec.map(&seeds, |&s| {
                    render_phantom(&sample_subject(CohortId::A, s), [32; 3], &RenderConfig::default()).unwrap()
                })
            })
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let (its, norm) = items(16);
    let cfg = ModelConfig::for_family(ModelFamily::Vae, RES);
    let model = ModelCheckpoint::untrained(cfg, norm.clone()).unwrap();
    let fx = FeatureExtractor::with_defaults([RES; 3]).unwrap();
    let mut g = c.benchmark_group("metrics");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("intervention_scores", name), |b| {
            b.iter(|| black_box(intervention_scores(&model, &its, &norm, 1, exec).unwrap()))
        });
        g.bench_function(BenchmarkId::new("composition_10_passes", name), |b| {
            b.iter(|| black_box(composition_score(&model, &its, &[1, 10], &SsimParams::default(), exec).unwrap()))
        });
        g.bench_function(BenchmarkId::new("realism", name), |b| {
            b.iter(|| black_box(realism_score(&model, &its, &fx, exec).unwrap()))
        });
    }
    g.finish();
}

/// Training always uses `Exec::auto()` internally, so this bench only shows
/// the rayon build's per-epoch cost; compare against a
/// `--no-default-features` run for the sequential number.
fn training(c: &mut Criterion) {
    let (its, norm) = items(16);
    let data: Vec<TrainSample> = its.iter().map(|i| TrainSample { volume: i.volume.clone(), attrs: i.attrs }).collect();
    let mut cfg = ModelConfig::for_family(ModelFamily::Vae, RES);
    cfg.train.epochs = 1;
    cfg.train.batch = 8;
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("vae_epoch", if cfg!(feature = "parallel") { "parallel" } else { "sequential" }), |b| {
        b.iter(|| black_box(train(&cfg, &data, &norm).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, rendering, metrics, training);
criterion_main!(benches);
