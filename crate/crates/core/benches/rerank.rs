//! Sequential vs parallel execution of the hot loops. Build with
//! `--no-default-features` to see the parallel arm collapse onto the
//! sequential path.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cooprag::embedding::{EmbeddingStore, LayeredEmbeddings};
use cooprag::objective::score_matrix;
use cooprag::rerank::{select_candidate_layers, RerankConfig, Reranker};
use cooprag::{ExecMode, FlatIndex, Strategy};

const LAYERS: usize = 12;
const DIM: usize = 64;

fn random(rng: &mut ChaCha8Rng, tokens: usize) -> LayeredEmbeddings {
    let data = (0..LAYERS * tokens * DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    LayeredEmbeddings::new(LAYERS, tokens, DIM, data).unwrap()
}

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn rerank(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = EmbeddingStore::new();
    let ids: Vec<String> = (0..100).map(|i| format!("doc-{i:03}")).collect();
    for id in &ids {
        store.insert(id.clone(), random(&mut rng, 48)).unwrap();
    }
    let query = random(&mut rng, 24);
    let mut group = c.benchmark_group("rerank_100x48");
    for strategy in [Strategy::NaiveGap, Strategy::GapWeighted, Strategy::TokenContrast] {
        let cfg = RerankConfig {
            strategy,
            k: 5,
            ..RerankConfig::default()
        };
        let reranker = Reranker::new(cfg, LAYERS).unwrap();
        for (name, mode) in MODES {
            group.bench_function(BenchmarkId::new(strategy.as_str(), name), |b| {
                b.iter(|| reranker.rerank(black_box(&ids), &query, &store, mode).unwrap())
            });
        }
    }
    group.finish();
}

fn search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = EmbeddingStore::new();
    for i in 0..20_000 {
        let data = (0..2 * DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        store
            .insert(format!("doc-{i:05}"), LayeredEmbeddings::new(2, 1, DIM, data).unwrap())
            .unwrap();
    }
    let index = FlatIndex::build(&store).unwrap();
    let q: Vec<f32> = (0..DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mut group = c.benchmark_group("flat_search_20k");
    for (name, mode) in MODES {
        group.bench_function(name, |b| b.iter(|| index.search_with(black_box(&q), 20, mode).unwrap()));
    }
    group.finish();
}

fn scores(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = 8;
    let questions: Vec<_> = (0..b).map(|_| random(&mut rng, 24)).collect();
    let docs: Vec<_> = (0..2 * b).map(|_| random(&mut rng, 48)).collect();
    let layers = select_candidate_layers(LAYERS, 4, 0).unwrap();
    let mut group = c.benchmark_group("score_matrix_8x16");
    for (name, mode) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| score_matrix(black_box(&questions), &docs, &layers, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, rerank, search, scores);
criterion_main!(benches);
