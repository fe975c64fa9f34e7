use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pseudoweight_bench::fixture;
use pseudoweight_core::maskgeom::{boxes_from_mask, connected_components};
use pseudoweight_core::ranksim::{cosine_similarity, rank_overlap_weight, top_k_indices, Similarity, DEFAULT_K};
use pseudoweight_core::trainer::loss::compute_weight_map;

fn kernels(c: &mut Criterion) {
    let fx = fixture();
    let image = &fx.sample.image;

    c.bench_function("forward_32x32", |b| {
        b.iter(|| fx.model.forward(black_box(image)).unwrap())
    });
    c.bench_function("predict_32x32", |b| {
        b.iter(|| fx.model.predict(black_box(image)).unwrap())
    });

    let f = &fx.features.as_slice()[..fx.features.channels()];
    let g = &fx.features.as_slice()[fx.features.channels()..2 * fx.features.channels()];
    c.bench_function("top_k_indices", |b| {
        b.iter(|| top_k_indices(black_box(f), DEFAULT_K).unwrap())
    });
    c.bench_function("rank_overlap_weight", |b| {
        b.iter(|| rank_overlap_weight(black_box(f), black_box(g), DEFAULT_K).unwrap())
    });
    c.bench_function("cosine_similarity", |b| {
        b.iter(|| cosine_similarity(black_box(f), black_box(g)).unwrap())
    });

    for (name, sim) in [
        ("weight_map_rank", Similarity::Rank),
        ("weight_map_cosine", Similarity::Cosine),
    ] {
        c.bench_function(name, |b| {
            b.iter(|| compute_weight_map(&fx.features, black_box(&fx.pseudo), &fx.prototypes, DEFAULT_K, sim).unwrap())
        });
    }

    let mask = &fx.sample.mask;
    c.bench_function("connected_components", |b| {
        b.iter(|| connected_components(black_box(mask), 1))
    });
    c.bench_function("boxes_from_mask", |b| b.iter(|| boxes_from_mask(black_box(mask), &[0])));
}

criterion_group!(benches, kernels);
criterion_main!(benches);
