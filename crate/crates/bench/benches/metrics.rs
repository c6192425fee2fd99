use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use soundloc::retrieval::IndexEntry;
use soundloc::{ciou, consensus_map, knn, BoundingBox, EmbeddingIndex, Metric, Modality, ResponseMap, SubjectAnnotation, Tag};

fn subjects(rng: &mut impl Rng, side: f64) -> Vec<SubjectAnnotation> {
    (0..3)
        .map(|k| SubjectAnnotation {
            subject_id: format!("s{k}"),
            tag: Tag::Object,
            boxes: vec![BoundingBox {
                x: rng.gen_range(0.0..side / 2.0),
                y: rng.gen_range(0.0..side / 2.0),
                w: rng.gen_range(1.0..side / 2.0),
                h: rng.gen_range(1.0..side / 2.0),
            }],
        })
        .collect()
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let side = 224;
    let s = subjects(&mut rng, side as f64);
    c.bench_function("consensus map 224x224", |b| {
        b.iter(|| consensus_map(black_box(&s), side, side, 2).unwrap())
    });
    let g = consensus_map(&s, side, side, 2).unwrap();
    let response = ResponseMap::new(side, side, (0..side * side).map(|_| rng.gen()).collect()).unwrap();
    c.bench_function("cIoU 224x224", |b| b.iter(|| ciou(black_box(&response), &g, 0.5).unwrap()));

    let dim = 128;
    let mut index = EmbeddingIndex::new(Metric::Cosine, dim);
    for i in 0..1000 {
        index
            .insert(IndexEntry {
                id: format!("{i:04}"),
                modality: Modality::Audio,
                vector: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .unwrap();
    }
    let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("top-10 of 1000 cosine", |b| {
        b.iter(|| knn(black_box(&query), &index, 10, Metric::Cosine).unwrap())
    });
}

criterion_group!(benches, metrics);
criterion_main!(benches);
