use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use partsight_core::corruptions::{build_corrupted_set, CorruptionProfile, Registry};
use partsight_core::detorch::Detection;
use partsight_core::evalmetrics::{evaluate_images, GroundTruth, ImageEval};
use partsight_core::fixtures::{background, mask_set};
use partsight_core::geometry::BoundingBox;
use partsight_core::knowledge::FlatIndex;
use partsight_core::seed::rng_for;
use partsight_core::synthgen::{generate_into, CompositionConfig, MaskLibrary, Sources};
use partsight_core::Exec;
use rand::Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn flat_index(c: &mut Criterion) {
    let mut rng = rng_for(1);
    let dim = 128;
    let mut index = FlatIndex::new(dim).unwrap();
    for _ in 0..20_000 {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        index.add(&v).unwrap();
    }
    let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = c.benchmark_group("flat_index_search");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| index.search(black_box(&q), 5, exec).unwrap()));
    }
    g.finish();
}

fn sources() -> Sources {
    Sources {
        backgrounds: (0..4).map(|i| (format!("bg_{i}"), background(320, 180, i))).collect(),
        library: MaskLibrary::from_masks(mask_set(4, 2, 48, 3).unwrap()).unwrap(),
    }
}

fn synth(c: &mut Criterion) {
    let src = sources();
    let config = CompositionConfig {
        output_width: 320,
        output_height: 180,
        ..CompositionConfig::default()
    };
    let mut g = c.benchmark_group("synth_generate_16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                let dir = tempfile::tempdir().unwrap();
                generate_into(&src, &config, 16, "bench", 7, dir.path(), exec).unwrap()
            })
        });
    }
    g.finish();
}

fn corrupt(c: &mut Criterion) {
    let clean = tempfile::tempdir().unwrap();
    let config = CompositionConfig {
        output_width: 320,
        output_height: 180,
        ..CompositionConfig::default()
    };
    generate_into(&sources(), &config, 4, "bench", 5, clean.path(), Exec::Parallel).unwrap();
    let specs = CorruptionProfile::default_profile().specs;
    let registry = Registry::default();
    let mut g = c.benchmark_group("corrupt_set_4x11");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                let out = tempfile::tempdir().unwrap();
                build_corrupted_set(clean.path(), &specs, 3, out.path(), &registry, exec).unwrap()
            })
        });
    }
    g.finish();
}

fn eval_images(n: usize) -> Vec<ImageEval> {
    let mut rng = rng_for(9);
    let labels = ["a", "b", "c"];
    (0..n)
        .map(|i| {
            let mut img = ImageEval {
                id: format!("img_{i}"),
                ..ImageEval::default()
            };
            for _ in 0..6 {
                let (x, y) = (rng.random_range(0.0..500.0), rng.random_range(0.0..300.0));
                let label = labels[rng.random_range(0..3)].to_string();
                let bbox = BoundingBox::new(x, y, x + 60.0, y + 40.0).unwrap();
                let dx = rng.random_range(-10.0..10.0);
                img.predictions.push(Detection {
                    label: label.clone(),
                    bbox: bbox.translate(dx, 0.0),
                    confidence: rng.random_range(0.3..1.0),
                    frame_index: 0,
                });
                img.truths.push(GroundTruth { label, bbox });
            }
            img
        })
        .collect()
}

fn evaluate(c: &mut Criterion) {
    let classes: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let mut g = c.benchmark_group("evaluate_images");
    for n in [200, 2000] {
        let images = eval_images(n);
        for (name, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, n), &images, |b, imgs| {
                b.iter(|| evaluate_images(imgs, &classes, 0.4, exec))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, flat_index, synth, corrupt, evaluate);
criterion_main!(benches);
