use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use serde::{Deserialize, Serialize};

use planforge_core::evalharness::{normalize_output, sentence_bleu, tokenize};
use planforge_core::shardstore::write_shards;
use planforge_core::{Cursor, SamplerState, ShardReader, TaskType};

fn bleu(c: &mut Criterion) {
    let hyp = tokenize("pick up the blue mug from the counter and place it in the sink");
    let refs = vec![
        tokenize("pick up the blue mug and put it in the sink"),
        tokenize("grab the mug from the counter then place it into the sink"),
        tokenize("move the blue cup to the sink"),
    ];
    c.bench_function("sentence_bleu/3 refs", |b| {
        b.iter(|| sentence_bleu(black_box(&hyp), black_box(&refs)))
    });
}

fn sampler(c: &mut Criterion) {
    let tasks = TaskType::ALL;
    let state = SamplerState::init(&tasks, 0.02, 0.5, 1).unwrap();
    let losses: BTreeMap<TaskType, f64> = tasks.iter().copied().zip([2.1, 1.7, 0.9, 1.3, 0.4, 3.2]).collect();
    c.bench_function("sampler/update_weights 6 tasks", |b| {
        b.iter(|| state.update_weights(black_box(&losses)))
    });
    c.bench_function("sampler/draw", |b| b.iter(|| black_box(&state).draw()));
}

#[derive(Serialize, Deserialize)]
struct Rec {
    id: u64,
    text: String,
}

fn shards(c: &mut Criterion) {
    const N: u64 = 20_000;
    let recs = || {
        (0..N).map(|i| Rec {
            id: i,
            text: format!("record number {i}"),
        })
    };
    let mut g = c.benchmark_group("shardstore");
    g.throughput(Throughput::Elements(N));
    g.sample_size(20);
    g.bench_function("write 20k", |b| {
        b.iter_batched(
            || tempfile::tempdir().unwrap(),
            |dir| write_shards(recs(), 1024, dir.path(), 0).unwrap(),
            BatchSize::PerIteration,
        )
    });
    let dir = tempfile::tempdir().unwrap();
    write_shards(recs(), 1024, dir.path(), 0).unwrap();
    g.bench_function("read 20k", |b| {
        b.iter(|| {
            let mut r = ShardReader::<Rec>::open(dir.path()).unwrap();
            r.epoch_from(Cursor::default()).map(|x| x.unwrap().0.id).sum::<u64>()
        })
    });
    g.finish();
}

fn normalize(c: &mut Criterion) {
    let options: Vec<String> = [
        "open the fridge",
        "pick up the knife",
        "wash the plate",
        "close the drawer",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    c.bench_function("normalize_output/mcq", |b| {
        b.iter(|| {
            normalize_output(
                black_box("<think>The plate is dirty.</think> The answer is (C) wash the plate."),
                TaskType::EgoViewMcq,
                Some(&options),
            )
        })
    });
    c.bench_function("normalize_output/free text", |b| {
        b.iter(|| normalize_output(black_box("  Answer:  Pick up the PLATE.\n"), TaskType::PlanningQa, None))
    });
}

criterion_group!(benches, bleu, sampler, shards, normalize);
criterion_main!(benches);
