//! Engine benchmarks: end-to-end search throughput plus the hot inner
//! primitives (merge predicates, oracle enumeration, boundary scanning).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use etamcts::backends::toy::{toy_oracle_value, ToyInstance, ToyOp};
use etamcts::merge::{levenshtein, trigram_cosine};
use etamcts::search::run_search;
use etamcts::termination::{scan_termination, TerminationRule};
use etamcts::types::render_state;
use etamcts_bench::{bench_instance, bench_rig};
use std::hint::black_box;

fn bench_search(c: &mut Criterion) {
    let instance = bench_instance();
    let prompt = instance.prompt();
    let mut group = c.benchmark_group("search");
    for budget in [20u64, 60, 150] {
        group.bench_with_input(BenchmarkId::new("toy", budget), &budget, |b, budget| {
            b.iter(|| {
                let rig = bench_rig(7, *budget);
                let tree = run_search(
                    &prompt,
                    rig.generator.as_ref(),
                    rig.fast.as_ref(),
                    &rig.critics,
                    &rig.params,
                    &rig.registry,
                )
                .expect("search completes");
                black_box(tree.rollout_count)
            });
        });
    }
    group.finish();
}

fn bench_merge_predicates(c: &mut Criterion) {
    let a = "So the total cost is 3 * 12 + 5 = <<3*12+5=41>>41 dollars.\n";
    let b = "So the total cost is 3 * 12 + 4 = <<3*12+4=40>>40 dollars.\n";
    c.bench_function("merge/levenshtein", |bench| {
        bench.iter(|| black_box(levenshtein(black_box(a), black_box(b))))
    });
    c.bench_function("merge/trigram_cosine", |bench| {
        bench.iter(|| black_box(trigram_cosine(black_box(a), black_box(b))))
    });
}

fn bench_oracle(c: &mut Criterion) {
    let instance = ToyInstance {
        start: 1,
        target: 24,
        ops: vec![ToyOp::Add(1), ToyOp::Add(3), ToyOp::Mul(2), ToyOp::Add(-2)],
        max_depth: 6,
    };
    let root = render_state(&instance.prompt(), &[]);
    c.bench_function("oracle/full_enumeration", |bench| {
        bench.iter(|| black_box(toy_oracle_value(&instance, &root).unwrap()))
    });
}

fn bench_scanning(c: &mut Criterion) {
    let rule = TerminationRule::default_formula();
    let stream = "First we expand the brackets and simplify the left side.\n\nThen substituting back gives $x = 3$\n\nmore text";
    c.bench_function("termination/formula_scan", |bench| {
        bench.iter(|| black_box(scan_termination(black_box(stream), &rule)))
    });
}

criterion_group!(
    benches,
    bench_search,
    bench_merge_predicates,
    bench_oracle,
    bench_scanning
);
criterion_main!(benches);
