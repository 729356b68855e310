use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ttt_bench::{model, sequence};
use ttt_core::model::{Attention, Variant};
use ttt_core::ttt::{loss_and_grad, Objective, TttConfig, TttSession};

fn outer_gradient(c: &mut Criterion) {
    let toks = sequence(64);
    let (m, p) = model(Attention::Sliding(16), Variant::E2e, 32);
    let mut g = c.benchmark_group("outer_gradient");
    for (name, obj, ckpt) in [
        ("naive", Objective::Naive, false),
        ("e2e", Objective::E2e, false),
        ("e2e_checkpointed", Objective::E2e, true),
    ] {
        let cfg = TttConfig {
            eta: 0.1,
            batch_b: 8,
            ..TttConfig::default()
        };
        g.bench_function(name, |b| {
            b.iter(|| black_box(loss_and_grad(&m, &p, &toks, &cfg, obj, ckpt).unwrap()))
        });
    }
    g.finish();
}

fn prefill(c: &mut Criterion) {
    let mut g = c.benchmark_group("prefill");
    for t in [128, 256, 512] {
        let toks = sequence(t);
        for (name, att, var) in [
            ("full", Attention::Full, Variant::Off),
            ("ttt_e2e_swa", Attention::Sliding(32), Variant::E2e),
        ] {
            let (m, p) = model(att, var, 32);
            let cfg = TttConfig {
                eta: 0.1,
                batch_b: 16,
                ..TttConfig::default()
            };
            g.bench_with_input(BenchmarkId::new(name, t), &t, |b, _| {
                b.iter(|| {
                    let mut s = TttSession::new(&m, &p, &cfg).unwrap();
                    s.feed_all(&toks).unwrap();
                    black_box(s.steps());
                })
            });
        }
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = outer_gradient, prefill
}
criterion_main!(benches);
