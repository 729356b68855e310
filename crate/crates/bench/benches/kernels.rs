use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ttt_core::{Tape, Tensor};

fn matrix(r: usize, c: usize, seed: usize) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c)
            .map(|i| ((i * 31 + seed) % 17) as f64 / 17.0 - 0.5)
            .collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let (a, b) = (matrix(n, n, 1), matrix(n, n, 2));
        g.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let (x, y) = (tape.param(&a), tape.param(&b));
                let out = x.matmul(y).unwrap().sum().unwrap();
                black_box(tape.backward(out, &[x, y]).unwrap());
            })
        });
    }
    g.finish();
}

fn second_order(c: &mut Criterion) {
    let a = matrix(32, 32, 3);
    c.bench_function("grad_of_grad_32", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let x = tape.param(&a);
            let y = x.matmul(x).unwrap().sum().unwrap();
            let g = tape.grad(y, &[x]).unwrap();
            let z = g.grads[0].matmul(x).unwrap().sum().unwrap();
            black_box(tape.backward(z, &[x]).unwrap());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, second_order
}
criterion_main!(benches);
