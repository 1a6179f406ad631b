use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rectdiff::diffusion::{ddim_invert, ddim_sample, uniform_steps};
use rectdiff::{Tape, Tensor};
use rectdiff_bench::{fixture, rectified_train_step};

fn ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn(&[64, 64], &mut rng);
    let b = Tensor::randn(&[64, 64], &mut rng);
    c.bench_function("matmul_64_fwd_bwd", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let (x, y) = (tape.param(a.clone()), tape.param(b.clone()));
            tape.backward(x.matmul(y).unwrap().sum()).unwrap();
            black_box(tape.grad(x))
        })
    });

    let x = Tensor::randn(&[1, 16, 16, 16], &mut rng);
    let w = Tensor::randn(&[3, 3, 16, 32], &mut rng);
    c.bench_function("conv3x3_16to32_fwd_bwd", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
            tape.backward(xv.conv2d(wv, 1, 1).unwrap().sum()).unwrap();
            black_box(tape.grad(wv))
        })
    });
}

fn models(c: &mut Criterion) {
    let f = fixture();
    c.bench_function("denoiser_forward", |b| {
        b.iter(|| black_box(f.denoiser.predict_eps(&f.x_t, f.t).unwrap()))
    });

    let eps = Tensor::randn(f.x0.shape(), &mut ChaCha8Rng::seed_from_u64(2));
    c.bench_function("rectified_train_sample", |b| {
        b.iter(|| black_box(rectified_train_step(&f, &eps).unwrap()))
    });

    let steps = uniform_steps(100, 25).unwrap();
    c.bench_function("invert_sample_25_steps", |b| {
        b.iter(|| {
            let inv = ddim_invert(&f.x0, &f.denoiser, &steps, &f.schedule, None).unwrap();
            black_box(ddim_sample(inv.last(), &f.denoiser, &steps, &f.schedule, None).unwrap())
        })
    });
}

criterion_group!(benches, ops, models);
criterion_main!(benches);
