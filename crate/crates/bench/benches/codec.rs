use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lvc_core::codecnets::{Codec, ModelWeights};
use lvc_core::entropy::{rc_decode, rc_encode, GaussianModel};
use lvc_core::pipeline::{FrameCoder, ReferenceState};
use lvc_core::tensor::{Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn range_coder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let mu: Vec<f32> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let sigma: Vec<f32> = (0..n).map(|_| rng.random_range(0.2..6.0)).collect();
    let symbols: Vec<i32> = mu
        .iter()
        .zip(&sigma)
        .map(|(m, s)| (m + s * rng.random_range(-1.5f32..1.5)).round() as i32)
        .collect();
    let model = GaussianModel::new(&mu, &sigma).unwrap();
    let coded = rc_encode(&symbols, &model).unwrap();

    let mut g = c.benchmark_group("range_coder");
    g.throughput(Throughput::Elements(n as u64));
    g.bench_function("encode", |b| {
        b.iter(|| rc_encode(&symbols, &model).unwrap())
    });
    g.bench_function("decode", |b| {
        b.iter(|| rc_decode(&coded.bytes, &model).unwrap())
    });
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for (ch, side) in [(64, 32), (128, 16)] {
        let x = Tensor::<f32>::full(Shape::new(1, ch, side, side), 0.1);
        let w = Tensor::<f32>::full(Shape::new(ch, ch, 3, 3), 0.01);
        g.throughput(Throughput::Elements((2 * ch * ch * 9 * side * side) as u64));
        g.bench_with_input(
            BenchmarkId::new("forward", format!("{ch}x{side}")),
            &(),
            |b, _| {
                b.iter(|| {
                    let tape = Tape::<f32>::inference();
                    let xv = tape.constant(x.clone());
                    let wv = tape.constant(w.clone());
                    tape.conv2d(&xv, &wv, None, 1, 1).unwrap()
                })
            },
        );
        g.bench_with_input(
            BenchmarkId::new("forward_backward", format!("{ch}x{side}")),
            &(),
            |b, _| {
                b.iter(|| {
                    let tape = Tape::<f32>::new();
                    let xv = tape.leaf(x.clone());
                    let wv = tape.leaf(w.clone());
                    let y = tape.conv2d(&xv, &wv, None, 1, 1).unwrap();
                    tape.backward(&tape.sum(&y)).unwrap()
                })
            },
        );
    }
    g.finish();
}

fn pframe(c: &mut Criterion) {
    let codec = Codec::default();
    let weights = ModelWeights::init(&codec, 2, 3);
    let coder = FrameCoder::new(codec, &weights).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frame = |rng: &mut ChaCha8Rng| {
        Tensor::from_fn(Shape::new(1, 3, 64, 64), |_, _, _, _| {
            rng.random_range(0.0f32..1.0)
        })
    };
    let reference = frame(&mut rng);
    let x = frame(&mut rng);
    let mut g = c.benchmark_group("pframe_64x64");
    g.sample_size(10);
    g.bench_function("encode", |b| {
        b.iter(|| {
            let mut state = ReferenceState::init(&reference);
            coder.encode_pframe(&x, &mut state, true, 1).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, range_coder, conv, pframe);
criterion_main!(benches);
