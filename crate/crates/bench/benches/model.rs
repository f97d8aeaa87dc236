use criterion::{criterion_group, criterion_main, Criterion};
use gatedunipose::losses::mse_heatmap_loss;
use gatedunipose::{Mode, Var};
use gatedunipose_bench::{input, toy_model};

fn toy(c: &mut Criterion) {
    let model = toy_model::<f32>().unwrap();
    let x = Var::constant(input::<f32>(&[1, 3, 256, 192], 1).unwrap());
    let mut g = c.benchmark_group("toy");
    g.sample_size(10);
    g.bench_function("forward eval", |b| {
        b.iter(|| model.forward(&mut model.tape(), &x).unwrap())
    });

    let mut deployed = model.clone();
    deployed.switch_to_deploy().unwrap();
    g.bench_function("forward deployed", |b| {
        b.iter(|| deployed.forward(&mut deployed.tape(), &x).unwrap())
    });

    let mut train = model.clone();
    train.set_mode(Mode::Train);
    let batch = Var::constant(input::<f32>(&[4, 3, 256, 192], 2).unwrap());
    let target = Var::constant(input::<f32>(&[4, 17, 64, 48], 3).unwrap());
    g.bench_function("train step batch 4", |b| {
        b.iter(|| {
            let mut tape = train.tape();
            let out = train.forward(&mut tape, &batch).unwrap();
            let loss = mse_heatmap_loss(&mut tape, &out, &target, None).unwrap();
            tape.backward(&loss).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, toy);
criterion_main!(benches);
