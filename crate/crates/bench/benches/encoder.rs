use criterion::{criterion_group, criterion_main, Criterion};
use msf_bench::input_batch;
use msf_core::model::{EncoderConfig, EncoderPair};
use msf_core::tensor::nn::Module;
use msf_core::tensor::{BnMode, Tensor};

fn encoder(c: &mut Criterion) {
    let mut g = c.benchmark_group("desk_encoder_b32");
    g.sample_size(10);
    let cfg = EncoderConfig::cifar10();
    let mut pair = EncoderPair::<f32>::new(&cfg, 0.99, 0).unwrap();
    let x = input_batch(32, 32, 1);
    g.bench_function("target_forward", |b| b.iter(|| pair.target.infer(&x, BnMode::Train).unwrap()));
    g.bench_function("eval_features", |b| b.iter(|| pair.backbone().infer(&x, BnMode::Eval).unwrap()));
    let dv = Tensor::new(&[32, cfg.embed_dim], vec![1e-3; 32 * cfg.embed_dim]).unwrap();
    g.bench_function("online_forward_backward", |b| {
        b.iter(|| {
            pair.online.zero_grad();
            pair.online_forward(&x).unwrap();
            pair.online_backward(&dv).unwrap();
        })
    });
    g.finish();
}

criterion_group!(benches, encoder);
criterion_main!(benches);
