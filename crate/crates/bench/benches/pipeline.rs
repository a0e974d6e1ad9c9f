//! Timings for the hot paths: network queries, frame rendering, the
//! full differentiated training step, and image scoring.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use echofield_bench::{bench_frame_spec, bench_maps, bench_points, bench_target};
use echofield_core::diff::Tape;
use echofield_core::inr::{tissue_field, EncodingConfig, Mlp, MlpConfig};
use echofield_core::loss::{combined_loss, ssim_value, LossConfig, SsimConfig};
use echofield_core::renderer::{render_frame, render_param_maps, RenderConfig, SamplingMode};

fn bench_net() -> Mlp {
    Mlp::init(
        EncodingConfig::default(),
        MlpConfig {
            hidden_layers: 4,
            width: 64,
            skip_layer: 3,
            output_dim: 5,
        },
        5,
    )
    .expect("init network")
}

fn mlp_query(c: &mut Criterion) {
    let net = bench_net();
    let spec = bench_frame_spec();
    let points = bench_points(spec.scanlines * spec.depth_samples, 1);
    c.bench_function("mlp_query_frame_of_points", |b| {
        b.iter(|| {
            let mut tape: Tape<f32> = Tape::new();
            tape.set_recording(false);
            let params = net.emit_params(&mut tape).unwrap();
            let out = net.query(&mut tape, &params, black_box(&points)).unwrap();
            black_box(tape.value(out)[0]);
        })
    });
}

fn render_frame_from_maps(c: &mut Criterion) {
    let maps = bench_maps(2);
    let spec = bench_frame_spec();
    let config = RenderConfig::default();
    c.bench_function("render_frame_64x96", |b| {
        b.iter(|| black_box(render_param_maps(&maps, &spec, &config, 3, 0).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let net = bench_net();
    let spec = bench_frame_spec();
    let points = bench_points(spec.scanlines * spec.depth_samples, 1);
    let target = bench_target(&spec, 4);
    let render = RenderConfig {
        mode: SamplingMode::Expected,
        ..RenderConfig::default()
    };
    let loss_cfg = LossConfig::default();
    c.bench_function("train_step_64x96", |b| {
        b.iter(|| {
            let mut tape: Tape<f32> = Tape::new();
            let params = net.emit_params(&mut tape).unwrap();
            let raw = net.query(&mut tape, &params, &points).unwrap();
            let field = tissue_field(&mut tape, raw).unwrap();
            let (echo, _) = render_frame(&mut tape, &field, &spec, &render, 7, 0).unwrap();
            let pred = tape
                .reshape(echo, vec![spec.scanlines, spec.depth_samples])
                .unwrap();
            let obs = tape
                .leaf(
                    target.data.clone(),
                    vec![spec.scanlines, spec.depth_samples],
                )
                .unwrap();
            let loss = combined_loss(&mut tape, pred, obs, &loss_cfg).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn score_frames(c: &mut Criterion) {
    let spec = bench_frame_spec();
    let a = bench_target(&spec, 5);
    let b = bench_target(&spec, 6);
    let cfg = SsimConfig::default();
    c.bench_function("ssim_64x96", |bench| {
        bench.iter(|| black_box(ssim_value(&a, &b, &cfg).unwrap()))
    });
}

criterion_group!(
    benches,
    mlp_query,
    render_frame_from_maps,
    train_step,
    score_frames
);
criterion_main!(benches);
