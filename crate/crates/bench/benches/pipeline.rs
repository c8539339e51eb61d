use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

use pimt::datagen::synth_freeliving;
use pimt::encoder::{Backbone, EncoderConfig};
use pimt::model::{ModelConfig, PimtModel};
use pimt::nn::{train_step, AdamW, Mat};
use pimt::pretrain::{objective_targets, LossWeights, ObjectiveSet, PretrainModel};
use pimt::sigproc::{decompose, default_filter_bank, preprocess, PreprocessConfig};
use pimt::tokenization::{sample_mask, MaskSpec, TokenIndex};

fn filtering(c: &mut Criterion) {
    let rec = synth_freeliving(60.0, 4, 200.0, 0).unwrap();
    let bank = default_filter_bank();
    c.bench_function("preprocess_60s_4ch", |b| {
        b.iter(|| preprocess(black_box(&rec), &PreprocessConfig::default()).unwrap())
    });
    c.bench_function("decompose_60s_4ch_12band", |b| {
        b.iter(|| decompose(black_box(&rec), &bank).unwrap())
    });
}

fn tokens(index: TokenIndex, w: usize) -> Mat {
    Array2::from_shape_fn((index.len(), w), |(r, c)| ((r * 31 + c * 17) % 23) as f64 / 11.0 - 1.0)
}

fn model_cfg(backbone: Backbone, patches: usize) -> ModelConfig {
    ModelConfig {
        index: TokenIndex::new(12, 2, patches),
        patch_len: 100,
        encoder: EncoderConfig {
            backbone,
            n_layers: 2,
            model_dim: 32,
            state_dim: 8,
            ..EncoderConfig::default()
        },
    }
}

fn encoder_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode");
    for backbone in [Backbone::BidirectionalSsm, Backbone::Attention] {
        for patches in [4, 8, 16] {
            let cfg = model_cfg(backbone, patches);
            let model = PimtModel::new(cfg.clone()).unwrap();
            let x = tokens(cfg.index, cfg.patch_len);
            group.bench_with_input(
                BenchmarkId::new(format!("{backbone:?}"), cfg.index.len()),
                &x,
                |b, x| b.iter(|| model.encode(black_box(x)).unwrap()),
            );
        }
    }
    group.finish();
}

fn pretrain_step(c: &mut Criterion) {
    let cfg = model_cfg(Backbone::BidirectionalSsm, 8);
    let mut model = PretrainModel::new(cfg.clone(), ObjectiveSet::all()).unwrap();
    let x = tokens(cfg.index, cfg.patch_len);
    let mask = sample_mask(cfg.index, &MaskSpec::uniform(0.5, 0)).unwrap();
    let targets = objective_targets(&x, &model.objectives, Some(&mask), false).unwrap();
    let weights = LossWeights::default();
    let mut opt = AdamW::new(model.model.params.len(), 0.01);
    c.bench_function("pretrain_step_1_window", |b| {
        b.iter(|| {
            let mut params = std::mem::take(&mut model.model.params);
            let frozen = &model;
            let loss = train_step(&mut params, &mut opt, 1e-3, &[0], |tape, _| {
                Ok(frozen.record_loss(tape, &x, Some(&mask), &targets, &weights)?.0)
            })
            .unwrap();
            model.model.params = params;
            loss
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = filtering, encoder_forward, pretrain_step
}
criterion_main!(benches);
