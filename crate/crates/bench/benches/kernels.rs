use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowse_core::signal::enhance::{chunk_pair, prepare_pair};
use flowse_core::signal::stft::{istft, stft};
use flowse_core::signal::{mix_at_snr, synth_clean, synth_noise, SynthConfig};
use flowse_core::training::{cfm_items, Pair};
use flowse_core::{
    Activation, Architecture, FieldModel, Inference, Mode, PathSpec, Sampler, SdeSpec,
    SpectroConfig, Waveform,
};

fn desk_spectro() -> SpectroConfig {
    SpectroConfig {
        window: 126,
        hop: 32,
        n_fft: 126,
        alpha: 0.5,
        beta: 0.15,
    }
}

fn clip(rng: &mut ChaCha8Rng) -> (Waveform, Waveform) {
    let synth = SynthConfig {
        sample_rate: 8000,
        num_samples: 4000,
    };
    let clean = synth_clean(&synth, rng).unwrap();
    let noise = synth_noise(&synth, rng).unwrap();
    let noisy = mix_at_snr(&clean, &noise, 5.0).unwrap();
    (clean, noisy)
}

fn model(mode: Mode, rng: &mut ChaCha8Rng) -> FieldModel {
    let arch = Architecture {
        frame_len: 2 * desk_spectro().bins(),
        hidden: vec![128; 3],
        activation: Activation::Silu,
        time_embed: 16,
        context: 2,
    };
    FieldModel::new(arch, mode, rng).unwrap()
}

fn chunk(rng: &mut ChaCha8Rng) -> Pair {
    let (clean, noisy) = clip(rng);
    let pair = prepare_pair(&clean, &noisy, &desk_spectro()).unwrap();
    chunk_pair(&pair, 32).unwrap().remove(0)
}

fn bench_model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = model(Mode::VectorField, &mut rng);
    let (x, y) = chunk(&mut rng);
    c.bench_function("forward 32 frames", |b| {
        b.iter(|| m.forward(black_box(&x), black_box(&y), 0.4).unwrap())
    });
    let pairs: Vec<Pair> = (0..8).map(|_| chunk(&mut rng)).collect();
    let items = cfm_items(&pairs, &PathSpec::default(), 0.03, &mut rng).unwrap();
    c.bench_function("loss_grad batch 8", |b| {
        b.iter(|| m.loss_grad(black_box(&items)).unwrap())
    });
}

fn bench_stft(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, noisy) = clip(&mut rng);
    let cfg = desk_spectro();
    let spec = stft(&noisy, &cfg).unwrap();
    c.bench_function("stft 4000 samples", |b| {
        b.iter(|| stft(black_box(&noisy), &cfg).unwrap())
    });
    c.bench_function("istft 4000 samples", |b| {
        b.iter(|| istft(black_box(&spec), &cfg, noisy.len(), noisy.sample_rate()).unwrap())
    });
}

fn bench_solvers(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (clean, noisy) = clip(&mut rng);
    let (_, y) = prepare_pair(&clean, &noisy, &desk_spectro()).unwrap();
    let sde = SdeSpec::FlowEquivalent { sigma: 0.487 };
    let vf = model(Mode::VectorField, &mut rng);
    let score = model(Mode::Score { sigma: 0.487 }, &mut rng);
    let mut group = c.benchmark_group("sampler NFE 5 on a 0.5 s clip");
    for sampler in Sampler::ALL {
        let inf = Inference::new(sampler, 5, PathSpec::default(), sde, 0.03);
        let m = if sampler.needs_score() { &score } else { &vf };
        group.bench_function(sampler.name(), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            b.iter(|| inf.run(m, black_box(&y), &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_model, bench_stft, bench_solvers);
criterion_main!(benches);
