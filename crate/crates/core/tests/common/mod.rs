#![allow(dead_code)]

pub mod gradcheck;
pub mod probes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use climprobe::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values with magnitude at least `gap`, random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

use climprobe::emulator::{build_model, ArchConfig, ModelParams, ParamKind};

/// Random model whose batch-norm parameters and running statistics are
/// also randomized, so every layer does something non-trivial.
pub fn random_model(arch: &ArchConfig, seed: u64, shift: (f64, f64)) -> ModelParams<f64> {
    let mut m = build_model::<f64>(arch, seed).expect("valid architecture");
    let mut r = rng(seed ^ 0xB0B);
    let paths: Vec<String> = m.tensors().keys().cloned().collect();
    for p in paths {
        let kind = m.kind(&p).expect("known path");
        let t = m.tensor_mut(&p).expect("known path");
        let (lo, hi) = match kind {
            ParamKind::ConvKernel => continue,
            ParamKind::BnScale => (0.5, 1.5),
            ParamKind::BnShift => shift,
            ParamKind::BnRunningMean => (-0.3, 0.3),
            ParamKind::BnRunningVar => (0.5, 2.0),
        };
        for v in t.data_mut() {
            *v = r.random_range(lo..hi);
        }
    }
    m
}

/// A small desk-like architecture for quick tests.
pub fn small_arch() -> ArchConfig {
    use climprobe::emulator::BlockConfig;
    let mut a = ArchConfig::desk();
    a.input_months = 3;
    a.grid = (10, 14);
    a.stem.out_channels = 6;
    a.blocks = vec![
        BlockConfig::Dense {
            growth: 3,
            layers: 2,
        },
        BlockConfig::Down {
            compress: 5,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        BlockConfig::Up {
            compress: 5,
            target: (5, 7),
        },
    ];
    a.head.mid_channels = 4;
    a
}
