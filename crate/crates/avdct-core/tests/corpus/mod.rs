//! Deterministic synthetic corpus: correlated multi-channel recordings of
//! band-limited sinusoids plus 5% measurement noise.
//!
//! Every channel carries a shared base signal at its own gain, mirroring the
//! inter-channel correlation of real electrode arrays. The base mixes two
//! strong components on low bins with a floor of faint components across the
//! mid band, all phase-aligned to the transform grid up to a small jitter.

use avdct_core::Frame;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

const STRONG_COMPONENTS: usize = 2;
const STRONG_MAGNITUDE: (f64, f64) = (3.4, 5.7);
const STRONG_BAND: (usize, usize) = (1, 10);
const MICRO_BAND: (usize, usize) = (11, 40);
const MICRO_MAGNITUDE: (f64, f64) = (0.015, 0.08);
const NOISE_LEVEL: f64 = 0.05;

fn base_signal(rng: &mut ChaCha20Rng, block_len: usize) -> Vec<f64> {
    let lf = block_len as f64;
    let mut comps: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..STRONG_COMPONENTS {
        let magnitude = rng.random_range(STRONG_MAGNITUDE.0..STRONG_MAGNITUDE.1);
        let bin = rng.random_range(STRONG_BAND.0..=STRONG_BAND.1) as f64;
        let jitter = rng.random_range(-0.1..0.1);
        comps.push((magnitude / (lf / 2.0).sqrt(), bin, jitter));
    }
    for bin in MICRO_BAND.0..=MICRO_BAND.1 {
        let magnitude = rng
            .random_range(MICRO_MAGNITUDE.0.ln()..MICRO_MAGNITUDE.1.ln())
            .exp();
        let jitter = rng.random_range(-0.1..0.1);
        comps.push((magnitude / (lf / 2.0).sqrt(), bin as f64, jitter));
    }
    let mut base: Vec<f64> = (0..block_len)
        .map(|t| {
            comps
                .iter()
                .map(|(a, k, p)| a * (std::f64::consts::PI * (k + 0.5) * t as f64 / lf + p).cos())
                .sum()
        })
        .collect();
    // shared background activity at the same 5% level as the sensor noise
    let rms = (base.iter().map(|v| v * v).sum::<f64>() / lf).sqrt();
    let sigma = NOISE_LEVEL * rms;
    for v in base.iter_mut() {
        *v += sigma * gaussian(rng);
    }
    base
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Generate `count` frames of `channels` x `block_len` samples.
pub fn sinusoid_frames(seed: u64, count: usize, channels: usize, block_len: usize) -> Vec<Frame> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let base = base_signal(&mut rng, block_len);
            let mut data = Vec::with_capacity(channels * block_len);
            for c in 0..channels {
                let gain = 0.7 + 0.1 * c as f64 / channels as f64;
                let mut chan: Vec<f64> = base.iter().map(|v| v * gain).collect();
                let rms = (chan.iter().map(|v| v * v).sum::<f64>() / block_len as f64).sqrt();
                let sigma = NOISE_LEVEL * rms;
                for v in chan.iter_mut() {
                    *v += sigma * gaussian(&mut rng);
                }
                data.extend(chan);
            }
            Frame::from_vec(channels, block_len, data).expect("corpus dimensions are consistent")
        })
        .collect()
}
