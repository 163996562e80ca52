use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Harmonics per synthetic source.
pub const HARMONICS: usize = 4;
/// Fundamental range shared by every source.
pub const F0_RANGE: (f64, f64) = (90.0, 300.0);

/// Independent sub-seed for `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    /// RMS-normalized waveform.
    pub waveform: Vec<f64>,
    /// Activity in `[0, 1]`, averaged per video frame.
    pub envelope: Vec<f64>,
    /// Unit vector of length `d_v − 1` that sets the harmonic balance.
    pub timbre: Vec<f64>,
    pub f0: f64,
}

/// Shape of a synthetic source.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceParams {
    pub samples: usize,
    pub sample_rate: u32,
    pub f0_range: (f64, f64),
    pub timbre_dims: usize,
    pub frames: usize,
}

/// Relative amplitudes of the harmonics for a timbre vector. Each harmonic has
/// a fixed direction in timbre space; alignment with it boosts that harmonic.
pub fn harmonic_amplitudes(timbre: &[f64]) -> [f64; HARMONICS] {
    let mut amps = [0.0; HARMONICS];
    for (h, a) in amps.iter_mut().enumerate() {
        let proj: f64 = timbre
            .iter()
            .enumerate()
            .map(|(j, u)| u * (PI * (h as f64 + 0.5) * (j as f64 + 1.0) / HARMONICS as f64).cos())
            .sum();
        *a = (1.5 * proj).exp() / (h as f64 + 1.0).sqrt();
    }
    amps
}

/// On/off gate with smoothed attack and release, at sample rate.
fn activity(rng: &mut impl Rng, samples: usize, sr: f64) -> Vec<f64> {
    let mut gate = vec![0.0; samples];
    let mut on = rng.random_bool(0.5);
    let mut t = 0usize;
    let mut any_on = false;
    while t < samples {
        let secs = if on { rng.random_range(0.25..0.7) } else { rng.random_range(0.1..0.45) };
        let len = ((secs * sr) as usize).max(1);
        let end = (t + len).min(samples);
        if on {
            gate[t..end].fill(1.0);
            any_on = true;
        }
        t = end;
        on = !on;
    }
    if !any_on {
        let start = samples / 4;
        gate[start..samples - start].fill(1.0);
    }
    let attack = 1.0 - (-1.0 / (0.01 * sr)).exp();
    let release = 1.0 - (-1.0 / (0.04 * sr)).exp();
    let mut env = vec![0.0; samples];
    let mut y = 0.0;
    for (e, g) in env.iter_mut().zip(&gate) {
        let k = if *g > y { attack } else { release };
        y += k * (g - y);
        *e = y;
    }
    env
}

/// Frame means of a sample-rate signal.
pub fn frame_means(x: &[f64], frames: usize) -> Vec<f64> {
    let n = x.len();
    (0..frames)
        .map(|j| {
            let (a, b) = (j * n / frames, ((j + 1) * n / frames).max(j * n / frames + 1).min(n));
            x[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect()
}

pub fn synth_source(seed: u64, p: &SourceParams) -> Source {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = p.sample_rate as f64;
    let f0 = rng.random_range(p.f0_range.0..=p.f0_range.1);
    let mut timbre: Vec<f64> = (0..p.timbre_dims).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = timbre.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        timbre.iter_mut().for_each(|v| *v /= norm);
    }
    let amps = harmonic_amplitudes(&timbre);
    let phases: Vec<f64> = (0..HARMONICS).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let vib_rate = rng.random_range(3.0..6.0);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let env = activity(&mut rng, p.samples, sr);

    let mut theta = 0.0;
    let mut wave = Vec::with_capacity(p.samples);
    for (t, e) in env.iter().enumerate() {
        let f = f0 * (1.0 + 0.02 * (2.0 * PI * vib_rate * t as f64 / sr + vib_phase).sin());
        theta += 2.0 * PI * f / sr;
        let mut s = 0.0;
        for h in 0..HARMONICS {
            s += amps[h] * ((h as f64 + 1.0) * theta + phases[h]).sin();
        }
        wave.push(e * s);
    }
    let rms = (wave.iter().map(|v| v * v).sum::<f64>() / p.samples as f64).sqrt();
    wave.iter_mut().for_each(|v| *v /= rms);
    Source { waveform: wave, envelope: frame_means(&env, p.frames), timbre, f0 }
}

/// `[d_v, F_V]` row-major: envelope, then the timbre vector held constant,
/// plus white noise at `cue_snr_db` relative to the clean stream's power.
/// The noise is rescaled to hit the target power exactly. Infinite SNR
/// disables it.
pub fn make_cues(envelope: &[f64], timbre: &[f64], noise_seed: u64, cue_snr_db: f64) -> Vec<f64> {
    let frames = envelope.len();
    let mut out = Vec::with_capacity(frames * (1 + timbre.len()));
    out.extend_from_slice(envelope);
    for &u in timbre {
        out.extend(std::iter::repeat_n(u, frames));
    }
    if cue_snr_db.is_finite() {
        let power = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let noise: Vec<f64> = (0..out.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let raw = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
        let k = (power / 10f64.powf(cue_snr_db / 10.0) / raw).sqrt();
        for (o, n) in out.iter_mut().zip(noise) {
            *o += k * n;
        }
    }
    out
}

/// First-order autoregressive Gaussian noise, `x[t] = ρ·x[t−1] + w[t]`.
pub fn colored_noise(seed: u64, samples: usize, rho: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = 0.0;
    (0..samples)
        .map(|_| {
            let w: f64 = StandardNormal.sample(&mut rng);
            x = rho * x + w;
            x
        })
        .collect()
}

pub fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Sum of sources in speaker order.
pub fn sum_sources(sources: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = sources[0].clone();
    for s in &sources[1..] {
        for (a, b) in acc.iter_mut().zip(s) {
            *a += b;
        }
    }
    acc
}

/// Scales `noise_raw` so the summed sources sit `snr_db` above it and returns
/// `(mixture, scaled noise)`. The mixture adds speakers in order, then noise.
pub fn mix_at_snr(sources: &[Vec<f64>], noise_raw: &[f64], snr_db: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if sources.is_empty() {
        return Err(Error::Domain("mix_at_snr needs at least one source".into()));
    }
    let n = noise_raw.len();
    if let Some(bad) = sources.iter().find(|s| s.len() != n) {
        return Err(Error::shape("mix_at_snr", format!("source has {} samples, noise {n}", bad.len())));
    }
    let p_noise = mean_power(noise_raw);
    if p_noise == 0.0 {
        return Err(Error::Domain("noise has zero power".into()));
    }
    let speech = sum_sources(sources);
    let k = (mean_power(&speech) / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let noise: Vec<f64> = noise_raw.iter().map(|v| v * k).collect();
    let mix = speech.iter().zip(&noise).map(|(s, v)| s + v).collect();
    Ok((mix, noise))
}
