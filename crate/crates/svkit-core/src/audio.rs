//! Mono audio buffers: resampling, SNR-controlled mixing, and the noise
//! length fitting used by augmentation.

use alloc::vec;
use alloc::vec::Vec;
use rand::RngExt;

use crate::math;
use crate::{Error, Result};

pub const RATE_8K: u32 = 8000;
pub const RATE_16K: u32 = 16000;

/// Mono PCM signal, full scale 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioBuffer { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude over the full extent.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |acc, &s| acc.max(math::abs(s)))
    }
}

const TAPS_PER_PHASE: usize = 16;
const KAISER_BETA: f64 = 8.0;

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn valid_rate(rate: u32) -> Result<()> {
    if rate == RATE_8K || rate == RATE_16K {
        Ok(())
    } else {
        Err(Error::Unsupported(alloc::format!("sample rate {rate} (want 8000 or 16000)")))
    }
}

/// Rational resampler: upsample by L, windowed-sinc lowpass (Kaiser
/// beta=8, 16 taps per phase), downsample by M. Identity when the rates
/// already match.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    valid_rate(buf.sample_rate)?;
    valid_rate(target_rate)?;
    if buf.sample_rate == target_rate {
        return Ok(buf.clone());
    }
    let g = gcd(target_rate, buf.sample_rate);
    let up = (target_rate / g) as usize;
    let down = (buf.sample_rate / g) as usize;

    let taps = TAPS_PER_PHASE * up;
    let center = (taps - 1) as f64 / 2.0;
    // Cutoff at half the narrower Nyquist, expressed in the upsampled domain.
    let fc = 0.5 / up.max(down) as f64;
    let win = math::kaiser_window(taps, KAISER_BETA);
    let h: Vec<f64> = (0..taps)
        .map(|i| up as f64 * 2.0 * fc * math::sinc(2.0 * fc * (i as f64 - center)) * win[i])
        .collect();

    let n_in = buf.samples.len();
    let n_out = math::round(n_in as f64 * target_rate as f64 / buf.sample_rate as f64) as usize;
    let mut out = vec![0.0; n_out];
    let center_i = (taps - 1) as isize / 2;
    for (n, o) in out.iter_mut().enumerate() {
        // y[n] = sum_q h[n*M + center - L*q] * x[q]
        let base = (n * down) as isize + center_i;
        let q_hi = base.div_euclid(up as isize);
        let mut acc = 0.0;
        for t in 0..TAPS_PER_PHASE as isize + 1 {
            let q = q_hi - t;
            let j = base - up as isize * q;
            if j < 0 || j >= taps as isize {
                continue;
            }
            if q < 0 || q >= n_in as isize {
                continue;
            }
            acc += h[j as usize] * buf.samples[q as usize];
        }
        *o = acc;
    }
    Ok(AudioBuffer::new(out, target_rate))
}

/// Gain applied to `noise` so that 10*log10(P_speech / P_gained_noise)
/// equals `snr_db`.
pub fn snr_gain(speech_power: f64, noise_power: f64, snr_db: f64) -> Result<f64> {
    if speech_power <= 0.0 {
        return Err(Error::Numeric("zero-power speech in SNR mix".into()));
    }
    if noise_power <= 0.0 {
        return Err(Error::Numeric("zero-power noise in SNR mix".into()));
    }
    Ok(math::sqrt(speech_power / (noise_power * math::powf(10.0, snr_db / 10.0))))
}

/// Tile (wraparound) or crop noise to exactly `len` samples starting at
/// `offset` into the noise signal.
pub fn fit_noise(noise: &AudioBuffer, len: usize, offset: usize) -> AudioBuffer {
    let n = noise.samples.len();
    let samples = if n == 0 {
        vec![0.0; len]
    } else {
        (0..len).map(|i| noise.samples[(offset + i) % n]).collect()
    };
    AudioBuffer::new(samples, noise.sample_rate)
}

/// Seeded random-offset crop for noise longer than the target; wraparound
/// tiling otherwise.
pub fn fit_noise_seeded(noise: &AudioBuffer, len: usize, rng: &mut crate::rng::Rng) -> AudioBuffer {
    let n = noise.samples.len();
    let offset = if n > len { rng.random_range(0..n - len) } else { 0 };
    fit_noise(noise, len, offset)
}

/// speech + g * noise with g solving the requested SNR; powers are
/// measured over the full signal extent after fitting the noise to the
/// speech length (wraparound tile / front crop). The mix is not clipped.
pub fn mix_at_snr(speech: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<AudioBuffer> {
    if speech.sample_rate != noise.sample_rate {
        return Err(Error::InvalidInput(alloc::format!(
            "sample rate mismatch: speech {} vs noise {}",
            speech.sample_rate,
            noise.sample_rate
        )));
    }
    let fitted = if noise.len() == speech.len() {
        noise.clone()
    } else {
        fit_noise(noise, speech.len(), 0)
    };
    let g = snr_gain(speech.power(), fitted.power(), snr_db)?;
    let samples = speech
        .samples
        .iter()
        .zip(fitted.samples.iter())
        .map(|(&s, &n)| s + g * n)
        .collect();
    Ok(AudioBuffer::new(samples, speech.sample_rate))
}

/// SNR of `mix = speech + scaled_noise` re-estimated from the components.
pub fn measure_snr(speech: &AudioBuffer, scaled_noise: &AudioBuffer) -> f64 {
    10.0 * math::log10(speech.power() / scaled_noise.power())
}
