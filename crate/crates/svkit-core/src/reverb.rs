//! Image-source room impulse responses and the augmentation scheme that
//! reverberates speech and noise with different responses from the same
//! room before SNR mixing.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::RngExt;

use crate::audio::{mix_at_snr, AudioBuffer};
use crate::rng;
use crate::{math, Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Half-width of the fractional-delay sinc kernel in samples.
const SINC_HALF_WIDTH: isize = 4;
const TAIL_ENERGY_FRACTION: f64 = 1e-6;

/// Shoebox room with one source and one receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomSpec {
    /// Room dimensions in meters.
    pub dims: [f64; 3],
    pub source: [f64; 3],
    pub receiver: [f64; 3],
    /// Wall reflection coefficients, paired per axis: [x0, x1, y0, y1, z0, z1].
    pub beta: [f64; 6],
    pub fs: u32,
    pub max_order: usize,
    pub c: f64,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if self.dims[axis] <= 0.0 {
                return Err(Error::InvalidInput("non-positive room dimension".into()));
            }
            for p in [&self.source, &self.receiver] {
                if p[axis] <= 0.0 || p[axis] >= self.dims[axis] {
                    return Err(Error::InvalidInput(format!(
                        "position {} outside the room on axis {axis}",
                        p[axis]
                    )));
                }
            }
        }
        if self.source == self.receiver {
            return Err(Error::InvalidInput("source and receiver coincide".into()));
        }
        if self.beta.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(Error::InvalidInput("reflection coefficients must lie in [0, 1)".into()));
        }
        if self.fs == 0 || self.c <= 0.0 {
            return Err(Error::InvalidInput("bad sample rate or speed of sound".into()));
        }
        Ok(())
    }

    pub fn direct_distance(&self) -> f64 {
        let mut sq = 0.0;
        for axis in 0..3 {
            let d = self.source[axis] - self.receiver[axis];
            sq += d * d;
        }
        math::sqrt(sq)
    }
}

/// Room impulse response taps at the room's sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub room_id: String,
}

/// One image source: mirrored position and per-axis reflection counts.
fn image_amplitude_delay(
    room: &RoomSpec,
    n: [i64; 3],
    q: [i64; 3],
) -> (f64, f64) {
    let mut dist_sq = 0.0;
    let mut amp = 1.0;
    for axis in 0..3 {
        let img = (1 - 2 * q[axis]) as f64 * room.source[axis]
            + 2.0 * n[axis] as f64 * room.dims[axis];
        let d = img - room.receiver[axis];
        dist_sq += d * d;
        let hits_near = (n[axis] - q[axis]).unsigned_abs() as i32;
        let hits_far = n[axis].unsigned_abs() as i32;
        amp *= math::powi(room.beta[axis * 2], hits_near)
            * math::powi(room.beta[axis * 2 + 1], hits_far);
    }
    let dist = math::sqrt(dist_sq);
    (amp / (4.0 * math::PI * dist), dist * room.fs as f64 / room.c)
}

fn deposit_arrival(taps: &mut [f64], amplitude: f64, delay: f64) {
    let lo = math::ceil(delay - SINC_HALF_WIDTH as f64) as isize;
    let hi = math::floor(delay + SINC_HALF_WIDTH as f64) as isize;
    for t in lo..=hi {
        if t < 0 || t as usize >= taps.len() {
            continue;
        }
        let x = t as f64 - delay;
        let u = x / SINC_HALF_WIDTH as f64;
        let window = 0.5 * (1.0 + math::cos(math::PI * u));
        taps[t as usize] += amplitude * window * math::sinc(x);
    }
}

/// Classic shoebox image-source enumeration with magnitude amplitudes
/// `prod(beta^hits) / (4 pi d)` and windowed-sinc fractional delays. The
/// tail is trimmed once its energy drops below 1e-6 of the total.
pub fn generate_rir(room: &RoomSpec) -> Result<Rir> {
    room.validate()?;
    let order = room.max_order as i64;
    let n_span = (order + 1) / 2 + 1;
    // longest in-budget path bounds the buffer length
    let mut max_delay = 0.0f64;
    let mut arrivals: Vec<(f64, f64)> = Vec::new();
    for nx in -n_span..=n_span {
        for ny in -n_span..=n_span {
            for nz in -n_span..=n_span {
                for q in 0..8i64 {
                    let q = [q & 1, (q >> 1) & 1, (q >> 2) & 1];
                    let n = [nx, ny, nz];
                    let reflections: i64 =
                        (0..3).map(|a| (2 * n[a] - q[a]).abs()).sum();
                    if reflections > order {
                        continue;
                    }
                    let (amp, delay) = image_amplitude_delay(room, n, q);
                    max_delay = max_delay.max(delay);
                    arrivals.push((amp, delay));
                }
            }
        }
    }
    let len = math::ceil(max_delay) as usize + SINC_HALF_WIDTH as usize + 1;
    let mut taps = vec![0.0; len];
    for (amp, delay) in arrivals {
        deposit_arrival(&mut taps, amp, delay);
    }
    let total: f64 = taps.iter().map(|&t| t * t).sum();
    if total > 0.0 {
        let budget = TAIL_ENERGY_FRACTION * total;
        let mut tail = 0.0;
        let mut keep = taps.len();
        for i in (0..taps.len()).rev() {
            tail += taps[i] * taps[i];
            if tail >= budget {
                keep = i + 1;
                break;
            }
        }
        taps.truncate(keep.max(1));
    }
    Ok(Rir { taps, room_id: String::new() })
}

/// Direct O(n k) convolution.
pub fn convolve_direct(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    if signal.is_empty() || kernel.is_empty() {
        return vec![];
    }
    let mut out = vec![0.0; signal.len() + kernel.len() - 1];
    for (i, &s) in signal.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        for (j, &k) in kernel.iter().enumerate() {
            out[i + j] += s * k;
        }
    }
    out
}

/// FFT convolution, used when the direct cost gets large.
pub fn convolve_fft(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    if signal.is_empty() || kernel.is_empty() {
        return vec![];
    }
    let out_len = signal.len() + kernel.len() - 1;
    let n = math::next_pow2(out_len);
    let mut sr = vec![0.0; n];
    let mut si = vec![0.0; n];
    sr[..signal.len()].copy_from_slice(signal);
    let mut kr = vec![0.0; n];
    let mut ki = vec![0.0; n];
    kr[..kernel.len()].copy_from_slice(kernel);
    math::fft_radix2(&mut sr, &mut si, false);
    math::fft_radix2(&mut kr, &mut ki, false);
    for i in 0..n {
        let re = sr[i] * kr[i] - si[i] * ki[i];
        let im = sr[i] * ki[i] + si[i] * kr[i];
        sr[i] = re;
        si[i] = im;
    }
    math::fft_radix2(&mut sr, &mut si, true);
    sr.truncate(out_len);
    for v in sr.iter_mut() {
        *v /= n as f64;
    }
    sr
}

pub fn convolve(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    if signal.len().saturating_mul(kernel.len()) > 1 << 22 {
        convolve_fft(signal, kernel)
    } else {
        convolve_direct(signal, kernel)
    }
}

/// Sampling ranges for synthetic rooms.
#[derive(Debug, Clone)]
pub struct RoomRanges {
    pub dim_min: f64,
    pub dim_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Minimum clearance from any wall for sources and receivers.
    pub margin: f64,
    pub fs: u32,
    pub max_order: usize,
}

impl Default for RoomRanges {
    fn default() -> Self {
        RoomRanges {
            dim_min: 2.0,
            dim_max: 10.0,
            beta_min: 0.2,
            beta_max: 0.9,
            margin: 0.3,
            fs: 16000,
            max_order: 10,
        }
    }
}

/// Draw one room and two source positions (speech, noise) sharing the
/// geometry, wall coefficients and receiver. Deterministic per seed.
pub fn sample_room(seed: u64, ranges: &RoomRanges) -> Result<(RoomSpec, RoomSpec)> {
    if ranges.dim_min <= 2.0 * ranges.margin || ranges.dim_max < ranges.dim_min {
        return Err(Error::InvalidInput("room ranges leave no interior".into()));
    }
    let mut rng = rng::from_seed(seed);
    let mut dims = [0.0; 3];
    for d in dims.iter_mut() {
        *d = rng.random_range(ranges.dim_min..=ranges.dim_max);
    }
    let mut beta = [0.0; 6];
    for b in beta.iter_mut() {
        *b = rng.random_range(ranges.beta_min..=ranges.beta_max);
    }
    let point = |dims: &[f64; 3], rng: &mut rng::Rng| -> [f64; 3] {
        let mut p = [0.0; 3];
        for axis in 0..3 {
            p[axis] = rng.random_range(ranges.margin..=dims[axis] - ranges.margin);
        }
        p
    };
    let receiver = point(&dims, &mut rng);
    let distinct = |a: &[f64; 3], b: &[f64; 3]| -> bool {
        let sq: f64 = (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum();
        math::sqrt(sq) >= 0.2
    };
    let mut speech_source = point(&dims, &mut rng);
    while !distinct(&speech_source, &receiver) {
        speech_source = point(&dims, &mut rng);
    }
    let mut noise_source = point(&dims, &mut rng);
    while !distinct(&noise_source, &receiver) {
        noise_source = point(&dims, &mut rng);
    }
    let speech = RoomSpec {
        dims,
        source: speech_source,
        receiver,
        beta,
        fs: ranges.fs,
        max_order: ranges.max_order,
        c: SPEED_OF_SOUND,
    };
    let noise = RoomSpec { source: noise_source, ..speech.clone() };
    speech.validate()?;
    noise.validate()?;
    Ok((speech, noise))
}

/// Reverberate speech and noise with their room responses, rescale the
/// wet speech to the dry peak, then mix at the requested SNR measured
/// post-reverberation and trim to the speech length. Zero-power noise
/// bypasses the mix and returns the reverberated speech alone.
pub fn augment_utterance(
    speech: &AudioBuffer,
    noise: &AudioBuffer,
    rooms: &(RoomSpec, RoomSpec),
    snr_db: f64,
) -> Result<AudioBuffer> {
    if speech.sample_rate != rooms.0.fs || rooms.0.fs != rooms.1.fs {
        return Err(Error::InvalidInput("sample rate differs between audio and rooms".into()));
    }
    let rir_speech = generate_rir(&rooms.0)?;
    let mut wet_speech = convolve(&speech.samples, &rir_speech.taps);
    wet_speech.truncate(speech.len());
    // keep the wet level comparable to the dry input
    let dry_peak = speech.peak();
    let wet_peak = wet_speech.iter().fold(0.0f64, |a, &s| a.max(math::abs(s)));
    if wet_peak > 0.0 && dry_peak > 0.0 {
        let gain = dry_peak / wet_peak;
        for s in wet_speech.iter_mut() {
            *s *= gain;
        }
    }
    let wet_speech = AudioBuffer::new(wet_speech, speech.sample_rate);
    if noise.power() == 0.0 {
        return Ok(wet_speech);
    }
    if noise.sample_rate != speech.sample_rate {
        return Err(Error::InvalidInput("noise sample rate differs from speech".into()));
    }
    let rir_noise = generate_rir(&rooms.1)?;
    let mut wet_noise = convolve(&noise.samples, &rir_noise.taps);
    wet_noise.truncate(noise.len().max(1));
    let wet_noise = AudioBuffer::new(wet_noise, noise.sample_rate);
    mix_at_snr(&wet_speech, &wet_noise, snr_db)
}
