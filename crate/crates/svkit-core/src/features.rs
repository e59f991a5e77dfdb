//! Log mel-filterbank and cepstral features with sliding CMN and global
//! CMVN. Framing, filter ranges and floors follow fixed conventions so
//! the same bytes come out on every run.

use alloc::vec;
use alloc::vec::Vec;

use crate::audio::{AudioBuffer, RATE_16K, RATE_8K};
use crate::math;
use crate::{Error, Result};

pub const PREEMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// 80 log mel-filterbank energies, 16 kHz, 10 ms hop.
    Mfb80,
    /// 40 cepstra (incl. C0) from a 40-filter bank, 16 kHz, 10 ms hop.
    Mfcc40,
    /// 23 cepstra (incl. C0) from a 23-filter bank, 8 kHz, 20 ms hop.
    Mfcc23,
}

impl FeatureKind {
    pub fn dims(self) -> usize {
        match self {
            FeatureKind::Mfb80 => 80,
            FeatureKind::Mfcc40 => 40,
            FeatureKind::Mfcc23 => 23,
        }
    }

    pub fn sample_rate(self) -> u32 {
        match self {
            FeatureKind::Mfcc23 => RATE_8K,
            _ => RATE_16K,
        }
    }

    pub fn frame_len_secs(self) -> f64 {
        0.025
    }

    pub fn frame_hop_secs(self) -> f64 {
        match self {
            FeatureKind::Mfcc23 => 0.020,
            _ => 0.010,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Mfb80 => 0,
            FeatureKind::Mfcc40 => 1,
            FeatureKind::Mfcc23 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(FeatureKind::Mfb80),
            1 => Ok(FeatureKind::Mfcc40),
            2 => Ok(FeatureKind::Mfcc23),
            other => Err(Error::Format(alloc::format!("unknown feature kind code {other}"))),
        }
    }

    fn fft_size(self) -> usize {
        match self {
            FeatureKind::Mfcc23 => 256,
            _ => 512,
        }
    }

    fn mel_range(self) -> (f64, f64) {
        match self {
            FeatureKind::Mfcc23 => (20.0, 3800.0),
            _ => (20.0, 7600.0),
        }
    }
}

/// frames x dims feature matrix with frame timing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    pub frame_hop: f64,
    pub frame_len: f64,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(
        data: Vec<f64>,
        rows: usize,
        cols: usize,
        frame_hop: f64,
        frame_len: f64,
        kind: FeatureKind,
    ) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(FeatureMatrix { data, rows, cols, frame_hop, frame_len, kind })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// New matrix holding the given frame indices, in order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            data,
            rows: rows.len(),
            cols: self.cols,
            frame_hop: self.frame_hop,
            frame_len: self.frame_len,
            kind: self.kind,
        }
    }
}

/// Number of full frames: floor((n - len)/hop) + 1, no padding.
pub fn frame_count(n_samples: usize, frame_len: usize, hop: usize) -> usize {
    if n_samples < frame_len {
        0
    } else {
        (n_samples - frame_len) / hop + 1
    }
}

/// HTK mel scale.
fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * math::ln_1p(hz / 700.0)
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (math::exp(mel / 1127.0) - 1.0)
}

/// Triangular mel filterbank as per-filter (weights over FFT bins).
fn mel_filterbank(n_mels: usize, nfft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let n_bins = nfft / 2 + 1;
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / nfft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Center frequencies (Hz) of the mel filters; used by spectral-peak
/// checks and the synthetic corpus.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Vec<f64> {
    let _ = sample_rate;
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

fn log_mel_frames(buf: &AudioBuffer, kind: FeatureKind, n_mels: usize) -> Result<(Vec<f64>, usize)> {
    if buf.sample_rate != kind.sample_rate() {
        return Err(Error::InvalidInput(alloc::format!(
            "feature kind expects {} Hz input, got {}",
            kind.sample_rate(),
            buf.sample_rate
        )));
    }
    let frame_len = (kind.frame_len_secs() * buf.sample_rate as f64) as usize;
    let hop = (kind.frame_hop_secs() * buf.sample_rate as f64) as usize;
    if buf.len() < frame_len {
        return Err(Error::InvalidInput(alloc::format!(
            "signal of {} samples shorter than one {frame_len}-sample frame",
            buf.len()
        )));
    }
    let nfft = kind.fft_size();
    let (fmin, fmax) = kind.mel_range();
    let bank = mel_filterbank(n_mels, nfft, buf.sample_rate, fmin, fmax);
    let window = math::hamming_window(frame_len);
    let n_frames = frame_count(buf.len(), frame_len, hop);

    let mut out = Vec::with_capacity(n_frames * n_mels);
    let mut frame = vec![0.0; frame_len];
    for t in 0..n_frames {
        let start = t * hop;
        frame.copy_from_slice(&buf.samples[start..start + frame_len]);
        // per-frame preemphasis, first sample against itself
        for j in (1..frame_len).rev() {
            frame[j] -= PREEMPHASIS * frame[j - 1];
        }
        frame[0] -= PREEMPHASIS * frame[0];
        for (s, w) in frame.iter_mut().zip(window.iter()) {
            *s *= w;
        }
        let power = math::power_spectrum(&frame, nfft);
        for filt in &bank {
            let e: f64 = filt.iter().zip(power.iter()).map(|(&w, &p)| w * p).sum();
            out.push(math::ln(e.max(LOG_FLOOR)));
        }
    }
    Ok((out, n_frames))
}

/// 80-dimensional log mel-filterbank energies at 16 kHz (25 ms frames,
/// 10 ms hop).
pub fn extract_mfb(buf: &AudioBuffer, n_mels: usize) -> Result<FeatureMatrix> {
    let kind = FeatureKind::Mfb80;
    if n_mels != kind.dims() {
        return Err(Error::InvalidInput(alloc::format!("MFB bank is {}-dim, got {n_mels}", kind.dims())));
    }
    let (data, rows) = log_mel_frames(buf, kind, n_mels)?;
    FeatureMatrix::new(data, rows, n_mels, kind.frame_hop_secs(), kind.frame_len_secs(), kind)
}

/// Orthonormal DCT-II matrix, `n_ceps` x `n_mels`.
fn dct_matrix(n_ceps: usize, n_mels: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(n_ceps * n_mels);
    for k in 0..n_ceps {
        let scale = if k == 0 {
            math::sqrt(1.0 / n_mels as f64)
        } else {
            math::sqrt(2.0 / n_mels as f64)
        };
        for j in 0..n_mels {
            m.push(scale * math::cos(math::PI * k as f64 * (j as f64 + 0.5) / n_mels as f64));
        }
    }
    m
}

/// MFCC with C0 retained: (40 ceps, 40 mels) at 16 kHz or (23, 23) at
/// 8 kHz.
pub fn extract_mfcc(buf: &AudioBuffer, n_ceps: usize, n_mels: usize) -> Result<FeatureMatrix> {
    let kind = match (n_ceps, buf.sample_rate) {
        (40, RATE_16K) => FeatureKind::Mfcc40,
        (23, RATE_8K) => FeatureKind::Mfcc23,
        _ => {
            return Err(Error::InvalidInput(alloc::format!(
                "unsupported MFCC configuration: {n_ceps} ceps at {} Hz",
                buf.sample_rate
            )))
        }
    };
    if n_mels < n_ceps {
        return Err(Error::InvalidInput("mel bank smaller than cepstral order".into()));
    }
    let (logmels, rows) = log_mel_frames(buf, kind, n_mels)?;
    let dct = dct_matrix(n_ceps, n_mels);
    let mut data = Vec::with_capacity(rows * n_ceps);
    for t in 0..rows {
        let lm = &logmels[t * n_mels..(t + 1) * n_mels];
        for k in 0..n_ceps {
            let row = &dct[k * n_mels..(k + 1) * n_mels];
            data.push(row.iter().zip(lm.iter()).map(|(&a, &b)| a * b).sum());
        }
    }
    FeatureMatrix::new(data, rows, n_ceps, kind.frame_hop_secs(), kind.frame_len_secs(), kind)
}

/// Sliding-window cepstral mean subtraction. The window is centered on
/// each frame and clamped (truncated) at the utterance edges.
pub fn cmn_sliding(feats: &FeatureMatrix, window_secs: f64) -> FeatureMatrix {
    let t_frames = feats.rows();
    let dims = feats.cols();
    if t_frames == 0 {
        return feats.clone();
    }
    let w = (math::round(window_secs / feats.frame_hop) as usize).max(1);
    let mut data = Vec::with_capacity(t_frames * dims);
    for t in 0..t_frames {
        let lo = t.saturating_sub(w / 2);
        let hi = (t + (w - w / 2)).min(t_frames);
        let count = (hi - lo) as f64;
        for d in 0..dims {
            let mut sum = 0.0;
            for r in lo..hi {
                sum += feats.at(r, d);
            }
            data.push(feats.at(t, d) - sum / count);
        }
    }
    FeatureMatrix::new(data, t_frames, dims, feats.frame_hop, feats.frame_len, feats.kind).unwrap()
}

/// Global mean/variance normalization over the utterance. Dimensions with
/// zero variance are mean-centered only.
pub fn cmvn_global(feats: &FeatureMatrix) -> Result<FeatureMatrix> {
    let t_frames = feats.rows();
    let dims = feats.cols();
    if t_frames < 2 {
        return Err(Error::InvalidInput("global CMVN needs at least 2 frames".into()));
    }
    let mut means = vec![0.0; dims];
    for t in 0..t_frames {
        for d in 0..dims {
            means[d] += feats.at(t, d);
        }
    }
    for m in means.iter_mut() {
        *m /= t_frames as f64;
    }
    let mut vars = vec![0.0; dims];
    for t in 0..t_frames {
        for d in 0..dims {
            let diff = feats.at(t, d) - means[d];
            vars[d] += diff * diff;
        }
    }
    for v in vars.iter_mut() {
        *v /= t_frames as f64;
    }
    let mut data = Vec::with_capacity(t_frames * dims);
    for t in 0..t_frames {
        for d in 0..dims {
            let centered = feats.at(t, d) - means[d];
            // treat rounding residue on constant columns as zero variance
            let degenerate = vars[d] <= means[d] * means[d] * 1e-28;
            data.push(if degenerate { centered } else { centered / math::sqrt(vars[d]) });
        }
    }
    FeatureMatrix::new(data, t_frames, dims, feats.frame_hop, feats.frame_len, feats.kind)
}
