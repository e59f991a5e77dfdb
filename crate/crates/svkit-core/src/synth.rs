//! Deterministic synthetic corpora for desk-scale experiments: spectral
//! envelope speakers for verification training and tone-bursts-in-noise
//! for detector training.

use alloc::vec;
use alloc::vec::Vec;
use rand::RngExt;

use crate::audio::AudioBuffer;
use crate::features::{extract_mfcc, FeatureMatrix};
use crate::rng;
use crate::vad::MaskLabels;
use crate::{math, Result};

/// Speaker-specific resonance template.
#[derive(Debug, Clone)]
pub struct SpeakerVoice {
    pub formants: [f64; 3],
}

/// Deterministic voice for a speaker index under a corpus seed.
pub fn speaker_voice(seed: u64, speaker: usize) -> SpeakerVoice {
    let mut rng = rng::for_item(seed, speaker as u64);
    // spread the low formant on a coarse grid so speakers stay distinct
    let f1 = 300.0 + 60.0 * (speaker % 8) as f64 + rng.random_range(0.0..30.0);
    let f2 = 900.0 + rng.random_range(0.0..900.0);
    let f3 = 2000.0 + rng.random_range(0.0..1400.0);
    SpeakerVoice { formants: [f1, f2, f3] }
}

/// One synthetic utterance: the speaker's resonances with per-utterance
/// phase/level variation, amplitude modulation and additive noise.
pub fn speaker_utterance(
    seed: u64,
    speaker: usize,
    utt: usize,
    secs: f64,
    sample_rate: u32,
) -> AudioBuffer {
    let voice = speaker_voice(seed, speaker);
    let mut rng = rng::for_item(seed ^ 0x9e37_79b9_7f4a_7c15, (speaker as u64) << 20 | utt as u64);
    let n = (secs * sample_rate as f64) as usize;
    let mut samples = vec![0.0; n];
    for (fi, &f) in voice.formants.iter().enumerate() {
        let phase: f64 = rng.random_range(0.0..2.0 * math::PI);
        let level = [0.5, 0.35, 0.25][fi] * rng.random_range(0.8..1.2);
        let jitter = rng.random_range(-0.01..0.01);
        let freq = f * (1.0 + jitter);
        for (i, s) in samples.iter_mut().enumerate() {
            let t = i as f64 / sample_rate as f64;
            *s += level * math::sin(2.0 * math::PI * freq * t + phase);
        }
    }
    // 4 Hz amplitude modulation and a noise floor
    let mod_phase: f64 = rng.random_range(0.0..2.0 * math::PI);
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / sample_rate as f64;
        let env = 0.65 + 0.35 * math::sin(2.0 * math::PI * 4.0 * t + mod_phase);
        *s = *s * env + rng.random_range(-0.05..0.05);
    }
    AudioBuffer::new(samples, sample_rate)
}

/// Labelled synthetic corpus of (utterance, speaker id) pairs.
pub fn speaker_corpus(
    seed: u64,
    n_speakers: usize,
    utts_per_speaker: usize,
    secs: f64,
    sample_rate: u32,
) -> Vec<(AudioBuffer, usize)> {
    let mut out = Vec::with_capacity(n_speakers * utts_per_speaker);
    for s in 0..n_speakers {
        for u in 0..utts_per_speaker {
            out.push((speaker_utterance(seed, s, u, secs, sample_rate), s));
        }
    }
    out
}

/// Tone-burst-in-noise signal with per-sample speech extents, for the
/// detector corpus. Returns the signal and burst intervals in samples.
pub fn tone_burst_signal(seed: u64, n_samples: usize, sample_rate: u32) -> (AudioBuffer, Vec<(usize, usize)>) {
    let mut rng = rng::from_seed(seed);
    let mut samples: Vec<f64> = (0..n_samples).map(|_| rng.random_range(-0.02..0.02)).collect();
    let mut bursts = Vec::new();
    let mut cursor = 0usize;
    while cursor + sample_rate as usize / 5 < n_samples {
        let gap = rng.random_range(sample_rate as usize / 10..sample_rate as usize / 2);
        let start = cursor + gap;
        if start >= n_samples {
            break;
        }
        let len = rng.random_range(sample_rate as usize / 5..sample_rate as usize);
        let end = (start + len).min(n_samples);
        let f0: f64 = rng.random_range(180.0..420.0);
        let phase: f64 = rng.random_range(0.0..2.0 * math::PI);
        for i in start..end {
            let t = i as f64 / sample_rate as f64;
            let mut v = 0.0;
            for h in 1..=3 {
                v += 0.4 / h as f64 * math::sin(2.0 * math::PI * f0 * h as f64 * t + phase);
            }
            samples[i] += v;
        }
        bursts.push((start, end));
        cursor = end;
    }
    (AudioBuffer::new(samples, sample_rate), bursts)
}

/// Frame labels for burst intervals: a frame is speech when its center
/// falls inside a burst.
pub fn frame_labels(
    bursts: &[(usize, usize)],
    n_frames: usize,
    frame_len: usize,
    hop: usize,
) -> MaskLabels {
    let labels = (0..n_frames)
        .map(|t| {
            let center = t * hop + frame_len / 2;
            bursts.iter().any(|&(s, e)| center >= s && center < e)
        })
        .collect();
    MaskLabels::new(labels)
}

/// Detector corpus: 128-frame windows of 8 kHz MFCC-23 with frame labels.
pub fn vad_corpus(seed: u64, n_windows: usize) -> Result<Vec<(FeatureMatrix, MaskLabels)>> {
    let sample_rate = 8000;
    let frame_len = 200;
    let hop = 160;
    let window = 128usize;
    let samples_needed = frame_len + (window + 1) * hop;
    let mut out = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let (buf, bursts) = tone_burst_signal(seed.wrapping_add(w as u64), samples_needed, sample_rate);
        let feats = extract_mfcc(&buf, 23, 23)?;
        let labels = frame_labels(&bursts, feats.rows(), frame_len, hop);
        let keep: Vec<usize> = (0..window).collect();
        let feats = feats.select_rows(&keep);
        let labels = MaskLabels::new(labels.labels[..window].to_vec());
        out.push((feats, labels));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voices_are_deterministic_and_distinct() {
        let a = speaker_voice(1, 0);
        let b = speaker_voice(1, 0);
        assert_eq!(a.formants, b.formants);
        let c = speaker_voice(1, 1);
        assert_ne!(a.formants, c.formants);
    }

    #[test]
    fn utterances_differ_within_speaker_but_share_resonances() {
        let u0 = speaker_utterance(2, 0, 0, 0.3, 16000);
        let u1 = speaker_utterance(2, 0, 1, 0.3, 16000);
        assert_ne!(u0.samples, u1.samples);
        assert_eq!(u0.len(), u1.len());
    }

    #[test]
    fn corpus_shape() {
        let corpus = speaker_corpus(3, 4, 2, 0.2, 16000);
        assert_eq!(corpus.len(), 8);
        assert!(corpus.iter().all(|(b, _)| b.len() == 3200));
        assert_eq!(corpus.iter().filter(|(_, s)| *s == 3).count(), 2);
    }

    #[test]
    fn burst_labels_land_on_bursts() {
        let (buf, bursts) = tone_burst_signal(7, 20000, 8000);
        assert!(!bursts.is_empty());
        let labels = frame_labels(&bursts, 100, 200, 160);
        assert!(labels.labels.iter().any(|&l| l));
        assert!(labels.labels.iter().any(|&l| !l));
        let _ = buf;
    }

    #[test]
    fn vad_corpus_windows_are_well_formed() {
        let corpus = vad_corpus(11, 4).unwrap();
        assert_eq!(corpus.len(), 4);
        for (feats, labels) in &corpus {
            assert_eq!(feats.rows(), 128);
            assert_eq!(feats.cols(), 23);
            assert_eq!(labels.len(), 128);
        }
        // deterministic
        let again = vad_corpus(11, 4).unwrap();
        assert_eq!(corpus[0].0.data(), again[0].0.data());
    }
}
