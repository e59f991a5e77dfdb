//! Voice activity detection: a C0 energy heuristic and the U-net
//! detector over half-overlapping 128-frame windows, with the BCE+dice
//! training objective.

use alloc::vec;
use alloc::vec::Vec;


use crate::features::{FeatureKind, FeatureMatrix};
use crate::nnet::arch::{self, UnetConfig};
use crate::nnet::graph::Graph;
use crate::nnet::train::TrainOutcome;
use crate::nnet::WeightStore;
use crate::rng;
use crate::tensor::Tensor;
use crate::{math, Error, Result};

pub const BCE_PROB_CLAMP: f64 = 1e-7;

/// Per-frame speech probabilities and thresholded decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechMask {
    pub probs: Vec<f64>,
    pub decisions: Vec<bool>,
    pub frame_hop: f64,
}

impl SpeechMask {
    pub fn from_probs(probs: Vec<f64>, threshold: f64, frame_hop: f64) -> Self {
        let decisions = probs.iter().map(|&p| p >= threshold).collect();
        SpeechMask { probs, decisions, frame_hop }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn speech_frames(&self) -> Vec<usize> {
        self.decisions.iter().enumerate().filter(|(_, &d)| d).map(|(i, _)| i).collect()
    }

    /// Re-grid the mask onto `target_len` frames at `target_hop` by
    /// nearest-frame lookup (used to align a 20 ms U-net mask with 10 ms
    /// features).
    pub fn resample_hop(&self, target_hop: f64, target_len: usize) -> SpeechMask {
        let mut probs = Vec::with_capacity(target_len);
        let mut decisions = Vec::with_capacity(target_len);
        for t in 0..target_len {
            let src = ((t as f64 * target_hop) / self.frame_hop) as usize;
            let src = src.min(self.probs.len().saturating_sub(1));
            probs.push(self.probs[src]);
            decisions.push(self.decisions[src]);
        }
        SpeechMask { probs, decisions, frame_hop: target_hop }
    }
}

/// Ground-truth binary frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLabels {
    pub labels: Vec<bool>,
}

impl MaskLabels {
    pub fn new(labels: Vec<bool>) -> Self {
        MaskLabels { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Kaldi-style C0 energy detector: a frame is speech when its C0 exceeds
/// `threshold + mean_scale * mean(C0)`, then decisions are strict-majority
/// smoothed over +-context frames.
pub fn energy_vad(
    feats: &FeatureMatrix,
    threshold: f64,
    mean_scale: f64,
    context: usize,
) -> Result<SpeechMask> {
    if feats.kind == FeatureKind::Mfb80 {
        return Err(Error::InvalidInput(
            "energy detection needs cepstral features carrying C0".into(),
        ));
    }
    let t_frames = feats.rows();
    if t_frames == 0 {
        return Ok(SpeechMask { probs: vec![], decisions: vec![], frame_hop: feats.frame_hop });
    }
    let c0: Vec<f64> = (0..t_frames).map(|t| feats.at(t, 0)).collect();
    let cutoff = threshold + mean_scale * math::mean(&c0);
    let raw: Vec<bool> = c0.iter().map(|&e| e > cutoff).collect();
    let decisions: Vec<bool> = (0..t_frames)
        .map(|t| {
            let lo = t.saturating_sub(context);
            let hi = (t + context + 1).min(t_frames);
            let votes = raw[lo..hi].iter().filter(|&&d| d).count();
            2 * votes > hi - lo
        })
        .collect();
    let probs = decisions.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
    Ok(SpeechMask { probs, decisions, frame_hop: feats.frame_hop })
}

/// Window start offsets: a half-window grid with the last window
/// right-aligned, covering every frame at least once and at most twice.
pub fn window_offsets(total_frames: usize, window: usize) -> Vec<usize> {
    let hop = window / 2;
    if total_frames <= window {
        return vec![0];
    }
    let last = total_frames - window;
    let m = last / hop;
    let mut offsets: Vec<usize> = if m * hop == last {
        (0..=m).map(|i| i * hop).collect()
    } else {
        let mut v: Vec<usize> = (0..m.max(1)).map(|i| i * hop).collect();
        v.push(last);
        v
    };
    offsets.dedup();
    offsets
}

/// Tile features into half-overlapping windows, run the detector on each
/// and average overlapping probabilities per frame. Inputs shorter than
/// one window are zero-padded and the mask truncated to the true length.
pub fn unet_vad_forward(
    feats: &FeatureMatrix,
    store: &WeightStore,
    threshold: f64,
) -> Result<SpeechMask> {
    let cfg = store.unet_config()?;
    if feats.cols() != cfg.input_dim {
        return Err(Error::ShapeMismatch(alloc::format!(
            "detector expects {}-dim features, got {}",
            cfg.input_dim,
            feats.cols()
        )));
    }
    let t_frames = feats.rows();
    if t_frames == 0 {
        return Ok(SpeechMask { probs: vec![], decisions: vec![], frame_hop: feats.frame_hop });
    }
    let window = cfg.window;
    let offsets = window_offsets(t_frames, window);
    let n = offsets.len();
    let mut batch = Tensor::zeros(&[n, window, cfg.input_dim, 1]);
    for (slot, &off) in offsets.iter().enumerate() {
        for t in 0..window {
            if off + t >= t_frames {
                break; // zero padding beyond the signal
            }
            for f in 0..cfg.input_dim {
                *batch.at4_mut(slot, t, f, 0) = feats.at(off + t, f);
            }
        }
    }
    let mut g = Graph::new(false);
    let input = g.leaf(batch);
    let out = arch::unet_forward(&mut g, input, store, &cfg)?;
    let probs_windows = g.value(out);
    let mut sum = vec![0.0; t_frames];
    let mut count = vec![0usize; t_frames];
    for (slot, &off) in offsets.iter().enumerate() {
        for t in 0..window {
            let frame = off + t;
            if frame >= t_frames {
                break;
            }
            sum[frame] += probs_windows.data()[slot * window + t];
            count[frame] += 1;
        }
    }
    let probs: Vec<f64> =
        sum.iter().zip(count.iter()).map(|(&s, &c)| s / c.max(1) as f64).collect();
    Ok(SpeechMask::from_probs(probs, threshold, feats.frame_hop))
}

/// Soft dice coefficient 2*sum(p*g) / (sum(p^2) + sum(g^2)); defined as 1
/// when both masks are identically zero.
pub fn dice_coefficient(probs: &[f64], labels: &[bool]) -> f64 {
    let mut inter = 0.0;
    let mut p_sq = 0.0;
    let mut g_sq = 0.0;
    for (&p, &l) in probs.iter().zip(labels.iter()) {
        let g = if l { 1.0 } else { 0.0 };
        inter += p * g;
        p_sq += p * p;
        g_sq += g * g;
    }
    if p_sq + g_sq == 0.0 {
        1.0
    } else {
        2.0 * inter / (p_sq + g_sq)
    }
}

/// bce_weight * BCE + dice_weight * (1 - dice), probabilities clamped to
/// [1e-7, 1 - 1e-7] inside the cross-entropy.
pub fn vad_loss(
    mask: &SpeechMask,
    labels: &MaskLabels,
    bce_weight: f64,
    dice_weight: f64,
) -> Result<f64> {
    Ok(vad_loss_grad(&mask.probs, &labels.labels, bce_weight, dice_weight)?.0)
}

/// Loss plus its gradient with respect to each probability.
pub fn vad_loss_grad(
    probs: &[f64],
    labels: &[bool],
    bce_weight: f64,
    dice_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let n = probs.len();
    if n == 0 {
        return Ok((0.0, vec![]));
    }
    let inv_n = 1.0 / n as f64;
    let mut bce = 0.0;
    let mut grad = vec![0.0; n];
    for (i, (&p, &l)) in probs.iter().zip(labels.iter()).enumerate() {
        let pc = p.clamp(BCE_PROB_CLAMP, 1.0 - BCE_PROB_CLAMP);
        let g = if l { 1.0 } else { 0.0 };
        bce -= (g * math::ln(pc) + (1.0 - g) * math::ln(1.0 - pc)) * inv_n;
        let clamped = !(BCE_PROB_CLAMP..=1.0 - BCE_PROB_CLAMP).contains(&p);
        if !clamped {
            grad[i] += bce_weight * inv_n * (pc - g) / (pc * (1.0 - pc));
        }
    }
    let mut inter = 0.0;
    let mut p_sq = 0.0;
    let mut g_sq = 0.0;
    for (&p, &l) in probs.iter().zip(labels.iter()) {
        let g = if l { 1.0 } else { 0.0 };
        inter += p * g;
        p_sq += p * p;
        g_sq += g * g;
    }
    let denom = p_sq + g_sq;
    let dice = if denom == 0.0 { 1.0 } else { 2.0 * inter / denom };
    if denom != 0.0 {
        for (i, (&p, &l)) in probs.iter().zip(labels.iter()).enumerate() {
            let g = if l { 1.0 } else { 0.0 };
            // d dice / d p_i = (2 g denom - 4 inter p) / denom^2
            let ddice = (2.0 * g * denom - 4.0 * inter * p) / (denom * denom);
            grad[i] -= dice_weight * ddice;
        }
    }
    Ok((bce_weight * bce + dice_weight * (1.0 - dice), grad))
}

/// Training configuration for the detector.
#[derive(Debug, Clone)]
pub struct VadTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub unet: UnetConfig,
}

impl Default for VadTrainConfig {
    fn default() -> Self {
        VadTrainConfig {
            seed: 0,
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.01,
            bce_weight: 1.0,
            dice_weight: 1.0,
            unet: UnetConfig::toy(),
        }
    }
}

/// Train the detector on labelled 128-frame windows with seeded SGD.
pub fn train_unet_toy(
    dataset: &[(FeatureMatrix, MaskLabels)],
    tc: &VadTrainConfig,
) -> Result<TrainOutcome> {
    let cfg = &tc.unet;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty detector training set".into()));
    }
    let with_speech = dataset.iter().filter(|(_, l)| l.labels.iter().any(|&b| b)).count();
    let with_silence = dataset.iter().filter(|(_, l)| l.labels.iter().any(|&b| !b)).count();
    if with_speech < 2 || with_silence < 2 {
        return Err(Error::InvalidInput(
            "detector training needs at least 2 windows containing each class".into(),
        ));
    }
    for (feats, labels) in dataset {
        if feats.rows() != cfg.window || feats.cols() != cfg.input_dim {
            return Err(Error::ShapeMismatch(alloc::format!(
                "training windows must be {}x{}, got {}x{}",
                cfg.window,
                cfg.input_dim,
                feats.rows(),
                feats.cols()
            )));
        }
        if labels.len() != cfg.window {
            return Err(Error::ShapeMismatch("label length differs from window".into()));
        }
    }
    let mut store = arch::init_unet(cfg, tc.seed);
    let mut rng = rng::from_seed(tc.seed.wrapping_add(1));
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let order = crate::nnet::train::shuffled_indices(dataset.len(), &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_ids in order.chunks(tc.batch_size) {
            let n = batch_ids.len();
            let mut batch = Tensor::zeros(&[n, cfg.window, cfg.input_dim, 1]);
            let mut labels: Vec<bool> = Vec::with_capacity(n * cfg.window);
            for (slot, &wi) in batch_ids.iter().enumerate() {
                let (feats, l) = &dataset[wi];
                for t in 0..cfg.window {
                    for f in 0..cfg.input_dim {
                        *batch.at4_mut(slot, t, f, 0) = feats.at(t, f);
                    }
                }
                labels.extend_from_slice(&l.labels);
            }
            let mut graph = Graph::new(true);
            let input = graph.leaf(batch);
            let probs_node = arch::unet_forward(&mut graph, input, &store, cfg)?;
            let probs = graph.value(probs_node).data().to_vec();
            let (loss, dprobs) = vad_loss_grad(&probs, &labels, tc.bce_weight, tc.dice_weight)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(alloc::format!(
                    "detector training diverged at epoch {epoch} (non-finite loss)"
                )));
            }
            epoch_loss += loss;
            batches += 1;
            if tc.learning_rate == 0.0 {
                continue;
            }
            let seed_grad = Tensor::from_vec(&[n, cfg.window], dprobs)?;
            let grads = graph.backward(&[(probs_node, seed_grad)])?;
            let param_grads = graph.param_grads(&grads);
            for (name, g) in &param_grads {
                let mut p = store.get(name)?.clone();
                for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= tc.learning_rate * gv;
                }
                store.set(name, p);
            }
            crate::nnet::train::apply_bn_updates(&mut store, &graph);
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(TrainOutcome { weights: store, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn mfcc_like(c0: &[f64]) -> FeatureMatrix {
        let dims = 3;
        let mut data = Vec::new();
        for &e in c0 {
            data.push(e);
            data.push(0.1);
            data.push(-0.2);
        }
        FeatureMatrix::new(data, c0.len(), dims, 0.01, 0.025, FeatureKind::Mfcc40).unwrap()
    }

    #[test]
    fn flat_energy_below_cutoff_is_all_nonspeech() {
        // constant C0 = 4 with threshold 5: cutoff 5 + 2 = 7, nothing passes
        let feats = mfcc_like(&[4.0; 20]);
        let mask = energy_vad(&feats, 5.0, 0.5, 2).unwrap();
        assert!(mask.decisions.iter().all(|&d| !d));
        let mask = energy_vad(&feats, 1.0, 0.5, 2).unwrap();
        assert!(mask.decisions.iter().all(|&d| d));
    }

    #[test]
    fn two_level_energy_splits_at_cutoff() {
        let mut c0 = vec![10.0; 30];
        c0.extend(vec![0.0; 30]);
        let feats = mfcc_like(&c0);
        // mean = 5, cutoff with threshold 0 and scale 1 = 5
        let mask = energy_vad(&feats, 0.0, 1.0, 0).unwrap();
        assert!(mask.decisions[..30].iter().all(|&d| d));
        assert!(mask.decisions[30..].iter().all(|&d| !d));
    }

    #[test]
    fn isolated_frame_is_smoothed_away() {
        let mut c0 = vec![0.0; 21];
        c0[10] = 100.0;
        let feats = mfcc_like(&c0);
        let raw = energy_vad(&feats, 0.0, 1.0, 0).unwrap();
        assert!(raw.decisions[10]);
        let smoothed = energy_vad(&feats, 0.0, 1.0, 2).unwrap();
        assert!(smoothed.decisions.iter().all(|&d| !d));
    }

    #[test]
    fn majority_vote_matches_brute_force_oracle() {
        let mut rng = rng::from_seed(42);
        let c0: Vec<f64> = (0..200).map(|_| rng.random_range(-5.0..5.0)).collect();
        let feats = mfcc_like(&c0);
        let context = 3usize;
        let mask = energy_vad(&feats, 0.2, 0.5, context).unwrap();
        let cutoff = 0.2 + 0.5 * math::mean(&c0);
        for t in 0..200usize {
            let lo = t.saturating_sub(context);
            let hi = (t + context + 1).min(200);
            let votes = (lo..hi).filter(|&r| c0[r] > cutoff).count();
            assert_eq!(mask.decisions[t], 2 * votes > hi - lo, "frame {t}");
        }
    }

    #[test]
    fn energy_vad_shift_invariance_with_unit_mean_scale() {
        let mut rng = rng::from_seed(7);
        let c0: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
        let shifted: Vec<f64> = c0.iter().map(|&e| e + 11.5).collect();
        let a = energy_vad(&mfcc_like(&c0), 0.3, 1.0, 2).unwrap();
        let b = energy_vad(&mfcc_like(&shifted), 0.3, 1.0, 2).unwrap();
        assert_eq!(a.decisions, b.decisions);
    }

    #[test]
    fn empty_input_gives_empty_mask() {
        let feats = FeatureMatrix::new(vec![], 0, 3, 0.01, 0.025, FeatureKind::Mfcc40).unwrap();
        let mask = energy_vad(&feats, 5.5, 0.5, 2).unwrap();
        assert!(mask.is_empty());
    }

    #[test]
    fn window_offsets_cover_every_frame_at_most_twice() {
        for total in [1usize, 64, 127, 128, 129, 150, 192, 200, 300, 1000] {
            let offsets = window_offsets(total, 128);
            let mut cover = vec![0usize; total];
            for &off in &offsets {
                for t in 0..128 {
                    if off + t < total {
                        cover[off + t] += 1;
                    }
                }
            }
            assert!(cover.iter().all(|&c| c >= 1), "hole with {total} frames: {offsets:?}");
            assert!(cover.iter().all(|&c| c <= 2), "over-cover with {total} frames: {offsets:?}");
        }
    }

    #[test]
    fn window_offsets_examples() {
        assert_eq!(window_offsets(128, 128), vec![0]);
        assert_eq!(window_offsets(192, 128), vec![0, 64]);
        assert_eq!(window_offsets(100, 128), vec![0]);
        assert_eq!(window_offsets(200, 128), vec![0, 72]);
    }

    #[test]
    fn dice_examples() {
        let p = [1.0, 0.0, 1.0];
        let g = [true, false, true];
        assert!((dice_coefficient(&p, &g) - 1.0).abs() < 1e-15);
        // p=(1,0), g=(1,1): 2*1 / (1 + 2) = 2/3
        assert!((dice_coefficient(&[1.0, 0.0], &[true, true]) - 2.0 / 3.0).abs() < 1e-15);
        // disjoint supports
        assert_eq!(dice_coefficient(&[1.0, 0.0], &[false, true]), 0.0);
        // all-zero convention
        assert_eq!(dice_coefficient(&[0.0, 0.0], &[false, false]), 1.0);
    }

    #[test]
    fn dice_stays_in_unit_interval() {
        let mut rng = rng::from_seed(9);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let g: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 1).collect();
            let d = dice_coefficient(&p, &g);
            assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn binary_dice_is_one_iff_masks_match() {
        let mut rng = rng::from_seed(10);
        for _ in 0..100 {
            let n = rng.random_range(1..20);
            let g: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 1).collect();
            let p: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            assert!((dice_coefficient(&p, &g) - 1.0).abs() < 1e-15);
            // flip one position: dice must drop below 1 unless both sides empty
            let mut p2 = p.clone();
            let flip = rng.random_range(0..n);
            p2[flip] = 1.0 - p2[flip];
            let d = dice_coefficient(&p2, &g);
            assert!(d < 1.0);
        }
    }

    #[test]
    fn loss_margin_cases() {
        let labels = MaskLabels::new(vec![true, false, true, false]);
        let mask = SpeechMask::from_probs(vec![1.0, 0.0, 1.0, 0.0], 0.5, 0.02);
        // perfect overlap: dice term vanishes
        let loss = vad_loss(&mask, &labels, 0.0, 1.0).unwrap();
        assert!(loss.abs() < 1e-12);
        // disjoint supports: dice term equals its weight
        let mask = SpeechMask::from_probs(vec![0.0, 1.0, 0.0, 1.0], 0.5, 0.02);
        let loss = vad_loss(&mask, &labels, 0.0, 3.0).unwrap();
        assert!((loss - 3.0).abs() < 1e-12);
        // all-zero probabilities and labels contribute no dice loss
        let empty = SpeechMask::from_probs(vec![0.0, 0.0], 0.5, 0.02);
        let zl = MaskLabels::new(vec![false, false]);
        let loss = vad_loss(&empty, &zl, 0.0, 5.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = rng::from_seed(17);
        let n = 40;
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 1).collect();
        let (_, grad) = vad_loss_grad(&probs, &labels, 1.0, 1.0).unwrap();
        let step = 1e-5;
        for i in 0..n {
            let mut plus = probs.clone();
            plus[i] += step;
            let mut minus = probs.clone();
            minus[i] -= step;
            let num = (vad_loss_grad(&plus, &labels, 1.0, 1.0).unwrap().0
                - vad_loss_grad(&minus, &labels, 1.0, 1.0).unwrap().0)
                / (2.0 * step);
            let ana = grad[i];
            let diff = (num - ana).abs();
            assert!(
                diff <= 1e-4 * num.abs().max(ana.abs()) || diff <= 1e-8,
                "element {i}: numeric {num} vs analytic {ana}"
            );
        }
    }

    #[test]
    fn forward_on_duplicated_window_is_deterministic() {
        let cfg = UnetConfig { base_channels: 2, input_dim: 23, window: 128 };
        let store = arch::init_unet(&cfg, 3);
        let mut rng = rng::from_seed(4);
        let data: Vec<f64> = (0..128 * 23).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feats = FeatureMatrix::new(data, 128, 23, 0.02, 0.025, FeatureKind::Mfcc23).unwrap();
        let a = unet_vad_forward(&feats, &store, 0.5).unwrap();
        let b = unet_vad_forward(&feats, &store, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 128);
        assert!((a.frame_hop - 0.02).abs() < 1e-12);
    }

    #[test]
    fn overlapping_region_averages_two_windows() {
        let cfg = UnetConfig { base_channels: 2, input_dim: 23, window: 128 };
        let store = arch::init_unet(&cfg, 5);
        let mut rng = rng::from_seed(6);
        let data: Vec<f64> = (0..192 * 23).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feats = FeatureMatrix::new(data, 192, 23, 0.02, 0.025, FeatureKind::Mfcc23).unwrap();
        let merged = unet_vad_forward(&feats, &store, 0.5).unwrap();
        assert_eq!(merged.len(), 192);
        // recompute the two windows separately and average by hand
        let w0 = feats.select_rows(&(0..128).collect::<Vec<_>>());
        let w1 = feats.select_rows(&(64..192).collect::<Vec<_>>());
        let m0 = unet_vad_forward(&w0, &store, 0.5).unwrap();
        let m1 = unet_vad_forward(&w1, &store, 0.5).unwrap();
        for t in 0..192usize {
            let expect = if t < 64 {
                m0.probs[t]
            } else if t < 128 {
                (m0.probs[t] + m1.probs[t - 64]) / 2.0
            } else {
                m1.probs[t - 64]
            };
            assert!((merged.probs[t] - expect).abs() < 1e-12, "frame {t}");
        }
    }

    #[test]
    fn short_input_zero_pads_and_truncates() {
        let cfg = UnetConfig { base_channels: 2, input_dim: 23, window: 128 };
        let store = arch::init_unet(&cfg, 7);
        let mut rng = rng::from_seed(8);
        let data: Vec<f64> = (0..50 * 23).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feats = FeatureMatrix::new(data, 50, 23, 0.02, 0.025, FeatureKind::Mfcc23).unwrap();
        let mask = unet_vad_forward(&feats, &store, 0.5).unwrap();
        assert_eq!(mask.len(), 50);
    }

    #[test]
    fn weight_shape_mismatch_is_an_error() {
        let cfg = UnetConfig { base_channels: 2, input_dim: 23, window: 128 };
        let store = arch::init_unet(&cfg, 9);
        let feats =
            FeatureMatrix::new(vec![0.0; 128 * 13], 128, 13, 0.02, 0.025, FeatureKind::Mfcc23)
                .unwrap();
        assert!(unet_vad_forward(&feats, &store, 0.5).is_err());
    }

    #[test]
    fn mask_resample_doubles_rate() {
        let mask = SpeechMask::from_probs(vec![1.0, 0.0, 1.0], 0.5, 0.02);
        let fine = mask.resample_hop(0.01, 6);
        assert_eq!(fine.decisions, vec![true, true, false, false, true, true]);
    }

    fn tiny_trainer_dataset() -> Vec<(FeatureMatrix, MaskLabels)> {
        let mut rng = rng::from_seed(60);
        (0..4)
            .map(|w| {
                let data: Vec<f64> =
                    (0..128 * 23).map(|_| rng.random_range(-1.0..1.0)).collect();
                let feats =
                    FeatureMatrix::new(data, 128, 23, 0.02, 0.025, FeatureKind::Mfcc23).unwrap();
                let labels = (0..128).map(|t| (t / 32 + w) % 2 == 0).collect();
                (feats, MaskLabels::new(labels))
            })
            .collect()
    }

    #[test]
    fn trainer_zero_epochs_returns_initialization() {
        let dataset = tiny_trainer_dataset();
        let tc = VadTrainConfig {
            epochs: 0,
            unet: UnetConfig { base_channels: 2, input_dim: 23, window: 128 },
            ..VadTrainConfig::default()
        };
        let out = train_unet_toy(&dataset, &tc).unwrap();
        assert_eq!(out.weights, arch::init_unet(&tc.unet, tc.seed));
    }

    #[test]
    fn trainer_is_seed_deterministic() {
        let dataset = tiny_trainer_dataset();
        let tc = VadTrainConfig {
            epochs: 1,
            batch_size: 2,
            unet: UnetConfig { base_channels: 2, input_dim: 23, window: 128 },
            ..VadTrainConfig::default()
        };
        let a = train_unet_toy(&dataset, &tc).unwrap();
        let b = train_unet_toy(&dataset, &tc).unwrap();
        assert_eq!(a.weights, b.weights);
        assert!(a.epoch_losses[0].is_finite());
    }

    #[test]
    fn trainer_requires_both_classes() {
        let mut dataset = tiny_trainer_dataset();
        for (_, labels) in dataset.iter_mut() {
            labels.labels = vec![true; 128];
        }
        let tc = VadTrainConfig {
            unet: UnetConfig { base_channels: 2, input_dim: 23, window: 128 },
            ..VadTrainConfig::default()
        };
        assert!(train_unet_toy(&dataset, &tc).is_err());
    }
}
