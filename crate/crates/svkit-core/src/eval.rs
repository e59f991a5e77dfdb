//! Trial protocols and detection metrics: EER with linear interpolation
//! between operating points, normalized minimum detection cost, DET
//! staircases, and the speech-first test truncation procedure.

use alloc::string::String;
use alloc::vec::Vec;

use crate::features::{cmn_sliding, FeatureMatrix};
use crate::vad::SpeechMask;
use crate::{math, Error, Result};

pub const DEFAULT_P_TARGET: f64 = 0.01;
pub const CMN_WINDOW_SECS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

/// Ordered list of verification trials.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn target_count(&self) -> usize {
        self.trials.iter().filter(|t| t.label == TrialLabel::Target).count()
    }

    pub fn nontarget_count(&self) -> usize {
        self.trials.iter().filter(|t| t.label == TrialLabel::Nontarget).count()
    }
}

/// Per-trial scores aligned with a `TrialSet`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>) -> Self {
        ScoreSet { scores }
    }
}

/// Parse trial lines `<label> <enroll_id> <test_id>` with label one of
/// 1/0/target/nontarget. Duplicates are retained, order preserved.
pub fn parse_trials(text: &str) -> Result<TrialSet> {
    let mut trials = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (label, enroll, test) = match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(e), Some(t)) => (l, e, t),
            _ => {
                return Err(Error::Format(alloc::format!(
                    "line {}: expected `<label> <enroll> <test>`",
                    lineno + 1
                )))
            }
        };
        if parts.next().is_some() {
            return Err(Error::Format(alloc::format!(
                "line {}: trailing fields after trial triple",
                lineno + 1
            )));
        }
        let label = match label {
            "1" | "target" => TrialLabel::Target,
            "0" | "nontarget" => TrialLabel::Nontarget,
            other => {
                return Err(Error::Format(alloc::format!(
                    "line {}: unknown label `{other}`",
                    lineno + 1
                )))
            }
        };
        trials.push(Trial { enroll_id: String::from(enroll), test_id: String::from(test), label });
    }
    if trials.is_empty() {
        return Err(Error::Format("no trials in input".into()));
    }
    Ok(TrialSet { trials })
}

fn split_scores(scores: &ScoreSet, trials: &TrialSet) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.scores.len() != trials.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} scores for {} trials",
            scores.scores.len(),
            trials.len()
        )));
    }
    if scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite trial score".into()));
    }
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (s, t) in scores.scores.iter().zip(trials.trials.iter()) {
        match t.label {
            TrialLabel::Target => targets.push(*s),
            TrialLabel::Nontarget => nontargets.push(*s),
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::InvalidInput(
            "metrics need at least one target and one nontarget trial".into(),
        ));
    }
    Ok((targets, nontargets))
}

/// Operating points (p_fa, p_miss) swept over every distinct score
/// threshold (accept when score >= threshold) plus the reject-all point.
/// The first point is (1, 0), the last (0, 1), and p_miss is
/// nondecreasing while p_fa is nonincreasing.
pub fn det_points(scores: &ScoreSet, trials: &TrialSet) -> Result<Vec<(f64, f64)>> {
    let (targets, nontargets) = split_scores(scores, trials)?;
    let mut thresholds: Vec<f64> = Vec::with_capacity(targets.len() + nontargets.len());
    thresholds.extend_from_slice(&targets);
    thresholds.extend_from_slice(&nontargets);
    thresholds.sort_by(|a, b| a.total_cmp(b));
    thresholds.dedup();

    let mut sorted_targets = targets.clone();
    sorted_targets.sort_by(|a, b| a.total_cmp(b));
    let mut sorted_nontargets = nontargets.clone();
    sorted_nontargets.sort_by(|a, b| a.total_cmp(b));
    let nt = sorted_targets.len() as f64;
    let nn = sorted_nontargets.len() as f64;

    let count_below = |sorted: &[f64], x: f64| -> usize {
        sorted.partition_point(|&v| v < x)
    };
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    for &th in &thresholds {
        let miss = count_below(&sorted_targets, th) as f64 / nt;
        let fa = (nn - count_below(&sorted_nontargets, th) as f64) / nn;
        points.push((fa, miss));
    }
    points.push((0.0, 1.0));
    Ok(points)
}

fn eer_from_points(points: &[(f64, f64)]) -> f64 {
    for w in points.windows(2) {
        let (fa0, miss0) = w[0];
        let (fa1, miss1) = w[1];
        let d0 = miss0 - fa0;
        let d1 = miss1 - fa1;
        if d0 == 0.0 {
            return fa0;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            // linear interpolation along the segment to the crossing
            let t = d0 / (d0 - d1);
            return fa0 + t * (fa1 - fa0);
        }
    }
    let last = points.last().unwrap();
    if last.1 - last.0 == 0.0 {
        last.0
    } else {
        0.5
    }
}

/// Equal error rate from the threshold sweep, linearly interpolating
/// between the two operating points that bracket the crossing.
pub fn compute_eer(scores: &ScoreSet, trials: &TrialSet) -> Result<f64> {
    let points = det_points(scores, trials)?;
    Ok(eer_from_points(&points))
}

/// Minimum normalized detection cost over all operating points.
pub fn compute_min_dcf(
    scores: &ScoreSet,
    trials: &TrialSet,
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_target) {
        return Err(Error::InvalidInput("target prior must lie in [0, 1]".into()));
    }
    let points = det_points(scores, trials)?;
    let denom = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    if denom <= 0.0 {
        return Err(Error::InvalidInput("degenerate detection costs".into()));
    }
    let mut best = f64::INFINITY;
    for &(fa, miss) in &points {
        let cost = (c_miss * p_target * miss + c_fa * (1.0 - p_target) * fa) / denom;
        if cost < best {
            best = cost;
        }
    }
    Ok(best)
}

/// Select speech frames in temporal order until `seconds` of speech is
/// accumulated (all speech frames when less is available), then apply
/// sliding CMN to just the retained frames.
pub fn truncate_test(
    feats: &FeatureMatrix,
    mask: &SpeechMask,
    seconds: f64,
) -> Result<FeatureMatrix> {
    if mask.len() != feats.rows() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "mask of {} frames for {} feature rows",
            mask.len(),
            feats.rows()
        )));
    }
    let speech = mask.speech_frames();
    if speech.is_empty() {
        return Err(Error::InvalidInput("no speech frames to truncate to".into()));
    }
    let wanted = if seconds.is_infinite() {
        speech.len()
    } else {
        if seconds <= 0.0 {
            return Err(Error::InvalidInput("truncation length must be positive".into()));
        }
        math::round(seconds / feats.frame_hop) as usize
    };
    let keep: Vec<usize> = speech.into_iter().take(wanted.max(1)).collect();
    let selected = feats.select_rows(&keep);
    Ok(cmn_sliding(&selected, CMN_WINDOW_SECS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use rand::RngExt;

    fn trials_of(labels: &[TrialLabel]) -> TrialSet {
        TrialSet {
            trials: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| Trial {
                    enroll_id: alloc::format!("e{i}"),
                    test_id: alloc::format!("t{i}"),
                    label,
                })
                .collect(),
        }
    }

    fn simple(targets: &[f64], nontargets: &[f64]) -> (ScoreSet, TrialSet) {
        let mut labels = Vec::new();
        let mut scores = Vec::new();
        for &s in targets {
            labels.push(TrialLabel::Target);
            scores.push(s);
        }
        for &s in nontargets {
            labels.push(TrialLabel::Nontarget);
            scores.push(s);
        }
        (ScoreSet::new(scores), trials_of(&labels))
    }

    /// Exhaustive O(n^2) sweep building points by counting per threshold,
    /// then the same interpolation convention.
    fn eer_oracle(targets: &[f64], nontargets: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = targets.iter().chain(nontargets.iter()).cloned().collect();
        thresholds.sort_by(|a, b| a.total_cmp(b));
        thresholds.dedup();
        let mut points = Vec::new();
        for &th in &thresholds {
            let miss = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
            let fa = nontargets.iter().filter(|&&s| s >= th).count() as f64
                / nontargets.len() as f64;
            points.push((fa, miss));
        }
        points.push((0.0, 1.0));
        eer_from_points(&points)
    }

    fn min_dcf_oracle(targets: &[f64], nontargets: &[f64], p_tar: f64) -> f64 {
        let mut thresholds: Vec<f64> = targets.iter().chain(nontargets.iter()).cloned().collect();
        thresholds.sort_by(|a, b| a.total_cmp(b));
        thresholds.dedup();
        let denom = (p_tar).min(1.0 - p_tar);
        let mut best = f64::INFINITY;
        let mut eval = |miss: f64, fa: f64| {
            let cost = (p_tar * miss + (1.0 - p_tar) * fa) / denom;
            if cost < best {
                best = cost;
            }
        };
        for &th in &thresholds {
            let miss = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
            let fa = nontargets.iter().filter(|&&s| s >= th).count() as f64
                / nontargets.len() as f64;
            eval(miss, fa);
        }
        eval(1.0, 0.0);
        best
    }

    #[test]
    fn parse_trials_formats() {
        let set = parse_trials("1 a b\nnontarget x y\n0 p q\ntarget m n\n").unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.trials[0].label, TrialLabel::Target);
        assert_eq!(set.trials[0].enroll_id, "a");
        assert_eq!(set.trials[1].label, TrialLabel::Nontarget);
        assert_eq!(set.trials[3].label, TrialLabel::Target);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_trials("1 a b\nbroken line here extra\n").unwrap_err();
        assert!(alloc::format!("{err}").contains("line 2"));
        assert!(parse_trials("").is_err());
        let err = parse_trials("2 a b\n").unwrap_err();
        assert!(alloc::format!("{err}").contains("line 1"));
    }

    #[test]
    fn perfect_separation_gives_zero_eer() {
        let (scores, trials) = simple(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(compute_eer(&scores, &trials).unwrap(), 0.0);
    }

    #[test]
    fn interleaved_scores_give_half_eer() {
        let (scores, trials) = simple(&[0.8, 0.2], &[0.7, 0.1]);
        let eer = compute_eer(&scores, &trials).unwrap();
        assert!((eer - 0.5).abs() <= 1e-9, "{eer}");
        assert!((eer_oracle(&[0.8, 0.2], &[0.7, 0.1]) - eer).abs() <= 1e-12);
    }

    #[test]
    fn eer_matches_oracle_on_random_protocols() {
        let mut rng = crate::rng::from_seed(31);
        for round in 0..30 {
            let nt = rng.random_range(5..60);
            let nn = rng.random_range(5..60);
            let targets: Vec<f64> =
                (0..nt).map(|_| rng.random_range(-1.0..1.5) as f64).collect();
            let nontargets: Vec<f64> =
                (0..nn).map(|_| rng.random_range(-1.5..1.0) as f64).collect();
            let (scores, trials) = simple(&targets, &nontargets);
            let eer = compute_eer(&scores, &trials).unwrap();
            let oracle = eer_oracle(&targets, &nontargets);
            assert!((eer - oracle).abs() <= 1e-9, "round {round}: {eer} vs {oracle}");
            assert!((0.0..=1.0).contains(&eer));
        }
    }

    #[test]
    fn min_dcf_trivial_cases() {
        let (scores, trials) = simple(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(compute_min_dcf(&scores, &trials, 0.01, 1.0, 1.0).unwrap(), 0.0);
        // constant scores: the reject-all point floors the cost at 1
        let (scores, trials) = simple(&[0.5, 0.5], &[0.5, 0.5, 0.5]);
        assert_eq!(compute_min_dcf(&scores, &trials, 0.01, 1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn min_dcf_matches_oracle_exactly() {
        let mut rng = crate::rng::from_seed(33);
        for _ in 0..30 {
            let nt = rng.random_range(5..50);
            let nn = rng.random_range(5..50);
            let targets: Vec<f64> = (0..nt).map(|_| rng.random_range(-1.0..1.5) as f64).collect();
            let nontargets: Vec<f64> =
                (0..nn).map(|_| rng.random_range(-1.5..1.0) as f64).collect();
            let (scores, trials) = simple(&targets, &nontargets);
            let got = compute_min_dcf(&scores, &trials, 0.01, 1.0, 1.0).unwrap();
            let oracle = min_dcf_oracle(&targets, &nontargets, 0.01);
            assert_eq!(got, oracle);
        }
    }

    #[test]
    fn det_points_extremes_and_cardinality() {
        let (scores, trials) = simple(&[0.9, 0.5], &[0.1, 0.3]);
        let points = det_points(&scores, &trials).unwrap();
        // 4 distinct scores -> 5 points
        assert_eq!(points.len(), 5);
        assert_eq!(points[0], (1.0, 0.0));
        assert_eq!(*points.last().unwrap(), (0.0, 1.0));
        for w in points.windows(2) {
            assert!(w[1].0 <= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn metrics_invariant_under_monotone_transforms() {
        let mut rng = crate::rng::from_seed(35);
        let targets: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.5) as f64).collect();
        let nontargets: Vec<f64> = (0..40).map(|_| rng.random_range(-1.5..1.0) as f64).collect();
        let (scores, trials) = simple(&targets, &nontargets);
        let eer = compute_eer(&scores, &trials).unwrap();
        let dcf = compute_min_dcf(&scores, &trials, 0.01, 1.0, 1.0).unwrap();
        for transform in [|s: f64| math::exp(s), |s: f64| 3.0 * s + 7.0] {
            let t2: Vec<f64> = targets.iter().map(|&s| transform(s)).collect();
            let n2: Vec<f64> = nontargets.iter().map(|&s| transform(s)).collect();
            let (s2, tr2) = simple(&t2, &n2);
            assert!((compute_eer(&s2, &tr2).unwrap() - eer).abs() <= 1e-9);
            assert_eq!(compute_min_dcf(&s2, &tr2, 0.01, 1.0, 1.0).unwrap(), dcf);
        }
    }

    #[test]
    fn shuffling_trials_changes_nothing() {
        let mut rng = crate::rng::from_seed(36);
        let targets: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0) as f64).collect();
        let nontargets: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..0.5) as f64).collect();
        let (scores, trials) = simple(&targets, &nontargets);
        let eer = compute_eer(&scores, &trials).unwrap();
        // reversed order
        let rev_scores = ScoreSet::new(scores.scores.iter().rev().cloned().collect());
        let rev_trials = TrialSet { trials: trials.trials.iter().rev().cloned().collect() };
        assert!((compute_eer(&rev_scores, &rev_trials).unwrap() - eer).abs() <= 1e-15);
    }

    #[test]
    fn min_dcf_is_a_lower_bound_over_operating_points() {
        // in particular it never exceeds the normalized cost at the
        // points bracketing the EER crossing
        let mut rng = crate::rng::from_seed(38);
        let targets: Vec<f64> = (0..40).map(|_| rng.random_range(-0.5..1.5) as f64).collect();
        let nontargets: Vec<f64> = (0..40).map(|_| rng.random_range(-1.5..0.5) as f64).collect();
        let (scores, trials) = simple(&targets, &nontargets);
        let p_tar = 0.01;
        let min_dcf = compute_min_dcf(&scores, &trials, p_tar, 1.0, 1.0).unwrap();
        let denom = p_tar.min(1.0 - p_tar);
        for (fa, miss) in det_points(&scores, &trials).unwrap() {
            let cost = (p_tar * miss + (1.0 - p_tar) * fa) / denom;
            assert!(min_dcf <= cost + 1e-15);
        }
    }

    #[test]
    fn eer_read_from_det_staircase_matches() {
        let mut rng = crate::rng::from_seed(37);
        let targets: Vec<f64> = (0..30).map(|_| rng.random_range(-0.5..1.2) as f64).collect();
        let nontargets: Vec<f64> = (0..30).map(|_| rng.random_range(-1.2..0.6) as f64).collect();
        let (scores, trials) = simple(&targets, &nontargets);
        let points = det_points(&scores, &trials).unwrap();
        let eer = compute_eer(&scores, &trials).unwrap();
        assert!((eer_from_points(&points) - eer).abs() <= 1e-9);
    }

    #[test]
    fn degenerate_protocols_error() {
        let (scores, trials) = simple(&[0.5], &[]);
        assert!(compute_eer(&scores, &trials).is_err());
        let set = trials_of(&[TrialLabel::Target]);
        assert!(compute_eer(&ScoreSet::new(alloc::vec![1.0]), &set).is_err());
    }

    fn random_feats(rows: usize, seed: u64) -> FeatureMatrix {
        let mut rng = crate::rng::from_seed(seed);
        FeatureMatrix::new(
            (0..rows * 4).map(|_| rng.random_range(-2.0..2.0)).collect(),
            rows,
            4,
            0.01,
            0.025,
            FeatureKind::Mfb80,
        )
        .unwrap()
    }

    #[test]
    fn fully_speech_utterance_truncates_to_first_frames() {
        let feats = random_feats(1000, 40);
        let mask = SpeechMask::from_probs(alloc::vec![1.0; 1000], 0.5, 0.01);
        let out = truncate_test(&feats, &mask, 2.0).unwrap();
        assert_eq!(out.rows(), 200);
        // oracle: select the first 200 frames then CMN
        let oracle = cmn_sliding(&feats.select_rows(&(0..200).collect::<Vec<_>>()), 3.0);
        assert_eq!(out.data(), oracle.data());
    }

    #[test]
    fn insufficient_speech_returns_all_speech_frames() {
        let feats = random_feats(150, 41);
        let mask = SpeechMask::from_probs(alloc::vec![1.0; 150], 0.5, 0.01);
        let out = truncate_test(&feats, &mask, 2.0).unwrap();
        assert_eq!(out.rows(), 150);
    }

    #[test]
    fn interleaved_mask_matches_select_then_cmn_oracle() {
        let mut rng = crate::rng::from_seed(42);
        for round in 0..20 {
            let rows = rng.random_range(50..400);
            let feats = random_feats(rows, 100 + round);
            let probs: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..1.0) as f64).collect();
            let mask = SpeechMask::from_probs(probs, 0.5, 0.01);
            if mask.speech_frames().is_empty() {
                continue;
            }
            let secs = [0.5, 1.0, 2.0][round as usize % 3];
            let out = truncate_test(&feats, &mask, secs).unwrap();
            let wanted = math::round(secs / 0.01) as usize;
            let keep: Vec<usize> = mask.speech_frames().into_iter().take(wanted).collect();
            let oracle = cmn_sliding(&feats.select_rows(&keep), 3.0);
            assert_eq!(out.data(), oracle.data(), "round {round}");
        }
    }

    #[test]
    fn infinite_duration_returns_every_speech_frame() {
        let feats = random_feats(300, 43);
        let mut rng = crate::rng::from_seed(44);
        let probs: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0) as f64).collect();
        let mask = SpeechMask::from_probs(probs, 0.5, 0.01);
        let out = truncate_test(&feats, &mask, f64::INFINITY).unwrap();
        assert_eq!(out.rows(), mask.speech_frames().len());
    }

    #[test]
    fn no_speech_is_an_error() {
        let feats = random_feats(50, 45);
        let mask = SpeechMask::from_probs(alloc::vec![0.0; 50], 0.5, 0.01);
        assert!(truncate_test(&feats, &mask, 1.0).is_err());
    }
}
