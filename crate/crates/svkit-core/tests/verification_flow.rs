//! The core crate's public surface, driven end to end on synthetic
//! audio: features, detection, truncation, a tiny extractor, scoring
//! with adaptation and cohort normalization, and detection metrics.

use svkit_core::audio::resample;
use svkit_core::backend::{cohort_stats, cosine_score, mean_adapt, s_norm, Cohort, Scorer};
use svkit_core::eval::{compute_eer, compute_min_dcf, truncate_test, ScoreSet, Trial, TrialLabel, TrialSet};
use svkit_core::features::{cmn_sliding, cmvn_global, extract_mfb, extract_mfcc, FeatureKind};
use svkit_core::nnet::{embed_forward, train_toy, Embedding, LossKind, ResNetConfig, TrainConfig};
use svkit_core::synth;
use svkit_core::vad::energy_vad;

fn tiny_arch() -> ResNetConfig {
    ResNetConfig {
        initial_channels: 2,
        stage_channels: [2, 4, 4, 8],
        stage_blocks: [1, 1, 1, 1],
        embed_dim: 24,
        ..ResNetConfig::toy()
    }
}

#[test]
fn synthetic_speakers_flow_through_the_whole_stack() {
    let seed = 9000;
    let n_speakers = 3;
    let corpus = synth::speaker_corpus(seed, n_speakers, 4, 1.3, 16000);

    // features + normalization per utterance
    let featurized: Vec<_> = corpus
        .iter()
        .map(|(buf, label)| {
            let feats = extract_mfb(buf, 80).unwrap();
            let feats = cmvn_global(&cmn_sliding(&feats, 3.0)).unwrap();
            (feats, *label)
        })
        .collect();

    let arch = tiny_arch();
    let tc = TrainConfig {
        seed,
        epochs: 2,
        batch_size: 4,
        chunk_frames: 100,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let weights = train_toy(&featurized, &arch, LossKind::AmSoftmax, &tc).unwrap().weights;

    let embeddings: Vec<(Embedding, usize)> = featurized
        .iter()
        .enumerate()
        .map(|(i, (feats, label))| {
            let mut e = embed_forward(feats, &weights, &arch).unwrap();
            e.utt_id = format!("u{i}");
            (e, *label)
        })
        .collect();

    // adaptation with the utterances themselves, then cohort-normalized
    // cosine scores over every pair
    let all: Vec<Embedding> = embeddings.iter().map(|(e, _)| e.clone()).collect();
    let adapted = mean_adapt(&all, &all).unwrap();
    let cohort = Cohort::new(adapted.clone(), adapted.len()).unwrap();
    let scorer = Scorer::Cosine;
    let mut trials = Vec::new();
    let mut scores = Vec::new();
    for i in 0..adapted.len() {
        for j in (i + 1)..adapted.len() {
            let raw = cosine_score(&adapted[i], &adapted[j]).unwrap();
            let normalized = s_norm(raw, &adapted[i], &adapted[j], &cohort, &scorer).unwrap();
            assert!(normalized.is_finite());
            trials.push(Trial {
                enroll_id: adapted[i].utt_id.clone(),
                test_id: adapted[j].utt_id.clone(),
                label: if embeddings[i].1 == embeddings[j].1 {
                    TrialLabel::Target
                } else {
                    TrialLabel::Nontarget
                },
            });
            scores.push(normalized);
        }
    }
    let trial_set = TrialSet { trials };
    let score_set = ScoreSet::new(scores);
    let eer = compute_eer(&score_set, &trial_set).unwrap();
    let min_dcf = compute_min_dcf(&score_set, &trial_set, 0.01, 1.0, 1.0).unwrap();
    assert!((0.0..=1.0).contains(&eer));
    assert!((0.0..=1.0 + 1e-12).contains(&min_dcf));

    // cohort statistics cache agrees with the one-shot path
    let (mu, sigma) = cohort_stats(&adapted[0], &cohort, &scorer).unwrap();
    assert!(sigma > 0.0 && mu.is_finite());

    // detection + truncation on the 8 kHz branch
    let (buf16, _) = (corpus[0].0.clone(), ());
    let buf8 = resample(&buf16, 8000).unwrap();
    let cepstra = extract_mfcc(&buf8, 23, 23).unwrap();
    let mask = energy_vad(&cepstra, -1000.0, 0.0, 0).unwrap(); // everything passes
    assert!(mask.decisions.iter().all(|&d| d));
    let truncated = truncate_test(&cepstra, &mask, 0.5).unwrap();
    assert_eq!(truncated.rows(), 25); // 0.5 s at a 20 ms hop
    assert_eq!(truncated.kind, FeatureKind::Mfcc23);
}
