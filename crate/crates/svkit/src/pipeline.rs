//! Stage orchestration: features -> vad -> embed -> score -> eval, with
//! manifest-backed skipping of up-to-date stages.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use svkit_core::audio::{resample, AudioBuffer};
use svkit_core::backend::{
    cohort_stats, mean_adapt, s_norm_from_stats, Cohort, CsmlTransform, Scorer,
};
use svkit_core::eval::{compute_eer, compute_min_dcf, det_points, truncate_test, ScoreSet, TrialSet};
use svkit_core::features::{cmn_sliding, cmvn_global, extract_mfb, extract_mfcc, FeatureKind, FeatureMatrix};
use svkit_core::nnet::{embed_forward, Embedding, WeightStore};
use svkit_core::vad::{energy_vad, unet_vad_forward, SpeechMask};
use svkit_core::{rng, Error as CoreError};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::formats;
use crate::manifest::{sha256_hex, Manifest};
use crate::util::par_map;
use crate::wav;

pub struct StageOutcome {
    pub stage: String,
    pub ran: bool,
}

fn parse_kind(name: &str) -> Result<FeatureKind> {
    match name {
        "mfb80" => Ok(FeatureKind::Mfb80),
        "mfcc40" => Ok(FeatureKind::Mfcc40),
        "mfcc23" => Ok(FeatureKind::Mfcc23),
        other => Err(Error::Usage(format!("unknown feature kind `{other}`"))),
    }
}

/// Extract the configured features from one buffer (resampling first when
/// the rates differ), optionally with seeded dither.
pub fn featurize(
    buf: &AudioBuffer,
    kind: FeatureKind,
    dither: f64,
    seed: u64,
    item: u64,
) -> svkit_core::Result<FeatureMatrix> {
    let buf = resample(buf, kind.sample_rate())?;
    let buf = if dither > 0.0 {
        let mut rng = rng::for_item(seed ^ 0xd17e_0000, item);
        let samples = buf
            .samples
            .iter()
            .map(|&s| s + dither * rng::uniform(&mut rng, -1.0, 1.0))
            .collect();
        AudioBuffer::new(samples, buf.sample_rate)
    } else {
        buf
    };
    match kind {
        FeatureKind::Mfb80 => extract_mfb(&buf, 80),
        FeatureKind::Mfcc40 => extract_mfcc(&buf, 40, 40),
        FeatureKind::Mfcc23 => extract_mfcc(&buf, 23, 23),
    }
}

/// Apply a CMN policy by name ("sliding" | "global" | "both" | "none").
pub fn apply_cmn(feats: &FeatureMatrix, mode: &str) -> svkit_core::Result<FeatureMatrix> {
    match mode {
        "none" => Ok(feats.clone()),
        "sliding" => Ok(cmn_sliding(feats, svkit_core::eval::CMN_WINDOW_SECS)),
        "global" => cmvn_global(feats),
        "both" => cmvn_global(&cmn_sliding(feats, svkit_core::eval::CMN_WINDOW_SECS)),
        other => Err(CoreError::InvalidInput(format!("unknown cmn mode `{other}`"))),
    }
}

struct Ctx<'a> {
    config: &'a PipelineConfig,
    workdir: PathBuf,
}

impl<'a> Ctx<'a> {
    fn features_dir(&self) -> PathBuf {
        self.workdir.join("features")
    }

    fn feature_path(&self, utt: &str) -> PathBuf {
        self.features_dir().join(format!("{utt}.svkf"))
    }

    fn wav_entries(&self) -> Result<Vec<(String, PathBuf)>> {
        formats::read_wav_list(&self.config.path("wav_list")?)
    }

    fn feature_kind(&self) -> Result<FeatureKind> {
        parse_kind(&self.config.get_or("feature_kind", "mfb80"))
    }
}

fn stage_features(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let entries = ctx.wav_entries()?;
    let kind = ctx.feature_kind()?;
    let dither = ctx.config.f64_or("dither", 0.0)?;
    let seed = ctx.config.u64_or("seed", 0)?;
    std::fs::create_dir_all(ctx.features_dir())
        .map_err(|e| Error::io(ctx.features_dir(), e))?;
    let jobs: Vec<(usize, (String, PathBuf))> = entries.into_iter().enumerate().collect();
    let results = par_map(&jobs, |(idx, (utt, path))| -> Result<PathBuf> {
        let buf = wav::read_wav(path)?;
        let feats = featurize(&buf, kind, dither, seed, *idx as u64)
            .map_err(|e| Error::data(path, e.to_string()))?;
        let out = ctx.feature_path(utt);
        formats::write_features(&out, &feats)?;
        Ok(PathBuf::from("features").join(format!("{utt}.svkf")))
    });
    results.into_iter().collect()
}

fn stage_vad(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let entries = ctx.wav_entries()?;
    let engine = ctx.config.get_or("vad_engine", "energy");
    let masks: Vec<(String, SpeechMask)> = match engine.as_str() {
        "energy" => {
            let threshold = ctx.config.f64_or("vad_threshold", 5.5)?;
            let mean_scale = ctx.config.f64_or("vad_mean_scale", 0.5)?;
            let context = ctx.config.usize_or("vad_context", 2)?;
            // energy detection reads C0 from cepstra at the main frame grid
            let kind = match ctx.feature_kind()? {
                FeatureKind::Mfcc23 => FeatureKind::Mfcc23,
                _ => FeatureKind::Mfcc40,
            };
            let results = par_map(&entries, |(utt, path)| -> Result<(String, SpeechMask)> {
                let buf = wav::read_wav(path)?;
                let feats = featurize(&buf, kind, 0.0, 0, 0)
                    .map_err(|e| Error::data(path, e.to_string()))?;
                let mask = energy_vad(&feats, threshold, mean_scale, context)?;
                Ok((utt.clone(), mask))
            });
            results.into_iter().collect::<Result<Vec<_>>>()?
        }
        "unet" => {
            let threshold = ctx.config.f64_or("vad_threshold", 0.5)?;
            let weights_path = ctx
                .config
                .path_opt("unet_weights")
                .ok_or_else(|| Error::Usage("unet engine needs `unet_weights`".into()))?;
            let store = formats::read_weights(&weights_path)?;
            let results = par_map(&entries, |(utt, path)| -> Result<(String, SpeechMask)> {
                let buf = wav::read_wav(path)?;
                let feats = featurize(&buf, FeatureKind::Mfcc23, 0.0, 0, 0)
                    .map_err(|e| Error::data(path, e.to_string()))?;
                let mask = unet_vad_forward(&feats, &store, threshold)?;
                Ok((utt.clone(), mask))
            });
            results.into_iter().collect::<Result<Vec<_>>>()?
        }
        "none" => entries
            .iter()
            .map(|(utt, _)| {
                (utt.clone(), SpeechMask { probs: vec![], decisions: vec![], frame_hop: 0.01 })
            })
            .collect(),
        other => return Err(Error::Usage(format!("unknown vad_engine `{other}`"))),
    };
    let out = ctx.workdir.join("masks.txt");
    formats::write_masks(&out, &masks)?;
    Ok(vec![PathBuf::from("masks.txt")])
}

fn mask_hop(ctx: &Ctx) -> Result<f64> {
    Ok(match ctx.config.get_or("vad_engine", "energy").as_str() {
        "unet" => 0.02,
        _ => ctx.feature_kind()?.frame_hop_secs(),
    })
}

fn load_trial_ids(ctx: &Ctx) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let trials = load_trials(&ctx.config.path("trials")?)?;
    let mut enroll = BTreeSet::new();
    let mut test = BTreeSet::new();
    for t in &trials.trials {
        enroll.insert(t.enroll_id.clone());
        test.insert(t.test_id.clone());
    }
    Ok((enroll, test))
}

pub fn load_trials(path: &Path) -> Result<TrialSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    svkit_core::eval::parse_trials(&text).map_err(|e| Error::data(path, e.to_string()))
}

fn stage_embed(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let entries = ctx.wav_entries()?;
    let weights_path = ctx.config.path("extractor_weights")?;
    let store = formats::read_weights(&weights_path)?;
    let arch = store.resnet_config().map_err(|e| Error::data(&weights_path, e.to_string()))?;
    let cmn_mode = ctx.config.get_or("cmn", "both");
    let engine = ctx.config.get_or("vad_engine", "energy");
    let masks: BTreeMap<String, SpeechMask> = if engine != "none" {
        let path = ctx.workdir.join("masks.txt");
        if path.exists() {
            formats::read_masks(&path, mask_hop(ctx)?)?.into_iter().collect()
        } else {
            BTreeMap::new()
        }
    } else {
        BTreeMap::new()
    };
    let truncate_secs = match ctx.config.get("truncate_seconds") {
        Some(v) if v != "none" && !v.is_empty() => Some(
            v.parse::<f64>()
                .map_err(|e| Error::Usage(format!("truncate_seconds: {e}")))?,
        ),
        _ => None,
    };
    let test_ids: BTreeSet<String> = if truncate_secs.is_some() {
        load_trial_ids(ctx)?.1
    } else {
        BTreeSet::new()
    };

    let embed_one = |utt: &str, truncated: bool| -> Result<Embedding> {
        let fpath = ctx.feature_path(utt);
        let feats = formats::read_features(&fpath)?;
        let mask = masks.get(utt).map(|m| {
            if (m.frame_hop - feats.frame_hop).abs() > 1e-9 || m.len() != feats.rows() {
                m.resample_hop(feats.frame_hop, feats.rows())
            } else {
                m.clone()
            }
        });
        let normalized = match (truncated, truncate_secs, &mask) {
            (true, Some(_), None) => {
                return Err(Error::data(
                    &fpath,
                    "test-side truncation needs a speech mask; run a vad stage first",
                ))
            }
            (true, Some(secs), Some(mask)) => {
                // speech-first truncation applies its own sliding CMN
                let t = truncate_test(&feats, mask, secs)
                    .map_err(|e| Error::data(&fpath, e.to_string()))?;
                match cmn_mode.as_str() {
                    "both" | "global" => cmvn_global(&t)
                        .map_err(|e| Error::data(&fpath, e.to_string()))?,
                    _ => t,
                }
            }
            _ => {
                let selected = match &mask {
                    Some(mask) => {
                        let speech = mask.speech_frames();
                        if speech.is_empty() {
                            return Err(Error::data(
                                &fpath,
                                "no speech frames survive the detector",
                            ));
                        }
                        feats.select_rows(&speech)
                    }
                    None => feats.clone(),
                };
                apply_cmn(&selected, &cmn_mode)
                    .map_err(|e| Error::data(&fpath, e.to_string()))?
            }
        };
        let mut emb = embed_forward(&normalized, &store, &arch)
            .map_err(|e| Error::data(&fpath, e.to_string()))?;
        emb.utt_id = utt.to_string();
        Ok(emb)
    };

    let full: Vec<Result<Embedding>> = par_map(&entries, |(utt, _)| embed_one(utt, false));
    let full = full.into_iter().collect::<Result<Vec<_>>>()?;
    let emb_path = ctx.workdir.join("embeddings.txt");
    formats::write_embeddings(&emb_path, &full)?;
    let mut artifacts = vec![PathBuf::from("embeddings.txt")];

    if truncate_secs.is_some() {
        let test_entries: Vec<(String, PathBuf)> =
            entries.iter().filter(|(utt, _)| test_ids.contains(utt)).cloned().collect();
        let truncated: Vec<Result<Embedding>> =
            par_map(&test_entries, |(utt, _)| embed_one(utt, true));
        let truncated = truncated.into_iter().collect::<Result<Vec<_>>>()?;
        let path = ctx.workdir.join("embeddings_test.txt");
        formats::write_embeddings(&path, &truncated)?;
        artifacts.push(PathBuf::from("embeddings_test.txt"));
    }
    Ok(artifacts)
}

/// Score every trial with the configured backend, adaptation and cohort
/// normalization; shared by the pipeline stage and the score subcommand.
pub struct ScoreOptions {
    pub backend: String,
    pub transform: Option<CsmlTransform>,
    pub adapt_set: Option<Vec<Embedding>>,
    pub cohort: Option<(Vec<Embedding>, usize)>,
}

pub fn score_trials(
    trials: &TrialSet,
    enroll: &BTreeMap<String, Embedding>,
    test: &BTreeMap<String, Embedding>,
    cohort_source: &[Embedding],
    options: &ScoreOptions,
) -> Result<Vec<(String, String, f64)>> {
    let scorer = match options.backend.as_str() {
        "cs" => Scorer::Cosine,
        "csml" => {
            let t = options
                .transform
                .clone()
                .ok_or_else(|| Error::Usage("csml backend needs a transform".into()))?;
            Scorer::Csml(t)
        }
        other => return Err(Error::Usage(format!("unknown backend `{other}`"))),
    };
    // adaptation recenters every embedding before any scoring
    let (enroll, test, cohort_source) = match &options.adapt_set {
        Some(adapt) => {
            let center = |m: &BTreeMap<String, Embedding>| -> Result<BTreeMap<String, Embedding>> {
                let vals: Vec<Embedding> = m.values().cloned().collect();
                let adapted = mean_adapt(&vals, adapt)?;
                Ok(adapted.into_iter().map(|e| (e.utt_id.clone(), e)).collect())
            };
            let cohort = mean_adapt(cohort_source, adapt)?;
            (center(enroll)?, center(test)?, cohort)
        }
        None => (enroll.clone(), test.clone(), cohort_source.to_vec()),
    };
    let cohort = match &options.cohort {
        Some((_, n_top)) => Some(Cohort::new(cohort_source.clone(), *n_top)?),
        None => None,
    };
    let lookup = |m: &BTreeMap<String, Embedding>, id: &str| -> Result<Embedding> {
        m.get(id)
            .cloned()
            .ok_or_else(|| Error::Usage(format!("no embedding for utterance `{id}`")))
    };
    // cohort statistics are fixed per embedding; cache them per side
    let mut stats_cache: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut rows = Vec::with_capacity(trials.len());
    for trial in &trials.trials {
        let e = lookup(&enroll, &trial.enroll_id)?;
        let t = lookup(&test, &trial.test_id)?;
        let raw = scorer.score(&e, &t)?;
        let score = match &cohort {
            Some(cohort) => {
                let mut side = |key: String, emb: &Embedding| -> Result<(f64, f64)> {
                    if let Some(v) = stats_cache.get(&key) {
                        return Ok(*v);
                    }
                    let v = cohort_stats(emb, cohort, &scorer)?;
                    stats_cache.insert(key, v);
                    Ok(v)
                };
                let s1 = side(format!("e\u{1}{}", trial.enroll_id), &e)?;
                let s2 = side(format!("t\u{1}{}", trial.test_id), &t)?;
                s_norm_from_stats(raw, s1, s2)?
            }
            None => raw,
        };
        rows.push((trial.enroll_id.clone(), trial.test_id.clone(), score));
    }
    Ok(rows)
}

fn stage_score(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let trials = load_trials(&ctx.config.path("trials")?)?;
    let emb_path = ctx.workdir.join("embeddings.txt");
    let enroll = formats::embeddings_by_id(formats::read_embeddings(&emb_path)?);
    let test_path = ctx.workdir.join("embeddings_test.txt");
    let test = if test_path.exists() {
        formats::embeddings_by_id(formats::read_embeddings(&test_path)?)
    } else {
        enroll.clone()
    };
    let transform = match ctx.config.path_opt("csml_transform") {
        Some(p) => {
            let store = formats::read_weights(&p)?;
            Some(transform_from_store(&store).map_err(|e| Error::data(&p, e.to_string()))?)
        }
        None => None,
    };
    let adapt_set = match ctx.config.path_opt("adapt_embeddings") {
        Some(p) => Some(formats::read_embeddings(&p)?),
        None => None,
    };
    let cohort = match ctx.config.path_opt("cohort_embeddings") {
        Some(p) => {
            let embs = formats::read_embeddings(&p)?;
            let default_top = embs.len().min(200);
            let n_top = ctx.config.usize_or("cohort_top", default_top)?.min(embs.len());
            Some((embs, n_top))
        }
        None => None,
    };
    let options = ScoreOptions {
        backend: ctx.config.get_or("backend", "cs"),
        transform,
        adapt_set,
        cohort: cohort.clone(),
    };
    let cohort_source = cohort.map(|(e, _)| e).unwrap_or_default();
    let rows = score_trials(&trials, &enroll, &test, &cohort_source, &options)?;
    let out = ctx.workdir.join("scores.txt");
    formats::write_scores(&out, &rows)?;
    Ok(vec![PathBuf::from("scores.txt")])
}

/// The transform travels in the shared weight container as `csml.a`.
pub fn transform_from_store(store: &WeightStore) -> svkit_core::Result<CsmlTransform> {
    let t = store.get("csml.a")?;
    if t.ndim() != 2 || t.dim(0) != t.dim(1) {
        return Err(CoreError::ShapeMismatch("transform must be square".into()));
    }
    CsmlTransform::from_rows(t.dim(0), t.data().to_vec())
}

pub fn transform_to_store(transform: &CsmlTransform) -> WeightStore {
    let mut store = WeightStore::new();
    let d = transform.dim();
    store.set(
        "csml.a",
        svkit_core::Tensor::from_vec(&[d, d], transform.data().to_vec()).unwrap(),
    );
    store
}

/// Pair scores with trials, insisting on aligned ids.
pub fn align_scores(trials: &TrialSet, rows: &[(String, String, f64)], path: &Path) -> Result<ScoreSet> {
    if rows.len() != trials.len() {
        return Err(Error::data(
            path,
            format!("{} score rows for {} trials", rows.len(), trials.len()),
        ));
    }
    let mut scores = Vec::with_capacity(rows.len());
    for (i, ((e, t, s), trial)) in rows.iter().zip(trials.trials.iter()).enumerate() {
        if e != &trial.enroll_id || t != &trial.test_id {
            return Err(Error::data(
                path,
                format!("line {}: score pair ({e}, {t}) does not match trial", i + 1),
            ));
        }
        scores.push(*s);
    }
    Ok(ScoreSet::new(scores))
}

pub fn render_report(eer: f64, min_dcf: f64) -> String {
    format!("EER={eer} minDCF={min_dcf}\n")
}

fn stage_eval(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let trials = load_trials(&ctx.config.path("trials")?)?;
    let scores_path = ctx.workdir.join("scores.txt");
    let rows = formats::read_scores(&scores_path)?;
    let scores = align_scores(&trials, &rows, &scores_path)?;
    let p_tar = ctx.config.f64_or("ptar", svkit_core::eval::DEFAULT_P_TARGET)?;
    let c_miss = ctx.config.f64_or("c_miss", 1.0)?;
    let c_fa = ctx.config.f64_or("c_fa", 1.0)?;
    let eer = compute_eer(&scores, &trials)?;
    let min_dcf = compute_min_dcf(&scores, &trials, p_tar, c_miss, c_fa)?;
    let report_path = ctx.workdir.join("report.txt");
    std::fs::write(&report_path, render_report(eer, min_dcf))
        .map_err(|e| Error::io(&report_path, e))?;
    let det = det_points(&scores, &trials)?;
    let det_path = ctx.workdir.join("det.txt");
    std::fs::write(&det_path, formats::format_det(&det)).map_err(|e| Error::io(&det_path, e))?;
    Ok(vec![PathBuf::from("report.txt"), PathBuf::from("det.txt")])
}

/// Run the requested stages in dependency order. Stages whose outputs
/// are current under the same config are skipped unless `force` is set.
pub fn run_pipeline(config: &PipelineConfig, force: bool) -> Result<Vec<StageOutcome>> {
    let mut stages = config.stages()?;
    stages.sort_by_key(|s| crate::config::STAGES.iter().position(|x| x == s));
    stages.dedup();
    let workdir = config.path("workdir")?;
    std::fs::create_dir_all(&workdir).map_err(|e| Error::io(&workdir, e))?;
    let config_hash = sha256_hex(config.source_text.as_bytes());
    let mut manifest = match Manifest::load(&workdir)? {
        Some(m) if m.config_hash == config_hash => m,
        _ => Manifest::new(&config_hash),
    };
    let ctx = Ctx { config, workdir: workdir.clone() };
    let mut outcomes = Vec::new();
    for stage in &stages {
        if !force && manifest.stage_is_current(stage, &config_hash, &workdir) {
            outcomes.push(StageOutcome { stage: stage.clone(), ran: false });
            continue;
        }
        let result = match stage.as_str() {
            "features" => stage_features(&ctx),
            "vad" => stage_vad(&ctx),
            "embed" => stage_embed(&ctx),
            "score" => stage_score(&ctx),
            "eval" => stage_eval(&ctx),
            other => Err(Error::Usage(format!("unknown stage `{other}`"))),
        };
        match result {
            Ok(artifacts) => {
                manifest.record_stage(stage, &workdir, &artifacts)?;
                manifest.save(&workdir)?;
                outcomes.push(StageOutcome { stage: stage.clone(), ran: true });
            }
            Err(e) => {
                manifest.record_partial(stage);
                manifest.save(&workdir)?;
                return Err(e);
            }
        }
    }
    Ok(outcomes)
}
