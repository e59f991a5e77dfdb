//! Command-line interface: one subcommand per pipeline operation plus
//! the config-driven pipeline runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use svkit_core::audio::{fit_noise_seeded, mix_at_snr};
use svkit_core::backend::{sample_triplets, train_csml, CsmlTrainConfig};
use svkit_core::eval::{compute_eer, compute_min_dcf, det_points, truncate_test};
use svkit_core::features::FeatureKind;
use svkit_core::nnet::{
    train_toy, LossKind, ResNetConfig, TrainConfig, UnetConfig,
};
use svkit_core::reverb::{augment_utterance, generate_rir, sample_room, RoomRanges};
use svkit_core::vad::{energy_vad, train_unet_toy, unet_vad_forward, SpeechMask, VadTrainConfig};
use svkit_core::{rng, synth};

use crate::config::{validate_config, PipelineConfig};
use crate::error::{Error, Result};
use crate::formats;
use crate::pipeline::{
    self, align_scores, apply_cmn, featurize, load_trials, render_report, score_trials,
    transform_from_store, transform_to_store, ScoreOptions,
};
use crate::util::par_map;
use crate::wav;

#[derive(Parser)]
#[command(name = "svkit", version, about = "Far-field speaker verification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features from WAV files into SVKF containers.
    Features(FeaturesArgs),
    /// Detect speech frames and write a mask file.
    Vad(VadArgs),
    /// Mix speech with noise at a requested SNR.
    Mix(MixArgs),
    /// Generate image-method room impulse responses.
    RirGen(RirGenArgs),
    /// Reverberate and mix utterances listed in a manifest.
    Augment(AugmentArgs),
    /// Train a toy model (speaker extractor, speech detector, or scoring transform).
    TrainToy(TrainToyArgs),
    /// Extract speaker embeddings from feature files.
    Embed(EmbedArgs),
    /// Score trials with the selected backend.
    Score(ScoreArgs),
    /// Keep the first seconds of detected speech and renormalize.
    Truncate(TruncateArgs),
    /// Compute EER / minDCF and DET points from scores.
    Eval(EvalArgs),
    /// Run configured stages end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct FeaturesArgs {
    /// Utterance list: `<utt_id> <wav_path>` per line.
    #[arg(long)]
    list: PathBuf,
    #[arg(long, value_parser = parse_kind_arg)]
    kind: FeatureKind,
    /// sliding | global | both | none
    #[arg(long, default_value = "none")]
    cmn: String,
    #[arg(long, default_value_t = 0.0)]
    dither: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct VadArgs {
    #[arg(long)]
    list: PathBuf,
    /// energy | unet
    #[arg(long, default_value = "energy")]
    engine: String,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    mean_scale: f64,
    #[arg(long, default_value_t = 2)]
    context: usize,
    /// Detector weights (unet engine).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    speech: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    /// Signal-to-noise ratio in dB.
    #[arg(long)]
    snr: f64,
    /// Seed for the noise-offset draw when the noise outlasts the speech.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RirGenArgs {
    #[arg(long)]
    seed: u64,
    /// Rooms to sample; each yields a speech and a noise response.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 16000)]
    fs: u32,
    #[arg(long, default_value_t = 10)]
    max_order: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    /// Lines: `<out_name> <speech.wav> <noise.wav> <snr_db>`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16000)]
    fs: u32,
    #[arg(long, default_value_t = 10)]
    max_order: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainToyArgs {
    /// speaker | vad | csml
    #[arg(long, default_value = "speaker")]
    task: String,
    /// am | d (speaker task)
    #[arg(long, default_value = "am")]
    loss: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// resnet34 | resnet50se | toy (speaker task)
    #[arg(long, default_value = "toy")]
    arch: String,
    /// Labelled audio list `<speaker_id> <wav_path>`; omit to synthesize.
    #[arg(long)]
    list: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    synth_speakers: usize,
    #[arg(long, default_value_t = 12)]
    synth_utts: usize,
    #[arg(long, default_value_t = 2.5)]
    synth_secs: f64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    chunk_frames: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Windows of synthetic detector data (vad task).
    #[arg(long, default_value_t = 60)]
    windows: usize,
    /// Detector width multiplier (vad task).
    #[arg(long, default_value_t = 4)]
    base_channels: usize,
    /// Embedding text file (csml task).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Labels `<utt_id> <speaker_id>` (csml task).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    triplets: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Directory of `<utt_id>.svkf` feature files.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Explicit feature files (utterance id = file stem).
    #[arg(value_name = "SVKF")]
    features: Vec<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    /// Cross-check against the architecture recorded in the weights.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, default_value = "both")]
    cmn: String,
    /// Optional mask file to select speech frames.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Frame hop of the mask file in seconds (0.02 for detector masks).
    #[arg(long, default_value_t = 0.02)]
    mask_hop: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    trials: PathBuf,
    /// Embeddings for the enrollment side (and test side by default).
    #[arg(long)]
    enroll: PathBuf,
    /// Separate test-side embeddings (e.g. truncated).
    #[arg(long)]
    test: Option<PathBuf>,
    /// cs | csml
    #[arg(long, default_value = "cs")]
    backend: String,
    /// Transform container for the csml backend.
    #[arg(long)]
    transform: Option<PathBuf>,
    /// Adaptation embeddings or `none`.
    #[arg(long, default_value = "none")]
    adapt: String,
    /// `<cohort-embeddings>:<n_top>` or `none`.
    #[arg(long, default_value = "none")]
    snorm: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TruncateArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    /// Utterance id inside the mask file; defaults to the feature stem.
    #[arg(long)]
    utt: Option<String>,
    #[arg(long, default_value_t = 0.02)]
    mask_hop: f64,
    #[arg(long)]
    seconds: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    ptar: f64,
    #[arg(long, default_value_t = 1.0)]
    c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    c_fa: f64,
    /// Write DET operating points here.
    #[arg(long)]
    det: Option<PathBuf>,
    /// Write the metrics report here (also printed).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Recompute every stage even when outputs are current.
    #[arg(long)]
    force: bool,
    /// Only validate the config and print a report.
    #[arg(long)]
    validate: bool,
}

fn parse_kind_arg(s: &str) -> std::result::Result<FeatureKind, String> {
    match s {
        "mfb80" => Ok(FeatureKind::Mfb80),
        "mfcc40" => Ok(FeatureKind::Mfcc40),
        "mfcc23" => Ok(FeatureKind::Mfcc23),
        other => Err(format!("unknown feature kind `{other}`")),
    }
}

pub fn run() -> Result<()> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version displays are successful exits; everything
            // else is a usage problem (exit code 1)
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            return Err(Error::Usage(e.to_string()));
        }
    };
    match cli.command {
        Command::Features(args) => cmd_features(args),
        Command::Vad(args) => cmd_vad(args),
        Command::Mix(args) => cmd_mix(args),
        Command::RirGen(args) => cmd_rir_gen(args),
        Command::Augment(args) => cmd_augment(args),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Score(args) => cmd_score(args),
        Command::Truncate(args) => cmd_truncate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Pipeline(args) => cmd_pipeline(args),
    }
}

fn cmd_features(args: FeaturesArgs) -> Result<()> {
    let entries = formats::read_wav_list(&args.list)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let jobs: Vec<(usize, (String, PathBuf))> = entries.into_iter().enumerate().collect();
    let results = par_map(&jobs, |(idx, (utt, path))| -> Result<()> {
        let buf = wav::read_wav(path)?;
        let feats = featurize(&buf, args.kind, args.dither, args.seed, *idx as u64)
            .map_err(|e| Error::data(path, e.to_string()))?;
        let feats = apply_cmn(&feats, &args.cmn).map_err(|e| Error::data(path, e.to_string()))?;
        formats::write_features(&args.out_dir.join(format!("{utt}.svkf")), &feats)
    });
    let count = results.len();
    results.into_iter().collect::<Result<Vec<_>>>()?;
    println!("wrote {count} feature files to {}", args.out_dir.display());
    Ok(())
}

fn cmd_vad(args: VadArgs) -> Result<()> {
    let entries = formats::read_wav_list(&args.list)?;
    let masks: Vec<(String, SpeechMask)> = match args.engine.as_str() {
        "energy" => {
            let threshold = args.threshold.unwrap_or(5.5);
            let results = par_map(&entries, |(utt, path)| -> Result<(String, SpeechMask)> {
                let buf = wav::read_wav(path)?;
                let feats = featurize(&buf, FeatureKind::Mfcc40, 0.0, 0, 0)
                    .map_err(|e| Error::data(path, e.to_string()))?;
                let mask = energy_vad(&feats, threshold, args.mean_scale, args.context)?;
                Ok((utt.clone(), mask))
            });
            results.into_iter().collect::<Result<Vec<_>>>()?
        }
        "unet" => {
            let threshold = args.threshold.unwrap_or(0.5);
            let weights = args
                .weights
                .as_ref()
                .ok_or_else(|| Error::Usage("unet engine needs --weights".into()))?;
            let store = formats::read_weights(weights)?;
            let results = par_map(&entries, |(utt, path)| -> Result<(String, SpeechMask)> {
                let buf = wav::read_wav(path)?;
                let feats = featurize(&buf, FeatureKind::Mfcc23, 0.0, 0, 0)
                    .map_err(|e| Error::data(path, e.to_string()))?;
                let mask = unet_vad_forward(&feats, &store, threshold)?;
                Ok((utt.clone(), mask))
            });
            results.into_iter().collect::<Result<Vec<_>>>()?
        }
        other => return Err(Error::Usage(format!("unknown engine `{other}`"))),
    };
    formats::write_masks(&args.out, &masks)?;
    println!("wrote {} masks to {}", masks.len(), args.out.display());
    Ok(())
}

fn cmd_mix(args: MixArgs) -> Result<()> {
    let speech = wav::read_wav(&args.speech)?;
    let noise = wav::read_wav(&args.noise)?;
    if noise.sample_rate != speech.sample_rate {
        return Err(Error::Usage("speech and noise sample rates differ".into()));
    }
    let mut rng = rng::from_seed(args.seed);
    let fitted = fit_noise_seeded(&noise, speech.len(), &mut rng);
    let mixed = mix_at_snr(&speech, &fitted, args.snr)?;
    wav::write_wav_pcm16(&args.out, &mixed)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn room_sidecar_line(id: &str, room: &svkit_core::reverb::RoomSpec) -> String {
    let j = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
    format!(
        "{id} dims={} source={} receiver={} beta={} order={}\n",
        j(&room.dims),
        j(&room.source),
        j(&room.receiver),
        j(&room.beta),
        room.max_order
    )
}

fn cmd_rir_gen(args: RirGenArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let ranges = RoomRanges { fs: args.fs, max_order: args.max_order, ..RoomRanges::default() };
    let mut sidecar = String::new();
    for i in 0..args.count {
        let (speech_room, noise_room) = sample_room(args.seed.wrapping_add(i as u64), &ranges)?;
        for (tag, room) in [("speech", &speech_room), ("noise", &noise_room)] {
            let rir = generate_rir(room)?;
            let buf = svkit_core::audio::AudioBuffer::new(rir.taps, args.fs);
            let name = format!("rir_{i:04}_{tag}.wav");
            wav::write_wav_f32(&args.out_dir.join(&name), &buf)?;
            sidecar.push_str(&room_sidecar_line(&format!("room{i:04}_{tag}"), room));
        }
    }
    let sidecar_path = args.out_dir.join("rooms.txt");
    std::fs::write(&sidecar_path, sidecar).map_err(|e| Error::io(&sidecar_path, e))?;
    println!("wrote {} rooms to {}", args.count, args.out_dir.display());
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.manifest).map_err(|e| Error::io(&args.manifest, e))?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let ranges = RoomRanges { fs: args.fs, max_order: args.max_order, ..RoomRanges::default() };
    let mut jobs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::data(
                &args.manifest,
                format!("line {}: expected `<out> <speech> <noise> <snr>`", lineno + 1),
            ));
        }
        let snr: f64 = fields[3].parse().map_err(|e| {
            Error::data(&args.manifest, format!("line {}: bad SNR: {e}", lineno + 1))
        })?;
        jobs.push((
            fields[0].to_string(),
            base.join(fields[1]),
            base.join(fields[2]),
            snr,
        ));
    }
    let jobs: Vec<(usize, (String, PathBuf, PathBuf, f64))> =
        jobs.into_iter().enumerate().collect();
    let results = par_map(&jobs, |(idx, (out_name, speech, noise, snr))| -> Result<()> {
        let speech_buf = wav::read_wav(speech)?;
        let noise_buf = wav::read_wav(noise)?;
        let rooms = sample_room(args.seed.wrapping_add(*idx as u64), &ranges)?;
        let out = augment_utterance(&speech_buf, &noise_buf, &rooms, *snr)?;
        wav::write_wav_pcm16(&args.out_dir.join(out_name), &out)
    });
    let count = results.len();
    results.into_iter().collect::<Result<Vec<_>>>()?;
    println!("augmented {count} utterances into {}", args.out_dir.display());
    Ok(())
}

fn arch_by_name(name: &str) -> Result<ResNetConfig> {
    match name {
        "resnet34" => Ok(ResNetConfig::resnet34()),
        "resnet50se" => Ok(ResNetConfig::resnet50_se()),
        "toy" => Ok(ResNetConfig::toy()),
        other => Err(Error::Usage(format!("unknown architecture `{other}`"))),
    }
}

fn cmd_train_toy(args: TrainToyArgs) -> Result<()> {
    match args.task.as_str() {
        "speaker" => train_speaker(args),
        "vad" => train_vad(args),
        "csml" => train_transform(args),
        other => Err(Error::Usage(format!("unknown task `{other}`"))),
    }
}

fn train_speaker(args: TrainToyArgs) -> Result<()> {
    let arch = arch_by_name(&args.arch)?;
    let loss = match args.loss.as_str() {
        "am" => LossKind::AmSoftmax,
        "d" => LossKind::DSoftmax,
        other => return Err(Error::Usage(format!("unknown loss `{other}`"))),
    };
    let mut tc = TrainConfig { seed: args.seed, ..TrainConfig::default() };
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = args.chunk_frames {
        tc.chunk_frames = v;
    }
    if let Some(v) = args.scale {
        tc.scale = v;
    }
    if let Some(v) = args.margin {
        tc.margin = v;
    }
    if let Some(v) = args.epsilon {
        tc.epsilon = v;
    }
    let audio: Vec<(svkit_core::audio::AudioBuffer, usize)> = match &args.list {
        Some(list) => {
            let text = std::fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
            let base = list.parent().unwrap_or(Path::new("."));
            let mut speakers: Vec<String> = Vec::new();
            let mut out = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != 2 {
                    return Err(Error::data(
                        list,
                        format!("line {}: expected `<speaker> <wav>`", lineno + 1),
                    ));
                }
                let spk = fields[0].to_string();
                let label = match speakers.iter().position(|s| s == &spk) {
                    Some(i) => i,
                    None => {
                        speakers.push(spk);
                        speakers.len() - 1
                    }
                };
                out.push((wav::read_wav(&base.join(fields[1]))?, label));
            }
            out
        }
        None => synth::speaker_corpus(
            args.seed,
            args.synth_speakers,
            args.synth_utts,
            args.synth_secs,
            16000,
        ),
    };
    let kind = arch.feature_kind;
    let jobs: Vec<(usize, (svkit_core::audio::AudioBuffer, usize))> =
        audio.into_iter().enumerate().collect();
    let dataset_results = par_map(&jobs, |(idx, (buf, label))| -> Result<_> {
        let feats = featurize(buf, kind, 0.0, args.seed, *idx as u64)
            .map_err(|e| Error::Usage(e.to_string()))?;
        let feats = apply_cmn(&feats, "both").map_err(|e| Error::Usage(e.to_string()))?;
        Ok((feats, *label))
    });
    let dataset = dataset_results.into_iter().collect::<Result<Vec<_>>>()?;
    let outcome = train_toy(&dataset, &arch, loss, &tc)?;
    formats::write_weights(&args.out, &outcome.weights)?;
    println!(
        "trained {} on {} utterances; epoch losses: {:?}",
        arch.arch_id(),
        dataset.len(),
        outcome.epoch_losses
    );
    Ok(())
}

fn train_vad(args: TrainToyArgs) -> Result<()> {
    let dataset = synth::vad_corpus(args.seed, args.windows)?;
    let mut tc = VadTrainConfig {
        seed: args.seed,
        unet: UnetConfig { base_channels: args.base_channels, ..UnetConfig::toy() },
        ..VadTrainConfig::default()
    };
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        tc.learning_rate = v;
    }
    let outcome = train_unet_toy(&dataset, &tc)?;
    formats::write_weights(&args.out, &outcome.weights)?;
    println!(
        "trained detector on {} windows; epoch losses: {:?}",
        dataset.len(),
        outcome.epoch_losses
    );
    Ok(())
}

fn train_transform(args: TrainToyArgs) -> Result<()> {
    let emb_path = args
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Usage("csml task needs --embeddings".into()))?;
    let labels_path =
        args.labels.as_ref().ok_or_else(|| Error::Usage("csml task needs --labels".into()))?;
    let embeddings = formats::read_embeddings(emb_path)?;
    let (label_rows, _) = formats::read_label_list(labels_path)?;
    let by_id: BTreeMap<String, usize> = label_rows.into_iter().collect();
    let mut labels = Vec::with_capacity(embeddings.len());
    for e in &embeddings {
        let Some(&l) = by_id.get(&e.utt_id) else {
            return Err(Error::data(labels_path, format!("no label for `{}`", e.utt_id)));
        };
        labels.push(l);
    }
    let triples = sample_triplets(&labels, args.triplets, args.seed)?;
    let owned: Vec<_> = triples
        .into_iter()
        .map(|(a, p, n)| (embeddings[a].clone(), embeddings[p].clone(), embeddings[n].clone()))
        .collect();
    let cfg = CsmlTrainConfig {
        seed: args.seed,
        margin: args.margin.unwrap_or(0.2),
        learning_rate: args.learning_rate.unwrap_or(0.01),
        epochs: args.epochs.unwrap_or(20),
    };
    let transform = train_csml(&owned, &cfg)?;
    formats::write_weights(&args.out, &transform_to_store(&transform))?;
    println!("trained transform on {} triplets", owned.len());
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let mut files: Vec<PathBuf> = args.features.clone();
    if let Some(dir) = &args.features_dir {
        let mut listed: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "svkf"))
            .collect();
        listed.sort();
        files.extend(listed);
    }
    if files.is_empty() {
        return Err(Error::Usage("no feature files given".into()));
    }
    let store = formats::read_weights(&args.weights)?;
    let arch = store
        .resnet_config()
        .map_err(|e| Error::data(&args.weights, e.to_string()))?;
    if let Some(name) = &args.arch {
        if name != arch.arch_id() {
            return Err(Error::Usage(format!(
                "weights hold a {} extractor, not `{name}`",
                arch.arch_id()
            )));
        }
    }
    let masks: BTreeMap<String, SpeechMask> = match &args.masks {
        Some(path) => formats::read_masks(path, args.mask_hop)?.into_iter().collect(),
        None => BTreeMap::new(),
    };
    let results = par_map(&files, |path| -> Result<svkit_core::nnet::Embedding> {
        let utt = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::data(path, "unusable file name"))?
            .to_string();
        let feats = formats::read_features(path)?;
        let selected = match masks.get(&utt) {
            Some(mask) => {
                let mask = if mask.len() != feats.rows() {
                    mask.resample_hop(feats.frame_hop, feats.rows())
                } else {
                    mask.clone()
                };
                let speech = mask.speech_frames();
                if speech.is_empty() {
                    return Err(Error::data(path, "no speech frames survive the mask"));
                }
                feats.select_rows(&speech)
            }
            None => feats,
        };
        let normalized =
            apply_cmn(&selected, &args.cmn).map_err(|e| Error::data(path, e.to_string()))?;
        let mut emb = svkit_core::nnet::embed_forward(&normalized, &store, &arch)
            .map_err(|e| Error::data(path, e.to_string()))?;
        emb.utt_id = utt;
        Ok(emb)
    });
    let embeddings = results.into_iter().collect::<Result<Vec<_>>>()?;
    formats::write_embeddings(&args.out, &embeddings)?;
    println!("wrote {} embeddings to {}", embeddings.len(), args.out.display());
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let trials = load_trials(&args.trials)?;
    let enroll = formats::embeddings_by_id(formats::read_embeddings(&args.enroll)?);
    let test = match &args.test {
        Some(p) => formats::embeddings_by_id(formats::read_embeddings(p)?),
        None => enroll.clone(),
    };
    let transform = match &args.transform {
        Some(p) => Some(
            transform_from_store(&formats::read_weights(p)?)
                .map_err(|e| Error::data(p, e.to_string()))?,
        ),
        None => None,
    };
    let adapt_set = match args.adapt.as_str() {
        "none" | "" => None,
        path => Some(formats::read_embeddings(Path::new(path))?),
    };
    let cohort = match args.snorm.as_str() {
        "none" | "" => None,
        spec => {
            let (path, n_top) = spec
                .rsplit_once(':')
                .ok_or_else(|| Error::Usage("--snorm wants `<embeddings>:<n_top>`".into()))?;
            let embs = formats::read_embeddings(Path::new(path))?;
            let n_top: usize = n_top
                .parse()
                .map_err(|e| Error::Usage(format!("bad top-n in --snorm: {e}")))?;
            Some((embs, n_top))
        }
    };
    let options =
        ScoreOptions { backend: args.backend.clone(), transform, adapt_set, cohort: cohort.clone() };
    let cohort_source = cohort.map(|(e, _)| e).unwrap_or_default();
    let rows = score_trials(&trials, &enroll, &test, &cohort_source, &options)?;
    formats::write_scores(&args.out, &rows)?;
    println!("scored {} trials into {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_truncate(args: TruncateArgs) -> Result<()> {
    let feats = formats::read_features(&args.features)?;
    let utt = match &args.utt {
        Some(u) => u.clone(),
        None => args
            .features
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::data(&args.features, "unusable file name"))?
            .to_string(),
    };
    let masks = formats::read_masks(&args.masks, args.mask_hop)?;
    let mask = masks
        .into_iter()
        .find(|(id, _)| id == &utt)
        .map(|(_, m)| m)
        .ok_or_else(|| Error::data(&args.masks, format!("no mask for `{utt}`")))?;
    let mask = if mask.len() != feats.rows() {
        mask.resample_hop(feats.frame_hop, feats.rows())
    } else {
        mask
    };
    let out = truncate_test(&feats, &mask, args.seconds)?;
    formats::write_features(&args.out, &out)?;
    println!("kept {} frames into {}", out.rows(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let trials = load_trials(&args.trials)?;
    let rows = formats::read_scores(&args.scores)?;
    let scores = align_scores(&trials, &rows, &args.scores)?;
    let eer = compute_eer(&scores, &trials)?;
    let min_dcf = compute_min_dcf(&scores, &trials, args.ptar, args.c_miss, args.c_fa)?;
    let report = render_report(eer, min_dcf);
    print!("{report}");
    if let Some(path) = &args.out {
        std::fs::write(path, &report).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &args.det {
        let points = det_points(&scores, &trials)?;
        std::fs::write(path, formats::format_det(&points)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let config = PipelineConfig::load(&args.config)?;
    if args.validate {
        let report = validate_config(&config);
        print!("{}", report.render());
        return Ok(());
    }
    let report = validate_config(&config);
    if !report.is_clean() {
        print!("{}", report.render());
        return Err(Error::Usage("configuration problems; nothing was run".into()));
    }
    let outcomes = pipeline::run_pipeline(&config, args.force)?;
    for o in &outcomes {
        println!("{} {}", o.stage, if o.ran { "ran" } else { "up-to-date" });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn kind_parser_rejects_unknown() {
        assert!(parse_kind_arg("mfb80").is_ok());
        assert!(parse_kind_arg("plp").is_err());
    }
}
