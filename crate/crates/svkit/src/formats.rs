//! On-disk containers: SVKF feature matrices, SVKW weight stores, and
//! the text formats for embeddings, scores, masks and DET points.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use svkit_core::features::{FeatureKind, FeatureMatrix};
use svkit_core::nnet::{Embedding, WeightStore};
use svkit_core::tensor::Tensor;
use svkit_core::vad::SpeechMask;

use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"SVKF";
const WEIGHT_MAGIC: &[u8; 4] = b"SVKW";

fn read_exact(data: &mut Cursor<&[u8]>, out: &mut [u8], what: &str) -> svkit_core::Result<()> {
    data.read_exact(out)
        .map_err(|_| svkit_core::Error::Format(format!("truncated {what}")))
}

/// SVKF: magic, u32 rows, u32 cols, u8 kind code, f32 LE row-major data.
pub fn encode_features(feats: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * feats.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(feats.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(feats.cols() as u32).to_le_bytes());
    out.push(feats.kind.code());
    for &v in feats.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> svkit_core::Result<FeatureMatrix> {
    use svkit_core::Error as E;
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    read_exact(&mut cur, &mut magic, "feature header")?;
    if &magic != FEATURE_MAGIC {
        return Err(E::Format("bad feature magic".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut cur, &mut word, "row count")?;
    let rows = u32::from_le_bytes(word) as usize;
    read_exact(&mut cur, &mut word, "column count")?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut kind_code = [0u8; 1];
    read_exact(&mut cur, &mut kind_code, "kind code")?;
    let kind = FeatureKind::from_code(kind_code[0])?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        read_exact(&mut cur, &mut word, "feature payload")?;
        data.push(f32::from_le_bytes(word) as f64);
    }
    FeatureMatrix::new(data, rows, cols, kind.frame_hop_secs(), kind.frame_len_secs(), kind)
}

pub fn write_features(path: &Path, feats: &FeatureMatrix) -> Result<()> {
    std::fs::write(path, encode_features(feats)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(Error::Core)
}

/// SVKW: magic, u32 tensor count; per tensor u16 name length, UTF-8
/// name, u8 ndim, u32 dims, f32 LE data.
pub fn encode_weights(store: &WeightStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.ndim() as u8);
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> svkit_core::Result<WeightStore> {
    use svkit_core::Error as E;
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    read_exact(&mut cur, &mut magic, "weight header")?;
    if &magic != WEIGHT_MAGIC {
        return Err(E::Format("bad weight magic".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut cur, &mut word, "tensor count")?;
    let count = u32::from_le_bytes(word) as usize;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let mut half = [0u8; 2];
        read_exact(&mut cur, &mut half, "name length")?;
        let name_len = u16::from_le_bytes(half) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut cur, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| E::Format("tensor name is not UTF-8".into()))?;
        let mut byte = [0u8; 1];
        read_exact(&mut cur, &mut byte, "rank")?;
        let ndim = byte[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            read_exact(&mut cur, &mut word, "dimension")?;
            dims.push(u32::from_le_bytes(word) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            read_exact(&mut cur, &mut word, "tensor payload")?;
            data.push(f32::from_le_bytes(word) as f64);
        }
        store.set(&name, Tensor::from_vec(&dims, data)?);
    }
    Ok(store)
}

pub fn write_weights(path: &Path, store: &WeightStore) -> Result<()> {
    std::fs::write(path, encode_weights(store)).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<WeightStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes).map_err(Error::Core)
}

/// Embedding text: one `<utt_id> <v1> ... <vD>` line per utterance,
/// full float precision.
pub fn format_embeddings(embeddings: &[Embedding]) -> String {
    let mut out = String::new();
    for e in embeddings {
        out.push_str(&e.utt_id);
        for v in &e.vector {
            out.push(' ');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str, path: &Path) -> Result<Vec<Embedding>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts
            .next()
            .ok_or_else(|| Error::data(path, format!("line {}: empty record", lineno + 1)))?;
        let vector: std::result::Result<Vec<f64>, _> =
            parts.map(|p| p.parse::<f64>()).collect();
        let vector = vector.map_err(|e| {
            Error::data(path, format!("line {}: bad float: {e}", lineno + 1))
        })?;
        if vector.is_empty() {
            return Err(Error::data(path, format!("line {}: no values", lineno + 1)));
        }
        out.push(Embedding::new(id, vector));
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    std::fs::write(path, format_embeddings(embeddings)).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Embedding>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path)
}

pub fn embeddings_by_id(embeddings: Vec<Embedding>) -> BTreeMap<String, Embedding> {
    embeddings.into_iter().map(|e| (e.utt_id.clone(), e)).collect()
}

/// Scores text: `<enroll_id> <test_id> <score>` per line.
pub fn format_scores(rows: &[(String, String, f64)]) -> String {
    let mut out = String::new();
    for (e, t, s) in rows {
        out.push_str(&format!("{e} {t} {s}\n"));
    }
    out
}

pub fn parse_scores(text: &str, path: &Path) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::data(
                path,
                format!("line {}: expected `<enroll> <test> <score>`", lineno + 1),
            ));
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|e| Error::data(path, format!("line {}: bad score: {e}", lineno + 1)))?;
        out.push((fields[0].to_string(), fields[1].to_string(), score));
    }
    Ok(out)
}

pub fn write_scores(path: &Path, rows: &[(String, String, f64)]) -> Result<()> {
    std::fs::write(path, format_scores(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

/// Mask text: `<utt_id> <0/1 per frame>` per line.
pub fn format_masks(masks: &[(String, SpeechMask)]) -> String {
    let mut out = String::new();
    for (id, mask) in masks {
        out.push_str(id);
        out.push(' ');
        for &d in &mask.decisions {
            out.push(if d { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

pub fn parse_masks(text: &str, frame_hop: f64, path: &Path) -> Result<Vec<(String, SpeechMask)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(bits)) = (parts.next(), parts.next()) else {
            return Err(Error::data(path, format!("line {}: expected `<utt> <bits>`", lineno + 1)));
        };
        let decisions: std::result::Result<Vec<bool>, String> = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(format!("bad mask character `{other}`")),
            })
            .collect();
        let decisions =
            decisions.map_err(|m| Error::data(path, format!("line {}: {m}", lineno + 1)))?;
        let probs = decisions.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
        out.push((id.to_string(), SpeechMask { probs, decisions, frame_hop }));
    }
    Ok(out)
}

pub fn write_masks(path: &Path, masks: &[(String, SpeechMask)]) -> Result<()> {
    std::fs::write(path, format_masks(masks)).map_err(|e| Error::io(path, e))
}

pub fn read_masks(path: &Path, frame_hop: f64) -> Result<Vec<(String, SpeechMask)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_masks(&text, frame_hop, path)
}

/// DET text: `<p_fa> <p_miss>` per operating point.
pub fn format_det(points: &[(f64, f64)]) -> String {
    points.iter().map(|(fa, miss)| format!("{fa} {miss}\n")).collect()
}

/// Utterance lists: `<utt_id> <wav_path>` per line.
pub fn read_wav_list(path: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::data(
                path,
                format!("line {}: expected `<utt_id> <wav_path>`", lineno + 1),
            ));
        }
        let wav = Path::new(fields[1]);
        let wav = if wav.is_absolute() { wav.to_path_buf() } else { base.join(wav) };
        out.push((fields[0].to_string(), wav));
    }
    if out.is_empty() {
        return Err(Error::data(path, "empty utterance list"));
    }
    Ok(out)
}

/// Label lists: `<utt_id> <speaker_id>` per line; speakers are densified
/// to 0..n in first-appearance order.
pub fn read_label_list(path: &Path) -> Result<(Vec<(String, usize)>, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
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
                path,
                format!("line {}: expected `<utt_id> <speaker_id>`", lineno + 1),
            ));
        }
        let spk = fields[1].to_string();
        let idx = match speakers.iter().position(|s| s == &spk) {
            Some(i) => i,
            None => {
                speakers.push(spk);
                speakers.len() - 1
            }
        };
        out.push((fields[0].to_string(), idx));
    }
    Ok((out, speakers))
}
