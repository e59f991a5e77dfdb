//! RIFF/WAVE reading (16-bit PCM) and writing (PCM16 and float32).

use std::path::Path;

use svkit_core::audio::AudioBuffer;

use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

fn u16le(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32le(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Parse a PCM16 RIFF/WAVE payload; multichannel input collapses to
/// channel 0, samples scale to full-scale 1.0 by 1/32768.
pub fn parse_wav(bytes: &[u8]) -> svkit_core::Result<AudioBuffer> {
    use svkit_core::Error as E;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(E::Format("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None; // code, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32le(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(E::Format("chunk overruns file".into()));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(E::Format("fmt chunk too short".into()));
                }
                format = Some((
                    u16le(bytes, body_start),
                    u16le(bytes, body_start + 2),
                    u32le(bytes, body_start + 4),
                    u16le(bytes, body_start + 14),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {}
        }
        pos = body_start + size + (size & 1); // chunks are word aligned
    }
    let (code, channels, rate, bits) =
        format.ok_or_else(|| E::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| E::Format("missing data chunk".into()))?;
    if code != FORMAT_PCM || bits != 16 {
        return Err(E::Unsupported(format!(
            "only 16-bit PCM is readable (format code {code}, {bits} bits)"
        )));
    }
    if channels == 0 {
        return Err(E::Format("zero channels".into()));
    }
    let stride = 2 * channels as usize;
    let n = data.len() / stride;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let off = i * stride;
        let v = i16::from_le_bytes([data[off], data[off + 1]]);
        samples.push(v as f64 / 32768.0);
    }
    Ok(AudioBuffer::new(samples, rate))
}

/// Encode as 16-bit PCM; samples are rounded and clamped to the i16
/// range.
pub fn encode_wav_pcm16(buf: &AudioBuffer) -> Vec<u8> {
    let n = buf.samples.len();
    let data_size = 2 * n;
    let mut out = Vec::with_capacity(44 + data_size);
    write_header(&mut out, FORMAT_PCM, 1, buf.sample_rate, 16, data_size);
    for &s in &buf.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Encode as 32-bit IEEE float (used for impulse responses).
pub fn encode_wav_f32(buf: &AudioBuffer) -> Vec<u8> {
    let n = buf.samples.len();
    let data_size = 4 * n;
    let mut out = Vec::with_capacity(44 + data_size);
    write_header(&mut out, FORMAT_IEEE_FLOAT, 1, buf.sample_rate, 32, data_size);
    for &s in &buf.samples {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out
}

fn write_header(
    out: &mut Vec<u8>,
    format: u16,
    channels: u16,
    rate: u32,
    bits: u16,
    data_size: usize,
) {
    let byte_rate = rate * channels as u32 * bits as u32 / 8;
    let block_align = channels * bits / 8;
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_size as u32).to_le_bytes());
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(Error::Core)
}

pub fn write_wav_pcm16(path: &Path, buf: &AudioBuffer) -> Result<()> {
    std::fs::write(path, encode_wav_pcm16(buf)).map_err(|e| Error::io(path, e))
}

pub fn write_wav_f32(path: &Path, buf: &AudioBuffer) -> Result<()> {
    std::fs::write(path, encode_wav_f32(buf)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_is_bit_exact() {
        let samples: Vec<f64> = (-100..100).map(|v| v as f64 * 100.0 / 32768.0).collect();
        let buf = AudioBuffer::new(samples, 16000);
        let bytes = encode_wav_pcm16(&buf);
        let back = parse_wav(&bytes).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(encode_wav_pcm16(&back), bytes);
    }

    #[test]
    fn zero_signal_parses_to_zeros() {
        let buf = AudioBuffer::new(vec![0.0; 16000], 16000);
        let back = parse_wav(&encode_wav_pcm16(&buf)).unwrap();
        assert_eq!(back.len(), 16000);
        assert!(back.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_sample_amplitude() {
        // PCM16 value 32767 scales to 32767/32768
        let mut bytes = encode_wav_pcm16(&AudioBuffer::new(vec![0.0], 8000));
        let n = bytes.len();
        bytes[n - 2..].copy_from_slice(&32767i16.to_le_bytes());
        let back = parse_wav(&bytes).unwrap();
        assert_eq!(back.samples[0], 32767.0 / 32768.0);
    }

    #[test]
    fn stereo_collapses_to_channel_zero() {
        // hand-build a stereo file: ch0 = ramp, ch1 = junk
        let n = 50usize;
        let mut out = Vec::new();
        write_header(&mut out, FORMAT_PCM, 2, 16000, 16, 4 * n);
        for i in 0..n {
            out.extend_from_slice(&((i as i16) * 100).to_le_bytes());
            out.extend_from_slice(&(-7777i16).to_le_bytes());
        }
        let back = parse_wav(&out).unwrap();
        assert_eq!(back.len(), n);
        // oracle: independent scripted parse of channel 0
        for (i, &s) in back.samples.iter().enumerate() {
            assert_eq!(s, (i as f64 * 100.0) / 32768.0);
        }
    }

    #[test]
    fn malformed_and_unsupported_files_error() {
        assert!(parse_wav(b"not a wav").is_err());
        let buf = AudioBuffer::new(vec![0.1; 10], 16000);
        let float_bytes = encode_wav_f32(&buf);
        // float32 payloads are write-only
        assert!(matches!(parse_wav(&float_bytes), Err(svkit_core::Error::Unsupported(_))));
    }

    #[test]
    fn clipping_saturates_instead_of_wrapping() {
        let buf = AudioBuffer::new(vec![1.5, -1.5], 16000);
        let back = parse_wav(&encode_wav_pcm16(&buf)).unwrap();
        assert_eq!(back.samples[0], 32767.0 / 32768.0);
        assert_eq!(back.samples[1], -1.0);
    }
}
