//! RIFF/WAVE reading and writing, 16-bit PCM only.

use std::fs;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn wav_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Wav {
        offset: offset as u64,
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(wav_err(
                self.bytes.len(),
                format!("truncated while reading {what} (needed {n} bytes at {})", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Format {
    channels: u16,
    sample_rate: u32,
}

/// Decode a WAV file held in memory. Multi-channel audio is averaged to mono
/// and samples are scaled by `1/32768`.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "RIFF tag")? != b"RIFF" {
        return Err(wav_err(0, "missing RIFF tag"));
    }
    r.u32("RIFF size")?;
    if r.take(4, "WAVE tag")? != b"WAVE" {
        return Err(wav_err(8, "missing WAVE tag"));
    }

    let mut format: Option<Format> = None;
    loop {
        let chunk_start = r.pos;
        if chunk_start == bytes.len() {
            return Err(wav_err(chunk_start, "no data chunk"));
        }
        let id = r.take(4, "chunk id")?;
        let size = r.u32("chunk size")? as usize;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(wav_err(chunk_start, format!("fmt chunk too short ({size} bytes)")));
                }
                let body_start = r.pos;
                let mut tag = r.u16("format tag")?;
                let channels = r.u16("channel count")?;
                let sample_rate = r.u32("sample rate")?;
                r.u32("byte rate")?;
                r.u16("block align")?;
                let bits = r.u16("bits per sample")?;
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(wav_err(body_start, "extensible fmt chunk too short"));
                    }
                    r.take(8, "extension header")?;
                    // first two bytes of the subformat GUID carry the codec
                    tag = r.u16("subformat")?;
                    r.take(14, "subformat guid")?;
                }
                if tag != FORMAT_PCM {
                    return Err(wav_err(body_start, format!("unsupported codec tag {tag:#06x}")));
                }
                if bits != 16 {
                    return Err(wav_err(body_start + 14, format!("unsupported bit depth {bits}")));
                }
                if channels == 0 || sample_rate == 0 {
                    return Err(wav_err(body_start + 2, "zero channels or sample rate"));
                }
                let consumed = r.pos - body_start;
                r.take(size - consumed + (size & 1), "fmt chunk tail")?;
                format = Some(Format {
                    channels,
                    sample_rate,
                });
            }
            b"data" => {
                let fmt = format.ok_or_else(|| wav_err(chunk_start, "data chunk before fmt chunk"))?;
                let frame_bytes = 2 * fmt.channels as usize;
                let body = r.take(size, "sample data")?;
                if size % frame_bytes != 0 {
                    return Err(wav_err(
                        chunk_start + 8 + size - size % frame_bytes,
                        "sample data ends mid-frame",
                    ));
                }
                let channels = fmt.channels as usize;
                let samples: Vec<f64> = body
                    .chunks_exact(frame_bytes)
                    .map(|frame| {
                        let sum: f64 = frame
                            .chunks_exact(2)
                            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                            .sum();
                        sum / channels as f64
                    })
                    .collect();
                if samples.is_empty() {
                    return Err(wav_err(chunk_start, "empty data chunk"));
                }
                return Waveform::new(samples, fmt.sample_rate);
            }
            _ => {
                r.take(size + (size & 1), "chunk body")?;
            }
        }
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Encode as mono 16-bit PCM; samples are scaled by 32768 and saturated.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = 2 * w.samples().len();
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(2 * w.sample_rate()).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in w.samples() {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(w)).map_err(|e| Error::io(path, e))
}
