//! WAV (RIFF) ingestion and a PCM16 writer for fixtures and round-trips.
//!
//! Supported codecs: PCM16 and IEEE float32, little-endian, any channel
//! count (channels are averaged to mono). Anything else is rejected with a
//! diagnostic naming the format tag. The byte-slice parser is the fuzzing
//! entry point, so every read is bounds-checked and non-finite float samples
//! are sanitized to zero.

use std::path::Path;

use crate::audio::{to_mono, AudioClip};
use crate::error::{Error, Result};

const WAVE_FORMAT_PCM: u16 = 0x0001;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 0x0003;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Wav("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[derive(Debug, Clone, Copy)]
struct Fmt {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn parse_fmt(chunk: &[u8]) -> Result<Fmt> {
    let mut c = Cursor::new(chunk);
    let mut tag = c.u16()?;
    let channels = c.u16()?;
    let sample_rate = c.u32()?;
    let _byte_rate = c.u32()?;
    let _block_align = c.u16()?;
    let bits = c.u16()?;
    if tag == WAVE_FORMAT_EXTENSIBLE {
        // cbSize, valid bits, channel mask, then the sub-format GUID whose
        // first two bytes are the real format tag.
        let cb = c.u16()?;
        if cb < 22 {
            return Err(Error::Wav("extensible fmt chunk too short".into()));
        }
        let _valid_bits = c.u16()?;
        let _mask = c.u32()?;
        tag = c.u16()?;
    }
    Ok(Fmt { tag, channels, sample_rate, bits })
}

fn decode_samples(fmt: Fmt, data: &[u8]) -> Result<Vec<f32>> {
    match (fmt.tag, fmt.bits) {
        (WAVE_FORMAT_PCM, 16) => Ok(data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
            .collect()),
        (WAVE_FORMAT_IEEE_FLOAT, 32) => Ok(data
            .chunks_exact(4)
            .map(|b| {
                let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                if v.is_finite() {
                    v
                } else {
                    0.0
                }
            })
            .collect()),
        (WAVE_FORMAT_PCM, bits) => {
            Err(Error::Wav(format!("unsupported PCM bit depth {bits} (only 16)")))
        }
        (WAVE_FORMAT_IEEE_FLOAT, bits) => {
            Err(Error::Wav(format!("unsupported float bit depth {bits} (only 32)")))
        }
        (tag, _) => Err(Error::Wav(format!("unsupported format tag 0x{tag:04x}"))),
    }
}

/// Parse a whole WAV file from memory and fold it to mono.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    let mut c = Cursor::new(bytes);
    if c.take(4)? != b"RIFF" {
        return Err(Error::Wav("missing RIFF header".into()));
    }
    let _riff_size = c.u32()?;
    if c.take(4)? != b"WAVE" {
        return Err(Error::Wav("missing WAVE tag".into()));
    }

    let mut fmt: Option<Fmt> = None;
    let mut data: Option<&[u8]> = None;
    while c.remaining() >= 8 {
        let id: [u8; 4] = c.take(4)?.try_into().unwrap();
        let size = c.u32()? as usize;
        if size > c.remaining() {
            return Err(Error::Wav(format!(
                "chunk {:?} declares {} bytes but only {} remain",
                String::from_utf8_lossy(&id),
                size,
                c.remaining()
            )));
        }
        let chunk = c.take(size)?;
        match &id {
            b"fmt " => fmt = Some(parse_fmt(chunk)?),
            b"data" => {
                data = Some(chunk);
                break; // everything needed is in hand
            }
            _ => {}
        }
        if size % 2 == 1 && c.remaining() > 0 {
            let _pad = c.take(1)?;
        }
    }

    let fmt = fmt.ok_or_else(|| Error::Wav("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Wav("no data chunk".into()))?;
    if fmt.channels == 0 {
        return Err(Error::Wav("zero channels".into()));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::Wav("zero sample rate".into()));
    }
    let samples = decode_samples(fmt, data)?;
    let frames = samples.len() / fmt.channels as usize;
    if frames == 0 {
        return Err(Error::Wav("empty data chunk".into()));
    }
    to_mono(&samples[..frames * fmt.channels as usize], fmt.channels as usize, fmt.sample_rate)
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path)?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Wav(msg) => Error::Wav(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Serialize a mono clip as PCM16.
pub fn wav_bytes_pcm16(clip: &AudioClip) -> Vec<u8> {
    let n = clip.samples.len();
    let data_len = n * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // channels
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav_pcm16(path: &Path, clip: &AudioClip) -> Result<()> {
    std::fs::write(path, wav_bytes_pcm16(clip))?;
    Ok(())
}
