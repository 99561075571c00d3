//! RIFF WAV input/output (16-bit PCM or 32-bit float, any channel count).

use std::io::{Cursor, Read, Seek};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{AudioClip, MultiClip};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    #[default]
    Pcm16,
    Float32,
}

/// Hard limit on decoded samples, guarding against headers that claim absurd sizes.
const MAX_SAMPLES: usize = 1 << 28;

fn decode<R: Read>(reader: WavReader<R>) -> std::result::Result<MultiClip, String> {
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err("zero channels".into());
    }
    if spec.sample_rate == 0 {
        return Err("zero sample rate".into());
    }
    let total = reader.len() as usize;
    if total > MAX_SAMPLES {
        return Err(format!("{total} samples exceeds the decoder limit"));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| e.to_string())?,
        (SampleFormat::Int, bits @ 1..=32) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| e.to_string())?
        }
        (fmt, bits) => return Err(format!("unsupported sample format {fmt:?}/{bits} bits")),
    };
    if interleaved.iter().any(|v| !v.is_finite()) {
        return Err("non-finite sample".into());
    }
    let frames = interleaved.len() / channels;
    let mut out = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, v) in frame.iter().enumerate() {
            out[c].push(*v);
        }
    }
    Ok(MultiClip {
        channels: out,
        sample_rate: spec.sample_rate,
    })
}

/// Decodes a WAV image held in memory.
pub fn read_wav_bytes(bytes: &[u8]) -> Result<MultiClip> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(|e| Error::Format(format!("wav: {e}")))?;
    decode(reader).map_err(|e| Error::Format(format!("wav: {e}")))
}

pub fn read_wav(path: &Path) -> Result<MultiClip> {
    let reader = WavReader::open(path).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    decode(reader).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads a file and averages its channels.
pub fn read_wav_mono(path: &Path) -> Result<AudioClip> {
    crate::signal::downmix_to_mono(&read_wav(path)?)
}

fn encode<W: std::io::Write + Seek>(writer: W, clip: &MultiClip, encoding: WavEncoding) -> std::result::Result<(), hound::Error> {
    let spec = WavSpec {
        channels: clip.channels.len() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut w = WavWriter::new(writer, spec)?;
    let frames = clip.channels.first().map_or(0, Vec::len);
    for t in 0..frames {
        for c in &clip.channels {
            match encoding {
                WavEncoding::Pcm16 => {
                    let v = (c[t].clamp(-1.0, 1.0) * 32767.0).round() as i16;
                    w.write_sample(v)?;
                }
                WavEncoding::Float32 => w.write_sample(c[t] as f32)?,
            }
        }
    }
    w.finalize()
}

pub fn write_wav(path: &Path, clip: &MultiClip, encoding: WavEncoding) -> Result<()> {
    if clip.channels.is_empty() || clip.channels.iter().any(|c| c.len() != clip.channels[0].len()) {
        return Err(Error::Structure("channels must be non-empty and equally long".into()));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    encode(std::io::BufWriter::new(file), clip, encoding).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_wav_mono(path: &Path, clip: &AudioClip, encoding: WavEncoding) -> Result<()> {
    write_wav(path, &MultiClip::from(clip.clone()), encoding)
}

/// Encodes to an in-memory WAV image.
pub fn wav_bytes(clip: &MultiClip, encoding: WavEncoding) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    encode(&mut buf, clip, encoding).map_err(|e| Error::Format(format!("wav: {e}")))?;
    Ok(buf.into_inner())
}
