//! Time-domain audio to magnitude-spectrogram contexts and back.
//!
//! Analysis uses a periodic Hann window; synthesis multiplies by the same
//! window, overlap-adds at the hop and divides by the summed squared window
//! (floored at [`SYNTHESIS_FLOOR`]). Reconstruction always uses the mixture
//! phase.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};

/// Floor applied to the summed squared synthesis window.
pub const SYNTHESIS_FLOOR: f64 = 1e-8;

/// Single-channel audio.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Structure(format!("sample {i} is not finite")));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Audio with one or more equally long channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiClip {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl From<AudioClip> for MultiClip {
    fn from(c: AudioClip) -> Self {
        MultiClip {
            channels: vec![c.samples],
            sample_rate: c.sample_rate,
        }
    }
}

/// Per-sample arithmetic mean over channels.
pub fn downmix_to_mono(clip: &MultiClip) -> Result<AudioClip> {
    let first = clip
        .channels
        .first()
        .ok_or_else(|| Error::Structure("clip has no channels".into()))?;
    if let Some((i, c)) = clip
        .channels
        .iter()
        .enumerate()
        .find(|(_, c)| c.len() != first.len())
    {
        return Err(Error::Structure(format!(
            "channel {i} has {} samples, channel 0 has {}",
            c.len(),
            first.len()
        )));
    }
    let k = clip.channels.len() as f64;
    let samples = (0..first.len())
        .map(|t| clip.channels.iter().map(|c| c[t]).sum::<f64>() / k)
        .collect();
    AudioClip::new(samples, clip.sample_rate)
}

/// Analysis/synthesis settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub frame_size: usize,
    pub hop: usize,
    /// Frames per model context (C).
    pub context: usize,
    /// Frames between the starts of consecutive contexts when tiling a track.
    pub context_hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_size: 1024,
            hop: 1024,
            context: 32,
            context_hop: 32,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 2 || self.frame_size % 2 != 0 {
            return Err(Error::Config(format!(
                "frame_size must be even and >= 2, got {}",
                self.frame_size
            )));
        }
        if self.hop == 0 || self.hop > self.frame_size {
            return Err(Error::Config(format!(
                "hop must be in 1..={}, got {}",
                self.frame_size, self.hop
            )));
        }
        if self.context == 0 || self.context_hop == 0 || self.context_hop > self.context {
            return Err(Error::Config(format!(
                "context {} / context_hop {} invalid",
                self.context, self.context_hop
            )));
        }
        Ok(())
    }

    /// Time covered by one context, `C · hop / sample_rate`, in seconds.
    pub fn context_span_s(&self, sample_rate: u32) -> Result<f64> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(self.context as f64 * self.hop as f64 / sample_rate as f64)
    }
}

/// Magnitude and phase for a run of frames, `frames × bins`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub frame_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// `magnitude · scale_factor` gives raw STFT magnitudes.
    pub scale_factor: f64,
}

impl Spectrogram {
    pub fn peak(&self) -> f64 {
        self.magnitude.iter().fold(0.0, |a, &b| a.max(b))
    }

    pub fn raw_magnitude(&self) -> Vec<f64> {
        self.magnitude.iter().map(|v| v * self.scale_factor).collect()
    }
}

/// Labelled per-source magnitudes sharing one `(frames, bins)` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSet {
    pub magnitudes: Vec<Vec<f64>>,
    pub source_names: Vec<String>,
    pub frames: usize,
    pub bins: usize,
}

impl SourceSet {
    pub fn new(magnitudes: Vec<Vec<f64>>, source_names: Vec<String>, frames: usize, bins: usize) -> Result<Self> {
        if magnitudes.len() < 2 {
            return Err(Error::Structure(format!(
                "a source set needs at least 2 sources, got {}",
                magnitudes.len()
            )));
        }
        if source_names.len() != magnitudes.len() {
            return Err(Error::Structure(format!(
                "{} names for {} sources",
                source_names.len(),
                magnitudes.len()
            )));
        }
        for (name, m) in source_names.iter().zip(&magnitudes) {
            if m.len() != frames * bins {
                return Err(Error::Structure(format!(
                    "source `{name}` has {} values, expected {frames}x{bins}",
                    m.len()
                )));
            }
            if m.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Structure(format!(
                    "source `{name}` has negative or NaN magnitudes"
                )));
            }
        }
        Ok(SourceSet {
            magnitudes,
            source_names,
            frames,
            bins,
        })
    }

    pub fn len(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitudes.is_empty()
    }
}

/// Maps an angle from `atan2` into `(-π, π]`.
fn wrap_phase(a: f64) -> f64 {
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of frames produced by [`frame_signal`].
pub fn frame_count(len: usize, frame_size: usize, hop: usize) -> usize {
    len.saturating_sub(frame_size).div_ceil(hop) + 1
}

/// Cuts a signal into frames of `frame_size` at stride `hop`, zero-padding the tail.
pub fn frame_signal(clip: &AudioClip, frame_size: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if frame_size == 0 {
        return Err(Error::Config("frame_size must be positive".into()));
    }
    if hop == 0 || hop > frame_size {
        return Err(Error::Config(format!(
            "hop must be in 1..={frame_size}, got {hop}"
        )));
    }
    let n = frame_count(clip.len(), frame_size, hop);
    Ok((0..n)
        .map(|t| {
            let start = t * hop;
            let mut frame = vec![0.0; frame_size];
            if start < clip.len() {
                let end = (start + frame_size).min(clip.len());
                frame[..end - start].copy_from_slice(&clip.samples[start..end]);
            }
            frame
        })
        .collect())
}

/// Reusable FFT plans for one frame size.
#[derive(Clone)]
pub struct StftEngine {
    frame_size: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftEngine")
            .field("frame_size", &self.frame_size)
            .finish()
    }
}

impl StftEngine {
    pub fn new(frame_size: usize) -> Self {
        let mut planner = FftPlanner::new();
        StftEngine {
            frame_size,
            window: hann_window(frame_size),
            forward: planner.plan_fft_forward(frame_size),
            inverse: planner.plan_fft_inverse(frame_size),
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Full `frame_size`-point DFT of the windowed frame (no truncation).
    pub fn frame_spectrum(&self, frame: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = frame
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex64::new(x * w, 0.0))
            .collect();
        self.forward.process(&mut buf);
        buf
    }

    /// Real part of the inverse DFT of a one-sided spectrum (Hermitian extension).
    fn frame_synthesis(&self, magnitude: &[f64], phase: &[f64]) -> Vec<f64> {
        let n = self.frame_size;
        let half = n / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..=half {
            buf[k] = Complex64::from_polar(magnitude[k], phase[k]);
        }
        for k in 1..half {
            buf[n - k] = buf[k].conj();
        }
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }

    /// STFT of a whole clip as one spectrogram (scale factor 1).
    pub fn analyze(&self, clip: &AudioClip, hop: usize) -> Result<Spectrogram> {
        let frames = frame_signal(clip, self.frame_size, hop)?;
        let bins = self.frame_size / 2 + 1;
        let mut magnitude = Vec::with_capacity(frames.len() * bins);
        let mut phase = Vec::with_capacity(frames.len() * bins);
        for f in &frames {
            let spec = self.frame_spectrum(f);
            for c in &spec[..bins] {
                magnitude.push(c.norm());
                phase.push(wrap_phase(c.arg()));
            }
        }
        Ok(Spectrogram {
            magnitude,
            phase,
            frames: frames.len(),
            bins,
            frame_size: self.frame_size,
            hop,
            sample_rate: clip.sample_rate,
            scale_factor: 1.0,
        })
    }

    /// Inverse STFT by weighted overlap-add; output trimmed/padded to `length`.
    pub fn synthesize(&self, magnitude: &[f64], phase: &[f64], frames: usize, hop: usize, length: usize) -> Vec<f64> {
        let n = self.frame_size;
        let bins = n / 2 + 1;
        let total = (frames.max(1) - 1) * hop + n;
        let mut acc = vec![0.0; total.max(length)];
        let mut wsum = vec![0.0; total.max(length)];
        for t in 0..frames {
            let y = self.frame_synthesis(&magnitude[t * bins..(t + 1) * bins], &phase[t * bins..(t + 1) * bins]);
            let start = t * hop;
            for i in 0..n {
                acc[start + i] += y[i] * self.window[i];
                wsum[start + i] += self.window[i] * self.window[i];
            }
        }
        acc.truncate(length);
        acc.iter()
            .zip(&wsum)
            .map(|(a, w)| a / w.max(SYNTHESIS_FLOOR))
            .collect()
    }
}

/// Splits a track spectrogram into `C`-frame contexts, zero-padding the last one.
pub fn split_contexts(track: &Spectrogram, config: &StftConfig) -> Vec<Spectrogram> {
    let c = config.context;
    let bins = track.bins;
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        starts.push(s);
        if s + c >= track.frames {
            break;
        }
        s += config.context_hop;
    }
    starts
        .into_iter()
        .map(|start| {
            let mut magnitude = vec![0.0; c * bins];
            let mut phase = vec![0.0; c * bins];
            let end = (start + c).min(track.frames);
            let n = (end - start) * bins;
            magnitude[..n].copy_from_slice(&track.magnitude[start * bins..end * bins]);
            phase[..n].copy_from_slice(&track.phase[start * bins..end * bins]);
            Spectrogram {
                magnitude,
                phase,
                frames: c,
                bins,
                frame_size: track.frame_size,
                hop: track.hop,
                sample_rate: track.sample_rate,
                scale_factor: track.scale_factor,
            }
        })
        .collect()
}

/// STFT of a clip grouped into contexts of `config.context` frames.
pub fn stft_magnitude_phase(clip: &AudioClip, config: &StftConfig) -> Result<Vec<Spectrogram>> {
    config.validate()?;
    if clip.sample_rate == 0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let engine = StftEngine::new(config.frame_size);
    let track = engine.analyze(clip, config.hop)?;
    Ok(split_contexts(&track, config))
}

/// Divides by the context peak so values lie in `[0, 1]`; a silent context keeps scale 1.
pub fn normalize_unit(spec: &Spectrogram) -> Spectrogram {
    let peak = spec.peak();
    let scale = if peak > 0.0 { peak } else { 1.0 };
    let mut out = spec.clone();
    out.magnitude.iter_mut().for_each(|v| *v /= scale);
    out.scale_factor = spec.scale_factor * scale;
    out
}

/// Rebuilds per-source audio from estimated magnitudes using the mixture phase.
///
/// `estimates` and `mixture_phase` cover the same `frames × bins` grid; the
/// result has `length` samples per source.
pub fn reconstruct_sources(
    estimates: &SourceSet,
    mixture_phase: &[f64],
    scale_factor: f64,
    config: &StftConfig,
    sample_rate: u32,
    length: usize,
) -> Result<Vec<AudioClip>> {
    config.validate()?;
    if estimates.bins != config.bins() {
        return Err(Error::Structure(format!(
            "estimates have {} bins, config expects {}",
            estimates.bins,
            config.bins()
        )));
    }
    if mixture_phase.len() != estimates.frames * estimates.bins {
        return Err(Error::Structure(format!(
            "phase has {} values, estimates are {}x{}",
            mixture_phase.len(),
            estimates.frames,
            estimates.bins
        )));
    }
    let engine = StftEngine::new(config.frame_size);
    estimates
        .magnitudes
        .iter()
        .map(|m| {
            let raw: Vec<f64> = m.iter().map(|v| v * scale_factor).collect();
            let samples = engine.synthesize(&raw, mixture_phase, estimates.frames, config.hop, length);
            AudioClip::new(samples, sample_rate)
        })
        .collect()
}

pub const SPECTROGRAM_KIND: &str = "spectrogram";
pub const SPECTROGRAM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectrogramMeta {
    frame_size: usize,
    hop: usize,
    sample_rate: u32,
    scale_factors: Vec<f64>,
}

/// Packs equally shaped contexts into a container (`magnitude` and `phase`, each `(k, C, F)`).
pub fn spectrogram_container(contexts: &[Spectrogram]) -> Result<Container> {
    let first = contexts
        .first()
        .ok_or_else(|| Error::Structure("no spectrogram contexts to store".into()))?;
    let (c, f) = (first.frames, first.bins);
    let mut mag = Vec::with_capacity(contexts.len() * c * f);
    let mut phase = Vec::with_capacity(contexts.len() * c * f);
    for s in contexts {
        if (s.frames, s.bins, s.frame_size, s.hop, s.sample_rate)
            != (c, f, first.frame_size, first.hop, first.sample_rate)
        {
            return Err(Error::Structure("spectrogram contexts differ in shape or settings".into()));
        }
        mag.extend_from_slice(&s.magnitude);
        phase.extend_from_slice(&s.phase);
    }
    let meta = SpectrogramMeta {
        frame_size: first.frame_size,
        hop: first.hop,
        sample_rate: first.sample_rate,
        scale_factors: contexts.iter().map(|s| s.scale_factor).collect(),
    };
    let mut out = Container::new(SPECTROGRAM_KIND, SPECTROGRAM_VERSION, serde_json::to_value(meta)?);
    out.push("magnitude", vec![contexts.len(), c, f], mag);
    out.push("phase", vec![contexts.len(), c, f], phase);
    Ok(out)
}

/// Inverse of [`spectrogram_container`], validating every invariant of [`Spectrogram`].
pub fn contexts_from_container(container: &Container) -> Result<Vec<Spectrogram>> {
    container.expect_kind(SPECTROGRAM_KIND, SPECTROGRAM_VERSION)?;
    let meta: SpectrogramMeta = serde_json::from_value(container.meta.clone())
        .map_err(|e| Error::Format(format!("spectrogram meta: {e}")))?;
    let mag = container.array("magnitude")?;
    let phase = container.array("phase")?;
    if mag.shape.len() != 3 || mag.shape != phase.shape || mag.shape[0] != meta.scale_factors.len() {
        return Err(Error::Format("spectrogram arrays must both be (k, C, F) with k scale factors".into()));
    }
    let (c, f) = (mag.shape[1], mag.shape[2]);
    if meta.frame_size < 2 || f != meta.frame_size / 2 + 1 || meta.hop == 0 || meta.sample_rate == 0 {
        return Err(Error::Format("spectrogram settings are inconsistent".into()));
    }
    if mag.data.iter().any(|v| !(*v >= 0.0) || !v.is_finite())
        || phase.data.iter().any(|p| !(*p > -PI && *p <= PI))
        || meta.scale_factors.iter().any(|s| !(*s > 0.0) || !s.is_finite())
    {
        return Err(Error::Format("spectrogram values out of range".into()));
    }
    Ok(meta
        .scale_factors
        .iter()
        .enumerate()
        .map(|(k, &scale_factor)| Spectrogram {
            magnitude: mag.data[k * c * f..(k + 1) * c * f].to_vec(),
            phase: phase.data[k * c * f..(k + 1) * c * f].to_vec(),
            frames: c,
            bins: f,
            frame_size: meta.frame_size,
            hop: meta.hop,
            sample_rate: meta.sample_rate,
            scale_factor,
        })
        .collect())
}

/// Decodes a spectrogram file image held in memory.
pub fn decode_spectrogram_file(bytes: &[u8]) -> Result<Vec<Spectrogram>> {
    contexts_from_container(&Container::decode(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, 44100).unwrap()
    }

    #[test]
    fn downmix_examples() {
        let st = MultiClip {
            channels: vec![vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 0.0]],
            sample_rate: 44100,
        };
        assert_eq!(downmix_to_mono(&st).unwrap().samples, vec![0.5, 0.5, 0.5]);
        let st = MultiClip {
            channels: vec![vec![0.2, -0.4], vec![0.6, 0.0]],
            sample_rate: 8000,
        };
        let m = downmix_to_mono(&st).unwrap();
        assert!((m.samples[0] - 0.4).abs() < 1e-15 && (m.samples[1] + 0.2).abs() < 1e-15);
        assert_eq!(m.sample_rate, 8000);
        let mono: MultiClip = clip(vec![0.1, -0.3]).into();
        assert_eq!(downmix_to_mono(&mono).unwrap().samples, vec![0.1, -0.3]);
        let bad = MultiClip {
            channels: vec![vec![0.0; 3], vec![0.0; 2]],
            sample_rate: 8000,
        };
        assert!(matches!(downmix_to_mono(&bad), Err(Error::Structure(_))));
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_signal(&clip(vec![0.0; 4096]), 1024, 1024).unwrap().len(), 4);
        let x: Vec<f64> = (0..1024).map(|i| i as f64 / 1024.0).collect();
        let f = frame_signal(&clip(x.clone()), 1024, 1024).unwrap();
        assert_eq!(f, vec![x]);
        let f = frame_signal(&clip(vec![1.0; 1025]), 1024, 1024).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[1][0], 1.0);
        assert!(f[1][1..].iter().all(|&v| v == 0.0));
        assert_eq!(f[1].len() - 1, 1023);
        // shorter than one frame: a single padded frame
        assert_eq!(frame_signal(&clip(vec![1.0; 10]), 1024, 512).unwrap().len(), 1);
        assert!(matches!(frame_signal(&clip(vec![1.0; 10]), 1024, 0), Err(Error::Config(_))));
    }

    #[test]
    fn context_span() {
        let cfg = StftConfig::default();
        let span = cfg.context_span_s(44100).unwrap();
        assert!((span - 32.0 * 1024.0 / 44100.0).abs() < 1e-15);
        assert!((span - 0.7430).abs() < 5e-5);
        assert!(cfg.context_span_s(0).is_err());
    }

    #[test]
    fn zero_clip_gives_zero_magnitude() {
        let ctx = stft_magnitude_phase(&clip(vec![0.0; 5000]), &StftConfig::default()).unwrap();
        assert_eq!(ctx.len(), 1);
        assert!(ctx[0].magnitude.iter().all(|&v| v == 0.0));
        let n = normalize_unit(&ctx[0]);
        assert_eq!(n.scale_factor, 1.0);
        assert!(n.magnitude.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_examples() {
        let mut s = stft_magnitude_phase(&clip(vec![0.0; 1024]), &StftConfig::default()).unwrap().remove(0);
        s.magnitude[7] = 8.0;
        s.magnitude[9] = 2.0;
        let n = normalize_unit(&s);
        assert_eq!(n.magnitude[7], 1.0);
        assert_eq!(n.magnitude[9], 0.25);
        assert_eq!(n.scale_factor, 8.0);
        assert_eq!(normalize_unit(&n).magnitude, n.magnitude);
    }

    #[test]
    fn reconstruct_zero_estimate_is_silent() {
        let cfg = StftConfig {
            hop: 512,
            ..StftConfig::default()
        };
        let frames = 3;
        let set = SourceSet::new(
            vec![vec![0.0; frames * 513], vec![0.0; frames * 513]],
            vec!["a".into(), "b".into()],
            frames,
            513,
        )
        .unwrap();
        let out = reconstruct_sources(&set, &vec![0.3; frames * 513], 2.0, &cfg, 44100, 2048).unwrap();
        assert!(out.iter().all(|c| c.samples.iter().all(|&v| v == 0.0) && c.len() == 2048));
        assert!(reconstruct_sources(&set, &[0.0; 10], 1.0, &cfg, 44100, 2048).is_err());
    }

    #[test]
    fn source_set_validation() {
        assert!(SourceSet::new(vec![vec![0.0; 4]], vec!["a".into()], 2, 2).is_err());
        assert!(SourceSet::new(vec![vec![0.0; 4], vec![-1.0; 4]], vec!["a".into(), "b".into()], 2, 2).is_err());
        assert!(SourceSet::new(vec![vec![0.0; 4], vec![0.0; 3]], vec!["a".into(), "b".into()], 2, 2).is_err());
    }
}
