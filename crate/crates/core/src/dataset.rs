//! Corpus indexing, the synthetic toy corpus, and unpaired context sampling.
//!
//! Mixture contexts and real-source contexts are drawn by separate calls with
//! separate randomness; a [`Batch`] records where each context came from but
//! nothing in it links a mixture row to a source row.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{AudioClip, StftConfig, StftEngine};
use crate::tensor::SpecBatch;
use crate::wav::{read_wav_mono, write_wav_mono, WavEncoding};

/// Stem names of the four-source music corpus, in critic-weight order.
pub const DSD_SOURCES: [&str; 4] = ["bass", "drums", "vocals", "other"];

/// File listing the layout of a generated corpus.
pub const CORPUS_MANIFEST: &str = "corpus.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub name: String,
    pub mixture: PathBuf,
    pub sample_rate: u32,
    /// One slot per entry of [`CorpusIndex::source_names`]; `None` when the stem is absent.
    pub sources: Vec<Option<PathBuf>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub split: String,
    pub source_names: Vec<String>,
    pub tracks: Vec<TrackEntry>,
}

impl CorpusIndex {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// The common sample rate of all tracks; error if they differ.
    pub fn sample_rate(&self) -> Result<Option<u32>> {
        let mut rates = self.tracks.iter().map(|t| t.sample_rate);
        let Some(first) = rates.next() else {
            return Ok(None);
        };
        if let Some(t) = self.tracks.iter().find(|t| t.sample_rate != first) {
            return Err(Error::Corpus {
                track: t.name.clone(),
                reason: format!("sample rate {} differs from {first}", t.sample_rate),
            });
        }
        Ok(Some(first))
    }

    pub fn source_index(&self, name: &str) -> Option<usize> {
        self.source_names.iter().position(|s| s == name)
    }

    /// Keeps the first `n` tracks (in name order).
    pub fn truncated(&self, n: usize) -> CorpusIndex {
        let mut out = self.clone();
        out.tracks.truncate(n);
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `corpus.json` if present, then the DSD100 tree, then the flat tree.
    #[default]
    Auto,
    /// `<root>/<split>/<track>/mixture.wav` plus `<source>.wav` stems.
    Flat,
    /// `<root>/Mixtures/<Split>/<track>/mixture.wav`, `<root>/Sources/<Split>/<track>/<source>.wav`.
    Dsd100,
    /// Explicit JSON manifest; relative paths resolve against its directory.
    Manifest(PathBuf),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSpec {
    pub layout: Layout,
    /// Stem names in model order; inferred when absent.
    pub source_names: Option<Vec<String>>,
    /// Reject tracks lacking any stem (training); otherwise keep them with `None`.
    pub require_sources: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTrack {
    pub name: String,
    pub split: String,
    pub mixture: PathBuf,
    #[serde(default)]
    pub sources: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub source_names: Vec<String>,
    pub tracks: Vec<ManifestTrack>,
}

/// Parses corpus-manifest JSON.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Format(format!("corpus manifest: {e}")))?;
    if m.source_names.is_empty() {
        return Err(Error::Format("corpus manifest lists no sources".into()));
    }
    for t in &m.tracks {
        if let Some(k) = t.sources.keys().find(|k| !m.source_names.contains(k)) {
            return Err(Error::Corpus {
                track: t.name.clone(),
                reason: format!("stem `{k}` is not a declared source"),
            });
        }
    }
    Ok(m)
}

fn capitalised(split: &str) -> String {
    let mut c = split.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn infer_stems(track_dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(track_dir).map_err(|e| Error::io(track_dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(track_dir, e))?.path();
        if p.extension().is_some_and(|e| e == "wav") {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            if stem != "mixture" {
                names.push(stem);
            }
        }
    }
    names.sort();
    Ok(names)
}

/// SHA-256 over the split, track and stem names and the bytes of every file
/// the indices reference, in index order.
pub fn corpus_fingerprint(indices: &[&CorpusIndex]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    let file = |h: &mut Sha256, p: &Path| -> Result<()> {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        Ok(())
    };
    for idx in indices {
        h.update(idx.split.as_bytes());
        for n in &idx.source_names {
            h.update(b"\0");
            h.update(n.as_bytes());
        }
        for t in &idx.tracks {
            h.update(b"\n");
            h.update(t.name.as_bytes());
            file(&mut h, &t.mixture)?;
            for s in &t.sources {
                match s {
                    Some(p) => file(&mut h, p)?,
                    None => h.update(b"-"),
                }
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Builds and validates an index for one split.
pub fn index_corpus(root: &Path, split: &str, spec: &LayoutSpec) -> Result<CorpusIndex> {
    let layout = match &spec.layout {
        Layout::Auto if root.join(CORPUS_MANIFEST).is_file() => Layout::Manifest(root.join(CORPUS_MANIFEST)),
        Layout::Auto if root.join("Mixtures").is_dir() => Layout::Dsd100,
        Layout::Auto => Layout::Flat,
        other => other.clone(),
    };
    let (names, mut raw): (Vec<String>, Vec<(String, PathBuf, Vec<Option<PathBuf>>)>) = match layout {
        Layout::Manifest(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let m = parse_manifest(&text)?;
            let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            let names = spec.source_names.clone().unwrap_or(m.source_names.clone());
            let tracks = m
                .tracks
                .into_iter()
                .filter(|t| t.split == split)
                .map(|t| {
                    let sources = names.iter().map(|n| t.sources.get(n).map(|p| base.join(p))).collect();
                    (t.name, base.join(t.mixture), sources)
                })
                .collect();
            (names, tracks)
        }
        Layout::Dsd100 => {
            let names = spec
                .source_names
                .clone()
                .unwrap_or_else(|| DSD_SOURCES.iter().map(|s| s.to_string()).collect());
            let mix_root = root.join("Mixtures").join(capitalised(split));
            let src_root = root.join("Sources").join(capitalised(split));
            let tracks = sorted_dirs(&mix_root)?
                .into_iter()
                .map(|d| {
                    let name = file_name(&d);
                    let sources = names
                        .iter()
                        .map(|n| Some(src_root.join(&name).join(format!("{n}.wav"))))
                        .collect();
                    (name, d.join("mixture.wav"), sources)
                })
                .collect();
            (names, tracks)
        }
        Layout::Flat | Layout::Auto => {
            let split_root = root.join(split);
            let dirs = sorted_dirs(&split_root)?;
            let names = match &spec.source_names {
                Some(n) => n.clone(),
                None => match dirs.first() {
                    Some(d) => infer_stems(d)?,
                    None => Vec::new(),
                },
            };
            let tracks = dirs
                .into_iter()
                .map(|d| {
                    let sources = names.iter().map(|n| Some(d.join(format!("{n}.wav")))).collect();
                    (file_name(&d), d.join("mixture.wav"), sources)
                })
                .collect();
            (names, tracks)
        }
    };
    if names.len() < 2 {
        return Err(Error::Config(format!(
            "corpus needs at least 2 source names, found {names:?}"
        )));
    }
    raw.sort_by(|a, b| a.0.cmp(&b.0));
    let mut tracks = Vec::with_capacity(raw.len());
    for (name, mixture, sources) in raw {
        tracks.push(validate_track(name, mixture, sources, &names, spec.require_sources)?);
    }
    Ok(CorpusIndex {
        split: split.to_string(),
        source_names: names,
        tracks,
    })
}

fn wav_header(track: &str, path: &Path) -> Result<(u32, u32)> {
    let r = hound::WavReader::open(path).map_err(|e| Error::Corpus {
        track: track.to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    Ok((r.spec().sample_rate, r.duration()))
}

fn validate_track(
    name: String,
    mixture: PathBuf,
    sources: Vec<Option<PathBuf>>,
    names: &[String],
    require: bool,
) -> Result<TrackEntry> {
    if !mixture.is_file() {
        return Err(Error::Corpus {
            track: name,
            reason: format!("missing mixture file {}", mixture.display()),
        });
    }
    let (rate, len) = wav_header(&name, &mixture)?;
    let mut kept = Vec::with_capacity(sources.len());
    for (src, stem) in sources.into_iter().zip(names) {
        match src {
            Some(p) if p.is_file() => {
                let (r, l) = wav_header(&name, &p)?;
                if r != rate || l != len {
                    return Err(Error::Corpus {
                        track: name,
                        reason: format!(
                            "stem `{stem}` has {l} samples at {r} Hz, mixture has {len} at {rate} Hz"
                        ),
                    });
                }
                kept.push(Some(p));
            }
            _ if require => {
                return Err(Error::Corpus {
                    track: name,
                    reason: format!("missing `{stem}` stem"),
                })
            }
            _ => kept.push(None),
        }
    }
    Ok(TrackEntry {
        name,
        mixture,
        sample_rate: rate,
        sources: kept,
    })
}

// ---------------------------------------------------------------------------
// toy corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceRecipe {
    /// Notes of a harmonic tone; f0 drawn per note from `[f0_low, f0_high]`.
    HarmonicTone {
        name: String,
        f0_low: f64,
        f0_high: f64,
        harmonics: usize,
    },
    /// Band-limited noise bursts in `[band_low, band_high]`.
    NoiseBurst {
        name: String,
        band_low: f64,
        band_high: f64,
    },
}

impl SourceRecipe {
    pub fn name(&self) -> &str {
        match self {
            SourceRecipe::HarmonicTone { name, .. } | SourceRecipe::NoiseBurst { name, .. } => name,
        }
    }

    /// Frequency range the recipe occupies.
    pub fn band(&self) -> (f64, f64) {
        match *self {
            SourceRecipe::HarmonicTone {
                f0_low,
                f0_high,
                harmonics,
                ..
            } => (f0_low, f0_high * harmonics.max(1) as f64),
            SourceRecipe::NoiseBurst {
                band_low, band_high, ..
            } => (band_low, band_high),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub n_tracks: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub recipes: Vec<SourceRecipe>,
    pub seed: u64,
    pub split: String,
}

impl ToySpec {
    /// Tone in 200–400 Hz with three harmonics and noise in 2–4 kHz.
    pub fn tone_and_noise(n_tracks: usize, duration_s: f64, sample_rate: u32, seed: u64) -> Self {
        ToySpec {
            n_tracks,
            duration_s,
            sample_rate,
            recipes: vec![
                SourceRecipe::HarmonicTone {
                    name: "tone".into(),
                    f0_low: 200.0,
                    f0_high: 400.0,
                    harmonics: 3,
                },
                SourceRecipe::NoiseBurst {
                    name: "noise".into(),
                    band_low: 2000.0,
                    band_high: 4000.0,
                },
            ],
            seed,
            split: "dev".into(),
        }
    }

    /// A harmonic tone for the first name and noise bursts in disjoint bands
    /// above it for the rest.
    pub fn with_sources(names: &[String], n_tracks: usize, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config("toy corpus needs at least 2 source names".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = (1500.0, 0.975 * nyquist);
        if hi <= lo {
            return Err(Error::Config(format!("sample rate {sample_rate} Hz is too low for the toy bands")));
        }
        let width = (hi - lo) / (names.len() - 1) as f64;
        let mut recipes = vec![SourceRecipe::HarmonicTone {
            name: names[0].clone(),
            f0_low: 200.0,
            f0_high: 400.0,
            harmonics: 3,
        }];
        for (k, n) in names[1..].iter().enumerate() {
            recipes.push(SourceRecipe::NoiseBurst {
                name: n.clone(),
                band_low: lo + k as f64 * width,
                band_high: lo + (k as f64 + 0.9) * width,
            });
        }
        let spec = ToySpec {
            n_tracks,
            duration_s,
            sample_rate,
            recipes,
            seed,
            split: "dev".into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Pairs of recipe names whose frequency bands intersect.
    pub fn band_overlaps(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (i, a) in self.recipes.iter().enumerate() {
            for b in &self.recipes[i + 1..] {
                let (a0, a1) = a.band();
                let (b0, b1) = b.band();
                if a0 < b1 && b0 < a1 {
                    out.push((a.name().to_string(), b.name().to_string()));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.recipes.len() < 2 {
            return Err(Error::Config("toy corpus needs at least 2 source recipes".into()));
        }
        if self.n_tracks == 0 || !(self.duration_s > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("toy corpus needs tracks, duration and sample rate > 0".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.recipes {
            if !seen.insert(r.name()) || r.name() == "mixture" {
                return Err(Error::Config(format!("invalid or duplicate source name `{}`", r.name())));
            }
            let (lo, hi) = r.band();
            if !(lo > 0.0 && lo < hi) {
                return Err(Error::Config(format!("source `{}` has an empty band", r.name())));
            }
        }
        Ok(())
    }
}

/// Raised-cosine attack and release of `ramp` samples each.
fn envelope(len: usize, ramp: usize) -> impl Fn(usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    move |i| {
        let edge = i.min(len - 1 - i.min(len - 1));
        if edge >= ramp {
            1.0
        } else {
            0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
        }
    }
}

/// Segments of `[start, end)` with an on/off flag, lengths in `[min_s, max_s]` seconds.
fn segments(rng: &mut ChaCha8Rng, len: usize, sr: f64, min_s: f64, max_s: f64, p_rest: f64) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < len {
        let d = ((rng.random_range(min_s..max_s) * sr) as usize).max(1);
        let end = (t + d).min(len);
        out.push((t, end, !rng.random_bool(p_rest)));
        t = end;
    }
    out
}

fn render_tone(rng: &mut ChaCha8Rng, len: usize, sr: f64, lo: f64, hi: f64, harmonics: usize) -> Vec<f64> {
    let mut y = vec![0.0; len];
    let ramp = (0.01 * sr) as usize;
    for (s, e, on) in segments(rng, len, sr, 0.2, 0.8, 0.15) {
        let f0 = rng.random_range(lo..hi);
        let gain = rng.random_range(0.5..1.0);
        if !on {
            continue;
        }
        let env = envelope(e - s, ramp);
        for (i, v) in y[s..e].iter_mut().enumerate() {
            let t = i as f64 / sr;
            let mut acc = 0.0;
            for h in 1..=harmonics.max(1) {
                let f = f0 * h as f64;
                if f < sr / 2.0 {
                    acc += (2.0 * std::f64::consts::PI * f * t).sin() / h as f64;
                }
            }
            *v = gain * env(i) * acc;
        }
    }
    y
}

fn render_noise(rng: &mut ChaCha8Rng, len: usize, sr: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * sr / len as f64;
        if f < lo || f > hi {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let mut y: Vec<f64> = buf.iter().map(|c| c.re / len as f64).collect();
    let rms = (y.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        y.iter_mut().for_each(|v| *v *= 0.35 / rms);
    }
    let ramp = (0.01 * sr) as usize;
    let mut out = vec![0.0; len];
    for (s, e, on) in segments(rng, len, sr, 0.1, 0.5, 0.3) {
        let gain = rng.random_range(0.5..1.0);
        if on {
            let env = envelope(e - s, ramp);
            for i in s..e {
                out[i] = gain * env(i - s) * y[i];
            }
        }
    }
    out
}

fn quantise(v: f64) -> i32 {
    (v.clamp(-1.0, 1.0) * 32767.0).round() as i32
}

/// Writes a synthetic corpus under `out/<split>/<track>/` and returns its index.
///
/// Sources are quantised to the 16-bit grid before summation, so the stored
/// mixture equals the sum of the stored stems sample for sample.
pub fn generate_toy_corpus(spec: &ToySpec, out: &Path) -> Result<CorpusIndex> {
    spec.validate()?;
    for (a, b) in spec.band_overlaps() {
        log::warn!("toy sources `{a}` and `{b}` occupy overlapping bands");
    }
    let len = (spec.duration_s * spec.sample_rate as f64).round() as usize;
    let sr = spec.sample_rate as f64;
    let names: Vec<String> = spec.recipes.iter().map(|r| r.name().to_string()).collect();
    let mut manifest_tracks = Vec::new();
    for t in 0..spec.n_tracks {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(t as u64 + 1);
        let raw: Vec<Vec<f64>> = spec
            .recipes
            .iter()
            .map(|r| match *r {
                SourceRecipe::HarmonicTone {
                    f0_low,
                    f0_high,
                    harmonics,
                    ..
                } => render_tone(&mut rng, len, sr, f0_low, f0_high, harmonics),
                SourceRecipe::NoiseBurst {
                    band_low, band_high, ..
                } => render_noise(&mut rng, len, sr, band_low, band_high),
            })
            .collect();
        // scale so the mixture peaks at 0.9
        let peak = (0..len)
            .map(|i| raw.iter().map(|s| s[i]).sum::<f64>().abs())
            .fold(0.0, f64::max);
        let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
        let ints: Vec<Vec<i32>> = raw
            .iter()
            .map(|s| s.iter().map(|v| quantise(v * gain)).collect())
            .collect();
        let mix: Vec<f64> = (0..len)
            .map(|i| ints.iter().map(|s| s[i]).sum::<i32>().clamp(-32767, 32767) as f64 / 32767.0)
            .collect();
        let name = format!("track{t:03}");
        let dir = out.join(&spec.split).join(&name);
        write_wav_mono(&dir.join("mixture.wav"), &AudioClip::new(mix, spec.sample_rate)?, WavEncoding::Pcm16)?;
        let mut sources = BTreeMap::new();
        for (n, s) in names.iter().zip(&ints) {
            let clip = AudioClip::new(s.iter().map(|&v| v as f64 / 32767.0).collect(), spec.sample_rate)?;
            write_wav_mono(&dir.join(format!("{n}.wav")), &clip, WavEncoding::Pcm16)?;
            sources.insert(n.clone(), PathBuf::from(&spec.split).join(&name).join(format!("{n}.wav")));
        }
        manifest_tracks.push(ManifestTrack {
            name: name.clone(),
            split: spec.split.clone(),
            mixture: PathBuf::from(&spec.split).join(&name).join("mixture.wav"),
            sources,
        });
    }
    // merge with tracks of other splits already listed
    let mpath = out.join(CORPUS_MANIFEST);
    let mut manifest = match std::fs::read_to_string(&mpath) {
        Ok(text) => {
            let mut m = parse_manifest(&text)?;
            if m.source_names != names {
                return Err(Error::Config(format!(
                    "{} lists sources {:?}, new split has {names:?}",
                    mpath.display(),
                    m.source_names
                )));
            }
            m.tracks.retain(|t| t.split != spec.split);
            m
        }
        Err(_) => Manifest {
            source_names: names.clone(),
            tracks: Vec::new(),
        },
    };
    manifest.tracks.extend(manifest_tracks);
    manifest.tracks.sort_by(|a, b| (&a.split, &a.name).cmp(&(&b.split, &b.name)));
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    index_corpus(
        out,
        &spec.split,
        &LayoutSpec {
            layout: Layout::Manifest(mpath),
            source_names: None,
            require_sources: true,
        },
    )
}

// ---------------------------------------------------------------------------
// spectral corpus and sampling

/// How real-source contexts are brought into `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceScale {
    /// Divide by `max(own peak, peak of the mixture context at the same track and offset)`,
    /// which keeps real sources on the same scale as separator outputs.
    #[default]
    Mixture,
    /// Divide by the context's own peak.
    Own,
}

/// Whole-track raw STFT magnitudes for one track.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSpectra {
    pub name: String,
    pub frames: usize,
    pub mixture: Vec<f64>,
    pub sources: Vec<Option<Vec<f64>>>,
}

/// In-memory magnitudes of a whole split, ready for context sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCorpus {
    pub stft: StftConfig,
    pub source_names: Vec<String>,
    pub tracks: Vec<TrackSpectra>,
    pub source_scale: SourceScale,
}

/// Where one sampled context came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextId {
    pub track: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub mixtures: Vec<ContextId>,
    /// `sources[i]` lists the origin of each row of `real_sources[i]`.
    pub sources: Vec<Vec<ContextId>>,
}

/// `m` mixture contexts and, independently drawn, `m` contexts per source.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub mixtures: SpecBatch,
    pub real_sources: Vec<SpecBatch>,
    pub provenance: Provenance,
}

/// Named groups of stems summed into one model source (e.g. vocals vs. the rest).
pub type SourceGroups = Vec<(String, Vec<String>)>;

/// Groups for a two-source `target` versus everything-else model.
pub fn binary_groups(names: &[String], target: &str) -> Result<SourceGroups> {
    if !names.iter().any(|n| n == target) {
        return Err(Error::Config(format!(
            "binary target `{target}` is not among the corpus sources {names:?}"
        )));
    }
    let rest: Vec<String> = names.iter().filter(|n| *n != target).cloned().collect();
    Ok(vec![
        (target.to_string(), vec![target.to_string()]),
        (format!("non-{target}"), rest),
    ])
}

fn sum_clips(track: &str, clips: &[AudioClip]) -> Result<AudioClip> {
    let first = &clips[0];
    let mut out = first.samples.clone();
    for c in &clips[1..] {
        if c.samples.len() != out.len() {
            return Err(Error::Corpus {
                track: track.into(),
                reason: "grouped stems differ in length".into(),
            });
        }
        out.iter_mut().zip(&c.samples).for_each(|(a, b)| *a += b);
    }
    AudioClip::new(out, first.sample_rate)
}

impl SpectralCorpus {
    /// Decodes every track of `index` (mono) and computes raw magnitudes.
    pub fn load(index: &CorpusIndex, stft: &StftConfig, groups: Option<&SourceGroups>, scale: SourceScale) -> Result<Self> {
        stft.validate()?;
        let groups: SourceGroups = match groups {
            Some(g) => g.clone(),
            None => index.source_names.iter().map(|n| (n.clone(), vec![n.clone()])).collect(),
        };
        let members: Vec<Vec<usize>> = groups
            .iter()
            .map(|(_, m)| {
                m.iter()
                    .map(|s| {
                        index
                            .source_index(s)
                            .ok_or_else(|| Error::Config(format!("unknown stem `{s}` in source group")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let engine = StftEngine::new(stft.frame_size);
        let tracks = index
            .tracks
            .par_iter()
            .map(|t| {
                let mix = read_wav_mono(&t.mixture)?;
                let mspec = engine.analyze(&mix, stft.hop)?;
                let sources = members
                    .iter()
                    .map(|idx| {
                        let paths: Option<Vec<&PathBuf>> = idx.iter().map(|&k| t.sources[k].as_ref()).collect();
                        match paths {
                            None => Ok(None),
                            Some(paths) => {
                                let clips = paths.iter().map(|p| read_wav_mono(p)).collect::<Result<Vec<_>>>()?;
                                let clip = sum_clips(&t.name, &clips)?;
                                Ok(Some(engine.analyze(&clip, stft.hop)?.magnitude))
                            }
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TrackSpectra {
                    name: t.name.clone(),
                    frames: mspec.frames,
                    mixture: mspec.magnitude,
                    sources,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpectralCorpus {
            stft: stft.clone(),
            source_names: groups.into_iter().map(|(n, _)| n).collect(),
            tracks,
            source_scale: scale,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.source_names.len()
    }

    pub fn context_shape(&self) -> (usize, usize) {
        (self.stft.context, self.stft.bins())
    }

    /// Valid context start frames of a track: `0..=frames − C` (at least one).
    pub fn offsets(&self, track: usize) -> usize {
        self.tracks[track].frames.saturating_sub(self.stft.context) + 1
    }

    /// Raw `C × F` context starting at `offset`, zero-padded past the end.
    pub fn raw_context(&self, data: &[f64], frames: usize, offset: usize) -> Vec<f64> {
        let (c, f) = self.context_shape();
        let mut out = vec![0.0; c * f];
        let end = (offset + c).min(frames);
        if end > offset {
            out[..(end - offset) * f].copy_from_slice(&data[offset * f..end * f]);
        }
        out
    }

    fn draw(&self, rng: &mut ChaCha8Rng, eligible: &[usize]) -> ContextId {
        // uniform over (track, offset) pairs, not over tracks
        let total: usize = eligible.iter().map(|&t| self.offsets(t)).sum();
        let mut k = rng.random_range(0..total);
        for &t in eligible {
            let n = self.offsets(t);
            if k < n {
                return ContextId { track: t, offset: k };
            }
            k -= n;
        }
        unreachable!("draw index within total")
    }

    fn peak(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |a, &b| a.max(b))
    }

    fn unit(mut v: Vec<f64>, scale: f64) -> Vec<f64> {
        if scale > 0.0 {
            v.iter_mut().for_each(|x| *x = (*x / scale).min(1.0));
        }
        v
    }

    /// Peak-normalised mixture context and its scale factor.
    pub fn mixture_context(&self, id: ContextId) -> (Vec<f64>, f64) {
        let t = &self.tracks[id.track];
        let raw = self.raw_context(&t.mixture, t.frames, id.offset);
        let p = Self::peak(&raw);
        (Self::unit(raw, p), if p > 0.0 { p } else { 1.0 })
    }

    /// Normalised context of source `i`; `None` if that stem is missing.
    pub fn source_context(&self, i: usize, id: ContextId) -> Option<Vec<f64>> {
        let t = &self.tracks[id.track];
        let data = t.sources[i].as_ref()?;
        let raw = self.raw_context(data, t.frames, id.offset);
        let own = Self::peak(&raw);
        let scale = match self.source_scale {
            SourceScale::Own => own,
            SourceScale::Mixture => own.max(Self::peak(&self.raw_context(&t.mixture, t.frames, id.offset))),
        };
        Some(Self::unit(raw, scale))
    }

    /// `m` mixture contexts drawn uniformly with replacement.
    pub fn sample_mixtures(&self, m: usize, rng: &mut ChaCha8Rng) -> Result<(SpecBatch, Vec<ContextId>)> {
        if m == 0 || self.tracks.is_empty() {
            return Err(Error::Config("sampling needs m >= 1 and a non-empty corpus".into()));
        }
        let (c, f) = self.context_shape();
        let all: Vec<usize> = (0..self.tracks.len()).collect();
        let ids: Vec<ContextId> = (0..m).map(|_| self.draw(rng, &all)).collect();
        let rows: Vec<Vec<f64>> = ids.iter().map(|&id| self.mixture_context(id).0).collect();
        Ok((SpecBatch::stack(c, f, rows.iter().map(|r| r.as_slice()))?, ids))
    }

    /// `m` contexts per source, each source drawn with its own randomness.
    ///
    /// Silent draws are redrawn (up to a bound, after which the silent
    /// context is kept so sampling never fails).
    pub fn sample_sources(&self, m: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<SpecBatch>, Vec<Vec<ContextId>>)> {
        if m == 0 {
            return Err(Error::Config("sampling needs m >= 1".into()));
        }
        let (c, f) = self.context_shape();
        let mut batches = Vec::with_capacity(self.n_sources());
        let mut prov = Vec::with_capacity(self.n_sources());
        for i in 0..self.n_sources() {
            let eligible: Vec<usize> = (0..self.tracks.len())
                .filter(|&t| self.tracks[t].sources[i].is_some())
                .collect();
            if eligible.is_empty() {
                return Err(Error::Config(format!(
                    "no track provides source `{}`",
                    self.source_names[i]
                )));
            }
            let mut rows = Vec::with_capacity(m);
            let mut ids = Vec::with_capacity(m);
            for _ in 0..m {
                let mut id = self.draw(rng, &eligible);
                let mut ctx = self.source_context(i, id).expect("eligible track");
                for _ in 0..64 {
                    if Self::peak(&ctx) > 0.0 {
                        break;
                    }
                    id = self.draw(rng, &eligible);
                    ctx = self.source_context(i, id).expect("eligible track");
                }
                rows.push(ctx);
                ids.push(id);
            }
            batches.push(SpecBatch::stack(c, f, rows.iter().map(|r| r.as_slice()))?);
            prov.push(ids);
        }
        Ok((batches, prov))
    }

    pub fn sample_batch(&self, m: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let (mixtures, mix_ids) = self.sample_mixtures(m, rng)?;
        let (real_sources, src_ids) = self.sample_sources(m, rng)?;
        Ok(Batch {
            mixtures,
            real_sources,
            provenance: Provenance {
                mixtures: mix_ids,
                sources: src_ids,
            },
        })
    }

    /// Convenience wrapper seeding a fresh generator.
    pub fn sample_batch_seeded(&self, m: usize, seed: u64) -> Result<Batch> {
        self.sample_batch(m, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}
