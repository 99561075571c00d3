//! BSS-style energy-ratio metrics, corpus statistics and the rank-sum test.
//!
//! The decomposition projects the estimate onto time-shifted copies of the
//! references (`taps` shifts each): onto the target alone for the target
//! component and onto all references for the interference component. The
//! Gram matrices come from FFT correlations and are solved by Cholesky.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{CorpusIndex, SourceGroups};
use crate::error::{Error, Result};
use crate::networks::{Noise, Separator};
use crate::signal::{normalize_unit, split_contexts, AudioClip, StftConfig, StftEngine};
use crate::tensor::SpecBatch;
use crate::training::TrainState;
use crate::wav::read_wav_mono;

/// Metric values are clamped to `±DB_CAP` dB.
pub const DB_CAP: f64 = 100.0;

/// Relative diagonal loading applied to Gram matrices before factorisation.
const GRAM_LOADING: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    /// Target reference zero-padded to the component length.
    pub reference: Vec<f64>,
}

impl Decomposition {
    /// The (padded) estimate the components add up to.
    pub fn estimate(&self) -> Vec<f64> {
        (0..self.s_target.len())
            .map(|t| self.s_target[t] + self.e_interf[t] + self.e_artif[t])
            .collect()
    }
}

fn energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn next_fft_len(n: usize) -> usize {
    n.next_power_of_two()
}

/// Shared FFT and Gram factorisations for one set of references.
pub struct ProjectionBasis {
    n_refs: usize,
    len: usize,
    taps: usize,
    fft_len: usize,
    spectra: Vec<Vec<Complex64>>,
    all: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
    single: Vec<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>>,
}

fn cholesky(mut g: DMatrix<f64>, what: &str) -> Result<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>> {
    let scale = (0..g.nrows()).map(|i| g[(i, i)]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::UndefinedMetric(format!("{what} references are silent")));
    }
    let mut load = GRAM_LOADING * scale;
    for _ in 0..6 {
        let mut h = g.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += load;
        }
        if let Some(c) = h.cholesky() {
            return Ok(c);
        }
        load *= 1e3;
    }
    g.fill_diagonal(f64::NAN);
    Err(Error::UndefinedMetric(format!("{what} Gram matrix is not positive definite")))
}

impl ProjectionBasis {
    pub fn new(references: &[Vec<f64>], taps: usize) -> Result<Self> {
        let n = references.len();
        if n == 0 || taps == 0 {
            return Err(Error::Structure("need at least one reference and one tap".into()));
        }
        let len = references[0].len();
        if references.iter().any(|r| r.len() != len) || len == 0 {
            return Err(Error::Structure("references must be non-empty and equally long".into()));
        }
        let fft_len = next_fft_len(len + taps);
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(fft_len);
        let inv = planner.plan_fft_inverse(fft_len);
        let spectra: Vec<Vec<Complex64>> = references
            .iter()
            .map(|r| {
                let mut b: Vec<Complex64> = r.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                b.resize(fft_len, Complex64::new(0.0, 0.0));
                fwd.process(&mut b);
                b
            })
            .collect();
        // corr[i][j][d mod M] = Σ_u s_i(u) s_j(u + d)
        let mut corr = vec![vec![Vec::new(); n]; n];
        for i in 0..n {
            for j in i..n {
                let mut b: Vec<Complex64> = spectra[i].iter().zip(&spectra[j]).map(|(a, b)| a.conj() * b).collect();
                inv.process(&mut b);
                let r: Vec<f64> = b.iter().map(|c| c.re / fft_len as f64).collect();
                corr[i][j] = r;
            }
        }
        let lag = |i: usize, j: usize, d: isize| -> f64 {
            // R_ji(d) = R_ij(−d)
            let (a, b, d) = if i <= j { (i, j, d) } else { (j, i, -d) };
            corr[a][b][d.rem_euclid(fft_len as isize) as usize]
        };
        let mut g = DMatrix::zeros(n * taps, n * taps);
        for i in 0..n {
            for j in 0..n {
                for t1 in 0..taps {
                    for t2 in 0..taps {
                        g[(i * taps + t1, j * taps + t2)] = lag(i, j, t1 as isize - t2 as isize);
                    }
                }
            }
        }
        let single = (0..n)
            .map(|i| {
                let block = g.view((i * taps, i * taps), (taps, taps)).into_owned();
                cholesky(block, "target")
            })
            .collect::<Result<Vec<_>>>()?;
        let all = cholesky(g, "all")?;
        Ok(ProjectionBasis {
            n_refs: n,
            len,
            taps,
            fft_len,
            spectra,
            all,
            single,
        })
    }

    /// Least-squares projection of `est` onto shifted copies of the chosen
    /// references (`None`: all of them). Output length is `len + taps − 1`.
    pub fn project(&self, est: &[f64], target: Option<usize>) -> Vec<f64> {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(self.fft_len);
        let inv = planner.plan_fft_inverse(self.fft_len);
        let m = self.fft_len;
        let mut e: Vec<Complex64> = est.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        e.resize(m, Complex64::new(0.0, 0.0));
        fwd.process(&mut e);
        let refs: Vec<usize> = match target {
            Some(t) => vec![t],
            None => (0..self.n_refs).collect(),
        };
        let mut rhs = DVector::zeros(refs.len() * self.taps);
        for (k, &j) in refs.iter().enumerate() {
            let mut b: Vec<Complex64> = self.spectra[j].iter().zip(&e).map(|(s, x)| s.conj() * x).collect();
            inv.process(&mut b);
            for tau in 0..self.taps {
                rhs[k * self.taps + tau] = b[tau].re / m as f64;
            }
        }
        let h = match target {
            Some(t) => self.single[t].solve(&rhs),
            None => self.all.solve(&rhs),
        };
        let mut acc = vec![Complex64::new(0.0, 0.0); m];
        for (k, &j) in refs.iter().enumerate() {
            let mut f = vec![Complex64::new(0.0, 0.0); m];
            for tau in 0..self.taps {
                f[tau] = Complex64::new(h[k * self.taps + tau], 0.0);
            }
            fwd.process(&mut f);
            for (a, (x, y)) in acc.iter_mut().zip(f.iter().zip(&self.spectra[j])) {
                *a += x * y;
            }
        }
        inv.process(&mut acc);
        acc.iter()
            .take(self.len + self.taps - 1)
            .map(|c| c.re / m as f64)
            .collect()
    }

    /// Splits `estimate` into target, interference and artifact parts.
    pub fn decompose(&self, estimate: &[f64], references: &[Vec<f64>], target: usize) -> Result<Decomposition> {
        if estimate.len() != self.len || target >= self.n_refs {
            return Err(Error::Structure(format!(
                "estimate of {} samples / target {target} for {} references of {} samples",
                estimate.len(),
                self.n_refs,
                self.len
            )));
        }
        if energy(&references[target]) == 0.0 {
            return Err(Error::UndefinedMetric("target reference is silent".into()));
        }
        let total = self.len + self.taps - 1;
        let mut est = estimate.to_vec();
        est.resize(total, 0.0);
        let s_target = self.project(estimate, Some(target));
        let p_all = self.project(estimate, None);
        let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(a, s)| a - s).collect();
        let e_artif: Vec<f64> = est.iter().zip(&p_all).map(|(e, a)| e - a).collect();
        let mut reference = references[target].clone();
        reference.resize(total, 0.0);
        Ok(Decomposition {
            s_target,
            e_interf,
            e_artif,
            reference,
        })
    }
}

/// One-shot decomposition of `estimate` against `references[target]`.
pub fn bss_decompose(estimate: &[f64], references: &[Vec<f64>], target: usize, taps: usize) -> Result<Decomposition> {
    ProjectionBasis::new(references, taps)?.decompose(estimate, references, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    pub isr: f64,
    /// At least one value hit the ±100 dB cap.
    pub capped: bool,
}

/// `10·log10(num/den)` clamped to `±DB_CAP`; second value flags clamping.
pub fn ratio_db(num: f64, den: f64) -> (f64, bool) {
    if num <= 0.0 {
        return (-DB_CAP, true);
    }
    if den <= 0.0 {
        return (DB_CAP, true);
    }
    let v = 10.0 * (num / den).log10();
    if v > DB_CAP {
        (DB_CAP, true)
    } else if v < -DB_CAP {
        (-DB_CAP, true)
    } else {
        (v, false)
    }
}

pub fn compute_metrics(d: &Decomposition) -> Metrics {
    let st = energy(&d.s_target);
    let err: Vec<f64> = d.e_interf.iter().zip(&d.e_artif).map(|(a, b)| a + b).collect();
    let si: Vec<f64> = d.s_target.iter().zip(&d.e_interf).map(|(a, b)| a + b).collect();
    let spat: Vec<f64> = d.s_target.iter().zip(&d.reference).map(|(a, b)| a - b).collect();
    let (sdr, c1) = ratio_db(st, energy(&err));
    let (sir, c2) = ratio_db(st, energy(&d.e_interf));
    let (sar, c3) = ratio_db(energy(&si), energy(&d.e_artif));
    let (isr, c4) = ratio_db(energy(&d.reference), energy(&spat));
    Metrics {
        sdr,
        sir,
        sar,
        isr,
        capped: c1 || c2 || c3 || c4,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub count: usize,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    pub mean_minus_std: f64,
    pub mean_plus_std: f64,
}

pub fn aggregate_stats(values: &[f64]) -> Result<AggregateStats> {
    if values.is_empty() {
        return Err(Error::Structure("statistics of an empty series".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Ok(AggregateStats {
        count: n,
        max: v[n - 1],
        min: v[0],
        mean,
        std,
        median,
        mean_minus_std: mean - std,
        mean_plus_std: mean + std,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    pub u_a: f64,
    pub u_b: f64,
    pub p_value: f64,
    pub significant: bool,
    pub method: TestMethod,
}

/// Sample sizes up to this use the exact null distribution.
pub const EXACT_LIMIT: usize = 20;

/// Midranks (1-based) of the pooled sample.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided rank-sum test with midranks for ties.
pub fn mann_whitney_u(a: &[f64], b: &[f64], alpha_level: f64) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Structure("rank-sum test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Structure("rank-sum test input contains NaN".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u_a = ra - (na * (na + 1)) as f64 / 2.0;
    let u_b = (na * nb) as f64 - u_a;
    let (p, method) = if na <= EXACT_LIMIT && nb <= EXACT_LIMIT {
        (exact_p(&ranks, na, ra), TestMethod::Exact)
    } else {
        (normal_p(&pooled, &ranks, na, nb, u_a), TestMethod::Normal)
    };
    Ok(MannWhitney {
        u_a,
        u_b,
        p_value: p,
        significant: p < alpha_level,
        method,
    })
}

/// Exact two-sided p-value: distribution of the rank sum of `na` ranks drawn from `ranks`.
fn exact_p(ranks: &[f64], na: usize, observed: f64) -> f64 {
    // doubled midranks are integers
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // counts[k][s]: number of k-subsets with doubled sum s
    let mut counts = vec![vec![0.0f64; max_sum + 1]; na + 1];
    counts[0][0] = 1.0;
    for &d in &doubled {
        for k in (1..=na).rev() {
            for s in (d..=max_sum).rev() {
                let add = counts[k - 1][s - d];
                if add != 0.0 {
                    counts[k][s] += add;
                }
            }
        }
    }
    let obs = (2.0 * observed).round() as usize;
    let total: f64 = counts[na].iter().sum();
    let lower: f64 = counts[na][..=obs.min(max_sum)].iter().sum();
    let upper: f64 = counts[na][obs.min(max_sum)..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

fn normal_p(pooled: &[f64], ranks: &[f64], na: usize, nb: usize, u_a: f64) -> f64 {
    let n = (na + nb) as f64;
    let mut tie_term = 0.0;
    let mut seen: BTreeMap<u64, usize> = BTreeMap::new();
    for (v, _) in pooled.iter().zip(ranks) {
        *seen.entry(v.to_bits()).or_default() += 1;
    }
    for &t in seen.values() {
        let t = t as f64;
        tie_term += t * t * t - t;
    }
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if !(var > 0.0) {
        return 1.0;
    }
    let mean = (na * nb) as f64 / 2.0;
    let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

// ---------------------------------------------------------------------------
// corpus evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub taps: usize,
    /// Worker threads across tracks; 0 uses all cores.
    pub jobs: usize,
    /// Restrict evaluation to these track names.
    pub tracks: Option<Vec<String>>,
    /// Also score the mixture itself as every source's estimate.
    pub include_baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            taps: 512,
            jobs: 0,
            tracks: None,
            include_baseline: true,
        }
    }
}

pub const METHOD_MODEL: &str = "model";
pub const METHOD_MIXTURE: &str = "mixture";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub track: String,
    pub source: String,
    pub method: String,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    pub isr: f64,
    pub capped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub method: String,
    pub source: String,
    pub metric: String,
    pub stats: AggregateStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedTrack {
    pub track: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub source_names: Vec<String>,
    pub evaluated_tracks: Vec<String>,
    pub skipped: Vec<SkippedTrack>,
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryEntry>,
}

pub const METRIC_NAMES: [&str; 4] = ["sdr", "sir", "sar", "isr"];

impl MetricRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "sdr" => Some(self.sdr),
            "sir" => Some(self.sir),
            "sar" => Some(self.sar),
            "isr" => Some(self.isr),
            _ => None,
        }
    }
}

impl MetricsReport {
    /// Values of one metric column for a (method, source) pair, in track order.
    pub fn column(&self, method: &str, source: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.source == source)
            .filter_map(|r| r.metric(metric))
            .collect()
    }

    pub fn stats(&self, method: &str, source: &str, metric: &str) -> Option<&AggregateStats> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.source == source && s.metric == metric)
            .map(|s| &s.stats)
    }

    /// Mean over sources of each source's mean metric value.
    pub fn mean_over_sources(&self, method: &str, metric: &str) -> Option<f64> {
        let means: Vec<f64> = self
            .source_names
            .iter()
            .filter_map(|s| self.stats(method, s, metric).map(|st| st.mean))
            .collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }

    fn rebuild_summary(&mut self) {
        let mut methods: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        methods.sort();
        methods.dedup();
        self.summary.clear();
        for m in &methods {
            for s in &self.source_names {
                for metric in METRIC_NAMES {
                    if let Ok(stats) = aggregate_stats(&self.column(m, s, metric)) {
                        self.summary.push(SummaryEntry {
                            method: m.clone(),
                            source: s.clone(),
                            metric: metric.into(),
                            stats,
                        });
                    }
                }
            }
        }
    }

    pub fn from_rows(source_names: Vec<String>, rows: Vec<MetricRow>) -> Self {
        let mut tracks: Vec<String> = rows.iter().map(|r| r.track.clone()).collect();
        tracks.sort();
        tracks.dedup();
        let mut r = MetricsReport {
            source_names,
            evaluated_tracks: tracks,
            skipped: Vec::new(),
            rows,
            summary: Vec::new(),
        };
        r.rebuild_summary();
        r
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Format(format!("metrics csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("metrics csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            source_names: &'a [String],
            evaluated_tracks: &'a [String],
            skipped: &'a [SkippedTrack],
            summary: &'a [SummaryEntry],
        }
        Ok(serde_json::to_string_pretty(&Summary {
            source_names: &self.source_names,
            evaluated_tracks: &self.evaluated_tracks,
            skipped: &self.skipped,
            summary: &self.summary,
        })?)
    }
}

/// Parses a metrics CSV as written by [`MetricsReport::to_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("metrics csv: {e}"))))
        .collect()
}

/// Rank-sum test of one metric column per source between two reports' model rows.
pub fn compare_reports(a: &[MetricRow], b: &[MetricRow], metric: &str, alpha_level: f64) -> Result<Vec<(String, MannWhitney)>> {
    let mut sources: Vec<String> = a.iter().map(|r| r.source.clone()).collect();
    sources.sort();
    sources.dedup();
    let col = |rows: &[MetricRow], s: &str| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.source == s && r.method == METHOD_MODEL)
            .filter_map(|r| r.metric(metric))
            .collect()
    };
    if METRIC_NAMES.iter().all(|m| *m != metric) {
        return Err(Error::Config(format!("unknown metric `{metric}`")));
    }
    sources
        .into_iter()
        .map(|s| {
            let t = mann_whitney_u(&col(a, &s), &col(b, &s), alpha_level)?;
            Ok((s, t))
        })
        .collect()
}

/// Separates a whole clip: non-overlapping contexts, per-context peak
/// normalisation, zero-noise forward pass and mixture-phase resynthesis.
/// The clip is zero-padded by `frame_size - hop` on both sides for analysis
/// and trimmed after synthesis.
pub fn separate_clip(separator: &Separator, mixture: &AudioClip, stft: &StftConfig) -> Result<Vec<AudioClip>> {
    let mut stft = stft.clone();
    stft.context_hop = stft.context;
    stft.validate()?;
    let engine = StftEngine::new(stft.frame_size);
    let pad = stft.frame_size - stft.hop;
    let mut samples = vec![0.0; pad];
    samples.extend_from_slice(&mixture.samples);
    samples.resize(mixture.len() + 2 * pad, 0.0);
    let padded = AudioClip::new(samples, mixture.sample_rate)?;
    let track = engine.analyze(&padded, stft.hop)?;
    let contexts: Vec<_> = split_contexts(&track, &stft).iter().map(normalize_unit).collect();
    let (c, f) = (stft.context, stft.bins());
    let batch = SpecBatch::stack(c, f, contexts.iter().map(|s| s.magnitude.as_slice()))?;
    let outs = separator.separate(&batch, Noise::Zero)?;
    let frames = track.frames;
    outs.iter()
        .map(|o| {
            let mut mag = vec![0.0; contexts.len() * c * f];
            for (k, ctx) in contexts.iter().enumerate() {
                // Silent contexts stay silent rather than echoing the output biases.
                let scale = if ctx.peak() > 0.0 { ctx.scale_factor } else { 0.0 };
                for (dst, v) in mag[k * c * f..(k + 1) * c * f].iter_mut().zip(o.example(k)) {
                    *dst = v * scale;
                }
            }
            mag.truncate(frames * f);
            let samples = engine.synthesize(&mag, &track.phase, frames, stft.hop, padded.len());
            AudioClip::new(samples[pad..pad + mixture.len()].to_vec(), mixture.sample_rate)
        })
        .collect()
}

/// Mono references of one track under a source grouping; `None` if a stem is missing.
fn load_references(index: &CorpusIndex, track: usize, groups: &SourceGroups) -> Result<Option<Vec<AudioClip>>> {
    let t = &index.tracks[track];
    let mut out = Vec::with_capacity(groups.len());
    for (_, members) in groups {
        let mut acc: Option<AudioClip> = None;
        for m in members {
            let k = index
                .source_index(m)
                .ok_or_else(|| Error::Config(format!("corpus has no stem `{m}`")))?;
            let Some(path) = &t.sources[k] else {
                return Ok(None);
            };
            let clip = read_wav_mono(path)?;
            acc = Some(match acc {
                None => clip,
                Some(mut a) => {
                    if a.samples.len() != clip.samples.len() {
                        return Err(Error::Corpus {
                            track: t.name.clone(),
                            reason: "stems differ in length".into(),
                        });
                    }
                    a.samples.iter_mut().zip(&clip.samples).for_each(|(x, y)| *x += y);
                    a
                }
            });
        }
        out.push(acc.expect("group has members"));
    }
    Ok(Some(out))
}

fn score_track(
    track: &str,
    names: &[String],
    method: &str,
    basis: &ProjectionBasis,
    refs: &[Vec<f64>],
    estimates: &[Vec<f64>],
) -> Result<Vec<MetricRow>> {
    names
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d = basis.decompose(&estimates[i], refs, i)?;
            let m = compute_metrics(&d);
            Ok(MetricRow {
                track: track.into(),
                source: s.clone(),
                method: method.into(),
                sdr: m.sdr,
                sir: m.sir,
                sar: m.sar,
                isr: m.isr,
                capped: m.capped,
            })
        })
        .collect()
}

/// Evaluates an arbitrary estimator (mixture, references) → estimates over a split.
pub fn evaluate_with<F>(
    index: &CorpusIndex,
    groups: &SourceGroups,
    config: &EvalConfig,
    estimator: F,
) -> Result<MetricsReport>
where
    F: Fn(&AudioClip, &[AudioClip]) -> Result<Vec<AudioClip>> + Sync,
{
    let names: Vec<String> = groups.iter().map(|(n, _)| n.clone()).collect();
    let selected: Vec<usize> = (0..index.tracks.len())
        .filter(|&k| {
            config
                .tracks
                .as_ref()
                .is_none_or(|list| list.iter().any(|n| *n == index.tracks[k].name))
        })
        .collect();
    if let Some(list) = &config.tracks {
        for n in list {
            if !index.tracks.iter().any(|t| t.name == *n) {
                log::warn!("requested track `{n}` is not in the corpus");
            }
        }
    }
    let work = |k: usize| -> Result<std::result::Result<Vec<MetricRow>, SkippedTrack>> {
        let name = index.tracks[k].name.clone();
        let Some(refs) = load_references(index, k, groups)? else {
            log::warn!("skipping track `{name}`: missing reference stems");
            return Ok(Err(SkippedTrack {
                track: name,
                reason: "missing reference stems".into(),
            }));
        };
        let mix = read_wav_mono(&index.tracks[k].mixture)?;
        let ref_samples: Vec<Vec<f64>> = refs.iter().map(|c| c.samples.clone()).collect();
        let basis = match ProjectionBasis::new(&ref_samples, config.taps) {
            Ok(b) => b,
            Err(Error::UndefinedMetric(reason)) => {
                log::warn!("skipping track `{name}`: {reason}");
                return Ok(Err(SkippedTrack { track: name, reason }));
            }
            Err(e) => return Err(e),
        };
        let est = estimator(&mix, &refs)?;
        if est.len() != names.len() || est.iter().any(|e| e.len() != mix.len()) {
            return Err(Error::Structure(format!(
                "estimator returned {} clips for {} sources on `{name}`",
                est.len(),
                names.len()
            )));
        }
        let est: Vec<Vec<f64>> = est.into_iter().map(|c| c.samples).collect();
        let scored = (|| {
            let mut rows = score_track(&name, &names, METHOD_MODEL, &basis, &ref_samples, &est)?;
            if config.include_baseline {
                let naive = vec![mix.samples.clone(); names.len()];
                rows.extend(score_track(&name, &names, METHOD_MIXTURE, &basis, &ref_samples, &naive)?);
            }
            Ok(rows)
        })();
        match scored {
            Ok(rows) => Ok(Ok(rows)),
            Err(Error::UndefinedMetric(reason)) => {
                log::warn!("skipping track `{name}`: {reason}");
                Ok(Err(SkippedTrack { track: name, reason }))
            }
            Err(e) => Err(e),
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| selected.par_iter().map(|&k| work(k)).collect::<Result<Vec<_>>>())?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(rs) => rows.extend(rs),
            Err(s) => skipped.push(s),
        }
    }
    let mut report = MetricsReport::from_rows(names, rows);
    report.skipped = skipped;
    Ok(report)
}

/// Evaluates a trained model on a split with reference stems.
pub fn evaluate_checkpoint(state: &TrainState, index: &CorpusIndex, config: &EvalConfig) -> Result<MetricsReport> {
    let groups: SourceGroups = match &state.config.source_groups {
        Some(g) => g.clone(),
        None => state
            .config
            .source_names
            .iter()
            .map(|n| (n.clone(), vec![n.clone()]))
            .collect(),
    };
    let sep = &state.model.separator;
    let stft = &state.config.stft;
    evaluate_with(index, &groups, config, |mix, _| separate_clip(sep, mix, stft))
}

// ---------------------------------------------------------------------------
// box-statistic plots

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// SVG with one box per (source, method): whiskers at min/max, box at mean ± std, median line.
pub fn box_plot_svg(report: &MetricsReport, metric: &str) -> String {
    let methods: Vec<String> = {
        let mut m: Vec<String> = report.summary.iter().map(|s| s.method.clone()).collect();
        m.sort();
        m.dedup();
        m
    };
    let entries: Vec<(&String, &String, &AggregateStats)> = report
        .source_names
        .iter()
        .flat_map(|s| methods.iter().map(move |m| (s, m)))
        .filter_map(|(s, m)| report.stats(m, s, metric).map(|st| (s, m, st)))
        .collect();
    let (w, h, pad) = (120.0 * entries.len().max(1) as f64 + 80.0, 360.0, 40.0);
    let lo = entries.iter().map(|e| e.2.min.min(e.2.mean_minus_std)).fold(f64::INFINITY, f64::min);
    let hi = entries.iter().map(|e| e.2.max.max(e.2.mean_plus_std)).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (-1.0, 1.0) };
    let y = |v: f64| pad + (hi - v) / (hi - lo) * (h - 2.0 * pad);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"10\" y=\"20\">{} (dB)</text>\n\
         <text x=\"10\" y=\"{:.1}\">{hi:.2}</text>\n<text x=\"10\" y=\"{:.1}\">{lo:.2}</text>\n",
        svg_escape(&metric.to_uppercase()),
        y(hi) + 4.0,
        y(lo) + 4.0
    );
    for (k, (source, method, st)) in entries.iter().enumerate() {
        let cx = 80.0 + 120.0 * k as f64 + 40.0;
        let fill = if method.as_str() == METHOD_MODEL { "#7fb3d5" } else { "#d5d8dc" };
        out += &format!(
            "<line x1=\"{cx}\" y1=\"{:.2}\" x2=\"{cx}\" y2=\"{:.2}\" stroke=\"black\"/>\n\
             <rect x=\"{:.2}\" y=\"{:.2}\" width=\"50\" height=\"{:.2}\" fill=\"{fill}\" stroke=\"black\"/>\n\
             <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"2\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            y(st.max),
            y(st.min),
            cx - 25.0,
            y(st.mean_plus_std),
            (y(st.mean_minus_std) - y(st.mean_plus_std)).max(0.5),
            cx - 25.0,
            y(st.median),
            cx + 25.0,
            y(st.median),
            cx,
            h - 22.0,
            svg_escape(source),
            cx,
            h - 8.0,
            svg_escape(method),
        );
    }
    out += "</svg>\n";
    out
}

/// Writes `<dir>/<metric>.svg` for every metric.
pub fn write_box_plots(report: &MetricsReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    METRIC_NAMES
        .iter()
        .map(|m| {
            let p = dir.join(format!("{m}.svg"));
            std::fs::write(&p, box_plot_svg(report, m)).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_examples() {
        let s = aggregate_stats(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.median, s.max, s.min), (2.0, 2.0, 3.0, 1.0));
        let one = aggregate_stats(&[4.5]).unwrap();
        assert_eq!((one.mean, one.median, one.max, one.min, one.std), (4.5, 4.5, 4.5, 4.5, 0.0));
        assert!(aggregate_stats(&[]).is_err());
    }

    #[test]
    fn rank_sum_examples() {
        let t = mann_whitney_u(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0], 0.05).unwrap();
        assert_eq!(t.u_a, 0.0);
        assert_eq!(t.u_a + t.u_b, 9.0);
        assert!((t.p_value - 0.1).abs() < 1e-12);
        let same = mann_whitney_u(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 0.05).unwrap();
        assert!(same.p_value > 0.99 && !same.significant);
    }

    #[test]
    fn db_caps() {
        assert_eq!(ratio_db(1.0, 0.0), (DB_CAP, true));
        assert_eq!(ratio_db(0.0, 1.0), (-DB_CAP, true));
        assert_eq!(ratio_db(1.0, 1.0), (0.0, false));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![MetricRow {
            track: "t,1".into(),
            source: "tone".into(),
            method: METHOD_MODEL.into(),
            sdr: 1.5,
            sir: -2.0,
            sar: 100.0,
            isr: 3.25,
            capped: true,
        }];
        let r = MetricsReport::from_rows(vec!["tone".into()], rows.clone());
        assert_eq!(parse_metrics_csv(&r.to_csv().unwrap()).unwrap(), rows);
        assert!(parse_metrics_csv("a,b\n1,2\n").is_err());
    }
}
