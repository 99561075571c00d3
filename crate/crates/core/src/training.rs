//! Alternating separator/critic training with Adam, checkpoints and logs.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::dataset::{binary_groups, SourceGroups, SourceScale, SpectralCorpus, DSD_SOURCES};
use crate::error::{Error, Result};
use crate::losses::{critic_loss, generator_loss, sample_interpolates, LossBreakdown, LossWeights, PenaltyOptions};
use crate::networks::{CriticConfig, Model, Noise, SeparatorConfig};
use crate::optim::{Adam, AdamConfig};
use crate::signal::StftConfig;

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    VocalsBinary,
    GanOnly,
    EnergyOnly,
    NoSkip,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::VocalsBinary,
        Ablation::GanOnly,
        Ablation::EnergyOnly,
        Ablation::NoSkip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::VocalsBinary => "vocals_binary",
            Ablation::GanOnly => "gan_only",
            Ablation::EnergyOnly => "energy_only",
            Ablation::NoSkip => "no_skip",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

/// Network layer plans.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    /// The published layer tables.
    #[default]
    Standard,
    /// Reduced widths for small inputs.
    Compact,
    Custom {
        separator: SeparatorConfig,
        critic: CriticConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub i_critic: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many outer steps (0: only the final one).
    pub checkpoint_every: u64,
    pub critic_first: bool,
    pub early_stop: bool,
    pub ablation: Ablation,
    /// Source names in model order; `loss_weights.alpha` follows this order.
    pub source_names: Vec<String>,
    /// Sample rate of the training audio; separation input must match.
    pub sample_rate: u32,
    /// Stems summed into each model source; `None` maps names one to one.
    pub source_groups: Option<SourceGroups>,
    pub binary_target: String,
    pub model: ModelSpec,
    pub use_skip_connections: bool,
    pub noise_std: f64,
    pub source_scale: SourceScale,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub penalty: PenaltyOptions,
    pub stft: StftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            i_critic: 5,
            max_steps: 1000,
            seed: 0,
            checkpoint_every: 500,
            critic_first: false,
            early_stop: false,
            ablation: Ablation::Full,
            source_names: DSD_SOURCES.iter().map(|s| s.to_string()).collect(),
            sample_rate: 44_100,
            source_groups: None,
            binary_target: "vocals".into(),
            model: ModelSpec::Standard,
            use_skip_connections: true,
            noise_std: 1.0,
            source_scale: SourceScale::Mixture,
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            penalty: PenaltyOptions::default(),
            stft: StftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn n_sources(&self) -> usize {
        self.source_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.i_critic == 0 {
            return Err(Error::Config("i_critic must be >= 1".into()));
        }
        if self.n_sources() < 2 {
            return Err(Error::Config("at least 2 source names are required".into()));
        }
        if let Some(g) = &self.source_groups {
            let names: Vec<&String> = g.iter().map(|(n, _)| n).collect();
            if names.len() != self.source_names.len() || names.iter().zip(&self.source_names).any(|(a, b)| *a != b) {
                return Err(Error::Config("source_groups must list source_names in order".into()));
            }
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be > 0".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        self.adam.validate()?;
        self.loss_weights.validate(self.n_sources())?;
        self.stft.validate()
    }

    /// Separator and critic layer plans for this config's sources and context shape.
    pub fn network_configs(&self) -> (SeparatorConfig, CriticConfig) {
        let n = self.n_sources();
        let shape = (self.stft.context, self.stft.bins());
        let (mut sep, mut critic) = match &self.model {
            ModelSpec::Standard => (SeparatorConfig::standard(n), CriticConfig::standard()),
            ModelSpec::Compact => (SeparatorConfig::compact(n, shape), CriticConfig::compact(shape)),
            ModelSpec::Custom { separator, critic } => (separator.clone(), critic.clone()),
        };
        sep.n_sources = n;
        sep.input_shape = shape;
        sep.use_skip_connections = self.use_skip_connections;
        sep.noise_std = self.noise_std;
        critic.input_shape = shape;
        (sep, critic)
    }

    /// Whether the critics are trained at all.
    pub fn trains_critics(&self) -> bool {
        self.ablation != Ablation::EnergyOnly
    }
}

/// Applies an ablation switch to a base configuration.
pub fn configure_ablation(base: &TrainConfig, mode: Ablation) -> Result<TrainConfig> {
    let mut c = base.clone();
    c.ablation = mode;
    match mode {
        Ablation::Full => {}
        Ablation::GanOnly => c.loss_weights.beta_energy = 0.0,
        Ablation::EnergyOnly => c.loss_weights.alpha.iter_mut().for_each(|a| *a = 0.0),
        Ablation::NoSkip => c.use_skip_connections = false,
        Ablation::VocalsBinary => {
            let target = c.binary_target.clone();
            let i = base
                .source_names
                .iter()
                .position(|n| *n == target)
                .ok_or_else(|| Error::Config(format!("binary target `{target}` is not a configured source")))?;
            let alpha = &base.loss_weights.alpha;
            let rest: f64 = alpha.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, a)| a).sum();
            let groups = binary_groups(&base.source_names, &target)?;
            c.source_names = groups.iter().map(|(n, _)| n.clone()).collect();
            c.source_groups = Some(groups);
            c.loss_weights.alpha = vec![alpha.get(i).copied().unwrap_or(0.5), rest];
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Critic,
}

/// One training-log row (one per sub-step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub role: Role,
    pub wasserstein: f64,
    pub grad_penalty: f64,
    pub energy: f64,
    pub total: f64,
    pub grad_norm_mean: f64,
}

impl LogRow {
    fn new(step: u64, role: Role, b: &LossBreakdown) -> Self {
        LogRow {
            step,
            role,
            wasserstein: b.wasserstein_term,
            grad_penalty: b.gradient_penalty_term,
            energy: b.energy_term,
            total: b.total,
            grad_norm_mean: b.grad_norm_mean,
        }
    }
}

/// Per-outer-step series kept for early stopping and reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    /// Mean critic-side Wasserstein term (generator side when critics are frozen).
    pub wasserstein: Vec<f64>,
    /// Generator energy term.
    pub energy: Vec<f64>,
    /// Mean interpolate gradient norm of each critic sub-step.
    pub grad_norms: Vec<f64>,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub separator_updates: u64,
    pub critic_updates: u64,
    pub model: Model,
    pub separator_opt: Adam,
    pub critic_opts: Vec<Adam>,
    pub rng: ChaCha8Rng,
    /// Penalty of the latest critic update, reported alongside generator rows.
    pub last_penalty: f64,
    pub history: History,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (sep, critic) = config.network_configs();
        let model = Model::build(sep, critic, config.seed)?;
        let separator_opt = Adam::new(model.separator.params().len());
        let critic_opts = model.critics.iter().map(|c| Adam::new(c.params().len())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(TrainState {
            config: config.clone(),
            step: 0,
            separator_updates: 0,
            critic_updates: 0,
            model,
            separator_opt,
            critic_opts,
            rng,
            last_penalty: 0.0,
            history: History::default(),
        })
    }

    pub fn separator_digest(&self) -> String {
        param_digest(&[self.model.separator.params()])
    }

    pub fn critics_digest(&self) -> String {
        let parts: Vec<&[f64]> = self.model.critics.iter().map(|c| c.params()).collect();
        param_digest(&parts)
    }
}

/// SHA-256 over the little-endian bytes of the given parameter slices.
pub fn param_digest(parts: &[&[f64]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        for v in *p {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn check_grads(grads: &[f64], what: &str, step: u64) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "step {step}: {what} gradient {i} is {}",
            grads[i]
        )));
    }
    Ok(())
}

/// One separator update on a fresh mixture batch.
pub fn generator_update(state: &mut TrainState, corpus: &SpectralCorpus) -> Result<LogRow> {
    let cfg = &state.config;
    let (mix, _) = corpus.sample_mixtures(cfg.batch_size, &mut state.rng)?;
    let noise = Noise::Seeded(state.rng.random());
    let (fake, trace) = state.model.separator.forward(&mix, noise)?;
    let (mut b, gfake) = generator_loss(&state.model.critics, &fake, &mix, &cfg.loss_weights)?;
    let mut grads = vec![0.0; state.model.separator.params().len()];
    state.model.separator.backward(&trace, &gfake, &mut grads);
    check_grads(&grads, "separator", state.step)?;
    state
        .separator_opt
        .step(&cfg.adam, state.model.separator.params_mut(), &grads);
    state.separator_updates += 1;
    b.gradient_penalty_term = state.last_penalty;
    state.history.energy.push(b.energy_term);
    Ok(LogRow::new(state.step, Role::Generator, &b))
}

/// One update of every critic on fresh real and separated batches.
pub fn critic_update(state: &mut TrainState, corpus: &SpectralCorpus) -> Result<LogRow> {
    let cfg = &state.config;
    let m = cfg.batch_size;
    let (mix, _) = corpus.sample_mixtures(m, &mut state.rng)?;
    let (real, _) = corpus.sample_sources(m, &mut state.rng)?;
    let noise = Noise::Seeded(state.rng.random());
    let fake = state.model.separator.separate(&mix, noise)?;
    let (interp, _) = sample_interpolates(&real, &fake, &mut state.rng, cfg.penalty.shared_epsilon)?;
    let mut grads: Vec<Vec<f64>> = state.model.critics.iter().map(|c| vec![0.0; c.params().len()]).collect();
    let b = critic_loss(
        &state.model.critics,
        &real,
        &fake,
        &interp,
        &cfg.loss_weights,
        &cfg.penalty,
        Some(&mut grads),
    )?;
    for (i, g) in grads.iter().enumerate() {
        check_grads(g, &format!("critic {i}"), state.step)?;
    }
    for ((c, opt), g) in state.model.critics.iter_mut().zip(&mut state.critic_opts).zip(&grads) {
        opt.step(&cfg.adam, c.params_mut(), g);
    }
    state.critic_updates += 1;
    state.last_penalty = b.gradient_penalty_term;
    state.history.grad_norms.push(b.grad_norm_mean);
    Ok(LogRow::new(state.step, Role::Critic, &b))
}

/// One outer iteration: a separator update and `i_critic` critic updates,
/// each on freshly sampled batches.
pub fn train_step(state: &mut TrainState, corpus: &SpectralCorpus) -> Result<Vec<LogRow>> {
    if corpus.source_names != state.config.source_names {
        return Err(Error::Config(format!(
            "corpus sources {:?} differ from configured {:?}",
            corpus.source_names, state.config.source_names
        )));
    }
    state.step += 1;
    let mut rows = Vec::with_capacity(1 + state.config.i_critic);
    let critics = |state: &mut TrainState, rows: &mut Vec<LogRow>| -> Result<()> {
        if state.config.trains_critics() {
            for _ in 0..state.config.i_critic {
                rows.push(critic_update(state, corpus)?);
            }
        }
        Ok(())
    };
    if state.config.critic_first {
        critics(state, &mut rows)?;
        rows.push(generator_update(state, corpus)?);
    } else {
        rows.push(generator_update(state, corpus)?);
        critics(state, &mut rows)?;
    }
    let crit: Vec<f64> = rows
        .iter()
        .filter(|r| r.role == Role::Critic)
        .map(|r| r.wasserstein)
        .collect();
    let w = if crit.is_empty() {
        rows.iter().find(|r| r.role == Role::Generator).map_or(0.0, |r| r.wasserstein)
    } else {
        crit.iter().sum::<f64>() / crit.len() as f64
    };
    state.history.wasserstein.push(w);
    Ok(rows)
}

/// Trailing moving average of `series` ending at index `end` (exclusive).
pub fn moving_average(series: &[f64], end: usize, window: usize) -> Option<f64> {
    if end == 0 || end > series.len() {
        return None;
    }
    let start = end.saturating_sub(window);
    let s = &series[start..end];
    Some(s.iter().sum::<f64>() / s.len() as f64)
}

/// True once the 200-step average of the Wasserstein term moved by < 1% over the last 500 steps.
pub fn early_stop_reached(history: &History) -> bool {
    let n = history.wasserstein.len();
    if n < 700 {
        return false;
    }
    let now = moving_average(&history.wasserstein, n, 200).unwrap();
    let then = moving_average(&history.wasserstein, n - 500, 200).unwrap();
    (now - then).abs() < 0.01 * then.abs()
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngMeta {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    step: u64,
    separator_updates: u64,
    critic_updates: u64,
    separator_adam_t: u64,
    critic_adam_t: Vec<u64>,
    rng: RngMeta,
    config: TrainConfig,
}

fn push(c: &mut Container, name: &str, v: &[f64]) {
    c.push(name, vec![v.len()], v.to_vec());
}

pub fn checkpoint_container(state: &TrainState) -> Container {
    let meta = CheckpointMeta {
        step: state.step,
        separator_updates: state.separator_updates,
        critic_updates: state.critic_updates,
        separator_adam_t: state.separator_opt.t,
        critic_adam_t: state.critic_opts.iter().map(|o| o.t).collect(),
        rng: RngMeta {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        config: state.config.clone(),
    };
    let mut c = Container::new(
        CHECKPOINT_KIND,
        CHECKPOINT_VERSION,
        serde_json::to_value(meta).expect("checkpoint meta serializes"),
    );
    push(&mut c, "separator", state.model.separator.params());
    push(&mut c, "separator.adam.m", &state.separator_opt.m);
    push(&mut c, "separator.adam.v", &state.separator_opt.v);
    for (i, (critic, opt)) in state.model.critics.iter().zip(&state.critic_opts).enumerate() {
        push(&mut c, &format!("critic{i}"), critic.params());
        push(&mut c, &format!("critic{i}.adam.m"), &opt.m);
        push(&mut c, &format!("critic{i}.adam.v"), &opt.v);
    }
    push(&mut c, "last_penalty", &[state.last_penalty]);
    push(&mut c, "history.wasserstein", &state.history.wasserstein);
    push(&mut c, "history.energy", &state.history.energy);
    push(&mut c, "history.grad_norms", &state.history.grad_norms);
    c
}

fn fill(c: &Container, name: &str, dst: &mut [f64]) -> Result<()> {
    let a = c.array(name)?;
    if a.data.len() != dst.len() {
        return Err(Error::Format(format!(
            "checkpoint array `{name}` has {} values, model expects {}",
            a.data.len(),
            dst.len()
        )));
    }
    dst.copy_from_slice(&a.data);
    Ok(())
}

pub fn state_from_container(c: &Container) -> Result<TrainState> {
    c.expect_kind(CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
    let meta: CheckpointMeta =
        serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format(format!("checkpoint meta: {e}")))?;
    let mut state = TrainState::new(&meta.config)?;
    if meta.critic_adam_t.len() != state.model.critics.len() {
        return Err(Error::Format("checkpoint critic count does not match its config".into()));
    }
    fill(c, "separator", state.model.separator.params_mut())?;
    fill(c, "separator.adam.m", &mut state.separator_opt.m)?;
    fill(c, "separator.adam.v", &mut state.separator_opt.v)?;
    state.separator_opt.t = meta.separator_adam_t;
    for i in 0..state.model.critics.len() {
        fill(c, &format!("critic{i}"), state.model.critics[i].params_mut())?;
        fill(c, &format!("critic{i}.adam.m"), &mut state.critic_opts[i].m)?;
        fill(c, &format!("critic{i}.adam.v"), &mut state.critic_opts[i].v)?;
        state.critic_opts[i].t = meta.critic_adam_t[i];
    }
    let seed: [u8; 32] = hex::decode(&meta.rng.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::Format("checkpoint rng seed is not 32 hex bytes".into()))?;
    let word_pos: u128 = meta
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Format("checkpoint rng word position is not an integer".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    state.step = meta.step;
    state.separator_updates = meta.separator_updates;
    state.critic_updates = meta.critic_updates;
    let lp = c.array("last_penalty")?;
    state.last_penalty = *lp
        .data
        .first()
        .ok_or_else(|| Error::Format("checkpoint last_penalty is empty".into()))?;
    state.history = History {
        wasserstein: c.array("history.wasserstein")?.data.clone(),
        energy: c.array("history.energy")?.data.clone(),
        grad_norms: c.array("history.grad_norms")?.data.clone(),
    };
    Ok(state)
}

/// Decodes a checkpoint image held in memory.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    state_from_container(&Container::decode(bytes)?)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    checkpoint_container(state).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    state_from_container(&Container::read(path)?)
}

// ---------------------------------------------------------------------------
// runs

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return NormStats::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        NormStats {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            min: v[0],
            max: v[n - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub separator_updates: u64,
    pub critic_updates: u64,
    pub stopped_early: bool,
    pub last_generator: Option<LogRow>,
    pub last_critic: Option<LogRow>,
    /// 200-step moving average of the energy term at step 50 and at the end.
    pub energy_ma_step50: Option<f64>,
    pub energy_ma_final: Option<f64>,
    /// Interpolate gradient norms over the last tenth of critic updates.
    pub critic_grad_norms: NormStats,
    pub separator_digest: String,
    pub critics_digest: String,
    pub checkpoint: Option<PathBuf>,
}

pub fn report(state: &TrainState, stopped_early: bool, checkpoint: Option<PathBuf>, rows: &[LogRow]) -> TrainReport {
    let e = &state.history.energy;
    let g = &state.history.grad_norms;
    let tail = &g[g.len() - g.len().div_ceil(10)..];
    TrainReport {
        steps: state.step,
        separator_updates: state.separator_updates,
        critic_updates: state.critic_updates,
        stopped_early,
        last_generator: rows.iter().rev().find(|r| r.role == Role::Generator).cloned(),
        last_critic: rows.iter().rev().find(|r| r.role == Role::Critic).cloned(),
        energy_ma_step50: moving_average(e, 50.min(e.len()), 200),
        energy_ma_final: moving_average(e, e.len(), 200),
        critic_grad_norms: NormStats::of(tail),
        separator_digest: state.separator_digest(),
        critics_digest: state.critics_digest(),
        checkpoint,
    }
}

/// Where a run keeps its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn latest(&self) -> PathBuf {
        self.checkpoint_dir().join("latest.ckpt")
    }
    pub fn at_step(&self, step: u64) -> PathBuf {
        self.checkpoint_dir().join(format!("step_{step:08}.ckpt"))
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }
    pub fn csv_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }
    pub fn jsonl_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("train_report.json")
    }
}

const CSV_HEADER: &str = "step,role,wasserstein,grad_penalty,energy,total,grad_norm_mean";

struct LogWriter {
    csv: File,
    jsonl: File,
    csv_path: PathBuf,
    jsonl_path: PathBuf,
}

impl LogWriter {
    /// Opens both logs, dropping rows past `keep_through` (left over from an interrupted run).
    fn open(paths: &RunPaths, keep_through: u64) -> Result<Self> {
        let (csv_path, jsonl_path) = (paths.csv_log(), paths.jsonl_log());
        let kept = read_log_rows(&jsonl_path)
            .unwrap_or_default()
            .into_iter()
            .filter(|r| r.step <= keep_through)
            .collect::<Vec<_>>();
        let mut csv = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let jsonl = File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?;
        writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
        let mut w = LogWriter {
            csv,
            jsonl,
            csv_path,
            jsonl_path,
        };
        for r in &kept {
            w.append(r)?;
        }
        Ok(w)
    }

    fn append(&mut self, r: &LogRow) -> Result<()> {
        let role = match r.role {
            Role::Generator => "generator",
            Role::Critic => "critic",
        };
        writeln!(
            self.csv,
            "{},{role},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.wasserstein, r.grad_penalty, r.energy, r.total, r.grad_norm_mean
        )
        .map_err(|e| Error::io(&self.csv_path, e))?;
        let line = serde_json::to_string(r)?;
        writeln!(self.jsonl, "{line}").map_err(|e| Error::io(&self.jsonl_path, e))
    }
}

/// Reads a JSONL training log.
pub fn read_log_rows(path: &Path) -> Result<Vec<LogRow>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Runs (or resumes) training up to `config.max_steps`.
///
/// With `out` set, logs and checkpoints are written there and an existing
/// `checkpoints/latest.ckpt` is resumed from; otherwise the run is in memory.
pub fn run_training(
    config: &TrainConfig,
    corpus: &SpectralCorpus,
    out: Option<&RunPaths>,
) -> Result<(TrainState, TrainReport)> {
    config.validate()?;
    let mut state = match out.map(|p| p.latest()).filter(|p| p.is_file()) {
        Some(latest) => {
            let s = load_checkpoint(&latest)?;
            if s.config != *config {
                let mut c = s.config.clone();
                c.max_steps = config.max_steps;
                if c != *config {
                    return Err(Error::Config(format!(
                        "{} was written with a different configuration",
                        latest.display()
                    )));
                }
            }
            log::info!("resuming from {} at step {}", latest.display(), s.step);
            let mut s = s;
            s.config.max_steps = config.max_steps;
            s
        }
        None => TrainState::new(config)?,
    };
    let mut logs = match out {
        Some(p) => {
            std::fs::create_dir_all(p.checkpoint_dir()).map_err(|e| Error::io(p.checkpoint_dir(), e))?;
            if state.step == 0 {
                save_checkpoint(&state, &p.latest())?;
            }
            Some(LogWriter::open(p, state.step)?)
        }
        None => None,
    };
    let mut last_good = out.map(|p| p.latest());
    let mut rows_tail: Vec<LogRow> = Vec::new();
    let mut stopped_early = false;
    while state.step < config.max_steps {
        let rows = train_step(&mut state, corpus).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(match &last_good {
                Some(p) => format!("{msg}; last good checkpoint: {}", p.display()),
                None => msg,
            }),
            other => other,
        })?;
        if let Some(w) = logs.as_mut() {
            for r in &rows {
                w.append(r)?;
            }
        }
        if state.step % 200 == 0 {
            log::info!(
                "step {} energy {:.4e} wasserstein {:.4e}",
                state.step,
                state.history.energy.last().copied().unwrap_or(0.0),
                state.history.wasserstein.last().copied().unwrap_or(0.0)
            );
        }
        rows_tail = rows;
        if let Some(p) = out {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                save_checkpoint(&state, &p.at_step(state.step))?;
                save_checkpoint(&state, &p.latest())?;
                last_good = Some(p.at_step(state.step));
            }
        }
        if config.early_stop && early_stop_reached(&state.history) {
            log::info!("early stop at step {}", state.step);
            stopped_early = true;
            break;
        }
    }
    let ckpt = match out {
        Some(p) => {
            save_checkpoint(&state, &p.final_checkpoint())?;
            save_checkpoint(&state, &p.latest())?;
            Some(p.final_checkpoint())
        }
        None => None,
    };
    let rep = report(&state, stopped_early, ckpt, &rows_tail);
    if let Some(p) = out {
        let text = serde_json::to_string_pretty(&rep)?;
        std::fs::write(p.report(), text).map_err(|e| Error::io(p.report(), e))?;
    }
    Ok((state, rep))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("lou".parse::<Ablation>().is_err());
    }

    #[test]
    fn ablation_switches() {
        let base = TrainConfig::default();
        let g = configure_ablation(&base, Ablation::GanOnly).unwrap();
        assert_eq!(g.loss_weights.beta_energy, 0.0);
        assert_eq!(g.loss_weights.alpha, base.loss_weights.alpha);
        assert_eq!(g.loss_weights.lambda_gp, base.loss_weights.lambda_gp);
        let e = configure_ablation(&base, Ablation::EnergyOnly).unwrap();
        assert!(e.loss_weights.alpha.iter().all(|a| *a == 0.0));
        assert!(!e.trains_critics());
        let mut f = configure_ablation(&base, Ablation::Full).unwrap();
        f.ablation = base.ablation;
        assert_eq!(f, base);
        assert!(!configure_ablation(&base, Ablation::NoSkip).unwrap().use_skip_connections);
        let v = configure_ablation(&base, Ablation::VocalsBinary).unwrap();
        assert_eq!(v.n_sources(), 2);
        assert_eq!(v.source_names, vec!["vocals", "non-vocals"]);
        assert!((v.loss_weights.alpha[0] - 0.4).abs() < 1e-15 && (v.loss_weights.alpha[1] - 0.6).abs() < 1e-12);
        v.validate().unwrap();
    }

    #[test]
    fn moving_average_windows() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(moving_average(&s, 4, 2), Some(3.5));
        assert_eq!(moving_average(&s, 2, 10), Some(1.5));
        assert_eq!(moving_average(&s, 0, 2), None);
    }

    #[test]
    fn early_stop_rule() {
        let mut h = History::default();
        h.wasserstein = vec![1.0; 699];
        assert!(!early_stop_reached(&h));
        h.wasserstein.push(1.0);
        assert!(early_stop_reached(&h));
        h.wasserstein = (0..700).map(|i| i as f64).collect();
        assert!(!early_stop_reached(&h));
    }
}
