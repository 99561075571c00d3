//! `weaksep`: toy corpus generation, training, separation and evaluation.

mod manifest;
mod resample;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weaksep_core::config::{parse_run_config, RunConfig};
use weaksep_core::dataset::{
    corpus_fingerprint, generate_toy_corpus, index_corpus, CorpusIndex, LayoutSpec, SourceGroups, SpectralCorpus,
};
use weaksep_core::evaluation::{compare_reports, evaluate_checkpoint, parse_metrics_csv, write_box_plots, METRIC_NAMES};
use weaksep_core::signal::{AudioClip, StftEngine};
use weaksep_core::training::{configure_ablation, load_checkpoint, run_training, Ablation, RunPaths, TrainState};
use weaksep_core::wav::{read_wav_mono, write_wav_mono, WavEncoding};
use weaksep_core::Error;

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "weaksep", version, about = "Weakly supervised source separation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with disjoint-band sources.
    MakeToyData(MakeToyArgs),
    /// Train a separator and its critics.
    Train(TrainArgs),
    /// Split one WAV file into per-source WAV files.
    Separate(SeparateArgs),
    /// Score a checkpoint on a split with reference stems.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct MakeToyArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    tracks: Option<u64>,
    #[arg(long)]
    test_tracks: Option<usize>,
    /// Comma-separated source names; the first is tonal, the rest are noise bands.
    #[arg(long, value_delimiter = ',')]
    sources: Option<Vec<String>>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    sample_rate: Option<u32>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus root (overrides `corpus.root`).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args, Debug)]
struct SeparateArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Convert the input to the model's sample rate instead of failing.
    #[arg(long)]
    resample: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// File with one track name per line; restricts evaluation to those tracks.
    #[arg(long)]
    tracks_list: Option<PathBuf>,
    /// Write box-statistic SVG images per metric.
    #[arg(long)]
    plot: bool,
    /// Metrics CSV of another run; runs a rank-sum test per source.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Metric used by `--compare`.
    #[arg(long, default_value = "sdr")]
    metric: String,
    #[arg(long)]
    taps: Option<usize>,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e @ Error::Numerical(_))) => {
            eprintln!("numerical failure: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            parse_run_config(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.toy.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.eval.jobs = j;
        if j > 0 {
            // fails only if a pool already exists
            let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
        }
    }
    let ctx = Ctx {
        out: cli.out,
        config_path: cli.config,
    };
    match cli.command {
        Command::MakeToyData(a) => make_toy_data(cfg, &ctx, a),
        Command::Train(a) => train(cfg, &ctx, a),
        Command::Separate(a) => separate(cfg, &ctx, a),
        Command::Evaluate(a) => evaluate(cfg, &ctx, a),
    }
}

struct Ctx {
    out: Option<PathBuf>,
    config_path: Option<PathBuf>,
}

impl Ctx {
    fn out_dir(&self, default: &str) -> std::result::Result<PathBuf, Failure> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        std::fs::create_dir_all(&dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn manifest(&self, command: &str, seed: u64, cfg: &RunConfig) -> RunManifest {
        let mut m = RunManifest::new(command, seed, cfg.clone());
        if let Some(p) = &self.config_path {
            m.inputs.insert("config".into(), p.clone());
        }
        m
    }
}

fn make_toy_data(mut cfg: RunConfig, ctx: &Ctx, a: MakeToyArgs) -> CmdResult {
    if let Some(n) = a.tracks {
        cfg.toy.tracks = n as usize;
    }
    if let Some(n) = a.test_tracks {
        cfg.toy.test_tracks = n;
    }
    if let Some(s) = a.sources {
        cfg.toy.sources = s;
    }
    if let Some(d) = a.duration {
        cfg.toy.duration_s = d;
    }
    if let Some(r) = a.sample_rate {
        cfg.toy.sample_rate = r;
    }
    let specs = cfg
        .toy
        .specs(&cfg.corpus.train_split, &cfg.corpus.test_split)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let out = ctx.out_dir("toy_corpus")?;
    let mut indices = Vec::new();
    for spec in &specs {
        let idx = generate_toy_corpus(spec, &out)?;
        println!(
            "{}: {} tracks of {:.1} s at {} Hz, sources {}",
            idx.split,
            idx.len(),
            spec.duration_s,
            spec.sample_rate,
            idx.source_names.join(",")
        );
        indices.push(idx);
    }
    cfg.corpus.root = Some(out.clone());
    let refs: Vec<&CorpusIndex> = indices.iter().collect();
    let fingerprint = corpus_fingerprint(&refs)?;
    println!("corpus fingerprint {fingerprint}");
    let mut m = ctx.manifest("make-toy-data", cfg.toy.seed, &cfg);
    m.corpus_fingerprint = Some(fingerprint);
    m.outputs.push(out.join(weaksep_core::dataset::CORPUS_MANIFEST));
    m.write(&out)?;
    Ok(())
}

fn corpus_root(cfg: &RunConfig, flag: Option<PathBuf>) -> std::result::Result<PathBuf, Failure> {
    flag.or_else(|| cfg.corpus.root.clone())
        .ok_or_else(|| Failure::Usage("no corpus given (use --corpus or corpus.root)".into()))
}

fn groups_of(cfg: &weaksep_core::training::TrainConfig) -> SourceGroups {
    cfg.source_groups
        .clone()
        .unwrap_or_else(|| cfg.source_names.iter().map(|n| (n.clone(), vec![n.clone()])).collect())
}

fn check_rate(index: &CorpusIndex, expected: u32) -> CmdResult {
    if let Some(r) = index.sample_rate()? {
        if r != expected {
            return Err(Failure::Usage(format!(
                "corpus split `{}` is sampled at {r} Hz but the model expects {expected} Hz",
                index.split
            )));
        }
    }
    Ok(())
}

fn train(mut cfg: RunConfig, ctx: &Ctx, a: TrainArgs) -> CmdResult {
    let mode = a.ablation.unwrap_or(cfg.train.ablation);
    cfg.train = configure_ablation(&cfg.train, mode).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let root = corpus_root(&cfg, a.corpus)?;
    cfg.corpus.root = Some(root.clone());
    let split = a.split.unwrap_or_else(|| cfg.corpus.train_split.clone());
    cfg.corpus.train_split = split.clone();
    let layout = LayoutSpec {
        require_sources: true,
        ..cfg.corpus.layout.clone()
    };
    let index = index_corpus(&root, &split, &layout)?;
    if index.is_empty() {
        return Err(Failure::Usage(format!("split `{split}` of {} has no tracks", root.display())));
    }
    check_rate(&index, cfg.train.sample_rate)?;
    let groups = groups_of(&cfg.train);
    let corpus = SpectralCorpus::load(&index, &cfg.train.stft, Some(&groups), cfg.train.source_scale)?;
    let out = ctx.out_dir("run")?;
    let paths = RunPaths::new(&out);
    let mut m = ctx.manifest("train", cfg.train.seed, &cfg);
    m.corpus_fingerprint = Some(corpus_fingerprint(&[&index])?);
    m.inputs.insert("corpus".into(), root);
    m.outputs = vec![paths.final_checkpoint(), paths.csv_log(), paths.jsonl_log(), paths.report()];
    m.write(&out)?;
    let (_, report) = run_training(&cfg.train, &corpus, Some(&paths))?;
    println!(
        "trained {} steps ({} separator updates, {} critic updates){}",
        report.steps,
        report.separator_updates,
        report.critic_updates,
        if report.stopped_early { ", stopped early" } else { "" }
    );
    for row in [&report.last_generator, &report.last_critic].into_iter().flatten() {
        println!(
            "{:<9} wasserstein {:.6e}  grad_penalty {:.6e}  energy {:.6e}  total {:.6e}",
            format!("{:?}", row.role).to_lowercase(),
            row.wasserstein,
            row.grad_penalty,
            row.energy,
            row.total
        );
    }
    println!("separator digest {}", report.separator_digest);
    println!("checkpoint {}", paths.final_checkpoint().display());
    Ok(())
}

fn open_checkpoint(path: &Path) -> std::result::Result<TrainState, Failure> {
    let file = if path.is_dir() {
        RunPaths::new(path).final_checkpoint()
    } else {
        path.to_path_buf()
    };
    Ok(load_checkpoint(&file)?)
}

fn separate(cfg: RunConfig, ctx: &Ctx, a: SeparateArgs) -> CmdResult {
    let state = open_checkpoint(&a.checkpoint)?;
    let input = read_wav_mono(&a.input)?;
    let rate = state.config.sample_rate;
    let model_input = if input.sample_rate != rate {
        if !a.resample {
            return Err(Failure::Usage(format!(
                "input is sampled at {} Hz but the model expects {rate} Hz (pass --resample to convert)",
                input.sample_rate
            )));
        }
        resample::resample(&input, rate)?
    } else {
        input.clone()
    };
    let stft = &state.config.stft;
    let estimates = weaksep_core::evaluation::separate_clip(&state.model.separator, &model_input, stft)?;
    let estimates: Vec<AudioClip> = estimates
        .into_iter()
        .map(|c| {
            let mut c = resample::resample(&c, input.sample_rate)?;
            c.samples.resize(input.len(), 0.0);
            Ok(c)
        })
        .collect::<weaksep_core::Result<_>>()?;

    // distance of the summed estimates from the resynthesised mixture
    let engine = StftEngine::new(stft.frame_size);
    let spec = engine.analyze(&model_input, stft.hop)?;
    let recon = engine.synthesize(&spec.magnitude, &spec.phase, spec.frames, stft.hop, model_input.len());
    let recon = resample::resample(&AudioClip::new(recon, rate)?, input.sample_rate)?;
    let mut gap = 0.0;
    let mut norm = 0.0;
    for t in 0..input.len() {
        let s: f64 = estimates.iter().map(|e| e.samples[t]).sum();
        let r = recon.samples.get(t).copied().unwrap_or(0.0);
        gap += (s - r).powi(2);
        norm += r * r;
    }
    let rel = if norm > 0.0 { (gap / norm).sqrt() } else { gap.sqrt() };

    let out = ctx.out_dir("separated")?;
    let mut m = ctx.manifest("separate", state.config.seed, &cfg);
    m.corpus_fingerprint = Some(manifest::file_digest(&a.input)?);
    m.inputs.insert("checkpoint".into(), a.checkpoint.clone());
    m.inputs.insert("input".into(), a.input.clone());
    for (name, clip) in state.config.source_names.iter().zip(&estimates) {
        let p = out.join(format!("{name}.wav"));
        write_wav_mono(&p, clip, WavEncoding::Float32)?;
        println!("wrote {}", p.display());
        m.outputs.push(p);
    }
    println!("relative L2 gap between summed sources and resynthesised mixture: {rel:.6e}");
    m.write(&out)?;
    Ok(())
}

fn read_track_list(path: &Path) -> std::result::Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn evaluate(mut cfg: RunConfig, ctx: &Ctx, a: EvaluateArgs) -> CmdResult {
    if METRIC_NAMES.iter().all(|m| *m != a.metric) {
        return Err(Failure::Usage(format!("unknown metric `{}`", a.metric)));
    }
    let state = open_checkpoint(&a.checkpoint)?;
    let root = corpus_root(&cfg, a.corpus)?;
    cfg.corpus.root = Some(root.clone());
    let split = a.split.unwrap_or_else(|| cfg.corpus.test_split.clone());
    cfg.corpus.test_split = split.clone();
    if let Some(t) = a.taps {
        cfg.eval.taps = t;
    }
    if let Some(p) = &a.tracks_list {
        cfg.eval.tracks = Some(read_track_list(p)?);
    }
    let layout = LayoutSpec {
        require_sources: false,
        ..cfg.corpus.layout.clone()
    };
    let index = index_corpus(&root, &split, &layout)?;
    check_rate(&index, state.config.sample_rate)?;
    let members: Vec<String> = groups_of(&state.config).into_iter().flat_map(|(_, m)| m).collect();
    if let Some(missing) = members.iter().find(|m| index.source_index(m).is_none()) {
        return Err(Failure::Usage(format!("split `{split}` has no `{missing}` stems")));
    }
    let report = evaluate_checkpoint(&state, &index, &cfg.eval)?;
    if report.rows.is_empty() {
        return Err(Failure::Usage(format!("no track of split `{split}` has every reference stem")));
    }
    let out = ctx.out_dir("evaluation")?;
    let csv_path = out.join("metrics.csv");
    let json_path = out.join("summary.json");
    std::fs::write(&csv_path, report.to_csv()?).map_err(|e| Failure::Usage(format!("{}: {e}", csv_path.display())))?;
    std::fs::write(&json_path, report.summary_json()?)
        .map_err(|e| Failure::Usage(format!("{}: {e}", json_path.display())))?;
    let mut m = ctx.manifest("evaluate", state.config.seed, &cfg);
    m.corpus_fingerprint = Some(corpus_fingerprint(&[&index])?);
    m.inputs.insert("checkpoint".into(), a.checkpoint.clone());
    m.inputs.insert("corpus".into(), root);
    m.outputs = vec![csv_path, json_path];
    if a.plot {
        m.outputs.extend(write_box_plots(&report, &out.join("plots"))?);
    }

    println!(
        "{} tracks evaluated, {} skipped",
        report.evaluated_tracks.len(),
        report.skipped.len()
    );
    for s in &report.skipped {
        println!("skipped {}: {}", s.track, s.reason);
    }
    println!("{:<8} {:<12} {:>9} {:>9} {:>9} {:>9}", "method", "source", "sdr", "sir", "sar", "isr");
    let mut methods: Vec<&str> = report.summary.iter().map(|e| e.method.as_str()).collect();
    methods.dedup();
    for method in methods {
        for source in &report.source_names {
            let mean = |metric: &str| report.stats(method, source, metric).map_or(f64::NAN, |s| s.mean);
            println!(
                "{method:<8} {source:<12} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
                mean("sdr"),
                mean("sir"),
                mean("sar"),
                mean("isr")
            );
        }
    }
    if let Some(other) = &a.compare {
        let text = std::fs::read_to_string(other).map_err(|e| Failure::Usage(format!("{}: {e}", other.display())))?;
        let theirs = parse_metrics_csv(&text)?;
        m.inputs.insert("compare".into(), other.clone());
        for (source, t) in compare_reports(&report.rows, &theirs, &a.metric, 0.05)? {
            println!(
                "compare {source} {}: U={} p={:.6} {}",
                a.metric,
                t.u_a,
                t.p_value,
                if t.significant { "significant at 5%" } else { "not significant at 5%" }
            );
        }
    }
    m.write(&out)?;
    Ok(())
}
