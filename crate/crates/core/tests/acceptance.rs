//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! The toy training runs behind criteria 6 and 7 take a while; they are shared
//! between the two tests.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaksep_core::config::{parse_run_config, RunConfig};
use weaksep_core::dataset::{generate_toy_corpus, index_corpus, LayoutSpec, SourceScale, SpectralCorpus, TrackSpectra};
use weaksep_core::evaluation::{bss_decompose, compute_metrics, evaluate_checkpoint, mann_whitney_u, METHOD_MIXTURE, METHOD_MODEL};
use weaksep_core::losses::{critic_loss, generator_loss, LossWeights, PenaltyOptions};
use weaksep_core::networks::{ConvSpec, Critic, CriticConfig, Noise, Separator, SeparatorConfig};
use weaksep_core::signal::{AudioClip, StftConfig, StftEngine};
use weaksep_core::tensor::SpecBatch;
use weaksep_core::training::{
    checkpoint_container, configure_ablation, critic_update, decode_checkpoint, generator_update, run_training,
    train_step, Ablation, ModelSpec, TrainConfig, TrainReport, TrainState,
};

fn verdict(criterion: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("{} criterion {criterion} ({name}): {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stdout().write_all(line.as_bytes()).unwrap();
    assert!(ok, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------- criterion 1

fn shapes(rows: &[weaksep_core::networks::StageShape]) -> Vec<(usize, usize, usize)> {
    rows.iter().map(|r| r.shape).collect()
}

#[test]
fn criterion_1_layer_output_shapes() {
    let sep = Separator::build(SeparatorConfig::standard(4), 0).unwrap();
    let critic = Critic::build(CriticConfig::standard(), 0).unwrap();
    let sep_expected = vec![
        (16, 256, 16),
        (8, 128, 32),
        (4, 64, 64),
        (2, 32, 128),
        (1, 16, 256),
        (1, 16, 256),
        (2, 32, 128),
        (4, 64, 64),
        (8, 128, 32),
        (16, 256, 16),
        (32, 513, 1),
    ];
    let critic_expected = vec![
        (16, 256, 64),
        (8, 128, 64),
        (8, 128, 128),
        (4, 64, 128),
        (2, 32, 256),
        (2, 32, 256),
        (1, 1, 1),
    ];
    let got_sep = shapes(&sep.shape_report());
    let got_critic = shapes(&critic.shape_report());
    let mut ok = got_sep == sep_expected && got_critic == critic_expected;

    // a forward pass produces one (32, 513) plane per source
    let x = SpecBatch::zeros(1, 32, 513);
    let out = sep.separate(&x, Noise::Zero).unwrap();
    ok &= out.len() == 4 && out.iter().all(|o| o.shape() == (1, 32, 513));
    ok &= critic.score(&out[0]).unwrap().len() == 1;
    verdict(1, "layer shapes", ok, &format!("separator {got_sep:?}, critic {got_critic:?}"));
}

// ---------------------------------------------------------------- criterion 2

/// `d(s) = slope·s + offset` on 1×1 inputs.
fn affine_critic(slope: f64, offset: f64) -> Critic {
    let cfg = CriticConfig {
        input_shape: (1, 1),
        layers: vec![ConvSpec::k3(1, 1)],
        leaky_slope: 1.0,
    };
    let mut c = Critic::build(cfg, 0).unwrap();
    let p = c.params_mut();
    p.iter_mut().for_each(|v| *v = 0.0);
    p[4] = slope / 2.0;
    p[9] = 0.5;
    p[10] = 2.0;
    p[11] = offset - 1.0;
    c
}

fn scalars(v: &[f64]) -> SpecBatch {
    SpecBatch::from_vec(v.len(), 1, 1, v.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn central_difference(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + h;
            let up = f(&p);
            p[k] = orig - h;
            let down = f(&p);
            p[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn jittered<T>(mut net: T, params: impl Fn(&mut T) -> &mut [f64], seed: u64) -> T {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params(&mut net).iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
    net
}

fn random_batch(rng: &mut ChaCha8Rng, m: usize, shape: (usize, usize)) -> SpecBatch {
    let n = m * shape.0 * shape.1;
    SpecBatch::from_vec(m, shape.0, shape.1, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn criterion_2_loss_oracles_and_gradients() {
    let weights = LossWeights {
        lambda_gp: 10.0,
        beta_energy: 10.0,
        alpha: vec![0.4, 0.6],
    };
    let critics = vec![affine_critic(3.0, 0.25), affine_critic(-0.5, 2.0)];
    let real = vec![scalars(&[1.0, 2.0]), scalars(&[0.5, 0.0])];
    let fake = vec![scalars(&[0.25, 1.0]), scalars(&[1.5, 2.0])];
    let interp = vec![scalars(&[0.7, 1.1]), scalars(&[0.2, 0.9])];
    let mixture = scalars(&[2.0, 1.0]);

    let c = critic_loss(&critics, &real, &fake, &interp, &weights, &PenaltyOptions::default(), None).unwrap();
    let mut ok = close(c.wasserstein_term, -1.5, 1e-9) && close(c.gradient_penalty_term, 17.5, 1e-9);
    ok &= close(c.total, 16.0, 1e-9);
    let (g, _) = generator_loss(&critics, &fake, &mixture, &weights).unwrap();
    ok &= close(g.wasserstein_term, -1.525, 1e-9);
    ok &= close(g.energy_term, 10.0 * (1.6875f64.powi(2) + 16.0) / 2.0, 1e-9);
    ok &= close(g.total, g.wasserstein_term + g.energy_term, 1e-9);
    let micro = format!("micro critic {:.6} generator {:.6}", c.total, g.total);

    // finite differences on small networks
    let shape = (4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tiny_critic = |seed| {
        let cfg = CriticConfig {
            input_shape: shape,
            layers: vec![ConvSpec::k3(2, 2), ConvSpec::k3(3, 1)],
            leaky_slope: 0.2,
        };
        jittered(Critic::build(cfg, seed).unwrap(), |c| c.params_mut(), seed + 100)
    };
    let crits = vec![tiny_critic(1), tiny_critic(2)];
    let real: Vec<_> = (0..2).map(|_| random_batch(&mut rng, 3, shape)).collect();
    let fake: Vec<_> = (0..2).map(|_| random_batch(&mut rng, 3, shape)).collect();
    let interp: Vec<_> = (0..2).map(|_| random_batch(&mut rng, 3, shape)).collect();
    let opts = PenaltyOptions::default();
    let mut grads: Vec<Vec<f64>> = crits.iter().map(|c| vec![0.0; c.params().len()]).collect();
    critic_loss(&crits, &real, &fake, &interp, &weights, &opts, Some(&mut grads)).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        let numeric = central_difference(crits[i].params(), |p| {
            let mut cs = crits.clone();
            cs[i].params_mut().copy_from_slice(p);
            critic_loss(&cs, &real, &fake, &interp, &weights, &opts, None).unwrap().total
        });
        worst = worst.max(relative_error(&grads[i], &numeric));
    }

    let sep_cfg = SeparatorConfig {
        n_sources: 2,
        input_shape: shape,
        encoder: vec![ConvSpec::k3(2, 2)],
        bottleneck: ConvSpec::k3(2, 2),
        decoder: vec![ConvSpec::k3(2, 2), ConvSpec::k3(1, 2)],
        noise_std: 0.3,
        use_skip_connections: true,
        skip_stages: 1,
        output_init_gain: 1.0,
    };
    let sep = jittered(Separator::build(sep_cfg, 11).unwrap(), |s| s.params_mut(), 12);
    let mix = random_batch(&mut rng, 3, shape);
    let loss_of = |s: &Separator| -> (f64, Vec<f64>) {
        let (outs, trace) = s.forward(&mix, Noise::Seeded(77)).unwrap();
        let (b, grad_out) = generator_loss(&crits, &outs, &mix, &weights).unwrap();
        let mut g = vec![0.0; s.params().len()];
        s.backward(&trace, &grad_out, &mut g);
        (b.total, g)
    };
    let (_, analytic) = loss_of(&sep);
    let numeric = central_difference(sep.params(), |p| {
        let mut s = sep.clone();
        s.params_mut().copy_from_slice(p);
        loss_of(&s).0
    });
    worst = worst.max(relative_error(&analytic, &numeric));
    ok &= worst < 1e-4;
    verdict(2, "loss oracles", ok, &format!("{micro}, worst gradient relative error {worst:.2e}"));
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_stft_round_trip_parseval_and_span() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let engine = StftEngine::new(1024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(4096..12_000);
        let clip = AudioClip::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 44_100).unwrap();
        let spec = engine.analyze(&clip, 512).unwrap();
        let y = engine.synthesize(&spec.magnitude, &spec.phase, spec.frames, 512, len);
        let interior = 1024..len - 1024;
        let err: f64 = interior.clone().map(|i| (y[i] - clip.samples[i]).powi(2)).sum();
        let norm: f64 = interior.map(|i| clip.samples[i].powi(2)).sum();
        worst = worst.max((err / norm).sqrt());
    }

    let mut parseval: f64 = 0.0;
    for _ in 0..10 {
        let frame: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = engine.analyze(&AudioClip::new(frame.clone(), 44_100).unwrap(), 1024).unwrap();
        let m = &spec.magnitude[..513];
        let freq = m[0].powi(2) + m[512].powi(2) + 2.0 * m[1..512].iter().map(|v| v * v).sum::<f64>();
        let time = 1024.0 * frame.iter().zip(engine.window()).map(|(a, w)| (a * w).powi(2)).sum::<f64>();
        parseval = parseval.max((freq - time).abs() / time);
    }

    let span_ms = StftConfig::default().context_span_s(44_100).unwrap() * 1000.0;
    let ok = worst <= 1e-6 && parseval <= 1e-9 && span_ms.round() == 743.0;
    verdict(
        3,
        "STFT",
        ok,
        &format!("round trip {worst:.2e}, Parseval {parseval:.2e}, context {span_ms:.2} ms"),
    );
}

// ---------------------------------------------------------------- criterion 4

fn energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn ls_projection(est: &[f64], refs: &[&[f64]], taps: usize) -> Vec<f64> {
    let rows = est.len() + taps - 1;
    let mut a = DMatrix::<f64>::zeros(rows, refs.len() * taps);
    for (j, r) in refs.iter().enumerate() {
        for d in 0..taps {
            for (t, v) in r.iter().enumerate() {
                a[(t + d, j * taps + d)] = *v;
            }
        }
    }
    let mut b = DVector::<f64>::zeros(rows);
    for (t, v) in est.iter().enumerate() {
        b[t] = *v;
    }
    let coef = a.clone().svd(true, true).solve(&b, 1e-12).unwrap();
    (a * coef).iter().copied().collect()
}

fn permutation_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let u = |ga: &[f64], gb: &[f64]| -> f64 {
        ga.iter()
            .map(|x| gb.iter().map(|y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }).sum::<f64>())
            .sum()
    };
    let observed = u(a, b);
    let (mut le, mut ge, mut total) = (0.0, 0.0, 0.0);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let ga: Vec<f64> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| pooled[i]).collect();
        let gb: Vec<f64> = (0..n).filter(|i| mask & (1 << i) == 0).map(|i| pooled[i]).collect();
        let v = u(&ga, &gb);
        total += 1.0;
        le += f64::from(u8::from(v <= observed + 1e-9));
        ge += f64::from(u8::from(v >= observed - 1e-9));
    }
    (2.0 * f64::min(le, ge) / total).min(1.0)
}

#[test]
fn criterion_4_bss_metrics_and_rank_test() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (len, taps) = (8000, 32);
    let mut draw = |n| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let r0 = draw(len);
    let r1 = draw(len);
    let jitter = draw(len);
    let est: Vec<f64> = (0..len).map(|i| 0.6 * r0[i] + 0.3 * r1[i] + 0.2 * jitter[i]).collect();
    let refs = vec![r0.clone(), r1.clone()];
    let d = bss_decompose(&est, &refs, 0, taps).unwrap();
    let target = ls_projection(&est, &[&r0], taps);
    let all = ls_projection(&est, &[&r0, &r1], taps);
    let interf: Vec<f64> = all.iter().zip(&target).map(|(a, b)| a - b).collect();
    let mut padded = est.clone();
    padded.resize(len + taps - 1, 0.0);
    let artif: Vec<f64> = padded.iter().zip(&all).map(|(a, b)| a - b).collect();
    let scale = energy(&est);
    let mut bss_err: f64 = 0.0;
    for (got, want) in [(&d.s_target, &target), (&d.e_interf, &interf), (&d.e_artif, &artif)] {
        let diff: f64 = got.iter().zip(want.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        bss_err = bss_err.max(diff / scale);
    }

    let base = compute_metrics(&d).sdr;
    let mut scale_err: f64 = 0.0;
    for g in [1e-3, 0.5, 7.0, 1e3] {
        let scaled: Vec<f64> = est.iter().map(|v| v * g).collect();
        let sdr = compute_metrics(&bss_decompose(&scaled, &refs, 0, taps).unwrap()).sdr;
        scale_err = scale_err.max((sdr - base).abs());
    }

    let mut mwu_err: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for na in 1..=6 {
        for nb in 1..=6 {
            for trial in 0..4 {
                let mut v = |n: usize| -> Vec<f64> {
                    (0..n)
                        .map(|_| if trial % 2 == 0 { rng.random_range(0..4) as f64 } else { rng.random_range(-5.0..5.0) })
                        .collect()
                };
                let (a, b) = (v(na), v(nb));
                let r = mann_whitney_u(&a, &b, 0.05).unwrap();
                mwu_err = mwu_err.max((r.p_value - permutation_p(&a, &b)).abs());
            }
        }
    }
    let ok = bss_err <= 1e-6 && scale_err <= 1e-9 && mwu_err <= 1e-12;
    verdict(
        4,
        "evaluation",
        ok,
        &format!("decomposition {bss_err:.2e}, SDR scale drift {scale_err:.2e} dB, rank test {mwu_err:.2e}"),
    );
}

// ---------------------------------------------------------------- criterion 5

fn small_stft() -> StftConfig {
    StftConfig {
        frame_size: 16,
        hop: 8,
        context: 4,
        context_hop: 4,
    }
}

fn small_corpus() -> SpectralCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bins = small_stft().bins();
    let tracks = (0..3)
        .map(|t| {
            let frames = 6 + t;
            let a: Vec<f64> = (0..frames * bins).map(|_| rng.random_range(0.0..2.0)).collect();
            let b: Vec<f64> = (0..frames * bins).map(|_| rng.random_range(0.0..1.0)).collect();
            TrackSpectra {
                name: format!("t{t}"),
                frames,
                mixture: a.iter().zip(&b).map(|(x, y)| x + y).collect(),
                sources: vec![Some(a), Some(b)],
            }
        })
        .collect();
    SpectralCorpus {
        stft: small_stft(),
        source_names: vec!["a".into(), "b".into()],
        tracks,
        source_scale: SourceScale::Mixture,
    }
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig {
        batch_size: 3,
        i_critic: 4,
        max_steps: 5,
        seed: 11,
        checkpoint_every: 0,
        source_names: vec!["a".into(), "b".into()],
        binary_target: "a".into(),
        model: ModelSpec::Compact,
        stft: small_stft(),
        ..TrainConfig::default()
    };
    c.loss_weights.alpha = vec![0.4, 0.6];
    c
}

#[test]
fn criterion_5_training_schedule_and_reproducibility() {
    let data = small_corpus();
    let cfg = small_config();
    let mut s = TrainState::new(&cfg).unwrap();
    let mut ok = true;
    for k in 1..=5u64 {
        train_step(&mut s, &data).unwrap();
        ok &= s.separator_updates == k && s.critic_updates == k * cfg.i_critic as u64;
    }
    let counts = ok;

    let mut s = TrainState::new(&cfg).unwrap();
    for _ in 0..100 {
        let (sep, crit) = (s.separator_digest(), s.critics_digest());
        generator_update(&mut s, &data).unwrap();
        ok &= s.critics_digest() == crit && s.separator_digest() != sep;
        let sep = s.separator_digest();
        critic_update(&mut s, &data).unwrap();
        ok &= s.separator_digest() == sep;
    }
    let isolated = ok;

    let mut a = TrainState::new(&cfg).unwrap();
    for _ in 0..3 {
        train_step(&mut a, &data).unwrap();
    }
    let bytes = checkpoint_container(&a).encode();
    let mut b = decode_checkpoint(&bytes).unwrap();
    ok &= checkpoint_container(&b).encode() == bytes;
    for _ in 0..3 {
        ok &= train_step(&mut a, &data).unwrap() == train_step(&mut b, &data).unwrap();
    }
    ok &= checkpoint_container(&a).encode() == checkpoint_container(&b).encode();
    let exact = ok;

    let (r1, _) = run_training(&cfg, &data, None).unwrap();
    let (r2, _) = run_training(&cfg, &data, None).unwrap();
    ok &= checkpoint_container(&r1).encode() == checkpoint_container(&r2).encode();
    verdict(
        5,
        "training loop",
        ok,
        &format!("update counts {counts}, isolation {isolated}, checkpoint {exact}, reproducible {ok}"),
    );
}

// ------------------------------------------------------------ criteria 6 and 7

struct ToyRun {
    mode: Ablation,
    state: TrainState,
    report: TrainReport,
    model_sdr: f64,
    mixture_sdr: f64,
    elapsed: Duration,
}

struct ToyResults {
    config: RunConfig,
    runs: Vec<ToyRun>,
}

fn toy_config() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    parse_run_config(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn toy_results() -> &'static ToyResults {
    static RESULTS: OnceLock<ToyResults> = OnceLock::new();
    RESULTS.get_or_init(|| {
        let config = toy_config();
        let dir = tempfile::tempdir().unwrap();
        for spec in config.toy.specs(&config.corpus.train_split, &config.corpus.test_split).unwrap() {
            generate_toy_corpus(&spec, dir.path()).unwrap();
        }
        let layout = LayoutSpec::default();
        let train_index = index_corpus(dir.path(), &config.corpus.train_split, &layout).unwrap();
        let test_index = index_corpus(dir.path(), &config.corpus.test_split, &layout).unwrap();
        let runs = [Ablation::Full, Ablation::GanOnly, Ablation::EnergyOnly]
            .into_iter()
            .map(|mode| {
                let cfg = configure_ablation(&config.train, mode).unwrap();
                let corpus =
                    SpectralCorpus::load(&train_index, &cfg.stft, cfg.source_groups.as_ref(), cfg.source_scale).unwrap();
                let start = Instant::now();
                let (state, report) = run_training(&cfg, &corpus, None).unwrap();
                let elapsed = start.elapsed();
                let metrics = evaluate_checkpoint(&state, &test_index, &config.eval).unwrap();
                ToyRun {
                    mode,
                    state,
                    report,
                    model_sdr: metrics.mean_over_sources(METHOD_MODEL, "sdr").unwrap(),
                    mixture_sdr: metrics.mean_over_sources(METHOD_MIXTURE, "sdr").unwrap(),
                    elapsed,
                }
            })
            .collect();
        ToyResults { config, runs }
    })
}

fn run(results: &ToyResults, mode: Ablation) -> &ToyRun {
    results.runs.iter().find(|r| r.mode == mode).unwrap()
}

#[test]
fn criterion_6_toy_separation_beats_baseline_and_ablations() {
    let r = toy_results();
    let full = run(r, Ablation::Full);
    let gan = run(r, Ablation::GanOnly);
    let energy = run(r, Ablation::EnergyOnly);
    let steps = r.config.train.max_steps;
    let elapsed: Duration = r.runs.iter().map(|x| x.elapsed).sum();
    let ok = full.model_sdr >= full.mixture_sdr + 3.0
        && full.model_sdr > gan.model_sdr
        && full.model_sdr > energy.model_sdr
        && steps <= 20_000
        && full.elapsed <= Duration::from_secs(2 * 3600);
    verdict(
        6,
        "toy separation",
        ok,
        &format!(
            "mean SDR full {:.2} dB, mixture baseline {:.2} dB, gan_only {:.2} dB, energy_only {:.2} dB; {steps} steps, {:.0} s for all three runs",
            full.model_sdr,
            full.mixture_sdr,
            gan.model_sdr,
            energy.model_sdr,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_energy_convergence_and_critic_gradient_norms() {
    let full = run(toy_results(), Ablation::Full);
    let rep = &full.report;
    let (start, end) = (rep.energy_ma_step50.unwrap_or(f64::NAN), rep.energy_ma_final.unwrap_or(f64::NAN));
    let median = rep.critic_grad_norms.median;
    let ok = end * 10.0 <= start && (0.5..=1.5).contains(&median);
    verdict(
        7,
        "training dynamics",
        ok,
        &format!("energy moving average {start:.4} -> {end:.4}, critic gradient-norm median {median:.3}"),
    );
}

#[test]
fn trained_toy_model_routes_a_pure_tone_to_the_tone_channel() {
    let r = toy_results();
    let full = run(r, Ablation::Full);
    let cfg = &full.state.config;
    let sr = cfg.sample_rate as f64;
    let samples: Vec<f64> = (0..sr as usize * 2)
        .map(|t| {
            let ph = 2.0 * std::f64::consts::PI * 300.0 * t as f64 / sr;
            0.5 * ph.sin() + 0.25 * (2.0 * ph).sin() + 0.125 * (3.0 * ph).sin()
        })
        .collect();
    let engine = StftEngine::new(cfg.stft.frame_size);
    let track = engine.analyze(&AudioClip::new(samples, cfg.sample_rate).unwrap(), cfg.stft.hop).unwrap();
    let contexts: Vec<_> = weaksep_core::signal::split_contexts(&track, &cfg.stft)
        .iter()
        .map(weaksep_core::signal::normalize_unit)
        .collect();
    let batch = SpecBatch::stack(cfg.stft.context, cfg.stft.bins(), contexts.iter().map(|c| c.magnitude.as_slice())).unwrap();
    let outs = full.state.model.separator.separate(&batch, Noise::Zero).unwrap();
    let energies: Vec<f64> = outs.iter().map(|o| o.data.iter().map(|v| v * v).sum()).collect();
    let tone = cfg.source_names.iter().position(|n| *n == cfg.binary_target).unwrap();
    let share = energies[tone] / energies.iter().sum::<f64>();
    assert!(share >= 0.9, "tone channel holds {share:.3} of the output energy");
}
