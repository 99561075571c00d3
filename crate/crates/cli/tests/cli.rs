use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use weaksep_core::signal::AudioClip;
use weaksep_core::wav::{read_wav_mono, write_wav_mono, WavEncoding};

const TINY: &str = r#"
[toy]
tracks = 2
test_tracks = 2
duration_s = 1.0
sample_rate = 8000
seed = 3

[train]
batch_size = 2
i_critic = 2
max_steps = 3
checkpoint_every = 0
source_names = ["tone", "noise"]
sample_rate = 8000
binary_target = "tone"
model = "compact"
noise_std = 0.1

[train.loss_weights]
alpha = [0.4, 0.6]

[train.stft]
frame_size = 128
hop = 64
context = 16
context_hop = 16

[eval]
taps = 16
"#;

fn weaksep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weaksep"))
        .args(args)
        .arg("--log-level")
        .arg("warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    corpus: PathBuf,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let corpus = dir.path().join("corpus");
    ok(&weaksep(&["--config", s(&config), "--out", s(&corpus), "make-toy-data"]));
    Fixture { dir, config, corpus }
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, run: &str, extra: &[&str]) -> Output {
        let out = self.path(run);
        let mut args = vec!["--config", s(&self.config), "--out", s(&out), "train", "--corpus", s(&self.corpus)];
        args.extend_from_slice(extra);
        weaksep(&args)
    }
}

fn fingerprint(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("corpus fingerprint "))
        .expect("fingerprint line")
        .to_string()
}

#[test]
fn toy_data_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = ["make-toy-data", "--tracks", "2", "--test-tracks", "1", "--duration", "0.5", "--sources", "tone,noise", "--seed", "7"];
    let fa = fingerprint(&ok(&weaksep(&[&["--out", s(&a)], &args[..]].concat())));
    let fb = fingerprint(&ok(&weaksep(&[&["--out", s(&b)], &args[..]].concat())));
    assert_eq!(fa, fb);
    assert!(a.join("dev/track000/tone.wav").is_file());
    assert!(a.join("test/track000/noise.wav").is_file());
    assert!(a.join("manifest.json").is_file());
    let other = fingerprint(&ok(&weaksep(&[
        "--out",
        s(&dir.path().join("c")),
        "make-toy-data",
        "--tracks",
        "2",
        "--test-tracks",
        "1",
        "--duration",
        "0.5",
        "--seed",
        "8",
    ])));
    assert_ne!(fa, other);
}

#[test]
fn zero_tracks_is_a_usage_error() {
    let out = weaksep(&["make-toy-data", "--tracks", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = weaksep(&["--config", s(&cfg), "train", "--corpus", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn zero_step_training_writes_initial_checkpoint() {
    let f = fixture();
    let stdout = ok(&f.train("run0", &["--max-steps", "0"]));
    assert!(stdout.contains("trained 0 steps"));
    assert!(f.path("run0/final.ckpt").is_file());
    assert!(f.path("run0/manifest.json").is_file());
}

#[test]
fn seeded_training_is_reproducible_and_ablation_reaches_manifest() {
    let f = fixture();
    ok(&f.train("a", &["--seed", "1"]));
    ok(&f.train("b", &["--seed", "1"]));
    let a = std::fs::read(f.path("a/final.ckpt")).unwrap();
    let b = std::fs::read(f.path("b/final.ckpt")).unwrap();
    assert_eq!(a, b);

    let stdout = ok(&f.train("gan", &["--ablation", "gan_only", "--max-steps", "1"]));
    assert!(stdout.contains("energy"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("gan/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["loss_weights"]["beta_energy"], 0.0);
    assert_eq!(manifest["config"]["train"]["ablation"], "gan_only");
    assert!(manifest["corpus_fingerprint"].as_str().unwrap().len() == 64);
}

#[test]
fn numerical_failure_exits_with_three() {
    let f = fixture();
    let cfg = f.path("explode.toml");
    std::fs::write(&cfg, format!("{TINY}\n[train.adam]\nlr = 1e300\n")).unwrap();
    let out = weaksep(&[
        "--config",
        s(&cfg),
        "--out",
        s(&f.path("boom")),
        "train",
        "--corpus",
        s(&f.corpus),
        "--max-steps",
        "20",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains(".ckpt"));
}

#[test]
fn separate_writes_one_file_per_source() {
    let f = fixture();
    ok(&f.train("run", &["--max-steps", "1"]));
    let input = f.corpus.join("test/track000/mixture.wav");
    let sep = f.path("sep");
    let stdout = ok(&weaksep(&[
        "--out",
        s(&sep),
        "separate",
        "--checkpoint",
        s(&f.path("run")),
        "--input",
        s(&input),
    ]));
    assert!(stdout.contains("relative L2 gap"));
    let len = read_wav_mono(&input).unwrap().len();
    for name in ["tone", "noise"] {
        assert_eq!(read_wav_mono(&sep.join(format!("{name}.wav"))).unwrap().len(), len);
    }

    let silent = f.path("silent.wav");
    write_wav_mono(&silent, &AudioClip::new(vec![0.0; 3000], 8000).unwrap(), WavEncoding::Pcm16).unwrap();
    let quiet = f.path("quiet");
    ok(&weaksep(&["--out", s(&quiet), "separate", "--checkpoint", s(&f.path("run")), "--input", s(&silent)]));
    for name in ["tone", "noise"] {
        let c = read_wav_mono(&quiet.join(format!("{name}.wav"))).unwrap();
        assert_eq!(c.len(), 3000);
        assert!(c.samples.iter().all(|v| *v == 0.0));
    }

    let other_rate = f.path("fast.wav");
    write_wav_mono(&other_rate, &AudioClip::new(vec![0.1; 4410], 11025).unwrap(), WavEncoding::Pcm16).unwrap();
    let (r, run) = (f.path("r"), f.path("run"));
    let args = ["--out", s(&r), "separate", "--checkpoint", s(&run), "--input", s(&other_rate)];
    assert_eq!(weaksep(&args).status.code(), Some(2));
    ok(&weaksep(&[&args[..], &["--resample"]].concat()));
    assert_eq!(read_wav_mono(&f.path("r/tone.wav")).unwrap().len(), 4410);
}

#[test]
fn evaluate_reports_compares_and_plots() {
    let f = fixture();
    ok(&f.train("run", &["--max-steps", "1"]));
    let ev = f.path("ev");
    let stdout = ok(&weaksep(&[
        "--config",
        s(&f.config),
        "--out",
        s(&ev),
        "--jobs",
        "1",
        "evaluate",
        "--checkpoint",
        s(&f.path("run/final.ckpt")),
        "--corpus",
        s(&f.corpus),
        "--plot",
    ]));
    assert!(stdout.contains("2 tracks evaluated"));
    let csv = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    // header plus model and mixture rows for two tracks and two sources
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    for m in ["sdr", "sir", "sar", "isr"] {
        assert!(ev.join(format!("plots/{m}.svg")).is_file());
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["evaluated_tracks"].as_array().unwrap().len(), 2);

    let list = f.path("subset.txt");
    std::fs::write(&list, "# one track\ntrack001\n").unwrap();
    let ev2 = f.path("ev2");
    let stdout = ok(&weaksep(&[
        "--config",
        s(&f.config),
        "--out",
        s(&ev2),
        "evaluate",
        "--checkpoint",
        s(&f.path("run")),
        "--corpus",
        s(&f.corpus),
        "--tracks-list",
        s(&list),
        "--compare",
        s(&ev.join("metrics.csv")),
    ]));
    assert!(stdout.contains("1 tracks evaluated"));
    assert!(stdout.contains("compare tone sdr"));

    let ev3 = f.path("ev3");
    let stdout = ok(&weaksep(&[
        "--config",
        s(&f.config),
        "--out",
        s(&ev3),
        "evaluate",
        "--checkpoint",
        s(&f.path("run")),
        "--corpus",
        s(&f.corpus),
        "--compare",
        s(&ev.join("metrics.csv")),
    ]));
    let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("compare ")).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l.ends_with("not significant at 5%")), "{stdout}");
}

#[test]
fn evaluate_without_stems_is_a_usage_error() {
    let f = fixture();
    ok(&f.train("run", &["--max-steps", "0"]));
    let bare = f.path("bare/test/song");
    std::fs::create_dir_all(&bare).unwrap();
    std::fs::copy(f.corpus.join("test/track000/mixture.wav"), bare.join("mixture.wav")).unwrap();
    let out = weaksep(&[
        "--out",
        s(&f.path("ev")),
        "evaluate",
        "--checkpoint",
        s(&f.path("run")),
        "--corpus",
        s(&f.path("bare")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
