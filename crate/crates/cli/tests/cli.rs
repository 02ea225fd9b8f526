use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use disentangle_core::checkpoint::Checkpoint;
use disentangle_core::config::RunConfig;
use disentangle_core::data::{Corpus, NormStats};
use disentangle_core::train::{load_model, train_data, Trainer};

const SMALL_DATA: &str = "data.train = 120\ndata.dev = 24\ndata.test = 96\n";

const SMALL_MODEL: &str = "
model.recon_mode = sum
model.content_dim = 8
model.content_layers = 3
model.content_width = 8
model.style_layers = 3
model.style_width = 8
model.style_stride_layers = 1,2,3
model.decoder_layers = 3
model.decoder_width = 8
model.decoder_concat_layers = 1,3
model.scorer_hidden = 8
train.batch_size = 4
eval.probe_steps = 40
eval.scratch_steps = 3
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_disentangle"));
    c.env_remove("DISENTANGLE_SEED").env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(f.path("spec.cfg"), SMALL_DATA).unwrap();
        fs::write(f.path("model.cfg"), SMALL_MODEL).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, out: &str, extra: &[&str]) -> Output {
        run(bin()
            .arg("gen-data")
            .arg("--spec")
            .arg(self.path("spec.cfg"))
            .arg("--out")
            .arg(self.path(out))
            .args(extra))
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        run(bin()
            .arg("train")
            .arg("--config")
            .arg(self.path("model.cfg"))
            .arg("--data")
            .arg(self.path("data"))
            .arg("--out")
            .arg(self.path(out))
            .args(extra))
    }

    fn with_data(self) -> Self {
        let o = self.gen("data", &["--seed", "1"]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        self
    }
}

fn metrics_steps(path: &Path) -> Vec<u64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn grad_check_passes_and_covers_every_path() {
    let o = run(bin().args(["grad-check", "--size", "tiny"]));
    let out = text(&o);
    assert_eq!(code(&o), 0, "{out}");
    for label in ["L_REC", "L_VQ", "L_KL", "I_NCE"] {
        let line = out
            .lines()
            .find(|l| l.starts_with(label))
            .unwrap_or_else(|| panic!("{label} missing:\n{out}"));
        assert!(line.ends_with("PASS"), "{line}");
    }
}

#[test]
fn grad_check_flags_the_corrupted_path() {
    let o = run(bin().args(["grad-check", "--corrupt", "I_NCE"]));
    let out = text(&o);
    assert_eq!(code(&o), 3, "{out}");
    let line = out.lines().find(|l| l.starts_with("I_NCE")).unwrap();
    assert!(line.ends_with("FAIL"), "{line}");
    assert!(out
        .lines()
        .find(|l| l.starts_with("L_KL"))
        .unwrap()
        .ends_with("PASS"));
}

#[test]
fn same_seed_gives_same_manifest() {
    let f = Fixture::new();
    assert_eq!(code(&f.gen("a", &["--seed", "4"])), 0);
    assert_eq!(code(&f.gen("b", &["--seed", "4"])), 0);
    assert_eq!(code(&f.gen("c", &["--seed", "5"])), 0);
    let m = |d: &str| fs::read(f.path(d).join("manifest.csv")).unwrap();
    assert_eq!(m("a"), m("b"));
    assert_ne!(m("a"), m("c"));
    for name in ["norm_stats.csv", "alignments.csv", "corpus.cfg"] {
        assert!(f.path("a").join(name).exists(), "{name}");
    }
}

#[test]
fn seed_env_is_a_fallback_and_the_flag_wins() {
    let f = Fixture::new();
    let gen = |out: &str, flag: Option<&str>| {
        let mut c = bin();
        c.env("DISENTANGLE_SEED", "9")
            .args(["gen-data", "--spec"])
            .arg(f.path("spec.cfg"))
            .arg("--out")
            .arg(f.path(out));
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        assert_eq!(code(&run(&mut c)), 0);
        fs::read_to_string(f.path(out).join("corpus.cfg")).unwrap()
    };
    assert!(gen("env", None).contains("data.seed = 9"));
    assert!(gen("flag", Some("2")).contains("data.seed = 2"));
}

#[test]
fn omitted_spec_uses_and_echoes_defaults() {
    let f = Fixture::new();
    let o = run(bin().arg("gen-data").arg("--out").arg(f.path("d")));
    assert_eq!(code(&o), 0, "{}", text(&o));
    let defaults = RunConfig::default().section_text("data.");
    assert!(text(&o).contains(&defaults));
    assert_eq!(
        fs::read_to_string(f.path("d").join("corpus.cfg")).unwrap(),
        defaults
    );
}

#[test]
fn invalid_spec_names_the_field() {
    let f = Fixture::new();
    fs::write(f.path("bad.cfg"), "data.styles = 0\n").unwrap();
    let o = run(bin()
        .args(["gen-data", "--spec"])
        .arg(f.path("bad.cfg"))
        .arg("--out")
        .arg(f.path("d")));
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("data.styles"), "{}", text(&o));
    assert!(!f.path("d").exists());

    fs::write(f.path("typo.cfg"), "data.stlyes = 3\n").unwrap();
    let o = run(bin()
        .args(["gen-data", "--spec"])
        .arg(f.path("typo.cfg"))
        .arg("--out")
        .arg(f.path("d")));
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("data.stlyes"), "{}", text(&o));
}

#[test]
fn non_empty_output_needs_force() {
    let f = Fixture::new();
    fs::create_dir_all(f.path("d")).unwrap();
    fs::write(f.path("d/keep.txt"), "x").unwrap();
    let o = f.gen("d", &[]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("--force"));
    assert!(!f.path("d/manifest.csv").exists());
    assert_eq!(code(&f.gen("d", &["--force"])), 0);
    assert!(f.path("d/manifest.csv").exists());
}

#[test]
fn train_echoes_flags_and_logs_zero_nce_without_mi() {
    let f = Fixture::new().with_data();
    let o = f.train(
        "run",
        &["--mi-loss=off", "--codebook-size", "64", "--steps", "6"],
    );
    assert_eq!(code(&o), 0, "{}", text(&o));
    let echo = fs::read_to_string(f.path("run/config.txt")).unwrap();
    assert!(echo.contains("model.codebook_size = 64"), "{echo}");
    assert!(echo.contains("train.mi_loss = off"), "{echo}");
    let csv = fs::read_to_string(f.path("run/metrics.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "i_nce").unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert_eq!(r.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn zero_steps_writes_the_initialization() {
    let f = Fixture::new().with_data();
    let o = f.train("run", &["--steps", "0", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let ck = Checkpoint::load(&f.path("run/checkpoint.ckpt")).unwrap();
    let (config, model) = load_model(&ck).unwrap();
    assert_eq!(config.train.seed, 3);
    let corpus = Corpus::load_dir(&f.path("data"), config.data.spec.clone()).unwrap();
    let stats = NormStats::from_corpus(&corpus).unwrap();
    let fresh = Trainer::new(config, train_data(&corpus, &stats).unwrap()).unwrap();
    assert_eq!(model.params, fresh.model.params);
    assert_eq!(metrics_steps(&f.path("run/metrics.csv")), Vec::<u64>::new());
}

#[test]
fn resume_continues_the_step_count() {
    let f = Fixture::new().with_data();
    assert_eq!(code(&f.train("run", &["--steps", "4"])), 0);
    let o = run(bin()
        .arg("train")
        .arg("--data")
        .arg(f.path("data"))
        .arg("--out")
        .arg(f.path("run"))
        .args(["--steps", "9", "--resume"]));
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(
        metrics_steps(&f.path("run/metrics.csv")),
        (1..=9).collect::<Vec<u64>>()
    );

    assert_eq!(code(&f.train("straight", &["--steps", "9"])), 0);
    assert_eq!(
        fs::read(f.path("run/checkpoint.ckpt")).unwrap(),
        fs::read(f.path("straight/checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn resume_from_another_trajectory_is_refused() {
    let f = Fixture::new().with_data();
    assert_eq!(code(&f.train("run", &["--steps", "3"])), 0);
    let o = f.train("run", &["--steps", "6", "--resume", "--codebook-size", "8"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

#[test]
fn non_finite_abort_has_its_own_exit_code() {
    let f = Fixture::new().with_data();
    let o = f.train(
        "run",
        &[
            "--steps",
            "50",
            "--set",
            "train.lr=1e200",
            "--set",
            "train.max_bad_steps=0",
        ],
    );
    assert_eq!(code(&o), 3, "{}", text(&o));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let f = Fixture::new().with_data();
    let o = f.train("run", &["--set", "train.stpes=3"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("train.stpes"));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let f = Fixture::new();
    let o = f.train("run", &["--steps", "1"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn eval_protocols_write_reports() {
    let f = Fixture::new().with_data();
    assert_eq!(
        code(&f.train("mi", &["--steps", "5", "--mi-loss", "on"])),
        0
    );
    assert_eq!(
        code(&f.train("nomi", &["--steps", "5", "--mi-loss", "off"])),
        0
    );
    let eval = |protocol: &str, ckpts: &[&str]| {
        let mut c = bin();
        c.arg("eval")
            .arg("--data")
            .arg(f.path("data"))
            .args(["--protocol", protocol]);
        c.arg("--checkpoint");
        for k in ckpts {
            c.arg(f.path(k).join("checkpoint.ckpt"));
        }
        run(&mut c)
    };

    let o = eval("content", &["mi"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("no-shuffle SER"));
    assert!(text(&o).contains("\nshuffle SER"));
    let csv = fs::read_to_string(f.path("mi/content_eval.csv")).unwrap();
    assert!(csv.starts_with("# config_sha256="));
    assert!(csv.contains("utt_id,donor_id,no_shuffle_ser,shuffle_ser"));

    let o = eval("style", &["mi"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(fs::read_to_string(f.path("mi/style_rank.csv"))
        .unwrap()
        .contains("# target_top1="));

    let o = eval("leakage", &["mi"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(f.path("mi/leakage.csv").exists());

    let o = eval("fewshot", &["nomi", "mi"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let csv = fs::read_to_string(f.path("nomi/few_shot.csv")).unwrap();
    let rows: Vec<&str> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    let scenarios: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(scenarios, ["scratch", "no-mi", "mi"]);
}

#[test]
fn unknown_protocol_lists_valid_values() {
    let f = Fixture::new();
    let o = run(bin()
        .args(["eval", "--checkpoint", "x.ckpt", "--data"])
        .arg(f.path("data"))
        .args(["--protocol", "speed"]));
    assert_eq!(code(&o), 1);
    let out = text(&o);
    for p in ["content", "style", "fewshot", "leakage"] {
        assert!(out.contains(p), "{out}");
    }
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let f = Fixture::new().with_data();
    assert_eq!(code(&f.train("run", &["--steps", "2"])), 0);
    let p = f.path("run/checkpoint.ckpt");
    let mut bytes = fs::read(&p).unwrap();
    let n = bytes.len();
    bytes[n / 3] ^= 0x40;
    fs::write(&p, bytes).unwrap();
    let o = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&p)
        .arg("--data")
        .arg(f.path("data"))
        .args(["--protocol", "content"]));
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("checksum"), "{}", text(&o));
}
