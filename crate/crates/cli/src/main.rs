use std::env;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use disentangle_core::checkpoint::Checkpoint;
use disentangle_core::config::RunConfig;
use disentangle_core::data::{hex_digest, Corpus, NormStats};
use disentangle_core::error::Error;
use disentangle_core::eval::{
    content_eval, content_probe, few_shot_pretrained, few_shot_scratch, leakage,
    recombine_test_set, style_probe, style_ranking, EvalContext, Report, Scenario, StyleJudge,
};
use disentangle_core::gradcheck::{model_suite, Component, TOLERANCE};
use disentangle_core::tensor::Tensor;
use disentangle_core::train::{train_data, train_run, CHECKPOINT_FILE, METRICS_FILE};

const SEED_ENV: &str = "DISENTANGLE_SEED";
/// Data-section config written next to a generated corpus.
const CORPUS_CONFIG: &str = "corpus.cfg";
const NORM_FILE: &str = "norm_stats.csv";
const CONFIG_ECHO: &str = "config.txt";

#[derive(Parser)]
#[command(
    name = "disentangle",
    version,
    about = "Content/style disentangling autoencoder on a synthetic corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    GenData(GenData),
    /// Train a model on a generated corpus.
    Train(Train),
    /// Run an evaluation protocol on trained checkpoints.
    Eval(Eval),
    /// Finite-difference check of every loss path on a tiny model.
    GradCheck(GradCheck),
}

#[derive(Args)]
struct GenData {
    /// Config file with `data.*` keys; defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Generator seed (falls back to $DISENTANGLE_SEED, then the spec).
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
    /// Extra `data.key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Train {
    /// Config file (`key = value` lines); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long, value_enum)]
    mi_loss: Option<Switch>,
    #[arg(long)]
    steps: Option<u64>,
    /// Training seed (falls back to $DISENTANGLE_SEED, then the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from `<out>/checkpoint.ckpt`.
    #[arg(long)]
    resume: bool,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Content,
    Style,
    Fewshot,
    Leakage,
}

impl Protocol {
    fn file(self) -> &'static str {
        match self {
            Protocol::Content => "content_eval.csv",
            Protocol::Style => "style_rank.csv",
            Protocol::Fewshot => "few_shot.csv",
            Protocol::Leakage => "leakage.csv",
        }
    }
}

#[derive(Args)]
struct Eval {
    /// Checkpoint(s); `fewshot` takes one per pre-trained scenario.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    protocol: Protocol,
    /// Report directory (defaults to the first checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Eval seed (falls back to $DISENTANGLE_SEED, then the checkpoint config).
    #[arg(long)]
    seed: Option<u64>,
    /// `eval.key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Size {
    Tiny,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, value_enum, default_value = "tiny")]
    size: Size,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale one component's analytic gradient by 1.01 (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

/// Error with the process exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl fmt::Display) -> Self {
        Failure {
            code: 1,
            message: message.to_string(),
        }
    }

    fn data(message: impl fmt::Display) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => 1,
            Error::Io(_) | Error::Format { .. } | Error::EvalRefused(_) => 2,
            Error::NonFinite(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Flag, then `$DISENTANGLE_SEED`, then nothing.
fn resolve_seed(flag: Option<u64>) -> Outcome<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn apply_sets(config: &mut RunConfig, sets: &[String], allowed: &[&str]) -> Outcome {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let k = k.trim();
        if !allowed.iter().any(|p| k.starts_with(p)) {
            return Err(Failure::usage(format!(
                "--set {k} is not allowed here (expected {})",
                allowed.join(" or ")
            )));
        }
        config.set(k, v.trim())?;
    }
    Ok(())
}

fn only_section(text: &str, prefix: &str, what: &Path) -> Outcome {
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !line.starts_with(prefix) {
            return Err(Failure::usage(format!(
                "{}: only {prefix}* keys belong here, found {line:?}",
                what.display()
            )));
        }
    }
    Ok(())
}

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

fn gen_data(a: GenData) -> Outcome {
    let mut config = RunConfig::default();
    match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            only_section(&text, "data.", path)?;
            config.apply_text(&text)?;
        }
        None => println!("no --spec given; using the default corpus spec"),
    }
    apply_sets(&mut config, &a.set, &["data."])?;
    if let Some(seed) = resolve_seed(a.seed)? {
        config.data.spec.seed = seed;
    }
    config.data.spec.validate()?;
    if a.out.exists() && !a.out.is_dir() {
        return Err(Failure::usage(format!(
            "{} exists and is not a directory",
            a.out.display()
        )));
    }
    if is_non_empty_dir(&a.out) && !a.force {
        return Err(Failure::usage(format!(
            "{} is not empty; pass --force to write into it",
            a.out.display()
        )));
    }
    let section = config.section_text("data.");
    print!("{section}");
    fs::create_dir_all(&a.out).map_err(|e| Failure::data(format!("{}: {e}", a.out.display())))?;
    fs::write(a.out.join(CORPUS_CONFIG), &section).map_err(Failure::data)?;
    let d = &config.data;
    let corpus = Corpus::generate(d.spec.clone(), d.counts, d.holdout_styles)?;
    corpus.write_dir(&a.out).map_err(Failure::data)?;
    println!(
        "wrote {} utterances to {}; manifest sha256 {}",
        corpus.utterances.len(),
        a.out.display(),
        corpus.manifest_hash()
    );
    Ok(())
}

struct LoadedData {
    corpus: Corpus,
    stats: NormStats,
}

/// Data-section config stored with a corpus.
fn corpus_config(dir: &Path) -> Outcome<String> {
    let path = dir.join(CORPUS_CONFIG);
    let text =
        fs::read_to_string(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    only_section(&text, "data.", &path).map_err(|f| Failure::data(f.message))?;
    Ok(text)
}

fn load_data(dir: &Path, config: &RunConfig) -> Outcome<LoadedData> {
    let corpus = Corpus::load_dir(dir, config.data.spec.clone())
        .map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    let stats = NormStats::read_csv(&dir.join(NORM_FILE)).map_err(Failure::data)?;
    if stats.mean.len() != config.model.feature_dim {
        return Err(Failure::data(format!(
            "{NORM_FILE} has {} features, the model expects {}",
            stats.mean.len(),
            config.model.feature_dim
        )));
    }
    Ok(LoadedData { corpus, stats })
}

fn train(a: Train) -> Outcome {
    let ck_path = a.out.join(CHECKPOINT_FILE);
    let mut config = if a.resume {
        let ck = Checkpoint::load(&ck_path)?;
        RunConfig::from_text(&ck.config)?
    } else {
        RunConfig::default()
    };
    if let Some(path) = &a.config {
        config = RunConfig::from_file(path).map_err(Failure::usage)?;
    }
    config.apply_text(&corpus_config(&a.data)?)?;
    apply_sets(&mut config, &a.set, &["model.", "train.", "eval."])?;
    if let Some(k) = a.codebook_size {
        config.model.codebook_size = k;
    }
    if let Some(m) = a.mi_loss {
        config.train.mi_loss = m == Switch::On;
    }
    if let Some(s) = a.steps {
        config.train.steps = s;
    }
    if let Some(seed) = resolve_seed(a.seed)? {
        config.train.seed = seed;
    }
    config.validate()?;

    fs::create_dir_all(&a.out).map_err(|e| Failure::data(format!("{}: {e}", a.out.display())))?;
    config.write(&a.out.join(CONFIG_ECHO))?;
    print!("{}", config.to_text());

    let loaded = load_data(&a.data, &config)?;
    let data = train_data(&loaded.corpus, &loaded.stats)?;
    let trainer = train_run(config, data, &a.out, a.resume)?;
    println!(
        "trained to step {}; checkpoint {}, metrics {}",
        trainer.step,
        ck_path.display(),
        a.out.join(METRICS_FILE).display()
    );
    Ok(())
}

fn eval(a: Eval) -> Outcome {
    if a.protocol != Protocol::Fewshot && a.checkpoint.len() > 1 {
        return Err(Failure::usage(
            "only the fewshot protocol takes several checkpoints",
        ));
    }
    let mut models = Vec::new();
    for path in &a.checkpoint {
        let ck = Checkpoint::load(path)?;
        let (config, model) = disentangle_core::train::load_model(&ck)?;
        models.push((path.clone(), hex_digest(&config.hash()), config, model));
    }
    let mut config = models[0].2.clone();
    apply_sets(&mut config, &a.set, &["eval."])?;
    if let Some(seed) = resolve_seed(a.seed)? {
        config.eval.seed = seed;
    }
    config.validate()?;
    let stored = RunConfig::from_text(&corpus_config(&a.data)?)?;
    if stored.data.spec != config.data.spec {
        return Err(Failure::data(format!(
            "{} was generated with a different spec than the checkpoint was trained on",
            a.data.display()
        )));
    }
    let loaded = load_data(&a.data, &config)?;
    let ctx = EvalContext {
        corpus: &loaded.corpus,
        stats: &loaded.stats,
        config: &config.eval,
    };
    let out_dir = match &a.out {
        Some(d) => d.clone(),
        None => a.checkpoint[0]
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::data(format!("{}: {e}", out_dir.display())))?;

    let (_, hash, _, model) = &models[0];
    let base = |columns: &[&str]| {
        Report::new(columns)
            .meta("config_sha256", hash)
            .meta("checkpoint", a.checkpoint[0].display())
            .meta("eval_seed", config.eval.seed)
            .meta("manifest_sha256", loaded.corpus.manifest_hash())
    };
    let report = match a.protocol {
        Protocol::Content => {
            let rec = recombine_test_set(model, &ctx)?;
            let r = content_eval(&ctx, &rec)?;
            println!("no-shuffle SER {:.4}", r.no_shuffle_ser);
            println!("shuffle SER {:.4}", r.shuffle_ser);
            let mut rep = base(&["utt_id", "donor_id", "no_shuffle_ser", "shuffle_ser"])
                .meta("no_shuffle_ser", r.no_shuffle_ser)
                .meta("shuffle_ser", r.shuffle_ser);
            for (u, d, a, b) in r.rows {
                rep.row(vec![u, d, a.to_string(), b.to_string()]);
            }
            rep
        }
        Protocol::Style => {
            let judge = StyleJudge::train(&ctx)?;
            let rec = recombine_test_set(model, &ctx)?;
            let r = style_ranking(&judge, &rec)?;
            let line = |name: &str, x: &disentangle_core::eval::RankingReport| {
                println!(
                    "{name}: average rank {:.3}, top-1 {:.3}, top-3 {:.3}, top-5 {:.3}",
                    x.average_rank, x.top1, x.top3, x.top5
                );
            };
            println!("judge accuracy {:.3}", r.judge_accuracy);
            line("target style", &r.target);
            line("source style", &r.source);
            let mut rep = base(&[
                "utt_id",
                "donor_id",
                "target_style",
                "source_style",
                "target_rank",
                "source_rank",
            ])
            .meta("judge_accuracy", r.judge_accuracy)
            .meta("target_average_rank", r.target.average_rank)
            .meta("target_top1", r.target.top1)
            .meta("target_top3", r.target.top3)
            .meta("target_top5", r.target.top5)
            .meta("source_average_rank", r.source.average_rank)
            .meta("source_top1", r.source.top1)
            .meta("source_top3", r.source.top3)
            .meta("source_top5", r.source.top5);
            for (i, u) in rec.utterances.iter().enumerate() {
                let d = rec.utterances[rec.donors[i]];
                rep.row(vec![
                    u.id.clone(),
                    d.id.clone(),
                    d.style.to_string(),
                    u.style.to_string(),
                    r.target.ranks[i].to_string(),
                    r.source.ranks[i].to_string(),
                ]);
            }
            rep
        }
        Protocol::Leakage => {
            let leak = leakage(model, &ctx)?;
            let style = style_probe(model, &ctx)?;
            let content = content_probe(model, &ctx)?;
            println!("leakage (style probe on content codes) {leak:.4}");
            println!("style probe on style mean {style:.4}");
            println!("content probe on content codes {content:.4}");
            let mut rep = base(&["probe", "accuracy"]);
            rep.row(vec!["style_from_codes".into(), leak.to_string()]);
            rep.row(vec!["style_from_style_mean".into(), style.to_string()]);
            rep.row(vec!["content_from_codes".into(), content.to_string()]);
            rep
        }
        Protocol::Fewshot => {
            let mut rep = base(&["scenario", "checkpoint", "one_shot", "three_shot"]);
            let scratch = |shots| few_shot_scratch(&config, &ctx, shots);
            let (s1, s3) = (scratch(1)?, scratch(3)?);
            println!(
                "{:<8} 1-shot {s1:.4} 3-shot {s3:.4}",
                Scenario::Scratch.to_string()
            );
            rep.row(vec![
                Scenario::Scratch.to_string(),
                "-".into(),
                s1.to_string(),
                s3.to_string(),
            ]);
            for (path, _, c, m) in &models {
                let (p1, p3) = (
                    few_shot_pretrained(m, &ctx, 1)?,
                    few_shot_pretrained(m, &ctx, 3)?,
                );
                let sc = Scenario::of(c);
                println!("{:<8} 1-shot {p1:.4} 3-shot {p3:.4}", sc.to_string());
                rep.row(vec![
                    sc.to_string(),
                    path.display().to_string(),
                    p1.to_string(),
                    p3.to_string(),
                ]);
            }
            rep
        }
    };
    let path = out_dir.join(a.protocol.file());
    report.write(&path).map_err(Failure::data)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn grad_check(a: GradCheck) -> Outcome {
    let Size::Tiny = a.size;
    let corrupt = match &a.corrupt {
        None => None,
        Some(s) => Some(Component::from_label(s).ok_or_else(|| {
            let names: Vec<&str> = Component::ALL.iter().map(|c| c.label()).collect();
            Failure::usage(format!("unknown component {s:?} ({})", names.join("|")))
        })?),
    };
    let bump = |g: &mut [Tensor]| {
        for t in g.iter_mut() {
            for v in t.data_mut() {
                *v *= 1.01;
            }
        }
    };
    let start = std::time::Instant::now();
    let checks = model_suite(
        a.seed,
        corrupt.map(|c| (c, &bump as &dyn Fn(&mut [Tensor]))),
    )?;
    println!(
        "{:<6} {:>14} {:>12}  result",
        "path", "max rel error", "coordinates"
    );
    let mut failed = Vec::new();
    for c in &checks {
        println!(
            "{:<6} {:>14.3e} {:>12}  {}",
            c.component.label(),
            c.report.max_rel_error,
            c.report.coordinates,
            if c.passed() { "PASS" } else { "FAIL" }
        );
        if !c.passed() {
            failed.push(c.component.label());
        }
    }
    println!(
        "tolerance {TOLERANCE:.0e}, {:.2}s",
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!("gradient check failed for {}", failed.join(", ")),
        })
    }
}
