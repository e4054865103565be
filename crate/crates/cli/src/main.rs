use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use imeforge::evalgen::{gen_testset_with, parse_testset, write_testset};
use imeforge::feedback::{read_events, read_samples, write_samples};
use imeforge::lexicon::{parse_user_words, BUNDLED_CORPUS};
use imeforge::reward::{Optimizer, TrainConfig};
use imeforge::{
    acc_binary, acc_rank, build_lattice_with, compute_binary_labels, compute_labels, enumerate_pysegs, evaluate,
    train_ngram, train_reward_model, DecodeConfig, Engine, Extension, FeaturizerConfig, InputMode, KeyLayout,
    KeySequence, Lexicon, Method, NGramConfig, RewardModel, SegmentConfig, Window,
};
use imeforge_service::ServeArgs;

/// Pinyin input engine: segmentation, decoding, evaluation and reward
/// models trained from candidate selections.
#[derive(Debug, Parser)]
#[command(name = "imeforge", version)]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory holding syllables.txt and chars.tsv; bundled when absent.
    #[arg(long, global = true)]
    lexicon_dir: Option<PathBuf>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the n-gram scorer and save it.
    TrainLm(TrainLmArgs),
    /// Print segmentations of a key sequence.
    Segment(SegmentArgs),
    /// Decode a key sequence into ranked candidates (TSV).
    Decode(DecodeArgs),
    /// Generate a test set from corpus sentences.
    NoiseGen(NoiseGenArgs),
    /// Report P@K per input mode over a test set.
    Eval(EvalArgs),
    /// Train a reward model on a labeled TSV.
    RmTrain(RmTrainArgs),
    /// Score a reward model on a labeled TSV.
    RmEval(RmEvalArgs),
    /// Turn a selection log into rank and binary label files.
    ExportLabels(ExportLabelsArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct TrainLmArgs {
    /// One sentence per line; the bundled corpus when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Character n-gram order (1 to 3).
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0.01)]
    add_k: f64,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    keys: String,
    #[arg(long, default_value = "26")]
    layout: KeyLayout,
    /// Most paths to print.
    #[arg(long, default_value_t = 20)]
    limit: usize,
    /// Allow one-edit typo chunks.
    #[arg(long)]
    noise: bool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Saved n-gram model; trains on the bundled corpus when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Correction penalty strength; 0 disables it.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    keys: String,
    #[arg(long, default_value = "26")]
    layout: KeyLayout,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[command(flatten)]
    model: ModelArgs,
    /// Preceding text the candidates should continue.
    #[arg(long)]
    context: Option<String>,
    /// User word list: word<TAB>pin'yin<TAB>boost.
    #[arg(long)]
    user_words: Option<PathBuf>,
    /// Profile tag known to the model; repeatable.
    #[arg(long)]
    profile: Vec<String>,
}

#[derive(Debug, Args)]
struct NoiseGenArgs {
    /// Comma-separated input modes.
    #[arg(long, value_delimiter = ',', default_values = ["perfect", "abbreviated", "random_abbreviated", "noisy"])]
    modes: Vec<InputMode>,
    /// Cases per mode.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value = "26")]
    layout: KeyLayout,
    /// Corruptions per noisy case, each in a different syllable.
    #[arg(long, default_value_t = 1)]
    errors_per_case: usize,
    /// Source sentences; the bundled corpus when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    testset: PathBuf,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5])]
    topk: Vec<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct RmTrainArgs {
    /// Labeled samples: task<TAB>query<TAB>answer<TAB>label.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "sample-wise")]
    method: Method,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    /// Samples per mini-batch; 0 trains on the full set.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Feature hash buckets.
    #[arg(long, default_value_t = 65536)]
    buckets: usize,
    #[arg(long)]
    sgd: bool,
    /// Where to write the model (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Metric {
    Rank,
    Binary,
}

#[derive(Debug, Args)]
struct RmEvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Binary)]
    metric: Metric,
}

#[derive(Debug, Args)]
struct ExportLabelsArgs {
    /// Selection log (JSON lines).
    #[arg(long)]
    log: PathBuf,
    /// Earliest timestamp included (seconds).
    #[arg(long)]
    from: Option<f64>,
    /// Timestamp bound, exclusive.
    #[arg(long)]
    to: Option<f64>,
    /// Receives rank_labels.tsv and binary_labels.tsv.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let lexicon_dir = cli.lexicon_dir.as_deref();
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match cli.command {
        Command::TrainLm(a) => train_lm(&a, lexicon_dir)?,
        Command::Segment(a) => segment(&a, lexicon_dir, &mut out)?,
        Command::Decode(a) => decode(&a, lexicon_dir, &mut out)?,
        Command::NoiseGen(a) => noise_gen(&a, lexicon_dir, cli.seed, &mut out)?,
        Command::Eval(a) => eval(&a, lexicon_dir, &mut out)?,
        Command::RmTrain(a) => rm_train(&a, cli.seed, &mut out)?,
        Command::RmEval(a) => rm_eval(&a, &mut out)?,
        Command::ExportLabels(a) => export_labels(&a)?,
        Command::Serve(mut a) => {
            if a.lexicon.is_none() {
                a.lexicon = cli.lexicon_dir.clone();
            }
            imeforge_service::run(&a)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn lexicon(dir: Option<&Path>) -> Result<Arc<Lexicon>> {
    Ok(match dir {
        Some(d) => Arc::new(Lexicon::from_dir(d).with_context(|| format!("loading lexicon from {}", d.display()))?),
        None => Lexicon::bundled_shared().clone(),
    })
}

/// Interpolation weights favouring the highest order.
fn interpolation(order: usize) -> Option<Vec<f64>> {
    match order {
        1 => Some(vec![1.0]),
        2 => Some(vec![0.25, 0.75]),
        3 => NGramConfig::default().interpolation,
        _ => None,
    }
}

fn train_lm(a: &TrainLmArgs, lexicon_dir: Option<&Path>) -> Result<()> {
    let corpus = match &a.corpus {
        Some(p) => read_text(p)?,
        None => BUNDLED_CORPUS.to_string(),
    };
    let cfg = NGramConfig {
        order: a.order,
        add_k: a.add_k,
        interpolation: interpolation(a.order),
        ..NGramConfig::default()
    };
    let scorer = train_ngram(&corpus, lexicon(lexicon_dir)?, cfg)?;
    if scorer.skipped_chars() > 0 {
        log::warn!("{} corpus characters are outside the lexicon and were skipped", scorer.skipped_chars());
    }
    let file = File::create(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    scorer.save(&mut w)?;
    w.flush()?;
    log::info!("saved {} character model to {}", scorer.vocab_size(), a.out.display());
    Ok(())
}

fn segment(a: &SegmentArgs, lexicon_dir: Option<&Path>, out: &mut impl Write) -> Result<()> {
    let lex = lexicon(lexicon_dir)?;
    let x = KeySequence::parse(&a.keys, a.layout)?;
    if x.is_empty() {
        bail!("empty key sequence");
    }
    let cfg = SegmentConfig {
        allow_noise: a.noise,
        ..SegmentConfig::default()
    };
    let lat = build_lattice_with(&x, &lex, &cfg)?;
    for path in enumerate_pysegs(&lat, a.limit) {
        writeln!(out, "{}", path.display_tagged())?;
    }
    Ok(())
}

fn engine(m: &ModelArgs, lexicon_dir: Option<&Path>) -> Result<Engine> {
    let engine = Engine::load(m.model.as_deref(), lexicon_dir)?;
    Ok(match m.alpha {
        Some(alpha) => {
            let cfg = DecodeConfig {
                alpha,
                ..engine.config().clone()
            };
            engine.with_config(cfg)?
        }
        None => engine,
    })
}

fn decode(a: &DecodeArgs, lexicon_dir: Option<&Path>, out: &mut impl Write) -> Result<()> {
    let engine = engine(&a.model, lexicon_dir)?;
    let user_words = match &a.user_words {
        Some(p) => parse_user_words(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => Vec::new(),
    };
    let ext = Extension {
        context_text: a.context.clone(),
        user_profile: a.profile.clone(),
        user_words,
    };
    for (i, c) in engine.decode(&a.keys, a.layout, a.topk, &ext)?.iter().enumerate() {
        writeln!(out, "{}\t{}\t{}\t{:.6}", i + 1, c.chars, c.pyseg.display_tagged(), c.log_score)?;
    }
    Ok(())
}

fn noise_gen(a: &NoiseGenArgs, lexicon_dir: Option<&Path>, seed: u64, out: &mut impl Write) -> Result<()> {
    let lex = lexicon(lexicon_dir)?;
    let corpus = match &a.corpus {
        Some(p) => read_text(p)?,
        None => BUNDLED_CORPUS.to_string(),
    };
    let cases = gen_testset_with(&corpus, &lex, &a.modes, a.layout, seed, a.n, a.errors_per_case)?;
    let text = write_testset(&cases);
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn eval(a: &EvalArgs, lexicon_dir: Option<&Path>, out: &mut impl Write) -> Result<()> {
    let cases = parse_testset(&read_text(&a.testset)?).with_context(|| format!("in {}", a.testset.display()))?;
    let engine = engine(&a.model, lexicon_dir)?;
    let report = evaluate(&cases, engine.scorer(), engine.lexicon(), engine.config(), &a.topk)?;
    out.write_all(report.table().as_bytes())?;
    if report.undecodable > 0 {
        log::warn!("{} cases could not be segmented", report.undecodable);
    }
    Ok(())
}

fn load_samples(path: &Path) -> Result<Vec<imeforge::RewardSample>> {
    let file = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    read_samples(BufReader::new(file)).with_context(|| format!("in {}", path.display()))
}

fn rm_train(a: &RmTrainArgs, seed: u64, out: &mut impl Write) -> Result<()> {
    let samples = load_samples(&a.data)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        seed,
        optimizer: if a.sgd { Optimizer::Sgd } else { Optimizer::Adam },
        featurizer: FeaturizerConfig {
            buckets: a.buckets,
            ..FeaturizerConfig::default()
        },
        ..TrainConfig::default()
    };
    let report = train_reward_model(&samples, a.method, &cfg)?;
    writeln!(out, "epoch\tloss")?;
    for (i, loss) in report.curve.iter().enumerate() {
        writeln!(out, "{}\t{loss:.6}", i + 1)?;
    }
    if report.skipped_batches > 0 {
        log::warn!("{} batches had nothing to compare and were skipped", report.skipped_batches);
    }
    let file = File::create(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    report.model.save(BufWriter::new(file))?;
    Ok(())
}

fn rm_eval(a: &RmEvalArgs, out: &mut impl Write) -> Result<()> {
    let file = File::open(&a.model).with_context(|| format!("cannot read {}", a.model.display()))?;
    let model = RewardModel::load(BufReader::new(file))?;
    let samples = load_samples(&a.data)?;
    match a.metric {
        Metric::Rank => writeln!(out, "Acc_R\t{:.4}", acc_rank(&samples, &model)?)?,
        Metric::Binary => writeln!(out, "Acc_B\t{:.4}", acc_binary(&samples, &model)?)?,
    }
    Ok(())
}

fn export_labels(a: &ExportLabelsArgs) -> Result<()> {
    let file = File::open(&a.log).with_context(|| format!("cannot read {}", a.log.display()))?;
    let events = read_events(BufReader::new(file)).with_context(|| format!("in {}", a.log.display()))?;
    let window = Window::new(a.from, a.to);
    let rank = compute_labels(&events, window)?;
    let binary = compute_binary_labels(&events, window)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    for (name, samples) in [("rank_labels.tsv", &rank), ("binary_labels.tsv", &binary)] {
        let path = a.out_dir.join(name);
        let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        let mut w = BufWriter::new(file);
        write_samples(&mut w, samples)?;
        w.flush()?;
    }
    log::info!("{} rank and {} binary labels", rank.len(), binary.len());
    Ok(())
}
