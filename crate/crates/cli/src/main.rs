use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dspn::config::KvConfig;
use dspn::corpus::synth::{synth_corpus, GenConfig};
use dspn::corpus::{corpus_stats, load_corpus, save_corpus, LabelBudget, VocabSource};
use dspn::encoder::{load_precomputed, EncoderMode, PrecomputedEmbeddings};
use dspn::metrics::{evaluate, evaluate_with_budget, AcsaScope, EvalOptions};
use dspn::model::Objective;
use dspn::toy::{ToyInstance, ToyLimits};
use dspn::trainer::{split_validation, train_with_progress, Checkpoint, RunConfig};
use dspn::{AspectSchema, Corpus};

/// Distantly supervised pyramid network: aspect detection, aspect sentiment
/// and rating prediction trained from review-level labels.
#[derive(Parser)]
#[command(name = "dspn", version)]
struct Cli {
    /// Threads for per-review gradients; results are identical for any value.
    #[arg(long, global = true, value_name = "K")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled corpus.
    Eval(EvalArgs),
    /// Write one prediction record per review.
    Predict(PredictArgs),
    /// Print the full prediction for a single review.
    Inspect(InspectArgs),
    /// Summarize a corpus.
    Stats(StatsArgs),
    /// Generate a synthetic corpus with planted aspects.
    Gencorpus(GencorpusArgs),
    /// Finite-difference check of the training gradient on random toy models.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    label_source: Option<String>,
    /// Any config key, e.g. `--set neg_samples=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Validation corpus; without it a share of the training corpus is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Write the per-epoch history as JSON lines.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Score ACSA on a random subset of the aspect labels: a count or a percentage.
    #[arg(long)]
    budget: Option<LabelBudget>,
    /// Seed for the budget subsample.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score ACSA over detected rather than gold aspects.
    #[arg(long)]
    detected: bool,
    /// Macro-averaged detection F1.
    #[arg(long = "macro")]
    macro_f1: bool,
    #[arg(long)]
    label_source: Option<String>,
    /// Embeddings file for precomputed-mode checkpoints.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    id: String,
    /// Defaults to the corpus the checkpoint was trained on.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GencorpusArgs {
    /// key=value generator settings; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the matching aspect schema.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// key=value settings: instances, seed, h, tol, lambda, lambda_acd,
    /// max_tokens, max_aspects, max_dim, max_batch, max_negatives, scale.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain joined by ": ", skipping causes a wrapper already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

/// Write to stdout, reporting failures (a closed pipe included) as errors.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::Train(a) => cmd_train(a, workers),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Gencorpus(a) => cmd_gencorpus(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn load_kv(path: Option<&Path>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(KvConfig::new()),
    }
}

fn run_config(file: Option<&Path>, o: &Overrides, workers: Option<usize>) -> Result<RunConfig> {
    let mut kv = load_kv(file)?;
    if let Some(v) = o.seed {
        kv.set("seed", v);
    }
    if let Some(v) = o.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = o.batch {
        kv.set("batch", v);
    }
    if let Some(v) = o.lr {
        kv.set("lr", v);
    }
    if let Some(v) = o.lambda {
        kv.set("lambda", v);
    }
    if let Some(v) = &o.optimizer {
        kv.set("optimizer", v);
    }
    if let Some(v) = &o.label_source {
        kv.set("label_source", v);
    }
    for (k, v) in &o.set {
        kv.set(k.as_str(), v);
    }
    if let Some(w) = workers {
        kv.set("workers", w);
    }
    Ok(RunConfig::from_kv(&kv)?)
}

fn precomputed(run: &RunConfig, flag: Option<&Path>) -> Result<Option<Arc<PrecomputedEmbeddings>>> {
    if run.encoder_mode != EncoderMode::Precomputed {
        return Ok(None);
    }
    let path = match (flag, &run.embeddings_path) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => bail!("precomputed mode needs an embeddings file (embeddings_path or --embeddings)"),
    };
    let emb = load_precomputed(&path, Some(run.d_w)).with_context(|| format!("loading {}", path.display()))?;
    Ok(Some(Arc::new(emb)))
}

fn read_corpus(path: &Path, vocab: VocabSource<'_>, max_len: usize) -> Result<Corpus> {
    load_corpus(path, vocab, max_len).with_context(|| format!("reading corpus {}", path.display()))
}

fn cmd_train(a: TrainArgs, workers: Option<usize>) -> Result<()> {
    let run = run_config(a.config.as_deref(), &a.overrides, workers)?;
    let schema = AspectSchema::load(&a.schema).with_context(|| format!("reading schema {}", a.schema.display()))?;
    let corpus = read_corpus(&a.corpus, VocabSource::Build { min_count: run.min_count }, run.max_len)?;
    let (train_set, val_set) = match &a.val {
        Some(p) => (corpus.clone(), read_corpus(p, VocabSource::Existing(&corpus.vocab), run.max_len)?),
        None => split_validation(&corpus, run.train.val_fraction, run.train.seed)?,
    };
    let emb = precomputed(&run, None)?;
    eprintln!(
        "training on {} reviews, validating on {}, vocabulary {}, {} aspects",
        train_set.len(),
        val_set.len(),
        corpus.vocab.len(),
        schema.len()
    );
    let start = Instant::now();
    let outcome = train_with_progress(&train_set, &val_set, &schema, &run, emb, |r| {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"));
        eprintln!(
            "epoch {:>3} {:<8} loss {:.4} (acd {:.4}, rp {:.4})  val rp {} acd-f1 {} acsa {}  {:.1}s",
            r.epoch,
            format!("{:?}", r.phase).to_lowercase(),
            r.loss,
            r.loss_acd,
            r.loss_rp,
            fmt(r.val_acc_rp),
            fmt(r.val_f1_acd),
            fmt(r.val_acc_acsa),
            start.elapsed().as_secs_f64()
        );
    })?;
    let corpus_path = fs::canonicalize(&a.corpus).unwrap_or_else(|_| a.corpus.clone());
    let ckpt = outcome.checkpoint(&run, &schema, &corpus, Some(&corpus_path.to_string_lossy()));
    ckpt.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.history {
        let mut w = BufWriter::new(fs::File::create(p).with_context(|| format!("writing {}", p.display()))?);
        for r in &outcome.history {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        w.flush()?;
    }
    emit(&format!("best epoch {} written to {}\n", outcome.best.epoch, a.out.display()))?;
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    run: RunConfig,
    schema: AspectSchema,
    model: dspn::Dspn,
}

fn load_model(path: &Path, embeddings: Option<&Path>) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let run = ckpt.run_config()?;
    let schema = ckpt.schema()?;
    let model = ckpt.model(precomputed(&run, embeddings)?)?;
    Ok(Loaded { ckpt, run, schema, model })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let m = load_model(&a.ckpt, a.embeddings.as_deref())?;
    let vocab = m.ckpt.vocab()?;
    let corpus = read_corpus(&a.corpus, VocabSource::Existing(&vocab), m.run.max_len)?;
    let opts = EvalOptions {
        label_source: match &a.label_source {
            Some(s) => s.parse()?,
            None => m.run.train.label_source,
        },
        acsa_scope: if a.detected { AcsaScope::Detected } else { AcsaScope::Gold },
        macro_f1: a.macro_f1,
    };
    let report = match a.budget {
        Some(b) => {
            let n = b.resolve(corpus.aspect_label_count())?;
            evaluate_with_budget(&m.model, &corpus, &m.schema, &opts, n, a.seed)?
        }
        None => evaluate(&m.model, &corpus, &m.schema, &opts)?,
    };
    emit(&report.to_string())?;
    if let Some(p) = &a.report {
        fs::write(p, report.to_json() + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn aspect_names(schema: &AspectSchema) -> Vec<String> {
    schema.names().map(str::to_string).collect()
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let m = load_model(&a.ckpt, a.embeddings.as_deref())?;
    let vocab = m.ckpt.vocab()?;
    let corpus = read_corpus(&a.corpus, VocabSource::Existing(&vocab), m.run.max_len)?;
    let names = aspect_names(&m.schema);
    let mut w = BufWriter::new(fs::File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?);
    for review in &corpus.reviews {
        let out = m.model.forward(review)?;
        writeln!(w, "{}", serde_json::to_string(&out.to_record(&review.id, &names))?)?;
    }
    w.flush()?;
    eprintln!("{} predictions written to {}", corpus.len(), a.out.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let m = load_model(&a.ckpt, a.embeddings.as_deref())?;
    let path = match (&a.corpus, m.ckpt.corpus_path()) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => bail!("checkpoint does not record its corpus; pass --corpus"),
    };
    let vocab = m.ckpt.vocab()?;
    let corpus = read_corpus(&path, VocabSource::Existing(&vocab), m.run.max_len)?;
    let review = corpus
        .find(&a.id)
        .ok_or_else(|| dspn::DspnError::UnknownReview(a.id.clone()))?;
    let out = m.model.forward(review)?;
    emit(&(serde_json::to_string_pretty(&out.to_record(&review.id, &aspect_names(&m.schema)))? + "\n"))?;
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus, VocabSource::Build { min_count: 1 }, usize::MAX)?;
    let stats = corpus_stats(&corpus)?;
    if a.json {
        emit(&(serde_json::to_string_pretty(&stats)? + "\n"))
    } else {
        emit(&format!("{stats}\n"))
    }
}

fn cmd_gencorpus(a: GencorpusArgs) -> Result<()> {
    let gen = GenConfig::from_kv(&load_kv(a.config.as_deref())?)?;
    let corpus = synth_corpus(&gen, a.seed)?;
    save_corpus(&corpus.reviews, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.schema {
        gen.schema()?.save(p).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("{} reviews written to {}", corpus.len(), a.out.display());
    Ok(())
}

const GRADCHECK_KEYS: &[&str] = &[
    "instances",
    "seed",
    "h",
    "tol",
    "lambda",
    "lambda_acd",
    "max_tokens",
    "max_aspects",
    "max_dim",
    "max_batch",
    "max_negatives",
    "scale",
];

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let kv = load_kv(a.config.as_deref())?;
    let unknown = kv.unknown_keys(GRADCHECK_KEYS);
    if !unknown.is_empty() {
        bail!("unknown gradcheck key(s): {}", unknown.join(", "));
    }
    let d = ToyLimits::default();
    let limits = ToyLimits {
        max_tokens: kv.get_or("max_tokens", d.max_tokens)?,
        max_aspects: kv.get_or("max_aspects", d.max_aspects)?,
        max_dim: kv.get_or("max_dim", d.max_dim)?,
        max_batch: kv.get_or("max_batch", d.max_batch)?,
        max_negatives: kv.get_or("max_negatives", d.max_negatives)?,
        scale: kv.get_or("scale", d.scale)?,
        ..d
    };
    let instances: u64 = kv.get_or("instances", 100)?;
    let seed: u64 = kv.get_or("seed", 0)?;
    let h: f64 = kv.get_or("h", 1e-5)?;
    let tol: f64 = kv.get_or("tol", 1e-4)?;
    let objective = Objective::Joint {
        lambda: kv.get_or("lambda", dspn::pyramid::DEFAULT_LAMBDA)?,
    };
    let lambda_acd: f64 = kv.get_or("lambda_acd", 1.0)?;

    let start = Instant::now();
    let mut total = None;
    for i in 0..instances {
        let report = ToyInstance::generate(seed + i, &limits)?.check(objective, lambda_acd, h)?;
        total = Some(match total {
            None => report,
            Some(t) => report.merge(t),
        });
    }
    let Some(report) = total else {
        bail!("instances must be positive");
    };
    let worst = match &report.worst {
        Some((name, idx)) => format!(
            " at {name}[{idx}] (analytic {:.6e}, numeric {:.6e})",
            report.worst_analytic, report.worst_numeric
        ),
        None => String::new(),
    };
    emit(&format!(
        "{instances} instances, {} coordinates checked, {} skipped at kinks\n\
         max relative error {:.3e}{worst}\n{:.2}s\n",
        report.checked,
        report.skipped,
        report.max_rel_error,
        start.elapsed().as_secs_f64()
    ))?;
    if !report.passes(tol) {
        bail!("max relative error {:.3e} is not below {tol:e}", report.max_rel_error);
    }
    Ok(())
}
