use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use msmn::checkpoint::Checkpoint;
use msmn::classifier::ScorerKind;
use msmn::config::{Precision, RunConfig};
use msmn::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use msmn::metrics::{self, EvalReport};
use msmn::model::{synonym_inputs, Msmn};
use msmn::pipeline::{default_dict, documents, prepare, train_model, Trained};
use msmn::synonyms::Dictionary;
use msmn::synthgen::{generate, SynthConfig, DEV_FILE, TEST_FILE, TRAIN_FILE};
use msmn::tensor::Real;
use msmn::text::{ingest_corpus, tokenize, truncate};
use msmn::training::{label_matrix, predict_docs, tune_threshold, EpochLog, Threshold, TrainOutcome};
use msmn::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(name = "msmn", version, about = "Multi-synonyms matching network for ICD coding")]
struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and dictionary.
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint and report.
    Train(TrainArgs),
    /// Score a split with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Rank codes for free text.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences on a micro model.
    Gradcheck(GradcheckArgs),
    /// Write synonym and code representations as tab-separated columns.
    ExportReprs(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().num_codes)]
    codes: usize,
    #[arg(long, default_value_t = SynthConfig::default().train_docs)]
    train_docs: usize,
    #[arg(long, default_value_t = SynthConfig::default().dev_docs)]
    dev_docs: usize,
    #[arg(long, default_value_t = SynthConfig::default().test_docs)]
    test_docs: usize,
    /// Probability that a mention uses a synonym instead of the description.
    #[arg(long, default_value_t = SynthConfig::default().synonym_prob)]
    synonym_prob: f64,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus_dir: PathBuf,
    /// Dictionary file; defaults to the one inside the corpus directory.
    #[arg(long)]
    dict: Option<PathBuf>,
    /// word2vec text file.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// TOML file with hyper-parameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base setting: desk, full or top50.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Synonyms per code (`M`).
    #[arg(long)]
    synonyms: Option<usize>,
    #[arg(long)]
    scorer: Option<ScorerKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// R-Drop weight; 0 trains with plain BCE.
    #[arg(long)]
    rdrop: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Directory for the checkpoint and report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus_dir: PathBuf,
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Split to score: train, dev or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Tune the threshold on this split instead of using the stored one.
    #[arg(long)]
    tune_threshold: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Document text.
    #[arg(long, conflicts_with = "input")]
    text: Option<String>,
    /// File with one document per non-empty line.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Codes listed per document.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Emit JSON lines instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "64")]
    precision: Precision,
    #[arg(long, default_value = "biaffine")]
    scorer: ScorerKind,
    #[arg(long, default_value_t = GradcheckConfig::default().seed)]
    seed: u64,
    /// Test hook: corrupt the analytic gradient of this parameter group.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Error with the exit status it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_data_error() { EXIT_DATA } else { EXIT_USAGE };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportReprs(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let cfg = SynthConfig {
        num_codes: a.codes,
        train_docs: a.train_docs,
        dev_docs: a.dev_docs,
        test_docs: a.test_docs,
        synonym_prob: a.synonym_prob,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let occupied = a.out.exists() && (a.out.is_file() || fs::read_dir(&a.out)?.next().is_some());
    if occupied && !a.force {
        return Err(Error::Exists(a.out).into());
    }
    let corpus = generate(&cfg)?;
    for path in corpus.write(&a.out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut run = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&a.preset)?,
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag.clone() { run.$field = v; })*
        };
    }
    set!(synonyms => synonyms_count, scorer => scorer, epochs => epochs, lr => peak_lr,
         batch_size => batch_size, rdrop => rdrop_weight, seed => seed, threads => threads,
         precision => precision);
    run.validate()?;
    Ok(run)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    run: &'a RunConfig,
    best_epoch: usize,
    threshold: &'a Threshold,
    epochs: &'a [EpochLog],
    dev: &'a EvalReport,
    test: &'a EvalReport,
}

fn print_epoch(log: &EpochLog) {
    println!(
        "epoch {:>3}  loss {:.4}  lr {:.2e}  dev micro-F1 {:.4}  macro-F1 {:.4}  micro-AUC {:.4}  threshold {:.3}{}",
        log.epoch,
        log.train_loss,
        log.lr,
        log.dev_micro_f1,
        log.dev_macro_f1,
        log.dev_micro_auc,
        log.threshold,
        if log.best { "  *" } else { "" }
    );
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let run = run_config(&a)?;
    if run.threads > 1 {
        log::warn!("computation is single-threaded; --threads {} has no effect", run.threads);
    }
    let dict = a.dict.clone().unwrap_or_else(|| default_dict(&a.corpus_dir));
    let ws = prepare(&a.corpus_dir, &dict, run.max_len)?;
    println!(
        "{} train / {} dev / {} test documents, {} codes, vocabulary {}",
        ws.splits.train.len(),
        ws.splits.dev.len(),
        ws.splits.test.len(),
        ws.dictionary.len(),
        ws.vocab.len()
    );
    let emb = a.embeddings.as_deref();
    let (outcome, checkpoint) = match run.precision {
        Precision::F64 => unpack(train_model::<f64>(&run, &ws, emb, print_epoch)?),
        Precision::F32 => unpack(train_model::<f32>(&run, &ws, emb, print_epoch)?),
    };
    fs::create_dir_all(&a.out)?;
    checkpoint.save(&a.out.join(CHECKPOINT_FILE))?;
    let report = TrainReport {
        run: &run,
        best_epoch: outcome.best_epoch,
        threshold: &outcome.threshold,
        epochs: &outcome.epochs,
        dev: &outcome.dev,
        test: &outcome.test,
    };
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    fs::write(a.out.join(REPORT_FILE), json + "\n")?;
    println!("best epoch {} (threshold {:.4})", outcome.best_epoch, outcome.threshold.value);
    print!("{}", outcome.test.table());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn unpack<T>(t: Trained<T>) -> (TrainOutcome, Checkpoint) {
    (t.outcome, t.checkpoint)
}

fn load_dictionary(path: Option<&Path>, corpus_dir: &Path) -> Result<Dictionary, Error> {
    let path = path.map_or_else(|| default_dict(corpus_dir), Path::to_path_buf);
    Ok(Dictionary::load(&path)?.normalized())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let dict = load_dictionary(a.dict.as_deref(), &a.corpus_dir)?;
    ck.check_codes(&dict)?;
    let file = match a.split.as_str() {
        "train" => TRAIN_FILE,
        "dev" => DEV_FILE,
        "test" => TEST_FILE,
        other => return Err(usage(format!("unknown split `{other}` (train|dev|test)"))),
    };
    let records = ingest_corpus(&a.corpus_dir.join(file), &dict)?;
    let docs = documents(&records, &ck.vocab, ck.run.max_len)?;
    let probs = match ck.run.precision {
        Precision::F64 => predict_docs(&ck.model::<f64>()?, &docs, &ck.synonyms, 32)?,
        Precision::F32 => predict_docs(&ck.model::<f32>()?, &docs, &ck.synonyms, 32)?,
    };
    let labels = label_matrix(&docs, &ck.codes);
    let threshold = if a.tune_threshold {
        tune_threshold(&probs, &labels)?.value
    } else {
        ck.threshold.value
    };
    let ks = ck.run.train().ks;
    let report = metrics::evaluate(&probs, &labels, &ck.codes, threshold, &ks)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        fs::write(out, json + "\n")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Ranked<'a> {
    code: &'a str,
    probability: f64,
    predicted: bool,
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    let texts: Vec<String> = match (&a.text, &a.input) {
        (Some(t), None) => vec![t.clone()],
        (None, Some(path)) => fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
        _ => return Err(usage("give exactly one of --text or --input")),
    };
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut seqs = Vec::with_capacity(texts.len());
    for (i, text) in texts.iter().enumerate() {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(Error::Empty(format!("document {} has no tokens", i + 1)).into());
        }
        seqs.push(ck.vocab.encode(truncate(&toks, ck.run.max_len)));
    }
    if seqs.is_empty() {
        return Err(Error::Empty("no documents to score".into()).into());
    }
    let probs = match ck.run.precision {
        Precision::F64 => predict_seqs(&ck.model::<f64>()?, &seqs, &ck)?,
        Precision::F32 => predict_seqs(&ck.model::<f32>()?, &seqs, &ck)?,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, row) in probs.iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        let ranked: Vec<Ranked> = order
            .iter()
            .take(a.top_k)
            .map(|&c| Ranked {
                code: &ck.codes[c],
                probability: row[c],
                predicted: row[c] >= ck.threshold.value,
            })
            .collect();
        if a.json {
            writeln!(out, "{}", serde_json::to_string(&ranked).map_err(Error::from)?)?;
        } else {
            writeln!(out, "document {}", i + 1)?;
            for r in ranked {
                writeln!(out, "  {:<10} {:.4}{}", r.code, r.probability, if r.predicted { "  *" } else { "" })?;
            }
        }
    }
    Ok(())
}

fn predict_seqs<T: Real>(model: &Msmn<T>, seqs: &[Vec<u32>], ck: &Checkpoint) -> Result<Vec<Vec<f64>>, Error> {
    let docs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    model.predict(&docs, &synonym_inputs(&ck.synonyms), 32)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let base = match a.precision {
        Precision::F64 => GradcheckConfig::micro_f64(),
        Precision::F32 => GradcheckConfig::micro_f32(),
    };
    let cfg = GradcheckConfig {
        scorer: a.scorer,
        seed: a.seed,
        corrupt: a.corrupt,
        ..base
    };
    let report: GradcheckReport = match a.precision {
        Precision::F64 => gradcheck::<f64>(&cfg)?,
        Precision::F32 => gradcheck::<f32>(&cfg)?,
    };
    print!("{}", report.table());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            msg: format!("gradient mismatch in {}", report.failures().join(", ")),
        })
    }
}

fn cmd_export(a: ExportArgs) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (queries, pooled) = match ck.run.precision {
        Precision::F64 => reprs(&ck.model::<f64>()?, &ck)?,
        Precision::F32 => reprs(&ck.model::<f32>()?, &ck)?,
    };
    let h = ck.run.lstm_output_dim;
    let m = ck.run.synonyms_count;
    let mut text = String::from("kind\tcode\tindex\tterm");
    for i in 0..h {
        text += &format!("\tv{i}");
    }
    text.push('\n');
    let mut row = |kind: &str, code: &str, index: usize, term: &str, v: &[f64]| {
        text += &format!("{kind}\t{code}\t{index}\t{term}");
        for x in v {
            text += &format!("\t{x}");
        }
        text.push('\n');
    };
    for (c, sample) in ck.synonyms.iter().enumerate() {
        for (j, term) in sample.chosen.iter().enumerate() {
            row("synonym", &sample.code, j, term, &queries[(c * m + j) * h..(c * m + j + 1) * h]);
        }
    }
    for (c, sample) in ck.synonyms.iter().enumerate() {
        row("code", &sample.code, 0, "", &pooled[c * h..(c + 1) * h]);
    }
    fs::write(&a.out, text)?;
    println!("wrote {} synonym and {} code rows to {}", ck.synonyms.len() * m, ck.synonyms.len(), a.out.display());
    Ok(())
}

fn reprs<T: Real>(model: &Msmn<T>, ck: &Checkpoint) -> Result<(Vec<f64>, Vec<f64>), Error> {
    let (q, pooled) = model.synonym_reprs(&synonym_inputs(&ck.synonyms))?;
    Ok((q.to_f64_vec(), pooled.to_f64_vec()))
}
