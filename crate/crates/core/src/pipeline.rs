//! Glue from files on disk to a trained model and its checkpoint.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::EvalReport;
use crate::model::Msmn;
use crate::synonyms::Dictionary;
use crate::synthgen::{DEV_FILE, DICT_FILE, TEST_FILE, TRAIN_FILE};
use crate::tensor::{Real, Rng};
use crate::text::{ingest_corpus, load_embeddings, tokenize, CorpusRecord, Document, EmbeddingMatrix, Vocabulary};
use crate::training::{train, EpochLog, Splits, TrainOutcome};

/// Tokenized corpus with its vocabulary and (normalized) dictionary.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub vocab: Vocabulary,
    pub dictionary: Dictionary,
    pub splits: Splits,
}

/// Default dictionary location inside a corpus directory.
pub fn default_dict(corpus_dir: &Path) -> PathBuf {
    corpus_dir.join(DICT_FILE)
}

/// Vocabulary over training texts followed by dictionary terms.
pub fn build_vocab(train: &[CorpusRecord], dictionary: &Dictionary) -> Vocabulary {
    let texts = train.iter().map(|r| tokenize(&r.text));
    let terms = dictionary.entries().iter().flat_map(|e| e.pool().map(|t| tokenize(t)));
    let streams: Vec<Vec<String>> = texts.chain(terms).collect();
    Vocabulary::build(streams.iter())
}

pub fn documents(records: &[CorpusRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Document>> {
    records.iter().map(|r| Document::from_record(r, vocab, max_len)).collect()
}

/// Reads `train`, `dev` and `test` splits from `corpus_dir`.
pub fn prepare(corpus_dir: &Path, dict_path: &Path, max_len: usize) -> Result<Workspace> {
    let dictionary = Dictionary::load(dict_path)?.normalized();
    let train = ingest_corpus(&corpus_dir.join(TRAIN_FILE), &dictionary)?;
    let dev = ingest_corpus(&corpus_dir.join(DEV_FILE), &dictionary)?;
    let test = ingest_corpus(&corpus_dir.join(TEST_FILE), &dictionary)?;
    let vocab = build_vocab(&train, &dictionary);
    let splits = Splits {
        train: documents(&train, &vocab, max_len)?,
        dev: documents(&dev, &vocab, max_len)?,
        test: documents(&test, &vocab, max_len)?,
    };
    Ok(Workspace {
        vocab,
        dictionary,
        splits,
    })
}

/// Result of [`train_model`].
pub struct Trained<T> {
    pub model: Msmn<T>,
    pub outcome: TrainOutcome,
    pub checkpoint: Checkpoint,
}

impl<T> Trained<T> {
    pub fn report(&self) -> &EvalReport {
        &self.outcome.test
    }
}

/// Initializes and trains a model for `run`, seeded entirely by `run.seed`.
pub fn train_model<T: Real>(
    run: &RunConfig,
    ws: &Workspace,
    embeddings: Option<&Path>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained<T>> {
    run.validate()?;
    let root = Rng::new(run.seed);
    let mut emb_rng = root.fork(5);
    let embedding = match embeddings {
        Some(path) => {
            let (emb, stats) = load_embeddings(path, &ws.vocab, run.emb_dim, &mut emb_rng)?;
            log::info!("embeddings: {} copied, {} initialized", stats.copied, stats.initialized);
            emb
        }
        None => EmbeddingMatrix::random(ws.vocab.len(), run.emb_dim, &mut emb_rng),
    };
    let codes = ws.dictionary.codes();
    let mut model = Msmn::<T>::new(run.model(), codes.len(), &embedding.matrix, &mut root.fork(1))?;
    // start from the training base rate instead of p = 0.5
    let positives: usize = ws.splits.train.iter().map(|d| d.gold_codes.len()).sum();
    let prior = positives as f64 / (ws.splits.train.len() * codes.len()).max(1) as f64;
    if prior > 0.0 && prior < 1.0 {
        model.set_prior_bias(prior)?;
    }
    let outcome = train(&mut model, &ws.splits, &ws.dictionary, &ws.vocab, &run.train(), on_epoch)?;
    let checkpoint = Checkpoint::new(
        &model,
        run,
        codes,
        &ws.vocab,
        outcome.synonyms.clone(),
        outcome.threshold.clone(),
        outcome.best_epoch,
    );
    Ok(Trained {
        model,
        outcome,
        checkpoint,
    })
}
