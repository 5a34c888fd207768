//! Tokenization, vocabulary, corpus files and pretrained embeddings.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synonyms::Dictionary;
use crate::tensor::{Rng, Tensor};

/// Token that replaces every all-digit run.
pub const NUM: &str = "NUM";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

pub const DEFAULT_MAX_LEN: usize = 4000;

/// Lowercased alphanumeric runs; all-digit runs become [`NUM`].
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|run| !run.is_empty())
        .map(|run| {
            if run == NUM || run.chars().all(|c| c.is_ascii_digit()) {
                NUM.to_string()
            } else {
                run.to_lowercase()
            }
        })
        .collect()
}

/// Keeps the first `max_len` tokens.
pub fn truncate<T>(tokens: &[T], max_len: usize) -> &[T] {
    &tokens[..tokens.len().min(max_len)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Vocabulary over every token in `streams`, in first-seen order, after
    /// the reserved [`PAD`] and [`UNK`] entries.
    pub fn build<'a, I, S>(streams: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        let mut vocab = Self::from_tokens(vec![PAD.to_string(), UNK.to_string()]);
        for stream in streams {
            for tok in stream {
                vocab.insert(tok);
            }
        }
        vocab
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Rebuilds the reverse index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    }

    fn insert(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<u32> {
        self.index.get(tok).copied()
    }

    pub fn id_or_unk(&self, tok: &str) -> u32 {
        self.id(tok).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }
}

/// Word-embedding table; row `i` embeds vocabulary id `i`.
#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    pub matrix: Tensor<f64>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmbeddingStats {
    pub copied: usize,
    pub initialized: usize,
}

impl EmbeddingMatrix {
    /// PAD row zero, every other row uniform(−0.05, 0.05).
    pub fn random(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let matrix = Tensor::from_fn(&[vocab_size, dim], |i| {
            if i / dim == PAD_ID as usize {
                0.0
            } else {
                rng.uniform_range(-0.05, 0.05)
            }
        });
        Self {
            matrix,
            trainable: true,
        }
    }
}

/// Reads a word2vec text file (`count dim` header, then `token v1 … v_dim`).
/// Rows of vocabulary tokens found in the file are copied; the rest keep the
/// random initialization of [`EmbeddingMatrix::random`].
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut Rng,
) -> Result<(EmbeddingMatrix, EmbeddingStats)> {
    let name = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: name.clone(),
        line,
        msg,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, file_dim) = match fields.as_slice() {
        [c, d] => (
            c.parse::<usize>().map_err(|e| parse_err(1, format!("bad count: {e}")))?,
            d.parse::<usize>().map_err(|e| parse_err(1, format!("bad dimension: {e}")))?,
        ),
        _ => return Err(parse_err(1, format!("expected `count dim`, got `{header}`"))),
    };
    if file_dim != dim {
        return Err(Error::EmbeddingDim {
            expected: dim,
            found: file_dim,
        });
    }

    let mut emb = EmbeddingMatrix::random(vocab.len(), dim, rng);
    let mut seen = HashSet::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap();
        let values: Vec<f64> = parts
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(lineno, format!("bad value `{v}`: {e}"))))
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(parse_err(lineno, format!("expected {dim} values, got {}", values.len())));
        }
        if let Some(id) = vocab.id(token) {
            if id != PAD_ID && seen.insert(id) {
                let id = id as usize;
                emb.matrix.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
            }
        }
    }
    if rows != count {
        log::warn!("{name}: header announces {count} vectors but file holds {rows}");
    }
    let stats = EmbeddingStats {
        copied: seen.len(),
        initialized: vocab.len() - 1 - seen.len(),
    };
    if stats.copied == 0 {
        log::warn!("{name}: no vocabulary token has a pretrained vector; all rows randomly initialized");
    }
    Ok((emb, stats))
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub codes: Vec<String>,
}

/// Reads a JSON-lines file, one `T` per nonblank line.
pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let name = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: name.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a corpus file, checking that ids are unique and every code is in `dictionary`.
pub fn ingest_corpus(path: &Path, dictionary: &Dictionary) -> Result<Vec<CorpusRecord>> {
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    for (line, rec) in read_jsonl::<CorpusRecord>(path)? {
        if !ids.insert(rec.id.clone()) {
            return Err(Error::DuplicateId { id: rec.id, line });
        }
        if let Some(code) = rec.codes.iter().find(|c| dictionary.get(c).is_none()) {
            return Err(Error::UnknownCode {
                code: code.clone(),
                line,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// A tokenized, truncated document ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<u32>,
    pub gold_codes: BTreeSet<String>,
}

impl Document {
    pub fn from_record(rec: &CorpusRecord, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let toks = tokenize(&rec.text);
        let tokens = vocab.encode(truncate(&toks, max_len));
        if tokens.is_empty() {
            return Err(Error::Empty(format!("document `{}` has no tokens", rec.id)));
        }
        Ok(Self {
            id: rec.id.clone(),
            tokens,
            gold_codes: rec.codes.iter().cloned().collect(),
        })
    }

    /// 0/1 targets in the order of `codes`.
    pub fn targets(&self, codes: &[String]) -> Vec<bool> {
        codes.iter().map(|c| self.gold_codes.contains(c)).collect()
    }
}
