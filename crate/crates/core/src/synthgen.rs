//! Synthetic labelled corpus: filler text with planted code mentions.
//!
//! Every document carries one mention per gold code, either the code's
//! description or one of its synonyms, separated by filler words that never
//! occur in any dictionary term. Gold labels are exactly the planted codes,
//! and exact phrase matching ([`oracle_labels`]) recovers them.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synonyms::{CodeEntry, Dictionary};
use crate::tensor::Rng;
use crate::text::{tokenize, write_corpus, CorpusRecord};

/// Clinical-style seed entries: code, description, synonyms. No term is a
/// contiguous sub-phrase of another code's term.
const SEED_ENTRIES: &[(&str, &str, [&str; 3])] = &[
    ("244.9", "unspecified hypothyroidism", ["low t4", "subthyroidism", "thyroid hormone deficiency"]),
    ("401.9", "unspecified essential hypertension", ["high blood pressure", "hypertensive disorder", "elevated arterial tension"]),
    ("428.0", "congestive heart failure unspecified", ["cardiac decompensation", "fluid overloaded heart", "chf"]),
    ("427.31", "atrial fibrillation", ["afib", "auricular fibrillation", "irregularly irregular rhythm"]),
    ("250.00", "diabetes mellitus without complication", ["type ii diabetes", "adult onset diabetes", "sugar diabetes"]),
    ("585.9", "chronic kidney disease unspecified", ["chronic renal insufficiency", "ckd", "reduced kidney function"]),
    ("584.9", "acute kidney failure unspecified", ["acute renal failure", "acute kidney injury", "aki"]),
    ("518.81", "acute respiratory failure", ["respiratory insufficiency", "ventilatory failure", "hypoxemic respiratory collapse"]),
    ("486", "pneumonia organism unspecified", ["lung infection", "pneumonitis", "chest infection"]),
    ("599.0", "urinary tract infection site not specified", ["uti", "bladder infection", "urinary infection"]),
    ("272.4", "other and unspecified hyperlipidemia", ["high cholesterol", "dyslipidemia", "elevated lipids"]),
    ("285.9", "anemia unspecified", ["low hemoglobin", "anaemia", "low blood count"]),
    ("414.01", "coronary atherosclerosis of native coronary artery", ["coronary artery disease", "cad", "ischemic heart disease"]),
    ("038.9", "unspecified septicemia", ["septicaemia", "blood poisoning", "bloodstream infection"]),
    ("276.1", "hyposmolality and hyponatremia", ["low sodium", "hyponatraemia", "sodium depletion"]),
    ("496", "chronic airway obstruction", ["copd", "chronic obstructive lung disease", "obstructive airway disease"]),
    ("530.81", "esophageal reflux", ["gerd", "acid reflux", "heartburn"]),
    ("311", "depressive disorder", ["depression", "low mood", "melancholia"]),
    ("305.1", "tobacco use disorder", ["smoker", "nicotine dependence", "cigarette smoking"]),
    ("995.92", "severe sepsis", ["septic syndrome", "sepsis with organ dysfunction", "systemic sepsis"]),
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_codes: usize,
    /// Synonyms per code besides the description.
    pub synonyms_per_code: usize,
    pub filler_vocab: usize,
    /// Inclusive range of words per document, mentions included.
    pub doc_len: (usize, usize),
    /// Inclusive range of gold codes per document.
    pub codes_per_doc: (usize, usize),
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    /// Probability that a mention uses a synonym rather than the description.
    pub synonym_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_codes: 20,
            synonyms_per_code: 3,
            filler_vocab: 500,
            doc_len: (80, 150),
            codes_per_doc: (1, 4),
            train_docs: 2000,
            dev_docs: 200,
            test_docs: 400,
            synonym_prob: 0.7,
            seed: 13,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.codes_per_doc;
        if self.num_codes == 0 || self.synonyms_per_code == 0 || self.filler_vocab == 0 {
            return Err(Error::invalid("codes, synonyms per code and filler vocabulary must be positive"));
        }
        if lo == 0 || lo > hi {
            return Err(Error::invalid(format!("codes per document range {lo}..={hi} is empty or starts at 0")));
        }
        if hi > self.num_codes {
            return Err(Error::invalid(format!(
                "documents need up to {hi} distinct codes but only {} exist",
                self.num_codes
            )));
        }
        if self.doc_len.0 == 0 || self.doc_len.0 > self.doc_len.1 {
            return Err(Error::invalid(format!("document length range {:?} is empty", self.doc_len)));
        }
        if self.train_docs == 0 || self.dev_docs == 0 || self.test_docs == 0 {
            return Err(Error::invalid("split sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.synonym_prob) {
            return Err(Error::invalid(format!("synonym probability {} outside [0, 1]", self.synonym_prob)));
        }
        Ok(())
    }
}

/// Generated splits and their dictionary.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub dictionary: Dictionary,
    pub train: Vec<CorpusRecord>,
    pub dev: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
}

/// File names written by [`SynthCorpus::write`].
pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const DICT_FILE: &str = "dictionary.jsonl";

impl SynthCorpus {
    /// Writes the three splits and the dictionary into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let paths: Vec<PathBuf> = [TRAIN_FILE, DEV_FILE, TEST_FILE, DICT_FILE].iter().map(|f| dir.join(f)).collect();
        write_corpus(&paths[0], &self.train)?;
        write_corpus(&paths[1], &self.dev)?;
        write_corpus(&paths[2], &self.test)?;
        self.dictionary.save(&paths[3])?;
        Ok(paths)
    }
}

fn pseudo_word(rng: &mut Rng, syllables: usize) -> String {
    let mut w = String::with_capacity(2 * syllables + 1);
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.below(CONSONANTS.len())] as char);
        w.push(VOWELS[rng.below(VOWELS.len())] as char);
    }
    w
}

/// Fresh pseudo-words avoiding `taken` (which is extended).
fn fresh_words(rng: &mut Rng, n: usize, syllables: (usize, usize), taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.between(syllables.0, syllables.1);
        let w = pseudo_word(rng, syl);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn contains_phrase(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Seed entries first; codes and synonyms beyond the seed table are made of
/// generated term words.
fn build_dictionary(cfg: &SynthConfig, rng: &mut Rng, taken: &mut HashSet<String>) -> Result<Dictionary> {
    let mut entries = Vec::with_capacity(cfg.num_codes);
    for c in 0..cfg.num_codes {
        let (code, desc, mut syns) = match SEED_ENTRIES.get(c) {
            Some((code, desc, syns)) => (code.to_string(), desc.to_string(), syns.iter().map(|s| s.to_string()).collect()),
            None => {
                let words = fresh_words(rng, 2, (3, 4), taken);
                (format!("S{:03}", c), words.join(" "), Vec::new())
            }
        };
        syns.truncate(cfg.synonyms_per_code);
        while syns.len() < cfg.synonyms_per_code {
            let len = rng.between(1, 3);
            syns.push(fresh_words(rng, len, (3, 4), taken).join(" "));
        }
        entries.push(CodeEntry::new(code, desc, syns)?);
    }
    // a term nested in another code's term would make labels ambiguous
    let terms: Vec<(usize, Vec<String>)> = entries
        .iter()
        .enumerate()
        .flat_map(|(i, e)| e.pool().map(move |t| (i, tokenize(t))))
        .collect();
    for (i, a) in &terms {
        for (j, b) in &terms {
            if i != j && contains_phrase(b, a) {
                return Err(Error::invalid(format!(
                    "term `{}` of {} occurs inside `{}` of {}",
                    a.join(" "),
                    entries[*i].code,
                    b.join(" "),
                    entries[*j].code
                )));
            }
        }
    }
    Dictionary::new(entries)
}

fn generate_doc(id: String, cfg: &SynthConfig, dict: &Dictionary, filler: &[String], rng: &mut Rng) -> CorpusRecord {
    let n_codes = rng.between(cfg.codes_per_doc.0, cfg.codes_per_doc.1);
    let mut picked = rng.sample_indices(cfg.num_codes, n_codes);
    let entries = dict.entries();
    let mentions: Vec<Vec<String>> = picked
        .iter()
        .map(|&c| {
            let e = &entries[c];
            let term = if !e.synonyms.is_empty() && rng.bernoulli(cfg.synonym_prob) {
                &e.synonyms[rng.below(e.synonyms.len())]
            } else {
                &e.description
            };
            tokenize(term)
        })
        .collect();
    let mention_len: usize = mentions.iter().map(Vec::len).sum();
    let target = rng.between(cfg.doc_len.0, cfg.doc_len.1);
    // every mention needs filler on both sides
    let n_filler = target.saturating_sub(mention_len).max(n_codes + 1);
    let words: Vec<&String> = (0..n_filler).map(|_| &filler[rng.below(filler.len())]).collect();
    let mut gaps = rng.sample_indices(n_filler - 1, n_codes);
    gaps.sort_unstable();

    let mut tokens: Vec<&str> = Vec::with_capacity(n_filler + mention_len);
    let mut next = 0;
    for (i, w) in words.iter().enumerate() {
        tokens.push(w);
        if next < gaps.len() && gaps[next] == i {
            tokens.extend(mentions[next].iter().map(String::as_str));
            next += 1;
        }
    }
    picked.sort_unstable();
    CorpusRecord {
        id,
        text: tokens.join(" "),
        codes: picked.iter().map(|&c| entries[c].code.clone()).collect(),
    }
}

/// Generates splits and dictionary; identical output for identical configs.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut dict_rng = root.fork(1);
    let mut taken: HashSet<String> = SEED_ENTRIES
        .iter()
        .flat_map(|(_, d, s)| std::iter::once(*d).chain(s.iter().copied()))
        .flat_map(tokenize)
        .collect();
    let dictionary = build_dictionary(cfg, &mut dict_rng, &mut taken)?;
    for e in dictionary.entries() {
        taken.extend(e.pool().flat_map(|t| tokenize(t)));
    }
    let filler = fresh_words(&mut root.fork(2), cfg.filler_vocab, (2, 3), &mut taken);

    let split = |name: &str, n: usize, stream: u64| -> Vec<CorpusRecord> {
        let mut rng = root.fork(stream);
        (0..n)
            .map(|i| generate_doc(format!("{name}-{i:05}"), cfg, &dictionary, &filler, &mut rng))
            .collect()
    };
    let train = split("train", cfg.train_docs, 10);
    let dev = split("dev", cfg.dev_docs, 11);
    let test = split("test", cfg.test_docs, 12);
    Ok(SynthCorpus {
        dictionary,
        train,
        dev,
        test,
    })
}

/// Codes whose description or a synonym occurs verbatim (as a contiguous
/// token sequence) in `text`.
pub fn oracle_labels(text: &str, dictionary: &Dictionary) -> BTreeSet<String> {
    let tokens = tokenize(text);
    dictionary
        .entries()
        .iter()
        .filter(|e| e.pool().any(|t| contains_phrase(&tokens, &tokenize(t))))
        .map(|e| e.code.clone())
        .collect()
}
