//! Code dictionary, synonym normalization and per-code synonym sampling.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::text::{read_jsonl, tokenize, write_jsonl, Vocabulary};

/// Synonyms longer than this many tokens are cut.
pub const MAX_SYNONYM_TOKENS: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub code: String,
    pub description: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

impl CodeEntry {
    /// Builds an entry, dropping synonyms that repeat the description or
    /// each other (case-insensitively).
    pub fn new(code: impl Into<String>, description: impl Into<String>, synonyms: Vec<String>) -> Result<Self> {
        let code = code.into();
        let description = collapse_ws(&description.into());
        if description.is_empty() {
            return Err(Error::invalid(format!("code `{code}` has an empty description")));
        }
        let mut seen = HashSet::from([description.to_lowercase()]);
        let synonyms = synonyms
            .iter()
            .map(|s| collapse_ws(s))
            .filter(|s| !s.is_empty() && seen.insert(s.to_lowercase()))
            .collect();
        Ok(Self {
            code,
            description,
            synonyms,
        })
    }

    /// Description followed by the synonyms.
    pub fn pool(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.description).chain(&self.synonyms)
    }

    pub fn pool_len(&self) -> usize {
        1 + self.synonyms.len()
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn without_hyphens(s: &str) -> String {
    collapse_ws(&s.replace('-', " "))
}

fn without_nos(s: &str) -> String {
    let words: Vec<&str> = s.split_whitespace().collect();
    let kept: Vec<&str> = words
        .iter()
        .copied()
        .filter(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()) != "NOS")
        .collect();
    if kept.len() == words.len() {
        return collapse_ws(s);
    }
    // "Anemia, NOS" leaves a dangling separator behind
    kept.join(" ").trim_end_matches([',', ';', ':']).trim().to_string()
}

/// Adds the hyphen-free and "NOS"-free variants of every term of `entry`,
/// closed under both rules, then deduplicates.
pub fn normalize_entry(entry: &CodeEntry) -> CodeEntry {
    let mut terms: Vec<String> = entry.pool().cloned().collect();
    let mut seen: HashSet<String> = terms.iter().map(|t| t.to_lowercase()).collect();
    let mut i = 0;
    while i < terms.len() {
        let t = terms[i].clone();
        for variant in [without_hyphens(&t), without_nos(&t)] {
            if !variant.is_empty() && seen.insert(variant.to_lowercase()) {
                terms.push(variant);
            }
        }
        i += 1;
    }
    CodeEntry {
        code: entry.code.clone(),
        description: terms[0].clone(),
        synonyms: terms[1..].to_vec(),
    }
}

/// Exactly `M` strings drawn for one code, with their token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymSample {
    pub code: String,
    pub chosen: Vec<String>,
    pub token_ids: Vec<Vec<u32>>,
}

impl SynonymSample {
    pub fn tokenize_with(&mut self, vocab: &Vocabulary) {
        self.token_ids = self
            .chosen
            .iter()
            .map(|s| {
                let toks = tokenize(s);
                let mut ids = vocab.encode(&toks[..toks.len().min(MAX_SYNONYM_TOKENS)]);
                if ids.is_empty() {
                    ids.push(crate::text::UNK_ID);
                }
                ids
            })
            .collect();
    }
}

/// Draws `m` strings from `{description} ∪ synonyms`.
///
/// The description always comes first. When the pool holds at least `m`
/// strings the other `m − 1` are distinct synonyms chosen uniformly;
/// otherwise the whole pool is repeated round-robin up to length `m`.
pub fn sample_synonyms(entry: &CodeEntry, m: usize, rng: &mut Rng) -> SynonymSample {
    assert!(m >= 1, "at least one synonym per code");
    let pool: Vec<&String> = entry.pool().collect();
    let chosen: Vec<String> = if pool.len() >= m {
        std::iter::once(pool[0].clone())
            .chain(rng.sample_indices(entry.synonyms.len(), m - 1).into_iter().map(|i| entry.synonyms[i].clone()))
            .collect()
    } else {
        (0..m).map(|i| pool[i % pool.len()].clone()).collect()
    };
    SynonymSample {
        code: entry.code.clone(),
        chosen,
        token_ids: Vec::new(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dictionary {
    entries: Vec<CodeEntry>,
    index: HashMap<String, usize>,
}

impl Dictionary {
    pub fn new(entries: Vec<CodeEntry>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.code.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    id: e.code.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Self { entries, index })
    }

    /// Reads a dictionary file: one `{code, description, synonyms}` record per line.
    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (line, raw) in read_jsonl::<CodeEntry>(path)? {
            let e = CodeEntry::new(raw.code, raw.description, raw.synonyms).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line,
                msg: e.to_string(),
            })?;
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries)
    }

    pub fn normalized(&self) -> Self {
        Self {
            entries: self.entries.iter().map(normalize_entry).collect(),
            index: self.index.clone(),
        }
    }

    pub fn get(&self, code: &str) -> Option<&CodeEntry> {
        self.index.get(code).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[CodeEntry] {
        &self.entries
    }

    pub fn codes(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.code.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One sample per code, in dictionary order.
    pub fn sample_all(&self, m: usize, rng: &mut Rng, vocab: &Vocabulary) -> Vec<SynonymSample> {
        self.entries
            .iter()
            .map(|e| {
                let mut s = sample_synonyms(e, m, rng);
                s.tokenize_with(vocab);
                s
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(desc: &str, syns: &[&str]) -> CodeEntry {
        CodeEntry::new("X", desc, syns.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn entry_dedupes_case_insensitively() {
        let e = entry("Asthma", &["asthma", "Wheezing", "WHEEZING", "  "]);
        assert_eq!(e.synonyms, vec!["Wheezing"]);
        assert!(CodeEntry::new("X", " ", vec![]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let e = normalize_entry(&entry("Asthma NOS", &[]));
        assert_eq!(e.synonyms, vec!["Asthma"]);

        let e = normalize_entry(&entry("anemia - iron deficiency", &[]));
        assert_eq!(e.synonyms, vec!["anemia iron deficiency"]);

        let plain = entry("Unspecified hypothyroidism", &["low t4"]);
        assert_eq!(normalize_entry(&plain), plain);
    }

    #[test]
    fn normalize_applies_rules_in_combination() {
        let e = normalize_entry(&entry("Anemia, NOS", &["iron-deficiency anemia NOS"]));
        let all: Vec<&String> = e.pool().collect();
        assert!(all.iter().any(|s| *s == "Anemia"));
        assert!(all.iter().any(|s| *s == "iron deficiency anemia"));
        assert_eq!(normalize_entry(&e), e);
    }

    #[test]
    fn sample_repeats_small_pools() {
        let e = entry("a", &["b"]);
        let s = sample_synonyms(&e, 4, &mut Rng::new(0));
        assert_eq!(s.chosen, vec!["a", "b", "a", "b"]);
    }

    #[test]
    fn sample_single_is_description() {
        let e = entry("desc", &["s1", "s2", "s3"]);
        for seed in 0..10 {
            assert_eq!(sample_synonyms(&e, 1, &mut Rng::new(seed)).chosen, vec!["desc"]);
        }
    }

    #[test]
    fn sample_is_reproducible_and_distinct() {
        let syns: Vec<String> = (1..10).map(|i| format!("s{i}")).collect();
        let e = CodeEntry::new("X", "desc", syns).unwrap();
        let a = sample_synonyms(&e, 4, &mut Rng::new(9));
        let b = sample_synonyms(&e, 4, &mut Rng::new(9));
        assert_eq!(a, b);
        let distinct: HashSet<&String> = a.chosen.iter().collect();
        assert_eq!(distinct.len(), 4);
        assert_eq!(a.chosen[0], "desc");
    }

    #[test]
    fn long_synonyms_are_cut() {
        let long = vec!["w"; 50].join(" ");
        let e = entry(&long, &[]);
        let vocab = Vocabulary::build([vec!["w".to_string()]].iter());
        let mut s = sample_synonyms(&e, 1, &mut Rng::new(0));
        s.tokenize_with(&vocab);
        assert_eq!(s.token_ids[0].len(), MAX_SYNONYM_TOKENS);
    }
}
