//! Versioned JSON checkpoints holding the run configuration, vocabulary,
//! code order, sampled synonyms, the decision threshold and every parameter.
//!
//! Parameters are stored as 64-bit floats printed with round-trip precision,
//! so save → load reproduces a 64-bit model exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Msmn;
use crate::synonyms::{Dictionary, SynonymSample};
use crate::tensor::{Real, Rng, Tensor};
use crate::text::Vocabulary;
use crate::training::Threshold;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub run: RunConfig,
    pub codes: Vec<String>,
    pub vocab: Vocabulary,
    pub synonyms: Vec<SynonymSample>,
    pub threshold: Threshold,
    pub best_epoch: usize,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn new<T: Real>(
        model: &Msmn<T>,
        run: &RunConfig,
        codes: Vec<String>,
        vocab: &Vocabulary,
        synonyms: Vec<SynonymSample>,
        threshold: Threshold,
        best_epoch: usize,
    ) -> Self {
        let params = model
            .store
            .iter()
            .map(|p| StoredParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.to_f64_vec(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            run: run.clone(),
            codes,
            vocab: vocab.clone(),
            synonyms,
            threshold,
            best_epoch,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version(ck.version));
        }
        ck.vocab.reindex();
        Ok(ck)
    }

    /// Rebuilds the model at precision `T`.
    pub fn model<T: Real>(&self) -> Result<Msmn<T>> {
        let emb = self
            .params
            .iter()
            .find(|p| p.name == "encoder.embedding")
            .ok_or_else(|| Error::invalid("checkpoint lacks the embedding table"))?;
        let placeholder = Tensor::zeros(&emb.shape);
        let mut model = Msmn::new(self.run.model(), self.codes.len(), &placeholder, &mut Rng::new(0))?;
        if model.store.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let tensors = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), Tensor::<f64>::new(p.shape.clone(), p.data.clone())?.cast())))
            .collect::<Result<Vec<_>>>()?;
        model.store.load(tensors)?;
        Ok(model)
    }

    /// Errors unless `dictionary` holds exactly the checkpoint's codes,
    /// listing the codes present on one side only.
    pub fn check_codes(&self, dictionary: &Dictionary) -> Result<()> {
        let dict_codes = dictionary.codes();
        let mut missing: Vec<String> = self.codes.iter().filter(|c| dictionary.get(c).is_none()).cloned().collect();
        missing.extend(dict_codes.iter().filter(|c| !self.codes.contains(c)).cloned());
        if !missing.is_empty() {
            return Err(Error::CodeMismatch(missing));
        }
        Ok(())
    }
}
