//! The full network: shared encoder, multi-synonyms attention and scorer.

use serde::{Deserialize, Serialize};

use crate::attention::{codewise_batched, head_width, AttentionParams};
use crate::classifier::{score_batched, ScorerKind, ScorerParams};
use crate::encoder::{encode_batch, encode_synonyms, EncoderConfig, EncoderParams, Pass};
use crate::error::{Error, Result};
use crate::synonyms::SynonymSample;
use crate::tensor::{Graph, ParamStore, Real, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Synonyms per code, `M`; also the number of attention heads.
    pub synonyms: usize,
    pub scorer: ScorerKind,
    /// Dropout on code-wise representations before scoring.
    pub rep_dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        head_width(self.encoder.output_dim, self.synonyms)?;
        if !(0.0..1.0).contains(&self.rep_dropout) {
            return Err(Error::invalid(format!("representation dropout {} outside [0, 1)", self.rep_dropout)));
        }
        Ok(())
    }
}

/// Token ids of all `C·M` sampled synonyms, code-major.
pub fn synonym_inputs(samples: &[SynonymSample]) -> Vec<Vec<u32>> {
    samples.iter().flat_map(|s| s.token_ids.iter().cloned()).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, C]`
    pub logits: Var,
    /// `[B, C, N, M]`
    pub alphas: Var,
    /// Synonym representations `[C, M, h]`.
    pub queries: Var,
    /// Pooled code representations `[C, h]`.
    pub code_reprs: Var,
}

#[derive(Clone, Debug)]
pub struct Msmn<T> {
    pub config: ModelConfig,
    pub num_codes: usize,
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    pub scorer: ScorerParams,
}

impl<T: Real> Msmn<T> {
    pub fn new(config: ModelConfig, num_codes: usize, embedding: &Tensor<f64>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if num_codes == 0 {
            return Err(Error::invalid("model needs at least one code"));
        }
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config.encoder, embedding, rng)?;
        let attention = AttentionParams::init(&mut store, config.encoder.output_dim, config.synonyms, rng)?;
        let scorer = ScorerParams::init(&mut store, config.scorer, config.encoder.output_dim, num_codes, rng);
        Ok(Self {
            config,
            num_codes,
            store,
            encoder,
            attention,
            scorer,
        })
    }

    /// Sets every scorer bias to the log-odds of `prior`, the base rate of
    /// a positive label, so training starts at the marginal distribution.
    pub fn set_prior_bias(&mut self, prior: f64) -> Result<()> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::invalid(format!("label prior {prior} outside (0, 1)")));
        }
        let logit = T::of((prior / (1.0 - prior)).ln());
        self.store.get_mut(self.scorer.bias).value_mut().data_mut().iter_mut().for_each(|b| *b = logit);
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.store.value(self.encoder.embedding).shape()[0]
    }

    fn check_synonyms(&self, synonyms: &[Vec<u32>]) -> Result<()> {
        let want = self.num_codes * self.config.synonyms;
        if synonyms.len() != want {
            return Err(Error::invalid(format!(
                "expected {want} synonyms ({} codes × {}), got {}",
                self.num_codes,
                self.config.synonyms,
                synonyms.len()
            )));
        }
        Ok(())
    }

    /// Synonym representations `q^j` as `[C, M, h]`.
    pub fn queries(&self, pass: &mut Pass<'_, T>, synonyms: &[Vec<u32>]) -> Result<Var> {
        self.check_synonyms(synonyms)?;
        let seqs: Vec<&[u32]> = synonyms.iter().map(Vec::as_slice).collect();
        let q = encode_synonyms(pass, &self.encoder, &self.config.encoder, &seqs)?;
        pass.graph.reshape(q, &[self.num_codes, self.config.synonyms, self.config.encoder.output_dim])
    }

    /// Logits for `docs` against precomputed `queries: [C, M, h]`.
    pub fn forward_with_queries(&self, pass: &mut Pass<'_, T>, docs: &[&[u32]], queries: Var) -> Result<Forward> {
        let lengths: Vec<usize> = docs.iter().map(|d| d.len()).collect();
        let hidden = encode_batch(pass, &self.encoder, &self.config.encoder, docs)?;
        let cw = codewise_batched(pass, &self.attention, hidden, &lengths, queries)?;
        let reprs = pass.graph.dropout(cw.reprs, self.config.rep_dropout, pass.rng, pass.training)?;
        let code_reprs = pass.graph.max_axis(queries, 1)?;
        let logits = score_batched(pass, &self.scorer, reprs, code_reprs)?;
        Ok(Forward {
            logits,
            alphas: cw.alphas,
            queries,
            code_reprs,
        })
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, docs: &[&[u32]], synonyms: &[Vec<u32>]) -> Result<Forward> {
        let queries = self.queries(pass, synonyms)?;
        self.forward_with_queries(pass, docs, queries)
    }

    /// Eval-mode synonym representations `[C, M, h]` and code representations `[C, h]`.
    pub fn synonym_reprs(&self, synonyms: &[Vec<u32>]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let mut pass = Pass {
            graph: &mut g,
            store: &self.store,
            rng: &mut rng,
            training: false,
        };
        let q = self.queries(&mut pass, synonyms)?;
        let pooled = pass.graph.max_axis(q, 1)?;
        Ok((g.value(q).clone(), g.value(pooled).clone()))
    }

    /// Eval-mode probabilities, one row of `C` per document.
    pub fn predict(&self, docs: &[&[u32]], synonyms: &[Vec<u32>], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let (queries, _) = self.synonym_reprs(synonyms)?;
        let mut rng = Rng::new(0);
        let mut out = Vec::with_capacity(docs.len());
        for chunk in docs.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let q = g.constant(queries.clone());
            let mut pass = Pass {
                graph: &mut g,
                store: &self.store,
                rng: &mut rng,
                training: false,
            };
            let f = self.forward_with_queries(&mut pass, chunk, q)?;
            let logits = g.value(f.logits);
            for row in logits.data().chunks(self.num_codes) {
                out.push(row.iter().map(|&x| crate::tensor::sigmoid(x).as_f64()).collect());
            }
        }
        Ok(out)
    }
}
