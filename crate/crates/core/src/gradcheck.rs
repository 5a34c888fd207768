//! Finite-difference verification of every analytic gradient of a micro
//! model under the full training objective (two dropout passes plus the
//! symmetric KL term).
//!
//! The difference quotient is always taken at 64-bit on an exact copy of
//! the weights, so a 32-bit run checks its analytic gradients against the
//! same oracle; only the tolerance differs (1e-3 at 64-bit, 1e-2 at 32-bit).
//!
//! Dropout masks are fixed by reseeding the dropout stream before every
//! loss evaluation, so the perturbed losses see the same network.

use serde::Serialize;

use crate::classifier::ScorerKind;
use crate::encoder::{EncoderConfig, Pass};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Msmn};
use crate::tensor::{Graph, Real, Rng, Tensor};
use crate::training::rdrop_graph;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub emb_dim: usize,
    pub lstm_hidden: usize,
    pub output_dim: usize,
    pub synonyms: usize,
    pub codes: usize,
    pub max_doc_len: usize,
    pub docs: usize,
    pub vocab: usize,
    pub scorer: ScorerKind,
    pub dropout: f64,
    pub rdrop_weight: f64,
    /// Central-difference step.
    pub eps: f64,
    /// Pass bound on the per-group maximum relative error.
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: scales the analytic gradient of this group by 1.5.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self::micro_f64()
    }
}

impl GradcheckConfig {
    /// `e = 8`, hidden 6, `h = 8`, `M = 2`, `C = 3`, documents of at most 5 tokens.
    pub fn micro_f64() -> Self {
        Self {
            emb_dim: 8,
            lstm_hidden: 6,
            output_dim: 8,
            synonyms: 2,
            codes: 3,
            max_doc_len: 5,
            docs: 3,
            vocab: 12,
            scorer: ScorerKind::Biaffine,
            dropout: 0.2,
            rdrop_weight: 5.0,
            eps: 1e-4,
            tolerance: 1e-3,
            seed: 7,
            corrupt: None,
        }
    }

    /// Same model with 32-bit analytic gradients and the relaxed 1e-2 bound.
    pub fn micro_f32() -> Self {
        Self {
            tolerance: 1e-2,
            ..Self::micro_f64()
        }
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                emb_dim: self.emb_dim,
                lstm_layers: 1,
                lstm_hidden: self.lstm_hidden,
                output_dim: self.output_dim,
                emb_dropout: self.dropout,
            },
            synonyms: self.synonyms,
            scorer: self.scorer,
            rep_dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub precision: &'static str,
    pub eps: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.name.as_str()).collect()
    }

    pub fn table(&self) -> String {
        let width = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "gradient check: {}-bit, eps {:e}, tolerance {:e}, loss {:.6}\n",
            self.precision, self.eps, self.tolerance, self.loss
        );
        out += &format!("{:<width$}  {:>6}  {:>12}  {:>12}  result\n", "group", "size", "max rel", "max abs");
        for g in &self.groups {
            out += &format!(
                "{:<width$}  {:>6}  {:>12.3e}  {:>12.3e}  {}\n",
                g.name,
                g.numel,
                g.max_rel_error,
                g.max_abs_error,
                if g.passed { "ok" } else { "FAIL" }
            );
        }
        out += if self.passed() { "PASS\n" } else { "FAIL\n" };
        out
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`: relative error with a floor so that
/// gradients that are zero up to rounding compare on absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

struct Fixture {
    docs: Vec<Vec<u32>>,
    synonyms: Vec<Vec<u32>>,
    targets: Vec<f64>,
}

fn fixture(cfg: &GradcheckConfig, rng: &mut Rng) -> Fixture {
    // token 0 is padding and 1 unknown; real tokens start at 2
    let token = |rng: &mut Rng| 2 + rng.below(cfg.vocab - 2) as u32;
    let docs = (0..cfg.docs)
        .map(|i| {
            // lengths cycle downwards from the maximum so batches are ragged
            let len = cfg.max_doc_len - i % cfg.max_doc_len.min(3);
            (0..len).map(|_| token(rng)).collect()
        })
        .collect();
    let synonyms = (0..cfg.codes * cfg.synonyms)
        .map(|_| {
            let len = rng.between(1, 3);
            (0..len).map(|_| token(rng)).collect()
        })
        .collect();
    let targets = (0..cfg.docs * cfg.codes).map(|_| rng.bernoulli(0.4) as u8 as f64).collect();
    Fixture { docs, synonyms, targets }
}

fn loss_and_grad<T: Real>(model: &mut Msmn<T>, fx: &Fixture, cfg: &GradcheckConfig, backward: bool) -> Result<f64> {
    let docs: Vec<&[u32]> = fx.docs.iter().map(Vec::as_slice).collect();
    let targets: Vec<T> = fx.targets.iter().map(|&y| T::of(y)).collect();
    let mut g = Graph::new();
    let mut rng = Rng::new(cfg.seed).fork(4);
    let mut pass = Pass {
        graph: &mut g,
        store: &model.store,
        rng: &mut rng,
        training: true,
    };
    let a = model.forward(&mut pass, &docs, &fx.synonyms)?.logits;
    let b = model.forward(&mut pass, &docs, &fx.synonyms)?.logits;
    let loss = rdrop_graph(&mut g, a, Some(b), &targets, cfg.rdrop_weight)?;
    let value = g.value(loss).item().as_f64();
    if backward {
        model.store.zero_grad();
        g.backward(loss, &mut model.store)?;
    }
    Ok(value)
}

/// Compares every scalar of every parameter against central differences.
pub fn gradcheck<T: Real>(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.vocab < 3 || cfg.docs == 0 || cfg.max_doc_len == 0 || cfg.eps <= 0.0 {
        return Err(Error::invalid("gradient check needs a vocabulary of 3+, documents and a positive step"));
    }
    let root = Rng::new(cfg.seed);
    let fx = fixture(cfg, &mut root.fork(1));
    let mut emb_rng = root.fork(2);
    // wider than the training initialization so the check sees non-trivial activations
    let embedding = Tensor::from_fn(&[cfg.vocab, cfg.emb_dim], |i| {
        if i < cfg.emb_dim {
            0.0
        } else {
            emb_rng.uniform_range(-1.0, 1.0)
        }
    });
    let mut model = Msmn::<T>::new(cfg.model_config(), cfg.codes, &embedding, &mut root.fork(3))?;
    let loss = loss_and_grad(&mut model, &fx, cfg, true)?;
    if let Some(name) = &cfg.corrupt {
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::invalid(format!("no parameter group `{name}` to corrupt")))?;
        model.store.get_mut(id).grad.iter_mut().for_each(|g| *g = *g * T::of(1.5));
    }
    let analytic: Vec<Vec<f64>> = model.store.iter().map(|p| p.grad.iter().map(|g| g.as_f64()).collect()).collect();

    // the difference quotient always runs at 64-bit on an exact copy
    let mut oracle = Msmn::<f64>::new(cfg.model_config(), cfg.codes, &embedding, &mut root.fork(3))?;
    oracle.store.load(model.store.iter().map(|p| (p.name.clone(), p.value.cast())))?;

    let mut groups = Vec::with_capacity(model.store.len());
    for (id, grads) in model.store.ids().collect::<Vec<_>>().into_iter().zip(analytic) {
        let (mut max_rel, mut max_abs) = (0.0_f64, 0.0_f64);
        for (i, &a) in grads.iter().enumerate() {
            let orig = oracle.store.value(id).data()[i];
            let set = |x: f64, model: &mut Msmn<f64>| model.store.get_mut(id).value_mut().data_mut()[i] = x;
            set(orig + cfg.eps, &mut oracle);
            let plus = loss_and_grad(&mut oracle, &fx, cfg, false)?;
            set(orig - cfg.eps, &mut oracle);
            let minus = loss_and_grad(&mut oracle, &fx, cfg, false)?;
            set(orig, &mut oracle);
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        let p = model.store.get(id);
        groups.push(GroupCheck {
            name: p.name.clone(),
            numel: grads.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < cfg.tolerance,
        });
    }
    Ok(GradcheckReport {
        precision: if T::BITS == 64 { "64" } else { "32" },
        eps: cfg.eps,
        tolerance: cfg.tolerance,
        loss,
        groups,
    })
}
