//! Shared text encoder: embedding lookup, embedding dropout, a stacked
//! bidirectional LSTM and a linear projection to the output width `h`.
//!
//! The same parameters encode documents (one hidden row per token) and
//! synonyms (max-pooled over tokens into a single vector).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};
use crate::text::PAD_ID;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub emb_dim: usize,
    pub lstm_layers: usize,
    /// Hidden width of each LSTM direction.
    pub lstm_hidden: usize,
    /// Output width `h` after the projection.
    pub output_dim: usize,
    pub emb_dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.lstm_layers == 0 || self.lstm_hidden == 0 || self.output_dim == 0 {
            return Err(Error::invalid(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.emb_dropout) {
            return Err(Error::invalid(format!("embedding dropout {} outside [0, 1)", self.emb_dropout)));
        }
        Ok(())
    }
}

/// Weights of one LSTM direction. Gate blocks are ordered input, forget,
/// candidate, output along the last axis.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embedding: ParamId,
    /// `[forward, backward]` per layer.
    pub layers: Vec<[LstmDirection; 2]>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl EncoderParams {
    /// Registers encoder parameters. LSTM weights are uniform in
    /// ±1/√hidden, biases zero except the forget gate (1.0); the output
    /// projection is Glorot-uniform.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        embedding: &Tensor<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if embedding.rank() != 2 || embedding.shape()[1] != cfg.emb_dim {
            return Err(Error::EmbeddingDim {
                expected: cfg.emb_dim,
                found: *embedding.shape().last().unwrap(),
            });
        }
        let embedding = store.add("encoder.embedding", embedding.cast());
        let hid = cfg.lstm_hidden;
        let bound = 1.0 / (hid as f64).sqrt();
        let mut uniform = |shape: &[usize], bound: f64| Tensor::<T>::from_fn(shape, |_| T::of(rng.uniform_range(-bound, bound)));
        let mut layers = Vec::with_capacity(cfg.lstm_layers);
        for layer in 0..cfg.lstm_layers {
            let input = if layer == 0 { cfg.emb_dim } else { 2 * hid };
            let dirs = ["fwd", "bwd"].map(|dir| {
                let prefix = format!("encoder.lstm.{layer}.{dir}");
                let w_ih = store.add(format!("{prefix}.w_ih"), uniform(&[input, 4 * hid], bound));
                let w_hh = store.add(format!("{prefix}.w_hh"), uniform(&[hid, 4 * hid], bound));
                let bias = Tensor::from_fn(&[4 * hid], |i| if (hid..2 * hid).contains(&i) { T::one() } else { T::zero() });
                let bias = store.add(format!("{prefix}.bias"), bias);
                LstmDirection { w_ih, w_hh, bias }
            });
            layers.push(dirs);
        }
        let proj_w = store.add("encoder.proj.w", glorot_uniform(&[2 * hid, cfg.output_dim], rng));
        let proj_b = store.add("encoder.proj.b", Tensor::zeros(&[cfg.output_dim]));
        Ok(Self {
            embedding,
            layers,
            proj_w,
            proj_b,
        })
    }
}

/// Everything a forward pass needs besides the inputs.
pub struct Pass<'a, T> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub rng: &'a mut Rng,
    pub training: bool,
}

impl<T: Real> Pass<'_, T> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

/// Per-position validity masks for a padded batch: `masks[t][b]` is true
/// when sequence `b` has a token at position `t`. `None` when every
/// sequence reaches position `t`.
fn step_masks(lengths: &[usize], steps: usize) -> Vec<Option<Arc<Vec<bool>>>> {
    (0..steps)
        .map(|t| {
            let m: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
            if m.iter().all(|&x| x) {
                None
            } else {
                Some(Arc::new(m))
            }
        })
        .collect()
}

/// Encodes a padded batch of token sequences into `[B, N_max, h]`.
/// Rows past a sequence's length hold unspecified values and must be
/// masked by the caller.
pub fn encode_batch<T: Real>(
    pass: &mut Pass<'_, T>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    seqs: &[&[u32]],
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::Empty("no sequences to encode".into()));
    }
    if let Some(i) = seqs.iter().position(|s| s.is_empty()) {
        return Err(Error::Empty(format!("sequence {i} has no tokens")));
    }
    let batch = seqs.len();
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let steps = *lengths.iter().max().unwrap();
    let mut ids = Vec::with_capacity(batch * steps);
    for s in seqs {
        ids.extend(s.iter().map(|&t| t as usize));
        ids.extend(std::iter::repeat(PAD_ID as usize).take(steps - s.len()));
    }

    let table = pass.param(params.embedding);
    let emb = pass.graph.gather(table, &ids)?;
    let mut flat = pass.graph.dropout(emb, cfg.emb_dropout, pass.rng, pass.training)?;

    let masks = step_masks(&lengths, steps);
    let hid = cfg.lstm_hidden;
    for layer in &params.layers {
        let mut outputs = Vec::with_capacity(2);
        for (d, dir) in layer.iter().enumerate() {
            let w_ih = pass.param(dir.w_ih);
            let w_hh = pass.param(dir.w_hh);
            let bias = pass.param(dir.bias);
            let xw = pass.graph.matmul(flat, w_ih)?;
            let xw = pass.graph.add_bias(xw, bias)?;
            let xw = pass.graph.reshape(xw, &[batch, steps, 4 * hid])?;
            outputs.push(run_direction(pass.graph, xw, w_hh, hid, &masks, d == 1)?);
        }
        let both = pass.graph.concat(&outputs, 2)?;
        flat = pass.graph.reshape(both, &[batch * steps, 2 * hid])?;
    }
    let w = pass.param(params.proj_w);
    let b = pass.param(params.proj_b);
    let projected = pass.graph.matmul(flat, w)?;
    let projected = pass.graph.add_bias(projected, b)?;
    pass.graph.reshape(projected, &[batch, steps, cfg.output_dim])
}

/// One LSTM direction over pre-multiplied inputs `xw: [B, N, 4·hid]`.
/// At padded positions the state is carried through unchanged, so the
/// backward direction starts from zeros at each sequence's last token.
fn run_direction<T: Real>(
    g: &mut Graph<T>,
    xw: Var,
    w_hh: Var,
    hid: usize,
    masks: &[Option<Arc<Vec<bool>>>],
    reverse: bool,
) -> Result<Var> {
    let steps = masks.len();
    let mut state = None;
    let mut states = vec![None; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let next = g.lstm_step(xw, t, state, w_hh, masks[t].clone())?;
        state = Some(next);
        states[t] = Some(next);
    }
    let states: Vec<Var> = states.into_iter().map(|s| s.expect("every step visited")).collect();
    let stacked = g.stack(&states, 1)?;
    g.narrow(stacked, 2, 0, hid)
}

/// Hidden states `[N, h]` of one document.
pub fn encode_text<T: Real>(pass: &mut Pass<'_, T>, params: &EncoderParams, cfg: &EncoderConfig, tokens: &[u32]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Empty("document has no tokens".into()));
    }
    let h = encode_batch(pass, params, cfg, &[tokens])?;
    pass.graph.reshape(h, &[tokens.len(), cfg.output_dim])
}

/// Max-pooled representation `[h]` of one synonym.
pub fn encode_synonym<T: Real>(pass: &mut Pass<'_, T>, params: &EncoderParams, cfg: &EncoderConfig, tokens: &[u32]) -> Result<Var> {
    let q = encode_synonyms(pass, params, cfg, &[tokens])?;
    pass.graph.reshape(q, &[cfg.output_dim])
}

/// Max-pooled representations `[S, h]` of a batch of synonyms; padded
/// positions are excluded from the max.
pub fn encode_synonyms<T: Real>(pass: &mut Pass<'_, T>, params: &EncoderParams, cfg: &EncoderConfig, seqs: &[&[u32]]) -> Result<Var> {
    if seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::Empty("synonym has no tokens".into()));
    }
    let states = encode_batch(pass, params, cfg, seqs)?;
    let steps = pass.graph.shape(states)[1];
    let h = cfg.output_dim;
    let states = if seqs.iter().all(|s| s.len() == steps) {
        states
    } else {
        let mut pad = Vec::with_capacity(seqs.len() * steps * h);
        for s in seqs {
            for t in 0..steps {
                pad.extend(std::iter::repeat(t >= s.len()).take(h));
            }
        }
        pass.graph.masked_fill(states, Arc::new(pad), T::neg_infinity())?
    };
    pass.graph.max_axis(states, 1)
}
