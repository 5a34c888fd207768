//! Code representations and the three scoring functions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::Pass;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    /// `vᵀ W q + b` with one shared `W: [h, h]`.
    Biaffine,
    /// `vᵀ q + b`.
    Dot,
    /// `vᵀ w_l + b_l` with a weight row per code.
    PerLabel,
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "biaffine" => Ok(Self::Biaffine),
            "dot" => Ok(Self::Dot),
            "per-label" | "per_label" => Ok(Self::PerLabel),
            other => Err(Error::invalid(format!("unknown scorer `{other}` (biaffine|dot|per-label)"))),
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Biaffine => "biaffine",
            Self::Dot => "dot",
            Self::PerLabel => "per-label",
        })
    }
}

/// Number of scorer parameters for `h`-wide representations and `codes` labels.
pub fn parameter_count(kind: ScorerKind, h: usize, codes: usize) -> usize {
    match kind {
        ScorerKind::Biaffine => h * h + 1,
        ScorerKind::Dot => 1,
        ScorerKind::PerLabel => codes * (h + 1),
    }
}

#[derive(Clone, Debug)]
pub struct ScorerParams {
    pub kind: ScorerKind,
    pub bias: ParamId,
    /// Biaffine `W`.
    pub bilinear: Option<ParamId>,
    /// Per-label `[C, h]` weights.
    pub label_weights: Option<ParamId>,
    pub codes: usize,
}

impl ScorerParams {
    /// Biaffine `W` starts at identity plus uniform(±0.01) noise.
    pub fn init<T: Real>(store: &mut ParamStore<T>, kind: ScorerKind, h: usize, codes: usize, rng: &mut Rng) -> Self {
        let (bilinear, label_weights, bias) = match kind {
            ScorerKind::Biaffine => {
                let w = Tensor::from_fn(&[h, h], |i| {
                    let eye = if i / h == i % h { 1.0 } else { 0.0 };
                    T::of(eye + rng.uniform_range(-0.01, 0.01))
                });
                (Some(store.add("scorer.w", w)), None, store.add("scorer.b", Tensor::zeros(&[1])))
            }
            ScorerKind::Dot => (None, None, store.add("scorer.b", Tensor::zeros(&[1]))),
            ScorerKind::PerLabel => {
                let bound = 1.0 / (h as f64).sqrt();
                let w = Tensor::from_fn(&[codes, h], |_| T::of(rng.uniform_range(-bound, bound)));
                (None, Some(store.add("scorer.w_l", w)), store.add("scorer.b_l", Tensor::zeros(&[codes])))
            }
        };
        Self {
            kind,
            bias,
            bilinear,
            label_weights,
            codes,
        }
    }

    /// Scalars held by this scorer in `store`.
    pub fn count_in<T: Real>(&self, store: &ParamStore<T>) -> usize {
        [Some(self.bias), self.bilinear, self.label_weights]
            .into_iter()
            .flatten()
            .map(|id| store.value(id).numel())
            .sum()
    }
}

/// `q_l = max_j q^j` for a list of `[h]` queries.
pub fn code_repr<T: Real>(g: &mut Graph<T>, queries: &[Var]) -> Result<Var> {
    g.maxpool(queries)
}

/// Logits `[B, C]` from code-wise text representations `reprs: [B, C, h]`
/// and code representations `codes: [C, h]`.
pub fn score_batched<T: Real>(pass: &mut Pass<'_, T>, params: &ScorerParams, reprs: Var, codes: Var) -> Result<Var> {
    let rs = pass.graph.shape(reprs).to_vec();
    let cs = pass.graph.shape(codes).to_vec();
    if rs.len() != 3 || cs.len() != 2 || rs[1..] != cs[..] {
        return Err(Error::shape("score", &rs, &cs));
    }
    let bias = pass.param(params.bias);
    let logits = match params.kind {
        ScorerKind::Biaffine => {
            let w = pass.param(params.bilinear.expect("biaffine weights"));
            let wq = pass.graph.contract("ij,cj->ci", w, codes)?;
            pass.graph.contract("bch,ch->bc", reprs, wq)?
        }
        ScorerKind::Dot => pass.graph.contract("bch,ch->bc", reprs, codes)?,
        ScorerKind::PerLabel => {
            if cs[0] != params.codes {
                return Err(Error::shape("per-label score", &cs, &[params.codes]));
            }
            let w = pass.param(params.label_weights.expect("per-label weights"));
            pass.graph.contract("bch,ch->bc", reprs, w)?
        }
    };
    pass.graph.add_bias(logits, bias)
}

/// Logit of one code: `v: [h]`, `q: [h]`, `label` indexes the per-label rows.
pub fn score<T: Real>(pass: &mut Pass<'_, T>, params: &ScorerParams, v: Var, q: Var, label: usize) -> Result<Var> {
    let h = pass.graph.shape(v)[0];
    if pass.graph.shape(v) != pass.graph.shape(q) || pass.graph.shape(v).len() != 1 {
        return Err(Error::shape("score", pass.graph.shape(v), pass.graph.shape(q)));
    }
    let rows = pass.graph.reshape(v, &[1, h])?;
    let codes = pass.graph.reshape(q, &[1, h])?;
    let logit = match params.kind {
        ScorerKind::Biaffine => {
            let w = pass.param(params.bilinear.expect("biaffine weights"));
            let wq = pass.graph.contract("ij,cj->ci", w, codes)?;
            let vw = pass.graph.contract("ch,ch->c", rows, wq)?;
            let b = pass.param(params.bias);
            pass.graph.add(vw, b)?
        }
        ScorerKind::Dot => {
            let d = pass.graph.contract("ch,ch->c", rows, codes)?;
            let b = pass.param(params.bias);
            pass.graph.add(d, b)?
        }
        ScorerKind::PerLabel => {
            if label >= params.codes {
                return Err(Error::invalid(format!("label {label} out of range for {} codes", params.codes)));
            }
            let w = pass.param(params.label_weights.expect("per-label weights"));
            let b = pass.param(params.bias);
            let wl = pass.graph.narrow(w, 0, label, 1)?;
            let bl = pass.graph.narrow(b, 0, label, 1)?;
            let d = pass.graph.contract("ch,ch->c", rows, wl)?;
            pass.graph.add(d, bl)?
        }
    };
    Ok(logit)
}
