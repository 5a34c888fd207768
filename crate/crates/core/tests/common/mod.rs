//! Independent reference implementations shared by the integration tests
//! and the acceptance suite. Everything here is plain loops over `f64`
//! slices, with no use of the graph or the library's metric code.

#![allow(dead_code)]

use msmn::attention::{codewise_batched, codewise_repr, AttentionParams};
use msmn::encoder::Pass;
use msmn::tensor::{Graph, ParamStore, Rng, Tensor};

/// Raw attention weights: `w_q` is `[h, dh]`, `w_h` is `[dh, dh]`, both row-major.
pub struct RawAttention {
    pub h: usize,
    pub heads: usize,
    pub w_q: Vec<f64>,
    pub b_q: Vec<f64>,
    pub w_h: Vec<f64>,
    pub b_h: Vec<f64>,
}

impl RawAttention {
    pub fn from_store(store: &ParamStore<f64>, p: &AttentionParams, h: usize) -> Self {
        Self {
            h,
            heads: p.heads,
            w_q: store.value(p.w_q).data().to_vec(),
            b_q: store.value(p.b_q).data().to_vec(),
            w_h: store.value(p.w_h).data().to_vec(),
            b_h: store.value(p.b_h).data().to_vec(),
        }
    }

    fn dh(&self) -> usize {
        self.h / self.heads
    }

    /// Distribution over the rows of `hidden` and the context `Σ_n α_n H_n`
    /// for query `q` scoring head `head`.
    pub fn attend(&self, hidden: &[Vec<f64>], q: &[f64], head: usize) -> (Vec<f64>, Vec<f64>) {
        let dh = self.dh();
        let mut qp = vec![0.0; dh];
        for (d, out) in qp.iter_mut().enumerate() {
            let mut s = self.b_q[d];
            for k in 0..self.h {
                s += q[k] * self.w_q[k * dh + d];
            }
            *out = s;
        }
        let mut scores = Vec::with_capacity(hidden.len());
        for row in hidden {
            let mut score = 0.0;
            for d in 0..dh {
                let mut s = self.b_h[d];
                for e in 0..dh {
                    s += row[head * dh + e] * self.w_h[e * dh + d];
                }
                score += s.tanh() * qp[d];
            }
            scores.push(score);
        }
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut ctx = vec![0.0; self.h];
        for (a, row) in alpha.iter().zip(hidden) {
            for k in 0..self.h {
                ctx[k] += a * row[k];
            }
        }
        (alpha, ctx)
    }

    /// Per-synonym distributions and the coordinate-wise max of the contexts.
    pub fn codewise(&self, hidden: &[Vec<f64>], queries: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut alphas = Vec::new();
        let mut v = vec![f64::NEG_INFINITY; self.h];
        for (j, q) in queries.iter().enumerate() {
            let (alpha, ctx) = self.attend(hidden, q, j);
            for k in 0..self.h {
                v[k] = v[k].max(ctx[k]);
            }
            alphas.push(alpha);
        }
        (alphas, v)
    }
}

/// One random batched attention problem.
pub struct AttentionCase {
    pub b: usize,
    pub c: usize,
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub lengths: Vec<usize>,
    /// `[B][N][h]`, rows past a document's length are padding noise.
    pub hidden: Vec<Vec<Vec<f64>>>,
    /// `[C][M][h]`
    pub queries: Vec<Vec<Vec<f64>>>,
    pub store: ParamStore<f64>,
    pub params: AttentionParams,
}

impl AttentionCase {
    /// `B ≤ 2`, `C ≤ 4`, `M ∈ {1, 2, 4}`, `N ≤ 8`, `h ∈ {8, 16}`, with
    /// non-zero biases and ragged lengths.
    pub fn random(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let b = rng.between(1, 2);
        let c = rng.between(1, 4);
        let m = [1, 2, 4][rng.below(3)];
        let n = rng.between(1, 8);
        let h = [8, 16][rng.below(2)];
        let lengths: Vec<usize> = (0..b).map(|i| if i == 0 { n } else { rng.between(1, n) }).collect();
        let cell = |rng: &mut Rng| rng.uniform_range(-2.0, 2.0);
        let hidden = (0..b)
            .map(|_| (0..n).map(|_| (0..h).map(|_| cell(&mut rng)).collect()).collect())
            .collect();
        let queries = (0..c)
            .map(|_| (0..m).map(|_| (0..h).map(|_| cell(&mut rng)).collect()).collect())
            .collect();
        let mut store = ParamStore::new();
        let params = AttentionParams::init(&mut store, h, m, &mut rng.fork(1)).unwrap();
        for id in [params.b_q, params.b_h] {
            for x in store.get_mut(id).value_mut().data_mut() {
                *x = rng.uniform_range(-0.5, 0.5);
            }
        }
        Self {
            b,
            c,
            m,
            n,
            h,
            lengths,
            hidden,
            queries,
            store,
            params,
        }
    }

    pub fn hidden_tensor(&self) -> Tensor<f64> {
        let flat: Vec<f64> = self.hidden.iter().flatten().flatten().copied().collect();
        Tensor::from_f64(vec![self.b, self.n, self.h], &flat).unwrap()
    }

    pub fn query_tensor(&self) -> Tensor<f64> {
        let flat: Vec<f64> = self.queries.iter().flatten().flatten().copied().collect();
        Tensor::from_f64(vec![self.c, self.m, self.h], &flat).unwrap()
    }

    /// `reprs [B, C, h]` and `alphas [B, C, N, M]` from the batched path.
    pub fn batched(&self) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let mut pass = Pass {
            graph: &mut g,
            store: &self.store,
            rng: &mut rng,
            training: false,
        };
        let hidden = pass.graph.constant(self.hidden_tensor());
        let queries = pass.graph.constant(self.query_tensor());
        let out = codewise_batched(&mut pass, &self.params, hidden, &self.lengths, queries).unwrap();
        (g.value(out.reprs).clone(), g.value(out.alphas).clone())
    }

    /// `v` for document `doc` and code `code` through the per-(code, synonym)
    /// graph formulation on the unpadded rows.
    pub fn looped(&self, doc: usize, code: usize) -> Vec<f64> {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let mut pass = Pass {
            graph: &mut g,
            store: &self.store,
            rng: &mut rng,
            training: false,
        };
        let rows = &self.hidden[doc][..self.lengths[doc]];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let hidden = pass.graph.constant(Tensor::from_f64(vec![rows.len(), self.h], &flat).unwrap());
        let queries: Vec<_> = self.queries[code]
            .iter()
            .map(|q| pass.graph.constant(Tensor::from_f64(vec![self.h], q).unwrap()))
            .collect();
        let v = codewise_repr(&mut pass, &self.params, hidden, &queries).unwrap();
        g.value(v).data().to_vec()
    }

    pub fn raw(&self) -> RawAttention {
        RawAttention::from_store(&self.store, &self.params, self.h)
    }
}

/// Largest absolute deviation of the batched path from the naive loop and
/// from the graph loop over all documents, codes and synonyms, plus the
/// worst deviation of any distribution's sum from 1.
pub struct Equivalence {
    pub vs_naive: f64,
    pub vs_graph_loop: f64,
    pub sum_error: f64,
    pub min_alpha: f64,
}

pub fn check_equivalence(case: &AttentionCase) -> Equivalence {
    let (reprs, alphas) = case.batched();
    let raw = case.raw();
    let mut out = Equivalence {
        vs_naive: 0.0,
        vs_graph_loop: 0.0,
        sum_error: 0.0,
        min_alpha: f64::INFINITY,
    };
    for b in 0..case.b {
        let len = case.lengths[b];
        for c in 0..case.c {
            let (naive_alphas, naive_v) = raw.codewise(&case.hidden[b][..len], &case.queries[c]);
            let looped = case.looped(b, c);
            for k in 0..case.h {
                let got = reprs.at(&[b, c, k]);
                out.vs_naive = out.vs_naive.max((got - naive_v[k]).abs());
                out.vs_graph_loop = out.vs_graph_loop.max((got - looped[k]).abs());
            }
            for (j, naive) in naive_alphas.iter().enumerate() {
                let mut sum = 0.0;
                for t in 0..case.n {
                    let a = alphas.at(&[b, c, t, j]);
                    let expected = if t < len { naive[t] } else { 0.0 };
                    out.vs_naive = out.vs_naive.max((a - expected).abs());
                    out.min_alpha = out.min_alpha.min(a);
                    sum += a;
                }
                out.sum_error = out.sum_error.max((sum - 1.0).abs());
            }
        }
    }
    out
}

/// AUC by counting every (positive, negative) pair; wins count 2 and ties 1
/// in the numerator so the ratio is formed from integers.
pub fn pair_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi && !yj {
                pairs += 1;
                if scores[i] > scores[j] {
                    twice += 2;
                } else if scores[i] == scores[j] {
                    twice += 1;
                }
            }
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

pub fn column(m: &[Vec<f64>], c: usize) -> Vec<f64> {
    m.iter().map(|r| r[c]).collect()
}

pub fn bool_column(m: &[Vec<bool>], c: usize) -> Vec<bool> {
    m.iter().map(|r| r[c]).collect()
}

pub fn brute_macro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..scores[0].len() {
        if let Some(a) = pair_auc(&column(scores, c), &bool_column(labels, c)) {
            sum += a;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn brute_micro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Option<f64> {
    let s: Vec<f64> = scores.concat();
    let l: Vec<bool> = labels.concat();
    pair_auc(&s, &l)
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn cell_counts(preds: &[Vec<bool>], labels: &[Vec<bool>], cells: impl Iterator<Item = (usize, usize)>) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (d, c) in cells {
        match (preds[d][c], labels[d][c]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

pub fn brute_micro_f1(preds: &[Vec<bool>], labels: &[Vec<bool>]) -> f64 {
    let width = preds[0].len();
    let (tp, fp, fn_) = cell_counts(preds, labels, (0..preds.len()).flat_map(|d| (0..width).map(move |c| (d, c))));
    f1_from(tp, fp, fn_)
}

pub fn brute_macro_f1(preds: &[Vec<bool>], labels: &[Vec<bool>]) -> f64 {
    let width = preds[0].len();
    let mut sum = 0.0;
    for c in 0..width {
        let (tp, fp, fn_) = cell_counts(preds, labels, (0..preds.len()).map(|d| (d, c)));
        sum += f1_from(tp, fp, fn_);
    }
    sum / width as f64
}

/// Code `c` is in a document's top-k iff fewer than `k` codes beat it,
/// where a code beats `c` with a higher score or an equal score and a
/// lower index.
pub fn brute_precision_at_k(scores: &[Vec<f64>], labels: &[Vec<bool>], k: usize) -> f64 {
    let mut total = 0.0;
    for (s, l) in scores.iter().zip(labels) {
        let mut hits = 0;
        for c in 0..s.len() {
            let beaten_by = (0..s.len()).filter(|&o| s[o] > s[c] || (s[o] == s[c] && o < c)).count();
            if beaten_by < k && l[c] {
                hits += 1;
            }
        }
        total += hits as f64 / k as f64;
    }
    total / scores.len() as f64
}

/// Random `docs × labels` instance; scores come from a coarse grid half
/// of the time so ties are common.
pub fn random_metric_case(rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let docs = rng.between(1, 10);
    let width = rng.between(1, 6);
    let coarse = rng.bernoulli(0.5);
    let density = rng.uniform_range(0.1, 0.7);
    let scores = (0..docs)
        .map(|_| {
            (0..width)
                .map(|_| {
                    if coarse {
                        rng.below(5) as f64 / 4.0
                    } else {
                        rng.uniform()
                    }
                })
                .collect()
        })
        .collect();
    let labels = (0..docs).map(|_| (0..width).map(|_| rng.bernoulli(density)).collect()).collect();
    (scores, labels)
}
