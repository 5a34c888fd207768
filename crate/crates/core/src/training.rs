//! Losses, the AdamW optimizer, threshold tuning and the training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::model::{synonym_inputs, Msmn};
use crate::encoder::Pass;
use crate::synonyms::{Dictionary, SynonymSample};
use crate::tensor::{Graph, ParamStore, Real, Rng, Tensor, Var};
use crate::text::{Document, Vocabulary};

const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// R-Drop weight `α`; zero disables the second pass.
    pub rdrop_weight: f64,
    pub seed: u64,
    /// Draw fresh synonyms for every epoch instead of once.
    pub resample_synonyms: bool,
    /// Cut-offs reported as precision@k (those above the code count are skipped).
    pub ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            peak_lr: 5e-4,
            batch_size: 16,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            rdrop_weight: 5.0,
            seed: 42,
            resample_synonyms: false,
            ks: vec![5, 8, 15],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        let positive = [("lr", self.peak_lr), ("adam eps", self.adam_eps), ("clip norm", self.clip_norm)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("weight decay", self.weight_decay), ("R-Drop weight", self.rdrop_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Summed binary cross-entropy over codes for one document.
pub fn bce_loss(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape("bce_loss", &[probs.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        if p.is_nan() {
            return Err(Error::NonFinite("probability".into()));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total)
}

/// `KL(Bernoulli(p) ‖ Bernoulli(q))`.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// `½(KL(p‖q) + KL(q‖p))`.
pub fn bernoulli_kl_sym(p: f64, q: f64) -> f64 {
    0.5 * (bernoulli_kl(p, q) + bernoulli_kl(q, p))
}

/// Symmetric KL from logits, `½(σ(a) − σ(b))(a − b)`; finite for any finite logits.
pub fn logit_kl_sym(a: f64, b: f64) -> f64 {
    0.5 * (crate::tensor::sigmoid(a) - crate::tensor::sigmoid(b)) * (a - b)
}

/// Scalar R-Drop objective for row-major `[B, C]` logits: the mean of the two
/// per-document BCE sums plus `α` times the mean symmetric KL.
pub fn rdrop_loss_value(logits_a: &[f64], logits_b: &[f64], labels: &[bool], batch: usize, alpha: f64) -> Result<f64> {
    if logits_a.len() != logits_b.len() || logits_a.len() != labels.len() || batch == 0 || labels.len() % batch != 0 {
        return Err(Error::shape("rdrop_loss", &[logits_a.len(), logits_b.len()], &[labels.len(), batch]));
    }
    let bce = |logits: &[f64]| -> f64 {
        logits
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(0.0) - if y { x } else { 0.0 } + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / batch as f64
    };
    let kl = logits_a.iter().zip(logits_b).map(|(&a, &b)| logit_kl_sym(a, b)).sum::<f64>() / labels.len() as f64;
    Ok(0.5 * (bce(logits_a) + bce(logits_b)) + alpha * kl)
}

/// Batch-mean BCE of `[B, C]` logits.
pub fn bce_graph<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[T]) -> Result<Var> {
    let b = g.shape(logits)[0];
    let total = g.bce_with_logits(logits, targets)?;
    Ok(g.scale(total, T::of(1.0 / b as f64)))
}

/// R-Drop objective on the graph; `logits_b = None` reduces to plain BCE.
pub fn rdrop_graph<T: Real>(g: &mut Graph<T>, logits_a: Var, logits_b: Option<Var>, targets: &[T], alpha: f64) -> Result<Var> {
    let bce_a = bce_graph(g, logits_a, targets)?;
    let Some(logits_b) = logits_b else {
        return Ok(bce_a);
    };
    if g.shape(logits_a) != g.shape(logits_b) {
        return Err(Error::shape("rdrop_loss", g.shape(logits_a), g.shape(logits_b)));
    }
    let bce_b = bce_graph(g, logits_b, targets)?;
    let both = g.add(bce_a, bce_b)?;
    let bce = g.scale(both, T::of(0.5));
    let pa = g.sigmoid(logits_a);
    let pb = g.sigmoid(logits_b);
    let dp = g.sub(pa, pb)?;
    let dx = g.sub(logits_a, logits_b)?;
    let prod = g.mul(dp, dx)?;
    let kl = g.mean(prod);
    let kl = g.scale(kl, T::of(0.5 * alpha));
    g.add(bce, kl)
}

/// Moment estimates and schedule position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: usize,
    pub total_steps: usize,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub state: OptimizerState<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// `peak · (1 − step/total)`, floored at zero.
pub fn linear_decay(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (peak * (1.0 - step as f64 / total as f64)).max(0.0)
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig, total_steps: usize) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            peak_lr: cfg.peak_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            state: OptimizerState {
                m: zeros.clone(),
                v: zeros,
                step: 0,
                total_steps,
            },
        }
    }

    pub fn lr(&self) -> f64 {
        linear_decay(self.peak_lr, self.state.step, self.state.total_steps)
    }

    /// Clips the gradients in `store` to the global norm bound, then applies
    /// one decoupled-weight-decay Adam update.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<StepInfo> {
        if store.len() != self.state.m.len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        let mut sq = 0.0;
        for p in store.iter() {
            for g in &p.grad {
                let g = g.as_f64();
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
                }
                sq += g * g;
            }
        }
        let grad_norm = sq.sqrt();
        let clip = if grad_norm > self.clip_norm { self.clip_norm / grad_norm } else { 1.0 };

        let lr = self.lr();
        let t = (self.state.step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let (clip, decay) = (T::of(clip), T::of(1.0 - lr * self.weight_decay));
        let (step_size, bc2_sqrt, eps) = (T::of(lr / bc1), T::of(bc2.sqrt()), T::of(self.eps));

        for (i, p) in store.iter_mut().enumerate() {
            let grad = std::mem::take(&mut p.grad);
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            let value = p.value_mut().data_mut();
            for k in 0..value.len() {
                let g = grad[k] * clip;
                m[k] = b1 * m[k] + one_b1 * g;
                v[k] = b2 * v[k] + one_b2 * g * g;
                value[k] = value[k] * decay - step_size * m[k] / (v[k].sqrt() / bc2_sqrt + eps);
            }
            p.grad = grad;
        }
        self.state.step += 1;
        Ok(StepInfo { lr, grad_norm })
    }
}

/// Decision threshold chosen on a development split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub metric: String,
    pub score: f64,
}

/// Threshold returned when the tuning split has no positive label.
pub const EMPTY_THRESHOLD: f64 = 0.95;
const MAX_MIDPOINT_VALUES: usize = 10_000;

/// Candidate thresholds: `k/20` for `k = 1..19`, plus midpoints between
/// consecutive distinct probabilities when there are at most 10⁴ of them.
pub fn threshold_candidates(probs: &[f64]) -> Vec<f64> {
    let mut cands: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect();
    let mut uniq: Vec<f64> = probs.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    if uniq.len() <= MAX_MIDPOINT_VALUES {
        cands.extend(uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    }
    cands.retain(|&t| t > 0.0 && t < 1.0);
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands
}

/// Global threshold maximizing micro-F1 (prediction is `p ≥ t`), smallest on ties.
pub fn tune_threshold(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<Threshold> {
    if probs.is_empty() {
        return Err(Error::Empty("threshold tuning needs a non-empty split".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape("tune_threshold", &[probs.len()], &[labels.len()]));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, l) in probs.iter().zip(labels) {
        if p.len() != l.len() {
            return Err(Error::shape("tune_threshold", &[p.len()], &[l.len()]));
        }
        for (&x, &y) in p.iter().zip(l) {
            if x.is_nan() {
                return Err(Error::NonFinite("probability".into()));
            }
            if y {
                pos.push(x)
            } else {
                neg.push(x)
            }
        }
    }
    let metric = "micro_f1".to_string();
    if pos.is_empty() {
        return Ok(Threshold { value: EMPTY_THRESHOLD, metric, score: 0.0 });
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let all: Vec<f64> = probs.iter().flatten().copied().collect();
    let mut best = Threshold { value: f64::NAN, metric, score: -1.0 };
    for t in threshold_candidates(&all) {
        let tp = pos.len() - pos.partition_point(|&x| x < t);
        let fp = neg.len() - neg.partition_point(|&x| x < t);
        let f = metrics::Counts { tp, fp, fn_: pos.len() - tp }.f1();
        if f > best.score {
            best.value = t;
            best.score = f;
        }
    }
    Ok(best)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Learning rate at the end of the epoch.
    pub lr: f64,
    pub dev_micro_f1: f64,
    pub dev_macro_f1: f64,
    pub dev_micro_auc: f64,
    pub dev_macro_auc: f64,
    pub threshold: f64,
    pub best: bool,
}

/// Tokenized splits and the label order.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub threshold: Threshold,
    pub dev: EvalReport,
    pub test: EvalReport,
    /// Synonyms the best parameters were trained with.
    pub synonyms: Vec<SynonymSample>,
}

pub fn label_matrix(docs: &[Document], codes: &[String]) -> Vec<Vec<bool>> {
    docs.iter().map(|d| d.targets(codes)).collect()
}

/// Eval-mode probabilities for `docs`.
pub fn predict_docs<T: Real>(model: &Msmn<T>, docs: &[Document], synonyms: &[SynonymSample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let seqs: Vec<&[u32]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
    model.predict(&seqs, &synonym_inputs(synonyms), batch_size)
}

/// Report for `docs` at `threshold`.
pub fn evaluate_docs<T: Real>(
    model: &Msmn<T>,
    docs: &[Document],
    codes: &[String],
    synonyms: &[SynonymSample],
    threshold: f64,
    ks: &[usize],
) -> Result<EvalReport> {
    let probs = predict_docs(model, docs, synonyms, 32)?;
    metrics::evaluate(&probs, &label_matrix(docs, codes), codes, threshold, ks)
}

/// Runs the full schedule. After every epoch the dev split is scored with a
/// freshly tuned threshold; parameters from the epoch with the best dev
/// micro-F1 (earliest on ties) are restored at the end and evaluated on test.
pub fn train<T: Real>(
    model: &mut Msmn<T>,
    splits: &Splits,
    dictionary: &Dictionary,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.dev.is_empty() || splits.test.is_empty() {
        return Err(Error::Empty("train, dev and test splits must be non-empty".into()));
    }
    let codes = dictionary.codes();
    if codes.len() != model.num_codes {
        return Err(Error::invalid(format!("model has {} codes, dictionary {}", model.num_codes, codes.len())));
    }
    let m = model.config.synonyms;
    let root = Rng::new(cfg.seed);
    let mut syn_rng = root.fork(2);
    let mut order_rng = root.fork(3);
    let mut drop_rng = root.fork(4);

    let mut synonyms = dictionary.sample_all(m, &mut syn_rng, vocab);
    let batches = splits.train.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(&model.store, cfg, cfg.epochs * batches);
    let train_labels = label_matrix(&splits.train, &codes);
    let dev_labels = label_matrix(&splits.dev, &codes);
    let rdrop = cfg.rdrop_weight > 0.0;

    let mut best: Option<(usize, Threshold, Vec<Tensor<T>>, Vec<SynonymSample>)> = None;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        if cfg.resample_synonyms && epoch > 1 {
            synonyms = dictionary.sample_all(m, &mut syn_rng, vocab);
        }
        let syn_inputs = synonym_inputs(&synonyms);
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let docs: Vec<&[u32]> = batch.iter().map(|&i| splits.train[i].tokens.as_slice()).collect();
            let targets: Vec<T> = batch
                .iter()
                .flat_map(|&i| train_labels[i].iter().map(|&y| if y { T::one() } else { T::zero() }))
                .collect();
            let mut g = Graph::new();
            let mut pass = Pass {
                graph: &mut g,
                store: &model.store,
                rng: &mut drop_rng,
                training: true,
            };
            let a = model.forward(&mut pass, &docs, &syn_inputs)?.logits;
            let b = if rdrop {
                Some(model.forward(&mut pass, &docs, &syn_inputs)?.logits)
            } else {
                None
            };
            let loss = rdrop_graph(&mut g, a, b, &targets, cfg.rdrop_weight)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss in epoch {epoch}")));
            }
            loss_sum += value;
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            // release the graph's references so updates happen in place
            drop(g);
            opt.step(&mut model.store)?;
        }

        let probs = predict_docs(model, &splits.dev, &synonyms, 32)?;
        let threshold = tune_threshold(&probs, &dev_labels)?;
        let report = metrics::evaluate(&probs, &dev_labels, &codes, threshold.value, &cfg.ks)?;
        let improved = best.as_ref().map_or(true, |(_, t, _, _)| threshold.score > t.score);
        if improved {
            let snapshot = model.store.iter().map(|p| (*p.value).clone()).collect();
            best = Some((epoch, threshold.clone(), snapshot, synonyms.clone()));
        }
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            lr: opt.lr(),
            dev_micro_f1: report.micro_f1,
            dev_macro_f1: report.macro_f1,
            dev_micro_auc: report.micro_auc,
            dev_macro_auc: report.macro_auc,
            threshold: threshold.value,
            best: improved,
        };
        log::info!("{}", serde_json::to_string(&log).unwrap_or_default());
        on_epoch(&log);
        logs.push(log);
    }

    let (best_epoch, threshold, snapshot, synonyms) = best.expect("at least one epoch ran");
    for (p, value) in model.store.iter_mut().zip(snapshot) {
        *p.value_mut() = value;
    }
    let dev = evaluate_docs(model, &splits.dev, &codes, &synonyms, threshold.value, &cfg.ks)?;
    let test = evaluate_docs(model, &splits.test, &codes, &synonyms, threshold.value, &cfg.ks)?;
    Ok(TrainOutcome {
        epochs: logs,
        best_epoch,
        threshold,
        dev,
        test,
        synonyms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5], &[true]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 0.0], &[true, false]).unwrap() < 1e-11);
        let v = bce_loss(&[0.9, 0.2], &[true, false]).unwrap();
        assert!((v - 0.328_504_066_972_034_6).abs() < 1e-12, "{v}");
        assert!(bce_loss(&[f64::NAN], &[true]).is_err());
    }

    #[test]
    fn kl_forms_agree() {
        let (a, b) = (0.7_f64, -1.3_f64);
        let (p, q) = (crate::tensor::sigmoid(a), crate::tensor::sigmoid(b));
        assert!((logit_kl_sym(a, b) - bernoulli_kl_sym(p, q)).abs() < 1e-14);
        assert!((bernoulli_kl_sym(0.8, 0.6) - 0.098_082_925_301_172_67).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_matches_scalar_form() {
        let la = [0.3, -2.0, 1.5, 0.1, 4.0, -0.7];
        let lb = [0.1, -1.0, 2.5, 0.0, 3.0, -0.2];
        let labels = [true, false, true, false, false, true];
        let t: Vec<f64> = labels.iter().map(|&y| y as u8 as f64).collect();
        for alpha in [0.0, 1.0, 5.0] {
            let mut g = Graph::<f64>::new();
            let a = g.constant(Tensor::from_f64(vec![2, 3], &la).unwrap());
            let b = g.constant(Tensor::from_f64(vec![2, 3], &lb).unwrap());
            let l = rdrop_graph(&mut g, a, Some(b), &t, alpha).unwrap();
            let want = rdrop_loss_value(&la, &lb, &labels, 2, alpha).unwrap();
            assert!((g.value(l).item() - want).abs() < 1e-13);
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(linear_decay(5e-4, 0, 100), 5e-4);
        assert_eq!(linear_decay(5e-4, 100, 100), 0.0);
        assert_eq!(linear_decay(5e-4, 150, 100), 0.0);
        assert!((linear_decay(5e-4, 50, 100) - 2.5e-4).abs() < 1e-19);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(&store, &cfg, 10);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("encoder.proj_w", Tensor::zeros(&[2]));
        store.get_mut(id).grad[1] = f64::NAN;
        let mut opt = AdamW::new(&store, &TrainConfig::default(), 10);
        let err = opt.step(&mut store).unwrap_err().to_string();
        assert!(err.contains("encoder.proj_w"), "{err}");
    }

    #[test]
    fn threshold_examples() {
        let probs = vec![vec![0.95, 0.05], vec![0.08, 0.91]];
        let labels = vec![vec![true, false], vec![false, true]];
        let t = tune_threshold(&probs, &labels).unwrap();
        assert_eq!((t.value, t.score), (0.1, 1.0));
        let none = vec![vec![false, false], vec![false, false]];
        assert_eq!(tune_threshold(&probs, &none).unwrap().value, 0.95);
        assert!(tune_threshold(&[], &[]).is_err());
    }
}
