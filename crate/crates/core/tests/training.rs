use std::path::Path;

use msmn::checkpoint::Checkpoint;
use msmn::config::RunConfig;
use msmn::metrics::{f1, threshold_predictions, Average};
use msmn::pipeline::{prepare, default_dict, train_model, Workspace};
use msmn::synthgen::{generate, SynthConfig};
use msmn::tensor::{sigmoid, ParamStore, Rng, Tensor};
use msmn::training::{linear_decay, predict_docs, rdrop_loss_value, tune_threshold, AdamW, TrainConfig};
use proptest::prelude::*;

/// `-y·ln σ(x) − (1 − y)·ln(1 − σ(x))` summed per document and averaged.
fn direct_bce(logits: &[f64], labels: &[bool], batch: usize) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let p = sigmoid(x);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / batch as f64
}

fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, usize)> {
    (1usize..=4, 1usize..=5).prop_flat_map(|(b, c)| {
        (
            prop::collection::vec(-8.0f64..8.0, b * c),
            prop::collection::vec(-8.0f64..8.0, b * c),
            prop::collection::vec(any::<bool>(), b * c),
            Just(b),
        )
    })
}

proptest! {
    #[test]
    fn rdrop_bounds_bce((a, b, y, n) in batch(), alpha in 0.01f64..10.0) {
        let plain = rdrop_loss_value(&a, &b, &y, n, 0.0).unwrap();
        let reg = rdrop_loss_value(&a, &b, &y, n, alpha).unwrap();
        // logits drawn from a continuum differ almost surely
        prop_assert!(reg > plain);
        let same = rdrop_loss_value(&a, &a, &y, n, alpha).unwrap();
        prop_assert_eq!(same, rdrop_loss_value(&a, &a, &y, n, 0.0).unwrap());
    }

    #[test]
    fn rdrop_without_weight_is_averaged_bce((a, b, y, n) in batch()) {
        let want = 0.5 * (direct_bce(&a, &y, n) + direct_bce(&b, &y, n));
        let got = rdrop_loss_value(&a, &b, &y, n, 0.0).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn schedule_is_linear(peak in 1e-6f64..1e-1, total in 1usize..5000, frac in 0.0f64..=1.0) {
        let step = ((total as f64) * frac) as usize;
        prop_assert_eq!(linear_decay(peak, 0, total), peak);
        prop_assert_eq!(linear_decay(peak, total, total), 0.0);
        let want = peak * (total - step) as f64 / total as f64;
        let got = linear_decay(peak, step, total);
        prop_assert!((got - want).abs() <= 2.0 * f64::EPSILON * peak, "{} vs {}", got, want);
    }
}

#[test]
fn adamw_single_step_closed_form() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_f64(vec![1], &[0.5]).unwrap());
    let cfg = TrainConfig {
        peak_lr: 1e-3,
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&store, &cfg, 10);
    store.get_mut(id).grad[0] = 0.2;
    opt.step(&mut store).unwrap();
    // bias-corrected moments are g and g², so the step is lr·g/(|g| + ε)
    let want = 0.5 * (1.0 - 1e-3 * 0.01) - 1e-3 * 0.2 / (0.2 + 1e-8);
    assert!((store.value(id).item() - want).abs() < 1e-15);
    assert!((opt.lr() - 9e-4).abs() < 1e-18);
}

#[test]
fn adamw_clips_global_norm() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::zeros(&[1]));
    let b = store.add("b", Tensor::zeros(&[1]));
    let cfg = TrainConfig {
        weight_decay: 0.0,
        adam_eps: 1e-3,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&store, &cfg, 10);
    store.get_mut(a).grad[0] = 6.0;
    store.get_mut(b).grad[0] = 8.0;
    let info = opt.step(&mut store).unwrap();
    assert_eq!(info.grad_norm, 10.0);
    // after clipping the gradients are 0.6 and 0.8; ε makes the scale visible
    let lr = cfg.peak_lr;
    assert!((store.value(a).item() + lr * 0.6 / (0.6 + 1e-3)).abs() < 1e-15);
    assert!((store.value(b).item() + lr * 0.8 / (0.8 + 1e-3)).abs() < 1e-15);
}

#[test]
fn tuned_threshold_beats_every_grid_point() {
    let mut rng = Rng::new(50);
    for _ in 0..5 {
        let probs: Vec<Vec<f64>> = (0..50).map(|_| (0..6).map(|_| rng.uniform()).collect()).collect();
        let labels: Vec<Vec<bool>> = probs
            .iter()
            .map(|r| r.iter().map(|&p| rng.bernoulli(0.2 + 0.6 * p)).collect())
            .collect();
        let t = tune_threshold(&probs, &labels).unwrap();
        let at = |t: f64| f1(&threshold_predictions(&probs, t), &labels, Average::Micro).unwrap();
        assert_eq!(at(t.value), t.score);
        for k in 1..20 {
            let g = k as f64 / 20.0;
            assert!(t.score >= at(g));
            if at(g) == t.score {
                assert!(t.value <= g, "tie must resolve to the smallest threshold");
            }
        }
    }
}

fn fixture(dir: &Path, docs: usize, seed: u64) -> Workspace {
    let cfg = SynthConfig {
        num_codes: 6,
        train_docs: docs,
        dev_docs: docs / 2,
        test_docs: docs / 2,
        doc_len: (20, 40),
        seed,
        ..SynthConfig::default()
    };
    generate(&cfg).unwrap().write(dir).unwrap();
    prepare(dir, &default_dict(dir), 2500).unwrap()
}

fn small_run(epochs: usize) -> RunConfig {
    RunConfig {
        emb_dim: 16,
        lstm_hidden_dim: 8,
        lstm_output_dim: 16,
        epochs,
        ..RunConfig::desk()
    }
}

#[test]
fn one_epoch_smoke_and_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ws = fixture(dir.path(), 10, 1);
    let run = small_run(1);
    let mut losses = Vec::new();
    let trained = train_model::<f64>(&run, &ws, None, |log| losses.push(log.train_loss)).unwrap();
    assert_eq!(losses.len(), 1);
    assert!(losses[0].is_finite() && losses[0] > 0.0);

    let path = dir.path().join("checkpoint.json");
    trained.checkpoint.save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck, trained.checkpoint);
    let restored = ck.model::<f64>().unwrap();
    let before = predict_docs(&trained.model, &ws.splits.test, &trained.outcome.synonyms, 4).unwrap();
    let after = predict_docs(&restored, &ws.splits.test, &ck.synonyms, 4).unwrap();
    assert_eq!(before, after);
}

#[test]
fn same_seed_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let ws = fixture(dir.path(), 24, 2);
    let run = small_run(2);
    let a = train_model::<f64>(&run, &ws, None, |_| {}).unwrap();
    let b = train_model::<f64>(&run, &ws, None, |_| {}).unwrap();
    assert_eq!(a.outcome.epochs, b.outcome.epochs);
    assert_eq!(a.report(), b.report());
    assert_eq!(a.checkpoint, b.checkpoint);
    let c = train_model::<f64>(&RunConfig { seed: 7, ..run }, &ws, None, |_| {}).unwrap();
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
}

#[test]
fn loss_falls_over_first_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let ws = fixture(dir.path(), 160, 3);
    let mut losses = Vec::new();
    train_model::<f64>(&small_run(3), &ws, None, |log| losses.push(log.train_loss)).unwrap();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}
