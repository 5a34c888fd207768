//! Analytic gradients of every graph primitive against central finite
//! differences, plus the composed model through the gradient checker.

use std::sync::Arc;

use msmn::classifier::ScorerKind;
use msmn::gradcheck::{gradcheck, relative_error, GradcheckConfig};
use msmn::tensor::{Graph, ParamStore, Rng, Tensor, Var};
use msmn::training::rdrop_graph;
use msmn::Result;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Reduces `out` to a scalar with fixed random weights so every output
/// element carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w = Tensor::from_fn(g.shape(out), |_| rng.uniform_range(-1.0, 1.0));
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn loss_at(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let l = weighted_sum(&mut g, out, 99).unwrap();
    g.value(l).item()
}

/// Largest relative error over every element of every input.
fn max_error(build: &Build, inputs: &[Tensor<f64>], eps: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let l = weighted_sum(&mut g, out, 99).unwrap();
    g.backward(l, &mut ParamStore::new()).unwrap();
    let mut worst = 0.0_f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (loss_at(build, &plus) - loss_at(build, &minus)) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.5, 1.5))
}

fn assert_grad(name: &str, build: &Build, inputs: &[Tensor<f64>]) {
    let e = max_error(build, inputs, 1e-5);
    assert!(e < 1e-6, "{name}: max relative error {e:e}");
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let a = rand(&[3, 4], 1);
    let b = rand(&[4, 2], 2);
    let mut g = Graph::new();
    let va = g.input(a.clone());
    let vb = g.constant(b.clone());
    let c = g.matmul(va, vb).unwrap();
    let s = g.sum(c);
    g.backward(s, &mut ParamStore::new()).unwrap();
    // d sum(A·B) / dA[i][k] = sum_j B[k][j]
    for i in 0..3 {
        for k in 0..4 {
            let want: f64 = (0..2).map(|j| b.at(&[k, j])).sum();
            assert!((g.grad(va).unwrap()[i * 4 + k] - want).abs() < 1e-14);
        }
    }
    assert_grad("matmul", &|g, v| g.matmul(v[0], v[1]), &[a, b]);
}

#[test]
fn sigmoid_slope_at_one() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(vec![1], &[1.0]).unwrap());
    let y = g.sigmoid(x);
    assert!((g.value(y).item() - 0.731_058_578_630_004_9).abs() < 1e-15);
    let s = g.sum(y);
    g.backward(s, &mut ParamStore::new()).unwrap();
    let analytic = g.grad(x).unwrap()[0];
    let f = |x: f64| 1.0 / (1.0 + (-x).exp());
    let numeric = (f(1.0 + 1e-5) - f(1.0 - 1e-5)) / 2e-5;
    assert!(relative_error(analytic, numeric) < 1e-6);
    assert!((analytic - 0.196_611_933_241_481_85).abs() < 1e-15);
}

#[test]
fn elementwise_ops() {
    let (a, b) = (rand(&[2, 3], 3), rand(&[2, 3], 4));
    assert_grad("add", &|g, v| g.add(v[0], v[1]), &[a.clone(), b.clone()]);
    assert_grad("sub", &|g, v| g.sub(v[0], v[1]), &[a.clone(), b.clone()]);
    assert_grad("mul", &|g, v| g.mul(v[0], v[1]), &[a.clone(), b.clone()]);
    assert_grad("scale", &|g, v| Ok(g.scale(v[0], -2.5)), &[a.clone()]);
    assert_grad("tanh", &|g, v| Ok(g.tanh(v[0])), &[a.clone()]);
    assert_grad("sigmoid", &|g, v| Ok(g.sigmoid(v[0])), &[a.clone()]);
    assert_grad("bias", &|g, v| g.add_bias(v[0], v[1]), &[a, rand(&[3], 5)]);
}

#[test]
fn contractions() {
    let cases: [(&str, &[usize], &[usize]); 5] = [
        ("ij,jk->ik", &[3, 4], &[4, 2]),
        ("ij,kj->ki", &[3, 4], &[2, 4]),
        ("bnmd,cmd->bcnm", &[2, 3, 2, 2], &[3, 2, 2]),
        ("bcnm,bnh->bchm", &[2, 3, 4, 2], &[2, 4, 3]),
        ("bch,ch->bc", &[2, 3, 4], &[3, 4]),
    ];
    for (i, (spec, sa, sb)) in cases.into_iter().enumerate() {
        let inputs = [rand(sa, 10 + i as u64), rand(sb, 20 + i as u64)];
        assert_grad(spec, &move |g, v| g.contract(spec, v[0], v[1]), &inputs);
    }
}

#[test]
fn softmax_along_each_axis() {
    let x = rand(&[2, 3, 4], 6);
    for axis in 0..3 {
        assert_grad(&format!("softmax axis {axis}"), &move |g, v| g.softmax(v[0], axis), &[x.clone()]);
    }
}

#[test]
fn masked_softmax_sends_nothing_to_masked_entries() {
    let x = rand(&[2, 4], 7);
    let mask = Arc::new(vec![false, false, true, false, false, true, true, false]);
    let m = Arc::clone(&mask);
    let build = move |g: &mut Graph<f64>, v: &[Var]| {
        let filled = g.masked_fill(v[0], Arc::clone(&m), f64::NEG_INFINITY)?;
        g.softmax(filled, 1)
    };
    assert_grad("masked softmax", &build, &[x.clone()]);
    let mut g = Graph::new();
    let v = g.input(x);
    let out = build(&mut g, &[v]).unwrap();
    let l = weighted_sum(&mut g, out, 1).unwrap();
    g.backward(l, &mut ParamStore::new()).unwrap();
    for (i, &masked) in mask.iter().enumerate() {
        if masked {
            assert_eq!(g.grad(v).unwrap()[i], 0.0);
        }
    }
}

#[test]
fn max_routes_to_the_winner() {
    // distinct values, so every max is away from a tie
    let x = Tensor::from_f64(vec![2, 3], &[0.1, 0.9, -0.4, 0.7, 0.2, 0.5]).unwrap();
    let y = Tensor::from_f64(vec![2, 3], &[0.3, 0.8, -0.1, 0.6, 0.25, 0.55]).unwrap();
    assert_grad("maxpool", &|g, v| g.maxpool(&[v[0], v[1]]), &[x.clone(), y.clone()]);
    assert_grad("max axis 0", &|g, v| g.max_axis(v[0], 0), &[x.clone()]);
    assert_grad("max axis 1", &|g, v| g.max_axis(v[0], 1), &[x.clone()]);
    let mut g = Graph::new();
    let (vx, vy) = (g.input(x), g.input(y));
    let p = g.maxpool(&[vx, vy]).unwrap();
    let s = g.sum(p);
    g.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.grad(vx).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(g.grad(vy).unwrap(), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
}

#[test]
fn indexing_and_layout_ops() {
    let t = rand(&[4, 3], 8);
    assert_grad("gather", &|g, v| g.gather(v[0], &[2, 0, 2, 3]), &[t.clone()]);
    assert_grad("narrow", &|g, v| g.narrow(v[0], 1, 1, 2), &[t.clone()]);
    assert_grad("reshape", &|g, v| g.reshape(v[0], &[2, 6]), &[t.clone()]);
    let u = rand(&[4, 3], 9);
    assert_grad("concat", &|g, v| g.concat(&[v[0], v[1]], 1), &[t.clone(), u.clone()]);
    assert_grad("stack", &|g, v| g.stack(&[v[0], v[1]], 1), &[t.clone(), u.clone()]);
    let mask = Arc::new(vec![true, false, false, true]);
    assert_grad("select rows", &move |g, v| g.select_rows(Arc::clone(&mask), v[0], v[1]), &[t, u]);
}

#[test]
fn reductions_and_losses() {
    let x = rand(&[2, 3], 11);
    assert_grad("mean", &|g, v| Ok(g.mean(v[0])), &[x.clone()]);
    let targets = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    assert_grad("bce", &move |g, v| g.bce_with_logits(v[0], &targets), &[x.clone()]);
    for alpha in [0.0, 5.0] {
        assert_grad(
            "rdrop",
            &move |g, v| rdrop_graph(g, v[0], Some(v[1]), &targets, alpha),
            &[x.clone(), rand(&[2, 3], 12)],
        );
    }
}

#[test]
fn dropout_with_a_fixed_mask() {
    let x = rand(&[3, 4], 13);
    assert_grad(
        "dropout",
        &|g, v| g.dropout(v[0], 0.3, &mut Rng::new(4), true),
        &[x],
    );
}

#[test]
fn lstm_step_all_inputs() {
    let (b, n, h) = (3, 2, 2);
    let xw = rand(&[b, n, 4 * h], 14);
    let prev = rand(&[b, 2 * h], 15);
    let w = rand(&[h, 4 * h], 16);
    assert_grad("lstm step", &|g, v| g.lstm_step(v[0], 1, Some(v[1]), v[2], None), &[xw.clone(), prev.clone(), w.clone()]);
    let mask = Arc::new(vec![true, false, true]);
    assert_grad(
        "masked lstm step",
        &move |g, v| g.lstm_step(v[0], 0, Some(v[1]), v[2], Some(Arc::clone(&mask))),
        &[xw.clone(), prev, w.clone()],
    );
    assert_grad("first lstm step", &|g, v| g.lstm_step(v[0], 0, None, v[1], None), &[xw, w]);
}

#[test]
fn two_chained_lstm_steps() {
    let (b, n, h) = (2, 3, 3);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s0 = g.lstm_step(v[0], 0, None, v[1], None)?;
        let s1 = g.lstm_step(v[0], 1, Some(s0), v[1], Some(Arc::new(vec![true, false])))?;
        g.lstm_step(v[0], 2, Some(s1), v[1], None)
    };
    assert_grad("chained lstm", &build, &[rand(&[b, n, 4 * h], 17), rand(&[h, 4 * h], 18)]);
}

#[test]
fn composed_model_every_scorer() {
    for scorer in [ScorerKind::Biaffine, ScorerKind::Dot, ScorerKind::PerLabel] {
        let report = gradcheck::<f64>(&GradcheckConfig { scorer, ..GradcheckConfig::micro_f64() }).unwrap();
        assert!(report.passed(), "{scorer}:\n{}", report.table());
        assert!(report.groups.iter().all(|g| g.max_rel_error < 1e-3));
    }
}

#[test]
fn corrupted_group_is_named() {
    let cfg = GradcheckConfig { corrupt: Some("encoder.proj.w".into()), ..GradcheckConfig::micro_f64() };
    let report = gradcheck::<f64>(&cfg).unwrap();
    assert_eq!(report.failures(), vec!["encoder.proj.w"]);
}

#[test]
fn single_precision_within_relaxed_bound() {
    let report = gradcheck::<f32>(&GradcheckConfig::micro_f32()).unwrap();
    assert_eq!((report.precision, report.tolerance), ("32", 1e-2));
    assert!(report.passed(), "{}", report.table());
}
