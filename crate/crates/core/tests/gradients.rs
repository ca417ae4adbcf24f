//! Parameter and input gradients against central finite differences, plus a
//! loop-based forward oracle.

use caat_core::loss::{self, LossKind};
use caat_core::model::{Activation, Label, Model, ModelSpec, OutputHead, ParamVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 100;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(a.iter().map(|v| v * v).sum::<f64>().sqrt());
    diff / scale.max(1e-8)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(0.0..1.0))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, head: OutputHead, k: usize) -> Vec<Label> {
    (0..n)
        .map(|_| match head {
            OutputHead::SingleLogit => {
                if rng.random_bool(0.5) {
                    1
                } else {
                    -1
                }
            }
            OutputHead::MultiLogit => rng.random_range(0..k as i64),
        })
        .collect()
}

fn mean_loss(model: &Model, x: &Array2<f64>, y: &[Label], kind: &LossKind) -> f64 {
    let logits = model.logits(x.view()).unwrap();
    let (l, _) = loss::batch_loss(kind, model.spec().output_head(), logits.view(), y).unwrap();
    l.iter().sum::<f64>() / l.len() as f64
}

/// Gradients whose finite-difference check would straddle a ReLU kink.
fn near_kink(model: &Model, x: &Array2<f64>) -> bool {
    if model.spec().activation() != Activation::Relu || model.spec().num_layers() < 2 {
        return false;
    }
    let l0 = &model.layers()[0];
    let z = x.dot(&l0.weights.t()) + &l0.bias;
    z.iter().any(|v| v.abs() < 1e-4)
}

fn check_param_gradients(spec: &ModelSpec, kind: LossKind, seed_base: u64) {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for s in 0..INSTANCES * 2 {
        if checked == INSTANCES {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base * 10_000 + s);
        let model = Model::init(spec.clone(), seed_base * 10_000 + s);
        let x = random_batch(&mut rng, 3, spec.input_dim());
        if near_kink(&model, &x) {
            continue;
        }
        let y = random_labels(&mut rng, 3, spec.output_head(), spec.output_dim());
        let (_, g) = model.loss_and_param_gradient(x.view(), &y, &kind).unwrap();
        let theta = model.to_params();
        let mut fd = vec![0.0; theta.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = theta.clone().into_vec();
            plus[i] += H;
            let mut minus = theta.clone().into_vec();
            minus[i] -= H;
            let mp = Model::from_params(spec.clone(), &ParamVector::from_vec(plus), 0).unwrap();
            let mm = Model::from_params(spec.clone(), &ParamVector::from_vec(minus), 0).unwrap();
            *slot = (mean_loss(&mp, &x, &y, &kind) - mean_loss(&mm, &x, &y, &kind)) / (2.0 * H);
        }
        let e = rel_err(g.as_slice(), &fd);
        worst = worst.max(e);
        assert!(e < TOL, "{:?} {:?} seed {s}: relative error {e}", spec.layer_dims(), kind);
        checked += 1;
    }
    assert_eq!(checked, INSTANCES, "too many instances skipped near ReLU kinks");
    eprintln!("param grads {:?} {}: worst relative error {worst:.2e}", spec.layer_dims(), kind.name());
}

fn check_input_gradients(spec: &ModelSpec, kind: LossKind, seed_base: u64) {
    let mut checked = 0;
    for s in 0..INSTANCES * 2 {
        if checked == INSTANCES {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed_base * 10_000 + s);
        let model = Model::init(spec.clone(), seed_base * 10_000 + s);
        let x = random_batch(&mut rng, 1, spec.input_dim());
        if near_kink(&model, &x) {
            continue;
        }
        let y = random_labels(&mut rng, 1, spec.output_head(), spec.output_dim());
        let g = model.input_gradient(x.row(0), y[0], &kind).unwrap();
        let fd: Vec<f64> = (0..spec.input_dim())
            .map(|j| {
                let mut p = x.clone();
                p[[0, j]] += H;
                let mut m = x.clone();
                m[[0, j]] -= H;
                (mean_loss(&model, &p, &y, &kind) - mean_loss(&model, &m, &y, &kind)) / (2.0 * H)
            })
            .collect();
        let e = rel_err(g.as_slice().unwrap(), &fd);
        assert!(e < TOL, "{:?} {:?} seed {s}: relative error {e}", spec.layer_dims(), kind);
        checked += 1;
    }
    assert_eq!(checked, INSTANCES);
}

fn single_logit_specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::logistic(6).unwrap(),
        ModelSpec::new(vec![6, 5, 1], Activation::Tanh, OutputHead::SingleLogit).unwrap(),
        ModelSpec::new(vec![6, 5, 1], Activation::Relu, OutputHead::SingleLogit).unwrap(),
    ]
}

fn multi_logit_specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::new(vec![6, 4], Activation::Relu, OutputHead::MultiLogit).unwrap(),
        ModelSpec::mlp(&[6, 5, 4], Activation::Tanh).unwrap(),
        ModelSpec::mlp(&[6, 5, 4], Activation::Relu).unwrap(),
    ]
}

fn multi_losses() -> Vec<LossKind> {
    vec![
        LossKind::SoftmaxCe,
        LossKind::Trades { beta: 6.0 },
        LossKind::Clp { beta: 6.0 },
    ]
}

#[test]
fn param_gradients_bce() {
    for (i, spec) in single_logit_specs().iter().enumerate() {
        check_param_gradients(spec, LossKind::Bce, i as u64 + 1);
    }
}

#[test]
fn param_gradients_softmax_losses() {
    for (i, spec) in multi_logit_specs().iter().enumerate() {
        for (j, kind) in multi_losses().into_iter().enumerate() {
            check_param_gradients(spec, kind, 10 + 3 * i as u64 + j as u64);
        }
    }
}

#[test]
fn input_gradients_bce() {
    for (i, spec) in single_logit_specs().iter().enumerate() {
        check_input_gradients(spec, LossKind::Bce, 40 + i as u64);
    }
}

#[test]
fn input_gradients_softmax_losses() {
    for (i, spec) in multi_logit_specs().iter().enumerate() {
        for (j, kind) in multi_losses().into_iter().enumerate() {
            check_input_gradients(spec, kind, 50 + 3 * i as u64 + j as u64);
        }
    }
}

/// Pair losses split their gradient into a clean and an adversarial branch.
/// Each branch must equal the derivative with the other branch's logits held
/// fixed.
#[test]
fn pair_loss_branch_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for kind in [LossKind::Trades { beta: 6.0 }, LossKind::Clp { beta: 2.5 }] {
        for _ in 0..INSTANCES {
            let clean: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let adv: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = rng.random_range(0..5);
            let f = |c: &[f64], a: &[f64]| match kind {
                LossKind::Trades { beta } => loss::trades_pair_loss(c, a, y, beta).unwrap().loss,
                LossKind::Clp { beta } => loss::clp_pair_loss(c, a, y, beta).unwrap().loss,
                _ => unreachable!(),
            };
            let p = match kind {
                LossKind::Trades { beta } => loss::trades_pair_loss(&clean, &adv, y, beta).unwrap(),
                LossKind::Clp { beta } => loss::clp_pair_loss(&clean, &adv, y, beta).unwrap(),
                _ => unreachable!(),
            };
            let fd = |which_clean: bool| -> Vec<f64> {
                (0..5)
                    .map(|j| {
                        let (mut cp, mut cm, mut ap, mut am) = (clean.clone(), clean.clone(), adv.clone(), adv.clone());
                        if which_clean {
                            cp[j] += H;
                            cm[j] -= H;
                        } else {
                            ap[j] += H;
                            am[j] -= H;
                        }
                        (f(&cp, &ap) - f(&cm, &am)) / (2.0 * H)
                    })
                    .collect()
            };
            assert!(rel_err(&p.grad_clean, &fd(true)) < TOL);
            assert!(rel_err(&p.grad_adv, &fd(false)) < TOL);
        }
    }
}

/// Independent oracle: CE, KL and the two pair losses from their definitions.
#[test]
fn pair_loss_values_match_definitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..INSTANCES {
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y = rng.random_range(0..4usize);
        let probs = |z: &[f64]| {
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let (pc, pa) = (probs(&c), probs(&a));
        let ce_c = -pc[y].ln();
        let ce_a = -pa[y].ln();
        let kl: f64 = pc.iter().zip(&pa).map(|(p, q)| p * (p / q).ln()).sum();
        let sq: f64 = c.iter().zip(&a).map(|(u, v)| (u - v).powi(2)).sum();
        let t = loss::trades_pair_loss(&c, &a, y as Label, 6.0).unwrap().loss;
        let l = loss::clp_pair_loss(&c, &a, y as Label, 6.0).unwrap().loss;
        assert!((t - (ce_c + 6.0 * kl)).abs() < 1e-12 * t.abs().max(1.0));
        assert!((l - (ce_a + 6.0 * sq)).abs() < 1e-12 * l.abs().max(1.0));
    }
}

fn manual_forward(model: &Model, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let n = model.layers().len();
    for (k, layer) in model.layers().iter().enumerate() {
        let (out, inp) = layer.weights.dim();
        let mut z = vec![0.0; out];
        for o in 0..out {
            let mut s = layer.bias[o];
            for i in 0..inp {
                s += layer.weights[[o, i]] * a[i];
            }
            z[o] = s;
        }
        if k + 1 < n {
            for v in &mut z {
                *v = match model.spec().activation() {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        a = z;
    }
    a
}

#[test]
fn forward_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for act in [Activation::Relu, Activation::Tanh] {
        let spec = ModelSpec::mlp(&[7, 6, 5, 3], act).unwrap();
        for s in 0..50 {
            let m = Model::init(spec.clone(), s);
            let x = random_batch(&mut rng, 4, 7);
            let got = m.logits(x.view()).unwrap();
            for (i, row) in x.rows().into_iter().enumerate() {
                let want = manual_forward(&m, row.as_slice().unwrap());
                for (g, w) in got.row(i).iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12 * w.abs().max(1.0));
                }
            }
        }
    }
}

/// Logistic regression under BCE: `∂L/∂w = −y·σ(−y f)·x`, `∂L/∂b = −y·σ(−y f)`.
#[test]
fn logistic_gradient_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
    for s in 0..INSTANCES {
        let m = Model::init(ModelSpec::logistic(8).unwrap(), s);
        let x = Array1::from_shape_simple_fn(8, || rng.random_range(0.0..1.0));
        let y: Label = if s % 2 == 0 { 1 } else { -1 };
        let w = &m.layers()[0].weights;
        let f = w.row(0).dot(&x) + m.layers()[0].bias[0];
        let coef = -(y as f64) * sig(-(y as f64) * f);
        let (_, g) = m
            .loss_and_param_gradient(x.view().insert_axis(ndarray::Axis(0)), &[y], &LossKind::Bce)
            .unwrap();
        let mut want: Vec<f64> = x.iter().map(|v| coef * v).collect();
        want.push(coef);
        assert!(rel_err(g.as_slice(), &want) < 1e-12);
    }
}
