//! Central-difference gradient oracle shared by the gradient tests and the
//! acceptance suite.
#![allow(dead_code)]

use pft_core::models::Network;
use pft_core::numerics::{Tape, Tensor, Var};
use pft_core::Result;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-8;

/// Worst mismatch found; `ok()` iff every coordinate is within tolerance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mismatch {
    pub analytic: f64,
    pub numeric: f64,
    pub failed: bool,
}

impl Mismatch {
    fn update(&mut self, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs();
        let bad = err > ABS_TOL && err > REL_TOL * analytic.abs().max(numeric.abs());
        if bad && !self.failed {
            *self = Mismatch {
                analytic,
                numeric,
                failed: true,
            };
        }
    }

    pub fn ok(&self) -> bool {
        !self.failed
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    tape.scalar(out)
}

/// Compares reverse-mode gradients of the scalar `f` with respect to every
/// element of `inputs` against central differences.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Mismatch
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            t
        })
        .collect();
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars).expect("forward");
        assert!(tape.shape(out).is_empty(), "check target must be scalar");
        let grads = tape.backward(out).expect("backward");
        leaves
            .iter()
            .map(|t| grads.get(t.id()).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    };
    let mut worst = Mismatch::default();
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut probe = inputs.to_vec();
            probe[k].values_mut()[j] = t.values()[j] + H;
            let up = eval(&probe, &f);
            probe[k].values_mut()[j] = t.values()[j] - H;
            let down = eval(&probe, &f);
            worst.update(analytic[k][j], (up - down) / (2.0 * H));
        }
    }
    worst
}

/// Same comparison for the trainable parameters of a network.
pub fn check_params<N, F>(net: &mut N, f: F) -> Mismatch
where
    N: Network,
    F: for<'p> Fn(&'p N, &mut Tape<'p>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let out = f(net, &mut tape).expect("forward");
        let grads = tape.backward(out).expect("backward");
        net.named_params()
            .iter()
            .map(|(_, t)| grads.get(t.id()).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    };
    let value = |net: &N| {
        let mut tape = Tape::new();
        let out = f(net, &mut tape).expect("forward");
        tape.scalar(out)
    };
    let mut worst = Mismatch::default();
    let n_params = analytic.len();
    for k in 0..n_params {
        let len = analytic[k].len();
        for j in 0..len {
            let orig = net.params_mut()[k].values()[j];
            net.params_mut()[k].values_mut()[j] = orig + H;
            let up = value(net);
            net.params_mut()[k].values_mut()[j] = orig - H;
            let down = value(net);
            net.params_mut()[k].values_mut()[j] = orig;
            worst.update(analytic[k][j], (up - down) / (2.0 * H));
        }
    }
    worst
}

// ---- seeded cases ----

use pft_core::losses::{cross_entropy, kl_divergence, source_total, style_loss, target_loss, LossWeights};
use pft_core::models::{set_frozen, Classifier, LayerSet, LayeredFeatures, Translator};
use pft_core::synthdata::derived_rng;
use rand::Rng;

pub const CASES: u64 = 100;

pub const OPS: [&str; 19] = [
    "matmul",
    "add",
    "add_row_broadcast",
    "sub",
    "mul",
    "mul_row_broadcast",
    "mul_scalar",
    "relu",
    "exp",
    "log",
    "square",
    "reshape",
    "concat_rows",
    "concat_cols",
    "mean_over_axis",
    "std_over_axis",
    "log_softmax",
    "sum",
    "mean",
];

pub const LOSSES: [&str; 6] = [
    "cross_entropy",
    "kl_divergence_q",
    "style_loss",
    "translated_cross_entropy",
    "source_total",
    "target_loss",
];

/// Values bounded away from zero so ReLU kinks stay farther than `H`.
fn randn(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

fn positive(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.2..3.0)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights so every
/// output coordinate influences the check.
fn weigh(tape: &mut Tape<'_>, v: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

pub fn op_case(op: &str, seed: u64) -> Mismatch {
    let mut rng = derived_rng(seed, 0x6AD);
    let (r, c, k) = (
        rng.random_range(2..5usize),
        rng.random_range(2..5usize),
        rng.random_range(2..4usize),
    );
    let w_rc = randn(vec![r, c], &mut rng);
    let a = randn(vec![r, c], &mut rng);
    let b = randn(vec![r, c], &mut rng);
    match op {
        "matmul" => {
            let bm = randn(vec![c, k], &mut rng);
            let w = randn(vec![r, k], &mut rng);
            check_inputs(&[a, bm], |t, v| {
                let m = t.matmul(v[0], v[1])?;
                weigh(t, m, &w)
            })
        }
        "add" | "sub" | "mul" => check_inputs(&[a, b], |t, v| {
            let o = match op {
                "add" => t.add(v[0], v[1])?,
                "sub" => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            weigh(t, o, &w_rc)
        }),
        "add_row_broadcast" | "mul_row_broadcast" => {
            let row = randn(vec![c], &mut rng);
            check_inputs(&[a, row], |t, v| {
                let o = if op == "add_row_broadcast" {
                    t.add(v[0], v[1])?
                } else {
                    t.mul(v[0], v[1])?
                };
                weigh(t, o, &w_rc)
            })
        }
        "mul_scalar" => {
            let s: f64 = rng.random_range(-2.0..2.0);
            check_inputs(&[a], |t, v| {
                let o = t.mul_scalar(v[0], s)?;
                weigh(t, o, &w_rc)
            })
        }
        "relu" | "exp" | "square" => check_inputs(&[a], |t, v| {
            let o = match op {
                "relu" => t.relu(v[0])?,
                "exp" => t.exp(v[0])?,
                _ => t.square(v[0])?,
            };
            weigh(t, o, &w_rc)
        }),
        "log" => check_inputs(&[positive(vec![r, c], &mut rng)], |t, v| {
            let o = t.log(v[0])?;
            weigh(t, o, &w_rc)
        }),
        "reshape" => {
            let w = randn(vec![c, r], &mut rng);
            check_inputs(&[a], |t, v| {
                let o = t.reshape(v[0], vec![c, r])?;
                weigh(t, o, &w)
            })
        }
        "concat_rows" => {
            let extra = randn(vec![k, c], &mut rng);
            let w = randn(vec![r + k, c], &mut rng);
            check_inputs(&[a, extra], |t, v| {
                let o = t.concat(&[v[0], v[1]], 0)?;
                weigh(t, o, &w)
            })
        }
        "concat_cols" => {
            let extra = randn(vec![r, k], &mut rng);
            let w = randn(vec![r, c + k], &mut rng);
            check_inputs(&[a, extra], |t, v| {
                let o = t.concat(&[v[0], v[1]], 1)?;
                weigh(t, o, &w)
            })
        }
        "mean_over_axis" | "std_over_axis" => {
            let axis = rng.random_range(0..2usize);
            let w = randn(vec![if axis == 0 { c } else { r }], &mut rng);
            check_inputs(&[a], |t, v| {
                let o = if op == "mean_over_axis" {
                    t.mean_over_axis(v[0], axis)?
                } else {
                    t.std_over_axis(v[0], axis)?
                };
                weigh(t, o, &w)
            })
        }
        "log_softmax" => check_inputs(&[a], |t, v| {
            let o = t.log_softmax(v[0])?;
            weigh(t, o, &w_rc)
        }),
        "sum" | "mean" => check_inputs(&[a], |t, v| {
            let sq = t.square(v[0])?;
            if op == "sum" {
                t.sum(sq)
            } else {
                t.mean(sq)
            }
        }),
        other => panic!("unknown op {other}"),
    }
}

fn random_translator(d: usize, rng: &mut impl Rng) -> Translator {
    let mut t = Translator::new(d, rng);
    for p in t.params_mut() {
        let fresh = randn(p.shape().to_vec(), rng);
        p.values_mut().copy_from_slice(&fresh.values().iter().map(|x| 0.5 * x).collect::<Vec<_>>());
    }
    set_frozen(&mut t, false);
    t
}

pub fn loss_case(loss: &str, seed: u64) -> Mismatch {
    let mut rng = derived_rng(seed, 0x1055);
    // Batches of two make sqrt(var + eps) in the style term so curved that
    // the h = 1e-5 truncation error alone exceeds the tolerance.
    let (n, d, classes) = (
        rng.random_range(3..7usize),
        rng.random_range(2..5usize),
        rng.random_range(2..4usize),
    );
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let logits = randn(vec![n, classes], &mut rng);
    let other = randn(vec![n, classes], &mut rng);
    match loss {
        "cross_entropy" => check_inputs(&[logits], |t, v| cross_entropy(t, v[0], &labels)),
        // p is a stop-gradient teacher, so only q is probed.
        "kl_divergence_q" => check_inputs(&[logits], |t, v| {
            let p = t.constant(other.clone());
            kl_divergence(t, p, v[0])
        }),
        _ => {
            let f1 = randn(vec![n, d], &mut rng);
            let f2 = randn(vec![n, d], &mut rng);
            let mut clf = Classifier::new(d, classes, &mut rng);
            set_frozen(&mut clf, true);
            // The tape borrows every bound network for its own lifetime,
            // which the parameter probe re-creates per evaluation.
            let clf: &'static Classifier = Box::leak(Box::new(clf));
            let mut tr = random_translator(d, &mut rng);
            let weights = LossWeights {
                lambda_expr: rng.random_range(0.1..2.0),
                lambda_style: rng.random_range(0.01..1.0),
            };
            let layers = LayerSet::all(2);
            // The reference side is a stop-gradient target; freeze its
            // values at the unperturbed translator so the probe sees the
            // same objective the tape differentiates.
            let reference: Vec<Tensor> = {
                let mut t = Tape::new();
                let b = t.constant(f2.clone());
                let r = tr.reference_layers(&mut t, b).unwrap();
                r.layers.iter().map(|&v| t.to_tensor(v)).collect()
            };
            let reference_on = move |t: &mut Tape<'_>| LayeredFeatures {
                layers: reference.iter().map(|r| t.constant(r.clone())).collect(),
            };
            check_params(&mut tr, |tr, t| {
                let a = t.constant(f1.clone());
                match loss {
                    "style_loss" => {
                        let x = tr.translate(t, a)?;
                        let r = reference_on(t);
                        style_loss(t, &x, &r, &layers)
                    }
                    "translated_cross_entropy" => {
                        let x = tr.translate(t, a)?.output();
                        let l = clf.classify(t, x)?;
                        cross_entropy(t, l, &labels)
                    }
                    "source_total" => {
                        let x = tr.translate(t, a)?;
                        let r = reference_on(t);
                        let lh = clf.classify(t, x.output())?;
                        let l = clf.classify(t, a)?;
                        let ce = cross_entropy(t, lh, &labels)?;
                        let ex = kl_divergence(t, l, lh)?;
                        let st = style_loss(t, &x, &r, &layers)?;
                        source_total(t, ce, ex, st, &weights)
                    }
                    "target_loss" => {
                        let p = clf.classify(t, a)?;
                        let x = tr.translate(t, a)?.output();
                        let q = clf.classify(t, x)?;
                        target_loss(t, p, q)
                    }
                    other => panic!("unknown loss {other}"),
                }
            })
        }
    }
}

/// Runs `CASES` seeded cases; returns the first failing seed, if any.
pub fn sweep(name: &str, f: fn(&str, u64) -> Mismatch) -> Option<(u64, Mismatch)> {
    (0..CASES).map(|s| (s, f(name, s))).find(|(_, m)| !m.ok())
}
