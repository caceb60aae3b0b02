//! Checks shared by the topical test targets and the acceptance report.
//! Every check returns a [`Check`] instead of panicking so the acceptance
//! target can print all of them before deciding.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use noiselab::corpus::{check_bio, extract_spans, spans_from_tags, Sentence, SlotSpan, Tag};
use noiselab::encoder::{EncoderConfig, EncoderModel};
use noiselab::eval::span_f1;
use noiselab::finetune::{
    batch_gradients, contrastive_loss, fgv_perturbation, joint_finetune_loss, objective_with_noise, slot_loss,
    FinetuneConfig, TrainPair,
};
use noiselab::par::ExecMode;
use noiselab::perturb::{apply_traced, compose, mixed_suite_ops, Edit, Lexicons, PerturbOp, PerturbationSpec};
use noiselab::pretrain::{joint_pretrain_loss, smp_loss, snd_loss};
use noiselab::tensor::{grad_check, Graph, Reduction, RngKey, Tensor, Value};
use noiselab::Result;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), pass, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Like [`uniform`] but keeps every entry at least `gap` away from zero.
fn away_from_zero(rng: &mut StdRng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = uniform(rng, shape, gap, 2.0);
    for x in t.data_mut() {
        if rng.gen_bool(0.5) {
            *x = -*x;
        }
    }
    t
}

// ---- gradient checks ---------------------------------------------------

type Objective = Box<dyn Fn(&mut Graph, Value) -> Result<Value> + Sync + Send>;

/// `Σ y ⊙ w` for a fixed random `w`, so every output entry matters.
fn project(w: Tensor) -> impl Fn(&mut Graph, Value) -> Result<Value> + Sync + Send {
    move |g, y| {
        let c = g.constant(w.clone());
        let m = g.mul(y, c)?;
        Ok(g.sum(m))
    }
}

fn dims(rng: &mut StdRng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=5))
}

macro_rules! case {
    ($x:expr, |$g:ident, $v:ident| $body:expr) => {{
        let f: Objective = Box::new(move |$g: &mut Graph, $v: Value| $body);
        ($x, f)
    }};
}

/// One random `(leaf, objective)` case for the named op variant.
fn op_case(name: &str, rng: &mut StdRng) -> (Tensor, Objective) {
    let (n, d) = dims(rng);
    let w = uniform(rng, &[n, d], -1.0, 1.0);
    let red = project(w.clone());
    let other = uniform(rng, &[n, d], -1.0, 1.0);
    let x = uniform(rng, &[n, d], -1.5, 1.5);
    match name {
        "add" => case!(x, |g, v| {
            let c = g.constant(other.clone());
            let y = g.add(v, c)?;
            red(g, y)
        }),
        "add/bias" => {
            let bias = uniform(rng, &[d], -1.0, 1.0);
            case!(bias, |g, v| {
                let c = g.constant(other.clone());
                let y = g.add(c, v)?;
                red(g, y)
            })
        }
        "sub/lhs" => case!(x, |g, v| {
            let c = g.constant(other.clone());
            let y = g.sub(v, c)?;
            red(g, y)
        }),
        "sub/rhs" => case!(x, |g, v| {
            let c = g.constant(other.clone());
            let y = g.sub(c, v)?;
            red(g, y)
        }),
        "mul" => case!(x, |g, v| {
            let c = g.constant(other.clone());
            let y = g.mul(v, c)?;
            let y = g.mul(y, v)?;
            red(g, y)
        }),
        "scale" => {
            let k = rng.gen_range(-3.0..3.0);
            case!(x, |g, v| {
                let y = g.scale(v, k);
                red(g, y)
            })
        }
        "add_scalar" => {
            let k = rng.gen_range(-3.0..3.0);
            case!(x, |g, v| {
                let y = g.add_scalar(v, k);
                let y = g.mul(y, y)?;
                red(g, y)
            })
        }
        "log" => case!(uniform(rng, &[n, d], 0.3, 3.0), |g, v| {
            let y = g.log(v);
            red(g, y)
        }),
        "relu" => case!(away_from_zero(rng, &[n, d], 0.05), |g, v| {
            let y = g.relu(v);
            red(g, y)
        }),
        "gelu" => case!(x, |g, v| {
            let y = g.gelu(v);
            red(g, y)
        }),
        "sigmoid" => case!(uniform(rng, &[n, d], -4.0, 4.0), |g, v| {
            let y = g.sigmoid(v);
            red(g, y)
        }),
        "sum" => case!(x, |g, v| {
            let y = g.mul(v, v)?;
            Ok(g.sum(y))
        }),
        "mean" => case!(x, |g, v| {
            let y = g.mul(v, v)?;
            Ok(g.mean(y))
        }),
        "matmul/lhs" | "matmul/rhs" => {
            let m = rng.gen_range(1..=4);
            let rhs = uniform(rng, &[d, m], -1.0, 1.0);
            let lhs = uniform(rng, &[n, d], -1.0, 1.0);
            let red = project(uniform(rng, &[n, m], -1.0, 1.0));
            if name == "matmul/lhs" {
                case!(lhs, |g, v| {
                    let c = g.constant(rhs.clone());
                    let y = g.matmul(v, c)?;
                    red(g, y)
                })
            } else {
                case!(rhs, |g, v| {
                    let c = g.constant(lhs.clone());
                    let y = g.matmul(c, v)?;
                    red(g, y)
                })
            }
        }
        "transpose" => {
            let red = project(uniform(rng, &[d, n], -1.0, 1.0));
            case!(x, |g, v| {
                let y = g.transpose(v)?;
                red(g, y)
            })
        }
        "concat/0" | "concat/1" => {
            let axis = if name == "concat/0" { 0 } else { 1 };
            let red = project(if axis == 0 { uniform(rng, &[2 * n, d], -1.0, 1.0) } else { uniform(rng, &[n, 2 * d], -1.0, 1.0) });
            case!(x, |g, v| {
                let c = g.constant(other.clone());
                let y = g.concat(&[c, v], axis)?;
                red(g, y)
            })
        }
        "slice/0" | "slice/1" => {
            let axis = if name == "slice/0" { 0 } else { 1 };
            let len = if axis == 0 { n } else { d };
            let start = rng.gen_range(0..len);
            let end = rng.gen_range(start + 1..=len);
            let shape = if axis == 0 { [end - start, d] } else { [n, end - start] };
            let red = project(uniform(rng, &shape, -1.0, 1.0));
            case!(x, |g, v| {
                let y = g.slice(v, axis, start, end)?;
                red(g, y)
            })
        }
        "embedding_lookup" => {
            let k = rng.gen_range(1..=6);
            let ids: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n)).collect();
            let red = project(uniform(rng, &[k, d], -1.0, 1.0));
            case!(x, |g, v| {
                let y = g.embedding_lookup(v, &ids)?;
                red(g, y)
            })
        }
        "softmax/0" | "softmax/1" => {
            let axis = if name == "softmax/0" { 0 } else { 1 };
            case!(x, |g, v| {
                let y = g.softmax(v, axis)?;
                red(g, y)
            })
        }
        "layer_norm/x" | "layer_norm/gamma" | "layer_norm/beta" => {
            let d = d.max(2);
            let x = uniform(rng, &[n, d], -2.0, 2.0);
            let gamma = uniform(rng, &[d], 0.5, 1.5);
            let beta = uniform(rng, &[d], -0.5, 0.5);
            let red = project(uniform(rng, &[n, d], -1.0, 1.0));
            match name {
                "layer_norm/x" => case!(x, |g, v| {
                    let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                    let y = g.layer_norm(v, gm, bt)?;
                    red(g, y)
                }),
                "layer_norm/gamma" => case!(gamma, |g, v| {
                    let (xx, bt) = (g.constant(x.clone()), g.constant(beta.clone()));
                    let y = g.layer_norm(xx, v, bt)?;
                    red(g, y)
                }),
                _ => case!(beta, |g, v| {
                    let (xx, gm) = (g.constant(x.clone()), g.constant(gamma.clone()));
                    let y = g.layer_norm(xx, gm, v)?;
                    red(g, y)
                }),
            }
        }
        "cross_entropy/sum" | "cross_entropy/mean" => {
            let reduction = if name.ends_with("sum") { Reduction::Sum } else { Reduction::Mean };
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..d)).collect();
            case!(uniform(rng, &[n, d], -3.0, 3.0), |g, v| g.cross_entropy(v, &targets, reduction))
        }
        "cosine_similarity/lhs" | "cosine_similarity/rhs" => {
            let m = rng.gen_range(1..=4);
            let a = away_from_zero(rng, &[n, d.max(2)], 0.2);
            let b = away_from_zero(rng, &[m, d.max(2)], 0.2);
            let red = project(uniform(rng, &[n, m], -1.0, 1.0));
            if name.ends_with("lhs") {
                case!(a, |g, v| {
                    let c = g.constant(b.clone());
                    let y = g.cosine_similarity(v, c)?;
                    red(g, y)
                })
            } else {
                case!(b, |g, v| {
                    let c = g.constant(a.clone());
                    let y = g.cosine_similarity(c, v)?;
                    red(g, y)
                })
            }
        }
        "l2_normalize" => case!(away_from_zero(rng, &[n, d], 0.2), |g, v| {
            let y = g.l2_normalize(v)?;
            red(g, y)
        }),
        other => panic!("no gradient case for {other}"),
    }
}

pub const GRAD_OPS: &[&str] = &[
    "add",
    "add/bias",
    "sub/lhs",
    "sub/rhs",
    "mul",
    "scale",
    "add_scalar",
    "log",
    "relu",
    "gelu",
    "sigmoid",
    "sum",
    "mean",
    "matmul/lhs",
    "matmul/rhs",
    "transpose",
    "concat/0",
    "concat/1",
    "slice/0",
    "slice/1",
    "embedding_lookup",
    "softmax/0",
    "softmax/1",
    "layer_norm/x",
    "layer_norm/gamma",
    "layer_norm/beta",
    "cross_entropy/sum",
    "cross_entropy/mean",
    "cosine_similarity/lhs",
    "cosine_similarity/rhs",
    "l2_normalize",
];

/// Worst relative finite-difference error per op over `cases` random inputs.
pub fn op_gradient_errors(cases: usize, seed: u64) -> BTreeMap<&'static str, f64> {
    GRAD_OPS
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let mut r = rng(seed ^ ((k as u64 + 1) << 32));
            let worst = (0..cases)
                .map(|_| {
                    let (x, f) = op_case(name, &mut r);
                    grad_check(|g, v| f(g, v), &x, 1e-5).unwrap()
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// Inverted dropout is linear with a fixed mask, so its gradient must equal
/// `output / input` entrywise.
pub fn dropout_gradient_error(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let (n, d) = dims(&mut r);
        let x = away_from_zero(&mut r, &[n, d], 0.1);
        let mut g = Graph::new();
        let v = g.param(&x);
        let y = g.dropout(v, 0.3, RngKey::new(seed).index(i as u64)).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad_tensor(v);
        for ((gx, yx), xx) in grad.data().iter().zip(g.data(y)).zip(x.data()) {
            worst = worst.max((gx - yx / xx).abs());
        }
    }
    worst
}

pub fn tiny_model(seed: u64) -> EncoderModel {
    let cfg = EncoderConfig {
        vocab_size: 12,
        num_tags: 3,
        d_model: 4,
        heads: 2,
        layers: 1,
        ff_dim: 6,
        max_len: 8,
        dropout: 0.0,
        proj_dim: 3,
        init_std: 0.5,
    };
    EncoderModel::new(cfg, seed).unwrap()
}

pub fn random_pairs(r: &mut StdRng, n: usize) -> Vec<TrainPair> {
    (0..n)
        .map(|_| {
            let len = r.gen_range(1..=5);
            let clean_ids: Vec<usize> = (0..len).map(|_| r.gen_range(4..12)).collect();
            let alen = r.gen_range(1..=6);
            let aug_ids = (0..alen).map(|_| r.gen_range(1..12)).collect();
            let gold = (0..len).map(|_| r.gen_range(0..3)).collect();
            TrainPair { clean_ids, aug_ids, gold }
        })
        .collect()
}

/// Worst relative error of the fine-tuning objective's analytic gradient
/// against central differences with the adversarial noise held fixed.
pub fn composed_gradient_error(seed: u64) -> f64 {
    let model = tiny_model(seed);
    let pairs = random_pairs(&mut rng(seed), 3);
    let batch: Vec<&TrainPair> = pairs.iter().collect();
    let cfg = FinetuneConfig { epsilon: 0.3, temperature: 0.5, ..FinetuneConfig::default() };
    let (grads, _, noises) = batch_gradients(&model, &batch, &cfg, None, ExecMode::Sequential).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for p in 0..model.params().len() {
        for j in 0..model.params()[p].numel() {
            let mut plus = model.clone();
            plus.params_mut()[p].data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut()[p].data_mut()[j] -= h;
            let num = (objective_with_noise(&plus, &batch, &cfg, &noises).unwrap()
                - objective_with_noise(&minus, &batch, &cfg, &noises).unwrap())
                / (2.0 * h);
            worst = worst.max((grads.0[p][j] - num).abs() / num.abs().max(1.0));
        }
    }
    worst
}

// ---- scalar oracles ----------------------------------------------------

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// `-ln(e^{x_t} / Σ_j e^{x_j})` by direct summation.
pub fn nll_oracle(row: &[f64], t: usize) -> f64 {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    -(row[t].exp() / z).ln()
}

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> Result<Value>) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g).unwrap();
    g.scalar(v)
}

/// Largest relative deviation from the oracle, per loss, over the worked
/// examples and `n` random inputs each.
pub fn loss_oracle_errors(n: usize, seed: u64) -> BTreeMap<&'static str, f64> {
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, got: f64, want: f64| {
        let e = (got - want).abs() / want.abs().max(1.0);
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };

    // worked examples
    let half_quarter = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
    note(
        "smp_loss",
        eval_scalar(|g| {
            let l = g.constant(half_quarter.clone());
            smp_loss(g, l, &[0, 0])
        }),
        2.0794415416798357,
    );
    note(
        "slot_loss",
        eval_scalar(|g| {
            let l = g.constant(half_quarter.clone());
            slot_loss(g, l, &[0, 0])
        }),
        (0.5f64.ln() + 0.25f64.ln()) / -2.0,
    );
    for (p, label, want) in [(0.9, 1u8, -(0.9f64.ln())), (0.5, 0, 2f64.ln())] {
        note(
            "snd_loss",
            eval_scalar(|g| {
                let v = g.constant(Tensor::vector(vec![p]));
                snd_loss(g, v, label)
            }),
            want,
        );
    }
    note(
        "contrastive_loss",
        eval_scalar(|g| {
            let q = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
            let k = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
            contrastive_loss(g, q, k, &[0], 0.1)
        }),
        (1.0 + (-10f64).exp()).ln(),
    );
    let (v, _) = fgv_perturbation(&Tensor::vector(vec![3.0, 4.0]), 0.1, false);
    note("fgv_perturbation", v.data()[0], 0.06);
    note("fgv_perturbation", v.data()[1], 0.08);

    let mut r = rng(seed);
    for _ in 0..n {
        let (m, c) = (r.gen_range(1..=5), r.gen_range(2..=6));
        let logits = uniform(&mut r, &[m, c], -4.0, 4.0);
        let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..c)).collect();
        let rows: Vec<f64> = (0..m).map(|i| nll_oracle(logits.row(i), targets[i])).collect();
        let total: f64 = rows.iter().sum();
        note(
            "smp_loss",
            eval_scalar(|g| {
                let l = g.constant(logits.clone());
                smp_loss(g, l, &targets)
            }),
            total,
        );
        note(
            "slot_loss",
            eval_scalar(|g| {
                let l = g.constant(logits.clone());
                slot_loss(g, l, &targets)
            }),
            total / m as f64,
        );

        let p: f64 = r.gen_range(0.01..0.99);
        let label = r.gen_range(0..=1u8);
        let want = if label == 1 { -p.ln() } else { -(1.0 - p).ln() };
        note(
            "snd_loss",
            eval_scalar(|g| {
                let v = g.constant(Tensor::vector(vec![p]));
                snd_loss(g, v, label)
            }),
            want,
        );

        let (nq, nk, d) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(2..=5));
        let q = away_from_zero(&mut r, &[nq, d], 0.1);
        let k = away_from_zero(&mut r, &[nk, d], 0.1);
        let pos: Vec<usize> = (0..nq).map(|_| r.gen_range(0..nk)).collect();
        let tau = r.gen_range(0.05..2.0);
        let want = (0..nq)
            .map(|i| {
                let sims: Vec<f64> = (0..nk).map(|j| cosine_oracle(q.row(i), k.row(j)) / tau).collect();
                nll_oracle(&sims, pos[i])
            })
            .sum::<f64>()
            / nq as f64;
        note(
            "contrastive_loss",
            eval_scalar(|g| {
                let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
                contrastive_loss(g, qv, kv, &pos, tau)
            }),
            want,
        );

        let grad = away_from_zero(&mut r, &[m, c], 0.01);
        let eps = r.gen_range(0.01..3.0);
        let norm = grad.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let (v, _) = fgv_perturbation(&grad, eps, false);
        for (o, gx) in v.data().iter().zip(grad.data()) {
            note("fgv_perturbation", *o, eps * gx / norm);
        }

        let (a, b, w) = (r.gen_range(0.0..5.0), r.gen_range(0.0..5.0), r.gen_range(0.0..=1.0));
        let consts = |g: &mut Graph| (g.constant(Tensor::scalar(a)), g.constant(Tensor::scalar(b)));
        note(
            "joint_pretrain_loss",
            eval_scalar(|g| {
                let (x, y) = consts(g);
                joint_pretrain_loss(g, x, y, w)
            }),
            w * a + (1.0 - w) * b,
        );
        note(
            "joint_finetune_loss",
            eval_scalar(|g| {
                let (x, y) = consts(g);
                joint_finetune_loss(g, x, y, w)
            }),
            w * a + (1.0 - w) * b,
        );
    }
    worst
}

/// `(worst |‖v‖ − ε|, worst |L'_slot − L_slot| at ε = 0)`.
pub fn fgv_identity(n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let mut norm_err: f64 = 0.0;
    for _ in 0..n {
        let (a, b) = dims(&mut r);
        let grad = uniform(&mut r, &[a, b], -10.0, 10.0);
        let eps = r.gen_range(1e-3..10.0);
        let (v, skipped) = fgv_perturbation(&grad, eps, false);
        assert!(!skipped);
        norm_err = norm_err.max((v.l2_norm() - eps).abs());
    }
    let mut adv_err: f64 = 0.0;
    for i in 0..20 {
        let model = tiny_model(seed + i);
        let pairs = random_pairs(&mut r, 3);
        let batch: Vec<&TrainPair> = pairs.iter().collect();
        let cfg = FinetuneConfig { epsilon: 0.0, ..FinetuneConfig::default() };
        let (_, s, _) = batch_gradients(&model, &batch, &cfg, None, ExecMode::Sequential).unwrap();
        adv_err = adv_err.max((s.l_slot + s.l_slot_adv - 2.0 * s.l_slot).abs());
    }
    (norm_err, adv_err)
}

// ---- span F1 -----------------------------------------------------------

const LABELS: [&str; 3] = ["city", "date", "name"];

pub fn random_tags(r: &mut StdRng, len: usize) -> Vec<Tag> {
    let mut tags = Vec::with_capacity(len);
    for i in 0..len {
        let label = LABELS.choose(r).unwrap().to_string();
        let t = match r.gen_range(0..3) {
            0 => Tag::O,
            1 => Tag::B(label),
            _ => match tags.last() {
                Some(Tag::B(x)) | Some(Tag::I(x)) if i > 0 => Tag::I(x.clone()),
                _ => Tag::B(label),
            },
        };
        tags.push(t);
    }
    tags
}

/// Counts matches by enumerating every candidate span of every sentence.
pub fn brute_force_counts(gold: &[Vec<SlotSpan>], pred: &[Vec<SlotSpan>], lens: &[usize]) -> (usize, usize, usize) {
    let (mut g, mut p, mut c) = (0, 0, 0);
    for ((gs, ps), &len) in gold.iter().zip(pred).zip(lens) {
        for start in 0..len {
            for end in start + 1..=len {
                for label in LABELS {
                    let cand = SlotSpan::new(start, end, label);
                    let (in_g, in_p) = (gs.contains(&cand), ps.contains(&cand));
                    g += in_g as usize;
                    p += in_p as usize;
                    c += (in_g && in_p) as usize;
                }
            }
        }
    }
    (g, p, c)
}

/// Number of random instances where `span_f1` disagrees with the brute-force
/// matcher, plus whether the worked example reproduces.
pub fn f1_oracle(n: usize, seed: u64) -> (usize, bool) {
    let mut r = rng(seed);
    let mut mismatches = 0;
    for _ in 0..n {
        let k = r.gen_range(1..=4);
        let lens: Vec<usize> = (0..k).map(|_| r.gen_range(0..=7)).collect();
        let gold: Vec<Vec<SlotSpan>> = lens.iter().map(|&l| spans_from_tags(&random_tags(&mut r, l)).unwrap()).collect();
        let pred: Vec<Vec<SlotSpan>> = gold
            .iter()
            .zip(&lens)
            .map(|(gs, &l)| {
                // mostly copy gold, sometimes redraw, to hit partial overlaps
                if r.gen_bool(0.4) {
                    gs.iter().filter(|_| r.gen_bool(0.7)).cloned().collect()
                } else {
                    spans_from_tags(&random_tags(&mut r, l)).unwrap()
                }
            })
            .collect();
        let s = span_f1(&gold, &pred).unwrap();
        let (g, p, c) = brute_force_counts(&gold, &pred, &lens);
        let prec = if p == 0 { 0.0 } else { c as f64 / p as f64 };
        let rec = if g == 0 { 0.0 } else { c as f64 / g as f64 };
        let f1 = if g + p == 0 { 0.0 } else { 2.0 * c as f64 / (g + p) as f64 };
        let same = (s.gold, s.pred, s.correct) == (g, p, c)
            && s.precision == prec
            && s.recall == rec
            && (s.f1 - f1).abs() < 1e-12;
        mismatches += !same as usize;
    }
    let gold = vec![vec![SlotSpan::new(0, 1, "city"), SlotSpan::new(2, 4, "date")]];
    let pred = vec![vec![SlotSpan::new(0, 1, "city")]];
    let s = span_f1(&gold, &pred).unwrap();
    let worked = s.precision == 1.0 && s.recall == 0.5 && (s.f1 - 2.0 / 3.0).abs() < 1e-12 && format!("{:.4}", s.f1) == "0.6667";
    (mismatches, worked)
}

// ---- perturbation properties -------------------------------------------

/// Token pool mixing lexicon keys, stopwords and random strings so every
/// operator has something to act on.
pub fn token_pool(lex: &Lexicons) -> Vec<String> {
    let mut pool: Vec<String> = lex.homophones.keys().chain(lex.synonyms.keys()).cloned().collect();
    pool.extend(lex.stopwords.iter().cloned());
    pool.extend(["a", "x", "Boston", "7pm", "tomorrow", "flight", "café"].map(String::from));
    pool
}

pub fn random_sentence(r: &mut StdRng, pool: &[String]) -> Sentence {
    let len = r.gen_range(1..=12);
    let tokens = (0..len)
        .map(|_| {
            if r.gen_bool(0.2) {
                let n = r.gen_range(1..=9);
                (0..n).map(|_| (b'a' + r.gen_range(0..26u8)) as char).collect()
            } else {
                pool.choose(r).unwrap().clone()
            }
        })
        .collect();
    Sentence::new(tokens, random_tags(r, len))
}

/// Maps each untouched gold span through `script`; `None` when any of its
/// tokens was substituted, deleted or split by an insertion.
pub fn carry_span(script: &[Edit], span: &SlotSpan) -> Option<SlotSpan> {
    let mut map: Vec<Option<usize>> = Vec::new();
    let mut out = 0;
    let mut inserted_after: Vec<bool> = Vec::new();
    for e in script {
        match e {
            Edit::Keep => {
                map.push(Some(out));
                inserted_after.push(false);
                out += 1;
            }
            Edit::Substitute(_) => {
                map.push(None);
                inserted_after.push(false);
                out += 1;
            }
            Edit::Delete => {
                map.push(None);
                inserted_after.push(false);
            }
            Edit::Insert(_) => {
                if let Some(last) = inserted_after.last_mut() {
                    *last = true;
                }
                out += 1;
            }
        }
    }
    let start = map.get(span.start).copied().flatten()?;
    for i in span.start..span.end {
        map.get(i).copied().flatten()?;
        if i + 1 < span.end && inserted_after[i] {
            return None;
        }
    }
    Some(SlotSpan::new(start, start + (span.end - span.start), span.label.clone()))
}

#[derive(Debug, Default, Clone)]
pub struct PropertyTally {
    pub sentences: usize,
    pub nondeterministic: usize,
    pub malformed: usize,
    pub lost_spans: usize,
    pub checked_spans: usize,
}

impl PropertyTally {
    pub fn ok(&self) -> bool {
        self.nondeterministic == 0 && self.malformed == 0 && self.lost_spans == 0
    }
}

fn step_properties(spec: &PerturbationSpec, s: &Sentence, lex: &Lexicons, t: &mut PropertyTally) -> Sentence {
    let (out, script) = apply_traced(spec, s, lex).unwrap();
    let (again, _) = apply_traced(spec, s, lex).unwrap();
    t.nondeterministic += (out != again) as usize;
    t.malformed += (check_bio(&out.tags).is_err() || out.tags.len() != out.tokens.len()) as usize;
    let spans = extract_spans(&out).unwrap_or_default();
    for span in extract_spans(s).unwrap() {
        if let Some(mapped) = carry_span(&script, &span) {
            t.checked_spans += 1;
            t.lost_spans += !spans.contains(&mapped) as usize;
        }
    }
    out
}

/// Runs `n` random sentences through `ops` one step at a time, checking each
/// step and then the composed chain as a whole.
pub fn chain_properties(ops: &[PerturbOp], n: usize, seed: u64, lex: &Lexicons) -> PropertyTally {
    let pool = token_pool(lex);
    let mut r = rng(seed);
    let mut t = PropertyTally::default();
    for _ in 0..n {
        let s = random_sentence(&mut r, &pool);
        let specs: Vec<PerturbationSpec> = ops
            .iter()
            .map(|&op| PerturbationSpec::new(op, r.gen_range(0.05..=1.0), r.gen()).unwrap())
            .collect();
        let mut cur = s.clone();
        for spec in &specs {
            cur = step_properties(spec, &cur, lex, &mut t);
        }
        let composed = compose(&specs, &s, lex).unwrap();
        let again = compose(&specs, &s, lex).unwrap();
        t.nondeterministic += (composed != again) as usize;
        t.malformed += composed.validate().is_err() as usize;
        t.malformed += (composed.tokens != cur.tokens || composed.tags != cur.tags) as usize;
        t.sentences += 1;
    }
    t
}

/// Every single operator plus the four mixed chains.
pub fn perturbation_suites() -> Vec<(String, Vec<PerturbOp>)> {
    let mut out: Vec<(String, Vec<PerturbOp>)> = PerturbOp::ALL.iter().map(|&op| (op.name().to_string(), vec![op])).collect();
    out.extend(mixed_suite_ops().into_iter().map(|(n, ops)| (n.to_string(), ops)));
    out
}
