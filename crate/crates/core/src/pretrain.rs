//! Entity-masked token prediction plus clean/noisy sentence discrimination.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sentence, SlotSpan, Vocab};
use crate::encoder::{Binding, Dropout, EncoderModel, Gradients};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::par::{self, ExecMode};
use crate::tensor::{Graph, Reduction, Rng, RngKey, Tensor, Value};

/// One sentence prepared for masked prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub original_ids: Vec<usize>,
    pub masked_ids: Vec<usize>,
    /// Token indices (not counting the aggregate position).
    pub mask_positions: Vec<usize>,
    pub noisiness: u8,
}

/// Masks every token of `min(k, #spans)` spans chosen uniformly without replacement.
pub fn mask_entities(sentence: &Sentence, vocab: &Vocab, k: usize, rng: &mut Rng) -> Result<MaskedExample> {
    if k == 0 {
        return Err(Error::Config("pretrain.k must be at least 1".into()));
    }
    let spans = crate::corpus::extract_spans(sentence)?;
    let original_ids = vocab.encode(&sentence.tokens);
    let mut masked_ids = original_ids.clone();
    let chosen: Vec<&SlotSpan> = spans.choose_multiple(rng, k.min(spans.len())).collect();
    let mut mask_positions: Vec<usize> = chosen.iter().flat_map(|s| s.start..s.end).collect();
    mask_positions.sort_unstable();
    for &p in &mask_positions {
        masked_ids[p] = Vocab::MASK;
    }
    Ok(MaskedExample { original_ids, masked_ids, mask_positions, noisiness: sentence.noisiness })
}

/// Summed negative log-likelihood of `targets` under `logits` (M×V); M = 0 gives 0.
pub fn smp_loss(g: &mut Graph, logits: Value, targets: &[usize]) -> Result<Value> {
    if targets.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    g.cross_entropy(logits, targets, Reduction::Sum)
}

/// Binary cross-entropy of a one-element probability against `label` (1 = noisy).
pub fn snd_loss(g: &mut Graph, prob: Value, label: u8) -> Result<Value> {
    if g.data(prob).len() != 1 {
        return Err(Error::shape("snd_loss", g.shape(prob), &[1]));
    }
    let p = if label == 1 {
        prob
    } else {
        let neg = g.scale(prob, -1.0);
        g.add_scalar(neg, 1.0)
    };
    let lp = g.log(p);
    let s = g.sum(lp);
    Ok(g.scale(s, -1.0))
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {w} outside [0, 1]")))
    }
}

/// `alpha·l_smp + (1 − alpha)·l_snd`.
pub fn joint_pretrain_loss(g: &mut Graph, l_smp: Value, l_snd: Value, alpha: f64) -> Result<Value> {
    check_weight("alpha", alpha)?;
    let a = g.scale(l_smp, alpha);
    let b = g.scale(l_snd, 1.0 - alpha);
    g.add(a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip: f64,
    pub k: usize,
    pub alpha: f64,
    /// Divide the masked-prediction sum by the number of masked tokens.
    pub normalize_smp: bool,
    pub use_smp: bool,
    pub use_snd: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 0.05,
            optimizer: OptimizerKind::Sgd,
            clip: 1.0,
            k: 1,
            alpha: 0.6,
            normalize_smp: false,
            use_smp: true,
            use_snd: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Weights on (masked prediction, discrimination) after dropping disabled terms.
    pub fn weights(&self) -> Result<(f64, f64)> {
        check_weight("pretrain.alpha", self.alpha)?;
        match (self.use_smp, self.use_snd) {
            (true, true) => Ok((self.alpha, 1.0 - self.alpha)),
            (true, false) => Ok((1.0, 0.0)),
            (false, true) => Ok((0.0, 1.0)),
            (false, false) => Err(Error::Config("pre-training with both objectives disabled".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub l_smp: f64,
    pub l_snd: f64,
    pub joint: f64,
}

struct ExampleOut {
    grads: Gradients,
    l_smp: f64,
    l_snd: f64,
    joint: f64,
}

/// Loss terms of one example; returns `(smp, snd, weighted)` values.
pub fn example_loss<'m>(
    g: &mut Graph,
    model: &'m EncoderModel,
    ex: &MaskedExample,
    weights: (f64, f64),
    normalize_smp: bool,
    dropout: Dropout,
) -> Result<(Value, Value, Value, Binding<'m>)> {
    let mut b = model.bind();
    let enc = b.encode(g, &ex.masked_ids, dropout)?;
    // skip masked positions lost to truncation
    let max_tok = g.shape(enc.hidden)[0] - 1;
    let (rows, targets): (Vec<usize>, Vec<usize>) = ex
        .mask_positions
        .iter()
        .filter(|&&p| p < max_tok)
        .map(|&p| (p + 1, ex.original_ids[p]))
        .unzip();
    let l_smp = if rows.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let h = g.embedding_lookup(enc.hidden, &rows)?;
        let logits = b.vocab_logits(g, h)?;
        let l = smp_loss(g, logits, &targets)?;
        if normalize_smp {
            g.scale(l, 1.0 / rows.len() as f64)
        } else {
            l
        }
    };
    let prob = b.noisiness_prob(g, enc.sentence)?;
    let l_snd = snd_loss(g, prob, ex.noisiness)?;
    let a = g.scale(l_smp, weights.0);
    let c = g.scale(l_snd, weights.1);
    let joint = g.add(a, c)?;
    Ok((l_smp, l_snd, joint, b))
}

fn example_grads(model: &EncoderModel, ex: &MaskedExample, cfg: &PretrainConfig, scale: f64, key: RngKey) -> Result<ExampleOut> {
    let weights = cfg.weights()?;
    let mut g = Graph::new();
    let (l_smp, l_snd, joint, b) = example_loss(&mut g, model, ex, weights, cfg.normalize_smp, Dropout::On(key))?;
    g.backward_seeded(&[(joint, vec![scale])])?;
    Ok(ExampleOut {
        grads: b.gradients(&g),
        l_smp: g.scalar(l_smp),
        l_snd: g.scalar(l_snd),
        joint: g.scalar(joint),
    })
}

/// Optimizes the weighted objective over clean (label 0) and augmented
/// (label 1) sentences, shuffled together each epoch. Returns one trace
/// record per epoch with example-mean losses.
pub fn run_pretraining(
    model: &mut EncoderModel,
    clean: &Corpus,
    augmented: &Corpus,
    vocab: &Vocab,
    cfg: &PretrainConfig,
    mode: ExecMode,
) -> Result<Vec<PretrainEpoch>> {
    if clean.is_empty() {
        return Err(Error::Config("pre-training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain.batch_size must be positive".into()));
    }
    cfg.weights()?;
    let sentences: Vec<Sentence> = clean
        .sentences
        .iter()
        .map(|s| Sentence { noisiness: 0, ..s.clone() })
        .chain(augmented.sentences.iter().cloned())
        .collect();
    let root = RngKey::new(cfg.seed).derive("pretrain");
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.clip);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let ek = root.index(epoch as u64);
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        order.shuffle(&mut ek.derive("shuffle").stream());
        let (mut sums, mut n) = ([0.0; 3], 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let outs = par::map(mode, batch, |_, &i| {
                let mut rng = ek.derive("mask").index(i as u64).stream();
                let ex = mask_entities(&sentences[i], vocab, cfg.k, &mut rng)?;
                example_grads(model, &ex, cfg, scale, ek.derive("dropout").index(i as u64))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut total = Gradients::zeros_like(model);
            for o in &outs {
                total.add_assign(&o.grads);
                sums[0] += o.l_smp;
                sums[1] += o.l_snd;
                sums[2] += o.joint;
                n += 1;
            }
            opt.step(model, &total);
        }
        let rec = PretrainEpoch {
            epoch,
            l_smp: sums[0] / n as f64,
            l_snd: sums[1] / n as f64,
            joint: sums[2] / n as f64,
        };
        log::info!("pretrain epoch {epoch}: smp {:.4} snd {:.4} joint {:.4}", rec.l_smp, rec.l_snd, rec.joint);
        if !rec.joint.is_finite() {
            return Err(Error::Contract(format!("pre-training loss diverged at epoch {epoch}")));
        }
        trace.push(rec);
    }
    Ok(trace)
}
