//! Slot tagging with in-batch contrastive alignment and single-step
//! adversarial embedding noise.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Sentence, TagSet, Vocab};
use crate::encoder::{Binding, Dropout, EncoderModel, Gradients};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::par::{self, ExecMode};
use crate::tensor::{Graph, Reduction, RngKey, Tensor, Value, EPS};

/// Which components a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_pretrained: bool,
    pub use_smp: bool,
    pub use_snd: bool,
    pub use_contrastive: bool,
    pub use_adversarial: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags::FULL
    }
}

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags {
        use_pretrained: true,
        use_smp: true,
        use_snd: true,
        use_contrastive: true,
        use_adversarial: true,
    };
    pub const BASELINE: AblationFlags = AblationFlags {
        use_pretrained: false,
        use_smp: false,
        use_snd: false,
        use_contrastive: false,
        use_adversarial: false,
    };

    /// Whether pre-training runs at all.
    pub fn pretrains(&self) -> bool {
        self.use_pretrained && (self.use_smp || self.use_snd)
    }

    /// Standard variant names and their flags.
    pub fn variant(name: &str) -> Option<AblationFlags> {
        let f = AblationFlags::FULL;
        Some(match name {
            "full" => f,
            "-pretraining" => AblationFlags { use_pretrained: false, use_smp: false, use_snd: false, ..f },
            "-smp" => AblationFlags { use_smp: false, ..f },
            "-snd" => AblationFlags { use_snd: false, ..f },
            "-con" => AblationFlags { use_contrastive: false, ..f },
            "-adv" => AblationFlags { use_adversarial: false, ..f },
            "baseline" => AblationFlags::BASELINE,
            _ => return None,
        })
    }

    /// Weights on (contrastive, adversarial-or-plain slot) after dropping disabled terms.
    pub fn loss_weights(&self, beta: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("finetune.beta = {beta} outside [0, 1]")));
        }
        Ok(if self.use_contrastive { (beta, 1.0 - beta) } else { (0.0, 1.0) })
    }
}

/// Mean per-token cross-entropy against gold tag ids.
pub fn slot_loss(g: &mut Graph, logits: Value, gold: &[usize]) -> Result<Value> {
    g.cross_entropy(logits, gold, Reduction::Mean)
}

/// Precomputed contrastive inputs: unit-norm query and pool rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub queries: Tensor,
    pub pool: Tensor,
    /// Row of `pool` holding each query's positive.
    pub positive_index: Vec<usize>,
    pub temperature: f64,
}

/// Mean over queries of `−log softmax(sim(q, pool)/τ)[positive]`, cosine similarity.
pub fn contrastive_loss(g: &mut Graph, queries: Value, pool: Value, positive_index: &[usize], temperature: f64) -> Result<Value> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let sim = g.cosine_similarity(queries, pool)?;
    let logits = g.scale(sim, 1.0 / temperature);
    g.cross_entropy(logits, positive_index, Reduction::Mean)
}

impl ContrastiveBatch {
    pub fn loss(&self) -> Result<f64> {
        let mut g = Graph::new();
        let q = g.constant(self.queries.clone());
        let k = g.constant(self.pool.clone());
        let l = contrastive_loss(&mut g, q, k, &self.positive_index, self.temperature)?;
        Ok(g.scalar(l))
    }
}

/// `ε·g/‖g‖`. With `per_row`, each row is normalized separately. Returns the
/// noise and whether the zero-gradient policy fired (‖g‖ < 1e-12 gives zeros).
pub fn fgv_perturbation(grad: &Tensor, epsilon: f64, per_row: bool) -> (Tensor, bool) {
    let mut out = Tensor::zeros(grad.shape());
    if per_row && grad.shape().len() == 2 {
        let d = grad.shape()[1];
        let mut any = false;
        for (i, row) in grad.data().chunks(d.max(1)).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n >= EPS {
                any = true;
                for (j, x) in row.iter().enumerate() {
                    out.data_mut()[i * d + j] = epsilon * x / n;
                }
            }
        }
        return (out, !any);
    }
    let n = grad.l2_norm();
    if n < EPS {
        return (out, true);
    }
    out.data_mut().iter_mut().zip(grad.data()).for_each(|(o, x)| *o = epsilon * x / n);
    (out, false)
}

/// `beta·l_cl + (1 − beta)·l_adv`.
pub fn joint_finetune_loss(g: &mut Graph, l_cl: Value, l_adv: Value, beta: f64) -> Result<Value> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta = {beta} outside [0, 1]")));
    }
    let a = g.scale(l_cl, beta);
    let b = g.scale(l_adv, 1.0 - beta);
    g.add(a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip: f64,
    pub temperature: f64,
    pub epsilon: f64,
    pub per_row_noise: bool,
    pub beta: f64,
    pub flags: AblationFlags,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 16,
            lr: 0.05,
            optimizer: OptimizerKind::Sgd,
            clip: 1.0,
            temperature: 0.07,
            epsilon: 1.0,
            per_row_noise: false,
            beta: 0.3,
            flags: AblationFlags::FULL,
            seed: 0,
        }
    }
}

/// An encoded clean sentence, its augmented counterpart and gold tag ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPair {
    pub clean_ids: Vec<usize>,
    pub aug_ids: Vec<usize>,
    pub gold: Vec<usize>,
}

pub fn make_pairs(clean: &Corpus, augmented: &Corpus, vocab: &Vocab, tags: &TagSet) -> Result<Vec<TrainPair>> {
    if clean.len() != augmented.len() {
        return Err(Error::Contract(format!(
            "clean corpus has {} sentences but augmented has {}",
            clean.len(),
            augmented.len()
        )));
    }
    clean
        .sentences
        .iter()
        .zip(&augmented.sentences)
        .map(|(c, a): (&Sentence, &Sentence)| {
            Ok(TrainPair { clean_ids: vocab.encode(&c.tokens), aug_ids: vocab.encode(&a.tokens), gold: tags.encode(&c.tags)? })
        })
        .collect()
}

/// Per-batch loss values; slot terms are batch means.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub l_cl: f64,
    pub l_slot: f64,
    pub l_slot_adv: f64,
    pub joint: f64,
    pub fgv_skips: usize,
}

/// Dropout keys for the clean and augmented passes of one pair.
fn pair_dropout(key: Option<RngKey>, which: &str) -> Dropout {
    key.map_or(Dropout::Off, |k| Dropout::On(k.derive(which)))
}

struct PairState<'m> {
    g: Graph,
    b: Binding<'m>,
    slot: Value,
    slot_adv: Option<Value>,
    q: Option<Value>,
    k: Option<Value>,
    noise: Option<Tensor>,
    skipped: bool,
}

/// Noise source for the second slot pass.
#[derive(Clone, Copy)]
enum NoiseMode<'a> {
    /// Derive from the first pass's embedding gradient.
    Fgv,
    /// Use the given tensors as constants.
    Fixed(&'a [Tensor]),
}

fn forward_pair<'m>(
    model: &'m EncoderModel,
    pair: &TrainPair,
    cfg: &FinetuneConfig,
    noise: Option<&Tensor>,
    fixed: bool,
    key: Option<RngKey>,
) -> Result<PairState<'m>> {
    let flags = cfg.flags;
    let mut g = Graph::new();
    let mut b = model.bind();
    let clean_drop = pair_dropout(key, "clean");
    let enc = b.encode(&mut g, &pair.clean_ids, clean_drop)?;
    let rows = b.token_rows(&mut g, enc.hidden)?;
    let logits = b.tag_logits(&mut g, rows)?;
    let n = g.shape(rows)[0];
    let slot = slot_loss(&mut g, logits, &pair.gold[..n])?;

    let mut slot_adv = None;
    let mut used_noise = None;
    let mut skipped = false;
    if flags.use_adversarial {
        let v = if fixed {
            noise.cloned().ok_or_else(|| Error::Contract("fixed noise missing for a pair".into()))?
        } else {
            g.backward(slot)?;
            let grad = g.grad_tensor(enc.embeddings);
            g.zero_grad();
            let (v, skip) = fgv_perturbation(&grad, cfg.epsilon, cfg.per_row_noise);
            skipped = skip;
            v
        };
        let vc = g.constant(v.clone());
        let e2 = g.add(enc.embeddings, vc)?;
        let (h2, _) = b.encode_embeddings(&mut g, e2, clean_drop)?;
        let rows2 = b.token_rows(&mut g, h2)?;
        let logits2 = b.tag_logits(&mut g, rows2)?;
        slot_adv = Some(slot_loss(&mut g, logits2, &pair.gold[..n])?);
        used_noise = Some(v);
    }

    let (mut q, mut k) = (None, None);
    if flags.use_contrastive {
        q = Some(b.project(&mut g, enc.sentence)?);
        let aug = b.encode(&mut g, &pair.aug_ids, pair_dropout(key, "augmented"))?;
        k = Some(b.project(&mut g, aug.sentence)?);
    }
    Ok(PairState { g, b, slot, slot_adv, q, k, noise: used_noise, skipped })
}

/// Gradient of the (possibly ablated) objective over one batch:
/// `w_cl·L_cl + w_slot·mean_i(L_slot,i + L'_slot,i)`, with `L'_slot` dropped
/// when adversarial training is off. Returns gradients, loss values and the
/// noise tensors used in the second pass.
fn batch_pass(
    model: &EncoderModel,
    batch: &[&TrainPair],
    cfg: &FinetuneConfig,
    noise: NoiseMode<'_>,
    key: Option<RngKey>,
    mode: ExecMode,
) -> Result<(Gradients, StepStats, Vec<Tensor>)> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!("finetune.temperature must be positive, got {}", cfg.temperature)));
    }
    let (w_cl, w_slot) = cfg.flags.loss_weights(cfg.beta)?;
    let bsz = batch.len();
    if bsz == 0 {
        return Ok((Gradients::zeros_like(model), StepStats::default(), Vec::new()));
    }
    let mut states = par::map(mode, batch, |i, pair| {
        let fixed = match noise {
            NoiseMode::Fixed(ns) => Some(ns.get(i)),
            NoiseMode::Fgv => None,
        };
        forward_pair(model, pair, cfg, fixed.flatten(), fixed.is_some(), key.map(|k| k.index(i as u64)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut stats = StepStats::default();
    let mut seeds_q: Vec<Vec<f64>> = vec![Vec::new(); bsz];
    let mut seeds_k: Vec<Vec<f64>> = vec![Vec::new(); bsz];
    if cfg.flags.use_contrastive {
        let p = model.config.proj_dim;
        let gather = |pick: fn(&PairState<'_>) -> Value| -> Tensor {
            let data = states.iter().flat_map(|s| s.g.data(pick(s)).to_vec()).collect();
            Tensor::matrix(bsz, p, data).expect("projection rows")
        };
        let qs = gather(|s| s.q.expect("contrastive on"));
        let ks = gather(|s| s.k.expect("contrastive on"));
        let mut g = Graph::new();
        let q = g.param(&qs);
        let k = g.param(&ks);
        let targets: Vec<usize> = (0..bsz).collect();
        let l = contrastive_loss(&mut g, q, k, &targets, cfg.temperature)?;
        g.backward(l)?;
        stats.l_cl = g.scalar(l);
        let (dq, dk) = (g.grad_tensor(q), g.grad_tensor(k));
        for i in 0..bsz {
            seeds_q[i] = dq.row(i).iter().map(|x| x * w_cl).collect();
            seeds_k[i] = dk.row(i).iter().map(|x| x * w_cl).collect();
        }
    }

    let per = w_slot / bsz as f64;
    let grads = par::map_mut(mode, &mut states, |i, s| -> Result<Gradients> {
        let mut seeds = vec![(s.slot, vec![per])];
        if let Some(v) = s.slot_adv {
            seeds.push((v, vec![per]));
        }
        if let (Some(q), Some(k)) = (s.q, s.k) {
            seeds.push((q, seeds_q[i].clone()));
            seeds.push((k, seeds_k[i].clone()));
        }
        s.g.backward_seeded(&seeds)?;
        Ok(s.b.gradients(&s.g))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    for s in &states {
        stats.l_slot += s.g.scalar(s.slot) / bsz as f64;
        if let Some(v) = s.slot_adv {
            stats.l_slot_adv += s.g.scalar(v) / bsz as f64;
        }
        stats.fgv_skips += s.skipped as usize;
    }
    let l_adv = stats.l_slot + stats.l_slot_adv;
    stats.joint = w_cl * stats.l_cl + w_slot * l_adv;
    let noises = states.into_iter().filter_map(|s| s.noise).collect();
    Ok((Gradients::sum(&grads, model), stats, noises))
}

/// Gradient and losses of one training step. `key` enables dropout.
pub fn batch_gradients(
    model: &EncoderModel,
    batch: &[&TrainPair],
    cfg: &FinetuneConfig,
    key: Option<RngKey>,
    mode: ExecMode,
) -> Result<(Gradients, StepStats, Vec<Tensor>)> {
    batch_pass(model, batch, cfg, NoiseMode::Fgv, key, mode)
}

/// Objective value with the second-pass noise held fixed and dropout off.
/// Differentiating this numerically checks [`batch_gradients`].
pub fn objective_with_noise(model: &EncoderModel, batch: &[&TrainPair], cfg: &FinetuneConfig, noises: &[Tensor]) -> Result<f64> {
    let (_, stats, _) = batch_pass(model, batch, cfg, NoiseMode::Fixed(noises), None, ExecMode::Sequential)?;
    Ok(stats.joint)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub l_cl: f64,
    pub l_slot: f64,
    pub l_slot_adv: f64,
    pub joint: f64,
    pub fgv_skips: usize,
}

/// Trains on aligned clean/augmented corpora; returns one record per epoch
/// with batch-mean losses.
pub fn run_finetuning(model: &mut EncoderModel, pairs: &[TrainPair], cfg: &FinetuneConfig, mode: ExecMode) -> Result<Vec<FinetuneEpoch>> {
    if pairs.is_empty() {
        return Err(Error::Config("fine-tuning corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("finetune.batch_size must be positive".into()));
    }
    let root = RngKey::new(cfg.seed).derive("finetune");
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.clip);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let ek = root.index(epoch as u64);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ek.derive("shuffle").stream());
        let mut acc = FinetuneEpoch { epoch, l_cl: 0.0, l_slot: 0.0, l_slot_adv: 0.0, joint: 0.0, fgv_skips: 0 };
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let key = ek.derive("dropout").index(bi as u64);
            let (grads, s, _) = batch_gradients(model, &batch, cfg, Some(key), mode)?;
            opt.step(model, &grads);
            acc.l_cl += s.l_cl;
            acc.l_slot += s.l_slot;
            acc.l_slot_adv += s.l_slot_adv;
            acc.joint += s.joint;
            acc.fgv_skips += s.fgv_skips;
            batches += 1;
        }
        let n = batches as f64;
        acc.l_cl /= n;
        acc.l_slot /= n;
        acc.l_slot_adv /= n;
        acc.joint /= n;
        log::info!(
            "finetune epoch {epoch}: cl {:.4} slot {:.4} slot' {:.4} joint {:.4}",
            acc.l_cl,
            acc.l_slot,
            acc.l_slot_adv,
            acc.joint
        );
        if !acc.joint.is_finite() {
            return Err(Error::Contract(format!("fine-tuning loss diverged at epoch {epoch}")));
        }
        trace.push(acc);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    #[test]
    fn slot_loss_oracle() {
        let mut g = Graph::new();
        // gold probabilities 0.5 and 0.25
        let logits = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap());
        let l = slot_loss(&mut g, logits, &[0, 0]).unwrap();
        assert!((g.scalar(l) - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        let uniform = g.constant(Tensor::zeros(&[3, 5]));
        let l = slot_loss(&mut g, uniform, &[0, 4, 2]).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);
        assert!(slot_loss(&mut g, uniform, &[0]).is_err());
    }

    #[test]
    fn contrastive_oracle() {
        let batch = ContrastiveBatch {
            queries: Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
            pool: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            positive_index: vec![0],
            temperature: 0.1,
        };
        let want = (1.0 + (-10f64).exp()).ln();
        assert!((batch.loss().unwrap() - want).abs() < 1e-15);
        let solo = ContrastiveBatch { pool: Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), ..batch.clone() };
        assert_eq!(solo.loss().unwrap(), 0.0);
        let bad = ContrastiveBatch { temperature: 0.0, ..batch };
        assert!(matches!(bad.loss(), Err(Error::Config(_))));
    }

    #[test]
    fn fgv_oracle() {
        let (v, skip) = fgv_perturbation(&Tensor::vector(vec![3.0, 4.0]), 0.1, false);
        assert!(!skip);
        assert!((v.data()[0] - 0.06).abs() < 1e-15 && (v.data()[1] - 0.08).abs() < 1e-15);
        let (v, skip) = fgv_perturbation(&Tensor::zeros(&[2, 3]), 0.1, false);
        assert!(skip && v.data().iter().all(|&x| x == 0.0));
        let (v, _) = fgv_perturbation(&Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 2.0]).unwrap(), 1.0, true);
        assert_eq!(v.data(), &[0.6, 0.8, 0.0, 1.0]);
    }

    #[test]
    fn joint_and_flags() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(2.0));
        let j = joint_finetune_loss(&mut g, a, b, 0.3).unwrap();
        assert!((g.scalar(j) - 1.7).abs() < 1e-12);
        assert!(joint_finetune_loss(&mut g, a, b, -0.1).is_err());
        let no_con = AblationFlags::variant("-con").unwrap();
        assert_eq!(no_con.loss_weights(0.3).unwrap(), (0.0, 1.0));
        assert_eq!(AblationFlags::FULL.loss_weights(0.3).unwrap(), (0.3, 0.7));
        assert!(!AblationFlags::variant("-pretraining").unwrap().pretrains());
        assert!(AblationFlags::variant("nope").is_none());
    }

    fn tiny_setup(epsilon: f64) -> (EncoderModel, Vec<TrainPair>, FinetuneConfig) {
        let cfg = EncoderConfig {
            vocab_size: 10,
            num_tags: 3,
            d_model: 4,
            heads: 2,
            layers: 1,
            ff_dim: 6,
            max_len: 6,
            dropout: 0.0,
            proj_dim: 3,
            init_std: 0.5,
        };
        let model = EncoderModel::new(cfg, 5).unwrap();
        let pairs = vec![
            TrainPair { clean_ids: vec![4, 5, 6], aug_ids: vec![4, 1, 6, 7], gold: vec![0, 1, 2] },
            TrainPair { clean_ids: vec![8, 9], aug_ids: vec![8], gold: vec![1, 0] },
        ];
        let ft = FinetuneConfig { epsilon, temperature: 0.5, ..FinetuneConfig::default() };
        (model, pairs, ft)
    }

    #[test]
    fn zero_epsilon_doubles_slot_loss() {
        let (model, pairs, cfg) = tiny_setup(0.0);
        let batch: Vec<&TrainPair> = pairs.iter().collect();
        let (_, s, _) = batch_gradients(&model, &batch, &cfg, None, ExecMode::Sequential).unwrap();
        assert_eq!(s.l_slot_adv, s.l_slot);
    }

    #[test]
    fn parallel_and_sequential_gradients_agree() {
        let (model, pairs, cfg) = tiny_setup(0.3);
        let batch: Vec<&TrainPair> = pairs.iter().collect();
        let key = Some(RngKey::new(1));
        let a = batch_gradients(&model, &batch, &cfg, key, ExecMode::Sequential).unwrap();
        let b = batch_gradients(&model, &batch, &cfg, key, ExecMode::Parallel).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let (model, pairs, cfg) = tiny_setup(0.3);
        let batch: Vec<&TrainPair> = pairs.iter().collect();
        let (grads, stats, noises) = batch_gradients(&model, &batch, &cfg, None, ExecMode::Sequential).unwrap();
        assert!((objective_with_noise(&model, &batch, &cfg, &noises).unwrap() - stats.joint).abs() < 1e-12);
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
        assert!(worst < 1e-3, "{worst}");
    }
}
