//! Small post-norm transformer encoder with vocabulary, noisiness, tag and
//! projection heads.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, Rng, RngKey, Tensor, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub num_tags: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    /// Positions available, including the aggregate position.
    pub max_len: usize,
    pub dropout: f64,
    pub proj_dim: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: Vocab::RESERVED,
            num_tags: 1,
            d_model: 64,
            heads: 4,
            layers: 2,
            ff_dim: 128,
            max_len: 64,
            dropout: 0.1,
            proj_dim: 32,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            v.push(format!("encoder.d_model ({}) must be a positive multiple of encoder.heads ({})", self.d_model, self.heads));
        }
        if self.layers == 0 {
            v.push("encoder.layers must be at least 1".into());
        }
        if self.ff_dim == 0 || self.proj_dim == 0 {
            v.push("encoder.ff_dim and encoder.proj_dim must be positive".into());
        }
        if self.max_len < 2 {
            v.push("encoder.max_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("encoder.dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0) {
            v.push("encoder.init_std must be positive".into());
        }
        if self.vocab_size < Vocab::RESERVED || self.num_tags == 0 {
            v.push("vocabulary and tag set must be non-empty".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    emb_ln: Norm,
    blocks: Vec<Block>,
    vocab: Linear,
    noise: Linear,
    tag: Linear,
    proj: Linear,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), vec![i, o], Init::Normal),
            b: self.add(format!("{name}.bias"), vec![o], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), vec![d], Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![d], Init::Zeros),
        }
    }
}

fn layout(cfg: &EncoderConfig) -> (Layout, Builder) {
    let d = cfg.d_model;
    let mut b = Builder { names: vec![], shapes: vec![], inits: vec![] };
    let tok = b.add("embed.tokens".into(), vec![cfg.vocab_size, d], Init::Normal);
    let pos = b.add("embed.positions".into(), vec![cfg.max_len, d], Init::Normal);
    let emb_ln = b.norm("embed.norm", d);
    let blocks = (0..cfg.layers)
        .map(|l| {
            let p = format!("layer{l}");
            Block {
                q: b.linear(&format!("{p}.attn.query"), d, d),
                k: b.linear(&format!("{p}.attn.key"), d, d),
                v: b.linear(&format!("{p}.attn.value"), d, d),
                o: b.linear(&format!("{p}.attn.output"), d, d),
                ln1: b.norm(&format!("{p}.attn.norm"), d),
                ff1: b.linear(&format!("{p}.ffn.inner"), d, cfg.ff_dim),
                ff2: b.linear(&format!("{p}.ffn.outer"), cfg.ff_dim, d),
                ln2: b.norm(&format!("{p}.ffn.norm"), d),
            }
        })
        .collect();
    let vocab = b.linear("head.vocab", d, cfg.vocab_size);
    let noise = b.linear("head.noisiness", d, 1);
    let tag = b.linear("head.tag", d, cfg.num_tags);
    let proj = b.linear("head.projection", d, cfg.proj_dim);
    (Layout { tok, pos, emb_ln, blocks, vocab, noise, tag, proj }, b)
}

/// Encoder weights plus their names in checkpoint order.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Per-parameter gradient buffers aligned with [`EncoderModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        Gradients(model.params.iter().map(|p| vec![0.0; p.numel()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= c);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Sums in slice order, so the result does not depend on how the parts were computed.
    pub fn sum(parts: &[Gradients], model: &EncoderModel) -> Self {
        let mut total = Gradients::zeros_like(model);
        for p in parts {
            total.add_assign(p);
        }
        total
    }
}

/// Dropout setting for one forward pass. Reusing a key reproduces the masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dropout {
    Off,
    On(RngKey),
}

impl Dropout {
    fn site(self, label: &str) -> Option<RngKey> {
        match self {
            Dropout::Off => None,
            Dropout::On(k) => Some(k.derive(label)),
        }
    }
}

/// Lazily binds model parameters into a graph.
#[derive(Debug)]
pub struct Binding<'m> {
    model: &'m EncoderModel,
    values: Vec<Option<Value>>,
}

/// Output of the embedding layer.
#[derive(Debug, Clone, Copy)]
pub struct Embedded {
    /// `(n+1)×d` token plus position embeddings, aggregate position first.
    pub embeddings: Value,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `(n+1)×d` hidden states, row 0 is the aggregate position.
    pub hidden: Value,
    /// `1×d` sentence representation.
    pub sentence: Value,
    pub embeddings: Value,
    pub truncated: bool,
}

impl<'m> Binding<'m> {
    pub fn model(&self) -> &'m EncoderModel {
        self.model
    }

    fn p(&mut self, g: &mut Graph, idx: usize) -> Value {
        *self.values[idx].get_or_insert_with(|| g.param(&self.model.params[idx]))
    }

    fn linear(&mut self, g: &mut Graph, l: Linear, x: Value) -> Result<Value> {
        let w = self.p(g, l.w);
        let b = self.p(g, l.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn norm(&mut self, g: &mut Graph, n: Norm, x: Value) -> Result<Value> {
        let gamma = self.p(g, n.gamma);
        let beta = self.p(g, n.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn dropout(&self, g: &mut Graph, x: Value, dropout: Dropout, label: &str) -> Result<Value> {
        match dropout.site(label) {
            Some(key) => g.dropout(x, self.model.config.dropout, key),
            None => Ok(x),
        }
    }

    /// Token plus position embeddings for `[CLS] ids…`, truncating to fit.
    pub fn embed(&mut self, g: &mut Graph, ids: &[usize]) -> Result<Embedded> {
        let cfg = &self.model.config;
        let keep = ids.len().min(cfg.max_len - 1);
        let mut seq = Vec::with_capacity(keep + 1);
        seq.push(Vocab::CLS);
        seq.extend_from_slice(&ids[..keep]);
        if let Some(&bad) = seq.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let tok = self.p(g, self.model.layout.tok);
        let pos = self.p(g, self.model.layout.pos);
        let t = g.embedding_lookup(tok, &seq)?;
        let positions: Vec<usize> = (0..seq.len()).collect();
        let p = g.embedding_lookup(pos, &positions)?;
        Ok(Embedded { embeddings: g.add(t, p)?, truncated: keep < ids.len() })
    }

    /// Runs the transformer stack over given input embeddings.
    pub fn encode_embeddings(&mut self, g: &mut Graph, e: Value, dropout: Dropout) -> Result<(Value, Value)> {
        let layout = self.model.layout.clone();
        let cfg = self.model.config.clone();
        let n = g.shape(e)[0];
        let dh = cfg.d_model / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.norm(g, layout.emb_ln, e)?;
        let mut x = self.dropout(g, x, dropout, "embed")?;
        for (l, blk) in layout.blocks.iter().enumerate() {
            let q = self.linear(g, blk.q, x)?;
            let k = self.linear(g, blk.k, x)?;
            let v = self.linear(g, blk.v, x)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = g.slice(q, 1, lo, hi)?;
                let kh = g.slice(k, 1, lo, hi)?;
                let vh = g.slice(v, 1, lo, hi)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let attn = g.softmax(scores, 1)?;
                heads.push(g.matmul(attn, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
            let att = self.linear(g, blk.o, cat)?;
            let att = self.dropout(g, att, dropout, &format!("layer{l}.attn"))?;
            let res = g.add(x, att)?;
            x = self.norm(g, blk.ln1, res)?;
            let inner = self.linear(g, blk.ff1, x)?;
            let inner = g.gelu(inner);
            let outer = self.linear(g, blk.ff2, inner)?;
            let outer = self.dropout(g, outer, dropout, &format!("layer{l}.ffn"))?;
            let res = g.add(x, outer)?;
            x = self.norm(g, blk.ln2, res)?;
        }
        debug_assert_eq!(g.shape(x), &[n, cfg.d_model]);
        let s = g.slice(x, 0, 0, 1)?;
        Ok((x, s))
    }

    pub fn encode(&mut self, g: &mut Graph, ids: &[usize], dropout: Dropout) -> Result<Encoded> {
        let emb = self.embed(g, ids)?;
        let (hidden, sentence) = self.encode_embeddings(g, emb.embeddings, dropout)?;
        Ok(Encoded { hidden, sentence, embeddings: emb.embeddings, truncated: emb.truncated })
    }

    /// Hidden rows of the real tokens (aggregate row dropped).
    pub fn token_rows(&self, g: &mut Graph, hidden: Value) -> Result<Value> {
        let n = g.shape(hidden)[0];
        g.slice(hidden, 0, 1, n)
    }

    /// `rows×V` logits.
    pub fn vocab_logits(&mut self, g: &mut Graph, rows: Value) -> Result<Value> {
        self.linear(g, self.model.layout.vocab, rows)
    }

    /// `rows×1` probabilities in (0, 1).
    pub fn noisiness_prob(&mut self, g: &mut Graph, rows: Value) -> Result<Value> {
        let z = self.linear(g, self.model.layout.noise, rows)?;
        Ok(g.sigmoid(z))
    }

    pub fn tag_logits(&mut self, g: &mut Graph, rows: Value) -> Result<Value> {
        self.linear(g, self.model.layout.tag, rows)
    }

    /// Linear projection followed by row normalization.
    pub fn project(&mut self, g: &mut Graph, rows: Value) -> Result<Value> {
        let z = self.linear(g, self.model.layout.proj, rows)?;
        g.l2_normalize(z)
    }

    /// Accumulated gradients of every bound parameter; unbound ones are zero.
    pub fn gradients(&self, g: &Graph) -> Gradients {
        Gradients(
            self.values
                .iter()
                .zip(&self.model.params)
                .map(|(v, p)| match v.and_then(|v| g.grad(v)) {
                    Some(gr) => gr.to_vec(),
                    None => vec![0.0; p.numel()],
                })
                .collect(),
        )
    }
}

impl EncoderModel {
    /// Gaussian weights (std `init_std`), unit norm gains, zero biases.
    /// Parameter `i` draws from its own stream under `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, b) = layout(&config);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let params = b
            .shapes
            .iter()
            .zip(&b.inits)
            .enumerate()
            .map(|(i, (shape, init))| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal => {
                        let mut rng = Rng::keyed(seed, "init", i as u64);
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                };
                Tensor::new(shape.clone(), data).expect("layout shapes match")
            })
            .collect();
        Ok(EncoderModel { config, names: b.names, params, layout })
    }

    pub fn bind(&self) -> Binding<'_> {
        Binding { model: self, values: vec![None; self.params.len()] }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.records())
    }

    /// Replaces parameters from checkpoint records. Names and shapes must
    /// match this model's layout exactly.
    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                records.len()
            )));
        }
        for ((name, t), (want, cur)) in records.iter().zip(self.names.iter().zip(&self.params)) {
            if name != want || t.shape() != cur.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
        }
        self.params = records.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    pub fn load(config: EncoderConfig, path: &Path) -> Result<Self> {
        let mut m = EncoderModel::new(config, 0)?;
        m.load_records(load_checkpoint(path)?)?;
        Ok(m)
    }

    /// Copies every parameter whose name and shape match `other`.
    pub fn copy_matching(&mut self, other: &EncoderModel) -> usize {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(j) = other.names.iter().position(|n| n == name) {
                if other.params[j].shape() == self.params[i].shape() {
                    self.params[i] = other.params[j].clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Hidden states `(n+1)×d` with dropout off.
    pub fn hidden_states(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = self.bind();
        let enc = b.encode(&mut g, ids, Dropout::Off)?;
        Ok(g.value(enc.hidden))
    }

    /// Tag logits `n×T` for the encoded prefix, dropout off.
    pub fn tag_logits(&self, ids: &[usize]) -> Result<(Tensor, bool)> {
        let mut g = Graph::new();
        let mut b = self.bind();
        let enc = b.encode(&mut g, ids, Dropout::Off)?;
        let rows = b.token_rows(&mut g, enc.hidden)?;
        let logits = b.tag_logits(&mut g, rows)?;
        Ok((g.value(logits), enc.truncated))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderModel {
        let cfg = EncoderConfig {
            vocab_size: 12,
            num_tags: 3,
            d_model: 8,
            heads: 2,
            layers: 1,
            ff_dim: 16,
            max_len: 6,
            dropout: 0.1,
            proj_dim: 4,
            init_std: 0.5,
        };
        EncoderModel::new(cfg, 1).unwrap()
    }

    #[test]
    fn shapes_and_aggregate_position() {
        let m = tiny();
        assert_eq!(m.hidden_states(&[5]).unwrap().shape(), &[2, 8]);
        let (logits, truncated) = m.tag_logits(&[5, 6, 7]).unwrap();
        assert_eq!(logits.shape(), &[3, 3]);
        assert!(!truncated);
        let (logits, truncated) = m.tag_logits(&[5; 9]).unwrap();
        assert_eq!(logits.shape(), &[5, 3]);
        assert!(truncated);
    }

    #[test]
    fn positions_matter_and_encoding_is_pure() {
        let m = tiny();
        let a = m.hidden_states(&[4, 5, 6]).unwrap();
        assert_eq!(a, m.hidden_states(&[4, 5, 6]).unwrap());
        assert_ne!(a, m.hidden_states(&[5, 4, 6]).unwrap());
    }

    #[test]
    fn heads() {
        let m = tiny();
        let mut g = Graph::new();
        let mut b = m.bind();
        let enc = b.encode(&mut g, &[4, 7], Dropout::On(RngKey::new(2))).unwrap();
        let p = b.noisiness_prob(&mut g, enc.sentence).unwrap();
        let prob = g.scalar(p);
        assert!(prob > 0.0 && prob < 1.0);
        let z = b.project(&mut g, enc.hidden).unwrap();
        for i in 0..3 {
            let n: f64 = g.data(z)[i * 4..(i + 1) * 4].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let v = b.vocab_logits(&mut g, enc.hidden).unwrap();
        assert_eq!(g.shape(v), &[3, 12]);
        assert!(b.embed(&mut g, &[99]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_hidden_states() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = EncoderModel::load(m.config.clone(), &path).unwrap();
        assert_eq!(back.hidden_states(&[3, 9, 4]).unwrap(), m.hidden_states(&[3, 9, 4]).unwrap());
        let mut other_cfg = m.config.clone();
        other_cfg.num_tags = 5;
        assert!(matches!(EncoderModel::load(other_cfg, &path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_violations_are_listed() {
        let cfg = EncoderConfig { d_model: 10, heads: 4, dropout: 1.0, ..EncoderConfig::default() };
        assert_eq!(cfg.violations().len(), 2);
    }
}
