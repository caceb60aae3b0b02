//! Run configuration in a flat `section.key = value` text format.
//!
//! Values are quoted strings, numbers, `true`/`false`, or bracketed lists of
//! those. `#` starts a comment line. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::{AblationFlags, FinetuneConfig};
use crate::optim::OptimizerKind;
use crate::perturb::{mixed_suite_ops, single_suite_ops, PerturbOp, PerturbationSpec, CLEAN_SUITE};
use crate::pretrain::PretrainConfig;
use crate::tensor::RngKey;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigValue {
    Str(String),
    Num(f64),
    Bool(bool),
    List(Vec<ConfigValue>),
}

impl ConfigValue {
    fn render(&self) -> String {
        match self {
            ConfigValue::Str(s) => format!("{s:?}"),
            ConfigValue::Num(x) => format!("{x}"),
            ConfigValue::Bool(b) => b.to_string(),
            ConfigValue::List(xs) => {
                let parts: Vec<String> = xs.iter().map(ConfigValue::render).collect();
                format!("[{}]", parts.join(", "))
            }
        }
    }
}

fn parse_scalar(s: &str) -> std::result::Result<ConfigValue, String> {
    let s = s.trim();
    if let Some(inner) = s.strip_prefix('"') {
        let body = inner.strip_suffix('"').ok_or_else(|| format!("unterminated string {s}"))?;
        if body.contains('"') {
            return Err(format!("embedded quote in {s}"));
        }
        return Ok(ConfigValue::Str(body.replace("\\\\", "\\")));
    }
    match s {
        "true" => return Ok(ConfigValue::Bool(true)),
        "false" => return Ok(ConfigValue::Bool(false)),
        _ => {}
    }
    s.parse::<f64>()
        .map(ConfigValue::Num)
        .map_err(|_| format!("cannot parse value {s:?} (strings must be quoted)"))
}

/// Parses a value: scalar or `[a, b, …]` list of scalars.
pub fn parse_value(s: &str) -> std::result::Result<ConfigValue, String> {
    let s = s.trim();
    if let Some(inner) = s.strip_prefix('[') {
        let body = inner.strip_suffix(']').ok_or_else(|| format!("unterminated list {s}"))?;
        if body.trim().is_empty() {
            return Ok(ConfigValue::List(Vec::new()));
        }
        let mut items = Vec::new();
        let mut cur = String::new();
        let mut quoted = false;
        for c in body.chars() {
            match c {
                '"' => {
                    quoted = !quoted;
                    cur.push(c);
                }
                ',' if !quoted => items.push(parse_scalar(&std::mem::take(&mut cur))?),
                _ => cur.push(c),
            }
        }
        items.push(parse_scalar(&cur)?);
        return Ok(ConfigValue::List(items));
    }
    parse_scalar(s)
}

/// Parses `section.key = value` lines into an ordered map.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, ConfigValue>> {
    let mut map = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!("line {}: expected key = value", i + 1));
            continue;
        };
        let key = key.trim();
        if !key.contains('.') {
            errors.push(format!("line {}: key {key:?} must be section.key", i + 1));
            continue;
        }
        match parse_value(value) {
            Ok(v) => {
                if map.insert(key.to_string(), v).is_some() {
                    errors.push(format!("line {}: duplicate key {key}", i + 1));
                }
            }
            Err(e) => errors.push(format!("line {}: {e}", i + 1)),
        }
    }
    if errors.is_empty() {
        Ok(map)
    } else {
        Err(Error::Config(errors.join("; ")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub min_freq: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathsConfig {
    pub output: PathBuf,
    /// Existing CoNLL files; empty means use the generated synthetic data.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub values: Option<PathBuf>,
    pub homophones: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub fillers: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub keyboard: Option<PathBuf>,
}

/// A named operator chain given as `op@rate` strings.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub ops: Vec<(PerturbOp, f64)>,
}

impl ChainSpec {
    pub fn from_defaults(ops: &[PerturbOp]) -> Self {
        ChainSpec { ops: ops.iter().map(|&op| (op, op.default_rate())).collect() }
    }

    /// Concrete specs, seeding each operator from `(seed, name, op)`.
    pub fn specs(&self, seed: u64, name: &str) -> Vec<PerturbationSpec> {
        let key = RngKey::new(seed).derive(name);
        self.ops
            .iter()
            .map(|&(op, rate)| PerturbationSpec { level: op.level(), op, rate, seed: key.derive(op.name()).raw() })
            .collect()
    }

    fn render(&self) -> ConfigValue {
        ConfigValue::List(self.ops.iter().map(|(op, r)| ConfigValue::Str(format!("{op}@{r}"))).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbConfig {
    pub seed: u64,
    pub single: BTreeMap<String, ChainSpec>,
    pub mixed: BTreeMap<String, ChainSpec>,
    /// Chains drawn from when building the training copy; names refer to
    /// `single` or `mixed` entries.
    pub augment: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub perturb: PerturbConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Variant names for the ablation runner.
    pub ablation: Vec<String>,
}

pub const DEFAULT_VARIANTS: [&str; 6] = ["full", "-pretraining", "-smp", "-snd", "-con", "-adv"];

impl Default for RunConfig {
    fn default() -> Self {
        let chains = |groups: Vec<(&str, Vec<PerturbOp>)>| -> BTreeMap<String, ChainSpec> {
            groups.into_iter().map(|(n, ops)| (n.to_string(), ChainSpec::from_defaults(&ops))).collect()
        };
        let single = chains(single_suite_ops());
        let augment = single.keys().cloned().collect();
        let pretrain = PretrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            ..PretrainConfig::default()
        };
        let finetune = FinetuneConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            ..FinetuneConfig::default()
        };
        RunConfig {
            paths: PathsConfig { output: PathBuf::from("runs/default"), ..PathsConfig::default() },
            data: DataConfig { train_size: 400, test_size: 100, min_freq: 2, seed: 0 },
            perturb: PerturbConfig { seed: 0, single, mixed: chains(mixed_suite_ops()), augment },
            encoder: EncoderConfig::default(),
            pretrain,
            finetune,
            ablation: DEFAULT_VARIANTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

struct Reader {
    map: BTreeMap<String, ConfigValue>,
    errors: Vec<String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<ConfigValue> {
        self.map.remove(key)
    }

    fn num(&mut self, key: &str, slot: &mut f64) {
        match self.take(key) {
            None => {}
            Some(ConfigValue::Num(x)) => *slot = x,
            Some(v) => self.errors.push(format!("{key} must be a number, got {}", v.render())),
        }
    }

    fn int<T: TryFrom<u64>>(&mut self, key: &str, slot: &mut T) {
        match self.take(key) {
            None => {}
            Some(ConfigValue::Num(x)) if x >= 0.0 && x.fract() == 0.0 && x <= u64::MAX as f64 => match T::try_from(x as u64) {
                Ok(v) => *slot = v,
                Err(_) => self.errors.push(format!("{key} = {x} out of range")),
            },
            Some(v) => self.errors.push(format!("{key} must be a non-negative integer, got {}", v.render())),
        }
    }

    fn boolean(&mut self, key: &str, slot: &mut bool) {
        match self.take(key) {
            None => {}
            Some(ConfigValue::Bool(b)) => *slot = b,
            Some(v) => self.errors.push(format!("{key} must be true or false, got {}", v.render())),
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.take(key) {
            None => None,
            Some(ConfigValue::Str(s)) => Some(s),
            Some(v) => {
                self.errors.push(format!("{key} must be a quoted string, got {}", v.render()));
                None
            }
        }
    }

    fn path(&mut self, key: &str, slot: &mut Option<PathBuf>) {
        if let Some(s) = self.string(key) {
            *slot = if s.is_empty() { None } else { Some(PathBuf::from(s)) };
        }
    }

    fn strings(&mut self, key: &str) -> Option<Vec<String>> {
        match self.take(key) {
            None => None,
            Some(ConfigValue::List(xs)) => {
                let mut out = Vec::new();
                for x in xs {
                    match x {
                        ConfigValue::Str(s) => out.push(s),
                        other => self.errors.push(format!("{key} entries must be quoted strings, got {}", other.render())),
                    }
                }
                Some(out)
            }
            Some(v) => {
                self.errors.push(format!("{key} must be a list, got {}", v.render()));
                None
            }
        }
    }

    fn optimizer(&mut self, key: &str, slot: &mut OptimizerKind) {
        if let Some(s) = self.string(key) {
            match s.parse() {
                Ok(k) => *slot = k,
                Err(e) => self.errors.push(format!("{key}: {e}")),
            }
        }
    }

    fn chains(&mut self, section: &str) -> Option<BTreeMap<String, ChainSpec>> {
        let prefix = format!("{section}.");
        let keys: Vec<String> = self.map.keys().filter(|k| k.starts_with(&prefix)).cloned().collect();
        if keys.is_empty() {
            return None;
        }
        let mut out = BTreeMap::new();
        for key in keys {
            let name = key[prefix.len()..].to_string();
            let Some(items) = self.strings(&key) else { continue };
            let mut ops = Vec::new();
            for item in items {
                match PerturbationSpec::parse(&item, 0) {
                    Ok(s) => ops.push((s.op, s.rate)),
                    Err(e) => self.errors.push(format!("{key}: {e}")),
                }
            }
            if ops.is_empty() {
                self.errors.push(format!("{key}: chain is empty"));
            }
            out.insert(name, ChainSpec { ops });
        }
        Some(out)
    }
}

impl RunConfig {
    /// Parses `text` over the defaults; every problem is reported at once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Reader { map: parse_entries(text)?, errors: Vec::new() };
        let mut c = RunConfig::default();

        if let Some(s) = r.string("paths.output") {
            c.paths.output = PathBuf::from(s);
        }
        let p = &mut c.paths;
        for (key, slot) in [
            ("paths.train", &mut p.train),
            ("paths.test", &mut p.test),
            ("paths.templates", &mut p.templates),
            ("paths.values", &mut p.values),
            ("paths.homophones", &mut p.homophones),
            ("paths.synonyms", &mut p.synonyms),
            ("paths.fillers", &mut p.fillers),
            ("paths.stopwords", &mut p.stopwords),
            ("paths.keyboard", &mut p.keyboard),
        ] {
            r.path(key, slot);
        }

        r.int("data.train_size", &mut c.data.train_size);
        r.int("data.test_size", &mut c.data.test_size);
        r.int("data.min_freq", &mut c.data.min_freq);
        r.int("data.seed", &mut c.data.seed);

        r.int("perturb.seed", &mut c.perturb.seed);
        if let Some(a) = r.strings("perturb.augment") {
            c.perturb.augment = a;
        }
        if let Some(s) = r.chains("single") {
            c.perturb.single = s;
        }
        if let Some(m) = r.chains("mixed") {
            c.perturb.mixed = m;
        }

        let e = &mut c.encoder;
        r.int("encoder.d_model", &mut e.d_model);
        r.int("encoder.heads", &mut e.heads);
        r.int("encoder.layers", &mut e.layers);
        r.int("encoder.ff_dim", &mut e.ff_dim);
        r.int("encoder.max_len", &mut e.max_len);
        r.num("encoder.dropout", &mut e.dropout);
        r.int("encoder.proj_dim", &mut e.proj_dim);
        r.num("encoder.init_std", &mut e.init_std);

        let pt = &mut c.pretrain;
        r.int("pretrain.epochs", &mut pt.epochs);
        r.int("pretrain.batch_size", &mut pt.batch_size);
        r.num("pretrain.lr", &mut pt.lr);
        r.optimizer("pretrain.optimizer", &mut pt.optimizer);
        r.num("pretrain.clip", &mut pt.clip);
        r.int("pretrain.k", &mut pt.k);
        r.num("pretrain.alpha", &mut pt.alpha);
        r.boolean("pretrain.normalize_smp", &mut pt.normalize_smp);
        r.int("pretrain.seed", &mut pt.seed);

        let ft = &mut c.finetune;
        r.int("finetune.epochs", &mut ft.epochs);
        r.int("finetune.batch_size", &mut ft.batch_size);
        r.num("finetune.lr", &mut ft.lr);
        r.optimizer("finetune.optimizer", &mut ft.optimizer);
        r.num("finetune.clip", &mut ft.clip);
        r.num("finetune.tau", &mut ft.temperature);
        r.num("finetune.epsilon", &mut ft.epsilon);
        r.boolean("finetune.per_row_noise", &mut ft.per_row_noise);
        r.num("finetune.beta", &mut ft.beta);
        r.int("finetune.seed", &mut ft.seed);
        let f = &mut ft.flags;
        r.boolean("finetune.use_pretrained", &mut f.use_pretrained);
        r.boolean("finetune.use_smp", &mut f.use_smp);
        r.boolean("finetune.use_snd", &mut f.use_snd);
        r.boolean("finetune.use_contrastive", &mut f.use_contrastive);
        r.boolean("finetune.use_adversarial", &mut f.use_adversarial);

        if let Some(v) = r.strings("ablation.variants") {
            c.ablation = v;
        }

        let mut errors = std::mem::take(&mut r.errors);
        errors.extend(r.map.keys().map(|k| format!("unknown key {k}")));
        c.sync_flags();
        errors.extend(c.violations());
        if errors.is_empty() {
            Ok(c)
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Copies the objective switches into the pre-training block.
    pub fn sync_flags(&mut self) {
        self.pretrain.use_smp = self.finetune.flags.use_smp;
        self.pretrain.use_snd = self.finetune.flags.use_snd;
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.perturb.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn flags(&self) -> AblationFlags {
        self.finetune.flags
    }

    /// Every violated invariant, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut enc = self.encoder.clone();
        enc.vocab_size = crate::corpus::Vocab::RESERVED;
        v.extend(enc.violations());
        if !(0.0..=1.0).contains(&self.pretrain.alpha) {
            v.push(format!("pretrain.alpha = {} outside [0, 1]", self.pretrain.alpha));
        }
        if !(0.0..=1.0).contains(&self.finetune.beta) {
            v.push(format!("finetune.beta = {} outside [0, 1]", self.finetune.beta));
        }
        if !(self.finetune.temperature > 0.0) {
            v.push(format!("finetune.tau = {} must be positive", self.finetune.temperature));
        }
        if !(self.finetune.epsilon > 0.0) {
            v.push(format!("finetune.epsilon = {} must be positive", self.finetune.epsilon));
        }
        for (name, lr) in [("pretrain.lr", self.pretrain.lr), ("finetune.lr", self.finetune.lr)] {
            if !(lr > 0.0) {
                v.push(format!("{name} = {lr} must be positive"));
            }
        }
        for (name, b) in [("pretrain.batch_size", self.pretrain.batch_size), ("finetune.batch_size", self.finetune.batch_size)] {
            if b == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.pretrain.k == 0 {
            v.push("pretrain.k must be at least 1".into());
        }
        if self.data.train_size == 0 && self.paths.train.is_none() {
            v.push("data.train_size must be positive".into());
        }
        for (name, chain) in self.perturb.single.iter().chain(&self.perturb.mixed) {
            if name == CLEAN_SUITE {
                v.push(format!("suite name {CLEAN_SUITE:?} is reserved"));
            }
            for (op, rate) in &chain.ops {
                if !(0.0..=1.0).contains(rate) {
                    v.push(format!("{name}: {op} rate {rate} outside [0, 1]"));
                }
            }
        }
        for name in self.perturb.single.keys() {
            if self.perturb.mixed.contains_key(name) {
                v.push(format!("suite {name} defined as both single and mixed"));
            }
        }
        if self.perturb.augment.is_empty() {
            v.push("perturb.augment must name at least one chain".into());
        }
        for a in &self.perturb.augment {
            if !self.perturb.single.contains_key(a) && !self.perturb.mixed.contains_key(a) {
                v.push(format!("perturb.augment names unknown chain {a}"));
            }
        }
        for name in &self.ablation {
            if AblationFlags::variant(name).is_none() {
                v.push(format!("unknown ablation variant {name}"));
            }
        }
        let paths = &self.paths;
        for p in [&paths.train, &paths.test, &paths.templates, &paths.values, &paths.homophones, &paths.synonyms, &paths.fillers, &paths.stopwords, &paths.keyboard]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                v.push(format!("file {} does not exist", p.display()));
            }
        }
        if paths.train.is_some() != paths.test.is_some() {
            v.push("paths.train and paths.test must be given together".into());
        }
        v
    }

    /// Chain by suite name, searching single then mixed suites.
    pub fn chain(&self, name: &str) -> Option<&ChainSpec> {
        self.perturb.single.get(name).or_else(|| self.perturb.mixed.get(name))
    }

    fn entries(&self, with_paths: bool) -> Vec<(String, ConfigValue)> {
        use ConfigValue::{Bool, List, Num, Str};
        let path = |p: &Option<PathBuf>| Str(p.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        let n = |x: usize| Num(x as f64);
        let seed = |x: u64| Num(x as f64);
        let mut e: Vec<(String, ConfigValue)> = Vec::new();
        let mut put = |k: &str, v: ConfigValue| e.push((k.to_string(), v));
        if with_paths {
            let p = &self.paths;
            put("paths.output", Str(p.output.display().to_string()));
            put("paths.train", path(&p.train));
            put("paths.test", path(&p.test));
            put("paths.templates", path(&p.templates));
            put("paths.values", path(&p.values));
            put("paths.homophones", path(&p.homophones));
            put("paths.synonyms", path(&p.synonyms));
            put("paths.fillers", path(&p.fillers));
            put("paths.stopwords", path(&p.stopwords));
            put("paths.keyboard", path(&p.keyboard));
        }
        put("data.train_size", n(self.data.train_size));
        put("data.test_size", n(self.data.test_size));
        put("data.min_freq", n(self.data.min_freq));
        put("data.seed", seed(self.data.seed));
        put("perturb.seed", seed(self.perturb.seed));
        put("perturb.augment", List(self.perturb.augment.iter().cloned().map(Str).collect()));
        for (name, ch) in &self.perturb.single {
            put(&format!("single.{name}"), ch.render());
        }
        for (name, ch) in &self.perturb.mixed {
            put(&format!("mixed.{name}"), ch.render());
        }
        let enc = &self.encoder;
        put("encoder.d_model", n(enc.d_model));
        put("encoder.heads", n(enc.heads));
        put("encoder.layers", n(enc.layers));
        put("encoder.ff_dim", n(enc.ff_dim));
        put("encoder.max_len", n(enc.max_len));
        put("encoder.dropout", Num(enc.dropout));
        put("encoder.proj_dim", n(enc.proj_dim));
        put("encoder.init_std", Num(enc.init_std));
        let pt = &self.pretrain;
        put("pretrain.epochs", n(pt.epochs));
        put("pretrain.batch_size", n(pt.batch_size));
        put("pretrain.lr", Num(pt.lr));
        put("pretrain.optimizer", Str(pt.optimizer.to_string()));
        put("pretrain.clip", Num(pt.clip));
        put("pretrain.k", n(pt.k));
        put("pretrain.alpha", Num(pt.alpha));
        put("pretrain.normalize_smp", Bool(pt.normalize_smp));
        put("pretrain.seed", seed(pt.seed));
        let ft = &self.finetune;
        put("finetune.epochs", n(ft.epochs));
        put("finetune.batch_size", n(ft.batch_size));
        put("finetune.lr", Num(ft.lr));
        put("finetune.optimizer", Str(ft.optimizer.to_string()));
        put("finetune.clip", Num(ft.clip));
        put("finetune.tau", Num(ft.temperature));
        put("finetune.epsilon", Num(ft.epsilon));
        put("finetune.per_row_noise", Bool(ft.per_row_noise));
        put("finetune.beta", Num(ft.beta));
        put("finetune.seed", seed(ft.seed));
        put("finetune.use_pretrained", Bool(ft.flags.use_pretrained));
        put("finetune.use_smp", Bool(ft.flags.use_smp));
        put("finetune.use_snd", Bool(ft.flags.use_snd));
        put("finetune.use_contrastive", Bool(ft.flags.use_contrastive));
        put("finetune.use_adversarial", Bool(ft.flags.use_adversarial));
        put("ablation.variants", List(self.ablation.iter().cloned().map(Str).collect()));
        e
    }

    fn render(entries: &[(String, ConfigValue)]) -> String {
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {}", v.render());
        }
        out
    }

    pub fn to_text(&self) -> String {
        Self::render(&self.entries(true))
    }

    /// SHA-1 of the canonical text without `paths.*`, so relocating inputs
    /// and outputs keeps the hash.
    pub fn hash(&self) -> String {
        crate::manifest::sha1_hex(Self::render(&self.entries(false)).as_bytes())
    }
}
