//! End-to-end stages: data generation, perturbation, pre-training,
//! fine-tuning, evaluation and ablation. Each on-disk stage writes its
//! artifacts plus a manifest under the run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::corpus::{generate_synthetic, read_conll, write_conll, Corpus, Split, TagSet, TemplateBank, ValueBank, Vocab};
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::eval::{ablation_table, evaluate, export_embeddings, run_ablation, EvalReport, ReportMeta};
use crate::finetune::{make_pairs, run_finetuning, AblationFlags, FinetuneEpoch};
use crate::manifest::Manifest;
use crate::par::ExecMode;
use crate::perturb::{augment, build_suite, LexiconPaths, Lexicons, SuitePlan};
use crate::pretrain::{run_pretraining, PretrainEpoch};
use crate::tensor::RngKey;

const TEMPLATES: &str = include_str!("../data/templates.txt");
const VALUES: &str = include_str!("../data/values.tsv");

/// Lexicons and generation banks, built-in unless overridden by paths.
pub struct Resources {
    pub lexicons: Lexicons,
    pub templates: TemplateBank,
    pub values: ValueBank,
}

impl Resources {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let p = &cfg.paths;
        let lexicons = Lexicons::load(&LexiconPaths {
            homophones: p.homophones.as_deref(),
            synonyms: p.synonyms.as_deref(),
            fillers: p.fillers.as_deref(),
            stopwords: p.stopwords.as_deref(),
            keyboard: p.keyboard.as_deref(),
        })?;
        let templates = match &p.templates {
            Some(path) => TemplateBank::load(path)?,
            None => TemplateBank::parse(TEMPLATES).map_err(Error::Config)?,
        };
        let values = match &p.values {
            Some(path) => ValueBank::load(path)?,
            None => ValueBank::parse(VALUES).map_err(Error::Config)?,
        };
        Ok(Resources { lexicons, templates, values })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Corpus,
    pub test: Corpus,
}

/// Synthetic train and test corpora drawn under independent seeds.
pub fn generate_data(cfg: &RunConfig, res: &Resources) -> Result<Dataset> {
    let key = RngKey::new(cfg.data.seed);
    let mut train = generate_synthetic(cfg.data.train_size, &res.templates, &res.values, key.derive("train").raw())?;
    let mut test = generate_synthetic(cfg.data.test_size, &res.templates, &res.values, key.derive("test").raw())?;
    train.split = Split::Train;
    test.split = Split::Test;
    Ok(Dataset { train, test })
}

/// Everything training and evaluation need, derived from a dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Corpus,
    pub augmented: Corpus,
    pub single: BTreeMap<String, Corpus>,
    pub mixed: BTreeMap<String, Corpus>,
    pub vocab: Vocab,
    pub tags: TagSet,
}

fn plan(names: &BTreeMap<String, crate::config::ChainSpec>, seed: u64) -> SuitePlan {
    names.iter().map(|(n, ch)| (n.clone(), ch.specs(seed, n))).collect()
}

pub fn prepare(cfg: &RunConfig, res: &Resources, data: &Dataset, mode: ExecMode) -> Result<Prepared> {
    let key = RngKey::new(cfg.perturb.seed);
    let aug_seed = key.derive("augment").raw();
    let chains: Vec<_> = cfg
        .perturb
        .augment
        .iter()
        .map(|n| {
            cfg.chain(n)
                .map(|c| c.specs(aug_seed, n))
                .ok_or_else(|| Error::Config(format!("unknown augmentation chain {n}")))
        })
        .collect::<Result<_>>()?;
    let augmented = augment(&data.train, &chains, &res.lexicons, aug_seed, mode)?;
    let suite_seed = key.derive("suites").raw();
    let single = build_suite(&data.test, &plan(&cfg.perturb.single, suite_seed), &res.lexicons, mode)?;
    let mut mixed = build_suite(&data.test, &plan(&cfg.perturb.mixed, suite_seed), &res.lexicons, mode)?;
    if cfg.perturb.mixed.is_empty() {
        mixed.clear();
    }
    let vocab = Vocab::build(&[&data.train, &augmented], cfg.data.min_freq);
    let tags = TagSet::from_corpora(&[&data.train, &data.test]);
    Ok(Prepared { train: data.train.clone(), augmented, single, mixed, vocab, tags })
}

pub fn encoder_config(cfg: &RunConfig, vocab: &Vocab, tags: &TagSet) -> EncoderConfig {
    EncoderConfig { vocab_size: vocab.len(), num_tags: tags.len(), ..cfg.encoder.clone() }
}

fn pretrain_config(cfg: &RunConfig, flags: AblationFlags) -> crate::pretrain::PretrainConfig {
    crate::pretrain::PretrainConfig { use_smp: flags.use_smp, use_snd: flags.use_snd, ..cfg.pretrain.clone() }
}

pub fn pretrain_model(cfg: &RunConfig, prep: &Prepared, flags: AblationFlags, mode: ExecMode) -> Result<(EncoderModel, Vec<PretrainEpoch>)> {
    let init = RngKey::new(cfg.pretrain.seed).derive("init").raw();
    let mut model = EncoderModel::new(encoder_config(cfg, &prep.vocab, &prep.tags), init)?;
    let trace = run_pretraining(&mut model, &prep.train, &prep.augmented, &prep.vocab, &pretrain_config(cfg, flags), mode)?;
    Ok((model, trace))
}

/// Fine-tunes `init`, or a fresh model when `None`.
pub fn finetune_model(
    cfg: &RunConfig,
    prep: &Prepared,
    init: Option<EncoderModel>,
    flags: AblationFlags,
    mode: ExecMode,
) -> Result<(EncoderModel, Vec<FinetuneEpoch>)> {
    let mut model = match init {
        Some(m) => m,
        None => {
            let seed = RngKey::new(cfg.finetune.seed).derive("init").raw();
            EncoderModel::new(encoder_config(cfg, &prep.vocab, &prep.tags), seed)?
        }
    };
    let pairs = make_pairs(&prep.train, &prep.augmented, &prep.vocab, &prep.tags)?;
    let ft = crate::finetune::FinetuneConfig { flags, ..cfg.finetune.clone() };
    let trace = run_finetuning(&mut model, &pairs, &ft, mode)?;
    Ok((model, trace))
}

/// Reports over the single-perturbation and mixed-perturbation suites; both include `clean`.
pub fn evaluate_model(
    cfg: &RunConfig,
    prep: &Prepared,
    model: &EncoderModel,
    flags: AblationFlags,
    mode: ExecMode,
) -> Result<(EvalReport, EvalReport)> {
    let meta = ReportMeta { seed: cfg.finetune.seed, flags, config_hash: cfg.hash(), truncated: 0 };
    let single = evaluate(model, &prep.single, &prep.vocab, &prep.tags, meta.clone(), mode)?;
    let mixed = evaluate(model, &prep.mixed, &prep.vocab, &prep.tags, meta, mode)?;
    Ok((single, mixed))
}

/// Trains and evaluates every variant on the same data. Pre-trained models
/// are shared between variants with the same pre-training objective.
pub fn ablation(
    cfg: &RunConfig,
    prep: &Prepared,
    variants: &[(String, AblationFlags)],
    mode: ExecMode,
) -> Result<Vec<(String, EvalReport)>> {
    let mut cache: BTreeMap<(bool, bool), EncoderModel> = BTreeMap::new();
    run_ablation(variants, |name, flags| {
        let init = if flags.pretrains() {
            let key = (flags.use_smp, flags.use_snd);
            if !cache.contains_key(&key) {
                cache.insert(key, pretrain_model(cfg, prep, flags, mode)?.0);
            }
            Some(cache[&key].clone())
        } else {
            None
        };
        let (model, _) = finetune_model(cfg, prep, init, flags, mode)?;
        let (single, _) = evaluate_model(cfg, prep, &model, flags, mode)?;
        log::info!("variant {name}: overall {:.4}", single.overall);
        Ok(single)
    })
}

pub fn variants_from_names(names: &[String]) -> Result<Vec<(String, AblationFlags)>> {
    names
        .iter()
        .map(|n| {
            AblationFlags::variant(n)
                .map(|f| (n.clone(), f))
                .ok_or_else(|| Error::Config(format!("unknown ablation variant {n}")))
        })
        .collect()
}

// ---- on-disk stages ---------------------------------------------------

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn ensure(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(format!("create {}", p.display()), e))?;
        Ok(p)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))
}

fn jsonl<T: serde::Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn need(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} is missing; run `{stage}` first", path.display())))
    }
}

/// Paths of the clean train and test corpora for this run.
pub fn data_paths(cfg: &RunConfig, run: &RunDir) -> (PathBuf, PathBuf) {
    match (&cfg.paths.train, &cfg.paths.test) {
        (Some(tr), Some(te)) => (tr.clone(), te.clone()),
        _ => (run.path("data/train.conll"), run.path("data/test.conll")),
    }
}

pub fn stage_gen_data(cfg: &RunConfig, run: &RunDir) -> Result<Manifest> {
    let mut m = Manifest::new("gen-data", &cfg.hash(), cfg.data.seed);
    let dir = run.ensure("data")?;
    if cfg.paths.train.is_some() {
        let (tr, te) = data_paths(cfg, run);
        m.input(&run.root, &tr)?;
        m.input(&run.root, &te)?;
    } else {
        let res = Resources::load(cfg)?;
        let data = generate_data(cfg, &res)?;
        write_conll(&data.train, &dir.join("train.conll"))?;
        write_conll(&data.test, &dir.join("test.conll"))?;
        m.output(&run.root, &dir.join("train.conll"))?;
        m.output(&run.root, &dir.join("test.conll"))?;
    }
    m.write(&dir.join("manifest.json"))?;
    Ok(m)
}

fn load_dataset(cfg: &RunConfig, run: &RunDir, m: &mut Manifest) -> Result<Dataset> {
    let (tr, te) = data_paths(cfg, run);
    need(&tr, "gen-data")?;
    need(&te, "gen-data")?;
    m.input(&run.root, &tr)?;
    m.input(&run.root, &te)?;
    let mut train = read_conll(&tr)?;
    let mut test = read_conll(&te)?;
    train.split = Split::Train;
    test.split = Split::Test;
    Ok(Dataset { train, test })
}

pub fn stage_perturb(cfg: &RunConfig, run: &RunDir, mode: ExecMode) -> Result<Manifest> {
    let mut m = Manifest::new("perturb", &cfg.hash(), cfg.perturb.seed);
    let data = load_dataset(cfg, run, &mut m)?;
    let res = Resources::load(cfg)?;
    let prep = prepare(cfg, &res, &data, mode)?;
    let dir = run.ensure("perturb")?;
    let suites = run.ensure("perturb/suites")?;
    let mut outputs = vec![dir.join("augmented.conll"), dir.join("vocab.txt"), dir.join("tags.txt")];
    write_conll(&prep.augmented, &outputs[0])?;
    write_text(&outputs[1], &prep.vocab.to_text())?;
    write_text(&outputs[2], &prep.tags.to_text())?;
    for (name, corpus) in prep.single.iter().chain(&prep.mixed) {
        let p = suites.join(format!("{name}.conll"));
        write_conll(corpus, &p)?;
        outputs.push(p);
    }
    for p in &outputs {
        m.output(&run.root, p)?;
    }
    m.write(&dir.join("manifest.json"))?;
    Ok(m)
}

/// Reloads the artifacts written by `gen-data` and `perturb`.
pub fn load_prepared(cfg: &RunConfig, run: &RunDir, m: &mut Manifest) -> Result<Prepared> {
    let data = load_dataset(cfg, run, m)?;
    let aug_path = run.path("perturb/augmented.conll");
    need(&aug_path, "perturb")?;
    let vocab_path = run.path("perturb/vocab.txt");
    let tags_path = run.path("perturb/tags.txt");
    for p in [&aug_path, &vocab_path, &tags_path] {
        m.input(&run.root, p)?;
    }
    let mut augmented = read_conll(&aug_path)?;
    augmented.split = Split::Train;
    let vocab = Vocab::from_text(&read_text(&vocab_path)?)?;
    let tags = TagSet::from_text(&read_text(&tags_path)?);
    let mut load = |names: Vec<&String>| -> Result<BTreeMap<String, Corpus>> {
        let mut out = BTreeMap::new();
        for name in names {
            let p = run.path(&format!("perturb/suites/{name}.conll"));
            need(&p, "perturb")?;
            m.input(&run.root, &p)?;
            let mut c = read_conll(&p)?;
            c.split = Split::Test;
            out.insert(name.clone(), c);
        }
        Ok(out)
    };
    let clean = crate::perturb::CLEAN_SUITE.to_string();
    let single = load(std::iter::once(&clean).chain(cfg.perturb.single.keys()).collect())?;
    let mixed = if cfg.perturb.mixed.is_empty() {
        BTreeMap::new()
    } else {
        load(std::iter::once(&clean).chain(cfg.perturb.mixed.keys()).collect())?
    };
    Ok(Prepared { train: data.train, augmented, single, mixed, vocab, tags })
}

pub fn stage_pretrain(cfg: &RunConfig, run: &RunDir, mode: ExecMode) -> Result<Manifest> {
    let mut m = Manifest::new("pretrain", &cfg.hash(), cfg.pretrain.seed);
    let prep = load_prepared(cfg, run, &mut m)?;
    let dir = run.ensure("pretrain")?;
    let flags = cfg.flags();
    if !(flags.use_smp || flags.use_snd) {
        return Err(Error::Config("pre-training needs finetune.use_smp or finetune.use_snd".into()));
    }
    let (model, trace) = pretrain_model(cfg, &prep, flags, mode)?;
    model.save(&dir.join("model.ckpt"))?;
    write_text(&dir.join("trace.jsonl"), &jsonl(&trace)?)?;
    m.output(&run.root, &dir.join("model.ckpt"))?;
    m.output(&run.root, &dir.join("trace.jsonl"))?;
    m.write(&dir.join("manifest.json"))?;
    Ok(m)
}

pub fn stage_finetune(cfg: &RunConfig, run: &RunDir, mode: ExecMode) -> Result<Manifest> {
    let mut m = Manifest::new("finetune", &cfg.hash(), cfg.finetune.seed);
    let flags = cfg.flags();
    let ckpt = run.path("pretrain/model.ckpt");
    if flags.pretrains() && !ckpt.exists() {
        return Err(Error::Config(format!(
            "finetune.use_pretrained is true but {} does not exist; run `pretrain` first",
            ckpt.display()
        )));
    }
    let prep = load_prepared(cfg, run, &mut m)?;
    let init = if flags.pretrains() {
        m.input(&run.root, &ckpt)?;
        Some(EncoderModel::load(encoder_config(cfg, &prep.vocab, &prep.tags), &ckpt)?)
    } else {
        None
    };
    let (model, trace) = finetune_model(cfg, &prep, init, flags, mode)?;
    let dir = run.ensure("finetune")?;
    model.save(&dir.join("model.ckpt"))?;
    write_text(&dir.join("trace.jsonl"), &jsonl(&trace)?)?;
    m.output(&run.root, &dir.join("model.ckpt"))?;
    m.output(&run.root, &dir.join("trace.jsonl"))?;
    m.write(&dir.join("manifest.json"))?;
    Ok(m)
}

pub fn stage_evaluate(cfg: &RunConfig, run: &RunDir, mode: ExecMode) -> Result<(Manifest, EvalReport, EvalReport)> {
    let mut m = Manifest::new("evaluate", &cfg.hash(), cfg.finetune.seed);
    let ckpt = run.path("finetune/model.ckpt");
    need(&ckpt, "finetune")?;
    let prep = load_prepared(cfg, run, &mut m)?;
    m.input(&run.root, &ckpt)?;
    let model = EncoderModel::load(encoder_config(cfg, &prep.vocab, &prep.tags), &ckpt)?;
    let (single, mixed) = evaluate_model(cfg, &prep, &model, cfg.flags(), mode)?;
    let dir = run.ensure("eval")?;
    let clean = &prep.single[crate::perturb::CLEAN_SUITE];
    let mut table = single.to_table();
    if !mixed.suites.is_empty() {
        table.push('\n');
        table.push_str(&mixed.to_table());
    }
    let files = [
        ("report.json", single.to_json()?),
        ("mixed.json", mixed.to_json()?),
        ("report.txt", table),
        ("embeddings.tsv", export_embeddings(&model, clean, &prep.vocab, mode)?),
    ];
    for (name, text) in &files {
        write_text(&dir.join(name), text)?;
        m.output(&run.root, &dir.join(name))?;
    }
    m.write(&dir.join("manifest.json"))?;
    Ok((m, single, mixed))
}

pub fn stage_ablate(cfg: &RunConfig, run: &RunDir, mode: ExecMode) -> Result<(Manifest, Vec<(String, EvalReport)>)> {
    let mut m = Manifest::new("ablate", &cfg.hash(), cfg.finetune.seed);
    let prep = load_prepared(cfg, run, &mut m)?;
    let variants = variants_from_names(&cfg.ablation)?;
    let reports = ablation(cfg, &prep, &variants, mode)?;
    let dir = run.ensure("ablate")?;
    for (name, r) in &reports {
        let p = dir.join(format!("{name}.json"));
        write_text(&p, &r.to_json()?)?;
        m.output(&run.root, &p)?;
    }
    let table = dir.join("table.txt");
    write_text(&table, &ablation_table(&reports))?;
    m.output(&run.root, &table)?;
    m.write(&dir.join("manifest.json"))?;
    Ok((m, reports))
}

/// gen-data → perturb → pretrain (when enabled) → finetune → evaluate.
pub fn stage_all(cfg: &RunConfig, run: &RunDir, mode: ExecMode) -> Result<(EvalReport, EvalReport)> {
    stage_gen_data(cfg, run)?;
    stage_perturb(cfg, run, mode)?;
    if cfg.flags().pretrains() {
        stage_pretrain(cfg, run, mode)?;
    }
    stage_finetune(cfg, run, mode)?;
    let (_, single, mixed) = stage_evaluate(cfg, run, mode)?;
    write_text(&run.path("config.txt"), &cfg.to_text())?;
    Ok((single, mixed))
}
