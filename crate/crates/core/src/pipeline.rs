//! End-to-end stages over a working directory, driven by one flat config.
//!
//! Layout of the working directory:
//!
//! ```text
//! dataset/          preprocessed splits (see SessionDataset::write_dir)
//! stats.txt         corpus summary
//! embeddings.txt    pre-trained item vectors keyed by raw id
//! model.ckpt        best checkpoint
//! train_log.tsv     epoch, train loss, validation P@k, MRR@k
//! report.tsv        metric lines per method
//! report.txt        the same as aligned tables
//! manifest.txt      config plus hashes of inputs and artifacts
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::dataio::{self, write_file, Format, SessionDataset};
use crate::embedding::{init_embeddings, train_skipgram, NamedEmbeddings, SkipGramConfig, SkipGramReport};
use crate::error::{Error, Result};
use crate::eval::{self, evaluate_strata, rank_examples, ItemKnn, MetricReport, Pop, Ranker, SPop, StratumConfig};
use crate::global_graph::{generate_walks, GlobalGraph, WalkConfig};
use crate::model::{
    self, load_checkpoint, save_checkpoint, AdamConfig, LossKind, ModelConfig, ModelParams, ReadoutConfig,
    ReadoutKind, SessionModel, TrainConfig, TrainReport,
};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("cannot parse `{s}`"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, bool, String, ReadoutKind, Format);

impl ConfigValue for LossKind {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("cannot parse `{p}` as a cutoff")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! pipeline_config {
    ($($name:ident : $ty:ty = $default:expr, $help:literal;)*) => {
        /// Every knob of every stage. Serialized as `key = value` lines.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $(#[doc = $help] pub $name: $ty,)*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name),)*];

            pub fn help(key: &str) -> Option<&'static str> {
                match key {
                    $(stringify!($name) => Some($help),)*
                    _ => None,
                }
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = ConfigValue::parse_value(value.trim())
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($name) => Some(self.$name.render()),)*
                    _ => None,
                }
            }

            pub fn is_flag(key: &str) -> bool {
                Self::default().get(key).is_some_and(|v| v == "false" || v == "true")
            }
        }
    };
}

pipeline_config! {
    input: String = String::new(), "raw click log (session_id, timestamp, item_id)";
    format: Format = Format::Csv, "input delimiter: csv or tsv";
    header: bool = false, "skip the first input line";
    workdir: String = "run".into(), "directory for all artifacts";
    pretrain_corpus: String = String::new(), "optional larger click log for embedding pre-training";
    min_item_support: usize = 5, "drop items clicked fewer times than this";
    min_session_len: usize = 2, "drop sessions shorter than this";
    test_window_secs: u64 = 86_400, "trailing time window that forms the test split";
    validation_fraction: f64 = 0.1, "most recent share of the remaining sessions used for validation";
    p: f64 = 0.25, "walk return parameter";
    q: f64 = 4.0, "walk in-out parameter";
    walk_length: usize = 80, "nodes per walk";
    walks_per_node: usize = 10, "walks started from every node";
    window: usize = 10, "skip-gram context radius";
    negatives: usize = 5, "noise samples per positive pair";
    sg_epochs: usize = 5, "skip-gram passes over the walk corpus";
    sg_learning_rate: f64 = 0.025, "initial skip-gram learning rate";
    noise_exponent: f64 = 0.75, "exponent on walk frequency for the noise distribution";
    dim: usize = 100, "embedding and hidden dimension";
    steps: usize = 1, "message-passing steps";
    readout: ReadoutKind = ReadoutKind::ExpDecay, "exp_decay, last, mean, sum or attention";
    tau: f64 = 1.0, "exp_decay temperature";
    loss: LossKind = LossKind::CrossEntropy, "cross_entropy or catalog_binary";
    epochs: usize = 30, "maximum training epochs";
    batch_size: usize = 100, "examples per update";
    patience: usize = 3, "epochs without validation gain before stopping";
    learning_rate: f64 = 1e-3, "Adam step size";
    adam_beta1: f64 = 0.9, "Adam first-moment decay";
    adam_beta2: f64 = 0.999, "Adam second-moment decay";
    adam_eps: f64 = 1e-8, "Adam denominator offset";
    select_k: usize = 20, "cutoff of the validation precision used for model selection";
    no_pretrain: bool = false, "ablation: zero item embeddings, learn the bias only";
    no_bias: bool = false, "ablation: no separate bias, fine-tune the pre-trained vectors";
    cold_threshold: u64 = 500, "labels at or below this training popularity are cold";
    popular_threshold: u64 = 5000, "labels above this training popularity are popular";
    long_session_min: usize = 6, "prefixes at least this long are long sessions";
    ks: Vec<usize> = vec![1, 5, 10, 20], "comma-separated cutoffs";
    baselines: bool = true, "also report POP, S-POP and Item-KNN";
    seed: u64 = 0, "root seed of every random stream";
    threads: usize = 0, "worker threads, 0 for all cores";
    deterministic: bool = false, "single-threaded numeric paths with bit-identical artifacts";
}

impl PipelineConfig {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap());
        }
        out
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&dataio::read_file(path)?)
    }

    pub fn walk_config(&self) -> WalkConfig {
        WalkConfig {
            p: self.p,
            q: self.q,
            walk_length: self.walk_length,
            walks_per_node: self.walks_per_node,
            seed: self.seed,
        }
    }

    pub fn skipgram_config(&self) -> SkipGramConfig {
        SkipGramConfig {
            window: self.window,
            negatives: self.negatives,
            epochs: self.sg_epochs,
            learning_rate: self.sg_learning_rate,
            noise_exponent: self.noise_exponent,
            seed: self.seed,
            parallel: !self.deterministic,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            steps: self.steps,
            readout: ReadoutConfig {
                kind: self.readout,
                tau: self.tau,
            },
            loss: self.loss,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            seed: self.seed,
            select_k: self.select_k,
            threads: 0,
        }
    }

    pub fn stratum_config(&self) -> StratumConfig {
        StratumConfig {
            cold_threshold: self.cold_threshold,
            popular_threshold: self.popular_threshold,
            long_session_min: self.long_session_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.walk_config().validate()?;
        self.skipgram_config().validate()?;
        self.model_config().validate()?;
        self.stratum_config().validate()?;
        if self.no_pretrain && self.no_bias {
            return Err(Error::Config("no_pretrain and no_bias are mutually exclusive".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("cutoffs must be a non-empty list of positive integers".into()));
        }
        if self.batch_size == 0 || self.select_k == 0 {
            return Err(Error::Config("batch_size and select_k must be >= 1".into()));
        }
        if self.test_window_secs == 0 {
            return Err(Error::Config("test_window_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn workdir(&self) -> PathBuf {
        PathBuf::from(&self.workdir)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.workdir().join("dataset")
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.workdir().join("embeddings.txt")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.workdir().join("model.ckpt")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.workdir().join("manifest.txt")
    }

    pub fn report_path(&self) -> PathBuf {
        self.workdir().join("report.tsv")
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Config lines, then `# sha256 <path> <digest>` for every input and artifact present.
pub fn write_manifest(cfg: &PipelineConfig, stage: &str) -> Result<()> {
    let mut out = format!("# stage {stage}\n");
    out.push_str(&cfg.to_text());
    let mut files: Vec<PathBuf> = Vec::new();
    for p in [&cfg.input, &cfg.pretrain_corpus] {
        if !p.is_empty() {
            files.push(PathBuf::from(p));
        }
    }
    let dd = cfg.dataset_dir();
    for name in ["vocab.tsv", "train.txt", "validation.txt", "test.txt", "train_sessions.txt"] {
        files.push(dd.join(name));
    }
    files.push(cfg.embeddings_path());
    files.push(cfg.checkpoint_path());
    files.push(cfg.report_path());
    for f in files.iter().filter(|f| f.exists()) {
        let _ = writeln!(out, "# sha256 {} {}", f.display(), sha256_file(f)?);
    }
    write_file(&cfg.manifest_path(), &out)
}

fn with_threads<T: Send>(cfg: &PipelineConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let threads = if cfg.deterministic { 1 } else { cfg.threads };
    if threads == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?
        .install(f)
}

fn ensure_workdir(cfg: &PipelineConfig) -> Result<()> {
    let dir = cfg.workdir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))
}

/// Filters, splits and augments the input log into the dataset directory.
pub fn run_preprocess(cfg: &PipelineConfig) -> Result<dataio::DatasetStats> {
    cfg.validate()?;
    if cfg.input.is_empty() {
        return Err(Error::Config("no input file given".into()));
    }
    ensure_workdir(cfg)?;
    let events = dataio::load_events(Path::new(&cfg.input), cfg.format, cfg.header)?;
    let pre = dataio::preprocess(&events, cfg.min_item_support, cfg.min_session_len)?;
    let window_ms = i64::try_from(cfg.test_window_secs.saturating_mul(1000)).unwrap_or(i64::MAX);
    let split = dataio::split_by_time(&pre.sessions, &pre.vocab, window_ms, cfg.validation_fraction)?;
    let dataset = SessionDataset::from_split(split)?;
    dataset.write_dir(&cfg.dataset_dir())?;
    let stats = dataset.stats(&pre.sessions);
    write_file(&cfg.workdir().join("stats.txt"), &stats.to_string())?;
    log::info!(
        "{} train / {} validation / {} test examples over {} items",
        dataset.train.len(),
        dataset.validation.len(),
        dataset.test.len(),
        dataset.m()
    );
    write_manifest(cfg, "preprocess")?;
    Ok(stats)
}

/// Global graph, walks and skip-gram over the training sessions, or over
/// `pretrain_corpus` when set.
pub fn run_pretrain(cfg: &PipelineConfig) -> Result<SkipGramReport> {
    cfg.validate()?;
    let (sessions, vocab) = if cfg.pretrain_corpus.is_empty() {
        let ds = SessionDataset::read_dir(&cfg.dataset_dir())?;
        (ds.train_sessions, ds.vocab)
    } else {
        let events = dataio::load_events(Path::new(&cfg.pretrain_corpus), cfg.format, cfg.header)?;
        let pre = dataio::preprocess(&events, cfg.min_item_support, cfg.min_session_len)?;
        (pre.sessions, pre.vocab)
    };
    let report = with_threads(cfg, || {
        let graph = GlobalGraph::build(&sessions, vocab.len())?;
        log::info!("global graph: {} nodes, {} edges", graph.m(), graph.edge_count());
        let walks = generate_walks(&graph, &cfg.walk_config())?;
        log::info!("{} walks", walks.len());
        let mut table = init_embeddings(vocab.len(), cfg.dim, cfg.seed);
        let report = train_skipgram(&walks, &cfg.skipgram_config(), &mut table)?;
        NamedEmbeddings {
            vocab: vocab.clone(),
            vectors: table.vectors,
        }
        .write(&cfg.embeddings_path())?;
        Ok(report)
    })?;
    write_manifest(cfg, "pretrain")?;
    Ok(report)
}

/// Frozen table and initial parameters for the configured arm.
fn initial_state(cfg: &PipelineConfig, dataset: &SessionDataset) -> Result<(Array2<f64>, ModelParams)> {
    let m = dataset.m();
    let mut params = ModelParams::init(m, &cfg.model_config(), cfg.seed);
    if cfg.no_pretrain {
        return Ok((Array2::zeros((m, cfg.dim)), params));
    }
    let phi = NamedEmbeddings::read(&cfg.embeddings_path())?.align_to(&dataset.vocab)?;
    if phi.ncols() != cfg.dim {
        return Err(Error::Shape(format!(
            "embeddings have dimension {}, config says {}",
            phi.ncols(),
            cfg.dim
        )));
    }
    if cfg.no_bias {
        params.beta = phi;
        return Ok((Array2::zeros((m, cfg.dim)), params));
    }
    Ok((phi, params))
}

pub fn run_train(cfg: &PipelineConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let dataset = SessionDataset::read_dir(&cfg.dataset_dir())?;
    let (phi, params) = initial_state(cfg, &dataset)?;
    let model_cfg = cfg.model_config();
    let (params, report) = with_threads(cfg, || {
        model::train(&dataset.train, &dataset.validation, &phi, params, &model_cfg, &cfg.train_config())
    })?;
    let model = SessionModel::new(model_cfg, phi, params)?;
    save_checkpoint(&cfg.checkpoint_path(), &model, &dataset.vocab)?;
    let mut log_text = format!("epoch\ttrain_loss\tval_p@{k}\tval_mrr@{k}\n", k = cfg.select_k);
    for e in &report.epochs {
        let _ = writeln!(
            log_text,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            e.epoch, e.train_loss, e.val_precision, e.val_mrr
        );
    }
    write_file(&cfg.workdir().join("train_log.tsv"), &log_text)?;
    write_manifest(cfg, "train")?;
    Ok(report)
}

/// Metric reports for one ranking method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub reports: Vec<MetricReport>,
}

impl MethodReport {
    pub fn get(&self, stratum: eval::Stratum, k: usize) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.stratum == stratum && r.k == k)
    }
}

pub fn format_reports(methods: &[MethodReport]) -> String {
    let mut out = String::new();
    for m in methods {
        let _ = writeln!(out, "# {}", m.method);
        out.push_str(&eval::format_tsv(&m.reports));
    }
    out
}

pub fn run_evaluate(cfg: &PipelineConfig) -> Result<Vec<MethodReport>> {
    cfg.validate()?;
    let dataset = SessionDataset::read_dir(&cfg.dataset_dir())?;
    let ckpt = load_checkpoint(&cfg.checkpoint_path())?;
    if ckpt.vocab != dataset.vocab {
        return Err(Error::Shape("checkpoint vocabulary differs from the dataset vocabulary".into()));
    }
    if dataset.test.is_empty() {
        return Err(Error::Precondition("test split has no examples".into()));
    }
    let strata = cfg.stratum_config();
    let methods = with_threads(cfg, || {
        let m = &ckpt.model;
        let mut out = Vec::new();
        let ranks = model::evaluate_ranks(&m.config, &m.params, &m.phi, &dataset.test)?;
        out.push(MethodReport {
            method: "model".into(),
            reports: evaluate_strata(&ranks, &dataset.test, &dataset.popularity, &strata, &cfg.ks)?,
        });
        if cfg.baselines {
            let rankers: Vec<Box<dyn Ranker>> = vec![
                Box::new(Pop::new(&dataset.popularity)),
                Box::new(SPop::new(&dataset.popularity)),
                Box::new(ItemKnn::new(&dataset.train_sessions, dataset.m())),
            ];
            for r in &rankers {
                let ranks = rank_examples(r.as_ref(), &dataset.test)?;
                out.push(MethodReport {
                    method: r.name().to_string(),
                    reports: evaluate_strata(&ranks, &dataset.test, &dataset.popularity, &strata, &cfg.ks)?,
                });
            }
        }
        Ok(out)
    })?;
    write_file(&cfg.report_path(), &format_reports(&methods))?;
    let tables: String = methods.iter().map(|m| eval::format_table(&m.method, &m.reports) + "\n").collect();
    write_file(&cfg.workdir().join("report.txt"), &tables)?;
    write_manifest(cfg, "evaluate")?;
    Ok(methods)
}

/// Top-`k` raw item ids with scores for a prefix of raw ids.
pub fn run_recommend(cfg: &PipelineConfig, prefix: &[String], k: usize) -> Result<Vec<(String, f64)>> {
    let ckpt = load_checkpoint(&cfg.checkpoint_path())?;
    if prefix.is_empty() {
        return Err(Error::Precondition("empty prefix".into()));
    }
    let idx: Vec<usize> = prefix.iter().map(|raw| ckpt.vocab.lookup(raw)).collect::<Result<_>>()?;
    let top = ckpt.model.recommend(&idx, k)?;
    Ok(top.into_iter().map(|(i, s)| (ckpt.vocab.raw(i).to_string(), s)).collect())
}

/// Preprocess, pretrain (unless ablated away), train and evaluate.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<MethodReport>> {
    run_preprocess(cfg)?;
    if !cfg.no_pretrain {
        run_pretrain(cfg)?;
    }
    run_train(cfg)?;
    run_evaluate(cfg)
}
