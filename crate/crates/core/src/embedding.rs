//! Skip-gram with negative sampling over the walk corpus.
//!
//! Two tables are trained: input vectors (the item embeddings handed to the
//! session model) and context vectors (only used as the output side of the
//! pair objective).

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use rayon::prelude::*;

use crate::dataio::{read_file, write_file, Vocab};
use crate::error::{Error, Result};
use crate::global_graph::Walk;
use crate::rng;

/// Standard deviation of every freshly initialised parameter.
pub const INIT_STD: f64 = 0.1;
const SCORE_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Array2<f64>,
    pub context: Array2<f64>,
}

impl EmbeddingTable {
    pub fn m(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

pub(crate) fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Both tables drawn i.i.d. from N(0, 0.1²).
pub fn init_embeddings(m: usize, d: usize, seed: u64) -> EmbeddingTable {
    assert!(m >= 1 && d >= 1, "embedding table needs m, d >= 1");
    let mut rng = rng::stream(seed, "embedding-init");
    let vectors = gaussian_matrix(m, d, INIT_STD, &mut rng);
    let context = gaussian_matrix(m, d, INIT_STD, &mut rng);
    EmbeddingTable { vectors, context }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipGramConfig {
    /// Context radius.
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub noise_exponent: f64,
    pub seed: u64,
    /// Lock-free multi-threaded updates. Not reproducible.
    pub parallel: bool,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            window: 10,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            noise_exponent: 0.75,
            seed: 0,
            parallel: false,
        }
    }
}

impl SkipGramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.negatives < 1 {
            return Err(Error::Config("skip-gram window and negatives must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("skip-gram learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -log(1 + e^{-x})
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGrads {
    pub loss: f64,
    pub center: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Negative-sampling loss of one (center, context) pair,
/// `-log σ(context·center) - Σ log σ(-neg·center)`, with exact gradients.
/// Scores are clamped to ±30, where the gradient is taken as zero.
pub fn pair_loss_and_grads(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> PairGrads {
    let d = center.len();
    let mut g_center = vec![0.0; d];

    let raw = dot(context, center);
    let s = raw.clamp(-SCORE_CLAMP, SCORE_CLAMP);
    let mut loss = -log_sigmoid(s);
    let coef = if raw.abs() > SCORE_CLAMP { 0.0 } else { sigmoid(s) - 1.0 };
    let g_context: Vec<f64> = center.iter().map(|c| coef * c).collect();
    g_center.iter_mut().zip(context).for_each(|(g, c)| *g += coef * c);

    let g_negs = negatives
        .iter()
        .map(|neg| {
            let raw = dot(neg, center);
            let s = raw.clamp(-SCORE_CLAMP, SCORE_CLAMP);
            loss -= log_sigmoid(-s);
            let coef = if raw.abs() > SCORE_CLAMP { 0.0 } else { sigmoid(s) };
            g_center.iter_mut().zip(neg.iter()).for_each(|(g, n)| *g += coef * n);
            center.iter().map(|c| coef * c).collect()
        })
        .collect();

    PairGrads {
        loss,
        center: g_center,
        context: g_context,
        negatives: g_negs,
    }
}

/// Draws noise items ∝ frequency^exponent, never returning the excluded item.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    dist: Option<WeightedIndex<f64>>,
    weights: Vec<f64>,
    total: f64,
}

impl NoiseSampler {
    pub fn new(frequencies: &[u64], exponent: f64) -> Self {
        let weights: Vec<f64> = frequencies
            .iter()
            .map(|&f| if f == 0 { 0.0 } else { (f as f64).powf(exponent) })
            .collect();
        let total = weights.iter().sum();
        Self {
            dist: WeightedIndex::new(&weights).ok(),
            weights,
            total,
        }
    }

    /// `None` when no item other than `exclude` carries noise mass.
    pub fn sample<R: Rng + ?Sized>(&self, exclude: usize, rng: &mut R) -> Option<usize> {
        let dist = self.dist.as_ref()?;
        let excluded = self.weights.get(exclude).copied().unwrap_or(0.0);
        if self.total - excluded <= 0.0 {
            return None;
        }
        loop {
            let k = dist.sample(rng);
            if k != exclude {
                return Some(k);
            }
        }
    }
}

/// Number of (center, context) pairs one pass over `walks` produces.
pub fn count_pairs(walks: &[Walk], window: usize) -> usize {
    walks
        .iter()
        .map(|w| {
            let n = w.len();
            (0..n).map(|i| i.min(window) + (n - 1 - i).min(window)).sum::<usize>()
        })
        .sum()
}

/// Visits every positive pair of one pass in corpus order.
pub fn for_each_pair(walk: &[usize], window: usize, mut f: impl FnMut(usize, usize)) {
    for i in 0..walk.len() {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(walk.len() - 1);
        for j in lo..=hi {
            if j != i {
                f(walk[i], walk[j]);
            }
        }
    }
}

trait Tables {
    fn dim(&self) -> usize;
    fn read_input(&self, row: usize, out: &mut Vec<f64>);
    fn read_context(&self, row: usize, out: &mut Vec<f64>);
    fn add_input(&self, row: usize, delta: &[f64], scale: f64);
    fn add_context(&self, row: usize, delta: &[f64], scale: f64);
}

struct Exclusive<'a>(std::cell::RefCell<&'a mut EmbeddingTable>);

impl Tables for Exclusive<'_> {
    fn dim(&self) -> usize {
        self.0.borrow().dim()
    }
    fn read_input(&self, row: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.0.borrow().vectors.row(row).iter());
    }
    fn read_context(&self, row: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.0.borrow().context.row(row).iter());
    }
    fn add_input(&self, row: usize, delta: &[f64], scale: f64) {
        let mut t = self.0.borrow_mut();
        t.vectors.row_mut(row).iter_mut().zip(delta).for_each(|(x, g)| *x += scale * g);
    }
    fn add_context(&self, row: usize, delta: &[f64], scale: f64) {
        let mut t = self.0.borrow_mut();
        t.context.row_mut(row).iter_mut().zip(delta).for_each(|(x, g)| *x += scale * g);
    }
}

/// f64 bit patterns in relaxed atomics: concurrent updates may interleave,
/// but every individual load and store is well defined.
struct Shared {
    d: usize,
    input: Vec<AtomicU64>,
    context: Vec<AtomicU64>,
}

impl Shared {
    fn from_table(t: &EmbeddingTable) -> Self {
        let pack = |a: &Array2<f64>| a.iter().map(|x| AtomicU64::new(x.to_bits())).collect();
        Self {
            d: t.dim(),
            input: pack(&t.vectors),
            context: pack(&t.context),
        }
    }

    fn store_into(&self, t: &mut EmbeddingTable) {
        for (x, a) in t.vectors.iter_mut().zip(&self.input) {
            *x = f64::from_bits(a.load(Ordering::Relaxed));
        }
        for (x, a) in t.context.iter_mut().zip(&self.context) {
            *x = f64::from_bits(a.load(Ordering::Relaxed));
        }
    }

    fn read(cells: &[AtomicU64], row: usize, d: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(cells[row * d..(row + 1) * d].iter().map(|a| f64::from_bits(a.load(Ordering::Relaxed))));
    }

    fn add(cells: &[AtomicU64], row: usize, d: usize, delta: &[f64], scale: f64) {
        for (a, g) in cells[row * d..(row + 1) * d].iter().zip(delta) {
            let v = f64::from_bits(a.load(Ordering::Relaxed)) + scale * g;
            a.store(v.to_bits(), Ordering::Relaxed);
        }
    }
}

impl Tables for Shared {
    fn dim(&self) -> usize {
        self.d
    }
    fn read_input(&self, row: usize, out: &mut Vec<f64>) {
        Shared::read(&self.input, row, self.d, out)
    }
    fn read_context(&self, row: usize, out: &mut Vec<f64>) {
        Shared::read(&self.context, row, self.d, out)
    }
    fn add_input(&self, row: usize, delta: &[f64], scale: f64) {
        Shared::add(&self.input, row, self.d, delta, scale)
    }
    fn add_context(&self, row: usize, delta: &[f64], scale: f64) {
        Shared::add(&self.context, row, self.d, delta, scale)
    }
}

struct Schedule {
    lr: f64,
    total: usize,
    done: AtomicUsize,
}

impl Schedule {
    /// Linear decay from `lr` to `lr / 100` over all pairs of all epochs.
    fn next(&self) -> f64 {
        let k = self.done.fetch_add(1, Ordering::Relaxed);
        let progress = (k as f64 / self.total.max(1) as f64).min(1.0);
        self.lr * (1.0 - 0.99 * progress)
    }
}

fn train_walks<T: Tables, R: Rng>(
    walks: &[Walk],
    cfg: &SkipGramConfig,
    noise: &NoiseSampler,
    tables: &T,
    schedule: &Schedule,
    rng: &mut R,
) -> (f64, usize) {
    let mut center = Vec::with_capacity(tables.dim());
    let mut context = Vec::with_capacity(tables.dim());
    let mut neg_rows: Vec<Vec<f64>> = Vec::new();
    let mut neg_ids: Vec<usize> = Vec::with_capacity(cfg.negatives);
    let mut loss_sum = 0.0;
    let mut pairs = 0;
    for walk in walks {
        for_each_pair(walk, cfg.window, |c, ctx| {
            neg_ids.clear();
            neg_ids.extend((0..cfg.negatives).filter_map(|_| noise.sample(ctx, rng)));
            tables.read_input(c, &mut center);
            tables.read_context(ctx, &mut context);
            neg_rows.resize_with(neg_ids.len(), Vec::new);
            for (row, &n) in neg_rows.iter_mut().zip(&neg_ids) {
                tables.read_context(n, row);
            }
            let negs: Vec<&[f64]> = neg_rows.iter().map(Vec::as_slice).collect();
            let g = pair_loss_and_grads(&center, &context, &negs);
            let lr = schedule.next();
            tables.add_input(c, &g.center, -lr);
            tables.add_context(ctx, &g.context, -lr);
            for (&n, gn) in neg_ids.iter().zip(&g.negatives) {
                tables.add_context(n, gn, -lr);
            }
            loss_sum += g.loss;
            pairs += 1;
        });
    }
    (loss_sum, pairs)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipGramReport {
    /// Mean pair loss per epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub pairs_per_epoch: usize,
}

/// Trains `table` in place. Noise items are drawn ∝ walk-corpus frequency^`noise_exponent`.
pub fn train_skipgram(walks: &[Walk], cfg: &SkipGramConfig, table: &mut EmbeddingTable) -> Result<SkipGramReport> {
    cfg.validate()?;
    let m = table.m();
    let mut freq = vec![0u64; m];
    for w in walks {
        for &v in w {
            if v >= m {
                return Err(Error::Shape(format!("walk item {v} outside embedding table of {m} rows")));
            }
            freq[v] += 1;
        }
    }
    let pairs_per_epoch = count_pairs(walks, cfg.window);
    if pairs_per_epoch == 0 {
        log::warn!("walk corpus yields no training pairs; embeddings left untouched");
        return Ok(SkipGramReport::default());
    }
    let noise = NoiseSampler::new(&freq, cfg.noise_exponent);
    let schedule = Schedule {
        lr: cfg.learning_rate,
        total: pairs_per_epoch * cfg.epochs,
        done: AtomicUsize::new(0),
    };

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    if cfg.parallel {
        let shared = Shared::from_table(table);
        let chunk = walks.len().div_ceil(rayon::current_num_threads() * 4).max(1);
        for epoch in 0..cfg.epochs {
            let (loss, n) = walks
                .par_chunks(chunk)
                .enumerate()
                .map(|(k, ws)| {
                    let mut r = rng::stream_at(cfg.seed, "negatives", &[epoch as u64, k as u64]);
                    train_walks(ws, cfg, &noise, &shared, &schedule, &mut r)
                })
                .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            epoch_losses.push(loss / n as f64);
        }
        shared.store_into(table);
    } else {
        let mut r = rng::stream(cfg.seed, "negatives");
        let tables = Exclusive(std::cell::RefCell::new(table));
        for _ in 0..cfg.epochs {
            let (loss, n) = train_walks(walks, cfg, &noise, &tables, &schedule, &mut r);
            epoch_losses.push(loss / n as f64);
        }
    }
    for (e, l) in epoch_losses.iter().enumerate() {
        log::info!("skip-gram epoch {}: mean pair loss {l:.5}", e + 1);
    }
    Ok(SkipGramReport {
        epoch_losses,
        pairs_per_epoch,
    })
}

/// Item embeddings keyed by raw item id, as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedEmbeddings {
    pub vocab: Vocab,
    pub vectors: Array2<f64>,
}

impl NamedEmbeddings {
    /// First line `m d`, then `raw_id v1 .. vd` per item. Floats are written in
    /// shortest round-trip form, so reading back is lossless.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.vectors.nrows(), self.vectors.ncols());
        for (i, raw) in self.vocab.iter() {
            s.push_str(raw);
            for x in self.vectors.row(i) {
                let _ = write!(s, " {x}");
            }
            s.push('\n');
        }
        write_file(path, &s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(path, 1, "missing header"))?;
        let (m, d) = header
            .split_once(' ')
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::parse(path, 1, "expected `m d`"))?;
        let mut vocab = Vocab::new();
        let mut vectors = Array2::zeros((m, d));
        let mut rows = 0;
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            if k >= m {
                return Err(Error::parse(path, lineno, "more rows than the header declares"));
            }
            let mut toks = line.split(' ');
            let raw = toks.next().filter(|t| !t.is_empty()).ok_or_else(|| Error::parse(path, lineno, "missing item id"))?;
            if vocab.intern(raw) != k {
                return Err(Error::parse(path, lineno, format!("duplicate item id `{raw}`")));
            }
            let mut c = 0;
            for t in toks {
                if c >= d {
                    return Err(Error::parse(path, lineno, "too many values"));
                }
                vectors[[k, c]] = t.parse().map_err(|_| Error::parse(path, lineno, format!("bad float `{t}`")))?;
                c += 1;
            }
            if c != d {
                return Err(Error::parse(path, lineno, format!("expected {d} values, found {c}")));
            }
            rows += 1;
        }
        if rows != m {
            return Err(Error::parse(path, rows + 2, format!("expected {m} rows, found {rows}")));
        }
        Ok(Self { vocab, vectors })
    }

    /// Rows reordered to match `vocab`. Every item of `vocab` must be present.
    pub fn align_to(&self, vocab: &Vocab) -> Result<Array2<f64>> {
        let d = self.vectors.ncols();
        let mut out = Array2::zeros((vocab.len(), d));
        let mut missing = Vec::new();
        for (i, raw) in vocab.iter() {
            match self.vocab.get(raw) {
                Some(k) => out.row_mut(i).assign(&self.vectors.row(k)),
                None => missing.push(raw),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Shape(format!(
                "{} dataset items have no embedding (first: `{}`)",
                missing.len(),
                missing[0]
            )));
        }
        Ok(out)
    }
}
