//! Ranking metrics, stratified evaluation and classical baselines.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataio::{Example, Session};
use crate::error::{Error, Result};
use crate::model::SessionModel;

/// 1 + items scoring strictly higher + equal-scoring items with a lower index.
pub fn rank_of_label(scores: &[f64], label: usize) -> usize {
    let target = scores[label];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s > target || (s == target && i < label) {
            rank += 1;
        }
    }
    rank
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stratum {
    All,
    Cold,
    Popular,
    Long,
    Short,
}

impl Stratum {
    pub const ALL: [Stratum; 5] = [Stratum::All, Stratum::Cold, Stratum::Popular, Stratum::Long, Stratum::Short];

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Cold => "cold",
            Stratum::Popular => "popular",
            Stratum::Long => "long",
            Stratum::Short => "short",
        }
    }
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub stratum: Stratum,
    pub k: usize,
    pub precision: f64,
    pub mrr: f64,
    pub ndcg: f64,
    pub n: usize,
}

pub fn metrics_at_k(ranks: &[usize], k: usize, stratum: Stratum) -> Result<MetricReport> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let (mut hits, mut rr, mut dcg) = (0.0, 0.0, 0.0);
    for &r in ranks {
        debug_assert!(r >= 1);
        if r <= k {
            hits += 1.0;
            rr += 1.0 / r as f64;
            dcg += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok(MetricReport {
        stratum,
        k,
        precision: hits / n,
        mrr: rr / n,
        ndcg: dcg / n,
        n: ranks.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratumConfig {
    /// Labels with training popularity at or below this count are cold.
    pub cold_threshold: u64,
    /// Labels with training popularity above this count are popular.
    pub popular_threshold: u64,
    /// Prefixes at least this long are long sessions.
    pub long_session_min: usize,
}

impl StratumConfig {
    pub fn yoochoose() -> Self {
        Self {
            cold_threshold: 500,
            popular_threshold: 5000,
            long_session_min: 6,
        }
    }

    pub fn diginetica() -> Self {
        Self {
            cold_threshold: 50,
            popular_threshold: 300,
            long_session_min: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cold_threshold >= self.popular_threshold {
            return Err(Error::Config("cold threshold must be below the popular threshold".into()));
        }
        if self.long_session_min < 2 {
            return Err(Error::Config("long session minimum must be >= 2".into()));
        }
        Ok(())
    }
}

impl Default for StratumConfig {
    fn default() -> Self {
        Self::yoochoose()
    }
}

/// Example indices belonging to each stratum. Cold and popular need not cover
/// every example; long and short partition the set.
pub fn stratify(examples: &[Example], popularity: &[u64], cfg: &StratumConfig) -> HashMap<Stratum, Vec<usize>> {
    let mut out: HashMap<Stratum, Vec<usize>> = Stratum::ALL.iter().map(|&s| (s, Vec::new())).collect();
    for (i, ex) in examples.iter().enumerate() {
        let pop = popularity[ex.label];
        out.get_mut(&Stratum::All).unwrap().push(i);
        if pop <= cfg.cold_threshold {
            out.get_mut(&Stratum::Cold).unwrap().push(i);
        }
        if pop > cfg.popular_threshold {
            out.get_mut(&Stratum::Popular).unwrap().push(i);
        }
        let len_stratum = if ex.prefix.len() >= cfg.long_session_min {
            Stratum::Long
        } else {
            Stratum::Short
        };
        out.get_mut(&len_stratum).unwrap().push(i);
    }
    out
}

/// Reports for every non-empty stratum and every cutoff, in stratum then cutoff order.
pub fn evaluate_strata(
    ranks: &[usize],
    examples: &[Example],
    popularity: &[u64],
    cfg: &StratumConfig,
    ks: &[usize],
) -> Result<Vec<MetricReport>> {
    if ranks.len() != examples.len() {
        return Err(Error::Shape(format!("{} ranks for {} examples", ranks.len(), examples.len())));
    }
    let strata = stratify(examples, popularity, cfg);
    let mut out = Vec::new();
    for s in Stratum::ALL {
        let members = &strata[&s];
        if members.is_empty() {
            continue;
        }
        let sub: Vec<usize> = members.iter().map(|&i| ranks[i]).collect();
        for &k in ks {
            out.push(metrics_at_k(&sub, k, s)?);
        }
    }
    Ok(out)
}

/// Scores every catalog item for a prefix.
pub trait Ranker: Sync {
    fn name(&self) -> &str;
    fn scores(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Label ranks for every example, in example order.
pub fn rank_examples(ranker: &dyn Ranker, examples: &[Example]) -> Result<Vec<usize>> {
    examples
        .par_iter()
        .map(|ex| Ok(rank_of_label(&ranker.scores(&ex.prefix)?, ex.label)))
        .collect()
}

impl Ranker for SessionModel {
    fn name(&self) -> &str {
        "model"
    }

    fn scores(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.logits(prefix)?.to_vec())
    }
}

/// Global training popularity.
#[derive(Debug, Clone)]
pub struct Pop {
    popularity: Vec<f64>,
}

impl Pop {
    pub fn new(popularity: &[u64]) -> Self {
        Self {
            popularity: popularity.iter().map(|&c| c as f64).collect(),
        }
    }
}

impl Ranker for Pop {
    fn name(&self) -> &str {
        "POP"
    }

    fn scores(&self, _prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.popularity.clone())
    }
}

/// In-prefix click count first, global popularity second.
#[derive(Debug, Clone)]
pub struct SPop {
    popularity: Vec<u64>,
}

impl SPop {
    pub fn new(popularity: &[u64]) -> Self {
        Self {
            popularity: popularity.to_vec(),
        }
    }
}

impl Ranker for SPop {
    fn name(&self) -> &str {
        "S-POP"
    }

    fn scores(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        // count * (max_pop + 1) + pop orders lexicographically and stays exact in f64
        let base = (self.popularity.iter().copied().max().unwrap_or(0) + 1) as f64;
        let mut s: Vec<f64> = self.popularity.iter().map(|&p| p as f64).collect();
        for &i in prefix {
            let item = s.get_mut(i).ok_or_else(|| Error::Precondition(format!("item {i} outside catalog")))?;
            *item += base;
        }
        Ok(s)
    }
}

/// Cosine similarity of binary session-incidence vectors, queried with the
/// last prefix item.
#[derive(Debug, Clone)]
pub struct ItemKnn {
    /// Sessions containing each item.
    support: Vec<u64>,
    /// Sessions containing both items, stored symmetrically.
    co: Vec<HashMap<usize, u64>>,
}

impl ItemKnn {
    pub fn new(train_sessions: &[Session], m: usize) -> Self {
        let mut support = vec![0u64; m];
        let mut co: Vec<HashMap<usize, u64>> = vec![HashMap::new(); m];
        for s in train_sessions {
            let mut items = s.items.clone();
            items.sort_unstable();
            items.dedup();
            for (a, &i) in items.iter().enumerate() {
                support[i] += 1;
                for &j in &items[a + 1..] {
                    *co[i].entry(j).or_default() += 1;
                    *co[j].entry(i).or_default() += 1;
                }
            }
        }
        Self { support, co }
    }

    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        let both = if a == b {
            self.support[a]
        } else {
            self.co[a].get(&b).copied().unwrap_or(0)
        };
        if both == 0 {
            return 0.0;
        }
        both as f64 / ((self.support[a] as f64) * (self.support[b] as f64)).sqrt()
    }
}

impl Ranker for ItemKnn {
    fn name(&self) -> &str {
        "Item-KNN"
    }

    fn scores(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let m = self.support.len();
        let &last = prefix
            .last()
            .ok_or_else(|| Error::Precondition("empty prefix".into()))?;
        if last >= m {
            return Err(Error::Precondition(format!("item {last} outside catalog")));
        }
        let mut s = vec![0.0; m];
        s[last] = self.similarity(last, last);
        for &j in self.co[last].keys() {
            s[j] = self.similarity(last, j);
        }
        Ok(s)
    }
}

/// `stratum<TAB>k<TAB>P<TAB>MRR<TAB>NDCG<TAB>n` per report.
pub fn format_tsv(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            r.stratum, r.k, r.precision, r.mrr, r.ndcg, r.n
        );
    }
    out
}

/// Aligned table with percentages, one row per report.
pub fn format_table(title: &str, reports: &[MetricReport]) -> String {
    let mut out = format!("{title}\n{:<8} {:>4} {:>8} {:>8} {:>8} {:>8}\n", "stratum", "K", "P", "MRR", "NDCG", "n");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<8} {:>4} {:>8.2} {:>8.2} {:>8.2} {:>8}",
            r.stratum.as_str(),
            r.k,
            100.0 * r.precision,
            100.0 * r.mrr,
            100.0 * r.ndcg,
            r.n
        );
    }
    out
}
