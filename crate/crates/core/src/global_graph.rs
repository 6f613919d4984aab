//! Weighted directed item-transition graph over the training corpus and the
//! second-order biased random walks used as the pre-training corpus.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::dataio::{read_file, write_file, Session};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGraph {
    m: usize,
    /// Per source node, `(target, weight)` sorted by target.
    out_edges: Vec<Vec<(usize, u64)>>,
    in_degree: Vec<usize>,
}

impl GlobalGraph {
    /// Counts consecutive transitions `a -> b` (with `a != b`) across sessions.
    pub fn build(sessions: &[Session], m: usize) -> Result<Self> {
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for s in sessions {
            if let Some(&bad) = s.items.iter().find(|&&i| i >= m) {
                return Err(Error::Precondition(format!("item index {bad} >= m = {m}")));
            }
            edges.extend(s.items.windows(2).filter(|w| w[0] != w[1]).map(|w| (w[0], w[1])));
        }
        Ok(Self::from_transitions(m, edges))
    }

    fn from_transitions(m: usize, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        let mut out_edges = vec![Vec::new(); m];
        let mut in_degree = vec![0; m];
        for (src, dst) in pairs {
            let adj: &mut Vec<(usize, u64)> = &mut out_edges[src];
            match adj.last_mut() {
                Some((t, w)) if *t == dst => *w += 1,
                _ => {
                    adj.push((dst, 1));
                    in_degree[dst] += 1;
                }
            }
        }
        Self {
            m,
            out_edges,
            in_degree,
        }
    }

    /// Builds a graph from explicit weighted edges; duplicate edges accumulate.
    pub fn from_edges(m: usize, edges: &[(usize, usize, u64)]) -> Result<Self> {
        let mut out_edges: Vec<Vec<(usize, u64)>> = vec![Vec::new(); m];
        for &(s, t, w) in edges {
            if s >= m || t >= m {
                return Err(Error::Precondition(format!("edge {s}->{t} outside 0..{m}")));
            }
            if s == t || w == 0 {
                return Err(Error::Precondition(format!("edge {s}->{t} must be a positive non-loop")));
            }
            out_edges[s].push((t, w));
        }
        let mut in_degree = vec![0; m];
        for adj in &mut out_edges {
            adj.sort_unstable();
            adj.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
            for &(t, _) in adj.iter() {
                in_degree[t] += 1;
            }
        }
        Ok(Self {
            m,
            out_edges,
            in_degree,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, u64)] {
        &self.out_edges[node]
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.out_edges[node].len()
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.in_degree[node]
    }

    pub fn weight(&self, src: usize, dst: usize) -> Option<u64> {
        let adj = &self.out_edges[src];
        adj.binary_search_by_key(&dst, |e| e.0).ok().map(|k| adj[k].1)
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.weight(src, dst).is_some()
    }

    pub fn edge_count(&self) -> usize {
        self.out_edges.iter().map(Vec::len).sum()
    }

    /// Edge list, one `src<TAB>dst<TAB>weight` per line.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (src, adj) in self.out_edges.iter().enumerate() {
            for &(dst, w) in adj {
                let _ = writeln!(s, "{src}\t{dst}\t{w}");
            }
        }
        write_file(path, &s)
    }

    pub fn read_edge_list(path: &Path, m: usize) -> Result<Self> {
        let text = read_file(path)?;
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let parsed = match cols.as_slice() {
                [s, t, w] => s.parse().ok().zip(t.parse().ok()).zip(w.parse().ok()),
                _ => None,
            };
            let ((s, t), w) = parsed.ok_or_else(|| Error::parse(path, i + 1, "expected src<TAB>dst<TAB>weight"))?;
            edges.push((s, t, w));
        }
        Self::from_edges(m, &edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkConfig {
    /// Return parameter.
    pub p: f64,
    /// In-out parameter.
    pub q: f64,
    /// Maximum number of nodes in a walk.
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            p: 0.25,
            q: 4.0,
            walk_length: 80,
            walks_per_node: 10,
            seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.q > 0.0) {
            return Err(Error::Config("walk parameters p and q must be positive".into()));
        }
        if self.walk_length < 2 || self.walks_per_node < 1 {
            return Err(Error::Config("walk_length must be >= 2 and walks_per_node >= 1".into()));
        }
        Ok(())
    }
}

/// Hop distance from the previous node to a candidate target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopDistance {
    /// Candidate is the previous node itself.
    Return = 0,
    /// Candidate is an out-neighbor of the previous node.
    Shared = 1,
    /// Candidate is not adjacent to the previous node.
    Outward = 2,
}

impl HopDistance {
    pub fn classify(g: &GlobalGraph, prev: usize, target: usize) -> Self {
        if target == prev {
            HopDistance::Return
        } else if g.has_edge(prev, target) {
            HopDistance::Shared
        } else {
            HopDistance::Outward
        }
    }

    pub fn factor(self, cfg: &WalkConfig) -> f64 {
        match self {
            HopDistance::Return => 1.0 / cfg.p,
            HopDistance::Shared => 1.0,
            HopDistance::Outward => 1.0 / cfg.q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeadEnd(pub usize);

/// Next-step distribution over `g.neighbors(src)`, in adjacency order.
///
/// Without a previous node the distribution is proportional to edge weight;
/// otherwise each weight is scaled by the hop-distance factor `1/p`, `1` or `1/q`.
pub fn transition_distribution(
    g: &GlobalGraph,
    prev: Option<usize>,
    src: usize,
    cfg: &WalkConfig,
) -> std::result::Result<Vec<f64>, DeadEnd> {
    let adj = g.neighbors(src);
    if adj.is_empty() {
        return Err(DeadEnd(src));
    }
    let mut probs: Vec<f64> = adj
        .iter()
        .map(|&(t, w)| {
            let alpha = prev.map_or(1.0, |pv| HopDistance::classify(g, pv, t).factor(cfg));
            alpha * w as f64
        })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// Draws one successor of `src`, or `None` at a dead end.
pub fn sample_step<R: Rng + ?Sized>(
    g: &GlobalGraph,
    prev: Option<usize>,
    src: usize,
    cfg: &WalkConfig,
    rng: &mut R,
) -> Option<usize> {
    let probs = transition_distribution(g, prev, src, cfg).ok()?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Some(g.neighbors(src)[k].0);
        }
    }
    // rounding left u above the final cumulative sum
    g.neighbors(src).last().map(|e| e.0)
}

pub type Walk = Vec<usize>;

fn walk_from(g: &GlobalGraph, start: usize, walk_idx: usize, cfg: &WalkConfig) -> Walk {
    let mut rng = rng::stream_at(cfg.seed, "walks", &[start as u64, walk_idx as u64]);
    let mut walk = Vec::with_capacity(cfg.walk_length);
    walk.push(start);
    let mut prev = None;
    while walk.len() < cfg.walk_length {
        let cur = *walk.last().unwrap();
        match sample_step(g, prev, cur, cfg, &mut rng) {
            Some(next) => {
                walk.push(next);
                prev = Some(cur);
            }
            None => break,
        }
    }
    walk
}

/// `walks_per_node` walks from every node with an outgoing edge, ordered by
/// (start node, walk index). Each walk has its own random stream, so the
/// result does not depend on thread count.
pub fn generate_walks(g: &GlobalGraph, cfg: &WalkConfig) -> Result<Vec<Walk>> {
    cfg.validate()?;
    if g.edge_count() == 0 {
        log::warn!("global graph has no edges; walk corpus is empty");
    }
    let starts: Vec<(usize, usize)> = (0..g.m())
        .filter(|&v| g.out_degree(v) > 0)
        .flat_map(|v| (0..cfg.walks_per_node).map(move |k| (v, k)))
        .collect();
    Ok(starts
        .par_iter()
        .map(|&(v, k)| walk_from(g, v, k, cfg))
        .collect())
}

/// One walk per line, space-separated item indices.
pub fn write_walks(path: &Path, walks: &[Walk]) -> Result<()> {
    let mut s = String::new();
    for w in walks {
        for (k, v) in w.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    write_file(path, &s)
}

pub fn read_walks(path: &Path) -> Result<Vec<Walk>> {
    let text = read_file(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::parse(path, i + 1, format!("bad index `{t}`"))))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sess(items: &[usize]) -> Session {
        Session {
            items: items.to_vec(),
            end_time: 0,
        }
    }

    #[test]
    fn figure_corpus_edge_weight() {
        // v1..v5 as indices 1..5; v2 -> v3 appears in the first and third sessions.
        let g = GlobalGraph::build(&[sess(&[1, 2, 3]), sess(&[2, 4, 5]), sess(&[2, 3, 5, 1])], 6).unwrap();
        assert_eq!(g.weight(2, 3), Some(2));
        assert_eq!(g.weight(3, 2), None);
    }

    #[test]
    fn single_transition_and_no_self_edge() {
        let g = GlobalGraph::build(&[sess(&[0, 1])], 2).unwrap();
        assert_eq!(g.neighbors(0), &[(1, 1)]);
        let g = GlobalGraph::build(&[sess(&[0, 0, 1])], 2).unwrap();
        assert_eq!(g.neighbors(0), &[(1, 1)]);
        assert_eq!(g.edge_count(), 1);
        assert_eq!((g.in_degree(1), g.out_degree(1)), (1, 0));
    }

    #[test]
    fn out_of_range_item_rejected() {
        assert!(GlobalGraph::build(&[sess(&[0, 3])], 2).is_err());
    }

    fn cfg(p: f64, q: f64) -> WalkConfig {
        WalkConfig {
            p,
            q,
            ..WalkConfig::default()
        }
    }

    #[test]
    fn single_neighbor_is_certain() {
        let g = GlobalGraph::from_edges(3, &[(0, 1, 3), (1, 2, 1), (2, 0, 1)]).unwrap();
        for prev in [None, Some(0), Some(2)] {
            assert_eq!(transition_distribution(&g, prev, 1, &cfg(0.3, 7.0)).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn unit_parameters_follow_raw_weights() {
        let g = GlobalGraph::from_edges(4, &[(0, 1, 1), (1, 0, 2), (1, 2, 3), (1, 3, 5), (0, 2, 1)]).unwrap();
        let d = transition_distribution(&g, Some(0), 1, &cfg(1.0, 1.0)).unwrap();
        let expected = [0.2, 0.3, 0.5];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn second_order_toy_distribution() {
        // prev = 0, src = 1, neighbors of 1: 0 (w2, return), 2 (w3, 0->2 exists), 3 (w5, outward).
        // p = 0.25, q = 4: unnormalized 2*4 = 8, 3*1 = 3, 5*0.25 = 1.25; total 12.25.
        let g = GlobalGraph::from_edges(4, &[(0, 1, 1), (1, 0, 2), (1, 2, 3), (1, 3, 5), (0, 2, 1)]).unwrap();
        let d = transition_distribution(&g, Some(0), 1, &cfg(0.25, 4.0)).unwrap();
        let expected = [8.0 / 12.25, 3.0 / 12.25, 1.25 / 12.25];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{d:?}");
        }
        // first step ignores p and q
        let d = transition_distribution(&g, None, 1, &cfg(0.25, 4.0)).unwrap();
        assert_eq!(d, vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn dead_end_signalled() {
        let g = GlobalGraph::from_edges(2, &[(0, 1, 1)]).unwrap();
        assert_eq!(transition_distribution(&g, Some(0), 1, &cfg(1.0, 1.0)), Err(DeadEnd(1)));
    }

    #[test]
    fn walk_counts_and_dead_starts() {
        let edges: Vec<(usize, usize, u64)> = (0..100).map(|v| (v, (v + 1) % 100, 1)).collect();
        let mut g_edges = edges.clone();
        g_edges.retain(|e| e.0 != 50);
        let g = GlobalGraph::from_edges(101, &g_edges).unwrap();
        let c = WalkConfig {
            walks_per_node: 10,
            walk_length: 5,
            ..WalkConfig::default()
        };
        let walks = generate_walks(&g, &c).unwrap();
        // 99 nodes have an outgoing edge; 50 and 100 do not
        assert_eq!(walks.len(), 990);
        assert!(walks.iter().all(|w| w[0] != 50 && w[0] != 100));

        let g = GlobalGraph::from_edges(100, &edges).unwrap();
        assert_eq!(generate_walks(&g, &c).unwrap().len(), 1000);
    }

    #[test]
    fn chain_walks_stop_at_dead_end() {
        let g = GlobalGraph::from_edges(3, &[(0, 1, 1), (1, 2, 1)]).unwrap();
        let walks = generate_walks(&g, &WalkConfig::default()).unwrap();
        let from_a: Vec<_> = walks.iter().filter(|w| w[0] == 0).collect();
        assert_eq!(from_a.len(), 10);
        assert!(from_a.iter().all(|w| w.as_slice() == [0, 1, 2]));
    }

    #[test]
    fn walk_and_edge_files_round_trip() {
        let g = GlobalGraph::from_edges(4, &[(0, 1, 2), (1, 2, 1), (2, 0, 4), (2, 3, 1)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.write_edge_list(&dir.path().join("g.tsv")).unwrap();
        assert_eq!(GlobalGraph::read_edge_list(&dir.path().join("g.tsv"), 4).unwrap(), g);
        let walks = generate_walks(&g, &WalkConfig::default()).unwrap();
        write_walks(&dir.path().join("w.txt"), &walks).unwrap();
        assert_eq!(read_walks(&dir.path().join("w.txt")).unwrap(), walks);
    }

    fn arb_graph() -> impl Strategy<Value = GlobalGraph> {
        (2usize..9)
            .prop_flat_map(|m| (Just(m), prop::collection::vec((0..m, 0..m, 1u64..6), 1..30)))
            .prop_map(|(m, edges)| {
                let edges: Vec<_> = edges.into_iter().filter(|e| e.0 != e.1).collect();
                GlobalGraph::from_edges(m, &edges).unwrap()
            })
    }

    proptest! {
        #[test]
        fn distributions_are_normalized(g in arb_graph(), p in 0.05f64..5.0, q in 0.05f64..5.0) {
            let c = cfg(p, q);
            for src in 0..g.m() {
                for prev in std::iter::once(None).chain((0..g.m()).map(Some)) {
                    if let Ok(d) = transition_distribution(&g, prev, src, &c) {
                        prop_assert!(d.iter().all(|&x| x >= 0.0));
                        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                    if let Some(pv) = prev {
                        for &(t, _) in g.neighbors(src) {
                            let a = HopDistance::classify(&g, pv, t).factor(&c);
                            prop_assert!(a == 1.0 / p || a == 1.0 || a == 1.0 / q);
                        }
                    }
                }
            }
        }

        #[test]
        fn walks_follow_edges_and_are_deterministic(g in arb_graph(), seed in 0u64..1000) {
            let c = WalkConfig { walk_length: 12, walks_per_node: 3, seed, ..WalkConfig::default() };
            let a = generate_walks(&g, &c).unwrap();
            prop_assert_eq!(&a, &generate_walks(&g, &c).unwrap());
            for w in &a {
                prop_assert!(w.len() <= 12);
                for pair in w.windows(2) {
                    prop_assert!(g.has_edge(pair[0], pair[1]));
                }
            }
        }
    }
}
