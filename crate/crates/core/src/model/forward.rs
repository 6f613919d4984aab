use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::{ModelConfig, NetParams, ReadoutConfig, ReadoutKind};
use crate::embedding::sigmoid;
use crate::error::{Error, Result};
use crate::session_graph::SessionGraph;

/// Cached activations of one message-passing step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub h_prev: Array2<f64>,
    /// `[W_out H; W_in H] + b`, n × 2d.
    pub msg: Array2<f64>,
    pub z: Array2<f64>,
    pub r: Array2<f64>,
    /// Candidate state `tanh(P m + Q (r ⊙ h))`.
    pub cand: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReadoutCache {
    /// Position weights for exp_decay, mean and last.
    Weighted { weights: Vec<f64> },
    Sum { pooled: Array1<f64> },
    Attention {
        /// σ(A h_last + B h_pos + c) per position, L × d.
        gate: Array2<f64>,
        /// Unnormalized position coefficients `v · gate_pos`.
        alpha: Array1<f64>,
        /// Σ α_pos h_pos.
        global: Array1<f64>,
    },
}

impl ReadoutCache {
    /// Per-position coefficients applied to node states.
    pub fn position_weights(&self) -> Vec<f64> {
        match self {
            ReadoutCache::Weighted { weights } => weights.clone(),
            ReadoutCache::Sum { pooled: _ } => Vec::new(),
            ReadoutCache::Attention { alpha, .. } => alpha.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub graph: SessionGraph,
    /// h⁽⁰⁾ … h⁽ᵀ⁾, each n × d.
    pub states: Vec<Array2<f64>>,
    pub steps: Vec<StepCache>,
    pub readout: ReadoutCache,
    pub session: Array1<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

fn gather_rows(table: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    table.select(Axis(0), rows)
}

/// h⁽⁰⁾(v) = φ(v) + β(v) for every node of the session graph.
pub fn init_node_states(sg: &SessionGraph, phi: ArrayView2<f64>, beta: ArrayView2<f64>) -> Array2<f64> {
    gather_rows(phi, &sg.nodes) + gather_rows(beta, &sg.nodes)
}

pub(super) fn step_cached(sg: &SessionGraph, h: &Array2<f64>, net: &NetParams) -> (Array2<f64>, StepCache) {
    let msg = concatenate![Axis(1), sg.w_out.dot(h), sg.w_in.dot(h)] + &net.b_msg;
    let z = (msg.dot(&net.p_z.t()) + h.dot(&net.q_z.t())).mapv_into(sigmoid);
    let r = (msg.dot(&net.p_r.t()) + h.dot(&net.q_r.t())).mapv_into(sigmoid);
    let cand = (msg.dot(&net.p_h.t()) + (&r * h).dot(&net.q_h.t())).mapv_into(f64::tanh);
    let next = z.mapv(|v| 1.0 - v) * h + &z * &cand;
    let cache = StepCache {
        h_prev: h.clone(),
        msg,
        z,
        r,
        cand,
    };
    (next, cache)
}

/// One gated update of all node states.
pub fn message_pass_step(sg: &SessionGraph, h_prev: &Array2<f64>, net: &NetParams) -> Array2<f64> {
    step_cached(sg, h_prev, net).0
}

/// Exponential decay over positions 1..=L: softmax of `-(L - pos) / tau`.
pub fn exp_decay_weights(len: usize, tau: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=len).map(|pos| (-((len - pos) as f64) / tau).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Collapses final node states into one session vector.
pub fn readout(
    sg: &SessionGraph,
    h: &Array2<f64>,
    cfg: &ReadoutConfig,
    net: &NetParams,
) -> Result<(Array1<f64>, ReadoutCache)> {
    let len = sg.seq_len();
    let d = h.ncols();
    let last = h.row(sg.last_slot()).to_owned();
    let weighted = |weights: Vec<f64>| {
        let mut out = Array1::zeros(d);
        for (&slot, &w) in sg.alias.iter().zip(&weights) {
            out.scaled_add(w, &h.row(slot));
        }
        (out, ReadoutCache::Weighted { weights })
    };
    Ok(match cfg.kind {
        ReadoutKind::ExpDecay => weighted(exp_decay_weights(len, cfg.tau)),
        ReadoutKind::Mean => weighted(vec![1.0 / len as f64; len]),
        ReadoutKind::Last => {
            let mut weights = vec![0.0; len];
            weights[len - 1] = 1.0;
            (last, ReadoutCache::Weighted { weights })
        }
        ReadoutKind::Sum => {
            let proj = net
                .sum_proj
                .as_ref()
                .ok_or_else(|| Error::Shape("sum readout needs its projection".into()))?;
            let mut pooled = Array1::zeros(d);
            for &slot in &sg.alias {
                pooled += &h.row(slot);
            }
            (proj.dot(&pooled), ReadoutCache::Sum { pooled })
        }
        ReadoutKind::Attention => {
            let att = net
                .attention
                .as_ref()
                .ok_or_else(|| Error::Shape("attention readout needs its parameters".into()))?;
            let seq = gather_rows(h.view(), &sg.alias);
            let gate = (seq.dot(&att.a_pos.t()) + att.a_last.dot(&last) + &att.bias).mapv_into(sigmoid);
            let alpha = gate.dot(&att.v);
            let global = seq.t().dot(&alpha);
            let session = att.proj.slice(s![.., ..d]).dot(&last) + att.proj.slice(s![.., d..]).dot(&global);
            (session, ReadoutCache::Attention { gate, alpha, global })
        }
    })
}

/// Logits `table · session` for every catalog item; `table` holds φ + β.
pub fn score(session: &Array1<f64>, table: &Array2<f64>) -> Array1<f64> {
    table.dot(session)
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|x| (x - max).exp());
    let total = e.sum();
    e / total
}

pub(super) const PROB_FLOOR: f64 = 1e-12;

/// `-log p[label]`, with the probability floored at 1e-12.
pub fn loss(probs: &Array1<f64>, label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

pub fn forward(cfg: &ModelConfig, net: &NetParams, table: &Array2<f64>, prefix: &[usize]) -> Result<ForwardTrace> {
    if let Some(&bad) = prefix.iter().find(|&&i| i >= table.nrows()) {
        return Err(Error::Precondition(format!("item index {bad} outside catalog of {}", table.nrows())));
    }
    let graph = SessionGraph::build(prefix)?;
    let mut states = vec![gather_rows(table.view(), &graph.nodes)];
    let mut steps = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (next, cache) = step_cached(&graph, states.last().unwrap(), net);
        states.push(next);
        steps.push(cache);
    }
    let (session, readout_cache) = readout(&graph, states.last().unwrap(), &cfg.readout, net)?;
    let logits = score(&session, table);
    let probs = softmax(&logits);
    Ok(ForwardTrace {
        graph,
        states,
        steps,
        readout: readout_cache,
        session,
        logits,
        probs,
    })
}
