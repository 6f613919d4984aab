use ndarray::{Array1, Array2, ArrayD, Axis, Zip};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::backward::backward;
use super::forward::forward;
use super::{ModelConfig, ModelParams, NetParams};
use crate::dataio::Example;
use crate::error::{Error, Result};
use crate::eval::{metrics_at_k, rank_of_label, Stratum};
use crate::rng;

/// Examples per unit of parallel work. Fixed so the gradient reduction order
/// never depends on the number of threads.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ModelParams) -> Self {
        let zeros: Vec<ArrayD<f64>> = params.tensors().iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        Self {
            cfg,
            t: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        for (((_, mut p), (_, g)), (m1, m2)) in tensors.zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            Zip::from(&mut p).and(&g).and(m1).and(m2).for_each(|p, &g, m1, m2| {
                *m1 = c.beta1 * *m1 + (1.0 - c.beta1) * g;
                *m2 = c.beta2 * *m2 + (1.0 - c.beta2) * g * g;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *p -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Cutoff of the validation precision used for model selection.
    pub select_k: usize,
    /// Worker threads; 0 uses the global pool. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 100,
            patience: 3,
            adam: AdamConfig::default(),
            seed: 0,
            select_k: 20,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_precision: f64,
    pub val_mrr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub updates: usize,
}

struct ChunkGrads {
    loss: f64,
    net: NetParams,
    dlogits: Vec<Array1<f64>>,
    sessions: Vec<Array1<f64>>,
    node_rows: Vec<(usize, Array1<f64>)>,
}

fn chunk_grads(
    cfg: &ModelConfig,
    net: &NetParams,
    table: &Array2<f64>,
    examples: &[&Example],
) -> Result<ChunkGrads> {
    let mut acc = ChunkGrads {
        loss: 0.0,
        net: net.zeros_like(),
        dlogits: Vec::with_capacity(examples.len()),
        sessions: Vec::with_capacity(examples.len()),
        node_rows: Vec::new(),
    };
    for ex in examples {
        if ex.label >= table.nrows() {
            return Err(Error::Precondition(format!("label {} outside catalog", ex.label)));
        }
        let trace = forward(cfg, net, table, &ex.prefix)?;
        let g = backward(cfg, net, table, &trace, ex.label);
        acc.loss += g.loss;
        acc.net.add_scaled(&g.net, 1.0);
        acc.dlogits.push(g.dlogits);
        acc.sessions.push(g.session);
        acc.node_rows.extend(g.node_rows);
    }
    Ok(acc)
}

/// Mean loss and mean gradient over one mini-batch.
pub(crate) fn batch_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    phi: &Array2<f64>,
    batch: &[&Example],
) -> Result<(f64, ModelParams)> {
    let table = phi + &params.beta;
    let chunks: Vec<ChunkGrads> = batch
        .par_chunks(CHUNK)
        .map(|c| chunk_grads(cfg, &params.net, &table, c))
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut net = params.net.zeros_like();
    let mut loss = 0.0;
    let mut dl_rows = Vec::with_capacity(batch.len());
    let mut s_rows = Vec::with_capacity(batch.len());
    for c in &chunks {
        loss += c.loss;
        net.add_scaled(&c.net, scale);
        dl_rows.extend(c.dlogits.iter().map(|a| a.view()));
        s_rows.extend(c.sessions.iter().map(|a| a.view()));
    }
    let dl = ndarray::stack(Axis(0), &dl_rows).expect("uniform logit rows");
    let sess = ndarray::stack(Axis(0), &s_rows).expect("uniform session rows");
    let mut beta = dl.t().dot(&sess);
    for c in &chunks {
        for (item, row) in &c.node_rows {
            let mut r = beta.row_mut(*item);
            r += row;
        }
    }
    beta.mapv_inplace(|x| x * scale);
    Ok((loss * scale, ModelParams { beta, net }))
}

/// Rank of each example's label under the model, in example order.
pub fn evaluate_ranks(cfg: &ModelConfig, params: &ModelParams, phi: &Array2<f64>, examples: &[Example]) -> Result<Vec<usize>> {
    let table = phi + &params.beta;
    examples
        .par_iter()
        .map(|ex| {
            let trace = forward(cfg, &params.net, &table, &ex.prefix)?;
            Ok(rank_of_label(trace.logits.as_slice().unwrap(), ex.label))
        })
        .collect()
}

fn run_train(
    train_set: &[Example],
    validation: &[Example],
    phi: &Array2<f64>,
    mut params: ModelParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let mut adam = Adam::new(cfg.adam, &params);
    let mut order: Vec<&Example> = train_set.iter().collect();
    let mut shuffle_rng = rng::stream(cfg.seed, "shuffle");
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut logs = Vec::new();
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_grads(model_cfg, &params, phi, batch)?;
            adam.step(&mut params, &grads);
            loss_sum += loss;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches.max(1) as f64;

        let (val_precision, val_mrr) = if validation.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let ranks = evaluate_ranks(model_cfg, &params, phi, validation)?;
            let rep = metrics_at_k(&ranks, cfg.select_k, Stratum::All)?;
            (rep.precision, rep.mrr)
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, validation P@{k} {val_precision:.4}, MRR@{k} {val_mrr:.4}",
            k = cfg.select_k
        );
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_precision,
            val_mrr,
        });

        if validation.is_empty() {
            continue;
        }
        if best.as_ref().is_none_or(|b| val_precision > b.0) {
            best = Some((val_precision, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("no validation improvement for {stale} epochs; stopping");
                break;
            }
        }
    }

    let updates = adam.steps() as usize;
    Ok(match best {
        Some((_, epoch, p)) => (
            p,
            TrainReport {
                epochs: logs,
                best_epoch: Some(epoch),
                updates,
            },
        ),
        None => (
            params,
            TrainReport {
                epochs: logs,
                best_epoch: None,
                updates,
            },
        ),
    })
}

/// Mini-batch Adam over `train_set`, keeping the parameters with the best
/// validation precision. φ is read-only throughout.
pub fn train(
    train_set: &[Example],
    validation: &[Example],
    phi: &Array2<f64>,
    params: ModelParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyTrain("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if phi.dim() != params.beta.dim() {
        return Err(Error::Shape(format!(
            "embedding table {:?} does not match bias table {:?}",
            phi.dim(),
            params.beta.dim()
        )));
    }
    if cfg.threads == 0 {
        run_train(train_set, validation, phi, params, model_cfg, cfg)
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| run_train(train_set, validation, phi, params, model_cfg, cfg))
    }
}
