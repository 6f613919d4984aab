//! The supervised session model: node states initialised from frozen item
//! embeddings plus a learnable per-item bias, gated message passing over the
//! session graph, a readout to one session vector, and full-catalog scoring
//! against the same initial item representations.

mod backward;
mod checkpoint;
mod forward;
mod train;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;

use crate::embedding::{gaussian_matrix, INIT_STD};
use crate::error::{Error, Result};
use crate::rng;

pub use backward::{backward, Grads};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    forward, init_node_states, loss, message_pass_step, readout, score, softmax, ForwardTrace, ReadoutCache,
    StepCache,
};
pub use train::{evaluate_ranks, train, Adam, AdamConfig, EpochLog, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReadoutKind {
    ExpDecay,
    Last,
    Mean,
    Sum,
    Attention,
}

impl ReadoutKind {
    pub const ALL: [ReadoutKind; 5] = [
        ReadoutKind::ExpDecay,
        ReadoutKind::Last,
        ReadoutKind::Mean,
        ReadoutKind::Sum,
        ReadoutKind::Attention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReadoutKind::ExpDecay => "exp_decay",
            ReadoutKind::Last => "last",
            ReadoutKind::Mean => "mean",
            ReadoutKind::Sum => "sum",
            ReadoutKind::Attention => "attention",
        }
    }
}

impl std::str::FromStr for ReadoutKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ReadoutKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown readout `{s}`")))
    }
}

impl std::fmt::Display for ReadoutKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadoutConfig {
    pub kind: ReadoutKind,
    /// Temperature of the exponential decay over positions.
    pub tau: f64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self {
            kind: ReadoutKind::ExpDecay,
            tau: 1.0,
        }
    }
}

/// Training objective on the output distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `-log ŷ[label]`.
    CrossEntropy,
    /// `-Σ_i y_i log ŷ_i + (1 - y_i) log(1 - ŷ_i)` over the whole catalog.
    CatalogBinary,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::CatalogBinary => "catalog_binary",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "catalog_binary" => Ok(LossKind::CatalogBinary),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    /// Message-passing steps.
    pub steps: usize,
    pub readout: ReadoutConfig,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            steps: 1,
            readout: ReadoutConfig::default(),
            loss: LossKind::CrossEntropy,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dimension must be >= 1".into()));
        }
        if self.readout.kind == ReadoutKind::ExpDecay && (self.readout.tau.is_nan() || self.readout.tau <= 0.0) {
            return Err(Error::Config("tau must be positive for the exp_decay readout".into()));
        }
        Ok(())
    }
}

/// Soft-attention readout parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Applied to the last node state inside the gate.
    pub a_last: Array2<f64>,
    /// Applied to each position's state inside the gate.
    pub a_pos: Array2<f64>,
    pub bias: Array1<f64>,
    pub v: Array1<f64>,
    /// d × 2d projection of `[h_last; Σ α h]`.
    pub proj: Array2<f64>,
}

/// Everything learnable except the item bias table.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    /// d × 2d maps from the message.
    pub p_z: Array2<f64>,
    pub p_r: Array2<f64>,
    pub p_h: Array2<f64>,
    /// d × d maps from the node state.
    pub q_z: Array2<f64>,
    pub q_r: Array2<f64>,
    pub q_h: Array2<f64>,
    pub b_msg: Array1<f64>,
    /// d × d map after sum pooling, present only for the sum readout.
    pub sum_proj: Option<Array2<f64>>,
    pub attention: Option<AttentionParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Learnable per-item bias β, m × d.
    pub beta: Array2<f64>,
    pub net: NetParams,
}

impl NetParams {
    pub fn init<R: Rng + ?Sized>(d: usize, readout: ReadoutKind, rng: &mut R) -> Self {
        let mut mat = |r: usize, c: usize| gaussian_matrix(r, c, INIT_STD, rng);
        let p_z = mat(d, 2 * d);
        let p_r = mat(d, 2 * d);
        let p_h = mat(d, 2 * d);
        let q_z = mat(d, d);
        let q_r = mat(d, d);
        let q_h = mat(d, d);
        let b_msg = mat(1, 2 * d).into_shape_with_order(2 * d).unwrap();
        let sum_proj = (readout == ReadoutKind::Sum).then(|| mat(d, d));
        let attention = (readout == ReadoutKind::Attention).then(|| AttentionParams {
            a_last: mat(d, d),
            a_pos: mat(d, d),
            bias: mat(1, d).into_shape_with_order(d).unwrap(),
            v: mat(1, d).into_shape_with_order(d).unwrap(),
            proj: mat(d, 2 * d),
        });
        Self {
            p_z,
            p_r,
            p_h,
            q_z,
            q_r,
            q_h,
            b_msg,
            sum_proj,
            attention,
        }
    }

    pub fn dim(&self) -> usize {
        self.q_z.nrows()
    }

    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        let mut v = vec![
            ("p_z", self.p_z.view().into_dyn()),
            ("p_r", self.p_r.view().into_dyn()),
            ("p_h", self.p_h.view().into_dyn()),
            ("q_z", self.q_z.view().into_dyn()),
            ("q_r", self.q_r.view().into_dyn()),
            ("q_h", self.q_h.view().into_dyn()),
            ("b_msg", self.b_msg.view().into_dyn()),
        ];
        if let Some(s) = &self.sum_proj {
            v.push(("sum_proj", s.view().into_dyn()));
        }
        if let Some(a) = &self.attention {
            v.extend([
                ("att_a_last", a.a_last.view().into_dyn()),
                ("att_a_pos", a.a_pos.view().into_dyn()),
                ("att_bias", a.bias.view().into_dyn()),
                ("att_v", a.v.view().into_dyn()),
                ("att_proj", a.proj.view().into_dyn()),
            ]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        let mut v = vec![
            ("p_z", self.p_z.view_mut().into_dyn()),
            ("p_r", self.p_r.view_mut().into_dyn()),
            ("p_h", self.p_h.view_mut().into_dyn()),
            ("q_z", self.q_z.view_mut().into_dyn()),
            ("q_r", self.q_r.view_mut().into_dyn()),
            ("q_h", self.q_h.view_mut().into_dyn()),
            ("b_msg", self.b_msg.view_mut().into_dyn()),
        ];
        if let Some(s) = &mut self.sum_proj {
            v.push(("sum_proj", s.view_mut().into_dyn()));
        }
        if let Some(a) = &mut self.attention {
            v.extend([
                ("att_a_last", a.a_last.view_mut().into_dyn()),
                ("att_a_pos", a.a_pos.view_mut().into_dyn()),
                ("att_bias", a.bias.view_mut().into_dyn()),
                ("att_v", a.v.view_mut().into_dyn()),
                ("att_proj", a.proj.view_mut().into_dyn()),
            ]);
        }
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &NetParams, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(&mut a).and(&b).for_each(|x, &y| *x += scale * y);
        }
    }
}

impl ModelParams {
    /// β and every network tensor drawn from N(0, 0.1²).
    pub fn init(m: usize, cfg: &ModelConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "model-init");
        let beta = gaussian_matrix(m, cfg.dim, INIT_STD, &mut r);
        let net = NetParams::init(cfg.dim, cfg.readout.kind, &mut r);
        Self { beta, net }
    }

    pub fn m(&self) -> usize {
        self.beta.nrows()
    }

    pub fn dim(&self) -> usize {
        self.beta.ncols()
    }

    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, f64>)> {
        let mut v = vec![("beta", self.beta.view().into_dyn())];
        v.extend(self.net.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)> {
        let mut v = vec![("beta", self.beta.view_mut().into_dyn())];
        v.extend(self.net.tensors_mut());
        v
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// A trained model ready for scoring: frozen item embeddings φ plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionModel {
    pub config: ModelConfig,
    pub phi: Array2<f64>,
    pub params: ModelParams,
}

impl SessionModel {
    pub fn new(config: ModelConfig, phi: Array2<f64>, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if phi.dim() != params.beta.dim() {
            return Err(Error::Shape(format!(
                "embedding table is {:?} but the bias table is {:?}",
                phi.dim(),
                params.beta.dim()
            )));
        }
        if phi.ncols() != config.dim {
            return Err(Error::Shape(format!(
                "embedding dimension {} differs from model dimension {}",
                phi.ncols(),
                config.dim
            )));
        }
        Ok(Self { config, phi, params })
    }

    pub fn m(&self) -> usize {
        self.phi.nrows()
    }

    /// h⁽⁰⁾ for the whole catalog: φ + β.
    pub fn item_table(&self) -> Array2<f64> {
        &self.phi + &self.params.beta
    }

    pub fn logits(&self, prefix: &[usize]) -> Result<Array1<f64>> {
        let table = self.item_table();
        Ok(forward(&self.config, &self.params.net, &table, prefix)?.logits)
    }

    /// Top-`k` items by logit; ties go to the lower index.
    pub fn recommend(&self, prefix: &[usize], k: usize) -> Result<Vec<(usize, f64)>> {
        let m = self.m();
        if k == 0 || k > m {
            return Err(Error::Precondition(format!("k must lie in 1..={m}, got {k}")));
        }
        if let Some(&bad) = prefix.iter().find(|&&i| i >= m) {
            return Err(Error::Precondition(format!("item index {bad} outside catalog of {m}")));
        }
        let logits = self.logits(prefix)?;
        Ok(top_k(logits.as_slice().unwrap(), k))
    }
}

/// Indices of the `k` largest scores, descending, ties by ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.into_iter().map(|i| (i, scores[i])).collect()
}

#[cfg(test)]
mod tests;
