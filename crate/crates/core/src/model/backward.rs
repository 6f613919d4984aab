use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::forward::{ForwardTrace, ReadoutCache, PROB_FLOOR};
use super::{LossKind, ModelConfig, NetParams};

/// Gradients of one example's loss.
///
/// The bias-table gradient is kept factored: every catalog row receives
/// `dlogits[i] * session` from scoring, and session-graph nodes additionally
/// receive their `node_rows` contribution. φ gets no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub loss: f64,
    pub net: NetParams,
    pub dlogits: Array1<f64>,
    pub session: Array1<f64>,
    pub node_rows: Vec<(usize, Array1<f64>)>,
}

impl Grads {
    /// Dense m × d gradient for the bias table.
    pub fn table_grad(&self) -> Array2<f64> {
        let mut g = outer(self.dlogits.view(), self.session.view());
        for (item, row) in &self.node_rows {
            let mut r = g.row_mut(*item);
            r += row;
        }
        g
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

/// Loss value and its gradient with respect to the logits.
pub(super) fn output_grad(kind: LossKind, logits: &Array1<f64>, probs: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    match kind {
        LossKind::CrossEntropy => {
            let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + logits.mapv(|x| (x - max).exp()).sum().ln();
            let log_p = logits[label] - lse;
            if log_p < PROB_FLOOR.ln() {
                return (-PROB_FLOOR.ln(), Array1::zeros(logits.len()));
            }
            let mut g = probs.clone();
            g[label] -= 1.0;
            (-log_p, g)
        }
        LossKind::CatalogBinary => {
            let p = probs.mapv(|x| x.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR));
            let mut loss = 0.0;
            let dp: Array1<f64> = p
                .iter()
                .enumerate()
                .map(|(i, &pi)| {
                    if i == label {
                        loss -= pi.ln();
                        -1.0 / pi
                    } else {
                        loss -= (1.0 - pi).ln();
                        1.0 / (1.0 - pi)
                    }
                })
                .collect();
            let mean = probs.dot(&dp);
            (loss, probs * &(dp - mean))
        }
    }
}

/// Exact reverse-mode gradients of the loss for one forward trace.
pub fn backward(cfg: &ModelConfig, net: &NetParams, table: &Array2<f64>, trace: &ForwardTrace, label: usize) -> Grads {
    let d = net.dim();
    let sg = &trace.graph;
    let mut g = net.zeros_like();
    let (loss, dlogits) = output_grad(cfg.loss, &trace.logits, &trace.probs, label);
    let dsession = table.t().dot(&dlogits);

    let h_final = trace.states.last().unwrap();
    let mut dh = Array2::<f64>::zeros(h_final.raw_dim());
    match &trace.readout {
        ReadoutCache::Weighted { weights } => {
            for (&slot, &w) in sg.alias.iter().zip(weights) {
                dh.row_mut(slot).scaled_add(w, &dsession);
            }
        }
        ReadoutCache::Sum { pooled } => {
            let proj = net.sum_proj.as_ref().expect("sum readout parameters");
            *g.sum_proj.as_mut().unwrap() += &outer(dsession.view(), pooled.view());
            let dpooled = proj.t().dot(&dsession);
            for &slot in &sg.alias {
                let mut r = dh.row_mut(slot);
                r += &dpooled;
            }
        }
        ReadoutCache::Attention { gate, alpha, global } => {
            let att = net.attention.as_ref().expect("attention parameters");
            let ga = g.attention.as_mut().unwrap();
            let last_slot = sg.last_slot();
            let last = h_final.row(last_slot).to_owned();
            let seq = h_final.select(Axis(0), &sg.alias);

            {
                let mut gl = ga.proj.slice_mut(s![.., ..d]);
                gl += &outer(dsession.view(), last.view());
            }
            {
                let mut gg = ga.proj.slice_mut(s![.., d..]);
                gg += &outer(dsession.view(), global.view());
            }
            let mut dlast = att.proj.slice(s![.., ..d]).t().dot(&dsession);
            let dglobal = att.proj.slice(s![.., d..]).t().dot(&dsession);

            let dalpha = seq.dot(&dglobal);
            let mut dseq = outer(alpha.view(), dglobal.view());
            ga.v += &gate.t().dot(&dalpha);
            let dgate = outer(dalpha.view(), att.v.view());
            let dpre = dgate * &gate.mapv(|u| u * (1.0 - u));
            ga.a_pos += &dpre.t().dot(&seq);
            dseq += &dpre.dot(&att.a_pos);
            let dpre_sum = dpre.sum_axis(Axis(0));
            ga.a_last += &outer(dpre_sum.view(), last.view());
            ga.bias += &dpre_sum;
            dlast += &att.a_last.t().dot(&dpre_sum);

            for (pos, &slot) in sg.alias.iter().enumerate() {
                let mut r = dh.row_mut(slot);
                r += &dseq.row(pos);
            }
            let mut r = dh.row_mut(last_slot);
            r += &dlast;
        }
    }

    for cache in trace.steps.iter().rev() {
        let h = &cache.h_prev;
        let (z, r, cand, msg) = (&cache.z, &cache.r, &cache.cand, &cache.msg);

        let dz = &dh * &(cand - h);
        let dcand = &dh * z;
        let mut dh_prev = &dh * &z.mapv(|v| 1.0 - v);

        let da_h = dcand * &cand.mapv(|c| 1.0 - c * c);
        g.p_h += &da_h.t().dot(msg);
        let mut dmsg = da_h.dot(&net.p_h);
        g.q_h += &da_h.t().dot(&(r * h));
        let drh = da_h.dot(&net.q_h);
        let dr = &drh * h;
        dh_prev += &(&drh * r);

        let da_z = dz * &z.mapv(|v| v * (1.0 - v));
        g.p_z += &da_z.t().dot(msg);
        g.q_z += &da_z.t().dot(h);
        dmsg += &da_z.dot(&net.p_z);
        dh_prev += &da_z.dot(&net.q_z);

        let da_r = dr * &r.mapv(|v| v * (1.0 - v));
        g.p_r += &da_r.t().dot(msg);
        g.q_r += &da_r.t().dot(h);
        dmsg += &da_r.dot(&net.p_r);
        dh_prev += &da_r.dot(&net.q_r);

        g.b_msg += &dmsg.sum_axis(Axis(0));
        dh_prev += &sg.w_out.t().dot(&dmsg.slice(s![.., ..d]));
        dh_prev += &sg.w_in.t().dot(&dmsg.slice(s![.., d..]));
        dh = dh_prev;
    }

    let node_rows = sg.nodes.iter().zip(dh.rows()).map(|(&item, row)| (item, row.to_owned())).collect();
    Grads {
        loss,
        net: g,
        dlogits,
        session: trace.session.clone(),
        node_rows,
    }
}
