//! Per-prefix session graph with row-normalized outgoing and incoming weights.

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SessionGraph {
    /// Distinct items in order of first occurrence.
    pub nodes: Vec<usize>,
    /// Node slot of each prefix position.
    pub alias: Vec<usize>,
    pub raw_out: Array2<f64>,
    pub w_out: Array2<f64>,
    pub w_in: Array2<f64>,
}

impl SessionGraph {
    pub fn build(prefix: &[usize]) -> Result<Self> {
        if prefix.is_empty() {
            return Err(Error::Precondition("session graph needs a non-empty prefix".into()));
        }
        let mut nodes: Vec<usize> = Vec::new();
        let alias: Vec<usize> = prefix
            .iter()
            .map(|&item| match nodes.iter().position(|&n| n == item) {
                Some(slot) => slot,
                None => {
                    nodes.push(item);
                    nodes.len() - 1
                }
            })
            .collect();
        let n = nodes.len();
        let mut raw_out = Array2::<f64>::zeros((n, n));
        for w in alias.windows(2) {
            if w[0] != w[1] {
                raw_out[[w[0], w[1]]] += 1.0;
            }
        }
        let w_out = row_normalize(&raw_out);
        let w_in = row_normalize(&raw_out.t().to_owned());
        Ok(Self {
            nodes,
            alias,
            raw_out,
            w_out,
            w_in,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn seq_len(&self) -> usize {
        self.alias.len()
    }

    /// Slot of the node at the final prefix position.
    pub fn last_slot(&self) -> usize {
        *self.alias.last().expect("non-empty prefix")
    }
}

/// Divides each non-zero row by its sum; zero rows stay zero.
fn row_normalize(counts: &Array2<f64>) -> Array2<f64> {
    let mut out = counts.clone();
    for mut row in out.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|x| x / s);
        }
    }
    out
}
