//! Edge-embedding GNN encoder.
//!
//! Message passing over sampled neighborhoods with mean aggregation of
//! concat(neighbor state, edge features); node states start as all-ones
//! vectors since the datasets carry edge features only. After the last layer
//! an edge's embedding is the concatenation of its endpoint states passed
//! through a learned linear map to the output dimension.

use crate::autograd::{Grads, Tape, Var};
use crate::graph::EdgeBatch;
use crate::nn::{all_finite, dropout_mask, small_bias, xavier, Mode};
use crate::{Error, Result};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// One message-passing layer: maps concat(state, mean message) to the next
/// state width.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnLayer {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub layers: Vec<GnnLayer>,
    /// concat(src state, dst state) → edge embedding.
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub edge_dim: usize,
    /// State widths per depth: `[edge_dim, hidden, hidden, ...]`.
    pub state_dims: Vec<usize>,
    pub out_dim: usize,
}

impl GnnParams {
    pub fn init(
        edge_dim: usize,
        hidden: usize,
        out_dim: usize,
        hops: usize,
        rng: &mut ChaCha8Rng,
    ) -> GnnParams {
        assert!(hops >= 1 && edge_dim >= 1 && hidden >= 1 && out_dim >= 1);
        let mut state_dims = vec![edge_dim];
        state_dims.extend(std::iter::repeat(hidden).take(hops));
        let mut layers = Vec::with_capacity(hops);
        for k in 0..hops {
            let in_dim = 2 * state_dims[k] + edge_dim;
            layers.push(GnnLayer {
                w: xavier(rng, in_dim, state_dims[k + 1]),
                b: small_bias(rng, state_dims[k + 1]),
            });
        }
        let out_w = xavier(rng, 2 * hidden, out_dim);
        GnnParams {
            layers,
            out_w,
            out_b: Array2::zeros((1, out_dim)),
            edge_dim,
            state_dims,
            out_dim,
        }
    }

    pub fn hops(&self) -> usize {
        self.layers.len()
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in 0..self.layers.len() {
            out.push(format!("gnn.layer{k}.w"));
            out.push(format!("gnn.layer{k}.b"));
        }
        out.push("gnn.out.w".into());
        out.push("gnn.out.b".into());
        out
    }

    pub fn flat(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.out_w);
        out.push(&self.out_b);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn load_flat(&mut self, tensors: &[Array2<f64>]) {
        let mut slots = self.flat_mut();
        assert_eq!(slots.len(), tensors.len(), "parameter count mismatch");
        for (slot, t) in slots.iter_mut().zip(tensors) {
            assert_eq!(slot.dim(), t.dim(), "parameter shape mismatch");
            (*slot).assign(t);
        }
    }

    /// Register every parameter as a tape leaf.
    pub fn stage(&self, tape: &mut Tape) -> GnnVars {
        GnnVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
                .collect(),
            out_w: tape.leaf(self.out_w.clone()),
            out_b: tape.leaf(self.out_b.clone()),
        }
    }

    /// Forward pass over a sampled edge batch; returns the `targets × out_dim`
    /// embedding node on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &GnnVars,
        batch: &EdgeBatch,
        mode: Mode,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if batch.features.ncols() != self.edge_dim {
            return Err(Error::dim("gnn forward", self.edge_dim, batch.features.ncols()));
        }
        if !all_finite(&batch.features) {
            return Err(Error::NonFinite("edge features entering the encoder".into()));
        }
        let n_nodes = batch.n_nodes();

        // Incidence item lists shared by every layer: one row per sampled
        // (node, incident edge) pair.
        let mut item_other = Vec::new();
        let mut item_edge = Vec::new();
        let mut item_owner = Vec::new();
        for (v, adj) in batch.sampled_adjacency.iter().enumerate() {
            for a in adj {
                item_owner.push(v);
                item_edge.push(a.sub_edge);
                item_other.push(a.other);
            }
        }
        let item_other = Rc::new(item_other);
        let item_edge = Rc::new(item_edge);
        let item_owner = Rc::new(item_owner);

        let edge_feats = tape.leaf(batch.features.clone());
        let mut states = tape.leaf(init_node_states(n_nodes, self.edge_dim));
        for (k, (w, b)) in vars.layers.iter().enumerate() {
            let neigh_states = tape.gather_rows(states, item_other.clone());
            let neigh_edges = tape.gather_rows(edge_feats, item_edge.clone());
            let items = tape.concat_cols(&[neigh_states, neigh_edges]);
            // nodes without sampled incident edges receive a zero message
            let message = tape.scatter_mean(items, item_owner.clone(), n_nodes);
            let self_and_message = tape.concat_cols(&[states, message]);
            let z = tape.matmul(self_and_message, *w);
            let z = tape.add_row(z, *b);
            states = tape.relu(z);
            if mode.is_train() && dropout > 0.0 {
                let mask = dropout_mask(rng, n_nodes, self.state_dims[k + 1], dropout);
                states = tape.mul_const(states, Rc::new(mask));
            }
        }

        let src_locals: Vec<usize> = batch
            .target_local
            .iter()
            .map(|&t| batch.sub_edges[t].src)
            .collect();
        let dst_locals: Vec<usize> = batch
            .target_local
            .iter()
            .map(|&t| batch.sub_edges[t].dst)
            .collect();
        let src_states = tape.gather_rows(states, Rc::new(src_locals));
        let dst_states = tape.gather_rows(states, Rc::new(dst_locals));
        let pair = tape.concat_cols(&[src_states, dst_states]);
        let projected = tape.matmul(pair, vars.out_w);
        Ok(tape.add_row(projected, vars.out_b))
    }

    /// Parameter gradients of the embeddings contracted with an upstream
    /// gradient (one forward + one reverse sweep on a private tape).
    pub fn grad(
        &self,
        batch: &EdgeBatch,
        upstream: &Array2<f64>,
        mode: Mode,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Array2<f64>>> {
        let mut tape = Tape::new();
        let vars = self.stage(&mut tape);
        let h = self.forward(&mut tape, &vars, batch, mode, dropout, rng)?;
        if upstream.dim() != tape.value(h).dim() {
            return Err(Error::dim("gnn grad upstream", tape.value(h).len(), upstream.len()));
        }
        let grads = tape.backward_with(h, upstream.clone());
        Ok(collect_grads(&tape, &grads, &vars.flat()))
    }
}

/// Constant all-ones initial node states.
pub fn init_node_states(n_nodes: usize, dim: usize) -> Array2<f64> {
    Array2::ones((n_nodes, dim))
}

pub(crate) fn collect_grads(tape: &Tape, grads: &Grads, vars: &[Var]) -> Vec<Array2<f64>> {
    vars.iter().map(|&v| grads.get_or_zeros(tape, v)).collect()
}

#[derive(Debug, Clone)]
pub struct GnnVars {
    pub layers: Vec<(Var, Var)>,
    pub out_w: Var,
    pub out_b: Var,
}

impl GnnVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.out_w);
        out.push(self.out_b);
        out
    }
}
