//! Transformer masked autoencoder over batches of flow embeddings.
//!
//! A batch concatenates `windows` flow windows of `window_size` embeddings
//! into one sequence. The sequence is projected to a lower-dimensional model
//! space, encoded with multi-head self-attention, and decoded with
//! self-attention plus cross-attention to the encoder outputs; an output
//! projection maps back to the original embedding space. During training a
//! symmetric attention mask isolates a random subset of positions so the
//! model must reconstruct them from the remaining context; masking is
//! disabled at inference. Anomaly scores are squared reconstruction errors
//! in the original embedding space.

use crate::autograd::{Tape, Var};
use crate::config::{MaskScope, PeKind};
use crate::nn::{dropout_mask, small_bias, xavier, Mode};
use crate::{Error, Result};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

const LN_EPS: f64 = 1e-5;

/// A padded sequence of flow embeddings ready for the autoencoder.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// `n × d` with `n = windows × window_size`; padded rows are zero.
    pub embeddings: Array2<f64>,
    /// Marks non-padded positions.
    pub validity: Vec<bool>,
}

impl WindowBatch {
    pub fn n_valid(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }
}

/// Pack a stream of embeddings into window batches in order. The final
/// partial batch is zero-padded; an empty stream yields no batches.
pub fn assemble_windows(
    embeddings: &Array2<f64>,
    window_size: usize,
    windows: usize,
) -> Vec<WindowBatch> {
    assert!(window_size >= 1 && windows >= 1);
    let n = window_size * windows;
    let dim = embeddings.ncols();
    let total = embeddings.nrows();
    let mut out = Vec::new();
    let mut at = 0;
    while at < total {
        let take = (total - at).min(n);
        let mut batch = Array2::zeros((n, dim));
        batch
            .slice_mut(ndarray::s![..take, ..])
            .assign(&embeddings.slice(ndarray::s![at..at + take, ..]));
        let mut validity = vec![true; take];
        validity.resize(n, false);
        out.push(WindowBatch {
            embeddings: batch,
            validity,
        });
        at += take;
    }
    out
}

/// Choose `floor(mask_ratio × n_valid)` distinct valid positions uniformly.
/// Padded positions never consume mask budget.
pub fn sample_attention_mask(
    validity: &[bool],
    mask_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    assert!((0.0..1.0).contains(&mask_ratio), "mask_ratio in [0,1)");
    let valid_positions: Vec<usize> = validity
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| v.then_some(i))
        .collect();
    let count = (mask_ratio * valid_positions.len() as f64).floor() as usize;
    let mut masked = vec![false; validity.len()];
    let picks = rand::seq::index::sample(rng, valid_positions.len(), count);
    for p in picks.iter() {
        masked[valid_positions[p]] = true;
    }
    masked
}

/// Self-attention allowance under the symmetric mask. A masked position is
/// removed as a key for all other queries and removed as a query toward all
/// keys, but every valid query keeps itself as a key so no softmax row is
/// empty. Padded positions are excluded as keys and queries.
pub fn self_attention_allowance(
    validity: &[bool],
    masked: &[bool],
    scope: MaskScope,
) -> Array2<bool> {
    let n = validity.len();
    assert_eq!(masked.len(), n);
    Array2::from_shape_fn((n, n), |(i, j)| {
        if !validity[i] || !validity[j] {
            return false;
        }
        if i == j {
            return true;
        }
        match scope {
            MaskScope::All => !masked[i] && !masked[j],
            MaskScope::MaskedPairs => !(masked[i] && masked[j]),
        }
    })
}

/// Cross-attention allowance: decoder queries are not re-masked, but encoder
/// outputs at masked key positions stay blocked.
pub fn cross_attention_allowance(validity: &[bool], masked: &[bool]) -> Array2<bool> {
    let n = validity.len();
    assert_eq!(masked.len(), n);
    Array2::from_shape_fn((n, n), |(i, j)| validity[i] && validity[j] && !masked[j])
}

/// Positional encoding matrix (ablation surface; the default model runs
/// without one). `none` contributes zeros; `learnable` returns the zero
/// initialization of the trainable matrix.
pub fn positional_encoding(kind: PeKind, length: usize, dim: usize) -> Result<Array2<f64>> {
    match kind {
        PeKind::None | PeKind::Learnable => Ok(Array2::zeros((length, dim))),
        PeKind::Sinusoidal => {
            if dim % 2 != 0 {
                return Err(Error::InvalidConfig(
                    "sinusoidal positional encoding needs an even dimension".into(),
                ));
            }
            let mut pe = Array2::zeros((length, dim));
            for pos in 0..length {
                for i in 0..dim / 2 {
                    let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
                    pe[[pos, 2 * i]] = angle.sin();
                    pe[[pos, 2 * i + 1]] = angle.cos();
                }
            }
            Ok(pe)
        }
    }
}

/// Squared L2 reconstruction error per row, in the original embedding space.
pub fn reconstruction_scores(h: &Array2<f64>, h_hat: &Array2<f64>) -> Vec<f64> {
    assert_eq!(h.dim(), h_hat.dim());
    (0..h.nrows())
        .map(|i| {
            h.row(i)
                .iter()
                .zip(h_hat.row(i).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
}

impl AttnParams {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        AttnParams {
            wq: xavier(rng, d, d),
            bq: Array2::zeros((1, d)),
            wk: xavier(rng, d, d),
            bk: Array2::zeros((1, d)),
            wv: xavier(rng, d, d),
            bv: Array2::zeros((1, d)),
            wo: xavier(rng, d, d),
            bo: Array2::zeros((1, d)),
        }
    }

    fn push_flat<'a>(&'a self, out: &mut Vec<&'a Array2<f64>>) {
        out.extend([&self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo]);
    }

    fn push_flat_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        out.extend([
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]);
    }

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        for n in ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"] {
            out.push(format!("{prefix}.{n}"));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

impl LnParams {
    fn init(d: usize) -> Self {
        LnParams {
            gamma: Array2::ones((1, d)),
            beta: Array2::zeros((1, d)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl FfParams {
    fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FfParams {
            w1: xavier(rng, d, hidden),
            b1: small_bias(rng, hidden),
            w2: xavier(rng, hidden, d),
            b2: Array2::zeros((1, d)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attn: AttnParams,
    pub ln1: LnParams,
    pub ff: FfParams,
    pub ln2: LnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub self_attn: AttnParams,
    pub ln1: LnParams,
    pub cross_attn: AttnParams,
    pub ln2: LnParams,
    pub ff: FfParams,
    pub ln3: LnParams,
}

/// Full autoencoder parameter set. `in_dim` is the embedding space being
/// reconstructed (the GNN output dimension, or the raw feature dimension for
/// the no-GNN ablation).
#[derive(Debug, Clone, PartialEq)]
pub struct MaeParams {
    pub in_w: Array2<f64>,
    pub in_b: Array2<f64>,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub pe_kind: PeKind,
    /// Sinusoidal: fixed table. Learnable: trained parameter. None: absent.
    pub pe: Option<Array2<f64>>,
    pub in_dim: usize,
    pub d_model: usize,
    pub heads: usize,
}

impl MaeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        in_dim: usize,
        d_model: usize,
        num_layers: usize,
        heads: usize,
        ff_factor: usize,
        pe_kind: PeKind,
        seq_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<MaeParams> {
        if d_model % heads != 0 {
            return Err(Error::InvalidConfig("head count must divide embed_dim".into()));
        }
        let ff_hidden = (d_model * ff_factor).max(1);
        let encoder = (0..num_layers)
            .map(|_| EncoderBlock {
                attn: AttnParams::init(d_model, rng),
                ln1: LnParams::init(d_model),
                ff: FfParams::init(d_model, ff_hidden, rng),
                ln2: LnParams::init(d_model),
            })
            .collect();
        let decoder = (0..num_layers)
            .map(|_| DecoderBlock {
                self_attn: AttnParams::init(d_model, rng),
                ln1: LnParams::init(d_model),
                cross_attn: AttnParams::init(d_model, rng),
                ln2: LnParams::init(d_model),
                ff: FfParams::init(d_model, ff_hidden, rng),
                ln3: LnParams::init(d_model),
            })
            .collect();
        let pe = match pe_kind {
            PeKind::None => None,
            _ => Some(positional_encoding(pe_kind, seq_len, d_model)?),
        };
        Ok(MaeParams {
            in_w: xavier(rng, in_dim, d_model),
            in_b: Array2::zeros((1, d_model)),
            encoder,
            decoder,
            out_w: xavier(rng, d_model, in_dim),
            out_b: Array2::zeros((1, in_dim)),
            pe_kind,
            pe,
            in_dim,
            d_model,
            heads,
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["mae.in.w".into(), "mae.in.b".into()];
        for (k, blk) in self.encoder.iter().enumerate() {
            blk.attn.push_names(&format!("mae.enc{k}.attn"), &mut out);
            out.push(format!("mae.enc{k}.ln1.gamma"));
            out.push(format!("mae.enc{k}.ln1.beta"));
            out.push(format!("mae.enc{k}.ff.w1"));
            out.push(format!("mae.enc{k}.ff.b1"));
            out.push(format!("mae.enc{k}.ff.w2"));
            out.push(format!("mae.enc{k}.ff.b2"));
            out.push(format!("mae.enc{k}.ln2.gamma"));
            out.push(format!("mae.enc{k}.ln2.beta"));
        }
        for (k, blk) in self.decoder.iter().enumerate() {
            blk.self_attn.push_names(&format!("mae.dec{k}.self"), &mut out);
            out.push(format!("mae.dec{k}.ln1.gamma"));
            out.push(format!("mae.dec{k}.ln1.beta"));
            blk.cross_attn.push_names(&format!("mae.dec{k}.cross"), &mut out);
            out.push(format!("mae.dec{k}.ln2.gamma"));
            out.push(format!("mae.dec{k}.ln2.beta"));
            out.push(format!("mae.dec{k}.ff.w1"));
            out.push(format!("mae.dec{k}.ff.b1"));
            out.push(format!("mae.dec{k}.ff.w2"));
            out.push(format!("mae.dec{k}.ff.b2"));
            out.push(format!("mae.dec{k}.ln3.gamma"));
            out.push(format!("mae.dec{k}.ln3.beta"));
        }
        out.push("mae.out.w".into());
        out.push("mae.out.b".into());
        if matches!(self.pe_kind, PeKind::Learnable) {
            out.push("mae.pe".into());
        }
        out
    }

    pub fn flat(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = vec![&self.in_w, &self.in_b];
        for blk in &self.encoder {
            blk.attn.push_flat(&mut out);
            out.extend([&blk.ln1.gamma, &blk.ln1.beta]);
            out.extend([&blk.ff.w1, &blk.ff.b1, &blk.ff.w2, &blk.ff.b2]);
            out.extend([&blk.ln2.gamma, &blk.ln2.beta]);
        }
        for blk in &self.decoder {
            blk.self_attn.push_flat(&mut out);
            out.extend([&blk.ln1.gamma, &blk.ln1.beta]);
            blk.cross_attn.push_flat(&mut out);
            out.extend([&blk.ln2.gamma, &blk.ln2.beta]);
            out.extend([&blk.ff.w1, &blk.ff.b1, &blk.ff.w2, &blk.ff.b2]);
            out.extend([&blk.ln3.gamma, &blk.ln3.beta]);
        }
        out.extend([&self.out_w, &self.out_b]);
        if matches!(self.pe_kind, PeKind::Learnable) {
            out.push(self.pe.as_ref().expect("learnable pe present"));
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.in_w, &mut self.in_b];
        for blk in &mut self.encoder {
            blk.attn.push_flat_mut(&mut out);
            out.extend([&mut blk.ln1.gamma, &mut blk.ln1.beta]);
            out.extend([&mut blk.ff.w1, &mut blk.ff.b1, &mut blk.ff.w2, &mut blk.ff.b2]);
            out.extend([&mut blk.ln2.gamma, &mut blk.ln2.beta]);
        }
        for blk in &mut self.decoder {
            blk.self_attn.push_flat_mut(&mut out);
            out.extend([&mut blk.ln1.gamma, &mut blk.ln1.beta]);
            blk.cross_attn.push_flat_mut(&mut out);
            out.extend([&mut blk.ln2.gamma, &mut blk.ln2.beta]);
            out.extend([&mut blk.ff.w1, &mut blk.ff.b1, &mut blk.ff.w2, &mut blk.ff.b2]);
            out.extend([&mut blk.ln3.gamma, &mut blk.ln3.beta]);
        }
        out.extend([&mut self.out_w, &mut self.out_b]);
        if matches!(self.pe_kind, PeKind::Learnable) {
            out.push(self.pe.as_mut().expect("learnable pe present"));
        }
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

    pub fn stage(&self, tape: &mut Tape) -> MaeVars {
        let stage_attn = |tape: &mut Tape, a: &AttnParams| AttnVars {
            wq: tape.leaf(a.wq.clone()),
            bq: tape.leaf(a.bq.clone()),
            wk: tape.leaf(a.wk.clone()),
            bk: tape.leaf(a.bk.clone()),
            wv: tape.leaf(a.wv.clone()),
            bv: tape.leaf(a.bv.clone()),
            wo: tape.leaf(a.wo.clone()),
            bo: tape.leaf(a.bo.clone()),
        };
        let stage_ln = |tape: &mut Tape, l: &LnParams| LnVars {
            gamma: tape.leaf(l.gamma.clone()),
            beta: tape.leaf(l.beta.clone()),
        };
        let stage_ff = |tape: &mut Tape, f: &FfParams| FfVars {
            w1: tape.leaf(f.w1.clone()),
            b1: tape.leaf(f.b1.clone()),
            w2: tape.leaf(f.w2.clone()),
            b2: tape.leaf(f.b2.clone()),
        };
        MaeVars {
            in_w: tape.leaf(self.in_w.clone()),
            in_b: tape.leaf(self.in_b.clone()),
            encoder: self
                .encoder
                .iter()
                .map(|b| EncoderVars {
                    attn: stage_attn(tape, &b.attn),
                    ln1: stage_ln(tape, &b.ln1),
                    ff: stage_ff(tape, &b.ff),
                    ln2: stage_ln(tape, &b.ln2),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|b| DecoderVars {
                    self_attn: stage_attn(tape, &b.self_attn),
                    ln1: stage_ln(tape, &b.ln1),
                    cross_attn: stage_attn(tape, &b.cross_attn),
                    ln2: stage_ln(tape, &b.ln2),
                    ff: stage_ff(tape, &b.ff),
                    ln3: stage_ln(tape, &b.ln3),
                })
                .collect(),
            out_w: tape.leaf(self.out_w.clone()),
            out_b: tape.leaf(self.out_b.clone()),
            pe: match self.pe_kind {
                PeKind::None => None,
                _ => Some(tape.leaf(self.pe.as_ref().expect("pe present").clone())),
            },
        }
    }

    /// Forward pass: `input` is the `n × in_dim` window batch on the tape.
    /// Returns the `n × in_dim` reconstruction node.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &MaeVars,
        input: Var,
        masks: &AttentionMasks,
        mode: Mode,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let (n, d_in) = tape.value(input).dim();
        if d_in != self.in_dim {
            return Err(Error::dim("autoencoder input", self.in_dim, d_in));
        }
        if masks.self_allow.dim() != (n, n) {
            return Err(Error::dim("attention mask", n, masks.self_allow.nrows()));
        }
        if let Some(pe) = &self.pe {
            if pe.nrows() != n {
                return Err(Error::dim("positional encoding length", n, pe.nrows()));
            }
        }

        let mut drop = |tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng| -> Var {
            if mode.is_train() && dropout > 0.0 {
                let (r, c) = tape.value(x).dim();
                let mask = dropout_mask(rng, r, c, dropout);
                tape.mul_const(x, Rc::new(mask))
            } else {
                x
            }
        };

        // shared projected sequence: encoder input and decoder queries
        let mut p = tape.matmul(input, vars.in_w);
        p = tape.add_row(p, vars.in_b);
        if let Some(pe) = vars.pe {
            p = tape.add(p, pe);
        }

        let mut enc = p;
        for blk in &vars.encoder {
            let attn = attention(tape, enc, enc, &blk.attn, &masks.self_allow, self.heads);
            let attn = drop(tape, attn, rng);
            let sum = tape.add(enc, attn);
            enc = tape.layer_norm(sum, blk.ln1.gamma, blk.ln1.beta, LN_EPS);
            let ff = feed_forward(tape, enc, &blk.ff);
            let ff = drop(tape, ff, rng);
            let sum = tape.add(enc, ff);
            enc = tape.layer_norm(sum, blk.ln2.gamma, blk.ln2.beta, LN_EPS);
        }

        let mut dec = p;
        for blk in &vars.decoder {
            let self_attn = attention(tape, dec, dec, &blk.self_attn, &masks.self_allow, self.heads);
            let self_attn = drop(tape, self_attn, rng);
            let sum = tape.add(dec, self_attn);
            dec = tape.layer_norm(sum, blk.ln1.gamma, blk.ln1.beta, LN_EPS);
            let cross = attention(tape, dec, enc, &blk.cross_attn, &masks.cross_allow, self.heads);
            let cross = drop(tape, cross, rng);
            let sum = tape.add(dec, cross);
            dec = tape.layer_norm(sum, blk.ln2.gamma, blk.ln2.beta, LN_EPS);
            let ff = feed_forward(tape, dec, &blk.ff);
            let ff = drop(tape, ff, rng);
            let sum = tape.add(dec, ff);
            dec = tape.layer_norm(sum, blk.ln3.gamma, blk.ln3.beta, LN_EPS);
        }

        let out = tape.matmul(dec, vars.out_w);
        Ok(tape.add_row(out, vars.out_b))
    }

    /// Eval-mode reconstruction of one window batch (no masking, no dropout).
    /// Scores cover valid positions in order.
    pub fn reconstruct(&self, batch: &WindowBatch) -> Result<Reconstruction> {
        let masks = AttentionMasks::eval(&batch.validity);
        let mut tape = Tape::new();
        let vars = self.stage(&mut tape);
        let input = tape.leaf(batch.embeddings.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &vars, input, &masks, Mode::Eval, 0.0, &mut rng)?;
        let h_hat = tape.value(out).clone();
        let all = reconstruction_scores(&batch.embeddings, &h_hat);
        let scores = batch
            .validity
            .iter()
            .zip(all)
            .filter_map(|(&v, s)| v.then_some(s))
            .collect();
        Ok(Reconstruction { h_hat, scores })
    }
}

/// Reconstructed embeddings plus per-valid-flow anomaly scores.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub h_hat: Array2<f64>,
    /// One score per valid position, in sequence order.
    pub scores: Vec<f64>,
}

/// Pair of allowance matrices driving one forward pass.
pub struct AttentionMasks {
    pub self_allow: Rc<Array2<bool>>,
    pub cross_allow: Rc<Array2<bool>>,
}

impl AttentionMasks {
    pub fn new(validity: &[bool], masked: &[bool], scope: MaskScope) -> Self {
        AttentionMasks {
            self_allow: Rc::new(self_attention_allowance(validity, masked, scope)),
            cross_allow: Rc::new(cross_attention_allowance(validity, masked)),
        }
    }

    /// Mask-free allowances for inference.
    pub fn eval(validity: &[bool]) -> Self {
        let none = vec![false; validity.len()];
        Self::new(validity, &none, MaskScope::All)
    }
}

fn attention(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    p: &AttnVars,
    allow: &Rc<Array2<bool>>,
    heads: usize,
) -> Var {
    let q = tape.matmul(x_q, p.wq);
    let q = tape.add_row(q, p.bq);
    let k = tape.matmul(x_kv, p.wk);
    let k = tape.add_row(k, p.bk);
    let v = tape.matmul(x_kv, p.wv);
    let v = tape.add_row(v, p.bv);
    let d_model = tape.value(q).ncols();
    let dk = d_model / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let weights = tape.masked_softmax(scores, allow.clone());
        outs.push(tape.matmul(weights, vh));
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    let o = tape.matmul(cat, p.wo);
    tape.add_row(o, p.bo)
}

fn feed_forward(tape: &mut Tape, x: Var, p: &FfVars) -> Var {
    let h = tape.matmul(x, p.w1);
    let h = tape.add_row(h, p.b1);
    let h = tape.relu(h);
    let o = tape.matmul(h, p.w2);
    tape.add_row(o, p.b2)
}

/// Per-row squared L2 distance between two tape nodes → `n × 1` scores node.
pub fn scores_on_tape(tape: &mut Tape, h: Var, h_hat: Var) -> Var {
    let diff = tape.sub(h, h_hat);
    let sq = tape.mul(diff, diff);
    tape.row_sums(sq)
}

/// Mean of the scores over valid positions (the training objective).
pub fn masked_mean_loss(tape: &mut Tape, scores: Var, validity: &[bool]) -> Result<Var> {
    let n_valid = validity.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::EmptyInput("loss over a batch with no valid positions".into()));
    }
    let weights: Vec<f64> = validity.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    Ok(tape.weighted_mean(scores, Rc::new(weights), n_valid as f64))
}

#[derive(Debug, Clone)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttnVars {
    fn push_flat(&self, out: &mut Vec<Var>) {
        out.extend([self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]);
    }
}

#[derive(Debug, Clone)]
pub struct LnVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone)]
pub struct FfVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub attn: AttnVars,
    pub ln1: LnVars,
    pub ff: FfVars,
    pub ln2: LnVars,
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub self_attn: AttnVars,
    pub ln1: LnVars,
    pub cross_attn: AttnVars,
    pub ln2: LnVars,
    pub ff: FfVars,
    pub ln3: LnVars,
}

#[derive(Debug, Clone)]
pub struct MaeVars {
    pub in_w: Var,
    pub in_b: Var,
    pub encoder: Vec<EncoderVars>,
    pub decoder: Vec<DecoderVars>,
    pub out_w: Var,
    pub out_b: Var,
    pub pe: Option<Var>,
}

impl MaeVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.in_w, self.in_b];
        for b in &self.encoder {
            b.attn.push_flat(&mut out);
            out.extend([b.ln1.gamma, b.ln1.beta]);
            out.extend([b.ff.w1, b.ff.b1, b.ff.w2, b.ff.b2]);
            out.extend([b.ln2.gamma, b.ln2.beta]);
        }
        for b in &self.decoder {
            b.self_attn.push_flat(&mut out);
            out.extend([b.ln1.gamma, b.ln1.beta]);
            b.cross_attn.push_flat(&mut out);
            out.extend([b.ln2.gamma, b.ln2.beta]);
            out.extend([b.ff.w1, b.ff.b1, b.ff.w2, b.ff.b2]);
            out.extend([b.ln3.gamma, b.ln3.beta]);
        }
        out.extend([self.out_w, self.out_b]);
        if let Some(pe) = self.pe {
            out.push(pe);
        }
        out
    }
}
