//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients into the leaves. One tape is
//! built per optimization step and dropped afterwards. Everything is
//! `Array2<f64>`: row vectors are `1×m`, scalars are `1×1`.

pub mod check;

use ndarray::{Array2, Axis};
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// C = A · B
    MatMul { a: Var, b: Var },
    /// C = A · Bᵀ
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// A (n×m) + broadcast row (1×m)
    AddRow { a: Var, row: Var },
    Sub { a: Var, b: Var },
    /// Elementwise product.
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, lo: usize },
    /// out[i] = a[idx[i]]
    GatherRows { a: Var, idx: Rc<Vec<usize>> },
    /// out[s] = mean of rows i with seg[i] == s, zero when the segment is empty.
    ScatterMean {
        a: Var,
        seg: Rc<Vec<usize>>,
        counts: Rc<Vec<usize>>,
    },
    /// Row-wise softmax restricted to `allow`; fully-blocked rows yield zeros.
    MaskedSoftmax { a: Var, allow: Rc<Array2<bool>> },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    /// Elementwise product with a constant matrix (dropout masks).
    MulConst { a: Var, k: Rc<Array2<f64>> },
    /// n×m → n×1 row sums.
    RowSums { a: Var },
    /// Σ w_i · a[i,0] / denom → 1×1.
    WeightedMean { a: Var, w: Rc<Vec<f64>>, denom: f64 },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.g[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of its shape when it never received one.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Array2<f64> {
        match self.g[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.value(v).raw_dim()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul { a, b })
    }

    /// A · Bᵀ without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNT { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add { a, b })
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×m row");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow { a, row })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu { a })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let m: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut value = Array2::zeros((n, m));
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.nrows(), n, "concat_cols row mismatch");
            value
                .slice_mut(ndarray::s![.., at..at + v.ncols()])
                .assign(v);
            at += v.ncols();
        }
        self.push(value, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).ncols();
        let n: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut value = Array2::zeros((n, m));
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.ncols(), m, "concat_rows col mismatch");
            value
                .slice_mut(ndarray::s![at..at + v.nrows(), ..])
                .assign(v);
            at += v.nrows();
        }
        self.push(value, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let value = self.value(a).slice(ndarray::s![.., lo..hi]).to_owned();
        self.push(value, Op::SliceCols { a, lo })
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((idx.len(), src.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            value.row_mut(i).assign(&src.row(j));
        }
        self.push(value, Op::GatherRows { a, idx })
    }

    /// Segment mean: rows of `a` grouped by `seg` into `n_out` segments.
    /// Empty segments produce zero rows.
    pub fn scatter_mean(&mut self, a: Var, seg: Rc<Vec<usize>>, n_out: usize) -> Var {
        let src = self.value(a);
        assert_eq!(seg.len(), src.nrows(), "scatter_mean segment count");
        let mut value = Array2::zeros((n_out, src.ncols()));
        let mut counts = vec![0usize; n_out];
        for (i, &s) in seg.iter().enumerate() {
            value.row_mut(s).scaled_add(1.0, &src.row(i));
            counts[s] += 1;
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                value.row_mut(s).mapv_inplace(|x| x / c as f64);
            }
        }
        self.push(
            value,
            Op::ScatterMean {
                a,
                seg,
                counts: Rc::new(counts),
            },
        )
    }

    pub fn masked_softmax(&mut self, a: Var, allow: Rc<Array2<bool>>) -> Var {
        let src = self.value(a);
        assert_eq!(src.dim(), allow.dim(), "mask shape");
        let (n, m) = src.dim();
        let mut value = Array2::zeros((n, m));
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if allow[[i, j]] {
                    max = max.max(src[[i, j]]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully blocked row stays zero
            }
            let mut sum = 0.0;
            for j in 0..m {
                if allow[[i, j]] {
                    let e = (src[[i, j]] - max).exp();
                    value[[i, j]] = e;
                    sum += e;
                }
            }
            for j in 0..m {
                value[[i, j]] /= sum;
            }
        }
        self.push(value, Op::MaskedSoftmax { a, allow })
    }

    /// Row-wise layer normalization with learned scale and shift (1×m each).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        assert_eq!(self.value(gamma).dim(), (1, m), "layer_norm gamma shape");
        assert_eq!(self.value(beta).dim(), (1, m), "layer_norm beta shape");
        let mut xhat = Array2::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mu = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..m {
                xhat[[i, j]] = (x[[i, j]] - mu) * istd;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn mul_const(&mut self, a: Var, k: Rc<Array2<f64>>) -> Var {
        let value = self.value(a) * &*k;
        self.push(value, Op::MulConst { a, k })
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let sums = src.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(sums, Op::RowSums { a })
    }

    /// Weighted mean of an n×1 column: Σ wᵢ·aᵢ / denom.
    pub fn weighted_mean(&mut self, a: Var, w: Rc<Vec<f64>>, denom: f64) -> Var {
        let src = self.value(a);
        assert_eq!(src.ncols(), 1, "weighted_mean expects a column");
        assert_eq!(src.nrows(), w.len(), "weighted_mean weight count");
        assert!(denom != 0.0, "weighted_mean zero denominator");
        let total: f64 = src
            .column(0)
            .iter()
            .zip(w.iter())
            .map(|(a, w)| a * w)
            .sum();
        let value = Array2::from_elem((1, 1), total / denom);
        self.push(value, Op::WeightedMean { a, w, denom })
    }

    /// Backward pass from a scalar root (seeded with 1).
    pub fn backward(&self, root: Var) -> Grads {
        let seed = Array2::ones(self.value(root).raw_dim());
        self.backward_with(root, seed)
    }

    /// Backward pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Array2<f64>) -> Grads {
        assert_eq!(
            seed.dim(),
            self.value(root).dim(),
            "upstream gradient shape must match the root value"
        );
        let mut g: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = g[id].take() else { continue };
            self.propagate(id, &gout, &mut g);
        }
        Grads { g }
    }

    fn propagate(&self, id: usize, gout: &Array2<f64>, g: &mut [Option<Array2<f64>>]) {
        let add = |g: &mut [Option<Array2<f64>>], v: Var, contrib: Array2<f64>| match &mut g[v.0] {
            Some(acc) => *acc += &contrib,
            slot => *slot = Some(contrib),
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                add(g, *a, gout.dot(&self.value(*b).t()));
                add(g, *b, self.value(*a).t().dot(gout));
            }
            Op::MatMulNT { a, b } => {
                add(g, *a, gout.dot(self.value(*b)));
                add(g, *b, gout.t().dot(self.value(*a)));
            }
            Op::Add { a, b } => {
                add(g, *a, gout.clone());
                add(g, *b, gout.clone());
            }
            Op::AddRow { a, row } => {
                add(g, *a, gout.clone());
                add(g, *row, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub { a, b } => {
                add(g, *a, gout.clone());
                add(g, *b, -gout);
            }
            Op::Mul { a, b } => {
                add(g, *a, gout * self.value(*b));
                add(g, *b, gout * self.value(*a));
            }
            Op::Scale { a, c } => add(g, *a, gout * *c),
            Op::Relu { a } => {
                let act = &self.nodes[id].value;
                add(g, *a, gout * &act.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    add(g, *p, gout.slice(ndarray::s![.., at..at + w]).to_owned());
                    at += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    add(g, *p, gout.slice(ndarray::s![at..at + h, ..]).to_owned());
                    at += h;
                }
            }
            Op::SliceCols { a, lo } => {
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                da.slice_mut(ndarray::s![.., *lo..*lo + gout.ncols()])
                    .assign(gout);
                add(g, *a, da);
            }
            Op::GatherRows { a, idx } => {
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                for (i, &j) in idx.iter().enumerate() {
                    da.row_mut(j).scaled_add(1.0, &gout.row(i));
                }
                add(g, *a, da);
            }
            Op::ScatterMean { a, seg, counts } => {
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                for (i, &s) in seg.iter().enumerate() {
                    da.row_mut(i).scaled_add(1.0 / counts[s] as f64, &gout.row(s));
                }
                add(g, *a, da);
            }
            Op::MaskedSoftmax { a, .. } => {
                let y = &self.nodes[id].value;
                let (n, m) = y.dim();
                let mut da = Array2::zeros((n, m));
                for i in 0..n {
                    let dot: f64 = (0..m).map(|j| gout[[i, j]] * y[[i, j]]).sum();
                    for j in 0..m {
                        da[[i, j]] = y[[i, j]] * (gout[[i, j]] - dot);
                    }
                }
                add(g, *a, da);
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, m) = xhat.dim();
                let gam = self.value(*gamma);
                let dxhat = gout * gam;
                let mut da = Array2::zeros((n, m));
                for i in 0..n {
                    let s1: f64 = dxhat.row(i).sum();
                    let s2: f64 = dxhat
                        .row(i)
                        .iter()
                        .zip(xhat.row(i).iter())
                        .map(|(d, x)| d * x)
                        .sum();
                    let mf = m as f64;
                    for j in 0..m {
                        da[[i, j]] =
                            inv_std[i] * (dxhat[[i, j]] - s1 / mf - xhat[[i, j]] * s2 / mf);
                    }
                }
                add(g, *a, da);
                add(g, *gamma, (gout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                add(g, *beta, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulConst { a, k } => add(g, *a, gout * &**k),
            Op::RowSums { a } => {
                let m = self.value(*a).ncols();
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                for i in 0..da.nrows() {
                    let gi = gout[[i, 0]];
                    for j in 0..m {
                        da[[i, j]] = gi;
                    }
                }
                add(g, *a, da);
            }
            Op::WeightedMean { a, w, denom } => {
                let gs = gout[[0, 0]];
                let mut da = Array2::zeros(self.value(*a).raw_dim());
                for (i, wi) in w.iter().enumerate() {
                    da[[i, 0]] = gs * wi / denom;
                }
                add(g, *a, da);
            }
        }
    }
}
