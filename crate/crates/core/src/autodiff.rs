//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order. [`Graph::backward`]
//! walks the tape exactly once, in reverse creation order, and may not be
//! called again on the same tape.

use crate::error::{dim_err, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An elementwise or shaped region whose backward rule is supplied by the caller.
///
/// The graph calls `backward` verbatim; it must return a gradient with the
/// same shape as the input.
pub trait CustomGrad {
    fn forward(&self, input: &Tensor) -> Tensor;
    fn backward(&self, input: &Tensor, output: &Tensor, upstream: &Tensor) -> Tensor;
}

struct FnGrad<F, B> {
    forward: F,
    backward: B,
}

impl<F, B> CustomGrad for FnGrad<F, B>
where
    F: Fn(&Tensor) -> Tensor,
    B: Fn(&Tensor, &Tensor, &Tensor) -> Tensor,
{
    fn forward(&self, input: &Tensor) -> Tensor {
        (self.forward)(input)
    }
    fn backward(&self, input: &Tensor, output: &Tensor, upstream: &Tensor) -> Tensor {
        (self.backward)(input, output, upstream)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Suffix,
    Scalar,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Tanh {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Silu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Custom {
        x: Var,
        f: Box<dyn CustomGrad>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Epsilon added to the mean square inside the root of rmsnorm.
pub const RMSNORM_EPS: f64 = 1e-6;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    trace: Vec<usize>,
    done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf. Its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, rg)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t.grad`.
    pub fn grad_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.set_grad(g.to_vec()),
            None => Err(Error::Graph(format!("node {} has no gradient", v.0))),
        }
    }

    /// Node indices visited by the last backward pass, in visit order.
    pub fn backward_trace(&self) -> &[usize] {
        &self.trace
    }

    // ---- operations ----

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `x[..×in] · w[out×in]ᵀ`, leading axes of `x` preserved.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[1] {
            return Err(dim_err!("linear input {:?} with weight {:?}", sx, sw));
        }
        let (dout, din) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / din.max(1);
        let mut out = vec![0.0; rows * dout];
        kernels::matmul_nt(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            din,
            dout,
        );
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Linear {
                x,
                w,
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    fn broadcast(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if sb.len() <= sa.len() && sa.ends_with(sb) {
            Ok(Broadcast::Suffix)
        } else {
            Err(dim_err!("cannot broadcast {:?} onto {:?}", sb, sa))
        }
    }

    fn zip_bc(&self, a: Var, b: Var, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = match bc {
            Broadcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.data().iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::Suffix => {
                let n = bv.len();
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv[i % n]))
                    .collect()
            }
        };
        Tensor::new(av.shape(), data).expect("same shape")
    }

    /// Elementwise sum; `b` may equal `a`'s shape, a trailing suffix of it, or be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(a, b)?;
        let out = self.zip_bc(a, b, bc, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b, bc }, rg))
    }

    /// Elementwise product with the same broadcast rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(a, b)?;
        let out = self.zip_bc(a, b, bc, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b, bc }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, c }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp { a }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Silu { a }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Softmax { a }, rg)
    }

    /// Root-mean-square normalization over the last axis, scaled by `w`.
    pub fn rmsnorm(&mut self, x: Var, w: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(w) != [d] {
            return Err(dim_err!(
                "rmsnorm weight {:?} for input {:?}",
                self.shape(w),
                self.shape(x)
            ));
        }
        let xv = self.value(x);
        let wv = self.value(w).data();
        let mut out = vec![0.0; xv.numel()];
        let mut inv_rms = Vec::with_capacity(xv.numel() / d.max(1));
        for (xr, or) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + RMSNORM_EPS).sqrt();
            inv_rms.push(r);
            for ((o, &xi), &wi) in or.iter_mut().zip(xr).zip(wv) {
                *o = xi * r * wi;
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    /// Mean cross entropy of `logits[N×V]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = lv.as_matrix_dims();
        if targets.len() != n {
            return Err(dim_err!("{} targets for {} logit rows", targets.len(), n));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!(
                "target {} outside vocabulary of {}",
                bad, v
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = tv.as_matrix_dims();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!(
                    "token {} outside vocabulary of {}",
                    id, vocab
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies row `i` of `x[rows×cols]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        if self.value(s).numel() != rows {
            return Err(dim_err!(
                "row scale of length {} for {} rows",
                self.value(s).numel(),
                rows
            ));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &sc) in out.chunks_mut(cols.max(1)).zip(sv) {
            row.iter_mut().for_each(|v| *v *= sc);
        }
        let out = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows { x, s }, rg))
    }

    /// Runs `f.forward` on `x`; backward calls `f.backward` verbatim.
    pub fn custom(&mut self, x: Var, f: Box<dyn CustomGrad>) -> Var {
        let out = f.forward(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Custom { x, f }, rg)
    }

    /// Closure form of [`Graph::custom`].
    pub fn custom_fn<F, B>(&mut self, x: Var, forward: F, backward: B) -> Var
    where
        F: Fn(&Tensor) -> Tensor + 'static,
        B: Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    {
        self.custom(x, Box::new(FnGrad { forward, backward }))
    }

    /// Multi-head causal self-attention over `[batch·seq × d]` projections.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2
            || self.shape(k) != shape.as_slice()
            || self.shape(v) != shape.as_slice()
        {
            return Err(dim_err!("attention projections must share a 2-D shape"));
        }
        let d = shape[1];
        if shape[0] != batch * seq || heads == 0 || d % heads != 0 {
            return Err(dim_err!(
                "attention geometry batch={} seq={} heads={} for {:?}",
                batch,
                seq,
                heads,
                shape
            ));
        }
        let geom = AttnGeom {
            batch,
            seq,
            heads,
            head_dim: d / heads,
        };
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            geom,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`. A second call on the same tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(Error::Graph(
                "backward already ran on this graph; build a new forward".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(dim_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        self.trace.clear();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.trace.push(idx);
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        // gradients only for nodes that can carry them
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if need(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, val(*b), &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if need(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(val(*a), g, &mut db, m, k, n);
                    accumulate(grads, *b, db);
                }
            }
            Op::Linear {
                x,
                w,
                rows,
                din,
                dout,
            } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if need(*x) {
                    let mut dx = vec![0.0; rows * din];
                    kernels::matmul_nn(g, val(*w), &mut dx, rows, dout, din);
                    accumulate(grads, *x, dx);
                }
                if need(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::matmul_tn(g, val(*x), &mut dw, rows, dout, din);
                    accumulate(grads, *w, dw);
                }
            }
            Op::Add { a, b, bc } => {
                if need(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if need(*b) {
                    let nb = self.nodes[b.0].value.numel();
                    accumulate(grads, *b, reduce_bc(g.to_vec(), nb, *bc));
                }
            }
            Op::Mul { a, b, bc } => {
                let (av, bv) = (val(*a), val(*b));
                if need(*a) {
                    let da = match bc {
                        Broadcast::Same => g.iter().zip(bv).map(|(x, y)| x * y).collect(),
                        Broadcast::Scalar => g.iter().map(|x| x * bv[0]).collect(),
                        Broadcast::Suffix => {
                            let n = bv.len();
                            g.iter().enumerate().map(|(i, x)| x * bv[i % n]).collect()
                        }
                    };
                    accumulate(grads, *a, da);
                }
                if need(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, reduce_bc(prod, bv.len(), *bc));
                }
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, g.iter().map(|x| x * c).collect());
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect(),
                );
            }
            Op::Exp { a } => {
                let y = node.value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
            }
            Op::Silu { a } => {
                let x = val(*a);
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| {
                        let s = 1.0 / (1.0 + (-xi).exp());
                        gi * s * (1.0 + xi * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *a, da);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let cols = node.value.cols().max(1);
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(da.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (xv, wv) = (val(*x), val(*w));
                let d = wv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; d];
                for (r, ((xr, gr), dxr)) in xv
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let ir = inv_rms[r];
                    let mut dot = 0.0;
                    for j in 0..d {
                        let n = xr[j] * ir;
                        dw[j] += gr[j] * n;
                        dot += gr[j] * wv[j] * n;
                    }
                    dot /= d as f64;
                    for j in 0..d {
                        let n = xr[j] * ir;
                        dxr[j] = ir * (gr[j] * wv[j] - n * dot);
                    }
                }
                if need(*x) {
                    accumulate(grads, *x, dx);
                }
                if need(*w) {
                    accumulate(grads, *w, dw);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let v = probs.len() / n.max(1);
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * v + t] -= scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::Sum { a } => {
                let n = self.nodes[a.0].value.numel();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Embedding { table, ids } => {
                let tv = &self.nodes[table.0].value;
                let d = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (row, &id) in g.chunks(d).zip(ids) {
                    for (acc, gi) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *acc += gi;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let cols = xv.len() / sv.len().max(1);
                if need(*x) {
                    let mut dx = g.to_vec();
                    for (row, &sc) in dx.chunks_mut(cols.max(1)).zip(sv) {
                        row.iter_mut().for_each(|v| *v *= sc);
                    }
                    accumulate(grads, *x, dx);
                }
                if need(*s) {
                    let ds = xv
                        .chunks(cols.max(1))
                        .zip(g.chunks(cols.max(1)))
                        .map(|(xr, gr)| xr.iter().zip(gr).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, *s, ds);
                }
            }
            Op::Custom { x, f } => {
                let input = &self.nodes[x.0].value;
                let upstream = Tensor::new(node.value.shape(), g.to_vec())?;
                let dx = f.backward(input, &node.value, &upstream);
                if dx.shape() != input.shape() {
                    return Err(dim_err!(
                        "custom backward returned {:?} for input {:?}",
                        dx.shape(),
                        input.shape()
                    ));
                }
                accumulate(grads, *x, dx.into_data());
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), g, probs, *geom);
                if need(*q) {
                    accumulate(grads, *q, dq);
                }
                if need(*k) {
                    accumulate(grads, *k, dk);
                }
                if need(*v) {
                    accumulate(grads, *v, dv);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

fn reduce_bc(g: Vec<f64>, nb: usize, bc: Broadcast) -> Vec<f64> {
    match bc {
        Broadcast::Same => g,
        Broadcast::Scalar => vec![g.iter().sum()],
        Broadcast::Suffix => {
            let mut out = vec![0.0; nb];
            for row in g.chunks(nb) {
                out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            out
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], geom: AttnGeom) -> (Vec<f64>, Vec<f64>) {
    let AttnGeom {
        batch,
        seq,
        heads,
        head_dim: hd,
    } = geom;
    let d = heads * hd;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; batch * seq * d];
    let mut probs = vec![0.0; batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * hd;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * d + off..][..hd];
                let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                for j in 0..=i {
                    let kj = &k[(b * seq + j) * d + off..][..hd];
                    p[j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                softmax_in_place(&mut p[..=i]);
                let o = &mut out[(b * seq + i) * d + off..][..hd];
                for j in 0..=i {
                    let vj = &v[(b * seq + j) * d + off..][..hd];
                    let pj = p[j];
                    o.iter_mut().zip(vj).for_each(|(a, b)| *a += pj * b);
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    probs: &[f64],
    geom: AttnGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnGeom {
        batch,
        seq,
        heads,
        head_dim: hd,
    } = geom;
    let d = heads * hd;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * hd;
            for i in 0..seq {
                let gi = &g[(b * seq + i) * d + off..][..hd];
                let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = &v[(b * seq + j) * d + off..][..hd];
                    dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    dot += p[j] * dp[j];
                    let dvj = &mut dv[(b * seq + j) * d + off..][..hd];
                    dvj.iter_mut().zip(gi).for_each(|(a, x)| *a += p[j] * x);
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k[(b * seq + j) * d + off..][..hd];
                    let dqi = &mut dq[(b * seq + i) * d + off..][..hd];
                    dqi.iter_mut().zip(kj).for_each(|(a, x)| *a += ds * x);
                    let qi = &q[(b * seq + i) * d + off..][..hd];
                    let dkj = &mut dk[(b * seq + j) * d + off..][..hd];
                    dkj.iter_mut().zip(qi).for_each(|(a, x)| *a += ds * x);
                }
            }
        }
    }
    (dq, dk, dv)
}
