//! Reverse-mode tape over a fixed set of primitives.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Parameters are read
//! from a borrowed [`ParamStore`]; gradients come back as a [`Gradients`]
//! buffer that the caller adds into the store.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{dot, matvec_acc, matvec_t_acc, outer_acc};
use crate::error::NeuroError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter handles for one LSTM cell. Gate order inside the stacked
/// matrices is input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
    },
    Embed {
        table: ParamId,
        row: usize,
    },
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    Lstm {
        x: Var,
        h: Var,
        c: Var,
        p: LstmParams,
        // activated gates, 4H
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Vec<Var>),
    Stack(Vec<Var>),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        target: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> NeuroError {
    NeuroError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

/// Numerically stable softmax.
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// log-softmax evaluated at one index.
pub fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    logits[index] - max - z.ln()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf. Receives no gradient.
    pub fn input(&mut self, values: &[f64]) -> Result<Var, NeuroError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NeuroError::NonFinite("graph input".into()));
        }
        Ok(self.push(values.to_vec(), Op::Input))
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.push(vec![0.0; n], Op::Input)
    }

    /// Whole parameter tensor as a flat node; gradients flow back into the store.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.value(id).data().to_vec();
        self.push(value, Op::Param(id))
    }

    /// y = W x + b with W stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var, NeuroError> {
        let wt = self.params.value(w);
        let xin = &self.nodes[x.0].value;
        if wt.shape().len() != 2 || wt.cols() != xin.len() {
            return Err(mismatch("linear", &[wt.rows(), xin.len()], wt.shape()));
        }
        let rows = wt.rows();
        let mut y = match b {
            Some(b) => {
                let bt = self.params.value(b);
                if bt.len() != rows {
                    return Err(mismatch("linear bias", &[rows], bt.shape()));
                }
                bt.data().to_vec()
            }
            None => vec![0.0; rows],
        };
        matvec_acc(wt.data(), xin, &mut y);
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn embed(&mut self, table: ParamId, token: usize) -> Result<Var, NeuroError> {
        let t = self.params.value(table);
        if token >= t.rows() {
            return Err(NeuroError::IndexOutOfRange {
                what: "embedding table",
                index: token,
                size: t.rows(),
            });
        }
        let row = t.row(token).to_vec();
        Ok(self.push(row, Op::Embed { table, row: token }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var, NeuroError> {
        let s = &self.nodes[src.0].value;
        if start + len > s.len() {
            return Err(mismatch("slice", &[start + len], &[s.len()]));
        }
        let v = s[start..start + len].to_vec();
        Ok(self.push(v, Op::Slice { src, start }))
    }

    /// One LSTM cell step. Returns `(h', c')`.
    pub fn lstm_step(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        p: LstmParams,
    ) -> Result<(Var, Var), NeuroError> {
        let wx = self.params.value(p.wx);
        let wh = self.params.value(p.wh);
        let b = self.params.value(p.b);
        let hidden = self.nodes[h.0].value.len();
        let xin = &self.nodes[x.0].value;
        let hin = &self.nodes[h.0].value;
        let cin = &self.nodes[c.0].value;
        if cin.len() != hidden {
            return Err(mismatch("lstm cell state", &[hidden], &[cin.len()]));
        }
        if wx.shape() != [4 * hidden, xin.len()] {
            return Err(mismatch("lstm wx", &[4 * hidden, xin.len()], wx.shape()));
        }
        if wh.shape() != [4 * hidden, hidden] {
            return Err(mismatch("lstm wh", &[4 * hidden, hidden], wh.shape()));
        }
        if b.len() != 4 * hidden {
            return Err(mismatch("lstm bias", &[4 * hidden], b.shape()));
        }
        let mut z = b.data().to_vec();
        matvec_acc(wx.data(), xin, &mut z);
        matvec_acc(wh.data(), hin, &mut z);
        let mut out = vec![0.0; 2 * hidden];
        let mut tanh_c = vec![0.0; hidden];
        for k in 0..hidden {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[hidden + k]);
            let g = z[2 * hidden + k].tanh();
            let o = sigmoid(z[3 * hidden + k]);
            z[k] = i;
            z[hidden + k] = f;
            z[2 * hidden + k] = g;
            z[3 * hidden + k] = o;
            let cn = f * cin[k] + i * g;
            let tc = cn.tanh();
            tanh_c[k] = tc;
            out[k] = o * tc;
            out[hidden + k] = cn;
        }
        let both = self.push(
            out,
            Op::Lstm {
                x,
                h,
                c,
                p,
                gates: z,
                tanh_c,
            },
        );
        let h2 = self.slice(both, 0, hidden)?;
        let c2 = self.slice(both, hidden, hidden)?;
        Ok((h2, c2))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuroError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.len() != vb.len() {
            return Err(mismatch("add", &[va.len()], &[vb.len()]));
        }
        let v = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        self.push(v, Op::Scale(a, k))
    }

    /// Elementwise sum of equally-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, NeuroError> {
        let n = parts
            .first()
            .map(|p| self.nodes[p.0].value.len())
            .unwrap_or(1);
        let mut v = vec![0.0; n];
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.len() != n {
                return Err(mismatch("sum", &[n], &[pv.len()]));
            }
            v.iter_mut().zip(pv).for_each(|(a, b)| *a += b);
        }
        Ok(self.push(v, Op::Sum(parts.to_vec())))
    }

    /// Packs scalar nodes into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var, NeuroError> {
        let mut v = Vec::with_capacity(scalars.len());
        for s in scalars {
            let sv = &self.nodes[s.0].value;
            if sv.len() != 1 {
                return Err(mismatch("stack", &[1], &[sv.len()]));
            }
            v.push(sv[0]);
        }
        Ok(self.push(v, Op::Stack(scalars.to_vec())))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var, NeuroError> {
        let l = &self.nodes[logits.0].value;
        if l.is_empty() {
            return Err(mismatch("softmax", &[1], &[0]));
        }
        let p = softmax_values(l);
        Ok(self.push(p, Op::Softmax(logits)))
    }

    /// −ln probs[target].
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var, NeuroError> {
        let p = &self.nodes[probs.0].value;
        if target >= p.len() {
            return Err(NeuroError::IndexOutOfRange {
                what: "cross-entropy target",
                index: target,
                size: p.len(),
            });
        }
        let v = -p[target].ln();
        Ok(self.push(vec![v], Op::CrossEntropy { probs, target }))
    }

    /// Fused −log softmax(logits)[target].
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NeuroError> {
        let l = &self.nodes[logits.0].value;
        if target >= l.len() {
            return Err(NeuroError::IndexOutOfRange {
                what: "cross-entropy target",
                index: target,
                size: l.len(),
            });
        }
        let v = -log_softmax_at(l, target);
        let probs = softmax_values(l);
        Ok(self.push(
            vec![v],
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NeuroError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.len() != vb.len() || va.is_empty() {
            return Err(mismatch("mse", &[va.len()], &[vb.len()]));
        }
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = s / va.len() as f64;
        Ok(self.push(vec![v], Op::Mse(a, b)))
    }

    /// Squared euclidean distance.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var, NeuroError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.len() != vb.len() {
            return Err(mismatch("sq_dist", &[va.len()], &[vb.len()]));
        }
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(vec![s], Op::SqDist(a, b)))
    }

    /// Exact reverse-mode gradients of the scalar `loss` w.r.t. every parameter it touches.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NeuroError> {
        let n_loss = self.nodes[loss.0].value.len();
        if n_loss != 1 {
            return Err(NeuroError::NotScalar(n_loss));
        }
        let mut out = Gradients::new(self.params.len());
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
            let len = nodes[v.0].value.len();
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let dst = out.slot(*id, g.len());
                    dst.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Linear { x, w, b } => {
                    let wt = self.params.value(*w);
                    let xv = &self.nodes[x.0].value;
                    outer_acc(&g, xv, out.slot(*w, wt.len()));
                    if let Some(b) = b {
                        let db = out.slot(*b, g.len());
                        db.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
                    }
                    matvec_t_acc(wt.data(), &g, slot(&mut grads, &self.nodes, *x));
                }
                Op::Embed { table, row } => {
                    let t = self.params.value(*table);
                    let cols = t.cols();
                    let dst = out.slot(*table, t.len());
                    dst[row * cols..(row + 1) * cols]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        let dst = slot(&mut grads, &self.nodes, *p);
                        dst.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(a, b)| *a += b);
                        off += len;
                    }
                }
                Op::Slice { src, start } => {
                    let dst = slot(&mut grads, &self.nodes, *src);
                    dst[*start..*start + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b);
                }
                Op::Lstm {
                    x,
                    h,
                    c,
                    p,
                    gates,
                    tanh_c,
                } => {
                    let hidden = tanh_c.len();
                    let (dh_out, dc_out) = g.split_at(hidden);
                    let cin = &self.nodes[c.0].value;
                    let mut dz = vec![0.0; 4 * hidden];
                    let mut dc_prev = vec![0.0; hidden];
                    for k in 0..hidden {
                        let i = gates[k];
                        let f = gates[hidden + k];
                        let gg = gates[2 * hidden + k];
                        let o = gates[3 * hidden + k];
                        let tc = tanh_c[k];
                        let d_o = dh_out[k] * tc;
                        let dc = dc_out[k] + dh_out[k] * o * (1.0 - tc * tc);
                        let di = dc * gg;
                        let dg = dc * i;
                        let df = dc * cin[k];
                        dc_prev[k] = dc * f;
                        dz[k] = di * i * (1.0 - i);
                        dz[hidden + k] = df * f * (1.0 - f);
                        dz[2 * hidden + k] = dg * (1.0 - gg * gg);
                        dz[3 * hidden + k] = d_o * o * (1.0 - o);
                    }
                    let wx = self.params.value(p.wx);
                    let wh = self.params.value(p.wh);
                    let xv = &self.nodes[x.0].value;
                    let hv = &self.nodes[h.0].value;
                    outer_acc(&dz, xv, out.slot(p.wx, wx.len()));
                    outer_acc(&dz, hv, out.slot(p.wh, wh.len()));
                    let db = out.slot(p.b, dz.len());
                    db.iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
                    matvec_t_acc(wx.data(), &dz, slot(&mut grads, &self.nodes, *x));
                    matvec_t_acc(wh.data(), &dz, slot(&mut grads, &self.nodes, *h));
                    let dst = slot(&mut grads, &self.nodes, *c);
                    dst.iter_mut()
                        .zip(&dc_prev)
                        .for_each(|(a, b)| *a += b);
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let dst = slot(&mut grads, &self.nodes, *v);
                        dst.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Scale(a, k) => {
                    let dst = slot(&mut grads, &self.nodes, *a);
                    dst.iter_mut().zip(&g).for_each(|(x, y)| *x += k * y);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        let dst = slot(&mut grads, &self.nodes, *p);
                        dst.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Stack(parts) => {
                    for (p, gv) in parts.iter().zip(&g) {
                        slot(&mut grads, &self.nodes, *p)[0] += gv;
                    }
                }
                Op::Softmax(logits) => {
                    let p = &node.value;
                    let pg = dot(p, &g);
                    let dst = slot(&mut grads, &self.nodes, *logits);
                    for ((d, &pi), &gi) in dst.iter_mut().zip(p).zip(&g) {
                        *d += pi * (gi - pg);
                    }
                }
                Op::CrossEntropy { probs, target } => {
                    let p = self.nodes[probs.0].value[*target];
                    let dst = slot(&mut grads, &self.nodes, *probs);
                    dst[*target] -= g[0] / p;
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let dst = slot(&mut grads, &self.nodes, *logits);
                    for (k, (d, &pk)) in dst.iter_mut().zip(probs).enumerate() {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (pk - onehot);
                    }
                }
                Op::Mse(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let k = 2.0 * g[0] / va.len() as f64;
                    let diff: Vec<f64> = va.iter().zip(vb).map(|(x, y)| k * (x - y)).collect();
                    let da = slot(&mut grads, &self.nodes, *a);
                    da.iter_mut().zip(&diff).for_each(|(x, y)| *x += y);
                    let db = slot(&mut grads, &self.nodes, *b);
                    db.iter_mut().zip(&diff).for_each(|(x, y)| *x -= y);
                }
                Op::SqDist(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let diff: Vec<f64> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| 2.0 * g[0] * (x - y))
                        .collect();
                    let da = slot(&mut grads, &self.nodes, *a);
                    da.iter_mut().zip(&diff).for_each(|(x, y)| *x += y);
                    let db = slot(&mut grads, &self.nodes, *b);
                    db.iter_mut().zip(&diff).for_each(|(x, y)| *x -= y);
                }
            }
        }
        Ok(out)
    }
}
