//! Reverse-mode automatic differentiation over tensor-level operations.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] then
//! accumulates exact gradients of a scalar loss into per-node buffers.
//! Operations are recorded at tensor granularity (a dense layer is one
//! record), which keeps tapes short and the backward sweep cheap.
//!
//! Parameters are registered by name and cached, so the same tape can span a
//! whole rollout segment: repeated `param` calls return the node recorded the
//! first time and gradient contributions from every step accumulate there.

use rand::Rng;
use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{GradSet, ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0:?} not found in parameter set")]
    UnknownParam(String),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// y = W x + b with W: [out, in], b: [out], x: [in].
    Dense {
        w: NodeId,
        b: NodeId,
        x: NodeId,
        y: NodeId,
    },
    Relu {
        x: NodeId,
        y: NodeId,
    },
    Softmax {
        x: NodeId,
        y: NodeId,
    },
    LogSoftmax {
        x: NodeId,
        y: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
        y: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
        y: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
        y: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
        y: NodeId,
    },
    /// y = mul * x + add, elementwise with scalar coefficients.
    Affine {
        x: NodeId,
        y: NodeId,
        mul: f64,
    },
    Sum {
        x: NodeId,
        y: NodeId,
    },
    Dot {
        a: NodeId,
        b: NodeId,
        y: NodeId,
    },
    Index {
        x: NodeId,
        i: usize,
        y: NodeId,
    },
    Exp {
        x: NodeId,
        y: NodeId,
    },
    Log {
        x: NodeId,
        y: NodeId,
    },
    /// z = mu + exp(0.5 * log_var) ⊙ eps. `eps` is data, not a node: no
    /// gradient flows into the noise.
    Reparam {
        mu: NodeId,
        log_var: NodeId,
        eps: Vec<f64>,
        y: NodeId,
    },
}

/// Records a forward computation and runs reverse-mode accumulation.
pub struct Tape {
    vals: Vec<Arc<Tensor>>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Op>,
    param_ids: HashMap<String, NodeId>,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            vals: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            param_ids: HashMap::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, t: Tensor) -> NodeId {
        self.push_arc(Arc::new(t))
    }

    fn push_arc(&mut self, t: Arc<Tensor>) -> NodeId {
        let id = NodeId(self.vals.len());
        self.grads.push(Vec::new());
        self.vals.push(t);
        id
    }

    /// A leaf holding arbitrary data (observations, return targets).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t)
    }

    /// Register a named parameter as a leaf, cached per name: calling twice
    /// with the same name returns the same node, so gradients accumulate.
    pub fn param(&mut self, name: &str, params: &ParamSet) -> Result<NodeId, TapeError> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let tensor = params
            .get(name)
            .ok_or_else(|| TapeError::UnknownParam(name.to_string()))?;
        let id = self.push_arc(Arc::clone(tensor));
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Gradient buffer of a node; empty until `backward` has run and zero
    /// afterwards for nodes the loss does not reach.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    /// y = W x + b.
    #[allow(clippy::needless_range_loop)]
    pub fn dense(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId, TapeError> {
        let (ws, bs, xs) = (
            self.vals[w.0].shape().to_vec(),
            self.vals[b.0].shape().to_vec(),
            self.vals[x.0].shape().to_vec(),
        );
        if ws.len() != 2 || bs.len() != 1 || xs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(TapeError::ShapeMismatch {
                op: "dense",
                detail: format!("W {ws:?}, b {bs:?}, x {xs:?}"),
            });
        }
        let (out, inp) = (ws[0], ws[1]);
        let wt = &self.vals[w.0];
        let xt = &self.vals[x.0];
        let bt = &self.vals[b.0];
        let mut y = vec![0.0; out];
        for o in 0..out {
            let row = &wt.data()[o * inp..(o + 1) * inp];
            let mut acc = 0.0;
            for i in 0..inp {
                acc += row[i] * xt.data()[i];
            }
            y[o] = acc + bt.data()[o];
        }
        let yid = self.push(Tensor::vector(y));
        self.ops.push(Op::Dense { w, b, x, y: yid });
        Ok(yid)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.vals[x.0].iter().map(|&v| v.max(0.0)).collect();
        let yid = self.push(Tensor::vector(y));
        self.ops.push(Op::Relu { x, y: yid });
        yid
    }

    /// Softmax over a vector, with max subtraction for stability.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xt = self.vals[x.0].data();
        let max = xt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xt.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let y: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let yid = self.push(Tensor::vector(y));
        self.ops.push(Op::Softmax { x, y: yid });
        yid
    }

    /// Log-softmax over a vector, with max subtraction for stability.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xt = self.vals[x.0].data();
        let max = xt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = xt.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let y: Vec<f64> = xt.iter().map(|&v| v - max - log_sum).collect();
        let yid = self.push(Tensor::vector(y));
        self.ops.push(Op::LogSoftmax { x, y: yid });
        yid
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.vals[p.0].data());
        }
        let yid = self.push(Tensor::vector(data));
        self.ops.push(Op::Concat {
            parts: parts.to_vec(),
            y: yid,
        });
        yid
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(NodeId, Vec<f64>), TapeError> {
        let (at, bt) = (&self.vals[a.0], &self.vals[b.0]);
        if at.shape() != bt.shape() {
            return Err(TapeError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            });
        }
        let y: Vec<f64> = at
            .iter()
            .zip(bt.iter())
            .map(|(&x, &z)| f(x, z))
            .collect();
        Ok((a, y))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (_, y) = self.elementwise("add", a, b, |x, z| x + z)?;
        let shape = self.vals[a.0].shape().to_vec();
        let yid = self.push(Tensor::new(shape, y).expect("elementwise shape"));
        self.ops.push(Op::Add { a, b, y: yid });
        Ok(yid)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (_, y) = self.elementwise("sub", a, b, |x, z| x - z)?;
        let shape = self.vals[a.0].shape().to_vec();
        let yid = self.push(Tensor::new(shape, y).expect("elementwise shape"));
        self.ops.push(Op::Sub { a, b, y: yid });
        Ok(yid)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (_, y) = self.elementwise("mul", a, b, |x, z| x * z)?;
        let shape = self.vals[a.0].shape().to_vec();
        let yid = self.push(Tensor::new(shape, y).expect("elementwise shape"));
        self.ops.push(Op::Mul { a, b, y: yid });
        Ok(yid)
    }

    /// y = mul * x + add, elementwise.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let y: Vec<f64> = self.vals[x.0].iter().map(|&v| mul * v + add).collect();
        let shape = self.vals[x.0].shape().to_vec();
        let yid = self.push(Tensor::new(shape, y).expect("affine shape"));
        self.ops.push(Op::Affine { x, y: yid, mul });
        yid
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.vals[x.0].iter().sum();
        let yid = self.push(Tensor::scalar(s));
        self.ops.push(Op::Sum { x, y: yid });
        yid
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (at, bt) = (&self.vals[a.0], &self.vals[b.0]);
        if at.shape() != bt.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "dot",
                detail: format!("{:?} vs {:?}", at.shape(), bt.shape()),
            });
        }
        let s: f64 = at.iter().zip(bt.iter()).map(|(&x, &z)| x * z).sum();
        let yid = self.push(Tensor::scalar(s));
        self.ops.push(Op::Dot { a, b, y: yid });
        Ok(yid)
    }

    /// Extract element `i` as a scalar node.
    pub fn index(&mut self, x: NodeId, i: usize) -> NodeId {
        let v = self.vals[x.0].data()[i];
        let yid = self.push(Tensor::scalar(v));
        self.ops.push(Op::Index { x, i, y: yid });
        yid
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.vals[x.0].iter().map(|&v| v.exp()).collect();
        let shape = self.vals[x.0].shape().to_vec();
        let yid = self.push(Tensor::new(shape, y).expect("exp shape"));
        self.ops.push(Op::Exp { x, y: yid });
        yid
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.vals[x.0].iter().map(|&v| v.ln()).collect();
        let shape = self.vals[x.0].shape().to_vec();
        let yid = self.push(Tensor::new(shape, y).expect("log shape"));
        self.ops.push(Op::Log { x, y: yid });
        yid
    }

    /// z = mu + exp(0.5 * log_var) ⊙ eps.
    ///
    /// Gradients flow to `mu` and `log_var` only; `eps` is externally drawn
    /// standard-normal noise.
    pub fn reparameterize(
        &mut self,
        mu: NodeId,
        log_var: NodeId,
        eps: Vec<f64>,
    ) -> Result<NodeId, TapeError> {
        let (mt, lt) = (&self.vals[mu.0], &self.vals[log_var.0]);
        if mt.shape() != lt.shape() || mt.len() != eps.len() {
            return Err(TapeError::ShapeMismatch {
                op: "reparameterize",
                detail: format!(
                    "mu {:?}, log_var {:?}, eps len {}",
                    mt.shape(),
                    lt.shape(),
                    eps.len()
                ),
            });
        }
        let y: Vec<f64> = mt
            .iter()
            .zip(lt.iter())
            .zip(eps.iter())
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        let shape = mt.shape().to_vec();
        let yid = self.push(Tensor::new(shape, y).expect("reparam shape"));
        self.ops.push(Op::Reparam {
            mu,
            log_var,
            eps,
            y: yid,
        });
        Ok(yid)
    }

    /// Value-identical copy through which backward propagates nothing.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let t = Arc::clone(&self.vals[x.0]);
        self.push_arc(t)
    }

    /// Reverse sweep from a scalar loss. Every node reachable in the forward
    /// graph receives its exact gradient; untouched nodes stay zero.
    // Indexed loops throughout: each step reads/writes two or three distinct
    // gradient buffers at matching offsets.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TapeError> {
        if self.vals[loss.0].len() != 1 {
            return Err(TapeError::NonScalarLoss(self.vals[loss.0].shape().to_vec()));
        }
        for (i, g) in self.grads.iter_mut().enumerate() {
            g.clear();
            g.resize(self.vals[i].len(), 0.0);
        }
        self.grads[loss.0][0] = 1.0;
        self.ran_backward = true;

        for op in self.ops.iter().rev() {
            match op {
                Op::Dense { w, b, x, y } => {
                    let out = self.vals[b.0].len();
                    let inp = self.vals[x.0].len();
                    // Split borrows: read gy, then update gw/gb/gx.
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    {
                        let xv = Arc::clone(&self.vals[x.0]);
                        let gw = &mut self.grads[w.0];
                        for o in 0..out {
                            let go = gy[o];
                            if go != 0.0 {
                                let row = &mut gw[o * inp..(o + 1) * inp];
                                for i in 0..inp {
                                    row[i] += go * xv.data()[i];
                                }
                            }
                        }
                    }
                    for o in 0..out {
                        self.grads[b.0][o] += gy[o];
                    }
                    {
                        let wv = Arc::clone(&self.vals[w.0]);
                        let gx = &mut self.grads[x.0];
                        for o in 0..out {
                            let go = gy[o];
                            if go != 0.0 {
                                let row = &wv.data()[o * inp..(o + 1) * inp];
                                for i in 0..inp {
                                    gx[i] += go * row[i];
                                }
                            }
                        }
                    }
                    self.grads[y.0] = gy;
                }
                Op::Relu { x, y } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    let xv = Arc::clone(&self.vals[x.0]);
                    for (i, g) in gy.iter().enumerate() {
                        if xv.data()[i] > 0.0 {
                            self.grads[x.0][i] += g;
                        }
                    }
                    self.grads[y.0] = gy;
                }
                Op::Softmax { x, y } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    let yv = Arc::clone(&self.vals[y.0]);
                    let dot: f64 = gy.iter().zip(yv.iter()).map(|(&g, &p)| g * p).sum();
                    for i in 0..gy.len() {
                        self.grads[x.0][i] += yv.data()[i] * (gy[i] - dot);
                    }
                    self.grads[y.0] = gy;
                }
                Op::LogSoftmax { x, y } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    let yv = Arc::clone(&self.vals[y.0]);
                    let gsum: f64 = gy.iter().sum();
                    for i in 0..gy.len() {
                        self.grads[x.0][i] += gy[i] - yv.data()[i].exp() * gsum;
                    }
                    self.grads[y.0] = gy;
                }
                Op::Concat { parts, y } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    let mut off = 0;
                    for p in parts {
                        let n = self.vals[p.0].len();
                        for i in 0..n {
                            self.grads[p.0][i] += gy[off + i];
                        }
                        off += n;
                    }
                    self.grads[y.0] = gy;
                }
                Op::Add { a, b, y } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    for i in 0..gy.len() {
                        self.grads[a.0][i] += gy[i];
                    }
                    for i in 0..gy.len() {
                        self.grads[b.0][i] += gy[i];
                    }
                    self.grads[y.0] = gy;
                }
                Op::Sub { a, b, y } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    for i in 0..gy.len() {
                        self.grads[a.0][i] += gy[i];
                    }
                    for i in 0..gy.len() {
                        self.grads[b.0][i] -= gy[i];
                    }
                    self.grads[y.0] = gy;
                }
                Op::Mul { a, b, y } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    let av = Arc::clone(&self.vals[a.0]);
                    let bv = Arc::clone(&self.vals[b.0]);
                    for i in 0..gy.len() {
                        self.grads[a.0][i] += gy[i] * bv.data()[i];
                    }
                    for i in 0..gy.len() {
                        self.grads[b.0][i] += gy[i] * av.data()[i];
                    }
                    self.grads[y.0] = gy;
                }
                Op::Affine { x, y, mul } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    for i in 0..gy.len() {
                        self.grads[x.0][i] += mul * gy[i];
                    }
                    self.grads[y.0] = gy;
                }
                Op::Sum { x, y } => {
                    let g = self.grads[y.0][0];
                    for v in self.grads[x.0].iter_mut() {
                        *v += g;
                    }
                }
                Op::Dot { a, b, y } => {
                    let g = self.grads[y.0][0];
                    let av = Arc::clone(&self.vals[a.0]);
                    let bv = Arc::clone(&self.vals[b.0]);
                    for i in 0..av.len() {
                        self.grads[a.0][i] += g * bv.data()[i];
                    }
                    for i in 0..av.len() {
                        self.grads[b.0][i] += g * av.data()[i];
                    }
                }
                Op::Index { x, i, y } => {
                    let g = self.grads[y.0][0];
                    self.grads[x.0][*i] += g;
                }
                Op::Exp { x, y } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    let yv = Arc::clone(&self.vals[y.0]);
                    for i in 0..gy.len() {
                        self.grads[x.0][i] += gy[i] * yv.data()[i];
                    }
                    self.grads[y.0] = gy;
                }
                Op::Log { x, y } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    let xv = Arc::clone(&self.vals[x.0]);
                    for i in 0..gy.len() {
                        self.grads[x.0][i] += gy[i] / xv.data()[i];
                    }
                    self.grads[y.0] = gy;
                }
                Op::Reparam {
                    mu,
                    log_var,
                    eps,
                    y,
                } => {
                    let gy = std::mem::take(&mut self.grads[y.0]);
                    for i in 0..gy.len() {
                        self.grads[mu.0][i] += gy[i];
                    }
                    let lv = Arc::clone(&self.vals[log_var.0]);
                    for i in 0..gy.len() {
                        self.grads[log_var.0][i] += gy[i] * 0.5 * (0.5 * lv.data()[i]).exp() * eps[i];
                    }
                    self.grads[y.0] = gy;
                }
            }
        }
        Ok(())
    }

    /// Gradients for every parameter of `params`, aligned with its order.
    /// Parameters never registered on this tape get zero gradients.
    pub fn param_grads(&self, params: &ParamSet) -> GradSet {
        let grads = params
            .iter()
            .map(|(name, tensor)| match self.param_ids.get(name) {
                Some(id) if self.ran_backward => {
                    Tensor::new(tensor.shape().to_vec(), self.grads[id.0].clone())
                        .expect("grad buffer matches param shape")
                }
                _ => Tensor::zeros(tensor.shape().to_vec()),
            })
            .collect();
        GradSet::new(grads)
    }
}

/// Draw an index from a normalized probability vector via inverse CDF,
/// consuming exactly one RNG value.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> Result<usize, TapeError> {
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(TapeError::NotNormalized(total));
    }
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_with(entries: &[(&str, Tensor)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, t) in entries {
            p.insert(n, t.clone()).unwrap();
        }
        p
    }

    #[test]
    fn dense_identity_and_constant() {
        let params = params_with(&[
            ("w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            ("b", Tensor::vector(vec![0.0, 0.0])),
            ("w0", Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap()),
            ("bc", Tensor::vector(vec![3.0, -1.0])),
        ]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![5.0, 7.0]));
        let w = tape.param("w", &params).unwrap();
        let b = tape.param("b", &params).unwrap();
        let y = tape.dense(w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);

        let w0 = tape.param("w0", &params).unwrap();
        let bc = tape.param("bc", &params).unwrap();
        let y0 = tape.dense(w0, bc, x).unwrap();
        assert_eq!(tape.value(y0).data(), &[3.0, -1.0]);
    }

    #[test]
    fn dense_hand_case() {
        // W = [[1,2],[3,4]], b = 0, x = [1,1] -> [3, 7]
        let params = params_with(&[
            ("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("b", Tensor::vector(vec![0.0, 0.0])),
        ]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let w = tape.param("w", &params).unwrap();
        let b = tape.param("b", &params).unwrap();
        let y = tape.dense(w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn dense_shape_mismatch_is_error() {
        let params = params_with(&[
            ("w", Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap()),
            ("b", Tensor::vector(vec![0.0, 0.0])),
        ]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let w = tape.param("w", &params).unwrap();
        let b = tape.param("b", &params).unwrap();
        assert!(tape.dense(w, b, x).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 4]));
        let y = tape.softmax(x);
        for &p in tape.value(y).data() {
            assert!((p - 0.25).abs() < 1e-12);
        }

        let big = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let yb = tape.softmax(big);
        assert!((tape.value(yb).data()[0] - 0.5).abs() < 1e-12);
        assert!(tape.value(yb).all_finite());

        let sum: f64 = tape.value(y).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let b = tape.constant(Tensor::vector(vec![100.3, 98.8, 102.0]));
        let ya = tape.softmax(a);
        let yb = tape.softmax(b);
        for (pa, pb) in tape.value(ya).iter().zip(tape.value(yb).iter()) {
            assert!((pa - pb).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn backward_constant_loss_gives_zero_grads() {
        let params = params_with(&[("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap())]);
        let mut tape = Tape::new();
        let _w = tape.param("w", &params).unwrap();
        let c = tape.constant(Tensor::scalar(5.0));
        tape.backward(c).unwrap();
        let grads = tape.param_grads(&params);
        assert_eq!(grads.get(0).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_linear_case() {
        // loss = sum(Wx), x fixed -> dL/dW = outer(1, x), dL/db = 1.
        let params = params_with(&[
            ("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("b", Tensor::vector(vec![0.5, 0.5])),
        ]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![5.0, 7.0]));
        let w = tape.param("w", &params).unwrap();
        let b = tape.param("b", &params).unwrap();
        let y = tape.dense(w, b, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let grads = tape.param_grads(&params);
        assert_eq!(grads.get(0).data(), &[5.0, 7.0, 5.0, 7.0]);
        assert_eq!(grads.get(1).data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn stop_gradient_blocks_flow_and_is_identity() {
        let params = params_with(&[
            ("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("b", Tensor::vector(vec![0.0, 0.0])),
        ]);

        // loss = sum(stop_gradient(Wx)) -> dL/dW = 0.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let w = tape.param("w", &params).unwrap();
        let b = tape.param("b", &params).unwrap();
        let y = tape.dense(w, b, x).unwrap();
        let stopped = tape.stop_gradient(y);
        assert_eq!(tape.value(stopped).data(), tape.value(y).data());
        let loss = tape.sum(stopped);
        tape.backward(loss).unwrap();
        assert!(tape.param_grads(&params).get(0).iter().all(|&g| g == 0.0));

        // loss = sum(Wx + stop_gradient(Wx)) has the gradient of sum(Wx).
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(Tensor::vector(vec![1.0, 1.0]));
        let w2 = tape2.param("w", &params).unwrap();
        let b2 = tape2.param("b", &params).unwrap();
        let y2 = tape2.dense(w2, b2, x2).unwrap();
        let s2 = tape2.stop_gradient(y2);
        let both = tape2.add(y2, s2).unwrap();
        let loss2 = tape2.sum(both);
        tape2.backward(loss2).unwrap();

        let mut tape3 = Tape::new();
        let x3 = tape3.constant(Tensor::vector(vec![1.0, 1.0]));
        let w3 = tape3.param("w", &params).unwrap();
        let b3 = tape3.param("b", &params).unwrap();
        let y3 = tape3.dense(w3, b3, x3).unwrap();
        let loss3 = tape3.sum(y3);
        tape3.backward(loss3).unwrap();

        assert_eq!(
            tape2.param_grads(&params).get(0).data(),
            tape3.param_grads(&params).get(0).data()
        );
    }

    #[test]
    fn reparameterize_cases() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let lv = tape.constant(Tensor::vector(vec![0.0, 0.0]));

        // eps = 0 -> z = mu.
        let z0 = tape.reparameterize(mu, lv, vec![0.0, 0.0]).unwrap();
        assert_eq!(tape.value(z0).data(), &[1.0, -2.0]);

        // log_var = 0 -> unit sigma -> z = mu + eps.
        let z1 = tape.reparameterize(mu, lv, vec![0.25, -0.5]).unwrap();
        assert_eq!(tape.value(z1).data(), &[1.25, -2.5]);
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        // mu = 1, log_var = ln 4: sample mean ~ 1, sample var ~ 4.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        use rand_distr::StandardNormal;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let mut tape = Tape::new();
            let mu = tape.constant(Tensor::scalar(1.0));
            let lv = tape.constant(Tensor::scalar(4.0_f64.ln()));
            let e: f64 = rng.sample(StandardNormal);
            let z = tape.reparameterize(mu, lv, vec![e]).unwrap();
            let v = tape.value(z).item();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var - 4.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn reparameterize_gradients() {
        // dz/dmu = 1 and dz/dlog_var = 0.5 * exp(0.5 lv) * eps, eps fixed.
        let params = params_with(&[
            ("mu", Tensor::vector(vec![0.3, -0.7])),
            ("lv", Tensor::vector(vec![0.2, -0.4])),
        ]);
        let eps = vec![0.9, -1.3];
        let mut tape = Tape::new();
        let mu = tape.param("mu", &params).unwrap();
        let lv = tape.param("lv", &params).unwrap();
        let z = tape.reparameterize(mu, lv, eps.clone()).unwrap();
        let loss = tape.sum(z);
        tape.backward(loss).unwrap();
        let grads = tape.param_grads(&params);
        assert_eq!(grads.get(0).data(), &[1.0, 1.0]);
        for (i, &e) in eps.iter().enumerate() {
            let expect = 0.5 * (0.5 * params.get("lv").unwrap().data()[i]).exp() * e;
            assert!((grads.get(1).data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_categorical_degenerate_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(
                sample_categorical(&[1.0, 0.0, 0.0, 0.0], &mut rng).unwrap(),
                0
            );
        }

        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let probs = [0.1, 0.2, 0.3, 0.4];
        for _ in 0..200 {
            assert_eq!(
                sample_categorical(&probs, &mut r1).unwrap(),
                sample_categorical(&probs, &mut r2).unwrap()
            );
        }
    }

    #[test]
    fn sample_categorical_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = [0.25; 4];
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_categorical(&probs, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.01, "frequency {f}");
        }
    }

    #[test]
    fn sample_categorical_rejects_unnormalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_categorical(&[0.5, 0.2], &mut rng).is_err());
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.1, -2.0, 3.5, 0.0]));
        let p = tape.softmax(x);
        let lp = tape.log_softmax(x);
        for (pv, lv) in tape.value(p).iter().zip(tape.value(lp).iter()) {
            assert!((pv.ln() - lv).abs() < 1e-12);
        }
    }
}
