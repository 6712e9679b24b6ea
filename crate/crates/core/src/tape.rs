//! Wengert tape for reverse-mode differentiation.
//!
//! A tape is built by one recorded forward pass and consumed by one backward
//! pass. Grad-free forwards never construct a tape at all; they call the same
//! kernels in `tensor` directly, which is what makes the probe passes cheap.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { lhs: NodeId, rhs: NodeId },
    AddRow { mat: NodeId, row: NodeId },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    /// x - constant, same shape; the constant does not affect the backward.
    SubConst { x: NodeId },
    /// Per-row softmax cross-entropy; value is the (n,) loss vector.
    SoftmaxXent { logits: NodeId, targets: Vec<usize> },
    /// Per-row mean squared error; value is the (n,) loss vector.
    MseRows { pred: NodeId, target: Tensor },
    /// Row-wise c + s + a/2 s^2 over projections s.
    QuadRows { proj: NodeId, curvature: Vec<f64> },
    /// Weighted sum with constant weights; value is a scalar.
    Dot { x: NodeId, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::UnrecordedNode(id));
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.check(lhs)?;
        self.check(rhs)?;
        let (a, b) = (&self.nodes[lhs].value, &self.nodes[rhs].value);
        if a.cols() != b.rows() {
            return Err(Error::ShapeMismatch {
                context: "matmul".into(),
                expected: format!("inner extent {}", a.cols()),
                actual: format!("{}", b.rows()),
            });
        }
        let value = tensor::matmul(a, b);
        Ok(self.push(value, Op::MatMul { lhs, rhs }))
    }

    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(mat)?;
        self.check(row)?;
        let (m, r) = (&self.nodes[mat].value, &self.nodes[row].value);
        if m.cols() != r.len() {
            return Err(Error::ShapeMismatch {
                context: "add_row".into(),
                expected: format!("row of length {}", m.cols()),
                actual: format!("{}", r.len()),
            });
        }
        let value = tensor::add_row(m, r);
        Ok(self.push(value, Op::AddRow { mat, row }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let value = tensor::relu(&self.nodes[x].value);
        Ok(self.push(value, Op::Relu { x }))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let value = tensor::tanh_map(&self.nodes[x].value);
        Ok(self.push(value, Op::Tanh { x }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let value = tensor::sigmoid_map(&self.nodes[x].value);
        Ok(self.push(value, Op::Sigmoid { x }))
    }

    pub fn sub_const(&mut self, x: NodeId, c: Tensor) -> Result<NodeId> {
        self.check(x)?;
        if self.nodes[x].value.shape() != c.shape() {
            return Err(Error::ShapeMismatch {
                context: "sub_const".into(),
                expected: format!("{:?}", self.nodes[x].value.shape()),
                actual: format!("{:?}", c.shape()),
            });
        }
        let value = tensor::sub(&self.nodes[x].value, &c);
        Ok(self.push(value, Op::SubConst { x }))
    }

    pub fn softmax_xent(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        self.check(logits)?;
        let l = &self.nodes[logits].value;
        let classes = l.cols();
        if l.rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                context: "softmax_xent".into(),
                expected: format!("{} targets", l.rows()),
                actual: format!("{}", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                num_classes: classes,
            });
        }
        let losses = tensor::softmax_xent_rows(l, &targets);
        let n = losses.len();
        Ok(self.push(
            Tensor::new(vec![n], losses)?,
            Op::SoftmaxXent { logits, targets },
        ))
    }

    pub fn mse_rows(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        self.check(pred)?;
        let p = &self.nodes[pred].value;
        if p.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                context: "mse_rows".into(),
                expected: format!("{:?}", p.shape()),
                actual: format!("{:?}", target.shape()),
            });
        }
        let losses = tensor::mse_rows(p, &target);
        let n = losses.len();
        Ok(self.push(
            Tensor::new(vec![n], losses)?,
            Op::MseRows { pred, target },
        ))
    }

    pub fn quad_rows(
        &mut self,
        proj: NodeId,
        curvature: Vec<f64>,
        offset: Vec<f64>,
    ) -> Result<NodeId> {
        self.check(proj)?;
        let s = &self.nodes[proj].value;
        if s.len() != curvature.len() || s.len() != offset.len() {
            return Err(Error::ShapeMismatch {
                context: "quad_rows".into(),
                expected: format!("{} coefficients", s.len()),
                actual: format!("{} / {}", curvature.len(), offset.len()),
            });
        }
        let losses = tensor::quad_loss_rows(s, &curvature, &offset);
        let n = losses.len();
        Ok(self.push(
            Tensor::new(vec![n], losses)?,
            Op::QuadRows { proj, curvature },
        ))
    }

    pub fn dot(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        self.check(x)?;
        let v = &self.nodes[x].value;
        if v.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                context: "dot".into(),
                expected: format!("{} weights", v.len()),
                actual: format!("{}", weights.len()),
            });
        }
        let value = Tensor::scalar(tensor::dot_weights(v, &weights));
        Ok(self.push(value, Op::Dot { x, weights }))
    }

    /// Reverse sweep from a scalar root; consumes the tape.
    pub fn backward(self, root: NodeId) -> Result<Gradients> {
        if root >= self.nodes.len() {
            return Err(Error::UnrecordedNode(root));
        }
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::NonScalarRoot(self.nodes[root].value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep for the caller
                }
                Op::MatMul { lhs, rhs } => {
                    let a = &self.nodes[*lhs].value;
                    let b = &self.nodes[*rhs].value;
                    // d_lhs = g @ b^T ; d_rhs = a^T @ g
                    let (n, k) = (a.rows(), a.cols());
                    let m = b.cols();
                    let mut da = vec![0.0; n * k];
                    let mut db = vec![0.0; k * m];
                    let gd = g.data();
                    for i in 0..n {
                        for j in 0..m {
                            let gij = gd[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * b.data()[p * m + j];
                                db[p * m + j] += gij * a.data()[i * k + p];
                            }
                        }
                    }
                    accumulate(&mut grads, *lhs, Tensor::new(vec![n, k], da)?);
                    accumulate(&mut grads, *rhs, Tensor::new(vec![k, m], db)?);
                }
                Op::AddRow { mat, row } => {
                    let m = self.nodes[*mat].value.cols();
                    let n = self.nodes[*mat].value.rows();
                    let mut drow = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            drow[j] += g.data()[i * m + j];
                        }
                    }
                    let row_shape = self.nodes[*row].value.shape().to_vec();
                    accumulate(&mut grads, *mat, g.clone());
                    accumulate(&mut grads, *row, Tensor::new(row_shape, drow)?);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[*x].value;
                    let d: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::Tanh { x } => {
                    let y = &node.value;
                    let d: Vec<f64> = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yi, &gi)| gi * (1.0 - yi * yi))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::Sigmoid { x } => {
                    let y = &node.value;
                    let d: Vec<f64> = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yi, &gi)| gi * yi * (1.0 - yi))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::SubConst { x } => {
                    accumulate(&mut grads, *x, g);
                }
                Op::SoftmaxXent { logits, targets } => {
                    // d_logits[i] = (softmax(row_i) - onehot) * g_i
                    let l = &self.nodes[*logits].value;
                    let sm = tensor::softmax_rows(l);
                    let (n, m) = (l.rows(), l.cols());
                    let mut d = sm.into_data();
                    for i in 0..n {
                        d[i * m + targets[i]] -= 1.0;
                        let gi = g.data()[i];
                        for j in 0..m {
                            d[i * m + j] *= gi;
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![n, m], d)?);
                }
                Op::MseRows { pred, target } => {
                    let p = &self.nodes[*pred].value;
                    let (n, m) = (p.rows(), p.cols());
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        let gi = g.data()[i];
                        for j in 0..m {
                            let diff = p.data()[i * m + j] - target.data()[i * m + j];
                            d[i * m + j] = gi * 2.0 * diff / m as f64;
                        }
                    }
                    accumulate(&mut grads, *pred, Tensor::new(vec![n, m], d)?);
                }
                Op::QuadRows { proj, curvature } => {
                    let s = &self.nodes[*proj].value;
                    let d: Vec<f64> = s
                        .data()
                        .iter()
                        .zip(curvature)
                        .zip(g.data())
                        .map(|((&si, &ai), &gi)| gi * (1.0 + ai * si))
                        .collect();
                    accumulate(&mut grads, *proj, Tensor::new(s.shape().to_vec(), d)?);
                }
                Op::Dot { x, weights } => {
                    let scale = g.data()[0];
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let d: Vec<f64> = weights.iter().map(|w| w * scale).collect();
                    accumulate(&mut grads, *x, Tensor::new(shape, d)?);
                }
            }
        }

        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_quadratic_form() {
        // loss = w^T w at w = (1, 2) -> gradient (2, 4)
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let wt = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let q = tape.matmul(w, wt).unwrap();
        let loss = tape.dot(q, vec![1.0]).unwrap();
        let mut g = tape.backward(loss).unwrap();
        // Gradient splits across the two leaves holding the same values.
        let gw = g.take(w).unwrap();
        let gwt = g.take(wt).unwrap();
        let total: Vec<f64> = gw
            .data()
            .iter()
            .zip(gwt.data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(total, vec![2.0, 4.0]);
    }

    #[test]
    fn backward_tanh_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = tape.tanh(x).unwrap();
        let s = tape.dot(y, vec![1.0, 1.0, 1.0]).unwrap();
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sigmoid_sum_at_zero() {
        // loss = sum(sigmoid(w)) at w = 0 -> every gradient entry 0.25
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(vec![1, 4]));
        let s = tape.sigmoid(w).unwrap();
        let loss = tape.dot(s, vec![1.0; 4]).unwrap();
        let mut g = tape.backward(loss).unwrap();
        for v in g.take(w).unwrap().data() {
            assert_eq!(*v, 0.25);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarRoot(_))
        ));
    }

    #[test]
    fn unknown_node_rejected() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(3), Err(Error::UnrecordedNode(3))));
    }

    #[test]
    fn class_out_of_range_rejected() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 2]));
        assert!(matches!(
            tape.softmax_xent(logits, vec![2]),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn dot_gradient_is_weights() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap());
        let s = tape.dot(x, vec![0.5, 0.25, 0.25]).unwrap();
        assert_eq!(tape.value(s).data()[0], 5.0 * 0.5 + 6.0 * 0.25 + 7.0 * 0.25);
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(x).unwrap().data(), &[0.5, 0.25, 0.25]);
    }
}
