//! Trainable models exposing per-instance losses l_i(w).
//!
//! Two families share one interface: small MLPs (the generic case) and the
//! rank-1 quadratic problems from `oracle` (exactly known Hessians). The
//! training loops, probes, and weighting never distinguish between them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::oracle::QuadraticProblem;
use crate::param::{Layout, ParamVector};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};

/// Per-step pass counters: gradient-recorded forwards, grad-free forwards,
/// and backwards. The structural measure of training cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounters {
    pub fwd_recorded: usize,
    pub fwd_unrecorded: usize,
    pub bwd: usize,
}

impl PassCounters {
    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.fwd_recorded, self.fwd_unrecorded, self.bwd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    SoftmaxXent,
    Mse,
}

/// Width chain [d_in, ..., d_out]. A single entry is the identity model;
/// two entries make a pure linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub head: OutputHead,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, head: OutputHead) -> Result<Self> {
        if widths.is_empty() || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter(format!(
                "layer widths must be nonempty and positive, got {widths:?}"
            )));
        }
        Ok(MlpSpec {
            widths,
            activation,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn layout(&self) -> Arc<Layout> {
        let mut parts = Vec::new();
        for l in 0..self.num_layers() {
            parts.push((format!("w{l}"), vec![self.widths[l], self.widths[l + 1]]));
            parts.push((format!("b{l}"), vec![self.widths[l + 1]]));
        }
        if parts.is_empty() {
            // Identity model still needs a vector space to live in.
            return Layout::build(vec![("empty".into(), vec![0])]);
        }
        Layout::build(parts)
    }

    /// Xavier-style init: weights N(0, 2/(fan_in+fan_out)), biases zero.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let layout = self.layout();
        let mut w = ParamVector::zeros(layout.clone());
        for (idx, seg) in layout.segments().iter().enumerate() {
            if seg.shape.len() == 2 {
                let std = (2.0 / (seg.shape[0] + seg.shape[1]) as f64).sqrt();
                let vals: Vec<f64> = (0..seg.len()).map(|_| rng.normal(std)).collect();
                w.set_segment(idx, &vals);
            }
        }
        w
    }

    fn check_inputs(&self, inputs: &Tensor) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "mlp forward".into(),
                expected: format!("input dimension {}", self.input_dim()),
                actual: format!("{}", inputs.cols()),
            });
        }
        Ok(())
    }

    /// Grad-free forward: per-instance outputs, no tape state at all.
    pub fn forward(&self, w: &ParamVector, inputs: &Tensor) -> Result<Tensor> {
        self.check_inputs(inputs)?;
        let mut x = inputs.clone();
        for l in 0..self.num_layers() {
            let wt = w.segment_tensor(2 * l);
            let bt = w.segment_tensor(2 * l + 1);
            x = tensor::add_row(&tensor::matmul(&x, &wt), &bt);
            if l + 1 < self.num_layers() {
                x = match self.activation {
                    Activation::Relu => tensor::relu(&x),
                    Activation::Tanh => tensor::tanh_map(&x),
                };
            }
        }
        Ok(x)
    }

    /// Recorded forward: same kernel sequence as `forward`, pushed on a tape.
    /// Returns the output node and the parameter leaves in segment order.
    fn record_outputs(
        &self,
        tape: &mut Tape,
        w: &ParamVector,
        inputs: &Tensor,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_inputs(inputs)?;
        let mut param_nodes = Vec::new();
        let mut x = tape.leaf(inputs.clone());
        for l in 0..self.num_layers() {
            let wt = tape.leaf(w.segment_tensor(2 * l));
            let bt = tape.leaf(w.segment_tensor(2 * l + 1));
            param_nodes.push(wt);
            param_nodes.push(bt);
            x = tape.matmul(x, wt)?;
            x = tape.add_row(x, bt)?;
            if l + 1 < self.num_layers() {
                x = match self.activation {
                    Activation::Relu => tape.relu(x)?,
                    Activation::Tanh => tape.tanh(x)?,
                };
            }
        }
        Ok((x, param_nodes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class ids, one per instance.
    Classes(Vec<usize>),
    /// Regression targets, shape (N, d_out).
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(v.gather_rows(idx)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
    pub instance_ids: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Targets, instance_ids: Vec<usize>) -> Result<Self> {
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::InvalidParameter("batch must hold N >= 1 instances".into()));
        }
        if targets.len() != n || instance_ids.len() != n {
            return Err(Error::ShapeMismatch {
                context: "Batch::new".into(),
                expected: format!("{n} targets and ids"),
                actual: format!("{} targets, {} ids", targets.len(), instance_ids.len()),
            });
        }
        Ok(Batch {
            inputs,
            targets,
            instance_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch holding only instance `i` of this batch.
    pub fn single(&self, i: usize) -> Batch {
        Batch {
            inputs: self.inputs.gather_rows(&[i]),
            targets: self.targets.select(&[i]),
            instance_ids: vec![self.instance_ids[i]],
        }
    }
}

/// One l_i(w) per batch instance; nonnegative for both loss heads.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector(pub Vec<f64>);

impl LossVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Accuracy,
    Mse,
    MeanLoss,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Mse => "mse",
            MetricKind::MeanLoss => "mean_loss",
        }
    }

    /// Whether larger values are better.
    pub fn higher_is_better(&self) -> bool {
        matches!(self, MetricKind::Accuracy)
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Mlp(MlpSpec),
    Quadratic(QuadraticProblem),
}

impl From<MlpSpec> for Model {
    fn from(s: MlpSpec) -> Self {
        Model::Mlp(s)
    }
}

impl From<QuadraticProblem> for Model {
    fn from(p: QuadraticProblem) -> Self {
        Model::Quadratic(p)
    }
}

impl Model {
    pub fn layout(&self) -> Arc<Layout> {
        match self {
            Model::Mlp(s) => s.layout(),
            Model::Quadratic(p) => p.layout().clone(),
        }
    }

    pub fn initial_params(&self, rng: &mut Rng) -> ParamVector {
        match self {
            Model::Mlp(s) => s.init_params(rng),
            Model::Quadratic(p) => p.anchor().clone(),
        }
    }

    pub fn metric_kind(&self) -> MetricKind {
        match self {
            Model::Mlp(s) => match s.head {
                OutputHead::SoftmaxXent => MetricKind::Accuracy,
                OutputHead::Mse => MetricKind::Mse,
            },
            Model::Quadratic(_) => MetricKind::MeanLoss,
        }
    }

    fn eval_losses(&self, w: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
        match self {
            Model::Mlp(spec) => {
                let out = spec.forward(w, &batch.inputs)?;
                head_losses(spec.head, &out, &batch.targets)
            }
            Model::Quadratic(p) => p.losses_at(w, &batch.instance_ids),
        }
    }

    /// Record the per-instance loss graph; returns (tape, loss node,
    /// parameter leaves in segment order).
    fn record_losses(&self, w: &ParamVector, batch: &Batch) -> Result<(Tape, NodeId, Vec<NodeId>)> {
        let mut tape = Tape::new();
        match self {
            Model::Mlp(spec) => {
                let (out, params) = spec.record_outputs(&mut tape, w, &batch.inputs)?;
                let losses = match (&spec.head, &batch.targets) {
                    (OutputHead::SoftmaxXent, Targets::Classes(c)) => {
                        tape.softmax_xent(out, c.clone())?
                    }
                    (OutputHead::Mse, Targets::Values(t)) => tape.mse_rows(out, t.clone())?,
                    _ => {
                        return Err(Error::InvalidParameter(
                            "target kind does not match the loss head".into(),
                        ))
                    }
                };
                Ok((tape, losses, params))
            }
            Model::Quadratic(p) => {
                let (losses, param) = p.record_losses(&mut tape, w, &batch.instance_ids)?;
                Ok((tape, losses, vec![param]))
            }
        }
    }

    /// Per-instance losses l_i(w). With `record = false` this touches no tape
    /// state; with `record = true` it takes the recorded path (values are
    /// identical either way because both run the same kernels).
    pub fn per_instance_losses(
        &self,
        w: &ParamVector,
        batch: &Batch,
        record: bool,
        counters: &mut PassCounters,
    ) -> Result<LossVector> {
        if record {
            let (tape, losses, _) = self.record_losses(w, batch)?;
            counters.fwd_recorded += 1;
            Ok(LossVector(tape.value(losses).data().to_vec()))
        } else {
            counters.fwd_unrecorded += 1;
            Ok(LossVector(self.eval_losses(w, batch)?))
        }
    }

    /// Gradient of a weighted loss sum in one recorded forward/backward:
    /// the weights scale the per-instance loss terms before summation.
    fn weighted_gradient_inner(
        &self,
        w: &ParamVector,
        batch: &Batch,
        weights: &[f64],
        counters: &mut PassCounters,
    ) -> Result<(f64, ParamVector)> {
        let (mut tape, losses, params) = self.record_losses(w, batch)?;
        counters.fwd_recorded += 1;
        let root = tape.dot(losses, weights.to_vec())?;
        let scalar = tape.value(root).data()[0];
        let mut grads = tape.backward(root)?;
        counters.bwd += 1;

        let layout = self.layout();
        let mut flat = ParamVector::zeros(layout.clone());
        for (seg_idx, node) in params.iter().enumerate() {
            if let Some(g) = grads.take(*node) {
                flat.set_segment(seg_idx, g.data());
            }
        }
        Ok((scalar, flat))
    }

    /// (l(w), grad of l(w)) where l is the batch-mean loss.
    pub fn mean_loss_gradient(
        &self,
        w: &ParamVector,
        batch: &Batch,
        counters: &mut PassCounters,
    ) -> Result<(f64, ParamVector)> {
        let n = batch.len();
        let weights = vec![1.0 / n as f64; n];
        self.weighted_gradient_inner(w, batch, &weights, counters)
    }

    /// Gradient of sum_i g_i l_i(w); g must be nonnegative.
    pub fn weighted_loss_gradient(
        &self,
        w: &ParamVector,
        batch: &Batch,
        weights: &[f64],
        counters: &mut PassCounters,
    ) -> Result<ParamVector> {
        if weights.len() != batch.len() {
            return Err(Error::ShapeMismatch {
                context: "weighted_loss_gradient".into(),
                expected: format!("{} weights", batch.len()),
                actual: format!("{}", weights.len()),
            });
        }
        if let Some(&bad) = weights.iter().find(|&&g| g < 0.0 || !g.is_finite()) {
            return Err(Error::NegativeWeight(bad));
        }
        Ok(self.weighted_gradient_inner(w, batch, weights, counters)?.1)
    }

    /// (l_i(w), grad of l_i(w)) via a single-instance recorded pass.
    pub fn instance_loss_gradient(
        &self,
        w: &ParamVector,
        batch: &Batch,
        i: usize,
        counters: &mut PassCounters,
    ) -> Result<(f64, ParamVector)> {
        let single = batch.single(i);
        self.weighted_gradient_inner(w, &single, &[1.0], counters)
    }

    /// Evaluation metric over a full input/target set (grad-free).
    pub fn eval_metric(&self, w: &ParamVector, inputs: &Tensor, targets: &Targets) -> Result<f64> {
        match self {
            Model::Mlp(spec) => {
                let out = spec.forward(w, inputs)?;
                match (&spec.head, targets) {
                    (OutputHead::SoftmaxXent, Targets::Classes(c)) => {
                        let mut correct = 0usize;
                        for i in 0..out.rows() {
                            let row = out.row(i);
                            let pred = row
                                .iter()
                                .enumerate()
                                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                                .map(|(j, _)| j)
                                .unwrap_or(0);
                            if pred == c[i] {
                                correct += 1;
                            }
                        }
                        Ok(correct as f64 / out.rows() as f64)
                    }
                    (OutputHead::Mse, Targets::Values(t)) => {
                        let losses = tensor::mse_rows(&out, t);
                        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
                    }
                    _ => Err(Error::InvalidParameter(
                        "target kind does not match the loss head".into(),
                    )),
                }
            }
            Model::Quadratic(p) => {
                let ids: Vec<usize> = (0..p.len()).collect();
                let losses = p.losses_at(w, &ids)?;
                Ok(losses.iter().sum::<f64>() / losses.len() as f64)
            }
        }
    }
}

fn head_losses(head: OutputHead, outputs: &Tensor, targets: &Targets) -> Result<Vec<f64>> {
    match (head, targets) {
        (OutputHead::SoftmaxXent, Targets::Classes(c)) => {
            let classes = outputs.cols();
            if let Some(&bad) = c.iter().find(|&&t| t >= classes) {
                return Err(Error::ClassOutOfRange {
                    class: bad,
                    num_classes: classes,
                });
            }
            Ok(tensor::softmax_xent_rows(outputs, c))
        }
        (OutputHead::Mse, Targets::Values(t)) => {
            if t.shape() != outputs.shape() {
                return Err(Error::ShapeMismatch {
                    context: "mse targets".into(),
                    expected: format!("{:?}", outputs.shape()),
                    actual: format!("{:?}", t.shape()),
                });
            }
            Ok(tensor::mse_rows(outputs, t))
        }
        _ => Err(Error::InvalidParameter(
            "target kind does not match the loss head".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_batch(inputs: Tensor, classes: Vec<usize>) -> Batch {
        let n = inputs.rows();
        Batch::new(inputs, Targets::Classes(classes), (0..n).collect()).unwrap()
    }

    #[test]
    fn identity_model_passes_input_through() {
        let spec = MlpSpec::new(vec![3], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
        let w = ParamVector::zeros(spec.layout());
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = spec.forward(&w, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn single_linear_layer_analytic() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Relu, OutputHead::Mse).unwrap();
        let mut w = ParamVector::zeros(spec.layout());
        w.set_segment(0, &[2.0]);
        w.set_segment(1, &[0.0]);
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let y = spec.forward(&w, &x).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn forward_deterministic_across_invocations() {
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
        let w = spec.init_params(&mut Rng::new(7));
        let w2 = spec.init_params(&mut Rng::new(7));
        assert_eq!(w.data(), w2.data());
        let x = Tensor::new(vec![2, 4], (0..8).map(|v| v as f64 * 0.1).collect()).unwrap();
        let y1 = spec.forward(&w, &x).unwrap();
        let y2 = spec.forward(&w, &x).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn forward_shape_mismatch_is_descriptive() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Relu, OutputHead::Mse).unwrap();
        let w = ParamVector::zeros(spec.layout());
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let err = spec.forward(&w, &x).unwrap_err();
        assert!(err.to_string().contains("input dimension 3"), "{err}");
    }

    #[test]
    fn uniform_logits_loss_is_ln2() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = ParamVector::zeros(spec.layout()); // zero weights -> logits (0, 0)
        let batch = class_batch(Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(), vec![0, 1]);
        let mut c = PassCounters::default();
        let l = model.per_instance_losses(&w, &batch, false, &mut c).unwrap();
        for v in l.values() {
            assert!((v - 2f64.ln()).abs() < 1e-12);
        }
        assert_eq!(c.as_tuple(), (0, 1, 0));
    }

    #[test]
    fn mse_zero_when_prediction_equals_target() {
        let spec = MlpSpec::new(vec![2], Activation::Relu, OutputHead::Mse).unwrap();
        let model = Model::from(spec.clone());
        let w = ParamVector::zeros(spec.layout());
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let batch = Batch::new(x.clone(), Targets::Values(x), vec![0, 1]).unwrap();
        let mut c = PassCounters::default();
        let l = model.per_instance_losses(&w, &batch, false, &mut c).unwrap();
        assert_eq!(l.values(), &[0.0, 0.0]);
    }

    #[test]
    fn recorded_and_unrecorded_losses_identical() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = spec.init_params(&mut Rng::new(11));
        let x = Tensor::new(vec![4, 3], (0..12).map(|v| (v as f64).sin()).collect()).unwrap();
        let batch = class_batch(x, vec![0, 1, 1, 0]);
        let mut c = PassCounters::default();
        let a = model.per_instance_losses(&w, &batch, false, &mut c).unwrap();
        let b = model.per_instance_losses(&w, &batch, true, &mut c).unwrap();
        // 0 ulp: bit-identical.
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(c.as_tuple(), (1, 1, 0));
    }

    #[test]
    fn mean_gradient_on_duplicated_batch_equals_single_instance() {
        let spec = MlpSpec::new(vec![2, 4, 2], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = spec.init_params(&mut Rng::new(3));
        let row = vec![0.3, -0.7];
        let dup = class_batch(
            Tensor::new(vec![3, 2], [row.clone(), row.clone(), row.clone()].concat()).unwrap(),
            vec![1, 1, 1],
        );
        let single = class_batch(Tensor::new(vec![1, 2], row).unwrap(), vec![1]);
        let mut c = PassCounters::default();
        let (_, g_dup) = model.mean_loss_gradient(&w, &dup, &mut c).unwrap();
        let (_, g_one) = model.mean_loss_gradient(&w, &single, &mut c).unwrap();
        for (a, b) in g_dup.data().iter().zip(g_one.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_gradient_matches_per_instance_average() {
        let spec = MlpSpec::new(vec![2, 3, 2], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = spec.init_params(&mut Rng::new(5));
        let batch = class_batch(
            Tensor::new(vec![2, 2], vec![0.1, 0.9, -0.4, 0.2]).unwrap(),
            vec![0, 1],
        );
        let mut c = PassCounters::default();
        let (_, g) = model.mean_loss_gradient(&w, &batch, &mut c).unwrap();
        let (_, g0) = model.instance_loss_gradient(&w, &batch, 0, &mut c).unwrap();
        let (_, g1) = model.instance_loss_gradient(&w, &batch, 1, &mut c).unwrap();
        let avg = g0.add(&g1).unwrap().scale(0.5);
        for (a, b) in g.data().iter().zip(avg.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_linear_model_mse_zero_targets_has_zero_gradient() {
        let spec = MlpSpec::new(vec![3, 1], Activation::Relu, OutputHead::Mse).unwrap();
        let model = Model::from(spec.clone());
        let w = ParamVector::zeros(spec.layout());
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let batch = Batch::new(x, Targets::Values(Tensor::zeros(vec![2, 1])), vec![0, 1]).unwrap();
        let mut c = PassCounters::default();
        let (loss, g) = model.mean_loss_gradient(&w, &batch, &mut c).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_gradient_uniform_equals_mean() {
        let spec = MlpSpec::new(vec![2, 4, 2], Activation::Relu, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = spec.init_params(&mut Rng::new(11));
        let batch = class_batch(
            Tensor::new(vec![3, 2], vec![0.2, 0.4, -0.3, 0.8, 1.0, -1.0]).unwrap(),
            vec![0, 1, 0],
        );
        let mut c = PassCounters::default();
        let (_, g_mean) = model.mean_loss_gradient(&w, &batch, &mut c).unwrap();
        let g_uni = model
            .weighted_loss_gradient(&w, &batch, &[1.0 / 3.0; 3], &mut c)
            .unwrap();
        for (a, b) in g_mean.data().iter().zip(g_uni.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_gradient_one_hot_selects_instance() {
        let spec = MlpSpec::new(vec![2, 3, 2], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = spec.init_params(&mut Rng::new(11));
        let batch = class_batch(
            Tensor::new(vec![3, 2], vec![0.2, 0.4, -0.3, 0.8, 1.0, -1.0]).unwrap(),
            vec![0, 1, 0],
        );
        let mut c = PassCounters::default();
        let g_hot = model
            .weighted_loss_gradient(&w, &batch, &[0.0, 1.0, 0.0], &mut c)
            .unwrap();
        let (_, g_inst) = model.instance_loss_gradient(&w, &batch, 1, &mut c).unwrap();
        for (a, b) in g_hot.data().iter().zip(g_inst.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_gradient_matches_per_instance_sum() {
        let spec = MlpSpec::new(vec![2, 4, 2], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = spec.init_params(&mut Rng::new(11));
        let batch = class_batch(
            Tensor::new(vec![4, 2], vec![0.2, 0.4, -0.3, 0.8, 1.0, -1.0, 0.0, 0.5]).unwrap(),
            vec![0, 1, 0, 1],
        );
        let g = [0.3, 1.7, 0.05, 2.2];
        let mut c = PassCounters::default();
        let combined = model.weighted_loss_gradient(&w, &batch, &g, &mut c).unwrap();
        let mut acc = ParamVector::zeros(model.layout());
        for (i, gi) in g.iter().enumerate() {
            let (_, grad) = model.instance_loss_gradient(&w, &batch, i, &mut c).unwrap();
            acc = acc.add_scaled(*gi, &grad).unwrap();
        }
        for (a, b) in combined.data().iter().zip(acc.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn negative_weight_rejected() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = ParamVector::zeros(spec.layout());
        let batch = class_batch(Tensor::zeros(vec![2, 2]), vec![0, 1]);
        let mut c = PassCounters::default();
        assert!(matches!(
            model.weighted_loss_gradient(&w, &batch, &[0.5, -0.1], &mut c),
            Err(Error::NegativeWeight(_))
        ));
    }

    #[test]
    fn class_target_out_of_range_rejected() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = ParamVector::zeros(spec.layout());
        let batch = class_batch(Tensor::zeros(vec![1, 2]), vec![5]);
        let mut c = PassCounters::default();
        assert!(matches!(
            model.per_instance_losses(&w, &batch, false, &mut c),
            Err(Error::ClassOutOfRange { class: 5, num_classes: 2 })
        ));
    }

    #[test]
    fn mean_of_losses_equals_reported_mean_loss() {
        let spec = MlpSpec::new(vec![2, 5, 3], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = spec.init_params(&mut Rng::new(2));
        let batch = class_batch(
            Tensor::new(vec![3, 2], vec![0.5, 0.1, -0.2, 0.7, 0.9, -0.9]).unwrap(),
            vec![2, 0, 1],
        );
        let mut c = PassCounters::default();
        let l = model.per_instance_losses(&w, &batch, false, &mut c).unwrap();
        let (mean, _) = model.mean_loss_gradient(&w, &batch, &mut c).unwrap();
        assert!((l.mean() - mean).abs() < 1e-12);
    }

    #[test]
    fn triangle_inequality_of_gradient_norms() {
        // (1/N) sum ||grad l_i|| >= ||grad l|| for every sampled batch.
        let spec = MlpSpec::new(vec![3, 6, 2], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let mut rng = Rng::new(13);
        for trial in 0..20 {
            let w = spec.init_params(&mut rng);
            let n = 4;
            let data: Vec<f64> = (0..n * 3).map(|_| rng.normal(1.0)).collect();
            let classes: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let batch = class_batch(Tensor::new(vec![n, 3], data).unwrap(), classes);
            let mut c = PassCounters::default();
            let (_, g) = model.mean_loss_gradient(&w, &batch, &mut c).unwrap();
            let mut norm_sum = 0.0;
            for i in 0..n {
                let (_, gi) = model.instance_loss_gradient(&w, &batch, i, &mut c).unwrap();
                norm_sum += gi.norm_l2();
            }
            assert!(
                norm_sum / n as f64 >= g.norm_l2() - 1e-12,
                "trial {trial}: {} < {}",
                norm_sum / n as f64,
                g.norm_l2()
            );
        }
    }

    #[test]
    fn backward_linearity_in_loss_weights() {
        let spec = MlpSpec::new(vec![2, 4, 2], Activation::Tanh, OutputHead::SoftmaxXent).unwrap();
        let model = Model::from(spec.clone());
        let w = spec.init_params(&mut Rng::new(17));
        let batch = class_batch(
            Tensor::new(vec![2, 2], vec![0.3, -0.1, 0.8, 0.4]).unwrap(),
            vec![0, 1],
        );
        let (a, b) = (0.7, 2.3);
        let u = [1.0, 0.0];
        let v = [0.25, 0.75];
        let mixed: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let mut c = PassCounters::default();
        let gu = model.weighted_loss_gradient(&w, &batch, &u, &mut c).unwrap();
        let gv = model.weighted_loss_gradient(&w, &batch, &v, &mut c).unwrap();
        let gm = model.weighted_loss_gradient(&w, &batch, &mixed, &mut c).unwrap();
        let expect = gu.scale(a).add(&gv.scale(b)).unwrap();
        for (x, y) in gm.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
