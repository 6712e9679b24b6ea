//! Outer minimization (SGD, Adam) and the training loops: base, SAM,
//! delta-SAM, and the exact per-instance SAM reference.
//!
//! Every step evaluates its outer gradient at the perturbed weights but
//! applies the update at the original unperturbed weights, and delta-SAM's
//! reweighting affects only the perturbation — the outer objective is always
//! the plain batch mean. Pass counters are asserted per step.

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{Batch, MetricKind, Model, PassCounters};
use crate::param::{cosine, ParamVector};
use crate::perturb::{apply, normalize_to_ball, random_direction, PerturbConfig};
use crate::reweight::{instance_weights, probe, InstanceWeights};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    m: ParamVector,
    v: ParamVector,
    step_count: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, layout: std::sync::Arc<crate::param::Layout>) -> Self {
        OptimizerState {
            config,
            m: ParamVector::zeros(layout.clone()),
            v: ParamVector::zeros(layout),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// One optimizer update; returns the new weights.
    pub fn update(&mut self, w: &ParamVector, grad: &ParamVector) -> Result<ParamVector> {
        self.step_count += 1;
        match self.config.kind {
            OptimizerKind::Sgd => w.add_scaled(-self.config.learning_rate, grad),
            OptimizerKind::Adam => {
                let OptimizerConfig {
                    learning_rate: lr,
                    beta1,
                    beta2,
                    epsilon,
                    ..
                } = self.config;
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let mut out = w.clone();
                for i in 0..w.dim() {
                    let g = grad.data()[i];
                    let m = beta1 * self.m.data()[i] + (1.0 - beta1) * g;
                    let v = beta2 * self.v.data()[i] + (1.0 - beta2) * g * g;
                    self.m.data_mut()[i] = m;
                    self.v.data_mut()[i] = v;
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    out.data_mut()[i] -= lr * mhat / (vhat.sqrt() + epsilon);
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    Base,
    Sam,
    DeltaSam,
    PerInstanceSam,
}

impl ModeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModeKind::Base => "base",
            ModeKind::Sam => "sam",
            ModeKind::DeltaSam => "delta-sam",
            ModeKind::PerInstanceSam => "per-instance-sam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ModeKind::Base),
            "sam" => Ok(ModeKind::Sam),
            "delta-sam" | "delta_sam" => Ok(ModeKind::DeltaSam),
            "per-instance-sam" | "per_instance_sam" => Ok(ModeKind::PerInstanceSam),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode '{other}' (expected base, sam, delta-sam, per-instance-sam)"
            ))),
        }
    }
}

/// Default cap on the batch size of the per-instance reference; above it the
/// 2N forward / 2N backward cost is refused rather than silently paid.
pub const DEFAULT_ORACLE_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerMode {
    pub kind: ModeKind,
    pub perturb: PerturbConfig,
    pub eta: f64,
    pub oracle_cap: usize,
}

impl TrainerMode {
    pub fn new(kind: ModeKind, perturb: PerturbConfig, eta: f64) -> Self {
        TrainerMode {
            kind,
            perturb,
            eta,
            oracle_cap: DEFAULT_ORACLE_CAP,
        }
    }

    pub fn base() -> Self {
        TrainerMode::new(ModeKind::Base, PerturbConfig::default(), 1e-4)
    }

    pub fn sam(perturb: PerturbConfig) -> Self {
        TrainerMode::new(ModeKind::Sam, perturb, 1e-4)
    }

    pub fn delta_sam(perturb: PerturbConfig, eta: f64) -> Self {
        TrainerMode::new(ModeKind::DeltaSam, perturb, eta)
    }

    pub fn per_instance_sam(perturb: PerturbConfig) -> Self {
        TrainerMode::new(ModeKind::PerInstanceSam, perturb, 1e-4)
    }
}

/// Per-step record: loss, perturbation size, weight summary, pass counters,
/// and the optional cosine between the step's perturbation and the exact
/// per-instance sharpness direction (quadratic models only).
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub mean_loss: f64,
    pub perturbation_norm: f64,
    pub g_summary: Option<(f64, f64, f64)>,
    pub counters: PassCounters,
    pub inst_direction_cosine: Option<f64>,
    /// The perturbation direction vanished; the step fell back to a plain
    /// gradient update on this batch.
    pub zero_grad_fallback: bool,
    /// All probe weights were zero; uniform weights were used instead.
    pub uniform_weight_fallback: bool,
}

impl StepReport {
    fn new(mean_loss: f64, counters: PassCounters) -> Self {
        StepReport {
            step: 0,
            mean_loss,
            perturbation_norm: 0.0,
            g_summary: None,
            counters,
            inst_direction_cosine: None,
            zero_grad_fallback: false,
            uniform_weight_fallback: false,
        }
    }

    /// The expected counter triple for a mode on a batch of size n, given
    /// that the step did not fall back.
    pub fn expected_counters(kind: ModeKind, n: usize) -> (usize, usize, usize) {
        match kind {
            ModeKind::Base => (1, 0, 1),
            ModeKind::Sam => (2, 0, 2),
            ModeKind::DeltaSam => (2, 3, 2),
            ModeKind::PerInstanceSam => (2 * n, 0, 2 * n),
        }
    }
}

/// One metrics-stream line: tab-separated key=value pairs. Optional fields
/// are omitted; `flags` is `-` when empty. f64 values use the shortest
/// round-trip formatting, so identical runs serialize identically.
pub fn metrics_line(mode: ModeKind, r: &StepReport) -> String {
    let mut parts = vec![
        format!("step={}", r.step),
        format!("mode={}", mode.name()),
        format!("mean_loss={}", r.mean_loss),
        format!("pert_norm={}", r.perturbation_norm),
        format!("fwd_rec={}", r.counters.fwd_recorded),
        format!("fwd_unrec={}", r.counters.fwd_unrecorded),
        format!("bwd={}", r.counters.bwd),
    ];
    if let Some((lo, mean, hi)) = r.g_summary {
        parts.push(format!("g_min={lo}"));
        parts.push(format!("g_mean={mean}"));
        parts.push(format!("g_max={hi}"));
    }
    if let Some(c) = r.inst_direction_cosine {
        parts.push(format!("cos_inst={c}"));
    }
    let mut flags = Vec::new();
    if r.zero_grad_fallback {
        flags.push("zero_grad");
    }
    if r.uniform_weight_fallback {
        flags.push("uniform_g");
    }
    parts.push(format!(
        "flags={}",
        if flags.is_empty() {
            "-".to_string()
        } else {
            flags.join(",")
        }
    ));
    parts.join("\t")
}

fn check_finite(loss: f64, grad: &ParamVector) -> Result<()> {
    if !loss.is_finite() || !grad.all_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    Ok(())
}

/// Exact per-instance sharpness direction for diagnostics; only quadratic
/// models expose it (closed form, no extra passes).
fn inst_direction(model: &Model, w: &ParamVector, batch: &Batch, rho: f64) -> Option<ParamVector> {
    match model {
        Model::Quadratic(p) => {
            let g = crate::oracle::grad_r_inst_for(p, w, rho, &batch.instance_ids);
            (g.norm_l2() > 0.0).then_some(g)
        }
        Model::Mlp(_) => None,
    }
}

fn diag_cosine(
    model: &Model,
    w: &ParamVector,
    batch: &Batch,
    rho: f64,
    eps: &ParamVector,
) -> Option<f64> {
    inst_direction(model, w, batch, rho).map(|d| cosine(eps, &d).unwrap_or(0.0))
}

/// One gradient step on the batch-mean loss. Counters (1, 0, 1).
pub fn base_step(
    state: &mut OptimizerState,
    model: &Model,
    w: &ParamVector,
    batch: &Batch,
) -> Result<(ParamVector, StepReport)> {
    let mut c = PassCounters::default();
    let (loss, grad) = model.mean_loss_gradient(w, batch, &mut c)?;
    check_finite(loss, &grad)?;
    let next = state.update(w, &grad)?;
    Ok((next, StepReport::new(loss, c)))
}

/// SAM: perturb along the batch-mean gradient, evaluate the outer gradient
/// at w + eps*, update at the original w. Counters (2, 0, 2).
pub fn sam_step(
    state: &mut OptimizerState,
    model: &Model,
    w: &ParamVector,
    batch: &Batch,
    mode: &TrainerMode,
) -> Result<(ParamVector, StepReport)> {
    let mut c = PassCounters::default();
    let (loss, grad) = model.mean_loss_gradient(w, batch, &mut c)?;
    check_finite(loss, &grad)?;
    match normalize_to_ball(&grad, &mode.perturb) {
        Err(Error::ZeroGradient { .. }) => {
            let next = state.update(w, &grad)?;
            let mut rep = StepReport::new(loss, c);
            rep.zero_grad_fallback = true;
            Ok((next, rep))
        }
        Err(e) => Err(e),
        Ok(eps) => {
            let applied = apply(w, &eps)?;
            let (_, outer) = model.mean_loss_gradient(applied.perturbed(), batch, &mut c)?;
            check_finite(loss, &outer)?;
            let original = applied.revert();
            assert!(
                original.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "apply/revert round trip must restore w bit-exact"
            );
            let next = state.update(&original, &outer)?;
            let mut rep = StepReport::new(loss, c);
            rep.perturbation_norm = eps.norm_l2();
            rep.inst_direction_cosine = diag_cosine(model, w, batch, mode.perturb.rho, &eps);
            Ok((next, rep))
        }
    }
}

/// delta-SAM: probe with one shared random direction (3 grad-free forwards),
/// reweigh the batch, perturb along the reweighted gradient, then update the
/// original w against the plain mean loss at w + eps*. Counters (2, 3, 2).
pub fn delta_sam_step(
    state: &mut OptimizerState,
    model: &Model,
    w: &ParamVector,
    batch: &Batch,
    mode: &TrainerMode,
    rng: &mut Rng,
) -> Result<(ParamVector, StepReport)> {
    let mut c = PassCounters::default();
    let r = random_direction(rng, &model.layout(), mode.perturb.rho)?;
    let probes = probe(model, w, batch, &r, &mut c)?;
    let loss = probes.l0.iter().sum::<f64>() / probes.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }

    let mut weights = instance_weights(&probes, mode.eta)?;
    let uniform_fallback = weights.all_zero();
    let g_summary = weights.summary();
    if uniform_fallback {
        weights = InstanceWeights::uniform(batch.len(), mode.eta);
    }

    let wgrad = model.weighted_loss_gradient(w, batch, &weights.g, &mut c)?;
    match normalize_to_ball(&wgrad, &mode.perturb) {
        Err(Error::ZeroGradient { .. }) => {
            let (_, grad) = model.mean_loss_gradient(w, batch, &mut c)?;
            check_finite(loss, &grad)?;
            let next = state.update(w, &grad)?;
            let mut rep = StepReport::new(loss, c);
            rep.g_summary = Some(g_summary);
            rep.zero_grad_fallback = true;
            rep.uniform_weight_fallback = uniform_fallback;
            Ok((next, rep))
        }
        Err(e) => Err(e),
        Ok(eps) => {
            let applied = apply(w, &eps)?;
            let (_, outer) = model.mean_loss_gradient(applied.perturbed(), batch, &mut c)?;
            check_finite(loss, &outer)?;
            let original = applied.revert();
            assert!(
                original.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "apply/revert round trip must restore w bit-exact"
            );
            let next = state.update(&original, &outer)?;
            let mut rep = StepReport::new(loss, c);
            rep.perturbation_norm = eps.norm_l2();
            rep.g_summary = Some(g_summary);
            rep.uniform_weight_fallback = uniform_fallback;
            rep.inst_direction_cosine = diag_cosine(model, w, batch, mode.perturb.rho, &eps);
            Ok((next, rep))
        }
    }
}

/// Exact per-instance SAM: every instance gets its own perturbation from its
/// own gradient. Counters (2N, 0, 2N); N is capped because each instance
/// costs two recorded forwards and two backwards.
pub fn per_instance_sam_step(
    state: &mut OptimizerState,
    model: &Model,
    w: &ParamVector,
    batch: &Batch,
    mode: &TrainerMode,
) -> Result<(ParamVector, StepReport)> {
    let n = batch.len();
    if n > mode.oracle_cap {
        return Err(Error::OracleCapExceeded {
            n,
            cap: mode.oracle_cap,
        });
    }
    let mut c = PassCounters::default();
    let mut loss_sum = 0.0;
    let mut outer = ParamVector::zeros(model.layout());
    let mut norm_sum = 0.0;
    for i in 0..n {
        let (li, gi) = model.instance_loss_gradient(w, batch, i, &mut c)?;
        loss_sum += li;
        let gnorm = gi.norm_l2();
        // Fitted instances with vanishing gradient get eps_i = 0: there is
        // no adversarial direction to follow, so the outer gradient is
        // evaluated at w itself (still one recorded pass, keeping 2N exact).
        let eps_i = if gnorm > mode.perturb.zero_grad_threshold {
            gi.scale(mode.perturb.rho / gnorm)
        } else {
            ParamVector::zeros(model.layout())
        };
        norm_sum += eps_i.norm_l2();
        let applied = apply(w, &eps_i)?;
        let (_, gpi) = model.instance_loss_gradient(applied.perturbed(), batch, i, &mut c)?;
        outer = outer.add(&gpi)?;
    }
    let mean_loss = loss_sum / n as f64;
    let outer = outer.scale(1.0 / n as f64);
    check_finite(mean_loss, &outer)?;
    let next = state.update(w, &outer)?;
    let mut rep = StepReport::new(mean_loss, c);
    rep.perturbation_norm = norm_sum / n as f64;
    Ok((next, rep))
}

/// Dispatch one step for the given mode.
pub fn step(
    state: &mut OptimizerState,
    model: &Model,
    w: &ParamVector,
    batch: &Batch,
    mode: &TrainerMode,
    rng: &mut Rng,
) -> Result<(ParamVector, StepReport)> {
    match mode.kind {
        ModeKind::Base => base_step(state, model, w, batch),
        ModeKind::Sam => sam_step(state, model, w, batch, mode),
        ModeKind::DeltaSam => delta_sam_step(state, model, w, batch, mode, rng),
        ModeKind::PerInstanceSam => per_instance_sam_step(state, model, w, batch, mode),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainerMode,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochEval {
    pub epoch: usize,
    pub train_metric: f64,
    pub test_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: MetricKind,
    pub per_epoch: Vec<EpochEval>,
    pub final_train: f64,
    pub final_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbortInfo {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub final_w: ParamVector,
    pub reports: Vec<StepReport>,
    pub eval: EvalReport,
    pub abort: Option<AbortInfo>,
}

// Named sub-streams of the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_PERTURB: u64 = 3;

/// Full training loop: fixed epoch budget, seeded batching, per-epoch
/// evaluation. Deterministic given the config. A non-finite loss aborts the
/// run and returns everything up to the last good step.
pub fn train(
    model: &Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.derive(STREAM_INIT);
    let mut shuffle_rng = root.derive(STREAM_SHUFFLE);
    let mut perturb_rng = root.derive(STREAM_PERTURB);

    let mut w = model.initial_params(&mut init_rng);
    let mut state = OptimizerState::new(cfg.optimizer, model.layout());
    let mut reports = Vec::new();
    let mut abort = None;
    let metric = model.metric_kind();
    let mut per_epoch = Vec::new();
    let mut step_idx = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        for batch in batches(train_set, cfg.batch_size, &mut shuffle_rng, cfg.shuffle)? {
            step_idx += 1;
            match step(&mut state, model, &w, &batch, &cfg.mode, &mut perturb_rng) {
                Ok((next, mut rep)) => {
                    rep.step = step_idx;
                    if !rep.zero_grad_fallback {
                        let expected =
                            StepReport::expected_counters(cfg.mode.kind, batch.len());
                        assert_eq!(
                            rep.counters.as_tuple(),
                            expected,
                            "pass-counter contract violated at step {step_idx}"
                        );
                    }
                    reports.push(rep);
                    w = next;
                }
                Err(Error::NonFiniteLoss { .. }) => {
                    abort = Some(AbortInfo {
                        step: step_idx,
                        message: format!("non-finite loss at step {step_idx}; run aborted"),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_metric = model.eval_metric(&w, &train_set.inputs, &train_set.targets)?;
        let test_metric = match test_set {
            Some(ds) => Some(model.eval_metric(&w, &ds.inputs, &ds.targets)?),
            None => None,
        };
        per_epoch.push(EpochEval {
            epoch,
            train_metric,
            test_metric,
        });
    }

    let final_train = model.eval_metric(&w, &train_set.inputs, &train_set.targets)?;
    let final_test = match test_set {
        Some(ds) => Some(model.eval_metric(&w, &ds.inputs, &ds.targets)?),
        None => None,
    };
    Ok(TrainRun {
        final_w: w,
        reports,
        eval: EvalReport {
            metric,
            per_epoch,
            final_train,
            final_test,
        },
        abort,
    })
}
