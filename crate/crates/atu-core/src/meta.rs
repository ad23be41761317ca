//! Gradient-based meta-learners: one- or multi-step MAML with full
//! second-order meta-gradients, the learned-per-parameter-rate variant
//! (MetaSGD), confidence-interval evaluation, and the adversarial task loss
//! used by the up-sampling networks.
//!
//! All adaptation happens at the tensor level on a shared tape, so losses
//! stay differentiable both with respect to the initial parameters and with
//! respect to the task data itself — the latter is what lets a task
//! generator receive gradients through the learner.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdError, Optimizer, ParamTensor, Tape, Tensor};
use crate::fmath;
use crate::nn::{self, NnError};
use crate::tasks::Task;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetaError {
    #[error("architecture needs at least input and output dims, got {dims}")]
    BadArchitecture { dims: usize },
    #[error("support set is empty")]
    EmptySupport,
    #[error("query set is empty")]
    EmptyQuery,
    #[error("task batch is empty")]
    EmptyBatch,
    #[error("adaptation needs at least one step")]
    ZeroSteps,
    #[error("task provides {have} support samples but {need} are required")]
    BadSupportCount { need: usize, have: usize },
    #[error("sample has dimension {got}, model expects {expect}")]
    BadInputDim { got: usize, expect: usize },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: f64, classes: usize },
    #[error("non-finite training signal: {details}")]
    NonFinite { details: String },
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

type Result<T> = core::result::Result<T, MetaError>;

/// Loss attached to the base network's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean squared error over query samples (regression).
    SquaredError,
    /// Softmax cross-entropy against integer labels (classification).
    CrossEntropy,
}

/// A fully-connected base learner plus its meta-learning state: the initial
/// parameters, the inner-loop rule (fixed rate, or learned per-parameter
/// rates), and the adaptation step count.
///
/// `params` stores the initial parameters first and, in learned-rates mode,
/// the per-parameter rate tensors after them, so one optimizer can update
/// everything in a single step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub layer_dims: Vec<usize>,
    pub loss_kind: LossKind,
    pub inner_steps: usize,
    pub inner_rate: f64,
    params: Vec<ParamTensor>,
    theta_count: usize,
    learned_rates: bool,
}

/// The model's tensors placed on one tape: initial parameters, and the
/// learned inner rates when present.
pub struct PlacedModel {
    pub theta: Vec<Tensor>,
    pub rates: Option<Vec<Tensor>>,
}

/// A task's samples as tape tensors, one column per sample. Regression
/// targets are `[1, n]`; classification targets are one-hot `[classes, n]`.
pub struct TaskTensors {
    pub support_x: Tensor,
    pub support_y: Tensor,
    pub query_x: Tensor,
    pub query_y: Tensor,
}

impl MetaModel {
    /// Builds a model with the given layer widths. Hidden layers use ReLU;
    /// the output layer is linear (logits for cross-entropy).
    pub fn new(
        layer_dims: &[usize],
        loss_kind: LossKind,
        inner_steps: usize,
        inner_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(MetaError::BadArchitecture {
                dims: layer_dims.len(),
            });
        }
        if inner_steps == 0 {
            return Err(MetaError::ZeroSteps);
        }
        let mut params = Vec::new();
        for (i, pair) in layer_dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            params.push(nn::init_uniform_fan_in(
                &alloc::format!("w{i}"),
                fan_out,
                fan_in,
                fan_in,
                rng,
            ));
            params.push(nn::init_zeros(&alloc::format!("b{i}"), fan_out, 1));
        }
        let theta_count = params.len();
        Ok(MetaModel {
            layer_dims: layer_dims.to_vec(),
            loss_kind,
            inner_steps,
            inner_rate,
            params,
            theta_count,
            learned_rates: false,
        })
    }

    /// The sinusoid-regression learner: 1 -> 40 -> 40 -> 1, squared error,
    /// one inner step at rate 0.01.
    pub fn regression_default(rng: &mut ChaCha8Rng) -> Self {
        Self::new(&[1, 40, 40, 1], LossKind::SquaredError, 1, 0.01, rng)
            .expect("fixed architecture is valid")
    }

    /// A vector-input classifier: input -> 64 -> 64 -> n_way logits,
    /// cross-entropy, five inner steps at rate 0.01.
    pub fn classifier(input_dim: usize, n_way: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(
            &[input_dim, 64, 64, n_way],
            LossKind::CrossEntropy,
            5,
            0.01,
            rng,
        )
        .expect("fixed architecture is valid")
    }

    /// Switches to learned per-parameter inner rates, initialized to the
    /// current fixed rate. The rate tensors join `params` and are trained by
    /// subsequent meta-steps.
    pub fn into_learned_rates(mut self) -> Self {
        if self.learned_rates {
            return self;
        }
        let rates: Vec<ParamTensor> = self.params[..self.theta_count]
            .iter()
            .map(|p| {
                ParamTensor::new(
                    alloc::format!("rate_{}", p.name),
                    p.rows,
                    p.cols,
                    vec![self.inner_rate; p.len()],
                )
            })
            .collect();
        self.params.extend(rates);
        self.learned_rates = true;
        self
    }

    pub fn has_learned_rates(&self) -> bool {
        self.learned_rates
    }

    /// Initial parameters only.
    pub fn theta(&self) -> &[ParamTensor] {
        &self.params[..self.theta_count]
    }

    /// Everything the outer optimizer trains (initial parameters, then any
    /// learned rates).
    pub fn trainables(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn trainables_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated architecture")
    }

    /// Places the model's tensors on a tape.
    pub fn place(&self, tape: &Tape) -> Result<PlacedModel> {
        let theta = nn::params_on_tape(tape, self.theta())?;
        let rates = if self.learned_rates {
            Some(nn::params_on_tape(tape, &self.params[self.theta_count..])?)
        } else {
            None
        };
        Ok(PlacedModel { theta, rates })
    }

    /// Forward pass with explicit parameter tensors (initial or adapted),
    /// in the same order as [`MetaModel::theta`]. Input is `[in_dim, n]`.
    pub fn forward(&self, tape: &Tape, theta: &[Tensor], x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.input_dim() {
            return Err(MetaError::BadInputDim {
                got: x.rows(),
                expect: self.input_dim(),
            });
        }
        let n_layers = self.layer_dims.len() - 1;
        let mut h = x.clone();
        for i in 0..n_layers {
            h = nn::linear(tape, &theta[2 * i], &theta[2 * i + 1], &h)?;
            if i + 1 < n_layers {
                h = tape.relu(&h)?;
            }
        }
        Ok(h)
    }

    /// Loss of the forward pass against targets shaped as in
    /// [`TaskTensors`].
    pub fn loss(&self, tape: &Tape, theta: &[Tensor], x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let pred = self.forward(tape, theta, x)?;
        match self.loss_kind {
            LossKind::SquaredError => {
                let d = tape.sub(&pred, y)?;
                Ok(tape.mean_all(&tape.mul(&d, &d)?)?)
            }
            LossKind::CrossEntropy => {
                let lsm = tape.log_softmax_cols(&pred)?;
                let picked = tape.sum_all(&tape.mul(&lsm, y)?)?;
                Ok(tape.scale(&picked, -1.0 / y.cols() as f64)?)
            }
        }
    }

    /// Converts a task into tape constants with the model's target layout.
    pub fn task_tensors(&self, tape: &Tape, task: &Task) -> Result<TaskTensors> {
        if task.support_len() == 0 {
            return Err(MetaError::EmptySupport);
        }
        if task.query_len() == 0 {
            return Err(MetaError::EmptyQuery);
        }
        let support_x = columns_tensor(tape, &task.support_x, self.input_dim())?;
        let query_x = columns_tensor(tape, &task.query_x, self.input_dim())?;
        let (support_y, query_y) = match self.loss_kind {
            LossKind::SquaredError => (
                columns_tensor(tape, &task.support_y, 1)?,
                columns_tensor(tape, &task.query_y, 1)?,
            ),
            LossKind::CrossEntropy => {
                let c = self.output_dim();
                (
                    one_hot_tensor(tape, &task.support_y, c)?,
                    one_hot_tensor(tape, &task.query_y, c)?,
                )
            }
        };
        Ok(TaskTensors {
            support_x,
            support_y,
            query_x,
            query_y,
        })
    }

    /// Gradient-descent adaptation on the support loss:
    /// `phi = theta - rate * grad` repeated `steps` times. With
    /// `create_graph`, the returned parameters are differentiable with
    /// respect to `theta`, any learned rates, and the support data; without
    /// it, the gradient is detached and later differentiation sees only the
    /// final explicit step (the first-order shortcut).
    pub fn inner_adapt(
        &self,
        tape: &Tape,
        placed: &PlacedModel,
        support_x: &Tensor,
        support_y: &Tensor,
        steps: usize,
        create_graph: bool,
    ) -> Result<Vec<Tensor>> {
        if steps == 0 {
            return Err(MetaError::ZeroSteps);
        }
        let mut current = placed.theta.clone();
        for _ in 0..steps {
            let loss = self.loss(tape, &current, support_x, support_y)?;
            let refs: Vec<&Tensor> = current.iter().collect();
            let grads = tape.grad(&loss, &refs, create_graph)?;
            let mut next = Vec::with_capacity(current.len());
            for (j, (p, g)) in current.iter().zip(&grads).enumerate() {
                let update = match &placed.rates {
                    Some(rates) => tape.mul(&rates[j], g)?,
                    None => tape.scale(g, self.inner_rate)?,
                };
                next.push(tape.sub(p, &update)?);
            }
            current = next;
        }
        Ok(current)
    }
}

fn columns_tensor(tape: &Tape, samples: &[Vec<f64>], dim: usize) -> Result<Tensor> {
    let n = samples.len();
    let mut values = vec![0.0; dim * n];
    for (j, s) in samples.iter().enumerate() {
        if s.len() != dim {
            return Err(MetaError::BadInputDim {
                got: s.len(),
                expect: dim,
            });
        }
        for (i, v) in s.iter().enumerate() {
            values[i * n + j] = *v;
        }
    }
    Ok(tape.constant(dim, n, values)?)
}

fn one_hot_tensor(tape: &Tape, labels: &[Vec<f64>], classes: usize) -> Result<Tensor> {
    let n = labels.len();
    let mut values = vec![0.0; classes * n];
    for (j, l) in labels.iter().enumerate() {
        let raw = l[0];
        let idx = raw as usize;
        if raw < 0.0 || raw != idx as f64 || idx >= classes {
            return Err(MetaError::LabelOutOfRange {
                label: raw,
                classes,
            });
        }
        values[idx * n + j] = 1.0;
    }
    Ok(tape.constant(classes, n, values)?)
}

/// One outer update: adapts on each task's support set with full
/// second-order gradients, averages the post-adaptation query losses, and
/// steps the optimizer on every trainable (including learned rates).
/// Returns the batch meta-loss.
pub fn meta_step(
    model: &mut MetaModel,
    opt: &mut Optimizer,
    batch: &[Task],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let tape = Tape::new();
    let placed = model.place(&tape)?;
    let mut total: Option<Tensor> = None;
    for task in batch {
        let tt = model.task_tensors(&tape, task)?;
        let phi = model.inner_adapt(
            &tape,
            &placed,
            &tt.support_x,
            &tt.support_y,
            model.inner_steps,
            true,
        )?;
        let lq = model.loss(&tape, &phi, &tt.query_x, &tt.query_y)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &lq)?,
            None => lq,
        });
    }
    let meta_loss = tape.scale(&total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let loss_value = meta_loss.item();
    if !loss_value.is_finite() {
        return Err(MetaError::NonFinite {
            details: alloc::format!("meta-loss is {loss_value}"),
        });
    }
    let mut wrt: Vec<&Tensor> = placed.theta.iter().collect();
    if let Some(rates) = &placed.rates {
        wrt.extend(rates.iter());
    }
    let grads = tape.grad(&meta_loss, &wrt, false)?;
    let grad_values: Vec<Vec<f64>> = grads.iter().map(Tensor::values).collect();
    if let Some(details) = crate::autodiff::describe_nonfinite(model.trainables(), &grad_values) {
        return Err(MetaError::NonFinite { details });
    }
    opt.step(model.trainables_mut(), &grad_values)?;
    Ok(loss_value)
}

/// Evaluation summary over a task set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Query loss per task, in input order.
    pub per_task: Vec<f64>,
    pub mean: f64,
    /// 1.96 * sample stddev / sqrt(n); 0 for a single task.
    pub half_width: f64,
    pub n: usize,
    /// Query accuracy stats (cross-entropy models only).
    pub accuracy_mean: Option<f64>,
    pub accuracy_half_width: Option<f64>,
}

/// Mean and normal-approximation 95% half-width, computed over a sorted
/// copy so the result is independent of input order.
fn summarize(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * fmath::sqrt(var / n as f64))
}

/// Adapts on the first `k_support` support samples of each task and
/// reports query-loss statistics (and accuracy for classifiers).
pub fn evaluate(
    model: &MetaModel,
    test_tasks: &[Task],
    k_support: usize,
    steps: usize,
) -> Result<EvalReport> {
    if test_tasks.is_empty() {
        return Err(MetaError::EmptyBatch);
    }
    let mut per_task = Vec::with_capacity(test_tasks.len());
    let mut accuracies = Vec::with_capacity(test_tasks.len());
    for task in test_tasks {
        if task.support_len() < k_support || k_support == 0 {
            return Err(MetaError::BadSupportCount {
                need: k_support,
                have: task.support_len(),
            });
        }
        let trimmed = Task {
            support_x: task.support_x[..k_support].to_vec(),
            support_y: task.support_y[..k_support].to_vec(),
            ..task.clone()
        };
        let tape = Tape::new();
        let placed = model.place(&tape)?;
        let tt = model.task_tensors(&tape, &trimmed)?;
        let phi = model.inner_adapt(&tape, &placed, &tt.support_x, &tt.support_y, steps, false)?;
        per_task.push(model.loss(&tape, &phi, &tt.query_x, &tt.query_y)?.item());
        if model.loss_kind == LossKind::CrossEntropy {
            let logits = model.forward(&tape, &phi, &tt.query_x)?;
            accuracies.push(accuracy_of(&logits, &trimmed.query_y));
        }
    }
    let (mean, half_width) = summarize(&per_task);
    let (accuracy_mean, accuracy_half_width) = if accuracies.is_empty() {
        (None, None)
    } else {
        let (m, h) = summarize(&accuracies);
        (Some(m), Some(h))
    };
    Ok(EvalReport {
        per_task,
        mean,
        half_width,
        n: test_tasks.len(),
        accuracy_mean,
        accuracy_half_width,
    })
}

fn accuracy_of(logits: &Tensor, labels: &[Vec<f64>]) -> f64 {
    let (c, n) = logits.shape();
    let v = logits.values();
    let mut hits = 0usize;
    for j in 0..n {
        let mut best = 0usize;
        for i in 1..c {
            if v[i * n + j] > v[best * n + j] {
                best = i;
            }
        }
        if best as f64 == labels[j][0] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// The adversarial task objective: how hard a task is for the current
/// learner. Defined as
/// `eta1 * L(phi, query) - eta2 * <grad_theta L(theta, support), grad_theta L(theta, query)>`
/// with `phi` the adapted parameters; larger values mean a harder,
/// less-aligned task. Differentiable with respect to the task data, so a
/// generator can maximize it; gradients stop at `theta` (the learner is not
/// updated through this loss).
pub fn adv_loss(
    tape: &Tape,
    model: &MetaModel,
    placed: &PlacedModel,
    tt: &TaskTensors,
    eta1: f64,
    eta2: f64,
) -> Result<Tensor> {
    let phi = model.inner_adapt(
        tape,
        placed,
        &tt.support_x,
        &tt.support_y,
        model.inner_steps,
        true,
    )?;
    let query_term = model.loss(tape, &phi, &tt.query_x, &tt.query_y)?;
    let theta_refs: Vec<&Tensor> = placed.theta.iter().collect();
    let ls = model.loss(tape, &placed.theta, &tt.support_x, &tt.support_y)?;
    let gs = tape.grad(&ls, &theta_refs, true)?;
    let lq = model.loss(tape, &placed.theta, &tt.query_x, &tt.query_y)?;
    let gq = tape.grad(&lq, &theta_refs, true)?;
    let mut align: Option<Tensor> = None;
    for (a, b) in gs.iter().zip(&gq) {
        let d = tape.dot(a, b)?;
        align = Some(match align {
            Some(t) => tape.add(&t, &d)?,
            None => d,
        });
    }
    let align = align.ok_or(MetaError::EmptyBatch)?;
    Ok(tape.sub(
        &tape.scale(&query_term, eta1)?,
        &tape.scale(&align, eta2)?,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    use crate::tasks::{sample_sine_task, DomainRanges};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn linear_model(w: f64, rate: f64) -> MetaModel {
        let mut m = MetaModel::new(&[1, 1], LossKind::SquaredError, 1, rate, &mut rng(0)).unwrap();
        m.trainables_mut()[0].values = vec![w];
        m.trainables_mut()[1].values = vec![0.0];
        m
    }

    fn flat_task(sx: &[f64], sy: &[f64], qx: &[f64], qy: &[f64]) -> Task {
        Task {
            support_x: sx.iter().map(|&v| vec![v]).collect(),
            support_y: sy.iter().map(|&v| vec![v]).collect(),
            query_x: qx.iter().map(|&v| vec![v]).collect(),
            query_y: qy.iter().map(|&v| vec![v]).collect(),
            sine: None,
            classes: None,
        }
    }

    #[test]
    fn regression_default_architecture() {
        let m = MetaModel::regression_default(&mut rng(1));
        assert_eq!(m.layer_dims, vec![1, 40, 40, 1]);
        assert_eq!(m.theta().len(), 6);
        assert_eq!(m.inner_steps, 1);
        assert_eq!(m.inner_rate, 0.01);
        assert!(!m.has_learned_rates());
    }

    #[test]
    fn one_step_adaptation_matches_hand_gradient() {
        // y = w*x, one support sample (1, 0), w = 1, rate 0.01:
        // L = w^2, dL/dw = 2w -> phi_w = 1 - 0.02 = 0.98.
        let m = linear_model(1.0, 0.01);
        let tape = Tape::new();
        let placed = m.place(&tape).unwrap();
        let tt = m
            .task_tensors(&tape, &flat_task(&[1.0], &[0.0], &[1.0], &[0.0]))
            .unwrap();
        let phi = m
            .inner_adapt(&tape, &placed, &tt.support_x, &tt.support_y, 1, true)
            .unwrap();
        assert!((phi[0].values()[0] - 0.98).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        // Perfect fit: targets already equal predictions.
        let m = linear_model(0.0, 0.01);
        let tape = Tape::new();
        let placed = m.place(&tape).unwrap();
        let tt = m
            .task_tensors(&tape, &flat_task(&[1.0, 2.0], &[0.0, 0.0], &[1.0], &[0.0]))
            .unwrap();
        let phi = m
            .inner_adapt(&tape, &placed, &tt.support_x, &tt.support_y, 1, true)
            .unwrap();
        assert_eq!(phi[0].values(), vec![0.0]);
        assert_eq!(phi[1].values(), vec![0.0]);
    }

    #[test]
    fn zeroed_learned_rates_freeze_adaptation() {
        let mut m = linear_model(1.0, 0.01).into_learned_rates();
        assert!(m.has_learned_rates());
        for p in m.trainables_mut().iter_mut().skip(2) {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let placed = m.place(&tape).unwrap();
        let tt = m
            .task_tensors(&tape, &flat_task(&[1.0], &[0.0], &[1.0], &[0.0]))
            .unwrap();
        let phi = m
            .inner_adapt(&tape, &placed, &tt.support_x, &tt.support_y, 1, true)
            .unwrap();
        assert_eq!(phi[0].values(), vec![1.0]);
    }

    #[test]
    fn meta_step_rejects_empty_batch_and_reports_loss() {
        let mut m = MetaModel::regression_default(&mut rng(2));
        let mut opt = Optimizer::adam(1e-3);
        assert!(matches!(
            meta_step(&mut m, &mut opt, &[]),
            Err(MetaError::EmptyBatch)
        ));
        let mut r = rng(3);
        let batch: Vec<Task> = (0..4)
            .map(|_| sample_sine_task(&DomainRanges::training_default(), 10, 10, &mut r).unwrap())
            .collect();
        let before = meta_step(&mut m, &mut opt, &batch).unwrap();
        assert!(before.is_finite());
        for _ in 0..40 {
            meta_step(&mut m, &mut opt, &batch).unwrap();
        }
        let after = meta_step(&mut m, &mut opt, &batch).unwrap();
        assert!(
            after < before,
            "repeated steps on a fixed batch should reduce its loss ({before} -> {after})"
        );
    }

    #[test]
    fn constant_query_loss_leaves_theta_unchanged() {
        // With weights at zero and ReLU dead... not guaranteed; instead use
        // a linear model whose query targets exactly match predictions for
        // any w after adaptation on a zero-gradient support set.
        let mut m = linear_model(0.0, 0.01);
        let mut opt = Optimizer::sgd(0.1);
        let batch = vec![flat_task(&[1.0], &[0.0], &[0.0], &[0.0])];
        // Support (1,0) with w=b=0: L=(0-0)^2 -> zero grads; query x=0 with
        // target 0: prediction b=0 -> loss 0 and zero meta-gradient.
        let before = m.theta().to_vec();
        meta_step(&mut m, &mut opt, &batch).unwrap();
        assert_eq!(m.theta(), &before[..]);
    }

    #[test]
    fn evaluate_zero_loss_model_and_single_task_width() {
        let m = linear_model(0.0, 0.01);
        let t = flat_task(&[1.0, 2.0], &[0.0, 0.0], &[3.0, 4.0], &[0.0, 0.0]);
        let report = evaluate(&m, &[t], 2, 1).unwrap();
        assert_eq!(report.mean, 0.0);
        assert_eq!(report.half_width, 0.0);
        assert_eq!(report.n, 1);
        assert!(report.accuracy_mean.is_none());
    }

    #[test]
    fn evaluate_mean_matches_per_task_average_and_ignores_order() {
        let m = MetaModel::regression_default(&mut rng(4));
        let mut r = rng(5);
        let mut tasks: Vec<Task> = (0..6)
            .map(|_| sample_sine_task(&DomainRanges::training_default(), 10, 20, &mut r).unwrap())
            .collect();
        let a = evaluate(&m, &tasks, 10, 1).unwrap();
        let manual: f64 = a.per_task.iter().sum::<f64>() / a.per_task.len() as f64;
        assert!((a.mean - manual).abs() < 1e-12);
        tasks.reverse();
        let b = evaluate(&m, &tasks, 10, 1).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.half_width.to_bits(), b.half_width.to_bits());
    }

    #[test]
    fn evaluate_rejects_undersized_support() {
        let m = linear_model(0.0, 0.01);
        let t = flat_task(&[1.0], &[0.0], &[1.0], &[0.0]);
        assert!(matches!(
            evaluate(&m, &[t], 5, 1),
            Err(MetaError::BadSupportCount { need: 5, have: 1 })
        ));
    }

    #[test]
    fn adv_loss_zero_weights_give_zero() {
        let m = MetaModel::regression_default(&mut rng(6));
        let mut r = rng(7);
        let task = sample_sine_task(&DomainRanges::training_default(), 5, 5, &mut r).unwrap();
        let tape = Tape::new();
        let placed = m.place(&tape).unwrap();
        let tt = m.task_tensors(&tape, &task).unwrap();
        let l = adv_loss(&tape, &m, &placed, &tt, 0.0, 0.0).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn adv_loss_with_query_equal_support_uses_gradient_norm() {
        let m = MetaModel::regression_default(&mut rng(8));
        let mut r = rng(9);
        let base = sample_sine_task(&DomainRanges::training_default(), 5, 5, &mut r).unwrap();
        let task = Task {
            query_x: base.support_x.clone(),
            query_y: base.support_y.clone(),
            ..base
        };
        let (eta1, eta2) = (0.7, 0.3);
        let tape = Tape::new();
        let placed = m.place(&tape).unwrap();
        let tt = m.task_tensors(&tape, &task).unwrap();
        let got = adv_loss(&tape, &m, &placed, &tt, eta1, eta2).unwrap().item();

        // Reference: eta1 * L(phi, support) - eta2 * ||grad L(theta, support)||^2.
        let tape2 = Tape::new();
        let placed2 = m.place(&tape2).unwrap();
        let tt2 = m.task_tensors(&tape2, &task).unwrap();
        let phi = m
            .inner_adapt(&tape2, &placed2, &tt2.support_x, &tt2.support_y, 1, true)
            .unwrap();
        let lq = m
            .loss(&tape2, &phi, &tt2.support_x, &tt2.support_y)
            .unwrap()
            .item();
        let ls = m
            .loss(&tape2, &placed2.theta, &tt2.support_x, &tt2.support_y)
            .unwrap();
        let refs: Vec<&Tensor> = placed2.theta.iter().collect();
        let gs = tape2.grad(&ls, &refs, false).unwrap();
        let norm_sq: f64 = gs
            .iter()
            .flat_map(|g| g.values())
            .map(|v| v * v)
            .sum();
        let want = eta1 * lq - eta2 * norm_sq;
        assert!(
            (got - want).abs() < 1e-9,
            "adv loss {got} vs reference {want}"
        );
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_small_only_when_peaked() {
        let m = MetaModel::classifier(2, 3, &mut rng(10));
        let tape = Tape::new();
        let placed = m.place(&tape).unwrap();
        let _ = placed;
        // Direct loss evaluation against hand-built logits.
        let y = one_hot_tensor(&tape, &[vec![1.0]], 3).unwrap();
        let peaked = tape.constant(3, 1, vec![-30.0, 30.0, -30.0]).unwrap();
        let uniform = tape.constant(3, 1, vec![0.0, 0.0, 0.0]).unwrap();
        let lsm_p = tape.log_softmax_cols(&peaked).unwrap();
        let lsm_u = tape.log_softmax_cols(&uniform).unwrap();
        let ce = |lsm: &Tensor| -> f64 {
            let picked = tape.sum_all(&tape.mul(lsm, &y).unwrap()).unwrap();
            -picked.item()
        };
        assert!(ce(&lsm_p) < 1e-12);
        assert!((ce(&lsm_u) - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let m = MetaModel::classifier(2, 3, &mut rng(11));
        let tape = Tape::new();
        let bad = Task {
            support_x: vec![vec![0.0, 0.0]],
            support_y: vec![vec![3.0]],
            query_x: vec![vec![0.0, 0.0]],
            query_y: vec![vec![0.0]],
            sine: None,
            classes: None,
        };
        assert!(matches!(
            m.task_tensors(&tape, &bad),
            Err(MetaError::LabelOutOfRange { classes: 3, .. })
        ));
    }

    #[test]
    fn classifier_evaluation_reports_accuracy() {
        let m = MetaModel::classifier(2, 2, &mut rng(12));
        let t = Task {
            support_x: vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            support_y: vec![vec![0.0], vec![1.0]],
            query_x: vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            query_y: vec![vec![0.0], vec![1.0]],
            sine: None,
            classes: None,
        };
        let report = evaluate(&m, &[t], 2, 5).unwrap();
        let acc = report.accuracy_mean.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(report.accuracy_half_width.is_some());
    }
}
