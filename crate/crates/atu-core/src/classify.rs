//! Classification-task augmentation: memory-bank mixing for ground-truth
//! construction, an attention-based sample up-sampler, the interleaved
//! trainer that feeds generated tasks to the meta-learner, and the naive
//! mixing baselines it is compared against.
//!
//! A classification task here is class-sorted: all of class 0's support
//! samples first, then class 1's, and likewise for queries. The up-sampler
//! views a task as a patch of `K^s + K^q` one-shot slices (one sample per
//! class each) and perturbs every sample toward memory-bank vectors drawn
//! from classes outside the task: for each sample, the bank residuals
//! (concatenated channel-wise with a noise vector) pass through a mapping
//! network, an attention network turns them into a softmax-weighted
//! combination, and the weighted residual is added to the sample. Labels
//! are never altered.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdError, Optimizer, ParamTensor, Tape, Tensor};
use crate::emd::{self, EmdError};
use crate::meta::{self, MetaError, MetaModel, TaskTensors};
use crate::nn::{self, NnError};
use crate::tasks::{sample_beta, sample_synth_class_task, ClassPool, Task, TaskError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassError {
    #[error("task is not class-sorted with equal class sizes")]
    NotClassSorted,
    #[error("support size {support} or query size {query} not divisible by {n_way} classes")]
    RaggedClasses {
        support: usize,
        query: usize,
        n_way: usize,
    },
    #[error("memory bank needs {need} vectors of dim {dim}, got {got}")]
    BadBank { need: usize, got: usize, dim: usize },
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("no classes outside the task: pool has {available} spare, need at least 1")]
    NoDisjointClasses { available: usize },
    #[error("noise set has {got} vectors, expected {expect} of dim {expect_dim}")]
    BadNoise {
        got: usize,
        expect: usize,
        expect_dim: usize,
    },
    #[error("invalid configuration: {reason}")]
    BadConfig { reason: &'static str },
    #[error("unknown mixing variant '{got}'")]
    UnknownVariant { got: String },
    #[error("non-finite training signal: {details}")]
    NonFinite { details: String },
    #[error("learner parameters changed during an up-sampler update")]
    GradientLeak,
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Emd(#[from] EmdError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

type Result<T> = core::result::Result<T, ClassError>;

/// Hyper-parameters of the classification trainer and its up-sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAtuConfig {
    /// Beta-distribution shapes for the mixing coefficient.
    pub delta1: f64,
    pub delta2: f64,
    /// Generated tasks per input task.
    pub r: usize,
    /// Shared adversarial weight (both difficulty-term weights).
    pub eta: f64,
    /// Memory-bank size.
    pub k_memory: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub batch_size: usize,
    pub k_query: usize,
    /// Dimension of the noise vector concatenated to each residual.
    pub noise_dim: usize,
    pub upsampler_lr: f64,
}

impl Default for ClassAtuConfig {
    fn default() -> Self {
        ClassAtuConfig {
            delta1: 2.0,
            delta2: 2.0,
            r: 2,
            eta: 0.5,
            k_memory: 3,
            inner_steps: 5,
            inner_lr: 0.01,
            outer_lr: 1e-3,
            batch_size: 4,
            k_query: 15,
            noise_dim: 4,
            upsampler_lr: 1e-3,
        }
    }
}

impl ClassAtuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.k_memory == 0 || self.batch_size == 0 {
            return Err(ClassError::BadConfig {
                reason: "r, k_memory and batch_size must be positive",
            });
        }
        if self.inner_steps == 0 || self.k_query == 0 || self.noise_dim == 0 {
            return Err(ClassError::BadConfig {
                reason: "inner_steps, k_query and noise_dim must be positive",
            });
        }
        if !(self.delta1 > 0.0 && self.delta2 > 0.0) {
            return Err(ClassError::BadConfig {
                reason: "Beta shapes must be positive",
            });
        }
        Ok(())
    }
}

/// Class-sorted layout of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassLayout {
    pub n_way: usize,
    pub k_support: usize,
    pub k_query: usize,
    pub dim: usize,
}

impl ClassLayout {
    pub fn n_samples(&self) -> usize {
        self.n_way * (self.k_support + self.k_query)
    }
}

/// Reads and validates a task's class-sorted layout: labels must run
/// `0..n_way` in blocks of equal size in both support and query sets.
pub fn class_layout(task: &Task) -> Result<ClassLayout> {
    let n_way = task
        .support_y
        .iter()
        .chain(&task.query_y)
        .map(|y| y[0] as usize + 1)
        .max()
        .unwrap_or(0);
    if n_way == 0 || task.support_len() == 0 || task.query_len() == 0 {
        return Err(ClassError::NotClassSorted);
    }
    if task.support_len() % n_way != 0 || task.query_len() % n_way != 0 {
        return Err(ClassError::RaggedClasses {
            support: task.support_len(),
            query: task.query_len(),
            n_way,
        });
    }
    let k_support = task.support_len() / n_way;
    let k_query = task.query_len() / n_way;
    let block_ok = |ys: &[Vec<f64>], k: usize| {
        ys.iter()
            .enumerate()
            .all(|(i, y)| y[0] == (i / k) as f64)
    };
    if !block_ok(&task.support_y, k_support) || !block_ok(&task.query_y, k_query) {
        return Err(ClassError::NotClassSorted);
    }
    let dim = task.input_dim();
    if task
        .support_x
        .iter()
        .chain(&task.query_x)
        .any(|x| x.len() != dim)
    {
        return Err(ClassError::NotClassSorted);
    }
    Ok(ClassLayout {
        n_way,
        k_support,
        k_query,
        dim,
    })
}

/// A task regrouped as `K^s + K^q` one-shot slices; `slices[t][c]` is the
/// one sample of class `c` in slice `t` (support slices first).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPatch {
    pub layout: ClassLayout,
    pub slices: Vec<Vec<Vec<f64>>>,
}

/// Splits a class-sorted task into its one-shot patch.
pub fn split_to_patch(task: &Task) -> Result<ClassPatch> {
    let layout = class_layout(task)?;
    let mut slices = Vec::with_capacity(layout.k_support + layout.k_query);
    for s in 0..layout.k_support {
        slices.push(
            (0..layout.n_way)
                .map(|c| task.support_x[c * layout.k_support + s].clone())
                .collect(),
        );
    }
    for q in 0..layout.k_query {
        slices.push(
            (0..layout.n_way)
                .map(|c| task.query_x[c * layout.k_query + q].clone())
                .collect(),
        );
    }
    Ok(ClassPatch { layout, slices })
}

/// Memory bank: sample vectors from classes disjoint from the current
/// task.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub vectors: Vec<Vec<f64>>,
    /// Pool class behind each vector.
    pub classes: Vec<usize>,
}

impl MemoryBank {
    /// Draws `k` vectors from pool classes not in `exclude`. Classes may
    /// repeat; none may appear in `exclude`.
    pub fn sample(
        pool: &ClassPool,
        exclude: &[usize],
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(ClassError::EmptyBank);
        }
        let allowed: Vec<usize> = (0..pool.n_classes())
            .filter(|c| !exclude.contains(c))
            .collect();
        if allowed.is_empty() {
            return Err(ClassError::NoDisjointClasses { available: 0 });
        }
        let mut vectors = Vec::with_capacity(k);
        let mut classes = Vec::with_capacity(k);
        for _ in 0..k {
            let c = allowed[rng.gen_range(0..allowed.len())];
            vectors.push(pool.draw(c, rng));
            classes.push(c);
        }
        Ok(MemoryBank { vectors, classes })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if self.vectors.is_empty() || self.vectors.iter().any(|v| v.len() != dim) {
            return Err(ClassError::BadBank {
                need: self.vectors.len().max(1),
                got: self.vectors.len(),
                dim,
            });
        }
        Ok(())
    }

    /// Index of the vector nearest to `x` (Euclidean; ties to the lowest
    /// index).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (m, v) in self.vectors.iter().enumerate() {
            let d: f64 = v.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = m;
            }
        }
        best
    }
}

fn mix(x: &[f64], bank_vec: &[f64], lambda: f64) -> Vec<f64> {
    x.iter()
        .zip(bank_vec)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect()
}

/// Mixes every sample of the task toward its nearest bank vector with a
/// fixed coefficient: `x_hat = lambda * x + (1 - lambda) * nearest(x)`.
pub fn mix_toward_nearest(task: &Task, bank: &MemoryBank, lambda: f64) -> Result<Task> {
    let layout = class_layout(task)?;
    bank.check_dim(layout.dim)?;
    let mix_all = |xs: &[Vec<f64>]| {
        xs.iter()
            .map(|x| mix(x, &bank.vectors[bank.nearest(x)], lambda))
            .collect()
    };
    Ok(Task {
        support_x: mix_all(&task.support_x),
        query_x: mix_all(&task.query_x),
        ..task.clone()
    })
}

/// Builds the mixed target task: draws one Beta coefficient for the whole
/// task and mixes each sample with its nearest bank vector. Returns the
/// task and the drawn coefficient.
pub fn build_ground_truth(
    task: &Task,
    bank: &MemoryBank,
    delta1: f64,
    delta2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Task, f64)> {
    let lambda = sample_beta(rng, delta1, delta2);
    Ok((mix_toward_nearest(task, bank, lambda)?, lambda))
}

/// How a naive baseline picks the bank vector to mix with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixVariant {
    /// Fresh uniform bank pick per sample.
    RandomPerImage,
    /// One uniform bank pick per class, shared by the class's samples.
    RandomPerClass,
    /// Per class, the bank vector nearest to the class's first support
    /// sample, shared by the class's samples.
    NearestPerClass,
}

impl core::str::FromStr for MixVariant {
    type Err = ClassError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-per-image" => Ok(MixVariant::RandomPerImage),
            "random-per-class" => Ok(MixVariant::RandomPerClass),
            "nearest-per-class" => Ok(MixVariant::NearestPerClass),
            other => Err(ClassError::UnknownVariant {
                got: String::from(other),
            }),
        }
    }
}

/// Mixes a task per the variant's rule with a fixed coefficient.
pub fn mix_with_variant(
    task: &Task,
    bank: &MemoryBank,
    lambda: f64,
    variant: MixVariant,
    rng: &mut ChaCha8Rng,
) -> Result<Task> {
    let layout = class_layout(task)?;
    bank.check_dim(layout.dim)?;
    let pick_for_class: Vec<usize> = match variant {
        MixVariant::RandomPerImage => Vec::new(),
        MixVariant::RandomPerClass => (0..layout.n_way)
            .map(|_| rng.gen_range(0..bank.len()))
            .collect(),
        MixVariant::NearestPerClass => (0..layout.n_way)
            .map(|c| bank.nearest(&task.support_x[c * layout.k_support]))
            .collect(),
    };
    let mix_block = |xs: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng| {
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let m = match variant {
                    MixVariant::RandomPerImage => rng.gen_range(0..bank.len()),
                    _ => pick_for_class[i / k],
                };
                mix(x, &bank.vectors[m], lambda)
            })
            .collect()
    };
    let support_x = mix_block(&task.support_x, layout.k_support, rng);
    let query_x = mix_block(&task.query_x, layout.k_query, rng);
    Ok(Task {
        support_x,
        query_x,
        ..task.clone()
    })
}

/// One naive augmentation draw: Beta coefficient plus the variant's mixing
/// rule.
pub fn naive_mix_baseline(
    task: &Task,
    bank: &MemoryBank,
    delta1: f64,
    delta2: f64,
    variant: MixVariant,
    rng: &mut ChaCha8Rng,
) -> Result<Task> {
    let lambda = sample_beta(rng, delta1, delta2);
    mix_with_variant(task, bank, lambda, variant, rng)
}

// ---------------------------------------------------------------------------
// Attention up-sampler
// ---------------------------------------------------------------------------

/// Shape description of the classification up-sampler. The set feature
/// dimension equals the conv channel count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassArch {
    pub input_dim: usize,
    pub n_way: usize,
    pub k_support: usize,
    pub k_query: usize,
    pub k_memory: usize,
    pub noise_dim: usize,
    /// Conv/linear width used throughout.
    pub channels: usize,
}

impl ClassArch {
    pub fn with_default_widths(
        input_dim: usize,
        n_way: usize,
        k_support: usize,
        k_query: usize,
        cfg: &ClassAtuConfig,
    ) -> Self {
        ClassArch {
            input_dim,
            n_way,
            k_support,
            k_query,
            k_memory: cfg.k_memory,
            noise_dim: cfg.noise_dim,
            channels: 32,
        }
    }

    fn layout(&self) -> ClassLayout {
        ClassLayout {
            n_way: self.n_way,
            k_support: self.k_support,
            k_query: self.k_query,
            dim: self.input_dim,
        }
    }
}

// Parameter layout inside `ClassUpsamplerParams::params`.
const SE_OFF: usize = 0; // conv1 w/b, bn1 gamma/beta, conv2 w/b, bn2 gamma/beta
const AT_OFF: usize = 8; // conv1..3 w/b, lin1..3 w/b
const MP_OFF: usize = 20; // conv1..3 w/b
const CLASS_PARAM_COUNT: usize = 26;
const BN_EPS: f64 = 1e-5;

/// Weights of the classification up-sampler: batch-normed set encoder,
/// attention scorer, and residual mapping network.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassUpsamplerParams {
    arch: ClassArch,
    params: Vec<ParamTensor>,
}

impl ClassUpsamplerParams {
    pub fn new(arch: ClassArch, rng: &mut ChaCha8Rng) -> Self {
        let ch = arch.channels;
        let res_in = 1 + arch.noise_dim;
        let mut params = vec![
            nn::init_uniform_fan_in("se_conv1_w", ch, 3, 3, rng),
            nn::init_zeros("se_conv1_b", ch, 1),
            nn::init_ones("se_bn1_gamma", ch, 1),
            nn::init_zeros("se_bn1_beta", ch, 1),
            nn::init_uniform_fan_in("se_conv2_w", ch, ch * 3, ch * 3, rng),
            nn::init_zeros("se_conv2_b", ch, 1),
            nn::init_ones("se_bn2_gamma", ch, 1),
            nn::init_zeros("se_bn2_beta", ch, 1),
        ];
        params.extend([
            nn::init_uniform_fan_in("at_conv1_w", ch, res_in * 3, res_in * 3, rng),
            nn::init_zeros("at_conv1_b", ch, 1),
            nn::init_uniform_fan_in("at_conv2_w", ch, ch * 3, ch * 3, rng),
            nn::init_zeros("at_conv2_b", ch, 1),
            nn::init_uniform_fan_in("at_conv3_w", ch, ch * 3, ch * 3, rng),
            nn::init_zeros("at_conv3_b", ch, 1),
            nn::init_uniform_fan_in("at_lin1_w", ch, 2 * ch, 2 * ch, rng),
            nn::init_zeros("at_lin1_b", ch, 1),
            nn::init_uniform_fan_in("at_lin2_w", ch, ch, ch, rng),
            nn::init_zeros("at_lin2_b", ch, 1),
            nn::init_uniform_fan_in("at_lin3_w", 1, ch, ch, rng),
            nn::init_zeros("at_lin3_b", 1, 1),
        ]);
        params.extend([
            nn::init_uniform_fan_in("mp_conv1_w", ch, res_in * 3, res_in * 3, rng),
            nn::init_zeros("mp_conv1_b", ch, 1),
            nn::init_uniform_fan_in("mp_conv2_w", ch, ch * 3, ch * 3, rng),
            nn::init_zeros("mp_conv2_b", ch, 1),
            nn::init_uniform_fan_in("mp_conv3_w", 1, ch * 3, ch * 3, rng),
            nn::init_zeros("mp_conv3_b", 1, 1),
        ]);
        debug_assert_eq!(params.len(), CLASS_PARAM_COUNT);
        ClassUpsamplerParams { arch, params }
    }

    pub fn arch(&self) -> &ClassArch {
        &self.arch
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    /// Zeroes the mapping network, making the up-sampler an identity map.
    pub fn zero_mapping(&mut self) {
        for p in &mut self.params[MP_OFF..] {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Noise vectors, one per generated task.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPerturbation {
    pub vectors: Vec<Vec<f64>>,
}

impl ClassPerturbation {
    pub fn sample(r: usize, noise_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let vectors = (0..r)
            .map(|_| (0..noise_dim).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect())
            .collect();
        ClassPerturbation { vectors }
    }
}

/// Forward pass of the classification up-sampler kept on a tape.
pub struct ClassUpsampleGraph {
    /// One `[dim, n_samples]` matrix per generated task; columns follow the
    /// input task's sample order (support class-major, then query).
    pub generated: Vec<Tensor>,
    /// Attention weights per generated task, `[k_memory, n_samples]`.
    pub scores: Vec<Tensor>,
}

/// Samples of a task as an ordered flat list (support class-major, then
/// query class-major).
fn ordered_samples(task: &Task) -> Vec<&Vec<f64>> {
    task.support_x.iter().chain(task.query_x.iter()).collect()
}

/// Flattens a task's inputs in sample order into one vector (for
/// set-to-set distances between tasks).
pub fn class_task_vector(task: &Task) -> Vec<f64> {
    let mut out = Vec::with_capacity(task.support_len() * task.input_dim() * 2);
    for s in ordered_samples(task) {
        out.extend_from_slice(s);
    }
    out
}

fn check_class_inputs(
    arch: &ClassArch,
    layout: &ClassLayout,
    bank: &MemoryBank,
    noise: &ClassPerturbation,
) -> Result<()> {
    if *layout != arch.layout() {
        return Err(ClassError::NotClassSorted);
    }
    bank.check_dim(arch.input_dim)?;
    if bank.len() != arch.k_memory {
        return Err(ClassError::BadBank {
            need: arch.k_memory,
            got: bank.len(),
            dim: arch.input_dim,
        });
    }
    if noise.vectors.is_empty() || noise.vectors.iter().any(|v| v.len() != arch.noise_dim) {
        return Err(ClassError::BadNoise {
            got: noise.vectors.len(),
            expect: noise.vectors.len().max(1),
            expect_dim: arch.noise_dim,
        });
    }
    Ok(())
}

/// Set-encoder forward over the one-shot patch: each slice is one slot of
/// `n_way * dim` positions.
fn encode_patch(
    tape: &Tape,
    arch: &ClassArch,
    placed: &[Tensor],
    patch: &ClassPatch,
) -> Result<Tensor> {
    let slot_len = arch.n_way * arch.input_dim;
    let n_slots = patch.slices.len();
    let mut values = Vec::with_capacity(n_slots * slot_len);
    for slice in &patch.slices {
        for s in slice {
            values.extend_from_slice(s);
        }
    }
    let row = tape.constant(1, n_slots * slot_len, values)?;
    let h = nn::conv1d_slots(tape, &placed[SE_OFF], &placed[SE_OFF + 1], &row, 3, n_slots)?;
    let h = tape.relu(&nn::batch_norm(
        tape,
        &placed[SE_OFF + 2],
        &placed[SE_OFF + 3],
        &h,
        BN_EPS,
    )?)?;
    let h = nn::conv1d_slots(tape, &placed[SE_OFF + 4], &placed[SE_OFF + 5], &h, 3, n_slots)?;
    let h = tape.relu(&nn::batch_norm(
        tape,
        &placed[SE_OFF + 6],
        &placed[SE_OFF + 7],
        &h,
        BN_EPS,
    )?)?;
    let mut pooled = Vec::with_capacity(n_slots);
    for s in 0..n_slots {
        pooled.push(tape.max_cols(&tape.slice_cols(&h, s * slot_len, slot_len)?)?);
    }
    let refs: Vec<&Tensor> = pooled.iter().collect();
    Ok(tape.max_cols(&tape.concat_cols(&refs)?)?)
}

/// Builds the generator forward pass on `tape`: `r` perturbed copies of the
/// task's samples.
pub fn class_upsample_graph(
    tape: &Tape,
    up: &ClassUpsamplerParams,
    placed: &[Tensor],
    task: &Task,
    bank: &MemoryBank,
    noise: &ClassPerturbation,
) -> Result<ClassUpsampleGraph> {
    let arch = &up.arch;
    let layout = class_layout(task)?;
    check_class_inputs(arch, &layout, bank, noise)?;
    let patch = split_to_patch(task)?;
    let set_feature = encode_patch(tape, arch, placed, &patch)?;

    let samples = ordered_samples(task);
    let n_samples = samples.len();
    let k = arch.k_memory;
    let dim = arch.input_dim;
    let n_slots = n_samples * k;
    let res_in = 1 + arch.noise_dim;

    // Original samples as a matrix, one column per sample.
    let mut x_values = vec![0.0; dim * n_samples];
    for (j, s) in samples.iter().enumerate() {
        for (i, v) in s.iter().enumerate() {
            x_values[i * n_samples + j] = *v;
        }
    }
    let x_mat = tape.constant(dim, n_samples, x_values)?;

    let mut generated = Vec::with_capacity(noise.vectors.len());
    let mut all_scores = Vec::with_capacity(noise.vectors.len());
    for z in &noise.vectors {
        // Residual slots: for sample s and bank slot m, channel 0 carries
        // bank[m] - x_s along the feature positions and the noise channels
        // are constant.
        let mut in_values = vec![0.0; res_in * n_slots * dim];
        let row_len = n_slots * dim;
        for (s, x) in samples.iter().enumerate() {
            for m in 0..k {
                let col0 = (s * k + m) * dim;
                for p in 0..dim {
                    in_values[col0 + p] = bank.vectors[m][p] - x[p];
                }
                for (zi, zv) in z.iter().enumerate() {
                    let row = 1 + zi;
                    for p in 0..dim {
                        in_values[row * row_len + col0 + p] = *zv;
                    }
                }
            }
        }
        let input = tape.constant(res_in, row_len, in_values)?;

        // Attention scores: conv stack, per-slot pool, concat set feature,
        // linear stack to one logit per (sample, bank) pair, softmax over
        // the bank axis.
        let h = tape.relu(&nn::conv1d_slots(
            tape,
            &placed[AT_OFF],
            &placed[AT_OFF + 1],
            &input,
            3,
            n_slots,
        )?)?;
        let h = tape.relu(&nn::conv1d_slots(
            tape,
            &placed[AT_OFF + 2],
            &placed[AT_OFF + 3],
            &h,
            3,
            n_slots,
        )?)?;
        let h = tape.relu(&nn::conv1d_slots(
            tape,
            &placed[AT_OFF + 4],
            &placed[AT_OFF + 5],
            &h,
            3,
            n_slots,
        )?)?;
        let mut pooled = Vec::with_capacity(n_slots);
        for s in 0..n_slots {
            pooled.push(tape.max_cols(&tape.slice_cols(&h, s * dim, dim)?)?);
        }
        let refs: Vec<&Tensor> = pooled.iter().collect();
        let pooled = tape.concat_cols(&refs)?; // [ch, n_slots]
        let with_set = tape.concat_rows(&[&pooled, &tape.repeat_cols(&set_feature, n_slots)?])?;
        let a = tape.relu(&nn::linear(tape, &placed[AT_OFF + 6], &placed[AT_OFF + 7], &with_set)?)?;
        let a = tape.relu(&nn::linear(tape, &placed[AT_OFF + 8], &placed[AT_OFF + 9], &a)?)?;
        let logits = nn::linear(tape, &placed[AT_OFF + 10], &placed[AT_OFF + 11], &a)?; // [1, n_slots]
        let per_sample = tape.transpose(&tape.reshape(&logits, n_samples, k)?)?; // [k, n_samples]
        let scores = tape.softmax_cols(&per_sample)?;

        // Mapped residuals: conv stack down to one channel per slot.
        let m = tape.relu(&nn::conv1d_slots(
            tape,
            &placed[MP_OFF],
            &placed[MP_OFF + 1],
            &input,
            3,
            n_slots,
        )?)?;
        let m = tape.relu(&nn::conv1d_slots(
            tape,
            &placed[MP_OFF + 2],
            &placed[MP_OFF + 3],
            &m,
            3,
            n_slots,
        )?)?;
        let mapped = nn::conv1d_slots(tape, &placed[MP_OFF + 4], &placed[MP_OFF + 5], &m, 3, n_slots)?; // [1, n_slots*dim]

        // Weight each slot by its attention score and sum over the bank
        // axis per sample.
        let weights = tape.reshape(&tape.transpose(&scores)?, n_slots, 1)?;
        let weights = tape.reshape(&tape.repeat_cols(&weights, dim)?, 1, n_slots * dim)?;
        let weighted = tape.mul(&mapped, &weights)?;
        let by_slot = tape.transpose(&tape.reshape(&weighted, n_slots, dim)?)?; // [dim, n_slots]
        let mut per_sample_sum = Vec::with_capacity(n_samples);
        for s in 0..n_samples {
            per_sample_sum.push(tape.sum_cols(&tape.slice_cols(&by_slot, s * k, k)?)?);
        }
        let refs: Vec<&Tensor> = per_sample_sum.iter().collect();
        let delta = tape.concat_cols(&refs)?; // [dim, n_samples]
        generated.push(tape.add(&x_mat, &delta)?);
        all_scores.push(scores);
    }
    Ok(ClassUpsampleGraph {
        generated,
        scores: all_scores,
    })
}

/// Rebuilds a task from a generated sample matrix, preserving labels and
/// provenance.
fn task_from_matrix(template: &Task, layout: &ClassLayout, values: &[f64]) -> Task {
    let n_samples = layout.n_samples();
    let n_support = layout.n_way * layout.k_support;
    let column = |j: usize| -> Vec<f64> {
        (0..layout.dim).map(|i| values[i * n_samples + j]).collect()
    };
    Task {
        support_x: (0..n_support).map(column).collect(),
        query_x: (n_support..n_samples).map(|j| column(j)).collect(),
        ..template.clone()
    }
}

/// Generates `r` augmented tasks (pure forward pass).
pub fn class_upsample(
    up: &ClassUpsamplerParams,
    task: &Task,
    bank: &MemoryBank,
    noise: &ClassPerturbation,
) -> Result<Vec<Task>> {
    let tape = Tape::new();
    let placed = nn::params_on_tape(&tape, up.params())?;
    let graph = class_upsample_graph(&tape, up, &placed, task, bank, noise)?;
    let layout = class_layout(task)?;
    Ok(graph
        .generated
        .iter()
        .map(|g| task_from_matrix(task, &layout, &g.values()))
        .collect())
}

/// Sample tensors of a generated matrix for the learner: support columns
/// first, one-hot targets from the (unchanged) labels.
fn generated_task_tensors(
    tape: &Tape,
    gen: &Tensor,
    template: &Task,
    layout: &ClassLayout,
) -> Result<TaskTensors> {
    let n_support = layout.n_way * layout.k_support;
    let n_query = layout.n_way * layout.k_query;
    let one_hot = |labels: &[Vec<f64>]| -> Result<Tensor> {
        let n = labels.len();
        let mut values = vec![0.0; layout.n_way * n];
        for (j, l) in labels.iter().enumerate() {
            values[(l[0] as usize) * n + j] = 1.0;
        }
        Ok(tape.constant(layout.n_way, n, values)?)
    };
    Ok(TaskTensors {
        support_x: tape.slice_cols(gen, 0, n_support)?,
        support_y: one_hot(&template.support_y)?,
        query_x: tape.slice_cols(gen, n_support, n_query)?,
        query_y: one_hot(&template.query_y)?,
    })
}

/// Flattens a generated matrix into a task vector on the tape (sample-major
/// order, matching [`class_task_vector`]).
fn flatten_generated(tape: &Tape, gen: &Tensor) -> Result<Tensor> {
    let (d, n) = gen.shape();
    Ok(tape.reshape(&tape.transpose(gen)?, d * n, 1)?)
}

/// Per-iteration history of the interleaved classification trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTrainStats {
    pub meta_losses: Vec<f64>,
    pub upsampler_losses: Vec<f64>,
}

fn theta_fingerprint(model: &MetaModel) -> Vec<u64> {
    model
        .theta()
        .iter()
        .flat_map(|p| p.values.iter().map(|v| v.to_bits()))
        .collect()
}

/// Interleaved classification training. Each outer iteration samples a
/// batch of tasks; per task it draws a disjoint-class memory bank, builds
/// the mixed target task, generates `r` perturbed tasks, and picks one at
/// random for the learner's inner loop. The learner takes one second-order
/// update on the picked tasks' query losses (target tasks are never
/// trained on), then the up-sampler takes one update on its own objective:
/// set distance between generated tasks and the target (repeated to equal
/// size) minus the mean difficulty term, averaged over the batch.
///
/// Task sampling draws from `task_rng` only; all augmentation randomness
/// (banks, mixing coefficients, noise, picks) draws from `aug_rng`, so a
/// plain baseline run with the same `task_rng` sees the same task stream.
#[allow(clippy::too_many_arguments)]
pub fn class_atu_train(
    model: &mut MetaModel,
    up: &mut ClassUpsamplerParams,
    pool: &ClassPool,
    cfg: &ClassAtuConfig,
    iterations: usize,
    task_rng: &mut ChaCha8Rng,
    aug_rng: &mut ChaCha8Rng,
) -> Result<ClassTrainStats> {
    cfg.validate()?;
    let arch = up.arch.clone();
    let mut meta_opt = Optimizer::adam(cfg.outer_lr);
    let mut up_opt = Optimizer::adam(cfg.upsampler_lr);
    let mut stats = ClassTrainStats {
        meta_losses: Vec::with_capacity(iterations),
        upsampler_losses: Vec::with_capacity(iterations),
    };
    for _ in 0..iterations {
        let tape = Tape::new();
        let placed = nn::params_on_tape(&tape, up.params())?;
        let mut graphs = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        let mut templates = Vec::with_capacity(cfg.batch_size);
        let mut picked = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let task = sample_synth_class_task(
                pool,
                arch.n_way,
                arch.k_support,
                arch.k_query,
                task_rng,
            )?;
            let classes = task.classes.clone().unwrap_or_default();
            let bank = MemoryBank::sample(pool, &classes, cfg.k_memory, aug_rng)?;
            let (target, _lambda) =
                build_ground_truth(&task, &bank, cfg.delta1, cfg.delta2, aug_rng)?;
            let noise = ClassPerturbation::sample(cfg.r, cfg.noise_dim, aug_rng);
            let graph = class_upsample_graph(&tape, up, &placed, &task, &bank, &noise)?;
            let pick = aug_rng.gen_range(0..cfg.r);
            let layout = class_layout(&task)?;
            picked.push(task_from_matrix(
                &task,
                &layout,
                &graph.generated[pick].values(),
            ));
            graphs.push(graph);
            targets.push(target);
            templates.push((task, layout));
        }

        stats
            .meta_losses
            .push(meta::meta_step(model, &mut meta_opt, &picked)?);

        let before = theta_fingerprint(model);
        let model_placed = model.place(&tape)?;
        let mut total: Option<Tensor> = None;
        for ((graph, target), (template, layout)) in
            graphs.iter().zip(&targets).zip(&templates)
        {
            let gen_vecs = graph
                .generated
                .iter()
                .map(|g| flatten_generated(&tape, g))
                .collect::<Result<Vec<_>>>()?;
            let target_vec = tape.constant(
                layout.n_samples() * layout.dim,
                1,
                class_task_vector(target),
            )?;
            let target_reps: Vec<Tensor> =
                (0..cfg.r).map(|_| target_vec.clone()).collect();
            let emd_term = emd::emd_diff(&tape, &gen_vecs, &target_reps)?;
            let mut adv_sum: Option<Tensor> = None;
            for g in &graph.generated {
                let tt = generated_task_tensors(&tape, g, template, layout)?;
                let a = meta::adv_loss(&tape, model, &model_placed, &tt, cfg.eta, cfg.eta)?;
                adv_sum = Some(match adv_sum {
                    Some(s) => tape.add(&s, &a)?,
                    None => a,
                });
            }
            let adv_mean = tape.scale(&adv_sum.expect("r > 0"), 1.0 / cfg.r as f64)?;
            let task_loss = tape.sub(&emd_term, &adv_mean)?;
            total = Some(match total {
                Some(t) => tape.add(&t, &task_loss)?,
                None => task_loss,
            });
        }
        let loss = tape.scale(
            &total.expect("batch_size > 0"),
            1.0 / cfg.batch_size as f64,
        )?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(ClassError::NonFinite {
                details: format!("up-sampler objective is {value}"),
            });
        }
        let refs: Vec<&Tensor> = placed.iter().collect();
        let grads = tape.grad(&loss, &refs, false)?;
        let grad_values: Vec<Vec<f64>> = grads.iter().map(Tensor::values).collect();
        if let Some(details) = crate::autodiff::describe_nonfinite(up.params(), &grad_values) {
            return Err(ClassError::NonFinite { details });
        }
        up_opt.step(up.params_mut(), &grad_values)?;
        if theta_fingerprint(model) != before {
            return Err(ClassError::GradientLeak);
        }
        stats.upsampler_losses.push(value);
    }
    Ok(stats)
}

/// Plain meta-training baseline on the same pool: consumes tasks from
/// `task_rng` in the same order as [`class_atu_train`] does for matching
/// shot counts.
#[allow(clippy::too_many_arguments)]
pub fn class_maml_train(
    model: &mut MetaModel,
    pool: &ClassPool,
    n_way: usize,
    k_support: usize,
    k_query: usize,
    cfg: &ClassAtuConfig,
    iterations: usize,
    task_rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut opt = Optimizer::adam(cfg.outer_lr);
    let mut losses = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let batch = (0..cfg.batch_size)
            .map(|_| sample_synth_class_task(pool, n_way, k_support, k_query, task_rng))
            .collect::<core::result::Result<Vec<_>, _>>()?;
        losses.push(meta::meta_step(model, &mut opt, &batch)?);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg() -> ClassAtuConfig {
        ClassAtuConfig {
            r: 2,
            k_memory: 2,
            k_query: 2,
            noise_dim: 3,
            ..ClassAtuConfig::default()
        }
    }

    fn small_setup(seed: u64) -> (ClassPool, Task, MemoryBank) {
        let mut r = rng(seed);
        let pool = ClassPool::sample(6, 4, 0.2, &mut r);
        let task = sample_synth_class_task(&pool, 2, 1, 2, &mut r).unwrap();
        let bank =
            MemoryBank::sample(&pool, task.classes.as_ref().unwrap(), 2, &mut r).unwrap();
        (pool, task, bank)
    }

    #[test]
    fn config_defaults_match_contract() {
        let cfg = ClassAtuConfig::default();
        assert_eq!((cfg.delta1, cfg.delta2), (2.0, 2.0));
        assert_eq!(cfg.r, 2);
        assert_eq!(cfg.eta, 0.5);
        assert_eq!(cfg.k_memory, 3);
        assert_eq!(cfg.inner_steps, 5);
        assert_eq!(cfg.inner_lr, 0.01);
        assert_eq!(cfg.outer_lr, 1e-3);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.k_query, 15);
        cfg.validate().unwrap();
        let bad = ClassAtuConfig {
            r: 0,
            ..ClassAtuConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_counts_and_reassembly() {
        let mut r = rng(1);
        let pool = ClassPool::sample(8, 4, 0.2, &mut r);
        let task = sample_synth_class_task(&pool, 5, 1, 15, &mut r).unwrap();
        let patch = split_to_patch(&task).unwrap();
        assert_eq!(patch.slices.len(), 16);
        assert!(patch.slices.iter().all(|s| s.len() == 5));

        let two = sample_synth_class_task(&pool, 2, 1, 1, &mut r).unwrap();
        let patch2 = split_to_patch(&two).unwrap();
        assert_eq!(patch2.slices.len(), 2);

        // Reassembly: the patch holds exactly the task's sample multiset.
        let mut from_patch: Vec<Vec<f64>> =
            patch.slices.iter().flatten().cloned().collect();
        let mut from_task: Vec<Vec<f64>> = task
            .support_x
            .iter()
            .chain(&task.query_x)
            .cloned()
            .collect();
        let key = |v: &Vec<f64>| {
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        from_patch.sort_by_key(key);
        from_task.sort_by_key(key);
        assert_eq!(from_patch, from_task);
    }

    #[test]
    fn ragged_task_rejected() {
        let (_, mut task, _) = small_setup(2);
        task.query_x.pop();
        task.query_y.pop();
        assert!(matches!(
            split_to_patch(&task),
            Err(ClassError::RaggedClasses { .. })
        ));
    }

    #[test]
    fn bank_classes_are_disjoint_from_task() {
        let (_, task, bank) = small_setup(3);
        let task_classes = task.classes.unwrap();
        assert_eq!(bank.len(), 2);
        for c in &bank.classes {
            assert!(!task_classes.contains(c));
        }
        let mut r = rng(3);
        let tiny = ClassPool::sample(2, 4, 0.2, &mut r);
        let t = sample_synth_class_task(&tiny, 2, 1, 1, &mut r).unwrap();
        assert!(matches!(
            MemoryBank::sample(&tiny, t.classes.as_ref().unwrap(), 2, &mut r),
            Err(ClassError::NoDisjointClasses { available: 0 })
        ));
    }

    #[test]
    fn mixing_endpoints_are_identity_and_bank() {
        let (_, task, bank) = small_setup(4);
        let same = mix_toward_nearest(&task, &bank, 1.0).unwrap();
        assert_eq!(same.support_x, task.support_x);
        assert_eq!(same.query_x, task.query_x);
        let swapped = mix_toward_nearest(&task, &bank, 0.0).unwrap();
        for x in swapped.support_x.iter().chain(&swapped.query_x) {
            assert!(bank.vectors.contains(x));
        }
        // Labels untouched either way.
        assert_eq!(swapped.support_y, task.support_y);
        assert_eq!(swapped.query_y, task.query_y);
    }

    #[test]
    fn nearest_choice_matches_exhaustive_scan() {
        let mut r = rng(5);
        let bank = MemoryBank {
            vectors: (0..7)
                .map(|_| (0..4).map(|_| r.gen::<f64>()).collect())
                .collect(),
            classes: (10..17).collect(),
        };
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| r.gen::<f64>()).collect();
            let got = bank.nearest(&x);
            let want = bank
                .vectors
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(&x).map(|(p, q)| (p - q) * (p - q)).sum();
                    let db: f64 = b.iter().zip(&x).map(|(p, q)| (p - q) * (p - q)).sum();
                    da.total_cmp(&db)
                })
                .unwrap()
                .0;
            assert_eq!(got, want);
        }
    }

    #[test]
    fn bank_holding_copies_makes_mixing_a_noop() {
        let (_, task, _) = small_setup(6);
        let bank = MemoryBank {
            vectors: task
                .support_x
                .iter()
                .chain(&task.query_x)
                .cloned()
                .collect(),
            classes: vec![99; task.support_len() + task.query_len()],
        };
        let mixed = mix_toward_nearest(&task, &bank, 0.37).unwrap();
        for (a, b) in mixed
            .support_x
            .iter()
            .chain(&mixed.query_x)
            .zip(task.support_x.iter().chain(&task.query_x))
        {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ground_truth_lambda_is_shared_and_in_range() {
        let (_, task, bank) = small_setup(7);
        let mut r = rng(8);
        let (gt, lambda) = build_ground_truth(&task, &bank, 2.0, 2.0, &mut r).unwrap();
        assert!((0.0..=1.0).contains(&lambda));
        // Each mixed sample must equal lambda*x + (1-lambda)*nearest.
        for (x, gx) in task.support_x.iter().zip(&gt.support_x) {
            let want = mix(x, &bank.vectors[bank.nearest(x)], lambda);
            assert_eq!(gx, &want);
        }
    }

    #[test]
    fn variant_parsing_and_unknown_rejected() {
        use core::str::FromStr;
        assert_eq!(
            MixVariant::from_str("random-per-image").unwrap(),
            MixVariant::RandomPerImage
        );
        assert_eq!(
            MixVariant::from_str("random-per-class").unwrap(),
            MixVariant::RandomPerClass
        );
        assert_eq!(
            MixVariant::from_str("nearest-per-class").unwrap(),
            MixVariant::NearestPerClass
        );
        assert!(matches!(
            MixVariant::from_str("nearest"),
            Err(ClassError::UnknownVariant { .. })
        ));
    }

    #[test]
    fn per_class_variants_share_bank_vectors_within_a_class() {
        let mut r = rng(9);
        let pool = ClassPool::sample(8, 4, 0.2, &mut r);
        let task = sample_synth_class_task(&pool, 2, 2, 3, &mut r).unwrap();
        let bank =
            MemoryBank::sample(&pool, task.classes.as_ref().unwrap(), 3, &mut r).unwrap();
        let lambda = 0.5;
        // Recover which bank vector a mixed sample used:
        // b = (mixed - lambda*x) / (1 - lambda), matched to the bank.
        let recover = |mx: &Vec<f64>, x: &Vec<f64>| -> usize {
            let b: Vec<f64> = mx
                .iter()
                .zip(x)
                .map(|(m, xv)| (m - lambda * xv) / (1.0 - lambda))
                .collect();
            bank.vectors
                .iter()
                .position(|v| v.iter().zip(&b).all(|(a, bb)| (a - bb).abs() < 1e-9))
                .expect("recovered vector must be in the bank")
        };
        for variant in [MixVariant::RandomPerClass, MixVariant::NearestPerClass] {
            let mixed = mix_with_variant(&task, &bank, lambda, variant, &mut r).unwrap();
            for c in 0..2 {
                let first = recover(&mixed.support_x[c * 2], &task.support_x[c * 2]);
                let second = recover(&mixed.support_x[c * 2 + 1], &task.support_x[c * 2 + 1]);
                assert_eq!(first, second, "variant {variant:?} class {c}");
                // Queries of the class share the same pick.
                for q in 0..3 {
                    let qp = recover(&mixed.query_x[c * 3 + q], &task.query_x[c * 3 + q]);
                    assert_eq!(qp, first, "variant {variant:?} class {c} query {q}");
                }
                if variant == MixVariant::NearestPerClass {
                    assert_eq!(first, bank.nearest(&task.support_x[c * 2]));
                }
            }
        }
    }

    #[test]
    fn per_image_variant_varies_within_a_class() {
        let mut r = rng(10);
        let pool = ClassPool::sample(8, 4, 0.2, &mut r);
        let task = sample_synth_class_task(&pool, 2, 8, 2, &mut r).unwrap();
        let bank =
            MemoryBank::sample(&pool, task.classes.as_ref().unwrap(), 3, &mut r).unwrap();
        let lambda = 0.5;
        let mixed =
            mix_with_variant(&task, &bank, lambda, MixVariant::RandomPerImage, &mut r).unwrap();
        // With 8 samples in class 0 and 3 bank vectors, the chance all picks
        // agree is 3^-7; recover picks and expect at least two distinct.
        let mut picks = Vec::new();
        for s in 0..8 {
            let x = &task.support_x[s];
            let mx = &mixed.support_x[s];
            let b: Vec<f64> = mx
                .iter()
                .zip(x)
                .map(|(m, xv)| (m - lambda * xv) / (1.0 - lambda))
                .collect();
            let m = bank
                .vectors
                .iter()
                .position(|v| {
                    v.iter().zip(&b).all(|(a, bb)| (a - bb).abs() < 1e-9)
                })
                .expect("recovered vector must be in the bank");
            picks.push(m);
        }
        picks.sort_unstable();
        picks.dedup();
        assert!(picks.len() > 1, "per-image picks should vary");
    }

    #[test]
    fn upsample_count_shape_and_labels() {
        let (_, task, bank) = small_setup(11);
        let cfg = small_cfg();
        let arch = ClassArch {
            channels: 8,
            ..ClassArch::with_default_widths(4, 2, 1, 2, &cfg)
        };
        let up = ClassUpsamplerParams::new(arch, &mut rng(12));
        let noise = ClassPerturbation::sample(cfg.r, cfg.noise_dim, &mut rng(13));
        let out = class_upsample(&up, &task, &bank, &noise).unwrap();
        assert_eq!(out.len(), 2);
        for t in &out {
            assert_eq!(t.support_len(), task.support_len());
            assert_eq!(t.query_len(), task.query_len());
            assert_eq!(t.support_y, task.support_y);
            assert_eq!(t.query_y, task.query_y);
            assert_eq!(t.input_dim(), 4);
        }
    }

    #[test]
    fn zeroed_mapping_returns_original_task() {
        let (_, task, bank) = small_setup(14);
        let cfg = small_cfg();
        let arch = ClassArch {
            channels: 8,
            ..ClassArch::with_default_widths(4, 2, 1, 2, &cfg)
        };
        let mut up = ClassUpsamplerParams::new(arch, &mut rng(15));
        up.zero_mapping();
        let noise = ClassPerturbation::sample(cfg.r, cfg.noise_dim, &mut rng(16));
        let out = class_upsample(&up, &task, &bank, &noise).unwrap();
        for t in &out {
            assert_eq!(t.support_x, task.support_x);
            assert_eq!(t.query_x, task.query_x);
        }
    }

    #[test]
    fn attention_scores_form_a_simplex() {
        let (_, task, bank) = small_setup(17);
        let cfg = small_cfg();
        let arch = ClassArch {
            channels: 8,
            ..ClassArch::with_default_widths(4, 2, 1, 2, &cfg)
        };
        let up = ClassUpsamplerParams::new(arch, &mut rng(18));
        let noise = ClassPerturbation::sample(cfg.r, cfg.noise_dim, &mut rng(19));
        let tape = Tape::new();
        let placed = nn::params_on_tape(&tape, up.params()).unwrap();
        let graph = class_upsample_graph(&tape, &up, &placed, &task, &bank, &noise).unwrap();
        for scores in &graph.scores {
            let (k, n) = scores.shape();
            assert_eq!(k, 2);
            let v = scores.values();
            for j in 0..n {
                let col: f64 = (0..k).map(|i| v[i * n + j]).sum();
                assert!((col - 1.0).abs() < 1e-12);
                assert!((0..k).all(|i| v[i * n + j] >= 0.0));
            }
        }
    }

    #[test]
    fn single_bank_vector_gets_unit_score() {
        let mut r = rng(20);
        let pool = ClassPool::sample(6, 4, 0.2, &mut r);
        let task = sample_synth_class_task(&pool, 2, 1, 2, &mut r).unwrap();
        let bank =
            MemoryBank::sample(&pool, task.classes.as_ref().unwrap(), 1, &mut r).unwrap();
        let cfg = ClassAtuConfig {
            k_memory: 1,
            ..small_cfg()
        };
        let arch = ClassArch {
            channels: 8,
            ..ClassArch::with_default_widths(4, 2, 1, 2, &cfg)
        };
        let up = ClassUpsamplerParams::new(arch, &mut rng(21));
        let noise = ClassPerturbation::sample(cfg.r, cfg.noise_dim, &mut rng(22));
        let tape = Tape::new();
        let placed = nn::params_on_tape(&tape, up.params()).unwrap();
        let graph = class_upsample_graph(&tape, &up, &placed, &task, &bank, &noise).unwrap();
        for scores in &graph.scores {
            assert!(scores.values().iter().all(|&s| (s - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn short_interleaved_training_runs_and_isolates_learner() {
        let mut r = rng(23);
        let pool = ClassPool::sample(6, 4, 0.2, &mut r);
        let cfg = ClassAtuConfig {
            batch_size: 2,
            ..small_cfg()
        };
        let mut model = MetaModel::classifier(4, 2, &mut r);
        let arch = ClassArch {
            channels: 8,
            ..ClassArch::with_default_widths(4, 2, 1, 2, &cfg)
        };
        let mut up = ClassUpsamplerParams::new(arch, &mut r);
        let theta0: Vec<Vec<f64>> = model.theta().iter().map(|p| p.values.clone()).collect();
        let mut task_rng = rng(24);
        let mut aug_rng = rng(25);
        let stats = class_atu_train(
            &mut model,
            &mut up,
            &pool,
            &cfg,
            2,
            &mut task_rng,
            &mut aug_rng,
        )
        .unwrap();
        assert_eq!(stats.meta_losses.len(), 2);
        assert_eq!(stats.upsampler_losses.len(), 2);
        assert!(stats.meta_losses.iter().all(|v| v.is_finite()));
        assert!(stats.upsampler_losses.iter().all(|v| v.is_finite()));
        let theta1: Vec<Vec<f64>> = model.theta().iter().map(|p| p.values.clone()).collect();
        assert_ne!(theta0, theta1, "meta updates should move the learner");
    }

    #[test]
    fn baseline_consumes_tasks_and_learns() {
        let mut r = rng(26);
        let pool = ClassPool::sample(6, 4, 0.2, &mut r);
        let cfg = ClassAtuConfig {
            batch_size: 2,
            k_query: 2,
            ..ClassAtuConfig::default()
        };
        let mut model = MetaModel::classifier(4, 2, &mut r);
        let mut task_rng = rng(27);
        let losses =
            class_maml_train(&mut model, &pool, 2, 1, 2, &cfg, 3, &mut task_rng).unwrap();
        assert_eq!(losses.len(), 3);
        assert!(losses.iter().all(|v| v.is_finite()));
    }
}
