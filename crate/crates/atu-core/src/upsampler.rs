//! Task up-sampling for regression: a set-conditioned generator that turns
//! a small patch of tasks into a larger set of nearby tasks, trained to
//! match the local task distribution (earth-mover distance) while pushing
//! generated tasks toward regions the current learner finds hard (the
//! adversarial term), plus an interleaved trainer that feeds generated
//! tasks into meta-training.
//!
//! The generator has three parts:
//! * a set encoder: two convolutions over each task vector, per-task
//!   max-pooling, a per-task projection, and a max-pool over tasks into one
//!   permutation-invariant set feature;
//! * a coarse generator: its own (unshared) set encoder followed by three
//!   linear layers emitting `r_c * N_p` coarse task vectors;
//! * a decoder: three convolutions over each coarse task vector
//!   concatenated (channel-wise) with a noise vector and the set feature,
//!   producing a residual added to the coarse vector. Each coarse task is
//!   decoded once per noise vector, giving `r_c * r_d * N_p` outputs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdError, Optimizer, ParamTensor, Tape, Tensor};
use crate::emd::{self, EmdError, PointSet};
use crate::meta::{self, MetaError, MetaModel, PlacedModel, TaskTensors};
use crate::nn::{self, NnError};
use crate::tasks::{
    sample_sine_task, task_to_vector, vector_to_task, DomainRanges, Task, TaskError, TaskVector,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UpsamplerError {
    #[error("patch has {got} tasks, expected {expect}")]
    PatchSizeMismatch { got: usize, expect: usize },
    #[error("task vector has shots ({got_support},{got_query}), expected ({expect_support},{expect_query})")]
    VectorShapeMismatch {
        got_support: usize,
        got_query: usize,
        expect_support: usize,
        expect_query: usize,
    },
    #[error("perturbation set has {got} vectors of dim {got_dim}, expected {expect} of dim {expect}")]
    BadNoise { got: usize, got_dim: usize, expect: usize },
    #[error("ground-truth set has {got} tasks, expected {expect}")]
    BadGroundTruthSize { got: usize, expect: usize },
    #[error(
        "support-query distance needs equal shot counts, got ({k_support},{k_query})"
    )]
    SupportQueryMismatch { k_support: usize, k_query: usize },
    #[error("invalid configuration: {reason}")]
    BadConfig { reason: &'static str },
    #[error("non-finite training signal: {details}")]
    NonFinite { details: String },
    #[error("learner parameters changed during an up-sampler update")]
    GradientLeak,
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Emd(#[from] EmdError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

type Result<T> = core::result::Result<T, UpsamplerError>;

/// Loss weights, up-sampling factors, and schedule for the regression
/// up-sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct AtuConfig {
    /// Weight of the generated task's post-adaptation query loss in the
    /// difficulty term.
    pub eta1: f64,
    /// Weight of the support/query gradient-alignment product in the
    /// difficulty term.
    pub eta2: f64,
    /// Weight of the per-task support-vs-query distance penalty.
    pub eta3: f64,
    pub r_coarse: usize,
    pub r_detail: usize,
    /// Patch size: how many tasks the generator conditions on.
    pub n_patch: usize,
    /// Tasks sampled per iteration as the generator's matching target;
    /// must equal `r_coarse * r_detail * n_patch`.
    pub pool_size: usize,
    /// Up-sampler updates after which its weights freeze.
    pub max_iterations: usize,
    /// Fraction of meta-batches drawn from generated tasks.
    pub augment_ratio: f64,
    pub upsampler_lr: f64,
}

impl Default for AtuConfig {
    fn default() -> Self {
        AtuConfig {
            eta1: 8e-3,
            eta2: 4e-3,
            eta3: 3e-1,
            r_coarse: 2,
            r_detail: 4,
            n_patch: 8,
            pool_size: 64,
            max_iterations: 3750,
            augment_ratio: 0.2,
            upsampler_lr: 1e-3,
        }
    }
}

impl AtuConfig {
    /// Total up-sampling factor.
    pub fn r(&self) -> usize {
        self.r_coarse * self.r_detail
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_coarse == 0 || self.r_detail == 0 || self.n_patch == 0 {
            return Err(UpsamplerError::BadConfig {
                reason: "r_coarse, r_detail and n_patch must be positive",
            });
        }
        if self.pool_size != self.r() * self.n_patch {
            return Err(UpsamplerError::BadConfig {
                reason: "pool_size must equal r_coarse * r_detail * n_patch",
            });
        }
        if !(0.0..=1.0).contains(&self.augment_ratio) {
            return Err(UpsamplerError::BadConfig {
                reason: "augment_ratio must lie in [0, 1]",
            });
        }
        if !(self.eta1.is_finite() && self.eta2.is_finite() && self.eta3.is_finite()) {
            return Err(UpsamplerError::BadConfig {
                reason: "loss weights must be finite",
            });
        }
        Ok(())
    }
}

/// Shape description of the up-sampling network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpsamplerArch {
    pub k_support: usize,
    pub k_query: usize,
    pub n_patch: usize,
    pub r_coarse: usize,
    pub r_detail: usize,
    /// Channels of the two set-encoder convolutions.
    pub conv_channels: (usize, usize),
    /// Dimension of the pooled set feature.
    pub set_dim: usize,
    /// Width of the coarse generator's hidden linear layers.
    pub coarse_hidden: usize,
    /// Channels of the first two decoder convolutions (the third emits one
    /// channel).
    pub decoder_channels: (usize, usize),
}

impl UpsamplerArch {
    /// Default widths: encoder channels 64 then 128, 1024-dim set feature,
    /// decoder channels 128 then 64 then 1.
    pub fn regression_default(k_support: usize, k_query: usize, cfg: &AtuConfig) -> Self {
        UpsamplerArch {
            k_support,
            k_query,
            n_patch: cfg.n_patch,
            r_coarse: cfg.r_coarse,
            r_detail: cfg.r_detail,
            conv_channels: (64, 128),
            set_dim: 1024,
            coarse_hidden: 256,
            decoder_channels: (128, 64),
        }
    }

    /// Length of one task vector.
    pub fn seq_len(&self) -> usize {
        2 * (self.k_support + self.k_query)
    }

    /// Number of generated tasks per call.
    pub fn output_count(&self) -> usize {
        self.r_coarse * self.r_detail * self.n_patch
    }
}

// Parameter layout inside `UpsamplerParams::params`.
const GS_OFF: usize = 0;
const GC_ENC_OFF: usize = 6;
const GC_LIN_OFF: usize = 12;
const GD_OFF: usize = 18;
const PARAM_COUNT: usize = 24;

/// The generator's weights: set encoder, coarse generator (with its own
/// encoder), and decoder, in one flat list so a single optimizer can train
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplerParams {
    arch: UpsamplerArch,
    params: Vec<ParamTensor>,
}

fn encoder_params(prefix: &str, arch: &UpsamplerArch, rng: &mut ChaCha8Rng) -> Vec<ParamTensor> {
    let (c1, c2) = arch.conv_channels;
    vec![
        nn::init_uniform_fan_in(&format!("{prefix}_conv1_w"), c1, 3, 3, rng),
        nn::init_zeros(&format!("{prefix}_conv1_b"), c1, 1),
        nn::init_uniform_fan_in(&format!("{prefix}_conv2_w"), c2, c1 * 3, c1 * 3, rng),
        nn::init_zeros(&format!("{prefix}_conv2_b"), c2, 1),
        nn::init_uniform_fan_in(&format!("{prefix}_proj_w"), arch.set_dim, c2, c2, rng),
        nn::init_zeros(&format!("{prefix}_proj_b"), arch.set_dim, 1),
    ]
}

impl UpsamplerParams {
    pub fn new(arch: UpsamplerArch, rng: &mut ChaCha8Rng) -> Self {
        let l = arch.seq_len();
        let h = arch.coarse_hidden;
        let coarse_out = arch.r_coarse * arch.n_patch * l;
        let dec_in = 1 + arch.r_detail + arch.set_dim;
        let (d1, d2) = arch.decoder_channels;
        let mut params = encoder_params("gs", &arch, rng);
        params.extend(encoder_params("gc_enc", &arch, rng));
        params.extend([
            nn::init_uniform_fan_in("gc_lin1_w", h, arch.set_dim, arch.set_dim, rng),
            nn::init_zeros("gc_lin1_b", h, 1),
            nn::init_uniform_fan_in("gc_lin2_w", h, h, h, rng),
            nn::init_zeros("gc_lin2_b", h, 1),
            nn::init_uniform_fan_in("gc_lin3_w", coarse_out, h, h, rng),
            nn::init_zeros("gc_lin3_b", coarse_out, 1),
        ]);
        params.extend([
            nn::init_uniform_fan_in("gd_conv1_w", d1, dec_in * 3, dec_in * 3, rng),
            nn::init_zeros("gd_conv1_b", d1, 1),
            nn::init_uniform_fan_in("gd_conv2_w", d2, d1, d1, rng),
            nn::init_zeros("gd_conv2_b", d2, 1),
            nn::init_uniform_fan_in("gd_conv3_w", 1, d2, d2, rng),
            nn::init_zeros("gd_conv3_b", 1, 1),
        ]);
        debug_assert_eq!(params.len(), PARAM_COUNT);
        UpsamplerParams { arch, params }
    }

    pub fn arch(&self) -> &UpsamplerArch {
        &self.arch
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }
}

/// The noise vectors shared across all coarse tasks of one up-sampling
/// call: `r_detail` vectors, each of dimension `r_detail`, entries uniform
/// on [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub vectors: Vec<Vec<f64>>,
}

impl PerturbationSet {
    pub fn sample(r_detail: usize, rng: &mut ChaCha8Rng) -> Self {
        let vectors = (0..r_detail)
            .map(|_| (0..r_detail).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect())
            .collect();
        PerturbationSet { vectors }
    }
}

/// The generator's forward pass kept on a tape for training: generated and
/// coarse task vectors as column tensors, plus the pooled set feature.
pub struct UpsampleGraph {
    /// `r_coarse * r_detail * n_patch` vectors of shape `[seq_len, 1]`,
    /// ordered coarse-task-major (all noise variants of coarse task 0
    /// first).
    pub generated: Vec<Tensor>,
    /// The `r_coarse * n_patch` coarse vectors.
    pub coarse: Vec<Tensor>,
    /// `[set_dim, 1]` set feature.
    pub set_feature: Tensor,
}

fn check_patch(arch: &UpsamplerArch, patch: &[TaskVector]) -> Result<()> {
    if patch.len() != arch.n_patch {
        return Err(UpsamplerError::PatchSizeMismatch {
            got: patch.len(),
            expect: arch.n_patch,
        });
    }
    for v in patch {
        if v.k_support != arch.k_support || v.k_query != arch.k_query {
            return Err(UpsamplerError::VectorShapeMismatch {
                got_support: v.k_support,
                got_query: v.k_query,
                expect_support: arch.k_support,
                expect_query: arch.k_query,
            });
        }
    }
    Ok(())
}

fn check_noise(arch: &UpsamplerArch, z: &PerturbationSet) -> Result<()> {
    let bad = z.vectors.len() != arch.r_detail
        || z.vectors.iter().any(|v| v.len() != arch.r_detail);
    if bad {
        return Err(UpsamplerError::BadNoise {
            got: z.vectors.len(),
            got_dim: z.vectors.first().map_or(0, Vec::len),
            expect: arch.r_detail,
        });
    }
    Ok(())
}

/// Shared set-encoder forward: `enc` is one 6-tensor block (two conv
/// layers, projection). Input is the patch as one row, `n_patch` slots of
/// `seq_len` columns each.
fn encode_set(
    tape: &Tape,
    arch: &UpsamplerArch,
    enc: &[Tensor],
    patch_row: &Tensor,
) -> Result<Tensor> {
    let l = arch.seq_len();
    let h = tape.relu(&nn::conv1d_slots(tape, &enc[0], &enc[1], patch_row, 3, arch.n_patch)?)?;
    let h = tape.relu(&nn::conv1d_slots(tape, &enc[2], &enc[3], &h, 3, arch.n_patch)?)?;
    let mut pooled = Vec::with_capacity(arch.n_patch);
    for s in 0..arch.n_patch {
        pooled.push(tape.max_cols(&tape.slice_cols(&h, s * l, l)?)?);
    }
    let refs: Vec<&Tensor> = pooled.iter().collect();
    let per_task = nn::linear(tape, &enc[4], &enc[5], &tape.concat_cols(&refs)?)?;
    Ok(tape.max_cols(&per_task)?)
}

/// Builds the full generator forward pass on `tape`. `placed` must be the
/// up-sampler's parameters placed on the same tape, in order.
pub fn upsample_graph(
    tape: &Tape,
    up: &UpsamplerParams,
    placed: &[Tensor],
    patch: &[TaskVector],
    z: &PerturbationSet,
) -> Result<UpsampleGraph> {
    let arch = &up.arch;
    check_patch(arch, patch)?;
    check_noise(arch, z)?;
    let l = arch.seq_len();
    let np = arch.n_patch;
    let n_coarse = arch.r_coarse * np;
    let n_out = n_coarse * arch.r_detail;

    let mut patch_values = Vec::with_capacity(np * l);
    for v in patch {
        patch_values.extend_from_slice(&v.values);
    }
    let patch_row = tape.constant(1, np * l, patch_values)?;

    let set_feature = encode_set(tape, arch, &placed[GS_OFF..GS_OFF + 6], &patch_row)?;

    // Coarse generator: unshared encoder, then three linear layers.
    let pooled = encode_set(tape, arch, &placed[GC_ENC_OFF..GC_ENC_OFF + 6], &patch_row)?;
    let a = tape.relu(&nn::linear(tape, &placed[GC_LIN_OFF], &placed[GC_LIN_OFF + 1], &pooled)?)?;
    let a = tape.relu(&nn::linear(
        tape,
        &placed[GC_LIN_OFF + 2],
        &placed[GC_LIN_OFF + 3],
        &a,
    )?)?;
    let coarse_col = nn::linear(tape, &placed[GC_LIN_OFF + 4], &placed[GC_LIN_OFF + 5], &a)?;
    let coarse_row = tape.reshape(&coarse_col, 1, n_coarse * l)?;

    let mut coarse_blocks = Vec::with_capacity(n_coarse);
    for c in 0..n_coarse {
        coarse_blocks.push(tape.slice_cols(&coarse_row, c * l, l)?);
    }
    // Decoder input sequence: every coarse task repeated once per noise
    // vector, coarse-task-major.
    let rep_refs: Vec<&Tensor> = coarse_blocks
        .iter()
        .flat_map(|b| core::iter::repeat(b).take(arch.r_detail))
        .collect();
    let coarse_rep = tape.concat_cols(&rep_refs)?;

    // First decoder convolution, split by channel group. The noise and
    // set-feature channels are constant along the sequence, so their tap
    // contributions collapse to three per-noise vectors (with the missing
    // tap removed at each slot boundary); the coarse channel gets a real
    // convolution. The sum equals a convolution over the concatenated
    // channels exactly.
    let dec_in = 1 + arch.r_detail + arch.set_dim;
    let (d1, _d2) = arch.decoder_channels;
    let w1 = &placed[GD_OFF];
    let mut tap_coarse = Vec::with_capacity(3);
    let mut tap_rest = Vec::with_capacity(3);
    for t in 0..3 {
        tap_coarse.push(tape.slice_cols(w1, t * dec_in, 1)?);
        tap_rest.push(tape.slice_cols(w1, t * dec_in + 1, dec_in - 1)?);
    }
    let coarse_taps: Vec<&Tensor> = tap_coarse.iter().collect();
    let w_coarse = tape.concat_cols(&coarse_taps)?;
    let conv_part = nn::conv1d_slots(tape, &w_coarse, &placed[GD_OFF + 1], &coarse_rep, 3, n_out)?;

    let mut inj_blocks = Vec::with_capacity(arch.r_detail);
    for zv in &z.vectors {
        let z_t = tape.constant(arch.r_detail, 1, zv.clone())?;
        let zh = tape.concat_rows(&[&z_t, &set_feature])?;
        let c_prev = tape.matmul(&tap_rest[0], &zh)?;
        let c_centre = tape.matmul(&tap_rest[1], &zh)?;
        let c_next = tape.matmul(&tap_rest[2], &zh)?;
        let block = if l == 1 {
            c_centre
        } else {
            let first = tape.add(&c_centre, &c_next)?;
            let last = tape.add(&c_prev, &c_centre)?;
            if l == 2 {
                tape.concat_cols(&[&first, &last])?
            } else {
                let full = tape.add(&tape.add(&c_prev, &c_centre)?, &c_next)?;
                let interior = tape.repeat_cols(&full, l - 2)?;
                tape.concat_cols(&[&first, &interior, &last])?
            }
        };
        debug_assert_eq!(block.shape(), (d1, l));
        inj_blocks.push(block);
    }
    let inj_refs: Vec<&Tensor> = (0..n_coarse)
        .flat_map(|_| inj_blocks.iter())
        .collect();
    let inj_row = tape.concat_cols(&inj_refs)?;

    let h = tape.relu(&tape.add(&conv_part, &inj_row)?)?;
    let h = tape.relu(&nn::conv1d_slots(
        tape,
        &placed[GD_OFF + 2],
        &placed[GD_OFF + 3],
        &h,
        1,
        n_out,
    )?)?;
    let residual = nn::conv1d_slots(tape, &placed[GD_OFF + 4], &placed[GD_OFF + 5], &h, 1, n_out)?;
    let gen_row = tape.add(&residual, &coarse_rep)?;

    let mut generated = Vec::with_capacity(n_out);
    for k in 0..n_out {
        generated.push(tape.transpose(&tape.slice_cols(&gen_row, k * l, l)?)?);
    }
    let coarse = coarse_blocks
        .iter()
        .map(|b| tape.transpose(b))
        .collect::<core::result::Result<Vec<_>, _>>()?;
    Ok(UpsampleGraph {
        generated,
        coarse,
        set_feature,
    })
}

/// Generates `r_coarse * r_detail * n_patch` tasks from a patch (pure
/// forward pass; no gradients kept).
pub fn upsample(
    up: &UpsamplerParams,
    patch: &[TaskVector],
    z: &PerturbationSet,
) -> Result<Vec<Task>> {
    let tape = Tape::new();
    let placed = nn::params_on_tape(&tape, up.params())?;
    let graph = upsample_graph(&tape, up, &placed, patch, z)?;
    graph
        .generated
        .iter()
        .map(|g| Ok(vector_to_task(&g.values(), up.arch.k_support, up.arch.k_query)?))
        .collect()
}

/// Splits a generated task-vector tensor `[seq_len, 1]` into the sample
/// tensors the learner consumes.
pub fn split_generated(
    tape: &Tape,
    gen: &Tensor,
    k_support: usize,
    k_query: usize,
) -> Result<TaskTensors> {
    let n = k_support + k_query;
    let pairs = tape.reshape(gen, n, 2)?;
    let xy = tape.transpose(&pairs)?; // [2, n]: row 0 = x, row 1 = y
    let xs = tape.slice_rows(&xy, 0, 1)?;
    let ys = tape.slice_rows(&xy, 1, 1)?;
    Ok(TaskTensors {
        support_x: tape.slice_cols(&xs, 0, k_support)?,
        support_y: tape.slice_cols(&ys, 0, k_support)?,
        query_x: tape.slice_cols(&xs, k_support, k_query)?,
        query_y: tape.slice_cols(&ys, k_support, k_query)?,
    })
}

/// Distance between a generated task's support and query point sets (both
/// as (x, y) points), differentiable through the task values.
pub fn support_query_distance(
    tape: &Tape,
    gen: &Tensor,
    k_support: usize,
    k_query: usize,
) -> Result<Tensor> {
    if k_support != k_query {
        return Err(UpsamplerError::SupportQueryMismatch { k_support, k_query });
    }
    let n = k_support + k_query;
    let pairs = tape.reshape(gen, n, 2)?;
    let xy = tape.transpose(&pairs)?;
    let mut support = Vec::with_capacity(k_support);
    let mut query = Vec::with_capacity(k_query);
    for j in 0..k_support {
        support.push(tape.slice_cols(&xy, j, 1)?);
    }
    for j in k_support..n {
        query.push(tape.slice_cols(&xy, j, 1)?);
    }
    Ok(emd::emd_diff(tape, &support, &query)?)
}

/// Value snapshots of the training objective's pieces, with the total kept
/// on the tape.
pub struct AtuLossParts {
    pub total: Tensor,
    /// Set-matching distance between generated and target tasks.
    pub emd_value: f64,
    /// Mean support-vs-query distance over generated tasks (0 when
    /// disabled).
    pub support_query_value: f64,
    /// Mean difficulty term over generated tasks (0 when disabled).
    pub adv_value: f64,
}

/// The up-sampler objective over an existing forward graph: set-matching
/// distance to the target tasks, plus the support/query coherence penalty,
/// minus the mean difficulty of the generated tasks under `model`. The
/// learner's parameters receive no update from this loss.
pub fn atu_loss_from_graph(
    tape: &Tape,
    graph: &UpsampleGraph,
    arch: &UpsamplerArch,
    ground_truth: &[TaskVector],
    model: &MetaModel,
    model_placed: &PlacedModel,
    cfg: &AtuConfig,
) -> Result<AtuLossParts> {
    let n_out = graph.generated.len();
    if ground_truth.len() != n_out {
        return Err(UpsamplerError::BadGroundTruthSize {
            got: ground_truth.len(),
            expect: n_out,
        });
    }
    let l = arch.seq_len();
    let mut gt_tensors = Vec::with_capacity(n_out);
    for v in ground_truth {
        if v.values.len() != l {
            return Err(UpsamplerError::VectorShapeMismatch {
                got_support: v.k_support,
                got_query: v.k_query,
                expect_support: arch.k_support,
                expect_query: arch.k_query,
            });
        }
        gt_tensors.push(tape.constant(l, 1, v.values.clone())?);
    }
    let emd_term = emd::emd_diff(tape, &graph.generated, &gt_tensors)?;
    let emd_value = emd_term.item();
    let mut total = emd_term;

    let mut support_query_value = 0.0;
    if cfg.eta3 != 0.0 {
        let mut sum: Option<Tensor> = None;
        for g in &graph.generated {
            let d = support_query_distance(tape, g, arch.k_support, arch.k_query)?;
            sum = Some(match sum {
                Some(s) => tape.add(&s, &d)?,
                None => d,
            });
        }
        let mean = tape.scale(&sum.expect("n_out > 0"), 1.0 / n_out as f64)?;
        support_query_value = mean.item();
        total = tape.add(&total, &tape.scale(&mean, cfg.eta3)?)?;
    }

    let mut adv_value = 0.0;
    if cfg.eta1 != 0.0 || cfg.eta2 != 0.0 {
        let mut sum: Option<Tensor> = None;
        for g in &graph.generated {
            let tt = split_generated(tape, g, arch.k_support, arch.k_query)?;
            let a = meta::adv_loss(tape, model, model_placed, &tt, cfg.eta1, cfg.eta2)?;
            sum = Some(match sum {
                Some(s) => tape.add(&s, &a)?,
                None => a,
            });
        }
        let mean = tape.scale(&sum.expect("n_out > 0"), 1.0 / n_out as f64)?;
        adv_value = mean.item();
        total = tape.sub(&total, &mean)?;
    }

    Ok(AtuLossParts {
        total,
        emd_value,
        support_query_value,
        adv_value,
    })
}

/// Convenience wrapper: forward pass plus objective in one call.
#[allow(clippy::too_many_arguments)]
pub fn atu_loss_regression(
    tape: &Tape,
    up: &UpsamplerParams,
    placed: &[Tensor],
    patch: &[TaskVector],
    z: &PerturbationSet,
    ground_truth: &[TaskVector],
    model: &MetaModel,
    model_placed: &PlacedModel,
    cfg: &AtuConfig,
) -> Result<AtuLossParts> {
    let graph = upsample_graph(tape, up, placed, patch, z)?;
    atu_loss_from_graph(tape, &graph, &up.arch, ground_truth, model, model_placed, cfg)
}

fn theta_fingerprint(model: &MetaModel) -> Vec<u64> {
    model
        .theta()
        .iter()
        .flat_map(|p| p.values.iter().map(|v| v.to_bits()))
        .collect()
}

/// Selects the farthest-point patch of `n_patch` tasks from a pool,
/// seeded at the pool's first task.
pub fn fps_patch(vectors: &[TaskVector], n_patch: usize) -> Result<Vec<TaskVector>> {
    let flat: Vec<Vec<f64>> = vectors.iter().map(|v| v.values.clone()).collect();
    let points = PointSet::new(&flat)?;
    // Farthest-point selection seeded at index 0 keeps the patch a pure
    // function of the sampled pool.
    let picked = emd::fps(&points, n_patch, 0)?;
    Ok(picked.iter().map(|&i| vectors[i].clone()).collect())
}

/// Per-iteration history from training the up-sampler against a frozen
/// learner.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplerTrainStats {
    pub total_history: Vec<f64>,
    pub emd_history: Vec<f64>,
}

/// Trains the up-sampler alone for `iterations` steps against a fixed
/// learner: each step samples a fresh pool of tasks, takes the
/// farthest-point patch, generates, and Adam-steps the generator on the
/// objective. The learner is read, never written; any drift in it aborts.
#[allow(clippy::too_many_arguments)]
pub fn train_upsampler(
    up: &mut UpsamplerParams,
    model: &MetaModel,
    cfg: &AtuConfig,
    ranges: &DomainRanges,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<UpsamplerTrainStats> {
    cfg.validate()?;
    let before = theta_fingerprint(model);
    let mut opt = Optimizer::adam(cfg.upsampler_lr);
    let mut stats = UpsamplerTrainStats {
        total_history: Vec::with_capacity(iterations),
        emd_history: Vec::with_capacity(iterations),
    };
    let (ks, kq) = (up.arch.k_support, up.arch.k_query);
    for _ in 0..iterations {
        let mut vectors = Vec::with_capacity(cfg.pool_size);
        for _ in 0..cfg.pool_size {
            vectors.push(task_to_vector(&sample_sine_task(ranges, ks, kq, rng)?)?);
        }
        let patch = fps_patch(&vectors, cfg.n_patch)?;
        let z = PerturbationSet::sample(cfg.r_detail, rng);
        let tape = Tape::new();
        let placed = nn::params_on_tape(&tape, up.params())?;
        let model_placed = model.place(&tape)?;
        let parts = atu_loss_regression(
            &tape, up, &placed, &patch, &z, &vectors, model, &model_placed, cfg,
        )?;
        let value = parts.total.item();
        if !value.is_finite() {
            return Err(UpsamplerError::NonFinite {
                details: format!("up-sampler objective is {value}"),
            });
        }
        let refs: Vec<&Tensor> = placed.iter().collect();
        let grads = tape.grad(&parts.total, &refs, false)?;
        let grad_values: Vec<Vec<f64>> = grads.iter().map(Tensor::values).collect();
        if let Some(details) = crate::autodiff::describe_nonfinite(up.params(), &grad_values) {
            return Err(UpsamplerError::NonFinite { details });
        }
        opt.step(up.params_mut(), &grad_values)?;
        if theta_fingerprint(model) != before {
            return Err(UpsamplerError::GradientLeak);
        }
        stats.total_history.push(value);
        stats.emd_history.push(parts.emd_value);
    }
    Ok(stats)
}

/// Which meta-training variant a trainer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Plain meta-training on sampled tasks; the generator is untouched.
    Vanilla,
    /// Generated tasks mixed in; generator trained without the difficulty
    /// term.
    Upsampled,
    /// Generated tasks mixed in; generator trained with the full objective.
    AdversarialUpsampled,
}

/// Summary of one training cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    pub mean_meta_loss: f64,
    pub upsampler_loss: Option<f64>,
    pub emd_term: Option<f64>,
}

/// Interleaved trainer: each cycle samples a pool of `pool_size` tasks,
/// generates an equal-sized set from its farthest-point patch, runs one
/// meta-update per batch (a `augment_ratio` fraction of batches drawn from
/// generated tasks, the rest from the pool in sample order), then makes one
/// generator update against the freshly-updated learner. With ratio 0 the
/// learner's trajectory is identical to plain meta-training.
///
/// All fields are public so training state can be checkpointed and
/// restored.
pub struct AtuTrainer {
    pub mode: TrainMode,
    pub model: MetaModel,
    pub upsampler: UpsamplerParams,
    pub cfg: AtuConfig,
    pub ranges: DomainRanges,
    pub k_support: usize,
    pub k_query: usize,
    pub meta_batch: usize,
    pub meta_opt: Optimizer,
    pub up_opt: Optimizer,
    /// Stream feeding task sampling only (so augmentation choices never
    /// shift the task stream).
    pub task_rng: ChaCha8Rng,
    /// Stream feeding generator noise and batch shuffling.
    pub up_rng: ChaCha8Rng,
    pub cycles_done: usize,
    pub up_iterations_done: usize,
}

impl AtuTrainer {
    /// `init_rng` initializes the generator weights; pass the same stream
    /// that initialized the model to keep a whole experiment derivable from
    /// one seed.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mode: TrainMode,
        model: MetaModel,
        cfg: AtuConfig,
        ranges: DomainRanges,
        k_support: usize,
        k_query: usize,
        meta_batch: usize,
        meta_lr: f64,
        seed: u64,
        init_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if meta_batch == 0 || cfg.pool_size % meta_batch != 0 {
            return Err(UpsamplerError::BadConfig {
                reason: "meta_batch must be positive and divide pool_size",
            });
        }
        let arch = UpsamplerArch::regression_default(k_support, k_query, &cfg);
        let upsampler = UpsamplerParams::new(arch, init_rng);
        let up_lr = cfg.upsampler_lr;
        let mut task_rng = ChaCha8Rng::seed_from_u64(seed);
        task_rng.set_stream(0);
        let mut up_rng = ChaCha8Rng::seed_from_u64(seed);
        up_rng.set_stream(1);
        Ok(AtuTrainer {
            mode,
            model,
            upsampler,
            cfg,
            ranges,
            k_support,
            k_query,
            meta_batch,
            meta_opt: Optimizer::adam(meta_lr),
            up_opt: Optimizer::adam(up_lr),
            task_rng,
            up_rng,
            cycles_done: 0,
            up_iterations_done: 0,
        })
    }

    pub fn batches_per_cycle(&self) -> usize {
        self.cfg.pool_size / self.meta_batch
    }

    pub fn meta_steps_done(&self) -> usize {
        self.cycles_done * self.batches_per_cycle()
    }

    fn effective_cfg(&self) -> AtuConfig {
        let mut cfg = self.cfg.clone();
        if self.mode == TrainMode::Upsampled {
            cfg.eta1 = 0.0;
            cfg.eta2 = 0.0;
        }
        cfg
    }

    pub fn run_cycle(&mut self) -> Result<CycleReport> {
        let b = self.meta_batch;
        let n_batches = self.batches_per_cycle();
        let mut pool = Vec::with_capacity(self.cfg.pool_size);
        for _ in 0..self.cfg.pool_size {
            pool.push(sample_sine_task(
                &self.ranges,
                self.k_support,
                self.k_query,
                &mut self.task_rng,
            )?);
        }

        let mut gen_batches = 0usize;
        let mut gen_tasks: Vec<Task> = Vec::new();
        let mut up_ctx = None;
        if self.mode != TrainMode::Vanilla {
            let vectors = pool
                .iter()
                .map(task_to_vector)
                .collect::<core::result::Result<Vec<_>, _>>()?;
            let patch = fps_patch(&vectors, self.cfg.n_patch)?;
            let z = PerturbationSet::sample(self.cfg.r_detail, &mut self.up_rng);
            let tape = Tape::new();
            let placed = nn::params_on_tape(&tape, self.upsampler.params())?;
            let graph = upsample_graph(&tape, &self.upsampler, &placed, &patch, &z)?;
            let all_gen = graph
                .generated
                .iter()
                .map(|g| vector_to_task(&g.values(), self.k_support, self.k_query))
                .collect::<core::result::Result<Vec<_>, _>>()?;
            gen_batches =
                crate::fmath::round(self.cfg.augment_ratio * n_batches as f64) as usize;
            gen_batches = gen_batches.min(n_batches);
            let mut order: Vec<usize> = (0..all_gen.len()).collect();
            for i in (1..order.len()).rev() {
                let j = self.up_rng.gen_range(0..=i);
                order.swap(i, j);
            }
            gen_tasks = order[..gen_batches * b]
                .iter()
                .map(|&i| all_gen[i].clone())
                .collect();
            up_ctx = Some((tape, placed, graph, vectors));
        }

        let mut losses = Vec::with_capacity(n_batches);
        for bi in 0..n_batches - gen_batches {
            losses.push(meta::meta_step(
                &mut self.model,
                &mut self.meta_opt,
                &pool[bi * b..(bi + 1) * b],
            )?);
        }
        for gi in 0..gen_batches {
            losses.push(meta::meta_step(
                &mut self.model,
                &mut self.meta_opt,
                &gen_tasks[gi * b..(gi + 1) * b],
            )?);
        }
        let mean_meta_loss = losses.iter().sum::<f64>() / losses.len() as f64;

        let mut upsampler_loss = None;
        let mut emd_term = None;
        if let Some((tape, placed, graph, vectors)) = up_ctx {
            if self.up_iterations_done < self.cfg.max_iterations {
                let before = theta_fingerprint(&self.model);
                let eff = self.effective_cfg();
                let model_placed = self.model.place(&tape)?;
                let parts = atu_loss_from_graph(
                    &tape,
                    &graph,
                    &self.upsampler.arch,
                    &vectors,
                    &self.model,
                    &model_placed,
                    &eff,
                )?;
                let value = parts.total.item();
                if !value.is_finite() {
                    return Err(UpsamplerError::NonFinite {
                        details: format!("up-sampler objective is {value}"),
                    });
                }
                let placed_refs: Vec<&Tensor> = placed.iter().collect();
                let grads = tape.grad(&parts.total, &placed_refs, false)?;
                let grad_values: Vec<Vec<f64>> = grads.iter().map(Tensor::values).collect();
                if let Some(details) =
                    crate::autodiff::describe_nonfinite(self.upsampler.params(), &grad_values)
                {
                    return Err(UpsamplerError::NonFinite { details });
                }
                self.up_opt.step(self.upsampler.params_mut(), &grad_values)?;
                if theta_fingerprint(&self.model) != before {
                    return Err(UpsamplerError::GradientLeak);
                }
                self.up_iterations_done += 1;
                upsampler_loss = Some(value);
                emd_term = Some(parts.emd_value);
            }
        }

        self.cycles_done += 1;
        Ok(CycleReport {
            mean_meta_loss,
            upsampler_loss,
            emd_term,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> AtuConfig {
        AtuConfig {
            r_coarse: 2,
            r_detail: 2,
            n_patch: 2,
            pool_size: 8,
            max_iterations: 5,
            augment_ratio: 0.5,
            ..AtuConfig::default()
        }
    }

    fn tiny_arch(k_support: usize, k_query: usize) -> UpsamplerArch {
        UpsamplerArch {
            k_support,
            k_query,
            n_patch: 2,
            r_coarse: 2,
            r_detail: 2,
            conv_channels: (4, 6),
            set_dim: 8,
            coarse_hidden: 8,
            decoder_channels: (6, 4),
        }
    }

    fn sample_patch(arch: &UpsamplerArch, seed: u64) -> Vec<TaskVector> {
        let mut r = rng(seed);
        (0..arch.n_patch)
            .map(|_| {
                task_to_vector(
                    &sample_sine_task(
                        &DomainRanges::training_default(),
                        arch.k_support,
                        arch.k_query,
                        &mut r,
                    )
                    .unwrap(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn default_config_is_valid_and_sized_consistently() {
        let cfg = AtuConfig::default();
        assert_eq!(
            (cfg.eta1, cfg.eta2, cfg.eta3),
            (8e-3, 4e-3, 3e-1)
        );
        assert_eq!((cfg.r_coarse, cfg.r_detail), (2, 4));
        assert_eq!(cfg.r(), 8);
        assert_eq!(cfg.n_patch, 8);
        assert_eq!(cfg.pool_size, 64);
        assert_eq!(cfg.max_iterations, 3750);
        assert_eq!(cfg.augment_ratio, 0.2);
        cfg.validate().unwrap();

        let bad = AtuConfig {
            pool_size: 63,
            ..AtuConfig::default()
        };
        assert!(matches!(bad.validate(), Err(UpsamplerError::BadConfig { .. })));
        let bad = AtuConfig {
            augment_ratio: 1.5,
            ..AtuConfig::default()
        };
        assert!(matches!(bad.validate(), Err(UpsamplerError::BadConfig { .. })));
    }

    #[test]
    fn output_count_matches_upsampling_factor() {
        let arch = tiny_arch(2, 2);
        let up = UpsamplerParams::new(arch.clone(), &mut rng(1));
        let patch = sample_patch(&arch, 2);
        let z = PerturbationSet::sample(arch.r_detail, &mut rng(3));
        let tasks = upsample(&up, &patch, &z).unwrap();
        assert_eq!(tasks.len(), 8);
        for t in &tasks {
            assert_eq!(t.support_len(), 2);
            assert_eq!(t.query_len(), 2);
        }
    }

    #[test]
    fn default_arch_produces_64_tasks() {
        let cfg = AtuConfig::default();
        let arch = UpsamplerArch::regression_default(10, 10, &cfg);
        assert_eq!(arch.set_dim, 1024);
        assert_eq!(arch.conv_channels, (64, 128));
        assert_eq!(arch.output_count(), 64);
        let up = UpsamplerParams::new(arch.clone(), &mut rng(4));
        let mut r = rng(5);
        let patch: Vec<TaskVector> = (0..8)
            .map(|_| {
                task_to_vector(
                    &sample_sine_task(&DomainRanges::training_default(), 10, 10, &mut r).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let z = PerturbationSet::sample(4, &mut r);
        let tasks = upsample(&up, &patch, &z).unwrap();
        assert_eq!(tasks.len(), 64);
    }

    #[test]
    fn bad_patch_and_noise_rejected() {
        let arch = tiny_arch(2, 2);
        let up = UpsamplerParams::new(arch.clone(), &mut rng(1));
        let patch = sample_patch(&arch, 2);
        let z = PerturbationSet::sample(arch.r_detail, &mut rng(3));
        assert!(matches!(
            upsample(&up, &patch[..1], &z),
            Err(UpsamplerError::PatchSizeMismatch { got: 1, expect: 2 })
        ));
        let bad_z = PerturbationSet::sample(3, &mut rng(3));
        assert!(matches!(
            upsample(&up, &patch, &bad_z),
            Err(UpsamplerError::BadNoise { .. })
        ));
        let wrong_shape = sample_patch(&tiny_arch(3, 1), 2);
        assert!(matches!(
            upsample(&up, &wrong_shape, &z),
            Err(UpsamplerError::VectorShapeMismatch { .. })
        ));
    }

    #[test]
    fn zeroed_decoder_repeats_coarse_tasks() {
        let arch = tiny_arch(2, 2);
        let mut up = UpsamplerParams::new(arch.clone(), &mut rng(7));
        for p in &mut up.params_mut()[GD_OFF..] {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let patch = sample_patch(&arch, 8);
        let z = PerturbationSet::sample(arch.r_detail, &mut rng(9));
        let tape = Tape::new();
        let placed = nn::params_on_tape(&tape, up.params()).unwrap();
        let graph = upsample_graph(&tape, &up, &placed, &patch, &z).unwrap();
        for (c, coarse) in graph.coarse.iter().enumerate() {
            for i in 0..arch.r_detail {
                let g = &graph.generated[c * arch.r_detail + i];
                assert_eq!(g.values(), coarse.values(), "coarse {c} noise {i}");
            }
        }
    }

    #[test]
    fn patch_permutation_leaves_outputs_unchanged() {
        let arch = tiny_arch(2, 2);
        let up = UpsamplerParams::new(arch.clone(), &mut rng(11));
        let patch = sample_patch(&arch, 12);
        let mut permuted = patch.clone();
        permuted.reverse();
        let z = PerturbationSet::sample(arch.r_detail, &mut rng(13));
        let a = upsample(&up, &patch, &z).unwrap();
        let b = upsample(&up, &permuted, &z).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn loss_is_zero_when_targets_equal_outputs_and_weights_off() {
        let arch = tiny_arch(2, 2);
        let up = UpsamplerParams::new(arch.clone(), &mut rng(15));
        let patch = sample_patch(&arch, 16);
        let z = PerturbationSet::sample(arch.r_detail, &mut rng(17));
        // Ground truth := the generator's own outputs.
        let tape0 = Tape::new();
        let placed0 = nn::params_on_tape(&tape0, up.params()).unwrap();
        let graph0 = upsample_graph(&tape0, &up, &placed0, &patch, &z).unwrap();
        let gt: Vec<TaskVector> = graph0
            .generated
            .iter()
            .map(|g| TaskVector {
                k_support: 2,
                k_query: 2,
                values: g.values(),
            })
            .collect();
        let cfg = AtuConfig {
            eta1: 0.0,
            eta2: 0.0,
            eta3: 0.0,
            ..tiny_cfg()
        };
        let model = MetaModel::regression_default(&mut rng(18));
        let tape = Tape::new();
        let placed = nn::params_on_tape(&tape, up.params()).unwrap();
        let model_placed = model.place(&tape).unwrap();
        let parts = atu_loss_regression(
            &tape, &up, &placed, &patch, &z, &gt, &model, &model_placed, &cfg,
        )
        .unwrap();
        assert_eq!(parts.total.item(), 0.0);
        assert_eq!(parts.emd_value, 0.0);
    }

    #[test]
    fn support_query_distance_zero_when_blocks_match() {
        let tape = Tape::new();
        // Support pairs (1,2), (3,4); query identical.
        let g = tape
            .constant(8, 1, vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let d = support_query_distance(&tape, &g, 2, 2).unwrap();
        assert_eq!(d.item(), 0.0);
        assert!(matches!(
            support_query_distance(&tape, &g, 3, 1),
            Err(UpsamplerError::SupportQueryMismatch { .. })
        ));
    }

    #[test]
    fn unequal_shots_with_coherence_weight_rejected() {
        let arch = tiny_arch(3, 1);
        let up = UpsamplerParams::new(arch.clone(), &mut rng(19));
        let patch = sample_patch(&arch, 20);
        let z = PerturbationSet::sample(arch.r_detail, &mut rng(21));
        let cfg = AtuConfig {
            eta1: 0.0,
            eta2: 0.0,
            eta3: 0.3,
            ..tiny_cfg()
        };
        let model = MetaModel::regression_default(&mut rng(22));
        let tape = Tape::new();
        let placed = nn::params_on_tape(&tape, up.params()).unwrap();
        let model_placed = model.place(&tape).unwrap();
        let gt: Vec<TaskVector> = (0..8).map(|i| sample_patch(&arch, 30 + i)[0].clone()).collect();
        assert!(matches!(
            atu_loss_regression(&tape, &up, &placed, &patch, &z, &gt, &model, &model_placed, &cfg),
            Err(UpsamplerError::SupportQueryMismatch { .. })
        ));
    }

    #[test]
    fn short_training_changes_generator_but_not_learner() {
        let cfg = tiny_cfg();
        let arch = tiny_arch(2, 2);
        let mut up = UpsamplerParams::new(arch, &mut rng(23));
        let initial = up.params().to_vec();
        let model = MetaModel::regression_default(&mut rng(24));
        let theta_before: Vec<Vec<f64>> =
            model.theta().iter().map(|p| p.values.clone()).collect();
        let mut r = rng(25);
        let stats = train_upsampler(
            &mut up,
            &model,
            &cfg,
            &DomainRanges::training_default(),
            3,
            &mut r,
        )
        .unwrap();
        assert_eq!(stats.total_history.len(), 3);
        assert!(stats.total_history.iter().all(|v| v.is_finite()));
        assert!(up.params() != &initial[..], "parameters should move");
        let theta_after: Vec<Vec<f64>> =
            model.theta().iter().map(|p| p.values.clone()).collect();
        assert_eq!(theta_before, theta_after);

        // Zero iterations leave the generator untouched.
        let mut up2 = UpsamplerParams::new(tiny_arch(2, 2), &mut rng(23));
        let before = up2.params().to_vec();
        train_upsampler(
            &mut up2,
            &model,
            &cfg,
            &DomainRanges::training_default(),
            0,
            &mut r,
        )
        .unwrap();
        assert_eq!(up2.params(), &before[..]);
    }

    #[test]
    fn zero_ratio_trainer_matches_vanilla_bitwise() {
        let cfg = AtuConfig {
            augment_ratio: 0.0,
            max_iterations: 2,
            ..tiny_cfg()
        };
        let model = MetaModel::regression_default(&mut rng(30));
        let mut init1 = rng(31);
        let mut init2 = rng(31);
        let mut vanilla = AtuTrainer::new(
            TrainMode::Vanilla,
            model.clone(),
            cfg.clone(),
            DomainRanges::training_default(),
            2,
            2,
            4,
            1e-3,
            77,
            &mut init1,
        )
        .unwrap();
        let mut upsampled = AtuTrainer::new(
            TrainMode::Upsampled,
            model,
            cfg,
            DomainRanges::training_default(),
            2,
            2,
            4,
            1e-3,
            77,
            &mut init2,
        )
        .unwrap();
        for _ in 0..2 {
            vanilla.run_cycle().unwrap();
            upsampled.run_cycle().unwrap();
        }
        let a: Vec<Vec<f64>> = vanilla.model.theta().iter().map(|p| p.values.clone()).collect();
        let b: Vec<Vec<f64>> = upsampled.model.theta().iter().map(|p| p.values.clone()).collect();
        assert_eq!(a, b, "ratio 0 must reproduce the vanilla trajectory");
        assert_eq!(upsampled.up_iterations_done, 2);
        assert_eq!(vanilla.up_iterations_done, 0);
        assert_eq!(vanilla.meta_steps_done(), 4);
    }

    #[test]
    fn adversarial_cycle_reports_components() {
        let cfg = tiny_cfg();
        let model = MetaModel::regression_default(&mut rng(40));
        let mut init = rng(41);
        let mut trainer = AtuTrainer::new(
            TrainMode::AdversarialUpsampled,
            model,
            cfg,
            DomainRanges::training_default(),
            2,
            2,
            4,
            1e-3,
            78,
            &mut init,
        )
        .unwrap();
        let report = trainer.run_cycle().unwrap();
        assert!(report.mean_meta_loss.is_finite());
        assert!(report.upsampler_loss.unwrap().is_finite());
        assert!(report.emd_term.unwrap() >= 0.0);
        assert_eq!(trainer.cycles_done, 1);
        assert_eq!(trainer.up_iterations_done, 1);
    }
}
