//! Neural-net building blocks on top of the tape: fan-in-scaled
//! initialization, linear maps with column-broadcast bias, one-dimensional
//! convolutions over slot-concatenated sequences, and a batch-norm
//! composite.
//!
//! Sequences are laid out as `[channels, positions]` matrices. Several
//! independent sequences ("slots") of equal length may be concatenated along
//! the column axis and convolved in one call; shifted taps are masked at
//! slot boundaries so no information crosses between slots.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdError, ParamTensor, Tape, Tensor};
use crate::fmath;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("{cols} columns cannot split into {slots} equal slots")]
    BadSlotLayout { cols: usize, slots: usize },
    #[error("kernel size {kernel} unsupported (expected 1 or 3)")]
    UnsupportedKernel { kernel: usize },
    #[error("conv weight has {weight_cols} columns, expected in_channels*kernel = {expect}")]
    ChannelMismatch { weight_cols: usize, expect: usize },
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

type Result<T> = core::result::Result<T, NnError>;

/// Uniform init on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
pub fn init_uniform_fan_in(
    name: &str,
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> ParamTensor {
    let bound = fmath::sqrt(6.0 / fan_in.max(1) as f64);
    let values = (0..rows * cols)
        .map(|_| bound * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    ParamTensor::new(name, rows, cols, values)
}

pub fn init_zeros(name: &str, rows: usize, cols: usize) -> ParamTensor {
    ParamTensor::new(name, rows, cols, vec![0.0; rows * cols])
}

pub fn init_ones(name: &str, rows: usize, cols: usize) -> ParamTensor {
    ParamTensor::new(name, rows, cols, vec![1.0; rows * cols])
}

/// Places every parameter on the tape, preserving order.
pub fn params_on_tape(tape: &Tape, params: &[ParamTensor]) -> Result<Vec<Tensor>> {
    params
        .iter()
        .map(|p| tape.param(p).map_err(NnError::from))
        .collect()
}

/// `w @ x + b` with the bias column broadcast across all `x` columns.
/// Shapes: `w [out, in]`, `b [out, 1]`, `x [in, n]` -> `[out, n]`.
pub fn linear(tape: &Tape, w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let wx = tape.matmul(w, x)?;
    let bb = if x.cols() == 1 {
        b.clone()
    } else {
        tape.repeat_cols(b, x.cols())?
    };
    Ok(tape.add(&wx, &bb)?)
}

/// Same-padding one-dimensional convolution over `slots` independent
/// sequences concatenated along columns.
///
/// `w` holds the taps side by side as `[out_ch, in_ch * kernel]` (kernel 3:
/// previous, centre, next position); `b` is `[out_ch, 1]`. Positions outside
/// a slot read as zero, so each slot is convolved exactly as if it were
/// passed alone.
pub fn conv1d_slots(
    tape: &Tape,
    w: &Tensor,
    b: &Tensor,
    x: &Tensor,
    kernel: usize,
    slots: usize,
) -> Result<Tensor> {
    let (in_ch, n) = x.shape();
    if slots == 0 || n % slots != 0 {
        return Err(NnError::BadSlotLayout { cols: n, slots });
    }
    if w.cols() != in_ch * kernel {
        return Err(NnError::ChannelMismatch {
            weight_cols: w.cols(),
            expect: in_ch * kernel,
        });
    }
    match kernel {
        1 => linear(tape, w, b, x),
        3 => {
            let len = n / slots;
            let w_prev = tape.slice_cols(w, 0, in_ch)?;
            let w_centre = tape.slice_cols(w, in_ch, in_ch)?;
            let w_next = tape.slice_cols(w, 2 * in_ch, in_ch)?;
            let mut acc = linear(tape, &w_centre, b, x)?;
            if len > 1 {
                // Column p of `prev` holds x[:, p-1] within the same slot,
                // zero at slot starts; `next` mirrors it for p+1.
                let zero_col = tape.zeros(in_ch, 1)?;
                let body = tape.slice_cols(x, 0, n - 1)?;
                let prev = tape.concat_cols(&[&zero_col, &body])?;
                let prev = tape.mul(&prev, &boundary_mask(tape, in_ch, slots, len, 0)?)?;
                let body = tape.slice_cols(x, 1, n - 1)?;
                let next = tape.concat_cols(&[&body, &zero_col])?;
                let next = tape.mul(&next, &boundary_mask(tape, in_ch, slots, len, len - 1)?)?;
                acc = tape.add(&acc, &tape.matmul(&w_prev, &prev)?)?;
                acc = tape.add(&acc, &tape.matmul(&w_next, &next)?)?;
            }
            Ok(acc)
        }
        k => Err(NnError::UnsupportedKernel { kernel: k }),
    }
}

/// Constant mask that zeroes the column at `zero_offset` inside every slot.
fn boundary_mask(
    tape: &Tape,
    rows: usize,
    slots: usize,
    len: usize,
    zero_offset: usize,
) -> Result<Tensor> {
    let n = slots * len;
    let mut values = vec![1.0; rows * n];
    for r in 0..rows {
        for s in 0..slots {
            values[r * n + s * len + zero_offset] = 0.0;
        }
    }
    Ok(tape.constant(rows, n, values)?)
}

/// Per-channel normalization over all columns (batch x positions), followed
/// by a learned affine map: `gamma * (x - mean)/sqrt(var + eps) + beta`.
/// Statistics always come from the given activations (train-mode batch
/// norm; no running averages are kept).
pub fn batch_norm(
    tape: &Tape,
    gamma: &Tensor,
    beta: &Tensor,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (r, n) = x.shape();
    let inv_n = 1.0 / n as f64;
    let mean = tape.scale(&tape.sum_cols(x)?, inv_n)?;
    let centred = tape.sub(x, &tape.repeat_cols(&mean, n)?)?;
    let var = tape.scale(&tape.sum_cols(&tape.mul(&centred, &centred)?)?, inv_n)?;
    let eps_t = tape.broadcast(&tape.scalar(eps), r, 1)?;
    let inv_std = tape.recip(&tape.sqrt(&tape.add(&var, &eps_t)?)?)?;
    let normed = tape.mul(&centred, &tape.repeat_cols(&inv_std, n)?)?;
    let scaled = tape.mul(&tape.repeat_cols(gamma, n)?, &normed)?;
    Ok(tape.add(&scaled, &tape.repeat_cols(beta, n)?)?)
}
