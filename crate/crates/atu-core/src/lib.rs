//! Meta-learning engine for few-shot regression and classification built on
//! three pillars:
//!
//! * [`autodiff`] — a reverse-mode tape over `f64` matrices whose backward
//!   pass is itself recorded, so gradients of gradients (as needed by
//!   second-order meta-learning) come out of the same machinery;
//! * [`emd`] — exact Earth Mover's Distance between equally sized point sets
//!   (Hungarian assignment) plus a piecewise-differentiable surrogate and
//!   farthest point sampling;
//! * [`upsampler`] / [`classify`] — a two-stage task up-sampling network that
//!   expands a small patch of training tasks into a larger set, trained with
//!   an EMD fit term and an adversarial difficulty term, and used to augment
//!   the task stream of the MAML / Meta-SGD learners in [`meta`].
//!
//! The crate is `no_std`-compatible (allocation required); disable the
//! default `std` feature to build against `core + alloc` with `libm` backing
//! the float math. All randomness flows through caller-supplied ChaCha
//! generators, and every training loop is bit-reproducible for a fixed seed.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod classify;
pub mod emd;
pub(crate) mod fmath;
pub mod meta;
pub mod nn;
pub mod tasks;
pub mod upsampler;
