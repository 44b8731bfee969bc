//! Desk-scale self-distillation training with an explicit coding-rate
//! regularizer in place of prototype heads, centering, and temperature
//! softmaxes, plus the matching baseline pipeline for comparison.
//!
//! The crate is organized along the pipeline:
//!
//! - [`tensor`]: dense f64 tensors, a reverse-mode tape, SPD linear algebra
//! - [`coding_rate`]: the regularizer, its analytic gradient, the gradient
//!   norm bound and its verifier machinery
//! - [`views`]: multi-crop sampling, patchification, token masking
//! - [`encoder`]: a small vision transformer with a projector head
//! - [`losses`]: the distillation objectives and the baseline head
//! - [`trainer`]: the training loop, optimizer, schedules, checkpoints
//! - [`eval`]: kNN / linear probes and collapse diagnostics
//! - [`cli`]: dataset generation, config files, and the command surface

pub mod tensor;
