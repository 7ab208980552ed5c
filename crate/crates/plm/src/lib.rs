//! Protein language model pretraining on a self-contained CPU autodiff core.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors, a Wengert-tape autodiff engine, and a
//!   finite-difference gradient checker. Everything downstream differentiates
//!   through this one engine.
//! * [`tokenizer`]: the fixed 30-symbol amino-acid vocabulary.
//! * [`corpus`]: FASTA and task-record parsing, family-aware splits, and
//!   synthetic corpus generators used for end-to-end testing.
//! * [`masking`]: masked-language-model corruption and batch collation.
//! * [`model`]: the transformer encoder (pre-LN or post-LN) plus the four
//!   downstream heads (per-token classification, sequence classification,
//!   residue-pair contact scoring, scalar regression).
//! * [`trainer`]: Adam with decoupled weight decay, warmup/decay schedule,
//!   pretraining and finetuning loops, binary checkpoints, evaluation.
//! * [`metrics`]: token accuracy, top-1 accuracy, ranked contact precision,
//!   Spearman correlation.
//! * [`viz`]: contact-map rendering to PGM images.
//! * [`cli`]: the `plm` command-line front end over all of the above.
//!
//! Start with the runnable programs under `examples/`; each one exercises a
//! major capability end to end on synthetic data.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
