//! Streaming sketches for products `f(A) * B` where `A` arrives as a turnstile
//! stream and `f` is applied entrywise, plus the low-rank approximation and
//! regression pipelines built on them.
//!
//! Module map:
//!
//! * [`randkit`]: seeded hash families and the p-inverse sampler.
//! * [`kset`]: exact sparse recovery with failure detection.
//! * [`fsketch`]: the `LogSum` and `PolySum` vector sketches.
//! * [`matprod`]: grids of vector sketches estimating `f(A) * B`.
//! * [`densela`]: the dense linear algebra the pipelines need.
//! * [`lowrank`]: multi-pass rank-k approximation of `f(A)`.
//! * [`regress`]: sketch-and-solve least squares on `f(A)`.
//! * [`streams`]: event model, file formats, replay and data generators.

pub mod densela;
pub mod error;
pub mod fsketch;
pub mod kset;
pub mod lowrank;
pub mod matprod;
pub mod randkit;
pub mod regress;
pub mod streams;

mod blob;

pub use error::{Error, Result};
pub use fsketch::{LogSumConfig, LogSumSketch, PolySumConfig, PolySumSketch, StreamMeta};
pub use kset::{KSet, KSetOutput, SparseVector};
pub use matprod::{Layout, MatProdConfig, MatrixProductSketch, RowNormSketch, Transform};
