//! End-to-end test-time training for byte-level language models: a
//! higher-order reverse-mode autodiff engine, the model family, inner and
//! outer training loops, the key-value binding variants, evaluation and the
//! experiment pipelines.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod kvb;
pub mod model;
pub mod train;
pub mod ttt;

pub use autodiff::{Band, FlopCounter, Tape, Tensor, Var};
pub use error::{Error, Result};

pub use model::{Model, ModelSpec, ParamSet};
pub use ttt::{Objective, TttConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
