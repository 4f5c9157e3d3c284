//! Per-cell inductive conformal prediction for gridded forecast tensors.
//!
//! Forecasts, truths, model means and model standard deviations are all
//! [`FieldTensor`]s of shape `(lead time, x, y, variable)`. The pipeline is:
//!
//! 1. [`scores`]: turn a calibration set into per-cell non-conformity scores
//!    (absolute residual `RES`, or sigma-normalised residual `STD`).
//! 2. [`calibrate`]: take the `⌈(n+1)(1-α)⌉`-th smallest score in every cell.
//! 3. [`intervals`]: widen new forecasts by the per-cell quantile.
//! 4. [`evaluate`]: measure empirical coverage and interval width.
//!
//! [`synth`] provides an AR(1) Gaussian field generator whose error law is
//! known in closed form, used as the reference model in tests.

pub mod calibrate;
pub mod container;
pub mod error;
pub mod evaluate;
pub mod intervals;
pub mod normal;
pub mod report;
pub mod scores;
pub mod synth;
pub mod tensor;

pub use calibrate::{calibrate_quantiles, calibrate_sweep, conformal_rank, QuantileField, Rank};
pub use error::{Error, Result};
pub use evaluate::{empirical_coverage, CoverageAccumulator, CoverageReport};
pub use intervals::IntervalField;
pub use scores::{CalibrationSet, Forecast, ScoreSet, ScoreStrategy};
pub use synth::{SynthConfig, SynthSample};
pub use tensor::{cell_index, FieldTensor, GridSpec};
