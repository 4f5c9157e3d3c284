//! Non-conformity scores.
//!
//! Two strategies are supported:
//!
//! * `RES`: absolute residual `|y − ŷ|`, for point forecasts.
//! * `STD`: `|y − μ| / max(σ, sigma_floor)`, for Gaussian forecasts. The
//!   absolute value makes the score two-sided, matching the symmetric
//!   interval `μ ± q̂σ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FieldTensor, GridSpec};

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-8;

/// How a calibration residual is turned into a score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum ScoreStrategy {
    Res,
    Std { sigma_floor: f64 },
}

impl ScoreStrategy {
    pub fn std_default() -> Self {
        ScoreStrategy::Std {
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreStrategy::Res => "res",
            ScoreStrategy::Std { .. } => "std",
        }
    }

    pub fn sigma_floor(&self) -> Option<f64> {
        match self {
            ScoreStrategy::Res => None,
            ScoreStrategy::Std { sigma_floor } => Some(*sigma_floor),
        }
    }

    fn validate(&self) -> Result<()> {
        if let ScoreStrategy::Std { sigma_floor } = self {
            if !(sigma_floor.is_finite() && *sigma_floor >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "sigma_floor must be finite and >= 0, got {sigma_floor}"
                )));
            }
        }
        Ok(())
    }
}

/// A model output for one forecast.
#[derive(Debug, Clone, PartialEq)]
pub enum Forecast {
    /// Deterministic point forecast.
    Point(FieldTensor),
    /// Diagonal Gaussian predictive distribution.
    Gaussian { mean: FieldTensor, sigma: FieldTensor },
}

impl Forecast {
    pub fn gaussian(mean: FieldTensor, sigma: FieldTensor) -> Result<Self> {
        mean.spec().ensure_same(sigma.spec(), "mean vs sigma")?;
        check_sigma(&sigma)?;
        Ok(Forecast::Gaussian { mean, sigma })
    }

    pub fn spec(&self) -> &GridSpec {
        match self {
            Forecast::Point(p) => p.spec(),
            Forecast::Gaussian { mean, .. } => mean.spec(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Forecast::Point(_) => "point",
            Forecast::Gaussian { .. } => "gaussian",
        }
    }
}

pub(crate) fn check_sigma(sigma: &FieldTensor) -> Result<()> {
    match sigma.data().iter().position(|&s| s < 0.0) {
        Some(index) => Err(Error::NegativeSigma {
            index,
            value: sigma.data()[index],
        }),
        None => Ok(()),
    }
}

/// Held-out `(forecast, truth)` pairs sharing one grid.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    forecasts: Vec<Forecast>,
    truths: Vec<FieldTensor>,
}

impl CalibrationSet {
    pub fn new(forecasts: Vec<Forecast>, truths: Vec<FieldTensor>) -> Result<Self> {
        if forecasts.is_empty() {
            return Err(Error::Empty("calibration set needs at least one sample"));
        }
        if forecasts.len() != truths.len() {
            return Err(Error::InvalidConfig(format!(
                "{} forecasts for {} truths",
                forecasts.len(),
                truths.len()
            )));
        }
        let spec = truths[0].spec();
        let kind = forecasts[0].kind();
        for (f, y) in forecasts.iter().zip(&truths) {
            spec.ensure_same(y.spec(), "calibration truth")?;
            spec.ensure_same(f.spec(), "calibration forecast")?;
            if f.kind() != kind {
                return Err(Error::InvalidConfig(
                    "calibration set mixes point and gaussian forecasts".into(),
                ));
            }
            if let Forecast::Gaussian { mean, sigma } = f {
                mean.spec().ensure_same(sigma.spec(), "mean vs sigma")?;
                check_sigma(sigma)?;
            }
        }
        Ok(CalibrationSet { forecasts, truths })
    }

    pub fn deterministic(predictions: Vec<FieldTensor>, truths: Vec<FieldTensor>) -> Result<Self> {
        Self::new(predictions.into_iter().map(Forecast::Point).collect(), truths)
    }

    pub fn probabilistic(
        pairs: Vec<(FieldTensor, FieldTensor)>,
        truths: Vec<FieldTensor>,
    ) -> Result<Self> {
        let forecasts = pairs
            .into_iter()
            .map(|(mean, sigma)| Forecast::Gaussian { mean, sigma })
            .collect();
        Self::new(forecasts, truths)
    }

    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }

    pub fn spec(&self) -> &GridSpec {
        self.truths[0].spec()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Forecast, &FieldTensor)> {
        self.forecasts.iter().zip(&self.truths)
    }
}

/// Dense `(n, t, x, y, var)` stack of calibration scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    spec: GridSpec,
    n: usize,
    strategy: ScoreStrategy,
    /// Sample-major: sample `i`, cell `c` at `i * cells + c`.
    scores: Vec<f64>,
}

impl ScoreSet {
    /// Builds a score set from an already computed stack.
    pub fn from_raw(spec: GridSpec, strategy: ScoreStrategy, scores: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        strategy.validate()?;
        let cells = spec.len();
        if scores.is_empty() || !scores.len().is_multiple_of(cells) {
            return Err(Error::InvalidConfig(format!(
                "{} scores is not a positive multiple of {cells} cells",
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::NonFinite {
                index: i,
                value: scores[i],
            });
        }
        let n = scores.len() / cells;
        Ok(ScoreSet {
            spec,
            n,
            strategy,
            scores,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn strategy(&self) -> ScoreStrategy {
        self.strategy
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let cells = self.spec.len();
        &self.scores[i * cells..(i + 1) * cells]
    }

    /// Copies the `n` scores of cell `c` into `buf`.
    pub fn gather_cell(&self, c: usize, buf: &mut Vec<f64>) {
        let cells = self.spec.len();
        buf.clear();
        buf.extend((0..self.n).map(|i| self.scores[i * cells + c]));
    }
}

/// Accumulates scores one calibration sample at a time.
#[derive(Debug)]
pub struct ScoreSetBuilder {
    spec: GridSpec,
    strategy: ScoreStrategy,
    scores: Vec<f64>,
}

impl ScoreSetBuilder {
    pub fn new(spec: GridSpec, strategy: ScoreStrategy) -> Result<Self> {
        spec.validate()?;
        strategy.validate()?;
        Ok(ScoreSetBuilder {
            spec,
            strategy,
            scores: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len() / self.spec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn push(&mut self, forecast: &Forecast, truth: &FieldTensor) -> Result<()> {
        self.spec.ensure_same(truth.spec(), "truth")?;
        self.spec.ensure_same(forecast.spec(), "forecast")?;
        let start = self.scores.len();
        match (self.strategy, forecast) {
            (ScoreStrategy::Res, Forecast::Point(pred)) => {
                self.scores.extend(
                    truth
                        .data()
                        .iter()
                        .zip(pred.data())
                        .map(|(y, p)| (y - p).abs()),
                );
            }
            (ScoreStrategy::Std { sigma_floor }, Forecast::Gaussian { mean, sigma }) => {
                self.spec.ensure_same(sigma.spec(), "sigma")?;
                check_sigma(sigma)?;
                for ((y, mu), s) in truth.data().iter().zip(mean.data()).zip(sigma.data()) {
                    self.scores.push((y - mu).abs() / s.max(sigma_floor));
                }
            }
            (strategy, f) => {
                return Err(Error::StrategyMismatch {
                    expected: strategy.name(),
                    found: f.kind(),
                })
            }
        }
        // 0/0 with a zero floor, or overflow of a huge residual over a tiny sigma.
        if let Some(off) = self.scores[start..].iter().position(|s| !s.is_finite()) {
            let value = self.scores[start + off];
            self.scores.truncate(start);
            return Err(Error::NonFinite { index: off, value });
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ScoreSet> {
        if self.scores.is_empty() {
            return Err(Error::Empty("no calibration samples were scored"));
        }
        let n = self.len();
        Ok(ScoreSet {
            spec: self.spec,
            n,
            strategy: self.strategy,
            scores: self.scores,
        })
    }
}

/// Scores a calibration set with the given strategy.
pub fn score(calib: &CalibrationSet, strategy: ScoreStrategy) -> Result<ScoreSet> {
    let mut builder = ScoreSetBuilder::new(calib.spec().clone(), strategy)?;
    for (forecast, truth) in calib.iter() {
        builder.push(forecast, truth)?;
    }
    builder.finish()
}

/// Absolute residual scores `|y − ŷ|`.
pub fn score_res(calib: &CalibrationSet) -> Result<ScoreSet> {
    score(calib, ScoreStrategy::Res)
}

/// Normalised residual scores `|y − μ| / max(σ, sigma_floor)`.
pub fn score_std(calib: &CalibrationSet, sigma_floor: f64) -> Result<ScoreSet> {
    score(calib, ScoreStrategy::Std { sigma_floor })
}
