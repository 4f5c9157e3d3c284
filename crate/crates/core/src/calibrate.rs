//! Per-cell conformal quantiles.
//!
//! For `n` calibration scores and miscoverage `α`, the conformal quantile is
//! the `k`-th smallest score (1-indexed) with `k = ⌈(n+1)(1−α)⌉`. When
//! `k > n` no finite threshold carries the guarantee, and the quantile is
//! `+∞`. Every cell is calibrated independently; selection is exact.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, Finiteness};
use crate::error::{Error, Result};
use crate::scores::{ScoreSet, ScoreStrategy};
use crate::tensor::GridSpec;

/// Tolerance used to snap `(n+1)(1−α)` onto an integer before taking the
/// ceiling, so that e.g. `10 × 0.9` is rank 9 and not 10.
const RANK_SNAP: f64 = 1e-9;

/// Cells handed to one rayon task.
const CELL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    /// 1-indexed order statistic.
    Finite(usize),
    Infinite,
}

pub(crate) fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

fn snapped_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= RANK_SNAP * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// `k = ⌈(n+1)(1−α)⌉`, or [`Rank::Infinite`] when `k > n`.
pub fn conformal_rank(n: usize, alpha: f64) -> Result<Rank> {
    validate_alpha(alpha)?;
    if n == 0 {
        return Err(Error::Empty("conformal rank needs n >= 1"));
    }
    let k = snapped_ceil((n as f64 + 1.0) * (1.0 - alpha)).max(1.0) as usize;
    Ok(if k <= n { Rank::Finite(k) } else { Rank::Infinite })
}

/// Smallest calibration size with a finite rank: `⌈(1−α)/α⌉`.
pub fn min_calibration_size(alpha: f64) -> Result<usize> {
    validate_alpha(alpha)?;
    Ok(snapped_ceil((1.0 - alpha) / alpha).max(1.0) as usize)
}

/// Per-cell conformal quantile for one `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileField {
    spec: GridSpec,
    alpha: f64,
    n: usize,
    strategy: ScoreStrategy,
    q: Vec<f64>,
}

/// Sidecar written next to a persisted [`QuantileField`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantileMeta {
    #[serde(flatten)]
    spec: GridSpec,
    alpha: f64,
    n: usize,
    strategy: String,
    sigma_floor: Option<f64>,
}

impl QuantileField {
    pub fn new(
        spec: GridSpec,
        alpha: f64,
        n: usize,
        strategy: ScoreStrategy,
        q: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        validate_alpha(alpha)?;
        if n == 0 {
            return Err(Error::Empty("quantile field needs n >= 1"));
        }
        if q.len() != spec.len() {
            return Err(Error::LengthMismatch {
                expected: spec.len() as u64 * 8,
                found: q.len() as u64 * 8,
            });
        }
        if let Some(i) = q.iter().position(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::NonFinite {
                index: i,
                value: q[i],
            });
        }
        Ok(QuantileField {
            spec,
            alpha,
            n,
            strategy,
            q,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn strategy(&self) -> ScoreStrategy {
        self.strategy
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn is_infinite(&self) -> bool {
        self.q.iter().any(|v| v.is_infinite())
    }

    /// Writes `<path>` (CPTF, `+inf` kept as IEEE infinity) and its sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_payload(path, self.spec.dims(), &self.q)?;
        let meta = QuantileMeta {
            spec: self.spec.clone(),
            alpha: self.alpha,
            n: self.n,
            strategy: self.strategy.name().to_string(),
            sigma_floor: self.strategy.sigma_floor(),
        };
        container::write_sidecar(&container::sidecar_path(path), &meta)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (dims, q) = container::read_payload(path, Finiteness::AllowInfinite)?;
        let meta: QuantileMeta = container::read_sidecar(&container::sidecar_path(path))?;
        container::check_dims(&meta.spec, dims, path)?;
        let strategy = match (meta.strategy.as_str(), meta.sigma_floor) {
            ("res", _) => ScoreStrategy::Res,
            ("std", Some(sigma_floor)) => ScoreStrategy::Std { sigma_floor },
            (other, _) => {
                return Err(Error::InvalidConfig(format!(
                    "{}: unknown strategy {other:?} or missing sigma_floor",
                    path.display()
                )))
            }
        };
        QuantileField::new(meta.spec, meta.alpha, meta.n, strategy, q)
    }
}

/// Runs `f` on the gathered scores of every cell, in parallel over cell
/// chunks, writing one output per `(cell, output slot)`.
fn per_cell<F>(scores: &ScoreSet, outputs: usize, f: F) -> Vec<f64>
where
    F: Fn(&mut Vec<f64>, &mut [f64]) + Sync,
{
    let cells = scores.spec().len();
    let mut out = vec![0.0; cells * outputs];
    out.par_chunks_mut(CELL_CHUNK * outputs)
        .enumerate()
        .for_each(|(chunk, slots)| {
            let mut buf = Vec::with_capacity(scores.n());
            for (j, slot) in slots.chunks_mut(outputs).enumerate() {
                scores.gather_cell(chunk * CELL_CHUNK + j, &mut buf);
                f(&mut buf, slot);
            }
        });
    out
}

/// Conformal quantile of every cell at one `α`.
pub fn calibrate_quantiles(scores: &ScoreSet, alpha: f64) -> Result<QuantileField> {
    let rank = conformal_rank(scores.n(), alpha)?;
    let q = match rank {
        Rank::Infinite => vec![f64::INFINITY; scores.spec().len()],
        Rank::Finite(k) => per_cell(scores, 1, |buf, slot| {
            let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
            slot[0] = *kth;
        }),
    };
    QuantileField::new(scores.spec().clone(), alpha, scores.n(), scores.strategy(), q)
}

/// Conformal quantiles for a strictly increasing grid of `α`.
///
/// Each cell is sorted once and indexed at every rank, so the results are
/// bitwise identical to calling [`calibrate_quantiles`] per `α`.
pub fn calibrate_sweep(scores: &ScoreSet, alphas: &[f64]) -> Result<Vec<QuantileField>> {
    if alphas.is_empty() || alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidAlphaGrid);
    }
    let ranks = alphas
        .iter()
        .map(|&a| conformal_rank(scores.n(), a))
        .collect::<Result<Vec<_>>>()?;
    let m = ranks.len();
    let table = per_cell(scores, m, |buf, slots| {
        buf.sort_unstable_by(f64::total_cmp);
        for (slot, rank) in slots.iter_mut().zip(&ranks) {
            *slot = match rank {
                Rank::Finite(k) => buf[k - 1],
                Rank::Infinite => f64::INFINITY,
            };
        }
    });
    alphas
        .iter()
        .enumerate()
        .map(|(j, &alpha)| {
            let q = table.iter().skip(j).step_by(m).copied().collect();
            QuantileField::new(scores.spec().clone(), alpha, scores.n(), scores.strategy(), q)
        })
        .collect()
}
