//! Prediction sets: per-cell `[lower, upper]` bounds.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::{validate_alpha, QuantileField};
use crate::container::{self, Finiteness};
use crate::error::{Error, Result};
use crate::normal;
use crate::scores::{check_sigma, Forecast, ScoreStrategy};
use crate::tensor::{FieldTensor, GridSpec};

/// How an interval field was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    Res,
    Std,
    /// `μ ± z_{1−α/2}·σ` straight from the model, no conformal step.
    Uncalibrated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalField {
    spec: GridSpec,
    alpha: f64,
    method: IntervalMethod,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IntervalMeta {
    #[serde(flatten)]
    spec: GridSpec,
    alpha: f64,
    method: IntervalMethod,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(stem.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

impl IntervalField {
    pub fn new(
        spec: GridSpec,
        alpha: f64,
        method: IntervalMethod,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        validate_alpha(alpha)?;
        for bounds in [&lower, &upper] {
            if bounds.len() != spec.len() {
                return Err(Error::LengthMismatch {
                    expected: spec.len() as u64 * 8,
                    found: bounds.len() as u64 * 8,
                });
            }
        }
        if let Some(i) = lower
            .iter()
            .zip(&upper)
            .position(|(l, u)| l.is_nan() || u.is_nan() || l > u)
        {
            return Err(Error::InvalidConfig(format!(
                "bounds [{}, {}] at flat index {i} are not an interval",
                lower[i], upper[i]
            )));
        }
        Ok(IntervalField {
            spec,
            alpha,
            method,
            lower,
            upper,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn method(&self) -> IntervalMethod {
        self.method
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Paths `(<stem>.lower.cpt, <stem>.upper.cpt, <stem>.json)`.
    pub fn paths(stem: &Path) -> (PathBuf, PathBuf, PathBuf) {
        (
            with_suffix(stem, ".lower.cpt"),
            with_suffix(stem, ".upper.cpt"),
            with_suffix(stem, ".json"),
        )
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        let (lo, hi, meta) = Self::paths(stem);
        container::write_payload(&lo, self.spec.dims(), &self.lower)?;
        container::write_payload(&hi, self.spec.dims(), &self.upper)?;
        container::write_sidecar(
            &meta,
            &IntervalMeta {
                spec: self.spec.clone(),
                alpha: self.alpha,
                method: self.method,
            },
        )
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (lo, hi, meta) = Self::paths(stem);
        let meta: IntervalMeta = container::read_sidecar(&meta)?;
        let (dl, lower) = container::read_payload(&lo, Finiteness::AllowInfinite)?;
        container::check_dims(&meta.spec, dl, &lo)?;
        let (du, upper) = container::read_payload(&hi, Finiteness::AllowInfinite)?;
        container::check_dims(&meta.spec, du, &hi)?;
        IntervalField::new(meta.spec, meta.alpha, meta.method, lower, upper)
    }
}

/// `ŷ ± q̂`, cellwise.
pub fn intervals_res(prediction: &FieldTensor, q: &QuantileField) -> Result<IntervalField> {
    if q.strategy() != ScoreStrategy::Res {
        return Err(Error::StrategyMismatch {
            expected: "res",
            found: q.strategy().name(),
        });
    }
    prediction.spec().ensure_same(q.spec(), "prediction vs quantiles")?;
    let (lower, upper) = prediction
        .data()
        .iter()
        .zip(q.values())
        .map(|(p, q)| (p - q, p + q))
        .unzip();
    IntervalField::new(q.spec().clone(), q.alpha(), IntervalMethod::Res, lower, upper)
}

/// `μ ± q̂·max(σ, sigma_floor)`, with the floor recorded at calibration.
pub fn intervals_std(
    mean: &FieldTensor,
    sigma: &FieldTensor,
    q: &QuantileField,
) -> Result<IntervalField> {
    let ScoreStrategy::Std { sigma_floor } = q.strategy() else {
        return Err(Error::StrategyMismatch {
            expected: "std",
            found: q.strategy().name(),
        });
    };
    mean.spec().ensure_same(q.spec(), "mean vs quantiles")?;
    sigma.spec().ensure_same(q.spec(), "sigma vs quantiles")?;
    check_sigma(sigma)?;
    let (lower, upper) = mean
        .data()
        .iter()
        .zip(sigma.data())
        .zip(q.values())
        .map(|((mu, s), q)| {
            let half = q * s.max(sigma_floor);
            (mu - half, mu + half)
        })
        .unzip();
    IntervalField::new(q.spec().clone(), q.alpha(), IntervalMethod::Std, lower, upper)
}

/// Uncalibrated central Gaussian interval `μ ± z_{1−α/2}·σ`.
pub fn intervals_gaussian(mean: &FieldTensor, sigma: &FieldTensor, alpha: f64) -> Result<IntervalField> {
    validate_alpha(alpha)?;
    mean.spec().ensure_same(sigma.spec(), "mean vs sigma")?;
    check_sigma(sigma)?;
    let z = normal::two_sided_z(alpha);
    let (lower, upper) = mean
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(mu, s)| (mu - z * s, mu + z * s))
        .unzip();
    IntervalField::new(
        mean.spec().clone(),
        alpha,
        IntervalMethod::Uncalibrated,
        lower,
        upper,
    )
}

/// Dispatches on the forecast kind.
pub fn intervals_for(forecast: &Forecast, q: &QuantileField) -> Result<IntervalField> {
    match forecast {
        Forecast::Point(p) => intervals_res(p, q),
        Forecast::Gaussian { mean, sigma } => intervals_std(mean, sigma, q),
    }
}

/// `upper − lower`, cellwise. Infinite bounds give infinite width.
pub fn interval_width(iv: &IntervalField) -> Vec<f64> {
    iv.lower.iter().zip(&iv.upper).map(|(l, u)| u - l).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(n: usize) -> GridSpec {
        GridSpec::with_defaults(1, 1, n, 1, 1.0).unwrap()
    }

    fn field(values: &[f64]) -> FieldTensor {
        FieldTensor::new(spec(values.len()), values.to_vec()).unwrap()
    }

    fn qf(values: &[f64], strategy: ScoreStrategy) -> QuantileField {
        QuantileField::new(spec(values.len()), 0.1, 10, strategy, values.to_vec()).unwrap()
    }

    #[test]
    fn res_bounds() {
        let iv = intervals_res(&field(&[5.0]), &qf(&[2.0], ScoreStrategy::Res)).unwrap();
        assert_eq!((iv.lower()[0], iv.upper()[0]), (3.0, 7.0));
        assert_eq!(interval_width(&iv), vec![4.0]);
    }

    #[test]
    fn zero_quantile_collapses_to_prediction() {
        let p = field(&[1.0, -2.0]);
        let iv = intervals_res(&p, &qf(&[0.0, 0.0], ScoreStrategy::Res)).unwrap();
        assert_eq!(iv.lower(), p.data());
        assert_eq!(iv.upper(), p.data());
        let s = field(&[3.0, 0.5]);
        let iv = intervals_std(&p, &s, &qf(&[0.0, 0.0], ScoreStrategy::std_default())).unwrap();
        assert_eq!(iv.lower(), p.data());
        assert_eq!(iv.upper(), p.data());
    }

    #[test]
    fn infinite_quantile_gives_unbounded_interval() {
        let iv = intervals_res(&field(&[5.0]), &qf(&[f64::INFINITY], ScoreStrategy::Res)).unwrap();
        assert_eq!(iv.lower()[0], f64::NEG_INFINITY);
        assert_eq!(iv.upper()[0], f64::INFINITY);
        let iv = intervals_std(
            &field(&[5.0]),
            &field(&[0.0]),
            &qf(&[f64::INFINITY], ScoreStrategy::std_default()),
        )
        .unwrap();
        assert_eq!(interval_width(&iv)[0], f64::INFINITY);
    }

    #[test]
    fn std_bounds() {
        let iv = intervals_std(
            &field(&[5.0]),
            &field(&[2.0]),
            &qf(&[1.5], ScoreStrategy::std_default()),
        )
        .unwrap();
        assert_eq!((iv.lower()[0], iv.upper()[0]), (2.0, 8.0));
    }

    #[test]
    fn std_uses_recorded_floor() {
        let iv = intervals_std(
            &field(&[0.0]),
            &field(&[0.0]),
            &qf(&[1.5], ScoreStrategy::Std { sigma_floor: 1e-8 }),
        )
        .unwrap();
        assert!((interval_width(&iv)[0] - 3e-8).abs() < 1e-22);
    }

    #[test]
    fn strategy_mismatch() {
        let p = field(&[0.0]);
        assert!(matches!(
            intervals_res(&p, &qf(&[1.0], ScoreStrategy::std_default())),
            Err(Error::StrategyMismatch { .. })
        ));
        assert!(matches!(
            intervals_std(&p, &p, &qf(&[1.0], ScoreStrategy::Res)),
            Err(Error::StrategyMismatch { .. })
        ));
    }

    #[test]
    fn negative_sigma_rejected() {
        let r = intervals_std(
            &field(&[0.0]),
            &field(&[-1.0]),
            &qf(&[1.0], ScoreStrategy::std_default()),
        );
        assert!(matches!(r, Err(Error::NegativeSigma { .. })));
    }

    #[test]
    fn spec_mismatch() {
        let r = intervals_res(&field(&[0.0, 1.0]), &qf(&[1.0], ScoreStrategy::Res));
        assert!(matches!(r, Err(Error::SpecMismatch(_))));
    }

    #[test]
    fn gaussian_baseline_uses_normal_quantile() {
        let iv = intervals_gaussian(&field(&[0.0]), &field(&[1.0]), 0.05).unwrap();
        assert!((iv.upper()[0] - 1.959_963_984_540_054).abs() < 1e-12);
        assert_eq!(iv.method(), IntervalMethod::Uncalibrated);
    }

    #[test]
    fn persisted_intervals_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("iv.sample");
        let iv = intervals_res(
            &field(&[1.0, 2.0]),
            &qf(&[0.5, f64::INFINITY], ScoreStrategy::Res),
        )
        .unwrap();
        iv.write(&stem).unwrap();
        assert!(dir.path().join("iv.sample.lower.cpt").exists());
        assert!(dir.path().join("iv.sample.upper.cpt").exists());
        assert!(dir.path().join("iv.sample.json").exists());
        assert_eq!(IntervalField::read(&stem).unwrap(), iv);
    }

    proptest! {
        #[test]
        fn res_width_is_independent_of_forecast(
            a in prop::collection::vec(-100f64..100.0, 4),
            b in prop::collection::vec(-100f64..100.0, 4),
            q in prop::collection::vec(0f64..10.0, 4),
        ) {
            let qf = qf(&q, ScoreStrategy::Res);
            let wa = interval_width(&intervals_res(&field(&a), &qf).unwrap());
            let wb = interval_width(&intervals_res(&field(&b), &qf).unwrap());
            for ((x, y), q) in wa.iter().zip(&wb).zip(&q) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x));
                prop_assert!((x - 2.0 * q).abs() <= 1e-9 * (1.0 + x));
            }
        }

        #[test]
        fn res_translation_equivariance(p in -100f64..100.0, q in 0f64..10.0, shift in -50f64..50.0) {
            let qf = qf(&[q], ScoreStrategy::Res);
            let a = intervals_res(&field(&[p]), &qf).unwrap();
            let b = intervals_res(&field(&[p + shift]), &qf).unwrap();
            prop_assert!((b.lower()[0] - a.lower()[0] - shift).abs() < 1e-9);
            prop_assert!((b.upper()[0] - a.upper()[0] - shift).abs() < 1e-9);
        }

        #[test]
        fn std_width_monotone_in_sigma(s1 in 0f64..10.0, ds in 0f64..10.0, q in 0f64..5.0) {
            let qf = qf(&[q], ScoreStrategy::std_default());
            let m = field(&[0.0]);
            let w1 = interval_width(&intervals_std(&m, &field(&[s1]), &qf).unwrap())[0];
            let w2 = interval_width(&intervals_std(&m, &field(&[s1 + ds]), &qf).unwrap())[0];
            prop_assert!(w2 >= w1);
        }

        #[test]
        fn nested_in_alpha(p in -10f64..10.0, q_small in 0f64..5.0, dq in 0f64..5.0) {
            // Larger α ⇒ smaller q̂ ⇒ nested interval.
            let wide = intervals_res(&field(&[p]), &qf(&[q_small + dq], ScoreStrategy::Res)).unwrap();
            let narrow = intervals_res(&field(&[p]), &qf(&[q_small], ScoreStrategy::Res)).unwrap();
            prop_assert!(wide.lower()[0] <= narrow.lower()[0]);
            prop_assert!(wide.upper()[0] >= narrow.upper()[0]);
        }
    }
}
