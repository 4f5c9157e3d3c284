//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Run with `cargo test -p cpgrid --test acceptance` (add `--release` for
//! representative timings).

use std::fs;
use std::ops::Range;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use cpgrid::calibrate::{calibrate_quantiles, calibrate_sweep, conformal_rank, Rank};
use cpgrid::container::{read_container, write_container};
use cpgrid::evaluate::{curve_from_reports, CoverageAccumulator, CoverageReport, SweepAccumulator};
use cpgrid::intervals::{intervals_for, intervals_gaussian};
use cpgrid::normal::two_sided_z;
use cpgrid::scores::{Forecast, ScoreSetBuilder, ScoreStrategy};
use cpgrid::synth::{generate_many, sigma_true, SynthConfig, SynthSample};
use cpgrid::{FieldTensor, GridSpec, QuantileField, ScoreSet};

type Outcome = Result<String, String>;

const SEED: u64 = 20_240_607;
/// Alphas whose `1 − α` span the coverage curve `{0.1, …, 0.9, 0.95}`.
const CURVE_ALPHAS: [f64; 10] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
const TEST_BATCH: u64 = 100;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn base_config(t_out: usize, nx: usize, ny: usize, nvar: usize) -> SynthConfig {
    let spec = GridSpec::with_defaults(t_out, nx, ny, nvar, 3.0).expect("valid grid");
    SynthConfig::new(spec, SEED)
}

fn forecast(s: &SynthSample, strategy: ScoreStrategy) -> cpgrid::Result<Forecast> {
    match strategy {
        ScoreStrategy::Res => Ok(Forecast::Point(s.prediction.clone())),
        ScoreStrategy::Std { .. } => Forecast::gaussian(s.mean.clone(), s.sigma.clone()),
    }
}

fn score_samples(
    cfg: &SynthConfig,
    samples: &[SynthSample],
    strategy: ScoreStrategy,
) -> cpgrid::Result<ScoreSet> {
    let mut b = ScoreSetBuilder::new(cfg.spec.clone(), strategy)?;
    for s in samples {
        b.push(&forecast(s, strategy)?, &s.truth)?;
    }
    b.finish()
}

/// Calibrates every strategy on `cal` and evaluates the whole `alphas`
/// sweep on `test`. Returns one report list per strategy, in `alphas` order.
fn sweep_experiment(
    cfg: &SynthConfig,
    cal: Range<u64>,
    test: Range<u64>,
    strategies: &[ScoreStrategy],
    alphas: &[f64],
) -> cpgrid::Result<Vec<Vec<CoverageReport>>> {
    let cal_samples = generate_many(cfg, cal)?;
    let mut accs = Vec::new();
    for &strategy in strategies {
        let scores = score_samples(cfg, &cal_samples, strategy)?;
        accs.push(SweepAccumulator::new(calibrate_sweep(&scores, alphas)?)?);
    }
    drop(cal_samples);
    let mut lo = test.start;
    while lo < test.end {
        let hi = (lo + TEST_BATCH).min(test.end);
        for s in generate_many(cfg, lo..hi)? {
            for (acc, &strategy) in accs.iter_mut().zip(strategies) {
                acc.push(&forecast(&s, strategy)?, &s.truth)?;
            }
        }
        lo = hi;
    }
    accs.into_iter().map(SweepAccumulator::finish).collect()
}

/// Reports of the reference run shared by several criteria.
struct ReferenceRun {
    res: Vec<CoverageReport>,
    std: Vec<CoverageReport>,
    cfg: SynthConfig,
    elapsed: Duration,
}

fn reference_run() -> Result<ReferenceRun, String> {
    let cfg = base_config(8, 24, 24, 2);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(err)?;
    let start = Instant::now();
    let mut reports = pool
        .install(|| {
            sweep_experiment(
                &cfg,
                0..200,
                200..1200,
                &[ScoreStrategy::Res, ScoreStrategy::std_default()],
                &CURVE_ALPHAS,
            )
        })
        .map_err(err)?;
    let elapsed = start.elapsed();
    let std = reports.pop().expect("two strategies");
    let res = reports.pop().expect("two strategies");
    Ok(ReferenceRun {
        res,
        std,
        cfg,
        elapsed,
    })
}

fn at_alpha(reports: &[CoverageReport], alpha: f64) -> &CoverageReport {
    reports
        .iter()
        .find(|r| r.alpha == alpha)
        .expect("alpha in sweep")
}

fn criterion_1(run: &ReferenceRun) -> Outcome {
    let mut parts = Vec::new();
    for alpha in [0.05, 0.1, 0.2] {
        for (name, reports) in [("res", &run.res), ("std", &run.std)] {
            let cov = at_alpha(reports, alpha).domain_coverage;
            let (lo, hi) = (1.0 - alpha - 0.02, 1.0 - alpha + 0.03);
            check(cov >= lo && cov <= hi, || {
                format!("{name} alpha={alpha}: coverage {cov:.4} outside [{lo:.2}, {hi:.2}]")
            })?;
            parts.push(format!("{name}@{alpha}={cov:.4}"));
        }
    }
    let secs = run.elapsed.as_secs_f64();
    check(secs < 60.0, || format!("single-threaded run took {secs:.1} s"))?;
    Ok(format!("{} in {secs:.1} s on 1 thread", parts.join(" ")))
}

/// `⌈(n+1)(1000−m)/1000⌉` in integers, for `α = m/1000`.
fn exact_rank(n: usize, m: u64) -> Option<usize> {
    let num = (n as u64 + 1) * (1000 - m);
    let k = num.div_ceil(1000) as usize;
    (k <= n).then_some(k)
}

/// Deterministic generator for the randomized stacks (SplitMix64).
struct Rng(u64);

impl Rng {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng(SEED);
    let (mut ties, mut infinite) = (0usize, 0usize);
    for trial in 0..1000 {
        let n = 1 + rng.below(512) as usize;
        let (nx, ny) = (1 + rng.below(3) as usize, 1 + rng.below(3) as usize);
        let spec = GridSpec::with_defaults(1, nx, ny, 1, 1.0).map_err(err)?;
        let cells = spec.len();
        let m = 1 + rng.below(999);
        let alpha = m as f64 / 1000.0;
        let tied = trial % 3 == 0;
        let scores: Vec<f64> = (0..n * cells)
            .map(|_| {
                if tied {
                    rng.below(4) as f64 * 0.5
                } else {
                    rng.unit() * 10.0
                }
            })
            .collect();
        ties += tied as usize;
        let set = ScoreSet::from_raw(spec.clone(), ScoreStrategy::Res, scores.clone()).map_err(err)?;
        let q = calibrate_quantiles(&set, alpha).map_err(err)?;
        let expected_rank = exact_rank(n, m);
        let rank = conformal_rank(n, alpha).map_err(err)?;
        check(
            rank == expected_rank.map_or(Rank::Infinite, Rank::Finite),
            || format!("trial {trial}: rank {rank:?} != exact {expected_rank:?} (n={n}, alpha={alpha})"),
        )?;
        if expected_rank.is_none() {
            infinite += 1;
        }
        for c in 0..cells {
            let want = match expected_rank {
                None => f64::INFINITY,
                Some(k) => {
                    let mut col: Vec<f64> = (0..n).map(|i| scores[i * cells + c]).collect();
                    col.sort_by(f64::total_cmp);
                    col[k - 1]
                }
            };
            let got = q.values()[c];
            check(got.to_bits() == want.to_bits(), || {
                format!("trial {trial} cell {c}: {got} != oracle {want}")
            })?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "1000 stacks bitwise equal ({ties} with ties, {infinite} infinite rank) in {secs:.2} s"
    ))
}

fn criterion_3() -> Outcome {
    let mut cfg = base_config(8, 24, 24, 2);
    cfg.miscalibration = 0.7;
    let alpha = 0.1;
    let cal = generate_many(&cfg, 0..200).map_err(err)?;
    let strategy = ScoreStrategy::std_default();
    let q = calibrate_quantiles(&score_samples(&cfg, &cal, strategy).map_err(err)?, alpha)
        .map_err(err)?;
    drop(cal);

    let mut uncal = CoverageAccumulator::new(cfg.spec.clone(), alpha).map_err(err)?;
    let mut conf = CoverageAccumulator::new(cfg.spec.clone(), alpha).map_err(err)?;
    let mut lo = 200;
    while lo < 1200 {
        let hi = lo + TEST_BATCH;
        for s in generate_many(&cfg, lo..hi).map_err(err)? {
            let g = intervals_gaussian(&s.mean, &s.sigma, alpha).map_err(err)?;
            uncal.push(&g, &s.truth).map_err(err)?;
            let f = forecast(&s, strategy).map_err(err)?;
            conf.push(&intervals_for(&f, &q).map_err(err)?, &s.truth)
                .map_err(err)?;
        }
        lo = hi;
    }
    let uncal = uncal.finish().map_err(err)?.domain_coverage;
    let conf = conf.finish().map_err(err)?.domain_coverage;

    let phi = Normal::new(0.0, 1.0).map_err(err)?;
    let expected = 2.0 * phi.cdf(1.645 * 0.7) - 1.0;
    let expected_exact_z = 2.0 * phi.cdf(two_sided_z(alpha) * 0.7) - 1.0;
    // The oracle is quoted as 0.751 to three decimals.
    check((expected - 0.751).abs() < 1e-3, || {
        format!("oracle 2Phi(1.645*0.7)-1 = {expected:.5}, not ~0.751")
    })?;
    for target in [expected, 0.751] {
        check((uncal - target).abs() <= 0.02, || {
            format!("uncalibrated coverage {uncal:.4} not within 0.02 of {target:.4}")
        })?;
    }
    check((0.88..=0.93).contains(&conf), || {
        format!("conformalized coverage {conf:.4} outside [0.88, 0.93]")
    })?;
    Ok(format!(
        "uncalibrated {uncal:.4} (oracle {expected:.5}, exact z {expected_exact_z:.4}), std conformal {conf:.4}"
    ))
}

fn criterion_4() -> Outcome {
    let cfg = base_config(8, 4, 4, 1);
    let cal = generate_many(&cfg, 0..5000).map_err(err)?;
    let scores = score_samples(&cfg, &cal, ScoreStrategy::std_default()).map_err(err)?;
    let q: QuantileField = calibrate_quantiles(&scores, 0.05).map_err(err)?;
    let z = 1.959_964;
    let per_lead = cfg.spec.cells_per_lead();
    let mut worst: f64 = 0.0;
    for t in 0..cfg.spec.t_out {
        for (j, &v) in q.values()[t * per_lead..(t + 1) * per_lead].iter().enumerate() {
            let rel = (v - z).abs() / z;
            worst = worst.max(rel);
            check(rel <= 0.05, || {
                format!("lead {t} cell {j}: q = {v:.4}, {:.1}% from {z}", rel * 100.0)
            })?;
        }
    }
    Ok(format!(
        "{} cells, max relative deviation {:.2}% from {z}",
        q.values().len(),
        worst * 100.0
    ))
}

fn strictly_ordered_like(widths: &[f64], reference: &[f64]) -> bool {
    let order = |xs: &[f64]| {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        idx
    };
    widths.windows(2).all(|w| w[0] < w[1]) && order(widths) == order(reference)
}

fn criterion_5(run: &ReferenceRun) -> Outcome {
    let sigma: Vec<f64> = (0..run.cfg.spec.t_out)
        .map(|t| sigma_true(&run.cfg, t))
        .collect();
    check(sigma.windows(2).all(|w| w[0] < w[1]), || {
        format!("sigma_true not increasing: {sigma:?}")
    })?;
    let mut parts = Vec::new();
    for (name, reports) in [("res", &run.res), ("std", &run.std)] {
        let widths: Vec<f64> = at_alpha(reports, 0.1)
            .per_leadtime_mean_width
            .iter()
            .map(|w| w.unwrap_or(f64::INFINITY))
            .collect();
        check(strictly_ordered_like(&widths, &sigma), || {
            format!("{name} widths {widths:?} not ordered like sigma_true {sigma:?}")
        })?;
        parts.push(format!(
            "{name} {:.3}..{:.3}",
            widths[0],
            widths[widths.len() - 1]
        ));
    }
    Ok(format!("8 leads increasing, {}", parts.join(", ")))
}

fn criterion_6() -> Outcome {
    let mut cfg = base_config(8, 24, 24, 2);
    cfg.heteroscedastic = true;
    cfg.seed = SEED + 6;
    let reports = sweep_experiment(
        &cfg,
        0..200,
        200..1200,
        &[ScoreStrategy::Res, ScoreStrategy::std_default()],
        &[0.1],
    )
    .map_err(err)?;
    let (res, std) = (&reports[0][0], &reports[1][0]);
    for (name, r) in [("res", res), ("std", std)] {
        check((r.domain_coverage - 0.9).abs() <= 0.02, || {
            format!("{name} coverage {:.4} not within 0.02 of 0.90", r.domain_coverage)
        })?;
    }
    let (wr, ws) = (
        res.mean_width.ok_or("res width infinite")?,
        std.mean_width.ok_or("std width infinite")?,
    );
    check(ws < wr, || format!("std width {ws:.4} not below res width {wr:.4}"))?;
    Ok(format!(
        "std width {ws:.4} < res width {wr:.4}; coverage res {:.4}, std {:.4}",
        res.domain_coverage, std.domain_coverage
    ))
}

fn criterion_7(run: &ReferenceRun) -> Outcome {
    let mut worst: f64 = 0.0;
    for (name, reports) in [("res", &run.res), ("std", &run.std)] {
        let curve = curve_from_reports(reports);
        check(curve.len() == CURVE_ALPHAS.len(), || format!("{name}: short curve"))?;
        for p in &curve {
            let gap = (p.empirical - p.nominal).abs();
            worst = worst.max(gap);
            check(gap <= 0.03, || {
                format!(
                    "{name}: nominal {:.2} has empirical {:.4}",
                    p.nominal, p.empirical
                )
            })?;
        }
    }
    Ok(format!(
        "{} levels x 2 strategies, max |empirical - nominal| = {worst:.4}",
        CURVE_ALPHAS.len()
    ))
}

fn random_tensor(rng: &mut Rng) -> Result<FieldTensor, String> {
    let dims: Vec<usize> = (0..4).map(|_| 1 + rng.below(5) as usize).collect();
    let spec = GridSpec::with_defaults(dims[0], dims[1], dims[2], dims[3], 1.5).map_err(err)?;
    let data = (0..spec.len())
        .map(|_| loop {
            let v = match rng.below(4) {
                0 => f64::from_bits(rng.next()),
                1 => -0.0,
                2 => f64::MIN_POSITIVE * rng.unit(),
                _ => (rng.unit() - 0.5) * 1e6,
            };
            if v.is_finite() {
                break v;
            }
        })
        .collect();
    FieldTensor::new(spec, data).map_err(err)
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(err)? {
        let p = e.map_err(err)?.path();
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        out.push((name, fs::read(&p).map_err(err)?));
    }
    out.sort();
    Ok(out)
}

fn relative_gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;

    let mut rng = Rng(SEED ^ 8);
    for i in 0..100 {
        let t = random_tensor(&mut rng)?;
        let p = tmp.path().join(format!("t{i}.cpt"));
        write_container(&t, &p).map_err(err)?;
        let back = read_container(&p).map_err(err)?;
        check(back.bits_eq(&t) && back.spec() == t.spec(), || {
            format!("tensor {i} changed in round trip")
        })?;
    }

    let out = tmp.path().join("gen");
    let generate = || -> Result<Vec<(String, Vec<u8>)>, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_cpgrid"))
            .args(["generate", "--nx", "8", "--ny", "6", "--t-out", "4", "--nvar", "2"])
            .args(["--n-samples", "12", "--seed", "99", "--hetero", "--out"])
            .arg(&out)
            .status()
            .map_err(err)?;
        check(status.success(), || format!("generate exited with {status}"))?;
        dir_bytes(&out)
    };
    let first = generate()?;
    fs::remove_dir_all(&out).map_err(err)?;
    let second = generate()?;
    check(first == second, || "repeated generate differs".to_string())?;

    let cfg = base_config(4, 12, 10, 2);
    let cal = generate_many(&cfg, 0..50).map_err(err)?;
    let q = calibrate_quantiles(
        &score_samples(&cfg, &cal, ScoreStrategy::Res).map_err(err)?,
        0.1,
    )
    .map_err(err)?;
    let test = generate_many(&cfg, 50..90).map_err(err)?;
    let ivs: Vec<_> = test
        .par_iter()
        .map(|s| intervals_for(&Forecast::Point(s.prediction.clone()), &q))
        .collect::<cpgrid::Result<_>>()
        .map_err(err)?;
    let truths: Vec<FieldTensor> = test.iter().map(|s| s.truth.clone()).collect();
    let evaluate_with = |threads: usize| -> Result<CoverageReport, String> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(err)?
            .install(|| cpgrid::empirical_coverage(&ivs, &truths))
            .map_err(err)
    };
    let (one, four) = (evaluate_with(1)?, evaluate_with(4)?);
    let mut pairs = vec![(one.domain_coverage, four.domain_coverage)];
    pairs.push((one.mean_width.unwrap_or(0.0), four.mean_width.unwrap_or(0.0)));
    pairs.extend(one.per_cell_coverage.iter().copied().zip(four.per_cell_coverage.iter().copied()));
    pairs.extend(
        one.per_leadtime_mean_width
            .iter()
            .zip(&four.per_leadtime_mean_width)
            .map(|(a, b)| (a.unwrap_or(0.0), b.unwrap_or(0.0))),
    );
    let worst = pairs
        .iter()
        .map(|&(a, b)| relative_gap(a, b))
        .fold(0.0, f64::max);
    check(worst <= 1e-12, || format!("1 vs 4 threads differ by {worst:e}"))?;

    Ok(format!(
        "100 round trips bitwise, generate dirs identical ({} files), 1 vs 4 threads max rel gap {worst:e}",
        first.len()
    ))
}

fn run_guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".to_string())),
    }
}

fn main() {
    let reference = panic::catch_unwind(reference_run).unwrap_or_else(|_| Err("panicked".into()));
    let shared = |f: fn(&ReferenceRun) -> Outcome| -> Outcome {
        match &reference {
            Ok(run) => run_guarded(|| f(run)),
            Err(e) => Err(format!("reference run failed: {e}")),
        }
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("1 marginal coverage", shared(criterion_1)),
        ("2 order-statistic oracle", run_guarded(criterion_2)),
        ("3 uncalibrated vs conformalized", run_guarded(criterion_3)),
        ("4 quantile convergence", run_guarded(criterion_4)),
        ("5 width growth in lead time", shared(criterion_5)),
        ("6 std tighter than res", run_guarded(criterion_6)),
        ("7 coverage curve", shared(criterion_7)),
        ("8 format determinism", run_guarded(criterion_8)),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
