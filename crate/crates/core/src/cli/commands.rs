use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use cpgrid::calibrate::{calibrate_sweep, min_calibration_size};
use cpgrid::container::{read_container, write_container};
use cpgrid::evaluate::{curve_from_reports, CoverageAccumulator, CoverageReport};
use cpgrid::intervals::{
    interval_width, intervals_gaussian, intervals_res, intervals_std, IntervalField,
};
use cpgrid::report;
use cpgrid::scores::{Forecast, ScoreSetBuilder, ScoreStrategy};
use cpgrid::synth::{generate_many, SynthConfig};
use cpgrid::{cell_index, FieldTensor, GridSpec, QuantileField};

use super::manifest::{config_hash, unix_now, write_manifest, OutputLock, RunManifest, Timestamps};
use super::{
    CalibrateArgs, CliError, EvaluateArgs, GenerateArgs, PredictArgs, ReportArgs, RunOpts,
    StrategyArg,
};

const LOCK_NAME: &str = ".cpgrid.lock";
const MANIFEST_NAME: &str = "manifest.json";
/// Samples generated in memory at once before being written out.
const GENERATE_BATCH: u64 = 32;

fn usage(e: cpgrid::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Flag values as strings; unset options and empty lists are omitted.
fn flag_map<T: Serialize>(args: &T) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(args) {
        for (k, v) in map {
            let s = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::Array(a) if a.is_empty() => continue,
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            out.insert(k, s);
        }
    }
    out
}

/// Bookkeeping shared by every subcommand: flags, inputs, start time.
struct Run {
    command: &'static str,
    flags: BTreeMap<String, String>,
    inputs: Vec<PathBuf>,
    started: Option<u64>,
}

impl Run {
    fn start<T: Serialize>(command: &'static str, args: &T, opts: RunOpts) -> Self {
        Run {
            command,
            flags: flag_map(args),
            inputs: Vec::new(),
            started: opts.record_time.then(unix_now),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn finish(
        self,
        manifest: &Path,
        outputs: Vec<String>,
        details: serde_json::Value,
    ) -> Result<(), CliError> {
        let m = RunManifest {
            command: self.command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(self.command, &self.flags, &self.inputs)?,
            flags: self.flags,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs,
            timestamps: self.started.map(|started_unix| Timestamps {
                started_unix,
                finished_unix: unix_now(),
            }),
            details,
        };
        write_manifest(manifest, &m)
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Stems of `<stem><suffix>` files in `dir`, sorted.
fn stems(dir: &Path, suffix: &str) -> Result<Vec<String>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut out: Vec<String> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(suffix)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        })
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `<parent>/<name><suffix>` for a file-type output path.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn generate(a: &GenerateArgs, opts: RunOpts) -> Result<(), CliError> {
    let spec = GridSpec::with_defaults(a.t_out, a.nx, a.ny, a.nvar, a.step_hours).map_err(usage)?;
    let cfg = SynthConfig {
        spec,
        ar_coeff: a.ar,
        noise_sd: a.sd,
        spatial_corr_len: a.corr_len,
        miscalibration: a.miscal,
        heteroscedastic: a.hetero,
        forcing_offset: a.forcing,
        seed: a.seed,
    };
    cfg.validate().map_err(usage)?;
    if a.n_samples == 0 {
        return Err(CliError::Usage("--n-samples must be >= 1".into()));
    }
    let end = a
        .first_index
        .checked_add(a.n_samples as u64)
        .ok_or_else(|| CliError::Usage("--first-index + --n-samples overflows".into()))?;

    let run = Run::start("generate", a, opts);
    create_dir(&a.out)?;
    let _lock = OutputLock::acquire(a.out.join(LOCK_NAME))?;

    let mut outputs = Vec::new();
    let mut lo = a.first_index;
    while lo < end {
        let hi = (lo + GENERATE_BATCH).min(end);
        for (i, s) in (lo..hi).zip(generate_many(&cfg, lo..hi)?) {
            for (kind, t) in [
                ("truth", &s.truth),
                ("prediction", &s.prediction),
                ("mean", &s.mean),
                ("sigma", &s.sigma),
            ] {
                let name = format!("sample_{i:05}.{kind}.cpt");
                write_container(t, &a.out.join(&name))?;
                outputs.push(name);
            }
        }
        lo = hi;
    }
    outputs.push(MANIFEST_NAME.into());
    let details = json!({
        "config": cfg,
        "n_samples": a.n_samples,
        "first_index": a.first_index,
        "seed": a.seed,
    });
    run.finish(&a.out.join(MANIFEST_NAME), outputs, details)
}

fn quantile_file_name(alpha: f64) -> String {
    format!("q_alpha_{alpha}.cpt")
}

pub fn calibrate(a: &CalibrateArgs, opts: RunOpts) -> Result<(), CliError> {
    let mut alphas = a.alpha.clone();
    for &alpha in &alphas {
        check_alpha(alpha)?;
    }
    alphas.sort_by(f64::total_cmp);
    if alphas.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Usage("--alpha values must be distinct".into()));
    }
    let strategy = match a.strategy {
        StrategyArg::Res => ScoreStrategy::Res,
        StrategyArg::Std => {
            if !(a.sigma_floor.is_finite() && a.sigma_floor >= 0.0) {
                return Err(CliError::Usage(format!(
                    "--sigma-floor must be finite and >= 0, got {}",
                    a.sigma_floor
                )));
            }
            ScoreStrategy::Std {
                sigma_floor: a.sigma_floor,
            }
        }
    };
    let samples = stems(&a.calib_dir, ".truth.cpt")?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!(
            "no <stem>.truth.cpt files in {}",
            a.calib_dir.display()
        )));
    }

    let mut run = Run::start("calibrate", a, opts);
    run.input(&a.calib_dir);
    create_dir(&a.out)?;
    let _lock = OutputLock::acquire(a.out.join(LOCK_NAME))?;

    let dir = &a.calib_dir;
    let mut builder: Option<ScoreSetBuilder> = None;
    for stem in &samples {
        let truth = read_container(&dir.join(format!("{stem}.truth.cpt")))?;
        let forecast = match strategy {
            ScoreStrategy::Res => {
                Forecast::Point(read_container(&dir.join(format!("{stem}.prediction.cpt")))?)
            }
            ScoreStrategy::Std { .. } => Forecast::gaussian(
                read_container(&dir.join(format!("{stem}.mean.cpt")))?,
                read_container(&dir.join(format!("{stem}.sigma.cpt")))?,
            )?,
        };
        let b = match builder.as_mut() {
            Some(b) => b,
            None => builder.insert(ScoreSetBuilder::new(truth.spec().clone(), strategy)?),
        };
        b.push(&forecast, &truth)?;
    }
    let scores = builder.expect("at least one sample").finish()?;
    let sweep = calibrate_sweep(&scores, &alphas)?;

    let mut outputs = Vec::new();
    let mut files = Vec::new();
    for q in &sweep {
        let name = quantile_file_name(q.alpha());
        q.write(&a.out.join(&name))?;
        if q.is_infinite() {
            eprintln!(
                "WARN: infinite quantiles (n={} < required {})",
                q.n(),
                min_calibration_size(q.alpha())?
            );
        }
        files.push(json!({ "alpha": q.alpha(), "file": name, "infinite": q.is_infinite() }));
        outputs.push(name.clone());
        outputs.push(name.replace(".cpt", ".json"));
    }
    outputs.push(MANIFEST_NAME.into());
    let details = json!({
        "n": scores.n(),
        "strategy": strategy,
        "samples": samples,
        "quantiles": files,
    });
    run.finish(&a.out.join(MANIFEST_NAME), outputs, details)
}

/// Where the interval half-width comes from.
enum Source {
    Quantiles(QuantileField),
    Uncalibrated(f64),
}

impl Source {
    fn needs_sigma(&self) -> bool {
        match self {
            Source::Quantiles(q) => matches!(q.strategy(), ScoreStrategy::Std { .. }),
            Source::Uncalibrated(_) => true,
        }
    }

    /// File suffix of the forecast read in directory mode.
    fn forecast_suffix(&self) -> &'static str {
        if self.needs_sigma() {
            ".mean.cpt"
        } else {
            ".prediction.cpt"
        }
    }

    fn apply(&self, forecast: &FieldTensor, sigma: Option<&FieldTensor>) -> Result<IntervalField, CliError> {
        Ok(match (self, sigma) {
            (Source::Quantiles(q), _) if !self.needs_sigma() => intervals_res(forecast, q)?,
            (Source::Quantiles(q), Some(s)) => intervals_std(forecast, s, q)?,
            (Source::Uncalibrated(alpha), Some(s)) => intervals_gaussian(forecast, s, *alpha)?,
            (_, None) => unreachable!("sigma presence checked up front"),
        })
    }
}

pub fn predict(a: &PredictArgs, opts: RunOpts) -> Result<(), CliError> {
    let mut run = Run::start("predict", a, opts);
    let source = match (&a.quantiles, a.uncalibrated_alpha) {
        (Some(path), None) => {
            run.input(path);
            Source::Quantiles(QuantileField::read(path)?)
        }
        (None, Some(alpha)) => {
            check_alpha(alpha)?;
            Source::Uncalibrated(alpha)
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --quantiles or --uncalibrated-alpha".into(),
            ))
        }
    };
    if source.needs_sigma() && a.sigma.is_none() {
        return Err(CliError::Usage(match source {
            Source::Quantiles(_) => "std quantiles need --sigma".into(),
            Source::Uncalibrated(_) => "--uncalibrated-alpha needs --sigma".into(),
        }));
    }
    let sigma_path = a.sigma.as_ref().filter(|_| source.needs_sigma());
    run.input(&a.prediction);
    if let Some(s) = sigma_path {
        if s != &a.prediction {
            run.input(s);
        }
    }
    let method = match &source {
        Source::Quantiles(q) => q.strategy().name().to_string(),
        Source::Uncalibrated(_) => "uncalibrated".to_string(),
    };

    if a.prediction.is_dir() {
        let suffix = source.forecast_suffix();
        let samples = stems(&a.prediction, suffix)?;
        if samples.is_empty() {
            return Err(CliError::Usage(format!(
                "no <stem>{suffix} files in {}",
                a.prediction.display()
            )));
        }
        if let Some(s) = sigma_path {
            if !s.is_dir() {
                return Err(CliError::Usage(
                    "--sigma must be a directory when --prediction is".into(),
                ));
            }
        }
        create_dir(&a.out)?;
        let _lock = OutputLock::acquire(a.out.join(LOCK_NAME))?;
        let mut outputs = Vec::new();
        for stem in &samples {
            let forecast = read_container(&a.prediction.join(format!("{stem}{suffix}")))?;
            let sigma = sigma_path
                .map(|d| read_container(&d.join(format!("{stem}.sigma.cpt"))))
                .transpose()?;
            let iv = source.apply(&forecast, sigma.as_ref())?;
            let out = a.out.join(stem);
            iv.write(&out)?;
            let (lo, hi, meta) = IntervalField::paths(&out);
            outputs.extend([file_name(&lo), file_name(&hi), file_name(&meta)]);
        }
        outputs.push(MANIFEST_NAME.into());
        let details = json!({ "method": method, "samples": samples });
        run.finish(&a.out.join(MANIFEST_NAME), outputs, details)
    } else {
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        let _lock = OutputLock::acquire(sibling(&a.out, ".lock"))?;
        let forecast = read_container(&a.prediction)?;
        let sigma = sigma_path.map(|p| read_container(p)).transpose()?;
        let iv = source.apply(&forecast, sigma.as_ref())?;
        iv.write(&a.out)?;
        let (lo, hi, meta) = IntervalField::paths(&a.out);
        let manifest = sibling(&a.out, ".manifest.json");
        let outputs = vec![
            file_name(&lo),
            file_name(&hi),
            file_name(&meta),
            file_name(&manifest),
        ];
        run.finish(&manifest, outputs, json!({ "method": method }))
    }
}

/// `report.json` → `report`; other names are kept whole.
fn report_stem(out: &Path) -> PathBuf {
    let s = out.as_os_str().to_string_lossy();
    PathBuf::from(s.strip_suffix(".json").unwrap_or(&s).to_string())
}

pub fn evaluate(a: &EvaluateArgs, opts: RunOpts) -> Result<(), CliError> {
    let samples = stems(&a.intervals_dir, ".lower.cpt")?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!(
            "no interval files (<stem>.lower.cpt) in {}",
            a.intervals_dir.display()
        )));
    }
    if !a.truth_dir.is_dir() {
        return Err(CliError::Usage(format!(
            "{} is not a directory",
            a.truth_dir.display()
        )));
    }
    let mut run = Run::start("evaluate", a, opts);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let stem = report_stem(&a.out);
    let _lock = OutputLock::acquire(sibling(&stem, ".lock"))?;

    let mut acc: Option<CoverageAccumulator> = None;
    for stem in &samples {
        let iv = IntervalField::read(&a.intervals_dir.join(stem))?;
        let truth_path = a.truth_dir.join(format!("{stem}.truth.cpt"));
        run.input(&truth_path);
        let truth = read_container(&truth_path)?;
        let acc = match acc.as_mut() {
            Some(acc) => acc,
            None => acc.insert(CoverageAccumulator::new(iv.spec().clone(), iv.alpha())?),
        };
        acc.push(&iv, &truth)?;
    }
    run.inputs.insert(0, a.intervals_dir.clone());
    let report = acc.expect("at least one sample").finish()?;

    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(format!("serialising report: {e}")))?;
    text.push('\n');
    fs::write(&a.out, text).map_err(|e| CliError::io(&a.out, e))?;
    let csv = sibling(&stem, ".csv");
    fs::write(&csv, report.to_csv()).map_err(|e| CliError::io(&csv, e))?;

    let manifest = sibling(&stem, ".manifest.json");
    let outputs = vec![file_name(&a.out), file_name(&csv), file_name(&manifest)];
    let details = json!({
        "alpha": report.alpha,
        "n_test": report.n_test,
        "domain_coverage": report.domain_coverage,
        "mean_width": report.mean_width,
        "n_infinite": report.n_infinite,
    });
    run.finish(&manifest, outputs, details)
}

/// Keeps file names portable.
fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn report(a: &ReportArgs, opts: RunOpts) -> Result<(), CliError> {
    match &a.intervals {
        Some(stem) => report_widths(a, stem, opts),
        None => report_curve(a, opts),
    }
}

fn report_widths(a: &ReportArgs, stem: &Path, opts: RunOpts) -> Result<(), CliError> {
    let var = a
        .var
        .as_deref()
        .ok_or_else(|| CliError::Usage("--var is required with --intervals".into()))?;
    if a.lead_times.is_empty() {
        return Err(CliError::Usage("--lead-times is required with --intervals".into()));
    }
    let mut run = Run::start("report", a, opts);
    let iv = IntervalField::read(stem)?;
    let (lo, hi, meta) = IntervalField::paths(stem);
    for p in [&lo, &hi, &meta] {
        run.input(p);
    }
    let spec = iv.spec();
    let v = spec.variable_index(var).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown variable {var:?}; available: {}",
            spec.variable_names.join(", ")
        ))
    })?;
    let leads = a
        .lead_times
        .iter()
        .map(|&h| {
            spec.lead_hours
                .iter()
                .position(|&l| (l - h).abs() <= 1e-9 * l.abs().max(1.0))
                .ok_or_else(|| {
                    let avail: Vec<String> =
                        spec.lead_hours.iter().map(|l| l.to_string()).collect();
                    CliError::Usage(format!(
                        "unknown lead time {h}h; available: {}",
                        avail.join(", ")
                    ))
                })
        })
        .collect::<Result<Vec<usize>, CliError>>()?;

    create_dir(&a.out)?;
    let _lock = OutputLock::acquire(a.out.join(LOCK_NAME))?;
    let width = interval_width(&iv);
    let mut outputs = Vec::new();
    for &t in &leads {
        let mut values = Vec::with_capacity(spec.nx * spec.ny);
        for x in 0..spec.nx {
            for y in 0..spec.ny {
                values.push(width[cell_index(spec, t, x, y, v)?]);
            }
        }
        let hours = spec.lead_hours[t];
        let title = format!(
            "interval width, {var}, lead {hours} h, alpha {}",
            iv.alpha()
        );
        let base = format!("width_{}_{}h", file_safe(var), file_safe(&hours.to_string()));
        for (ext, body) in [
            ("svg", report::heatmap_svg(&values, spec.nx, spec.ny, &title)),
            ("csv", report::heatmap_csv(&values, spec.nx, spec.ny)),
        ] {
            let name = format!("{base}.{ext}");
            let path = a.out.join(&name);
            fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
            outputs.push(name);
        }
    }
    outputs.push(MANIFEST_NAME.into());
    let details = json!({
        "variable": var,
        "lead_hours": leads.iter().map(|&t| spec.lead_hours[t]).collect::<Vec<_>>(),
        "alpha": iv.alpha(),
    });
    run.finish(&a.out.join(MANIFEST_NAME), outputs, details)
}

fn report_curve(a: &ReportArgs, opts: RunOpts) -> Result<(), CliError> {
    if a.coverage_curve.is_empty() {
        return Err(CliError::Usage("--coverage-curve needs at least one report".into()));
    }
    let mut run = Run::start("report", a, opts);
    let mut reports = Vec::with_capacity(a.coverage_curve.len());
    for path in &a.coverage_curve {
        run.input(path);
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let r: CoverageReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        reports.push(r);
    }
    let points = curve_from_reports(&reports);

    create_dir(&a.out)?;
    let _lock = OutputLock::acquire(a.out.join(LOCK_NAME))?;
    let mut outputs = Vec::new();
    for (name, body) in [
        (
            "coverage_curve.svg",
            report::coverage_curve_svg(&points, "empirical vs nominal coverage"),
        ),
        ("coverage_curve.csv", report::coverage_curve_csv(&points)),
    ] {
        let path = a.out.join(name);
        fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
        outputs.push(name.to_string());
    }
    outputs.push(MANIFEST_NAME.into());
    let max_gap = points
        .iter()
        .map(|p| (p.empirical - p.nominal).abs())
        .fold(0.0, f64::max);
    let details = json!({ "points": points, "max_abs_deviation": max_gap });
    run.finish(&a.out.join(MANIFEST_NAME), outputs, details)
}
