//! Empirical coverage and interval width.
//!
//! Coverage of a cell is the fraction of test forecasts whose truth lies in
//! `[lower, upper]` (boundaries count as covered). Domain, lead-time and
//! variable coverages are plain means of the per-cell fractions.
//!
//! Per-cell statistics are accumulated sequentially over test samples and
//! reduced over cells with pairwise summation in a fixed order, so reports
//! do not depend on how many threads ran the update.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{validate_alpha, QuantileField};
use crate::error::{Error, Result};
use crate::intervals::{intervals_for, IntervalField};
use crate::scores::Forecast;
use crate::tensor::{FieldTensor, GridSpec};

const PAIRWISE_BLOCK: usize = 64;
const CELL_CHUNK: usize = 1024;

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// One row of the tabular export; `None` labels mean "all".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub lead_hours: Option<f64>,
    pub variable: Option<String>,
    pub coverage: f64,
    pub mean_width: Option<f64>,
    pub n_infinite: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub nominal_coverage: f64,
    pub n_test: usize,
    pub spec: GridSpec,
    pub domain_coverage: f64,
    pub per_leadtime_coverage: Vec<f64>,
    pub per_variable_coverage: Vec<f64>,
    /// Mean over finite widths; `None` if every width is infinite.
    pub mean_width: Option<f64>,
    pub per_leadtime_mean_width: Vec<Option<f64>>,
    pub per_variable_mean_width: Vec<Option<f64>>,
    /// Count of (cell, test sample) pairs with an infinite interval.
    pub n_infinite: u64,
    pub table: Vec<CoverageRow>,
    pub per_cell_coverage: Vec<f64>,
}

pub const CSV_HEADER: &str = "lead_hours,variable,coverage,mean_width,n_infinite";

impl CoverageReport {
    /// CSV export: one row per (lead, variable), then per lead, per
    /// variable, and the domain total. Aggregated labels read `all`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.table {
            let lead = row
                .lead_hours
                .map_or_else(|| "all".to_string(), |h| h.to_string());
            let var = row.variable.as_deref().unwrap_or("all");
            let width = row.mean_width.map_or_else(String::new, |w| w.to_string());
            out.push_str(&format!(
                "{lead},{var},{},{width},{}\n",
                row.coverage, row.n_infinite
            ));
        }
        out
    }
}

/// Per-cell width totals.
#[derive(Debug, Clone)]
struct WidthCells {
    sum: Vec<f64>,
    comp: Vec<f64>,
    finite: Vec<u64>,
    infinite: Vec<u64>,
}

impl WidthCells {
    fn new(cells: usize) -> Self {
        WidthCells {
            sum: vec![0.0; cells],
            comp: vec![0.0; cells],
            finite: vec![0; cells],
            infinite: vec![0; cells],
        }
    }

    /// Compensated total at each cell.
    fn totals(&self) -> Vec<f64> {
        self.sum.iter().zip(&self.comp).map(|(s, c)| s + c).collect()
    }
}

/// Neumaier update of one running sum.
#[inline]
fn neumaier(sum: &mut f64, comp: &mut f64, x: f64) {
    let t = *sum + x;
    if sum.abs() >= x.abs() {
        *comp += (*sum - t) + x;
    } else {
        *comp += (x - t) + *sum;
    }
    *sum = t;
}

/// Folds one interval field into per-cell width totals.
fn add_widths(cells: &mut WidthCells, iv: &IntervalField) {
    let lower = iv.lower();
    let upper = iv.upper();
    let WidthCells {
        sum,
        comp,
        finite,
        infinite,
    } = cells;
    sum.par_chunks_mut(CELL_CHUNK)
        .zip(comp.par_chunks_mut(CELL_CHUNK))
        .zip(finite.par_chunks_mut(CELL_CHUNK))
        .zip(infinite.par_chunks_mut(CELL_CHUNK))
        .enumerate()
        .for_each(|(chunk, (((s, c), f), inf))| {
            let base = chunk * CELL_CHUNK;
            for j in 0..s.len() {
                let w = upper[base + j] - lower[base + j];
                if w.is_finite() {
                    neumaier(&mut s[j], &mut c[j], w);
                    f[j] += 1;
                } else {
                    inf[j] += 1;
                }
            }
        });
}

/// Index sets used for the aggregate breakdowns.
fn group_cells(spec: &GridSpec, lead: Option<usize>, var: Option<usize>) -> Vec<usize> {
    (0..spec.len())
        .filter(|&c| {
            let (t, _, _, v) = spec.coords(c);
            lead.is_none_or(|l| l == t) && var.is_none_or(|w| w == v)
        })
        .collect()
}

fn mean_over(values: &[f64], idx: &[usize]) -> f64 {
    let picked: Vec<f64> = idx.iter().map(|&c| values[c]).collect();
    pairwise_sum(&picked) / picked.len() as f64
}

fn width_over(totals: &[f64], cells: &WidthCells, idx: &[usize]) -> (Option<f64>, u64) {
    let picked: Vec<f64> = idx.iter().map(|&c| totals[c]).collect();
    let count: u64 = idx.iter().map(|&c| cells.finite[c]).sum();
    let inf: u64 = idx.iter().map(|&c| cells.infinite[c]).sum();
    let mean = (count > 0).then(|| pairwise_sum(&picked) / count as f64);
    (mean, inf)
}

/// Streaming coverage evaluation at a single `α`.
#[derive(Debug, Clone)]
pub struct CoverageAccumulator {
    spec: GridSpec,
    alpha: f64,
    m: usize,
    covered: Vec<u64>,
    widths: WidthCells,
}

impl CoverageAccumulator {
    pub fn new(spec: GridSpec, alpha: f64) -> Result<Self> {
        spec.validate()?;
        validate_alpha(alpha)?;
        let cells = spec.len();
        Ok(CoverageAccumulator {
            spec,
            alpha,
            m: 0,
            covered: vec![0; cells],
            widths: WidthCells::new(cells),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn push(&mut self, iv: &IntervalField, truth: &FieldTensor) -> Result<()> {
        self.spec.ensure_same(iv.spec(), "intervals")?;
        self.spec.ensure_same(truth.spec(), "truth")?;
        if iv.alpha().to_bits() != self.alpha.to_bits() {
            return Err(Error::MixedAlpha(self.alpha, iv.alpha()));
        }
        let (lower, upper, y) = (iv.lower(), iv.upper(), truth.data());
        self.covered
            .par_chunks_mut(CELL_CHUNK)
            .enumerate()
            .for_each(|(chunk, counts)| {
                let base = chunk * CELL_CHUNK;
                for (j, count) in counts.iter_mut().enumerate() {
                    let c = base + j;
                    if lower[c] <= y[c] && y[c] <= upper[c] {
                        *count += 1;
                    }
                }
            });
        add_widths(&mut self.widths, iv);
        self.m += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<CoverageReport> {
        if self.m == 0 {
            return Err(Error::Empty("coverage needs at least one test sample"));
        }
        let spec = &self.spec;
        let m = self.m as f64;
        let per_cell: Vec<f64> = self.covered.iter().map(|&k| k as f64 / m).collect();
        let totals = self.widths.totals();

        let all = group_cells(spec, None, None);
        let leads: Vec<Vec<usize>> = (0..spec.t_out)
            .map(|t| group_cells(spec, Some(t), None))
            .collect();
        let vars: Vec<Vec<usize>> = (0..spec.nvar)
            .map(|v| group_cells(spec, None, Some(v)))
            .collect();

        let mut table = Vec::new();
        let mut row = |lead: Option<usize>, var: Option<usize>, idx: &[usize]| {
            let (mean_width, n_infinite) = width_over(&totals, &self.widths, idx);
            table.push(CoverageRow {
                lead_hours: lead.map(|t| spec.lead_hours[t]),
                variable: var.map(|v| spec.variable_names[v].clone()),
                coverage: mean_over(&per_cell, idx),
                mean_width,
                n_infinite,
            });
        };
        for t in 0..spec.t_out {
            for v in 0..spec.nvar {
                row(Some(t), Some(v), &group_cells(spec, Some(t), Some(v)));
            }
        }
        for (t, idx) in leads.iter().enumerate() {
            row(Some(t), None, idx);
        }
        for (v, idx) in vars.iter().enumerate() {
            row(None, Some(v), idx);
        }
        row(None, None, &all);

        let (mean_width, n_infinite) = width_over(&totals, &self.widths, &all);
        Ok(CoverageReport {
            alpha: self.alpha,
            nominal_coverage: 1.0 - self.alpha,
            n_test: self.m,
            spec: spec.clone(),
            domain_coverage: mean_over(&per_cell, &all),
            per_leadtime_coverage: leads.iter().map(|i| mean_over(&per_cell, i)).collect(),
            per_variable_coverage: vars.iter().map(|i| mean_over(&per_cell, i)).collect(),
            mean_width,
            per_leadtime_mean_width: leads
                .iter()
                .map(|i| width_over(&totals, &self.widths, i).0)
                .collect(),
            per_variable_mean_width: vars
                .iter()
                .map(|i| width_over(&totals, &self.widths, i).0)
                .collect(),
            n_infinite,
            table,
            per_cell_coverage: per_cell,
        })
    }
}

/// Coverage of `m` interval fields against their truths.
pub fn empirical_coverage(ivs: &[IntervalField], truths: &[FieldTensor]) -> Result<CoverageReport> {
    let first = ivs
        .first()
        .ok_or(Error::Empty("no interval fields to evaluate"))?;
    if ivs.len() != truths.len() {
        return Err(Error::InvalidConfig(format!(
            "{} interval fields for {} truths",
            ivs.len(),
            truths.len()
        )));
    }
    let mut acc = CoverageAccumulator::new(first.spec().clone(), first.alpha())?;
    for (iv, y) in ivs.iter().zip(truths) {
        acc.push(iv, y)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthSummary {
    pub mean: Option<f64>,
    pub per_leadtime: Vec<Option<f64>>,
    pub n_infinite: u64,
}

/// Mean finite width over all cells and fields, with a per-lead breakdown.
pub fn mean_width(ivs: &[IntervalField]) -> Result<WidthSummary> {
    let first = ivs
        .first()
        .ok_or(Error::Empty("no interval fields to measure"))?;
    let spec = first.spec();
    let mut cells = WidthCells::new(spec.len());
    for iv in ivs {
        spec.ensure_same(iv.spec(), "interval fields")?;
        add_widths(&mut cells, iv);
    }
    let totals = cells.totals();
    let (mean, n_infinite) = width_over(&totals, &cells, &group_cells(spec, None, None));
    let per_leadtime = (0..spec.t_out)
        .map(|t| width_over(&totals, &cells, &group_cells(spec, Some(t), None)).0)
        .collect();
    Ok(WidthSummary {
        mean,
        per_leadtime,
        n_infinite,
    })
}

/// One point of a coverage curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub nominal: f64,
    pub empirical: f64,
}

/// `(1−α, domain coverage)` pairs, sorted by nominal coverage.
pub fn curve_from_reports(reports: &[CoverageReport]) -> Vec<CurvePoint> {
    let mut pts: Vec<CurvePoint> = reports
        .iter()
        .map(|r| CurvePoint {
            nominal: 1.0 - r.alpha,
            empirical: r.domain_coverage,
        })
        .collect();
    pts.sort_by(|a, b| a.nominal.total_cmp(&b.nominal));
    pts
}

/// Evaluates a calibrated sweep against a stream of test forecasts in one pass.
#[derive(Debug)]
pub struct SweepAccumulator {
    quantiles: Vec<QuantileField>,
    accs: Vec<CoverageAccumulator>,
}

impl SweepAccumulator {
    pub fn new(sweep: Vec<QuantileField>) -> Result<Self> {
        if sweep.is_empty() || sweep.windows(2).any(|w| w[0].alpha() >= w[1].alpha()) {
            return Err(Error::InvalidAlphaGrid);
        }
        let accs = sweep
            .iter()
            .map(|q| CoverageAccumulator::new(q.spec().clone(), q.alpha()))
            .collect::<Result<_>>()?;
        Ok(SweepAccumulator {
            quantiles: sweep,
            accs,
        })
    }

    pub fn push(&mut self, forecast: &Forecast, truth: &FieldTensor) -> Result<()> {
        for (q, acc) in self.quantiles.iter().zip(self.accs.iter_mut()) {
            acc.push(&intervals_for(forecast, q)?, truth)?;
        }
        Ok(())
    }

    /// One report per `α`, in grid order.
    pub fn finish(self) -> Result<Vec<CoverageReport>> {
        self.accs.into_iter().map(CoverageAccumulator::finish).collect()
    }
}

/// Coverage curve of a calibrated sweep over test `(forecast, truth)` pairs.
pub fn coverage_curve<'a, I>(sweep: &[QuantileField], test: I) -> Result<Vec<CurvePoint>>
where
    I: IntoIterator<Item = (&'a Forecast, &'a FieldTensor)>,
{
    let mut acc = SweepAccumulator::new(sweep.to_vec())?;
    for (f, y) in test {
        acc.push(f, y)?;
    }
    Ok(curve_from_reports(&acc.finish()?))
}
