//! Error functionals, replica aggregation and tail/rate estimators.
//!
//! Per recorded step the following are computed from a state:
//!
//! | column | definition |
//! |---|---|
//! | `opt_err` | `‖x̄ − x*‖²` |
//! | `consensus_err` | `‖X − 1x̄ᵀ‖²_F` |
//! | `tracking_err` | `‖Y − 1ȳᵀ‖²_F` |
//! | `per_agent_mean_err` | `(1/n)‖X − 1x*ᵀ‖²_F` |
//!
//! The last one equals `opt_err + consensus_err / n` exactly, since the
//! deviation from the mean is orthogonal to `1(x̄ − x*)ᵀ`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AlgorithmKind, AlgorithmState, Halt};
use crate::linalg::{row_dispersion, row_mean};
use crate::oracle::Problem;

/// Column order of per-run CSV files.
pub const RUN_COLUMNS: [&str; 7] =
    ["k", "opt_err", "consensus_err", "tracking_err", "per_agent_mean_err", "grad_evals", "messages"];

/// Metrics aggregated across replicas, in ensemble column order.
pub const ENSEMBLE_METRICS: [&str; 8] = [
    "opt_err",
    "consensus_err",
    "tracking_err",
    "per_agent_mean_err",
    "grad_evals",
    "messages",
    "bound_messages",
    "payload_vectors",
];

/// Default fraction of a run treated as its tail.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.2;

/// Number of contiguous blocks the tail is split into.
pub const TAIL_BLOCKS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no runs to aggregate")]
    Empty,
    #[error("every replica halted ({0} runs)")]
    AllHalted(usize),
    #[error("runs have different step grids")]
    GridMismatch,
    #[error("tail window holds {have} points, need at least {need}")]
    ShortSeries { have: usize, need: usize },
    #[error("window fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("rate fit needs positive values (found {value} at index {index})")]
    NonPositive { index: usize, value: f64 },
    #[error("rate fit needs at least two points with distinct k")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: u64,
    pub opt_err: f64,
    pub consensus_err: f64,
    pub tracking_err: f64,
    pub per_agent_mean_err: f64,
    pub grad_evals: u64,
    pub messages: u64,
    /// Messages under the two-per-iteration gossip accounting.
    pub bound_messages: u64,
    /// Vectors of length `p` sent so far.
    pub payload_vectors: u64,
}

impl MetricRow {
    /// Value of the ensemble column `name`.
    pub fn get(&self, name: &str) -> f64 {
        match name {
            "opt_err" => self.opt_err,
            "consensus_err" => self.consensus_err,
            "tracking_err" => self.tracking_err,
            "per_agent_mean_err" => self.per_agent_mean_err,
            "grad_evals" => self.grad_evals as f64,
            "messages" => self.messages as f64,
            "bound_messages" => self.bound_messages as f64,
            "payload_vectors" => self.payload_vectors as f64,
            _ => panic!("unknown metric `{name}`"),
        }
    }

    /// `‖X − 1x*ᵀ‖²_F`, the quantity watched for divergence.
    pub fn total_err(&self, n: usize) -> f64 {
        self.per_agent_mean_err * n as f64
    }
}

/// Compute every error functional of `state` against `pr.optimum()`.
pub fn record(state: &AlgorithmState, pr: &Problem) -> MetricRow {
    let xs = pr.optimum();
    let x = &state.x;
    let n = x.nrows();
    let xbar = row_mean(x);
    let ybar = row_mean(&state.y);
    MetricRow {
        k: state.k,
        opt_err: (&xbar - xs).norm_squared(),
        consensus_err: row_dispersion(x, &xbar),
        tracking_err: row_dispersion(&state.y, &ybar),
        per_agent_mean_err: row_dispersion(x, xs) / n as f64,
        grad_evals: state.grad_evals,
        messages: state.messages,
        bound_messages: state.bound_messages,
        payload_vectors: state.payload_vectors,
    }
}

/// Recorded trajectory of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub algorithm: AlgorithmKind,
    pub seed: u64,
    pub replica: u32,
    pub n: usize,
    pub rows: Vec<MetricRow>,
    /// Largest relative gap between `ȳ` and the mean cached gradient seen
    /// over the run, when tracking checks were on.
    pub max_tracking_deviation: Option<f64>,
    pub halted: Option<Halt>,
}

impl TrajectoryMetrics {
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.rows.iter().map(|r| r.get(name)).collect()
    }

    pub fn ks(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.k).collect()
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }
}

/// Running mean and sum of squared deviations; mergeable.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
    }

    pub fn merge(&mut self, other: &Accumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / total as f64;
        self.m2 += other.m2 + d * d * (self.count as f64 * other.count as f64) / total as f64;
        self.count = total;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance; `None` below two observations.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| (self.m2 / (self.count - 1) as f64).max(0.0))
    }

    /// Standard error of the mean; `None` below two observations.
    pub fn standard_error(&self) -> Option<f64> {
        self.variance().map(|v| (v / self.count as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub mean: Vec<f64>,
    /// Absent for a single replica.
    pub se: Vec<Option<f64>>,
}

/// Pointwise mean and standard error across the non-halted replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub algorithm: AlgorithmKind,
    pub ks: Vec<u64>,
    pub replicas: usize,
    pub halted: usize,
    pub columns: Vec<ColumnSummary>,
}

impl EnsembleSummary {
    pub fn column(&self, name: &str) -> &ColumnSummary {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .unwrap_or_else(|| panic!("unknown ensemble column `{name}`"))
    }

    pub fn mean(&self, name: &str) -> &[f64] {
        &self.column(name).mean
    }
}

/// Streaming aggregation of trajectories sharing one step grid.
#[derive(Debug, Clone)]
pub struct EnsembleBuilder {
    algorithm: Option<AlgorithmKind>,
    ks: Option<Vec<u64>>,
    acc: Vec<[Accumulator; ENSEMBLE_METRICS.len()]>,
    replicas: usize,
    halted: usize,
}

impl Default for EnsembleBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl EnsembleBuilder {
    pub fn new() -> Self {
        Self { algorithm: None, ks: None, acc: Vec::new(), replicas: 0, halted: 0 }
    }

    pub fn push(&mut self, run: &TrajectoryMetrics) -> Result<(), MetricsError> {
        self.algorithm.get_or_insert(run.algorithm);
        if run.halted.is_some() {
            self.halted += 1;
            return Ok(());
        }
        let ks = run.ks();
        match &self.ks {
            None => {
                self.acc = vec![[Accumulator::default(); ENSEMBLE_METRICS.len()]; ks.len()];
                self.ks = Some(ks);
            }
            Some(existing) if *existing != ks => return Err(MetricsError::GridMismatch),
            Some(_) => {}
        }
        for (slot, row) in self.acc.iter_mut().zip(&run.rows) {
            for (a, name) in slot.iter_mut().zip(ENSEMBLE_METRICS) {
                a.push(row.get(name));
            }
        }
        self.replicas += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: EnsembleBuilder) -> Result<(), MetricsError> {
        self.halted += other.halted;
        if self.algorithm.is_none() {
            self.algorithm = other.algorithm;
        }
        let Some(oks) = other.ks else { return Ok(()) };
        match &self.ks {
            None => {
                self.ks = Some(oks);
                self.acc = other.acc;
            }
            Some(ks) if *ks != oks => return Err(MetricsError::GridMismatch),
            Some(_) => {
                for (mine, theirs) in self.acc.iter_mut().zip(&other.acc) {
                    for (a, b) in mine.iter_mut().zip(theirs) {
                        a.merge(b);
                    }
                }
            }
        }
        self.replicas += other.replicas;
        Ok(())
    }

    pub fn finish(self) -> Result<EnsembleSummary, MetricsError> {
        let algorithm = self.algorithm.ok_or(MetricsError::Empty)?;
        let Some(ks) = self.ks else { return Err(MetricsError::AllHalted(self.halted)) };
        let columns = ENSEMBLE_METRICS
            .iter()
            .enumerate()
            .map(|(c, name)| ColumnSummary {
                name: name.to_string(),
                mean: self.acc.iter().map(|slot| slot[c].mean()).collect(),
                se: self.acc.iter().map(|slot| slot[c].standard_error()).collect(),
            })
            .collect();
        Ok(EnsembleSummary { algorithm, ks, replicas: self.replicas, halted: self.halted, columns })
    }
}

/// Aggregate runs; halted replicas are excluded and counted.
pub fn aggregate(runs: &[TrajectoryMetrics]) -> Result<EnsembleSummary, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut b = EnsembleBuilder::new();
    for r in runs {
        b.push(r)?;
    }
    b.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    /// Largest of the block means.
    pub estimate: f64,
    pub block_means: Vec<f64>,
    /// Sample standard deviation of the block means.
    pub block_sd: f64,
    pub window_len: usize,
}

/// Finite-run stand-in for `limsup`: the final `window_fraction` of the
/// series is cut into [`TAIL_BLOCKS`] contiguous blocks and the largest block
/// mean is returned.
pub fn tail_limsup(series: &[f64], window_fraction: f64) -> Result<TailEstimate, MetricsError> {
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(MetricsError::Fraction(window_fraction));
    }
    let len = ((series.len() as f64 * window_fraction).ceil() as usize).min(series.len());
    if len < TAIL_BLOCKS {
        return Err(MetricsError::ShortSeries { have: len, need: TAIL_BLOCKS });
    }
    let tail = &series[series.len() - len..];
    let block_means: Vec<f64> = (0..TAIL_BLOCKS)
        .map(|b| {
            let (lo, hi) = (b * len / TAIL_BLOCKS, (b + 1) * len / TAIL_BLOCKS);
            tail[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let mut acc = Accumulator::default();
    block_means.iter().for_each(|&m| acc.push(m));
    let estimate = block_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(TailEstimate { estimate, block_sd: acc.variance().unwrap_or(0.0).sqrt(), block_means, window_len: len })
}

/// Mean of the final `window_fraction` of a series.
pub fn tail_mean(series: &[f64], window_fraction: f64) -> Result<f64, MetricsError> {
    let t = tail_limsup(series, window_fraction)?;
    Ok(series[series.len() - t.window_len..].iter().sum::<f64>() / t.window_len as f64)
}

/// Tail estimate for an ensemble: `tail_limsup` of the mean curve, with the
/// standard error taken across per-replica tail means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTail {
    pub estimate: f64,
    pub se: Option<f64>,
    pub replicas: usize,
}

pub fn ensemble_tail(
    runs: &[TrajectoryMetrics],
    metric: &str,
    window_fraction: f64,
) -> Result<EnsembleTail, MetricsError> {
    let summary = aggregate(runs)?;
    let est = tail_limsup(summary.mean(metric), window_fraction)?;
    let mut acc = Accumulator::default();
    for r in runs.iter().filter(|r| r.halted.is_none()) {
        acc.push(tail_mean(&r.series(metric), window_fraction)?);
    }
    Ok(EnsembleTail { estimate: est.estimate, se: acc.standard_error(), replicas: summary.replicas })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `exp(slope)`: fitted per-step contraction factor.
    pub ratio: f64,
    /// Slope of `ln(value)` against `k`.
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log fit.
    pub residual: f64,
}

/// Least squares of `ln(values)` on `ks`.
pub fn fit_linear_rate(ks: &[f64], values: &[f64]) -> Result<RateFit, MetricsError> {
    assert_eq!(ks.len(), values.len());
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(MetricsError::NonPositive { index, value });
    }
    let m = ks.len() as f64;
    if ks.len() < 2 {
        return Err(MetricsError::Degenerate);
    }
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let kbar = ks.iter().sum::<f64>() / m;
    let lbar = logs.iter().sum::<f64>() / m;
    let sxx: f64 = ks.iter().map(|k| (k - kbar).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::Degenerate);
    }
    let sxy: f64 = ks.iter().zip(&logs).map(|(k, l)| (k - kbar) * (l - lbar)).sum();
    let slope = sxy / sxx;
    let intercept = lbar - slope * kbar;
    let residual = (ks
        .iter()
        .zip(&logs)
        .map(|(k, l)| (l - intercept - slope * k).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    Ok(RateFit { ratio: slope.exp(), slope, intercept, residual })
}

/// Seventeen significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Per-run CSV. `header` lines are emitted as `# ` comments first.
pub fn write_run_csv<W: Write>(mut w: W, run: &TrajectoryMetrics, header: &[String]) -> io::Result<()> {
    for h in header {
        writeln!(w, "# {h}")?;
    }
    writeln!(w, "{}", RUN_COLUMNS.join(","))?;
    for r in &run.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.k,
            fmt_float(r.opt_err),
            fmt_float(r.consensus_err),
            fmt_float(r.tracking_err),
            fmt_float(r.per_agent_mean_err),
            r.grad_evals,
            r.messages
        )?;
    }
    Ok(())
}

/// Ensemble CSV: `k` then `<metric>_mean,<metric>_se` pairs; the SE field is
/// left empty when it is undefined.
pub fn write_ensemble_csv<W: Write>(mut w: W, s: &EnsembleSummary, header: &[String]) -> io::Result<()> {
    for h in header {
        writeln!(w, "# {h}")?;
    }
    let mut cols = vec!["k".to_string()];
    for c in &s.columns {
        cols.push(format!("{}_mean", c.name));
        cols.push(format!("{}_se", c.name));
    }
    writeln!(w, "{}", cols.join(","))?;
    for (t, k) in s.ks.iter().enumerate() {
        let mut line = k.to_string();
        for c in &s.columns {
            line.push(',');
            line.push_str(&fmt_float(c.mean[t]));
            line.push(',');
            if let Some(se) = c.se[t] {
                line.push_str(&fmt_float(se));
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn run_with(values: &[f64]) -> TrajectoryMetrics {
        TrajectoryMetrics {
            algorithm: AlgorithmKind::Dsgt,
            seed: 0,
            replica: 0,
            n: 1,
            rows: values
                .iter()
                .enumerate()
                .map(|(k, &v)| MetricRow {
                    k: k as u64,
                    opt_err: v,
                    consensus_err: 2.0 * v,
                    tracking_err: 0.0,
                    per_agent_mean_err: v,
                    grad_evals: k as u64,
                    messages: 0,
                    bound_messages: 0,
                    payload_vectors: 0,
                })
                .collect(),
            max_tracking_deviation: None,
            halted: None,
        }
    }

    #[test]
    fn single_run_has_no_se() {
        let s = aggregate(&[run_with(&[1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(s.mean("opt_err"), &[1.0, 2.0, 3.0]);
        assert!(s.column("opt_err").se.iter().all(Option::is_none));
    }

    #[test]
    fn identical_runs_zero_se() {
        let r = run_with(&[1.5, 0.25]);
        let s = aggregate(&[r.clone(), r.clone(), r]).unwrap();
        assert!(s.column("consensus_err").se.iter().all(|e| *e == Some(0.0)));
    }

    #[test]
    fn halted_runs_excluded() {
        let mut bad = run_with(&[f64::NAN, f64::NAN]);
        bad.halted = Some(Halt { k: 1, reason: crate::engine::HaltReason::NonFinite });
        let s = aggregate(&[run_with(&[1.0, 1.0]), bad.clone()]).unwrap();
        assert_eq!((s.replicas, s.halted), (1, 1));
        assert_eq!(aggregate(&[bad]).unwrap_err(), MetricsError::AllHalted(1));
        assert_eq!(aggregate(&[]).unwrap_err(), MetricsError::Empty);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let err = aggregate(&[run_with(&[1.0]), run_with(&[1.0, 2.0])]).unwrap_err();
        assert_eq!(err, MetricsError::GridMismatch);
    }

    #[test]
    fn tail_of_constant() {
        let t = tail_limsup(&[4.0; 100], DEFAULT_TAIL_FRACTION).unwrap();
        assert_eq!(t.estimate, 4.0);
        assert_eq!(t.window_len, 20);
        assert_eq!(t.block_sd, 0.0);
    }

    #[test]
    fn tail_of_decay_bounded_by_global_max() {
        let s: Vec<f64> = (0..200).map(|k| 0.97f64.powi(k)).collect();
        let t = tail_limsup(&s, 0.2).unwrap();
        assert!(t.estimate <= 1.0);
        let last_window: Vec<f64> = s[160..].to_vec();
        assert!(t.estimate <= last_window[0]);
        assert!(t.estimate >= *last_window.last().unwrap());
    }

    #[test]
    fn tail_errors() {
        assert!(matches!(tail_limsup(&[1.0; 10], 0.2), Err(MetricsError::ShortSeries { .. })));
        assert!(matches!(tail_limsup(&[1.0; 10], 0.0), Err(MetricsError::Fraction(_))));
    }

    #[test]
    fn geometric_rate_recovered() {
        let ks: Vec<f64> = (0..50).map(f64::from).collect();
        let vals: Vec<f64> = ks.iter().map(|k| 3.0 * 0.9f64.powf(*k)).collect();
        let fit = fit_linear_rate(&ks, &vals).unwrap();
        assert_relative_eq!(fit.ratio, 0.9, epsilon = 1e-12);
        let flat = fit_linear_rate(&ks, &vec![2.0; 50]).unwrap();
        assert_relative_eq!(flat.ratio, 1.0, epsilon = 1e-15);
        assert!(matches!(fit_linear_rate(&[0.0, 1.0], &[1.0, 0.0]), Err(MetricsError::NonPositive { .. })));
    }

    #[test]
    fn accumulator_merge() {
        let data: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 * 0.13).collect();
        let mut whole = Accumulator::default();
        data.iter().for_each(|&v| whole.push(v));
        let (mut a, mut b) = (Accumulator::default(), Accumulator::default());
        data[..11].iter().for_each(|&v| a.push(v));
        data[11..].iter().for_each(|&v| b.push(v));
        a.merge(&b);
        assert_eq!(a.count(), whole.count());
        assert_relative_eq!(a.mean(), whole.mean(), epsilon = 1e-12);
        assert_relative_eq!(a.variance().unwrap(), whole.variance().unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_run_csv(&mut buf, &run_with(&[0.5]), &["seed=7".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed=7");
        assert_eq!(lines[1], RUN_COLUMNS.join(","));
        assert_eq!(lines[2], "0,5.0000000000000000e-1,1.0000000000000000e0,0.0000000000000000e0,5.0000000000000000e-1,0,0");
        let mut buf = Vec::new();
        write_ensemble_csv(&mut buf, &aggregate(&[run_with(&[0.5])]).unwrap(), &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().starts_with("k,opt_err_mean,opt_err_se,"));
        assert!(text.lines().nth(1).unwrap().contains("e-1,,"));
    }
}
