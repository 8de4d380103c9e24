//! DSGT, GSGT, DSG and CSG as seeded state machines.
//!
//! All four algorithms share [`AlgorithmState`]. Rows of `x`, `y` and
//! `g_last` belong to agents; CSG keeps a single row in `x` and `y` (the
//! iterate and the averaged gradient) and `n` rows in `g_last`.
//!
//! `g_last` always holds the sample drawn at the *current* iterate, so the
//! tracker update subtracts exactly the draw it previously added. DSG and CSG
//! also use it as the gradient for their next step, which makes every
//! algorithm spend `n` evaluations at initialization.
//!
//! Randomness: agent `i` draws from stream `(seed, replica, i + 1)`; gossip
//! wake-ups come from stream `(seed, replica, 0)` and use two words per
//! iteration (waking agent, then partner).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::row_mean;
use crate::metrics::{record, MetricRow, TrajectoryMetrics};
use crate::network::{MixingKind, MixingMatrix};
use crate::oracle::Problem;
use crate::rng::{AgentStreams, Stream, StreamKey};

/// A run halts once `‖X − 1x*ᵀ‖²` exceeds this multiple of `max(e₀, 1)`.
pub const DIVERGENCE_FACTOR: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmKind {
    Dsgt,
    Gsgt,
    Dsg,
    Csg,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 4] = [Self::Dsgt, Self::Gsgt, Self::Dsg, Self::Csg];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dsgt => "dsgt",
            Self::Gsgt => "gsgt",
            Self::Dsg => "dsg",
            Self::Csg => "csg",
        }
    }

    /// The mixing matrix kind the algorithm consumes, if any.
    pub fn mixing_kind(self) -> Option<MixingKind> {
        match self {
            Self::Dsgt | Self::Dsg => Some(MixingKind::Consensus),
            Self::Gsgt => Some(MixingKind::Gossip),
            Self::Csg => None,
        }
    }

    pub fn tracks_gradients(self) -> bool {
        matches!(self, Self::Dsgt | Self::Gsgt)
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| EngineError::Parse(s.to_string()))
    }
}

/// `const:α` or `dim:theta=θ,m=m` (`α_k = θ/(m + k)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepsizePolicy {
    Constant(f64),
    Diminishing { theta: f64, m: f64 },
}

impl StepsizePolicy {
    pub fn at(&self, k: u64) -> f64 {
        match *self {
            Self::Constant(a) => a,
            Self::Diminishing { theta, m } => theta / (m + k as f64),
        }
    }

    /// Rejects nonpositive or non-finite parameters and `m < 1`.
    /// A zero constant stepsize is allowed as a diagnostic.
    pub fn validate(&self) -> Result<(), EngineError> {
        let ok = match *self {
            Self::Constant(a) => a >= 0.0 && a.is_finite(),
            Self::Diminishing { theta, m } => theta > 0.0 && theta.is_finite() && m >= 1.0 && m.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(EngineError::Stepsize(self.to_string()))
        }
    }

    /// Directory-safe label.
    pub fn label(&self) -> String {
        match *self {
            Self::Constant(a) => format!("const_{a}"),
            Self::Diminishing { theta, m } => format!("dim_theta{theta}_m{m}"),
        }
    }
}

impl fmt::Display for StepsizePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(a) => write!(f, "const:{a}"),
            Self::Diminishing { theta, m } => write!(f, "dim:theta={theta},m={m}"),
        }
    }
}

impl FromStr for StepsizePolicy {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EngineError::Parse(s.to_string());
        let s = s.trim();
        let (head, rest) = s.split_once(':').ok_or_else(bad)?;
        let policy = match head {
            "const" => Self::Constant(rest.trim().parse().map_err(|_| bad())?),
            "dim" => {
                let (mut theta, mut m) = (None, None);
                for part in rest.split(',') {
                    let (k, v) = part.split_once('=').ok_or_else(bad)?;
                    let v: f64 = v.trim().parse().map_err(|_| bad())?;
                    let slot = match k.trim() {
                        "theta" => &mut theta,
                        "m" => &mut m,
                        _ => return Err(bad()),
                    };
                    if slot.replace(v).is_some() {
                        return Err(bad());
                    }
                }
                Self::Diminishing { theta: theta.ok_or_else(bad)?, m: m.ok_or_else(bad)? }
            }
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HaltReason {
    NonFinite,
    /// Total error `error` exceeded [`DIVERGENCE_FACTOR`] times `reference`.
    Blowup { error: f64, reference: f64 },
}

/// Divergence signal carrying the first iteration at which it was detected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Halt {
    pub k: u64,
    pub reason: HaltReason,
}

impl fmt::Display for Halt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reason {
            HaltReason::NonFinite => write!(f, "non-finite iterate at k={}", self.k),
            HaltReason::Blowup { error, reference } => {
                write!(f, "error {error:e} exceeds {DIVERGENCE_FACTOR:e} x {reference:e} at k={}", self.k)
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{alg} needs a {expected} matrix, got {got:?}")]
    WrongMixing { alg: AlgorithmKind, expected: MixingKind, got: Option<MixingKind> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid stepsize policy `{0}`")]
    Stepsize(String),
    #[error("cannot parse `{0}`")]
    Parse(String),
    #[error("{0}")]
    Halted(Halt),
}

/// Outcome of one gossip wake-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GossipEvent {
    pub waking: usize,
    /// Equal to `waking` for a self-update.
    pub partner: usize,
}

impl GossipEvent {
    pub fn is_exchange(&self) -> bool {
        self.waking != self.partner
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmState {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub g_last: DMatrix<f64>,
    pub k: u64,
    pub grad_evals: u64,
    /// Messages actually exchanged.
    pub messages: u64,
    /// Messages under the accounting used in the cost comparison (for GSGT,
    /// two per iteration whether or not an exchange took place).
    pub bound_messages: u64,
    /// `p`-vectors transmitted (DSGT and GSGT send `x` and `y` together).
    pub payload_vectors: u64,
}

impl AlgorithmState {
    pub fn n(&self) -> usize {
        self.g_last.nrows()
    }

    pub fn mean_x(&self) -> nalgebra::DVector<f64> {
        row_mean(&self.x)
    }

    pub fn mean_y(&self) -> nalgebra::DVector<f64> {
        row_mean(&self.y)
    }

    pub fn mean_g(&self) -> nalgebra::DVector<f64> {
        row_mean(&self.g_last)
    }

    /// `max_c |ȳ_c − ḡ_c| / (1 + max_c max(|ȳ_c|, |ḡ_c|))`.
    pub fn tracking_deviation(&self) -> f64 {
        let (yb, gb) = (self.mean_y(), self.mean_g());
        let scale = yb.iter().chain(gb.iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
        let gap = yb.iter().zip(gb.iter()).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        gap / (1.0 + scale)
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

fn copy_row(m: &DMatrix<f64>, i: usize, buf: &mut [f64]) {
    for (c, b) in buf.iter_mut().enumerate() {
        *b = m[(i, c)];
    }
}

fn sample_at(pr: &Problem, i: usize, x: &DMatrix<f64>, row: usize, stream: &mut Stream, out: &mut [f64]) {
    let mut point = vec![0.0; x.ncols()];
    copy_row(x, row, &mut point);
    pr.sample_gradient_into(i, &point, stream, out);
}

/// `X = x0`, one sample per agent, `Y = G_last` = those samples.
pub fn init_state(pr: &Problem, x0: DMatrix<f64>, streams: &mut AgentStreams) -> Result<AlgorithmState, EngineError> {
    let (n, p) = (pr.n(), pr.p());
    if x0.shape() != (n, p) || streams.len() != n {
        return Err(EngineError::Shape(format!("x0 is {:?}, problem is {n}x{p}", x0.shape())));
    }
    let mut g = DMatrix::zeros(n, p);
    let mut buf = vec![0.0; p];
    for i in 0..n {
        sample_at(pr, i, &x0, i, streams.get_mut(i), &mut buf);
        for c in 0..p {
            g[(i, c)] = buf[c];
        }
    }
    Ok(AlgorithmState {
        x: x0,
        y: g.clone(),
        g_last: g,
        k: 0,
        grad_evals: n as u64,
        messages: 0,
        bound_messages: 0,
        payload_vectors: 0,
    })
}

/// CSG state: single-row `x`, `g_last` sampled by every agent at `x0`, `y`
/// their average.
pub fn init_csg_state(pr: &Problem, x0: &[f64], streams: &mut AgentStreams) -> Result<AlgorithmState, EngineError> {
    let (n, p) = (pr.n(), pr.p());
    if x0.len() != p || streams.len() != n {
        return Err(EngineError::Shape(format!("x0 has {} entries, p = {p}", x0.len())));
    }
    let mut g = DMatrix::zeros(n, p);
    let mut buf = vec![0.0; p];
    for i in 0..n {
        pr.sample_gradient_into(i, x0, streams.get_mut(i), &mut buf);
        for c in 0..p {
            g[(i, c)] = buf[c];
        }
    }
    let y = DMatrix::from_row_slice(1, p, row_mean(&g).as_slice());
    Ok(AlgorithmState {
        x: DMatrix::from_row_slice(1, p, x0),
        y,
        g_last: g,
        k: 0,
        grad_evals: n as u64,
        messages: 0,
        bound_messages: 0,
        payload_vectors: 0,
    })
}

fn resample_all(s: &mut AlgorithmState, pr: &Problem, streams: &mut AgentStreams, g_new: &mut DMatrix<f64>) {
    let p = pr.p();
    let mut buf = vec![0.0; p];
    let shared = s.x.nrows() == 1;
    for i in 0..pr.n() {
        let row = if shared { 0 } else { i };
        sample_at(pr, i, &s.x, row, streams.get_mut(i), &mut buf);
        for c in 0..p {
            g_new[(i, c)] = buf[c];
        }
    }
    s.grad_evals += pr.n() as u64;
}

fn check_finite(s: &AlgorithmState, k: u64) -> Result<(), Halt> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(Halt { k, reason: HaltReason::NonFinite })
    }
}

/// `x ← W(x − αy)`, `y ← Wy + G(x_new) − G_last`.
pub fn dsgt_step(
    s: &mut AlgorithmState,
    w: &MixingMatrix,
    alpha: f64,
    pr: &Problem,
    streams: &mut AgentStreams,
) -> Result<(), Halt> {
    let edges = w.support_edge_count() as u64;
    dsgt_step_counted(s, w, alpha, pr, streams, edges)
}

fn dsgt_step_counted(
    s: &mut AlgorithmState,
    w: &MixingMatrix,
    alpha: f64,
    pr: &Problem,
    streams: &mut AgentStreams,
    edges: u64,
) -> Result<(), Halt> {
    let shifted = &s.x - &s.y * alpha;
    s.x = w.apply(&shifted);
    let mut g_new = DMatrix::zeros(pr.n(), pr.p());
    resample_all(s, pr, streams, &mut g_new);
    s.y = w.apply(&s.y) + &g_new - &s.g_last;
    s.g_last = g_new;
    s.k += 1;
    s.messages += 2 * edges;
    s.bound_messages += 2 * edges;
    s.payload_vectors += 4 * edges;
    check_finite(s, s.k)
}

/// `x ← Wx − α G_last`, then a fresh sample at the new iterate.
pub fn dsg_step(
    s: &mut AlgorithmState,
    w: &MixingMatrix,
    alpha: f64,
    pr: &Problem,
    streams: &mut AgentStreams,
) -> Result<(), Halt> {
    let edges = w.support_edge_count() as u64;
    dsg_step_counted(s, w, alpha, pr, streams, edges)
}

fn dsg_step_counted(
    s: &mut AlgorithmState,
    w: &MixingMatrix,
    alpha: f64,
    pr: &Problem,
    streams: &mut AgentStreams,
    edges: u64,
) -> Result<(), Halt> {
    s.x = w.apply(&s.x) - &s.g_last * alpha;
    let mut g_new = DMatrix::zeros(pr.n(), pr.p());
    resample_all(s, pr, streams, &mut g_new);
    s.y = g_new.clone();
    s.g_last = g_new;
    s.k += 1;
    s.messages += 2 * edges;
    s.bound_messages += 2 * edges;
    s.payload_vectors += 2 * edges;
    check_finite(s, s.k)
}

/// `x ← x − α·mean(G_last)`, then `n` fresh samples at the new point.
pub fn csg_step(s: &mut AlgorithmState, alpha: f64, pr: &Problem, streams: &mut AgentStreams) -> Result<(), Halt> {
    assert_eq!(s.x.nrows(), 1, "CSG state has a single row");
    let mean = row_mean(&s.g_last);
    for c in 0..pr.p() {
        s.x[(0, c)] -= alpha * mean[c];
    }
    let mut g_new = DMatrix::zeros(pr.n(), pr.p());
    resample_all(s, pr, streams, &mut g_new);
    let ybar = row_mean(&g_new);
    for c in 0..pr.p() {
        s.y[(0, c)] = ybar[c];
    }
    s.g_last = g_new;
    s.k += 1;
    check_finite(s, s.k)
}

/// Draw the waking agent and its partner from row `i` of `Π`.
pub fn draw_gossip_event(pi: &MixingMatrix, events: &mut Stream) -> GossipEvent {
    let waking = events.index(pi.n());
    let u = events.uniform();
    let row = pi.row(waking);
    let mut acc = 0.0;
    let mut partner = row.last().map_or(waking, |&(j, _)| j);
    for &(j, prob) in row {
        acc += prob;
        if u < acc {
            partner = j;
            break;
        }
    }
    GossipEvent { waking, partner }
}

/// One gossip round. Only the waking agent and its partner change; every
/// other row of `x`, `y` and `g_last` is left untouched.
pub fn gsgt_step(
    s: &mut AlgorithmState,
    pi: &MixingMatrix,
    alpha: f64,
    pr: &Problem,
    streams: &mut AgentStreams,
    events: &mut Stream,
) -> Result<GossipEvent, Halt> {
    let ev = draw_gossip_event(pi, events);
    gsgt_apply(s, ev, alpha, pr, streams)?;
    Ok(ev)
}

/// Apply a given gossip event.
pub fn gsgt_apply(
    s: &mut AlgorithmState,
    ev: GossipEvent,
    alpha: f64,
    pr: &Problem,
    streams: &mut AgentStreams,
) -> Result<(), Halt> {
    let p = pr.p();
    let (i, j) = (ev.waking, ev.partner);
    let mut g = vec![0.0; p];
    if ev.is_exchange() {
        for c in 0..p {
            let xm = 0.5 * (s.x[(i, c)] + s.x[(j, c)]);
            s.x[(i, c)] = xm - alpha * s.y[(i, c)];
            s.x[(j, c)] = xm - alpha * s.y[(j, c)];
            let ym = 0.5 * (s.y[(i, c)] + s.y[(j, c)]);
            s.y[(i, c)] = ym;
            s.y[(j, c)] = ym;
        }
        for a in [i, j] {
            sample_at(pr, a, &s.x, a, streams.get_mut(a), &mut g);
            for c in 0..p {
                s.y[(a, c)] += g[c] - s.g_last[(a, c)];
                s.g_last[(a, c)] = g[c];
            }
        }
        s.grad_evals += 2;
        s.messages += 2;
        s.payload_vectors += 4;
    } else {
        for c in 0..p {
            s.x[(i, c)] -= 2.0 * alpha * s.y[(i, c)];
        }
        sample_at(pr, i, &s.x, i, streams.get_mut(i), &mut g);
        for c in 0..p {
            s.y[(i, c)] += g[c] - s.g_last[(i, c)];
            s.g_last[(i, c)] = g[c];
        }
        s.grad_evals += 1;
    }
    s.bound_messages += 2;
    s.k += 1;
    let finite = [i, j]
        .iter()
        .all(|&a| (0..p).all(|c| s.x[(a, c)].is_finite() && s.y[(a, c)].is_finite()));
    if finite {
        Ok(())
    } else {
        Err(Halt { k: s.k, reason: HaltReason::NonFinite })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialPoint {
    Zero,
    Optimum,
    /// Every agent starts at the given point.
    Point(Vec<f64>),
}

impl fmt::Display for InitialPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("zero"),
            Self::Optimum => f.write_str("optimum"),
            Self::Point(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "point:{}", parts.join(";"))
            }
        }
    }
}

impl FromStr for InitialPoint {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "zero" => Ok(Self::Zero),
            "optimum" => Ok(Self::Optimum),
            other => {
                let body = other.strip_prefix("point:").ok_or_else(|| EngineError::Parse(s.to_string()))?;
                body.split(';')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| EngineError::Parse(s.to_string())))
                    .collect::<Result<Vec<_>, _>>()
                    .map(Self::Point)
            }
        }
    }
}

impl InitialPoint {
    pub fn resolve(&self, pr: &Problem) -> Result<Vec<f64>, EngineError> {
        match self {
            Self::Zero => Ok(vec![0.0; pr.p()]),
            Self::Optimum => Ok(pr.optimum().as_slice().to_vec()),
            Self::Point(v) if v.len() == pr.p() => Ok(v.clone()),
            Self::Point(v) => Err(EngineError::Shape(format!("initial point has {} entries, p = {}", v.len(), pr.p()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub steps: u64,
    pub seed: u64,
    pub replica: u32,
    /// Record every this many iterations; the final iteration is always kept.
    pub record_every: u64,
    pub x0: InitialPoint,
    /// Evaluate the tracking identity after every step.
    pub check_tracking: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { steps: 1000, seed: 0, replica: 0, record_every: 1, x0: InitialPoint::Zero, check_tracking: false }
    }
}

/// Run one seeded trajectory. `recorder` sees every recorded row as it is
/// produced. Divergence ends the run early with `halted` set; everything up
/// to that point is kept.
pub fn run(
    alg: AlgorithmKind,
    pr: &Problem,
    mixing: Option<&MixingMatrix>,
    policy: &StepsizePolicy,
    opts: &RunOptions,
    recorder: &mut dyn FnMut(&MetricRow),
) -> Result<TrajectoryMetrics, EngineError> {
    policy.validate()?;
    let expected = alg.mixing_kind();
    let w = match (expected, mixing) {
        (None, _) => None,
        (Some(kind), Some(m)) if m.kind() == kind && m.n() == pr.n() => Some(m),
        (Some(kind), m) => {
            return Err(EngineError::WrongMixing { alg, expected: kind, got: m.map(MixingMatrix::kind) })
        }
    };
    let n = pr.n();
    let every = opts.record_every.max(1);
    let mut streams = AgentStreams::new(opts.seed, opts.replica, n);
    let mut events = Stream::new(StreamKey::events(opts.seed, opts.replica));
    let x0 = opts.x0.resolve(pr)?;
    let mut s = match alg {
        AlgorithmKind::Csg => init_csg_state(pr, &x0, &mut streams)?,
        _ => init_state(pr, DMatrix::from_fn(n, pr.p(), |_, c| x0[c]), &mut streams)?,
    };
    let edges = w.map_or(0, |m| m.support_edge_count() as u64);
    let check_tracking = opts.check_tracking && alg.tracks_gradients();
    let mut max_dev = check_tracking.then(|| s.tracking_deviation());

    let mut rows = Vec::with_capacity((opts.steps / every + 2) as usize);
    let first = record(&s, pr);
    let reference = first.total_err(n).max(1.0);
    recorder(&first);
    rows.push(first);
    let mut halted = None;

    for step in 0..opts.steps {
        let alpha = policy.at(step);
        let res = match alg {
            AlgorithmKind::Dsgt => dsgt_step_counted(&mut s, w.unwrap(), alpha, pr, &mut streams, edges),
            AlgorithmKind::Dsg => dsg_step_counted(&mut s, w.unwrap(), alpha, pr, &mut streams, edges),
            AlgorithmKind::Csg => csg_step(&mut s, alpha, pr, &mut streams),
            AlgorithmKind::Gsgt => gsgt_step(&mut s, w.unwrap(), alpha, pr, &mut streams, &mut events).map(|_| ()),
        };
        if let Err(h) = res {
            halted = Some(h);
            break;
        }
        if let Some(m) = max_dev.as_mut() {
            *m = m.max(s.tracking_deviation());
        }
        let at_record = s.k % every == 0 || s.k == opts.steps;
        // Gossip rounds are O(p); the O(np) error check runs only at record points.
        if at_record || alg != AlgorithmKind::Gsgt {
            let row = record(&s, pr);
            let err = row.total_err(n);
            if err > DIVERGENCE_FACTOR * reference {
                halted = Some(Halt { k: s.k, reason: HaltReason::Blowup { error: err, reference } });
                break;
            }
            if at_record {
                recorder(&row);
                rows.push(row);
            }
        }
    }
    Ok(TrajectoryMetrics {
        algorithm: alg,
        seed: opts.seed,
        replica: opts.replica,
        n,
        rows,
        max_tracking_deviation: max_dev,
        halted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_graph, gossip_probabilities, metropolis_weights, Topology};
    use crate::oracle::{make_quadratic_problem, QuadraticSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn two_agent_problem() -> Problem {
        let hs = vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 3.0)];
        let cs = vec![DVector::from_element(1, 1.0), DVector::from_element(1, -2.0)];
        Problem::quadratic_from_parts(hs, cs, 0.0).unwrap()
    }

    #[test]
    fn stepsize_examples() {
        let d = StepsizePolicy::Diminishing { theta: 2.0, m: 10.0 };
        assert_abs_diff_eq!(d.at(0), 0.2, epsilon = 1e-15);
        let c = StepsizePolicy::Diminishing { theta: 3.0, m: 1.0 };
        assert_abs_diff_eq!(c.at(4), 3.0 / 5.0, epsilon = 1e-15);
        assert_eq!(StepsizePolicy::Constant(0.01).at(12345), 0.01);
    }

    #[test]
    fn stepsize_grammar() {
        for s in ["const:0.005", "dim:theta=2,m=10"] {
            assert_eq!(s.parse::<StepsizePolicy>().unwrap().to_string(), s);
        }
        for s in ["const:-1", "dim:theta=2", "dim:theta=2,m=0.5", "lin:1", "dim:theta=1,m=2,m=3"] {
            assert!(s.parse::<StepsizePolicy>().is_err(), "{s}");
        }
    }

    #[test]
    fn two_agent_dsgt_step_by_hand() {
        let pr = two_agent_problem();
        let w = MixingMatrix::new(MixingKind::Consensus, DMatrix::from_element(2, 2, 0.5));
        let mut streams = AgentStreams::new(0, 0, 2);
        let mut s = init_state(&pr, DMatrix::zeros(2, 1), &mut streams).unwrap();
        let alpha = 0.1;
        dsgt_step(&mut s, &w, alpha, &pr, &mut streams).unwrap();
        // Straight-line evaluation of the two update lines.
        let g0 = [1.0 * (0.0 - 1.0), 3.0 * (0.0 + 2.0)];
        let shifted = [0.0 - alpha * g0[0], 0.0 - alpha * g0[1]];
        let xm = 0.5 * (shifted[0] + shifted[1]);
        assert_abs_diff_eq!(s.x[(0, 0)], xm, epsilon = 1e-15);
        assert_abs_diff_eq!(s.x[(1, 0)], xm, epsilon = 1e-15);
        let g1 = [1.0 * (xm - 1.0), 3.0 * (xm + 2.0)];
        let ym = 0.5 * (g0[0] + g0[1]);
        assert_abs_diff_eq!(s.y[(0, 0)], ym + g1[0] - g0[0], epsilon = 1e-15);
        assert_abs_diff_eq!(s.y[(1, 0)], ym + g1[1] - g0[1], epsilon = 1e-15);
        assert_eq!((s.grad_evals, s.messages), (4, 2));
    }

    #[test]
    fn single_agent_dsgt_is_gradient_descent() {
        let pr = make_quadratic_problem(1, 3, QuadraticSpec { mu: 1.0, l: 2.0, spread: 1.0 }, 0.0, 4).unwrap();
        let w = MixingMatrix::new(MixingKind::Consensus, DMatrix::identity(1, 1));
        let mut streams = AgentStreams::new(1, 0, 1);
        let mut s = init_state(&pr, DMatrix::zeros(1, 3), &mut streams).unwrap();
        let mut x = DVector::zeros(3);
        for _ in 0..20 {
            dsgt_step(&mut s, &w, 0.1, &pr, &mut streams).unwrap();
            x = &x - pr.exact_gradient(0, &x) * 0.1;
            for c in 0..3 {
                assert_abs_diff_eq!(s.x[(0, c)], x[c], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn gsgt_single_agent_doubles_stepsize() {
        let pr = make_quadratic_problem(1, 2, QuadraticSpec { mu: 1.0, l: 1.0, spread: 1.0 }, 0.0, 4).unwrap();
        let pi = MixingMatrix::new(MixingKind::Gossip, DMatrix::identity(1, 1));
        let mut streams = AgentStreams::new(1, 0, 1);
        let mut events = Stream::new(StreamKey::events(1, 0));
        let mut s = init_state(&pr, DMatrix::zeros(1, 2), &mut streams).unwrap();
        let before = s.clone();
        let ev = gsgt_step(&mut s, &pi, 0.05, &pr, &mut streams, &mut events).unwrap();
        assert!(!ev.is_exchange());
        for c in 0..2 {
            assert_abs_diff_eq!(s.x[(0, c)], before.x[(0, c)] - 0.1 * before.y[(0, c)], epsilon = 1e-15);
        }
        assert_eq!((s.messages, s.bound_messages), (0, 2));
    }

    #[test]
    fn gsgt_exchange_mean_dynamics_and_frozen_rows() {
        let pr = make_quadratic_problem(6, 3, QuadraticSpec { mu: 1.0, l: 3.0, spread: 1.0 }, 0.5, 2).unwrap();
        let g = build_graph(Topology::Complete, 6).unwrap();
        let pi = gossip_probabilities(&g, false).unwrap();
        let mut streams = AgentStreams::new(3, 0, 6);
        let mut events = Stream::new(StreamKey::events(3, 0));
        let mut s = init_state(&pr, DMatrix::from_fn(6, 3, |i, c| (i + c) as f64 * 0.1), &mut streams).unwrap();
        let alpha = 0.02;
        for _ in 0..50 {
            let before = s.clone();
            let ev = gsgt_step(&mut s, &pi, alpha, &pr, &mut streams, &mut events).unwrap();
            let (i, j) = (ev.waking, ev.partner);
            let expected = if ev.is_exchange() {
                before.mean_x() - (before.y.row(i).transpose() + before.y.row(j).transpose()) * (alpha / 6.0)
            } else {
                before.mean_x() - before.y.row(i).transpose() * (2.0 * alpha / 6.0)
            };
            assert!((s.mean_x() - expected).amax() <= 1e-12);
            for a in (0..6).filter(|&a| a != i && a != j) {
                for c in 0..3 {
                    assert_eq!(s.x[(a, c)].to_bits(), before.x[(a, c)].to_bits());
                    assert_eq!(s.y[(a, c)].to_bits(), before.y[(a, c)].to_bits());
                    assert_eq!(s.g_last[(a, c)].to_bits(), before.g_last[(a, c)].to_bits());
                }
            }
            assert!(s.tracking_deviation() <= 1e-12);
        }
    }

    #[test]
    fn dsgt_mean_dynamics() {
        let pr = make_quadratic_problem(8, 2, QuadraticSpec { mu: 1.0, l: 4.0, spread: 2.0 }, 1.0, 5).unwrap();
        let g = build_graph(Topology::Ring, 8).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let mut streams = AgentStreams::new(9, 0, 8);
        let mut s = init_state(&pr, DMatrix::zeros(8, 2), &mut streams).unwrap();
        for _ in 0..30 {
            let before = s.clone();
            dsgt_step(&mut s, &w, 0.03, &pr, &mut streams).unwrap();
            let expected = before.mean_x() - before.mean_y() * 0.03;
            assert!((s.mean_x() - expected).amax() <= 1e-12);
        }
    }

    #[test]
    fn csg_steps() {
        let pr = Problem::quadratic_from_parts(vec![DMatrix::identity(2, 2); 3], vec![DVector::zeros(2); 3], 0.0).unwrap();
        let mut streams = AgentStreams::new(0, 0, 3);
        let mut s = init_csg_state(&pr, &[1.0, 1.0], &mut streams).unwrap();
        csg_step(&mut s, 0.1, &pr, &mut streams).unwrap();
        assert_abs_diff_eq!(s.x[(0, 0)], 0.9, epsilon = 1e-15);
        assert_eq!(s.grad_evals, 6);
        let mut at_opt = init_csg_state(&pr, &[0.0, 0.0], &mut streams).unwrap();
        csg_step(&mut at_opt, 0.1, &pr, &mut streams).unwrap();
        assert_eq!(at_opt.x[(0, 0)], 0.0);
    }

    #[test]
    fn dsg_with_identity_is_decoupled_sgd() {
        let pr = make_quadratic_problem(3, 2, QuadraticSpec { mu: 1.0, l: 2.0, spread: 1.0 }, 0.0, 8).unwrap();
        let w = MixingMatrix::new(MixingKind::Consensus, DMatrix::identity(3, 3));
        let mut streams = AgentStreams::new(0, 0, 3);
        let mut s = init_state(&pr, DMatrix::zeros(3, 2), &mut streams).unwrap();
        let mut xs: Vec<DVector<f64>> = vec![DVector::zeros(2); 3];
        for _ in 0..10 {
            dsg_step(&mut s, &w, 0.2, &pr, &mut streams).unwrap();
            for (i, x) in xs.iter_mut().enumerate() {
                *x = &*x - pr.exact_gradient(i, x) * 0.2;
                assert!((s.x.row(i).transpose() - &*x).amax() <= 1e-14);
            }
        }
    }

    #[test]
    fn zero_stepsize_freezes_x() {
        let pr = make_quadratic_problem(5, 2, QuadraticSpec { mu: 1.0, l: 2.0, spread: 1.0 }, 0.0, 8).unwrap();
        let g = build_graph(Topology::Ring, 5).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let pi = gossip_probabilities(&g, true).unwrap();
        let x0 = DMatrix::from_fn(5, 2, |i, c| i as f64 - c as f64);
        let mut streams = AgentStreams::new(0, 0, 5);
        let mut events = Stream::new(StreamKey::events(0, 0));
        for alg in [AlgorithmKind::Dsgt, AlgorithmKind::Gsgt] {
            let mut s = init_state(&pr, x0.clone(), &mut streams).unwrap();
            for _ in 0..5 {
                match alg {
                    AlgorithmKind::Dsgt => dsgt_step(&mut s, &w, 0.0, &pr, &mut streams).unwrap(),
                    _ => gsgt_step(&mut s, &pi, 0.0, &pr, &mut streams, &mut events).map(|_| ()).unwrap(),
                }
            }
            // Mixing still moves individual rows when α = 0; only the mean is fixed.
            assert!((s.mean_x() - row_mean(&x0)).amax() < 1e-14, "{alg}");
        }
        let mut s = init_state(&pr, x0.clone(), &mut streams).unwrap();
        let id = MixingMatrix::new(MixingKind::Consensus, DMatrix::identity(5, 5));
        dsgt_step(&mut s, &id, 0.0, &pr, &mut streams).unwrap();
        dsg_step(&mut s, &id, 0.0, &pr, &mut streams).unwrap();
        assert_eq!(s.x, x0);
    }

    #[test]
    fn run_is_deterministic_and_records_k0() {
        let pr = make_quadratic_problem(4, 2, QuadraticSpec { mu: 1.0, l: 2.0, spread: 1.0 }, 1.0, 8).unwrap();
        let g = build_graph(Topology::Ring, 4).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let opts = RunOptions { steps: 0, ..RunOptions::default() };
        let r = run(AlgorithmKind::Dsgt, &pr, Some(&w), &StepsizePolicy::Constant(0.1), &opts, &mut |_| {}).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].k, 0);
        let opts = RunOptions { steps: 100, seed: 5, record_every: 7, ..RunOptions::default() };
        let a = run(AlgorithmKind::Dsgt, &pr, Some(&w), &StepsizePolicy::Constant(0.1), &opts, &mut |_| {}).unwrap();
        let b = run(AlgorithmKind::Dsgt, &pr, Some(&w), &StepsizePolicy::Constant(0.1), &opts, &mut |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.last().unwrap().k, 100);
        assert_eq!(a.rows[1].k, 7);
    }

    #[test]
    fn divergence_halts() {
        let pr = make_quadratic_problem(4, 2, QuadraticSpec { mu: 1.0, l: 4.0, spread: 1.0 }, 0.0, 8).unwrap();
        let g = build_graph(Topology::Ring, 4).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let opts = RunOptions { steps: 10_000, ..RunOptions::default() };
        let r = run(AlgorithmKind::Dsgt, &pr, Some(&w), &StepsizePolicy::Constant(5.0), &opts, &mut |_| {}).unwrap();
        let h = r.halted.expect("diverges");
        assert!(h.k < 10_000);
    }

    #[test]
    fn wrong_mixing_rejected() {
        let pr = make_quadratic_problem(4, 1, QuadraticSpec { mu: 1.0, l: 4.0, spread: 1.0 }, 0.0, 8).unwrap();
        let g = build_graph(Topology::Ring, 4).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let err = run(AlgorithmKind::Gsgt, &pr, Some(&w), &StepsizePolicy::Constant(0.1), &RunOptions::default(), &mut |_| {});
        assert!(matches!(err, Err(EngineError::WrongMixing { .. })));
        assert!(run(AlgorithmKind::Csg, &pr, None, &StepsizePolicy::Constant(0.1), &RunOptions::default(), &mut |_| {}).is_ok());
    }
}
