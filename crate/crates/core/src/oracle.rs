//! Local objectives and their stochastic first-order oracles.
//!
//! Two problem families are provided:
//!
//! - **ridge**: the on-line Ridge regression benchmark. Agent `i` observes
//!   `u ~ U[0.3, 0.4]^p` and `v = uᵀx̃_i + ε`, `ε ~ N(0, 1)`, and minimizes
//!   `E[(uᵀx − v)²] + λ‖x‖²`.
//! - **quad**: `f_i(x) = ½ (x − c_i)ᵀ H_i (x − c_i)` with controlled spectrum
//!   and additive isotropic Gaussian gradient noise of total variance `σ²`.
//!
//! Every oracle call consumes a fixed number of 64-bit words from the
//! caller's stream: `p + 2` for ridge (one per feature, two for `ε`) and `2p`
//! for quad (one normal per coordinate).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{solve_spd, symmetric_eigenvalues};
use crate::rng::{Stream, StreamKey};

/// Lower end of the feature distribution.
pub const FEATURE_LO: f64 = 0.3;
/// Upper end of the feature distribution.
pub const FEATURE_HI: f64 = 0.4;
/// `E[u_j]`.
pub const FEATURE_MEAN: f64 = 0.35;
/// `Var[u_j] = 0.1² / 12`.
pub const FEATURE_VAR: f64 = 1.0 / 1200.0;

/// Replica index reserved for σ² estimation streams.
const ESTIMATION_REPLICA: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("problem needs n >= 1 and p >= 1 (got n = {n}, p = {p})")]
    Shape { n: usize, p: usize },
    #[error("ridge penalty must be positive (got {0})")]
    Penalty(f64),
    #[error("need 0 < mu <= L (got mu = {mu}, L = {l})")]
    Spectrum { mu: f64, l: f64 },
    #[error("noise level must be finite and nonnegative (got {0})")]
    Noise(f64),
    #[error("optimality system is singular")]
    Singular,
    #[error("sigma^2 estimation needs at least 1000 samples (got {0})")]
    TooFewSamples(usize),
    #[error("bad problem descriptor `{0}`: {1}")]
    Parse(String, String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemKind {
    Ridge {
        penalty: f64,
        /// `x̃_i`, one per agent.
        targets: Vec<DVector<f64>>,
        /// `E[uuᵀ] = 0.1225·11ᵀ + (1/1200)·I`.
        second_moment: DMatrix<f64>,
    },
    Quadratic {
        curvatures: Vec<DMatrix<f64>>,
        offsets: Vec<DVector<f64>>,
        sigma: f64,
    },
}

/// `n` local objectives on `R^p` with their oracle and constants.
#[derive(Debug, Clone)]
pub struct Problem {
    n: usize,
    p: usize,
    kind: ProblemKind,
    optimum: DVector<f64>,
    mu: f64,
    l: f64,
}

/// Where a gradient sample's randomness came from: the stream and the word
/// offset at which the draw began.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawId {
    pub key: StreamKey,
    pub position: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub value: DVector<f64>,
    pub agent: usize,
    pub draw: DrawId,
}

/// `E[uuᵀ]` for `u ~ U[0.3, 0.4]^p`.
pub fn feature_second_moment(p: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_element(p, p, FEATURE_MEAN * FEATURE_MEAN);
    for j in 0..p {
        m[(j, j)] += FEATURE_VAR;
    }
    m
}

/// Level of agent `i`'s target among `n` agents: `10·i/(n−1)`, or 5 for `n = 1`.
pub fn ridge_target_level(i: usize, n: usize) -> f64 {
    if n == 1 {
        5.0
    } else {
        10.0 * i as f64 / (n - 1) as f64
    }
}

/// Ridge benchmark. The layout is deterministic, so `seed` is unused and kept
/// only for signature symmetry with the quadratic family.
pub fn make_ridge_problem(n: usize, p: usize, penalty: f64, _seed: u64) -> Result<Problem, OracleError> {
    if n == 0 || p == 0 {
        return Err(OracleError::Shape { n, p });
    }
    if !(penalty > 0.0 && penalty.is_finite()) {
        return Err(OracleError::Penalty(penalty));
    }
    let targets: Vec<_> = (0..n)
        .map(|i| DVector::from_element(p, ridge_target_level(i, n)))
        .collect();
    let second_moment = feature_second_moment(p);
    let mean_target = targets.iter().fold(DVector::zeros(p), |acc, t| acc + t) / n as f64;
    let mut reg = second_moment.clone();
    for j in 0..p {
        reg[(j, j)] += penalty;
    }
    let optimum = solve_spd(&reg, &(&second_moment * mean_target)).ok_or(OracleError::Singular)?;
    // Rank-one-plus-identity spectrum: 0.1225·p + 1/1200 once, 1/1200 otherwise.
    let top = FEATURE_MEAN * FEATURE_MEAN * p as f64 + FEATURE_VAR;
    let bottom = if p == 1 { top } else { FEATURE_VAR };
    Ok(Problem {
        n,
        p,
        kind: ProblemKind::Ridge { penalty, targets, second_moment },
        optimum,
        mu: 2.0 * (bottom + penalty),
        l: 2.0 * (top + penalty),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub mu: f64,
    pub l: f64,
    /// Offsets `c_i` are drawn uniformly from `[−spread, spread]^p`.
    pub spread: f64,
}

/// Random orthogonal matrix from the QR factors of a Gaussian matrix, with
/// column signs fixed so the distribution is Haar.
fn random_orthogonal(p: usize, stream: &mut Stream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| stream.normal());
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Quadratic family with curvature spectra inside `[μ, L]`. The extremes are
/// attained: for `p ≥ 2` every agent has both `μ` and `L` as eigenvalues; for
/// `p = 1` agent 0 gets `μ` and agent 1 gets `L`. Setup randomness comes from
/// the stream `(seed, 0, u32::MAX)`, away from all run streams.
pub fn make_quadratic_problem(
    n: usize,
    p: usize,
    spec: QuadraticSpec,
    sigma: f64,
    seed: u64,
) -> Result<Problem, OracleError> {
    if n == 0 || p == 0 {
        return Err(OracleError::Shape { n, p });
    }
    if !(spec.mu > 0.0 && spec.mu <= spec.l && spec.l.is_finite()) {
        return Err(OracleError::Spectrum { mu: spec.mu, l: spec.l });
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(OracleError::Noise(sigma));
    }
    let mut stream = Stream::new(StreamKey::new(seed, 0, u32::MAX));
    let mut curvatures = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for i in 0..n {
        let eig: Vec<f64> = if p == 1 {
            vec![match i {
                0 => spec.mu,
                1 => spec.l,
                _ => stream.uniform_in(spec.mu, spec.l),
            }]
        } else {
            (0..p)
                .map(|j| match j {
                    0 => spec.mu,
                    1 => spec.l,
                    _ => stream.uniform_in(spec.mu, spec.l),
                })
                .collect()
        };
        let h = if spec.mu == spec.l {
            DMatrix::identity(p, p) * spec.mu
        } else {
            let q = random_orthogonal(p, &mut stream);
            let h = &q * DMatrix::from_diagonal(&DVector::from_vec(eig)) * q.transpose();
            // Symmetrize away rounding.
            (&h + h.transpose()) * 0.5
        };
        curvatures.push(h);
        offsets.push(DVector::from_fn(p, |_, _| stream.uniform_in(-spec.spread, spec.spread)));
    }
    Problem::quadratic_from_parts(curvatures, offsets, sigma)
}

impl Problem {
    /// Quadratic problem from explicit curvatures and offsets.
    pub fn quadratic_from_parts(
        curvatures: Vec<DMatrix<f64>>,
        offsets: Vec<DVector<f64>>,
        sigma: f64,
    ) -> Result<Problem, OracleError> {
        let n = curvatures.len();
        let p = offsets.first().map_or(0, |c| c.len());
        if n == 0 || p == 0 || offsets.len() != n {
            return Err(OracleError::Shape { n, p });
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(OracleError::Noise(sigma));
        }
        let mut mu = f64::INFINITY;
        let mut l = 0.0_f64;
        let mut hsum = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for (h, c) in curvatures.iter().zip(&offsets) {
            assert_eq!(h.shape(), (p, p), "curvature shape");
            let ev = symmetric_eigenvalues(h);
            l = l.max(ev[0]);
            mu = mu.min(ev[p - 1]);
            hsum += h;
            rhs += h * c;
        }
        if !(mu > 0.0) {
            return Err(OracleError::Spectrum { mu, l });
        }
        let optimum = solve_spd(&hsum, &rhs).ok_or(OracleError::Singular)?;
        Ok(Problem { n, p, kind: ProblemKind::Quadratic { curvatures, offsets, sigma }, optimum, mu, l })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn kind(&self) -> &ProblemKind {
        &self.kind
    }

    pub fn is_ridge(&self) -> bool {
        matches!(self.kind, ProblemKind::Ridge { .. })
    }

    /// `x*`, cached at construction.
    pub fn optimum(&self) -> &DVector<f64> {
        &self.optimum
    }

    /// `(μ, L)`.
    pub fn convexity_constants(&self) -> (f64, f64) {
        (self.mu, self.l)
    }

    /// The exact variance bound when the noise model has one (quad only).
    pub fn known_sigma2(&self) -> Option<f64> {
        match &self.kind {
            ProblemKind::Quadratic { sigma, .. } => Some(sigma * sigma),
            ProblemKind::Ridge { .. } => None,
        }
    }

    /// 64-bit words consumed by one oracle call.
    pub fn draws_per_sample(&self) -> u64 {
        match self.kind {
            ProblemKind::Ridge { .. } => self.p as u64 + 2,
            ProblemKind::Quadratic { .. } => 2 * self.p as u64,
        }
    }

    /// `∇f_i(x)` written into `out`.
    pub fn exact_gradient_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let p = self.p;
        match &self.kind {
            ProblemKind::Ridge { penalty, targets, second_moment } => {
                // 2E[uuᵀ](x − x̃) = 2(0.1225·1ᵀ(x − x̃)·1 + (x − x̃)/1200).
                let t = &targets[i];
                let s: f64 = (0..p).map(|j| x[j] - t[j]).sum();
                let shared = FEATURE_MEAN * FEATURE_MEAN * s;
                debug_assert_eq!(second_moment.nrows(), p);
                for j in 0..p {
                    out[j] = 2.0 * (shared + FEATURE_VAR * (x[j] - t[j])) + 2.0 * penalty * x[j];
                }
            }
            ProblemKind::Quadratic { curvatures, offsets, .. } => {
                let (h, c) = (&curvatures[i], &offsets[i]);
                for (r, o) in out.iter_mut().enumerate().take(p) {
                    *o = (0..p).map(|j| h[(r, j)] * (x[j] - c[j])).sum();
                }
            }
        }
    }

    pub fn exact_gradient(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.p);
        self.exact_gradient_into(i, x.as_slice(), out.as_mut_slice());
        out
    }

    /// `h(X) = (1/n) Σ_i ∇f_i(x_i)` for stacked iterates (rows = agents).
    pub fn exact_mean_gradient(&self, x: &DMatrix<f64>) -> DVector<f64> {
        assert_eq!(x.shape(), (self.n, self.p), "stacked iterate shape");
        let mut acc = DVector::zeros(self.p);
        let mut row = vec![0.0; self.p];
        let mut g = vec![0.0; self.p];
        for i in 0..self.n {
            for j in 0..self.p {
                row[j] = x[(i, j)];
            }
            self.exact_gradient_into(i, &row, &mut g);
            for j in 0..self.p {
                acc[j] += g[j];
            }
        }
        acc / self.n as f64
    }

    /// One stochastic gradient `g_i(x, ξ)` written into `out`.
    pub fn sample_gradient_into(&self, i: usize, x: &[f64], stream: &mut Stream, out: &mut [f64]) {
        let p = self.p;
        match &self.kind {
            ProblemKind::Ridge { penalty, targets, .. } => {
                let t = &targets[i];
                for o in out.iter_mut().take(p) {
                    *o = stream.uniform_in(FEATURE_LO, FEATURE_HI);
                }
                let eps = stream.normal();
                let mut resid = -eps;
                for j in 0..p {
                    resid += out[j] * (x[j] - t[j]);
                }
                for j in 0..p {
                    out[j] = 2.0 * resid * out[j] + 2.0 * penalty * x[j];
                }
            }
            ProblemKind::Quadratic { sigma, .. } => {
                self.exact_gradient_into(i, x, out);
                let scale = sigma / (p as f64).sqrt();
                for o in out.iter_mut().take(p) {
                    let z = stream.normal();
                    *o += scale * z;
                }
            }
        }
    }

    pub fn sample_gradient(&self, i: usize, x: &DVector<f64>, stream: &mut Stream) -> GradientSample {
        let draw = DrawId { key: stream.key(), position: stream.position() };
        let mut value = DVector::zeros(self.p);
        self.sample_gradient_into(i, x.as_slice(), stream, value.as_mut_slice());
        GradientSample { value, agent: i, draw }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Estimate {
    /// Max over agents of the mean squared noise norm.
    pub value: f64,
    /// Standard error of the maximizing agent's mean.
    pub se: f64,
    pub per_agent: Vec<f64>,
    pub samples: usize,
    pub radius: f64,
}

/// Empirical `σ²`: for each agent, the mean of `‖g_i(x, ξ) − ∇f_i(x)‖²` over
/// `samples` points drawn uniformly from the ball of `radius` around `center`.
pub fn estimate_sigma2(
    pr: &Problem,
    center: &DVector<f64>,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<Sigma2Estimate, OracleError> {
    if samples < 1000 {
        return Err(OracleError::TooFewSamples(samples));
    }
    let p = pr.p();
    let mut per_agent = Vec::with_capacity(pr.n());
    let mut ses = Vec::with_capacity(pr.n());
    let mut x = vec![0.0; p];
    let mut g = vec![0.0; p];
    let mut exact = vec![0.0; p];
    for i in 0..pr.n() {
        let mut points = Stream::new(StreamKey::new(seed, ESTIMATION_REPLICA, 2 * i as u32));
        let mut noise = Stream::new(StreamKey::new(seed, ESTIMATION_REPLICA, 2 * i as u32 + 1));
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..samples {
            if radius > 0.0 {
                let dir: Vec<f64> = (0..p).map(|_| points.normal()).collect();
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let r = radius * points.uniform().powf(1.0 / p as f64);
                for j in 0..p {
                    x[j] = center[j] + r * dir[j] / norm;
                }
            } else {
                x.copy_from_slice(center.as_slice());
            }
            pr.sample_gradient_into(i, &x, &mut noise, &mut g);
            pr.exact_gradient_into(i, &x, &mut exact);
            let d2: f64 = g.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum();
            sum += d2;
            sum2 += d2 * d2;
        }
        let m = samples as f64;
        let mean = sum / m;
        let var = ((sum2 - m * mean * mean) / (m - 1.0)).max(0.0);
        per_agent.push(mean);
        ses.push((var / m).sqrt());
    }
    let (arg, &value) = per_agent
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one agent");
    Ok(Sigma2Estimate { value, se: ses[arg], per_agent, samples, radius })
}

/// Problem descriptor: `ridge:p=..,lambda=..` or
/// `quad:p=..,mu=..,L=..,sigma=..,spread=..` (quad keys other than `mu`, `L`,
/// `sigma` are optional, with `p = 1`, `spread = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProblemSpec {
    Ridge { p: usize, lambda: f64 },
    Quadratic { p: usize, mu: f64, l: f64, sigma: f64, spread: f64 },
}

impl ProblemSpec {
    pub fn build(&self, n: usize, seed: u64) -> Result<Problem, OracleError> {
        match *self {
            ProblemSpec::Ridge { p, lambda } => make_ridge_problem(n, p, lambda, seed),
            ProblemSpec::Quadratic { p, mu, l, sigma, spread } => {
                make_quadratic_problem(n, p, QuadraticSpec { mu, l, spread }, sigma, seed)
            }
        }
    }

    pub fn p(&self) -> usize {
        match *self {
            ProblemSpec::Ridge { p, .. } | ProblemSpec::Quadratic { p, .. } => p,
        }
    }
}

impl fmt::Display for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemSpec::Ridge { p, lambda } => write!(f, "ridge:p={p},lambda={lambda}"),
            ProblemSpec::Quadratic { p, mu, l, sigma, spread } => {
                write!(f, "quad:p={p},mu={mu},L={l},sigma={sigma},spread={spread}")
            }
        }
    }
}

impl FromStr for ProblemSpec {
    type Err = OracleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let err = |why: &str| OracleError::Parse(s.to_string(), why.to_string());
        let (head, rest) = s.split_once(':').ok_or_else(|| err("missing `:`"))?;
        let mut fields = Vec::new();
        for part in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| err("expected key=value"))?;
            let k = k.trim();
            if fields.iter().any(|(seen, _)| *seen == k) {
                return Err(err(&format!("duplicate key `{k}`")));
            }
            fields.push((k, v.trim()));
        }
        let num = |key: &str| -> Result<Option<f64>, OracleError> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.parse::<f64>().map_err(|_| err(&format!("bad number for `{key}`"))))
                .transpose()
        };
        let dim = |key: &str| -> Result<Option<usize>, OracleError> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.parse::<usize>().map_err(|_| err(&format!("bad integer for `{key}`"))))
                .transpose()
        };
        let allowed: &[&str] = match head {
            "ridge" => &["p", "lambda"],
            "quad" => &["p", "mu", "L", "sigma", "spread"],
            _ => return Err(err("unknown problem family")),
        };
        if let Some((k, _)) = fields.iter().find(|(k, _)| !allowed.contains(k)) {
            return Err(err(&format!("unknown key `{k}`")));
        }
        match head {
            "ridge" => Ok(ProblemSpec::Ridge {
                p: dim("p")?.ok_or_else(|| err("missing `p`"))?,
                lambda: num("lambda")?.ok_or_else(|| err("missing `lambda`"))?,
            }),
            _ => Ok(ProblemSpec::Quadratic {
                p: dim("p")?.unwrap_or(1),
                mu: num("mu")?.ok_or_else(|| err("missing `mu`"))?,
                l: num("L")?.ok_or_else(|| err("missing `L`"))?,
                sigma: num("sigma")?.ok_or_else(|| err("missing `sigma`"))?,
                spread: num("spread")?.unwrap_or(1.0),
            }),
        }
    }
}
