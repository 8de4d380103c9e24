//! Closed-form guarantees for DSGT and GSGT.
//!
//! Everything here is a pure function of a handful of scalars collected in
//! [`TheoryInputs`]. The DSGT quantities use `ρ = ρ_w`; the GSGT ones use
//! `ρ = ρ_w̄`. Where `ρ = 0` puts a zero in a denominator the limit is taken:
//! unbounded stepsize terms become `None` (+∞), `1/β → 0` and `a₂₃ = 0`.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::network::MixingMatrix;

pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid theory inputs: {0}")]
    Inputs(String),
    #[error("matrix has a negative entry")]
    Negative,
    #[error("matrix is reducible")]
    Reducible,
    #[error("diagonal entry {value} is not below {lambda}")]
    Diagonal { value: f64, lambda: f64 },
    #[error("theta * mu = {0} must exceed 1")]
    Theta(f64),
    #[error("epsilon must lie in (0, 1) (got {0})")]
    Epsilon(f64),
}

/// Which matrix norm is used for `‖W − I‖`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormConvention {
    #[default]
    Frobenius,
    Spectral,
}

impl fmt::Display for NormConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Frobenius => "frobenius",
            Self::Spectral => "spectral",
        })
    }
}

impl FromStr for NormConvention {
    type Err = TheoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "frobenius" => Ok(Self::Frobenius),
            "spectral" => Ok(Self::Spectral),
            other => Err(TheoryError::Inputs(format!("unknown norm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub n: usize,
    pub mu: f64,
    pub l: f64,
    pub sigma2: f64,
    /// `ρ_w` for DSGT, `ρ_w̄` for GSGT.
    pub rho: f64,
    /// `‖W − I‖` under the chosen [`NormConvention`].
    pub w_minus_i: f64,
    pub gamma: f64,
}

impl TheoryInputs {
    pub fn new(n: usize, mu: f64, l: f64, sigma2: f64, rho: f64, w_minus_i: f64, gamma: f64) -> Self {
        Self { n, mu, l, sigma2, rho, w_minus_i, gamma }
    }

    /// Inputs for a consensus matrix `W`.
    pub fn for_consensus(
        mu: f64,
        l: f64,
        sigma2: f64,
        w: &MixingMatrix,
        norm: NormConvention,
        gamma: f64,
    ) -> Self {
        let dist = match norm {
            NormConvention::Frobenius => w.distance_to_identity_frobenius(),
            NormConvention::Spectral => w.distance_to_identity_spectral(),
        };
        Self::new(w.n(), mu, l, sigma2, w.spectral_gap_norm(), dist, gamma)
    }

    /// Inputs for the expected gossip matrix `W̄`.
    pub fn for_gossip(mu: f64, l: f64, sigma2: f64, wbar: &MixingMatrix, gamma: f64) -> Self {
        Self::new(wbar.n(), mu, l, sigma2, wbar.spectral_gap_norm(), 0.0, gamma)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: String| Err(TheoryError::Inputs(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if !(self.mu > 0.0 && self.mu <= self.l && self.l.is_finite()) {
            return bad(format!("need 0 < mu <= L (mu = {}, L = {})", self.mu, self.l));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho = {} outside [0, 1)", self.rho));
        }
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return bad(format!("Gamma = {} must exceed 1", self.gamma));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma^2 = {} must be finite and nonnegative", self.sigma2));
        }
        if !(self.w_minus_i >= 0.0 && self.w_minus_i.is_finite()) {
            return bad(format!("||W - I|| = {} must be finite and nonnegative", self.w_minus_i));
        }
        Ok(())
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }
}

/// The three DSGT stepsize terms; `None` marks an unbounded term.
pub fn dsgt_alpha_terms(i: &TheoryInputs) -> [Option<f64>; 3] {
    let (r, l, g) = (i.rho, i.l, i.gamma);
    let gap = 1.0 - r * r;
    let t1 = (r > 0.0).then(|| gap / (12.0 * r * l));
    let t2 = Some(gap * gap / (2.0 * g.sqrt() * l * (6.0 * r * i.w_minus_i).max(gap)));
    let t3 = (r > 0.0).then(|| {
        let inner = (i.mu * i.mu) / (l * l) * (g - 1.0) / (g * (g + 1.0));
        gap / (3.0 * r.powf(2.0 / 3.0) * l) * inner.cbrt()
    });
    [t1, t2, t3]
}

/// Largest constant stepsize admitted for DSGT.
pub fn dsgt_alpha_max(i: &TheoryInputs) -> f64 {
    dsgt_alpha_terms(i).into_iter().flatten().fold(f64::INFINITY, f64::min)
}

/// `α < 2/(μ + L)`, required separately from [`dsgt_alpha_max`].
pub fn gradient_step_condition(i: &TheoryInputs, alpha: f64) -> bool {
    alpha < 2.0 / (i.mu + i.l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsgtMatrix {
    pub a: Matrix3<f64>,
    /// `(1−ρ²)/(2ρ²) − 4αL − 2α²L²`; `None` means `+∞` (`ρ = 0`).
    pub beta: Option<f64>,
}

impl DsgtMatrix {
    pub fn beta_positive(&self) -> bool {
        self.beta.is_none_or(|b| b > 0.0)
    }
}

/// Contraction matrix `A`. Returned even when `β ≤ 0`, for diagnostics.
pub fn dsgt_matrix_a(i: &TheoryInputs, alpha: f64) -> DsgtMatrix {
    let (r, mu, l, n) = (i.rho, i.mu, i.l, i.nf());
    let r2 = r * r;
    let beta = (r > 0.0).then(|| (1.0 - r2) / (2.0 * r2) - 4.0 * alpha * l - 2.0 * alpha * alpha * l * l);
    let inv_beta = beta.map_or(0.0, |b| 1.0 / b);
    let diag = 0.5 * (1.0 + r2);
    let a23 = if r > 0.0 { alpha * alpha * (1.0 + r2) * r2 / (1.0 - r2) } else { 0.0 };
    let a = Matrix3::new(
        1.0 - alpha * mu,
        alpha * l * l / (mu * n) * (1.0 + alpha * mu),
        0.0,
        0.0,
        diag,
        a23,
        2.0 * alpha * n * l.powi(3),
        (inv_beta + 2.0) * i.w_minus_i.powi(2) * l * l + 3.0 * alpha * l.powi(3),
        diag,
    );
    DsgtMatrix { a, beta }
}

fn det_shifted(m: &Matrix3<f64>, lambda: f64) -> f64 {
    (Matrix3::identity() * lambda - m).determinant()
}

/// Derivative of `λ ↦ det(λI − M)`: the trace of the adjugate, i.e. the sum
/// of the principal 2×2 minors of `λI − M`.
fn det_shifted_derivative(m: &Matrix3<f64>, lambda: f64) -> f64 {
    let s = Matrix3::identity() * lambda - m;
    let minor = |a: usize, b: usize| s[(a, a)] * s[(b, b)] - s[(a, b)] * s[(b, a)];
    minor(0, 1) + minor(0, 2) + minor(1, 2)
}

fn polish_root(m: &Matrix3<f64>, mut lambda: f64) -> f64 {
    for _ in 0..8 {
        let d = det_shifted_derivative(m, lambda);
        if d == 0.0 || !d.is_finite() {
            break;
        }
        let step = det_shifted(m, lambda) / d;
        if !step.is_finite() {
            break;
        }
        let next = lambda - step;
        // Accept only steps that do not increase the residual.
        if det_shifted(m, next).abs() > det_shifted(m, lambda).abs() {
            break;
        }
        lambda = next;
        if step.abs() <= 1e-17 * lambda.abs().max(1.0) {
            break;
        }
    }
    lambda
}

/// Roots of the characteristic cubic of `m` as `(re, im)` pairs.
pub fn eigenvalues_3x3(m: &Matrix3<f64>) -> [(f64, f64); 3] {
    // λ³ + aλ² + bλ + c with a = −tr, b = Σ principal 2×2 minors, c = −det.
    let tr = m.trace();
    let minor = |i: usize, j: usize| m[(i, i)] * m[(j, j)] - m[(i, j)] * m[(j, i)];
    let a = -tr;
    let b = minor(0, 1) + minor(0, 2) + minor(1, 2);
    let c = -m.determinant();
    let shift = -a / 3.0;
    let p = b - a * a / 3.0;
    let q = 2.0 * a.powi(3) / 27.0 - a * b / 3.0 + c;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    if disc <= 0.0 {
        let roots = if p == 0.0 {
            [shift; 3]
        } else {
            let r = 2.0 * (-p / 3.0).sqrt();
            let arg = ((3.0 * q) / (2.0 * p) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
            let phi = arg.acos() / 3.0;
            let tau = std::f64::consts::TAU / 3.0;
            [0.0, 1.0, 2.0].map(|k| r * (phi - tau * k).cos() + shift)
        };
        roots.map(|x| (polish_root(m, x), 0.0))
    } else {
        let sd = disc.sqrt();
        let t = (-q / 2.0 + sd).cbrt() + (-q / 2.0 - sd).cbrt();
        let real = polish_root(m, t + shift);
        // Deflate: λ² + (a + λ₁)λ + (b + (a + λ₁)λ₁).
        let b1 = a + real;
        let c1 = b + b1 * real;
        let d2 = b1 * b1 / 4.0 - c1;
        if d2 >= 0.0 {
            let s = d2.sqrt();
            [(real, 0.0), (polish_root(m, -b1 / 2.0 + s), 0.0), (polish_root(m, -b1 / 2.0 - s), 0.0)]
        } else {
            let im = (-d2).sqrt();
            [(real, 0.0), (-b1 / 2.0, im), (-b1 / 2.0, -im)]
        }
    }
}

/// `max |λ|` over the eigenvalues of `m`.
pub fn spectral_radius_3x3(m: &Matrix3<f64>) -> f64 {
    eigenvalues_3x3(m)
        .iter()
        .map(|&(re, im)| re.hypot(im))
        .fold(0.0, f64::max)
}

/// Strong connectivity of the off-diagonal support of a 3×3 matrix.
pub fn is_irreducible_3x3(m: &Matrix3<f64>) -> bool {
    let mut reach = [[false; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            reach[i][j] = i == j || m[(i, j)] != 0.0;
        }
    }
    for k in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                reach[i][j] |= reach[i][k] && reach[k][j];
            }
        }
    }
    reach.iter().all(|r| r.iter().all(|&x| x))
}

/// For nonnegative irreducible `S` with `s_ii < λ*`: `ρ(S) < λ*` iff
/// `det(λ*I − S) > 0`.
pub fn determinant_verdict(m: &Matrix3<f64>, lambda: f64) -> Result<bool, TheoryError> {
    if m.iter().any(|&v| v < 0.0) {
        return Err(TheoryError::Negative);
    }
    if !is_irreducible_3x3(m) {
        return Err(TheoryError::Reducible);
    }
    if let Some(value) = (0..3).map(|i| m[(i, i)]).find(|&v| v >= lambda) {
        return Err(TheoryError::Diagonal { value, lambda });
    }
    Ok(det_shifted(m, lambda) > 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitBounds {
    /// Bound on `limsup E‖x̄ − x*‖²`.
    pub opt: f64,
    /// Topology-independent part of `opt`.
    pub opt_noise: f64,
    /// Network-dependent part of `opt`.
    pub opt_network: f64,
    /// Bound on `limsup E‖X − 1x̄‖²`.
    pub consensus: f64,
    /// `M_σ` for DSGT, `M_g` for GSGT.
    pub noise_constant: f64,
}

/// `M_σ = [3α²L² + 2(αL + 1)(n + 1)]σ²`.
pub fn dsgt_m_sigma(i: &TheoryInputs, alpha: f64) -> f64 {
    let al = alpha * i.l;
    (3.0 * al * al + 2.0 * (al + 1.0) * (i.nf() + 1.0)) * i.sigma2
}

pub fn dsgt_limit_bounds(i: &TheoryInputs, alpha: f64) -> LimitBounds {
    let (g, mu, l, n, s2) = (i.gamma, i.mu, i.l, i.nf(), i.sigma2);
    let r2 = i.rho * i.rho;
    let m = dsgt_m_sigma(i, alpha);
    let net = (1.0 + r2) * r2 / (1.0 - r2).powi(3);
    let opt_noise = (g + 1.0) / g * alpha * s2 / (mu * n);
    let opt_network =
        (g + 1.0) / (g - 1.0) * 4.0 * alpha * alpha * l * l * (1.0 + alpha * mu) * net * m / (mu * mu * n);
    let consensus = (g + 1.0) / (g - 1.0) * 4.0 * alpha * alpha * net
        * (2.0 * alpha * alpha * l.powi(3) * s2 + mu * m)
        / mu;
    LimitBounds { opt: opt_noise + opt_network, opt_noise, opt_network, consensus, noise_constant: m }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBound {
    pub bound: f64,
    /// All stepsize conditions the bound rests on hold.
    pub conditions_hold: bool,
}

/// `1 − ((Γ−1)/(Γ+1))αμ`, valid when `α ≤ α_max`, `β > 0` and
/// `α ≤ ((Γ+1)/Γ)(1−ρ²)/(8μ)`.
pub fn dsgt_rate_bound(i: &TheoryInputs, alpha: f64) -> RateBound {
    let g = i.gamma;
    let bound = 1.0 - (g - 1.0) / (g + 1.0) * alpha * i.mu;
    let conditions_hold = alpha > 0.0
        && alpha <= dsgt_alpha_max(i)
        && dsgt_matrix_a(i, alpha).beta_positive()
        && rate_bound_condition(i, alpha);
    RateBound { bound, conditions_hold }
}

/// `α ≤ ((Γ+1)/Γ)(1−ρ²)/(8μ)`.
pub fn rate_bound_condition(i: &TheoryInputs, alpha: f64) -> bool {
    alpha <= (i.gamma + 1.0) / i.gamma * (1.0 - i.rho * i.rho) / (8.0 * i.mu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCondition {
    pub theta: f64,
    pub m: f64,
    /// Right-hand side of the first inequality: `m` must exceed it.
    pub cond1_threshold: f64,
    pub cond1: bool,
    /// `(1−ρ²)/(2ρ²) − 4θL/m − 2θ²L²/m²`; `None` means `+∞`.
    pub beta0: Option<f64>,
    pub c: Option<f64>,
    /// `None` means `+∞` (`ρ = 0`).
    pub cond2_lhs: Option<f64>,
    pub cond2_rhs: Option<f64>,
    pub cond2: bool,
    pub passed: bool,
    pub reason: Option<String>,
}

/// Both inequalities on `m` for `α_k = θ/(m + k)`.
pub fn check_m_condition(theta: f64, m: f64, i: &TheoryInputs) -> Result<MCondition, TheoryError> {
    let (mu, l, r) = (i.mu, i.l, i.rho);
    if theta * mu <= 1.0 {
        return Err(TheoryError::Theta(theta * mu));
    }
    let r2 = r * r;
    let gap = 1.0 - r2;
    let cond1_threshold =
        (0.5 * theta * (mu + l)).max((4.0 * theta * l * r2 + 2.0 * theta * l * r * (1.0 + 3.0 * r2).sqrt()) / gap);
    let cond1 = m > cond1_threshold;
    let beta0 = (r > 0.0).then(|| gap / (2.0 * r2) - 4.0 * theta * l / m - 2.0 * theta * theta * l * l / (m * m));
    let mut reason = (!cond1).then(|| format!("m = {m} does not exceed {cond1_threshold}"));
    let (c, cond2_lhs, cond2_rhs, cond2) = match beta0 {
        Some(b) if b <= 0.0 => {
            reason.get_or_insert_with(|| format!("beta0 = {b} is not positive"));
            (None, None, None, false)
        }
        _ => {
            let inv = beta0.map_or(0.0, |b| 1.0 / b);
            let c = (inv + 2.0) * i.w_minus_i.powi(2) * l * l + 3.0 * theta * l.powi(3) / m;
            let rhs = 1.0 / (theta * mu - 1.0) * (1.0 / mu + theta / m) * 4.0 * theta * theta * l.powi(5) / m.powi(3)
                + 2.0 * c / (m * m);
            let lhs = (r > 0.0).then(|| {
                gap * gap / (theta * theta * (1.0 + r2) * r2) * (gap / 2.0 - (2.0 * m + 1.0) / (m + 1.0).powi(2))
            });
            let ok = lhs.is_none_or(|v| v > rhs);
            if !ok {
                reason.get_or_insert_with(|| format!("second inequality fails: {} <= {rhs}", lhs.unwrap()));
            }
            (Some(c), lhs, Some(rhs), ok)
        }
    };
    Ok(MCondition {
        theta,
        m,
        cond1_threshold,
        cond1,
        beta0,
        c,
        cond2_lhs,
        cond2_rhs,
        cond2,
        passed: cond1 && cond2,
        reason,
    })
}

/// Smallest integer `m ≤ limit` passing [`check_m_condition`], found by
/// doubling then bisection (the conditions only get easier as `m` grows).
pub fn smallest_m(theta: f64, i: &TheoryInputs, limit: f64) -> Result<Option<f64>, TheoryError> {
    let passes = |m: f64| check_m_condition(theta, m, i).map(|c| c.passed);
    let mut hi = check_m_condition(theta, 1.0, i)?.cond1_threshold.floor() + 1.0;
    let mut lo = hi - 1.0;
    while !passes(hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > limit {
            return Ok(None);
        }
    }
    while hi - lo > 1.0 {
        let mid = ((lo + hi) / 2.0).floor();
        if passes(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi.max(1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    /// `2θ²σ²/(n(θμ−1)(m+k))`.
    pub leading: f64,
    /// `2θ²σ²/(n(θμ−1))`, the asymptotic value of `k·E‖x̄_k − x*‖²`.
    pub coefficient: f64,
    /// Exponent of the second term, `(m+k)^{−θμ}`; its coefficient and that
    /// of the `(m+k)^{−2}` term are left unspecified.
    pub second_exponent: f64,
}

pub fn diminishing_envelope(theta: f64, m: f64, i: &TheoryInputs, k: u64) -> Result<Envelope, TheoryError> {
    let tm = theta * i.mu;
    if tm <= 1.0 {
        return Err(TheoryError::Theta(tm));
    }
    let coefficient = 2.0 * theta * theta * i.sigma2 / (i.nf() * (tm - 1.0));
    Ok(Envelope { leading: coefficient / (m + k as f64), coefficient, second_exponent: tm })
}

/// `η = 1/(n(1 − ρ_w̄))`.
pub fn gossip_eta(i: &TheoryInputs) -> f64 {
    1.0 / (i.nf() * (1.0 - i.rho))
}

/// Largest constant stepsize admitted for GSGT.
pub fn gsgt_alpha_max(i: &TheoryInputs) -> f64 {
    let (n, l, gap) = (i.nf(), i.l, 1.0 - i.rho);
    let eta = gossip_eta(i);
    let q = l / i.mu;
    let inner = ((27.0 * (2.0 * eta + 3.0) * q * n + 16.0 * (8.0 * eta + 9.0)) * q * gap)
        + 48.0 * (6.0 * eta + 1.0) * (8.0 * eta + 3.0)
        + 96.0 * q * gap;
    2.0 * n * gap / (i.gamma.sqrt() * l) / inner.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GsgtMatrix {
    pub a: Matrix3<f64>,
    pub beta1: f64,
    pub beta2: f64,
}

impl GsgtMatrix {
    pub fn betas_positive(&self) -> bool {
        self.beta1 > 0.0 && self.beta2 > 0.0
    }
}

pub fn gsgt_matrix_ag(i: &TheoryInputs, alpha: f64) -> GsgtMatrix {
    let (n, mu, l, gap) = (i.nf(), i.mu, i.l, 1.0 - i.rho);
    let beta1 = n * gap / (4.0 * alpha) - 4.0 * alpha * l * l;
    let beta2 = n * gap / 4.0 - 2.0 * alpha * l - 2.0 * alpha * alpha * l * l;
    let diag = 0.5 * (1.0 + i.rho);
    let a = Matrix3::new(
        1.0 - 2.0 * alpha * mu / n,
        2.0 * alpha * l * l / (mu * n * n) * (1.0 + 2.0 * alpha * mu / n),
        4.0 * alpha * alpha / n.powi(3),
        8.0 * alpha * alpha * l * l,
        diag,
        2.0 * alpha / n * (1.0 / beta1 + alpha),
        8.0 * alpha * alpha * l.powi(4) + 4.0 * alpha * l.powi(3),
        l * l / n * (4.0 + 2.0 / beta2 + 8.0 * alpha * alpha * l * l + 4.0 * alpha * l),
        diag,
    );
    GsgtMatrix { a, beta1, beta2 }
}

/// `M_g = (4α²L² + 2αL)σ²/n + 4(αL + 1)σ²`.
pub fn gsgt_m_const(i: &TheoryInputs, alpha: f64) -> f64 {
    let al = alpha * i.l;
    (4.0 * al * al + 2.0 * al) * i.sigma2 / i.nf() + 4.0 * (al + 1.0) * i.sigma2
}

pub fn gsgt_limit_bounds(i: &TheoryInputs, alpha: f64) -> LimitBounds {
    let (g, mu, l, n, s2, gap) = (i.gamma, i.mu, i.l, i.nf(), i.sigma2, 1.0 - i.rho);
    let eta = gossip_eta(i);
    let pre = g / (g - 1.0) * s2 / (n * n);
    let opt_noise = pre * 20.0 * alpha / (mu * gap);
    let opt_network = pre * 42.0 * (6.0 * eta + 1.0) * alpha * alpha * l * l / (mu * mu * gap * gap);
    let consensus = 4.0 * g * s2 / ((g - 1.0) * gap * gap)
        * (9.0 * (6.0 * eta + 1.0) * alpha * alpha / n + 72.0 * alpha.powi(3) * l * l / (mu * n * n));
    LimitBounds { opt: opt_noise + opt_network, opt_noise, opt_network, consensus, noise_constant: gsgt_m_const(i, alpha) }
}

/// `1 − ((2Γ−3)/Γ)(αμ/n)`, valid for `Γ > 3/2` under the GSGT stepsize bound.
pub fn gsgt_rate_bound(i: &TheoryInputs, alpha: f64) -> RateBound {
    let g = i.gamma;
    let bound = 1.0 - (2.0 * g - 3.0) / g * alpha * i.mu / i.nf();
    let conditions_hold =
        g > 1.5 && alpha > 0.0 && alpha <= gsgt_alpha_max(i) && gsgt_matrix_ag(i, alpha).betas_positive();
    RateBound { bound, conditions_hold }
}

/// Leading-order costs of reaching `(1/n)E‖X − 1x*‖² ≤ ε`, with every hidden
/// constant set to one. Only the ratios are meaningful comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub epsilon: f64,
    pub k_d: f64,
    pub n_d: f64,
    pub n_d_comm: f64,
    pub k_g: f64,
    pub n_g: f64,
    pub n_g_comm: f64,
    /// `N_d^c / N_g^c = |E|(1 − ρ_w̄)`.
    pub comm_ratio: f64,
    /// `N_d / N_g = n(1 − ρ_w̄)/2`.
    pub grad_ratio: f64,
}

pub fn cost_model(
    epsilon: f64,
    n: usize,
    mu: f64,
    sigma2: f64,
    edges: usize,
    rho_wbar: f64,
) -> Result<CostModel, TheoryError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(TheoryError::Epsilon(epsilon));
    }
    let nf = n as f64;
    let shape = (1.0 / epsilon).ln() / epsilon;
    let k_d = sigma2 / (nf * mu * mu) * shape;
    let k_g = sigma2 / (nf * (1.0 - rho_wbar) * mu * mu) * shape;
    let n_d = nf * k_d;
    let n_d_comm = 2.0 * edges as f64 * k_d;
    let n_g = 2.0 * k_g;
    Ok(CostModel {
        epsilon,
        k_d,
        n_d,
        n_d_comm,
        k_g,
        n_g,
        n_g_comm: n_g,
        comm_ratio: edges as f64 * (1.0 - rho_wbar),
        grad_ratio: nf * (1.0 - rho_wbar) / 2.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsgtFlags {
    pub alpha_feasible: bool,
    pub beta_positive: bool,
    pub gradient_step: bool,
    pub rate_condition: bool,
    pub det_positive: bool,
    pub contractive: bool,
}

impl DsgtFlags {
    pub fn all(&self) -> bool {
        self.alpha_feasible && self.beta_positive && self.gradient_step && self.contractive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsgtReport {
    pub alpha: f64,
    pub alpha_max: f64,
    pub alpha_terms: [Option<f64>; 3],
    pub matrix: [[f64; 3]; 3],
    pub beta: Option<f64>,
    pub spectral_radius: f64,
    pub rate_bound: f64,
    pub limits: LimitBounds,
    pub flags: DsgtFlags,
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| m[(r, c)]))
}

pub fn dsgt_report(i: &TheoryInputs, alpha: f64) -> DsgtReport {
    let am = dsgt_matrix_a(i, alpha);
    let rho = spectral_radius_3x3(&am.a);
    let alpha_max = dsgt_alpha_max(i);
    DsgtReport {
        alpha,
        alpha_max,
        alpha_terms: dsgt_alpha_terms(i),
        matrix: rows(&am.a),
        beta: am.beta,
        spectral_radius: rho,
        rate_bound: dsgt_rate_bound(i, alpha).bound,
        limits: dsgt_limit_bounds(i, alpha),
        flags: DsgtFlags {
            alpha_feasible: alpha <= alpha_max,
            beta_positive: am.beta_positive(),
            gradient_step: gradient_step_condition(i, alpha),
            rate_condition: rate_bound_condition(i, alpha),
            det_positive: det_shifted(&am.a, 1.0) > 0.0,
            contractive: rho < 1.0,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsgtFlags {
    pub alpha_feasible: bool,
    pub betas_positive: bool,
    pub gamma_above_three_halves: bool,
    pub det_positive: bool,
    pub contractive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsgtReport {
    pub alpha: f64,
    pub alpha_max: f64,
    pub eta: f64,
    pub matrix: [[f64; 3]; 3],
    pub beta1: f64,
    pub beta2: f64,
    pub spectral_radius: f64,
    pub rate_bound: f64,
    pub limits: LimitBounds,
    pub flags: GsgtFlags,
}

pub fn gsgt_report(i: &TheoryInputs, alpha: f64) -> GsgtReport {
    let ag = gsgt_matrix_ag(i, alpha);
    let rho = spectral_radius_3x3(&ag.a);
    let alpha_max = gsgt_alpha_max(i);
    GsgtReport {
        alpha,
        alpha_max,
        eta: gossip_eta(i),
        matrix: rows(&ag.a),
        beta1: ag.beta1,
        beta2: ag.beta2,
        spectral_radius: rho,
        rate_bound: gsgt_rate_bound(i, alpha).bound,
        limits: gsgt_limit_bounds(i, alpha),
        flags: GsgtFlags {
            alpha_feasible: alpha <= alpha_max,
            betas_positive: ag.betas_positive(),
            gamma_above_three_halves: i.gamma > 1.5,
            det_positive: det_shifted(&ag.a, 1.0) > 0.0,
            contractive: rho < 1.0,
        },
    }
}

/// Diminishing-stepsize part of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiminishingReport {
    pub condition: MCondition,
    pub envelope_coefficient: f64,
}

/// All evaluated bounds for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub norm: NormConvention,
    /// Where `σ²` came from (exact for quad, estimated for ridge).
    pub sigma2_source: String,
    pub consensus_inputs: Option<TheoryInputs>,
    pub gossip_inputs: Option<TheoryInputs>,
    pub dsgt: Vec<DsgtReport>,
    pub gsgt: Vec<GsgtReport>,
    pub diminishing: Vec<DiminishingReport>,
    pub cost: Option<CostModel>,
    pub notes: Vec<String>,
}

impl TheoryReport {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("report serializes")
    }

    /// Flat `key=value` lines; array elements are indexed, unbounded and
    /// absent values print as `inf` and `none`.
    pub fn to_key_values(&self) -> String {
        let mut out = Vec::new();
        flatten("", &self.to_json(), &mut out);
        out.join("\n") + "\n"
    }
}

pub(crate) fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(&join(k), v, out);
            }
        }
        Value::Array(items) => {
            for (idx, v) in items.iter().enumerate() {
                flatten(&join(&idx.to_string()), v, out);
            }
        }
        Value::Null => {
            let unbounded = prefix.contains("alpha_terms") || prefix.ends_with("beta") || prefix.contains("beta0") || prefix.contains("cond2_lhs");
            out.push(format!("{prefix}={}", if unbounded { "inf" } else { "none" }));
        }
        Value::String(s) => out.push(format!("{prefix}={s}")),
        other => out.push(format!("{prefix}={other}")),
    }
}
