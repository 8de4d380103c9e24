//! Flat `key = value` experiment configuration.
//!
//! `#` starts a comment. Recognised keys:
//!
//! | key | value | default |
//! |---|---|---|
//! | `problem` | `ridge:p=..,lambda=..` or `quad:p=..,mu=..,L=..,sigma=..,spread=..` | required |
//! | `agents` | number of agents | required |
//! | `topology` | `ring`, `path`, `lattice:RxC`, `complete`, `er:PROB:SEED` | required |
//! | `weights` | `lazy` or `metropolis` | `lazy` |
//! | `algorithms` | comma list of `dsgt`, `gsgt`, `dsg`, `csg` | required |
//! | `stepsize` | `;`-separated list of `const:α` / `dim:theta=θ,m=m` | required |
//! | `steps`, `replicas`, `record_every` | positive integers | `1000`, `1`, `1` |
//! | `seed` | master seed | `0` |
//! | `output` | output directory | `out` |
//! | `gamma` | `Γ > 1` used in bounds | `2` |
//! | `enforce_feasibility` | reject constant stepsizes above the bound | `false` |
//! | `x0` | `zero`, `optimum` or `point:v1;v2;..` | `zero` |
//! | `epsilon` | accuracy target of the cost model | `0.001` |
//! | `norm` | `frobenius` or `spectral` for `‖W − I‖` | `frobenius` |
//! | `resample_graph` | draw a fresh random graph per replica | `false` |
//! | `sigma2_radius`, `sigma2_samples` | trust region for estimating `σ²` | `1`, `2000` |
//! | `check_tracking` | measure the tracking identity every step | `false` |
//!
//! `stepsize`, `steps`, `replicas` and `record_every` accept per-algorithm
//! overrides such as `steps.gsgt = 15000`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::engine::{AlgorithmKind, InitialPoint, StepsizePolicy};
use crate::network::Topology;
use crate::oracle::ProblemSpec;
use crate::theory::NormConvention;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn line_err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Line { line, message: message.into() }
}

/// Mixing weight rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightRule {
    #[default]
    LazyMetropolis,
    Metropolis,
}

impl WeightRule {
    pub fn is_lazy(self) -> bool {
        self == Self::LazyMetropolis
    }
}

impl fmt::Display for WeightRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LazyMetropolis => "lazy",
            Self::Metropolis => "metropolis",
        })
    }
}

impl FromStr for WeightRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lazy" => Ok(Self::LazyMetropolis),
            "metropolis" => Ok(Self::Metropolis),
            _ => Err(format!("unknown weight rule `{s}`")),
        }
    }
}

/// A setting with optional per-algorithm overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct PerAlgorithm<T> {
    pub default: T,
    pub overrides: BTreeMap<AlgorithmKind, T>,
}

impl<T: Clone> PerAlgorithm<T> {
    pub fn new(default: T) -> Self {
        Self { default, overrides: BTreeMap::new() }
    }

    pub fn get(&self, alg: AlgorithmKind) -> &T {
        self.overrides.get(&alg).unwrap_or(&self.default)
    }

    pub fn set_all(&mut self, v: T) {
        self.default = v;
        self.overrides.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub agents: usize,
    pub topology: Topology,
    pub weights: WeightRule,
    pub algorithms: Vec<AlgorithmKind>,
    pub stepsize: PerAlgorithm<Vec<StepsizePolicy>>,
    pub steps: PerAlgorithm<u64>,
    pub replicas: PerAlgorithm<u32>,
    pub record_every: PerAlgorithm<u64>,
    pub seed: u64,
    pub output: PathBuf,
    pub gamma: f64,
    pub enforce_feasibility: bool,
    pub x0: InitialPoint,
    pub epsilon: f64,
    pub norm: NormConvention,
    pub resample_graph: bool,
    pub sigma2_radius: f64,
    pub sigma2_samples: usize,
    pub check_tracking: bool,
}

fn parse_policies(v: &str) -> Result<Vec<StepsizePolicy>, String> {
    let list: Result<Vec<_>, _> = v
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<StepsizePolicy>().map_err(|e| e.to_string()))
        .collect();
    let list = list?;
    if list.is_empty() {
        return Err("empty stepsize list".into());
    }
    Ok(list)
}

fn render_policies(v: &[StepsizePolicy]) -> String {
    v.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; ")
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_num<T: FromStr>(v: &str, what: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad {what} `{v}`"))
}

const SCALAR_KEYS: [&str; 17] = [
    "problem",
    "agents",
    "topology",
    "weights",
    "algorithms",
    "stepsize",
    "steps",
    "replicas",
    "record_every",
    "seed",
    "output",
    "gamma",
    "enforce_feasibility",
    "x0",
    "epsilon",
    "norm",
    "resample_graph",
];

const EXTRA_KEYS: [&str; 3] = ["sigma2_radius", "sigma2_samples", "check_tracking"];

const OVERRIDABLE: [&str; 4] = ["stepsize", "steps", "replicas", "record_every"];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut entries: Vec<(usize, String, Option<AlgorithmKind>, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| line_err(line, "expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(first) = seen.insert(k.to_string(), line) {
                return Err(line_err(line, format!("duplicate key `{k}` (first set on line {first})")));
            }
            let (base, alg) = match k.split_once('.') {
                Some((base, alg)) => {
                    if !OVERRIDABLE.contains(&base) {
                        return Err(line_err(line, format!("key `{base}` has no per-algorithm form")));
                    }
                    let alg = alg.parse::<AlgorithmKind>().map_err(|_| line_err(line, format!("unknown algorithm `{alg}`")))?;
                    (base, Some(alg))
                }
                None => (k, None),
            };
            if !SCALAR_KEYS.contains(&base) && !EXTRA_KEYS.contains(&base) {
                return Err(line_err(line, format!("unknown key `{base}`")));
            }
            entries.push((line, base.to_string(), alg, v.to_string()));
        }

        let mut problem = None;
        let mut agents = None;
        let mut topology = None;
        let mut algorithms = None;
        let mut stepsize: Option<PerAlgorithm<Vec<StepsizePolicy>>> = None;
        let mut steps = PerAlgorithm::new(1000u64);
        let mut replicas = PerAlgorithm::new(1u32);
        let mut record_every = PerAlgorithm::new(1u64);
        let mut step_overrides = BTreeMap::new();
        let mut cfg_weights = WeightRule::default();
        let mut seed = 0u64;
        let mut output = PathBuf::from("out");
        let mut gamma = crate::theory::DEFAULT_GAMMA;
        let mut enforce = false;
        let mut x0 = InitialPoint::Zero;
        let mut epsilon = 1e-3;
        let mut norm = NormConvention::default();
        let mut resample = false;
        let mut sigma2_radius = 1.0_f64;
        let mut sigma2_samples = 2000usize;
        let mut check_tracking = false;

        for (line, key, alg, v) in &entries {
            let at = |m: String| line_err(*line, m);
            match (key.as_str(), alg) {
                ("stepsize", None) => {
                    let d = parse_policies(v).map_err(at)?;
                    stepsize = Some(PerAlgorithm::new(d));
                }
                ("stepsize", Some(a)) => {
                    step_overrides.insert(*a, parse_policies(v).map_err(at)?);
                }
                ("steps", a) => {
                    let n: u64 = parse_num(v, "step count").map_err(at)?;
                    if n == 0 {
                        return Err(at("steps must be at least 1".into()));
                    }
                    match a {
                        Some(a) => {
                            steps.overrides.insert(*a, n);
                        }
                        None => steps.default = n,
                    }
                }
                ("replicas", a) => {
                    let n: u32 = parse_num(v, "replica count").map_err(at)?;
                    if n == 0 {
                        return Err(at("replicas must be at least 1".into()));
                    }
                    match a {
                        Some(a) => {
                            replicas.overrides.insert(*a, n);
                        }
                        None => replicas.default = n,
                    }
                }
                ("record_every", a) => {
                    let n: u64 = parse_num(v, "record interval").map_err(at)?;
                    if n == 0 {
                        return Err(at("record_every must be at least 1".into()));
                    }
                    match a {
                        Some(a) => {
                            record_every.overrides.insert(*a, n);
                        }
                        None => record_every.default = n,
                    }
                }
                ("problem", _) => problem = Some(v.parse::<ProblemSpec>().map_err(|e| at(e.to_string()))?),
                ("agents", _) => {
                    let n: usize = parse_num(v, "agent count").map_err(at)?;
                    if n == 0 {
                        return Err(at("agents must be at least 1".into()));
                    }
                    agents = Some(n);
                }
                ("topology", _) => topology = Some(v.parse::<Topology>().map_err(|e| at(e.to_string()))?),
                ("weights", _) => cfg_weights = v.parse().map_err(at)?,
                ("algorithms", _) => {
                    let list: Result<Vec<AlgorithmKind>, _> =
                        v.split(',').map(|s| s.trim().parse::<AlgorithmKind>()).collect();
                    let list = list.map_err(|e| at(e.to_string()))?;
                    if list.is_empty() {
                        return Err(at("no algorithms listed".into()));
                    }
                    let mut dedup = list.clone();
                    dedup.sort();
                    dedup.dedup();
                    if dedup.len() != list.len() {
                        return Err(at("algorithm listed twice".into()));
                    }
                    algorithms = Some(list);
                }
                ("seed", _) => seed = parse_num(v, "seed").map_err(at)?,
                ("output", _) => output = PathBuf::from(v),
                ("gamma", _) => {
                    gamma = parse_num(v, "gamma").map_err(at)?;
                    if !(gamma > 1.0 && gamma.is_finite()) {
                        return Err(at(format!("gamma must exceed 1 (got {gamma})")));
                    }
                }
                ("enforce_feasibility", _) => enforce = parse_bool(v).map_err(at)?,
                ("x0", _) => x0 = v.parse().map_err(|e: crate::engine::EngineError| at(e.to_string()))?,
                ("epsilon", _) => {
                    epsilon = parse_num(v, "epsilon").map_err(at)?;
                    if !(epsilon > 0.0 && epsilon < 1.0) {
                        return Err(at(format!("epsilon must lie in (0, 1) (got {epsilon})")));
                    }
                }
                ("norm", _) => norm = v.parse().map_err(|e: crate::theory::TheoryError| at(e.to_string()))?,
                ("resample_graph", _) => resample = parse_bool(v).map_err(at)?,
                ("sigma2_radius", _) => {
                    sigma2_radius = parse_num(v, "radius").map_err(at)?;
                    if !(sigma2_radius >= 0.0 && sigma2_radius.is_finite()) {
                        return Err(at("sigma2_radius must be finite and nonnegative".into()));
                    }
                }
                ("sigma2_samples", _) => {
                    sigma2_samples = parse_num(v, "sample count").map_err(at)?;
                    if sigma2_samples < 1000 {
                        return Err(at("sigma2_samples must be at least 1000".into()));
                    }
                }
                ("check_tracking", _) => check_tracking = parse_bool(v).map_err(at)?,
                _ => unreachable!("key filtered above"),
            }
        }
        let mut stepsize = stepsize.ok_or(ConfigError::Missing("stepsize"))?;
        stepsize.overrides = step_overrides;
        let cfg = ExperimentConfig {
            problem: problem.ok_or(ConfigError::Missing("problem"))?,
            agents: agents.ok_or(ConfigError::Missing("agents"))?,
            topology: topology.ok_or(ConfigError::Missing("topology"))?,
            weights: cfg_weights,
            algorithms: algorithms.ok_or(ConfigError::Missing("algorithms"))?,
            stepsize,
            steps,
            replicas,
            record_every,
            seed,
            output,
            gamma,
            enforce_feasibility: enforce,
            x0,
            epsilon,
            norm,
            resample_graph: resample,
            sigma2_radius,
            sigma2_samples,
            check_tracking,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-key checks.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Topology::Lattice { rows, cols } = self.topology {
            if rows * cols != self.agents {
                return Err(ConfigError::Invalid(format!("lattice {rows}x{cols} needs {} agents", rows * cols)));
            }
        }
        for alg in self.stepsize.overrides.keys().chain(self.steps.overrides.keys()) {
            if !self.algorithms.contains(alg) {
                return Err(ConfigError::Invalid(format!("override for `{alg}`, which is not in `algorithms`")));
            }
        }
        if let InitialPoint::Point(v) = &self.x0 {
            if v.len() != self.problem.p() {
                return Err(ConfigError::Invalid(format!("x0 has {} entries, problem has p = {}", v.len(), self.problem.p())));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut out = Vec::new();
        let mut kv = |k: &str, v: String| out.push(format!("{k} = {v}"));
        kv("problem", self.problem.to_string());
        kv("agents", self.agents.to_string());
        kv("topology", self.topology.to_string());
        kv("weights", self.weights.to_string());
        kv("algorithms", self.algorithms.iter().map(|a| a.name()).collect::<Vec<_>>().join(", "));
        kv("stepsize", render_policies(&self.stepsize.default));
        for (a, v) in &self.stepsize.overrides {
            kv(&format!("stepsize.{a}"), render_policies(v));
        }
        kv("steps", self.steps.default.to_string());
        for (a, v) in &self.steps.overrides {
            kv(&format!("steps.{a}"), v.to_string());
        }
        kv("replicas", self.replicas.default.to_string());
        for (a, v) in &self.replicas.overrides {
            kv(&format!("replicas.{a}"), v.to_string());
        }
        kv("record_every", self.record_every.default.to_string());
        for (a, v) in &self.record_every.overrides {
            kv(&format!("record_every.{a}"), v.to_string());
        }
        kv("seed", self.seed.to_string());
        kv("output", self.output.display().to_string());
        kv("gamma", self.gamma.to_string());
        kv("enforce_feasibility", self.enforce_feasibility.to_string());
        kv("x0", self.x0.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("norm", self.norm.to_string());
        kv("resample_graph", self.resample_graph.to_string());
        kv("sigma2_radius", self.sigma2_radius.to_string());
        kv("sigma2_samples", self.sigma2_samples.to_string());
        kv("check_tracking", self.check_tracking.to_string());
        out.join("\n") + "\n"
    }

    /// Apply a single `key = value` override, as used by sweeps. Setting a
    /// base key clears its per-algorithm overrides, and narrowing
    /// `algorithms` drops overrides for the algorithms left out; `alpha = v`
    /// is shorthand for `stepsize = const:v`.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let (key, value) = match key {
            "alpha" => ("stepsize".to_string(), format!("const:{value}")),
            _ => (key.to_string(), value.to_string()),
        };
        let kept: Option<Vec<&str>> = (key == "algorithms").then(|| value.split(',').map(str::trim).collect());
        let mut lines: Vec<String> = self
            .render()
            .lines()
            .filter(|l| {
                let k = l.split('=').next().unwrap_or("").trim();
                let dropped_alg = match (&kept, k.split_once('.')) {
                    (Some(kept), Some((_, alg))) => !kept.contains(&alg),
                    _ => false,
                };
                k != key && !dropped_alg && !(OVERRIDABLE.contains(&key.as_str()) && k.starts_with(&format!("{key}.")))
            })
            .map(str::to_string)
            .collect();
        lines.push(format!("{key} = {value}"));
        Self::parse(&lines.join("\n"))
    }

    /// Multiply step and replica budgets (and record intervals) by `scale`,
    /// keeping each at least one.
    pub fn scaled(&self, scale: f64) -> Self {
        let f64_scale = |v: u64| ((v as f64 * scale).round() as u64).max(1);
        let mut c = self.clone();
        c.steps.default = f64_scale(c.steps.default);
        c.steps.overrides.values_mut().for_each(|v| *v = f64_scale(*v));
        c.replicas.default = f64_scale(c.replicas.default as u64) as u32;
        c.replicas.overrides.values_mut().for_each(|v| *v = f64_scale(*v as u64) as u32);
        c.record_every.default = f64_scale(c.record_every.default);
        c.record_every.overrides.values_mut().for_each(|v| *v = f64_scale(*v));
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "problem = quad:mu=1,L=4,sigma=0\nagents = 4\ntopology = ring\nalgorithms = dsgt\nstepsize = const:0.01\n";

    #[test]
    fn minimal_parses() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.agents, 4);
        assert_eq!(*c.steps.get(AlgorithmKind::Dsgt), 1000);
        assert_eq!(c.weights, WeightRule::LazyMetropolis);
    }

    #[test]
    fn zero_replicas_rejected_with_line() {
        let err = ExperimentConfig::parse(&format!("{MINIMAL}replicas = 0\n")).unwrap_err();
        assert_eq!(err, ConfigError::Line { line: 6, message: "replicas must be at least 1".into() });
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        assert!(matches!(
            ExperimentConfig::parse(&format!("{MINIMAL}colour = red\n")),
            Err(ConfigError::Line { line: 6, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse(&format!("{MINIMAL}agents = 5\n")),
            Err(ConfigError::Line { line: 6, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse(&format!("{MINIMAL}seed.dsgt = 5\n")),
            Err(ConfigError::Line { .. })
        ));
        assert_eq!(
            ExperimentConfig::parse("agents = 3\n").unwrap_err(),
            ConfigError::Missing("stepsize")
        );
    }

    #[test]
    fn round_trip_with_overrides() {
        let text = format!(
            "{MINIMAL}algorithms.x = 1\n"
        );
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = "problem = ridge:p=20,lambda=0.1\nagents = 10\ntopology = er:0.4:7\nweights = metropolis\n\
                    algorithms = dsgt, gsgt\nstepsize = const:0.005; dim:theta=2,m=10\nsteps.gsgt = 15000\n\
                    replicas.gsgt = 100\nrecord_every.gsgt = 5\nx0 = point:1;2;3;4;5;6;7;8;9;10;11;12;13;14;15;16;17;18;19;20\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&c.render()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.stepsize.default.len(), 2);
    }

    #[test]
    fn overrides_and_scaling() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let d = c.with_override("alpha", "0.02").unwrap();
        assert_eq!(d.stepsize.default, vec![StepsizePolicy::Constant(0.02)]);
        let s = c.scaled(0.1);
        assert_eq!(*s.steps.get(AlgorithmKind::Dsgt), 100);
        assert_eq!(*s.replicas.get(AlgorithmKind::Dsgt), 1);
        let two = ExperimentConfig::parse(&MINIMAL.replace("dsgt", "dsgt, gsgt").replace("const:0.01", "const:0.01\nsteps.gsgt = 9"))
            .unwrap();
        let one = two.with_override("algorithms", "dsgt").unwrap();
        assert!(one.steps.overrides.is_empty());
    }
}
