//! Running a configured experiment and writing its artifact bundle.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig};
use crate::engine::{self, AlgorithmKind, EngineError, RunOptions, StepsizePolicy};
use crate::metrics::{
    aggregate, ensemble_tail, fit_linear_rate, fmt_float, write_ensemble_csv, write_run_csv, EnsembleSummary,
    MetricsError, TrajectoryMetrics, DEFAULT_TAIL_FRACTION,
};
use crate::network::{
    build_graph, gossip_expected_matrix, gossip_probabilities, metropolis_matrix, validate_mixing, Graph,
    MixingDiagnostics, MixingKind, MixingMatrix, NetworkError, Topology,
};
use crate::oracle::{estimate_sigma2, OracleError, Problem};
use crate::rng::mix64;
use crate::theory::{
    self, check_m_condition, cost_model, dsgt_report, gsgt_report, diminishing_envelope, DiminishingReport,
    TheoryError, TheoryInputs, TheoryReport,
};

/// Rate fits ignore values below this floor, where rounding dominates.
pub const RATE_FIT_FLOOR: f64 = 1e-28;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{matrix} matrix failed validation:\n{diagnostics}")]
    Mixing { matrix: &'static str, diagnostics: MixingDiagnostics },
    #[error("{alg}: stepsize {alpha} exceeds the feasibility bound {alpha_max}")]
    Infeasible { alg: AlgorithmKind, alpha: f64, alpha_max: f64 },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl ExperimentError {
    /// Whether the error comes from the configuration rather than the
    /// environment.
    pub fn is_config(&self) -> bool {
        !matches!(self, Self::Io(_) | Self::Pool(_))
    }
}

/// Matrices derived from one graph.
#[derive(Debug, Clone)]
pub struct Networks {
    pub graph: Graph,
    pub w: MixingMatrix,
    pub pi: MixingMatrix,
    pub wbar: Option<MixingMatrix>,
    pub w_diagnostics: MixingDiagnostics,
    pub pi_diagnostics: MixingDiagnostics,
}

impl Networks {
    pub fn build(topology: Topology, n: usize, lazy: bool) -> Result<Self, ExperimentError> {
        let graph = build_graph(topology, n)?;
        let w = metropolis_matrix(&graph, lazy, MixingKind::Consensus);
        let pi = gossip_probabilities(&graph, lazy)?;
        let w_diagnostics = validate_mixing(&w, &graph);
        let pi_diagnostics = validate_mixing(&pi, &graph);
        let wbar = gossip_expected_matrix(&pi).ok();
        Ok(Self { graph, w, pi, wbar, w_diagnostics, pi_diagnostics })
    }

    /// The matrix `alg` consumes, after checking its diagnostics.
    pub fn for_algorithm(&self, alg: AlgorithmKind) -> Result<Option<&MixingMatrix>, ExperimentError> {
        match alg.mixing_kind() {
            None => Ok(None),
            Some(MixingKind::Gossip) if !self.pi_diagnostics.passed || self.wbar.is_none() => {
                Err(ExperimentError::Mixing { matrix: "gossip", diagnostics: self.pi_diagnostics.clone() })
            }
            Some(MixingKind::Gossip) => Ok(Some(&self.pi)),
            Some(_) if !self.w_diagnostics.passed => {
                Err(ExperimentError::Mixing { matrix: "consensus", diagnostics: self.w_diagnostics.clone() })
            }
            Some(_) => Ok(Some(&self.w)),
        }
    }
}

/// Everything fixed before the first replica runs.
#[derive(Debug, Clone)]
pub struct Setup {
    pub problem: Problem,
    pub networks: Networks,
    pub sigma2: f64,
    pub theory: TheoryReport,
    pub config_hash: String,
}

/// SHA-256 of the rendered configuration, ignoring where output goes.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output = PathBuf::new();
    let digest = Sha256::digest(c.render().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build problem, networks and theory report; fails on anything the
/// configuration gets wrong.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup, ExperimentError> {
    cfg.validate()?;
    let problem = cfg.problem.build(cfg.agents, cfg.seed)?;
    let networks = Networks::build(cfg.topology, cfg.agents, cfg.weights.is_lazy())?;
    for &alg in &cfg.algorithms {
        networks.for_algorithm(alg)?;
    }
    let (sigma2, source) = match problem.known_sigma2() {
        Some(s) => (s, "exact".to_string()),
        None => {
            let est = estimate_sigma2(&problem, problem.optimum(), cfg.sigma2_radius, cfg.sigma2_samples, cfg.seed)?;
            let src = format!(
                "estimated: {} samples within radius {} of the optimum, se {}",
                est.samples, est.radius, est.se
            );
            (est.value, src)
        }
    };
    let theory = theory_report(cfg, &problem, &networks, sigma2, source)?;
    let setup = Setup { problem, networks, sigma2, theory, config_hash: config_hash(cfg) };
    if cfg.enforce_feasibility {
        check_feasibility(cfg, &setup)?;
    }
    Ok(setup)
}

fn all_policies(cfg: &ExperimentConfig) -> Vec<StepsizePolicy> {
    let mut out: Vec<StepsizePolicy> = Vec::new();
    for &alg in &cfg.algorithms {
        for p in cfg.stepsize.get(alg) {
            if !out.contains(p) {
                out.push(*p);
            }
        }
    }
    out
}

fn theory_report(
    cfg: &ExperimentConfig,
    pr: &Problem,
    nets: &Networks,
    sigma2: f64,
    sigma2_source: String,
) -> Result<TheoryReport, ExperimentError> {
    let (mu, l) = pr.convexity_constants();
    let mut notes = Vec::new();
    let consensus = TheoryInputs::for_consensus(mu, l, sigma2, &nets.w, cfg.norm, cfg.gamma);
    let consensus = match consensus.validate() {
        Ok(()) => Some(consensus),
        Err(e) => {
            notes.push(format!("consensus bounds skipped: {e}"));
            None
        }
    };
    let gossip = nets.wbar.as_ref().map(|wb| TheoryInputs::for_gossip(mu, l, sigma2, wb, cfg.gamma));
    let gossip = match gossip.map(|g| g.validate().map(|_| g)) {
        Some(Ok(g)) => Some(g),
        Some(Err(e)) => {
            notes.push(format!("gossip bounds skipped: {e}"));
            None
        }
        None => {
            notes.push("gossip bounds skipped: no expected gossip matrix".into());
            None
        }
    };
    let mut dsgt = Vec::new();
    let mut gsgt = Vec::new();
    let mut diminishing = Vec::new();
    for policy in all_policies(cfg) {
        match policy {
            StepsizePolicy::Constant(alpha) => {
                if let Some(i) = &consensus {
                    dsgt.push(dsgt_report(i, alpha));
                }
                if let Some(i) = &gossip {
                    gsgt.push(gsgt_report(i, alpha));
                }
            }
            StepsizePolicy::Diminishing { theta, m } => match &consensus {
                Some(i) => match (check_m_condition(theta, m, i), diminishing_envelope(theta, m, i, 0)) {
                    (Ok(condition), Ok(env)) => {
                        diminishing.push(DiminishingReport { condition, envelope_coefficient: env.coefficient })
                    }
                    (Err(e), _) | (_, Err(e)) => notes.push(format!("{policy}: {e}")),
                },
                None => notes.push(format!("{policy}: no consensus inputs")),
            },
        }
    }
    let cost = match &gossip {
        Some(g) => match cost_model(cfg.epsilon, pr.n(), mu, sigma2, nets.graph.edge_count(), g.rho) {
            Ok(c) => Some(c),
            Err(e) => {
                notes.push(format!("cost model skipped: {e}"));
                None
            }
        },
        None => None,
    };
    Ok(TheoryReport {
        norm: cfg.norm,
        sigma2_source,
        consensus_inputs: consensus,
        gossip_inputs: gossip,
        dsgt,
        gsgt,
        diminishing,
        cost,
        notes,
    })
}

fn check_feasibility(cfg: &ExperimentConfig, setup: &Setup) -> Result<(), ExperimentError> {
    for &alg in &cfg.algorithms {
        for policy in cfg.stepsize.get(alg) {
            let alpha = match policy {
                StepsizePolicy::Constant(a) => *a,
                StepsizePolicy::Diminishing { .. } => policy.at(0),
            };
            let alpha_max = match alg {
                AlgorithmKind::Dsgt => setup.theory.consensus_inputs.as_ref().map(theory::dsgt_alpha_max),
                AlgorithmKind::Gsgt => setup.theory.gossip_inputs.as_ref().map(theory::gsgt_alpha_max),
                _ => None,
            };
            if let Some(alpha_max) = alpha_max {
                if alpha > alpha_max {
                    return Err(ExperimentError::Infeasible { alg, alpha, alpha_max });
                }
            }
        }
    }
    Ok(())
}

/// Ensemble of one (policy, algorithm) pair.
#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub algorithm: AlgorithmKind,
    pub policy: StepsizePolicy,
    pub runs: Vec<TrajectoryMetrics>,
    /// Absent when every replica diverged.
    pub summary: Option<EnsembleSummary>,
}

impl EnsembleOutcome {
    pub fn all_diverged(&self) -> bool {
        self.runs.iter().all(|r| r.halted.is_some())
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub config: ExperimentConfig,
    pub setup: Setup,
    pub ensembles: Vec<EnsembleOutcome>,
    pub summary: Summary,
}

impl Outcome {
    pub fn ensemble(&self, alg: AlgorithmKind, policy: &StepsizePolicy) -> Option<&EnsembleOutcome> {
        self.ensembles.iter().find(|e| e.algorithm == alg && e.policy == *policy)
    }

    pub fn any_all_diverged(&self) -> bool {
        self.ensembles.iter().any(EnsembleOutcome::all_diverged)
    }
}

/// Replica `r` of a graph that is redrawn per replica.
fn replica_topology(t: Topology, replica: u32) -> Topology {
    match t {
        Topology::ErdosRenyi { prob, seed } => {
            Topology::ErdosRenyi { prob, seed: mix64(seed ^ mix64(u64::from(replica) + 1)) }
        }
        other => other,
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, ExperimentError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))
}

/// Run every replica of every (policy, algorithm) pair on `jobs` threads.
/// Results are collected in replica order, so the outcome does not depend
/// on `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Outcome, ExperimentError> {
    let setup = prepare(cfg)?;
    let pool = thread_pool(jobs)?;
    let mut ensembles = Vec::new();
    for policy in all_policies(cfg) {
        for &alg in &cfg.algorithms {
            if !cfg.stepsize.get(alg).contains(&policy) {
                continue;
            }
            let replicas = *cfg.replicas.get(alg);
            let one = |replica: u32| -> Result<TrajectoryMetrics, ExperimentError> {
                let owned;
                let nets = if cfg.resample_graph && matches!(cfg.topology, Topology::ErdosRenyi { .. }) {
                    owned = Networks::build(replica_topology(cfg.topology, replica), cfg.agents, cfg.weights.is_lazy())?;
                    &owned
                } else {
                    &setup.networks
                };
                let opts = RunOptions {
                    steps: *cfg.steps.get(alg),
                    seed: cfg.seed,
                    replica,
                    record_every: *cfg.record_every.get(alg),
                    x0: cfg.x0.clone(),
                    check_tracking: cfg.check_tracking,
                };
                Ok(engine::run(alg, &setup.problem, nets.for_algorithm(alg)?, &policy, &opts, &mut |_| {})?)
            };
            let runs: Result<Vec<_>, _> = pool.install(|| (0..replicas).into_par_iter().map(one).collect());
            let runs = runs?;
            let summary = match aggregate(&runs) {
                Ok(s) => Some(s),
                Err(MetricsError::AllHalted(_)) => None,
                Err(e) => return Err(e.into()),
            };
            ensembles.push(EnsembleOutcome { algorithm: alg, policy, runs, summary });
        }
    }
    let summary = summarize(&setup, &ensembles);
    Ok(Outcome { config: cfg.clone(), setup, ensembles, summary })
}

/// Tail estimate of one metric, optionally against a bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailCheck {
    pub metric: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub bound: Option<f64>,
    /// `estimate + 3·se ≤ bound`.
    pub within_bound: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCheck {
    pub fitted_ratio: f64,
    pub residual: f64,
    pub points: usize,
    pub spectral_radius: Option<f64>,
    pub rate_bound: Option<f64>,
    /// `fitted_ratio ≤ spectral_radius + 0.01`.
    pub consistent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HaltRecord {
    pub replica: u32,
    pub k: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleReport {
    pub algorithm: AlgorithmKind,
    pub policy: String,
    pub replicas: usize,
    pub halted: usize,
    pub all_diverged: bool,
    pub halts: Vec<HaltRecord>,
    pub tails: Vec<TailCheck>,
    pub final_grad_evals: Option<f64>,
    pub final_messages: Option<f64>,
    pub final_bound_messages: Option<f64>,
    pub final_payload_vectors: Option<f64>,
    pub max_tracking_deviation: Option<f64>,
    pub rate: Option<RateCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config_hash: String,
    pub sigma2: f64,
    pub tail_fraction: f64,
    pub ensembles: Vec<EnsembleReport>,
}

impl Summary {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("summary serializes")
    }

    pub fn to_key_values(&self) -> String {
        let mut out = Vec::new();
        theory::flatten("", &self.to_json(), &mut out);
        out.join("\n") + "\n"
    }

    pub fn get(&self, alg: AlgorithmKind, policy: &StepsizePolicy) -> Option<&EnsembleReport> {
        let label = policy.to_string();
        self.ensembles.iter().find(|e| e.algorithm == alg && e.policy == label)
    }
}

impl EnsembleReport {
    pub fn tail(&self, metric: &str) -> Option<&TailCheck> {
        self.tails.iter().find(|t| t.metric == metric)
    }
}

fn summarize(setup: &Setup, ensembles: &[EnsembleOutcome]) -> Summary {
    let reports = ensembles.iter().map(|e| ensemble_report(setup, e)).collect();
    Summary {
        config_hash: setup.config_hash.clone(),
        sigma2: setup.sigma2,
        tail_fraction: DEFAULT_TAIL_FRACTION,
        ensembles: reports,
    }
}

fn ensemble_report(setup: &Setup, e: &EnsembleOutcome) -> EnsembleReport {
    let alpha = match e.policy {
        StepsizePolicy::Constant(a) => Some(a),
        StepsizePolicy::Diminishing { .. } => None,
    };
    let matches = |a: f64| alpha == Some(a);
    let (bounds, radius, rate_bound) = match e.algorithm {
        AlgorithmKind::Dsgt => match setup.theory.dsgt.iter().find(|r| matches(r.alpha)) {
            Some(r) => (Some(r.limits), Some(r.spectral_radius), Some(r.rate_bound)),
            None => (None, None, None),
        },
        AlgorithmKind::Gsgt => match setup.theory.gsgt.iter().find(|r| matches(r.alpha)) {
            Some(r) => (Some(r.limits), Some(r.spectral_radius), Some(r.rate_bound)),
            None => (None, None, None),
        },
        _ => (None, None, None),
    };
    let mut tails = Vec::new();
    if e.summary.is_some() {
        for (metric, bound) in [
            ("opt_err", bounds.map(|b| b.opt)),
            ("consensus_err", bounds.map(|b| b.consensus)),
            ("per_agent_mean_err", None),
        ] {
            if let Ok(t) = ensemble_tail(&e.runs, metric, DEFAULT_TAIL_FRACTION) {
                let within_bound = bound.map(|b| t.estimate + 3.0 * t.se.unwrap_or(0.0) <= b);
                tails.push(TailCheck { metric: metric.to_string(), estimate: t.estimate, se: t.se, bound, within_bound });
            }
        }
    }
    let last = |name: &str| e.summary.as_ref().and_then(|s| s.mean(name).last().copied());
    let max_tracking_deviation = e
        .runs
        .iter()
        .filter_map(|r| r.max_tracking_deviation)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let noiseless = setup.problem.known_sigma2() == Some(0.0);
    let rate = match (&e.summary, noiseless) {
        (Some(s), true) => rate_check(s, radius, rate_bound),
        _ => None,
    };
    EnsembleReport {
        algorithm: e.algorithm,
        policy: e.policy.to_string(),
        replicas: e.runs.len(),
        halted: e.runs.iter().filter(|r| r.halted.is_some()).count(),
        all_diverged: e.all_diverged(),
        halts: e
            .runs
            .iter()
            .filter_map(|r| {
                r.halted.as_ref().map(|h| HaltRecord { replica: r.replica, k: h.k, reason: h.to_string() })
            })
            .collect(),
        tails,
        final_grad_evals: last("grad_evals"),
        final_messages: last("messages"),
        final_bound_messages: last("bound_messages"),
        final_payload_vectors: last("payload_vectors"),
        max_tracking_deviation,
        rate,
    }
}

/// Log-linear fit of the mean total error over its leading stretch above
/// [`RATE_FIT_FLOOR`].
pub fn rate_check(s: &EnsembleSummary, radius: Option<f64>, rate_bound: Option<f64>) -> Option<RateCheck> {
    let err = s.mean("per_agent_mean_err");
    let len = err.iter().position(|v| !(v.is_finite() && *v > RATE_FIT_FLOOR)).unwrap_or(err.len());
    if len < 2 {
        return None;
    }
    let ks: Vec<f64> = s.ks[..len].iter().map(|&k| k as f64).collect();
    let fit = fit_linear_rate(&ks, &err[..len]).ok()?;
    Some(RateCheck {
        fitted_ratio: fit.ratio,
        residual: fit.residual,
        points: len,
        spectral_radius: radius,
        rate_bound,
        consistent: radius.map(|r| fit.ratio <= r + 0.01),
    })
}

fn csv_header(outcome: &Outcome, alg: AlgorithmKind, policy: &StepsizePolicy) -> Vec<String> {
    let cfg = &outcome.config;
    vec![
        format!("gradtrack {}", env!("CARGO_PKG_VERSION")),
        format!("config_sha256={}", outcome.setup.config_hash),
        format!("algorithm={alg}"),
        format!("policy={policy}"),
        format!("seed={}", cfg.seed),
        format!("steps={}", cfg.steps.get(alg)),
        format!("replicas={}", cfg.replicas.get(alg)),
    ]
}

fn create(path: &Path) -> io::Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> io::Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())?;
    f.flush()
}

/// Write the artifact bundle under `dir`:
///
/// ```text
/// config.cfg  theory.txt  theory.json  summary.txt  summary.json
/// <policy>/<algorithm>/run_000.csv ... ensemble.csv projections.csv
/// ```
pub fn write_artifacts(outcome: &Outcome, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_text(&dir.join("config.cfg"), &outcome.config.render())?;
    write_text(&dir.join("theory.txt"), &outcome.setup.theory.to_key_values())?;
    write_text(&dir.join("theory.json"), &pretty(&outcome.setup.theory.to_json()))?;
    write_text(&dir.join("summary.txt"), &outcome.summary.to_key_values())?;
    write_text(&dir.join("summary.json"), &pretty(&outcome.summary.to_json()))?;
    for e in &outcome.ensembles {
        let sub = ensemble_dir(dir, e.algorithm, &e.policy);
        let header = csv_header(outcome, e.algorithm, &e.policy);
        let width = e.runs.len().saturating_sub(1).to_string().len().max(3);
        for run in &e.runs {
            let mut h = header.clone();
            h.push(format!("replica={}", run.replica));
            h.push(format!("stream_key=({}, {})", run.seed, run.replica));
            if let Some(halt) = &run.halted {
                h.push(format!("halted={halt}"));
            }
            let mut f = create(&sub.join(format!("run_{:0width$}.csv", run.replica)))?;
            write_run_csv(&mut f, run, &h)?;
            f.flush()?;
        }
        if let Some(s) = &e.summary {
            let mut f = create(&sub.join("ensemble.csv"))?;
            write_ensemble_csv(&mut f, s, &header)?;
            f.flush()?;
            let mut f = create(&sub.join("projections.csv"))?;
            write_projections(&mut f, s, &header)?;
            f.flush()?;
        }
    }
    Ok(())
}

pub fn ensemble_dir(root: &Path, alg: AlgorithmKind, policy: &StepsizePolicy) -> PathBuf {
    root.join(policy.label()).join(alg.name())
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json renders") + "\n"
}

/// Mean error curves re-indexed by cumulative gradient evaluations and
/// messages, with `epoch = k/n`.
fn write_projections<W: Write>(mut w: W, s: &EnsembleSummary, header: &[String]) -> io::Result<()> {
    for h in header {
        writeln!(w, "# {h}")?;
    }
    writeln!(w, "k,epoch,grad_evals,messages,bound_messages,payload_vectors,opt_err,per_agent_mean_err")?;
    let n = s.mean("grad_evals").first().copied().unwrap_or(1.0).max(1.0);
    let cols = ["grad_evals", "messages", "bound_messages", "payload_vectors", "opt_err", "per_agent_mean_err"];
    for (t, k) in s.ks.iter().enumerate() {
        let mut line = format!("{k},{}", fmt_float(*k as f64 / n));
        for c in cols {
            line.push(',');
            line.push_str(&fmt_float(s.mean(c)[t]));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
