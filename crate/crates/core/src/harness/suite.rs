//! Parameter sweeps and the canned three-instance ridge study.

use std::path::{Path, PathBuf};

use super::config::{ConfigError, ExperimentConfig};
use super::experiment::{run_experiment, write_artifacts, ExperimentError, Outcome};

/// Shipped study configurations, `n ∈ {10, 25, 100}`.
pub const FIG1_CONFIGS: [(&str, &str); 3] = [
    ("fig1_n10", include_str!("../../configs/fig1_n10.cfg")),
    ("fig1_n25", include_str!("../../configs/fig1_n25.cfg")),
    ("fig1_n100", include_str!("../../configs/fig1_n100.cfg")),
];

pub fn fig1_config(name: &str) -> Option<ExperimentConfig> {
    FIG1_CONFIGS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ExperimentConfig::parse(text).expect("shipped config parses"))
}

/// `key=v1,v2,...`; use `|` between values that themselves contain commas.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for SweepAxis {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| ConfigError::Invalid(format!("sweep axis `{s}`: {m}"));
        let (key, rest) = s.split_once('=').ok_or_else(|| bad("expected key=v1,v2,..."))?;
        let sep = if rest.contains('|') { '|' } else { ',' };
        let values: Vec<String> =
            rest.split(sep).map(str::trim).filter(|v| !v.is_empty()).map(str::to_string).collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(bad("empty key or value list"));
        }
        Ok(Self { key: key.trim().to_string(), values })
    }
}

/// Directory name for one sweep value.
pub fn sweep_dir_name(key: &str, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{key}_{clean}")
}

/// One configuration per axis value, each writing below `cfg.output`.
pub fn sweep_configs(cfg: &ExperimentConfig, axis: &SweepAxis) -> Result<Vec<ExperimentConfig>, ConfigError> {
    axis.values
        .iter()
        .map(|v| {
            let mut c = cfg.with_override(&axis.key, v)?;
            c.output = cfg.output.join(sweep_dir_name(&axis.key, v));
            Ok(c)
        })
        .collect()
}

/// Run and write one configuration into its `output` directory.
pub fn run_and_write(cfg: &ExperimentConfig, jobs: usize) -> Result<Outcome, ExperimentError> {
    let outcome = run_experiment(cfg, jobs)?;
    write_artifacts(&outcome, &cfg.output)?;
    Ok(outcome)
}

pub fn run_sweep(cfg: &ExperimentConfig, axis: &SweepAxis, jobs: usize) -> Result<Vec<Outcome>, ExperimentError> {
    sweep_configs(cfg, axis)?.iter().map(|c| run_and_write(c, jobs)).collect()
}

/// The three shipped instances, budgets scaled by `scale`, written to
/// `root/<name>`.
pub fn fig1_configs(scale: f64, root: &Path) -> Result<Vec<ExperimentConfig>, ConfigError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(ConfigError::Invalid(format!("scale must be positive (got {scale})")));
    }
    FIG1_CONFIGS
        .iter()
        .map(|(name, text)| {
            let mut c = ExperimentConfig::parse(text)?.scaled(scale);
            c.output = root.join(name);
            Ok(c)
        })
        .collect()
}

pub fn run_fig1(scale: f64, root: &Path, jobs: usize) -> Result<Vec<Outcome>, ExperimentError> {
    fig1_configs(scale, root)?.iter().map(|c| run_and_write(c, jobs)).collect()
}

pub fn default_fig1_root() -> PathBuf {
    PathBuf::from("out")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{AlgorithmKind, StepsizePolicy};

    #[test]
    fn axis_grammar() {
        let a: SweepAxis = "alpha=0.01,0.02".parse().unwrap();
        assert_eq!(a.values, vec!["0.01", "0.02"]);
        let b: SweepAxis = "problem=quad:mu=1,L=4,sigma=0|quad:mu=1,L=9,sigma=0".parse().unwrap();
        assert_eq!(b.values.len(), 2);
        assert!("alpha".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn sweep_gives_one_directory_per_value() {
        let cfg = fig1_config("fig1_n10").unwrap();
        let axis: SweepAxis = "alpha=0.001,0.002,0.003".parse().unwrap();
        let cs = sweep_configs(&cfg, &axis).unwrap();
        assert_eq!(cs.len(), 3);
        assert_eq!(cs[1].stepsize.get(AlgorithmKind::Dsgt), &vec![StepsizePolicy::Constant(0.002)]);
        assert_eq!(cs[2].output, cfg.output.join("alpha_0.003"));
    }

    #[test]
    fn shipped_configs_parse() {
        for (name, _) in FIG1_CONFIGS {
            assert!(fig1_config(name).is_some(), "{name}");
        }
    }
}
