//! `builtin:<name>` aliases and structured-text loaders for specs, mixings and configs.

use std::path::Path;

use inviv::pipeline::{TrainConfig, MIXING_SEED};
use inviv::simgen::{d2_spec, three_env_spec, CounterexampleKind, MixingSpec, ScmSpec};

use crate::error::CliError;

const PREFIX: &str = "builtin:";

/// A resolved `--spec` argument.
#[derive(Clone, Debug)]
pub enum SpecSource {
    Scm(ScmSpec),
    Counterexample(CounterexampleKind),
}

pub const SPEC_ALIASES: [&str; 4] = ["builtin:d2", "builtin:d3_threeenv", "builtin:c4", "builtin:c5"];
pub const MIXING_ALIASES: [&str; 4] = ["builtin:poly1", "builtin:poly2", "builtin:poly3", "builtin:mlp"];
pub const CONFIG_ALIASES: [&str; 1] = ["builtin:d2_default"];

fn read_text(path: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {path}: {e}")))
}

/// Parses TOML into `T`; unknown keys are rejected by the target types.
fn parse_toml<T: serde::de::DeserializeOwned>(path: &str, what: &str) -> Result<T, CliError> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid {what} file {path}: {e}")))
}

pub fn load_spec(arg: &str) -> Result<SpecSource, CliError> {
    if let Some(name) = arg.strip_prefix(PREFIX) {
        return match name {
            "d2" => Ok(SpecSource::Scm(d2_spec())),
            "d3_threeenv" => Ok(SpecSource::Scm(three_env_spec())),
            "c4" => Ok(SpecSource::Counterexample(CounterexampleKind::EfficiencyLoss)),
            "c5" => Ok(SpecSource::Counterexample(CounterexampleKind::Collider)),
            _ => Err(CliError::Usage(format!(
                "unknown spec alias '{arg}'; valid aliases: {}",
                SPEC_ALIASES.join(", ")
            ))),
        };
    }
    let spec: ScmSpec = parse_toml(arg, "spec")?;
    spec.validate().map_err(|e| CliError::Usage(format!("invalid spec file {arg}: {e}")))?;
    Ok(SpecSource::Scm(spec))
}

pub fn load_mixing(arg: &str, latent_dim: usize) -> Result<MixingSpec, CliError> {
    if let Some(name) = arg.strip_prefix(PREFIX) {
        return match name {
            "poly1" | "poly2" | "poly3" => {
                let degree = name[4..].parse().expect("digit suffix");
                Ok(MixingSpec::polynomial(degree, latent_dim, MIXING_SEED))
            }
            "mlp" => Ok(MixingSpec::invertible_mlp(latent_dim, MIXING_SEED)),
            _ => Err(CliError::Usage(format!(
                "unknown mixing alias '{arg}'; valid aliases: {}",
                MIXING_ALIASES.join(", ")
            ))),
        };
    }
    parse_toml(arg, "mixing")
}

pub fn load_train_config(arg: &str) -> Result<TrainConfig, CliError> {
    if let Some(name) = arg.strip_prefix(PREFIX) {
        return match name {
            "d2_default" => Ok(TrainConfig::default()),
            _ => Err(CliError::Usage(format!(
                "unknown config alias '{arg}'; valid aliases: {}",
                CONFIG_ALIASES.join(", ")
            ))),
        };
    }
    let cfg: TrainConfig = parse_toml(arg, "config")?;
    cfg.validate().map_err(|e| CliError::Usage(format!("invalid config file {arg}: {e}")))?;
    Ok(cfg)
}

pub fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} directory not found: {}", path.display())))
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} file not found: {}", path.display())))
    }
}
