//! JSON run configuration: flat keys named after [`TrainConfig`] fields,
//! defaults for absent keys, unknown keys rejected.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use module_core::critic::FractionMode;
use module_core::env::EnvKind;
use module_core::risk::RiskKind;
use module_core::trainer::{Algorithm, TrainConfig};

/// Parses a configuration document. Errors name the offending key.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            anyhow!("{}", e.inner())
        } else {
            anyhow!("key `{path}`: {}", e.inner())
        }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in config {}", path.display()))
}

/// Pretty JSON of every field, as echoed into run directories.
pub fn config_json(config: &TrainConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

/// Command-line values that replace file values when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub env: Option<EnvKind>,
    pub algo: Option<Algorithm>,
    pub expert_data: Option<String>,
    pub out: Option<String>,
    pub total_steps: Option<usize>,
    pub risk_measure: Option<RiskKind>,
    pub beta: Option<f64>,
    pub fractions: Option<FractionMode>,
    pub num_quantiles: Option<usize>,
    pub eval_episodes: Option<usize>,
    pub pairs: Option<usize>,
    pub noise_std: Option<f64>,
    pub checkpoint: Option<String>,
}

impl Overrides {
    pub fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut c.seed, &self.seed);
        set(&mut c.env, &self.env);
        set(&mut c.algo, &self.algo);
        set(&mut c.total_steps, &self.total_steps);
        set(&mut c.risk_measure, &self.risk_measure);
        set(&mut c.beta, &self.beta);
        set(&mut c.fractions, &self.fractions);
        set(&mut c.num_quantiles, &self.num_quantiles);
        set(&mut c.eval_episodes, &self.eval_episodes);
        set(&mut c.pairs, &self.pairs);
        set(&mut c.noise_std, &self.noise_std);
        if self.expert_data.is_some() {
            c.expert_data = self.expert_data.clone();
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        if self.checkpoint.is_some() {
            c.checkpoint = self.checkpoint.clone();
        }
        c
    }
}

/// File values (or defaults) with flag overrides applied, then validated.
pub fn effective_config(file: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    let base = match file {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    let config = overrides.apply(base);
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use module_core::risk::RiskMeasure;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(parse_config("{}").unwrap(), TrainConfig::default());
    }

    #[test]
    fn invalid_gamma_names_the_key() {
        let err = parse_config(r#"{"gamma": 1.5}"#).unwrap_err();
        assert_eq!(err.to_string(), "gamma must lie in (0,1)");
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let err = parse_config(r#"{"gama": 0.9}"#).unwrap_err().to_string();
        assert!(err.contains("gama"), "{err}");
        let err = parse_config(r#"{"batch_size": "big"}"#).unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
        let err = parse_config(r#"{"risk_measure": "median"}"#).unwrap_err().to_string();
        assert!(err.contains("risk_measure"), "{err}");
    }

    #[test]
    fn cvar_quarter() {
        let c = parse_config(r#"{"risk_measure": "cvar", "beta": 0.25}"#).unwrap();
        assert_eq!(c.risk().unwrap(), RiskMeasure::new(RiskKind::CVaR, 0.25).unwrap());
    }

    #[test]
    fn flags_override_file_values() {
        let file = parse_config(r#"{"seed": 3, "total_steps": 10, "beta": 0.5, "risk_measure": "cvar"}"#).unwrap();
        let o = Overrides {
            seed: Some(7),
            beta: Some(0.25),
            ..Overrides::default()
        };
        let c = o.apply(file);
        assert_eq!((c.seed, c.total_steps, c.beta), (7, 10, 0.25));
    }

    #[test]
    fn echoed_config_round_trips() {
        let c = TrainConfig {
            expert_data: Some("e.modl".into()),
            fractions: FractionMode::Fqf,
            ..TrainConfig::default()
        };
        assert_eq!(parse_config(&config_json(&c)).unwrap(), c);
    }
}
