//! Flat `key = value` configuration files.
//!
//! One key per line, `#` starts a comment, keys are dotted by section
//! (`plant.K_U`, `nmpc.horizon`, ...). Unknown keys are rejected so a typo
//! cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::dae::{IntegratorOptions, Method};
use crate::error::{Error, Result};
use crate::mhe::MheConfig;
use crate::model::PlantParams;
use crate::nmpc::NmpcConfig;
use crate::pso::PsoOptions;
use crate::scenario::ScenarioConfig;
use crate::surrogate::{DatasetConfig, TrainConfig};

/// The shipped nominal configuration.
pub const NOMINAL_CFG: &str = include_str!("../config/nominal.cfg");

/// Parsed key/value pairs with bookkeeping of which keys were consumed.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    used: std::collections::BTreeSet<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{}`",
                    idx + 1,
                    raw
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", idx + 1)));
            }
            if entries
                .insert(key.to_string(), (idx + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{}`",
                    idx + 1,
                    key
                )));
            }
        }
        Ok(KeyValues {
            entries,
            used: Default::default(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Overrides (or adds) a single key. Used by the CLI and by tests.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        let entry = self.entries.get(key).cloned();
        if entry.is_some() {
            self.used.insert(key.to_string());
        }
        entry
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, value)) => value
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse `{key} = {value}`"))),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list of numbers.
    pub fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, value)) => {
                if value.is_empty() {
                    return Ok(Some(Vec::new()));
                }
                value
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map(Some)
                    .map_err(|_| Error::Config(format!("line {line}: cannot parse list `{key}`")))
            }
        }
    }

    /// Errors on any key that no section consumed.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )))
        }
    }
}

/// Everything a run or a training pipeline needs.
#[derive(Debug, Clone)]
pub struct Config {
    pub plant: PlantParams,
    pub integrator: IntegratorOptions,
    pub pso: PsoOptions,
    pub mhe: MheConfig,
    pub nmpc: NmpcConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub scenario: ScenarioConfig,
}

impl Config {
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let plant = PlantParams::from_kv(&mut kv)?;
        let integrator = integrator_from_kv(&mut kv, plant.sampling_time)?;
        let pso = pso_from_kv(&mut kv)?;
        let mhe = MheConfig::from_kv(&mut kv)?;
        let nmpc = NmpcConfig::from_kv(&mut kv)?;
        let dataset = DatasetConfig::from_kv(&mut kv)?;
        let train = TrainConfig::from_kv(&mut kv)?;
        let scenario = ScenarioConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(Config {
            plant,
            integrator,
            pso,
            mhe,
            nmpc,
            dataset,
            train,
            scenario,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::from_file(path)?)
    }

    pub fn nominal() -> Self {
        Self::parse(NOMINAL_CFG).expect("shipped nominal.cfg is valid")
    }
}

fn integrator_from_kv(kv: &mut KeyValues, sampling_time: f64) -> Result<IntegratorOptions> {
    let d = IntegratorOptions::default();
    let method = match kv.get::<String>("integrator.method")?.as_deref() {
        None => d.method,
        Some("implicit-euler") => Method::ImplicitEuler,
        Some("bdf2") => Method::Bdf2,
        Some(other) => {
            return Err(Error::Config(format!(
                "integrator.method must be implicit-euler or bdf2, got `{other}`"
            )))
        }
    };
    let opts = IntegratorOptions {
        dt_internal: kv.or("integrator.dt_internal", d.dt_internal)?,
        newton_tol: kv.or("integrator.newton_tol", d.newton_tol)?,
        newton_max_iter: kv.or("integrator.newton_max_iter", d.newton_max_iter)?,
        algebraic_tol: kv.or("integrator.algebraic_tol", d.algebraic_tol)?,
        algebraic_max_iter: kv.or("integrator.algebraic_max_iter", d.algebraic_max_iter)?,
        dt_floor: kv.or("integrator.dt_floor", d.dt_floor)?,
        method,
    };
    opts.validate(sampling_time)?;
    Ok(opts)
}

fn pso_from_kv(kv: &mut KeyValues) -> Result<PsoOptions> {
    let d = PsoOptions::default();
    let opts = PsoOptions {
        swarm_size: kv.or("pso.swarm_size", d.swarm_size)?,
        max_iter: kv.or("pso.max_iter", d.max_iter)?,
        inertia: kv.or("pso.inertia", d.inertia)?,
        cognitive: kv.or("pso.c1", d.cognitive)?,
        social: kv.or("pso.c2", d.social)?,
        velocity_clamp: kv.or("pso.velocity_clamp", d.velocity_clamp)?,
        stall_tol: kv.or("pso.stall_tol", d.stall_tol)?,
        stall_patience: kv.or("pso.stall_patience", d.stall_patience)?,
        reinit_budget: kv.or("pso.reinit_budget", d.reinit_budget)?,
        seed: kv.or("pso.seed", d.seed)?,
    };
    opts.validate()?;
    Ok(opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_config_parses() {
        let cfg = Config::nominal();
        assert_eq!(cfg.plant.feed_stage, 8);
        assert_eq!(cfg.nmpc.horizon, 3);
        assert_eq!(cfg.mhe.horizon, 3);
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut kv = KeyValues::parse("# header\n\na = 1.5 # trailing\n b=2\n").unwrap();
        assert_eq!(kv.require::<f64>("a").unwrap(), 1.5);
        assert_eq!(kv.require::<usize>("b").unwrap(), 2);
        kv.finish().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{NOMINAL_CFG}\nplant.K_UU = 3\n");
        let err = Config::parse(&text).unwrap_err();
        assert!(err.to_string().contains("plant.K_UU"), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines() {
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse("just text").is_err());
        let mut kv = KeyValues::parse("a = x").unwrap();
        assert!(kv.require::<f64>("a").is_err());
    }

    #[test]
    fn missing_plant_key_is_an_error() {
        let text: String = NOMINAL_CFG
            .lines()
            .filter(|l| !l.trim_start().starts_with("plant.K_U "))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = Config::parse(&text).unwrap_err();
        assert!(err.to_string().contains("plant.K_U"), "{err}");
    }
}
