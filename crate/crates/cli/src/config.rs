//! JSON run configuration, dotted overrides and the resolved snapshot.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use rdunet::data::GeneratorParams;
use rdunet::training::{AdamaxConfig, ScheduleUnit};
use rdunet::{LrSchedule, NetworkConfig, TrainingConfig};

use crate::CliError;

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives data generation, initialization, shuffling and augmentation.
    pub seed: u64,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub data: DataSection,
    /// Filled in when a snapshot is written; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invocation: Option<Invocation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub subcommand: String,
    pub args: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub base_width: usize,
    pub growth_base: usize,
    pub growth_cap: Option<usize>,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Epoch,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub decay_unit: Unit,
    pub epochs: usize,
    pub weight_decay: f64,
    pub augment: bool,
    pub shuffle: bool,
    pub max_steps: Option<usize>,
    pub target_accuracy: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub ship_probability: f64,
    pub max_ships: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let n = NetworkConfig::desk();
        NetworkSection {
            height: n.height,
            width: n.width,
            in_channels: n.in_channels,
            base_width: n.base_width,
            growth_base: n.growth_base,
            growth_cap: n.growth_cap,
            classes: n.classes,
        }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        TrainingSection {
            batch_size: t.batch_size,
            learning_rate: t.schedule.initial,
            decay_every: t.schedule.decay_every,
            decay_factor: t.schedule.factor,
            decay_unit: Unit::Epoch,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            augment: t.augment,
            shuffle: t.shuffle,
            max_steps: t.max_steps,
            target_accuracy: t.target_accuracy,
            checkpoint_every: t.checkpoint_every,
            beta1: t.adamax.beta1,
            beta2: t.adamax.beta2,
            eps: t.adamax.eps,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GeneratorParams::default();
        DataSection {
            ship_probability: g.ship_probability,
            max_ships: g.max_ships,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides and the explicit seed, then validates.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config: RunConfig = serde_json::from_value(value).map_err(|e| CliError::config(e.to_string()))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        config.invocation = None;
        config
            .network()
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        config
            .training()
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        if !(0.0..=1.0).contains(&config.data.ship_probability) {
            return Err(CliError::config("data.ship_probability must lie in [0, 1]"));
        }
        Ok(config)
    }

    pub fn network(&self) -> NetworkConfig {
        let n = &self.network;
        NetworkConfig {
            height: n.height,
            width: n.width,
            in_channels: n.in_channels,
            base_width: n.base_width,
            growth_base: n.growth_base,
            growth_cap: n.growth_cap,
            classes: n.classes,
        }
    }

    pub fn training(&self) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            batch_size: t.batch_size,
            schedule: LrSchedule {
                initial: t.learning_rate,
                decay_every: t.decay_every,
                factor: t.decay_factor,
            },
            schedule_unit: match t.decay_unit {
                Unit::Epoch => ScheduleUnit::Epoch,
                Unit::Step => ScheduleUnit::Step,
            },
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            seed: self.seed,
            augment: t.augment,
            shuffle: t.shuffle,
            max_steps: t.max_steps,
            target_accuracy: t.target_accuracy,
            checkpoint_every: t.checkpoint_every,
            adamax: AdamaxConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
        }
    }

    pub fn generator(&self) -> GeneratorParams {
        GeneratorParams {
            ship_probability: self.data.ship_probability,
            max_ships: self.data.max_ships,
        }
    }

    /// Writes the snapshot with the invocation recorded.
    pub fn write_snapshot(&self, dir: &Path, invocation: Invocation) -> Result<(), CliError> {
        let mut snap = self.clone();
        snap.invocation = Some(invocation);
        let text = serde_json::to_string_pretty(&snap).expect("config serializes") + "\n";
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    }
}

/// Sets `a.b.c=value` inside `root`. The value is parsed as JSON and taken
/// as a plain string when that fails. Every key along the path must exist.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {spec:?} is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::config(format!(
                "override key {key:?}: {} is not a section",
                parts[..i].join(".")
            ))
        })?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = parsed;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::resolve(
            None,
            &["training.epochs=3".into(), "network.growth_cap=8".into()],
            Some(4),
        )
        .unwrap();
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.network.growth_cap, Some(8));
        assert_eq!(c.seed, 4);
        let c = RunConfig::resolve(None, &["training.decay_unit=step".into()], None).unwrap();
        assert_eq!(c.training.decay_unit, Unit::Step);

        for bad in ["training.epoch=3", "nope=1", "seed.x=1", "training.epochs"] {
            let err = RunConfig::resolve(None, &[bad.into()], None).unwrap_err();
            assert_eq!(err.code, 2, "{bad}");
        }
        let err = RunConfig::resolve(None, &["network.height=60".into()], None).unwrap_err();
        assert!(err.message.contains("divisible"), "{}", err.message);
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = std::env::temp_dir().join(format!("rdunet-cfg-{}", std::process::id()));
        let c = RunConfig::resolve(None, &["training.batch_size=4".into()], Some(9)).unwrap();
        c.write_snapshot(
            &dir,
            Invocation {
                subcommand: "train".into(),
                args: BTreeMap::new(),
            },
        )
        .unwrap();
        let back = RunConfig::resolve(Some(&dir.join(SNAPSHOT_FILE)), &[], None).unwrap();
        assert_eq!(back, c);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn unknown_field_in_file_is_rejected() {
        let value: Value = serde_json::from_str(r#"{"training": {"epochz": 1}}"#).unwrap();
        assert!(serde_json::from_value::<RunConfig>(value).is_err());
    }
}
