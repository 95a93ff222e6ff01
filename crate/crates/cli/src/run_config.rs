//! Resolved run configuration: preset defaults, then file, then `--set` overrides.

use anyhow::{anyhow, bail, Context, Result};
use mbt::data::Task;
use mbt::model::ModelConfig;
use mbt::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub task: Task,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Clip length; 0 means one span.
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand that produced a manifest; informational on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    pub preset: String,
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let model = ModelConfig::preset(name)?;
        let classes = model.head.widths()[0];
        let train = TrainConfig::preset(name)?.matching(&model);
        let (n_train, n_test) = match name {
            "tiny" => (64, 32),
            _ => (4000, 1000),
        };
        Ok(Self {
            command: None,
            preset: name.to_string(),
            seed: 0,
            data: DataSpec { task: Task::PairSum, classes, n_train, n_test, duration_s: 0.0 },
            model,
            train,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Layers `file` and `overrides` over the preset named in the file, or `preset`.
    pub fn resolve(preset: &str, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file_value: Option<toml::Table> = file
            .map(|text| text.parse::<toml::Table>().context("config file is not valid TOML"))
            .transpose()?;
        let preset = file_value
            .as_ref()
            .and_then(|t| t.get("preset"))
            .and_then(|v| v.as_str())
            .unwrap_or(preset)
            .to_string();
        let mut value = toml::Table::try_from(Self::preset(&preset)?)?;
        if let Some(f) = file_value {
            merge(&mut value, f);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value.try_into().context("config does not match the run schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model config")?;
        self.train.validate().context("train config")?;
        self.train.check_model(&self.model).context("train config")?;
        if self.data.classes != self.model.head.widths()[0] {
            bail!(
                "data config: {} classes but the model head has {}",
                self.data.classes,
                self.model.head.widths()[0]
            );
        }
        Ok(())
    }

    /// Copy of the run with `seed` pushed into the training config.
    pub fn seeded(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as TOML and falls back to a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not key=value"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut table = root;
    for k in parents {
        table = table
            .get_mut(*k)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| anyhow!("override `{spec}`: no section `{k}`"))?;
    }
    if !table.contains_key(*last) && !matches!(*last, "command") {
        bail!("override `{spec}`: unknown key `{last}`");
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut c = RunConfig::resolve("desk", None, &["seed=7".into(), "model.fusion_layer=3".into()]).unwrap();
        c.command = Some("train".into());
        let back = RunConfig::resolve("tiny", Some(&c.to_toml()), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_beat_the_file() {
        let file = "preset = \"tiny\"\nseed = 3\n[train]\nepochs = 5\n";
        let c = RunConfig::resolve("desk", Some(file), &["train.epochs=9".into()]).unwrap();
        assert_eq!(c.preset, "tiny");
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 9);
        assert_eq!(c.model, ModelConfig::tiny());
    }

    #[test]
    fn string_and_enum_overrides() {
        let c = RunConfig::resolve("tiny", None, &["model.strategy=vanilla-cross".into(), "data.task=audio-only".into()])
            .unwrap();
        assert_eq!(c.model.strategy, mbt::model::Strategy::VanillaCross);
        assert_eq!(c.data.task, Task::AudioOnly);
    }

    #[test]
    fn bad_overrides_are_reported() {
        assert!(RunConfig::resolve("tiny", None, &["model.nope=1".into()]).is_err());
        assert!(RunConfig::resolve("tiny", None, &["nosection.x=1".into()]).is_err());
        assert!(RunConfig::resolve("tiny", None, &["seed".into()]).is_err());
        assert!(RunConfig::resolve("tiny", None, &["model.fusion_layer=9".into()]).is_err());
        assert!(RunConfig::resolve("huge", None, &[]).is_err());
    }
}
