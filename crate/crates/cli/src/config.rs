use std::path::Path;

use anyhow::Context as _;
use nvs_core::backbone::BackboneConfig;
use nvs_core::diffusion::DiffusionConfig;
use nvs_core::heads::HeadConfig;
use nvs_core::losses::LossConfig;
use nvs_core::model::ModelConfig;
use nvs_core::sampler::SamplerConfig;
use nvs_core::synthworld::OrbitConfig;
use nvs_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::UsageError;

pub const SEED_ENV: &str = "UMAMI_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: usize,
    pub views: usize,
    /// Width and height in pixels.
    pub resolution: [usize; 2],
    pub seed: u64,
    pub orbit: OrbitConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 2,
            views: 8,
            resolution: [64, 64],
            seed: 0,
            orbit: OrbitConfig::default(),
        }
    }
}

/// Every setting a run can touch, one TOML section per component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
            diffusion: self.diffusion.clone(),
        }
    }

    pub fn set_model(&mut self, m: &ModelConfig) {
        self.backbone = m.backbone.clone();
        self.heads = m.heads.clone();
        self.diffusion = m.diffusion.clone();
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("serialising the effective configuration")
    }
}

/// Recursively overlay `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse the right-hand side of `--set key=value`: anything TOML accepts as a
/// value, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), UsageError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError(format!("override key `{key}` must look like section.field")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        t = match t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(inner) => inner,
            _ => return Err(UsageError(format!("override key `{key}`: `{p}` is not a section"))),
        };
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Build the effective configuration: `base` < config file < `UMAMI_SEED` <
/// command-line overrides (applied in order).
pub fn resolve(
    base: &RunConfig,
    file: Option<&Path>,
    seed_env: Option<&str>,
    overrides: &[(String, String)],
) -> anyhow::Result<RunConfig> {
    let mut table = Table::try_from(base).context("serialising defaults")?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed: Table = text
            .parse()
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        merge(&mut table, parsed);
    }
    if let Some(raw) = seed_env {
        let seed: i64 = raw
            .trim()
            .parse()
            .ok()
            .filter(|s| *s >= 0)
            .ok_or_else(|| UsageError(format!("{SEED_ENV}={raw} is not a non-negative integer")))?;
        for section in ["train", "sampler", "data"] {
            set_path(&mut table, &format!("{section}.seed"), Value::Integer(seed))?;
        }
    }
    for (k, v) in overrides {
        set_path(&mut table, k, parse_value(v))?;
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(format!("invalid configuration: {}", e.message())))?;
    Ok(cfg)
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_layers_of_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[train]\nlr = 0.001\nbatch_size = 8\n[sampler]\ntau = 0.5\n").unwrap();
        let over = vec![("train.lr".to_string(), "0.003".to_string())];
        let cfg = resolve(&RunConfig::default(), Some(&file), None, &over).unwrap();
        // flag beats file
        assert_eq!(cfg.train.lr, 0.003);
        // file beats default
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.sampler.tau, 0.5);
        // untouched default
        assert_eq!(cfg.train.weight_decay, 0.02);
    }

    #[test]
    fn seed_env_reaches_every_seed_but_flags_still_win() {
        let over = vec![("sampler.seed".to_string(), "3".to_string())];
        let cfg = resolve(&RunConfig::default(), None, Some("42"), &over).unwrap();
        assert_eq!((cfg.train.seed, cfg.data.seed, cfg.sampler.seed), (42, 42, 3));
        assert!(resolve(&RunConfig::default(), None, Some("-1"), &[]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let over = vec![("train.learning_rate".to_string(), "1".to_string())];
        assert!(resolve(&RunConfig::default(), None, None, &over).is_err());
        let over = vec![("nosuch.x".to_string(), "1".to_string())];
        assert!(resolve(&RunConfig::default(), None, None, &over).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
