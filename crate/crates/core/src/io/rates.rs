use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cifar::Normalization;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Pruning schedule: per-unit compression rates plus correction and
/// fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    /// Unit index -> fraction of its channels to drop. Written as
    /// `unit3 = 0.5` or `"3" = 0.5`; absent units keep every channel.
    #[serde(deserialize_with = "de_rates")]
    pub rates: BTreeMap<usize, f64>,
    pub lambda: bool,
    pub var_coeff: f64,
    pub finetune_epochs: usize,
    /// Retraining epochs after every unit has been pruned.
    pub final_epochs: usize,
    pub seed: u64,
    pub normalization: Option<Normalization>,
    /// Optimizer settings for fine-tuning and the final retrain.
    pub train: TrainConfig,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            rates: BTreeMap::new(),
            lambda: true,
            var_coeff: 1.0,
            finetune_epochs: 1,
            final_epochs: 0,
            seed: 0,
            normalization: None,
            train: TrainConfig::default(),
        }
    }
}

fn de_rates<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<usize, f64>, D::Error> {
    let raw = BTreeMap::<String, f64>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.strip_prefix("unit")
                .unwrap_or(&k)
                .parse::<usize>()
                .map(|u| (u, v))
                .map_err(|_| serde::de::Error::custom(format!("rate key `{k}` is not `unitN` or `N`")))
        })
        .collect()
}

impl RateConfig {
    pub fn rate(&self, unit: usize) -> f64 {
        self.rates.get(&unit).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (&unit, &rate) in &self.rates {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("unit {unit}: rate {rate} outside [0, 1)")));
            }
        }
        if !(self.var_coeff > 0.0 && self.var_coeff.is_finite()) {
            return Err(Error::Config(format!("var_coeff {} must be > 0", self.var_coeff)));
        }
        if let Some(n) = &self.normalization {
            if n.std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config("normalization std must be > 0".into()));
            }
        }
        self.train.validate()
    }
}

pub fn parse_rates(text: &str) -> Result<RateConfig> {
    let cfg: RateConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_rates(path: &Path) -> Result<RateConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rates(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}
