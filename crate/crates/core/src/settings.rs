//! `key=value` form of a model description plus training configuration.
//! Used for run configuration files and for the classifier manifest.

use crate::em::{DimScaling, EmConfig, InitStrategy, OptimizerKind};
use crate::flow::{FlowConfig, GridShape};
use crate::latmm::RegularizerSpec;
use crate::mixture::{ModelKind, ModelSpec};
use crate::persist::fmt_f64;

/// Every key understood by [`Settings::apply`], in output order.
pub const KEYS: &[&str] = &[
    "model",
    "k",
    "depth",
    "hidden",
    "clamp",
    "splits",
    "grid",
    "init_range",
    "regularizer",
    "epochs",
    "batch_size",
    "learning_rate",
    "em_gap",
    "prior_gap",
    "dim_scaling",
    "optimizer",
    "init",
    "seed",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SettingsError {
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: invalid value {value:?} ({expected})")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub spec: ModelSpec,
    pub em: EmConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            spec: ModelSpec {
                kind: ModelKind::GenMM,
                k: 1,
                flow: FlowConfig::default(),
                regularizer: RegularizerSpec::default(),
            },
            em: EmConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, SettingsError> {
    value.trim().parse().map_err(|_| SettingsError::BadValue {
        key: key.into(),
        value: value.into(),
        expected,
    })
}

impl Settings {
    /// Sets one key from its text form.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), SettingsError> {
        let bad = |expected| SettingsError::BadValue {
            key: key.into(),
            value: value.into(),
            expected,
        };
        let v = value.trim();
        match key {
            "model" => self.spec.kind = ModelKind::parse(v).ok_or_else(|| bad("genmm or latmm"))?,
            "k" => self.spec.k = parse(key, v, "positive integer")?,
            "depth" => self.spec.flow.depth = parse(key, v, "non-negative integer")?,
            "hidden" => {
                self.spec.flow.hidden = match v {
                    "auto" => None,
                    _ => Some(parse(key, v, "positive integer or auto")?),
                }
            }
            "clamp" => self.spec.flow.clamp = parse(key, v, "positive number")?,
            "splits" => {
                self.spec.flow.splits = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| parse(key, s, "comma-separated step indices"))
                        .collect::<Result<_, _>>()?
                }
            }
            "grid" => {
                self.spec.flow.grid = if v.is_empty() || v == "none" {
                    None
                } else {
                    let parts: Vec<usize> = v
                        .split('x')
                        .map(|s| parse(key, s, "CxHxW"))
                        .collect::<Result<_, _>>()?;
                    match parts[..] {
                        [channels, height, width] => Some(GridShape {
                            channels,
                            height,
                            width,
                        }),
                        _ => return Err(bad("CxHxW")),
                    }
                }
            }
            "init_range" => self.spec.flow.init_range = parse(key, v, "non-negative number")?,
            "regularizer" => self.spec.regularizer = RegularizerSpec::decode(v).ok_or_else(|| bad("gamma[:a:b], l2:lambda or none"))?,
            "epochs" => self.em.epochs = parse(key, v, "positive integer")?,
            "batch_size" => self.em.batch_size = parse(key, v, "positive integer")?,
            "learning_rate" => self.em.learning_rate = parse(key, v, "positive number")?,
            "em_gap" => self.em.em_gap = parse(key, v, "positive integer")?,
            "prior_gap" => self.em.prior_gap = parse(key, v, "positive integer")?,
            "dim_scaling" => {
                self.em.dim_scaling = match v {
                    "auto" => DimScaling::Auto,
                    "on" => DimScaling::On,
                    "off" => DimScaling::Off,
                    _ => return Err(bad("auto, on or off")),
                }
            }
            "optimizer" => {
                self.em.optimizer = match v {
                    "sgd" => OptimizerKind::Gradient,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(bad("sgd or adam")),
                }
            }
            "init" => {
                self.em.init = match v {
                    "identity" => InitStrategy::Identity,
                    "data" => InitStrategy::DataDependent,
                    _ => return Err(bad("identity or data")),
                }
            }
            "seed" => self.em.seed = parse(key, v, "unsigned integer")?,
            _ => return Err(SettingsError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// All keys with their current values, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let f = &self.spec.flow;
        let e = &self.em;
        let value = |key: &str| -> String {
            match key {
                "model" => self.spec.kind.name().into(),
                "k" => self.spec.k.to_string(),
                "depth" => f.depth.to_string(),
                "hidden" => f.hidden.map_or("auto".into(), |h| h.to_string()),
                "clamp" => fmt_f64(f.clamp),
                "splits" => {
                    if f.splits.is_empty() {
                        "none".into()
                    } else {
                        f.splits.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                    }
                }
                "grid" => f
                    .grid
                    .map_or("none".into(), |g| format!("{}x{}x{}", g.channels, g.height, g.width)),
                "init_range" => fmt_f64(f.init_range),
                "regularizer" => self.spec.regularizer.encode(),
                "epochs" => e.epochs.to_string(),
                "batch_size" => e.batch_size.to_string(),
                "learning_rate" => fmt_f64(e.learning_rate),
                "em_gap" => e.em_gap.to_string(),
                "prior_gap" => e.prior_gap.to_string(),
                "dim_scaling" => e.dim_scaling.name().into(),
                "optimizer" => e.optimizer.name().into(),
                "init" => e.init.name().into(),
                "seed" => e.seed.to_string(),
                _ => unreachable!("key list and match disagree"),
            }
        };
        KEYS.iter().map(|&k| (k, value(k))).collect()
    }

    pub fn to_lines(&self) -> Vec<String> {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let mut s = Settings::default();
        for (k, v) in [
            ("model", "latmm"),
            ("k", "3"),
            ("hidden", "12"),
            ("splits", "1,2"),
            ("grid", "1x4x4"),
            ("regularizer", "l2:0.5"),
            ("learning_rate", "0.003"),
            ("dim_scaling", "on"),
            ("optimizer", "adam"),
            ("init", "identity"),
            ("seed", "17"),
        ] {
            s.apply(k, v).unwrap();
        }
        let mut back = Settings::default();
        for (k, v) in s.to_pairs() {
            back.apply(k, &v).unwrap();
        }
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut s = Settings::default();
        assert_eq!(s.apply("colour", "red"), Err(SettingsError::UnknownKey("colour".into())));
        assert!(s.apply("k", "two").is_err());
        assert!(s.apply("grid", "4x4").is_err());
        assert!(s.apply("model", "gmm").is_err());
    }
}
