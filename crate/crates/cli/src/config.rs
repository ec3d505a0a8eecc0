//! Run configuration: a `key=value` file merged with command-line overrides.

use std::path::{Path, PathBuf};

use flowmix::data::LabelColumn;
use flowmix::settings::{self, Settings};

use crate::error::{CliError, Result};

/// Keys describing the input data, accepted next to the model settings.
pub const DATA_KEYS: &[&str] = &["data", "label_column", "preprocess", "idx_labels", "downsample"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PreprocessSpec {
    None,
    Standardize,
    Dequantize(f64),
}

impl PreprocessSpec {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(PreprocessSpec::None),
            "standardize" => Some(PreprocessSpec::Standardize),
            "dequantize" => Some(PreprocessSpec::Dequantize(1.0)),
            _ => {
                let scale: f64 = s.strip_prefix("dequantize:")?.parse().ok()?;
                (scale > 0.0 && scale.is_finite()).then_some(PreprocessSpec::Dequantize(scale))
            }
        }
    }

    fn name(self) -> String {
        match self {
            PreprocessSpec::None => "none".into(),
            PreprocessSpec::Standardize => "standardize".into(),
            PreprocessSpec::Dequantize(s) => format!("dequantize:{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    pub label_column: Option<LabelColumn>,
    pub preprocess: PreprocessSpec,
    pub idx_labels: Option<PathBuf>,
    pub downsample: Option<(usize, usize)>,
}

impl Default for DataSource {
    fn default() -> Self {
        Self {
            path: None,
            label_column: None,
            preprocess: PreprocessSpec::None,
            idx_labels: None,
            downsample: None,
        }
    }
}

pub fn parse_label_column(s: &str) -> LabelColumn {
    match s.parse() {
        Ok(i) => LabelColumn::Index(i),
        Err(_) => LabelColumn::Name(s.to_string()),
    }
}

fn parse_grid2(key: &str, s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Config(format!("{key}: expected ROWSxCOLS, got {s:?}"));
    let (r, c) = s.split_once('x').ok_or_else(bad)?;
    match (r.trim().parse(), c.trim().parse()) {
        (Ok(r), Ok(c)) if r > 0 && c > 0 => Ok((r, c)),
        _ => Err(bad()),
    }
}

impl DataSource {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data" => self.path = Some(PathBuf::from(v)),
            "label_column" => self.label_column = (!v.is_empty() && v != "none").then(|| parse_label_column(v)),
            "preprocess" => {
                self.preprocess = PreprocessSpec::parse(v).ok_or_else(|| {
                    CliError::Config(format!("preprocess: expected none, standardize or dequantize[:scale], got {v:?}"))
                })?
            }
            "idx_labels" => self.idx_labels = Some(PathBuf::from(v)),
            "downsample" => self.downsample = Some(parse_grid2(key, v)?),
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn to_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(p) = &self.path {
            out.push(format!("data={}", p.display()));
        }
        match &self.label_column {
            Some(LabelColumn::Index(i)) => out.push(format!("label_column={i}")),
            Some(LabelColumn::Name(n)) => out.push(format!("label_column={n}")),
            None => {}
        }
        out.push(format!("preprocess={}", self.preprocess.name()));
        if let Some(p) = &self.idx_labels {
            out.push(format!("idx_labels={}", p.display()));
        }
        if let Some((r, c)) = self.downsample {
            out.push(format!("downsample={r}x{c}"));
        }
        out
    }
}

/// Model settings plus the data they are trained on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub settings: Settings,
    pub data: DataSource,
}

impl RunConfig {
    /// Reads `file` (if any), then applies `overrides` in order.
    pub fn build(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config file {}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if settings::KEYS.contains(&key) {
            Ok(self.settings.apply(key, value)?)
        } else if DATA_KEYS.contains(&key) {
            self.data.apply(key, value)
        } else {
            Err(CliError::Config(format!("unknown key {key:?}")))
        }
    }

    /// Every effective setting as `key=value`, for output headers.
    pub fn to_lines(&self) -> Vec<String> {
        let mut out = self.settings.to_lines();
        out.extend(self.data.to_lines());
        out
    }
}
