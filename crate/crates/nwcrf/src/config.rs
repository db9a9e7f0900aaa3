//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, keys are dotted
//! (`model.window_size = 4`). Unknown and repeated keys are errors.
//! `model.preset` is applied before every other key regardless of its
//! position.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nwcrf_core::depth_net::LEVELS;
use nwcrf_core::synth::DatasetSpec;
use nwcrf_core::{DecoderKind, ModelConfig, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub spec: DatasetSpec,
    /// Read training samples from this index instead of generating them.
    pub train_index: Option<PathBuf>,
    pub val_index: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval_cap: f64,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            model: ModelConfig::compact(),
            train: TrainConfig::default(),
            data: DataConfig { spec: DatasetSpec::default(), train_index: None, val_index: None },
            eval_cap: 10.0,
            output: PathBuf::from("runs/default"),
        };
        cfg.finish().expect("defaults are valid");
        cfg
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value.parse().map_err(|e| CliError::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_levels(key: &str, value: &str) -> Result<[usize; LEVELS], CliError> {
    let v = parse_list(key, value)?;
    v.try_into().map_err(|v: Vec<usize>| CliError::config(key, format!("expected {LEVELS} comma-separated values, got {}", v.len())))
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn preset(key: &str, value: &str) -> Result<ModelConfig, CliError> {
    match value {
        "compact" => Ok(ModelConfig::compact()),
        "default" => Ok(ModelConfig::default()),
        "paper" => Ok(ModelConfig::paper_faithful()),
        _ => Err(CliError::config(key, format!("unknown preset `{value}` (compact, default, paper)"))),
    }
}

/// Sets one `model.*` key (or `seed`) on `m`; `Ok(false)` if the key is
/// not a model key.
pub fn set_model_key(m: &mut ModelConfig, key: &str, value: &str) -> Result<bool, CliError> {
    match key {
        "seed" => m.seed = parse(key, value)?,
        "model.decoder" => {
            m.decoder = DecoderKind::parse(value).ok_or_else(|| CliError::config(key, format!("unknown decoder `{value}` (crf, conv)")))?
        }
        "model.window_size" => m.window_size = parse(key, value)?,
        "model.heads" => m.heads = parse_levels(key, value)?,
        "model.head_dim" => m.head_dim = parse(key, value)?,
        "model.encoder_widths" => m.encoder_widths = parse_levels(key, value)?,
        "model.ppm_scales" => m.ppm_scales = parse_list(key, value)?,
        "model.max_depth" => m.max_depth = parse(key, value)?,
        "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
        "model.scale_logits" => m.scale_logits = parse(key, value)?,
        "model.qk_layer_norm" => m.qk_layer_norm = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Every model key with an exactly re-parseable value.
pub fn model_pairs(m: &ModelConfig) -> Vec<(String, String)> {
    [
        ("seed", m.seed.to_string()),
        ("model.decoder", m.decoder.as_str().to_string()),
        ("model.window_size", m.window_size.to_string()),
        ("model.heads", join(&m.heads)),
        ("model.head_dim", m.head_dim.to_string()),
        ("model.encoder_widths", join(&m.encoder_widths)),
        ("model.ppm_scales", join(&m.ppm_scales)),
        ("model.max_depth", m.max_depth.to_string()),
        ("model.mlp_ratio", m.mlp_ratio.to_string()),
        ("model.scale_logits", m.scale_logits.to_string()),
        ("model.qk_layer_norm", m.qk_layer_norm.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Splits config text into `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::config(line, format!("line {} is not `key = value`", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(CliError::config(k, format!("line {}: malformed key", n + 1)));
        }
        if pairs.iter().any(|(seen, _)| seen == k) {
            return Err(CliError::config(k, format!("line {}: repeated key", n + 1)));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

/// Splits a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String), CliError> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::config(s, "override must be key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Applies file pairs, then overrides, on top of the defaults.
    pub fn from_pairs(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let all: Vec<&(String, String)> = file.iter().chain(overrides).collect();
        if let Some((k, v)) = all.iter().rev().find(|(k, _)| k == "model.preset") {
            cfg.model = ModelConfig { seed: cfg.model.seed, ..preset(k, v)? };
        }
        for (k, v) in all {
            if k != "model.preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_pairs(&parse_pairs(&text)?, overrides)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if set_model_key(&mut self.model, key, value)? {
            if key == "seed" {
                self.train.seed = self.model.seed;
            }
            return Ok(());
        }
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "output" => self.output = PathBuf::from(value),
            "eval.cap" => self.eval_cap = parse(key, value)?,
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr_start" => t.lr.start = parse(key, value)?,
            "train.lr_end" => t.lr.end = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "train.lambda" => t.loss.lambda = parse(key, value)?,
            "train.alpha" => t.loss.alpha = parse(key, value)?,
            "data.train_samples" => d.spec.train_samples = parse(key, value)?,
            "data.val_samples" => d.spec.val_samples = parse(key, value)?,
            "data.height" => d.spec.height = parse(key, value)?,
            "data.width" => d.spec.width = parse(key, value)?,
            "data.seed" => d.spec.seed = parse(key, value)?,
            "data.train_index" => d.train_index = Some(PathBuf::from(value)),
            "data.val_index" => d.val_index = Some(PathBuf::from(value)),
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Resolves pooling scales for the data extents and validates.
    fn finish(&mut self) -> Result<(), CliError> {
        let spec = &self.data.spec;
        if spec.height == 0 || spec.width == 0 || !spec.height.is_multiple_of(32) || !spec.width.is_multiple_of(32) {
            return Err(CliError::config("data.height", "image extents must be positive multiples of 32"));
        }
        self.model.fit_ppm_scales(spec.height, spec.width);
        self.model.validate().map_err(|e| CliError::config("model", e.to_string()))?;
        self.train.validate().map_err(|e| CliError::config("train", e.to_string()))?;
        if !(self.eval_cap > nwcrf_core::metrics::MIN_EVAL_DEPTH) {
            return Err(CliError::config("eval.cap", format!("cap must exceed {} m", nwcrf_core::metrics::MIN_EVAL_DEPTH)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_pairs(text).unwrap()
    }

    #[test]
    fn comments_blank_lines_and_dotted_keys() {
        let p = pairs("# header\n\nmodel.window_size = 5   # inline\ntrain.steps=10\n");
        assert_eq!(p, [("model.window_size".into(), "5".into()), ("train.steps".into(), "10".into())]);
        let c = RunConfig::from_pairs(&p, &[]).unwrap();
        assert_eq!(c.model.window_size, 5);
        assert_eq!(c.train.steps, 10);
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let p = pairs("train.steps = 10");
        let c = RunConfig::from_pairs(&p, &[parse_override("train.steps=3").unwrap()]).unwrap();
        assert_eq!(c.train.steps, 3);
        match RunConfig::from_pairs(&pairs("train.stepz = 1"), &[]) {
            Err(CliError::Config { key, .. }) => assert_eq!(key, "train.stepz"),
            other => panic!("{other:?}"),
        }
        assert!(parse_pairs("a = 1\na = 2").is_err());
        assert!(parse_pairs("just words").is_err());
    }

    #[test]
    fn preset_applies_first() {
        let p = pairs("model.window_size = 3\nmodel.preset = default");
        let c = RunConfig::from_pairs(&p, &[]).unwrap();
        assert_eq!(c.model.window_size, 3);
        assert_eq!(c.model.heads, [32, 16, 8, 4]);
    }

    #[test]
    fn seed_reaches_model_and_order() {
        let c = RunConfig::from_pairs(&pairs("seed = 9"), &[]).unwrap();
        assert_eq!((c.model.seed, c.train.seed), (9, 9));
    }

    #[test]
    fn model_pairs_round_trip() {
        let mut m = ModelConfig::compact();
        m.max_depth = 0.1 + 0.2;
        m.decoder = DecoderKind::Convolutional;
        let mut back = ModelConfig::default();
        for (k, v) in model_pairs(&m) {
            assert!(set_model_key(&mut back, &k, &v).unwrap());
        }
        assert_eq!(back, m);
    }

    #[test]
    fn invalid_values_name_the_key() {
        for (text, key) in [("model.heads = 1,2", "model.heads"), ("train.lambda = 2", "train"), ("data.height = 48", "data.height")] {
            match RunConfig::from_pairs(&pairs(text), &[]) {
                Err(CliError::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
