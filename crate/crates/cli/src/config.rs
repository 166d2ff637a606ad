//! Flat `key=value` run configuration: defaults, then the file, then
//! `--set` pairs, then dedicated flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use hail_core::corpus::DEFAULT_MIN_SEQ_LEN;
use hail_core::{HailError, TrainConfig};

/// Everything a command reads from configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub min_seq_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            min_seq_len: DEFAULT_MIN_SEQ_LEN,
        }
    }
}

pub const KEYS: &[&str] = &[
    "alpha",
    "beta",
    "peers",
    "batch_size",
    "max_len",
    "d",
    "d_hidden",
    "layers",
    "heads",
    "mask_ratio",
    "duplication",
    "epochs",
    "warmup_steps",
    "seed",
    "distill_mode",
    "truncation_rule",
    "layer_norm",
    "patience",
    "peer_index",
    "eval_negatives",
    "negative_sampling",
    "min_seq_len",
];

fn config_err(key: &str, message: impl Into<String>) -> HailError {
    HailError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Splits `key=value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, HailError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HailError::Parse {
            line: idx + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T, HailError> {
    value
        .parse()
        .map_err(|_| config_err(key, format!("`{value}` is not {expected}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HailError> {
        let t = &mut self.train;
        let num = "a number";
        let int = "a non-negative integer";
        match key {
            "alpha" => t.alpha = parse_value(key, value, num)?,
            "beta" => t.beta = parse_value(key, value, num)?,
            "peers" => t.peers = parse_value(key, value, int)?,
            "batch_size" => t.batch_size = parse_value(key, value, int)?,
            "max_len" => t.max_len = parse_value(key, value, int)?,
            "d" => t.d = parse_value(key, value, int)?,
            "d_hidden" => t.d_hidden = parse_value(key, value, int)?,
            "layers" => t.layers = parse_value(key, value, int)?,
            "heads" => t.heads = parse_value(key, value, int)?,
            "mask_ratio" => t.mask_ratio = parse_value(key, value, num)?,
            "duplication" => t.duplication = parse_value(key, value, int)?,
            "epochs" => t.epochs = parse_value(key, value, int)?,
            "warmup_steps" => t.warmup_steps = parse_value(key, value, int)?,
            "seed" => t.seed = parse_value(key, value, int)?,
            "distill_mode" => t.distill_mode = parse_value(key, value, "one of med, mimic, none")?,
            "truncation_rule" => t.truncation_rule = parse_value(key, value, "one of any, all")?,
            "layer_norm" => t.layer_norm = parse_value(key, value, "true or false")?,
            "patience" => t.patience = parse_value(key, value, int)?,
            "peer_index" => t.peer_index = parse_value(key, value, int)?,
            "eval_negatives" => t.eval_negatives = parse_value(key, value, int)?,
            "negative_sampling" => t.negative_sampling = parse_value(key, value, "one of uniform, popularity")?,
            "min_seq_len" => self.min_seq_len = parse_value(key, value, int)?,
            _ => {
                return Err(config_err(key, format!("unknown key; known keys are {}", KEYS.join(", "))));
            }
        }
        Ok(())
    }

    /// Applies pairs in order; later pairs win.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(), HailError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, HailError> {
        let text = std::fs::read_to_string(path).map_err(|e| HailError::Config {
            key: "config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut cfg = RunConfig::default();
        let pairs = parse_pairs(&text)?;
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HailError> {
        self.train.validate()?;
        if self.min_seq_len < 3 {
            return Err(config_err("min_seq_len", format!("{} is below the minimum of 3", self.min_seq_len)));
        }
        Ok(())
    }

    /// The effective configuration in the same `key=value` form it is read from.
    pub fn render(&self) -> String {
        let t = &self.train;
        let values: BTreeMap<&str, String> = [
            ("alpha", t.alpha.to_string()),
            ("beta", t.beta.to_string()),
            ("peers", t.peers.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_len", t.max_len.to_string()),
            ("d", t.d.to_string()),
            ("d_hidden", t.d_hidden.to_string()),
            ("layers", t.layers.to_string()),
            ("heads", t.heads.to_string()),
            ("mask_ratio", t.mask_ratio.to_string()),
            ("duplication", t.duplication.to_string()),
            ("epochs", t.epochs.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("seed", t.seed.to_string()),
            ("distill_mode", t.distill_mode.to_string()),
            ("truncation_rule", t.truncation_rule.to_string()),
            ("layer_norm", t.layer_norm.to_string()),
            ("patience", t.patience.to_string()),
            ("peer_index", t.peer_index.to_string()),
            ("eval_negatives", t.eval_negatives.to_string()),
            ("negative_sampling", t.negative_sampling.to_string()),
            ("min_seq_len", self.min_seq_len.to_string()),
        ]
        .into_iter()
        .collect();
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", values[key]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let mut c = RunConfig::default();
        c.apply(parse_pairs("").unwrap().iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(c, RunConfig::default());
        let t = &c.train;
        assert_eq!((t.alpha, t.beta, t.batch_size, t.d, t.layers, t.heads), (0.5, 0.0, 256, 64, 2, 2));
    }

    #[test]
    fn comments_and_blank_lines() {
        let pairs = parse_pairs("# header\n\nalpha = 0.3 # inline\nbeta=0\n").unwrap();
        assert_eq!(pairs[0], ("alpha".into(), "0.3".into()));
        assert_eq!(pairs.len(), 2);
        assert!(matches!(parse_pairs("alpha 0.3"), Err(HailError::Parse { line: 1, .. })));
    }

    #[test]
    fn unknown_and_invalid_keys() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("gamma", "1"), Err(HailError::Config { key, .. }) if key == "gamma"));
        assert!(matches!(c.set("d", "-4"), Err(HailError::Config { key, .. }) if key == "d"));
        assert!(matches!(c.set("distill_mode", "teach"), Err(HailError::Config { key, .. }) if key == "distill_mode"));
        c.set("alpha", "1.5").unwrap();
        match c.validate() {
            Err(HailError::Config { key, message }) => {
                assert_eq!(key, "alpha");
                assert!(message.contains("[0, 1]"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.set("alpha", "0.25").unwrap();
        c.set("distill_mode", "mimic").unwrap();
        c.set("min_seq_len", "7").unwrap();
        let text = c.render();
        let mut back = RunConfig::default();
        back.apply(parse_pairs(&text).unwrap().iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
        assert_eq!(text.lines().count(), KEYS.len());
    }
}
