use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{parse_model_spec, ModelDims};

/// Prefix of environment variables that override config keys, e.g.
/// `TASTAS_SEED=3` or `TASTAS_MAX_EPOCHS=20`.
pub const ENV_PREFIX: &str = "TASTAS_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {detail}")]
    BadValue {
        key: String,
        value: String,
        detail: String,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Everything the trainer needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model_spec: String,
    pub dims: ModelDims,
    pub learning_rate: f64,
    /// Factor applied to the step size on a validation plateau.
    pub lr_decay: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Training crop length in samples.
    pub segment_len: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before a step stops.
    pub patience: usize,
    /// Minimum validation-loss decrease that counts as improvement.
    pub tolerance: f64,
    pub lambda_id: f64,
    pub online_remix: bool,
    pub seed: u64,
    /// Worker threads for per-item gradients; 0 uses every core.
    pub workers: usize,
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_spec: "TasTas(I, 6, 6)".into(),
            dims: ModelDims::default(),
            learning_rate: 1e-3,
            lr_decay: 0.5,
            clip_norm: 5.0,
            batch_size: 4,
            segment_len: 32_000,
            max_epochs: 100,
            patience: 10,
            tolerance: 1e-4,
            lambda_id: 0.1,
            online_remix: false,
            seed: 0,
            workers: 0,
            train_manifest: None,
            valid_manifest: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Recognised keys, in the order `to_kv_text` writes them.
pub const CONFIG_KEYS: &[&str] = &[
    "model_spec",
    "basis",
    "kernel",
    "feature",
    "chunk",
    "hidden",
    "embed",
    "id_hidden",
    "learning_rate",
    "lr_decay",
    "clip_norm",
    "batch_size",
    "segment_len",
    "max_epochs",
    "patience",
    "tolerance",
    "lambda_id",
    "online_remix",
    "seed",
    "workers",
    "train_manifest",
    "valid_manifest",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        detail: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            detail: "expected a boolean".into(),
        }),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "model_spec" => {
                parse_model_spec(v).map_err(|e| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    detail: e.to_string(),
                })?;
                self.model_spec = v.to_string();
            }
            "basis" => self.dims.basis = parse(key, v)?,
            "kernel" => self.dims.kernel = parse(key, v)?,
            "feature" => self.dims.feature = parse(key, v)?,
            "chunk" => self.dims.chunk = parse(key, v)?,
            "hidden" => self.dims.hidden = parse(key, v)?,
            "embed" => self.dims.embed = parse(key, v)?,
            "id_hidden" => self.dims.id_hidden = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "segment_len" => self.segment_len = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "tolerance" => self.tolerance = parse(key, v)?,
            "lambda_id" => self.lambda_id = parse(key, v)?,
            "online_remix" => self.online_remix = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "train_manifest" => self.train_manifest = Some(PathBuf::from(v)),
            "valid_manifest" => self.valid_manifest = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Applies `TASTAS_<KEY>` variables. Unrecognised names are ignored so
    /// unrelated variables sharing the prefix do not break a run.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_ascii_lowercase();
            if CONFIG_KEYS.contains(&key.as_str()) {
                self.set(&key, &value)?;
            }
        }
        Ok(())
    }

    /// Default, then file, then environment, then flags; later wins.
    pub fn layered<I>(
        file: Option<&Path>,
        env: I,
        flags: &[(String, String)],
    ) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut cfg = Self::default();
        if let Some(p) = file {
            cfg.apply_file(p)?;
        }
        cfg.apply_env(env)?;
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.patience < 1 {
            return bad("patience must be >= 1");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1");
        }
        if !(self.lambda_id >= 0.0) {
            return bad("lambda_id must be >= 0");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning_rate must be > 0 and lr_decay in (0, 1]");
        }
        if !(self.clip_norm > 0.0) || !(self.tolerance >= 0.0) {
            return bad("clip_norm must be > 0 and tolerance >= 0");
        }
        if self.segment_len < self.dims.kernel {
            return bad("segment_len must cover at least one encoder kernel");
        }
        self.dims
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Canonical `key = value` listing of every setting.
    pub fn to_kv_text(&self) -> String {
        let d = &self.dims;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<String> = vec![
            self.model_spec.clone(),
            d.basis.to_string(),
            d.kernel.to_string(),
            d.feature.to_string(),
            d.chunk.to_string(),
            d.hidden.to_string(),
            d.embed.to_string(),
            d.id_hidden.to_string(),
            self.learning_rate.to_string(),
            self.lr_decay.to_string(),
            self.clip_norm.to_string(),
            self.batch_size.to_string(),
            self.segment_len.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.tolerance.to_string(),
            self.lambda_id.to_string(),
            self.online_remix.to_string(),
            self.seed.to_string(),
            self.workers.to_string(),
            opt(&self.train_manifest),
            opt(&self.valid_manifest),
            self.out_dir.display().to_string(),
        ];
        let mut out = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            if !v.is_empty() {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_env_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("t.cfg");
        std::fs::write(&file, "# toy\nseed = 1\nmax_epochs = 7\npatience=2\nbatch_size = 3\n").unwrap();
        let env = vec![
            ("TASTAS_SEED".to_string(), "2".to_string()),
            ("TASTAS_MAX_EPOCHS".to_string(), "9".to_string()),
            ("TASTAS_UNRELATED".to_string(), "x".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let flags = vec![("seed".to_string(), "3".to_string())];
        let cfg = TrainConfig::layered(Some(&file), env, &flags).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.max_epochs, 9);
        assert_eq!(cfg.patience, 2);
        assert_eq!(cfg.batch_size, 3);
        assert_eq!(cfg.learning_rate, 1e-3);
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("model_spec = TasTas(I, 2, 2)\nonline_remix = yes\nbasis = 16\ntrain_manifest = a/b.jsonl").unwrap();
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = TrainConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(cfg.set("seed", "x"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(cfg.set("model_spec", "TasTas()"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(cfg.apply_text("seed 3"), Err(ConfigError::Syntax { line: 1 })));
        for (k, v) in [("patience", "0"), ("max_epochs", "0"), ("lambda_id", "-1")] {
            let mut c = TrainConfig::default();
            c.set(k, v).unwrap();
            assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))), "{k}");
        }
    }
}
