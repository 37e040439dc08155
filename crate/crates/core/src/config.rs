//! Flat key=value run configuration.
//!
//! A run file is plain text: one `key = value` pair per line, `#` comments
//! and blank lines ignored. Keys are checked against the full list of
//! recognized settings; an unknown key is an error rather than a silent
//! no-op, so typos cannot quietly fall back to defaults.

use std::collections::BTreeMap;

use crate::adapt::{AdaptConfig, RunMode};
use crate::data::{CorruptionKind, CorruptionSpec};
use crate::model::BnMode;
use crate::swr::ThetaStarPolicy;
use crate::{Error, Result};

/// Parsed key=value pairs, order-independent.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    entries: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut entries = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config {
                detail: format!("line {}: expected key = value, got {line:?}", lineno + 1),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config {
                detail: format!("line {}: empty key", lineno + 1),
            });
        }
        if entries.insert(key.clone(), value).is_some() {
            return Err(Error::Config {
                detail: format!("line {}: duplicate key {key:?}", lineno + 1),
            });
        }
    }
    Ok(FileConfig { entries })
}

impl FileConfig {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Removes a key, returning its value. The command layer uses this to
    /// consume path-like keys before the plan check rejects leftovers.
    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config {
                detail: format!("{key}: expected a number, got {v:?}"),
            }),
        }
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Config {
                detail: format!("{key}: expected an unsigned integer, got {v:?}"),
            }),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config {
                detail: format!("{key}: expected an unsigned integer, got {v:?}"),
            }),
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config {
                detail: format!("{key}: expected true or false, got {v:?}"),
            }),
        }
    }
}

/// Everything one `adapt` invocation needs beyond the artifacts.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub adapt: AdaptConfig,
    pub corruption: CorruptionSpec,
    pub stream_seed: u64,
    pub run_id: String,
}

/// Every key a run config may set. The command layer also exposes each of
/// these as an `--key value` override.
pub const KNOWN_KEYS: &[&str] = &[
    "mode",
    "lr",
    "lambda_m1",
    "lambda_m2",
    "lambda_a1",
    "lambda_a2",
    "lambda_s",
    "lambda_r",
    "bn_stats",
    "anchor",
    "epochs",
    "batch_size",
    "stop_grad",
    "test_time_ema",
    "projector_finetune",
    "corruption",
    "severity",
    "seed",
    "run_id",
];

/// Builds a run plan from a parsed file. `fallback_seed` covers the case
/// where the file has no `seed` key (the CLI passes `TTA_SEED` here); with
/// neither present the plan is rejected.
pub fn build_run_plan(cfg: &FileConfig, fallback_seed: Option<u64>) -> Result<RunPlan> {
    let unknown: Vec<&str> = cfg
        .entries
        .keys()
        .map(|k| k.as_str())
        .filter(|k| !KNOWN_KEYS.contains(k))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Config {
            detail: format!("unknown keys: {}", unknown.join(", ")),
        });
    }

    let defaults = AdaptConfig::default();
    let mode = match cfg.get("mode") {
        None => defaults.mode,
        Some(name) => RunMode::from_name(name).map_err(|_| Error::Config {
            detail: format!("mode: unknown run mode {name:?}"),
        })?,
    };
    let bn_mode = match cfg.get("bn_stats") {
        None => defaults.bn_mode,
        Some("batch") => BnMode::Batch,
        Some("running") => BnMode::Running,
        Some(v) => {
            return Err(Error::Config {
                detail: format!("bn_stats: expected batch or running, got {v:?}"),
            })
        }
    };
    let theta_star_policy = match cfg.get("anchor") {
        None => defaults.theta_star_policy,
        Some("prev") => ThetaStarPolicy::UpdatePrev,
        Some("source") => ThetaStarPolicy::FrozenSource,
        Some(v) => {
            return Err(Error::Config {
                detail: format!("anchor: expected prev or source, got {v:?}"),
            })
        }
    };

    let adapt = AdaptConfig {
        mode,
        lr: cfg.f64("lr", defaults.lr)?,
        lambda_m1: cfg.f64("lambda_m1", defaults.lambda_m1)?,
        lambda_m2: cfg.f64("lambda_m2", defaults.lambda_m2)?,
        lambda_a1: cfg.f64("lambda_a1", defaults.lambda_a1)?,
        lambda_a2: cfg.f64("lambda_a2", defaults.lambda_a2)?,
        lambda_s: cfg.f64("lambda_s", defaults.lambda_s)?,
        lambda_r: cfg.f64("lambda_r", defaults.lambda_r)?,
        bn_mode,
        theta_star_policy,
        epochs: cfg.usize("epochs", defaults.epochs)?,
        stop_grad: cfg.bool("stop_grad", defaults.stop_grad)?,
        test_time_ema: cfg.bool("test_time_ema", defaults.test_time_ema)?,
        projector_finetune: cfg.bool("projector_finetune", defaults.projector_finetune)?,
        batch_size: cfg.usize("batch_size", defaults.batch_size)?,
    };
    adapt.validate()?;

    let kind = match cfg.get("corruption") {
        None => CorruptionKind::GaussianNoise,
        Some(name) => CorruptionKind::from_name(name).map_err(|_| Error::Config {
            detail: format!("corruption: unknown kind {name:?}"),
        })?,
    };
    let severity = cfg.usize("severity", 5)?;
    let severity = u8::try_from(severity).map_err(|_| Error::Config {
        detail: format!("severity: {severity} out of range"),
    })?;
    let corruption = CorruptionSpec::new(kind, severity).map_err(|e| Error::Config {
        detail: format!("severity: {e}"),
    })?;

    let stream_seed = match cfg.u64("seed")? {
        Some(s) => s,
        None => fallback_seed.ok_or_else(|| Error::Config {
            detail: "seed: missing from config and no TTA_SEED fallback set".into(),
        })?,
    };

    let run_id = match cfg.get("run_id") {
        Some(id) if !id.is_empty() => id.to_string(),
        _ => format!(
            "{}-{}{}-s{}",
            adapt.mode.name(),
            corruption.kind.name(),
            corruption.severity,
            stream_seed
        ),
    };
    if run_id.contains(',') || run_id.chars().any(char::is_whitespace) {
        return Err(Error::Config {
            detail: format!("run_id: {run_id:?} may not contain commas or whitespace"),
        });
    }

    Ok(RunPlan {
        adapt,
        corruption,
        stream_seed,
        run_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = parse_config("seed = 9\n").unwrap();
        let plan = build_run_plan(&cfg, None).unwrap();
        assert_eq!(plan.adapt.mode, RunMode::Full);
        assert_eq!(plan.stream_seed, 9);
        assert_eq!(plan.corruption.severity, 5);
        assert_eq!(plan.run_id, "full-gaussian_noise5-s9");
    }

    #[test]
    fn full_file_parses() {
        let text = "\
# a comment
mode = main_swr
lr = 0.01
lambda_r = 125
bn_stats = batch
anchor = source
epochs = 2
batch_size = 16
stop_grad = false
corruption = contrast
severity = 3
seed = 4
run_id = my-run
";
        let cfg = parse_config(text).unwrap();
        let plan = build_run_plan(&cfg, None).unwrap();
        assert_eq!(plan.adapt.mode, RunMode::MainSwr);
        assert_eq!(plan.adapt.lr, 0.01);
        assert_eq!(plan.adapt.lambda_r, 125.0);
        assert_eq!(plan.adapt.theta_star_policy, ThetaStarPolicy::FrozenSource);
        assert_eq!(plan.adapt.epochs, 2);
        assert!(!plan.adapt.stop_grad);
        assert_eq!(plan.corruption.kind, CorruptionKind::Contrast);
        assert_eq!(plan.corruption.severity, 3);
        assert_eq!(plan.run_id, "my-run");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = parse_config("seed = 1\nlearning_rate = 0.1\n").unwrap();
        match build_run_plan(&cfg, None) {
            Err(Error::Config { detail }) => assert!(detail.contains("learning_rate")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(parse_config("just words\n").is_err());
        assert!(parse_config("= value\n").is_err());
        assert!(parse_config("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn seed_fallback_applies_only_when_missing() {
        let cfg = parse_config("").unwrap();
        assert!(build_run_plan(&cfg, None).is_err());
        let plan = build_run_plan(&cfg, Some(77)).unwrap();
        assert_eq!(plan.stream_seed, 77);
        let cfg = parse_config("seed = 5\n").unwrap();
        let plan = build_run_plan(&cfg, Some(77)).unwrap();
        assert_eq!(plan.stream_seed, 5);
    }

    #[test]
    fn bad_values_are_reported_with_their_key() {
        let cfg = parse_config("seed = 1\nlr = fast\n").unwrap();
        match build_run_plan(&cfg, None) {
            Err(Error::Config { detail }) => assert!(detail.starts_with("lr:")),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = parse_config("seed = 1\nseverity = 9\n").unwrap();
        assert!(build_run_plan(&cfg, None).is_err());
        let cfg = parse_config("seed = 1\nepochs = 7\n").unwrap();
        assert!(build_run_plan(&cfg, None).is_err());
        let cfg = parse_config("seed = 1\nrun_id = has space\n").unwrap();
        assert!(build_run_plan(&cfg, None).is_err());
    }
}
