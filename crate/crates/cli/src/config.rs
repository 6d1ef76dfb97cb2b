//! Line-based run configuration.
//!
//! ```text
//! # comment
//! [train]
//! lr = 3e-4
//! ```
//!
//! Every key has a default; files and `--set section.key=value` overrides may
//! only change known keys. The resolved table is written next to each run's
//! outputs so the run can be repeated from it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// `(section.key, default, meaning)`.
const KEYS: &[(&str, &str, &str)] = &[
    (
        "run.seed",
        "0",
        "master seed; every random stream is derived from it",
    ),
    ("data.dir", "data", "dataset directory"),
    ("data.sample_rate", "8000", "Hz"),
    ("data.num_samples", "4000", "samples per clip"),
    ("data.train", "500", "training pairs"),
    ("data.valid", "50", "validation pairs"),
    ("data.test", "50", "test pairs"),
    ("data.snr_min", "0", "dB"),
    ("data.snr_max", "20", "dB"),
    (
        "data.peak",
        "0.9",
        "peak level of the louder file of a pair",
    ),
    ("stft.window", "126", "Hann window length"),
    ("stft.hop", "32", ""),
    ("stft.n_fft", "126", ""),
    ("stft.alpha", "0.5", "magnitude compression exponent"),
    ("stft.beta", "0.15", "compressed-domain scale"),
    ("path.kind", "flowse", "flowse | lipman_ot"),
    ("path.sigma", "0.487", ""),
    ("sde.kind", "flow_equivalent", "flow_equivalent | bbed"),
    ("sde.sigma", "0.487", "flow_equivalent only"),
    ("sde.c", "0.1", "bbed only"),
    ("sde.k", "2", "bbed only"),
    ("model.hidden", "128,128,128", "hidden layer widths"),
    ("model.activation", "silu", "silu | tanh"),
    ("model.time_embed", "16", "sinusoidal time features"),
    ("model.context", "2", "noisy frames of context on each side"),
    ("train.objective", "cfm", "cfm | dsm | crp"),
    (
        "train.init",
        "",
        "checkpoint to start from (required for crp)",
    ),
    ("train.lr", "3e-4", ""),
    ("train.batch_size", "8", ""),
    ("train.epochs", "30", ""),
    (
        "train.steps_per_epoch",
        "100",
        "0 means one pass over the chunks",
    ),
    (
        "train.chunk_frames",
        "32",
        "spectrogram frames per training example",
    ),
    ("train.ema_decay", "0.999", ""),
    ("train.t_delta", "0.03", ""),
    (
        "train.valid_clips",
        "20",
        "validation clips scored after each epoch",
    ),
    ("train.validation_nfe", "5", ""),
    (
        "train.dsm_weighting",
        "flow_matching",
        "unweighted | variance | flow_matching",
    ),
    ("train.n_rev", "5", "crp reverse steps"),
    ("train.t_rsp", "0.97", "crp start time"),
    ("train.crp_full_backprop", "false", ""),
    ("enhance.checkpoint", "", ""),
    ("enhance.input", "", "a WAV file or a manifest CSV"),
    (
        "enhance.clean",
        "",
        "clean reference for a single WAV input",
    ),
    ("enhance.nfe", "5", ""),
    (
        "enhance.sampler",
        "",
        "fm | pfode | eum; empty picks the checkpoint's own",
    ),
    ("enhance.threads", "0", "0 uses all cores"),
    ("bench.checkpoint", "", ""),
    (
        "bench.manifest",
        "",
        "defaults to <data.dir>/test/manifest.csv",
    ),
    ("bench.samplers", "fm,pfode,eum", ""),
    ("bench.nfe", "1,2,3,4,5,50", ""),
    ("verify.inject_fault", "none", "none | field_sign"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Config {
    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            cfg.apply_text(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| CliError::Usage(format!("line {}: {m}", n + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("bad section header {line:?}")))?
                    .trim();
                if !KEYS
                    .iter()
                    .any(|(k, _, _)| k.split('.').next() == Some(name))
                {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| err("key outside of any [section]".into()))?;
            self.set(&format!("{sec}.{}", k.trim()), v.trim())
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(key);
        raw.parse()
            .map_err(|e| CliError::Usage(format!("{key} = {raw:?}: {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Usage(format!("{key}: {s:?}: {e}")))
            })
            .collect()
    }

    /// Empty values mean "not set".
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.str(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    /// The full table in the file format, with the command that produced it.
    pub fn snapshot(&self, command: &str) -> String {
        let mut out = format!("# resolved configuration for `{command}`\n");
        let mut current = "";
        for (key, value) in &self.values {
            let (sec, name) = key.split_once('.').expect("dotted key");
            if sec != current {
                let _ = write!(out, "\n[{sec}]\n");
                current = sec;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    pub fn write_snapshot(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let path = dir.join("config.resolved");
        std::fs::write(&path, self.snapshot(command)).map_err(CliError::io(&path))
    }
}

/// Table of keys, defaults and meanings for `--help`.
pub fn describe_keys() -> String {
    let mut out = String::new();
    for (k, v, m) in KEYS {
        let _ = writeln!(out, "  {k:<26} {v:<16} {m}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_overrides_apply_in_order() {
        let mut cfg = Config::default();
        cfg.apply_text("# c\n[train]\nlr = 1e-3  # inline\n\n[data]\ntrain=20\n")
            .unwrap();
        assert_eq!(cfg.get::<f64>("train.lr").unwrap(), 1e-3);
        assert_eq!(cfg.get::<usize>("data.train").unwrap(), 20);
        cfg.set("train.lr", "2e-3").unwrap();
        assert_eq!(cfg.str("train.lr"), "2e-3");
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let mut cfg = Config::default();
        assert!(cfg.apply_text("[train]\nlearning_rate = 1\n").is_err());
        assert!(cfg.apply_text("[nope]\n").is_err());
        assert!(cfg.apply_text("lr = 1\n").is_err());
        assert!(cfg.apply_text("[train\n").is_err());
        assert!(cfg.set("train", "1").is_err());
    }

    #[test]
    fn snapshot_parses_back_to_the_same_table() {
        let mut cfg = Config::default();
        cfg.set("model.hidden", "8,8").unwrap();
        let mut back = Config::default();
        back.apply_text(&cfg.snapshot("train")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn lists_and_paths() {
        let cfg = Config::default();
        assert_eq!(
            cfg.list::<usize>("bench.nfe").unwrap(),
            vec![1, 2, 3, 4, 5, 50]
        );
        assert_eq!(cfg.path("train.init"), None);
        assert!(cfg.get::<usize>("train.lr").is_err());
    }
}
