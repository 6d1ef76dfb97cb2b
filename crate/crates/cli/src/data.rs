//! Manifests, seed streams and typed settings built from a [`Config`].

use std::path::{Path, PathBuf};

use flowse_core::signal::wav::read_wav;
use flowse_core::signal::SynthConfig;
use flowse_core::training::{DsmWeighting, Objective};
use flowse_core::{
    Activation, Architecture, PathKind, PathSpec, SdeSpec, SpectroConfig, TrainConfig, Waveform,
};

use crate::{CliError, Config};

pub const MANIFEST_HEADER: &str = "clean,noisy,snr_db,seed";

/// Independent seed for stream `stream` of a run seeded with `seed`
/// (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One manifest row with paths resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub snr_db: f64,
    pub seed: u64,
}

impl Entry {
    pub fn name(&self) -> String {
        self.noisy
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "file".into())
    }

    pub fn load(&self) -> Result<(Waveform, Waveform), CliError> {
        Ok((read_wav(&self.clean)?, read_wav(&self.noisy)?))
    }
}

/// Reads a manifest; paths without commas only, no quoting.
pub fn read_manifest(path: &Path) -> Result<Vec<Entry>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(CliError::Runtime(format!(
            "{}: expected header {MANIFEST_HEADER:?}",
            path.display()
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || CliError::Runtime(format!("{}:{}: malformed row", path.display(), i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(Entry {
                clean: base.join(f[0]),
                noisy: base.join(f[1]),
                snr_db: f[2].parse().map_err(|_| bad())?,
                seed: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn split_manifest(cfg: &Config, split: &str) -> PathBuf {
    Path::new(cfg.str("data.dir"))
        .join(split)
        .join("manifest.csv")
}

pub fn synth(cfg: &Config) -> Result<SynthConfig, CliError> {
    let s = SynthConfig {
        sample_rate: cfg.get("data.sample_rate")?,
        num_samples: cfg.get("data.num_samples")?,
    };
    s.validate()?;
    Ok(s)
}

pub fn spectro(cfg: &Config) -> Result<SpectroConfig, CliError> {
    let s = SpectroConfig {
        window: cfg.get("stft.window")?,
        hop: cfg.get("stft.hop")?,
        n_fft: cfg.get("stft.n_fft")?,
        alpha: cfg.get("stft.alpha")?,
        beta: cfg.get("stft.beta")?,
    };
    s.validate()?;
    Ok(s)
}

pub fn path_spec(cfg: &Config) -> Result<PathSpec, CliError> {
    let kind = match cfg.str("path.kind") {
        "flowse" => PathKind::FlowSe,
        "lipman_ot" => PathKind::LipmanOt,
        other => return Err(CliError::Usage(format!("unknown path.kind {other:?}"))),
    };
    Ok(PathSpec::new(kind, cfg.get("path.sigma")?)?)
}

pub fn sde_spec(cfg: &Config) -> Result<SdeSpec, CliError> {
    let sde = match cfg.str("sde.kind") {
        "flow_equivalent" => SdeSpec::FlowEquivalent {
            sigma: cfg.get("sde.sigma")?,
        },
        "bbed" => SdeSpec::Bbed {
            c: cfg.get("sde.c")?,
            k: cfg.get("sde.k")?,
        },
        other => return Err(CliError::Usage(format!("unknown sde.kind {other:?}"))),
    };
    sde.validate()?;
    Ok(sde)
}

pub fn architecture(cfg: &Config, spectro: &SpectroConfig) -> Result<Architecture, CliError> {
    Ok(Architecture {
        frame_len: 2 * spectro.bins(),
        hidden: cfg.list("model.hidden")?,
        activation: cfg.get::<Activation>("model.activation")?,
        time_embed: cfg.get("model.time_embed")?,
        context: cfg.get("model.context")?,
    })
}

fn weighting(cfg: &Config) -> Result<DsmWeighting, CliError> {
    match cfg.str("train.dsm_weighting") {
        "unweighted" => Ok(DsmWeighting::Unweighted),
        "variance" => Ok(DsmWeighting::Variance),
        "flow_matching" => Ok(DsmWeighting::FlowMatching),
        other => Err(CliError::Usage(format!(
            "unknown train.dsm_weighting {other:?}"
        ))),
    }
}

pub fn train_config(cfg: &Config) -> Result<TrainConfig, CliError> {
    let seed: u64 = cfg.get("run.seed")?;
    let steps: usize = cfg.get("train.steps_per_epoch")?;
    let c = TrainConfig {
        objective: cfg.get::<Objective>("train.objective")?,
        path: path_spec(cfg)?,
        sde: sde_spec(cfg)?,
        learning_rate: cfg.get("train.lr")?,
        batch_size: cfg.get("train.batch_size")?,
        epochs: cfg.get("train.epochs")?,
        steps_per_epoch: (steps > 0).then_some(steps),
        t_delta: cfg.get("train.t_delta")?,
        ema_decay: cfg.get("train.ema_decay")?,
        seed: derive_seed(seed, 1),
        n_rev: cfg.get("train.n_rev")?,
        t_rsp: cfg.get("train.t_rsp")?,
        crp_full_backprop: cfg.get("train.crp_full_backprop")?,
        dsm_weighting: weighting(cfg)?,
        validation_nfe: cfg.get("train.validation_nfe")?,
    };
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_per_stream_and_seed() {
        let a: Vec<u64> = (0..100).map(|s| derive_seed(7, s)).collect();
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
        assert_eq!(derive_seed(7, 3), a[3]);
    }

    #[test]
    fn defaults_build_valid_settings() {
        let cfg = Config::default();
        let spectro = spectro(&cfg).unwrap();
        assert_eq!(architecture(&cfg, &spectro).unwrap().frame_len, 128);
        let t = train_config(&cfg).unwrap();
        assert_eq!(t.steps_per_epoch, Some(100));
        assert_eq!(t.dsm_weighting, DsmWeighting::FlowMatching);
        synth(&cfg).unwrap();
    }

    #[test]
    fn bad_enum_values_are_usage_errors() {
        let mut cfg = Config::default();
        cfg.set("path.kind", "straight").unwrap();
        assert!(matches!(path_spec(&cfg), Err(CliError::Usage(_))));
        cfg.set("train.objective", "gan").unwrap();
        assert!(matches!(train_config(&cfg), Err(CliError::Usage(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        std::fs::write(
            &p,
            format!("{MANIFEST_HEADER}\nclean/a.wav,noisy/a.wav,3.5,42\n"),
        )
        .unwrap();
        let rows = read_manifest(&p).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].noisy, dir.path().join("noisy/a.wav"));
        assert_eq!((rows[0].snr_db, rows[0].seed), (3.5, 42));
        assert_eq!(rows[0].name(), "a");
        std::fs::write(&p, "a,b\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }
}
