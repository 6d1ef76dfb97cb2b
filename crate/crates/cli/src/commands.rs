//! One function per subcommand. Each writes `config.resolved` into its
//! output directory before doing anything else.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowse_core::signal::enhance::{
    bridged_inference, chunk_pair, enhance_bridged, prepare_pair, WaveformValidator,
};
use flowse_core::signal::metrics::{si_metrics, si_sdr, MetricsRecord};
use flowse_core::signal::wav::{joint_gain, read_wav, write_wav};
use flowse_core::signal::{mix_at_snr, residual, synth_clean, synth_noise};
use flowse_core::training::{self, TrainOutcome};
use flowse_core::verify::{run_all, Check, Fault, VerifyOptions};
use flowse_core::{Checkpoint, Error, FieldModel, Sampler, Waveform};

use crate::data::{self, derive_seed, Entry, MANIFEST_HEADER};
use crate::{CliError, Config};

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(CliError::io(path))
}

fn threads(cfg: &Config) -> Result<usize, CliError> {
    let n: usize = cfg.get("enhance.threads")?;
    Ok(if n > 0 {
        n
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    })
}

/// `f(0..n)` on `workers` threads; results keep their index order.
fn par_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T, CliError>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index is visited"))
        .collect()
}

pub fn gen_data(cfg: &Config, out: &Path) -> Result<(), CliError> {
    cfg.write_snapshot(out, "gen-data")?;
    let synth = data::synth(cfg)?;
    let seed: u64 = cfg.get("run.seed")?;
    let (lo, hi): (f64, f64) = (cfg.get("data.snr_min")?, cfg.get("data.snr_max")?);
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(CliError::Usage("data.snr_min exceeds data.snr_max".into()));
    }
    let peak: f64 = cfg.get("data.peak")?;
    if !(peak > 0.0 && peak <= 1.0) {
        return Err(CliError::Usage("data.peak must lie in (0, 1]".into()));
    }
    for (s, split) in SPLITS.iter().enumerate() {
        let count: usize = cfg.get(&format!("data.{split}"))?;
        let dir = out.join(split);
        create_dir(&dir.join("clean"))?;
        create_dir(&dir.join("noisy"))?;
        let mut manifest = format!("{MANIFEST_HEADER}\n");
        for i in 0..count {
            let clip_seed = derive_seed(seed, ((s as u64) << 32) | i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
            let clean = synth_clean(&synth, &mut rng)?;
            let noise = synth_noise(&synth, &mut rng)?;
            let snr: f64 = rng.random_range(lo..=hi);
            let noisy = mix_at_snr(&clean, &noise, snr)?;
            let g = joint_gain(&[&clean, &noisy], peak);
            let name = format!("{split}_{i:04}.wav");
            write_wav(&dir.join("clean").join(&name), &clean.scaled(g))?;
            write_wav(&dir.join("noisy").join(&name), &noisy.scaled(g))?;
            let _ = writeln!(manifest, "clean/{name},noisy/{name},{snr},{clip_seed}");
        }
        write_file(&dir.join("manifest.csv"), &manifest)?;
        println!("{split}: {count} pairs in {}", dir.display());
    }
    Ok(())
}

fn load_entries(entries: &[Entry]) -> Result<Vec<(Waveform, Waveform)>, CliError> {
    entries.iter().map(Entry::load).collect()
}

pub fn train(cfg: &Config, out: &Path) -> Result<TrainOutcome, CliError> {
    cfg.write_snapshot(out, "train")?;
    let seed: u64 = cfg.get("run.seed")?;
    let spectro = data::spectro(cfg)?;
    let config = data::train_config(cfg)?;
    let chunk_frames: usize = cfg.get("train.chunk_frames")?;

    let train_set = load_entries(&data::read_manifest(&data::split_manifest(cfg, "train"))?)?;
    let mut pairs = Vec::new();
    for (clean, noisy) in &train_set {
        pairs.extend(chunk_pair(
            &prepare_pair(clean, noisy, &spectro)?,
            chunk_frames,
        )?);
    }
    let n_valid: usize = cfg.get("train.valid_clips")?;
    let valid = data::read_manifest(&data::split_manifest(cfg, "valid"))?;
    let validator = WaveformValidator {
        items: load_entries(&valid[..n_valid.min(valid.len())])?,
        spectro,
        seed: derive_seed(seed, 2),
    };

    let init = match cfg.path("train.init") {
        Some(p) => {
            let ckpt = Checkpoint::load(&p)?;
            let model = ckpt.ema_model()?;
            if model.architecture().frame_len != 2 * spectro.bins() {
                return Err(CliError::Usage(format!(
                    "{} was trained on a different STFT size",
                    p.display()
                )));
            }
            model
        }
        None if config.objective == training::Objective::Crp => {
            return Err(CliError::Usage(
                "crp fine-tuning needs train.init (a score checkpoint)".into(),
            ))
        }
        None => FieldModel::new(
            data::architecture(cfg, &spectro)?,
            config.mode(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 3)),
        )?,
    };

    println!(
        "training {} on {} chunks from {} clips, {} validation clips",
        config.objective.name(),
        pairs.len(),
        train_set.len(),
        validator.items.len()
    );
    let outcome = match training::train(&config, init, &pairs, &validator, |row| {
        if let Some(v) = row.validation {
            println!(
                "epoch {:>3} step {:>6} loss {:.6} validation {:.3}",
                row.epoch, row.step, row.loss, v
            );
        }
    }) {
        Ok(o) => o,
        Err(Error::Diverged { step, last_good }) => {
            let p = out.join("last_good.json");
            last_good.save(&p)?;
            return Err(CliError::Runtime(format!(
                "training diverged at step {step}; last finite state saved to {}",
                p.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let mut log = String::from("step,epoch,loss,validation\n");
    for r in &outcome.log {
        let v = r.validation.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(log, "{},{},{},{}", r.step, r.epoch, r.loss, v);
    }
    write_file(&out.join("log.csv"), &log)?;
    outcome.best.save(&out.join("best.json"))?;
    outcome.last.save(&out.join("last.json"))?;
    println!(
        "best validation {:?} at step {}; checkpoints in {}",
        outcome.best.validation,
        outcome.best.step,
        out.display()
    );
    Ok(outcome)
}

fn load_checkpoint(cfg: &Config, key: &str) -> Result<Checkpoint, CliError> {
    let path = cfg
        .path(key)
        .ok_or_else(|| CliError::Usage(format!("{key} is not set")))?;
    if !path.is_file() {
        return Err(CliError::Runtime(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(Checkpoint::load(&path)?)
}

fn sampler_for(cfg: &Config, ckpt: &Checkpoint) -> Result<Sampler, CliError> {
    match cfg.str("enhance.sampler") {
        "" => Ok(ckpt.config.objective.sampler()),
        s => Ok(s.parse()?),
    }
}

/// One enhanced file; metrics are present when a clean reference is known.
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub name: String,
    pub snr_db: Option<f64>,
    pub metrics: Option<MetricsRecord>,
}

struct Job {
    name: String,
    noisy: PathBuf,
    clean: Option<PathBuf>,
    snr_db: Option<f64>,
}

pub fn enhance(cfg: &Config, out: &Path) -> Result<Vec<Enhanced>, CliError> {
    cfg.write_snapshot(out, "enhance")?;
    let ckpt = load_checkpoint(cfg, "enhance.checkpoint")?;
    let model = ckpt.ema_model()?;
    let spectro = data::spectro(cfg)?;
    let nfe: usize = cfg.get("enhance.nfe")?;
    let inference = bridged_inference(&ckpt, sampler_for(cfg, &ckpt)?, nfe);
    let seed: u64 = cfg.get("run.seed")?;

    let input = cfg
        .path("enhance.input")
        .ok_or_else(|| CliError::Usage("enhance.input is not set".into()))?;
    let jobs: Vec<Job> = if input.extension().is_some_and(|e| e == "csv") {
        data::read_manifest(&input)?
            .into_iter()
            .map(|e| Job {
                name: e.name(),
                noisy: e.noisy,
                clean: Some(e.clean),
                snr_db: Some(e.snr_db),
            })
            .collect()
    } else {
        vec![Job {
            name: input
                .file_stem()
                .map_or("input".into(), |s| s.to_string_lossy().into_owned()),
            noisy: input.clone(),
            clean: cfg.path("enhance.clean"),
            snr_db: None,
        }]
    };

    let wav_dir = out.join("wav");
    create_dir(&wav_dir)?;
    let results = par_map(jobs.len(), threads(cfg)?, |i| {
        let job = &jobs[i];
        let noisy = read_wav(&job.noisy)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let est = enhance_bridged(&model, &inference, &noisy, &spectro, &mut rng)?;
        write_wav(&wav_dir.join(format!("{}.wav", job.name)), &est)?;
        let (snr_db, metrics) = match &job.clean {
            Some(p) => {
                let clean = read_wav(p)?;
                let noise = residual(&noisy, &clean)?;
                let snr = job
                    .snr_db
                    .unwrap_or_else(|| 10.0 * (clean.energy() / noise.energy()).log10());
                let m = si_metrics(est.samples(), clean.samples(), noise.samples())?;
                (Some(snr), Some(m))
            }
            None => (None, None),
        };
        Ok(Enhanced {
            name: job.name.clone(),
            snr_db,
            metrics,
        })
    })?;

    let mut csv = String::from("file,snr_db,si_sdr,si_sir,si_sar,capped_flags\n");
    for r in &results {
        let snr = r.snr_db.map(|s| s.to_string()).unwrap_or_default();
        match &r.metrics {
            Some(m) => {
                let ([a, b, c], flags) = m.capped();
                let _ = writeln!(csv, "{},{snr},{a},{b},{c},{flags}", r.name);
            }
            None => {
                let _ = writeln!(csv, "{},{snr},,,,-", r.name);
            }
        }
    }
    write_file(&out.join("metrics.csv"), &csv)?;
    let scored: Vec<f64> = results
        .iter()
        .filter_map(|r| r.metrics.map(|m| m.si_sdr))
        .collect();
    print!(
        "enhanced {} file(s) with {} at NFE {}",
        results.len(),
        inference.sampler.name(),
        nfe
    );
    if !scored.is_empty() {
        print!(
            ", mean SI-SDR {:.3} dB",
            scored.iter().sum::<f64>() / scored.len() as f64
        );
    }
    println!();
    Ok(results)
}

/// Mean and 95% normal-approximation confidence half-width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub sampler: Sampler,
    pub nfe: usize,
    pub mean_si_sdr: f64,
    pub ci95: f64,
    /// Mean SI-SDR gain over the noisy input.
    pub gain: f64,
    pub files: usize,
}

pub fn bench(cfg: &Config, out: &Path) -> Result<Vec<BenchRow>, CliError> {
    cfg.write_snapshot(out, "bench")?;
    let ckpt = load_checkpoint(cfg, "bench.checkpoint")?;
    let model = ckpt.ema_model()?;
    let spectro = data::spectro(cfg)?;
    let seed: u64 = cfg.get("run.seed")?;
    let manifest = cfg
        .path("bench.manifest")
        .unwrap_or_else(|| data::split_manifest(cfg, "test"));
    let files = load_entries(&data::read_manifest(&manifest)?)?;
    if files.is_empty() {
        return Err(CliError::Usage(format!(
            "{} lists no files",
            manifest.display()
        )));
    }
    let noisy_scores = files
        .iter()
        .map(|(c, n)| si_sdr(n.samples(), c.samples()))
        .collect::<Result<Vec<_>, _>>()?;
    let (noisy_mean, _) = mean_ci95(&noisy_scores);
    println!("noisy input: {noisy_mean:.3} dB over {} files", files.len());

    let workers = threads(cfg)?;
    let mut rows = Vec::new();
    for sampler in cfg.list::<Sampler>("bench.samplers")? {
        for nfe in cfg.list::<usize>("bench.nfe")? {
            let inference = bridged_inference(&ckpt, sampler, nfe);
            let scores = par_map(files.len(), workers, |i| {
                let (clean, noisy) = &files[i];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                let est = enhance_bridged(&model, &inference, noisy, &spectro, &mut rng)?;
                Ok(si_sdr(est.samples(), clean.samples())?)
            })?;
            let (mean, ci) = mean_ci95(&scores);
            println!(
                "{:>5} NFE {:>3}: {mean:.3} dB (+-{ci:.3})",
                sampler.name(),
                nfe
            );
            rows.push(BenchRow {
                sampler,
                nfe,
                mean_si_sdr: mean,
                ci95: ci,
                gain: mean - noisy_mean,
                files: files.len(),
            });
        }
    }
    let mut csv = String::from("sampler,nfe,mean_si_sdr,ci95_half_width,mean_gain_db,files\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.sampler.name(),
            r.nfe,
            r.mean_si_sdr,
            r.ci95,
            r.gain,
            r.files
        );
    }
    write_file(&out.join("bench.csv"), &csv)?;
    Ok(rows)
}

pub fn format_checks(checks: &[Check]) -> String {
    let mut s = format!(
        "{:<10} {:<46} {:>12} {:>12}  result\n",
        "module", "check", "measured", "tolerance"
    );
    for c in checks {
        let _ = writeln!(
            s,
            "{:<10} {:<46} {:>12.3e} {:>12.3e}  {}",
            c.module,
            c.name,
            c.measured,
            c.tolerance,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    s
}

pub fn verify(cfg: &Config, out: &Path) -> Result<(), CliError> {
    cfg.write_snapshot(out, "verify")?;
    let fault = match cfg.str("verify.inject_fault") {
        "none" => None,
        f => Some(f.parse::<Fault>()?),
    };
    let seed: u64 = cfg.get("run.seed")?;
    let opts = VerifyOptions {
        seed: VerifyOptions::default().seed.wrapping_add(seed),
        fault,
    };
    let checks = run_all(&opts)?;
    let table = format_checks(&checks);
    print!("{table}");
    let mut csv = String::from("module,check,measured,tolerance,passed\n");
    for c in &checks {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            c.module, c.name, c.measured, c.tolerance, c.passed
        );
    }
    write_file(&out.join("verify.csv"), &csv)?;
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name)
        .collect();
    println!(
        "{} of {} checks passed",
        checks.len() - failed.len(),
        checks.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}
