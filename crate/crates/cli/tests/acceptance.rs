//! Acceptance suite. Prints one pass/fail line per criterion and exits
//! non-zero if any fails.
//!
//! `FLOWSE_ACCEPT=1,2,7` runs a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use flowse_cli::commands::{self, BenchRow};
use flowse_cli::Config;
use flowse_core::model::{Activation, Architecture, FieldModel, Mode};
use flowse_core::paths::{self, PathSpec};
use flowse_core::sde::SdeSpec;
use flowse_core::solvers::{euler_ode, make_fm_grid, make_reverse_grid};
use flowse_core::toy::{eum_chain_mse, GaussianTask};
use flowse_core::training::{
    crp_finetune_step, crp_loss, train, Adam, CrpSettings, DsmWeighting, Objective, Pair,
    PairValidator, TrainConfig,
};
use flowse_core::verify::{euler_convergence_ratios, run_all, VerifyOptions};
use flowse_core::{Checkpoint, Sampler};

const SIGMA: f64 = 0.487;
const T_DELTA: f64 = 0.03;
/// Minimum SI-SDR gain at NFE 5, fixed after the first desk run.
const MIN_GAIN_DB: f64 = 3.0;

struct Outcome {
    id: u8,
    title: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

fn timed(
    id: u8,
    title: &'static str,
    limit_s: f64,
    f: impl FnOnce() -> Result<(bool, String), String>,
) -> Outcome {
    let start = Instant::now();
    let r = f();
    let seconds = start.elapsed().as_secs_f64();
    let (passed, detail) = match r {
        Ok((ok, d)) => (
            ok && seconds < limit_s,
            format!("{d}; {seconds:.1} s (limit {limit_s} s)"),
        ),
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome {
        id,
        title,
        passed,
        detail,
        seconds,
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn analytic_suite() -> Result<(bool, String), String> {
    let checks = run_all(&VerifyOptions::default()).map_err(err)?;
    let failed: Vec<_> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name)
        .collect();
    let dir = tempfile::tempdir().map_err(err)?;
    let cli = commands::verify(&Config::default(), dir.path());
    Ok((
        failed.is_empty() && cli.is_ok(),
        format!(
            "{}/{} checks within tolerance, flowse verify {}",
            checks.len() - failed.len(),
            checks.len(),
            if cli.is_ok() { "ok" } else { "failed" }
        ),
    ))
}

fn euler_convergence() -> Result<(bool, String), String> {
    let ratios = euler_convergence_ratios(VerifyOptions::default().seed).map_err(err)?;
    let ok = ratios.iter().all(|r| (1.7..=2.3).contains(r));
    Ok((ok, format!("halving ratios {ratios:.3?} in [1.7, 2.3]")))
}

fn gaussian_oracle() -> Result<(bool, String), String> {
    let task = GaussianTask {
        dim: 8,
        gain: 1.0,
        offset: 1.0,
        gamma: 0.05,
        y_scale: 1.0,
    };
    let path = PathSpec::flow_se(SIGMA).map_err(err)?;
    let field = task.oracle_field(path);
    let grid = make_fm_grid(50, T_DELTA).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, y) = task.sample_pair(&mut rng);
    let post_mean = task.target(&y).mean;
    let trials = 100;
    let mut sum = post_mean.scale(0.0);
    for _ in 0..trials {
        let x0 = paths::sample_prior(&path, &y, &mut rng);
        let x1 = euler_ode(&field, &x0, &y, &grid, false).map_err(err)?.state;
        sum = sum.lin_comb(1.0, &x1, 1.0);
    }
    let avg = sum.scale(1.0 / trials as f64);
    let rel = (avg.sub(&post_mean).norm_sq() / post_mean.norm_sq()).sqrt();
    Ok((
        rel <= 0.02,
        format!(
            "relative L2 of the {trials}-trial average to the posterior mean {rel:.2e} <= 2e-2"
        ),
    ))
}

fn crp_mechanism() -> Result<(bool, String), String> {
    let task = GaussianTask::default();
    let sde = SdeSpec::FlowEquivalent { sigma: SIGMA };
    let crp = CrpSettings::new(5, T_DELTA);

    // Exact score against the law of the reverse chain.
    let score = task.oracle_score(SIGMA);
    let grid = make_reverse_grid(crp.n_rev, crp.t_rsp, crp.t_delta).map_err(err)?;
    let init_std = sde.kernel_std(crp.t_rsp).map_err(err)?;
    let pairs = task.sample_pairs(20_000, &mut ChaCha8Rng::seed_from_u64(7));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut losses, mut expected) = (Vec::with_capacity(pairs.len()), 0.0);
    for p in &pairs {
        losses.push(crp_loss(&score, std::slice::from_ref(p), &sde, &crp, &mut rng).map_err(err)?);
        expected += eum_chain_mse(&score, &p.1, &grid, init_std).map_err(err)?;
    }
    expected /= pairs.len() as f64;
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let se = (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let z = (mean - expected).abs() / se;

    // Fine-tuning a perturbed score model.
    let arch = Architecture {
        frame_len: task.dim,
        hidden: vec![32, 32],
        activation: Activation::Silu,
        time_embed: 16,
        context: 0,
    };
    let data = task.sample_pairs(512, &mut ChaCha8Rng::seed_from_u64(9));
    let config = TrainConfig {
        objective: Objective::Dsm,
        learning_rate: 1e-3,
        batch_size: 16,
        epochs: 1,
        steps_per_epoch: Some(1000),
        dsm_weighting: DsmWeighting::FlowMatching,
        seed: 10,
        ..TrainConfig::default()
    };
    let init = FieldModel::new(
        arch,
        Mode::Score { sigma: SIGMA },
        &mut ChaCha8Rng::seed_from_u64(11),
    )
    .map_err(err)?;
    let validator = PairValidator {
        pairs: task.sample_pairs(16, &mut ChaCha8Rng::seed_from_u64(12)),
        seed: 13,
    };
    let mut model = train(&config, init, &data, &validator, |_| {})
        .map_err(err)?
        .last
        .ema_model()
        .map_err(err)?;
    let noise = Normal::new(0.0, 0.1).map_err(err)?;
    let mut prng = ChaCha8Rng::seed_from_u64(14);
    for p in model.params_mut() {
        *p += noise.sample(&mut prng);
    }
    let eval: Vec<Pair> = task.sample_pairs(2000, &mut ChaCha8Rng::seed_from_u64(15));
    let eval_loss =
        |m: &FieldModel| crp_loss(m, &eval, &sde, &crp, &mut ChaCha8Rng::seed_from_u64(16));
    let before = eval_loss(&model).map_err(err)?;
    let mut adam = Adam::new(model.num_params(), 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for step in 0..500 {
        let batch = &data[(step * 8) % data.len()..][..8];
        let (_, grad) = crp_finetune_step(&model, batch, &sde, &crp, &mut rng).map_err(err)?;
        let mut params = model.params().to_vec();
        adam.step(&mut params, &grad);
        model = model.with_params(&params).map_err(err)?;
    }
    let after = eval_loss(&model).map_err(err)?;
    let reduction = 1.0 - after / before;
    Ok((
        z <= 3.0 && reduction >= 0.3,
        format!(
            "exact score: {mean:.5} vs chain law {expected:.5} ({z:.2} SE); \
             fine-tune: {before:.4} -> {after:.4} ({:.0}% reduction, need 30%)",
            100.0 * reduction
        ),
    ))
}

struct Desk {
    cfm: Vec<BenchRow>,
    dsm_pfode5: f64,
    cfm_seconds: f64,
    total_seconds: f64,
}

fn desk_run(root: &Path) -> Result<Desk, String> {
    let start = Instant::now();
    let data = root.join("data");
    let base = vec![format!("data.dir={}", data.display())];
    let cfg = |extra: &[String]| {
        let mut o = base.clone();
        o.extend(extra.iter().cloned());
        Config::resolve(None, &o).map_err(err)
    };
    commands::gen_data(&cfg(&[])?, &data).map_err(err)?;
    commands::train(&cfg(&[])?, &root.join("cfm")).map_err(err)?;
    let cfm = commands::bench(
        &cfg(&[
            format!("bench.checkpoint={}", root.join("cfm/best.json").display()),
            "bench.samplers=fm".into(),
        ])?,
        &root.join("bench_cfm"),
    )
    .map_err(err)?;
    let cfm_seconds = start.elapsed().as_secs_f64();
    commands::train(&cfg(&["train.objective=dsm".into()])?, &root.join("dsm")).map_err(err)?;
    let dsm = commands::bench(
        &cfg(&[
            format!("bench.checkpoint={}", root.join("dsm/best.json").display()),
            "bench.samplers=pfode".into(),
            "bench.nfe=5".into(),
        ])?,
        &root.join("bench_dsm"),
    )
    .map_err(err)?;
    Ok(Desk {
        cfm,
        dsm_pfode5: dsm[0].mean_si_sdr,
        cfm_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}

fn fm_row(rows: &[BenchRow], nfe: usize) -> &BenchRow {
    rows.iter()
        .find(|r| r.sampler == Sampler::Fm && r.nfe == nfe)
        .expect("bench row")
}

fn desk_outcome(
    id: u8,
    title: &'static str,
    limit_s: f64,
    seconds: f64,
    r: (bool, String),
) -> Outcome {
    Outcome {
        id,
        title,
        passed: r.0 && seconds < limit_s,
        detail: format!("{}; {seconds:.1} s (limit {limit_s} s)", r.1),
        seconds,
    }
}

fn desk_criteria(out: &mut Vec<Outcome>, wanted: &dyn Fn(u8) -> bool) {
    if !(4..=6).any(wanted) {
        return;
    }
    let titles = [
        (4u8, "desk CFM gain and NFE 5 vs NFE 50"),
        (5, "desk DSM + probability flow vs CFM"),
        (6, "FM SI-SDR non-decreasing in NFE"),
    ];
    let dir = tempfile::tempdir().expect("tempdir");
    let desk = match desk_run(dir.path()) {
        Ok(d) => d,
        Err(e) => {
            for (id, t) in titles.into_iter().filter(|(id, _)| wanted(*id)) {
                out.push(Outcome {
                    id,
                    title: t,
                    passed: false,
                    detail: format!("error: {e}"),
                    seconds: 0.0,
                });
            }
            return;
        }
    };
    let (n5, n50) = (fm_row(&desk.cfm, 5), fm_row(&desk.cfm, 50));
    if wanted(4) {
        let diff = (n5.mean_si_sdr - n50.mean_si_sdr).abs();
        out.push(desk_outcome(
            4,
            titles[0].1,
            900.0,
            desk.cfm_seconds,
            (
                n5.gain >= MIN_GAIN_DB && diff <= 1.0,
                format!(
                    "NFE 5 gain {:+.2} dB (need {MIN_GAIN_DB:+.1}), |NFE 5 - NFE 50| = {diff:.2} dB (need <= 1)",
                    n5.gain
                ),
            ),
        ));
    }
    if wanted(5) {
        let gap = (desk.dsm_pfode5 - n5.mean_si_sdr).abs();
        out.push(desk_outcome(
            5,
            titles[1].1,
            1800.0,
            desk.total_seconds,
            (
                gap <= 1.0,
                format!(
                    "DSM pfode NFE 5 {:.2} dB vs CFM fm NFE 5 {:.2} dB, gap {gap:.2} dB (need <= 1)",
                    desk.dsm_pfode5, n5.mean_si_sdr
                ),
            ),
        ));
    }
    if wanted(6) {
        let means: Vec<f64> = (1..=5).map(|n| fm_row(&desk.cfm, n).mean_si_sdr).collect();
        let worst = means
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(desk_outcome(
            6,
            titles[2].1,
            f64::INFINITY,
            desk.cfm_seconds,
            (
                worst <= 0.3,
                format!(
                    "NFE 1..5: {means:.2?} dB, largest drop {:.2} dB (allowance 0.3)",
                    worst.max(0.0)
                ),
            ),
        ));
    }
}

fn flowse(dir: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_flowse"))
        .args(args)
        .current_dir(dir)
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(err)?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("flowse {} exited with {status}", args.join(" ")))
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir").flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).expect("readable file");
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    files
}

const SMALL: &[&str] = &[
    "--seed",
    "7",
    "--set",
    "train.epochs=2",
    "--set",
    "train.steps_per_epoch=10",
    "--set",
    "train.valid_clips=2",
    "--set",
    "model.hidden=32,32",
];

fn pipeline(dir: &Path, threads: &str) -> Result<(), String> {
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend_from_slice(SMALL);
        all.extend_from_slice(&["--set", threads]);
        flowse(dir, &all)
    };
    run(&[
        "gen-data",
        "--set",
        "data.train=16",
        "--set",
        "data.valid=4",
        "--set",
        "data.test=4",
    ])?;
    run(&["train", "--out", "cfm"])?;
    run(&["train", "--out", "dsm", "--set", "train.objective=dsm"])?;
    run(&[
        "train",
        "--out",
        "crp",
        "--set",
        "train.objective=crp",
        "--set",
        "train.init=dsm/best.json",
        "--set",
        "train.epochs=1",
    ])?;
    run(&[
        "enhance",
        "--out",
        "enh",
        "--set",
        "enhance.checkpoint=cfm/best.json",
        "--set",
        "enhance.input=data/test/manifest.csv",
    ])?;
    run(&[
        "enhance",
        "--out",
        "enh_eum",
        "--sampler",
        "eum",
        "--nfe",
        "3",
        "--set",
        "enhance.checkpoint=crp/best.json",
        "--set",
        "enhance.input=data/test/manifest.csv",
    ])?;
    run(&[
        "bench",
        "--out",
        "bench",
        "--set",
        "bench.checkpoint=dsm/best.json",
        "--set",
        "bench.nfe=1,2",
    ])?;
    run(&["verify", "--out", "verify"])
}

fn determinism() -> Result<(bool, String), String> {
    let (a, b, c) = (
        tempfile::tempdir().map_err(err)?,
        tempfile::tempdir().map_err(err)?,
        tempfile::tempdir().map_err(err)?,
    );
    pipeline(a.path(), "enhance.threads=4")?;
    pipeline(b.path(), "enhance.threads=4")?;
    pipeline(c.path(), "enhance.threads=1")?;
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    let same = ta == tb;
    // Thread count only shows up in the config snapshots.
    let differing: Vec<_> = ta
        .iter()
        .filter(|(p, bytes)| tc.get(*p) != Some(*bytes))
        .map(|(p, _)| p.clone())
        .collect();
    let threads_ok = ta.len() == tc.len()
        && differing
            .iter()
            .all(|p| p.file_name().is_some_and(|n| n == "config.resolved"));

    let mut round_trips = 0;
    for ckpt in [
        "cfm/best.json",
        "cfm/last.json",
        "dsm/best.json",
        "crp/last.json",
    ] {
        let path = a.path().join(ckpt);
        let copy = a.path().join("copy.json");
        Checkpoint::load(&path)
            .map_err(err)?
            .save(&copy)
            .map_err(err)?;
        if std::fs::read(&path).map_err(err)? == std::fs::read(&copy).map_err(err)? {
            round_trips += 1;
        }
    }
    Ok((
        same && threads_ok && round_trips == 4,
        format!(
            "{} output files identical across reruns: {same}; thread-count independent: {threads_ok}; \
             checkpoint byte round trips {round_trips}/4",
            ta.len()
        ),
    ))
}

fn main() {
    let selected: Option<Vec<u8>> = std::env::var("FLOWSE_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |id: u8| selected.as_ref().is_none_or(|s| s.contains(&id));

    let mut out = Vec::new();
    if wanted(1) {
        out.push(timed(1, "analytic suite", 120.0, analytic_suite));
    }
    if wanted(2) {
        out.push(timed(2, "Euler convergence order", 10.0, euler_convergence));
    }
    if wanted(3) {
        out.push(timed(
            3,
            "Gaussian posterior-mean oracle",
            30.0,
            gaussian_oracle,
        ));
    }
    desk_criteria(&mut out, &wanted);
    if wanted(7) {
        out.push(timed(7, "CRP mechanism", f64::INFINITY, crp_mechanism));
    }
    if wanted(8) {
        out.push(timed(8, "CLI determinism", f64::INFINITY, determinism));
    }

    println!();
    out.sort_by_key(|o| o.id);
    for o in &out {
        println!(
            "criterion {} {}: {} ({})",
            o.id,
            if o.passed { "PASS" } else { "FAIL" },
            o.title,
            o.detail
        );
    }
    let total: f64 = out.iter().map(|o| o.seconds).sum();
    let failed = out.iter().filter(|o| !o.passed).count();
    println!(
        "{} of {} criteria passed in {total:.0} s",
        out.len() - failed,
        out.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
