//! Scale-invariant SDR, SIR and SAR.
//!
//! Ratios whose denominator vanishes (relative to the target energy, below
//! [`EXACT_FLOOR`]) are reported as `+inf`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Error energies below this fraction of the target energy count as zero.
pub const EXACT_FLOOR: f64 = 1e-20;

/// Value written to CSV files in place of `+inf`.
pub const CSV_CAP_DB: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub si_sdr: f64,
    pub si_sir: f64,
    pub si_sar: f64,
}

impl MetricsRecord {
    /// Values clipped to [`CSV_CAP_DB`] and a flag string naming the capped
    /// fields (`-` when none).
    pub fn capped(&self) -> ([f64; 3], String) {
        let names = ["si_sdr", "si_sir", "si_sar"];
        let raw = [self.si_sdr, self.si_sir, self.si_sar];
        let mut flags = Vec::new();
        let mut vals = [0.0; 3];
        for (i, v) in raw.iter().enumerate() {
            if *v > CSV_CAP_DB {
                flags.push(names[i]);
                vals[i] = CSV_CAP_DB;
            } else {
                vals[i] = *v;
            }
        }
        let flags = if flags.is_empty() {
            "-".to_string()
        } else {
            flags.join("|")
        };
        (vals, flags)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= EXACT_FLOOR * num {
        f64::INFINITY
    } else {
        10.0 * (num / den).log10()
    }
}

fn check(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::shape(
            format!("{} samples", reference.len()),
            format!("{} samples", estimate.len()),
        ));
    }
    let energy = dot(reference, reference);
    if !(energy > 0.0) {
        return Err(Error::config("reference signal is identically zero"));
    }
    Ok(energy)
}

/// Orthogonal decomposition of an estimate into target, interference and
/// artifact components.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub target: Vec<f64>,
    pub interference: Vec<f64>,
    pub artifact: Vec<f64>,
}

pub fn decompose(estimate: &[f64], clean: &[f64], noise: &[f64]) -> Result<Decomposition> {
    let e_clean = check(estimate, clean)?;
    if noise.len() != clean.len() {
        return Err(Error::shape(
            format!("{} noise samples", clean.len()),
            format!("{} noise samples", noise.len()),
        ));
    }
    let a = dot(estimate, clean) / e_clean;
    let target: Vec<f64> = clean.iter().map(|c| a * c).collect();
    let resid: Vec<f64> = estimate.iter().zip(&target).map(|(e, t)| e - t).collect();
    let b = dot(noise, clean) / e_clean;
    let n_perp: Vec<f64> = noise.iter().zip(clean).map(|(n, c)| n - b * c).collect();
    let e_perp = dot(&n_perp, &n_perp);
    let interference: Vec<f64> = if e_perp > 0.0 {
        let g = dot(&resid, &n_perp) / e_perp;
        n_perp.iter().map(|n| g * n).collect()
    } else {
        vec![0.0; clean.len()]
    };
    let artifact = resid
        .iter()
        .zip(&interference)
        .map(|(r, i)| r - i)
        .collect();
    Ok(Decomposition {
        target,
        interference,
        artifact,
    })
}

pub fn si_metrics(estimate: &[f64], clean: &[f64], noise: &[f64]) -> Result<MetricsRecord> {
    let d = decompose(estimate, clean, noise)?;
    let et = dot(&d.target, &d.target);
    let distortion: f64 = estimate
        .iter()
        .zip(&d.target)
        .map(|(e, t)| (e - t) * (e - t))
        .sum();
    Ok(MetricsRecord {
        si_sdr: ratio_db(et, distortion),
        si_sir: ratio_db(et, dot(&d.interference, &d.interference)),
        si_sar: ratio_db(et, dot(&d.artifact, &d.artifact)),
    })
}

pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    let energy = check(estimate, reference)?;
    let a = dot(estimate, reference) / energy;
    let mut et = 0.0;
    let mut ed = 0.0;
    for (e, r) in estimate.iter().zip(reference) {
        let t = a * r;
        et += t * t;
        ed += (e - t) * (e - t);
    }
    Ok(ratio_db(et, ed))
}
