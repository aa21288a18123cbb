//! Positional feature embeddings: cyclic positional encoding (CPE) and the
//! classic absolute sinusoidal encoding kept for the PE-vs-CPE ablation.
//!
//! CPE gives each dimension a reflection-symmetric periodic waveform whose
//! period grows with the dimension index, so the first and last positions of
//! a tour end up as close as any other adjacent pair.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::Tensor;

pub const ABS_PE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMethod {
    #[default]
    Cpe,
    #[serde(rename = "abs")]
    AbsPe,
}

/// Per-dimension wavelengths for a sequence of length `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencySchedule {
    pub dim: usize,
    pub n: usize,
    pub wavelengths: Vec<f64>,
}

impl FrequencySchedule {
    pub fn angular(&self, d: usize) -> f64 {
        2.0 * PI / self.wavelengths[d]
    }

    /// Lower end of the wavelength range, `n^(1/⌊dim/2⌋)`.
    pub fn min_wavelength(&self) -> f64 {
        (self.n as f64).powf(1.0 / (self.dim / 2) as f64)
    }
}

/// Wavelength schedule: dimensions in the lower half share a wavelength per
/// group of three, rising linearly from `n^(1/⌊dim/2⌋)` toward `n`; the upper
/// half is pinned at `n`.
pub fn wavelengths(n: usize, dim: usize) -> Result<FrequencySchedule> {
    if n < 2 {
        return invalid(format!("sequence length must be at least 2, got {n}"));
    }
    if dim < 4 || !dim.is_multiple_of(2) {
        return invalid(format!("embedding width must be even and >= 4, got {dim}"));
    }
    let half = dim / 2;
    let nf = n as f64;
    let base = nf.powf(1.0 / half as f64);
    let wavelengths = (0..dim)
        .map(|d| if d < half { (3 * (d / 3) + 1) as f64 / dim as f64 * (nf - base) + base } else { nf })
        .collect();
    Ok(FrequencySchedule { dim, n, wavelengths })
}

/// `⌈q⌉`, snapping quotients within 1e-9 of an integer onto it first so
/// that exact divisions (e.g. `n / n`) never round up.
fn stable_ceil(q: f64) -> f64 {
    let r = q.round();
    if (q - r).abs() < 1e-9 {
        r
    } else {
        q.ceil()
    }
}

/// The base waveform of one dimension: `trig(ω·|(z mod 2λ) − λ|)`.
pub fn cpe_waveform(z: f64, wavelength: f64, odd: bool) -> f64 {
    let omega = 2.0 * PI / wavelength;
    let arg = omega * ((z.rem_euclid(2.0 * wavelength)) - wavelength).abs();
    if odd {
        arg.cos()
    } else {
        arg.sin()
    }
}

/// Where position `i` of an `n`-long sequence lands on the waveform axis.
fn spread(i: usize, n: usize, wavelength: f64) -> f64 {
    let reps = stable_ceil(n as f64 / wavelength);
    i as f64 / n as f64 * wavelength * reps
}

/// Index-space period of dimension `d` for sequence length `n`.
pub fn index_period(schedule: &FrequencySchedule, n: usize, d: usize) -> f64 {
    2.0 * n as f64 / stable_ceil(n as f64 / schedule.wavelengths[d])
}

/// CPE vector of position `i` in a sequence of length `n`.
pub fn cpe_embed(i: usize, n: usize, schedule: &FrequencySchedule) -> Vec<f64> {
    schedule.wavelengths.iter().enumerate().map(|(d, &lam)| cpe_waveform(spread(i, n, lam), lam, d % 2 == 1)).collect()
}

/// Classic sinusoidal encoding with geometric wavelengths, base 10000.
pub fn abs_pe_embed(i: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            let rate = ABS_PE_BASE.powf((d - d % 2) as f64 / dim as f64);
            let a = i as f64 / rate;
            if d % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// A positional table together with how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable {
    pub n: usize,
    pub dim: usize,
    pub method: PositionalMethod,
    /// `Some(n_old)` when CPE frequencies were reused from another length.
    pub reused_from: Option<usize>,
    rows: Vec<Vec<f32>>,
}

impl PositionalTable {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f32>] {
        &self.rows
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.rows).expect("rectangular table")
    }

    /// One line per position, comma-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Builds the `n × dim` table. With `reuse`, CPE keeps that schedule's
/// wavelengths instead of regenerating them for `n`.
pub fn build_table(
    n: usize,
    dim: usize,
    method: PositionalMethod,
    reuse: Option<&FrequencySchedule>,
) -> Result<PositionalTable> {
    let (rows, reused_from): (Vec<Vec<f64>>, _) = match method {
        PositionalMethod::Cpe => {
            let schedule = match reuse {
                Some(s) if s.dim != dim => {
                    return invalid(format!("reused schedule has width {}, table needs {dim}", s.dim))
                }
                Some(s) => s.clone(),
                None => wavelengths(n, dim)?,
            };
            let rows = (0..n).map(|i| cpe_embed(i, n, &schedule)).collect();
            (rows, reuse.map(|s| s.n))
        }
        PositionalMethod::AbsPe => {
            if !dim.is_multiple_of(2) {
                return invalid(format!("embedding width must be even, got {dim}"));
            }
            ((0..n).map(|i| abs_pe_embed(i, dim)).collect(), None)
        }
    };
    Ok(PositionalTable {
        n,
        dim,
        method,
        reused_from,
        rows: rows.into_iter().map(|r| r.into_iter().map(|v| v as f32).collect()).collect(),
    })
}

/// Regenerate frequencies when the new length is within a factor of two of
/// the trained one, otherwise reuse the trained schedule.
pub fn prefer_regenerate(n_new: usize, n_old: usize) -> bool {
    let ratio = n_new as f64 / n_old as f64;
    (0.5..=2.0).contains(&ratio)
}

/// Table for generalizing a model trained at `n_old` to sequences of `n_new`.
pub fn table_for_transfer(n_new: usize, n_old: usize, dim: usize, method: PositionalMethod) -> Result<PositionalTable> {
    if method == PositionalMethod::Cpe && !prefer_regenerate(n_new, n_old) {
        let old = wavelengths(n_old, dim)?;
        build_table(n_new, dim, method, Some(&old))
    } else {
        build_table(n_new, dim, method, None)
    }
}
