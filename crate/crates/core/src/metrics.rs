//! Reconstruction scores: normalised RMSE score μ and its spread σ, and the
//! smallest resolved space and time scales from noise-to-signal spectra.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ensure_same_grid, FieldStack};
use crate::spectral::fft;

/// Noise-to-signal level defining the resolved scale.
pub const NSR_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    T,
}

/// Per-frame `RMSE(x̂ − x) / RMS(x)`; frames with zero truth energy are `None`.
pub fn nrmse_series(est: &FieldStack, truth: &FieldStack) -> Result<Vec<Option<f64>>> {
    ensure_same_grid(est.grid(), truth.grid())?;
    let g = truth.grid();
    Ok((0..g.n_t)
        .map(|t| {
            let (e, x) = (est.frame(t), truth.frame(t));
            let mut err = 0.0;
            let mut sig = 0.0;
            for (a, b) in e.iter().zip(x) {
                let (a, b) = (*a as f64, *b as f64);
                err += (a - b) * (a - b);
                sig += b * b;
            }
            if sig == 0.0 {
                None
            } else {
                Some(libm::sqrt(err / sig))
            }
        })
        .collect())
}

/// `(μ, σ, series)` with `μ = 1 − mean nrmse` and `σ` the population
/// standard deviation of the per-frame nrmse.
pub fn mu_sigma(est: &FieldStack, truth: &FieldStack) -> Result<(f64, f64, Vec<f64>)> {
    let raw = nrmse_series(est, truth)?;
    let skipped = raw.iter().filter(|v| v.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} frame(s) with zero truth energy excluded from the score");
    }
    let series: Vec<f64> = raw.into_iter().flatten().collect();
    if series.is_empty() {
        return Err(Error::UndefinedScore("every truth frame is identically zero".into()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((1.0 - mean, libm::sqrt(var), series))
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|j| 0.5 * (1.0 - libm::cos(2.0 * PI * j as f64 / n as f64))).collect()
}

/// One-sided spectrum: frequencies (cycles per unit of `dx` or `dt`) and
/// power, averaged over all lines along the other axes.
///
/// Each line is mean-removed and Hann-windowed; power is divided by the mean
/// squared window so that `Σ power` equals the windowed variance divided by
/// that factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub freq: Vec<f64>,
    pub power: Vec<f64>,
}

fn lines(stack: &FieldStack, axis: Axis) -> (usize, f64, Vec<Vec<f64>>) {
    let g = *stack.grid();
    match axis {
        Axis::X => {
            let mut out = Vec::with_capacity(g.n_t * g.n_y);
            for t in 0..g.n_t {
                for y in 0..g.n_y {
                    out.push((0..g.n_x).map(|x| stack.get(t, y, x) as f64).collect());
                }
            }
            (g.n_x, g.dx, out)
        }
        Axis::T => {
            let mut out = Vec::with_capacity(g.n_y * g.n_x);
            for y in 0..g.n_y {
                for x in 0..g.n_x {
                    out.push((0..g.n_t).map(|t| stack.get(t, y, x) as f64).collect());
                }
            }
            (g.n_t, g.dt, out)
        }
    }
}

pub fn psd_1d(stack: &FieldStack, axis: Axis) -> Result<Spectrum> {
    let (n, step, rows) = lines(stack, axis);
    if n < 2 {
        return Err(Error::UnsupportedShape(format!("spectrum needs at least 2 samples along {axis:?}")));
    }
    let w = hann(n);
    let wms = w.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let nb = n / 2 + 1;
    let mut power = vec![0.0; nb];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for row in &rows {
        let mean = row.iter().sum::<f64>() / n as f64;
        for (j, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new((row[j] - mean) * w[j], 0.0);
        }
        fft(&mut buf, false);
        for (k, p) in power.iter_mut().enumerate() {
            let mirrored = k != 0 && !(n % 2 == 0 && k == n / 2);
            let f = if mirrored { 2.0 } else { 1.0 };
            *p += f * buf[k].norm_sqr();
        }
    }
    let norm = (n * n) as f64 * wms * rows.len() as f64;
    for p in &mut power {
        *p /= norm;
    }
    let freq = (0..nb).map(|k| k as f64 / (n as f64 * step)).collect();
    Ok(Spectrum { freq, power })
}

/// Resolved scale with the noise-to-signal curve it was read from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedScale {
    pub lambda: f64,
    pub unresolved: bool,
    /// `(frequency, NSR)` for every nonzero bin with usable truth power.
    pub nsr: Vec<(f64, f64)>,
    pub excluded_bins: usize,
}

pub fn resolved_scale(est: &FieldStack, truth: &FieldStack, axis: Axis) -> Result<ResolvedScale> {
    ensure_same_grid(est.grid(), truth.grid())?;
    let err = est.zip_with(truth, |a, b| a - b)?;
    let pe = psd_1d(&err, axis)?;
    let pt = psd_1d(truth, axis)?;
    let peak = pt.power.iter().cloned().fold(0.0, f64::max);
    let mut nsr = Vec::new();
    let mut excluded = 0;
    for k in 1..pt.freq.len() {
        if pt.power[k] <= 1e-12 * peak || pt.power[k] == 0.0 {
            excluded += 1;
            continue;
        }
        nsr.push((pt.freq[k], pe.power[k] / pt.power[k]));
    }
    if excluded > 0 {
        log::warn!("{excluded} spectral bin(s) without truth power excluded along {axis:?}");
    }
    let Some(&(f1, n1)) = nsr.first() else {
        return Err(Error::UndefinedScore(format!("truth has no spectral power along {axis:?}")));
    };
    if n1 > NSR_THRESHOLD {
        return Ok(ResolvedScale { lambda: 1.0 / f1, unresolved: true, nsr, excluded_bins: excluded });
    }
    let mut lambda = 1.0 / nsr.last().expect("nonempty").0;
    for w in nsr.windows(2) {
        let ((fa, na), (fb, nb)) = (w[0], w[1]);
        if nb > NSR_THRESHOLD {
            let s = (NSR_THRESHOLD - na) / (nb - na);
            let lk = libm::log(fa) + s * (libm::log(fb) - libm::log(fa));
            lambda = 1.0 / libm::exp(lk);
            break;
        }
    }
    Ok(ResolvedScale { lambda, unresolved: false, nsr, excluded_bins: excluded })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mu: f64,
    pub sigma: f64,
    pub lambda_x: f64,
    pub lambda_t: f64,
    pub lambda_x_unresolved: bool,
    pub lambda_t_unresolved: bool,
    pub nrmse: Vec<f64>,
}

pub fn score(est: &FieldStack, truth: &FieldStack) -> Result<ScoreReport> {
    let (mu, sigma, nrmse) = mu_sigma(est, truth)?;
    let lx = resolved_scale(est, truth, Axis::X)?;
    let lt = resolved_scale(est, truth, Axis::T)?;
    Ok(ScoreReport {
        mu,
        sigma,
        lambda_x: lx.lambda,
        lambda_t: lt.lambda,
        lambda_x_unresolved: lx.unresolved,
        lambda_t_unresolved: lt.unresolved,
        nrmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::GridSpec;

    #[test]
    fn perfect_and_zero_predictors() {
        let g = GridSpec::unit(3, 4, 4);
        let x = FieldStack::from_fn(g, |t, y, xx| (t + y * 2 + xx) as f32 - 3.0).unwrap();
        let (mu, sigma, _) = mu_sigma(&x, &x).unwrap();
        assert_eq!((mu, sigma), (1.0, 0.0));
        let (mu, sigma, _) = mu_sigma(&FieldStack::zeros(g), &x).unwrap();
        assert!(mu.abs() < 1e-15 && sigma < 1e-15);
    }

    #[test]
    fn zero_truth_is_undefined() {
        let g = GridSpec::unit(2, 2, 2);
        let r = mu_sigma(&FieldStack::filled(g, 1.0), &FieldStack::zeros(g));
        assert!(matches!(r, Err(Error::UndefinedScore(_))));
    }

    #[test]
    fn zero_frames_are_skipped() {
        let g = GridSpec::unit(2, 2, 2);
        let truth = FieldStack::from_fn(g, |t, _, _| t as f32).unwrap();
        let (mu, _, s) = mu_sigma(&truth, &truth).unwrap();
        assert_eq!((mu, s.len()), (1.0, 1));
    }

    #[test]
    fn sinusoid_has_one_dominant_bin() {
        let g = GridSpec::new(2, 3, 32, 0.5, 1.0).unwrap();
        let f = FieldStack::from_fn(g, |_, _, x| libm::sin(2.0 * PI * 5.0 * x as f64 / 32.0) as f32).unwrap();
        let s = psd_1d(&f, Axis::X).unwrap();
        let imax = (0..s.power.len()).max_by(|&a, &b| s.power[a].total_cmp(&s.power[b])).unwrap();
        assert_eq!(imax, 5);
        assert!((s.freq[5] - 5.0 / 16.0).abs() < 1e-12);
    }
}
