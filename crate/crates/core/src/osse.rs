//! Observing-system simulation: synthetic SSH truth from periodic spectral
//! synthesis, a companion SST from a fractional Laplacian of the SSH, sparse
//! altimeter-like sampling masks and assembly into training windows.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{FieldStack, GridSpec, ObsModality, ObsSet, StateSeq};
use crate::spectral::{fft2, freq_index};
use crate::train::init_state;

fn default_slope() -> f64 {
    4.0
}
fn default_sst_exponent() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub grid: GridSpec,
    /// Spectral slope `s` of the power spectrum `(k² + k₀²)^(−s/2)`.
    #[serde(default = "default_slope")]
    pub slope: f64,
    /// Energy-containing wavelength λ₀, in the units of `dx`.
    pub lambda0: f64,
    /// Uniform advection in cells per frame.
    pub advection: [f64; 2],
    /// Phase random-walk amplitude at `|k| = k₀` (radians per frame).
    pub phase_diffusion: f64,
    pub sigma_obs: f64,
    pub sigma_sst: f64,
    /// Exponent α of `(−Δ)^α` linking SST to SSH.
    #[serde(default = "default_sst_exponent")]
    pub sst_exponent: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    /// 64×64 cells of 0.05°, 60 daily frames.
    pub fn desk(seed: u64) -> Self {
        let grid = GridSpec::new(60, 64, 64, 0.05, 1.0).expect("desk grid");
        SynthConfig {
            grid,
            slope: default_slope(),
            lambda0: 16.0 * grid.dx,
            advection: [0.3, 0.15],
            phase_diffusion: 0.03,
            sigma_obs: 0.05,
            sigma_sst: 0.1,
            sst_exponent: default_sst_exponent(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.lambda0 >= 2.0 * self.grid.dx) {
            return Err(Error::Config(format!(
                "lambda0 = {} is below two grid steps ({})",
                self.lambda0,
                2.0 * self.grid.dx
            )));
        }
        if !(self.slope > 0.0) {
            return Err(Error::Config(format!("spectral slope must be positive, got {}", self.slope)));
        }
        for (name, v) in [("sigma_obs", self.sigma_obs), ("sigma_sst", self.sigma_sst), ("phase_diffusion", self.phase_diffusion)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Angular wavenumbers (radians per unit of `dx`) of the FFT bins on one axis.
fn wavenumbers(n: usize, dx: f64) -> Vec<f64> {
    (0..n).map(|i| 2.0 * PI * freq_index(i, n) as f64 / (n as f64 * dx)).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gaussian random field sequence, zero mean per frame and unit RMS on the
/// first frame.
pub fn synth_truth(cfg: &SynthConfig) -> Result<FieldStack> {
    cfg.validate()?;
    let g = cfg.grid;
    let (ny, nx) = (g.n_y, g.n_x);
    let (ky, kx) = (wavenumbers(ny, g.dx), wavenumbers(nx, g.dx));
    let k0 = 2.0 * PI / cfg.lambda0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = ny * nx;
    let mut coef = vec![Complex64::new(0.0, 0.0); n];
    let mut kmag = vec![0.0; n];
    for y in 0..ny {
        for x in 0..nx {
            let i = y * nx + x;
            let k2 = ky[y] * ky[y] + kx[x] * kx[x];
            kmag[i] = libm::sqrt(k2);
            let (a, b) = (normal(&mut rng), normal(&mut rng));
            if i != 0 {
                let amp = libm::pow(k2 + k0 * k0, -cfg.slope / 4.0);
                coef[i] = Complex64::new(a, b) * (amp / core::f64::consts::SQRT_2);
            }
        }
    }
    let mut phase = vec![0.0; n];
    let mut data = Vec::with_capacity(g.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let shift = [cfg.advection[0] * g.dx, cfg.advection[1] * g.dx];
    for t in 0..g.n_t {
        if t > 0 && cfg.phase_diffusion > 0.0 {
            for (p, k) in phase.iter_mut().zip(&kmag) {
                *p += cfg.phase_diffusion * (k / k0) * normal(&mut rng);
            }
        }
        for y in 0..ny {
            for x in 0..nx {
                let i = y * nx + x;
                let adv = -(kx[x] * shift[0] + ky[y] * shift[1]) * t as f64;
                buf[i] = coef[i] * Complex64::from_polar(1.0, adv + phase[i]);
            }
        }
        fft2(&mut buf, ny, nx, true);
        let mean = buf.iter().map(|c| c.re).sum::<f64>() / n as f64;
        data.extend(buf.iter().map(|c| c.re - mean));
    }
    let rms0 = libm::sqrt(data[..n].iter().map(|v| v * v).sum::<f64>() / n as f64);
    if !(rms0 > 0.0) {
        return Err(Error::Numerical("synthesised field has zero energy".into()));
    }
    FieldStack::new(g, data.into_iter().map(|v| (v / rms0) as f32).collect())
}

/// `(−Δ)^α` applied spectrally frame by frame on the periodic grid
/// (wavenumbers in radians per unit of `dx`).
pub fn fractional_laplacian(f: &FieldStack, alpha: f64) -> Result<FieldStack> {
    let g = *f.grid();
    let (ny, nx) = (g.n_y, g.n_x);
    let (ky, kx) = (wavenumbers(ny, g.dx), wavenumbers(nx, g.dx));
    let n = ny * nx;
    let mut out = Vec::with_capacity(g.len());
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..g.n_t {
        for (b, v) in buf.iter_mut().zip(f.frame(t)) {
            *b = Complex64::new(*v as f64, 0.0);
        }
        fft2(&mut buf, ny, nx, false);
        for y in 0..ny {
            for x in 0..nx {
                let k2 = ky[y] * ky[y] + kx[x] * kx[x];
                let m = if k2 == 0.0 { 0.0 } else { libm::pow(k2, alpha) };
                buf[y * nx + x] *= m / n as f64;
            }
        }
        fft2(&mut buf, ny, nx, true);
        out.extend(buf.iter().map(|c| c.re as f32));
    }
    FieldStack::new(g, out)
}

/// SST `= (−Δ)^{1/2} SSH + σ·noise`: Fourier coefficients multiplied by `|k|`.
pub fn derive_sst(ssh: &FieldStack, sigma: f64, seed: u64) -> Result<FieldStack> {
    derive_sst_with(ssh, 0.5, sigma, seed)
}

pub fn derive_sst_with(ssh: &FieldStack, alpha: f64, sigma: f64, seed: u64) -> Result<FieldStack> {
    let clean = fractional_laplacian(ssh, alpha)?;
    if sigma == 0.0 {
        return Ok(clean);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clean.map(|v| (v as f64 + sigma * normal(&mut rng)) as f32)
}

fn default_target() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    /// Nadir tracks per day; `None` picks the count closest to the target coverage.
    #[serde(default)]
    pub n_nadir_tracks: Option<usize>,
    pub track_width: usize,
    /// Total swath band width in cells, gap included; 0 disables the swath.
    pub swath_width: usize,
    pub swath_gap: usize,
    /// Daily advance of the swath band, in cells.
    pub swath_step: usize,
    /// Track angles from the y axis, in degrees.
    pub angle_range: [f64; 2],
    #[serde(default = "default_target")]
    pub target_coverage: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MaskConfig {
    pub fn desk(seed: u64) -> Self {
        MaskConfig {
            n_nadir_tracks: None,
            track_width: 1,
            swath_width: 4,
            swath_gap: 2,
            swath_step: 23,
            angle_range: [-20.0, 20.0],
            target_coverage: default_target(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_coverage > 0.0 && self.target_coverage <= 1.0) {
            return Err(Error::Config(format!("target coverage {} outside (0, 1]", self.target_coverage)));
        }
        if self.swath_gap > self.swath_width {
            return Err(Error::Config("swath gap wider than the swath".into()));
        }
        if !(self.angle_range[0] <= self.angle_range[1] && self.angle_range[1].abs() < 80.0 && self.angle_range[0].abs() < 80.0) {
            return Err(Error::Config("track angles must be an ordered range within ±80°".into()));
        }
        Ok(())
    }

    fn swath_cells_per_row(&self) -> usize {
        self.swath_width - self.swath_gap
    }

    /// Track count used on an `n_y × n_x` raster.
    pub fn nadir_count(&self, n_y: usize, n_x: usize) -> usize {
        if let Some(n) = self.n_nadir_tracks {
            return n;
        }
        let target = self.target_coverage * (n_y * n_x) as f64;
        let rest = target - (self.swath_cells_per_row().min(n_x) * n_y) as f64;
        let per = (self.track_width.min(n_x) * n_y) as f64;
        if per == 0.0 || rest <= 0.0 {
            0
        } else {
            libm::round(rest / per) as usize
        }
    }
}

/// Marks, in every row `y`, the cells `⌊x₀ + y·tanθ⌋ + j (mod n_x)` for `j ∈ cols`.
fn sheared_band(frame: &mut [f32], n_y: usize, n_x: usize, x0: f64, tan: f64, cols: impl Iterator<Item = usize> + Clone) {
    for y in 0..n_y {
        let base = libm::floor(x0 + y as f64 * tan) as i64;
        for j in cols.clone() {
            let x = (base + j as i64).rem_euclid(n_x as i64) as usize;
            frame[y * n_x + x] = 1.0;
        }
    }
}

fn day_rng(seed: u64, day: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (day as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

/// One day of nadir tracks on an `n_y × n_x` raster.
pub fn nadir_mask(cfg: &MaskConfig, n_y: usize, n_x: usize, day: usize) -> Result<Vec<f32>> {
    cfg.validate()?;
    let mut frame = vec![0.0; n_y * n_x];
    let mut rng = day_rng(cfg.seed, day, 0x6e61_6469);
    for _ in 0..cfg.nadir_count(n_y, n_x) {
        let x0 = rng.random_range(0.0..n_x as f64);
        let ang = rng.random_range(cfg.angle_range[0]..=cfg.angle_range[1]);
        let tan = libm::tan(ang * PI / 180.0);
        sheared_band(&mut frame, n_y, n_x, x0, tan, 0..cfg.track_width.min(n_x));
    }
    Ok(frame)
}

/// One day of the wide-swath band: `swath_width` cells minus a central gap.
pub fn swath_mask(cfg: &MaskConfig, n_y: usize, n_x: usize, day: usize) -> Result<Vec<f32>> {
    cfg.validate()?;
    let mut frame = vec![0.0; n_y * n_x];
    if cfg.swath_width == 0 || cfg.swath_cells_per_row() == 0 {
        return Ok(frame);
    }
    let mut rng = day_rng(cfg.seed, 0, 0x7377_6174);
    let start = rng.random_range(0.0..n_x as f64);
    let ang = rng.random_range(cfg.angle_range[0]..=cfg.angle_range[1]);
    let tan = if cfg.swath_width >= n_x { 0.0 } else { libm::tan(ang * PI / 180.0) };
    let x0 = start + (day * cfg.swath_step) as f64;
    let w = cfg.swath_width.min(n_x);
    let lo = (cfg.swath_width - cfg.swath_gap) / 2;
    let gap = lo..lo + cfg.swath_gap;
    sheared_band(&mut frame, n_y, n_x, x0, tan, (0..w).filter(move |j| !gap.contains(j)));
    Ok(frame)
}

/// Union of nadir tracks and swath for days `0..grid.n_t`.
pub fn make_masks(cfg: &MaskConfig, grid: &GridSpec) -> Result<FieldStack> {
    let mut data = Vec::with_capacity(grid.len());
    for day in 0..grid.n_t {
        let a = nadir_mask(cfg, grid.n_y, grid.n_x, day)?;
        let b = swath_mask(cfg, grid.n_y, grid.n_x, day)?;
        data.extend(a.iter().zip(&b).map(|(p, q)| p.max(*q)));
    }
    FieldStack::new(*grid, data)
}

/// Day ranges `[start, end)` of the validation and test blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub window: usize,
    pub stride: usize,
    pub val_block: [usize; 2],
    pub test_block: [usize; 2],
}

impl SplitConfig {
    pub fn desk() -> Self {
        SplitConfig { window: 7, stride: 1, val_block: [30, 40], test_block: [40, 60] }
    }

    pub fn validate(&self, n_t: usize) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.window > n_t {
            return Err(Error::Config(format!("window {} / stride {} invalid for {n_t} frames", self.window, self.stride)));
        }
        for b in [self.val_block, self.test_block] {
            if b[0] > b[1] || b[1] > n_t {
                return Err(Error::Config(format!("block {b:?} outside 0..{n_t}")));
            }
        }
        let (v, t) = (self.val_block, self.test_block);
        if v[0] < t[1] && t[0] < v[1] {
            return Err(Error::Config("validation and test blocks overlap".into()));
        }
        Ok(())
    }
}

/// Window start days per split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn inside(start: usize, len: usize, b: [usize; 2]) -> bool {
    start >= b[0] && start + len <= b[1]
}

fn overlaps(start: usize, len: usize, b: [usize; 2]) -> bool {
    b[0] < b[1] && start < b[1] && b[0] < start + len
}

pub fn split_windows(n_t: usize, cfg: &SplitConfig) -> Result<Splits> {
    cfg.validate(n_t)?;
    let mut s = Splits::default();
    let mut start = 0;
    while start + cfg.window <= n_t {
        let w = cfg.window;
        if inside(start, w, cfg.test_block) {
            s.test.push(start);
        } else if inside(start, w, cfg.val_block) {
            s.val.push(start);
        } else if !overlaps(start, w, cfg.test_block) && !overlaps(start, w, cfg.val_block) {
            s.train.push(start);
        }
        start += cfg.stride;
    }
    Ok(s)
}

/// Masked noisy altimetry `y₁` over the full record.
pub fn observe(truth: &FieldStack, masks: &FieldStack, sigma: f64, seed: u64) -> Result<ObsModality> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = truth.map(|v| if sigma == 0.0 { v } else { (v as f64 + sigma * normal(&mut rng)) as f32 })?;
    ObsModality::new(1, noisy, masks.clone())
}

/// Truth window, observations and solver initialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub start: usize,
    pub truth: FieldStack,
    pub obs: ObsSet,
    pub x0: StateSeq,
}

impl TrainSample {
    pub fn new(start: usize, truth: FieldStack, obs: ObsSet) -> Result<Self> {
        crate::fields::ensure_same_grid(truth.grid(), obs.grid().ok_or(Error::MissingModality(1))?)?;
        let x0 = init_state(&obs)?;
        Ok(TrainSample { start, truth, obs, x0 })
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(TrainSample {
            start: self.start,
            truth: self.truth.crop(y0, x0, h, w)?,
            obs: self.obs.crop(y0, x0, h, w)?,
            x0: self.x0.crop(y0, x0, h, w)?,
        })
    }

    /// Same sample without the SST modality.
    pub fn without_sst(&self) -> Self {
        TrainSample { obs: self.obs.without(3), ..self.clone() }
    }
}

/// Sliding windows over the record: modality 1 = `y1`, 2 = gap-free `y2`,
/// 3 = gap-free SST (when given).
pub fn make_dataset(
    truth: &FieldStack,
    y1: &ObsModality,
    y2: &FieldStack,
    sst: Option<&FieldStack>,
    starts: &[usize],
    window: usize,
) -> Result<Vec<TrainSample>> {
    starts
        .iter()
        .map(|&s| {
            let mut mods = vec![y1.frames(s, window)?, ObsModality::full(2, y2.frames(s, window)?)];
            if let Some(sst) = sst {
                mods.push(ObsModality::full(3, sst.frames(s, window)?));
            }
            TrainSample::new(s, truth.frames(s, window)?, ObsSet::new(mods)?)
        })
        .collect()
}

/// Generated record: truth, normalised SST, masks, altimetry.
#[derive(Clone, Debug, PartialEq)]
pub struct Osse {
    pub truth: FieldStack,
    pub sst: FieldStack,
    pub masks: FieldStack,
    pub y1: ObsModality,
    /// Factor applied to the noise-free fractional Laplacian to reach unit RMS.
    pub sst_scale: f64,
}

/// Runs the full generator. SST is rescaled to unit RMS before its noise is added.
pub fn generate(synth: &SynthConfig, masks: &MaskConfig) -> Result<Osse> {
    let truth = synth_truth(synth)?;
    let clean = derive_sst_with(&truth, synth.sst_exponent, 0.0, 0)?;
    let rms = libm::sqrt(clean.sum_sq() / clean.grid().len() as f64);
    if !(rms > 0.0) {
        return Err(Error::Numerical("SST has zero energy".into()));
    }
    let sst_scale = 1.0 / rms;
    let scaled = truth.map(|v| (v as f64 * sst_scale) as f32)?;
    let sst = derive_sst_with(&scaled, synth.sst_exponent, synth.sigma_sst, synth.seed.wrapping_add(2))?;
    let m = make_masks(masks, &synth.grid)?;
    let y1 = observe(&truth, &m, synth.sigma_obs, synth.seed.wrapping_add(1))?;
    Ok(Osse { truth, sst, masks: m, y1, sst_scale })
}
