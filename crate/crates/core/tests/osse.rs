mod common;

use common::*;
use core::f64::consts::PI;
use num_complex::Complex64;
use proptest::prelude::*;
use varinv_core::fields::{FieldStack, GridSpec};
use varinv_core::osse::{
    derive_sst, fractional_laplacian, generate, make_masks, split_windows, synth_truth, MaskConfig, SplitConfig, SynthConfig,
};

/// Naive separable 2-D DFT of one frame, `X[ky][kx] = Σ f e^{−2πi(ky·y/ny + kx·x/nx)}`.
fn dft2(f: &[f32], ny: usize, nx: usize) -> Vec<Complex64> {
    let tw = |k: usize, j: usize, n: usize| Complex64::from_polar(1.0, -2.0 * PI * ((k * j) % n) as f64 / n as f64);
    let mut rows = vec![Complex64::new(0.0, 0.0); ny * nx];
    for y in 0..ny {
        for kx in 0..nx {
            rows[y * nx + kx] = (0..nx).map(|x| f[y * nx + x] as f64 * tw(kx, x, nx)).sum();
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); ny * nx];
    for ky in 0..ny {
        for kx in 0..nx {
            out[ky * nx + kx] = (0..ny).map(|y| rows[y * nx + kx] * tw(ky, y, ny)).sum();
        }
    }
    out
}

fn signed(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Radian wavenumber magnitude of DFT bin `(ky, kx)`.
fn kmag(ky: usize, kx: usize, g: &GridSpec) -> f64 {
    let a = 2.0 * PI * signed(ky, g.n_y) / (g.n_y as f64 * g.dx);
    let b = 2.0 * PI * signed(kx, g.n_x) / (g.n_x as f64 * g.dx);
    (a * a + b * b).sqrt()
}

/// Slope from a least-squares fit of `log P` against `log(k² + k₀²)` on the
/// seed-averaged isotropic periodogram, over integer shells inside the Nyquist circle.
fn fitted_slope(cfg: &SynthConfig, seeds: std::ops::Range<u64>) -> f64 {
    let g = cfg.grid;
    let shells = g.n_x.min(g.n_y) / 2;
    let (mut sum, mut cnt) = (vec![0.0; shells], vec![0usize; shells]);
    for seed in seeds {
        let f = synth_truth(&SynthConfig { seed, ..cfg.clone() }).unwrap();
        let spec = dft2(f.frame(0), g.n_y, g.n_x);
        for ky in 0..g.n_y {
            for kx in 0..g.n_x {
                let r = (signed(ky, g.n_y).powi(2) + signed(kx, g.n_x).powi(2)).sqrt().round() as usize;
                if r >= 1 && r < shells {
                    sum[r] += spec[ky * g.n_x + kx].norm_sqr();
                    cnt[r] += 1;
                }
            }
        }
    }
    let k0 = 2.0 * PI / cfg.lambda0;
    let pts: Vec<(f64, f64)> = (1..shells)
        .map(|r| {
            let k = 2.0 * PI * r as f64 / (g.n_x as f64 * g.dx);
            ((k * k + k0 * k0).ln(), (sum[r] / cnt[r] as f64).ln())
        })
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -2.0 * sxy / sxx
}

#[test]
fn periodogram_recovers_the_configured_slope() {
    for slope in [3.0, 4.0, 5.0] {
        let mut cfg = SynthConfig::desk(0);
        cfg.grid = cfg.grid.with_frames(1);
        cfg.slope = slope;
        let s = fitted_slope(&cfg, 0..6);
        println!("configured {slope}, fitted {s:.3}");
        assert!((s - slope).abs() <= 0.3, "configured {slope}, fitted {s}");
    }
}

#[test]
fn truth_is_zero_mean_with_unit_first_frame_rms() {
    let mut cfg = SynthConfig::desk(3);
    cfg.grid = cfg.grid.with_frames(5);
    let f = synth_truth(&cfg).unwrap();
    let n = cfg.grid.frame_len() as f64;
    for t in 0..5 {
        let m: f64 = f.frame(t).iter().map(|&v| v as f64).sum::<f64>() / n;
        assert!(m.abs() < 1e-6);
    }
    let rms = (f.frame(0).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n).sqrt();
    assert!((rms - 1.0).abs() < 1e-6);
}

#[test]
fn fractional_laplacian_scales_plane_waves_by_the_wavenumber_power() {
    let g = GridSpec::new(1, 16, 32, 0.05, 1.0).unwrap();
    for alpha in [0.5, 0.25, 1.0] {
        for (a, b) in [(1usize, 0usize), (0, 3), (5, 2), (7, 15), (8, 16)] {
            for shift in [0.0, 0.7] {
                let f = FieldStack::from_fn(g, |_, y, x| {
                    (2.0 * PI * (a as f64 * y as f64 / 16.0 + b as f64 * x as f64 / 32.0) + shift).cos() as f32
                })
                .unwrap();
                let lam = kmag(a, b, &g).powf(2.0 * alpha);
                let out = fractional_laplacian(&f, alpha).unwrap();
                for (o, v) in out.data().iter().zip(f.data()) {
                    let want = lam * *v as f64;
                    assert!((*o as f64 - want).abs() <= 1e-6 * lam, "α={alpha} mode ({a},{b}): {o} vs {want}");
                }
            }
        }
    }
}

#[test]
fn fractional_laplacian_satisfies_parseval() {
    let g = GridSpec::new(2, 12, 20, 0.05, 1.0).unwrap();
    let f = rand_stack(g, 5);
    for alpha in [0.5, 0.3] {
        let out = fractional_laplacian(&f, alpha).unwrap();
        for t in 0..g.n_t {
            let spec = dft2(f.frame(t), g.n_y, g.n_x);
            let mut want = 0.0;
            for ky in 0..g.n_y {
                for kx in 0..g.n_x {
                    want += kmag(ky, kx, &g).powf(4.0 * alpha) * spec[ky * g.n_x + kx].norm_sqr();
                }
            }
            want /= g.frame_len() as f64;
            let got: f64 = out.frame(t).iter().map(|&v| (v as f64).powi(2)).sum();
            assert!(rel(got, want) < 1e-6, "α={alpha} t={t}: {got} vs {want}");
        }
    }
}

#[test]
fn noiseless_sst_is_linear_in_ssh() {
    let g = GridSpec::new(1, 16, 16, 0.05, 1.0).unwrap();
    let (f, h) = (rand_stack(g, 1), rand_stack(g, 2));
    let (a, b) = (0.75f32, -1.5f32);
    let comb = f.zip_with(&h, |p, q| a * p + b * q).unwrap();
    let (lf, lh, lc) = (derive_sst(&f, 0.0, 0).unwrap(), derive_sst(&h, 0.0, 0).unwrap(), derive_sst(&comb, 0.0, 0).unwrap());
    let scale = lc.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    for i in 0..g.len() {
        let want = a * lf.data()[i] + b * lh.data()[i];
        assert!((lc.data()[i] - want).abs() <= 1e-5 * scale);
    }
}

#[test]
fn sst_noise_has_the_configured_level() {
    let g = GridSpec::new(4, 32, 32, 0.05, 1.0).unwrap();
    let f = rand_stack(g, 3);
    let clean = derive_sst(&f, 0.0, 0).unwrap();
    let noisy = derive_sst(&f, 0.2, 9).unwrap();
    let d = noisy.zip_with(&clean, |a, b| a - b).unwrap();
    let sd = (d.sum_sq() / g.len() as f64).sqrt();
    assert!((sd - 0.2).abs() < 0.01, "{sd}");
    assert_eq!(noisy, derive_sst(&f, 0.2, 9).unwrap());
}

#[test]
fn desk_masks_cover_five_percent_per_day() {
    let g = GridSpec::new(30, 64, 64, 0.05, 1.0).unwrap();
    for seed in 0..5 {
        let m = make_masks(&MaskConfig::desk(seed), &g).unwrap();
        for t in 0..g.n_t {
            let ones = m.frame(t).iter().filter(|&&v| v == 1.0).count();
            assert_eq!(ones, m.frame(t).iter().filter(|&&v| v != 0.0).count());
            let c = 100.0 * ones as f64 / g.frame_len() as f64;
            assert!((c - 5.0).abs() <= 2.0, "seed {seed} day {t}: {c:.2}%");
        }
    }
}

/// Every window is classified by the days it spans: wholly in the test block,
/// wholly in the validation block, or touching neither.
fn oracle_class(start: usize, w: usize, cfg: &SplitConfig) -> Option<usize> {
    let days: Vec<usize> = (start..start + w).collect();
    let in_b = |b: [usize; 2], d: &usize| *d >= b[0] && *d < b[1];
    if days.iter().all(|d| in_b(cfg.test_block, d)) {
        Some(2)
    } else if days.iter().all(|d| in_b(cfg.val_block, d)) {
        Some(1)
    } else if days.iter().all(|d| !in_b(cfg.test_block, d) && !in_b(cfg.val_block, d)) {
        Some(0)
    } else {
        None
    }
}

#[test]
fn window_splits_match_the_day_classification_exhaustively() {
    let n_t = 12;
    let mut checked = 0;
    for window in 1..=4 {
        for stride in 1..=3 {
            for v0 in 0..=n_t {
                for v1 in v0..=n_t {
                    for t0 in v1..=n_t {
                        for t1 in [t0, (t0 + 3).min(n_t), n_t] {
                            let cfg = SplitConfig { window, stride, val_block: [v0, v1], test_block: [t0, t1] };
                            let s = split_windows(n_t, &cfg).unwrap();
                            let mut want = [vec![], vec![], vec![]];
                            for start in (0..).step_by(stride).take_while(|s| s + window <= n_t) {
                                if let Some(c) = oracle_class(start, window, &cfg) {
                                    want[c].push(start);
                                }
                            }
                            assert_eq!([s.train, s.val, s.test], want, "{cfg:?}");
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn desk_split_keeps_the_test_block_out_of_training() {
    let s = split_windows(60, &SplitConfig::desk()).unwrap();
    assert!(s.train.iter().all(|&d| d + 7 <= 30));
    assert!(s.val.iter().all(|&d| d >= 30 && d + 7 <= 40));
    assert_eq!(s.test, (40..=53).collect::<Vec<_>>());
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let mut synth = SynthConfig::desk(4);
    synth.grid = GridSpec::new(3, 16, 16, 0.05, 1.0).unwrap();
    let a = generate(&synth, &MaskConfig::desk(5)).unwrap();
    let b = generate(&synth, &MaskConfig::desk(5)).unwrap();
    assert_eq!((&a.truth, &a.sst, &a.masks, &a.y1), (&b.truth, &b.sst, &b.masks, &b.y1));
    let c = generate(&SynthConfig { seed: 6, ..synth }, &MaskConfig::desk(5)).unwrap();
    assert_ne!(a.truth, c.truth);
    // observations are canonical: zero wherever the mask is
    for (v, m) in a.y1.values().data().iter().zip(a.y1.mask().data()) {
        assert!(*m != 0.0 || *v == 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masks_are_binary_for_any_layout(tw in 1usize..4, sw in 0usize..10, gap in 0usize..3, seed in 0u64..500) {
        prop_assume!(gap <= sw);
        let cfg = MaskConfig { track_width: tw, swath_width: sw, swath_gap: gap, ..MaskConfig::desk(seed) };
        let m = make_masks(&cfg, &GridSpec::unit(3, 20, 24)).unwrap();
        prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
