//! Discrete Fourier transforms for the generator and the spectral metrics.
//! Power-of-two lengths use an iterative radix-2 transform; other lengths
//! fall back to a direct sum.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use num_complex::Complex64;

fn direct(data: &mut [Complex64], sign: f64) {
    let n = data.len();
    let src = data.to_vec();
    for (k, out) in data.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, v) in src.iter().enumerate() {
            // reduce the phase index first to keep the argument small
            let ph = sign * 2.0 * PI * ((k * j) % n) as f64 / n as f64;
            acc += v * Complex64::from_polar(1.0, ph);
        }
        *out = acc;
    }
}

fn radix2(data: &mut [Complex64], sign: f64) {
    let n = data.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            data.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let tw: Vec<Complex64> = (0..half).map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / len as f64)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = data[start + k];
                let b = data[start + k + half] * tw[k];
                data[start + k] = a + b;
                data[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// In-place unnormalised transform `X_k = Σ x_j e^{∓2πi jk/n}`; the inverse
/// (`+` sign) is not divided by `n`.
pub fn fft(data: &mut [Complex64], inverse: bool) {
    let sign = if inverse { 1.0 } else { -1.0 };
    if data.len() <= 1 {
        return;
    }
    if data.len().is_power_of_two() {
        radix2(data, sign);
    } else {
        direct(data, sign);
    }
}

/// Row-major 2-D transform of an `ny × nx` array.
pub fn fft2(data: &mut [Complex64], ny: usize, nx: usize, inverse: bool) {
    for row in data.chunks_mut(nx) {
        fft(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); ny];
    for x in 0..nx {
        for y in 0..ny {
            col[y] = data[y * nx + x];
        }
        fft(&mut col, inverse);
        for y in 0..ny {
            data[y * nx + x] = col[y];
        }
    }
}

/// Signed integer frequency index of bin `i` for length `n`.
pub fn freq_index(i: usize, n: usize) -> isize {
    if i <= n / 2 {
        i as isize
    } else {
        i as isize - n as isize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radix2_matches_direct_sum() {
        for n in [1usize, 2, 4, 8, 16, 64] {
            let x: Vec<Complex64> = (0..n).map(|j| Complex64::new((j as f64 * 0.7).sin(), (j as f64 * 1.3).cos())).collect();
            let mut a = x.clone();
            fft(&mut a, false);
            let mut b = x.clone();
            if n > 1 {
                direct(&mut b, -1.0);
            }
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).norm() < 1e-10 * n as f64);
            }
        }
    }

    #[test]
    fn round_trip_any_length() {
        for n in [3usize, 6, 12, 16, 20] {
            let x: Vec<Complex64> = (0..n).map(|j| Complex64::new(j as f64, -(j as f64) * 0.5)).collect();
            let mut a = x.clone();
            fft(&mut a, false);
            fft(&mut a, true);
            for (p, q) in a.iter().zip(&x) {
                assert!((p / n as f64 - q).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn fft2_single_mode() {
        let (ny, nx) = (8, 16);
        let mut a: Vec<Complex64> = (0..ny * nx)
            .map(|i| {
                let (y, x) = (i / nx, i % nx);
                Complex64::from_polar(1.0, 2.0 * PI * (3.0 * x as f64 / nx as f64 + 2.0 * y as f64 / ny as f64))
            })
            .collect();
        fft2(&mut a, ny, nx, false);
        for (i, v) in a.iter().enumerate() {
            let want = if i == 2 * nx + 3 { (ny * nx) as f64 } else { 0.0 };
            assert!((v.norm() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn freq_indices() {
        let f: Vec<isize> = (0..6).map(|i| freq_index(i, 6)).collect();
        assert_eq!(f, [0, 1, 2, 3, -2, -1]);
    }
}
