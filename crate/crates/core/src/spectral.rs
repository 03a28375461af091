//! Discrete Fourier transforms.
//!
//! Forward transforms are unnormalized, `X[k] = Σ x[t]·e^{-2πi·kt/T}`; the
//! inverse carries the `1/T`. Power-of-two lengths use an iterative radix-2
//! kernel. Any other length goes through Bluestein's chirp-z identity on a
//! padded power-of-two convolution, so every length gets its exact `T`-point
//! spectrum.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{contract_err, Result};

/// Real time series with its sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Signal> {
        if samples.is_empty() {
            return contract_err("signal must have at least one sample");
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return contract_err(format!("sample rate must be positive, got {sample_rate}"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return contract_err(format!("sample {i} is not finite"));
        }
        Ok(Signal { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Signal {
        Signal { samples, sample_rate: self.sample_rate }
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

/// Complex bins of a `T`-point transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    bins: Vec<Complex64>,
    sample_rate: f64,
}

impl Spectrum {
    pub fn from_bins(bins: Vec<Complex64>, sample_rate: f64) -> Spectrum {
        Spectrum { bins, sample_rate }
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex64] {
        &mut self.bins
    }

    pub fn origin_length(&self) -> usize {
        self.bins.len()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    pub fn energy(&self) -> f64 {
        self.bins.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Largest `|X[k] − conj(X[T−k])|` over `1 ≤ k < T`.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let n = self.bins.len();
        (1..n)
            .map(|k| (self.bins[k] - self.bins[n - k].conj()).norm())
            .fold(0.0, f64::max)
    }
}

/// Direct `O(T²)` evaluation, kept as the reference for the fast path.
pub fn dft_naive(x: &Signal) -> Spectrum {
    let n = x.len();
    let bins = (0..n)
        .map(|k| {
            x.samples()
                .iter()
                .enumerate()
                .map(|(t, &v)| {
                    // reduce kt mod n before scaling so the angle stays exact
                    let phase = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                    Complex64::from_polar(v, phase)
                })
                .sum()
        })
        .collect();
    Spectrum::from_bins(bins, x.sample_rate())
}

fn radix2_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddles: Vec<Complex64> = (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * stride];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn bluestein(input: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = input.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };
    // chirp[t] = e^{sign·iπ t²/n}, with t² reduced mod 2n
    let chirp: Vec<Complex64> = (0..n)
        .map(|t| {
            let sq = (t * t) % (2 * n);
            Complex64::from_polar(1.0, sign * PI * sq as f64 / n as f64)
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for t in 0..n {
        a[t] = input[t] * chirp[t];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for t in 1..n {
        b[t] = chirp[t].conj();
        b[m - t] = chirp[t].conj();
    }
    radix2_in_place(&mut a, false);
    radix2_in_place(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2_in_place(&mut a, true);
    let scale = 1.0 / m as f64;
    (0..n).map(|k| a[k] * scale * chirp[k]).collect()
}

/// Unnormalized transform of complex data, any length.
pub fn fft_complex(input: &[Complex64], inverse: bool) -> Vec<Complex64> {
    if input.len().is_power_of_two() {
        let mut buf = input.to_vec();
        radix2_in_place(&mut buf, inverse);
        buf
    } else {
        bluestein(input, inverse)
    }
}

/// Forward transform of real samples.
pub fn fft_real(samples: &[f64]) -> Vec<Complex64> {
    let buf: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_complex(&buf, false)
}

pub fn fft(x: &Signal) -> Spectrum {
    Spectrum::from_bins(fft_real(x.samples()), x.sample_rate())
}

/// Inverse transform with the `1/T` factor.
pub fn ifft_complex(bins: &[Complex64]) -> Vec<Complex64> {
    let scale = 1.0 / bins.len() as f64;
    fft_complex(bins, true).into_iter().map(|c| c * scale).collect()
}

/// Inverse transform keeping the real part; also returns the largest
/// discarded imaginary magnitude.
pub fn ifft_real(bins: &[Complex64]) -> (Vec<f64>, f64) {
    let out = ifft_complex(bins);
    let residue = out.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    (out.into_iter().map(|c| c.re).collect(), residue)
}

pub fn ifft(x: &Spectrum) -> Result<Signal> {
    let (samples, _) = ifft_real(x.bins());
    Signal::new(samples, x.sample_rate())
}

/// `|X[k]|` for every bin of a real signal.
pub fn magnitude_spectrum(samples: &[f64]) -> Vec<f64> {
    fft_real(samples).iter().map(|c| c.norm()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sig(v: &[f64]) -> Signal {
        Signal::new(v.to_vec(), 1.0).unwrap()
    }

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn constant_signal_is_dc_only() {
        for spec in [dft_naive(&sig(&[1.0; 4])), fft(&sig(&[1.0; 4]))] {
            assert!(close(spec.bins()[0], Complex64::new(4.0, 0.0), 1e-12));
            for b in &spec.bins()[1..] {
                assert!(b.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn sine_at_quarter_length() {
        // Σ x[t] e^{-iπkt/2} for x = [0, 1, 0, −1]
        let s = dft_naive(&sig(&[0.0, 1.0, 0.0, -1.0]));
        let expected = [
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, -2.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 2.0),
        ];
        for (a, b) in s.bins().iter().zip(expected) {
            assert!(close(*a, b, 1e-12));
        }
    }

    #[test]
    fn cosine_energy_sits_at_its_bins() {
        let n = 64;
        let k = 5;
        let x: Vec<f64> = (0..n).map(|t| (2.0 * PI * (k * t) as f64 / n as f64).cos()).collect();
        let s = fft(&sig(&x));
        for (i, b) in s.bins().iter().enumerate() {
            if i == k || i == n - k {
                assert!((b.norm() - n as f64 / 2.0).abs() < 1e-9);
            } else {
                assert!(b.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_of_dc_spectrum() {
        let spec = Spectrum::from_bins(vec![Complex64::new(4.0, 0.0), Complex64::default(), Complex64::default(), Complex64::default()], 1.0);
        let back = ifft(&spec).unwrap();
        for v in back.samples() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_path_matches_reference_for_odd_lengths() {
        let mut rng = crate::rng::stream(11, &[]);
        for n in [1usize, 2, 3, 5, 7, 12, 100, 257] {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = dft_naive(&sig(&x));
            let b = fft(&sig(&x));
            for (p, q) in a.bins().iter().zip(b.bins()) {
                assert!(close(*p, *q, 1e-9), "n = {n}");
            }
            let back = ifft(&b).unwrap();
            for (p, q) in back.samples().iter().zip(&x) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_is_linear() {
        let mut rng = crate::rng::stream(12, &[]);
        let n = 48;
        let mut draw = || -> Vec<Complex64> { (0..n).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect() };
        let (x, y) = (draw(), draw());
        let (a, b) = (0.7, -1.3);
        let mix: Vec<Complex64> = x.iter().zip(&y).map(|(p, q)| p * a + q * b).collect();
        let lhs = ifft_complex(&mix);
        let (ix, iy) = (ifft_complex(&x), ifft_complex(&y));
        for i in 0..n {
            assert!(close(lhs[i], ix[i] * a + iy[i] * b, 1e-9));
        }
    }

    #[test]
    fn rejects_empty_or_non_finite_signals() {
        assert!(Signal::new(vec![], 1.0).is_err());
        assert!(Signal::new(vec![f64::NAN], 1.0).is_err());
        assert!(Signal::new(vec![1.0], 0.0).is_err());
    }
}
