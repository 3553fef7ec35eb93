//! Butterworth bandpass design and zero-phase (forward–backward) filtering.

use alloc::format;

use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::RawRecording;
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// One second-order section, `b0 + b1 z⁻¹ + b2 z⁻²` over `1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

pub const DEFAULT_ORDER: usize = 4;

/// Digital Butterworth bandpass with an `order`-pole lowpass prototype
/// (so `2·order` poles in total), designed through the bilinear transform
/// with pre-warped band edges.
pub fn butterworth_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Result<Sos> {
    if !(lo > 0.0 && lo < hi && hi < fs / 2.0) || order == 0 {
        return Err(Error::Argument(format!(
            "band edges need 0 < lo < hi < fs/2 and order >= 1; got lo={lo}, hi={hi}, fs={fs}, order={order}"
        )));
    }
    let fs2 = 2.0 * fs;
    let w_lo = fs2 * (PI * lo / fs).tan();
    let w_hi = fs2 * (PI * hi / fs).tan();
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    // Analog lowpass prototype poles in the left half plane.
    let proto: Vec<Complex64> = (0..order)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect();

    // Lowpass → bandpass: each pole splits in two.
    let mut analog = Vec::with_capacity(2 * order);
    for p in &proto {
        let half = *p * (bw / 2.0);
        let disc = (half * half - w0_sq).sqrt();
        analog.push(half + disc);
        analog.push(half - disc);
    }

    // Bilinear transform. Bandpass zeros: `order` at s = 0 (z = 1) and
    // `order` at infinity (z = −1).
    let digital: Vec<Complex64> = analog.iter().map(|&s| (fs2 + s) / (fs2 - s)).collect();
    let mut gain = Complex64::new(bw.powi(order as i32), 0.0);
    for &s in &analog {
        gain /= fs2 - s;
    }
    // zeros at s = 0 map with factor fs2 each; zeros at infinity contribute 1.
    gain *= fs2.powi(order as i32);

    // Pair conjugate poles (upper half plane ones carry the section).
    let mut upper: Vec<Complex64> = digital.iter().copied().filter(|p| p.im > 0.0).collect();
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let mut reals: Vec<Complex64> = digital
        .iter()
        .copied()
        .filter(|p| p.im.abs() <= 1e-12 * p.norm().max(1.0))
        .collect();
    let mut sections = Vec::with_capacity(order);
    for p in upper {
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        });
    }
    while !reals.is_empty() {
        let p1 = reals.pop().unwrap().re;
        let p2 = reals.pop().map(|p| p.re);
        sections.push(match p2 {
            Some(p2) => Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -(p1 + p2), p1 * p2],
            },
            None => Biquad {
                b: [1.0, -1.0, 0.0],
                a: [1.0, -p1, 0.0],
            },
        });
    }
    if let Some(first) = sections.first_mut() {
        for c in first.b.iter_mut() {
            *c *= gain.re;
        }
    }
    Ok(Sos { sections })
}

impl Sos {
    /// `|H(e^{jω})|` at frequency `f` Hz, evaluated from the coefficients.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| {
                let num = s.b[0] + z1 * s.b[1] + z2 * s.b[2];
                let den = s.a[0] + z1 * s.a[1] + z2 * s.a[2];
                (num / den).norm()
            })
            .product()
    }

    /// Steady-state initial conditions for a unit step (transposed direct
    /// form II states per section).
    fn step_zi(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let sum_a = s.a[0] + s.a[1] + s.a[2];
                let sum_b = s.b[0] + s.b[1] + s.b[2];
                let y = if sum_a.abs() > 1e-300 {
                    sum_b / sum_a
                } else {
                    0.0
                };
                let z2 = s.b[2] - s.a[2] * y;
                let z1 = s.b[1] - s.a[1] * y + z2;
                let zi = [z1 * scale, z2 * scale];
                scale *= y;
                zi
            })
            .collect()
    }

    /// Causal filtering in place, starting from `zi` scaled by `x0`.
    fn filter_in_place(&self, x: &mut [f64], zi: &[[f64; 2]], x0: f64) {
        for (s, z) in self.sections.iter().zip(zi) {
            let (mut z1, mut z2) = (z[0] * x0, z[1] * x0);
            for v in x.iter_mut() {
                let xin = *v;
                let y = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[1] * y + z2;
                z2 = s.b[2] * xin - s.a[2] * y;
                *v = y;
            }
        }
    }

    /// Zero-phase forward–backward filtering with odd-extension padding and
    /// steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let zi = self.step_zi();
        let x0 = ext[0];
        self.filter_in_place(&mut ext, &zi, x0);
        ext.reverse();
        let y0 = ext[0];
        self.filter_in_place(&mut ext, &zi, y0);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Zero-phase Butterworth bandpass of every channel.
pub fn bandpass(rec: &RawRecording, lo: f64, hi: f64) -> Result<RawRecording> {
    let sos = butterworth_bandpass(DEFAULT_ORDER, lo, hi, rec.fs)?;
    let mut out = Mat::zeros(rec.channels(), rec.samples());
    for c in 0..rec.channels() {
        let y = sos.filtfilt(rec.data.row(c));
        out.row_mut(c).copy_from_slice(&y);
    }
    Ok(rec.with_data(out))
}

/// Steady-state amplitude ratio of a sinusoid at `f` after zero-phase
/// filtering, measured on the central half of a long synthetic record.
pub fn measured_gain(sos: &Sos, f: f64, fs: f64, seconds: f64) -> f64 {
    let n = (seconds * fs) as usize;
    let x: Vec<f64> = (0..n)
        .map(|i| (2.0 * PI * f * i as f64 / fs).sin())
        .collect();
    let y = sos.filtfilt(&x);
    let (a, b) = (n / 4, 3 * n / 4);
    let rms = |v: &[f64]| (v.iter().map(|s| s * s).sum::<f64>() / v.len() as f64).sqrt();
    rms(&y[a..b]) / rms(&x[a..b])
}
