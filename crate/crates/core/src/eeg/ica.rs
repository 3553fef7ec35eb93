//! Parallel FastICA with the logcosh contrast.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RawRecording;
use crate::error::{Error, Result};
use crate::linalg::{symmetric_decorrelate, symmetric_eigen, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcaOptions {
    pub n_components: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl IcaOptions {
    pub fn new(n_components: usize, seed: u64) -> Self {
        Self {
            n_components,
            tol: 1e-4,
            max_iter: 200,
            seed,
        }
    }
}

/// Result of one decomposition. `sources = unmixing · whitener · (X − means)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaDecomposition {
    /// `n × n`, orthogonal in whitened space.
    pub unmixing: Mat,
    /// `n × n`, inverse of `unmixing`.
    pub mixing: Mat,
    /// `n × samples`, unit variance rows.
    pub sources: Mat,
    /// `n × channels`.
    pub whitener: Mat,
    /// `channels × n`, maps whitened space back to channel space.
    pub dewhitener: Mat,
    pub means: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl IcaDecomposition {
    pub fn n_components(&self) -> usize {
        self.unmixing.rows
    }

    /// Full unmixing from centered channel data to sources.
    pub fn channel_unmixing(&self) -> Result<Mat> {
        self.unmixing.matmul(&self.whitener)
    }
}

/// Centers each row and returns the means.
fn center(x: &Mat) -> (Mat, Vec<f64>) {
    let mut out = x.clone();
    let mut means = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let m = row.iter().sum::<f64>() / row.len() as f64;
        row.iter_mut().for_each(|v| *v -= m);
        means.push(m);
    }
    (out, means)
}

pub fn fastica(rec: &RawRecording, opts: &IcaOptions) -> Result<IcaDecomposition> {
    let c = rec.channels();
    let t = rec.samples();
    let n = opts.n_components;
    if n == 0 || n > c {
        return Err(Error::Argument(alloc::format!(
            "n_components must be in 1..={c}, got {n}"
        )));
    }
    if t <= c {
        return Err(Error::Argument(alloc::format!(
            "need more samples than channels for ICA, got {t} samples for {c} channels"
        )));
    }
    let (xc, means) = center(&rec.data);
    let mut cov = xc.matmul_nt(&xc)?;
    cov.data.iter_mut().for_each(|v| *v /= t as f64);
    let (vals, vecs) = symmetric_eigen(&cov)?;
    let floor = vals[0].abs().max(1e-300) * 1e-12;
    if let Some(i) = (0..n).find(|&i| vals[i] <= floor) {
        return Err(Error::RankDeficient {
            dim: i,
            value: vals[i],
        });
    }
    let mut whitener = Mat::zeros(n, c);
    let mut dewhitener = Mat::zeros(c, n);
    for k in 0..n {
        let s = vals[k].sqrt();
        for ch in 0..c {
            whitener.set(k, ch, vecs.at(ch, k) / s);
            dewhitener.set(ch, k, vecs.at(ch, k) * s);
        }
    }
    let z = whitener.matmul(&xc)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init: Vec<f64> = (0..n * n)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut w = symmetric_decorrelate(&Mat::from_vec(n, n, init)?)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut g = Mat::zeros(n, t);
    for it in 1..=opts.max_iter {
        iterations = it;
        let wz = w.matmul(&z)?;
        let mut mean_gp = alloc::vec![0.0; n];
        for (i, (gv, &u)) in g.data.iter_mut().zip(&wz.data).enumerate() {
            let th = u.tanh();
            *gv = th;
            mean_gp[i / t] += 1.0 - th * th;
        }
        let mut w_new = g.matmul_nt(&z)?;
        for r in 0..n {
            let mg = mean_gp[r] / t as f64;
            for col in 0..n {
                let v = w_new.at(r, col) / t as f64 - mg * w.at(r, col);
                w_new.set(r, col, v);
            }
        }
        let w_new = symmetric_decorrelate(&w_new)?;
        let lim = (0..n)
            .map(|r| {
                let dot: f64 = w_new.row(r).iter().zip(w.row(r)).map(|(a, b)| a * b).sum();
                (1.0 - dot.abs()).abs()
            })
            .fold(0.0, f64::max);
        w = w_new;
        if lim < opts.tol {
            converged = true;
            break;
        }
    }
    let sources = w.matmul(&z)?;
    // W is orthogonal, so its inverse is its transpose up to rounding; the
    // explicit inverse keeps W·A = I tight.
    let mixing = w.inverse()?;
    Ok(IcaDecomposition {
        unmixing: w,
        mixing,
        sources,
        whitener,
        dewhitener,
        means,
        converged,
        iterations,
    })
}

/// Amari index of a square matrix `P = W·A_true`: 0 iff `P` is a scaled
/// permutation. Normalized to `[0, 1]`.
pub fn amari_index(p: &Mat) -> f64 {
    let n = p.rows;
    if n < 2 {
        return 0.0;
    }
    let abs: Vec<f64> = p.data.iter().map(|v| v.abs()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let row = &abs[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(0.0, f64::max);
        total += row.iter().sum::<f64>() / max - 1.0;
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| abs[i * n + j]).collect();
        let max = col.iter().copied().fold(0.0, f64::max);
        total += col.iter().sum::<f64>() / max - 1.0;
    }
    total / (2.0 * n as f64 * (n as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;
    use rand::Rng;

    fn four_sources(t: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Mat::zeros(4, t);
        for i in 0..t {
            let x = i as f64 / 128.0;
            s.set(0, i, (2.0 * PI * 3.0 * x).sin());
            s.set(1, i, 2.0 * ((1.7 * x) % 1.0) - 1.0);
            s.set(2, i, rng.gen_range(-1.0..1.0));
            s.set(
                3,
                i,
                if (2.0 * PI * 0.9 * x).sin() >= 0.0 {
                    1.0
                } else {
                    -1.0
                },
            );
        }
        s
    }

    fn random_mixing(seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Diagonal boost keeps it well-conditioned.
        let mut a = Mat::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                a.set(
                    i,
                    j,
                    rng.gen_range(-1.0..1.0) + if i == j { 2.0 } else { 0.0 },
                );
            }
        }
        a
    }

    #[test]
    fn recovers_four_mixed_sources() {
        let s = four_sources(4000, 5);
        let a_true = random_mixing(6);
        let x = a_true.matmul(&s).unwrap();
        let rec = RawRecording::unnamed(x, 128.0).unwrap();
        let dec = fastica(&rec, &IcaOptions::new(4, 0)).unwrap();
        assert!(dec.converged);
        let p = dec.channel_unmixing().unwrap().matmul(&a_true).unwrap();
        let idx = amari_index(&p);
        assert!(idx < 0.05, "amari {idx}");

        // W·A = I
        let wa = dec.unmixing.matmul(&dec.mixing).unwrap();
        assert!(wa.sub(&Mat::eye(4)).frobenius() < 1e-6);
        // sources: unit variance, uncorrelated
        let cov = dec.sources.matmul_nt(&dec.sources).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let v = cov.at(i, j) / 4000.0;
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-6, "cov[{i}][{j}] = {v}");
            }
        }
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let s = four_sources(3000, 8);
        let x = random_mixing(9).matmul(&s).unwrap();
        let rec = RawRecording::unnamed(x, 128.0).unwrap();
        let dec = fastica(&rec, &IcaOptions::new(4, 1)).unwrap();
        let (xc, _) = center(&rec.data);
        let z = dec.whitener.matmul(&xc).unwrap();
        let mut cov = z.matmul_nt(&z).unwrap();
        cov.data.iter_mut().for_each(|v| *v /= 3000.0);
        assert!(cov.sub(&Mat::eye(4)).frobenius() < 1e-6);
    }

    #[test]
    fn identity_mixing_recovers_inputs_up_to_sign_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = 5000;
        let mut s = Mat::zeros(2, t);
        for i in 0..t {
            s.set(0, i, rng.gen_range(-1.0..1.0));
            s.set(1, i, if (i / 37) % 2 == 0 { 1.0 } else { -1.0 });
        }
        let rec = RawRecording::unnamed(s.clone(), 128.0).unwrap();
        let dec = fastica(&rec, &IcaOptions::new(2, 4)).unwrap();
        let p = dec.channel_unmixing().unwrap();
        assert!(amari_index(&p) < 0.02);
        // each recovered row matches some standardized input row up to sign
        let (sc, _) = center(&s);
        for r in 0..2 {
            let best = (0..2)
                .map(|k| {
                    let a = dec.sources.row(r);
                    let b = sc.row(k);
                    let nb = (b.iter().map(|v| v * v).sum::<f64>() / t as f64).sqrt();
                    a.iter().zip(b).map(|(x, y)| x * y / nb).sum::<f64>().abs() / t as f64
                })
                .fold(0.0, f64::max);
            assert!(best > 0.999, "row {r}: {best}");
        }
    }

    #[test]
    fn rank_deficient_covariance_is_reported() {
        let s = four_sources(1000, 3);
        let mut x = Mat::zeros(3, 1000);
        for i in 0..1000 {
            x.set(0, i, s.at(0, i));
            x.set(1, i, s.at(1, i));
            x.set(2, i, s.at(0, i) + s.at(1, i));
        }
        let rec = RawRecording::unnamed(x, 128.0).unwrap();
        match fastica(&rec, &IcaOptions::new(3, 0)) {
            Err(Error::RankDeficient { dim, .. }) => assert_eq!(dim, 2),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let s = four_sources(2000, 1);
        let x = random_mixing(2).matmul(&s).unwrap();
        let rec = RawRecording::unnamed(x, 128.0).unwrap();
        let mut opts = IcaOptions::new(4, 3);
        opts.max_iter = 1;
        let dec = fastica(&rec, &opts).unwrap();
        assert!(!dec.converged);
        assert_eq!(dec.iterations, 1);
    }

    #[test]
    fn amari_index_of_scaled_permutation_is_zero() {
        let p = Mat::from_vec(
            3,
            3,
            alloc::vec![0.0, 2.0, 0.0, 0.0, 0.0, -1.0, 3.0, 0.0, 0.0],
        )
        .unwrap();
        assert!(amari_index(&p) < 1e-15);
        let full = Mat::from_vec(2, 2, alloc::vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((amari_index(&full) - 1.0).abs() < 1e-12);
    }
}
