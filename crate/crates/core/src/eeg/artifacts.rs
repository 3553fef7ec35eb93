use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use super::{IcaDecomposition, RawRecording};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Thresholds for flagging independent components as artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactCriteria {
    pub kurtosis: f64,
    pub correlation: f64,
}

impl Default for ArtifactCriteria {
    fn default() -> Self {
        Self {
            kurtosis: 3.0,
            correlation: 0.7,
        }
    }
}

pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in x {
        let d = (v - mean) * (v - mean);
        m2 += d;
        m4 += d * d;
    }
    m2 /= n;
    m4 /= n;
    if m2 <= 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Components whose excess kurtosis or correlation with any reference row
/// exceeds the configured thresholds, in ascending order.
pub fn identify_artifacts(
    dec: &IcaDecomposition,
    refs: Option<&Mat>,
    criteria: &ArtifactCriteria,
) -> Vec<usize> {
    (0..dec.n_components())
        .filter(|&k| {
            let s = dec.sources.row(k);
            if excess_kurtosis(s).abs() > criteria.kurtosis {
                return true;
            }
            refs.is_some_and(|r| {
                (0..r.rows).any(|j| pearson(s, r.row(j)).abs() > criteria.correlation)
            })
        })
        .collect()
}

/// Reconstructs channel data with the listed source rows zeroed.
pub fn remove_components(
    rec: &RawRecording,
    dec: &IcaDecomposition,
    indices: &[usize],
) -> Result<RawRecording> {
    let n = dec.n_components();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Argument(format!(
            "component index {bad} out of range for {n} components"
        )));
    }
    if dec.sources.cols != rec.samples() || dec.means.len() != rec.channels() {
        return Err(Error::Argument(format!(
            "decomposition of {}×{} does not match recording of {}×{}",
            dec.means.len(),
            dec.sources.cols,
            rec.channels(),
            rec.samples()
        )));
    }
    // Subtract only what the dropped components contribute, so variance
    // outside a reduced decomposition is kept.
    let mut dropped = Mat::zeros(n, dec.sources.cols);
    for &i in indices {
        dropped.row_mut(i).copy_from_slice(dec.sources.row(i));
    }
    let z = dec.mixing.matmul(&dropped)?;
    let part = dec.dewhitener.matmul(&z)?;
    let mut x = rec.data.clone();
    for (v, p) in x.data.iter_mut().zip(&part.data) {
        *v -= p;
    }
    Ok(rec.with_data(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eeg::{fastica, IcaOptions};
    use core::f64::consts::PI;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, t: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(
            rows,
            t,
            (0..rows * t)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        )
        .unwrap()
    }

    /// Three smooth "brain" sources plus one sparse spike train standing in
    /// for eye blinks, mixed into four channels.
    struct Injected {
        rec: RawRecording,
        clean: Mat,
        blink: Vec<f64>,
    }

    fn injected(t: usize, seed: u64) -> Injected {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut brain = Mat::zeros(3, t);
        for i in 0..t {
            let x = i as f64 / 128.0;
            brain.set(0, i, (2.0 * PI * 10.0 * x).sin());
            brain.set(
                1,
                i,
                (2.0 * PI * 6.3 * x + 0.4).sin() + 0.3 * rng.gen_range(-1.0..1.0),
            );
            brain.set(2, i, rng.gen_range(-1.0..1.0));
        }
        let mut blink = alloc::vec![0.0; t];
        let mut i = 50;
        while i + 40 < t {
            for k in 0..40 {
                blink[i + k] += 6.0 * (PI * k as f64 / 40.0).sin();
            }
            i += 300 + rng.gen_range(0..200);
        }
        let brain_mix = Mat::from_vec(
            4,
            3,
            alloc::vec![1.0, 0.3, 0.2, 0.5, 1.0, -0.3, -0.2, 0.6, 1.0, 0.7, -0.4, 0.5],
        )
        .unwrap();
        let blink_mix = [1.0, 0.7, 0.3, 0.1];
        let clean = brain_mix.matmul(&brain).unwrap();
        let mut x = clean.clone();
        for (c, w) in blink_mix.iter().enumerate() {
            for (v, b) in x.row_mut(c).iter_mut().zip(&blink) {
                *v += w * b;
            }
        }
        Injected {
            rec: RawRecording::unnamed(x, 128.0).unwrap(),
            clean,
            blink,
        }
    }

    #[test]
    fn kurtosis_oracle() {
        // Uniform distribution has excess kurtosis -1.2.
        let u: Vec<f64> = (0..100_000).map(|i| (i as f64 + 0.5) / 100_000.0).collect();
        assert!((excess_kurtosis(&u) + 1.2).abs() < 1e-6);
        let g = gaussian(1, 200_000, 1);
        assert!(excess_kurtosis(g.row(0)).abs() < 0.05);
    }

    #[test]
    fn gaussian_sources_are_not_flagged() {
        let rec = RawRecording::unnamed(gaussian(4, 5000, 2), 128.0).unwrap();
        let dec = fastica(&rec, &IcaOptions::new(4, 0)).unwrap();
        assert!(identify_artifacts(&dec, None, &ArtifactCriteria::default()).is_empty());
    }

    #[test]
    fn spike_component_is_flagged_by_kurtosis() {
        let inj = injected(8000, 3);
        assert!(excess_kurtosis(&inj.blink) > 5.0);
        let dec = fastica(&inj.rec, &IcaOptions::new(4, 0)).unwrap();
        let flagged = identify_artifacts(&dec, None, &ArtifactCriteria::default());
        assert_eq!(flagged.len(), 1);
        let k = flagged[0];
        assert!(pearson(dec.sources.row(k), &inj.blink).abs() > 0.95);
    }

    #[test]
    fn reference_correlated_component_is_flagged() {
        let inj = injected(8000, 4);
        let dec = fastica(&inj.rec, &IcaOptions::new(4, 1)).unwrap();
        // Build a reference that correlates ~0.95 with component 2 only.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target = 2;
        let refrow: Vec<f64> = dec
            .sources
            .row(target)
            .iter()
            .map(|v| {
                2.0 * v
                    + 0.65 * {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        e
                    }
            })
            .collect();
        let r = pearson(&refrow, dec.sources.row(target));
        assert!(r > 0.9 && r < 0.99, "{r}");
        let refs = Mat::from_vec(1, refrow.len(), refrow).unwrap();
        let criteria = ArtifactCriteria {
            kurtosis: f64::INFINITY,
            correlation: 0.7,
        };
        assert_eq!(
            identify_artifacts(&dec, Some(&refs), &criteria),
            alloc::vec![target]
        );
    }

    #[test]
    fn removal_round_trips_and_cleans() {
        let inj = injected(8000, 5);
        let dec = fastica(&inj.rec, &IcaOptions::new(4, 2)).unwrap();

        let same = remove_components(&inj.rec, &dec, &[]).unwrap();
        let err: f64 = same
            .data
            .sub(&inj.rec.data)
            .data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-8, "{err}");

        let flagged = identify_artifacts(&dec, None, &ArtifactCriteria::default());
        let cleaned = remove_components(&inj.rec, &dec, &flagged).unwrap();
        for c in 0..4 {
            let before = pearson(inj.rec.data.row(c), inj.clean.row(c));
            let after = pearson(cleaned.data.row(c), inj.clean.row(c));
            assert!(after > 0.95, "channel {c}: {before} -> {after}");
        }

        let all = remove_components(&inj.rec, &dec, &[0, 1, 2, 3]).unwrap();
        for c in 0..4 {
            let row = all.data.row(c);
            assert!(row.iter().all(|v| (v - dec.means[c]).abs() < 1e-9));
        }
    }

    #[test]
    fn invalid_index_is_rejected() {
        let inj = injected(2000, 6);
        let dec = fastica(&inj.rec, &IcaOptions::new(4, 0)).unwrap();
        assert!(matches!(
            remove_components(&inj.rec, &dec, &[4]),
            Err(Error::Argument(_))
        ));
    }
}
