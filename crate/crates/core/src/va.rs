//! Valence-arousal label space: normalization, distances, and the
//! exponential similarity map with its scale constant.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, Scalar};
use crate::seed::rng_for;

/// A point in the normalized valence-arousal unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaPoint<T> {
    valence: T,
    arousal: T,
}

impl<T: Scalar> VaPoint<T> {
    /// Rejects coordinates outside `[0, 1]` (and NaN).
    pub fn new(valence: T, arousal: T) -> Result<Self> {
        for v in [valence, arousal] {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::OutOfRange {
                    value: v.to_f64_lossy(),
                    min: 0.0,
                    max: 1.0,
                });
            }
        }
        Ok(Self { valence, arousal })
    }

    pub fn valence(&self) -> T {
        self.valence
    }

    pub fn arousal(&self) -> T {
        self.arousal
    }

    pub fn to_array(&self) -> [T; 2] {
        [self.valence, self.arousal]
    }

    pub fn cast<U: Scalar>(&self) -> VaPoint<U> {
        VaPoint {
            valence: U::of(self.valence.to_f64_lossy()),
            arousal: U::of(self.arousal.to_f64_lossy()),
        }
    }

    /// Squared Euclidean distance to `other`.
    pub fn squared_distance(&self, other: &Self) -> T {
        let dv = self.valence - other.valence;
        let da = self.arousal - other.arousal;
        dv * dv + da * da
    }
}

impl<T: fmt::Display> fmt::Display for VaPoint<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.valence, self.arousal)
    }
}

/// Affine map of `raw` from `[scale_min, scale_max]` onto `[0, 1]`.
pub fn normalize_va<T: Scalar>(raw: T, scale_min: T, scale_max: T) -> Result<T> {
    if !(scale_max > scale_min) {
        return Err(Error::InvalidScale {
            min: scale_min.to_f64_lossy(),
            max: scale_max.to_f64_lossy(),
        });
    }
    if !(raw >= scale_min && raw <= scale_max) {
        return Err(Error::OutOfRange {
            value: raw.to_f64_lossy(),
            min: scale_min.to_f64_lossy(),
            max: scale_max.to_f64_lossy(),
        });
    }
    Ok((raw - scale_min) / (scale_max - scale_min))
}

/// Min/range normalization of raw `(valence, arousal)` ratings, each
/// dimension against its own observed extremes.
pub fn normalize_ratings<T: Scalar>(raw: &[(T, T)]) -> Result<Vec<VaPoint<T>>> {
    if raw.is_empty() {
        return Err(Error::EmptyCorpus("no ratings to normalize".into()));
    }
    let extent = |pick: fn(&(T, T)) -> T| {
        raw.iter().map(pick).fold((T::infinity(), T::neg_infinity()), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
    };
    let (v_min, v_max) = extent(|r| r.0);
    let (a_min, a_max) = extent(|r| r.1);
    raw.iter()
        .map(|&(v, a)| {
            VaPoint::new(
                normalize_va(v, v_min, v_max)?,
                normalize_va(a, a_min, a_max)?,
            )
        })
        .collect()
}

pub fn va_distance<T: Scalar>(a: &VaPoint<T>, b: &VaPoint<T>) -> T {
    a.squared_distance(b).sqrt()
}

/// How a [`SimilarityScale`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaProvenance {
    /// Mean over the full image × music product.
    Exact,
    /// Mean over `count` seeded uniform cross pairs (drawn with replacement).
    Sampled { seed: u64, count: usize },
}

impl fmt::Display for SigmaProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaProvenance::Exact => f.write_str("exact"),
            SigmaProvenance::Sampled { seed, count } => write!(f, "sampled:{seed}:{count}"),
        }
    }
}

impl std::str::FromStr for SigmaProvenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "exact" {
            return Ok(SigmaProvenance::Exact);
        }
        let bad = || Error::Config(format!("bad sigma mode `{s}` (want exact or sampled:<seed>:<count>)"));
        let rest = s.strip_prefix("sampled:").ok_or_else(bad)?;
        let (seed, count) = rest.split_once(':').ok_or_else(bad)?;
        Ok(SigmaProvenance::Sampled {
            seed: seed.parse().map_err(|_| bad())?,
            count: count.parse().map_err(|_| bad())?,
        })
    }
}

/// The distance scale `sigma` of the similarity map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScale<T> {
    sigma: T,
    provenance: SigmaProvenance,
}

impl<T: Scalar> SimilarityScale<T> {
    pub fn new(sigma: T, provenance: SigmaProvenance) -> Result<Self> {
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(Error::DegenerateSigma(sigma.to_f64_lossy()));
        }
        Ok(Self { sigma, provenance })
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn provenance(&self) -> SigmaProvenance {
        self.provenance
    }

    pub fn cast<U: Scalar>(&self) -> SimilarityScale<U> {
        SimilarityScale {
            sigma: U::of(self.sigma.to_f64_lossy()),
            provenance: self.provenance,
        }
    }

    /// `exp(-d / sigma)`.
    pub fn similarity(&self, d: T) -> T {
        similarity(d, self)
    }

    pub fn similarity_between(&self, a: &VaPoint<T>, b: &VaPoint<T>) -> T {
        similarity(va_distance(a, b), self)
    }
}

pub fn similarity<T: Scalar>(d: T, scale: &SimilarityScale<T>) -> T {
    (-d / scale.sigma).exp()
}

/// Mean cross-modal label distance.
///
/// Exact mode sums each image's row of distances by pairwise reduction,
/// then reduces the row sums the same way; rows may be evaluated in
/// parallel without changing the result.
pub fn compute_sigma<T: Scalar>(
    image_labels: &[VaPoint<T>],
    music_labels: &[VaPoint<T>],
    mode: SigmaProvenance,
) -> Result<SimilarityScale<T>> {
    if image_labels.is_empty() {
        return Err(Error::EmptyCorpus("no image labels for sigma".into()));
    }
    if music_labels.is_empty() {
        return Err(Error::EmptyCorpus("no music labels for sigma".into()));
    }
    let mean = match mode {
        SigmaProvenance::Exact => {
            let row_sums: Vec<T> = image_labels
                .par_iter()
                .map(|img| {
                    let row: Vec<T> = music_labels.iter().map(|m| va_distance(img, m)).collect();
                    pairwise_sum(&row)
                })
                .collect();
            let total = pairwise_sum(&row_sums);
            total / T::of((image_labels.len() * music_labels.len()) as f64)
        }
        SigmaProvenance::Sampled { seed, count } => {
            if count == 0 {
                return Err(Error::Config("sampled sigma needs count > 0".into()));
            }
            let mut rng = rng_for(seed, &[0x5167]);
            let draws: Vec<T> = (0..count)
                .map(|_| {
                    let i = rng.random_range(0..image_labels.len());
                    let j = rng.random_range(0..music_labels.len());
                    va_distance(&image_labels[i], &music_labels[j])
                })
                .collect();
            pairwise_sum(&draws) / T::of(count as f64)
        }
    };
    SimilarityScale::new(mean, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p(v: f64, a: f64) -> VaPoint<f64> {
        VaPoint::new(v, a).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_va(1.0, 1.0, 9.0).unwrap(), 0.0);
        assert_eq!(normalize_va(9.0, 1.0, 9.0).unwrap(), 1.0);
        assert_eq!(normalize_va(5.0, 1.0, 9.0).unwrap(), 0.5);
        assert!(matches!(normalize_va(3.0, 2.0, 2.0), Err(Error::InvalidScale { .. })));
        assert!(matches!(normalize_va(10.0, 1.0, 9.0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn va_point_rejects_out_of_range() {
        assert!(VaPoint::new(1.2, 0.5).is_err());
        assert!(VaPoint::new(0.5, -0.1).is_err());
        assert!(VaPoint::new(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(va_distance(&p(0.5, 0.5), &p(0.5, 0.5)), 0.0);
        assert_relative_eq!(va_distance(&p(0.0, 0.0), &p(1.0, 1.0)), 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(va_distance(&p(0.2, 0.4), &p(0.5, 0.8)), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn similarity_examples() {
        let s = SimilarityScale::new(0.5, SigmaProvenance::Exact).unwrap();
        assert_eq!(s.similarity(0.0), 1.0);
        assert_relative_eq!(s.similarity(0.5), 0.367_879_44, epsilon = 1e-8);
        assert_relative_eq!(s.similarity(1.0), 0.135_335_28, epsilon = 1e-8);
    }

    #[test]
    fn sigma_examples() {
        let z = [p(0.0, 0.0)];
        assert!(matches!(
            compute_sigma(&z, &z, SigmaProvenance::Exact),
            Err(Error::DegenerateSigma(_))
        ));
        let s = compute_sigma(&z, &[p(1.0, 1.0)], SigmaProvenance::Exact).unwrap();
        assert_relative_eq!(s.sigma(), 2f64.sqrt(), epsilon = 1e-12);
        assert!(matches!(
            compute_sigma(&[], &z, SigmaProvenance::Exact),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn sigma_three_by_two_brute_force() {
        let imgs = [p(0.1, 0.2), p(0.9, 0.4), p(0.5, 0.5)];
        let mus = [p(0.3, 0.8), p(0.0, 1.0)];
        let mut sum = 0.0;
        for a in &imgs {
            for b in &mus {
                sum += ((a.valence() - b.valence()).powi(2) + (a.arousal() - b.arousal()).powi(2)).sqrt();
            }
        }
        let s = compute_sigma(&imgs, &mus, SigmaProvenance::Exact).unwrap();
        assert_relative_eq!(s.sigma(), sum / 6.0, max_relative = 1e-12);
    }

    #[test]
    fn sampled_sigma_is_reproducible_and_close() {
        let imgs: Vec<_> = (0..40).map(|i| p(i as f64 / 40.0, 0.3)).collect();
        let mus: Vec<_> = (0..30).map(|j| p(0.7, j as f64 / 30.0)).collect();
        let mode = SigmaProvenance::Sampled { seed: 11, count: 20_000 };
        let a = compute_sigma(&imgs, &mus, mode).unwrap();
        let b = compute_sigma(&imgs, &mus, mode).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.provenance(), mode);
        let exact = compute_sigma(&imgs, &mus, SigmaProvenance::Exact).unwrap();
        assert_relative_eq!(a.sigma(), exact.sigma(), max_relative = 0.02);
    }

    #[test]
    fn provenance_round_trips_through_text() {
        for m in [SigmaProvenance::Exact, SigmaProvenance::Sampled { seed: 3, count: 9 }] {
            assert_eq!(m.to_string().parse::<SigmaProvenance>().unwrap(), m);
        }
        assert!("sampled:x".parse::<SigmaProvenance>().is_err());
    }

    #[test]
    fn ratings_normalize_per_dimension() {
        let pts = normalize_ratings(&[(1.0, -1.0), (9.0, 1.0), (5.0, 0.0)]).unwrap();
        assert_eq!(pts[0], p(0.0, 0.0));
        assert_eq!(pts[1], p(1.0, 1.0));
        assert_eq!(pts[2], p(0.5, 0.5));
        assert!(normalize_ratings(&[(1.0, 2.0), (1.0, 3.0)]).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let a = VaPoint::<f32>::new(0.2, 0.4).unwrap();
        let b = VaPoint::<f32>::new(0.5, 0.8).unwrap();
        assert!((va_distance(&a, &b) - 0.5).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(v1 in 0.0..=1.0f64, a1 in 0.0..=1.0f64, v2 in 0.0..=1.0f64, a2 in 0.0..=1.0f64) {
            let (x, y) = (p(v1, a1), p(v2, a2));
            prop_assert_eq!(va_distance(&x, &y), va_distance(&y, &x));
        }

        #[test]
        fn normalize_preserves_order(r1 in 1.0..9.0f64, r2 in 1.0..9.0f64) {
            prop_assume!(r1 < r2);
            prop_assert!(normalize_va(r1, 1.0, 9.0).unwrap() < normalize_va(r2, 1.0, 9.0).unwrap());
        }

        #[test]
        fn similarity_is_bounded_and_monotone(d1 in 0.0..5.0f64, d2 in 0.0..5.0f64, sigma in 0.01..2.0f64) {
            let s = SimilarityScale::new(sigma, SigmaProvenance::Exact).unwrap();
            let (s1, s2) = (s.similarity(d1), s.similarity(d2));
            prop_assert!(s1 > 0.0 && s1 <= 1.0);
            if d1 == 0.0 {
                prop_assert_eq!(s1, 1.0);
            } else if d1 / sigma > 1e-12 {
                prop_assert!(s1 < 1.0);
            }
            if d1 < d2 {
                prop_assert!(s1 > s2);
            }
        }
    }
}
