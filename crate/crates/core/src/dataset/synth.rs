use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Corpus, Item, Modality};
use crate::error::{Error, Result};
use crate::seed::{rng_for, tag};
use crate::va::VaPoint;

fn modality_items(
    modality: Modality,
    count: usize,
    dim: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Item>> {
    let mut rng = rng_for(seed, &[tag("synthetic"), tag(modality.as_str())]);
    // dim x 2 embedding of (valence, arousal)
    let embedding: Vec<[f64; 2]> = (0..dim)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect();
    let noise = Normal::new(0.0, noise_std)
        .map_err(|e| Error::Config(format!("noise_std {noise_std}: {e}")))?;
    let prefix = match modality {
        Modality::Image => "img",
        Modality::Music => "mus",
    };
    (0..count)
        .map(|n| {
            let label = VaPoint::new(rng.random::<f64>(), rng.random::<f64>())?;
            let features = embedding
                .iter()
                .map(|w| {
                    let clean = w[0] * label.valence() + w[1] * label.arousal();
                    if noise_std > 0.0 {
                        clean + noise.sample(&mut rng)
                    } else {
                        clean
                    }
                })
                .collect();
            Ok(Item {
                id: format!("{prefix}{n:06}"),
                modality,
                label,
                features,
            })
        })
        .collect()
}

/// Seeded synthetic corpus: labels uniform on the unit square, features a
/// fixed random linear embedding of the label plus Gaussian noise.
pub fn gen_synthetic(
    n_images: usize,
    n_music: usize,
    image_dim: usize,
    music_dim: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Corpus> {
    if image_dim < 2 || music_dim < 2 {
        return Err(Error::Config("synthetic feature dimensions must be at least 2".into()));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::Config(format!("noise_std must be finite and >= 0, got {noise_std}")));
    }
    Corpus::new(
        modality_items(Modality::Image, n_images, image_dim, noise_std, seed)?,
        modality_items(Modality::Music, n_music, music_dim, noise_std, seed)?,
        image_dim,
        music_dim,
        format!("synthetic seed={seed} noise_std={noise_std}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Least-squares recovery of (v, a) from features via the 2x2 normal
    /// equations against the known embedding.
    fn recover(features: &[f64], w: &[[f64; 2]]) -> (f64, f64) {
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (f, r) in features.iter().zip(w) {
            a11 += r[0] * r[0];
            a12 += r[0] * r[1];
            a22 += r[1] * r[1];
            b1 += r[0] * f;
            b2 += r[1] * f;
        }
        let det = a11 * a22 - a12 * a12;
        ((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det)
    }

    #[test]
    fn noiseless_features_are_linear_in_labels() {
        let corpus = gen_synthetic(20, 10, 6, 4, 0.0, 42).unwrap();
        // recover the embedding from two items, then check every item
        for modality in [Modality::Image, Modality::Music] {
            let items = corpus.items(modality);
            let (p, q) = (&items[0], &items[1]);
            let det = p.label.valence() * q.label.arousal() - p.label.arousal() * q.label.valence();
            let w: Vec<[f64; 2]> = (0..corpus.dim(modality))
                .map(|k| {
                    let (fp, fq) = (p.features[k], q.features[k]);
                    [
                        (fp * q.label.arousal() - fq * p.label.arousal()) / det,
                        (fq * p.label.valence() - fp * q.label.valence()) / det,
                    ]
                })
                .collect();
            for item in items {
                let (v, a) = recover(&item.features, &w);
                assert!((v - item.label.valence()).abs() < 1e-8);
                assert!((a - item.label.arousal()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic(10, 5, 3, 3, 0.05, 1).unwrap();
        let b = gen_synthetic(10, 5, 3, 3, 0.05, 1).unwrap();
        let c = gen_synthetic(10, 5, 3, 3, 0.05, 2).unwrap();
        assert_eq!(a.images(), b.images());
        assert_eq!(a.music(), b.music());
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn rejects_tiny_dims() {
        assert!(gen_synthetic(3, 3, 1, 4, 0.0, 0).is_err());
    }
}
