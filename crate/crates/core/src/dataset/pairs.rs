use std::cmp::Ordering;

use rand::seq::index::sample;
use rayon::prelude::*;

use super::{Corpus, Item, Modality, PairOrigin, PairPolicy, PairRecord, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for, tag};
use crate::va::SimilarityScale;

fn select_for_clip(
    clip_index: usize,
    clip: &Item,
    images: &[&Item],
    policy: &PairPolicy,
    scale: &SimilarityScale<f64>,
) -> Vec<PairRecord> {
    let sims: Vec<f64> = images
        .iter()
        .map(|img| scale.similarity_between(&img.label, &clip.label))
        .collect();
    let by_id = |a: usize, b: usize| images[a].id.cmp(&images[b].id);

    let mut desc: Vec<usize> = (0..images.len()).collect();
    desc.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| by_id(a, b))
    });
    let mut taken = vec![false; images.len()];
    let mut chosen: Vec<(usize, PairOrigin)> = Vec::with_capacity(policy.images_per_clip);
    for &i in desc.iter().take(policy.n_top) {
        taken[i] = true;
        chosen.push((i, PairOrigin::Top));
    }

    let mut asc: Vec<usize> = (0..images.len()).collect();
    asc.sort_by(|&a, &b| {
        sims[a]
            .partial_cmp(&sims[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| by_id(a, b))
    });
    let bottom: Vec<usize> = asc.into_iter().filter(|&i| !taken[i]).take(policy.n_bottom).collect();
    for i in bottom {
        taken[i] = true;
        chosen.push((i, PairOrigin::Bottom));
    }

    let remaining: Vec<usize> = (0..images.len()).filter(|&i| !taken[i]).collect();
    let mut rng = rng_for(policy.seed, &[tag("clip"), clip_index as u64]);
    let mut picks: Vec<usize> = sample(&mut rng, remaining.len(), policy.n_random).into_vec();
    picks.sort_unstable();
    chosen.extend(picks.into_iter().map(|p| (remaining[p], PairOrigin::Random)));

    chosen
        .into_iter()
        .map(|(i, origin)| PairRecord {
            image_id: images[i].id.clone(),
            music_id: clip.id.clone(),
            similarity: sims[i],
            origin,
        })
        .collect()
}

/// Builds matched pairs for every clip in `music` against the `images`
/// pool, then keeps a seeded uniform `sample_rate` fraction of them.
///
/// Per clip: the `n_top` most similar and `n_bottom` least similar images
/// (ties by ascending image id), plus `n_random` distinct images drawn from
/// the rest. The output keeps clip order, then top, bottom, random.
pub fn generate_pairs(
    images: &[&Item],
    music: &[&Item],
    policy: &PairPolicy,
    scale: &SimilarityScale<f64>,
) -> Result<Vec<PairRecord>> {
    policy.validate()?;
    if images.len() < policy.images_per_clip {
        return Err(Error::InsufficientPool {
            needed: policy.images_per_clip,
            available: images.len(),
        });
    }
    let per_clip: Vec<Vec<PairRecord>> = music
        .par_iter()
        .enumerate()
        .map(|(c, clip)| select_for_clip(c, clip, images, policy, scale))
        .collect();
    let all: Vec<PairRecord> = per_clip.into_iter().flatten().collect();

    if policy.sample_rate >= 1.0 {
        return Ok(all);
    }
    let keep = ((all.len() as f64) * policy.sample_rate).round() as usize;
    let mut rng = rng_for(policy.seed, &[tag("subsample")]);
    let mut kept = sample(&mut rng, all.len(), keep).into_vec();
    kept.sort_unstable();
    let mut slots: Vec<Option<PairRecord>> = all.into_iter().map(Some).collect();
    Ok(kept.into_iter().filter_map(|i| slots[i].take()).collect())
}

/// Pairs of each split, generated within that split's own pools with the
/// manifest's scale. Each split draws from its own seed stream.
pub fn generate_split_pairs(
    corpus: &Corpus,
    manifest: &SplitManifest,
    policy: &PairPolicy,
) -> Result<[Vec<PairRecord>; 3]> {
    let mut out: [Vec<PairRecord>; 3] = Default::default();
    for (slot, split) in out.iter_mut().zip(Split::ALL) {
        let gather = |m| -> Result<Vec<&Item>> {
            manifest.ids(split, m).iter().map(|id| corpus.require(m, id)).collect()
        };
        let split_policy = PairPolicy {
            seed: derive_seed(policy.seed, &[tag(split.as_str())]),
            ..policy.clone()
        };
        *slot = generate_pairs(
            &gather(Modality::Image)?,
            &gather(Modality::Music)?,
            &split_policy,
            &manifest.scale,
        )?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Modality;
    use crate::va::{SigmaProvenance, VaPoint};

    fn item(id: &str, modality: Modality, v: f64, a: f64) -> Item {
        Item {
            id: id.into(),
            modality,
            label: VaPoint::new(v, a).unwrap(),
            features: vec![0.0],
        }
    }

    fn fixture() -> (Vec<Item>, Vec<Item>, SimilarityScale<f64>) {
        let imgs = (0..8)
            .map(|i| item(&format!("i{i}"), Modality::Image, (i as f64) / 7.0, ((i * 3) % 8) as f64 / 7.0))
            .collect();
        let mus = vec![
            item("m0", Modality::Music, 0.1, 0.9),
            item("m1", Modality::Music, 0.5, 0.5),
            item("m2", Modality::Music, 0.95, 0.05),
        ];
        (imgs, mus, SimilarityScale::new(0.5, SigmaProvenance::Exact).unwrap())
    }

    #[test]
    fn small_policy_matches_brute_force() {
        let (imgs, mus, scale) = fixture();
        let ir: Vec<&Item> = imgs.iter().collect();
        let mr: Vec<&Item> = mus.iter().collect();
        let policy = PairPolicy {
            images_per_clip: 4,
            n_random: 2,
            n_top: 1,
            n_bottom: 1,
            sample_rate: 1.0,
            seed: 3,
        };
        let pairs = generate_pairs(&ir, &mr, &policy, &scale).unwrap();
        assert_eq!(pairs.len(), 12);
        for clip in &mus {
            let mut scored: Vec<(f64, &str)> = imgs
                .iter()
                .map(|i| {
                    let d = ((i.label.valence() - clip.label.valence()).powi(2)
                        + (i.label.arousal() - clip.label.arousal()).powi(2))
                    .sqrt();
                    ((-d / 0.5).exp(), i.id.as_str())
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            let mine: Vec<&PairRecord> = pairs.iter().filter(|p| p.music_id == clip.id).collect();
            assert_eq!(mine.len(), 4);
            let top = mine.iter().find(|p| p.origin == PairOrigin::Top).unwrap();
            let bottom = mine.iter().find(|p| p.origin == PairOrigin::Bottom).unwrap();
            assert_eq!(top.image_id, scored[0].1);
            assert_eq!(bottom.image_id, scored[7].1);
            let mut ids: Vec<&str> = mine.iter().map(|p| p.image_id.as_str()).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 4, "images per clip must be distinct");
        }
    }

    #[test]
    fn degenerate_policy_picks_global_best() {
        let (imgs, mus, scale) = fixture();
        let ir: Vec<&Item> = imgs.iter().collect();
        let mr: Vec<&Item> = mus.iter().collect();
        let policy = PairPolicy {
            images_per_clip: 1,
            n_random: 0,
            n_top: 1,
            n_bottom: 0,
            sample_rate: 1.0,
            seed: 0,
        };
        let pairs = generate_pairs(&ir, &mr, &policy, &scale).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            let clip = mus.iter().find(|m| m.id == p.music_id).unwrap();
            let best = imgs
                .iter()
                .map(|i| scale.similarity_between(&i.label, &clip.label))
                .fold(f64::MIN, f64::max);
            assert_eq!(p.similarity, best);
        }
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let imgs: Vec<Item> = ["b", "a", "c"].iter().map(|id| item(id, Modality::Image, 0.5, 0.5)).collect();
        let mus = [item("m", Modality::Music, 0.5, 0.5)];
        let policy = PairPolicy {
            images_per_clip: 2,
            n_random: 0,
            n_top: 1,
            n_bottom: 1,
            sample_rate: 1.0,
            seed: 0,
        };
        let scale = SimilarityScale::new(1.0, SigmaProvenance::Exact).unwrap();
        let pairs = generate_pairs(&imgs.iter().collect::<Vec<_>>(), &[&mus[0]], &policy, &scale).unwrap();
        assert_eq!(pairs[0].image_id, "a");
        assert_eq!(pairs[1].image_id, "b");
    }

    #[test]
    fn insufficient_pool_is_an_error() {
        let (imgs, mus, scale) = fixture();
        let err = generate_pairs(
            &imgs.iter().collect::<Vec<_>>(),
            &mus.iter().collect::<Vec<_>>(),
            &PairPolicy::default(),
            &scale,
        );
        assert!(matches!(err, Err(Error::InsufficientPool { needed: 50, available: 8 })));
    }

    #[test]
    fn subsampling_keeps_rounded_fraction() {
        let (imgs, mus, scale) = fixture();
        let policy = PairPolicy {
            images_per_clip: 8,
            n_random: 4,
            n_top: 2,
            n_bottom: 2,
            sample_rate: 0.5,
            seed: 9,
        };
        let ir: Vec<&Item> = imgs.iter().collect();
        let mr: Vec<&Item> = mus.iter().collect();
        let a = generate_pairs(&ir, &mr, &policy, &scale).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, generate_pairs(&ir, &mr, &policy, &scale).unwrap());
    }
}
