use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::{Corpus, Modality, Split};
use crate::error::{Error, Result};
use crate::seed::{rng_for, tag};
use crate::va::{compute_sigma, SigmaProvenance, SimilarityScale, VaPoint};

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.80,
            validation: 0.05,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = Self {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train", self.train),
            ("val", self.validation),
            ("test", self.test),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InfeasibleSplit(format!(
                    "{name} ratio {v} must lie in (0, 1)"
                )));
            }
        }
        let sum = self.train + self.validation + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InfeasibleSplit(format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Split sizes for `n` items: validation and test take
    /// `floor(n * ratio)`, training takes the remainder.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        // the 1e-9 nudge keeps products such as 0.15 * 3843 from flooring a
        // representation error away
        let take = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let val = take(self.validation);
        let test = take(self.test);
        [n.saturating_sub(val + test), val, test]
    }
}

/// Per-split id lists for both modalities plus the similarity scale
/// computed on the training pools.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub ratios: SplitRatios,
    pub image_ids: [Vec<String>; 3],
    pub music_ids: [Vec<String>; 3],
    pub scale: SimilarityScale<f64>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn ids(&self, split: Split, modality: Modality) -> &[String] {
        match modality {
            Modality::Image => &self.image_ids[split.position()],
            Modality::Music => &self.music_ids[split.position()],
        }
    }

    /// Checks that the three splits are pairwise disjoint and together
    /// cover exactly the corpus, in both modalities.
    pub fn validate_against(&self, corpus: &Corpus) -> Result<()> {
        for modality in [Modality::Image, Modality::Music] {
            let mut seen: HashMap<&str, Split> = HashMap::new();
            for split in Split::ALL {
                for id in self.ids(split, modality) {
                    corpus.require(modality, id)?;
                    if let Some(first) = seen.insert(id.as_str(), split) {
                        return Err(Error::SplitOverlap {
                            modality: modality.as_str(),
                            id: id.clone(),
                            first: first.as_str(),
                            second: split.as_str(),
                        });
                    }
                }
            }
            if let Some(missing) = corpus.items(modality).iter().find(|i| !seen.contains_key(i.id.as_str())) {
                return Err(Error::InfeasibleSplit(format!(
                    "{} `{}` is not assigned to any split",
                    modality, missing.id
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self, corpus: &Corpus, split: Split, modality: Modality) -> Result<Vec<VaPoint<f64>>> {
        self.ids(split, modality)
            .iter()
            .map(|id| corpus.require(modality, id).map(|i| i.label))
            .collect()
    }
}

fn partition(corpus: &Corpus, modality: Modality, ratios: &SplitRatios, seed: u64) -> Result<[Vec<String>; 3]> {
    let items = corpus.items(modality);
    if items.is_empty() {
        return Err(Error::EmptyCorpus(format!("no {modality} items to split")));
    }
    let counts = ratios.counts(items.len());
    if let Some(pos) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InfeasibleSplit(format!(
            "{} {modality} items leave the {} split empty",
            items.len(),
            Split::ALL[pos]
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng_for(seed, &[tag("split"), tag(modality.as_str())]));
    let mut out: [Vec<String>; 3] = Default::default();
    let mut it = order.into_iter();
    for (slot, &count) in out.iter_mut().zip(counts.iter()) {
        slot.extend(it.by_ref().take(count).map(|i| items[i].id.clone()));
    }
    Ok(out)
}

/// Seeded shuffle then contiguous partition of each modality, followed by
/// the similarity scale over the training pools.
pub fn split_corpus(
    corpus: &Corpus,
    ratios: SplitRatios,
    seed: u64,
    sigma_mode: SigmaProvenance,
) -> Result<SplitManifest> {
    ratios.validate()?;
    let image_ids = partition(corpus, Modality::Image, &ratios, seed)?;
    let music_ids = partition(corpus, Modality::Music, &ratios, seed)?;
    let labels = |ids: &[String], m| -> Result<Vec<VaPoint<f64>>> {
        ids.iter().map(|id| corpus.require(m, id).map(|i| i.label)).collect()
    };
    let scale = compute_sigma(
        &labels(&image_ids[0], Modality::Image)?,
        &labels(&music_ids[0], Modality::Music)?,
        sigma_mode,
    )?;
    Ok(SplitManifest {
        ratios,
        image_ids,
        music_ids,
        scale,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_synthetic;

    #[test]
    fn small_split_sizes() {
        let r = SplitRatios::new(0.8, 0.1, 0.1).unwrap();
        assert_eq!(r.counts(10), [8, 1, 1]);
    }

    #[test]
    fn full_scale_sizes() {
        let r = SplitRatios::default();
        assert_eq!(r.counts(25_620), [20_496, 1_281, 3_843]);
        // floor rule applied per clip, not per song
        assert_eq!(r.counts(35_817), [28_655, 1_790, 5_372]);
    }

    #[test]
    fn degenerate_ratios_are_rejected() {
        assert!(matches!(SplitRatios::new(1.0, 0.0, 0.0), Err(Error::InfeasibleSplit(_))));
        assert!(SplitRatios::new(0.5, 0.2, 0.2).is_err());
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let corpus = gen_synthetic(40, 20, 3, 3, 0.1, 5).unwrap();
        let a = split_corpus(&corpus, SplitRatios::default(), 7, SigmaProvenance::Exact).unwrap();
        let b = split_corpus(&corpus, SplitRatios::default(), 7, SigmaProvenance::Exact).unwrap();
        assert_eq!(a, b);
        a.validate_against(&corpus).unwrap();
        assert_eq!(a.image_ids.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 2, 6]);
        let c = split_corpus(&corpus, SplitRatios::default(), 8, SigmaProvenance::Exact).unwrap();
        assert_ne!(a.image_ids, c.image_ids);
    }

    #[test]
    fn too_small_corpus_is_infeasible() {
        let corpus = gen_synthetic(5, 40, 2, 2, 0.0, 1).unwrap();
        let err = split_corpus(&corpus, SplitRatios::default(), 1, SigmaProvenance::Exact);
        assert!(matches!(err, Err(Error::InfeasibleSplit(_))));
    }

    #[test]
    fn overlap_is_detected() {
        let corpus = gen_synthetic(40, 20, 2, 2, 0.0, 1).unwrap();
        let mut m = split_corpus(&corpus, SplitRatios::default(), 1, SigmaProvenance::Exact).unwrap();
        let stolen = m.image_ids[0][0].clone();
        m.image_ids[2].push(stolen);
        assert!(matches!(m.validate_against(&corpus), Err(Error::SplitOverlap { .. })));
    }
}
