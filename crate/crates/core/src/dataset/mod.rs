//! Corpus ingestion, the split protocol, pair generation and the on-disk
//! text formats.

mod io;
mod pairs;
mod split;
mod synth;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

pub use io::{
    load_corpus, read_pairs, read_split_manifest, render_corpus, render_pairs, render_split_manifest,
    write_corpus, write_pairs, write_split_manifest, LoadOptions, PairFile,
};
pub use pairs::{generate_pairs, generate_split_pairs};
pub use split::{split_corpus, SplitManifest, SplitRatios};
pub use synth::gen_synthetic;

use crate::error::{Error, Result};
use crate::va::VaPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Music,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Music => "music",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "image" => Ok(Modality::Image),
            "music" => Ok(Modality::Music),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// One image or music clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub modality: Modality,
    pub label: VaPoint<f64>,
    pub features: Vec<f64>,
}

/// Both modality pools with their declared feature widths.
#[derive(Debug, Clone)]
pub struct Corpus {
    images: Vec<Item>,
    music: Vec<Item>,
    image_dim: usize,
    music_dim: usize,
    source: String,
    image_index: HashMap<String, usize>,
    music_index: HashMap<String, usize>,
}

fn index_items(
    items: &[Item],
    modality: Modality,
    dim: usize,
) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        if item.modality != modality {
            return Err(Error::Config(format!(
                "item `{}` is tagged {} but stored with {} items",
                item.id, item.modality, modality
            )));
        }
        if item.features.len() != dim {
            return Err(Error::DimensionMismatch {
                context: format!("features of {} `{}`", modality, item.id),
                expected: dim,
                actual: item.features.len(),
            });
        }
        if let Some(pos) = item.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature {pos} of {} `{}`",
                modality, item.id
            )));
        }
        if index.insert(item.id.clone(), i).is_some() {
            return Err(Error::DuplicateId {
                modality: modality.as_str(),
                id: item.id.clone(),
            });
        }
    }
    Ok(index)
}

impl Corpus {
    pub fn new(
        images: Vec<Item>,
        music: Vec<Item>,
        image_dim: usize,
        music_dim: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        if image_dim == 0 || music_dim == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        let image_index = index_items(&images, Modality::Image, image_dim)?;
        let music_index = index_items(&music, Modality::Music, music_dim)?;
        Ok(Self {
            images,
            music,
            image_dim,
            music_dim,
            source: source.into(),
            image_index,
            music_index,
        })
    }

    pub fn images(&self) -> &[Item] {
        &self.images
    }

    pub fn music(&self) -> &[Item] {
        &self.music
    }

    pub fn items(&self, modality: Modality) -> &[Item] {
        match modality {
            Modality::Image => &self.images,
            Modality::Music => &self.music,
        }
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    pub fn music_dim(&self) -> usize {
        self.music_dim
    }

    pub fn dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.image_dim,
            Modality::Music => self.music_dim,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn get(&self, modality: Modality, id: &str) -> Option<&Item> {
        let (index, items) = match modality {
            Modality::Image => (&self.image_index, &self.images),
            Modality::Music => (&self.music_index, &self.music),
        };
        index.get(id).map(|&i| &items[i])
    }

    pub(crate) fn require(&self, modality: Modality, id: &str) -> Result<&Item> {
        self.get(modality, id).ok_or_else(|| Error::DanglingReference {
            modality: modality.as_str(),
            id: id.to_string(),
        })
    }
}

/// How a pair entered the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairOrigin {
    Random,
    Top,
    Bottom,
}

impl PairOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            PairOrigin::Random => "random",
            PairOrigin::Top => "top",
            PairOrigin::Bottom => "bottom",
        }
    }
}

impl FromStr for PairOrigin {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(PairOrigin::Random),
            "top" => Ok(PairOrigin::Top),
            "bottom" => Ok(PairOrigin::Bottom),
            other => Err(format!("unknown pair origin `{other}`")),
        }
    }
}

/// A matched (image, music) pair with its ground-truth similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub image_id: String,
    pub music_id: String,
    pub similarity: f64,
    pub origin: PairOrigin,
}

/// Per-clip candidate selection policy.
///
/// Defaults: 50 images per clip, 30 random, 10 most similar, 10 least
/// similar, then 10% of all generated pairs retained.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPolicy {
    pub images_per_clip: usize,
    pub n_random: usize,
    pub n_top: usize,
    pub n_bottom: usize,
    pub sample_rate: f64,
    pub seed: u64,
}

impl Default for PairPolicy {
    fn default() -> Self {
        Self {
            images_per_clip: 50,
            n_random: 30,
            n_top: 10,
            n_bottom: 10,
            sample_rate: 0.1,
            seed: 0,
        }
    }
}

impl PairPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.images_per_clip == 0 {
            return Err(Error::InvalidPolicy("images_per_clip must be positive".into()));
        }
        if self.n_random + self.n_top + self.n_bottom != self.images_per_clip {
            return Err(Error::InvalidPolicy(format!(
                "n_random + n_top + n_bottom = {} but images_per_clip = {}",
                self.n_random + self.n_top + self.n_bottom,
                self.images_per_clip
            )));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::InvalidPolicy(format!(
                "sample_rate {} outside (0, 1]",
                self.sample_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn position(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// The items and pairs of one split, with read instrumentation.
///
/// Every label or feature lookup through [`SplitSet::image`] /
/// [`SplitSet::music`] bumps a counter, which lets tests prove that the
/// trainer only touches held-out data inside its evaluation pass.
#[derive(Debug)]
pub struct SplitSet {
    split: Split,
    images: Vec<Item>,
    music: Vec<Item>,
    pairs: Vec<PairRecord>,
    image_index: HashMap<String, usize>,
    music_index: HashMap<String, usize>,
    image_dim: usize,
    music_dim: usize,
    reads: AtomicUsize,
}

impl SplitSet {
    /// Builds a split view, checking every pair references an item of
    /// this split.
    pub fn new(
        split: Split,
        images: Vec<Item>,
        music: Vec<Item>,
        pairs: Vec<PairRecord>,
        image_dim: usize,
        music_dim: usize,
    ) -> Result<Self> {
        let image_index = index_items(&images, Modality::Image, image_dim)?;
        let music_index = index_items(&music, Modality::Music, music_dim)?;
        for p in &pairs {
            if !image_index.contains_key(&p.image_id) {
                return Err(Error::DanglingReference {
                    modality: "image",
                    id: p.image_id.clone(),
                });
            }
            if !music_index.contains_key(&p.music_id) {
                return Err(Error::DanglingReference {
                    modality: "music",
                    id: p.music_id.clone(),
                });
            }
        }
        Ok(Self {
            split,
            images,
            music,
            pairs,
            image_index,
            music_index,
            image_dim,
            music_dim,
            reads: AtomicUsize::new(0),
        })
    }

    /// Gathers one split's items from `corpus` according to `manifest`.
    pub fn from_manifest(
        corpus: &Corpus,
        manifest: &SplitManifest,
        split: Split,
        pairs: Vec<PairRecord>,
    ) -> Result<Self> {
        let gather = |modality| -> Result<Vec<Item>> {
            manifest
                .ids(split, modality)
                .iter()
                .map(|id| corpus.require(modality, id).cloned())
                .collect()
        };
        Self::new(
            split,
            gather(Modality::Image)?,
            gather(Modality::Music)?,
            pairs,
            corpus.image_dim(),
            corpus.music_dim(),
        )
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.pairs
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    pub fn music_dim(&self) -> usize {
        self.music_dim
    }

    pub fn len(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.images.len(),
            Modality::Music => self.music.len(),
        }
    }

    pub fn ids(&self, modality: Modality) -> impl Iterator<Item = &str> {
        let items = match modality {
            Modality::Image => &self.images,
            Modality::Music => &self.music,
        };
        items.iter().map(|i| i.id.as_str())
    }

    /// Instrumented access to every item of one modality.
    pub fn items(&self, modality: Modality) -> &[Item] {
        let items = match modality {
            Modality::Image => &self.images,
            Modality::Music => &self.music,
        };
        self.reads.fetch_add(items.len(), Ordering::Relaxed);
        items
    }

    pub fn image(&self, id: &str) -> Result<&Item> {
        self.lookup(Modality::Image, id)
    }

    pub fn music(&self, id: &str) -> Result<&Item> {
        self.lookup(Modality::Music, id)
    }

    pub fn lookup(&self, modality: Modality, id: &str) -> Result<&Item> {
        let (index, items) = match modality {
            Modality::Image => (&self.image_index, &self.images),
            Modality::Music => (&self.music_index, &self.music),
        };
        let item = index
            .get(id)
            .map(|&i| &items[i])
            .ok_or_else(|| Error::DanglingReference {
                modality: modality.as_str(),
                id: id.to_string(),
            })?;
        self.reads.fetch_add(1, Ordering::Relaxed);
        Ok(item)
    }

    /// Number of item reads served so far.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

/// The three split views of a corpus with their pair lists.
pub fn split_sets(corpus: &Corpus, manifest: &SplitManifest, pairs: [Vec<PairRecord>; 3]) -> Result<[SplitSet; 3]> {
    let [train, val, test] = pairs;
    Ok([
        SplitSet::from_manifest(corpus, manifest, Split::Train, train)?,
        SplitSet::from_manifest(corpus, manifest, Split::Validation, val)?,
        SplitSet::from_manifest(corpus, manifest, Split::Test, test)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, modality: Modality, dim: usize) -> Item {
        Item {
            id: id.into(),
            modality,
            label: VaPoint::new(0.5, 0.5).unwrap(),
            features: vec![0.0; dim],
        }
    }

    #[test]
    fn corpus_rejects_duplicates_and_bad_dims() {
        let dup = Corpus::new(
            vec![item("a", Modality::Image, 2), item("a", Modality::Image, 2)],
            vec![item("m", Modality::Music, 3)],
            2,
            3,
            "t",
        );
        assert!(matches!(dup, Err(Error::DuplicateId { .. })));
        let short = Corpus::new(vec![item("a", Modality::Image, 1)], vec![], 2, 3, "t");
        assert!(matches!(short, Err(Error::DimensionMismatch { .. })));
        let mut bad = item("a", Modality::Image, 2);
        bad.features[1] = f64::INFINITY;
        assert!(matches!(Corpus::new(vec![bad], vec![], 2, 3, "t"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn policy_validation() {
        assert!(PairPolicy::default().validate().is_ok());
        let bad = PairPolicy { n_random: 29, ..PairPolicy::default() };
        assert!(bad.validate().is_err());
        let bad_rate = PairPolicy { sample_rate: 0.0, ..PairPolicy::default() };
        assert!(bad_rate.validate().is_err());
    }

    #[test]
    fn split_set_counts_reads_and_rejects_dangling_pairs() {
        let pair = PairRecord {
            image_id: "a".into(),
            music_id: "zz".into(),
            similarity: 0.5,
            origin: PairOrigin::Top,
        };
        let err = SplitSet::new(
            Split::Train,
            vec![item("a", Modality::Image, 1)],
            vec![item("m", Modality::Music, 1)],
            vec![pair],
            1,
            1,
        );
        assert!(matches!(err, Err(Error::DanglingReference { modality: "music", .. })));

        let set = SplitSet::new(
            Split::Test,
            vec![item("a", Modality::Image, 1)],
            vec![item("m", Modality::Music, 1)],
            vec![],
            1,
            1,
        )
        .unwrap();
        assert_eq!(set.reads(), 0);
        set.image("a").unwrap();
        set.items(Modality::Music);
        assert_eq!(set.reads(), 2);
    }
}
