use ndarray::{concatenate, Array2, ArrayView2, Axis};

use super::layer::{branch_specs, predictor_specs};
use super::network::Network;
use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, tag};

/// Widths of the four sub-networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Shared embedding width of both branches.
    pub embed_dim: usize,
    /// Hidden widths of each branch before the final linear projection.
    pub branch_hidden: Vec<usize>,
    /// Hidden widths of the similarity predictor (three affine layers with two entries).
    pub sim_hidden: Vec<usize>,
    pub va_hidden: Vec<usize>,
    /// Dropout after each hidden block of both predictors.
    pub dropout: f64,
    /// Use a separate VA predictor per modality instead of one shared one.
    pub per_modality_va: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            branch_hidden: vec![512, 512],
            sim_hidden: vec![512, 128],
            va_hidden: vec![256, 64],
            dropout: 0.5,
            per_modality_va: false,
        }
    }
}

/// All trainable state: both branches, the similarity predictor over the
/// concatenated embeddings, and the VA predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub image_branch: Network<T>,
    pub music_branch: Network<T>,
    pub similarity_predictor: Network<T>,
    pub va_predictor: Network<T>,
    /// Present only in the per-modality VA variant; then `va_predictor`
    /// serves images.
    pub music_va_predictor: Option<Network<T>>,
}

pub const NETWORK_NAMES: [&str; 5] = [
    "image_branch",
    "music_branch",
    "similarity_predictor",
    "va_predictor",
    "music_va_predictor",
];

impl<T: Scalar> ModelParams<T> {
    pub fn new(image_dim: usize, music_dim: usize, arch: &ArchConfig, seed: u64) -> Result<Self> {
        if arch.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        let init = |name: &str| derive_seed(seed, &[tag("init"), tag(name)]);
        let va_specs = predictor_specs(arch.embed_dim, &arch.va_hidden, 2, arch.dropout);
        Self::from_networks(
            Network::new(&branch_specs(image_dim, &arch.branch_hidden, arch.embed_dim), init("image_branch"))?,
            Network::new(&branch_specs(music_dim, &arch.branch_hidden, arch.embed_dim), init("music_branch"))?,
            Network::new(
                &predictor_specs(2 * arch.embed_dim, &arch.sim_hidden, 1, arch.dropout),
                init("similarity_predictor"),
            )?,
            Network::new(&va_specs, init("va_predictor"))?,
            if arch.per_modality_va {
                Some(Network::new(&va_specs, init("music_va_predictor"))?)
            } else {
                None
            },
        )
    }

    /// Assembles a model, checking the embedding widths line up.
    pub fn from_networks(
        image_branch: Network<T>,
        music_branch: Network<T>,
        similarity_predictor: Network<T>,
        va_predictor: Network<T>,
        music_va_predictor: Option<Network<T>>,
    ) -> Result<Self> {
        let embed = image_branch.output_dim();
        let expect = |what: &str, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context: what.to_string(),
                    expected,
                    actual,
                })
            }
        };
        expect("music embedding width", embed, music_branch.output_dim())?;
        expect("similarity predictor input", 2 * embed, similarity_predictor.input_dim())?;
        expect("similarity predictor output", 1, similarity_predictor.output_dim())?;
        expect("VA predictor input", embed, va_predictor.input_dim())?;
        expect("VA predictor output", 2, va_predictor.output_dim())?;
        if let Some(m) = &music_va_predictor {
            expect("music VA predictor input", embed, m.input_dim())?;
            expect("music VA predictor output", 2, m.output_dim())?;
        }
        Ok(Self {
            image_branch,
            music_branch,
            similarity_predictor,
            va_predictor,
            music_va_predictor,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.image_branch.output_dim()
    }

    pub fn image_dim(&self) -> usize {
        self.image_branch.input_dim()
    }

    pub fn music_dim(&self) -> usize {
        self.music_branch.input_dim()
    }

    pub fn branch(&self, modality: Modality) -> &Network<T> {
        match modality {
            Modality::Image => &self.image_branch,
            Modality::Music => &self.music_branch,
        }
    }

    pub fn va_head(&self, modality: Modality) -> &Network<T> {
        match (modality, &self.music_va_predictor) {
            (Modality::Music, Some(m)) => m,
            _ => &self.va_predictor,
        }
    }

    /// Named networks in checkpoint order.
    pub fn networks(&self) -> Vec<(&'static str, &Network<T>)> {
        let mut out = vec![
            (NETWORK_NAMES[0], &self.image_branch),
            (NETWORK_NAMES[1], &self.music_branch),
            (NETWORK_NAMES[2], &self.similarity_predictor),
            (NETWORK_NAMES[3], &self.va_predictor),
        ];
        if let Some(m) = &self.music_va_predictor {
            out.push((NETWORK_NAMES[4], m));
        }
        out
    }

    pub(crate) fn networks_mut(&mut self) -> Vec<(&'static str, &mut Network<T>)> {
        let mut out = vec![
            (NETWORK_NAMES[0], &mut self.image_branch),
            (NETWORK_NAMES[1], &mut self.music_branch),
            (NETWORK_NAMES[2], &mut self.similarity_predictor),
            (NETWORK_NAMES[3], &mut self.va_predictor),
        ];
        if let Some(m) = &mut self.music_va_predictor {
            out.push((NETWORK_NAMES[4], m));
        }
        out
    }

    /// Eval-mode embeddings of feature rows.
    pub fn embed(&self, modality: Modality, features: ArrayView2<T>) -> Result<Array2<T>> {
        self.branch(modality).predict(features)
    }

    /// Eval-mode similarity for row-aligned image/music feature matrices.
    pub fn predict_similarity(&self, images: ArrayView2<T>, music: ArrayView2<T>) -> Result<Vec<T>> {
        let joint = concatenate(
            Axis(1),
            &[self.embed(Modality::Image, images)?.view(), self.embed(Modality::Music, music)?.view()],
        )
        .map_err(|e| Error::DimensionMismatch {
            context: format!("pair concatenation: {e}"),
            expected: images.nrows(),
            actual: music.nrows(),
        })?;
        Ok(self.similarity_predictor.predict(joint.view())?.column(0).to_vec())
    }

    /// Eval-mode `(valence, arousal)` rows.
    pub fn predict_va(&self, modality: Modality, features: ArrayView2<T>) -> Result<Array2<T>> {
        let emb = self.embed(modality, features)?;
        self.va_head(modality).predict(emb.view())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            image_branch: self.image_branch.cast(),
            music_branch: self.music_branch.cast(),
            similarity_predictor: self.similarity_predictor.cast(),
            va_predictor: self.va_predictor.cast(),
            music_va_predictor: self.music_va_predictor.as_ref().map(Network::cast),
        }
    }
}
