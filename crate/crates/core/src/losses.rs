//! The seven objective terms with their analytic gradients.
//!
//! Ratio and margin terms are summed over anchors; the two regression
//! terms are batch means. Every distance entering a ratio or logarithm is
//! guarded by `epsilon`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::va::{SimilarityScale, VaPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossTerm {
    /// Cross-modal feature-ratio.
    Cfr,
    /// Cross-modal feature-margin.
    Cfm,
    /// Similarity regression.
    Sim,
    SfrImage,
    SfrMusic,
    ImageVa,
    MusicVa,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Cfr,
        LossTerm::Cfm,
        LossTerm::Sim,
        LossTerm::SfrImage,
        LossTerm::SfrMusic,
        LossTerm::ImageVa,
        LossTerm::MusicVa,
    ];

    /// Terms that need per-item VA labels rather than pair similarities.
    pub const VA_FAMILY: [LossTerm; 4] = [
        LossTerm::SfrImage,
        LossTerm::SfrMusic,
        LossTerm::ImageVa,
        LossTerm::MusicVa,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossTerm::Cfr => "cfr",
            LossTerm::Cfm => "cfm",
            LossTerm::Sim => "sim",
            LossTerm::SfrImage => "sfr_i",
            LossTerm::SfrMusic => "sfr_m",
            LossTerm::ImageVa => "iva",
            LossTerm::MusicVa => "mva",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss term `{s}`")))
    }
}

/// The tensor a gradient buffer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GradTarget {
    ImageEmbedding,
    MusicEmbedding,
    SimPrediction,
    ImageVaPrediction,
    MusicVaPrediction,
}

impl GradTarget {
    pub fn embedding(modality: Modality) -> Self {
        match modality {
            Modality::Image => GradTarget::ImageEmbedding,
            Modality::Music => GradTarget::MusicEmbedding,
        }
    }

    pub fn va_prediction(modality: Modality) -> Self {
        match modality {
            Modality::Image => GradTarget::ImageVaPrediction,
            Modality::Music => GradTarget::MusicVaPrediction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Margin of the feature-margin term.
    pub alpha: f64,
    /// Guard added inside every distance before a ratio or logarithm.
    pub epsilon: f64,
    /// Per-term weights, indexed by [`LossTerm::index`].
    pub weights: [f64; 7],
    pub enabled: [bool; 7],
    /// Divide summed terms by their anchor count. Off by default.
    pub normalize_batch: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 1e-8,
            weights: [1.0; 7],
            enabled: [true; 7],
            normalize_batch: false,
        }
    }
}

impl LossConfig {
    pub fn with_terms(terms: &[LossTerm]) -> Self {
        let mut cfg = Self {
            enabled: [false; 7],
            ..Self::default()
        };
        for t in terms {
            cfg.enabled[t.index()] = true;
        }
        cfg
    }

    pub fn is_enabled(&self, term: LossTerm) -> bool {
        self.enabled[term.index()]
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        self.weights[term.index()]
    }

    pub fn enabled_terms(&self) -> Vec<LossTerm> {
        LossTerm::ALL.into_iter().filter(|t| self.is_enabled(*t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if let Some(t) = LossTerm::ALL.into_iter().find(|t| !(self.weight(*t) >= 0.0) || !self.weight(*t).is_finite()) {
            return Err(Error::Config(format!("weight of `{t}` must be finite and >= 0")));
        }
        if !self.enabled.iter().any(|&e| e) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(())
    }
}

/// Term values, their weighted total, and gradient buffers keyed by the
/// tensor they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T> {
    pub terms: BTreeMap<LossTerm, T>,
    pub total: T,
    pub grads: BTreeMap<GradTarget, Array2<T>>,
}

impl<T: Scalar> LossReport<T> {
    fn single(term: LossTerm, value: T, grads: impl IntoIterator<Item = (GradTarget, Array2<T>)>) -> Self {
        Self {
            terms: BTreeMap::from([(term, value)]),
            total: value,
            grads: grads.into_iter().collect(),
        }
    }

    /// A zero-valued report for a term that had nothing to score.
    pub fn zero(term: LossTerm) -> Self {
        Self::single(term, T::zero(), [])
    }

    pub fn value(&self, term: LossTerm) -> Option<T> {
        self.terms.get(&term).copied()
    }

    pub fn grad(&self, target: GradTarget) -> Option<&Array2<T>> {
        self.grads.get(&target)
    }
}

/// Row-aligned inputs of the cross-modal ratio term: row `i` of both
/// embedding matrices is the matched pair `(image_i, music_i)`.
#[derive(Debug, Clone, Copy)]
pub struct CrossBatch<'a, T> {
    pub image_emb: ArrayView2<'a, T>,
    pub music_emb: ArrayView2<'a, T>,
    /// Ground-truth similarity of each matched pair.
    pub pair_sim: &'a [T],
    pub image_labels: &'a [VaPoint<T>],
    pub music_labels: &'a [VaPoint<T>],
    pub scale: &'a SimilarityScale<T>,
}

/// Anchor with two same-modality neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SfrTriple {
    pub anchor: usize,
    pub near: usize,
    pub far: usize,
}

fn ensure_finite<T: Scalar>(what: &str, a: &ArrayView2<T>) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

fn sq_dist<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Adds `coef * 2 (a - b)` to row `ia` of `ga` and its negation to row `ib` of `gb`.
fn push_sq_dist_grad<T: Scalar>(
    ga: &mut Array2<T>,
    ia: usize,
    a: ArrayView1<T>,
    gb: &mut Array2<T>,
    ib: usize,
    b: ArrayView1<T>,
    coef: T,
) {
    let two = T::of(2.0);
    for k in 0..a.len() {
        let d = two * coef * (a[k] - b[k]);
        ga[[ia, k]] += d;
        gb[[ib, k]] -= d;
    }
}

fn batch_scale<T: Scalar>(cfg: &LossConfig, anchors: usize) -> T {
    if cfg.normalize_batch && anchors > 0 {
        T::one() / T::of(anchors as f64)
    } else {
        T::one()
    }
}

/// Cross-modal feature-ratio term, anchored on each image and on each
/// music clip against an in-batch negative of the other modality.
///
/// `image_negatives[i]` is the music row contrasted with image anchor `i`;
/// `music_negatives[i]` the image row contrasted with music anchor `i`.
pub fn cfr_loss<T: Scalar>(
    batch: &CrossBatch<'_, T>,
    image_negatives: &[usize],
    music_negatives: &[usize],
    cfg: &LossConfig,
) -> Result<LossReport<T>> {
    let b = batch.image_emb.nrows();
    if b < 2 {
        return Err(Error::InvalidIndex(format!("cross-modal ratio needs >= 2 rows, got {b}")));
    }
    if batch.music_emb.dim() != batch.image_emb.dim() {
        return Err(Error::ShapeMismatch {
            tensor: "music embedding".into(),
            expected: batch.image_emb.shape().to_vec(),
            actual: batch.music_emb.shape().to_vec(),
        });
    }
    for (what, len) in [
        ("pair similarities", batch.pair_sim.len()),
        ("image labels", batch.image_labels.len()),
        ("music labels", batch.music_labels.len()),
        ("image negatives", image_negatives.len()),
        ("music negatives", music_negatives.len()),
    ] {
        if len != b {
            return Err(Error::DimensionMismatch {
                context: what.to_string(),
                expected: b,
                actual: len,
            });
        }
    }
    for (what, negs) in [("image", image_negatives), ("music", music_negatives)] {
        if let Some((i, &j)) = negs.iter().enumerate().find(|&(i, &j)| j == i || j >= b) {
            return Err(Error::InvalidIndex(format!("{what} anchor {i} has negative {j} (batch {b})")));
        }
    }
    if let Some(s) = batch.pair_sim.iter().find(|s| !(**s > T::zero() && **s <= T::one())) {
        return Err(Error::OutOfRange {
            value: s.to_f64_lossy(),
            min: 0.0,
            max: 1.0,
        });
    }
    ensure_finite("image embedding", &batch.image_emb)?;
    ensure_finite("music embedding", &batch.music_emb)?;

    let eps = T::of(cfg.epsilon);
    let two = T::of(2.0);
    let mut gi = Array2::zeros(batch.image_emb.raw_dim());
    let mut gm = Array2::zeros(batch.music_emb.raw_dim());
    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        let fi = batch.image_emb.row(i);
        let fm = batch.music_emb.row(i);
        let d_pos = sq_dist(fi, fm) + eps;
        let log_s_pos = batch.pair_sim[i].ln();

        // image anchor, music negative
        let j = image_negatives[i];
        let fmj = batch.music_emb.row(j);
        let d_neg = sq_dist(fi, fmj) + eps;
        let s_neg = batch.scale.similarity_between(&batch.image_labels[i], &batch.music_labels[j]);
        let r = (d_pos.ln() - d_neg.ln()) - (log_s_pos - s_neg.ln());
        terms.push(r * r);
        push_sq_dist_grad(&mut gi, i, fi, &mut gm, i, fm, two * r / d_pos);
        push_sq_dist_grad(&mut gi, i, fi, &mut gm, j, fmj, -two * r / d_neg);

        // music anchor, image negative
        let j = music_negatives[i];
        let fij = batch.image_emb.row(j);
        let d_neg = sq_dist(fm, fij) + eps;
        let s_neg = batch.scale.similarity_between(&batch.music_labels[i], &batch.image_labels[j]);
        let r = (d_pos.ln() - d_neg.ln()) - (log_s_pos - s_neg.ln());
        terms.push(r * r);
        push_sq_dist_grad(&mut gm, i, fm, &mut gi, i, fi, two * r / d_pos);
        push_sq_dist_grad(&mut gm, i, fm, &mut gi, j, fij, -two * r / d_neg);
    }
    let k = batch_scale::<T>(cfg, b);
    let value = terms.into_iter().sum::<T>() * k;
    Ok(LossReport::single(
        LossTerm::Cfr,
        value,
        [(GradTarget::ImageEmbedding, gi * k), (GradTarget::MusicEmbedding, gm * k)],
    ))
}

/// Hinge on matched-pair embedding distance beyond `alpha`.
pub fn cfm_loss<T: Scalar>(image_emb: ArrayView2<T>, music_emb: ArrayView2<T>, cfg: &LossConfig) -> Result<LossReport<T>> {
    if image_emb.dim() != music_emb.dim() {
        return Err(Error::ShapeMismatch {
            tensor: "music embedding".into(),
            expected: image_emb.shape().to_vec(),
            actual: music_emb.shape().to_vec(),
        });
    }
    ensure_finite("image embedding", &image_emb)?;
    ensure_finite("music embedding", &music_emb)?;
    let alpha = T::of(cfg.alpha);
    let mut gi = Array2::zeros(image_emb.raw_dim());
    let mut gm = Array2::zeros(music_emb.raw_dim());
    let mut value = T::zero();
    for i in 0..image_emb.nrows() {
        let (a, b) = (image_emb.row(i), music_emb.row(i));
        let norm = sq_dist(a, b).sqrt();
        // subgradient 0 at the hinge point
        if norm > alpha {
            value += norm - alpha;
            for k in 0..a.len() {
                let d = (a[k] - b[k]) / norm;
                gi[[i, k]] = d;
                gm[[i, k]] = -d;
            }
        }
    }
    let k = batch_scale::<T>(cfg, image_emb.nrows());
    Ok(LossReport::single(
        LossTerm::Cfm,
        value * k,
        [(GradTarget::ImageEmbedding, gi * k), (GradTarget::MusicEmbedding, gm * k)],
    ))
}

/// Single-modality feature-ratio term: the log ratio of embedding
/// distances to two neighbours should match the log ratio of their squared
/// label distances.
pub fn sfr_loss<T: Scalar>(
    modality: Modality,
    emb: ArrayView2<T>,
    labels: &[VaPoint<T>],
    triples: &[SfrTriple],
    cfg: &LossConfig,
) -> Result<LossReport<T>> {
    let term = match modality {
        Modality::Image => LossTerm::SfrImage,
        Modality::Music => LossTerm::SfrMusic,
    };
    let b = emb.nrows();
    if b < 3 {
        return Err(Error::InvalidIndex(format!("single-modal ratio needs >= 3 rows, got {b}")));
    }
    if labels.len() != b {
        return Err(Error::DimensionMismatch {
            context: format!("{modality} labels"),
            expected: b,
            actual: labels.len(),
        });
    }
    for t in triples {
        let SfrTriple { anchor, near, far } = *t;
        if anchor >= b || near >= b || far >= b || anchor == near || anchor == far || near == far {
            return Err(Error::InvalidIndex(format!(
                "triple ({anchor}, {near}, {far}) in batch of {b} must be distinct in-range rows"
            )));
        }
    }
    ensure_finite("embedding", &emb)?;
    let eps = T::of(cfg.epsilon);
    let two = T::of(2.0);
    let mut g = Array2::zeros(emb.raw_dim());
    let mut scratch = Array2::zeros(emb.raw_dim());
    let mut value = T::zero();
    for t in triples {
        let (fa, fj, fk) = (emb.row(t.anchor), emb.row(t.near), emb.row(t.far));
        let dj = sq_dist(fa, fj) + eps;
        let dk = sq_dist(fa, fk) + eps;
        let lj = labels[t.anchor].squared_distance(&labels[t.near]) + eps;
        let lk = labels[t.anchor].squared_distance(&labels[t.far]) + eps;
        let r = (dj.ln() - dk.ln()) - (lj.ln() - lk.ln());
        value += r * r;
        // rows of one matrix: route the pair gradient through a scratch
        // buffer so anchor and neighbour updates cannot alias
        push_sq_dist_grad(&mut g, t.anchor, fa, &mut scratch, t.near, fj, two * r / dj);
        push_sq_dist_grad(&mut g, t.anchor, fa, &mut scratch, t.far, fk, -two * r / dk);
    }
    g += &scratch;
    let k = batch_scale::<T>(cfg, triples.len());
    Ok(LossReport::single(term, value * k, [(GradTarget::embedding(modality), g * k)]))
}

/// Mean squared error of predicted pair similarities.
pub fn sim_mse_loss<T: Scalar>(pred: ArrayView1<T>, truth: ArrayView1<T>) -> Result<LossReport<T>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "similarity predictions".into(),
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let n = T::of(pred.len() as f64);
    let mut value = T::zero();
    let mut g = Array2::zeros((pred.len(), 1));
    for (i, (&p, &t)) in pred.iter().zip(truth.iter()).enumerate() {
        let d = t - p;
        value += d * d;
        g[[i, 0]] = -T::of(2.0) * d / n;
    }
    Ok(LossReport::single(LossTerm::Sim, value / n, [(GradTarget::SimPrediction, g)]))
}

/// Batch mean of the squared Euclidean error between predicted and true
/// `(valence, arousal)` rows.
pub fn va_mse_loss<T: Scalar>(modality: Modality, pred: ArrayView2<T>, truth: ArrayView2<T>) -> Result<LossReport<T>> {
    if pred.dim() != truth.dim() || pred.ncols() != 2 || pred.nrows() == 0 {
        return Err(Error::ShapeMismatch {
            tensor: format!("{modality} VA prediction"),
            expected: truth.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    let n = T::of(pred.nrows() as f64);
    let diff = &truth - &pred;
    let value = diff.iter().map(|&d| d * d).sum::<T>() / n;
    let g = diff * (-T::of(2.0) / n);
    let term = match modality {
        Modality::Image => LossTerm::ImageVa,
        Modality::Music => LossTerm::MusicVa,
    };
    Ok(LossReport::single(term, value, [(GradTarget::va_prediction(modality), g)]))
}

/// Weighted sum of single-term reports.
///
/// Each enabled term must appear exactly once; reports for disabled terms
/// are ignored entirely (value and gradients).
pub fn total_loss<T: Scalar>(reports: &[LossReport<T>], cfg: &LossConfig) -> Result<LossReport<T>> {
    let mut out = LossReport {
        terms: BTreeMap::new(),
        total: T::zero(),
        grads: BTreeMap::new(),
    };
    for r in reports {
        if r.terms.len() != 1 {
            return Err(Error::Config(format!(
                "total_loss takes single-term reports, got {} terms",
                r.terms.len()
            )));
        }
        let (&term, &value) = r.terms.iter().next().expect("one term");
        if !cfg.is_enabled(term) {
            continue;
        }
        if out.terms.insert(term, value).is_some() {
            return Err(Error::Config(format!("loss term `{term}` supplied twice")));
        }
        let w = T::of(cfg.weight(term));
        out.total += w * value;
        for (target, g) in &r.grads {
            match out.grads.get_mut(target) {
                Some(acc) => acc.scaled_add(w, g),
                None => {
                    out.grads.insert(*target, g * w);
                }
            }
        }
    }
    if let Some(missing) = cfg.enabled_terms().into_iter().find(|t| !out.terms.contains_key(t)) {
        return Err(Error::MissingTerm(missing.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::va::SigmaProvenance;
    use approx::assert_relative_eq;
    use ndarray::{array, Array1};

    fn va(v: f64, a: f64) -> VaPoint<f64> {
        VaPoint::new(v, a).unwrap()
    }

    fn scale() -> SimilarityScale<f64> {
        SimilarityScale::new(0.5, SigmaProvenance::Exact).unwrap()
    }

    #[test]
    fn cfr_single_anchor_log_ratio() {
        // anchor image 0: D_pos + eps = 1, D_neg + eps = e, equal similarities
        let cfg = LossConfig::default();
        let eps = cfg.epsilon;
        let e = std::f64::consts::E;
        let img = array![[0.0, 0.0], [5.0, 5.0]];
        let mus = array![[(1.0 - eps).sqrt(), 0.0], [0.0, (e - eps).sqrt()]];
        let labels = [va(0.5, 0.5), va(0.5, 0.5)];
        let batch = CrossBatch {
            image_emb: img.view(),
            music_emb: mus.view(),
            pair_sim: &[1.0, 1.0],
            image_labels: &labels,
            music_labels: &labels,
            scale: &scale(),
        };
        let r = cfr_loss(&batch, &[1, 0], &[1, 0], &cfg).unwrap();
        // recompute the image-0 term alone
        let d_pos: f64 = 1.0 - eps + eps;
        let d_neg: f64 = e - eps + eps;
        let term0 = (d_pos.ln() - d_neg.ln() - 0.0).powi(2);
        assert_relative_eq!(term0, 1.0, epsilon = 1e-12);
        assert!(r.value(LossTerm::Cfr).unwrap() >= term0);
    }

    #[test]
    fn cfr_zero_when_ratios_match() {
        // sigma 0.5, unit label gaps: every log similarity ratio is 2, so
        // each negative must sit at squared distance e^-2 against D_pos = 1
        let cfg = LossConfig { epsilon: 1e-300, ..LossConfig::default() };
        let labels_i = [va(0.0, 0.0), va(1.0, 0.0)];
        let labels_m = [va(0.0, 0.0), va(1.0, 0.0)];
        let s = scale();
        let a = (-1.0f64).exp();
        let img = array![[0.0], [1.0 + a]];
        let mus = array![[1.0], [a]];
        let pair_sim = [s.similarity_between(&labels_i[0], &labels_m[0]), s.similarity_between(&labels_i[1], &labels_m[1])];
        let batch = CrossBatch {
            image_emb: img.view(),
            music_emb: mus.view(),
            pair_sim: &pair_sim,
            image_labels: &labels_i,
            music_labels: &labels_m,
            scale: &s,
        };
        let r = cfr_loss(&batch, &[1, 0], &[1, 0], &cfg).unwrap();
        assert!(r.total.abs() < 1e-24, "{}", r.total);
    }

    #[test]
    fn cfr_rejects_self_negatives() {
        let z = Array2::<f64>::zeros((3, 2));
        let labels = [va(0.1, 0.1), va(0.2, 0.2), va(0.3, 0.3)];
        let batch = CrossBatch {
            image_emb: z.view(),
            music_emb: z.view(),
            pair_sim: &[1.0, 1.0, 1.0],
            image_labels: &labels,
            music_labels: &labels,
            scale: &scale(),
        };
        assert!(cfr_loss(&batch, &[1, 1, 0], &[1, 2, 0], &LossConfig::default()).is_err());
        assert!(cfr_loss(&batch, &[1, 2, 3], &[1, 2, 0], &LossConfig::default()).is_err());
        // duplicate (zero-distance) embeddings stay finite thanks to epsilon
        let r = cfr_loss(&batch, &[1, 2, 0], &[2, 0, 1], &LossConfig::default()).unwrap();
        assert!(r.total.is_finite());
        assert!(r.grads.values().all(|g| g.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn cfm_examples() {
        let cfg = LossConfig::default();
        let inside = cfm_loss(array![[0.0, 0.0]].view(), array![[0.6, 0.8]].view(), &cfg).unwrap();
        assert_eq!(inside.total, 0.0);
        let r = cfm_loss(array![[0.0, 0.0]].view(), array![[0.9, 1.2]].view(), &cfg).unwrap();
        assert_relative_eq!(r.total, 0.5, epsilon = 1e-12);
        let zero_margin = LossConfig { alpha: 0.0, ..cfg.clone() };
        let r = cfm_loss(array![[0.0, 0.0], [1.0, 1.0]].view(), array![[3.0, 4.0], [1.0, 1.0]].view(), &zero_margin).unwrap();
        assert_relative_eq!(r.total, 5.0, epsilon = 1e-12);
        // exactly at the hinge: subgradient zero
        let at = cfm_loss(array![[0.0, 0.0]].view(), array![[0.6, 0.8]].view(), &cfg).unwrap();
        assert!(at.grads[&GradTarget::ImageEmbedding].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sfr_examples() {
        let cfg = LossConfig { epsilon: 1e-300, ..LossConfig::default() };
        // labels embedded isometrically: loss zero
        let labels = [va(0.1, 0.2), va(0.7, 0.3), va(0.4, 0.9)];
        let emb = array![[0.1, 0.2], [0.7, 0.3], [0.4, 0.9]];
        let t = [
            SfrTriple { anchor: 0, near: 1, far: 2 },
            SfrTriple { anchor: 1, near: 2, far: 0 },
            SfrTriple { anchor: 2, near: 0, far: 1 },
        ];
        let r = sfr_loss(Modality::Image, emb.view(), &labels, &t, &cfg).unwrap();
        assert!(r.total.abs() < 1e-24);

        // feature ratio e^2, label ratio 1: (2 - 0)^2
        let e = std::f64::consts::E;
        let labels = [va(0.5, 0.5), va(0.6, 0.5), va(0.4, 0.5)];
        let emb = array![[0.0], [e], [1.0]];
        let r = sfr_loss(Modality::Music, emb.view(), &labels, &t[..1], &cfg).unwrap();
        assert_relative_eq!(r.value(LossTerm::SfrMusic).unwrap(), 4.0, epsilon = 1e-10);
        assert!(r.grad(GradTarget::MusicEmbedding).is_some());
    }

    #[test]
    fn sfr_validation() {
        let cfg = LossConfig::default();
        let labels = [va(0.5, 0.5); 3];
        let emb = Array2::<f64>::zeros((3, 2));
        let dup = [SfrTriple { anchor: 0, near: 1, far: 1 }];
        assert!(sfr_loss(Modality::Image, emb.view(), &labels, &dup, &cfg).is_err());
        let two = Array2::<f64>::zeros((2, 2));
        assert!(sfr_loss(Modality::Image, two.view(), &labels[..2], &[], &cfg).is_err());
    }

    #[test]
    fn regression_terms() {
        let r = sim_mse_loss(array![0.5].view(), array![0.7].view()).unwrap();
        assert_relative_eq!(r.total, 0.04, epsilon = 1e-15);
        assert_relative_eq!(r.grads[&GradTarget::SimPrediction][[0, 0]], -0.4, epsilon = 1e-15);
        let same = Array1::from(vec![0.3, 0.9]);
        assert_eq!(sim_mse_loss(same.view(), same.view()).unwrap().total, 0.0);
        assert!(sim_mse_loss(array![0.1, 0.2].view(), array![0.1].view()).is_err());

        let r = va_mse_loss(Modality::Image, array![[0.5, 0.8]].view(), array![[0.2, 0.4]].view()).unwrap();
        assert_relative_eq!(r.total, 0.25, epsilon = 1e-15);
        let g = &r.grads[&GradTarget::ImageVaPrediction];
        assert_relative_eq!(g[[0, 0]], 0.6, epsilon = 1e-15);
        assert_relative_eq!(g[[0, 1]], 0.8, epsilon = 1e-15);
        assert!(va_mse_loss(Modality::Image, array![[0.5]].view(), array![[0.2]].view()).is_err());
    }

    fn fake(term: LossTerm, value: f64) -> LossReport<f64> {
        LossReport::single(term, value, [(GradTarget::ImageEmbedding, array![[value]])])
    }

    #[test]
    fn totals() {
        let cfg = LossConfig::with_terms(&[LossTerm::Cfr, LossTerm::Cfm, LossTerm::Sim]);
        let reports = [fake(LossTerm::Cfr, 1.0), fake(LossTerm::Cfm, 2.0), fake(LossTerm::Sim, 3.0)];
        let t = total_loss(&reports, &cfg).unwrap();
        assert_eq!(t.total, 6.0);
        assert_eq!(t.grads[&GradTarget::ImageEmbedding], array![[6.0]]);

        let mut off = cfg.clone();
        off.enabled[LossTerm::Cfm.index()] = false;
        let t = total_loss(&reports, &off).unwrap();
        assert_eq!(t.total, 4.0);
        assert!(!t.terms.contains_key(&LossTerm::Cfm));
        assert_eq!(t.grads[&GradTarget::ImageEmbedding], array![[4.0]]);

        let mut half = LossConfig::with_terms(&LossTerm::ALL);
        half.weights[LossTerm::Cfr.index()] = 0.5;
        let all: Vec<_> = LossTerm::ALL
            .iter()
            .map(|&t| fake(t, if t == LossTerm::Cfr { 4.0 } else { 0.0 }))
            .collect();
        assert_eq!(total_loss(&all, &half).unwrap().total, 2.0);

        assert!(matches!(total_loss(&reports[..2], &cfg), Err(Error::MissingTerm(_))));
    }

    type CrossFixture = (Array2<f64>, Array2<f64>, Vec<VaPoint<f64>>, Vec<VaPoint<f64>>, Vec<usize>, Vec<usize>);

    fn random_cross(seed: u64, b: usize, d: usize) -> CrossFixture {
        use rand::Rng;
        let mut rng = crate::seed::rng_for(seed, &[]);
        let mut m = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0));
        let (img, mus) = (m(b, d), m(b, d));
        let mut rng = crate::seed::rng_for(seed, &[1]);
        let mut labels = || (0..b).map(|_| va(rng.random(), rng.random())).collect::<Vec<_>>();
        let (li, lm) = (labels(), labels());
        let mut rng = crate::seed::rng_for(seed, &[2]);
        let mut negs = || (0..b).map(|i| (i + rng.random_range(1..b)) % b).collect::<Vec<_>>();
        let (ni, nm) = (negs(), negs());
        (img, mus, li, lm, ni, nm)
    }

    proptest::proptest! {
        #[test]
        fn cfr_is_symmetric_in_modalities(seed in 0u64..1000, b in 2usize..8, d in 1usize..6) {
            let (img, mus, li, lm, ni, nm) = random_cross(seed, b, d);
            let s = scale();
            let sims: Vec<f64> = (0..b).map(|i| s.similarity_between(&li[i], &lm[i])).collect();
            let cfg = LossConfig::default();
            let fwd = CrossBatch { image_emb: img.view(), music_emb: mus.view(), pair_sim: &sims, image_labels: &li, music_labels: &lm, scale: &s };
            let swapped = CrossBatch { image_emb: mus.view(), music_emb: img.view(), pair_sim: &sims, image_labels: &lm, music_labels: &li, scale: &s };
            let a = cfr_loss(&fwd, &ni, &nm, &cfg).unwrap();
            let b2 = cfr_loss(&swapped, &nm, &ni, &cfg).unwrap();
            proptest::prop_assert!((a.total - b2.total).abs() <= 1e-12 * a.total.max(1.0));
            let (ga, gb) = (&a.grads[&GradTarget::ImageEmbedding], &b2.grads[&GradTarget::MusicEmbedding]);
            proptest::prop_assert!(ga.iter().zip(gb).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0)));
        }

        #[test]
        fn losses_are_nonnegative_and_finite_on_duplicates(seed in 0u64..1000, b in 3usize..8, d in 1usize..6) {
            let (img, _, li, lm, ni, nm) = random_cross(seed, b, d);
            // every music row duplicates its image row; one image row repeated
            let mut img = img;
            let first = img.row(0).to_owned();
            img.row_mut(1).assign(&first);
            let mus = img.clone();
            let s = scale();
            let sims: Vec<f64> = (0..b).map(|i| s.similarity_between(&li[i], &lm[i])).collect();
            let cfg = LossConfig::default();
            let cross = CrossBatch { image_emb: img.view(), music_emb: mus.view(), pair_sim: &sims, image_labels: &li, music_labels: &lm, scale: &s };
            let triples: Vec<SfrTriple> = (0..b).map(|a| SfrTriple { anchor: a, near: (a + 1) % b, far: (a + 2) % b }).collect();
            let reports = [
                cfr_loss(&cross, &ni, &nm, &cfg).unwrap(),
                cfm_loss(img.view(), mus.view(), &cfg).unwrap(),
                sfr_loss(Modality::Image, img.view(), &li, &triples, &cfg).unwrap(),
            ];
            for r in &reports {
                proptest::prop_assert!(r.total >= 0.0 && r.total.is_finite());
                for g in r.grads.values() {
                    proptest::prop_assert!(g.iter().all(|v| v.is_finite()));
                }
            }
        }
    }

    #[test]
    fn unit_weight_total_is_plain_sum() {
        let values = [0.1, 2.5, 0.3, 7.0, 1e-3, 0.25, 0.4];
        let reports: Vec<_> = LossTerm::ALL.iter().zip(values).map(|(&t, v)| fake(t, v)).collect();
        let t = total_loss(&reports, &LossConfig::default()).unwrap();
        assert!((t.total - values.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { epsilon: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig::with_terms(&[]).validate().is_err());
        assert_eq!("sfr_i".parse::<LossTerm>().unwrap(), LossTerm::SfrImage);
    }
}
