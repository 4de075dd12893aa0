//! Minibatch construction, in-batch negative and neighbour sampling, and the
//! joint optimization loop.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{Item, Modality, PairRecord, SplitSet};
use crate::error::{Error, Result};
use crate::eval::{self, feature_matrix};
use crate::losses::{self, CrossBatch, GradTarget, LossConfig, LossReport, LossTerm, SfrTriple};
use crate::nn::{sgd_step, ArchConfig, ForwardCache, Gradients, Mode, ModelParams, Network, OptimizerState};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_for, tag};
use crate::va::{SimilarityScale, VaPoint};

/// Shortest batch worth a step; shorter epoch remainders are dropped.
pub const MIN_BATCH: usize = 3;
/// Redraws of an anchor's neighbours before the anchor is skipped.
pub const SFR_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Similarity, cross-modal ratio and margin terms only.
    SimilarityOnly,
    /// All seven terms.
    Full,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::SimilarityOnly => "similarity_only",
            TrainMode::Full => "full",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity_only" => Ok(TrainMode::SimilarityOnly),
            "full" => Ok(TrainMode::Full),
            other => Err(Error::Config(format!("unknown train mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerState,
    pub loss: LossConfig,
    pub arch: ArchConfig,
    pub seed: u64,
    pub mode: TrainMode,
    /// Run both branches in eval mode and never update them.
    pub freeze_branches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 30,
            optimizer: OptimizerState::default(),
            loss: LossConfig::default(),
            arch: ArchConfig::default(),
            seed: 0,
            mode: TrainMode::Full,
            freeze_branches: false,
        }
    }
}

impl TrainConfig {
    /// The loss configuration after the mode has masked out the VA family.
    pub fn active_loss(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        if self.mode == TrainMode::SimilarityOnly {
            for t in LossTerm::VA_FAMILY {
                loss.enabled[t.index()] = false;
            }
        }
        loss
    }

    pub fn validate(&self) -> Result<()> {
        let loss = self.active_loss();
        loss.validate()?;
        self.optimizer.validate()?;
        let sfr = loss.is_enabled(LossTerm::SfrImage) || loss.is_enabled(LossTerm::SfrMusic);
        if self.batch_size < MIN_BATCH || (sfr && self.batch_size < 3) {
            return Err(Error::Config(format!("batch_size must be >= {MIN_BATCH}, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// The training split, an optional validation split used only for the
/// per-epoch metric pass, and the similarity scale of the training pool.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a SplitSet,
    pub validation: Option<&'a SplitSet>,
    pub scale: &'a SimilarityScale<f64>,
}

/// Seeded shuffle of `0..n` cut into contiguous batches.
pub fn make_batches(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(epoch_seed, &[tag("batches")]));
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= MIN_BATCH)
        .map(<[usize]>::to_vec)
        .collect()
}

/// One in-batch negative per anchor, uniform over the other rows.
pub fn sample_negatives(b: usize, seed: u64) -> Vec<usize> {
    if b < 2 {
        return Vec::new();
    }
    let mut rng = rng_for(seed, &[tag("negatives")]);
    (0..b)
        .map(|i| {
            let j = rng.random_range(0..b - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

/// Two distinct neighbours per anchor. Draws whose label side would
/// compare identical labels are redrawn; after [`SFR_RETRIES`] the anchor
/// is skipped. Returns the triples and the skip count.
pub fn sample_triples<T: Scalar>(labels: &[VaPoint<T>], seed: u64) -> (Vec<SfrTriple>, usize) {
    let b = labels.len();
    if b < 3 {
        return (Vec::new(), b);
    }
    let mut rng = rng_for(seed, &[tag("triples")]);
    let mut triples = Vec::with_capacity(b);
    let mut skipped = 0;
    for anchor in 0..b {
        let mut found = None;
        for _ in 0..=SFR_RETRIES {
            let mut near = rng.random_range(0..b - 1);
            if near >= anchor {
                near += 1;
            }
            let (lo, hi) = (anchor.min(near), anchor.max(near));
            let mut far = rng.random_range(0..b - 2);
            for taken in [lo, hi] {
                if far >= taken {
                    far += 1;
                }
            }
            let same = |k: usize| labels[anchor].squared_distance(&labels[k]) == T::zero();
            if !same(near) && !same(far) {
                found = Some(SfrTriple { anchor, near, far });
                break;
            }
        }
        match found {
            Some(t) => triples.push(t),
            None => skipped += 1,
        }
    }
    (triples, skipped)
}

/// Features and labels of one batch of pairs, row-aligned.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub image_features: Array2<T>,
    pub music_features: Array2<T>,
    pub pair_sim: Vec<T>,
    pub image_labels: Vec<VaPoint<T>>,
    pub music_labels: Vec<VaPoint<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn gather(set: &SplitSet, pairs: &[&PairRecord]) -> Result<Self> {
        let images = pairs.iter().map(|p| set.image(&p.image_id)).collect::<Result<Vec<&Item>>>()?;
        let music = pairs.iter().map(|p| set.music(&p.music_id)).collect::<Result<Vec<&Item>>>()?;
        Ok(Self {
            image_features: feature_matrix(&images, set.image_dim())?,
            music_features: feature_matrix(&music, set.music_dim())?,
            pair_sim: pairs.iter().map(|p| T::of(p.similarity)).collect(),
            image_labels: images.iter().map(|i| i.label.cast()).collect(),
            music_labels: music.iter().map(|i| i.label.cast()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pair_sim.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_sim.is_empty()
    }
}

fn label_matrix<T: Scalar>(labels: &[VaPoint<T>]) -> Array2<T> {
    Array2::from_shape_fn((labels.len(), 2), |(i, k)| labels[i].to_array()[k])
}

/// Loss report and per-network parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub report: LossReport<T>,
    /// Only networks that took part in the step, by model network name.
    pub grads: BTreeMap<&'static str, Gradients<T>>,
    pub skipped_anchors: usize,
}

fn add_grads<T: Scalar>(map: &mut BTreeMap<&'static str, Gradients<T>>, name: &'static str, g: Gradients<T>) {
    match map.get_mut(name) {
        Some(acc) => acc.accumulate(&g),
        None => {
            map.insert(name, g);
        }
    }
}

fn va_head_name<T>(model: &ModelParams<T>, modality: Modality) -> &'static str {
    match (modality, &model.music_va_predictor) {
        (Modality::Music, Some(_)) => "music_va_predictor",
        _ => "va_predictor",
    }
}

fn network_mut<'m, T>(model: &'m mut ModelParams<T>, name: &str) -> &'m mut Network<T> {
    match name {
        "image_branch" => &mut model.image_branch,
        "music_branch" => &mut model.music_branch,
        "similarity_predictor" => &mut model.similarity_predictor,
        "music_va_predictor" => model.music_va_predictor.as_mut().expect("per-modality head"),
        _ => &mut model.va_predictor,
    }
}

/// Forward, loss and backward for one batch. Updates batch-norm running
/// statistics of every network run in train mode; parameters are untouched.
pub fn step_gradients<T: Scalar>(
    model: &mut ModelParams<T>,
    batch: &Batch<T>,
    loss: &LossConfig,
    scale: &SimilarityScale<T>,
    freeze_branches: bool,
    step_seed: u64,
) -> Result<StepOutput<T>> {
    let b = batch.len();
    let dropout = |name: &str, call: u64| derive_seed(step_seed, &[tag("dropout"), tag(name), call]);
    let on = |t: LossTerm| loss.is_enabled(t);

    let embed = |net: &mut Network<T>, name: &str, x: &Array2<T>| -> Result<(Array2<T>, Option<ForwardCache<T>>)> {
        if freeze_branches {
            Ok((net.predict(x.view())?, None))
        } else {
            let (y, c) = net.forward(x.view(), Mode::Train, dropout(name, 0))?;
            Ok((y, Some(c)))
        }
    };
    let (ei, ci) = embed(&mut model.image_branch, "image_branch", &batch.image_features)?;
    let (em, cm) = embed(&mut model.music_branch, "music_branch", &batch.music_features)?;
    let width = ei.ncols();

    let mut reports = Vec::new();
    let mut skipped = 0;

    let sim = if on(LossTerm::Sim) {
        let joint = concatenate(Axis(1), &[ei.view(), em.view()]).expect("row-aligned embeddings");
        let (pred, cache) = model
            .similarity_predictor
            .forward(joint.view(), Mode::Train, dropout("similarity_predictor", 0))?;
        let truth = ndarray::Array1::from(batch.pair_sim.clone());
        reports.push(losses::sim_mse_loss(pred.column(0), truth.view())?);
        Some(cache)
    } else {
        None
    };

    let mut va_caches = Vec::new();
    for (term, modality, emb, labels) in [
        (LossTerm::ImageVa, Modality::Image, &ei, &batch.image_labels),
        (LossTerm::MusicVa, Modality::Music, &em, &batch.music_labels),
    ] {
        if !on(term) {
            continue;
        }
        let name = va_head_name(model, modality);
        let call = modality as u64;
        let (pred, cache) = network_mut(model, name).forward(emb.view(), Mode::Train, dropout(name, call))?;
        reports.push(losses::va_mse_loss(modality, pred.view(), label_matrix(labels).view())?);
        va_caches.push((modality, name, cache));
    }

    if on(LossTerm::Cfr) {
        let negatives = |m: &str| sample_negatives(b, derive_seed(step_seed, &[tag("cfr"), tag(m)]));
        let cross = CrossBatch {
            image_emb: ei.view(),
            music_emb: em.view(),
            pair_sim: &batch.pair_sim,
            image_labels: &batch.image_labels,
            music_labels: &batch.music_labels,
            scale,
        };
        reports.push(losses::cfr_loss(&cross, &negatives("image"), &negatives("music"), loss)?);
    }
    if on(LossTerm::Cfm) {
        reports.push(losses::cfm_loss(ei.view(), em.view(), loss)?);
    }
    for (term, modality, emb, labels) in [
        (LossTerm::SfrImage, Modality::Image, &ei, &batch.image_labels),
        (LossTerm::SfrMusic, Modality::Music, &em, &batch.music_labels),
    ] {
        if !on(term) {
            continue;
        }
        let (triples, skip) = sample_triples(labels, derive_seed(step_seed, &[tag("sfr"), tag(modality.as_str())]));
        skipped += skip;
        if b < 3 {
            reports.push(LossReport::zero(term));
        } else {
            reports.push(losses::sfr_loss(modality, emb.view(), labels, &triples, loss)?);
        }
    }

    let report = losses::total_loss(&reports, loss)?;

    let mut grads = BTreeMap::new();
    let zeros = || Array2::<T>::zeros((b, width));
    let mut gi = report.grad(GradTarget::ImageEmbedding).cloned().unwrap_or_else(zeros);
    let mut gm = report.grad(GradTarget::MusicEmbedding).cloned().unwrap_or_else(zeros);
    if let Some(cache) = sim {
        let g = report.grad(GradTarget::SimPrediction).expect("similarity gradient");
        let (gin, pg) = model.similarity_predictor.backward(&cache, g.view())?;
        gi += &gin.slice(s![.., ..width]);
        gm += &gin.slice(s![.., width..]);
        add_grads(&mut grads, "similarity_predictor", pg);
    }
    for (modality, name, cache) in &va_caches {
        let g = report
            .grad(GradTarget::va_prediction(*modality))
            .expect("VA gradient");
        let (gin, pg) = network_mut(model, name).backward(cache, g.view())?;
        match modality {
            Modality::Image => gi += &gin,
            Modality::Music => gm += &gin,
        }
        add_grads(&mut grads, name, pg);
    }
    if let (Some(ci), Some(cm)) = (ci, cm) {
        grads.insert("image_branch", model.image_branch.backward(&ci, gi.view())?.1);
        grads.insert("music_branch", model.music_branch.backward(&cm, gm.view())?.1);
    }
    Ok(StepOutput {
        report,
        grads,
        skipped_anchors: skipped,
    })
}

/// Validation metrics of one epoch, computed in eval mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationMetrics {
    pub sim_mse: f64,
    pub sim_mae: f64,
    /// Mean per-dimension VA MSE; present when a VA term is trained.
    pub image_va_mse: Option<f64>,
    pub music_va_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Batch mean of each active term.
    pub terms: BTreeMap<LossTerm, f64>,
    pub total: f64,
    pub skipped_anchors: usize,
    pub validation: Option<ValidationMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub terms: Vec<LossTerm>,
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    fn has_va(&self) -> bool {
        self.records
            .iter()
            .any(|r| r.validation.is_some_and(|v| v.image_va_mse.is_some() || v.music_va_mse.is_some()))
    }

    fn tracks_skips(&self) -> bool {
        self.terms.contains(&LossTerm::SfrImage) || self.terms.contains(&LossTerm::SfrMusic)
    }

    /// `epoch,lr,<terms>,total[,sfr_skipped][,val_sim_mse,val_sim_mae[,val_image_va_mse,val_music_va_mse]]`
    pub fn to_csv(&self) -> String {
        let has_val = self.records.iter().any(|r| r.validation.is_some());
        let mut header = vec!["epoch".to_string(), "lr".to_string()];
        header.extend(self.terms.iter().map(|t| t.to_string()));
        header.push("total".into());
        if self.tracks_skips() {
            header.push("sfr_skipped".into());
        }
        if has_val {
            header.extend(["val_sim_mse".into(), "val_sim_mae".into()]);
            if self.has_va() {
                header.extend(["val_image_va_mse".into(), "val_music_va_mse".into()]);
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![r.epoch.to_string(), r.lr.to_string()];
            row.extend(self.terms.iter().map(|t| r.terms[t].to_string()));
            row.push(r.total.to_string());
            if self.tracks_skips() {
                row.push(r.skipped_anchors.to_string());
            }
            if let Some(v) = r.validation {
                row.extend([v.sim_mse.to_string(), v.sim_mae.to_string()]);
                if self.has_va() {
                    row.extend([opt(v.image_va_mse), opt(v.music_va_mse)]);
                }
            }
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Trains a freshly initialized model.
pub fn train<T: Scalar>(data: &TrainData<'_>, config: &TrainConfig) -> Result<(ModelParams<T>, TrainHistory)> {
    let model = ModelParams::new(data.train.image_dim(), data.train.music_dim(), &config.arch, config.seed)?;
    train_from(model, data, config, |_, _| Ok(()))
}

/// Continues training `model`; `observer` sees each finished epoch.
pub fn train_from<T, F>(
    mut model: ModelParams<T>,
    data: &TrainData<'_>,
    config: &TrainConfig,
    mut observer: F,
) -> Result<(ModelParams<T>, TrainHistory)>
where
    T: Scalar,
    F: FnMut(&EpochRecord, &ModelParams<T>) -> Result<()>,
{
    config.validate()?;
    let loss = config.active_loss();
    let scale = data.scale.cast::<T>();
    let pairs = data.train.pairs();
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus("training split has no pairs".into()));
    }
    for (dim, expected, what) in [
        (data.train.image_dim(), model.image_dim(), "image features"),
        (data.train.music_dim(), model.music_dim(), "music features"),
    ] {
        if dim != expected {
            return Err(Error::DimensionMismatch {
                context: what.into(),
                expected,
                actual: dim,
            });
        }
    }
    let terms = loss.enabled_terms();
    let trains_va = loss.is_enabled(LossTerm::ImageVa) || loss.is_enabled(LossTerm::MusicVa);
    let mut history = TrainHistory {
        terms: terms.clone(),
        records: Vec::with_capacity(config.epochs),
    };

    for epoch in 0..config.epochs {
        let lr = config.optimizer.lr_at(epoch);
        let batches = make_batches(pairs.len(), config.batch_size, derive_seed(config.seed, &[tag("epoch"), epoch as u64]));
        let mut sums: BTreeMap<LossTerm, f64> = terms.iter().map(|&t| (t, 0.0)).collect();
        let mut total = 0.0;
        let mut skipped = 0;
        for (bi, idx) in batches.iter().enumerate() {
            let chosen: Vec<&PairRecord> = idx.iter().map(|&i| &pairs[i]).collect();
            let batch = Batch::<T>::gather(data.train, &chosen)?;
            let step_seed = derive_seed(config.seed, &[tag("step"), epoch as u64, bi as u64]);
            let out = step_gradients(&mut model, &batch, &loss, &scale, config.freeze_branches, step_seed)?;
            if !out.report.total.is_finite() {
                let detail = out
                    .report
                    .terms
                    .iter()
                    .map(|(t, v)| format!("{t}={v}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi,
                    detail,
                });
            }
            for (t, v) in &out.report.terms {
                *sums.get_mut(t).expect("active term") += v.to_f64_lossy();
            }
            total += out.report.total.to_f64_lossy();
            skipped += out.skipped_anchors;
            for (name, g) in &out.grads {
                sgd_step(name, network_mut(&mut model, name), g, T::of(lr))?;
            }
        }
        let n = batches.len().max(1) as f64;
        let validation = match data.validation {
            Some(set) => Some(validate(&model, set, trains_va)?),
            None => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            terms: sums.into_iter().map(|(t, v)| (t, v / n)).collect(),
            total: total / n,
            skipped_anchors: skipped,
            validation,
        };
        observer(&record, &model)?;
        history.records.push(record);
    }
    Ok((model, history))
}

fn validate<T: Scalar>(model: &ModelParams<T>, set: &SplitSet, with_va: bool) -> Result<ValidationMetrics> {
    if with_va {
        let r = eval::evaluate(model, set)?;
        Ok(ValidationMetrics {
            sim_mse: r.sim_mse,
            sim_mae: r.sim_mae,
            image_va_mse: Some(r.image.mean_mse()),
            music_va_mse: Some(r.music.mean_mse()),
        })
    } else {
        let (sim_mse, sim_mae) = eval::similarity_metrics(model, set)?;
        Ok(ValidationMetrics {
            sim_mse,
            sim_mae,
            image_va_mse: None,
            music_va_mse: None,
        })
    }
}
