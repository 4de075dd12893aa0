//! Metrics, held-out evaluation, baselines, ablations and top-k matching.

mod baselines;

use std::fmt::Write as _;

use ndarray::Array2;

use crate::dataset::{Item, Modality, SplitSet};
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::scalar::Scalar;
use crate::va::SimilarityScale;

pub use baselines::{
    baseline_concat, baseline_sp, fit_va_head, run_ablation, AblationFlags, AblationRow, BaselineRun, SpNet,
};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

fn check_lengths(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "metric inputs".into(),
            expected: labels.len(),
            actual: preds.len(),
        });
    }
    Ok(())
}

pub fn mse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, l)| (l - p) * (l - p)).sum::<f64>() / preds.len() as f64)
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, l)| (l - p).abs()).sum::<f64>() / preds.len() as f64)
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::NonFinite("spearman of a constant sequence".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Anything that scores pairs and predicts VA coordinates for items.
pub trait Predictor {
    /// Similarities of row-aligned `(images[i], music[i])` pairs.
    fn similarity(&self, images: &[&Item], music: &[&Item]) -> Result<Vec<f64>>;
    fn va(&self, modality: Modality, items: &[&Item]) -> Result<Vec<[f64; 2]>>;
}

/// Stacks item features into a matrix.
pub fn feature_matrix<T: Scalar>(items: &[&Item], dim: usize) -> Result<Array2<T>> {
    let mut out = Array2::zeros((items.len(), dim));
    for (row, item) in out.rows_mut().into_iter().zip(items) {
        if item.features.len() != dim {
            return Err(Error::DimensionMismatch {
                context: format!("features of {} `{}`", item.modality, item.id),
                expected: dim,
                actual: item.features.len(),
            });
        }
        for (o, &v) in row.into_iter().zip(&item.features) {
            *o = T::of(v);
        }
    }
    Ok(out)
}

impl<T: Scalar> Predictor for ModelParams<T> {
    fn similarity(&self, images: &[&Item], music: &[&Item]) -> Result<Vec<f64>> {
        let xi = feature_matrix::<T>(images, self.image_dim())?;
        let xm = feature_matrix::<T>(music, self.music_dim())?;
        Ok(self
            .predict_similarity(xi.view(), xm.view())?
            .into_iter()
            .map(|v| v.to_f64_lossy())
            .collect())
    }

    fn va(&self, modality: Modality, items: &[&Item]) -> Result<Vec<[f64; 2]>> {
        let dim = match modality {
            Modality::Image => self.image_dim(),
            Modality::Music => self.music_dim(),
        };
        let x = feature_matrix::<T>(items, dim)?;
        let out = self.predict_va(modality, x.view())?;
        Ok(out
            .rows()
            .into_iter()
            .map(|r| [r[0].to_f64_lossy(), r[1].to_f64_lossy()])
            .collect())
    }
}

/// Ground truth: labels as VA predictions and the similarity map on them.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub scale: SimilarityScale<f64>,
}

impl Predictor for OraclePredictor {
    fn similarity(&self, images: &[&Item], music: &[&Item]) -> Result<Vec<f64>> {
        Ok(images
            .iter()
            .zip(music)
            .map(|(i, m)| self.scale.similarity_between(&i.label, &m.label))
            .collect())
    }

    fn va(&self, _: Modality, items: &[&Item]) -> Result<Vec<[f64; 2]>> {
        Ok(items.iter().map(|i| i.label.to_array()).collect())
    }
}

/// The same similarity and VA point for every input.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor {
    pub similarity: f64,
    pub va: [f64; 2],
}

impl Predictor for ConstantPredictor {
    fn similarity(&self, images: &[&Item], _: &[&Item]) -> Result<Vec<f64>> {
        Ok(vec![self.similarity; images.len()])
    }

    fn va(&self, _: Modality, items: &[&Item]) -> Result<Vec<[f64; 2]>> {
        Ok(vec![self.va; items.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VaMetrics {
    pub valence_mse: f64,
    pub valence_mae: f64,
    pub arousal_mse: f64,
    pub arousal_mae: f64,
    pub count: usize,
}

impl VaMetrics {
    pub fn from_predictions(preds: &[[f64; 2]], labels: &[[f64; 2]]) -> Result<Self> {
        let col = |v: &[[f64; 2]], k: usize| v.iter().map(|p| p[k]).collect::<Vec<_>>();
        let (pv, pa, lv, la) = (col(preds, 0), col(preds, 1), col(labels, 0), col(labels, 1));
        Ok(Self {
            valence_mse: mse(&pv, &lv)?,
            valence_mae: mae(&pv, &lv)?,
            arousal_mse: mse(&pa, &la)?,
            arousal_mae: mae(&pa, &la)?,
            count: preds.len(),
        })
    }

    /// Mean of the two per-dimension MSEs.
    pub fn mean_mse(&self) -> f64 {
        (self.valence_mse + self.arousal_mse) / 2.0
    }
}

/// Similarity and per-dimension VA errors on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: String,
    /// Number of evaluated pairs.
    pub pairs: usize,
    pub sim_mse: f64,
    pub sim_mae: f64,
    pub image: VaMetrics,
    pub music: VaMetrics,
}

const REPORT_COLUMNS: [&str; 14] = [
    "split",
    "pairs",
    "sim_mse",
    "sim_mae",
    "image_items",
    "image_valence_mse",
    "image_valence_mae",
    "image_arousal_mse",
    "image_arousal_mae",
    "music_items",
    "music_valence_mse",
    "music_valence_mae",
    "music_arousal_mse",
    "music_arousal_mae",
];

impl EvalReport {
    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    fn values(&self) -> Vec<String> {
        let mut v = vec![
            self.split.clone(),
            self.pairs.to_string(),
            self.sim_mse.to_string(),
            self.sim_mae.to_string(),
        ];
        for m in [&self.image, &self.music] {
            v.push(m.count.to_string());
            for x in [m.valence_mse, m.valence_mae, m.arousal_mse, m.arousal_mae] {
                v.push(x.to_string());
            }
        }
        v
    }

    pub fn csv_row(&self) -> String {
        self.values().join(",")
    }

    /// One `key = value` line per field.
    pub fn to_fields(&self) -> String {
        let mut out = String::new();
        for (k, v) in REPORT_COLUMNS.iter().zip(self.values()) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Inverse of [`EvalReport::to_fields`].
    pub fn from_fields(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("report line {}: expected `key = value`", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| Error::Config(format!("report missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Config(format!("bad `{k}`"))) };
        let count = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Config(format!("bad `{k}`"))) };
        let va = |p: &str| -> Result<VaMetrics> {
            Ok(VaMetrics {
                valence_mse: num(&format!("{p}_valence_mse"))?,
                valence_mae: num(&format!("{p}_valence_mae"))?,
                arousal_mse: num(&format!("{p}_arousal_mse"))?,
                arousal_mae: num(&format!("{p}_arousal_mae"))?,
                count: count(&format!("{p}_items"))?,
            })
        };
        Ok(Self {
            split: get("split")?,
            pairs: count("pairs")?,
            sim_mse: num("sim_mse")?,
            sim_mae: num("sim_mae")?,
            image: va("image")?,
            music: va("music")?,
        })
    }
}

/// Similarity metrics over all pairs of `set` and VA metrics over all of
/// its items. Never mutates the predictor.
pub fn evaluate(predictor: &dyn Predictor, set: &SplitSet) -> Result<EvalReport> {
    let (sim_mse, sim_mae) = similarity_metrics(predictor, set)?;
    let mut va = [VaMetrics::default(); 2];
    for (slot, modality) in va.iter_mut().zip([Modality::Image, Modality::Music]) {
        let items: Vec<&Item> = set.items(modality).iter().collect();
        if items.is_empty() {
            continue;
        }
        let mut preds = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_CHUNK) {
            preds.extend(predictor.va(modality, chunk)?);
        }
        let labels: Vec<[f64; 2]> = items.iter().map(|i| i.label.to_array()).collect();
        *slot = VaMetrics::from_predictions(&preds, &labels)?;
    }
    Ok(EvalReport {
        split: set.split().to_string(),
        pairs: set.pairs().len(),
        sim_mse,
        sim_mae,
        image: va[0],
        music: va[1],
    })
}

/// `(mse, mae)` of predicted against stored pair similarities.
pub fn similarity_metrics(predictor: &dyn Predictor, set: &SplitSet) -> Result<(f64, f64)> {
    let pairs = set.pairs();
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} split has no pairs", set.split())));
    }
    let mut preds = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let images = chunk.iter().map(|p| set.image(&p.image_id)).collect::<Result<Vec<_>>>()?;
        let music = chunk.iter().map(|p| set.music(&p.music_id)).collect::<Result<Vec<_>>>()?;
        preds.extend(predictor.similarity(&images, &music)?);
    }
    let truth: Vec<f64> = pairs.iter().map(|p| p.similarity).collect();
    Ok((mse(&preds, &truth)?, mae(&preds, &truth)?))
}

/// The `k` pool images with the highest predicted similarity to `clip`,
/// descending, ties broken by ascending id.
pub fn match_topk(predictor: &dyn Predictor, clip: &Item, pool: &[&Item], k: usize) -> Result<Vec<(String, f64)>> {
    if pool.is_empty() {
        return Err(Error::EmptyCorpus("matching pool is empty".into()));
    }
    if k > pool.len() {
        return Err(Error::InvalidIndex(format!("k = {k} exceeds pool size {}", pool.len())));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for chunk in pool.chunks(EVAL_CHUNK) {
        let music = vec![clip; chunk.len()];
        let s = predictor.similarity(chunk, &music)?;
        scored.extend(chunk.iter().map(|i| i.id.clone()).zip(s));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{PairOrigin, PairRecord, Split};
    use crate::va::{SigmaProvenance, VaPoint};
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        assert_eq!(mse(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(mae(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert!((mse(&[0.2], &[0.5]).unwrap() - 0.09).abs() < 1e-15);
        assert!((mae(&[0.2], &[0.5]).unwrap() - 0.3).abs() < 1e-15);
        assert!(mse(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ties use average ranks: ranks (1.5, 1.5, 3) against (1, 2, 3)
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_vanish_on_identity_and_ignore_order(
            v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40),
            rot in 0usize..40,
        ) {
            let (p, l): (Vec<f64>, Vec<f64>) = v.iter().copied().unzip();
            prop_assert_eq!(mse(&p, &p).unwrap(), 0.0);
            prop_assert_eq!(mae(&p, &p).unwrap(), 0.0);
            let k = rot % p.len();
            let (mut pr, mut lr) = (p.clone(), l.clone());
            pr.rotate_left(k);
            lr.rotate_left(k);
            prop_assert!((mse(&p, &l).unwrap() - mse(&pr, &lr).unwrap()).abs() < 1e-12);
            prop_assert!((mae(&p, &l).unwrap() - mae(&pr, &lr).unwrap()).abs() < 1e-12);
        }
    }

    fn item(modality: Modality, id: &str, v: f64, a: f64) -> Item {
        Item {
            id: id.into(),
            modality,
            label: VaPoint::new(v, a).unwrap(),
            features: vec![v, a],
        }
    }

    fn fixture() -> (SplitSet, SimilarityScale<f64>) {
        let scale = SimilarityScale::new(0.4, SigmaProvenance::Exact).unwrap();
        let images = vec![
            item(Modality::Image, "a", 0.1, 0.2),
            item(Modality::Image, "b", 0.9, 0.5),
            item(Modality::Image, "c", 0.4, 0.4),
        ];
        let music = vec![item(Modality::Music, "x", 0.2, 0.3), item(Modality::Music, "y", 0.8, 0.9)];
        let mut pairs = Vec::new();
        for i in &images {
            for m in &music {
                pairs.push(PairRecord {
                    image_id: i.id.clone(),
                    music_id: m.id.clone(),
                    similarity: scale.similarity_between(&i.label, &m.label),
                    origin: PairOrigin::Random,
                });
            }
        }
        (SplitSet::new(Split::Test, images, music, pairs, 2, 2).unwrap(), scale)
    }

    #[test]
    fn oracle_scores_zero_and_constant_scores_variance() {
        let (set, scale) = fixture();
        let r = evaluate(&OraclePredictor { scale }, &set).unwrap();
        assert_eq!((r.sim_mse, r.sim_mae), (0.0, 0.0));
        assert_eq!(r.image.mean_mse(), 0.0);
        assert_eq!(r.pairs, 6);
        assert_eq!(r.image.count, 3);

        let s: Vec<f64> = set.pairs().iter().map(|p| p.similarity).collect();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s.len() as f64;
        let c = ConstantPredictor {
            similarity: mean,
            va: [0.5, 0.5],
        };
        let r = evaluate(&c, &set).unwrap();
        assert!((r.sim_mse - var).abs() < 1e-15);
    }

    #[test]
    fn report_formats_round_trip() {
        let (set, _) = fixture();
        let r = evaluate(&ConstantPredictor { similarity: 0.3, va: [0.1, 0.7] }, &set).unwrap();
        assert_eq!(EvalReport::from_fields(&r.to_fields()).unwrap(), r);
        assert_eq!(r.csv_row().split(',').count(), EvalReport::csv_header().split(',').count());
    }

    #[test]
    fn topk_orders_by_oracle_with_id_ties() {
        let (set, scale) = fixture();
        let oracle = OraclePredictor { scale };
        let pool: Vec<&Item> = set.items(Modality::Image).iter().collect();
        let clip = set.music("x").unwrap().clone();
        let ranked = match_topk(&oracle, &clip, &pool, 3).unwrap();
        let mut brute: Vec<(String, f64)> = pool
            .iter()
            .map(|i| (i.id.clone(), scale.similarity_between(&i.label, &clip.label)))
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        assert_eq!(ranked, brute);

        let flat = ConstantPredictor { similarity: 0.5, va: [0.5; 2] };
        let ids: Vec<String> = match_topk(&flat, &clip, &pool, 2).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(match_topk(&flat, &clip, &pool, 4).is_err());
        assert!(match_topk(&flat, &clip, &[], 0).is_err());
    }
}
