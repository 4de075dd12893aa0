use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::{evaluate, EvalReport, Predictor, VaMetrics};
use crate::dataset::{Item, Modality, SplitSet};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossTerm};
use crate::nn::ModelParams;
use crate::seed::{derive_seed, tag};
use crate::trainer::{train, train_from, TrainConfig, TrainData, TrainHistory, TrainMode};
use crate::va::SimilarityScale;

/// Separate-prediction baseline: per-modality VA regressors whose outputs
/// are scored with the similarity map.
#[derive(Debug, Clone)]
pub struct SpNet {
    pub model: ModelParams<f64>,
    pub scale: SimilarityScale<f64>,
}

impl Predictor for SpNet {
    fn similarity(&self, images: &[&Item], music: &[&Item]) -> Result<Vec<f64>> {
        let vi = self.model.va(Modality::Image, images)?;
        let vm = self.model.va(Modality::Music, music)?;
        Ok(vi
            .iter()
            .zip(&vm)
            .map(|(a, b)| {
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                self.scale.similarity(d)
            })
            .collect())
    }

    fn va(&self, modality: Modality, items: &[&Item]) -> Result<Vec<[f64; 2]>> {
        self.model.va(modality, items)
    }
}

/// A trained model with its held-out report and training history.
#[derive(Debug, Clone)]
pub struct BaselineRun<P> {
    pub predictor: P,
    pub report: EvalReport,
    pub history: TrainHistory,
}

fn with_terms(base: &LossConfig, terms: &[LossTerm]) -> LossConfig {
    let mut cfg = base.clone();
    cfg.enabled = [false; 7];
    for t in terms {
        cfg.enabled[t.index()] = true;
    }
    cfg
}

/// Trains two independent branch + VA-head stacks on image and music VA
/// regression and derives similarity from their predictions.
pub fn baseline_sp(data: &TrainData<'_>, eval_set: &SplitSet, config: &TrainConfig) -> Result<BaselineRun<SpNet>> {
    let mut cfg = config.clone();
    cfg.arch.per_modality_va = true;
    cfg.mode = TrainMode::Full;
    cfg.loss = with_terms(&config.loss, &[LossTerm::ImageVa, LossTerm::MusicVa]);
    let (model, history) = train(data, &cfg)?;
    let predictor = SpNet {
        model,
        scale: *data.scale,
    };
    let report = evaluate(&predictor, eval_set)?;
    Ok(BaselineRun {
        predictor,
        report,
        history,
    })
}

/// Fits the VA head on frozen branches with the two VA regression terms.
pub fn fit_va_head(
    model: ModelParams<f64>,
    data: &TrainData<'_>,
    config: &TrainConfig,
) -> Result<(ModelParams<f64>, TrainHistory)> {
    let mut cfg = config.clone();
    cfg.mode = TrainMode::Full;
    cfg.freeze_branches = true;
    cfg.seed = derive_seed(config.seed, &[tag("va_head")]);
    cfg.loss = with_terms(&config.loss, &[LossTerm::ImageVa, LossTerm::MusicVa]);
    train_from(model, data, &cfg, |_, _| Ok(()))
}

/// Similarity-regression network followed by a VA head fitted on its
/// frozen embeddings.
pub fn baseline_concat(
    data: &TrainData<'_>,
    eval_set: &SplitSet,
    config: &TrainConfig,
) -> Result<BaselineRun<ModelParams<f64>>> {
    let mut cfg = config.clone();
    cfg.mode = TrainMode::Full;
    cfg.loss = with_terms(&config.loss, &[LossTerm::Sim]);
    let (model, history) = train(data, &cfg)?;
    let (model, _) = fit_va_head(model, data, config)?;
    let report = evaluate(&model, eval_set)?;
    Ok(BaselineRun {
        predictor: model,
        report,
        history,
    })
}

/// Which loss families an ablation row trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationFlags {
    pub sim: bool,
    /// Both VA regression terms.
    pub va: bool,
    pub cfr: bool,
    pub cfm: bool,
    /// Both single-modal ratio terms.
    pub sfr: bool,
}

impl AblationFlags {
    pub const fn new(sim: bool, va: bool, cfr: bool, cfm: bool, sfr: bool) -> Self {
        Self { sim, va, cfr, cfm, sfr }
    }

    /// The five standard rows, in order.
    pub const STANDARD: [AblationFlags; 5] = [
        AblationFlags::new(true, false, false, false, false),
        AblationFlags::new(true, false, true, false, false),
        AblationFlags::new(true, false, true, true, false),
        AblationFlags::new(true, true, false, false, false),
        AblationFlags::new(true, true, true, true, true),
    ];

    pub fn terms(&self) -> Vec<LossTerm> {
        let mut t = Vec::new();
        let groups: [(bool, &[LossTerm]); 5] = [
            (self.cfr, &[LossTerm::Cfr]),
            (self.cfm, &[LossTerm::Cfm]),
            (self.sim, &[LossTerm::Sim]),
            (self.sfr, &[LossTerm::SfrImage, LossTerm::SfrMusic]),
            (self.va, &[LossTerm::ImageVa, LossTerm::MusicVa]),
        ];
        for (on, terms) in groups {
            if on {
                t.extend_from_slice(terms);
            }
        }
        t
    }

    pub fn loss_config(&self, base: &LossConfig) -> Result<LossConfig> {
        let terms = self.terms();
        if terms.is_empty() {
            return Err(Error::Config("ablation row enables no loss".into()));
        }
        Ok(with_terms(base, &terms))
    }
}

const FLAG_NAMES: [&str; 5] = ["sim", "va", "cfr", "cfm", "sfr"];

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on = [self.sim, self.va, self.cfr, self.cfm, self.sfr];
        let names: Vec<&str> = FLAG_NAMES.iter().zip(on).filter(|(_, o)| *o).map(|(n, _)| *n).collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

impl FromStr for AblationFlags {
    type Err = Error;

    /// `sim+cfr+cfm` style.
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = AblationFlags::new(false, false, false, false, false);
        for part in s.split('+').map(str::trim) {
            let slot = match part {
                "sim" => &mut flags.sim,
                "va" => &mut flags.va,
                "cfr" => &mut flags.cfr,
                "cfm" => &mut flags.cfm,
                "sfr" => &mut flags.sfr,
                other => return Err(Error::Config(format!("unknown ablation flag `{other}`"))),
            };
            *slot = true;
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub flags: AblationFlags,
    /// Metric-wise mean over seeds.
    pub report: EvalReport,
    pub per_seed: Vec<EvalReport>,
}

impl AblationRow {
    pub fn csv_header() -> String {
        format!("sim,va,cfr,cfm,sfr,seeds,{}", EvalReport::csv_header())
    }

    pub fn csv_row(&self) -> String {
        let f = self.flags;
        let mark = |b: bool| if b { "1" } else { "0" };
        format!(
            "{},{},{},{},{},{},{}",
            mark(f.sim),
            mark(f.va),
            mark(f.cfr),
            mark(f.cfm),
            mark(f.sfr),
            self.per_seed.len(),
            self.report.csv_row()
        )
    }
}

fn mean_report(reports: &[EvalReport]) -> EvalReport {
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let va = |m: &dyn Fn(&EvalReport) -> &VaMetrics| VaMetrics {
        valence_mse: avg(&|r| m(r).valence_mse),
        valence_mae: avg(&|r| m(r).valence_mae),
        arousal_mse: avg(&|r| m(r).arousal_mse),
        arousal_mae: avg(&|r| m(r).arousal_mae),
        count: m(&reports[0]).count,
    };
    EvalReport {
        split: reports[0].split.clone(),
        pairs: reports[0].pairs,
        sim_mse: avg(&|r| r.sim_mse),
        sim_mae: avg(&|r| r.sim_mae),
        image: va(&|r| &r.image),
        music: va(&|r| &r.music),
    }
}

/// Trains one model per row and seed, all with the same data and batching
/// seeds, and averages the held-out reports per row. Rows without the VA
/// family get a VA head fitted afterwards on their frozen branches.
pub fn run_ablation(
    data: &TrainData<'_>,
    eval_set: &SplitSet,
    rows: &[AblationFlags],
    seeds: &[u64],
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let configs = rows
        .iter()
        .map(|flags| {
            let mut cfg = config.clone();
            cfg.mode = TrainMode::Full;
            cfg.loss = flags.loss_config(&config.loss)?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let reports = jobs
        .par_iter()
        .map(|&(r, seed)| {
            let mut cfg = configs[r].clone();
            cfg.seed = seed;
            let (mut model, _) = train::<f64>(data, &cfg)?;
            if !rows[r].va {
                model = fit_va_head(model, data, &cfg)?.0;
            }
            evaluate(&model, eval_set)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows
        .iter()
        .zip(reports.chunks(seeds.len()))
        .map(|(&flags, per_seed)| AblationRow {
            flags,
            report: mean_report(per_seed),
            per_seed: per_seed.to_vec(),
        })
        .collect())
}
