//! Central finite-difference checks of every loss term and layer kind.

use ndarray::{Array1, Array2};
use rand::distr::Uniform;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::Modality;
use crate::error::Result;
use crate::losses::{self, CrossBatch, GradTarget, LossConfig, LossReport, SfrTriple};
use crate::nn::{LayerSpec, Mode, Network};
use crate::seed::{derive_seed, rng_for, tag};
use crate::va::{SigmaProvenance, SimilarityScale, VaPoint};

pub const FD_STEP: f64 = 1e-5;
/// Gradient norms below this are compared in absolute terms.
pub const NORM_FLOOR: f64 = 1e-3;
pub const MAX_BATCH: usize = 8;
pub const MAX_DIM: usize = 16;

/// Worst relative error seen for one check across all trials.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub worst_trial: usize,
}

impl CheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(NORM_FLOOR);
    diff / scale
}

/// Central differences of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<VaPoint<f64>> {
    (0..n)
        .map(|_| VaPoint::new(rng.random::<f64>(), rng.random::<f64>()).expect("unit interval"))
        .collect()
}

fn other_than(rng: &mut ChaCha8Rng, n: usize, exclude: &[usize]) -> usize {
    loop {
        let j = rng.random_range(0..n);
        if !exclude.contains(&j) {
            return j;
        }
    }
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn grad_or_zero(r: &LossReport<f64>, target: GradTarget, shape: (usize, usize)) -> Vec<f64> {
    r.grad(target).map(flat).unwrap_or_else(|| vec![0.0; shape.0 * shape.1])
}

/// Checks a loss of two row-aligned matrices against its reported gradients.
fn check_pair_loss(
    a: &Array2<f64>,
    b: &Array2<f64>,
    targets: [GradTarget; 2],
    eval: impl Fn(&Array2<f64>, &Array2<f64>) -> Result<LossReport<f64>>,
) -> Result<f64> {
    let report = eval(a, b)?;
    let mut analytic = grad_or_zero(&report, targets[0], a.dim());
    analytic.extend(grad_or_zero(&report, targets[1], b.dim()));
    let split = a.len();
    let mut x = flat(a);
    x.extend(flat(b));
    let mut err = None;
    let numeric = central_difference(
        |p| {
            let pa = Array2::from_shape_vec(a.dim(), p[..split].to_vec()).expect("shape");
            let pb = Array2::from_shape_vec(b.dim(), p[split..].to_vec()).expect("shape");
            match eval(&pa, &pb) {
                Ok(r) => r.total,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &x,
        FD_STEP,
    );
    if let Some(e) = err {
        return Err(e);
    }
    Ok(relative_error(&analytic, &numeric))
}

fn trial_cfr(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.random_range(2..=MAX_BATCH);
    let d = rng.random_range(2..=MAX_DIM);
    let img = normal(rng, (b, d));
    let mus = normal(rng, (b, d));
    let li = labels(rng, b);
    let lm = labels(rng, b);
    let scale = SimilarityScale::new(rng.random_range(0.2..0.8), SigmaProvenance::Exact)?;
    let pair_sim: Vec<f64> = (0..b).map(|i| scale.similarity_between(&li[i], &lm[i])).collect();
    let ni: Vec<usize> = (0..b).map(|i| other_than(rng, b, &[i])).collect();
    let nm: Vec<usize> = (0..b).map(|i| other_than(rng, b, &[i])).collect();
    let cfg = LossConfig::default();
    check_pair_loss(&img, &mus, [GradTarget::ImageEmbedding, GradTarget::MusicEmbedding], |x, y| {
        let batch = CrossBatch {
            image_emb: x.view(),
            music_emb: y.view(),
            pair_sim: &pair_sim,
            image_labels: &li,
            music_labels: &lm,
            scale: &scale,
        };
        losses::cfr_loss(&batch, &ni, &nm, &cfg)
    })
}

fn trial_cfm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.random_range(1..=MAX_BATCH);
    let d = rng.random_range(2..=MAX_DIM);
    let cfg = LossConfig {
        alpha: rng.random_range(0.5..4.0),
        ..LossConfig::default()
    };
    // keep every pair clear of the hinge so the stencil never straddles it
    let (img, mus) = loop {
        let img = normal(rng, (b, d)) * 0.5;
        let mus = normal(rng, (b, d)) * 0.5;
        let clear = (0..b).all(|i| {
            let n = (&img.row(i) - &mus.row(i)).mapv(|v| v * v).sum().sqrt();
            (n - cfg.alpha).abs() > 1e-3
        });
        if clear {
            break (img, mus);
        }
    };
    check_pair_loss(&img, &mus, [GradTarget::ImageEmbedding, GradTarget::MusicEmbedding], |x, y| {
        losses::cfm_loss(x.view(), y.view(), &cfg)
    })
}

fn trial_sfr(rng: &mut ChaCha8Rng, modality: Modality) -> Result<f64> {
    let b = rng.random_range(3..=MAX_BATCH);
    let d = rng.random_range(2..=MAX_DIM);
    let emb = normal(rng, (b, d));
    let lab = labels(rng, b);
    let triples: Vec<SfrTriple> = (0..b)
        .map(|anchor| {
            let near = other_than(rng, b, &[anchor]);
            let far = other_than(rng, b, &[anchor, near]);
            SfrTriple { anchor, near, far }
        })
        .collect();
    let cfg = LossConfig::default();
    let target = GradTarget::embedding(modality);
    // the second matrix is an unused placeholder
    let dummy = Array2::zeros((0, d));
    check_pair_loss(&emb, &dummy, [target, GradTarget::SimPrediction], |x, _| {
        losses::sfr_loss(modality, x.view(), &lab, &triples, &cfg)
    })
}

fn trial_sim(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.random_range(1..=MAX_BATCH);
    let pred = Array2::from_shape_simple_fn((b, 1), || rng.random::<f64>());
    let truth: Array1<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let dummy = Array2::zeros((0, 1));
    check_pair_loss(&pred, &dummy, [GradTarget::SimPrediction, GradTarget::ImageEmbedding], |x, _| {
        losses::sim_mse_loss(x.column(0), truth.view())
    })
}

fn trial_va(rng: &mut ChaCha8Rng, modality: Modality) -> Result<f64> {
    let b = rng.random_range(1..=MAX_BATCH);
    let pred = Array2::from_shape_simple_fn((b, 2), || rng.random::<f64>());
    let truth = Array2::from_shape_simple_fn((b, 2), || rng.random::<f64>());
    let dummy = Array2::zeros((0, 2));
    check_pair_loss(&pred, &dummy, [GradTarget::va_prediction(modality), GradTarget::SimPrediction], |x, _| {
        losses::va_mse_loss(modality, x.view(), truth.view())
    })
}

/// Projects a single-layer network's output on a fixed random direction
/// and compares input and parameter gradients of that scalar.
fn check_layer(rng: &mut ChaCha8Rng, spec: LayerSpec, mode: Mode) -> Result<f64> {
    check_stack(rng, &[spec], mode)
}

fn check_stack(rng: &mut ChaCha8Rng, specs: &[LayerSpec], mode: Mode) -> Result<f64> {
    let b = rng.random_range(2..=MAX_BATCH);
    // redraw network and input until no ReLU input sits within reach of its
    // kink and no train-mode batch norm column has a variance near epsilon,
    // where the curvature swamps a central difference at FD_STEP
    let (net, x, dropout_seed, fwd, cache) = loop {
        let mut net = Network::<f64>::new(specs, rng.next_u64())?;
        // move running statistics and affine parameters off their defaults
        for (_, _, t) in net.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.sample(Uniform::new(0.1, 0.5).expect("range"));
            }
        }
        let x = normal(rng, (b, net.input_dim()));
        let dropout_seed = rng.next_u64();
        let mut fwd = net.clone();
        let (_, cache) = fwd.forward(x.view(), mode, dropout_seed)?;
        let smooth = cache.relu_inputs().all(|z| z.iter().all(|v| v.abs() > 1e-3))
            && cache.batch_variances().all(|var| var.iter().all(|&v| v > 1e-3));
        if smooth {
            break (net, x, dropout_seed, fwd, cache);
        }
    };
    let output_dim = net.output_dim();
    let proj = normal(rng, (b, output_dim));

    let (gx, grads) = fwd.backward(&cache, proj.view())?;

    let objective = |n: &Network<f64>, input: &Array2<f64>| -> f64 {
        let mut n = n.clone();
        match n.forward(input.view(), mode, dropout_seed) {
            Ok((y, _)) => (&y * &proj).sum(),
            Err(_) => f64::NAN,
        }
    };

    let mut analytic = flat(&gx);
    let mut numeric = central_difference(
        |p| objective(&net, &Array2::from_shape_vec(x.dim(), p.to_vec()).expect("shape")),
        &flat(&x),
        FD_STEP,
    );
    for (name, g) in grads.tensors() {
        analytic.extend_from_slice(g);
        let base: Vec<f64> = net
            .tensors()
            .into_iter()
            .find(|(n, _, _)| *n == name)
            .map(|(_, _, t)| t.to_vec())
            .expect("gradient names match tensors");
        numeric.extend(central_difference(
            |p| {
                let mut probe = net.clone();
                for (n, _, t) in probe.tensors_mut() {
                    if n == name {
                        t.copy_from_slice(p);
                    }
                }
                objective(&probe, &x)
            },
            &base,
            FD_STEP,
        ));
    }
    Ok(relative_error(&analytic, &numeric))
}

fn layer_trial(rng: &mut ChaCha8Rng, which: &str) -> Result<f64> {
    let i = rng.random_range(1..=MAX_DIM);
    let o = rng.random_range(1..=MAX_DIM);
    match which {
        "affine" => check_layer(rng, LayerSpec::affine(i, o), Mode::Train),
        "batch_norm" => check_layer(rng, LayerSpec::batch_norm(i), Mode::Train),
        "batch_norm_eval" => check_layer(rng, LayerSpec::batch_norm(i), Mode::Eval),
        "relu" => check_layer(rng, LayerSpec::relu(i), Mode::Train),
        "sigmoid" => check_layer(rng, LayerSpec::sigmoid(i), Mode::Train),
        "dropout" => {
            let rate = rng.random_range(0.1..0.7);
            check_layer(rng, LayerSpec::dropout(i, rate), Mode::Train)
        }
        "stack" => {
            // a branch followed by a predictor head, random widths
            let hidden = rng.random_range(1..=MAX_DIM);
            let embed = rng.random_range(1..=MAX_DIM);
            let mut specs = crate::nn::branch_specs(i, &[hidden], embed);
            specs.extend(crate::nn::predictor_specs(embed, &[o], 2, rng.random_range(0.0..0.6)));
            check_stack(rng, &specs, Mode::Train)
        }
        other => unreachable!("unknown layer check {other}"),
    }
}

pub const LOSS_CHECKS: [&str; 7] = ["cfr", "cfm", "sfr_i", "sfr_m", "sim", "iva", "mva"];
pub const LAYER_CHECKS: [&str; 7] = [
    "affine",
    "batch_norm",
    "batch_norm_eval",
    "relu",
    "sigmoid",
    "dropout",
    "stack",
];

fn run_trial(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    match name {
        "cfr" => trial_cfr(rng),
        "cfm" => trial_cfm(rng),
        "sfr_i" => trial_sfr(rng, Modality::Image),
        "sfr_m" => trial_sfr(rng, Modality::Music),
        "sim" => trial_sim(rng),
        "iva" => trial_va(rng, Modality::Image),
        "mva" => trial_va(rng, Modality::Music),
        layer => layer_trial(rng, layer),
    }
}

/// Runs `trials` seeded random batches for one named check.
pub fn check(name: &str, seed: u64, trials: usize) -> Result<CheckResult> {
    let mut worst = (0.0, 0);
    for t in 0..trials {
        let mut rng = rng_for(derive_seed(seed, &[tag(name)]), &[t as u64]);
        let e = run_trial(name, &mut rng)?;
        // NaN must surface as a failure
        if !(e <= worst.0) {
            worst = (e, t);
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        trials,
        max_rel_error: worst.0,
        worst_trial: worst.1,
    })
}

/// Every loss check followed by every layer check.
pub fn check_all(seed: u64, trials: usize) -> Result<Vec<CheckResult>> {
    LOSS_CHECKS
        .iter()
        .chain(LAYER_CHECKS.iter())
        .map(|name| check(name, seed, trials))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_of_a_cubic() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert!(relative_error(&[1e-9], &[0.0]) < 1e-5);
    }

    #[test]
    fn every_check_passes_a_few_trials() {
        for r in check_all(7, 5).unwrap() {
            assert!(r.passed(1e-6), "{r:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        let g = central_difference(|x| x[0] * x[0], &[3.0], FD_STEP);
        assert!(relative_error(&[5.0], &g) > 0.1);
    }
}
