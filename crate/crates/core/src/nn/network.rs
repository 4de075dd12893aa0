use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::Uniform;
use rand::Rng;

use super::layer::{LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;

/// Batch-norm running-statistics momentum (weight kept on the old value).
pub const BN_MOMENTUM: f64 = 0.9;
/// Variance floor added before the square root in batch norm.
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Params<T> {
    Affine {
        /// `input_dim x output_dim`
        weight: Array2<T>,
        bias: Array1<T>,
    },
    BatchNorm {
        gamma: Array1<T>,
        beta: Array1<T>,
        running_mean: Array1<T>,
        running_var: Array1<T>,
    },
    Stateless,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer<T> {
    pub(crate) spec: LayerSpec,
    pub(crate) params: Params<T>,
}

/// An ordered stack of layers with its parameters and batch-norm state.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub(crate) layers: Vec<Layer<T>>,
    version: u64,
}

/// Equality of layer specs and stored tensors; the internal parameter
/// version counter is ignored.
impl<T: PartialEq> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Affine { input: Array2<T> },
    BatchNorm { normalized: Array2<T>, inv_std: Array1<T>, batch_stats: bool },
    Relu { input: Array2<T> },
    Sigmoid { output: Array2<T> },
    /// Already scaled by `1 / (1 - rate)`; `None` in eval mode.
    Dropout { mask: Option<Array2<T>> },
}

/// Intermediates retained by [`Network::forward`] for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    version: u64,
    rows: usize,
    output_dim: usize,
}

impl<T> ForwardCache<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Per-feature batch variances of each train-mode batch norm layer.
    pub(crate) fn batch_variances(&self) -> impl Iterator<Item = Array1<T>> + '_
    where
        T: Scalar,
    {
        self.layers.iter().filter_map(|l| match l {
            LayerCache::BatchNorm { inv_std, batch_stats: true, .. } => {
                Some(inv_std.mapv(|s| (s * s).recip() - T::of(BN_EPSILON)))
            }
            _ => None,
        })
    }

    /// Inputs seen by each ReLU layer, in layer order.
    pub(crate) fn relu_inputs(&self) -> impl Iterator<Item = &Array2<T>> {
        self.layers.iter().filter_map(|l| match l {
            LayerCache::Relu { input } => Some(input),
            _ => None,
        })
    }
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad<T> {
    Affine { weight: Array2<T>, bias: Array1<T> },
    BatchNorm { gamma: Array1<T>, beta: Array1<T> },
    None,
}

/// Parameter gradients for a whole [`Network`], layer-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match &l.params {
                Params::Affine { weight, bias } => LayerGrad::Affine {
                    weight: Array2::zeros(weight.raw_dim()),
                    bias: Array1::zeros(bias.raw_dim()),
                },
                Params::BatchNorm { gamma, beta, .. } => LayerGrad::BatchNorm {
                    gamma: Array1::zeros(gamma.raw_dim()),
                    beta: Array1::zeros(beta.raw_dim()),
                },
                Params::Stateless => LayerGrad::None,
            })
            .collect();
        Self { layers }
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (LayerGrad::Affine { weight, bias }, LayerGrad::Affine { weight: w, bias: c }) => {
                    *weight += w;
                    *bias += c;
                }
                (LayerGrad::BatchNorm { gamma, beta }, LayerGrad::BatchNorm { gamma: g, beta: c }) => {
                    *gamma += g;
                    *beta += c;
                }
                _ => {}
            }
        }
    }

    /// Named flat views of every gradient tensor.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerGrad::Affine { weight, bias } => {
                    out.push((format!("{i}.weight"), weight.as_slice().expect("contiguous")));
                    out.push((format!("{i}.bias"), bias.as_slice().expect("contiguous")));
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push((format!("{i}.gamma"), gamma.as_slice().expect("contiguous")));
                    out.push((format!("{i}.beta"), beta.as_slice().expect("contiguous")));
                }
                LayerGrad::None => {}
            }
        }
        out
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_finite<T: Scalar>(what: &str, a: &Array2<T>) -> Result<()> {
    match a.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} (entry {i})"))),
        None => Ok(()),
    }
}

impl<T: Scalar> Network<T> {
    /// Builds a network from `specs` with seeded Glorot-uniform affine
    /// weights, zero biases, unit batch-norm scale and zero shift.
    pub fn new(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if i > 0 && specs[i - 1].output_dim != s.input_dim {
                return Err(Error::Config(format!(
                    "layer {} (`{}`) does not chain onto layer {} (`{}`)",
                    i,
                    s,
                    i - 1,
                    specs[i - 1]
                )));
            }
        }
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                let params = match spec.kind {
                    LayerKind::Affine => {
                        let a = (6.0 / (spec.input_dim + spec.output_dim) as f64).sqrt();
                        let mut rng = rng_for(seed, &[i as u64]);
                        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
                        Params::Affine {
                            weight: Array2::from_shape_simple_fn((spec.input_dim, spec.output_dim), || {
                                T::of(rng.sample(dist))
                            }),
                            bias: Array1::zeros(spec.output_dim),
                        }
                    }
                    LayerKind::BatchNorm => Params::BatchNorm {
                        gamma: Array1::ones(spec.output_dim),
                        beta: Array1::zeros(spec.output_dim),
                        running_mean: Array1::zeros(spec.output_dim),
                        running_var: Array1::ones(spec.output_dim),
                    },
                    _ => Params::Stateless,
                };
                Layer { spec, params }
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_dim
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input columns".into(),
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                context: "network input rows".into(),
                expected: 1,
                actual: 0,
            });
        }
        Ok(())
    }

    /// Runs the stack on `x` (rows are samples).
    ///
    /// Train mode normalizes with batch statistics, folds them into the
    /// running estimates, and applies a dropout mask drawn from
    /// `dropout_seed`. Eval mode uses running statistics and no dropout.
    pub fn forward(
        &mut self,
        x: ArrayView2<T>,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(&x)?;
        let rows = x.nrows();
        let mut current = x.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        let momentum = T::of(BN_MOMENTUM);
        let eps = T::of(BN_EPSILON);
        for (index, layer) in self.layers.iter_mut().enumerate() {
            let (next, cache) = match (&layer.spec.kind, &mut layer.params) {
                (LayerKind::Affine, Params::Affine { weight, bias }) => {
                    let out = current.dot(&*weight) + &*bias;
                    (out, LayerCache::Affine { input: current })
                }
                (
                    LayerKind::BatchNorm,
                    Params::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => {
                    let (mean, var, batch_stats) = if mode == Mode::Train {
                        if rows < 2 {
                            return Err(Error::BatchTooSmall(rows));
                        }
                        let n = T::of(rows as f64);
                        let mean = current.sum_axis(Axis(0)) / n;
                        let centered = &current - &mean;
                        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                        let unbiased = &var * (n / (n - T::one()));
                        Zip::from(&mut *running_mean).and(&mean).for_each(|r, &m| {
                            *r = momentum * *r + (T::one() - momentum) * m;
                        });
                        Zip::from(&mut *running_var).and(&unbiased).for_each(|r, &v| {
                            *r = momentum * *r + (T::one() - momentum) * v;
                        });
                        (mean, var, true)
                    } else {
                        (running_mean.clone(), running_var.clone(), false)
                    };
                    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
                    let normalized = (&current - &mean) * &inv_std;
                    let out = &normalized * &*gamma + &*beta;
                    (
                        out,
                        LayerCache::BatchNorm {
                            normalized,
                            inv_std,
                            batch_stats,
                        },
                    )
                }
                (LayerKind::Relu, _) => {
                    let out = current.mapv(|v| if v > T::zero() { v } else { T::zero() });
                    (out, LayerCache::Relu { input: current })
                }
                (LayerKind::Sigmoid, _) => {
                    let out = current.mapv(sigmoid);
                    (out.clone(), LayerCache::Sigmoid { output: out })
                }
                (LayerKind::Dropout { rate }, _) => {
                    if mode == Mode::Train && *rate > 0.0 {
                        let mut rng = rng_for(dropout_seed, &[index as u64]);
                        let keep = T::of(1.0 / (1.0 - rate));
                        let mask = Array2::from_shape_simple_fn(current.raw_dim(), || {
                            if rng.random::<f64>() < *rate {
                                T::zero()
                            } else {
                                keep
                            }
                        });
                        (&current * &mask, LayerCache::Dropout { mask: Some(mask) })
                    } else {
                        (current, LayerCache::Dropout { mask: None })
                    }
                }
                (kind, _) => unreachable!("layer {index} kind {kind:?} without matching parameters"),
            };
            current = next;
            caches.push(cache);
        }
        check_finite("network output", &current)?;
        let output_dim = current.ncols();
        Ok((
            current,
            ForwardCache {
                layers: caches,
                version: self.version,
                rows,
                output_dim,
            },
        ))
    }

    /// Eval-mode forward pass that leaves the network untouched.
    pub fn predict(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let eps = T::of(BN_EPSILON);
        let mut current = x.to_owned();
        for layer in &self.layers {
            current = match (&layer.spec.kind, &layer.params) {
                (LayerKind::Affine, Params::Affine { weight, bias }) => current.dot(weight) + bias,
                (
                    LayerKind::BatchNorm,
                    Params::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                ) => {
                    let inv_std = running_var.mapv(|v| T::one() / (v + eps).sqrt());
                    (current - running_mean) * &inv_std * gamma + beta
                }
                (LayerKind::Relu, _) => current.mapv(|v| if v > T::zero() { v } else { T::zero() }),
                (LayerKind::Sigmoid, _) => current.mapv(sigmoid),
                (LayerKind::Dropout { .. }, _) => current,
                (kind, _) => unreachable!("kind {kind:?} without matching parameters"),
            };
        }
        check_finite("network output", &current)?;
        Ok(current)
    }

    /// Reverse pass for the forward call that produced `cache`.
    ///
    /// Returns the gradient with respect to the input rows and to every
    /// parameter, exact for the cached dropout mask and batch statistics.
    pub fn backward(&self, cache: &ForwardCache<T>, output_grad: ArrayView2<T>) -> Result<(Array2<T>, Gradients<T>)> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {}, network is at {}",
                cache.version, self.version
            )));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache has {} layers, network has {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        if output_grad.dim() != (cache.rows, cache.output_dim) {
            return Err(Error::ShapeMismatch {
                tensor: "output gradient".into(),
                expected: vec![cache.rows, cache.output_dim],
                actual: output_grad.shape().to_vec(),
            });
        }
        let mut grad = output_grad.to_owned();
        let mut grads = vec![LayerGrad::None; self.layers.len()];
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            grad = match (&layer.params, lc) {
                (Params::Affine { weight, .. }, LayerCache::Affine { input }) => {
                    grads[i] = LayerGrad::Affine {
                        // the transposed product can come back column-major
                        weight: input.t().dot(&grad).as_standard_layout().into_owned(),
                        bias: grad.sum_axis(Axis(0)),
                    };
                    grad.dot(&weight.t())
                }
                (
                    Params::BatchNorm { gamma, .. },
                    LayerCache::BatchNorm {
                        normalized,
                        inv_std,
                        batch_stats,
                    },
                ) => {
                    grads[i] = LayerGrad::BatchNorm {
                        gamma: (&grad * normalized).sum_axis(Axis(0)),
                        beta: grad.sum_axis(Axis(0)),
                    };
                    let dxhat = &grad * gamma;
                    if *batch_stats {
                        let n = T::of(cache.rows as f64);
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * normalized).sum_axis(Axis(0));
                        let inner = dxhat * n - &sum_d - &(normalized * &sum_dx);
                        inner * &(inv_std / n)
                    } else {
                        dxhat * inv_std
                    }
                }
                (_, LayerCache::Relu { input }) => {
                    Zip::from(&mut grad).and(input).for_each(|g, &x| {
                        if x <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    grad
                }
                (_, LayerCache::Sigmoid { output }) => {
                    Zip::from(&mut grad).and(output).for_each(|g, &s| *g *= s * (T::one() - s));
                    grad
                }
                (_, LayerCache::Dropout { mask }) => match mask {
                    Some(m) => grad * m,
                    None => grad,
                },
                _ => {
                    return Err(Error::StaleCache(format!("layer {i} cache does not match its kind")));
                }
            };
        }
        Ok((grad, Gradients { layers: grads }))
    }

    /// `p <- p - lr * g` over every parameter. All gradients are checked
    /// for finiteness before anything is modified.
    pub fn apply_sgd(&mut self, grads: &Gradients<T>, lr: T) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                tensor: "gradient layer list".into(),
                expected: vec![self.layers.len()],
                actual: vec![grads.layers.len()],
            });
        }
        for (name, g) in grads.tensors() {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    network: String::new(),
                    tensor: name,
                    index,
                });
            }
        }
        for (i, (layer, g)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            match (&mut layer.params, g) {
                (Params::Affine { weight, bias }, LayerGrad::Affine { weight: gw, bias: gb }) => {
                    check_shape(&format!("{i}.weight"), weight.shape(), gw.shape())?;
                    weight.scaled_add(-lr, gw);
                    bias.scaled_add(-lr, gb);
                }
                (Params::BatchNorm { gamma, beta, .. }, LayerGrad::BatchNorm { gamma: gg, beta: gb }) => {
                    check_shape(&format!("{i}.gamma"), gamma.shape(), gg.shape())?;
                    gamma.scaled_add(-lr, gg);
                    beta.scaled_add(-lr, gb);
                }
                (Params::Stateless, LayerGrad::None) => {}
                _ => {
                    return Err(Error::ShapeMismatch {
                        tensor: format!("{i}"),
                        expected: vec![],
                        actual: vec![],
                    })
                }
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Named flat views of every stored tensor, including running
    /// statistics, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match &l.params {
                Params::Affine { weight, bias } => {
                    out.push((format!("{i}.weight"), weight.shape().to_vec(), weight.as_slice().expect("contiguous")));
                    out.push((format!("{i}.bias"), bias.shape().to_vec(), bias.as_slice().expect("contiguous")));
                }
                Params::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    for (n, t) in [
                        ("gamma", gamma),
                        ("beta", beta),
                        ("running_mean", running_mean),
                        ("running_var", running_var),
                    ] {
                        out.push((format!("{i}.{n}"), t.shape().to_vec(), t.as_slice().expect("contiguous")));
                    }
                }
                Params::Stateless => {}
            }
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [T])> {
        self.version += 1;
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            match &mut l.params {
                Params::Affine { weight, bias } => {
                    out.push((format!("{i}.weight"), weight.shape().to_vec(), weight.as_slice_mut().expect("contiguous")));
                    out.push((format!("{i}.bias"), bias.shape().to_vec(), bias.as_slice_mut().expect("contiguous")));
                }
                Params::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    for (n, t) in [
                        ("gamma", gamma),
                        ("beta", beta),
                        ("running_mean", running_mean),
                        ("running_var", running_var),
                    ] {
                        let shape = t.shape().to_vec();
                        out.push((format!("{i}.{n}"), shape, t.as_slice_mut().expect("contiguous")));
                    }
                }
                Params::Stateless => {}
            }
        }
        out
    }

    /// Copies this network into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv1 = |a: &Array1<T>| a.mapv(|v| U::of(v.to_f64_lossy()));
        let conv2 = |a: &Array2<T>| a.mapv(|v| U::of(v.to_f64_lossy()));
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                spec: l.spec,
                params: match &l.params {
                    Params::Affine { weight, bias } => Params::Affine {
                        weight: conv2(weight),
                        bias: conv1(bias),
                    },
                    Params::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } => Params::BatchNorm {
                        gamma: conv1(gamma),
                        beta: conv1(beta),
                        running_mean: conv1(running_mean),
                        running_var: conv1(running_var),
                    },
                    Params::Stateless => Params::Stateless,
                },
            })
            .collect();
        Network { layers, version: 0 }
    }

    /// Sets one affine layer's weight and bias (testing and oracle models).
    pub fn set_affine(&mut self, layer: usize, weight: Array2<T>, bias: Array1<T>) -> Result<()> {
        let l = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::InvalidIndex(format!("layer {layer}")))?;
        match &mut l.params {
            Params::Affine { weight: w, bias: b } => {
                check_shape(&format!("{layer}.weight"), w.shape(), weight.shape())?;
                check_shape(&format!("{layer}.bias"), b.shape(), bias.shape())?;
                *w = weight;
                *b = bias;
                self.version += 1;
                Ok(())
            }
            _ => Err(Error::InvalidIndex(format!("layer {layer} is not affine"))),
        }
    }
}

fn check_shape(name: &str, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            tensor: name.to_string(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}
