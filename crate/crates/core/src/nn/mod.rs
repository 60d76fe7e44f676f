//! Small dense-network kernel: PReLU/linear layers, inverted dropout, exact
//! backpropagation and plain or momentum SGD.
//!
//! Parameters are held as `f64`. Models are quantized to `f32`-representable
//! values at init and after training so the `f32` snapshot format
//! round-trips them bitwise.

mod dropout;
pub mod gradcheck;
pub mod optim;
pub mod snapshot;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheckReport, Objective, OutputObjective};
pub use optim::{Optimizer, OptimizerKind, TrainConfig};
pub use snapshot::ModelSnapshot;

pub const DEFAULT_PRELU_SLOPE: f64 = 0.25;

/// Parametric rectifier: identity for `x >= 0`, slope `a` below zero.
#[inline]
pub fn prelu(x: f64, a: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        a * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Linear,
    PRelu,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Linear,
    /// One learned slope per output unit.
    PRelu(Array1<f64>),
}

impl Activation {
    pub fn kind(&self) -> ActivationKind {
        match self {
            Activation::Linear => ActivationKind::Linear,
            Activation::PRelu(_) => ActivationKind::PRelu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out_dim x in_dim`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        let out = weights.nrows();
        if bias.len() != out {
            return Err(Error::DimensionMismatch {
                expected: out,
                got: bias.len(),
            });
        }
        if let Activation::PRelu(slopes) = &activation {
            if slopes.len() != out {
                return Err(Error::DimensionMismatch {
                    expected: out,
                    got: slopes.len(),
                });
            }
            if slopes.iter().any(|a| !a.is_finite()) {
                return Err(Error::InvalidArgument("PReLU slopes must be finite".into()));
            }
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero bias, slopes 0.25.
    pub fn init(in_dim: usize, out_dim: usize, kind: ActivationKind, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-limit..limit));
        let activation = match kind {
            ActivationKind::Linear => Activation::Linear,
            ActivationKind::PRelu => {
                Activation::PRelu(Array1::from_elem(out_dim, DEFAULT_PRELU_SLOPE))
            }
        };
        Self {
            weights,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn param_count(&self) -> usize {
        let slopes = match &self.activation {
            Activation::PRelu(s) => s.len(),
            Activation::Linear => 0,
        };
        self.weights.len() + self.bias.len() + slopes
    }
}

/// Whether dropout masks are drawn. Masks are a pure function of
/// `(seed, step, layer, row, unit)`, so a train-mode pass is reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Infer,
    Train { seed: u64, step: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    /// Applied after every hidden layer in train mode.
    pub dropout_prob: f64,
}

/// Cached intermediate values of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    output: Array2<f64>,
}

impl ForwardPass {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Pre-activation values of layer `l`, one row per sample.
    pub fn pre_activation(&self, l: usize) -> &Array2<f64> {
        &self.pre[l]
    }

    /// Post-activation (post-dropout) output of each layer.
    pub fn layer_outputs(&self) -> Vec<&Array2<f64>> {
        self.inputs[1..]
            .iter()
            .chain(std::iter::once(&self.output))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub slopes: Option<Array1<f64>>,
}

/// Gradients shaped like the parameters of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    slopes: match &l.activation {
                        Activation::PRelu(s) => Some(Array1::zeros(s.len())),
                        Activation::Linear => None,
                    },
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
            if let Some(s) = &mut l.slopes {
                *s *= factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
            if let (Some(x), Some(y)) = (&mut a.slopes, &b.slopes) {
                *x += y;
            }
        }
    }

    /// Flat accessor using the same ordering as [`Mlp::param`].
    pub fn get(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            if index < l.weights.len() {
                let cols = l.weights.ncols();
                return l.weights[[index / cols, index % cols]];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return l.bias[index];
            }
            index -= l.bias.len();
            if let Some(s) = &l.slopes {
                if index < s.len() {
                    return s[index];
                }
                index -= s.len();
            }
        }
        panic!("gradient index out of range");
    }
}

pub struct Backward {
    pub grads: Gradients,
    /// Gradient with respect to the batch input.
    pub input: Array2<f64>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>, dropout_prob: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&dropout_prob) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {dropout_prob} outside [0, 1)"
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                });
            }
        }
        Ok(Self {
            layers,
            dropout_prob,
        })
    }

    /// Builds a seeded network with the given layer widths, e.g.
    /// `[1024, 512, 256, 10]`. Hidden layers use `hidden`, the last `output`.
    pub fn init(
        dims: &[usize],
        hidden: ActivationKind,
        output: ActivationKind,
        dropout_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let kind = if i + 1 == n { output } else { hidden };
                DenseLayer::init(dims[i], dims[i + 1], kind, &mut rng)
            })
            .collect();
        let mut net = Mlp::new(layers, dropout_prob)?;
        net.quantize_f32();
        Ok(net)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>, mode: Mode) -> Result<ForwardPass> {
        if x.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: x.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weights.t());
            z += &layer.bias;
            let mut a = z.clone();
            if let Activation::PRelu(slopes) = &layer.activation {
                for mut row in a.rows_mut() {
                    for (v, &s) in row.iter_mut().zip(slopes) {
                        *v = prelu(*v, s);
                    }
                }
            }
            let mask = match mode {
                Mode::Train { seed, step } if l < last && self.dropout_prob > 0.0 => {
                    let m = dropout::mask(seed, step, l, a.nrows(), a.ncols(), self.dropout_prob);
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            inputs.push(std::mem::replace(&mut current, a));
            pre.push(z);
            masks.push(mask);
        }
        Ok(ForwardPass {
            inputs,
            pre,
            masks,
            output: current,
        })
    }

    /// Single-sample forward pass returning every layer's activation.
    pub fn forward(&self, x: &[f64], mode: Mode) -> Result<Vec<Vec<f64>>> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let pass = self.forward_batch(view, mode)?;
        Ok(pass
            .layer_outputs()
            .into_iter()
            .map(|a| a.row(0).to_vec())
            .collect())
    }

    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Infer)?.pop().expect("at least one layer"))
    }

    pub fn infer_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_batch(x, Mode::Infer)?.output)
    }

    /// Backpropagates `upstream` (dLoss/dOutput, one row per sample) through
    /// a cached forward pass.
    pub fn backward(&self, pass: &ForwardPass, upstream: ArrayView2<f64>) -> Result<Backward> {
        if upstream.dim() != pass.output.dim() {
            return Err(Error::InvalidArgument(format!(
                "upstream gradient shape {:?} does not match output {:?}",
                upstream.dim(),
                pass.output.dim()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if let Some(m) = &pass.masks[l] {
                g *= m;
            }
            let z = &pass.pre[l];
            let slopes_grad = match &layer.activation {
                Activation::Linear => None,
                Activation::PRelu(slopes) => {
                    let mut ds = Array1::<f64>::zeros(slopes.len());
                    for (mut g_row, z_row) in g.rows_mut().into_iter().zip(z.rows()) {
                        for (j, (gv, &zv)) in g_row.iter_mut().zip(z_row).enumerate() {
                            if zv < 0.0 {
                                ds[j] += *gv * zv;
                                *gv *= slopes[j];
                            }
                        }
                    }
                    Some(ds)
                }
            };
            let weights = g.t().dot(&pass.inputs[l]);
            let bias = g.sum_axis(Axis(0));
            let next = g.dot(&layer.weights);
            layers.push(LayerGrads {
                weights,
                bias,
                slopes: slopes_grad,
            });
            g = next;
        }
        layers.reverse();
        Ok(Backward {
            grads: Gradients { layers },
            input: g,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, ParamSlot) {
        for (li, l) in self.layers.iter().enumerate() {
            if index < l.weights.len() {
                let cols = l.weights.ncols();
                return (li, ParamSlot::Weight(index / cols, index % cols));
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return (li, ParamSlot::Bias(index));
            }
            index -= l.bias.len();
            if let Activation::PRelu(s) = &l.activation {
                if index < s.len() {
                    return (li, ParamSlot::Slope(index));
                }
                index -= s.len();
            }
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access: per layer, weights (row-major), bias, slopes.
    pub fn param(&self, index: usize) -> f64 {
        let (l, slot) = self.locate(index);
        let layer = &self.layers[l];
        match slot {
            ParamSlot::Weight(r, c) => layer.weights[[r, c]],
            ParamSlot::Bias(i) => layer.bias[i],
            ParamSlot::Slope(i) => match &layer.activation {
                Activation::PRelu(s) => s[i],
                Activation::Linear => unreachable!(),
            },
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (l, slot) = self.locate(index);
        let layer = &mut self.layers[l];
        match slot {
            ParamSlot::Weight(r, c) => layer.weights[[r, c]] = value,
            ParamSlot::Bias(i) => layer.bias[i] = value,
            ParamSlot::Slope(i) => match &mut layer.activation {
                Activation::PRelu(s) => s[i] = value,
                Activation::Linear => unreachable!(),
            },
        }
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(q);
            l.bias.iter_mut().for_each(q);
            if let Activation::PRelu(s) = &mut l.activation {
                s.iter_mut().for_each(q);
            }
        }
    }

    /// Copies the selected rows of `matrix` into a new matrix.
    pub(crate) fn gather_rows(matrix: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), matrix.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.slice_mut(s![i, ..]).assign(&matrix.row(r));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum ParamSlot {
    Weight(usize, usize),
    Bias(usize),
    Slope(usize),
}

/// Numerically stable softmax of one row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
