//! Central finite-difference verification of analytic gradients.

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Activation, Gradients, Mlp, Mode};

/// A scalar loss over a network's parameters.
pub trait Objective {
    fn loss(&self, net: &Mlp) -> f64;

    fn gradient(&self, net: &Mlp) -> Gradients;

    /// Piecewise regime of the loss (which side of every kink the inputs
    /// sit on). Probes whose perturbation changes the regime straddle a
    /// non-differentiable point and are skipped.
    fn regime(&self, _net: &Mlp) -> Vec<bool> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probed: usize,
    pub skipped_kinks: usize,
    /// Flat index of the parameter with the largest error.
    pub worst_param: Option<usize>,
}

/// Compares analytic gradients against `(L(p+eps) - L(p-eps)) / 2eps` on
/// `probes` parameters drawn without replacement (all of them if `probes`
/// exceeds the parameter count). Relative error is
/// `|analytic - numeric| / max(|numeric|, 1e-8)`.
pub fn finite_diff_check(
    net: &Mlp,
    objective: &dyn Objective,
    probes: usize,
    eps: f64,
    seed: u64,
) -> GradCheckReport {
    let analytic = objective.gradient(net);
    let total = net.param_count();
    let indices: Vec<usize> = if probes >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, total, probes).into_vec();
        v.sort_unstable();
        v
    };

    let mut work = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probed: 0,
        skipped_kinks: 0,
        worst_param: None,
    };
    for idx in indices {
        let original = work.param(idx);
        work.set_param(idx, original + eps);
        let plus = objective.loss(&work);
        let regime_plus = objective.regime(&work);
        work.set_param(idx, original - eps);
        let minus = objective.loss(&work);
        let regime_minus = objective.regime(&work);
        work.set_param(idx, original);
        if regime_plus != regime_minus {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic.get(idx) - numeric).abs() / numeric.abs().max(1e-8);
        report.probed += 1;
        if report.worst_param.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = Some(idx);
        }
    }
    report
}

/// Loss defined on the network output for a fixed input batch. `loss_fn`
/// returns the loss and its gradient with respect to the output.
pub struct OutputObjective<F> {
    pub inputs: Array2<f64>,
    pub mode: Mode,
    pub loss_fn: F,
}

impl<F> OutputObjective<F>
where
    F: Fn(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    pub fn new(inputs: Array2<f64>, mode: Mode, loss_fn: F) -> Self {
        Self {
            inputs,
            mode,
            loss_fn,
        }
    }
}

impl<F> Objective for OutputObjective<F>
where
    F: Fn(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    fn loss(&self, net: &Mlp) -> f64 {
        let pass = net
            .forward_batch(self.inputs.view(), self.mode)
            .expect("objective inputs match network");
        (self.loss_fn)(pass.output().view()).0
    }

    fn gradient(&self, net: &Mlp) -> Gradients {
        let pass = net
            .forward_batch(self.inputs.view(), self.mode)
            .expect("objective inputs match network");
        let (_, upstream) = (self.loss_fn)(pass.output().view());
        net.backward(&pass, upstream.view())
            .expect("upstream matches output")
            .grads
    }

    fn regime(&self, net: &Mlp) -> Vec<bool> {
        let pass = net
            .forward_batch(self.inputs.view(), self.mode)
            .expect("objective inputs match network");
        prelu_regime(net, &pass)
    }
}

/// Sign pattern of every PReLU pre-activation in a forward pass.
pub fn prelu_regime(net: &Mlp, pass: &super::ForwardPass) -> Vec<bool> {
    let mut signs = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        if let Activation::PRelu(_) = layer.activation {
            signs.extend(pass.pre_activation(l).iter().map(|&z| z >= 0.0));
        }
    }
    signs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ActivationKind;
    use ndarray::Array2;

    fn half_sq(y: ArrayView2<f64>) -> (f64, Array2<f64>) {
        (0.5 * y.mapv(|v| v * v).sum(), y.to_owned())
    }

    fn inputs(rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(r, c)| ((r * 7 + c * 3) as f64 * 0.31).sin())
    }

    #[test]
    fn zero_network_constant_loss() {
        let mut net = Mlp::init(&[3, 2], ActivationKind::Linear, ActivationKind::Linear, 0.0, 0).unwrap();
        for i in 0..net.param_count() {
            net.set_param(i, 0.0);
        }
        let obj = OutputObjective::new(inputs(2, 3), Mode::Infer, |y: ArrayView2<f64>| {
            (1.5, Array2::zeros(y.raw_dim()))
        });
        let r = finite_diff_check(&net, &obj, 100, 1e-4, 1);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn two_layer_prelu_net_matches() {
        for seed in 0..5 {
            let net = Mlp::init(&[6, 5, 4], ActivationKind::PRelu, ActivationKind::Linear, 0.0, seed).unwrap();
            let obj = OutputObjective::new(inputs(3, 6), Mode::Infer, half_sq);
            let r = finite_diff_check(&net, &obj, usize::MAX, 1e-4, seed);
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
            assert!(r.probed > 0);
        }
    }

    #[test]
    fn dropout_mask_is_fixed_under_train_mode() {
        let net = Mlp::init(&[6, 8, 3], ActivationKind::PRelu, ActivationKind::Linear, 0.5, 3).unwrap();
        let obj = OutputObjective::new(inputs(4, 6), Mode::Train { seed: 3, step: 9 }, half_sq);
        let r = finite_diff_check(&net, &obj, usize::MAX, 1e-4, 0);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    struct Doubled<'a, O: Objective>(&'a O);

    impl<O: Objective> Objective for Doubled<'_, O> {
        fn loss(&self, net: &Mlp) -> f64 {
            self.0.loss(net)
        }
        fn gradient(&self, net: &Mlp) -> Gradients {
            let mut g = self.0.gradient(net);
            g.scale(2.0);
            g
        }
        fn regime(&self, net: &Mlp) -> Vec<bool> {
            self.0.regime(net)
        }
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let net = Mlp::init(&[4, 3], ActivationKind::Linear, ActivationKind::Linear, 0.0, 8).unwrap();
        let inner = OutputObjective::new(inputs(2, 4), Mode::Infer, half_sq);
        let r = finite_diff_check(&net, &Doubled(&inner), usize::MAX, 1e-4, 0);
        assert!((r.max_rel_error - 1.0).abs() < 1e-3, "{r:?}");
    }
}
