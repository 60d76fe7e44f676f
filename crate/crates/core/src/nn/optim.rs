use serde::{Deserialize, Serialize};

use super::{Activation, Gradients, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum(f64),
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::SgdMomentum(0.9)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 64,
            seed: 42,
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainConfig {
    /// `epochs == 0` is accepted and means "return the initialized model".
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if let OptimizerKind::SgdMomentum(m) = self.optimizer {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::InvalidArgument(format!("momentum {m} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// SGD, optionally with heavy-ball momentum: `v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    learning_rate: f64,
    momentum: f64,
    velocity: Option<Gradients>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Self {
        let momentum = match config.optimizer {
            OptimizerKind::Sgd => 0.0,
            OptimizerKind::SgdMomentum(m) => m,
        };
        Self {
            learning_rate: config.learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        let update = if self.momentum > 0.0 {
            let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
            v.scale(self.momentum);
            v.add_assign(grads);
            &*v
        } else {
            grads
        };
        let lr = self.learning_rate;
        for (layer, g) in net.layers.iter_mut().zip(&update.layers) {
            layer.weights.scaled_add(-lr, &g.weights);
            layer.bias.scaled_add(-lr, &g.bias);
            if let (Activation::PRelu(s), Some(gs)) = (&mut layer.activation, &g.slopes) {
                s.scaled_add(-lr, gs);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ActivationKind, Mode};
    use ndarray::array;

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sgd_reduces_quadratic_loss() {
        let mut net = Mlp::init(&[2, 1], ActivationKind::Linear, ActivationKind::Linear, 0.0, 1).unwrap();
        let x = array![[1.0, 2.0], [-1.0, 0.5], [0.3, -0.7]];
        let target = array![[1.0], [0.0], [-0.5]];
        let loss = |net: &Mlp| {
            let y = net.infer_batch(x.view()).unwrap();
            (&y - &target).mapv(|d| d * d).sum() * 0.5
        };
        let start = loss(&net);
        let mut opt = Optimizer::new(&TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        });
        for _ in 0..50 {
            let pass = net.forward_batch(x.view(), Mode::Infer).unwrap();
            let g = pass.output() - &target;
            let back = net.backward(&pass, g.view()).unwrap();
            opt.step(&mut net, &back.grads);
        }
        assert!(loss(&net) < start * 0.1);
    }

    #[test]
    fn config_serde_shape() {
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert!(json.contains("\"sgd_momentum\":0.9"));
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainConfig::default());
    }
}
