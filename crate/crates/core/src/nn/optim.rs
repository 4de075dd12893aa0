use super::network::{Gradients, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Step-decay learning-rate schedule for plain SGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epoch: usize,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 10,
            epoch: 0,
        }
    }
}

impl OptimizerState {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0) || !self.decay_factor.is_finite() {
            return Err(Error::Config(format!(
                "decay_factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        Ok(())
    }

    /// `base_lr * decay_factor^(epoch / decay_every)` (integer division).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let periods = (epoch / self.decay_every) as i32;
        self.base_lr * self.decay_factor.powi(periods)
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.epoch)
    }
}

/// One plain SGD update of `net`; `name` labels diagnostics.
pub fn sgd_step<T: Scalar>(name: &str, net: &mut Network<T>, grads: &Gradients<T>, lr: T) -> Result<()> {
    net.apply_sgd(grads, lr).map_err(|e| match e {
        Error::NonFiniteGradient { tensor, index, .. } => Error::NonFiniteGradient {
            network: name.to_string(),
            tensor,
            index,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn schedule() {
        let opt = OptimizerState::default();
        assert_eq!(opt.lr_at(0), 1e-3);
        assert_eq!(opt.lr_at(9), 1e-3);
        assert_relative_eq!(opt.lr_at(10), 1e-4, max_relative = 1e-12);
        assert_relative_eq!(opt.lr_at(29), 1e-5, max_relative = 1e-12);
    }

    #[test]
    fn validation() {
        assert!(OptimizerState { decay_every: 0, ..Default::default() }.validate().is_err());
        assert!(OptimizerState { base_lr: -1.0, ..Default::default() }.validate().is_err());
    }
}
