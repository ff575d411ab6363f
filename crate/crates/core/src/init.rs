//! Seeded weight initialization.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::Result;
use crate::tensor::{BatchNormSpec, ConvSpec, Shape, Tensor};

pub const INIT_RANGE: f32 = 0.1;
pub const BN_EPS: f64 = 1e-3;

/// Deterministic source of initial weights: conv weights and biases are
/// uniform in `[-0.1, 0.1]`; batch-norm statistics are perturbed around the
/// identity (`gamma = 1 + u`, `beta = u`, `mean = u`, `var = 1 + u`).
#[derive(Debug, Clone)]
pub struct WeightInit {
    rng: Xoshiro256PlusPlus,
}

impl WeightInit {
    pub fn new(seed: u64) -> Self {
        WeightInit { rng: Xoshiro256PlusPlus::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self) -> f32 {
        self.rng.random_range(-INIT_RANGE..=INIT_RANGE)
    }

    pub fn fill(&mut self, values: &mut [f32]) {
        for v in values {
            *v = self.uniform();
        }
    }

    pub fn conv(
        &mut self,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<ConvSpec> {
        let mut c = ConvSpec::zeros(
            in_channels,
            out_channels,
            (kernel, kernel),
            (stride, stride),
            (kernel / 2, kernel / 2),
            groups,
        )?;
        self.fill(&mut c.weight);
        self.fill(&mut c.bias);
        Ok(c)
    }

    pub fn batch_norm(&mut self, channels: usize) -> BatchNormSpec {
        let mut bn = BatchNormSpec::identity(channels, BN_EPS);
        for c in 0..channels {
            bn.gamma[c] += self.uniform();
            bn.beta[c] = self.uniform();
            bn.running_mean[c] = self.uniform();
            bn.running_var[c] += self.uniform();
        }
        bn
    }

    /// Tensor with entries uniform in `[-range, range]`.
    pub fn tensor(&mut self, shape: Shape, range: f32) -> Result<Tensor> {
        Tensor::from_fn(shape, |_| self.rng.random_range(-range..=range))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = WeightInit::new(7).conv(4, 8, 3, 1, 2).unwrap();
        let b = WeightInit::new(7).conv(4, 8, 3, 1, 2).unwrap();
        let c = WeightInit::new(8).conv(4, 8, 3, 1, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.weight.iter().all(|w| w.abs() <= INIT_RANGE));
    }

    #[test]
    fn bn_is_valid() {
        let bn = WeightInit::new(1).batch_norm(16);
        bn.validate().unwrap();
        assert!(bn.running_var.iter().all(|&v| v >= 0.9));
    }
}
