use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{Model, ParamKind};
use crate::tensor::Scalar;

/// Kaiming-normal standard deviation for a LeakyReLU with the given slope.
pub fn kaiming_std(fan_in: usize, negative_slope: f64) -> f64 {
    (2.0 / (fan_in as f64 * (1.0 + negative_slope * negative_slope))).sqrt()
}

/// Kaiming-normal kernels, zero biases, unit norm scales, zero norm shifts.
pub fn init_weights<T: Scalar>(model: &mut Model<T>, seed: u64) {
    let slope = model.config().negative_slope;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in model.params_mut().entries_mut() {
        match e.kind {
            ParamKind::Kernel { fan_in } => {
                let dist = Normal::new(0.0, kaiming_std(fan_in, slope)).expect("finite std");
                for v in e.value.data_mut() {
                    *v = T::lit(dist.sample(&mut rng));
                }
            }
            ParamKind::NormScale => e.value.data_mut().fill(T::one()),
            ParamKind::Bias | ParamKind::NormShift => e.value.data_mut().fill(T::zero()),
        }
    }
}
