//! Network building blocks on top of [`crate::tensor`].

mod batch_norm;
mod conv;
mod functional;
mod pool;
mod upsample;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

pub use batch_norm::{batch_norm, BatchNorm2d, RunningStats};
pub use conv::{conv2d, set_corrupt_backward, Conv2d};
pub use functional::{linear, softmax};
pub use pool::{adaptive_avg_pool2d, max_pool_global};
pub use upsample::{resize, upsample, ResizeMode};
pub(crate) use upsample::axis_taps;

/// Whether a named tensor is updated by the optimizer or only carried
/// along (e.g. batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Anything holding named tensors that checkpoints and optimizers need
/// to reach.
pub trait Module<T: Scalar> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>));

    fn named_tensors(&mut self) -> Vec<(String, ParamKind, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, kind, t| out.push((name.to_string(), kind, t.clone())));
        out
    }

    fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                n += t.numel()
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Trainable leaf drawn from `U(-b, b)` with `b = sqrt(1 / fan_in)`.
    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::parameter(data, shape).expect("shape matches data")
    }
}
