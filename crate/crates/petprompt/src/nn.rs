//! Parameter containers and initialization shared by all network modules.
//!
//! Every parameter struct is generic over its payload `T`: instantiated with
//! `ArrayD<E>` it stores values, mapped with [`Tape::leaf`] it becomes the
//! node-id mirror used to build a forward graph. `for_each`/`map` enumerate
//! fields in declaration order, which fixes the canonical parameter order for
//! checkpoints, the optimizer, and gradient extraction.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Elem;

macro_rules! pair_params {
    ($(#[$doc:meta])* $name:ident, $a:ident, $b:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone)]
        pub struct $name<T> {
            pub $a: T,
            pub $b: T,
        }

        impl<T> $name<T> {
            pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                f(format!("{prefix}.{}", stringify!($a)), &self.$a);
                f(format!("{prefix}.{}", stringify!($b)), &self.$b);
            }

            pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                f(format!("{prefix}.{}", stringify!($a)), &mut self.$a);
                f(format!("{prefix}.{}", stringify!($b)), &mut self.$b);
            }

            pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> $name<U> {
                $name {
                    $a: f(&self.$a),
                    $b: f(&self.$b),
                }
            }
        }
    };
}

pair_params!(
    /// Fully connected layer / pointwise convolution: `weight [out, in]`,
    /// `bias [out]`.
    Linear,
    weight,
    bias
);
pair_params!(
    /// Dense 3D convolution: `weight [co, ci, k, k, k]`, `bias [co]`.
    Conv3,
    weight,
    bias
);
pair_params!(
    /// Depthwise 3x3x3 convolution: `weight [c, 3, 3, 3]`, `bias [c]`.
    DwConv,
    weight,
    bias
);
pair_params!(
    /// Normalization scale/shift: `gamma [c]`, `beta [c]`.
    Norm,
    gamma,
    beta
);

/// An `h x w x d x c` intermediate activation, stored channel-major as
/// `[c, h, w, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<E: Elem> {
    data: Array4<E>,
}

impl<E: Elem> FeatureMap<E> {
    pub fn new(data: Array4<E>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature map contains non-finite values".into(),
            ));
        }
        if data.shape().iter().any(|&s| s == 0) {
            return Err(Error::Shape("feature map axes must be positive".into()));
        }
        Ok(FeatureMap { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial_dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    pub fn data(&self) -> &Array4<E> {
        &self.data
    }

    pub fn into_data(self) -> Array4<E> {
        self.data
    }

    pub fn to_dyn(&self) -> ArrayD<E> {
        self.data.clone().into_dyn()
    }

    pub fn from_dyn(data: ArrayD<E>) -> Result<Self> {
        let d4 = data
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Shape(format!("feature map must be 4-d: {e}")))?;
        FeatureMap::new(d4)
    }
}

// ---- initialization --------------------------------------------------------

/// Fan-in-scaled uniform draw `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || E::f(rng.random_range(-bound..bound)))
}

/// Zero-mean Gaussian draw with standard deviation `sigma`.
pub fn gaussian<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64) -> ArrayD<E> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || E::f(normal.sample(rng)))
}

pub fn zeros<E: Elem>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<E: Elem>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::from_elem(IxDyn(shape), E::one())
}

pub fn linear_init<E: Elem>(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Linear<ArrayD<E>> {
    Linear {
        weight: uniform_fan_in(rng, &[out, inp], inp),
        bias: zeros(&[out]),
    }
}

pub fn conv_init<E: Elem>(
    rng: &mut ChaCha8Rng,
    co: usize,
    ci: usize,
    k: usize,
) -> Conv3<ArrayD<E>> {
    Conv3 {
        weight: uniform_fan_in(rng, &[co, ci, k, k, k], ci * k * k * k),
        bias: zeros(&[co]),
    }
}

pub fn dwconv_init<E: Elem>(rng: &mut ChaCha8Rng, c: usize) -> DwConv<ArrayD<E>> {
    DwConv {
        weight: uniform_fan_in(rng, &[c, 3, 3, 3], 27),
        bias: zeros(&[c]),
    }
}

pub fn norm_init<E: Elem>(c: usize) -> Norm<ArrayD<E>> {
    Norm {
        gamma: ones(&[c]),
        beta: zeros(&[c]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_and_fan_scaled() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a: Linear<ArrayD<f64>> = linear_init(&mut r1, 8, 32);
        let b: Linear<ArrayD<f64>> = linear_init(&mut r2, 8, 32);
        assert_eq!(a.weight, b.weight);
        let bound = 1.0 / 32f64.sqrt();
        assert!(a.weight.iter().all(|v| v.abs() < bound));
        assert!(a.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn for_each_order_matches_map_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l: Linear<ArrayD<f64>> = linear_init(&mut rng, 2, 3);
        let mut names = Vec::new();
        l.for_each("fc", &mut |n, _| names.push(n));
        assert_eq!(names, vec!["fc.weight", "fc.bias"]);
        let mut seen = 0;
        let _ids: Linear<usize> = l.map(&mut |_| {
            seen += 1;
            seen
        });
        assert_eq!(seen, 2);
    }
}
