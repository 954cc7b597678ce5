use crate::error::{shape_err, Result};
use crate::numerics::{matmul, RngStream, Scalar, Tensor};

/// Frozen per-patch feature target.
pub trait FeatureExtractor<T: Scalar> {
    fn dim(&self) -> usize;

    /// `[n, patch_dim]` patches to `[n, dim]` features.
    fn features(&self, patches: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Seeded random affine map of each patch. The constant input column keeps
/// features of an all-zero patch away from the origin.
#[derive(Clone, Debug)]
pub struct RandomProjection<T> {
    weight: Tensor<T>,
}

impl<T: Scalar> RandomProjection<T> {
    pub fn new(patch_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed).derive(&[crate::numerics::tag("feature-projection")]);
        let std = 1.0 / ((patch_dim + 1) as f64).sqrt();
        let weight = Tensor::from_fn(&[patch_dim + 1, dim], |_| T::cast(rng.normal() * std));
        Self { weight }
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomProjection<T> {
    fn dim(&self) -> usize {
        self.weight.cols()
    }

    fn features(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let pd = self.weight.rows() - 1;
        if patches.ndim() != 2 || patches.cols() != pd {
            return shape_err("features", format!("patches {:?}, expected [n, {pd}]", patches.shape()));
        }
        let n = patches.rows();
        let mut data = Vec::with_capacity(n * (pd + 1));
        for r in 0..n {
            data.extend_from_slice(patches.row(r));
            data.push(T::one());
        }
        matmul(&Tensor::new(vec![n, pd + 1], data)?, &self.weight)
    }
}
