//! Evaluation metrics and online-estimation diagnostics.

mod frechet;
mod linalg;
mod mmd;
mod regret;

pub use frechet::{frechet_distance, GaussianAccumulator, GaussianStats};
pub use linalg::{sym_eigen, sym_sqrt, SymEigen};
pub use mmd::{
    feature_mmd, mean_embedding, mmd_kphi, EmpiricalDistribution, FeatureMap, IdentityMap, IndicatorMap,
};
pub use regret::{offline_optimum, run_regret, Estimator, RegretReport, RegretTracker};

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::weighted_l1;
use crate::pyramid::LaplacianPyramid;
use crate::tensor::Tensor;

/// Laplacian-pyramid L1 distance between two images of shape `[.., H, W]`,
/// summed over every leading plane.
pub fn lap1_loss(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            node: 0,
            op: "lap1",
            expected: x.shape().to_vec(),
            actual: y.shape().to_vec(),
        });
    }
    let r = x.rank();
    if r < 2 || x.shape()[r - 2] < 4 || x.shape()[r - 1] < 4 {
        return Err(Error::Config("lap1 needs images of at least 4x4".into()));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let pyr = LaplacianPyramid::new(h, w);
    Ok(x.data()
        .chunks(h * w)
        .zip(y.data().chunks(h * w))
        .map(|(a, b)| {
            let diff: Vec<f64> = a.iter().zip(b).map(|(a, b)| *a as f64 - *b as f64).collect();
            weighted_l1(&pyr.analyze(&diff))
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lap1_of_constant_offset() {
        // Band 0 of a constant vanishes and the 2x2 residual carries weight 1/4.
        let x = Tensor::full(&[4, 4], 0.5f32);
        let y = Tensor::full(&[4, 4], -0.25f32);
        assert!((lap1_loss(&x, &y).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn lap1_rejects_small_or_mismatched() {
        assert!(lap1_loss(&Tensor::zeros(&[3, 3]), &Tensor::zeros(&[3, 3])).is_err());
        assert!(lap1_loss(&Tensor::zeros(&[4, 4]), &Tensor::zeros(&[1, 4, 4])).is_err());
    }
}
