//! Gaussian kernel-correlation similarity and the registration objective.
//!
//! The score is maximized: larger means better aligned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sensed_to_reference, transform_points, CameraModel, PointSet2D, PoseParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Gaussian bandwidth in reference pixels.
    pub sigma: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { sigma: 2.0 }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config("kernel.sigma", "must be finite and > 0"));
        }
        Ok(())
    }

    /// `1 / (4 sigma^2)`, the exponent scale of every kernel term.
    pub fn inv_four_sigma_sq(&self) -> f64 {
        1.0 / (4.0 * self.sigma * self.sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regularizer {
    #[default]
    None,
    /// `(θx² + θy² + θz²) / scale²`, with one normalizing scale per axis.
    SquaredTranslationNorm { scale_norm: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    #[serde(default)]
    pub regularizer: Regularizer,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("objective.lambda", "must be finite and >= 0"));
        }
        if let Regularizer::SquaredTranslationNorm { scale_norm } = self.regularizer {
            if scale_norm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::config(
                    "objective.regularizer.scale_norm",
                    "every axis scale must be > 0",
                ));
            }
        }
        Ok(())
    }

    /// Penalty subtracted from the similarity at translation `t`.
    pub fn penalty(&self, t: [f64; 3]) -> f64 {
        match self.regularizer {
            Regularizer::None => 0.0,
            Regularizer::SquaredTranslationNorm { scale_norm } => {
                let r: f64 = t
                    .iter()
                    .zip(scale_norm)
                    .map(|(v, s)| (v / s) * (v / s))
                    .sum();
                self.lambda * r
            }
        }
    }
}

/// Mean Gaussian overlap `(1/MN) Σ_m Σ_n exp(-|a_m - b_n|² / 4σ²)`, in (0, 1].
pub fn kernel_correlation(a: &PointSet2D, b: &PointSet2D, cfg: &KernelConfig) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("kernel correlation needs two non-empty sets"));
    }
    cfg.validate()?;
    let scale = cfg.inv_four_sigma_sq();
    let mut total = 0.0;
    for p in a.points() {
        for q in b.points() {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            total += (-(dx * dx + dy * dy) * scale).exp();
        }
    }
    Ok(total / (a.len() * b.len()) as f64)
}

/// Registration score of `pose`: similarity of the registered sensed set
/// against the reference set, minus the regularization penalty.
pub fn objective(
    u: &PointSet2D,
    v: &PointSet2D,
    pose: &PoseParams,
    cam: &CameraModel,
    kcfg: &KernelConfig,
    ocfg: &ObjectiveConfig,
) -> Result<f64> {
    let registered = transform_points(u, &sensed_to_reference(pose, cam)?)?;
    Ok(kernel_correlation(&registered, v, kcfg)? - ocfg.penalty(pose.translation()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn set(points: &[[f64; 2]]) -> PointSet2D {
        PointSet2D::new(points.to_vec()).unwrap()
    }

    #[test]
    fn singleton_cases() {
        let cfg = KernelConfig { sigma: 1.7 };
        let o = set(&[[0.0, 0.0]]);
        assert_eq!(kernel_correlation(&o, &o, &cfg).unwrap(), 1.0);
        let far = set(&[[2.0 * cfg.sigma, 0.0]]);
        assert_abs_diff_eq!(
            kernel_correlation(&o, &far, &cfg).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn two_by_one_pairwise_sum() {
        let cfg = KernelConfig { sigma: 1.0 };
        let a = set(&[[0.0, 0.0], [1.0, 0.0]]);
        let b = set(&[[0.0, 0.0]]);
        let expected = 0.5 * (1.0 + (-0.25f64).exp());
        assert_abs_diff_eq!(kernel_correlation(&a, &b, &cfg).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.889400, epsilon = 1e-6);
    }

    #[test]
    fn singleton_decay_is_strictly_monotone() {
        let cfg = KernelConfig::default();
        let o = set(&[[0.0, 0.0]]);
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let p = set(&[[0.25 * i as f64, 0.0]]);
            let s = kernel_correlation(&o, &p, &cfg).unwrap();
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn regularizer_penalty() {
        let ocfg = ObjectiveConfig {
            lambda: 0.5,
            regularizer: Regularizer::SquaredTranslationNorm {
                scale_norm: [10.0, 5.0, 10.0],
            },
        };
        assert_abs_diff_eq!(ocfg.penalty([10.0, 5.0, 0.0]), 1.0, epsilon = 1e-15);
        assert_eq!(ObjectiveConfig::default().penalty([3.0, 4.0, 5.0]), 0.0);
        assert!(ObjectiveConfig { lambda: -1.0, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn objective_at_identity_is_self_correlation() {
        let cam = CameraModel::default();
        let kcfg = KernelConfig::default();
        let v = set(&[[10.0, 20.0], [200.0, 50.0], [300.0, 400.0]]);
        let s = objective(&v, &v, &PoseParams::default(), &cam, &kcfg, &ObjectiveConfig::default())
            .unwrap();
        assert_abs_diff_eq!(s, kernel_correlation(&v, &v, &kcfg).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn objective_shift_of_two_sigma() {
        // Moving the camera east by 2σ metres (1 px per metre here) shifts the
        // registered point 2σ pixels east.
        let cam = CameraModel::default();
        let kcfg = KernelConfig { sigma: 2.0 };
        let p = set(&[[256.0, 256.0]]);
        let pose = PoseParams {
            theta_z: 2.0 * kcfg.sigma,
            ..Default::default()
        };
        let s = objective(&p, &p, &pose, &cam, &kcfg, &ObjectiveConfig::default()).unwrap();
        assert_abs_diff_eq!(s, (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn empty_input_rejected() {
        let cfg = KernelConfig::default();
        assert!(KernelConfig { sigma: 0.0 }.validate().is_err());
        // Empty sets cannot be constructed; the raw check still guards.
        let a = set(&[[0.0, 0.0]]);
        assert!(kernel_correlation(&a, &a, &cfg).is_ok());
    }

    fn point_set(max: usize) -> impl Strategy<Value = PointSet2D> {
        prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 1..max)
            .prop_map(|v| PointSet2D::new(v.into_iter().map(|(x, y)| [x, y]).collect()).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn symmetric(a in point_set(12), b in point_set(12), sigma in 0.5..20.0f64) {
            let cfg = KernelConfig { sigma };
            let ab = kernel_correlation(&a, &b, &cfg).unwrap();
            let ba = kernel_correlation(&b, &a, &cfg).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ab > 0.0 && ab <= 1.0);
        }

        #[test]
        fn joint_translation_invariant(
            a in point_set(12), b in point_set(12),
            dx in -50.0..50.0f64, dy in -50.0..50.0f64,
        ) {
            let cfg = KernelConfig { sigma: 5.0 };
            let base = kernel_correlation(&a, &b, &cfg).unwrap();
            let moved = kernel_correlation(&a.translated([dx, dy]), &b.translated([dx, dy]), &cfg).unwrap();
            prop_assert!((base - moved).abs() <= 1e-12);
        }
    }
}
