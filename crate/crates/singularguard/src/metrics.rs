//! Proximity-to-singularity metrics for a 6x6 Jacobian.
//!
//! Three views of the same degeneracy: manipulability `sqrt(det(J*J^T))`
//! collapses to zero at a singularity, the condition number
//! `sigma_max / sigma_min` blows up, and the smallest singular value
//! measures the weakest output direction directly.

use crate::kinematics::{compute_jacobian, JointConfig, KinematicModel};
use crate::kinematics::Jacobian;
use serde::{Deserialize, Serialize};

/// Default floor under `sigma_min` below which the condition number is
/// reported as `KAPPA_CAP` instead of dividing by a vanishing value.
pub const SIGMA_FLOOR: f64 = 1e-9;

/// Default finite stand-in for an unbounded condition number. Keeps fuzzy
/// inputs and threshold comparisons well-defined at singularities.
pub const KAPPA_CAP: f64 = 1e6;

/// All six singular values, sorted descending.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingularValues(pub [f64; 6]);

impl SingularValues {
    pub fn max(&self) -> f64 {
        self.0[0]
    }

    pub fn min(&self) -> f64 {
        self.0[5]
    }
}

/// Metric bundle for one configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularityMetrics {
    pub mu: f64,
    pub kappa: f64,
    pub sigma_min: f64,
}

/// Decision thresholds shared by the IK filter and the monitor fast path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricThresholds {
    pub mu_threshold: f64,
    pub kappa_threshold: f64,
    pub sigma_threshold: f64,
    pub sigma_floor: f64,
    pub kappa_cap: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds {
            mu_threshold: 0.05,
            kappa_threshold: 50.0,
            sigma_threshold: 0.01,
            sigma_floor: SIGMA_FLOOR,
            kappa_cap: KAPPA_CAP,
        }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("mu_threshold", self.mu_threshold),
            ("kappa_threshold", self.kappa_threshold),
            ("sigma_threshold", self.sigma_threshold),
            ("sigma_floor", self.sigma_floor),
            ("kappa_cap", self.kappa_cap),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(format!("{name} must be finite and positive, got {v}"));
            }
        }
        if self.kappa_cap <= self.kappa_threshold {
            return Err(format!(
                "kappa_cap {} must exceed kappa_threshold {}",
                self.kappa_cap, self.kappa_threshold
            ));
        }
        Ok(())
    }

    /// True when a configuration clears every filter: `mu` at or above
    /// threshold, `kappa` at or below threshold, `sigma_min` at or above
    /// threshold.
    pub fn passes(&self, m: &SingularityMetrics) -> bool {
        m.mu >= self.mu_threshold
            && m.kappa <= self.kappa_threshold
            && m.sigma_min >= self.sigma_threshold
    }
}

/// Singular values of the Jacobian, sorted descending.
pub fn singular_values(j: &Jacobian) -> SingularValues {
    let svd = j.0.svd(false, false);
    let mut s = [0.0; 6];
    for (i, v) in svd.singular_values.iter().enumerate() {
        s[i] = *v;
    }
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    SingularValues(s)
}

/// Manipulability `sqrt(det(J*J^T))`, evaluated as `|det J|` — identical
/// for the square Jacobian, but the round-off error grows with the
/// condition number instead of its square, which keeps the value
/// accurate deep into near-singular territory.
pub fn manipulability(j: &Jacobian) -> f64 {
    j.0.determinant().abs()
}

/// Condition number `sigma_max / sigma_min`, floored and capped so the
/// result is always in `[1, KAPPA_CAP]`.
pub fn condition_number(j: &Jacobian) -> f64 {
    condition_number_from(&singular_values(j), &MetricThresholds::default())
}

fn condition_number_from(s: &SingularValues, t: &MetricThresholds) -> f64 {
    if s.min() < t.sigma_floor {
        t.kappa_cap
    } else {
        (s.max() / s.min()).min(t.kappa_cap)
    }
}

/// Smallest singular value of the Jacobian.
pub fn minimum_singular_value(j: &Jacobian) -> f64 {
    singular_values(j).min()
}

/// All three metrics for one configuration, sharing a single
/// decomposition for `kappa` and `sigma_min`.
pub fn compute_metrics(model: &KinematicModel, q: &JointConfig) -> SingularityMetrics {
    compute_metrics_with(model, q, &MetricThresholds::default())
}

pub fn compute_metrics_with(
    model: &KinematicModel,
    q: &JointConfig,
    t: &MetricThresholds,
) -> SingularityMetrics {
    let j = compute_jacobian(model, q);
    metrics_from_jacobian(&j, t)
}

pub fn metrics_from_jacobian(j: &Jacobian, t: &MetricThresholds) -> SingularityMetrics {
    let s = singular_values(j);
    SingularityMetrics {
        mu: manipulability(j),
        kappa: condition_number_from(&s, t),
        sigma_min: s.min(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::KinematicModel;
    use nalgebra::Matrix6;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(rng: &mut impl Rng) -> JointConfig {
        let tau = 2.0 * core::f64::consts::PI;
        let mut q = [0.0; 6];
        for v in q.iter_mut() {
            *v = rng.gen_range(-tau..tau);
        }
        JointConfig(q)
    }

    /// Random matrix with moderate conditioning, so both decompositions
    /// stay well inside their accuracy budget.
    fn random_well_conditioned(rng: &mut impl Rng) -> Jacobian {
        loop {
            let j = Jacobian(Matrix6::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
            let s = singular_values(&j);
            if s.max() / s.min() < 100.0 {
                return j;
            }
        }
    }

    #[test]
    fn manipulability_equals_singular_value_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let j = random_well_conditioned(&mut rng);
            let mu = manipulability(&j);
            let prod: f64 = singular_values(&j).0.iter().product();
            assert!(
                (mu - prod).abs() <= 1e-8 * prod.max(1e-300),
                "mu {mu} vs singular-value product {prod}"
            );
        }
    }

    #[test]
    fn singular_values_match_eigendecomposition() {
        // Independent route: eigenvalues of J^T J are the squared singular
        // values.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..100 {
            let j = random_well_conditioned(&mut rng);
            let s = singular_values(&j);
            let jtj = j.0.transpose() * j.0;
            let eig = nalgebra::SymmetricEigen::new(jtj);
            let mut lams: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            lams.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for i in 0..6 {
                let via_eig = lams[i].max(0.0).sqrt();
                let rel = (s.0[i] - via_eig).abs() / via_eig.max(1e-300);
                assert!(rel <= 1e-10, "sigma[{i}]: svd {} vs eig {via_eig}", s.0[i]);
            }
        }
    }

    #[test]
    fn condition_number_is_max_over_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..100 {
            let j = random_well_conditioned(&mut rng);
            let s = singular_values(&j);
            let kappa = condition_number(&j);
            let expect = s.max() / s.min();
            assert!((kappa - expect).abs() <= 1e-10 * expect);
        }
    }

    #[test]
    fn vanishing_sigma_min_caps_kappa() {
        // Rank-deficient by construction: last row zero.
        let mut m = Matrix6::from_fn(|r, c| ((r * 6 + c) as f64 * 0.37).sin());
        for c in 0..6 {
            m[(5, c)] = 0.0;
        }
        for c in 0..6 {
            let prev = m[(4, c)];
            m[(5, c)] = prev; // duplicate row -> exactly singular
        }
        let j = Jacobian(m);
        assert_eq!(condition_number(&j), KAPPA_CAP);
        assert!(manipulability(&j) < 1e-10);
    }

    #[test]
    fn stretched_arm_is_rank_deficient() {
        let model = KinematicModel::ur10();
        let j = compute_jacobian(&model, &JointConfig::zeros());
        assert!(minimum_singular_value(&j) < 1e-8);
        assert_eq!(condition_number(&j), KAPPA_CAP);
    }

    #[test]
    fn bundle_matches_standalone_ops_bitwise() {
        let model = KinematicModel::ur10();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for _ in 0..50 {
            let q = random_config(&mut rng);
            let m = compute_metrics(&model, &q);
            let j = compute_jacobian(&model, &q);
            assert_eq!(m.mu.to_bits(), manipulability(&j).to_bits());
            assert_eq!(m.kappa.to_bits(), condition_number(&j).to_bits());
            assert_eq!(m.sigma_min.to_bits(), minimum_singular_value(&j).to_bits());
        }
    }

    #[test]
    fn metrics_are_continuous_under_tiny_perturbation() {
        let model = KinematicModel::ur10();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..50 {
            let q = random_config(&mut rng);
            let m0 = compute_metrics(&model, &q);
            if m0.sigma_min < 0.01 {
                continue; // kappa is steep near singularities; bound holds away from them
            }
            let mut q1 = q.0;
            for v in q1.iter_mut() {
                *v += 1e-6 * rng.gen_range(-1.0..1.0f64);
            }
            let m1 = compute_metrics(&model, &JointConfig(q1));
            assert!((m0.mu - m1.mu).abs() < 1e-3);
            assert!((m0.sigma_min - m1.sigma_min).abs() < 1e-3);
        }
    }

    #[test]
    fn default_thresholds_validate() {
        MetricThresholds::default().validate().unwrap();
        let mut bad = MetricThresholds::default();
        bad.mu_threshold = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = MetricThresholds::default();
        bad.kappa_cap = 10.0;
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn kappa_is_scale_invariant_and_mu_scales(seed in 0u64..500, c in 0.5f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = random_well_conditioned(&mut rng);
            let scaled = Jacobian(j.0 * c);
            let k0 = condition_number(&j);
            let k1 = condition_number(&scaled);
            prop_assert!((k0 - k1).abs() <= 1e-10 * k0);
            let mu0 = manipulability(&j);
            let mu1 = manipulability(&scaled);
            prop_assert!((mu1 - c.powi(6) * mu0).abs() <= 1e-8 * mu1.max(1e-12));
        }

        #[test]
        fn kappa_at_least_one_and_sigma_ordering(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = KinematicModel::ur10();
            let q = random_config(&mut rng);
            let j = compute_jacobian(&model, &q);
            let s = singular_values(&j);
            for i in 0..5 {
                prop_assert!(s.0[i] >= s.0[i + 1]);
            }
            prop_assert!(s.0[5] >= 0.0);
            let m = compute_metrics(&model, &q);
            prop_assert!(m.kappa >= 1.0 && m.kappa <= KAPPA_CAP);
            prop_assert!(m.mu >= 0.0);
        }
    }
}
