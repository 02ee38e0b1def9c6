//! Affine spacing policies: constant distance (CDH) and constant time
//! headway (CTH).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Output;

#[derive(Debug, Error, PartialEq)]
pub enum SpacingError {
    #[error("vehicle {vehicle}: time headway must be >= 0, got {value}")]
    NegativeHeadway { vehicle: usize, value: f64 },
    #[error("vehicle {vehicle}: safety distance must be >= 0 (> 0 beyond vehicle 1), got {value}")]
    BadSafetyDistance { vehicle: usize, value: f64 },
    #[error("override for vehicle {vehicle} but the platoon has {n} followers")]
    UnknownVehicle { vehicle: usize, n: usize },
}

/// Gap to the predecessor: `delta_h * v + delta_safe`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpacingPolicy {
    pub delta_h: f64,
    pub delta_safe: f64,
}

impl SpacingPolicy {
    pub const ZERO: SpacingPolicy = SpacingPolicy {
        delta_h: 0.0,
        delta_safe: 0.0,
    };

    pub fn cth(delta_h: f64, delta_safe: f64) -> Self {
        Self { delta_h, delta_safe }
    }

    pub fn cdh(distance: f64) -> Self {
        Self {
            delta_h: 0.0,
            delta_safe: distance,
        }
    }

    pub fn gap(&self, v: f64) -> f64 {
        self.delta_h * v + self.delta_safe
    }
}

pub fn desired_gap(policy: &SpacingPolicy, v: f64) -> f64 {
    policy.gap(v)
}

/// Spacing policy of every follower: a platoon-wide default plus per-vehicle
/// overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacingPolicies {
    pub default: SpacingPolicy,
    #[serde(default)]
    pub per_vehicle: BTreeMap<usize, SpacingPolicy>,
}

impl SpacingPolicies {
    pub fn uniform(policy: SpacingPolicy) -> Self {
        Self {
            default: policy,
            per_vehicle: BTreeMap::new(),
        }
    }

    /// Uniform policy except vehicle 1, which tracks the virtual leader with
    /// zero gap.
    pub fn with_zero_first(policy: SpacingPolicy) -> Self {
        Self {
            default: policy,
            per_vehicle: BTreeMap::from([(1, SpacingPolicy::ZERO)]),
        }
    }

    pub fn policy(&self, i: usize) -> SpacingPolicy {
        self.per_vehicle.get(&i).copied().unwrap_or(self.default)
    }

    pub fn is_uniform(&self, n: usize) -> bool {
        (1..=n).all(|i| self.policy(i) == self.default)
    }

    pub fn validate(&self, n: usize) -> Result<(), SpacingError> {
        if let Some(&vehicle) = self.per_vehicle.keys().find(|&&k| k == 0 || k > n) {
            return Err(SpacingError::UnknownVehicle { vehicle, n });
        }
        for vehicle in 1..=n {
            let p = self.policy(vehicle);
            if !(p.delta_h.is_finite() && p.delta_h >= 0.0) {
                return Err(SpacingError::NegativeHeadway {
                    vehicle,
                    value: p.delta_h,
                });
            }
            let ok = if vehicle == 1 {
                p.delta_safe >= 0.0
            } else {
                p.delta_safe > 0.0
            };
            if !(p.delta_safe.is_finite() && ok) {
                return Err(SpacingError::BadSafetyDistance {
                    vehicle,
                    value: p.delta_safe,
                });
            }
        }
        Ok(())
    }

    /// Coefficients `(c_h, c_safe)` of the signed desired offset between
    /// vehicles `i` and `j`, so that the offset is `c_h * v + c_safe`.
    ///
    /// The offset is the sum of the per-vehicle gaps strictly behind `j` up
    /// to and including `i`, negated when `i` is ahead of `j`. Under a
    /// uniform policy this is `(i - j) (delta_h v + delta_safe)`.
    pub fn offset_coefficients(&self, i: usize, j: usize) -> (f64, f64) {
        let (lo, hi, sign) = if i >= j { (j, i, 1.0) } else { (i, j, -1.0) };
        let (h, s) = ((lo + 1)..=hi)
            .map(|m| self.policy(m))
            .fold((0.0, 0.0), |(h, s), p| (h + p.delta_h, s + p.delta_safe));
        (sign * h, sign * s)
    }

    /// Cumulative desired distance from the leader to vehicle `i` at speed `v`.
    pub fn leader_offset(&self, i: usize, v: f64) -> f64 {
        let (h, s) = self.offset_coefficients(i, 0);
        h * v + s
    }
}

/// Desired output offset between `i` and `j`: `(offset(v), 0)`.
pub fn pair_offset(i: usize, j: usize, policies: &SpacingPolicies, v: f64) -> Output {
    let (h, s) = policies.offset_coefficients(i, j);
    Output::new(h * v + s, 0.0)
}

/// Where vehicle `i` should be given the leader's output.
pub fn desired_output(i: usize, leader: Output, v0: f64, policies: &SpacingPolicies) -> Output {
    Output::new(leader.position - policies.leader_offset(i, v0), v0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cth() -> SpacingPolicies {
        SpacingPolicies::uniform(SpacingPolicy::cth(0.2, 1.0))
    }

    #[test]
    fn gap_examples() {
        assert!((desired_gap(&SpacingPolicy::cth(0.2, 1.0), 20.0) - 5.0).abs() < 1e-15);
        assert_eq!(desired_gap(&SpacingPolicy::cdh(5.0), 17.3), 5.0);
        assert_eq!(desired_gap(&SpacingPolicy::cth(0.2, 1.0), 0.0), 1.0);
    }

    #[test]
    fn pair_offset_examples() {
        let o = pair_offset(3, 1, &cth(), 20.0);
        assert!((o.position - 10.0).abs() < 1e-12);
        assert_eq!(o.velocity, 0.0);
        assert_eq!(pair_offset(2, 2, &cth(), 20.0), Output::new(0.0, 0.0));
        let cdh = SpacingPolicies::uniform(SpacingPolicy::cdh(5.0));
        assert_eq!(pair_offset(2, 3, &cdh, 11.0), Output::new(-5.0, 0.0));
    }

    #[test]
    fn desired_output_examples() {
        let y = desired_output(2, Output::new(100.0, 22.0), 22.0, &cth());
        assert!((y.position - 89.2).abs() < 1e-12);
        assert_eq!(y.velocity, 22.0);

        let y0 = Output::new(42.0, 20.0);
        assert_eq!(desired_output(0, y0, 20.0, &cth()), y0);

        let cdh = SpacingPolicies::uniform(SpacingPolicy::cdh(5.0));
        assert_eq!(
            desired_output(10, Output::new(0.0, 20.0), 20.0, &cdh),
            Output::new(-50.0, 20.0)
        );
    }

    #[test]
    fn zero_first_override_sums_per_vehicle_gaps() {
        let p = SpacingPolicies::with_zero_first(SpacingPolicy::cth(0.2, 1.0));
        assert_eq!(p.leader_offset(1, 20.0), 0.0);
        assert!((p.leader_offset(3, 20.0) - 10.0).abs() < 1e-12);
        // The offset between 2 and the leader only counts vehicle 2's gap.
        assert!((pair_offset(2, 0, &p, 20.0).position - 5.0).abs() < 1e-12);
        assert!((pair_offset(1, 2, &p, 20.0).position + 5.0).abs() < 1e-12);
        assert!(!p.is_uniform(3));
    }

    #[test]
    fn validation() {
        assert!(cth().validate(5).is_ok());
        assert!(SpacingPolicies::with_zero_first(SpacingPolicy::cdh(5.0))
            .validate(5)
            .is_ok());
        let zero = SpacingPolicies::uniform(SpacingPolicy::ZERO);
        assert_eq!(
            zero.validate(3),
            Err(SpacingError::BadSafetyDistance { vehicle: 2, value: 0.0 })
        );
        let neg = SpacingPolicies::uniform(SpacingPolicy::cth(-0.1, 1.0));
        assert!(matches!(neg.validate(2), Err(SpacingError::NegativeHeadway { .. })));
        let mut bad = cth();
        bad.per_vehicle.insert(9, SpacingPolicy::ZERO);
        assert_eq!(bad.validate(3), Err(SpacingError::UnknownVehicle { vehicle: 9, n: 3 }));
    }

    proptest! {
        #[test]
        fn consecutive_desired_outputs_differ_by_gap(
            h in 0.0f64..1.0, s in 0.1f64..10.0, v0 in 0.0f64..40.0,
            p0 in -1000.0f64..1000.0, i in 1usize..30,
        ) {
            let policy = SpacingPolicy::cth(h, s);
            let ps = SpacingPolicies::uniform(policy);
            let y0 = Output::new(p0, v0);
            let diff = desired_output(i, y0, v0, &ps) - desired_output(i - 1, y0, v0, &ps);
            prop_assert!((diff.position + desired_gap(&policy, v0)).abs() < 1e-9);
            prop_assert_eq!(diff.velocity, 0.0);
        }

        #[test]
        fn pair_offset_is_additive(
            h in 0.0f64..1.0, s in 0.1f64..10.0, v in -5.0f64..40.0,
            i in 0usize..20, j in 0usize..20, k in 0usize..20,
        ) {
            let ps = SpacingPolicies::uniform(SpacingPolicy::cth(h, s));
            let direct = pair_offset(i, j, &ps, v);
            let via = pair_offset(i, k, &ps, v) + pair_offset(k, j, &ps, v);
            prop_assert!((direct.position - via.position).abs() < 1e-9);
            let expected = (i as f64 - j as f64) * (h * v + s);
            prop_assert!((direct.position - expected).abs() < 1e-9);
        }
    }
}
