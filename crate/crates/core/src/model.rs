//! Third-order longitudinal vehicle model.
//!
//! Each follower is a discrete-time triple integrator with a first-order lag
//! between commanded and realized acceleration:
//!
//! ```text
//! p(t+1) = p(t) + dt v(t)
//! v(t+1) = v(t) + dt a(t)
//! a(t+1) = (1 - dt/tau) a(t) + (dt/tau) u(t)
//! ```
//!
//! The measured output is the `(position, velocity)` pair.

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("input {input} outside [{u_min}, {u_max}]")]
    InputOutOfBounds { input: f64, u_min: f64, u_max: f64 },
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
}

/// Position, velocity and acceleration of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

impl VehicleState {
    pub fn new(position: f64, velocity: f64, acceleration: f64) -> Self {
        Self {
            position,
            velocity,
            acceleration,
        }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.position, self.velocity, self.acceleration)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.velocity.is_finite() && self.acceleration.is_finite()
    }
}

/// Measured `(position, velocity)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Output {
    pub position: f64,
    pub velocity: f64,
}

impl Output {
    pub fn new(position: f64, velocity: f64) -> Self {
        Self { position, velocity }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.velocity.is_finite()
    }
}

impl std::ops::Sub for Output {
    type Output = Output;

    fn sub(self, rhs: Output) -> Output {
        Output::new(self.position - rhs.position, self.velocity - rhs.velocity)
    }
}

impl std::ops::Add for Output {
    type Output = Output;

    fn add(self, rhs: Output) -> Output {
        Output::new(self.position + rhs.position, self.velocity + rhs.velocity)
    }
}

/// Per-vehicle dynamics parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Inertial delay in seconds.
    pub tau: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl VehicleParams {
    pub fn new(tau: f64, u_min: f64, u_max: f64) -> Result<Self, ModelError> {
        let params = Self { tau, u_min, u_max };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ModelError::InvalidParams(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.u_min.is_finite() && self.u_max.is_finite() && self.u_min < self.u_max) {
            return Err(ModelError::InvalidParams(format!(
                "input bounds must satisfy u_min < u_max, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        Ok(())
    }

    pub fn admits(&self, input: f64) -> bool {
        input >= self.u_min && input <= self.u_max
    }

    pub fn clamp(&self, input: f64) -> f64 {
        input.clamp(self.u_min, self.u_max)
    }
}

/// Discrete-time system matrices `(A, B, C)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemMatrices {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub c: Matrix2x3<f64>,
}

impl SystemMatrices {
    pub fn new(params: &VehicleParams, dt: f64) -> Self {
        assert!(dt > 0.0, "dt must be positive");
        assert!(params.tau > 0.0, "tau must be positive");
        let lag = dt / params.tau;
        #[rustfmt::skip]
        let a = Matrix3::new(
            1.0, dt,  0.0,
            0.0, 1.0, dt,
            0.0, 0.0, 1.0 - lag,
        );
        let b = Vector3::new(0.0, 0.0, lag);
        #[rustfmt::skip]
        let c = Matrix2x3::new(
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
        );
        Self { a, b, c }
    }

    /// Unchecked `A x + B u`.
    pub fn propagate(&self, state: &VehicleState, input: f64) -> VehicleState {
        VehicleState::from_vector(&(self.a * state.as_vector() + self.b * input))
    }
}

pub fn system_matrices(params: &VehicleParams, dt: f64) -> SystemMatrices {
    SystemMatrices::new(params, dt)
}

/// Advances one vehicle by one timestep. The input must respect the
/// vehicle's bounds.
pub fn step(state: &VehicleState, input: f64, params: &VehicleParams, dt: f64) -> Result<VehicleState, ModelError> {
    if !params.admits(input) {
        return Err(ModelError::InputOutOfBounds {
            input,
            u_min: params.u_min,
            u_max: params.u_max,
        });
    }
    Ok(step_unchecked(state, input, params.tau, dt))
}

/// Same arithmetic as [`step`] without the bounds check; also used for
/// offsets from a nominal trajectory, which need not lie inside the bounds.
pub fn step_unchecked(state: &VehicleState, input: f64, tau: f64, dt: f64) -> VehicleState {
    let lag = dt / tau;
    VehicleState {
        position: state.position + dt * state.velocity,
        velocity: state.velocity + dt * state.acceleration,
        acceleration: (1.0 - lag) * state.acceleration + lag * input,
    }
}

pub fn output(state: &VehicleState) -> Output {
    Output::new(state.position, state.velocity)
}

/// Rolls the dynamics forward over `inputs`, returning `inputs.len() + 1`
/// states starting with `initial`.
pub fn rollout(initial: &VehicleState, inputs: &[f64], tau: f64, dt: f64) -> Vec<VehicleState> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut x = *initial;
    states.push(x);
    for &u in inputs {
        x = step_unchecked(&x, u, tau, dt);
        states.push(x);
    }
    states
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(tau: f64) -> VehicleParams {
        VehicleParams::new(tau, -3.0, 3.0).unwrap()
    }

    #[test]
    fn matrices_match_substitution() {
        let m = system_matrices(&params(0.5), 0.1);
        assert_eq!(m.a.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.8]);
        assert_eq!(m.b, Vector3::new(0.0, 0.0, 0.2));
        assert_eq!(m.a[(0, 1)], 0.1);
        assert_eq!(m.a[(1, 2)], 0.1);

        let m = system_matrices(&params(1.0), 0.1);
        assert!((m.a[(2, 2)] - 0.9).abs() < 1e-15);

        let m = system_matrices(&params(0.1), 0.1);
        assert_eq!(m.a[(2, 2)], 0.0);
        assert_eq!(m.c, Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn step_examples() {
        let cruise = step(&VehicleState::new(0.0, 20.0, 0.0), 0.0, &params(0.7), 0.1).unwrap();
        assert_eq!(cruise, VehicleState::new(2.0, 20.0, 0.0));

        let x = step(&VehicleState::new(0.0, 0.0, 0.0), 1.0, &params(0.5), 0.1).unwrap();
        assert_eq!(x.position, 0.0);
        assert_eq!(x.velocity, 0.0);
        assert!((x.acceleration - 0.2).abs() < 1e-15);

        let x = step(&VehicleState::new(0.0, 0.0, 1.0), 1.0, &params(0.5), 0.1).unwrap();
        assert_eq!(x.position, 0.0);
        assert!((x.velocity - 0.1).abs() < 1e-15);
        assert!((x.acceleration - 1.0).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_out_of_bounds_input() {
        let err = step(&VehicleState::default(), 3.5, &params(0.5), 0.1).unwrap_err();
        assert!(matches!(err, ModelError::InputOutOfBounds { .. }));
    }

    #[test]
    fn output_projects() {
        assert_eq!(output(&VehicleState::new(5.0, 2.0, -1.0)), Output::new(5.0, 2.0));
        assert_eq!(output(&VehicleState::default()), Output::new(0.0, 0.0));
        assert_eq!(output(&VehicleState::new(-3.5, 22.0, 0.1)), Output::new(-3.5, 22.0));
    }

    #[test]
    fn params_validation() {
        assert!(VehicleParams::new(0.0, -1.0, 1.0).is_err());
        assert!(VehicleParams::new(0.5, 1.0, 1.0).is_err());
        assert!(VehicleParams::new(0.5, -1.0, 1.0).is_ok());
    }

    #[test]
    fn matrix_form_agrees_with_step() {
        let p = params(0.37);
        let m = system_matrices(&p, 0.1);
        let x = VehicleState::new(1.5, -2.0, 0.3);
        let a = m.propagate(&x, 0.7);
        let b = step(&x, 0.7, &p, 0.1).unwrap();
        assert!((a.as_vector() - b.as_vector()).norm() < 1e-14);
    }

    proptest! {
        #[test]
        fn acceleration_converges_geometrically(
            tau in 0.06f64..2.0,
            u in -3.0f64..3.0,
            a0 in -5.0f64..5.0,
        ) {
            let dt = 0.1;
            prop_assume!(dt < 2.0 * tau);
            let ratio = (1.0 - dt / tau).abs();
            let mut x = VehicleState::new(0.0, 10.0, a0);
            for t in 1..=100 {
                x = step_unchecked(&x, u, tau, dt);
                let bound = ratio.powi(t) * (a0 - u).abs() + 1e-12;
                prop_assert!((x.acceleration - u).abs() <= bound);
            }
        }

        #[test]
        fn step_is_linear(
            p1 in -100.0f64..100.0, v1 in -30.0f64..30.0, a1 in -3.0f64..3.0, u1 in -3.0f64..3.0,
            p2 in -100.0f64..100.0, v2 in -30.0f64..30.0, a2 in -3.0f64..3.0, u2 in -3.0f64..3.0,
            alpha in -2.0f64..2.0, beta in -2.0f64..2.0, tau in 0.25f64..0.9,
        ) {
            let dt = 0.1;
            let x1 = VehicleState::new(p1, v1, a1);
            let x2 = VehicleState::new(p2, v2, a2);
            let combined = VehicleState::from_vector(&(alpha * x1.as_vector() + beta * x2.as_vector()));
            let lhs = step_unchecked(&combined, alpha * u1 + beta * u2, tau, dt).as_vector();
            let rhs = alpha * step_unchecked(&x1, u1, tau, dt).as_vector()
                + beta * step_unchecked(&x2, u2, tau, dt).as_vector();
            prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + lhs.amax()));
        }

        #[test]
        fn rollout_equals_repeated_steps(
            inputs in proptest::collection::vec(-3.0f64..3.0, 0..40),
            tau in 0.25f64..0.9,
        ) {
            let x0 = VehicleState::new(3.0, 20.0, -0.5);
            let states = rollout(&x0, &inputs, tau, 0.1);
            let mut x = x0;
            prop_assert_eq!(states[0], x0);
            for (k, &u) in inputs.iter().enumerate() {
                x = step_unchecked(&x, u, tau, 0.1);
                prop_assert_eq!(states[k + 1], x);
            }
        }
    }
}
