//! Balancing law, actuator limits and maneuver sequencing.

pub mod lqr;
mod maneuver;

pub use lqr::{
    closed_loop, controllability_rank, discrete_blocks, expm, resolve_sign, riccati_residual, solve_dare,
    spectral_radius, synthesize, zoh_discretize, DiscreteBlock, LqrDesign, LqrGains, LqrWeights, SignedGains,
};
pub use maneuver::{Controller, Maneuver, MachineConfig, ManeuverPhase, Observation, PhaseState};

use serde::{Deserialize, Serialize};

use crate::dynamics::ControlInput;
use crate::estimation::EstimatorState;
use crate::params::RobotParams;
use crate::sensors::EncoderReading;

/// Motor command after the torque-speed envelope and current limit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Saturated {
    pub torque: f64,
    pub current: f64,
}

/// Clips a torque request for a motor turning at `wheel_rate` relative to
/// the frame.
pub fn saturate_command(u: f64, wheel_rate: f64, params: &RobotParams) -> Saturated {
    if !u.is_finite() {
        return Saturated::default();
    }
    let lim = params.available_torque(u, wheel_rate);
    let current = (u.clamp(-lim, lim) / params.torque_constant).clamp(-params.current_limit, params.current_limit);
    Saturated { torque: current * params.torque_constant, current }
}

/// Wheel-angle set point that slowly follows the wheel, so that a long run
/// of net wheel rotation does not wind up the angle feedback.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakyReference {
    pub value: f64,
    pub leak: f64,
}

impl LeakyReference {
    pub fn new(value: f64, leak: f64) -> Self {
        Self { value, leak }
    }

    pub fn update(&mut self, angle: f64) -> f64 {
        self.value += (1.0 - self.leak) * (angle - self.value);
        self.value
    }
}

/// Wheel angle references for the two loops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalanceRefs {
    pub q4: f64,
    pub q5: f64,
}

/// State vectors seen by the two LQR rows.
pub fn balance_states(est: &EstimatorState, enc: &EncoderReading, refs: &BalanceRefs) -> ([f64; 4], [f64; 4]) {
    (
        [est.q1_hat - est.q1_bar, est.euler_rates_g[0], enc.q5e - refs.q5, enc.dq5e],
        [est.q2_hat - est.q2_bar, est.euler_rates_g[1], enc.q4e - refs.q4, enc.dq4e],
    )
}

pub fn balance_law(est: &EstimatorState, enc: &EncoderReading, gains: &SignedGains, refs: &BalanceRefs) -> ControlInput {
    let (x1, x2) = balance_states(est, enc, refs);
    ControlInput { u1: gains.u1(&x1), u2: gains.u2(&x2) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn saturation_examples() {
        let p = RobotParams::default();
        let s = saturate_command(2.0, 0.0, &p);
        assert!((s.torque - 1.3).abs() < 1e-12);
        assert!((s.current - 1.3 / p.torque_constant).abs() < 1e-12);
        assert_eq!(saturate_command(f64::NAN, 0.0, &p), Saturated::default());
        // braking at speed keeps full torque
        assert!((saturate_command(-2.0, 400.0, &p).torque + 1.3).abs() < 1e-12);
        assert!(saturate_command(2.0, 400.0, &p).torque < 1.3);
    }

    #[test]
    fn current_limit_binds() {
        let mut p = RobotParams::default();
        p.current_limit = 5.0;
        let s = saturate_command(1.0, 0.0, &p);
        assert_eq!(s.current, 5.0);
        assert!((s.torque - 5.0 * p.torque_constant).abs() < 1e-12);
    }

    #[test]
    fn leak_converges() {
        let mut r = LeakyReference::new(0.0, 0.999);
        for _ in 0..10_000 {
            r.update(1.0);
        }
        assert!((r.value - 1.0).abs() < 1e-4);
        let mut hold = LeakyReference::new(2.0, 1.0);
        assert_eq!(hold.update(5.0), 2.0);
    }

    proptest! {
        #[test]
        fn saturation_idempotent_and_bounded(u in -10.0..10.0f64, w in -600.0..600.0f64) {
            let p = RobotParams::default();
            let s = saturate_command(u, w, &p);
            prop_assert!(s.torque.abs() <= p.available_torque(u, w) + 1e-12);
            prop_assert!(s.current.abs() <= p.current_limit + 1e-12);
            prop_assert!(s.torque * u >= 0.0);
            let again = saturate_command(s.torque, w, &p);
            prop_assert!((again.torque - s.torque).abs() < 1e-12);
        }
    }
}
