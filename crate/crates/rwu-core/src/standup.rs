//! Planar reaction-wheel pendulum for the two-step stand-up.
//!
//! The robot lies on its side and first pivots over the chassis corner C1,
//! then over the rolling-wheel rim C2. In body coordinates `(y, z)` with the
//! COG B at the origin, `C1 = (-b, -L1)` and `C2 = (0, -a)`. The pendulum
//! angle θ is the angle of the vector pivot→B from the vertical, positive
//! towards the side the robot lies on, so the body roll is
//! `q1 = θ + atan2(-y_p, -z_p)` for pivot `(y_p, z_p)`.

use serde::{Deserialize, Serialize};

use crate::error::StandupError;
use crate::params::RobotParams;

pub const DT: f64 = 1e-4;
/// a step that has not finished after this long has stalled
pub const STEP_TIMEOUT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PivotId {
    C1,
    C2,
    /// roll-up: the same contacts seen in the pitch plane, with the rolling
    /// wheel acting as the reaction wheel
    RollupSupport,
    RollupWheel,
}

impl PivotId {
    pub fn is_rollup(self) -> bool {
        matches!(self, PivotId::RollupSupport | PivotId::RollupWheel)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanarState {
    pub theta: f64,
    pub dtheta: f64,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PivotGeometry {
    pub pivot_id: PivotId,
    /// pivot position in body coordinates (y, z) relative to the COG
    pub pivot_body: [f64; 2],
    pub cog_distance: f64,
    pub theta_start: f64,
    pub theta_end: f64,
    pub theta_gravity_assist: f64,
    pub i_total: f64,
    /// body inertia about the COG in the plane of motion
    pub i_cog: f64,
    /// body roll (pitch for roll-up) minus θ
    pub roll_offset: f64,
}

impl PivotGeometry {
    pub fn sweep(&self) -> f64 {
        self.theta_start - self.theta_end
    }

    /// Rotation during which gravity still opposes the erection.
    pub fn gravity_assist_sweep(&self) -> f64 {
        self.theta_start - self.theta_gravity_assist
    }

    pub fn roll_from_theta(&self, theta: f64) -> f64 {
        theta + self.roll_offset
    }

    pub fn theta_from_roll(&self, q1: f64) -> f64 {
        q1 - self.roll_offset
    }
}

pub fn derive_pivot_geometry(params: &RobotParams, pivot_id: PivotId) -> PivotGeometry {
    let a = params.half_height_a;
    let b = params.chassis_half_width_b;
    let l1 = params.lever_l1;
    // roll at which both C1 and C2 touch the ground
    let q1_touch = ((a - l1) / b).atan();
    let pivot_body = match pivot_id {
        PivotId::C1 | PivotId::RollupSupport => [-b, -l1],
        PivotId::C2 | PivotId::RollupWheel => [0.0, -a],
    };
    let d = pivot_body[0].hypot(pivot_body[1]);
    let roll_offset = (-pivot_body[0]).atan2(-pivot_body[1]);
    let (q1_start, q1_end) = match pivot_id {
        PivotId::C1 | PivotId::RollupSupport => (std::f64::consts::FRAC_PI_2, q1_touch),
        PivotId::C2 | PivotId::RollupWheel => (q1_touch, 0.0),
    };
    let i_cog = if pivot_id.is_rollup() {
        params.body_inertia_cog()[(1, 1)] - params.wheel_spin_inertia()
    } else {
        params.body_inertia_cog()[(0, 0)]
    };
    PivotGeometry {
        pivot_id,
        pivot_body,
        cog_distance: d,
        theta_start: q1_start - roll_offset,
        theta_end: q1_end - roll_offset,
        theta_gravity_assist: 0.0,
        i_total: i_cog + params.m_total * d * d,
        i_cog,
        roll_offset,
    }
}

/// `(θ̈, ω̇)` for wheel torque `q_w`.
pub fn planar_dynamics(s: &PlanarState, q_w: f64, geom: &PivotGeometry, params: &RobotParams) -> (f64, f64) {
    let q_g = params.m_total * params.g0 * geom.cog_distance * s.theta.sin();
    ((q_g - q_w) / geom.i_total, q_w / params.wheel_spin_inertia())
}

/// Pendulum rate right after the pivot switches from `from` to `to`,
/// assuming a plastic impact that conserves angular momentum about the new
/// pivot. The wheel spin is untouched by the contact impulse.
pub fn touchdown_rate(params: &RobotParams, from: &PivotGeometry, to: &PivotGeometry, dtheta: f64) -> f64 {
    let i_cog = to.i_cog;
    let r_from = [-from.pivot_body[0], -from.pivot_body[1]];
    let r_to = [-to.pivot_body[0], -to.pivot_body[1]];
    let dot = r_from[0] * r_to[0] + r_from[1] * r_to[1];
    dtheta * (i_cog + params.m_total * dot) / to.i_total
}

pub fn rk4_planar(s: &PlanarState, q_w: f64, geom: &PivotGeometry, params: &RobotParams, dt: f64) -> PlanarState {
    let f = |x: &PlanarState| {
        let (ddth, dom) = planar_dynamics(x, q_w, geom, params);
        [x.dtheta, ddth, dom]
    };
    let add = |x: &PlanarState, k: [f64; 3], h: f64| PlanarState {
        theta: x.theta + h * k[0],
        dtheta: x.dtheta + h * k[1],
        omega: x.omega + h * k[2],
    };
    let k1 = f(s);
    let k2 = f(&add(s, k1, dt / 2.0));
    let k3 = f(&add(s, k2, dt / 2.0));
    let k4 = f(&add(s, k3, dt));
    let mut out = *s;
    out.theta += dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
    out.dtheta += dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
    out.omega += dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]);
    out
}

/// Keeps the body on the ground it is resting against.
pub fn ground_clamp(s: &mut PlanarState, geom: &PivotGeometry) {
    if s.theta >= geom.theta_start && s.dtheta >= 0.0 {
        s.theta = geom.theta_start;
        s.dtheta = 0.0;
    }
}

pub trait TorqueProfile {
    /// wheel torque at time `t` (since the start of the current step)
    fn torque(&self, t: f64, step: usize, s: &PlanarState) -> f64;
}

impl TorqueProfile for f64 {
    fn torque(&self, _: f64, _: usize, _: &PlanarState) -> f64 {
        *self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetweenSteps {
    /// wheel speed is simply set back to ω0
    Reset,
    /// wheel is driven to ω0 with the brake torque T3 while resting
    Brake,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub completed: bool,
    pub sweep: f64,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandupTrace {
    pub success: bool,
    pub steps: Vec<StepRecord>,
    pub peak_omega: f64,
    pub duration: f64,
    /// (t, step, θ, ω), decimated to 1 ms
    pub samples: Vec<(f64, usize, f64, f64)>,
}

impl StandupTrace {
    pub fn sweeps(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.sweep).collect()
    }
}

pub fn simulate_standup<P: TorqueProfile + ?Sized>(
    params: &RobotParams,
    profile: &P,
    omega0: f64,
) -> Result<StandupTrace, StandupError> {
    simulate_standup_with(params, profile, omega0, BetweenSteps::Reset)
}

pub fn simulate_standup_with<P: TorqueProfile + ?Sized>(
    params: &RobotParams,
    profile: &P,
    omega0: f64,
    between: BetweenSteps,
) -> Result<StandupTrace, StandupError> {
    let geoms = [
        derive_pivot_geometry(params, PivotId::C1),
        derive_pivot_geometry(params, PivotId::C2),
    ];
    let i_w = params.wheel_spin_inertia();
    let mut t_total = 0.0;
    let mut peak = 0.0f64;
    let mut steps = Vec::new();
    let mut samples = Vec::new();
    let mut omega_carry = omega0;
    for (k, g) in geoms.iter().enumerate() {
        let mut omega = omega0;
        if k > 0 && between == BetweenSteps::Brake {
            let t3 = params.max_brake_torque();
            if t3 <= 0.0 {
                return Err(StandupError::InfeasibleProfile { t: t_total, torque: 0.0, omega: omega_carry });
            }
            t_total += (omega0 - omega_carry).abs() * i_w / t3;
            omega = omega0;
        }
        let mut s = PlanarState { theta: g.theta_start, dtheta: 0.0, omega };
        peak = peak.max(s.omega.abs());
        let mut t = 0.0;
        let mut n = 0usize;
        let mut completed = false;
        while t < STEP_TIMEOUT {
            let u = profile.torque(t, k, &s);
            if u.abs() > params.available_torque(u, s.omega) + 1e-12 {
                return Err(StandupError::InfeasibleProfile { t: t_total + t, torque: u, omega: s.omega });
            }
            if n % 10 == 0 {
                samples.push((t_total + t, k, s.theta, s.omega));
            }
            s = rk4_planar(&s, u, g, params, DT);
            ground_clamp(&mut s, g);
            t += DT;
            n += 1;
            peak = peak.max(s.omega.abs());
            if s.theta <= g.theta_end {
                completed = true;
                break;
            }
        }
        t_total += t;
        omega_carry = s.omega;
        steps.push(StepRecord { completed, sweep: g.theta_start - s.theta.max(g.theta_end), duration: t });
        if !completed {
            return Ok(StandupTrace { success: false, steps, peak_omega: peak, duration: t_total, samples });
        }
    }
    Ok(StandupTrace { success: true, steps, peak_omega: peak, duration: t_total, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::WheelInertiaModel;
    use proptest::prelude::*;

    fn deg(x: f64) -> f64 {
        x.to_degrees()
    }

    #[test]
    fn geometry_sweeps() {
        let p = RobotParams::default();
        let g1 = derive_pivot_geometry(&p, PivotId::C1);
        let g2 = derive_pivot_geometry(&p, PivotId::C2);
        assert!((deg(g1.sweep() + g2.sweep()) - 90.0).abs() < 1e-9);
        assert!((deg(g1.sweep()) - 58.0).abs() <= 3.0, "{}", deg(g1.sweep()));
        assert!((deg(g2.sweep()) - 32.0).abs() <= 3.0, "{}", deg(g2.sweep()));
        assert!((deg(g1.gravity_assist_sweep()) - 36.0).abs() <= 3.0);
        assert!((g2.cog_distance - p.half_height_a).abs() < 1e-15);
        assert!((g1.roll_from_theta(g1.theta_end) - g2.roll_from_theta(g2.theta_start)).abs() < 1e-12);
    }

    #[test]
    fn planar_examples() {
        let p = RobotParams::default();
        let g = derive_pivot_geometry(&p, PivotId::C1);
        let s = PlanarState { theta: g.theta_gravity_assist, ..Default::default() };
        assert_eq!(planar_dynamics(&s, 0.0, &g, &p).0, 0.0);
        let (_, dw) = planar_dynamics(&s, 1.2, &g, &p);
        assert!((dw - 1.2 / p.wheel_spin_inertia()).abs() < 1e-12);
        // 360.4 with the inertia rounded to 3.33e-3
        assert!((dw * p.wheel_spin_inertia() / 3.33e-3 - 360.4).abs() < 0.05, "{dw}");
        // holding on the corner at rest
        let hold = PlanarState { theta: g.theta_start, ..Default::default() };
        let q = p.static_torque_bound();
        assert!(planar_dynamics(&hold, q, &g, &p).0.abs() < 1e-12);
        assert!((q - 0.83).abs() < 0.01);
    }

    #[test]
    fn rated_torque_succeeds() {
        let p = RobotParams::default();
        let tr = simulate_standup(&p, &1.2, -280.0).unwrap();
        assert!(tr.success);
        assert_eq!(tr.steps.len(), 2);
        assert!(tr.steps.iter().all(|s| s.completed));
    }

    #[test]
    fn weak_torques_fail() {
        let p = RobotParams::default();
        let tr = simulate_standup(&p, &0.0, -280.0).unwrap();
        assert!(!tr.success);
        assert_eq!(tr.steps[0].sweep, 0.0);
        let tr = simulate_standup(&p, &0.83, -280.0).unwrap();
        assert!(!tr.success);
    }

    #[test]
    fn measured_inertia_leaves_envelope() {
        let p = RobotParams { wheel_inertia_model: WheelInertiaModel::Measured, ..Default::default() };
        let r = simulate_standup(&p, &1.2, -280.0);
        assert!(matches!(r, Err(StandupError::InfeasibleProfile { .. })), "{r:?}");
    }

    #[test]
    fn brake_between_steps() {
        let p = RobotParams::default();
        let a = simulate_standup_with(&p, &1.2, -280.0, BetweenSteps::Brake).unwrap();
        let b = simulate_standup(&p, &1.2, -280.0).unwrap();
        assert!(a.success);
        assert!(a.duration > b.duration);
    }

    #[test]
    fn deterministic() {
        let p = RobotParams::default();
        assert_eq!(simulate_standup(&p, &1.2, -280.0).unwrap(), simulate_standup(&p, &1.2, -280.0).unwrap());
    }

    #[test]
    fn momentum_without_gravity() {
        let p = RobotParams { g0: 0.0, ..Default::default() };
        let g = derive_pivot_geometry(&p, PivotId::C1);
        let mut s = PlanarState { theta: 0.3, dtheta: 0.5, omega: -100.0 };
        let h0 = g.i_total * s.dtheta + p.wheel_spin_inertia() * s.omega;
        for k in 0..2000 {
            s = rk4_planar(&s, 0.9 * (k as f64 * 0.01).sin(), &g, &p, 1e-4);
        }
        let h1 = g.i_total * s.dtheta + p.wheel_spin_inertia() * s.omega;
        assert!((h1 - h0).abs() < 1e-14, "{h0} {h1}");
    }

    #[test]
    fn touchdown_keeps_momentum_about_new_pivot() {
        let p = RobotParams::default();
        let g1 = derive_pivot_geometry(&p, PivotId::C1);
        let g2 = derive_pivot_geometry(&p, PivotId::C2);
        let w = touchdown_rate(&p, &g1, &g2, -2.0);
        assert!(w < 0.0 && w > -2.0);
        assert!((touchdown_rate(&p, &g2, &g2, -2.0) + 2.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn monotone_in_torque(t in 0.85f64..1.3, dt in 0.0f64..0.3) {
            let p = RobotParams::default();
            let lo = simulate_standup(&p, &t, -280.0).map(|x| x.success).unwrap_or(false);
            let t2 = (t + dt).min(1.3);
            let hi = simulate_standup(&p, &t2, -280.0).map(|x| x.success).unwrap_or(false);
            prop_assert!(!lo || hi);
        }
    }
}
