//! Closed-loop simulation: plant, sensors, estimator and controller driven
//! at the control rate, with the plant integrated on a finer grid.

mod log;

pub use log::{read_csv, write_csv, LogRow, RunSummary, CSV_COLUMNS, SETTLE_BAND};

use std::collections::VecDeque;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{
    resolve_sign, saturate_command, synthesize, Controller, LqrGains, LqrWeights, MachineConfig, Maneuver,
    ManeuverPhase, Observation, SignedGains,
};
use crate::dynamics::{linearize_upright, rotation_body_from_inertial, ControlInput, FrameMotion, FullState, Plant, Vec5};
use crate::error::SimError;
use crate::estimation::{Estimator, EstimatorConfig};
use crate::params::RobotParams;
use crate::sensors::{imu_from_motion, simulate_encoders, simulate_imu_array, EncoderReading, ImuConfig, ImuFrame};
use crate::standup::{derive_pivot_geometry, ground_clamp, planar_dynamics, rk4_planar, touchdown_rate, PivotGeometry, PivotId, PlanarState};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Initial {
    State {
        #[serde(default)]
        q: [f64; 5],
        #[serde(default)]
        dq: [f64; 5],
    },
    /// on the side, resting on the chassis corner and the wheel rim
    LyingRoll {
        #[serde(default)]
        wheel_rate: f64,
    },
    /// tipped forward onto the chassis corner, rolling wheel clear of the ground
    LyingPitch,
}

impl Default for Initial {
    fn default() -> Self {
        Initial::State { q: [0.0; 5], dq: [0.0; 5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GainSpec {
    Paper,
    Lqr { weights: LqrWeights },
    Custom { k1: [f64; 4], k2: [f64; 4] },
}

impl Default for GainSpec {
    fn default() -> Self {
        GainSpec::Paper
    }
}

/// World-frame force on a frame point (body coordinates relative to B).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub start: f64,
    pub duration: f64,
    pub force: [f64; 3],
    #[serde(default)]
    pub point: [f64; 3],
}

impl Disturbance {
    pub fn active(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.duration
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub maneuver: Maneuver,
    pub duration: f64,
    pub dt_physics: f64,
    /// control ticks between command and actuation
    pub delay_steps: usize,
    pub seed: u64,
    pub initial: Initial,
    pub disturbances: Vec<Disturbance>,
    pub params: RobotParams,
    pub imu: ImuConfig,
    pub estimator: EstimatorConfig,
    pub gains: GainSpec,
    pub machine: MachineConfig,
    pub friction_mu: f64,
    /// torsional friction of the tyre patch about the vertical, N m s/rad
    pub yaw_damping: f64,
    pub ablation: AblationProfile,
}

/// Rolling-wheel acceleration pulses for the estimator ablation: `+accel`
/// for `width` seconds at `start`, `-accel` half a period later, repeated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationProfile {
    pub accel: f64,
    pub width: f64,
    pub period: f64,
    pub start: f64,
}

impl Default for AblationProfile {
    fn default() -> Self {
        Self { accel: 10.0, width: 1.0, period: 4.0, start: 1.0 }
    }
}

impl AblationProfile {
    pub fn q4_ddot(&self, t: f64) -> f64 {
        if t < self.start {
            return 0.0;
        }
        let ph = (t - self.start).rem_euclid(self.period);
        if ph < self.width {
            self.accel
        } else if (ph - 0.5 * self.period) >= 0.0 && ph - 0.5 * self.period < self.width {
            -self.accel
        } else {
            0.0
        }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            schema_version: 0,
            name: "scenario".into(),
            maneuver: Maneuver::Balance,
            duration: 5.0,
            dt_physics: 1e-3,
            delay_steps: 1,
            seed: 0,
            initial: Initial::default(),
            disturbances: Vec::new(),
            params: RobotParams::default(),
            imu: ImuConfig::default(),
            estimator: EstimatorConfig::default(),
            gains: GainSpec::default(),
            machine: MachineConfig::default(),
            friction_mu: 0.8,
            yaw_damping: 0.0,
            ablation: AblationProfile::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn new(name: &str, maneuver: Maneuver, duration: f64) -> Self {
        Self { schema_version: SCHEMA_VERSION, name: name.into(), maneuver, duration, ..Default::default() }
    }

    pub fn from_json_str(s: &str) -> Result<Self, SimError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn substeps(&self) -> usize {
        (self.params.control_period / self.dt_physics).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SimError::Config(format!(
                "schema_version must be {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        self.params.validate()?;
        self.imu.validate()?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::Config("duration must be positive".into()));
        }
        let n = self.params.control_period / self.dt_physics;
        if !(self.dt_physics > 0.0) || n < 1.0 - 1e-9 || (n - n.round()).abs() > 1e-6 {
            return Err(SimError::Config("control period must be a whole number of physics steps".into()));
        }
        if !(self.friction_mu > 0.0) {
            return Err(SimError::Config("friction_mu must be positive".into()));
        }
        let a = &self.ablation;
        if !(a.accel.is_finite() && a.width > 0.0 && a.period >= 2.0 * a.width && a.start >= 0.0) {
            return Err(SimError::Config("ablation pulses must fit twice in a period".into()));
        }
        for d in &self.disturbances {
            if !(d.duration >= 0.0) || d.force.iter().chain(&d.point).any(|x| !x.is_finite()) {
                return Err(SimError::Config("disturbance must have finite force and non-negative duration".into()));
            }
        }
        Ok(())
    }

    pub fn resolve_gains(&self) -> Result<SignedGains, SimError> {
        let model = linearize_upright(&self.params)?;
        let ts = self.params.control_period;
        let gains = match &self.gains {
            GainSpec::Paper => LqrGains::paper(),
            GainSpec::Lqr { weights } => synthesize(&model, weights, ts)?.gains,
            GainSpec::Custom { k1, k2 } => LqrGains { k1: *k1, k2: *k2 },
        };
        Ok(resolve_sign(&gains, &model, ts, self.delay_steps)?)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Planar { geom: PivotGeometry, s: PlanarState, wheel_angle: f64 },
    Full(FullState),
}

/// Pose of a planar body expressed in the full coordinates.
fn planar_as_full(geom: &PivotGeometry, s: &PlanarState, wheel_angle: f64) -> FullState {
    let mut f = FullState::default();
    let ang = geom.roll_from_theta(s.theta);
    if geom.pivot_id.is_rollup() {
        f.q[1] = ang;
        f.dq[1] = s.dtheta;
        f.q[3] = wheel_angle;
        f.dq[3] = s.omega;
    } else {
        f.q[0] = ang;
        f.dq[0] = s.dtheta;
        f.q[4] = wheel_angle;
        f.dq[4] = s.omega;
    }
    f
}

fn planar_motion(geom: &PivotGeometry, s: &PlanarState, ddtheta: f64) -> FrameMotion {
    let ang = geom.roll_from_theta(s.theta);
    let [lat, vert] = geom.pivot_body;
    let (r_ib, axis, pivot_b) = if geom.pivot_id.is_rollup() {
        (rotation_body_from_inertial(0.0, ang, 0.0).transpose(), Vector3::y(), Vector3::new(-lat, 0.0, vert))
    } else {
        (rotation_body_from_inertial(ang, 0.0, 0.0).transpose(), Vector3::x(), Vector3::new(0.0, lat, vert))
    };
    let r = r_ib * -pivot_b;
    let w = axis * s.dtheta;
    let al = axis * ddtheta;
    FrameMotion { r_ib, omega_b: w, alpha_b: al, accel_b: al.cross(&r) + w.cross(&w.cross(&r)) }
}

/// Motor torque that acts in the plane of a planar phase.
fn planar_torque(geom: &PivotGeometry, u: &ControlInput) -> f64 {
    if geom.pivot_id.is_rollup() {
        u.u2
    } else {
        u.u1
    }
}

/// Torques the motors actually deliver at the current wheel speeds.
fn physical(u: &ControlInput, s: &FullState, p: &RobotParams) -> ControlInput {
    ControlInput {
        u1: saturate_command(u.u1, s.dq[4] - s.dq[0], p).torque,
        u2: saturate_command(u.u2, s.dq[3] - s.dq[1], p).torque,
    }
}

fn external(plant: &Plant, q: &[f64; 5], dist: &[&Disturbance]) -> (Vec5, Vector3<f64>) {
    let mut gen = Vec5::zeros();
    let mut total = Vector3::zeros();
    for d in dist {
        let f = Vector3::from(d.force);
        gen += plant.point_force(q, &f, &Vector3::from(d.point));
        total += f;
    }
    (gen, total)
}

/// Classical RK4 on the full state; the contact point follows the rolling
/// constraint.
pub fn rk4_step<F>(plant: &Plant, s: &FullState, u: &ControlInput, ext: F, dt: f64) -> Result<FullState, SimError>
where
    F: Fn(&FullState) -> Vec5,
{
    let deriv = |x: &FullState| -> Result<[f64; 12], SimError> {
        let qdd = plant.accelerations(x, u, &ext(x))?;
        let v = x.rolling_velocity(plant.r);
        let mut d = [0.0; 12];
        d[..5].copy_from_slice(&x.dq);
        d[5..10].copy_from_slice(qdd.as_slice());
        d[10..].copy_from_slice(&v);
        Ok(d)
    };
    let shift = |x: &FullState, k: &[f64; 12], h: f64| {
        let mut y = *x;
        for i in 0..5 {
            y.q[i] += h * k[i];
            y.dq[i] += h * k[5 + i];
        }
        y.contact_xy[0] += h * k[10];
        y.contact_xy[1] += h * k[11];
        y
    };
    let k1 = deriv(s)?;
    let k2 = deriv(&shift(s, &k1, dt / 2.0))?;
    let k3 = deriv(&shift(s, &k2, dt / 2.0))?;
    let k4 = deriv(&shift(s, &k3, dt))?;
    let mut k = [0.0; 12];
    for i in 0..12 {
        k[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
    }
    let mut out = shift(s, &k, dt);
    out.contact_vel = out.rolling_velocity(plant.r);
    Ok(out)
}

pub struct SimOutput {
    pub rows: Vec<LogRow>,
    pub summary: RunSummary,
}

/// Tilt beyond which the frame is lying on the floor.
const FLOOR_TILT: f64 = 80.0 * std::f64::consts::PI / 180.0;

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    if cfg.maneuver == Maneuver::EstimatorAblation {
        return run_ablation(cfg);
    }
    let p = &cfg.params;
    let ts = p.control_period;
    let plant = Plant::new(p);
    let gains = cfg.resolve_gains()?;
    let mut estimator = Estimator::new(cfg.estimator.clone(), &cfg.imu, p.wheel_offset(), p.wheel_radius, p.g0, ts)?;
    let mut controller = Controller::new(p, gains, cfg.machine.clone(), cfg.maneuver);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut body = match &cfg.initial {
        Initial::State { q, dq } => {
            let mut s = FullState { q: *q, dq: *dq, ..Default::default() };
            s.contact_vel = s.rolling_velocity(p.wheel_radius);
            Body::Full(s)
        }
        Initial::LyingRoll { wheel_rate } => {
            let geom = derive_pivot_geometry(p, PivotId::C1);
            let s = PlanarState { theta: geom.theta_start, dtheta: 0.0, omega: *wheel_rate };
            Body::Planar { geom, s, wheel_angle: 0.0 }
        }
        Initial::LyingPitch => {
            let geom = derive_pivot_geometry(p, PivotId::RollupSupport);
            let s = PlanarState { theta: geom.theta_start, dtheta: 0.0, omega: 0.0 };
            Body::Planar { geom, s, wheel_angle: 0.0 }
        }
    };

    let n_ticks = (cfg.duration / ts).round() as usize;
    let substeps = cfg.substeps();
    let dt = ts / substeps as f64;
    let mut delay: VecDeque<ControlInput> = std::iter::repeat(ControlInput::default()).take(cfg.delay_steps).collect();
    let mut applied = ControlInput::default();
    let mut rows = Vec::with_capacity(n_ticks + 1);
    let mut failure = None;

    'ticks: for k in 0..=n_ticks {
        let t = k as f64 * ts;
        let active: Vec<&Disturbance> = cfg.disturbances.iter().filter(|d| d.active(t)).collect();

        // sensing
        let (frame, enc, slip, shown): (ImuFrame, EncoderReading, bool, FullState) = match &body {
            Body::Full(s) => {
                let (mut gen, f_ext) = external(&plant, &s.q, &active);
                gen[2] -= cfg.yaw_damping * s.dq[2];
                let qdd = match plant.accelerations(s, &applied, &gen) {
                    Ok(a) => a,
                    Err(e) => {
                        failure = Some(e.to_string());
                        rows.push(fallen_row(t, s));
                        break 'ticks;
                    }
                };
                let frame = simulate_imu_array(&plant, s, &qdd, &cfg.imu, &mut rng);
                let f = plant.contact_force(s, &qdd, &f_ext);
                let slip = f.z <= 0.0 || f.x.hypot(f.y) > cfg.friction_mu * f.z;
                (frame, simulate_encoders(s, &cfg.imu, ts), slip, *s)
            }
            Body::Planar { geom, s, wheel_angle } => {
                let (mut ddth, _) = planar_dynamics(s, planar_torque(geom, &applied), geom, p);
                if s.theta >= geom.theta_start && s.dtheta == 0.0 && ddth > 0.0 {
                    // held by the floor
                    ddth = 0.0;
                }
                let frame = imu_from_motion(&planar_motion(geom, s, ddth), p.g0, &cfg.imu, &mut rng);
                let full = planar_as_full(geom, s, *wheel_angle);
                (frame, simulate_encoders(&full, &cfg.imu, ts), false, full)
            }
        };

        estimator.rolling_contact = controller.phase() != ManeuverPhase::RollupContact;
        let est = estimator.step(&frame, &enc).clone();
        let (s1, s2) = controller.step(t, &Observation { est: &est, enc: &enc, slip });
        delay.push_back(ControlInput { u1: s1.torque, u2: s2.torque });
        let cmd = delay.pop_front().unwrap_or_default();

        rows.push(LogRow {
            t,
            q1: shown.q[0],
            q2: shown.q[1],
            q3: shown.q[2],
            q4: shown.q[3],
            q5: shown.q[4],
            dq1: shown.dq[0],
            dq2: shown.dq[1],
            dq3: shown.dq[2],
            dq4: shown.dq[3],
            dq5: shown.dq[4],
            x: shown.contact_xy[0],
            y: shown.contact_xy[1],
            q1a: est.q1a,
            q2a: est.q2a,
            q1g: est.q1g,
            q2g: est.q2g,
            q3g: est.q3g,
            q1_hat: est.q1_hat,
            q2_hat: est.q2_hat,
            pivot_ax: est.pivot.pw_ddot_b[0],
            u1: s1.torque,
            u2: s2.torque,
            i1: s1.current,
            i2: s2.current,
            phase: controller.phase().name().into(),
            dist_flag: u8::from(!active.is_empty()),
        });
        if controller.phase() == ManeuverPhase::Fallen {
            failure = controller.failure.clone();
            break;
        }
        if k == n_ticks {
            break;
        }

        // plant
        for j in 0..substeps {
            let tj = t + j as f64 * dt;
            match &mut body {
                Body::Full(s) => {
                    applied = physical(&cmd, s, p);
                    let act: Vec<&Disturbance> = cfg.disturbances.iter().filter(|d| d.active(tj)).collect();
                    match rk4_step(&plant, s, &applied, |x| {
                        let mut g = external(&plant, &x.q, &act).0;
                        g[2] -= cfg.yaw_damping * x.dq[2];
                        g
                    }, dt) {
                        Ok(n) => *s = n,
                        Err(e) => {
                            failure = Some(e.to_string());
                            rows.push(fallen_row(tj + dt, s));
                            break 'ticks;
                        }
                    }
                    if s.q[0].abs() > FLOOR_TILT || s.q[1].abs() > FLOOR_TILT {
                        failure = Some(format!("frame hit the floor at t = {:.3} s", tj + dt));
                        rows.push(fallen_row(tj + dt, s));
                        break 'ticks;
                    }
                }
                Body::Planar { geom, s, wheel_angle } => {
                    let rate = s.omega - s.dtheta;
                    let tau = saturate_command(planar_torque(geom, &cmd), rate, p).torque;
                    applied = if geom.pivot_id.is_rollup() {
                        ControlInput { u1: 0.0, u2: tau }
                    } else {
                        ControlInput { u1: tau, u2: 0.0 }
                    };
                    let next = rk4_planar(s, tau, geom, p, dt);
                    *wheel_angle += 0.5 * (s.omega + next.omega) * dt;
                    *s = next;
                    ground_clamp(s, geom);
                    if s.theta <= geom.theta_end {
                        body = Body::Full(touchdown(geom, s, *wheel_angle, p));
                    }
                }
            }
        }
    }

    let summary = RunSummary::from_rows(&cfg.name, &rows, failure);
    Ok(SimOutput { rows, summary })
}

/// Upright frame carried along by the rolling wheel; only the estimator runs.
/// The same seed gives the same IMU noise whatever the compensation mode.
fn run_ablation(cfg: &ScenarioConfig) -> Result<SimOutput, SimError> {
    let p = &cfg.params;
    let ts = p.control_period;
    let plant = Plant::new(p);
    let mut estimator = Estimator::new(cfg.estimator.clone(), &cfg.imu, p.wheel_offset(), p.wheel_radius, p.g0, ts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_ticks = (cfg.duration / ts).round() as usize;
    let substeps = cfg.substeps();
    let dt = ts / substeps as f64;
    let mut s = FullState::default();
    let mut rows = Vec::with_capacity(n_ticks + 1);
    for k in 0..=n_ticks {
        let t = k as f64 * ts;
        let mut qdd = Vec5::zeros();
        qdd[3] = cfg.ablation.q4_ddot(t);
        s.contact_vel = s.rolling_velocity(p.wheel_radius);
        let frame = simulate_imu_array(&plant, &s, &qdd, &cfg.imu, &mut rng);
        let enc = simulate_encoders(&s, &cfg.imu, ts);
        let est = estimator.step(&frame, &enc).clone();
        rows.push(LogRow {
            t,
            q4: s.q[3],
            dq4: s.dq[3],
            x: s.contact_xy[0],
            y: s.contact_xy[1],
            q1a: est.q1a,
            q2a: est.q2a,
            q1g: est.q1g,
            q2g: est.q2g,
            q3g: est.q3g,
            q1_hat: est.q1_hat,
            q2_hat: est.q2_hat,
            pivot_ax: est.pivot.pw_ddot_b[0],
            phase: ManeuverPhase::Idle.name().into(),
            ..Default::default()
        });
        for j in 0..substeps {
            let a = cfg.ablation.q4_ddot(t + j as f64 * dt);
            let v0 = s.rolling_velocity(p.wheel_radius);
            s.q[3] += s.dq[3] * dt + 0.5 * a * dt * dt;
            s.dq[3] += a * dt;
            let v1 = s.rolling_velocity(p.wheel_radius);
            s.contact_xy[0] += 0.5 * (v0[0] + v1[0]) * dt;
            s.contact_xy[1] += 0.5 * (v0[1] + v1[1]) * dt;
        }
    }
    let summary = RunSummary::from_rows(&cfg.name, &rows, None);
    Ok(SimOutput { rows, summary })
}

/// First-order low-pass used to display tilt traces.
pub fn low_pass(xs: &[f64], cutoff_hz: f64, ts: f64) -> Vec<f64> {
    let a = 1.0 - (-2.0 * std::f64::consts::PI * cutoff_hz * ts).exp();
    let mut y = xs.first().copied().unwrap_or(0.0);
    xs.iter()
        .map(|&x| {
            y += a * (x - y);
            y
        })
        .collect()
}

/// Switch from the corner pivot to the wheel-rim contact.
fn touchdown(from: &PivotGeometry, s: &PlanarState, wheel_angle: f64, p: &RobotParams) -> FullState {
    let to_id = if from.pivot_id.is_rollup() { PivotId::RollupWheel } else { PivotId::C2 };
    let to = derive_pivot_geometry(p, to_id);
    let ang = from.roll_from_theta(s.theta);
    let rate = touchdown_rate(p, from, &to, s.dtheta);
    let mut f = planar_as_full(&to, &PlanarState { theta: to.theta_from_roll(ang), dtheta: rate, omega: s.omega }, wheel_angle);
    f.contact_vel = f.rolling_velocity(p.wheel_radius);
    f
}

fn fallen_row(t: f64, s: &FullState) -> LogRow {
    LogRow {
        t,
        q1: s.q[0],
        q2: s.q[1],
        q3: s.q[2],
        q4: s.q[3],
        q5: s.q[4],
        dq1: s.dq[0],
        dq2: s.dq[1],
        dq3: s.dq[2],
        dq4: s.dq[3],
        dq5: s.dq[4],
        x: s.contact_xy[0],
        y: s.contact_xy[1],
        phase: ManeuverPhase::Fallen.name().into(),
        ..Default::default()
    }
}
