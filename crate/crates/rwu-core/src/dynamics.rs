//! Three-body model of the unicycle rolling without slip.
//!
//! Coordinates `q = [q1 roll, q2 pitch, q3 yaw, q4 rolling wheel, q5 reaction
//! wheel]`. The inertial frame has z up. Rotations compose as
//! `R_IB = R3(q3) R1(q1) R2(q2)`; the intermediate frames are C (yaw only,
//! attached to the contact point) and W (yaw and roll, attached to the
//! rolling-wheel centre). `q4` is measured relative to W, and `q5` is defined
//! so that the reaction wheel spins at `q̇5 - q̇1` relative to the frame.
//!
//! Equations of motion come from Kane's method with the five `q̇` as
//! generalized speeds. The contact constraint is already built into the
//! velocity map, so the contact position never enters the dynamics.

use nalgebra::{Matrix3, Matrix3x5, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dual::{add, cross, scale, Dual, Real, V3};
use crate::error::DynamicsError;
use crate::params::RobotParams;

pub type Vec5 = SVector<f64, 5>;
pub type Mat5 = SMatrix<f64, 5, 5>;

pub const FRAME: usize = 0;
pub const ROLLING: usize = 1;
pub const REACTION: usize = 2;

const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FullState {
    pub q: [f64; 5],
    pub dq: [f64; 5],
    pub contact_xy: [f64; 2],
    /// contact point velocity; kept consistent with the rolling constraint
    pub contact_vel: [f64; 2],
}

impl FullState {
    pub fn at_rest(q: [f64; 5]) -> Self {
        Self { q, ..Default::default() }
    }

    /// Contact velocity implied by the rolling constraint.
    pub fn rolling_velocity(&self, r_w: f64) -> [f64; 2] {
        let v = r_w * self.dq[3];
        [v * self.q[2].cos(), v * self.q[2].sin()]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub u1: f64,
    pub u2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub a1: SMatrix<f64, 4, 4>,
    pub b1: SVector<f64, 4>,
    pub a2: SMatrix<f64, 4, 4>,
    pub b2: SVector<f64, 4>,
}

fn rot1(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot2(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot3(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn r1(a: f64) -> Matrix3<f64> {
    rot1(a)
}

pub fn r2(a: f64) -> Matrix3<f64> {
    rot2(a)
}

/// `R_BI = R2ᵀ(q2) R1ᵀ(q1) R3ᵀ(q3)`.
pub fn rotation_body_from_inertial(q1: f64, q2: f64, q3: f64) -> Matrix3<f64> {
    rot2(q2).transpose() * rot1(q1).transpose() * rot3(q3).transpose()
}

/// `[ẋ - r q̇4 cos q3, ẏ - r q̇4 sin q3]`.
pub fn constraint_residual(state: &FullState, r_w: f64) -> [f64; 2] {
    let v = state.rolling_velocity(r_w);
    [state.contact_vel[0] - v[0], state.contact_vel[1] - v[1]]
}

/// Velocities of all three bodies, generic so it can be pushed through
/// dual numbers.
struct Chain<T> {
    /// columns of R_IB
    e_b: [V3<T>; 3],
    v: [V3<T>; 3],
    w: [V3<T>; 3],
}

fn chain<T: Real>(q: [T; 5], dq: [T; 5], r: f64, h: f64) -> Chain<T> {
    let (s1, c1) = (q[0].sin(), q[0].cos());
    let (s2, c2) = (q[1].sin(), q[1].cos());
    let (s3, c3) = (q[2].sin(), q[2].cos());
    let z = T::cst(0.0);
    let e3 = [z, z, T::cst(1.0)];
    let e1c = [c3, s3, z];
    let e2w = [-(s3 * c1), c3 * c1, s1];
    let e3w = [s3 * s1, -(c3 * s1), c1];
    let e1b = add(scale(c2, e1c), scale(-s2, e3w));
    let e3b = add(scale(s2, e1c), scale(c2, e3w));

    let w_w = add(scale(dq[2], e3), scale(dq[0], e1c));
    let w_b = add(w_w, scale(dq[1], e2w));
    let w_roll = add(w_w, scale(dq[3], e2w));
    let w_react = add(w_b, scale(dq[4] - dq[0], e1b));

    let rr = T::cst(r);
    let v_w = add(scale(rr * dq[3], e1c), scale(rr, cross(w_w, e3w)));
    let arm = cross(w_b, e3b);
    let v_b = add(v_w, scale(T::cst(h), arm));
    let v_r = add(v_w, scale(T::cst(2.0 * h), arm));

    Chain {
        e_b: [e1b, e2w, e3b],
        v: [v_b, v_w, v_r],
        w: [w_b, w_roll, w_react],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Probe {
    Vel(usize),
    Omega(usize),
    /// material point of the frame, body coordinates relative to B
    Point([f64; 3]),
}

fn probe<T: Real>(ch: &Chain<T>, p: Probe) -> V3<T> {
    match p {
        Probe::Vel(i) => ch.v[i],
        Probe::Omega(i) => ch.w[i],
        Probe::Point(pb) => {
            let r = add(
                add(scale(T::cst(pb[0]), ch.e_b[0]), scale(T::cst(pb[1]), ch.e_b[1])),
                scale(T::cst(pb[2]), ch.e_b[2]),
            );
            add(ch.v[FRAME], cross(ch.w[FRAME], r))
        }
    }
}

/// Jacobian (∂v/∂q̇) and velocity-product acceleration ((∂v/∂q) q̇) of each
/// probe.
fn jacobians(q: &[f64; 5], dq: &[f64; 5], r: f64, h: f64, probes: &[Probe]) -> Vec<(Matrix3x5<f64>, Vector3<f64>)> {
    let mut out = vec![(Matrix3x5::zeros(), Vector3::zeros()); probes.len()];
    for k in 0..5 {
        let mut e = [0.0; 5];
        e[k] = 1.0;
        let ch = chain(*q, e, r, h);
        for (o, p) in out.iter_mut().zip(probes) {
            let v = probe(&ch, *p);
            o.0.set_column(k, &Vector3::from(v));
        }
    }
    let qd: [Dual; 5] = std::array::from_fn(|i| Dual::new(q[i], dq[i]));
    let dqd: [Dual; 5] = std::array::from_fn(|i| Dual::cst(dq[i]));
    let ch = chain(qd, dqd, r, h);
    for (o, p) in out.iter_mut().zip(probes) {
        let v = probe(&ch, *p);
        o.1 = Vector3::new(v[0].eps, v[1].eps, v[2].eps);
    }
    out
}

/// Kinematic snapshot of the frame used to synthesize IMU readings.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMotion {
    pub r_ib: Matrix3<f64>,
    /// angular velocity and acceleration of the frame, body coordinates
    pub omega_b: Vector3<f64>,
    pub alpha_b: Vector3<f64>,
    /// inertial acceleration of B
    pub accel_b: Vector3<f64>,
}

/// Precomputed mass properties used by every dynamics call.
#[derive(Clone, Debug, PartialEq)]
pub struct Plant {
    pub r: f64,
    pub h: f64,
    pub g0: f64,
    mass: [f64; 3],
    frame_inertia: Matrix3<f64>,
    spin: f64,
    diam: f64,
}

impl Plant {
    pub fn new(p: &RobotParams) -> Self {
        Self {
            r: p.wheel_radius,
            h: p.wheel_offset(),
            g0: p.g0,
            mass: [p.frame_mass(), p.m_wheel, p.m_wheel],
            frame_inertia: p.frame_inertia(),
            spin: p.wheel_spin_inertia(),
            diam: p.wheel_diametral_inertia(),
        }
    }

    fn gravity(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.g0)
    }

    fn world_inertia(&self, body: usize, r_ib: &Matrix3<f64>) -> Matrix3<f64> {
        let axis = |n: Vector3<f64>| {
            Matrix3::identity() * self.diam + n * n.transpose() * (self.spin - self.diam)
        };
        match body {
            FRAME => r_ib * self.frame_inertia * r_ib.transpose(),
            ROLLING => axis(r_ib.column(1).into_owned()),
            _ => axis(r_ib.column(0).into_owned()),
        }
    }

    fn rotation(q: &[f64; 5]) -> Matrix3<f64> {
        rot3(q[2]) * rot1(q[0]) * rot2(q[1])
    }

    /// Mass matrix, velocity-dependent terms and gravity forces, all in
    /// generalized coordinates.
    fn terms(&self, s: &FullState) -> (Mat5, Vec5, Vec5) {
        const PROBES: [Probe; 6] = [
            Probe::Vel(0),
            Probe::Vel(1),
            Probe::Vel(2),
            Probe::Omega(0),
            Probe::Omega(1),
            Probe::Omega(2),
        ];
        let jb = jacobians(&s.q, &s.dq, self.r, self.h, &PROBES);
        let r_ib = Self::rotation(&s.q);
        let dq = Vec5::from(s.dq);
        let mut m = Mat5::zeros();
        let mut c = Vec5::zeros();
        let mut g = Vec5::zeros();
        for b in 0..3 {
            let (jv, av) = &jb[b];
            let (jw, aw) = &jb[3 + b];
            let i = self.world_inertia(b, &r_ib);
            let w = jw * dq;
            m += jv.transpose() * jv * self.mass[b] + jw.transpose() * i * jw;
            c += jv.transpose() * (av * self.mass[b]) + jw.transpose() * (i * aw + w.cross(&(i * w)));
            g += jv.transpose() * (self.gravity() * self.mass[b]);
        }
        (m, c, g)
    }

    pub fn mass_matrix(&self, q: &[f64; 5]) -> Mat5 {
        self.terms(&FullState::at_rest(*q)).0
    }

    /// Generalized forces of the two motors.
    pub fn input_forces(u: &ControlInput) -> Vec5 {
        Vec5::from([-u.u1, -u.u2, 0.0, u.u2, u.u1])
    }

    /// q̈ under motor torques `u` and extra generalized forces `ext`.
    pub fn accelerations(&self, s: &FullState, u: &ControlInput, ext: &Vec5) -> Result<Vec5, DynamicsError> {
        let (m, c, g) = self.terms(s);
        let eig = m.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(cond <= MAX_CONDITION) {
            return Err(DynamicsError::Singular { cond, q: s.q });
        }
        let rhs = g + Self::input_forces(u) + ext - c;
        m.cholesky()
            .map(|ch| ch.solve(&rhs))
            .ok_or(DynamicsError::Singular { cond, q: s.q })
    }

    /// Kinetic plus potential energy; zero at upright rest.
    pub fn energy(&self, s: &FullState) -> f64 {
        let (m, _, _) = self.terms(s);
        let dq = Vec5::from(s.dq);
        let kin = 0.5 * dq.dot(&(m * dq));
        let (c1, c2) = (s.q[0].cos(), s.q[1].cos());
        let zw = self.r * c1;
        let zb = zw + self.h * c1 * c2;
        let zr = zw + 2.0 * self.h * c1 * c2;
        let up = [self.r + self.h, self.r, self.r + 2.0 * self.h];
        let pot = self.g0
            * (self.mass[FRAME] * (zb - up[0]) + self.mass[ROLLING] * (zw - up[1]) + self.mass[REACTION] * (zr - up[2]));
        kin + pot
    }

    /// Generalized force of a world-frame force applied at a frame point
    /// given in body coordinates relative to B.
    pub fn point_force(&self, q: &[f64; 5], force: &Vector3<f64>, point_b: &Vector3<f64>) -> Vec5 {
        let j = jacobians(q, &[0.0; 5], self.r, self.h, &[Probe::Point((*point_b).into())]);
        j[0].0.transpose() * force
    }

    /// Ground reaction at the contact (world frame) needed to produce `qdd`,
    /// given any extra external force on the robot.
    pub fn contact_force(&self, s: &FullState, qdd: &Vec5, external: &Vector3<f64>) -> Vector3<f64> {
        let probes = [Probe::Vel(0), Probe::Vel(1), Probe::Vel(2)];
        let jb = jacobians(&s.q, &s.dq, self.r, self.h, &probes);
        let mut f = Vector3::zeros();
        for b in 0..3 {
            let a = jb[b].0 * qdd + jb[b].1;
            f += (a - self.gravity()) * self.mass[b];
        }
        f - external
    }

    pub fn frame_motion(&self, s: &FullState, qdd: &Vec5) -> FrameMotion {
        let probes = [Probe::Vel(FRAME), Probe::Omega(FRAME)];
        let jb = jacobians(&s.q, &s.dq, self.r, self.h, &probes);
        let dq = Vec5::from(s.dq);
        let r_ib = Self::rotation(&s.q);
        let rt = r_ib.transpose();
        FrameMotion {
            r_ib,
            omega_b: rt * (jb[1].0 * dq),
            alpha_b: rt * (jb[1].0 * qdd + jb[1].1),
            accel_b: jb[0].0 * qdd + jb[0].1,
        }
    }

    /// World-frame acceleration of the rolling-wheel centre.
    pub fn wheel_centre_accel(&self, s: &FullState, qdd: &Vec5) -> Vector3<f64> {
        let jb = jacobians(&s.q, &s.dq, self.r, self.h, &[Probe::Vel(ROLLING)]);
        jb[0].0 * qdd + jb[0].1
    }

    /// Positions of the three bodies (world frame, relative to the contact).
    pub fn body_positions(&self, q: &[f64; 5]) -> [Vector3<f64>; 3] {
        let r_ib = Self::rotation(q);
        let r3r1 = rot3(q[2]) * rot1(q[0]);
        let pw = r3r1.column(2) * self.r;
        let e3b = r_ib.column(2);
        [pw + e3b * self.h, pw.into_owned(), pw + e3b * (2.0 * self.h)]
    }
}

pub fn forward_dynamics(state: &FullState, u: &ControlInput, params: &RobotParams) -> Result<Vec5, DynamicsError> {
    Plant::new(params).accelerations(state, u, &Vec5::zeros())
}

pub fn total_energy(state: &FullState, params: &RobotParams) -> f64 {
    Plant::new(params).energy(state)
}

/// Generalized force of a push; `point` is on the frame, body coordinates
/// relative to B.
pub fn apply_push(state: &FullState, force: &Vector3<f64>, point: &Vector3<f64>, params: &RobotParams) -> Vec5 {
    Plant::new(params).point_force(&state.q, force, point)
}

pub const ROLL_STATES: [usize; 4] = [0, 5, 4, 9];
pub const PITCH_STATES: [usize; 4] = [1, 6, 3, 8];
const CROSS_TOL: f64 = 1e-8;
const FD_STEP: f64 = 1e-6;

/// Full 10-state linearization `[q; q̇]` around upright rest.
pub fn linearize_full(params: &RobotParams) -> Result<(SMatrix<f64, 10, 10>, SMatrix<f64, 10, 2>), DynamicsError> {
    let plant = Plant::new(params);
    let f = |x: &SVector<f64, 10>, u: &ControlInput| -> Result<SVector<f64, 10>, DynamicsError> {
        let s = FullState {
            q: std::array::from_fn(|i| x[i]),
            dq: std::array::from_fn(|i| x[5 + i]),
            ..Default::default()
        };
        let qdd = plant.accelerations(&s, u, &Vec5::zeros())?;
        let mut out = SVector::<f64, 10>::zeros();
        for i in 0..5 {
            out[i] = x[5 + i];
            out[5 + i] = qdd[i];
        }
        Ok(out)
    };
    let mut a = SMatrix::<f64, 10, 10>::zeros();
    let u0 = ControlInput::default();
    for j in 0..10 {
        let mut xp = SVector::<f64, 10>::zeros();
        xp[j] = FD_STEP;
        let d = (f(&xp, &u0)? - f(&(-xp), &u0)?) / (2.0 * FD_STEP);
        a.set_column(j, &d);
    }
    let mut b = SMatrix::<f64, 10, 2>::zeros();
    let x0 = SVector::<f64, 10>::zeros();
    for j in 0..2 {
        let (mut up, mut um) = (u0, u0);
        if j == 0 {
            up.u1 = FD_STEP;
            um.u1 = -FD_STEP;
        } else {
            up.u2 = FD_STEP;
            um.u2 = -FD_STEP;
        }
        let d = (f(&x0, &up)? - f(&x0, &um)?) / (2.0 * FD_STEP);
        b.set_column(j, &d);
    }
    Ok((a, b))
}

/// Largest entry coupling the roll and pitch blocks in the full
/// linearization.
pub fn cross_coupling(a: &SMatrix<f64, 10, 10>, b: &SMatrix<f64, 10, 2>) -> f64 {
    let mut worst: f64 = 0.0;
    for &i in &ROLL_STATES {
        for &j in &PITCH_STATES {
            worst = worst.max(a[(i, j)].abs()).max(a[(j, i)].abs());
        }
        worst = worst.max(b[(i, 1)].abs());
    }
    for &j in &PITCH_STATES {
        worst = worst.max(b[(j, 0)].abs());
    }
    worst
}

pub fn linearize_upright(params: &RobotParams) -> Result<LinearModel, DynamicsError> {
    let (a, b) = linearize_full(params)?;
    let worst = cross_coupling(&a, &b);
    if worst > CROSS_TOL {
        return Err(DynamicsError::Inconsistent(worst));
    }
    let block = |idx: &[usize; 4], col: usize| {
        let mut ab = SMatrix::<f64, 4, 4>::zeros();
        let mut bb = SVector::<f64, 4>::zeros();
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                ab[(r, c)] = a[(i, j)];
            }
            bb[r] = b[(i, col)];
        }
        (ab, bb)
    };
    let (a1, b1) = block(&ROLL_STATES, 0);
    let (a2, b2) = block(&PITCH_STATES, 1);
    Ok(LinearModel { a1, b1, a2, b2 })
}

pub fn controllability_rank(a: &SMatrix<f64, 4, 4>, b: &SVector<f64, 4>) -> usize {
    let mut c = SMatrix::<f64, 4, 4>::zeros();
    let mut col = *b;
    for k in 0..4 {
        c.set_column(k, &col);
        col = a * col;
    }
    let sv = c.svd(false, false).singular_values;
    let tol = sv.max() * 1e-10;
    sv.iter().filter(|s| **s > tol).count()
}
