//! IMU array and wheel encoders.
//!
//! Accelerometers report specific force, `p̈ - g_grav`. With z up this is
//! `ᴮp̈ + ᴮg` where `ᴮg = R_BI [0, 0, g0]` is the up-pointing gravity
//! reference, whose components are `g0 [-c1 s2, s1, c1 c2]`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{FrameMotion, FullState, Plant, Vec5};
use crate::error::SensorError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuConfig {
    /// positions relative to B, body frame
    pub positions: Vec<[f64; 3]>,
    /// sensor-to-body rotations R_Bi, row major; empty means axis aligned
    pub mount_rotations: Vec<[[f64; 3]; 3]>,
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    pub accel_range: f64,
    pub gyro_range: f64,
    pub counts_per_rev: u32,
}

impl Default for ImuConfig {
    fn default() -> Self {
        Self::tetrahedral(0.083 / 2.0, 9.81)
    }
}

impl ImuConfig {
    /// Four alternate corners of a cube with half edge `c`.
    pub fn tetrahedral(c: f64, g0: f64) -> Self {
        Self {
            positions: vec![[c, c, c], [c, -c, -c], [-c, c, -c], [-c, -c, c]],
            mount_rotations: Vec::new(),
            accel_sigma: 0.02,
            gyro_sigma: 0.002,
            accel_range: 2.0 * g0,
            gyro_range: 500f64.to_radians(),
            counts_per_rev: 4096,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.accel_sigma = 0.0;
        self.gyro_sigma = 0.0;
        self
    }

    pub fn unlimited(mut self) -> Self {
        self.accel_range = f64::INFINITY;
        self.gyro_range = f64::INFINITY;
        self
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }

    pub fn mount(&self, i: usize) -> Matrix3<f64> {
        match self.mount_rotations.get(i) {
            Some(m) => Matrix3::from_fn(|r, c| m[r][c]),
            None => Matrix3::identity(),
        }
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if self.positions.len() < 4 {
            return Err(SensorError::Invalid(format!("need at least 4 IMUs, got {}", self.positions.len())));
        }
        if !self.mount_rotations.is_empty() && self.mount_rotations.len() != self.positions.len() {
            return Err(SensorError::Invalid("one mount rotation per IMU".into()));
        }
        for i in 0..self.mount_rotations.len() {
            let r = self.mount(i);
            if (r.transpose() * r - Matrix3::identity()).norm() > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
                return Err(SensorError::Invalid(format!("mount rotation {i} is not a rotation")));
            }
        }
        if !(self.accel_range > 0.0) || !(self.gyro_range > 0.0) {
            return Err(SensorError::Invalid("ranges must be positive".into()));
        }
        if !(self.accel_sigma >= 0.0) || !(self.gyro_sigma >= 0.0) {
            return Err(SensorError::Invalid("noise levels must be non-negative".into()));
        }
        if self.counts_per_rev == 0 {
            return Err(SensorError::Invalid("counts_per_rev must be positive".into()));
        }
        let rank = position_rank(&self.positions);
        if rank < 4 {
            return Err(SensorError::RankDeficient { rank });
        }
        Ok(())
    }
}

/// Rank of `P P^T` for `P = [1; p_i]`, i.e. of the 4 x L matrix `P`.
pub fn position_rank(positions: &[[f64; 3]]) -> usize {
    let mut ppt = Matrix4::zeros();
    for p in positions {
        let col = nalgebra::Vector4::new(1.0, p[0], p[1], p[2]);
        ppt += col * col.transpose();
    }
    let ev = ppt.symmetric_eigenvalues();
    let tol = ev.max().abs() * 1e-12;
    ev.iter().filter(|e| **e > tol).count()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImuFrame {
    pub accel: Vec<[f64; 3]>,
    pub gyro: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderReading {
    pub q4e: f64,
    pub q5e: f64,
    pub dq4e: f64,
    pub dq5e: f64,
}

fn noise<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

fn clamp3(v: Vector3<f64>, range: f64) -> [f64; 3] {
    [v.x.clamp(-range, range), v.y.clamp(-range, range), v.z.clamp(-range, range)]
}

/// Readings for a frame moving with `motion`.
pub fn imu_from_motion<R: Rng + ?Sized>(motion: &FrameMotion, g0: f64, cfg: &ImuConfig, rng: &mut R) -> ImuFrame {
    let r_bi = motion.r_ib.transpose();
    let g_up = r_bi * Vector3::new(0.0, 0.0, g0);
    let a_b = r_bi * motion.accel_b;
    let (w, al) = (motion.omega_b, motion.alpha_b);
    let mut frame = ImuFrame::default();
    for i in 0..cfg.positions.len() {
        let p = cfg.position(i);
        let acc = a_b + al.cross(&p) + w.cross(&w.cross(&p)) + g_up;
        let r_ib_i = cfg.mount(i).transpose();
        frame.accel.push(clamp3(r_ib_i * acc + noise(cfg.accel_sigma, rng), cfg.accel_range));
        frame.gyro.push(clamp3(r_ib_i * w + noise(cfg.gyro_sigma, rng), cfg.gyro_range));
    }
    frame
}

pub fn simulate_imu_array<R: Rng + ?Sized>(
    plant: &Plant,
    state: &FullState,
    qdd: &Vec5,
    cfg: &ImuConfig,
    rng: &mut R,
) -> ImuFrame {
    imu_from_motion(&plant.frame_motion(state, qdd), plant.g0, cfg, rng)
}

fn quantize(angle: f64, counts_per_rev: u32) -> f64 {
    let q = std::f64::consts::TAU / counts_per_rev as f64;
    (angle / q).round() * q
}

pub fn counts(angle: f64, counts_per_rev: u32) -> i64 {
    (angle * counts_per_rev as f64 / std::f64::consts::TAU).round() as i64
}

/// Encoder reading of a wheel at relative angle `angle` turning at `rate`.
/// The rate is what the driver gets by differencing quantized angles one
/// sample apart, so it is exact for a wheel at rest.
pub fn encoder_channel(angle: f64, rate: f64, counts_per_rev: u32, ts: f64) -> (f64, f64) {
    let now = quantize(angle, counts_per_rev);
    let before = quantize(angle - rate * ts, counts_per_rev);
    (now, (now - before) / ts)
}

/// Wheels measured relative to the frame: `q4 - q2` and `q5 - q1`.
pub fn simulate_encoders(state: &FullState, cfg: &ImuConfig, ts: f64) -> EncoderReading {
    let (q, dq) = (&state.q, &state.dq);
    let (q4e, dq4e) = encoder_channel(q[3] - q[1], dq[3] - dq[1], cfg.counts_per_rev, ts);
    let (q5e, dq5e) = encoder_channel(q[4] - q[0], dq[4] - dq[0], cfg.counts_per_rev, ts);
    EncoderReading { q4e, q5e, dq4e, dq5e }
}
