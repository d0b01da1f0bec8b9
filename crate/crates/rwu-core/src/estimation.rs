//! Tilt estimation from the IMU array and the rolling-wheel encoder.
//!
//! Each accelerometer, after removing the rolling-wheel centre acceleration,
//! reads `m̂_i = g + Ω p_i` where `p_i` is its position relative to the wheel
//! centre W and `Ω = [ω]ײ + [ω̇]×`. Stacking `P = [1 ...; p_1 ...]` gives
//! `M = [g, Ω] P`, solved in the least-squares sense with the constant right
//! inverse `Pᵀ(PPᵀ)⁻¹`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{r1, r2};
use crate::error::{EstimationError, SensorError};
use crate::sensors::{position_rank, EncoderReading, ImuConfig, ImuFrame};

#[derive(Clone, Debug, PartialEq)]
pub struct LsWeights {
    pub x1: DVector<f64>,
    /// L x 3
    pub x2: DMatrix<f64>,
}

fn p_matrix(positions: &[[f64; 3]]) -> DMatrix<f64> {
    DMatrix::from_fn(4, positions.len(), |r, c| if r == 0 { 1.0 } else { positions[c][r - 1] })
}

pub fn precompute_ls_weights(positions: &[[f64; 3]]) -> Result<LsWeights, SensorError> {
    let rank = position_rank(positions);
    if rank < 4 {
        return Err(SensorError::RankDeficient { rank });
    }
    let p = p_matrix(positions);
    let ppt = &p * p.transpose();
    let inv = ppt.try_inverse().ok_or(SensorError::RankDeficient { rank: 3 })?;
    let x = p.transpose() * inv;
    Ok(LsWeights {
        x1: x.column(0).into_owned(),
        x2: x.columns(1, 3).into_owned(),
    })
}

impl LsWeights {
    /// `P [X1 X2]`, which should be the identity.
    pub fn right_inverse_check(&self, positions: &[[f64; 3]]) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(positions.len(), 4);
        x.set_column(0, &self.x1);
        x.columns_mut(1, 3).copy_from(&self.x2);
        p_matrix(positions) * x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EulerMap {
    /// rows `e1ᵀR2`, `e2ᵀ`, `e3ᵀR1R2`
    Published,
    /// exact inverse of the yaw-roll-pitch rate map
    Exact,
}

/// Euler rates from body-frame gyro readings at the previous tilt estimate.
pub fn gyro_euler_rates(gyro_body: &[Vector3<f64>], q1: f64, q2: f64, map: EulerMap) -> [f64; 3] {
    let mean = gyro_body.iter().fold(Vector3::zeros(), |a, w| a + w) / gyro_body.len() as f64;
    let w2 = r2(q2) * mean;
    let w12 = r1(q1) * w2;
    match map {
        EulerMap::Published => [w2.x, mean.y, w12.z],
        EulerMap::Exact => {
            let d2 = w12.y / q1.cos();
            [w12.x, d2, w12.z - q1.sin() * d2]
        }
    }
}

/// Dominant part of the wheel-centre acceleration, body frame.
pub fn pivot_acceleration(q4dd: f64, q1: f64, q2: f64, r_w: f64) -> Vector3<f64> {
    r2(q2).transpose() * r1(q1).transpose() * Vector3::new(r_w * q4dd, 0.0, 0.0)
}

/// Rates and accelerations needed by the complete wheel-centre expression.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PivotKinematics {
    pub q1: f64,
    pub q2: f64,
    pub dq1: f64,
    pub dq3: f64,
    pub dq4: f64,
    pub ddq1: f64,
    pub ddq3: f64,
    pub ddq4: f64,
}

/// Complete wheel-centre acceleration, body frame: contact point
/// acceleration plus the motion of W about the contact point.
pub fn pivot_acceleration_full(k: &PivotKinematics, r_w: f64) -> Vector3<f64> {
    let (s1, c1) = k.q1.sin_cos();
    let contact = Vector3::new(r_w * k.ddq4, r_w * k.dq4 * k.dq3, 0.0);
    let about = Vector3::new(
        2.0 * c1 * k.dq1 * k.dq3 + s1 * k.ddq3,
        s1 * k.dq1 * k.dq1 - c1 * k.ddq1 + s1 * k.dq3 * k.dq3,
        -c1 * k.dq1 * k.dq1 - s1 * k.ddq1,
    ) * r_w;
    r2(k.q2).transpose() * r1(k.q1).transpose() * (contact + about)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterStatus {
    WarmingUp,
    Ready,
}

/// First-order low-pass on the wheel rate followed by a first difference.
#[derive(Clone, Debug, PartialEq)]
pub struct WheelAccelFilter {
    beta: f64,
    ts: f64,
    y: Option<f64>,
}

impl WheelAccelFilter {
    pub fn new(cutoff_hz: f64, ts: f64) -> Self {
        Self { beta: 1.0 - (-std::f64::consts::TAU * cutoff_hz * ts).exp(), ts, y: None }
    }

    pub fn update(&mut self, rate: f64) -> (f64, FilterStatus) {
        match self.y {
            None => {
                self.y = Some(rate);
                (0.0, FilterStatus::WarmingUp)
            }
            Some(prev) => {
                let y = prev + self.beta * (rate - prev);
                self.y = Some(y);
                ((y - prev) / self.ts, FilterStatus::Ready)
            }
        }
    }

    pub fn filtered_rate(&self) -> Option<f64> {
        self.y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiltMeasurement {
    pub q1a: f64,
    pub q2a: f64,
    pub g_hat: Vector3<f64>,
    pub omega_hat: Matrix3<f64>,
}

/// Gravity and tilt from one IMU frame. `pivot_accel` is the body-frame
/// acceleration of W to subtract; `mounts` rotate sensor readings into the
/// body frame.
pub fn accel_tilt(
    frame: &ImuFrame,
    pivot_accel: &Vector3<f64>,
    weights: &LsWeights,
    mounts: &[Matrix3<f64>],
    g0: f64,
) -> Result<TiltMeasurement, EstimationError> {
    let l = frame.accel.len();
    let mut m = DMatrix::zeros(3, l);
    for i in 0..l {
        let mb = mounts[i] * Vector3::from(frame.accel[i]) - pivot_accel;
        m.set_column(i, &mb);
    }
    let g = &m * &weights.x1;
    let g_hat = Vector3::new(g[0], g[1], g[2]);
    let om = &m * &weights.x2;
    let omega_hat = Matrix3::from_fn(|r, c| om[(r, c)]);
    let norm = g_hat.norm();
    if norm < 0.1 * g0 {
        return Err(EstimationError::DegenerateGravity { norm });
    }
    Ok(TiltMeasurement {
        q1a: g_hat.y.atan2(g_hat.x.hypot(g_hat.z)),
        q2a: (-g_hat.x).atan2(g_hat.z),
        g_hat,
        omega_hat,
    })
}

/// `α qA + (1 - α)(q̂ + Ts q̇G)`.
pub fn complementary_fuse(prev: f64, qa: f64, rate: f64, alpha: f64, ts: f64) -> f64 {
    alpha * qa + (1.0 - alpha) * (prev + ts * rate)
}

/// -3 dB frequency of the accelerometer channel of the fusion filter.
pub fn fusion_cutoff_hz(alpha: f64, ts: f64) -> f64 {
    // |α / (1 - (1-α) e^{-jθ})|² = 1/2
    let b = 1.0 - alpha;
    let cos_t = (1.0 + b * b - 2.0 * alpha * alpha) / (2.0 * b);
    cos_t.clamp(-1.0, 1.0).acos() / (std::f64::consts::TAU * ts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compensation {
    Off,
    /// only the r q̈4 term
    Dominant,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub alpha: f64,
    pub compensation: Compensation,
    pub euler_map: EulerMap,
    pub wheel_filter_hz: f64,
    /// beyond this roll the accelerometer pitch is unobservable and only
    /// the gyro is integrated
    pub pitch_gate_deg: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { alpha: 0.02, compensation: Compensation::Dominant, euler_map: EulerMap::Published, wheel_filter_hz: 10.0, pitch_gate_deg: 60.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PivotAccelEstimate {
    pub pw_ddot_b: [f64; 3],
    pub q4_ddot_filtered: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub q1_hat: f64,
    pub q2_hat: f64,
    pub q1g: f64,
    pub q2g: f64,
    pub q3g: f64,
    pub euler_rates_g: [f64; 3],
    pub q1_bar: f64,
    pub q2_bar: f64,
    pub q1a: f64,
    pub q2a: f64,
    pub pivot: PivotAccelEstimate,
    /// accelerometer tilt was unusable this tick
    pub accel_rejected: bool,
    pub initialized: bool,
}

pub struct Estimator {
    pub cfg: EstimatorConfig,
    weights: LsWeights,
    mounts: Vec<Matrix3<f64>>,
    r_w: f64,
    g0: f64,
    ts: f64,
    filter: WheelAccelFilter,
    prev_rates: Option<[f64; 3]>,
    /// false while the rolling wheel turns clear of the ground, when its
    /// encoder says nothing about the motion of W
    pub rolling_contact: bool,
    pub state: EstimatorState,
}

/// IMU positions relative to the wheel centre W.
pub fn positions_about_wheel(imu: &ImuConfig, wheel_offset: f64) -> Vec<[f64; 3]> {
    imu.positions.iter().map(|p| [p[0], p[1], p[2] + wheel_offset]).collect()
}

impl Estimator {
    pub fn new(
        cfg: EstimatorConfig,
        imu: &ImuConfig,
        wheel_offset: f64,
        r_w: f64,
        g0: f64,
        ts: f64,
    ) -> Result<Self, SensorError> {
        imu.validate()?;
        if !(cfg.alpha >= 0.0 && cfg.alpha <= 1.0) {
            return Err(SensorError::Invalid(format!("fusion alpha {} outside [0, 1]", cfg.alpha)));
        }
        let weights = precompute_ls_weights(&positions_about_wheel(imu, wheel_offset))?;
        let filter = WheelAccelFilter::new(cfg.wheel_filter_hz, ts);
        Ok(Self {
            cfg,
            weights,
            mounts: (0..imu.positions.len()).map(|i| imu.mount(i)).collect(),
            r_w,
            g0,
            ts,
            filter,
            prev_rates: None,
            rolling_contact: true,
            state: EstimatorState::default(),
        })
    }

    pub fn weights(&self) -> &LsWeights {
        &self.weights
    }

    pub fn body_gyro(&self, frame: &ImuFrame) -> Vec<Vector3<f64>> {
        frame.gyro.iter().zip(&self.mounts).map(|(g, m)| m * Vector3::from(*g)).collect()
    }

    pub fn tilt(&self, frame: &ImuFrame, pivot: &Vector3<f64>) -> Result<TiltMeasurement, EstimationError> {
        accel_tilt(frame, pivot, &self.weights, &self.mounts, self.g0)
    }

    /// One control tick.
    pub fn step(&mut self, frame: &ImuFrame, enc: &EncoderReading) -> &EstimatorState {
        let (q1p, q2p) = (self.state.q1_hat, self.state.q2_hat);
        let rates = gyro_euler_rates(&self.body_gyro(frame), q1p, q2p, self.cfg.euler_map);
        let (q4dd, _) = self.filter.update(enc.dq4e);
        let pivot = match self.cfg.compensation {
            _ if !self.rolling_contact => Vector3::zeros(),
            Compensation::Off => Vector3::zeros(),
            Compensation::Dominant => pivot_acceleration(q4dd, q1p, q2p, self.r_w),
            Compensation::Full => {
                let prev = self.prev_rates.unwrap_or(rates);
                let k = PivotKinematics {
                    q1: q1p,
                    q2: q2p,
                    dq1: rates[0],
                    dq3: rates[2],
                    dq4: self.filter.filtered_rate().unwrap_or(enc.dq4e) + rates[1],
                    ddq1: (rates[0] - prev[0]) / self.ts,
                    ddq3: (rates[2] - prev[2]) / self.ts,
                    ddq4: q4dd,
                };
                pivot_acceleration_full(&k, self.r_w)
            }
        };
        self.prev_rates = Some(rates);
        let tilt = self.tilt(frame, &pivot);
        let st = &mut self.state;
        st.euler_rates_g = rates;
        st.pivot = PivotAccelEstimate { pw_ddot_b: pivot.into(), q4_ddot_filtered: q4dd };
        st.accel_rejected = tilt.is_err();
        if let Ok(t) = &tilt {
            st.q1a = t.q1a;
            st.q2a = t.q2a;
        }
        if !st.initialized {
            let (a1, a2) = match &tilt {
                Ok(t) => (t.q1a, t.q2a),
                Err(_) => (0.0, 0.0),
            };
            let a2 = if a1.abs() > self.cfg.pitch_gate_deg.to_radians() { 0.0 } else { a2 };
            st.q1_hat = a1;
            st.q2_hat = a2;
            st.q1g = a1;
            st.q2g = a2;
            st.q3g = 0.0;
            st.initialized = true;
            return &self.state;
        }
        st.q1g += self.ts * rates[0];
        st.q2g += self.ts * rates[1];
        st.q3g += self.ts * rates[2];
        let alpha = if st.accel_rejected { 0.0 } else { self.cfg.alpha };
        let alpha2 = if st.q1_hat.abs() > self.cfg.pitch_gate_deg.to_radians() { 0.0 } else { alpha };
        st.q1_hat = complementary_fuse(st.q1_hat, st.q1a, rates[0], alpha, self.ts);
        st.q2_hat = complementary_fuse(st.q2_hat, st.q2a, rates[1], alpha2, self.ts);
        &self.state
    }

    /// Mean accelerometer tilt over frames recorded at rest.
    pub fn calibrate_bias(&self, frames: &[ImuFrame], static_gyro_rms: f64) -> Result<(f64, f64), EstimationError> {
        if frames.is_empty() {
            return Err(EstimationError::NoFrames);
        }
        let mut ms = 0.0;
        let mut n = 0usize;
        for f in frames {
            for g in &f.gyro {
                ms += g.iter().map(|x| x * x).sum::<f64>();
                n += 3;
            }
        }
        ms /= n as f64;
        if ms > static_gyro_rms * static_gyro_rms {
            return Err(EstimationError::NotStatic(ms));
        }
        let (mut s1, mut s2) = (0.0, 0.0);
        for f in frames {
            let t = self.tilt(f, &Vector3::zeros())?;
            s1 += t.q1a;
            s2 += t.q2a;
        }
        let k = frames.len() as f64;
        Ok((s1 / k, s2 / k))
    }
}
