//! Physical constants of the robot and the quantities derived from them.
//!
//! Geometry is described in the body frame B, whose origin is the centre of
//! mass of the whole assembly (batteries are assumed symmetric). The rolling
//! wheel centre W sits `wheel_offset()` below B, the reaction wheel centre the
//! same distance above it.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::ParamError;

/// Spin inertia reported for the built wheel (kg m²).
pub const MEASURED_WHEEL_INERTIA: f64 = 5e-4;

const RPM_TO_RAD_S: f64 = std::f64::consts::PI / 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WheelInertiaModel {
    /// Thin-walled hollow cylinder from mass, radius and rim depth.
    HollowCylinder,
    /// The fixed measured value, [`MEASURED_WHEEL_INERTIA`].
    Measured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotParams {
    pub half_height_a: f64,
    pub chassis_half_width_b: f64,
    pub wheel_radius: f64,
    pub lever_l1: f64,
    pub lever_l2: f64,
    pub brake_lever_l3: f64,
    pub m_total: f64,
    pub m_wheel: f64,
    /// radial thickness of the wheel rim
    pub rim_depth: f64,
    /// axial width of a wheel, only enters its diametral inertia
    pub wheel_width: f64,
    pub wheel_inertia_model: WheelInertiaModel,
    pub g0: f64,
    pub torque_constant: f64,
    pub current_limit: f64,
    pub max_torque: f64,
    pub knee_speed: f64,
    pub motor_kv_rpm_per_volt: f64,
    pub supply_voltage: f64,
    pub control_period: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        let a = 0.110;
        let b = 0.083;
        Self {
            half_height_a: a,
            chassis_half_width_b: b,
            wheel_radius: a - 0.004,
            lever_l1: 0.061,
            lever_l2: 0.061,
            brake_lever_l3: b / 2.0,
            m_total: 1.4,
            m_wheel: 0.32,
            rim_depth: 0.008,
            wheel_width: 0.006,
            wheel_inertia_model: WheelInertiaModel::HollowCylinder,
            g0: 9.81,
            torque_constant: 0.075,
            current_limit: 18.0,
            max_torque: 1.3,
            knee_speed: 282.0,
            motor_kv_rpm_per_volt: 160.0,
            supply_voltage: 22.0,
            control_period: 0.01,
        }
    }
}

/// Hollow-cylinder spin inertia `0.5 m ((r - d)² + r²)`.
pub fn wheel_inertia(m_wheel: f64, r_w: f64, rim_depth: f64) -> Result<f64, ParamError> {
    if !(m_wheel > 0.0) {
        return Err(ParamError::NonPositive("m_wheel", m_wheel));
    }
    if !(rim_depth > 0.0) {
        return Err(ParamError::NonPositive("rim_depth", rim_depth));
    }
    if !(r_w > rim_depth) {
        return Err(ParamError::Inconsistent(format!(
            "wheel radius {r_w} must exceed the rim depth {rim_depth}"
        )));
    }
    let ri = r_w - rim_depth;
    Ok(0.5 * m_wheel * (ri * ri + r_w * r_w))
}

impl RobotParams {
    pub fn from_json_str(s: &str) -> Result<Self, ParamError> {
        let p: RobotParams = serde_json::from_str(s).map_err(|e| ParamError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| ParamError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&s)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let positive = [
            ("half_height_a", self.half_height_a),
            ("chassis_half_width_b", self.chassis_half_width_b),
            ("wheel_radius", self.wheel_radius),
            ("m_total", self.m_total),
            ("m_wheel", self.m_wheel),
            ("rim_depth", self.rim_depth),
            ("wheel_width", self.wheel_width),
            ("g0", self.g0),
            ("torque_constant", self.torque_constant),
            ("current_limit", self.current_limit),
            ("max_torque", self.max_torque),
            ("knee_speed", self.knee_speed),
            ("motor_kv_rpm_per_volt", self.motor_kv_rpm_per_volt),
            ("supply_voltage", self.supply_voltage),
            ("control_period", self.control_period),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ParamError::NonPositive(name, v));
            }
        }
        for (name, v) in [
            ("lever_l1", self.lever_l1),
            ("lever_l2", self.lever_l2),
            ("brake_lever_l3", self.brake_lever_l3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ParamError::NonPositive(name, v));
            }
        }
        if self.wheel_radius >= self.half_height_a {
            return Err(ParamError::Inconsistent(format!(
                "wheel radius {} must be below the half height {}",
                self.wheel_radius, self.half_height_a
            )));
        }
        if self.m_total <= 2.0 * self.m_wheel {
            return Err(ParamError::Inconsistent(format!(
                "total mass {} leaves no mass for the frame (2 x {} in wheels)",
                self.m_total, self.m_wheel
            )));
        }
        let kt_i = self.torque_constant * self.current_limit;
        if (kt_i - self.max_torque).abs() > 0.1 * self.max_torque {
            return Err(ParamError::Inconsistent(format!(
                "max_torque {} differs from K_T*i_max = {kt_i:.4} by more than 10%",
                self.max_torque
            )));
        }
        if self.no_load_speed() <= self.knee_speed {
            return Err(ParamError::Inconsistent(format!(
                "no-load speed {:.1} rad/s must exceed the knee {}",
                self.no_load_speed(),
                self.knee_speed
            )));
        }
        wheel_inertia(self.m_wheel, self.wheel_radius, self.rim_depth)?;
        Ok(())
    }

    /// Distance from B down to the rolling-wheel centre (and up to the
    /// reaction-wheel centre).
    pub fn wheel_offset(&self) -> f64 {
        self.half_height_a - self.wheel_radius
    }

    pub fn frame_mass(&self) -> f64 {
        self.m_total - 2.0 * self.m_wheel
    }

    pub fn wheel_spin_inertia(&self) -> f64 {
        match self.wheel_inertia_model {
            WheelInertiaModel::HollowCylinder => {
                wheel_inertia(self.m_wheel, self.wheel_radius, self.rim_depth).unwrap_or(f64::NAN)
            }
            WheelInertiaModel::Measured => MEASURED_WHEEL_INERTIA,
        }
    }

    /// Inertia of a wheel about a diameter through its centre.
    pub fn wheel_diametral_inertia(&self) -> f64 {
        let w = self.wheel_width;
        0.5 * self.wheel_spin_inertia() + self.m_wheel * w * w / 12.0
    }

    /// Chassis modelled as a solid cube with edge `b`.
    pub fn frame_inertia(&self) -> Matrix3<f64> {
        let b = self.chassis_half_width_b;
        Matrix3::from_diagonal_element(self.frame_mass() * b * b / 6.0)
    }

    /// Composite inertia of frame plus both wheel rigid bodies about B,
    /// excluding the reaction wheel's own spin about the roll axis (that
    /// degree of freedom is carried by the wheel state).
    pub fn body_inertia_cog(&self) -> Matrix3<f64> {
        let h = self.wheel_offset();
        let (is, id, mw) = (
            self.wheel_spin_inertia(),
            self.wheel_diametral_inertia(),
            self.m_wheel,
        );
        // rolling wheel spins about y, reaction wheel about x
        let rolling = Matrix3::from_diagonal(&nalgebra::Vector3::new(id, is, id));
        let reaction = Matrix3::from_diagonal(&nalgebra::Vector3::new(0.0, id, id));
        let shift = Matrix3::from_diagonal(&nalgebra::Vector3::new(2.0 * mw * h * h, 2.0 * mw * h * h, 0.0));
        self.frame_inertia() + rolling + reaction + shift
    }

    /// max(L1, L2) m g: torque needed to hold the robot on either corner.
    pub fn static_torque_bound(&self) -> f64 {
        self.lever_l1.max(self.lever_l2) * self.m_total * self.g0
    }

    pub fn max_brake_torque(&self) -> f64 {
        self.brake_lever_l3 * self.m_total * self.g0
    }

    pub fn no_load_speed(&self) -> f64 {
        self.motor_kv_rpm_per_volt * self.supply_voltage * RPM_TO_RAD_S
    }

    /// Torque magnitude the motor can produce while accelerating at `omega`.
    pub fn torque_speed_envelope(&self, omega: f64) -> f64 {
        let w = omega.abs();
        let w0 = self.no_load_speed();
        if w <= self.knee_speed {
            self.max_torque
        } else if w >= w0 {
            0.0
        } else {
            self.max_torque * (w0 - w) / (w0 - self.knee_speed)
        }
    }

    /// Largest torque magnitude available in the direction of `u`, given the
    /// motor speed `omega`. Braking is limited only by `max_torque`.
    pub fn available_torque(&self, u: f64, omega: f64) -> f64 {
        if u * omega < 0.0 {
            self.max_torque
        } else {
            self.torque_speed_envelope(omega)
        }
    }
}
