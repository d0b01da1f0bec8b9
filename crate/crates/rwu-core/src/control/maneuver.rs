use serde::{Deserialize, Serialize};

use super::{balance_law, saturate_command, BalanceRefs, LeakyReference, Saturated, SignedGains};
use crate::dynamics::ControlInput;
use crate::estimation::EstimatorState;
use crate::params::RobotParams;
use crate::sensors::EncoderReading;
use crate::standup::{derive_pivot_geometry, PivotId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverPhase {
    Idle,
    StandupSpin,
    StandupStep1,
    StandupStep2,
    RollupContact,
    RollupRotate,
    BalanceRollOnly,
    BalanceFull,
    Fallen,
}

impl ManeuverPhase {
    pub const ALL: [ManeuverPhase; 9] = [
        ManeuverPhase::Idle,
        ManeuverPhase::StandupSpin,
        ManeuverPhase::StandupStep1,
        ManeuverPhase::StandupStep2,
        ManeuverPhase::RollupContact,
        ManeuverPhase::RollupRotate,
        ManeuverPhase::BalanceRollOnly,
        ManeuverPhase::BalanceFull,
        ManeuverPhase::Fallen,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ManeuverPhase::Idle => "idle",
            ManeuverPhase::StandupSpin => "standup_spin",
            ManeuverPhase::StandupStep1 => "standup_step1",
            ManeuverPhase::StandupStep2 => "standup_step2",
            ManeuverPhase::RollupContact => "rollup_contact",
            ManeuverPhase::RollupRotate => "rollup_rotate",
            ManeuverPhase::BalanceRollOnly => "balance_roll_only",
            ManeuverPhase::BalanceFull => "balance_full",
            ManeuverPhase::Fallen => "fallen",
        }
    }

    pub fn is_rollup(self) -> bool {
        matches!(self, ManeuverPhase::RollupContact | ManeuverPhase::RollupRotate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Balance,
    Standup,
    Rollup,
    /// prescribed translation with the controller switched off
    #[serde(rename = "estimator-ablation", alias = "estimator_ablation")]
    EstimatorAblation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MachineConfig {
    /// relative reaction-wheel rate to reach before the first step
    pub prespin_rate: f64,
    pub step1_exit_deg: f64,
    /// |roll| below which the energy controller hands over
    pub handoff_deg: f64,
    /// rate at which step 2 aims to arrive upright
    pub arrival_rate: f64,
    pub energy_gain: f64,
    pub upright_deg: f64,
    pub hold_time: f64,
    pub fall_deg: f64,
    pub rollup_prespin_rate: f64,
    pub rollup_torque: f64,
    pub rollup_touchdown_deg: f64,
    /// pitch band that ends the roll-up; wider than `upright_deg` because a
    /// rolling robot settles slowly in pitch
    pub rollup_upright_deg: f64,
    pub wheel_ref_leak: f64,
    pub timeout_spin: f64,
    pub timeout_step: f64,
    pub timeout_roll_only: f64,
    pub timeout_rollup_contact: f64,
    pub timeout_rollup_rotate: f64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            prespin_rate: -60.0,
            step1_exit_deg: 30.0,
            handoff_deg: 3.0,
            arrival_rate: 0.5,
            energy_gain: 500.0,
            upright_deg: 5.0,
            hold_time: 0.1,
            fall_deg: 40.0,
            rollup_prespin_rate: -80.0,
            rollup_torque: 1.3,
            rollup_touchdown_deg: 32.0,
            rollup_upright_deg: 10.0,
            wheel_ref_leak: 0.999,
            timeout_spin: 2.0,
            timeout_step: 1.0,
            timeout_roll_only: 2.0,
            timeout_rollup_contact: 3.0,
            timeout_rollup_rotate: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: ManeuverPhase,
    pub entered_at: f64,
    pub hold_since: Option<f64>,
    /// sub-stage inside a phase (roll-up spin, brake, coast)
    pub stage: u8,
}

impl PhaseState {
    pub fn new(phase: ManeuverPhase, t: f64) -> Self {
        Self { phase, entered_at: t, hold_since: None, stage: 0 }
    }
}

pub struct Observation<'a> {
    pub est: &'a EstimatorState,
    pub enc: &'a EncoderReading,
    /// ground friction cannot hold the contact
    pub slip: bool,
}

/// Phase machine plus balancing law, run once per control tick.
#[derive(Clone, Debug)]
pub struct Controller {
    pub params: RobotParams,
    pub gains: SignedGains,
    pub cfg: MachineConfig,
    pub maneuver: Maneuver,
    pub state: PhaseState,
    ref4: LeakyReference,
    ref5: LeakyReference,
    // step 2 energy model about the wheel rim
    i_c2: f64,
    mgd: f64,
    pub failure: Option<String>,
}

impl Controller {
    pub fn new(params: &RobotParams, gains: SignedGains, cfg: MachineConfig, maneuver: Maneuver) -> Self {
        let g = derive_pivot_geometry(params, PivotId::C2);
        Self {
            params: params.clone(),
            gains,
            maneuver,
            ref4: LeakyReference::new(0.0, cfg.wheel_ref_leak),
            ref5: LeakyReference::new(0.0, cfg.wheel_ref_leak),
            cfg,
            state: PhaseState::new(ManeuverPhase::Idle, 0.0),
            i_c2: g.i_total,
            mgd: params.m_total * params.g0 * g.cog_distance,
            failure: None,
        }
    }

    pub fn phase(&self) -> ManeuverPhase {
        self.state.phase
    }

    fn enter(&mut self, phase: ManeuverPhase, t: f64, enc: &EncoderReading) {
        if matches!(phase, ManeuverPhase::BalanceRollOnly | ManeuverPhase::BalanceFull | ManeuverPhase::RollupRotate)
            && !matches!(self.state.phase, ManeuverPhase::BalanceRollOnly | ManeuverPhase::RollupRotate)
        {
            self.ref4.value = enc.q4e;
            self.ref5.value = enc.q5e;
        }
        self.state = PhaseState::new(phase, t);
    }

    fn fall(&mut self, t: f64, why: String) {
        self.failure.get_or_insert(why);
        self.state = PhaseState::new(ManeuverPhase::Fallen, t);
    }

    fn timed_out(&self, t: f64, limit: f64) -> bool {
        t - self.state.entered_at > limit
    }

    /// true once `cond` has held for `hold_time`
    fn held(&mut self, cond: bool, t: f64) -> bool {
        if !cond {
            self.state.hold_since = None;
            return false;
        }
        let since = *self.state.hold_since.get_or_insert(t);
        t - since >= self.cfg.hold_time - 1e-9
    }

    /// One control tick: updates the phase and returns saturated commands.
    pub fn step(&mut self, t: f64, obs: &Observation) -> (Saturated, Saturated) {
        use ManeuverPhase::*;
        let (est, enc) = (obs.est, obs.enc);
        let deg = f64::to_radians;
        let c = self.cfg.clone();
        let (q1, q2) = (est.q1_hat, est.q2_hat);
        let upright = q1.abs() < deg(c.upright_deg) && q2.abs() < deg(c.upright_deg);
        let max = self.params.max_torque;

        // transitions
        match self.state.phase {
            Idle => match self.maneuver {
                _ if upright => self.enter(BalanceFull, t, enc),
                Maneuver::Standup if q1 > deg(60.0) => self.enter(StandupSpin, t, enc),
                Maneuver::Rollup if q2 > deg(60.0) => self.enter(RollupContact, t, enc),
                _ => self.fall(t, format!("cannot start from q1={q1:.3}, q2={q2:.3}")),
            },
            StandupSpin => {
                if enc.dq5e <= c.prespin_rate {
                    self.enter(StandupStep1, t, enc);
                } else if self.timed_out(t, c.timeout_spin) {
                    self.fall(t, "pre-spin did not reach its rate".into());
                }
            }
            StandupStep1 => {
                if q1 < deg(c.step1_exit_deg) {
                    self.enter(StandupStep2, t, enc);
                } else if self.timed_out(t, c.timeout_step) {
                    self.fall(t, "first step stalled".into());
                }
            }
            StandupStep2 => {
                if q1 < deg(c.handoff_deg) {
                    self.enter(BalanceRollOnly, t, enc);
                } else if self.timed_out(t, c.timeout_step) {
                    self.fall(t, "second step stalled".into());
                }
            }
            RollupContact => {
                if q2 < deg(c.rollup_touchdown_deg) {
                    self.enter(RollupRotate, t, enc);
                } else if self.timed_out(t, c.timeout_rollup_contact) {
                    self.fall(t, "roll-up never reached ground contact".into());
                }
            }
            RollupRotate => {
                if obs.slip {
                    self.fall(t, "rolling wheel slipped".into());
                } else if self.held(q2.abs() < deg(c.rollup_upright_deg) && q1.abs() < deg(c.upright_deg), t) {
                    self.enter(BalanceFull, t, enc);
                } else if self.timed_out(t, c.timeout_rollup_rotate) {
                    self.fall(t, "roll-up did not settle".into());
                }
            }
            BalanceRollOnly => {
                if q1.abs() > deg(c.fall_deg) {
                    self.fall(t, "fell during roll-only balance".into());
                } else if self.held(q1.abs() < deg(c.upright_deg), t) {
                    self.enter(BalanceFull, t, enc);
                } else if self.timed_out(t, c.timeout_roll_only) {
                    self.fall(t, "roll did not settle".into());
                }
            }
            BalanceFull => {
                if q1.abs() > deg(c.fall_deg) || q2.abs() > deg(c.fall_deg) {
                    self.fall(t, format!("tilt limit exceeded: q1={q1:.3}, q2={q2:.3}"));
                }
            }
            Fallen => {}
        }

        // commands
        let refs = BalanceRefs { q4: self.ref4.update(enc.q4e), q5: self.ref5.update(enc.q5e) };
        let lqr = balance_law(est, enc, &self.gains, &refs);
        let u = match self.state.phase {
            Idle | Fallen => ControlInput::default(),
            StandupSpin => ControlInput { u1: -max, u2: 0.0 },
            StandupStep1 => ControlInput { u1: max, u2: 0.0 },
            StandupStep2 => {
                let dth = est.euler_rates_g[0];
                let e = 0.5 * self.i_c2 * dth * dth + self.mgd * (q1.cos() - 1.0);
                let target = 0.5 * self.i_c2 * c.arrival_rate * c.arrival_rate;
                ControlInput { u1: (c.energy_gain * (e - target) * dth).clamp(-max, max), u2: 0.0 }
            }
            RollupContact => {
                let tau = c.rollup_torque.min(max);
                let u2 = match self.state.stage {
                    0 if enc.dq4e <= c.rollup_prespin_rate && tau > 0.0 => {
                        self.state.stage = 1;
                        tau
                    }
                    0 => -tau,
                    1 if enc.dq4e >= -1.0 => {
                        self.state.stage = 2;
                        0.0
                    }
                    1 => tau,
                    _ => 0.0,
                };
                ControlInput { u1: 0.0, u2 }
            }
            RollupRotate | BalanceFull => lqr,
            BalanceRollOnly => ControlInput { u1: lqr.u1, u2: 0.0 },
        };
        (saturate_command(u.u1, enc.dq5e, &self.params), saturate_command(u.u2, enc.dq4e, &self.params))
    }
}
