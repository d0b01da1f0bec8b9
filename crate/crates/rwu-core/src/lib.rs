//! Simulation, estimation and control for a reaction-wheel unicycle.

mod dual;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod params;
pub mod estimation;
pub mod sensors;
pub mod sim;
pub mod standup;
