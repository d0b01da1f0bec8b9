use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("parameter {0} must be positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("inconsistent parameters: {0}")]
    Inconsistent(String),
    #[error("cannot parse parameters: {0}")]
    Parse(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("mass matrix near-singular (cond {cond:.3e}) at q = {q:?}")]
    Singular { cond: f64, q: [f64; 5] },
    #[error("linearization couples roll and pitch blocks (|entry| = {0:.3e})")]
    Inconsistent(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StandupError {
    #[error("torque profile leaves the motor envelope at t = {t:.4} s ({torque:.3} Nm at {omega:.1} rad/s)")]
    InfeasibleProfile { t: f64, torque: f64, omega: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("IMU positions are rank deficient (rank {rank} < 4); they must not be coplanar")]
    RankDeficient { rank: usize },
    #[error("invalid sensor configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("estimated gravity norm {norm:.3} m/s² is degenerate")]
    DegenerateGravity { norm: f64 },
    #[error("robot not static during calibration (gyro mean square {0:.3e})")]
    NotStatic(f64),
    #[error("calibration needs at least one frame")]
    NoFrames,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("Riccati iteration did not converge after {0} doublings")]
    NoConvergence(usize),
    #[error("pair (A, B) is not stabilizable: controllability rank {rank} of {n}")]
    NotStabilizable { rank: usize, n: usize },
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("gains do not stabilize the {block} block for either sign (spectral radius {rho:.5})")]
    Destabilizing { block: &'static str, rho: f64 },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("log format: {0}")]
    Csv(#[from] csv::Error),
}
