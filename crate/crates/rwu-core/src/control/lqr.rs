#![allow(non_snake_case)]

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::LinearModel;
use crate::error::ControlError;

/// `exp(A)` by scaling and squaring with a Taylor series.
pub fn expm(A: &DMatrix<f64>) -> DMatrix<f64> {
    let n = A.nrows();
    let norm = A.abs().row_sum().max();
    let mut s = 0;
    if norm > 0.5 {
        s = (norm / 0.5).log2().ceil() as i32;
    }
    let As = A / 2f64.powi(s);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..40 {
        term = &term * &As / k as f64;
        sum += &term;
        if term.amax() <= f64::EPSILON * sum.amax() {
            break;
        }
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Zero-order-hold discretization through the exponential of `[[A, B], [0, 0]] Ts`.
pub fn zoh_discretize(A: &DMatrix<f64>, B: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (A.nrows(), B.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(A * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(B * ts));
    let e = expm(&aug);
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// Spectral radius by Gelfand's formula, `lim ||A^n||^(1/n)`, with
/// `n = 2^40` reached by repeated normalised squaring. The Schur solver in
/// nalgebra can stall on the defective matrices met here (wheel-angle
/// integrators), so it is not used.
pub fn spectral_radius(A: &DMatrix<f64>) -> f64 {
    const SQUARINGS: i32 = 40;
    let mut m = A.clone();
    let mut log_rho = 0.0;
    for k in 0..SQUARINGS {
        let n = m.norm();
        if n == 0.0 {
            return 0.0;
        }
        if !n.is_finite() {
            return f64::INFINITY;
        }
        m /= n;
        log_rho += n.ln() / 2f64.powi(k);
        m = &m * &m;
    }
    let n = m.norm();
    if n == 0.0 {
        return 0.0;
    }
    (log_rho + n.ln() / 2f64.powi(SQUARINGS)).exp()
}

pub fn controllability_rank(A: &DMatrix<f64>, B: &DMatrix<f64>) -> usize {
    let (n, m) = (A.nrows(), B.ncols());
    let mut c = DMatrix::zeros(n, n * m);
    let mut blk = B.clone();
    for k in 0..n {
        c.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = A * blk;
    }
    let sv = c.svd(false, false).singular_values;
    let tol = sv.max() * 1e-10;
    sv.iter().filter(|s| **s > tol).count()
}

/// Relative residual of the discrete Riccati equation at `P`.
pub fn riccati_residual(A: &DMatrix<f64>, B: &DMatrix<f64>, Q: &DMatrix<f64>, R: &DMatrix<f64>, P: &DMatrix<f64>) -> f64 {
    let btpa = B.transpose() * P * A;
    let s = R + B.transpose() * P * B;
    let Some(si) = s.try_inverse() else { return f64::INFINITY };
    let res = A.transpose() * P * A - P - btpa.transpose() * si * &btpa + Q;
    res.norm() / P.norm().max(1.0)
}

const MAX_DOUBLINGS: usize = 100;

/// Discrete LQR by the structured doubling algorithm. Returns `(K, P)` for
/// the law `u = -K x`.
pub fn solve_dare(
    A: &DMatrix<f64>,
    B: &DMatrix<f64>,
    Q: &DMatrix<f64>,
    R: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), ControlError> {
    let n = A.nrows();
    if Q.nrows() != n || Q.ncols() != n || R.nrows() != B.ncols() {
        return Err(ControlError::Weights("dimension mismatch".into()));
    }
    if Q.symmetric_eigenvalues().min() < -1e-14 {
        return Err(ControlError::Weights("Q must be positive semidefinite".into()));
    }
    if R.symmetric_eigenvalues().min() <= 0.0 {
        return Err(ControlError::Weights("R must be positive definite".into()));
    }
    let ri = R.clone().try_inverse().ok_or_else(|| ControlError::Weights("R singular".into()))?;
    let I = DMatrix::<f64>::identity(n, n);
    let mut Ak = A.clone();
    let mut Gk = B * ri * B.transpose();
    let mut Hk = Q.clone();
    let not_stab = || ControlError::NotStabilizable { rank: controllability_rank(A, B), n };
    let mut converged = false;
    for _ in 0..MAX_DOUBLINGS {
        let W = (&I + &Gk * &Hk).try_inverse().ok_or_else(not_stab)?;
        let AW = &Ak * &W;
        let Hn = &Hk + Ak.transpose() * &Hk * &W * &Ak;
        let Gn = &Gk + &AW * &Gk * Ak.transpose();
        let An = &AW * &Ak;
        let change = (&Hn - &Hk).norm();
        Hk = Hn;
        Gk = Gn;
        Ak = An;
        if !Hk.iter().all(|x| x.is_finite()) {
            return Err(not_stab());
        }
        if change <= 1e-13 * Hk.norm().max(1e-300) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ControlError::NoConvergence(MAX_DOUBLINGS));
    }
    let P = (&Hk + Hk.transpose()) * 0.5;
    let s = R + B.transpose() * &P * B;
    let K = s.try_inverse().ok_or_else(not_stab)? * B.transpose() * &P * A;
    if spectral_radius(&(A - B * &K)) >= 1.0 {
        return Err(not_stab());
    }
    Ok((K, P))
}

/// Feedback rows for `u1 = K1 x_roll`, `u2 = K2 x_pitch` with
/// `x_roll = [q1, q̇1, q5E, q̇5E]` and `x_pitch = [q2, q̇2, q4E, q̇4E]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrGains {
    pub k1: [f64; 4],
    pub k2: [f64; 4],
}

impl LqrGains {
    pub fn paper() -> Self {
        Self { k1: [4.5, 0.25, 0.0003, 0.0018], k2: [1.6, 0.14, 0.04, 0.0344] }
    }
}

/// Diagonal weights for the two blocks, in the controller coordinates above.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrWeights {
    pub q_roll: [f64; 4],
    pub r_roll: f64,
    pub q_pitch: [f64; 4],
    pub r_pitch: f64,
}

impl LqrWeights {
    /// Weights whose gains land close to the published ones.
    pub fn paper_like() -> Self {
        Self {
            q_roll: [2.6, 0.0, 1.1e-7, 3.9e-7],
            r_roll: 1.0,
            q_pitch: [0.57, 0.0, 5.8e-4, 0.0],
            r_pitch: 1.0,
        }
    }

    pub fn identity() -> Self {
        Self { q_roll: [1.0; 4], r_roll: 1.0, q_pitch: [1.0; 4], r_pitch: 1.0 }
    }
}

/// Change from `[q, q̇, q_wheel, q̇_wheel]` to encoder-relative wheel states.
fn relative_coords() -> SMatrix<f64, 4, 4> {
    SMatrix::<f64, 4, 4>::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        -1.0, 0.0, 1.0, 0.0, //
        0.0, -1.0, 0.0, 1.0,
    )
}

/// Discrete block in controller coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteBlock {
    pub ad: DMatrix<f64>,
    pub bd: DMatrix<f64>,
}

pub fn discrete_blocks(model: &LinearModel, ts: f64) -> (DiscreteBlock, DiscreteBlock) {
    let t = relative_coords();
    let ti = t.try_inverse().expect("unimodular");
    let conv = |a: &SMatrix<f64, 4, 4>, b: &SVector<f64, 4>| {
        let ac = t * a * ti;
        let bc = t * b;
        let (ad, bd) = zoh_discretize(
            &DMatrix::from_column_slice(4, 4, ac.as_slice()),
            &DMatrix::from_column_slice(4, 1, bc.as_slice()),
            ts,
        );
        DiscreteBlock { ad, bd }
    };
    (conv(&model.a1, &model.b1), conv(&model.a2, &model.b2))
}

#[derive(Clone, Debug)]
pub struct LqrDesign {
    pub roll: DiscreteBlock,
    pub pitch: DiscreteBlock,
    pub gains: LqrGains,
    pub p_roll: DMatrix<f64>,
    pub p_pitch: DMatrix<f64>,
}

/// LQR on both blocks. The returned gains follow the `u = +K x` convention.
pub fn synthesize(model: &LinearModel, weights: &LqrWeights, ts: f64) -> Result<LqrDesign, ControlError> {
    let (roll, pitch) = discrete_blocks(model, ts);
    let solve = |blk: &DiscreteBlock, q: &[f64; 4], r: f64| {
        let Q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(q));
        let R = DMatrix::from_element(1, 1, r);
        solve_dare(&blk.ad, &blk.bd, &Q, &R)
    };
    let (k1, p_roll) = solve(&roll, &weights.q_roll, weights.r_roll)?;
    let (k2, p_pitch) = solve(&pitch, &weights.q_pitch, weights.r_pitch)?;
    let gains = LqrGains {
        k1: std::array::from_fn(|i| -k1[(0, i)]),
        k2: std::array::from_fn(|i| -k2[(0, i)]),
    };
    Ok(LqrDesign { roll, pitch, gains, p_roll, p_pitch })
}

/// Closed loop of one block under `u_k = sign K x_{k - delay}`.
pub fn closed_loop(blk: &DiscreteBlock, k: &[f64; 4], sign: f64, delay: usize) -> DMatrix<f64> {
    let n = 4 + delay;
    let mut m = DMatrix::zeros(n, n);
    let kx = DMatrix::from_row_slice(1, 4, k) * sign;
    if delay == 0 {
        m.view_mut((0, 0), (4, 4)).copy_from(&(&blk.ad + &blk.bd * kx));
        return m;
    }
    // state [x; u_{k-1}; ...; u_{k-delay}]
    m.view_mut((0, 0), (4, 4)).copy_from(&blk.ad);
    m.view_mut((0, 3 + delay), (4, 1)).copy_from(&blk.bd);
    m.view_mut((4, 0), (1, 4)).copy_from(&kx);
    for j in 1..delay {
        m[(4 + j, 3 + j)] = 1.0;
    }
    m
}

/// Gains together with the sign that makes both loops stable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedGains {
    pub gains: LqrGains,
    pub sign_roll: f64,
    pub sign_pitch: f64,
}

impl SignedGains {
    pub fn u1(&self, x: &[f64; 4]) -> f64 {
        self.sign_roll * dot(&self.gains.k1, x)
    }

    pub fn u2(&self, x: &[f64; 4]) -> f64 {
        self.sign_pitch * dot(&self.gains.k2, x)
    }
}

fn dot(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Picks, per block, the sign under which the gains stabilize the
/// discretized linear model with the given actuation delay.
pub fn resolve_sign(gains: &LqrGains, model: &LinearModel, ts: f64, delay: usize) -> Result<SignedGains, ControlError> {
    let (roll, pitch) = discrete_blocks(model, ts);
    let pick = |blk: &DiscreteBlock, k: &[f64; 4], block: &'static str| {
        let rp = spectral_radius(&closed_loop(blk, k, 1.0, delay));
        let rn = spectral_radius(&closed_loop(blk, k, -1.0, delay));
        if rp < 1.0 && rp <= rn {
            Ok(1.0)
        } else if rn < 1.0 {
            Ok(-1.0)
        } else {
            Err(ControlError::Destabilizing { block, rho: rp.min(rn) })
        }
    };
    Ok(SignedGains {
        gains: *gains,
        sign_roll: pick(&roll, &gains.k1, "roll")?,
        sign_pitch: pick(&pitch, &gains.k2, "pitch")?,
    })
}
