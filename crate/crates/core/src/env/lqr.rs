use nalgebra::{DMatrix, Matrix2};
use rand::Rng;

use super::tasks::point_mass_step;
use crate::error::{Error, Result};
use crate::rng::{Domain, Streams};

const MAX_ITERATIONS: usize = 100_000;
const TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LqrSolution {
    /// Feedback gain, `u = -K x`.
    pub k: DMatrix<f64>,
    /// Cost-to-go, `V(x) = -xᵀ P x`.
    pub p: DMatrix<f64>,
    pub iterations: usize,
}

/// Iterates the discrete-time Riccati recursion from `P = Q` until the
/// largest elementwise change falls below `1e-10`.
pub fn solve_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<LqrSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Shape("inconsistent LQR system matrices".into()));
    }
    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + b.transpose() * p * b;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Numeric("R + BᵀPB is singular".into()))?;
        Ok(s_inv * b.transpose() * p * a)
    };
    let mut p = q.clone();
    for it in 1..=MAX_ITERATIONS {
        let k = gain(&p)?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let delta = (&next - &p).amax();
        if !delta.is_finite() {
            return Err(Error::Numeric("Riccati iteration diverged".into()));
        }
        p = next;
        if delta < TOLERANCE {
            let k = gain(&p)?;
            return Ok(LqrSolution { k, p, iterations: it });
        }
    }
    Err(Error::Numeric(format!(
        "Riccati iteration did not converge in {MAX_ITERATIONS} iterations"
    )))
}

/// Stage cost weights `xᵀ diag(q_p, q_v) x + r u²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LqrWeights {
    pub q_p: f64,
    pub q_v: f64,
    pub r: f64,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self {
            q_p: 1.0,
            q_v: 0.1,
            r: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqrOracle {
    pub gain: [f32; 2],
    pub p: [[f64; 2]; 2],
    pub spectral_radius: f64,
    /// Mean undiscounted episode return of the clipped controller `u = -K x`
    /// over `episodes` starts from the uniform initial distribution.
    pub mean_return: f32,
    /// Mean discounted return under the same simulation.
    pub discounted_return: f32,
    pub episodes: usize,
}

impl LqrOracle {
    /// Clipped optimal action for the state `(p, v)`.
    pub fn action(&self, p: f32, v: f32) -> f32 {
        (-(self.gain[0] * p + self.gain[1] * v)).clamp(-10.0, 10.0)
    }
}

/// Solves the point-mass LQR problem and estimates the controller's return by
/// simulating `episodes` episodes of `horizon` steps with the environment's
/// dynamics and action clipping.
pub fn lqr_oracle(
    dt: f32,
    weights: LqrWeights,
    horizon: usize,
    gamma: f32,
    episodes: usize,
    seed: u64,
) -> Result<LqrOracle> {
    let h = dt as f64;
    let a = DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[h * h, h]);
    let q = DMatrix::from_row_slice(2, 2, &[weights.q_p, 0.0, 0.0, weights.q_v]);
    let r = DMatrix::from_element(1, 1, weights.r);
    let sol = solve_riccati(&a, &b, &q, &r)?;
    let closed = Matrix2::new(
        1.0 - h * h * sol.k[(0, 0)],
        h - h * h * sol.k[(0, 1)],
        -h * sol.k[(0, 0)],
        1.0 - h * sol.k[(0, 1)],
    );
    let spectral_radius = closed
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    let mut oracle = LqrOracle {
        gain: [sol.k[(0, 0)] as f32, sol.k[(0, 1)] as f32],
        p: [
            [sol.p[(0, 0)], sol.p[(0, 1)]],
            [sol.p[(1, 0)], sol.p[(1, 1)]],
        ],
        spectral_radius,
        mean_return: 0.0,
        discounted_return: 0.0,
        episodes,
    };
    if episodes == 0 {
        return Ok(oracle);
    }
    let streams = Streams::new(seed);
    let (mut total, mut total_disc) = (0.0f64, 0.0f64);
    for e in 0..episodes {
        let mut rng = streams.rng(Domain::EnvInit, e as u64, 0);
        let mut s: (f32, f32) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let (mut ret, mut disc, mut g) = (0.0f64, 0.0f64, 1.0f64);
        for _ in 0..horizon {
            let u = oracle.action(s.0, s.1);
            let (next, rew) = point_mass_step(s, u, dt);
            ret += rew as f64;
            disc += g * rew as f64;
            g *= gamma as f64;
            s = next;
        }
        total += ret;
        total_disc += disc;
    }
    oracle.mean_return = (total / episodes as f64) as f32;
    oracle.discounted_return = (total_disc / episodes as f64) as f32;
    Ok(oracle)
}

/// Closed-form `E[-xᵀ P x]` for `x` uniform on `[-1, 1]²`, the
/// infinite-horizon unclipped value.
pub fn lqr_expected_value(p: &[[f64; 2]; 2]) -> f64 {
    -(p[0][0] + p[1][1]) / 3.0
}
