//! White-in-time, spatially linear incompressible velocity field and the
//! per-blob evolution operators it drives.
//!
//! The velocity gradient sigma(t) is a traceless 2x2 Gaussian matrix held
//! constant over each step `[k dt, (k+1) dt)`, with the isotropic
//! incompressible covariance
//!
//! ```text
//! <sigma_ij sigma_kl> = D/dt * (3 d_ik d_jl - d_ij d_kl - d_il d_jk)
//! ```
//!
//! A blob carries the pair (W, I): W is the linearized flow map from its
//! creation time (unimodular), and I the moment-of-inertia matrix of its
//! Gaussian profile, grown by diffusion and sheared by the flow:
//!
//! ```text
//! dI/dt = sigma I + I sigma^T + 2 kappa_d 1
//! ```
//!
//! Each step advances W with the exact traceless-matrix exponential, so
//! det W = 1 holds to rounding with no secular drift. Sampling a fresh
//! exponential per step corresponds to the Stratonovich (physical
//! white-noise-limit) reading of the flow; the Lyapunov exponent is
//! measured, never assumed.

use crate::error::{Error, Result};
use crate::geom::Mat2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Parameters of the stochastic flow and of the blob diffusion.
///
/// `d` is the gradient-covariance amplitude (1/time), `kappa_d` the
/// molecular diffusivity in units of L^2/time, `dt` the integration step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FlowParams {
    pub d: f64,
    pub kappa_d: f64,
    pub dt: f64,
    pub seed: u64,
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d >= 0.0 && self.d.is_finite()) {
            return Err(Error::InvalidParameter(format!("d = {}", self.d)));
        }
        if !(self.kappa_d >= 0.0 && self.kappa_d.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa_d = {}", self.kappa_d)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt = {}", self.dt)));
        }
        // The Lyapunov exponent of this flow scales like d; the step must
        // stay well below the stretching time.
        if self.dt * self.d >= 0.05 {
            return Err(Error::InvalidParameter(format!(
                "dt * d = {} >= 0.05; step too coarse for the stretching rate",
                self.dt * self.d
            )));
        }
        Ok(())
    }
}

/// One velocity-gradient matrix, valid over a single step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientSample {
    pub sigma: Mat2,
}

/// A reproducible stream of gradient samples. The sample for step `k` is a
/// pure function of `(seed, k)`, so concurrent readers always agree and
/// nothing needs to be persisted.
#[derive(Clone, Debug)]
pub struct FlowRealization {
    pub params: FlowParams,
    pub t_start: f64,
}

impl FlowRealization {
    pub fn new(params: FlowParams) -> Result<Self> {
        params.validate()?;
        Ok(FlowRealization { params, t_start: 0.0 })
    }

    /// Gradient sample for step `k`, i.e. for times in `[k dt, (k+1) dt)`.
    pub fn sample(&self, step_index: u64) -> GradientSample {
        sample_gradient(&self.params, step_index)
    }

    /// Step index containing time `t` (samples extend to t < t_start too).
    pub fn step_of(&self, t: f64) -> i64 {
        (t / self.params.dt).floor() as i64
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent substream seed; used for per-step gradients and
/// for the spawn/estimator streams so that all of them decorrelate.
pub fn substream_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ splitmix64(index))
}

const GRADIENT_TAG: u64 = 0x666c6f77; // "flow"

/// The unique traceless Gaussian gradient matrix for `(seed, step_index)`.
///
/// With sigma = [[a, p+q], [p-q, -a]] and independent a, p, q of variances
/// (D, D, 2D)/dt, the second moments reproduce the covariance tensor:
/// Var(sigma_12) = Var(sigma_21) = 3D/dt and <sigma_12 sigma_21> = -D/dt.
pub fn sample_gradient(params: &FlowParams, step_index: u64) -> GradientSample {
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(params.seed, GRADIENT_TAG, step_index));
    let s = (params.d / params.dt).sqrt();
    let a: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * s;
    let p: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * s;
    let q: f64 =
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * s * 2f64.sqrt();
    GradientSample { sigma: Mat2::new(a, p + q, p - q, -a) }
}

/// Exact exponential of a traceless 2x2 matrix.
///
/// By Cayley-Hamilton, M^2 = -det(M) I for traceless M, so
/// exp(M) = cosh(s) I + sinh(s)/s M with s^2 = -det(M) (trigonometric
/// branch for s^2 < 0). det(exp M) = exp(tr M) = 1 up to rounding.
pub fn exp_traceless(m: Mat2) -> Mat2 {
    let delta = -m.det();
    let (c, s_over) = if delta > 1e-12 {
        let s = delta.sqrt();
        (s.cosh(), s.sinh() / s)
    } else if delta < -1e-12 {
        let w = (-delta).sqrt();
        (w.cos(), w.sin() / w)
    } else {
        // series: cosh(s) = 1 + delta/2 + delta^2/24, sinh(s)/s = 1 + delta/6 + delta^2/120
        (1.0 + delta / 2.0 + delta * delta / 24.0, 1.0 + delta / 6.0 + delta * delta / 120.0)
    };
    Mat2::new(c + s_over * m.a, s_over * m.b, s_over * m.c, c + s_over * m.d)
}

/// Per-blob evolution operators: W maps the blob frame at creation to the
/// current time; I is the moment-of-inertia matrix (identity at creation,
/// i.e. an isotropic blob of width L).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionState {
    pub w: Mat2,
    pub i_mat: Mat2,
    pub t0: f64,
    pub t: f64,
    /// Index of the next gradient sample to apply.
    pub step: i64,
}

impl EvolutionState {
    pub fn at_creation(t0: f64, flow: &FlowRealization) -> Self {
        EvolutionState {
            w: Mat2::IDENTITY,
            i_mat: Mat2::IDENTITY,
            t0,
            t: t0,
            step: flow.step_of(t0),
        }
    }

    /// Restore a checkpointed state whose clock sits exactly on a step
    /// boundary with known index.
    pub fn restore(w: Mat2, i_mat: Mat2, t0: f64, t: f64, step: i64) -> Self {
        EvolutionState { w, i_mat, t0, t, step }
    }

    /// Advance by `h <= dt` inside the step covered by `sigma`:
    /// W <- E W, I <- E I E^T + 2 kappa_d h, with E = exp(sigma h).
    pub fn step_by(&mut self, sigma: &GradientSample, kappa_d: f64, h: f64) -> Result<()> {
        if !sigma.sigma.is_finite() {
            return Err(Error::NonFinite("gradient sample"));
        }
        let e = exp_traceless(sigma.sigma.scale(h));
        self.w = e.mul_mat(self.w);
        let diff = 2.0 * kappa_d * h;
        let sheared = e.mul_mat(self.i_mat).mul_mat(e.transpose());
        self.i_mat =
            Mat2::new(sheared.a + diff, sheared.b, sheared.c, sheared.d + diff).symmetrize();
        Ok(())
    }

    /// Advance to `t_target`, consuming gradient samples from the shared
    /// realization. Splitting the same interval across several calls at
    /// step boundaries composes exactly.
    pub fn evolve_to(&mut self, flow: &FlowRealization, t_target: f64) -> Result<()> {
        if t_target < self.t {
            return Err(Error::TimeReversal { t_target, t_now: self.t });
        }
        let dt = flow.params.dt;
        while self.t < t_target {
            let boundary = (self.step + 1) as f64 * dt;
            let sigma = flow.sample(self.step.max(0) as u64);
            if boundary <= t_target {
                let h = boundary - self.t;
                if h > 0.0 {
                    self.step_by(&sigma, flow.params.kappa_d, h)?;
                }
                self.t = boundary;
                self.step += 1;
            } else {
                let h = t_target - self.t;
                if h > 0.0 {
                    self.step_by(&sigma, flow.params.kappa_d, h)?;
                }
                self.t = t_target;
            }
        }
        Ok(())
    }

    /// Time elapsed since creation.
    pub fn age(&self) -> f64 {
        self.t - self.t0
    }
}

/// Result of the Monte-Carlo Lyapunov estimator.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub lambda: f64,
    pub stderr: f64,
    pub n_steps: u64,
    pub n_samples: u64,
}

impl LyapunovEstimate {
    /// True when the relative error exceeds 5%; callers should warn.
    pub fn is_noisy(&self) -> bool {
        self.lambda <= 0.0 || self.stderr / self.lambda > 0.05
    }
}

const LYAPUNOV_TAG: u64 = 0x6c796170; // "lyap"

/// Estimates lambda = <log |W(t) e|> / t over independent realizations.
///
/// Each sample evolves a unit vector through its own gradient stream,
/// renormalizing every few steps to avoid overflow. The standard error is
/// the spread of the per-sample growth rates.
pub fn estimate_lyapunov(params: &FlowParams, n_steps: u64, n_samples: u64) -> Result<LyapunovEstimate> {
    params.validate()?;
    if n_steps == 0 || n_samples == 0 {
        return Err(Error::InvalidParameter("n_steps and n_samples must be positive".into()));
    }
    use rayon::prelude::*;
    let rates: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let sub = FlowParams { seed: substream_seed(params.seed, LYAPUNOV_TAG, s), ..*params };
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(sub.seed, LYAPUNOV_TAG, !s));
            let phi: f64 =
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    * std::f64::consts::PI;
            let mut v = crate::geom::Vec2::new(phi.cos(), phi.sin());
            let mut log_norm = 0.0;
            for k in 0..n_steps {
                let e = exp_traceless(sample_gradient(&sub, k).sigma.scale(sub.dt));
                v = e.mul_vec(v);
                if k % 32 == 31 {
                    let n = v.norm();
                    log_norm += n.ln();
                    v = v.scale(1.0 / n);
                }
            }
            log_norm += v.norm().ln();
            log_norm / (n_steps as f64 * sub.dt)
        })
        .collect();
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(LyapunovEstimate {
        lambda: mean,
        stderr: (var / n).sqrt(),
        n_steps,
        n_samples,
    })
}
