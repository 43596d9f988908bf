//! Geometric mmWave channel and hardware mismatch generation.
//!
//! The wireless link is a K-path geometric model between two uniform linear
//! arrays. Every RF chain (digital and analog, transmit and receive, both
//! ends) carries one multiplicative mismatch coefficient; the eight diagonal
//! coefficient vectors are drawn log-normal in amplitude and uniform in phase.

use crate::mathkit::{CMatrix, CVector};
use crate::streams::Stream;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("digital chain count must not exceed antenna count: {0}")]
    ChainsExceedAntennas(String),
    #[error("path count {k} out of range: need 1 <= k <= min(n_t, n_r)/2 = {max}")]
    PathCount { k: usize, max: usize },
    #[error("{0} must be positive")]
    NonPositivePower(&'static str),
    #[error("antenna counts must be at least 1")]
    EmptyArray,
}

/// Training lengths: pilot-sequence length per beamformer configuration (Q)
/// and number of receive-beamformer configurations (P), for the digital-chain
/// and analog-chain stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotPlan {
    pub q_dr: usize,
    pub p_dr: usize,
    pub q_da: usize,
    pub p_da: usize,
}

/// Static description of the link: array sizes, chain counts, path count,
/// powers and the training-length plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Transmit-side (BS) antenna / analog-chain count.
    pub n_t: usize,
    /// Receive-side (UE) antenna / analog-chain count.
    pub n_r: usize,
    /// BS digital-chain count.
    pub m_t: usize,
    /// UE digital-chain count.
    pub m_r: usize,
    /// Propagation path count.
    pub k_paths: usize,
    /// Antenna spacing over wavelength (0.5 for half-wavelength ULA).
    pub d_over_lambda: f64,
    /// Noise variance (linear).
    pub noise_var: f64,
    /// Calibration pilot power (linear).
    pub pilot_power: f64,
    /// Data transmit power (linear).
    pub data_power: f64,
    pub pilot_plan: PilotPlan,
    /// Variance of the log-amplitude of the mismatch coefficients.
    pub mismatch_amp_var: f64,
    /// Mismatch phases are uniform on (-range, range) radians.
    pub mismatch_phase_range: f64,
}

impl SystemConfig {
    /// Baseline configuration with the simulation-section distributions and
    /// the minimal admissible pilot plan.
    pub fn new(n_t: usize, n_r: usize, m_t: usize, m_r: usize, k_paths: usize) -> Self {
        SystemConfig {
            n_t,
            n_r,
            m_t,
            m_r,
            k_paths,
            d_over_lambda: 0.5,
            noise_var: 1.0,
            pilot_power: 1.0,
            data_power: 1.0,
            pilot_plan: PilotPlan {
                q_dr: m_t,
                p_dr: 1,
                q_da: n_t.saturating_sub(k_paths) + 1,
                p_da: n_r.saturating_sub(k_paths) + 1,
            },
            mismatch_amp_var: 0.01,
            mismatch_phase_range: PI / 6.0,
        }
    }

    // The negated comparisons also reject NaN powers.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_t == 0 || self.n_r == 0 || self.m_t == 0 || self.m_r == 0 {
            return Err(ConfigError::EmptyArray);
        }
        if self.m_t > self.n_t {
            return Err(ConfigError::ChainsExceedAntennas(format!(
                "m_t = {} > n_t = {}",
                self.m_t, self.n_t
            )));
        }
        if self.m_r > self.n_r {
            return Err(ConfigError::ChainsExceedAntennas(format!(
                "m_r = {} > n_r = {}",
                self.m_r, self.n_r
            )));
        }
        let max_k = self.n_t.min(self.n_r) / 2;
        if self.k_paths == 0 || self.k_paths > max_k {
            return Err(ConfigError::PathCount {
                k: self.k_paths,
                max: max_k,
            });
        }
        if !(self.noise_var > 0.0) {
            return Err(ConfigError::NonPositivePower("noise_var"));
        }
        if !(self.pilot_power > 0.0) {
            return Err(ConfigError::NonPositivePower("pilot_power"));
        }
        if !(self.data_power > 0.0) {
            return Err(ConfigError::NonPositivePower("data_power"));
        }
        Ok(())
    }

    /// Role-swapped configuration for uplink training: antenna/chain counts of
    /// the two ends trade places, as do the analog-stage pilot counts.
    pub fn reversed(&self) -> SystemConfig {
        let mut r = self.clone();
        std::mem::swap(&mut r.n_t, &mut r.n_r);
        std::mem::swap(&mut r.m_t, &mut r.m_r);
        std::mem::swap(&mut r.pilot_plan.q_da, &mut r.pilot_plan.p_da);
        r
    }

    /// Total digital-stage training length L = Q * P.
    pub fn l_dr(&self) -> usize {
        self.pilot_plan.q_dr * self.pilot_plan.p_dr
    }
}

/// One draw of the K-path geometric channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    /// Complex path gains.
    pub alphas: CVector,
    /// Departure angles (transmit side), radians in [-pi/2, pi/2).
    pub thetas: Vec<f64>,
    /// Arrival angles (receive side), radians in [-pi/2, pi/2).
    pub phis: Vec<f64>,
}

impl ChannelRealization {
    /// Swap the two array roles: the transpose channel of the swapped
    /// realization equals the original channel matrix.
    pub fn reversed(&self) -> ChannelRealization {
        ChannelRealization {
            alphas: self.alphas.clone(),
            thetas: self.phis.clone(),
            phis: self.thetas.clone(),
        }
    }
}

/// The eight diagonal mismatch coefficient vectors.
///
/// Naming follows the transceiver layout: `t*`/`r*` are BS transmit/receive
/// chains, `v*`/`u*` are UE transmit/receive chains; suffix 1 is the digital
/// stage (chain counts), suffix 2 the analog stage (antenna counts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchSet {
    pub t1: CVector,
    pub t2: CVector,
    pub r1: CVector,
    pub r2: CVector,
    pub v1: CVector,
    pub v2: CVector,
    pub u1: CVector,
    pub u2: CVector,
}

impl MismatchSet {
    /// All coefficients exactly one (a perfectly reciprocal transceiver).
    pub fn identity(cfg: &SystemConfig) -> MismatchSet {
        MismatchSet {
            t1: CVector::ones(cfg.m_t),
            t2: CVector::ones(cfg.n_t),
            r1: CVector::ones(cfg.m_t),
            r2: CVector::ones(cfg.n_t),
            v1: CVector::ones(cfg.m_r),
            v2: CVector::ones(cfg.n_r),
            u1: CVector::ones(cfg.m_r),
            u2: CVector::ones(cfg.n_r),
        }
    }

    /// Mismatch vectors in the role-swapped (uplink) orientation.
    pub fn reversed(&self) -> MismatchSet {
        MismatchSet {
            t1: self.v1.clone(),
            t2: self.v2.clone(),
            r1: self.u1.clone(),
            r2: self.u2.clone(),
            v1: self.t1.clone(),
            v2: self.t2.clone(),
            u1: self.r1.clone(),
            u2: self.r2.clone(),
        }
    }
}

/// ULA steering vector: entry m is `exp(-j 2 pi (d/lambda) m sin(angle))`.
pub fn steering_vector(n: usize, angle: f64, d_over_lambda: f64) -> CVector {
    assert!(n >= 1, "steering vector needs at least one element");
    let w = -2.0 * PI * d_over_lambda * angle.sin();
    CVector::from_fn(n, |m| Complex64::from_polar(1.0, w * m as f64))
}

/// Derivative of [`steering_vector`] with respect to the angle; entry 0 is 0.
pub fn steering_gradient(n: usize, angle: f64, d_over_lambda: f64) -> CVector {
    assert!(n >= 1, "steering vector needs at least one element");
    let a = steering_vector(n, angle, d_over_lambda);
    let g = -2.0 * PI * d_over_lambda * angle.cos();
    CVector::from_fn(n, |m| a[m] * Complex64::new(0.0, g * m as f64))
}

/// Steering matrix with one column per angle.
pub fn steering_matrix(n: usize, angles: &[f64], d_over_lambda: f64) -> CMatrix {
    let cols: Vec<CVector> = angles
        .iter()
        .map(|&a| steering_vector(n, a, d_over_lambda))
        .collect();
    CMatrix::from_cols(&cols)
}

/// Gradient steering matrix with one column per angle.
pub fn steering_gradient_matrix(n: usize, angles: &[f64], d_over_lambda: f64) -> CMatrix {
    let cols: Vec<CVector> = angles
        .iter()
        .map(|&a| steering_gradient(n, a, d_over_lambda))
        .collect();
    CMatrix::from_cols(&cols)
}

/// Draw one channel realization: gains i.i.d. circular complex Gaussian with
/// unit variance, angles i.i.d. uniform on [-pi/2, pi/2).
pub fn sample_channel(cfg: &SystemConfig, rng: &mut Stream) -> ChannelRealization {
    let k = cfg.k_paths;
    let alphas = CVector::from_entries(
        (0..k)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
            })
            .collect(),
    );
    let thetas = (0..k).map(|_| rng.gen_range(-FRAC_PI_2..FRAC_PI_2)).collect();
    let phis = (0..k).map(|_| rng.gen_range(-FRAC_PI_2..FRAC_PI_2)).collect();
    ChannelRealization {
        alphas,
        thetas,
        phis,
    }
}

/// Expand a realization into the `n_t x n_r` channel matrix
/// `sqrt(n_t n_r / K) * sum_k alpha_k a_t(theta_k) a_r(phi_k)^T`.
pub fn assemble_channel(cfg: &SystemConfig, ch: &ChannelRealization) -> CMatrix {
    let k = ch.alphas.len();
    assert_eq!(k, cfg.k_paths, "realization path count mismatch");
    let scale = ((cfg.n_t * cfg.n_r) as f64 / k as f64).sqrt();
    let mut h = CMatrix::zeros(cfg.n_t, cfg.n_r);
    for kk in 0..k {
        let at = steering_vector(cfg.n_t, ch.thetas[kk], cfg.d_over_lambda);
        let ar = steering_vector(cfg.n_r, ch.phis[kk], cfg.d_over_lambda);
        let g = ch.alphas[kk] * scale;
        for q in 0..cfg.n_r {
            let c = g * ar[q];
            for p in 0..cfg.n_t {
                let d = c * at[p];
                h[(p, q)] += d;
            }
        }
    }
    h
}

/// Path-gain diagonal in the joint-estimation parameterization: the channel
/// prefactor `sqrt(n_t n_r / K)` is folded into the gains.
pub fn folded_gains(cfg: &SystemConfig, ch: &ChannelRealization) -> CVector {
    let scale = ((cfg.n_t * cfg.n_r) as f64 / cfg.k_paths as f64).sqrt();
    CVector::from_fn(cfg.k_paths, |k| ch.alphas[k] * scale)
}

fn sample_coefficients(n: usize, amp_var: f64, phase_range: f64, rng: &mut Stream) -> CVector {
    CVector::from_entries(
        (0..n)
            .map(|_| {
                let amp = if amp_var > 0.0 {
                    let g: f64 = rng.sample(StandardNormal);
                    (g * amp_var.sqrt()).exp()
                } else {
                    1.0
                };
                let phase = if phase_range > 0.0 {
                    rng.gen_range(-phase_range..phase_range)
                } else {
                    0.0
                };
                Complex64::from_polar(amp, phase)
            })
            .collect(),
    )
}

/// Draw the eight mismatch vectors, each entry `exp(g) exp(j psi)` with
/// `g ~ Normal(0, mismatch_amp_var)` and `psi ~ Uniform(-range, range)`.
pub fn sample_mismatch(cfg: &SystemConfig, rng: &mut Stream) -> MismatchSet {
    let av = cfg.mismatch_amp_var;
    let pr = cfg.mismatch_phase_range;
    MismatchSet {
        t1: sample_coefficients(cfg.m_t, av, pr, rng),
        t2: sample_coefficients(cfg.n_t, av, pr, rng),
        r1: sample_coefficients(cfg.m_t, av, pr, rng),
        r2: sample_coefficients(cfg.n_t, av, pr, rng),
        v1: sample_coefficients(cfg.m_r, av, pr, rng),
        v2: sample_coefficients(cfg.n_r, av, pr, rng),
        u1: sample_coefficients(cfg.m_r, av, pr, rng),
        u2: sample_coefficients(cfg.n_r, av, pr, rng),
    }
}
