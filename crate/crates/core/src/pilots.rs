//! Training-schedule construction and pilot-length validation.
//!
//! The two-stage schedule realizes the decoupling premise: during the
//! digital-chain stage every analog beamformer column is the same vector, so
//! the array collapses to one virtual antenna per digital chain; during the
//! analog-chain stage only the first digital chain transmits and receives, so
//! the array behaves as a pure analog beamformer.

use crate::channel::SystemConfig;
use crate::mathkit::{CMatrix, CVector};
use crate::streams::Stream;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PilotError {
    #[error("digital-stage pilot length too short: q_dr = {q_dr} < m_t = {m_t}")]
    DigitalPilotTooShort { q_dr: usize, m_t: usize },
}

/// Digital-chain calibration stage: one shared analog beam per end, a
/// row-orthogonal pilot matrix, and the repetition count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitalStagePlan {
    /// Shared transmit-side analog beam (unit-modulus entries, length n_t).
    pub f_dr: CVector,
    /// Shared receive-side analog beam (unit-modulus entries, length n_r).
    pub b_dr: CVector,
    /// Pilot matrix, m_t x q_dr, satisfying `X* X^T = pilot_power * q_dr * I`.
    pub x_dr: CMatrix,
    /// Number of receive-beamformer repetitions.
    pub p_dr: usize,
}

/// Analog-chain calibration stage: per-transmission first-column beams and
/// the constant pilot scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogStagePlan {
    /// Transmit beams, n_t x q_da, unit-modulus entries.
    pub f_da: CMatrix,
    /// Receive beams, n_r x p_da, unit-modulus entries.
    pub b_da: CMatrix,
    /// Pilot scalars, length q_da, magnitude sqrt(pilot_power).
    pub x_da: CVector,
}

impl AnalogStagePlan {
    /// Transmit-side mixing matrix `f_da * diag(x_da)` (n_t x q_da).
    pub fn x_tilde(&self) -> CMatrix {
        self.f_da.scale_cols(&self.x_da)
    }

    /// Receive beams transposed (p_da x n_r), the orientation the estimators use.
    pub fn b_t(&self) -> CMatrix {
        self.b_da.transpose()
    }

    pub fn q_da(&self) -> usize {
        self.f_da.cols()
    }

    pub fn p_da(&self) -> usize {
        self.b_da.cols()
    }
}

/// Minimum admissible pilot lengths and whether the configured plan meets them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotLengthReport {
    pub q_dr_min: usize,
    pub p_dr_min: usize,
    pub q_da_min: usize,
    pub p_da_min: usize,
    pub ok: bool,
}

impl PilotLengthReport {
    /// Human-readable list of violated inequalities (empty when ok).
    pub fn violations(&self, cfg: &SystemConfig) -> Vec<String> {
        let p = &cfg.pilot_plan;
        let mut v = Vec::new();
        if p.q_dr < self.q_dr_min {
            v.push(format!("q_dr = {} < m_t = {}", p.q_dr, self.q_dr_min));
        }
        if p.p_dr < self.p_dr_min {
            v.push(format!("p_dr = {} < 1", p.p_dr));
        }
        if p.q_da < self.q_da_min {
            v.push(format!(
                "q_da = {} < n_t - k_paths + 1 = {}",
                p.q_da, self.q_da_min
            ));
        }
        if p.p_da < self.p_da_min {
            v.push(format!(
                "p_da = {} < n_r - k_paths + 1 = {}",
                p.p_da, self.p_da_min
            ));
        }
        v
    }
}

fn random_phase_vector(n: usize, rng: &mut Stream) -> CVector {
    CVector::from_fn(n, |_| Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI)))
}

fn random_phase_matrix(rows: usize, cols: usize, rng: &mut Stream) -> CMatrix {
    let mut m = CMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI));
        }
    }
    m
}

/// Build the digital-chain stage: random-phase shared beams and a pilot
/// matrix made of the first m_t rows of a q_dr-point DFT scaled by
/// sqrt(pilot_power), which is row-orthogonal with equal per-symbol power.
pub fn design_digital_stage(
    cfg: &SystemConfig,
    rng: &mut Stream,
) -> Result<DigitalStagePlan, PilotError> {
    let q = cfg.pilot_plan.q_dr;
    if q < cfg.m_t {
        return Err(PilotError::DigitalPilotTooShort {
            q_dr: q,
            m_t: cfg.m_t,
        });
    }
    let f_dr = random_phase_vector(cfg.n_t, rng);
    let b_dr = random_phase_vector(cfg.n_r, rng);
    let amp = cfg.pilot_power.sqrt();
    let x_dr = CMatrix::from_fn(cfg.m_t, q, |m, qq| {
        Complex64::from_polar(amp, -2.0 * PI * (m * qq) as f64 / q as f64)
    });
    Ok(DigitalStagePlan {
        f_dr,
        b_dr,
        x_dr,
        p_dr: cfg.pilot_plan.p_dr,
    })
}

/// Build the analog-chain stage: random-phase beams and constant pilots of
/// magnitude sqrt(pilot_power).
pub fn design_analog_stage(cfg: &SystemConfig, rng: &mut Stream) -> AnalogStagePlan {
    let f_da = random_phase_matrix(cfg.n_t, cfg.pilot_plan.q_da, rng);
    let b_da = random_phase_matrix(cfg.n_r, cfg.pilot_plan.p_da, rng);
    let x_da = CVector::from_fn(cfg.pilot_plan.q_da, |_| {
        Complex64::new(cfg.pilot_power.sqrt(), 0.0)
    });
    AnalogStagePlan { f_da, b_da, x_da }
}

/// Evaluate the pilot-length conditions: the digital stage needs
/// `q_dr >= m_t` and `p_dr >= 1`; the analog stage needs
/// `q_da >= n_t - k + 1` and `p_da >= n_r - k + 1`.
pub fn validate_pilot_lengths(cfg: &SystemConfig) -> PilotLengthReport {
    let q_dr_min = cfg.m_t;
    let p_dr_min = 1;
    let q_da_min = cfg.n_t - cfg.k_paths + 1;
    let p_da_min = cfg.n_r - cfg.k_paths + 1;
    let p = &cfg.pilot_plan;
    PilotLengthReport {
        q_dr_min,
        p_dr_min,
        q_da_min,
        p_da_min,
        ok: p.q_dr >= q_dr_min && p.p_dr >= p_dr_min && p.q_da >= q_da_min && p.p_da >= p_da_min,
    }
}
