//! Conventional relative-calibration baseline and overhead accounting.
//!
//! The baseline treats the hybrid array as a virtual fully-digital array with
//! one virtual antenna per (digital chain, analog chain) pair. It estimates
//! the big equivalent downlink/uplink channels by vectorized least squares
//! and computes relative calibration coefficients as the pinned-first-entry
//! null vector of the calibration relation. Dimensions grow as the product of
//! all chain counts, so runs are capped at desk scale; the baseline exists
//! for correctness and overhead comparison, not large-scale sweeps.

use crate::airlink::LinkDirection;
use crate::channel::{assemble_channel, ChannelRealization, MismatchSet, SystemConfig};
use crate::mathkit::{khatri_rao, kron, lstsq, vec_of, CMatrix, CVector, MathError};
use crate::streams::Stream;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Largest admissible equivalent-channel size (vec length of the big
/// equivalent matrix). The LS system scales with its square.
pub const MAX_EQ_VEC_LEN: usize = 4096;

#[derive(Debug, Error)]
pub enum CrcError {
    #[error("pilot lengths below the virtual-array minima: {0}")]
    PilotsTooShort(String),
    #[error("equivalent-channel size n_t*m_t*n_r*m_r = {size} exceeds the desk-scale cap {cap}")]
    DimensionCap { size: usize, cap: usize },
    #[error("rank-deficient {matrix}: numerical rank {rank} of {cols} columns")]
    RankDeficient {
        matrix: &'static str,
        rank: usize,
        cols: usize,
    },
    #[error("dimension error: {0}")]
    Dim(String),
}

fn map_err(matrix: &'static str) -> impl Fn(MathError) -> CrcError {
    move |e| match e {
        MathError::RankDeficient { rank, cols } => CrcError::RankDeficient { matrix, rank, cols },
        MathError::Dim(d) => CrcError::Dim(d),
    }
}

/// Per-transmission beamformers and pilots of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrcPlan {
    /// Transmit analog beamformers, one n_t x m_t matrix per q.
    pub f_blocks: Vec<CMatrix>,
    /// Receive analog beamformers, one n_r x m_r matrix per p.
    pub b_blocks: Vec<CMatrix>,
    /// Pilot columns, m_t x q_crc.
    pub pilots: CMatrix,
}

/// Stacked received pilots plus the sensing matrix and retained truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrcTrainingOutput {
    /// (m_r * p_crc) x q_crc received matrix.
    pub y_ue: CMatrix,
    /// Sensing matrix kron(F_eq^T, B_eq) relating vec(Y) to vec(H_eq).
    pub b_crc: CMatrix,
    /// Ground-truth equivalent channel, retained for oracle checks only.
    pub h_dl_eq_true: CMatrix,
}

/// Relative calibration coefficients, first entry pinned to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrcCoefficients {
    /// Length n_t*m_t + n_r*m_r; `c[0] == 1`.
    pub c: CVector,
}

impl CrcCoefficients {
    /// Transmit-end block (the first n_t*m_t entries).
    pub fn c_bs(&self, cfg: &SystemConfig) -> CVector {
        CVector::from_fn(cfg.n_t * cfg.m_t, |i| self.c[i])
    }

    /// Receive-end block (the remaining n_r*m_r entries).
    pub fn c_ue(&self, cfg: &SystemConfig) -> CVector {
        let off = cfg.n_t * cfg.m_t;
        CVector::from_fn(cfg.n_r * cfg.m_r, |i| self.c[off + i])
    }
}

/// Equivalent channel of the virtual array for the given direction: block
/// (m, m') is `u1[m] t1[m'] * (U2 H^T T2)` for the downlink, with the
/// role-swapped coefficients for the uplink. Dims (m_r n_r) x (m_t n_t).
pub fn equivalent_channel_true(
    dir: LinkDirection,
    cfg: &SystemConfig,
    ch: &ChannelRealization,
    mm: &MismatchSet,
) -> CMatrix {
    match dir {
        LinkDirection::Downlink => {
            let h = assemble_channel(cfg, ch);
            let core = h.transpose().scale_rows(&mm.u2).scale_cols(&mm.t2);
            let mut eq = CMatrix::zeros(cfg.m_r * cfg.n_r, cfg.m_t * cfg.n_t);
            for m in 0..cfg.m_r {
                for mp in 0..cfg.m_t {
                    let s = mm.u1[m] * mm.t1[mp];
                    for i in 0..cfg.n_r {
                        for j in 0..cfg.n_t {
                            eq[(m * cfg.n_r + i, mp * cfg.n_t + j)] = s * core[(i, j)];
                        }
                    }
                }
            }
            eq
        }
        LinkDirection::Uplink => equivalent_channel_true(
            LinkDirection::Downlink,
            &cfg.reversed(),
            &ch.reversed(),
            &mm.reversed(),
        ),
    }
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

/// Draw a random-phase training plan for the given direction.
pub fn crc_design_plan(
    dir: LinkDirection,
    cfg: &SystemConfig,
    q_crc: usize,
    p_crc: usize,
    rng: &mut Stream,
) -> CrcPlan {
    let c = match dir {
        LinkDirection::Downlink => cfg.clone(),
        LinkDirection::Uplink => cfg.reversed(),
    };
    let f_blocks = (0..q_crc)
        .map(|_| random_phase_matrix(c.n_t, c.m_t, rng))
        .collect();
    let b_blocks = (0..p_crc)
        .map(|_| random_phase_matrix(c.n_r, c.m_r, rng))
        .collect();
    let amp = c.pilot_power.sqrt();
    let pilots = CMatrix::from_fn(c.m_t, q_crc, |_, _| {
        Complex64::from_polar(amp, rng.gen_range(0.0..2.0 * PI))
    });
    CrcPlan {
        f_blocks,
        b_blocks,
        pilots,
    }
}

/// Simulate the virtual-array training with a given plan.
pub fn crc_run_training_with_plan(
    dir: LinkDirection,
    cfg: &SystemConfig,
    ch: &ChannelRealization,
    mm: &MismatchSet,
    plan: &CrcPlan,
    noise_var: f64,
    rng: &mut Stream,
) -> Result<CrcTrainingOutput, CrcError> {
    let (c, ch, mm) = match dir {
        LinkDirection::Downlink => (cfg.clone(), ch.clone(), mm.clone()),
        LinkDirection::Uplink => (cfg.reversed(), ch.reversed(), mm.reversed()),
    };
    let size = c.n_t * c.m_t * c.n_r * c.m_r;
    if size > MAX_EQ_VEC_LEN {
        return Err(CrcError::DimensionCap {
            size,
            cap: MAX_EQ_VEC_LEN,
        });
    }
    let q_crc = plan.f_blocks.len();
    let p_crc = plan.b_blocks.len();
    if q_crc < c.n_t * c.m_t || p_crc < c.n_r {
        return Err(CrcError::PilotsTooShort(format!(
            "q_crc = {} (need >= n_t*m_t = {}), p_crc = {} (need >= n_r = {})",
            q_crc,
            c.n_t * c.m_t,
            p_crc,
            c.n_r
        )));
    }

    let h = assemble_channel(&c, &ch);
    let h_eff = h.transpose().scale_rows(&mm.u2).scale_cols(&mm.t2);

    // Stacked equivalent beamformers: B_eq,p = blkdiag(b_p1^T, ..., b_pMr^T).
    let mut b_eq_blocks = Vec::with_capacity(p_crc);
    for b in plan.b_blocks.iter() {
        let mut beq = CMatrix::zeros(c.m_r, c.m_r * c.n_r);
        for m in 0..c.m_r {
            for i in 0..c.n_r {
                beq[(m, m * c.n_r + i)] = b[(i, m)];
            }
        }
        b_eq_blocks.push(beq);
    }
    // Equivalent transmit columns: block m' of column q is f_{q,m'} x_q[m'].
    let mut f_eq_cols = Vec::with_capacity(q_crc);
    for (q, f) in plan.f_blocks.iter().enumerate() {
        let mut col = CVector::zeros(c.m_t * c.n_t);
        for mp in 0..c.m_t {
            let x = plan.pilots[(mp, q)];
            for j in 0..c.n_t {
                col[mp * c.n_t + j] = f[(j, mp)] * x;
            }
        }
        f_eq_cols.push(col);
    }
    let f_eq = CMatrix::from_cols(&f_eq_cols);

    let s = (noise_var / 2.0).sqrt();
    let mut y_blocks = Vec::with_capacity(p_crc);
    for b in plan.b_blocks.iter() {
        let mut block = CMatrix::zeros(c.m_r, q_crc);
        for q in 0..q_crc {
            // Antenna-level transmit vector F_{t,q} T1 x_q.
            let mut ant = CVector::zeros(c.n_t);
            for mp in 0..c.m_t {
                let w = mm.t1[mp] * plan.pilots[(mp, q)];
                for j in 0..c.n_t {
                    ant[j] += plan.f_blocks[q][(j, mp)] * w;
                }
            }
            let mut rx = h_eff.mul_vec(&ant);
            if noise_var > 0.0 {
                for i in 0..c.n_r {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    rx[i] += Complex64::new(re * s, im * s);
                }
            }
            for m in 0..c.m_r {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..c.n_r {
                    acc += b[(i, m)] * rx[i];
                }
                block[(m, q)] = mm.u1[m] * acc;
            }
        }
        y_blocks.push(block);
    }
    let y_refs: Vec<&CMatrix> = y_blocks.iter().collect();
    let y_ue = CMatrix::vstack(&y_refs);
    let beq_refs: Vec<&CMatrix> = b_eq_blocks.iter().collect();
    let b_eq = CMatrix::vstack(&beq_refs);
    let b_crc = kron(&f_eq.transpose(), &b_eq);

    let mut h_dl_eq_true = CMatrix::zeros(c.m_r * c.n_r, c.m_t * c.n_t);
    for m in 0..c.m_r {
        for mp in 0..c.m_t {
            let sc = mm.u1[m] * mm.t1[mp];
            for i in 0..c.n_r {
                for j in 0..c.n_t {
                    h_dl_eq_true[(m * c.n_r + i, mp * c.n_t + j)] = sc * h_eff[(i, j)];
                }
            }
        }
    }

    Ok(CrcTrainingOutput {
        y_ue,
        b_crc,
        h_dl_eq_true,
    })
}

/// Simulate one training run with freshly drawn random-phase beamformers.
#[allow(clippy::too_many_arguments)]
pub fn crc_run_training(
    dir: LinkDirection,
    cfg: &SystemConfig,
    ch: &ChannelRealization,
    mm: &MismatchSet,
    q_crc: usize,
    p_crc: usize,
    noise_var: f64,
    rng: &mut Stream,
) -> Result<CrcTrainingOutput, CrcError> {
    let plan = crc_design_plan(dir, cfg, q_crc, p_crc, rng);
    crc_run_training_with_plan(dir, cfg, ch, mm, &plan, noise_var, rng)
}

/// LS estimate of the equivalent channel from one training output.
pub fn crc_estimate_equivalent_channel(out: &CrcTrainingOutput) -> Result<CMatrix, CrcError> {
    let v = lstsq(&out.b_crc, &vec_of(&out.y_ue)).map_err(map_err("b_crc"))?;
    let rows = out.h_dl_eq_true.rows();
    let cols = out.h_dl_eq_true.cols();
    Ok(v.into_matrix(rows, cols))
}

/// Relative calibration coefficients with the first entry pinned to one.
///
/// The calibration relation couples the two equivalent channels through
/// per-end diagonal corrections; stacking it columnwise turns the joint
/// coefficient vector into a null vector, solved in LS form after fixing the
/// first transmit-end coefficient.
pub fn crc_coefficients(h_ul_eq: &CMatrix, h_dl_eq: &CMatrix) -> Result<CrcCoefficients, CrcError> {
    let bs_len = h_ul_eq.rows(); // n_t m_t
    let ue_len = h_ul_eq.cols(); // n_r m_r
    if h_dl_eq.rows() != ue_len || h_dl_eq.cols() != bs_len {
        return Err(CrcError::Dim(format!(
            "equivalent channels disagree: uplink {}x{}, downlink {}x{}",
            h_ul_eq.rows(),
            h_ul_eq.cols(),
            h_dl_eq.rows(),
            h_dl_eq.cols()
        )));
    }
    let left = khatri_rao(&CMatrix::identity(bs_len), &h_ul_eq.transpose())
        .expect("identity column count matches");
    let right = khatri_rao(&h_dl_eq.transpose(), &CMatrix::identity(ue_len))
        .expect("identity column count matches");
    let h_crc = CMatrix::hstack(&[&left, &right.scale(Complex64::new(-1.0, 0.0))]);

    let h1 = h_crc.col(0);
    let h2 = h_crc.block(0, 1, h_crc.rows(), h_crc.cols() - 1);
    let tail = lstsq(&h2, &h1.scale(Complex64::new(-1.0, 0.0))).map_err(map_err("h_crc"))?;
    let mut c = CVector::zeros(bs_len + ue_len);
    c[0] = Complex64::new(1.0, 0.0);
    for i in 1..bs_len + ue_len {
        c[i] = tail[i - 1];
    }
    Ok(CrcCoefficients { c })
}

/// Training overhead (channel uses) and complexity orders of the two schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub crc_overhead: usize,
    pub hac_overhead: usize,
    pub crc_flops_order: String,
    pub hac_flops_order: String,
}

/// Downlink-side training overhead and complexity comparison.
pub fn overhead_report(cfg: &SystemConfig) -> OverheadReport {
    OverheadReport {
        crc_overhead: cfg.n_t * cfg.m_t * cfg.n_r,
        hac_overhead: cfg.m_t + cfg.n_t * cfg.n_r,
        crc_flops_order: "O(n_t^3 m_t^3 n_r^3 m_r^3)".to_string(),
        hac_flops_order: "O(l_ao (m_r^3 + m_t^3 + n_r^3 + n_t^3 + l_an k^3))".to_string(),
    }
}
