//! Estimation lower bounds for the mismatch coefficients.
//!
//! The information matrix splits into two independent blocks because the two
//! training stages observe disjoint parameter sets: the digital-chain block
//! has a closed form (zero for the receive chains measured against the
//! deterministic reference row, a flat bound for the transmit chains), while
//! the analog-chain block is the Gram matrix of the model sensitivities with
//! respect to the real/imaginary coefficient parts, the gains, and the
//! angles. Bounds are always evaluated at ground-truth parameters.

use crate::channel::SystemConfig;
use crate::hac::{gamma_gains, gamma_phi, gamma_t2, gamma_theta, gamma_u2};
use crate::mathkit::{svd, CMatrix, CVector};
use crate::pilots::AnalogStagePlan;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Condition gate on the identifiable part of the analog information matrix;
/// beyond it the report is flagged unreliable.
pub const FIM_COND_GATE: f64 = 1e12;

/// Relative cutoff separating the structural null space (the two complex
/// scale families, four real directions) from informative directions.
pub const FIM_NULL_CUTOFF: f64 = 1e-12;

/// Real null directions present for any operating point. Four come from the
/// complex coefficient scales trading against the path gains; two more come
/// from a linear phase progression across either array trading against a
/// common shift of that side's angle sines.
pub const STRUCTURAL_NULL_DIMS: usize = 6;

#[derive(Debug, Error)]
pub enum CrlbError {
    #[error("effective gain is zero; the digital training stage carries no information")]
    UninformativeTraining,
    #[error("training length must be at least 1")]
    EmptyTraining,
    #[error("dimension error: {0}")]
    Dim(String),
}

/// Ground-truth analog-stage parameters the bounds are evaluated at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogTruth {
    pub t2: CVector,
    pub u2: CVector,
    /// Path gains with the channel prefactor folded in.
    pub h_alpha: CVector,
    pub thetas: Vec<f64>,
    pub phis: Vec<f64>,
}

/// Per-coefficient lower bounds plus the analog-block conditioning diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrlbReport {
    /// Receive digital chains beyond the reference: identically zero.
    pub crlb_u1: Vec<f64>,
    pub crlb_t1: Vec<f64>,
    pub crlb_u2: Vec<f64>,
    pub crlb_t2: Vec<f64>,
    pub fim_analog_cond: f64,
    /// Set when the analog information matrix was inverted by pseudo-inverse.
    pub ill_conditioned: bool,
}

/// Digital-chain bounds: the non-reference receive coefficients are read off
/// deterministic (noise-free relative) rows, so their bound is zero; each
/// transmit coefficient is bounded by `noise_var / (pilot_power |beta|^2 L)`.
pub fn crlb_digital(
    cfg: &SystemConfig,
    beta_d: Complex64,
    l_dr: usize,
) -> Result<(Vec<f64>, Vec<f64>), CrlbError> {
    if beta_d.norm() == 0.0 {
        return Err(CrlbError::UninformativeTraining);
    }
    if l_dr == 0 {
        return Err(CrlbError::EmptyTraining);
    }
    let crlb_u1 = vec![0.0; cfg.m_r.saturating_sub(1)];
    let bound = cfg.noise_var / (cfg.pilot_power * beta_d.norm_sqr() * l_dr as f64);
    Ok((crlb_u1, vec![bound; cfg.m_t]))
}

/// Information matrix of the analog-stage parameter vector
/// `[Re t2, Im t2, Re u2, Im u2, Re h, Im h, thetas, phis]`:
/// `(2 / noise_var) * Re(Upsilon^H Upsilon)` with
/// `Upsilon = [G_t, jG_t, G_u, jG_u, G_h, jG_h, G_theta, G_phi]`.
pub fn fisher_analog(
    cfg: &SystemConfig,
    aplan: &AnalogStagePlan,
    truth: &AnalogTruth,
) -> CMatrix {
    let ups = upsilon(cfg, aplan, truth);
    ups.hermitian()
        .mul(&ups)
        .real_part()
        .scale(Complex64::new(2.0 / cfg.noise_var, 0.0))
}

fn upsilon(cfg: &SystemConfig, aplan: &AnalogStagePlan, truth: &AnalogTruth) -> CMatrix {
    let AnalogTruth {
        t2,
        u2,
        h_alpha,
        thetas,
        phis,
    } = truth;
    let g_t = gamma_t2(aplan, u2, h_alpha, thetas, phis, cfg);
    let g_u = gamma_u2(aplan, t2, h_alpha, thetas, phis, cfg);
    let g_h = gamma_gains(aplan, t2, u2, thetas, phis, cfg);
    let g_th = gamma_theta(aplan, t2, u2, h_alpha, thetas, phis, cfg);
    let g_ph = gamma_phi(aplan, t2, u2, h_alpha, thetas, phis, cfg);
    let j = Complex64::new(0.0, 1.0);
    CMatrix::hstack(&[
        &g_t,
        &g_t.scale(j),
        &g_u,
        &g_u.scale(j),
        &g_h,
        &g_h.scale(j),
        &g_th,
        &g_ph,
    ])
}

/// Full report: closed-form digital block plus the analog block extracted
/// from the inverse information matrix through the complex-coefficient
/// selector (each bound sums its real- and imaginary-part entries).
///
/// The analog information matrix is singular for every operating point: the
/// coefficient scales trade against the path gains, which pins four real
/// null directions. The bound is therefore evaluated on the identifiable
/// subspace through a truncated pseudo-inverse; the report is flagged when
/// the null space exceeds the structural one (degenerate geometry, e.g.
/// coinciding paths) or the kept part is badly conditioned.
pub fn crlb_full(
    cfg: &SystemConfig,
    aplan: &AnalogStagePlan,
    truth: &AnalogTruth,
    beta_d: Complex64,
    l_dr: usize,
) -> Result<CrlbReport, CrlbError> {
    let (crlb_u1, crlb_t1) = crlb_digital(cfg, beta_d, l_dr)?;

    // Core Gram matrix without the noise scaling; bounds reattach it below.
    let ups = upsilon(cfg, aplan, truth);
    let core = ups.hermitian().mul(&ups).real_part();
    let n = core.rows();
    let f = svd(&core);
    let smax = f.s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Err(CrlbError::Dim("zero information matrix".into()));
    }
    let cut = smax * FIM_NULL_CUTOFF;
    let kept = f.s.iter().take_while(|&&s| s > cut).count();
    let cond = smax / f.s[kept.saturating_sub(1)].max(f64::MIN_POSITIVE);
    let ill = n - kept > STRUCTURAL_NULL_DIMS || cond > FIM_COND_GATE;

    let mut inv = CMatrix::zeros(n, n);
    for k in 0..kept {
        let vk = f.v.col(k);
        let uk = f.u.col(k);
        let w = 1.0 / f.s[k];
        for i in 0..n {
            for jj in 0..n {
                let d = vk[i] * uk[jj].conj() * w;
                inv[(i, jj)] += d;
            }
        }
    }

    let half_noise = cfg.noise_var / 2.0;
    let n_t = cfg.n_t;
    let n_r = cfg.n_r;
    let crlb_t2: Vec<f64> = (0..n_t)
        .map(|i| (half_noise * (inv[(i, i)].re + inv[(n_t + i, n_t + i)].re)).max(0.0))
        .collect();
    let crlb_u2: Vec<f64> = (0..n_r)
        .map(|i| {
            let re_idx = 2 * n_t + i;
            let im_idx = 2 * n_t + n_r + i;
            (half_noise * (inv[(re_idx, re_idx)].re + inv[(im_idx, im_idx)].re)).max(0.0)
        })
        .collect();

    Ok(CrlbReport {
        crlb_u1,
        crlb_t1,
        crlb_u2,
        crlb_t2,
        fim_analog_cond: cond,
        ill_conditioned: ill,
    })
}
