//! Hierarchical-absolute calibration solvers.
//!
//! The digital-chain coefficients have a closed form once the first receive
//! digital chain is pinned as the reference. The analog-chain coefficients
//! are estimated jointly with the path gains and angles by block-coordinate
//! least squares: each diagonal factor has an exact structured-LS update, and
//! the angles are refined by first-order Taylor steps around the current
//! estimates. Every solver is a deterministic function of its inputs and the
//! provided stream; ground-truth quantities are never accepted as arguments
//! except through the explicit warm/frozen angle initializers.

use crate::channel::{
    steering_gradient_matrix, steering_matrix, steering_vector, SystemConfig,
};
use crate::mathkit::{khatri_rao, lstsq, vec_of, CMatrix, CVector, MathError};
use crate::pilots::{validate_pilot_lengths, AnalogStagePlan};
use crate::streams::Stream;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("reference coefficient c_dr must be nonzero")]
    ZeroReference,
    #[error("rank-deficient {matrix}: numerical rank {rank} of {cols} columns")]
    RankDeficient {
        matrix: &'static str,
        rank: usize,
        cols: usize,
    },
    #[error("dimension error in {context}: {detail}")]
    Dim {
        context: &'static str,
        detail: String,
    },
    #[error("path count {k} exceeds min(q_da, p_da) = {max}; cannot initialize angles")]
    TooManyPaths { k: usize, max: usize },
    #[error("singular angle-update normal matrix; re-initialize the angle estimates")]
    SingularAngleSystem,
    #[error("pilot lengths below the required minima: {0}")]
    PilotLengths(String),
}

fn map_rank_err(matrix: &'static str) -> impl Fn(MathError) -> SolverError {
    move |e| match e {
        MathError::RankDeficient { rank, cols } => SolverError::RankDeficient { matrix, rank, cols },
        MathError::Dim(detail) => SolverError::Dim {
            context: matrix,
            detail,
        },
    }
}

/// Digital-chain estimates. `u1_hat[0]` is exactly the reference `c_dr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitalCalibration {
    pub u1_hat: CVector,
    pub t1_hat: CVector,
}

/// Analog-chain estimates with solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogCalibration {
    pub u2_hat: CVector,
    pub t2_hat: CVector,
    /// Path gains with the channel prefactor folded in.
    pub h_alpha_hat: CVector,
    pub theta_hat: Vec<f64>,
    pub phi_hat: Vec<f64>,
    /// Squared-Frobenius data residual after initialization and after each
    /// outer sweep; non-increasing.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Block updates that needed the damped fallback (ill-conditioned
    /// structured systems, typical at minimal pilot lengths).
    pub fallback_updates: usize,
}

/// Which angle family an update step refines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleSide {
    /// Receive-side arrival angles (paired with the receive array response).
    Aoa,
    /// Transmit-side departure angles.
    Aod,
}

/// Block order of the diagonal-factor updates inside one outer sweep. Both
/// orders are valid coordinate sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum UpdateOrder {
    #[default]
    GainsT2U2,
    GainsU2T2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Stop the outer loop when the residual change falls below
    /// `eps_outer * previous residual`.
    pub eps_outer: f64,
    /// Stop the angle refinement when the squared angle change (rad^2) falls
    /// below this.
    pub eps_angle: f64,
    pub max_outer: usize,
    pub max_angle_iters: usize,
    /// Grid resolution per axis for the coarse angle initializer.
    pub init_grid_size: usize,
    pub update_order: UpdateOrder,
}

/// Phase range of the random unit-modulus coefficient starting draws.
const INIT_PHASE_RANGE: f64 = PI / 4.0;

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            eps_outer: 1e-8,
            eps_angle: 1e-10,
            max_outer: 50,
            max_angle_iters: 10,
            init_grid_size: 64,
            update_order: UpdateOrder::GainsT2U2,
        }
    }
}

/// Starting angles for the alternating solver.
#[derive(Debug, Clone)]
pub enum AngleGuess {
    /// Coarse grid search on the received data.
    FromData,
    /// Start from the given angles.
    Given { thetas: Vec<f64>, phis: Vec<f64> },
}

/// Full initialization policy for [`calibrate_analog`].
#[derive(Debug, Clone)]
pub struct AnalogInit {
    pub angles: AngleGuess,
    /// Keep the starting angles fixed for the whole run (oracle mode).
    pub freeze_angles: bool,
    /// Optional (t2, u2) warm start; random unit-modulus draws otherwise.
    pub warm_coefficients: Option<(CVector, CVector)>,
}

impl AnalogInit {
    /// Self-contained start: grid-search angles, random coefficients.
    pub fn from_data() -> Self {
        AnalogInit {
            angles: AngleGuess::FromData,
            freeze_angles: false,
            warm_coefficients: None,
        }
    }

    /// Start from the given angles, refine them as usual.
    pub fn warm_angles(thetas: Vec<f64>, phis: Vec<f64>) -> Self {
        AnalogInit {
            angles: AngleGuess::Given { thetas, phis },
            freeze_angles: false,
            warm_coefficients: None,
        }
    }

    /// Start from the given angles and never update them.
    pub fn frozen_angles(thetas: Vec<f64>, phis: Vec<f64>) -> Self {
        AnalogInit {
            angles: AngleGuess::Given { thetas, phis },
            freeze_angles: true,
            warm_coefficients: None,
        }
    }

    /// Warm-start everything: angles and both coefficient vectors.
    pub fn oracle(thetas: Vec<f64>, phis: Vec<f64>, t2: CVector, u2: CVector) -> Self {
        AnalogInit {
            angles: AngleGuess::Given { thetas, phis },
            freeze_angles: false,
            warm_coefficients: Some((t2, u2)),
        }
    }
}

/// Closed-form digital-chain calibration against receive chain 1.
///
/// The reference rows of `y_dr` (one per repetition block) carry the pilot
/// response scaled by the reference coefficient; the remaining rows are
/// proportional to the reference row with ratios `u1[m] / u1[0]`. Both
/// least-squares systems go through the QR contract.
pub fn solve_digital(
    y_dr: &CMatrix,
    x_dr: &CMatrix,
    p_dr: usize,
    c_dr: Complex64,
) -> Result<DigitalCalibration, SolverError> {
    if c_dr.norm() == 0.0 {
        return Err(SolverError::ZeroReference);
    }
    if p_dr == 0 || !y_dr.rows().is_multiple_of(p_dr) {
        return Err(SolverError::Dim {
            context: "y_dr",
            detail: format!("{} rows not divisible into {} blocks", y_dr.rows(), p_dr),
        });
    }
    let m_r = y_dr.rows() / p_dr;
    let q = y_dr.cols();
    if x_dr.cols() != q {
        return Err(SolverError::Dim {
            context: "x_dr",
            detail: format!("{} pilot columns vs {} received columns", x_dr.cols(), q),
        });
    }

    // Reference rows, one per repetition block.
    let refs: Vec<CVector> = (0..p_dr).map(|p| y_dr.row(p * m_r)).collect();

    // t1 from the stacked reference rows: y_dt = c_dr (1_P (x) X^T) t1.
    let xt = x_dr.transpose();
    let blocks: Vec<&CMatrix> = (0..p_dr).map(|_| &xt).collect();
    let a = CMatrix::vstack(&blocks);
    let y_dt = CVector::concat(&refs.iter().collect::<Vec<_>>());
    let t1_scaled = lstsq(&a, &y_dt).map_err(map_rank_err("x_dr"))?;
    let t1_hat = t1_scaled.scale(Complex64::new(1.0, 0.0) / c_dr);

    // u1 tail from the non-reference rows: vec of each trailing block equals
    // (y_ref (x) I) * (u1_tail / c_dr).
    let mut u1_hat = CVector::zeros(m_r);
    u1_hat[0] = c_dr;
    if m_r > 1 {
        let eye = CMatrix::identity(m_r - 1);
        let mut lhs_blocks = Vec::with_capacity(p_dr);
        let mut rhs_parts = Vec::with_capacity(p_dr);
        for p in 0..p_dr {
            let yref = CMatrix::from_cols(&[refs[p].clone()]);
            lhs_blocks.push(crate::mathkit::kron(&yref, &eye));
            rhs_parts.push(vec_of(&y_dr.block(p * m_r + 1, 0, m_r - 1, q)));
        }
        let lhs_refs: Vec<&CMatrix> = lhs_blocks.iter().collect();
        let lhs = CMatrix::vstack(&lhs_refs);
        let rhs = CVector::concat(&rhs_parts.iter().collect::<Vec<_>>());
        let tail = lstsq(&lhs, &rhs).map_err(map_rank_err("y_dr"))?;
        for m in 1..m_r {
            u1_hat[m] = c_dr * tail[m - 1];
        }
    }

    Ok(DigitalCalibration { u1_hat, t1_hat })
}

/// Model prediction `B^T diag(u2) A_r diag(h) A_t^T diag(t2) X_tilde`.
fn analog_model(
    aplan: &AnalogStagePlan,
    cfg: &SystemConfig,
    t2: &CVector,
    u2: &CVector,
    h: &CVector,
    thetas: &[f64],
    phis: &[f64],
) -> CMatrix {
    let a_t = steering_matrix(cfg.n_t, thetas, cfg.d_over_lambda);
    let a_r = steering_matrix(cfg.n_r, phis, cfg.d_over_lambda);
    let left = aplan.b_t().scale_cols(u2).mul(&a_r).scale_cols(h);
    let right = a_t.transpose().scale_cols(t2).mul(&aplan.x_tilde());
    left.mul(&right)
}

/// Squared-Frobenius residual of the analog-stage model.
#[allow(clippy::too_many_arguments)]
pub fn analog_residual(
    y_da: &CMatrix,
    aplan: &AnalogStagePlan,
    cfg: &SystemConfig,
    t2: &CVector,
    u2: &CVector,
    h: &CVector,
    thetas: &[f64],
    phis: &[f64],
) -> f64 {
    y_da.sub(&analog_model(aplan, cfg, t2, u2, h, thetas, phis))
        .fro_norm_sq()
}

/// Sensitivity of the stacked analog observation to the path gains.
pub fn gamma_gains(
    aplan: &AnalogStagePlan,
    t2: &CVector,
    u2: &CVector,
    thetas: &[f64],
    phis: &[f64],
    cfg: &SystemConfig,
) -> CMatrix {
    let a_t = steering_matrix(cfg.n_t, thetas, cfg.d_over_lambda);
    let a_r = steering_matrix(cfg.n_r, phis, cfg.d_over_lambda);
    let m1 = aplan.x_tilde().transpose().scale_cols(t2).mul(&a_t);
    let m2 = aplan.b_t().scale_cols(u2).mul(&a_r);
    khatri_rao(&m1, &m2).expect("gain sensitivity blocks share the path axis")
}

/// Sensitivity of the stacked analog observation to the receive coefficients.
pub fn gamma_u2(
    aplan: &AnalogStagePlan,
    t2: &CVector,
    h: &CVector,
    thetas: &[f64],
    phis: &[f64],
    cfg: &SystemConfig,
) -> CMatrix {
    let a_t = steering_matrix(cfg.n_t, thetas, cfg.d_over_lambda);
    let a_r = steering_matrix(cfg.n_r, phis, cfg.d_over_lambda);
    let m1 = aplan
        .x_tilde()
        .transpose()
        .scale_cols(t2)
        .mul(&a_t)
        .scale_cols(h)
        .mul(&a_r.transpose());
    khatri_rao(&m1, &aplan.b_t()).expect("receive sensitivity blocks share the antenna axis")
}

/// Sensitivity of the stacked analog observation to the transmit coefficients.
pub fn gamma_t2(
    aplan: &AnalogStagePlan,
    u2: &CVector,
    h: &CVector,
    thetas: &[f64],
    phis: &[f64],
    cfg: &SystemConfig,
) -> CMatrix {
    let a_t = steering_matrix(cfg.n_t, thetas, cfg.d_over_lambda);
    let a_r = steering_matrix(cfg.n_r, phis, cfg.d_over_lambda);
    let m2 = aplan
        .b_t()
        .scale_cols(u2)
        .mul(&a_r)
        .scale_cols(h)
        .mul(&a_t.transpose());
    khatri_rao(&aplan.x_tilde().transpose(), &m2).expect("transmit sensitivity blocks share the antenna axis")
}

/// Sensitivity of the stacked analog observation to the departure angles:
/// one column per path, from the transmit-side steering gradient.
pub fn gamma_theta(
    aplan: &AnalogStagePlan,
    t2: &CVector,
    u2: &CVector,
    h: &CVector,
    thetas: &[f64],
    phis: &[f64],
    cfg: &SystemConfig,
) -> CMatrix {
    let a_r = steering_matrix(cfg.n_r, phis, cfg.d_over_lambda);
    let g_t = steering_gradient_matrix(cfg.n_t, thetas, cfg.d_over_lambda);
    let m1 = aplan.x_tilde().transpose().scale_cols(t2).mul(&g_t);
    let m2 = aplan.b_t().scale_cols(u2).mul(&a_r).scale_cols(h);
    khatri_rao(&m1, &m2).expect("angle sensitivity blocks share the path axis")
}

/// Sensitivity of the stacked analog observation to the arrival angles:
/// one column per path, from the receive-side steering gradient.
pub fn gamma_phi(
    aplan: &AnalogStagePlan,
    t2: &CVector,
    u2: &CVector,
    h: &CVector,
    thetas: &[f64],
    phis: &[f64],
    cfg: &SystemConfig,
) -> CMatrix {
    let a_t = steering_matrix(cfg.n_t, thetas, cfg.d_over_lambda);
    let g_r = steering_gradient_matrix(cfg.n_r, phis, cfg.d_over_lambda);
    let m1 = aplan
        .x_tilde()
        .transpose()
        .scale_cols(t2)
        .mul(&a_t)
        .scale_cols(h);
    let m2 = aplan.b_t().scale_cols(u2).mul(&g_r);
    khatri_rao(&m1, &m2).expect("angle sensitivity blocks share the path axis")
}

/// Structured-LS update of the path gains given everything else.
pub fn estimate_gains(
    y_da: &CMatrix,
    aplan: &AnalogStagePlan,
    t2: &CVector,
    u2: &CVector,
    thetas: &[f64],
    phis: &[f64],
    cfg: &SystemConfig,
) -> Result<CVector, SolverError> {
    let gamma = gamma_gains(aplan, t2, u2, thetas, phis, cfg);
    lstsq(&gamma, &vec_of(y_da)).map_err(map_rank_err("gamma_h"))
}

/// Structured-LS update of the receive-side analog coefficients.
pub fn estimate_u2(
    y_da: &CMatrix,
    aplan: &AnalogStagePlan,
    t2: &CVector,
    h: &CVector,
    thetas: &[f64],
    phis: &[f64],
    cfg: &SystemConfig,
) -> Result<CVector, SolverError> {
    let gamma = gamma_u2(aplan, t2, h, thetas, phis, cfg);
    lstsq(&gamma, &vec_of(y_da)).map_err(map_rank_err("gamma_u"))
}

/// Structured-LS update of the transmit-side analog coefficients.
pub fn estimate_t2(
    y_da: &CMatrix,
    aplan: &AnalogStagePlan,
    u2: &CVector,
    h: &CVector,
    thetas: &[f64],
    phis: &[f64],
    cfg: &SystemConfig,
) -> Result<CVector, SolverError> {
    let gamma = gamma_t2(aplan, u2, h, thetas, phis, cfg);
    lstsq(&gamma, &vec_of(y_da)).map_err(map_rank_err("gamma_t"))
}

/// Map an angle back into the principal range, reflecting across +-pi/2 so
/// the array response (a function of the sine) is preserved exactly.
pub fn wrap_angle(x: f64) -> f64 {
    let mut a = x.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a > FRAC_PI_2 {
        a = PI - a;
    } else if a < -FRAC_PI_2 {
        a = -PI - a;
    }
    a
}

/// Solve the small real normal system `Re(G^H G) xi = Re(G^H r)`, retrying
/// once with trace-proportional diagonal damping before giving up.
fn solve_real_normal(gamma: &CMatrix, resid: &CVector) -> Result<Vec<f64>, SolverError> {
    let k = gamma.cols();
    let gram = gamma.hermitian().mul(gamma).real_part();
    let rhs = CVector::from_fn(k, |i| Complex64::new(gamma.col(i).dot_h(resid).re, 0.0));
    let sol = match lstsq(&gram, &rhs) {
        Ok(x) => x,
        Err(_) => {
            let mut tr = 0.0;
            for i in 0..k {
                tr += gram[(i, i)].re;
            }
            if tr == 0.0 {
                // All sensitivity columns vanished; nothing to move.
                return Ok(vec![0.0; k]);
            }
            let damping = Complex64::new(1e-10 * tr / k as f64, 0.0);
            let damped = gram.add(&CMatrix::identity(k).scale(damping));
            crate::mathkit::cholesky_solve_spd(&damped, &rhs)
                .ok_or(SolverError::SingularAngleSystem)?
        }
    };
    Ok((0..k).map(|i| sol[i].re).collect())
}

/// Damped least squares `(G^H G + lambda I) x = G^H y` realized as an
/// augmented QR solve so the stacked system stays comfortably full rank.
fn damped_lstsq(gamma: &CMatrix, y: &CVector) -> Option<CVector> {
    let n = gamma.cols();
    let scale = gamma.fro_norm();
    if scale == 0.0 {
        return Some(CVector::zeros(n));
    }
    let ridge = CMatrix::identity(n).scale(Complex64::new(1e-6 * scale, 0.0));
    let aug = CMatrix::vstack(&[gamma, &ridge]);
    let rhs = CVector::concat(&[y, &CVector::zeros(n)]);
    lstsq(&aug, &rhs).ok()
}

/// Taylor-linearized refinement of one angle family.
///
/// Each inner iteration solves the real linearized system for the angle
/// increments, then accepts the step only if the true residual does not
/// increase (halving the increment a few times if needed), which keeps the
/// outer objective trace monotone even far from the expansion point.
#[allow(clippy::too_many_arguments)]
pub fn update_angles(
    y_da: &CMatrix,
    aplan: &AnalogStagePlan,
    u2: &CVector,
    t2: &CVector,
    h: &CVector,
    thetas: &[f64],
    phis: &[f64],
    side: AngleSide,
    settings: &SolverSettings,
    cfg: &SystemConfig,
) -> Result<Vec<f64>, SolverError> {
    let k = cfg.k_paths;
    let mut cur: Vec<f64> = match side {
        AngleSide::Aoa => phis.to_vec(),
        AngleSide::Aod => thetas.to_vec(),
    };

    for _ in 0..settings.max_angle_iters {
        let (model_thetas, model_phis): (&[f64], &[f64]) = match side {
            AngleSide::Aoa => (thetas, &cur),
            AngleSide::Aod => (&cur, phis),
        };
        let resid_mat = y_da.sub(&analog_model(aplan, cfg, t2, u2, h, model_thetas, model_phis));
        let res_before = resid_mat.fro_norm_sq();

        // Sensitivity of the model to each path's angle, one Khatri-Rao
        // column per path.
        let gamma = match side {
            AngleSide::Aoa => gamma_phi(aplan, t2, u2, h, thetas, &cur, cfg),
            AngleSide::Aod => gamma_theta(aplan, t2, u2, h, &cur, phis, cfg),
        };
        let xi = solve_real_normal(&gamma, &vec_of(&resid_mat))?;

        let mut step = 1.0;
        let mut accepted: Option<(Vec<f64>, f64)> = None;
        for _ in 0..6 {
            let cand: Vec<f64> = (0..k).map(|i| wrap_angle(cur[i] + step * xi[i])).collect();
            let (t_ref, p_ref): (&[f64], &[f64]) = match side {
                AngleSide::Aoa => (thetas, &cand),
                AngleSide::Aod => (&cand, phis),
            };
            let res_after = analog_residual(y_da, aplan, cfg, t2, u2, h, t_ref, p_ref);
            if res_after <= res_before {
                accepted = Some((cand, step));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, step)) = accepted else {
            break; // no descent available from this linearization
        };
        let delta_sq: f64 = xi.iter().map(|&x| (step * x) * (step * x)).sum();
        cur = cand;
        if delta_sq < settings.eps_angle {
            break;
        }
    }
    Ok(cur)
}

/// Coarse 2-D matched-filter grid initializer for the path angles.
///
/// Scores every (arrival, departure) node pair by the normalized correlation
/// of the data with the rank-1 beam template and extracts `k_paths` peaks
/// greedily: each pick gets +-2-cell non-maximum suppression and its fitted
/// rank-1 component is subtracted from the data before the next pick, so
/// sidelobes of a strong path cannot mask a weaker one.
pub fn init_angles(
    y_da: &CMatrix,
    aplan: &AnalogStagePlan,
    cfg: &SystemConfig,
    settings: &SolverSettings,
) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
    let k = cfg.k_paths;
    let (q, p) = (aplan.q_da(), aplan.p_da());
    if k > q.min(p) {
        return Err(SolverError::TooManyPaths { k, max: q.min(p) });
    }
    let g = settings.init_grid_size;
    let nodes: Vec<f64> = (0..g)
        .map(|i| -FRAC_PI_2 + PI * i as f64 / g as f64)
        .collect();

    let b_t = aplan.b_t();
    let xt = aplan.x_tilde().transpose();
    let u_cols: Vec<CVector> = nodes
        .iter()
        .map(|&a| b_t.mul_vec(&steering_vector(cfg.n_r, a, cfg.d_over_lambda)))
        .collect();
    let v_cols: Vec<CVector> = nodes
        .iter()
        .map(|&a| xt.mul_vec(&steering_vector(cfg.n_t, a, cfg.d_over_lambda)))
        .collect();
    let u_norms: Vec<f64> = u_cols.iter().map(|c| c.norm().max(1e-300)).collect();
    let v_norms: Vec<f64> = v_cols.iter().map(|c| c.norm().max(1e-300)).collect();
    let u_mat = CMatrix::from_cols(&u_cols);
    let v_mat = CMatrix::from_cols(&v_cols);

    let mut resid = y_da.clone();
    let mut suppressed = vec![false; g * g];
    let mut thetas = Vec::with_capacity(k);
    let mut phis = Vec::with_capacity(k);
    for _ in 0..k {
        // score(i, j) = |u_i^H R conj(v_j)| / (|u_i| |v_j|) for arrival node i,
        // departure node j, against the current residual R.
        let s = u_mat.hermitian().mul(&resid).mul(&v_mat.conj());
        let mut best = None;
        let mut best_val = f64::NEG_INFINITY;
        for i in 0..g {
            for j in 0..g {
                if suppressed[i * g + j] {
                    continue;
                }
                let val = s[(i, j)].norm() / (u_norms[i] * v_norms[j]);
                if val > best_val {
                    best_val = val;
                    best = Some((i, j));
                }
            }
        }
        let (bi, bj) = best.expect("grid exhausted before extracting all paths");
        phis.push(nodes[bi]);
        thetas.push(nodes[bj]);
        for di in -2i64..=2 {
            for dj in -2i64..=2 {
                let ii = bi as i64 + di;
                let jj = bj as i64 + dj;
                if ii >= 0 && ii < g as i64 && jj >= 0 && jj < g as i64 {
                    suppressed[ii as usize * g + jj as usize] = true;
                }
            }
        }
        // Subtract the fitted rank-1 component of this pick.
        let amp = s[(bi, bj)]
            / Complex64::new(u_norms[bi] * u_norms[bi] * v_norms[bj] * v_norms[bj], 0.0);
        let u = &u_cols[bi];
        let v = &v_cols[bj];
        for jj in 0..resid.cols() {
            let c = amp * v[jj];
            for ii in 0..resid.rows() {
                let d = c * u[ii];
                resid[(ii, jj)] -= d;
            }
        }
    }
    Ok((thetas, phis))
}

/// One block update: exact LS when the system is numerically full rank,
/// otherwise a damped solve accepted only if it does not increase the
/// residual of this linear stage (falling back to the previous value).
fn block_update(
    gamma: &CMatrix,
    y: &CVector,
    prev: &CVector,
    name: &'static str,
    fallbacks: &mut usize,
) -> Result<CVector, SolverError> {
    match lstsq(gamma, y) {
        Ok(x) => Ok(x),
        Err(MathError::RankDeficient { .. }) => {
            *fallbacks += 1;
            let cand = damped_lstsq(gamma, y).ok_or(SolverError::RankDeficient {
                matrix: name,
                rank: 0,
                cols: gamma.cols(),
            })?;
            let res_cand = y.sub(&gamma.mul_vec(&cand)).norm_sq();
            let res_prev = y.sub(&gamma.mul_vec(prev)).norm_sq();
            Ok(if res_cand <= res_prev { cand } else { prev.clone() })
        }
        Err(e) => Err(map_rank_err(name)(e)),
    }
}

/// Alternating optimization for the analog-chain calibration.
///
/// Runs the coarse initializer (unless starting angles are supplied), draws
/// random unit-modulus starting coefficients from the solver stream (unless
/// warm coefficients are supplied), then sweeps { gains, t2, u2, arrival
/// angles, departure angles } until the residual change drops below
/// `eps_outer` relative or `max_outer` is hit. Non-convergence is reported
/// through the flag, not as an error.
pub fn calibrate_analog(
    y_da: &CMatrix,
    aplan: &AnalogStagePlan,
    cfg: &SystemConfig,
    settings: &SolverSettings,
    init: AnalogInit,
    rng: &mut Stream,
) -> Result<AnalogCalibration, SolverError> {
    let report = validate_pilot_lengths(cfg);
    if !report.ok {
        return Err(SolverError::PilotLengths(report.violations(cfg).join("; ")));
    }
    let k = cfg.k_paths;
    let frozen = init.freeze_angles;
    let (mut thetas, mut phis) = match init.angles {
        AngleGuess::FromData => init_angles(y_da, aplan, cfg, settings)?,
        AngleGuess::Given { thetas, phis } => (thetas, phis),
    };
    assert_eq!(thetas.len(), k, "initial departure-angle count");
    assert_eq!(phis.len(), k, "initial arrival-angle count");

    let (mut t2, mut u2) = match init.warm_coefficients {
        Some((t2, u2)) => {
            assert_eq!(t2.len(), cfg.n_t, "warm t2 length");
            assert_eq!(u2.len(), cfg.n_r, "warm u2 length");
            (t2, u2)
        }
        // Random unit-modulus draws. Phases stay within the nominal-hardware
        // range: calibration coefficients are small perturbations of an ideal
        // chain, and far-from-nominal starts drive the alternating sweeps
        // into spurious basins.
        None => (
            CVector::from_fn(cfg.n_t, |_| {
                Complex64::from_polar(1.0, rng.gen_range(-INIT_PHASE_RANGE..INIT_PHASE_RANGE))
            }),
            CVector::from_fn(cfg.n_r, |_| {
                Complex64::from_polar(1.0, rng.gen_range(-INIT_PHASE_RANGE..INIT_PHASE_RANGE))
            }),
        ),
    };
    let mut h = CVector::from_fn(k, |_| {
        let re: f64 = rng.sample(rand_distr::StandardNormal);
        let im: f64 = rng.sample(rand_distr::StandardNormal);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    });

    let y_vec = vec_of(y_da);
    let exact_fit = 1e-26 * y_da.fro_norm_sq();
    let mut trace = vec![analog_residual(y_da, aplan, cfg, &t2, &u2, &h, &thetas, &phis)];
    let mut converged = false;
    let mut fallbacks = 0usize;

    for _ in 0..settings.max_outer {
        let g_h = gamma_gains(aplan, &t2, &u2, &thetas, &phis, cfg);
        h = block_update(&g_h, &y_vec, &h, "gamma_h", &mut fallbacks)?;
        let res_h = analog_residual(y_da, aplan, cfg, &t2, &u2, &h, &thetas, &phis);
        if res_h <= exact_fit {
            trace.push(res_h);
            converged = true;
            break;
        }
        match settings.update_order {
            UpdateOrder::GainsT2U2 => {
                let g_t = gamma_t2(aplan, &u2, &h, &thetas, &phis, cfg);
                t2 = block_update(&g_t, &y_vec, &t2, "gamma_t", &mut fallbacks)?;
                let g_u = gamma_u2(aplan, &t2, &h, &thetas, &phis, cfg);
                u2 = block_update(&g_u, &y_vec, &u2, "gamma_u", &mut fallbacks)?;
            }
            UpdateOrder::GainsU2T2 => {
                let g_u = gamma_u2(aplan, &t2, &h, &thetas, &phis, cfg);
                u2 = block_update(&g_u, &y_vec, &u2, "gamma_u", &mut fallbacks)?;
                let g_t = gamma_t2(aplan, &u2, &h, &thetas, &phis, cfg);
                t2 = block_update(&g_t, &y_vec, &t2, "gamma_t", &mut fallbacks)?;
            }
        }
        if !frozen {
            phis = update_angles(
                y_da, aplan, &u2, &t2, &h, &thetas, &phis, AngleSide::Aoa, settings, cfg,
            )?;
            thetas = update_angles(
                y_da, aplan, &u2, &t2, &h, &thetas, &phis, AngleSide::Aod, settings, cfg,
            )?;
        }
        let res = analog_residual(y_da, aplan, cfg, &t2, &u2, &h, &thetas, &phis);
        let prev = *trace.last().unwrap();
        trace.push(res);
        if (prev - res).abs() <= settings.eps_outer * prev.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    let iterations = trace.len() - 1;
    Ok(AnalogCalibration {
        u2_hat: u2,
        t2_hat: t2,
        h_alpha_hat: h,
        theta_hat: thetas,
        phi_hat: phis,
        objective_trace: trace,
        iterations,
        converged,
        fallback_updates: fallbacks,
    })
}

/// Rebuild the effective receive-side channel
/// `diag(u2) A_r diag(h) A_t^T diag(t2)` from analog-calibration output
/// (n_r x n_t orientation).
pub fn reconstruct_effective_channel(cal: &AnalogCalibration, cfg: &SystemConfig) -> CMatrix {
    effective_from_parts(
        cfg,
        &cal.u2_hat,
        &cal.t2_hat,
        &cal.h_alpha_hat,
        &cal.theta_hat,
        &cal.phi_hat,
    )
}

/// Effective channel from explicit parts; shared by the reconstruction and
/// truth-side comparisons.
pub fn effective_from_parts(
    cfg: &SystemConfig,
    u2: &CVector,
    t2: &CVector,
    h: &CVector,
    thetas: &[f64],
    phis: &[f64],
) -> CMatrix {
    let a_t = steering_matrix(cfg.n_t, thetas, cfg.d_over_lambda);
    let a_r = steering_matrix(cfg.n_r, phis, cfg.d_over_lambda);
    a_r.scale_rows(u2)
        .scale_cols(h)
        .mul(&a_t.transpose())
        .scale_cols(t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airlink::{effective_channel, run_training, LinkDirection, TrainingOutput};
    use crate::channel::{
        folded_gains, sample_channel, sample_mismatch, ChannelRealization, MismatchSet,
    };
    use crate::pilots::{design_analog_stage, design_digital_stage, DigitalStagePlan};
    use crate::streams::{label, substream};

    fn one(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn collinearity_defect(a: &CVector, b: &CVector) -> f64 {
        let ip = a.dot_h(b).norm_sqr();
        1.0 - ip / (a.norm_sq() * b.norm_sq())
    }

    fn scenario(
        cfg: &SystemConfig,
        seed: u64,
        noise_var: f64,
    ) -> (
        ChannelRealization,
        MismatchSet,
        DigitalStagePlan,
        AnalogStagePlan,
        TrainingOutput,
    ) {
        let ch = sample_channel(cfg, &mut substream(seed, label::CHANNEL, 0));
        let mm = sample_mismatch(cfg, &mut substream(seed, label::MISMATCH, 0));
        let mut brng = substream(seed, label::BEAMFORMERS, 0);
        let dplan = design_digital_stage(cfg, &mut brng).unwrap();
        let aplan = design_analog_stage(cfg, &mut brng);
        let out = run_training(
            LinkDirection::Downlink,
            cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            noise_var,
            &mut substream(seed, label::NOISE, 0),
        );
        (ch, mm, dplan, aplan, out)
    }

    #[test]
    fn digital_recovery_is_collinear_noiseless() {
        let mut cfg = SystemConfig::new(4, 4, 2, 2, 1);
        cfg.k_paths = 1;
        let ch = sample_channel(&cfg, &mut substream(5, label::CHANNEL, 0));
        let mut mm = MismatchSet::identity(&cfg);
        mm.u1 = CVector::from_entries(vec![one(1.0, 0.0), one(0.0, 2.0)]);
        mm.t1 = CVector::from_entries(vec![one(1.0, 0.0), one(3.0, 0.0)]);
        let mut brng = substream(5, label::BEAMFORMERS, 0);
        let dplan = design_digital_stage(&cfg, &mut brng).unwrap();
        let aplan = design_analog_stage(&cfg, &mut brng);
        let out = run_training(
            LinkDirection::Downlink,
            &cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            0.0,
            &mut substream(5, label::NOISE, 0),
        );
        let cal = solve_digital(&out.y_dr, &dplan.x_dr, dplan.p_dr, one(1.0, 0.0)).unwrap();
        assert!(collinearity_defect(&cal.u1_hat, &mm.u1) < 1e-10);
        assert!(collinearity_defect(&cal.t1_hat, &mm.t1) < 1e-10);
        assert_eq!(cal.u1_hat[0], one(1.0, 0.0));
    }

    #[test]
    fn digital_identity_mismatch_gives_uniform_estimates() {
        let cfg = SystemConfig::new(6, 6, 3, 3, 2);
        let ch = sample_channel(&cfg, &mut substream(6, label::CHANNEL, 0));
        let mm = MismatchSet::identity(&cfg);
        let mut brng = substream(6, label::BEAMFORMERS, 0);
        let dplan = design_digital_stage(&cfg, &mut brng).unwrap();
        let aplan = design_analog_stage(&cfg, &mut brng);
        let out = run_training(
            LinkDirection::Downlink,
            &cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            0.0,
            &mut substream(6, label::NOISE, 0),
        );
        let cal = solve_digital(&out.y_dr, &dplan.x_dr, dplan.p_dr, one(1.0, 0.0)).unwrap();
        for m in 0..cfg.m_r {
            assert!((cal.u1_hat[m] - one(1.0, 0.0)).norm() < 1e-10);
        }
        for m in 0..cfg.m_t {
            assert!((cal.t1_hat[m] - out.beta_d).norm() < 1e-10 * out.beta_d.norm());
        }
    }

    #[test]
    fn digital_reference_scaling() {
        let cfg = SystemConfig::new(6, 6, 3, 3, 2);
        let (_, _, dplan, _, out) = scenario(&cfg, 8, 0.1);
        let a = solve_digital(&out.y_dr, &dplan.x_dr, dplan.p_dr, one(1.0, 0.0)).unwrap();
        let b = solve_digital(&out.y_dr, &dplan.x_dr, dplan.p_dr, one(2.0, 0.0)).unwrap();
        for m in 0..cfg.m_r {
            assert!((b.u1_hat[m] - a.u1_hat[m] * 2.0).norm() < 1e-12 * a.u1_hat[m].norm().max(1e-12));
        }
        for m in 0..cfg.m_t {
            assert!((b.t1_hat[m] - a.t1_hat[m] * 0.5).norm() < 1e-12 * a.t1_hat[m].norm().max(1e-12));
        }
        assert!(matches!(
            solve_digital(&out.y_dr, &dplan.x_dr, dplan.p_dr, one(0.0, 0.0)),
            Err(SolverError::ZeroReference)
        ));
    }

    #[test]
    fn digital_solver_names_the_offending_matrix() {
        // Rank-deficient pilot matrix (a repeated row pattern).
        let y = CMatrix::ones(4, 4);
        let x = CMatrix::from_fn(2, 4, |_, j| one(j as f64, 1.0));
        let err = solve_digital(&y, &x, 2, one(1.0, 0.0)).unwrap_err();
        assert!(err.to_string().contains("x_dr"), "{}", err);

        // Zero reference rows make the receive-chain stack deficient.
        let mut cfg = SystemConfig::new(6, 6, 2, 2, 2);
        cfg.pilot_plan.q_dr = 4;
        let mut brng = substream(77, label::BEAMFORMERS, 0);
        let dplan = design_digital_stage(&cfg, &mut brng).unwrap();
        let y0 = CMatrix::zeros(cfg.m_r, 4);
        let err = solve_digital(&y0, &dplan.x_dr, 1, one(1.0, 0.0)).unwrap_err();
        assert!(err.to_string().contains("y_dr"), "{}", err);
    }

    #[test]
    fn digital_repetitions_are_averaged() {
        let mut cfg = SystemConfig::new(6, 6, 3, 3, 2);
        cfg.pilot_plan.p_dr = 3;
        let (_, mm, dplan, _, out) = scenario(&cfg, 90, 0.0);
        assert_eq!(out.y_dr.rows(), cfg.m_r * 3);
        let cal = solve_digital(&out.y_dr, &dplan.x_dr, dplan.p_dr, one(1.0, 0.0)).unwrap();
        assert!(collinearity_defect(&cal.u1_hat, &mm.u1) < 1e-10);
        assert!(collinearity_defect(&cal.t1_hat, &mm.t1) < 1e-10);
    }

    #[test]
    fn gains_recover_truth_given_everything_else() {
        let cfg = SystemConfig::new(8, 8, 2, 2, 2);
        let (ch, mm, _, aplan, out) = scenario(&cfg, 9, 0.0);
        // The analog stage carries the u1[0] t1[0] factor; fold it into the
        // receive coefficients for the truth comparison.
        let u2_eff = mm.u2.scale(mm.u1[0] * mm.t1[0]);
        let h =
            estimate_gains(&out.y_da, &aplan, &mm.t2, &u2_eff, &ch.thetas, &ch.phis, &cfg).unwrap();
        let truth = folded_gains(&cfg, &ch);
        for k in 0..cfg.k_paths {
            assert!((h[k] - truth[k]).norm() < 1e-9 * truth[k].norm().max(1e-9));
        }
    }

    #[test]
    fn gains_zero_input_zero_output() {
        let cfg = SystemConfig::new(8, 8, 2, 2, 2);
        let (ch, mm, _, aplan, _) = scenario(&cfg, 10, 0.0);
        let y0 = CMatrix::zeros(aplan.p_da(), aplan.q_da());
        let h = estimate_gains(&y0, &aplan, &mm.t2, &mm.u2, &ch.thetas, &ch.phis, &cfg).unwrap();
        for k in 0..cfg.k_paths {
            assert_eq!(h[k], one(0.0, 0.0));
        }
    }

    #[test]
    fn single_path_gain_matches_scalar_ratio() {
        let mut cfg = SystemConfig::new(6, 6, 2, 2, 1);
        cfg.k_paths = 1;
        let (ch, mm, _, aplan, out) = scenario(&cfg, 11, 0.05);
        let u2_eff = mm.u2.scale(mm.u1[0] * mm.t1[0]);
        let h =
            estimate_gains(&out.y_da, &aplan, &mm.t2, &u2_eff, &ch.thetas, &ch.phis, &cfg).unwrap();
        // Scalar LS: gamma^H y / gamma^H gamma.
        let a_t = steering_matrix(cfg.n_t, &ch.thetas, cfg.d_over_lambda);
        let a_r = steering_matrix(cfg.n_r, &ch.phis, cfg.d_over_lambda);
        let m1 = aplan.x_tilde().transpose().scale_cols(&mm.t2).mul(&a_t);
        let m2 = aplan.b_t().scale_cols(&u2_eff).mul(&a_r);
        let gamma = khatri_rao(&m1, &m2).unwrap().col(0);
        let want = gamma.dot_h(&vec_of(&out.y_da)) / one(gamma.norm_sq(), 0.0);
        assert!((h[0] - want).norm() < 1e-10 * want.norm());
    }

    #[test]
    fn u2_and_t2_recover_truth_given_everything_else() {
        let cfg = SystemConfig::new(8, 8, 2, 2, 2);
        let (ch, mm, _, aplan, out) = scenario(&cfg, 12, 0.0);
        let h = folded_gains(&cfg, &ch);
        let u2_eff = mm.u2.scale(mm.u1[0] * mm.t1[0]);

        let u2 = estimate_u2(&out.y_da, &aplan, &mm.t2, &h, &ch.thetas, &ch.phis, &cfg).unwrap();
        for i in 0..cfg.n_r {
            assert!((u2[i] - u2_eff[i]).norm() < 1e-9 * u2_eff[i].norm());
        }

        let t2 = estimate_t2(&out.y_da, &aplan, &u2_eff, &h, &ch.thetas, &ch.phis, &cfg).unwrap();
        for i in 0..cfg.n_t {
            assert!((t2[i] - mm.t2[i]).norm() < 1e-9 * mm.t2[i].norm());
        }
    }

    #[test]
    fn u2_zero_input_and_bilinear_scaling() {
        let cfg = SystemConfig::new(8, 8, 2, 2, 2);
        let (ch, mm, _, aplan, out) = scenario(&cfg, 13, 0.1);
        let h = folded_gains(&cfg, &ch);
        let y0 = CMatrix::zeros(aplan.p_da(), aplan.q_da());
        let z = estimate_u2(&y0, &aplan, &mm.t2, &h, &ch.thetas, &ch.phis, &cfg).unwrap();
        assert_eq!(z.norm(), 0.0);

        let u_a = estimate_u2(&out.y_da, &aplan, &mm.t2, &h, &ch.thetas, &ch.phis, &cfg).unwrap();
        let h2 = h.scale(one(2.0, 0.0));
        let u_b = estimate_u2(&out.y_da, &aplan, &mm.t2, &h2, &ch.thetas, &ch.phis, &cfg).unwrap();
        for i in 0..cfg.n_r {
            assert!((u_b[i] - u_a[i] * 0.5).norm() < 1e-10 * u_a[i].norm().max(1e-12));
        }
    }

    #[test]
    fn t2_zero_input_and_bilinear_scaling() {
        let cfg = SystemConfig::new(8, 8, 2, 2, 2);
        let (ch, mm, _, aplan, out) = scenario(&cfg, 14, 0.1);
        let h = folded_gains(&cfg, &ch);
        let y0 = CMatrix::zeros(aplan.p_da(), aplan.q_da());
        let z = estimate_t2(&y0, &aplan, &mm.u2, &h, &ch.thetas, &ch.phis, &cfg).unwrap();
        assert_eq!(z.norm(), 0.0);

        let t_a = estimate_t2(&out.y_da, &aplan, &mm.u2, &h, &ch.thetas, &ch.phis, &cfg).unwrap();
        let h2 = h.scale(one(2.0, 0.0));
        let t_b = estimate_t2(&out.y_da, &aplan, &mm.u2, &h2, &ch.thetas, &ch.phis, &cfg).unwrap();
        for i in 0..cfg.n_t {
            assert!((t_b[i] - t_a[i] * 0.5).norm() < 1e-10 * t_a[i].norm().max(1e-12));
        }
    }

    #[test]
    fn angle_update_fixed_point_at_truth() {
        let cfg = SystemConfig::new(8, 8, 2, 2, 2);
        let (ch, mm, _, aplan, out) = scenario(&cfg, 15, 0.0);
        let h = folded_gains(&cfg, &ch);
        let u2_eff = mm.u2.scale(mm.u1[0] * mm.t1[0]);
        let settings = SolverSettings::default();
        let phis = update_angles(
            &out.y_da,
            &aplan,
            &u2_eff,
            &mm.t2,
            &h,
            &ch.thetas,
            &ch.phis,
            AngleSide::Aoa,
            &settings,
            &cfg,
        )
        .unwrap();
        for k in 0..cfg.k_paths {
            assert!((phis[k] - ch.phis[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn angle_update_pulls_small_offsets_back() {
        let cfg = SystemConfig::new(16, 16, 4, 4, 2);
        let (ch, mm, _, aplan, out) = scenario(&cfg, 16, 0.0);
        let h = folded_gains(&cfg, &ch);
        let u2_eff = mm.u2.scale(mm.u1[0] * mm.t1[0]);
        let settings = SolverSettings::default();

        let off_phis: Vec<f64> = ch.phis.iter().map(|p| p + 0.01).collect();
        let before = analog_residual(
            &out.y_da, &aplan, &cfg, &mm.t2, &u2_eff, &h, &ch.thetas, &off_phis,
        );
        let phis = update_angles(
            &out.y_da, &aplan, &u2_eff, &mm.t2, &h, &ch.thetas, &off_phis, AngleSide::Aoa,
            &settings, &cfg,
        )
        .unwrap();
        let after = analog_residual(
            &out.y_da, &aplan, &cfg, &mm.t2, &u2_eff, &h, &ch.thetas, &phis,
        );
        assert!(after <= before);
        for k in 0..cfg.k_paths {
            assert!(
                (phis[k] - ch.phis[k]).abs() < 1e-4,
                "path {}: {} vs {}",
                k,
                phis[k],
                ch.phis[k]
            );
        }

        let off_thetas: Vec<f64> = ch.thetas.iter().map(|t| t + 0.01).collect();
        let thetas = update_angles(
            &out.y_da, &aplan, &u2_eff, &mm.t2, &h, &off_thetas, &ch.phis, AngleSide::Aod,
            &settings, &cfg,
        )
        .unwrap();
        for k in 0..cfg.k_paths {
            assert!((thetas[k] - ch.thetas[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn init_angles_close_to_truth_single_path() {
        let mut cfg = SystemConfig::new(12, 12, 2, 2, 1);
        cfg.k_paths = 1;
        let mut ch = sample_channel(&cfg, &mut substream(17, label::CHANNEL, 0));
        ch.alphas = CVector::ones(1);
        let mm = MismatchSet::identity(&cfg);
        let mut brng = substream(17, label::BEAMFORMERS, 0);
        let dplan = design_digital_stage(&cfg, &mut brng).unwrap();
        let aplan = design_analog_stage(&cfg, &mut brng);
        let out = run_training(
            LinkDirection::Downlink,
            &cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            0.0,
            &mut substream(17, label::NOISE, 0),
        );
        let settings = SolverSettings::default();
        let (thetas, phis) = init_angles(&out.y_da, &aplan, &cfg, &settings).unwrap();
        let cell = PI / settings.init_grid_size as f64;
        assert!((thetas[0] - ch.thetas[0]).abs() <= cell);
        assert!((phis[0] - ch.phis[0]).abs() <= cell);

        let again = init_angles(&out.y_da, &aplan, &cfg, &settings).unwrap();
        assert_eq!((thetas, phis), again);
    }

    #[test]
    fn init_angles_exact_on_grid_node() {
        let mut cfg = SystemConfig::new(12, 12, 2, 2, 1);
        cfg.k_paths = 1;
        let settings = SolverSettings::default();
        let g = settings.init_grid_size as f64;
        let theta_node = -FRAC_PI_2 + PI * 20.0 / g;
        let phi_node = -FRAC_PI_2 + PI * 45.0 / g;
        let ch = ChannelRealization {
            alphas: CVector::ones(1),
            thetas: vec![theta_node],
            phis: vec![phi_node],
        };
        let mm = MismatchSet::identity(&cfg);
        let mut brng = substream(18, label::BEAMFORMERS, 0);
        let dplan = design_digital_stage(&cfg, &mut brng).unwrap();
        let aplan = design_analog_stage(&cfg, &mut brng);
        let out = run_training(
            LinkDirection::Downlink,
            &cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            0.0,
            &mut substream(18, label::NOISE, 0),
        );
        let (thetas, phis) = init_angles(&out.y_da, &aplan, &cfg, &settings).unwrap();
        assert_eq!(thetas[0], theta_node);
        assert_eq!(phis[0], phi_node);
    }

    #[test]
    fn init_angles_rejects_too_many_paths() {
        let mut cfg = SystemConfig::new(8, 8, 2, 2, 3);
        cfg.pilot_plan.q_da = 2;
        cfg.pilot_plan.p_da = 2;
        let aplan = design_analog_stage(&cfg, &mut substream(19, label::BEAMFORMERS, 0));
        let y = CMatrix::zeros(2, 2);
        assert!(matches!(
            init_angles(&y, &aplan, &cfg, &SolverSettings::default()),
            Err(SolverError::TooManyPaths { .. })
        ));
    }

    #[test]
    fn calibrate_analog_truth_init_noiseless_converges() {
        let cfg = SystemConfig::new(16, 16, 4, 4, 2);
        let (ch, mm, _, aplan, out) = scenario(&cfg, 20, 0.0);
        let settings = SolverSettings::default();
        let cal = calibrate_analog(
            &out.y_da,
            &aplan,
            &cfg,
            &settings,
            AnalogInit::oracle(
                ch.thetas.clone(),
                ch.phis.clone(),
                mm.t2.clone(),
                mm.u2.clone(),
            ),
            &mut substream(20, label::SOLVER, 0),
        )
        .unwrap();
        let rel = cal.objective_trace.last().unwrap() / out.y_da.fro_norm_sq();
        assert!(rel < 1e-16, "relative residual {}", rel);
        assert!(cal.converged);
        assert!(cal.iterations <= 2, "iterations {}", cal.iterations);

        let recon = reconstruct_effective_channel(&cal, &cfg);
        let truth = effective_channel(LinkDirection::Downlink, &cfg, &ch, &mm);
        let d = collinearity_defect(&vec_of(&recon), &vec_of(&truth));
        assert!(d < 1e-8, "collinearity defect {}", d);
    }

    #[test]
    fn calibrate_analog_zero_input_terminates_clean() {
        let cfg = SystemConfig::new(8, 8, 2, 2, 2);
        let (_, _, _, aplan, _) = scenario(&cfg, 21, 0.0);
        let y0 = CMatrix::zeros(aplan.p_da(), aplan.q_da());
        let cal = calibrate_analog(
            &y0,
            &aplan,
            &cfg,
            &SolverSettings::default(),
            AnalogInit::warm_angles(vec![0.1, -0.4], vec![0.3, 0.8]),
            &mut substream(21, label::SOLVER, 0),
        )
        .unwrap();
        assert_eq!(cal.h_alpha_hat.norm(), 0.0);
        assert_eq!(*cal.objective_trace.last().unwrap(), 0.0);
        assert!(cal.converged);
    }

    #[test]
    fn calibrate_analog_rejects_short_pilots() {
        let mut cfg = SystemConfig::new(8, 8, 2, 2, 2);
        cfg.pilot_plan.q_da = 3;
        let aplan = design_analog_stage(&cfg, &mut substream(22, label::BEAMFORMERS, 0));
        let y = CMatrix::zeros(cfg.pilot_plan.p_da, 3);
        let err = calibrate_analog(
            &y,
            &aplan,
            &cfg,
            &SolverSettings::default(),
            AnalogInit::from_data(),
            &mut substream(22, label::SOLVER, 0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("q_da = 3"));
    }

    #[test]
    fn objective_trace_non_increasing_on_noisy_runs() {
        let cfg = SystemConfig::new(8, 8, 2, 2, 2);
        let settings = SolverSettings::default();
        for seed in 0..10 {
            let (_, _, _, aplan, out) = scenario(&cfg, 100 + seed, 0.5);
            let cal = calibrate_analog(
                &out.y_da,
                &aplan,
                &cfg,
                &settings,
                AnalogInit::from_data(),
                &mut substream(100 + seed, label::SOLVER, 0),
            )
            .unwrap();
            for w in cal.objective_trace.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-12),
                    "trace increased: {:?} (seed {})",
                    w,
                    seed
                );
            }
            assert_eq!(cal.iterations, cal.objective_trace.len() - 1);
        }
    }

    #[test]
    fn update_order_switch_is_accepted() {
        let cfg = SystemConfig::new(8, 8, 2, 2, 2);
        let (ch, _, _, aplan, out) = scenario(&cfg, 23, 0.2);
        let settings = SolverSettings {
            update_order: UpdateOrder::GainsU2T2,
            ..SolverSettings::default()
        };
        let cal = calibrate_analog(
            &out.y_da,
            &aplan,
            &cfg,
            &settings,
            AnalogInit::warm_angles(ch.thetas.clone(), ch.phis.clone()),
            &mut substream(23, label::SOLVER, 0),
        )
        .unwrap();
        for w in cal.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn reconstruction_from_truth_parts_is_exact() {
        let cfg = SystemConfig::new(8, 8, 2, 2, 2);
        let (ch, mm, _, _, _) = scenario(&cfg, 24, 0.0);
        let h = folded_gains(&cfg, &ch);
        let eff = effective_from_parts(&cfg, &mm.u2, &mm.t2, &h, &ch.thetas, &ch.phis);
        let truth = effective_channel(LinkDirection::Downlink, &cfg, &ch, &mm);
        assert!(eff.sub(&truth).fro_norm() < 1e-12 * truth.fro_norm());

        let zero = effective_from_parts(
            &cfg,
            &mm.u2,
            &mm.t2,
            &CVector::zeros(cfg.k_paths),
            &ch.thetas,
            &ch.phis,
        );
        assert_eq!(zero.fro_norm(), 0.0);
    }

    #[test]
    fn wrap_angle_preserves_sine() {
        for &x in &[0.3, 1.7, -2.0, 3.3, -4.9, FRAC_PI_2, -FRAC_PI_2, 9.0] {
            let w = wrap_angle(x);
            assert!((-FRAC_PI_2 - 1e-12..=FRAC_PI_2 + 1e-12).contains(&w));
            assert!((w.sin() - x.sin()).abs() < 1e-12, "x = {}", x);
        }
    }
}
