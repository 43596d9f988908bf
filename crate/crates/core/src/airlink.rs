//! Over-the-air training simulation.
//!
//! Applies the stage beamformers, the hardware mismatch, the wireless channel
//! and additive receiver noise to produce the stacked received-signal
//! matrices the solvers consume. Noise enters at the antenna ports, before
//! the analog combiner, so the post-combining noise keeps its true coloring.

use crate::channel::{assemble_channel, ChannelRealization, MismatchSet, SystemConfig};
use crate::mathkit::{CMatrix, CVector};
use crate::pilots::{AnalogStagePlan, DigitalStagePlan};
use crate::streams::Stream;
use num_complex::Complex64;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Which end transmits the training pilots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkDirection {
    Downlink,
    Uplink,
}

/// Stacked received pilots from both training stages.
///
/// `beta_d` is the ground-truth effective gain of the digital stage. It is
/// retained for bound evaluation only; the solver entry points accept only
/// received signals and plan data, so it can never leak into an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutput {
    /// Digital-stage output, (m_r * p_dr) x q_dr.
    pub y_dr: CMatrix,
    /// Analog-stage output, p_da x q_da.
    pub y_da: CMatrix,
    /// Effective digital-stage gain `b^T H_eff f / sqrt(m_t)`.
    pub beta_d: Complex64,
}

/// One circular complex Gaussian antenna-noise vector.
fn noise_vector(n: usize, noise_var: f64, rng: &mut Stream) -> CVector {
    let s = (noise_var / 2.0).sqrt();
    CVector::from_fn(n, |_| {
        let re: f64 = rand::Rng::sample(rng, StandardNormal);
        let im: f64 = rand::Rng::sample(rng, StandardNormal);
        Complex64::new(re * s, im * s)
    })
}

/// Effective analog-level channel for the given direction: the wireless
/// channel sandwiched by the analog-chain mismatch of the active ends.
pub fn effective_channel(
    dir: LinkDirection,
    cfg: &SystemConfig,
    ch: &ChannelRealization,
    mm: &MismatchSet,
) -> CMatrix {
    match dir {
        LinkDirection::Downlink => {
            let h = assemble_channel(cfg, ch);
            h.transpose().scale_rows(&mm.u2).scale_cols(&mm.t2)
        }
        LinkDirection::Uplink => {
            let rcfg = cfg.reversed();
            let h = assemble_channel(&rcfg, &ch.reversed());
            h.transpose().scale_rows(&mm.r2).scale_cols(&mm.v2)
        }
    }
}

/// Simulate both training stages for one direction.
///
/// For the downlink, the transmitter runs digital mismatch `t1` and analog
/// mismatch `t2`, the receiver `u1`/`u2`; the uplink swaps roles, with
/// (`v1`, `v2`) transmitting and (`r1`, `r2`) receiving over the transposed
/// channel. Plans must be sized for the transmitting/receiving ends of the
/// chosen direction.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    dir: LinkDirection,
    cfg: &SystemConfig,
    ch: &ChannelRealization,
    mm: &MismatchSet,
    dplan: &DigitalStagePlan,
    aplan: &AnalogStagePlan,
    noise_var: f64,
    rng: &mut Stream,
) -> TrainingOutput {
    match dir {
        LinkDirection::Downlink => run_training_core(cfg, ch, mm, dplan, aplan, noise_var, rng),
        LinkDirection::Uplink => run_training_core(
            &cfg.reversed(),
            &ch.reversed(),
            &mm.reversed(),
            dplan,
            aplan,
            noise_var,
            rng,
        ),
    }
}

fn run_training_core(
    cfg: &SystemConfig,
    ch: &ChannelRealization,
    mm: &MismatchSet,
    dplan: &DigitalStagePlan,
    aplan: &AnalogStagePlan,
    noise_var: f64,
    rng: &mut Stream,
) -> TrainingOutput {
    let (n_t, n_r, m_t, m_r) = (cfg.n_t, cfg.n_r, cfg.m_t, cfg.m_r);
    assert_eq!(dplan.f_dr.len(), n_t, "digital plan transmit beam size");
    assert_eq!(dplan.b_dr.len(), n_r, "digital plan receive beam size");
    assert_eq!(dplan.x_dr.rows(), m_t, "digital pilot row count");
    assert_eq!(aplan.f_da.rows(), n_t, "analog plan transmit beam size");
    assert_eq!(aplan.b_da.rows(), n_r, "analog plan receive beam size");

    let h = assemble_channel(cfg, ch);
    let h_eff = h.transpose().scale_rows(&mm.u2).scale_cols(&mm.t2);

    // Digital stage. The shared beams collapse the arrays: every received
    // column is the rank-1 pattern u1 * (beta * t1^T x_q), plus combined noise.
    let hf = h_eff.mul_vec(&dplan.f_dr);
    let mut beta_d = Complex64::new(0.0, 0.0);
    for i in 0..n_r {
        beta_d += dplan.b_dr[i] * hf[i];
    }
    beta_d *= Complex64::new(1.0 / (m_t as f64).sqrt(), 0.0);

    let q_dr = dplan.x_dr.cols();
    let p_dr = dplan.p_dr;
    // s_q = t1^T x_q.
    let s = dplan.x_dr.transpose().mul_vec(&mm.t1);
    let mut y_dr = CMatrix::zeros(m_r * p_dr, q_dr);
    for p in 0..p_dr {
        for q in 0..q_dr {
            let signal = beta_d * s[q];
            let w = if noise_var > 0.0 {
                let n = noise_vector(n_r, noise_var, rng);
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..n_r {
                    acc += dplan.b_dr[i] * n[i];
                }
                acc
            } else {
                Complex64::new(0.0, 0.0)
            };
            for m in 0..m_r {
                y_dr[(p * m_r + m, q)] = mm.u1[m] * (signal + w);
            }
        }
    }

    // Analog stage. Only the first digital chain is active on both ends.
    let q_da = aplan.q_da();
    let p_da = aplan.p_da();
    let g = aplan.b_da.transpose().mul(&h_eff).mul(&aplan.f_da);
    let u11t11 = mm.u1[0] * mm.t1[0];
    let mut y_da = CMatrix::zeros(p_da, q_da);
    for p in 0..p_da {
        for q in 0..q_da {
            let mut y = u11t11 * g[(p, q)] * aplan.x_da[q];
            if noise_var > 0.0 {
                let n = noise_vector(n_r, noise_var, rng);
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..n_r {
                    acc += aplan.b_da[(i, p)] * n[i];
                }
                y += mm.u1[0] * acc;
            }
            y_da[(p, q)] = y;
        }
    }

    TrainingOutput { y_dr, y_da, beta_d }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_channel, sample_mismatch};
    use crate::mathkit::singular_values;
    use crate::pilots::{design_analog_stage, design_digital_stage};
    use crate::streams::{label, substream};

    fn setup(
        cfg: &SystemConfig,
        seed: u64,
    ) -> (
        ChannelRealization,
        MismatchSet,
        DigitalStagePlan,
        AnalogStagePlan,
    ) {
        let ch = sample_channel(cfg, &mut substream(seed, label::CHANNEL, 0));
        let mm = sample_mismatch(cfg, &mut substream(seed, label::MISMATCH, 0));
        let mut brng = substream(seed, label::BEAMFORMERS, 0);
        let dplan = design_digital_stage(cfg, &mut brng).unwrap();
        let aplan = design_analog_stage(cfg, &mut brng);
        (ch, mm, dplan, aplan)
    }

    #[test]
    fn noiseless_identity_broadside_is_rank_one_outer_product() {
        let mut cfg = SystemConfig::new(4, 4, 2, 2, 1);
        cfg.k_paths = 1;
        let ch = ChannelRealization {
            alphas: CVector::ones(1),
            thetas: vec![0.0],
            phis: vec![0.0],
        };
        let mm = MismatchSet::identity(&cfg);
        let (_, _, dplan, aplan) = setup(&cfg, 3);
        let out = run_training(
            LinkDirection::Downlink,
            &cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            0.0,
            &mut substream(3, label::NOISE, 0),
        );
        // Every block row equals beta * 1^T X exactly.
        let s = dplan.x_dr.transpose().mul_vec(&mm.t1);
        for m in 0..cfg.m_r {
            for q in 0..dplan.x_dr.cols() {
                assert_eq!(out.y_dr[(m, q)], out.beta_d * s[q]);
            }
        }
        let sv = singular_values(&out.y_dr);
        assert!(sv[1] <= 1e-10 * sv[0]);
    }

    #[test]
    fn noiseless_digital_output_is_always_rank_one_and_row_proportional() {
        let cfg = SystemConfig::new(8, 8, 3, 3, 2);
        for seed in 0..5 {
            let (ch, mm, dplan, aplan) = setup(&cfg, seed);
            let out = run_training(
                LinkDirection::Downlink,
                &cfg,
                &ch,
                &mm,
                &dplan,
                &aplan,
                0.0,
                &mut substream(seed, label::NOISE, 0),
            );
            let sv = singular_values(&out.y_dr);
            assert!(sv[1] <= 1e-10 * sv[0], "seed {}", seed);
            // Row m is u1[m] / u1[0] times the reference row.
            for m in 1..cfg.m_r {
                let ratio = mm.u1[m] / mm.u1[0];
                for q in 0..dplan.x_dr.cols() {
                    let want = out.y_dr[(0, q)] * ratio;
                    assert!(
                        (out.y_dr[(m, q)] - want).norm() <= 1e-12 * want.norm().max(1e-30),
                        "row proportionality broke at ({}, {})",
                        m,
                        q
                    );
                }
            }
        }
    }

    #[test]
    fn noiseless_analog_output_matches_straight_line_oracle() {
        let cfg = SystemConfig::new(6, 5, 2, 2, 2);
        let (ch, mm, dplan, aplan) = setup(&cfg, 11);
        let out = run_training(
            LinkDirection::Downlink,
            &cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            0.0,
            &mut substream(11, label::NOISE, 0),
        );
        // Independent evaluation: y[p,q] = u11 t11 * b_p^T U2 H^T T2 f_q * x_q
        // computed entry by entry from scratch.
        let h = assemble_channel(&cfg, &ch);
        for p in 0..aplan.p_da() {
            for q in 0..aplan.q_da() {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..cfg.n_r {
                    for j in 0..cfg.n_t {
                        acc += aplan.b_da[(i, p)]
                            * mm.u2[i]
                            * h[(j, i)]
                            * mm.t2[j]
                            * aplan.f_da[(j, q)];
                    }
                }
                let want = mm.u1[0] * mm.t1[0] * acc * aplan.x_da[q];
                let scale = want.norm().max(1.0);
                assert!((out.y_da[(p, q)] - want).norm() < 1e-11 * scale);
            }
        }
    }

    #[test]
    fn full_receive_chain_zeroes_inactive_digital_outputs() {
        // Simulating the complete receive chain with the analog-stage digital
        // combiner: all outputs beyond the first digital chain are exactly zero.
        let cfg = SystemConfig::new(6, 6, 3, 3, 2);
        let (ch, mm, dplan, aplan) = setup(&cfg, 21);
        let h_eff = effective_channel(LinkDirection::Downlink, &cfg, &ch, &mm);
        let out = run_training(
            LinkDirection::Downlink,
            &cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            0.0,
            &mut substream(21, label::NOISE, 0),
        );
        for p in 0..aplan.p_da() {
            for q in 0..aplan.q_da() {
                // Transmit side: x_q through W_da = blkdiag(1, 0) and T1,
                // then the analog beams; receive side: B_da, U1, D_da.
                let mut antenna_in = CVector::zeros(cfg.n_t);
                for j in 0..cfg.n_t {
                    antenna_in[j] = aplan.f_da[(j, q)] * mm.t1[0] * aplan.x_da[q];
                }
                let at_rx = h_eff.mul_vec(&antenna_in);
                let mut outputs = CVector::zeros(cfg.m_r);
                for m in 0..cfg.m_r {
                    // D_da^T row m: only (1,1) is nonzero.
                    if m == 0 {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for i in 0..cfg.n_r {
                            acc += aplan.b_da[(i, p)] * at_rx[i];
                        }
                        outputs[0] = mm.u1[0] * acc;
                    } else {
                        outputs[m] = Complex64::new(0.0, 0.0) * mm.u1[m];
                    }
                }
                for m in 1..cfg.m_r {
                    assert_eq!(outputs[m], Complex64::new(0.0, 0.0));
                }
                let scale = outputs[0].norm().max(1.0);
                assert!((outputs[0] - out.y_da[(p, q)]).norm() < 1e-11 * scale);
            }
        }
    }

    #[test]
    fn uplink_equals_downlink_on_swapped_inputs() {
        let cfg = SystemConfig::new(6, 4, 3, 2, 2);
        let (ch, mm, _, _) = setup(&cfg, 31);
        let rcfg = cfg.reversed();
        let mut brng = substream(31, label::BEAMFORMERS, 1);
        let dplan = design_digital_stage(&rcfg, &mut brng).unwrap();
        let aplan = design_analog_stage(&rcfg, &mut brng);

        let up = run_training(
            LinkDirection::Uplink,
            &cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            0.25,
            &mut substream(31, label::NOISE, 5),
        );
        let down_on_swapped = run_training(
            LinkDirection::Downlink,
            &rcfg,
            &ch.reversed(),
            &mm.reversed(),
            &dplan,
            &aplan,
            0.25,
            &mut substream(31, label::NOISE, 5),
        );
        assert_eq!(up, down_on_swapped);
    }

    #[test]
    fn uplink_noiseless_matches_entrywise_oracle() {
        let cfg = SystemConfig::new(6, 4, 3, 2, 2);
        let (ch, mm, _, _) = setup(&cfg, 41);
        let rcfg = cfg.reversed();
        let mut brng = substream(41, label::BEAMFORMERS, 1);
        let dplan = design_digital_stage(&rcfg, &mut brng).unwrap();
        let aplan = design_analog_stage(&rcfg, &mut brng);
        let out = run_training(
            LinkDirection::Uplink,
            &cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            0.0,
            &mut substream(41, label::NOISE, 0),
        );
        // Uplink analog model: y[p,q] = v11 r11 * b_p^T R2 H V2 f_q * x_q,
        // where f goes out of the UE (n_r side) and b combines at the BS.
        let h = assemble_channel(&cfg, &ch);
        for p in 0..aplan.p_da() {
            for q in 0..aplan.q_da() {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..cfg.n_t {
                    for j in 0..cfg.n_r {
                        acc += aplan.b_da[(i, p)]
                            * mm.r2[i]
                            * h[(i, j)]
                            * mm.v2[j]
                            * aplan.f_da[(j, q)];
                    }
                }
                let want = mm.r1[0] * mm.v1[0] * acc * aplan.x_da[q];
                let scale = want.norm().max(1.0);
                assert!((out.y_da[(p, q)] - want).norm() < 1e-11 * scale);
            }
        }
    }
}
