//! Metrics and the Monte-Carlo sweep harness.
//!
//! Coefficient errors are reported as normalized mean-square error, with and
//! without complex-scale alignment: the analog estimates are identifiable
//! only up to a scale family, so their acceptance metric is aligned NMSE (or
//! collinearity), never raw vector equality. The achievable-rate pipeline
//! designs analog beams from the phases of the estimated effective channel's
//! singular vectors and digital precoders/combiners from the resulting
//! equivalent channel, then evaluates the true link with the true mismatch in
//! the signal path.

use crate::airlink::{effective_channel, run_training, LinkDirection, TrainingOutput};
use crate::channel::{
    folded_gains, sample_channel, sample_mismatch, ChannelRealization, MismatchSet, SystemConfig,
};
use crate::crc::{
    crc_estimate_equivalent_channel, crc_run_training, crc_coefficients, CrcError, MAX_EQ_VEC_LEN,
};
use crate::crlb::{crlb_full, AnalogTruth, CrlbError};
use crate::hac::{
    calibrate_analog, reconstruct_effective_channel, solve_digital, AnalogCalibration, AnalogInit,
    DigitalCalibration, SolverError, SolverSettings,
};
use crate::mathkit::{svd, vec_of, CMatrix, CVector};
use crate::pilots::{
    design_analog_stage, design_digital_stage, validate_pilot_lengths, PilotError,
};
use crate::streams::substream;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("truth vector is zero; NMSE undefined")]
    ZeroTruth,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("stream count {n_s} exceeds min(m_t, m_r) = {max}")]
    TooManyStreams { n_s: usize, max: usize },
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error("pilot plan rejected: {0}")]
    Pilot(#[from] PilotError),
    #[error("config rejected: {0}")]
    Config(#[from] crate::channel::ConfigError),
}

/// Per-trial solver failures; the trial is dropped and counted, the sweep
/// continues.
#[derive(Debug, Error)]
pub enum TrialError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Crc(#[from] CrcError),
    #[error(transparent)]
    Crlb(#[from] CrlbError),
    #[error(transparent)]
    Pilot(#[from] PilotError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// `1 - |<a,b>|^2 / (|a|^2 |b|^2)`: zero iff the vectors are parallel.
pub fn collinearity_defect(a: &CVector, b: &CVector) -> f64 {
    let ip = a.dot_h(b).norm_sqr();
    1.0 - ip / (a.norm_sq() * b.norm_sq())
}

/// Normalized mean-square error `|truth - c est|^2 / |truth|^2` with `c = 1`
/// (raw) or the least-squares complex scale `<est, truth> / |est|^2`
/// (aligned).
pub fn nmse(est: &CVector, truth: &CVector, align: bool) -> Result<f64, EvalError> {
    if est.len() != truth.len() {
        return Err(EvalError::LengthMismatch(est.len(), truth.len()));
    }
    let denom = truth.norm_sq();
    if denom == 0.0 {
        return Err(EvalError::ZeroTruth);
    }
    let c = if align {
        let e2 = est.norm_sq();
        if e2 == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            est.dot_h(truth) / Complex64::new(e2, 0.0)
        }
    } else {
        Complex64::new(1.0, 0.0)
    };
    Ok(truth.sub(&est.scale(c)).norm_sq() / denom)
}

/// NMSE between matrices through their vectorizations.
pub fn nmse_matrix(est: &CMatrix, truth: &CMatrix, align: bool) -> Result<f64, EvalError> {
    nmse(&vec_of(est), &vec_of(truth), align)
}

/// What the transceiver believes about the link when designing beams.
#[derive(Debug, Clone)]
pub enum CalKnowledge {
    /// True effective channel and digital coefficients.
    Perfect,
    /// Reciprocity assumed blindly: the transposed uplink effective channel,
    /// digital mismatch unknown (taken as one).
    None,
    /// Joint estimates from the hierarchical calibration.
    Estimates {
        digital: DigitalCalibration,
        analog: AnalogCalibration,
    },
    /// Relative-calibration corrected equivalent channel of the virtual
    /// array ((m_r n_r) x (m_t n_t)).
    CrcCorrected { h_dl_eq: CMatrix },
}

fn phase_only(m: &CMatrix) -> CMatrix {
    m.map(|z| {
        if z.norm() == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::from_polar(1.0, z.arg())
        }
    })
}

/// Sum achievable rate of the downlink in bits/s/Hz.
///
/// `data_snr` is the linear transmit-SNR; the transmit power is
/// `data_snr * noise_var`. Analog beams take the phases of the leading
/// singular vectors of the believed effective channel; digital stages
/// diagonalize the believed equivalent channel; the reported rate runs the
/// true mismatch in the signal path.
pub fn achievable_rate(
    cfg: &SystemConfig,
    ch: &ChannelRealization,
    mm: &MismatchSet,
    cal: &CalKnowledge,
    data_snr: f64,
    n_s: usize,
) -> Result<f64, EvalError> {
    if n_s > cfg.m_t.min(cfg.m_r) {
        return Err(EvalError::TooManyStreams {
            n_s,
            max: cfg.m_t.min(cfg.m_r),
        });
    }
    let h_dl_true = effective_channel(LinkDirection::Downlink, cfg, ch, mm);

    // Believed effective channel and digital coefficients.
    let (h_dl_hat, u1_hat, t1_hat) = match cal {
        CalKnowledge::Perfect => (h_dl_true.clone(), mm.u1.clone(), mm.t1.clone()),
        CalKnowledge::None => (
            effective_channel(LinkDirection::Uplink, cfg, ch, mm).transpose(),
            CVector::ones(cfg.m_r),
            CVector::ones(cfg.m_t),
        ),
        CalKnowledge::Estimates { digital, analog } => (
            reconstruct_effective_channel(analog, cfg),
            digital.u1_hat.clone(),
            digital.t1_hat.clone(),
        ),
        CalKnowledge::CrcCorrected { h_dl_eq } => {
            // Block (m, m') of the big equivalent channel is
            // u1[m] t1[m'] (U2 H^T T2); the (0, 0) block plays the effective
            // channel (its family scale is immaterial for the SVD beams) and
            // the per-chain ratios recover relative digital coefficients.
            let base = h_dl_eq.block(0, 0, cfg.n_r, cfg.n_t);
            let base_vec = vec_of(&base);
            let base_norm = base_vec.norm_sq();
            if base_norm == 0.0 {
                return Err(EvalError::InvalidExperiment(
                    "corrected equivalent channel has an empty leading block".into(),
                ));
            }
            let u1_hat = CVector::from_fn(cfg.m_r, |m| {
                let blk = vec_of(&h_dl_eq.block(m * cfg.n_r, 0, cfg.n_r, cfg.n_t));
                base_vec.dot_h(&blk) / Complex64::new(base_norm, 0.0)
            });
            let t1_hat = CVector::from_fn(cfg.m_t, |mp| {
                let blk = vec_of(&h_dl_eq.block(0, mp * cfg.n_t, cfg.n_r, cfg.n_t));
                base_vec.dot_h(&blk) / Complex64::new(base_norm, 0.0)
            });
            (base, u1_hat, t1_hat)
        }
    };

    // Analog beams from the believed channel's singular frames.
    let f_hat = svd(&h_dl_hat);
    let f_t = phase_only(&f_hat.v.block(0, 0, cfg.n_t, cfg.m_t));
    let b_r = phase_only(&f_hat.u.block(0, 0, cfg.n_r, cfg.m_r).conj());

    // Digital stage from the believed equivalent channel.
    let h_eq_hat = b_r
        .transpose()
        .mul(&h_dl_hat)
        .mul(&f_t)
        .scale_rows(&u1_hat)
        .scale_cols(&t1_hat);
    let d_hat = svd(&h_eq_hat);
    let w_t = d_hat.v.block(0, 0, cfg.m_t, n_s);
    let d_r = d_hat.u.block(0, 0, cfg.m_r, n_s).conj();

    // True link through the designed beams.
    let h_eq_true = b_r
        .transpose()
        .mul(&h_dl_true)
        .mul(&f_t)
        .scale_rows(&mm.u1)
        .scale_cols(&mm.t1);
    let h_bar = d_r.transpose().mul(&h_eq_true).mul(&w_t);

    // Per-stream combined-noise power.
    let combiner = d_r.transpose().scale_cols(&mm.u1).mul(&b_r.transpose());
    let rho_d = data_snr * cfg.noise_var;
    let mut rate = 0.0;
    for s in 0..n_s {
        let signal = rho_d * h_bar[(s, s)].norm_sqr();
        let mut interference = 0.0;
        for i in 0..n_s {
            if i != s {
                interference += h_bar[(s, i)].norm_sqr();
            }
        }
        let noise = combiner.row(s).norm_sq() * cfg.noise_var;
        rate += (1.0 + signal / (rho_d * interference + noise)).log2();
    }
    Ok(rate)
}

/// Calibration methods the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "HAC")]
    Hac,
    #[serde(rename = "OracleHAC")]
    OracleHac,
    #[serde(rename = "CRC")]
    Crc,
    #[serde(rename = "Perfect")]
    Perfect,
    #[serde(rename = "None")]
    None,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Hac => "HAC",
            Method::OracleHac => "OracleHAC",
            Method::Crc => "CRC",
            Method::Perfect => "Perfect",
            Method::None => "None",
        }
    }
}

/// Which axis a sweep walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepKind {
    /// Calibration SNR in dB; reports coefficient/channel NMSE and bounds.
    #[serde(rename = "cal-snr")]
    CalSnr,
    /// Analog-stage pilot length (q_da = p_da = value); NMSE metrics.
    #[serde(rename = "pilot-length")]
    PilotLength,
    /// Data SNR in dB at fixed calibration SNR; rate metric.
    #[serde(rename = "rate-vs-data-snr")]
    RateVsDataSnr,
    /// Calibration SNR in dB at fixed data SNR; rate metric.
    #[serde(rename = "rate-vs-cal-snr")]
    RateVsCalSnr,
    /// Analog-stage pilot length at fixed SNRs; rate metric.
    #[serde(rename = "rate-vs-pilots")]
    RateVsPilots,
}

impl SweepKind {
    pub fn is_rate(&self) -> bool {
        matches!(
            self,
            SweepKind::RateVsDataSnr | SweepKind::RateVsCalSnr | SweepKind::RateVsPilots
        )
    }
}

/// Full description of one Monte-Carlo experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub sweep_kind: SweepKind,
    pub sweep_values: Vec<f64>,
    pub trials: usize,
    pub master_seed: u64,
    pub cfg: SystemConfig,
    pub settings: SolverSettings,
    pub methods: Vec<Method>,
    /// Spatial streams for the rate metric.
    pub n_streams: usize,
    /// Redraw the mismatch every trial (default); otherwise hold the trial-0
    /// draw fixed across the whole sweep.
    pub redraw_mismatch: bool,
}

/// One aggregated measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std_error: f64,
    pub trials_used: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sweep_value,method,metric,mean,std_error,trials_used\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sweep_value, r.method, r.metric, r.mean, r.std_error, r.trials_used
            ));
        }
        out
    }

    pub fn get(&self, value: f64, method: &str, metric: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.sweep_value == value && r.method == method && r.metric == metric)
    }
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl ExperimentSpec {
    /// Config for one sweep point.
    fn cfg_at(&self, value: f64) -> Result<SystemConfig, EvalError> {
        let mut cfg = self.cfg.clone();
        match self.sweep_kind {
            SweepKind::CalSnr | SweepKind::RateVsCalSnr => {
                cfg.pilot_power = cfg.noise_var * db_to_linear(value);
            }
            SweepKind::RateVsDataSnr => {
                cfg.data_power = cfg.noise_var * db_to_linear(value);
            }
            SweepKind::PilotLength | SweepKind::RateVsPilots => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(EvalError::InvalidExperiment(format!(
                        "pilot-length sweep value {} is not a positive integer",
                        value
                    )));
                }
                cfg.pilot_plan.q_da = value as usize;
                cfg.pilot_plan.p_da = value as usize;
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.trials == 0 {
            return Err(EvalError::InvalidExperiment("trials must be >= 1".into()));
        }
        if self.sweep_values.is_empty() {
            return Err(EvalError::InvalidExperiment("no sweep values".into()));
        }
        if self.sweep_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EvalError::InvalidExperiment(
                "sweep values must be strictly increasing".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(EvalError::InvalidExperiment("no methods selected".into()));
        }
        self.cfg.validate()?;
        if self.sweep_kind.is_rate() && self.n_streams > self.cfg.m_t.min(self.cfg.m_r) {
            return Err(EvalError::TooManyStreams {
                n_s: self.n_streams,
                max: self.cfg.m_t.min(self.cfg.m_r),
            });
        }
        if self.methods.contains(&Method::Crc) {
            let size = self.cfg.n_t * self.cfg.m_t * self.cfg.n_r * self.cfg.m_r;
            if size > MAX_EQ_VEC_LEN {
                return Err(EvalError::InvalidExperiment(format!(
                    "CRC requested but n_t*m_t*n_r*m_r = {} exceeds the desk-scale cap {}",
                    size, MAX_EQ_VEC_LEN
                )));
            }
        }
        for &v in &self.sweep_values {
            let cfg = self.cfg_at(v)?;
            cfg.validate()?;
            let rep = validate_pilot_lengths(&cfg);
            if !rep.ok {
                return Err(EvalError::InvalidExperiment(format!(
                    "sweep value {} violates pilot minima: {}",
                    v,
                    rep.violations(&cfg).join("; ")
                )));
            }
        }
        Ok(())
    }
}

/// One trial's metric samples: (method name, metric name, value).
type TrialSamples = Vec<(&'static str, &'static str, f64)>;

/// Truth-referenced coefficient vectors in the conventions the estimators
/// can actually reach (reference chain pinned; effective-gain scale folded).
struct TruthView {
    u1_conv: CVector,
    t1_conv: CVector,
    u1_plain: CVector,
    t1_plain: CVector,
    u2_plain: CVector,
    t2_plain: CVector,
    h_eff_conv: CMatrix,
    h_eff_plain: CMatrix,
}

fn truth_view(
    cfg: &SystemConfig,
    ch: &ChannelRealization,
    mm: &MismatchSet,
    beta_d: Complex64,
) -> TruthView {
    let inv_u11 = Complex64::new(1.0, 0.0) / mm.u1[0];
    let h_eff = effective_channel(LinkDirection::Downlink, cfg, ch, mm);
    TruthView {
        u1_conv: mm.u1.scale(inv_u11),
        t1_conv: mm.t1.scale(mm.u1[0] * beta_d),
        u1_plain: mm.u1.clone(),
        t1_plain: mm.t1.clone(),
        u2_plain: mm.u2.clone(),
        t2_plain: mm.t2.clone(),
        h_eff_conv: h_eff.scale(mm.u1[0] * mm.t1[0]),
        h_eff_plain: h_eff,
    }
}

fn push_nmse_rows(
    samples: &mut TrialSamples,
    method: &'static str,
    digital: &DigitalCalibration,
    analog: &AnalogCalibration,
    cfg: &SystemConfig,
    tv: &TruthView,
) -> Result<(), EvalError> {
    let recon = reconstruct_effective_channel(analog, cfg);
    samples.push((method, "nmse_u1_raw", nmse(&digital.u1_hat, &tv.u1_conv, false)?));
    samples.push((method, "nmse_u1_aligned", nmse(&digital.u1_hat, &tv.u1_plain, true)?));
    samples.push((method, "nmse_t1_raw", nmse(&digital.t1_hat, &tv.t1_conv, false)?));
    samples.push((method, "nmse_t1_aligned", nmse(&digital.t1_hat, &tv.t1_plain, true)?));
    samples.push((method, "nmse_u2_raw", nmse(&analog.u2_hat, &tv.u2_plain, false)?));
    samples.push((method, "nmse_u2_aligned", nmse(&analog.u2_hat, &tv.u2_plain, true)?));
    samples.push((method, "nmse_t2_raw", nmse(&analog.t2_hat, &tv.t2_plain, false)?));
    samples.push((method, "nmse_t2_aligned", nmse(&analog.t2_hat, &tv.t2_plain, true)?));
    samples.push((method, "nmse_heff_raw", nmse_matrix(&recon, &tv.h_eff_conv, false)?));
    samples.push((method, "nmse_heff_aligned", nmse_matrix(&recon, &tv.h_eff_plain, true)?));

    // Combined coefficient metric: per-block aligned errors over the joint
    // truth energy (the blocks live in independent scale families).
    let blocks: [(&CVector, &CVector); 4] = [
        (
            &CVector::from_fn(cfg.m_r - 1, |i| digital.u1_hat[i + 1]),
            &CVector::from_fn(cfg.m_r - 1, |i| tv.u1_plain[i + 1]),
        ),
        (&digital.t1_hat, &tv.t1_plain),
        (&analog.u2_hat, &tv.u2_plain),
        (&analog.t2_hat, &tv.t2_plain),
    ];
    let mut err = 0.0;
    let mut energy = 0.0;
    for (est, truth) in blocks {
        if truth.is_empty() {
            continue;
        }
        let e = nmse(est, truth, true)?;
        let t2n = truth.norm_sq();
        err += e * t2n;
        energy += t2n;
    }
    samples.push((method, "nmse_eta_ut_aligned", err / energy));
    Ok(())
}

/// Run every requested method on one (sweep value, trial) cell.
///
/// Per-purpose sub-streams are derived from the master seed and the trial
/// index only, so the same trial sees the same channel, mismatch, beams and
/// noise pattern at every sweep value (paired comparisons across the sweep).
pub fn run_single_trial(
    spec: &ExperimentSpec,
    cfg: &SystemConfig,
    trial: u64,
) -> Result<TrialSamples, TrialError> {
    let seed = spec.master_seed;
    let ch = sample_channel(cfg, &mut substream(seed, "channel", trial));
    let mm_trial = if spec.redraw_mismatch { trial } else { 0 };
    let mm = sample_mismatch(cfg, &mut substream(seed, "mismatch", mm_trial));

    let mut brng = substream(seed, "beamformers", trial);
    let dplan = design_digital_stage(cfg, &mut brng)?;
    let aplan = design_analog_stage(cfg, &mut brng);

    let needs_training = spec
        .methods
        .iter()
        .any(|m| matches!(m, Method::Hac | Method::OracleHac));
    let training: Option<TrainingOutput> = if needs_training {
        Some(run_training(
            LinkDirection::Downlink,
            cfg,
            &ch,
            &mm,
            &dplan,
            &aplan,
            cfg.noise_var,
            &mut substream(seed, "noise:hac", trial),
        ))
    } else {
        None
    };

    let mut samples: TrialSamples = Vec::new();
    let one = Complex64::new(1.0, 0.0);

    let run_hac = |oracle: bool, samples: &mut TrialSamples| -> Result<(DigitalCalibration, AnalogCalibration), TrialError> {
        let out = training.as_ref().expect("training present");
        let digital = solve_digital(&out.y_dr, &dplan.x_dr, dplan.p_dr, one)?;
        let init = if oracle {
            AnalogInit::frozen_angles(ch.thetas.clone(), ch.phis.clone())
        } else {
            AnalogInit::from_data()
        };
        let stream_label = if oracle { "solver:oracle" } else { "solver:hac" };
        let analog = calibrate_analog(
            &out.y_da,
            &aplan,
            cfg,
            &spec.settings,
            init,
            &mut substream(seed, stream_label, trial),
        )?;
        let _ = samples;
        Ok((digital, analog))
    };

    if spec.sweep_kind.is_rate() {
        // The sweep value (if any) is already folded into cfg.data_power.
        let data_snr = cfg.data_power / cfg.noise_var;
        for method in &spec.methods {
            let rate = match method {
                Method::Perfect => {
                    achievable_rate(cfg, &ch, &mm, &CalKnowledge::Perfect, data_snr, spec.n_streams)?
                }
                Method::None => {
                    achievable_rate(cfg, &ch, &mm, &CalKnowledge::None, data_snr, spec.n_streams)?
                }
                Method::Hac | Method::OracleHac => {
                    let (digital, analog) = run_hac(*method == Method::OracleHac, &mut samples)?;
                    achievable_rate(
                        cfg,
                        &ch,
                        &mm,
                        &CalKnowledge::Estimates { digital, analog },
                        data_snr,
                        spec.n_streams,
                    )?
                }
                Method::Crc => {
                    let q = cfg.n_t * cfg.m_t;
                    let p = cfg.n_r;
                    let dl = crc_run_training(
                        LinkDirection::Downlink,
                        cfg,
                        &ch,
                        &mm,
                        q,
                        p,
                        cfg.noise_var,
                        &mut substream(seed, "noise:crc-dl", trial),
                    )?;
                    let rcfg = cfg.reversed();
                    let ul = crc_run_training(
                        LinkDirection::Uplink,
                        cfg,
                        &ch,
                        &mm,
                        rcfg.n_t * rcfg.m_t,
                        rcfg.n_r,
                        cfg.noise_var,
                        &mut substream(seed, "noise:crc-ul", trial),
                    )?;
                    let h_dl_est = crc_estimate_equivalent_channel(&dl)?;
                    let h_ul_est = crc_estimate_equivalent_channel(&ul)?;
                    let coef = crc_coefficients(&h_ul_est, &h_dl_est)?;
                    // Corrected downlink equivalent channel from the uplink
                    // estimate and the relative coefficients.
                    let c_ue = coef.c_ue(cfg);
                    let inv_ue =
                        CVector::from_fn(c_ue.len(), |i| Complex64::new(1.0, 0.0) / c_ue[i]);
                    let corrected = h_ul_est
                        .transpose()
                        .scale_cols(&coef.c_bs(cfg))
                        .scale_rows(&inv_ue);
                    achievable_rate(
                        cfg,
                        &ch,
                        &mm,
                        &CalKnowledge::CrcCorrected { h_dl_eq: corrected },
                        data_snr,
                        spec.n_streams,
                    )?
                }
            };
            samples.push((method.name(), "rate_bps_hz", rate));
        }
    } else {
        let out = training.as_ref().expect("NMSE sweeps always train");
        let tv = truth_view(cfg, &ch, &mm, out.beta_d);
        for method in &spec.methods {
            match method {
                Method::Hac | Method::OracleHac => {
                    let (digital, analog) = run_hac(*method == Method::OracleHac, &mut samples)?;
                    push_nmse_rows(&mut samples, method.name(), &digital, &analog, cfg, &tv)?;
                }
                // The baseline estimates coefficient ratios, not absolute
                // coefficients, and the remaining methods carry no estimate;
                // none of them produce coefficient-NMSE rows.
                Method::Crc | Method::Perfect | Method::None => {}
            }
        }
        // Bound benchmark rows, normalized like the NMSE curves.
        let truth = AnalogTruth {
            t2: mm.t2.clone(),
            u2: mm.u2.clone(),
            h_alpha: folded_gains(cfg, &ch),
            thetas: ch.thetas.clone(),
            phis: ch.phis.clone(),
        };
        let rep = crlb_full(cfg, &aplan, &truth, out.beta_d, cfg.l_dr())?;
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        let t1_norm = tv.t1_plain.norm_sq();
        let u2_norm = tv.u2_plain.norm_sq();
        let t2_norm = tv.t2_plain.norm_sq();
        let eta_norm = CVector::from_fn(cfg.m_r - 1, |i| tv.u1_plain[i + 1]).norm_sq()
            + t1_norm
            + u2_norm
            + t2_norm;
        samples.push(("CRLB", "crlb_nmse_t1", sum(&rep.crlb_t1) / t1_norm));
        samples.push(("CRLB", "crlb_nmse_u2", sum(&rep.crlb_u2) / u2_norm));
        samples.push(("CRLB", "crlb_nmse_t2", sum(&rep.crlb_t2) / t2_norm));
        samples.push((
            "CRLB",
            "crlb_nmse_eta_ut",
            (sum(&rep.crlb_t1) + sum(&rep.crlb_u2) + sum(&rep.crlb_t2)) / eta_norm,
        ));
    }

    Ok(samples)
}

/// Run the whole sweep: deterministic in `master_seed`, trial-parallel, with
/// failed trials excluded and counted through `trials_used`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultTable, EvalError> {
    spec.validate()?;
    let mut table = ResultTable::default();
    for &value in &spec.sweep_values {
        let cfg = spec.cfg_at(value)?;
        let outcomes: Vec<Result<TrialSamples, TrialError>> = (0..spec.trials as u64)
            .into_par_iter()
            .map(|t| run_single_trial(spec, &cfg, t))
            .collect();

        // Aggregate in fixed trial order; a failed trial drops out entirely.
        let mut acc: Vec<((&'static str, &'static str), Vec<f64>)> = Vec::new();
        for outcome in outcomes.iter() {
            let Ok(samples) = outcome else { continue };
            for &(method, metric, v) in samples {
                match acc.iter_mut().find(|(k, _)| *k == (method, metric)) {
                    Some((_, xs)) => xs.push(v),
                    None => acc.push(((method, metric), vec![v])),
                }
            }
        }
        for ((method, metric), xs) in acc {
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let std_error = if n > 1 {
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            table.rows.push(ResultRow {
                sweep_value: value,
                method: method.to_string(),
                metric: metric.to_string(),
                mean,
                std_error,
                trials_used: n,
            });
        }
    }
    Ok(table)
}
