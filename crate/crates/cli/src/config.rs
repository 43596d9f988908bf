//! Config-file schema and resolution into core types.
//!
//! The file is TOML with three sections mirroring the core structures. SNR
//! values are given in dB and converted to linear powers once, here. Unknown
//! keys are rejected so typos cannot silently fall back to defaults.

use hbcal_core::channel::{PilotPlan, SystemConfig};
use hbcal_core::eval::{ExperimentSpec, Method, SweepKind};
use hbcal_core::hac::{SolverSettings, UpdateOrder};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub experiment: Option<ExperimentSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n_t: usize,
    pub n_r: usize,
    pub m_t: usize,
    pub m_r: usize,
    pub k_paths: usize,
    #[serde(default = "default_spacing")]
    pub d_over_lambda: f64,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    /// Calibration SNR in dB; pilot power is noise_var * 10^(dB/10).
    #[serde(default = "default_cal_snr_db")]
    pub cal_snr_db: f64,
    /// Data SNR in dB; data power is noise_var * 10^(dB/10).
    #[serde(default = "default_data_snr_db")]
    pub data_snr_db: f64,
    pub q_dr: Option<usize>,
    pub p_dr: Option<usize>,
    pub q_da: Option<usize>,
    pub p_da: Option<usize>,
    #[serde(default = "default_amp_var")]
    pub mismatch_amp_var: f64,
    /// Mismatch phase range in degrees (coefficient phases are uniform on
    /// +- this angle).
    #[serde(default = "default_phase_range_deg")]
    pub mismatch_phase_range_deg: f64,
}

fn default_spacing() -> f64 {
    0.5
}
fn default_noise_var() -> f64 {
    1.0
}
fn default_cal_snr_db() -> f64 {
    20.0
}
fn default_data_snr_db() -> f64 {
    30.0
}
fn default_amp_var() -> f64 {
    0.01
}
fn default_phase_range_deg() -> f64 {
    30.0
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub eps_outer: Option<f64>,
    pub eps_angle: Option<f64>,
    pub max_outer: Option<usize>,
    pub max_angle_iters: Option<usize>,
    pub init_grid_size: Option<usize>,
    /// "gains-t2-u2" (default) or "gains-u2-t2".
    pub update_order: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// One of cal-snr, pilot-length, rate-vs-data-snr, rate-vs-cal-snr,
    /// rate-vs-pilots.
    pub kind: String,
    pub values: Vec<f64>,
    pub trials: usize,
    pub methods: Vec<String>,
    pub n_streams: Option<usize>,
    #[serde(default = "default_true")]
    pub redraw_mismatch: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {err}")]
    Io { path: String, err: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

pub fn load(path: &str) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_string(),
        err: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl SystemSection {
    pub fn to_system_config(&self) -> SystemConfig {
        let q_dr = self.q_dr.unwrap_or(self.m_t);
        let p_dr = self.p_dr.unwrap_or(1);
        let q_da = self
            .q_da
            .unwrap_or(self.n_t.saturating_sub(self.k_paths) + 1);
        let p_da = self
            .p_da
            .unwrap_or(self.n_r.saturating_sub(self.k_paths) + 1);
        SystemConfig {
            n_t: self.n_t,
            n_r: self.n_r,
            m_t: self.m_t,
            m_r: self.m_r,
            k_paths: self.k_paths,
            d_over_lambda: self.d_over_lambda,
            noise_var: self.noise_var,
            pilot_power: self.noise_var * db_to_linear(self.cal_snr_db),
            data_power: self.noise_var * db_to_linear(self.data_snr_db),
            pilot_plan: PilotPlan {
                q_dr,
                p_dr,
                q_da,
                p_da,
            },
            mismatch_amp_var: self.mismatch_amp_var,
            mismatch_phase_range: self.mismatch_phase_range_deg.to_radians(),
        }
    }
}

impl SolverSection {
    // The negated comparisons also reject NaN thresholds.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn to_settings(&self) -> Result<SolverSettings, ConfigError> {
        let mut s = SolverSettings::default();
        if let Some(v) = self.eps_outer {
            s.eps_outer = v;
        }
        if let Some(v) = self.eps_angle {
            s.eps_angle = v;
        }
        if let Some(v) = self.max_outer {
            s.max_outer = v;
        }
        if let Some(v) = self.max_angle_iters {
            s.max_angle_iters = v;
        }
        if let Some(v) = self.init_grid_size {
            s.init_grid_size = v;
        }
        if let Some(o) = &self.update_order {
            s.update_order = match o.as_str() {
                "gains-t2-u2" => UpdateOrder::GainsT2U2,
                "gains-u2-t2" => UpdateOrder::GainsU2T2,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "update_order {:?} (expected gains-t2-u2 or gains-u2-t2)",
                        other
                    )))
                }
            };
        }
        if !(s.eps_outer > 0.0) || !(s.eps_angle > 0.0) {
            return Err(ConfigError::Invalid(
                "solver thresholds must be positive".into(),
            ));
        }
        if s.max_outer == 0 || s.max_angle_iters == 0 || s.init_grid_size == 0 {
            return Err(ConfigError::Invalid(
                "solver iteration counts and grid size must be at least 1".into(),
            ));
        }
        Ok(s)
    }
}

impl ExperimentSection {
    pub fn to_spec(
        &self,
        cfg: SystemConfig,
        settings: SolverSettings,
        master_seed: u64,
    ) -> Result<ExperimentSpec, ConfigError> {
        let sweep_kind = match self.kind.as_str() {
            "cal-snr" => SweepKind::CalSnr,
            "pilot-length" => SweepKind::PilotLength,
            "rate-vs-data-snr" => SweepKind::RateVsDataSnr,
            "rate-vs-cal-snr" => SweepKind::RateVsCalSnr,
            "rate-vs-pilots" => SweepKind::RateVsPilots,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "experiment kind {:?} (expected one of cal-snr, pilot-length, \
                     rate-vs-data-snr, rate-vs-cal-snr, rate-vs-pilots)",
                    other
                )))
            }
        };
        let mut methods = Vec::new();
        for m in &self.methods {
            methods.push(match m.as_str() {
                "HAC" => Method::Hac,
                "OracleHAC" => Method::OracleHac,
                "CRC" => Method::Crc,
                "Perfect" => Method::Perfect,
                "None" => Method::None,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "method {:?} (expected HAC, OracleHAC, CRC, Perfect or None)",
                        other
                    )))
                }
            });
        }
        let n_streams = self.n_streams.unwrap_or_else(|| cfg.m_t.min(cfg.m_r));
        Ok(ExperimentSpec {
            sweep_kind,
            sweep_values: self.values.clone(),
            trials: self.trials,
            master_seed,
            cfg,
            settings,
            methods,
            n_streams,
            redraw_mismatch: self.redraw_mismatch,
        })
    }
}

/// Everything a command run resolves to before dispatch.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_path: String,
    pub output_dir: String,
    pub master_seed: u64,
    pub command: String,
}
