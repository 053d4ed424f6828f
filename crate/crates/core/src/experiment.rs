//! Experiment orchestration: validated configs, deterministic seed fan-out,
//! seed-parallel trials with ordered reduction, and CSV/JSON reports that
//! juxtapose empirical derived bounds with the reference expressions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accepted::AVector;
use crate::filter::{self, ErrorRate, FilterParams, ImplId};
use crate::lemma_s;
use crate::obfuscation::{self, run_general, GeneralRun};
use crate::reconstructible::{run_general_reconstructible, DEFAULT_NODE_CAP};
use crate::tape::derive_trial_seed;
use crate::warmup::{run_warmup, AccountingMode, ProtocolError, WarmupRun};

pub const REPORT_SCHEMA_VERSION: &str = "filterlab.bound-report.v1";

/// Seed salt separating the frozen a-vector estimation from protocol
/// trials.
const AVECTOR_SEED_SALT: u64 = 0xa11c_e5ee_d000_0001;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("trial {trial} (seed {seed}): {source}")]
    Trial {
        trial: u64,
        seed: u64,
        #[source]
        source: ProtocolError,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("a-vector estimation: {0}")]
    AVector(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Warmup,
    General,
    GeneralReconstructible,
}

/// Everything a run needs; round-trips losslessly through JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub impl_id: ImplId,
    pub universe: u64,
    pub capacity: u64,
    pub error_rate: ErrorRate,
    pub protocol: Protocol,
    /// Batch count (general protocols only; ignored for warmup).
    #[serde(default = "default_b")]
    pub b: u64,
    /// Obfuscation width M (general protocols only).
    #[serde(default = "default_m")]
    pub m_cap: u64,
    /// Fixed stage switch; None selects it from the frozen a-vector.
    pub s: Option<u64>,
    pub trials: u64,
    pub base_seed: u64,
    pub mode: AccountingMode,
    /// Trials used to freeze the a-vector when s is auto-selected.
    #[serde(default = "default_avector_trials")]
    pub avector_trials: u64,
}

fn default_b() -> u64 {
    2
}
fn default_m() -> u64 {
    4
}
fn default_avector_trials() -> u64 {
    64
}

impl ExperimentConfig {
    pub fn params(&self) -> Result<FilterParams, ExperimentError> {
        FilterParams::new(self.universe, self.capacity, self.error_rate)
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let params = self.params()?;
        if self.trials == 0 {
            return Err(ExperimentError::InvalidConfig("trials must be at least 1".into()));
        }
        match self.protocol {
            Protocol::Warmup => {
                if let Some(s) = self.s {
                    if s > params.capacity {
                        return Err(ExperimentError::InvalidConfig(format!(
                            "s = {s} exceeds n = {}",
                            params.capacity
                        )));
                    }
                }
            }
            Protocol::General | Protocol::GeneralReconstructible => {
                if self.b == 0
                    || params.capacity % self.b != 0
                    || params.universe_size % self.b != 0
                {
                    return Err(ExperimentError::InvalidConfig(format!(
                        "b = {} must divide n = {} and u = {}",
                        self.b, params.capacity, params.universe_size
                    )));
                }
                if let Some(s) = self.s {
                    if s > self.b {
                        return Err(ExperimentError::InvalidConfig(format!(
                            "s = {s} exceeds b = {}",
                            self.b
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(s).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))
    }
}

/// One row per trial; the CSV surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRow {
    pub seed: u64,
    pub s: u64,
    pub info_bound: f64,
    pub filter_bits: f64,
    pub payload_bits: f64,
    pub derived_bound: f64,
    pub decode_ok: bool,
    /// General protocol extras; zero/empty for warmup rows.
    pub b: u64,
    pub m_cap: u64,
    pub residual_coupling: f64,
    pub indicator_ones: u64,
    pub indicator_total: u64,
    pub ops: u64,
    pub stream_bits: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_derived_bound: f64,
    pub stderr_derived_bound: f64,
    pub mean_payload_bits: f64,
    pub indicator_rate: f64,
    pub decode_fraction: f64,
}

/// Reference expressions the empirical numbers sit next to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct References {
    pub n_log2_inv_eps: f64,
    pub n_log2_e: f64,
    pub space_bits: f64,
    pub info_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub schema_version: String,
    pub config: ExperimentConfig,
    pub chosen_s: u64,
    pub auto_s: bool,
    /// The frozen a-vector when s was auto-selected.
    pub avector: Option<AVector>,
    pub rows: Vec<TrialRow>,
    pub aggregates: Aggregates,
    pub references: References,
}

impl BoundReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Canonical tabular format: warmup columns, then the general-protocol
    /// extras.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let general = !matches!(self.config.protocol, Protocol::Warmup);
        out.push_str("seed,s,info_bound,filter_bits,payload_bits,derived_bound,decode_ok");
        if general {
            out.push_str(",b,m,residual_coupling");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                row.seed,
                row.s,
                row.info_bound,
                row.filter_bits,
                row.payload_bits,
                row.derived_bound,
                row.decode_ok
            ));
            if general {
                out.push_str(&format!(",{},{},{}", row.b, row.m_cap, row.residual_coupling));
            }
            out.push('\n');
        }
        out
    }
}

fn aggregate(rows: &[TrialRow]) -> Aggregates {
    let n = rows.len() as f64;
    let decoded: Vec<&TrialRow> = rows.iter().filter(|r| r.decode_ok).collect();
    let mean = |vals: &[f64]| vals.iter().sum::<f64>() / vals.len().max(1) as f64;
    let derived: Vec<f64> = decoded.iter().map(|r| r.derived_bound).collect();
    let mean_derived = mean(&derived);
    let var = if derived.len() > 1 {
        derived.iter().map(|d| (d - mean_derived).powi(2)).sum::<f64>() / (derived.len() - 1) as f64
    } else {
        0.0
    };
    let payload: Vec<f64> = rows.iter().map(|r| r.payload_bits).collect();
    let ones: u64 = rows.iter().map(|r| r.indicator_ones).sum();
    let total: u64 = rows.iter().map(|r| r.indicator_total).sum();
    Aggregates {
        mean_derived_bound: mean_derived,
        stderr_derived_bound: if derived.len() > 1 {
            (var / derived.len() as f64).sqrt()
        } else {
            0.0
        },
        mean_payload_bits: mean(&payload),
        indicator_rate: if total > 0 { ones as f64 / total as f64 } else { 0.0 },
        decode_fraction: decoded.len() as f64 / n.max(1.0),
    }
}

fn warmup_row(run: &WarmupRun) -> TrialRow {
    let ones = run.indicators.iter().filter(|&&(_, z)| z).count() as u64;
    TrialRow {
        seed: run.seed,
        s: run.s,
        info_bound: run.info_bound,
        filter_bits: run.filter_bits,
        payload_bits: run.payload_bits,
        derived_bound: run.derived_bound,
        decode_ok: run.decode_ok,
        b: 0,
        m_cap: 0,
        residual_coupling: 0.0,
        indicator_ones: ones,
        indicator_total: run.indicators.len() as u64,
        ops: run.ops_total,
        stream_bits: run.stream_total_bits,
    }
}

fn general_row(run: &GeneralRun) -> TrialRow {
    let ones = run.indicators.iter().filter(|&&(_, z)| z).count() as u64;
    TrialRow {
        seed: run.seed,
        s: run.s,
        info_bound: run.info_bound,
        filter_bits: run.filter_bits,
        payload_bits: run.payload_bits,
        derived_bound: run.derived_bound,
        decode_ok: run.decode_ok,
        b: run.b,
        m_cap: run.m_cap,
        residual_coupling: run.residual_coupling,
        indicator_ones: ones,
        indicator_total: run.indicators.len() as u64,
        ops: run.chain_ops,
        stream_bits: run.stream_total_bits,
    }
}

/// Freezes the stage switch before any protocol trial runs: estimate the
/// a-vector on a dedicated seed block, then solve for s on entries 1..m.
pub fn select_s(config: &ExperimentConfig) -> Result<(u64, Option<AVector>), ExperimentError> {
    if let Some(s) = config.s {
        return Ok((s, None));
    }
    let params = config.params()?;
    let est_seed = config.base_seed ^ AVECTOR_SEED_SALT;
    let est = match config.protocol {
        Protocol::Warmup => crate::accepted::estimate_avector_warmup(
            config.impl_id,
            params,
            config.avector_trials,
            est_seed,
        )
        .map_err(|e| ExperimentError::AVector(e.to_string()))?,
        Protocol::General | Protocol::GeneralReconstructible => {
            obfuscation::estimate_avector_general(
                config.impl_id,
                params,
                config.b,
                config.m_cap,
                config.avector_trials,
                est_seed,
            )
            .map_err(|e| ExperimentError::AVector(e.to_string()))?
        }
    };
    // entries may exceed mass 1 by sampling noise; rescale defensively
    let mut tail: Vec<f64> = est.avector.tail().to_vec();
    let mass: f64 = est.avector.values.iter().sum();
    if mass > 1.0 {
        for v in &mut tail {
            *v /= mass;
        }
    }
    let choice = lemma_s::choose_s(&tail).map_err(|e| ExperimentError::AVector(e.to_string()))?;
    Ok((choice.s as u64, Some(est.avector)))
}

/// Executes the configured trials (parallel over seeds, reduced in trial
/// order) and assembles the report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<BoundReport, ExperimentError> {
    config.validate()?;
    let params = config.params()?;
    let (s, avector) = select_s(config)?;
    let auto_s = config.s.is_none();

    let rows: Result<Vec<TrialRow>, ExperimentError> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let seed = derive_trial_seed(config.base_seed, t);
            let wrap = |source: ProtocolError| ExperimentError::Trial { trial: t, seed, source };
            match config.protocol {
                Protocol::Warmup => run_warmup(config.impl_id, params, s, seed, config.mode)
                    .map(|r| warmup_row(&r))
                    .map_err(wrap),
                Protocol::General => {
                    run_general(config.impl_id, params, config.b, config.m_cap, s, seed, config.mode)
                        .map(|r| general_row(&r))
                        .map_err(wrap)
                }
                Protocol::GeneralReconstructible => run_general_reconstructible(
                    config.impl_id,
                    params,
                    config.b,
                    config.m_cap,
                    s,
                    seed,
                    config.mode,
                    DEFAULT_NODE_CAP,
                )
                .map(|r| general_row(&r))
                .map_err(wrap),
            }
        })
        .collect();
    let rows = rows?;

    let aggregates = aggregate(&rows);
    let n = params.capacity as f64;
    let references = References {
        n_log2_inv_eps: n * (1.0 / params.eps()).log2(),
        n_log2_e: n * std::f64::consts::LOG2_E,
        space_bits: filter::space_bits(config.impl_id, &params),
        info_bound: rows.first().map(|r| r.info_bound).unwrap_or(f64::NAN),
    };
    Ok(BoundReport {
        schema_version: REPORT_SCHEMA_VERSION.to_string(),
        config: config.clone(),
        chosen_s: s,
        auto_s,
        avector,
        rows,
        aggregates,
        references,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn warmup_config() -> ExperimentConfig {
        ExperimentConfig {
            impl_id: ImplId::BitmapExact,
            universe: 16,
            capacity: 2,
            error_rate: ErrorRate::new(1, 4).unwrap(),
            protocol: Protocol::Warmup,
            b: 2,
            m_cap: 2,
            s: Some(0),
            trials: 1,
            base_seed: 0,
            mode: AccountingMode::Ideal,
            avector_trials: 8,
        }
    }

    #[test]
    fn config_roundtrips_through_json() {
        let c = warmup_config();
        let parsed = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(parsed.to_json(), c.to_json());
    }

    #[test]
    fn single_trial_matches_hand_simulation() {
        let report = run_experiment(&warmup_config()).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert!(row.decode_ok);
        let ind_cost = 2.0 * -(0.75f64).log2();
        assert!((row.payload_bits - (1.0 + ind_cost)).abs() < 1e-12);
        assert!((row.derived_bound - (240f64.log2() - 1.0 - ind_cost)).abs() < 1e-12);
        assert_eq!(row.filter_bits, 16.0);
    }

    #[test]
    fn same_config_gives_byte_identical_csv() {
        let mut c = warmup_config();
        c.trials = 16;
        let a = run_experiment(&c).unwrap().to_csv();
        let b = run_experiment(&c).unwrap().to_csv();
        assert_eq!(a, b);
        assert!(a.starts_with("seed,s,info_bound,filter_bits,payload_bits,derived_bound,decode_ok\n"));
        assert!(!a.contains('\r'));
    }

    #[test]
    fn general_sandwich_with_auto_s() {
        let c = ExperimentConfig {
            impl_id: ImplId::Fingerprint,
            universe: 4096,
            capacity: 16,
            error_rate: ErrorRate::new(1, 16).unwrap(),
            protocol: Protocol::General,
            b: 2,
            m_cap: 4,
            s: None,
            trials: 24,
            base_seed: 7,
            mode: AccountingMode::Ideal,
            avector_trials: 16,
        };
        let report = run_experiment(&c).unwrap();
        assert!(report.auto_s);
        assert!(report.chosen_s <= 2);
        assert!(report.avector.is_some());
        assert_eq!(report.aggregates.decode_fraction, 1.0);
        let mean = report.aggregates.mean_derived_bound;
        let slack = 3.0 * report.aggregates.stderr_derived_bound;
        assert!(mean >= 0.0);
        assert!(mean <= report.references.space_bits + slack);
        let csv = report.to_csv();
        assert!(csv.contains(",b,m,residual_coupling"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = warmup_config();
        c.trials = 0;
        assert!(c.validate().is_err());
        let mut c = warmup_config();
        c.protocol = Protocol::General;
        c.b = 3; // does not divide u = 16
        assert!(c.validate().is_err());
        let mut c = warmup_config();
        c.s = Some(99);
        assert!(c.validate().is_err());
    }
}
