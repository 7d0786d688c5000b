//! Configuration, validation and experiment dispatch for `cfsim`.
//!
//! A run is described by one TOML file. Every key is optional; unset keys
//! take the default system (R = 1000 m, K = 8, U = 4, N = 16, M = 256,
//! 30 kHz, EVA, PHYDYAS with kappa = 4, C1 = 2, L_p = 3).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use cellfree_fbmc::channel::PdpSpec;
use cellfree_fbmc::geometry::{GeometryConfig, ThreeSlopeModel};
use cellfree_fbmc::harness::{
    run_rate_sweep, with_threads, ExperimentKind, ExperimentPlan, RateReport, Scheme, SystemConfig, Waveform,
};
use cellfree_fbmc::precoder::Combiner;
use cellfree_fbmc::selftest::{self, Check};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "CFSIM_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: io::Error },

    #[error("unknown config key: {0}")]
    UnknownKey(String),

    #[error("malformed config: {0}")]
    Syntax(String),

    #[error("inconsistent interpolation plan: {0}")]
    InconsistentPlan(String),

    #[error(
        "ZF closed form requested with N = {antennas} <= U = {users}; \
         add antennas, drop ZF schemes or set experiment.theory = false"
    )]
    ZfTheoryUndefined { antennas: usize, users: usize },

    #[error("invalid config: {0}")]
    Invalid(String),

    #[error("experiment failed: {0}")]
    Run(cellfree_fbmc::Error),

    #[error("report invariant violated: {0}")]
    Invariant(cellfree_fbmc::Error),

    #[error("{failed} of {total} self-test checks failed")]
    SelftestFailed { failed: usize, total: usize },

    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
}

impl CliError {
    /// 2 for configuration problems, 1 for everything that fails at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Read { .. }
            | CliError::UnknownKey(_)
            | CliError::Syntax(_)
            | CliError::InconsistentPlan(_)
            | CliError::ZfTheoryUndefined { .. }
            | CliError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub radius_m: f64,
    pub num_aps: usize,
    pub num_users: usize,
    pub num_antennas: usize,
    pub min_distance_m: f64,
    /// Log-normal shadowing in dB; absent means none.
    pub shadowing_db: Option<f64>,
    pub path_loss: ThreeSlopeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    /// `"EVA"`, `"flat"` or `[[delay_ns, power_db], ...]`.
    pub pdp: PdpSpec,
    pub truncation_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterbankSection {
    pub prototype: String,
    pub num_subcarriers: usize,
    pub spacing_khz: f64,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecoderSection {
    pub c1: usize,
    pub num_taps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub snr_db: Vec<f64>,
    pub reference_snr_db: f64,
    pub spacings_khz: Vec<f64>,
    pub ebn0_db: Vec<f64>,
    pub modulation: usize,
    pub outer_trials: usize,
    pub inner_trials: usize,
    pub schemes: Vec<Scheme>,
    pub designated_user: usize,
    pub averaged_subcarriers: usize,
    pub full_window: bool,
    pub theory: bool,
    pub symbols_per_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    /// 0 silent, 1 lists written files, 2 also prints the summary table.
    pub verbosity: u8,
    pub geometry: GeometrySection,
    pub channel: ChannelSection,
    pub filterbank: FilterbankSection,
    pub precoder: PrecoderSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sys = SystemConfig::default();
        let plan = ExperimentPlan::default();
        let g = sys.geometry;
        Self {
            output_dir: PathBuf::from("cfsim-out"),
            seed: plan.master_seed,
            verbosity: 1,
            geometry: GeometrySection {
                radius_m: g.radius_m,
                num_aps: g.num_aps,
                num_users: g.num_users,
                num_antennas: sys.num_antennas,
                min_distance_m: g.min_distance_m,
                shadowing_db: g.shadowing_db,
                path_loss: g.path_loss,
            },
            channel: ChannelSection {
                pdp: sys.pdp,
                truncation_db: sys.pdp_truncation_db,
            },
            filterbank: FilterbankSection {
                prototype: "phydyas".into(),
                num_subcarriers: sys.num_subcarriers,
                spacing_khz: sys.spacing_khz,
                overlap: sys.overlap,
            },
            precoder: PrecoderSection {
                c1: sys.c1,
                num_taps: sys.num_taps,
            },
            experiment: ExperimentSection {
                snr_db: plan.snr_db,
                reference_snr_db: plan.reference_snr_db,
                spacings_khz: plan.spacings_khz,
                ebn0_db: plan.ebn0_db,
                modulation: plan.modulation,
                outer_trials: plan.outer_trials,
                inner_trials: plan.inner_trials,
                schemes: plan.schemes,
                designated_user: plan.designated_user,
                averaged_subcarriers: plan.averaged_subcarriers,
                full_window: plan.full_window,
                theory: plan.theory,
                symbols_per_frame: plan.symbols_per_frame,
            },
        }
    }
}

macro_rules! section_default {
    ($($t:ident => $f:ident),*) => {
        $(impl Default for $t {
            fn default() -> Self {
                RunConfig::default().$f
            }
        })*
    };
}
section_default!(
    GeometrySection => geometry,
    ChannelSection => channel,
    FilterbankSection => filterbank,
    PrecoderSection => precoder,
    ExperimentSection => experiment
);

impl RunConfig {
    pub fn system(&self) -> SystemConfig {
        let g = &self.geometry;
        SystemConfig {
            geometry: GeometryConfig {
                radius_m: g.radius_m,
                num_aps: g.num_aps,
                num_users: g.num_users,
                path_loss: g.path_loss.clone(),
                shadowing_db: g.shadowing_db,
                min_distance_m: g.min_distance_m,
            },
            num_antennas: g.num_antennas,
            num_subcarriers: self.filterbank.num_subcarriers,
            spacing_khz: self.filterbank.spacing_khz,
            pdp: self.channel.pdp.clone(),
            pdp_truncation_db: self.channel.truncation_db,
            overlap: self.filterbank.overlap,
            c1: self.precoder.c1,
            num_taps: self.precoder.num_taps,
        }
    }

    pub fn plan(&self, kind: ExperimentKind) -> ExperimentPlan {
        let e = &self.experiment;
        ExperimentPlan {
            kind,
            snr_db: e.snr_db.clone(),
            reference_snr_db: e.reference_snr_db,
            spacings_khz: e.spacings_khz.clone(),
            ebn0_db: e.ebn0_db.clone(),
            modulation: e.modulation,
            outer_trials: e.outer_trials,
            inner_trials: e.inner_trials,
            master_seed: self.seed,
            schemes: e.schemes.clone(),
            designated_user: e.designated_user,
            averaged_subcarriers: e.averaged_subcarriers,
            full_window: e.full_window,
            theory: e.theory,
            symbols_per_frame: e.symbols_per_frame,
        }
    }

    /// Cross-field checks. Grids are checked per experiment in [`dispatch`].
    pub fn validate(&self) -> Result<()> {
        if !self.filterbank.prototype.eq_ignore_ascii_case("phydyas") {
            return Err(CliError::Invalid(format!(
                "unknown prototype filter '{}' (only \"phydyas\" is available)",
                self.filterbank.prototype
            )));
        }
        let sys = self.system();
        sys.validate().map_err(|e| match e {
            cellfree_fbmc::Error::PlanMismatch { .. } => CliError::InconsistentPlan(format!(
                "{e}; C1 must be a power of two dividing M/2 = {}",
                sys.num_subcarriers / 2
            )),
            other => CliError::Invalid(other.to_string()),
        })?;
        let (antennas, users) = (sys.num_antennas, sys.geometry.num_users);
        let zf_theory = self.experiment.theory
            && self
                .experiment
                .schemes
                .iter()
                .any(|s| s.waveform != Waveform::Ofdm && s.combiner == Combiner::Zf);
        if zf_theory && antennas <= users {
            return Err(CliError::ZfTheoryUndefined { antennas, users });
        }
        self.plan(ExperimentKind::CpEnum)
            .validate(&sys)
            .map_err(|e| CliError::Invalid(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses TOML text and validates it.
pub fn parse_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("unknown field") {
            CliError::UnknownKey(msg.trim().to_string())
        } else {
            CliError::Syntax(msg.trim().to_string())
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_and_validate(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_str(&text)
}

/// Output directory: flag, then environment, then config file.
pub fn resolve_output_dir(cfg: &RunConfig, flag: Option<&Path>, env: Option<&str>) -> PathBuf {
    match (flag, env) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(e)) if !e.is_empty() => PathBuf::from(e),
        _ => cfg.output_dir.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    RateSweep,
    SpacingSweep,
    Ber,
    CpEnum,
    Selftest,
}

impl Command {
    fn kind(self) -> Option<ExperimentKind> {
        match self {
            Command::RateSweep => Some(ExperimentKind::RateVsSnr),
            Command::SpacingSweep => Some(ExperimentKind::RateVsSpacing),
            Command::Ber => Some(ExperimentKind::Ber),
            Command::CpEnum => Some(ExperimentKind::CpEnum),
            Command::Selftest => None,
        }
    }
}

/// What a dispatch produced.
#[derive(Debug)]
pub enum Outcome {
    Report { report: Box<RateReport>, files: Vec<PathBuf> },
    Selftest { checks: Vec<Check>, files: Vec<PathBuf> },
}

fn write(dir: &Path, name: &str, body: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|source| CliError::Write {
        path: path.clone(),
        source,
    })?;
    files.push(path);
    Ok(())
}

/// Runs one subcommand and writes its outputs into `cfg.output_dir`,
/// creating the directory if needed. The effective config is saved next to
/// the results as `config.toml`.
pub fn dispatch(cfg: &RunConfig, cmd: Command, threads: Option<usize>) -> Result<Outcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.clone(),
        source,
    })?;
    let mut files = Vec::new();
    write(dir, "config.toml", &cfg.to_toml(), &mut files)?;
    let sys = cfg.system();
    let Some(kind) = cmd.kind() else {
        let checks = with_threads(threads, || selftest::run_all(&sys, cfg.seed))
            .and_then(|r| r)
            .map_err(CliError::Run)?;
        write(dir, "selftest.txt", &check_report(&checks), &mut files)?;
        let failed = checks.iter().filter(|c| !c.pass).count();
        if failed > 0 {
            return Err(CliError::SelftestFailed {
                failed,
                total: checks.len(),
            });
        }
        return Ok(Outcome::Selftest { checks, files });
    };
    let plan = cfg.plan(kind);
    plan.validate(&sys).map_err(|e| CliError::Invalid(e.to_string()))?;
    let report = with_threads(threads, || run_rate_sweep(&sys, &plan))
        .and_then(|r| r)
        .map_err(CliError::Run)?;
    for (stem, body) in report.csv_tables() {
        write(dir, &format!("{stem}.csv"), &body, &mut files)?;
    }
    write(dir, "summary.json", &report.to_json(), &mut files)?;
    report.check_invariants().map_err(CliError::Invariant)?;
    Ok(Outcome::Report {
        report: Box::new(report),
        files,
    })
}

/// One `PASS|FAIL module: name (detail)` line per check.
fn check_report(checks: &[Check]) -> String {
    checks.iter().map(|c| format!("{}\n", check_line(c))).collect()
}

pub fn check_line(c: &Check) -> String {
    let verdict = if c.pass { "PASS" } else { "FAIL" };
    if c.detail.is_empty() {
        format!("{verdict} {}: {}", c.module, c.name)
    } else {
        format!("{verdict} {}: {} ({})", c.module, c.name, c.detail)
    }
}
