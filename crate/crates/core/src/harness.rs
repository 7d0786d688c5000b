//! Monte Carlo experiment orchestration.
//!
//! Layouts are drawn per outer trial and channels per inner trial, each from
//! a generator keyed by `(master seed, domain, index)`. Trials run in
//! parallel and are reduced in index order, so every reported number is
//! independent of the thread count.
//!
//! Symbol power ledgers do not depend on the noise level: they are computed
//! once per trial and then evaluated at every grid point.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{draw_channel, load_pdp, propagate, ChannelRealization, PdpSpec, PowerDelayProfile};
use crate::closedform::{expected_powers_with, ClosedFormSetup, LargeScale};
use crate::error::{Error, Result};
use crate::filterbank::{phydyas_prototype, FilterBank, OqamFrame};
use crate::geometry::{max_time_offset, place_network, sample_interval, GeometryConfig, NetworkLayout};
use crate::linalg::complex_gaussian;
use crate::linkmetrics::{symbol_powers_with, AmbiguityTable, DelayGrid, InterferenceWindow, TargetKernels};
use crate::ofdm::{cp_search_set, design_ofdm_precoders, OfdmModem, OfdmResponse};
use crate::precoder::{design_precoders, transmit_multistage, ApStream, Combiner, DesignBins, InterpolationPlan, PrecoderSet};
use crate::qam::Qam;
use crate::rng::{domain, trial_rng};

/// Physical-layer parameters shared by every experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub geometry: GeometryConfig,
    pub num_antennas: usize,
    pub num_subcarriers: usize,
    pub spacing_khz: f64,
    pub pdp: PdpSpec,
    /// Drop sample-grid taps this many dB below the strongest one.
    pub pdp_truncation_db: Option<f64>,
    pub overlap: usize,
    /// First interpolation stage of the proposed scheme.
    pub c1: usize,
    /// Number of precoder taps `L_p = 2 Lp + 1`.
    pub num_taps: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            num_antennas: 16,
            num_subcarriers: 256,
            spacing_khz: 30.0,
            pdp: PdpSpec::default(),
            pdp_truncation_db: None,
            overlap: 4,
            c1: 2,
            num_taps: 3,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.num_antennas == 0 {
            return Err(Error::InvalidConfig("N must be at least 1".into()));
        }
        if !(self.spacing_khz > 0.0 && self.spacing_khz.is_finite()) {
            return Err(Error::InvalidConfig("subcarrier spacing must be positive".into()));
        }
        if self.num_taps % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "L_p = {} must be odd (L_p = 2 Lp + 1)",
                self.num_taps
            )));
        }
        phydyas_prototype(self.num_subcarriers, self.overlap)?;
        InterpolationPlan::new(self.num_subcarriers, self.c1)?;
        if let Some(t) = self.pdp_truncation_db {
            if !(t > 0.0) {
                return Err(Error::InvalidConfig("PDP truncation threshold must be positive".into()));
            }
        }
        load_pdp(&self.pdp, self.sample_interval())?;
        Ok(())
    }

    pub fn sample_interval(&self) -> f64 {
        sample_interval(self.num_subcarriers, self.spacing_khz * 1e3)
    }

    pub fn lp_bar(&self) -> usize {
        self.num_taps / 2
    }

    pub fn with_spacing(&self, spacing_khz: f64) -> Self {
        Self {
            spacing_khz,
            ..self.clone()
        }
    }

    /// Sample-grid profile, truncated if requested.
    pub fn profile(&self) -> Result<PowerDelayProfile> {
        let pdp = load_pdp(&self.pdp, self.sample_interval())?;
        Ok(match self.pdp_truncation_db {
            Some(t) => pdp.truncated(t),
            None => pdp,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Waveform {
    /// FBMC with the `C1 x C2` interpolation split.
    Proposed,
    /// FBMC multi-tap precoding with `C1 = 1`.
    Conventional,
    /// CP-OFDM with single-tap precoding at the optimal prefix.
    Ofdm,
}

/// Waveform and combiner, written `proposed-zf`, `conventional-mrc`, `ofdm-zf`...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Scheme {
    pub waveform: Waveform,
    pub combiner: Combiner,
}

impl Scheme {
    pub const fn new(waveform: Waveform, combiner: Combiner) -> Self {
        Self { waveform, combiner }
    }

    pub fn is_fbmc(&self) -> bool {
        self.waveform != Waveform::Ofdm
    }

    pub fn plan(&self, sys: &SystemConfig) -> Result<InterpolationPlan> {
        match self.waveform {
            Waveform::Conventional => Ok(InterpolationPlan::conventional(sys.num_subcarriers)),
            _ => InterpolationPlan::new(sys.num_subcarriers, sys.c1),
        }
    }

    /// Reason the scheme cannot run at `sys`, if any.
    pub fn infeasibility(&self, sys: &SystemConfig) -> Option<String> {
        let users = sys.geometry.num_users;
        (self.combiner == Combiner::Zf && sys.num_antennas < users)
            .then(|| Error::ZfInfeasible { antennas: sys.num_antennas, users }.to_string())
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = match self.waveform {
            Waveform::Proposed => "proposed",
            Waveform::Conventional => "conventional",
            Waveform::Ofdm => "ofdm",
        };
        write!(f, "{w}-{}", self.combiner)
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (w, c) = lower.split_once('-').unwrap_or((lower.as_str(), "zf"));
        let waveform = match w {
            "proposed" => Waveform::Proposed,
            "conventional" => Waveform::Conventional,
            "ofdm" => Waveform::Ofdm,
            _ => return Err(Error::InvalidConfig(format!("unknown scheme '{s}'"))),
        };
        let combiner = match c {
            "zf" => Combiner::Zf,
            "mrc" => Combiner::Mrc,
            "mrc-statistical" => Combiner::MrcStatistical,
            _ => return Err(Error::InvalidConfig(format!("unknown combiner in scheme '{s}'"))),
        };
        Ok(Self { waveform, combiner })
    }
}

impl TryFrom<String> for Scheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scheme> for String {
    fn from(s: Scheme) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    RateVsSnr,
    RateVsSpacing,
    Ber,
    CpEnum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub kind: ExperimentKind,
    /// rho grid in dB for rate-vs-snr.
    pub snr_db: Vec<f64>,
    /// rho used by the spacing sweep and the prefix enumeration.
    pub reference_snr_db: f64,
    pub spacings_khz: Vec<f64>,
    pub ebn0_db: Vec<f64>,
    pub modulation: usize,
    pub outer_trials: usize,
    pub inner_trials: usize,
    pub master_seed: u64,
    pub schemes: Vec<Scheme>,
    pub designated_user: usize,
    /// Number of evenly spaced subcarriers the averaged rate runs over.
    pub averaged_subcarriers: usize,
    /// Accumulate interference from every subcarrier and slot instead of the
    /// `|dm| <= 2, |i| <= 2 kappa` neighbourhood.
    pub full_window: bool,
    pub theory: bool,
    /// QAM symbols per subcarrier and user in one BER frame.
    pub symbols_per_frame: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::RateVsSnr,
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            reference_snr_db: 20.0,
            spacings_khz: vec![15.0, 30.0, 60.0, 120.0],
            ebn0_db: vec![0.0, 4.0, 8.0, 12.0],
            modulation: 4,
            outer_trials: 10,
            inner_trials: 50,
            master_seed: 1,
            schemes: vec![
                Scheme::new(Waveform::Proposed, Combiner::Zf),
                Scheme::new(Waveform::Proposed, Combiner::Mrc),
                Scheme::new(Waveform::Conventional, Combiner::Zf),
                Scheme::new(Waveform::Conventional, Combiner::Mrc),
                Scheme::new(Waveform::Ofdm, Combiner::Zf),
            ],
            designated_user: 0,
            averaged_subcarriers: 8,
            full_window: false,
            theory: true,
            symbols_per_frame: 16,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self, sys: &SystemConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.outer_trials == 0 || self.inner_trials == 0 {
            return bad("trial counts must be at least 1".into());
        }
        if self.schemes.is_empty() {
            return bad("scheme list is empty".into());
        }
        let grid_empty = match self.kind {
            ExperimentKind::RateVsSnr => self.snr_db.is_empty(),
            ExperimentKind::RateVsSpacing => self.spacings_khz.is_empty(),
            ExperimentKind::Ber => self.ebn0_db.is_empty(),
            ExperimentKind::CpEnum => false,
        };
        if grid_empty {
            return bad("parameter grid is empty".into());
        }
        // +inf Eb/N0 is allowed and means a noiseless link
        let finite = self.snr_db.iter().all(|x| x.is_finite())
            && self.ebn0_db.iter().all(|x| !x.is_nan() && *x > f64::NEG_INFINITY)
            && self.reference_snr_db.is_finite();
        if !finite {
            return bad("SNR grid values must be finite".into());
        }
        if self.spacings_khz.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("spacings must be positive".into());
        }
        Qam::new(self.modulation)?;
        if self.designated_user >= sys.geometry.num_users {
            return bad(format!(
                "designated user {} out of range for U = {}",
                self.designated_user, sys.geometry.num_users
            ));
        }
        if self.averaged_subcarriers == 0 || self.averaged_subcarriers > sys.num_subcarriers {
            return bad("averaged subcarrier count must be in 1..=M".into());
        }
        if self.symbols_per_frame == 0 {
            return bad("symbols per frame must be at least 1".into());
        }
        Ok(())
    }

    pub fn total_trials(&self) -> usize {
        self.outer_trials * self.inner_trials
    }

    fn window(&self, sys: &SystemConfig) -> InterferenceWindow {
        if self.full_window {
            InterferenceWindow::full()
        } else {
            InterferenceWindow::standard(sys.overlap)
        }
    }
}

/// Designated subcarrier `M/2` and the averaged set `(2j + 1) M / (2 n)`.
pub fn target_subcarriers(num_subcarriers: usize, averaged: usize) -> (usize, Vec<usize>) {
    let set = (0..averaged)
        .map(|j| ((2 * j + 1) * num_subcarriers) / (2 * averaged))
        .collect();
    (num_subcarriers / 2, set)
}

/// Mean and variance summary of one statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateStats {
    pub mc_rate: f64,
    /// Standard error of `mc_rate` over trials.
    pub mc_rate_se: f64,
    pub theory_rate: Option<f64>,
    /// `log2(1 + mean desired / (mean interference + noise))` per layout,
    /// averaged over layouts: the Monte Carlo counterpart of `theory_rate`.
    pub ratio_of_means_rate: f64,
    pub sinr_mean: f64,
    pub sinr_var: f64,
    pub trials: usize,
}

/// One scheme at one grid point. `status` is `ok` or the reason the scheme
/// is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemePoint {
    pub scheme: Scheme,
    pub param: f64,
    pub status: String,
    /// Averaged over users and the averaged subcarrier set.
    pub average: Option<RateStats>,
    /// At the designated user and subcarrier `M/2`.
    pub designated: Option<RateStats>,
    pub cp_len: Option<usize>,
}

/// Per-user breakdown; `subcarrier = None` is the averaged set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub scheme: Scheme,
    pub param: f64,
    pub user: usize,
    pub subcarrier: Option<usize>,
    pub stats: RateStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpRow {
    pub scheme: Scheme,
    pub param: f64,
    pub cp_len: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub scheme: Scheme,
    pub ebn0_db: f64,
    pub errors: u64,
    pub bits: u64,
    pub ber: f64,
    pub cp_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub kind: ExperimentKind,
    /// What `param` means in the rows.
    pub param_name: String,
    pub noise_mapping: String,
    pub master_seed: u64,
    pub outer_trials: usize,
    pub inner_trials: usize,
    pub summary: Vec<SchemePoint>,
    pub detail: Vec<RatePoint>,
    pub cp_table: Vec<CpRow>,
    pub ber: Vec<BerPoint>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.10e}")).unwrap_or_default()
}

impl RateReport {
    fn empty(kind: ExperimentKind, plan: &ExperimentPlan, param_name: &str, noise_mapping: &str) -> Self {
        Self {
            kind,
            param_name: param_name.into(),
            noise_mapping: noise_mapping.into(),
            master_seed: plan.master_seed,
            outer_trials: plan.outer_trials,
            inner_trials: plan.inner_trials,
            summary: Vec::new(),
            detail: Vec::new(),
            cp_table: Vec::new(),
            ber: Vec::new(),
        }
    }

    /// Looks up a summary row.
    pub fn point(&self, scheme: Scheme, param: f64) -> Option<&SchemePoint> {
        self.summary.iter().find(|p| p.scheme == scheme && p.param == param)
    }

    pub fn ber_point(&self, scheme: Scheme, ebn0_db: f64) -> Option<&BerPoint> {
        self.ber.iter().find(|p| p.scheme == scheme && p.ebn0_db == ebn0_db)
    }

    fn header(&self, table: &str) -> String {
        format!(
            "# {table} v1; kind={:?}; param={}; seed={}; trials={}x{}; {}\n",
            self.kind, self.param_name, self.master_seed, self.outer_trials, self.inner_trials, self.noise_mapping
        )
    }

    /// One row per scheme and grid point.
    pub fn summary_csv(&self) -> String {
        let mut out = self.header("rate-summary");
        out.push_str(
            "scheme,param,status,mc_rate,mc_rate_se,theory_rate,ratio_of_means_rate,designated_mc_rate,designated_mc_rate_se,\
             designated_theory_rate,sinr_mean,sinr_var,trials,cp_len\n",
        );
        for p in &self.summary {
            let a = p.average.as_ref();
            let d = p.designated.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                p.scheme,
                p.param,
                p.status,
                fmt_opt(a.map(|s| s.mc_rate)),
                fmt_opt(a.map(|s| s.mc_rate_se)),
                fmt_opt(a.and_then(|s| s.theory_rate)),
                fmt_opt(a.map(|s| s.ratio_of_means_rate)),
                fmt_opt(d.map(|s| s.mc_rate)),
                fmt_opt(d.map(|s| s.mc_rate_se)),
                fmt_opt(d.and_then(|s| s.theory_rate)),
                fmt_opt(d.map(|s| s.sinr_mean)),
                fmt_opt(d.map(|s| s.sinr_var)),
                a.map_or(0, |s| s.trials),
                p.cp_len.map(|c| c.to_string()).unwrap_or_default(),
            ));
        }
        out
    }

    /// Per (scheme, grid point, user, subcarrier); subcarrier `avg` is the averaged set.
    pub fn detail_csv(&self) -> String {
        let mut out = self.header("rate-detail");
        out.push_str("scheme,param,user,subcarrier,mc_rate,mc_rate_se,theory_rate,sinr_mean,sinr_var,trials\n");
        for p in &self.detail {
            let s = &p.stats;
            out.push_str(&format!(
                "{},{},{},{},{:.10e},{:.10e},{},{:.10e},{:.10e},{}\n",
                p.scheme,
                p.param,
                p.user,
                p.subcarrier.map(|m| m.to_string()).unwrap_or_else(|| "avg".into()),
                s.mc_rate,
                s.mc_rate_se,
                fmt_opt(s.theory_rate),
                s.sinr_mean,
                s.sinr_var,
                s.trials,
            ));
        }
        out
    }

    pub fn cp_csv(&self) -> String {
        let mut out = self.header("cp-enumeration");
        out.push_str("scheme,param,cp_len,rate\n");
        for r in &self.cp_table {
            out.push_str(&format!("{},{},{},{:.10e}\n", r.scheme, r.param, r.cp_len, r.rate));
        }
        out
    }

    pub fn ber_csv(&self) -> String {
        let mut out = self.header("ber");
        out.push_str("scheme,ebn0_db,errors,bits,ber,cp_len\n");
        for p in &self.ber {
            out.push_str(&format!(
                "{},{},{},{},{:.10e},{}\n",
                p.scheme,
                p.ebn0_db,
                p.errors,
                p.bits,
                p.ber,
                p.cp_len.map(|c| c.to_string()).unwrap_or_default()
            ));
        }
        out
    }

    /// Every non-empty table, keyed by a file stem.
    pub fn csv_tables(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !self.summary.is_empty() {
            out.push(("rates", self.summary_csv()));
            out.push(("rates_detail", self.detail_csv()));
        }
        if !self.cp_table.is_empty() {
            out.push(("cp_enumeration", self.cp_csv()));
        }
        if !self.ber.is_empty() {
            out.push(("ber", self.ber_csv()));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Checks `rates >= 0` and `errors <= bits`.
    pub fn check_invariants(&self) -> Result<()> {
        let rate_ok = |s: &RateStats| s.mc_rate >= 0.0 && s.theory_rate.is_none_or(|t| t >= 0.0);
        let rates = self
            .summary
            .iter()
            .flat_map(|p| p.average.iter().chain(p.designated.iter()))
            .chain(self.detail.iter().map(|p| &p.stats))
            .all(rate_ok);
        if !rates || self.cp_table.iter().any(|r| r.rate < 0.0) {
            return Err(Error::InvalidConfig("negative rate in report".into()));
        }
        if self.ber.iter().any(|p| p.errors > p.bits) {
            return Err(Error::InvalidConfig("error count exceeds bit count".into()));
        }
        Ok(())
    }
}

/// `(desired, interference)` power pair.
type Pair = (f64, f64);

/// Spacing-dependent, layout-independent quantities.
struct Context {
    sys: SystemConfig,
    pdp: PowerDelayProfile,
    bins: DesignBins,
    bank: FilterBank,
    cp_set: Vec<usize>,
    designated: usize,
    averaged: Vec<usize>,
    /// Union of designated and averaged subcarriers, ascending.
    targets: Vec<usize>,
    kernels: Vec<TargetKernels>,
    /// Subcarriers needed to evaluate every target.
    design_set: Vec<usize>,
}

impl Context {
    fn new(sys: &SystemConfig, plan: &ExperimentPlan) -> Result<Self> {
        let m_count = sys.num_subcarriers;
        let pdp = sys.profile()?;
        let proto = phydyas_prototype(m_count, sys.overlap)?;
        let table = AmbiguityTable::new(&proto, None);
        let bins = DesignBins::new(m_count, sys.lp_bar());
        let tau_bound = max_time_offset(sys.geometry.radius_m, sys.sample_interval());
        // widest grid any scheme can need: C2 = M/2, every offset up to the bound
        let grid = DelayGrid::new(sys.lp_bar(), m_count / 2, tau_bound + pdp.len());
        let window = plan.window(sys);
        let (designated, averaged) = target_subcarriers(m_count, plan.averaged_subcarriers);
        let mut targets = averaged.clone();
        targets.push(designated);
        targets.sort_unstable();
        targets.dedup();
        let kernels: Vec<TargetKernels> = targets
            .par_iter()
            .map(|&mb| TargetKernels::new(&table, mb, &window, &grid))
            .collect();
        let mut design_set: Vec<usize> = kernels.iter().flat_map(|k| k.subcarriers()).collect();
        design_set.sort_unstable();
        design_set.dedup();
        Ok(Self {
            sys: sys.clone(),
            cp_set: cp_search_set(tau_bound, pdp.len(), m_count),
            pdp,
            bins,
            bank: FilterBank::new(proto),
            designated,
            averaged,
            targets,
            kernels,
            design_set,
        })
    }

    fn target_index(&self, m: usize) -> usize {
        self.targets.binary_search(&m).expect("target listed")
    }

    fn layout(&self, seed: u64, outer: usize) -> NetworkLayout {
        let mut rng = trial_rng(seed, domain::LAYOUT, outer as u64);
        place_network(&self.sys.geometry, self.sys.sample_interval(), &mut rng)
    }

    fn channel(&self, layout: &NetworkLayout, seed: u64, trial: usize) -> ChannelRealization {
        let mut rng = trial_rng(seed, domain::CHANNEL, trial as u64);
        draw_channel(&self.pdp, layout, self.sys.num_antennas, &mut rng)
    }

    fn users(&self) -> usize {
        self.sys.geometry.num_users
    }

    fn fbmc_precoders(
        &self,
        scheme: Scheme,
        layout: &NetworkLayout,
        channel: &ChannelRealization,
        subcarriers: &[usize],
    ) -> Result<PrecoderSet> {
        design_precoders(
            channel,
            &layout.tau,
            &layout.beta,
            subcarriers,
            &self.bins,
            scheme.plan(&self.sys)?,
            scheme.combiner,
        )
    }

    /// `[target][user]` ledgers of one FBMC scheme on one channel.
    fn fbmc_samples(&self, scheme: Scheme, layout: &NetworkLayout, channel: &ChannelRealization) -> Result<Vec<Pair>> {
        let set = self.fbmc_precoders(scheme, layout, channel, &self.design_set)?;
        let mut out = Vec::with_capacity(self.targets.len() * self.users());
        for kernels in &self.kernels {
            for ub in 0..self.users() {
                let l = symbol_powers_with(&set, channel, &layout.tau, kernels, ub)?;
                out.push((l.desired, l.interference()));
            }
        }
        Ok(out)
    }

    /// `[cp][target][user]` ledgers of one OFDM scheme.
    fn ofdm_samples(&self, scheme: Scheme, layout: &NetworkLayout, channel: &ChannelRealization) -> Result<Vec<Vec<Pair>>> {
        let pre = design_ofdm_precoders(channel, &layout.tau, &layout.beta, self.sys.num_subcarriers, scheme.combiner)?;
        let responses: Vec<OfdmResponse> = (0..self.users()).map(|u| OfdmResponse::new(channel, &pre, u)).collect();
        Ok(self
            .cp_set
            .iter()
            .map(|&cp| {
                let mut row = Vec::with_capacity(self.targets.len() * self.users());
                for &mb in &self.targets {
                    for resp in &responses {
                        let l = resp.ledger(&layout.tau, cp, mb);
                        row.push((l.desired, l.total - l.desired));
                    }
                }
                row
            })
            .collect())
    }

    /// Expected `[target][user]` powers for one layout; `None` where the
    /// closed form is undefined.
    fn theory(&self, scheme: Scheme, layout: &NetworkLayout) -> Result<Option<Vec<Pair>>> {
        let plan = scheme.plan(&self.sys)?;
        let setup = ClosedFormSetup {
            pdp: &self.pdp,
            bins: &self.bins,
            c2: plan.c2,
            combiner: scheme.combiner,
            antennas: self.sys.num_antennas,
        };
        let links = LargeScale {
            tau: &layout.tau,
            beta: &layout.beta,
        };
        let mut out = Vec::with_capacity(self.targets.len() * self.users());
        for kernels in &self.kernels {
            for ub in 0..self.users() {
                match expected_powers_with(&setup, links, kernels, ub) {
                    Ok(l) => out.push((l.desired, l.interference())),
                    Err(Error::ClosedFormUndefined { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(Some(out))
    }
}

enum TrialSample {
    Skipped,
    Fbmc(Vec<Pair>),
    Ofdm(Vec<Vec<Pair>>),
}

enum Samples {
    Absent(String),
    Fbmc {
        trials: Vec<Vec<Pair>>,
        theory: Option<Vec<Vec<Pair>>>,
    },
    Ofdm(Vec<Vec<Vec<Pair>>>),
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (xs.len() - 1) as f64
}

fn sinr_of(p: Pair, noise: f64) -> f64 {
    let den = p.1.max(0.0) + noise;
    if den > 0.0 {
        p.0 / den
    } else if p.0 > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Reduces `[trial][target][user]` samples to summary statistics.
struct Reducer<'a> {
    ctx: &'a Context,
    /// Noise term added to the interference.
    noise: f64,
    /// Rate prefactor (prefix overhead for OFDM).
    scale: f64,
    /// Channel trials per layout.
    inner: usize,
}

impl Reducer<'_> {
    fn rate(&self, p: Pair) -> f64 {
        self.scale * (1.0 + sinr_of(p, self.noise)).log2()
    }

    fn at(&self, row: &[Pair], m: usize, u: usize) -> Pair {
        row[self.ctx.target_index(m) * self.ctx.users() + u]
    }

    /// Rate of one row over `users` and the averaged subcarrier set.
    fn averaged(&self, row: &[Pair], users: &[usize]) -> f64 {
        let mut acc = 0.0;
        for &m in &self.ctx.averaged {
            for &u in users {
                acc += self.rate(self.at(row, m, u));
            }
        }
        acc / (self.ctx.averaged.len() * users.len()) as f64
    }

    fn stats(&self, rows: &[Vec<Pair>], theory: Option<&[Vec<Pair>]>, subcarrier: Option<usize>, users: &[usize]) -> RateStats {
        let eval = |row: &[Pair]| match subcarrier {
            Some(m) => users.iter().map(|&u| self.rate(self.at(row, m, u))).sum::<f64>() / users.len() as f64,
            None => self.averaged(row, users),
        };
        let rates: Vec<f64> = rows.iter().map(|r| eval(r)).collect();
        let sinrs: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                let m = subcarrier.unwrap_or(self.ctx.designated);
                users.iter().map(move |&u| sinr_of(self.at(r, m, u), self.noise))
            })
            .collect();
        let layout_means: Vec<f64> = rows
            .chunks(self.inner)
            .map(|chunk| {
                let width = chunk[0].len();
                let avg: Vec<Pair> = (0..width)
                    .map(|j| {
                        let (d, i) = chunk.iter().fold((0.0, 0.0), |acc, r| (acc.0 + r[j].0, acc.1 + r[j].1));
                        (d / chunk.len() as f64, i / chunk.len() as f64)
                    })
                    .collect();
                eval(&avg)
            })
            .collect();
        RateStats {
            mc_rate: mean(&rates),
            mc_rate_se: (sample_var(&rates) / rates.len() as f64).sqrt(),
            theory_rate: theory.map(|t| mean(&t.iter().map(|r| eval(r)).collect::<Vec<_>>())),
            ratio_of_means_rate: mean(&layout_means),
            sinr_mean: mean(&sinrs),
            sinr_var: sample_var(&sinrs),
            trials: rows.len(),
        }
    }
}

/// Noise variance per complex sample for `rho` in dB.
pub fn noise_from_snr_db(rho_db: f64) -> f64 {
    10f64.powf(-rho_db / 10.0)
}

const RATE_NOISE_MAPPING: &str =
    "noise: sigma^2 = 10^(-rho/10); FBMC SINR uses sigma^2/2 per real symbol, OFDM sigma^2 per bin";

/// Draws all trials for one context and collects per-scheme ledgers.
fn collect_samples(ctx: &Context, plan: &ExperimentPlan) -> Result<Vec<Samples>> {
    let inner = plan.inner_trials;
    let layouts: Vec<NetworkLayout> = (0..plan.outer_trials).map(|o| ctx.layout(plan.master_seed, o)).collect();

    let mut per_trial: Vec<Vec<TrialSample>> = (0..plan.total_trials())
        .into_par_iter()
        .map(|t| {
            let layout = &layouts[t / inner];
            let channel = ctx.channel(layout, plan.master_seed, t);
            plan.schemes
                .iter()
                .map(|&s| {
                    Ok(if s.infeasibility(&ctx.sys).is_some() {
                        TrialSample::Skipped
                    } else if s.is_fbmc() {
                        TrialSample::Fbmc(ctx.fbmc_samples(s, layout, &channel)?)
                    } else {
                        TrialSample::Ofdm(ctx.ofdm_samples(s, layout, &channel)?)
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(plan.schemes.len());
    for (si, &s) in plan.schemes.iter().enumerate() {
        if let Some(reason) = s.infeasibility(&ctx.sys) {
            out.push(Samples::Absent(reason));
            continue;
        }
        if s.is_fbmc() {
            let theory = if plan.theory {
                layouts
                    .par_iter()
                    .map(|l| ctx.theory(s, l))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .collect::<Option<Vec<_>>>()
            } else {
                None
            };
            let trials = per_trial
                .iter_mut()
                .map(|row| match std::mem::replace(&mut row[si], TrialSample::Skipped) {
                    TrialSample::Fbmc(v) => v,
                    _ => unreachable!("FBMC scheme yields FBMC samples"),
                })
                .collect();
            out.push(Samples::Fbmc { trials, theory });
        } else {
            let trials = per_trial
                .iter_mut()
                .map(|row| match std::mem::replace(&mut row[si], TrialSample::Skipped) {
                    TrialSample::Ofdm(v) => v,
                    _ => unreachable!("OFDM scheme yields OFDM samples"),
                })
                .collect();
            out.push(Samples::Ofdm(trials));
        }
    }
    Ok(out)
}

/// OFDM mean averaged rate per prefix and the best prefix (ties to the shortest).
fn ofdm_cp_choice(ctx: &Context, trials: &[Vec<Vec<Pair>>], noise: f64) -> (usize, Vec<(usize, f64)>) {
    let m_count = ctx.sys.num_subcarriers;
    let all_users: Vec<usize> = (0..ctx.users()).collect();
    let table: Vec<(usize, f64)> = ctx
        .cp_set
        .iter()
        .enumerate()
        .map(|(ci, &cp)| {
            let red = Reducer {
                ctx,
                noise,
                scale: m_count as f64 / (m_count + cp) as f64,
                inner: usize::MAX,
            };
            let r = mean(&trials.iter().map(|t| red.averaged(&t[ci], &all_users)).collect::<Vec<_>>());
            (cp, r)
        })
        .collect();
    let mut best = 0;
    for i in 1..table.len() {
        if table[i].1 > table[best].1 {
            best = i;
        }
    }
    (best, table)
}

/// Appends summary and per-user rows of every scheme at one grid point.
fn reduce_point(ctx: &Context, plan: &ExperimentPlan, samples: &[Samples], param: f64, noise: f64, report: &mut RateReport) {
    let m_count = ctx.sys.num_subcarriers;
    let all_users: Vec<usize> = (0..ctx.users()).collect();
    for (&scheme, s) in plan.schemes.iter().zip(samples) {
        let (rows, theory, scale, red_noise, cp_len): (Vec<Vec<Pair>>, Option<&[Vec<Pair>]>, f64, f64, Option<usize>) = match s {
            Samples::Absent(reason) => {
                report.summary.push(SchemePoint {
                    scheme,
                    param,
                    status: format!("absent: {reason}"),
                    average: None,
                    designated: None,
                    cp_len: None,
                });
                continue;
            }
            Samples::Fbmc { trials, theory } => (trials.clone(), theory.as_deref(), 1.0, noise / 2.0, None),
            Samples::Ofdm(trials) => {
                let (best, _) = ofdm_cp_choice(ctx, trials, noise);
                let cp = ctx.cp_set[best];
                let rows = trials.iter().map(|t| t[best].clone()).collect();
                (rows, None, m_count as f64 / (m_count + cp) as f64, noise, Some(cp))
            }
        };
        let red = Reducer {
            ctx,
            noise: red_noise,
            scale,
            inner: plan.inner_trials,
        };
        let average = red.stats(&rows, theory, None, &all_users);
        let designated = red.stats(&rows, theory, Some(ctx.designated), &[plan.designated_user]);
        report.summary.push(SchemePoint {
            scheme,
            param,
            status: "ok".into(),
            average: Some(average),
            designated: Some(designated),
            cp_len,
        });
        for u in 0..ctx.users() {
            for subcarrier in [Some(ctx.designated), None] {
                report.detail.push(RatePoint {
                    scheme,
                    param,
                    user: u,
                    subcarrier,
                    stats: red.stats(&rows, theory, subcarrier, &[u]),
                });
            }
        }
    }
}

/// Rate versus rho, versus spacing, or the prefix enumeration, per `plan.kind`.
pub fn run_rate_sweep(sys: &SystemConfig, plan: &ExperimentPlan) -> Result<RateReport> {
    sys.validate()?;
    plan.validate(sys)?;
    match plan.kind {
        ExperimentKind::RateVsSnr => {
            let ctx = Context::new(sys, plan)?;
            let samples = collect_samples(&ctx, plan)?;
            let mut report = RateReport::empty(plan.kind, plan, "rho_db", RATE_NOISE_MAPPING);
            for &rho in &plan.snr_db {
                reduce_point(&ctx, plan, &samples, rho, noise_from_snr_db(rho), &mut report);
            }
            Ok(report)
        }
        ExperimentKind::RateVsSpacing => {
            let mapping = format!("{RATE_NOISE_MAPPING}; rho = {} dB", plan.reference_snr_db);
            let mut report = RateReport::empty(plan.kind, plan, "spacing_khz", &mapping);
            let noise = noise_from_snr_db(plan.reference_snr_db);
            for &spacing in &plan.spacings_khz {
                let at = sys.with_spacing(spacing);
                at.validate()?;
                let ctx = Context::new(&at, plan)?;
                let samples = collect_samples(&ctx, plan)?;
                reduce_point(&ctx, plan, &samples, spacing, noise, &mut report);
            }
            Ok(report)
        }
        ExperimentKind::CpEnum => run_cp_enumeration(sys, plan),
        ExperimentKind::Ber => run_ber(sys, plan),
    }
}

/// Mean OFDM rate for every candidate prefix at `plan.reference_snr_db`.
pub fn run_cp_enumeration(sys: &SystemConfig, plan: &ExperimentPlan) -> Result<RateReport> {
    sys.validate()?;
    plan.validate(sys)?;
    let ofdm_plan = ExperimentPlan {
        schemes: plan.schemes.iter().copied().filter(|s| !s.is_fbmc()).collect(),
        ..plan.clone()
    };
    if ofdm_plan.schemes.is_empty() {
        return Err(Error::InvalidConfig("prefix enumeration needs an OFDM scheme".into()));
    }
    let mapping = format!("{RATE_NOISE_MAPPING}; rho = {} dB", plan.reference_snr_db);
    let mut report = RateReport::empty(ExperimentKind::CpEnum, plan, "rho_db", &mapping);
    let ctx = Context::new(sys, &ofdm_plan)?;
    let samples = collect_samples(&ctx, &ofdm_plan)?;
    let noise = noise_from_snr_db(plan.reference_snr_db);
    for (&scheme, s) in ofdm_plan.schemes.iter().zip(&samples) {
        if let Samples::Ofdm(trials) = s {
            let (_, table) = ofdm_cp_choice(&ctx, trials, noise);
            report.cp_table.extend(table.into_iter().map(|(cp_len, rate)| CpRow {
                scheme,
                param: plan.reference_snr_db,
                cp_len,
                rate,
            }));
        }
    }
    reduce_point(&ctx, &ofdm_plan, &samples, plan.reference_snr_db, noise, &mut report);
    Ok(report)
}

/// Complex noise variance for FBMC at `Eb/N0`: one complex QAM symbol of
/// unit energy per subcarrier every `M` samples carries `b` bits, the two
/// OQAM halves each occupying `M/2` samples, so `Eb = 2 / b`.
pub fn fbmc_noise_from_ebn0(ebn0_db: f64, bits_per_symbol: usize) -> f64 {
    2.0 / (bits_per_symbol as f64 * 10f64.powf(ebn0_db / 10.0))
}

/// Complex noise variance for OFDM at `Eb/N0`: the prefix adds `N_cp / M`
/// energy to each symbol, `Eb = (M + N_cp) / (M b)`.
pub fn ofdm_noise_from_ebn0(ebn0_db: f64, bits_per_symbol: usize, num_subcarriers: usize, cp_len: usize) -> f64 {
    (num_subcarriers + cp_len) as f64
        / (num_subcarriers as f64 * bits_per_symbol as f64 * 10f64.powf(ebn0_db / 10.0))
}

const BER_NOISE_MAPPING: &str = "Eb/N0 -> noise per complex sample: FBMC sigma^2 = 2/(b Eb/N0), \
     OFDM sigma^2 = (M+N_cp)/(M b Eb/N0); receivers divide by K; unit-power QAM";

/// Bits `[m][n][u]` and their QAM symbols for one frame.
fn frame_bits(qam: &Qam, m_count: usize, num_sym: usize, users: usize, seed: u64, trial: usize) -> (Vec<u8>, Vec<Vec<Vec<Complex64>>>) {
    use rand::Rng;
    let b = qam.bits_per_symbol();
    let mut rng = trial_rng(seed, domain::SYMBOLS, trial as u64);
    let bits: Vec<u8> = (0..m_count * num_sym * users * b).map(|_| rng.random_range(0..2u8)).collect();
    let symbols = (0..m_count)
        .map(|m| {
            (0..num_sym)
                .map(|n| {
                    (0..users)
                        .map(|u| {
                            let o = ((m * num_sym + n) * users + u) * b;
                            qam.modulate(&bits[o..o + b])
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    (bits, symbols)
}

fn add_noise(y: &[Complex64], noise: f64, seed: u64, stream: u64) -> Vec<Complex64> {
    let mut rng = trial_rng(seed, domain::NOISE, stream);
    y.iter().map(|&s| s + complex_gaussian(&mut rng, noise)).collect()
}

fn count_errors(bits: &[u8], decided: &[u8]) -> u64 {
    debug_assert_eq!(bits.len(), decided.len());
    bits.iter().zip(decided).filter(|(a, b)| a != b).count() as u64
}

/// Full symbol-level simulation of one frame: `[scheme][point] -> errors`.
fn ber_frame(ctx: &Context, plan: &ExperimentPlan, cps: &[Vec<usize>], trial: usize) -> Result<Vec<Vec<u64>>> {
    let sys = &ctx.sys;
    let m_count = sys.num_subcarriers;
    let users = ctx.users();
    let k_count = sys.geometry.num_aps;
    let qam = Qam::new(plan.modulation)?;
    let b = qam.bits_per_symbol();
    let q = plan.symbols_per_frame;
    let layout = ctx.layout(plan.master_seed, trial / plan.inner_trials);
    let channel = ctx.channel(&layout, plan.master_seed, trial);
    let (bits, symbols) = frame_bits(&qam, m_count, q, users, plan.master_seed, trial);
    let points = plan.ebn0_db.len();
    let stream_id = |s: usize, p: usize, u: usize| (((trial * plan.schemes.len() + s) * points + p) * users + u) as u64;
    let inv_k = 1.0 / k_count as f64;
    let all_m: Vec<usize> = (0..m_count).collect();

    let mut out = Vec::with_capacity(plan.schemes.len());
    for (si, &scheme) in plan.schemes.iter().enumerate() {
        if scheme.infeasibility(sys).is_some() {
            out.push(vec![0; points]);
            continue;
        }
        let mut errors = vec![0u64; points];
        let mut decided = Vec::with_capacity(bits.len());
        if scheme.is_fbmc() {
            let set = ctx.fbmc_precoders(scheme, &layout, &channel, &all_m)?;
            let frame = OqamFrame::from_qam(&symbols);
            let streams = (0..k_count)
                .map(|k| transmit_multistage(&frame, &set, k, &ctx.bank))
                .collect::<Result<Vec<ApStream>>>()?;
            let slots = 2 * q;
            let len = (slots - 1) * m_count / 2 + ctx.bank.prototype().len();
            let clean: Vec<Vec<Complex64>> = (0..users)
                .map(|u| propagate(&channel, &layout.tau, u, &streams, 0, len))
                .collect();
            for (p, &ebn0) in plan.ebn0_db.iter().enumerate() {
                let noise = fbmc_noise_from_ebn0(ebn0, b);
                let est: Vec<Vec<Vec<f64>>> = (0..users)
                    .map(|u| ctx.bank.demodulate(&add_noise(&clean[u], noise, plan.master_seed, stream_id(si, p, u)), slots))
                    .collect();
                decided.clear();
                for m in 0..m_count {
                    for n in 0..q {
                        for a in est.iter() {
                            let z = Complex64::new(a[m][2 * n], a[m][2 * n + 1]) * (inv_k / std::f64::consts::SQRT_2);
                            qam.demodulate(z, &mut decided);
                        }
                    }
                }
                errors[p] = count_errors(&bits, &decided);
            }
        } else {
            let pre = design_ofdm_precoders(&channel, &layout.tau, &layout.beta, m_count, scheme.combiner)?;
            let mut by_cp: BTreeMap<usize, Vec<Vec<Complex64>>> = BTreeMap::new();
            let per_symbol: Vec<Vec<Vec<Complex64>>> = (0..q)
                .map(|n| (0..m_count).map(|m| symbols[m][n].clone()).collect())
                .collect();
            for (p, &ebn0) in plan.ebn0_db.iter().enumerate() {
                let cp = cps[si][p];
                let modem = OfdmModem::new(m_count, cp);
                let clean = by_cp.entry(cp).or_insert_with(|| {
                    let streams: Vec<ApStream> = (0..k_count).map(|k| modem.transmit(&per_symbol, &pre, k)).collect();
                    (0..users)
                        .map(|u| propagate(&channel, &layout.tau, u, &streams, 0, q * modem.symbol_len()))
                        .collect()
                });
                let noise = ofdm_noise_from_ebn0(ebn0, b, m_count, cp);
                let rx: Vec<Vec<Vec<Complex64>>> = (0..users)
                    .map(|u| modem.receive(&add_noise(&clean[u], noise, plan.master_seed, stream_id(si, p, u)), q))
                    .collect();
                decided.clear();
                for m in 0..m_count {
                    for n in 0..q {
                        for r in rx.iter() {
                            qam.demodulate(r[n][m] * inv_k, &mut decided);
                        }
                    }
                }
                errors[p] = count_errors(&bits, &decided);
            }
        }
        out.push(errors);
    }
    Ok(out)
}

/// Prefix per OFDM scheme and Eb/N0 point maximizing the averaged rate on
/// the same frames, with the energy-fair noise of each candidate.
fn ber_prefixes(ctx: &Context, plan: &ExperimentPlan) -> Result<Vec<Vec<usize>>> {
    let b = Qam::new(plan.modulation)?.bits_per_symbol();
    let m_count = ctx.sys.num_subcarriers;
    let needs_ofdm = plan.schemes.iter().any(|s| !s.is_fbmc() && s.infeasibility(&ctx.sys).is_none());
    let samples = if needs_ofdm {
        let ofdm_plan = ExperimentPlan {
            schemes: plan.schemes.iter().copied().filter(|s| !s.is_fbmc()).collect(),
            theory: false,
            ..plan.clone()
        };
        collect_samples(ctx, &ofdm_plan)?
    } else {
        Vec::new()
    };
    let mut ofdm_iter = samples.into_iter();
    let all_users: Vec<usize> = (0..ctx.users()).collect();
    Ok(plan
        .schemes
        .iter()
        .map(|s| {
            if s.is_fbmc() {
                return vec![0; plan.ebn0_db.len()];
            }
            match ofdm_iter.next() {
                Some(Samples::Ofdm(trials)) => plan
                    .ebn0_db
                    .iter()
                    .map(|&e| {
                        let mut best = (ctx.cp_set[0], f64::NEG_INFINITY);
                        for (ci, &cp) in ctx.cp_set.iter().enumerate() {
                            let red = Reducer {
                                ctx,
                                noise: ofdm_noise_from_ebn0(e, b, m_count, cp),
                                scale: m_count as f64 / (m_count + cp) as f64,
                                inner: usize::MAX,
                            };
                            let r = mean(&trials.iter().map(|t| red.averaged(&t[ci], &all_users)).collect::<Vec<_>>());
                            if r > best.1 {
                                best = (cp, r);
                            }
                        }
                        best.0
                    })
                    .collect(),
                _ => vec![0; plan.ebn0_db.len()],
            }
        })
        .collect())
}

/// Uncoded BER of every scheme at every Eb/N0 point.
pub fn run_ber(sys: &SystemConfig, plan: &ExperimentPlan) -> Result<RateReport> {
    sys.validate()?;
    plan.validate(sys)?;
    let ctx = Context::new(sys, plan)?;
    let cps = ber_prefixes(&ctx, plan)?;
    let per_frame = (0..plan.total_trials())
        .into_par_iter()
        .map(|t| ber_frame(&ctx, plan, &cps, t))
        .collect::<Result<Vec<_>>>()?;
    let b = Qam::new(plan.modulation)?.bits_per_symbol();
    let bits_per_frame = (sys.num_subcarriers * plan.symbols_per_frame * ctx.users() * b) as u64;
    let mut report = RateReport::empty(ExperimentKind::Ber, plan, "ebn0_db", BER_NOISE_MAPPING);
    for (si, &scheme) in plan.schemes.iter().enumerate() {
        if scheme.infeasibility(sys).is_some() {
            continue;
        }
        for (p, &ebn0) in plan.ebn0_db.iter().enumerate() {
            let errors: u64 = per_frame.iter().map(|f| f[si][p]).sum();
            let bits = bits_per_frame * per_frame.len() as u64;
            report.ber.push(BerPoint {
                scheme,
                ebn0_db: ebn0,
                errors,
                bits,
                ber: errors as f64 / bits as f64,
                cp_len: (!scheme.is_fbmc()).then(|| cps[si][p]),
            });
        }
    }
    Ok(report)
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool
/// when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}"))),
    }
}

/// Dispatches on `plan.kind`.
pub fn run(sys: &SystemConfig, plan: &ExperimentPlan) -> Result<RateReport> {
    let report = run_rate_sweep(sys, plan)?;
    report.check_invariants()?;
    Ok(report)
}
