//! Multi-tap precoders with phase compensation and the multiple-interpolation
//! transmitter.
//!
//! For subcarrier `m` the design constrains the precoder response at `L_p`
//! bins `w_{m,p}` inside the subcarrier band:
//!
//! ```text
//! H~_k(w_{m,p}) Q~(w_{m,p}) = diag(e^{j w_{m,p} tau_{k,u}}),
//! Q~(w) = sum_i P[i] e^{-j w C2 i}
//! ```
//!
//! so the taps solve `Theta_m P = Omega` with `Theta_m[p][i] = e^{-j w_{m,p} C2 i}`.
//! The conventional multi-tap scheme is the plan `C1 = 1, C2 = M/2`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::error::{Error, Result};
use crate::filterbank::{oqam_phase, FilterBank, OqamFrame};
use crate::linalg::{cis, condition_number, inverse, CMatrix};

/// Largest accepted condition number of `Theta_m`.
pub const THETA_CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combiner {
    /// Maximum ratio with per-user normalization by `|h~_u|^2`.
    Mrc,
    /// Maximum ratio normalized by `N beta_{k,u}`: the large-antenna form
    /// the closed-form MRC analysis is written for.
    MrcStatistical,
    Zf,
}

impl std::fmt::Display for Combiner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Combiner::Mrc => "mrc",
            Combiner::MrcStatistical => "mrc-statistical",
            Combiner::Zf => "zf",
        })
    }
}

/// Target frequency bins `w_{m,p} = 2 pi (m + o_p) / M`, `p = -Lp..=Lp`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBins {
    num_subcarriers: usize,
    lp_bar: usize,
    offsets: Vec<f64>,
}

impl DesignBins {
    /// Equally spaced offsets `o_p = p / (Lp + 1)`.
    pub fn new(num_subcarriers: usize, lp_bar: usize) -> Self {
        let offsets = (-(lp_bar as i64)..=lp_bar as i64)
            .map(|p| p as f64 / (lp_bar as f64 + 1.0))
            .collect();
        Self {
            num_subcarriers,
            lp_bar,
            offsets,
        }
    }

    /// Custom offsets in subcarrier units; must be strictly increasing,
    /// `2 Lp + 1` long, centred on zero and inside `(-1, 1)`.
    pub fn with_offsets(num_subcarriers: usize, offsets: Vec<f64>) -> Result<Self> {
        let n = offsets.len();
        if n % 2 == 0 {
            return Err(Error::InvalidConfig("bin count must be odd".into()));
        }
        let lp_bar = n / 2;
        if offsets[lp_bar] != 0.0
            || offsets.windows(2).any(|w| w[1] <= w[0])
            || offsets.iter().any(|o| o.abs() >= 1.0)
        {
            return Err(Error::InvalidConfig(
                "bin offsets must increase strictly, be centred on 0 and lie in (-1, 1)".into(),
            ));
        }
        Ok(Self {
            num_subcarriers,
            lp_bar,
            offsets,
        })
    }

    pub fn lp_bar(&self) -> usize {
        self.lp_bar
    }

    /// Number of taps and bins, `2 Lp + 1`.
    pub fn lp(&self) -> usize {
        2 * self.lp_bar + 1
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// `w_{m,p}` with `p_idx = p + Lp`.
    pub fn omega(&self, m: usize, p_idx: usize) -> f64 {
        2.0 * PI * (m as f64 + self.offsets[p_idx]) / self.num_subcarriers as f64
    }

    pub fn omegas(&self, m: usize) -> Vec<f64> {
        (0..self.lp()).map(|p| self.omega(m, p)).collect()
    }
}

/// Split of the `M/2` interpolation into `C1` (before the taps) and `C2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpolationPlan {
    pub c1: usize,
    pub c2: usize,
}

impl InterpolationPlan {
    pub fn new(num_subcarriers: usize, c1: usize) -> Result<Self> {
        let half = num_subcarriers / 2;
        if c1 == 0 || !c1.is_power_of_two() || half % c1 != 0 {
            return Err(Error::PlanMismatch {
                c1,
                c2: if c1 == 0 { 0 } else { half / c1 },
                half,
            });
        }
        Ok(Self { c1, c2: half / c1 })
    }

    /// Single `M/2`-fold interpolation.
    pub fn conventional(num_subcarriers: usize) -> Self {
        Self {
            c1: 1,
            c2: num_subcarriers / 2,
        }
    }

    pub fn check(&self, num_subcarriers: usize) -> Result<()> {
        if self.c1 * self.c2 != num_subcarriers / 2 {
            return Err(Error::PlanMismatch {
                c1: self.c1,
                c2: self.c2,
                half: num_subcarriers / 2,
            });
        }
        Ok(())
    }
}

/// Diagonal of `Lambda_k(w) = diag(e^{j w tau_{k,u}})`.
pub fn phase_targets(omega: f64, tau_k: &[usize]) -> Vec<Complex64> {
    tau_k.iter().map(|&t| cis(omega * t as f64)).collect()
}

/// `Omega = H^H Phi^{-1} Lambda`, `Phi = diag(diag(H H^H))`; `h` is `U x N`.
pub fn combiner_mrc(h: &CMatrix, targets: &[Complex64]) -> Result<CMatrix> {
    let (users, antennas) = h.shape();
    let mut out = CMatrix::zeros(antennas, users);
    for u in 0..users {
        let energy: f64 = h.row(u).iter().map(|z| z.norm_sqr()).sum();
        if !(energy > 0.0) || !energy.is_finite() {
            return Err(Error::DegenerateUserChannel { user: u });
        }
        let scale = targets[u] / energy;
        for n in 0..antennas {
            out[(n, u)] = h[(u, n)].conj() * scale;
        }
    }
    Ok(out)
}

/// Large-antenna MRC: column `u` is `e^{j w tau_u} h~_u^* / (N beta_u)`.
pub fn combiner_mrc_statistical(h: &CMatrix, targets: &[Complex64], beta: &[f64]) -> CMatrix {
    let (users, antennas) = h.shape();
    let mut out = CMatrix::zeros(antennas, users);
    for u in 0..users {
        let scale = targets[u] / (antennas as f64 * beta[u]);
        for n in 0..antennas {
            out[(n, u)] = h[(u, n)].conj() * scale;
        }
    }
    out
}

/// `Omega = H^H (H H^H)^{-1} Lambda`.
pub fn combiner_zf(h: &CMatrix, targets: &[Complex64]) -> Result<CMatrix> {
    let (users, antennas) = h.shape();
    let infeasible = Error::ZfInfeasible { antennas, users };
    if antennas < users {
        return Err(infeasible);
    }
    let gram = h * h.adjoint();
    if condition_number(&gram) > 1e14 {
        return Err(infeasible);
    }
    let gram_inv = inverse(&gram).ok_or(infeasible)?;
    let mut out = h.adjoint() * gram_inv;
    for u in 0..users {
        let t = targets[u];
        out.column_mut(u).iter_mut().for_each(|z| *z *= t);
    }
    Ok(out)
}

/// `Theta_m[p][i] = e^{-j w_{m,p} C2 i}`, rows `p = -Lp..=Lp`, columns `i = -Lp..=Lp`.
pub fn theta_matrix(omegas: &[f64], c2: usize) -> CMatrix {
    let lp = omegas.len();
    let lp_bar = (lp / 2) as i64;
    CMatrix::from_fn(lp, lp, |p, i| {
        let tap = i as i64 - lp_bar;
        cis(-omegas[p] * (c2 as i64 * tap) as f64)
    })
}

/// Solves `(Theta_m (x) I_N) P = Omega` for the taps; returns `(P[i], Theta_m^{-1})`.
pub fn assemble_taps(omegas_per_bin: &[CMatrix], theta: &CMatrix) -> Result<(Vec<CMatrix>, CMatrix)> {
    let cond = condition_number(theta);
    if !(cond < THETA_CONDITION_LIMIT) {
        return Err(Error::IllConditioned(cond));
    }
    let theta_inv = inverse(theta).ok_or(Error::IllConditioned(f64::INFINITY))?;
    let lp = theta.nrows();
    if omegas_per_bin.len() != lp {
        return Err(Error::LengthMismatch {
            expected: lp,
            got: omegas_per_bin.len(),
        });
    }
    let (rows, cols) = omegas_per_bin[0].shape();
    let taps = (0..lp)
        .map(|i| {
            let mut acc = CMatrix::zeros(rows, cols);
            for (p, om) in omegas_per_bin.iter().enumerate() {
                acc += om * theta_inv[(i, p)];
            }
            acc
        })
        .collect();
    Ok((taps, theta_inv))
}

/// `sum_i P[i] e^{-j w C2 i}`, the tap response on the up-sampled grid.
pub fn tap_response(taps: &[CMatrix], w: f64, c2: usize) -> CMatrix {
    let lp_bar = (taps.len() / 2) as i64;
    let (r, c) = taps[0].shape();
    let mut acc = CMatrix::zeros(r, c);
    for (i, p) in taps.iter().enumerate() {
        let tap = i as i64 - lp_bar;
        acc += p * cis(-w * (c2 as i64 * tap) as f64);
    }
    acc
}

/// Precoder taps of one subcarrier for every AP.
#[derive(Debug, Clone)]
pub struct SubcarrierPrecoder {
    pub subcarrier: usize,
    pub theta: CMatrix,
    pub theta_inv: CMatrix,
    /// `taps[k][i + Lp]`, each `N x U`.
    pub taps: Vec<Vec<CMatrix>>,
    /// `combiners[k][p + Lp]`, the bin-level `Omega_{m,p}^k`.
    pub combiners: Vec<Vec<CMatrix>>,
}

#[derive(Debug, Clone)]
pub struct PrecoderSet {
    pub bins: DesignBins,
    pub plan: InterpolationPlan,
    pub combiner: Combiner,
    subcarriers: Vec<SubcarrierPrecoder>,
    lookup: Vec<Option<usize>>,
}

impl PrecoderSet {
    pub fn get(&self, m: usize) -> Option<&SubcarrierPrecoder> {
        self.lookup.get(m).copied().flatten().map(|i| &self.subcarriers[i])
    }

    pub fn subcarriers(&self) -> &[SubcarrierPrecoder] {
        &self.subcarriers
    }

    pub fn lp_bar(&self) -> usize {
        self.bins.lp_bar()
    }
}

/// Bin-level combiner for one AP.
pub fn design_combiner(
    channel: &ChannelRealization,
    k: usize,
    omega: f64,
    tau_k: &[usize],
    beta_k: &[f64],
    combiner: Combiner,
) -> Result<CMatrix> {
    let h = channel.freq_matrix(k, omega);
    let targets = phase_targets(omega, tau_k);
    match combiner {
        Combiner::Mrc => combiner_mrc(&h, &targets),
        Combiner::MrcStatistical => Ok(combiner_mrc_statistical(&h, &targets, beta_k)),
        Combiner::Zf => combiner_zf(&h, &targets),
    }
}

/// Designs taps for `subcarriers` and every AP. `tau[k][u]`, `beta[k][u]`.
pub fn design_precoders(
    channel: &ChannelRealization,
    tau: &[Vec<usize>],
    beta: &[Vec<f64>],
    subcarriers: &[usize],
    bins: &DesignBins,
    plan: InterpolationPlan,
    combiner: Combiner,
) -> Result<PrecoderSet> {
    plan.check(bins.num_subcarriers())?;
    let designed: Result<Vec<SubcarrierPrecoder>> = subcarriers
        .par_iter()
        .map(|&m| {
            let omegas = bins.omegas(m);
            let theta = theta_matrix(&omegas, plan.c2);
            let mut taps = Vec::with_capacity(channel.num_aps());
            let mut combiners = Vec::with_capacity(channel.num_aps());
            let mut theta_inv = None;
            for k in 0..channel.num_aps() {
                let per_bin = omegas
                    .iter()
                    .map(|&w| design_combiner(channel, k, w, &tau[k], &beta[k], combiner))
                    .collect::<Result<Vec<_>>>()?;
                let (p, inv) = assemble_taps(&per_bin, &theta)?;
                taps.push(p);
                combiners.push(per_bin);
                theta_inv = Some(inv);
            }
            let theta_inv = match theta_inv {
                Some(inv) => inv,
                None => inverse(&theta).ok_or(Error::IllConditioned(f64::INFINITY))?,
            };
            Ok(SubcarrierPrecoder {
                subcarrier: m,
                theta,
                theta_inv,
                taps,
                combiners,
            })
        })
        .collect();
    let designed = designed?;
    let mut lookup = vec![None; bins.num_subcarriers()];
    for (i, sp) in designed.iter().enumerate() {
        lookup[sp.subcarrier] = Some(i);
    }
    Ok(PrecoderSet {
        bins: bins.clone(),
        plan,
        combiner,
        subcarriers: designed,
        lookup,
    })
}

/// Per-antenna sample streams of one AP. Element `t` of each stream is
/// sample index `start + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApStream {
    pub start: isize,
    pub antennas: Vec<Vec<Complex64>>,
}

impl ApStream {
    pub fn len(&self) -> usize {
        self.antennas.first().map_or(0, |a| a.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean radiated power per sample, summed over antennas.
    pub fn average_power(&self) -> f64 {
        let len = self.len();
        if len == 0 {
            return 0.0;
        }
        self.antennas
            .iter()
            .flat_map(|a| a.iter())
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            / len as f64
    }
}

/// Multistage transmitter for AP `k`: polyphase branches
/// `P_r[t] = P[t C1 + r]` run at the OQAM rate, are interpolated by `C1`,
/// delayed by `r` and summed, then interpolated by `C2` inside the filter bank.
///
/// Every subcarrier of `frame` must have a precoder in `set`.
pub fn transmit_multistage(
    frame: &OqamFrame,
    set: &PrecoderSet,
    k: usize,
    bank: &FilterBank,
) -> Result<ApStream> {
    let m_count = frame.num_subcarriers();
    if m_count != bank.num_subcarriers() {
        return Err(Error::LengthMismatch {
            expected: bank.num_subcarriers(),
            got: m_count,
        });
    }
    let plan = set.plan;
    plan.check(m_count)?;
    let lp_bar = set.lp_bar() as i64;
    let c1 = plan.c1 as i64;
    let slots = frame.num_slots() as i64;
    let users = frame.num_users();

    // intermediate index t covers -Lp ..= (slots-1) C1 + Lp
    let t_lo = -lp_bar;
    let t_hi = (slots - 1) * c1 + lp_bar;
    let num_blocks = (t_hi - t_lo + 1) as usize;

    let first = set
        .subcarriers()
        .first()
        .ok_or(Error::LengthMismatch { expected: m_count, got: 0 })?;
    let antennas = first.taps[k][0].nrows();
    let mut blocks = vec![vec![vec![Complex64::new(0.0, 0.0); m_count]; num_blocks]; antennas];

    for m in 0..m_count {
        let sp = set.get(m).ok_or(Error::LengthMismatch {
            expected: m_count,
            got: set.subcarriers().len(),
        })?;
        let taps = &sp.taps[k];
        let symbols: Vec<Vec<Complex64>> = (0..slots)
            .map(|i| {
                let ph = oqam_phase(m as i64, i);
                frame.users(m, i as usize).iter().map(|&a| a * ph).collect()
            })
            .collect();
        for r in 0..c1 {
            // branch r holds taps j = t C1 + r inside [-Lp, Lp]
            let branch: Vec<(i64, &CMatrix)> = (-lp_bar..=lp_bar)
                .filter(|j| (j - r).rem_euclid(c1) == 0)
                .map(|j| ((j - r).div_euclid(c1), &taps[(j + lp_bar) as usize]))
                .collect();
            let out_lo = branch.iter().map(|b| b.0).min().unwrap_or(0);
            let out_hi = slots - 1 + branch.iter().map(|b| b.0).max().unwrap_or(0);
            for i in out_lo..=out_hi {
                let mut z = vec![Complex64::new(0.0, 0.0); antennas];
                for &(t, tap) in &branch {
                    let src = i - t;
                    if src < 0 || src >= slots {
                        continue;
                    }
                    let s = &symbols[src as usize];
                    for (n, zn) in z.iter_mut().enumerate() {
                        for (u, &su) in s.iter().enumerate().take(users) {
                            *zn += tap[(n, u)] * su;
                        }
                    }
                }
                let t_abs = i * c1 + r;
                if t_abs < t_lo || t_abs > t_hi {
                    continue;
                }
                let b = (t_abs - t_lo) as usize;
                for (n, zn) in z.into_iter().enumerate() {
                    blocks[n][b][m] += zn;
                }
            }
        }
    }

    let streams = blocks
        .iter()
        .map(|b| bank.synthesize(b, plan.c2))
        .collect::<Result<Vec<_>>>()?;
    Ok(ApStream {
        start: (t_lo * plan.c2 as i64) as isize,
        antennas: streams,
    })
}
