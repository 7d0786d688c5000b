//! Equivalent channels, filter cross-kernels and Monte Carlo symbol powers.
//!
//! Sample `n` of the equivalent channel from AP `k` for user `u`'s stream,
//! received by user `ub`, is
//!
//! ```text
//! v_m[n] = sum_j P_m[j]^T h_{k,ub}[n - tau_{k,ub} - j C2]
//! ```
//!
//! The contribution of OQAM symbol `a_{m,i}^u` to the demodulated real
//! symbol `(mb, 0)` of user `ub` is `a * Re{ sum_n g_{m,i}[n] v_m^u[n] }`
//! with the cross-kernel
//!
//! ```text
//! g_{m,i}[n] = e^{j(phi_{m,i} - phi_{mb,0})} sum_l f_m[l - i M/2 - n] f_mb^*[l]
//! ```
//!
//! In real-stacked form this is `fdot^T vdot` with `fdot = [Re g; -Im g]`
//! and `vdot = [Re v; Im v]`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::channel::ChannelRealization;
use crate::error::{Error, Result};
use crate::filterbank::{oqam_phase, PrototypeFilter};
use crate::linalg::{cis, CMatrix};
use crate::precoder::PrecoderSet;

/// Sample support `[start, start + len)` on which equivalent channels of a
/// user are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayGrid {
    pub start: isize,
    pub len: usize,
}

impl DelayGrid {
    /// `start = -Lp C2`, covering `seg_len + 2 Lp C2` samples where
    /// `seg_len = max_k tau_{k,u} + L_h`.
    pub fn new(lp_bar: usize, c2: usize, seg_len: usize) -> Self {
        Self {
            start: -((lp_bar * c2) as isize),
            len: seg_len + 2 * lp_bar * c2,
        }
    }

    pub fn for_user(tau: &[Vec<usize>], u: usize, num_taps: usize, lp_bar: usize, c2: usize) -> Self {
        let max_tau = tau.iter().map(|row| row[u]).max().unwrap_or(0);
        Self::new(lp_bar, c2, max_tau + num_taps)
    }

    pub fn end(&self) -> isize {
        self.start + self.len as isize
    }
}

/// `v[u][n - grid.start]` for every stream `u`; `link` holds `h[l][nu]`
/// flattened and `taps[j + Lp]` are `N x U`.
pub fn effective_v(
    taps: &[CMatrix],
    link: &[Complex64],
    tau: usize,
    c2: usize,
    grid: &DelayGrid,
) -> Vec<Vec<Complex64>> {
    let (antennas, users) = taps[0].shape();
    let num_taps = link.len() / antennas;
    let lp_bar = (taps.len() / 2) as isize;
    let mut v = vec![vec![Complex64::new(0.0, 0.0); grid.len]; users];
    for (ji, p) in taps.iter().enumerate() {
        let shift = tau as isize + (ji as isize - lp_bar) * c2 as isize;
        for l in 0..num_taps {
            let idx = shift + l as isize - grid.start;
            if idx < 0 || idx >= grid.len as isize {
                continue;
            }
            let h = &link[l * antennas..(l + 1) * antennas];
            for (u, vu) in v.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (nu, &hn) in h.iter().enumerate() {
                    acc += p[(nu, u)] * hn;
                }
                vu[idx as usize] += acc;
            }
        }
    }
    v
}

/// `A_D[d] = sum_l f[l] f[l + d] e^{j 2 pi D l / M}` for `|d| < kappa M`,
/// cached per circular subcarrier difference `D`.
#[derive(Debug, Clone)]
pub struct AmbiguityTable {
    num_subcarriers: usize,
    filter_len: usize,
    rows: Vec<Option<Vec<Complex64>>>,
}

impl AmbiguityTable {
    /// Precomputes differences `|D| <= max_offset` (all when `None`).
    pub fn new(proto: &PrototypeFilter, max_offset: Option<usize>) -> Self {
        let m = proto.num_subcarriers();
        let mut rows = vec![None; m];
        let diffs: Vec<i64> = match max_offset {
            Some(d) if 2 * d + 1 < m => (-(d as i64)..=d as i64).collect(),
            _ => (0..m as i64).collect(),
        };
        for d in diffs {
            let idx = d.rem_euclid(m as i64) as usize;
            rows[idx] = Some(ambiguity_row(proto, idx));
        }
        Self {
            num_subcarriers: m,
            filter_len: proto.len(),
            rows,
        }
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn filter_len(&self) -> usize {
        self.filter_len
    }

    /// `A_D[d]`; zero outside the filter overlap. Panics if `D` was not cached.
    pub fn get(&self, diff: i64, d: i64) -> Complex64 {
        let row = self.rows[diff.rem_euclid(self.num_subcarriers as i64) as usize]
            .as_ref()
            .expect("subcarrier difference outside the cached window");
        let l = self.filter_len as i64;
        if d <= -l || d >= l {
            Complex64::new(0.0, 0.0)
        } else {
            row[(d + l - 1) as usize]
        }
    }
}

fn ambiguity_row(proto: &PrototypeFilter, diff: usize) -> Vec<Complex64> {
    let f = proto.taps();
    let l = f.len() as i64;
    let m = proto.num_subcarriers();
    let rot: Vec<Complex64> = (0..m)
        .map(|t| cis(2.0 * PI * (diff * t % m) as f64 / m as f64))
        .collect();
    (-(l - 1)..l)
        .map(|d| {
            let lo = 0.max(-d);
            let hi = l.min(l - d);
            let mut acc = Complex64::new(0.0, 0.0);
            for x in lo..hi {
                acc += rot[(x as usize) % m] * (f[x as usize] * f[(x + d) as usize]);
            }
            acc
        })
        .collect()
}

/// `g_{m,i}[n]` for `n` in `[start, start + values.len())`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossKernel {
    pub start: isize,
    pub values: Vec<Complex64>,
}

impl CrossKernel {
    pub fn get(&self, n: isize) -> Complex64 {
        let idx = n - self.start;
        if idx < 0 || idx >= self.values.len() as isize {
            Complex64::new(0.0, 0.0)
        } else {
            self.values[idx as usize]
        }
    }

    /// `[Re g; -Im g]`.
    pub fn stacked(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|z| z.re)
            .chain(self.values.iter().map(|z| -z.im))
            .collect()
    }

    /// `Re{ sum_n g[n] v[n] }` for `v` on `grid`.
    pub fn apply(&self, v: &[Complex64], grid: &DelayGrid) -> f64 {
        let lo = self.start.max(grid.start);
        let hi = (self.start + self.values.len() as isize).min(grid.end());
        let mut acc = 0.0;
        for n in lo..hi {
            let g = self.values[(n - self.start) as usize];
            let x = v[(n - grid.start) as usize];
            acc += g.re * x.re - g.im * x.im;
        }
        acc
    }
}

/// Cross-kernel of symbol `(m, i)` seen at target `(mb, 0)`; length
/// `2 kappa M - 1`.
pub fn filter_cross_kernel(table: &AmbiguityTable, m: usize, mb: usize, i: i64) -> CrossKernel {
    let mm = table.num_subcarriers() as i64;
    let l = table.filter_len() as i64;
    let half = mm / 2;
    let phase = oqam_phase(m as i64, i) * oqam_phase(mb as i64, 0).conj();
    let diff = m as i64 - mb as i64;
    // d = i M/2 + n spans (-L, L)
    let start = -(l - 1) - i * half;
    let values = (0..2 * l - 1)
        .map(|t| {
            let n = start + t;
            let d = i * half + n;
            let rot = cis(-2.0 * PI * ((mb as i64 * d).rem_euclid(mm)) as f64 / mm as f64);
            phase * rot * table.get(diff, d)
        })
        .collect();
    CrossKernel {
        start: start as isize,
        values,
    }
}

/// Which interfering symbols are accumulated around the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterferenceWindow {
    /// Largest `|m - mb|` (circular); `None` covers every subcarrier.
    pub subcarriers: Option<usize>,
    /// Largest `|i|`; `None` covers every slot with kernel overlap.
    pub slots: Option<usize>,
}

impl InterferenceWindow {
    /// `|m - mb| <= 2`, `|i| <= 2 kappa`.
    pub fn standard(overlap: usize) -> Self {
        Self {
            subcarriers: Some(2),
            slots: Some(2 * overlap),
        }
    }

    pub fn full() -> Self {
        Self {
            subcarriers: None,
            slots: None,
        }
    }

    /// Subcarriers covered around `mb`, each listed once.
    pub fn subcarrier_set(&self, mb: usize, num_subcarriers: usize) -> Vec<usize> {
        match self.subcarriers {
            Some(d) if 2 * d + 1 < num_subcarriers => (-(d as i64)..=d as i64)
                .map(|o| (mb as i64 + o).rem_euclid(num_subcarriers as i64) as usize)
                .collect(),
            _ => (0..num_subcarriers).collect(),
        }
    }

    /// Slots `i` whose kernel can overlap `grid`.
    pub fn slot_range(&self, grid: &DelayGrid, num_subcarriers: usize, filter_len: usize) -> std::ops::RangeInclusive<i64> {
        let half = (num_subcarriers / 2) as i64;
        let l = filter_len as i64;
        // need |i M/2 + n| < L for some n in the grid
        let lo = (-(l - 1) - (grid.end() as i64 - 1)).div_euclid(half);
        let hi = (l - 1 - grid.start as i64).div_euclid(half);
        match self.slots {
            Some(s) => lo.max(-(s as i64))..=hi.min(s as i64),
            None => lo..=hi,
        }
    }
}

/// Symbol powers `E_{m,i}^u` at the target `(mb, ub)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerLedger {
    pub target_subcarrier: usize,
    pub target_user: usize,
    /// `(m, i, u, power)`.
    pub entries: Vec<(usize, i64, usize, f64)>,
    pub desired: f64,
    pub total: f64,
    /// `(sum_k fdot^T vdot_k)^2` of the desired symbol.
    pub desired_coherent: f64,
}

impl PowerLedger {
    pub fn interference(&self) -> f64 {
        (self.total - self.desired).max(0.0)
    }

    /// `E_des / (sum E - E_des + sigma^2 / 2)`.
    pub fn sinr(&self, noise_var: f64) -> f64 {
        let den = self.interference() + noise_var / 2.0;
        if den > 0.0 {
            self.desired / den
        } else if self.desired > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }

    /// SINR with the desired power summed coherently across APs.
    pub fn sinr_coherent(&self, noise_var: f64) -> f64 {
        let den = self.interference() + noise_var / 2.0;
        if den > 0.0 {
            self.desired_coherent / den
        } else {
            0.0
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.entries.iter_mut().for_each(|e| e.3 *= c);
        out.desired *= c;
        out.total *= c;
        out.desired_coherent *= c;
        out
    }
}

/// Cross-kernels of every symbol in the window around target subcarrier `mb`.
#[derive(Debug, Clone)]
pub struct TargetKernels {
    pub target_subcarrier: usize,
    /// `(m, i, g_{m,i})`, grouped by `m`.
    pub kernels: Vec<(usize, i64, CrossKernel)>,
}

impl TargetKernels {
    /// `grid` bounds the equivalent-channel support the kernels will meet.
    pub fn new(table: &AmbiguityTable, mb: usize, window: &InterferenceWindow, grid: &DelayGrid) -> Self {
        let m_count = table.num_subcarriers();
        let slots = window.slot_range(grid, m_count, table.filter_len());
        let mut kernels = Vec::new();
        for m in window.subcarrier_set(mb, m_count) {
            for i in slots.clone() {
                kernels.push((m, i, filter_cross_kernel(table, m, mb, i)));
            }
        }
        Self {
            target_subcarrier: mb,
            kernels,
        }
    }

    /// Distinct subcarriers in window order.
    pub fn subcarriers(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &(m, _, _) in &self.kernels {
            if out.last() != Some(&m) {
                out.push(m);
            }
        }
        out
    }
}

/// Accumulates `E_{m,i}^u = sum_k (fdot^T vdot_k)^2` over the window.
///
/// `precoders` must hold every subcarrier of the window. Power is summed per
/// AP; the coherent desired power is kept alongside.
#[allow(clippy::too_many_arguments)]
pub fn symbol_powers(
    precoders: &PrecoderSet,
    channel: &ChannelRealization,
    tau: &[Vec<usize>],
    table: &AmbiguityTable,
    mb: usize,
    ub: usize,
    window: &InterferenceWindow,
) -> Result<PowerLedger> {
    let grid = DelayGrid::for_user(tau, ub, channel.num_taps(), precoders.lp_bar(), precoders.plan.c2);
    let kernels = TargetKernels::new(table, mb, window, &grid);
    symbol_powers_with(precoders, channel, tau, &kernels, ub)
}

/// [`symbol_powers`] with precomputed kernels.
pub fn symbol_powers_with(
    precoders: &PrecoderSet,
    channel: &ChannelRealization,
    tau: &[Vec<usize>],
    kernels: &TargetKernels,
    ub: usize,
) -> Result<PowerLedger> {
    let mb = kernels.target_subcarrier;
    let c2 = precoders.plan.c2;
    let grid = DelayGrid::for_user(tau, ub, channel.num_taps(), precoders.lp_bar(), c2);
    let k_count = channel.num_aps();
    let users = channel.num_users();

    let mut entries = Vec::with_capacity(kernels.kernels.len() * users);
    let mut desired = 0.0;
    let mut desired_coherent = 0.0;
    let mut total = 0.0;
    let mut current: Option<(usize, Vec<Vec<Vec<Complex64>>>)> = None;
    for (m, i, kernel) in &kernels.kernels {
        if current.as_ref().map(|c| c.0) != Some(*m) {
            let sp = precoders.get(*m).ok_or(Error::LengthMismatch {
                expected: kernels.kernels.len(),
                got: precoders.subcarriers().len(),
            })?;
            let vs = (0..k_count)
                .map(|k| effective_v(&sp.taps[k], channel.link(k, ub), tau[k][ub], c2, &grid))
                .collect();
            current = Some((*m, vs));
        }
        let vs = &current.as_ref().map(|c| &c.1).expect("set above");
        for u in 0..users {
            let mut power = 0.0;
            let mut coherent = 0.0;
            for v in vs.iter() {
                let x = kernel.apply(&v[u], &grid);
                power += x * x;
                coherent += x;
            }
            if *m == mb && *i == 0 && u == ub {
                desired = power;
                desired_coherent = coherent * coherent;
            }
            total += power;
            entries.push((*m, *i, u, power));
        }
    }
    Ok(PowerLedger {
        target_subcarrier: mb,
        target_user: ub,
        entries,
        desired,
        total,
        desired_coherent,
    })
}

/// Monte Carlo rate summary over realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct McRate {
    /// `mean log2(1 + SINR)`.
    pub rate: f64,
    /// `log2(1 + mean E_des / (mean interference + sigma^2/2))`.
    pub ratio_of_means: f64,
    pub sinr_mean: f64,
    pub sinr_var: f64,
    /// Standard error of the per-trial rate.
    pub rate_std_err: f64,
    pub trials: usize,
}

pub fn rate_mc(ledgers: &[PowerLedger], noise_var: f64) -> Result<McRate> {
    if ledgers.is_empty() {
        return Err(Error::EmptyStream);
    }
    let n = ledgers.len() as f64;
    let sinrs: Vec<f64> = ledgers.iter().map(|l| l.sinr(noise_var)).collect();
    let rates: Vec<f64> = sinrs.iter().map(|s| (1.0 + s).log2()).collect();
    let rate = rates.iter().sum::<f64>() / n;
    let sinr_mean = sinrs.iter().sum::<f64>() / n;
    let var = |xs: &[f64], mean: f64| {
        if xs.len() < 2 {
            0.0
        } else {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
        }
    };
    let sinr_var = var(&sinrs, sinr_mean);
    let rate_std_err = (var(&rates, rate) / n).sqrt();
    let des = ledgers.iter().map(|l| l.desired).sum::<f64>() / n;
    let intf = ledgers.iter().map(|l| l.interference()).sum::<f64>() / n;
    let den = intf + noise_var / 2.0;
    let ratio_of_means = if den > 0.0 { (1.0 + des / den).log2() } else { 0.0 };
    Ok(McRate {
        rate,
        ratio_of_means,
        sinr_mean,
        sinr_var,
        rate_std_err,
        trials: ledgers.len(),
    })
}

/// `trial,m,u,sinr` rows.
pub fn sinr_csv(rows: &[(usize, usize, usize, f64)]) -> String {
    let mut out = String::from("# sinr-samples v1\ntrial,m,u,sinr\n");
    for (t, m, u, s) in rows {
        out.push_str(&format!("{t},{m},{u},{s:.12e}\n"));
    }
    out
}
