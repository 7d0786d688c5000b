//! Power delay profiles, channel realizations, frequency responses and the
//! deterministic PDP sums used by the closed-form analysis.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NetworkLayout;
use crate::linalg::{cis, complex_gaussian, CMatrix};
use crate::precoder::ApStream;

/// Extended Vehicular A tapped delay line (3GPP TS 36.104 Annex B.2):
/// excess tap delay in ns and relative power in dB.
pub const EVA_TAPS: [(f64, f64); 9] = [
    (0.0, 0.0),
    (30.0, -1.5),
    (150.0, -1.4),
    (310.0, -3.6),
    (370.0, -0.6),
    (710.0, -9.1),
    (1090.0, -7.0),
    (1730.0, -12.0),
    (2510.0, -16.9),
];

/// Profile source as written in a config file: a name or explicit
/// `[delay_ns, power_db]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PdpSpec {
    Named(String),
    Taps(Vec<(f64, f64)>),
}

impl Default for PdpSpec {
    fn default() -> Self {
        PdpSpec::Named("EVA".into())
    }
}

/// Sample-grid tap powers, normalized to unit sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerDelayProfile {
    lambda: Vec<f64>,
}

impl PowerDelayProfile {
    /// Normalizes `powers` (linear) to unit sum.
    pub fn from_linear(powers: Vec<f64>) -> Result<Self> {
        if powers.is_empty() {
            return Err(Error::EmptyProfile);
        }
        let total: f64 = powers.iter().sum();
        if !(total > 0.0) || powers.iter().any(|&p| p < 0.0) {
            return Err(Error::EmptyProfile);
        }
        Ok(Self {
            lambda: powers.into_iter().map(|p| p / total).collect(),
        })
    }

    pub fn flat() -> Self {
        Self { lambda: vec![1.0] }
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Number of taps `L_h`.
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// Zeroes taps more than `threshold_db` below the strongest one and
    /// renormalizes; trailing zero taps are dropped.
    pub fn truncated(&self, threshold_db: f64) -> Self {
        let peak = self.lambda.iter().cloned().fold(0.0, f64::max);
        let floor = peak * 10f64.powf(-threshold_db.abs() / 10.0);
        let mut kept: Vec<f64> = self
            .lambda
            .iter()
            .map(|&p| if p >= floor { p } else { 0.0 })
            .collect();
        while kept.len() > 1 && *kept.last().unwrap() == 0.0 {
            kept.pop();
        }
        Self::from_linear(kept).expect("peak tap survives truncation")
    }

    /// `lambda[l - tau]`, zero-padded at the head, on a grid of `len` samples.
    pub fn shifted(&self, tau: usize, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (l, &p) in self.lambda.iter().enumerate() {
            if l + tau < len {
                out[l + tau] = p;
            }
        }
        out
    }

    /// `sum_l lambda[l] e^{j w l}`.
    pub fn characteristic(&self, w: f64) -> Complex64 {
        self.lambda
            .iter()
            .enumerate()
            .map(|(l, &p)| p * cis(w * l as f64))
            .sum()
    }
}

/// Maps delays to the nearest sample, power-summing collisions.
pub fn load_pdp(spec: &PdpSpec, sample_interval_s: f64) -> Result<PowerDelayProfile> {
    let taps: Vec<(f64, f64)> = match spec {
        PdpSpec::Named(name) => match name.to_ascii_lowercase().as_str() {
            "eva" => EVA_TAPS.to_vec(),
            "flat" => vec![(0.0, 0.0)],
            _ => return Err(Error::UnknownProfile(name.clone())),
        },
        PdpSpec::Taps(t) => t.clone(),
    };
    if taps.is_empty() {
        return Err(Error::EmptyProfile);
    }
    let mut powers: Vec<f64> = Vec::new();
    for &(delay_ns, power_db) in &taps {
        if delay_ns < 0.0 {
            return Err(Error::NegativeDelay(delay_ns));
        }
        let idx = (delay_ns * 1e-9 / sample_interval_s).round() as usize;
        if powers.len() <= idx {
            powers.resize(idx + 1, 0.0);
        }
        powers[idx] += 10f64.powf(power_db / 10.0);
    }
    PowerDelayProfile::from_linear(powers)
}

/// Complex taps `h_{k,u}[l]` for every AP/user pair, `N` antennas each.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    num_aps: usize,
    num_users: usize,
    num_taps: usize,
    num_antennas: usize,
    data: Vec<Complex64>,
}

impl ChannelRealization {
    pub fn zeros(num_aps: usize, num_users: usize, num_taps: usize, num_antennas: usize) -> Self {
        Self {
            num_aps,
            num_users,
            num_taps,
            num_antennas,
            data: vec![Complex64::new(0.0, 0.0); num_aps * num_users * num_taps * num_antennas],
        }
    }

    pub fn num_aps(&self) -> usize {
        self.num_aps
    }
    pub fn num_users(&self) -> usize {
        self.num_users
    }
    pub fn num_taps(&self) -> usize {
        self.num_taps
    }
    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    fn offset(&self, k: usize, u: usize, l: usize) -> usize {
        ((k * self.num_users + u) * self.num_taps + l) * self.num_antennas
    }

    /// Antenna vector of tap `l` between AP `k` and user `u`.
    pub fn tap(&self, k: usize, u: usize, l: usize) -> &[Complex64] {
        let o = self.offset(k, u, l);
        &self.data[o..o + self.num_antennas]
    }

    pub fn tap_mut(&mut self, k: usize, u: usize, l: usize) -> &mut [Complex64] {
        let o = self.offset(k, u, l);
        let n = self.num_antennas;
        &mut self.data[o..o + n]
    }

    /// All taps of one link, `[l][n]` flattened.
    pub fn link(&self, k: usize, u: usize) -> &[Complex64] {
        let o = self.offset(k, u, 0);
        &self.data[o..o + self.num_taps * self.num_antennas]
    }

    /// Scales every tap by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|z| *z *= c);
        out
    }

    /// Frequency response `sum_l h_{k,u}[l] e^{-j w l}`.
    pub fn freq_response(&self, k: usize, u: usize, w: f64) -> Vec<Complex64> {
        freq_response(self.link(k, u), self.num_antennas, w)
    }

    /// `U x N` matrix whose row `u` is `h~_{k,u}(w)^T`.
    pub fn freq_matrix(&self, k: usize, w: f64) -> CMatrix {
        let mut out = CMatrix::zeros(self.num_users, self.num_antennas);
        for u in 0..self.num_users {
            let resp = self.freq_response(k, u, w);
            for (n, z) in resp.into_iter().enumerate() {
                out[(u, n)] = z;
            }
        }
        out
    }
}

/// Draws `h_{k,u}[l] = sqrt(beta_{k,u}) g_{k,u}[l]`, `g ~ CN(0, lambda[l] I_N)`.
pub fn draw_channel<R: Rng + ?Sized>(
    pdp: &PowerDelayProfile,
    layout: &NetworkLayout,
    num_antennas: usize,
    rng: &mut R,
) -> ChannelRealization {
    let k_count = layout.num_aps();
    let u_count = layout.num_users();
    let mut ch = ChannelRealization::zeros(k_count, u_count, pdp.len(), num_antennas);
    for k in 0..k_count {
        for u in 0..u_count {
            let amp = layout.beta[k][u].sqrt();
            for (l, &p) in pdp.lambda().iter().enumerate() {
                for z in ch.tap_mut(k, u, l) {
                    *z = amp * complex_gaussian(rng, p);
                }
            }
        }
    }
    ch
}

/// `sum_l h[l] e^{-j w l}` for taps stored `[l][n]` flattened.
pub fn freq_response(taps: &[Complex64], num_antennas: usize, w: f64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); num_antennas];
    for (l, tap) in taps.chunks_exact(num_antennas).enumerate() {
        let rot = cis(-w * l as f64);
        for (o, &h) in out.iter_mut().zip(tap) {
            *o += h * rot;
        }
    }
    out
}

/// Deterministic PDP sums for one design subcarrier and one offset.
///
/// `bins` are the design frequencies `w_{m,p}` of subcarrier `m` in order
/// `p = -Lp..=Lp`; indices into the tables use `p + Lp`.
#[derive(Debug, Clone)]
pub struct PdpStatistics {
    pub num_subcarriers: usize,
    pub bins: Vec<f64>,
    pub tau: usize,
    /// `mu[m_dot][p] = sum_l lambda[l] e^{j (w_{m,p} - 2 pi m_dot / M) l}`.
    pub mu: Vec<Vec<Complex64>>,
    /// `zeta[p][q] = sum_l lambda[l] e^{j (w_p - w_q) l}`.
    pub zeta: Vec<Vec<Complex64>>,
    /// `zeta[p][q] e^{j (w_p - w_q) tau}`.
    pub zeta_k: Vec<Vec<Complex64>>,
    /// `xi` by circular difference `(m_ddot - m_dot) mod M`.
    xi_by_diff: Vec<Complex64>,
    /// `lambda[l - tau]` on the analysis grid.
    pub lambda_shifted: Vec<f64>,
    /// `lambda_shifted[l] e^{j w_{m,p} l}`, indexed `[p][l]`.
    pub lambda_mod: Vec<Vec<Complex64>>,
}

impl PdpStatistics {
    /// `xi_{m_ddot, m_dot} = sum_l lambda[l] e^{j 2 pi (m_ddot - m_dot) l / M}`.
    pub fn xi(&self, m_ddot: usize, m_dot: usize) -> Complex64 {
        let m = self.num_subcarriers;
        self.xi_by_diff[(m + m_ddot % m - m_dot % m) % m]
    }
}

/// Builds all coefficient tables by direct summation over the PDP support.
/// `grid_len` must cover `tau + L_h`.
pub fn pdp_statistics(
    pdp: &PowerDelayProfile,
    num_subcarriers: usize,
    bins: &[f64],
    tau: usize,
    grid_len: usize,
) -> PdpStatistics {
    let m_count = num_subcarriers;
    let mu = (0..m_count)
        .map(|md| {
            let w0 = 2.0 * PI * md as f64 / m_count as f64;
            bins.iter().map(|&w| pdp.characteristic(w - w0)).collect()
        })
        .collect();
    let zeta: Vec<Vec<Complex64>> = bins
        .iter()
        .map(|&wp| bins.iter().map(|&wq| pdp.characteristic(wp - wq)).collect())
        .collect();
    let zeta_k = zeta
        .iter()
        .zip(bins)
        .map(|(row, &wp)| {
            row.iter()
                .zip(bins)
                .map(|(&z, &wq)| z * cis((wp - wq) * tau as f64))
                .collect()
        })
        .collect();
    let xi_by_diff = (0..m_count)
        .map(|d| pdp.characteristic(2.0 * PI * d as f64 / m_count as f64))
        .collect();
    let lambda_shifted = pdp.shifted(tau, grid_len);
    let lambda_mod = bins
        .iter()
        .map(|&w| {
            lambda_shifted
                .iter()
                .enumerate()
                .map(|(l, &p)| p * cis(w * l as f64))
                .collect()
        })
        .collect();
    PdpStatistics {
        num_subcarriers,
        bins: bins.to_vec(),
        tau,
        mu,
        zeta,
        zeta_k,
        xi_by_diff,
        lambda_shifted,
        lambda_mod,
    }
}

/// Noise-free signal at user `u` on samples `[out_start, out_start + out_len)`:
/// `y[t] = sum_k sum_l h_{k,u}[l]^T x_k[t - l - tau_{k,u}]`.
pub fn propagate(
    channel: &ChannelRealization,
    tau: &[Vec<usize>],
    u: usize,
    streams: &[ApStream],
    out_start: isize,
    out_len: usize,
) -> Vec<Complex64> {
    let mut y = vec![Complex64::new(0.0, 0.0); out_len];
    for (k, stream) in streams.iter().enumerate() {
        let len = stream.len() as isize;
        for l in 0..channel.num_taps() {
            let h = channel.tap(k, u, l);
            let delay = (l + tau[k][u]) as isize;
            // x index = out_start + t - delay - stream.start
            let base = out_start - delay - stream.start;
            let t_lo = (-base).max(0);
            let t_hi = (len - base).min(out_len as isize);
            for (n, &hn) in h.iter().enumerate() {
                if hn == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let x = &stream.antennas[n];
                for t in t_lo..t_hi {
                    y[t as usize] += hn * x[(base + t) as usize];
                }
            }
        }
    }
    y
}
