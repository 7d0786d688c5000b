//! CP-OFDM baseline with single-tap precoding per subcarrier.
//!
//! Each AP precodes subcarrier `m` with the bin-level combiner at the
//! subcarrier centre `w_m = 2 pi m / M` (same phase targets as FBMC),
//! transmits through a unitary IDFT with an `N_cp`-sample prefix, and each
//! user removes the prefix aligned to its earliest arrival. A delay
//! `D = l + tau` longer than the prefix leaks the previous symbol into the
//! DFT window, so the received coefficient of user `ub` at `mb` is a linear
//! map of the current (`t = 0`) and previous (`t = -1`) symbols:
//!
//! ```text
//! G_k[t, m, u] = sum_l e_{k,u,m}[l] e^{-j w_m D} / M * sum_{r in R_t} e^{j 2 pi (m - mb) r / M}
//! R_0 = [max(0, D - N_cp), M),  R_-1 = [0, min(M, D - N_cp))
//! ```
//!
//! with `e_{k,u,m}[l] = h_{k,ub}[l]^T W_m^k[:, u]`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::error::{Error, Result};
use crate::linalg::{cis, CMatrix};
use crate::precoder::{design_combiner, ApStream, Combiner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfdmConfig {
    pub num_subcarriers: usize,
    pub cp_len: usize,
    pub combiner: Combiner,
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_subcarriers == 0 || self.cp_len >= self.num_subcarriers {
            return Err(Error::InvalidConfig(format!(
                "cyclic prefix {} must be shorter than {} subcarriers",
                self.cp_len, self.num_subcarriers
            )));
        }
        Ok(())
    }
}

/// Single-tap precoders `W[m][k]`, each `N x U`.
#[derive(Debug, Clone)]
pub struct OfdmPrecoders {
    pub combiner: Combiner,
    pub taps: Vec<Vec<CMatrix>>,
}

pub fn design_ofdm_precoders(
    channel: &ChannelRealization,
    tau: &[Vec<usize>],
    beta: &[Vec<f64>],
    num_subcarriers: usize,
    combiner: Combiner,
) -> Result<OfdmPrecoders> {
    let taps = (0..num_subcarriers)
        .into_par_iter()
        .map(|m| {
            let w = 2.0 * PI * m as f64 / num_subcarriers as f64;
            (0..channel.num_aps())
                .map(|k| design_combiner(channel, k, w, &tau[k], &beta[k], combiner))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OfdmPrecoders { combiner, taps })
}

/// Received power bookkeeping at `(mb, ub)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfdmLedger {
    pub target_subcarrier: usize,
    pub target_user: usize,
    /// `sum_k |G_k[0, mb, ub]|^2`.
    pub desired: f64,
    /// `sum_k sum_{t,m,u} |G_k|^2`.
    pub total: f64,
    /// `|sum_k G_k[0, mb, ub]|^2`.
    pub desired_coherent: f64,
    /// `sum_{t,m,u} |sum_k G_k|^2`.
    pub total_coherent: f64,
}

impl OfdmLedger {
    /// Per-AP power accounting, complex noise `sigma^2` per bin.
    pub fn sinr(&self, noise_var: f64) -> f64 {
        ratio(self.desired, self.total - self.desired, noise_var)
    }

    pub fn sinr_coherent(&self, noise_var: f64) -> f64 {
        ratio(self.desired_coherent, self.total_coherent - self.desired_coherent, noise_var)
    }
}

fn ratio(desired: f64, interference: f64, noise: f64) -> f64 {
    let den = interference.max(0.0) + noise;
    if den > 0.0 {
        desired / den
    } else if desired > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Effective scalar responses `e_{k,u,m}[l] = h_{k,ub}[l]^T W_m^k[:, u]` at
/// one receiving user, reusable across prefix lengths and targets.
#[derive(Debug, Clone)]
pub struct OfdmResponse {
    num_subcarriers: usize,
    num_users: usize,
    num_taps: usize,
    receiver: usize,
    /// `[k][l][m][u]` flattened.
    e: Vec<Complex64>,
    /// `e^{j 2 pi r / M}`.
    twiddle: Vec<Complex64>,
}

impl OfdmResponse {
    pub fn new(channel: &ChannelRealization, precoders: &OfdmPrecoders, ub: usize) -> Self {
        let m_count = precoders.taps.len();
        let users = channel.num_users();
        let taps = channel.num_taps();
        let mut e = Vec::with_capacity(channel.num_aps() * taps * m_count * users);
        for k in 0..channel.num_aps() {
            for l in 0..taps {
                let h = channel.tap(k, ub, l);
                for per_m in &precoders.taps {
                    let w = &per_m[k];
                    for u in 0..users {
                        e.push(h.iter().enumerate().map(|(n, &hn)| hn * w[(n, u)]).sum());
                    }
                }
            }
        }
        let twiddle = (0..m_count).map(|r| cis(2.0 * PI * r as f64 / m_count as f64)).collect();
        Self {
            num_subcarriers: m_count,
            num_users: users,
            num_taps: taps,
            receiver: ub,
            e,
            twiddle,
        }
    }

    fn tw(&self, x: i64) -> Complex64 {
        self.twiddle[x.rem_euclid(self.num_subcarriers as i64) as usize]
    }

    /// `sum_{r=a}^{b-1} e^{j 2 pi d r / M}`.
    fn partial_sum(&self, a: usize, b: usize, d: i64) -> Complex64 {
        if b <= a {
            return Complex64::new(0.0, 0.0);
        }
        let m = self.num_subcarriers as i64;
        let d = d.rem_euclid(m);
        if d == 0 {
            return Complex64::new((b - a) as f64, 0.0);
        }
        (self.tw(d * a as i64) - self.tw(d * b as i64)) / (Complex64::new(1.0, 0.0) - self.tw(d))
    }

    /// Power bookkeeping at `(mb, receiver)` for prefix `cp_len`; `tau[k][u]`.
    pub fn ledger(&self, tau: &[Vec<usize>], cp_len: usize, mb: usize) -> OfdmLedger {
        let m_count = self.num_subcarriers;
        let users = self.num_users;
        let ub = self.receiver;
        let k_count = tau.len();
        let mut g = vec![vec![Complex64::new(0.0, 0.0); 2 * m_count * users]; k_count];
        for (k, gk) in g.iter_mut().enumerate() {
            for l in 0..self.num_taps {
                let delay = l + tau[k][ub];
                let spill = delay.saturating_sub(cp_len).min(m_count);
                let base = (k * self.num_taps + l) * m_count * users;
                for m in 0..m_count {
                    let rot = self.tw(-((m * delay) as i64)) / m_count as f64;
                    let d = m as i64 - mb as i64;
                    let cur = self.partial_sum(spill, m_count, d) * rot;
                    let prev = self.partial_sum(0, spill, d) * rot;
                    let e = &self.e[base + m * users..base + (m + 1) * users];
                    for (u, &eu) in e.iter().enumerate() {
                        gk[m * users + u] += eu * cur;
                        if spill > 0 {
                            gk[(m_count + m) * users + u] += eu * prev;
                        }
                    }
                }
            }
        }
        let idx = mb * users + ub;
        let desired = g.iter().map(|gk| gk[idx].norm_sqr()).sum();
        let total = g.iter().flat_map(|gk| gk.iter()).map(|z| z.norm_sqr()).sum();
        let coherent = |j: usize| g.iter().map(|gk| gk[j]).sum::<Complex64>();
        let desired_coherent = coherent(idx).norm_sqr();
        let total_coherent = (0..2 * m_count * users).map(|j| coherent(j).norm_sqr()).sum();
        OfdmLedger {
            target_subcarrier: mb,
            target_user: ub,
            desired,
            total,
            desired_coherent,
            total_coherent,
        }
    }
}

/// Linear decomposition of the DFT output at `(mb, ub)`.
pub fn ofdm_link_ledger(
    channel: &ChannelRealization,
    tau: &[Vec<usize>],
    precoders: &OfdmPrecoders,
    cfg: &OfdmConfig,
    mb: usize,
    ub: usize,
) -> OfdmLedger {
    OfdmResponse::new(channel, precoders, ub).ledger(tau, cfg.cp_len, mb)
}

/// `M / (M + N_cp) * mean log2(1 + gamma)`.
pub fn ofdm_rate(sinrs: &[f64], num_subcarriers: usize, cp_len: usize) -> f64 {
    if sinrs.is_empty() {
        return 0.0;
    }
    let mean = sinrs.iter().map(|g| (1.0 + g).log2()).sum::<f64>() / sinrs.len() as f64;
    num_subcarriers as f64 / (num_subcarriers + cp_len) as f64 * mean
}

/// Default enumeration set `0..=tau_max + L_h`.
pub fn cp_search_set(tau_max: usize, num_taps: usize, num_subcarriers: usize) -> Vec<usize> {
    (0..=(tau_max + num_taps).min(num_subcarriers - 1)).collect()
}

/// Arg-max of `mean_rate` over `candidates`; ties go to the smallest prefix.
/// Returns the choice and the full table.
pub fn optimal_cp<F>(candidates: &[usize], mut mean_rate: F) -> Result<(usize, Vec<(usize, f64)>)>
where
    F: FnMut(usize) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut table = Vec::with_capacity(candidates.len());
    for &cp in candidates {
        table.push((cp, mean_rate(cp)?));
    }
    let mut best = table[0];
    for &(cp, r) in &table[1..] {
        if r > best.1 || (r == best.1 && cp < best.0) {
            best = (cp, r);
        }
    }
    Ok((best.0, table))
}

pub fn cp_enumeration_csv(table: &[(usize, f64)]) -> String {
    let mut out = String::from("# cp-enumeration v1\ncp_len,rate\n");
    for (cp, r) in table {
        out.push_str(&format!("{cp},{r:.12e}\n"));
    }
    out
}

/// Unitary OFDM modem with cyclic prefix.
pub struct OfdmModem {
    num_subcarriers: usize,
    cp_len: usize,
    ifft: Arc<dyn Fft<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl OfdmModem {
    pub fn new(num_subcarriers: usize, cp_len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            num_subcarriers,
            cp_len,
            ifft: planner.plan_fft_inverse(num_subcarriers),
            fft: planner.plan_fft_forward(num_subcarriers),
        }
    }

    pub fn symbol_len(&self) -> usize {
        self.num_subcarriers + self.cp_len
    }

    /// Streams of AP `k` for `symbols[s][m][u]`; sample 0 starts the first prefix.
    pub fn transmit(&self, symbols: &[Vec<Vec<Complex64>>], precoders: &OfdmPrecoders, k: usize) -> ApStream {
        let m_count = self.num_subcarriers;
        let antennas = precoders.taps[0][k].nrows();
        let scale = 1.0 / (m_count as f64).sqrt();
        let mut out = vec![Vec::with_capacity(symbols.len() * self.symbol_len()); antennas];
        let mut buf = vec![Complex64::new(0.0, 0.0); m_count];
        for sym in symbols {
            for (n, stream) in out.iter_mut().enumerate() {
                for (m, b) in buf.iter_mut().enumerate() {
                    let w = &precoders.taps[m][k];
                    *b = sym[m].iter().enumerate().map(|(u, &s)| w[(n, u)] * s).sum::<Complex64>() * scale;
                }
                self.ifft.process(&mut buf);
                stream.extend_from_slice(&buf[m_count - self.cp_len..]);
                stream.extend_from_slice(&buf);
            }
        }
        ApStream { start: 0, antennas: out }
    }

    /// DFT outputs `[s][m]` from a received signal starting at sample 0.
    pub fn receive(&self, y: &[Complex64], num_symbols: usize) -> Vec<Vec<Complex64>> {
        let m_count = self.num_subcarriers;
        let scale = 1.0 / (m_count as f64).sqrt();
        (0..num_symbols)
            .map(|s| {
                let o = s * self.symbol_len() + self.cp_len;
                let mut buf: Vec<Complex64> = (0..m_count)
                    .map(|r| y.get(o + r).copied().unwrap_or_default() * scale)
                    .collect();
                self.fft.process(&mut buf);
                buf
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::propagate;
    use crate::linalg::complex_gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_channel(k: usize, u: usize, taps: usize, n: usize, seed: u64) -> ChannelRealization {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ch = ChannelRealization::zeros(k, u, taps, n);
        for kk in 0..k {
            for uu in 0..u {
                for l in 0..taps {
                    for z in ch.tap_mut(kk, uu, l) {
                        *z = complex_gaussian(&mut rng, 1.0 / taps as f64);
                    }
                }
            }
        }
        ch
    }

    fn setup(tau: &[Vec<usize>], cp: usize, combiner: Combiner) -> (ChannelRealization, OfdmPrecoders, OfdmConfig) {
        let k = tau.len();
        let u = tau[0].len();
        let ch = random_channel(k, u, 4, 8, 5);
        let beta = vec![vec![1.0; u]; k];
        let pre = design_ofdm_precoders(&ch, tau, &beta, 32, combiner).unwrap();
        (ch, pre, OfdmConfig { num_subcarriers: 32, cp_len: cp, combiner })
    }

    #[test]
    fn sufficient_cp_zf_is_interference_free() {
        let tau = vec![vec![0, 0]];
        let (ch, pre, cfg) = setup(&tau, 3, Combiner::Zf);
        let l = ofdm_link_ledger(&ch, &tau, &pre, &cfg, 7, 1);
        assert!((l.desired - 1.0).abs() < 1e-9);
        assert!(l.total - l.desired <= 1e-10 * l.desired);
    }

    #[test]
    fn no_cp_leaks() {
        let tau = vec![vec![0, 0]];
        let (ch, pre, cfg) = setup(&tau, 0, Combiner::Zf);
        let l = ofdm_link_ledger(&ch, &tau, &pre, &cfg, 7, 1);
        assert!(l.total - l.desired > 1e-6);
    }

    #[test]
    fn sufficient_cp_matches_frequency_domain() {
        let tau = vec![vec![0, 2], vec![3, 0]];
        let (ch, pre, cfg) = setup(&tau, 6, Combiner::Mrc);
        for (mb, ub) in [(0, 0), (5, 1), (31, 0)] {
            let led = ofdm_link_ledger(&ch, &tau, &pre, &cfg, mb, ub);
            let w = 2.0 * PI * mb as f64 / 32.0;
            let mut desired = 0.0;
            let mut total = 0.0;
            for k in 0..2 {
                let h = ch.freq_matrix(k, w);
                let g = &h * &pre.taps[mb][k] * cis(-w * tau[k][ub] as f64);
                desired += g[(ub, ub)].norm_sqr();
                total += (0..2).map(|u| g[(ub, u)].norm_sqr()).sum::<f64>();
            }
            assert!((led.desired - desired).abs() < 1e-6 * desired);
            assert!((led.total - total).abs() < 1e-6 * total);
        }
    }

    #[test]
    fn decomposition_matches_time_domain() {
        let tau = vec![vec![0, 5], vec![9, 0]];
        let (ch, pre, cfg) = setup(&tau, 4, Combiner::Zf);
        let modem = OfdmModem::new(32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let symbols: Vec<Vec<Vec<Complex64>>> = (0..3)
            .map(|_| (0..32).map(|_| (0..2).map(|_| complex_gaussian(&mut rng, 1.0)).collect()).collect())
            .collect();
        let streams: Vec<ApStream> = (0..2).map(|k| modem.transmit(&symbols, &pre, k)).collect();
        let ub = 0;
        let y = propagate(&ch, &tau, ub, &streams, 0, 3 * modem.symbol_len());
        let rx = modem.receive(&y, 3);
        // coefficients for symbol 1 from the linear map over symbols {0, 1}
        let mb = 11;
        let single = |s: usize, m: usize, u: usize| {
            let mut sym = vec![vec![vec![Complex64::new(0.0, 0.0); 2]; 32]; 3];
            sym[s][m][u] = Complex64::new(1.0, 0.0);
            let st: Vec<ApStream> = (0..2).map(|k| modem.transmit(&sym, &pre, k)).collect();
            let yy = propagate(&ch, &tau, ub, &st, 0, 3 * modem.symbol_len());
            modem.receive(&yy, 3)[1][mb]
        };
        let mut predicted = Complex64::new(0.0, 0.0);
        let mut power = 0.0;
        for s in 0..2 {
            for m in 0..32 {
                for u in 0..2 {
                    let c = single(s, m, u);
                    predicted += c * symbols[s][m][u];
                    power += c.norm_sqr();
                }
            }
        }
        assert!((predicted - rx[1][mb]).norm() < 1e-10);
        let led = ofdm_link_ledger(&ch, &tau, &pre, &cfg, mb, ub);
        assert!((led.total_coherent - power).abs() < 1e-9 * power);
        assert!((led.desired_coherent - single(1, mb, ub).norm_sqr()).abs() < 1e-9);
    }

    #[test]
    fn rate_prefactor() {
        assert!((ofdm_rate(&[1.0, 1.0], 64, 0) - 1.0).abs() < 1e-15);
        assert!((ofdm_rate(&[3.0], 64, 64) - 1.0).abs() < 1e-15);
        let base = ofdm_rate(&[2.0, 5.0], 64, 0);
        assert!((ofdm_rate(&[2.0, 5.0], 64, 16) - base * 64.0 / 80.0).abs() < 1e-15);
    }

    #[test]
    fn cp_choice_and_ties() {
        let (best, table) = optimal_cp(&[0, 1, 2, 3], |cp| Ok([1.0, 2.0, 2.0, 1.5][cp])).unwrap();
        assert_eq!(best, 1);
        assert_eq!(table.len(), 4);
        assert!(optimal_cp(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn flat_synchronous_prefers_no_cp() {
        let tau = vec![vec![0]];
        let mut ch = ChannelRealization::zeros(1, 1, 1, 2);
        ch.tap_mut(0, 0, 0).copy_from_slice(&[Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)]);
        let pre = design_ofdm_precoders(&ch, &tau, &[vec![1.0]], 16, Combiner::Zf).unwrap();
        let (best, _) = optimal_cp(&cp_search_set(0, 1, 16), |cp| {
            let cfg = OfdmConfig { num_subcarriers: 16, cp_len: cp, combiner: Combiner::Zf };
            let s = ofdm_link_ledger(&ch, &tau, &pre, &cfg, 3, 0).sinr(0.1);
            Ok(ofdm_rate(&[s], 16, cp))
        })
        .unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn modem_round_trip() {
        let modem = OfdmModem::new(16, 3);
        let mut ch = ChannelRealization::zeros(1, 1, 1, 1);
        ch.tap_mut(0, 0, 0)[0] = Complex64::new(1.0, 0.0);
        let pre = design_ofdm_precoders(&ch, &[vec![0]], &[vec![1.0]], 16, Combiner::Zf).unwrap();
        let sym: Vec<Vec<Vec<Complex64>>> = vec![(0..16).map(|m| vec![Complex64::new(m as f64, -1.0)]).collect()];
        let st = modem.transmit(&sym, &pre, 0);
        let rx = modem.receive(&st.antennas[0], 1);
        for m in 0..16 {
            assert!((rx[0][m] - sym[0][m][0]).norm() < 1e-12);
        }
        assert!(OfdmConfig { num_subcarriers: 16, cp_len: 16, combiner: Combiner::Zf }.validate().is_err());
    }
}
