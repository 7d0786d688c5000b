//! PHYDYAS prototype filter and FBMC/OQAM synthesis/analysis filter banks.
//!
//! Subcarrier filters are `f_m[l] = f[l] e^{j 2 pi m l / M}`, modulated from
//! the first filter tap. A symbol fed at block `n` with hop `D` lands on
//! `f_m[l - n D]`. The OQAM hop is `M/2`; the multiple-interpolation
//! transmitter feeds blocks at a finer hop `C2`.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeFilter {
    taps: Vec<f64>,
    num_subcarriers: usize,
    overlap: usize,
}

impl PrototypeFilter {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    /// Overlapping factor `kappa`.
    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Magnitude of the prototype's DTFT at `w` (radians/sample).
    pub fn response_magnitude(&self, w: f64) -> f64 {
        self.taps
            .iter()
            .enumerate()
            .map(|(l, &f)| f * Complex64::from_polar(1.0, -w * l as f64))
            .sum::<Complex64>()
            .norm()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("l,f\n");
        for (l, f) in self.taps.iter().enumerate() {
            out.push_str(&format!("{l},{f:.17e}\n"));
        }
        out
    }
}

/// PHYDYAS frequency-sampling coefficients `H_1..H_{kappa-1}` (`H_0 = 1`).
fn phydyas_coefficients(overlap: usize) -> Result<&'static [f64]> {
    match overlap {
        2 => Ok(&[std::f64::consts::FRAC_1_SQRT_2]),
        3 => Ok(&[0.911_438, 0.411_438]),
        4 => Ok(&[0.971_960, std::f64::consts::FRAC_1_SQRT_2, 0.235_147]),
        k => Err(Error::UnsupportedOverlap(k)),
    }
}

/// Unit-energy PHYDYAS prototype of length `kappa * M`.
///
/// `f[l] = 1 + 2 sum_k (-1)^k H_k cos(2 pi k l / (kappa M))`, which is
/// symmetric about `kappa M / 2` (`f[l] = f[kappa M - l]`, `f[0] ~ 0`). The
/// centre falls on a multiple of `M/2`, so modulating from the first tap keeps
/// the intrinsic interference purely imaginary.
pub fn phydyas_prototype(num_subcarriers: usize, overlap: usize) -> Result<PrototypeFilter> {
    if num_subcarriers < 4 || !num_subcarriers.is_power_of_two() {
        return Err(Error::UnsupportedSubcarriers(num_subcarriers));
    }
    let coeffs = phydyas_coefficients(overlap)?;
    let len = overlap * num_subcarriers;
    let mut taps: Vec<f64> = (0..len)
        .map(|l| {
            let mut v = 1.0;
            for (k, &h) in coeffs.iter().enumerate() {
                let k = k + 1;
                let sign = if k % 2 == 1 { -1.0 } else { 1.0 };
                v += 2.0 * sign * h * (2.0 * PI * (k * l) as f64 / len as f64).cos();
            }
            v
        })
        .collect();
    let energy: f64 = taps.iter().map(|f| f * f).sum();
    let scale = energy.sqrt().recip();
    taps.iter_mut().for_each(|f| *f *= scale);
    Ok(PrototypeFilter {
        taps,
        num_subcarriers,
        overlap,
    })
}

/// `e^{j phi_{m,i}}` with `phi_{m,i} = pi/2 (m + i)`, evaluated exactly.
pub fn oqam_phase(m: i64, i: i64) -> Complex64 {
    match (m + i).rem_euclid(4) {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// Splits complex symbols into consecutive real half-slots `[Re, Im, ...]`.
pub fn oqam_map(qam: &[Complex64]) -> Vec<f64> {
    qam.iter().flat_map(|z| [z.re, z.im]).collect()
}

/// Inverse of [`oqam_map`]; a trailing odd element is ignored.
pub fn oqam_demap(oqam: &[f64]) -> Vec<Complex64> {
    oqam.chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect()
}

/// Real OQAM symbols `a[m][i][u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OqamFrame {
    num_subcarriers: usize,
    num_slots: usize,
    num_users: usize,
    data: Vec<f64>,
}

impl OqamFrame {
    pub fn zeros(num_subcarriers: usize, num_slots: usize, num_users: usize) -> Self {
        Self {
            num_subcarriers,
            num_slots,
            num_users,
            data: vec![0.0; num_subcarriers * num_slots * num_users],
        }
    }

    /// Builds a frame from unit-power QAM symbols `qam[m][n][u]`: each complex
    /// symbol occupies slots `2n, 2n+1`, scaled by `sqrt 2` so every real
    /// OQAM symbol has unit power.
    pub fn from_qam(qam: &[Vec<Vec<Complex64>>]) -> Self {
        let num_subcarriers = qam.len();
        let num_qam = qam.first().map_or(0, |v| v.len());
        let num_users = qam
            .first()
            .and_then(|v| v.first())
            .map_or(0, |v| v.len());
        let mut frame = Self::zeros(num_subcarriers, 2 * num_qam, num_users);
        for (m, per_m) in qam.iter().enumerate() {
            for u in 0..num_users {
                let seq: Vec<Complex64> = per_m.iter().map(|s| s[u]).collect();
                for (i, a) in oqam_map(&seq).into_iter().enumerate() {
                    frame.set(m, i, u, SQRT_2 * a);
                }
            }
        }
        frame
    }

    /// Reassembles `qam[m][n][u]`, undoing the `sqrt 2` scaling.
    pub fn to_qam(&self) -> Vec<Vec<Vec<Complex64>>> {
        (0..self.num_subcarriers)
            .map(|m| {
                let per_user: Vec<Vec<Complex64>> = (0..self.num_users)
                    .map(|u| {
                        let seq: Vec<f64> = (0..self.num_slots)
                            .map(|i| self.get(m, i, u) / SQRT_2)
                            .collect();
                        oqam_demap(&seq)
                    })
                    .collect();
                let n = per_user.first().map_or(0, |v| v.len());
                (0..n)
                    .map(|i| per_user.iter().map(|v| v[i]).collect())
                    .collect()
            })
            .collect()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }
    pub fn num_slots(&self) -> usize {
        self.num_slots
    }
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    #[inline]
    fn idx(&self, m: usize, i: usize, u: usize) -> usize {
        (m * self.num_slots + i) * self.num_users + u
    }

    #[inline]
    pub fn get(&self, m: usize, i: usize, u: usize) -> f64 {
        self.data[self.idx(m, i, u)]
    }

    #[inline]
    pub fn set(&mut self, m: usize, i: usize, u: usize, v: f64) {
        let idx = self.idx(m, i, u);
        self.data[idx] = v;
    }

    /// Symbol vector of all users at `(m, i)`.
    pub fn users(&self, m: usize, i: usize) -> &[f64] {
        let o = self.idx(m, i, 0);
        &self.data[o..o + self.num_users]
    }
}

/// FFT-based synthesis/analysis bank around one prototype.
#[derive(Clone)]
pub struct FilterBank {
    proto: PrototypeFilter,
    ifft: Arc<dyn Fft<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FilterBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterBank")
            .field("num_subcarriers", &self.proto.num_subcarriers)
            .field("overlap", &self.proto.overlap)
            .finish()
    }
}

impl FilterBank {
    pub fn new(proto: PrototypeFilter) -> Self {
        let mut planner = FftPlanner::new();
        let m = proto.num_subcarriers;
        Self {
            ifft: planner.plan_fft_inverse(m),
            fft: planner.plan_fft_forward(m),
            proto,
        }
    }

    pub fn prototype(&self) -> &PrototypeFilter {
        &self.proto
    }

    pub fn num_subcarriers(&self) -> usize {
        self.proto.num_subcarriers
    }

    /// Output length for `num_blocks` blocks at `hop`.
    pub fn synthesis_len(&self, num_blocks: usize, hop: usize) -> usize {
        if num_blocks == 0 {
            0
        } else {
            (num_blocks - 1) * hop + self.proto.len()
        }
    }

    /// `x[l] = sum_n sum_m f_m[l - n hop] blocks[n][m]`.
    ///
    /// Each block costs one length-`M` IFFT whose periodic extension is
    /// windowed by the prototype and overlap-added.
    pub fn synthesize(&self, blocks: &[Vec<Complex64>], hop: usize) -> Result<Vec<Complex64>> {
        let m = self.num_subcarriers();
        let taps = &self.proto.taps;
        let mut out = vec![Complex64::new(0.0, 0.0); self.synthesis_len(blocks.len(), hop)];
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for (n, block) in blocks.iter().enumerate() {
            if block.len() != m {
                return Err(Error::LengthMismatch {
                    expected: m,
                    got: block.len(),
                });
            }
            if block.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
                continue;
            }
            buf.copy_from_slice(block);
            self.ifft.process(&mut buf);
            let base = n * hop;
            for (l, &f) in taps.iter().enumerate() {
                out[base + l] += f * buf[l % m];
            }
        }
        Ok(out)
    }

    /// Matched-filter outputs `z[i][m] = sum_l y[l] f_m^*[l - i M/2]` for
    /// `i = 0..num_slots`; samples past the end of `y` count as zero.
    pub fn analyze(&self, y: &[Complex64], num_slots: usize) -> Vec<Vec<Complex64>> {
        let m = self.num_subcarriers();
        let hop = m / 2;
        let taps = &self.proto.taps;
        (0..num_slots)
            .map(|i| {
                let mut buf = vec![Complex64::new(0.0, 0.0); m];
                let base = i * hop;
                for (l, &f) in taps.iter().enumerate() {
                    if let Some(&s) = y.get(base + l) {
                        buf[l % m] += f * s;
                    }
                }
                self.fft.process(&mut buf);
                buf
            })
            .collect()
    }

    /// OQAM estimates `a^[m][i] = Re{e^{-j phi_{m,i}} z[i][m]}`, no equalization.
    pub fn demodulate(&self, y: &[Complex64], num_slots: usize) -> Vec<Vec<f64>> {
        let z = self.analyze(y, num_slots);
        let m_count = self.num_subcarriers();
        (0..m_count)
            .map(|m| {
                (0..num_slots)
                    .map(|i| (oqam_phase(m as i64, i as i64).conj() * z[i][m]).re)
                    .collect()
            })
            .collect()
    }
}

/// Direct double-sum evaluation of the synthesis bank (reference path).
pub fn synthesize_direct(
    blocks: &[Vec<Complex64>],
    hop: usize,
    proto: &PrototypeFilter,
) -> Vec<Complex64> {
    let m = proto.num_subcarriers;
    let len = if blocks.is_empty() {
        0
    } else {
        (blocks.len() - 1) * hop + proto.len()
    };
    let mut out = vec![Complex64::new(0.0, 0.0); len];
    for (l, o) in out.iter_mut().enumerate() {
        for (n, block) in blocks.iter().enumerate() {
            let base = n * hop;
            if l < base || l - base >= proto.len() {
                continue;
            }
            let t = l - base;
            for (mm, &s) in block.iter().enumerate() {
                let phase = 2.0 * PI * ((mm * t) % m) as f64 / m as f64;
                *o += proto.taps[t] * Complex64::from_polar(1.0, phase) * s;
            }
        }
    }
    out
}

/// Phase-rotated OQAM blocks at hop `M/2`: `blocks[i][m] = a[m][i][u] e^{j phi_{m,i}}`.
pub fn oqam_blocks(frame: &OqamFrame, user: usize) -> Vec<Vec<Complex64>> {
    (0..frame.num_slots())
        .map(|i| {
            (0..frame.num_subcarriers())
                .map(|m| frame.get(m, i, user) * oqam_phase(m as i64, i as i64))
                .collect()
        })
        .collect()
}
