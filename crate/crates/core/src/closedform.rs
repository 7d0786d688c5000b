//! Closed-form second-order statistics of the equivalent channel and the
//! resulting ergodic-rate approximation.
//!
//! For one subcarrier `m`, AP `k`, stream `u` and receiving user `ub`, the
//! equivalent channel is `v[n] = sum_j x_j[n - j C2]` with per-tap sequences
//! `x_j[l] = sum_p theta^j_p omega_p^T h_{k,ub}[l - tau_{k,ub}]` on the tap grid
//! `l in [0, L_seg)`. The blocks
//!
//! ```text
//! Vdot_ij[a, b]  = E{ x_i[a] x_j[b]^* }
//! Vddot_ij[a, b] = E{ x_i[a] x_j[b] }
//! ```
//!
//! are linear combinations of `theta^i_p theta^j_q` (conjugated on `j` for
//! `Vdot`) times the PDP outer products `Ddot_pq = lam_p lam_q^H`,
//! `Dddot_pq = lam_p lam_q^T` and the diagonal `Lam = diag(lambda[l - tau])`,
//! where `lam_p[l] = lambda[l - tau] e^{j w_p l}`. This module keeps that
//! structure: quadratic forms against filter kernels never build dense
//! matrices. Dense and real-stacked forms are available for checking.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::channel::{pdp_statistics, PdpStatistics, PowerDelayProfile};
use crate::error::{Error, Result};
use crate::linalg::{cis, complex_gaussian, inverse, CMatrix};
use crate::linkmetrics::{AmbiguityTable, CrossKernel, DelayGrid, InterferenceWindow, TargetKernels};
use crate::precoder::{theta_matrix, Combiner, DesignBins};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Structured `Vdot`/`Vddot` for one `(m, k, u, ub)`.
#[derive(Debug, Clone)]
pub struct VMatrix {
    c2: usize,
    lp: usize,
    seg_len: usize,
    /// `theta[i][p] = (Theta_m^{-1})_{i,p}`.
    theta: CMatrix,
    /// `lam[p][l]`.
    lam: Vec<Vec<Complex64>>,
    /// `lambda[l - tau]`.
    lam_diag: Vec<f64>,
    /// `Vdot` weights `[Ddot_pq, Lam, Ddot_pp, Ddot_qq]` at `p * lp + q`.
    dot: Vec<[Complex64; 4]>,
    /// `Vddot` weights `[Dddot_pq, Dddot_qp, Dddot_pp, Dddot_qq]`; `None` when zero.
    ddot: Option<Vec<[Complex64; 4]>>,
}

/// Inputs shared by both combiners for one `(m, k, u, ub)`.
#[derive(Debug, Clone, Copy)]
pub struct VContext<'a> {
    pub stats: &'a PdpStatistics,
    /// `Theta_m^{-1}`.
    pub theta_inv: &'a CMatrix,
    pub c2: usize,
    /// `beta_{k,ub} / beta_{k,u}`.
    pub beta_ratio: f64,
    /// `tau_{k,u}` of the stream's own target phases.
    pub tau_stream: usize,
    pub same_user: bool,
    pub antennas: usize,
}

impl VContext<'_> {
    fn lp(&self) -> usize {
        self.stats.bins.len()
    }

    /// `zeta_pq e^{j (w_p - w_q) tau_{k,u}}`.
    fn zeta_stream(&self, p: usize, q: usize) -> Complex64 {
        let b = &self.stats.bins;
        self.stats.zeta[p][q] * cis((b[p] - b[q]) * self.tau_stream as f64)
    }

    fn build(&self, dot: Vec<[Complex64; 4]>, ddot: Option<Vec<[Complex64; 4]>>) -> VMatrix {
        VMatrix {
            c2: self.c2,
            lp: self.lp(),
            seg_len: self.stats.lambda_shifted.len(),
            theta: self.theta_inv.clone(),
            lam: self.stats.lambda_mod.clone(),
            lam_diag: self.stats.lambda_shifted.clone(),
            dot,
            ddot,
        }
    }
}

/// MRC statistics for `omega_p = e^{j w_p tau_u} h~_u(w_p)^* / (N beta_u)`.
///
/// ```text
/// Vdot_ij  = r sum theta^i_p theta^j_q^* [ delta Ddot_pq + zeta^{k,u}_pq Lam / N ]
/// Vddot_ij = delta sum theta^i_p theta^j_q [ Dddot_pq + Dddot_qp / N ]
/// ```
pub fn vmatrix_mrc(ctx: &VContext) -> VMatrix {
    let lp = ctx.lp();
    let n = ctx.antennas as f64;
    let r = ctx.beta_ratio;
    let delta = if ctx.same_user { 1.0 } else { 0.0 };
    let mut dot = Vec::with_capacity(lp * lp);
    for p in 0..lp {
        for q in 0..lp {
            dot.push([
                (r * delta).into(),
                ctx.zeta_stream(p, q) * (r / n),
                ZERO,
                ZERO,
            ]);
        }
    }
    let ddot = ctx
        .same_user
        .then(|| vec![[1.0.into(), (1.0 / n).into(), ZERO, ZERO]; lp * lp]);
    ctx.build(dot, ddot)
}

/// ZF statistics from the first-order expansion of the Gram inverse.
///
/// ```text
/// Vdot_ij = r sum theta^i_p theta^j_q^* [ delta Ddot_pq
///     + (Lam - Ddot_pp - Ddot_qq + zeta^{k,ub}_qp Ddot_pq) / (zeta^{k,u}_qp (N - U)) ]
/// Vddot_ij = delta sum theta^i_p theta^j_q [ Dddot_pq
///     + (Dddot_qp - zeta^{k,ub}_qp Dddot_pp - zeta^{k,ub}_pq Dddot_qq + |zeta_pq|^2 Dddot_pq)
///       / (|zeta_pq|^2 (N - U)) ]
/// ```
pub fn vmatrix_zf(ctx: &VContext, users: usize) -> Result<VMatrix> {
    if ctx.antennas <= users {
        return Err(Error::ClosedFormUndefined {
            antennas: ctx.antennas,
            users,
        });
    }
    let lp = ctx.lp();
    let nu = (ctx.antennas - users) as f64;
    let r = ctx.beta_ratio;
    let delta = if ctx.same_user { 1.0 } else { 0.0 };
    let zk = &ctx.stats.zeta_k;
    let mut dot = Vec::with_capacity(lp * lp);
    for p in 0..lp {
        for q in 0..lp {
            let den = ctx.zeta_stream(q, p) * nu;
            let inv = Complex64::new(r, 0.0) / den;
            dot.push([
                delta * r + zk[q][p] * inv,
                inv,
                -inv,
                -inv,
            ]);
        }
    }
    let ddot = ctx.same_user.then(|| {
        let mut out = Vec::with_capacity(lp * lp);
        for p in 0..lp {
            for q in 0..lp {
                let mag = ctx.stats.zeta[p][q].norm_sqr();
                let w = 1.0 / (mag * nu);
                out.push([
                    (1.0 + 1.0 / nu).into(),
                    w.into(),
                    -zk[q][p] * w,
                    -zk[p][q] * w,
                ]);
            }
        }
        out
    });
    Ok(ctx.build(dot, ddot))
}

impl VMatrix {
    pub fn seg_len(&self) -> usize {
        self.seg_len
    }

    pub fn is_conjugate_only(&self) -> bool {
        self.ddot.is_none()
    }

    /// Sample grid of the folded matrices.
    pub fn grid(&self) -> DelayGrid {
        DelayGrid::new(self.lp / 2, self.c2, self.seg_len)
    }

    /// `S[p][r] = sum_i theta^i_r sum_a g[a + i C2] lam_p[a]` and
    /// `T[r][a] = sum_i theta^i_r g[a + i C2]`.
    fn projections(&self, kernel: &CrossKernel) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
        let lp = self.lp;
        let lp_bar = (lp / 2) as isize;
        let shifted: Vec<Vec<Complex64>> = (0..lp)
            .map(|i| {
                let off = (i as isize - lp_bar) * self.c2 as isize;
                (0..self.seg_len).map(|a| kernel.get(a as isize + off)).collect()
            })
            .collect();
        let s_tap: Vec<Vec<Complex64>> = shifted
            .iter()
            .map(|gi| {
                self.lam
                    .iter()
                    .map(|lp_seq| gi.iter().zip(lp_seq).map(|(g, l)| g * l).sum())
                    .collect()
            })
            .collect();
        let mut s = vec![vec![ZERO; lp]; lp];
        let mut t = vec![vec![ZERO; self.seg_len]; lp];
        for r in 0..lp {
            for i in 0..lp {
                let th = self.theta[(i, r)];
                for p in 0..lp {
                    s[p][r] += th * s_tap[i][p];
                }
                for (ta, g) in t[r].iter_mut().zip(&shifted[i]) {
                    *ta += th * g;
                }
            }
        }
        (s, t)
    }

    /// `(g^T Vdot g^*, g^T Vddot g)` on the folded grid.
    pub fn kernel_forms(&self, kernel: &CrossKernel) -> (f64, Complex64) {
        let lp = self.lp;
        let (s, t) = self.projections(kernel);
        let mut dot = ZERO;
        for p in 0..lp {
            for q in 0..lp {
                let w = &self.dot[p * lp + q];
                let mut term = w[0] * s[p][p] * s[q][q].conj();
                if w[1] != ZERO {
                    let lam_term: Complex64 = t[p]
                        .iter()
                        .zip(&t[q])
                        .zip(&self.lam_diag)
                        .map(|((a, b), &l)| a * b.conj() * l)
                        .sum();
                    term += w[1] * lam_term;
                }
                term += w[2] * s[p][p] * s[p][q].conj();
                term += w[3] * s[q][p] * s[q][q].conj();
                dot += term;
            }
        }
        let mut ddot = ZERO;
        if let Some(wd) = &self.ddot {
            for p in 0..lp {
                for q in 0..lp {
                    let w = &wd[p * lp + q];
                    ddot += w[0] * s[p][p] * s[q][q]
                        + w[1] * s[q][p] * s[p][q]
                        + w[2] * s[p][p] * s[p][q]
                        + w[3] * s[q][p] * s[q][q];
                }
            }
        }
        (dot.re, ddot)
    }

    /// `fdot^T V fdot = (g^T Vdot g^* + Re g^T Vddot g) / 2`.
    pub fn quadratic(&self, kernel: &CrossKernel) -> f64 {
        let (dot, ddot) = self.kernel_forms(kernel);
        0.5 * (dot + ddot.re)
    }

    /// Dense `(Vdot, Vddot)` folded onto [`VMatrix::grid`].
    pub fn dense(&self) -> (CMatrix, CMatrix) {
        let lp = self.lp;
        let g = self.grid().len;
        let seg = self.seg_len;
        let mut vdot = CMatrix::zeros(g, g);
        let mut vddot = CMatrix::zeros(g, g);
        for i in 0..lp {
            for j in 0..lp {
                for p in 0..lp {
                    for q in 0..lp {
                        let cd = self.theta[(i, p)] * self.theta[(j, q)].conj();
                        let cdd = self.theta[(i, p)] * self.theta[(j, q)];
                        let w = &self.dot[p * lp + q];
                        for a in 0..seg {
                            let na = a + i * self.c2;
                            for b in 0..seg {
                                let nb = b + j * self.c2;
                                let lam = &self.lam;
                                let mut x = w[0] * lam[p][a] * lam[q][b].conj()
                                    + w[2] * lam[p][a] * lam[p][b].conj()
                                    + w[3] * lam[q][a] * lam[q][b].conj();
                                if a == b {
                                    x += w[1] * self.lam_diag[a];
                                }
                                vdot[(na, nb)] += cd * x;
                                if let Some(wd) = &self.ddot {
                                    let w = &wd[p * lp + q];
                                    let y = w[0] * lam[p][a] * lam[q][b]
                                        + w[1] * lam[q][a] * lam[p][b]
                                        + w[2] * lam[p][a] * lam[p][b]
                                        + w[3] * lam[q][a] * lam[q][b];
                                    vddot[(na, nb)] += cdd * y;
                                }
                            }
                        }
                    }
                }
            }
        }
        (vdot, vddot)
    }

    /// Real-stacked `E{vdot vdot^T}`.
    pub fn real_stacked(&self) -> DMatrix<f64> {
        let (a, b) = self.dense();
        fold_real(&a, &b)
    }
}

/// `V = 1/2 [[Re(Vd + Vdd), Im(Vdd - Vd)], [Im(Vd + Vdd), Re(Vd - Vdd)]]`,
/// the covariance of `[Re v; Im v]` given `Vd = E{v v^H}`, `Vdd = E{v v^T}`.
pub fn fold_real(vdot: &CMatrix, vddot: &CMatrix) -> DMatrix<f64> {
    let n = vdot.nrows();
    DMatrix::from_fn(2 * n, 2 * n, |r, c| {
        let (a, b) = (r % n, c % n);
        let d = vdot[(a, b)];
        let dd = vddot[(a, b)];
        0.5 * match (r < n, c < n) {
            (true, true) => (d + dd).re,
            (true, false) => (dd - d).im,
            (false, true) => (d + dd).im,
            (false, false) => (d - dd).re,
        }
    })
}

/// Expected symbol powers around `(mb, ub)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedLedger {
    pub target_subcarrier: usize,
    pub target_user: usize,
    /// `(m, i, u, E{E_{m,i}^u})`.
    pub entries: Vec<(usize, i64, usize, f64)>,
    pub desired: f64,
    pub total: f64,
}

impl ExpectedLedger {
    pub fn interference(&self) -> f64 {
        (self.total - self.desired).max(0.0)
    }
}

/// Large-scale description of a link set: `tau[k][u]`, `beta[k][u]`.
#[derive(Debug, Clone, Copy)]
pub struct LargeScale<'a> {
    pub tau: &'a [Vec<usize>],
    pub beta: &'a [Vec<f64>],
}

/// System-level inputs of the closed form that do not change between targets.
#[derive(Debug, Clone, Copy)]
pub struct ClosedFormSetup<'a> {
    pub pdp: &'a PowerDelayProfile,
    pub bins: &'a DesignBins,
    pub c2: usize,
    pub combiner: Combiner,
    pub antennas: usize,
}

/// `E{E_{m,i}^u} = sum_k fdot^T V_m^{k,u} fdot` over the window.
pub fn expected_powers(
    setup: &ClosedFormSetup,
    links: LargeScale,
    table: &AmbiguityTable,
    mb: usize,
    ub: usize,
    window: &InterferenceWindow,
) -> Result<ExpectedLedger> {
    let grid = DelayGrid::for_user(links.tau, ub, setup.pdp.len(), setup.bins.lp_bar(), setup.c2);
    let kernels = TargetKernels::new(table, mb, window, &grid);
    expected_powers_with(setup, links, &kernels, ub)
}

/// [`expected_powers`] with precomputed kernels.
pub fn expected_powers_with(
    setup: &ClosedFormSetup,
    links: LargeScale,
    kernels: &TargetKernels,
    ub: usize,
) -> Result<ExpectedLedger> {
    let bins = setup.bins;
    let c2 = setup.c2;
    let m_count = bins.num_subcarriers();
    let mb = kernels.target_subcarrier;
    let k_count = links.tau.len();
    let users = links.tau.first().map_or(0, |r| r.len());
    let grid = DelayGrid::for_user(links.tau, ub, setup.pdp.len(), bins.lp_bar(), c2);
    let seg_len = grid.len - 2 * bins.lp_bar() * c2;

    let mut entries = Vec::with_capacity(kernels.kernels.len() * users);
    let mut desired = 0.0;
    let mut total = 0.0;
    for m in kernels.subcarriers() {
        let omegas = bins.omegas(m);
        let theta_inv = inverse(&theta_matrix(&omegas, c2)).ok_or(Error::IllConditioned(f64::INFINITY))?;
        let group: Vec<&(usize, i64, CrossKernel)> = kernels.kernels.iter().filter(|e| e.0 == m).collect();
        let mut acc = vec![0.0; group.len() * users];
        for k in 0..k_count {
            let stats = pdp_statistics(setup.pdp, m_count, &omegas, links.tau[k][ub], seg_len);
            for u in 0..users {
                let ctx = VContext {
                    stats: &stats,
                    theta_inv: &theta_inv,
                    c2,
                    beta_ratio: links.beta[k][ub] / links.beta[k][u],
                    tau_stream: links.tau[k][u],
                    same_user: u == ub,
                    antennas: setup.antennas,
                };
                let v = match setup.combiner {
                    Combiner::Zf => vmatrix_zf(&ctx, users)?,
                    Combiner::Mrc | Combiner::MrcStatistical => vmatrix_mrc(&ctx),
                };
                for (gi, entry) in group.iter().enumerate() {
                    acc[gi * users + u] += v.quadratic(&entry.2);
                }
            }
        }
        for (gi, entry) in group.iter().enumerate() {
            let i = entry.1;
            for u in 0..users {
                let e = acc[gi * users + u];
                if m == mb && i == 0 && u == ub {
                    desired = e;
                }
                total += e;
                entries.push((m, i, u, e));
            }
        }
    }
    Ok(ExpectedLedger {
        target_subcarrier: mb,
        target_user: ub,
        entries,
        desired,
        total,
    })
}

/// `log2(1 + E{E_des} / (E{sum E} - E{E_des} + sigma^2 / 2))`.
pub fn rate_closed_form(ledger: &ExpectedLedger, noise_var: f64) -> Result<f64> {
    if ledger.desired <= 0.0 {
        return Ok(0.0);
    }
    let den = ledger.interference() + noise_var / 2.0;
    if !(den > 0.0) {
        return Err(Error::NonPositiveDenominator);
    }
    Ok((1.0 + ledger.desired / den).log2())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WishartCheck {
    pub estimate: f64,
    pub expected: f64,
    pub relative_error: f64,
}

/// Monte Carlo `E{Tr((G G^H)^{-1})}` for `q x p` standard complex Gaussian
/// `G` against `q / (p - q)`.
pub fn wishart_trace_check<R: Rng + ?Sized>(p: usize, q: usize, trials: usize, rng: &mut R) -> Result<WishartCheck> {
    if p <= q {
        return Err(Error::ClosedFormUndefined { antennas: p, users: q });
    }
    if trials == 0 {
        return Err(Error::EmptyStream);
    }
    let mut sum = 0.0;
    for _ in 0..trials {
        let g = CMatrix::from_fn(q, p, |_, _| complex_gaussian(rng, 1.0));
        let inv = inverse(&(&g * g.adjoint())).ok_or(Error::IllConditioned(f64::INFINITY))?;
        sum += inv.trace().re;
    }
    let estimate = sum / trials as f64;
    let expected = q as f64 / (p - q) as f64;
    Ok(WishartCheck {
        estimate,
        expected,
        relative_error: (estimate - expected).abs() / expected,
    })
}
