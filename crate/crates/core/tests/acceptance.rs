//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line with
//! the measured figures; run with `--nocapture` to see them.

use std::f64::consts::PI;
use std::sync::OnceLock;

use cellfree_fbmc::channel::{draw_channel, load_pdp, pdp_statistics, ChannelRealization, PdpSpec};
use cellfree_fbmc::closedform::{vmatrix_mrc, vmatrix_zf, wishart_trace_check, VContext};
use cellfree_fbmc::filterbank::{oqam_blocks, oqam_phase, phydyas_prototype, FilterBank, OqamFrame};
use cellfree_fbmc::geometry::{max_time_offset, place_network, sample_interval, GeometryConfig, NetworkLayout};
use cellfree_fbmc::harness::{run, ExperimentKind, ExperimentPlan, RateReport, Scheme, SystemConfig, Waveform};
use cellfree_fbmc::linalg::{cis, complex_gaussian, frobenius, inverse, CMatrix};
use cellfree_fbmc::linkmetrics::{effective_v, DelayGrid};
use cellfree_fbmc::precoder::{
    design_precoders, phase_targets, tap_response, theta_matrix, transmit_multistage, Combiner, DesignBins,
    InterpolationPlan,
};
use cellfree_fbmc::rng::{domain, trial_rng};
use cellfree_fbmc::Complex64;
use nalgebra::DMatrix;
use rand::Rng;

fn report(n: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {n} ({name}): {} | {detail}", if pass { "PASS" } else { "FAIL" });
}

const PZF: Scheme = Scheme::new(Waveform::Proposed, Combiner::Zf);
const PMRC: Scheme = Scheme::new(Waveform::Proposed, Combiner::Mrc);
const CZF: Scheme = Scheme::new(Waveform::Conventional, Combiner::Zf);
const OZF: Scheme = Scheme::new(Waveform::Ofdm, Combiner::Zf);

/// Desk scale: M = 64, K = 4, U = 2, N = 32, 30 kHz, EVA.
fn desk_system() -> SystemConfig {
    let mut sys = SystemConfig {
        num_subcarriers: 64,
        num_antennas: 32,
        ..SystemConfig::default()
    };
    sys.geometry.num_aps = 4;
    sys.geometry.num_users = 2;
    sys
}

/// Random layout and EVA channel at M = 64 for bin-level checks.
fn random_case(
    case: u64,
    aps: usize,
    users: usize,
    antennas: usize,
) -> (NetworkLayout, ChannelRealization) {
    let ts = sample_interval(64, 30e3);
    let geo = GeometryConfig {
        num_aps: aps,
        num_users: users,
        ..GeometryConfig::default()
    };
    let layout = place_network(&geo, ts, &mut trial_rng(100, domain::LAYOUT, case));
    let pdp = load_pdp(&PdpSpec::default(), ts).unwrap();
    let ch = draw_channel(&pdp, &layout, antennas, &mut trial_rng(100, domain::CHANNEL, case));
    (layout, ch)
}

#[test]
fn criterion_01_zf_bin_exactness() {
    let m_count = 64;
    let bins = DesignBins::new(m_count, 1);
    let plan = InterpolationPlan::new(m_count, 2).unwrap();
    let all: Vec<usize> = (0..m_count).collect();
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (layout, ch) = random_case(case, 2, 4, 16);
        let set = design_precoders(&ch, &layout.tau, &layout.beta, &all, &bins, plan, Combiner::Zf).unwrap();
        for sp in set.subcarriers() {
            for (k, per_bin) in sp.combiners.iter().enumerate() {
                for (p, omega) in per_bin.iter().enumerate() {
                    let w = bins.omega(sp.subcarrier, p);
                    let lambda = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(phase_targets(w, &layout.tau[k])));
                    worst = worst.max(frobenius(&(ch.freq_matrix(k, w) * omega - lambda)));
                }
            }
        }
    }
    let pass = worst <= 1e-10;
    report(1, "ZF bin-exactness", pass, format!("max ||H Omega - Lambda||_F = {worst:.3e} (tol 1e-10) over 100 channels"));
    assert!(pass);
}

#[test]
fn criterion_02_recombination_identity() {
    let m_count = 64;
    let mut worst: f64 = 0.0;
    let mut rng = trial_rng(2, domain::SYMBOLS, 0);
    for case in 0..100u64 {
        let lp_bar = rng.random_range(0..=2usize);
        let c1 = 1 << rng.random_range(0..=3u32);
        let combiner = if case % 2 == 0 { Combiner::Zf } else { Combiner::Mrc };
        let bins = DesignBins::new(m_count, lp_bar);
        let plan = InterpolationPlan::new(m_count, c1).unwrap();
        let subcarriers: Vec<usize> = (0..4).map(|_| rng.random_range(0..m_count)).collect();
        let (layout, ch) = random_case(1000 + case, 2, 2, 8);
        let set = design_precoders(&ch, &layout.tau, &layout.beta, &subcarriers, &bins, plan, combiner).unwrap();
        for sp in set.subcarriers() {
            for (taps, per_bin) in sp.taps.iter().zip(&sp.combiners) {
                for (p, omega) in per_bin.iter().enumerate() {
                    let w = bins.omega(sp.subcarrier, p);
                    let scale = frobenius(omega).max(1.0);
                    worst = worst.max(frobenius(&(tap_response(taps, w, plan.c2) - omega)) / scale);
                }
            }
        }
    }
    let pass = worst <= 1e-10;
    report(2, "recombination identity", pass, format!("max relative error {worst:.3e} (tol 1e-10) over 100 cases"));
    assert!(pass);
}

#[test]
fn criterion_03_polyphase_equivalence() {
    let m_count = 64;
    let proto = phydyas_prototype(m_count, 4).unwrap();
    let bank = FilterBank::new(proto.clone());
    let mut worst: f64 = 0.0;
    for (case, c1) in [(0u64, 1usize), (1, 2), (2, 4)] {
        let bins = DesignBins::new(m_count, 1);
        let plan = InterpolationPlan::new(m_count, c1).unwrap();
        // unit-variance taps keep the precoder entries O(1)
        let mut rng = trial_rng(3, domain::SYMBOLS, case);
        let mut ch = ChannelRealization::zeros(1, 2, 6, 4);
        for u in 0..2 {
            for l in 0..6 {
                for z in ch.tap_mut(0, u, l) {
                    *z = complex_gaussian(&mut rng, 1.0 / 6.0);
                }
            }
        }
        let tau = vec![vec![rng.random_range(0..=12usize), rng.random_range(0..=12usize)]];
        let beta = vec![vec![1.0, 1.0]];
        let all: Vec<usize> = (0..m_count).collect();
        let set = design_precoders(&ch, &tau, &beta, &all, &bins, plan, Combiner::Zf).unwrap();
        let slots = 6;
        let mut frame = OqamFrame::zeros(m_count, slots, 2);
        for m in 0..m_count {
            for i in 0..slots {
                for u in 0..2 {
                    frame.set(m, i, u, rng.random_range(-1.0..1.0));
                }
            }
        }
        let x = transmit_multistage(&frame, &set, 0, &bank).unwrap();
        // x[n] = sum_m sum_i sum_j f_m[n - (i C1 + j) C2] P_m[j] e^{j phi_{m,i}} a_{m,i}
        let taps = proto.taps();
        let lp_bar = 1i64;
        let (c1, c2) = (plan.c1 as i64, plan.c2 as i64);
        for (t, n) in (x.start..x.start + x.len() as isize).enumerate() {
            let n = n as i64;
            let mut acc = vec![Complex64::new(0.0, 0.0); 4];
            for m in 0..m_count {
                let p = &set.get(m).unwrap().taps[0];
                for i in 0..slots as i64 {
                    let sym = oqam_phase(m as i64, i);
                    for j in -lp_bar..=lp_bar {
                        let l = n - (i * c1 + j) * c2;
                        if l < 0 || l >= taps.len() as i64 {
                            continue;
                        }
                        let f = taps[l as usize] * cis(2.0 * PI * ((m as i64 * l) % m_count as i64) as f64 / m_count as f64);
                        let tap = &p[(j + lp_bar) as usize];
                        for (a, acc_a) in acc.iter_mut().enumerate() {
                            for u in 0..2 {
                                *acc_a += f * tap[(a, u)] * sym * frame.get(m, i as usize, u);
                            }
                        }
                    }
                }
            }
            for (a, acc_a) in acc.iter().enumerate() {
                worst = worst.max((x.antennas[a][t] - acc_a).norm());
            }
        }
    }
    let pass = worst <= 1e-12;
    report(3, "polyphase equivalence", pass, format!("max |multistage - direct| = {worst:.3e} (tol 1e-12), C1 in {{1,2,4}}"));
    assert!(pass);
}

#[test]
fn criterion_04_near_perfect_reconstruction() {
    let m_count = 64;
    let bank = FilterBank::new(phydyas_prototype(m_count, 4).unwrap());
    let slots = 40;
    let mut frame = OqamFrame::zeros(m_count, slots, 1);
    let mut rng = trial_rng(4, domain::SYMBOLS, 0);
    for m in 0..m_count {
        for i in 0..slots {
            frame.set(m, i, 0, if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
    }
    let y = bank.synthesize(&oqam_blocks(&frame, 0), m_count / 2).unwrap();
    let est = bank.demodulate(&y, slots);
    let (mut sig, mut err) = (0.0, 0.0);
    for m in 0..m_count {
        for i in 0..slots {
            let a = frame.get(m, i, 0);
            sig += a * a;
            err += (est[m][i] - a).powi(2);
        }
    }
    let sir = 10.0 * (sig / err).log10();
    let pass = sir >= 50.0;
    report(4, "near-perfect reconstruction", pass, format!("back-to-back SIR {sir:.2} dB (need >= 50), kappa=4, M=64"));
    assert!(pass);
}

#[test]
fn criterion_05_max_time_offset() {
    let ts = sample_interval(256, 30e3);
    let tau = max_time_offset(1000.0, ts);
    let pass = (50..=52).contains(&tau);
    report(5, "tau_max", pass, format!("tau_max = {tau} samples (2R/(c T_s) = {:.3}; band [50, 52])", 2000.0 / (2.997_924_58e8 * ts)));
    assert!(pass);
}

#[test]
fn criterion_06_wishart_identity() {
    let mut rng = trial_rng(6, domain::CHANNEL, 0);
    let w = wishart_trace_check(16, 4, 10_000, &mut rng).unwrap();
    let pass = w.relative_error <= 0.02 && (w.expected - 1.0 / 3.0).abs() < 1e-15;
    report(
        6,
        "Wishart identity",
        pass,
        format!("estimate {:.5} vs 1/3, relative error {:.4} (tol 0.02)", w.estimate, w.relative_error),
    );
    assert!(pass);
}

struct VOracle {
    max_abs_z: f64,
    outside_3se: usize,
    entries: usize,
    rel_frobenius: f64,
}

/// Sample mean of `vdot vdot^T` against the closed-form `V` for every AP and
/// stream at one target user and subcarrier.
fn v_oracle(combiner: Combiner, antennas: usize, trials: usize, seed: u64) -> VOracle {
    let m_count = 64;
    let ts = sample_interval(m_count, 30e3);
    let geo = GeometryConfig {
        num_aps: 2,
        num_users: 2,
        ..GeometryConfig::default()
    };
    let layout = place_network(&geo, ts, &mut trial_rng(seed, domain::LAYOUT, 0));
    let pdp = load_pdp(&PdpSpec::default(), ts).unwrap();
    let bins = DesignBins::new(m_count, 1);
    let plan = InterpolationPlan::new(m_count, 2).unwrap();
    let (m, ub) = (32usize, 0usize);
    let grid = DelayGrid::for_user(&layout.tau, ub, pdp.len(), 1, plan.c2);
    let seg = grid.len - 2 * plan.c2;
    let g2 = 2 * grid.len;
    let pairs: Vec<(usize, usize)> = (0..2).flat_map(|k| (0..2).map(move |u| (k, u))).collect();
    let mut sum = vec![DMatrix::<f64>::zeros(g2, g2); pairs.len()];
    let mut sq = vec![DMatrix::<f64>::zeros(g2, g2); pairs.len()];
    for t in 0..trials {
        let mut rng = trial_rng(seed, domain::CHANNEL, t as u64);
        let ch = draw_channel(&pdp, &layout, antennas, &mut rng);
        let set = design_precoders(&ch, &layout.tau, &layout.beta, &[m], &bins, plan, combiner).unwrap();
        let sp = set.get(m).unwrap();
        for (pi, &(k, u)) in pairs.iter().enumerate() {
            let v = effective_v(&sp.taps[k], ch.link(k, ub), layout.tau[k][ub], plan.c2, &grid);
            let x: Vec<f64> = v[u].iter().map(|z| z.re).chain(v[u].iter().map(|z| z.im)).collect();
            for r in 0..g2 {
                if x[r] == 0.0 {
                    continue;
                }
                for c in 0..g2 {
                    let p = x[r] * x[c];
                    sum[pi][(r, c)] += p;
                    sq[pi][(r, c)] += p * p;
                }
            }
        }
    }
    let omegas = bins.omegas(m);
    let theta_inv = inverse(&theta_matrix(&omegas, plan.c2)).unwrap();
    let n = trials as f64;
    let mut out = VOracle { max_abs_z: 0.0, outside_3se: 0, entries: 0, rel_frobenius: 0.0 };
    let (mut diff_f, mut ref_f) = (0.0, 0.0);
    for (pi, &(k, u)) in pairs.iter().enumerate() {
        let stats = pdp_statistics(&pdp, m_count, &omegas, layout.tau[k][ub], seg);
        let ctx = VContext {
            stats: &stats,
            theta_inv: &theta_inv,
            c2: plan.c2,
            beta_ratio: layout.beta[k][ub] / layout.beta[k][u],
            tau_stream: layout.tau[k][u],
            same_user: u == ub,
            antennas,
        };
        let v = match combiner {
            Combiner::Zf => vmatrix_zf(&ctx, 2).unwrap(),
            _ => vmatrix_mrc(&ctx),
        };
        let theory = v.real_stacked();
        let scale = theory.abs().max();
        let mut pd = 0.0;
        let mut pr = 0.0;
        for r in 0..g2 {
            for c in 0..g2 {
                let mean = sum[pi][(r, c)] / n;
                let var = (sq[pi][(r, c)] / n - mean * mean).max(0.0) * n / (n - 1.0);
                let se = (var / n).sqrt();
                let d = mean - theory[(r, c)];
                pd += d * d;
                pr += mean * mean;
                out.entries += 1;
                if se == 0.0 {
                    // structurally zero in every realization
                    if d.abs() > 1e-12 * scale.max(1.0) {
                        out.outside_3se += 1;
                        out.max_abs_z = f64::INFINITY;
                    }
                    continue;
                }
                let z = d.abs() / se;
                out.max_abs_z = out.max_abs_z.max(z);
                if z > 3.0 {
                    out.outside_3se += 1;
                }
            }
        }
        diff_f += pd;
        ref_f += pr;
    }
    out.rel_frobenius = (diff_f / ref_f).sqrt();
    out
}

#[test]
fn criterion_07_vmatrix_oracle() {
    let trials = 10_000;
    let mrc = v_oracle(Combiner::Mrc, 8, trials, 7);
    let zf = v_oracle(Combiner::Zf, 16, trials, 7);
    let stat = v_oracle(Combiner::MrcStatistical, 8, trials, 7);
    let pass_mrc = mrc.outside_3se == 0;
    let pass_zf = zf.rel_frobenius <= 0.05;
    report(
        7,
        "V-matrix oracle",
        pass_mrc && pass_zf,
        format!(
            "MRC: {}/{} entries beyond 3 SE, max |z| {:.2}, rel-F {:.4}; ZF: rel-F {:.4} (tol 0.05); \
             large-antenna MRC diagnostic: {}/{} beyond 3 SE, max |z| {:.2}, rel-F {:.4}",
            mrc.outside_3se, mrc.entries, mrc.max_abs_z, mrc.rel_frobenius, zf.rel_frobenius,
            stat.outside_3se, stat.entries, stat.max_abs_z, stat.rel_frobenius
        ),
    );
    assert!(pass_zf, "ZF closed form off by {:.4}", zf.rel_frobenius);
    assert!(pass_mrc, "MRC closed form: {} entries beyond 3 SE", mrc.outside_3se);
}

/// Rate sweep shared by criteria 8 and 9: 5 layouts x 500 channels.
fn desk_rate_report() -> &'static RateReport {
    static REPORT: OnceLock<RateReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let plan = ExperimentPlan {
            kind: ExperimentKind::RateVsSnr,
            snr_db: vec![0.0, 10.0, 20.0],
            outer_trials: 5,
            inner_trials: 500,
            master_seed: 8,
            schemes: vec![PZF, PMRC, CZF, OZF],
            ..ExperimentPlan::default()
        };
        run(&desk_system(), &plan).unwrap()
    })
}

#[test]
fn criterion_08_theory_vs_monte_carlo() {
    let r = desk_rate_report();
    let mut pass = true;
    let mut parts = Vec::new();
    for scheme in [PZF, PMRC] {
        for rho in [0.0, 10.0, 20.0] {
            let a = r.point(scheme, rho).unwrap().average.unwrap();
            let theory = a.theory_rate.unwrap();
            let rel = (theory - a.mc_rate).abs() / a.mc_rate;
            pass &= rel <= 0.05;
            parts.push(format!(
                "{scheme}@{rho}dB: MC {:.4} theory {:.4} rel {:.4} (ratio-of-means MC {:.4})",
                a.mc_rate, theory, rel, a.ratio_of_means_rate
            ));
        }
    }
    report(8, "theory vs Monte Carlo rate", pass, format!("tol 0.05; {}", parts.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_09_scheme_ordering() {
    let r = desk_rate_report();
    let get = |s| r.point(s, 20.0).unwrap().average.unwrap();
    let (p, c, o) = (get(PZF), get(CZF), get(OZF));
    let gap = |a: f64, b: f64, sa: f64, sb: f64| (a - b, 2.0 * (sa * sa + sb * sb).sqrt());
    let (g1, t1) = gap(p.mc_rate, c.mc_rate, p.mc_rate_se, c.mc_rate_se);
    let (g2, t2) = gap(c.mc_rate, o.mc_rate, c.mc_rate_se, o.mc_rate_se);
    let pass = g1 > t1 && g2 > t2;
    report(
        9,
        "scheme ordering",
        pass,
        format!(
            "rho=20 dB ZF: proposed {:.4}±{:.4} > conventional {:.4}±{:.4} > OFDM {:.4}±{:.4} (cp {}); gaps {g1:.4} > {t1:.4}, {g2:.4} > {t2:.4}",
            p.mc_rate,
            p.mc_rate_se,
            c.mc_rate,
            c.mc_rate_se,
            o.mc_rate,
            o.mc_rate_se,
            r.point(OZF, 20.0).unwrap().cp_len.unwrap()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_spacing_trend() {
    let plan = ExperimentPlan {
        kind: ExperimentKind::RateVsSpacing,
        spacings_khz: vec![15.0, 30.0, 60.0, 120.0],
        reference_snr_db: 20.0,
        outer_trials: 5,
        inner_trials: 100,
        master_seed: 10,
        schemes: vec![PZF, CZF, OZF],
        theory: false,
        ..ExperimentPlan::default()
    };
    let r = run(&desk_system(), &plan).unwrap();
    let drop = |s| {
        let lo = r.point(s, 15.0).unwrap().average.unwrap().mc_rate;
        let hi = r.point(s, 120.0).unwrap().average.unwrap().mc_rate;
        (lo, hi, (lo - hi) / lo)
    };
    let (p, c, o) = (drop(PZF), drop(CZF), drop(OZF));
    let pass = p.2 < c.2 && p.2 < o.2;
    report(
        10,
        "spacing-sweep trend",
        pass,
        format!(
            "relative drop 15->120 kHz: proposed {:.4} ({:.3}->{:.3}), conventional {:.4} ({:.3}->{:.3}), OFDM {:.4} ({:.3}->{:.3})",
            p.2, p.0, p.1, c.2, c.0, c.1, o.2, o.0, o.1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_11_ber_ordering() {
    let points = [-15.0, -10.0, -5.0];
    let plan = ExperimentPlan {
        kind: ExperimentKind::Ber,
        ebn0_db: points.to_vec(),
        modulation: 4,
        outer_trials: 5,
        inner_trials: 8,
        symbols_per_frame: 64,
        master_seed: 11,
        schemes: vec![PZF, CZF, OZF],
        ..ExperimentPlan::default()
    };
    let r = run(&desk_system(), &plan).unwrap();
    let ber = |s, e| r.ber_point(s, e).unwrap();
    let top = points[2];
    let (p, c, o) = (ber(PZF, top), ber(CZF, top), ber(OZF, top));
    let ordered = p.ber <= c.ber && c.ber <= o.ber;
    let enough = r.ber.iter().all(|b| b.bits >= 100_000);
    let monotone = [PZF, CZF, OZF]
        .iter()
        .all(|&s| points.windows(2).all(|w| ber(s, w[1]).ber <= ber(s, w[0]).ber));
    let pass = ordered && enough && monotone;
    let table: Vec<String> = r
        .ber
        .iter()
        .map(|b| format!("{}@{}dB {}/{}", b.scheme, b.ebn0_db, b.errors, b.bits))
        .collect();
    report(
        11,
        "BER ordering",
        pass,
        format!(
            "at {top} dB: proposed {:.3e} <= conventional {:.3e} <= OFDM {:.3e} (cp {}); monotone {monotone}; {}",
            p.ber,
            c.ber,
            o.ber,
            o.cp_len.unwrap(),
            table.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_12_determinism_across_threads() {
    let mut sys = desk_system();
    sys.num_antennas = 8;
    let rate = ExperimentPlan {
        snr_db: vec![0.0, 20.0],
        outer_trials: 2,
        inner_trials: 6,
        master_seed: 12,
        schemes: vec![PZF, PMRC, CZF, OZF],
        ..ExperimentPlan::default()
    };
    let ber = ExperimentPlan {
        kind: ExperimentKind::Ber,
        ebn0_db: vec![-10.0, -5.0],
        outer_trials: 2,
        inner_trials: 2,
        symbols_per_frame: 8,
        master_seed: 12,
        schemes: vec![PZF, OZF],
        ..ExperimentPlan::default()
    };
    let csv = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let a = run(&sys, &rate).unwrap();
            let b = run(&sys, &ber).unwrap();
            [a.summary_csv(), a.detail_csv(), b.ber_csv()].concat()
        })
    };
    let one = csv(1);
    let four = csv(4);
    let pass = one == four;
    report(12, "determinism", pass, format!("1 vs 4 threads: {} bytes, identical = {pass}", one.len()));
    assert!(pass);
}
