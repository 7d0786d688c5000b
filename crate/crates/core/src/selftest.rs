//! Quick runtime checks of the structural identities of every module at a
//! given system configuration. Trial counts are small; the integration
//! suites carry the statistically demanding versions.

use serde::Serialize;

use crate::channel::draw_channel;
use crate::closedform::wishart_trace_check;
use crate::error::Result;
use crate::filterbank::{oqam_blocks, phydyas_prototype, FilterBank, OqamFrame};
use crate::geometry::{max_time_offset, place_network};
use crate::harness::{run, ExperimentPlan, Scheme, SystemConfig, Waveform};
use crate::linalg::{complex_gaussian, frobenius, CMatrix};
use crate::ofdm::cp_search_set;
use crate::precoder::{design_precoders, phase_targets, tap_response, Combiner, DesignBins};
use crate::qam::Qam;
use crate::rng::{domain, trial_rng};
use crate::Complex64;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(module: &'static str, name: &'static str, pass: bool, detail: String) -> Self {
        Self {
            module,
            name,
            pass,
            detail,
        }
    }
}

/// Runs every check. Errors are configuration errors, not check failures.
pub fn run_all(sys: &SystemConfig, seed: u64) -> Result<Vec<Check>> {
    sys.validate()?;
    let mut out = Vec::new();
    let m_count = sys.num_subcarriers;
    let ts = sys.sample_interval();

    // geometry
    let layout = place_network(&sys.geometry, ts, &mut trial_rng(seed, domain::LAYOUT, 0));
    let bound = max_time_offset(sys.geometry.radius_m, ts);
    let nearest_zero = (0..layout.num_users()).all(|u| (0..layout.num_aps()).any(|k| layout.tau[k][u] == 0));
    out.push(Check::new(
        "geometry",
        "offsets relative to nearest AP",
        nearest_zero && layout.max_tau() <= bound,
        format!("max tau {} <= bound {bound}", layout.max_tau()),
    ));
    let beta_ok = layout.beta.iter().flatten().all(|b| *b > 0.0 && b.is_finite());
    out.push(Check::new("geometry", "large-scale gains positive", beta_ok, String::new()));

    // channel
    let pdp = sys.profile()?;
    let sum: f64 = pdp.lambda().iter().sum();
    out.push(Check::new(
        "channel",
        "profile has unit power",
        (sum - 1.0).abs() < 1e-12,
        format!("sum {sum:.15}"),
    ));

    // filterbank
    let proto = phydyas_prototype(m_count, sys.overlap)?;
    let taps = proto.taps();
    let energy: f64 = taps.iter().map(|x| x * x).sum();
    let symmetric = (1..taps.len()).all(|l| (taps[l] - taps[taps.len() - l]).abs() < 1e-12);
    out.push(Check::new(
        "filterbank",
        "prototype symmetric with unit energy",
        symmetric && (energy - 1.0).abs() < 1e-12,
        format!("energy {energy:.15}"),
    ));
    let sir = back_to_back_sir(FilterBank::new(proto), seed);
    out.push(Check::new(
        "filterbank",
        "back-to-back reconstruction",
        sir >= 50.0,
        format!("SIR {sir:.2} dB, need >= 50"),
    ));

    // qam
    let mut qam_ok = true;
    for order in [4, 16, 64] {
        let q = Qam::new(order)?;
        let b = q.bits_per_symbol();
        for word in 0..order {
            let bits: Vec<u8> = (0..b).map(|i| ((word >> (b - 1 - i)) & 1) as u8).collect();
            let mut back = Vec::new();
            q.demodulate(q.modulate(&bits), &mut back);
            qam_ok &= back == bits;
        }
    }
    out.push(Check::new("qam", "hard decisions invert mapping", qam_ok, String::new()));

    // precoder
    let ch = draw_channel(&pdp, &layout, sys.num_antennas, &mut trial_rng(seed, domain::CHANNEL, 0));
    let bins = DesignBins::new(m_count, sys.lp_bar());
    let plan = Scheme::new(Waveform::Proposed, Combiner::Zf).plan(sys)?;
    let probe = [0, m_count / 4, m_count / 2, m_count - 1];
    if sys.num_antennas >= sys.geometry.num_users {
        let set = design_precoders(&ch, &layout.tau, &layout.beta, &probe, &bins, plan, Combiner::Zf)?;
        let (mut exact, mut recomb) = (0.0f64, 0.0f64);
        for sp in set.subcarriers() {
            for (k, (taps, per_bin)) in sp.taps.iter().zip(&sp.combiners).enumerate() {
                for (p, omega) in per_bin.iter().enumerate() {
                    let w = bins.omega(sp.subcarrier, p);
                    let lambda = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(phase_targets(w, &layout.tau[k])));
                    exact = exact.max(frobenius(&(ch.freq_matrix(k, w) * omega - lambda)));
                    let scale = frobenius(omega).max(1.0);
                    recomb = recomb.max(frobenius(&(tap_response(taps, w, plan.c2) - omega)) / scale);
                }
            }
        }
        out.push(Check::new(
            "precoder",
            "ZF meets phase targets at design bins",
            exact <= 1e-10,
            format!("max error {exact:.3e}"),
        ));
        out.push(Check::new(
            "precoder",
            "taps recombine to bin combiners",
            recomb <= 1e-10,
            format!("max relative error {recomb:.3e}"),
        ));
    }

    // closedform
    let w = wishart_trace_check(16, 4, 4000, &mut trial_rng(seed, domain::CHANNEL, 1))?;
    out.push(Check::new(
        "closedform",
        "inverse Wishart trace",
        w.relative_error <= 0.05,
        format!("estimate {:.4} vs {:.4}", w.estimate, w.expected),
    ));

    // ofdm
    let cps = cp_search_set(bound, pdp.len(), m_count);
    out.push(Check::new(
        "ofdm",
        "prefix candidates cover the delay spread",
        cps.first() == Some(&0) && cps.windows(2).all(|p| p[1] == p[0] + 1),
        format!("{} candidates", cps.len()),
    ));

    // linkmetrics and harness through one tiny sweep
    let zf_ok = sys.num_antennas >= sys.geometry.num_users;
    let combiner = if zf_ok { Combiner::Zf } else { Combiner::Mrc };
    let plan = ExperimentPlan {
        snr_db: vec![0.0, 20.0],
        outer_trials: 1,
        inner_trials: 2,
        master_seed: seed,
        schemes: vec![Scheme::new(Waveform::Proposed, combiner), Scheme::new(Waveform::Ofdm, combiner)],
        theory: false,
        averaged_subcarriers: 2.min(m_count),
        ..Default::default()
    };
    let a = run(sys, &plan)?;
    let b = run(sys, &plan)?;
    let rising = a
        .summary
        .iter()
        .filter(|p| p.param == 0.0)
        .filter_map(|lo| Some((lo.average.as_ref()?.mc_rate, a.point(lo.scheme, 20.0)?.average.as_ref()?.mc_rate)))
        .all(|(lo, hi)| hi >= lo);
    out.push(Check::new(
        "linkmetrics",
        "rate does not fall with SNR",
        rising,
        String::new(),
    ));
    out.push(Check::new(
        "harness",
        "repeat run is identical",
        a.summary_csv() == b.summary_csv() && a.detail_csv() == b.detail_csv(),
        String::new(),
    ));
    Ok(out)
}

fn back_to_back_sir(bank: FilterBank, seed: u64) -> f64 {
    let m_count = bank.num_subcarriers();
    let slots = 40;
    let mut rng = trial_rng(seed, domain::SYMBOLS, 0);
    let mut frame = OqamFrame::zeros(m_count, slots, 1);
    for m in 0..m_count {
        for i in 0..slots {
            let z: Complex64 = complex_gaussian(&mut rng, 1.0);
            frame.set(m, i, 0, z.re.signum());
        }
    }
    let y = bank.synthesize(&oqam_blocks(&frame, 0), m_count / 2).expect("block lengths match");
    let est = bank.demodulate(&y, slots);
    let (mut sig, mut err) = (0.0, 0.0);
    for (m, row) in est.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            let a = frame.get(m, i, 0);
            sig += a * a;
            err += (v - a).powi(2);
        }
    }
    10.0 * (sig / err).log10()
}
