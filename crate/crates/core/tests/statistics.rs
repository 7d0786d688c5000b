//! Monte Carlo checks of the random models and of the harness statistics.

use cellfree_fbmc::channel::{draw_channel, load_pdp, PdpSpec};
use cellfree_fbmc::filterbank::{phydyas_prototype, FilterBank};
use cellfree_fbmc::geometry::{place_network, sample_interval, GeometryConfig};
use cellfree_fbmc::harness::{run, ExperimentPlan, Scheme, SystemConfig, Waveform};
use cellfree_fbmc::linalg::complex_gaussian;
use cellfree_fbmc::linkmetrics::{symbol_powers, AmbiguityTable, InterferenceWindow};
use cellfree_fbmc::precoder::{design_precoders, Combiner, DesignBins, InterpolationPlan};
use cellfree_fbmc::rng::{domain, trial_rng};

#[test]
fn tap_second_moments_follow_beta_lambda() {
    let ts = sample_interval(64, 30e3);
    let geo = GeometryConfig {
        num_aps: 2,
        num_users: 2,
        ..GeometryConfig::default()
    };
    let layout = place_network(&geo, ts, &mut trial_rng(31, domain::LAYOUT, 0));
    let pdp = load_pdp(&PdpSpec::default(), ts).unwrap();
    let trials = 4000;
    let n = 4;
    let mut power = vec![vec![vec![0.0; pdp.len()]; 2]; 2];
    let mut cross = 0.0;
    for t in 0..trials {
        let ch = draw_channel(&pdp, &layout, n, &mut trial_rng(31, domain::CHANNEL, t));
        for (k, pk) in power.iter_mut().enumerate() {
            for (u, pku) in pk.iter_mut().enumerate() {
                for (l, p) in pku.iter_mut().enumerate() {
                    *p += ch.tap(k, u, l).iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
                }
            }
        }
        let h = ch.tap(0, 0, 0);
        cross += (h[0] * h[1].conj()).re / (layout.beta[0][0] * pdp.lambda()[0]);
    }
    for k in 0..2 {
        for u in 0..2 {
            for (l, &lam) in pdp.lambda().iter().enumerate() {
                if lam == 0.0 {
                    assert_eq!(power[k][u][l], 0.0);
                    continue;
                }
                let est = power[k][u][l] / trials as f64;
                let expected = layout.beta[k][u] * lam;
                // 4000 x 4 exponential draws: relative SE ~0.8%
                assert!((est / expected - 1.0).abs() < 0.04, "k={k} u={u} l={l}: {est:e} vs {expected:e}");
            }
        }
    }
    // antennas are uncorrelated
    assert!((cross / trials as f64).abs() < 0.05);
}

#[test]
fn analysis_noise_has_half_variance_per_real_symbol() {
    let m_count = 64;
    let bank = FilterBank::new(phydyas_prototype(m_count, 4).unwrap());
    let slots = 60;
    let len = (slots - 1) * m_count / 2 + bank.prototype().len();
    let sigma2 = 0.7;
    let mut rng = trial_rng(32, domain::NOISE, 0);
    let mut acc = 0.0;
    let mut count = 0;
    for _ in 0..10 {
        let y: Vec<_> = (0..len).map(|_| complex_gaussian(&mut rng, sigma2)).collect();
        for row in bank.demodulate(&y, slots) {
            for a in row {
                acc += a * a;
                count += 1;
            }
        }
    }
    let var = acc / count as f64;
    assert!((var / (sigma2 / 2.0) - 1.0).abs() < 0.03, "{var} vs {}", sigma2 / 2.0);
}

#[test]
fn interference_window_truncation_is_sound() {
    let m_count = 64;
    let ts = sample_interval(m_count, 30e3);
    let geo = GeometryConfig {
        num_aps: 4,
        num_users: 2,
        ..GeometryConfig::default()
    };
    let pdp = load_pdp(&PdpSpec::default(), ts).unwrap();
    let proto = phydyas_prototype(m_count, 4).unwrap();
    let table = AmbiguityTable::new(&proto, None);
    let bins = DesignBins::new(m_count, 1);
    let all: Vec<usize> = (0..m_count).collect();
    for (case, combiner, c1) in [(0u64, Combiner::Zf, 2), (1, Combiner::Mrc, 2), (2, Combiner::Zf, 1)] {
        let layout = place_network(&geo, ts, &mut trial_rng(33, domain::LAYOUT, case));
        let ch = draw_channel(&pdp, &layout, 16, &mut trial_rng(33, domain::CHANNEL, case));
        let plan = InterpolationPlan::new(m_count, c1).unwrap();
        let set = design_precoders(&ch, &layout.tau, &layout.beta, &all, &bins, plan, combiner).unwrap();
        for mb in [5, 32] {
            let std = symbol_powers(&set, &ch, &layout.tau, &table, mb, 0, &InterferenceWindow::standard(4)).unwrap();
            let full = symbol_powers(&set, &ch, &layout.tau, &table, mb, 0, &InterferenceWindow::full()).unwrap();
            assert_eq!(std.desired, full.desired);
            let missed = (full.total - std.total) / full.total;
            assert!((0.0..0.005).contains(&missed), "{combiner} C1={c1} mb={mb}: {missed:.5}");
        }
    }
}

fn theory_gap(combiner: Combiner, antennas: usize) -> f64 {
    let mut sys = SystemConfig {
        num_subcarriers: 64,
        num_antennas: antennas,
        ..SystemConfig::default()
    };
    sys.geometry.num_aps = 2;
    sys.geometry.num_users = 2;
    let plan = ExperimentPlan {
        snr_db: vec![10.0],
        outer_trials: 4,
        inner_trials: 300,
        master_seed: 34,
        schemes: vec![Scheme::new(Waveform::Proposed, combiner)],
        ..ExperimentPlan::default()
    };
    let r = run(&sys, &plan).unwrap();
    let a = r.summary[0].average.unwrap();
    (a.theory_rate.unwrap() - a.mc_rate).abs() / a.mc_rate
}

#[test]
fn theory_gap_shrinks_with_antennas() {
    for combiner in [Combiner::Zf, Combiner::MrcStatistical] {
        let (g8, g32) = (theory_gap(combiner, 8), theory_gap(combiner, 32));
        assert!(g32 <= g8 + 1e-12, "{combiner}: gap at N=32 {g32:.4} > gap at N=8 {g8:.4}");
    }
}

#[test]
#[ignore = "per-user normalized MRC: the 1/N combiner bias and the Jensen gap have opposite signs and nearly cancel at N=8"]
fn normalized_mrc_theory_gap_shrinks_with_antennas() {
    let (g8, g32) = (theory_gap(Combiner::Mrc, 8), theory_gap(Combiner::Mrc, 32));
    assert!(g32 <= g8, "gap at N=32 {g32:.4} > gap at N=8 {g8:.4}");
}
