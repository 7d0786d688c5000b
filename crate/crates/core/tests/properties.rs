//! Property tests for module invariants.

use cellfree_fbmc::channel::{ChannelRealization, PowerDelayProfile};
use cellfree_fbmc::filterbank::{phydyas_prototype, OqamFrame};
use cellfree_fbmc::geometry::{max_time_offset, place_network, sample_interval, GeometryConfig};
use cellfree_fbmc::linalg::{complex_gaussian, condition_number, frobenius, CMatrix};
use cellfree_fbmc::linkmetrics::PowerLedger;
use cellfree_fbmc::ofdm::optimal_cp;
use cellfree_fbmc::precoder::{
    design_precoders, phase_targets, tap_response, theta_matrix, Combiner, DesignBins, InterpolationPlan,
};
use cellfree_fbmc::qam::Qam;
use cellfree_fbmc::rng::{domain, trial_rng};
use cellfree_fbmc::Complex64;
use proptest::prelude::*;
use rand::Rng;

fn random_channel(seed: u64, aps: usize, users: usize, taps: usize, antennas: usize) -> ChannelRealization {
    let mut rng = trial_rng(seed, domain::CHANNEL, 0);
    let mut ch = ChannelRealization::zeros(aps, users, taps, antennas);
    for k in 0..aps {
        for u in 0..users {
            for l in 0..taps {
                for z in ch.tap_mut(k, u, l) {
                    *z = complex_gaussian(&mut rng, 1.0 / taps as f64);
                }
            }
        }
    }
    ch
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prototype_is_symmetric_unit_energy(log_m in 2u32..=8, overlap in 2usize..=4) {
        let m = 1usize << log_m;
        let f = phydyas_prototype(m, overlap).unwrap();
        let taps = f.taps();
        prop_assert_eq!(taps.len(), overlap * m);
        let energy: f64 = taps.iter().map(|x| x * x).sum();
        prop_assert!((energy - 1.0).abs() < 1e-12);
        for l in 1..taps.len() {
            prop_assert!((taps[l] - taps[taps.len() - l]).abs() < 1e-14);
        }
    }

    #[test]
    fn qam_round_trip(order_idx in 0usize..3, seed in any::<u64>()) {
        let qam = Qam::new([4, 16, 64][order_idx]).unwrap();
        let b = qam.bits_per_symbol();
        let mut rng = trial_rng(seed, domain::SYMBOLS, 0);
        let bits: Vec<u8> = (0..b * 64).map(|_| rng.random_range(0..2u8)).collect();
        let mut out = Vec::new();
        for chunk in bits.chunks(b) {
            qam.demodulate(qam.modulate(chunk), &mut out);
        }
        prop_assert_eq!(out, bits);
    }

    #[test]
    fn oqam_frame_round_trip(m in 1usize..6, n in 1usize..6, u in 1usize..4, seed in any::<u64>()) {
        let mut rng = trial_rng(seed, domain::SYMBOLS, 1);
        let qam: Vec<Vec<Vec<Complex64>>> = (0..m)
            .map(|_| (0..n).map(|_| (0..u).map(|_| complex_gaussian(&mut rng, 1.0)).collect()).collect())
            .collect();
        let frame = OqamFrame::from_qam(&qam);
        prop_assert_eq!(frame.num_slots(), 2 * n);
        let back = frame.to_qam();
        for (a, b) in back.iter().flatten().flatten().zip(qam.iter().flatten().flatten()) {
            prop_assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn zf_meets_targets_and_taps_recombine(
        seed in any::<u64>(),
        users in 1usize..=3,
        extra in 0usize..=3,
        lp_bar in 0usize..=2,
        log_c1 in 0u32..=3,
        m in 0usize..32,
    ) {
        let m_count = 32;
        let antennas = users + extra;
        let ch = random_channel(seed, 2, users, 4, antennas);
        let mut rng = trial_rng(seed, domain::LAYOUT, 0);
        let tau: Vec<Vec<usize>> = (0..2).map(|_| (0..users).map(|_| rng.random_range(0..8usize)).collect()).collect();
        let beta = vec![vec![1.0; users]; 2];
        let bins = DesignBins::new(m_count, lp_bar);
        let plan = InterpolationPlan::new(m_count, 1 << log_c1).unwrap();
        let set = design_precoders(&ch, &tau, &beta, &[m], &bins, plan, Combiner::Zf).unwrap();
        let sp = set.get(m).unwrap();
        for k in 0..2 {
            for (p, omega) in sp.combiners[k].iter().enumerate() {
                let w = bins.omega(m, p);
                let lambda = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(phase_targets(w, &tau[k])));
                let scale = frobenius(omega).max(1.0);
                prop_assert!(frobenius(&(ch.freq_matrix(k, w) * omega - &lambda)) < 1e-9 * scale);
                prop_assert!(frobenius(&(tap_response(&sp.taps[k], w, plan.c2) - omega)) < 1e-9 * scale);
            }
        }
    }

    #[test]
    fn theta_conditioning_does_not_depend_on_subcarrier(lp_bar in 1usize..=2, log_c1 in 0u32..=2, m in 1usize..64) {
        let bins = DesignBins::new(64, lp_bar);
        let c2 = 32 >> log_c1;
        let c0 = condition_number(&theta_matrix(&bins.omegas(0), c2));
        let cm = condition_number(&theta_matrix(&bins.omegas(m), c2));
        prop_assert!((c0 - cm).abs() <= 1e-8 * c0);
    }

    #[test]
    fn offsets_are_relative_to_nearest_ap(seed in any::<u64>(), aps in 1usize..8, users in 1usize..5, radius in 50.0f64..2000.0) {
        let geo = GeometryConfig { num_aps: aps, num_users: users, radius_m: radius, ..GeometryConfig::default() };
        let ts = sample_interval(256, 30e3);
        let layout = place_network(&geo, ts, &mut trial_rng(seed, domain::LAYOUT, 0));
        let bound = max_time_offset(radius, ts);
        for u in 0..users {
            let col: Vec<usize> = (0..aps).map(|k| layout.tau[k][u]).collect();
            prop_assert_eq!(*col.iter().min().unwrap(), 0);
            prop_assert!(col.iter().all(|&t| t <= bound));
            for k in 0..aps {
                prop_assert!(layout.beta[k][u] > 0.0 && layout.beta[k][u].is_finite());
            }
        }
    }

    #[test]
    fn truncated_profile_keeps_unit_sum(powers in prop::collection::vec(0.0f64..1.0, 1..12), thr in 1.0f64..40.0) {
        prop_assume!(powers.iter().any(|&p| p > 0.0));
        let pdp = PowerDelayProfile::from_linear(powers.clone()).unwrap();
        let t = pdp.truncated(thr);
        prop_assert!((t.lambda().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(t.len() <= pdp.len());
        prop_assert!(t.lambda().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn sinr_falls_with_noise(desired in 0.0f64..10.0, interference in 0.0f64..10.0, n1 in 0.0f64..5.0, dn in 0.0f64..5.0) {
        let ledger = PowerLedger {
            target_subcarrier: 0,
            target_user: 0,
            entries: Vec::new(),
            desired,
            total: desired + interference,
            desired_coherent: desired,
        };
        prop_assert!(ledger.sinr(n1 + dn) <= ledger.sinr(n1) + 1e-12);
        prop_assert!(ledger.sinr(n1 + dn) >= 0.0);
    }

    #[test]
    fn optimal_cp_is_argmax_with_shortest_tie(rates in prop::collection::vec(0u8..4, 1..20)) {
        let candidates: Vec<usize> = (0..rates.len()).collect();
        let (best, table) = optimal_cp(&candidates, |cp| Ok(rates[cp] as f64)).unwrap();
        let top = *rates.iter().max().unwrap();
        prop_assert_eq!(best, rates.iter().position(|&r| r == top).unwrap());
        prop_assert_eq!(table.len(), rates.len());
    }
}
