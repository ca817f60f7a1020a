use gnnd::channel::{equal_powers, noise_var_for_snr, sample_channel};
use gnnd::codec::conv::{conv_encode, encode_symbols, viterbi, ConvCode};
use gnnd::codec::ldpc::{bp_decode, ldpc_build, LdpcCode};
use gnnd::codec::llr::{llr_init, LlrScale};
use gnnd::constellation::Constellation;
use gnnd::gnnd::{metric_table_gnnd, qpsk_gf, GnndFront, solve_gf_general, tilted_pmf, FrontKind, MetricTable};
use gnnd::harness::required_snr;
use gnnd::posterior::{posterior_pmf, PosteriorMoments};
use gnnd::rng::{complex_gaussian, substream};
use gnnd::Complex64;
use proptest::prelude::*;
use std::sync::OnceLock;

fn ldpc() -> &'static LdpcCode {
    static CODE: OnceLock<LdpcCode> = OnceLock::new();
    CODE.get_or_init(|| ldpc_build(440, (5, 6)).unwrap())
}

fn tilted_moments(pmf: &[f64], c: &Constellation) -> (Complex64, f64) {
    let m = PosteriorMoments::from_pmf(pmf, c, 0.0);
    (m.mean, m.second)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaled_constellations_have_requested_power(p in 0.01f64..10.0) {
        for c in [Constellation::qpsk(p).unwrap(), Constellation::qam16(p).unwrap()] {
            let e: f64 = c.points().iter().zip(c.probabilities()).map(|(a, q)| q * a.norm_sqr()).sum();
            prop_assert!((e - p).abs() < 1e-12 * p.max(1.0));
            prop_assert!((c.power() - p).abs() < 1e-12 * p.max(1.0));
        }
    }

    #[test]
    fn modulation_round_trips(bits in prop::collection::vec(0u8..2, 0..32)) {
        let c = Constellation::qam16(1.0).unwrap();
        let n = bits.len() / 4 * 4;
        let bits = &bits[..n];
        let syms = c.modulate(bits).unwrap();
        prop_assert_eq!(c.demodulate_hard(&syms).unwrap(), bits.to_vec());
    }

    #[test]
    fn posterior_pmf_is_a_distribution(seed in any::<u64>(), snr in -5.0f64..25.0) {
        let mut rng = substream(seed, &[0]);
        let ch = sample_channel(3, 2, noise_var_for_snr(snr, 1.0), equal_powers(3, 1.0), &mut rng).unwrap();
        let cons: Vec<_> = ch.powers().iter().map(|&p| Constellation::qpsk(p).unwrap()).collect();
        let y: Vec<Complex64> = (0..2).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        for k in 0..3 {
            let pmf = posterior_pmf(&y, &ch, &cons, k, &[]).unwrap();
            prop_assert!(pmf.iter().all(|p| *p >= 0.0));
            prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn qpsk_front_matches_the_mean(u in -0.99f64..0.99, w in -0.99f64..0.99, p in 0.1f64..4.0) {
        let c = Constellation::qpsk(p).unwrap();
        let mean = Complex64::new(u, w) * (p / 2.0).sqrt();
        let tilted = tilted_pmf(&qpsk_gf(mean, p), &c);
        let (m, _) = tilted_moments(&tilted, &c);
        prop_assert!((m - mean).norm() < 1e-9 * p.sqrt());
    }

    #[test]
    fn general_solver_recovers_attainable_moments(
        gr in -2.0f64..2.0,
        gi in -2.0f64..2.0,
        fr in 0.05f64..1.5,
        fi in -1.0f64..1.0,
    ) {
        // Targets drawn from the tilted family itself are always attainable.
        let c = Constellation::qam16(1.0).unwrap();
        let source = GnndFront::from_gf(Complex64::new(gr, gi), Complex64::new(fr, fi));
        let target = PosteriorMoments::from_pmf(&tilted_pmf(&source, &c), &c, 0.0);
        let front = solve_gf_general(&target, &c).unwrap();
        let (m, s) = tilted_moments(&tilted_pmf(&front, &c), &c);
        prop_assert!((m - target.mean).norm() < 1e-6, "mean {m} vs {}", target.mean);
        prop_assert!((s - target.second).abs() < 1e-6, "second {s} vs {}", target.second);
    }

    #[test]
    fn qpsk_llr_signs_follow_the_nearest_point(re in -2.0f64..2.0, im in -2.0f64..2.0) {
        let c = Constellation::qpsk(1.0).unwrap();
        let table = metric_table_gnnd(&qpsk_gf(Complex64::new(re, im) * 0.5, 1.0), &c);
        let llr = llr_init(&table, &c, Some(LlrScale::Unit), 50.0).unwrap();
        let best = table.argmin();
        let bits = c.bits_of(best).unwrap();
        for (l, b) in llr.iter().zip(bits) {
            if l.abs() > 1e-9 {
                prop_assert_eq!(*l < 0.0, b == 1);
            }
        }
    }

    #[test]
    fn llr_of_mirrored_table_flips_sign(values in prop::collection::vec(0.0f64..20.0, 4)) {
        // Gray QPSK: swapping points along both axes complements every label bit.
        let c = Constellation::qpsk(1.0).unwrap();
        let flipped: Vec<f64> = (0..4)
            .map(|i| {
                let a = c.points()[i];
                values[c.nearest(-a)]
            })
            .collect();
        let a = llr_init(&MetricTable { values, tag: FrontKind::Ml }, &c, None, 1e3).unwrap();
        let b = llr_init(&MetricTable { values: flipped, tag: FrontKind::Ml }, &c, None, 1e3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x + y).abs() < 1e-9);
        }
    }

    #[test]
    fn convolutional_code_is_linear(
        a in prop::collection::vec(0u8..2, 1..64),
        seed in any::<u64>(),
    ) {
        let code = ConvCode::standard();
        let b: Vec<u8> = a.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) & 1) as u8).collect();
        let x: Vec<u8> = a.iter().zip(&b).map(|(p, q)| p ^ q).collect();
        let ea = conv_encode(&a, &code);
        let eb = conv_encode(&b, &code);
        let ex = conv_encode(&x, &code);
        prop_assert_eq!(ex, ea.iter().zip(&eb).map(|(p, q)| p ^ q).collect::<Vec<_>>());
    }

    #[test]
    fn viterbi_inverts_noiseless_encoding(bits in prop::collection::vec(0u8..2, 1..80)) {
        let code = ConvCode::standard();
        let c = Constellation::qpsk(1.0).unwrap();
        let idx = encode_symbols(&bits, &code, &c).unwrap();
        let tables: Vec<MetricTable> = idx
            .iter()
            .map(|&i| MetricTable {
                values: c.points().iter().map(|a| (a - c.points()[i]).norm_sqr()).collect(),
                tag: FrontKind::Ml,
            })
            .collect();
        prop_assert_eq!(viterbi(&tables, &code, &c).unwrap(), bits);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ldpc_codewords_satisfy_every_check(seed in any::<u64>()) {
        let code = ldpc();
        let info: Vec<u8> = (0..code.k()).map(|i| ((seed.rotate_left(i as u32 % 64) ^ i as u64) & 1) as u8).collect();
        let word = code.encode(&info).unwrap();
        prop_assert_eq!(word.len(), code.n());
        prop_assert_eq!(code.syndrome_weight(&word), 0);
        prop_assert_eq!(code.extract_info(&word), info);
    }

    #[test]
    fn bp_corrects_a_few_weak_errors(seed in any::<u64>(), flips in prop::collection::vec(0usize..528, 1..4)) {
        let code = ldpc();
        let info: Vec<u8> = (0..code.k()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        let word = code.encode(&info).unwrap();
        let mut llr: Vec<f64> = word.iter().map(|&b| if b == 0 { 4.0 } else { -4.0 }).collect();
        for f in flips {
            llr[f] = -0.5 * llr[f].signum();
        }
        let res = bp_decode(code, &llr, 50).unwrap();
        prop_assert!(res.converged);
        prop_assert_eq!(res.bits, word);
    }

    #[test]
    fn required_snr_lies_in_the_crossing_interval(
        slope in 0.1f64..1.0,
        offset in -2.0f64..0.0,
        target_exp in -4.0f64..-1.0,
    ) {
        let curve: Vec<(f64, f64, u64)> = (0..30)
            .map(|i| {
                let snr = i as f64;
                (snr, 10f64.powf(offset - slope * snr), 1000)
            })
            .collect();
        let target = 10f64.powf(target_exp);
        if let Some(s) = required_snr(&curve, target, 100) {
            let hi = curve.iter().position(|p| p.1 <= target).unwrap();
            prop_assert!(hi > 0);
            prop_assert!(s > curve[hi - 1].0 && s <= curve[hi].0);
            // log-linear curve: interpolation is exact.
            prop_assert!((s - (offset - target_exp) / slope).abs() < 1e-9);
        }
    }
}
