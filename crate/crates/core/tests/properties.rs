use dpdlab_core::energy::{
    count_forward_ops, energy_report, power_breakdown, scale_energy, EnergyScaling, EnergyTable, OpCounts,
    PowerScenario,
};
use dpdlab_core::metrics::acpr_of;
use dpdlab_core::nn::{fc_forward, gru_forward_dense_flat, model_from_json, model_to_json, tcn_forward, ModelDims};
use dpdlab_core::quant::{fake_quant_forward, integer_forward, QuantizedModel};
use dpdlab_core::signal::features_of;
use dpdlab_core::{
    default_test_pa, evm, fake_quant, generate_ofdm, model_forward, nmse, pa_apply, AcprConfig, DeltaThresholds,
    IQSequence, ModelStream, OfdmConfig, Precision, QuantModelConfig, QuantSpec, SparsityReport, TResDeltaGru,
};
use num_complex::Complex64;
use proptest::prelude::*;

fn ofdm(seed: u64, symbols: usize) -> (IQSequence, OfdmConfig) {
    let cfg = OfdmConfig {
        num_symbols: symbols,
        seed,
        ..OfdmConfig::default()
    };
    (generate_ofdm(&cfg).unwrap(), cfg)
}

fn short(seed: u64, n: usize) -> IQSequence {
    let (x, _) = ofdm(seed, 1);
    x.slice(0, n.min(x.len()))
}

fn thresholds() -> impl Strategy<Value = DeltaThresholds> {
    (0.0f64..0.1, 0.0f64..0.5).prop_map(|(p, h)| DeltaThresholds::new(p, h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn acpr_and_evm_ignore_complex_gain(seed in 0u64..1000, mag in 0.05f64..20.0, phase in -3.1f64..3.1) {
        let (x, cfg) = ofdm(seed, 2);
        let y = pa_apply(&default_test_pa(seed), &x);
        let g = Complex64::from_polar(mag, phase);
        let gy = y.scaled(g);
        let bands = AcprConfig::for_ofdm(&cfg);
        let (a, b) = (acpr_of(&y, &bands).unwrap(), acpr_of(&gy, &bands).unwrap());
        prop_assert!((a.avg_dbc - b.avg_dbc).abs() < 1e-9);
        prop_assert!((a.lower_dbc - b.lower_dbc).abs() < 1e-9);
        prop_assert!((evm(&x, &y).unwrap() - evm(&x, &gy).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn nmse_sees_gain_errors(seed in 0u64..1000, mag in 1.5f64..10.0) {
        let x = short(seed, 256);
        let want = 20.0 * (mag - 1.0).log10();
        let scaled = nmse(&x, &x.scaled(Complex64::new(mag, 0.0))).unwrap();
        prop_assert!((scaled - want).abs() < 1e-9);
        prop_assert!(nmse(&x, &x).unwrap() < scaled - 20.0);
    }

    #[test]
    fn delta_equals_dense_at_zero_thresholds(seed in 0u64..1000, hidden in 1usize..12, n in 1usize..200) {
        let x = short(seed, n);
        let model = TResDeltaGru::<f64>::init(ModelDims::dpd(hidden), seed);
        let (u, rep) = model_forward(&model, &x).unwrap();
        prop_assert_eq!(rep.gamma, 0.0);
        let flat: Vec<f64> = features_of(x.samples()).iter().flatten().copied().collect();
        let h = gru_forward_dense_flat(&model.gru, &flat).unwrap();
        let tcn = tcn_forward(model.tcn.as_ref().unwrap(), &x);
        for (t, ht) in h.chunks(hidden).enumerate() {
            let fc = fc_forward(&model.fc, ht);
            let want = Complex64::new(fc[0] + tcn[t][0], fc[1] + tcn[t][1]);
            prop_assert!((u.samples()[t] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn chunked_streaming_matches_one_shot(
        seed in 0u64..1000,
        th in thresholds(),
        n in 1usize..300,
        cuts in prop::collection::vec(1usize..40, 1..20),
    ) {
        let x = short(seed, n);
        let model = TResDeltaGru::<f32>::init(ModelDims::dpd(6), seed).with_thresholds(th);
        let (u, rep) = model_forward(&model, &x).unwrap();
        let mut s = ModelStream::new(&model);
        let (mut out, mut pos, mut k) = (Vec::new(), 0, 0);
        while pos < x.len() {
            let end = (pos + cuts[k % cuts.len()]).min(x.len());
            out.extend(s.push(&model, &x.samples()[pos..end]));
            pos = end;
            k += 1;
        }
        let (tail, rep2, _) = s.finish(&model);
        out.extend(tail);
        prop_assert_eq!(out.as_slice(), u.samples());
        prop_assert_eq!(rep2, rep);
    }

    #[test]
    fn sparsity_lies_in_unit_interval(seed in 0u64..1000, th in thresholds(), n in 1usize..300) {
        let x = short(seed, n);
        let model = TResDeltaGru::<f64>::init(ModelDims::dpd(5), seed).with_thresholds(th);
        let (_, r) = model_forward(&model, &x).unwrap();
        for g in [r.gamma, r.gamma_phi, r.gamma_h] {
            prop_assert!((0.0..=1.0).contains(&g));
        }
        let lo = r.gamma_phi.min(r.gamma_h);
        let hi = r.gamma_phi.max(r.gamma_h);
        prop_assert!(r.gamma >= lo - 1e-12 && r.gamma <= hi + 1e-12);
    }

    #[test]
    fn larger_thresholds_never_reduce_sparsity_of_the_input_side(seed in 0u64..1000, a in 0.0f64..0.1, b in 0.0f64..0.1) {
        // The input features do not depend on the hidden state, so input-side
        // skips grow monotonically with theta_phi.
        let x = short(seed, 200);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m = TResDeltaGru::<f64>::init(ModelDims::dpd(4), seed);
        let g = |t: f64| model_forward(&m.clone().with_thresholds(DeltaThresholds::new(t, 0.0).unwrap()), &x).unwrap().1.gamma_phi;
        prop_assert!(g(hi) >= g(lo));
    }

    #[test]
    fn fake_quant_is_idempotent_and_bounded(
        x in -1e4f64..1e4,
        k in -20i32..6,
        bits in prop::sample::select(vec![8u32, 12, 16]),
    ) {
        let s = QuantSpec::new(bits, k).unwrap();
        let q = fake_quant(x, &s);
        prop_assert_eq!(fake_quant(q, &s), q);
        prop_assert!(q >= s.qmin() as f64 * s.scale() && q <= s.qmax() as f64 * s.scale());
        if x >= s.qmin() as f64 * s.scale() && x <= s.qmax() as f64 * s.scale() {
            prop_assert!((q - x).abs() <= s.scale() / 2.0);
        }
    }

    #[test]
    fn integer_path_matches_fake_quant(
        seed in 0u64..1000,
        th in thresholds(),
        cfg in prop::sample::select(vec![QuantModelConfig::W16A16, QuantModelConfig::W12A12]),
    ) {
        let x = short(seed, 150);
        let model = TResDeltaGru::<f64>::init(ModelDims::dpd(6), seed).with_thresholds(th);
        let qm = QuantizedModel::calibrate(&model, cfg, &x).unwrap();
        let fq = fake_quant_forward(&qm, &x).unwrap();
        let int = integer_forward(&qm, &x).unwrap();
        prop_assert_eq!(int.first_mismatch(&fq), None);
        prop_assert_eq!(int.output, fq.output);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0u64..10_000, hidden in 1usize..20, tcn in any::<bool>(), th in thresholds()) {
        let dims = if tcn { ModelDims::dpd(hidden) } else { ModelDims::pa(hidden) };
        let m32 = TResDeltaGru::<f32>::init(dims, seed).with_thresholds(th);
        prop_assert_eq!(model_from_json::<f32>(&model_to_json(&m32).unwrap()).unwrap(), m32.clone());
        let m64 = m32.cast::<f64>();
        prop_assert_eq!(model_from_json::<f64>(&model_to_json(&m64).unwrap()).unwrap(), m64);
    }
}

fn doubled(c: &OpCounts) -> OpCounts {
    c.scaled(2.0)
}

proptest! {
    #[test]
    fn energy_is_linear_in_counts(
        hidden in 1usize..64,
        gp in 0.0f64..1.0,
        gh in 0.0f64..1.0,
        gamma in 0.0f64..1.0,
        p in prop::sample::select(vec![Precision::Fp32, Precision::Int16, Precision::Int12]),
    ) {
        let table = EnergyTable::default();
        let counts = count_forward_ops(&ModelDims::dpd(hidden), gp, gh).unwrap();
        let sc = EnergyScaling::for_precision(p, gamma).unwrap();
        let e1 = scale_energy(&counts, &table, &sc, p).unwrap();
        let e2 = scale_energy(&doubled(&counts), &table, &sc, p).unwrap();
        prop_assert!((e2.total_pj - 2.0 * e1.total_pj).abs() <= 1e-9 * e1.total_pj);
        prop_assert!((e1.mul_pj + e1.add_pj + e1.mem_pj - e1.total_pj).abs() <= 1e-9 * e1.total_pj);
        prop_assert!((e1.gru_mv_pj + e1.other_pj - e1.total_pj).abs() <= 1e-9 * e1.total_pj);
    }

    #[test]
    fn energy_falls_with_sparsity(hidden in 1usize..64, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let table = EnergyTable::default();
        let counts = count_forward_ops(&ModelDims::dpd(hidden), 0.0, 0.0).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let e = |g| scale_energy(&counts, &table, &EnergyScaling::for_precision(Precision::Int16, g).unwrap(), Precision::Int16).unwrap().total_pj;
        prop_assert!(e(hi) <= e(lo));
    }

    #[test]
    fn reduction_factor_is_monotone_in_gamma(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let model = TResDeltaGru::<f32>::init(ModelDims::dpd(15), 0);
        let table = EnergyTable::default();
        let rf = |g: f64| {
            let mut r = SparsityReport::from_stats(Default::default(), 0);
            r.gamma = g;
            energy_report(&model, &r, Precision::Int16, &table, None).unwrap().reduction_factor
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rf(hi) >= rf(lo));
        if lo >= 0.56 {
            prop_assert!(rf(lo) >= 3.0);
        }
    }

    #[test]
    fn sampling_and_adaptation_power_vanish_with_long_periods(
        ef in 1e-12f64..1e-6,
        fs in 1e6f64..1e10,
        n_sam in 1.0f64..1e5,
        n_epo in 0.0f64..100.0,
        t0 in 1.0f64..10.0,
    ) {
        let base = PowerScenario {
            energy_per_forward_j: ef,
            sample_rate_hz: fs,
            t_dpd_s: t0,
            p_adc_w: 1.0,
            n_sam,
            n_epo,
            backward_cost_ratio: 3.0,
        };
        let p0 = power_breakdown(&base);
        let p1 = power_breakdown(&PowerScenario { t_dpd_s: t0 * 1e6, ..base });
        prop_assert_eq!(p0.p_inf_w, p1.p_inf_w);
        prop_assert!((p0.p_inf_w - ef * fs).abs() <= 1e-12 * p0.p_inf_w);
        prop_assert!(p1.p_sam_w <= p0.p_sam_w * 1e-6 * (1.0 + 1e-9));
        prop_assert!(p1.p_ada_w <= p0.p_ada_w * 1e-6 * (1.0 + 1e-9) + f64::MIN_POSITIVE);
        prop_assert!((p0.p_total_w - (p0.p_inf_w + p0.p_sam_w + p0.p_ada_w)).abs() <= 1e-12 * p0.p_total_w);
    }
}
