use mbq_core::calib::*;
use mbq_core::quant::QuantSpec;
use mbq_core::{Error, Matrix, ModalBatch, Modality, Rng};
use proptest::prelude::*;

const V: Modality = Modality::Vision;
const L: Modality = Modality::Language;

fn w3() -> CalibSpecs {
    CalibSpecs { weight: QuantSpec::asym_group(3, 128), act: None }
}

fn wo(kind: ObjectiveKind) -> CalibObjective {
    CalibObjective { kind, mode: CalibMode::WeightOnly }
}

// Straight-line symmetric fake-quant of one row.
fn fq_row_sym(row: &[f64], bits: u32) -> Vec<f64> {
    let qmax = ((1u32 << (bits - 1)) - 1) as f64;
    let amax = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let s = if amax == 0.0 { 1.0 } else { amax / qmax };
    row.iter()
        .map(|v| {
            let q = v / s;
            (q.signum() * (q.abs() + 0.5).floor()).clamp(-qmax, qmax) * s
        })
        .collect()
}

fn random_case(seed: u64, tokens: usize, din: usize, dout: usize) -> (Matrix, ModalBatch) {
    let mut rng = Rng::new(seed);
    let w = Matrix::random_normal(dout, din, 1.0, &mut rng);
    // A few loud activation channels so equalization has something to do.
    let x = Matrix::from_fn(tokens, din, |_, c| rng.normal() * if c % 5 == 0 { 8.0 } else { 1.0 }).unwrap();
    let tags = (0..tokens).map(|t| if t % 3 == 0 { L } else { V }).collect();
    (w, ModalBatch::new(x, tags).unwrap())
}

// Straight-line asymmetric fake-quant of one row treated as a single group.
fn fq_row(row: &[f64], bits: u32) -> Vec<f64> {
    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let qmax = ((1u32 << bits) - 1) as f64;
    if hi == lo {
        return vec![lo; row.len()];
    }
    let s = (hi - lo) / qmax;
    row.iter()
        .map(|v| {
            let q = (v - lo) / s;
            let r = q.signum() * (q.abs() + 0.5).floor();
            r.clamp(0.0, qmax) * s + lo
        })
        .collect()
}

#[test]
fn stats_match_loop_oracle() {
    let (w, x) = random_case(1, 30, 12, 7);
    let s = channel_stats(&x, &w).unwrap();
    for c in 0..12 {
        let mut a = 0.0f64;
        for t in 0..30 {
            a += x.tokens().get(t, c).abs() as f64;
        }
        let mut b = 0.0f64;
        for r in 0..7 {
            b += w.get(r, c).abs() as f64;
        }
        assert!((s.act[c] - a / 30.0).abs() < 1e-12);
        assert!((s.weight[c] - b / 7.0).abs() < 1e-12);
    }
}

#[test]
fn alpha_half_matches_formula() {
    let mut rng = Rng::new(2);
    let stats = ChannelStats {
        act: (0..9).map(|_| rng.next_f64() * 5.0 + 0.01).collect(),
        weight: (0..9).map(|_| rng.next_f64() + 0.01).collect(),
    };
    let e = candidate_equalization(&stats, 0.5).unwrap();
    let raw: Vec<f64> = stats.act.iter().zip(&stats.weight).map(|(a, w)| a.sqrt() / w.sqrt()).collect();
    let gm = raw.iter().map(|v| v.ln()).sum::<f64>() / 9.0;
    for (f, r) in e.factors().iter().zip(&raw) {
        assert!((*f as f64 - r / gm.exp()).abs() <= 1e-6 * (r / gm.exp()));
    }
    // alpha = 0: proportional to 1/weight_stat.
    let e0 = candidate_equalization(&stats, 0.0).unwrap();
    let k = e0.factors()[0] as f64 * stats.weight[0];
    for (f, w) in e0.factors().iter().zip(&stats.weight) {
        assert!((*f as f64 * w - k).abs() <= 1e-6 * k);
    }
}

#[test]
fn representable_weights_have_zero_loss() {
    let w = Matrix::from_rows(&[&[0.0, 255.0, 17.0], &[-3.0, 252.0, 0.0]]).unwrap();
    let x = ModalBatch::new(Matrix::from_rows(&[&[1.0, 0.5, -2.0], &[0.25, 1.0, 3.0]]).unwrap(), vec![V, L]).unwrap();
    let specs = CalibSpecs { weight: QuantSpec::asym_group(8, 128), act: None };
    let e = EqualizationVector::identity(3);
    let v = recon_loss(&w, &x, &e, &specs, &wo(ObjectiveKind::CweMse), None).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn two_by_two_matches_straight_line_oracle() {
    let w = Matrix::from_rows(&[&[0.9, -0.35], &[0.12, 0.61]]).unwrap();
    let xm = Matrix::from_rows(&[&[1.5, -0.2], &[0.3, 2.2], &[-0.7, 0.4]]).unwrap();
    let x = ModalBatch::new(xm.clone(), vec![V, L, L]).unwrap();
    let e = EqualizationVector::new(vec![1.25, 0.8]).unwrap();
    let f = [1.25f64, 0.8];
    let (gv, gl) = (0.3, 2.0);

    // Per-row symmetric: a two-column asymmetric group would be exact.
    let wq: Vec<Vec<f64>> = (0..2).map(|r| fq_row_sym(&[w.get(r, 0) as f64 * f[0], w.get(r, 1) as f64 * f[1]], 3)).collect();
    let (mut mae, mut mse) = ([0.0f64; 2], [0.0f64; 2]);
    let mut count = [0.0f64; 2];
    for t in 0..3 {
        let k = if t == 0 { 0 } else { 1 };
        count[k] += 2.0;
        for o in 0..2 {
            let y = xm.get(t, 0) as f64 * w.get(o, 0) as f64 + xm.get(t, 1) as f64 * w.get(o, 1) as f64;
            let yh = xm.get(t, 0) as f64 / f[0] * wq[o][0] + xm.get(t, 1) as f64 / f[1] * wq[o][1];
            mae[k] += (yh - y).abs();
            mse[k] += (yh - y) * (yh - y);
        }
    }
    let sens = ModalWeights::new(gv, gl).unwrap();
    let specs = CalibSpecs { weight: QuantSpec::sym_per_channel(3), act: None };
    let cases = [
        (ObjectiveKind::CweMse, (mse[0] + mse[1]) / 6.0),
        (ObjectiveKind::balanced(), mse[1] / count[1] + 0.1 * mse[0] / count[0]),
        (ObjectiveKind::MbqMse, gl * mse[1] / count[1] + gv * mse[0] / count[0]),
        (ObjectiveKind::MbqMae, gl * mae[1] / count[1] + gv * mae[0] / count[0]),
    ];
    for (kind, want) in cases {
        let got = recon_loss(&w, &x, &e, &specs, &wo(kind), Some(sens)).unwrap();
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-9), "{kind:?}: {got} vs {want}");
        assert!(want > 0.0);
    }
}

#[test]
fn unit_weights_give_summed_modal_mae() {
    let (w, x) = random_case(3, 12, 6, 4);
    let specs = w3();
    let e = EqualizationVector::identity(6);
    let got = recon_loss(&w, &x, &e, &specs, &wo(ObjectiveKind::MbqMae), Some(ModalWeights::new(1.0, 1.0).unwrap())).unwrap();
    let wq = mbq_core::quant::fake_quant(&w, &specs.weight.fit_to(6)).unwrap();
    let (mut s, mut n) = ([0.0f64; 2], [0.0f64; 2]);
    for t in 0..12 {
        let k = (x.tags()[t] == L) as usize;
        for o in 0..4 {
            let y: f64 = (0..6).map(|c| x.tokens().get(t, c) as f64 * w.get(o, c) as f64).sum();
            let yh: f64 = (0..6).map(|c| x.tokens().get(t, c) as f64 * wq.get(o, c) as f64).sum();
            s[k] += (yh - y).abs();
            n[k] += 1.0;
        }
    }
    let want = s[0] / n[0] + s[1] / n[1];
    assert!((got - want).abs() <= 1e-6 * want);
}

#[test]
fn singleton_grid_returns_its_point() {
    let (w, x) = random_case(4, 10, 8, 4);
    let r = search(&w, &x, &w3(), &wo(ObjectiveKind::CweMse), None, &SearchGrid::alphas(vec![0.0])).unwrap();
    assert_eq!(r.chosen, Candidate::Alpha(0.0));
    assert_eq!(r.candidate_values.len(), 1);
    assert_eq!(r.objective_value, r.candidate_values[0].1);
}

#[test]
fn ties_go_to_the_smallest_alpha() {
    // Uniform stats make every candidate the all-ones vector.
    let w = Matrix::from_rows(&[&[1.0, -1.0, 1.0, -1.0], &[0.5, 0.5, -0.5, -0.5]]).unwrap();
    let x = ModalBatch::new(Matrix::from_rows(&[&[1.0, 1.0, -1.0, 1.0], &[-1.0, 1.0, 1.0, 1.0]]).unwrap(), vec![V, L]).unwrap();
    let grid = SearchGrid::alphas(vec![0.0, 0.5, 1.0]);
    let r = search(&w, &x, &w3(), &wo(ObjectiveKind::CweMse), None, &grid).unwrap();
    assert_eq!(r.chosen, Candidate::Alpha(0.0));
    let with_id = search(&w, &x, &w3(), &wo(ObjectiveKind::CweMse), None, &SearchGrid::default()).unwrap();
    assert_eq!(with_id.chosen, Candidate::Identity);
}

#[test]
fn configuration_errors() {
    let (w, x) = random_case(5, 6, 4, 3);
    let grid = SearchGrid::default();
    let wa = CalibObjective { kind: ObjectiveKind::CweMse, mode: CalibMode::WeightActivation };
    assert!(matches!(search(&w, &x, &w3(), &wa, None, &grid), Err(Error::Config(_))));
    assert!(matches!(search(&w, &x, &w3(), &wo(ObjectiveKind::MbqMae), None, &grid), Err(Error::Config(_))));
    assert!(matches!(search(&w, &x, &w3(), &wo(ObjectiveKind::CweMse), None, &SearchGrid::alphas(vec![])), Err(Error::Config(_))));
    let bad = CalibSpecs { weight: QuantSpec::asym_group(5, 128), act: None };
    assert!(matches!(search(&w, &x, &bad, &wo(ObjectiveKind::CweMse), None, &grid), Err(Error::Config(_))));
    assert!(matches!(ablation_tokenwise(&w, &x, &[1.0, 1.0, -1.0, 1.0, 1.0, 1.0], &w3(), CalibMode::WeightOnly, &grid), Err(Error::Domain(_))));
    assert!(matches!(search(&Matrix::zeros(3, 5), &x, &w3(), &wo(ObjectiveKind::CweMse), None, &grid), Err(Error::Shape(_))));
}

#[test]
fn empty_modality_contributes_nothing() {
    let (w, x) = random_case(6, 8, 6, 4);
    let lang = x.retag(vec![L; 8]).unwrap();
    let e = EqualizationVector::identity(6);
    let mae = |g: ModalWeights| recon_loss(&w, &lang, &e, &w3(), &wo(ObjectiveKind::MbqMae), Some(g)).unwrap();
    let a = mae(ModalWeights::new(0.0, 1.0).unwrap());
    let b = mae(ModalWeights::new(123.0, 1.0).unwrap());
    assert_eq!(a, b);
    assert!(a > 0.0);
}

#[test]
fn weight_activation_mode_runs() {
    let (w, x) = random_case(7, 9, 8, 5);
    let specs = CalibSpecs { weight: QuantSpec::sym_per_channel(8), act: Some(QuantSpec::sym_per_token(8)) };
    let obj = CalibObjective { kind: ObjectiveKind::MbqMae, mode: CalibMode::WeightActivation };
    let g = ModalWeights::new(0.2, 1.0).unwrap();
    let r = search(&w, &x, &specs, &obj, Some(g), &SearchGrid::default()).unwrap();
    let wonly = search(&w, &x, &specs, &wo(ObjectiveKind::MbqMae), Some(g), &SearchGrid::default()).unwrap();
    assert!(r.objective_value > 0.0);
    assert_ne!(r.candidate_values, wonly.candidate_values);
}

#[test]
fn tokenwise_reductions() {
    let (w, x) = random_case(8, 12, 8, 4);
    let grid = SearchGrid::default();
    let g = ModalWeights::new(0.25, 1.5).unwrap();
    let tw: Vec<f64> = x.tags().iter().map(|t| if *t == V { 0.25 } else { 1.5 }).collect();
    let a = ablation_tokenwise(&w, &x, &tw, &w3(), CalibMode::WeightOnly, &grid).unwrap();
    let b = search(&w, &x, &w3(), &wo(ObjectiveKind::MbqMae), Some(g), &grid).unwrap();
    for ((ca, va), (cb, vb)) in a.candidate_values.iter().zip(&b.candidate_values) {
        assert_eq!(ca, cb);
        assert!((va - vb).abs() <= 1e-12 * vb.abs());
    }

    let ones = ablation_tokenwise(&w, &x, &[1.0; 12], &w3(), CalibMode::WeightOnly, &grid).unwrap();
    let unweighted = search(&w, &x, &w3(), &wo(ObjectiveKind::MbqMae), Some(ModalWeights::new(1.0, 1.0).unwrap()), &grid).unwrap();
    assert_eq!(ones.chosen, unweighted.chosen);

    let zero = ablation_tokenwise(&w, &x, &[0.0; 12], &w3(), CalibMode::WeightOnly, &grid).unwrap();
    assert!(zero.candidate_values.iter().all(|(_, v)| *v == 0.0));
    assert_eq!(zero.chosen, Candidate::Identity);
    let zero_alpha = ablation_tokenwise(&w, &x, &[0.0; 12], &w3(), CalibMode::WeightOnly, &SearchGrid::alphas(grid.alphas.clone())).unwrap();
    assert_eq!(zero_alpha.chosen, Candidate::Alpha(0.0));
}

#[test]
fn random_split_with_unit_weights_is_global_mae() {
    let (w, x) = random_case(9, 16, 8, 4);
    let grid = SearchGrid::default();
    let one = ModalWeights::new(1.0, 1.0).unwrap();
    let r = ablation_random_split(&w, &x, &w3(), CalibMode::WeightOnly, one, &grid, &mut Rng::new(3)).unwrap();
    // Oracle: argmin of the global element MAE over the same candidates.
    let stats = channel_stats(&x, &w).unwrap();
    let mut best = (f64::INFINITY, Candidate::Identity);
    for c in grid.candidates() {
        let e = match c {
            Candidate::Identity => EqualizationVector::identity(8),
            Candidate::Alpha(a) => candidate_equalization(&stats, a).unwrap(),
        };
        let wq = mbq_core::quant::fake_quant(&w.scale_cols(e.factors()).unwrap(), &QuantSpec::asym_group(3, 8)).unwrap();
        let mut s = 0.0f64;
        for t in 0..16 {
            for o in 0..4 {
                let y: f64 = (0..8).map(|k| x.tokens().get(t, k) as f64 * w.get(o, k) as f64).sum();
                let yh: f64 = (0..8).map(|k| x.tokens().get(t, k) as f64 / e.factors()[k] as f64 * wq.get(o, k) as f64).sum();
                s += (yh - y).abs();
            }
        }
        if s < best.0 * (1.0 - 1e-12) {
            best = (s, c);
        }
    }
    assert_eq!(r.chosen, best.1);
    let again = ablation_random_split(&w, &x, &w3(), CalibMode::WeightOnly, one, &grid, &mut Rng::new(3)).unwrap();
    assert_eq!(r, again);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn argmin_dominates_every_candidate(seed in 0u64..1000, kind in 0usize..4) {
        let (w, x) = random_case(seed, 10, 8, 6);
        let g = ModalWeights::new(0.3, 1.0).unwrap();
        let kind = [ObjectiveKind::CweMse, ObjectiveKind::balanced(), ObjectiveKind::MbqMse, ObjectiveKind::MbqMae][kind];
        let r = search(&w, &x, &w3(), &wo(kind), Some(g), &SearchGrid::default()).unwrap();
        let stats = channel_stats(&x, &w).unwrap();
        for (c, v) in &r.candidate_values {
            prop_assert!(r.objective_value <= *v);
            let e = match c {
                Candidate::Identity => EqualizationVector::identity(8),
                Candidate::Alpha(a) => candidate_equalization(&stats, *a).unwrap(),
            };
            prop_assert_eq!(recon_loss(&w, &x, &e, &w3(), &wo(kind), Some(g)).unwrap(), *v);
        }
        let first = r.candidate_values.iter().position(|(_, v)| *v == r.objective_value).unwrap();
        prop_assert_eq!(r.candidate_values[first].0, r.chosen);
    }

    #[test]
    fn mbq_choice_beats_cwe_choice_under_mbq(seed in 0u64..1000) {
        let (w, x) = random_case(seed, 12, 8, 6);
        let g = ModalWeights::new(0.1, 1.0).unwrap();
        let grid = SearchGrid::default();
        let mbq = search(&w, &x, &w3(), &wo(ObjectiveKind::MbqMae), Some(g), &grid).unwrap();
        let cwe = search(&w, &x, &w3(), &wo(ObjectiveKind::CweMse), None, &grid).unwrap();
        let at_cwe = recon_loss(&w, &x, &cwe.e, &w3(), &wo(ObjectiveKind::MbqMae), Some(g)).unwrap();
        prop_assert!(mbq.objective_value <= at_cwe);
    }

    #[test]
    fn positive_scaling_keeps_the_choice(seed in 0u64..1000, gv in 0.01f64..2.0, gl in 0.01f64..2.0, k in 0.1f64..10.0) {
        let (w, x) = random_case(seed, 10, 8, 4);
        let grid = SearchGrid::default();
        for kind in [ObjectiveKind::MbqMse, ObjectiveKind::MbqMae] {
            let a = search(&w, &x, &w3(), &wo(kind), Some(ModalWeights::new(gv, gl).unwrap()), &grid).unwrap();
            let b = search(&w, &x, &w3(), &wo(kind), Some(ModalWeights::new(gv * k, gl * k).unwrap()), &grid).unwrap();
            prop_assert_eq!(a.chosen, b.chosen);
        }
    }

    #[test]
    fn equal_sensitivities_reduce_to_balanced(seed in 0u64..1000, g in 0.01f64..5.0) {
        let (w, x) = random_case(seed, 10, 8, 4);
        let grid = SearchGrid::default();
        let a = search(&w, &x, &w3(), &wo(ObjectiveKind::MbqMse), Some(ModalWeights::new(g, g).unwrap()), &grid).unwrap();
        let b = search(&w, &x, &w3(), &wo(ObjectiveKind::BalancedCwe { vision_factor: 1.0 }), None, &grid).unwrap();
        prop_assert_eq!(a.chosen, b.chosen);
    }

    #[test]
    fn equalization_is_lossless_in_full_precision(seed in 0u64..1000, alpha in 0.0f64..1.0) {
        let (w, x) = random_case(seed, 7, 9, 5);
        let e = candidate_equalization(&channel_stats(&x, &w).unwrap(), alpha).unwrap();
        let y = x.tokens().matmul_t(&w).unwrap();
        let y_eq = x.tokens().scale_cols(&e.inverse()).unwrap().matmul_t(&w.scale_cols(e.factors()).unwrap()).unwrap();
        let scale = y.max_abs().max(1.0);
        prop_assert!(y.max_abs_diff(&y_eq) <= 1e-5 * scale);
    }
}

#[test]
fn asymmetric_group_matches_oracle() {
    let (w, x) = random_case(10, 3, 8, 2);
    let e = candidate_equalization(&channel_stats(&x, &w).unwrap(), 0.5).unwrap();
    let f: Vec<f64> = e.factors().iter().map(|v| *v as f64).collect();
    let wq: Vec<Vec<f64>> = (0..2).map(|r| fq_row(&(0..8).map(|c| w.get(r, c) as f64 * f[c]).collect::<Vec<_>>(), 3)).collect();
    let mut se = 0.0f64;
    for t in 0..3 {
        for o in 0..2 {
            let y: f64 = (0..8).map(|c| x.tokens().get(t, c) as f64 * w.get(o, c) as f64).sum();
            let yh: f64 = (0..8).map(|c| x.tokens().get(t, c) as f64 / f[c] * wq[o][c]).sum();
            se += (yh - y) * (yh - y);
        }
    }
    let want = se / 6.0;
    let got = recon_loss(&w, &x, &e, &w3(), &wo(ObjectiveKind::CweMse), None).unwrap();
    assert!(want > 1e-4);
    assert!((got - want).abs() <= 1e-5 * want, "{got} vs {want}");
}
