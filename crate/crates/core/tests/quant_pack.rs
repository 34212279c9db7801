use mbq_core::pack::{gemv_ref, gemv_w3_fused, pack_w3, pack_w4, unpack_w3, unpack_w4, PackedW3, Traffic};
use mbq_core::quant::{dequantize, fake_quant, quantize, QuantSpec};
use mbq_core::{Matrix, ModalBatch, Modality, Rng};
use proptest::prelude::*;

fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_uniform(rows, cols, -1.0, 1.0, &mut Rng::new(seed))
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_matrix(5, 4, 1);
    let b = rand_matrix(4, 3, 2);
    let c = a.matmul(&b).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0f64;
            for k in 0..4 {
                s += a.get(i, k) as f64 * b.get(k, j) as f64;
            }
            assert_eq!(c.get(i, j), s as f32);
        }
    }
    assert!(a.matmul(&a).is_err());
}

#[test]
fn scale_cols_round_trip() {
    let m = rand_matrix(6, 7, 3);
    let mut rng = Rng::new(4);
    let f: Vec<f32> = (0..7).map(|_| rng.uniform(0.05, 20.0)).collect();
    let inv: Vec<f32> = f.iter().map(|x| 1.0 / x).collect();
    let back = m.scale_cols(&f).unwrap().scale_cols(&inv).unwrap();
    for (a, b) in back.data().iter().zip(m.data()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6));
    }
    assert!(m.scale_cols(&[1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
}

#[test]
fn split_then_interleave_is_identity() {
    let mut rng = Rng::new(5);
    for n in [0usize, 1, 7, 30] {
        let tokens = Matrix::random_uniform(n, 3, -1.0, 1.0, &mut rng);
        let tags: Vec<Modality> =
            (0..n).map(|_| if rng.below(2) == 0 { Modality::Vision } else { Modality::Language }).collect();
        let b = ModalBatch::new(tokens, tags.clone()).unwrap();
        let (v, l) = b.split_by_tag();
        assert_eq!(v.rows() + l.rows(), n);
        assert_eq!(ModalBatch::interleave(&v, &l, tags).unwrap(), b);
    }
}

fn group_bound_holds(w: &Matrix, spec: &QuantSpec) {
    let q = quantize(w, spec).unwrap();
    let fq = dequantize(&q);
    let (lo, hi) = (spec.min_code() as i16, spec.max_code() as i16);
    assert!(q.codes.iter().all(|c| (lo..=hi).contains(c)));
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let s = q.scale_at(i, j) as f64;
            let err = (fq.get(i, j) as f64 - w.get(i, j) as f64).abs();
            assert!(err <= s / 2.0 + 1e-6, "({i},{j}) err {err} scale {s}");
        }
    }
}

#[test]
fn random_groups_stay_within_half_step() {
    for (seed, bits) in [(10u64, 3u8), (11, 4), (12, 8)] {
        let w = Matrix::random_normal(16, 256, 2.0, &mut Rng::new(seed));
        group_bound_holds(&w, &QuantSpec::asym_group(bits, 128));
        group_bound_holds(&w, &QuantSpec::sym_per_channel(bits));
    }
    let act = rand_matrix(4, 6, 13);
    group_bound_holds(&act, &QuantSpec::sym_per_token(8));
}

#[test]
fn eight_bit_symmetric_bound_from_absmax() {
    let m = rand_matrix(8, 40, 14);
    let fq = fake_quant(&m, &QuantSpec::sym_per_channel(8)).unwrap();
    for i in 0..m.rows() {
        let absmax = m.row(i).iter().fold(0.0f32, |a, x| a.max(x.abs())) as f64;
        for j in 0..m.cols() {
            assert!(((fq.get(i, j) - m.get(i, j)) as f64).abs() <= absmax / 254.0 + 1e-6);
        }
    }
}

#[test]
fn asym_group_hand_example() {
    // Z = -1, S = (3 - -1) / 7 over one group of eight.
    let w = Matrix::from_rows(&[&[-1.0, 3.0, 0.0, 1.0, 2.0, -0.5, 0.5, 2.9]]).unwrap();
    let q = quantize(&w, &QuantSpec::asym_group(3, 8)).unwrap();
    let s = q.scales[0] as f64;
    assert!((s - 4.0 / 7.0).abs() < 1e-7);
    let expect: Vec<i16> = w.row(0).iter().map(|x| ((*x as f64 + 1.0) / s + 0.5).floor() as i16).collect();
    assert_eq!(q.codes, expect);
    assert_eq!(q.codes[0], 0);
    assert_eq!(q.codes[1], 7);
    let fq = dequantize(&q);
    assert!((fq.get(0, 0) + 1.0).abs() < 1e-6 && (fq.get(0, 1) - 3.0).abs() < 1e-6);
}

#[test]
fn pack_layout_bytes() {
    assert_eq!(pack_w3(&[1, 0, 0, 0, 0, 0, 0, 0]).unwrap(), [0x01, 0, 0]);
    assert_eq!(pack_w3(&[7; 8]).unwrap(), [0xFF; 3]);
    assert_eq!(pack_w3(&[0, 1, 0, 0, 0, 0, 0, 0]).unwrap(), [0x08, 0, 0]);
    assert_eq!(pack_w3(&[0, 0, 0, 0, 0, 0, 0, 5]).unwrap(), [0, 0, 0xA0]);
    assert_eq!(pack_w4(&[0x1, 0x2]).unwrap(), [0x21]);
    assert_eq!(pack_w4(&[0xF, 0xF]).unwrap(), [0xFF]);
    assert!(pack_w3(&[8, 0, 0, 0, 0, 0, 0, 0]).is_err());
    assert!(pack_w4(&[16]).is_err());
    assert!(unpack_w3(&[0, 0], 8).is_err());
}

#[test]
fn gemv_ref_matches_loop_oracle() {
    let w = rand_matrix(9, 13, 20);
    let x: Vec<f32> = rand_matrix(1, 13, 21).into_data();
    let y = gemv_ref(&w, &x).unwrap();
    for (i, yi) in y.iter().enumerate() {
        let mut s = 0.0f64;
        for (j, xj) in x.iter().enumerate() {
            s += w.get(i, j) as f64 * *xj as f64;
        }
        assert_eq!(*yi, s as f32);
    }
    assert_eq!(gemv_ref(&Matrix::identity(13), &x).unwrap(), x);
}

fn packed_instance(rows: usize, cols: usize, group: usize, seed: u64) -> (PackedW3, Matrix) {
    let w = Matrix::random_normal(rows, cols, 1.0, &mut Rng::new(seed));
    let q = quantize(&w, &QuantSpec::asym_group(3, group).fit_to(cols)).unwrap();
    (PackedW3::from_quantized(&q).unwrap(), dequantize(&q))
}

#[test]
fn fused_gemv_matches_two_step_path() {
    for (rows, cols, group, seed) in [(8, 8, 8, 30), (17, 256, 128, 31), (5, 100, 128, 32), (3, 60, 20, 33)] {
        let (p, dense) = packed_instance(rows, cols, group, seed);
        assert_eq!(p.bytes.len(), rows * cols.div_ceil(8) * 3);
        let x = rand_matrix(1, cols, seed + 100).into_data();
        let fused = gemv_w3_fused(&p, &x).unwrap();
        let reference = gemv_ref(&dense, &x).unwrap();
        let ymax = reference.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        for (a, b) in fused.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + ymax), "{rows}x{cols}: {a} vs {b}");
        }
        // A unit vector reads one dequantized column.
        let mut e = vec![0.0f32; cols];
        e[cols - 1] = 1.0;
        let col = gemv_w3_fused(&p, &e).unwrap();
        for (r, c) in col.iter().enumerate() {
            assert!((c - dense.get(r, cols - 1)).abs() < 1e-6);
        }
        assert!(gemv_w3_fused(&p, &x[1..]).is_err());
    }
}

#[test]
fn traffic_formula_is_byte_exact() {
    for (rows, cols) in [(3584, 3584), (3584, 10752), (3584, 18944), (18944, 3584)] {
        let t = Traffic::w3(rows, cols, 128);
        assert_eq!(t.reference_bytes, (rows * cols * 4) as u64);
        assert_eq!(t.packed_payload_bytes, (rows * cols * 3 / 8) as u64);
        assert_eq!(t.metadata_bytes, (rows * cols / 128 * 8) as u64);
        assert!(t.ratio_equals(7, 64));
        assert!((t.payload_ratio() - 3.0 / 32.0).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fake_quant_idempotent(seed in any::<u64>(), bits in prop::sample::select(vec![3u8, 4, 8]), scale in 0.01f32..100.0, shift in -50.0f32..50.0) {
        let m = Matrix::random_normal(3, 32, scale, &mut Rng::new(seed));
        let m = Matrix::from_fn(3, 32, |i, j| m.get(i, j) + shift).unwrap();
        for spec in [QuantSpec::asym_group(bits, 16), QuantSpec::sym_per_channel(bits), QuantSpec::sym_per_token(bits)] {
            let once = fake_quant(&m, &spec).unwrap();
            prop_assert_eq!(fake_quant(&once, &spec).unwrap(), once);
        }
    }

    #[test]
    fn codecs_round_trip(codes in prop::collection::vec(0u8..8, 0..100), nibbles in prop::collection::vec(0u8..16, 0..100)) {
        let n = codes.len();
        let mut padded = codes.clone();
        padded.resize(n.div_ceil(8) * 8, 0);
        prop_assert_eq!(unpack_w3(&pack_w3(&padded).unwrap(), n).unwrap(), codes);
        prop_assert_eq!(unpack_w4(&pack_w4(&nibbles).unwrap(), nibbles.len()).unwrap(), nibbles);
    }
}
