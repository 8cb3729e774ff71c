//! Randomized properties with shrinking, over seeded size-bounded
//! generators.

use proptest::prelude::*;
use qsvd::factorize::{compute_whitening, factorize_layer, WhiteningTransform, WHITENING_FLOOR};
use qsvd::linalg::{matmul, orthogonality_defect, random_orthogonal, svd, DenseMatrix};
use qsvd::model::AttentionLayerWeights;
use qsvd::quant::{quantize_tensor, Granularity};
use qsvd::store::{parse_manifest_bytes, ManifestEntry, Tensor, TensorManifest};
use std::collections::HashMap;

fn matrix_strategy(max_dim: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-100.0..100.0f64, r * c)
            .prop_map(move |data| DenseMatrix::from_vec(r, c, data).unwrap())
    })
}

fn layer_strategy(e: usize) -> impl Strategy<Value = AttentionLayerWeights> {
    proptest::collection::vec(-2.0..2.0f64, 3 * e * e).prop_map(move |data| {
        let w = DenseMatrix::from_vec(e, 3 * e, data).unwrap();
        AttentionLayerWeights {
            w_q: w.col_slice(0, e),
            w_k: w.col_slice(e, 2 * e),
            w_v: w.col_slice(2 * e, 3 * e),
            w_o: DenseMatrix::identity(e),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn svd_reconstructs_and_orders(m in matrix_strategy(8)) {
        let f = svd(&m).unwrap();
        let rebuilt = matmul(&matmul(&f.u, &DenseMatrix::diag(&f.sigma)).unwrap(), &f.vt).unwrap();
        let err = rebuilt.sub(&m).unwrap().max_abs();
        prop_assert!(err <= 1e-8 * m.max_abs().max(1.0), "reconstruction {err}");
        for pair in f.sigma.windows(2) {
            prop_assert!(pair[0] >= pair[1], "sigma not sorted: {:?}", f.sigma);
        }
        prop_assert!(f.sigma.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn svd_factors_orthogonal(m in matrix_strategy(8)) {
        let f = svd(&m).unwrap();
        prop_assert!(orthogonality_defect(&f.u) <= 1e-9);
        prop_assert!(orthogonality_defect(&f.vt.transpose()) <= 1e-9);
    }

    #[test]
    fn generated_orthogonal_matrices_pass(dim in 1usize..12, seed in 0u64..1000) {
        let q = random_orthogonal(dim, seed).unwrap();
        prop_assert!(orthogonality_defect(&q) <= 1e-10);
    }

    #[test]
    fn whitening_diagonal_floored(xs in proptest::collection::vec(-1e-9..1e-9f64, 8)) {
        // Tiny activations cannot produce scales below the floor.
        let x = DenseMatrix::from_vec(1, 8, xs).unwrap();
        let w = compute_whitening(&[x]).unwrap();
        prop_assert!(w.diag.iter().all(|&d| d >= WHITENING_FLOOR));
    }

    #[test]
    fn factor_product_is_beta_invariant(layer in layer_strategy(4), beta in 0.0..=1.0f64) {
        let half = factorize_layer(&layer, &WhiteningTransform::identity(4), 0.5).unwrap();
        let other = half.with_beta(beta).unwrap();
        let a = matmul(&half.w_down, &half.w_up_concat()).unwrap();
        let b = matmul(&other.w_down, &other.w_up_concat()).unwrap();
        prop_assert!(a.sub(&b).unwrap().max_abs() <= 1e-9);
    }

    #[test]
    fn quantized_codes_stay_on_grid(m in matrix_strategy(6), bits in prop_oneof![Just(4u32), Just(8u32)]) {
        let q = quantize_tensor(&m, bits, Granularity::PerRow, 1.0).unwrap();
        let qmax = (1i32 << (bits - 1)) - 1;
        prop_assert!(q.codes.iter().all(|c| c.abs() <= qmax));
        // Dequantized values are exactly code * scale.
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let want = q.codes[r * m.cols() + c] as f64 * q.scales[r];
                prop_assert_eq!(q.dequant.get(r, c), want);
            }
        }
    }

    #[test]
    fn quantization_error_bounded_by_half_step(m in matrix_strategy(6)) {
        let q = quantize_tensor(&m, 8, Granularity::PerRow, 1.0).unwrap();
        for r in 0..m.rows() {
            let half_step = q.scales[r] / 2.0 * (1.0 + 1e-12);
            for c in 0..m.cols() {
                let err = (q.dequant.get(r, c) - m.get(r, c)).abs();
                prop_assert!(err <= half_step, "({r},{c}): {err} > {half_step}");
            }
        }
    }

    #[test]
    fn manifest_json_round_trips(names in proptest::collection::btree_set("[a-z]{1,8}", 1..5)) {
        let tensors: HashMap<String, Tensor> = names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                (n.clone(), Tensor { shape: vec![1, i + 1], data: vec![i as f64; i + 1] })
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        qsvd::store::save_container(dir.path(), None, &tensors).unwrap();
        let (_, back) = qsvd::store::load_container(dir.path()).unwrap();
        prop_assert_eq!(tensors.len(), back.len());
        for (name, t) in &tensors {
            // f32 storage: values snapped but shapes exact.
            prop_assert_eq!(&back[name].shape, &t.shape);
        }
    }
}

#[test]
fn manifest_rejects_structural_mutations() {
    let manifest = TensorManifest {
        format_version: 1,
        checksum: "00".into(),
        entries: vec![ManifestEntry {
            name: "w".into(),
            shape: vec![2, 2],
            dtype: "f32".into(),
            offset: 0,
            length: 16,
        }],
        model_config: None,
    };
    let json = serde_json::to_vec(&manifest).unwrap();
    assert!(parse_manifest_bytes(&json).is_ok());

    // Unknown field.
    let with_extra = String::from_utf8(json.clone())
        .unwrap()
        .replacen("\"format_version\"", "\"extra\":1,\"format_version\"", 1);
    assert!(parse_manifest_bytes(with_extra.as_bytes()).is_err());

    // Wrong version.
    let wrong_version = String::from_utf8(json)
        .unwrap()
        .replacen("\"format_version\":1", "\"format_version\":9", 1);
    assert!(parse_manifest_bytes(wrong_version.as_bytes()).is_err());

    // Not JSON at all.
    assert!(parse_manifest_bytes(b"\x00\x01\x02").is_err());
}
