//! Property tests for the numeric invariants that hold on arbitrary inputs.

use proptest::prelude::*;

use uctransnet::data::checkpoint::{load_checkpoint, save_checkpoint};
use uctransnet::metrics::{dice, iou};
use uctransnet::model::ParamStore;
use uctransnet::tensor::{Graph, Tensor};

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(data in finite_vec(24), shift in -100.0f64..100.0) {
        let t = Tensor::new(&[4, 6], data).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.softmax(x, 1).unwrap();
        let yv = g.value(y).data().to_vec();
        for r in 0..4 {
            let s: f64 = yv[r * 6..(r + 1) * 6].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
        }
        let shifted = g.add_scalar(x, shift).unwrap();
        let y2 = g.softmax(shifted, 1).unwrap();
        for (a, b) in yv.iter().zip(g.value(y2).data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn norm_moment_bounds(data in finite_vec(30)) {
        let t = Tensor::new(&[5, 6], data).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = g.instance_norm(x).unwrap();
        let yv = g.value(y).data();
        let n = yv.len() as f64;
        let mean = yv.iter().sum::<f64>() / n;
        let var = yv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-6, "mean {mean}");
        prop_assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn dice_iou_identity_and_ordering(bits_a in proptest::collection::vec(any::<bool>(), 64),
                                      bits_b in proptest::collection::vec(any::<bool>(), 64)) {
        let d = dice(&bits_a, &bits_b);
        let j = iou(&bits_a, &bits_b);
        // Dice = 2·IoU/(1+IoU)
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-9);
        prop_assert!(d >= j - 1e-12);
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        // adding a correctly predicted pixel never decreases dice
        if let Some(i) = bits_a.iter().zip(&bits_b).position(|(&p, &t)| t && !p) {
            let mut grown = bits_a.clone();
            grown[i] = true;
            prop_assert!(dice(&grown, &bits_b) >= d - 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_arbitrary_tensors(data in finite_vec(12), rows in 1usize..4) {
        let cols = 12 / rows;
        let take = rows * cols;
        let t = Tensor::new(&[rows, cols], data[..take].to_vec()).unwrap();
        let mut store = ParamStore::new();
        store.insert("unet.test.weight", t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.uctn");
        save_checkpoint(&store, None, &path).unwrap();
        let back = load_checkpoint(&path).unwrap().param_store::<f64>();
        prop_assert_eq!(back.get("unet.test.weight").unwrap(), store.get("unet.test.weight").unwrap());
    }

    #[test]
    // realistic magnitudes: beyond |x| ≈ 37 a f64 sigmoid rounds to exactly 1
    fn cca_mask_bounded_on_random_inputs(o in proptest::collection::vec(-3.0f64..3.0, 12),
                                         d in proptest::collection::vec(-3.0f64..3.0, 12),
                                         l in proptest::collection::vec(-1.0f64..1.0, 18)) {
        use uctransnet::config::ModelConfig;
        use uctransnet::model::{register_params, cca};
        let mut store = ParamStore::new();
        store.insert("cca1.l1", Tensor::new(&[3, 3], l[..9].to_vec()).unwrap());
        store.insert("cca1.l2", Tensor::new(&[3, 3], l[9..].to_vec()).unwrap());
        let cfg = ModelConfig::default();
        let mut g = Graph::new();
        let leaves = register_params(&mut g, &store, false);
        let ov = g.constant(Tensor::new(&[3, 2, 2], o).unwrap());
        let dv = g.constant(Tensor::new(&[3, 2, 2], d).unwrap());
        let gate = cca::cca_gate(&mut g, &leaves, &cfg, 1, ov, dv).unwrap();
        for &m in g.value(gate.mask).data() {
            prop_assert!(m > 0.0 && m < 1.0);
        }
        for (y, x) in g.value(gate.output).data().iter().zip(g.value(ov).data()) {
            prop_assert!(y.abs() <= x.abs() + 1e-12);
        }
    }
}
