mod support;

use daonet_core::dafm::{Dafm, DafmConfig};
use daonet_core::dsconv::{Dsconv, DsconvConfig};
use daonet_core::kernels::{self, ConvGeom};
use daonet_core::oahead::{Oahead, OaheadConfig};
use daonet_core::rng::{rand_uniform, Rng};
use daonet_core::store::WeightStore;
use daonet_core::tape::Tape;
use daonet_core::Tensor;
use proptest::prelude::*;

fn tensor(dims: &[usize], seed: u64, scale: f32) -> Tensor {
    rand_uniform(&mut Rng::new(seed), dims, -scale, scale).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shuffle_is_a_bijection(per in 1usize..5, groups in 1usize..5, hw in 1usize..4, seed in any::<u64>()) {
        let c = per * groups;
        let x = tensor(&[2, c, hw, hw], seed, 1.0);
        let y = kernels::channel_shuffle(&x, groups).unwrap();
        prop_assert!(kernels::channel_unshuffle(&y, groups).unwrap().bit_eq(&x));
        let mut a: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..12, mag in prop::sample::select(vec![1.0f32, 30.0, 1e4]), seed in any::<u64>()) {
        let y = kernels::softmax(&tensor(&[rows, cols], seed, mag), 1).unwrap();
        for r in y.data().chunks(cols) {
            let s: f64 = r.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn conv_matches_loop_reference(
        n in 1usize..3, per in 1usize..4, groups in 1usize..3, out_per in 1usize..3,
        h in 3usize..9, w in 3usize..9, kh in prop::sample::select(vec![1usize, 3, 5]),
        kw in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        let c = per * groups;
        let x = tensor(&[n, c, h, w], seed, 1.0);
        let wt = tensor(&[out_per * groups, per, kh, kw], seed ^ 1, 1.0);
        let b = tensor(&[out_per * groups], seed ^ 2, 1.0);
        let g = ConvGeom { stride, pad_h: kh / 2, pad_w: kw / 2, groups };
        let got = kernels::conv2d(&x, &wt, Some(&b), g).unwrap();
        let want = support::conv2d(&x, &wt, Some(&b), &support::Conv { stride, pad: (kh / 2, kw / 2), groups });
        prop_assert!(support::max_abs(&got, &want) <= 1e-5);
    }

    #[test]
    fn tns_roundtrip_is_bitwise(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let t = tensor(&dims, seed, 1e3);
        let back = Tensor::from_tns_bytes(&t.to_tns_bytes()).unwrap();
        prop_assert!(back.bit_eq(&t));
    }

    #[test]
    fn truncated_tns_is_rejected(dims in prop::collection::vec(1usize..4, 1..4), cut in 1usize..9, seed in any::<u64>()) {
        let bytes = tensor(&dims, seed, 1.0).to_tns_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(Tensor::from_tns_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn dsconv_alpha_on_simplex(scale in prop::sample::select(vec![0.1f32, 1.0, 100.0]), seed in any::<u64>()) {
        let m = Dsconv::new("ds", DsconvConfig::new(8)).unwrap();
        let mut s = WeightStore::new();
        m.init(&mut s, &mut Rng::new(seed)).unwrap();
        let mut t = Tape::new();
        let p = t.bind(&s);
        let x = t.leaf(tensor(&[3, 8, 5, 5], seed ^ 7, scale));
        let a = m.weights(&mut t, &p, x).unwrap();
        for r in t.value(a).data().chunks(3) {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn oahead_gate_bounded_and_constant(seed in any::<u64>(), scale in prop::sample::select(vec![0.5f32, 5.0])) {
        let m = Oahead::new("oa", OaheadConfig::new(8)).unwrap();
        let mut s = WeightStore::new();
        m.init(&mut s, &mut Rng::new(seed)).unwrap();
        let x = tensor(&[2, 8, 4, 4], seed ^ 3, scale);
        let mut t = Tape::new();
        let p = t.bind(&s);
        let xv = t.leaf(x.clone());
        let parts = m.forward_parts(&mut t, &p, xv).unwrap();
        let (gate, out) = (t.value(parts.gate), t.value(parts.out));
        prop_assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
        for (i, (&o, &xv)) in out.data().iter().zip(x.data()).enumerate() {
            prop_assert_eq!(o, xv * gate.data()[i / 16]);
        }
    }

    #[test]
    fn dafm_is_sum_of_branches(seed in any::<u64>(), hw in 2usize..6) {
        let m = Dafm::new("dafm", DafmConfig::new(8).with_conv_groups(2)).unwrap();
        let mut s = WeightStore::new();
        m.init(&mut s, &mut Rng::new(seed)).unwrap();
        let x = tensor(&[1, 8, hw, hw + 1], seed ^ 5, 1.0);
        let mut t = Tape::new();
        let p = t.bind(&s);
        let xv = t.leaf(x);
        let parts = m.forward_parts(&mut t, &p, xv).unwrap();
        let sum = kernels::zip_with(t.value(parts.conv), t.value(parts.att), |a, b| a + b).unwrap();
        prop_assert!(t.value(parts.out).bit_eq(&sum));
        prop_assert_eq!(t.value(parts.out).dims(), &[1, 8, hw, hw + 1]);
    }

    #[test]
    fn store_roundtrip(seed in any::<u64>(), channels in prop::sample::select(vec![8usize, 16])) {
        let m = Dafm::new("dafm", DafmConfig::new(channels)).unwrap();
        let mut s = WeightStore::new();
        m.init(&mut s, &mut Rng::new(seed)).unwrap();
        let bytes = s.to_bytes();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        prop_assert!(back.bit_eq(&s));
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
