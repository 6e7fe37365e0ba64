//! Module outputs against hand-derived values and loop-nest references.

mod support;

use daonet_core::dafm::{self, Dafm, DafmConfig};
use daonet_core::dsconv::{Dsconv, DsconvConfig};
use daonet_core::kernels::{self, ConvGeom};
use daonet_core::model::{self, ModelConfig, Variant};
use daonet_core::oahead::{Oahead, OaheadConfig};
use daonet_core::rng::Rng;
use daonet_core::store::WeightStore;
use daonet_core::tape::Tape;
use daonet_core::Tensor;

fn forward1(store: &WeightStore, x: &Tensor, f: impl FnOnce(&mut Tape, &daonet_core::tape::Params, daonet_core::tape::Var) -> daonet_core::tape::Var) -> Tensor {
    let mut t = Tape::new();
    let p = t.bind(store);
    let xv = t.leaf(x.clone());
    let y = f(&mut t, &p, xv);
    t.value(y).clone()
}

#[test]
fn attention_matches_loop_reference() {
    let (n, c, h, w) = (2, 4, 3, 2);
    let q = support::lcg_tensor(&[n, c, h, w], 1);
    let k = support::lcg_tensor(&[n, c, h, w], 2);
    let v = support::lcg_tensor(&[n, c, h, w], 3);
    let a = -1.7f32;
    let mut t = Tape::new();
    let vars: Vec<_> = [&q, &k, &v].iter().map(|x| t.leaf((*x).clone())).collect();
    let av = t.leaf(Tensor::new(&[1], vec![a]).unwrap());
    let (out, map) = dafm::attention(&mut t, vars[0], vars[1], vars[2], av).unwrap();
    let (out, map) = (t.value(out).clone(), t.value(map).clone());

    let hw = h * w;
    let at = |x: &Tensor, b: usize, ch: usize, p: usize| x.data()[(b * c + ch) * hw + p] as f64;
    for b in 0..n {
        let mut m = vec![vec![0f64; c]; c];
        for i in 0..c {
            let logits: Vec<f64> = (0..c).map(|j| (0..hw).map(|p| at(&k, b, i, p) * at(&q, b, j, p)).sum::<f64>() / a.abs() as f64).collect();
            m[i] = support::softmax_rows(&logits);
            for j in 0..c {
                assert!((map.data()[(b * c + i) * c + j] as f64 - m[i][j]).abs() < 1e-6);
            }
        }
        for j in 0..c {
            for p in 0..hw {
                let want: f64 = (0..c).map(|i| m[i][j] * at(&v, b, i, p)).sum();
                assert!((at(&out, b, j, p) - want).abs() < 1e-5, "b{b} c{j} p{p}");
            }
        }
    }
}

#[test]
fn residual_only_dafm_returns_input() {
    let m = Dafm::new("dafm", DafmConfig::new(16)).unwrap();
    let mut s = WeightStore::new();
    m.init(&mut s, &mut Rng::new(11)).unwrap();
    dafm::residual_only(&m, &mut s);
    let x = support::lcg_tensor(&[1, 16, 4, 5], 5);
    let y = forward1(&s, &x, |t, p, v| m.forward(t, p, v).unwrap());
    assert!(y.bit_eq(&x));
}

#[test]
fn oahead_with_zero_fc2_halves_input() {
    let m = Oahead::new("oahead", OaheadConfig::new(8)).unwrap();
    let mut s = WeightStore::new();
    m.init(&mut s, &mut Rng::new(2)).unwrap();
    s.zero_prefix("oahead.fc2.");
    let x = support::lcg_tensor(&[2, 8, 3, 3], 4);
    let y = forward1(&s, &x, |t, p, v| m.forward(t, p, v).unwrap());
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn dsconv_uniform_weights_average_branches() {
    let m = Dsconv::new("ds", DsconvConfig::new(8)).unwrap();
    let mut s = WeightStore::new();
    m.init(&mut s, &mut Rng::new(6)).unwrap();
    s.zero_prefix("ds.fc_score.");
    let x = support::lcg_tensor(&[1, 8, 6, 6], 8);
    let mut t = Tape::new();
    let p = t.bind(&s);
    let xv = t.leaf(x);
    let parts = m.forward_parts(&mut t, &p, xv).unwrap();
    let out = t.value(parts.out).clone();
    let branches: Vec<_> = parts.branches.iter().map(|b| t.value(*b).clone()).collect();
    for i in 0..out.len() {
        let mean = branches.iter().map(|b| b.data()[i] as f64).sum::<f64>() / 3.0;
        assert!((out.data()[i] as f64 - mean).abs() < 1e-6);
    }
}

#[test]
fn dsconv_strip_branches_match_loop_conv() {
    // Square, vertical strip, horizontal strip; each depthwise then pointwise.
    let m = Dsconv::new("ds", DsconvConfig::new(4)).unwrap();
    let mut s = WeightStore::new();
    m.init(&mut s, &mut Rng::new(9)).unwrap();
    let x = support::lcg_tensor(&[1, 4, 7, 6], 3);
    let mut t = Tape::new();
    let p = t.bind(&s);
    let xv = t.leaf(x.clone());
    let parts = m.forward_parts(&mut t, &p, xv).unwrap();
    for (bi, (dw, pw)) in [("dw_square", "pw_square"), ("dw_vert", "pw_vert"), ("dw_horz", "pw_horz")].iter().enumerate() {
        let wd = s.get(&format!("ds.{dw}.weight")).unwrap_or_else(|| panic!("ds.{dw}.weight"));
        let (kh, kw) = (wd.dims()[2], wd.dims()[3]);
        let mid = support::conv2d(&x, wd, s.get(&format!("ds.{dw}.bias")), &support::Conv { stride: 1, pad: (kh / 2, kw / 2), groups: 4 });
        let want = support::conv2d(&mid, s.get(&format!("ds.{pw}.weight")).unwrap(), s.get(&format!("ds.{pw}.bias")), &support::Conv { stride: 1, pad: (0, 0), groups: 1 });
        let got = t.value(parts.branches[bi]);
        assert!(support::max_abs(got, &want) < 1e-5, "branch {dw}");
    }
}

#[test]
fn conv_of_ones_counts_window_overlap() {
    let ones = Tensor::<f32>::ones(&[1, 1, 3, 3]).unwrap();
    let y = kernels::conv2d(&ones, &ones, None, ConvGeom { stride: 1, pad_h: 1, pad_w: 1, groups: 1 }).unwrap();
    assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
}

#[test]
fn channel_shuffle_of_tags() {
    let tags = Tensor::new(&[1, 6, 1, 1], (0..6).map(|v| v as f32).collect()).unwrap();
    assert_eq!(kernels::channel_shuffle(&tags, 2).unwrap().data(), &[0., 3., 1., 4., 2., 5.]);
    assert_eq!(kernels::channel_shuffle(&tags, 3).unwrap().data(), &[0., 2., 4., 1., 3., 5.]);
}

#[test]
fn full_scale_totals() {
    // Backbone subtotals from a layer-by-layer hand tally of the nano network.
    let base = model::cost_report(&ModelConfig::baseline()).unwrap();
    let dao = model::cost_report(&ModelConfig::daonet()).unwrap();
    assert_eq!(base.subtotal("backbone.").params, 1_105_920);
    let ds = model::cost_report(&ModelConfig::new("dsconv".parse::<Variant>().unwrap())).unwrap();
    assert_eq!(ds.subtotal("backbone.").params, 711_474);
    assert!(dao.total_params() < base.total_params());
}
