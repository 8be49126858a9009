use proptest::prelude::*;
use wmka_core::autograd::{Tape, Var};
use wmka_core::blocks::*;
use wmka_core::params::{Initializer, ParamStore, Session};
use wmka_core::tensor::{add, concat_channels, conv2d, relu, ConvSpec, NormMode, Tensor4};
use wmka_core::Result;
use wmka_testkit as oracle;

fn run(store: &ParamStore<f64>, x: &Tensor4<f64>, f: impl FnOnce(&mut Session<'_, f64>, Var) -> Result<Var>) -> Tensor4<f64> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, store, NormMode::Eval);
    let v = s.input(x.clone());
    let y = f(&mut s, v).unwrap();
    s.tape.value(y).clone()
}

fn declare(f: impl FnOnce(&mut ParamStore<f64>, &mut Initializer) -> Result<()>) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    f(&mut store, &mut Initializer::new(11)).unwrap();
    store
}

fn zero_all(store: &mut ParamStore<f64>) {
    for v in store.params.values_mut() {
        *v = Tensor4::zeros(v.shape()).unwrap();
    }
}

fn set(store: &mut ParamStore<f64>, name: &str, value: Tensor4<f64>) {
    *store.param_mut(name).unwrap() = value;
}

#[test]
fn conv_block_shape_zero_case_and_range() {
    let p = ConvBlockParams::new("b", 3, 64);
    let mut store = declare(|s, i| p.declare(s, i));
    let x = oracle::real_tensor(&mut oracle::rng(1), [1, 3, 16, 16]);
    let y = run(&store, &x, |s, v| conv_block_forward(s, v, &p));
    assert_eq!(y.shape(), [1, 64, 16, 16].into());
    assert!(y.data().iter().all(|&v| v >= 0.0));
    for name in ["b.conv1.weight", "b.conv2.weight"] {
        let shape = store.param(name).unwrap().shape();
        set(&mut store, name, Tensor4::zeros(shape).unwrap());
    }
    assert!(run(&store, &x, |s, v| conv_block_forward(s, v, &p)).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mkdc_zero_weights_is_identity_on_non_negative_input() {
    let p = MkdcParams::new("m", 8, DEFAULT_DILATIONS).unwrap();
    let mut store = declare(|s, i| p.declare(s, i));
    zero_all(&mut store);
    let x = oracle::real_tensor(&mut oracle::rng(2), [2, 8, 12, 12]).map(f64::abs);
    assert_eq!(run(&store, &x, |s, v| mkdc_forward(s, v, &p)), x);
}

#[test]
fn mkdc_preserves_shape_at_stage_width() {
    let p = MkdcParams::new("m", 64, [1, 3, 7, 11]).unwrap();
    let store = declare(|s, i| p.declare(s, i));
    let x = oracle::real_tensor(&mut oracle::rng(3), [1, 64, 32, 32]);
    assert_eq!(run(&store, &x, |s, v| mkdc_forward(s, v, &p)).shape(), [1, 64, 32, 32].into());
}

/// Store with only branch `i` active and a fuse conv that copies that
/// branch's channels through.
fn single_branch(p: &MkdcParams, i: usize, seed: u64) -> (ParamStore<f64>, Tensor4<f64>, Tensor4<f64>) {
    let c = p.channels;
    let mut store = declare(|s, init| p.declare(s, init));
    zero_all(&mut store);
    let mut rng = oracle::rng(seed);
    let w = oracle::real_tensor(&mut rng, [c, c, 3, 3]).map(|v| v.abs() + 0.1);
    let b = oracle::real_tensor(&mut rng, [1, c, 1, 1]).map(|v| v.abs());
    set(&mut store, &format!("m.branch{i}.weight"), w.clone());
    set(&mut store, &format!("m.branch{i}.bias"), b.clone());
    let fuse = Tensor4::from_fn([c, 4 * c, 1, 1], |o, k, _, _| if k == i * c + o { 1.0 } else { 0.0 }).unwrap();
    set(&mut store, "m.fuse.weight", fuse);
    (store, w, b)
}

#[test]
fn mkdc_single_branch_matches_primitive_composition() {
    let p = MkdcParams::new("m", 4, DEFAULT_DILATIONS).unwrap();
    let (store, w, b) = single_branch(&p, 0, 4);
    let x = oracle::real_tensor(&mut oracle::rng(5), [1, 4, 10, 10]);
    let got = run(&store, &x, |s, v| mkdc_forward(s, v, &p));
    let conv = conv2d(&x, &w, Some(b.data()), &ConvSpec::new(1, 1, 1)).unwrap();
    let want = relu(&add(&conv, &x).unwrap());
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn mkdc_branch_receptive_field() {
    let p = MkdcParams::new("m", 2, DEFAULT_DILATIONS).unwrap();
    let (h, w) = (27, 27);
    let x = oracle::real_tensor(&mut oracle::rng(6), [1, 2, h, w]).map(f64::abs);
    let (ci, cj) = (13, 13);
    for (i, &d) in DEFAULT_DILATIONS.iter().enumerate() {
        let (store, _, _) = single_branch(&p, i, 7 + i as u64);
        let base = run(&store, &x, |s, v| mkdc_forward(s, v, &p)).at(0, 0, ci, cj);
        for di in -(d as isize + 2)..=(d as isize + 2) {
            for dj in [-(d as isize) - 1, -(d as isize), 0, d as isize, d as isize + 1] {
                let (r, q) = ((ci as isize + di) as usize, (cj as isize + dj) as usize);
                let mut xp = x.clone();
                xp.set(0, 1, r, q, x.at(0, 1, r, q) + 1.0);
                let out = run(&store, &xp, |s, v| mkdc_forward(s, v, &p)).at(0, 0, ci, cj);
                let dist = di.unsigned_abs().max(dj.unsigned_abs());
                if dist > d {
                    assert_eq!(out, base, "branch {i} dilation {d}: pixel at distance {dist} leaked");
                } else if (di.unsigned_abs() == d || di == 0) && (dj.unsigned_abs() == d || dj == 0) {
                    assert!(out > base, "branch {i}: tap at ({di},{dj}) had no effect");
                }
            }
        }
    }
}

#[test]
fn se_and_cab_gating_cases() {
    let p = SeParams::new("se", 32, DEFAULT_REDUCTION).unwrap();
    let mut store = declare(|s, i| p.declare(s, i));
    let x = oracle::real_tensor(&mut oracle::rng(8), [2, 32, 5, 6]);
    let se = run(&store, &x, |s, v| se_block_forward(s, v, &p));
    assert_eq!(se, run(&store, &x, |s, v| cab_forward(s, v, &p)));
    assert_eq!(se.shape(), x.shape());

    zero_all(&mut store);
    let half = x.map(|v| 0.5 * v);
    assert_eq!(run(&store, &x, |s, v| se_block_forward(s, v, &p)), half);
    assert_eq!(run(&store, &x, |s, v| cab_forward(s, v, &p)), half);

    set(&mut store, "se.fc2.bias", Tensor4::full([1, 32, 1, 1], 20.0).unwrap());
    for y in [run(&store, &x, |s, v| se_block_forward(s, v, &p)), run(&store, &x, |s, v| cab_forward(s, v, &p))] {
        assert!(y.max_abs_diff(&x).unwrap() < 1e-8);
    }
}

#[test]
fn sab_single_position_returns_value_projection() {
    let p = SabParams::new("sab", 16).unwrap();
    let store = declare(|s, i| p.declare(s, i));
    let x = oracle::real_tensor(&mut oracle::rng(9), [2, 16, 1, 1]);
    let got = run(&store, &x, |s, v| sab_forward(s, v, &p));
    let v = conv2d(&x, store.param("sab.value.weight").unwrap(), Some(store.param("sab.value.bias").unwrap().data()), &ConvSpec::default()).unwrap();
    assert_eq!(got, v);
}

#[test]
fn sab_matches_dense_attention_oracle() {
    for (seed, (h, w)) in [(10, (2, 2)), (11, (3, 4)), (12, (5, 3))] {
        let p = SabParams::new("sab", 8).unwrap();
        let mut store = declare(|s, i| p.declare(s, i));
        let mut rng = oracle::rng(seed);
        for v in store.params.values_mut() {
            *v = oracle::real_tensor(&mut rng, { let s = v.shape(); [s.n, s.c, s.h, s.w] });
        }
        let x = oracle::real_tensor(&mut rng, [1, 8, h, w]);
        let got = run(&store, &x, |s, v| sab_forward(s, v, &p));
        assert_eq!(got.shape(), x.shape());
        let proj = |name: &str, ph: usize, pw: usize| {
            let wt = store.param(&format!("sab.{name}.weight")).unwrap();
            let b = store.param(&format!("sab.{name}.bias")).unwrap();
            oracle::conv2d(&x, wt, Some(b.data()), 1, ph, pw, 1)
        };
        let want = oracle::dense_attention(&proj("query", 0, 1), &proj("key", 1, 0), &proj("value", 0, 0));
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-10);
    }
}

#[test]
fn affinity_identity_and_channel_only_cases() {
    let p = AffinityParams::new("aff", 32, DEFAULT_REDUCTION).unwrap();
    let mut store = declare(|s, i| p.declare(s, i));
    let x = oracle::real_tensor(&mut oracle::rng(13), [2, 32, 4, 5]);
    let y = run(&store, &x, |s, v| affinity_attention_forward(s, v, &p));
    assert_eq!(y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());

    for name in ["aff.cab.fc1.weight", "aff.cab.fc1.bias", "aff.cab.fc2.weight", "aff.cab.fc2.bias"] {
        let shape = store.param(name).unwrap().shape();
        set(&mut store, name, Tensor4::zeros(shape).unwrap());
    }
    set(&mut store, "aff.gamma_c", Tensor4::scalar(1.0));
    let y = run(&store, &x, |s, v| affinity_attention_forward(s, v, &p));
    assert!(y.max_abs_diff(&x.map(|v| 1.5 * v)).unwrap() <= 1e-15);
}

#[test]
fn apf_zero_projection_and_composition() {
    let c = 16;
    let p = ApfParams::new("apf", c, 4).unwrap();
    let mut store = declare(|s, i| p.declare(s, i));
    let x = oracle::real_tensor(&mut oracle::rng(14), [1, c, 6, 8]);
    assert_eq!(run(&store, &x, |s, v| apf_forward(s, v, &p)).shape(), x.shape());

    let mut zeroed = store.clone();
    for name in ["apf.phi.weight", "apf.phi.bias"] {
        let shape = zeroed.param(name).unwrap().shape();
        set(&mut zeroed, name, Tensor4::zeros(shape).unwrap());
    }
    assert!(run(&zeroed, &x, |s, v| apf_forward(s, v, &p)).data().iter().all(|&v| v == 0.0));

    for name in ["apf.se.fc1.weight", "apf.se.fc1.bias", "apf.se.fc2.weight", "apf.se.fc2.bias", "apf.psi2.bias"] {
        let shape = store.param(name).unwrap().shape();
        set(&mut store, name, Tensor4::zeros(shape).unwrap());
    }
    let centre = Tensor4::from_fn([c, c, 3, 3], |o, i, u, v| if o == i && u == 1 && v == 1 { 1.0 } else { 0.0 }).unwrap();
    set(&mut store, "apf.psi2.weight", centre);
    let levels: Vec<f64> = (0..c).map(|k| 0.1 * k as f64 - 0.7).collect();
    let xc = Tensor4::from_fn([1, c, 6, 8], |_, k, _, _| levels[k]).unwrap();
    let got = run(&store, &xc, |s, v| apf_forward(s, v, &p));
    let pooled = xc.map(|v| 0.5 * v);
    let cat = concat_channels(&xc, &pooled).unwrap();
    let want = conv2d(&cat, store.param("apf.phi.weight").unwrap(), Some(store.param("apf.phi.bias").unwrap().data()), &ConvSpec::default()).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn apf_rejects_odd_spatial_dims() {
    let p = ApfParams::new("apf", 8, 4).unwrap();
    let store = declare(|s, i| p.declare(s, i));
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, NormMode::Eval);
    let v = s.input(Tensor4::zeros([1, 8, 5, 8]).unwrap());
    assert!(apf_forward(&mut s, v, &p).is_err());
}

fn fuse(store: &ParamStore<f64>, w: &FusionWeights, low: &Tensor4<f64>, high: &Tensor4<f64>) -> Tensor4<f64> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, store, NormMode::Eval);
    let (l, h) = (s.input(low.clone()), s.input(high.clone()));
    let y = udff_fuse(&mut s, l, h, w).unwrap();
    s.tape.value(y).clone()
}

fn learned_store(c: usize, seed: u64) -> (FusionWeights, ParamStore<f64>) {
    let w = FusionWeights::new("f", FusionMode::Learned, c);
    let mut store = ParamStore::new();
    w.declare(&mut store).unwrap();
    let mut rng = oracle::rng(seed);
    set(&mut store, "f.wlm.weight", oracle::real_tensor(&mut rng, [2, 2 * c, 1, 1]).map(|v| 3.0 * v));
    (w, store)
}

#[test]
fn fixed_fusion_reproduces_weighted_sum() {
    let w = FusionWeights::new("f", FusionMode::Fixed, 4);
    let store = ParamStore::new();
    let mut rng = oracle::rng(15);
    let (low, high) = (oracle::real_tensor(&mut rng, [2, 4, 3, 3]), oracle::real_tensor(&mut rng, [2, 4, 3, 3]));
    let want = low.zip_map(&high, |l, h| LOW_WEIGHT * l + HIGH_WEIGHT * h).unwrap();
    assert!(fuse(&store, &w, &low, &high).max_abs_diff(&want).unwrap() <= 1e-12);
    let zero = Tensor4::zeros(low.shape()).unwrap();
    assert!(fuse(&store, &w, &low, &zero).max_abs_diff(&low.map(|v| 0.7 * v)).unwrap() <= 1e-15);
    let ten = Tensor4::full([1, 1, 1, 1], 10.0).unwrap();
    let twenty = Tensor4::full([1, 1, 1, 1], 20.0).unwrap();
    assert_eq!(fuse(&store, &FusionWeights::new("f", FusionMode::Fixed, 1), &ten, &twenty).data(), &[13.0]);
}

#[test]
fn learned_weights_sum_to_one() {
    let (w, store) = learned_store(3, 16);
    let mut rng = oracle::rng(17);
    let (low, high) = (oracle::real_tensor(&mut rng, [3, 3, 4, 4]), oracle::real_tensor(&mut rng, [3, 3, 4, 4]));
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, NormMode::Eval);
    let (l, h) = (s.input(low), s.input(high));
    for (a, b) in fusion_weights(&mut s, l, h, &w).unwrap() {
        assert!((a + b - 1.0).abs() < 1e-15 && a > 0.0 && b > 0.0);
    }
}

proptest! {
    #[test]
    fn fusion_is_convex_in_both_modes(seed in any::<u64>(), learned in any::<bool>()) {
        let c = 3;
        let (w, store) = if learned {
            learned_store(c, seed)
        } else {
            (FusionWeights::new("f", FusionMode::Fixed, c), ParamStore::new())
        };
        let mut rng = oracle::rng(seed ^ 0x5eed);
        let (low, high) = (oracle::real_tensor(&mut rng, [2, c, 3, 4]), oracle::real_tensor(&mut rng, [2, c, 3, 4]));
        let out = fuse(&store, &w, &low, &high);
        for ((&o, &l), &h) in out.data().iter().zip(low.data()).zip(high.data()) {
            let slack = 4.0 * f64::EPSILON * l.abs().max(h.abs());
            prop_assert!(o >= l.min(h) - slack && o <= l.max(h) + slack);
        }
        prop_assert_eq!(fuse(&store, &w, &low, &low), low);
    }
}
