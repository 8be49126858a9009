use wmka_core::autograd::Tape;
use wmka_core::blocks::FusionMode;
use wmka_core::network::{init_params, parameter_layout, Network, NetworkConfig};
use wmka_core::params::Session;
use wmka_core::tensor::{NormMode, Tensor4};
use wmka_testkit as oracle;

/// Parameter count of a configuration from the layer list alone.
fn count_by_hand(cfg: &NetworkConfig) -> usize {
    let conv = |o: usize, i: usize, k: usize| o * i * k + o;
    let bn = |c: usize| 2 * c;
    let conv_block = |i: usize, o: usize| conv(o, i, 9) + bn(o) + conv(o, o, 9) + bn(o);
    let se = |c: usize| conv(c / cfg.reduction, c, 1) + conv(c, c / cfg.reduction, 1);
    let mkdc = |c: usize| 4 * conv(c, c, 9) + conv(c, 4 * c, 1);
    let sab = |c: usize| 2 * conv(c / 8, c, 3) + conv(c, c, 1);
    let apf = |c: usize| se(c) + conv(c, c, 9) + conv(c, 2 * c, 1);
    let fusion = |c: usize| if cfg.fusion == FusionMode::Learned { 2 * 2 * c + 2 } else { 0 };

    let ch = cfg.channels;
    let mut total = 0;
    let mut prev = cfg.in_channels;
    for &c in &ch {
        total += conv_block(prev, c) + if cfg.use_mkdc { mkdc(c) } else { 0 };
        prev = c;
    }
    total += conv_block(ch[3], cfg.bottleneck);
    if cfg.use_attention {
        total += sab(cfg.bottleneck) + se(cfg.bottleneck) + 2;
    }
    let mut prev = cfg.bottleneck;
    for j in 1..=4 {
        let c = ch[4 - j];
        total += prev * c * 4 + c + fusion(c) + conv_block(c, c);
        if cfg.use_apf && j <= 2 {
            total += apf(c);
        }
        prev = c;
    }
    total + conv(1, ch[0], 1)
}

/// Frozen once from the hand count above; guards against silent changes
/// to the default architecture.
const DEFAULT_PARAMETER_COUNT: usize = 47_457_523;

#[test]
fn default_parameter_count_is_frozen() {
    let cfg = NetworkConfig::default();
    assert_eq!(count_by_hand(&cfg), DEFAULT_PARAMETER_COUNT);
    let layout = parameter_layout(&cfg).unwrap();
    assert_eq!(layout.values().sum::<usize>(), DEFAULT_PARAMETER_COUNT);
}

#[test]
fn parameter_count_matches_hand_count_across_variants() {
    let base = NetworkConfig::default().narrowed(8);
    let mut variants = vec![base.clone(), NetworkConfig::default().narrowed(4)];
    for bits in 0..8u8 {
        let mut c = base.clone();
        c.use_mkdc = bits & 1 != 0;
        c.use_attention = bits & 2 != 0;
        c.use_apf = bits & 4 != 0;
        variants.push(c.clone());
        c.fusion = FusionMode::Learned;
        variants.push(c);
    }
    for cfg in variants {
        let store = init_params::<f32>(&cfg, 1).unwrap();
        assert_eq!(store.num_params(), count_by_hand(&cfg), "{cfg:?}");
    }
}

#[test]
fn full_width_forward_shapes() {
    let cfg = NetworkConfig::default();
    let net = Network::new(&cfg).unwrap();
    let store = init_params::<f32>(&cfg, 5).unwrap();
    let mut rng = oracle::rng(5);
    for shape in [[1, 3, 64, 64], [2, 3, 32, 48]] {
        let x = oracle::real_tensor(&mut rng, shape).map(|v| v.abs()).cast::<f32>();
        let p = net.predict(&store, &x).unwrap();
        assert_eq!(p.shape(), [shape[0], 1, shape[2], shape[3]].into());
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let err = net.predict(&store, &Tensor4::zeros([1, 3, 50, 64]).unwrap()).unwrap_err();
    assert!(err.to_string().contains("spatial dims must be divisible by 16"));
    assert!(net.predict(&store, &Tensor4::zeros([1, 1, 32, 32]).unwrap()).is_err());
}

#[test]
fn stage_shapes_at_full_width() {
    let cfg = NetworkConfig::default();
    let net = Network::new(&cfg).unwrap();
    let store = init_params::<f32>(&cfg, 6).unwrap();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, NormMode::Eval);
    let x = s.input(Tensor4::full([1, 3, 64, 64], 0.5).unwrap());
    let (skip, pooled) = net.encoder_stage_forward(&mut s, x, 1).unwrap();
    assert_eq!(s.tape.value(skip).shape(), [1, 64, 64, 64].into());
    assert_eq!(s.tape.value(pooled).shape(), [1, 64, 32, 32].into());

    let deep = s.input(Tensor4::full([1, 1024, 4, 4], 0.1).unwrap());
    let skip4 = s.input(Tensor4::full([1, 512, 8, 8], 0.2).unwrap());
    let y = net.decoder_stage_forward(&mut s, deep, 1, skip4).unwrap();
    assert_eq!(s.tape.value(y).shape(), [1, 512, 8, 8].into());
    assert!(net.decoder_stage_forward(&mut s, deep, 1, skip).is_err());
    assert!(net.encoder_stage_forward(&mut s, x, 5).is_err());
}

#[test]
fn toggles_remove_their_modules() {
    let mut cfg = NetworkConfig::default().narrowed(8);
    cfg.use_mkdc = false;
    cfg.use_attention = false;
    cfg.use_apf = false;
    let names: Vec<String> = parameter_layout(&cfg).unwrap().into_keys().collect();
    assert!(names.iter().all(|n| !n.contains("mkdc") && !n.contains("attention") && !n.contains("apf")));
    let stage = |j: usize| -> Vec<String> {
        names
            .iter()
            .filter_map(|n| n.strip_prefix(&format!("dec{j}.")).map(str::to_string))
            .collect()
    };
    assert_eq!(stage(1), stage(3));
    assert_eq!(stage(2), stage(4));

    let net = Network::new(&cfg).unwrap();
    let store = init_params::<f64>(&cfg, 2).unwrap();
    let p = net.predict(&store, &Tensor4::full([1, 3, 32, 32], 0.3).unwrap()).unwrap();
    assert_eq!(p.shape(), [1, 1, 32, 32].into());
}

#[test]
fn eval_forward_is_deterministic_and_pure() {
    let cfg = NetworkConfig::default().narrowed(8);
    let net = Network::new(&cfg).unwrap();
    let store = init_params::<f32>(&cfg, 9).unwrap();
    let before = store.clone();
    let x = oracle::real_tensor(&mut oracle::rng(9), [2, 3, 32, 32]).cast::<f32>();
    let a = net.predict(&store, &x).unwrap();
    let b = net.predict(&store, &x).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(store, before);
}

#[test]
fn train_forward_only_records_running_statistics() {
    let cfg = NetworkConfig::default().narrowed(8);
    let net = Network::new(&cfg).unwrap();
    let store = init_params::<f32>(&cfg, 10).unwrap();
    let before = store.clone();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, NormMode::Train);
    let x = s.input(oracle::real_tensor(&mut oracle::rng(10), [2, 3, 32, 32]).cast::<f32>());
    net.forward(&mut s, x).unwrap();
    let updates = s.into_stat_updates();
    assert!(!updates.is_empty());
    for name in updates.keys() {
        assert!(name.ends_with(".running_mean") || name.ends_with(".running_var"), "{name}");
        assert!(store.buffer(name).is_ok());
    }
    assert_eq!(store, before);

    let mut trained = store.clone();
    let mask = Tensor4::full([2, 1, 32, 32], 0.0).unwrap();
    let images = Tensor4::full([2, 3, 32, 32], 0.4).unwrap();
    net.train_step(&mut trained, &images, &mask).unwrap();
    assert_eq!(trained.adam.t, 1);
    assert_ne!(trained.params, before.params);
}

#[test]
fn init_is_seeded() {
    let cfg = NetworkConfig::default().narrowed(8);
    let a = init_params::<f32>(&cfg, 3).unwrap();
    assert_eq!(a, init_params::<f32>(&cfg, 3).unwrap());
    assert_ne!(a.params, init_params::<f32>(&cfg, 4).unwrap().params);
    for (name, v) in &a.params {
        if name.ends_with(".bias") && !name.contains("wlm") || name.ends_with(".beta") || name.contains("gamma_") {
            assert!(v.data().iter().all(|&x| x == 0.0), "{name}");
        }
        if name.ends_with(".gamma") {
            assert!(v.data().iter().all(|&x| x == 1.0), "{name}");
        }
    }
}
