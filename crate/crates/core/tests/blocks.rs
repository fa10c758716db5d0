use fasterx::autograd::Graph;
use fasterx::backend::{Builder, ParamStore};
use fasterx::heads::{Head, HeadConfig, HeadMode};
use fasterx::neck::{PaFpn, SlimFpn};
use fasterx::nn::{focus, pixel_shuffle, Cbam, ConvBlock, ConvSpec, DsConv, GhostModule};
use fasterx::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-3.0..3.0))
}

proptest! {
    #[test]
    fn focus_and_shuffle_are_inverse(
        n in 1usize..3, c in 1usize..4, hb in 1usize..4, wb in 1usize..4, four in any::<bool>(), seed in any::<u64>()
    ) {
        let r = if four { 4 } else { 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, c, hb * r, wb * r], &mut rng);
        let enc = focus(&x, r).unwrap();
        prop_assert_eq!(enc.shape(), &[n, c * r * r, hb, wb][..]);
        prop_assert_eq!(pixel_shuffle(&enc, r).unwrap(), x.clone());
        let y = random(&[n, c * r * r, hb, wb], &mut rng);
        prop_assert_eq!(focus(&pixel_shuffle(&y, r).unwrap(), r).unwrap(), y);
    }
}

#[test]
fn focus_shape_law() {
    let x = Tensor::<f64>::zeros(&[3, 8, 8]);
    assert_eq!(focus(&x, 2).unwrap().shape(), &[12, 4, 4]);
    assert!(pixel_shuffle(&Tensor::<f64>::zeros(&[6, 2, 2]), 2).is_err());
}

#[test]
fn blocks_stay_finite_over_random_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..1000u64 {
        let mut store = ParamStore::<f64>::new();
        let mut init = ChaCha8Rng::seed_from_u64(trial);
        let mut b = Builder::new(&mut store, &mut init);
        let conv = ConvBlock::new(&mut b.sub("conv"), ConvSpec::new(16, 8, 3, 1)).unwrap();
        let ds = DsConv::new(&mut b.sub("ds"), ConvSpec::new(16, 8, 3, 2)).unwrap();
        let ghost = GhostModule::new(&mut b.sub("ghost"), 16, 8, 2).unwrap();
        let cbam = Cbam::new(&mut b.sub("cbam"), 16, 16).unwrap();
        let head = Head::new(
            &mut b.sub("head"),
            16,
            HeadConfig {
                mode: [HeadMode::Plain, HeadMode::Ds, HeadMode::PixSf, HeadMode::DsPixSf][trial as usize % 4],
                attention: trial % 2 == 0,
                hidden_channels: 16,
                r: 2,
                num_classes: 3,
            },
        )
        .unwrap();
        let mut g = Graph::new(trial % 3 == 0);
        let x = g.input(random(&[1, 16, 4, 4], &mut rng));
        let mut outs = vec![
            conv.forward(&mut g, &store, x).unwrap(),
            ds.forward(&mut g, &store, x).unwrap(),
            ghost.forward(&mut g, &store, x).unwrap(),
            cbam.forward(&mut g, &store, x).unwrap(),
        ];
        let h = head.forward(&mut g, &store, x).unwrap();
        outs.extend([h.cls, h.reg, h.obj]);
        for o in outs {
            assert!(g.value(o).all_finite(), "trial {}", trial);
        }
    }
}

#[test]
fn cbam_preserves_shape_and_gates_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for (c, h, w) in [(16, 5, 5), (32, 3, 7), (48, 1, 1)] {
        let mut store = ParamStore::<f64>::new();
        let cbam = Cbam::new(&mut Builder::new(&mut store, &mut rng), c, 16).unwrap();
        let mut g = Graph::new(false);
        let x = g.input(random(&[2, c, h, w], &mut rng));
        let gates = cbam.forward_gates(&mut g, &store, x).unwrap();
        assert_eq!(g.value(gates.output).shape(), &[2, c, h, w]);
        for v in g.value(gates.channel_gate).data().iter().chain(g.value(gates.spatial_gate).data()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }
}

#[test]
fn ghost_cheaper_than_pointwise_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut store = ParamStore::<f64>::new();
    let g = GhostModule::new(&mut Builder::new(&mut store, &mut rng), 64, 64, 2).unwrap();
    assert_eq!((g.intrinsic_channels(), g.ghost_channels()), (32, 32));
    assert!(store.num_scalars() < ConvSpec::new(64, 64, 1, 1).param_count());
}

fn pyramid(rng: &mut ChaCha8Rng, ch: &[usize], g: &mut Graph<f64>) -> Vec<fasterx::autograd::Var> {
    ch.iter()
        .enumerate()
        .map(|(l, &c)| g.input(random(&[1, c, 2 << l, 2 << l], rng)))
        .collect()
}

#[test]
fn necks_preserve_grids_and_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let ch = [64, 32, 16, 8];
    let mut store = ParamStore::<f64>::new();
    let (slim, pa) = {
        let mut b = Builder::new(&mut store, &mut rng);
        (
            SlimFpn::new(&mut b.sub("slim"), &ch, 16, 1, false).unwrap(),
            PaFpn::new(&mut b.sub("pa"), &ch, 1, true).unwrap(),
        )
    };
    let mut g = Graph::new(false);
    let xs = pyramid(&mut rng, &ch, &mut g);
    let s = slim.forward(&mut g, &store, &xs).unwrap();
    let p = pa.forward(&mut g, &store, &xs).unwrap();
    for l in 0..4 {
        let side = 2 << l;
        assert_eq!(g.value(s[l]).shape(), &[1, 16, side, side]);
        assert_eq!(g.value(p[l]).shape(), &[1, ch[l], side, side]);
    }
    assert!(slim.forward(&mut g, &store, &[xs[0], xs[2]]).is_err());
}

#[test]
fn slimfpn_passes_gradient_and_top_down_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let ch = [32, 16, 8, 8];
    let mut store = ParamStore::<f64>::new();
    let slim = SlimFpn::new(&mut Builder::new(&mut store, &mut rng), &ch, 8, 1, false).unwrap();
    let mut g = Graph::new(true);
    let xs = pyramid(&mut rng, &ch, &mut g);
    let outs = slim.forward(&mut g, &store, &xs).unwrap();
    let finest = outs[3];
    let grads = g.backward(&[(finest, Tensor::full(g.value(finest).shape(), 1.0))]).unwrap();
    for &x in &xs {
        let gx = grads.of(x).expect("gradient reaches every level");
        assert!(gx.data().iter().any(|v| *v != 0.0));
    }

    // perturbing the coarsest input changes the finest output
    let mut base = Graph::new(false);
    let inputs: Vec<Tensor<f64>> = xs.iter().map(|&x| g.value(x).clone()).collect();
    let vars: Vec<_> = inputs.iter().map(|t| base.input(t.clone())).collect();
    let out = slim.forward(&mut base, &store, &vars).unwrap()[3];
    let before = base.value(out).clone();
    let mut moved = Graph::new(false);
    let mut p1 = inputs[0].clone();
    p1.data_mut()[0] += 1.0;
    let mut vars = vec![moved.input(p1)];
    vars.extend(inputs[1..].iter().map(|t| moved.input(t.clone())));
    let out = slim.forward(&mut moved, &store, &vars).unwrap()[3];
    let after = moved.value(out).clone();
    assert!(before.max_abs_diff(&after) > 0.0);
}

fn head_cfg(mode: HeadMode, attention: bool) -> HeadConfig {
    HeadConfig {
        mode,
        attention,
        hidden_channels: 16,
        r: 2,
        num_classes: 10,
    }
}

#[test]
fn head_output_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for mode in [HeadMode::Plain, HeadMode::Ds, HeadMode::PixSf, HeadMode::DsPixSf] {
        let mut store = ParamStore::<f64>::new();
        let head = Head::new(&mut Builder::new(&mut store, &mut rng), 64, head_cfg(mode, true)).unwrap();
        let mut g = Graph::new(false);
        let x = g.input(random(&[1, 64, 40, 40], &mut rng));
        let h = head.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(h.cls).shape(), &[1, 10, 40, 40]);
        assert_eq!(g.value(h.reg).shape(), &[1, 4, 40, 40]);
        assert_eq!(g.value(h.obj).shape(), &[1, 1, 40, 40]);
        let side = if mode.pixel_shuffle() { 20 } else { 40 };
        assert_eq!(g.value(h.feature).shape(), &[1, 16, side, side]);
    }
    let mut store = ParamStore::<f64>::new();
    let head = Head::new(&mut Builder::new(&mut store, &mut rng), 8, head_cfg(HeadMode::PixSf, false)).unwrap();
    let mut g = Graph::new(false);
    let odd = g.input(Tensor::zeros(&[1, 8, 5, 5]));
    assert!(head.forward(&mut g, &store, odd).is_err());
}

#[test]
fn classification_and_regression_streams_are_disjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut store = ParamStore::<f64>::new();
    let head = Head::new(&mut Builder::new(&mut store, &mut rng), 8, head_cfg(HeadMode::DsPixSf, true)).unwrap();
    let reached = |which: usize| -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let mut g = Graph::new(true);
        let x = g.input(random(&[1, 8, 8, 8], &mut rng));
        let h = head.forward(&mut g, &store, x).unwrap();
        let out = [h.cls, h.reg][which];
        let grads = g.backward(&[(out, Tensor::full(g.value(out).shape(), 1.0))]).unwrap();
        grads
            .params()
            .filter(|(_, t)| t.data().iter().any(|v| *v != 0.0))
            .map(|(id, _)| store.params()[id.0].name.clone())
            .filter(|n| !n.starts_with("encoder") && !n.starts_with("cbam"))
            .collect()
    };
    let cls = reached(0);
    let reg = reached(1);
    assert!(!cls.is_empty() && !reg.is_empty());
    assert!(cls.iter().all(|n| n.starts_with("cls_")), "{:?}", cls);
    assert!(reg.iter().all(|n| n.starts_with("reg_")), "{:?}", reg);
}

#[test]
fn disabled_attention_isolates_cbam() {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let mut off = ParamStore::<f64>::new();
    let head = Head::new(&mut Builder::new(&mut off, &mut rng), 8, head_cfg(HeadMode::PixSf, false)).unwrap();
    assert!(off.params().iter().all(|p| !p.name.contains("cbam")));

    // with attention on, only the gated path depends on the CBAM weights
    let mut on = ParamStore::<f64>::new();
    let gated = Head::new(&mut Builder::new(&mut on, &mut rng), 8, head_cfg(HeadMode::PixSf, true)).unwrap();
    let x = random(&[1, 8, 8, 8], &mut rng);
    let run = |head: &Head, store: &ParamStore<f64>| {
        let mut g = Graph::new(false);
        let xv = g.input(x.clone());
        let h = head.forward(&mut g, store, xv).unwrap();
        g.value(h.cls).clone()
    };
    let mut zeroed = on.clone();
    for p in zeroed.params_mut().iter_mut().filter(|p| p.name.contains("cbam")) {
        p.value = Tensor::zeros(p.value.shape());
    }
    assert!(run(&gated, &on).max_abs_diff(&run(&gated, &zeroed)) > 0.0);
    assert_eq!(run(&head, &off), run(&head, &off.clone()));
}
