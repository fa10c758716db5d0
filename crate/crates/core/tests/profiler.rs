use fasterx::backend::{Builder, ParamStore};
use fasterx::heads::{Head, HeadConfig, HeadMode};
use fasterx::model::{Model, ModelConfig, NeckKind, Profile};
use fasterx::neck::{PaFpn, SlimFpn};
use fasterx::nn::{ConvBlock, ConvSpec, DsConv, GhostModule};
use fasterx::profiler::{CostReport, CostTracer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cost(cfg: &ModelConfig) -> CostReport {
    Model::<f32>::build(cfg, 0).unwrap().cost().unwrap()
}

fn within(value: f64, anchor: f64, tol: f64) -> bool {
    (value - anchor).abs() <= tol * anchor
}

#[test]
fn model_params_equal_allocated_scalars() {
    for p in Profile::ALL {
        for cfg in [ModelConfig::yolox(p), ModelConfig::yolox_p4(p), ModelConfig::fasterx(p)] {
            let m = Model::<f32>::build(&cfg.with_input_size(64), 0).unwrap();
            let enumerated: usize = m.store().params().iter().map(|t| t.value.len()).sum();
            assert_eq!(m.cost().unwrap().params, enumerated as u64);
        }
    }
}

#[test]
fn reference_totals_within_tolerance() {
    let yolox = cost(&ModelConfig::yolox(Profile::S));
    assert!(within(yolox.params_m(), 9.0, 0.10), "{}", yolox.params_m());
    assert!(within(yolox.gflops(), 26.8, 0.10), "{}", yolox.gflops());
    for (p, params, gflops) in [(Profile::S, 5.19, 19.20), (Profile::Tiny, 2.93, 5.39), (Profile::Nano, 0.70, 1.43)] {
        let r = cost(&ModelConfig::fasterx(p));
        assert!(within(r.params_m(), params, 0.15), "{} params {}", p, r.params_m());
        assert!(within(r.gflops(), gflops, 0.15), "{} gflops {}", p, r.gflops());
    }
}

#[test]
fn fasterx_cheaper_than_yolox_counterparts() {
    for p in Profile::ALL {
        let fx = cost(&ModelConfig::fasterx(p));
        let p4 = cost(&ModelConfig::yolox_p4(p));
        let base = cost(&ModelConfig::yolox(p));
        assert!(fx.params < p4.params && fx.flop_units < p4.flop_units, "{}", p);
        assert!(fx.params < base.params, "{}", p);
    }
}

#[test]
fn ablation_grid_ordering() {
    let variant = |neck: NeckKind, head: HeadMode| {
        let mut c = ModelConfig::fasterx(Profile::S);
        c.neck = neck;
        c.head = head;
        cost(&c).params
    };
    let pa_conv = cost(&ModelConfig::yolox_p4(Profile::S)).params;
    let pa_ds = variant(NeckKind::PaFpn, HeadMode::Ds);
    let slim_ds = variant(NeckKind::SlimFpn, HeadMode::Ds);
    let slim_pixsf = variant(NeckKind::SlimFpn, HeadMode::PixSf);
    let slim_ds_pixsf = variant(NeckKind::SlimFpn, HeadMode::DsPixSf);
    assert!(pa_conv > pa_ds && pa_ds > slim_ds);
    assert!(slim_pixsf > slim_ds_pixsf);
    assert!(slim_ds_pixsf < pa_conv);
}

#[test]
fn slimfpn_cheaper_than_pafpn_per_profile() {
    for p in Profile::ALL {
        let mut slim = ModelConfig::fasterx(p);
        slim.neck = NeckKind::SlimFpn;
        let mut pa = slim.clone();
        pa.neck = NeckKind::PaFpn;
        let (a, b) = (cost(&slim).aggregate(1), cost(&pa).aggregate(1));
        assert!(a["neck"].params < b["neck"].params, "{}", p);
        assert!(a["neck"].flop_units < b["neck"].flop_units, "{} {:?} {:?}", p, a["neck"], b["neck"]);
    }
}

#[test]
fn aux_branch_adds_no_inference_cost() {
    let mut cfg = ModelConfig::fasterx(Profile::Nano).with_input_size(128);
    cfg.distill.enabled = true;
    let m = Model::<f32>::build(&cfg, 0).unwrap();
    let stripped = m.strip_aux();
    assert_eq!(m.cost().unwrap(), stripped.cost().unwrap());
    assert!(m.aux_cost().unwrap().params > 0);
}

/// Trace one block on an input of the given shape.
fn trace<M>(
    build: impl FnOnce(&mut Builder<'_, f32>) -> M,
    shape: &[usize],
    fwd: impl FnOnce(&M, &mut CostTracer, &ParamStore<f32>, fasterx::profiler::Shape),
) -> (CostReport, usize) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = build(&mut Builder::new(&mut store, &mut rng));
    let mut t = CostTracer::new(shape[2]);
    let x = t.input(shape);
    fwd(&m, &mut t, &store, x);
    (t.finish(), store.num_scalars())
}

#[test]
fn conv_cost_is_linear_in_area() {
    let spec = ConvSpec::new(16, 32, 3, 1);
    let run = |hw: usize| {
        trace(
            |b| ConvBlock::new(b, spec).unwrap(),
            &[1, 16, hw, hw],
            |m, t, s, x| {
                m.forward(t, s, x).unwrap();
            },
        )
        .0
    };
    let (a, b) = (run(8), run(16));
    assert_eq!(a.params, b.params);
    assert_eq!(b.flop_units, 4 * a.flop_units);
    assert_eq!(a.params as usize, spec.param_count());
}

#[test]
fn block_costs_add_up() {
    let run = |ds: bool| {
        trace(
            |b| {
                let first = DsConv::new(&mut b.sub("a"), ConvSpec::new(8, 16, 3, 1)).unwrap();
                let second = GhostModule::new(&mut b.sub("b"), 16, 16, 2).unwrap();
                (first, second)
            },
            &[1, 8, 12, 12],
            |(f, g), t, s, x| {
                let y = f.forward(t, s, x).unwrap();
                if ds {
                    g.forward(t, s, y).unwrap();
                }
            },
        )
    };
    let (first_only, _) = run(false);
    let (both, scalars) = run(true);
    let ghost = trace(
        |b| GhostModule::new(&mut b.sub("b"), 16, 16, 2).unwrap(),
        &[1, 16, 12, 12],
        |g, t, s, x| {
            g.forward(t, s, x).unwrap();
        },
    )
    .0;
    assert_eq!(both.flop_units, first_only.flop_units + ghost.flop_units);
    assert_eq!(both.params, first_only.params + ghost.params);
    assert_eq!(both.params as usize, scalars);
}

#[test]
fn pixsf_head_cheaper_than_plain_head() {
    for attention in [false, true] {
        let head = |mode| {
            let cfg = HeadConfig {
                mode,
                attention,
                hidden_channels: 64,
                r: 2,
                num_classes: 10,
            };
            trace(
                |b| Head::new(b, 64, cfg).unwrap(),
                &[1, 64, 40, 40],
                |h, t, s, x| {
                    h.forward(t, s, x).unwrap();
                },
            )
            .0
            .flop_units
        };
        assert!(head(HeadMode::PixSf) < head(HeadMode::Plain));
        assert!(head(HeadMode::DsPixSf) < head(HeadMode::Ds));
    }
}

#[test]
fn neck_params_match_enumeration() {
    let ch = [128, 64, 32, 16];
    let run = |slim: bool| {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let slim_neck = slim.then(|| SlimFpn::new(&mut b, &ch, 32, 1, false).unwrap());
        let pa_neck = (!slim).then(|| PaFpn::new(&mut b, &ch, 1, false).unwrap());
        let mut t = CostTracer::new(64);
        let xs: Vec<_> = ch.iter().enumerate().map(|(l, &c)| t.input(&[1, c, 2 << l, 2 << l])).collect();
        let outs = match (&slim_neck, &pa_neck) {
            (Some(n), _) => n.forward(&mut t, &store, &xs).unwrap(),
            (_, Some(n)) => n.forward(&mut t, &store, &xs).unwrap(),
            _ => unreachable!(),
        };
        assert_eq!(outs.len(), 4);
        (t.finish(), store.num_scalars())
    };
    let (slim, slim_scalars) = run(true);
    let (pa, pa_scalars) = run(false);
    assert_eq!(slim.params as usize, slim_scalars);
    assert_eq!(pa.params as usize, pa_scalars);
    assert!(slim.params < pa.params && slim.flop_units < pa.flop_units);
}
