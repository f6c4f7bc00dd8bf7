use smokedet::ccpe::{Ccpe, ContrastConfig};
use smokedet::gradcheck::{grad_check, GradCheckOptions};
use smokedet::{Graph64, ParamStore64, Rng, Tensor64};

mod common;
use common::ccpe_oracle::{self as oracle, build, small_cfg};

#[test]
fn matches_loop_oracle_on_random_inputs() {
    let mut rng = Rng::new(100, 0);
    for trial in 0..10u64 {
        let b = 1 + (trial as usize % 2);
        let side = [16, 24, 32][trial as usize % 3];
        let cfg = small_cfg(&ContrastConfig::fitted_strides(side), 3);
        let (store, m) = build(cfg.clone(), side, trial);
        let img = Tensor64::randn(&[b, side, side, 3], &mut rng);
        let mut g = Graph64::new();
        g.bind(&store).unwrap();
        let x = g.input(img.clone()).unwrap();
        let y = m.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[b, side / 4, side / 4, 96]);
        let expect = oracle::embed(&store, &cfg, &img);
        let diff = g.value(y).data().iter().zip(&expect).fold(0.0f64, |m, (a, e)| m.max((a - e).abs()));
        assert!(diff <= 1e-12, "trial {trial}: {diff}");
    }
}

#[test]
fn horizontal_and_vertical_branches_match_oracle_at_32x32_features() {
    let mut rng = Rng::new(101, 0);
    let cfg = small_cfg(&[1, 2, 4, 8, 16], 3);
    let (store, m) = build(cfg.clone(), 128, 7);
    let f = Tensor64::randn(&[1, 32, 32, 48], &mut rng);
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let x = g.input(f.clone()).unwrap();
    let h = m.horizontal.forward(&mut g, x).unwrap();
    let v = m.vertical.forward(&mut g, h.fused).unwrap();

    let map = oracle::Map {
        h: 32,
        w: 32,
        c: 48,
        v: f.data().to_vec(),
        b: 1,
    };
    let (fh, masks) = oracle::branch(&store, "ccpe.h", &map, &cfg.strides_h, true);
    let (fv, _) = oracle::branch(&store, "ccpe.v", &fh, &cfg.strides_v, false);
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(max_diff(g.value(h.fused).data(), &fh.v) <= 1e-12);
    assert!(max_diff(g.value(v.fused).data(), &fv.v) <= 1e-12);
    for (mv, mo) in h.masks.iter().zip(&masks) {
        assert!(max_diff(g.value(*mv).data(), &mo.v) <= 1e-12);
    }
}

#[test]
fn output_shapes() {
    let (store, m) = build(small_cfg(&[1, 2, 4, 8], 6), 64, 3);
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let x = g.input(Tensor64::zeros(&[1, 64, 64, 6])).unwrap();
    let y = m.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[1, 16, 16, 96]);

    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let bad = g.input(Tensor64::zeros(&[1, 62, 64, 6])).unwrap();
    assert!(m.forward(&mut g, bad).is_err());
    let bad = g.input(Tensor64::zeros(&[1, 64, 64, 3])).unwrap();
    assert!(m.forward(&mut g, bad).is_err());
}

#[test]
fn full_scale_shape_rule() {
    // 640x640 with the eight default strides, two images to keep it quick;
    // the batch axis is carried through unchanged.
    let mut store = smokedet::ParamStore32::new();
    let m = Ccpe::new(&mut store, ContrastConfig::default(), (640, 640), &mut Rng::new(0, 0)).unwrap();
    let mut g = smokedet::Graph32::new();
    g.bind(&store).unwrap();
    let x = g.input(smokedet::Tensor32::zeros(&[2, 640, 640, 3])).unwrap();
    let y = m.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[2, 160, 160, 96]);
}

#[test]
fn constant_input_gives_zero_masks() {
    let (mut store, m) = build(small_cfg(&[1, 2, 4], 3), 32, 5);
    for p in store.iter_mut() {
        if p.name.ends_with(".b") && p.name.contains("mask") {
            p.value = Tensor64::zeros(p.value.shape());
        }
    }
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let x = g.input(Tensor64::full(&[2, 32, 32, 3], 0.37)).unwrap();
    let t = m.trace(&mut g, x).unwrap();
    for mask in t.horizontal.masks.iter().chain(&t.vertical.masks) {
        assert!(g.value(*mask).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn periodic_columns_cancel_at_period_stride() {
    let (store, m) = build(small_cfg(&[4], 3), 64, 6);
    let mut rng = Rng::new(9, 9);
    let period: Vec<f64> = (0..4 * 48).map(|_| rng.normal()).collect();
    let mut f = Tensor64::zeros(&[1, 8, 16, 48]);
    for y in 0..8 {
        for x in 0..16 {
            for c in 0..48 {
                f.data_mut()[(y * 16 + x) * 48 + c] = period[(x % 4) * 48 + c];
            }
        }
    }
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let x = g.input(f).unwrap();
    let shifted = g.circular_shift(x, smokedet::autodiff::Axis::Width, 4).unwrap();
    let d = g.sub(x, shifted).unwrap();
    assert!(g.value(d).data().iter().all(|&v| v == 0.0));
    // zero mask biases: the contrast mask is exactly zero as well
    let mb = store.get(m.horizontal.masks[0].b).value.clone();
    assert!(mb.data().iter().any(|&v| v != 0.0));
}

#[test]
fn full_axis_shift_is_identity() {
    let mut rng = Rng::new(10, 0);
    let f = Tensor64::randn(&[1, 8, 8, 48], &mut rng);
    let mut g = Graph64::new();
    let x = g.input(f).unwrap();
    let s = g.circular_shift(x, smokedet::autodiff::Axis::Height, 8).unwrap();
    let d = g.sub(x, s).unwrap();
    assert!(g.value(d).data().iter().all(|&v| v == 0.0));
}

#[test]
fn stride_not_fitting_feature_map_is_config_error() {
    let (store, m) = build(small_cfg(&[1, 2, 4, 8], 3), 64, 3);
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    // 32x32 input gives an 8-wide feature map; stride 8 no longer fits
    let x = g.input(Tensor64::zeros(&[1, 32, 32, 3])).unwrap();
    let err = m.forward(&mut g, x).unwrap_err();
    assert!(matches!(err, smokedet::Error::Config(_)), "{err}");
}

#[test]
fn zero_network_gives_zero_output_before_affine() {
    let cfg = ContrastConfig {
        use_norm: false,
        ..small_cfg(&[1, 2], 3)
    };
    let mut store = ParamStore64::new();
    let m = Ccpe::new(&mut store, cfg, (16, 16), &mut Rng::new(0, 0)).unwrap();
    for p in store.iter_mut() {
        p.value = Tensor64::zeros(p.value.shape());
    }
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let x = g.input(Tensor64::randn(&[1, 16, 16, 3], &mut Rng::new(1, 1))).unwrap();
    let y = m.forward(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_contrast_branch_decouples_upper_channels() {
    let cfg = ContrastConfig {
        use_norm: false,
        ..small_cfg(&[1, 2], 3)
    };
    let mut store = ParamStore64::new();
    let m = Ccpe::new(&mut store, cfg, (16, 16), &mut Rng::new(0, 0)).unwrap();
    for p in store.iter_mut() {
        if p.name.starts_with("ccpe.h.") || p.name.starts_with("ccpe.v.") {
            p.value = Tensor64::zeros(p.value.shape());
        }
    }
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let x = g.input(Tensor64::randn(&[1, 16, 16, 3], &mut Rng::new(1, 1))).unwrap();
    let y = m.forward(&mut g, x).unwrap();
    let upper = g.slice_lastdim(y, 48, 48).unwrap();
    let s = g.sum(upper).unwrap();
    let grads = g.backward(s).unwrap();
    let gx = grads.get(x).map(|t| t.data().iter().all(|&v| v == 0.0)).unwrap_or(true);
    assert!(gx);
}

#[test]
fn gradient_check_whole_module() {
    let cfg = small_cfg(&[1, 2], 3);
    let (store, m) = build(cfg, 16, 8);
    let mut rng = Rng::new(11, 0);
    let img = Tensor64::randn(&[1, 16, 16, 3], &mut rng);
    let weights = Tensor64::randn(&[1, 4, 4, 96], &mut rng);
    let mut inputs = vec![img];
    inputs.extend(store.iter().map(|p| p.value.clone()));
    let opts = GradCheckOptions {
        max_coords: 24,
        ..Default::default()
    };
    let r = grad_check(
        |g, v| {
            g.bind_vars(&v[1..]);
            let y = m.forward(g, v[0])?;
            g.dot_const(y, weights.clone())
        },
        &inputs,
        &opts,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}
