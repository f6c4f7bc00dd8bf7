use smokedet::boxes::{decode_cell, decode_detections, encode_cell, iou, nms, DecodeConfig, LevelValues, ScoredBox};
use smokedet::gradcheck::{grad_check, GradCheckOptions};
use smokedet::model::{Backbone, Detector, FeatureMaps, Head, ModelConfig, Pafpn, WindowAttentionBlock};
use smokedet::param::ParamId;
use smokedet::{ccpe::ContrastConfig, Graph64, ParamStore64, Rng, Tensor64};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        embed: ContrastConfig {
            strides_h: vec![1, 2, 4],
            strides_v: vec![1, 2, 4],
            ..ContrastConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn zero_param(store: &mut ParamStore64, id: ParamId) {
    store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
}

fn param_inputs(store: &ParamStore64, first: Vec<Tensor64>) -> Vec<Tensor64> {
    let mut inputs = first;
    inputs.extend(store.iter().map(|p| p.value.clone()));
    inputs
}

fn block(c: usize, heads: usize, seed: u64) -> (ParamStore64, WindowAttentionBlock) {
    let mut store = ParamStore64::new();
    let mut rng = Rng::new(seed, 0);
    let b = WindowAttentionBlock::new(&mut store, "blk", c, heads, 4, 4, &mut rng).unwrap();
    // Non-trivial norm affine parameters exercise those gradients too.
    for p in store.iter_mut() {
        if p.name.ends_with("gamma") || p.name.ends_with(".b") || p.name.ends_with("beta") {
            let n = p.value.len();
            let t = Tensor64::uniform(p.value.shape(), -0.5, 0.5, &mut rng.child(n as u64));
            p.value = if p.name.ends_with("gamma") { t.map(|v| v + 1.0) } else { t };
        }
    }
    (store, b)
}

#[test]
fn attention_block_preserves_shape_including_padding() {
    let (store, b) = block(24, 2, 1);
    for shape in [[1, 8, 8, 24], [2, 6, 10, 24], [1, 3, 5, 24]] {
        let mut g = Graph64::new();
        g.bind(&store).unwrap();
        let x = g.input(Tensor64::randn(&shape, &mut Rng::new(2, 0))).unwrap();
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), shape);
        assert!(g.value(y).all_finite());
    }
}

#[test]
fn attention_block_zero_input_zero_output() {
    let (mut store, b) = block(24, 2, 3);
    // Default biases are zero: a zero input stays zero through both residuals.
    for p in store.iter_mut() {
        if !p.name.ends_with("gamma") {
            p.value = p.value.map(|_| 0.0);
        }
    }
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let x = g.input(Tensor64::zeros(&[1, 8, 8, 24])).unwrap();
    let y = b.forward(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_block_with_zero_output_projections_is_identity() {
    let (mut store, b) = block(24, 4, 4);
    for id in [b.proj.w, b.proj.b, b.fc2.w, b.fc2.b] {
        zero_param(&mut store, id);
    }
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let xt = Tensor64::randn(&[2, 8, 8, 24], &mut Rng::new(5, 0));
    let x = g.input(xt.clone()).unwrap();
    let y = b.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), xt.data());
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, b) = block(24, 2, 6);
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let x = g.input(Tensor64::randn(&[1, 4, 4, 24], &mut Rng::new(7, 0))).unwrap();
    let (_, attn) = b.forward_with_attention(&mut g, x).unwrap();
    let a = g.value(attn);
    assert_eq!(a.shape(), [2, 16, 16]);
    for row in a.data().chunks(16) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn attention_is_confined_to_windows() {
    let (store, b) = block(24, 2, 8);
    let run = |x: Tensor64| {
        let mut g = Graph64::new();
        g.bind(&store).unwrap();
        let v = g.input(x).unwrap();
        let y = b.forward(&mut g, v).unwrap();
        g.value(y).clone()
    };
    let x = Tensor64::randn(&[1, 8, 8, 24], &mut Rng::new(9, 0));
    let mut x2 = x.clone();
    // perturb one pixel in the bottom-right window
    for c in 0..24 {
        x2.data_mut()[(7 * 8 + 7) * 24 + c] += 0.1 * c as f64;
    }
    let (y, y2) = (run(x), run(x2));
    for r in 0..8 {
        for col in 0..8 {
            let same = (0..24).all(|c| y.data()[(r * 8 + col) * 24 + c] == y2.data()[(r * 8 + col) * 24 + c]);
            assert_eq!(same, r < 4 || col < 4, "pixel ({r},{col})");
        }
    }
}

#[test]
fn attention_block_gradients() {
    for (shape, heads) in [([1, 8, 8, 24], 2), ([1, 6, 5, 24], 4)] {
        let (store, b) = block(24, heads, 10);
        let x = Tensor64::randn(&shape, &mut Rng::new(11, 0));
        let weights = Tensor64::randn(&shape, &mut Rng::new(12, 0));
        let inputs = param_inputs(&store, vec![x]);
        let opts = GradCheckOptions {
            max_coords: 16,
            ..Default::default()
        };
        let r = grad_check(
            |g, v| {
                g.bind_vars(&v[1..]);
                let y = b.forward(g, v[0])?;
                g.dot_const(y, weights.clone())
            },
            &inputs,
            &opts,
        )
        .unwrap();
        assert!(r.passed, "{shape:?}: {r:?}");
    }
}

#[test]
fn head_count_mismatch_is_rejected() {
    let mut store = ParamStore64::new();
    assert!(WindowAttentionBlock::new(&mut store, "b", 24, 5, 4, 4, &mut Rng::new(0, 0)).is_err());
}

#[test]
fn backbone_level_shapes() {
    let cfg = ModelConfig::default();
    let mut store = smokedet::ParamStore32::new();
    let bb = Backbone::new(&mut store, &cfg, 96, &mut Rng::new(0, 0)).unwrap();
    let mut g = smokedet::Graph32::new();
    g.bind(&store).unwrap();
    let x = g.input(smokedet::Tensor32::randn(&[1, 160, 160, 96], &mut Rng::new(1, 0))).unwrap();
    let p = bb.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(p.p2), [1, 80, 80, 48]);
    assert_eq!(g.shape(p.p3), [1, 40, 40, 96]);
    assert_eq!(g.shape(p.p4), [1, 20, 20, 192]);
}

#[test]
fn backbone_preserves_batch_and_is_deterministic() {
    let cfg = ModelConfig::default();
    let x = Tensor64::randn(&[7, 32, 32, 96], &mut Rng::new(3, 0));
    let run = || {
        let mut store = ParamStore64::new();
        let bb = Backbone::new(&mut store, &cfg, 96, &mut Rng::new(42, 0)).unwrap();
        let mut g = Graph64::new();
        g.bind(&store).unwrap();
        let v = g.input(x.clone()).unwrap();
        let p = bb.forward(&mut g, v).unwrap();
        p.levels().map(|l| g.value(l).clone())
    };
    let (a, b) = (run(), run());
    for (l, s) in a.iter().zip([16, 8, 4]) {
        assert_eq!(l.shape(), [7, s, s, l.shape()[3]]);
    }
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn backbone_rejects_tiny_input() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore64::new();
    let bb = Backbone::new(&mut store, &cfg, 96, &mut Rng::new(0, 0)).unwrap();
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let x = g.input(Tensor64::zeros(&[1, 2, 2, 96])).unwrap();
    assert!(bb.forward(&mut g, x).is_err());
}

fn pyramid(g: &mut Graph64, b: usize, s: usize, seed: u64, zero: bool) -> FeatureMaps {
    let mut rng = Rng::new(seed, 0);
    let mut mk = |h: usize, c: usize| {
        let t = if zero {
            Tensor64::zeros(&[b, h, h, c])
        } else {
            Tensor64::randn(&[b, h, h, c], &mut rng)
        };
        g.input(t).unwrap()
    };
    FeatureMaps {
        p2: mk(s, 48),
        p3: mk(s / 2, 96),
        p4: mk(s / 4, 192),
    }
}

#[test]
fn pafpn_zero_in_zero_out_and_shapes() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore64::new();
    let neck = Pafpn::new(&mut store, &cfg, &mut Rng::new(0, 0)).unwrap();
    for zero in [true, false] {
        let mut g = Graph64::new();
        g.bind(&store).unwrap();
        let p = pyramid(&mut g, 2, 8, 1, zero);
        let q = neck.forward(&mut g, &p).unwrap();
        for (a, b) in p.levels().iter().zip(q.levels()) {
            assert_eq!(g.shape(*a), g.shape(b));
            if zero {
                assert!(g.value(b).data().iter().all(|&v| v == 0.0));
            }
        }
    }
}

fn set_identity(store: &mut ParamStore64, id: ParamId) {
    let p = store.get_mut(id);
    let shape = p.value.shape().to_vec();
    let (k, cin, cout) = (shape[0], shape[2], shape[3]);
    let centre = k / 2;
    let d = p.value.data_mut();
    d.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..cin.min(cout) {
        d[((centre * k + centre) * cin + c) * cout + c] = 1.0;
    }
}

#[test]
fn pafpn_propagates_top_level_into_finest() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore64::new();
    let neck = Pafpn::new(&mut store, &cfg, &mut Rng::new(0, 0)).unwrap();
    for conv in [&neck.down2, &neck.down3, &neck.smooth[1], &neck.smooth[2]] {
        zero_param(&mut store, conv.w);
    }
    for conv in [&neck.lateral4, &neck.lateral3, &neck.smooth[0]] {
        set_identity(&mut store, conv.w);
    }
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let p2 = g.input(Tensor64::zeros(&[1, 8, 8, 48])).unwrap();
    let p3 = g.input(Tensor64::zeros(&[1, 4, 4, 96])).unwrap();
    let mut top = Tensor64::zeros(&[1, 2, 2, 192]);
    // P4 cell (1, 0), channel 5
    top.data_mut()[(2 * 192) + 5] = 3.0;
    let p4 = g.input(top).unwrap();
    let q = neck.forward(&mut g, &FeatureMaps { p2, p3, p4 }).unwrap();
    let out = g.value(q.p2);
    for r in 0..8 {
        for c in 0..8 {
            for ch in 0..48 {
                let v = out.data()[(r * 8 + c) * 48 + ch];
                let want = if ch == 5 && (4..8).contains(&r) && c < 4 { 3.0 } else { 0.0 };
                assert_eq!(v, want, "({r},{c},{ch})");
            }
        }
    }
}

#[test]
fn head_output_shapes() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore64::new();
    let head = Head::new(&mut store, &cfg, &mut Rng::new(0, 0)).unwrap();
    let mut g = Graph64::new();
    g.bind(&store).unwrap();
    let p = pyramid(&mut g, 3, 8, 1, false);
    let out = head.forward(&mut g, &p).unwrap();
    assert_eq!(out.len(), 3);
    for (o, (s, stride)) in out.iter().zip([(8, 8), (4, 16), (2, 32)]) {
        assert_eq!(g.shape(o.conf), [3, s, s, 1]);
        assert_eq!(g.shape(o.cls), [3, s, s, 1]);
        assert_eq!(g.shape(o.box_raw), [3, s, s, 4]);
        assert_eq!(o.stride, stride);
    }
}

#[test]
fn head_gradients() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore64::new();
    let mut rng = Rng::new(1, 0);
    let head = Head::new(&mut store, &cfg, &mut rng).unwrap();
    for p in store.iter_mut() {
        if p.name.ends_with(".b") {
            p.value = Tensor64::uniform(p.value.shape(), -0.3, 0.3, &mut rng);
        }
    }
    let levels: Vec<Tensor64> = [(4, 48), (2, 96), (1, 192)]
        .iter()
        .map(|&(s, c)| Tensor64::randn(&[1, s, s, c], &mut rng))
        .collect();
    let inputs = param_inputs(&store, levels);
    let mut wr = Rng::new(2, 0);
    let weights: Vec<[Tensor64; 3]> = [4, 2, 1]
        .iter()
        .map(|&s| [1, 1, 4].map(|c| Tensor64::randn(&[1, s, s, c], &mut wr)))
        .collect();
    let opts = GradCheckOptions {
        max_coords: 16,
        ..Default::default()
    };
    let r = grad_check(
        |g, v| {
            g.bind_vars(&v[3..]);
            let out = head.forward(
                g,
                &FeatureMaps {
                    p2: v[0],
                    p3: v[1],
                    p4: v[2],
                },
            )?;
            let mut terms = Vec::new();
            for (o, w) in out.iter().zip(&weights) {
                terms.push(g.dot_const(o.conf, w[0].clone())?);
                terms.push(g.dot_const(o.cls, w[1].clone())?);
                terms.push(g.dot_const(o.box_raw, w[2].clone())?);
            }
            let mut acc = terms[0];
            for t in &terms[1..] {
                acc = g.add(acc, *t)?;
            }
            Ok(acc)
        },
        &inputs,
        &opts,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn detector_end_to_end_shapes_and_finiteness() {
    let cfg = small_cfg();
    let mut store = ParamStore64::new();
    let det = Detector::new(&mut store, &cfg, 64, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(det.cell_count(64, 64), 8 * 8 + 4 * 4 + 2 * 2);
    for trial in 0..5 {
        let mut g = Graph64::new();
        g.bind(&store).unwrap();
        let x = g
            .input(Tensor64::uniform(&[1, 64, 64, 3], 0.0, 1.0, &mut Rng::new(trial, 1)))
            .unwrap();
        let out = det.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out[0].conf), [1, 8, 8, 1]);
        assert_eq!(g.shape(out[2].conf), [1, 2, 2, 1]);
        for o in &out {
            assert!(g.value(o.conf).all_finite() && g.value(o.box_raw).all_finite());
        }
    }
}

#[test]
fn detector_rejects_mismatched_temporal_channels() {
    let mut cfg = small_cfg();
    cfg.temporal_mode = smokedet::model::TemporalMode::Concat2;
    let mut store = ParamStore64::new();
    assert!(Detector::new(&mut store, &cfg, 64, &mut Rng::new(0, 0)).is_err());
    cfg.embed.in_channels = 6;
    assert!(Detector::new(&mut store, &cfg, 64, &mut Rng::new(0, 0)).is_ok());
}

#[test]
fn decode_zero_offsets() {
    assert_eq!(decode_cell([0.0; 4], 0, 0, 8), [0.0, 0.0, 8.0, 8.0]);
}

#[test]
fn encode_decode_round_trip() {
    let mut rng = Rng::new(5, 0);
    for _ in 0..500 {
        let x1 = rng.uniform_in(0.0, 100.0);
        let y1 = rng.uniform_in(0.0, 100.0);
        let b = [x1, y1, x1 + rng.uniform_in(1.0, 120.0), y1 + rng.uniform_in(1.0, 120.0)];
        let stride = [8, 16, 32][rng.below(3)];
        let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
        let (row, col) = ((cy / stride as f64) as usize, (cx / stride as f64) as usize);
        for (dr, dc) in [(0, 0), (1, 1), (0, 1)] {
            let (r, c) = (row + dr, col + dc);
            let d = decode_cell(encode_cell(&b, r, c, stride), r, c, stride);
            for k in 0..4 {
                assert!((d[k] - b[k]).abs() < 1e-6, "{b:?} {d:?}");
            }
        }
    }
}

#[test]
fn nms_examples() {
    let b = [10.0, 10.0, 50.0, 50.0];
    let dets = [ScoredBox { bbox: b, score: 0.9 }, ScoredBox { bbox: b, score: 0.8 }];
    assert_eq!(nms(&dets, 0.65), vec![0]);
    // IoU 0.6 survives at threshold 0.65
    let c = [10.0, 10.0, 50.0, 34.0];
    assert!((iou(&b, &c) - 0.6).abs() < 1e-12);
    let dets = [ScoredBox { bbox: c, score: 0.5 }, ScoredBox { bbox: b, score: 0.9 }];
    assert_eq!(nms(&dets, 0.65), vec![1, 0]);
}

#[test]
fn decode_drops_very_low_confidence_and_clips() {
    let conf = Tensor64::new(&[1, 2, 1, 1], vec![-1e9, 5.0]).unwrap();
    let cls = Tensor64::new(&[1, 2, 1, 1], vec![5.0, 5.0]).unwrap();
    let raw = Tensor64::new(&[1, 2, 1, 4], vec![0.0, 0.0, 0.0, 0.0, -0.4, 0.0, 1.0, 0.0]).unwrap();
    let lv = [LevelValues {
        conf: &conf,
        cls: &cls,
        box_raw: &raw,
        stride: 8,
    }];
    let out = decode_detections(&lv, 8, 16, &DecodeConfig::default()).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].len(), 1);
    let d = out[0][0];
    let s = 1.0 / (1.0 + (-5f64).exp());
    assert!((d.score - s * s).abs() < 1e-12);
    // centre x = 0.1·8 = 0.8, width e·8 → clipped to [0, 8]
    assert_eq!(d.bbox[0], 0.0);
    assert_eq!(d.bbox[2], 8.0);
    assert_eq!(d.bbox[1], 8.0);
    assert_eq!(d.bbox[3], 16.0);
}
