use smokedet::config::RunConfig;
use smokedet::data::{generate_synthetic_dataset, load_jsonl_dataset, FrameCache, SceneSpec};
use smokedet::train::{StepLog, Trainer};
use smokedet::DType;
use tempfile::TempDir;

fn config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&["batch_size=2".into(), "steps=4".into(), "dtype=f64".into(), "flip=true".into()])
        .unwrap();
    assert_eq!(cfg.train.dtype, DType::F64);
    cfg
}

#[test]
fn resume_continues_exactly() {
    let tmp = TempDir::new().unwrap();
    let spec = SceneSpec {
        seed: 4,
        ..SceneSpec::default()
    };
    generate_synthetic_dataset(&spec, 6, 0.5, tmp.path()).unwrap();
    let dataset = load_jsonl_dataset(tmp.path()).unwrap();
    let mut cache = FrameCache::new(&dataset, 128);

    let mut straight = Trainer::<f64>::new(config()).unwrap();
    let full: Vec<StepLog> = (0..4).map(|_| straight.train_step(&mut cache).unwrap()).collect();

    let mut first = Trainer::<f64>::new(config()).unwrap();
    for _ in 0..2 {
        first.train_step(&mut cache).unwrap();
    }
    let ckpt = first.save(&tmp.path().join("ckpt")).unwrap();
    let mut resumed = Trainer::<f64>::resume(&ckpt).unwrap();
    assert_eq!(resumed.step, 2);
    let tail: Vec<StepLog> = (0..2).map(|_| resumed.train_step(&mut cache).unwrap()).collect();

    for (a, b) in full[2..].iter().zip(&tail) {
        assert_eq!(a.step, b.step);
        assert!((a.total - b.total).abs() <= 1e-6 * a.total.abs().max(1.0), "{a:?} vs {b:?}");
        assert_eq!((a.p_batch, a.neg1, a.neg2), (b.p_batch, b.neg1, b.neg2));
    }
    for (p, q) in straight.store.iter().zip(resumed.store.iter()) {
        let d = p
            .value
            .data()
            .iter()
            .zip(q.value.data())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(d <= 1e-6, "{}: {d}", p.name);
    }
}
