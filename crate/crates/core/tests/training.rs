use fixhead::autodiff::BnMode;
use fixhead::cam::{class_maps, decode_pgm, export_cam, HeatmapSidecar, CAM_TOLERANCE};
use fixhead::checkpoint::{load_checkpoint, save_checkpoint};
use fixhead::compare::{compare_csv, compare_heads};
use fixhead::data::{batch_iter, synth_blobs, Normalization, Split};
use fixhead::heads::HeadKind;
use fixhead::model::{build_model, ModelConfig};
use fixhead::train::{
    evaluate, load_datasets, metrics_csv, step_lr, train, train_on, DataSource, TrainConfig, TrainState,
};
use fixhead::{Error, ExecMode, Rng, Tensor};
use proptest::prelude::*;

fn small(head: HeadKind, epochs: usize) -> TrainConfig {
    TrainConfig {
        head,
        classes: 4,
        epochs,
        batch_size: 16,
        seed: 3,
        data: DataSource::Synth {
            n_per_class: 40,
            test_per_class: 10,
            size: 16,
            seed: None,
        },
        ..TrainConfig::default()
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn every_head_fits_separable_data() {
    for head in HeadKind::ALL {
        let out = train(&small(head, 3)).unwrap();
        let last = out.metrics.last().unwrap();
        assert_eq!(out.metrics.len(), 3);
        assert!(last.train_acc >= 0.95, "{head}: {last:?}");
        let (train_set, _) = load_datasets(&small(head, 3)).unwrap();
        let acc = evaluate(&out.state.model, &train_set, &out.state.normalization, 64, ExecMode::default()).unwrap();
        assert!(acc >= 0.95, "{head}: eval on train {acc}");
    }
}

#[test]
fn zero_lr_leaves_parameters_unchanged() {
    let cfg = TrainConfig {
        lr: 0.0,
        momentum: 0.0,
        ..small(HeadKind::Learned, 1)
    };
    let (tr, te) = load_datasets(&cfg).unwrap();
    let before = build_model(&cfg.model_config(1), cfg.seed).unwrap();
    let after = train_on(&cfg, &tr, &te, None).unwrap().state.model;
    for ((n, a), (_, b)) in before.named_params().into_iter().zip(after.named_params()) {
        assert_eq!(bits(&a.value), bits(&b.value), "{n}");
    }
}

#[test]
fn metrics_are_reproducible_and_mode_independent() {
    let cfg = small(HeadKind::FixedHadamard, 2);
    let a = metrics_csv(&train(&cfg).unwrap().metrics);
    let b = metrics_csv(&train(&cfg).unwrap().metrics);
    assert_eq!(a, b);
    let seq = TrainConfig {
        exec: ExecMode::Sequential,
        ..cfg.clone()
    };
    assert_eq!(a, metrics_csv(&train(&seq).unwrap().metrics));
    let other = TrainConfig { seed: 4, ..cfg };
    assert_ne!(a, metrics_csv(&train(&other).unwrap().metrics));
}

#[test]
fn fixed_weights_survive_training_checkpoint_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    for head in [HeadKind::FixedOrthogonal, HeadKind::FixedHadamard, HeadKind::FixedIdentity] {
        let cfg = small(head, 4);
        let (tr, te) = load_datasets(&cfg).unwrap();
        let init = build_model(&cfg.model_config(1), cfg.seed).unwrap();

        let straight = train_on(&cfg, &tr, &te, None).unwrap();
        let half = train_on(&TrainConfig { epochs: 2, ..cfg.clone() }, &tr, &te, None).unwrap();
        let ck = dir.path().join(head.as_str());
        save_checkpoint(&ck, &half.state, Some(&cfg)).unwrap();
        let (loaded, manifest) = load_checkpoint(&ck).unwrap();
        assert!(loaded == half.state, "{head}: checkpoint round trip differs");
        assert_eq!(manifest.head.kind, head);
        let resumed = train_on(&cfg, &tr, &te, Some(loaded)).unwrap();

        assert!(init.fixed_snapshot() == resumed.state.model.fixed_snapshot());
        assert!(init.fixed_snapshot() == straight.state.model.fixed_snapshot());
        assert!(resumed.state == straight.state, "{head}: resume differs");
        assert_eq!(resumed.metrics[..], straight.metrics[2..]);
    }
}

#[test]
fn checkpoint_forward_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(HeadKind::Learned, 1)).unwrap();
    save_checkpoint(dir.path().join("ck"), &out.state, None).unwrap();
    // overwrite in place
    save_checkpoint(dir.path().join("ck"), &out.state, None).unwrap();
    let (loaded, _) = load_checkpoint(dir.path().join("ck")).unwrap();
    let x = Tensor::randn(&[5, 1, 16, 16], &mut Rng::new(9)).unwrap();
    let a = out.state.model.logits(&x, ExecMode::default()).unwrap();
    let b = loaded.model.logits(&x, ExecMode::default()).unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn truncated_blob_is_a_length_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(HeadKind::Learned, 1)).unwrap();
    let ck = dir.path().join("ck");
    save_checkpoint(&ck, &out.state, None).unwrap();
    let blob = ck.join("head.weight.f64");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&ck), Err(Error::Length { .. })));
}

#[test]
fn exploding_run_aborts_with_location() {
    let cfg = TrainConfig {
        lr: 1e200,
        ..small(HeadKind::Learned, 2)
    };
    match train(&cfg) {
        Err(Error::NonFiniteLoss { epoch, batch, .. }) => assert!(epoch < 2 && batch < 10),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn evaluate_contracts() {
    let data = synth_blobs(10, 5, 16, 0, Split::Test).unwrap();
    let mut model = build_model(&ModelConfig::tiny3(HeadKind::Learned, 10, 1), 0).unwrap();
    model.head.weight.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    model.head.bias.as_mut().unwrap().value.data_mut()[3] = 1.0;
    let norm = Normalization::unit(1);
    let acc = evaluate(&model, &data, &norm, 7, ExecMode::default()).unwrap();
    assert_eq!(acc, 0.1);
    assert_eq!(acc, evaluate(&model, &data, &norm, 50, ExecMode::Sequential).unwrap());
    let four = synth_blobs(4, 5, 16, 0, Split::Test).unwrap();
    assert!(matches!(evaluate(&model, &four, &norm, 8, ExecMode::default()), Err(Error::Config(_))));
}

#[test]
fn cam_maps_average_to_logits() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(HeadKind::FixedIdentity, 3)).unwrap();
    let (_, test) = load_datasets(&small(HeadKind::FixedIdentity, 3)).unwrap();
    for (i, batch) in batch_iter(&test, 1, None, &out.state.normalization).unwrap().enumerate() {
        let hm = export_cam(&out.state.model, &batch.x, &format!("t{i}"), dir.path(), Some(batch.y[0]), ExecMode::default())
            .unwrap();
        let [k, h, w] = [hm.maps.shape()[0], hm.maps.shape()[1], hm.maps.shape()[2]];
        assert_eq!(k, 4);
        for c in 0..k {
            let mean = hm.maps.data()[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            assert!((mean - hm.logits[c]).abs() <= CAM_TOLERANCE);
        }
        let logits = out.state.model.logits(&batch.x, ExecMode::default()).unwrap();
        assert_eq!(hm.predicted, logits.argmax_rows()[0]);
        let side: HeatmapSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("t{i}.json"))).unwrap()).unwrap();
        assert_eq!(side.predicted, hm.predicted);
        assert_eq!(side.files.len(), 4);
        let (pw, ph, px) = decode_pgm(&std::fs::read(dir.path().join(&side.files[0])).unwrap()).unwrap();
        assert_eq!((pw, ph, px.len()), (w, h, w * h));
    }
}

#[test]
fn cam_rejects_other_heads_and_handles_flat_maps() {
    let x = Tensor::randn(&[1, 1, 16, 16], &mut Rng::new(0)).unwrap();
    let learned = build_model(&ModelConfig::tiny3(HeadKind::Learned, 4, 1), 0).unwrap();
    assert!(matches!(
        class_maps(&learned, &x, "a", ExecMode::default()),
        Err(Error::UnsupportedHead(..))
    ));
    let mut flat = build_model(&ModelConfig::tiny3(HeadKind::FixedIdentity, 4, 1), 0).unwrap();
    let last = flat.blocks.last_mut().unwrap();
    last.gamma.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let dir = tempfile::tempdir().unwrap();
    let hm = export_cam(&flat, &x, "z", dir.path(), None, ExecMode::default()).unwrap();
    assert!(hm.logits.iter().all(|&l| l == 0.0));
    for c in 0..4 {
        let (_, _, px) = decode_pgm(&std::fs::read(dir.path().join(format!("z_class{c}.pgm"))).unwrap()).unwrap();
        assert!(px.iter().all(|&p| p == 0));
    }
    let _ = BnMode::Infer;
}

#[test]
fn compare_rows_and_gaps() {
    let cfg = small(HeadKind::Learned, 2);
    let (tr, te) = load_datasets(&cfg).unwrap();
    let cmp = compare_heads(&cfg, &[HeadKind::Learned, HeadKind::FixedIdentity], &tr, &te).unwrap();
    assert_eq!(cmp.rows.len(), 2);
    assert_eq!(cmp.rows[0].gap, 0.0);
    assert_eq!(cmp.rows[1].gap, cmp.rows[1].top1 - cmp.rows[0].top1);
    let csv = compare_csv(&cmp.rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "head,top1,gap");
    assert!(lines[1].starts_with("Learned,") && lines[1].ends_with(",0"));
    assert_eq!(lines.len(), 3);

    // Learned is trained as the reference even when not requested
    let only = compare_heads(&cfg, &[HeadKind::FixedIdentity], &tr, &te).unwrap();
    assert_eq!(only.rows.len(), 1);
    assert_eq!(only.rows[0], cmp.rows[1]);
}

#[test]
fn resume_requires_matching_model() {
    let cfg = small(HeadKind::Learned, 2);
    let (tr, te) = load_datasets(&cfg).unwrap();
    let state = TrainState {
        model: build_model(&ModelConfig::tiny3(HeadKind::FixedHadamard, 4, 1), 0).unwrap(),
        normalization: Normalization::unit(1),
        epochs_completed: 1,
    };
    assert!(matches!(train_on(&cfg, &tr, &te, Some(state)), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn schedule_drops_tenfold_at_each_milestone(base in 1e-4f64..1.0, mut ms in prop::collection::vec(1usize..200, 0..4)) {
        ms.sort_unstable();
        ms.dedup();
        let mut prev = step_lr(0, base, &ms);
        prop_assert_eq!(prev, base);
        for e in 1..220 {
            let lr = step_lr(e, base, &ms);
            if ms.contains(&e) {
                prop_assert!((prev / lr - 10.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(lr, prev);
            }
            prev = lr;
        }
    }
}
