use dpdlab_core::nn::{ModelDims, TResDeltaGru};
use dpdlab_core::quant::{calibrate_scales, QuantModelConfig, QuantizedModel};
use dpdlab_core::train::*;
use dpdlab_core::*;

fn small_split(symbols: usize) -> DatasetSplit {
    let x = generate_ofdm(&OfdmConfig {
        num_symbols: symbols,
        ..OfdmConfig::default()
    })
    .unwrap();
    let y = pa_apply(&default_test_pa(0), &x);
    let np = normalize_pair(&x, &y).unwrap();
    split_dataset(&np.x, &np.y, SplitRatios::default()).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        frame_length: 40,
        frame_stride: 40,
        warmup: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn pa_training_reduces_loss() {
    let split = small_split(5);
    let (_, log) = train_pa_model::<f64>(&split, ModelDims::pa(6), &quick(4)).unwrap();
    assert_eq!(log.epochs.len(), 4);
    assert!(log.final_train_mse().unwrap() < log.initial_train_mse.unwrap());
    assert!(log.epochs.iter().all(|e| e.val_acpr.is_none()));
}

#[test]
fn zero_epochs_returns_initial_model() {
    let split = small_split(3);
    let (m, log) = train_pa_model::<f32>(&split, ModelDims::pa(4), &quick(0)).unwrap();
    assert_eq!(m, TResDeltaGru::<f32>::init(ModelDims::pa(4), 0));
    assert!(log.epochs.is_empty());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let split = small_split(4);
    let pa = TResDeltaGru::<f64>::init(ModelDims::pa(4), 3);
    let dpd = TResDeltaGru::<f64>::init(ModelDims::dpd(4), 4);
    let cc = CascadeConfig::default();
    let task = Task::Cascade {
        pa: &pa,
        x: &split.train.input,
        val_x: &split.val.input,
        cfg: &cc,
    };
    let full = Trainer::new(task, quick(2), dpd.clone(), None).unwrap().run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    let mut t = Trainer::new(task, quick(2), dpd, None).unwrap();
    t.run_epoch().unwrap();
    t.state().save(&path).unwrap();
    drop(t);
    let state = TrainState::<f64>::load(&path).unwrap();
    let resumed = Trainer::from_state(task, quick(2), state).unwrap().run().unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn thread_count_does_not_change_results() {
    let split = small_split(3);
    let run = |threads| {
        let cfg = TrainConfig {
            threads: Some(threads),
            ..quick(2)
        };
        train_pa_model::<f32>(&split, ModelDims::pa(5), &cfg).unwrap()
    };
    let (a, la) = run(1);
    let (b, lb) = run(3);
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn cascade_training_leaves_pa_untouched_and_improves_loss() {
    let split = small_split(4);
    let cfg = quick(3);
    let (pa, _) = train_pa_model::<f64>(&split, ModelDims::pa(5), &cfg).unwrap();
    let before = pa.clone();
    let dpd = TResDeltaGru::<f64>::init(ModelDims::dpd(5), 9);
    let (_, log) = train_dpd_cascade(&pa, dpd, &CascadeConfig::default(), &split, &cfg).unwrap();
    assert_eq!(pa, before);
    assert!(log.final_train_mse().unwrap() < log.initial_train_mse.unwrap());
    assert!(log.epochs.iter().all(|e| e.val_acpr.is_some()));
    assert!(log.best_epoch.is_none() || log.best_epoch.unwrap() <= 3);
}

#[test]
fn zero_epoch_qat_is_post_training_quantization() {
    let split = small_split(3);
    let pa = TResDeltaGru::<f64>::init(ModelDims::pa(4), 1);
    let dpd = TResDeltaGru::<f64>::init(ModelDims::dpd(4), 2);
    let q = QatConfig {
        quant: QuantModelConfig::W12A12,
        ..QatConfig::default()
    };
    let r = train_qat(&dpd, &pa, &q, &CascadeConfig::default(), &split, &quick(0)).unwrap();
    let table = calibrate_scales(&dpd, q.quant, &split.train.input).unwrap();
    let ptq = QuantizedModel::new(&dpd, q.quant, table).unwrap();
    assert_eq!(r.model.model, ptq.model);
    assert_eq!(r.model.scales, ptq.scales);
}

#[test]
fn qat_epochs_keep_weights_on_grid() {
    let split = small_split(3);
    let pa = TResDeltaGru::<f64>::init(ModelDims::pa(4), 1);
    let dpd = TResDeltaGru::<f64>::init(ModelDims::dpd(4), 2);
    let q = QatConfig {
        quant: QuantModelConfig::W12A8,
        ..QatConfig::default()
    };
    let r = train_qat(&dpd, &pa, &q, &CascadeConfig::default(), &split, &quick(2)).unwrap();
    assert_eq!(r.log.epochs.len(), 2);
    for (name, w) in r.model.model.tensors() {
        let spec = r.model.weight_spec(name).unwrap();
        for &v in w {
            assert_eq!(quant::fake_quant(v, &spec), v, "{name}");
        }
    }
}

#[test]
fn rejects_bad_configs() {
    let split = small_split(2);
    let bad = TrainConfig {
        warmup: 50,
        frame_length: 40,
        ..quick(1)
    };
    assert!(matches!(
        train_pa_model::<f64>(&split, ModelDims::pa(3), &bad),
        Err(Error::InvalidArgument(_))
    ));
    let long = TrainConfig {
        frame_length: 1_000_000,
        ..quick(1)
    };
    assert!(train_pa_model::<f64>(&split, ModelDims::pa(3), &long).is_err());
}
