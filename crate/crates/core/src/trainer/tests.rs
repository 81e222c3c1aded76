use super::*;
use crate::raster::bit_identical;
use crate::synth::{generate_dataset, CoverMix, SynthConfig};

fn tiny() -> TrainConfig {
    TrainConfig {
        net: NetConfig {
            hidden_per_direction: 4,
            fpa_width: 8,
            pyramid_width: 4,
            conv_block_width: 8,
            time_steps: 6,
            ..NetConfig::default()
        },
        batch_size: 10,
        epochs: 3,
        checkpoint_every: 1,
        ..TrainConfig::default()
    }
}

fn data(n: usize) -> Vec<PlotSample<f32>> {
    generate_dataset::<f32>(n, CoverMix::Uniform, &SynthConfig::default(), 11)
        .unwrap()
        .into_iter()
        .map(|p| p.sample)
        .collect()
}

fn flat(ps: &ParamStore<f32>) -> Vec<u32> {
    ps.values().iter().flatten().map(|v| v.to_bits()).collect()
}

#[test]
fn schedules_start_neutral() {
    let s = Schedules::default();
    let v = s.at(0, &NetConfig::default());
    assert_eq!((v.dropblock, v.alpha, v.rmax, v.dmax), (0.0, 0.0, 1.0, 0.0));
    assert!((s.dropblock(25, 0.2) - 0.1).abs() < 1e-15);
    for e in 0..300 {
        let v = s.at(e, &NetConfig::default());
        assert!((0.0..=0.2).contains(&v.dropblock));
        assert!((0.0..=0.5).contains(&v.alpha));
        assert!((1.0..=3.0).contains(&v.rmax) && (0.0..=5.0).contains(&v.dmax));
    }
    assert_eq!(s.at(100, &NetConfig::default()).dropblock, 0.2);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { batch_size: 15, ..tiny() }.validate().is_err());
    assert!(TrainConfig { grad_clip_norm: Some(0.0), ..tiny() }.validate().is_err());
    assert!(Trainer::<f32>::new(tiny(), &[], 0).is_err());
    let json = serde_json::to_string(&tiny()).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), tiny());
}

#[test]
fn zero_epochs_saves_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(6);
    let cfg = TrainConfig { epochs: 0, ..tiny() };
    let mut t = Trainer::new(cfg, &d, 4).unwrap();
    t.train(Some(dir.path())).unwrap();
    let init = Network::new(cfg.net).unwrap().init_params::<f32>(4);
    let ck = Checkpoint::<f32>::load(dir.path()).unwrap();
    assert_eq!(flat(&ck.params), flat(&init));
    assert_eq!(ck.manifest.epoch, 0);
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.trim(), LOG_HEADER);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(6);
    let mut t = Trainer::new(TrainConfig { epochs: 1, ..tiny() }, &d, 2).unwrap();
    t.run_epoch().unwrap();
    t.checkpoint(Some(0.4)).save(dir.path()).unwrap();
    let ck = Checkpoint::<f32>::load(dir.path()).unwrap();
    assert_eq!(ck.manifest.threshold, Some(0.4));
    assert_eq!(flat(&ck.params), flat(&t.params));
    assert_eq!(ck.optimizer.as_ref(), Some(&t.optimizer));
    let x = d[0].stack.data();
    let x = TimeSeriesStack::subsample_time(x, 6).unwrap();
    let a = t.network.predict(&t.params, x.view()).unwrap();
    let b = t.network.predict(&ck.params, x.view()).unwrap();
    assert!(bit_identical(&a, &b));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(4);
    let t = Trainer::new(tiny(), &d, 2).unwrap();
    t.checkpoint(None).save(dir.path()).unwrap();
    let p = dir.path().join(PARAMS_FILE);
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(dir.path()), Err(Error::Format { .. })));
    assert!(matches!(Checkpoint::<f32>::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = data(12);
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(tiny(), &d, 8).unwrap();
    full.train(Some(full_dir.path())).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(TrainConfig { epochs: 2, ..tiny() }, &d, 8).unwrap();
    first.train(Some(part_dir.path())).unwrap();
    let mut ck = Checkpoint::<f32>::load(part_dir.path()).unwrap();
    ck.manifest.config.epochs = 3;
    let mut resumed = Trainer::resume(ck, &d).unwrap();
    assert_eq!(resumed.epoch(), 2);
    assert_eq!(resumed.batches(2), full.batches(2));
    let row = resumed.run_epoch().unwrap();
    assert_eq!(row.csv_row(), full.log[2].csv_row());
    assert_eq!(flat(&resumed.params), flat(&full.params));
}

#[test]
fn identical_seeds_identical_runs() {
    let d = data(10);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny(), &d, 21).unwrap();
        t.train(Some(dir.path())).unwrap();
        (
            fs::read(dir.path().join(LOG_FILE)).unwrap(),
            fs::read(dir.path().join(PARAMS_FILE)).unwrap(),
            fs::read(dir.path().join(MODEL_FILE)).unwrap(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_decreases_early() {
    let d = data(10);
    let cfg = TrainConfig { epochs: 10, ..tiny() };
    let mut t = Trainer::new(cfg, &d, 5).unwrap();
    t.train(None).unwrap();
    let first = t.log[0].total;
    let last = t.log[9].total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn gradient_clipping_bounds_the_step() {
    let d = data(6);
    let cfg = TrainConfig {
        grad_clip_norm: Some(1e-6),
        optimizer: AdaBoundConfig { unbounded: true, ..AdaBoundConfig::default() },
        epochs: 1,
        ..tiny()
    };
    let mut t = Trainer::new(cfg, &d, 3).unwrap();
    let before = t.params.clone();
    t.run_epoch().unwrap();
    assert_ne!(flat(&before), flat(&t.params));
    assert!(t.params.values().iter().flatten().all(|v| v.is_finite()));
}
