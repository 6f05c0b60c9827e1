use flowdit::bench::{bench_attention, BENCH_HEADER};
use flowdit::checkpoint::Checkpoint;
use flowdit::config::{format_planes, parse_planes, Provenance, RunConfig};
use flowdit::config::provenance;
use flowdit::dataset::{
    dataset_file_size, decode_dataset, decode_raw, encode_dataset, encode_raw, export_raw, import_raw, read_dataset,
    write_dataset, RawDtype, RawOrder,
};
use flowdit::run::{dedup_planes, divergence_audit, generate, Generator};
use flowdit::Error;
use flowdit_core::diffusion::DiffusionSchedule;
use flowdit_core::flowgen::{random_solenoidal, FlowDataset};
use flowdit_core::geometry::Axis;
use flowdit_core::model::{Dit, ModelConfig};
use flowdit_core::train::{train_step, PlanePolicy, TrainConfig, TrainState};

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 3,
        hidden: 24,
        heads: 2,
        patch: [2; 3],
        extents: [4; 3],
        window: 1,
        window_layers: vec![1],
        plane_layers: vec![2],
        d_pe: 4,
        max_planes: 2,
        t_embed_dim: 8,
        ..ModelConfig::mini()
    }
}

fn dataset(n: u64, extents: [usize; 3]) -> FlowDataset {
    let fields = (0..n)
        .map(|s| {
            let mut f = random_solenoidal(extents, s, 1.0).unwrap();
            f.meta.time_index = 10 + s;
            f
        })
        .collect();
    let mut ds = FlowDataset::new(fields).unwrap();
    ds.fit_normalization(&[0, 1]).unwrap();
    ds
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let ds = dataset(3, [4, 5, 6]);
    let bytes = encode_dataset(&ds).unwrap();
    assert_eq!(bytes.len(), dataset_file_size(3, [4, 5, 6], 3));
    let back = decode_dataset(&bytes).unwrap();
    assert_eq!(encode_dataset(&back).unwrap(), bytes);
    for (a, b) in ds.fields.iter().zip(&back.fields) {
        assert_eq!(a.data(), b.data());
        assert_eq!(a.meta.time_index, b.meta.time_index);
    }
    assert_eq!(back.stats, ds.stats);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.vxfd");
    write_dataset(&ds, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(encode_dataset(&read_dataset(&path).unwrap()).unwrap(), bytes);
}

#[test]
fn hundred_fields_have_the_predicted_size() {
    let f = random_solenoidal([8; 3], 0, 1.0).unwrap();
    let ds = FlowDataset::new(vec![f; 100]).unwrap();
    let bytes = encode_dataset(&ds).unwrap();
    assert_eq!(bytes.len(), 28 + 100 * (8 + 4 * 512 * 3) + 8 * 3);
    assert_eq!(decode_dataset(&bytes).unwrap().len(), 100);
}

#[test]
fn corrupt_dataset_files_are_rejected() {
    let bytes = encode_dataset(&dataset(2, [4; 3])).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_dataset(&bad), Err(Error::Version(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_dataset(&bad), Err(Error::Version(_))));
    assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_dataset(&long), Err(Error::Format(_))));
    for e in [Error::Version(String::new()), Error::Format(String::new())] {
        assert_eq!(e.exit_code(), 4);
    }
}

#[test]
fn raw_import_of_a_single_field() {
    let values: Vec<f32> = (0..192).map(|i| i as f32 * 0.5).collect();
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(bytes.len(), 768);
    let ds = decode_raw(&bytes, [4; 3], 3, RawDtype::F32, RawOrder::XyzC, "probe.raw").unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.fields[0].data(), values.as_slice());
    assert_eq!(ds.fields[0].meta.source.as_deref(), Some("probe.raw"));

    // Fortran order: x fastest, channel slowest
    let f = decode_raw(&bytes, [4; 3], 3, RawDtype::F32, RawOrder::CZyx, "f").unwrap();
    let (x, y, z, c) = (1, 2, 3, 2);
    assert_eq!(f.fields[0].at(x, y, z, c), values[((c * 4 + z) * 4 + y) * 4 + x]);

    assert!(decode_raw(&bytes[..767], [4; 3], 3, RawDtype::F32, RawOrder::XyzC, "t").is_err());
    assert!(decode_raw(&[], [4; 3], 3, RawDtype::F32, RawOrder::XyzC, "t").is_err());
}

#[test]
fn raw_import_reports_the_first_non_finite_index() {
    let mut values = vec![1.0f64; 192];
    values[77] = f64::NAN;
    values[100] = f64::INFINITY;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let err = decode_raw(&bytes, [4; 3], 3, RawDtype::F64, RawOrder::XyzC, "n").unwrap_err();
    assert!(err.to_string().contains("flat index 77"), "{err}");
}

#[test]
fn raw_export_import_round_trip() {
    let ds = dataset(2, [4, 5, 6]);
    let dir = tempfile::tempdir().unwrap();
    for dtype in [RawDtype::F32, RawDtype::F64] {
        for order in [RawOrder::XyzC, RawOrder::CZyx] {
            let path = dir.path().join("x.raw");
            export_raw(&ds, &path, dtype, order).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), encode_raw(&ds, dtype, order));
            let back = import_raw(&path, [4, 5, 6], 3, dtype, order).unwrap();
            for (a, b) in ds.fields.iter().zip(&back.fields) {
                assert_eq!(a.data(), b.data());
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let cfg = tiny();
    let tc = TrainConfig {
        steps: 6,
        batch_size: 2,
        lr_max: 1e-3,
        ..TrainConfig::default()
    };
    let ds = dataset(3, [4; 3]);
    let sched = DiffusionSchedule::default();
    let (model, mut params) = Dit::init::<f32>(&cfg, 3).unwrap();
    let mut state = TrainState::new(&params, &tc);
    for _ in 0..3 {
        train_step(&model, &mut params, &mut state, &ds.fields, &tc, &sched).unwrap();
    }
    state.best_eval = Some(0.75);
    let ck = Checkpoint {
        config: cfg.clone(),
        params: params.clone(),
        train: Some(state.clone()),
        stats: Some(ds.stats.clone()),
    };
    let bytes = ck.encode().unwrap();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.encode().unwrap(), bytes);
    assert_eq!(back.config, cfg);
    assert_eq!(back.params, params);
    assert_eq!(back.train.as_ref(), Some(&state));
    assert_eq!(back.stats.as_ref(), Some(&ds.stats));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();

    let direct = train_step(&model, &mut params, &mut state, &ds.fields, &tc, &sched).unwrap();
    let (mut p2, mut s2) = (loaded.params, loaded.train.unwrap());
    let resumed = train_step(&loaded_model(&cfg), &mut p2, &mut s2, &ds.fields, &tc, &sched).unwrap();
    assert_eq!(direct, resumed);
    assert_eq!(params, p2);

    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut trailing = bytes.clone();
    trailing.push(1);
    assert!(Checkpoint::decode(&trailing).is_err());
    let mut magic = bytes;
    magic[1] = b'Z';
    assert!(matches!(Checkpoint::decode(&magic), Err(Error::Version(_))));
}

fn loaded_model(cfg: &ModelConfig) -> Dit {
    Dit::init::<f32>(cfg, 0).unwrap().0
}

#[test]
fn bare_checkpoint_without_state() {
    let (_, params) = Dit::init::<f32>(&tiny(), 1).unwrap();
    let ck = Checkpoint {
        config: tiny(),
        params,
        train: None,
        stats: None,
    };
    let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
    assert_eq!(back.params, ck.params);
    assert!(back.train.is_none() && back.stats.is_none());
}

#[test]
fn run_config_text_round_trip() {
    let mut cfg = RunConfig::default();
    cfg.set("preset", "mini").unwrap();
    cfg.set("train.steps", "123").unwrap();
    cfg.set("train.policy", "random:2").unwrap();
    cfg.set("data.split", "int:5").unwrap();
    cfg.set("model.hidden", "64").unwrap();
    let text = cfg.to_text();
    assert!(text.contains("train.steps = 123  # assumed; default 5000"), "{text}");
    assert!(text.contains("model.layers = 4  # paper"), "{text}");
    assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
    assert_eq!(cfg.train.policy, PlanePolicy::Randomized { count: 2 });

    assert_eq!(provenance("train.lr_max"), Provenance::Paper);
    assert_eq!(provenance("train.weight_decay"), Provenance::Assumed);
    assert_eq!(RunConfig::default().train.lr_max, 1e-4);

    let mut c = RunConfig::default();
    for (k, v) in [("nope", "1"), ("train.steps", "x"), ("model.bogus", "1"), ("data.split", "sideways")] {
        let err = c.set(k, v).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{k}: {err}");
    }
    assert!(RunConfig::from_text("data.train_fraction = 0").is_err());
}

#[test]
fn plane_lists() {
    let planes = parse_planes("x:8, y:8,z:0").unwrap();
    assert_eq!(planes, vec![(Axis::X, 8), (Axis::Y, 8), (Axis::Z, 0)]);
    assert_eq!(parse_planes(&format_planes(&planes)).unwrap(), planes);
    assert_eq!(parse_planes("").unwrap(), vec![]);
    for bad in ["q:1", "x", "x:-1", "x:1:2"] {
        let err = parse_planes(bad).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
    assert!(parse_planes("x:1,q:1").unwrap_err().to_string().contains("q:1"));

    let mut p = vec![(Axis::X, 1), (Axis::Y, 2), (Axis::X, 1), (Axis::Y, 2), (Axis::Z, 0)];
    let dropped = dedup_planes(&mut p);
    assert_eq!(p, vec![(Axis::X, 1), (Axis::Y, 2), (Axis::Z, 0)]);
    assert_eq!(dropped.len(), 2);
}

#[test]
fn generators_pass_the_divergence_audit() {
    for gen in [
        Generator::TaylorGreen { dt: 0.1, nu: 0.01 },
        Generator::Abc,
        Generator::Random { decay: 2.0 },
    ] {
        let ds = generate(gen, [8; 3], 5, 1, 0.8).unwrap();
        assert_eq!(ds.len(), 5);
        let audit = divergence_audit(&ds.fields).unwrap();
        assert_eq!(audit.passed, 5, "{gen:?}: {audit:?}");
    }
    assert!(Generator::parse("vortex-street", 0.1, 0.01, 2.0).is_err());
    // statistics come from the first 80% only
    let ds = generate(Generator::TaylorGreen { dt: 0.5, nu: 0.05 }, [8; 3], 5, 0, 0.8).unwrap();
    let mut train_only = FlowDataset::new(ds.fields[..4].to_vec()).unwrap();
    train_only.fit_normalization(&[0, 1, 2, 3]).unwrap();
    assert_eq!(ds.stats, train_only.stats);
}

#[test]
fn bench_rows_and_flop_ratio() {
    let report = bench_attention(64, 16, 2, 2, 2, true).unwrap();
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], BENCH_HEADER);
    // repeats × {global, window, plane} plus the summary row
    assert_eq!(lines.len(), 1 + 2 * 3 + 1, "{csv}");
    assert_eq!(report.flop_ratio, 64.0 / 8.0);
    assert!(lines.last().unwrap().starts_with("summary,64,2,16,8"));
    assert!(bench_attention(63, 16, 2, 2, 1, false).is_err());
}
