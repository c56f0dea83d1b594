use echogaze::bundle::{load_session, write_session, DEFAULT_FULL_SCALE};
use echogaze::format::{read_eprf, read_model, write_eprf, write_model};
use echogaze::model::{calibrate, fit_gbrt, fit_linear, GbrtParams};
use echogaze::protocol::ProtocolSpec;
use echogaze::session::{DatasetSpec, SessionRecord, SimulationSetup};

fn small_setup() -> SimulationSetup {
    SimulationSetup {
        protocol: ProtocolSpec { n_regions: 4, calib_duration_s: 1.0, ..Default::default() },
        dataset: DatasetSpec { main_stride: 20, calib_stride: 10, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn bundle_profiles_track_in_memory_profiles() {
    let setup = small_setup();
    let dir = tempfile::tempdir().unwrap();
    let bundle = write_session(dir.path(), &setup, 1, None, DEFAULT_FULL_SCALE).unwrap();
    let (memory, trace) = setup.profiles(1, None).unwrap();
    let disk = load_session(dir.path()).unwrap().profiles(setup.dataset.filtered).unwrap();

    assert_eq!(bundle.trace.points.len(), trace.points.len());
    let first = bundle.trace.points.iter().zip(&trace.points).position(|(a, b)| a != b);
    assert_eq!(first, None, "{:?}", first.map(|i| (&bundle.trace.points[i], &trace.points[i])));
    assert_eq!(disk.profiles.len(), memory.profiles.len());
    for (a, b) in disk.profiles.iter().zip(&memory.profiles) {
        assert_eq!((a.rows, a.cols, a.channel), (b.rows, b.cols, b.channel));
        assert_eq!(a.range_origin_px, b.range_origin_px);
        // int16 storage: differences stay near the quantization floor.
        let peak = b.data.iter().fold(0f32, |m, v| m.max(v.abs()));
        let worst = a.data.iter().zip(&b.data).fold(0f32, |m, (x, y)| m.max((x - y).abs()));
        assert!(worst < 2e-3 * peak, "{worst} vs peak {peak}");
    }
}

#[test]
fn artifacts_round_trip_through_files() {
    let setup = small_setup();
    let (set, trace) = setup.profiles(0, None).unwrap();
    let hash = echogaze::format::config_hash(&setup).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let eprf = dir.path().join("p.eprf");
    write_eprf(&eprf, &set, &hash).unwrap();
    let (back, h) = read_eprf(&eprf, Some(&hash)).unwrap();
    assert_eq!(h, hash);
    assert_eq!(back.profiles, set.profiles);

    let rec = SessionRecord::from_profiles(&back, &trace, &setup.frame, &setup.dataset, 0, setup.session_seed(0)).unwrap();
    let direct = setup.session(0, None).unwrap();
    assert_eq!(rec.main.len(), direct.main.len());
    assert_eq!(rec.main[0].features(), direct.main[0].features());

    let gbrt = calibrate(&fit_gbrt(&rec.main, &GbrtParams { n_trees: 8, ..Default::default() }).unwrap(), &rec.calib).unwrap();
    let linear = fit_linear(&rec.main, 1.0).unwrap();
    for (i, model) in [gbrt, linear].iter().enumerate() {
        let path = dir.path().join(format!("m{i}.gzmd"));
        write_model(&path, model, &hash).unwrap();
        let (loaded, _) = read_model(&path, Some(&hash)).unwrap();
        for inst in rec.main.iter().chain(&rec.calib) {
            assert_eq!(loaded.predict_features(inst.features()).unwrap(), model.predict_features(inst.features()).unwrap());
        }
    }

    let other = echogaze::format::config_hash(&SimulationSetup { seed: 7, ..setup }).unwrap();
    assert!(read_eprf(&eprf, Some(&other)).unwrap_err().is_validation());
}
