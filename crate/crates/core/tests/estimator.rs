use cskf::bench::{run_experiment, run_mode, write_report, ExperimentConfig, ExperimentError, ModeSpec, SeedWorld};
use cskf::mapper::write_bundle;
use cskf::sim::{MappingNoise, NoiseConfig, TrajectorySpec};

fn short_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seeds = vec![5];
    c.localization = TrajectorySpec { phase: 0.9, ..TrajectorySpec::room(12.0, 1) };
    c
}

fn noise_free(mut c: ExperimentConfig) -> ExperimentConfig {
    c.noise = NoiseConfig::noise_free();
    c.mapping_noise = MappingNoise::noise_free();
    c.filter.exact_start = true;
    c
}

#[test]
fn nomap_on_noise_free_data_tracks_truth() {
    let mut c = noise_free(short_config());
    c.modes = vec![ModeSpec::Nomap];
    let rep = run_experiment(&c, |_| {}).unwrap();
    let r = &rep.runs[0];
    assert!(r.rmse_position < 1e-5, "{}", r.rmse_position);
    assert!(r.local_tracks > 0);
}

#[test]
fn map_modes_on_noise_free_data_track_truth() {
    let mut c = noise_free(short_config());
    c.modes = vec![ModeSpec::Cskf, ModeSpec::Scskf { submaps: 2 }, ModeSpec::Oracle];
    let rep = run_experiment(&c, |_| {}).unwrap();
    for r in &rep.runs {
        assert!(r.rmse_position < 1e-5, "{}: {}", r.mode, r.rmse_position);
        assert!(r.initialized_submaps >= 1, "{}", r.mode);
        assert!(r.map_correspondences > 0, "{}", r.mode);
    }
}

#[test]
fn factorized_and_dense_backends_agree_on_noisy_data() {
    let mut c = short_config();
    c.modes = vec![ModeSpec::Cskf, ModeSpec::Oracle];
    let rep = run_experiment(&c, |_| {}).unwrap();
    let (f, d) = (&rep.runs[0], &rep.runs[1]);
    assert!(f.initialized_submaps >= 1);
    assert_eq!(f.map_correspondences, d.map_correspondences);
    for (a, b) in f.records.iter().zip(&d.records) {
        assert!((a.position - b.position).amax() < 1e-6, "t = {}", a.t);
    }
}

#[test]
fn runs_leave_map_bundles_bit_identical() {
    let c = short_config();
    let world = SeedWorld::prepare(&c, 5).unwrap();
    let bytes = |l: usize| {
        let mut v = Vec::new();
        write_bundle(&mut v, &world.maps[&l]).unwrap();
        v
    };
    let before: Vec<_> = world.maps.keys().map(|&l| bytes(l)).collect();
    for mode in &c.modes {
        run_mode(&c, &world, mode).unwrap();
    }
    let after: Vec<_> = world.maps.keys().map(|&l| bytes(l)).collect();
    assert_eq!(before, after);
}

#[test]
fn same_config_gives_byte_identical_reports() {
    let mut c = short_config();
    c.modes = vec![ModeSpec::Scskf { submaps: 2 }, ModeSpec::Nomap];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let rep = run_experiment(&c, |_| {}).unwrap();
        write_report(d.path(), &rep).unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for n in names {
        let a = std::fs::read(dirs[0].path().join(&n)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&n)).unwrap();
        assert!(a == b, "{n:?} differs");
    }
}

#[test]
fn config_round_trips_through_toml() {
    let c = ExperimentConfig::default();
    let text = toml::to_string(&c).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
}

#[test]
fn partial_config_fills_defaults() {
    let text = r#"
        name = "custom"
        seeds = [3, 4]
        modes = [{ kind = "scskf", submaps = 3 }, { kind = "inflated", sigma = 5.0 }, { kind = "nomap" }]
    "#;
    let c = ExperimentConfig::from_toml(text).unwrap();
    assert_eq!(c.seeds, vec![3, 4]);
    assert_eq!(c.modes[0], ModeSpec::Scskf { submaps: 3 });
    assert_eq!(c.modes[0].label(), "scskf-l3");
    assert_eq!(c.keyframe_stride, ExperimentConfig::default().keyframe_stride);
    c.validate().unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ExperimentConfig::default();
    c.seeds.clear();
    assert!(matches!(c.validate(), Err(ExperimentError::Config(_))));
    assert!(ExperimentConfig::from_toml("modes = [{ kind = \"warp\" }]").is_err());
}

#[test]
fn out_of_range_settings_are_rejected() {
    let mut c = ExperimentConfig::default();
    c.filter.injection_rate = 1.5;
    assert!(c.validate().is_err());
    let mut c = ExperimentConfig::default();
    c.modes = vec![ModeSpec::Inflated { sigma: 0.0 }];
    assert!(c.validate().is_err());
}
