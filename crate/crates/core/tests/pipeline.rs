use std::fs;
use std::time::Instant;

use delaynet::anneal::{anneal_with, AnnealSchedule, Execution};
use delaynet::data::{add_noise, generate_lorenz96, rescale};
use delaynet::embed::EmbeddingSpec;
use delaynet::evaluate::{training_mse, validation_mse};
use delaynet::experiments::{run_experiment, Experiment, SweepConfig};
use delaynet::netaction::{Architecture, PairLibrary, Weights};
use delaynet::optim::LbfgsConfig;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rescaled_l96(n: usize) -> Vec<f64> {
    let clean = generate_lorenz96(5, 8.15, 0.05, n + 1000, 1000, 1).unwrap();
    let noisy = add_noise(&clean, 0.02, 2).unwrap();
    rescale(&noisy).unwrap().0.into_values()
}

fn small_sweep(seed: u64) -> SweepConfig {
    SweepConfig {
        m_values: vec![8, 12],
        dh_values: vec![4],
        lf_values: vec![3, 4],
        schedule: AnnealSchedule::spanning(1e-4, 1e2, 4.0, 2, 0).unwrap(),
        optimizer: LbfgsConfig {
            max_iters: 200,
            ..LbfgsConfig::default()
        },
        seed,
        spec: EmbeddingSpec::new(7, 5).unwrap(),
        m_total: Some(200),
    }
}

#[test]
fn serial_and_parallel_records_are_byte_identical() {
    let values = rescaled_l96(400);
    let lib = PairLibrary::from_series(&values, EmbeddingSpec::new(7, 5).unwrap(), 40, None).unwrap();
    let arch = Architecture::mlp(5, 4, 6).unwrap();
    let s = AnnealSchedule::spanning(1e-6, 1e2, 3.0, 4, 17).unwrap();
    let opt = LbfgsConfig {
        max_iters: 300,
        ..LbfgsConfig::default()
    };
    let a = anneal_with(&lib, &arch, &s, &opt, Execution::Serial).unwrap();
    let b = anneal_with(&lib, &arch, &s, &opt, Execution::Parallel).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}

#[test]
fn record_json_round_trips() {
    let values = rescaled_l96(200);
    let lib = PairLibrary::from_series(&values, EmbeddingSpec::new(7, 5).unwrap(), 10, None).unwrap();
    let arch = Architecture::mlp(5, 3, 3).unwrap();
    let s = AnnealSchedule::spanning(1e-2, 1e1, 10.0, 2, 3).unwrap();
    let rec = anneal_with(&lib, &arch, &s, &LbfgsConfig::default(), Execution::Serial).unwrap();
    let back = delaynet::anneal::AnnealRecord::from_json(&rec.to_json().unwrap()).unwrap();
    assert_eq!(back, rec);
}

#[test]
fn resumed_sweep_writes_identical_files() {
    let values = rescaled_l96(300);
    let cfg = small_sweep(5);
    let full = tempfile::tempdir().unwrap();
    run_experiment(Experiment::MaxAction, &cfg, &values, full.path()).unwrap();

    // a partial run: one finished cell, one stale cell from other settings
    let partial = tempfile::tempdir().unwrap();
    let cells = partial.path().join("cells");
    fs::create_dir_all(&cells).unwrap();
    fs::copy(full.path().join("cells/m8_dh4_lf3.json"), cells.join("m8_dh4_lf3.json")).unwrap();
    let other = tempfile::tempdir().unwrap();
    run_experiment(Experiment::MaxAction, &small_sweep(6), &values, other.path()).unwrap();
    fs::copy(other.path().join("cells/m12_dh4_lf4.json"), cells.join("m12_dh4_lf4.json")).unwrap();
    run_experiment(Experiment::MaxAction, &cfg, &values, partial.path()).unwrap();

    for name in ["max_action.csv", "action_surface.csv", "manifest.json"] {
        let a = fs::read(full.path().join(name)).unwrap();
        let b = fs::read(partial.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs after resuming");
    }

    // rerunning on a finished directory only reloads
    let start = Instant::now();
    run_experiment(Experiment::MaxAction, &cfg, &values, full.path()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn sweep_outputs_have_expected_shape() {
    let values = rescaled_l96(300);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_sweep(1);
    cfg.lf_values = vec![3];
    let out = run_experiment(Experiment::MseWidth, &cfg, &values, dir.path()).unwrap();
    let csv = fs::read_to_string(dir.path().join("mse_width.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "m,d_h,train_mse,val_mse");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("8,4,"));
    assert_eq!(out.cells.len(), 2);

    let levels = run_experiment(Experiment::ActionLevels, &cfg, &values, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("action_levels_m12.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), cfg.schedule.n_steps);
    for row in rows {
        let v: Vec<f64> = row.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 2);
        assert!(v[0] <= v[1]);
    }
    assert!(levels.files.iter().any(|f| f.ends_with("manifest.json")));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "action-levels");
    assert_eq!(manifest["config"]["schedule"]["alpha"], 4.0);
}

#[test]
fn smallest_sweep_finishes_within_a_minute() {
    let values = rescaled_l96(2000);
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig {
        m_values: vec![10],
        dh_values: vec![15],
        lf_values: vec![4],
        schedule: AnnealSchedule {
            n_steps: 5,
            n_inits: 5,
            ..AnnealSchedule::default()
        },
        optimizer: LbfgsConfig::default(),
        seed: 0,
        spec: EmbeddingSpec::new(7, 5).unwrap(),
        m_total: None,
    };
    let start = Instant::now();
    let out = run_experiment(Experiment::ActionLevels, &cfg, &values, dir.path()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("M=10, 5 steps: {secs:.2} s");
    assert!(secs < 60.0);
    assert_eq!(out.cells[0].record.steps.len(), 5);
    assert!(out.cells[0].record.steps.iter().all(|s| s.levels.len() == 5));
}

fn random_weights(arch: &Architecture, rng: &mut ChaCha8Rng) -> Weights {
    let mut w = Weights::zeros(arch);
    for m in &mut w.matrices {
        for v in &mut m.data {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 32,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn errors_ignore_pair_order(seed in 0u64..10_000, m in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..m + 40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lib = PairLibrary::from_series(&values, EmbeddingSpec::new(3, 4).unwrap(), m, None).unwrap();
        let arch = Architecture::mlp(4, 4, 5).unwrap();
        let w = random_weights(&arch, &mut rng);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let shuffled = lib.permuted(&perm);
        let a = training_mse(&w, &lib).unwrap();
        let b = training_mse(&w, &shuffled).unwrap();
        prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1e-300));
        prop_assert_eq!(validation_mse(&w, &lib).unwrap(), validation_mse(&w, &shuffled).unwrap());
    }
}
