use crete_core::dataset::*;
use crete_core::environment::*;
use crete_core::evaluation::*;
use crete_core::{Point3, Result};

struct Constant(f64);

struct ConstantConditioned(f64);

impl Conditioned for ConstantConditioned {
    fn estimate(&self, _tx: Point3, _rx: Point3) -> Result<f64> {
        Ok(self.0)
    }
}

impl Estimator for Constant {
    fn name(&self) -> String {
        "constant".into()
    }
    fn condition<'a>(&'a self, _env: &'a Environment, _c: &'a MeasurementSet) -> Result<Box<dyn Conditioned + 'a>> {
        Ok(Box::new(ConstantConditioned(self.0)))
    }
}

fn env_and_context(seed: u64) -> (Environment, MeasurementSet) {
    let env = sample_environment(seed, &EnvironmentConfig::default()).unwrap();
    let t = place_terminals(seed + 1, &env.region, 10).unwrap();
    let set = build_all_pairs(&env, &t, 0.0, 0).unwrap();
    (env, set)
}

#[test]
fn oracle_has_zero_mae() {
    let (env, set) = env_and_context(1);
    assert_eq!(mae(&OracleEstimator, &env, &set, 30, 4).unwrap(), 0.0);
}

#[test]
fn mae_matches_hand_rolled_loop() {
    let (env, set) = env_and_context(2);
    let est = KnnEstimator { k: 3 };
    let got = mae(&est, &env, &set, 30, 5).unwrap();
    let pairs = eval_pairs(&env, 30, 5);
    let c = est.condition(&env, &set).unwrap();
    let want = pairs.iter().map(|&(a, b)| (env.channel_gain(a, b).unwrap() - c.estimate(a, b).unwrap()).abs()).sum::<f64>() / 30.0;
    assert_eq!(got, want);
    assert!(pairs.iter().all(|(a, b)| a.distance(*b) >= env.path_loss.d0));
}

#[test]
fn constant_estimator_on_flat_truth() {
    // Every eval pair shares one gain when the path loss exponent is zero and
    // there are no buildings.
    let pl = PathLossParams { l0: 60.0, gamma: 0.0, d0: 1.0 };
    let env = Environment::new(0, Region::default(), GridSpec::default(), vec![], pl).unwrap();
    let set = MeasurementSet::new(0, vec![]);
    let v = mae(&Constant(-55.0), &env, &set, 30, 1).unwrap();
    assert!((v - 5.0).abs() < 1e-12);
}

#[test]
fn full_measurement_and_perfect_estimates_give_zero_nmae() {
    let (env, _) = env_and_context(3);
    let t = place_terminals(7, &env.region, 8).unwrap();
    let link = LinkParams::default();
    assert_eq!(capacity_matrix_nmae(&KnnEstimator { k: 1 }, &env, &t, 1.0, 0.0, &link, 1).unwrap(), 0.0);
    assert_eq!(capacity_matrix_nmae(&OracleEstimator, &env, &t, 0.5, 0.0, &link, 1).unwrap(), 0.0);
}

#[test]
fn capacity_matrices_copy_measurements_and_are_symmetric() {
    let (env, _) = env_and_context(4);
    let t = place_terminals(8, &env.region, 9).unwrap();
    let link = LinkParams::default();
    let m = capacity_matrices(&KnnEstimator { k: 2 }, &env, &t, 0.5, 0.0, &link, 2).unwrap();
    let measured: usize = (0..9).map(|i| (i + 1..9).filter(|&j| m.measured[i][j]).count()).sum();
    assert_eq!(measured, 18);
    for i in 0..9 {
        for j in 0..9 {
            assert_eq!(m.estimate[i][j], m.estimate[j][i]);
            assert_eq!(m.truth[i][j], m.truth[j][i]);
            if m.measured[i][j] {
                assert_eq!(m.estimate[i][j], m.truth[i][j]);
            }
        }
    }
}

#[test]
fn four_terminal_nmae_by_hand() {
    let env = sample_environment(0, &EnvironmentConfig { max_buildings: 0, ..Default::default() }).unwrap();
    let t = vec![Point3::new(10.0, 10.0, 1.0), Point3::new(40.0, 10.0, 1.0), Point3::new(10.0, 200.0, 1.0), Point3::new(300.0, 300.0, 1.0)];
    let link = LinkParams::default();
    let m = capacity_matrices(&KnnEstimator { k: 1 }, &env, &t, 0.5, 0.0, &link, 11).unwrap();
    // Recompute from scratch: 1-NN over the measured pairs, then NMAE.
    let measured: Vec<(usize, usize)> = terminal_pairs(4).filter(|&(i, j)| m.measured[i][j]).collect();
    assert_eq!(measured.len(), 3);
    let (mut err, mut mass) = (0.0, 0.0);
    for (i, j) in terminal_pairs(4).filter(|&(i, j)| !m.measured[i][j]) {
        let q = (t[i], t[j]);
        let best = measured
            .iter()
            .min_by(|a, b| {
                let da = crete_core::baselines::pair_distance(q, (t[a.0], t[a.1]));
                let db = crete_core::baselines::pair_distance(q, (t[b.0], t[b.1]));
                da.total_cmp(&db)
            })
            .unwrap();
        let est = capacity_from_gain(env.channel_gain(t[best.0], t[best.1]).unwrap(), &link);
        let truth = capacity_from_gain(env.channel_gain(t[i], t[j]).unwrap(), &link);
        err += (est - truth).abs();
        mass += truth;
    }
    let got = nmae_from_matrices(&m);
    assert!((got - err / mass).abs() <= 1e-12 * got.max(1.0), "{got} vs {}", err / mass);
}

#[test]
fn cluster_head_brute_force() {
    let truth = vec![
        vec![0.0, 9.0, 9.0, 1.0, 1.0],
        vec![9.0, 0.0, 9.0, 9.0, 1.0],
        vec![9.0, 9.0, 0.0, 1.0, 1.0],
        vec![1.0, 9.0, 1.0, 0.0, 9.0],
        vec![1.0, 1.0, 1.0, 9.0, 0.0],
    ];
    let mut est = truth.clone();
    est[4][0] = 9.0;
    est[0][4] = 9.0;
    est[4][2] = 9.0;
    est[2][4] = 9.0;
    let c = cluster_head_counts(&truth, &est, 5.0).unwrap();
    // Estimated counts: [3, 3, 3, 2, 3]; terminal 0 wins the tie.
    assert_eq!(c, ClusterHeadCounts { head: 0, chosen: 2, best: 3 });
    let perfect = cluster_head_counts(&truth, &truth, 5.0).unwrap();
    assert_eq!(perfect.chosen, perfect.best);
    assert!((cluster_head_quality(&[c, perfect]) - 5.0 / 6.0).abs() < 1e-12);
    let none = cluster_head_counts(&truth, &est, 100.0).unwrap();
    assert_eq!(cluster_head_quality(&[none]), 1.0);
}

fn small(id: ExperimentId) -> ExperimentConfig {
    ExperimentConfig { num_test_envs: 2, num_terminals: 12, context_size: 20, ..ExperimentConfig::new(id) }
}

#[test]
fn experiments_are_deterministic_and_well_formed() {
    let knn = KnnEstimator { k: 3 };
    let ests: [&dyn Estimator; 2] = [&knn, &OracleEstimator];
    for id in [ExperimentId::MaeVsM, ExperimentId::NmaeVsN, ExperimentId::ClusterHeadVsThreshold, ExperimentId::MaeVsBuildings] {
        let mut cfg = small(id);
        if id == ExperimentId::MaeVsM {
            cfg.values = vec![5.0, 30.0];
        }
        let a = run_experiment(&cfg, &ests).unwrap();
        let b = run_experiment(&cfg, &ests).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let csv = a.to_csv();
        let header = csv.lines().next().unwrap();
        assert_eq!(header, format!("{},knn,oracle,knn_std,oracle_std", id.variable()));
        assert_eq!(csv.lines().count(), cfg.values.len() + 1);
        let oracle = &a.metric[1];
        match id {
            ExperimentId::ClusterHeadVsThreshold => assert!(oracle.iter().all(|&q| q == 1.0)),
            _ => assert!(oracle.iter().all(|&q| q == 0.0)),
        }
    }
}

#[test]
fn single_value_sweep_has_one_row() {
    let cfg = ExperimentConfig { values: vec![10.0], ..small(ExperimentId::MaeVsM) };
    let r = run_experiment(&cfg, &[&KnnEstimator { k: 1 }]).unwrap();
    assert_eq!(r.to_csv().lines().count(), 2);
    assert_eq!(r.file_name("20240101T000000"), "exp_mae_vs_m_20240101T000000.csv");
}
