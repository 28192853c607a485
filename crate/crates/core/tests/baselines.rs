use crete_core::baselines::prox::prox_l1_nonneg;
use crete_core::baselines::*;
use crete_core::dataset::*;
use crete_core::environment::*;
use crete_core::evaluation::eval_pairs;
use crete_core::traversal::segment_voxel_lengths;
use crete_core::Point3;
use proptest::prelude::*;

fn single_building() -> (Environment, MeasurementSet) {
    let region = Region::default();
    let b = Building { center_x: 170.0, center_y: 160.0, width: 40.0, depth: 40.0, loss_density: 1.0 };
    let env = Environment::new(0, region, GridSpec::default(), vec![b], PathLossParams::default()).unwrap();
    let t = place_terminals(1, &region, 50).unwrap();
    let set = build_all_pairs(&env, &t, 0.0, 0).unwrap();
    (env, set)
}

fn held_out_mae(env: &Environment, model: &TomographicModel) -> f64 {
    let pairs = eval_pairs(env, 200, 3);
    pairs.iter().map(|&(a, b)| (env.channel_gain(a, b).unwrap() - model.predict(a, b).unwrap()).abs()).sum::<f64>() / pairs.len() as f64
}

fn point() -> impl Strategy<Value = Point3> {
    (0.0..350.0f64, 0.0..350.0f64, 0.0..20.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

#[test]
fn single_building_fits_are_accurate_and_monotone() {
    let (env, set) = single_building();
    assert_eq!(set.len(), 1225);
    for kind in RegularizerKind::ALL {
        let base = RegularizerSpec::new(kind, 1.0);
        let (lambda, model) = select_lambda(&set, env.grid(), &env.region, 1.0, &base, &default_lambda_grid(kind), 0.2, 0).unwrap();
        let mae = held_out_mae(&env, &model);
        assert!(mae < 0.5, "{kind:?} lambda {lambda}: mae {mae}");
        assert!(model.objective_trace.windows(2).all(|w| w[1] <= w[0]), "{kind:?} objective increased");
        assert!(model.field.iter().all(|&f| f >= 0.0));
    }
}

#[test]
fn free_space_recovers_path_loss() {
    let env = sample_environment(0, &EnvironmentConfig { max_buildings: 0, ..Default::default() }).unwrap();
    let t = place_terminals(2, &env.region, 30).unwrap();
    let set = build_all_pairs(&env, &t, 0.0, 0).unwrap();
    let spec = RegularizerSpec { max_iterations: 2000, tolerance: 1e-14, ..RegularizerSpec::new(RegularizerKind::L1, 1e-2) };
    let model = tomographic_fit(&set, env.grid(), &env.region, 1.0, &spec).unwrap();
    assert!((model.a - 40.05).abs() < 1e-6, "a = {}", model.a);
    assert!((model.b - 20.0).abs() < 1e-6, "b = {}", model.b);
    assert!(model.field.iter().all(|&f| f < 1e-3));
}

#[test]
fn huge_lambda_reduces_to_path_loss_regression() {
    let (env, set) = single_building();
    let model = tomographic_fit(&set, env.grid(), &env.region, 1.0, &RegularizerSpec::new(RegularizerKind::Tikhonov, 1e9)).unwrap();
    assert!(model.field.iter().all(|&f| f < 1e-6));
    // Plain least squares of -gain on log10(d).
    let u: Vec<f64> = set.measurements.iter().map(|m| m.tx.distance(m.rx).max(1.0).log10()).collect();
    let y: Vec<f64> = set.gains().iter().map(|g| -g).collect();
    let n = u.len() as f64;
    let (mu, my) = (u.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let b = u.iter().zip(&y).map(|(a, c)| (a - mu) * (c - my)).sum::<f64>() / u.iter().map(|a| (a - mu).powi(2)).sum::<f64>();
    assert!((model.b - b).abs() < 1e-3, "{} vs {b}", model.b);
    assert!((model.a - (my - b * mu)).abs() < 1e-2);
}

#[test]
fn l1_fixed_point_satisfies_soft_threshold_condition() {
    let (env, set) = single_building();
    let spec = RegularizerSpec { max_iterations: 3000, tolerance: 1e-15, ..RegularizerSpec::new(RegularizerKind::L1, 0.1) };
    let model = tomographic_fit(&set, env.grid(), &env.region, 1.0, &spec).unwrap();
    // Gradient of the data term at the solution.
    let n = env.grid().num_voxels();
    let mut grad = vec![0.0; n];
    for m in &set.measurements {
        let w = segment_voxel_lengths(m.tx, m.rx, env.grid(), &env.region).unwrap();
        let d = m.tx.distance(m.rx).max(1.0).log10();
        let r = m.gain + model.a + model.b * d + w.dot(&model.field);
        for &(v, l) in &w.entries {
            grad[v] += 2.0 / set.len() as f64 * l * r;
        }
    }
    let step = 1e-3;
    let v: Vec<f64> = model.field.iter().zip(&grad).map(|(f, g)| f - step * g).collect();
    let again = prox_l1_nonneg(&v, step * spec.lambda);
    let gap = again.iter().zip(&model.field).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-5, "fixed-point gap {gap}");
}

#[test]
fn plug_in_model_matches_channel_gain() {
    let env = sample_environment(21, &EnvironmentConfig::default()).unwrap();
    let model = TomographicModel {
        grid: *env.grid(),
        region: env.region,
        field: env.loss_field.values.clone(),
        a: env.path_loss.l0,
        b: 10.0 * env.path_loss.gamma,
        d0: env.path_loss.d0,
        objective_trace: vec![],
    };
    for (a, b) in eval_pairs(&env, 50, 1) {
        assert!((model.predict(a, b).unwrap() - env.channel_gain(a, b).unwrap()).abs() < 1e-9);
    }
    let zero = TomographicModel { field: vec![0.0; env.grid().num_voxels()], ..model };
    let (a, b) = (Point3::new(1.0, 1.0, 1.0), Point3::new(101.0, 1.0, 1.0));
    assert!((zero.predict(a, b).unwrap() + env.path_loss.loss_db(100.0)).abs() < 1e-9);
}

fn set_of(points: &[(Point3, Point3, f64)]) -> MeasurementSet {
    MeasurementSet::new(0, points.iter().map(|&(tx, rx, gain)| Measurement { tx, rx, gain, env_id: 0 }).collect())
}

#[test]
fn knn_matches_exhaustive_sort() {
    let p = |x: f64, y: f64| Point3::new(x, y, 0.0);
    let set = set_of(&[
        (p(0.0, 0.0), p(10.0, 0.0), -50.0),
        (p(1.0, 0.0), p(11.0, 0.0), -60.0),
        (p(50.0, 0.0), p(60.0, 0.0), -70.0),
        (p(12.0, 1.0), p(2.0, 1.0), -80.0),
        (p(100.0, 0.0), p(0.0, 100.0), -90.0),
    ]);
    let q = (p(0.5, 0.0), p(10.5, 0.0));
    let mut d: Vec<(f64, f64)> = set.measurements.iter().map(|m| (pair_distance(q, (m.tx, m.rx)), m.gain)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    let expected = d[..3].iter().map(|x| x.1).sum::<f64>() / 3.0;
    assert_eq!(knn_estimate(q, &set, 3).unwrap(), expected);
    let mean = set.gains().iter().sum::<f64>() / 5.0;
    assert!((knn_estimate(q, &set, 5).unwrap() - mean).abs() < 1e-12);
}

#[test]
fn knn_recovers_measured_pairs_exactly() {
    let env = sample_environment(8, &EnvironmentConfig::default()).unwrap();
    let t = place_terminals(9, &env.region, 20).unwrap();
    let set = build_all_pairs(&env, &t, 0.0, 0).unwrap();
    for m in &set.measurements {
        assert_eq!(knn_estimate((m.tx, m.rx), &set, 1).unwrap(), m.gain);
        assert_eq!(knn_estimate((m.rx, m.tx), &set, 1).unwrap(), m.gain);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pair_distance_is_min_of_both_assignments(a in point(), b in point(), c in point(), d in point()) {
        let v = pair_distance((a, b), (c, d));
        prop_assert!(v <= a.distance(c) + b.distance(d));
        prop_assert!(v <= a.distance(d) + b.distance(c));
        prop_assert_eq!(pair_distance((a, b), (b, a)), 0.0);
        prop_assert_eq!(pair_distance((a, b), (c, d)), pair_distance((b, a), (c, d)));
    }

    #[test]
    fn knn_ignores_order_and_endpoint_swaps(
        ms in prop::collection::vec((point(), point(), -150.0..-40.0f64), 3..12),
        q in (point(), point()),
        k in 1usize..3,
    ) {
        let set = set_of(&ms);
        let mut reversed: Vec<_> = ms.iter().map(|&(a, b, g)| (b, a, g)).collect();
        reversed.reverse();
        prop_assert!((knn_estimate(q, &set, k).unwrap() - knn_estimate(q, &set_of(&reversed), k).unwrap()).abs() < 1e-9);
    }
}
