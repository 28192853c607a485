use crete_core::environment::*;
use crete_core::Point3;
use proptest::prelude::*;

fn point_in(region: Region) -> impl Strategy<Value = Point3> {
    (0.0..=region.x_extent, 0.0..=region.y_extent, 0.0..=region.z_extent).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

#[test]
fn building_count_is_uniform() {
    let cfg = EnvironmentConfig::default();
    let draws = 2700;
    let mut hist = [0usize; 9];
    for seed in 0..draws {
        hist[sample_environment(seed, &cfg).unwrap().buildings.len()] += 1;
    }
    let expected = draws as f64 / 9.0;
    let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    // 99.9% quantile of chi-square with 8 degrees of freedom.
    assert!(chi2 < 26.12, "chi2 = {chi2}, histogram {hist:?}");
}

#[test]
fn zero_max_buildings_gives_free_space() {
    let cfg = EnvironmentConfig { max_buildings: 0, ..Default::default() };
    for seed in 0..20 {
        let env = sample_environment(seed, &cfg).unwrap();
        assert!(env.buildings.is_empty());
        assert!(env.loss_field.values.iter().all(|&v| v == 0.0));
        let (a, b) = (Point3::new(10.0, 10.0, 1.0), Point3::new(110.0, 10.0, 1.0));
        assert_eq!(env.channel_gain(a, b).unwrap(), -env.path_loss.loss_db(100.0));
    }
}

#[test]
fn rasterized_field_matches_building_density() {
    let env = sample_environment(3, &EnvironmentConfig::default()).unwrap();
    let g = *env.grid();
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let c = g.voxel_center(&env.region, ix, iy, 0);
            let expected = env.buildings.iter().filter(|b| b.contains_xy(c.x, c.y)).map(|b| b.loss_density).fold(0.0, f64::max);
            assert_eq!(env.loss_field.values[g.flat_index(ix, iy, 0)], expected);
        }
    }
}

#[test]
fn out_of_region_is_an_error() {
    let env = sample_environment(0, &EnvironmentConfig::default()).unwrap();
    let inside = env.region.center();
    assert!(env.channel_gain(inside, Point3::new(-1.0, 0.0, 0.0)).is_err());
    assert!(env.channel_gain(Point3::new(0.0, 0.0, 21.0), inside).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gain_is_reciprocal(seed in 0u64..1000, a in point_in(Region::default()), b in point_in(Region::default())) {
        let env = sample_environment(seed, &EnvironmentConfig::default()).unwrap();
        prop_assert_eq!(env.channel_gain(a, b).unwrap().to_bits(), env.channel_gain(b, a).unwrap().to_bits());
    }

    #[test]
    fn adding_a_building_never_raises_gain(
        seed in 0u64..1000,
        a in point_in(Region::default()),
        b in point_in(Region::default()),
        cx in 0.0..350.0f64,
        cy in 0.0..350.0f64,
    ) {
        let env = sample_environment(seed, &EnvironmentConfig::default()).unwrap();
        let mut buildings = env.buildings.clone();
        buildings.push(Building { center_x: cx, center_y: cy, width: 40.0, depth: 40.0, loss_density: 1.0 });
        let more = Environment::new(env.id, env.region, *env.grid(), buildings, env.path_loss).unwrap();
        prop_assert!(more.channel_gain(a, b).unwrap() <= env.channel_gain(a, b).unwrap() + 1e-9);
    }

    #[test]
    fn free_space_gain_decreases_with_distance(d1 in 1.0..300.0f64, extra in 0.01..40.0f64) {
        let env = sample_environment(0, &EnvironmentConfig { max_buildings: 0, ..Default::default() }).unwrap();
        let o = Point3::new(5.0, 5.0, 5.0);
        let g1 = env.channel_gain(o, Point3::new(5.0 + d1, 5.0, 5.0)).unwrap();
        let g2 = env.channel_gain(o, Point3::new(5.0 + (d1 + extra).min(344.0), 5.0, 5.0)).unwrap();
        prop_assert!(g2 <= g1);
    }

    #[test]
    fn capacity_is_monotone_in_gain(g in -200.0..0.0f64, dg in 0.0..50.0f64) {
        let link = LinkParams::default();
        prop_assert!(capacity_from_gain(g + dg, &link) >= capacity_from_gain(g, &link));
        prop_assert!(capacity_from_gain(g, &link) >= 0.0);
    }
}
