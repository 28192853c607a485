use crete_core::environment::{GridSpec, Region};
use crete_core::traversal::segment_voxel_lengths;
use crete_core::Point3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Midpoint-rule Monte Carlo estimate of per-voxel chord lengths with
/// `samples` stratified points.
fn monte_carlo(a: Point3, b: Point3, grid: &GridSpec, region: &Region, samples: usize) -> Vec<f64> {
    let s = grid.voxel_size(region);
    let len = a.distance(b);
    let mut out = vec![0.0; grid.num_voxels()];
    for i in 0..samples {
        let t = (i as f64 + 0.5) / samples as f64;
        let p = a + (b - a) * t;
        let ix = ((p.x / s[0]).floor() as usize).min(grid.nx - 1);
        let iy = ((p.y / s[1]).floor() as usize).min(grid.ny - 1);
        let iz = ((p.z / s[2]).floor() as usize).min(grid.nz - 1);
        out[grid.flat_index(ix, iy, iz)] += len / samples as f64;
    }
    out
}

fn random_point(rng: &mut ChaCha8Rng, r: &Region) -> Point3 {
    Point3::new(rng.gen::<f64>() * r.x_extent, rng.gen::<f64>() * r.y_extent, rng.gen::<f64>() * r.z_extent)
}

fn check_against_oracle(grid: GridSpec, segments: usize, seed: u64) {
    let region = Region::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 100_000;
    for _ in 0..segments {
        let (a, b) = (random_point(&mut rng, &region), random_point(&mut rng, &region));
        let exact = segment_voxel_lengths(a, b, &grid, &region).unwrap().to_dense(grid.num_voxels());
        let mc = monte_carlo(a, b, &grid, &region, n);
        let len = a.distance(b);
        for (v, (&e, &m)) in exact.iter().zip(&mc).enumerate() {
            // The oracle misplaces at most one sample at each voxel boundary.
            let quantization = 2.0 * len / n as f64;
            assert!((e - m).abs() <= 1e-3 * e + quantization + 1e-9, "voxel {v}: exact {e} oracle {m}");
        }
        assert!((exact.iter().sum::<f64>() - len).abs() <= 1e-9);
    }
}

#[test]
fn matches_monte_carlo_on_default_grid() {
    check_against_oracle(GridSpec::default(), 100, 1);
}

#[test]
fn matches_monte_carlo_on_layered_grid() {
    check_against_oracle(GridSpec::new(12, 9, 4).unwrap(), 50, 2);
}

#[test]
fn axis_aligned_segment_on_voxel_face() {
    let region = Region::default();
    let grid = GridSpec::default();
    let face = region.x_extent / grid.nx as f64 * 3.0;
    let w = segment_voxel_lengths(Point3::new(face, 0.0, 5.0), Point3::new(face, 200.0, 5.0), &grid, &region).unwrap();
    assert!((w.total_length() - 200.0).abs() < 1e-9);
    assert!(w.entries.iter().all(|&(v, _)| v % grid.nx == 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn lengths_partition_the_segment(
        ax in 0.0..=350.0f64, ay in 0.0..=350.0f64, az in 0.0..=20.0f64,
        bx in 0.0..=350.0f64, by in 0.0..=350.0f64, bz in 0.0..=20.0f64,
    ) {
        let (a, b) = (Point3::new(ax, ay, az), Point3::new(bx, by, bz));
        let w = segment_voxel_lengths(a, b, &GridSpec::default(), &Region::default()).unwrap();
        prop_assert!((w.total_length() - a.distance(b)).abs() <= 1e-9);
        prop_assert!(w.entries.iter().all(|&(_, l)| l > 0.0));
    }

    #[test]
    fn reversed_segment_has_same_lengths(
        ax in 0.0..=350.0f64, ay in 0.0..=350.0f64,
        bx in 0.0..=350.0f64, by in 0.0..=350.0f64,
    ) {
        let (a, b) = (Point3::new(ax, ay, 3.0), Point3::new(bx, by, 11.0));
        let g = GridSpec::default();
        let f = segment_voxel_lengths(a, b, &g, &Region::default()).unwrap().to_dense(g.num_voxels());
        let r = segment_voxel_lengths(b, a, &g, &Region::default()).unwrap().to_dense(g.num_voxels());
        for (x, y) in f.iter().zip(&r) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}
