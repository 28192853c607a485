use crate::dataset::MeasurementSet;
use crate::error::{invalid, Result};
use crate::geometry::Point3;

/// Distance between two location pairs, minimized over both endpoint
/// assignments so that a pair and its swap are at distance zero.
pub fn pair_distance(p1: (Point3, Point3), p2: (Point3, Point3)) -> f64 {
    let (a1, b1) = p1;
    let (a2, b2) = p2;
    let straight = a1.distance(a2) + b1.distance(b2);
    let crossed = a1.distance(b2) + b1.distance(a2);
    straight.min(crossed)
}

/// Unweighted mean gain of the `k` context measurements nearest to `query`
/// under [`pair_distance`]. Equal distances keep context order.
pub fn knn_estimate(query: (Point3, Point3), context: &MeasurementSet, k: usize) -> Result<f64> {
    if k == 0 || k > context.len() {
        return Err(invalid(format!("k = {k} outside [1, {}]", context.len())));
    }
    let mut dists: Vec<(f64, usize)> =
        context.measurements.iter().enumerate().map(|(i, m)| (pair_distance(query, (m.tx, m.rx)), i)).collect();
    // Stable sort on distance alone keeps ties in context order.
    dists.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = dists[..k].iter().map(|&(_, i)| context.measurements[i].gain).sum();
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Measurement;

    fn p(x: f64, y: f64) -> Point3 {
        Point3::new(x, y, 0.0)
    }

    #[test]
    fn swapped_pair_is_at_zero_distance() {
        let a = (p(1.0, 2.0), p(30.0, 4.0));
        assert_eq!(pair_distance(a, a), 0.0);
        assert_eq!(pair_distance(a, (a.1, a.0)), 0.0);
    }

    #[test]
    fn k_out_of_range() {
        let set = MeasurementSet::new(0, vec![Measurement { tx: p(0.0, 0.0), rx: p(1.0, 0.0), gain: -50.0, env_id: 0 }]);
        assert!(knn_estimate((p(0.0, 0.0), p(1.0, 1.0)), &set, 0).is_err());
        assert!(knn_estimate((p(0.0, 0.0), p(1.0, 1.0)), &set, 2).is_err());
    }

    #[test]
    fn ties_keep_context_order() {
        let q = (p(0.0, 0.0), p(10.0, 0.0));
        let set = MeasurementSet::new(
            0,
            vec![
                Measurement { tx: p(0.0, 1.0), rx: p(10.0, 0.0), gain: -10.0, env_id: 0 },
                Measurement { tx: p(0.0, -1.0), rx: p(10.0, 0.0), gain: -20.0, env_id: 0 },
            ],
        );
        assert_eq!(knn_estimate(q, &set, 1).unwrap(), -10.0);
    }
}
