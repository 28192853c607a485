//! Canonicalization of a (query pair, context set) input.
//!
//! Five deterministic stages remove the symmetries of the channel-gain
//! estimation problem before any learnable map is applied:
//!
//! 1. order the query pair (`orient_query`),
//! 2. translate so the first query point is the origin (`translate`),
//! 3. order the endpoints of each measurement (`order_endpoints`),
//! 4. rotate about the vertical axis so the second query point lies on the
//!    positive x semi-axis (`rotate`),
//! 5. mirror across the xz plane when the context leans to negative y
//!    (`mirror`).
//!
//! [`assemble_features`] then lays out one 23-entry feature row per context
//! measurement.

use std::cmp::Ordering;

use crate::dataset::{Measurement, MeasurementSet};
use crate::error::{invalid, Result};
use crate::geometry::Point3;

pub const NUM_FEATURES: usize = 23;

/// Affine standardization `(g - mean) / std` of gains in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainScaler {
    pub mean: f64,
    pub std: f64,
}

impl GainScaler {
    pub fn identity() -> Self {
        GainScaler { mean: 0.0, std: 1.0 }
    }

    /// Mean and (population) standard deviation over every gain in `sets`.
    pub fn fit<'a>(sets: impl IntoIterator<Item = &'a MeasurementSet>) -> Result<Self> {
        let (mut n, mut sum, mut sumsq) = (0usize, 0.0, 0.0);
        for s in sets {
            for m in &s.measurements {
                n += 1;
                sum += m.gain;
                sumsq += m.gain * m.gain;
            }
        }
        if n == 0 {
            return Err(invalid("cannot fit a gain scaler on an empty corpus"));
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(GainScaler { mean, std })
    }

    pub fn standardize(&self, gain: f64) -> f64 {
        (gain - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        self.mean + self.std * z
    }
}

/// Estimate the gain between `x` and `y` given `context`.
#[derive(Debug, Clone, Copy)]
pub struct QueryInput<'a> {
    pub x: Point3,
    pub y: Point3,
    pub context: &'a [Measurement],
}

impl<'a> QueryInput<'a> {
    pub fn new(x: Point3, y: Point3, context: &'a MeasurementSet) -> Self {
        QueryInput { x, y, context: &context.measurements }
    }
}

/// Query and context after translation; `x` is always the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalInput {
    pub x: Point3,
    pub y: Point3,
    pub endpoints: Vec<(Point3, Point3)>,
    /// Height of the first query point before translation.
    pub x_height_raw: f64,
}

impl CanonicalInput {
    fn map_points(&mut self, f: impl Fn(Point3) -> Point3) {
        self.x = f(self.x);
        self.y = f(self.y);
        for (a, b) in &mut self.endpoints {
            *a = f(*a);
            *b = f(*b);
        }
    }
}

fn mean_distance(p: Point3, context: &[Measurement]) -> f64 {
    let total: f64 = context.iter().map(|m| p.distance(m.tx) + p.distance(m.rx)).sum();
    total / (2 * context.len()) as f64
}

/// Puts first the query point that is on average closer to the context
/// endpoints; ties go to the lexicographically smaller point.
pub fn orient_query(q: QueryInput<'_>) -> QueryInput<'_> {
    let dx = mean_distance(q.x, q.context);
    let dy = mean_distance(q.y, q.context);
    let keep = match dx.total_cmp(&dy) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => q.x.lex_cmp(&q.y) != Ordering::Greater,
    };
    if keep {
        q
    } else {
        QueryInput { x: q.y, y: q.x, context: q.context }
    }
}

pub fn translate(q: QueryInput<'_>) -> CanonicalInput {
    let o = q.x;
    CanonicalInput { x: Point3::ORIGIN, y: q.y - o, endpoints: q.context.iter().map(|m| (m.tx - o, m.rx - o)).collect(), x_height_raw: o.z }
}

/// Within each measurement, the endpoint nearer the origin comes first.
pub fn order_endpoints(mut c: CanonicalInput) -> CanonicalInput {
    for (a, b) in &mut c.endpoints {
        let swap = match a.norm().total_cmp(&b.norm()) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => a.lex_cmp(b) == Ordering::Greater,
        };
        if swap {
            std::mem::swap(a, b);
        }
    }
    c
}

/// Rotates about z so that `y` projects onto the positive x semi-axis. A `y`
/// directly above or below the origin leaves the input unchanged.
pub fn rotate(mut c: CanonicalInput) -> CanonicalInput {
    let r = c.y.horizontal_norm();
    if r == 0.0 {
        return c;
    }
    let (cos, sin) = (c.y.x / r, c.y.y / r);
    c.map_points(|p| Point3::new(cos * p.x + sin * p.y, -sin * p.x + cos * p.y, p.z));
    c.y = Point3::new(r, 0.0, c.y.z);
    c
}

/// Reflects across the xz plane when the context endpoints' y-coordinates sum
/// to a negative value.
pub fn mirror(mut c: CanonicalInput) -> CanonicalInput {
    let vote: f64 = c.endpoints.iter().map(|(a, b)| a.y + b.y).sum();
    if vote < 0.0 {
        c.map_points(|p| Point3::new(p.x, -p.y, p.z));
    }
    c
}

/// Feature rows, one per context measurement, `NUM_FEATURES` wide.
///
/// Row layout: `tx (3) | rx (3) | y (3) | |tx| |rx| |y| | tx/|tx| (3) |
/// rx/|rx| (3) | y/|y| (3) | x height before translation | standardized gain`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * NUM_FEATURES..(m + 1) * NUM_FEATURES]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for m in 0..self.rows {
            let row: Vec<String> = self.row(m).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn assemble_features(c: &CanonicalInput, gains: &[f64], scaler: &GainScaler) -> Result<FeatureMatrix> {
    if gains.len() != c.endpoints.len() {
        return Err(invalid(format!("{} gains for {} context measurements", gains.len(), c.endpoints.len())));
    }
    let y = c.y;
    let mut data = Vec::with_capacity(c.endpoints.len() * NUM_FEATURES);
    for (&(tx, rx), &g) in c.endpoints.iter().zip(gains) {
        data.extend_from_slice(&tx.to_array());
        data.extend_from_slice(&rx.to_array());
        data.extend_from_slice(&y.to_array());
        data.extend_from_slice(&[tx.norm(), rx.norm(), y.norm()]);
        data.extend_from_slice(&tx.normalized().to_array());
        data.extend_from_slice(&rx.normalized().to_array());
        data.extend_from_slice(&y.normalized().to_array());
        data.push(c.x_height_raw);
        data.push(scaler.standardize(g));
    }
    Ok(FeatureMatrix { rows: c.endpoints.len(), data })
}

/// Runs all five canonicalization stages.
pub fn canonical_input(q: QueryInput<'_>) -> Result<CanonicalInput> {
    if q.context.is_empty() {
        return Err(invalid("query context must be nonempty"));
    }
    Ok(mirror(rotate(order_endpoints(translate(orient_query(q))))))
}

pub fn canonicalize(q: QueryInput<'_>, scaler: &GainScaler) -> Result<FeatureMatrix> {
    let gains: Vec<f64> = q.context.iter().map(|m| m.gain).collect();
    assemble_features(&canonical_input(q)?, &gains, scaler)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meas(tx: [f64; 3], rx: [f64; 3], gain: f64) -> Measurement {
        Measurement { tx: tx.into(), rx: rx.into(), gain, env_id: 0 }
    }

    #[test]
    fn closer_query_point_goes_first() {
        let ctx = vec![meas([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], -50.0)];
        let x = Point3::new(1.0, 1.0, 1.0);
        let y = Point3::new(300.0, 200.0, 5.0);
        let q = orient_query(QueryInput { x, y, context: &ctx });
        assert_eq!((q.x, q.y), (x, y));
        let q = orient_query(QueryInput { x: y, y: x, context: &ctx });
        assert_eq!((q.x, q.y), (x, y));
    }

    #[test]
    fn tie_breaks_lexicographically() {
        // Context symmetric about x = 0 makes mirrored query points tie.
        let ctx = vec![meas([-5.0, 0.0, 0.0], [5.0, 0.0, 0.0], -60.0)];
        let a = Point3::new(-2.0, 3.0, 1.0);
        let b = Point3::new(2.0, 3.0, 1.0);
        let q1 = orient_query(QueryInput { x: a, y: b, context: &ctx });
        let q2 = orient_query(QueryInput { x: b, y: a, context: &ctx });
        assert_eq!((q1.x, q1.y), (a, b));
        assert_eq!((q2.x, q2.y), (a, b));
    }

    #[test]
    fn translation_records_height() {
        let ctx = vec![meas([10.0, 10.0, 2.0], [20.0, 5.0, 3.0], -70.0)];
        let c = translate(QueryInput { x: Point3::new(4.0, 5.0, 6.0), y: Point3::new(7.0, 8.0, 9.0), context: &ctx });
        assert_eq!(c.x, Point3::ORIGIN);
        assert_eq!(c.y, Point3::new(3.0, 3.0, 3.0));
        assert_eq!(c.x_height_raw, 6.0);
        assert_eq!(c.endpoints[0].0, Point3::new(6.0, 5.0, -4.0));
    }

    #[test]
    fn origin_query_translation_is_identity() {
        let ctx = vec![meas([10.0, 10.0, 2.0], [20.0, 5.0, 3.0], -70.0)];
        let y = Point3::new(7.0, 8.0, 9.0);
        let c = translate(QueryInput { x: Point3::ORIGIN, y, context: &ctx });
        assert_eq!(c.y, y);
        assert_eq!(c.endpoints[0], (ctx[0].tx, ctx[0].rx));
    }

    #[test]
    fn coincident_endpoints_are_unchanged() {
        let p = Point3::new(1.0, 2.0, 3.0);
        let c = CanonicalInput { x: Point3::ORIGIN, y: p, endpoints: vec![(p, p)], x_height_raw: 0.0 };
        assert_eq!(order_endpoints(c.clone()), c);
    }

    #[test]
    fn quarter_turn_rotation() {
        let c = CanonicalInput {
            x: Point3::ORIGIN,
            y: Point3::new(0.0, 5.0, 2.0),
            endpoints: vec![(Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 4.0))],
            x_height_raw: 0.0,
        };
        let r = rotate(c);
        assert_eq!(r.y, Point3::new(5.0, 0.0, 2.0));
        assert!((r.endpoints[0].0 - Point3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
        assert!((r.endpoints[0].1 - Point3::new(1.0, 0.0, 4.0)).norm() < 1e-15);
    }

    #[test]
    fn vertical_query_is_not_rotated() {
        let c = CanonicalInput {
            x: Point3::ORIGIN,
            y: Point3::new(0.0, 0.0, 7.0),
            endpoints: vec![(Point3::new(1.0, 2.0, 0.0), Point3::new(3.0, 1.0, 4.0))],
            x_height_raw: 0.0,
        };
        assert_eq!(rotate(c.clone()), c);
    }

    #[test]
    fn mirror_rules() {
        let flat = CanonicalInput {
            x: Point3::ORIGIN,
            y: Point3::new(5.0, 0.0, 0.0),
            endpoints: vec![(Point3::new(1.0, 0.0, 0.0), Point3::new(2.0, 0.0, 1.0))],
            x_height_raw: 0.0,
        };
        assert_eq!(mirror(flat.clone()), flat);
        let neg = CanonicalInput { endpoints: vec![(Point3::new(1.0, -3.0, 0.0), Point3::new(1.0, 0.0, 0.0))], ..flat };
        assert_eq!(mirror(neg).endpoints[0].0.y, 3.0);
    }

    #[test]
    fn feature_shape_and_zero_norm_rule() {
        let ctx = vec![meas([0.0, 0.0, 0.0], [10.0, 0.0, 0.0], -60.0), meas([3.0, 4.0, 0.0], [10.0, 2.0, 1.0], -65.0)];
        let q = QueryInput { x: Point3::ORIGIN, y: Point3::new(20.0, 0.0, 0.0), context: &ctx };
        let c = translate(q);
        let f = assemble_features(&c, &[-60.0, -65.0], &GainScaler::identity()).unwrap();
        assert_eq!(f.rows, 2);
        assert_eq!(f.data.len(), 2 * NUM_FEATURES);
        let r0 = f.row(0);
        assert_eq!(r0[9], 0.0);
        assert_eq!(&r0[12..15], &[0.0, 0.0, 0.0]);
        assert_eq!(r0[22], -60.0);
        assert_eq!(f.row(1)[9], 5.0);
        assert!(assemble_features(&c, &[1.0], &GainScaler::identity()).is_err());
    }

    #[test]
    fn empty_context_is_rejected() {
        let q = QueryInput { x: Point3::ORIGIN, y: Point3::new(1.0, 0.0, 0.0), context: &[] };
        assert!(canonicalize(q, &GainScaler::identity()).is_err());
    }
}
