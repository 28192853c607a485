#![allow(dead_code)]

use crete_core::dataset::{Measurement, MeasurementSet};
use crete_core::invariance::GainScaler;
use crete_core::Point3;
use proptest::prelude::*;

pub fn point() -> impl Strategy<Value = Point3> {
    (-200.0..200.0f64, -200.0..200.0f64, 0.0..20.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

pub fn measurement() -> impl Strategy<Value = Measurement> {
    (point(), point(), -150.0..-40.0f64).prop_map(|(tx, rx, gain)| Measurement { tx, rx, gain, env_id: 0 })
}

pub fn context(max: usize) -> impl Strategy<Value = MeasurementSet> {
    prop::collection::vec(measurement(), 1..=max).prop_map(|ms| MeasurementSet::new(0, ms))
}

pub fn scaler() -> GainScaler {
    GainScaler { mean: -90.0, std: 20.0 }
}

pub fn map_set(set: &MeasurementSet, f: impl Fn(Point3) -> Point3) -> MeasurementSet {
    let ms = set.measurements.iter().map(|m| Measurement { tx: f(m.tx), rx: f(m.rx), ..*m }).collect();
    MeasurementSet::new(set.env_id, ms)
}

pub fn rotation(angle: f64) -> impl Fn(Point3) -> Point3 {
    let (s, c) = angle.sin_cos();
    move |p: Point3| Point3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
}

pub fn mirror_y(p: Point3) -> Point3 {
    Point3::new(p.x, -p.y, p.z)
}
