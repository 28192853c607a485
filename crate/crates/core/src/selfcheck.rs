//! Randomized property suites shared by the `check` command and the
//! acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, relative_error, Tape, Tensor, Var};
use crate::dataset::{Episode, Measurement, MeasurementSet};
use crate::environment::{GridSpec, Region};
use crate::error::Result;
use crate::geometry::Point3;
use crate::invariance::{canonical_input, canonicalize, QueryInput};
use crate::model::{episode_loss_and_grad, episode_loss_on_tape, estimate_pair, forward, ModelParams};
use crate::traversal::segment_voxel_lengths;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    /// Largest observed deviation in the suite's own metric.
    pub max_error: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str, tolerance: f64) -> Self {
        SuiteReport { name: name.into(), cases: 0, max_error: 0.0, tolerance, failures: Vec::new() }
    }

    fn record(&mut self, label: impl FnOnce() -> String, err: f64) {
        self.max_error = self.max_error.max(err);
        if !(err <= self.tolerance) {
            self.failures.push(format!("{}: {err:e}", label()));
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.cases > 0
    }
}

fn random_point(rng: &mut ChaCha8Rng, region: &Region) -> Point3 {
    Point3::new(rng.gen::<f64>() * region.x_extent, rng.gen::<f64>() * region.y_extent, rng.gen::<f64>() * region.z_extent)
}

fn random_set(rng: &mut ChaCha8Rng, region: &Region, n: usize) -> MeasurementSet {
    let ms = (0..n)
        .map(|_| Measurement {
            tx: random_point(rng, region),
            rx: random_point(rng, region),
            gain: rng.gen_range(-150.0..-40.0),
            env_id: 0,
        })
        .collect();
    MeasurementSet::new(0, ms)
}

fn map_set(set: &MeasurementSet, f: impl Fn(Point3) -> Point3) -> MeasurementSet {
    let ms = set.measurements.iter().map(|m| Measurement { tx: f(m.tx), rx: f(m.rx), ..*m }).collect();
    MeasurementSet::new(set.env_id, ms)
}

/// End-to-end prediction invariance, in dB, under query swap, horizontal
/// translation, z-rotation, xz-mirror and per-measurement endpoint swaps.
pub fn invariance_suite(params: &ModelParams, episodes: usize, max_context: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("invariance", 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region = Region::default();
    for case in 0..episodes {
        let n = rng.gen_range(1..=max_context);
        let set = random_set(&mut rng, &region, n);
        let (x, y) = (random_point(&mut rng, &region), random_point(&mut rng, &region));
        let base = estimate_pair(params, x, y, &set)?;

        let swap = estimate_pair(params, y, x, &set)?;
        report.record(|| format!("case {case} query swap"), (swap - base).abs());

        let (dx, dy) = (rng.gen_range(-1000.0..1000.0), rng.gen_range(-1000.0..1000.0));
        let shift = |p: Point3| p + Point3::new(dx, dy, 0.0);
        let moved = estimate_pair(params, shift(x), shift(y), &map_set(&set, shift))?;
        report.record(|| format!("case {case} translation"), (moved - base).abs());

        let (s, c) = rng.gen_range(0.0..std::f64::consts::TAU).sin_cos();
        let rot = |p: Point3| Point3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z);
        let rotated = estimate_pair(params, rot(x), rot(y), &map_set(&set, rot))?;
        report.record(|| format!("case {case} rotation"), (rotated - base).abs());

        let mir = |p: Point3| Point3::new(p.x, -p.y, p.z);
        let mirrored = estimate_pair(params, mir(x), mir(y), &map_set(&set, mir))?;
        report.record(|| format!("case {case} mirror"), (mirrored - base).abs());

        let swapped: Vec<Measurement> =
            set.measurements.iter().map(|m| if rng.gen::<bool>() { Measurement { tx: m.rx, rx: m.tx, ..*m } } else { *m }).collect();
        let es = estimate_pair(params, x, y, &MeasurementSet::new(0, swapped))?;
        report.record(|| format!("case {case} endpoint swap"), (es - base).abs());
        report.cases += 1;
    }
    Ok(report)
}

fn weighted_sum(tape: &mut Tape, v: Var, rng_seed: u64) -> Result<Var> {
    let [r, c] = tape.value(v).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = tape.leaf(Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())?);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

type Primitive = (&'static str, Vec<[usize; 2]>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn primitives() -> Vec<Primitive> {
    vec![
        ("matmul", vec![[4, 3], [3, 5]], |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![[4, 3], [6, 3]], |t, v| t.matmul_nt(v[0], v[1])),
        ("transpose", vec![[4, 3]], |t, v| Ok(t.transpose(v[0]))),
        ("add", vec![[4, 3], [4, 3]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![[4, 3], [4, 3]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![[4, 3], [4, 3]], |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![[4, 3], [1, 3]], |t, v| t.add_row(v[0], v[1])),
        ("mul_row", vec![[4, 3], [1, 3]], |t, v| t.mul_row(v[0], v[1])),
        ("scale", vec![[4, 3]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("softmax", vec![[5, 5]], |t, v| t.softmax(v[0], false)),
        ("causal_softmax", vec![[5, 5]], |t, v| t.softmax(v[0], true)),
        ("layer_norm", vec![[4, 6]], |t, v| Ok(t.layer_norm(v[0]))),
        ("gelu", vec![[4, 3]], |t, v| Ok(t.gelu(v[0]))),
        ("relu", vec![[4, 3]], |t, v| Ok(t.relu(v[0]))),
        ("sigmoid", vec![[4, 3]], |t, v| Ok(t.sigmoid(v[0]))),
        ("square", vec![[4, 3]], |t, v| Ok(t.square(v[0]))),
        ("sum", vec![[4, 3]], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![[4, 3]], |t, v| Ok(t.mean(v[0]))),
        ("mean_rows", vec![[4, 3]], |t, v| Ok(t.mean_rows(v[0]))),
    ]
}

#[derive(Debug, Clone, Copy)]
pub struct GradientSuite {
    pub h: f64,
    pub tolerance: f64,
    pub context: usize,
    pub targets: usize,
    pub per_tensor: usize,
}

/// Reverse-mode gradients of every primitive and of the full episode loss
/// against central differences. The loss is taken on a random episode with
/// `context` measurements and `targets` targets; `per_tensor` randomly chosen
/// entries of every parameter tensor are checked, all of them when the
/// tensor is no larger.
pub fn gradient_suite(params: &ModelParams, opts: &GradientSuite, seed: u64) -> Result<SuiteReport> {
    let GradientSuite { h, tolerance, context, targets, per_tensor } = *opts;
    let mut report = SuiteReport::new("gradients", tolerance);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shapes, op) in primitives() {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|&[r, c]| {
                // Entries stay away from the relu kink.
                let data = (0..r * c)
                    .map(|_| {
                        let v: f64 = rng.gen_range(0.1..1.0);
                        if rng.gen::<bool>() {
                            v
                        } else {
                            -v
                        }
                    })
                    .collect();
                Tensor::new(r, c, data)
            })
            .collect::<Result<_>>()?;
        let g = gradient_check(
            |t: &mut Tape, v: &[Var]| {
                let out = op(t, v)?;
                weighted_sum(t, out, 5)
            },
            &inputs,
            h,
            tolerance,
        )?;
        report.max_error = report.max_error.max(g.max_rel_error);
        for (i, j, a, n) in g.failures {
            report.failures.push(format!("{name} input {i}[{j}]: analytic {a} numeric {n}"));
        }
        report.cases += g.checked;
    }

    let region = Region::default();
    let episode = Episode { context: random_set(&mut rng, &region, context), targets: random_set(&mut rng, &region, targets) };
    let (_, grads) = episode_loss_and_grad(params, &episode)?;
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let base = tape.len();
    let loss_with = |tape: &mut Tape, ti: usize, j: usize, x: f64| -> Result<f64> {
        tape.truncate(base);
        tape.leaf_mut(vars[ti])?.data[j] = x;
        let l = episode_loss_on_tape(tape, params, &vars, &episode)?;
        Ok(tape.value(l).data[0])
    };
    for ti in 0..params.tensors.len() {
        let len = params.tensors[ti].data.len();
        let picks: Vec<usize> =
            if len <= per_tensor { (0..len).collect() } else { (0..per_tensor).map(|_| rng.gen_range(0..len)).collect() };
        for j in picks {
            let orig = params.tensors[ti].data[j];
            let up = loss_with(&mut tape, ti, j, orig + h)?;
            let down = loss_with(&mut tape, ti, j, orig - h)?;
            tape.leaf_mut(vars[ti])?.data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[ti].data[j];
            report.record(
                || format!("loss {}[{j}]: analytic {analytic} numeric {numeric}", params.names[ti]),
                relative_error(analytic, numeric),
            );
            report.cases += 1;
        }
    }
    Ok(report)
}

/// Line-integral weights against a stratified Monte Carlo oracle. The
/// per-voxel error is normalized by `1e-3 * w + 2 len / samples`, the
/// relative bound plus the oracle's own boundary quantization, so the suite
/// passes when the reported maximum is at most 1. Partition errors (sum of
/// weights against segment length) must stay below `1e-9`.
pub fn line_integral_suite(grid: &GridSpec, segments: usize, samples: usize, seed: u64) -> Result<(SuiteReport, SuiteReport)> {
    let region = Region::default();
    let mut voxel = SuiteReport::new("line_integral", 1.0);
    let mut partition = SuiteReport::new("partition", 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = grid.voxel_size(&region);
    for case in 0..segments {
        let (a, b) = (random_point(&mut rng, &region), random_point(&mut rng, &region));
        let w = segment_voxel_lengths(a, b, grid, &region)?.to_dense(grid.num_voxels());
        let len = a.distance(b);
        let mut mc = vec![0.0; grid.num_voxels()];
        for i in 0..samples {
            let p = a + (b - a) * ((i as f64 + 0.5) / samples as f64);
            let ix = ((p.x / s[0]).floor() as usize).min(grid.nx - 1);
            let iy = ((p.y / s[1]).floor() as usize).min(grid.ny - 1);
            let iz = ((p.z / s[2]).floor() as usize).min(grid.nz - 1);
            mc[grid.flat_index(ix, iy, iz)] += len / samples as f64;
        }
        let quantization = 2.0 * len / samples as f64;
        for (v, (&e, &m)) in w.iter().zip(&mc).enumerate() {
            let bound = 1e-3 * e + quantization;
            voxel.record(|| format!("segment {case} voxel {v}: exact {e} oracle {m}"), (e - m).abs() / bound);
        }
        partition.record(|| format!("segment {case}"), (w.iter().sum::<f64>() - len).abs());
        voxel.cases += 1;
        partition.cases += 1;
    }
    Ok((voxel, partition))
}

/// Causal prefix consistency: network outputs for the first `m` rows do not
/// depend on later rows, and end-to-end prefix estimates are unchanged by
/// appended measurements whenever the canonical frame of the earlier ones is.
pub fn prefix_suite(params: &ModelParams, cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("causal_prefix", 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region = Region::default();
    for case in 0..cases {
        let n = rng.gen_range(2..=40);
        let set = random_set(&mut rng, &region, n);
        let extra_n = rng.gen_range(1..=20);
        let extra = random_set(&mut rng, &region, extra_n);
        let (x, y) = (random_point(&mut rng, &region), random_point(&mut rng, &region));

        let f = canonicalize(QueryInput::new(x, y, &set), &params.scaler)?;
        let full = run_rows(params, &f, f.rows)?;
        let m = rng.gen_range(1..f.rows);
        let part = run_rows(params, &f, m)?;
        for i in 0..m {
            report.record(|| format!("case {case} row {i}"), (full[i] - part[i]).abs());
        }

        let mut longer = set.measurements.clone();
        longer.extend(extra.measurements);
        let longer = MeasurementSet::new(0, longer);
        let a = canonical_input(QueryInput::new(x, y, &set))?;
        let b = canonical_input(QueryInput::new(x, y, &longer))?;
        if a.endpoints[..] == b.endpoints[..set.len()] && a.y == b.y {
            let short = crate::model::predict_prefixes(QueryInput::new(x, y, &set), params)?;
            let long = crate::model::predict_prefixes(QueryInput::new(x, y, &longer), params)?;
            for (i, (s, l)) in short.iter().zip(&long).enumerate() {
                report.record(|| format!("case {case} appended, prefix {i}"), (s - l).abs());
            }
        }
        report.cases += 1;
    }
    Ok(report)
}

fn run_rows(params: &ModelParams, f: &crate::invariance::FeatureMatrix, m: usize) -> Result<Vec<f64>> {
    let part = crate::invariance::FeatureMatrix { rows: m, data: f.data[..m * crate::invariance::NUM_FEATURES].to_vec() };
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let out = forward(&mut tape, params, &vars, &part)?;
    Ok(tape.value(out).data.clone())
}
