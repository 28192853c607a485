//! Pairwise measurement sets and context/target episodes.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::environment::{Environment, Region};
use crate::error::{invalid, Result};
use crate::geometry::Point3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub tx: Point3,
    pub rx: Point3,
    /// dB
    pub gain: f64,
    pub env_id: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementSet {
    pub env_id: u64,
    /// Measurement noise standard deviation in dB used when synthesizing.
    pub noise_std: f64,
    pub measurements: Vec<Measurement>,
    /// Terminal locations for all-pairs sets; empty otherwise.
    pub terminals: Vec<Point3>,
}

impl MeasurementSet {
    pub fn new(env_id: u64, measurements: Vec<Measurement>) -> Self {
        MeasurementSet { env_id, noise_std: 0.0, measurements, terminals: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn gains(&self) -> Vec<f64> {
        self.measurements.iter().map(|m| m.gain).collect()
    }

    /// Subset by index, in the given index order.
    pub fn select(&self, indices: &[usize]) -> MeasurementSet {
        MeasurementSet {
            env_id: self.env_id,
            noise_std: self.noise_std,
            measurements: indices.iter().map(|&i| self.measurements[i]).collect(),
            terminals: Vec::new(),
        }
    }

    /// First `m` measurements.
    pub fn prefix(&self, m: usize) -> MeasurementSet {
        MeasurementSet {
            env_id: self.env_id,
            noise_std: self.noise_std,
            measurements: self.measurements[..m.min(self.len())].to_vec(),
            terminals: Vec::new(),
        }
    }
}

/// A context set to condition on and a disjoint target set to score.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub context: MeasurementSet,
    pub targets: MeasurementSet,
}

/// `n` points drawn uniformly over the region volume.
pub fn place_terminals(seed: u64, region: &Region, n: usize) -> Result<Vec<Point3>> {
    if n < 2 {
        return Err(invalid(format!("need at least 2 terminals, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| region.sample_point(&mut rng)).collect())
}

/// Index pairs `(i, j)`, `i < j`, in row-major order.
pub fn terminal_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Measures every unordered terminal pair once, adding zero-mean Gaussian noise
/// of standard deviation `noise_std` dB. Coincident terminals are skipped.
pub fn build_all_pairs(env: &Environment, terminals: &[Point3], noise_std: f64, seed: u64) -> Result<MeasurementSet> {
    if terminals.len() < 2 {
        return Err(invalid("all-pairs measurement needs at least 2 terminals"));
    }
    if !(noise_std >= 0.0) {
        return Err(invalid("noise_std must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| invalid(e.to_string()))?;
    let mut measurements = Vec::with_capacity(terminals.len() * (terminals.len() - 1) / 2);
    for (i, j) in terminal_pairs(terminals.len()) {
        let (tx, rx) = (terminals[i], terminals[j]);
        if tx == rx {
            continue;
        }
        let mut gain = env.channel_gain(tx, rx)?;
        if noise_std > 0.0 {
            gain += noise.sample(&mut rng);
        }
        measurements.push(Measurement { tx, rx, gain, env_id: env.id });
    }
    Ok(MeasurementSet { env_id: env.id, noise_std, measurements, terminals: terminals.to_vec() })
}

/// Uniformly random disjoint split: `context_size` measurements in random
/// order become the context and up to `max_targets` of the rest the targets.
pub fn split_episode(set: &MeasurementSet, seed: u64, context_size: usize, max_targets: Option<usize>) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_episode_with(set, &mut rng, context_size, max_targets)
}

pub fn split_episode_with<R: Rng + ?Sized>(
    set: &MeasurementSet,
    rng: &mut R,
    context_size: usize,
    max_targets: Option<usize>,
) -> Result<Episode> {
    let n = set.len();
    if context_size == 0 || context_size >= n {
        return Err(invalid(format!("context size {context_size} must lie in [1, {}) for a set of {n}", n)));
    }
    let num_targets = max_targets.map_or(n - context_size, |cap| cap.min(n - context_size));
    let perm = index::sample(rng, n, context_size + num_targets).into_vec();
    let (ctx, tgt) = perm.split_at(context_size);
    Ok(Episode { context: set.select(ctx), targets: set.select(tgt) })
}
