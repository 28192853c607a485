//! Estimator comparison: gain MAE, capacity-matrix NMAE, cluster-head
//! selection quality, and the sweeps built on them.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{default_lambda_grid, knn_estimate, select_lambda, RegularizerKind, RegularizerSpec, TomographicModel};
use crate::dataset::{build_all_pairs, place_terminals, split_episode, terminal_pairs, Measurement, MeasurementSet};
use crate::environment::{capacity_from_gain, sample_environment, Environment, EnvironmentConfig, LinkParams};
use crate::error::{invalid, Result};
use crate::geometry::Point3;
use crate::model::{estimate_pair, ModelParams};

/// An estimator conditioned on one context set.
pub trait Conditioned {
    fn estimate(&self, tx: Point3, rx: Point3) -> Result<f64>;
}

/// A gain estimator that can be conditioned on measurements of an environment.
pub trait Estimator: Sync {
    fn name(&self) -> String;
    fn condition<'a>(&'a self, env: &'a Environment, context: &'a MeasurementSet) -> Result<Box<dyn Conditioned + 'a>>;
}

pub struct CreteEstimator {
    pub params: ModelParams,
    pub label: String,
}

impl CreteEstimator {
    pub fn new(params: ModelParams) -> Self {
        CreteEstimator { params, label: "crete".into() }
    }
}

struct CreteConditioned<'a> {
    params: &'a ModelParams,
    context: &'a MeasurementSet,
}

impl Conditioned for CreteConditioned<'_> {
    fn estimate(&self, tx: Point3, rx: Point3) -> Result<f64> {
        estimate_pair(self.params, tx, rx, self.context)
    }
}

impl Estimator for CreteEstimator {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn condition<'a>(&'a self, _env: &'a Environment, context: &'a MeasurementSet) -> Result<Box<dyn Conditioned + 'a>> {
        if context.is_empty() {
            return Err(invalid("CRETE needs a nonempty context"));
        }
        Ok(Box::new(CreteConditioned { params: &self.params, context }))
    }
}

pub struct KnnEstimator {
    pub k: usize,
}

struct KnnConditioned<'a> {
    k: usize,
    context: &'a MeasurementSet,
}

impl Conditioned for KnnConditioned<'_> {
    fn estimate(&self, tx: Point3, rx: Point3) -> Result<f64> {
        knn_estimate((tx, rx), self.context, self.k.min(self.context.len()))
    }
}

impl Estimator for KnnEstimator {
    fn name(&self) -> String {
        "knn".into()
    }

    fn condition<'a>(&'a self, _env: &'a Environment, context: &'a MeasurementSet) -> Result<Box<dyn Conditioned + 'a>> {
        if context.is_empty() || self.k == 0 {
            return Err(invalid("KNN needs k >= 1 and a nonempty context"));
        }
        Ok(Box::new(KnnConditioned { k: self.k, context }))
    }
}

/// Tomographic inversion with lambda chosen per context from `lambdas`.
pub struct TomographicEstimator {
    pub spec: RegularizerSpec,
    pub lambdas: Vec<f64>,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl TomographicEstimator {
    pub fn new(kind: RegularizerKind) -> Self {
        TomographicEstimator { spec: RegularizerSpec::new(kind, 1.0), lambdas: default_lambda_grid(kind), holdout_fraction: 0.2, seed: 0 }
    }
}

impl Conditioned for TomographicModel {
    fn estimate(&self, tx: Point3, rx: Point3) -> Result<f64> {
        self.predict(tx, rx)
    }
}

impl Estimator for TomographicEstimator {
    fn name(&self) -> String {
        format!("tomo_{}", self.spec.kind.name())
    }

    fn condition<'a>(&'a self, env: &'a Environment, context: &'a MeasurementSet) -> Result<Box<dyn Conditioned + 'a>> {
        let (_, model) =
            select_lambda(context, env.grid(), &env.region, env.path_loss.d0, &self.spec, &self.lambdas, self.holdout_fraction, self.seed)?;
        Ok(Box::new(model))
    }
}

/// Ground truth; used to validate the metrics.
pub struct OracleEstimator;

struct OracleConditioned<'a>(&'a Environment);

impl Conditioned for OracleConditioned<'_> {
    fn estimate(&self, tx: Point3, rx: Point3) -> Result<f64> {
        self.0.channel_gain(tx, rx)
    }
}

impl Estimator for OracleEstimator {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn condition<'a>(&'a self, env: &'a Environment, _context: &'a MeasurementSet) -> Result<Box<dyn Conditioned + 'a>> {
        Ok(Box::new(OracleConditioned(env)))
    }
}

/// Location pairs drawn uniformly from the region volume, at least `d0` apart.
pub fn eval_pairs(env: &Environment, count: usize, seed: u64) -> Vec<(Point3, Point3)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = env.region.sample_point(&mut rng);
        let b = env.region.sample_point(&mut rng);
        if a.distance(b) >= env.path_loss.d0 {
            out.push((a, b));
        }
    }
    out
}

/// Mean absolute gain error over `num_eval_pairs` seeded random pairs.
pub fn mae(est: &dyn Estimator, env: &Environment, context: &MeasurementSet, num_eval_pairs: usize, seed: u64) -> Result<f64> {
    if num_eval_pairs == 0 {
        return Err(invalid("num_eval_pairs must be positive"));
    }
    let conditioned = est.condition(env, context)?;
    let mut total = 0.0;
    for (a, b) in eval_pairs(env, num_eval_pairs, seed) {
        total += (env.channel_gain(a, b)? - conditioned.estimate(a, b)?).abs();
    }
    Ok(total / num_eval_pairs as f64)
}

/// True and estimated capacity matrices over a terminal set, with a random
/// subset of pairs measured.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityMatrices {
    pub truth: Vec<Vec<f64>>,
    pub estimate: Vec<Vec<f64>>,
    pub measured: Vec<Vec<bool>>,
}

impl CapacityMatrices {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

pub fn capacity_matrices(
    est: &dyn Estimator,
    env: &Environment,
    terminals: &[Point3],
    measured_fraction: f64,
    noise_std: f64,
    link: &LinkParams,
    seed: u64,
) -> Result<CapacityMatrices> {
    if !(0.0..=1.0).contains(&measured_fraction) {
        return Err(invalid(format!("measured fraction {measured_fraction} outside [0, 1]")));
    }
    let all = build_all_pairs(env, terminals, noise_std, seed)?;
    let pairs: Vec<(usize, usize)> = terminal_pairs(terminals.len()).collect();
    if all.len() != pairs.len() {
        return Err(invalid("coincident terminals"));
    }
    let count = ((pairs.len() as f64) * measured_fraction).round() as usize;
    let count = count.max(1).min(pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let mut chosen = sample(&mut rng, pairs.len(), count).into_vec();
    chosen.sort_unstable();
    let context = all.select(&chosen);

    let n = terminals.len();
    let mut truth = vec![vec![0.0; n]; n];
    let mut estimate = vec![vec![0.0; n]; n];
    let mut measured = vec![vec![false; n]; n];
    for &k in &chosen {
        let (i, j) = pairs[k];
        measured[i][j] = true;
        measured[j][i] = true;
    }
    let conditioned = est.condition(env, &context)?;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let true_gain = env.channel_gain(terminals[i], terminals[j])?;
        let c = capacity_from_gain(true_gain, link);
        truth[i][j] = c;
        truth[j][i] = c;
        let g = if measured[i][j] { all.measurements[k].gain } else { conditioned.estimate(terminals[i], terminals[j])? };
        let e = capacity_from_gain(g, link);
        estimate[i][j] = e;
        estimate[j][i] = e;
    }
    Ok(CapacityMatrices { truth, estimate, measured })
}

/// Normalized MAE over unmeasured pairs; zero when every pair is measured.
pub fn nmae_from_matrices(m: &CapacityMatrices) -> f64 {
    let (mut err, mut mass) = (0.0, 0.0);
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            if !m.measured[i][j] {
                err += (m.estimate[i][j] - m.truth[i][j]).abs();
                mass += m.truth[i][j];
            }
        }
    }
    if err == 0.0 {
        0.0
    } else {
        err / mass
    }
}

#[allow(clippy::too_many_arguments)]
pub fn capacity_matrix_nmae(
    est: &dyn Estimator,
    env: &Environment,
    terminals: &[Point3],
    measured_fraction: f64,
    noise_std: f64,
    link: &LinkParams,
    seed: u64,
) -> Result<f64> {
    Ok(nmae_from_matrices(&capacity_matrices(est, env, terminals, measured_fraction, noise_std, link, seed)?))
}

fn neighbor_counts(matrix: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    (0..matrix.len()).map(|i| (0..matrix.len()).filter(|&j| j != i && matrix[i][j] >= threshold).count()).collect()
}

/// True neighbor count of the head chosen from `estimate`, and the best
/// achievable true neighbor count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterHeadCounts {
    pub head: usize,
    pub chosen: usize,
    pub best: usize,
}

pub fn cluster_head_counts(truth: &[Vec<f64>], estimate: &[Vec<f64>], threshold: f64) -> Result<ClusterHeadCounts> {
    if truth.is_empty() || truth.len() != estimate.len() {
        return Err(invalid("capacity matrices must be nonempty and equally sized"));
    }
    let est_counts = neighbor_counts(estimate, threshold);
    let true_counts = neighbor_counts(truth, threshold);
    let mut head = 0;
    for (i, &c) in est_counts.iter().enumerate() {
        if c > est_counts[head] {
            head = i;
        }
    }
    Ok(ClusterHeadCounts { head, chosen: true_counts[head], best: *true_counts.iter().max().unwrap() })
}

/// Mean chosen count over mean best count; `0 / 0` is 1.
pub fn cluster_head_quality(counts: &[ClusterHeadCounts]) -> f64 {
    let chosen: usize = counts.iter().map(|c| c.chosen).sum();
    let best: usize = counts.iter().map(|c| c.best).sum();
    if best == 0 {
        1.0
    } else {
        chosen as f64 / best as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentId {
    MaeVsM,
    NmaeVsN,
    ClusterHeadVsThreshold,
    MaeVsBuildings,
}

impl ExperimentId {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::MaeVsM => "mae_vs_m",
            ExperimentId::NmaeVsN => "nmae_vs_n",
            ExperimentId::ClusterHeadVsThreshold => "cluster_head_vs_threshold",
            ExperimentId::MaeVsBuildings => "mae_vs_buildings",
        }
    }

    pub fn variable(self) -> &'static str {
        match self {
            ExperimentId::MaeVsM => "context_size",
            ExperimentId::NmaeVsN => "num_terminals",
            ExperimentId::ClusterHeadVsThreshold => "capacity_threshold",
            ExperimentId::MaeVsBuildings => "max_buildings",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [ExperimentId::MaeVsM, ExperimentId::NmaeVsN, ExperimentId::ClusterHeadVsThreshold, ExperimentId::MaeVsBuildings]
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| invalid(format!("unknown experiment `{s}`")))
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            ExperimentId::MaeVsM => vec![25.0, 50.0, 100.0, 200.0, 400.0],
            ExperimentId::NmaeVsN => vec![10.0, 20.0, 30.0, 40.0, 50.0],
            ExperimentId::ClusterHeadVsThreshold => vec![5e7, 1e8, 1.5e8, 2e8, 2.5e8],
            ExperimentId::MaeVsBuildings => vec![0.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub id: ExperimentId,
    pub values: Vec<f64>,
    pub num_test_envs: usize,
    /// Test environment `i` uses seed `env_seed + i`.
    pub env_seed: u64,
    pub seed: u64,
    pub environment: EnvironmentConfig,
    pub num_terminals: usize,
    pub noise_std: f64,
    /// Context size of the experiments that do not sweep it.
    pub context_size: usize,
    pub num_eval_pairs: usize,
    pub measured_fraction: f64,
    pub link: LinkParams,
}

impl ExperimentConfig {
    pub fn new(id: ExperimentId) -> Self {
        ExperimentConfig {
            id,
            values: id.default_values(),
            num_test_envs: 17,
            env_seed: 1_000_000,
            seed: 0,
            environment: EnvironmentConfig::default(),
            num_terminals: 50,
            noise_std: 0.0,
            context_size: 100,
            num_eval_pairs: 30,
            measured_fraction: 0.5,
            link: LinkParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub id: ExperimentId,
    pub values: Vec<f64>,
    pub estimators: Vec<String>,
    /// `[estimator][value]` aggregated metric.
    pub metric: Vec<Vec<f64>>,
    /// `[estimator][value]` standard deviation across environments.
    pub std: Vec<Vec<f64>>,
    /// `[estimator][value][environment]` per-environment metric.
    pub per_env: Vec<Vec<Vec<f64>>>,
    pub env_seeds: Vec<u64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(29) ^ (h >> 17);
    }
    h
}

fn count_of(v: f64, what: &str) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(invalid(format!("{what} must be a nonnegative integer, got {v}")));
    }
    Ok(v as usize)
}

struct EnvOutcome {
    /// `[estimator][value]`.
    metric: Vec<Vec<f64>>,
    heads: Vec<Vec<ClusterHeadCounts>>,
}

fn run_environment(cfg: &ExperimentConfig, estimators: &[&dyn Estimator], env_index: usize) -> Result<EnvOutcome> {
    let env_seed = cfg.env_seed + env_index as u64;
    let seed = |tag: u64, v: usize| derive_seed(cfg.seed, env_seed.wrapping_mul(31).wrapping_add(tag), v as u64);
    let mut metric = vec![Vec::with_capacity(cfg.values.len()); estimators.len()];
    let mut heads = vec![Vec::with_capacity(cfg.values.len()); estimators.len()];

    let fixed_env = if cfg.id == ExperimentId::MaeVsBuildings { None } else { Some(sample_environment(env_seed, &cfg.environment)?) };
    let fixed_set = match (&fixed_env, cfg.id) {
        (Some(env), ExperimentId::MaeVsM) => {
            let t = place_terminals(seed(1, 0), &env.region, cfg.num_terminals)?;
            Some(build_all_pairs(env, &t, cfg.noise_std, seed(2, 0))?)
        }
        _ => None,
    };

    for (vi, &v) in cfg.values.iter().enumerate() {
        match cfg.id {
            ExperimentId::MaeVsM => {
                let (env, set) = (fixed_env.as_ref().unwrap(), fixed_set.as_ref().unwrap());
                let m = count_of(v, "context size")?.clamp(1, set.len() - 1);
                let context = split_episode(set, seed(3, 0), m, Some(1))?.context;
                for (e, est) in estimators.iter().enumerate() {
                    metric[e].push(mae(*est, env, &context, cfg.num_eval_pairs, seed(4, 0))?);
                }
            }
            ExperimentId::MaeVsBuildings => {
                let env_cfg = EnvironmentConfig { max_buildings: count_of(v, "max buildings")?, ..cfg.environment };
                let env = sample_environment(env_seed, &env_cfg)?;
                let t = place_terminals(seed(1, 0), &env.region, cfg.num_terminals)?;
                let set = build_all_pairs(&env, &t, cfg.noise_std, seed(2, 0))?;
                let m = cfg.context_size.clamp(1, set.len() - 1);
                let context = split_episode(&set, seed(3, 0), m, Some(1))?.context;
                for (e, est) in estimators.iter().enumerate() {
                    metric[e].push(mae(*est, &env, &context, cfg.num_eval_pairs, seed(4, 0))?);
                }
            }
            ExperimentId::NmaeVsN => {
                let env = fixed_env.as_ref().unwrap();
                let n = count_of(v, "terminal count")?;
                let t = place_terminals(seed(1, vi), &env.region, n)?;
                for (e, est) in estimators.iter().enumerate() {
                    metric[e].push(capacity_matrix_nmae(*est, env, &t, cfg.measured_fraction, cfg.noise_std, &cfg.link, seed(5, vi))?);
                }
            }
            ExperimentId::ClusterHeadVsThreshold => {
                let env = fixed_env.as_ref().unwrap();
                let t = place_terminals(seed(1, 0), &env.region, cfg.num_terminals)?;
                for (e, est) in estimators.iter().enumerate() {
                    let m = capacity_matrices(*est, env, &t, cfg.measured_fraction, cfg.noise_std, &cfg.link, seed(5, 0))?;
                    let c = cluster_head_counts(&m.truth, &m.estimate, v)?;
                    metric[e].push(if c.best == 0 { 1.0 } else { c.chosen as f64 / c.best as f64 });
                    heads[e].push(c);
                }
            }
        }
    }
    Ok(EnvOutcome { metric, heads })
}

/// Runs a sweep; environments are evaluated in parallel and aggregated in
/// index order.
pub fn run_experiment(cfg: &ExperimentConfig, estimators: &[&dyn Estimator]) -> Result<ExperimentResult> {
    if cfg.values.is_empty() || cfg.num_test_envs == 0 || estimators.is_empty() {
        return Err(invalid("experiment needs values, test environments and estimators"));
    }
    let outcomes: Vec<Result<EnvOutcome>> = (0..cfg.num_test_envs).into_par_iter().map(|i| run_environment(cfg, estimators, i)).collect();
    let outcomes: Vec<EnvOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

    let (ne, nv) = (estimators.len(), cfg.values.len());
    let mut per_env = vec![vec![Vec::with_capacity(outcomes.len()); nv]; ne];
    for o in &outcomes {
        for e in 0..ne {
            for v in 0..nv {
                per_env[e][v].push(o.metric[e][v]);
            }
        }
    }
    let mut metric = vec![vec![0.0; nv]; ne];
    let mut std = vec![vec![0.0; nv]; ne];
    for e in 0..ne {
        for v in 0..nv {
            let (m, s) = mean_std(&per_env[e][v]);
            metric[e][v] = if cfg.id == ExperimentId::ClusterHeadVsThreshold {
                let counts: Vec<_> = outcomes.iter().map(|o| o.heads[e][v]).collect();
                cluster_head_quality(&counts)
            } else {
                m
            };
            std[e][v] = s;
        }
    }
    Ok(ExperimentResult {
        id: cfg.id,
        values: cfg.values.clone(),
        estimators: estimators.iter().map(|e| e.name()).collect(),
        metric,
        std,
        per_env,
        env_seeds: (0..cfg.num_test_envs as u64).map(|i| cfg.env_seed + i).collect(),
    })
}

impl ExperimentResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(self.id.variable());
        for name in &self.estimators {
            write!(out, ",{name}").unwrap();
        }
        for name in &self.estimators {
            write!(out, ",{name}_std").unwrap();
        }
        out.push('\n');
        for (v, value) in self.values.iter().enumerate() {
            write!(out, "{value}").unwrap();
            for m in &self.metric {
                write!(out, ",{}", m[v]).unwrap();
            }
            for s in &self.std {
                write!(out, ",{}", s[v]).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn file_name(&self, timestamp: &str) -> String {
        format!("exp_{}_{}.csv", self.id.name(), timestamp)
    }
}

/// Measurement set from explicit pairs, for hand-built tests.
pub fn measurement_set_from(env: &Environment, pairs: &[(Point3, Point3)]) -> Result<MeasurementSet> {
    let ms = pairs
        .iter()
        .map(|&(tx, rx)| Ok(Measurement { tx, rx, gain: env.channel_gain(tx, rx)?, env_id: env.id }))
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementSet::new(env.id, ms))
}

/// Uniformly random pair inside the region, used by examples and tests.
pub fn random_pair<R: Rng + ?Sized>(env: &Environment, rng: &mut R) -> (Point3, Point3) {
    (env.region.sample_point(rng), env.region.sample_point(rng))
}
