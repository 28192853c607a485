//! Regularized radio tomographic inversion.
//!
//! Gains are modeled as `-(a + b log10(max(d, d0))) - w^T f`, where `w` holds
//! the per-voxel chord lengths of the link and `f >= 0` is the loss field.
//! The fit minimizes
//!
//! ```text
//! (1/M) sum_m (c_m + a + b log10(d_m) + w_m^T f)^2 + lambda R(f)
//! ```
//!
//! by alternating exact least squares in `(a, b)` with monotone accelerated
//! proximal-gradient passes in `f`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::prox::{prox_l1_nonneg, prox_tikhonov_nonneg, prox_tv_nonneg, total_variation, TvDual};
use crate::dataset::MeasurementSet;
use crate::environment::{GridSpec, Region};
use crate::error::{invalid, Result};
use crate::geometry::Point3;
use crate::traversal::{segment_voxel_lengths, SegmentWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegularizerKind {
    L1,
    TotalVariation,
    Tikhonov,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 3] = [RegularizerKind::L1, RegularizerKind::TotalVariation, RegularizerKind::Tikhonov];

    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::L1 => "l1",
            RegularizerKind::TotalVariation => "tv",
            RegularizerKind::Tikhonov => "tikhonov",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(RegularizerKind::L1),
            "tv" | "total_variation" => Ok(RegularizerKind::TotalVariation),
            "tikhonov" => Ok(RegularizerKind::Tikhonov),
            other => Err(invalid(format!("unknown regularizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda: f64,
    /// Outer (a, b) / f alternations.
    pub max_iterations: usize,
    /// Proximal-gradient steps on f per outer iteration.
    pub inner_iterations: usize,
    /// Stop when the relative objective decrease falls below this.
    pub tolerance: f64,
    /// Dual iterations of the TV proximal operator.
    pub tv_iterations: usize,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, lambda: f64) -> Self {
        RegularizerSpec { kind, lambda, max_iterations: 300, inner_iterations: 5, tolerance: 1e-7, tv_iterations: 40 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.max_iterations == 0 || self.inner_iterations == 0 {
            return Err(invalid(format!("bad regularizer spec {self:?}")));
        }
        Ok(())
    }

    fn penalty(&self, grid: &GridSpec, f: &[f64]) -> f64 {
        self.lambda
            * match self.kind {
                RegularizerKind::L1 => f.iter().map(|x| x.abs()).sum(),
                RegularizerKind::TotalVariation => total_variation(grid, f),
                RegularizerKind::Tikhonov => f.iter().map(|x| x * x).sum(),
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TomographicModel {
    pub grid: GridSpec,
    pub region: Region,
    /// dB/m per voxel, nonnegative.
    pub field: Vec<f64>,
    /// dB offset of the fitted path loss.
    pub a: f64,
    /// dB per decade of distance.
    pub b: f64,
    pub d0: f64,
    /// Objective after every outer iteration, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

impl TomographicModel {
    pub fn predict(&self, tx: Point3, rx: Point3) -> Result<f64> {
        let (p, q) = match tx.lex_cmp(&rx) {
            std::cmp::Ordering::Greater => (rx, tx),
            _ => (tx, rx),
        };
        let w = segment_voxel_lengths(p, q, &self.grid, &self.region)?;
        let d = p.distance(q).max(self.d0);
        Ok(-(self.a + self.b * d.log10()) - w.dot(&self.field))
    }
}

struct Problem {
    weights: Vec<SegmentWeights>,
    log_d: Vec<f64>,
    gains: Vec<f64>,
    n: usize,
}

impl Problem {
    fn absorbed(&self, f: &[f64]) -> Vec<f64> {
        self.weights.iter().map(|w| w.dot(f)).collect()
    }

    fn residuals(&self, a: f64, b: f64, f: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(&self.log_d).zip(&self.gains).map(|((w, &u), &c)| c + a + b * u + w.dot(f)).collect()
    }

    fn data_term(&self, a: f64, b: f64, f: &[f64]) -> f64 {
        let r = self.residuals(a, b, f);
        r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64
    }

    /// `(2/M) W^T r`.
    fn gradient(&self, r: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        let s = 2.0 / r.len() as f64;
        for (w, &ri) in self.weights.iter().zip(r) {
            for &(v, len) in &w.entries {
                g[v] += s * len * ri;
            }
        }
        g
    }

    /// Largest eigenvalue of `(2/M) W^T W` by power iteration.
    fn lipschitz(&self) -> f64 {
        let mut x: Vec<f64> = (0..self.n).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..100 {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 1.0;
            }
            x.iter_mut().for_each(|v| *v /= norm);
            let wx = self.absorbed(&x);
            let y = self.gradient(&wx);
            let next = y.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            x = y;
            if (next - lambda).abs() <= 1e-9 * next.abs() {
                lambda = next;
                break;
            }
            lambda = next;
        }
        // Small safety margin keeps 1/L a guaranteed descent step.
        lambda.max(1e-12) * 1.01
    }

    /// Least squares for `(a, b)` with `f` fixed; falls back to `b = 0` when
    /// every link has the same length.
    fn fit_path_loss(&self, f: &[f64]) -> (f64, f64) {
        let absorbed = self.absorbed(f);
        let targets: Vec<f64> = self.gains.iter().zip(&absorbed).map(|(c, s)| -c - s).collect();
        let m = targets.len() as f64;
        let mu = self.log_d.iter().sum::<f64>() / m;
        let mt = targets.iter().sum::<f64>() / m;
        let suu: f64 = self.log_d.iter().map(|u| (u - mu) * (u - mu)).sum();
        let sut: f64 = self.log_d.iter().zip(&targets).map(|(u, t)| (u - mu) * (t - mt)).sum();
        if suu <= 1e-12 * m * (1.0 + mu * mu) {
            log::warn!("all link distances equal; fitting path-loss slope b = 0");
            return (mt, 0.0);
        }
        let b = sut / suu;
        (mt - b * mu, b)
    }
}

/// Fits the tomographic model to `context`.
pub fn tomographic_fit(
    context: &MeasurementSet,
    grid: &GridSpec,
    region: &Region,
    d0: f64,
    reg: &RegularizerSpec,
) -> Result<TomographicModel> {
    reg.validate()?;
    if context.len() < 3 {
        return Err(invalid(format!("tomographic fit needs at least 3 measurements, got {}", context.len())));
    }
    let mut weights = Vec::with_capacity(context.len());
    let mut log_d = Vec::with_capacity(context.len());
    for m in &context.measurements {
        let (p, q) = match m.tx.lex_cmp(&m.rx) {
            std::cmp::Ordering::Greater => (m.rx, m.tx),
            _ => (m.tx, m.rx),
        };
        weights.push(segment_voxel_lengths(p, q, grid, region)?);
        log_d.push(p.distance(q).max(d0).log10());
    }
    let problem = Problem { weights, log_d, gains: context.gains(), n: grid.num_voxels() };
    let step = 1.0 / problem.lipschitz();

    let objective = |a: f64, b: f64, f: &[f64]| problem.data_term(a, b, f) + reg.penalty(grid, f);
    let mut dual = TvDual::new(problem.n);
    let prox = |v: &[f64], dual: &mut TvDual| -> Vec<f64> {
        let tau = step * reg.lambda;
        match reg.kind {
            RegularizerKind::L1 => prox_l1_nonneg(v, tau),
            RegularizerKind::Tikhonov => prox_tikhonov_nonneg(v, tau),
            RegularizerKind::TotalVariation => prox_tv_nonneg(grid, v, tau, reg.tv_iterations, dual),
        }
    };

    let mut f = vec![0.0; problem.n];
    let (mut a, mut b) = problem.fit_path_loss(&f);
    let mut current = objective(a, b, &f);
    let mut trace = vec![current];
    for _ in 0..reg.max_iterations {
        let before = current;
        (a, b) = problem.fit_path_loss(&f);
        current = objective(a, b, &f);

        // Monotone FISTA on f with (a, b) held fixed.
        let mut y = f.clone();
        let mut t = 1.0f64;
        for _ in 0..reg.inner_iterations {
            let r = problem.residuals(a, b, &y);
            let g = problem.gradient(&r);
            let v: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
            let z = prox(&v, &mut dual);
            let fz = objective(a, b, &z);
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let previous = f.clone();
            if fz <= current {
                f = z.clone();
                current = fz;
            }
            for i in 0..problem.n {
                y[i] = f[i] + (t / t_next) * (z[i] - f[i]) + ((t - 1.0) / t_next) * (f[i] - previous[i]);
            }
            t = t_next;
        }
        trace.push(current);
        if (before - current).abs() <= reg.tolerance * before.abs().max(1.0) {
            break;
        }
    }
    Ok(TomographicModel { grid: *grid, region: *region, field: f, a, b, d0, objective_trace: trace })
}

/// Chooses `lambda` from `candidates` by validation MAE on a held-out slice
/// of the context, then refits on the whole context.
pub fn select_lambda(
    context: &MeasurementSet,
    grid: &GridSpec,
    region: &Region,
    d0: f64,
    base: &RegularizerSpec,
    candidates: &[f64],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(f64, TomographicModel)> {
    if candidates.is_empty() {
        return Err(invalid("no lambda candidates"));
    }
    let n = context.len();
    let holdout = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n.saturating_sub(3).max(1));
    let best = if candidates.len() == 1 || n < 4 + holdout {
        candidates[0]
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val_idx, fit_idx) = idx.split_at(holdout);
        let fit_set = context.select(fit_idx);
        let val_set = context.select(val_idx);
        let mut best = (f64::INFINITY, candidates[0]);
        for &lambda in candidates {
            let model = tomographic_fit(&fit_set, grid, region, d0, &RegularizerSpec { lambda, ..*base })?;
            let mut err = 0.0;
            for m in &val_set.measurements {
                err += (model.predict(m.tx, m.rx)? - m.gain).abs();
            }
            if err < best.0 {
                best = (err, lambda);
            }
        }
        best.1
    };
    let model = tomographic_fit(context, grid, region, d0, &RegularizerSpec { lambda: best, ..*base })?;
    log::info!("{} regularizer: selected lambda = {best}", base.kind.name());
    Ok((best, model))
}

/// Default 5-point lambda grid.
pub fn default_lambda_grid(kind: RegularizerKind) -> Vec<f64> {
    match kind {
        RegularizerKind::L1 | RegularizerKind::TotalVariation => vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
        RegularizerKind::Tikhonov => vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_all_pairs, place_terminals};
    use crate::environment::{sample_environment, EnvironmentConfig};

    #[test]
    fn needs_three_measurements() {
        let env = sample_environment(0, &EnvironmentConfig::default()).unwrap();
        let t = place_terminals(1, &env.region, 2).unwrap();
        let set = build_all_pairs(&env, &t, 0.0, 0).unwrap();
        let r = tomographic_fit(&set, env.grid(), &env.region, 1.0, &RegularizerSpec::new(RegularizerKind::L1, 1.0));
        assert!(r.is_err());
    }

    #[test]
    fn equal_distances_fall_back_to_flat_slope() {
        let env = sample_environment(0, &EnvironmentConfig { max_buildings: 0, ..Default::default() }).unwrap();
        let c = Point3::new(175.0, 175.0, 10.0);
        let ms: Vec<_> = (0..6)
            .map(|k| {
                let ang = k as f64;
                let p = Point3::new(175.0 + 50.0 * ang.cos(), 175.0 + 50.0 * ang.sin(), 10.0);
                crate::dataset::Measurement { tx: c, rx: p, gain: env.channel_gain(c, p).unwrap(), env_id: 0 }
            })
            .collect();
        let set = MeasurementSet::new(0, ms);
        let model = tomographic_fit(&set, env.grid(), &env.region, 1.0, &RegularizerSpec::new(RegularizerKind::L1, 1.0)).unwrap();
        assert_eq!(model.b, 0.0);
    }

    #[test]
    fn prediction_is_symmetric() {
        let env = sample_environment(4, &EnvironmentConfig::default()).unwrap();
        let model = TomographicModel {
            grid: *env.grid(),
            region: env.region,
            field: env.loss_field.values.clone(),
            a: 40.05,
            b: 20.0,
            d0: 1.0,
            objective_trace: vec![],
        };
        let p = Point3::new(10.0, 300.0, 3.0);
        let q = Point3::new(250.0, 20.0, 17.0);
        assert_eq!(model.predict(p, q).unwrap(), model.predict(q, p).unwrap());
        assert_eq!(model.predict(p, q).unwrap(), env.channel_gain(p, q).unwrap());
    }
}
