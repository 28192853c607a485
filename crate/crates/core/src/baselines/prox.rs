//! Proximal operators of the regularizers, each combined with the
//! nonnegativity constraint on the loss field.

use crate::environment::GridSpec;

/// `argmin_f 1/2 |f - v|^2 + tau |f|_1`, `f >= 0`.
pub fn prox_l1_nonneg(v: &[f64], tau: f64) -> Vec<f64> {
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// `argmin_f 1/2 |f - v|^2 + tau |f|^2`, `f >= 0`.
pub fn prox_tikhonov_nonneg(v: &[f64], tau: f64) -> Vec<f64> {
    let s = 1.0 / (1.0 + 2.0 * tau);
    v.iter().map(|&x| (x * s).max(0.0)).collect()
}

/// Anisotropic total variation over the horizontal plane of every z layer:
/// the sum of absolute differences between x- and y-neighbors.
pub fn total_variation(grid: &GridSpec, f: &[f64]) -> f64 {
    let mut tv = 0.0;
    for iz in 0..grid.nz {
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let i = grid.flat_index(ix, iy, iz);
                if ix + 1 < grid.nx {
                    tv += (f[grid.flat_index(ix + 1, iy, iz)] - f[i]).abs();
                }
                if iy + 1 < grid.ny {
                    tv += (f[grid.flat_index(ix, iy + 1, iz)] - f[i]).abs();
                }
            }
        }
    }
    tv
}

/// Horizontal forward differences; the last column/row difference is zero.
fn gradient(grid: &GridSpec, f: &[f64], dx: &mut [f64], dy: &mut [f64]) {
    for iz in 0..grid.nz {
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let i = grid.flat_index(ix, iy, iz);
                dx[i] = if ix + 1 < grid.nx { f[grid.flat_index(ix + 1, iy, iz)] - f[i] } else { 0.0 };
                dy[i] = if iy + 1 < grid.ny { f[grid.flat_index(ix, iy + 1, iz)] - f[i] } else { 0.0 };
            }
        }
    }
}

/// Adjoint of [`gradient`].
fn gradient_adjoint(grid: &GridSpec, px: &[f64], py: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for iz in 0..grid.nz {
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let i = grid.flat_index(ix, iy, iz);
                if ix + 1 < grid.nx {
                    out[grid.flat_index(ix + 1, iy, iz)] += px[i];
                    out[i] -= px[i];
                }
                if iy + 1 < grid.ny {
                    out[grid.flat_index(ix, iy + 1, iz)] += py[i];
                    out[i] -= py[i];
                }
            }
        }
    }
}

/// Dual variables of the TV prox, kept between calls for warm starts.
#[derive(Debug, Clone)]
pub struct TvDual {
    px: Vec<f64>,
    py: Vec<f64>,
}

impl TvDual {
    pub fn new(n: usize) -> Self {
        TvDual { px: vec![0.0; n], py: vec![0.0; n] }
    }
}

/// `argmin_f 1/2 |f - v|^2 + tau TV(f)`, `f >= 0`, by accelerated projected
/// gradient on the dual (dual variables clipped to `[-1, 1]`).
pub fn prox_tv_nonneg(grid: &GridSpec, v: &[f64], tau: f64, iterations: usize, dual: &mut TvDual) -> Vec<f64> {
    let n = v.len();
    if tau <= 0.0 {
        return v.iter().map(|x| x.max(0.0)).collect();
    }
    let primal = |px: &[f64], py: &[f64], adj: &mut Vec<f64>| -> Vec<f64> {
        gradient_adjoint(grid, px, py, adj);
        v.iter().zip(adj.iter()).map(|(&vi, &a)| (vi - tau * a).max(0.0)).collect()
    };
    let step = 1.0 / (8.0 * tau);
    let mut adj = vec![0.0; n];
    let (mut dx, mut dy) = (vec![0.0; n], vec![0.0; n]);
    let (mut rx, mut ry) = (dual.px.clone(), dual.py.clone());
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let f = primal(&rx, &ry, &mut adj);
        gradient(grid, &f, &mut dx, &mut dy);
        let new_px: Vec<f64> = rx.iter().zip(&dx).map(|(&p, &d)| (p + step * d).clamp(-1.0, 1.0)).collect();
        let new_py: Vec<f64> = ry.iter().zip(&dy).map(|(&p, &d)| (p + step * d).clamp(-1.0, 1.0)).collect();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        for i in 0..n {
            rx[i] = new_px[i] + beta * (new_px[i] - dual.px[i]);
            ry[i] = new_py[i] + beta * (new_py[i] - dual.py[i]);
        }
        dual.px = new_px;
        dual.py = new_py;
        t = t_next;
    }
    primal(&dual.px, &dual.py, &mut adj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_and_projection() {
        assert_eq!(prox_l1_nonneg(&[3.0, 0.5, -2.0], 1.0), vec![2.0, 0.0, 0.0]);
        assert_eq!(prox_tikhonov_nonneg(&[3.0, -1.0], 1.0), vec![1.0, 0.0]);
    }

    #[test]
    fn tv_adjoint_identity() {
        let g = GridSpec::new(5, 4, 2).unwrap();
        let n = g.num_voxels();
        let f: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let px: Vec<f64> = (0..n).map(|i| ((i * 31) % 5) as f64 - 2.0).collect();
        let py: Vec<f64> = (0..n).map(|i| ((i * 17) % 7) as f64 - 3.0).collect();
        let (mut dx, mut dy) = (vec![0.0; n], vec![0.0; n]);
        gradient(&g, &f, &mut dx, &mut dy);
        let lhs: f64 = dx.iter().zip(&px).map(|(a, b)| a * b).sum::<f64>() + dy.iter().zip(&py).map(|(a, b)| a * b).sum::<f64>();
        let mut adj = vec![0.0; n];
        gradient_adjoint(&g, &px, &py, &mut adj);
        let rhs: f64 = f.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn tv_prox_flattens_and_keeps_constants() {
        let g = GridSpec::new(6, 6, 1).unwrap();
        let constant = vec![2.0; 36];
        let out = prox_tv_nonneg(&g, &constant, 0.5, 100, &mut TvDual::new(36));
        assert!(out.iter().all(|x| (x - 2.0).abs() < 1e-9));

        let noisy: Vec<f64> = (0..36).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let out = prox_tv_nonneg(&g, &noisy, 0.3, 300, &mut TvDual::new(36));
        assert!(total_variation(&g, &out) < total_variation(&g, &noisy));
        assert!(out.iter().all(|&x| x >= 0.0));
    }
}
