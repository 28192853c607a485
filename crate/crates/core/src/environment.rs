//! Randomized propagation environments and the tomographic forward model.
//!
//! A channel gain is a log-distance path-loss term minus the line integral of
//! a voxelized spatial loss field along the transmitter/receiver segment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::Point3;
use crate::traversal::segment_voxel_lengths;

/// Axis-aligned box `[0, x_extent] x [0, y_extent] x [0, z_extent]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub x_extent: f64,
    pub y_extent: f64,
    pub z_extent: f64,
}

impl Region {
    pub fn new(x_extent: f64, y_extent: f64, z_extent: f64) -> Result<Self> {
        let r = Region { x_extent, y_extent, z_extent };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_extent, self.y_extent, self.z_extent].iter().all(|e| e.is_finite() && *e > 0.0);
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("region extents must be positive, got {self:?}")))
        }
    }

    pub fn contains(&self, p: Point3) -> bool {
        (0.0..=self.x_extent).contains(&p.x) && (0.0..=self.y_extent).contains(&p.y) && (0.0..=self.z_extent).contains(&p.z)
    }

    pub fn center(&self) -> Point3 {
        Point3::new(self.x_extent / 2.0, self.y_extent / 2.0, self.z_extent / 2.0)
    }

    /// Uniform draw over the region volume.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point3 {
        Point3::new(rng.gen::<f64>() * self.x_extent, rng.gen::<f64>() * self.y_extent, rng.gen::<f64>() * self.z_extent)
    }
}

impl Default for Region {
    fn default() -> Self {
        Region { x_extent: 350.0, y_extent: 350.0, z_extent: 20.0 }
    }
}

/// Voxel counts per axis. Flat voxel index is `(iz * ny + iy) * nx + ix`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(invalid("grid voxel counts must be at least 1"));
        }
        Ok(GridSpec { nx, ny, nz })
    }

    pub fn num_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn voxel_size(&self, region: &Region) -> [f64; 3] {
        [region.x_extent / self.nx as f64, region.y_extent / self.ny as f64, region.z_extent / self.nz as f64]
    }

    #[inline]
    pub fn flat_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.ny + iy) * self.nx + ix
    }

    /// Center of voxel `(ix, iy, iz)` in meters.
    pub fn voxel_center(&self, region: &Region, ix: usize, iy: usize, iz: usize) -> Point3 {
        let s = self.voxel_size(region);
        Point3::new((ix as f64 + 0.5) * s[0], (iy as f64 + 0.5) * s[1], (iz as f64 + 0.5) * s[2])
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { nx: 32, ny: 32, nz: 1 }
    }
}

/// A building with an axis-aligned rectangular footprint spanning the full
/// region height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub depth: f64,
    /// dB/m
    pub loss_density: f64,
}

impl Building {
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        (x - self.center_x).abs() <= self.width / 2.0 && (y - self.center_y).abs() <= self.depth / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossField {
    pub grid: GridSpec,
    /// dB/m per voxel, flat-indexed per [`GridSpec::flat_index`].
    pub values: Vec<f64>,
}

impl LossField {
    pub fn zeros(grid: GridSpec) -> Self {
        LossField { grid, values: vec![0.0; grid.num_voxels()] }
    }

    /// Voxel value is the largest density among buildings whose footprint
    /// contains the voxel center, 0 elsewhere.
    pub fn rasterize(grid: GridSpec, region: &Region, buildings: &[Building]) -> Self {
        let mut field = LossField::zeros(grid);
        for iz in 0..grid.nz {
            for iy in 0..grid.ny {
                for ix in 0..grid.nx {
                    let c = grid.voxel_center(region, ix, iy, iz);
                    let v = buildings.iter().filter(|b| b.contains_xy(c.x, c.y)).map(|b| b.loss_density).fold(0.0, f64::max);
                    field.values[grid.flat_index(ix, iy, iz)] = v;
                }
            }
        }
        field
    }
}

/// Log-distance path loss `l0 + 10 gamma log10(max(d, d0) / d0)` in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossParams {
    pub l0: f64,
    pub gamma: f64,
    pub d0: f64,
}

impl PathLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d0 > 0.0) || !(self.gamma >= 0.0) || !self.l0.is_finite() {
            return Err(invalid(format!("bad path-loss parameters {self:?}")));
        }
        Ok(())
    }

    pub fn loss_db(&self, distance: f64) -> f64 {
        self.l0 + 10.0 * self.gamma * (distance.max(self.d0) / self.d0).log10()
    }
}

impl Default for PathLossParams {
    /// Free-space loss at 1 m for 2.4 GHz, exponent 2.
    fn default() -> Self {
        PathLossParams { l0: 40.05, gamma: 2.0, d0: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub id: u64,
    pub region: Region,
    pub buildings: Vec<Building>,
    pub loss_field: LossField,
    pub path_loss: PathLossParams,
}

impl Environment {
    /// Builds an environment whose loss field is the rasterization of `buildings`.
    pub fn new(id: u64, region: Region, grid: GridSpec, buildings: Vec<Building>, path_loss: PathLossParams) -> Result<Self> {
        region.validate()?;
        path_loss.validate()?;
        if let Some(b) = buildings.iter().find(|b| !(b.loss_density >= 0.0)) {
            return Err(invalid(format!("negative loss density {}", b.loss_density)));
        }
        let loss_field = LossField::rasterize(grid, &region, &buildings);
        Ok(Environment { id, region, buildings, loss_field, path_loss })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.loss_field.grid
    }

    pub fn rasterize(&self) -> LossField {
        LossField::rasterize(self.loss_field.grid, &self.region, &self.buildings)
    }

    /// Ground-truth channel gain in dB. Bit-exactly symmetric in its arguments.
    pub fn channel_gain(&self, tx: Point3, rx: Point3) -> Result<f64> {
        let (a, b) = match tx.lex_cmp(&rx) {
            std::cmp::Ordering::Greater => (rx, tx),
            _ => (tx, rx),
        };
        let weights = segment_voxel_lengths(a, b, self.grid(), &self.region)?;
        let absorbed = weights.dot(&self.loss_field.values);
        Ok(-self.path_loss.loss_db(a.distance(b)) - absorbed)
    }
}

/// Parameters of [`sample_environment`] besides the seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvironmentConfig {
    pub region: Region,
    pub grid: GridSpec,
    pub max_buildings: usize,
    /// Footprint (width, depth) in meters.
    pub building_size: (f64, f64),
    pub loss_density: f64,
    pub path_loss: PathLossParams,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        EnvironmentConfig {
            region: Region::default(),
            grid: GridSpec::default(),
            max_buildings: 8,
            building_size: (40.0, 40.0),
            loss_density: 1.0,
            path_loss: PathLossParams::default(),
        }
    }
}

/// Draws a random environment: the building count is uniform over
/// `0..=max_buildings` and centers are uniform over the region footprint.
/// The seed doubles as the environment id.
pub fn sample_environment(seed: u64, config: &EnvironmentConfig) -> Result<Environment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(0..=config.max_buildings);
    let (width, depth) = config.building_size;
    if !(width > 0.0 && depth > 0.0) {
        return Err(invalid("building footprint must be positive"));
    }
    let buildings = (0..count)
        .map(|_| Building {
            center_x: rng.gen::<f64>() * config.region.x_extent,
            center_y: rng.gen::<f64>() * config.region.y_extent,
            width,
            depth,
            loss_density: config.loss_density,
        })
        .collect();
    Environment::new(seed, config.region, config.grid, buildings, config.path_loss)
}

/// Radio link parameters for converting gains to Shannon capacities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    /// Hz
    pub bandwidth: f64,
    /// W
    pub tx_power: f64,
    /// dBm
    pub noise_power_dbm: f64,
    /// Hz, informational only.
    pub frequency: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams { bandwidth: 20e6, tx_power: 0.3, noise_power_dbm: -96.0, frequency: 2.4e9 }
    }
}

impl LinkParams {
    pub fn noise_power_watts(&self) -> f64 {
        10f64.powf((self.noise_power_dbm - 30.0) / 10.0)
    }
}

/// Shannon capacity in bits/s of a link with the given gain in dB.
pub fn capacity_from_gain(gain_db: f64, link: &LinkParams) -> f64 {
    let snr = link.tx_power * 10f64.powf(gain_db / 10.0) / link.noise_power_watts();
    link.bandwidth * snr.ln_1p() / std::f64::consts::LN_2
}
