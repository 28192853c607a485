//! On-disk formats for environments and measurement sets.
//!
//! Environment: text header followed by the loss field as little-endian f64,
//! row-major in flat voxel order.
//!
//! ```text
//! crete-environment 1
//! id 17
//! region 350 350 20
//! grid 32 32 1
//! path_loss 40.05 2 1
//! buildings 2
//! 101.5 33.25 40 40 1
//! 12 300.75 40 40 1
//! field 1024
//! <1024 x f64 LE>
//! ```
//!
//! Dataset: binary, all little-endian.
//!
//! ```text
//! magic      8 bytes  "CRETEDS1"
//! env_id     u64
//! terminals  u64      count T
//! noise_std  f64      dB
//! records    u64      count R
//! T x 3 f64           terminal coordinates
//! R x 7 f64           tx_x tx_y tx_z rx_x rx_y rx_z gain_db
//! ```

use std::io::{BufRead, Read, Write};

use crate::dataset::{Measurement, MeasurementSet};
use crate::environment::{Building, Environment, GridSpec, LossField, PathLossParams, Region};
use crate::error::{Error, Result};
use crate::geometry::Point3;

const ENV_MAGIC: &str = "crete-environment 1";
const DATASET_MAGIC: &[u8; 8] = b"CRETEDS1";

fn env_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "environment file", detail: detail.into() }
}

fn ds_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "dataset file", detail: detail.into() }
}

pub fn write_environment<W: Write>(env: &Environment, mut w: W) -> Result<()> {
    let r = &env.region;
    let g = env.grid();
    let p = &env.path_loss;
    writeln!(w, "{ENV_MAGIC}")?;
    writeln!(w, "id {}", env.id)?;
    writeln!(w, "region {} {} {}", r.x_extent, r.y_extent, r.z_extent)?;
    writeln!(w, "grid {} {} {}", g.nx, g.ny, g.nz)?;
    writeln!(w, "path_loss {} {} {}", p.l0, p.gamma, p.d0)?;
    writeln!(w, "buildings {}", env.buildings.len())?;
    for b in &env.buildings {
        writeln!(w, "{} {} {} {} {}", b.center_x, b.center_y, b.width, b.depth, b.loss_density)?;
    }
    writeln!(w, "field {}", env.loss_field.values.len())?;
    for v in &env.loss_field.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn header_line<R: BufRead>(r: &mut R, key: &str) -> Result<Vec<String>> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(env_err(format!("unexpected end of file, expected `{key}`")));
    }
    let mut parts = line.split_whitespace();
    match parts.next() {
        Some(k) if k == key => Ok(parts.map(str::to_owned).collect()),
        other => Err(env_err(format!("expected `{key}`, found {other:?}"))),
    }
}

fn parse_all<T: std::str::FromStr>(fields: &[String], n: usize, what: &str) -> Result<Vec<T>> {
    if fields.len() != n {
        return Err(env_err(format!("`{what}` needs {n} values, found {}", fields.len())));
    }
    fields.iter().map(|s| s.parse::<T>().map_err(|_| env_err(format!("bad number `{s}` in `{what}`")))).collect()
}

pub fn read_environment<R: BufRead>(mut r: R) -> Result<Environment> {
    let mut magic = String::new();
    r.read_line(&mut magic)?;
    if magic.trim_end() != ENV_MAGIC {
        return Err(env_err(format!("bad magic line {:?}", magic.trim_end())));
    }
    let id = parse_all::<u64>(&header_line(&mut r, "id")?, 1, "id")?[0];
    let re = parse_all::<f64>(&header_line(&mut r, "region")?, 3, "region")?;
    let region = Region::new(re[0], re[1], re[2])?;
    let gr = parse_all::<usize>(&header_line(&mut r, "grid")?, 3, "grid")?;
    let grid = GridSpec::new(gr[0], gr[1], gr[2])?;
    let pl = parse_all::<f64>(&header_line(&mut r, "path_loss")?, 3, "path_loss")?;
    let path_loss = PathLossParams { l0: pl[0], gamma: pl[1], d0: pl[2] };
    path_loss.validate()?;
    let nb = parse_all::<usize>(&header_line(&mut r, "buildings")?, 1, "buildings")?[0];
    let mut buildings = Vec::with_capacity(nb);
    for _ in 0..nb {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let fields: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        let v = parse_all::<f64>(&fields, 5, "building")?;
        buildings.push(Building { center_x: v[0], center_y: v[1], width: v[2], depth: v[3], loss_density: v[4] });
    }
    let count = parse_all::<usize>(&header_line(&mut r, "field")?, 1, "field")?[0];
    if count != grid.num_voxels() {
        return Err(env_err(format!("field has {count} values, grid needs {}", grid.num_voxels())));
    }
    let mut values = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|_| env_err("truncated loss field"))?;
        values.push(f64::from_le_bytes(buf));
    }
    if values.iter().any(|v| !(*v >= 0.0)) {
        return Err(env_err("loss field values must be nonnegative"));
    }
    Ok(Environment { id, region, buildings, loss_field: LossField { grid, values }, path_loss })
}

pub fn write_dataset<W: Write>(set: &MeasurementSet, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&set.env_id.to_le_bytes())?;
    w.write_all(&(set.terminals.len() as u64).to_le_bytes())?;
    w.write_all(&set.noise_std.to_le_bytes())?;
    w.write_all(&(set.measurements.len() as u64).to_le_bytes())?;
    for t in &set.terminals {
        for c in t.to_array() {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    for m in &set.measurements {
        for c in m.tx.to_array().into_iter().chain(m.rx.to_array()).chain([m.gain]) {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| ds_err("truncated header"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| ds_err("truncated record"))?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<MeasurementSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ds_err("missing magic"))?;
    if &magic != DATASET_MAGIC {
        return Err(ds_err("bad magic"));
    }
    let env_id = read_u64(&mut r)?;
    let num_terminals = read_u64(&mut r)? as usize;
    let noise_std = read_f64(&mut r)?;
    let num_records = read_u64(&mut r)? as usize;
    let mut terminals = Vec::with_capacity(num_terminals.min(1 << 20));
    for _ in 0..num_terminals {
        terminals.push(Point3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?));
    }
    let mut measurements = Vec::with_capacity(num_records.min(1 << 24));
    for _ in 0..num_records {
        let mut v = [0.0; 7];
        for c in v.iter_mut() {
            *c = read_f64(&mut r)?;
        }
        if !v[6].is_finite() {
            return Err(ds_err("non-finite gain"));
        }
        measurements.push(Measurement { tx: Point3::new(v[0], v[1], v[2]), rx: Point3::new(v[3], v[4], v[5]), gain: v[6], env_id });
    }
    Ok(MeasurementSet { env_id, noise_std, measurements, terminals })
}

pub fn write_measurements_csv<W: Write>(set: &MeasurementSet, mut w: W) -> Result<()> {
    writeln!(w, "tx_x,tx_y,tx_z,rx_x,rx_y,rx_z,gain_db")?;
    for m in &set.measurements {
        writeln!(w, "{},{},{},{},{},{},{}", m.tx.x, m.tx.y, m.tx.z, m.rx.x, m.rx.y, m.rx.z, m.gain)?;
    }
    Ok(())
}

/// One CSV row per voxel row (`iy`), layers separated by a blank line.
pub fn write_field_csv<W: Write>(grid: &GridSpec, values: &[f64], mut w: W) -> Result<()> {
    for iz in 0..grid.nz {
        if iz > 0 {
            writeln!(w)?;
        }
        for iy in 0..grid.ny {
            let row: Vec<String> = (0..grid.nx).map(|ix| values[grid.flat_index(ix, iy, iz)].to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}
