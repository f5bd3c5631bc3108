//! Gridded kernel storage: the graded space-time lattice, the value table
//! produced by the series builder, and its binary/CSV serialization.
//!
//! Binary layout (`.nlhk`, little-endian): magic `NLHK`, version `u32 = 1`,
//! `d: u32`, `beta: f64`, `K: u32`, `K × f64` positive grid times,
//! `dx: f64`, `half_extent: f64`, per-axis count `u32`, translation
//! invariance flag `u8`, then the values as `f64` row-major, time-outer.

use std::io::{Read, Write};

use crate::coefficients::ModelParams;
use crate::error::NlError;

const MAGIC: &[u8; 4] = b"NLHK";
const VERSION: u32 = 1;

/// Space-time lattice: graded times `t_k = T ((k+k0)/(K+k0))^γ` with
/// `γ = 2/(2-β)`, and a centered odd axis of spacing `dx` per dimension.
///
/// `k0` is the smallest offset making `t_1 ≥ 4.5 dx²`, which keeps the
/// Gaussian at the earliest slice wide enough for the lattice to resolve
/// (aliasing `e^{-t(π/dx)²}` stays below double precision).
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    pub params: ModelParams,
    /// positive grid times `t_1 < … < t_K = T`
    pub times: Vec<f64>,
    pub dx: f64,
    pub half_extent: f64,
    /// odd number of nodes per axis, centered at the origin
    pub n_axis: usize,
}

impl SpaceTimeGrid {
    pub fn new(
        params: ModelParams,
        horizon: f64,
        k_steps: usize,
        dx: f64,
        half_extent: f64,
    ) -> Result<Self, NlError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(NlError::config("horizon must be positive and finite"));
        }
        if k_steps < 2 {
            return Err(NlError::config("need at least 2 time steps"));
        }
        if !(dx > 0.0 && half_extent > dx) {
            return Err(NlError::config("require 0 < dx < half_extent"));
        }
        let t_floor = 4.5 * dx * dx;
        if t_floor > horizon {
            return Err(NlError::config(format!(
                "dx = {dx} too coarse for horizon {horizon}: need 4.5 dx² ≤ T"
            )));
        }
        let gamma = 2.0 / (2.0 - params.beta);
        let kf = k_steps as f64;
        // smallest k0 ≥ 0 with T ((1+k0)/(K+k0))^γ ≥ t_floor
        let mut k0 = 0.0f64;
        while horizon * ((1.0 + k0) / (kf + k0)).powf(gamma) < t_floor {
            k0 = if k0 == 0.0 { 1.0 } else { k0 * 2.0 };
            if k0 > 1e12 {
                return Err(NlError::config("cannot satisfy time grading floor"));
            }
        }
        // refine downward to the smallest power-of-two-free value
        if k0 > 0.0 {
            let mut lo = k0 / 2.0;
            let mut hi = k0;
            while hi - lo > 1.0 {
                let mid = ((lo + hi) / 2.0).floor();
                if horizon * ((1.0 + mid) / (kf + mid)).powf(gamma) >= t_floor {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            k0 = hi;
        }
        let times: Vec<f64> = (1..=k_steps)
            .map(|k| horizon * ((k as f64 + k0) / (kf + k0)).powf(gamma))
            .collect();
        let half_nodes = (half_extent / dx).round().max(1.0) as usize;
        let n_axis = 2 * half_nodes + 1;
        Ok(SpaceTimeGrid {
            params,
            times,
            dx,
            half_extent: half_nodes as f64 * dx,
            n_axis,
        })
    }

    /// Default resolution for a given horizon; heavier in d = 1.
    pub fn default_for(params: ModelParams, horizon: f64) -> Result<Self, NlError> {
        Self::default_for_coef(params, horizon, f64::INFINITY)
    }

    /// Default grid sized for a coefficient with the given jump range. A
    /// finite range enlarges the box so single jumps stay inside it; with
    /// the diffusive box alone, jumped mass would silently leave the
    /// lattice whenever the range exceeds a few `√T`.
    pub fn default_for_coef(
        params: ModelParams,
        horizon: f64,
        support_radius: f64,
    ) -> Result<Self, NlError> {
        let s = horizon.sqrt();
        let (k, dx, lf, n_cap) = match params.d {
            1 => (48, s / 16.0, 8.0, 16_385usize),
            2 => (32, s / 8.0, 5.0, 1_025),
            d => return Err(NlError::config(format!("unsupported dimension {d}"))),
        };
        let mut l = lf * s;
        if support_radius.is_finite() && support_radius > 0.0 {
            l = l.max(support_radius + lf * s);
        }
        l = l.min(((n_cap - 1) / 2) as f64 * dx);
        Self::new(params, horizon, k, dx, l)
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn k_steps(&self) -> usize {
        self.times.len()
    }

    /// Axis coordinates `(i - (n-1)/2)·dx`.
    pub fn axis(&self) -> Vec<f64> {
        let c = (self.n_axis - 1) as f64 / 2.0;
        (0..self.n_axis).map(|i| (i as f64 - c) * self.dx).collect()
    }

    pub fn center(&self) -> usize {
        (self.n_axis - 1) / 2
    }

    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - self.center() as f64) * self.dx
    }

    /// Nearest axis index for coordinate `x`, if within the box.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let i = (x / self.dx).round() + self.center() as f64;
        if i >= 0.0 && (i as usize) < self.n_axis {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Number of spatial nodes per time slice for a displacement table.
    pub fn slice_len(&self) -> usize {
        self.n_axis.pow(self.params.d as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TableData {
    /// `q(t, x-y)` on the displacement lattice: `K × n^d` values.
    TransInv(Vec<f64>),
    /// `q(t, x, y)` in d = 1: `K × n × n` values (x-outer).
    Full(Vec<f64>),
}

/// Kernel values on a space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    pub grid: SpaceTimeGrid,
    pub data: TableData,
}

impl KernelTable {
    pub fn new(grid: SpaceTimeGrid, data: TableData) -> Result<Self, NlError> {
        let k = grid.k_steps();
        let n = grid.n_axis;
        let expect = match &data {
            TableData::TransInv(v) => {
                if grid.params.d > 2 {
                    return Err(NlError::config("tables support d = 1, 2"));
                }
                (k * grid.slice_len(), v.len())
            }
            TableData::Full(v) => {
                if grid.params.d != 1 {
                    return Err(NlError::config("full tables are d = 1 only"));
                }
                (k * n * n, v.len())
            }
        };
        if expect.0 != expect.1 {
            return Err(NlError::GridMismatch(format!(
                "table has {} values, grid wants {}",
                expect.1, expect.0
            )));
        }
        Ok(KernelTable { grid, data })
    }

    pub fn translation_invariant(&self) -> bool {
        matches!(self.data, TableData::TransInv(_))
    }

    fn values(&self) -> &[f64] {
        match &self.data {
            TableData::TransInv(v) | TableData::Full(v) => v,
        }
    }

    fn values_mut(&mut self) -> &mut [f64] {
        match &mut self.data {
            TableData::TransInv(v) | TableData::Full(v) => v,
        }
    }

    /// Kernel value at time index `k` and axis indices; `yi` is ignored in
    /// the displacement representation apart from forming `x - y`.
    pub fn value_at(&self, k: usize, xi: &[usize], yi: &[usize]) -> f64 {
        let n = self.grid.n_axis;
        match &self.data {
            TableData::TransInv(v) => {
                let c = self.grid.center() as isize;
                let mut idx = 0usize;
                for (a, (&x, &y)) in xi.iter().zip(yi).enumerate() {
                    let u = x as isize - y as isize + c;
                    debug_assert!(u >= 0 && (u as usize) < n, "axis {a} displacement off-grid");
                    idx = idx * n + u as usize;
                }
                v[k * self.grid.slice_len() + idx]
            }
            TableData::Full(v) => v[(k * n + xi[0]) * n + yi[0]],
        }
    }

    /// One time slice of a displacement table.
    pub fn slice(&self, k: usize) -> &[f64] {
        let m = match &self.data {
            TableData::TransInv(_) => self.grid.slice_len(),
            TableData::Full(_) => self.grid.n_axis * self.grid.n_axis,
        };
        &self.values()[k * m..(k + 1) * m]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let m = match &self.data {
            TableData::TransInv(_) => self.grid.slice_len(),
            TableData::Full(_) => self.grid.n_axis * self.grid.n_axis,
        };
        let v = match &mut self.data {
            TableData::TransInv(v) | TableData::Full(v) => v,
        };
        &mut v[k * m..(k + 1) * m]
    }

    /// Piecewise-multilinear evaluation: linear in `t` between grid times
    /// (clamped to `[t_1, T]`), multilinear in space.
    pub fn eval(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64, NlError> {
        let times = &self.grid.times;
        let t = t.clamp(times[0], self.grid.horizon());
        let k_hi = times.partition_point(|&v| v < t).min(times.len() - 1);
        let (k_lo, w) = if k_hi == 0 || (times[k_hi] - t).abs() < 1e-15 * t {
            (k_hi, 0.0)
        } else {
            let lo = k_hi - 1;
            (lo, (t - times[lo]) / (times[k_hi] - times[lo]))
        };
        let v_lo = self.eval_space(k_lo, x, y)?;
        if w == 0.0 {
            return Ok(v_lo);
        }
        let v_hi = self.eval_space(k_hi, x, y)?;
        Ok(v_lo * (1.0 - w) + v_hi * w)
    }

    fn eval_space(&self, k: usize, x: &[f64], y: &[f64]) -> Result<f64, NlError> {
        let d = self.grid.params.d;
        if x.len() != d || y.len() != d {
            return Err(NlError::GridMismatch(format!(
                "point dimension {} vs grid {}",
                x.len(),
                d
            )));
        }
        match &self.data {
            TableData::TransInv(_) => {
                let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                self.multilinear_displacement(k, &u)
            }
            TableData::Full(_) => {
                // bilinear over the (x, y) product lattice
                let (ix, wx) = self.locate(x[0])?;
                let (iy, wy) = self.locate(y[0])?;
                let f = |a: usize, b: usize| self.value_at(k, &[a], &[b]);
                Ok(f(ix, iy) * (1.0 - wx) * (1.0 - wy)
                    + f(ix + 1, iy) * wx * (1.0 - wy)
                    + f(ix, iy + 1) * (1.0 - wx) * wy
                    + f(ix + 1, iy + 1) * wx * wy)
            }
        }
    }

    fn locate(&self, x: f64) -> Result<(usize, f64), NlError> {
        let n = self.grid.n_axis;
        let pos = x / self.grid.dx + self.grid.center() as f64;
        if pos < 0.0 || pos > (n - 1) as f64 {
            return Err(NlError::GridMismatch(format!(
                "coordinate {x} outside box ±{}",
                self.grid.half_extent
            )));
        }
        let i = (pos.floor() as usize).min(n - 2);
        Ok((i, pos - i as f64))
    }

    fn multilinear_displacement(&self, k: usize, u: &[f64]) -> Result<f64, NlError> {
        match self.grid.params.d {
            1 => {
                let (i, w) = self.locate(u[0])?;
                let s = self.slice(k);
                Ok(s[i] * (1.0 - w) + s[i + 1] * w)
            }
            2 => {
                let (i, wi) = self.locate(u[0])?;
                let (j, wj) = self.locate(u[1])?;
                let n = self.grid.n_axis;
                let s = self.slice(k);
                Ok(s[i * n + j] * (1.0 - wi) * (1.0 - wj)
                    + s[(i + 1) * n + j] * wi * (1.0 - wj)
                    + s[i * n + j + 1] * (1.0 - wi) * wj
                    + s[(i + 1) * n + j + 1] * wi * wj)
            }
            _ => unreachable!(),
        }
    }

    /// Lattice mass `Σ q · dx^d` of one time slice (displacement tables).
    pub fn slice_mass(&self, k: usize) -> f64 {
        let dv = self.grid.dx.powi(self.grid.params.d as i32);
        self.slice(k).iter().sum::<f64>() * dv
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NlError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.grid.params.d as u32).to_le_bytes())?;
        w.write_all(&self.grid.params.beta.to_le_bytes())?;
        w.write_all(&(self.grid.k_steps() as u32).to_le_bytes())?;
        for &t in &self.grid.times {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&self.grid.dx.to_le_bytes())?;
        w.write_all(&self.grid.half_extent.to_le_bytes())?;
        w.write_all(&(self.grid.n_axis as u32).to_le_bytes())?;
        w.write_all(&[self.translation_invariant() as u8])?;
        for &v in self.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NlError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NlError::config("not an NLHK file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(NlError::config(format!("unsupported NLHK version {version}")));
        }
        let d = read_u32(r)? as usize;
        let beta = read_f64(r)?;
        let params = ModelParams::new(d, beta)?;
        let k = read_u32(r)? as usize;
        if k == 0 || k > 1_000_000 {
            return Err(NlError::config("implausible time step count"));
        }
        let mut times = Vec::with_capacity(k);
        for _ in 0..k {
            times.push(read_f64(r)?);
        }
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0))
            || times.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(NlError::config("grid times must be positive and increasing"));
        }
        let dx = read_f64(r)?;
        let half_extent = read_f64(r)?;
        let n_axis = read_u32(r)? as usize;
        if !(dx > 0.0) || n_axis < 3 || n_axis % 2 == 0 || n_axis > 1 << 22 {
            return Err(NlError::config("implausible spatial grid header"));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let grid = SpaceTimeGrid {
            params,
            times,
            dx,
            half_extent,
            n_axis,
        };
        let count = if flag[0] == 1 {
            k * grid.slice_len()
        } else {
            if d != 1 {
                return Err(NlError::config("full tables are d = 1 only"));
            }
            k * n_axis * n_axis
        };
        let mut values = vec![0.0f64; count];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let data = if flag[0] == 1 {
            TableData::TransInv(values)
        } else {
            TableData::Full(values)
        };
        KernelTable::new(grid, data)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NlError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NlError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// CSV dump: `t,u1[,u2],q` for displacement tables, `t,x,y,q` for full.
    pub fn export_csv(&self, w: &mut impl Write) -> Result<(), NlError> {
        let axis = self.grid.axis();
        match &self.data {
            TableData::TransInv(_) => {
                if self.grid.params.d == 1 {
                    writeln!(w, "t,u,q")?;
                    for (k, &t) in self.grid.times.iter().enumerate() {
                        let s = self.slice(k);
                        for (i, &u) in axis.iter().enumerate() {
                            writeln!(w, "{t},{u},{}", s[i])?;
                        }
                    }
                } else {
                    writeln!(w, "t,u1,u2,q")?;
                    let n = self.grid.n_axis;
                    for (k, &t) in self.grid.times.iter().enumerate() {
                        let s = self.slice(k);
                        for (i, &u1) in axis.iter().enumerate() {
                            for (j, &u2) in axis.iter().enumerate() {
                                writeln!(w, "{t},{u1},{u2},{}", s[i * n + j])?;
                            }
                        }
                    }
                }
            }
            TableData::Full(_) => {
                writeln!(w, "t,x,y,q")?;
                let n = self.grid.n_axis;
                for (k, &t) in self.grid.times.iter().enumerate() {
                    let s = self.slice(k);
                    for (i, &x) in axis.iter().enumerate() {
                        for (j, &y) in axis.iter().enumerate() {
                            writeln!(w, "{t},{x},{y},{}", s[i * n + j])?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Apply `f` to every stored value (used for scaling transfers).
    pub fn map_values(&mut self, f: impl Fn(f64) -> f64) {
        for v in self.values_mut() {
            *v = f(*v);
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, NlError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, NlError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pm() -> ModelParams {
        ModelParams::new(1, 1.0).unwrap()
    }

    #[test]
    fn graded_times_shape() {
        let g = SpaceTimeGrid::new(pm(), 1.0, 48, 1.0 / 16.0, 0.5).unwrap();
        assert_eq!(g.k_steps(), 48);
        assert_relative_eq!(g.horizon(), 1.0, max_relative = 1e-15);
        assert!(g.times.windows(2).all(|w| w[0] < w[1]));
        assert!(g.times[0] >= 4.5 / 256.0 * (1.0 - 1e-12));
        // β = 1 ⇒ γ = 2; with k0 = 0 the law is t_k = T (k/K)²
        let g2 = SpaceTimeGrid::new(pm(), 1.0, 8, 0.05, 0.5).unwrap();
        if g2.times[0] >= 4.5 * 0.0025 {
            // k0 may be 0 here; check the power law directly when it is
            let guess = (1.0f64 / 8.0).powi(2);
            if (g2.times[0] - guess).abs() < 1e-12 {
                assert_relative_eq!(g2.times[3], (4.0f64 / 8.0).powi(2), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn axis_is_odd_and_centered() {
        let g = SpaceTimeGrid::new(pm(), 1.0, 8, 0.1, 0.75).unwrap();
        assert_eq!(g.n_axis % 2, 1);
        let axis = g.axis();
        assert_relative_eq!(axis[g.center()], 0.0);
        assert_relative_eq!(-axis[0], *axis.last().unwrap(), max_relative = 1e-15);
        assert_eq!(g.index_of(0.0), Some(g.center()));
        assert_eq!(g.index_of(100.0), None);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(SpaceTimeGrid::new(pm(), 0.0, 8, 0.1, 1.0).is_err());
        assert!(SpaceTimeGrid::new(pm(), 1.0, 1, 0.1, 1.0).is_err());
        assert!(SpaceTimeGrid::new(pm(), 1.0, 8, 0.0, 1.0).is_err());
        assert!(SpaceTimeGrid::new(pm(), 0.001, 8, 0.5, 1.0).is_err()); // 4.5dx² > T
    }

    fn sample_table() -> KernelTable {
        let g = SpaceTimeGrid::new(pm(), 1.0, 6, 0.125, 1.0).unwrap();
        let mut vals = Vec::new();
        for &t in &g.times.clone() {
            for &u in &g.axis() {
                vals.push(crate::kernels::gaussian_r(1, t, u));
            }
        }
        KernelTable::new(g, TableData::TransInv(vals)).unwrap()
    }

    #[test]
    fn roundtrip_binary() {
        let t = sample_table();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NLHK");
        let back = KernelTable::read_from(&mut &buf[..]).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn rejects_corrupt_files() {
        let t = sample_table();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(KernelTable::read_from(&mut &bad[..]).is_err());
        let mut bad = buf.clone();
        bad[4] = 9; // version
        assert!(KernelTable::read_from(&mut &bad[..]).is_err());
        let short = &buf[..buf.len() - 4];
        assert!(KernelTable::read_from(&mut &short[..]).is_err());
    }

    #[test]
    fn interpolation_hits_nodes() {
        let t = sample_table();
        let g = &t.grid;
        for (k, &tk) in g.times.iter().enumerate() {
            for (i, &u) in g.axis().iter().enumerate() {
                let v = t.eval(tk, &[u], &[0.0]).unwrap();
                assert_relative_eq!(v, t.slice(k)[i], max_relative = 1e-12);
            }
        }
        // midpoint between two times stays between the slice values
        let tm = 0.5 * (g.times[2] + g.times[3]);
        let v = t.eval(tm, &[0.25], &[0.0]).unwrap();
        let lo = t.eval(g.times[2], &[0.25], &[0.0]).unwrap();
        let hi = t.eval(g.times[3], &[0.25], &[0.0]).unwrap();
        assert!(v >= hi.min(lo) - 1e-15 && v <= hi.max(lo) + 1e-15);
    }

    #[test]
    fn out_of_box_eval_errors() {
        let t = sample_table();
        assert!(t.eval(0.5, &[5.0], &[0.0]).is_err());
    }

    #[test]
    fn slice_mass_of_gaussian_near_one() {
        let t = sample_table();
        // wide box relative to √t only for the earliest slices
        let m = t.slice_mass(0);
        assert!((m - 1.0).abs() < 0.05, "mass {m}");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let t = sample_table();
        let mut out = Vec::new();
        t.export_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("t,u,q"));
        assert_eq!(s.lines().count(), 1 + t.grid.k_steps() * t.grid.n_axis);
    }
}
