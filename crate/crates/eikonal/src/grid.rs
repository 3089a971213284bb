//! Occupancy grids and scalar lattice fields.
//!
//! Grids are regular lattices in 2 or 3 dimensions. Cell `(i, j, k)` has its
//! center at `origin + (i, j, k) * h`, and the configuration domain is the
//! hull of the cell centers, `[origin, origin + (shape - 1) * h]` per axis.
//! Storage is row-major with the x index fastest.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// Boolean obstacle lattice plus its clearance field.
///
/// `clearance` holds the exact Euclidean distance (world units) from each cell
/// center to the nearest occupied cell center; occupied cells hold 0. A grid
/// without any occupied cell holds `+inf` everywhere and the speed field
/// saturates at 1.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    dims: usize,
    shape: [usize; 3],
    resolution: f64,
    origin: [f64; 3],
    occupancy: Vec<bool>,
    clearance: Vec<f64>,
}

impl OccupancyGrid {
    /// Build a grid from its occupancy lattice and fill the clearance field.
    ///
    /// `shape` lists `[nx, ny]` or `[nx, ny, nz]`. Fails with "no free space"
    /// when every cell is occupied.
    pub fn new(shape: &[usize], resolution: f64, origin: &[f64], occupancy: Vec<bool>) -> Result<Self> {
        let dims = shape.len();
        if !(dims == 2 || dims == 3) {
            return Err(Error::Config(format!("grid dims must be 2 or 3, got {dims}")));
        }
        if resolution <= 0.0 {
            return Err(Error::Config("grid resolution must be > 0".into()));
        }
        let mut s = [1usize; 3];
        s[..dims].copy_from_slice(shape);
        let n = s[0] * s[1] * s[2];
        if occupancy.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "occupancy length {} does not match shape {:?}",
                occupancy.len(),
                shape
            )));
        }
        let mut o = [0.0f64; 3];
        o[..dims].copy_from_slice(&origin[..dims]);
        let mut grid = Self {
            dims,
            shape: s,
            resolution,
            origin: o,
            occupancy,
            clearance: vec![0.0; n],
        };
        distance_transform(&mut grid)?;
        Ok(grid)
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// `[nx, ny, nz]`; `nz == 1` for 2D grids.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.shape[1] + iy) * self.shape[0] + ix
    }

    #[inline]
    pub fn occupied(&self, idx: usize) -> bool {
        self.occupancy[idx]
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn clearance(&self) -> &[f64] {
        &self.clearance
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> Vec<f64> {
        let mut c = vec![
            self.origin[0] + ix as f64 * self.resolution,
            self.origin[1] + iy as f64 * self.resolution,
        ];
        if self.dims == 3 {
            c.push(self.origin[2] + iz as f64 * self.resolution);
        }
        c
    }

    /// Nearest cell to a world point, or None when outside the domain hull.
    pub fn nearest_cell(&self, q: &[f64]) -> Option<[usize; 3]> {
        if !self.in_domain(q) {
            return None;
        }
        let mut c = [0usize; 3];
        for a in 0..self.dims {
            let t = (q[a] - self.origin[a]) / self.resolution;
            c[a] = (t.round().max(0.0) as usize).min(self.shape[a] - 1);
        }
        Some(c)
    }

    /// Lower and upper corners of the domain hull (cell-center extent).
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lo: Vec<f64> = self.origin[..self.dims].to_vec();
        let hi: Vec<f64> = (0..self.dims)
            .map(|a| self.origin[a] + (self.shape[a] - 1) as f64 * self.resolution)
            .collect();
        (lo, hi)
    }

    pub fn in_domain(&self, q: &[f64]) -> bool {
        if q.len() != self.dims {
            return false;
        }
        let (lo, hi) = self.bounds();
        q.iter()
            .zip(lo.iter().zip(hi.iter()))
            .all(|(&x, (&l, &u))| x >= l && x <= u)
    }

    /// Multilinear interpolation of the clearance field at a world point.
    pub fn clearance_at(&self, q: &[f64]) -> Result<f64> {
        if !self.in_domain(q) {
            return Err(Error::OutOfDomain(q.to_vec()));
        }
        Ok(interp(self.dims, &self.shape, self.origin, self.resolution, &self.clearance, q).0)
    }

    /// Clearance value and its (piecewise-constant) spatial gradient.
    pub fn clearance_with_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        if !self.in_domain(q) {
            return Err(Error::OutOfDomain(q.to_vec()));
        }
        let (v, g) = interp(self.dims, &self.shape, self.origin, self.resolution, &self.clearance, q);
        Ok((v, g))
    }

    /// Load a plain-text map: `#` = occupied, `.` = free, one row per line.
    ///
    /// Row `r` maps to cell `iy = r`, column `c` to `ix = c`. When
    /// `resolution` is `None` the longest side is normalized to span `[0, 1]`.
    pub fn from_text_map(text: &str, resolution: Option<f64>) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::Parse("empty map".into()));
        }
        let nx = lines[0].chars().count();
        let ny = lines.len();
        let mut occ = vec![false; nx * ny];
        for (iy, line) in lines.iter().enumerate() {
            let chars: Vec<char> = line.chars().collect();
            if chars.len() != nx {
                return Err(Error::Parse(format!(
                    "map row {} has {} cells, expected {}",
                    iy,
                    chars.len(),
                    nx
                )));
            }
            for (ix, ch) in chars.iter().enumerate() {
                occ[iy * nx + ix] = match ch {
                    '#' => true,
                    '.' => false,
                    other => return Err(Error::Parse(format!("unexpected map character '{other}'"))),
                };
            }
        }
        let h = resolution.unwrap_or(1.0 / (nx.max(ny) - 1).max(1) as f64);
        Self::new(&[nx, ny], h, &[0.0, 0.0], occ)
    }

    pub fn from_text_map_file(path: &Path, resolution: Option<f64>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text_map(&text, resolution)
    }

    /// Load an 8-bit PGM (P2 or P5); pixels < 128 are occupied.
    pub fn from_pgm_file(path: &Path, resolution: Option<f64>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (w, h, pixels) = parse_pgm8(&bytes)?;
        let occ: Vec<bool> = pixels.iter().map(|&p| p < 128).collect();
        let res = resolution.unwrap_or(1.0 / (w.max(h) - 1).max(1) as f64);
        Self::new(&[w, h], res, &[0.0, 0.0], occ)
    }
}

/// Fill the clearance lattice of `grid` with the exact Euclidean distance
/// transform (squared-distance lower envelopes along each axis).
///
/// Errors with "no free space" when every cell is occupied. A grid with no
/// occupied cell gets a `+inf` clearance everywhere.
pub fn distance_transform(grid: &mut OccupancyGrid) -> Result<()> {
    let [nx, ny, nz] = grid.shape;
    let n = nx * ny * nz;
    if grid.occupancy.iter().all(|&o| o) {
        return Err(Error::NoFreeSpace);
    }
    if !grid.occupancy.iter().any(|&o| o) {
        grid.clearance = vec![f64::INFINITY; n];
        return Ok(());
    }

    // Squared distance in cell units, seeded at occupied cells.
    let mut sq: Vec<f64> = grid
        .occupancy
        .iter()
        .map(|&o| if o { 0.0 } else { f64::INFINITY })
        .collect();

    let mut f = vec![0.0f64; nx.max(ny).max(nz)];
    let mut d = vec![0.0f64; nx.max(ny).max(nz)];
    let mut v = vec![0usize; nx.max(ny).max(nz)];
    let mut z = vec![0.0f64; nx.max(ny).max(nz) + 1];

    // x pass
    for iz in 0..nz {
        for iy in 0..ny {
            let base = (iz * ny + iy) * nx;
            f[..nx].copy_from_slice(&sq[base..base + nx]);
            dt1d(&f[..nx], &mut d[..nx], &mut v, &mut z);
            sq[base..base + nx].copy_from_slice(&d[..nx]);
        }
    }
    // y pass
    for iz in 0..nz {
        for ix in 0..nx {
            for iy in 0..ny {
                f[iy] = sq[(iz * ny + iy) * nx + ix];
            }
            dt1d(&f[..ny], &mut d[..ny], &mut v, &mut z);
            for iy in 0..ny {
                sq[(iz * ny + iy) * nx + ix] = d[iy];
            }
        }
    }
    // z pass
    if nz > 1 {
        for iy in 0..ny {
            for ix in 0..nx {
                for iz in 0..nz {
                    f[iz] = sq[(iz * ny + iy) * nx + ix];
                }
                dt1d(&f[..nz], &mut d[..nz], &mut v, &mut z);
                for iz in 0..nz {
                    sq[(iz * ny + iy) * nx + ix] = d[iz];
                }
            }
        }
    }

    let h = grid.resolution;
    grid.clearance = sq.iter().map(|&s| s.sqrt() * h).collect();
    Ok(())
}

/// One-dimensional squared-distance transform (lower envelope of parabolas).
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p].is_infinite() {
                // Parabola at p is absent; replace it.
                f64::NEG_INFINITY
            } else {
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
            };
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]].is_infinite() && k == 0 {
        // No parabola in this line; leave distances unchanged.
        d.copy_from_slice(f);
        return;
    }
    let mut k2 = 0usize;
    for q in 0..n {
        while z[k2 + 1] < q as f64 {
            k2 += 1;
        }
        let p = v[k2];
        d[q] = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Scalar field on the same lattice layout as [`OccupancyGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub dims: usize,
    pub shape: [usize; 3],
    pub resolution: f64,
    pub origin: [f64; 3],
    pub data: Vec<f64>,
}

impl GridField {
    pub fn zeros_like(grid: &OccupancyGrid) -> Self {
        Self::filled_like(grid, 0.0)
    }

    pub fn filled_like(grid: &OccupancyGrid, value: f64) -> Self {
        Self {
            dims: grid.dims,
            shape: grid.shape,
            resolution: grid.resolution,
            origin: grid.origin,
            data: vec![value; grid.len()],
        }
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.shape[1] + iy) * self.shape[0] + ix
    }

    pub fn same_lattice(&self, other: &GridField) -> bool {
        self.dims == other.dims && self.shape == other.shape
    }

    /// Multilinear interpolation at a world point; clamps to the hull.
    pub fn interp(&self, q: &[f64]) -> f64 {
        interp(self.dims, &self.shape, self.origin, self.resolution, &self.data, q).0
    }

    /// Interpolated value and gradient.
    pub fn interp_with_grad(&self, q: &[f64]) -> (f64, Vec<f64>) {
        interp(self.dims, &self.shape, self.origin, self.resolution, &self.data, q)
    }

    /// Serialize to CSV: `#`-prefixed header with dims, h, origin, then one
    /// row per lattice row (z-major for 3D), x fastest.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let shape: Vec<String> = self.shape[..self.dims].iter().map(|s| s.to_string()).collect();
        let origin: Vec<String> = self.origin[..self.dims].iter().map(|o| format!("{o}")).collect();
        let _ = writeln!(
            out,
            "# dims={} shape={} h={} origin={}",
            self.dims,
            shape.join("x"),
            self.resolution,
            origin.join(",")
        );
        let [nx, ny, nz] = self.shape;
        for iz in 0..nz {
            for iy in 0..ny {
                let base = (iz * ny + iy) * nx;
                let row: Vec<String> = self.data[base..base + nx].iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut dims = 0usize;
        let mut shape = [1usize; 3];
        let mut resolution = 0.0f64;
        let mut origin = [0.0f64; 3];
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for token in rest.split_whitespace() {
                    if let Some((key, val)) = token.split_once('=') {
                        match key {
                            "dims" => dims = val.parse().map_err(|_| Error::Parse("bad dims".into()))?,
                            "h" => resolution = val.parse().map_err(|_| Error::Parse("bad h".into()))?,
                            "shape" => {
                                for (a, tok) in val.split('x').enumerate() {
                                    if a < 3 {
                                        shape[a] = tok.parse().map_err(|_| Error::Parse("bad shape".into()))?;
                                    }
                                }
                            }
                            "origin" => {
                                for (a, tok) in val.split(',').enumerate() {
                                    if a < 3 {
                                        origin[a] = tok.parse().map_err(|_| Error::Parse("bad origin".into()))?;
                                    }
                                }
                            }
                            _ => {}
                        }
                    }
                }
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|_| Error::Parse("bad field value".into()))?);
        }
        if dims == 0 || resolution <= 0.0 {
            return Err(Error::Parse("missing field header".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        let expect = shape[0] * shape[1] * shape[2];
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "field has {} values, header shape implies {}",
                data.len(),
                expect
            )));
        }
        Ok(Self { dims, shape, resolution, origin, data })
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }

    /// Write a 16-bit PGM (affinely scaled) plus a key-value sidecar with the
    /// scaling so external tools can recover field values. Non-finite cells
    /// map to the maximum pixel, recorded as `inf_pixel` in the sidecar.
    ///
    /// 3D fields are stacked vertically, one slice per z index.
    pub fn write_pgm16(&self, pgm_path: &Path, sidecar_path: &Path) -> Result<()> {
        let finite: Vec<f64> = self.data.iter().copied().filter(|v| v.is_finite()).collect();
        let (lo, hi) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let (lo, hi) = if finite.is_empty() { (0.0, 1.0) } else { (lo, hi) };
        let span = if hi > lo { hi - lo } else { 1.0 };
        let max_px = 65534.0;
        let [nx, ny, nz] = self.shape;
        let mut bytes = Vec::with_capacity(self.data.len() * 2 + 32);
        bytes.extend_from_slice(format!("P5\n{} {}\n65535\n", nx, ny * nz).as_bytes());
        for &v in &self.data {
            let px: u16 = if v.is_finite() {
                (((v - lo) / span) * max_px).round() as u16
            } else {
                65535
            };
            bytes.extend_from_slice(&px.to_be_bytes());
        }
        fs::File::create(pgm_path)?.write_all(&bytes)?;
        let mut side = String::new();
        let _ = writeln!(side, "min = {lo}");
        let _ = writeln!(side, "max = {hi}");
        let _ = writeln!(side, "scale = {}", span / max_px);
        let _ = writeln!(side, "offset = {lo}");
        let _ = writeln!(side, "inf_pixel = 65535");
        let _ = writeln!(side, "dims = {}", self.dims);
        let _ = writeln!(side, "h = {}", self.resolution);
        fs::write(sidecar_path, side)?;
        Ok(())
    }
}

/// Multilinear interpolation with gradient on a row-major lattice.
///
/// The query is clamped to the lattice hull. The gradient is the exact
/// derivative of the interpolant (piecewise constant per cell); any non-finite
/// corner makes the value non-finite and the gradient zero.
fn interp(
    dims: usize,
    shape: &[usize; 3],
    origin: [f64; 3],
    h: f64,
    data: &[f64],
    q: &[f64],
) -> (f64, Vec<f64>) {
    let mut i0 = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..dims {
        let t = ((q[a] - origin[a]) / h).clamp(0.0, (shape[a] - 1) as f64);
        let base = (t.floor() as usize).min(shape[a].saturating_sub(2));
        i0[a] = base;
        frac[a] = t - base as f64;
        if shape[a] == 1 {
            i0[a] = 0;
            frac[a] = 0.0;
        }
    }
    let idx = |ix: usize, iy: usize, iz: usize| (iz * shape[1] + iy) * shape[0] + ix;
    let corner = |dx: usize, dy: usize, dz: usize| {
        data[idx(
            (i0[0] + dx).min(shape[0] - 1),
            (i0[1] + dy).min(shape[1] - 1),
            (i0[2] + dz).min(shape[2] - 1),
        )]
    };

    let nz_steps = if dims == 3 { 1 } else { 0 };
    let mut value = 0.0;
    let mut grad = vec![0.0f64; dims];
    let mut any_nonfinite = false;
    let mut weighted_nonfinite = false;
    for dz in 0..=nz_steps {
        for dy in 0..=1usize {
            for dx in 0..=1usize {
                let c = corner(dx, dy, dz);
                if !c.is_finite() {
                    any_nonfinite = true;
                }
                let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
                let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
                let wz = if dims == 3 {
                    if dz == 1 {
                        frac[2]
                    } else {
                        1.0 - frac[2]
                    }
                } else {
                    1.0
                };
                let w = wx * wy * wz;
                // Zero-weight corners must not poison the value (0 * inf = NaN).
                if w > 0.0 {
                    if c.is_finite() {
                        value += c * w;
                    } else {
                        weighted_nonfinite = true;
                    }
                }
                if c.is_finite() {
                    let sx = if dx == 1 { 1.0 } else { -1.0 };
                    let sy = if dy == 1 { 1.0 } else { -1.0 };
                    grad[0] += c * sx * wy * wz / h;
                    grad[1] += c * wx * sy * wz / h;
                    if dims == 3 {
                        let sz = if dz == 1 { 1.0 } else { -1.0 };
                        grad[2] += c * wx * wy * sz / h;
                    }
                }
            }
        }
    }
    if weighted_nonfinite {
        return (f64::INFINITY, vec![0.0; dims]);
    }
    if any_nonfinite {
        return (value, vec![0.0; dims]);
    }
    (value, grad)
}

/// Parse an 8-bit PGM, P2 (ascii) or P5 (binary).
fn parse_pgm8(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    // Header: magic, width, height, maxval, with # comments allowed.
    while tokens.len() < 4 && pos < bytes.len() {
        let b = bytes[pos];
        if b == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            pos += 1;
        } else {
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
    }
    if tokens.len() < 4 {
        return Err(Error::Parse("truncated PGM header".into()));
    }
    let magic = tokens[0].clone();
    let w: usize = tokens[1].parse().map_err(|_| Error::Parse("bad PGM width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| Error::Parse("bad PGM height".into()))?;
    let maxval: usize = tokens[3].parse().map_err(|_| Error::Parse("bad PGM maxval".into()))?;
    if maxval > 255 {
        return Err(Error::Parse("only 8-bit PGM input is supported".into()));
    }
    let n = w * h;
    match magic.as_str() {
        "P5" => {
            pos += 1; // single whitespace after maxval
            if bytes.len() < pos + n {
                return Err(Error::Parse("truncated PGM data".into()));
            }
            Ok((w, h, bytes[pos..pos + n].to_vec()))
        }
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: std::result::Result<Vec<u8>, _> =
                text.split_whitespace().take(n).map(|t| t.parse::<u8>()).collect();
            let vals = vals.map_err(|_| Error::Parse("bad PGM pixel".into()))?;
            if vals.len() != n {
                return Err(Error::Parse("truncated PGM data".into()));
            }
            Ok((w, h, vals))
        }
        other => Err(Error::Parse(format!("unsupported PGM magic '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_from_occ(shape: &[usize], occ: Vec<bool>) -> OccupancyGrid {
        OccupancyGrid::new(shape, 1.0, &[0.0, 0.0, 0.0], occ).unwrap()
    }

    #[test]
    fn single_center_cell_corner_clearance_is_sqrt2() {
        let mut occ = vec![false; 9];
        occ[4] = true; // center of 3x3
        let g = grid_from_occ(&[3, 3], occ);
        assert_relative_eq!(g.clearance()[0], 2.0f64.sqrt());
        assert_relative_eq!(g.clearance()[g.index(2, 2, 0)], 2.0f64.sqrt());
        assert_eq!(g.clearance()[4], 0.0);
    }

    #[test]
    fn empty_grid_clearance_is_infinite() {
        let g = grid_from_occ(&[4, 4], vec![false; 16]);
        assert!(g.clearance().iter().all(|c| c.is_infinite()));
    }

    #[test]
    fn all_occupied_errors_no_free_space() {
        let err = OccupancyGrid::new(&[3, 3], 1.0, &[0.0, 0.0], vec![true; 9]).unwrap_err();
        assert!(err.to_string().contains("no free space"));
    }

    /// Brute-force all-pairs oracle on small grids.
    fn brute_clearance(shape: [usize; 2], occ: &[bool], h: f64) -> Vec<f64> {
        let (nx, ny) = (shape[0], shape[1]);
        let occupied: Vec<(usize, usize)> = (0..ny)
            .flat_map(|y| (0..nx).map(move |x| (x, y)))
            .filter(|&(x, y)| occ[y * nx + x])
            .collect();
        (0..ny)
            .flat_map(|y| (0..nx).map(move |x| (x, y)))
            .map(|(x, y)| {
                if occ[y * nx + x] {
                    0.0
                } else {
                    occupied
                        .iter()
                        .map(|&(ox, oy)| {
                            let dx = x as f64 - ox as f64;
                            let dy = y as f64 - oy as f64;
                            (dx * dx + dy * dy).sqrt() * h
                        })
                        .fold(f64::INFINITY, f64::min)
                }
            })
            .collect()
    }

    #[test]
    fn two_cell_clearance_matches_brute_force() {
        let (nx, ny) = (17, 11);
        let mut occ = vec![false; nx * ny];
        occ[3 * nx + 4] = true;
        occ[8 * nx + 13] = true;
        let g = OccupancyGrid::new(&[nx, ny], 0.5, &[0.0, 0.0], occ.clone()).unwrap();
        let oracle = brute_clearance([nx, ny], &occ, 0.5);
        for (a, b) in g.clearance().iter().zip(oracle.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn random_grids_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let nx = rng.gen_range(5..40);
            let ny = rng.gen_range(5..40);
            let occ: Vec<bool> = (0..nx * ny).map(|_| rng.gen_bool(0.15)).collect();
            if occ.iter().all(|&o| o) || !occ.iter().any(|&o| o) {
                continue;
            }
            let g = OccupancyGrid::new(&[nx, ny], 1.0, &[0.0, 0.0], occ.clone()).unwrap();
            let oracle = brute_clearance([nx, ny], &occ, 1.0);
            for (a, b) in g.clearance().iter().zip(oracle.iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn edt_3d_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (nx, ny, nz) = (9, 7, 6);
        let occ: Vec<bool> = (0..nx * ny * nz).map(|_| rng.gen_bool(0.1)).collect();
        let g = OccupancyGrid::new(&[nx, ny, nz], 1.0, &[0.0; 3], occ.clone()).unwrap();
        let occupied: Vec<[usize; 3]> = (0..nz)
            .flat_map(|z| (0..ny).flat_map(move |y| (0..nx).map(move |x| [x, y, z])))
            .filter(|&[x, y, z]| occ[(z * ny + y) * nx + x])
            .collect();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let idx = (z * ny + y) * nx + x;
                    let want = if occ[idx] {
                        0.0
                    } else {
                        occupied
                            .iter()
                            .map(|&[ox, oy, oz]| {
                                let d = [x as f64 - ox as f64, y as f64 - oy as f64, z as f64 - oz as f64];
                                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                            })
                            .fold(f64::INFINITY, f64::min)
                    };
                    assert_relative_eq!(g.clearance()[idx], want, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn clearance_is_one_lipschitz_exhaustive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (nx, ny) = (32, 32);
        let occ: Vec<bool> = (0..nx * ny).map(|_| rng.gen_bool(0.08)).collect();
        let g = OccupancyGrid::new(&[nx, ny], 1.0, &[0.0, 0.0], occ).unwrap();
        let c = g.clearance();
        for ay in 0..ny {
            for ax in 0..nx {
                for by in 0..ny {
                    for bx in 0..nx {
                        let dist = (((ax as f64 - bx as f64).powi(2)) + ((ay as f64 - by as f64).powi(2))).sqrt();
                        let dc = (c[ay * nx + ax] - c[by * nx + bx]).abs();
                        assert!(dc <= dist + 1e-9, "Lipschitz violated: |Δc|={dc} > {dist}");
                    }
                }
            }
        }
    }

    #[test]
    fn text_map_roundtrip_and_orientation() {
        let map = "...\n.#.\n...\n";
        let g = OccupancyGrid::from_text_map(map, Some(1.0)).unwrap();
        assert_eq!(g.shape(), [3, 3, 1]);
        assert!(g.occupied(g.index(1, 1, 0)));
        assert!(!g.occupied(g.index(0, 0, 0)));
        let bad = OccupancyGrid::from_text_map("..\n.", Some(1.0));
        assert!(bad.is_err());
    }

    #[test]
    fn interp_at_node_equals_node_value() {
        let mut occ = vec![false; 25];
        occ[12] = true;
        let g = OccupancyGrid::new(&[5, 5], 0.25, &[1.0, 2.0], occ).unwrap();
        let q = [1.0 + 3.0 * 0.25, 2.0 + 4.0 * 0.25];
        let v = g.clearance_at(&q).unwrap();
        assert_relative_eq!(v, g.clearance()[g.index(3, 4, 0)], max_relative = 1e-12);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let g = grid_from_occ(&[4, 4], {
            let mut o = vec![false; 16];
            o[5] = true;
            o
        });
        let err = g.clearance_at(&[-0.5, 1.0]).unwrap_err();
        assert!(err.to_string().contains("out of domain"));
    }

    #[test]
    fn field_csv_roundtrip() {
        let mut occ = vec![false; 12];
        occ[7] = true;
        let g = OccupancyGrid::new(&[4, 3], 0.5, &[0.25, -1.0], occ).unwrap();
        let mut f = GridField::zeros_like(&g);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = i as f64 * 0.375 - 2.0;
        }
        let parsed = GridField::from_csv(&f.to_csv()).unwrap();
        assert_eq!(parsed, f);
    }

    #[test]
    fn pgm16_write_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mut occ = vec![false; 16];
        occ[0] = true;
        let g = OccupancyGrid::new(&[4, 4], 1.0, &[0.0, 0.0], occ).unwrap();
        let mut f = GridField::zeros_like(&g);
        f.data[5] = 3.0;
        f.data[6] = f64::INFINITY;
        let pgm = dir.path().join("t.pgm");
        let side = dir.path().join("t.pgm.meta");
        f.write_pgm16(&pgm, &side).unwrap();
        let bytes = fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n65535\n"));
        let meta = fs::read_to_string(&side).unwrap();
        assert!(meta.contains("inf_pixel = 65535"));
        // Re-read as 8-bit should fail (16-bit maxval).
        assert!(OccupancyGrid::from_pgm_file(&pgm, None).is_err());
    }

    #[test]
    fn pgm8_load_binary_and_ascii() {
        let dir = tempfile::tempdir().unwrap();
        let p5 = dir.path().join("m.pgm");
        let mut bytes = b"P5\n# comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 200, 10, 255, 127, 128]);
        fs::write(&p5, &bytes).unwrap();
        let g = OccupancyGrid::from_pgm_file(&p5, Some(1.0)).unwrap();
        assert_eq!(g.shape(), [3, 2, 1]);
        assert!(g.occupied(g.index(0, 0, 0)));
        assert!(!g.occupied(g.index(1, 0, 0)));
        assert!(g.occupied(g.index(1, 1, 0))); // 127 < 128
        assert!(!g.occupied(g.index(2, 1, 0)));

        let p2 = dir.path().join("m2.pgm");
        fs::write(&p2, "P2\n2 2\n255\n0 255\n255 0\n").unwrap();
        let g2 = OccupancyGrid::from_pgm_file(&p2, Some(1.0)).unwrap();
        assert!(g2.occupied(g2.index(0, 0, 0)));
        assert!(g2.occupied(g2.index(1, 1, 0)));
    }
}
