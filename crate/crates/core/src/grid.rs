//! Structured square-cell raster grid and ESRI ASCII grid I/O.
//!
//! Cells are addressed by `(i, j)` with `i` increasing east (downstream) and
//! `j` increasing north. Field storage is column-major: `idx = i * ny + j`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OsseError, Result};

pub const NODATA: f64 = -9999.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub nx: usize,
    pub ny: usize,
    /// Cell size (m).
    pub dx: f64,
    /// Center of the lower-left cell (m).
    pub x0: f64,
    pub y0: f64,
}

impl RasterGrid {
    pub fn new(nx: usize, ny: usize, dx: f64, x0: f64, y0: f64) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(OsseError::invalid(format!(
                "grid must be at least 4x4 cells, got {nx}x{ny}"
            )));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(OsseError::invalid(format!("cell size must be positive, got {dx}")));
        }
        Ok(Self { nx, ny, dx, x0, y0 })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    #[inline]
    pub fn ij(&self, idx: usize) -> (usize, usize) {
        (idx / self.ny, idx % self.ny)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.nx && j < self.ny
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.x0 + i as f64 * self.dx, self.y0 + j as f64 * self.dx)
    }

    /// Outer bounding box `(xmin, ymin, xmax, ymax)` of the cell edges.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let h = 0.5 * self.dx;
        (
            self.x0 - h,
            self.y0 - h,
            self.x0 + (self.nx as f64 - 0.5) * self.dx,
            self.y0 + (self.ny as f64 - 0.5) * self.dx,
        )
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dx
    }

    /// Nearest cell center. Points exactly between two centers resolve to the
    /// lower index.
    pub fn locate_cell(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        let (xmin, ymin, xmax, ymax) = self.extent();
        if !(x >= xmin && x <= xmax && y >= ymin && y <= ymax) {
            return Err(OsseError::OutOfExtent { x, y });
        }
        let axis = |v: f64, v0: f64, n: usize| -> usize {
            let f = (v - v0) / self.dx;
            // ceil(f - 0.5) rounds half-way values down
            let k = (f - 0.5).ceil();
            (k.max(0.0) as usize).min(n - 1)
        };
        Ok((axis(x, self.x0, self.nx), axis(y, self.y0, self.ny)))
    }
}

/// Write a column-major field as an ESRI ASCII grid (north row first).
pub fn write_ascii_grid(path: &Path, grid: &RasterGrid, values: &[f64]) -> Result<()> {
    fs::write(path, format_ascii_grid(grid, values)).map_err(|e| OsseError::io(path, e))
}

pub fn format_ascii_grid(grid: &RasterGrid, values: &[f64]) -> String {
    assert_eq!(values.len(), grid.len());
    let h = 0.5 * grid.dx;
    let mut s = String::with_capacity(grid.len() * 8 + 160);
    let _ = writeln!(s, "ncols {}", grid.nx);
    let _ = writeln!(s, "nrows {}", grid.ny);
    let _ = writeln!(s, "xllcorner {}", grid.x0 - h);
    let _ = writeln!(s, "yllcorner {}", grid.y0 - h);
    let _ = writeln!(s, "cellsize {}", grid.dx);
    let _ = writeln!(s, "NODATA_value {}", NODATA);
    for j in (0..grid.ny).rev() {
        for i in 0..grid.nx {
            if i > 0 {
                s.push(' ');
            }
            // `{}` on f64 prints the shortest representation that parses back exactly
            let _ = write!(s, "{}", values[grid.idx(i, j)]);
        }
        s.push('\n');
    }
    s
}

/// Read an ESRI ASCII grid, returning the header-derived grid and a
/// column-major field. NODATA cells come back as `NODATA`.
pub fn read_ascii_grid(path: &Path) -> Result<(RasterGrid, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| OsseError::io(path, e))?;
    parse_ascii_grid(&text).map_err(|msg| OsseError::parse(path, msg))
}

pub fn parse_ascii_grid(text: &str) -> std::result::Result<(RasterGrid, Vec<f64>), String> {
    let mut tokens = text.split_ascii_whitespace();
    let mut header = |key: &str| -> std::result::Result<f64, String> {
        let k = tokens.next().ok_or_else(|| format!("missing header {key}"))?;
        if !k.eq_ignore_ascii_case(key) {
            return Err(format!("expected header {key}, found {k}"));
        }
        let v = tokens.next().ok_or_else(|| format!("missing value for {key}"))?;
        v.parse::<f64>().map_err(|e| format!("{key}: {e}"))
    };
    let nx = header("ncols")? as usize;
    let ny = header("nrows")? as usize;
    let xll = header("xllcorner")?;
    let yll = header("yllcorner")?;
    let dx = header("cellsize")?;
    let nodata = header("NODATA_value")?;
    let grid = RasterGrid::new(nx, ny, dx, xll + 0.5 * dx, yll + 0.5 * dx).map_err(|e| e.to_string())?;
    let mut values = vec![0.0; grid.len()];
    for j in (0..ny).rev() {
        for i in 0..nx {
            let t = tokens.next().ok_or("truncated grid body")?;
            let v: f64 = t.parse().map_err(|e| format!("cell ({i}, {j}): {e}"))?;
            values[grid.idx(i, j)] = if v == nodata { NODATA } else { v };
        }
    }
    if tokens.next().is_some() {
        return Err("trailing values after grid body".into());
    }
    Ok((grid, values))
}
