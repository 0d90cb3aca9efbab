//! Spatial domain of a test case and the synthetic meandering reach generator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OsseError, Result};
use crate::grid::{read_ascii_grid, write_ascii_grid, RasterGrid};

pub const DEFAULT_NODE_SPACING: f64 = 200.0;

/// Parameters of the synthetic reach. Lengths in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    /// Downstream bed slope of valley and channel (m/m).
    pub valley_slope: f64,
    /// Cross-valley rise of the floodplain away from the banks (m/m).
    pub lateral_slope: f64,
    pub channel_width: f64,
    /// Depth of the channel bed below the adjacent floodplain.
    pub channel_depth: f64,
    /// Meander amplitude as a fraction of the meander wavelength; 0 gives a
    /// straight channel.
    pub sinuosity: f64,
    pub meander_wavelength: f64,
    /// Floodplain elevation at the downstream bank (m above datum).
    pub outlet_elevation: f64,
    pub friction_zones: usize,
    pub subdomains: usize,
    /// Station names and positions as fractions of centerline length.
    pub stations: Vec<StationSpec>,
    pub node_spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSpec {
    pub name: String,
    pub fraction: f64,
}

impl Default for CaseSpec {
    fn default() -> Self {
        Self {
            nx: 240,
            ny: 48,
            dx: 25.0,
            valley_slope: 5e-4,
            lateral_slope: 4e-3,
            channel_width: 100.0,
            channel_depth: 4.0,
            sinuosity: 0.06,
            meander_wavelength: 2000.0,
            outlet_elevation: 20.0,
            friction_zones: 3,
            subdomains: 4,
            stations: vec![
                StationSpec { name: "upstream".into(), fraction: 0.1 },
                StationSpec { name: "middle".into(), fraction: 0.5 },
                StationSpec { name: "downstream".into(), fraction: 0.9 },
            ],
            node_spacing: DEFAULT_NODE_SPACING,
        }
    }
}

impl CaseSpec {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodePoint {
    pub node_id: usize,
    pub x: f64,
    pub y: f64,
    /// Arc length from the upstream end of the centerline.
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaugeStation {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub cell: (usize, usize),
}

/// Immutable description of the modelled domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCase {
    pub grid: RasterGrid,
    pub zb: Vec<f64>,
    pub friction_zone: Vec<usize>,
    /// 0 for the riverbed, 1..=S for floodplain subdomains.
    pub subdomain: Vec<usize>,
    pub centerline: Vec<(f64, f64)>,
    pub nodes: Vec<NodePoint>,
    pub stations: Vec<GaugeStation>,
}

impl DomainCase {
    pub fn zone_count(&self) -> usize {
        self.friction_zone.iter().max().map_or(0, |z| z + 1)
    }

    pub fn subdomain_count(&self) -> usize {
        self.subdomain.iter().copied().max().unwrap_or(0)
    }

    pub fn is_channel(&self, idx: usize) -> bool {
        self.subdomain[idx] == 0
    }

    /// Channel cells on the western (upstream) edge.
    pub fn inlet_cells(&self) -> Vec<usize> {
        (0..self.grid.ny)
            .map(|j| self.grid.idx(0, j))
            .filter(|&k| self.is_channel(k))
            .collect()
    }

    /// Channel cell on the eastern edge closest to the centerline end; its
    /// stage drives the outlet rating curve.
    pub fn outlet_stage_cell(&self) -> usize {
        let (xe, ye) = *self.centerline.last().expect("centerline");
        let (i, j) = self
            .grid
            .locate_cell(xe.min(self.grid.extent().2), ye)
            .unwrap_or((self.grid.nx - 1, self.grid.ny / 2));
        self.grid.idx(i, j)
    }

    pub fn centerline_length(&self) -> f64 {
        polyline_length(&self.centerline)
    }

    /// Cell count per floodplain subdomain, index 0 unused.
    pub fn subdomain_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.subdomain_count() + 1];
        for &s in &self.subdomain {
            n[s] += 1;
        }
        n
    }

    fn validate(&self) -> Result<()> {
        let n = self.grid.len();
        if self.zb.len() != n || self.friction_zone.len() != n || self.subdomain.len() != n {
            return Err(OsseError::invalid("field sizes do not match grid"));
        }
        let contiguous = |ids: &[usize], from: usize| {
            let max = ids.iter().copied().max().unwrap_or(0);
            let mut seen = vec![false; max + 1];
            for &v in ids {
                seen[v] = true;
            }
            seen[from..].iter().all(|&b| b)
        };
        if !contiguous(&self.friction_zone, 0) {
            return Err(OsseError::invalid("friction zone ids are not contiguous"));
        }
        if !contiguous(&self.subdomain, 0) {
            return Err(OsseError::invalid("subdomain ids are not contiguous"));
        }
        let (x0, y0, x1, y1) = self.grid.extent();
        if self
            .centerline
            .iter()
            .any(|&(x, y)| x < x0 || x > x1 || y < y0 || y > y1)
        {
            return Err(OsseError::invalid("centerline leaves the grid extent"));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| OsseError::io(dir, e))?;
        let g = &self.grid;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| OsseError::io(p, e))
        };
        put(
            "grid.txt",
            format!("nx ny dx x0 y0\n{} {} {} {} {}\n", g.nx, g.ny, g.dx, g.x0, g.y0),
        )?;
        write_ascii_grid(&dir.join("zb.asc"), g, &self.zb)?;
        let zones: Vec<f64> = self.friction_zone.iter().map(|&z| z as f64).collect();
        write_ascii_grid(&dir.join("friction_zone.asc"), g, &zones)?;
        let subs: Vec<f64> = self.subdomain.iter().map(|&s| s as f64).collect();
        write_ascii_grid(&dir.join("subdomain.asc"), g, &subs)?;

        let mut s = String::from("x,y\n");
        for (x, y) in &self.centerline {
            let _ = writeln!(s, "{x},{y}");
        }
        put("centerline.csv", s)?;
        let mut s = String::from("node_id,x,y,s\n");
        for n in &self.nodes {
            let _ = writeln!(s, "{},{},{},{}", n.node_id, n.x, n.y, n.s);
        }
        put("nodes.csv", s)?;
        let mut s = String::from("name,x,y\n");
        for st in &self.stations {
            let _ = writeln!(s, "{},{},{}", st.name, st.x, st.y);
        }
        put("stations.csv", s)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| OsseError::io(p, e))
        };
        let gtxt = read("grid.txt")?;
        let vals: Vec<&str> = gtxt
            .lines()
            .nth(1)
            .ok_or_else(|| OsseError::parse(dir.join("grid.txt"), "missing value line"))?
            .split_whitespace()
            .collect();
        let perr = |m: String| OsseError::parse(dir.join("grid.txt"), m);
        if vals.len() != 5 {
            return Err(perr("expected nx ny dx x0 y0".into()));
        }
        let nx = vals[0].parse().map_err(|e| perr(format!("nx: {e}")))?;
        let ny = vals[1].parse().map_err(|e| perr(format!("ny: {e}")))?;
        let f = |k: usize| vals[k].parse::<f64>().map_err(|e| perr(format!("{e}")));
        let grid = RasterGrid::new(nx, ny, f(2)?, f(3)?, f(4)?)?;

        let load = |name: &str| -> Result<Vec<f64>> {
            let p = dir.join(name);
            let (g, v) = read_ascii_grid(&p)?;
            if g.nx != grid.nx || g.ny != grid.ny {
                return Err(OsseError::parse(p, "grid dimensions differ from grid.txt"));
            }
            Ok(v)
        };
        let zb = load("zb.asc")?;
        let to_ids = |v: Vec<f64>, name: &str| -> Result<Vec<usize>> {
            v.into_iter()
                .map(|x| {
                    if x >= 0.0 && x.fract() == 0.0 {
                        Ok(x as usize)
                    } else {
                        Err(OsseError::parse(dir.join(name), format!("bad id {x}")))
                    }
                })
                .collect()
        };
        let friction_zone = to_ids(load("friction_zone.asc")?, "friction_zone.asc")?;
        let subdomain = to_ids(load("subdomain.asc")?, "subdomain.asc")?;

        let rows = |name: &str, ncol: usize| -> Result<Vec<Vec<String>>> {
            let text = read(name)?;
            text.lines()
                .skip(1)
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    let c: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
                    if c.len() == ncol {
                        Ok(c)
                    } else {
                        Err(OsseError::parse(dir.join(name), format!("expected {ncol} columns: {l}")))
                    }
                })
                .collect()
        };
        let num = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| OsseError::parse(dir.join(name), format!("{s}: {e}")))
        };
        let centerline = rows("centerline.csv", 2)?
            .iter()
            .map(|r| Ok((num(&r[0], "centerline.csv")?, num(&r[1], "centerline.csv")?)))
            .collect::<Result<Vec<_>>>()?;
        let nodes = rows("nodes.csv", 4)?
            .iter()
            .map(|r| {
                Ok(NodePoint {
                    node_id: r[0]
                        .parse()
                        .map_err(|e| OsseError::parse(dir.join("nodes.csv"), format!("{e}")))?,
                    x: num(&r[1], "nodes.csv")?,
                    y: num(&r[2], "nodes.csv")?,
                    s: num(&r[3], "nodes.csv")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stations = rows("stations.csv", 3)?
            .iter()
            .map(|r| {
                let x = num(&r[1], "stations.csv")?;
                let y = num(&r[2], "stations.csv")?;
                Ok(GaugeStation {
                    name: r[0].clone(),
                    x,
                    y,
                    cell: grid.locate_cell(x, y)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let case = DomainCase {
            grid,
            zb,
            friction_zone,
            subdomain,
            centerline,
            nodes,
            stations,
        };
        case.validate()?;
        Ok(case)
    }
}

pub fn polyline_length(pts: &[(f64, f64)]) -> f64 {
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
        .sum()
}

/// Point at arc length `s` along a polyline (clamped to its ends).
pub fn point_at_arclength(pts: &[(f64, f64)], s: f64) -> (f64, f64) {
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let seg = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
        if acc + seg >= s && seg > 0.0 {
            let f = ((s - acc) / seg).clamp(0.0, 1.0);
            return (w[0].0 + f * (w[1].0 - w[0].0), w[0].1 + f * (w[1].1 - w[0].1));
        }
        acc += seg;
    }
    *pts.last().expect("non-empty polyline")
}

/// Build the synthetic meandering reach described by `spec`.
pub fn build_synthetic_reach(spec: &CaseSpec) -> Result<DomainCase> {
    let grid = RasterGrid::new(spec.nx, spec.ny, spec.dx, 0.5 * spec.dx, 0.5 * spec.dx)?;
    if spec.channel_width < 3.0 * spec.dx {
        return Err(OsseError::invalid(format!(
            "channel unresolvable: width {} m is below 3 cells of {} m",
            spec.channel_width, spec.dx
        )));
    }
    if !(spec.valley_slope > 0.0) {
        return Err(OsseError::invalid("valley slope must be positive"));
    }
    if !(spec.channel_depth > 0.0) || spec.lateral_slope < 0.0 || spec.sinuosity < 0.0 {
        return Err(OsseError::invalid("channel depth, lateral slope and sinuosity must be non-negative"));
    }
    if spec.friction_zones < 3 {
        return Err(OsseError::invalid("at least 3 friction zones are required"));
    }
    if spec.subdomains < 2 {
        return Err(OsseError::invalid("at least 2 floodplain subdomains are required"));
    }
    if spec.friction_zones > spec.nx || spec.subdomains > spec.nx {
        return Err(OsseError::invalid("more zones than grid columns"));
    }
    if spec.stations.len() != 3 {
        return Err(OsseError::invalid("exactly 3 gauge stations are required"));
    }

    let (xmin, ymin, xmax, ymax) = grid.extent();
    let ymid = 0.5 * (ymin + ymax);
    let amp = spec.sinuosity * spec.meander_wavelength;
    let half_w = 0.5 * spec.channel_width;
    if amp + half_w + 2.0 * spec.dx > 0.5 * (ymax - ymin) {
        return Err(OsseError::invalid("meander amplitude does not fit inside the valley"));
    }
    let k = if spec.meander_wavelength > 0.0 {
        std::f64::consts::TAU / spec.meander_wavelength
    } else {
        0.0
    };
    let yc = |x: f64| ymid + amp * (k * (x - xmin)).sin();

    let step = 0.25 * spec.dx;
    let nseg = ((xmax - xmin) / step).round() as usize;
    let centerline: Vec<(f64, f64)> = (0..=nseg)
        .map(|s| {
            let x = if s == nseg { xmax } else { xmin + s as f64 * step };
            (x, yc(x))
        })
        .collect();

    let n = grid.len();
    let mut zb = vec![0.0; n];
    let mut friction_zone = vec![0; n];
    let mut subdomain = vec![0; n];
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let (x, y) = grid.center(i, j);
            let idx = grid.idx(i, j);
            let bank = spec.outlet_elevation + spec.valley_slope * (xmax - x);
            let off = (y - yc(x)).abs();
            friction_zone[idx] = spec.friction_zones * i / grid.nx;
            if off <= half_w {
                zb[idx] = bank - spec.channel_depth;
                subdomain[idx] = 0;
            } else {
                zb[idx] = bank + spec.lateral_slope * (off - half_w);
                subdomain[idx] = 1 + spec.subdomains * i / grid.nx;
            }
        }
    }

    let mut case = DomainCase {
        grid,
        zb,
        friction_zone,
        subdomain,
        centerline,
        nodes: Vec::new(),
        stations: Vec::new(),
    };
    let length = case.centerline_length();
    for st in &spec.stations {
        if !(0.0..=1.0).contains(&st.fraction) {
            return Err(OsseError::invalid(format!("station {} fraction out of [0, 1]", st.name)));
        }
        let (x, y) = point_at_arclength(&case.centerline, st.fraction * length);
        let cell = case.grid.locate_cell(x, y)?;
        if !case.is_channel(case.grid.idx(cell.0, cell.1)) {
            return Err(OsseError::invalid(format!("station {} is not on a riverbed cell", st.name)));
        }
        case.stations.push(GaugeStation {
            name: st.name.clone(),
            x,
            y,
            cell,
        });
    }
    case.nodes = extract_centerline_nodes(&case, spec.node_spacing)?;
    case.validate()?;
    Ok(case)
}

/// Straight prismatic channel covering the whole grid between walls, with
/// uniform slope and a single friction zone. Bed elevation at the outlet
/// face is `outlet_bed`.
pub fn build_flume(nx: usize, ny: usize, dx: f64, slope: f64, outlet_bed: f64) -> Result<DomainCase> {
    let grid = RasterGrid::new(nx, ny, dx, 0.5 * dx, 0.5 * dx)?;
    if !(slope >= 0.0) {
        return Err(OsseError::invalid("flume slope must be non-negative"));
    }
    let (xmin, ymin, xmax, ymax) = grid.extent();
    let ymid = 0.5 * (ymin + ymax);
    let zb = (0..grid.len())
        .map(|k| {
            let (i, j) = grid.ij(k);
            outlet_bed + slope * (xmax - grid.center(i, j).0)
        })
        .collect();
    let case = DomainCase {
        grid,
        zb,
        friction_zone: vec![0; grid.len()],
        subdomain: vec![0; grid.len()],
        centerline: vec![(xmin, ymid), (xmax, ymid)],
        nodes: Vec::new(),
        stations: Vec::new(),
    };
    case.validate()?;
    Ok(case)
}

/// Resample the centerline at fixed arc-length spacing, starting half a
/// spacing from the upstream end.
pub fn extract_centerline_nodes(case: &DomainCase, node_spacing: f64) -> Result<Vec<NodePoint>> {
    if !(node_spacing >= 2.0 * case.grid.dx) {
        return Err(OsseError::invalid(format!(
            "node spacing {node_spacing} m is below two cells"
        )));
    }
    let length = case.centerline_length();
    let count = (length / node_spacing).floor() as usize;
    Ok((0..count)
        .map(|k| {
            let s = (k as f64 + 0.5) * node_spacing;
            let (x, y) = point_at_arclength(&case.centerline, s);
            NodePoint { node_id: k, x, y, s }
        })
        .collect())
}
