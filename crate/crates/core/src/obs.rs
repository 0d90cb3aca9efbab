//! Observation operators for river gauges, SAR flood extents (wet surface
//! ratios) and wide-swath altimetry (pixel clouds aggregated to nodes).
//!
//! Each source has a truth-side generator, used once on the reference run,
//! and a member-side model equivalent evaluated on every ensemble member.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::case::{DomainCase, GaugeStation, NodePoint};
use crate::error::{OsseError, Result};
use crate::swe::{wse_at, wse_interp, HydroState};

/// Depth at which a cell counts as flooded in extents and pixel clouds.
pub const FLOOD_THRESHOLD: f64 = 0.05;
pub const DEFAULT_N_MIN: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeObs {
    pub station: String,
    pub t: f64,
    pub wse: f64,
    pub sigma: f64,
}

/// Model equivalent of a gauge: WSE at the station cell.
pub fn h_gauge(state: &HydroState, case: &DomainCase, station: &GaugeStation) -> f64 {
    wse_at(state, case, station.cell)
}

/// Noisy gauge readings of the truth at one time, one per station.
pub fn observe_gauges<R: Rng>(
    state: &HydroState,
    case: &DomainCase,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<GaugeObs>> {
    if !(sigma >= 0.0) {
        return Err(OsseError::invalid("gauge sigma must be non-negative"));
    }
    Ok(case
        .stations
        .iter()
        .map(|st| {
            let z: f64 = rng.sample(StandardNormal);
            GaugeObs {
                station: st.name.clone(),
                t: state.t,
                wse: h_gauge(state, case, st) + sigma * z,
                sigma,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloodExtentMap {
    pub t: f64,
    pub wet: Vec<bool>,
}

/// Wet where `h >= threshold`.
pub fn flood_extent(h: &[f64], t: f64, threshold: f64) -> FloodExtentMap {
    FloodExtentMap {
        t,
        wet: h.iter().map(|&d| d >= threshold).collect(),
    }
}

impl FloodExtentMap {
    pub fn as_grid_values(&self) -> Vec<f64> {
        self.wet.iter().map(|&w| if w { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsrObs {
    pub subdomain: usize,
    pub t: f64,
    pub ratio: f64,
    /// Error std in anamorphosed space.
    pub sigma_g: f64,
}

/// Wet fraction of floodplain subdomain `sub`.
pub fn wsr(extent: &FloodExtentMap, case: &DomainCase, sub: usize) -> Result<f64> {
    if sub == 0 {
        return Err(OsseError::invalid("subdomain 0 is the riverbed"));
    }
    let mut total = 0usize;
    let mut wet = 0usize;
    for (&s, &w) in case.subdomain.iter().zip(&extent.wet) {
        if s == sub {
            total += 1;
            wet += usize::from(w);
        }
    }
    if total == 0 {
        return Err(OsseError::invalid(format!("subdomain {sub} is empty")));
    }
    Ok(wet as f64 / total as f64)
}

/// Ratios for subdomains `1..=S` in order, from a single pass over the grid.
pub fn wsr_all(extent: &FloodExtentMap, case: &DomainCase) -> Result<Vec<f64>> {
    let sizes = case.subdomain_sizes();
    let mut wet = vec![0usize; sizes.len()];
    for (&s, &w) in case.subdomain.iter().zip(&extent.wet) {
        wet[s] += usize::from(w);
    }
    (1..sizes.len())
        .map(|s| {
            if sizes[s] == 0 {
                Err(OsseError::invalid(format!("subdomain {s} is empty")))
            } else {
                Ok(wet[s] as f64 / sizes[s] as f64)
            }
        })
        .collect()
}

/// Monotone piecewise-linear map from a physical variable to a standard
/// Gaussian variable, built from the empirical CDF of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Anamorphosis {
    psi: Vec<f64>,
    g: Vec<f64>,
    gmax: f64,
}

impl Anamorphosis {
    pub fn fit(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 3 {
            return Err(OsseError::invalid("anamorphosis needs at least 3 values"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(OsseError::invalid("anamorphosis values must be finite"));
        }
        let std = Normal::new(0.0, 1.0).expect("standard normal");
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut psi: Vec<f64> = Vec::new();
        let mut g: Vec<f64> = Vec::new();
        let mut k = 0;
        while k < n {
            let mut e = k;
            while e + 1 < n && sorted[e + 1] == sorted[k] {
                e += 1;
            }
            let mean_g = (k..=e)
                .map(|r| std.inverse_cdf((r as f64 + 0.5) / n as f64))
                .sum::<f64>()
                / (e - k + 1) as f64;
            psi.push(sorted[k]);
            g.push(mean_g);
            k = e + 1;
        }
        Ok(Self {
            psi,
            g,
            gmax: std.inverse_cdf(1.0 - 0.5 / n as f64),
        })
    }

    /// All ensemble values identical: the map carries no information.
    pub fn is_degenerate(&self) -> bool {
        self.psi.len() < 2
    }

    pub fn transform(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        interp_extrapolate(&self.psi, &self.g, x).clamp(-self.gmax, self.gmax)
    }

    pub fn inverse(&self, y: f64) -> f64 {
        if self.is_degenerate() {
            return self.psi[0];
        }
        interp_extrapolate(&self.g, &self.psi, y).clamp(0.0, 1.0)
    }
}

/// Piecewise-linear interpolation through strictly increasing `xs`, extended
/// linearly beyond both ends.
fn interp_extrapolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    let k = xs.partition_point(|&v| v <= x).clamp(1, n - 1);
    let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
    if x == x0 {
        return y0;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelClass {
    OpenWater,
    WaterNearLand,
    DarkWater,
    Land,
}

impl PixelClass {
    pub fn is_water(self) -> bool {
        self != PixelClass::Land
    }

    /// Classes retained by node aggregation.
    pub fn is_selected(self) -> bool {
        matches!(self, PixelClass::OpenWater | PixelClass::WaterNearLand)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub x: f64,
    pub y: f64,
    pub class: PixelClass,
    pub wse: Option<f64>,
    pub sigma: Option<f64>,
    pub node_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelCloud {
    pub t: f64,
    pub pixels: Vec<Pixel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwotNoise {
    pub sigma_open: f64,
    pub sigma_near: f64,
    pub sigma_dark: f64,
    pub dark_fraction: f64,
}

impl Default for SwotNoise {
    fn default() -> Self {
        Self {
            sigma_open: 0.5,
            sigma_near: 1.0,
            sigma_dark: 2.0,
            dark_fraction: 0.05,
        }
    }
}

impl SwotNoise {
    pub fn validate(&self) -> Result<()> {
        let s = [self.sigma_open, self.sigma_near, self.sigma_dark];
        if s.iter().any(|v| !(*v >= 0.0)) || !(0.0..=1.0).contains(&self.dark_fraction) {
            return Err(OsseError::invalid("SWOT noise sigmas must be >= 0 and dark fraction in [0, 1]"));
        }
        Ok(())
    }

    fn sigma(&self, class: PixelClass) -> f64 {
        match class {
            PixelClass::OpenWater => self.sigma_open,
            PixelClass::WaterNearLand => self.sigma_near,
            PixelClass::DarkWater => self.sigma_dark,
            PixelClass::Land => 0.0,
        }
    }
}

/// One pixel per swath cell; water where the truth depth reaches the flood
/// threshold.
pub fn swot_simulate<R: Rng>(
    state: &HydroState,
    case: &DomainCase,
    swath: &[bool],
    noise: &SwotNoise,
    rng: &mut R,
) -> Result<PixelCloud> {
    let g = case.grid;
    if swath.len() != g.len() {
        return Err(OsseError::invalid("swath mask does not match grid"));
    }
    noise.validate()?;
    let wet = |i: usize, j: usize| state.h[g.idx(i, j)] >= FLOOD_THRESHOLD;
    let mut pixels = Vec::new();
    for (k, _) in swath.iter().enumerate().filter(|(_, &s)| s) {
        let (i, j) = g.ij(k);
        let (x, y) = g.center(i, j);
        if !wet(i, j) {
            pixels.push(Pixel { x, y, class: PixelClass::Land, wse: None, sigma: None, node_id: None });
            continue;
        }
        let near_land = (i > 0 && !wet(i - 1, j))
            || (i + 1 < g.nx && !wet(i + 1, j))
            || (j > 0 && !wet(i, j - 1))
            || (j + 1 < g.ny && !wet(i, j + 1));
        let mut class = if near_land { PixelClass::WaterNearLand } else { PixelClass::OpenWater };
        let u: f64 = rng.gen();
        if u < noise.dark_fraction {
            class = PixelClass::DarkWater;
        }
        let z: f64 = rng.sample(StandardNormal);
        let sigma = noise.sigma(class);
        pixels.push(Pixel {
            x,
            y,
            class,
            wse: Some(wse_at(state, case, (i, j)) + sigma * z),
            sigma: Some(sigma),
            node_id: None,
        });
    }
    Ok(PixelCloud { t: state.t, pixels })
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - s * dx).hypot(p.1 - a.1 - s * dy)
}

fn dist_to_polyline(p: (f64, f64), line: &[(f64, f64)]) -> f64 {
    match line {
        [] => f64::INFINITY,
        [a] => (p.0 - a.0).hypot(p.1 - a.1),
        _ => line
            .windows(2)
            .map(|w| dist_to_segment(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Attach each water pixel to its nearest node when it lies within
/// `max_distance` of both the centerline and that node. Ties go to the
/// lower node id.
pub fn assign_pixels_to_nodes(cloud: &mut PixelCloud, nodes: &[NodePoint], centerline: &[(f64, f64)], max_distance: f64) {
    for px in &mut cloud.pixels {
        px.node_id = None;
        if !px.class.is_water() || nodes.is_empty() {
            continue;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        for n in nodes {
            let d = (px.x - n.x).hypot(px.y - n.y);
            if d < best.0 || (d == best.0 && n.node_id < best.1) {
                best = (d, n.node_id);
            }
        }
        if best.0 <= max_distance && dist_to_polyline((px.x, px.y), centerline) <= max_distance {
            px.node_id = Some(best.1);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Good,
    Degraded,
}

/// Pixel used by a node aggregate, with its inverse-variance weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootprintPixel {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwotNodeObs {
    pub node_id: usize,
    pub t: f64,
    pub wse: f64,
    pub sigma: f64,
    pub n_pixels: usize,
    pub quality: Quality,
    pub footprint: Vec<FootprintPixel>,
}

/// Inverse-variance weight; zero-noise pixels all get unit weight so the
/// aggregate stays a plain mean.
fn pixel_weight(sigma: f64, all_zero: bool) -> f64 {
    if all_zero {
        1.0
    } else {
        1.0 / (sigma * sigma)
    }
}

/// Inverse-variance node averages over open-water and near-land pixels.
/// Nodes are emitted in id order; nodes without selected pixels are skipped.
pub fn aggregate_nodes(cloud: &PixelCloud, n_min: usize) -> Vec<SwotNodeObs> {
    let mut groups: std::collections::BTreeMap<usize, Vec<&Pixel>> = Default::default();
    for px in &cloud.pixels {
        if let (Some(id), true, Some(_)) = (px.node_id, px.class.is_selected(), px.wse) {
            groups.entry(id).or_default().push(px);
        }
    }
    groups
        .into_iter()
        .map(|(node_id, pxs)| {
            let all_zero = pxs.iter().all(|p| p.sigma.unwrap_or(0.0) == 0.0);
            if !all_zero && pxs.iter().any(|p| !(p.sigma.unwrap_or(0.0) > 0.0)) {
                // Mixed zero and positive sigmas: the exact pixels dominate.
                let exact: Vec<&Pixel> = pxs.iter().copied().filter(|p| p.sigma == Some(0.0)).collect();
                return node_from(node_id, cloud.t, &exact, true, n_min, pxs.len());
            }
            node_from(node_id, cloud.t, &pxs, all_zero, n_min, pxs.len())
        })
        .collect()
}

fn node_from(node_id: usize, t: f64, pxs: &[&Pixel], all_zero: bool, n_min: usize, n_sel: usize) -> SwotNodeObs {
    let footprint: Vec<FootprintPixel> = pxs
        .iter()
        .map(|p| FootprintPixel { x: p.x, y: p.y, weight: pixel_weight(p.sigma.unwrap_or(0.0), all_zero) })
        .collect();
    let wsum: f64 = footprint.iter().map(|f| f.weight).sum();
    let wse = pxs
        .iter()
        .zip(&footprint)
        .map(|(p, f)| f.weight * p.wse.unwrap_or(f64::NAN))
        .sum::<f64>()
        / wsum;
    SwotNodeObs {
        node_id,
        t,
        wse,
        sigma: if all_zero { 0.0 } else { (1.0 / wsum).sqrt() },
        n_pixels: n_sel,
        quality: if n_sel < n_min { Quality::Degraded } else { Quality::Good },
        footprint,
    }
}

/// Member equivalents of node observations: weighted mean of interpolated
/// WSE over the truth footprint. Dry footprint pixels are dropped; `None`
/// when more than half of them are dry.
pub fn h_swot_equiv(state: &HydroState, case: &DomainCase, nodes: &[SwotNodeObs]) -> Result<Vec<Option<f64>>> {
    nodes
        .iter()
        .map(|n| {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut dry = 0usize;
            for f in &n.footprint {
                match wse_interp(state, case, f.x, f.y)? {
                    Some(w) => {
                        num += f.weight * w;
                        den += f.weight;
                    }
                    None => dry += 1,
                }
            }
            Ok(if 2 * dry > n.footprint.len() || den == 0.0 {
                None
            } else {
                Some(num / den)
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRow {
    node_id: usize,
    wse: f64,
    sigma: f64,
    n_pixels: usize,
    quality: Quality,
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| OsseError::invalid(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| OsseError::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| OsseError::io(path, e))?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| OsseError::parse(path, e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| OsseError::io(path, e))
}

pub fn write_gauges(path: &Path, obs: &[GaugeObs]) -> Result<()> {
    write_text(path, &csv_string(obs)?)
}

pub fn read_gauges(path: &Path) -> Result<Vec<GaugeObs>> {
    csv_read(path)
}

pub fn write_wsr(path: &Path, obs: &[WsrObs]) -> Result<()> {
    write_text(path, &csv_string(obs)?)
}

pub fn read_wsr(path: &Path) -> Result<Vec<WsrObs>> {
    csv_read(path)
}

pub fn write_pixel_cloud(path: &Path, cloud: &PixelCloud) -> Result<()> {
    write_text(path, &csv_string(&cloud.pixels)?)
}

pub fn read_pixel_cloud(path: &Path, t: f64) -> Result<PixelCloud> {
    Ok(PixelCloud { t, pixels: csv_read(path)? })
}

pub fn write_nodes(path: &Path, nodes: &[SwotNodeObs]) -> Result<()> {
    write_text(
        path,
        &csv_string(nodes.iter().map(|n| NodeRow {
            node_id: n.node_id,
            wse: n.wse,
            sigma: n.sigma,
            n_pixels: n.n_pixels,
            quality: n.quality,
        }))?,
    )
}

/// Node observations with footprints rebuilt from the pixel cloud of the
/// same pass.
pub fn read_nodes(path: &Path, cloud: &PixelCloud) -> Result<Vec<SwotNodeObs>> {
    let rows: Vec<NodeRow> = csv_read(path)?;
    let rebuilt = aggregate_nodes(cloud, DEFAULT_N_MIN);
    rows.into_iter()
        .map(|r| {
            let fp = rebuilt
                .iter()
                .find(|n| n.node_id == r.node_id)
                .ok_or_else(|| OsseError::parse(path, format!("node {} has no pixels in the cloud", r.node_id)))?;
            Ok(SwotNodeObs {
                node_id: r.node_id,
                t: cloud.t,
                wse: r.wse,
                sigma: r.sigma,
                n_pixels: r.n_pixels,
                quality: r.quality,
                footprint: fp.footprint.clone(),
            })
        })
        .collect()
}
