//! Skill scores: station WSE RMSE, flood-extent contingency maps and CSI,
//! plus the report that turns run directories into plot-ready tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::case::DomainCase;
use crate::error::{OsseError, Result};
use crate::grid::{read_ascii_grid, write_ascii_grid, RasterGrid, NODATA};
use crate::obs::{flood_extent, FloodExtentMap, FLOOD_THRESHOLD};
use crate::swe::fmt_time;

/// Root-mean-square error of `pred` against `truth`. The prediction is
/// linearly interpolated onto the truth times that fall inside its span.
pub fn rmse(pred: &[(f64, f64)], truth: &[(f64, f64)]) -> Result<f64> {
    if pred.is_empty() {
        return Err(OsseError::invalid("rmse: empty prediction series"));
    }
    if pred.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(OsseError::invalid("rmse: prediction times must be strictly increasing"));
    }
    let (lo, hi) = (pred[0].0, pred[pred.len() - 1].0);
    let mut sum = 0.0;
    let mut count = 0usize;
    for &(t, y) in truth {
        if t < lo || t > hi {
            continue;
        }
        let k = pred.partition_point(|p| p.0 < t);
        let p = if pred[k].0 == t {
            pred[k].1
        } else {
            let (a, b) = (pred[k - 1], pred[k]);
            a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
        };
        sum += (p - y) * (p - y);
        count += 1;
    }
    if count == 0 {
        return Err(OsseError::invalid("rmse: prediction and truth do not overlap"));
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Hit = 0,
    Miss = 1,
    FalseAlarm = 2,
    CorrectNegative = 3,
}

impl Category {
    pub fn of(pred_wet: bool, truth_wet: bool) -> Self {
        match (pred_wet, truth_wet) {
            (true, true) => Category::Hit,
            (false, true) => Category::Miss,
            (true, false) => Category::FalseAlarm,
            (false, false) => Category::CorrectNegative,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyMap {
    pub t: f64,
    /// None outside the scoring mask.
    pub cells: Vec<Option<Category>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub correct_negatives: usize,
}

pub fn contingency(pred: &FloodExtentMap, truth: &FloodExtentMap, mask: &[bool]) -> Result<ContingencyMap> {
    if pred.wet.len() != truth.wet.len() || mask.len() != truth.wet.len() {
        return Err(OsseError::invalid(format!(
            "contingency: grid mismatch ({} predicted, {} truth, {} mask cells)",
            pred.wet.len(),
            truth.wet.len(),
            mask.len()
        )));
    }
    let cells = (0..mask.len())
        .map(|k| mask[k].then(|| Category::of(pred.wet[k], truth.wet[k])))
        .collect();
    Ok(ContingencyMap { t: truth.t, cells })
}

impl ContingencyMap {
    pub fn counts(&self) -> Counts {
        let mut c = Counts::default();
        for cat in self.cells.iter().flatten() {
            match cat {
                Category::Hit => c.hits += 1,
                Category::Miss => c.misses += 1,
                Category::FalseAlarm => c.false_alarms += 1,
                Category::CorrectNegative => c.correct_negatives += 1,
            }
        }
        c
    }

    /// Codes 0 to 3, NODATA outside the mask.
    pub fn as_grid_values(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.map_or(NODATA, |c| c.code() as f64)).collect()
    }
}

/// hits / (hits + misses + false alarms); None when both maps are dry.
pub fn csi(map: &ContingencyMap) -> Option<f64> {
    let c = map.counts();
    let denom = c.hits + c.misses + c.false_alarms;
    (denom > 0).then(|| c.hits as f64 / denom as f64)
}

/// Cells scored by the contingency maps: the riverbed and every floodplain
/// subdomain.
pub fn scoring_mask(case: &DomainCase) -> Vec<bool> {
    vec![true; case.subdomain.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub stations: Vec<String>,
    /// experiment -> RMSE per station
    pub rmse: BTreeMap<String, Vec<f64>>,
    /// experiment -> (t, CSI) per evaluation time
    pub csi: BTreeMap<String, Vec<(f64, Option<f64>)>>,
    /// Run directories that could not be scored.
    pub missing: Vec<PathBuf>,
}

impl ScoreTable {
    pub fn station_mean_rmse(&self, exp: &str) -> Option<f64> {
        let v = self.rmse.get(exp)?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn csi_at(&self, exp: &str, t: f64) -> Option<f64> {
        self.csi.get(exp)?.iter().find(|(u, _)| *u == t).and_then(|(_, c)| *c)
    }
}

/// Station series `station -> [(t, wse)]` from a `stations_wse.csv` carrying
/// either a `mean` column (experiments) or a `wse` column (truth).
pub fn read_station_series(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| OsseError::parse(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| OsseError::parse(path, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (ti, si) = match (col("t"), col("station")) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(OsseError::parse(path, "missing t or station column")),
    };
    let vi = col("mean")
        .or_else(|| col("wse"))
        .ok_or_else(|| OsseError::parse(path, "missing mean or wse column"))?;
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| OsseError::parse(path, e.to_string()))?;
        let num = |i: usize| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| OsseError::parse(path, format!("{:?}: {e}", &rec[i])))
        };
        out.entry(rec[si].to_string()).or_default().push((num(ti)?, num(vi)?));
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(out)
}

/// Flood extent of a run directory at `t`: an `extent_<t>.asc` map when
/// present, else a depth grid `h_<t>.asc` thresholded at the flood depth.
fn read_extent(dir: &Path, t: f64, grid: &RasterGrid) -> Result<Option<FloodExtentMap>> {
    let tag = fmt_time(t);
    let ext = dir.join(format!("extent_{tag}.asc"));
    let depth = dir.join(format!("h_{tag}.asc"));
    let (g, wet) = if ext.exists() {
        let (g, v) = read_ascii_grid(&ext)?;
        (g, v.iter().map(|&x| x > 0.5).collect())
    } else if depth.exists() {
        let (g, v) = read_ascii_grid(&depth)?;
        (g, flood_extent(&v, t, FLOOD_THRESHOLD).wet)
    } else {
        return Ok(None);
    };
    if g.nx != grid.nx || g.ny != grid.ny {
        return Err(OsseError::invalid(format!("{}: grid does not match the case", dir.display())));
    }
    Ok(Some(FloodExtentMap { t, wet }))
}

/// Evaluation times advertised by `extent_<t>.asc` files in a directory.
fn extent_times(dir: &Path) -> Vec<f64> {
    let Ok(entries) = fs::read_dir(dir) else { return Vec::new() };
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("extent_")?.strip_suffix(".asc")?.parse::<f64>().ok()
        })
        .collect()
}

fn experiment_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Score every run directory against the truth and write the report files
/// into `out`. Runs lacking a station file are listed in `missing`.
pub fn report(runs: &[PathBuf], truth_dir: &Path, case: &DomainCase, out: &Path) -> Result<ScoreTable> {
    fs::create_dir_all(out).map_err(|e| OsseError::io(out, e))?;
    let truth = read_station_series(&truth_dir.join("stations_wse.csv"))?;
    let stations: Vec<String> = case.stations.iter().map(|s| s.name.clone()).collect();
    let mask = scoring_mask(case);
    let mut table = ScoreTable {
        stations: stations.clone(),
        rmse: BTreeMap::new(),
        csi: BTreeMap::new(),
        missing: Vec::new(),
    };
    let mut eval: BTreeSet<u64> = BTreeSet::new();
    let mut series = Vec::new();
    for dir in runs {
        let path = dir.join("stations_wse.csv");
        if !path.exists() {
            table.missing.push(dir.clone());
            continue;
        }
        eval.extend(extent_times(dir).into_iter().map(|t| t as u64));
        series.push((experiment_name(dir), dir.clone(), read_station_series(&path)?));
    }
    let eval: Vec<f64> = eval.into_iter().map(|t| t as f64).collect();

    for (name, dir, s) in &series {
        let mut row = Vec::with_capacity(stations.len());
        for st in &stations {
            let pred = s
                .get(st)
                .ok_or_else(|| OsseError::invalid(format!("{name}: no series for station {st}")))?;
            let tr = truth
                .get(st)
                .ok_or_else(|| OsseError::invalid(format!("truth: no series for station {st}")))?;
            row.push(rmse(pred, tr)?);
        }
        table.rmse.insert(name.clone(), row);
        let mut scores = Vec::new();
        for &t in &eval {
            let truth_ext = read_extent(truth_dir, t, &case.grid)?
                .ok_or_else(|| OsseError::invalid(format!("truth has no depth grid at t = {t} s")))?;
            let score = match read_extent(dir, t, &case.grid)? {
                Some(pred) => {
                    let map = contingency(&pred, &truth_ext, &mask)?;
                    write_ascii_grid(&out.join(format!("contingency_{name}_{}.asc", fmt_time(t))), &case.grid, &map.as_grid_values())?;
                    csi(&map)
                }
                None => None,
            };
            scores.push((t, score));
        }
        table.csi.insert(name.clone(), scores);
    }

    let mut s = String::from("experiment");
    for st in &stations {
        let _ = write!(s, ",{st}");
    }
    s.push_str(",mean\n");
    for (name, row) in &table.rmse {
        s.push_str(name);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", table.station_mean_rmse(name).unwrap_or(f64::NAN));
    }
    write(&out.join("scores_rmse.csv"), &s)?;

    let mut s = String::from("experiment,t,csi\n");
    for (name, row) in &table.csi {
        for (t, c) in row {
            let c = c.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{name},{t},{c}");
        }
    }
    write(&out.join("scores_csi.csv"), &s)?;

    for st in &stations {
        let mut s = String::from("t,experiment,wse,truth,anomaly\n");
        let tr = &truth[st];
        for (name, _, series) in &series {
            for &(t, y) in &series[st] {
                if let Ok(k) = tr.binary_search_by(|p| p.0.total_cmp(&t)) {
                    let _ = writeln!(s, "{t},{name},{y},{},{}", tr[k].1, y - tr[k].1);
                }
            }
        }
        write(&out.join(format!("plotdata_stations_{st}.csv")), &s)?;
    }
    Ok(table)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| OsseError::io(path, e))
}
