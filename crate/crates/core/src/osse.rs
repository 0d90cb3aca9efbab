//! Twin-experiment orchestration: truth run, synthetic observations, and the
//! cycled forecast/analysis loop for the five experiment configurations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::case::DomainCase;
use crate::control::{apply_control, column_moments, propagate, run_member, sample_prior, ControlVector, Forcing, PerturbationSpec};
use crate::enkf::{self, Toggles, WindowObs};
use crate::error::{OsseError, Result};
use crate::grid::{read_ascii_grid, write_ascii_grid};
use crate::obs::{
    self, aggregate_nodes, assign_pixels_to_nodes, flood_extent, h_swot_equiv, observe_gauges, swot_simulate, wsr_all,
    FloodExtentMap, GaugeObs, PixelCloud, Quality, SwotNodeObs, SwotNoise, WsrObs, FLOOD_THRESHOLD,
};
use crate::rng::{self, derive_seed_path};
use crate::swe::{fmt_time, wse_at, HydroState, Hydrograph, ModelInputs, RatingCurve, Solver};

const HOUR: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Experiment {
    OL,
    IDA,
    IGDA,
    RSDA,
    FDA,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [Experiment::OL, Experiment::IDA, Experiment::IGDA, Experiment::RSDA, Experiment::FDA];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::OL => "OL",
            Experiment::IDA => "IDA",
            Experiment::IGDA => "IGDA",
            Experiment::RSDA => "RSDA",
            Experiment::FDA => "FDA",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| OsseError::invalid(format!("unknown experiment {s:?}; expected OL, IDA, IGDA, RSDA or FDA")))
    }

    pub fn toggles(self) -> Toggles {
        let (in_situ, s1, swot) = match self {
            Experiment::OL => (false, false, false),
            Experiment::IDA => (true, false, false),
            Experiment::IGDA => (true, true, false),
            Experiment::RSDA => (false, true, true),
            Experiment::FDA => (true, true, true),
        };
        Toggles { in_situ, s1, swot }
    }

    /// Whether floodplain depth corrections are part of the control.
    pub fn with_dh(self) -> bool {
        !matches!(self, Experiment::OL | Experiment::IDA)
    }
}

/// Upstream forcing and numerics shared by truth and members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventConfig {
    pub duration_h: f64,
    /// Baseline hydrograph as `[hour, m3/s]` pairs.
    pub hydrograph: Vec<[f64; 2]>,
    /// Constant-inflow run before t = 0 that sets the initial state.
    pub spinup_h: f64,
    pub dt_max: f64,
    /// Strickler coefficient behind the outlet rating curve.
    pub ks_ref: f64,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self {
            duration_h: 240.0,
            hydrograph: vec![[0.0, 150.0], [60.0, 180.0], [108.0, 700.0], [150.0, 350.0], [240.0, 170.0]],
            spinup_h: 24.0,
            dt_max: 30.0,
            ks_ref: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub ks: Vec<f64>,
    pub q_mult: f64,
    /// Empty means zero in every subdomain.
    pub dh: Vec<f64>,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            ks: vec![25.0, 35.0, 28.0],
            q_mult: 1.3,
            dh: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub gauge_interval_h: f64,
    pub s1_times_h: Vec<f64>,
    pub swot_first_h: f64,
    pub swot_interval_h: f64,
    /// Flood peak and recess times used for extent scoring.
    pub eval_times_h: Vec<f64>,
    pub output_interval_h: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            gauge_interval_h: 1.0,
            s1_times_h: vec![30.0, 90.0, 102.0, 114.0, 138.0],
            swot_first_h: 18.0,
            swot_interval_h: 36.0,
            eval_times_h: vec![108.0, 132.0],
            output_interval_h: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub gauge_sigma: f64,
    pub wsr_sigma_g: f64,
    pub swot: SwotNoise,
    pub n_min: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gauge_sigma: 0.02,
            wsr_sigma_g: 0.2,
            swot: SwotNoise::default(),
            n_min: obs::DEFAULT_N_MIN,
            seed: 2021,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub ks_mean: f64,
    pub ks_std: f64,
    pub q_mean: f64,
    pub q_std: f64,
    pub dh_std: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            ks_mean: 30.0,
            ks_std: 3.0,
            q_mean: 1.0,
            q_std: 0.15,
            dh_std: 0.25,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnkfConfig {
    pub members: usize,
    pub cycle_h: f64,
    pub inflation: f64,
    /// Lower bound on observation error variances.
    pub r_floor: f64,
    pub seed: u64,
    /// Worker threads for member propagation; 0 picks the core count.
    pub threads: usize,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        Self {
            members: 20,
            cycle_h: 6.0,
            inflation: 1.0,
            r_floor: 1e-4,
            seed: 99,
            threads: 0,
        }
    }
}

/// Everything a twin experiment needs, read from one TOML file. Directory
/// entries are relative to the file's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub case_dir: PathBuf,
    pub truth_dir: PathBuf,
    pub obs_dir: PathBuf,
    pub experiment: String,
    pub event: EventConfig,
    pub truth: TruthConfig,
    pub plan: PlanConfig,
    pub noise: NoiseConfig,
    pub prior: PriorConfig,
    pub enkf: EnkfConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            case_dir: "case".into(),
            truth_dir: "truth".into(),
            obs_dir: "obs".into(),
            experiment: "FDA".into(),
            event: EventConfig::default(),
            truth: TruthConfig::default(),
            plan: PlanConfig::default(),
            noise: NoiseConfig::default(),
            prior: PriorConfig::default(),
            enkf: EnkfConfig::default(),
        }
    }
}

impl Config {
    /// Parse TOML text, applying `key.path=value` overrides first.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| OsseError::invalid(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e| OsseError::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file and resolve its directories against the file's
    /// location.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OsseError::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides).map_err(|e| match e {
            OsseError::Invalid(msg) => OsseError::parse(path, msg),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for dir in [&mut cfg.case_dir, &mut cfg.truth_dir, &mut cfg.obs_dir] {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        Experiment::parse(&self.experiment)?;
        let e = &self.event;
        if !(e.duration_h > 0.0 && e.spinup_h >= 0.0 && e.dt_max > 0.0 && e.ks_ref > 0.0) {
            return Err(OsseError::invalid("event duration, dt_max and ks_ref must be positive"));
        }
        if !(self.enkf.cycle_h > 0.0) || self.enkf.members < 2 {
            return Err(OsseError::invalid("cycle length must be positive and the ensemble needs 2 members"));
        }
        if !(self.enkf.inflation >= 1.0) || !(self.enkf.r_floor >= 0.0) {
            return Err(OsseError::invalid("inflation must be >= 1 and r_floor >= 0"));
        }
        let p = &self.plan;
        if !(p.gauge_interval_h > 0.0 && p.output_interval_h > 0.0 && p.swot_interval_h > 0.0) {
            return Err(OsseError::invalid("plan intervals must be positive"));
        }
        if !(self.noise.gauge_sigma >= 0.0 && self.noise.wsr_sigma_g > 0.0) {
            return Err(OsseError::invalid("gauge sigma must be >= 0 and WSR sigma positive"));
        }
        self.noise.swot.validate()
    }

    pub fn kind(&self) -> Experiment {
        Experiment::parse(&self.experiment).expect("validated")
    }

    pub fn cycle_len(&self) -> f64 {
        self.enkf.cycle_h * HOUR
    }

    pub fn duration(&self) -> f64 {
        self.event.duration_h * HOUR
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| OsseError::invalid(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| OsseError::invalid(format!("override {key}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Observation schedule in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PassPlan {
    pub gauge_times: Vec<f64>,
    pub s1_times: Vec<f64>,
    pub swot_times: Vec<f64>,
    /// Swath cell mask per SWOT pass.
    pub swaths: Vec<Vec<bool>>,
    pub eval_times: Vec<f64>,
    pub output_times: Vec<f64>,
}

fn regular_times(first: f64, step: f64, end: f64) -> Vec<f64> {
    let count = ((end - first) / step + 1e-9).floor() as i64;
    (0..=count.max(-1)).map(|k| first + k as f64 * step).filter(|&t| t <= end).collect()
}

impl PassPlan {
    /// Swaths alternate between the western and eastern halves of the domain.
    pub fn new(cfg: &Config, case: &DomainCase) -> Result<Self> {
        let end = cfg.duration();
        let p = &cfg.plan;
        let hours = |v: &[f64]| v.iter().map(|h| h * HOUR).collect::<Vec<_>>();
        let swot_times = regular_times(p.swot_first_h * HOUR, p.swot_interval_h * HOUR, end);
        let g = case.grid;
        let swaths = (0..swot_times.len())
            .map(|k| {
                (0..g.len())
                    .map(|c| {
                        let west = g.ij(c).0 < g.nx / 2;
                        west == (k % 2 == 0)
                    })
                    .collect()
            })
            .collect();
        let plan = Self {
            gauge_times: regular_times(0.0, p.gauge_interval_h * HOUR, end),
            s1_times: hours(&p.s1_times_h),
            swot_times,
            swaths,
            eval_times: hours(&p.eval_times_h),
            output_times: regular_times(0.0, p.output_interval_h * HOUR, end),
        };
        for (name, ts) in [
            ("gauge", &plan.gauge_times),
            ("S1", &plan.s1_times),
            ("SWOT", &plan.swot_times),
            ("evaluation", &plan.eval_times),
        ] {
            if ts.windows(2).any(|w| !(w[1] > w[0])) || ts.iter().any(|&t| !(0.0..=end).contains(&t)) {
                return Err(OsseError::invalid(format!(
                    "{name} times must be strictly increasing within the event window"
                )));
            }
        }
        Ok(plan)
    }

    /// Every time at which the truth must be archived.
    pub fn truth_times(&self) -> Vec<f64> {
        merge_times(&[&self.gauge_times, &self.s1_times, &self.swot_times, &self.eval_times, &self.output_times])
    }
}

fn merge_times(sets: &[&Vec<f64>]) -> Vec<f64> {
    let mut all: Vec<f64> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

fn contains_time(ts: &[f64], t: f64) -> Option<usize> {
    ts.binary_search_by(|x| x.total_cmp(&t)).ok()
}

/// Mean bed slope along the channel, from the lowest bed of the first and
/// last columns.
fn channel_slope(case: &DomainCase) -> f64 {
    let g = case.grid;
    let bed = |i: usize| {
        (0..g.ny)
            .map(|j| g.idx(i, j))
            .filter(|&k| case.is_channel(k))
            .map(|k| case.zb[k])
            .fold(f64::INFINITY, f64::min)
    };
    let length = case.centerline_length().max(g.dx);
    ((bed(0) - bed(g.nx - 1)) / length).max(1e-6)
}

fn channel_width(case: &DomainCase) -> f64 {
    case.inlet_cells().len().max(1) as f64 * case.grid.dx
}

/// Baseline hydrograph and the outlet rating from the reference friction.
pub fn forcing(cfg: &Config, case: &DomainCase) -> Result<Forcing> {
    let baseline = Hydrograph::new(cfg.event.hydrograph.iter().map(|p| (p[0] * HOUR, p[1])).collect())?;
    let a = cfg.event.ks_ref * channel_width(case) * channel_slope(case).sqrt();
    let outlet = RatingCurve::new(a, case.zb[case.outlet_stage_cell()], 5.0 / 3.0)?;
    Ok(Forcing {
        baseline,
        outlet,
        dt_max: cfg.event.dt_max,
    })
}

/// Initial state for control `cv`: channel filled to normal depth for the
/// initial discharge, then run at constant inflow until t = 0.
pub fn spin_up(cfg: &Config, case: &DomainCase, forcing: &Forcing, cv: &ControlVector) -> Result<HydroState> {
    let q0 = forcing.baseline.at(0.0) * cv.q_mult;
    let ks_mean = cv.ks.iter().sum::<f64>() / cv.ks.len() as f64;
    let hn = (q0 / (ks_mean * channel_width(case) * channel_slope(case).sqrt())).powf(0.6);
    let spin = cfg.event.spinup_h * HOUR;
    let mut state = HydroState::dry(case.grid.len(), -spin);
    for k in 0..state.h.len() {
        if case.is_channel(k) {
            state.h[k] = hn;
        }
    }
    let inputs = ModelInputs {
        ks: cv.ks.clone(),
        inflow: Some(Hydrograph::new(vec![(0.0, q0)])?),
        outlet: Some(forcing.outlet),
        dt_max: forcing.dt_max,
    };
    let mut solver = Solver::new(case, inputs)?;
    solver.run_observed(&mut state, 0.0, &[], |_, _| Ok(()))?;
    state.t = 0.0;
    Ok(state)
}

pub fn truth_control(cfg: &Config, case: &DomainCase) -> Result<ControlVector> {
    let (z, s) = (case.zone_count(), case.subdomain_count());
    let t = &cfg.truth;
    let dh = if t.dh.is_empty() { vec![0.0; s] } else { t.dh.clone() };
    if t.ks.len() != z || dh.len() != s {
        return Err(OsseError::invalid(format!(
            "truth control needs {z} Ks values and {s} depth corrections"
        )));
    }
    let cv = ControlVector::new(t.ks.clone(), t.q_mult, dh);
    if !cv.within_bounds() {
        return Err(OsseError::invalid("truth control lies outside the control bounds"));
    }
    Ok(cv)
}

pub fn prior_spec(cfg: &Config, case: &DomainCase, with_dh: bool) -> PerturbationSpec {
    let (z, s) = (case.zone_count(), case.subdomain_count());
    let p = &cfg.prior;
    PerturbationSpec {
        mean: ControlVector::new(vec![p.ks_mean; z], p.q_mean, vec![0.0; s]),
        std: ControlVector::new(vec![p.ks_std; z], p.q_std, vec![p.dh_std; s]),
        seed: p.seed,
        with_dh,
    }
}

/// Depth snapshots of the reference run.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthOutput {
    pub control: ControlVector,
    pub times: Vec<f64>,
    pub depths: Vec<Vec<f64>>,
}

impl TruthOutput {
    pub fn state_at(&self, t: f64) -> Result<HydroState> {
        let k = contains_time(&self.times, t)
            .ok_or_else(|| OsseError::invalid(format!("truth has no snapshot at t = {t} s")))?;
        Ok(HydroState {
            t,
            h: self.depths[k].clone(),
            qx: vec![0.0; self.depths[k].len()],
            qy: vec![0.0; self.depths[k].len()],
        })
    }

    /// `(t, station, wse)` rows for every archived time.
    pub fn station_series(&self, case: &DomainCase) -> Vec<(f64, String, f64)> {
        let mut rows = Vec::new();
        for (t, h) in self.times.iter().zip(&self.depths) {
            for st in &case.stations {
                let k = case.grid.idx(st.cell.0, st.cell.1);
                rows.push((*t, st.name.clone(), case.zb[k] + h[k]));
            }
        }
        rows
    }

    /// Flooded fraction of floodplain cells at the wettest archived time.
    pub fn peak_flooded_fraction(&self, case: &DomainCase) -> (f64, f64) {
        let plain = case.subdomain.iter().filter(|&&s| s > 0).count().max(1) as f64;
        self.times
            .iter()
            .zip(&self.depths)
            .map(|(&t, h)| {
                let wet = h
                    .iter()
                    .zip(&case.subdomain)
                    .filter(|(&d, &s)| s > 0 && d >= FLOOD_THRESHOLD)
                    .count();
                (t, wet as f64 / plain)
            })
            .fold((0.0, -1.0), |a, b| if b.1 > a.1 { b } else { a })
    }

    pub fn write(&self, dir: &Path, case: &DomainCase, case_dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| OsseError::io(dir, e))?;
        for (t, h) in self.times.iter().zip(&self.depths) {
            write_ascii_grid(&dir.join(format!("h_{}.asc", fmt_time(*t))), &case.grid, h)?;
        }
        let mut s = String::from("t,station,wse\n");
        for (t, name, w) in self.station_series(case) {
            let _ = writeln!(s, "{t},{name},{w}");
        }
        write_file(&dir.join("stations_wse.csv"), &s)?;
        let manifest = TruthManifest {
            case_dir: fs::canonicalize(case_dir).unwrap_or_else(|_| case_dir.to_path_buf()),
            times: self.times.clone(),
            ks: self.control.ks.clone(),
            q_mult: self.control.q_mult,
            dh: self.control.dh.clone(),
        };
        write_file(&dir.join("truth.toml"), &toml::to_string(&manifest).expect("manifest serializes"))
    }

    /// Case directory recorded by a truth run.
    pub fn read_case_dir(dir: &Path) -> Result<PathBuf> {
        let path = dir.join("truth.toml");
        let text = fs::read_to_string(&path).map_err(|e| OsseError::io(&path, e))?;
        let m: TruthManifest = toml::from_str(&text).map_err(|e| OsseError::parse(&path, e.to_string()))?;
        Ok(m.case_dir)
    }

    pub fn read(dir: &Path) -> Result<(Self, PathBuf)> {
        let path = dir.join("truth.toml");
        let text = fs::read_to_string(&path).map_err(|e| OsseError::io(&path, e))?;
        let m: TruthManifest = toml::from_str(&text).map_err(|e| OsseError::parse(&path, e.to_string()))?;
        let depths = m
            .times
            .iter()
            .map(|t| read_ascii_grid(&dir.join(format!("h_{}.asc", fmt_time(*t)))).map(|(_, v)| v))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Self {
                control: ControlVector::new(m.ks, m.q_mult, m.dh),
                times: m.times,
                depths,
            },
            m.case_dir,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthManifest {
    case_dir: PathBuf,
    times: Vec<f64>,
    ks: Vec<f64>,
    q_mult: f64,
    dh: Vec<f64>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| OsseError::io(path, e))
}

/// One deterministic run with the true control, archived at every plan time.
pub fn run_truth(cfg: &Config, case: &DomainCase) -> Result<TruthOutput> {
    let plan = PassPlan::new(cfg, case)?;
    let control = truth_control(cfg, case)?;
    let forcing = forcing(cfg, case)?;
    let init = spin_up(cfg, case, &forcing, &control)?;
    let times = plan.truth_times();
    let run = run_member(&control, &init, case, &forcing, cfg.duration(), &times, |s| s.h.clone())?;
    Ok(TruthOutput {
        control,
        times,
        depths: run.records,
    })
}

/// All synthetic observations of one truth run.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsArchive {
    pub gauges: Vec<GaugeObs>,
    pub extents: Vec<FloodExtentMap>,
    pub wsr: Vec<WsrObs>,
    pub clouds: Vec<PixelCloud>,
    pub nodes: Vec<Vec<SwotNodeObs>>,
}

fn node_spacing(case: &DomainCase) -> f64 {
    match case.nodes.as_slice() {
        [a, b, ..] => b.s - a.s,
        _ => crate::case::DEFAULT_NODE_SPACING,
    }
}

pub fn generate_observations(cfg: &Config, case: &DomainCase, truth: &TruthOutput, plan: &PassPlan) -> Result<ObsArchive> {
    let noise = &cfg.noise;
    let mut gauge_rng = rng::stream(derive_seed_path(noise.seed, &[rng::label::GAUGE_NOISE]));
    let mut gauges = Vec::new();
    for &t in &plan.gauge_times {
        gauges.extend(observe_gauges(&truth.state_at(t)?, case, noise.gauge_sigma, &mut gauge_rng)?);
    }
    let mut extents = Vec::new();
    let mut wsr = Vec::new();
    for &t in &plan.s1_times {
        let e = flood_extent(&truth.state_at(t)?.h, t, FLOOD_THRESHOLD);
        for (s, ratio) in wsr_all(&e, case)?.into_iter().enumerate() {
            wsr.push(WsrObs { subdomain: s + 1, t, ratio, sigma_g: noise.wsr_sigma_g });
        }
        extents.push(e);
    }
    let mut clouds = Vec::new();
    let mut nodes = Vec::new();
    for (k, &t) in plan.swot_times.iter().enumerate() {
        let mut r = rng::stream(derive_seed_path(noise.seed, &[rng::label::SWOT, k as u64]));
        let mut cloud = swot_simulate(&truth.state_at(t)?, case, &plan.swaths[k], &noise.swot, &mut r)?;
        assign_pixels_to_nodes(&mut cloud, &case.nodes, &case.centerline, node_spacing(case));
        nodes.push(aggregate_nodes(&cloud, noise.n_min));
        clouds.push(cloud);
    }
    Ok(ObsArchive { gauges, extents, wsr, clouds, nodes })
}

impl ObsArchive {
    pub fn write(&self, dir: &Path, case: &DomainCase) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| OsseError::io(dir, e))?;
        obs::write_gauges(&dir.join("gauges.csv"), &self.gauges)?;
        obs::write_wsr(&dir.join("wsr_obs.csv"), &self.wsr)?;
        for e in &self.extents {
            write_ascii_grid(&dir.join(format!("extent_{}.asc", fmt_time(e.t))), &case.grid, &e.as_grid_values())?;
        }
        for (c, n) in self.clouds.iter().zip(&self.nodes) {
            obs::write_pixel_cloud(&dir.join(format!("pixel_cloud_{}.csv", fmt_time(c.t))), c)?;
            obs::write_nodes(&dir.join(format!("nodes_obs_{}.csv", fmt_time(c.t))), n)?;
        }
        let manifest = ObsManifest {
            s1_times: self.extents.iter().map(|e| e.t).collect(),
            swot_times: self.clouds.iter().map(|c| c.t).collect(),
        };
        write_file(&dir.join("obs.toml"), &toml::to_string(&manifest).expect("manifest serializes"))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("obs.toml");
        let text = fs::read_to_string(&path).map_err(|e| OsseError::io(&path, e))?;
        let m: ObsManifest = toml::from_str(&text).map_err(|e| OsseError::parse(&path, e.to_string()))?;
        let extents = m
            .s1_times
            .iter()
            .map(|&t| {
                let (_, v) = read_ascii_grid(&dir.join(format!("extent_{}.asc", fmt_time(t))))?;
                Ok(FloodExtentMap { t, wet: v.iter().map(|&x| x > 0.5).collect() })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut clouds = Vec::new();
        let mut nodes = Vec::new();
        for &t in &m.swot_times {
            let cloud = obs::read_pixel_cloud(&dir.join(format!("pixel_cloud_{}.csv", fmt_time(t))), t)?;
            nodes.push(obs::read_nodes(&dir.join(format!("nodes_obs_{}.csv", fmt_time(t))), &cloud)?);
            clouds.push(cloud);
        }
        Ok(Self {
            gauges: obs::read_gauges(&dir.join("gauges.csv"))?,
            extents,
            wsr: obs::read_wsr(&dir.join("wsr_obs.csv"))?,
            clouds,
            nodes,
        })
    }

    /// Fraction of node observations flagged good.
    pub fn good_node_fraction(&self) -> f64 {
        let all: Vec<&SwotNodeObs> = self.nodes.iter().flatten().collect();
        if all.is_empty() {
            return 0.0;
        }
        all.iter().filter(|n| n.quality == Quality::Good).count() as f64 / all.len() as f64
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ObsManifest {
    s1_times: Vec<f64>,
    swot_times: Vec<f64>,
}

/// What a member reports at one record time.
#[derive(Debug, Clone)]
struct Record {
    t: f64,
    stations: Vec<f64>,
    wsr: Option<Vec<f64>>,
    swot: Option<Vec<Option<f64>>>,
    depth: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationRow {
    pub t: f64,
    pub station: String,
    pub mean: f64,
    pub std: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlRow {
    pub cycle: usize,
    pub element: String,
    pub mean: f64,
    pub std: f64,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub experiment: Experiment,
    pub stations: Vec<StationRow>,
    pub controls: Vec<ControlRow>,
    /// Ensemble-mean-depth extents at the evaluation times.
    pub extents: Vec<FloodExtentMap>,
    /// `(cycle, csv)` diagnostics per analysis.
    pub analyses: Vec<(usize, String)>,
    /// `(cycle, csv)` ensemble dumps at each cycle start.
    pub ensembles: Vec<(usize, String)>,
}

impl ExperimentOutput {
    pub fn write(&self, dir: &Path, case: &DomainCase) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| OsseError::io(dir, e))?;
        let mut s = String::from("t,station,mean,std,truth\n");
        for r in &self.stations {
            let _ = writeln!(s, "{},{},{},{},{}", r.t, r.station, r.mean, r.std, r.truth);
        }
        write_file(&dir.join("stations_wse.csv"), &s)?;
        let mut s = String::from("cycle,element,mean,std,truth\n");
        for r in &self.controls {
            let _ = writeln!(s, "{},{},{},{},{}", r.cycle, r.element, r.mean, r.std, r.truth);
        }
        write_file(&dir.join("controls.csv"), &s)?;
        for e in &self.extents {
            write_ascii_grid(&dir.join(format!("extent_{}.asc", fmt_time(e.t))), &case.grid, &e.as_grid_values())?;
        }
        for (c, text) in &self.analyses {
            write_file(&dir.join(format!("analysis_{c}.csv")), text)?;
        }
        for (c, text) in &self.ensembles {
            write_file(&dir.join(format!("ensemble_{c}.csv")), text)?;
        }
        Ok(())
    }

    /// Analysed ensemble mean of one control element after the last cycle.
    pub fn final_control(&self, element: &str) -> Option<f64> {
        self.controls.iter().rev().find(|r| r.element == element).map(|r| r.mean)
    }
}

/// Observations of the archive that the experiment will use, indexed by time.
struct UsableObs<'a> {
    gauges: BTreeMap<u64, Vec<&'a GaugeObs>>,
    wsr: BTreeMap<u64, Vec<&'a WsrObs>>,
    swot: BTreeMap<u64, Vec<SwotNodeObs>>,
}

fn key(t: f64) -> u64 {
    t.to_bits()
}

impl<'a> UsableObs<'a> {
    fn new(archive: &'a ObsArchive, toggles: Toggles) -> Self {
        let mut gauges: BTreeMap<u64, Vec<&GaugeObs>> = BTreeMap::new();
        let mut wsr: BTreeMap<u64, Vec<&WsrObs>> = BTreeMap::new();
        let mut swot = BTreeMap::new();
        if toggles.in_situ {
            for g in &archive.gauges {
                gauges.entry(key(g.t)).or_default().push(g);
            }
        }
        if toggles.s1 {
            for w in &archive.wsr {
                wsr.entry(key(w.t)).or_default().push(w);
            }
        }
        if toggles.swot {
            for (c, nodes) in archive.clouds.iter().zip(&archive.nodes) {
                let good: Vec<SwotNodeObs> = nodes.iter().filter(|n| n.quality == Quality::Good).cloned().collect();
                if !good.is_empty() {
                    swot.insert(key(c.t), good);
                }
            }
        }
        Self { gauges, wsr, swot }
    }

    fn times_in(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut ts: Vec<f64> = self
            .gauges
            .keys()
            .chain(self.wsr.keys())
            .chain(self.swot.keys())
            .map(|&k| f64::from_bits(k))
            .filter(|&t| t > t0 && t <= t1)
            .collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts
    }
}

fn extract(case: &DomainCase, usable: &UsableObs, eval_times: &[f64], s: &HydroState) -> Result<Record> {
    let k = key(s.t);
    let wsr = if usable.wsr.contains_key(&k) {
        Some(wsr_all(&flood_extent(&s.h, s.t, FLOOD_THRESHOLD), case)?)
    } else {
        None
    };
    let swot = match usable.swot.get(&k) {
        Some(nodes) => Some(h_swot_equiv(s, case, nodes)?),
        None => None,
    };
    Ok(Record {
        t: s.t,
        stations: case.stations.iter().map(|st| wse_at(s, case, st.cell)).collect(),
        wsr,
        swot,
        depth: contains_time(eval_times, s.t).map(|_| s.h.clone()),
    })
}

/// Truth WSE per (time bits, station index).
fn truth_lookup(truth: &TruthOutput, case: &DomainCase) -> BTreeMap<(u64, usize), f64> {
    let mut m = BTreeMap::new();
    for (t, h) in truth.times.iter().zip(&truth.depths) {
        for (si, st) in case.stations.iter().enumerate() {
            let k = case.grid.idx(st.cell.0, st.cell.1);
            m.insert((key(*t), si), case.zb[k] + h[k]);
        }
    }
    m
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| OsseError::invalid(format!("thread pool: {e}")))
}

/// Run one experiment. OL is a single deterministic run with the prior-mean
/// control; the others cycle forecast and analysis over the event.
pub fn run_experiment(cfg: &Config, case: &DomainCase, archive: &ObsArchive, truth: &TruthOutput) -> Result<ExperimentOutput> {
    let kind = cfg.kind();
    let plan = PassPlan::new(cfg, case)?;
    let forcing = forcing(cfg, case)?;
    let spec = prior_spec(cfg, case, kind.with_dh());
    spec.validate()?;
    let init = spin_up(cfg, case, &forcing, &spec.mean)?;
    let truth_wse = truth_lookup(truth, case);
    let truth_flat = truth.control.flatten();
    let labels = ControlVector::labels(case.zone_count(), case.subdomain_count());
    let end = cfg.duration();
    let mut out = ExperimentOutput {
        experiment: kind,
        stations: Vec::new(),
        controls: Vec::new(),
        extents: Vec::new(),
        analyses: Vec::new(),
        ensembles: Vec::new(),
    };
    let push_controls = |out: &mut ExperimentOutput, cycle: usize, mean: &[f64], std: &[f64]| {
        for (j, name) in labels.iter().enumerate() {
            out.controls.push(ControlRow {
                cycle,
                element: name.clone(),
                mean: mean[j],
                std: std[j],
                truth: truth_flat[j],
            });
        }
    };
    let station_rows = |out: &mut ExperimentOutput, recs: &[&Record]| -> Result<()> {
        let t = recs[0].t;
        for (si, st) in case.stations.iter().enumerate() {
            let vals: Vec<Vec<f64>> = recs.iter().map(|r| vec![r.stations[si]]).collect();
            let (m, s) = column_moments(&vals);
            let truth = *truth_wse
                .get(&(key(t), si))
                .ok_or_else(|| OsseError::invalid(format!("truth has no snapshot at t = {t} s")))?;
            out.stations.push(StationRow { t, station: st.name.clone(), mean: m[0], std: s[0], truth });
        }
        Ok(())
    };
    let extent_of = |recs: &[&Record]| -> FloodExtentMap {
        let n = recs.len() as f64;
        let mut mean = vec![0.0; case.grid.len()];
        for r in recs {
            for (m, d) in mean.iter_mut().zip(r.depth.as_ref().expect("depth recorded")) {
                *m += d / n;
            }
        }
        flood_extent(&mean, recs[0].t, FLOOD_THRESHOLD)
    };
    let usable = UsableObs::new(archive, kind.toggles());
    let record_base = merge_times(&[&plan.output_times, &plan.eval_times]);

    if kind == Experiment::OL {
        let none = UsableObs::new(archive, Toggles::default());
        let run = run_member(&spec.mean, &init, case, &forcing, end, &record_base, |s| {
            extract(case, &none, &plan.eval_times, s)
        })?;
        let n_cycles = (end / cfg.cycle_len()).ceil() as usize;
        let zeros = vec![0.0; labels.len()];
        for c in 0..=n_cycles {
            push_controls(&mut out, c, &spec.mean.flatten(), &zeros);
        }
        let recs = run.records.into_iter().collect::<Result<Vec<Record>>>()?;
        for r in &recs {
            if contains_time(&plan.output_times, r.t).is_some() {
                station_rows(&mut out, &[r])?;
            }
            if r.depth.is_some() {
                out.extents.push(extent_of(&[r]));
            }
        }
        return Ok(out);
    }

    let pool = thread_pool(cfg.enkf.threads)?;
    let mut ens = sample_prior(&spec, cfg.enkf.members, &init)?;
    let (m0, s0) = ens.moments();
    push_controls(&mut out, 0, &m0, &s0);
    let n = ens.len();
    let cycle_len = cfg.cycle_len();
    let mut cycle = 0usize;
    let mut t0 = 0.0;
    while t0 < end {
        let t1 = ((cycle + 1) as f64 * cycle_len).min(end);
        out.ensembles.push((cycle, ens.to_csv()));
        let obs_times = usable.times_in(t0, t1);
        let mut times: Vec<f64> = merge_times(&[&record_base, &obs_times])
            .into_iter()
            .filter(|&t| t <= t1 && (t > t0 || (cycle == 0 && t == t0)))
            .collect();
        times.dedup();
        let mut runs = pool
            .install(|| propagate(&ens, case, &forcing, t1, &times, |_, s| extract(case, &usable, &plan.eval_times, s)))
            .map_err(|e| OsseError::Cycle { cycle, t: t1, source: Box::new(e) })?;
        let mut records: Vec<Vec<Record>> = Vec::with_capacity(n);
        for (m, run) in runs.iter_mut().enumerate() {
            let recs = std::mem::take(&mut run.records)
                .into_iter()
                .collect::<Result<Vec<_>>>()
                .map_err(|e| OsseError::Cycle {
                    cycle,
                    t: t1,
                    source: Box::new(OsseError::Member { member: m, source: Box::new(e) }),
                })?;
            records.push(recs);
        }
        for (ti, &t) in times.iter().enumerate() {
            let at: Vec<&Record> = records.iter().map(|r| &r[ti]).collect();
            if contains_time(&plan.output_times, t).is_some() {
                station_rows(&mut out, &at)?;
            }
            if at[0].depth.is_some() {
                out.extents.push(extent_of(&at));
            }
        }

        let mut window = WindowObs::default();
        for (ti, &t) in times.iter().enumerate() {
            if !(t > t0) {
                continue;
            }
            if let Some(gs) = usable.gauges.get(&key(t)) {
                for g in gs {
                    let si = case
                        .stations
                        .iter()
                        .position(|s| s.name == g.station)
                        .ok_or_else(|| OsseError::invalid(format!("unknown station {}", g.station)))?;
                    let eq = records.iter().map(|r| Some(r[ti].stations[si])).collect();
                    window.gauges.push((si, (*g).clone(), eq));
                }
            }
            if let Some(ws) = usable.wsr.get(&key(t)) {
                for w in ws {
                    let eq = records
                        .iter()
                        .map(|r| r[ti].wsr.as_ref().expect("wsr recorded")[w.subdomain - 1])
                        .collect();
                    window.wsr.push(((*w).clone(), eq));
                }
            }
            if let Some(nodes) = usable.swot.get(&key(t)) {
                for (k, node) in nodes.iter().enumerate() {
                    let eq = records.iter().map(|r| r[ti].swot.as_ref().expect("swot recorded")[k]).collect();
                    window.swot.push((node.clone(), eq));
                }
            }
        }

        let applied: Vec<Vec<f64>> = ens.members.iter().map(|m| m.dh.clone()).collect();
        let mut analysed = ens.members.clone();
        let x = DMatrix::from_fn(n, labels.len(), |i, j| ens.members[i].flatten()[j]);
        let x = enkf::inflate(&x, cfg.enkf.inflation)?;
        let batch = enkf::stack_sources(x, &window, usable_toggles(kind), cfg.enkf.r_floor)?;
        if batch.obs_count() > 0 {
            let seeds: Vec<u64> = (0..n)
                .map(|i| derive_seed_path(cfg.enkf.seed, &[cycle as u64, i as u64]))
                .collect();
            let xa = enkf::analysis(&batch, &seeds).map_err(|e| OsseError::Cycle { cycle, t: t1, source: Box::new(e) })?;
            for (i, cv) in analysed.iter_mut().enumerate() {
                let row: Vec<f64> = xa.row(i).iter().copied().collect();
                *cv = ControlVector::unflatten(&row, case.zone_count(), case.subdomain_count())?;
                if !kind.with_dh() {
                    cv.dh.iter_mut().for_each(|d| *d = 0.0);
                }
                cv.clip();
            }
            let xa_clipped = DMatrix::from_fn(n, labels.len(), |i, j| analysed[i].flatten()[j]);
            out.analyses.push((cycle, enkf::analysis_csv(&batch, &xa_clipped, &labels, t1)));
        }
        let rows: Vec<Vec<f64>> = analysed.iter().map(|m| m.flatten()).collect();
        let (am, as_) = column_moments(&rows);
        push_controls(&mut out, cycle + 1, &am, &as_);

        // Restart states carry the analysed correction net of what was
        // already applied; the next cycle then applies a fresh draw.
        for (i, run) in runs.into_iter().enumerate() {
            let inc: Vec<f64> = analysed[i].dh.iter().zip(&applied[i]).map(|(a, p)| a - p).collect();
            let mut cv = analysed[i].clone();
            cv.dh = inc;
            ens.states[i] = apply_control(&cv, case, &forcing, &run.restart)?.1;
            analysed[i].dh = spec.redraw_dh(i, cycle + 1);
            analysed[i].clip();
        }
        ens.members = analysed;
        t0 = t1;
        cycle += 1;
    }
    Ok(out)
}

fn usable_toggles(kind: Experiment) -> Toggles {
    kind.toggles()
}

/// Station WSE of a finished experiment as `(t, station) -> mean`.
pub fn station_means(out: &ExperimentOutput) -> Vec<(f64, String, f64)> {
    out.stations.iter().map(|r| (r.t, r.station.clone(), r.mean)).collect()
}
