//! First-order finite-volume solver for the 2D shallow-water equations.
//!
//! Interface fluxes use the Rusanov (local Lax-Friedrichs) approximate Riemann
//! solver applied to hydrostatically reconstructed states, which keeps a lake
//! at rest exactly at rest over arbitrary bathymetry. Bed friction follows
//! Strickler's law with a semi-implicit update. Depth positivity is enforced
//! by scaling the outgoing fluxes of any cell that would otherwise drain below
//! zero, so mass is never clipped.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::case::DomainCase;
use crate::error::{OsseError, Result};

pub const GRAVITY: f64 = 9.81;
/// Depth below which a cell carries no momentum.
pub const H_DRY: f64 = 1e-3;
pub const CFL: f64 = 0.7;
pub const KS_MIN: f64 = 5.0;
pub const KS_MAX: f64 = 60.0;
const DT_UNDERFLOW: f64 = 1e-6;
/// Outflow from a cell is capped slightly below its content so that the
/// depth update can never round below zero.
const DRAIN_MARGIN: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HydroState {
    pub t: f64,
    pub h: Vec<f64>,
    pub qx: Vec<f64>,
    pub qy: Vec<f64>,
}

impl HydroState {
    pub fn dry(n: usize, t: f64) -> Self {
        Self {
            t,
            h: vec![0.0; n],
            qx: vec![0.0; n],
            qy: vec![0.0; n],
        }
    }

    /// Still water at elevation `eta` wherever the bed lies below it.
    pub fn lake_at_rest(case: &DomainCase, eta: f64) -> Self {
        let mut s = Self::dry(case.grid.len(), 0.0);
        for (h, &z) in s.h.iter_mut().zip(&case.zb) {
            *h = (eta - z).max(0.0);
        }
        s
    }

    pub fn volume(&self, cell_area: f64) -> f64 {
        self.h.iter().sum::<f64>() * cell_area
    }
}

/// Upstream discharge as piecewise-linear breakpoints, held constant outside
/// the breakpoint range.
#[derive(Debug, Clone, PartialEq)]
pub struct Hydrograph {
    points: Vec<(f64, f64)>,
}

impl Hydrograph {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(OsseError::invalid("hydrograph has no breakpoints"));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(OsseError::invalid("hydrograph times must be strictly increasing"));
        }
        if points.iter().any(|&(_, q)| !(q > 0.0 && q.is_finite())) {
            return Err(OsseError::invalid("hydrograph discharge must be positive"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn at(&self, t: f64) -> f64 {
        let p = &self.points;
        if t <= p[0].0 {
            return p[0].1;
        }
        if t >= p[p.len() - 1].0 {
            return p[p.len() - 1].1;
        }
        let k = p.partition_point(|&(tk, _)| tk <= t);
        let (t0, q0) = p[k - 1];
        let (t1, q1) = p[k];
        q0 + (q1 - q0) * (t - t0) / (t1 - t0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self.points.iter().map(|&(t, q)| (t, q * factor)).collect(),
        }
    }

    /// Exact integral of the piecewise-linear discharge over `[t0, t1]`.
    pub fn volume(&self, t0: f64, t1: f64) -> f64 {
        let mut knots = vec![t0];
        knots.extend(self.points.iter().map(|p| p.0).filter(|&t| t > t0 && t < t1));
        knots.push(t1);
        knots
            .windows(2)
            .map(|w| 0.5 * (self.at(w[0]) + self.at(w[1])) * (w[1] - w[0]))
            .sum()
    }

    pub fn peak(&self) -> (f64, f64) {
        self.points
            .iter()
            .copied()
            .fold((0.0, f64::MIN), |a, p| if p.1 > a.1 { p } else { a })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_s,Q_m3s\n");
        for (t, q) in &self.points {
            let _ = writeln!(s, "{t},{q}");
        }
        s
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OsseError::io(path, e))?;
        let mut pts = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let mut it = line.split(',');
            let mut next = || -> Result<f64> {
                it.next()
                    .ok_or_else(|| OsseError::parse(path, format!("short row: {line}")))?
                    .trim()
                    .parse()
                    .map_err(|e| OsseError::parse(path, format!("{line}: {e}")))
            };
            pts.push((next()?, next()?));
        }
        Self::new(pts)
    }
}

/// Stage-discharge relation `Q = a * max(stage - h0, 0)^b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingCurve {
    pub a: f64,
    pub h0: f64,
    pub b: f64,
}

impl RatingCurve {
    pub fn new(a: f64, h0: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(OsseError::invalid("rating curve needs a > 0 and b > 0"));
        }
        Ok(Self { a, h0, b })
    }

    pub fn discharge(&self, stage: f64) -> f64 {
        self.a * (stage - self.h0).max(0.0).powf(self.b)
    }
}

/// Everything the solver needs besides the state.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    /// Strickler coefficient per friction zone.
    pub ks: Vec<f64>,
    /// `None` closes the upstream boundary.
    pub inflow: Option<Hydrograph>,
    /// `None` closes the downstream boundary.
    pub outlet: Option<RatingCurve>,
    pub dt_max: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MassLedger {
    pub inflow: f64,
    pub outflow: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub t: f64,
    pub inflow_m3: f64,
    pub outflow_m3: f64,
    pub storage_m3: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub snapshots: Vec<HydroState>,
    pub ledger: Vec<LedgerRow>,
    pub steps: usize,
}

impl RunOutput {
    /// Write `h_<t>.asc` per snapshot plus `ledger.csv`.
    pub fn write(&self, dir: &Path, case: &DomainCase) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| OsseError::io(dir, e))?;
        for s in &self.snapshots {
            crate::grid::write_ascii_grid(&dir.join(format!("h_{}.asc", fmt_time(s.t))), &case.grid, &s.h)?;
        }
        let p = dir.join("ledger.csv");
        fs::write(&p, ledger_csv(&self.ledger)).map_err(|e| OsseError::io(p, e))
    }
}

pub fn ledger_csv(rows: &[LedgerRow]) -> String {
    let mut s = String::from("t,inflow_m3,outflow_m3,storage_m3\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.t, r.inflow_m3, r.outflow_m3, r.storage_m3);
    }
    s
}

/// Time label used in output file names (whole seconds).
pub fn fmt_time(t: f64) -> String {
    format!("{}", t.round() as i64)
}

/// Inclusive row range `(lo, hi)` of a column, or `None`.
type Span = Option<(usize, usize)>;

/// Rows at or above `H_DRY`. NaN counts as active so the sanity check
/// still reaches it.
fn active_rows(col: &[f64]) -> Span {
    let active = |v: &f64| !(*v < H_DRY);
    col.iter()
        .position(active)
        .map(|lo| (lo, col.iter().rposition(active).unwrap()))
}

fn span_union(a: Span, b: Span) -> Span {
    match (a, b) {
        (Some((a0, a1)), Some((b0, b1))) => Some((a0.min(b0), a1.max(b1))),
        (x, None) | (None, x) => x,
    }
}

/// Per-cell sweep quantities, one row of cells.
struct CellRow<'a> {
    un: &'a mut [f64],
    ut: &'a mut [f64],
    sp: &'a mut [f64],
}

/// Interface fluxes for one row of faces: mass, normal and tangential
/// momentum, and the reconstructed pressure on each side.
struct FaceRow<'a> {
    fh: &'a mut [f64],
    fm: &'a mut [f64],
    ft: &'a mut [f64],
    pl: &'a mut [f64],
    pr: &'a mut [f64],
}

struct FaceView<'a> {
    fh: &'a [f64],
    fm: &'a [f64],
    ft: &'a [f64],
    pl: &'a [f64],
    pr: &'a [f64],
}

#[derive(Default)]
struct FaceBuf {
    fh: Vec<f64>,
    fm: Vec<f64>,
    ft: Vec<f64>,
    pl: Vec<f64>,
    pr: Vec<f64>,
}

impl FaceBuf {
    fn new(n: usize) -> Self {
        Self {
            fh: vec![0.0; n],
            fm: vec![0.0; n],
            ft: vec![0.0; n],
            pl: vec![0.0; n],
            pr: vec![0.0; n],
        }
    }

    fn row(&mut self, at: usize, n: usize) -> FaceRow<'_> {
        FaceRow {
            fh: &mut self.fh[at..at + n],
            fm: &mut self.fm[at..at + n],
            ft: &mut self.ft[at..at + n],
            pl: &mut self.pl[at..at + n],
            pr: &mut self.pr[at..at + n],
        }
    }

    fn view(&self, at: usize, n: usize) -> FaceView<'_> {
        FaceView {
            fh: &self.fh[at..at + n],
            fm: &self.fm[at..at + n],
            ft: &self.ft[at..at + n],
            pl: &self.pl[at..at + n],
            pr: &self.pr[at..at + n],
        }
    }

    fn zero(&mut self, at: usize) {
        for v in [&mut self.fh, &mut self.fm, &mut self.ft, &mut self.pl, &mut self.pr] {
            v[at] = 0.0;
        }
    }
}

#[derive(Default)]
struct CellBuf {
    un: Vec<f64>,
    ut: Vec<f64>,
    sp: Vec<f64>,
    th: Vec<f64>,
}

impl CellBuf {
    fn new(n: usize) -> Self {
        Self {
            un: vec![0.0; n],
            ut: vec![0.0; n],
            sp: vec![0.0; n],
            th: vec![1.0; n],
        }
    }

    fn row(&mut self, at: usize, n: usize) -> CellRow<'_> {
        CellRow {
            un: &mut self.un[at..at + n],
            ut: &mut self.ut[at..at + n],
            sp: &mut self.sp[at..at + n],
        }
    }
}

/// Velocities and wave speed `|un| + sqrt(g h)`; cells thinner than
/// `H_DRY` carry no velocity.
fn load_row(h: &[f64], qn: &[f64], qt: &[f64], out: CellRow<'_>) {
    let n = h.len();
    let (qn, qt) = (&qn[..n], &qt[..n]);
    let (un, ut, sp) = (&mut out.un[..n], &mut out.ut[..n], &mut out.sp[..n]);
    for k in 0..n {
        let hk = h[k];
        let wet = hk >= H_DRY;
        let inv = 1.0 / hk.max(H_DRY);
        let a = if wet { qn[k] * inv } else { 0.0 };
        let b = if wet { qt[k] * inv } else { 0.0 };
        un[k] = a;
        ut[k] = b;
        sp[k] = a.abs() + (GRAVITY * hk).sqrt();
    }
}

/// Rusanov fluxes between hydrostatically reconstructed left and right
/// states. Faces with no cell at or above `H_DRY` carry nothing.
#[allow(clippy::too_many_arguments)]
fn rusanov_row(
    hl: &[f64],
    hr: &[f64],
    zl: &[f64],
    zr: &[f64],
    (unl, utl, spl): (&[f64], &[f64], &[f64]),
    (unr, utr, spr): (&[f64], &[f64], &[f64]),
    out: FaceRow<'_>,
) {
    let n = hl.len();
    let (hr, zl, zr) = (&hr[..n], &zl[..n], &zr[..n]);
    let (unl, utl, spl) = (&unl[..n], &utl[..n], &spl[..n]);
    let (unr, utr, spr) = (&unr[..n], &utr[..n], &spr[..n]);
    let (fh, fm, ft) = (&mut out.fh[..n], &mut out.fm[..n], &mut out.ft[..n]);
    let (opl, opr) = (&mut out.pl[..n], &mut out.pr[..n]);
    let half_g = 0.5 * GRAVITY;
    for k in 0..n {
        // a face between two cells below the wet/dry threshold is inactive
        let on = if hl[k] >= H_DRY || hr[k] >= H_DRY { 1.0 } else { 0.0 };
        let zs = zl[k].max(zr[k]);
        let a = on * (hl[k] + zl[k] - zs).max(0.0);
        let b = on * (hr[k] + zr[k] - zs).max(0.0);
        let s = spl[k].max(spr[k]);
        let (ql, qr) = (a * unl[k], b * unr[k]);
        let (pl, pr) = (half_g * a * a, half_g * b * b);
        fh[k] = 0.5 * (ql + qr) - 0.5 * s * (b - a);
        fm[k] = 0.5 * (ql * unl[k] + pl + qr * unr[k] + pr) - 0.5 * s * (qr - ql);
        ft[k] = 0.5 * (ql * utl[k] + qr * utr[k]) - 0.5 * s * (b * utr[k] - a * utl[k]);
        opl[k] = pl;
        opr[k] = pr;
    }
}

/// Positivity factor: the share of each cell's unlimited outgoing depth it
/// can actually supply. `extra` is outgoing boundary depth.
fn limit_row(h: &[f64], fh_low: &[f64], fh_high: &[f64], extra: &[f64], k_dt: f64, th: &mut [f64]) {
    let n = h.len();
    let (fl, fr, extra, th) = (&fh_low[..n], &fh_high[..n], &extra[..n], &mut th[..n]);
    for k in 0..n {
        let raw = k_dt * (fr[k].max(0.0) - fl[k].min(0.0)) + extra[k];
        let avail = h[k] * DRAIN_MARGIN;
        th[k] = if raw > avail { avail / raw } else { 1.0 };
    }
}

/// Boundary contributions for one row of cells, in depth and discharge.
struct Extra<'a> {
    loss: &'a [f64],
    gain: &'a [f64],
    dqn: &'a [f64],
}

/// Conservative update of one row of cells from its low and high faces,
/// each flux scaled by its donor's positivity factor.
#[allow(clippy::too_many_arguments)]
fn update_row(
    h: &mut [f64],
    qn: &mut [f64],
    qt: &mut [f64],
    low: FaceView<'_>,
    high: FaceView<'_>,
    (th_low, th_self, th_high): (&[f64], &[f64], &[f64]),
    extra: Extra<'_>,
    k_dt: f64,
) {
    let n = h.len();
    let (qn, qt) = (&mut qn[..n], &mut qt[..n]);
    let (lfh, lfm, lft, lpr) = (&low.fh[..n], &low.fm[..n], &low.ft[..n], &low.pr[..n]);
    let (hfh, hfm, hft, hpl) = (&high.fh[..n], &high.fm[..n], &high.ft[..n], &high.pl[..n]);
    let (tl, ts, th) = (&th_low[..n], &th_self[..n], &th_high[..n]);
    let (el, eg, eq) = (&extra.loss[..n], &extra.gain[..n], &extra.dqn[..n]);
    for k in 0..n {
        let sl = if lfh[k] > 0.0 { tl[k] } else { ts[k] };
        let sh = if hfh[k] > 0.0 { ts[k] } else { th[k] };
        let ml = sl * lfh[k] * k_dt;
        let mh = sh * hfh[k] * k_dt;
        let loss = mh.max(0.0) - ml.min(0.0) + el[k];
        let gain = ml.max(0.0) - mh.min(0.0) + eg[k];
        h[k] = (h[k] - loss) + gain;
        qn[k] += k_dt * ((sl * lfm[k] - lpr[k]) - (sh * hfm[k] - hpl[k])) + eq[k];
        qt[k] += k_dt * (sl * lft[k] - sh * hft[k]);
    }
}

/// Reflective wall momentum flux (net of the cell's own pressure) on a
/// face at the high side of the cell (east, north).
#[inline]
fn wall_hi(h: f64, un: f64, sp: f64) -> f64 {
    -(h * un * un + sp * h * un)
}

/// Same for a face on the low side (west, south).
#[inline]
fn wall_lo(h: f64, un: f64, sp: f64) -> f64 {
    h * un * un - sp * h * un
}

/// Column slots kept alive by the x-sweep pipeline.
const RING: usize = 4;

/// A solver instance bound to one case and one set of inputs. It owns its
/// scratch buffers and is not shared between threads.
///
/// Each step is dimensionally split: an x sweep, then a y sweep with the
/// same time step, then the friction update. The x sweep streams over
/// columns; a column is updated once the positivity factors of both
/// neighbours are known, and its y sweep and friction follow at once.
pub struct Solver<'c> {
    case: &'c DomainCase,
    inputs: ModelInputs,
    /// `g / Ks^2` per cell.
    fric: Vec<f64>,
    inlet: Vec<usize>,
    stage_cell: usize,
    pub ledger: MassLedger,
    /// Wet rows per column at step start.
    span: Vec<Span>,
    /// Nested row sets of the x sweep: updated rows, rows needing a
    /// positivity factor, face rows (east of the column) and loaded rows.
    upd: Vec<Span>,
    lim: Vec<Span>,
    fac: Vec<Span>,
    lod: Vec<Span>,
    xcell: CellBuf,
    xface: FaceBuf,
    /// y-sweep cells; `th` is offset by one row so the rows below and above
    /// the active range have slots.
    ycell: CellBuf,
    /// y-sweep faces; entry `j` is the face below row `j`.
    yface: FaceBuf,
    zeros: Vec<f64>,
    eloss: Vec<f64>,
    egain: Vec<f64>,
    edqn: Vec<f64>,
    /// Boundary discharge per row (m^3/s).
    west: Vec<f64>,
    east: Vec<f64>,
}

impl<'c> Solver<'c> {
    pub fn new(case: &'c DomainCase, inputs: ModelInputs) -> Result<Self> {
        let zones = case.zone_count();
        if inputs.ks.len() != zones {
            return Err(OsseError::invalid(format!(
                "expected {zones} friction coefficients, got {}",
                inputs.ks.len()
            )));
        }
        if inputs.ks.iter().any(|k| !(*k >= KS_MIN && *k <= KS_MAX)) {
            return Err(OsseError::invalid(format!(
                "Strickler coefficients must lie in [{KS_MIN}, {KS_MAX}]: {:?}",
                inputs.ks
            )));
        }
        if !(inputs.dt_max > 0.0) {
            return Err(OsseError::invalid("dt_max must be positive"));
        }
        let (nx, ny) = (case.grid.nx, case.grid.ny);
        let fric = case
            .friction_zone
            .iter()
            .map(|&z| GRAVITY / (inputs.ks[z] * inputs.ks[z]))
            .collect();
        Ok(Self {
            case,
            fric,
            inlet: case.inlet_cells(),
            stage_cell: case.outlet_stage_cell(),
            inputs,
            ledger: MassLedger::default(),
            span: vec![None; nx],
            upd: vec![None; nx],
            lim: vec![None; nx],
            fac: vec![None; nx],
            lod: vec![None; nx],
            xcell: CellBuf::new(RING * ny),
            xface: FaceBuf::new(RING * ny),
            ycell: CellBuf::new(ny + 2),
            yface: FaceBuf::new(ny + 1),
            zeros: vec![0.0; ny],
            eloss: vec![0.0; ny],
            egain: vec![0.0; ny],
            edqn: vec![0.0; ny],
            west: vec![0.0; ny],
            east: vec![0.0; ny],
        })
    }

    pub fn inputs(&self) -> &ModelInputs {
        &self.inputs
    }

    /// Wet spans, x-sweep row sets and the largest directional wave speed.
    fn prepare(&mut self, state: &HydroState) -> f64 {
        let g = self.case.grid;
        let (nx, ny) = (g.nx, g.ny);
        let mut smax: f64 = 0.0;
        for i in 0..nx {
            let base = i * ny;
            let col = &state.h[base..base + ny];
            self.span[i] = active_rows(col);
            if let Some((lo, hi)) = self.span[i] {
                let r = base + lo..base + hi + 1;
                for ((&h, &qx), &qy) in state.h[r.clone()].iter().zip(&state.qx[r.clone()]).zip(&state.qy[r]) {
                    let c = (GRAVITY * h).sqrt();
                    let u = if h >= H_DRY { qx.abs().max(qy.abs()) / h } else { 0.0 };
                    smax = smax.max(u + c);
                }
            }
        }
        let window = |src: &[Span], i: usize| {
            let mut r = src[i];
            if i > 0 {
                r = span_union(r, src[i - 1]);
            }
            if i + 1 < nx {
                r = span_union(r, src[i + 1]);
            }
            r
        };
        for i in 0..nx {
            self.upd[i] = window(&self.span, i);
        }
        if self.inputs.inflow.is_some() {
            for &k in &self.inlet {
                let j = g.ij(k).1;
                self.upd[0] = span_union(self.upd[0], Some((j, j)));
            }
        }
        for i in 0..nx {
            self.lim[i] = window(&self.upd, i);
        }
        for i in 0..nx {
            self.fac[i] = if i + 1 < nx { span_union(self.lim[i], self.lim[i + 1]) } else { self.lim[i] };
        }
        for i in 0..nx {
            self.lod[i] = if i > 0 { span_union(self.fac[i - 1], self.fac[i]) } else { self.fac[i] };
        }
        smax
    }

    /// Upstream and downstream boundary discharges for this step.
    fn boundary_rates(&mut self, state: &HydroState, dt: f64) {
        let g = self.case.grid;
        self.west.fill(0.0);
        self.east.fill(0.0);
        if let Some(hg) = &self.inputs.inflow {
            let q = hg.at(state.t + 0.5 * dt);
            let total: f64 = self.inlet.iter().map(|&k| conveyance_weight(state.h[k])).sum();
            for &k in &self.inlet {
                let share = if total > 0.0 {
                    conveyance_weight(state.h[k]) / total
                } else {
                    1.0 / self.inlet.len() as f64
                };
                self.west[g.ij(k).1] = q * share;
            }
        }
        if let Some(rc) = &self.inputs.outlet {
            let stage = state.h[self.stage_cell] + self.case.zb[self.stage_cell];
            let q = rc.discharge(stage);
            let col = &state.h[g.idx(g.nx - 1, 0)..];
            let total: f64 = col.iter().map(|&h| conveyance_weight(h)).sum();
            if q > 0.0 && total > 0.0 {
                for (e, &h) in self.east.iter_mut().zip(col) {
                    *e = q * conveyance_weight(h) / total;
                }
            }
        }
    }

    /// Advance `state` by one step no longer than `dt_cap`; returns the step taken.
    pub fn step(&mut self, state: &mut HydroState, dt_cap: f64) -> Result<f64> {
        let g = self.case.grid;
        let nx = g.nx;
        let smax = self.prepare(state);
        let dt_cfl = if smax > 0.0 { CFL * g.dx / smax } else { f64::INFINITY };
        let dt_stable = dt_cfl.min(self.inputs.dt_max);
        if dt_stable < DT_UNDERFLOW {
            return Err(OsseError::Unstable { dt: dt_stable, t: state.t });
        }
        let dt = dt_stable.min(dt_cap);
        self.boundary_rates(state, dt);
        let k_dt = dt / g.dx;
        for i in 0..nx + 2 {
            if i < nx {
                self.load_x(state, i);
            }
            if (1..nx).contains(&i) {
                self.face_x(state, i - 1);
            }
            if (1..=nx).contains(&i) {
                self.limit_x(state, i - 1, k_dt, dt);
            }
            if i >= 2 {
                self.commit_x(state, i - 2, dt);
                self.column_y(state, i - 2, dt)?;
            }
        }
        state.t += dt;
        Ok(dt)
    }

    fn load_x(&mut self, state: &HydroState, i: usize) {
        let ny = self.case.grid.ny;
        let Some((lo, hi)) = self.lod[i] else { return };
        let n = hi - lo + 1;
        let k = i * ny + lo;
        load_row(
            &state.h[k..k + n],
            &state.qx[k..k + n],
            &state.qy[k..k + n],
            self.xcell.row((i % RING) * ny + lo, n),
        );
    }

    /// Faces between columns `c` and `c + 1`.
    fn face_x(&mut self, state: &HydroState, c: usize) {
        let ny = self.case.grid.ny;
        let Some((lo, hi)) = self.fac[c] else { return };
        let n = hi - lo + 1;
        let (l, r) = (c * ny + lo, (c + 1) * ny + lo);
        let (sl, sr) = ((c % RING) * ny + lo, ((c + 1) % RING) * ny + lo);
        let zb = &self.case.zb;
        let x = &self.xcell;
        rusanov_row(
            &state.h[l..l + n],
            &state.h[r..r + n],
            &zb[l..l + n],
            &zb[r..r + n],
            (&x.un[sl..sl + n], &x.ut[sl..sl + n], &x.sp[sl..sl + n]),
            (&x.un[sr..sr + n], &x.ut[sr..sr + n], &x.sp[sr..sr + n]),
            self.xface.row(sl, n),
        );
    }

    fn limit_x(&mut self, state: &HydroState, c: usize, k_dt: f64, dt: f64) {
        let g = self.case.grid;
        let (nx, ny) = (g.nx, g.ny);
        let Some((lo, hi)) = self.lim[c] else { return };
        let n = hi - lo + 1;
        let s = (c % RING) * ny + lo;
        let sl = ((c + RING - 1) % RING) * ny + lo;
        let fl = if c > 0 { &self.xface.fh[sl..sl + n] } else { &self.zeros[lo..lo + n] };
        let fr = if c + 1 < nx { &self.xface.fh[s..s + n] } else { &self.zeros[lo..lo + n] };
        if c == nx - 1 {
            let area = g.cell_area();
            for j in lo..=hi {
                self.eloss[j] = self.east[j] * dt / area;
            }
        }
        let extra = if c == nx - 1 { &self.eloss[lo..lo + n] } else { &self.zeros[lo..lo + n] };
        let k = c * ny + lo;
        limit_row(&state.h[k..k + n], fl, fr, extra, k_dt, &mut self.xcell.th[s..s + n]);
        if c == nx - 1 {
            self.eloss[lo..=hi].fill(0.0);
        }
    }

    /// Apply the x-sweep update to column `c`.
    fn commit_x(&mut self, state: &mut HydroState, c: usize, dt: f64) {
        let g = self.case.grid;
        let (nx, ny) = (g.nx, g.ny);
        let Some((lo, hi)) = self.upd[c] else { return };
        let n = hi - lo + 1;
        let k_dt = dt / g.dx;
        let area = g.cell_area();
        let base = c * ny;
        let s = (c % RING) * ny;
        let sl = ((c + RING - 1) % RING) * ny;
        let sr = ((c + 1) % RING) * ny;
        let boundary = c == 0 || c == nx - 1;
        if c == 0 {
            for j in lo..=hi {
                let h0 = state.h[base + j];
                if self.west[j] > 0.0 {
                    let vol = self.west[j] * dt;
                    self.egain[j] = vol / area;
                    self.ledger.inflow += vol;
                    if h0 >= H_DRY {
                        let qin = self.west[j] / g.dx;
                        self.edqn[j] += k_dt * qin * qin / h0;
                    }
                } else {
                    self.edqn[j] += k_dt * wall_lo(h0, self.xcell.un[s + j], self.xcell.sp[s + j]);
                }
            }
        }
        if c == nx - 1 {
            for j in lo..=hi {
                let h0 = state.h[base + j];
                if self.east[j] > 0.0 {
                    let th = self.xcell.th[s + j];
                    let vol = th * self.east[j] * dt;
                    self.eloss[j] = vol / area;
                    self.ledger.outflow += vol;
                    if h0 >= H_DRY {
                        let qout = th * self.east[j] / g.dx;
                        self.edqn[j] -= k_dt * qout * qout / h0;
                    }
                } else {
                    self.edqn[j] += k_dt * wall_hi(h0, self.xcell.un[s + j], self.xcell.sp[s + j]);
                }
            }
        }
        let zero_face = FaceView {
            fh: &self.zeros[lo..lo + n],
            fm: &self.zeros[lo..lo + n],
            ft: &self.zeros[lo..lo + n],
            pl: &self.zeros[lo..lo + n],
            pr: &self.zeros[lo..lo + n],
        };
        let zero_face2 = FaceView { ..zero_face };
        let low = if c > 0 { self.xface.view(sl + lo, n) } else { zero_face };
        let high = if c + 1 < nx { self.xface.view(s + lo, n) } else { zero_face2 };
        let th = &self.xcell.th;
        let th_high = if c + 1 < nx { &th[sr + lo..sr + lo + n] } else { &self.zeros[lo..lo + n] };
        let th_low = if c > 0 { &th[sl + lo..sl + lo + n] } else { &self.zeros[lo..lo + n] };
        let extra = if boundary {
            Extra {
                loss: &self.eloss[lo..lo + n],
                gain: &self.egain[lo..lo + n],
                dqn: &self.edqn[lo..lo + n],
            }
        } else {
            Extra {
                loss: &self.zeros[lo..lo + n],
                gain: &self.zeros[lo..lo + n],
                dqn: &self.zeros[lo..lo + n],
            }
        };
        let k = base + lo;
        update_row(
            &mut state.h[k..k + n],
            &mut state.qx[k..k + n],
            &mut state.qy[k..k + n],
            low,
            high,
            (th_low, &th[s + lo..s + lo + n], th_high),
            extra,
            k_dt,
        );
        if boundary {
            self.eloss[lo..=hi].fill(0.0);
            self.egain[lo..=hi].fill(0.0);
            self.edqn[lo..=hi].fill(0.0);
        }
    }

    /// y sweep, friction and sanity check for column `c`.
    fn column_y(&mut self, state: &mut HydroState, c: usize, dt: f64) -> Result<()> {
        let g = self.case.grid;
        let ny = g.ny;
        let base = c * ny;
        let k_dt = dt / g.dx;
        let Some((ulo, uhi)) = self.upd[c] else { return Ok(()) };
        let h = &mut state.h[base..base + ny];
        let qx = &mut state.qx[base..base + ny];
        let qy = &mut state.qy[base..base + ny];
        let rows = active_rows(&h[ulo..=uhi])
            .map(|(a, b)| ((ulo + a).saturating_sub(1), (ulo + b + 1).min(ny - 1)));
        if let Some((lo, hi)) = rows {
            let n = hi - lo + 1;
            let zb = &self.case.zb[base..base + ny];
            load_row(&h[lo..=hi], &qy[lo..=hi], &qx[lo..=hi], self.ycell.row(lo, n));
            // face below row j is stored at j; the two edge faces are dry
            self.yface.zero(lo);
            self.yface.zero(hi + 1);
            if n > 1 {
                let y = &self.ycell;
                rusanov_row(
                    &h[lo..hi],
                    &h[lo + 1..=hi],
                    &zb[lo..hi],
                    &zb[lo + 1..=hi],
                    (&y.un[lo..hi], &y.ut[lo..hi], &y.sp[lo..hi]),
                    (&y.un[lo + 1..=hi], &y.ut[lo + 1..=hi], &y.sp[lo + 1..=hi]),
                    self.yface.row(lo + 1, n - 1),
                );
            }
            limit_row(
                &h[lo..=hi],
                &self.yface.fh[lo..=hi],
                &self.yface.fh[lo + 1..hi + 2],
                &self.zeros[lo..=hi],
                k_dt,
                &mut self.ycell.th[lo + 1..hi + 2],
            );
            if lo == 0 {
                self.edqn[0] = k_dt * wall_lo(h[0], self.ycell.un[0], self.ycell.sp[0]);
            }
            if hi == ny - 1 {
                let j = ny - 1;
                self.edqn[j] = k_dt * wall_hi(h[j], self.ycell.un[j], self.ycell.sp[j]);
            }
            let th = &self.ycell.th;
            update_row(
                &mut h[lo..=hi],
                &mut qy[lo..=hi],
                &mut qx[lo..=hi],
                self.yface.view(lo, n),
                self.yface.view(lo + 1, n),
                (&th[lo..lo + n], &th[lo + 1..lo + 1 + n], &th[lo + 2..lo + 2 + n]),
                Extra {
                    loss: &self.zeros[lo..=hi],
                    gain: &self.zeros[lo..=hi],
                    dqn: &self.edqn[lo..=hi],
                },
                k_dt,
            );
            self.edqn[0] = 0.0;
            self.edqn[ny - 1] = 0.0;
        }

        // friction over every row either sweep may have touched
        let Some((lo, hi)) = span_union(rows, self.upd[c]) else { return Ok(()) };
        let fric = &self.fric[base + lo..=base + hi];
        let (hs, qx, qy) = (&h[lo..=hi], &mut qx[lo..=hi], &mut qy[lo..=hi]);
        let mut finite = true;
        for k in 0..hs.len() {
            let hk = hs[k];
            let hw = hk.max(H_DRY);
            let speed = (qx[k] * qx[k] + qy[k] * qy[k]).sqrt() / hw;
            let denom = 1.0 + dt * fric[k] * speed / pow_four_thirds(hw);
            let keep = if hk >= H_DRY { 1.0 / denom } else { 0.0 };
            qx[k] *= keep;
            qy[k] *= keep;
            finite &= hk.is_finite() && qx[k].is_finite() && qy[k].is_finite();
        }
        if !finite {
            let k = (0..hs.len())
                .find(|&k| !(hs[k].is_finite() && qx[k].is_finite() && qy[k].is_finite()))
                .unwrap_or(0);
            let variable = if !hs[k].is_finite() {
                "h"
            } else if !qx[k].is_finite() {
                "qx"
            } else {
                "qy"
            };
            return Err(OsseError::NonFinite { variable, i: c, j: lo + k, t: state.t });
        }
        Ok(())
    }

    /// Integrate to `t_end`, landing exactly on every record time. `observe`
    /// sees the state at each record time (including `state.t` itself if listed).
    pub fn run_observed<F>(
        &mut self,
        state: &mut HydroState,
        t_end: f64,
        record_times: &[f64],
        mut observe: F,
    ) -> Result<usize>
    where
        F: FnMut(&HydroState, &MassLedger) -> Result<()>,
    {
        if record_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(OsseError::invalid("record times must be sorted"));
        }
        if record_times.iter().any(|&t| t < state.t || t > t_end) {
            return Err(OsseError::invalid(format!(
                "record times must lie within [{}, {t_end}]",
                state.t
            )));
        }
        let mut steps = 0;
        let mut targets = record_times.iter().copied().peekable();
        loop {
            while let Some(&tr) = targets.peek() {
                if tr <= state.t {
                    observe(state, &self.ledger)?;
                    targets.next();
                } else {
                    break;
                }
            }
            if state.t >= t_end {
                break;
            }
            let target = targets.peek().copied().unwrap_or(t_end).min(t_end);
            let remaining = target - state.t;
            self.step(state, remaining)?;
            steps += 1;
            if state.t >= target || target - state.t <= 1e-9 * target.abs().max(1.0) {
                state.t = target;
            }
        }
        Ok(steps)
    }

    /// Integrate and keep a snapshot at every record time. The final state is
    /// always the last snapshot; the ledger opens with the initial storage.
    pub fn run(&mut self, state: &HydroState, t_end: f64, record_times: &[f64]) -> Result<RunOutput> {
        let area = self.case.grid.cell_area();
        let mut st = state.clone();
        let mut snapshots = Vec::new();
        let mut ledger = vec![LedgerRow {
            t: st.t,
            inflow_m3: self.ledger.inflow,
            outflow_m3: self.ledger.outflow,
            storage_m3: st.volume(area),
        }];
        let steps = self.run_observed(&mut st, t_end, record_times, |s, l| {
            snapshots.push(s.clone());
            ledger.push(LedgerRow {
                t: s.t,
                inflow_m3: l.inflow,
                outflow_m3: l.outflow,
                storage_m3: s.volume(area),
            });
            Ok(())
        })?;
        if snapshots.last().map(|s| s.t) != Some(st.t) {
            ledger.push(LedgerRow {
                t: st.t,
                inflow_m3: self.ledger.inflow,
                outflow_m3: self.ledger.outflow,
                storage_m3: st.volume(area),
            });
            snapshots.push(st);
        }
        Ok(RunOutput { snapshots, ledger, steps })
    }
}

/// `h^(4/3)` for `h > 0`. A bit-level cube-root estimate refined by two
/// Halley steps; relative error below 1e-14.
#[inline]
pub(crate) fn pow_four_thirds(h: f64) -> f64 {
    let mut y = f64::from_bits(h.to_bits() / 3 + 0x2A9F_7893_782D_A1CE);
    for _ in 0..2 {
        let y3 = y * y * y;
        y *= (y3 + 2.0 * h) / (2.0 * y3 + h);
    }
    h * y
}

/// Weight used to share a boundary discharge across cells.
#[inline]
fn conveyance_weight(h: f64) -> f64 {
    if h >= H_DRY {
        h * h.cbrt() * h.cbrt()
    } else {
        0.0
    }
}

pub fn wse_at(state: &HydroState, case: &DomainCase, cell: (usize, usize)) -> f64 {
    let k = case.grid.idx(cell.0, cell.1);
    case.zb[k] + state.h[k]
}

/// Bilinear WSE from the four surrounding cell centers, using wet cells only
/// with renormalized weights. `Ok(None)` when all contributing cells are dry.
pub fn wse_interp(state: &HydroState, case: &DomainCase, x: f64, y: f64) -> Result<Option<f64>> {
    let g = case.grid;
    let (xmin, ymin, xmax, ymax) = g.extent();
    if !(x >= xmin && x <= xmax && y >= ymin && y <= ymax) {
        return Err(OsseError::OutOfExtent { x, y });
    }
    let axis = |v: f64, v0: f64, n: usize| -> (usize, f64) {
        let f = ((v - v0) / g.dx).clamp(0.0, (n - 1) as f64);
        let i0 = (f.floor() as usize).min(n - 2);
        (i0, f - i0 as f64)
    };
    let (i0, fx) = axis(x, g.x0, g.nx);
    let (j0, fy) = axis(y, g.y0, g.ny);
    let mut num = 0.0;
    let mut den = 0.0;
    for (di, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dj, wy) in [(0, 1.0 - fy), (1, fy)] {
            let w = wx * wy;
            let k = g.idx(i0 + di, j0 + dj);
            if w > 0.0 && state.h[k] >= H_DRY {
                num += w * (case.zb[k] + state.h[k]);
                den += w;
            }
        }
    }
    Ok(if den > 0.0 { Some(num / den) } else { None })
}
