//! The analysed control vector, its prior ensemble, and member propagation.

use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::case::DomainCase;
use crate::error::{OsseError, Result};
use crate::rng::{self, derive_seed_path};
use crate::swe::{HydroState, Hydrograph, ModelInputs, RatingCurve, Solver, H_DRY, KS_MAX, KS_MIN};

pub const Q_MULT_BOUNDS: (f64, f64) = (0.2, 3.0);
pub const DH_BOUNDS: (f64, f64) = (-2.0, 2.0);

/// Friction per zone, inflow multiplier, and per-subdomain depth correction.
/// Flattens to `(ks..., q_mult, dh...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    pub ks: Vec<f64>,
    pub q_mult: f64,
    /// `dh[s - 1]` applies to floodplain subdomain `s`.
    pub dh: Vec<f64>,
}

impl ControlVector {
    pub fn new(ks: Vec<f64>, q_mult: f64, dh: Vec<f64>) -> Self {
        Self { ks, q_mult, dh }
    }

    pub fn dim(&self) -> usize {
        self.ks.len() + 1 + self.dh.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.ks);
        v.push(self.q_mult);
        v.extend_from_slice(&self.dh);
        v
    }

    pub fn unflatten(v: &[f64], zones: usize, subdomains: usize) -> Result<Self> {
        if v.len() != zones + 1 + subdomains {
            return Err(OsseError::invalid(format!(
                "control vector of length {} does not match {zones} zones and {subdomains} subdomains",
                v.len()
            )));
        }
        Ok(Self {
            ks: v[..zones].to_vec(),
            q_mult: v[zones],
            dh: v[zones + 1..].to_vec(),
        })
    }

    pub fn clip(&mut self) {
        for k in &mut self.ks {
            *k = k.clamp(KS_MIN, KS_MAX);
        }
        self.q_mult = self.q_mult.clamp(Q_MULT_BOUNDS.0, Q_MULT_BOUNDS.1);
        for d in &mut self.dh {
            *d = d.clamp(DH_BOUNDS.0, DH_BOUNDS.1);
        }
    }

    pub fn within_bounds(&self) -> bool {
        self.ks.iter().all(|k| (KS_MIN..=KS_MAX).contains(k))
            && (Q_MULT_BOUNDS.0..=Q_MULT_BOUNDS.1).contains(&self.q_mult)
            && self.dh.iter().all(|d| (DH_BOUNDS.0..=DH_BOUNDS.1).contains(d))
    }

    /// Element names in flattened order.
    pub fn labels(zones: usize, subdomains: usize) -> Vec<String> {
        (0..zones)
            .map(|z| format!("ks_{z}"))
            .chain(std::iter::once("q_mult".to_string()))
            .chain((1..=subdomains).map(|s| format!("dh_{s}")))
            .collect()
    }
}

/// Gaussian prior per flattened element.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub mean: ControlVector,
    pub std: ControlVector,
    pub seed: u64,
    /// When false the depth corrections stay at zero and are not analysed.
    pub with_dh: bool,
}

impl PerturbationSpec {
    pub fn with_defaults(zones: usize, subdomains: usize, seed: u64, with_dh: bool) -> Self {
        Self {
            mean: ControlVector::new(vec![30.0; zones], 1.0, vec![0.0; subdomains]),
            std: ControlVector::new(vec![3.0; zones], 0.15, vec![0.25; subdomains]),
            seed,
            with_dh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.ks.len() != self.std.ks.len() || self.mean.dh.len() != self.std.dh.len() {
            return Err(OsseError::invalid("prior mean and std have different shapes"));
        }
        if self.std.flatten().iter().any(|s| !(*s > 0.0)) {
            return Err(OsseError::invalid("prior standard deviations must be positive"));
        }
        Ok(())
    }

    /// Flattened indices that take part in the analysis.
    pub fn active(&self) -> Vec<usize> {
        let n = self.mean.ks.len() + 1;
        let dh = if self.with_dh { self.mean.dh.len() } else { 0 };
        (0..n + dh).collect()
    }

    pub fn member_seed(&self, member: usize) -> u64 {
        derive_seed_path(self.seed, &[rng::label::PRIOR, member as u64])
    }

    /// One unclipped draw for `member`.
    pub fn draw_raw(&self, member: usize) -> ControlVector {
        let mut r = rng::stream(self.member_seed(member));
        let mut draw = |m: f64, s: f64| Normal::new(m, s).expect("positive std").sample(&mut r);
        let ks = self.mean.ks.iter().zip(&self.std.ks).map(|(&m, &s)| draw(m, s)).collect();
        let q_mult = draw(self.mean.q_mult, self.std.q_mult);
        let dh = if self.with_dh {
            self.mean.dh.iter().zip(&self.std.dh).map(|(&m, &s)| draw(m, s)).collect()
        } else {
            vec![0.0; self.mean.dh.len()]
        };
        ControlVector { ks, q_mult, dh }
    }

    /// Fresh zero-mean depth corrections for one member at one cycle.
    pub fn redraw_dh(&self, member: usize, cycle: usize) -> Vec<f64> {
        if !self.with_dh {
            return vec![0.0; self.mean.dh.len()];
        }
        let seed = derive_seed_path(self.seed, &[rng::label::DH_REDRAW, cycle as u64, member as u64]);
        let mut r = rng::stream(seed);
        self.std
            .dh
            .iter()
            .map(|&s| Normal::new(0.0, s).expect("positive std").sample(&mut r))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<ControlVector>,
    /// Restart state of each member at the start of the current cycle.
    pub states: Vec<HydroState>,
    pub member_seeds: Vec<u64>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Per-element ensemble mean and sample standard deviation.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let rows: Vec<Vec<f64>> = self.members.iter().map(|m| m.flatten()).collect();
        column_moments(&rows)
    }

    /// `ensemble_<cycle>.csv`: one row per member, flattened control and seed.
    pub fn to_csv(&self) -> String {
        let Some(first) = self.members.first() else {
            return String::new();
        };
        let labels = ControlVector::labels(first.ks.len(), first.dh.len());
        let mut s = String::from("member,");
        s.push_str(&labels.join(","));
        s.push_str(",seed\n");
        for (i, (m, seed)) in self.members.iter().zip(&self.member_seeds).enumerate() {
            let _ = write!(s, "{i}");
            for v in m.flatten() {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{seed}");
        }
        s
    }
}

pub fn column_moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    if rows.len() > 1 {
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / (n - 1.0);
            }
        }
    }
    (mean, std.into_iter().map(f64::sqrt).collect())
}

/// Draw `n` members from the prior, clipped to bounds, all starting from `initial`.
pub fn sample_prior(spec: &PerturbationSpec, n: usize, initial: &HydroState) -> Result<Ensemble> {
    if n < 2 {
        return Err(OsseError::invalid("an ensemble needs at least 2 members"));
    }
    spec.validate()?;
    let members = (0..n)
        .map(|i| {
            let mut cv = spec.draw_raw(i);
            cv.clip();
            cv
        })
        .collect();
    Ok(Ensemble {
        members,
        states: vec![initial.clone(); n],
        member_seeds: (0..n).map(|i| spec.member_seed(i)).collect(),
    })
}

/// Boundary forcing shared by every member.
#[derive(Debug, Clone)]
pub struct Forcing {
    pub baseline: Hydrograph,
    pub outlet: RatingCurve,
    pub dt_max: f64,
}

/// Map a control vector onto solver inputs and a corrected restart state.
///
/// Depth corrections act on wet floodplain cells only; riverbed cells and dry
/// floodplain cells are left untouched. Velocities are kept where water
/// remains.
pub fn apply_control(
    cv: &ControlVector,
    case: &DomainCase,
    forcing: &Forcing,
    restart: &HydroState,
) -> Result<(ModelInputs, HydroState)> {
    if cv.ks.len() != case.zone_count() || cv.dh.len() != case.subdomain_count() {
        return Err(OsseError::invalid("control vector shape does not match the case"));
    }
    let inputs = ModelInputs {
        ks: cv.ks.clone(),
        inflow: Some(forcing.baseline.scaled(cv.q_mult)),
        outlet: Some(forcing.outlet),
        dt_max: forcing.dt_max,
    };
    let mut state = restart.clone();
    if cv.dh.iter().any(|&d| d != 0.0) {
        for k in 0..state.h.len() {
            let sub = case.subdomain[k];
            let h = state.h[k];
            if sub == 0 || h < H_DRY {
                continue;
            }
            let hn = (h + cv.dh[sub - 1]).max(0.0);
            if hn < H_DRY {
                state.qx[k] = 0.0;
                state.qy[k] = 0.0;
            } else {
                state.qx[k] *= hn / h;
                state.qy[k] *= hn / h;
            }
            state.h[k] = hn;
        }
    }
    Ok((inputs, state))
}

/// Result of running one member over a window.
#[derive(Debug, Clone)]
pub struct MemberRun<S> {
    pub restart: HydroState,
    pub records: Vec<S>,
}

/// Run every member from its restart state to `t1`, extracting a record at
/// each of `record_times`. Members are independent; the output order follows
/// member order regardless of scheduling.
pub fn propagate<S, F>(
    ens: &Ensemble,
    case: &DomainCase,
    forcing: &Forcing,
    t1: f64,
    record_times: &[f64],
    extract: F,
) -> Result<Vec<MemberRun<S>>>
where
    S: Send,
    F: Fn(usize, &HydroState) -> S + Sync,
{
    (0..ens.len())
        .into_par_iter()
        .map(|m| {
            run_member(&ens.members[m], &ens.states[m], case, forcing, t1, record_times, |s| extract(m, s))
                .map_err(|e| OsseError::Member {
                    member: m,
                    source: Box::new(e),
                })
        })
        .collect()
}

pub fn run_member<S>(
    cv: &ControlVector,
    restart: &HydroState,
    case: &DomainCase,
    forcing: &Forcing,
    t1: f64,
    record_times: &[f64],
    mut extract: impl FnMut(&HydroState) -> S,
) -> Result<MemberRun<S>> {
    let (inputs, mut state) = apply_control(cv, case, forcing, restart)?;
    let mut solver = Solver::new(case, inputs)?;
    let mut records = Vec::with_capacity(record_times.len());
    solver.run_observed(&mut state, t1, record_times, |s, _| {
        records.push(extract(s));
        Ok(())
    })?;
    Ok(MemberRun {
        restart: state,
        records,
    })
}
