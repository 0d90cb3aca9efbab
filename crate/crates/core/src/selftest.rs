//! Fast numerical self-checks behind `osse selftest oracle`. Each check has
//! an independent reference and a pass threshold.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::case::{build_synthetic_reach, CaseSpec};
use crate::enkf::{gain, AnalysisBatch, ObsMeta, ObsRow, Source};
use crate::obs::Anamorphosis;
use crate::rng::stream;
use crate::swe::{HydroState, ModelInputs, Solver};

pub type Check = (&'static str, std::result::Result<String, String>);

pub fn run_all() -> Vec<Check> {
    vec![
        ("lake_at_rest", lake_at_rest()),
        ("gain_explicit_inverse", gain_vs_inverse()),
        ("anamorphosis_roundtrip", anamorphosis_roundtrip()),
    ]
}

fn lake_at_rest() -> std::result::Result<String, String> {
    let spec = CaseSpec { nx: 60, ny: 24, ..CaseSpec::default() };
    let case = build_synthetic_reach(&spec).map_err(|e| e.to_string())?;
    let eta = case.zb.iter().copied().fold(f64::INFINITY, f64::min) + 3.0;
    let mut s = HydroState::lake_at_rest(&case, eta);
    let s0 = s.clone();
    let inputs = ModelInputs { ks: vec![30.0; case.zone_count()], inflow: None, outlet: None, dt_max: 30.0 };
    let mut solver = Solver::new(&case, inputs).map_err(|e| e.to_string())?;
    for _ in 0..200 {
        solver.step(&mut s, f64::INFINITY).map_err(|e| e.to_string())?;
    }
    let mut umax: f64 = 0.0;
    let mut drift: f64 = 0.0;
    for k in 0..s.h.len() {
        if s.h[k] > 0.0 {
            umax = umax.max(s.qx[k].abs().max(s.qy[k].abs()) / s.h[k]);
        }
        drift = drift.max((s.h[k] - s0.h[k]).abs());
    }
    let msg = format!("max |u| {umax:.1e} m/s, max depth drift {drift:.1e} m");
    if umax < 1e-10 && drift < 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gain_vs_inverse() -> std::result::Result<String, String> {
    let mut rng = stream(11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, d, m) = (5, 3, 3);
        let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let rows = (0..m)
            .map(|j| ObsRow {
                meta: ObsMeta { source: Source::Gauge, id: j.to_string(), t: 0.0 },
                y: 0.0,
                r: rng.gen_range(0.1..2.0),
                equivalents: (0..n).map(|_| Some(rng.sample::<f64, _>(StandardNormal))).collect(),
            })
            .collect();
        let b = AnalysisBatch::new(x, rows).map_err(|e| e.to_string())?;
        let k = gain(&b).map_err(|e| e.to_string())?;
        let nf = n as f64;
        let xm = DMatrix::from_fn(n, d, |i, j| b.x[(i, j)] - b.x.column(j).mean());
        let ym = DMatrix::from_fn(n, m, |i, j| b.y_eq[(i, j)] - b.y_eq.column(j).mean());
        let cyy = ym.transpose() * &ym / (nf - 1.0) + DMatrix::from_diagonal(&b.r);
        let kb = xm.transpose() * &ym / (nf - 1.0) * cyy.try_inverse().ok_or("singular reference")?;
        for (a, e) in k.iter().zip(kb.iter()) {
            worst = worst.max((a - e).abs() / e.abs().max(1.0));
        }
    }
    let msg = format!("max scaled difference {worst:.1e}");
    if worst <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn anamorphosis_roundtrip() -> std::result::Result<String, String> {
    let mut rng = stream(12);
    let values: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
    let a = Anamorphosis::fit(&values).map_err(|e| e.to_string())?;
    let worst = values
        .iter()
        .map(|&v| (a.inverse(a.transform(v)) - v).abs())
        .fold(0.0, f64::max);
    let msg = format!("max round-trip error {worst:.1e}");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
